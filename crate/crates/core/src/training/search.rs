//! Random search raced with successive halving.
//!
//! Rung `r` trains its trials for `min_iterations * eta^r` epochs (capped at
//! `max_iterations`); the best `ceil(n / eta)` trials move up. Rungs continue
//! while at least two trials would survive.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const DEFAULT_SEARCH_SPACE: &str = include_str!("../../assets/default_search_space.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Distribution {
    IntUniform { low: i64, high: i64 },
    Uniform { low: f64, high: f64 },
    LogUniform { low: f64, high: f64 },
    Categorical { choices: Vec<Value> },
}

impl Distribution {
    fn validate(&self, name: &str) -> Result<()> {
        let ok = match self {
            Self::IntUniform { low, high } => low <= high,
            Self::Uniform { low, high } => low.is_finite() && high.is_finite() && low <= high,
            Self::LogUniform { low, high } => *low > 0.0 && high.is_finite() && low <= high,
            Self::Categorical { choices } => !choices.is_empty(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid distribution for {name}: {self:?}")))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Value {
        match self {
            Self::IntUniform { low, high } => Value::from(rng.random_range(*low..=*high)),
            Self::Uniform { low, high } => Value::from(if low == high {
                *low
            } else {
                rng.random_range(*low..*high)
            }),
            Self::LogUniform { low, high } => Value::from(if low == high {
                *low
            } else {
                rng.random_range(low.ln()..high.ln()).exp()
            }),
            Self::Categorical { choices } => choices[rng.random_range(0..choices.len())].clone(),
        }
    }
}

fn default_eta() -> f64 {
    2.0
}
fn default_min_iterations() -> usize {
    3
}
fn default_max_iterations() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    /// Number of sampled configurations.
    pub budget: usize,
    #[serde(default = "default_eta")]
    pub halving_eta: f64,
    #[serde(default = "default_min_iterations")]
    pub min_iterations: usize,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default)]
    pub seed: u64,
    /// Config key to distribution.
    pub params: BTreeMap<String, Distribution>,
}

impl SearchSpace {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text).map_err(Error::from_json)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn default_space() -> Self {
        Self::from_json(DEFAULT_SEARCH_SPACE).expect("bundled search space is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget < 1 {
            return Err(Error::Config("search budget must be >= 1".into()));
        }
        if !(self.halving_eta > 1.0 && self.halving_eta.is_finite()) {
            return Err(Error::Config(format!(
                "halving_eta must be > 1, got {}",
                self.halving_eta
            )));
        }
        if self.min_iterations < 1 || self.max_iterations < self.min_iterations {
            return Err(Error::Config(format!(
                "need 1 <= min_iterations ({}) <= max_iterations ({})",
                self.min_iterations, self.max_iterations
            )));
        }
        for (k, d) in &self.params {
            d.validate(k)?;
        }
        Ok(())
    }

    /// `budget` independent draws, one value per parameter.
    pub fn sample_points(&self) -> Vec<Map<String, Value>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.budget)
            .map(|_| {
                self.params
                    .iter()
                    .map(|(k, d)| (k.clone(), d.sample(&mut rng)))
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rung {
    pub rung: usize,
    pub trials: usize,
    pub epochs: usize,
}

pub fn halving_schedule(
    budget: usize,
    eta: f64,
    min_iterations: usize,
    max_iterations: usize,
) -> Vec<Rung> {
    let mut rungs = Vec::new();
    if budget == 0 {
        return rungs;
    }
    let mut n = budget;
    let mut epochs = min_iterations as f64;
    loop {
        rungs.push(Rung {
            rung: rungs.len(),
            trials: n,
            epochs: (epochs.round() as usize).min(max_iterations),
        });
        let next = (n as f64 / eta).ceil() as usize;
        if next < 2 || next >= n {
            break;
        }
        n = next;
        epochs *= eta;
    }
    rungs
}

/// One evaluated (configuration, rung) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub rung: usize,
    pub epochs: usize,
    pub objective: Option<f64>,
    /// The sampled point as a JSON object.
    pub config: String,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub best_trial: usize,
    pub best_rung: usize,
    pub best_objective: f64,
    pub best_config: Map<String, Value>,
    pub trials: Vec<TrialRecord>,
}

/// Races the sampled points. `objective(point, epochs)` trains one
/// configuration for `epochs` epochs and returns its validation score
/// (higher is better). Trials within a rung run in parallel. When
/// `table_path` is given the trial table is rewritten after every rung.
pub fn search_hyperparameters<F>(
    space: &SearchSpace,
    objective: F,
    table_path: Option<&Path>,
) -> Result<SearchResult>
where
    F: Fn(&Map<String, Value>, usize) -> Result<f64> + Sync,
{
    space.validate()?;
    let points = space.sample_points();
    let schedule = halving_schedule(
        space.budget,
        space.halving_eta,
        space.min_iterations,
        space.max_iterations,
    );
    let mut records: Vec<TrialRecord> = Vec::new();
    let mut alive: Vec<usize> = (0..points.len()).collect();

    for rung in &schedule {
        alive.truncate(rung.trials);
        let results: Vec<Result<f64>> = alive
            .par_iter()
            .map(|&t| {
                objective(&points[t], rung.epochs).and_then(|v| {
                    if v.is_finite() {
                        Ok(v)
                    } else {
                        Err(Error::NonFinite(format!("objective {v}")))
                    }
                })
            })
            .collect();
        let mut scored = Vec::new();
        for (&t, r) in alive.iter().zip(results) {
            let config = Value::Object(points[t].clone()).to_string();
            let (objective, error) = match r {
                Ok(v) => {
                    scored.push((t, v));
                    (Some(v), None)
                }
                Err(e) => {
                    ::log::warn!("trial {t} rung {} failed: {e}", rung.rung);
                    (None, Some(e.to_string()))
                }
            };
            records.push(TrialRecord {
                trial: t,
                rung: rung.rung,
                epochs: rung.epochs,
                objective,
                config,
                error,
            });
        }
        if let Some(path) = table_path {
            write_trial_table(&records, path)?;
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        alive = scored.into_iter().map(|(t, _)| t).collect();
        if alive.is_empty() {
            break;
        }
    }

    let best = records
        .iter()
        .filter_map(|r| r.objective.map(|o| (r, o)))
        .max_by(|(a, oa), (b, ob)| {
            oa.total_cmp(ob)
                .then(a.rung.cmp(&b.rung))
                .then(b.trial.cmp(&a.trial))
        });
    match best {
        Some((r, o)) => Ok(SearchResult {
            best_trial: r.trial,
            best_rung: r.rung,
            best_objective: o,
            best_config: points[r.trial].clone(),
            trials: records,
        }),
        None => Err(Error::AllTrialsFailed {
            trials: records.len(),
            first: records
                .first()
                .and_then(|r| r.error.clone())
                .unwrap_or_else(|| "no trials ran".into()),
        }),
    }
}

/// Writes the table through a temporary file in the same directory and a
/// rename, so readers never observe a partial table.
pub fn write_trial_table(records: &[TrialRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile_in(dir, path)?;
    {
        let mut w = csv::Writer::from_writer(&mut tmp.1);
        w.write_record(["trial", "rung", "epochs", "objective", "config", "error"])
            .map_err(|e| Error::MalformedLog(e.to_string()))?;
        for r in records {
            w.write_record([
                r.trial.to_string(),
                r.rung.to_string(),
                r.epochs.to_string(),
                r.objective.map(|o| o.to_string()).unwrap_or_default(),
                r.config.clone(),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(|e| Error::MalformedLog(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&tmp.0, e))?;
    }
    tmp.1.sync_all().map_err(|e| Error::io(&tmp.0, e))?;
    std::fs::rename(&tmp.0, path).map_err(|e| Error::io(path, e))
}

fn tempfile_in(dir: &Path, target: &Path) -> Result<(std::path::PathBuf, std::fs::File)> {
    let name = target
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "trials.csv".into());
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.flush().map_err(|e| Error::io(&tmp, e))?;
    Ok((tmp, f))
}

pub fn read_trial_table(path: impl AsRef<Path>) -> Result<Vec<TrialRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        k => Error::MalformedLog(format!("{}: {k:?}", path.display())),
    })?;
    let bad = |i: usize, what: &str| {
        Error::MalformedLog(format!("{} row {}: bad {what}", path.display(), i + 1))
    };
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::MalformedLog(format!("{}: {e}", path.display())))?;
        if rec.len() != 6 {
            return Err(bad(i, "column count"));
        }
        let opt = |s: &str| (!s.is_empty()).then(|| s.to_owned());
        out.push(TrialRecord {
            trial: rec[0].parse().map_err(|_| bad(i, "trial"))?,
            rung: rec[1].parse().map_err(|_| bad(i, "rung"))?,
            epochs: rec[2].parse().map_err(|_| bad(i, "epochs"))?,
            objective: match &rec[3] {
                "" => None,
                s => Some(s.parse().map_err(|_| bad(i, "objective"))?),
            },
            config: rec[4].to_owned(),
            error: opt(&rec[5]),
        });
    }
    Ok(out)
}
