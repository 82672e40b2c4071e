//! The toy noise-trend experiment: CMIL against the per-crop baseline on
//! synthetic bags at several duplication factors.
//!
//! For every data seed and noise level each method trains once per candidate
//! learning rate; the run with the best validation rank-1 is scored on the
//! test identities. Reported numbers are means over seeds.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::DistanceKind;
use crate::bag_data::{compute_bag_statistics, generate_synthetic_weak_labels, NoiseSpec};
use crate::error::Result;
use crate::evaluation::{evaluate, EvalOptions};
use crate::features::CropStore;
use crate::losses::LossConfig;
use crate::models::{AccumulatorConfig, AccumulatorKind, ExtractorConfig};
use crate::sampling::SamplerConfig;
use crate::synth::{generate_synthetic, SynthConfig};
use crate::training::{train, train_crop_baseline, BaselineConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cmil,
    CropBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendConfig {
    pub synth: SynthConfig,
    pub data_seeds: Vec<u64>,
    pub duplication_factors: Vec<u32>,
    pub learning_rates: Vec<f64>,
    pub noise_seed: u64,
    pub cmil: TrainConfig,
    pub baseline: BaselineConfig,
}

impl Default for TrendConfig {
    fn default() -> Self {
        let extractor = ExtractorConfig {
            feature_norm: true,
            ..ExtractorConfig::toy_mlp(32, 16, vec![])
        };
        Self {
            synth: SynthConfig {
                within_std: 0.2,
                val_identities: 30,
                test_identities: 100,
                ..SynthConfig::default()
            },
            data_seeds: (0..5).collect(),
            duplication_factors: vec![1, 4],
            learning_rates: vec![0.03, 0.1, 0.3],
            noise_seed: 7,
            cmil: TrainConfig {
                learning_rate: 0.1,
                epochs: 1000,
                fixbase_epochs: 0,
                early_stop_patience: 0,
                seed: 0,
                sampler: SamplerConfig {
                    subbag_size: 6,
                    batch_size: 10,
                    seed: 0,
                },
                losses: LossConfig {
                    distance: DistanceKind::Cosine,
                    ..LossConfig::default()
                },
                extractor: extractor.clone(),
                accumulator: AccumulatorConfig::simple(AccumulatorKind::Mean),
            },
            baseline: BaselineConfig {
                learning_rate: 0.1,
                epochs: 1000,
                batch_crops: 60,
                early_stop_patience: 0,
                seed: 0,
                distance: DistanceKind::Cosine,
                extractor,
            },
        }
    }
}

/// One (seed, noise level, method) cell after learning-rate selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendRun {
    pub data_seed: u64,
    pub duplication_factor: u32,
    pub measured_noise: f64,
    pub method: Method,
    pub learning_rate: f64,
    pub val_rank1: f64,
    pub test_rank1: f64,
    pub test_map: f64,
    /// Wall time of the selected training run.
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub runs: Vec<TrendRun>,
}

impl TrendReport {
    pub fn mean_test_rank1(&self, method: Method, duplication_factor: u32) -> f64 {
        let v: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.method == method && r.duplication_factor == duplication_factor)
            .map(|r| r.test_rank1)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn max_train_seconds(&self) -> f64 {
        self.runs.iter().map(|r| r.train_seconds).fold(0.0, f64::max)
    }
}

pub fn run_trend(cfg: &TrendConfig) -> Result<TrendReport> {
    let mut runs = Vec::new();
    for &seed in &cfg.data_seeds {
        let data = generate_synthetic(&SynthConfig {
            seed,
            ..cfg.synth.clone()
        })?;
        for &k in &cfg.duplication_factors {
            let noisy = generate_synthetic_weak_labels(&data.train, &NoiseSpec::new(k, cfg.noise_seed)?)?;
            let measured_noise = compute_bag_statistics(&noisy).mean_noise.unwrap_or(0.0);
            let store = CropStore::from_manifest(&noisy, None)?;
            for method in [Method::Cmil, Method::CropBaseline] {
                let mut best: Option<TrendRun> = None;
                for &lr in &cfg.learning_rates {
                    let t = Instant::now();
                    let (out, distance) = match method {
                        Method::Cmil => {
                            let c = TrainConfig {
                                learning_rate: lr,
                                ..cfg.cmil.clone()
                            };
                            (train(&noisy, &store, Some(&data.val), &c)?, c.losses.distance)
                        }
                        Method::CropBaseline => {
                            let c = BaselineConfig {
                                learning_rate: lr,
                                ..cfg.baseline.clone()
                            };
                            (train_crop_baseline(&noisy, &store, Some(&data.val), &c)?, c.distance)
                        }
                    };
                    let train_seconds = t.elapsed().as_secs_f64();
                    let val_rank1 = out.best_val_rank1.unwrap_or(0.0);
                    if best.as_ref().is_some_and(|b| b.val_rank1 >= val_rank1) {
                        continue;
                    }
                    let test = evaluate(
                        &data.test,
                        &out.model.params,
                        &out.model.extractor,
                        distance,
                        &EvalOptions::default(),
                    )?;
                    best = Some(TrendRun {
                        data_seed: seed,
                        duplication_factor: k,
                        measured_noise,
                        method,
                        learning_rate: lr,
                        val_rank1,
                        test_rank1: test.rank1,
                        test_map: test.map,
                        train_seconds,
                    });
                }
                if let Some(b) = best {
                    ::log::info!(
                        "seed {seed} k={k} {:?}: lr {} val {:.3} test rank-1 {:.3}",
                        b.method,
                        b.learning_rate,
                        b.val_rank1,
                        b.test_rank1
                    );
                    runs.push(b);
                }
            }
        }
    }
    Ok(TrendReport { runs })
}
