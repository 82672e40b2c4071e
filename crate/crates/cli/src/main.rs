use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cmil::bag_data::{
    compute_bag_statistics, generate_synthetic_weak_labels, load_manifest, save_manifest,
    NoiseSpec,
};
use cmil::config::RunConfig;
use cmil::evaluation::{evaluate, EvalOptions, EvalSplit};
use cmil::features::CropStore;
use cmil::models::{load_checkpoint, save_checkpoint, Checkpoint};
use cmil::report::{
    comparison_row, render_plot_svg, validation_series, write_comparison_csv, write_series_csv,
};
use cmil::synth::{generate_synthetic, SynthConfig};
use cmil::training::{
    read_log_csv, search_hyperparameters, train, train_crop_baseline, write_log_csv,
    BaselineConfig, SearchSpace, TrainOutcome,
};

/// Weakly supervised person re-identification from bag-level labels.
#[derive(Parser)]
#[command(name = "cmil", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn a clean manifest into a weakly labeled one by duplicating crops
    /// into bags of other identities.
    Generate(GenerateArgs),
    /// Write a Gaussian-cluster toy dataset (train manifest, val and test splits).
    Synth(SynthArgs),
    /// Train a model from a run config.
    Train(TrainArgs),
    /// Score a checkpoint on a query/gallery split.
    Eval(EvalArgs),
    /// Random search with successive halving over a search space.
    Sweep(SweepArgs),
    /// Summarize training logs as series CSVs, plots and a comparison table.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// Run config (flat JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Clean manifest whose crops all carry their true identity.
    #[arg(long)]
    input: PathBuf,
    /// Target mislabeled fraction, one of k/(k+1) for k <= 10.
    #[arg(long, conflicts_with = "dup_factor", required_unless_present = "dup_factor")]
    noise: Option<f64>,
    /// Copies of each crop placed in other identities' bags.
    #[arg(long)]
    dup_factor: Option<u32>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    identities: usize,
    #[arg(long, default_value_t = 50)]
    crops_per_identity: usize,
    #[arg(long, default_value_t = 5)]
    bags_per_identity: usize,
    #[arg(long, default_value_t = 20)]
    test_identities: usize,
    #[arg(long, default_value_t = 10)]
    val_identities: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainArgs {
    /// Train the per-crop cross-entropy baseline instead of CMIL.
    #[arg(long)]
    baseline: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluation split JSON (queries, gallery, distractors).
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    exclude_same_camera: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SweepArgs {
    /// Search space JSON; defaults to the bundled space.
    #[arg(long)]
    space: Option<PathBuf>,
    /// Overrides the space's trial budget.
    #[arg(long)]
    budget: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ReportArgs {
    /// Training log CSVs, optionally named as NAME=PATH.
    #[arg(long = "log", required = true)]
    logs: Vec<String>,
    #[command(flatten)]
    common: Common,
}

fn main() {
    let level = std::env::var("CMIL_LOG_LEVEL").unwrap_or_else(|_| "info".into());
    env_logger::Builder::new().parse_filters(&level).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn out_dir(common: &Common, cfg: Option<&RunConfig>) -> Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .or_else(|| cfg.and_then(|c| c.paths.out.clone()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let seed = a.common.seed.unwrap_or(0);
    let spec = match (a.noise, a.dup_factor) {
        (Some(f), _) => NoiseSpec::from_noise_fraction(f, seed)?,
        (None, Some(k)) => NoiseSpec::new(k, seed)?,
        (None, None) => bail!("pass --noise or --dup-factor"),
    };
    let strong = load_manifest(&a.input)?;
    let weak = generate_synthetic_weak_labels(&strong, &spec)?;
    let dir = out_dir(&a.common, None)?;
    let path = dir.join("manifest.json");
    save_manifest(&weak, &path)?;
    let stats = compute_bag_statistics(&weak);
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "manifest": path,
            "duplication_factor": spec.duplication_factor,
            "target_noise": spec.target_noise(),
            "measured_noise": stats.mean_noise,
            "num_bags": stats.num_bags,
            "num_crops": stats.num_crops,
        }))?
    );
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        num_identities: a.identities,
        crops_per_identity: a.crops_per_identity,
        bags_per_identity: a.bags_per_identity,
        test_identities: a.test_identities,
        val_identities: a.val_identities,
        seed: a.common.seed.unwrap_or(0),
        ..SynthConfig::default()
    };
    let data = generate_synthetic(&cfg)?;
    let dir = out_dir(&a.common, None)?;
    save_manifest(&data.train, dir.join("train.json"))?;
    data.val.save(dir.join("val.json"))?;
    data.test.save(dir.join("test.json"))?;
    println!("wrote train.json, val.json and test.json to {}", dir.display());
    Ok(())
}

/// Loads the run config; relative paths inside it resolve against the
/// config file's directory, and every referenced input must exist.
fn load_run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let mut c = RunConfig::load(p)?;
            let base = p.parent().unwrap_or(Path::new(""));
            let slots = [&mut c.paths.train, &mut c.paths.val, &mut c.paths.test, &mut c.paths.out];
            for s in slots.into_iter().flatten() {
                if Path::new(s.as_str()).is_relative() {
                    *s = base.join(s.as_str()).to_string_lossy().into_owned();
                }
            }
            c
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    for (key, p) in [
        ("paths.train", &cfg.paths.train),
        ("paths.val", &cfg.paths.val),
        ("paths.test", &cfg.paths.test),
    ] {
        if let Some(p) = p {
            if !Path::new(p).exists() {
                bail!("{key} points at {p}, which does not exist");
            }
        }
    }
    Ok(cfg)
}

fn load_training_data(cfg: &RunConfig) -> Result<(cmil::bag_data::DatasetManifest, CropStore)> {
    let Some(train_path) = &cfg.paths.train else {
        bail!("the run config needs paths.train");
    };
    let manifest = load_manifest(train_path)?;
    let store = CropStore::from_manifest(&manifest, Path::new(train_path).parent())?;
    Ok((manifest, store))
}

fn load_split(path: &Option<String>) -> Result<Option<EvalSplit>> {
    path.as_ref().map(EvalSplit::load).transpose().map_err(Into::into)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = load_run_config(&a.common)?;
    cfg.train.validate()?;
    let dir = out_dir(&a.common, Some(&cfg))?;
    let (manifest, store) = load_training_data(&cfg)?;
    let val = load_split(&cfg.paths.val)?;
    let test = load_split(&cfg.paths.test)?;

    let t = &cfg.train;
    let outcome: TrainOutcome = if a.baseline {
        let bcfg = BaselineConfig {
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_crops: t.sampler.subbag_size * t.sampler.batch_size,
            early_stop_patience: t.early_stop_patience,
            seed: t.seed,
            distance: t.losses.distance,
            extractor: t.extractor.clone(),
        };
        train_crop_baseline(&manifest, &store, val.as_ref(), &bcfg)?
    } else {
        train(&manifest, &store, val.as_ref(), t)?
    };

    write_text(&dir.join("config.json"), &cfg.to_flat_json())?;
    write_log_csv(&outcome.log, dir.join("log.csv"))?;
    let ckpt = |params| {
        Checkpoint::new(
            outcome.model.extractor.clone(),
            outcome.model.accumulator,
            t.losses.distance,
            outcome.labels.clone(),
            params,
        )
    };
    save_checkpoint(&ckpt(outcome.model.params.clone()), dir.join("best.ckpt.json"))?;
    save_checkpoint(&ckpt(outcome.final_params.clone()), dir.join("final.ckpt.json"))?;

    let mut summary = json!({
        "epochs_run": outcome.epochs_run,
        "steps": outcome.log.len(),
        "stopped_early": outcome.stopped_early,
        "best_epoch": outcome.best_epoch,
        "best_val_rank1": outcome.best_val_rank1,
    });
    if let Some(split) = &test {
        let report = evaluate(
            split,
            &outcome.model.params,
            &outcome.model.extractor,
            t.losses.distance,
            &cfg.eval,
        )?;
        write_text(&dir.join("test_report.json"), &report.to_json())?;
        summary["test"] = serde_json::to_value(report)?;
    }
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let split = EvalSplit::load(&a.split)?;
    let opts = EvalOptions {
        exclude_same_camera: a.exclude_same_camera,
    };
    let report = evaluate(&split, &ckpt.params, &ckpt.extractor, ckpt.distance, &opts)?;
    let text = report.to_json();
    if let Some(dir) = &a.common.out {
        std::fs::create_dir_all(dir)?;
        write_text(&dir.join("eval_report.json"), &text)?;
    }
    print!("{text}");
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let base = load_run_config(&a.common)?;
    let mut space = match &a.space {
        Some(p) => SearchSpace::load(p)?,
        None => SearchSpace::default_space(),
    };
    if let Some(b) = a.budget {
        space.budget = b;
    }
    if let Some(seed) = a.common.seed {
        space.seed = seed;
    }
    space.validate()?;
    let dir = out_dir(&a.common, Some(&base))?;
    let (manifest, store) = load_training_data(&base)?;
    let Some(val) = load_split(&base.paths.val)? else {
        bail!("sweeps need paths.val to score trials");
    };
    let table = dir.join("trials.csv");
    let result = search_hyperparameters(
        &space,
        |point, epochs| {
            let cfg = base.trial(point, epochs)?;
            let out = train(&manifest, &store, Some(&val), &cfg)?;
            Ok(out.best_val_rank1.unwrap_or(0.0))
        },
        Some(&table),
    )?;
    let mut best = base.clone();
    best.apply(&result.best_config)?;
    write_text(&dir.join("best_config.json"), &best.to_flat_json())?;
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "best_trial": result.best_trial,
            "best_rung": result.best_rung,
            "best_val_rank1": result.best_objective,
            "trials": result.trials.len(),
            "trial_table": table,
        }))?
    );
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let dir = out_dir(&a.common, None)?;
    let mut rows = Vec::new();
    for spec in &a.logs {
        let (name, path) = match spec.split_once('=') {
            Some((n, p)) => (n.to_owned(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                let stem = p
                    .parent()
                    .and_then(|d| d.file_name())
                    .filter(|_| p.file_stem().is_some_and(|s| s == "log"))
                    .or(p.file_stem())
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "run".into());
                (stem, p)
            }
        };
        let log = read_log_csv(&path)?;
        let suffix = if a.logs.len() == 1 { String::new() } else { format!("_{name}") };
        write_series_csv(&validation_series(&log), dir.join(format!("series{suffix}.csv")))?;
        write_text(
            &dir.join(format!("plot{suffix}.svg")),
            &render_plot_svg(&log, &format!("{name}: validation rank-1 and alignment loss")),
        )?;
        rows.push(comparison_row(&name, &log));
    }
    if rows.len() > 1 {
        write_comparison_csv(&rows, dir.join("comparison.csv"))?;
    }
    println!("wrote report for {} log(s) to {}", rows.len(), dir.display());
    Ok(())
}
