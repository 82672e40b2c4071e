//! The optimization loop: sample sub-bag batches, embed their crops,
//! accumulate bag representations, and take a plain SGD step on the weighted
//! loss. The extractor stays frozen for the first `fixbase_epochs` epochs.

mod baseline;
mod log;
mod search;

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat};
use crate::bag_data::{validate_manifest, DatasetManifest};
use crate::error::{Error, Result};
use crate::evaluation::{embed_split, evaluate_embedded, EvalOptions, EvalSplit};
use crate::features::CropStore;
use crate::losses::{batch_loss_on_graph, BatchLossReport, LossConfig, LossNodes};
use crate::models::{
    accumulate_on_graph, classify_on_graph, extract_on_graph, AccumulatorConfig, BoundParams,
    CmilModel, ExtractorConfig, ModelParameters, NamedTensor, ParamGroup,
};
use crate::sampling::{BatchPlan, BatchPlanner, SamplerConfig};

pub use baseline::{train_crop_baseline, BaselineConfig};
pub use log::{read_log_csv, write_log_csv, TrainLogRow, LOG_HEADER};
pub use search::{
    halving_schedule, read_trial_table, search_hyperparameters, write_trial_table, Distribution,
    Rung, SearchResult, SearchSpace, TrialRecord, DEFAULT_SEARCH_SPACE,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub fixbase_epochs: usize,
    /// Validations without improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub losses: LossConfig,
    pub extractor: ExtractorConfig,
    pub accumulator: AccumulatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 10,
            fixbase_epochs: 0,
            early_stop_patience: 5,
            seed: 0,
            sampler: SamplerConfig::default(),
            losses: LossConfig::default(),
            extractor: ExtractorConfig::toy_mlp(32, 16, vec![64]),
            accumulator: AccumulatorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.fixbase_epochs > self.epochs {
            return Err(Error::Config(format!(
                "fixbase_epochs ({}) exceeds epochs ({})",
                self.fixbase_epochs, self.epochs
            )));
        }
        self.sampler.validate()?;
        if self.sampler.batch_size < 4 {
            // two labels with two sub-bags each is the smallest batch with a negative
            return Err(Error::Config(format!(
                "batch_size must be >= 4 for triplets to exist, got {}",
                self.sampler.batch_size
            )));
        }
        self.losses.validate()?;
        self.extractor.validate()?;
        self.accumulator.validate(self.extractor.embed_dim)
    }
}

/// Inputs for one planned batch, ready for a forward pass.
#[derive(Debug, Clone)]
pub struct BatchInputs {
    /// One row per crop, sub-bags stacked in plan order.
    pub inputs: Mat,
    /// Row range owned by each sub-bag.
    pub segments: Vec<(usize, usize)>,
    /// Class index of each sub-bag's label.
    pub labels: Vec<usize>,
}

impl BatchInputs {
    pub fn from_plan(
        plan: &BatchPlan,
        store: &CropStore,
        label_index: &HashMap<String, usize>,
    ) -> Result<Self> {
        let mut segments = Vec::with_capacity(plan.subbags.len());
        let mut labels = Vec::with_capacity(plan.subbags.len());
        let mut start = 0;
        for s in &plan.subbags {
            segments.push((start, start + s.crop_ids.len()));
            start += s.crop_ids.len();
            labels.push(*label_index.get(&s.label).ok_or_else(|| {
                Error::Integrity(format!("label {} unknown to the classifier", s.label))
            })?);
        }
        let inputs = store.matrix(
            plan.subbags
                .iter()
                .flat_map(|s| s.crop_ids.iter().map(String::as_str)),
        )?;
        Ok(Self {
            inputs,
            segments,
            labels,
        })
    }
}

/// A recorded forward pass over one batch.
pub struct ForwardPass {
    pub graph: Graph,
    pub bound: BoundParams,
    pub loss: LossNodes,
}

impl ForwardPass {
    pub fn report(&self) -> BatchLossReport {
        self.loss.report(&self.graph)
    }

    /// Gradient of the total loss, shaped like the parameters.
    pub fn gradients(&self, params: &ModelParameters) -> ModelParameters {
        let grads = self.graph.backward(self.loss.total);
        let mut out = ModelParameters::default();
        for group in ParamGroup::ALL {
            let vars = self.bound.group(group).vars();
            *out.group_mut(group) = params
                .group(group)
                .iter()
                .zip(vars)
                .map(|(t, &v)| NamedTensor {
                    name: t.name.clone(),
                    value: grads.wrt(v),
                })
                .collect();
        }
        out
    }
}

/// Embeds every crop, accumulates each sub-bag, classifies the bag
/// representations and builds the loss.
pub fn forward_batch(
    model: &CmilModel,
    batch: &BatchInputs,
    losses: &LossConfig,
) -> Result<ForwardPass> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g);
    let x = g.leaf(batch.inputs.clone());
    let z = extract_on_graph(&mut g, &model.extractor, &bound.theta, x)?;
    let mut reps = Vec::with_capacity(batch.segments.len());
    for &(s, e) in &batch.segments {
        let zs = g.slice_rows(z, s, e);
        reps.push(accumulate_on_graph(&mut g, &model.accumulator, &bound.phi, zs)?);
    }
    let r = g.concat_rows(&reps);
    let probs = classify_on_graph(&mut g, &bound.psi, r);
    let loss = batch_loss_on_graph(&mut g, r, z, &batch.segments, probs, &batch.labels, losses)?;
    Ok(ForwardPass {
        graph: g,
        bound,
        loss,
    })
}

/// Batch-mean alignment loss under the current parameters, whatever its
/// weight in the total.
pub fn log_alignment(model: &CmilModel, batch: &BatchInputs, losses: &LossConfig) -> Result<f64> {
    Ok(forward_batch(model, batch, losses)?.report().align)
}

/// `params -= lr * grads` for every group not in `frozen`.
pub fn sgd_step(
    params: &mut ModelParameters,
    grads: &ModelParameters,
    lr: f64,
    frozen: &[ParamGroup],
) {
    for group in ParamGroup::ALL {
        if frozen.contains(&group) {
            continue;
        }
        for (p, g) in params.group_mut(group).iter_mut().zip(grads.group(group)) {
            for (x, d) in p.value.data.iter_mut().zip(&g.value.data) {
                *x -= lr * d;
            }
        }
    }
}

/// Maps each label to its class index (position in sorted order).
pub fn label_index(labels: &[String]) -> HashMap<String, usize> {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.clone(), i))
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best validation rank-1 (the final ones when no
    /// validation split is given).
    pub model: CmilModel,
    pub final_params: ModelParameters,
    pub labels: Vec<String>,
    pub log: Vec<TrainLogRow>,
    pub best_val_rank1: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

pub fn train(
    manifest: &DatasetManifest,
    store: &CropStore,
    val: Option<&EvalSplit>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(v) = validate_manifest(manifest).first() {
        return Err(Error::Integrity(v.to_string()));
    }
    let labels = manifest.labels();
    let index = label_index(&labels);
    let mut model = CmilModel::new(
        cfg.extractor.clone(),
        cfg.accumulator,
        labels.len(),
        cfg.seed,
    )?;
    let mut planner = BatchPlanner::new(manifest, &cfg.sampler)?;
    let val_embedded_opts = EvalOptions::default();

    let start = Instant::now();
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ModelParameters)> = None;
    let mut since_best = 0usize;
    let mut step = 0usize;
    let mut epochs_run = 0;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let frozen: &[ParamGroup] = if epoch < cfg.fixbase_epochs {
            &[ParamGroup::Theta]
        } else {
            &[]
        };
        for plan in planner.next_epoch() {
            let batch = BatchInputs::from_plan(&plan, store, &index)?;
            let pass = forward_batch(&model, &batch, &cfg.losses)?;
            let report = pass.report();
            if !report.total.is_finite() || !report.align.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at epoch {epoch} step {step}: total {} triplet {} ce {} align {}",
                    report.total, report.triplet, report.ce, report.align
                )));
            }
            let grads = pass.gradients(&model.params);
            sgd_step(&mut model.params, &grads, cfg.learning_rate, frozen);
            if !model.params.is_finite() {
                return Err(Error::NonFinite(format!(
                    "parameters diverged at epoch {epoch} step {step}"
                )));
            }
            log.push(TrainLogRow {
                epoch,
                step,
                total: report.total,
                triplet: report.triplet,
                ce: report.ce,
                align: report.align,
                val_rank1: None,
                wall_time: start.elapsed().as_secs_f64(),
            });
            step += 1;
        }
        epochs_run = epoch + 1;

        if let Some(split) = val {
            let emb = embed_split(split, &model.params, &model.extractor)?;
            let rank1 = evaluate_embedded(&emb, cfg.losses.distance, &val_embedded_opts)?.rank1;
            if let Some(row) = log.last_mut() {
                row.val_rank1 = Some(rank1);
            }
            ::log::info!("epoch {epoch}: val rank-1 {rank1:.4}");
            if best.as_ref().is_none_or(|b| rank1 > b.0) {
                best = Some((rank1, epoch, model.params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    let final_params = model.params.clone();
    let (best_val_rank1, best_epoch) = match best {
        Some((r, e, p)) => {
            model.params = p;
            (Some(r), Some(e))
        }
        None => (None, None),
    };
    Ok(TrainOutcome {
        model,
        final_params,
        labels,
        log,
        best_val_rank1,
        best_epoch,
        epochs_run,
        stopped_early,
    })
}
