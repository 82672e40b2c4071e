//! Crop-level classification baseline: every crop inherits its bag's label
//! and the extractor plus head are trained with cross-entropy alone.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{label_index, sgd_step, TrainLogRow, TrainOutcome};
use crate::autodiff::{DistanceKind, Graph};
use crate::bag_data::{validate_manifest, DatasetManifest};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalOptions, EvalSplit};
use crate::features::CropStore;
use crate::models::{
    classify_on_graph, extract_on_graph, AccumulatorConfig, AccumulatorKind, CmilModel,
    ExtractorConfig, ModelParameters, NamedTensor, ParamGroup,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Crops per minibatch.
    pub batch_crops: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub distance: DistanceKind,
    pub extractor: ExtractorConfig,
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_crops == 0 {
            return Err(Error::Config("batch_crops must be >= 1".into()));
        }
        self.extractor.validate()
    }
}

/// Trains the crop-level baseline. The log's `triplet` and `align` columns
/// are zero since neither term is part of the objective.
pub fn train_crop_baseline(
    manifest: &DatasetManifest,
    store: &CropStore,
    val: Option<&EvalSplit>,
    cfg: &BaselineConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(v) = validate_manifest(manifest).first() {
        return Err(Error::Integrity(v.to_string()));
    }
    let labels = manifest.labels();
    let index = label_index(&labels);
    let mut examples: Vec<(&str, usize)> = manifest
        .bags
        .iter()
        .flat_map(|b| {
            let l = index[&b.label];
            b.crop_ids.iter().map(move |c| (c.as_str(), l))
        })
        .collect();
    let mut model = CmilModel::new(
        cfg.extractor.clone(),
        AccumulatorConfig::simple(AccumulatorKind::Mean),
        labels.len(),
        cfg.seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba5e);
    let start = Instant::now();
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ModelParameters)> = None;
    let mut since_best = 0;
    let mut step = 0;
    let mut epochs_run = 0;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        examples.shuffle(&mut rng);
        for chunk in examples.chunks(cfg.batch_crops) {
            let inputs = store.matrix(chunk.iter().map(|e| e.0))?;
            let y: Vec<usize> = chunk.iter().map(|e| e.1).collect();
            let mut g = Graph::new();
            let bound = model.params.bind(&mut g);
            let x = g.leaf(inputs);
            let z = extract_on_graph(&mut g, &model.extractor, &bound.theta, x)?;
            let probs = classify_on_graph(&mut g, &bound.psi, z);
            let loss = g.cross_entropy(probs, y);
            let ce = g.scalar(loss);
            if !ce.is_finite() {
                return Err(Error::NonFinite(format!("baseline loss at step {step}")));
            }
            let grads = g.backward(loss);
            let mut delta = ModelParameters::default();
            for group in [ParamGroup::Theta, ParamGroup::Psi] {
                *delta.group_mut(group) = model
                    .params
                    .group(group)
                    .iter()
                    .zip(bound.group(group).vars())
                    .map(|(t, &v)| NamedTensor {
                        name: t.name.clone(),
                        value: grads.wrt(v),
                    })
                    .collect();
            }
            sgd_step(&mut model.params, &delta, cfg.learning_rate, &[ParamGroup::Phi]);
            log.push(TrainLogRow {
                epoch,
                step,
                total: ce,
                triplet: 0.0,
                ce,
                align: 0.0,
                val_rank1: None,
                wall_time: start.elapsed().as_secs_f64(),
            });
            step += 1;
        }
        epochs_run = epoch + 1;
        if let Some(split) = val {
            let r = evaluate(
                split,
                &model.params,
                &model.extractor,
                cfg.distance,
                &EvalOptions::default(),
            )?
            .rank1;
            if let Some(row) = log.last_mut() {
                row.val_rank1 = Some(r);
            }
            if best.as_ref().is_none_or(|b| r > b.0) {
                best = Some((r, epoch, model.params.clone()));
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
