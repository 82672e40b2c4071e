use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::DatasetManifest;
use crate::error::{Error, Result};

/// Number of labels sent to the first side: rounded, but each side keeps at
/// least one label.
pub fn train_label_count(num_labels: usize, train_fraction: f64) -> usize {
    let n = (train_fraction * num_labels as f64).round() as usize;
    n.clamp(1, num_labels.saturating_sub(1).max(1))
}

/// Splits by identity label so that no label appears on both sides.
pub fn split_dataset(
    m: &DatasetManifest,
    train_fraction: f64,
    val_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(train_fraction > 0.0 && val_fraction > 0.0)
        || (train_fraction + val_fraction - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split fractions must be positive and sum to 1, got {train_fraction}/{val_fraction}"
        )));
    }
    let mut labels = m.labels();
    if labels.len() < 2 {
        return Err(Error::Config(format!(
            "cannot split {} label(s) into two non-empty sides",
            labels.len()
        )));
    }
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = train_label_count(labels.len(), train_fraction);
    let train_labels: HashSet<&str> = labels[..n_train].iter().map(String::as_str).collect();

    let side = |keep: bool| {
        let bags: Vec<_> = m
            .bags
            .iter()
            .filter(|b| train_labels.contains(b.label.as_str()) == keep)
            .cloned()
            .collect();
        let bag_ids: HashSet<&str> = bags.iter().map(|b| b.bag_id.as_str()).collect();
        let crops = m
            .crops
            .iter()
            .filter(|c| bag_ids.contains(c.bag_id.as_str()))
            .cloned()
            .collect();
        DatasetManifest {
            bags,
            crops,
            metadata: m.metadata.clone(),
        }
    };
    Ok((side(true), side(false)))
}
