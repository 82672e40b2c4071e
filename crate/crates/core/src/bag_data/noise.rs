//! Synthetic weak labels from a strongly labeled corpus: every crop is kept
//! in its correct bag and `k` copies of it are dropped into random bags of
//! other identities, so only one in `k + 1` crops is correctly labeled.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{validate_manifest, CropRecord, DatasetManifest};
use crate::error::{Error, Result};

/// Largest duplication factor accepted when mapping a noise fraction.
pub const MAX_DUPLICATION_FACTOR: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub duplication_factor: u32,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(duplication_factor: u32, seed: u64) -> Result<Self> {
        if duplication_factor == 0 {
            return Err(Error::Config("duplication factor must be >= 1".into()));
        }
        Ok(Self {
            duplication_factor,
            seed,
        })
    }

    /// Maps a requested noise fraction onto the nearest `k / (k + 1)` with
    /// `k <= 10`, accepting fractions within 0.01 of it (so `0.66` means 2/3).
    pub fn from_noise_fraction(fraction: f64, seed: u64) -> Result<Self> {
        let (k, gap) = (1..=MAX_DUPLICATION_FACTOR)
            .map(|k| (k, (fraction - noise_for_factor(k)).abs()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty range");
        if gap.is_nan() || gap > 0.01 {
            let valid = (1..=MAX_DUPLICATION_FACTOR)
                .map(|k| format!("{:.4}", noise_for_factor(k)))
                .collect::<Vec<_>>()
                .join(", ");
            return Err(Error::Config(format!(
                "noise level {fraction} is not of the form k/(k+1); valid values: {valid}"
            )));
        }
        Self::new(k, seed)
    }

    pub fn target_noise(&self) -> f64 {
        noise_for_factor(self.duplication_factor)
    }
}

pub fn noise_for_factor(k: u32) -> f64 {
    k as f64 / (k as f64 + 1.0)
}

/// Duplicates every crop `k` times into uniformly chosen bags whose label
/// differs from the crop's true identity. Duplicates get ids `<crop_id>#dupN`.
pub fn generate_synthetic_weak_labels(
    strong: &DatasetManifest,
    spec: &NoiseSpec,
) -> Result<DatasetManifest> {
    if spec.duplication_factor == 0 {
        return Err(Error::Config("duplication factor must be >= 1".into()));
    }
    let violations = validate_manifest(strong);
    if let Some(v) = violations.first() {
        return Err(Error::Integrity(format!("input manifest invalid: {v}")));
    }
    let labels = strong.labels();
    if labels.len() < 2 {
        return Err(Error::Config(format!(
            "synthetic noise needs at least 2 identities, found {}",
            labels.len()
        )));
    }
    let bag_pos: HashMap<&str, usize> = strong
        .bags
        .iter()
        .enumerate()
        .map(|(i, b)| (b.bag_id.as_str(), i))
        .collect();
    for c in &strong.crops {
        let bag = &strong.bags[bag_pos[c.bag_id.as_str()]];
        match &c.true_identity {
            None => {
                return Err(Error::Integrity(format!(
                    "crop {} has no true_identity",
                    c.crop_id
                )))
            }
            Some(t) if *t != bag.label => {
                return Err(Error::Integrity(format!(
                    "crop {} (identity {t}) sits in bag {} labeled {}",
                    c.crop_id, bag.bag_id, bag.label
                )))
            }
            _ => {}
        }
    }

    // candidate target bags per identity
    let mut targets: HashMap<&str, Vec<usize>> = HashMap::new();
    for label in &labels {
        let others = strong
            .bags
            .iter()
            .enumerate()
            .filter(|(_, b)| b.label != *label)
            .map(|(i, _)| i)
            .collect();
        targets.insert(label.as_str(), others);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = strong.clone();
    let k = spec.duplication_factor;
    for c in &strong.crops {
        let identity = c.true_identity.as_deref().expect("checked above");
        let candidates = &targets[identity];
        for n in 1..=k {
            let target = &mut out.bags[candidates[rng.random_range(0..candidates.len())]];
            let crop_id = format!("{}#dup{n}", c.crop_id);
            target.crop_ids.push(crop_id.clone());
            out.crops.push(CropRecord {
                crop_id,
                bag_id: target.bag_id.clone(),
                ..c.clone()
            });
        }
    }
    out.metadata
        .insert("duplication_factor".into(), serde_json::json!(k));
    out.metadata
        .insert("target_noise".into(), serde_json::json!(spec.target_noise()));
    out.metadata
        .insert("noise_seed".into(), serde_json::json!(spec.seed));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bag_data::manifest::{BagRecord, DataRef};

    fn strong(identities: usize, crops_per: usize) -> DatasetManifest {
        let mut m = DatasetManifest::default();
        for i in 0..identities {
            let bag_id = format!("bag{i}");
            let mut ids = Vec::new();
            for j in 0..crops_per {
                let crop_id = format!("p{i}_{j}");
                ids.push(crop_id.clone());
                m.crops.push(CropRecord {
                    crop_id,
                    source_image_id: format!("img{i}_{j}"),
                    bag_id: bag_id.clone(),
                    data_ref: DataRef::Vector(vec![i as f64, j as f64]),
                    true_identity: Some(format!("id{i}")),
                    camera_id: None,
                });
            }
            m.bags.push(BagRecord {
                bag_id,
                label: format!("id{i}"),
                crop_ids: ids,
            });
        }
        m
    }

    fn mislabeled_fraction(m: &DatasetManifest) -> f64 {
        let labels: HashMap<&str, &str> = m
            .bags
            .iter()
            .map(|b| (b.bag_id.as_str(), b.label.as_str()))
            .collect();
        let wrong = m
            .crops
            .iter()
            .filter(|c| c.true_identity.as_deref() != Some(labels[c.bag_id.as_str()]))
            .count();
        wrong as f64 / m.crops.len() as f64
    }

    #[test]
    fn target_noise_levels() {
        assert_eq!(NoiseSpec::new(3, 0).unwrap().target_noise(), 0.75);
        assert_eq!(NoiseSpec::new(1, 0).unwrap().target_noise(), 0.5);
        assert_eq!(NoiseSpec::from_noise_fraction(0.75, 0).unwrap().duplication_factor, 3);
        assert_eq!(NoiseSpec::from_noise_fraction(0.66, 0).unwrap().duplication_factor, 2);
        assert_eq!(NoiseSpec::from_noise_fraction(0.8, 0).unwrap().duplication_factor, 4);
        assert!(NoiseSpec::from_noise_fraction(0.3, 0).is_err());
        assert!(NoiseSpec::new(0, 0).is_err());
    }

    #[test]
    fn output_size_and_exact_noise_count() {
        let m = strong(20, 50);
        let spec = NoiseSpec::new(2, 7).unwrap();
        let out = generate_synthetic_weak_labels(&m, &spec).unwrap();
        assert_eq!(out.crops.len(), 3 * m.crops.len());
        assert!(validate_manifest(&out).is_empty());
        // every duplicate lands in a wrong bag, so the fraction is exact here
        assert!((mislabeled_fraction(&out) - 2.0 / 3.0).abs() <= 0.02);
    }

    #[test]
    fn duplicates_never_land_in_own_identity() {
        let m = strong(3, 10);
        let out = generate_synthetic_weak_labels(&m, &NoiseSpec::new(4, 1).unwrap()).unwrap();
        let labels: HashMap<&str, &str> = out
            .bags
            .iter()
            .map(|b| (b.bag_id.as_str(), b.label.as_str()))
            .collect();
        for c in out.crops.iter().filter(|c| c.crop_id.contains("#dup")) {
            assert_ne!(c.true_identity.as_deref(), Some(labels[c.bag_id.as_str()]));
        }
    }

    #[test]
    fn single_identity_is_rejected() {
        let m = strong(1, 5);
        assert!(matches!(
            generate_synthetic_weak_labels(&m, &NoiseSpec::new(1, 0).unwrap()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn generation_is_seeded() {
        let m = strong(5, 4);
        let a = generate_synthetic_weak_labels(&m, &NoiseSpec::new(2, 9).unwrap()).unwrap();
        let b = generate_synthetic_weak_labels(&m, &NoiseSpec::new(2, 9).unwrap()).unwrap();
        let c = generate_synthetic_weak_labels(&m, &NoiseSpec::new(2, 10).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
