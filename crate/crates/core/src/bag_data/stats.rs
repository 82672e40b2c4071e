use serde::{Deserialize, Serialize};

use super::manifest::DatasetManifest;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagStatistics {
    pub num_bags: usize,
    pub num_crops: usize,
    pub num_identities: usize,
    pub mean_bag_size: f64,
    pub min_bag_size: usize,
    pub max_bag_size: usize,
    /// Fraction of crops whose true identity differs from their bag label.
    /// Present only when every crop carries a true identity.
    pub mean_noise: Option<f64>,
    pub per_bag_noise: Option<Vec<f64>>,
}

pub fn compute_bag_statistics(m: &DatasetManifest) -> BagStatistics {
    let sizes: Vec<usize> = m.bags.iter().map(|b| b.crop_ids.len()).collect();
    let total: usize = sizes.iter().sum();
    let mean_bag_size = if sizes.is_empty() {
        0.0
    } else {
        total as f64 / sizes.len() as f64
    };

    let crops = m.crop_index();
    let all_labeled = !m.crops.is_empty() && m.crops.iter().all(|c| c.true_identity.is_some());
    let (mean_noise, per_bag_noise) = if all_labeled {
        let mut wrong_total = 0usize;
        let per_bag = m
            .bags
            .iter()
            .map(|b| {
                let wrong = b
                    .crop_ids
                    .iter()
                    .filter(|id| {
                        crops
                            .get(id.as_str())
                            .and_then(|c| c.true_identity.as_deref())
                            != Some(b.label.as_str())
                    })
                    .count();
                wrong_total += wrong;
                if b.crop_ids.is_empty() {
                    0.0
                } else {
                    wrong as f64 / b.crop_ids.len() as f64
                }
            })
            .collect();
        let mean = if total == 0 {
            0.0
        } else {
            wrong_total as f64 / total as f64
        };
        (Some(mean), Some(per_bag))
    } else {
        (None, None)
    };

    BagStatistics {
        num_bags: m.bags.len(),
        num_crops: m.crops.len(),
        num_identities: m.num_identities(),
        mean_bag_size,
        min_bag_size: sizes.iter().copied().min().unwrap_or(0),
        max_bag_size: sizes.iter().copied().max().unwrap_or(0),
        mean_noise,
        per_bag_noise,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bag_data::manifest::{BagRecord, CropRecord, DataRef};

    fn manifest(bags: &[(&str, &[Option<&str>])]) -> DatasetManifest {
        let mut m = DatasetManifest::default();
        for (bi, (label, truths)) in bags.iter().enumerate() {
            let bag_id = format!("b{bi}");
            let mut ids = vec![];
            for (ci, t) in truths.iter().enumerate() {
                let crop_id = format!("b{bi}c{ci}");
                ids.push(crop_id.clone());
                m.crops.push(CropRecord {
                    crop_id,
                    source_image_id: "img".into(),
                    bag_id: bag_id.clone(),
                    data_ref: DataRef::Vector(vec![0.0]),
                    true_identity: t.map(str::to_owned),
                    camera_id: None,
                });
            }
            m.bags.push(BagRecord {
                bag_id,
                label: label.to_string(),
                crop_ids: ids,
            });
        }
        m
    }

    #[test]
    fn sizes() {
        let m = manifest(&[("A", &[None, None]), ("B", &[None, None, None, None])]);
        let s = compute_bag_statistics(&m);
        assert_eq!(s.mean_bag_size, 3.0);
        assert_eq!((s.min_bag_size, s.max_bag_size), (2, 4));
        assert!(s.mean_noise.is_none() && s.per_bag_noise.is_none());
    }

    #[test]
    fn per_bag_noise_counts_mismatches() {
        let m = manifest(&[("A", &[Some("A"), Some("A"), Some("A"), Some("B")])]);
        let s = compute_bag_statistics(&m);
        assert_eq!(s.per_bag_noise.unwrap(), vec![0.25]);
        assert_eq!(s.mean_noise, Some(0.25));
    }

    #[test]
    fn partial_truth_suppresses_noise() {
        let m = manifest(&[("A", &[Some("A"), None])]);
        assert!(compute_bag_statistics(&m).mean_noise.is_none());
    }
}
