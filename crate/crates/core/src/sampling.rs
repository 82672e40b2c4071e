//! Batch planning over bags.
//!
//! Every batch holds `batch_size` sub-bags. Each label present in a batch
//! contributes at least two sub-bags so that an anchor/positive pair exists
//! for it, and batches span at least two labels whenever `batch_size >= 4`
//! so that a negative exists too.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bag_data::{BagRecord, DatasetManifest};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Crops per sub-bag.
    pub subbag_size: usize,
    /// Sub-bags per batch.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            subbag_size: 6,
            batch_size: 10,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subbag_size < 1 {
            return Err(Error::Config("subbag_size must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubBag {
    pub source_bag_id: String,
    pub label: String,
    pub crop_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BatchPlan {
    pub subbags: Vec<SubBag>,
}

impl BatchPlan {
    /// Number of sub-bags per label, keyed by label.
    pub fn label_counts(&self) -> BTreeMap<&str, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.subbags {
            *counts.entry(s.label.as_str()).or_insert(0) += 1;
        }
        counts
    }

    pub fn labels(&self) -> Vec<&str> {
        self.subbags.iter().map(|s| s.label.as_str()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

/// Draws `cfg.subbag_size` crops from one bag. Bags at least that large are
/// sampled without replacement; smaller bags are oversampled evenly so that
/// crop multiplicities differ by at most one.
pub fn sample_subbag<R: Rng + ?Sized>(bag: &BagRecord, cfg: &SamplerConfig, rng: &mut R) -> SubBag {
    let n = bag.crop_ids.len();
    let s = cfg.subbag_size;
    assert!(n > 0, "bag {} is empty", bag.bag_id);
    let mut picks: Vec<usize> = if n >= s {
        index::sample(rng, n, s).into_vec()
    } else {
        let mut v: Vec<usize> = (0..s / n).flat_map(|_| 0..n).collect();
        v.extend(index::sample(rng, n, s % n));
        v
    };
    picks.shuffle(rng);
    SubBag {
        source_bag_id: bag.bag_id.clone(),
        label: bag.label.clone(),
        crop_ids: picks.into_iter().map(|i| bag.crop_ids[i].clone()).collect(),
    }
}

/// Deterministic stream of batch plans. An epoch ends once every bag has
/// served as a sub-bag source at least once.
#[derive(Debug, Clone)]
pub struct BatchPlanner {
    bags: Vec<BagRecord>,
    /// label -> indices into `bags`
    by_label: Vec<(String, Vec<usize>)>,
    cfg: SamplerConfig,
    rng: ChaCha8Rng,
    /// Bags of each label not yet used in the current epoch.
    pending: Vec<Vec<usize>>,
}

pub fn plan_batches(m: &DatasetManifest, cfg: &SamplerConfig) -> Result<BatchPlanner> {
    BatchPlanner::new(m, cfg)
}

impl BatchPlanner {
    pub fn new(m: &DatasetManifest, cfg: &SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, b) in m.bags.iter().enumerate() {
            if b.crop_ids.is_empty() {
                return Err(Error::Integrity(format!("bag {} is empty", b.bag_id)));
            }
            groups.entry(b.label.as_str()).or_default().push(i);
        }
        if groups.len() < 2 {
            return Err(Error::UnsatisfiableBatch(format!(
                "need at least 2 distinct labels, dataset has {}",
                groups.len()
            )));
        }
        let by_label: Vec<(String, Vec<usize>)> = groups
            .into_iter()
            .map(|(l, v)| (l.to_owned(), v))
            .collect();
        Ok(Self {
            pending: vec![Vec::new(); by_label.len()],
            bags: m.bags.clone(),
            by_label,
            cfg: *cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    fn start_epoch(&mut self) {
        for (slot, (_, bags)) in self.pending.iter_mut().zip(&self.by_label) {
            *slot = bags.clone();
            slot.shuffle(&mut self.rng);
        }
    }

    fn epoch_done(&self) -> bool {
        self.pending.iter().all(Vec::is_empty)
    }

    /// Picks the next bag of label `l`, preferring unused bags and avoiding
    /// `avoid` when the label has another bag to offer.
    fn pick_bag(&mut self, l: usize, avoid: Option<usize>) -> usize {
        if let Some(b) = self.pending[l].pop() {
            return b;
        }
        let all = &self.by_label[l].1;
        let choices: Vec<usize> = all.iter().copied().filter(|&b| Some(b) != avoid).collect();
        if choices.is_empty() {
            all[0]
        } else {
            choices[self.rng.random_range(0..choices.len())]
        }
    }

    fn plan_one(&mut self) -> BatchPlan {
        let b = self.cfg.batch_size;
        let n_labels = (b / 2).min(self.by_label.len());

        let mut fresh: Vec<usize> = (0..self.by_label.len())
            .filter(|&l| !self.pending[l].is_empty())
            .collect();
        fresh.shuffle(&mut self.rng);
        fresh.truncate(n_labels);
        if fresh.len() < n_labels {
            let mut rest: Vec<usize> = (0..self.by_label.len())
                .filter(|l| !fresh.contains(l))
                .collect();
            rest.shuffle(&mut self.rng);
            fresh.extend(rest.into_iter().take(n_labels - fresh.len()));
        }

        // two slots per label, leftovers go to already chosen labels
        let mut slots: Vec<usize> = fresh.iter().flat_map(|&l| [l, l]).collect();
        let mut extra = 0;
        while slots.len() < b {
            let l = if b % 2 == 1 && extra == 0 && n_labels == b / 2 {
                fresh[self.rng.random_range(0..fresh.len())]
            } else {
                fresh[extra % fresh.len()]
            };
            slots.push(l);
            extra += 1;
        }
        slots.sort_by_key(|l| fresh.iter().position(|x| x == l));

        let mut subbags = Vec::with_capacity(b);
        let mut last: Option<(usize, usize)> = None;
        for l in slots {
            let avoid = last.filter(|(ll, _)| *ll == l).map(|(_, bag)| bag);
            let bag = self.pick_bag(l, avoid);
            last = Some((l, bag));
            let sub = sample_subbag(&self.bags[bag], &self.cfg, &mut self.rng);
            subbags.push(sub);
        }
        BatchPlan { subbags }
    }

    /// All batches of one epoch.
    pub fn next_epoch(&mut self) -> Vec<BatchPlan> {
        self.start_epoch();
        let mut out = Vec::new();
        while !self.epoch_done() {
            out.push(self.plan_one());
        }
        out
    }
}

impl Iterator for BatchPlanner {
    type Item = BatchPlan;

    fn next(&mut self) -> Option<BatchPlan> {
        if self.epoch_done() {
            self.start_epoch();
        }
        Some(self.plan_one())
    }
}

#[cfg(test)]
mod tests {
    use std::collections::{BTreeSet, HashMap, HashSet};

    use super::*;

    fn bag(id: &str, label: &str, n: usize) -> BagRecord {
        BagRecord {
            bag_id: id.into(),
            label: label.into(),
            crop_ids: (0..n).map(|i| format!("{id}_{i}")).collect(),
        }
    }

    fn manifest(spec: &[(&str, &str, usize)]) -> DatasetManifest {
        DatasetManifest {
            bags: spec.iter().map(|(i, l, n)| bag(i, l, *n)).collect(),
            ..Default::default()
        }
    }

    fn cfg(subbag_size: usize, batch_size: usize) -> SamplerConfig {
        SamplerConfig {
            subbag_size,
            batch_size,
            seed: 5,
        }
    }

    fn counts(s: &SubBag) -> HashMap<&str, usize> {
        let mut m = HashMap::new();
        for c in &s.crop_ids {
            *m.entry(c.as_str()).or_insert(0) += 1;
        }
        m
    }

    #[test]
    fn large_bag_without_replacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = bag("b", "A", 8);
        for _ in 0..20 {
            let s = sample_subbag(&b, &cfg(6, 4), &mut rng);
            assert_eq!(s.crop_ids.len(), 6);
            assert!(counts(&s).values().all(|&c| c == 1));
            assert_eq!(s.label, "A");
        }
    }

    #[test]
    fn small_bag_balanced_exact_multiple() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = sample_subbag(&bag("b", "A", 3), &cfg(6, 4), &mut rng);
        let c = counts(&s);
        assert_eq!(c.len(), 3);
        assert!(c.values().all(|&n| n == 2));
    }

    #[test]
    fn small_bag_balanced_remainder_matches_enumeration() {
        // oracle: all multisets over 4 crops of total 6 with every count in {1,2}
        let mut admissible: BTreeSet<Vec<usize>> = BTreeSet::new();
        for a in 1..=2 {
            for b in 1..=2 {
                for c in 1..=2 {
                    for d in 1..=2 {
                        if a + b + c + d == 6 {
                            admissible.insert(vec![a, b, c, d]);
                        }
                    }
                }
            }
        }
        assert_eq!(admissible.len(), 6);
        let bg = bag("b", "A", 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = BTreeSet::new();
        for _ in 0..200 {
            let s = sample_subbag(&bg, &cfg(6, 4), &mut rng);
            let c = counts(&s);
            let v: Vec<usize> = bg.crop_ids.iter().map(|id| c.get(id.as_str()).copied().unwrap_or(0)).collect();
            assert!(admissible.contains(&v), "{v:?}");
            seen.insert(v);
        }
        assert_eq!(seen, admissible);
    }

    #[test]
    fn batch_of_two_shares_one_label() {
        let m = manifest(&[("b1", "A", 4), ("b2", "B", 4), ("b3", "C", 4)]);
        let mut p = plan_batches(&m, &cfg(3, 2)).unwrap();
        for plan in p.by_ref().take(20) {
            let l = plan.labels();
            assert_eq!(l.len(), 2);
            assert_eq!(l[0], l[1]);
        }
    }

    #[test]
    fn odd_batch_pattern() {
        let m = manifest(&[
            ("b1", "A", 4),
            ("b2", "B", 4),
            ("b3", "C", 4),
            ("b4", "A", 4),
        ]);
        let mut p = plan_batches(&m, &cfg(3, 5)).unwrap();
        for plan in p.by_ref().take(50) {
            let mut c: Vec<usize> = plan.label_counts().values().copied().collect();
            c.sort();
            assert_eq!(c, vec![2, 3]);
        }
    }

    #[test]
    fn market_settings_give_five_labels_of_two() {
        let spec: Vec<(String, String, usize)> = (0..12)
            .map(|i| (format!("b{i}"), format!("L{}", i % 6), 7))
            .collect();
        let spec_ref: Vec<(&str, &str, usize)> = spec.iter().map(|(a, b, n)| (a.as_str(), b.as_str(), *n)).collect();
        let m = manifest(&spec_ref);
        let mut p = plan_batches(&m, &cfg(6, 10)).unwrap();
        for plan in p.by_ref().take(30) {
            let c = plan.label_counts();
            assert_eq!(c.len(), 5);
            assert!(c.values().all(|&n| n == 2));
            assert!(plan.subbags.iter().all(|s| s.crop_ids.len() == 6));
        }
    }

    #[test]
    fn single_bag_label_gives_two_subbags_from_same_bag() {
        let m = manifest(&[("b1", "A", 10), ("b2", "B", 10)]);
        let mut p = plan_batches(&m, &cfg(4, 4)).unwrap();
        let plan = p.next().unwrap();
        let mut by_label: HashMap<&str, HashSet<&str>> = HashMap::new();
        for s in &plan.subbags {
            by_label.entry(&s.label).or_default().insert(&s.source_bag_id);
        }
        assert_eq!(by_label.len(), 2);
        assert!(by_label.values().all(|s| s.len() == 1));
    }

    #[test]
    fn epoch_covers_every_bag() {
        let spec: Vec<(String, String, usize)> = (0..23)
            .map(|i| (format!("b{i}"), format!("L{}", i % 7), 1 + i % 5))
            .collect();
        let spec_ref: Vec<(&str, &str, usize)> = spec.iter().map(|(a, b, n)| (a.as_str(), b.as_str(), *n)).collect();
        let m = manifest(&spec_ref);
        let mut p = plan_batches(&m, &cfg(5, 6)).unwrap();
        for _ in 0..3 {
            let epoch = p.next_epoch();
            let used: HashSet<&str> = epoch
                .iter()
                .flat_map(|b| b.subbags.iter().map(|s| s.source_bag_id.as_str()))
                .collect();
            assert_eq!(used.len(), 23);
        }
    }

    #[test]
    fn errors() {
        let one = manifest(&[("b1", "A", 3), ("b2", "A", 3)]);
        assert!(matches!(plan_batches(&one, &cfg(2, 4)), Err(Error::UnsatisfiableBatch(_))));
        let two = manifest(&[("b1", "A", 3), ("b2", "B", 3)]);
        assert!(matches!(plan_batches(&two, &cfg(2, 1)), Err(Error::Config(_))));
        assert!(matches!(plan_batches(&two, &cfg(0, 4)), Err(Error::Config(_))));
    }

    #[test]
    fn plan_serializes_as_list() {
        let m = manifest(&[("b1", "A", 3), ("b2", "B", 3)]);
        let plan = plan_batches(&m, &cfg(2, 4)).unwrap().next().unwrap();
        let v: serde_json::Value = serde_json::from_str(&plan.to_json()).unwrap();
        assert_eq!(v.as_array().unwrap().len(), 4);
        assert!(v[0].get("source_bag_id").is_some());
    }
}
