//! Identity (cross-entropy), batch-all triplet and alignment losses over bag
//! representations, and their weighted total.

use serde::{Deserialize, Serialize};

pub use crate::autodiff::{vector_distance as distance, DistanceKind};
use crate::autodiff::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::models::{BagRepresentation, CropEmbedding};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the triplet term.
    pub alpha: f64,
    /// Weight of the identity (cross-entropy) term.
    pub beta: f64,
    /// Weight of the alignment term.
    pub gamma: f64,
    pub m_triplet: f64,
    pub m_align: f64,
    pub distance: DistanceKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.0,
            m_triplet: 0.5,
            m_align: 0.5,
            distance: DistanceKind::Euclidean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("m_triplet", self.m_triplet),
            ("m_align", self.m_align),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.alpha <= 0.0 && self.beta <= 0.0 {
            return Err(Error::Config("at least one of alpha, beta must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchLossReport {
    pub total: f64,
    pub triplet: f64,
    pub ce: f64,
    pub align: f64,
    pub num_valid_triplets: usize,
}

/// Every `(anchor, positive, negative)` with `anchor != positive`, equal
/// anchor/positive labels and a differently labeled negative.
pub fn valid_triplets<L: PartialEq>(labels: &[L]) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for a in 0..labels.len() {
        for p in 0..labels.len() {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for n in 0..labels.len() {
                if labels[n] != labels[a] {
                    out.push((a, p, n));
                }
            }
        }
    }
    out
}

/// Loss nodes for one batch on a graph.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: Var,
    pub triplet: Var,
    pub ce: Var,
    pub align: Var,
    pub num_valid_triplets: usize,
}

impl LossNodes {
    pub fn report(&self, g: &Graph) -> BatchLossReport {
        BatchLossReport {
            total: g.scalar(self.total),
            triplet: g.scalar(self.triplet),
            ce: g.scalar(self.ce),
            align: g.scalar(self.align),
            num_valid_triplets: self.num_valid_triplets,
        }
    }
}

/// Mean alignment hinge over sub-bags: for sub-bag `s`, the distance from
/// `reps[s]` to its nearest crop among rows `segments[s]` of `crops`.
pub fn alignment_on_graph(
    g: &mut Graph,
    reps: Var,
    crops: Var,
    segments: &[(usize, usize)],
    cfg: &LossConfig,
) -> Result<Var> {
    if segments.is_empty() {
        return Err(Error::Empty("alignment over no sub-bags".into()));
    }
    let mut terms = Vec::with_capacity(segments.len());
    for (s, &(start, end)) in segments.iter().enumerate() {
        if start >= end {
            return Err(Error::Empty(format!("sub-bag {s} has no crops")));
        }
        let r = g.slice_rows(reps, s, s + 1);
        let z = g.slice_rows(crops, start, end);
        let d = g.distances(r, z, cfg.distance);
        terms.push(g.hinge_min(d, cfg.m_align));
    }
    let stacked = if terms.len() == 1 { terms[0] } else { g.concat_cols(&terms) };
    Ok(g.mean_all(stacked))
}

/// Builds all three loss terms and their weighted total for one batch.
///
/// `reps` holds one bag representation per row, `crops` the crop embeddings
/// that were accumulated (sub-bag `s` owns rows `segments[s]`), `probs` the
/// classifier output per bag and `labels` the class index per bag.
pub fn batch_loss_on_graph(
    g: &mut Graph,
    reps: Var,
    crops: Var,
    segments: &[(usize, usize)],
    probs: Var,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossNodes> {
    let b = g.value(reps).rows;
    if labels.len() != b || segments.len() != b || g.value(probs).rows != b {
        return Err(Error::Shape(format!(
            "batch of {b} representations with {} labels, {} segments, {} probability rows",
            labels.len(),
            segments.len(),
            g.value(probs).rows
        )));
    }
    let triplets = valid_triplets(labels);
    let num_valid_triplets = triplets.len();
    let dist = g.distances(reps, reps, cfg.distance);
    let triplet = g.triplet_batch_all(dist, triplets, cfg.m_triplet)?;
    let ce = g.cross_entropy(probs, labels.to_vec());
    let align = alignment_on_graph(g, reps, crops, segments, cfg)?;
    let total = g.weighted_sum(&[(triplet, cfg.alpha), (ce, cfg.beta), (align, cfg.gamma)]);
    Ok(LossNodes {
        total,
        triplet,
        ce,
        align,
        num_valid_triplets,
    })
}

fn reps_matrix(reps: &[BagRepresentation]) -> Result<Mat> {
    let Some(first) = reps.first() else {
        return Err(Error::Empty("no bag representations".into()));
    };
    let d = first.vector.len();
    if reps.iter().any(|r| r.vector.len() != d) {
        return Err(Error::Shape("bag representations differ in dimension".into()));
    }
    let rows: Vec<Vec<f64>> = reps.iter().map(|r| r.vector.clone()).collect();
    Ok(Mat::from_rows(&rows))
}

/// Mean over rows of `-ln p[label]`, with probabilities clamped at 1e-12.
pub fn identity_loss(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} probability rows for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let c = probs[0].len();
    if probs.iter().any(|p| p.len() != c) || labels.iter().any(|&l| l >= c) {
        return Err(Error::Shape("label outside the class range".into()));
    }
    let mut g = Graph::new();
    let p = g.leaf(Mat::from_rows(probs));
    let l = g.cross_entropy(p, labels.to_vec());
    Ok(g.scalar(l))
}

/// Mean triplet hinge over all valid triplets of the batch and their count.
pub fn triplet_loss_batch_all<L: PartialEq>(
    reps: &[BagRepresentation],
    labels: &[L],
    cfg: &LossConfig,
) -> Result<(f64, usize)> {
    if reps.len() != labels.len() {
        return Err(Error::Shape("one label per representation".into()));
    }
    let triplets = valid_triplets(labels);
    let n = triplets.len();
    let mut g = Graph::new();
    let r = g.leaf(reps_matrix(reps)?);
    let d = g.distances(r, r, cfg.distance);
    let l = g.triplet_batch_all(d, triplets, cfg.m_triplet)?;
    Ok((g.scalar(l), n))
}

/// `max(0, min_j d(r, z_j) - m_align)`.
pub fn alignment_loss(r: &BagRepresentation, crop_embs: &[CropEmbedding], cfg: &LossConfig) -> Result<f64> {
    if crop_embs.is_empty() {
        return Err(Error::Empty("alignment needs at least one crop".into()));
    }
    let d = r.vector.len();
    if crop_embs.iter().any(|z| z.vector.len() != d) {
        return Err(Error::Shape("crop embedding dimension differs from bag".into()));
    }
    let mut g = Graph::new();
    let rv = g.leaf(Mat::row_vector(r.vector.clone()));
    let rows: Vec<Vec<f64>> = crop_embs.iter().map(|z| z.vector.clone()).collect();
    let zv = g.leaf(Mat::from_rows(&rows));
    let dist = g.distances(rv, zv, cfg.distance);
    let l = g.hinge_min(dist, cfg.m_align);
    Ok(g.scalar(l))
}

/// Weighted total over a batch; the alignment term is always computed so it
/// can be logged even when its weight is zero.
pub fn total_loss(
    reps: &[BagRepresentation],
    crop_embs: &[Vec<CropEmbedding>],
    probs: &[Vec<f64>],
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<BatchLossReport> {
    if crop_embs.len() != reps.len() {
        return Err(Error::Shape("one crop set per representation".into()));
    }
    let mut g = Graph::new();
    let r = g.leaf(reps_matrix(reps)?);
    let mut rows = Vec::new();
    let mut segments = Vec::new();
    for set in crop_embs {
        if set.is_empty() {
            return Err(Error::Empty("alignment needs at least one crop".into()));
        }
        let start = rows.len();
        rows.extend(set.iter().map(|z| z.vector.clone()));
        segments.push((start, rows.len()));
    }
    let z = g.leaf(Mat::from_rows(&rows));
    if g.value(z).cols != g.value(r).cols {
        return Err(Error::Shape("crop embedding dimension differs from bag".into()));
    }
    if probs.len() != reps.len() || probs.iter().any(|p| p.len() != probs[0].len()) {
        return Err(Error::Shape("one probability row per representation".into()));
    }
    if labels.iter().any(|&l| l >= probs[0].len()) {
        return Err(Error::Shape("label outside the class range".into()));
    }
    let p = g.leaf(Mat::from_rows(probs));
    let nodes = batch_loss_on_graph(&mut g, r, z, &segments, p, labels, cfg)?;
    Ok(nodes.report(&g))
}
