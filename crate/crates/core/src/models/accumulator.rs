use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{set_transformer, BagRepresentation, BoundGroup, CropEmbedding, ModelParameters, NamedTensor};
use crate::autodiff::{Graph, Mat, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccumulatorKind {
    Mean,
    Max,
    Sum,
    SetTransformer,
}

impl std::str::FromStr for AccumulatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            "sum" => Ok(Self::Sum),
            "set_transformer" => Ok(Self::SetTransformer),
            other => Err(Error::Config(format!("unknown accumulator kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for AccumulatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Max => "max",
            Self::Sum => "sum",
            Self::SetTransformer => "set_transformer",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccumulatorConfig {
    pub kind: AccumulatorKind,
    /// Self-attention blocks before pooling.
    pub st_layers: usize,
    pub st_heads: usize,
    /// Feed-forward width inside each attention block; 0 means the embedding
    /// dimension.
    pub st_hidden: usize,
    pub seed: u64,
}

impl Default for AccumulatorConfig {
    fn default() -> Self {
        Self {
            kind: AccumulatorKind::SetTransformer,
            st_layers: 2,
            st_heads: 4,
            st_hidden: 0,
            seed: 0,
        }
    }
}

impl AccumulatorConfig {
    pub fn simple(kind: AccumulatorKind) -> Self {
        Self {
            kind,
            ..Default::default()
        }
    }

    pub fn set_transformer(heads: usize, seed: u64) -> Self {
        Self {
            st_heads: heads,
            seed,
            ..Default::default()
        }
    }

    pub(super) fn hidden(&self, embed_dim: usize) -> usize {
        if self.st_hidden == 0 {
            embed_dim
        } else {
            self.st_hidden
        }
    }

    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if self.kind != AccumulatorKind::SetTransformer {
            return Ok(());
        }
        if self.st_heads == 0 || !embed_dim.is_multiple_of(self.st_heads) {
            return Err(Error::Config(format!(
                "set transformer heads ({}) must divide embed_dim ({embed_dim})",
                self.st_heads
            )));
        }
        Ok(())
    }

    pub(super) fn init(&self, embed_dim: usize, rng: &mut ChaCha8Rng) -> Vec<NamedTensor> {
        match self.kind {
            AccumulatorKind::SetTransformer => set_transformer::init(self, embed_dim, rng),
            _ => Vec::new(),
        }
    }
}

/// Reduces the crop embeddings of one sub-bag (n x D) to a 1 x D bag
/// representation.
pub fn accumulate_on_graph(
    g: &mut Graph,
    cfg: &AccumulatorConfig,
    phi: &BoundGroup,
    z: Var,
) -> Result<Var> {
    if g.value(z).rows == 0 {
        return Err(Error::Empty("cannot accumulate an empty set".into()));
    }
    Ok(match cfg.kind {
        AccumulatorKind::Mean => g.mean_rows(z),
        AccumulatorKind::Max => g.max_rows(z),
        AccumulatorKind::Sum => g.sum_rows(z),
        AccumulatorKind::SetTransformer => set_transformer::forward_on_graph(g, cfg, phi, z),
    })
}

pub(super) fn embeddings_matrix(embeddings: &[CropEmbedding]) -> Result<Mat> {
    let Some(first) = embeddings.first() else {
        return Err(Error::Empty("cannot accumulate an empty set".into()));
    };
    let d = first.vector.len();
    if let Some(e) = embeddings.iter().find(|e| e.vector.len() != d) {
        return Err(Error::Shape(format!(
            "embedding {} has dimension {}, expected {d}",
            e.crop_id,
            e.vector.len()
        )));
    }
    let rows: Vec<Vec<f64>> = embeddings.iter().map(|e| e.vector.clone()).collect();
    Ok(Mat::from_rows(&rows))
}

pub fn accumulate(
    embeddings: &[CropEmbedding],
    params: &ModelParameters,
    cfg: &AccumulatorConfig,
) -> Result<BagRepresentation> {
    let z = embeddings_matrix(embeddings)?;
    cfg.validate(z.cols)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let zv = g.leaf(z);
    let r = accumulate_on_graph(&mut g, cfg, &bound.phi, zv)?;
    Ok(BagRepresentation {
        vector: g.value(r).data.clone(),
        source_bag_id: None,
    })
}
