//! Crop feature extractor, permutation-invariant accumulators and the bag
//! classifier head, all expressed as differentiable maps on a [`Graph`].

mod accumulator;
mod checkpoint;
mod extractor;
mod head;
mod set_transformer;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, Var};
use crate::error::{Error, Result};

pub use accumulator::{accumulate, accumulate_on_graph, AccumulatorConfig, AccumulatorKind};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT};
pub use extractor::{extract_features, extract_on_graph, ExtractorConfig, ExtractorKind};
pub use head::{classify_bag, classify_on_graph};
pub use set_transformer::set_transformer_forward;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropEmbedding {
    pub crop_id: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagRepresentation {
    pub vector: Vec<f64>,
    /// Bag the accumulated crops were drawn from, when known.
    pub source_bag_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    #[serde(flatten)]
    pub value: Mat,
}

/// Parameters of the extractor (`theta`), accumulator (`phi`) and
/// classifier head (`psi`).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelParameters {
    pub theta: Vec<NamedTensor>,
    pub phi: Vec<NamedTensor>,
    pub psi: Vec<NamedTensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Theta,
    Phi,
    Psi,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Theta, ParamGroup::Phi, ParamGroup::Psi];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Theta => "theta",
            ParamGroup::Phi => "phi",
            ParamGroup::Psi => "psi",
        }
    }
}

/// Parameter leaves of one group, bound to a graph.
#[derive(Debug, Clone, Default)]
pub struct BoundGroup {
    vars: HashMap<String, Var>,
    order: Vec<Var>,
}

impl BoundGroup {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    /// Leaves in the same order as the group's tensors.
    pub fn vars(&self) -> &[Var] {
        &self.order
    }
}

#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    pub theta: BoundGroup,
    pub phi: BoundGroup,
    pub psi: BoundGroup,
}

impl BoundParams {
    pub fn group(&self, g: ParamGroup) -> &BoundGroup {
        match g {
            ParamGroup::Theta => &self.theta,
            ParamGroup::Phi => &self.phi,
            ParamGroup::Psi => &self.psi,
        }
    }
}

impl ModelParameters {
    /// Draws fresh parameters. Weights and biases are uniform in
    /// `±1/sqrt(fan_in)`; the accumulator uses its own seed.
    pub fn init(
        extractor: &ExtractorConfig,
        accumulator: &AccumulatorConfig,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        extractor.validate()?;
        accumulator.validate(extractor.embed_dim)?;
        if num_classes == 0 {
            return Err(Error::Config("classifier needs at least one class".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = extractor.init(&mut rng);
        let mut phi_rng = ChaCha8Rng::seed_from_u64(accumulator.seed);
        let phi = accumulator.init(extractor.embed_dim, &mut phi_rng);
        let psi = head::init(extractor.embed_dim, num_classes, &mut rng);
        Ok(Self { theta, phi, psi })
    }

    pub fn group(&self, g: ParamGroup) -> &[NamedTensor] {
        match g {
            ParamGroup::Theta => &self.theta,
            ParamGroup::Phi => &self.phi,
            ParamGroup::Psi => &self.psi,
        }
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut Vec<NamedTensor> {
        match g {
            ParamGroup::Theta => &mut self.theta,
            ParamGroup::Phi => &mut self.phi,
            ParamGroup::Psi => &mut self.psi,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.psi
            .iter()
            .find(|t| t.name == "fc.bias")
            .map_or(0, |t| t.value.cols)
    }

    pub fn num_scalars(&self) -> usize {
        ParamGroup::ALL
            .iter()
            .flat_map(|&g| self.group(g))
            .map(|t| t.value.data.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        ParamGroup::ALL
            .iter()
            .flat_map(|&g| self.group(g))
            .all(|t| t.value.is_finite())
    }

    /// Adds every tensor to `g` as a leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let mut bind_group = |tensors: &[NamedTensor]| {
            let mut b = BoundGroup::default();
            for t in tensors {
                let v = g.leaf(t.value.clone());
                b.vars.insert(t.name.clone(), v);
                b.order.push(v);
            }
            b
        };
        BoundParams {
            theta: bind_group(&self.theta),
            phi: bind_group(&self.phi),
            psi: bind_group(&self.psi),
        }
    }
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Mat {
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect(),
    )
}

/// An affine layer `x W + b` with `W: fan_in x fan_out`.
pub(crate) fn init_linear(
    out: &mut Vec<NamedTensor>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    out.push(NamedTensor {
        name: format!("{prefix}.weight"),
        value: uniform(rng, fan_in, fan_out, bound),
    });
    out.push(NamedTensor {
        name: format!("{prefix}.bias"),
        value: uniform(rng, 1, fan_out, bound),
    });
}

pub(crate) fn linear(g: &mut Graph, params: &BoundGroup, prefix: &str, x: Var) -> Var {
    let w = params.get(&format!("{prefix}.weight"));
    let b = params.get(&format!("{prefix}.bias"));
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

/// Full differentiable model as used in training: configs plus parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmilModel {
    pub extractor: ExtractorConfig,
    pub accumulator: AccumulatorConfig,
    pub params: ModelParameters,
}

impl CmilModel {
    pub fn new(
        extractor: ExtractorConfig,
        accumulator: AccumulatorConfig,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let params = ModelParameters::init(&extractor, &accumulator, num_classes, seed)?;
        Ok(Self {
            extractor,
            accumulator,
            params,
        })
    }

    /// Embeds a batch of flattened inputs (one row per crop).
    pub fn embed(&self, inputs: &Mat) -> Result<Mat> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let x = g.leaf(inputs.clone());
        let z = extract_on_graph(&mut g, &self.extractor, &bound.theta, x)?;
        let out = g.value(z).clone();
        if !out.is_finite() {
            return Err(Error::NonFinite("crop embeddings".into()));
        }
        Ok(out)
    }
}
