use rand_chacha::ChaCha8Rng;

use super::{init_linear, linear, BagRepresentation, BoundGroup, ModelParameters, NamedTensor};
use crate::autodiff::{Graph, Mat, Var};

pub(super) fn init(embed_dim: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    init_linear(&mut out, "fc", embed_dim, num_classes, rng);
    out
}

/// Class probabilities for each row of `r` (b x D -> b x C).
pub fn classify_on_graph(g: &mut Graph, psi: &BoundGroup, r: Var) -> Var {
    let logits = linear(g, psi, "fc", r);
    g.softmax_rows(logits)
}

pub fn classify_bag(r: &BagRepresentation, params: &ModelParameters) -> Vec<f64> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let x = g.leaf(Mat::row_vector(r.vector.clone()));
    let p = classify_on_graph(&mut g, &bound.psi, x);
    g.value(p).data.clone()
}
