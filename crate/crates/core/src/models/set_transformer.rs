//! Set transformer accumulator: stacked self-attention blocks followed by
//! attention pooling onto one learned seed vector.
//!
//! Each attention block computes `H = X + MultiHead(X, Y, Y)` and returns
//! `H + FF(H)` with a two-layer tanh feed-forward. Self-attention blocks are
//! permutation equivariant and the pooling block is invariant, so the whole
//! map is invariant to the order of its input rows.

use rand_chacha::ChaCha8Rng;

use super::accumulator::embeddings_matrix;
use super::{init_linear, linear, uniform, AccumulatorConfig, BagRepresentation, BoundGroup, CropEmbedding, ModelParameters, NamedTensor};
use crate::autodiff::{Graph, Var};
use crate::error::Result;

fn block_names(cfg: &AccumulatorConfig) -> Vec<String> {
    let mut names: Vec<String> = (0..cfg.st_layers).map(|i| format!("sab{i}")).collect();
    names.push("pma".into());
    names
}

pub(super) fn init(cfg: &AccumulatorConfig, d: usize, rng: &mut ChaCha8Rng) -> Vec<NamedTensor> {
    let hidden = cfg.hidden(d);
    let mut out = Vec::new();
    for block in block_names(cfg) {
        for proj in ["q", "k", "v", "o"] {
            init_linear(&mut out, &format!("{block}.{proj}"), d, d, rng);
        }
        init_linear(&mut out, &format!("{block}.ff1"), d, hidden, rng);
        init_linear(&mut out, &format!("{block}.ff2"), hidden, d, rng);
    }
    out.push(NamedTensor {
        name: "pma.seed".into(),
        value: uniform(rng, 1, d, 1.0 / (d as f64).sqrt()),
    });
    out
}

/// Multihead attention block with queries from `x` and keys/values from `y`.
fn attention_block(
    g: &mut Graph,
    phi: &BoundGroup,
    block: &str,
    heads: usize,
    x: Var,
    y: Var,
) -> Var {
    let d = g.value(x).cols;
    let dh = d / heads;
    let q = linear(g, phi, &format!("{block}.q"), x);
    let k = linear(g, phi, &format!("{block}.k"), y);
    let v = linear(g, phi, &format!("{block}.v"), y);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (s, e) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, s, e);
        let kh = g.slice_cols(k, s, e);
        let vh = g.slice_cols(v, s, e);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax_rows(scores);
        outs.push(g.matmul(attn, vh));
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    let o = linear(g, phi, &format!("{block}.o"), cat);
    let h = g.add(x, o);
    let f = linear(g, phi, &format!("{block}.ff1"), h);
    let f = g.tanh(f);
    let f = linear(g, phi, &format!("{block}.ff2"), f);
    g.add(h, f)
}

pub(super) fn forward_on_graph(
    g: &mut Graph,
    cfg: &AccumulatorConfig,
    phi: &BoundGroup,
    z: Var,
) -> Var {
    let mut x = z;
    for i in 0..cfg.st_layers {
        x = attention_block(g, phi, &format!("sab{i}"), cfg.st_heads, x, x);
    }
    let seed = phi.get("pma.seed");
    attention_block(g, phi, "pma", cfg.st_heads, seed, x)
}

/// Runs the set transformer accumulator regardless of `cfg.kind`.
pub fn set_transformer_forward(
    embeddings: &[CropEmbedding],
    params: &ModelParameters,
    cfg: &AccumulatorConfig,
) -> Result<BagRepresentation> {
    let z = embeddings_matrix(embeddings)?;
    cfg.validate(z.cols)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let zv = g.leaf(z);
    let r = forward_on_graph(&mut g, cfg, &bound.phi, zv);
    Ok(BagRepresentation {
        vector: g.value(r).data.clone(),
        source_bag_id: None,
    })
}

#[cfg(test)]
mod tests {
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::models::ExtractorConfig;

    fn setup(d: usize, heads: usize) -> (ModelParameters, AccumulatorConfig) {
        let acc = AccumulatorConfig::set_transformer(heads, 11);
        let p = ModelParameters::init(&ExtractorConfig::toy_mlp(3, d, vec![]), &acc, 2, 0).unwrap();
        (p, acc)
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<CropEmbedding> {
        (0..n)
            .map(|i| CropEmbedding {
                crop_id: format!("c{i}"),
                vector: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn parameter_layout() {
        let (p, _) = setup(8, 4);
        // 3 blocks x 6 affine maps x (weight, bias) + seed
        assert_eq!(p.phi.len(), 3 * 6 * 2 + 1);
    }

    #[test]
    fn invariant_to_permutation() {
        let (p, acc) = setup(8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let set = random_set(&mut rng, 10, 8);
        let base = set_transformer_forward(&set, &p, &acc).unwrap().vector;
        assert_eq!(base.len(), 8);
        for _ in 0..20 {
            let mut s = set.clone();
            s.shuffle(&mut rng);
            let out = set_transformer_forward(&s, &p, &acc).unwrap().vector;
            assert!(max_abs_diff(&base, &out) <= 1e-5);
        }
    }

    #[test]
    fn duplicated_element_matches_singleton() {
        let (p, acc) = setup(8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let one = random_set(&mut rng, 1, 8);
            let two = vec![one[0].clone(), one[0].clone()];
            let a = set_transformer_forward(&one, &p, &acc).unwrap().vector;
            let b = set_transformer_forward(&two, &p, &acc).unwrap().vector;
            assert!(max_abs_diff(&a, &b) <= 1e-5);
        }
    }

    #[test]
    fn heads_must_divide_dimension() {
        let acc = AccumulatorConfig::set_transformer(3, 0);
        assert!(ModelParameters::init(&ExtractorConfig::toy_mlp(3, 8, vec![]), &acc, 2, 0).is_err());
    }
}
