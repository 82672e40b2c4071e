use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{init_linear, linear, BoundGroup, CropEmbedding, ModelParameters, NamedTensor};
use crate::autodiff::{Graph, Mat, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    /// Fully connected layers with tanh activations over flat vectors.
    ToyMlp,
    /// One 3x3 valid convolution, tanh, global average pooling and a linear
    /// projection, over `[channels, height, width]` inputs.
    ToyCnn,
    /// Placeholder for a pretrained backbone supplied outside this crate.
    External,
}

impl std::str::FromStr for ExtractorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy_mlp" => Ok(Self::ToyMlp),
            "toy_cnn" => Ok(Self::ToyCnn),
            "external" => Ok(Self::External),
            other => Err(Error::Config(format!("unknown extractor kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for ExtractorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::ToyMlp => "toy_mlp",
            Self::ToyCnn => "toy_cnn",
            Self::External => "external",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub kind: ExtractorKind,
    pub input_shape: Vec<usize>,
    pub embed_dim: usize,
    pub hidden_sizes: Vec<usize>,
    #[serde(default)]
    pub feature_norm: bool,
}

impl ExtractorConfig {
    pub fn toy_mlp(input_dim: usize, embed_dim: usize, hidden_sizes: Vec<usize>) -> Self {
        Self {
            kind: ExtractorKind::ToyMlp,
            input_shape: vec![input_dim],
            embed_dim,
            hidden_sizes,
            feature_norm: false,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 {
            return Err(Error::Config(format!(
                "embed_dim must be >= 2, got {}",
                self.embed_dim
            )));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::Config("hidden sizes must be positive".into()));
        }
        match self.kind {
            ExtractorKind::ToyMlp => {
                if self.input_len() == 0 {
                    return Err(Error::Config("input_shape must be non-empty".into()));
                }
            }
            ExtractorKind::ToyCnn => match self.input_shape.as_slice() {
                [c, h, w] if *c > 0 && *h >= 3 && *w >= 3 => {}
                other => {
                    return Err(Error::Config(format!(
                        "toy_cnn needs input_shape [channels, height>=3, width>=3], got {other:?}"
                    )))
                }
            },
            ExtractorKind::External => {
                return Err(Error::Config(
                    "external extractors are not built in; embed crops with the backbone and use toy_mlp over the features".into(),
                ))
            }
        }
        Ok(())
    }

    fn cnn_channels(&self) -> usize {
        self.hidden_sizes.first().copied().unwrap_or(8)
    }

    pub(super) fn init(&self, rng: &mut ChaCha8Rng) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        match self.kind {
            ExtractorKind::ToyMlp => {
                let mut fan_in = self.input_len();
                for (i, &h) in self.hidden_sizes.iter().enumerate() {
                    init_linear(&mut out, &format!("fc{i}"), fan_in, h, rng);
                    fan_in = h;
                }
                init_linear(&mut out, "out", fan_in, self.embed_dim, rng);
            }
            ExtractorKind::ToyCnn => {
                let c = self.input_shape[0];
                let f = self.cnn_channels();
                init_linear(&mut out, "conv", c * 9, f, rng);
                init_linear(&mut out, "out", f, self.embed_dim, rng);
            }
            ExtractorKind::External => {}
        }
        out
    }
}

/// Row-major indices turning `[n, c, h, w]` inputs into 3x3 patches, one row
/// per output position.
fn im2col_index(n: usize, c: usize, h: usize, w: usize) -> (usize, usize, Vec<Option<usize>>) {
    let (oh, ow) = (h - 2, w - 2);
    let rows = n * oh * ow;
    let cols = c * 9;
    let mut idx = Vec::with_capacity(rows * cols);
    for i in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                for ch in 0..c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            idx.push(Some(i * c * h * w + ch * h * w + (y + ky) * w + (x + kx)));
                        }
                    }
                }
            }
        }
    }
    (rows, cols, idx)
}

/// Applies the extractor row-wise to `x` (n x input_len). No operation mixes
/// rows, so every crop is embedded independently.
pub fn extract_on_graph(
    g: &mut Graph,
    cfg: &ExtractorConfig,
    theta: &BoundGroup,
    x: Var,
) -> Result<Var> {
    let (n, d_in) = g.value(x).shape();
    if d_in != cfg.input_len() {
        return Err(Error::Shape(format!(
            "crop input has {d_in} values, extractor expects {:?}",
            cfg.input_shape
        )));
    }
    let z = match cfg.kind {
        ExtractorKind::ToyMlp => {
            let mut h = x;
            for i in 0..cfg.hidden_sizes.len() {
                h = linear(g, theta, &format!("fc{i}"), h);
                h = g.tanh(h);
            }
            linear(g, theta, "out", h)
        }
        ExtractorKind::ToyCnn => {
            let (c, hh, ww) = (cfg.input_shape[0], cfg.input_shape[1], cfg.input_shape[2]);
            let (rows, cols, idx) = im2col_index(n, c, hh, ww);
            let patches = g.gather(x, rows, cols, idx);
            let conv = linear(g, theta, "conv", patches);
            let act = g.tanh(conv);
            let pooled = g.segment_mean_rows(act, (hh - 2) * (ww - 2));
            linear(g, theta, "out", pooled)
        }
        ExtractorKind::External => {
            return Err(Error::Config("external extractor cannot run in-process".into()))
        }
    };
    Ok(if cfg.feature_norm {
        g.l2_normalize_rows(z)
    } else {
        z
    })
}

/// Embeds each crop independently.
pub fn extract_features(
    crops: &[(String, Vec<f64>)],
    params: &ModelParameters,
    cfg: &ExtractorConfig,
) -> Result<Vec<CropEmbedding>> {
    if crops.is_empty() {
        return Ok(Vec::new());
    }
    let d = cfg.input_len();
    if let Some((id, v)) = crops.iter().find(|(_, v)| v.len() != d) {
        return Err(Error::Shape(format!(
            "crop {id} has {} values, expected {d}",
            v.len()
        )));
    }
    let rows: Vec<Vec<f64>> = crops.iter().map(|(_, v)| v.clone()).collect();
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let x = g.leaf(Mat::from_rows(&rows));
    let z = extract_on_graph(&mut g, cfg, &bound.theta, x)?;
    let z = g.value(z);
    if !z.is_finite() {
        return Err(Error::NonFinite("extractor output diverged".into()));
    }
    Ok(crops
        .iter()
        .enumerate()
        .map(|(i, (id, _))| CropEmbedding {
            crop_id: id.clone(),
            vector: z.row(i).to_vec(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{AccumulatorConfig, AccumulatorKind};

    fn params(cfg: &ExtractorConfig) -> ModelParameters {
        ModelParameters::init(cfg, &AccumulatorConfig::simple(AccumulatorKind::Mean), 2, 3).unwrap()
    }

    fn crops(n: usize, d: usize) -> Vec<(String, Vec<f64>)> {
        (0..n)
            .map(|i| (format!("c{i}"), (0..d).map(|j| ((i * d + j) as f64 * 0.37).sin()).collect()))
            .collect()
    }

    #[test]
    fn identical_inputs_identical_embeddings() {
        let cfg = ExtractorConfig::toy_mlp(5, 3, vec![4, 4]);
        let p = params(&cfg);
        let mut c = crops(2, 5);
        c[1].1 = c[0].1.clone();
        let e = extract_features(&c, &p, &cfg).unwrap();
        assert_eq!(e[0].vector, e[1].vector);
    }

    #[test]
    fn feature_norm_gives_unit_vectors() {
        let mut cfg = ExtractorConfig::toy_mlp(5, 3, vec![4]);
        cfg.feature_norm = true;
        let p = params(&cfg);
        for e in extract_features(&crops(6, 5), &p, &cfg).unwrap() {
            let n: f64 = e.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_weights_give_zero_embedding() {
        let cfg = ExtractorConfig::toy_mlp(5, 3, vec![4]);
        let mut p = params(&cfg);
        for t in &mut p.theta {
            t.value.data.iter_mut().for_each(|x| *x = 0.0);
        }
        for e in extract_features(&crops(3, 5), &p, &cfg).unwrap() {
            assert!(e.vector.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn crops_are_embedded_independently() {
        let cfg = ExtractorConfig::toy_mlp(5, 3, vec![4]);
        let p = params(&cfg);
        let all = extract_features(&crops(4, 5), &p, &cfg).unwrap();
        let one = extract_features(&crops(4, 5)[2..3], &p, &cfg).unwrap();
        assert_eq!(all[2].vector, one[0].vector);
    }

    #[test]
    fn cnn_runs_on_image_shaped_crops() {
        let cfg = ExtractorConfig {
            kind: ExtractorKind::ToyCnn,
            input_shape: vec![2, 4, 5],
            embed_dim: 3,
            hidden_sizes: vec![4],
            feature_norm: false,
        };
        let p = params(&cfg);
        let all = extract_features(&crops(3, 40), &p, &cfg).unwrap();
        let one = extract_features(&crops(3, 40)[1..2], &p, &cfg).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(all[1].vector, one[0].vector);
    }

    #[test]
    fn shape_and_config_errors() {
        let cfg = ExtractorConfig::toy_mlp(5, 3, vec![4]);
        let p = params(&cfg);
        assert!(matches!(extract_features(&crops(2, 4), &p, &cfg), Err(Error::Shape(_))));
        assert!(ExtractorConfig::toy_mlp(5, 1, vec![]).validate().is_err());
        let ext = ExtractorConfig {
            kind: ExtractorKind::External,
            ..cfg
        };
        assert!(ext.validate().is_err());
    }
}
