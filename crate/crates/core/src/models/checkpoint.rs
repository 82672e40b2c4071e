use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AccumulatorConfig, ExtractorConfig, ModelParameters};
use crate::autodiff::DistanceKind;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "cmil-checkpoint/v1";

/// Everything needed to embed crops again: configs, the training distance,
/// the label order of the classifier head, and the parameter groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub extractor: ExtractorConfig,
    pub accumulator: AccumulatorConfig,
    pub distance: DistanceKind,
    pub labels: Vec<String>,
    pub params: ModelParameters,
}

impl Checkpoint {
    pub fn new(
        extractor: ExtractorConfig,
        accumulator: AccumulatorConfig,
        distance: DistanceKind,
        labels: Vec<String>,
        params: ModelParameters,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            extractor,
            accumulator,
            distance,
            labels,
            params,
        }
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string(ckpt).map_err(Error::from_json)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(Error::from_json)?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(Error::Config(format!(
            "unsupported checkpoint format {:?}, expected {CHECKPOINT_FORMAT}",
            ckpt.format
        )));
    }
    if !ckpt.params.is_finite() {
        return Err(Error::NonFinite(format!("parameters in {}", path.display())));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::AccumulatorKind;

    #[test]
    fn round_trip_is_exact() {
        let ext = ExtractorConfig::toy_mlp(4, 4, vec![3]);
        let acc = AccumulatorConfig {
            kind: AccumulatorKind::SetTransformer,
            st_heads: 2,
            ..Default::default()
        };
        let params = ModelParameters::init(&ext, &acc, 3, 5).unwrap();
        let ck = Checkpoint::new(ext, acc, DistanceKind::Cosine, vec!["a".into(), "b".into(), "c".into()], params);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_checkpoint(&ck, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ck);

        let text = std::fs::read_to_string(&path).unwrap();
        for group in ["\"theta\"", "\"phi\"", "\"psi\"", CHECKPOINT_FORMAT] {
            assert!(text.contains(group));
        }
        std::fs::write(&path, text.replace(CHECKPOINT_FORMAT, "other/v0")).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
