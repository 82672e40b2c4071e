//! Resolves crop `data_ref`s into flat input vectors.
//!
//! Path references point at either a JSON array of numbers or a raw
//! little-endian `f32` file (`.f32`). Relative paths resolve against the
//! directory of the manifest that names them.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::autodiff::Mat;
use crate::bag_data::{DataRef, DatasetManifest};
use crate::error::{Error, Result};

pub fn resolve_data_ref(data_ref: &DataRef, base_dir: Option<&Path>) -> Result<Vec<f64>> {
    match data_ref {
        DataRef::Vector(v) => Ok(v.clone()),
        DataRef::Path(p) => {
            let mut path = PathBuf::from(p);
            if path.is_relative() {
                if let Some(base) = base_dir {
                    path = base.join(path);
                }
            }
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if path.extension().is_some_and(|e| e == "f32") {
                if bytes.len() % 4 != 0 {
                    return Err(Error::Shape(format!(
                        "{} is not a whole number of f32 values",
                        path.display()
                    )));
                }
                Ok(bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                    .collect())
            } else {
                serde_json::from_slice(&bytes).map_err(Error::from_json)
            }
        }
    }
}

/// Input vectors for every crop of a manifest, keyed by crop id.
#[derive(Debug, Clone, Default)]
pub struct CropStore {
    inputs: HashMap<String, Vec<f64>>,
    dim: usize,
}

impl CropStore {
    pub fn from_manifest(m: &DatasetManifest, base_dir: Option<&Path>) -> Result<Self> {
        let mut store = Self::default();
        for c in &m.crops {
            store.insert(&c.crop_id, resolve_data_ref(&c.data_ref, base_dir)?)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, crop_id: &str, v: Vec<f64>) -> Result<()> {
        if self.inputs.is_empty() {
            self.dim = v.len();
        } else if v.len() != self.dim {
            return Err(Error::Shape(format!(
                "crop {crop_id} has {} values, expected {}",
                v.len(),
                self.dim
            )));
        }
        self.inputs.insert(crop_id.to_owned(), v);
        Ok(())
    }

    pub fn get(&self, crop_id: &str) -> Option<&[f64]> {
        self.inputs.get(crop_id).map(Vec::as_slice)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Stacks the inputs of `ids` as matrix rows.
    pub fn matrix<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<Mat> {
        let mut data = Vec::new();
        let mut rows = 0;
        for id in ids {
            let v = self
                .get(id)
                .ok_or_else(|| Error::Integrity(format!("no input for crop {id}")))?;
            data.extend_from_slice(v);
            rows += 1;
        }
        Ok(Mat::from_vec(rows, self.dim, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolves_json_and_f32_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.json"), "[1.5, -2.0]").unwrap();
        let raw: Vec<u8> = [0.25f32, 4.0].iter().flat_map(|x| x.to_le_bytes()).collect();
        std::fs::write(dir.path().join("b.f32"), raw).unwrap();
        let a = resolve_data_ref(&DataRef::Path("a.json".into()), Some(dir.path())).unwrap();
        let b = resolve_data_ref(&DataRef::Path("b.f32".into()), Some(dir.path())).unwrap();
        assert_eq!(a, vec![1.5, -2.0]);
        assert_eq!(b, vec![0.25, 4.0]);
        assert!(resolve_data_ref(&DataRef::Path("missing.json".into()), Some(dir.path())).is_err());
    }

    #[test]
    fn store_checks_dimension() {
        let mut s = CropStore::default();
        s.insert("a", vec![1.0, 2.0]).unwrap();
        assert!(s.insert("b", vec![1.0]).is_err());
        let m = s.matrix(["a", "a"]).unwrap();
        assert_eq!(m.shape(), (2, 2));
        assert!(s.matrix(["zz"]).is_err());
    }
}
