use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where a crop's input tensor lives: a file on disk or an inline vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataRef {
    Path(String),
    Vector(Vec<f64>),
}

impl DataRef {
    fn modality(&self) -> &'static str {
        match self {
            DataRef::Path(_) => "path",
            DataRef::Vector(_) => "vector",
        }
    }
}

/// One person crop. `true_identity` is diagnostic only and never read on the
/// training path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropRecord {
    pub crop_id: String,
    pub source_image_id: String,
    pub bag_id: String,
    pub data_ref: DataRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_identity: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_id: Option<String>,
}

/// A weakly labeled bag: every crop carries the bag's label, whether or not it
/// actually shows that identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagRecord {
    pub bag_id: String,
    pub label: String,
    pub crop_ids: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub bags: Vec<BagRecord>,
    pub crops: Vec<CropRecord>,
    #[serde(default)]
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

/// A single broken invariant, naming the offending entity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub entity: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.entity, self.rule)
    }
}

impl DatasetManifest {
    /// Number of distinct bag labels (C).
    pub fn num_identities(&self) -> usize {
        self.labels().len()
    }

    /// Distinct bag labels in sorted order. The position of a label in this
    /// list is its class index.
    pub fn labels(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.bags.iter().map(|b| b.label.as_str()).collect();
        set.into_iter().map(str::to_owned).collect()
    }

    pub fn crop_index(&self) -> HashMap<&str, &CropRecord> {
        self.crops.iter().map(|c| (c.crop_id.as_str(), c)).collect()
    }

    pub fn bag(&self, bag_id: &str) -> Option<&BagRecord> {
        self.bags.iter().find(|b| b.bag_id == bag_id)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(Error::from_json)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(Error::from_json)
    }
}

/// Reads and validates a manifest. Bag and crop ordering is preserved.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest = DatasetManifest::from_json(&text)?;
    let violations = validate_manifest(&manifest);
    if !violations.is_empty() {
        let msg = violations
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::Integrity(msg));
    }
    Ok(manifest)
}

pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, manifest.to_json()?).map_err(|e| Error::io(path, e))
}

pub fn validate_manifest(m: &DatasetManifest) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |entity: String, rule: String| out.push(Violation { entity, rule });

    let mut crop_ids: HashSet<&str> = HashSet::new();
    for c in &m.crops {
        if !crop_ids.insert(c.crop_id.as_str()) {
            push(format!("crop {}", c.crop_id), "duplicate crop_id".into());
        }
    }

    let mut bag_ids: HashMap<&str, &BagRecord> = HashMap::new();
    for b in &m.bags {
        if bag_ids.insert(b.bag_id.as_str(), b).is_some() {
            push(format!("bag {}", b.bag_id), "duplicate bag_id".into());
        }
    }

    // crop_id -> bag that lists it
    let mut member_of: HashMap<&str, &str> = HashMap::new();
    for b in &m.bags {
        if b.label.is_empty() {
            push(format!("bag {}", b.bag_id), "empty label".into());
        }
        if b.crop_ids.is_empty() {
            push(format!("bag {}", b.bag_id), "empty crop_ids".into());
        }
        let mut seen = HashSet::new();
        for cid in &b.crop_ids {
            if !seen.insert(cid.as_str()) {
                push(
                    format!("bag {}", b.bag_id),
                    format!("crop {cid} listed more than once"),
                );
                continue;
            }
            if !crop_ids.contains(cid.as_str()) {
                push(
                    format!("bag {}", b.bag_id),
                    format!("references missing crop {cid}"),
                );
                continue;
            }
            if let Some(prev) = member_of.insert(cid.as_str(), b.bag_id.as_str()) {
                push(
                    format!("crop {cid}"),
                    format!("listed by both bag {prev} and bag {}", b.bag_id),
                );
            }
        }
    }

    let mut modality: Option<&'static str> = None;
    let mut dim: Option<usize> = None;
    for c in &m.crops {
        if !bag_ids.contains_key(c.bag_id.as_str()) {
            push(
                format!("crop {}", c.crop_id),
                format!("bag_id {} does not exist", c.bag_id),
            );
        } else {
            match member_of.get(c.crop_id.as_str()) {
                Some(listed) if *listed == c.bag_id => {}
                Some(listed) => push(
                    format!("crop {}", c.crop_id),
                    format!("bag_id {} but listed by bag {listed}", c.bag_id),
                ),
                None => push(
                    format!("crop {}", c.crop_id),
                    format!("not listed by its bag {}", c.bag_id),
                ),
            }
        }
        let this = c.data_ref.modality();
        match modality {
            None => modality = Some(this),
            Some(first) if first != this => push(
                format!("crop {}", c.crop_id),
                format!("data_ref modality {this} differs from dataset modality {first}"),
            ),
            _ => {}
        }
        if let DataRef::Vector(v) = &c.data_ref {
            match dim {
                None => dim = Some(v.len()),
                Some(d) if d != v.len() => push(
                    format!("crop {}", c.crop_id),
                    format!("vector length {} differs from {d}", v.len()),
                ),
                _ => {}
            }
            if v.iter().any(|x| !x.is_finite()) {
                push(format!("crop {}", c.crop_id), "non-finite vector entry".into());
            }
        }
    }
    out
}
