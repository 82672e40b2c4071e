//! Query/gallery retrieval evaluation on crop embeddings: rank-k accuracy
//! and mean average precision.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{vector_distance, DistanceKind, Mat};
use crate::bag_data::{DataRef, DatasetManifest};
use crate::error::{Error, Result};
use crate::features::resolve_data_ref;
use crate::models::{ExtractorConfig, ModelParameters};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCrop {
    pub crop_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_id: Option<String>,
    pub data_ref: DataRef,
}

/// Queries and gallery carry identities; distractors never match anything.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSplit {
    pub queries: Vec<EvalCrop>,
    pub gallery: Vec<EvalCrop>,
    #[serde(default)]
    pub distractors: Vec<EvalCrop>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Drop gallery items sharing both identity and camera with the query.
    pub exclude_same_camera: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub num_queries: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

impl EvalSplit {
    pub fn validate(&self) -> Result<()> {
        if self.gallery.is_empty() && self.distractors.is_empty() {
            return Err(Error::Empty("gallery is empty".into()));
        }
        if self.queries.is_empty() {
            return Err(Error::Empty("no queries".into()));
        }
        for c in self.queries.iter().chain(&self.gallery) {
            if c.identity.is_none() {
                return Err(Error::Integrity(format!("crop {} has no identity", c.crop_id)));
            }
        }
        if let Some(d) = self.distractors.iter().find(|d| d.identity.is_some()) {
            return Err(Error::Integrity(format!(
                "distractor {} carries an identity",
                d.crop_id
            )));
        }
        for q in &self.queries {
            if !self.gallery.iter().any(|g| g.identity == q.identity) {
                return Err(Error::Integrity(format!(
                    "query {} identity {:?} is absent from the gallery",
                    q.crop_id, q.identity
                )));
            }
        }
        Ok(())
    }

    /// Reads a split and replaces path references by their vectors.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut split: EvalSplit = serde_json::from_str(&text).map_err(Error::from_json)?;
        let base = path.parent();
        for c in split
            .queries
            .iter_mut()
            .chain(split.gallery.iter_mut())
            .chain(split.distractors.iter_mut())
        {
            if matches!(c.data_ref, DataRef::Path(_)) {
                c.data_ref = DataRef::Vector(resolve_data_ref(&c.data_ref, base)?);
            }
        }
        split.validate()?;
        Ok(split)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(Error::from_json)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// One random crop per identity becomes a query, the rest form the
    /// gallery. Uses true identities, so the manifest must carry them.
    pub fn from_manifest(m: &DatasetManifest, seed: u64) -> Result<Self> {
        let mut by_id: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, c) in m.crops.iter().enumerate() {
            let t = c.true_identity.as_deref().ok_or_else(|| {
                Error::Integrity(format!("crop {} has no true_identity", c.crop_id))
            })?;
            by_id.entry(t).or_default().push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut split = EvalSplit::default();
        for (id, mut idx) in by_id {
            idx.shuffle(&mut rng);
            let to_crop = |i: usize| EvalCrop {
                crop_id: m.crops[i].crop_id.clone(),
                identity: Some(id.to_owned()),
                camera_id: m.crops[i].camera_id.clone(),
                data_ref: m.crops[i].data_ref.clone(),
            };
            if idx.len() >= 2 {
                split.queries.push(to_crop(idx[0]));
                split.gallery.extend(idx[1..].iter().map(|&i| to_crop(i)));
            } else {
                split.gallery.extend(idx.iter().map(|&i| to_crop(i)));
            }
        }
        split.validate()?;
        Ok(split)
    }

    fn vectors(crops: &[EvalCrop]) -> Result<Vec<Vec<f64>>> {
        crops
            .iter()
            .map(|c| match &c.data_ref {
                DataRef::Vector(v) => Ok(v.clone()),
                DataRef::Path(_) => resolve_data_ref(&c.data_ref, None),
            })
            .collect()
    }
}

/// Embeddings of a split plus the metadata needed for ranking. Gallery rows
/// come first, distractors after them.
#[derive(Debug, Clone)]
pub struct EmbeddedSplit {
    pub queries: Mat,
    pub query_identities: Vec<String>,
    pub query_cameras: Vec<Option<String>>,
    pub gallery: Mat,
    /// `None` for distractors.
    pub gallery_identities: Vec<Option<String>>,
    pub gallery_cameras: Vec<Option<String>>,
}

/// One ranked gallery entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedItem {
    /// Row in the combined gallery-then-distractor list.
    pub index: usize,
    pub distance: f64,
    pub relevant: bool,
}

pub type RankedList = Vec<RankedItem>;

const EMBED_CHUNK: usize = 1024;

fn embed_rows(
    rows: Vec<Vec<f64>>,
    params: &ModelParameters,
    extractor: &ExtractorConfig,
) -> Result<Mat> {
    let d = extractor.embed_dim;
    if let Some(r) = rows.iter().find(|r| r.len() != extractor.input_len()) {
        return Err(Error::Shape(format!(
            "split crop has {} values but the model expects {:?}",
            r.len(),
            extractor.input_shape
        )));
    }
    let model = crate::models::CmilModel {
        extractor: extractor.clone(),
        accumulator: Default::default(),
        params: params.clone(),
    };
    let mut data = Vec::with_capacity(rows.len() * d);
    for chunk in rows.chunks(EMBED_CHUNK) {
        let z = model.embed(&Mat::from_rows(chunk))?;
        data.extend(z.data);
    }
    Ok(Mat::from_vec(rows.len(), d, data))
}

pub fn embed_split(
    split: &EvalSplit,
    params: &ModelParameters,
    extractor: &ExtractorConfig,
) -> Result<EmbeddedSplit> {
    split.validate()?;
    let queries = embed_rows(EvalSplit::vectors(&split.queries)?, params, extractor)?;
    let mut gallery_rows = EvalSplit::vectors(&split.gallery)?;
    gallery_rows.extend(EvalSplit::vectors(&split.distractors)?);
    let gallery = embed_rows(gallery_rows, params, extractor)?;
    Ok(EmbeddedSplit {
        queries,
        query_identities: split
            .queries
            .iter()
            .map(|q| q.identity.clone().unwrap_or_default())
            .collect(),
        query_cameras: split.queries.iter().map(|q| q.camera_id.clone()).collect(),
        gallery,
        gallery_identities: split
            .gallery
            .iter()
            .map(|g| g.identity.clone())
            .chain(split.distractors.iter().map(|_| None))
            .collect(),
        gallery_cameras: split
            .gallery
            .iter()
            .chain(&split.distractors)
            .map(|g| g.camera_id.clone())
            .collect(),
    })
}

/// Sorts the gallery (and distractors) by ascending distance to each query;
/// equal distances keep their original order.
pub fn rank_queries(
    split: &EmbeddedSplit,
    distance: DistanceKind,
    opts: &EvalOptions,
) -> Result<Vec<RankedList>> {
    if split.gallery.rows == 0 {
        return Err(Error::Empty("gallery is empty".into()));
    }
    if split.gallery.cols != split.queries.cols {
        return Err(Error::Shape("query and gallery dimensions differ".into()));
    }
    Ok((0..split.queries.rows)
        .into_par_iter()
        .map(|q| {
            let qid = &split.query_identities[q];
            let qcam = &split.query_cameras[q];
            let mut items: Vec<RankedItem> = (0..split.gallery.rows)
                .filter(|&g| {
                    !(opts.exclude_same_camera
                        && qcam.is_some()
                        && split.gallery_identities[g].as_ref() == Some(qid)
                        && split.gallery_cameras[g] == *qcam)
                })
                .map(|g| RankedItem {
                    index: g,
                    distance: vector_distance(split.queries.row(q), split.gallery.row(g), distance),
                    relevant: split.gallery_identities[g].as_ref() == Some(qid),
                })
                .collect();
            items.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index)));
            items
        })
        .collect())
}

/// Fraction of queries with a relevant item among their first `k` results.
pub fn rank_k_accuracy(lists: &[RankedList], k: usize) -> f64 {
    if lists.is_empty() {
        return 0.0;
    }
    let hits = lists
        .iter()
        .filter(|l| l.iter().take(k).any(|i| i.relevant))
        .count();
    hits as f64 / lists.len() as f64
}

/// Mean over queries of the average precision at each relevant item.
pub fn mean_average_precision(lists: &[RankedList]) -> Result<f64> {
    if lists.is_empty() {
        return Ok(0.0);
    }
    let mut aps = Vec::with_capacity(lists.len());
    for (q, l) in lists.iter().enumerate() {
        let mut found = 0usize;
        let mut sum = 0.0;
        for (pos, item) in l.iter().enumerate() {
            if item.relevant {
                found += 1;
                sum += found as f64 / (pos + 1) as f64;
            }
        }
        if found == 0 {
            return Err(Error::Integrity(format!("query {q} has no relevant gallery item")));
        }
        aps.push(sum / found as f64);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

pub fn report_from_lists(lists: &[RankedList]) -> Result<EvalReport> {
    Ok(EvalReport {
        rank1: rank_k_accuracy(lists, 1),
        rank5: rank_k_accuracy(lists, 5),
        rank10: rank_k_accuracy(lists, 10),
        map: mean_average_precision(lists)?,
        num_queries: lists.len(),
    })
}

pub fn evaluate_embedded(
    split: &EmbeddedSplit,
    distance: DistanceKind,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    report_from_lists(&rank_queries(split, distance, opts)?)
}

/// Embeds every crop of the split with the extractor alone (no bag
/// accumulation) and scores the rankings.
pub fn evaluate(
    split: &EvalSplit,
    params: &ModelParameters,
    extractor: &ExtractorConfig,
    distance: DistanceKind,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    evaluate_embedded(&embed_split(split, params, extractor)?, distance, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(relevant: bool) -> RankedItem {
        RankedItem {
            index: 0,
            distance: 0.0,
            relevant,
        }
    }

    fn embedded(queries: &[(&[f64], &str)], gallery: &[(&[f64], Option<&str>)]) -> EmbeddedSplit {
        EmbeddedSplit {
            queries: Mat::from_rows(&queries.iter().map(|q| q.0.to_vec()).collect::<Vec<_>>()),
            query_identities: queries.iter().map(|q| q.1.to_owned()).collect(),
            query_cameras: vec![None; queries.len()],
            gallery: Mat::from_rows(&gallery.iter().map(|g| g.0.to_vec()).collect::<Vec<_>>()),
            gallery_identities: gallery.iter().map(|g| g.1.map(str::to_owned)).collect(),
            gallery_cameras: vec![None; gallery.len()],
        }
    }

    #[test]
    fn ap_arithmetic() {
        let single = vec![item(true), item(false)];
        assert_eq!(mean_average_precision(&[single]).unwrap(), 1.0);
        let l = vec![item(true), item(false), item(true), item(false), item(false)];
        let ap = mean_average_precision(&[l]).unwrap();
        assert_eq!(ap, (1.0 / 1.0 + 2.0 / 3.0) / 2.0);
        assert!((ap - 0.833333).abs() < 1e-6);
        assert!(mean_average_precision(&[vec![item(false)]]).is_err());
    }

    #[test]
    fn single_gallery_item_ranks_first() {
        let s = embedded(&[(&[0.0, 1.0], "a")], &[(&[5.0, 5.0], Some("a"))]);
        let lists = rank_queries(&s, DistanceKind::Euclidean, &Default::default()).unwrap();
        assert_eq!(lists[0].len(), 1);
        assert_eq!(lists[0][0].index, 0);
    }

    #[test]
    fn identical_gallery_crop_ranks_first() {
        let s = embedded(
            &[(&[0.3, 0.4], "a")],
            &[(&[1.0, 1.0], Some("b")), (&[0.3, 0.4], Some("a")), (&[0.2, 0.4], None)],
        );
        let lists = rank_queries(&s, DistanceKind::Euclidean, &Default::default()).unwrap();
        assert_eq!(lists[0][0].index, 1);
        assert_eq!(lists[0][0].distance, 0.0);
        assert!(!lists[0][1].relevant, "distractor never matches");
    }

    #[test]
    fn ties_keep_gallery_order() {
        let s = embedded(&[(&[0.0], "a")], &[(&[1.0], Some("b")), (&[-1.0], Some("a"))]);
        let lists = rank_queries(&s, DistanceKind::Euclidean, &Default::default()).unwrap();
        assert_eq!(lists[0][0].index, 0);
        assert_eq!(rank_k_accuracy(&lists, 1), 0.0);
        assert_eq!(rank_k_accuracy(&lists, 2), 1.0);
    }

    #[test]
    fn separable_embedding_is_perfect() {
        let s = embedded(
            &[(&[1.0, 0.0], "a"), (&[0.0, 1.0], "b")],
            &[
                (&[1.1, 0.0], Some("a")),
                (&[0.0, 0.9], Some("b")),
                (&[0.9, 0.1], Some("a")),
                (&[-3.0, -3.0], None),
            ],
        );
        let r = evaluate_embedded(&s, DistanceKind::Euclidean, &Default::default()).unwrap();
        assert_eq!((r.rank1, r.rank5, r.rank10, r.map), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(r.num_queries, 2);
    }

    #[test]
    fn camera_exclusion_drops_same_camera_matches() {
        let mut s = embedded(
            &[(&[0.0], "a")],
            &[(&[0.0], Some("a")), (&[1.0], Some("b")), (&[2.0], Some("a"))],
        );
        s.query_cameras = vec![Some("c1".into())];
        s.gallery_cameras = vec![Some("c1".into()), Some("c1".into()), Some("c2".into())];
        let opts = EvalOptions {
            exclude_same_camera: true,
        };
        let lists = rank_queries(&s, DistanceKind::Euclidean, &opts).unwrap();
        assert_eq!(lists[0].len(), 2);
        assert_eq!(rank_k_accuracy(&lists, 1), 0.0);
        let plain = rank_queries(&s, DistanceKind::Euclidean, &Default::default()).unwrap();
        assert_eq!(rank_k_accuracy(&plain, 1), 1.0);
    }

    #[test]
    fn split_validation() {
        let crop = |id: &str, identity: Option<&str>| EvalCrop {
            crop_id: id.into(),
            identity: identity.map(str::to_owned),
            camera_id: None,
            data_ref: DataRef::Vector(vec![0.0]),
        };
        let ok = EvalSplit {
            queries: vec![crop("q", Some("a"))],
            gallery: vec![crop("g", Some("a"))],
            distractors: vec![crop("d", None)],
        };
        assert!(ok.validate().is_ok());
        let mut bad = ok.clone();
        bad.gallery[0].identity = Some("b".into());
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.distractors[0].identity = Some("a".into());
        assert!(bad.validate().is_err());
        let mut bad = ok;
        bad.gallery.clear();
        bad.distractors.clear();
        assert!(bad.validate().is_err());
    }
}
