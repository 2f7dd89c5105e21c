//! Detection-level post-processing: greedy NMS, objectness rescoring and the
//! weighted geometric-mean ensemble of two score sources.

use std::collections::{BTreeMap, BTreeSet};

use crate::detection::{rank_order, Detection, ImageId};
use crate::error::{Result, VildError};
use crate::vocab::CategoryId;

pub const DEFAULT_LAMBDA: f64 = 2.0 / 3.0;
pub const DEFAULT_MAX_DETECTIONS: usize = 300;
pub const DEFAULT_PER_CLASS_NMS: f64 = 0.6;
pub const DEFAULT_AGNOSTIC_NMS: f64 = 0.9;
pub const DEFAULT_MAX_PROPOSALS: usize = 1000;

/// Weight `λ` and the base-category set for geometric-mean ensembling.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    lambda: f64,
    base_set: BTreeSet<CategoryId>,
}

impl EnsembleConfig {
    pub fn new(lambda: f64, base_set: impl IntoIterator<Item = CategoryId>) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(VildError::invalid(format!("lambda must be in [0, 1], got {lambda}")));
        }
        Ok(EnsembleConfig {
            lambda,
            base_set: base_set.into_iter().collect(),
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn is_base(&self, category: CategoryId) -> bool {
        self.base_set.contains(&category)
    }
}

/// Greedy NMS. Detections are visited by descending score (ties: lower
/// `source_id`, then lower `category_id`); one is kept iff its IoU with every
/// already kept detection is below `iou_threshold`. With
/// `class_agnostic == false` only detections of the same category suppress
/// each other. At most `max_out` detections are returned.
pub fn nms(
    dets: &[Detection],
    iou_threshold: f64,
    class_agnostic: bool,
    max_out: usize,
) -> Result<Vec<Detection>> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(VildError::invalid(format!(
            "NMS threshold must be in (0, 1], got {iou_threshold}"
        )));
    }
    if max_out == 0 {
        return Err(VildError::invalid("NMS max_out must be at least 1"));
    }
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| rank_order(a, b));

    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        if kept.len() == max_out {
            break;
        }
        let suppressed = kept.iter().any(|k| {
            (class_agnostic || k.category_id == d.category_id)
                && k.bbox.iou(&d.bbox) >= iou_threshold
        });
        if !suppressed {
            kept.push(d.clone());
        }
    }
    Ok(kept)
}

/// Geometric mean of a class score and the proposal objectness.
pub fn objectness_rescore(score: f64, objectness: f64) -> Result<f64> {
    check_unit_interval("score", score)?;
    check_unit_interval("objectness", objectness)?;
    Ok((score * objectness).sqrt())
}

/// Weighted geometric mean of two probabilities. On base categories `p_a`
/// carries weight `λ`; on novel categories `p_b` does.
pub fn ensemble_scores(p_a: f64, p_b: f64, category: CategoryId, cfg: &EnsembleConfig) -> Result<f64> {
    check_unit_interval("p_a", p_a)?;
    check_unit_interval("p_b", p_b)?;
    let lambda = cfg.lambda;
    Ok(if cfg.is_base(category) {
        p_a.powf(lambda) * p_b.powf(1.0 - lambda)
    } else {
        p_a.powf(1.0 - lambda) * p_b.powf(lambda)
    })
}

type PairKey = (ImageId, u32, CategoryId);

fn index_by_pair<'a>(dets: &'a [Detection], which: &str) -> Result<BTreeMap<PairKey, &'a Detection>> {
    let mut map = BTreeMap::new();
    for d in dets {
        if map.insert((d.image_id, d.source_id, d.category_id), d).is_some() {
            return Err(VildError::data(format!(
                "duplicate (image {}, source {}, category {}) in {which}",
                d.image_id, d.source_id, d.category_id
            )));
        }
    }
    Ok(map)
}

/// Ensembles two score sources aligned by (image, proposal, category). A
/// pair missing from one side scores 0 there, so the output covers the
/// union of both inputs. Output is sorted by descending score.
pub fn ensemble_detections(
    dets_a: &[Detection],
    dets_b: &[Detection],
    cfg: &EnsembleConfig,
) -> Result<Vec<Detection>> {
    let a = index_by_pair(dets_a, "first detection list")?;
    let b = index_by_pair(dets_b, "second detection list")?;
    let keys: BTreeSet<PairKey> = a.keys().chain(b.keys()).copied().collect();

    let mut out = Vec::with_capacity(keys.len());
    for key in keys {
        let (da, db) = (a.get(&key), b.get(&key));
        let template = da.or(db).expect("key comes from one of the maps");
        let score = ensemble_scores(
            da.map_or(0.0, |d| d.score),
            db.map_or(0.0, |d| d.score),
            key.2,
            cfg,
        )?;
        out.push(Detection {
            score,
            ..(*template).clone()
        });
    }
    out.sort_by(rank_order);
    Ok(out)
}

/// Per-class NMS then the global top `max_detections` by score, for a
/// single image's detections.
pub fn finalize(dets: &[Detection], max_detections: usize, per_class_nms: f64) -> Result<Vec<Detection>> {
    if dets.is_empty() {
        return Ok(Vec::new());
    }
    nms(dets, per_class_nms, false, max_detections.max(1))
}

/// [`finalize`] applied to each image separately; output grouped by image id.
pub fn finalize_per_image(
    dets: &[Detection],
    max_detections: usize,
    per_class_nms: f64,
) -> Result<Vec<Detection>> {
    let mut by_image: BTreeMap<ImageId, Vec<Detection>> = BTreeMap::new();
    for d in dets {
        by_image.entry(d.image_id).or_default().push(d.clone());
    }
    let mut out = Vec::with_capacity(dets.len().min(by_image.len() * max_detections));
    for image_dets in by_image.values() {
        out.extend(finalize(image_dets, max_detections, per_class_nms)?);
    }
    Ok(out)
}

fn check_unit_interval(what: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(VildError::invalid(format!("{what} must be in [0, 1], got {v}")));
    }
    Ok(())
}
