//! Box detection metrics: greedy one-to-one matching, 101-point interpolated
//! AP over IoU 0.50:0.95, AP per frequency bucket, and proposal AR@k.
//!
//! Every image is treated as exhaustively annotated; there is no notion of
//! crowd or ignore regions.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde_json::{Map, Value};

use crate::detection::{rank_order, BBox, Detection, ImageId};
use crate::error::{Result, VildError};
use crate::io::round_sig;
use crate::vocab::{CategoryId, Frequency, Vocabulary};

pub const DEFAULT_AR_KS: [usize; 3] = [100, 300, 1000];

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GroundTruth {
    pub image_id: ImageId,
    pub category_id: CategoryId,
    #[serde(rename = "box", serialize_with = "crate::io::ser_sig_box")]
    pub bbox: BBox,
}

/// Class-agnostic box with a confidence, used for AR@k.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredBox {
    pub image_id: ImageId,
    pub bbox: BBox,
    pub objectness: f64,
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Greedy matching within one image and one category. Detections are taken
/// in descending score (ties: lower source id); each claims the unmatched
/// ground truth with the highest IoU at or above `iou_threshold` (first such
/// ground truth on IoU ties). Returns `(detection index, matched gt index)`
/// in processing order.
pub fn match_detections(
    dets: &[Detection],
    gts: &[BBox],
    iou_threshold: f64,
) -> Vec<(usize, Option<usize>)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| rank_order(&dets[a], &dets[b]).then(a.cmp(&b)));
    match_boxes(order.into_iter().map(|i| (i, &dets[i].bbox)), gts, iou_threshold)
}

fn match_boxes<'a>(
    ordered: impl Iterator<Item = (usize, &'a BBox)>,
    gts: &[BBox],
    iou_threshold: f64,
) -> Vec<(usize, Option<usize>)> {
    let mut taken = vec![false; gts.len()];
    ordered
        .map(|(i, bbox)| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let overlap = bbox.iou(gt);
                if overlap >= iou_threshold && best.is_none_or(|(_, b)| overlap > b) {
                    best = Some((g, overlap));
                }
            }
            let matched = best.map(|(g, _)| g);
            if let Some(g) = matched {
                taken[g] = true;
            }
            (i, matched)
        })
        .collect()
}

/// 101-point interpolated AP from `(score, is_true_positive)` pairs.
/// Pairs are ranked by descending score; equal scores keep input order.
/// `None` when there is no ground truth.
pub fn average_precision(matches: &[(f64, bool)], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..matches.len()).collect();
    order.sort_by(|&a, &b| matches[b].0.total_cmp(&matches[a].0));

    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &i in &order {
        if matches[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    // precision envelope: max to the right
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let total: f64 = (0..=100)
        .map(|r| {
            let level = r as f64 / 100.0;
            let idx = recall.partition_point(|&rc| rc < level);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    Some(total / 101.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryAp {
    /// AP at each threshold of [`iou_thresholds`].
    pub by_threshold: [f64; 10],
}

impl CategoryAp {
    pub fn mean(&self) -> f64 {
        self.by_threshold.iter().sum::<f64>() / 10.0
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_r: Option<f64>,
    pub ap_c: Option<f64>,
    pub ap_f: Option<f64>,
    /// AR@k keyed by k.
    pub ar: BTreeMap<usize, Option<f64>>,
    /// Categories with at least one ground-truth box.
    pub per_category: BTreeMap<CategoryId, CategoryAp>,
}

impl EvalReport {
    /// Mean AP over the given categories that have ground truth.
    pub fn mean_ap_over(&self, ids: &[CategoryId]) -> Option<f64> {
        mean(ids.iter().filter_map(|id| self.per_category.get(id)).map(CategoryAp::mean))
    }

    /// Flat JSON object; floats are rounded to 9 significant digits and
    /// absent metrics are `null`.
    pub fn to_json(&self) -> Value {
        let num = |v: Option<f64>| v.map_or(Value::Null, |x| Value::from(round_sig(x)));
        let mut m = Map::new();
        m.insert("AP".into(), num(self.ap));
        m.insert("AP50".into(), num(self.ap50));
        m.insert("AP75".into(), num(self.ap75));
        m.insert("APr".into(), num(self.ap_r));
        m.insert("APc".into(), num(self.ap_c));
        m.insert("APf".into(), num(self.ap_f));
        for (k, v) in &self.ar {
            m.insert(format!("AR@{k}"), num(*v));
        }
        for (id, ap) in &self.per_category {
            m.insert(format!("AP/{id}"), num(Some(ap.mean())));
        }
        Value::Object(m)
    }

    /// Aligned two-column table of the headline metrics.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, Option<f64>)> = vec![
            ("AP".into(), self.ap),
            ("AP50".into(), self.ap50),
            ("AP75".into(), self.ap75),
            ("APr".into(), self.ap_r),
            ("APc".into(), self.ap_c),
            ("APf".into(), self.ap_f),
        ];
        rows.extend(self.ar.iter().map(|(k, v)| (format!("AR@{k}"), *v)));
        let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
        rows.iter()
            .map(|(name, v)| match v {
                Some(x) => format!("{name:<width$}  {:>7.4}\n", x),
                None => format!("{name:<width$}  {:>7}\n", "-"),
            })
            .collect()
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Keeps the `max_per_image` highest-ranked detections of each image.
pub fn cap_per_image(dets: &[Detection], max_per_image: usize) -> Vec<Detection> {
    let mut by_image: BTreeMap<ImageId, Vec<&Detection>> = BTreeMap::new();
    for d in dets {
        by_image.entry(d.image_id).or_default().push(d);
    }
    by_image
        .into_values()
        .flat_map(|mut v| {
            v.sort_by(|a, b| rank_order(a, b));
            v.truncate(max_per_image);
            v.into_iter().cloned()
        })
        .collect()
}

/// Per-category AP at each IoU threshold. Detections are ranked across the
/// dataset by score; equal scores are ordered by image id, then by the
/// within-image matching order.
pub fn category_ap(
    dets_by_image: &BTreeMap<ImageId, Vec<Detection>>,
    gts_by_image: &BTreeMap<ImageId, Vec<BBox>>,
) -> Option<CategoryAp> {
    let num_gt: usize = gts_by_image.values().map(Vec::len).sum();
    if num_gt == 0 {
        return None;
    }
    let images: BTreeSet<ImageId> = dets_by_image.keys().copied().collect();
    let by_threshold = iou_thresholds().map(|t| {
        let mut flags = Vec::new();
        for image in &images {
            let dets = &dets_by_image[image];
            let gts = gts_by_image.get(image).map(Vec::as_slice).unwrap_or(&[]);
            for (i, m) in match_detections(dets, gts, t) {
                flags.push((dets[i].score, m.is_some()));
            }
        }
        // stable sort in average_precision keeps the image order on ties
        average_precision(&flags, num_gt).expect("num_gt > 0")
    });
    Some(CategoryAp { by_threshold })
}

/// Full evaluation. Detections beyond `max_per_image` per image are dropped
/// first. AR@k is computed from `proposals` when given, otherwise from the
/// detections themselves treated as class-agnostic boxes.
pub fn evaluate(
    dets: &[Detection],
    gts: &[GroundTruth],
    vocab: &Vocabulary,
    max_per_image: usize,
    proposals: Option<&[ScoredBox]>,
    ar_ks: &[usize],
) -> Result<EvalReport> {
    for id in dets.iter().map(|d| d.category_id).chain(gts.iter().map(|g| g.category_id)) {
        if vocab.get(id).is_none() {
            return Err(VildError::data(format!("unknown category id {id}")));
        }
    }
    let dets = cap_per_image(dets, max_per_image);

    let mut det_groups: HashMap<CategoryId, BTreeMap<ImageId, Vec<Detection>>> = HashMap::new();
    for d in &dets {
        det_groups
            .entry(d.category_id)
            .or_default()
            .entry(d.image_id)
            .or_default()
            .push(d.clone());
    }
    let mut gt_groups: HashMap<CategoryId, BTreeMap<ImageId, Vec<BBox>>> = HashMap::new();
    for g in gts {
        gt_groups
            .entry(g.category_id)
            .or_default()
            .entry(g.image_id)
            .or_default()
            .push(g.bbox);
    }

    let empty_dets = BTreeMap::new();
    let per_category: BTreeMap<CategoryId, CategoryAp> = vocab
        .ids()
        .par_iter()
        .filter_map(|id| {
            let gts = gt_groups.get(id)?;
            let dets = det_groups.get(id).unwrap_or(&empty_dets);
            category_ap(dets, gts).map(|ap| (*id, ap))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect();

    let bucket = |f: Frequency| {
        let ids = vocab.ids_where(|c| c.frequency == f);
        mean(ids.iter().filter_map(|id| per_category.get(id)).map(CategoryAp::mean))
    };
    let ap_r = bucket(Frequency::Rare);
    let ap_c = bucket(Frequency::Common);
    let ap_f = bucket(Frequency::Frequent);

    let fallback: Vec<ScoredBox>;
    let boxes = match proposals {
        Some(p) => p,
        None => {
            fallback = dets
                .iter()
                .map(|d| ScoredBox {
                    image_id: d.image_id,
                    bbox: d.bbox,
                    objectness: d.score,
                })
                .collect();
            &fallback
        }
    };
    let gt_boxes: Vec<(ImageId, BBox)> = gts.iter().map(|g| (g.image_id, g.bbox)).collect();
    let ar = ar_ks
        .iter()
        .map(|&k| Ok((k, average_recall_at_k(boxes, &gt_boxes, k)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;

    Ok(EvalReport {
        ap: mean(per_category.values().map(CategoryAp::mean)),
        ap50: mean(per_category.values().map(|c| c.by_threshold[0])),
        ap75: mean(per_category.values().map(|c| c.by_threshold[5])),
        ap_r,
        ap_c,
        ap_f,
        ar,
        per_category,
    })
}

/// Average recall of the top-`k` boxes per image (by objectness), averaged
/// over IoU 0.50:0.95. Matching is one-to-one and class-agnostic; recall is
/// pooled over all ground truth given. `None` when there is no ground truth.
pub fn average_recall_at_k(
    proposals: &[ScoredBox],
    gts: &[(ImageId, BBox)],
    k: usize,
) -> Result<Option<f64>> {
    if k == 0 {
        return Err(VildError::invalid("AR@k needs k >= 1"));
    }
    if gts.is_empty() {
        return Ok(None);
    }
    let mut props: BTreeMap<ImageId, Vec<&ScoredBox>> = BTreeMap::new();
    for p in proposals {
        props.entry(p.image_id).or_default().push(p);
    }
    for v in props.values_mut() {
        v.sort_by(|a, b| b.objectness.total_cmp(&a.objectness));
        v.truncate(k);
    }
    let mut gt_by_image: BTreeMap<ImageId, Vec<BBox>> = BTreeMap::new();
    for (image, b) in gts {
        gt_by_image.entry(*image).or_default().push(*b);
    }

    let recalls = iou_thresholds().map(|t| {
        let matched: usize = gt_by_image
            .iter()
            .map(|(image, gt)| {
                let Some(p) = props.get(image) else { return 0 };
                match_boxes(p.iter().enumerate().map(|(i, s)| (i, &s.bbox)), gt, t)
                    .iter()
                    .filter(|(_, m)| m.is_some())
                    .count()
            })
            .sum();
        matched as f64 / gts.len() as f64
    });
    Ok(Some(recalls.iter().sum::<f64>() / 10.0))
}
