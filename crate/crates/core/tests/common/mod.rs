//! Shared helpers for the integration and acceptance tests: random instance
//! generators, a central finite-difference checker and brute-force
//! reference implementations written independently of the library code.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use vild::classifier::TextClassifier;
use vild::detection::{BBox, Detection};
use vild::embedding::{l2_normalize, Embedding};
use vild::training::{
    vild_image_loss, vild_loss, vild_text_loss, DistillNorm, LossOutput, OfflineProposal,
    OnlineProposal, RegionHead, TrainingSample,
};

pub fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Embedding {
    loop {
        let v = gaussian(rng, dim);
        if let Ok(e) = l2_normalize(&v) {
            return e;
        }
    }
}

pub struct GradInstance {
    pub head: RegionHead,
    pub clf: TextClassifier,
    pub sample: TrainingSample,
}

pub fn grad_instance(
    rng: &mut ChaCha8Rng,
    d_in: usize,
    d_out: usize,
    categories: usize,
    n: usize,
    m: usize,
) -> GradInstance {
    let bound = 1.0 / (d_in as f64).sqrt();
    let weight = (0..d_in * d_out).map(|_| rng.random_range(-bound..bound)).collect();
    let bias = gaussian(rng, d_out).into_iter().map(|v| 0.1 * v).collect();
    let background = gaussian(rng, d_out);
    let head = RegionHead::from_parts(d_in, d_out, weight, bias, background).unwrap();
    let clf = TextClassifier::new(
        (0..categories as u32).collect(),
        (0..categories).map(|_| unit(rng, d_out)).collect(),
        vec![1.0; d_out],
        0.01,
    )
    .unwrap();
    let online = (0..n)
        .map(|_| OnlineProposal {
            feature: gaussian(rng, d_in),
            label: match rng.random_range(0..=categories) {
                0 => None,
                k => Some(k - 1),
            },
        })
        .collect();
    let offline = (0..m)
        .map(|_| OfflineProposal {
            feature: gaussian(rng, d_in),
            teacher: unit(rng, d_out),
        })
        .collect();
    GradInstance {
        head,
        clf,
        sample: TrainingSample {
            image_id: 0,
            online,
            offline,
        },
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Objective {
    Text,
    Image(DistillNorm),
    Combined(f64, DistillNorm),
}

impl Objective {
    fn norm(self) -> Option<DistillNorm> {
        match self {
            Objective::Text => None,
            Objective::Image(n) | Objective::Combined(_, n) => Some(n),
        }
    }
}

pub fn objective(inst: &GradInstance, head: &RegionHead, obj: Objective) -> LossOutput {
    match obj {
        Objective::Text => vild_text_loss(head, &inst.clf, &inst.sample.online).unwrap(),
        Objective::Image(norm) => vild_image_loss(head, &inst.sample.offline, norm).unwrap(),
        Objective::Combined(w, norm) => vild_loss(head, &inst.clf, &inst.sample, w, norm).unwrap(),
    }
}

fn param_count(head: &RegionHead) -> usize {
    head.weight.len() + head.bias.len() + head.background.len()
}

fn param_mut(head: &mut RegionHead, i: usize) -> &mut f64 {
    let (nw, nb) = (head.weight.len(), head.bias.len());
    if i < nw {
        &mut head.weight[i]
    } else if i < nw + nb {
        &mut head.bias[i - nw]
    } else {
        &mut head.background[i - nw - nb]
    }
}

fn grad_at(out: &LossOutput, i: usize) -> f64 {
    let (nw, nb) = (out.grads.weight.len(), out.grads.bias.len());
    if i < nw {
        out.grads.weight[i]
    } else if i < nw + nb {
        out.grads.bias[i - nw]
    } else {
        out.grads.background[i - nw - nb]
    }
}

fn residual_signs(inst: &GradInstance, head: &RegionHead) -> Vec<bool> {
    inst.sample
        .offline
        .iter()
        .flat_map(|p| {
            let e = head.embed(&p.feature).unwrap();
            e.into_iter()
                .zip(p.teacher.values().to_vec())
                .map(|(a, t)| a - t > 0.0)
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Floor on the denominator of the relative error. Partials smaller than
/// this are compared by absolute difference scaled by the floor: central
/// differences of a loss of size ~50 at step 1e-5 carry ~1e-9 of rounding
/// noise, which would swamp a relative comparison of a 1e-7 gradient.
pub const REL_ERR_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

/// Compares every analytic partial derivative with a central difference of
/// step `h`. Under an L1 objective, parameters whose ±h perturbation flips
/// the sign of any distillation residual straddle a kink and are skipped.
pub fn finite_difference_check(inst: &GradInstance, obj: Objective, h: f64) -> FdReport {
    let analytic = objective(inst, &inst.head, obj);
    let mut report = FdReport::default();
    let l1 = obj.norm() == Some(DistillNorm::L1);
    for i in 0..param_count(&inst.head) {
        let mut plus = inst.head.clone();
        *param_mut(&mut plus, i) += h;
        let mut minus = inst.head.clone();
        *param_mut(&mut minus, i) -= h;
        if l1 && residual_signs(inst, &plus) != residual_signs(inst, &minus) {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (objective(inst, &plus, obj).loss - objective(inst, &minus, obj).loss) / (2.0 * h);
        report.max_rel_err = report.max_rel_err.max(rel_err(grad_at(&analytic, i), numeric));
        report.checked += 1;
    }
    report
}

// ---------------------------------------------------------------------------
// Brute-force references.

pub fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let overlap = |lo1: f64, hi1: f64, lo2: f64, hi2: f64| (hi1.min(hi2) - lo1.max(lo2)).max(0.0);
    let inter = overlap(a.x1, a.x2, b.x1, b.x2) * overlap(a.y1, a.y2, b.y1, b.y2);
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if inter == 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Strict rank relation: higher score, then lower source id, then lower category.
pub fn ranks_above(a: &Detection, b: &Detection) -> bool {
    if a.score != b.score {
        return a.score > b.score;
    }
    if a.source_id != b.source_id {
        return a.source_id < b.source_id;
    }
    a.category_id < b.category_id
}

fn ranked(dets: &[Detection]) -> Vec<Detection> {
    let mut out: Vec<Detection> = dets.to_vec();
    // selection sort on the rank relation
    for i in 0..out.len() {
        let mut best = i;
        for j in i + 1..out.len() {
            if ranks_above(&out[j], &out[best]) {
                best = j;
            }
        }
        out.swap(i, best);
    }
    out
}

/// Greedy NMS by exhaustive search: the greedy result is the unique subset
/// `S` in which every detection is kept iff no higher-ranked member of `S`
/// suppresses it. Every subset is tested against that characterization.
pub fn oracle_nms(dets: &[Detection], threshold: f64, agnostic: bool, max_out: usize) -> Vec<Detection> {
    let order = ranked(dets);
    let n = order.len();
    assert!(n <= 16, "exhaustive NMS oracle is for small inputs");
    let suppresses = |a: &Detection, b: &Detection| {
        (agnostic || a.category_id == b.category_id) && oracle_iou(&a.bbox, &b.bbox) >= threshold
    };
    let mut found = None;
    for mask in 0u32..(1 << n) {
        let member = |i: usize| mask & (1 << i) != 0;
        let consistent = (0..n).all(|i| {
            let blocked = (0..i).any(|j| member(j) && suppresses(&order[j], &order[i]));
            member(i) == !blocked
        });
        if consistent {
            assert!(found.is_none(), "greedy fixed point must be unique");
            found = Some(mask);
        }
    }
    let mask = found.expect("a fixed point exists");
    (0..n)
        .filter(|&i| mask & (1 << i) != 0)
        .map(|i| order[i].clone())
        .take(max_out)
        .collect()
}

/// Greedy one-to-one matching, re-derived: returns, for each detection in
/// rank order, the matched gt index.
pub fn oracle_match(dets: &[Detection], gts: &[BBox], threshold: f64) -> Vec<(Detection, Option<usize>)> {
    let mut used = vec![false; gts.len()];
    ranked(dets)
        .into_iter()
        .map(|d| {
            let ious: Vec<f64> = gts.iter().map(|g| oracle_iou(&d.bbox, g)).collect();
            let mut pick = None;
            for g in 0..gts.len() {
                if used[g] || ious[g] < threshold {
                    continue;
                }
                match pick {
                    Some(p) if ious[p] >= ious[g] => {}
                    _ => pick = Some(g),
                }
            }
            if let Some(g) = pick {
                used[g] = true;
            }
            (d, pick)
        })
        .collect()
}

/// 101-point AP from flags already in rank order: at each recall level, the
/// best precision among all cut-offs reaching that recall.
pub fn oracle_ap(flags_in_rank_order: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut points = Vec::new();
    let mut tp = 0usize;
    for (k, &hit) in flags_in_rank_order.iter().enumerate() {
        tp += hit as usize;
        points.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let best = points
            .iter()
            .filter(|(rec, _)| *rec >= level)
            .map(|(_, prec)| *prec)
            .fold(0.0, f64::max);
        sum += best;
    }
    Some(sum / 101.0)
}

pub fn thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Mean AP over thresholds for one category, pooling images. Ties in score
/// across images are broken by image id, then by within-image rank.
pub fn oracle_category_ap(dets: &[Detection], gts: &[(u64, BBox)]) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut images: Vec<u64> = dets.iter().map(|d| d.image_id).collect();
    images.sort();
    images.dedup();
    let per_threshold: Vec<f64> = thresholds()
        .into_iter()
        .map(|t| {
            let mut rows: Vec<(f64, u64, usize, bool)> = Vec::new();
            for &img in &images {
                let d: Vec<Detection> = dets.iter().filter(|d| d.image_id == img).cloned().collect();
                let g: Vec<BBox> = gts.iter().filter(|(i, _)| *i == img).map(|(_, b)| *b).collect();
                for (rank, (det, m)) in oracle_match(&d, &g, t).into_iter().enumerate() {
                    rows.push((det.score, img, rank, m.is_some()));
                }
            }
            rows.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let flags: Vec<bool> = rows.iter().map(|r| r.3).collect();
            oracle_ap(&flags, gts.len()).unwrap()
        })
        .collect();
    Some(per_threshold.iter().sum::<f64>() / 10.0)
}

/// AR@k: per image the first `k` boxes by objectness (stable), matched one
/// to one against all ground truth of that image.
pub fn oracle_ar(boxes: &[(u64, BBox, f64)], gts: &[(u64, BBox)], k: usize) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for t in thresholds() {
        let mut matched = 0usize;
        let mut images: Vec<u64> = gts.iter().map(|g| g.0).collect();
        images.sort();
        images.dedup();
        for img in images {
            let mut mine: Vec<(usize, &(u64, BBox, f64))> =
                boxes.iter().enumerate().filter(|(_, b)| b.0 == img).collect();
            mine.sort_by(|a, b| b.1 .2.total_cmp(&a.1 .2).then(a.0.cmp(&b.0)));
            mine.truncate(k);
            let g: Vec<BBox> = gts.iter().filter(|x| x.0 == img).map(|x| x.1).collect();
            let mut used = vec![false; g.len()];
            for (_, b) in mine {
                let mut pick: Option<usize> = None;
                for j in 0..g.len() {
                    let v = oracle_iou(&b.1, &g[j]);
                    if !used[j] && v >= t && pick.is_none_or(|p| oracle_iou(&b.1, &g[p]) < v) {
                        pick = Some(j);
                    }
                }
                if let Some(j) = pick {
                    used[j] = true;
                    matched += 1;
                }
            }
        }
        total += matched as f64 / gts.len() as f64;
    }
    Some(total / 10.0)
}

/// Two-head ensemble over the union of (image, source, category) keys.
pub fn oracle_ensemble(
    a: &[Detection],
    b: &[Detection],
    lambda: f64,
    base: &[u32],
) -> BTreeMap<(u64, u32, u32), f64> {
    let key = |d: &Detection| (d.image_id, d.source_id, d.category_id);
    let mut out = BTreeMap::new();
    for d in a.iter().chain(b) {
        let k = key(d);
        let pa = a.iter().find(|x| key(x) == k).map_or(0.0, |x| x.score);
        let pb = b.iter().find(|x| key(x) == k).map_or(0.0, |x| x.score);
        let wa = if base.contains(&k.2) { lambda } else { 1.0 - lambda };
        out.insert(k, pa.powf(wa) * pb.powf(1.0 - wa));
    }
    out
}

// ---------------------------------------------------------------------------
// Random small detection instances.

pub fn random_box(rng: &mut ChaCha8Rng, extent: f64) -> BBox {
    let x1 = rng.random_range(0.0..extent);
    let y1 = rng.random_range(0.0..extent);
    let w = rng.random_range(1.0..extent / 2.0);
    let h = rng.random_range(1.0..extent / 2.0);
    BBox::new(x1, y1, x1 + w, y1 + h).unwrap()
}

/// A box overlapping `b` heavily, to make suppression and matching interesting.
pub fn jitter_box(rng: &mut ChaCha8Rng, b: &BBox, amount: f64) -> BBox {
    let mut j = || rng.random_range(-amount..amount);
    let (x1, y1) = (b.x1 + j(), b.y1 + j());
    let (x2, y2) = (b.x2 + j(), b.y2 + j());
    BBox::new(x1.min(x2 - 0.5), y1.min(y2 - 0.5), x2.max(x1 + 0.5), y2.max(y1 + 0.5)).unwrap()
}

/// Up to `max_dets` detections over `images` images and `categories`
/// categories. Scores are drawn from a coarse grid so ties occur.
pub fn random_detections(
    rng: &mut ChaCha8Rng,
    max_dets: usize,
    images: u64,
    categories: u32,
    anchors: &[(u64, BBox)],
) -> Vec<Detection> {
    let n = rng.random_range(0..=max_dets);
    (0..n)
        .map(|i| {
            let image_id = rng.random_range(0..images);
            let near: Vec<&BBox> = anchors.iter().filter(|a| a.0 == image_id).map(|a| &a.1).collect();
            let bbox = if !near.is_empty() && rng.random_bool(0.7) {
                let base = near[rng.random_range(0..near.len())];
                jitter_box(rng, base, 4.0)
            } else {
                random_box(rng, 40.0)
            };
            Detection {
                image_id,
                category_id: rng.random_range(0..categories),
                bbox,
                score: rng.random_range(0..=20) as f64 / 20.0,
                source_id: i as u32,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// One randomized library-vs-oracle trial per operation. Each returns a
// description of the first disagreement.

use vild::eval::{average_precision, average_recall_at_k, evaluate, match_detections, GroundTruth, ScoredBox};
use vild::postprocess::{ensemble_detections, finalize, nms, EnsembleConfig};
use vild::vocab::{Category, Frequency, Split, Vocabulary};

pub type Trial = Result<(), String>;

fn random_gts(rng: &mut ChaCha8Rng, max_gt: usize, images: u64, categories: u32) -> Vec<GroundTruth> {
    let n = rng.random_range(0..=max_gt);
    (0..n)
        .map(|_| GroundTruth {
            image_id: rng.random_range(0..images),
            category_id: rng.random_range(0..categories),
            bbox: random_box(rng, 40.0),
        })
        .collect()
}

pub fn nms_trial(rng: &mut ChaCha8Rng) -> Trial {
    let anchors: Vec<(u64, BBox)> = (0..3).map(|_| (0, random_box(rng, 40.0))).collect();
    let dets = random_detections(rng, 10, 1, 3, &anchors);
    let threshold = [0.3, 0.5, 0.6, 0.7, 0.9, 1.0][rng.random_range(0..6)];
    let agnostic = rng.random_bool(0.5);
    let max_out = rng.random_range(1..=10);
    let got = nms(&dets, threshold, agnostic, max_out).map_err(|e| e.to_string())?;
    let want = oracle_nms(&dets, threshold, agnostic, max_out);
    if got != want {
        return Err(format!("nms(t={threshold}, agnostic={agnostic}, max={max_out}) on {dets:?}"));
    }
    let got = finalize(&dets, max_out, threshold).map_err(|e| e.to_string())?;
    if got != oracle_nms(&dets, threshold, false, max_out) {
        return Err(format!("finalize(max={max_out}, t={threshold}) on {dets:?}"));
    }
    Ok(())
}

pub fn matching_trial(rng: &mut ChaCha8Rng) -> Trial {
    let gts: Vec<BBox> = (0..rng.random_range(0..=5)).map(|_| random_box(rng, 40.0)).collect();
    let anchors: Vec<(u64, BBox)> = gts.iter().map(|g| (0, *g)).collect();
    let mut dets = random_detections(rng, 10, 1, 1, &anchors);
    for d in &mut dets {
        d.category_id = 0;
    }
    let threshold = [0.5, 0.75, 0.9][rng.random_range(0..3)];
    let got: Vec<(Detection, Option<usize>)> = match_detections(&dets, &gts, threshold)
        .into_iter()
        .map(|(i, m)| (dets[i].clone(), m))
        .collect();
    let want = oracle_match(&dets, &gts, threshold);
    if got != want {
        return Err(format!("match(t={threshold}): got {got:?}, want {want:?}"));
    }
    Ok(())
}

pub fn ap_trial(rng: &mut ChaCha8Rng) -> Trial {
    let n = rng.random_range(0..=10);
    let num_gt = rng.random_range(0..=5);
    let mut pairs: Vec<(f64, bool)> = Vec::new();
    let mut tps = 0;
    for _ in 0..n {
        let hit = tps < num_gt && rng.random_bool(0.5);
        tps += hit as usize;
        pairs.push((rng.random_range(0..=10) as f64 / 10.0, hit));
    }
    let mut ranked: Vec<(usize, (f64, bool))> = pairs.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1 .0.total_cmp(&a.1 .0).then(a.0.cmp(&b.0)));
    let flags: Vec<bool> = ranked.iter().map(|r| r.1 .1).collect();
    let got = average_precision(&pairs, num_gt);
    let want = oracle_ap(&flags, num_gt);
    match (got, want) {
        (None, None) => Ok(()),
        (Some(g), Some(w)) if (g - w).abs() <= 1e-9 => Ok(()),
        _ => Err(format!("AP of {pairs:?} with {num_gt} gt: got {got:?}, want {want:?}")),
    }
}

pub fn ar_trial(rng: &mut ChaCha8Rng) -> Trial {
    let images = 2;
    let gts: Vec<(u64, BBox)> = (0..rng.random_range(0..=5))
        .map(|_| (rng.random_range(0..images), random_box(rng, 40.0)))
        .collect();
    let n = rng.random_range(0..=10);
    let boxes: Vec<(u64, BBox, f64)> = (0..n)
        .map(|_| {
            let image = rng.random_range(0..images);
            let near: Vec<&BBox> = gts.iter().filter(|g| g.0 == image).map(|g| &g.1).collect();
            let b = if !near.is_empty() && rng.random_bool(0.7) {
                let anchor = near[rng.random_range(0..near.len())];
                jitter_box(rng, anchor, 3.0)
            } else {
                random_box(rng, 40.0)
            };
            (image, b, rng.random_range(0..=10) as f64 / 10.0)
        })
        .collect();
    let scored: Vec<ScoredBox> = boxes
        .iter()
        .map(|&(image_id, bbox, objectness)| ScoredBox { image_id, bbox, objectness })
        .collect();
    let k = rng.random_range(1..=6);
    let got = average_recall_at_k(&scored, &gts, k).map_err(|e| e.to_string())?;
    let want = oracle_ar(&boxes, &gts, k);
    match (got, want) {
        (None, None) => Ok(()),
        (Some(g), Some(w)) if (g - w).abs() <= 1e-12 => Ok(()),
        _ => Err(format!("AR@{k}: got {got:?}, want {want:?}")),
    }
}

pub fn ensemble_trial(rng: &mut ChaCha8Rng) -> Trial {
    let keyed = |rng: &mut ChaCha8Rng| {
        let mut keys: Vec<(u64, u32, u32)> = Vec::new();
        for _ in 0..rng.random_range(0..=10) {
            let k = (rng.random_range(0..2), rng.random_range(0..4), rng.random_range(0..3));
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys.into_iter()
            .map(|(image_id, source_id, category_id)| Detection {
                image_id,
                category_id,
                bbox: random_box(rng, 40.0),
                score: rng.random_range(0.0..=1.0),
                source_id,
            })
            .collect::<Vec<_>>()
    };
    let a = keyed(rng);
    let b = keyed(rng);
    let lambda = if rng.random_bool(0.5) { 2.0 / 3.0 } else { rng.random_range(0.0..=1.0) };
    let base: Vec<u32> = (0..3).filter(|_| rng.random_bool(0.5)).collect();
    let cfg = EnsembleConfig::new(lambda, base.iter().copied()).map_err(|e| e.to_string())?;
    let got = ensemble_detections(&a, &b, &cfg).map_err(|e| e.to_string())?;
    let want = oracle_ensemble(&a, &b, lambda, &base);
    if got.len() != want.len() {
        return Err(format!("ensemble covers {} keys, oracle {}", got.len(), want.len()));
    }
    for pair in got.windows(2) {
        if ranks_above(&pair[1], &pair[0]) {
            return Err("ensemble output is not ranked".into());
        }
    }
    for d in &got {
        let w = want[&(d.image_id, d.source_id, d.category_id)];
        if (d.score - w).abs() > 1e-12 {
            return Err(format!("ensemble score {} vs oracle {w}", d.score));
        }
    }
    Ok(())
}

pub fn small_vocab(categories: u32) -> Vocabulary {
    let freq = [Frequency::Rare, Frequency::Common, Frequency::Frequent];
    Vocabulary::new(
        (0..categories)
            .map(|id| Category {
                id,
                name: format!("c{id}"),
                synonyms: Vec::new(),
                split: if id == 0 { Split::Novel } else { Split::Base },
                frequency: freq[id as usize % 3],
            })
            .collect(),
    )
    .unwrap()
}

pub fn evaluate_trial(rng: &mut ChaCha8Rng) -> Trial {
    let categories = 3;
    let gts = random_gts(rng, 5, 2, categories);
    let anchors: Vec<(u64, BBox)> = gts.iter().map(|g| (g.image_id, g.bbox)).collect();
    let dets = random_detections(rng, 10, 2, categories, &anchors);
    let vocab = small_vocab(categories);
    let report = evaluate(&dets, &gts, &vocab, 300, None, &[1, 3, 10]).map_err(|e| e.to_string())?;
    let mut per_cat = Vec::new();
    for c in 0..categories {
        let d: Vec<Detection> = dets.iter().filter(|d| d.category_id == c).cloned().collect();
        let g: Vec<(u64, BBox)> = gts
            .iter()
            .filter(|g| g.category_id == c)
            .map(|g| (g.image_id, g.bbox))
            .collect();
        let want = oracle_category_ap(&d, &g);
        let got = report.per_category.get(&c).map(|ap| ap.mean());
        match (got, want) {
            (None, None) => {}
            (Some(x), Some(y)) if (x - y).abs() <= 1e-9 => per_cat.push(y),
            _ => return Err(format!("category {c}: got {got:?}, want {want:?}")),
        }
    }
    let want_ap = (!per_cat.is_empty()).then(|| per_cat.iter().sum::<f64>() / per_cat.len() as f64);
    match (report.ap, want_ap) {
        (None, None) => {}
        (Some(x), Some(y)) if (x - y).abs() <= 1e-9 => {}
        _ => return Err(format!("AP: got {:?}, want {want_ap:?}", report.ap)),
    }
    let boxes: Vec<(u64, BBox, f64)> = dets.iter().map(|d| (d.image_id, d.bbox, d.score)).collect();
    let gt_boxes: Vec<(u64, BBox)> = gts.iter().map(|g| (g.image_id, g.bbox)).collect();
    for k in [1, 3, 10] {
        let want = oracle_ar(&boxes, &gt_boxes, k);
        let got = report.ar[&k];
        match (got, want) {
            (None, None) => {}
            (Some(x), Some(y)) if (x - y).abs() <= 1e-12 => {}
            _ => return Err(format!("AR@{k}: got {got:?}, want {want:?}")),
        }
    }
    Ok(())
}

/// Runs `trial` on `n` seeded instances and reports the first failure.
pub fn run_trials(name: &str, n: u64, seed: u64, trial: fn(&mut ChaCha8Rng) -> Trial) -> Trial {
    use rand::SeedableRng;
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(i));
        trial(&mut rng).map_err(|e| format!("{name} trial {i}: {e}"))?;
    }
    Ok(())
}
