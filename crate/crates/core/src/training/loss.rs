//! Training objectives with hand-derived gradients.
//!
//! For a region embedding `e = W·f + b` and class vectors
//! `c_0 = e_bg, c_k = t_k`, the text objective uses logits
//! `z_k = cos(e, c_k)` and cross entropy on `softmax(z / τ)`. With
//! `g_k = (p_k − [k = y]) / τ`:
//!
//! ```text
//! ∂L/∂e    = Σ_k g_k · (c_k / (‖e‖‖c_k‖) − z_k · e / ‖e‖²)
//! ∂L/∂e_bg = g_0 · (e / (‖e‖‖e_bg‖) − z_0 · e_bg / ‖e_bg‖²)
//! ∂L/∂W    = ∂L/∂e · fᵀ,   ∂L/∂b = ∂L/∂e
//! ```
//!
//! The distillation objective is `‖teacher − e‖₁` (subgradient 0 at a tie)
//! or `‖teacher − e‖₂²`. All losses are averaged over proposals.

use serde::{Deserialize, Serialize};

use crate::classifier::TextClassifier;
use crate::embedding::{check_dims, dot, norm, Embedding};
use crate::error::{Result, VildError};
use crate::training::head::{HeadGrads, RegionHead};

/// Proposal matched (or not) against base-category annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineProposal {
    pub feature: Vec<f64>,
    /// Index into the base classifier; `None` is background.
    pub label: Option<usize>,
}

/// Proposal with a precomputed teacher image embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineProposal {
    pub feature: Vec<f64>,
    pub teacher: Embedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub image_id: u64,
    pub online: Vec<OnlineProposal>,
    pub offline: Vec<OfflineProposal>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DistillNorm {
    #[default]
    L1,
    L2,
}

impl std::fmt::Display for DistillNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DistillNorm::L1 => "l1",
            DistillNorm::L2 => "l2",
        })
    }
}

impl std::str::FromStr for DistillNorm {
    type Err = VildError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(DistillNorm::L1),
            "l2" => Ok(DistillNorm::L2),
            other => Err(VildError::invalid(format!("unknown distill norm '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: HeadGrads,
}

/// Cross entropy of one region against `[e_bg, t_1, ..., t_C]`; returns the
/// loss, `∂L/∂e` and `∂L/∂e_bg`.
fn text_term(
    background: &[f64],
    clf: &TextClassifier,
    e: &[f64],
    label: Option<usize>,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let ne = norm(e);
    let nbg = norm(background);
    if ne == 0.0 || nbg == 0.0 {
        return Err(VildError::Numerical("zero-norm region or background embedding".into()));
    }
    let tau = clf.tau();
    let classes: Vec<&[f64]> = std::iter::once(background)
        .chain(clf.text_embeddings().iter().map(Embedding::values))
        .collect();
    let norms: Vec<f64> = classes.iter().map(|c| norm(c)).collect();
    let cos: Vec<f64> = classes
        .iter()
        .zip(&norms)
        .map(|(c, nc)| dot(e, c) / (ne * nc))
        .collect();

    let y = label.map_or(0, |i| i + 1);
    let max = cos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = cos.iter().map(|z| ((z - max) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() - (cos[y] - max) / tau;

    let mut d_e = vec![0.0; e.len()];
    for (k, (c, nc)) in classes.iter().zip(&norms).enumerate() {
        let g = (exps[k] / total - if k == y { 1.0 } else { 0.0 }) / tau;
        let a = g / (ne * nc);
        let b = g * cos[k] / (ne * ne);
        for ((d, ci), ei) in d_e.iter_mut().zip(c.iter()).zip(e) {
            *d += a * ci - b * ei;
        }
    }
    let g0 = (exps[0] / total - if y == 0 { 1.0 } else { 0.0 }) / tau;
    let d_bg = background
        .iter()
        .zip(e)
        .map(|(bg, ei)| g0 * (ei / (ne * nbg) - cos[0] * bg / (nbg * nbg)))
        .collect();
    Ok((loss, d_e, d_bg))
}

/// Mean text-classification cross entropy over the online proposals. The
/// head's background embedding takes the background slot; `clf_base` only
/// supplies the base text embeddings and temperature.
pub fn vild_text_loss(
    head: &RegionHead,
    clf_base: &TextClassifier,
    online: &[OnlineProposal],
) -> Result<LossOutput> {
    if online.is_empty() {
        return Err(VildError::Empty("no online proposals for the text loss"));
    }
    check_dims(clf_base.dim(), head.d_out())?;
    let scale = 1.0 / online.len() as f64;
    let mut grads = HeadGrads::zeros_like(head);
    let mut loss = 0.0;
    for p in online {
        if let Some(label) = p.label {
            if label >= clf_base.len() {
                return Err(VildError::invalid(format!(
                    "label {label} out of range for {} base categories",
                    clf_base.len()
                )));
            }
        }
        let e = head.embed(&p.feature)?;
        let (l, d_e, d_bg) = text_term(&head.background, clf_base, &e, p.label)?;
        loss += l;
        grads.add_embedding_grad(&p.feature, &d_e, scale);
        for (g, d) in grads.background.iter_mut().zip(&d_bg) {
            *g += scale * d;
        }
    }
    Ok(LossOutput {
        loss: loss * scale,
        grads,
    })
}

/// Mean distance between region embeddings and teacher embeddings over the
/// offline proposals. The background embedding gets no gradient.
pub fn vild_image_loss(
    head: &RegionHead,
    offline: &[OfflineProposal],
    distill_norm: DistillNorm,
) -> Result<LossOutput> {
    if offline.is_empty() {
        return Err(VildError::Empty("no offline proposals for the distillation loss"));
    }
    let scale = 1.0 / offline.len() as f64;
    let mut grads = HeadGrads::zeros_like(head);
    let mut loss = 0.0;
    for p in offline {
        check_dims(head.d_out(), p.teacher.dim())?;
        let e = head.embed(&p.feature)?;
        let diff: Vec<f64> = e.iter().zip(p.teacher.values()).map(|(a, t)| a - t).collect();
        let d_e: Vec<f64> = match distill_norm {
            DistillNorm::L1 => {
                loss += diff.iter().map(|d| d.abs()).sum::<f64>();
                diff.iter()
                    .map(|&d| if d == 0.0 { 0.0 } else { d.signum() })
                    .collect()
            }
            DistillNorm::L2 => {
                loss += diff.iter().map(|d| d * d).sum::<f64>();
                diff.iter().map(|d| 2.0 * d).collect()
            }
        };
        grads.add_embedding_grad(&p.feature, &d_e, scale);
    }
    Ok(LossOutput {
        loss: loss * scale,
        grads,
    })
}

/// `L_text + w · L_image` for one sample. A sample with no online proposals
/// contributes no text term and one with no offline proposals no image term;
/// with `w == 0` the image term is not evaluated at all.
pub fn vild_loss(
    head: &RegionHead,
    clf_base: &TextClassifier,
    sample: &TrainingSample,
    distill_weight: f64,
    distill_norm: DistillNorm,
) -> Result<LossOutput> {
    combined_loss(head, clf_base, sample, true, distill_weight, distill_norm)
}

pub(crate) fn combined_loss(
    head: &RegionHead,
    clf_base: &TextClassifier,
    sample: &TrainingSample,
    with_text: bool,
    distill_weight: f64,
    distill_norm: DistillNorm,
) -> Result<LossOutput> {
    let text = (with_text && !sample.online.is_empty())
        .then(|| vild_text_loss(head, clf_base, &sample.online))
        .transpose()?;
    let image = (distill_weight != 0.0 && !sample.offline.is_empty())
        .then(|| vild_image_loss(head, &sample.offline, distill_norm))
        .transpose()?;
    match (text, image) {
        (Some(t), None) => Ok(t),
        (None, Some(mut i)) => {
            i.loss *= distill_weight;
            i.grads.scale(distill_weight);
            Ok(i)
        }
        (Some(mut t), Some(i)) => {
            t.loss += distill_weight * i.loss;
            t.grads.add_scaled(&i.grads, distill_weight);
            Ok(t)
        }
        (None, None) => Ok(LossOutput {
            loss: 0.0,
            grads: HeadGrads::zeros_like(head),
        }),
    }
}
