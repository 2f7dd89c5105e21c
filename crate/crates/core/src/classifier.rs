//! Cosine-similarity classification of region embeddings against fixed text
//! embeddings plus a background embedding.

use crate::detection::{Detection, Proposal};
use crate::embedding::{check_dims, cosine_sim, norm, Embedding};
use crate::error::{Result, VildError};
use crate::vocab::{CategoryId, Vocabulary};

pub const DEFAULT_TAU: f64 = 0.01;

/// Text-embedding classifier. Index 0 of every score vector it produces is
/// the background slot; index `i + 1` is `category_ids[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextClassifier {
    category_ids: Vec<CategoryId>,
    text_embeddings: Vec<Embedding>,
    background: Vec<f64>,
    tau: f64,
}

/// Which categories an inference classifier scores against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InferenceVocab {
    Base,
    Novel,
    #[default]
    Joint,
}

impl std::fmt::Display for InferenceVocab {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InferenceVocab::Base => "base",
            InferenceVocab::Novel => "novel",
            InferenceVocab::Joint => "joint",
        })
    }
}

impl std::str::FromStr for InferenceVocab {
    type Err = VildError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(InferenceVocab::Base),
            "novel" => Ok(InferenceVocab::Novel),
            "joint" => Ok(InferenceVocab::Joint),
            other => Err(VildError::invalid(format!(
                "unknown inference vocabulary '{other}' (expected base|novel|joint)"
            ))),
        }
    }
}

impl InferenceVocab {
    pub fn category_ids(self, vocab: &Vocabulary) -> Vec<CategoryId> {
        match self {
            InferenceVocab::Base => vocab.base_ids(),
            InferenceVocab::Novel => vocab.novel_ids(),
            InferenceVocab::Joint => vocab.ids(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl TextClassifier {
    pub fn new(
        category_ids: Vec<CategoryId>,
        text_embeddings: Vec<Embedding>,
        background: Vec<f64>,
        tau: f64,
    ) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(VildError::invalid(format!("temperature must be > 0, got {tau}")));
        }
        if category_ids.len() != text_embeddings.len() {
            return Err(VildError::invalid(format!(
                "{} category ids but {} text embeddings",
                category_ids.len(),
                text_embeddings.len()
            )));
        }
        let dim = background.len();
        if dim == 0 || background.iter().any(|v| !v.is_finite()) || norm(&background) == 0.0 {
            return Err(VildError::invalid("background embedding must be finite and nonzero"));
        }
        for (id, t) in category_ids.iter().zip(&text_embeddings) {
            check_dims(dim, t.dim())?;
            if !t.is_unit_norm() {
                return Err(VildError::invalid(format!(
                    "text embedding for category {id} is not unit norm"
                )));
            }
        }
        Ok(TextClassifier {
            category_ids,
            text_embeddings,
            background,
            tau,
        })
    }

    /// Builds the classifier for `ids`, pulling embeddings from a lookup.
    pub fn from_lookup(
        ids: &[CategoryId],
        lookup: impl Fn(CategoryId) -> Option<Embedding>,
        background: Vec<f64>,
        tau: f64,
    ) -> Result<Self> {
        let embeddings = ids
            .iter()
            .map(|&id| {
                lookup(id).ok_or_else(|| {
                    VildError::invalid(format!("no text embedding for category {id}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        TextClassifier::new(ids.to_vec(), embeddings, background, tau)
    }

    pub fn dim(&self) -> usize {
        self.background.len()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn len(&self) -> usize {
        self.category_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.category_ids.is_empty()
    }

    pub fn category_ids(&self) -> &[CategoryId] {
        &self.category_ids
    }

    pub fn text_embeddings(&self) -> &[Embedding] {
        &self.text_embeddings
    }

    pub fn background(&self) -> &[f64] {
        &self.background
    }

    pub fn with_background(mut self, background: Vec<f64>) -> Result<Self> {
        check_dims(self.dim(), background.len())?;
        self.background = background;
        TextClassifier::new(self.category_ids, self.text_embeddings, self.background, self.tau)
    }

    /// Restricts to a subset of categories, keeping the given order.
    pub fn restrict(&self, ids: &[CategoryId]) -> Result<Self> {
        let lookup = |id: CategoryId| {
            self.category_ids
                .iter()
                .position(|&c| c == id)
                .map(|i| self.text_embeddings[i].clone())
        };
        TextClassifier::from_lookup(ids, lookup, self.background.clone(), self.tau)
    }

    /// Cosine logits against `[background, t_1, ..., t_C]` and their
    /// temperature softmax.
    pub fn score_region(&self, region: &[f64]) -> Result<ScoreVector> {
        check_dims(self.dim(), region.len())?;
        let mut logits = Vec::with_capacity(self.len() + 1);
        logits.push(cosine_sim(region, &self.background)?);
        for t in &self.text_embeddings {
            logits.push(cosine_sim(region, t.values())?);
        }
        let probs = softmax_temperature(&logits, self.tau)?;
        Ok(ScoreVector { logits, probs })
    }

    /// Softmax over the categories only, without the background slot.
    pub fn category_distribution(&self, region: &[f64]) -> Result<Vec<f64>> {
        check_dims(self.dim(), region.len())?;
        let sims = self
            .text_embeddings
            .iter()
            .map(|t| cosine_sim(region, t.values()))
            .collect::<Result<Vec<_>>>()?;
        softmax_temperature(&sims, self.tau)
    }
}

/// `exp(z_i/τ) / Σ_j exp(z_j/τ)` with max subtraction.
pub fn softmax_temperature(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(VildError::invalid(format!("temperature must be > 0, got {tau}")));
    }
    if logits.is_empty() {
        return Err(VildError::Empty("softmax of empty vector"));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(VildError::Numerical("non-finite logit".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| ((z - max) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Scores every region against every category of `clf`. Emits one detection
/// per (region, category); the background probability is never emitted.
pub fn classify_regions(
    clf: &TextClassifier,
    regions: &[(Proposal, Vec<f64>)],
) -> Result<Vec<Detection>> {
    let mut out = Vec::with_capacity(regions.len() * clf.len());
    for (proposal, embedding) in regions {
        let scores = clf.score_region(embedding)?;
        for (i, &category_id) in clf.category_ids.iter().enumerate() {
            out.push(Detection {
                image_id: proposal.image_id,
                bbox: proposal.bbox,
                category_id,
                score: scores.probs[i + 1],
                source_id: proposal.source_id,
            });
        }
    }
    Ok(out)
}

/// Joint category x attribute probabilities for one region, assuming the
/// two are independent given the region: a `p x q` outer product of the two
/// per-axis softmaxes. Background is not part of either axis.
pub fn expand_vocabulary(
    clf: &TextClassifier,
    attr_clf: &TextClassifier,
    region: &[f64],
) -> Result<Vec<Vec<f64>>> {
    check_dims(clf.dim(), attr_clf.dim())?;
    let categories = clf.category_distribution(region)?;
    let attributes = attr_clf.category_distribution(region)?;
    Ok(categories
        .iter()
        .map(|pv| attributes.iter().map(|pa| pv * pa).collect())
        .collect())
}
