//! Dense embedding vectors and the rules for combining teacher outputs.
//!
//! All arithmetic is done in `f64`. An [`Embedding`] only guarantees finite
//! entries; unit norm is checked on demand with [`Embedding::is_unit_norm`].

use crate::error::{Result, VildError};

/// Tolerance on `|‖v‖₂ − 1|` for a vector to count as normalized.
pub const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    /// Wraps a vector, rejecting empty or non-finite input.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(VildError::Empty("embedding has no entries"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(VildError::invalid(format!(
                "embedding entry {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Embedding { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    pub fn is_unit_norm(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_NORM_TOL
    }

    pub fn dot(&self, other: &Embedding) -> Result<f64> {
        check_dims(self.dim(), other.dim())?;
        Ok(dot(&self.values, &other.values))
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub(crate) fn check_dims(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(VildError::DimMismatch { expected, got });
    }
    Ok(())
}

/// Scales `v` to unit L2 norm.
pub fn l2_normalize(v: &[f64]) -> Result<Embedding> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(VildError::Normalization("non-finite entry".into()));
    }
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(VildError::Normalization(format!("norm is {n}")));
    }
    Embedding::new(v.iter().map(|x| x / n).collect())
}

/// Cosine similarity `aᵀb / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a.len(), b.len())?;
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(VildError::invalid("cosine similarity of a zero vector"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Teacher image embedding for a proposal: the renormalized sum of the
/// embeddings of its 1x and 1.5x crops.
pub fn compose_crop_ensemble(crop_1x: &Embedding, crop_1_5x: &Embedding) -> Result<Embedding> {
    check_dims(crop_1x.dim(), crop_1_5x.dim())?;
    let sum: Vec<f64> = crop_1x
        .values
        .iter()
        .zip(&crop_1_5x.values)
        .map(|(a, b)| a + b)
        .collect();
    l2_normalize(&sum)
}

/// Classifier weight for one category: the mean of all prompt x synonym
/// embeddings, renormalized. A single input is returned as is.
pub fn compose_text_embedding(per_prompt: &[Embedding]) -> Result<Embedding> {
    let first = per_prompt
        .first()
        .ok_or(VildError::Empty("no prompt embeddings to compose"))?;
    if per_prompt.len() == 1 {
        return Ok(first.clone());
    }
    let dim = first.dim();
    let mut mean = vec![0.0; dim];
    for e in per_prompt {
        check_dims(dim, e.dim())?;
        for (m, v) in mean.iter_mut().zip(&e.values) {
            *m += v;
        }
    }
    let count = per_prompt.len() as f64;
    mean.iter_mut().for_each(|m| *m /= count);
    l2_normalize(&mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let e = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((e.values()[0] - 0.6).abs() < 1e-15);
        assert!((e.values()[1] - 0.8).abs() < 1e-15);
        assert_eq!(l2_normalize(&[1.0, 0.0]).unwrap().values(), &[1.0, 0.0]);
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(VildError::Normalization(_))
        ));
        assert!(l2_normalize(&[f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn cosine_examples() {
        let u = l2_normalize(&[0.3, -0.2, 0.9]).unwrap();
        assert!((cosine_sim(u.values(), u.values()).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_sim(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
        assert!(matches!(
            cosine_sim(&[1.0], &[1.0, 0.0]),
            Err(VildError::DimMismatch { .. })
        ));
        assert!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn crop_ensemble_examples() {
        let r = compose_crop_ensemble(&emb(&[1.0, 0.0]), &emb(&[1.0, 0.0])).unwrap();
        assert_eq!(r.values(), &[1.0, 0.0]);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let r = compose_crop_ensemble(&emb(&[1.0, 0.0]), &emb(&[0.0, 1.0])).unwrap();
        assert!(r.values().iter().all(|v| (v - h).abs() < 1e-12));
        let r = compose_crop_ensemble(&emb(&[0.6, 0.8]), &emb(&[0.8, 0.6])).unwrap();
        assert!(r.values().iter().all(|v| (v - h).abs() < 1e-12));
        assert!(compose_crop_ensemble(&emb(&[1.0, 0.0]), &emb(&[-1.0, 0.0])).is_err());
    }

    #[test]
    fn text_embedding_examples() {
        let e = l2_normalize(&[0.1, 0.7, -0.2]).unwrap();
        assert_eq!(compose_text_embedding(std::slice::from_ref(&e)).unwrap(), e);
        let copies = vec![e.clone(); 63];
        let out = compose_text_embedding(&copies).unwrap();
        for (a, b) in out.values().iter().zip(e.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let out = compose_text_embedding(&[emb(&[1.0, 0.0]), emb(&[0.0, 1.0])]).unwrap();
        assert!(out.values().iter().all(|v| (v - h).abs() < 1e-12));
        assert!(matches!(
            compose_text_embedding(&[]),
            Err(VildError::Empty(_))
        ));
        assert!(compose_text_embedding(&[emb(&[1.0, 0.0]), emb(&[1.0])]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Embedding::new(vec![1.0, f64::INFINITY]).is_err());
        assert!(Embedding::new(vec![]).is_err());
    }
}
