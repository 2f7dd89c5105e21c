use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::embedding::{check_dims, norm};
use crate::error::{Result, VildError};

/// Affine projection from backbone features to the text-embedding space,
/// plus the learnable background embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionHead {
    d_in: usize,
    d_out: usize,
    /// Row-major `d_out x d_in`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub background: Vec<f64>,
}

impl RegionHead {
    pub fn from_parts(
        d_in: usize,
        d_out: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
        background: Vec<f64>,
    ) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(VildError::invalid("region head dimensions must be positive"));
        }
        check_dims(d_in * d_out, weight.len())?;
        check_dims(d_out, bias.len())?;
        check_dims(d_out, background.len())?;
        let head = RegionHead {
            d_in,
            d_out,
            weight,
            bias,
            background,
        };
        if !head.is_finite() {
            return Err(VildError::Numerical("region head has non-finite parameters".into()));
        }
        Ok(head)
    }

    /// Weights uniform in `±1/√d_in`, zero bias, unit-norm Gaussian background.
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(VildError::invalid("region head dimensions must be positive"));
        }
        let bound = 1.0 / (d_in as f64).sqrt();
        let uniform = Uniform::new_inclusive(-bound, bound).expect("bound is finite and positive");
        let weight = (0..d_in * d_out).map(|_| uniform.sample(rng)).collect();
        let mut background: Vec<f64> = (0..d_out).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&background);
        background.iter_mut().for_each(|v| *v /= n);
        Ok(RegionHead {
            d_in,
            d_out,
            weight,
            bias: vec![0.0; d_out],
            background,
        })
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weight[i * self.d_in..(i + 1) * self.d_in]
    }

    /// Region embedding `W·f + b`.
    pub fn embed(&self, feature: &[f64]) -> Result<Vec<f64>> {
        check_dims(self.d_in, feature.len())?;
        Ok((0..self.d_out)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(feature)
                    .map(|(w, f)| w * f)
                    .sum::<f64>()
                    + self.bias[i]
            })
            .collect())
    }

    pub fn is_finite(&self) -> bool {
        self.weight
            .iter()
            .chain(&self.bias)
            .chain(&self.background)
            .all(|v| v.is_finite())
    }

    /// `self -= step * grads`.
    pub fn apply(&mut self, grads: &HeadGrads, step: f64) {
        for (p, g) in self.weight.iter_mut().zip(&grads.weight) {
            *p -= step * g;
        }
        for (p, g) in self.bias.iter_mut().zip(&grads.bias) {
            *p -= step * g;
        }
        for (p, g) in self.background.iter_mut().zip(&grads.background) {
            *p -= step * g;
        }
    }
}

/// Gradients with the same layout as [`RegionHead`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub background: Vec<f64>,
}

impl HeadGrads {
    pub fn zeros_like(head: &RegionHead) -> Self {
        HeadGrads {
            weight: vec![0.0; head.weight.len()],
            bias: vec![0.0; head.bias.len()],
            background: vec![0.0; head.background.len()],
        }
    }

    /// Accumulates the gradient of one region embedding `e = W·f + b`.
    pub(crate) fn add_embedding_grad(&mut self, feature: &[f64], d_embedding: &[f64], scale: f64) {
        let d_in = feature.len();
        for (i, de) in d_embedding.iter().enumerate() {
            let g = scale * de;
            self.bias[i] += g;
            for (w, f) in self.weight[i * d_in..(i + 1) * d_in].iter_mut().zip(feature) {
                *w += g * f;
            }
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &HeadGrads, scale: f64) {
        let pairs = self
            .weight
            .iter_mut()
            .zip(&other.weight)
            .chain(self.bias.iter_mut().zip(&other.bias))
            .chain(self.background.iter_mut().zip(&other.background));
        for (a, b) in pairs {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.weight
            .iter_mut()
            .chain(self.bias.iter_mut())
            .chain(self.background.iter_mut())
            .for_each(|v| *v *= s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = RegionHead::init(16, 8, &mut rng).unwrap();
        assert_eq!(h.weight.len(), 128);
        assert!(h.weight.iter().all(|w| w.abs() <= 0.25));
        assert!(h.bias.iter().all(|&b| b == 0.0));
        assert!((norm(&h.background) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn embed_is_affine() {
        let h = RegionHead::from_parts(
            2,
            2,
            vec![1.0, 2.0, 3.0, 4.0],
            vec![0.5, -0.5],
            vec![1.0, 0.0],
        )
        .unwrap();
        assert_eq!(h.embed(&[1.0, 1.0]).unwrap(), vec![3.5, 6.5]);
        assert!(h.embed(&[1.0]).is_err());
    }

    #[test]
    fn from_parts_checks() {
        assert!(RegionHead::from_parts(2, 2, vec![0.0; 3], vec![0.0; 2], vec![1.0; 2]).is_err());
        assert!(
            RegionHead::from_parts(1, 1, vec![f64::NAN], vec![0.0], vec![1.0]).is_err()
        );
    }
}
