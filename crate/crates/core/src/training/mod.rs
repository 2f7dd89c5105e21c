//! Region-head training: losses, the gradient-descent trainer and the
//! synthetic benchmark used to exercise them.

mod head;
mod loss;
pub mod synthetic;

pub use head::{HeadGrads, RegionHead};
pub use loss::{
    vild_image_loss, vild_loss, vild_text_loss, DistillNorm, LossOutput, OfflineProposal,
    OnlineProposal, TrainingSample,
};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::classifier::{TextClassifier, DEFAULT_TAU};
use crate::error::{Result, VildError};

/// Fractions of the run after which the step size is divided by 10.
pub const LR_DECAY_POINTS: [f64; 3] = [0.9, 0.95, 0.975];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub tau: f64,
    /// Weight `w` of the distillation term.
    pub distill_weight: f64,
    pub distill_norm: DistillNorm,
    /// When false only the distillation term is optimized (the image head
    /// of a two-head ensemble).
    pub text_loss: bool,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Samples per step; 0 means the full dataset.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: DEFAULT_TAU,
            distill_weight: 0.5,
            distill_norm: DistillNorm::L1,
            text_loss: true,
            learning_rate: 0.05,
            iterations: 2000,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(VildError::invalid(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.distill_weight >= 0.0 && self.distill_weight.is_finite()) {
            return Err(VildError::invalid(format!(
                "distill weight must be >= 0, got {}",
                self.distill_weight
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(VildError::invalid(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    /// Step size at `step` under the step-decay schedule.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let progress = step as f64 / self.iterations.max(1) as f64;
        let decays = LR_DECAY_POINTS.iter().filter(|&&p| progress >= p).count();
        self.learning_rate * 0.1f64.powi(decays as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub head: RegionHead,
    /// Mini-batch loss before each update.
    pub losses: Vec<f64>,
}

/// Mean combined loss and gradient over `samples`. Per-sample terms are
/// evaluated in parallel and reduced in sample order.
pub fn batch_loss(
    head: &RegionHead,
    clf_base: &TextClassifier,
    samples: &[&TrainingSample],
    config: &TrainConfig,
) -> Result<LossOutput> {
    let parts = samples
        .par_iter()
        .map(|s| {
            loss::combined_loss(
                head,
                clf_base,
                s,
                config.text_loss,
                config.distill_weight,
                config.distill_norm,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grads = HeadGrads::zeros_like(head);
    let mut total = 0.0;
    let scale = 1.0 / samples.len() as f64;
    for p in &parts {
        total += p.loss;
        grads.add_scaled(&p.grads, scale);
    }
    Ok(LossOutput {
        loss: total * scale,
        grads,
    })
}

/// Feature dimension shared by every proposal of the dataset.
pub fn feature_dim(dataset: &[TrainingSample]) -> Result<usize> {
    let mut dims = dataset.iter().flat_map(|s| {
        s.online
            .iter()
            .map(|p| p.feature.len())
            .chain(s.offline.iter().map(|p| p.feature.len()))
    });
    let first = dims
        .next()
        .ok_or(VildError::Empty("training dataset has no proposals"))?;
    if first == 0 {
        return Err(VildError::invalid("proposal features are empty"));
    }
    for d in dims {
        crate::embedding::check_dims(first, d)?;
    }
    Ok(first)
}

/// Plain gradient descent on the region head. The head is initialized and
/// mini-batches drawn from one ChaCha stream seeded by `config.seed`, so the
/// result depends only on (seed, config, data).
pub fn train(
    dataset: &[TrainingSample],
    clf_base: &TextClassifier,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    config.validate()?;
    let d_in = feature_dim(dataset)?;
    let clf = if clf_base.tau() == config.tau {
        clf_base.clone()
    } else {
        TextClassifier::new(
            clf_base.category_ids().to_vec(),
            clf_base.text_embeddings().to_vec(),
            clf_base.background().to_vec(),
            config.tau,
        )?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut head = RegionHead::init(d_in, clf.dim(), &mut rng)?;
    let mut losses = Vec::with_capacity(config.iterations);

    let full_batch = config.batch_size == 0 || config.batch_size >= dataset.len();
    for step in 0..config.iterations {
        let batch: Vec<&TrainingSample> = if full_batch {
            dataset.iter().collect()
        } else {
            let mut picked = index::sample(&mut rng, dataset.len(), config.batch_size).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| &dataset[i]).collect()
        };
        let out = batch_loss(&head, &clf, &batch, config)?;
        if !out.loss.is_finite() {
            return Err(VildError::Numerical(format!(
                "loss became {} at iteration {step}",
                out.loss
            )));
        }
        losses.push(out.loss);
        head.apply(&out.grads, config.learning_rate_at(step));
        if !head.is_finite() {
            return Err(VildError::Numerical(format!(
                "parameters diverged at iteration {step} (loss {})",
                out.loss
            )));
        }
    }
    Ok(TrainOutput { head, losses })
}
