//! Desk-scale stand-in for a base/novel detection benchmark.
//!
//! Every category has a hidden unit "concept" vector in the teacher space.
//! Text embeddings are noisy prompt embeddings of the concept, composed
//! like real prompt ensembles; teacher image embeddings are noisy crop
//! embeddings of it; backbone features are a fixed random linear mixing of
//! the concept plus a category-specific offset and noise. Only base
//! categories are ever labeled for training: novel objects show up as
//! background among the online proposals and unlabeled, with teacher
//! embeddings, among the offline ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::detection::{BBox, Proposal};
use crate::embedding::{compose_crop_ensemble, compose_text_embedding, l2_normalize, Embedding};
use crate::error::{Result, VildError};
use crate::eval::GroundTruth;
use crate::prompts::PROMPT_TEMPLATES;
use crate::training::{OfflineProposal, OnlineProposal, TrainingSample};
use crate::vocab::{Category, CategoryId, Frequency, Split, Vocabulary};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub base_categories: usize,
    pub novel_categories: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub train_images: usize,
    pub eval_images: usize,
    /// Online proposals per training image (N).
    pub online_per_image: usize,
    /// Offline proposals per training image (M).
    pub offline_per_image: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Background proposals per evaluation image.
    pub eval_background: usize,
    /// Number of background "stuff" concepts.
    pub stuff_concepts: usize,
    /// Expected norm of the noise added to each prompt embedding.
    pub prompt_noise: f64,
    /// Expected norm of the noise added to each crop embedding.
    pub teacher_noise: f64,
    /// Expected norm of the noise added to each feature vector.
    pub feature_noise: f64,
    /// Expected norm of the per-category feature offset.
    pub category_offset: f64,
    /// Expected norm of the spread of background concepts around their stuff prototype.
    pub background_spread: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 0,
            base_categories: 20,
            novel_categories: 10,
            d_in: 32,
            d_out: 16,
            train_images: 200,
            eval_images: 100,
            online_per_image: 16,
            offline_per_image: 16,
            min_objects: 2,
            max_objects: 5,
            eval_background: 6,
            stuff_concepts: 4,
            prompt_noise: 0.5,
            teacher_noise: 0.3,
            feature_noise: 0.3,
            category_offset: 1.0,
            background_spread: 0.5,
        }
    }
}

impl SyntheticConfig {
    /// Same config with every noise level set to zero.
    pub fn noiseless(mut self) -> Self {
        self.prompt_noise = 0.0;
        self.teacher_noise = 0.0;
        self.feature_noise = 0.0;
        self.background_spread = 0.0;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.d_out < 2 {
            return Err(VildError::invalid("synthetic benchmark needs d_out >= 2"));
        }
        if self.d_in == 0 {
            return Err(VildError::invalid("synthetic benchmark needs d_in >= 1"));
        }
        if self.base_categories == 0 {
            return Err(VildError::invalid("synthetic benchmark needs at least one base category"));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(VildError::invalid("need 1 <= min_objects <= max_objects"));
        }
        if self.stuff_concepts == 0 {
            return Err(VildError::invalid("need at least one stuff concept"));
        }
        let levels = [
            self.prompt_noise,
            self.teacher_noise,
            self.feature_noise,
            self.category_offset,
            self.background_spread,
        ];
        if levels.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(VildError::invalid("noise levels must be finite and >= 0"));
        }
        Ok(())
    }
}

/// One evaluation image: class-agnostic proposals and exhaustive ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalImage {
    pub image_id: u64,
    pub proposals: Vec<Proposal>,
    pub gts: Vec<GroundTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBenchmark {
    pub vocab: Vocabulary,
    /// Per category (vocabulary order), one embedding per prompt template.
    pub prompt_embeddings: Vec<Vec<Embedding>>,
    /// Composed text embedding per category, vocabulary order.
    pub text_embeddings: Vec<Embedding>,
    pub train: Vec<TrainingSample>,
    pub eval: Vec<EvalImage>,
}

const IMAGE_SIZE: f64 = 640.0;

struct World<'a> {
    cfg: &'a SyntheticConfig,
    rng: ChaCha8Rng,
    concepts: Vec<Vec<f64>>,
    offsets: Vec<Vec<f64>>,
    stuff: Vec<Vec<f64>>,
    stuff_offsets: Vec<Vec<f64>>,
    /// Row-major d_in x d_out.
    mixing: Vec<f64>,
}

/// What a proposal actually covers.
#[derive(Clone, Copy)]
enum Content {
    Object(usize),
    Stuff(usize),
}

impl World<'_> {
    fn gaussian(&mut self, dim: usize, norm: f64) -> Vec<f64> {
        let scale = norm / (dim as f64).sqrt();
        (0..dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                scale * z
            })
            .collect()
    }

    fn unit(&mut self, dim: usize) -> Vec<f64> {
        loop {
            let v = self.gaussian(dim, 1.0);
            if let Ok(e) = l2_normalize(&v) {
                return e.into_values();
            }
        }
    }

    fn noisy_unit(&mut self, center: &[f64], noise: f64) -> Embedding {
        loop {
            let n = self.gaussian(center.len(), noise);
            let v: Vec<f64> = center.iter().zip(&n).map(|(c, e)| c + e).collect();
            if let Ok(e) = l2_normalize(&v) {
                return e;
            }
        }
    }

    /// Concept vector in the teacher space for one proposal's content.
    fn latent(&mut self, content: Content) -> Vec<f64> {
        match content {
            Content::Object(c) => self.concepts[c].clone(),
            Content::Stuff(s) => {
                let center = self.stuff[s].clone();
                self.noisy_unit(&center, self.cfg.background_spread).into_values()
            }
        }
    }

    fn feature(&mut self, content: Content, latent: &[f64]) -> Vec<f64> {
        let (d_in, d_out) = (self.cfg.d_in, self.cfg.d_out);
        let noise = self.gaussian(d_in, self.cfg.feature_noise);
        let offset = match content {
            Content::Object(c) => &self.offsets[c],
            Content::Stuff(s) => &self.stuff_offsets[s],
        };
        (0..d_in)
            .map(|i| {
                let row = &self.mixing[i * d_out..(i + 1) * d_out];
                row.iter().zip(latent).map(|(a, u)| a * u).sum::<f64>() + offset[i] + noise[i]
            })
            .collect()
    }

    fn teacher(&mut self, latent: &[f64]) -> Result<Embedding> {
        let crop_1x = self.noisy_unit(latent, self.cfg.teacher_noise);
        let crop_1_5x = self.noisy_unit(latent, self.cfg.teacher_noise);
        compose_crop_ensemble(&crop_1x, &crop_1_5x)
    }

    fn random_stuff(&mut self) -> Content {
        Content::Stuff(self.rng.random_range(0..self.cfg.stuff_concepts))
    }

    fn random_objects(&mut self) -> Vec<usize> {
        let total = self.concepts.len();
        let count = self.rng.random_range(self.cfg.min_objects..=self.cfg.max_objects);
        (0..count).map(|_| self.rng.random_range(0..total)).collect()
    }

    fn random_box(&mut self) -> BBox {
        let w = self.rng.random_range(40.0..200.0);
        let h = self.rng.random_range(40.0..200.0);
        let x = self.rng.random_range(0.0..IMAGE_SIZE - w);
        let y = self.rng.random_range(0.0..IMAGE_SIZE - h);
        BBox::new(x, y, x + w, y + h).expect("positive size")
    }

    fn jitter(&mut self, b: &BBox, amount: f64) -> BBox {
        let (w, h) = (b.x2 - b.x1, b.y2 - b.y1);
        let mut d = || self.rng.random_range(-amount..=amount);
        let (x1, y1, x2, y2) = (b.x1 + d() * w, b.y1 + d() * h, b.x2 + d() * w, b.y2 + d() * h);
        BBox::new(x1, y1, x2, y2).unwrap_or(*b)
    }

    /// Box that overlaps none of `taken` by more than `max_iou`.
    fn free_box(&mut self, taken: &[BBox], max_iou: f64) -> Option<BBox> {
        (0..100)
            .map(|_| self.random_box())
            .find(|b| taken.iter().all(|t| t.iou(b) <= max_iou))
    }

    fn train_sample(&mut self, image_id: u64) -> Result<TrainingSample> {
        let objects = self.random_objects();
        let base = self.cfg.base_categories;

        let mut online = Vec::with_capacity(self.cfg.online_per_image);
        for i in 0..self.cfg.online_per_image {
            let content = match objects.get(i) {
                Some(&c) => Content::Object(c),
                None => self.random_stuff(),
            };
            let latent = self.latent(content);
            let feature = self.feature(content, &latent);
            let label = match content {
                Content::Object(c) if c < base => Some(c),
                _ => None,
            };
            online.push(OnlineProposal { feature, label });
        }

        let mut offline = Vec::with_capacity(self.cfg.offline_per_image);
        for i in 0..self.cfg.offline_per_image {
            let content = match objects.get(i) {
                Some(&c) => Content::Object(c),
                None => self.random_stuff(),
            };
            let latent = self.latent(content);
            let feature = self.feature(content, &latent);
            let teacher = self.teacher(&latent)?;
            offline.push(OfflineProposal { feature, teacher });
        }
        Ok(TrainingSample {
            image_id,
            online,
            offline,
        })
    }

    fn proposal(&mut self, image_id: u64, source_id: u32, bbox: BBox, content: Content, objectness: f64) -> Result<Proposal> {
        let latent = self.latent(content);
        let feature = self.feature(content, &latent);
        let teacher = self.teacher(&latent)?;
        Ok(Proposal {
            image_id,
            source_id,
            bbox,
            objectness,
            feature,
            teacher: Some(teacher),
        })
    }

    fn eval_image(&mut self, image_id: u64, ids: &[CategoryId]) -> Result<EvalImage> {
        let objects = self.random_objects();
        let mut gts = Vec::new();
        let mut boxes = Vec::new();
        let mut proposals = Vec::new();
        for c in objects {
            let Some(gt_box) = self.free_box(&boxes, 0.1) else { continue };
            boxes.push(gt_box);
            gts.push(GroundTruth {
                image_id,
                category_id: ids[c],
                bbox: gt_box,
            });
            let tight = self.jitter(&gt_box, 0.01);
            let objectness = self.rng.random_range(0.7..1.0);
            let id = proposals.len() as u32;
            proposals.push(self.proposal(image_id, id, tight, Content::Object(c), objectness)?);
            if self.rng.random_bool(0.5) {
                let loose = self.jitter(&gt_box, 0.05);
                let objectness = self.rng.random_range(0.5..0.9);
                let id = proposals.len() as u32;
                proposals.push(self.proposal(image_id, id, loose, Content::Object(c), objectness)?);
            }
        }
        for _ in 0..self.cfg.eval_background {
            let Some(bg_box) = self.free_box(&boxes, 0.3) else { continue };
            let objectness = self.rng.random_range(0.0..0.6);
            let content = self.random_stuff();
            let id = proposals.len() as u32;
            proposals.push(self.proposal(image_id, id, bg_box, content, objectness)?);
        }
        Ok(EvalImage {
            image_id,
            proposals,
            gts,
        })
    }
}

fn vocabulary(cfg: &SyntheticConfig) -> Result<Vocabulary> {
    let base = (0..cfg.base_categories).map(|i| Category {
        id: i as CategoryId,
        name: format!("base object {i}"),
        synonyms: vec![],
        split: Split::Base,
        frequency: if i % 2 == 0 {
            Frequency::Frequent
        } else {
            Frequency::Common
        },
    });
    let novel = (0..cfg.novel_categories).map(|i| Category {
        id: (cfg.base_categories + i) as CategoryId,
        name: format!("novel object {i}"),
        synonyms: vec![],
        split: Split::Novel,
        frequency: Frequency::Rare,
    });
    Vocabulary::new(base.chain(novel).collect())
}

/// Generates the benchmark. Category ids are `0..base` for base categories
/// (so a base id is also its index in the base classifier) followed by the
/// novel ones. Evaluation image ids start after the training ones.
pub fn gen_synthetic_benchmark(cfg: &SyntheticConfig) -> Result<SyntheticBenchmark> {
    cfg.validate()?;
    let vocab = vocabulary(cfg)?;
    let total = vocab.len();
    let mut world = World {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        concepts: Vec::new(),
        offsets: Vec::new(),
        stuff: Vec::new(),
        stuff_offsets: Vec::new(),
        mixing: Vec::new(),
    };
    world.concepts = (0..total).map(|_| world.unit(cfg.d_out)).collect();
    world.offsets = (0..total)
        .map(|_| world.gaussian(cfg.d_in, cfg.category_offset))
        .collect();
    world.stuff = (0..cfg.stuff_concepts).map(|_| world.unit(cfg.d_out)).collect();
    world.stuff_offsets = (0..cfg.stuff_concepts)
        .map(|_| world.gaussian(cfg.d_in, cfg.category_offset))
        .collect();
    // entries ~ N(0, 1/d_in), so a unit concept maps to a feature of norm ~1
    world.mixing = world.gaussian(cfg.d_in * cfg.d_out, (cfg.d_out as f64).sqrt());

    let mut prompt_embeddings = Vec::with_capacity(total);
    let mut text_embeddings = Vec::with_capacity(total);
    for c in 0..total {
        let center = world.concepts[c].clone();
        let prompts: Vec<Embedding> = PROMPT_TEMPLATES
            .iter()
            .map(|_| world.noisy_unit(&center, cfg.prompt_noise))
            .collect();
        text_embeddings.push(compose_text_embedding(&prompts)?);
        prompt_embeddings.push(prompts);
    }

    let train = (0..cfg.train_images as u64)
        .map(|i| world.train_sample(i))
        .collect::<Result<Vec<_>>>()?;
    let ids = vocab.ids();
    let offset = cfg.train_images as u64;
    let eval = (0..cfg.eval_images as u64)
        .map(|i| world.eval_image(offset + i, &ids))
        .collect::<Result<Vec<_>>>()?;

    Ok(SyntheticBenchmark {
        vocab,
        prompt_embeddings,
        text_embeddings,
        train,
        eval,
    })
}

impl SyntheticBenchmark {
    pub fn text_embedding(&self, id: CategoryId) -> Option<&Embedding> {
        self.vocab.index_of(id).map(|i| &self.text_embeddings[i])
    }

    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        self.eval.iter().flat_map(|im| im.gts.iter().cloned()).collect()
    }
}
