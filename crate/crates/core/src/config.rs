//! Flat `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Relative paths are
//! resolved against the directory of the config file when it is loaded
//! with [`RunConfig::load`].

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::classifier::{InferenceVocab, DEFAULT_TAU};
use crate::error::{Result, VildError};
use crate::eval::DEFAULT_AR_KS;
use crate::io::round_sig;
use crate::postprocess::{
    DEFAULT_AGNOSTIC_NMS, DEFAULT_LAMBDA, DEFAULT_MAX_DETECTIONS, DEFAULT_MAX_PROPOSALS,
    DEFAULT_PER_CLASS_NMS,
};
use crate::training::{DistillNorm, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub vocab: Option<PathBuf>,
    /// Per-prompt embeddings; when set, the compose stage writes `text_embeddings`.
    pub prompt_embeddings: Option<PathBuf>,
    pub text_embeddings: Option<PathBuf>,
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub head: Option<PathBuf>,
    pub dets: Option<PathBuf>,
    pub report: Option<PathBuf>,

    pub tau: f64,
    pub w: f64,
    pub lambda: f64,
    pub distill_norm: DistillNorm,
    pub nms_per_class: f64,
    pub nms_agnostic: f64,
    pub max_detections: usize,
    pub max_proposals: usize,
    pub seed: u64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub inference_vocab: InferenceVocab,
    /// Train a second, distillation-only head and ensemble the two.
    pub ensemble: bool,
    pub objectness_rescore: bool,
    pub ar_ks: Vec<usize>,

    /// Directory relative paths are resolved against.
    pub base_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        RunConfig {
            vocab: None,
            prompt_embeddings: None,
            text_embeddings: None,
            train_data: None,
            eval_data: None,
            gt: None,
            head: None,
            dets: None,
            report: None,
            tau: DEFAULT_TAU,
            w: train.distill_weight,
            lambda: DEFAULT_LAMBDA,
            distill_norm: train.distill_norm,
            nms_per_class: DEFAULT_PER_CLASS_NMS,
            nms_agnostic: DEFAULT_AGNOSTIC_NMS,
            max_detections: DEFAULT_MAX_DETECTIONS,
            max_proposals: DEFAULT_MAX_PROPOSALS,
            seed: train.seed,
            iterations: train.iterations,
            learning_rate: train.learning_rate,
            batch_size: train.batch_size,
            inference_vocab: InferenceVocab::default(),
            ensemble: false,
            objectness_rescore: false,
            ar_ks: DEFAULT_AR_KS.to_vec(),
            base_dir: None,
        }
    }
}

const KEYS: &[&str] = &[
    "vocab",
    "prompt_embeddings",
    "text_embeddings",
    "train_data",
    "eval_data",
    "gt",
    "head",
    "dets",
    "report",
    "tau",
    "w",
    "lambda",
    "distill_norm",
    "nms_per_class",
    "nms_agnostic",
    "max_detections",
    "max_proposals",
    "seed",
    "iterations",
    "learning_rate",
    "batch_size",
    "inference_vocab",
    "ensemble",
    "objectness_rescore",
    "ar_ks",
];

fn typed<T: FromStr>(line: usize, key: &str, value: &str, what: &str) -> Result<T> {
    value.parse().map_err(|_| VildError::Config {
        line,
        msg: format!("key '{key}' expects {what}, got '{value}'"),
    })
}

fn number(line: usize, key: &str, value: &str) -> Result<f64> {
    let v: f64 = typed(line, key, value, "a number")?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(VildError::Config {
            line,
            msg: format!("key '{key}' must be finite"),
        })
    }
}

fn boolean(line: usize, key: &str, value: &str) -> Result<bool> {
    typed(line, key, value, "true or false")
}

fn in_range(line: usize, key: &str, v: f64, ok: bool, range: &str) -> Result<f64> {
    if ok {
        Ok(v)
    } else {
        Err(VildError::Config {
            line,
            msg: format!("key '{key}' must be in {range}, got {v}"),
        })
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed.split_once('=').ok_or_else(|| VildError::Config {
            line,
            msg: format!("expected key=value, found '{trimmed}'"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            return Err(VildError::Config {
                line,
                msg: format!("unknown key '{key}'"),
            });
        }
        if !seen.insert(key.to_string()) {
            return Err(VildError::Config {
                line,
                msg: format!("duplicate key '{key}'"),
            });
        }
        let path = || {
            if value.is_empty() {
                Err(VildError::Config {
                    line,
                    msg: format!("key '{key}' needs a path"),
                })
            } else {
                Ok(Some(PathBuf::from(value)))
            }
        };
        match key {
            "vocab" => cfg.vocab = path()?,
            "prompt_embeddings" => cfg.prompt_embeddings = path()?,
            "text_embeddings" => cfg.text_embeddings = path()?,
            "train_data" => cfg.train_data = path()?,
            "eval_data" => cfg.eval_data = path()?,
            "gt" => cfg.gt = path()?,
            "head" => cfg.head = path()?,
            "dets" => cfg.dets = path()?,
            "report" => cfg.report = path()?,
            "tau" => {
                let v = number(line, key, value)?;
                cfg.tau = in_range(line, key, v, v > 0.0, "(0, inf)")?;
            }
            "w" => {
                let v = number(line, key, value)?;
                cfg.w = in_range(line, key, v, v >= 0.0, "[0, inf)")?;
            }
            "lambda" => {
                let v = number(line, key, value)?;
                cfg.lambda = in_range(line, key, v, (0.0..=1.0).contains(&v), "[0, 1]")?;
            }
            "nms_per_class" | "nms_agnostic" => {
                let v = number(line, key, value)?;
                let v = in_range(line, key, v, v > 0.0 && v <= 1.0, "(0, 1]")?;
                if key == "nms_per_class" {
                    cfg.nms_per_class = v;
                } else {
                    cfg.nms_agnostic = v;
                }
            }
            "learning_rate" => {
                let v = number(line, key, value)?;
                cfg.learning_rate = in_range(line, key, v, v > 0.0, "(0, inf)")?;
            }
            "distill_norm" => cfg.distill_norm = typed(line, key, value, "l1 or l2")?,
            "inference_vocab" => {
                cfg.inference_vocab = typed(line, key, value, "base, novel or joint")?
            }
            "max_detections" | "max_proposals" => {
                let v: usize = typed(line, key, value, "a positive integer")?;
                if v == 0 {
                    return Err(VildError::Config {
                        line,
                        msg: format!("key '{key}' must be >= 1"),
                    });
                }
                if key == "max_detections" {
                    cfg.max_detections = v;
                } else {
                    cfg.max_proposals = v;
                }
            }
            "seed" => cfg.seed = typed(line, key, value, "a non-negative integer")?,
            "iterations" => cfg.iterations = typed(line, key, value, "a non-negative integer")?,
            "batch_size" => cfg.batch_size = typed(line, key, value, "a non-negative integer")?,
            "ensemble" => cfg.ensemble = boolean(line, key, value)?,
            "objectness_rescore" => cfg.objectness_rescore = boolean(line, key, value)?,
            "ar_ks" => cfg.ar_ks = parse_ar_ks(value).map_err(|msg| VildError::Config { line, msg })?,
            _ => unreachable!("key list and match arms agree"),
        }
    }
    Ok(cfg)
}

/// Comma-separated positive integers.
pub fn parse_ar_ks(value: &str) -> std::result::Result<Vec<usize>, String> {
    let ks = value
        .split(',')
        .map(|s| match s.trim().parse::<usize>() {
            Ok(k) if k >= 1 => Ok(k),
            _ => Err(format!("AR k values must be positive integers, got '{}'", s.trim())),
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if ks.is_empty() {
        return Err("empty AR k list".into());
    }
    Ok(ks)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| VildError::io(path, e))?;
        let mut cfg = parse_config(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    /// `path` joined onto the config file's directory when relative.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        match &self.base_dir {
            Some(dir) if path.is_relative() => dir.join(path),
            _ => path.to_path_buf(),
        }
    }

    /// Resolved path for a required key.
    pub fn require(&self, key: &str, value: &Option<PathBuf>) -> Result<PathBuf> {
        value
            .as_deref()
            .map(|p| self.resolve(p))
            .ok_or_else(|| VildError::invalid(format!("config key '{key}' is required")))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            tau: self.tau,
            distill_weight: self.w,
            distill_norm: self.distill_norm,
            text_loss: true,
            learning_rate: self.learning_rate,
            iterations: self.iterations,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }

    /// Serializes every key; floats use 9 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let paths = [
            ("vocab", &self.vocab),
            ("prompt_embeddings", &self.prompt_embeddings),
            ("text_embeddings", &self.text_embeddings),
            ("train_data", &self.train_data),
            ("eval_data", &self.eval_data),
            ("gt", &self.gt),
            ("head", &self.head),
            ("dets", &self.dets),
            ("report", &self.report),
        ];
        for (key, p) in paths {
            if let Some(p) = p {
                out.push_str(&format!("{key}={}\n", p.display()));
            }
        }
        let f = |x: f64| format!("{:?}", round_sig(x));
        let ks: Vec<String> = self.ar_ks.iter().map(|k| k.to_string()).collect();
        out.push_str(&format!(
            "tau={}\nw={}\nlambda={}\ndistill_norm={}\nnms_per_class={}\nnms_agnostic={}\n\
             max_detections={}\nmax_proposals={}\nseed={}\niterations={}\nlearning_rate={}\n\
             batch_size={}\ninference_vocab={}\nensemble={}\nobjectness_rescore={}\nar_ks={}\n",
            f(self.tau),
            f(self.w),
            f(self.lambda),
            self.distill_norm,
            f(self.nms_per_class),
            f(self.nms_agnostic),
            self.max_detections,
            self.max_proposals,
            self.seed,
            self.iterations,
            f(self.learning_rate),
            self.batch_size,
            self.inference_vocab,
            self.ensemble,
            self.objectness_rescore,
            ks.join(","),
        ));
        out
    }
}
