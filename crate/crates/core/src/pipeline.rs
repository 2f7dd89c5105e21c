//! End-to-end stages: compose, train, infer, ensemble, finalize, eval.
//! Each stage is a plain function over in-memory values; [`run_pipeline`]
//! wires them to the files named in a [`RunConfig`].

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;

use crate::classifier::{classify_regions, InferenceVocab, TextClassifier};
use crate::config::RunConfig;
use crate::detection::{Detection, ImageId, Proposal};
use crate::embedding::{compose_crop_ensemble, compose_text_embedding, Embedding};
use crate::error::{Result, VildError};
use crate::eval::{evaluate, EvalReport, GroundTruth};
use crate::io::{self, EmbeddingFile, Encoding};
use crate::postprocess::{ensemble_detections, finalize, nms, objectness_rescore, EnsembleConfig};
use crate::training::synthetic::SyntheticBenchmark;
use crate::training::{train, RegionHead, TrainConfig, TrainOutput, TrainingSample};
use crate::vocab::Vocabulary;

/// Groups per-prompt embeddings by category and composes each group.
/// Record ids are `<category>` or `<category>/<anything>`; output keeps the
/// order of first appearance.
pub fn compose_text_file(prompts: &EmbeddingFile) -> Result<EmbeddingFile> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<Embedding>> = HashMap::new();
    for (id, values) in &prompts.records {
        let key = id.split_once('/').map_or(id.as_str(), |(k, _)| k);
        if !groups.contains_key(key) {
            order.push(key);
        }
        groups
            .entry(key)
            .or_default()
            .push(Embedding::new(values.clone())?);
    }
    let mut out = EmbeddingFile::new(prompts.dim);
    for key in order {
        let composed = compose_text_embedding(&groups[key])?;
        out.push(key, composed.into_values())?;
    }
    Ok(out)
}

/// Crop-ensembles records of two files matched by id, in the first file's order.
pub fn compose_crops_file(crops_1x: &EmbeddingFile, crops_1_5x: &EmbeddingFile) -> Result<EmbeddingFile> {
    if crops_1x.records.len() != crops_1_5x.records.len() {
        return Err(VildError::data(format!(
            "crop files have {} and {} records",
            crops_1x.records.len(),
            crops_1_5x.records.len()
        )));
    }
    let mut out = EmbeddingFile::new(crops_1x.dim);
    for (id, a) in &crops_1x.records {
        let b = crops_1_5x
            .get(id)
            .ok_or_else(|| VildError::data(format!("record '{id}' missing from the 1.5x crops")))?;
        let composed = compose_crop_ensemble(&Embedding::new(a.clone())?, &Embedding::new(b.to_vec())?)?;
        out.push(id.clone(), composed.into_values())?;
    }
    Ok(out)
}

/// Placeholder background for classifiers whose background slot is supplied
/// elsewhere (the training loss uses the head's own).
fn unit_background(dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[0] = 1.0;
    v
}

/// Base-category classifier used as the training target. Training labels
/// index into it in vocabulary order.
pub fn base_classifier(vocab: &Vocabulary, text: &EmbeddingFile, tau: f64) -> Result<TextClassifier> {
    io::classifier_from_file(text, &vocab.base_ids(), unit_background(text.dim.max(1)), tau)
}

pub fn inference_classifier(
    vocab: &Vocabulary,
    text: &EmbeddingFile,
    mode: InferenceVocab,
    background: Vec<f64>,
    tau: f64,
) -> Result<TextClassifier> {
    io::classifier_from_file(text, &mode.category_ids(vocab), background, tau)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferOptions {
    pub nms_agnostic: f64,
    pub max_proposals: usize,
    pub objectness_rescore: bool,
    pub max_detections: usize,
    pub nms_per_class: f64,
}

impl InferOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        InferOptions {
            nms_agnostic: cfg.nms_agnostic,
            max_proposals: cfg.max_proposals,
            objectness_rescore: cfg.objectness_rescore,
            max_detections: cfg.max_detections,
            nms_per_class: cfg.nms_per_class,
        }
    }
}

/// Class-agnostic NMS over proposals by objectness, capped at `max_proposals`.
pub fn filter_proposals(proposals: &[Proposal], threshold: f64, max_proposals: usize) -> Result<Vec<Proposal>> {
    let as_dets: Vec<Detection> = proposals
        .iter()
        .map(|p| Detection {
            image_id: p.image_id,
            category_id: 0,
            bbox: p.bbox,
            score: p.objectness,
            source_id: p.source_id,
        })
        .collect();
    let kept = nms(&as_dets, threshold, true, max_proposals)?;
    let by_source: HashMap<u32, &Proposal> = proposals.iter().map(|p| (p.source_id, p)).collect();
    Ok(kept.iter().map(|d| by_source[&d.source_id].clone()).collect())
}

/// Raw per-(proposal, category) probabilities for one image.
pub fn score_proposals(head: &RegionHead, clf: &TextClassifier, proposals: &[Proposal]) -> Result<Vec<Detection>> {
    let regions = proposals
        .iter()
        .map(|p| Ok((p.clone(), head.embed(&p.feature)?)))
        .collect::<Result<Vec<_>>>()?;
    classify_regions(clf, &regions)
}

fn rescore(dets: &mut [Detection], proposals: &[Proposal]) -> Result<()> {
    let objectness: HashMap<u32, f64> = proposals.iter().map(|p| (p.source_id, p.objectness)).collect();
    for d in dets {
        d.score = objectness_rescore(d.score, objectness[&d.source_id])?;
    }
    Ok(())
}

/// Second head and ensemble weights for two-head scoring.
pub struct EnsembleHead<'a> {
    pub head: &'a RegionHead,
    pub config: &'a EnsembleConfig,
}

/// Scores one image: proposal NMS, classification, optional two-head
/// ensemble, optional objectness rescoring, then per-class NMS and top-k.
pub fn infer_image(
    head: &RegionHead,
    clf: &TextClassifier,
    second: Option<&EnsembleHead>,
    proposals: &[Proposal],
    opts: &InferOptions,
) -> Result<Vec<Detection>> {
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let proposals = filter_proposals(proposals, opts.nms_agnostic, opts.max_proposals)?;
    let mut dets = score_proposals(head, clf, &proposals)?;
    if let Some(second) = second {
        let dets_b = score_proposals(second.head, clf, &proposals)?;
        dets = ensemble_detections(&dets, &dets_b, second.config)?;
    }
    if opts.objectness_rescore {
        rescore(&mut dets, &proposals)?;
    }
    finalize(&dets, opts.max_detections, opts.nms_per_class)
}

/// [`infer_image`] over every image, in parallel, concatenated in input order.
pub fn infer(
    head: &RegionHead,
    clf: &TextClassifier,
    second: Option<&EnsembleHead>,
    images: &[(ImageId, Vec<Proposal>)],
    opts: &InferOptions,
) -> Result<Vec<Detection>> {
    let per_image = images
        .par_iter()
        .map(|(_, proposals)| infer_image(head, clf, second, proposals, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

/// Heads produced by the train stage. `image` is present for two-head runs.
pub struct TrainedHeads {
    pub text: TrainOutput,
    pub image: Option<TrainOutput>,
}

/// Trains one head with `w = cfg.w`, or for ensembles a text-only head
/// (`w = 0`) and a distillation-only head.
pub fn train_heads(data: &[TrainingSample], clf_base: &TextClassifier, cfg: &RunConfig) -> Result<TrainedHeads> {
    let base = cfg.train_config();
    if !cfg.ensemble {
        return Ok(TrainedHeads {
            text: train(data, clf_base, &base)?,
            image: None,
        });
    }
    let text = train(data, clf_base, &TrainConfig { distill_weight: 0.0, ..base.clone() })?;
    let mut image = train(
        data,
        clf_base,
        &TrainConfig {
            distill_weight: 1.0,
            text_loss: false,
            ..base
        },
    )?;
    // The distillation head never trains its background; reuse the text head's.
    image.head.background = text.head.background.clone();
    Ok(TrainedHeads { text, image: Some(image) })
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

pub struct PipelineOutput {
    pub report: EvalReport,
    pub detections: Vec<Detection>,
    pub losses: Vec<f64>,
}

fn write_losses(path: &Path, losses: &[f64]) -> Result<()> {
    let text: String = losses
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{i}\t{:?}\n", io::round_sig(*l)))
        .collect();
    std::fs::write(path, text).map_err(|e| VildError::io(path, e))
}

/// Runs every stage named by `cfg`. Writes the composed text embeddings,
/// head, detections and report when their paths are configured.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutput> {
    let vocab = stage("load", cfg.require("vocab", &cfg.vocab).and_then(|p| io::read_vocab(&p)))?;

    let text = stage("compose", (|| {
        let text_path = cfg.text_embeddings.as_deref().map(|p| cfg.resolve(p));
        match &cfg.prompt_embeddings {
            Some(p) => {
                let composed = compose_text_file(&EmbeddingFile::read(&cfg.resolve(p))?)?;
                if let Some(out) = &text_path {
                    composed.write(out, Encoding::Text)?;
                }
                Ok(composed)
            }
            None => EmbeddingFile::read(&cfg.require("text_embeddings", &cfg.text_embeddings)?),
        }
    })())?;

    let heads = stage("train", (|| {
        let data = io::read_training_data(&cfg.require("train_data", &cfg.train_data)?)?;
        let clf_base = base_classifier(&vocab, &text, cfg.tau)?;
        let heads = train_heads(&data, &clf_base, cfg)?;
        if let Some(p) = &cfg.head {
            let path = cfg.resolve(p);
            io::head_to_file(&heads.text.head).write(&path, Encoding::Text)?;
            write_losses(&path.with_extension("loss.tsv"), &heads.text.losses)?;
            if let Some(image) = &heads.image {
                io::head_to_file(&image.head).write(&path.with_extension("image.txt"), Encoding::Text)?;
            }
        }
        Ok(heads)
    })())?;

    let images = stage(
        "infer",
        cfg.require("eval_data", &cfg.eval_data).and_then(|p| io::read_proposals(&p)),
    )?;
    let ensemble_cfg = stage("ensemble", EnsembleConfig::new(cfg.lambda, vocab.base_ids()))?;
    let second = heads.image.as_ref().map(|image| EnsembleHead {
        head: &image.head,
        config: &ensemble_cfg,
    });
    let detections = stage("infer", (|| {
        let clf = inference_classifier(
            &vocab,
            &text,
            cfg.inference_vocab,
            heads.text.head.background.clone(),
            cfg.tau,
        )?;
        let dets = infer(&heads.text.head, &clf, second.as_ref(), &images, &InferOptions::from_config(cfg))?;
        if let Some(p) = &cfg.dets {
            io::write_detections(&cfg.resolve(p), &dets)?;
        }
        Ok(dets)
    })())?;

    let report = stage("eval", (|| {
        let gts: Vec<GroundTruth> = io::read_ground_truth(&cfg.require("gt", &cfg.gt)?)?;
        let proposals = io::scored_boxes(&images);
        let report = evaluate(
            &detections,
            &gts,
            &vocab,
            cfg.max_detections,
            Some(&proposals),
            &cfg.ar_ks,
        )?;
        if let Some(p) = &cfg.report {
            write_report(&cfg.resolve(p), &report)?;
        }
        Ok(report)
    })())?;

    Ok(PipelineOutput {
        report,
        detections,
        losses: heads.text.losses,
    })
}

/// Trains on a synthetic benchmark and evaluates the joint-vocabulary
/// detections, without touching the filesystem.
pub fn run_benchmark(bench: &SyntheticBenchmark, cfg: &RunConfig) -> Result<EvalReport> {
    let mut text = EmbeddingFile::new(bench.text_embeddings.first().map_or(0, |e| e.dim()));
    for (c, e) in bench.vocab.categories().iter().zip(&bench.text_embeddings) {
        text.push(c.id.to_string(), e.values().to_vec())?;
    }
    let clf_base = base_classifier(&bench.vocab, &text, cfg.tau)?;
    let heads = train_heads(&bench.train, &clf_base, cfg)?;
    let clf = inference_classifier(
        &bench.vocab,
        &text,
        cfg.inference_vocab,
        heads.text.head.background.clone(),
        cfg.tau,
    )?;
    let ensemble_cfg = EnsembleConfig::new(cfg.lambda, bench.vocab.base_ids())?;
    let second = heads.image.as_ref().map(|image| EnsembleHead {
        head: &image.head,
        config: &ensemble_cfg,
    });
    let images: Vec<(ImageId, Vec<Proposal>)> = bench
        .eval
        .iter()
        .map(|im| (im.image_id, im.proposals.clone()))
        .collect();
    let dets = infer(&heads.text.head, &clf, second.as_ref(), &images, &InferOptions::from_config(cfg))?;
    let proposals = io::scored_boxes(&images);
    evaluate(
        &dets,
        &bench.ground_truth(),
        &bench.vocab,
        cfg.max_detections,
        Some(&proposals),
        &cfg.ar_ks,
    )
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&report.to_json()).expect("report serializes");
    text.push('\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| VildError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| VildError::io(path, e))
}
