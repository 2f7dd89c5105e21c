use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vild::config::{parse_ar_ks, RunConfig};
use vild::error::{Result, VildError};
use vild::eval::evaluate;
use vild::io::{self, EmbeddingFile, Encoding};
use vild::pipeline::{self, EnsembleHead, InferOptions};
use vild::postprocess::{ensemble_detections, EnsembleConfig, DEFAULT_LAMBDA};
use vild::prompts::render_prompts;
use vild::training::synthetic::{gen_synthetic_benchmark, SyntheticConfig};
use vild::training::train;

#[derive(Parser)]
#[command(name = "vild", version, about = "Open-vocabulary detection heads over precomputed embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Average per-prompt text embeddings into one vector per category,
    /// or with --render, write the prompt strings for a vocabulary.
    ComposeText {
        /// Embedding file with ids `<category>` or `<category>/<k>`.
        #[arg(long, required_unless_present = "render")]
        prompts: Option<PathBuf>,
        /// Vocabulary whose prompts to render as `<id>/<k>\t<text>` lines.
        #[arg(long, conflicts_with = "prompts")]
        render: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        binary: bool,
    },
    /// Combine 1x and 1.5x crop embeddings into unit-norm teacher embeddings.
    ComposeCrops {
        #[arg(long = "crops-1x")]
        crops_1x: PathBuf,
        #[arg(long = "crops-1_5x")]
        crops_1_5x: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        binary: bool,
    },
    /// Write a seeded synthetic benchmark and a matching run config.
    GenSynthetic {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        base: usize,
        #[arg(long, default_value_t = 10)]
        novel: usize,
        #[arg(long, default_value_t = 32)]
        d_in: usize,
        #[arg(long, default_value_t = 16)]
        d_out: usize,
        #[arg(long, default_value_t = 200)]
        train_images: usize,
        #[arg(long, default_value_t = 100)]
        eval_images: usize,
    },
    /// Train a region head.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        binary: bool,
    },
    /// Score evaluation proposals with a trained head.
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        head: PathBuf,
        /// Proposals, one image per line.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Second head for two-head ensembling.
        #[arg(long)]
        head_b: Option<PathBuf>,
    },
    /// Weighted geometric-mean ensemble of two detection files.
    Ensemble {
        #[arg(long, default_value_t = DEFAULT_LAMBDA)]
        lambda: f64,
        /// Base category ids, whitespace or comma separated.
        #[arg(long)]
        base_ids: PathBuf,
        #[arg(long)]
        dets_a: PathBuf,
        #[arg(long)]
        dets_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Joint category x attribute probabilities per region.
    ExpandVocab {
        /// Classifier bundle over categories.
        #[arg(long)]
        classifier: PathBuf,
        /// Classifier bundle over attributes.
        #[arg(long)]
        attributes: PathBuf,
        /// Region embeddings.
        #[arg(long)]
        regions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// AP/AR report for a detections file.
    Eval {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value = "100,300,1000")]
        ar_ks: String,
        /// Proposals for AR@k; detections are used when absent.
        #[arg(long)]
        proposals: Option<PathBuf>,
        #[arg(long, default_value_t = 300)]
        max_detections: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compose, train, infer, ensemble, finalize and evaluate from one config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

fn encoding(binary: bool) -> Encoding {
    if binary {
        Encoding::Binary
    } else {
        Encoding::Text
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| VildError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| VildError::io(path, e))
}

fn load_inputs(cfg: &RunConfig) -> Result<(vild::vocab::Vocabulary, EmbeddingFile)> {
    let vocab = io::read_vocab(&cfg.require("vocab", &cfg.vocab)?)?;
    let text = EmbeddingFile::read(&cfg.require("text_embeddings", &cfg.text_embeddings)?)?;
    Ok((vocab, text))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::ComposeText { prompts, render, out, binary } => {
            if let Some(vocab_path) = render {
                let vocab = io::read_vocab(&vocab_path)?;
                let mut text = String::new();
                for c in vocab.categories() {
                    for (k, p) in render_prompts(&c.name, &c.synonyms).iter().enumerate() {
                        text.push_str(&format!("{}/{k}\t{p}\n", c.id));
                    }
                }
                return write_text(&out, &text);
            }
            let prompts = EmbeddingFile::read(&prompts.expect("clap enforces --prompts"))?;
            pipeline::compose_text_file(&prompts)?.write(&out, encoding(binary))
        }
        Command::ComposeCrops { crops_1x, crops_1_5x, out, binary } => {
            let a = EmbeddingFile::read(&crops_1x)?;
            let b = EmbeddingFile::read(&crops_1_5x)?;
            pipeline::compose_crops_file(&a, &b)?.write(&out, encoding(binary))
        }
        Command::GenSynthetic {
            out_dir,
            seed,
            base,
            novel,
            d_in,
            d_out,
            train_images,
            eval_images,
        } => {
            let cfg = SyntheticConfig {
                seed,
                base_categories: base,
                novel_categories: novel,
                d_in,
                d_out,
                train_images,
                eval_images,
                ..Default::default()
            };
            let bench = gen_synthetic_benchmark(&cfg)?;
            io::write_vocab(&out_dir.join("vocab.jsonl"), &bench.vocab)?;
            let mut prompts = EmbeddingFile::new(d_out);
            for (c, per_prompt) in bench.vocab.categories().iter().zip(&bench.prompt_embeddings) {
                for (k, e) in per_prompt.iter().enumerate() {
                    prompts.push(format!("{}/{k}", c.id), e.values().to_vec())?;
                }
            }
            prompts.write(&out_dir.join("prompt_embeddings.txt"), Encoding::Text)?;
            io::write_training_data(&out_dir.join("train.jsonl"), &bench.train)?;
            io::write_proposals(&out_dir.join("eval.jsonl"), &bench.eval)?;
            io::write_ground_truth(&out_dir.join("gt.jsonl"), &bench.ground_truth())?;
            let run_cfg = format!(
                "vocab=vocab.jsonl\nprompt_embeddings=prompt_embeddings.txt\n\
                 text_embeddings=text_embeddings.txt\ntrain_data=train.jsonl\neval_data=eval.jsonl\n\
                 gt=gt.jsonl\nhead=head.txt\ndets=dets.jsonl\nreport=report.json\nseed={seed}\n"
            );
            write_text(&out_dir.join("run.cfg"), &run_cfg)
        }
        Command::Train { config, data, out, binary } => {
            let cfg = RunConfig::load(&config)?;
            let (vocab, text) = load_inputs(&cfg)?;
            let samples = io::read_training_data(&data)?;
            let clf = pipeline::base_classifier(&vocab, &text, cfg.tau)?;
            let result = train(&samples, &clf, &cfg.train_config())?;
            if let (Some(first), Some(last)) = (result.losses.first(), result.losses.last()) {
                eprintln!("loss {first:.6} -> {last:.6} over {} steps", result.losses.len());
            }
            io::head_to_file(&result.head).write(&out, encoding(binary))
        }
        Command::Infer { config, head, data, out, head_b } => {
            let cfg = RunConfig::load(&config)?;
            let (vocab, text) = load_inputs(&cfg)?;
            let head = io::head_from_file(&EmbeddingFile::read(&head)?)?;
            let clf = pipeline::inference_classifier(
                &vocab,
                &text,
                cfg.inference_vocab,
                head.background.clone(),
                cfg.tau,
            )?;
            let images = io::read_proposals(&data)?;
            let ens_cfg = EnsembleConfig::new(cfg.lambda, vocab.base_ids())?;
            let head_b = head_b
                .map(|p| io::head_from_file(&EmbeddingFile::read(&p)?))
                .transpose()?;
            let second = head_b.as_ref().map(|h| EnsembleHead { head: h, config: &ens_cfg });
            let dets = pipeline::infer(&head, &clf, second.as_ref(), &images, &InferOptions::from_config(&cfg))?;
            io::write_detections(&out, &dets)
        }
        Command::Ensemble { lambda, base_ids, dets_a, dets_b, out } => {
            let cfg = EnsembleConfig::new(lambda, io::read_id_list(&base_ids)?)?;
            let a = io::read_detections(&dets_a)?;
            let b = io::read_detections(&dets_b)?;
            io::write_detections(&out, &ensemble_detections(&a, &b, &cfg)?)
        }
        Command::ExpandVocab { classifier, attributes, regions, out } => {
            let clf = io::classifier_from_bundle(&EmbeddingFile::read(&classifier)?)?;
            let attr = io::classifier_from_bundle(&EmbeddingFile::read(&attributes)?)?;
            let regions = EmbeddingFile::read(&regions)?;
            let mut lines = Vec::with_capacity(regions.records.len());
            for (id, e) in &regions.records {
                let matrix = vild::classifier::expand_vocabulary(&clf, &attr, e)?;
                let rounded: Vec<Vec<f64>> = matrix
                    .into_iter()
                    .map(|row| row.into_iter().map(io::round_sig).collect())
                    .collect();
                lines.push(serde_json::json!({
                    "region": id,
                    "categories": clf.category_ids(),
                    "attributes": attr.category_ids(),
                    "probs": rounded,
                }));
            }
            io::write_jsonl(&out, &lines)
        }
        Command::Eval { dets, gt, vocab, ar_ks, proposals, max_detections, out } => {
            let ks = parse_ar_ks(&ar_ks).map_err(VildError::InvalidArgument)?;
            let vocab = io::read_vocab(&vocab)?;
            let dets = io::read_detections(&dets)?;
            let gts = io::read_ground_truth(&gt)?;
            let boxes = proposals
                .map(|p| io::read_proposals(&p).map(|imgs| io::scored_boxes(&imgs)))
                .transpose()?;
            let report = evaluate(&dets, &gts, &vocab, max_detections, boxes.as_deref(), &ks)?;
            print!("{}", report.to_table());
            match out {
                Some(p) => pipeline::write_report(&p, &report),
                None => {
                    println!("{}", report.to_json());
                    Ok(())
                }
            }
        }
        Command::Run { config } => {
            let cfg = RunConfig::load(&config)?;
            let out = pipeline::run_pipeline(&cfg)?;
            print!("{}", out.report.to_table());
            Ok(())
        }
    }
}

fn init_threads() -> Result<()> {
    let Ok(value) = std::env::var("VILD_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| VildError::invalid(format!("VILD_THREADS must be a positive integer, got '{value}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| VildError::invalid(format!("cannot size thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|()| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
