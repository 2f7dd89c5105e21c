//! File formats.
//!
//! Embedding files come in two encodings. Text:
//!
//! ```text
//! [tau=<float>]            optional, classifier bundles only
//! dim=<D> count=<N>
//! <id>\t<f>,<f>,...        N records
//! ```
//!
//! Binary: magic `VLDE`, little-endian `u32` dim and count, then
//! `count * dim` little-endian `f32`. Binary records carry no ids; they are
//! named by position (`"0"`, `"1"`, ...). Readers detect the encoding from
//! the magic bytes.
//!
//! Everything else is line-delimited JSON. Floats in text formats are
//! written with 9 significant digits.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize, Serializer};

use crate::classifier::TextClassifier;
use crate::detection::{BBox, Detection, ImageId, Proposal};
use crate::embedding::{check_dims, l2_normalize, Embedding};
use crate::error::{Result, VildError};
use crate::eval::{GroundTruth, ScoredBox};
use crate::training::synthetic::EvalImage;
use crate::training::{OfflineProposal, OnlineProposal, RegionHead, TrainingSample};
use crate::vocab::{Category, CategoryId, Vocabulary};

pub const BINARY_MAGIC: &[u8; 4] = b"VLDE";
pub const BACKGROUND_KEY: &str = "__background__";
pub const BIAS_KEY: &str = "b";

/// Rounds to 9 significant digits.
pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

fn fmt_sig(x: f64) -> String {
    format!("{:?}", round_sig(x))
}

pub(crate) fn ser_sig<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(round_sig(*x))
}

pub(crate) fn ser_sig_vec<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|x| round_sig(*x)))
}

pub(crate) fn ser_sig_box<S: Serializer>(b: &BBox, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq([b.x1, b.y1, b.x2, b.y2].map(round_sig))
}

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| VildError::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| VildError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| VildError::io(path, e))
}

/// Named embedding records of one dimension, in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub tau: Option<f64>,
    pub records: Vec<(String, Vec<f64>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Text,
    Binary,
}

impl EmbeddingFile {
    pub fn new(dim: usize) -> Self {
        EmbeddingFile {
            dim,
            tau: None,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, id: impl Into<String>, values: Vec<f64>) -> Result<()> {
        check_dims(self.dim, values.len())?;
        self.records.push((id.into(), values));
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.records
            .iter()
            .find(|(k, _)| k == id)
            .map(|(_, v)| v.as_slice())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(tau) = self.tau {
            out.push_str(&format!("tau={}\n", fmt_sig(tau)));
        }
        out.push_str(&format!("dim={} count={}\n", self.dim, self.records.len()));
        for (id, values) in &self.records {
            let joined: Vec<String> = values.iter().map(|v| fmt_sig(*v)).collect();
            out.push_str(&format!("{id}\t{}\n", joined.join(",")));
        }
        out
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.dim * self.records.len());
        out.extend_from_slice(BINARY_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (_, values) in &self.records {
            for v in values {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn parse(bytes: &[u8], origin: &str) -> Result<Self> {
        if bytes.starts_with(BINARY_MAGIC) {
            Self::parse_binary(bytes, origin)
        } else {
            let text = std::str::from_utf8(bytes)
                .map_err(|_| VildError::format(origin, 1, "not UTF-8 text and no VLDE magic"))?;
            Self::parse_text(text, origin)
        }
    }

    fn parse_binary(bytes: &[u8], origin: &str) -> Result<Self> {
        let err = |msg: &str| VildError::format(origin, 0, msg);
        if bytes.len() < 12 {
            return Err(err("binary header truncated"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
        let (dim, count) = (word(4), word(8));
        if dim == 0 && count > 0 {
            return Err(err("zero dimension"));
        }
        let body = &bytes[12..];
        if body.len() != 4 * dim * count {
            return Err(err(&format!(
                "expected {} payload bytes for dim={dim} count={count}, found {}",
                4 * dim * count,
                body.len()
            )));
        }
        let mut file = EmbeddingFile::new(dim);
        for (i, chunk) in body.chunks_exact(4 * dim.max(1)).take(count).enumerate() {
            let values: Vec<f64> = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(err(&format!("record {i} has a non-finite value")));
            }
            file.records.push((i.to_string(), values));
        }
        Ok(file)
    }

    fn parse_text(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
            .filter(|(_, l)| !l.trim().is_empty());
        let err = |line: usize, msg: String| VildError::format(origin, line, msg);

        let (mut n, mut header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
        let mut tau = None;
        if let Some(v) = header.strip_prefix("tau=") {
            let t: f64 = v
                .trim()
                .parse()
                .map_err(|_| err(n, format!("bad tau value '{v}'")))?;
            if !(t > 0.0 && t.is_finite()) {
                return Err(err(n, format!("tau must be > 0, got {t}")));
            }
            tau = Some(t);
            (n, header) = lines
                .next()
                .ok_or_else(|| err(n, "missing dim/count header".into()))?;
        }
        let (dim, count) = parse_header(header).ok_or_else(|| {
            err(n, format!("expected 'dim=<D> count=<N>', found '{header}'"))
        })?;

        let mut file = EmbeddingFile {
            dim,
            tau,
            records: Vec::with_capacity(count),
        };
        for (n, line) in lines {
            let (id, rest) = line
                .split_once('\t')
                .ok_or_else(|| err(n, "record needs '<id>\\t<values>'".into()))?;
            let values = rest
                .split(',')
                .map(|s| {
                    let v: f64 = s.trim().parse().map_err(|_| err(n, format!("bad number '{s}'")))?;
                    if v.is_finite() {
                        Ok(v)
                    } else {
                        Err(err(n, format!("non-finite value '{s}'")))
                    }
                })
                .collect::<Result<Vec<f64>>>()?;
            if values.len() != dim {
                return Err(err(
                    n,
                    format!("record '{id}' has {} values, header says dim={dim}", values.len()),
                ));
            }
            file.records.push((id.to_string(), values));
        }
        if file.records.len() != count {
            return Err(err(
                n,
                format!("header says count={count}, found {} records", file.records.len()),
            ));
        }
        Ok(file)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&read_bytes(path)?, &path_str(path))
    }

    pub fn write(&self, path: &Path, encoding: Encoding) -> Result<()> {
        match encoding {
            Encoding::Text => write_bytes(path, self.to_text().as_bytes()),
            Encoding::Binary => {
                if self.tau.is_some() {
                    return Err(VildError::invalid("binary embedding files cannot carry tau"));
                }
                write_bytes(path, &self.to_binary())
            }
        }
    }

    /// Records as [`Embedding`]s. Norms are not checked here.
    pub fn embeddings(&self) -> Result<Vec<(String, Embedding)>> {
        self.records
            .iter()
            .map(|(id, v)| Ok((id.clone(), Embedding::new(v.clone())?)))
            .collect()
    }
}

fn parse_header(line: &str) -> Option<(usize, usize)> {
    let mut parts = line.split_whitespace();
    let dim = parts.next()?.strip_prefix("dim=")?.parse().ok()?;
    let count = parts.next()?.strip_prefix("count=")?.parse().ok()?;
    parts.next().is_none().then_some((dim, count))
}

/// Text embeddings keyed by category id. Vectors are renormalized on load
/// so that quantized files still satisfy the unit-norm contract.
pub fn text_embeddings_by_id(file: &EmbeddingFile) -> Result<Vec<(CategoryId, Embedding)>> {
    file.records
        .iter()
        .filter(|(id, _)| id != BACKGROUND_KEY)
        .map(|(id, v)| {
            let cid: CategoryId = id
                .parse()
                .map_err(|_| VildError::data(format!("text embedding id '{id}' is not a category id")))?;
            Ok((cid, l2_normalize(v)?))
        })
        .collect()
}

/// Classifier over `ids` from a text-embedding file and a background vector.
pub fn classifier_from_file(
    file: &EmbeddingFile,
    ids: &[CategoryId],
    background: Vec<f64>,
    tau: f64,
) -> Result<TextClassifier> {
    let table = text_embeddings_by_id(file)?;
    TextClassifier::from_lookup(
        ids,
        |id| table.iter().find(|(c, _)| *c == id).map(|(_, e)| e.clone()),
        background,
        tau,
    )
}

/// Classifier bundle: text embeddings keyed by category id, one
/// `__background__` record and a `tau=` header line.
pub fn classifier_to_bundle(clf: &TextClassifier) -> EmbeddingFile {
    let mut file = EmbeddingFile::new(clf.dim());
    file.tau = Some(clf.tau());
    for (id, e) in clf.category_ids().iter().zip(clf.text_embeddings()) {
        file.records.push((id.to_string(), e.values().to_vec()));
    }
    file.records
        .push((BACKGROUND_KEY.to_string(), clf.background().to_vec()));
    file
}

pub fn classifier_from_bundle(file: &EmbeddingFile) -> Result<TextClassifier> {
    let tau = file
        .tau
        .ok_or_else(|| VildError::data("classifier bundle has no tau= header"))?;
    let background = file
        .get(BACKGROUND_KEY)
        .ok_or_else(|| VildError::data("classifier bundle has no __background__ record"))?
        .to_vec();
    let table = text_embeddings_by_id(file)?;
    let ids: Vec<CategoryId> = table.iter().map(|(id, _)| *id).collect();
    let embeddings = table.into_iter().map(|(_, e)| e).collect();
    TextClassifier::new(ids, embeddings, background, tau)
}

/// Region head as an embedding file of dimension `d_out`: one record
/// `W.col.<j>` per input feature, then `b` and `__background__`.
pub fn head_to_file(head: &RegionHead) -> EmbeddingFile {
    let mut file = EmbeddingFile::new(head.d_out());
    for j in 0..head.d_in() {
        let column = (0..head.d_out())
            .map(|i| head.weight[i * head.d_in() + j])
            .collect();
        file.records.push((format!("W.col.{j}"), column));
    }
    file.records.push((BIAS_KEY.to_string(), head.bias.clone()));
    file.records
        .push((BACKGROUND_KEY.to_string(), head.background.clone()));
    file
}

/// Reads a head written by [`head_to_file`]. Binary files are read by
/// position: all rows but the last two are weight columns.
pub fn head_from_file(file: &EmbeddingFile) -> Result<RegionHead> {
    let n = file.records.len();
    if n < 3 {
        return Err(VildError::data("head file needs at least 3 records"));
    }
    let named = file.get(BIAS_KEY).is_some();
    let d_in = n - 2;
    let d_out = file.dim;
    let (columns, bias, background): (Vec<&[f64]>, &[f64], &[f64]) = if named {
        let cols = (0..d_in)
            .map(|j| {
                file.get(&format!("W.col.{j}"))
                    .ok_or_else(|| VildError::data(format!("head file is missing W.col.{j}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let bg = file
            .get(BACKGROUND_KEY)
            .ok_or_else(|| VildError::data("head file is missing __background__"))?;
        (cols, file.get(BIAS_KEY).expect("checked"), bg)
    } else {
        let rows: Vec<&[f64]> = file.records.iter().map(|(_, v)| v.as_slice()).collect();
        (rows[..d_in].to_vec(), rows[d_in], rows[d_in + 1])
    };
    let mut weight = vec![0.0; d_out * d_in];
    for (j, col) in columns.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            weight[i * d_in + j] = *v;
        }
    }
    RegionHead::from_parts(d_in, d_out, weight, bias.to_vec(), background.to_vec())
}

/// Parses one JSON value per non-blank line.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str, origin: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| VildError::format(origin, i + 1, e.to_string())))
        .collect()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| VildError::io(path, e))?;
    let origin = path_str(path);
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| VildError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| VildError::format(&origin, i + 1, e.to_string()))?,
        );
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| VildError::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| VildError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| VildError::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| VildError::io(path, e))?;
    }
    w.flush().map_err(|e| VildError::io(path, e))
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let categories: Vec<Category> = read_jsonl(path)?;
    Vocabulary::new(categories)
}

pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    write_jsonl(path, vocab.categories())
}

/// Whitespace- or comma-separated category ids.
pub fn parse_id_list(text: &str, origin: &str) -> Result<Vec<CategoryId>> {
    text.lines()
        .enumerate()
        .flat_map(|(i, l)| {
            l.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(move |s| (i + 1, s))
        })
        .map(|(n, s)| {
            s.parse()
                .map_err(|_| VildError::format(origin, n, format!("bad category id '{s}'")))
        })
        .collect()
}

pub fn read_id_list(path: &Path) -> Result<Vec<CategoryId>> {
    let text = fs::read_to_string(path).map_err(|e| VildError::io(path, e))?;
    parse_id_list(&text, &path_str(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OnlineRecord {
    #[serde(serialize_with = "ser_sig_vec")]
    feature: Vec<f64>,
    /// Base-classifier index, `-1` for background.
    label: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OfflineRecord {
    #[serde(serialize_with = "ser_sig_vec")]
    feature: Vec<f64>,
    #[serde(serialize_with = "ser_sig_vec")]
    teacher: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    image_id: ImageId,
    #[serde(default)]
    online: Vec<OnlineRecord>,
    #[serde(default)]
    offline: Vec<OfflineRecord>,
}

impl From<&TrainingSample> for TrainingRecord {
    fn from(s: &TrainingSample) -> Self {
        TrainingRecord {
            image_id: s.image_id,
            online: s
                .online
                .iter()
                .map(|p| OnlineRecord {
                    feature: p.feature.clone(),
                    label: p.label.map_or(-1, |l| l as i64),
                })
                .collect(),
            offline: s
                .offline
                .iter()
                .map(|p| OfflineRecord {
                    feature: p.feature.clone(),
                    teacher: p.teacher.values().to_vec(),
                })
                .collect(),
        }
    }
}

impl TryFrom<TrainingRecord> for TrainingSample {
    type Error = VildError;

    fn try_from(r: TrainingRecord) -> Result<Self> {
        let online = r
            .online
            .into_iter()
            .map(|p| {
                let label = match p.label {
                    -1 => None,
                    l if l >= 0 => Some(l as usize),
                    l => return Err(VildError::data(format!("label {l} is neither -1 nor an index"))),
                };
                Ok(OnlineProposal {
                    feature: p.feature,
                    label,
                })
            })
            .collect::<Result<_>>()?;
        let offline = r
            .offline
            .into_iter()
            .map(|p| {
                Ok(OfflineProposal {
                    feature: p.feature,
                    teacher: Embedding::new(p.teacher)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(TrainingSample {
            image_id: r.image_id,
            online,
            offline,
        })
    }
}

pub fn read_training_data(path: &Path) -> Result<Vec<TrainingSample>> {
    let origin = path_str(path);
    read_jsonl::<TrainingRecord>(path)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            TrainingSample::try_from(r).map_err(|e| VildError::format(&origin, i + 1, e.to_string()))
        })
        .collect()
}

pub fn write_training_data(path: &Path, samples: &[TrainingSample]) -> Result<()> {
    let records: Vec<TrainingRecord> = samples.iter().map(TrainingRecord::from).collect();
    write_jsonl(path, &records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ProposalRecord {
    source_id: u32,
    #[serde(rename = "box", serialize_with = "ser_sig_box")]
    bbox: BBox,
    #[serde(serialize_with = "ser_sig")]
    objectness: f64,
    #[serde(serialize_with = "ser_sig_vec")]
    feature: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    teacher: Option<Vec<f64>>,
}

/// One evaluation image's proposals: `{image_id, proposals:[...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalImageRecord {
    image_id: ImageId,
    proposals: Vec<ProposalRecord>,
}

pub fn proposals_to_record(image_id: ImageId, proposals: &[Proposal]) -> ProposalImageRecord {
    ProposalImageRecord {
        image_id,
        proposals: proposals
            .iter()
            .map(|p| ProposalRecord {
                source_id: p.source_id,
                bbox: p.bbox,
                objectness: p.objectness,
                feature: p.feature.clone(),
                teacher: p.teacher.as_ref().map(|t| t.values().to_vec()),
            })
            .collect(),
    }
}

pub fn record_to_proposals(r: ProposalImageRecord) -> Result<(ImageId, Vec<Proposal>)> {
    let image_id = r.image_id;
    let proposals = r
        .proposals
        .into_iter()
        .map(|p| {
            if !(0.0..=1.0).contains(&p.objectness) {
                return Err(VildError::data(format!(
                    "objectness {} outside [0, 1]",
                    p.objectness
                )));
            }
            Ok(Proposal {
                image_id,
                source_id: p.source_id,
                bbox: p.bbox,
                objectness: p.objectness,
                feature: p.feature,
                teacher: p.teacher.map(Embedding::new).transpose()?,
            })
        })
        .collect::<Result<_>>()?;
    Ok((image_id, proposals))
}

pub fn read_proposals(path: &Path) -> Result<Vec<(ImageId, Vec<Proposal>)>> {
    let origin = path_str(path);
    read_jsonl::<ProposalImageRecord>(path)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| record_to_proposals(r).map_err(|e| VildError::format(&origin, i + 1, e.to_string())))
        .collect()
}

pub fn write_proposals(path: &Path, images: &[EvalImage]) -> Result<()> {
    let records: Vec<ProposalImageRecord> = images
        .iter()
        .map(|im| proposals_to_record(im.image_id, &im.proposals))
        .collect();
    write_jsonl(path, &records)
}

/// Proposals as class-agnostic scored boxes for AR@k.
pub fn scored_boxes(images: &[(ImageId, Vec<Proposal>)]) -> Vec<ScoredBox> {
    images
        .iter()
        .flat_map(|(_, ps)| {
            ps.iter().map(|p| ScoredBox {
                image_id: p.image_id,
                bbox: p.bbox,
                objectness: p.objectness,
            })
        })
        .collect()
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    read_jsonl(path)
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    write_jsonl(path, dets)
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruth>> {
    read_jsonl(path)
}

pub fn write_ground_truth(path: &Path, gts: &[GroundTruth]) -> Result<()> {
    write_jsonl(path, gts)
}
