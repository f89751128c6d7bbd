//! Manifest and embedding loading, annotation aggregation, and id alignment.
//!
//! The manifest is JSON Lines: one flat object per line with the keys of
//! [`SampleRecord`]. Embeddings use the little-endian `EVB1` container:
//!
//! ```text
//! "EVB1" | u32 version=1 | u64 n | u64 d | n*d f32 (row-major) | n * (u16 len, utf-8 id)
//! ```

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EVB_MAGIC: &[u8; 4] = b"EVB1";
pub const EVB_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelValue {
    Relevant,
    Irrelevant,
    Unknown,
}

impl LabelValue {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelValue::Relevant => "relevant",
            LabelValue::Irrelevant => "irrelevant",
            LabelValue::Unknown => "unknown",
        }
    }

    pub fn is_known(self) -> bool {
        self != LabelValue::Unknown
    }

    /// Column in two-class score matrices: relevant = 0, irrelevant = 1.
    pub fn class_index(self) -> Option<usize> {
        match self {
            LabelValue::Relevant => Some(0),
            LabelValue::Irrelevant => Some(1),
            LabelValue::Unknown => None,
        }
    }

    pub fn from_class_index(class: usize) -> Self {
        if class == 0 {
            LabelValue::Relevant
        } else {
            LabelValue::Irrelevant
        }
    }
}

impl std::fmt::Display for LabelValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LabelValue {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relevant" => Ok(LabelValue::Relevant),
            "irrelevant" => Ok(LabelValue::Irrelevant),
            "unknown" => Ok(LabelValue::Unknown),
            other => Err(Error::Parse(format!("unknown label `{other}`"))),
        }
    }
}

/// One annotator's judgement of one modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationValue {
    RelatedInformative,
    Related,
    Irrelevant,
    NotSure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    #[default]
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub label_text: LabelValue,
    pub label_image: LabelValue,
    pub label_tweet: LabelValue,
    #[serde(default)]
    pub split: Split,
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    text: Option<String>,
    #[serde(default)]
    image: Option<String>,
    #[serde(default)]
    label_text: Option<LabelValue>,
    #[serde(default)]
    label_image: Option<LabelValue>,
    #[serde(default)]
    label_tweet: Option<LabelValue>,
    #[serde(default)]
    split: Option<Split>,
}

/// Majority rule over three annotators: relevant iff at least two votes fall
/// in the related family.
pub fn aggregate_annotations(votes: [AnnotationValue; 3]) -> LabelValue {
    let related = votes
        .iter()
        .filter(|v| matches!(v, AnnotationValue::RelatedInformative | AnnotationValue::Related))
        .count();
    if related >= 2 {
        LabelValue::Relevant
    } else {
        LabelValue::Irrelevant
    }
}

/// A tweet is relevant if either modality is.
pub fn derive_tweet_relevance(text: LabelValue, image: LabelValue) -> LabelValue {
    use LabelValue::*;
    match (text, image) {
        (Relevant, _) | (_, Relevant) => Relevant,
        (Irrelevant, Irrelevant) => Irrelevant,
        _ => Unknown,
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<SampleRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let raw: RawRecord =
            serde_json::from_str(&line).map_err(|e| err(format!("malformed record: {e}")))?;
        let id = raw.id.ok_or_else(|| err("missing required field `id`".into()))?;
        if id.is_empty() {
            return Err(err("empty id".into()));
        }
        let text = raw
            .text
            .ok_or_else(|| err("missing required field `text`".into()))?;
        if let Some(first) = seen.get(&id) {
            return Err(err(format!("duplicate id `{id}` (first seen on line {first})")));
        }
        seen.insert(id.clone(), lineno);

        let label_text = raw.label_text.unwrap_or(LabelValue::Unknown);
        let label_image = raw.label_image.unwrap_or(LabelValue::Unknown);
        let derived = derive_tweet_relevance(label_text, label_image);
        let label_tweet = raw.label_tweet.unwrap_or(derived);
        if label_text.is_known() && label_image.is_known() && label_tweet != derived {
            return Err(err(format!(
                "label_tweet `{label_tweet}` contradicts modality labels ({label_text}, {label_image})"
            )));
        }
        records.push(SampleRecord {
            id,
            text,
            image: raw.image,
            label_text,
            label_image,
            label_tweet,
            split: raw.split.unwrap_or_default(),
        });
    }
    Ok(records)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[SampleRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Row-major `n x d` single-precision matrix with one id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    dim: usize,
    values: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, dim: usize, values: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Dimension("embedding dimension must be positive".into()));
        }
        if values.len() != ids.len() * dim {
            return Err(Error::Dimension(format!(
                "{} values for {} rows of dimension {dim}",
                values.len(),
                ids.len()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        for (row, chunk) in values.chunks(dim).enumerate() {
            if chunk.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row });
            }
        }
        Ok(Self { ids, dim, values })
    }

    pub fn from_rows(ids: Vec<String>, rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(ids, dim, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks(self.dim)
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    }

    /// New matrix holding the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> EmbeddingMatrix {
        let mut values = Vec::with_capacity(rows.len() * self.dim);
        let mut ids = Vec::with_capacity(rows.len());
        for &r in rows {
            values.extend_from_slice(self.row(r));
            ids.push(self.ids[r].clone());
        }
        EmbeddingMatrix {
            ids,
            dim: self.dim,
            values,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.values.len() * 4);
        out.extend_from_slice(EVB_MAGIC);
        out.extend_from_slice(&EVB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != EVB_MAGIC {
            return Err(Error::Embedding("bad magic (expected EVB1)".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != EVB_VERSION {
            return Err(Error::Embedding(format!("unsupported version {version}")));
        }
        let n = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
        let d = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
        if d == 0 {
            return Err(Error::Embedding("dimension 0".into()));
        }
        let payload = n
            .checked_mul(d)
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| Error::Embedding("header overflows".into()))?;
        if cur.remaining() < payload {
            return Err(Error::Embedding(format!(
                "truncated payload: header declares {n}x{d} values ({payload} bytes), {} bytes present",
                cur.remaining()
            )));
        }
        let raw = cur.take(payload)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        for (row, chunk) in values.chunks(d).enumerate() {
            if chunk.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row });
            }
        }
        let mut ids = Vec::with_capacity(n);
        let mut seen = HashSet::with_capacity(n);
        for i in 0..n {
            let len = u16::from_le_bytes(
                cur.take(2)
                    .map_err(|_| Error::Embedding(format!("truncated id section at id {i}")))?
                    .try_into()
                    .unwrap(),
            ) as usize;
            let raw = cur
                .take(len)
                .map_err(|_| Error::Embedding(format!("truncated id section at id {i}")))?;
            let id = std::str::from_utf8(raw)
                .map_err(|_| Error::Embedding(format!("id {i} is not utf-8")))?
                .to_string();
            if !seen.insert(id.clone()) {
                return Err(Error::DuplicateId(id));
            }
            ids.push(id);
        }
        if cur.remaining() != 0 {
            return Err(Error::Embedding(format!(
                "{} trailing bytes after id section",
                cur.remaining()
            )));
        }
        Ok(Self {
            ids,
            dim: d,
            values,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.remaining() < len {
            return Err(Error::Embedding("truncated header".into()));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingMatrix::from_bytes(&bytes)
}

pub fn write_embeddings(path: impl AsRef<Path>, m: &EmbeddingMatrix) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&m.to_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct AlignedDataset {
    pub records: Vec<SampleRecord>,
    pub embeddings: EmbeddingMatrix,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AlignReport {
    pub dropped_from_manifest: usize,
    pub dropped_from_embeddings: usize,
}

impl AlignedDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn rows_in_split(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn tweet_labels(&self) -> Vec<LabelValue> {
        self.records.iter().map(|r| r.label_tweet).collect()
    }
}

/// Restricts both inputs to their shared ids, in manifest order.
pub fn align(
    records: Vec<SampleRecord>,
    embeddings: &EmbeddingMatrix,
) -> Result<(AlignedDataset, AlignReport)> {
    let emb_index = embeddings.index();
    let manifest_total = records.len();
    let kept: Vec<(SampleRecord, usize)> = records
        .into_iter()
        .filter_map(|r| emb_index.get(r.id.as_str()).map(|&row| (r, row)))
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyIntersection);
    }
    let rows: Vec<usize> = kept.iter().map(|(_, row)| *row).collect();
    let report = AlignReport {
        dropped_from_manifest: manifest_total - kept.len(),
        dropped_from_embeddings: embeddings.len() - kept.len(),
    };
    let records: Vec<SampleRecord> = kept.into_iter().map(|(r, _)| r).collect();
    Ok((AlignedDataset::new(records, embeddings.select_rows(&rows))?, report))
}

impl AlignedDataset {
    /// Pairs records with an embedding matrix already in the same row order.
    pub fn new(records: Vec<SampleRecord>, embeddings: EmbeddingMatrix) -> Result<Self> {
        if records.len() != embeddings.len() {
            return Err(Error::Misaligned(format!(
                "{} records vs {} embedding rows",
                records.len(),
                embeddings.len()
            )));
        }
        for (r, id) in records.iter().zip(embeddings.ids()) {
            if &r.id != id {
                return Err(Error::Misaligned(format!("record `{}` vs row `{id}`", r.id)));
            }
        }
        let index = records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.clone(), i))
            .collect();
        Ok(Self {
            records,
            embeddings,
            index,
        })
    }
}
