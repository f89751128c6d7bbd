//! Multi-modal fusion and cosine similarity.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::EmbeddingMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    TextOnly,
    ImageOnly,
    Concat,
    Add,
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::TextOnly => "text_only",
            FusionMode::ImageOnly => "image_only",
            FusionMode::Concat => "concat",
            FusionMode::Add => "add",
        }
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text_only" => Ok(FusionMode::TextOnly),
            "image_only" => Ok(FusionMode::ImageOnly),
            "concat" => Ok(FusionMode::Concat),
            "add" => Ok(FusionMode::Add),
            other => Err(Error::Parse(format!("unknown fusion mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

pub fn l2_normalize(v: &[f32]) -> Result<Vec<f32>> {
    let n = norm(v);
    if n == 0.0 {
        return Err(Error::ZeroVector(0));
    }
    Ok(v.iter().map(|&x| (x as f64 / n) as f32).collect())
}

/// Fuses two modality matrices keyed by the text matrix's ids.
///
/// Image rows may be missing for text-only samples: `concat` fills a zero
/// block and `add` keeps the normalized text row. Both modalities are
/// L2-normalized row-wise before `concat` and `add`.
pub fn fuse(
    text: &EmbeddingMatrix,
    image: Option<&EmbeddingMatrix>,
    mode: FusionMode,
) -> Result<EmbeddingMatrix> {
    if mode == FusionMode::TextOnly {
        return Ok(text.clone());
    }
    let image = image.ok_or_else(|| Error::Misaligned(format!("{mode} fusion needs image embeddings")))?;
    let text_index = text.index();
    if let Some(stray) = image.ids().iter().find(|id| !text_index.contains_key(id.as_str())) {
        return Err(Error::Misaligned(format!("image id `{stray}` has no text row")));
    }
    let image_index = image.index();
    let image_row = |i: usize| image_index.get(text.ids()[i].as_str()).copied();

    let (dim, values) = match mode {
        FusionMode::TextOnly => unreachable!(),
        FusionMode::ImageOnly => {
            let mut values = Vec::with_capacity(text.len() * image.dim());
            for i in 0..text.len() {
                let r = image_row(i).ok_or_else(|| {
                    Error::Misaligned(format!("`{}` has no image row", text.ids()[i]))
                })?;
                values.extend_from_slice(image.row(r));
            }
            (image.dim(), values)
        }
        FusionMode::Concat => {
            let dim = text.dim() + image.dim();
            let mut values = Vec::with_capacity(text.len() * dim);
            for i in 0..text.len() {
                values.extend(l2_normalize(text.row(i)).map_err(|_| Error::ZeroVector(i))?);
                match image_row(i) {
                    Some(r) => values
                        .extend(l2_normalize(image.row(r)).map_err(|_| Error::ZeroVector(i))?),
                    None => values.extend(std::iter::repeat_n(0.0, image.dim())),
                }
            }
            (dim, values)
        }
        FusionMode::Add => {
            if text.dim() != image.dim() {
                return Err(Error::Dimension(format!(
                    "add fusion needs equal dimensions, got {} and {}",
                    text.dim(),
                    image.dim()
                )));
            }
            let mut values = Vec::with_capacity(text.len() * text.dim());
            for i in 0..text.len() {
                let t = l2_normalize(text.row(i)).map_err(|_| Error::ZeroVector(i))?;
                match image_row(i) {
                    Some(r) => {
                        let im = l2_normalize(image.row(r)).map_err(|_| Error::ZeroVector(i))?;
                        values.extend(t.iter().zip(&im).map(|(a, b)| a + b));
                    }
                    None => values.extend(t),
                }
            }
            (text.dim(), values)
        }
    };
    EmbeddingMatrix::new(text.ids().to_vec(), dim, values)
}

pub fn cosine_similarity(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Dimension(format!("{} vs {}", u.len(), v.len())));
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 {
        return Err(Error::ZeroVector(0));
    }
    if nv == 0.0 {
        return Err(Error::ZeroVector(1));
    }
    let dot: f64 = u.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Dense symmetric cosine-similarity matrix in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_dense(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::Dimension(format!("{} values for {n}x{n}", values.len())));
        }
        Ok(Self { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }
}

/// Rows normalized once in f64; upper triangle computed, lower mirrored.
pub fn similarity_matrix(m: &EmbeddingMatrix) -> Result<SimilarityMatrix> {
    let n = m.len();
    let d = m.dim();
    let mut unit = vec![0f64; n * d];
    for (i, row) in m.rows().enumerate() {
        let nr = norm(row);
        if nr == 0.0 {
            return Err(Error::ZeroVector(i));
        }
        for (o, &x) in unit[i * d..(i + 1) * d].iter_mut().zip(row) {
            *o = x as f64 / nr;
        }
    }
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ui = &unit[i * d..(i + 1) * d];
            (i..n)
                .map(|j| {
                    if i == j {
                        return 1.0;
                    }
                    let uj = &unit[j * d..(j + 1) * d];
                    let dot: f64 = ui.iter().zip(uj).map(|(a, b)| a * b).sum();
                    dot.clamp(-1.0, 1.0)
                })
                .collect()
        })
        .collect();
    let mut values = vec![0f64; n * n];
    for (i, row) in upper.iter().enumerate() {
        for (off, &s) in row.iter().enumerate() {
            let j = i + off;
            values[i * n + j] = s;
            values[j * n + i] = s;
        }
    }
    Ok(SimilarityMatrix { n, values })
}
