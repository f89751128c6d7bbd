//! Local and global consistency label diffusion over a KNN similarity graph.

use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::LabelValue;
use crate::error::{Error, Result};
use crate::graph::CsrMatrix;

pub const N_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LgcMode {
    #[default]
    Iterative,
    ClosedForm,
}

impl FromStr for LgcMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iterative" => Ok(LgcMode::Iterative),
            "closed_form" => Ok(LgcMode::ClosedForm),
            other => Err(Error::Parse(format!("unknown lgc mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LgcConfig {
    pub alpha: f64,
    pub tol: f64,
    /// The iteration contracts at rate `alpha`; 0.99^5000 ≈ 1.5e-22.
    pub max_iter: usize,
    pub mode: LgcMode,
}

impl Default for LgcConfig {
    fn default() -> Self {
        Self {
            alpha: 0.99,
            tol: 1e-6,
            max_iter: 5000,
            mode: LgcMode::Iterative,
        }
    }
}

impl LgcConfig {
    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::InvalidParameter(format!(
                "alpha must be in [0, 1), got {}",
                self.alpha
            )));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::InvalidParameter(
                "tol must be positive and max_iter at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// `n x 2` one-hot seed matrix; column 0 is relevant, column 1 irrelevant.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    n: usize,
    values: Vec<f64>,
}

impl LabelMatrix {
    /// `labels[i]` is the seed for node `i`; unknown means unlabeled.
    pub fn from_labels(labels: &[LabelValue]) -> Self {
        let mut values = vec![0.0; labels.len() * N_CLASSES];
        for (i, l) in labels.iter().enumerate() {
            if let Some(c) = l.class_index() {
                values[i * N_CLASSES + c] = 1.0;
            }
        }
        Self {
            n: labels.len(),
            values,
        }
    }

    /// Seeds only the listed `(node, label)` pairs.
    pub fn from_seeds(n: usize, seeds: &[(usize, LabelValue)]) -> Result<Self> {
        let mut labels = vec![LabelValue::Unknown; n];
        for &(i, l) in seeds {
            if i >= n {
                return Err(Error::Dimension(format!("seed node {i} out of range for {n} nodes")));
            }
            labels[i] = l;
        }
        Ok(Self::from_labels(&labels))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_labeled(&self) -> usize {
        self.values.chunks(N_CLASSES).filter(|r| r.iter().sum::<f64>() > 0.0).count()
    }
}

/// Row-major `n x 2` propagated scores.
#[derive(Debug, Clone, PartialEq)]
pub struct LgcScores {
    pub n: usize,
    pub values: Vec<f64>,
    /// Iterations performed (0 for the closed form).
    pub iterations: usize,
}

impl LgcScores {
    pub fn row(&self, i: usize) -> [f64; N_CLASSES] {
        [self.values[i * N_CLASSES], self.values[i * N_CLASSES + 1]]
    }

    /// Lines of `id score_relevant score_irrelevant`.
    pub fn to_text(&self, ids: &[String]) -> Result<String> {
        if ids.len() != self.n {
            return Err(Error::Dimension(format!("{} ids for {} score rows", ids.len(), self.n)));
        }
        let mut out = String::new();
        for (i, id) in ids.iter().enumerate() {
            let [r, s] = self.row(i);
            writeln!(out, "{id} {r} {s}").unwrap();
        }
        Ok(out)
    }
}

pub fn lgc_propagate(s: &CsrMatrix, y: &LabelMatrix, config: &LgcConfig) -> Result<LgcScores> {
    config.validate()?;
    if s.n_rows() != y.n || s.n_cols() != y.n {
        return Err(Error::Dimension(format!(
            "operator is {}x{}, label matrix has {} rows",
            s.n_rows(),
            s.n_cols(),
            y.n
        )));
    }
    match config.mode {
        LgcMode::Iterative => iterate(s, &y.values, config),
        LgcMode::ClosedForm => closed_form(s, &y.values, config.alpha),
    }
}

fn iterate(s: &CsrMatrix, y: &[f64], config: &LgcConfig) -> Result<LgcScores> {
    let n = s.n_rows();
    let alpha = config.alpha;
    let mut f = y.to_vec();
    let mut residual = f64::INFINITY;
    for it in 1..=config.max_iter {
        let sf = s.mul_dense(&f, N_CLASSES);
        residual = 0.0;
        for ((fv, sv), yv) in f.iter_mut().zip(&sf).zip(y) {
            let next = alpha * sv + (1.0 - alpha) * yv;
            residual = f64::max(residual, (next - *fv).abs());
            *fv = next;
        }
        if residual < config.tol {
            return Ok(LgcScores {
                n,
                values: f,
                iterations: it,
            });
        }
    }
    Err(Error::NonConvergence {
        what: "lgc",
        iterations: config.max_iter,
        residual,
    })
}

fn closed_form(s: &CsrMatrix, y: &[f64], alpha: f64) -> Result<LgcScores> {
    let n = s.n_rows();
    let mut a = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        for (j, v) in s.row(i) {
            a[(i, j)] -= alpha * v;
        }
    }
    let b = DMatrix::from_row_slice(n, N_CLASSES, y) * (1.0 - alpha);
    let x = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::InvalidParameter("I - alpha*S is singular".into()))?;
    let mut values = Vec::with_capacity(n * N_CLASSES);
    for i in 0..n {
        values.extend((0..N_CLASSES).map(|c| x[(i, c)]));
    }
    Ok(LgcScores {
        n,
        values,
        iterations: 0,
    })
}

/// Row argmax; ties and all-zero rows map to irrelevant.
pub fn lgc_predict(f: &LgcScores) -> Vec<LabelValue> {
    (0..f.n)
        .map(|i| {
            let [r, s] = f.row(i);
            if r > s {
                LabelValue::Relevant
            } else {
                LabelValue::Irrelevant
            }
        })
        .collect()
}
