//! Full-batch few-shot training with best-epoch selection, and inference.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::linalg::{Matrix, Scalar};
use super::model::{
    argmax_labels, backward, cross_entropy_masked, forward_cached, mlp_forward, transform_features, ModelKind,
    ModelSpec, Params,
};
use super::optim::{optimizer_step, AdamState, AdamW};
use crate::dataset::LabelValue;
use crate::error::{Error, Result};
use crate::graph::SimilarityGraph;
use crate::metrics::{accuracy, mean_present_recall};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::Single => "single",
            Precision::Double => "double",
        }
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Precision::Single),
            "double" => Ok(Precision::Double),
            other => Err(Error::Parse(format!("unknown precision `{other}`"))),
        }
    }
}

/// Score used to pick the best epoch on the validation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationMetric {
    #[default]
    BalancedAccuracy,
    Accuracy,
}

impl FromStr for ValidationMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balanced_accuracy" => Ok(ValidationMetric::BalancedAccuracy),
            "accuracy" => Ok(ValidationMetric::Accuracy),
            other => Err(Error::Parse(format!("unknown validation metric `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub precision: Precision,
    pub metric: ValidationMetric,
}

pub const GRAPH_LR: f64 = 1e-5;
pub const MLPC_LR: f64 = 1e-3;
pub const WEIGHT_DECAY: f64 = 1e-3;
pub const EPOCHS: usize = 1000;

impl TrainConfig {
    pub fn for_kind(kind: ModelKind) -> Self {
        let lr = match kind {
            ModelKind::Mlpc => MLPC_LR,
            ModelKind::NgcnLin | ModelKind::NsageLin => GRAPH_LR,
        };
        Self {
            lr,
            weight_decay: WEIGHT_DECAY,
            epochs: EPOCHS,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            precision: Precision::Single,
            metric: ValidationMetric::BalancedAccuracy,
        }
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.epochs == 0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "need lr > 0, epochs >= 1, weight_decay >= 0 (got {}, {}, {})",
                self.lr, self.epochs, self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub loss: f64,
    pub val_score: f64,
}

/// Parameters of the best validation epoch. Epoch `e` of the log scores the
/// parameters after `e` optimizer updates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub precision: Precision,
    pub params: Params<f64>,
    pub best_epoch: usize,
    pub epoch_log: Vec<EpochRecord>,
}

impl TrainedModel {
    pub fn best_val_score(&self) -> f64 {
        self.epoch_log[self.best_epoch].val_score
    }

    /// Logits over every row of `x`; graph models need the inference graph.
    pub fn logits(&self, graph: Option<&SimilarityGraph>, x: &Matrix<f64>) -> Result<Matrix<f64>> {
        if x.cols() != self.spec.input_dim {
            return Err(Error::Dimension(format!(
                "model expects {} features, got {}",
                self.spec.input_dim,
                x.cols()
            )));
        }
        if let Some(g) = graph {
            if g.n() != x.rows() {
                return Err(Error::Dimension(format!("graph has {} nodes, features {} rows", g.n(), x.rows())));
            }
        }
        let features = transform_features(self.spec.kind, graph, x)?;
        match self.precision {
            Precision::Single => Ok(mlp_forward(&features.cast::<f32>(), &self.params.cast())?.cast()),
            Precision::Double => mlp_forward(&features, &self.params),
        }
    }
}

/// Argmax per row, ties to irrelevant.
pub fn predict(model: &TrainedModel, graph: Option<&SimilarityGraph>, x: &Matrix<f64>) -> Result<Vec<LabelValue>> {
    Ok(argmax_labels(&model.logits(graph, x)?))
}

/// Trains on `train_mask` rows and keeps the epoch with the best score on
/// `val_mask` rows (ties go to the earlier epoch). Graph kinds need `graph`
/// over the same rows as `x`.
pub fn train_node_classifier(
    graph: Option<&SimilarityGraph>,
    x: &Matrix<f64>,
    labels: &[LabelValue],
    train_mask: &[bool],
    val_mask: &[bool],
    spec: &ModelSpec,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    spec.validate()?;
    config.validate()?;
    let n = x.rows();
    if spec.input_dim != x.cols() {
        return Err(Error::Dimension(format!("spec input {} vs features {}", spec.input_dim, x.cols())));
    }
    if labels.len() != n || train_mask.len() != n || val_mask.len() != n {
        return Err(Error::Dimension(format!(
            "{n} rows, {} labels, masks {} and {}",
            labels.len(),
            train_mask.len(),
            val_mask.len()
        )));
    }
    if let Some(g) = graph {
        if g.n() != n {
            return Err(Error::Dimension(format!("graph has {} nodes, features {n} rows", g.n())));
        }
    }
    if train_mask.iter().zip(val_mask).any(|(&t, &v)| t && v) {
        return Err(Error::InvalidParameter("train and validation masks overlap".into()));
    }
    let labeled = |mask: &[bool]| (0..n).any(|i| mask[i] && labels[i].is_known());
    if !labeled(train_mask) {
        return Err(Error::EmptyMask("training mask has no labeled node"));
    }
    if !labeled(val_mask) {
        return Err(Error::EmptyMask("validation mask has no labeled node"));
    }

    // Transforms are fixed, so only the masked rows take part in training.
    let features = transform_features(spec.kind, graph, x)?;
    let rows: Vec<usize> = (0..n).filter(|&i| train_mask[i] || val_mask[i]).collect();
    let sub = Subset {
        x: features.select_rows(&rows),
        labels: rows.iter().map(|&i| labels[i]).collect(),
        train: rows.iter().map(|&i| train_mask[i]).collect(),
        val_rows: rows.iter().enumerate().filter(|(_, &i)| val_mask[i]).map(|(k, _)| k).collect(),
    };
    let (params, best_epoch, epoch_log) = match config.precision {
        Precision::Single => train_loop::<f32>(&sub, spec, config)?,
        Precision::Double => train_loop::<f64>(&sub, spec, config)?,
    };
    Ok(TrainedModel {
        spec: spec.clone(),
        precision: config.precision,
        params,
        best_epoch,
        epoch_log,
    })
}

struct Subset {
    x: Matrix<f64>,
    labels: Vec<LabelValue>,
    train: Vec<bool>,
    val_rows: Vec<usize>,
}

type LoopOutput = (Params<f64>, usize, Vec<EpochRecord>);

fn train_loop<T: Scalar>(sub: &Subset, spec: &ModelSpec, config: &TrainConfig) -> Result<LoopOutput> {
    let x: Matrix<T> = sub.x.cast();
    let mut params = Params::<f64>::init(spec, config.seed).cast::<T>();
    let mut state = AdamState::new(&params.tensors());
    let opt = config.optimizer();
    let val_labels: Vec<LabelValue> = sub.val_rows.iter().map(|&k| sub.labels[k]).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Params<f64>)> = None;

    for epoch in 0..config.epochs {
        let (logits, cache) = forward_cached(x.clone(), &params)?;
        let (loss, dlogits) = cross_entropy_masked(&logits, &sub.labels, &sub.train)?;
        if !loss.is_finite() || !logits.is_finite() {
            return Err(Error::NanLoss(epoch));
        }
        let preds = argmax_labels(&logits.select_rows(&sub.val_rows));
        let val_score = match config.metric {
            ValidationMetric::BalancedAccuracy => mean_present_recall(&preds, &val_labels)?,
            ValidationMetric::Accuracy => accuracy(&preds, &val_labels)?,
        };
        log.push(EpochRecord { loss, val_score });
        if best.as_ref().is_none_or(|(s, _, _)| val_score > *s) {
            best = Some((val_score, epoch, params.cast()));
        }
        let grads = backward(&params, &cache, dlogits)?;
        optimizer_step(&mut params.tensors_mut(), &grads.tensors(), &mut state, &opt);
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    Ok((best_params, best_epoch, log))
}
