//! End-to-end few-shot flow over one fused dataset: select representatives
//! from the unlabeled pool, then propagate their labels to every row.
//!
//! The pool is the train split (all rows when the manifest has no split).
//! Evaluation covers the train and test splits together, and the metric is
//! computed on the test rows when they carry known labels.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::community::{leiden, LeidenConfig, Partition};
use crate::dataset::{AlignedDataset, LabelValue, Split};
use crate::error::{Error, Result};
use crate::fusion::similarity_matrix;
use crate::graph::{
    build_epsilon_graph, build_knn_graph, lgc_smoothing_operator, SimilarityGraph, DEFAULT_EPSILON,
    INFERENCE_KNN_K, TRAIN_KNN_K,
};
use crate::metrics::balanced_accuracy;
use crate::neural::{
    predict, train_node_classifier, Matrix, ModelKind, ModelSpec, Precision, TrainConfig, TrainedModel, ValidationMetric,
    EPOCHS, GRAPH_HIDDEN, GRAPH_LR, MLPC_HIDDEN, MLPC_LR, WEIGHT_DECAY,
};
use crate::propagation::{lgc_predict, lgc_propagate, LabelMatrix, LgcConfig};
use crate::selection::{
    select_representatives, split_train_val, CentralityScope, SelectionConfig, SelectionMethod, SelectionResult,
};

/// A propagation model: one of the neural classifiers or label diffusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelChoice {
    Neural(ModelKind),
    Lgc,
}

impl ModelChoice {
    pub const ALL: [ModelChoice; 4] = [
        ModelChoice::Neural(ModelKind::Mlpc),
        ModelChoice::Neural(ModelKind::NgcnLin),
        ModelChoice::Neural(ModelKind::NsageLin),
        ModelChoice::Lgc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelChoice::Neural(k) => k.as_str(),
            ModelChoice::Lgc => "lgc",
        }
    }
}

impl FromStr for ModelChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "lgc" {
            return Ok(ModelChoice::Lgc);
        }
        s.parse().map(ModelChoice::Neural)
    }
}

impl fmt::Display for ModelChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for ModelChoice {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for ModelChoice {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub graph_lr: f64,
    pub mlpc_lr: f64,
    pub weight_decay: f64,
    pub graph_hidden: usize,
    pub mlpc_hidden: Vec<usize>,
    pub precision: Precision,
    pub metric: ValidationMetric,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: EPOCHS,
            graph_lr: GRAPH_LR,
            mlpc_lr: MLPC_LR,
            weight_decay: WEIGHT_DECAY,
            graph_hidden: GRAPH_HIDDEN,
            mlpc_hidden: MLPC_HIDDEN.to_vec(),
            precision: Precision::Single,
            metric: ValidationMetric::BalancedAccuracy,
        }
    }
}

impl TrainSettings {
    pub fn spec(&self, kind: ModelKind, input_dim: usize) -> ModelSpec {
        let hidden = match kind {
            ModelKind::Mlpc => self.mlpc_hidden.clone(),
            _ => vec![self.graph_hidden],
        };
        ModelSpec::new(kind, input_dim).with_hidden(hidden)
    }

    pub fn config(&self, kind: ModelKind, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: match kind {
                ModelKind::Mlpc => self.mlpc_lr,
                _ => self.graph_lr,
            },
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            seed,
            precision: self.precision,
            metric: self.metric,
            ..TrainConfig::for_kind(kind)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub epsilon: f64,
    pub train_k: usize,
    pub infer_k: usize,
    pub resolution: f64,
    pub scope: CentralityScope,
    pub lgc: LgcConfig,
    pub train: TrainSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            train_k: TRAIN_KNN_K,
            infer_k: INFERENCE_KNN_K,
            resolution: 1.0,
            scope: CentralityScope::CommunitySubgraph,
            lgc: LgcConfig::default(),
            train: TrainSettings::default(),
        }
    }
}

/// A fused dataset with its row groups and lazily built graphs.
#[derive(Debug)]
pub struct Prepared {
    pub dataset: AlignedDataset,
    /// Candidate rows for labeling (the train split).
    pub pool_rows: Vec<usize>,
    /// Rows that receive predictions (train and test splits).
    pub eval_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    features: Matrix<f64>,
    epsilon: f64,
    train_k: usize,
    infer_k: usize,
    selection_graph: OnceLock<Result<SimilarityGraph>>,
    train_graph: OnceLock<Result<SimilarityGraph>>,
    infer_graph: OnceLock<Result<SimilarityGraph>>,
}

fn cached<'a>(cell: &'a OnceLock<Result<SimilarityGraph>>, build: impl FnOnce() -> Result<SimilarityGraph>) -> Result<&'a SimilarityGraph> {
    cell.get_or_init(build).as_ref().map_err(|e| Error::InvalidParameter(e.to_string()))
}

impl Prepared {
    pub fn new(dataset: AlignedDataset, config: &PipelineConfig) -> Result<Self> {
        let train = dataset.rows_in_split(Split::Train);
        let test_rows = dataset.rows_in_split(Split::Test);
        let (pool_rows, eval_rows) = if train.is_empty() {
            let all: Vec<usize> = (0..dataset.len()).collect();
            (all.clone(), all)
        } else {
            let mut eval: Vec<usize> = train.iter().chain(&test_rows).copied().collect();
            eval.sort_unstable();
            (train, eval)
        };
        let features = Matrix::from_embeddings(&dataset.embeddings);
        Ok(Self {
            dataset,
            pool_rows,
            eval_rows,
            test_rows,
            features,
            epsilon: config.epsilon,
            train_k: config.train_k,
            infer_k: config.infer_k,
            selection_graph: OnceLock::new(),
            train_graph: OnceLock::new(),
            infer_graph: OnceLock::new(),
        })
    }

    pub fn pool_ids(&self) -> Vec<String> {
        self.pool_rows.iter().map(|&r| self.dataset.records[r].id.clone()).collect()
    }

    /// ε-graph over the pool; node `k` is dataset row `pool_rows[k]`.
    pub fn selection_graph(&self) -> Result<&SimilarityGraph> {
        cached(&self.selection_graph, || {
            let sub = self.dataset.embeddings.select_rows(&self.pool_rows);
            build_epsilon_graph(&similarity_matrix(&sub)?, self.epsilon)
        })
    }

    /// Training KNN graph over the pool.
    pub fn train_graph(&self) -> Result<&SimilarityGraph> {
        cached(&self.train_graph, || {
            build_knn_graph(&self.dataset.embeddings.select_rows(&self.pool_rows), self.train_k)
        })
    }

    /// Inference KNN graph over the evaluation rows.
    pub fn infer_graph(&self) -> Result<&SimilarityGraph> {
        cached(&self.infer_graph, || {
            build_knn_graph(&self.dataset.embeddings.select_rows(&self.eval_rows), self.infer_k)
        })
    }
}

#[derive(Debug, Clone)]
pub struct SelectionStage {
    pub partition: Partition,
    pub selection: SelectionResult,
}

impl SelectionStage {
    /// Dataset rows of the selected samples, in selection order.
    pub fn rows(&self, prepared: &Prepared) -> Vec<usize> {
        self.selection.samples.iter().map(|s| prepared.pool_rows[s.node]).collect()
    }
}

/// Leiden partition of the selection graph.
pub fn cluster_pool(prepared: &Prepared, config: &PipelineConfig, seed: u64) -> Result<Partition> {
    leiden(
        prepared.selection_graph()?,
        &LeidenConfig {
            resolution: config.resolution,
            seed,
            ..LeidenConfig::default()
        },
    )
}

/// Clusters the pool and picks `budget` representatives.
pub fn select_for_labeling(
    prepared: &Prepared,
    config: &PipelineConfig,
    method: SelectionMethod,
    budget: usize,
    seed: u64,
) -> Result<SelectionStage> {
    let partition = cluster_pool(prepared, config, seed)?;
    select_with_partition(prepared, config, partition, method, budget, seed)
}

pub fn select_with_partition(
    prepared: &Prepared,
    config: &PipelineConfig,
    partition: Partition,
    method: SelectionMethod,
    budget: usize,
    seed: u64,
) -> Result<SelectionStage> {
    let selection = select_representatives(
        prepared.selection_graph()?,
        &partition,
        &prepared.pool_ids(),
        &SelectionConfig {
            budget,
            method,
            seed,
            scope: config.scope,
        },
    )?;
    Ok(SelectionStage { partition, selection })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagationOutcome {
    /// Dataset rows that received a prediction (the evaluation rows).
    pub rows: Vec<usize>,
    pub predictions: Vec<LabelValue>,
    /// Test-split balanced accuracy when both classes are labeled there.
    pub test_balanced_accuracy: Option<f64>,
}

/// Per-row predictions, `id,prediction`.
pub const PREDICTIONS_FILE: &str = "predictions.csv";
/// Ids predicted relevant, one per line: the filtered collection.
pub const RELEVANT_IDS_FILE: &str = "relevant_ids.txt";

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRow {
    id: String,
    prediction: LabelValue,
}

impl PropagationOutcome {
    pub fn count(&self, label: LabelValue) -> usize {
        self.predictions.iter().filter(|&&p| p == label).count()
    }

    pub fn to_csv(&self, prepared: &Prepared) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for (&row, &prediction) in self.rows.iter().zip(&self.predictions) {
            w.serialize(PredictionRow {
                id: prepared.dataset.records[row].id.clone(),
                prediction,
            })
            .expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv output is utf-8")
    }

    pub fn relevant_ids<'a>(&self, prepared: &'a Prepared) -> Vec<&'a str> {
        self.rows
            .iter()
            .zip(&self.predictions)
            .filter(|(_, &p)| p == LabelValue::Relevant)
            .map(|(&r, _)| prepared.dataset.records[r].id.as_str())
            .collect()
    }

    /// Writes [`PREDICTIONS_FILE`] and [`RELEVANT_IDS_FILE`] into `dir`.
    pub fn write(&self, prepared: &Prepared, dir: &Path) -> Result<()> {
        let mut ids = self.relevant_ids(prepared).join("\n");
        if !ids.is_empty() {
            ids.push('\n');
        }
        for (name, body) in [(PREDICTIONS_FILE, self.to_csv(prepared)), (RELEVANT_IDS_FILE, ids)] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

pub fn read_predictions(path: &Path) -> Result<Vec<(String, LabelValue)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(text.as_bytes())
        .deserialize::<PredictionRow>()
        .map(|r| {
            r.map(|row| (row.id, row.prediction))
                .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
        })
        .collect()
}

/// Trains (or diffuses) from `labeled` dataset rows and predicts every
/// evaluation row. Rows with unknown labels are ignored.
pub fn propagate_labels(
    prepared: &Prepared,
    labeled: &[(usize, LabelValue)],
    model: ModelChoice,
    config: &PipelineConfig,
    seed: u64,
) -> Result<PropagationOutcome> {
    let predictions = match model {
        ModelChoice::Lgc => lgc_labels(prepared, labeled, &config.lgc)?,
        ModelChoice::Neural(kind) => {
            let trained = train_from_labels(prepared, labeled, kind, &config.train, seed)?;
            predict_eval_rows(prepared, &trained)?
        }
    };
    Ok(outcome(prepared, predictions))
}

/// Wraps predictions over the evaluation rows with the test metric.
pub fn outcome(prepared: &Prepared, predictions: Vec<LabelValue>) -> PropagationOutcome {
    let test_balanced_accuracy = test_metric(prepared, &predictions);
    PropagationOutcome {
        rows: prepared.eval_rows.clone(),
        predictions,
        test_balanced_accuracy,
    }
}

fn known_labels(labeled: &[(usize, LabelValue)]) -> Vec<(usize, LabelValue)> {
    labeled.iter().copied().filter(|(_, l)| l.is_known()).collect()
}

/// Label diffusion from every known label over the inference graph.
pub fn lgc_labels(prepared: &Prepared, labeled: &[(usize, LabelValue)], lgc: &LgcConfig) -> Result<Vec<LabelValue>> {
    let eval = &prepared.eval_rows;
    let mut local = vec![usize::MAX; prepared.dataset.len()];
    for (k, &r) in eval.iter().enumerate() {
        local[r] = k;
    }
    let mut seeds = Vec::with_capacity(labeled.len());
    for (r, l) in known_labels(labeled) {
        if local[r] == usize::MAX {
            return Err(Error::InvalidParameter(format!("labeled row {r} is outside the evaluation rows")));
        }
        seeds.push((local[r], l));
    }
    if seeds.is_empty() {
        return Err(Error::InsufficientLabels("no labeled samples".into()));
    }
    let s = lgc_smoothing_operator(prepared.infer_graph()?);
    let f = lgc_propagate(&s, &LabelMatrix::from_seeds(eval.len(), &seeds)?, lgc)?;
    Ok(lgc_predict(&f))
}

/// Balanced train/validation split of the known labels, then training over
/// the pool with the training graph.
pub fn train_from_labels(
    prepared: &Prepared,
    labeled: &[(usize, LabelValue)],
    kind: ModelKind,
    settings: &TrainSettings,
    seed: u64,
) -> Result<TrainedModel> {
    let known = known_labels(labeled);
    let ids: Vec<(String, LabelValue)> = known
        .iter()
        .map(|&(r, l)| (prepared.dataset.records[r].id.clone(), l))
        .collect();
    let split = split_train_val(&ids, seed)?;
    let mut pool_local = vec![usize::MAX; prepared.dataset.len()];
    for (k, &r) in prepared.pool_rows.iter().enumerate() {
        pool_local[r] = k;
    }
    let n_pool = prepared.pool_rows.len();
    let mut labels = vec![LabelValue::Unknown; n_pool];
    let mut train_mask = vec![false; n_pool];
    let mut val_mask = vec![false; n_pool];
    for (ids, mask) in [(&split.train, &mut train_mask), (&split.validation, &mut val_mask)] {
        for id in ids {
            let r = prepared.dataset.row_of(id).expect("labeled ids come from the dataset");
            let k = pool_local[r];
            if k == usize::MAX {
                return Err(Error::InvalidParameter(format!("labeled sample `{id}` is not in the pool")));
            }
            mask[k] = true;
        }
    }
    for &(r, l) in &known {
        if pool_local[r] != usize::MAX {
            labels[pool_local[r]] = l;
        }
    }
    let x_pool = prepared.features.select_rows(&prepared.pool_rows);
    let spec = settings.spec(kind, x_pool.cols());
    let cfg = settings.config(kind, seed);
    let graph = if kind.uses_graph() { Some(prepared.train_graph()?) } else { None };
    train_node_classifier(graph, &x_pool, &labels, &train_mask, &val_mask, &spec, &cfg)
}

/// Predicts the evaluation rows over the inference graph.
pub fn predict_eval_rows(prepared: &Prepared, model: &TrainedModel) -> Result<Vec<LabelValue>> {
    let graph = if model.spec.kind.uses_graph() { Some(prepared.infer_graph()?) } else { None };
    predict(model, graph, &prepared.features.select_rows(&prepared.eval_rows))
}

fn test_metric(prepared: &Prepared, predictions: &[LabelValue]) -> Option<f64> {
    if prepared.test_rows.is_empty() {
        return None;
    }
    let mut local = vec![usize::MAX; prepared.dataset.len()];
    for (k, &r) in prepared.eval_rows.iter().enumerate() {
        local[r] = k;
    }
    let preds: Vec<LabelValue> = prepared.test_rows.iter().map(|&r| predictions[local[r]]).collect();
    let truth: Vec<LabelValue> = prepared.test_rows.iter().map(|&r| prepared.dataset.records[r].label_tweet).collect();
    balanced_accuracy(&preds, &truth).ok()
}

/// Labels for `rows` read from the manifest (the annotation oracle).
pub fn oracle_labels(prepared: &Prepared, rows: &[usize]) -> Vec<(usize, LabelValue)> {
    rows.iter().map(|&r| (r, prepared.dataset.records[r].label_tweet)).collect()
}
