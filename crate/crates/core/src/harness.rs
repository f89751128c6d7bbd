//! Synthetic corpora, the experiment grid, and its CSV reports.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::community::Partition;
use crate::dataset::{
    align, load_embeddings, load_manifest, AlignReport, AlignedDataset, EmbeddingMatrix, LabelValue, SampleRecord,
    Split,
};
use crate::error::{Error, Result};
use crate::fusion::{fuse, FusionMode};
use crate::pipeline::{
    cluster_pool, oracle_labels, propagate_labels, select_with_partition, ModelChoice, PipelineConfig, Prepared,
};
use crate::selection::{SelectionMethod, DEFAULT_BUDGETS};

pub use crate::metrics::balanced_accuracy;

/// Share of each class assigned to the test split.
pub const TEST_FRACTION: f64 = 0.38;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Total sample count.
    pub n: usize,
    pub dim: usize,
    /// Distance between the two class means, in units of `noise`.
    pub separation: f64,
    /// Per-coordinate standard deviation around each class mean.
    pub noise: f64,
    pub relevant_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 1000,
            dim: 32,
            separation: 6.0,
            noise: 0.0625,
            relevant_fraction: 0.26,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.n < 4 || self.dim < 2 || !(self.separation > 0.0) || !(self.noise > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "synthetic spec needs n >= 4, dim >= 2, separation > 0, noise > 0 (got {}, {}, {}, {})",
                self.n, self.dim, self.separation, self.noise
            )));
        }
        if !(0.0..=1.0).contains(&self.relevant_fraction) {
            return Err(Error::InvalidParameter("relevant_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Manifest records with their text and optional image embeddings, aligned
/// to the manifest's row order.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub records: Vec<SampleRecord>,
    pub text: EmbeddingMatrix,
    pub image: Option<EmbeddingMatrix>,
}

impl Corpus {
    pub fn load(manifest: &Path, text: &Path, image: Option<&Path>) -> Result<(Self, AlignReport)> {
        let records = load_manifest(manifest)?;
        let text = load_embeddings(text)?;
        let (dataset, report) = align(records, &text)?;
        let image = image.map(load_embeddings).transpose()?;
        // keep only image rows that have a text row
        let image = image.map(|m| {
            let rows: Vec<usize> = m
                .ids()
                .iter()
                .enumerate()
                .filter(|(_, id)| dataset.row_of(id).is_some())
                .map(|(i, _)| i)
                .collect();
            m.select_rows(&rows)
        });
        Ok((
            Self {
                records: dataset.records,
                text: dataset.embeddings,
                image,
            },
            report,
        ))
    }

    pub fn text_dataset(&self) -> Result<AlignedDataset> {
        AlignedDataset::new(self.records.clone(), self.text.clone())
    }

    pub fn fused(&self, mode: FusionMode) -> Result<AlignedDataset> {
        AlignedDataset::new(self.records.clone(), fuse(&self.text, self.image.as_ref(), mode)?)
    }
}

fn gaussian_unit(rng: &mut ChaCha8Rng, dim: usize, orthogonal_to: Option<&[f64]>) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    if let Some(b) = orthogonal_to {
        let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
        for (x, y) in v.iter_mut().zip(b) {
            *x -= proj * y;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / norm).collect()
}

/// Class-conditional Gaussian blobs around a shared unit direction, rows
/// L2-normalized afterwards.
fn blob_modality(spec: &SyntheticSpec, labels: &[LabelValue], ids: &[String], rng: &mut ChaCha8Rng) -> Result<EmbeddingMatrix> {
    let base = gaussian_unit(rng, spec.dim, None);
    let axis = gaussian_unit(rng, spec.dim, Some(&base));
    let half = spec.separation * spec.noise / 2.0;
    let mut values = Vec::with_capacity(spec.n * spec.dim);
    for label in labels {
        let sign = if *label == LabelValue::Relevant { 1.0 } else { -1.0 };
        let row: Vec<f64> = (0..spec.dim)
            .map(|j| {
                let z: f64 = StandardNormal.sample(rng);
                base[j] + sign * half * axis[j] + spec.noise * z
            })
            .collect();
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        values.extend(row.iter().map(|x| (x / norm) as f32));
    }
    EmbeddingMatrix::new(ids.to_vec(), spec.dim, values)
}

/// Two Gaussian blobs per modality with a stratified train/test split.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_rel = (spec.n as f64 * spec.relevant_fraction).round() as usize;
    let mut labels = vec![LabelValue::Irrelevant; spec.n];
    for i in rand::seq::index::sample(&mut rng, spec.n, n_rel) {
        labels[i] = LabelValue::Relevant;
    }
    let mut split = vec![Split::Train; spec.n];
    for class in [LabelValue::Relevant, LabelValue::Irrelevant] {
        let mut members: Vec<usize> = (0..spec.n).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        let n_test = (members.len() as f64 * TEST_FRACTION).round() as usize;
        for &i in &members[..n_test] {
            split[i] = Split::Test;
        }
    }
    let width = (spec.n - 1).to_string().len().max(4);
    let ids: Vec<String> = (0..spec.n).map(|i| format!("s{i:0width$}")).collect();
    let text = blob_modality(spec, &labels, &ids, &mut rng)?;
    let image = blob_modality(spec, &labels, &ids, &mut rng)?;
    let records = (0..spec.n)
        .map(|i| SampleRecord {
            id: ids[i].clone(),
            text: format!("synthetic sample {i}"),
            image: None,
            label_text: labels[i],
            label_image: labels[i],
            label_tweet: labels[i],
            split: split[i],
        })
        .collect();
    Ok(Corpus {
        records,
        text,
        image: Some(image),
    })
}

/// Test balanced accuracy of a nearest-class-mean classifier fitted on every
/// labeled train row: a full-supervision linear reference.
pub fn nearest_centroid_oracle(ds: &AlignedDataset) -> Result<f64> {
    let d = ds.embeddings.dim();
    let mut sums = [vec![0.0f64; d], vec![0.0f64; d]];
    let mut counts = [0usize; 2];
    for r in ds.rows_in_split(Split::Train) {
        if let Some(c) = ds.records[r].label_tweet.class_index() {
            counts[c] += 1;
            for (s, &v) in sums[c].iter_mut().zip(ds.embeddings.row(r)) {
                *s += v as f64;
            }
        }
    }
    if counts.contains(&0) {
        return Err(Error::InsufficientLabels("oracle needs both classes in the train split".into()));
    }
    let means: Vec<Vec<f64>> = (0..2).map(|c| sums[c].iter().map(|s| s / counts[c] as f64).collect()).collect();
    let test = ds.rows_in_split(Split::Test);
    let dist = |r: usize, c: usize| -> f64 {
        ds.embeddings.row(r).iter().zip(&means[c]).map(|(&x, m)| (x as f64 - m).powi(2)).sum()
    };
    let preds: Vec<LabelValue> = test
        .iter()
        .map(|&r| if dist(r, 0) < dist(r, 1) { LabelValue::Relevant } else { LabelValue::Irrelevant })
        .collect();
    let truth: Vec<LabelValue> = test.iter().map(|&r| ds.records[r].label_tweet).collect();
    balanced_accuracy(&preds, &truth)
}

/// Where the experiment's data comes from: a synthetic spec or files on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: Option<SyntheticSpec>,
    pub manifest: Option<PathBuf>,
    pub text: Option<PathBuf>,
    pub image: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: Some(SyntheticSpec::default()),
            manifest: None,
            text: None,
            image: None,
        }
    }
}

impl DataConfig {
    /// Relative paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<Corpus> {
        match (&self.synthetic, &self.manifest, &self.text) {
            (Some(spec), None, None) => generate_synthetic(spec),
            (None, Some(manifest), Some(text)) => {
                let image = self.image.as_ref().map(|p| base.join(p));
                Ok(Corpus::load(&base.join(manifest), &base.join(text), image.as_deref())?.0)
            }
            _ => Err(Error::InvalidParameter(
                "data needs either a synthetic spec or manifest + text paths".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub fusions: Vec<FusionMode>,
    pub models: Vec<ModelChoice>,
    pub selections: Vec<SelectionMethod>,
    pub budgets: Vec<usize>,
    pub repeats: usize,
    pub base_seed: u64,
    /// Adds a full-supervision row (budget `ALL`) per fusion, model and seed.
    pub include_full_reference: bool,
    /// Off by default so that reports are byte-identical across runs.
    pub record_timing: bool,
    pub report: PathBuf,
    pub aggregate: PathBuf,
    pub data: DataConfig,
    pub pipeline: PipelineConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            fusions: vec![FusionMode::TextOnly],
            models: ModelChoice::ALL.to_vec(),
            selections: SelectionMethod::ALL.to_vec(),
            budgets: DEFAULT_BUDGETS.to_vec(),
            repeats: 10,
            base_seed: 0,
            include_full_reference: true,
            record_timing: false,
            report: PathBuf::from("report.csv"),
            aggregate: PathBuf::from("aggregate.csv"),
            data: DataConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::InvalidParameter("repeats must be at least 1".into()));
        }
        if self.budgets.is_empty() || self.budgets[0] == 0 || self.budgets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter(format!(
                "budgets must be positive and strictly ascending, got {:?}",
                self.budgets
            )));
        }
        if self.fusions.is_empty() || self.models.is_empty() || self.selections.is_empty() {
            return Err(Error::InvalidParameter("fusions, models and selections must be non-empty".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Budget {
    Count(usize),
    All,
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Count(b) => write!(f, "{b}"),
            Budget::All => f.write_str("ALL"),
        }
    }
}

/// Selection column value of the full-supervision rows.
pub const FULL_SELECTION: &str = "full";

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub fusion: FusionMode,
    pub model: ModelChoice,
    /// `None` for the full-supervision reference.
    pub selection: Option<SelectionMethod>,
    pub budget: Budget,
    pub seed: u64,
    pub balanced_accuracy: Option<f64>,
    pub elapsed_ms: u64,
    pub error: Option<String>,
}

impl RunResult {
    fn selection_name(&self) -> &'static str {
        self.selection.map_or(FULL_SELECTION, SelectionMethod::as_str)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub fusion: FusionMode,
    pub model: ModelChoice,
    pub selection: Option<SelectionMethod>,
    pub budget: Budget,
    /// Successful runs behind the statistics.
    pub n: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation; zero for a single run.
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub results: Vec<RunResult>,
    pub aggregate: Vec<AggregateRow>,
}

impl ExperimentOutput {
    pub fn failures(&self) -> impl Iterator<Item = &RunResult> {
        self.results.iter().filter(|r| r.error.is_some())
    }

    pub fn report_csv(&self) -> String {
        let mut out = String::from("fusion,model,selection,budget,seed,balanced_accuracy,elapsed_ms\n");
        for r in &self.results {
            let acc = r.balanced_accuracy.map(|a| a.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.fusion,
                r.model,
                r.selection_name(),
                r.budget,
                r.seed,
                acc,
                r.elapsed_ms
            )
            .unwrap();
        }
        out
    }

    pub fn aggregate_csv(&self) -> String {
        let mut out = String::from("fusion,model,selection,budget,mean,std\n");
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for a in &self.aggregate {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                a.fusion,
                a.model,
                a.selection.map_or(FULL_SELECTION, SelectionMethod::as_str),
                a.budget,
                fmt(a.mean),
                fmt(a.std)
            )
            .unwrap();
        }
        out
    }

    /// Writes both CSV files (UTF-8, LF line endings).
    pub fn write_reports(&self, report: &Path, aggregate: &Path) -> Result<()> {
        for (path, body) in [(report, self.report_csv()), (aggregate, self.aggregate_csv())] {
            std::fs::write(path, body).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    match values.len() {
        0 => (None, None),
        1 => (Some(values[0]), Some(0.0)),
        n => {
            let mean = values.iter().sum::<f64>() / n as f64;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (Some(mean), Some(var.sqrt()))
        }
    }
}

pub fn aggregate(results: &[RunResult]) -> Vec<AggregateRow> {
    let mut rows: Vec<AggregateRow> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for r in results {
        let key = (r.fusion, r.model, r.selection, r.budget);
        let pos = rows
            .iter()
            .position(|a| (a.fusion, a.model, a.selection, a.budget) == key)
            .unwrap_or_else(|| {
                rows.push(AggregateRow {
                    fusion: r.fusion,
                    model: r.model,
                    selection: r.selection,
                    budget: r.budget,
                    n: 0,
                    mean: None,
                    std: None,
                });
                values.push(Vec::new());
                rows.len() - 1
            });
        if let Some(a) = r.balanced_accuracy {
            values[pos].push(a);
        }
    }
    for (row, vals) in rows.iter_mut().zip(&values) {
        row.n = vals.len();
        (row.mean, row.std) = mean_std(vals);
    }
    rows
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    fusion: usize,
    model: ModelChoice,
    selection: Option<SelectionMethod>,
    budget: Budget,
    seed: u64,
}

/// Runs the whole grid on `corpus`. Cells run in parallel; a failing cell is
/// recorded in its row and does not stop the others.
pub fn run_experiment(config: &ExperimentConfig, corpus: &Corpus) -> Result<ExperimentOutput> {
    config.validate()?;
    let seeds: Vec<u64> = (0..config.repeats as u64).map(|r| config.base_seed + r).collect();
    let prepared: Vec<Result<Prepared>> = config
        .fusions
        .iter()
        .map(|&mode| Prepared::new(corpus.fused(mode)?, &config.pipeline))
        .collect();

    let partitions: Vec<Vec<Result<Partition>>> = prepared
        .iter()
        .map(|p| match p {
            Ok(p) => seeds.par_iter().map(|&s| cluster_pool(p, &config.pipeline, s)).collect(),
            Err(e) => seeds.iter().map(|_| Err(Error::InvalidParameter(e.to_string()))).collect(),
        })
        .collect();

    let mut cells = Vec::new();
    for fusion in 0..config.fusions.len() {
        for &model in &config.models {
            for &method in &config.selections {
                for &b in &config.budgets {
                    for &seed in &seeds {
                        cells.push(Cell {
                            fusion,
                            model,
                            selection: Some(method),
                            budget: Budget::Count(b),
                            seed,
                        });
                    }
                }
            }
            if config.include_full_reference {
                for &seed in &seeds {
                    cells.push(Cell {
                        fusion,
                        model,
                        selection: None,
                        budget: Budget::All,
                        seed,
                    });
                }
            }
        }
    }

    let results: Vec<RunResult> = cells
        .par_iter()
        .map(|cell| {
            let start = Instant::now();
            let outcome = run_cell(config, &prepared, &partitions, &seeds, cell);
            let elapsed_ms = if config.record_timing { start.elapsed().as_millis() as u64 } else { 0 };
            let (balanced_accuracy, error) = match outcome {
                Ok(Some(a)) => (Some(a), None),
                Ok(None) => (None, Some("no labeled test rows to evaluate".to_string())),
                Err(e) => (None, Some(e.to_string())),
            };
            RunResult {
                fusion: config.fusions[cell.fusion],
                model: cell.model,
                selection: cell.selection,
                budget: cell.budget,
                seed: cell.seed,
                balanced_accuracy,
                elapsed_ms,
                error,
            }
        })
        .collect();
    let aggregate = aggregate(&results);
    Ok(ExperimentOutput { results, aggregate })
}

fn run_cell(
    config: &ExperimentConfig,
    prepared: &[Result<Prepared>],
    partitions: &[Vec<Result<Partition>>],
    seeds: &[u64],
    cell: &Cell,
) -> Result<Option<f64>> {
    let p = prepared[cell.fusion].as_ref().map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let rows = match (cell.selection, cell.budget) {
        (Some(method), Budget::Count(b)) => {
            let k = seeds.iter().position(|&s| s == cell.seed).expect("cell seed from the seed list");
            let partition = partitions[cell.fusion][k]
                .as_ref()
                .map_err(|e| Error::InvalidParameter(e.to_string()))?
                .clone();
            select_with_partition(p, &config.pipeline, partition, method, b, cell.seed)?.rows(p)
        }
        _ => p.pool_rows.clone(),
    };
    let labeled = oracle_labels(p, &rows);
    Ok(propagate_labels(p, &labeled, cell.model, &config.pipeline, cell.seed)?.test_balanced_accuracy)
}

/// Trains on every labeled pool row (no selection) and scores the test split.
pub fn full_train_reference(
    corpus: &Corpus,
    fusion: FusionMode,
    model: ModelChoice,
    pipeline: &PipelineConfig,
    seed: u64,
) -> Result<RunResult> {
    let start = Instant::now();
    let p = Prepared::new(corpus.fused(fusion)?, pipeline)?;
    let labeled = oracle_labels(&p, &p.pool_rows);
    let acc = propagate_labels(&p, &labeled, model, pipeline, seed)?.test_balanced_accuracy;
    Ok(RunResult {
        fusion,
        model,
        selection: None,
        budget: Budget::All,
        seed,
        balanced_accuracy: acc,
        elapsed_ms: start.elapsed().as_millis() as u64,
        error: None,
    })
}
