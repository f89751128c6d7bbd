//! Stage subcommands. Each stage reads its inputs from the artifact root and
//! writes its outputs there, so stages can be rerun independently.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use evfilter_core::community::{leiden, modularity, LeidenConfig, Partition};
use evfilter_core::dataset::{align, load_embeddings, load_manifest, write_embeddings, write_manifest, LabelValue, Split};
use evfilter_core::graph::SimilarityGraph;
use evfilter_core::harness::{generate_synthetic, run_experiment, Corpus, ExperimentConfig, SyntheticSpec};
use evfilter_core::metrics::{balanced_accuracy, class_recalls};
use evfilter_core::neural::{load_model, save_model};
use evfilter_core::pipeline::{
    lgc_labels, oracle_labels, outcome, predict_eval_rows, propagate_labels, read_predictions,
    select_with_partition, train_from_labels, ModelChoice, PipelineConfig, Prepared, PropagationOutcome,
    PREDICTIONS_FILE,
};
use evfilter_core::selection::{community_rankings, read_selection, select_representatives, SelectionConfig};
use serde_json::{json, Value};

use crate::args::*;
use crate::progress;

pub const MANIFEST: &str = "manifest.jsonl";
pub const TEXT: &str = "text.evb";
pub const IMAGE: &str = "image.evb";
pub const FUSED: &str = "fused.evb";
pub const SELECTION_GRAPH: &str = "selection_graph.txt";
pub const KNN_GRAPH: &str = "knn_graph.txt";
pub const PARTITION: &str = "partition.txt";
pub const RANKING: &str = "ranking.csv";
pub const SELECTION: &str = "selection.csv";
pub const MODEL: &str = "model.evm";
pub const METRICS: &str = "metrics.json";
pub const LABEL_STORE: &str = "labels.json";

/// Path of a prior stage's artifact, or an error naming it and its producer.
pub fn artifact(dir: &Path, name: &str, producer: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    if !path.exists() {
        bail!(
            "missing {name} artifact at {}; run `evfilter {producer}` first",
            path.display()
        );
    }
    Ok(path)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_corpus(data: &DataArgs) -> Result<Corpus> {
    let manifest = data.data_dir.join(MANIFEST);
    let text = data.data_dir.join(TEXT);
    for p in [&manifest, &text] {
        if !p.exists() {
            bail!("missing input {}", p.display());
        }
    }
    let image = data.data_dir.join(IMAGE);
    let (corpus, report) = Corpus::load(&manifest, &text, image.exists().then_some(image.as_path()))?;
    progress!(
        "loaded {} samples ({} manifest rows and {} embedding rows without a partner dropped)",
        corpus.records.len(),
        report.dropped_from_manifest,
        report.dropped_from_embeddings
    );
    Ok(corpus)
}

/// Manifest rows aligned with the fused embeddings.
pub fn load_prepared(data: &DataArgs, config: &PipelineConfig) -> Result<Prepared> {
    let fused = artifact(&data.out_dir(), FUSED, "fuse")?;
    let records = load_manifest(data.data_dir.join(MANIFEST))?;
    let (dataset, _) = align(records, &load_embeddings(&fused)?)?;
    Ok(Prepared::new(dataset, config)?)
}

pub fn pipeline_config(graph: &GraphFlags, train: &TrainFlags) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        epsilon: graph.epsilon,
        train_k: graph.train_k,
        infer_k: graph.infer_k,
        ..PipelineConfig::default()
    };
    if let Some(lr) = train.lr {
        cfg.train.graph_lr = lr;
        cfg.train.mlpc_lr = lr;
    }
    if let Some(wd) = train.wd {
        cfg.train.weight_decay = wd;
    }
    if let Some(e) = train.epochs {
        cfg.train.epochs = e;
    }
    if let Some(h) = train.hidden {
        cfg.train.graph_hidden = h;
    }
    if let Some(a) = train.alpha {
        cfg.lgc.alpha = a;
    }
    cfg
}

/// Dataset rows of the ids in `selection.csv`.
fn selected_rows(prepared: &Prepared, out: &Path) -> Result<Vec<usize>> {
    let path = artifact(out, SELECTION, "select")?;
    read_selection(&path)?
        .iter()
        .map(|s| {
            prepared
                .dataset
                .row_of(&s.id)
                .ok_or_else(|| anyhow!("selected id `{}` is not in the dataset", s.id))
        })
        .collect()
}

fn class_counts(labels: &[(usize, LabelValue)]) -> Value {
    let count = |c| labels.iter().filter(|(_, l)| *l == c).count();
    json!({"relevant": count(LabelValue::Relevant), "irrelevant": count(LabelValue::Irrelevant)})
}

fn write_outcome(prepared: &Prepared, out: &Path, result: &PropagationOutcome) -> Result<()> {
    result.write(prepared, out)?;
    let metrics = json!({
        "balanced_accuracy": result.test_balanced_accuracy,
        "predicted_relevant": result.count(LabelValue::Relevant),
        "predicted_irrelevant": result.count(LabelValue::Irrelevant),
    });
    let path = out.join(METRICS);
    std::fs::write(&path, serde_json::to_string_pretty(&metrics)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

pub fn synth(a: SynthArgs) -> Result<Value> {
    let spec = SyntheticSpec {
        n: a.n,
        dim: a.dim,
        separation: a.separation,
        noise: a.noise,
        relevant_fraction: a.relevant_fraction,
        seed: a.seed,
    };
    let corpus = generate_synthetic(&spec)?;
    ensure_dir(&a.out)?;
    write_manifest(a.out.join(MANIFEST), &corpus.records)?;
    write_embeddings(a.out.join(TEXT), &corpus.text)?;
    if let Some(image) = &corpus.image {
        write_embeddings(a.out.join(IMAGE), image)?;
    }
    let relevant = corpus.records.iter().filter(|r| r.label_tweet == LabelValue::Relevant).count();
    Ok(json!({"command": "synth", "n": a.n, "dim": a.dim, "relevant": relevant, "out": a.out}))
}

pub fn fuse(a: FuseArgs) -> Result<Value> {
    let corpus = load_corpus(&a.data)?;
    let fused = corpus.fused(a.fusion)?;
    let out = a.data.out_dir();
    ensure_dir(&out)?;
    write_embeddings(out.join(FUSED), &fused.embeddings)?;
    Ok(json!({
        "command": "fuse",
        "fusion": a.fusion.as_str(),
        "rows": fused.len(),
        "dim": fused.embeddings.dim(),
        "output": out.join(FUSED),
    }))
}

pub fn graph(a: GraphArgs) -> Result<Value> {
    let cfg = PipelineConfig {
        epsilon: a.epsilon,
        infer_k: a.k,
        ..PipelineConfig::default()
    };
    let prepared = load_prepared(&a.data, &cfg)?;
    let (g, name) = match a.kind {
        GraphKind::Epsilon => (prepared.selection_graph()?, SELECTION_GRAPH),
        GraphKind::Knn => (prepared.infer_graph()?, KNN_GRAPH),
    };
    let path = a.data.out_dir().join(name);
    g.write(&path)?;
    Ok(json!({"command": "graph", "nodes": g.n(), "edges": g.edge_count(), "output": path}))
}

fn read_graph(out: &Path) -> Result<SimilarityGraph> {
    Ok(SimilarityGraph::read(artifact(out, SELECTION_GRAPH, "graph")?)?)
}

fn read_partition(out: &Path, g: &SimilarityGraph) -> Result<Partition> {
    let p = Partition::read(artifact(out, PARTITION, "cluster")?)?;
    if p.len() != g.n() {
        bail!("{PARTITION} covers {} nodes but {SELECTION_GRAPH} has {}; rerun `evfilter cluster`", p.len(), g.n());
    }
    Ok(p)
}

pub fn cluster(a: ClusterArgs) -> Result<Value> {
    let out = a.data.out_dir();
    let g = read_graph(&out)?;
    let p = leiden(
        &g,
        &LeidenConfig {
            resolution: a.resolution,
            seed: a.seed,
            ..LeidenConfig::default()
        },
    )?;
    let path = out.join(PARTITION);
    p.write(&path)?;
    Ok(json!({
        "command": "cluster",
        "communities": p.n_communities(),
        "modularity": modularity(&g, p.assignment(), a.resolution),
        "output": path,
    }))
}

pub fn rank(a: RankArgs) -> Result<Value> {
    let out = a.data.out_dir();
    let g = read_graph(&out)?;
    let p = read_partition(&out, &g)?;
    let prepared = load_prepared(&a.data, &PipelineConfig::default())?;
    let ids = prepared.pool_ids();
    let ranked = community_rankings(&g, &p, a.method, a.scope)?;
    let path = out.join(RANKING);
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["id", "cluster", "rank", "score"])?;
    for (cluster, order) in ranked.iter().enumerate() {
        for (r, &(v, score)) in order.iter().enumerate() {
            w.write_record([ids[v].clone(), cluster.to_string(), (r + 1).to_string(), score.to_string()])?;
        }
    }
    w.flush()?;
    Ok(json!({"command": "rank", "method": a.method.as_str(), "nodes": g.n(), "output": path}))
}

pub fn select(a: SelectArgs) -> Result<Value> {
    let out = a.data.out_dir();
    let g = read_graph(&out)?;
    let p = read_partition(&out, &g)?;
    let prepared = load_prepared(&a.data, &PipelineConfig::default())?;
    let result = select_representatives(
        &g,
        &p,
        &prepared.pool_ids(),
        &SelectionConfig {
            budget: a.budget,
            method: a.method,
            seed: a.seed,
            scope: a.scope,
        },
    )?;
    let path = out.join(SELECTION);
    result.write(&path)?;
    Ok(json!({
        "command": "select",
        "method": a.method.as_str(),
        "selected": result.samples.len(),
        "communities": p.n_communities(),
        "output": path,
    }))
}

pub fn train(a: TrainArgs) -> Result<Value> {
    let out = a.data.out_dir();
    let cfg = pipeline_config(&a.graph, &a.train);
    let prepared = load_prepared(&a.data, &cfg)?;
    let labeled = oracle_labels(&prepared, &selected_rows(&prepared, &out)?);
    progress!("training {} on {} labels", a.model, labeled.len());
    let model = train_from_labels(&prepared, &labeled, a.model, &cfg.train, a.seed)?;
    let path = out.join(MODEL);
    save_model(&path, &model)?;
    Ok(json!({
        "command": "train",
        "model": a.model.as_str(),
        "labels": class_counts(&labeled),
        "best_epoch": model.best_epoch,
        "best_val_score": model.best_val_score(),
        "output": path,
    }))
}

pub fn predict(a: PredictArgs) -> Result<Value> {
    let out = a.data.out_dir();
    let cfg = pipeline_config(&a.graph, &a.train);
    let prepared = load_prepared(&a.data, &cfg)?;
    let predictions = match a.model {
        ModelChoice::Lgc => {
            let labeled = oracle_labels(&prepared, &selected_rows(&prepared, &out)?);
            lgc_labels(&prepared, &labeled, &cfg.lgc)?
        }
        ModelChoice::Neural(kind) => {
            let model = load_model(artifact(&out, MODEL, "train")?)?;
            if model.spec.kind != kind {
                bail!("{MODEL} holds a {} model, not {kind}", model.spec.kind);
            }
            predict_eval_rows(&prepared, &model)?
        }
    };
    let result = outcome(&prepared, predictions);
    write_outcome(&prepared, &out, &result)?;
    Ok(json!({
        "command": "predict",
        "model": a.model.as_str(),
        "predicted_relevant": result.count(LabelValue::Relevant),
        "predicted_irrelevant": result.count(LabelValue::Irrelevant),
        "balanced_accuracy": result.test_balanced_accuracy,
        "output": out.join(PREDICTIONS_FILE),
    }))
}

pub fn evaluate(a: EvaluateArgs) -> Result<Value> {
    let out = a.data.out_dir();
    let predictions = read_predictions(&artifact(&out, PREDICTIONS_FILE, "predict")?)?;
    let records = load_manifest(a.data.data_dir.join(MANIFEST))?;
    let truth: HashMap<&str, (LabelValue, Split)> =
        records.iter().map(|r| (r.id.as_str(), (r.label_tweet, r.split))).collect();
    let has_test = predictions.iter().any(|(id, _)| matches!(truth.get(id.as_str()), Some((_, Split::Test))));
    let (mut preds, mut labels) = (Vec::new(), Vec::new());
    for (id, p) in &predictions {
        let &(label, split) = truth
            .get(id.as_str())
            .ok_or_else(|| anyhow!("predicted id `{id}` is not in the manifest"))?;
        if (!has_test || split == Split::Test) && label.is_known() {
            preds.push(*p);
            labels.push(label);
        }
    }
    let acc = balanced_accuracy(&preds, &labels)?;
    let [recall_relevant, recall_irrelevant] = class_recalls(&preds, &labels)?;
    let metrics = json!({
        "balanced_accuracy": acc,
        "recall_relevant": recall_relevant,
        "recall_irrelevant": recall_irrelevant,
        "evaluated": preds.len(),
        "subset": if has_test { "test" } else { "all" },
    });
    let path = out.join(METRICS);
    std::fs::write(&path, serde_json::to_string_pretty(&metrics)? + "\n")?;
    Ok(json!({"command": "evaluate", "balanced_accuracy": acc, "evaluated": preds.len(), "output": path}))
}

pub fn experiment(a: ExperimentArgs) -> Result<Value> {
    let text = std::fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let cfg = ExperimentConfig::from_toml(&text)?;
    cfg.validate()?;
    let base = a.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let corpus = cfg.data.load(&base)?;
    let report_dir = a.out.clone().unwrap_or_else(|| base.clone());
    let resolve = |p: &Path| match &a.out {
        Some(dir) => dir.join(p.file_name().unwrap_or(p.as_os_str())),
        None => base.join(p),
    };
    let (report, aggregate) = (resolve(&cfg.report), resolve(&cfg.aggregate));
    ensure_dir(&report_dir)?;
    progress!("running experiment grid from {}", a.config.display());
    let output = run_experiment(&cfg, &corpus)?;
    for f in output.failures() {
        eprintln!(
            "cell failed: {} {} {:?} budget {} seed {}: {}",
            f.fusion,
            f.model,
            f.selection.map(|m| m.as_str()),
            f.budget,
            f.seed,
            f.error.as_deref().unwrap_or_default()
        );
    }
    output.write_reports(&report, &aggregate)?;
    Ok(json!({
        "command": "experiment",
        "cells": output.results.len(),
        "failed": output.failures().count(),
        "report": report,
        "aggregate": aggregate,
    }))
}

pub fn pipeline(a: PipelineArgs) -> Result<Value> {
    let out = a.data.out_dir();
    ensure_dir(&out)?;
    let mut cfg = pipeline_config(&a.graph, &a.train);
    cfg.resolution = a.resolution;
    cfg.scope = a.scope;

    let corpus = load_corpus(&a.data).context("load stage")?;
    let fused = corpus.fused(a.fusion).context("fuse stage")?;
    write_embeddings(out.join(FUSED), &fused.embeddings)?;
    let prepared = Prepared::new(fused, &cfg)?;

    let g = prepared.selection_graph().context("graph stage")?;
    g.write(out.join(SELECTION_GRAPH))?;
    progress!("selection graph: {} nodes, {} edges", g.n(), g.edge_count());
    let partition = evfilter_core::pipeline::cluster_pool(&prepared, &cfg, a.seed).context("cluster stage")?;
    partition.write(out.join(PARTITION))?;
    progress!("{} communities", partition.n_communities());
    let stage = select_with_partition(&prepared, &cfg, partition, a.method, a.budget, a.seed)
        .context("select stage")?;
    stage.selection.write(out.join(SELECTION))?;

    let result = match a.labels {
        LabelSource::Oracle => {
            let labeled = oracle_labels(&prepared, &stage.rows(&prepared));
            progress!("propagating {} labels with {}", labeled.len(), a.model);
            let result = propagate_labels(&prepared, &labeled, a.model, &cfg, a.seed).context("propagate stage")?;
            write_outcome(&prepared, &out, &result)?;
            json!({
                "balanced_accuracy": result.test_balanced_accuracy,
                "predicted_relevant": result.count(LabelValue::Relevant),
                "predicted_irrelevant": result.count(LabelValue::Irrelevant),
            })
        }
        LabelSource::Interactive => {
            let metrics = crate::remote::interactive(prepared, &stage, &a, cfg, &out)?;
            std::fs::write(out.join(METRICS), serde_json::to_string_pretty(&metrics)? + "\n")?;
            serde_json::to_value(metrics)?
        }
    };
    let mut summary = json!({
        "command": "pipeline",
        "fusion": a.fusion.as_str(),
        "method": a.method.as_str(),
        "model": a.model.as_str(),
        "budget": a.budget,
        "seed": a.seed,
    });
    summary.as_object_mut().expect("object").extend(result.as_object().expect("object").clone());
    Ok(summary)
}
