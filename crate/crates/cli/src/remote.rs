//! The labeling service and the subcommands that talk to it.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use evfilter_client::{LabelingClient, PropagateResponse};
use evfilter_core::pipeline::{PipelineConfig, Prepared, SelectionStage};
use evfilter_core::selection::{read_selection, SelectionRow};
use evfilter_server::{bind, AppState, ServiceConfig};
use serde_json::{json, Value};

use crate::args::{LabelArgs, PipelineArgs, QueueArgs, RemoteArgs, ServeArgs};
use crate::commands::{artifact, load_prepared, pipeline_config, LABEL_STORE, SELECTION};
use crate::progress;

const POLL_INTERVAL: Duration = Duration::from_secs(1);

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting async runtime")
}

fn service_config(model: evfilter_core::pipeline::ModelChoice, pipeline: PipelineConfig, seed: u64, out: &Path, media: &Path) -> ServiceConfig {
    ServiceConfig {
        model,
        pipeline,
        seed,
        label_store: Some(out.join(LABEL_STORE)),
        output_dir: Some(out.to_path_buf()),
        media_root: media.to_path_buf(),
        static_dir: None,
    }
}

pub fn serve(a: ServeArgs) -> Result<Value> {
    let out = a.data.out_dir();
    let cfg = pipeline_config(&a.graph, &a.train);
    let prepared = load_prepared(&a.data, &cfg)?;
    let selection = read_selection(artifact(&out, SELECTION, "select")?)?;
    let mut config = service_config(a.model, cfg, a.seed, &out, &a.data.data_dir);
    config.static_dir = a.static_dir.clone();
    let state = AppState::new(Arc::new(prepared), &selection, config)?;
    let rt = runtime()?;
    rt.block_on(async {
        let (listener, addr) = bind(a.addr).await.with_context(|| format!("binding {}", a.addr))?;
        eprintln!("labeling service listening on http://{addr}/ (ctrl-c to stop)");
        tokio::select! {
            r = evfilter_server::serve(listener, state.clone()) => r.context("service stopped")?,
            _ = tokio::signal::ctrl_c() => {}
        }
        let c = state.counts();
        Ok(json!({
            "command": "serve",
            "url": format!("http://{addr}/"),
            "selected": c.selected,
            "labeled": c.labeled,
            "skipped": c.skipped,
            "remaining": c.remaining,
        }))
    })
}

/// Serves the selection in-process, waits until every task is answered,
/// then propagates through the service.
pub fn interactive(
    prepared: Prepared,
    stage: &SelectionStage,
    a: &PipelineArgs,
    cfg: PipelineConfig,
    out: &Path,
) -> Result<PropagateResponse> {
    let selection: Vec<SelectionRow> = stage
        .selection
        .samples
        .iter()
        .map(|s| SelectionRow {
            id: s.id.clone(),
            cluster: s.cluster,
            rank: s.rank,
        })
        .collect();
    let config = service_config(a.model, cfg, a.seed, out, &a.data.data_dir);
    let state = AppState::new(Arc::new(prepared), &selection, config)?;
    let rt = runtime()?;
    rt.block_on(async {
        let (listener, addr) = bind(a.addr).await.with_context(|| format!("binding {}", a.addr))?;
        let server = tokio::spawn(evfilter_server::serve(listener, state));
        eprintln!("label {} samples at http://{addr}/", selection.len());
        let client = LabelingClient::new(&format!("http://{addr}/"))?;
        client.wait_until_complete(POLL_INTERVAL).await?;
        progress!("queue complete, propagating");
        let metrics = client.propagate().await.context("propagate stage")?;
        server.abort();
        Ok(metrics)
    })
}

fn client(r: &RemoteArgs) -> Result<(LabelingClient, tokio::runtime::Runtime)> {
    Ok((LabelingClient::new(&r.url)?, runtime()?))
}

pub fn queue(a: QueueArgs) -> Result<Value> {
    let (c, rt) = client(&a.remote)?;
    let tasks = rt.block_on(c.queue(a.limit))?;
    Ok(json!({"command": "queue", "tasks": tasks}))
}

pub fn label(a: LabelArgs) -> Result<Value> {
    let (c, rt) = client(&a.remote)?;
    let remaining = rt.block_on(c.submit(&a.id, a.label))?;
    Ok(json!({"command": "label", "id": a.id, "label": a.label, "remaining": remaining}))
}

pub fn status(a: RemoteArgs) -> Result<Value> {
    let (c, rt) = client(&a)?;
    let s = rt.block_on(c.status())?;
    let mut v = serde_json::to_value(s)?;
    v.as_object_mut().expect("object").insert("command".into(), json!("status"));
    Ok(v)
}

pub fn propagate(a: RemoteArgs) -> Result<Value> {
    let (c, rt) = client(&a)?;
    let m = rt.block_on(c.propagate())?;
    let mut v = serde_json::to_value(m)?;
    v.as_object_mut().expect("object").insert("command".into(), json!("propagate"));
    Ok(v)
}
