use std::net::SocketAddr;
use std::sync::Arc;

use evfilter_client::{LabelingClient, PropagationState, SubmittedLabel};
use evfilter_core::dataset::LabelValue;
use evfilter_core::harness::{generate_synthetic, SyntheticSpec};
use evfilter_core::neural::ModelKind;
use evfilter_core::pipeline::{oracle_labels, RELEVANT_IDS_FILE, select_for_labeling, ModelChoice, PipelineConfig, Prepared, TrainSettings};
use evfilter_core::selection::{SelectionMethod, SelectionRow};
use evfilter_server::{bind, serve, AppState, ServiceConfig};

struct Fixture {
    client: LabelingClient,
    truth: Vec<(String, LabelValue)>,
    n: usize,
    _dir: tempfile::TempDir,
}

fn pipeline(epochs: usize) -> PipelineConfig {
    PipelineConfig {
        train: TrainSettings {
            epochs,
            graph_hidden: 64,
            graph_lr: 1e-3,
            ..TrainSettings::default()
        },
        ..PipelineConfig::default()
    }
}

async fn start(budget: usize, epochs: usize, with_images: bool) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let mut corpus = generate_synthetic(&SyntheticSpec {
        n: 300,
        ..SyntheticSpec::default()
    })
    .unwrap();
    if with_images {
        std::fs::write(dir.path().join("s0000.png"), b"\x89PNG fake").unwrap();
        corpus.records[0].image = Some("s0000.png".into());
        corpus.records[1].image = Some("missing.jpg".into());
    }
    let cfg = pipeline(epochs);
    let prepared = Prepared::new(corpus.text_dataset().unwrap(), &cfg).unwrap();
    let stage = select_for_labeling(&prepared, &cfg, SelectionMethod::Betweenness, budget, 1).unwrap();
    let rows = stage.rows(&prepared);
    let truth = oracle_labels(&prepared, &rows)
        .into_iter()
        .map(|(r, l)| (prepared.dataset.records[r].id.clone(), l))
        .collect();
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
    let n = prepared.eval_rows.len();
    let config = ServiceConfig {
        model: ModelChoice::Neural(ModelKind::NsageLin),
        pipeline: cfg,
        seed: 1,
        label_store: Some(dir.path().join("labels.json")),
        output_dir: Some(dir.path().to_path_buf()),
        media_root: dir.path().to_path_buf(),
        static_dir: None,
    };
    let state = AppState::new(Arc::new(prepared), &selection, config).unwrap();
    let (listener, addr) = bind(SocketAddr::from(([127, 0, 0, 1], 0))).await.unwrap();
    tokio::spawn(serve(listener, state));
    Fixture {
        client: LabelingClient::new(&format!("http://{addr}/")).unwrap(),
        truth,
        n,
        _dir: dir,
    }
}

fn truth_of(f: &Fixture, id: &str) -> SubmittedLabel {
    match f.truth.iter().find(|(i, _)| i == id).unwrap().1 {
        LabelValue::Relevant => SubmittedLabel::Relevant,
        _ => SubmittedLabel::Irrelevant,
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn scripted_labeling_round_trip() {
    let f = start(10, 3000, false).await;
    let tasks = f.client.queue(10).await.unwrap();
    assert_eq!(tasks.len(), 10);
    let order: Vec<(usize, usize)> = tasks.iter().map(|t| (t.cluster, t.rank)).collect();
    let mut sorted = order.clone();
    sorted.sort();
    assert_eq!(order, sorted);

    // the not_sure sample is one whose class is represented elsewhere
    let skip = tasks
        .iter()
        .position(|t| {
            let l = truth_of(&f, &t.id);
            tasks.iter().filter(|u| truth_of(&f, &u.id) == l).count() > 1
        })
        .unwrap();
    let mut remaining = usize::MAX;
    for (k, t) in tasks.iter().enumerate() {
        let label = if k == skip { SubmittedLabel::NotSure } else { truth_of(&f, &t.id) };
        remaining = f.client.submit(&t.id, label).await.unwrap();
    }
    assert_eq!(remaining, 0);
    let status = f.client.status().await.unwrap();
    assert_eq!((status.selected, status.labeled, status.skipped, status.remaining), (10, 9, 1, 0));
    assert_eq!(status.propagation, PropagationState::Idle);
    assert!(f.client.queue(10).await.unwrap().is_empty());

    let (a, second) = tokio::join!(f.client.propagate(), async {
        // wait until the first trigger is observably running, then collide
        loop {
            let s = f.client.status().await.unwrap();
            assert_ne!(s.propagation, PropagationState::Done, "first propagation finished before the probe");
            if s.propagation == PropagationState::Running {
                break;
            }
            tokio::time::sleep(std::time::Duration::from_millis(2)).await;
        }
        f.client.propagate().await
    });
    let metrics = a.unwrap();
    let err = second.unwrap_err();
    assert!(err.is_busy(), "{err}");
    assert_eq!(metrics.predicted_relevant + metrics.predicted_irrelevant, f.n);
    assert!(metrics.balanced_accuracy.is_some());
    assert_eq!(f.client.status().await.unwrap().propagation, PropagationState::Done);

    // frozen labels give identical metrics
    assert_eq!(f.client.propagate().await.unwrap(), metrics);
    let ids = std::fs::read_to_string(f._dir.path().join(RELEVANT_IDS_FILE)).unwrap();
    assert_eq!(ids.lines().count(), metrics.predicted_relevant);
}

#[tokio::test]
async fn rejections() {
    let f = start(6, 20, true).await;
    let err = f.client.submit("not-an-id", SubmittedLabel::Relevant).await.unwrap_err();
    assert_eq!(err.status(), Some(400));
    assert_eq!(f.client.status().await.unwrap().remaining, 6);

    let tasks = f.client.queue(100).await.unwrap();
    assert_eq!(tasks.len(), 6);
    assert!(f.client.queue(0).await.unwrap().is_empty());
    for t in &tasks {
        f.client.submit(&t.id, SubmittedLabel::Irrelevant).await.unwrap();
    }
    let err = f.client.propagate().await.unwrap_err();
    assert_eq!(err.status(), Some(422));
    assert!(err.to_string().contains("`relevant`"), "{err}");
    assert_eq!(f.client.status().await.unwrap().propagation, PropagationState::Idle);

    let (bytes, ctype) = f.client.media("s0000").await.unwrap();
    assert_eq!(bytes, b"\x89PNG fake");
    assert_eq!(ctype.as_deref(), Some("image/png"));
    assert_eq!(f.client.media("s0001").await.unwrap_err().status(), Some(404));
    assert_eq!(f.client.media("s0002").await.unwrap_err().status(), Some(404));

    let index = reqwest::get(f.client.base_url().as_str()).await.unwrap();
    assert!(index.status().is_success());
    assert!(index.text().await.unwrap().contains("/api/queue"));
}
