//! Wire types of the labeling service and an async client for them.

use std::time::Duration;

use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use url::Url;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub text: String,
    pub has_image: bool,
    /// Path of the image route, present when `has_image`.
    pub image_url: Option<String>,
    pub cluster: usize,
    /// 1-based rank within the cluster.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueResponse {
    pub tasks: Vec<Task>,
}

/// An annotator's decision. `NotSure` skips the sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubmittedLabel {
    Relevant,
    Irrelevant,
    NotSure,
}

impl SubmittedLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SubmittedLabel::Relevant => "relevant",
            SubmittedLabel::Irrelevant => "irrelevant",
            SubmittedLabel::NotSure => "not_sure",
        }
    }
}

impl std::str::FromStr for SubmittedLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "relevant" => Ok(SubmittedLabel::Relevant),
            "irrelevant" => Ok(SubmittedLabel::Irrelevant),
            "not_sure" => Ok(SubmittedLabel::NotSure),
            other => Err(format!("unknown label `{other}` (expected relevant, irrelevant or not_sure)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRequest {
    pub id: String,
    pub label: SubmittedLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelResponse {
    pub remaining: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PropagationState {
    Idle,
    Running,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusResponse {
    pub selected: usize,
    pub labeled: usize,
    pub skipped: usize,
    pub remaining: usize,
    pub propagation: PropagationState,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagateResponse {
    pub balanced_accuracy: Option<f64>,
    pub predicted_relevant: usize,
    pub predicted_irrelevant: usize,
}

/// Body of every non-2xx JSON response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("invalid service url: {0}")]
    Url(#[from] url::ParseError),
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    #[error("service returned {status}: {message}")]
    Api { status: u16, message: String },
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            ClientError::Http(e) => e.status().map(|s| s.as_u16()),
            ClientError::Url(_) => None,
        }
    }

    /// A propagation is already running.
    pub fn is_busy(&self) -> bool {
        self.status() == Some(StatusCode::CONFLICT.as_u16())
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct LabelingClient {
    base: Url,
    http: reqwest::Client,
}

impl LabelingClient {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080/`.
    pub fn new(base: &str) -> Result<Self> {
        let mut base = Url::parse(base)?;
        if !base.path().ends_with('/') {
            base.set_path(&format!("{}/", base.path()));
        }
        Ok(Self {
            base,
            http: reqwest::Client::new(),
        })
    }

    pub fn base_url(&self) -> &Url {
        &self.base
    }

    pub async fn queue(&self, limit: usize) -> Result<Vec<Task>> {
        let mut url = self.base.join("api/queue")?;
        url.query_pairs_mut().append_pair("limit", &limit.to_string());
        let resp: QueueResponse = decode(self.http.get(url).send().await?).await?;
        Ok(resp.tasks)
    }

    /// Returns the remaining pending count.
    pub async fn submit(&self, id: &str, label: SubmittedLabel) -> Result<usize> {
        let body = LabelRequest {
            id: id.to_string(),
            label,
        };
        let resp: LabelResponse = decode(self.http.post(self.base.join("api/labels")?).json(&body).send().await?).await?;
        Ok(resp.remaining)
    }

    pub async fn status(&self) -> Result<StatusResponse> {
        decode(self.http.get(self.base.join("api/status")?).send().await?).await
    }

    pub async fn propagate(&self) -> Result<PropagateResponse> {
        decode(self.http.post(self.base.join("api/propagate")?).send().await?).await
    }

    /// Image bytes and content type of sample `id`.
    pub async fn media(&self, id: &str) -> Result<(Vec<u8>, Option<String>)> {
        let mut url = self.base.join("media/")?;
        url.path_segments_mut().expect("http urls have paths").pop_if_empty().push(id);
        let resp = self.http.get(url).send().await?;
        let resp = check(resp).await?;
        let ctype = resp
            .headers()
            .get(reqwest::header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .map(str::to_string);
        Ok((resp.bytes().await?.to_vec(), ctype))
    }

    /// Polls the status until no task is pending.
    pub async fn wait_until_complete(&self, interval: Duration) -> Result<StatusResponse> {
        loop {
            let status = self.status().await?;
            if status.remaining == 0 {
                return Ok(status);
            }
            tokio::time::sleep(interval).await;
        }
    }
}

async fn check(resp: reqwest::Response) -> Result<reqwest::Response> {
    let status = resp.status();
    if status.is_success() {
        return Ok(resp);
    }
    let text = resp.text().await.unwrap_or_default();
    let message = serde_json_error(&text).unwrap_or(text);
    Err(ClientError::Api {
        status: status.as_u16(),
        message,
    })
}

fn serde_json_error(text: &str) -> Option<String> {
    serde_json::from_str::<ErrorBody>(text).ok().map(|b| b.error)
}

async fn decode<T: serde::de::DeserializeOwned>(resp: reqwest::Response) -> Result<T> {
    Ok(check(resp).await?.json().await?)
}
