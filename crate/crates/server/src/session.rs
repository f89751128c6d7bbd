//! Annotation session: the selected tasks and the label store.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use evfilter_client::SubmittedLabel;
use evfilter_core::dataset::{AlignedDataset, LabelValue};
use evfilter_core::selection::SelectionRow;
use serde::{Deserialize, Serialize};

use crate::ServiceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskStatus {
    Pending,
    Labeled,
    Skipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelTask {
    pub id: String,
    /// Dataset row of the sample.
    pub row: usize,
    pub text: String,
    pub has_image: bool,
    pub cluster: usize,
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Counts {
    pub selected: usize,
    pub labeled: usize,
    pub skipped: usize,
    pub remaining: usize,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Snapshot {
    labels: BTreeMap<String, SubmittedLabel>,
}

#[derive(Debug)]
pub struct Session {
    tasks: Vec<LabelTask>,
    index: HashMap<String, usize>,
    labels: BTreeMap<String, SubmittedLabel>,
    store: Option<PathBuf>,
}

impl Session {
    /// Tasks are ordered by (cluster, rank). An existing label store at
    /// `store` is loaded; its ids must all belong to the selection.
    pub fn new(selection: &[SelectionRow], dataset: &AlignedDataset, store: Option<PathBuf>) -> Result<Self, ServiceError> {
        let mut tasks = Vec::with_capacity(selection.len());
        for s in selection {
            let row = dataset
                .row_of(&s.id)
                .ok_or_else(|| ServiceError::Setup(format!("selected id `{}` is not in the dataset", s.id)))?;
            let record = &dataset.records[row];
            tasks.push(LabelTask {
                id: s.id.clone(),
                row,
                text: record.text.clone(),
                has_image: record.image.is_some(),
                cluster: s.cluster,
                rank: s.rank,
            });
        }
        tasks.sort_by(|a, b| (a.cluster, a.rank, &a.id).cmp(&(b.cluster, b.rank, &b.id)));
        let mut index = HashMap::with_capacity(tasks.len());
        for (k, t) in tasks.iter().enumerate() {
            if index.insert(t.id.clone(), k).is_some() {
                return Err(ServiceError::Setup(format!("id `{}` selected twice", t.id)));
            }
        }
        let labels = match &store {
            Some(path) if path.exists() => load_snapshot(path)?,
            _ => BTreeMap::new(),
        };
        if let Some(stray) = labels.keys().find(|id| !index.contains_key(*id)) {
            return Err(ServiceError::Setup(format!(
                "label store has `{stray}`, which is not part of the selection"
            )));
        }
        Ok(Self {
            tasks,
            index,
            labels,
            store,
        })
    }

    pub fn status_of(&self, id: &str) -> Option<TaskStatus> {
        self.index.get(id)?;
        Some(match self.labels.get(id) {
            None => TaskStatus::Pending,
            Some(SubmittedLabel::NotSure) => TaskStatus::Skipped,
            Some(_) => TaskStatus::Labeled,
        })
    }

    pub fn task(&self, id: &str) -> Option<&LabelTask> {
        self.index.get(id).map(|&k| &self.tasks[k])
    }

    /// Up to `limit` pending tasks in (cluster, rank) order.
    pub fn next_batch(&self, limit: usize) -> Vec<&LabelTask> {
        self.tasks
            .iter()
            .filter(|t| !self.labels.contains_key(&t.id))
            .take(limit)
            .collect()
    }

    /// Upserts a label, persists the store, and returns the pending count.
    /// An unknown id leaves the session unchanged.
    pub fn submit(&mut self, id: &str, label: SubmittedLabel) -> Result<usize, ServiceError> {
        if !self.index.contains_key(id) {
            return Err(ServiceError::UnknownId(id.to_string()));
        }
        let previous = self.labels.insert(id.to_string(), label);
        if let Err(e) = self.persist() {
            match previous {
                Some(p) => self.labels.insert(id.to_string(), p),
                None => self.labels.remove(id),
            };
            return Err(e);
        }
        Ok(self.counts().remaining)
    }

    pub fn counts(&self) -> Counts {
        let skipped = self.labels.values().filter(|&&l| l == SubmittedLabel::NotSure).count();
        let labeled = self.labels.len() - skipped;
        Counts {
            selected: self.tasks.len(),
            labeled,
            skipped,
            remaining: self.tasks.len() - self.labels.len(),
        }
    }

    /// Dataset rows with a relevance decision; skipped samples are excluded.
    pub fn training_labels(&self) -> Vec<(usize, LabelValue)> {
        self.tasks
            .iter()
            .filter_map(|t| match self.labels.get(&t.id)? {
                SubmittedLabel::Relevant => Some((t.row, LabelValue::Relevant)),
                SubmittedLabel::Irrelevant => Some((t.row, LabelValue::Irrelevant)),
                SubmittedLabel::NotSure => None,
            })
            .collect()
    }

    fn persist(&self) -> Result<(), ServiceError> {
        let Some(path) = &self.store else {
            return Ok(());
        };
        let snapshot = Snapshot {
            labels: self.labels.clone(),
        };
        let body = serde_json::to_vec_pretty(&snapshot).expect("snapshot serializes");
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, body).map_err(|e| ServiceError::Store(format!("{}: {e}", tmp.display())))?;
        fs::rename(&tmp, path).map_err(|e| ServiceError::Store(format!("{}: {e}", path.display())))
    }
}

fn load_snapshot(path: &Path) -> Result<BTreeMap<String, SubmittedLabel>, ServiceError> {
    let text = fs::read_to_string(path).map_err(|e| ServiceError::Store(format!("{}: {e}", path.display())))?;
    let snapshot: Snapshot =
        serde_json::from_str(&text).map_err(|e| ServiceError::Store(format!("{}: {e}", path.display())))?;
    Ok(snapshot.labels)
}
