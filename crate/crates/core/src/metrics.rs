//! Classification metrics over tweet-level labels.

use crate::dataset::LabelValue;
use crate::error::{Error, Result};

/// Per-class recall over samples with a known label, indexed by class.
/// `None` for a class with no known-label samples.
pub fn class_recalls(predictions: &[LabelValue], labels: &[LabelValue]) -> Result<[Option<f64>; 2]> {
    if predictions.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut hits = [0usize; 2];
    let mut totals = [0usize; 2];
    for (p, l) in predictions.iter().zip(labels) {
        if let Some(c) = l.class_index() {
            totals[c] += 1;
            if p == l {
                hits[c] += 1;
            }
        }
    }
    Ok([0, 1].map(|c| (totals[c] > 0).then(|| hits[c] as f64 / totals[c] as f64)))
}

/// Mean of the two per-class recalls; unknown-label samples are ignored.
pub fn balanced_accuracy(predictions: &[LabelValue], labels: &[LabelValue]) -> Result<f64> {
    match class_recalls(predictions, labels)? {
        [Some(r), Some(i)] => Ok((r + i) / 2.0),
        [None, _] => Err(Error::MissingClass(LabelValue::Relevant.as_str())),
        [_, None] => Err(Error::MissingClass(LabelValue::Irrelevant.as_str())),
    }
}

/// Mean recall over the classes that are present; used for small validation
/// sets where one class may be missing. Zero when no known labels exist.
pub fn mean_present_recall(predictions: &[LabelValue], labels: &[LabelValue]) -> Result<f64> {
    let present: Vec<f64> = class_recalls(predictions, labels)?.into_iter().flatten().collect();
    if present.is_empty() {
        return Ok(0.0);
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Plain accuracy over known-label samples.
pub fn accuracy(predictions: &[LabelValue], labels: &[LabelValue]) -> Result<f64> {
    class_recalls(predictions, labels)?;
    let (hits, total) = predictions
        .iter()
        .zip(labels)
        .filter(|(_, l)| l.is_known())
        .fold((0usize, 0usize), |(h, t), (p, l)| (h + usize::from(p == l), t + 1));
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}
