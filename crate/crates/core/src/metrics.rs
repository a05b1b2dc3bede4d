//! Global average precision over pooled top-k predictions.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub video_id: String,
    pub label_id: u32,
    pub confidence: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapResult {
    pub gap: f64,
    /// Number of pooled predictions.
    pub pooled_count: usize,
    /// Ground-truth labels summed over all videos.
    pub total_positives: usize,
}

/// Ground truth: label set per video id.
pub type Truth = BTreeMap<String, BTreeSet<u32>>;

/// The `k` most confident labels, confidence descending with ties broken by
/// ascending label id.
pub fn top_k_predictions(probs: &[f32], video_id: &str, k: usize) -> Vec<PredictionRecord> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(k)
        .map(|i| PredictionRecord { video_id: video_id.to_owned(), label_id: i as u32, confidence: probs[i] })
        .collect()
}

fn pooled_order(a: &PredictionRecord, b: &PredictionRecord) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| a.video_id.cmp(&b.video_id))
        .then(a.label_id.cmp(&b.label_id))
}

/// GAP of predictions pooled across all videos.
///
/// Records are sorted by confidence (descending; ties by video id, then
/// label id). With `P` the total number of true labels,
/// `gap = sum_i p(i) * rel(i) / P` where `p(i)` is the precision of the
/// first `i` records.
pub fn gap_at_k(records: &[PredictionRecord], truth: &Truth) -> Result<GapResult> {
    if let Some(r) = records.iter().find(|r| !truth.contains_key(&r.video_id)) {
        return Err(Error::Input(format!("prediction for unknown video `{}`", r.video_id)));
    }
    let total_positives: usize = truth.values().map(BTreeSet::len).sum();
    if total_positives == 0 {
        return Err(Error::Degenerate("ground truth contains no labels".into()));
    }
    let mut sorted: Vec<&PredictionRecord> = records.iter().collect();
    sorted.sort_by(|a, b| pooled_order(a, b));

    let mut hits = 0usize;
    let mut precision_sum = 0.0f64;
    for (i, r) in sorted.iter().enumerate() {
        if truth[&r.video_id].contains(&r.label_id) {
            hits += 1;
            precision_sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(GapResult {
        gap: precision_sum / total_positives as f64,
        pooled_count: records.len(),
        total_positives,
    })
}

pub const CSV_HEADER: &str = "VideoId,LabelConfidencePairs";

/// Writes predictions grouped by video, in first-appearance order, each
/// group sorted by confidence descending.
pub fn write_predictions_csv<W: Write>(records: &[PredictionRecord], mut w: W) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    let mut groups: Vec<(&str, Vec<&PredictionRecord>)> = Vec::new();
    for r in records {
        match groups.iter_mut().find(|(id, _)| *id == r.video_id) {
            Some((_, g)) => g.push(r),
            None => groups.push((&r.video_id, vec![r])),
        }
    }
    for (id, mut group) in groups {
        group.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.label_id.cmp(&b.label_id)));
        let pairs: Vec<String> = group.iter().map(|r| format!("{} {:.6}", r.label_id, r.confidence)).collect();
        writeln!(w, "{id},{}", pairs.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions_csv<R: BufRead>(r: R) -> Result<Vec<PredictionRecord>> {
    let mut lines = r.lines();
    match lines.next() {
        Some(Ok(h)) if h.trim_end() == CSV_HEADER => {}
        _ => return Err(Error::Format(format!("prediction csv must start with `{CSV_HEADER}`"))),
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, rest) = line
            .split_once(',')
            .ok_or_else(|| Error::Corruption(format!("line {} has no comma", n + 2)))?;
        let fields: Vec<&str> = rest.split_whitespace().collect();
        if !fields.len().is_multiple_of(2) {
            return Err(Error::Corruption(format!("line {} has an odd number of fields", n + 2)));
        }
        for pair in fields.chunks_exact(2) {
            let label_id = pair[0]
                .parse()
                .map_err(|_| Error::Corruption(format!("bad label `{}` on line {}", pair[0], n + 2)))?;
            let confidence = pair[1]
                .parse()
                .map_err(|_| Error::Corruption(format!("bad confidence `{}` on line {}", pair[1], n + 2)))?;
            out.push(PredictionRecord { video_id: id.to_owned(), label_id, confidence });
        }
    }
    Ok(out)
}
