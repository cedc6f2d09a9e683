//! Evaluation formulas (IoU, average precision, MAP@50, perplexity, BPC)
//! and the multi-task scoring harness that assembles merge reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toybase::tasks::Split;
use crate::toybase::{
    apply_lora, base_as_adapted, task_loss, unflatten, BaseModel, FlatParams, TaskSpec,
};

/// Method label for the untouched base model (zero adapter).
pub const ORIGINAL_MODEL: &str = "original_model";
/// Method label for each task's own fine-tuned adapter.
pub const ORIGINAL_LORA: &str = "original_lora";
/// Metric name for the raw test loss.
pub const METRIC_TASK_LOSS: &str = "task_loss";
/// Metric name for the accuracy-like score 1/(1+loss).
pub const METRIC_SCORE: &str = "score";

/// Axis-aligned box with non-negative extent on both axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        if !(x_min.is_finite() && y_min.is_finite() && x_max.is_finite() && y_max.is_finite()) {
            return Err(Error::InvalidInput("box coordinates must be finite".into()));
        }
        if x_max < x_min || y_max < y_min {
            return Err(Error::InvalidInput(format!(
                "degenerate box ({x_min},{y_min})-({x_max},{y_max})"
            )));
        }
        Ok(BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

/// One scored, classed box prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub score: f64,
    pub class_id: usize,
}

/// Intersection area over union area. Two zero-area boxes (empty union)
/// give 0.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// Average precision at one IoU threshold, by all-point precision-recall
/// integration. Detections are matched greedily in descending score
/// order and each ground truth matches at most once.
///
/// With no ground truths the value is defined as 0, whether or not
/// detections are present: every detection is then a false positive, and
/// an empty prediction list has nothing to score.
pub fn average_precision(
    dets: &[Detection],
    gts: &[BoundingBox],
    iou_thresh: f64,
) -> Result<f64> {
    if !(iou_thresh > 0.0 && iou_thresh <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "iou threshold must lie in (0, 1], got {iou_thresh}"
        )));
    }
    for d in dets {
        if !d.score.is_finite() {
            return Err(Error::InvalidInput("detection scores must be finite".into()));
        }
    }
    if gts.is_empty() {
        return Ok(0.0);
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .score
            .partial_cmp(&dets[i].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut matched = vec![false; gts.len()];
    let mut hits = Vec::with_capacity(dets.len());
    for &i in &order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if matched[g] {
                continue;
            }
            let overlap = iou(&dets[i].bbox, gt);
            if overlap >= iou_thresh {
                let better = match best {
                    None => true,
                    Some((_, b)) => overlap > b,
                };
                if better {
                    best = Some((g, overlap));
                }
            }
        }
        match best {
            Some((g, _)) => {
                matched[g] = true;
                hits.push(true);
            }
            None => hits.push(false),
        }
    }
    Ok(ap_from_hits(&hits, gts.len()))
}

/// All-point AP from the ranked hit/miss sequence.
fn ap_from_hits(hits: &[bool], n_gt: usize) -> f64 {
    let mut precisions = Vec::with_capacity(hits.len());
    let mut recalls = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &hit) in hits.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precisions.push(tp as f64 / (k + 1) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    // precision envelope from the right, then sum over recall increments
    let mut envelope = precisions.clone();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..envelope.len() {
        if recalls[k] > prev_recall {
            ap += (recalls[k] - prev_recall) * envelope[k];
            prev_recall = recalls[k];
        }
    }
    ap
}

/// Arithmetic mean of per-class average precisions.
pub fn map50(per_class_ap: &[f64]) -> Result<f64> {
    if per_class_ap.is_empty() {
        return Err(Error::InvalidInput("no per-class AP values".into()));
    }
    Ok(per_class_ap.iter().sum::<f64>() / per_class_ap.len() as f64)
}

/// exp of the negative mean token log probability.
pub fn perplexity(token_log_probs: &[f64]) -> Result<f64> {
    if token_log_probs.is_empty() {
        return Err(Error::InvalidInput("no token log probabilities".into()));
    }
    for &lp in token_log_probs {
        if !lp.is_finite() || lp > 0.0 {
            return Err(Error::InvalidInput(format!(
                "log probabilities must be finite and non-positive, got {lp}"
            )));
        }
    }
    let mean = token_log_probs.iter().sum::<f64>() / token_log_probs.len() as f64;
    Ok((-mean).exp())
}

/// Bits per character: log2(ppl) normalized by characters per word.
pub fn bpc(ppl: f64, chars_per_word: f64) -> Result<f64> {
    if !(ppl >= 1.0 && ppl.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "perplexity must be at least 1, got {ppl}"
        )));
    }
    if !(chars_per_word > 0.0 && chars_per_word.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "chars_per_word must be positive, got {chars_per_word}"
        )));
    }
    Ok(ppl.log2() / chars_per_word)
}

/// One scored cell of a merge report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub task_id: String,
    pub metric: String,
    pub value: f64,
}

/// Per-method, per-task metric table. Averages are never stored; they
/// are recomputed from the rows on demand, including after a load.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MergeReport {
    pub rows: Vec<ReportRow>,
}

impl MergeReport {
    pub fn push(&mut self, method: &str, task_id: &str, metric: &str, value: f64) {
        self.rows.push(ReportRow {
            method: method.to_string(),
            task_id: task_id.to_string(),
            metric: metric.to_string(),
            value,
        });
    }

    /// Unweighted mean of one metric across a method's task rows.
    pub fn average(&self, method: &str, metric: &str) -> Option<f64> {
        let values: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.metric == metric)
            .map(|r| r.value)
            .collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    }

    /// All method labels present, in first-appearance order.
    pub fn methods(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for row in &self.rows {
            if !seen.contains(&row.method) {
                seen.push(row.method.clone());
            }
        }
        seen
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("method,task_id,metric,value\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.method, row.task_id, row.metric, row.value
            ));
        }
        out
    }

    pub fn from_csv_str(text: &str) -> Result<MergeReport> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidInput("empty report".into()))?;
        if header != "method,task_id,metric,value" {
            return Err(Error::InvalidInput(format!(
                "unexpected report header: {header}"
            )));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(Error::InvalidInput(format!(
                    "report line {} has {} fields",
                    i + 2,
                    parts.len()
                )));
            }
            let value: f64 = parts[3]
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad value on line {}", i + 2)))?;
            rows.push(ReportRow {
                method: parts[0].to_string(),
                task_id: parts[1].to_string(),
                metric: parts[2].to_string(),
                value,
            });
        }
        Ok(MergeReport { rows })
    }

    pub fn to_json_string(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidInput(format!("report serialization failed: {e}")))
    }

    pub fn from_json_str(text: &str) -> Result<MergeReport> {
        serde_json::from_str(text)
            .map_err(|e| Error::InvalidInput(format!("report deserialization failed: {e}")))
    }
}

fn score_of(loss: f64) -> f64 {
    1.0 / (1.0 + loss)
}

fn push_scores(report: &mut MergeReport, method: &str, task_id: &str, loss: f64) {
    report.push(method, task_id, METRIC_TASK_LOSS, loss);
    report.push(method, task_id, METRIC_SCORE, score_of(loss));
}

/// Scores every merged adapter on every task's test split, alongside the
/// untouched base model (zero adapter) and each task's own fine-tuned
/// adapter. A task missing from `per_task_adapters` (its training split
/// was empty) falls back to the zero adapter for the per-task row.
pub fn multitask_report(
    base: &BaseModel,
    merged_adapters: &BTreeMap<String, FlatParams>,
    per_task_adapters: &BTreeMap<String, FlatParams>,
    tasks: &[TaskSpec],
) -> Result<MergeReport> {
    if tasks.is_empty() {
        return Err(Error::InvalidInput("no tasks to report on".into()));
    }
    let mut report = MergeReport::default();
    let plain = base_as_adapted(base);
    for task in tasks {
        let data = task.dataset(Split::Test)?;
        let base_loss = task_loss(&plain, &data)?;
        push_scores(&mut report, ORIGINAL_MODEL, &task.task_id, base_loss);

        let own_loss = match per_task_adapters.get(&task.task_id) {
            Some(flat) => {
                let adapted = apply_lora(base, &unflatten(flat)?)?;
                task_loss(&adapted, &data)?
            }
            None => base_loss,
        };
        push_scores(&mut report, ORIGINAL_LORA, &task.task_id, own_loss);

        for (method, flat) in merged_adapters {
            let adapted = apply_lora(base, &unflatten(flat)?)?;
            let loss = task_loss(&adapted, &data)?;
            push_scores(&mut report, method, &task.task_id, loss);
        }
    }
    Ok(report)
}

/// Interprets each output row's first four coordinates as a center-size
/// box (cx, cy, w, h); widths and heights are taken by magnitude.
pub fn boxes_from_outputs(rows: &[Vec<f64>]) -> Result<Vec<BoundingBox>> {
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        if row.len() < 4 {
            return Err(Error::InvalidInput(
                "box rows need at least four coordinates".into(),
            ));
        }
        let (cx, cy) = (row[0], row[1]);
        let (hw, hh) = (row[2].abs() / 2.0, row[3].abs() / 2.0);
        out.push(BoundingBox::new(cx - hw, cy - hh, cx + hw, cy + hh)?);
    }
    Ok(out)
}
