//! Ground-truth and detection evaluation protocols.
//!
//! Under `gt` the prediction is the highest-scoring annotated region and must
//! equal the target. Under `det` it is the highest-scoring detected region and
//! its box must overlap the target box with IoU strictly above 0.5. Argmax
//! ties go to the lowest index. Instances are scored in parallel and collected
//! in dataset order, so reports do not depend on scheduling.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, RegionSet};
use crate::error::{Error, Result};
use crate::language::encode_tokens;
use crate::matching::{score_regions, Ablation};
use crate::params::ModelParams;
use crate::visual::BBox;

pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Gt,
    Det,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Gt => "gt",
            Protocol::Det => "det",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gt" => Ok(Protocol::Gt),
            "det" => Ok(Protocol::Det),
            other => Err(Error::Config(format!("unknown protocol {other:?}, expected gt or det"))),
        }
    }
}

/// Intersection over union of continuous boxes; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_br.min(b.x_br) - a.x_tl.max(b.x_tl)).max(0.0);
    let ih = (a.y_br.min(b.y_br) - a.y_tl.max(b.y_tl)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Index of the largest score, ties to the lowest index.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Winning score minus the runner-up; absent with fewer than two candidates.
pub fn margin_over_runner_up(scores: &[f64], winner: usize) -> Option<f64> {
    scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != winner)
        .map(|(_, &s)| s)
        .reduce(f64::max)
        .map(|r| scores[winner] - r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub expression_id: usize,
    pub image_id: usize,
    pub split: String,
    pub target: usize,
    pub predicted: Option<usize>,
    pub predicted_box: Option<BBox>,
    pub correct: bool,
    pub margin: Option<f64>,
    /// Overlap with the target box (det only).
    pub iou: Option<f64>,
    /// Why the instance could not be scored, if it could not.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAccuracy {
    pub split: String,
    pub correct: usize,
    pub count: usize,
    pub accuracy: f64,
}

impl SplitAccuracy {
    fn from_records<'a>(split: &str, records: impl Iterator<Item = &'a InstanceRecord>) -> Self {
        let (mut correct, mut count) = (0, 0);
        for r in records {
            count += 1;
            correct += usize::from(r.correct);
        }
        Self {
            split: split.to_string(),
            correct,
            count,
            accuracy: if count == 0 { 0.0 } else { correct as f64 / count as f64 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub ablation: Ablation,
    pub splits: Vec<SplitAccuracy>,
    pub overall: SplitAccuracy,
    pub records: Vec<InstanceRecord>,
}

impl EvalReport {
    fn new(protocol: Protocol, ablation: Ablation, records: Vec<InstanceRecord>) -> Self {
        let mut names: Vec<&str> = Vec::new();
        for r in &records {
            if !names.contains(&r.split.as_str()) {
                names.push(&r.split);
            }
        }
        let splits = names
            .iter()
            .map(|s| SplitAccuracy::from_records(s, records.iter().filter(|r| r.split == *s)))
            .collect();
        let overall = SplitAccuracy::from_records("all", records.iter());
        Self {
            protocol,
            ablation,
            splits,
            overall,
            records,
        }
    }

    pub fn split(&self, name: &str) -> Option<&SplitAccuracy> {
        self.splits.iter().find(|s| s.split == name)
    }

    /// Splits as rows, accuracy in percent.
    pub fn summary_table(&self) -> String {
        let mut out = format!("{:<10} {:>8} {:>8} {:>9}\n", "split", "correct", "count", self.protocol);
        for s in self.splits.iter().chain(std::iter::once(&self.overall)) {
            out += &format!("{:<10} {:>8} {:>8} {:>8.2}%\n", s.split, s.correct, s.count, 100.0 * s.accuracy);
        }
        out
    }

    /// One JSON record per line.
    pub fn records_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out += &serde_json::to_string(r)?;
            out.push('\n');
        }
        Ok(out)
    }
}

fn evaluate_instance(
    dataset: &Dataset,
    params: &ModelParams,
    ablation: &Ablation,
    protocol: Protocol,
    index: usize,
) -> InstanceRecord {
    let e = &dataset.expressions[index];
    let image = dataset.image_of(e);
    let set = match protocol {
        Protocol::Gt => RegionSet::Annotated,
        Protocol::Det => RegionSet::Detected,
    };
    let mut record = InstanceRecord {
        expression_id: e.id,
        image_id: e.image_id,
        split: e.split.clone(),
        target: e.target,
        predicted: None,
        predicted_box: None,
        correct: false,
        margin: None,
        iou: None,
        error: None,
    };
    if image.regions(set).is_empty() {
        record.error = Some(format!("image {} has no {} regions", image.id, protocol));
        return record;
    }
    let scored = encode_tokens(&e.tokens, &dataset.vocab)
        .and_then(|ids| score_regions(params, &image.all_region_features(set), &ids, ablation, false));
    let scores = match scored {
        Ok(r) => r.scores,
        Err(err) => {
            record.error = Some(err.to_string());
            return record;
        }
    };
    let Some(winner) = argmax(&scores) else {
        return record;
    };
    let predicted_box = image.regions(set)[winner].bbox;
    record.predicted = Some(winner);
    record.predicted_box = Some(predicted_box);
    record.margin = margin_over_runner_up(&scores, winner);
    record.correct = match protocol {
        Protocol::Gt => winner == e.target,
        Protocol::Det => {
            let overlap = iou(&predicted_box, &image.regions[e.target].bbox);
            record.iou = Some(overlap);
            overlap > IOU_THRESHOLD
        }
    };
    record
}

/// Scores `instances` (expression indices) under `protocol`.
pub fn evaluate(
    dataset: &Dataset,
    params: &ModelParams,
    ablation: &Ablation,
    protocol: Protocol,
    instances: &[usize],
) -> Result<EvalReport> {
    if protocol == Protocol::Det && !dataset.has_detections() {
        return Err(Error::Config("det protocol needs detected regions, the dataset has none".into()));
    }
    let records = instances
        .par_iter()
        .map(|&i| evaluate_instance(dataset, params, ablation, protocol, i))
        .collect();
    Ok(EvalReport::new(protocol, *ablation, records))
}

/// `gt` protocol over every expression.
pub fn evaluate_gt(dataset: &Dataset, params: &ModelParams, ablation: &Ablation) -> Result<EvalReport> {
    let all: Vec<usize> = (0..dataset.expressions.len()).collect();
    evaluate(dataset, params, ablation, Protocol::Gt, &all)
}

/// `det` protocol over every expression.
pub fn evaluate_det(dataset: &Dataset, params: &ModelParams, ablation: &Ablation) -> Result<EvalReport> {
    let all: Vec<usize> = (0..dataset.expressions.len()).collect();
    evaluate(dataset, params, ablation, Protocol::Det, &all)
}
