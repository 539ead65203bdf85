//! Scoring estimators against ground truth: absolute estimation error,
//! precision-recall curves and average precision (AUPR).
//!
//! Records are ranked by score, highest first. Records sharing a score form
//! one block: the curve only has a point after the whole block is included,
//! which keeps results independent of record order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::CorrectnessVector;
use crate::error::{Error, Result};
use crate::fsutil;

pub fn estimation_error(estimate: f64, true_accuracy: f64) -> f64 {
    (estimate - true_accuracy).abs()
}

/// Which outcome counts as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositiveClass {
    /// Correct predictions are positives; high scores should mean correct.
    #[default]
    Correct,
    /// Wrong predictions are positives; low scores should mean wrong.
    Wrong,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// One point per distinct threshold, strictest first.
    pub points: Vec<PrPoint>,
    pub positive_ratio: f64,
}

impl PrCurve {
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["recall", "precision"])?;
        for p in &self.points {
            wtr.write_record([p.recall.to_string(), p.precision.to_string()])?;
        }
        wtr.flush()
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fsutil::write_atomic(path.as_ref(), |w| self.write_csv(w))
    }
}

/// Orients scores and labels so that higher score = more likely positive.
fn oriented(
    scores: &[f64],
    correctness: &CorrectnessVector,
    positive: PositiveClass,
) -> Result<(Vec<f64>, Vec<bool>)> {
    if scores.len() != correctness.len() {
        return Err(Error::DimensionMismatch {
            expected: correctness.len(),
            got: scores.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite);
    }
    let (scores, labels) = match positive {
        PositiveClass::Correct => (scores.to_vec(), correctness.values().to_vec()),
        PositiveClass::Wrong => (
            scores.iter().map(|s| -s).collect(),
            correctness.values().iter().map(|c| !c).collect(),
        ),
    };
    if !labels.iter().any(|&l| l) {
        return Err(Error::config("no positive records"));
    }
    Ok((scores, labels))
}

/// Walks tie blocks in descending score order, yielding
/// `(threshold, true positives so far, predicted positives so far)`.
fn blocks(scores: &[f64], labels: &[bool]) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = Vec::new();
    let (mut tp, mut seen) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += usize::from(labels[order[i]]);
            seen += 1;
            i += 1;
        }
        out.push((s, tp, seen));
    }
    out
}

pub fn pr_curve(
    scores: &[f64],
    correctness: &CorrectnessVector,
    positive: PositiveClass,
) -> Result<PrCurve> {
    let (scores, labels) = oriented(scores, correctness, positive)?;
    let total_pos = labels.iter().filter(|&&l| l).count();
    let sign = match positive {
        PositiveClass::Correct => 1.0,
        PositiveClass::Wrong => -1.0,
    };
    let points = blocks(&scores, &labels)
        .into_iter()
        .map(|(s, tp, seen)| PrPoint {
            threshold: sign * s,
            recall: tp as f64 / total_pos as f64,
            precision: tp as f64 / seen as f64,
        })
        .collect();
    Ok(PrCurve {
        points,
        positive_ratio: total_pos as f64 / labels.len() as f64,
    })
}

/// Average precision: the sum over tie blocks of the recall gained times the
/// precision after the block.
pub fn aupr(scores: &[f64], correctness: &CorrectnessVector, positive: PositiveClass) -> Result<f64> {
    let (scores, labels) = oriented(scores, correctness, positive)?;
    let total_pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut area = 0.0;
    let mut prev_tp = 0;
    for (_, tp, seen) in blocks(&scores, &labels) {
        if tp > prev_tp {
            area += (tp - prev_tp) as f64 * (tp as f64 / seen as f64);
            prev_tp = tp;
        }
    }
    Ok(area / total_pos)
}
