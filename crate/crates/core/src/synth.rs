//! Synthetic softmax logs with known ground truth.
//!
//! Each record gets a true class, and with probability `target_acc` the
//! classifier's top logit is placed on it (otherwise on a uniformly chosen
//! other class). The top logit exceeds the strongest competitor by a margin
//! drawn from a normal distribution; wrong predictions draw from a narrower,
//! lower one, so confidence carries information about correctness. The
//! logits are finally multiplied by `temperature_distortion` before the
//! softmax: values above one make the classifier overconfident relative to
//! its accuracy, values below one underconfident.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{Dataset, Label, SoftmaxRecord};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub n: usize,
    pub classes: usize,
    /// Probability that a non-NULL record is classified correctly.
    pub target_acc: f64,
    /// Mean logit gap between the predicted class and the runner-up for
    /// correct predictions.
    pub margin_mean: f64,
    pub margin_std: f64,
    /// Wrong predictions draw their margin from `N(ratio * mean, ratio * std)`.
    pub wrong_margin_ratio: f64,
    pub temperature_distortion: f64,
    pub null_fraction: f64,
    pub seed: u64,
    pub id_prefix: String,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            n: 10_000,
            classes: 10,
            target_acc: 0.9,
            margin_mean: CALIBRATED_MARGIN_MEAN,
            margin_std: CALIBRATED_MARGIN_STD,
            wrong_margin_ratio: CALIBRATED_WRONG_RATIO,
            temperature_distortion: 1.0,
            null_fraction: 0.0,
            seed: 0,
            id_prefix: "s".into(),
        }
    }
}

/// With these margins and no distortion, mean max probability matches
/// accuracy (within 0.01) for `target_acc` near 0.85 with ten classes.
pub const CALIBRATED_MARGIN_MEAN: f64 = 4.0;
pub const CALIBRATED_MARGIN_STD: f64 = 1.0;
pub const CALIBRATED_WRONG_RATIO: f64 = 0.25;

/// Overconfident regime: smaller, wider correct margins, wrong predictions
/// close to ties, and logits doubled before the softmax. Confidence-based
/// estimates land well above the true accuracy, yet the entropy-selected
/// records still mix correct and wrong predictions.
pub const OVERCONFIDENT_MARGIN_MEAN: f64 = 2.5;
pub const OVERCONFIDENT_MARGIN_STD: f64 = 1.25;
pub const OVERCONFIDENT_WRONG_RATIO: f64 = 0.2;
pub const OVERCONFIDENT_DISTORTION: f64 = 2.0;

impl ScenarioSpec {
    pub fn new(n: usize, classes: usize, target_acc: f64, seed: u64) -> Self {
        ScenarioSpec {
            n,
            classes,
            target_acc,
            seed,
            ..ScenarioSpec::default()
        }
    }

    /// Shifted, overconfident user data; see [`OVERCONFIDENT_DISTORTION`].
    pub fn overconfident(n: usize, classes: usize, target_acc: f64, seed: u64) -> Self {
        ScenarioSpec::new(n, classes, target_acc, seed)
            .with_distortion(OVERCONFIDENT_DISTORTION)
            .with_margins(
                OVERCONFIDENT_MARGIN_MEAN,
                OVERCONFIDENT_MARGIN_STD,
                OVERCONFIDENT_WRONG_RATIO,
            )
    }

    pub fn with_distortion(mut self, distortion: f64) -> Self {
        self.temperature_distortion = distortion;
        self
    }

    pub fn with_margins(mut self, mean: f64, std: f64, wrong_ratio: f64) -> Self {
        self.margin_mean = mean;
        self.margin_std = std;
        self.wrong_margin_ratio = wrong_ratio;
        self
    }

    pub fn with_null_fraction(mut self, fraction: f64) -> Self {
        self.null_fraction = fraction;
        self
    }

    pub fn with_prefix(mut self, prefix: impl Into<String>) -> Self {
        self.id_prefix = prefix.into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("classes must be at least 2"));
        }
        if !(self.target_acc > 0.0 && self.target_acc <= 1.0) {
            return Err(Error::config(format!(
                "target accuracy {} outside (0, 1]",
                self.target_acc
            )));
        }
        if !(self.margin_mean > 0.0) || !(self.margin_std >= 0.0) {
            return Err(Error::config("margin mean must be positive and std nonnegative"));
        }
        if !(self.wrong_margin_ratio > 0.0) {
            return Err(Error::config("wrong_margin_ratio must be positive"));
        }
        if !(self.temperature_distortion > 0.0 && self.temperature_distortion.is_finite()) {
            return Err(Error::config("temperature_distortion must be positive"));
        }
        if !(0.0..1.0).contains(&self.null_fraction) {
            return Err(Error::config("null_fraction must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Accuracy the generator converges to as `n` grows.
    pub fn expected_accuracy(&self) -> f64 {
        self.target_acc * (1.0 - self.null_fraction)
    }
}

fn softmax_scaled(logits: &[f64], scale: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| ((z - max) * scale).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

fn draw_margin<R: Rng>(rng: &mut R, mean: f64, std: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    (mean + std * z).abs()
}

/// Generates a fully labeled dataset. Deterministic in `spec.seed`.
pub fn generate(spec: &ScenarioSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed);
    let c = spec.classes;
    let width = (spec.n.max(1) - 1).to_string().len().max(6);
    let mut records = Vec::with_capacity(spec.n);
    let mut logits = vec![0.0; c];
    for i in 0..spec.n {
        let is_null = spec.null_fraction > 0.0 && rng.gen::<f64>() < spec.null_fraction;
        let truth = rng.gen_range(0..c);
        let correct = !is_null && rng.gen::<f64>() < spec.target_acc;
        let top = if is_null {
            rng.gen_range(0..c)
        } else if correct {
            truth
        } else {
            let other = rng.gen_range(0..c - 1);
            if other >= truth {
                other + 1
            } else {
                other
            }
        };
        let mut runner_up = f64::NEG_INFINITY;
        for (k, z) in logits.iter_mut().enumerate() {
            if k != top {
                *z = StandardNormal.sample(&mut rng);
                runner_up = runner_up.max(*z);
            }
        }
        let margin = if correct {
            draw_margin(&mut rng, spec.margin_mean, spec.margin_std)
        } else {
            let r = spec.wrong_margin_ratio;
            draw_margin(&mut rng, spec.margin_mean * r, spec.margin_std * r)
        };
        // Strictly positive so the top class is the unique argmax.
        logits[top] = runner_up + margin.max(1e-9);
        let distortion = if is_null {
            spec.temperature_distortion / 2.0
        } else {
            spec.temperature_distortion
        };
        let probs = softmax_scaled(&logits, distortion);
        let label = if is_null {
            Label::Null
        } else {
            Label::Class(truth)
        };
        let id = format!("{}{:0width$}", spec.id_prefix, i, width = width);
        records.push(SoftmaxRecord::new(id, probs, Some(label))?);
    }
    Dataset::new(records)
}

/// Randomly partitions `dataset` into disjoint parts of the given fractions.
/// Sizes are rounded; the last part absorbs the rounding remainder.
pub fn split(dataset: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(*f >= 0.0)) {
        return Err(Error::config("fractions must be nonnegative and nonempty"));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("fractions sum to {total}, expected 1")));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed));
    let mut sizes: Vec<usize> = fractions.iter().map(|f| (f * n as f64).round() as usize).collect();
    let assigned: usize = sizes[..sizes.len() - 1].iter().sum();
    let last = sizes.len() - 1;
    sizes[last] = n.saturating_sub(assigned);
    if assigned > n {
        return Err(Error::config("fractions exceed the dataset size after rounding"));
    }
    let records = dataset.records();
    let mut parts = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for size in sizes {
        let part = order[start..start + size]
            .iter()
            .map(|&i| records[i].clone())
            .collect();
        parts.push(Dataset::new(part)?);
        start += size;
    }
    Ok(parts)
}

/// Relabels records by sampling labels from a categorical distribution, used
/// to build datasets whose calibration is known exactly. `probs_for_label`
/// maps a record's probability vector to the distribution labels are drawn
/// from.
pub fn resample_labels<F>(dataset: &Dataset, seed: u64, probs_for_label: F) -> Result<Dataset>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let mut rng = seed::rng(seed);
    let records = dataset
        .records()
        .iter()
        .map(|r| {
            let dist = probs_for_label(r.probs());
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut label = dist.len() - 1;
            for (k, p) in dist.iter().enumerate() {
                acc += p;
                if u < acc {
                    label = k;
                    break;
                }
            }
            r.clone().with_label(Some(Label::Class(label)))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(records)
}

/// Softmax of Gaussian logits with standard deviation `logit_scale`; labels
/// are left empty. A base for calibration experiments.
pub fn random_softmax(n: usize, classes: usize, logit_scale: f64, seed: u64) -> Result<Dataset> {
    let normal = Normal::new(0.0, logit_scale).map_err(|e| Error::config(e.to_string()))?;
    let mut rng = seed::rng(seed);
    let records = (0..n)
        .map(|i| {
            let logits: Vec<f64> = (0..classes).map(|_| normal.sample(&mut rng)).collect();
            SoftmaxRecord::new(format!("r{i:06}"), softmax_scaled(&logits, 1.0), None)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(records)
}
