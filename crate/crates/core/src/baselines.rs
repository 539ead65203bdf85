//! Comparison estimators that need no monitor network: max-softmax
//! thresholding (MP), mean max-softmax (MP*), entropy thresholding,
//! temperature scaling and repeated random sampling.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{correctness, true_accuracy, Dataset, Label, SoftmaxRecord};
use crate::error::{Error, Result};
use crate::seed;

/// Additive clamp used when recovering logits as `ln(p + LOGIT_CLAMP)`.
pub const LOGIT_CLAMP: f64 = 1e-12;
pub const TEMPERATURE_MIN: f64 = 0.05;
pub const TEMPERATURE_MAX: f64 = 20.0;
/// Repetitions of the random-sampling baseline.
pub const DEFAULT_RS_RUNS: usize = 100;
const GOLDEN_MAX_ITERS: usize = 200;
const GOLDEN_TOL: f64 = 1e-6;

pub fn mp_score(record: &SoftmaxRecord) -> f64 {
    record.probs()[record.predicted()]
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn multiclass_entropy(record: &SoftmaxRecord) -> f64 {
    record
        .probs()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// Fraction of records whose max probability is at least `threshold`.
pub fn estimate_mp(user: &Dataset, threshold: f64) -> f64 {
    fraction(user, |r| mp_score(r) >= threshold)
}

/// Fraction of records whose entropy is strictly below `threshold`.
pub fn estimate_entropy(user: &Dataset, threshold: f64) -> f64 {
    fraction(user, |r| multiclass_entropy(r) < threshold)
}

fn fraction(user: &Dataset, pred: impl Fn(&SoftmaxRecord) -> bool) -> f64 {
    if user.is_empty() {
        return 0.0;
    }
    user.records().iter().filter(|r| pred(r)).count() as f64 / user.len() as f64
}

/// Mean of the max probability over the user set.
pub fn estimate_mp_star(user: &Dataset) -> Result<f64> {
    if user.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(user.records().iter().map(mp_score).sum::<f64>() / user.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdKind {
    Mp,
    Entropy,
}

impl ThresholdKind {
    pub fn statistic(self, record: &SoftmaxRecord) -> f64 {
        match self {
            ThresholdKind::Mp => mp_score(record),
            ThresholdKind::Entropy => multiclass_entropy(record),
        }
    }

    pub fn estimate(self, user: &Dataset, threshold: f64) -> f64 {
        match self {
            ThresholdKind::Mp => estimate_mp(user, threshold),
            ThresholdKind::Entropy => estimate_entropy(user, threshold),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCalibration {
    pub kind: ThresholdKind,
    pub threshold: f64,
    /// `|estimated - true|` accuracy on the calibration set.
    pub calibration_error: f64,
}

fn next_up(x: f64) -> f64 {
    if x >= 0.0 {
        f64::from_bits(x.to_bits() + 1)
    } else {
        -f64::from_bits((-x).to_bits() - 1)
    }
}

/// Scans every threshold that changes the estimate (midpoints between
/// consecutive distinct statistic values, plus both extremes) and keeps the
/// one whose estimate on the labeled reference is closest to its true
/// accuracy. Ties go to the smaller threshold.
pub fn calibrate_threshold(reference: &Dataset, kind: ThresholdKind) -> Result<ThresholdCalibration> {
    let truth = true_accuracy(reference)?;
    let n = reference.len();
    let mut stats: Vec<f64> = reference.records().iter().map(|r| kind.statistic(r)).collect();
    stats.sort_by(f64::total_cmp);

    // (threshold, number of records counted correct), ascending threshold.
    let mut candidates: Vec<(f64, usize)> = Vec::with_capacity(n + 2);
    let lowest = stats[0];
    let highest = stats[n - 1];
    let ceiling = match kind {
        ThresholdKind::Mp => 1.0,
        ThresholdKind::Entropy => (reference.class_count() as f64).ln(),
    };
    let upper = if highest < ceiling { ceiling } else { next_up(highest) };
    match kind {
        ThresholdKind::Mp => candidates.push((lowest, n)),
        ThresholdKind::Entropy => candidates.push((lowest, 0)),
    }
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && stats[j] == stats[i] {
            j += 1;
        }
        if j < n {
            let mid = stats[i] + (stats[j] - stats[i]) / 2.0;
            let counted = match kind {
                ThresholdKind::Mp => n - j,
                ThresholdKind::Entropy => j,
            };
            candidates.push((mid, counted));
        }
        i = j;
    }
    match kind {
        ThresholdKind::Mp => candidates.push((upper, 0)),
        ThresholdKind::Entropy => candidates.push((upper, n)),
    }

    let mut best = ThresholdCalibration {
        kind,
        threshold: f64::NAN,
        calibration_error: f64::INFINITY,
    };
    for (threshold, counted) in candidates {
        let error = (counted as f64 / n as f64 - truth).abs();
        if error < best.calibration_error {
            best.threshold = threshold;
            best.calibration_error = error;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub temperature: f64,
    pub nll: f64,
    pub iterations: usize,
    /// NULL-labeled records skipped because they have no class index.
    pub excluded: usize,
}

fn recovered_logits(probs: &[f64]) -> Vec<f64> {
    probs.iter().map(|p| (p + LOGIT_CLAMP).ln()).collect()
}

/// Mean negative log-likelihood of `labels` under `softmax(logits / T)`.
fn nll(logits: &[Vec<f64>], labels: &[usize], temperature: f64) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = z
                .iter()
                .map(|v| ((v - max) / temperature).exp())
                .sum::<f64>()
                .ln();
            lse - (z[y] - max) / temperature
        })
        .sum();
    total / logits.len() as f64
}

/// Mean NLL of the labeled records at temperature `T`; NULL records skipped.
pub fn temperature_nll(labeled: &Dataset, temperature: f64) -> Result<f64> {
    let (logits, labels, _) = nll_inputs(labeled)?;
    Ok(nll(&logits, &labels, temperature))
}

type NllInputs = (Vec<Vec<f64>>, Vec<usize>, usize);

fn nll_inputs(labeled: &Dataset) -> Result<NllInputs> {
    let mut logits = Vec::with_capacity(labeled.len());
    let mut labels = Vec::with_capacity(labeled.len());
    let mut excluded = 0;
    for r in labeled.records() {
        match r.label() {
            Some(Label::Class(y)) => {
                logits.push(recovered_logits(r.probs()));
                labels.push(y);
            }
            Some(Label::Null) => excluded += 1,
            None => return Err(Error::Unlabeled(r.id().to_string())),
        }
    }
    if logits.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok((logits, labels, excluded))
}

/// Fits the temperature minimizing NLL over `[0.05, 20]` by golden-section
/// search on `ln T`. The endpoints and `T = 1` are also evaluated, so the
/// returned NLL never exceeds any of them.
pub fn fit_temperature(labeled: &Dataset) -> Result<TemperatureFit> {
    let (logits, labels, excluded) = nll_inputs(labeled)?;
    let f = |log_t: f64| nll(&logits, &labels, log_t.exp());
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (TEMPERATURE_MIN.ln(), TEMPERATURE_MAX.ln());
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    let mut iterations = 0;
    while iterations < GOLDEN_MAX_ITERS && (b - a) > GOLDEN_TOL {
        iterations += 1;
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let interior = (a + b) / 2.0;
    let mut best = (interior.exp(), f(interior));
    for t in [TEMPERATURE_MIN, 1.0, TEMPERATURE_MAX] {
        let v = nll(&logits, &labels, t);
        if v < best.1 {
            best = (t, v);
        }
    }
    Ok(TemperatureFit {
        temperature: best.0,
        nll: best.1,
        iterations,
        excluded,
    })
}

/// Largest entry of `softmax(ln(p + clamp) / T)`. At `T = 1` this is the
/// input distribution itself, so the max probability is returned unchanged.
pub fn ts_confidence(record: &SoftmaxRecord, temperature: f64) -> f64 {
    if temperature == 1.0 {
        return mp_score(record);
    }
    let z = recovered_logits(record.probs());
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|v| ((v - max) / temperature).exp()).sum();
    1.0 / sum
}

/// Mean temperature-scaled confidence over the user set.
pub fn estimate_ts(user: &Dataset, temperature: f64) -> Result<f64> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::config(format!("temperature {temperature} must be positive")));
    }
    if user.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(user
        .records()
        .iter()
        .map(|r| ts_confidence(r, temperature))
        .sum::<f64>()
        / user.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomSamplingSummary {
    pub fraction: f64,
    pub sample_size: usize,
    pub runs: Vec<f64>,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl RandomSamplingSummary {
    pub fn range_width(&self) -> f64 {
        self.max - self.min
    }
}

/// Repeats "label a random `fraction` of the user set and report its exact
/// accuracy" `repeats` times. Run `r` samples without replacement from its
/// own stream derived from `seed`.
pub fn estimate_rs(
    user: &Dataset,
    fraction: f64,
    repeats: usize,
    seed: u64,
) -> Result<RandomSamplingSummary> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("sampling fraction {fraction} outside (0, 1]")));
    }
    if repeats == 0 {
        return Err(Error::config("repeats must be at least 1"));
    }
    let cw = correctness(user)?;
    let n = user.len();
    let k = crate::monitor::labeling_budget(n, fraction)?;
    let values = cw.values();
    let runs: Vec<f64> = (0..repeats)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed::rng(seed::derive(seed, r as u64));
            let hits = index::sample(&mut rng, n, k)
                .iter()
                .filter(|&i| values[i])
                .count();
            hits as f64 / k as f64
        })
        .collect();
    let min = runs.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = runs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = runs.iter().sum::<f64>() / runs.len() as f64;
    Ok(RandomSamplingSummary {
        fraction,
        sample_size: k,
        runs,
        min,
        max,
        mean,
    })
}
