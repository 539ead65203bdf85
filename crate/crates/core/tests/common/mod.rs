//! Test-only oracles, written independently of the library internals.
#![allow(dead_code)]

use accuracy_monitor::net::{bce_loss, DenseLayer};
use accuracy_monitor::{Dataset, Label, MonitorNet, NetArchitecture, SoftmaxRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random probability vector from exponentiated uniform logits.
pub fn random_probs<R: Rng>(rng: &mut R, classes: usize, spread: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..classes).map(|_| (rng.gen::<f64>() * spread).exp()).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Random dataset; each record labeled with probability `labeled`, and
/// labeled records get a uniformly random class.
pub fn random_dataset(n: usize, classes: usize, seed: u64, labeled: f64) -> Dataset {
    let mut r = rng(seed);
    let records = (0..n)
        .map(|i| {
            let probs = random_probs(&mut r, classes, 4.0);
            let label = (r.gen::<f64>() < labeled).then(|| Label::Class(r.gen_range(0..classes)));
            SoftmaxRecord::new(format!("x{i:05}"), probs, label).unwrap()
        })
        .collect();
    Dataset::new(records).unwrap()
}

/// Network with Gaussian weights and biases (not the library initializer).
pub fn random_net(input_dim: usize, hidden: &[usize], seed: u64) -> MonitorNet {
    let mut r = rng(seed);
    let arch = NetArchitecture::new(input_dim, hidden.to_vec());
    let mut dims = vec![input_dim];
    dims.extend_from_slice(hidden);
    dims.push(1);
    let layers = dims
        .windows(2)
        .map(|w| DenseLayer {
            inputs: w[0],
            outputs: w[1],
            trainable: true,
            weights: (0..w[0] * w[1]).map(|_| r.gen_range(-1.5..1.5)).collect(),
            bias: (0..w[1]).map(|_| r.gen_range(-0.5..0.5)).collect(),
        })
        .collect();
    MonitorNet::from_layers(arch, seed, layers).unwrap()
}

/// Scalar forward pass: returns the output score and every hidden
/// pre-activation. `mask` multiplies the dropout layer's activations.
pub fn oracle_forward(net: &MonitorNet, input: &[f64], mask: Option<&[f64]>) -> (f64, Vec<f64>) {
    let arch = net.architecture();
    let layers = net.layers();
    let mut x = input.to_vec();
    let mut hidden_pre = Vec::new();
    for (l, layer) in layers.iter().enumerate() {
        let mut out = Vec::with_capacity(layer.outputs);
        for k in 0..layer.outputs {
            let mut z = layer.bias[k];
            for (j, xj) in x.iter().enumerate() {
                z += xj * layer.weights[j * layer.outputs + k];
            }
            out.push(z);
        }
        if l + 1 < layers.len() {
            hidden_pre.extend_from_slice(&out);
            for v in out.iter_mut() {
                *v = v.max(0.0);
            }
            if l == arch.dropout_position {
                if let Some(m) = mask {
                    for (v, m) in out.iter_mut().zip(m) {
                        *v *= m;
                    }
                }
            }
        } else {
            return (1.0 / (1.0 + (-out[0]).exp()), hidden_pre);
        }
        x = out;
    }
    unreachable!("a network has an output layer")
}

pub fn oracle_loss(net: &MonitorNet, input: &[f64], target: bool, mask: Option<&[f64]>) -> f64 {
    bce_loss(oracle_forward(net, input, mask).0, target)
}

/// Average precision by enumerating every distinct threshold: at each one,
/// recall and precision of "score >= threshold" are counted from scratch and
/// the step curve is integrated over recall.
pub fn brute_force_aupr(scores: &[f64], positive: &[bool]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let total = positive.iter().filter(|&&p| p).count() as f64;
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let (mut tp, mut flagged) = (0.0, 0.0);
        for (s, p) in scores.iter().zip(positive) {
            if *s >= t {
                flagged += 1.0;
                if *p {
                    tp += 1.0;
                }
            }
        }
        let recall = tp / total;
        area += (recall - prev_recall) * (tp / flagged);
        prev_recall = recall;
    }
    area
}

/// Top-k positions by a full stable sort on (descending value, ascending position).
pub fn full_sort_top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut pairs: Vec<(f64, usize)> = values.iter().copied().zip(0..).collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    pairs.into_iter().take(k).map(|(_, i)| i).collect()
}

pub fn binary_entropy(s: f64) -> f64 {
    let mut h = 0.0;
    if s > 0.0 {
        h -= s * s.ln();
    }
    if s < 1.0 {
        h -= (1.0 - s) * (1.0 - s).ln();
    }
    h
}

/// Probabilities `softmax(z)` for logits `z`.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Central-difference gradient check over every parameter. Returns the worst
/// relative error `|a - n| / max(|a|, |n|, 1e-6)`, or `None` when a ReLU
/// unit sits too close to its kink for finite differences to be meaningful.
pub fn gradient_check(net: &MonitorNet, input: &[f64], target: bool, mask: Option<&[f64]>) -> Option<f64> {
    const STEP: f64 = 1e-5;
    let (_, pre) = oracle_forward(net, input, mask);
    if pre.iter().any(|z| z.abs() < 1e-3) {
        return None;
    }
    let lib_mask = mask.map(|m| accuracy_monitor::net::DropoutMask(m.to_vec()));
    let analytic = net.gradient(input, target, lib_mask.as_ref()).unwrap();
    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    for l in 0..net.layers().len() {
        let n_weights = net.layers()[l].weights.len();
        let n_bias = net.layers()[l].bias.len();
        for p in 0..n_weights + n_bias {
            fn param(net: &mut MonitorNet, l: usize, p: usize) -> &mut f64 {
                let layer = &mut net.layers_mut()[l];
                let n_weights = layer.weights.len();
                if p < n_weights {
                    &mut layer.weights[p]
                } else {
                    &mut layer.bias[p - n_weights]
                }
            }
            let original = *param(&mut probe, l, p);
            *param(&mut probe, l, p) = original + STEP;
            let up = oracle_loss(&probe, input, target, mask);
            *param(&mut probe, l, p) = original - STEP;
            let down = oracle_loss(&probe, input, target, mask);
            *param(&mut probe, l, p) = original;
            let numeric = (up - down) / (2.0 * STEP);
            let a = if p < n_weights {
                analytic.weights[l][p]
            } else {
                analytic.biases[l][p - n_weights]
            };
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    Some(worst)
}
