//! A single monitor network: train on softmax vectors, freeze all but the
//! last two layers, fine-tune on a shifted set, and round-trip through JSON.
//!
//!     cargo run --release --example train_monitor_net

use accuracy_monitor::*;

fn inputs(ds: &Dataset) -> (Vec<Vec<f64>>, Vec<bool>) {
    let xs = ds.records().iter().map(|r| r.probs().to_vec()).collect();
    let ys = correctness(ds).expect("labeled").values().to_vec();
    (xs, ys)
}

fn accuracy_of_scores(net: &MonitorNet, ds: &Dataset) -> Result<f64> {
    let (xs, ys) = inputs(ds);
    let scores = net.score_all(xs.iter().map(Vec::as_slice))?;
    let hits = scores.iter().zip(&ys).filter(|(s, y)| (**s >= 0.5) == **y).count();
    Ok(hits as f64 / ys.len() as f64)
}

fn main() -> Result<()> {
    let reference = synth::generate(&ScenarioSpec::new(4000, 10, 0.85, 1))?;
    let shifted = synth::generate(&ScenarioSpec::overconfident(400, 10, 0.6, 2))?;

    let arch = NetArchitecture::for_classes(10);
    println!("architecture {:?} -> 1, dropout {} after layer {}", arch.hidden_dims, arch.dropout_rate, arch.dropout_position);
    let mut net = MonitorNet::new(arch, 7)?;
    let (xs, ys) = inputs(&reference);
    let losses = net.train(&xs, &ys, &TrainConfig { epochs: 50, ..TrainConfig::default() })?;
    println!("loss {:.4} -> {:.4} over {} epochs", losses[0], losses[losses.len() - 1], losses.len());
    println!("correct/wrong agreement: reference {:.4}, shifted {:.4}", accuracy_of_scores(&net, &reference)?, accuracy_of_scores(&net, &shifted)?);

    net.freeze_prefix(2)?;
    println!("trainable layers {:?}", net.trainable_flags());
    let frozen_before = net.layers()[0].weights.clone();
    let (xs, ys) = inputs(&shifted);
    net.train(&xs, &ys, &TrainConfig { epochs: 50, seed: 1, ..TrainConfig::default() })?;
    assert_eq!(frozen_before, net.layers()[0].weights);
    println!("after fine-tuning, shifted agreement {:.4}", accuracy_of_scores(&net, &shifted)?);

    let restored = MonitorNet::from_json(&net.to_json())?;
    let probe = shifted.records()[0].probs();
    println!("score before/after JSON round trip: {} / {}", net.score(probe)?, restored.score(probe)?);
    Ok(())
}
