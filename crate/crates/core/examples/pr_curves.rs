//! How well do the monitor's scores separate correct from wrong predictions?
//! Compares AUPR of the ensemble mean score with the max-softmax and
//! negated-entropy scores, and saves the monitor's PR curve.
//!
//!     cargo run --release --example pr_curves [out.csv]

use accuracy_monitor::baselines::{mp_score, multiclass_entropy};
use accuracy_monitor::metrics::{aupr, pr_curve, PositiveClass};
use accuracy_monitor::*;

fn main() -> Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "pr_monitor.csv".into());
    let reference = synth::generate(&ScenarioSpec::new(9000, 10, 0.85, 1))?;
    let user = synth::generate(&ScenarioSpec::overconfident(5000, 10, 0.62, 9).with_prefix("u"))?;
    let config = TrainConfig { seed: 2, epochs: 60, ..TrainConfig::default() };
    let ensemble = pretrain_ensemble(&reference, &NetArchitecture::for_classes(10), 3, &config)?;

    let truth = correctness(&user)?;
    let monitor = ensemble.mean_scores(&user)?;
    let mp: Vec<f64> = user.records().iter().map(mp_score).collect();
    let neg_entropy: Vec<f64> = user.records().iter().map(|r| -multiclass_entropy(r)).collect();

    // With wrong predictions as positives the scores are negated internally.
    for positive in [PositiveClass::Correct, PositiveClass::Wrong] {
        println!("positive = {positive:?}");
        for (name, scores) in [("monitor", &monitor), ("MP", &mp), ("-entropy", &neg_entropy)] {
            println!("  {name:<9} AUPR {:.4}", aupr(scores, &truth, positive)?);
        }
    }

    let curve = pr_curve(&monitor, &truth, PositiveClass::Correct)?;
    curve.save_csv(&out)?;
    println!("{} curve points written to {out}", curve.points.len());
    Ok(())
}
