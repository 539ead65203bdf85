//! Batch-by-batch monitoring of a live prediction stream.
//!
//!     cargo run --release --example streaming [members]
//!
//! Each batch of 500 predictions gets an accuracy estimate from the
//! transferred ensemble. A fixed max-softmax threshold tuned on the
//! reference is tracked alongside for comparison.

use accuracy_monitor::baselines::{calibrate_threshold, mp_score, ThresholdKind};
use accuracy_monitor::*;

fn main() -> Result<()> {
    let members: usize = std::env::args().nth(1).map_or(4, |a| a.parse().expect("member count"));
    let reference = synth::generate(&ScenarioSpec::new(9000, 10, 0.85, 1))?;
    let user = synth::generate(&ScenarioSpec::overconfident(10_000, 10, 0.62, 101).with_prefix("u"))?;

    let config = TrainConfig { seed: 3, ..TrainConfig::default() };
    let ensemble = pretrain_ensemble(&reference, &NetArchitecture::for_classes(10), members, &config)?;
    let labeled = user.subset(&ensemble.select_for_labeling(&user, 0.01)?)?;
    let ensemble = ensemble.transfer(&labeled, &config)?;

    let mp = calibrate_threshold(&reference, ThresholdKind::Mp)?;
    let stream = StreamConfig { batches: 20, seed: 5, ..StreamConfig::default() };
    let batches = ensemble.stream_estimate(&user, &stream)?;

    println!("{:>5} {:>8} {:>8} {:>8}", "batch", "truth", "monitor", "MP");
    let (mut monitor_err, mut mp_err) = (0.0, 0.0);
    for b in &batches {
        let truth = b.true_accuracy.expect("synthetic data is labeled");
        // Positions may repeat within a batch, so count them directly.
        let hits = b.positions.iter().filter(|&&i| mp_score(&user.records()[i]) >= mp.threshold).count();
        let mp_estimate = hits as f64 / b.positions.len() as f64;
        monitor_err += (b.estimate - truth).abs();
        mp_err += (mp_estimate - truth).abs();
        println!("{:>5} {truth:>8.4} {:>8.4} {mp_estimate:>8.4}", b.batch, b.estimate);
    }
    let n = batches.len() as f64;
    println!("mean absolute error: monitor {:.4}, MP {:.4}", monitor_err / n, mp_err / n);
    Ok(())
}
