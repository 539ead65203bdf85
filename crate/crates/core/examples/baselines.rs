//! The label-free baselines on an overconfident user log: max-softmax
//! thresholding, mean max-softmax, entropy thresholding, temperature scaling
//! and repeated random sampling.
//!
//!     cargo run --release --example baselines

use accuracy_monitor::baselines::*;
use accuracy_monitor::metrics::estimation_error;
use accuracy_monitor::*;

fn main() -> Result<()> {
    let reference = synth::generate(&ScenarioSpec::new(9000, 10, 0.85, 1))?;
    let user = synth::generate(&ScenarioSpec::overconfident(10_000, 10, 0.62, 101))?;
    let truth = true_accuracy(&user)?;
    println!("true user accuracy {truth:.4}\n");
    println!("{:<22} {:>9} {:>9}", "method", "estimate", "error");
    let row = |name: &str, estimate: f64| {
        println!("{name:<22} {estimate:>9.4} {:>9.4}", estimation_error(estimate, truth));
    };

    // Thresholds are tuned on the labeled reference, then applied blindly.
    for kind in [ThresholdKind::Mp, ThresholdKind::Entropy] {
        let cal = calibrate_threshold(&reference, kind)?;
        row(&format!("{kind:?} (th {:.4})", cal.threshold), kind.estimate(&user, cal.threshold));
    }
    row("MP*", estimate_mp_star(&user)?);

    let fit = fit_temperature(&reference)?;
    row(&format!("TS (T {:.3})", fit.temperature), estimate_ts(&user, fit.temperature)?);

    for fraction in [0.01, 0.1] {
        let rs = estimate_rs(&user, fraction, DEFAULT_RS_RUNS, 3)?;
        row(&format!("RS({}%) mean", fraction * 100.0), rs.mean);
        println!("{:<22} [{:.4}, {:.4}] over {} runs of {}", "", rs.min, rs.max, rs.runs.len(), rs.sample_size);
    }
    Ok(())
}
