//! Fitting a temperature by NLL and recovering a planted one.
//!
//!     cargo run --release --example temperature_scaling [T*]
//!
//! Probabilities are softmax(z); labels are drawn from softmax(z / T*). The
//! fitted temperature should come back close to T*.

use accuracy_monitor::baselines::*;
use accuracy_monitor::*;

fn main() -> Result<()> {
    let t_star: f64 = std::env::args().nth(1).map_or(2.5, |a| a.parse().expect("temperature"));
    let base = synth::random_softmax(20_000, 10, 3.0, 1)?;
    let labeled = synth::resample_labels(&base, 2, |p| {
        let z: Vec<f64> = p.iter().map(|v| v.ln() / t_star).collect();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    })?;

    for t in [0.5, 1.0, 2.0, t_star, 4.0, 8.0] {
        println!("NLL at T = {t:<4} {:.5}", temperature_nll(&labeled, t)?);
    }
    let fit = fit_temperature(&labeled)?;
    println!(
        "\nfitted T = {:.4} (planted {t_star}), NLL {:.5}, {} golden-section steps",
        fit.temperature, fit.nll, fit.iterations
    );
    let truth = true_accuracy(&labeled)?;
    println!(
        "accuracy {truth:.4}; MP* {:.4}; TS at fitted T {:.4}",
        estimate_mp_star(&labeled)?,
        estimate_ts(&labeled, fit.temperature)?
    );
    Ok(())
}
