//! Synthetic softmax logs with controllable accuracy and confidence.
//!
//!     cargo run --example synthetic_data [out_dir]
//!
//! Writes a calibrated log, an overconfident one and one with NULL-labeled
//! out-of-distribution records, in JSONL and CSV, then splits the first
//! into train/A/B parts.

use std::path::PathBuf;

use accuracy_monitor::baselines::estimate_mp_star;
use accuracy_monitor::datamodel::save_dataset;
use accuracy_monitor::*;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synthetic".into()));
    std::fs::create_dir_all(&out)?;

    let scenarios = [
        ("calibrated", ScenarioSpec::new(20_000, 10, 0.85, 1)),
        ("overconfident", ScenarioSpec::overconfident(20_000, 10, 0.62, 2)),
        ("with_null", ScenarioSpec::new(20_000, 10, 0.85, 3).with_null_fraction(0.2)),
        ("adversarial", ScenarioSpec::new(20_000, 10, 0.4, 4).with_distortion(3.0)),
    ];
    println!("{:<14} {:>9} {:>9} {:>9}", "scenario", "expected", "accuracy", "MP*");
    for (name, spec) in &scenarios {
        let ds = synth::generate(spec)?;
        println!(
            "{name:<14} {:>9.4} {:>9.4} {:>9.4}",
            spec.expected_accuracy(),
            true_accuracy(&ds)?,
            estimate_mp_star(&ds)?
        );
        save_dataset(&ds, out.join(format!("{name}.jsonl")), Format::Jsonl)?;
        save_dataset(&ds, out.join(format!("{name}.csv")), Format::Csv)?;
    }

    let calibrated = load_dataset(out.join("calibrated.csv"), Format::Csv)?;
    let parts = synth::split(&calibrated, &[0.4, 0.4, 0.2], 7)?;
    let sizes: Vec<usize> = parts.iter().map(Dataset::len).collect();
    println!("split of {} records: {sizes:?}", calibrated.len());
    println!("files written to {}", out.display());
    Ok(())
}
