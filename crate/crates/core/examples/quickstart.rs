//! Estimate a classifier's accuracy on an unlabeled, shifted dataset.
//!
//! Generates a labeled reference log and an overconfident user log, trains
//! the monitor ensemble on the reference, labels 1% of the user log chosen
//! by entropy, transfers, and compares the estimate with the truth.
//!
//!     cargo run --release --example quickstart [members]
//!
//! The default of 5 members keeps the run near a minute; 20 is the shipped
//! default of the command-line tool.

use accuracy_monitor::baselines::estimate_mp_star;
use accuracy_monitor::*;

fn main() -> Result<()> {
    let members: usize = std::env::args().nth(1).map_or(5, |a| a.parse().expect("member count"));

    let reference = synth::generate(&ScenarioSpec::new(9000, 10, 0.85, 1).with_prefix("ref"))?;
    let user = synth::generate(&ScenarioSpec::overconfident(10_000, 10, 0.62, 101).with_prefix("u"))?;
    let truth = true_accuracy(&user)?;
    println!("reference accuracy {:.4}, user accuracy {truth:.4} (hidden from the monitor)", true_accuracy(&reference)?);
    println!("mean max-softmax on the user set: {:.4}", estimate_mp_star(&user)?);

    let config = TrainConfig { seed: 1, ..TrainConfig::default() };
    let arch = NetArchitecture::for_classes(reference.class_count());
    let ensemble = pretrain_ensemble(&reference, &arch, members, &config)?;
    let before = ensemble.estimate_accuracy(&user, EstimateOptions::default())?;
    println!("pre-trained ensemble of {members}: {:.4} +/- {:.4}", before.mean, before.std);

    // Only these records need a human label.
    let ids = ensemble.select_for_labeling(&user, 0.01)?;
    let labeled = user.subset(&ids)?;
    println!("labeling {} records (first: {:?})", ids.len(), &ids[..3]);

    let transferred = ensemble.transfer(&labeled, &config)?;
    let after = transferred.estimate_accuracy(
        &user,
        EstimateOptions { labeled_subset: Some(&labeled), ..Default::default() },
    )?;
    println!(
        "after transfer: {:.4} (members {:.4} +/- {:.4} on {} unlabeled, {:.4} exact on {} labeled)",
        after.value(),
        after.mean,
        after.std,
        after.n_monitored,
        after.labeled_accuracy.unwrap_or(f64::NAN),
        after.n_labeled
    );
    println!("error {:+.4} vs {:+.4} before transfer", after.value() - truth, before.mean - truth);
    Ok(())
}
