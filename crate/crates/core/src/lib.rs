//! Estimate the accuracy of a deployed black-box classifier on an unlabeled
//! dataset from nothing but its softmax outputs.
//!
//! An ensemble of small monitor networks learns to predict, from a softmax
//! vector, whether the classifier got that sample right. The ensemble is
//! pre-trained on a labeled reference set, adapted to the user's data with a
//! small entropy-selected labeling budget, and then reports the fraction of
//! user samples it believes are correct, with a spread across members.
//!
//! Modules:
//!
//! * [`datamodel`]: softmax records, datasets, JSONL/CSV I/O.
//! * [`net`]: the monitor network, backpropagation and Adam.
//! * [`monitor`]: ensemble pre-training, active selection, transfer, estimation.
//! * [`baselines`]: MP, MP*, entropy, temperature scaling, random sampling.
//! * [`metrics`]: estimation error, precision-recall curves, AUPR.
//! * [`synth`]: synthetic softmax logs with known ground truth.
//! * [`cli`]: the `accmon` command implementations.

pub mod baselines;
pub mod cli;
pub mod datamodel;
pub mod error;
mod fsutil;
pub mod metrics;
pub mod monitor;
pub mod net;
pub mod seed;
pub mod synth;

pub use datamodel::{correctness, load_dataset, true_accuracy, CorrectnessVector, Dataset, Format, Label, SoftmaxRecord};
pub use error::{Error, Result};
pub use monitor::{pretrain_ensemble, AccuracyEstimate, Ensemble, EstimateOptions, InferenceMode, StreamConfig};
pub use net::{MonitorNet, NetArchitecture, TrainConfig};
pub use synth::ScenarioSpec;
