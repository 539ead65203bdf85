//! Ensemble accuracy monitoring.
//!
//! The workflow is: pre-train an ensemble of [`MonitorNet`]s on a labeled
//! reference set, score the unlabeled user set, pick the records with the
//! highest ensemble-averaged binary entropy for manual labeling, fine-tune
//! the last two layers of every member on those labels, and report the
//! fraction of records each member scores at or above a threshold.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{correctness, true_accuracy, Dataset};
use crate::error::{Error, Result};
use crate::net::{MonitorNet, NetArchitecture, TrainConfig};
use crate::{fsutil, seed};

pub const DEFAULT_MEMBERS: usize = 20;
pub const DEFAULT_BUDGET: f64 = 0.01;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Layers left trainable during transfer, counting the output layer.
pub const TRANSFER_TRAINABLE_TAIL: usize = 2;

const MANIFEST_FORMAT: &str = "accuracy-monitor-ensemble";
pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// Dropout off at inference.
    #[default]
    Deterministic,
    /// One stochastic dropout pass per member and record.
    McDropout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AcquisitionRule {
    /// Mean over members of each member's binary entropy.
    #[default]
    MeanMemberEntropy,
    /// Binary entropy of the members' mean score.
    EntropyOfMean,
}

/// Binary Shannon entropy in nats; 0 at the endpoints.
pub fn binary_entropy(s: f64) -> f64 {
    let term = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    term(s) + term(1.0 - s)
}

/// Seed of member `index` under `master_seed`.
pub fn member_seed(master_seed: u64, index: usize) -> u64 {
    seed::derive(master_seed, index as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: Vec<MonitorNet>,
    architecture: NetArchitecture,
    master_seed: u64,
    pub inference_mode: InferenceMode,
    pub acquisition: AcquisitionRule,
    /// Per-member training loss of the most recent training run.
    loss_histories: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionScore {
    pub id: String,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyEstimate {
    /// Mean of `per_model`.
    pub mean: f64,
    /// Population standard deviation of `per_model`.
    pub std: f64,
    pub per_model: Vec<f64>,
    pub threshold: f64,
    pub n_labeled: usize,
    pub n_monitored: usize,
    /// Exact accuracy on the labeled subset, when one was supplied.
    pub labeled_accuracy: Option<f64>,
    /// Size-weighted combination of `labeled_accuracy` and `mean`.
    pub blended: Option<f64>,
}

impl AccuracyEstimate {
    /// The headline number: blended when available, else the monitor mean.
    pub fn value(&self) -> f64 {
        self.blended.unwrap_or(self.mean)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateOptions<'a> {
    pub threshold: f64,
    pub labeled_subset: Option<&'a Dataset>,
    pub blend: bool,
}

impl Default for EstimateOptions<'_> {
    fn default() -> Self {
        EstimateOptions {
            threshold: DEFAULT_THRESHOLD,
            labeled_subset: None,
            blend: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub batch_size: usize,
    pub batches: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            batch_size: 500,
            batches: 100,
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchEstimate {
    pub batch: usize,
    pub estimate: f64,
    pub true_accuracy: Option<f64>,
    /// Positions (into the user dataset) drawn for this batch.
    #[serde(skip)]
    pub positions: Vec<usize>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("threshold {threshold} outside (0, 1)")))
    }
}

fn training_pairs(dataset: &Dataset) -> Result<(Vec<&[f64]>, Vec<bool>)> {
    let cw = correctness(dataset)?;
    let inputs = dataset.records().iter().map(|r| r.probs()).collect();
    Ok((inputs, cw.values().to_vec()))
}

/// Independently trains `members` networks on `(probs, correctness)` pairs of
/// the reference set. Member `b` is initialized and shuffled from
/// [`member_seed`]`(config.seed, b)`; the result does not depend on how many
/// worker threads run.
pub fn pretrain_ensemble(
    reference: &Dataset,
    architecture: &NetArchitecture,
    members: usize,
    config: &TrainConfig,
) -> Result<Ensemble> {
    if members == 0 {
        return Err(Error::config("ensemble needs at least one member"));
    }
    architecture.validate()?;
    config.validate()?;
    if reference.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if reference.class_count() != architecture.input_dim {
        return Err(Error::DimensionMismatch {
            expected: architecture.input_dim,
            got: reference.class_count(),
        });
    }
    let (inputs, targets) = training_pairs(reference)?;
    let trained = (0..members)
        .into_par_iter()
        .map(|b| {
            let s = member_seed(config.seed, b);
            let mut net = MonitorNet::new(architecture.clone(), s)?;
            let member_config = TrainConfig {
                seed: seed::derive(s, 1),
                ..config.clone()
            };
            let history = net.train(&inputs, &targets, &member_config)?;
            Ok((net, history))
        })
        .collect::<Result<Vec<_>>>()?;
    let (members, loss_histories) = trained.into_iter().unzip();
    Ok(Ensemble {
        members,
        architecture: architecture.clone(),
        master_seed: config.seed,
        inference_mode: InferenceMode::default(),
        acquisition: AcquisitionRule::default(),
        loss_histories,
    })
}

impl Ensemble {
    pub fn from_members(members: Vec<MonitorNet>, master_seed: u64) -> Result<Self> {
        let architecture = members
            .first()
            .ok_or_else(|| Error::config("ensemble needs at least one member"))?
            .architecture()
            .clone();
        if members.iter().any(|m| *m.architecture() != architecture) {
            return Err(Error::config("ensemble members must share one architecture"));
        }
        let n = members.len();
        Ok(Ensemble {
            members,
            architecture,
            master_seed,
            inference_mode: InferenceMode::default(),
            acquisition: AcquisitionRule::default(),
            loss_histories: vec![Vec::new(); n],
        })
    }

    pub fn members(&self) -> &[MonitorNet] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn architecture(&self) -> &NetArchitecture {
        &self.architecture
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn loss_histories(&self) -> &[Vec<f64>] {
        &self.loss_histories
    }

    pub fn with_inference_mode(mut self, mode: InferenceMode) -> Self {
        self.inference_mode = mode;
        self
    }

    pub fn with_acquisition(mut self, rule: AcquisitionRule) -> Self {
        self.acquisition = rule;
        self
    }

    fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        if !dataset.is_empty() && dataset.class_count() != self.architecture.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.architecture.input_dim,
                got: dataset.class_count(),
            });
        }
        Ok(())
    }

    /// Score of member `b` on one probability vector. In MC-dropout mode the
    /// mask stream is keyed by the member seed and the record id, so scores
    /// are reproducible and independent of record order.
    fn member_score(&self, b: usize, id: &str, probs: &[f64]) -> Result<f64> {
        let net = &self.members[b];
        match self.inference_mode {
            InferenceMode::Deterministic => net.score(probs),
            InferenceMode::McDropout => {
                let mut rng = seed::rng(seed::derive(net.seed(), seed::hash_str(id)));
                net.forward(probs, true, &mut rng)
            }
        }
    }

    /// Scores of every member on one record.
    pub fn member_scores(&self, id: &str, probs: &[f64]) -> Result<Vec<f64>> {
        (0..self.members.len())
            .map(|b| self.member_score(b, id, probs))
            .collect()
    }

    /// `scores[b][i]`: member `b` on record `i`.
    pub fn score_matrix(&self, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
        self.check_dataset(dataset)?;
        (0..self.members.len())
            .into_par_iter()
            .map(|b| match self.inference_mode {
                InferenceMode::Deterministic => self.members[b]
                    .score_all(dataset.records().iter().map(|r| r.probs())),
                InferenceMode::McDropout => dataset
                    .records()
                    .iter()
                    .map(|r| self.member_score(b, r.id(), r.probs()))
                    .collect(),
            })
            .collect()
    }

    /// Mean member score per record.
    pub fn mean_scores(&self, dataset: &Dataset) -> Result<Vec<f64>> {
        let matrix = self.score_matrix(dataset)?;
        let b = matrix.len() as f64;
        Ok((0..dataset.len())
            .map(|i| matrix.iter().map(|row| row[i]).sum::<f64>() / b)
            .collect())
    }

    fn entropy_from_scores(&self, scores: impl Iterator<Item = f64> + Clone) -> f64 {
        let b = self.members.len() as f64;
        match self.acquisition {
            AcquisitionRule::MeanMemberEntropy => scores.map(binary_entropy).sum::<f64>() / b,
            AcquisitionRule::EntropyOfMean => binary_entropy(scores.sum::<f64>() / b),
        }
    }

    pub fn acquisition_entropy(&self, id: &str, probs: &[f64]) -> Result<AcquisitionScore> {
        let scores = self.member_scores(id, probs)?;
        Ok(AcquisitionScore {
            id: id.to_string(),
            entropy: self.entropy_from_scores(scores.iter().copied()),
        })
    }

    /// Acquisition entropy of every record, in dataset order.
    pub fn acquisition_entropies(&self, dataset: &Dataset) -> Result<Vec<f64>> {
        let matrix = self.score_matrix(dataset)?;
        Ok((0..dataset.len())
            .map(|i| self.entropy_from_scores(matrix.iter().map(|row| row[i])))
            .collect())
    }

    /// Ids of the `ceil(budget * n)` records with the highest acquisition
    /// entropy, most uncertain first; ties go to the earlier record.
    pub fn select_for_labeling(&self, user: &Dataset, budget_fraction: f64) -> Result<Vec<String>> {
        let k = labeling_budget(user.len(), budget_fraction)?;
        let entropies = self.acquisition_entropies(user)?;
        let records = user.records();
        Ok(top_k_by_entropy(&entropies, k)
            .into_iter()
            .map(|i| records[i].id().to_string())
            .collect())
    }

    /// Fine-tunes a copy of every member on the labeled subset with all but
    /// the last [`TRANSFER_TRAINABLE_TAIL`] layers frozen.
    pub fn transfer(&self, labeled_subset: &Dataset, config: &TrainConfig) -> Result<Ensemble> {
        config.validate()?;
        if labeled_subset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        self.check_dataset(labeled_subset)?;
        let (inputs, targets) = training_pairs(labeled_subset)?;
        let trained = self
            .members
            .par_iter()
            .map(|net| {
                let mut net = net.clone();
                net.freeze_prefix(TRANSFER_TRAINABLE_TAIL)?;
                let member_config = TrainConfig {
                    seed: seed::derive(net.seed(), seed::derive(config.seed, 2)),
                    ..config.clone()
                };
                let history = net.train(&inputs, &targets, &member_config)?;
                Ok((net, history))
            })
            .collect::<Result<Vec<_>>>()?;
        let (members, loss_histories) = trained.into_iter().unzip();
        Ok(Ensemble {
            members,
            loss_histories,
            ..self.clone()
        })
    }

    /// Per-member fraction of records scored at or above `threshold`.
    fn per_model_rates(&self, dataset: &Dataset, threshold: f64) -> Result<Vec<f64>> {
        let matrix = self.score_matrix(dataset)?;
        let n = dataset.len() as f64;
        Ok(matrix
            .iter()
            .map(|row| row.iter().filter(|&&s| s >= threshold).count() as f64 / n)
            .collect())
    }

    /// Monitor accuracy estimate on `user`. With a labeled subset, the
    /// monitored pool excludes the subset's ids and, when `blend` is set, the
    /// subset's exact accuracy is mixed in by size.
    pub fn estimate_accuracy(
        &self,
        user: &Dataset,
        options: EstimateOptions<'_>,
    ) -> Result<AccuracyEstimate> {
        check_threshold(options.threshold)?;
        if user.is_empty() {
            return Err(Error::EmptyDataset);
        }
        self.check_dataset(user)?;
        let Some(labeled) = options.labeled_subset.filter(|l| !l.is_empty()) else {
            let per_model = self.per_model_rates(user, options.threshold)?;
            let (mean, std) = mean_std(&per_model);
            return Ok(AccuracyEstimate {
                mean,
                std,
                per_model,
                threshold: options.threshold,
                n_labeled: 0,
                n_monitored: user.len(),
                labeled_accuracy: None,
                blended: None,
            });
        };

        let user_ids: HashSet<&str> = user.ids().collect();
        if let Some(stray) = labeled.ids().find(|id| !user_ids.contains(id)) {
            return Err(Error::UnknownId(stray.to_string()));
        }
        let labeled_ids: HashSet<&str> = labeled.ids().collect();
        let pool = user.excluding(&labeled_ids);
        let labeled_accuracy = true_accuracy(labeled)?;
        // An empty pool leaves nothing to monitor; fall back to the full set
        // so the per-model rates stay defined. Its blend weight is zero.
        let scored = if pool.is_empty() { user } else { &pool };
        let per_model = self.per_model_rates(scored, options.threshold)?;
        let (mean, std) = mean_std(&per_model);
        let blended = options.blend.then(|| {
            (labeled.len() as f64 * labeled_accuracy + pool.len() as f64 * mean)
                / user.len() as f64
        });
        Ok(AccuracyEstimate {
            mean,
            std,
            per_model,
            threshold: options.threshold,
            n_labeled: labeled.len(),
            n_monitored: pool.len(),
            labeled_accuracy: Some(labeled_accuracy),
            blended,
        })
    }

    /// Per-record fraction of members scoring at or above `threshold`.
    pub fn vote_fractions(&self, dataset: &Dataset, threshold: f64) -> Result<Vec<f64>> {
        let matrix = self.score_matrix(dataset)?;
        let b = matrix.len() as f64;
        Ok((0..dataset.len())
            .map(|i| matrix.iter().filter(|row| row[i] >= threshold).count() as f64 / b)
            .collect())
    }

    /// Draws `batches` batches of `batch_size` records with replacement and
    /// reports the ensemble estimate of each (and its true accuracy when every
    /// drawn record is labeled). No relabeling happens between batches.
    pub fn stream_estimate(&self, user: &Dataset, config: &StreamConfig) -> Result<Vec<BatchEstimate>> {
        if config.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        check_threshold(config.threshold)?;
        if user.is_empty() {
            return Err(Error::EmptyDataset);
        }
        // The per-member estimate of a batch is a count over its records, so
        // the ensemble mean equals the batch mean of per-record vote fractions.
        let votes = self.vote_fractions(user, config.threshold)?;
        let draws = draw_batches(user.len(), config)?;
        Ok(draws
            .into_iter()
            .enumerate()
            .map(|(batch, positions)| {
                let estimate =
                    positions.iter().map(|&i| votes[i]).sum::<f64>() / positions.len() as f64;
                let truth: Option<Vec<bool>> =
                    user.records_at(&positions).map(|r| r.is_correct()).collect();
                let true_accuracy = truth.map(|t| {
                    t.iter().filter(|&&c| c).count() as f64 / t.len() as f64
                });
                BatchEstimate {
                    batch,
                    estimate,
                    true_accuracy,
                    positions,
                }
            })
            .collect())
    }

    /// Writes one net file per member plus `manifest.json`. The directory is
    /// assembled next to `dir` and swapped in only when complete.
    pub fn save(&self, dir: impl AsRef<Path>, threshold: f64) -> Result<()> {
        let dir = dir.as_ref();
        let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "ensemble".into());
        let staging = parent.join(format!(".{name}.staging{}", std::process::id()));
        let _ = fs::remove_dir_all(&staging);
        fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        let result = (|| {
            let mut files = Vec::with_capacity(self.members.len());
            for (b, net) in self.members.iter().enumerate() {
                let file = format!("member_{b:03}.json");
                net.save(staging.join(&file))?;
                files.push(file);
            }
            let manifest = Manifest {
                format: MANIFEST_FORMAT.into(),
                version: MANIFEST_VERSION,
                architecture: self.architecture.clone(),
                members: self.members.len(),
                master_seed: self.master_seed,
                inference_mode: self.inference_mode,
                acquisition: self.acquisition,
                threshold,
                files,
                loss_histories: self.loss_histories.clone(),
            };
            let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
            fsutil::write_string_atomic(&staging.join(MANIFEST_FILE), &text)
        })();
        if let Err(e) = result {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
        let backup = parent.join(format!(".{name}.old{}", std::process::id()));
        if dir.exists() {
            fs::rename(dir, &backup).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))?;
        let _ = fs::remove_dir_all(&backup);
        Ok(())
    }

    /// Loads an ensemble directory; returns it with the stored threshold.
    pub fn load(dir: impl AsRef<Path>) -> Result<(Ensemble, f64)> {
        let dir = dir.as_ref();
        let text = fsutil::read_to_string(&dir.join(MANIFEST_FILE))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            what: "ensemble manifest".into(),
            message: e.to_string(),
        })?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::Parse {
                what: "ensemble manifest".into(),
                message: format!("unexpected format tag `{}`", manifest.format),
            });
        }
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::VersionMismatch {
                expected: MANIFEST_VERSION,
                found: manifest.version,
            });
        }
        if manifest.files.len() != manifest.members {
            return Err(Error::Parse {
                what: "ensemble manifest".into(),
                message: format!(
                    "lists {} files for {} members",
                    manifest.files.len(),
                    manifest.members
                ),
            });
        }
        let members = manifest
            .files
            .iter()
            .map(|f| MonitorNet::load(dir.join(f)))
            .collect::<Result<Vec<_>>>()?;
        let mut ensemble = Ensemble::from_members(members, manifest.master_seed)?;
        if ensemble.architecture != manifest.architecture {
            return Err(Error::Parse {
                what: "ensemble manifest".into(),
                message: "member architecture differs from manifest".into(),
            });
        }
        ensemble.inference_mode = manifest.inference_mode;
        ensemble.acquisition = manifest.acquisition;
        if manifest.loss_histories.len() == ensemble.members.len() {
            ensemble.loss_histories = manifest.loss_histories;
        }
        Ok((ensemble, manifest.threshold))
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    architecture: NetArchitecture,
    members: usize,
    master_seed: u64,
    inference_mode: InferenceMode,
    acquisition: AcquisitionRule,
    threshold: f64,
    files: Vec<String>,
    #[serde(default)]
    loss_histories: Vec<Vec<f64>>,
}

/// `ceil(budget * n)` after validating `0 < budget <= 1`.
pub fn labeling_budget(n: usize, budget_fraction: f64) -> Result<usize> {
    if !(budget_fraction > 0.0 && budget_fraction <= 1.0) {
        return Err(Error::config(format!(
            "labeling budget {budget_fraction} outside (0, 1]"
        )));
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    // Guard against 0.01 * 1000 = 10.000000000000002 rounding up to 11.
    let raw = budget_fraction * n as f64;
    let k = if (raw - raw.round()).abs() < 1e-9 {
        raw.round()
    } else {
        raw.ceil()
    };
    Ok((k as usize).clamp(1, n))
}

/// Positions of the `k` largest entropies, descending, ties by position.
pub fn top_k_by_entropy(entropies: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..entropies.len()).collect();
    order.sort_by(|&a, &b| entropies[b].total_cmp(&entropies[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Batch positions drawn with replacement, one derived stream per batch.
pub fn draw_batches(n: usize, config: &StreamConfig) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok((0..config.batches)
        .map(|b| {
            let mut rng = seed::rng(seed::derive(config.seed, b as u64));
            (0..config.batch_size).map(|_| rng.gen_range(0..n)).collect()
        })
        .collect())
}

/// Path of member `b`'s net file inside an ensemble directory.
pub fn member_path(dir: &Path, b: usize) -> PathBuf {
    dir.join(format!("member_{b:03}.json"))
}
