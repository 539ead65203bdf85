//! The `accmon` command line.
//!
//! Settings resolve in three layers: built-in defaults ([`RunConfig::default`]),
//! then an optional flat `key = value` file given with `--config`, then flags.
//! Every output file is written to a temporary sibling and renamed into place.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 internal error (the binary maps panics to 4).

use std::collections::HashSet;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::baselines::{self, ThresholdKind};
use crate::datamodel::{self, Dataset, Format};
use crate::error::{Error, Result};
use crate::metrics::{self, PositiveClass};
use crate::monitor::{self, AcquisitionRule, Ensemble, EstimateOptions, InferenceMode, StreamConfig};
use crate::net::{NetArchitecture, TrainConfig};
use crate::synth::{self, ScenarioSpec};
use crate::fsutil;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_INTERNAL: u8 = 4;

/// File name used for selected ids when no explicit path is given.
pub const SELECTED_IDS_FILE: &str = "selected_ids.txt";

pub fn exit_code(error: &Error) -> u8 {
    match error {
        Error::InvalidConfig(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, ValueEnum)]
pub enum Baseline {
    Mp,
    MpStar,
    Entropy,
    Ts,
    Rs,
}

impl Baseline {
    pub const ALL: [Baseline; 5] = [
        Baseline::Mp,
        Baseline::MpStar,
        Baseline::Entropy,
        Baseline::Ts,
        Baseline::Rs,
    ];

    pub fn report_name(self) -> &'static str {
        match self {
            Baseline::Mp => "MP",
            Baseline::MpStar => "MP*",
            Baseline::Entropy => "Entropy",
            Baseline::Ts => "TS",
            Baseline::Rs => "RS",
        }
    }
}

/// Labeled set used to fit the temperature of the TS baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum TsFit {
    /// The labeled reference set.
    #[default]
    Reference,
    /// The actively selected user records (needs `--selected`).
    Selected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InferenceArg {
    Deterministic,
    McDropout,
}

impl From<InferenceArg> for InferenceMode {
    fn from(a: InferenceArg) -> Self {
        match a {
            InferenceArg::Deterministic => InferenceMode::Deterministic,
            InferenceArg::McDropout => InferenceMode::McDropout,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AcquisitionArg {
    MeanMemberEntropy,
    EntropyOfMean,
}

impl From<AcquisitionArg> for AcquisitionRule {
    fn from(a: AcquisitionArg) -> Self {
        match a {
            AcquisitionArg::MeanMemberEntropy => AcquisitionRule::MeanMemberEntropy,
            AcquisitionArg::EntropyOfMean => AcquisitionRule::EntropyOfMean,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub reference: Option<PathBuf>,
    pub user: Option<PathBuf>,
    pub ensemble: Option<PathBuf>,
    /// Ids file of the actively labeled user records.
    pub labeled: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub members: usize,
    pub budget: f64,
    pub threshold: f64,
    /// Overrides the class-count-based hidden widths.
    pub hidden_dims: Option<Vec<usize>>,
    pub dropout_rate: f64,
    pub dropout_position: usize,
    pub train: TrainConfig,
    pub transfer: TrainConfig,
    /// `None` keeps whatever the ensemble manifest says.
    pub inference: Option<InferenceMode>,
    pub acquisition: Option<AcquisitionRule>,
    pub blend: bool,
    pub baselines: Vec<Baseline>,
    pub ts_fit: TsFit,
    pub rs_fractions: Vec<f64>,
    pub rs_runs: usize,
    pub stream_batch_size: usize,
    pub stream_batches: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let stream = StreamConfig::default();
        RunConfig {
            reference: None,
            user: None,
            ensemble: None,
            labeled: None,
            output_dir: PathBuf::from("."),
            members: monitor::DEFAULT_MEMBERS,
            budget: monitor::DEFAULT_BUDGET,
            threshold: monitor::DEFAULT_THRESHOLD,
            hidden_dims: None,
            dropout_rate: 0.5,
            dropout_position: 0,
            train: TrainConfig::default(),
            transfer: TrainConfig::default(),
            inference: None,
            acquisition: None,
            blend: true,
            baselines: Baseline::ALL.to_vec(),
            ts_fit: TsFit::Reference,
            rs_fractions: vec![0.01, 0.1],
            rs_runs: baselines::DEFAULT_RS_RUNS,
            stream_batch_size: stream.batch_size,
            stream_batches: stream.batches,
            seed: 0,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(format!("bad value `{value}` for `{key}`: {e}")))
}

/// Accepts `0.01` or `1%`.
pub fn parse_fraction(text: &str) -> Result<f64> {
    let text = text.trim();
    let value = match text.strip_suffix('%') {
        Some(pct) => parse_value::<f64>("fraction", pct.trim())? / 100.0,
        None => parse_value::<f64>("fraction", text)?,
    };
    if value > 0.0 && value <= 1.0 {
        Ok(value)
    } else {
        Err(Error::config(format!("fraction `{text}` outside (0, 1]")))
    }
}

fn parse_list<T, F>(value: &str, parse: F) -> Result<Vec<T>>
where
    F: Fn(&str) -> Result<T>,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse)
        .collect()
}

fn parse_enum<T: ValueEnum>(key: &str, value: &str) -> Result<T> {
    T::from_str(&value.replace('_', "-"), true)
        .map_err(|_| Error::config(format!("bad value `{value}` for `{key}`")))
}

impl RunConfig {
    /// Sets one configuration key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "reference" => self.reference = Some(v.into()),
            "user" => self.user = Some(v.into()),
            "ensemble" => self.ensemble = Some(v.into()),
            "labeled" => self.labeled = Some(v.into()),
            "output_dir" => self.output_dir = v.into(),
            "members" => self.members = parse_value(key, v)?,
            "budget" => self.budget = parse_fraction(v)?,
            "threshold" => self.threshold = parse_value(key, v)?,
            "hidden" => self.hidden_dims = Some(parse_list(v, |s| parse_value(key, s))?),
            "dropout_rate" => self.dropout_rate = parse_value(key, v)?,
            "dropout_position" => self.dropout_position = parse_value(key, v)?,
            "learning_rate" => self.train.learning_rate = parse_value(key, v)?,
            "epochs" => self.train.epochs = parse_value(key, v)?,
            "batch_size" => self.train.batch_size = parse_value(key, v)?,
            "transfer_learning_rate" => self.transfer.learning_rate = parse_value(key, v)?,
            "transfer_epochs" => self.transfer.epochs = parse_value(key, v)?,
            "transfer_batch_size" => self.transfer.batch_size = parse_value(key, v)?,
            "inference" => self.inference = Some(parse_enum::<InferenceArg>(key, v)?.into()),
            "acquisition" => {
                self.acquisition = Some(parse_enum::<AcquisitionArg>(key, v)?.into())
            }
            "blend" => self.blend = parse_value(key, v)?,
            "baselines" => self.baselines = parse_list(v, |s| parse_enum(key, s))?,
            "ts_fit" => self.ts_fit = parse_enum(key, v)?,
            "rs_fractions" => self.rs_fractions = parse_list(v, parse_fraction)?,
            "rs_runs" => self.rs_runs = parse_value(key, v)?,
            "stream_batch_size" => self.stream_batch_size = parse_value(key, v)?,
            "stream_batches" => self.stream_batches = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            _ => return Err(Error::config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a flat config file: one `key = value` per line, `#` comments.
    pub fn apply_file_text(&mut self, text: &str, source: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("{source}:{}: expected `key = value`", i + 1))
            })?;
            self.set(key.trim(), value)
                .map_err(|e| Error::config(format!("{source}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut config = RunConfig::default();
        let text = fsutil::read_to_string(path)?;
        config.apply_file_text(&text, &path.display().to_string())?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.members == 0 {
            return Err(Error::config("members must be at least 1"));
        }
        parse_fraction(&self.budget.to_string())?;
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        self.train.validate()?;
        self.transfer.validate()?;
        if self.rs_runs == 0 {
            return Err(Error::config("rs_runs must be at least 1"));
        }
        if self.stream_batch_size == 0 || self.stream_batches == 0 {
            return Err(Error::config("stream batch size and count must be positive"));
        }
        Ok(())
    }

    pub fn architecture(&self, class_count: usize) -> NetArchitecture {
        let base = match &self.hidden_dims {
            Some(h) => NetArchitecture::new(class_count, h.clone()),
            None => NetArchitecture::for_classes(class_count),
        };
        base.with_dropout(self.dropout_rate, self.dropout_position)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn transfer_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.transfer.clone()
        }
    }

    pub fn stream_config(&self) -> StreamConfig {
        StreamConfig {
            batch_size: self.stream_batch_size,
            batches: self.stream_batches,
            threshold: self.threshold,
            seed: self.seed,
        }
    }

    fn require<'a>(&self, path: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
        path.as_ref()
            .ok_or_else(|| Error::config(format!("missing {what} path (flag or config key)")))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "accmon",
    version,
    about = "Estimate a classifier's accuracy on unlabeled data from its softmax outputs"
)]
pub struct Cli {
    /// Flat `key = value` configuration file; flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Directory for reports when no explicit output path is given.
    #[arg(long, global = true, value_name = "DIR")]
    pub output_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled softmax log.
    Gen(GenArgs),
    /// Train the monitor ensemble on a labeled reference set.
    Pretrain(PretrainArgs),
    /// Select records to label, then fine-tune the ensemble on them.
    Transfer(TransferArgs),
    /// Estimate accuracy on a user set.
    Estimate(EstimateArgs),
    /// Run the MP, MP*, entropy, TS and RS baselines.
    Baselines(BaselinesArgs),
    /// Compare reports against ground truth; AUPR tables and PR curves.
    Eval(EvalArgs),
    /// Per-batch estimates over random batches of the user set.
    Stream(StreamArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 0.9)]
    pub acc: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1.0)]
    pub distortion: f64,
    #[arg(long, default_value_t = synth::CALIBRATED_MARGIN_MEAN)]
    pub margin_mean: f64,
    #[arg(long, default_value_t = synth::CALIBRATED_MARGIN_STD)]
    pub margin_std: f64,
    #[arg(long, default_value_t = synth::CALIBRATED_WRONG_RATIO)]
    pub wrong_ratio: f64,
    #[arg(long, default_value_t = 0.0)]
    pub null_fraction: f64,
    #[arg(long, default_value = "s")]
    pub prefix: String,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long, value_name = "PATH")]
    pub reference: Option<PathBuf>,
    /// Ensemble directory to create or replace.
    #[arg(long, value_name = "DIR")]
    pub ensemble: Option<PathBuf>,
    #[arg(long)]
    pub members: Option<usize>,
    /// Hidden widths, e.g. `100,50`.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub dropout_rate: Option<f64>,
    #[arg(long)]
    pub dropout_position: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Threshold recorded in the manifest.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, value_enum)]
    pub inference: Option<InferenceArg>,
    #[arg(long, value_enum)]
    pub acquisition: Option<AcquisitionArg>,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[arg(long, value_name = "DIR")]
    pub ensemble: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub user: Option<PathBuf>,
    /// Labeling budget as a fraction or percentage (`0.01`, `1%`).
    #[arg(long, value_parser = parse_fraction_arg)]
    pub budget: Option<f64>,
    /// Where to write the transferred ensemble; defaults to `--ensemble`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Where to write the selected ids; defaults to `<output-dir>/selected_ids.txt`.
    #[arg(long, value_name = "PATH")]
    pub selected: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub acquisition: Option<AcquisitionArg>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long, value_name = "DIR")]
    pub ensemble: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub user: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Ids file of labeled user records, excluded from monitoring and blended in.
    #[arg(long, value_name = "PATH")]
    pub labeled: Option<PathBuf>,
    /// Report the monitored mean without mixing in the labeled accuracy.
    #[arg(long)]
    pub no_blend: bool,
    #[arg(long, value_enum)]
    pub inference: Option<InferenceArg>,
    /// JSONL report path; defaults to `<output-dir>/estimate.jsonl`.
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BaselinesArgs {
    #[arg(long, value_name = "PATH")]
    pub reference: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub user: Option<PathBuf>,
    /// Subset of baselines to run.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub only: Option<Vec<Baseline>>,
    #[arg(long, value_enum)]
    pub ts_fit: Option<TsFit>,
    /// Ids file of labeled user records (for `--ts-fit selected`).
    #[arg(long, value_name = "PATH")]
    pub selected: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', value_parser = parse_fraction_arg)]
    pub rs_fractions: Option<Vec<f64>>,
    #[arg(long)]
    pub rs_runs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSONL report path; defaults to `<output-dir>/baselines.jsonl`.
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Labeled user set providing ground truth.
    #[arg(long, value_name = "PATH")]
    pub user: Option<PathBuf>,
    /// Reports from `estimate` and `baselines`.
    #[arg(long = "report", value_name = "PATH", required = true)]
    pub reports: Vec<PathBuf>,
    /// Ensemble whose mean score is ranked for the monitor AUPR row.
    #[arg(long, value_name = "DIR")]
    pub ensemble: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "correct")]
    pub positive: PositiveArg,
    /// Writes one `pr_<method>.csv` per AUPR row into this directory.
    #[arg(long, value_name = "DIR")]
    pub pr_dir: Option<PathBuf>,
    /// JSONL output path; defaults to `<output-dir>/eval.jsonl`.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PositiveArg {
    Correct,
    Wrong,
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    #[arg(long, value_name = "DIR")]
    pub ensemble: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub user: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub batches: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Adds an `mp_estimate` column using an MP threshold calibrated here.
    #[arg(long, value_name = "PATH")]
    pub reference: Option<PathBuf>,
    /// CSV path; defaults to `<output-dir>/stream.csv`.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

fn parse_fraction_arg(s: &str) -> std::result::Result<f64, String> {
    parse_fraction(s).map_err(|e| e.to_string())
}

fn set_opt<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, value: &Option<PathBuf>) {
    if value.is_some() {
        slot.clone_from(value);
    }
}

impl Command {
    /// Copies flags that were given over the configuration.
    fn apply(&self, c: &mut RunConfig) {
        match self {
            Command::Gen(a) => set_opt(&mut c.seed, a.seed),
            Command::Pretrain(a) => {
                set_path(&mut c.reference, &a.reference);
                set_path(&mut c.ensemble, &a.ensemble);
                set_opt(&mut c.members, a.members);
                if a.hidden.is_some() {
                    c.hidden_dims.clone_from(&a.hidden);
                }
                set_opt(&mut c.dropout_rate, a.dropout_rate);
                set_opt(&mut c.dropout_position, a.dropout_position);
                set_opt(&mut c.train.learning_rate, a.lr);
                set_opt(&mut c.train.epochs, a.epochs);
                set_opt(&mut c.train.batch_size, a.batch_size);
                set_opt(&mut c.seed, a.seed);
                set_opt(&mut c.threshold, a.threshold);
                if let Some(i) = a.inference {
                    c.inference = Some(i.into());
                }
                if let Some(q) = a.acquisition {
                    c.acquisition = Some(q.into());
                }
            }
            Command::Transfer(a) => {
                set_path(&mut c.ensemble, &a.ensemble);
                set_path(&mut c.user, &a.user);
                set_opt(&mut c.budget, a.budget);
                set_opt(&mut c.transfer.learning_rate, a.lr);
                set_opt(&mut c.transfer.epochs, a.epochs);
                set_opt(&mut c.transfer.batch_size, a.batch_size);
                set_opt(&mut c.seed, a.seed);
                if let Some(q) = a.acquisition {
                    c.acquisition = Some(q.into());
                }
            }
            Command::Estimate(a) => {
                set_path(&mut c.ensemble, &a.ensemble);
                set_path(&mut c.user, &a.user);
                set_path(&mut c.labeled, &a.labeled);
                set_opt(&mut c.threshold, a.threshold);
                if a.no_blend {
                    c.blend = false;
                }
                if let Some(i) = a.inference {
                    c.inference = Some(i.into());
                }
            }
            Command::Baselines(a) => {
                set_path(&mut c.reference, &a.reference);
                set_path(&mut c.user, &a.user);
                set_path(&mut c.labeled, &a.selected);
                if a.only.is_some() {
                    c.baselines.clone_from(a.only.as_ref().unwrap());
                }
                set_opt(&mut c.ts_fit, a.ts_fit);
                if a.rs_fractions.is_some() {
                    c.rs_fractions.clone_from(a.rs_fractions.as_ref().unwrap());
                }
                set_opt(&mut c.rs_runs, a.rs_runs);
                set_opt(&mut c.seed, a.seed);
            }
            Command::Eval(a) => {
                set_path(&mut c.user, &a.user);
                set_path(&mut c.ensemble, &a.ensemble);
            }
            Command::Stream(a) => {
                set_path(&mut c.ensemble, &a.ensemble);
                set_path(&mut c.user, &a.user);
                set_path(&mut c.reference, &a.reference);
                set_opt(&mut c.stream_batch_size, a.batch_size);
                set_opt(&mut c.stream_batches, a.batches);
                set_opt(&mut c.seed, a.seed);
                set_opt(&mut c.threshold, a.threshold);
            }
        }
    }
}

/// Parses `args` (program name first), runs the command, and returns the
/// process exit code. Human-readable output goes to `out`, errors to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::MissingLabels { .. } = e {
                eprintln!("label the listed records in the user file and rerun transfer");
            }
            exit_code(&e)
        }
    }
}

/// Resolves the configuration for `cli` and runs its command.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = &cli.output_dir {
        config.output_dir.clone_from(dir);
    }
    cli.command.apply(&mut config);
    config.validate()?;
    let o = Output(out);
    match &cli.command {
        Command::Gen(a) => cmd_gen(a, &config, o),
        Command::Pretrain(_) => cmd_pretrain(&config, o),
        Command::Transfer(a) => cmd_transfer(a, &config, o),
        Command::Estimate(a) => cmd_estimate(a, &config, o),
        Command::Baselines(a) => cmd_baselines(a, &config, o),
        Command::Eval(a) => cmd_eval(a, &config, o),
        Command::Stream(a) => cmd_stream(a, &config, o),
    }
}

/// Summary sink; write failures on the terminal are not worth aborting for.
struct Output<'a>(&'a mut dyn Write);

impl Output<'_> {
    fn line(&mut self, text: impl AsRef<str>) {
        let _ = writeln!(self.0, "{}", text.as_ref());
    }
}

fn load(path: &Path) -> Result<Dataset> {
    datamodel::load_dataset(path, Format::from_path(path))
}

fn save(dataset: &Dataset, path: &Path) -> Result<()> {
    datamodel::save_dataset(dataset, path, Format::from_path(path))
}

pub fn read_ids(path: &Path) -> Result<Vec<String>> {
    Ok(fsutil::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn write_ids(path: &Path, ids: &[String]) -> Result<()> {
    fsutil::write_atomic(path, |w| {
        for id in ids {
            writeln!(w, "{id}")?;
        }
        Ok(())
    })
}

/// Writes a JSONL report: a `run` header line, then one line per row.
fn write_report(path: &Path, command: &str, seed: u64, rows: &[Value]) -> Result<()> {
    let header = json!({
        "kind": "run",
        "command": command,
        "seed": seed,
        "version": env!("CARGO_PKG_VERSION"),
    });
    fsutil::write_atomic(path, |w| {
        for row in std::iter::once(&header).chain(rows) {
            serde_json::to_writer(&mut *w, row)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn default_output(config: &RunConfig, explicit: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    match explicit {
        Some(p) => Ok(p.clone()),
        None => {
            ensure_dir(&config.output_dir)?;
            Ok(config.output_dir.join(name))
        }
    }
}

fn cmd_gen(a: &GenArgs, config: &RunConfig, mut o: Output) -> Result<()> {
    let spec = ScenarioSpec {
        n: a.n,
        classes: a.classes,
        target_acc: a.acc,
        margin_mean: a.margin_mean,
        margin_std: a.margin_std,
        wrong_margin_ratio: a.wrong_ratio,
        temperature_distortion: a.distortion,
        null_fraction: a.null_fraction,
        seed: config.seed,
        id_prefix: a.prefix.clone(),
    };
    let dataset = synth::generate(&spec)?;
    save(&dataset, &a.out)?;
    o.line(format!(
        "wrote {} records to {} (true accuracy {:.4}, seed {})",
        dataset.len(),
        a.out.display(),
        datamodel::true_accuracy(&dataset)?,
        config.seed
    ));
    Ok(())
}

fn cmd_pretrain(config: &RunConfig, mut o: Output) -> Result<()> {
    let reference = load(config.require(&config.reference, "reference")?)?;
    let dir = config.require(&config.ensemble, "ensemble")?;
    let arch = config.architecture(reference.class_count());
    let mut ensemble =
        monitor::pretrain_ensemble(&reference, &arch, config.members, &config.train_config())?;
    if let Some(mode) = config.inference {
        ensemble = ensemble.with_inference_mode(mode);
    }
    if let Some(rule) = config.acquisition {
        ensemble = ensemble.with_acquisition(rule);
    }
    ensemble.save(dir, config.threshold)?;
    let finals: Vec<f64> = ensemble
        .loss_histories()
        .iter()
        .filter_map(|h| h.last().copied())
        .collect();
    let mean_loss = finals.iter().sum::<f64>() / finals.len().max(1) as f64;
    o.line(format!(
        "trained {} members {:?} on {} records; mean final loss {:.4}; seed {}",
        ensemble.len(),
        arch.hidden_dims,
        reference.len(),
        mean_loss,
        config.seed
    ));
    o.line(format!("ensemble written to {}", dir.display()));
    Ok(())
}

fn cmd_transfer(a: &TransferArgs, config: &RunConfig, mut o: Output) -> Result<()> {
    let dir = config.require(&config.ensemble, "ensemble")?;
    let user = load(config.require(&config.user, "user")?)?;
    let (mut ensemble, threshold) = Ensemble::load(dir)?;
    if let Some(rule) = config.acquisition {
        ensemble = ensemble.with_acquisition(rule);
    }
    let ids = ensemble.select_for_labeling(&user, config.budget)?;
    let selected_path = default_output(config, &a.selected, SELECTED_IDS_FILE)?;
    write_ids(&selected_path, &ids)?;
    o.line(format!(
        "selected {} of {} records; ids written to {}",
        ids.len(),
        user.len(),
        selected_path.display()
    ));

    let subset = user.subset(&ids)?;
    let missing: Vec<String> = subset
        .records()
        .iter()
        .filter(|r| r.label().is_none())
        .map(|r| r.id().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingLabels {
            count: missing.len(),
            ids: missing,
        });
    }

    let transferred = ensemble.transfer(&subset, &config.transfer_config())?;
    let target = a.out.as_ref().unwrap_or(dir);
    transferred.save(target, threshold)?;
    write_ids(&target.join(SELECTED_IDS_FILE), &ids)?;
    o.line(format!(
        "transferred {} members on {} labeled records (accuracy {:.4}); written to {}",
        transferred.len(),
        subset.len(),
        datamodel::true_accuracy(&subset)?,
        target.display()
    ));
    Ok(())
}

fn labeled_subset(config: &RunConfig, user: &Dataset) -> Result<Option<Dataset>> {
    match &config.labeled {
        Some(path) => Ok(Some(user.subset(&read_ids(path)?)?)),
        None => Ok(None),
    }
}

fn cmd_estimate(a: &EstimateArgs, config: &RunConfig, mut o: Output) -> Result<()> {
    let dir = config.require(&config.ensemble, "ensemble")?;
    let user = load(config.require(&config.user, "user")?)?;
    let (mut ensemble, _) = Ensemble::load(dir)?;
    if let Some(mode) = config.inference {
        ensemble = ensemble.with_inference_mode(mode);
    }
    let labeled = labeled_subset(config, &user)?;
    let estimate = ensemble.estimate_accuracy(
        &user,
        EstimateOptions {
            threshold: config.threshold,
            labeled_subset: labeled.as_ref(),
            blend: config.blend,
        },
    )?;
    let row = json!({
        "kind": "estimate",
        "method": "monitor",
        "estimate": estimate.value(),
        "mean": estimate.mean,
        "std": estimate.std,
        "per_model": estimate.per_model,
        "threshold": estimate.threshold,
        "n_labeled": estimate.n_labeled,
        "n_monitored": estimate.n_monitored,
        "labeled_accuracy": estimate.labeled_accuracy,
        "blended": estimate.blended,
    });
    let path = default_output(config, &a.report, "estimate.jsonl")?;
    write_report(&path, "estimate", ensemble.master_seed(), &[row])?;
    o.line(format!(
        "estimated accuracy {:.4} (member mean {:.4}, std {:.4}) over {} monitored + {} labeled records, threshold {}",
        estimate.value(),
        estimate.mean,
        estimate.std,
        estimate.n_monitored,
        estimate.n_labeled,
        estimate.threshold
    ));
    o.line(format!("report written to {}", path.display()));
    Ok(())
}

fn cmd_baselines(a: &BaselinesArgs, config: &RunConfig, mut o: Output) -> Result<()> {
    let reference = load(config.require(&config.reference, "reference")?)?;
    let user = load(config.require(&config.user, "user")?)?;
    if user.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let enabled: HashSet<Baseline> = config.baselines.iter().copied().collect();
    let mut rows = Vec::new();
    let mut summary = Vec::new();

    for (method, kind) in [(Baseline::Mp, ThresholdKind::Mp), (Baseline::Entropy, ThresholdKind::Entropy)] {
        if !enabled.contains(&method) {
            continue;
        }
        let cal = baselines::calibrate_threshold(&reference, kind)?;
        let estimate = kind.estimate(&user, cal.threshold);
        summary.push(format!(
            "{:<8} {:.4}  (threshold {:.6})",
            method.report_name(),
            estimate,
            cal.threshold
        ));
        rows.push(json!({
            "kind": "baseline",
            "method": method.report_name(),
            "estimate": estimate,
            "threshold": cal.threshold,
            "calibration_error": cal.calibration_error,
        }));
    }
    if enabled.contains(&Baseline::MpStar) {
        let estimate = baselines::estimate_mp_star(&user)?;
        summary.push(format!("{:<8} {:.4}", "MP*", estimate));
        rows.push(json!({"kind": "baseline", "method": "MP*", "estimate": estimate}));
    }
    if enabled.contains(&Baseline::Ts) {
        let (fit_set, fit_on) = match config.ts_fit {
            TsFit::Reference => (reference.clone(), "reference"),
            TsFit::Selected => {
                let path = config.labeled.as_ref().ok_or_else(|| {
                    Error::config("--ts-fit selected needs --selected <ids file>")
                })?;
                (user.subset(&read_ids(path)?)?, "selected")
            }
        };
        let fit = baselines::fit_temperature(&fit_set)?;
        if fit.excluded > 0 {
            o.line(format!(
                "notice: {} NULL-labeled records excluded from the temperature fit",
                fit.excluded
            ));
        }
        let estimate = baselines::estimate_ts(&user, fit.temperature)?;
        summary.push(format!(
            "{:<8} {:.4}  (T {:.4}, fitted on {})",
            "TS", estimate, fit.temperature, fit_on
        ));
        rows.push(json!({
            "kind": "baseline",
            "method": "TS",
            "estimate": estimate,
            "temperature": fit.temperature,
            "nll": fit.nll,
            "fit_on": fit_on,
            "fit_size": fit_set.len() - fit.excluded,
        }));
    }
    if enabled.contains(&Baseline::Rs) {
        if user.is_fully_labeled() {
            for &fraction in &config.rs_fractions {
                let rs = baselines::estimate_rs(&user, fraction, config.rs_runs, config.seed)?;
                summary.push(format!(
                    "{:<8} [{:.4}, {:.4}]  (mean {:.4}, {} runs of {} records)",
                    format!("RS({}%)", fraction * 100.0),
                    rs.min,
                    rs.max,
                    rs.mean,
                    rs.runs.len(),
                    rs.sample_size
                ));
                rows.push(json!({
                    "kind": "baseline",
                    "method": "RS",
                    "fraction": fraction,
                    "sample_size": rs.sample_size,
                    "runs": rs.runs.len(),
                    "min": rs.min,
                    "max": rs.max,
                    "estimate": rs.mean,
                }));
            }
        } else {
            o.line("notice: user set is not fully labeled; RS rows omitted");
        }
    }

    let path = default_output(config, &a.report, "baselines.jsonl")?;
    write_report(&path, "baselines", config.seed, &rows)?;
    for line in summary {
        o.line(line);
    }
    o.line(format!("report written to {}", path.display()));
    Ok(())
}

/// A row read back from a report for evaluation.
struct ReportRow {
    label: String,
    estimate: f64,
    temperature: Option<f64>,
}

fn read_report_rows(path: &Path) -> Result<Vec<ReportRow>> {
    let text = fsutil::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line).map_err(|e| Error::MalformedRow {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let (Some(method), Some(estimate)) = (v["method"].as_str(), v["estimate"].as_f64()) else {
            continue;
        };
        let label = match v["fraction"].as_f64() {
            Some(f) => format!("{method}({}%)", f * 100.0),
            None => method.to_string(),
        };
        rows.push(ReportRow {
            label,
            estimate,
            temperature: v["temperature"].as_f64(),
        });
    }
    Ok(rows)
}

fn cmd_eval(a: &EvalArgs, config: &RunConfig, mut o: Output) -> Result<()> {
    let user = load(config.require(&config.user, "user")?)?;
    let mut rows = Vec::new();
    for path in &a.reports {
        rows.extend(read_report_rows(path)?);
    }
    let mut out_rows = Vec::new();

    if !user.is_fully_labeled() {
        o.line("notice: user set is not fully labeled; error and AUPR tables omitted");
    } else {
        let truth = datamodel::true_accuracy(&user)?;
        o.line(format!("true accuracy {truth:.4}"));
        o.line(format!("{:<12} {:>9} {:>9}", "method", "estimate", "error"));
        for r in &rows {
            let error = metrics::estimation_error(r.estimate, truth);
            o.line(format!("{:<12} {:>9.4} {:>9.4}", r.label, r.estimate, error));
            out_rows.push(json!({
                "table": "error",
                "method": r.label,
                "estimate": r.estimate,
                "true_accuracy": truth,
                "error": error,
            }));
        }

        let positive = match a.positive {
            PositiveArg::Correct => PositiveClass::Correct,
            PositiveArg::Wrong => PositiveClass::Wrong,
        };
        let records = user.records();
        let mut scored: Vec<(String, Vec<f64>)> = Vec::new();
        if let Some(dir) = &config.ensemble {
            let (ensemble, _) = Ensemble::load(dir)?;
            scored.push(("monitor".into(), ensemble.mean_scores(&user)?));
        }
        scored.push(("MP".into(), records.iter().map(baselines::mp_score).collect()));
        scored.push((
            "Entropy".into(),
            records.iter().map(|r| -baselines::multiclass_entropy(r)).collect(),
        ));
        if let Some(t) = rows.iter().find_map(|r| r.temperature) {
            scored.push((
                "TS".into(),
                records.iter().map(|r| baselines::ts_confidence(r, t)).collect(),
            ));
        }
        let cw = datamodel::correctness(&user)?;
        if let Some(dir) = &a.pr_dir {
            ensure_dir(dir)?;
        }
        o.line(format!("{:<12} {:>9}", "method", "AUPR"));
        for (name, scores) in &scored {
            match metrics::aupr(scores, &cw, positive) {
                Ok(value) => {
                    o.line(format!("{name:<12} {value:>9.4}"));
                    out_rows.push(json!({
                        "table": "aupr",
                        "method": name,
                        "positive": format!("{positive:?}").to_lowercase(),
                        "aupr": value,
                    }));
                    if let Some(dir) = &a.pr_dir {
                        let file = format!("pr_{}.csv", name.to_lowercase());
                        metrics::pr_curve(scores, &cw, positive)?.save_csv(dir.join(file))?;
                    }
                }
                Err(e) => o.line(format!("notice: AUPR for {name} omitted: {e}")),
            }
        }
    }

    let path = default_output(config, &a.out, "eval.jsonl")?;
    write_report(&path, "eval", config.seed, &out_rows)?;
    o.line(format!("evaluation written to {}", path.display()));
    Ok(())
}

fn cmd_stream(a: &StreamArgs, config: &RunConfig, mut o: Output) -> Result<()> {
    let dir = config.require(&config.ensemble, "ensemble")?;
    let user = load(config.require(&config.user, "user")?)?;
    let (ensemble, _) = Ensemble::load(dir)?;
    let batches = ensemble.stream_estimate(&user, &config.stream_config())?;
    let mp_threshold = match &config.reference {
        Some(path) => Some(baselines::calibrate_threshold(&load(path)?, ThresholdKind::Mp)?.threshold),
        None => None,
    };
    let path = default_output(config, &a.out, "stream.csv")?;
    let records = user.records();
    fsutil::write_atomic(&path, |w| {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["batch", "estimate", "true_accuracy"];
        if mp_threshold.is_some() {
            header.push("mp_estimate");
        }
        wtr.write_record(&header)?;
        for b in &batches {
            let mut row = vec![
                b.batch.to_string(),
                b.estimate.to_string(),
                b.true_accuracy.map(|t| t.to_string()).unwrap_or_default(),
            ];
            if let Some(th) = mp_threshold {
                let hits = b.positions.iter().filter(|&&i| baselines::mp_score(&records[i]) >= th).count();
                row.push((hits as f64 / b.positions.len() as f64).to_string());
            }
            wtr.write_record(&row)?;
        }
        wtr.flush()
    })?;
    let tracked: Vec<f64> = batches
        .iter()
        .filter_map(|b| b.true_accuracy.map(|t| (b.estimate - t).abs()))
        .collect();
    if tracked.len() == batches.len() && !tracked.is_empty() {
        o.line(format!(
            "{} batches of {}; mean absolute tracking error {:.4}",
            batches.len(),
            config.stream_batch_size,
            tracked.iter().sum::<f64>() / tracked.len() as f64
        ));
    } else {
        o.line(format!("{} batches of {}", batches.len(), config.stream_batch_size));
    }
    o.line(format!("per-batch estimates written to {}", path.display()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.members, 20);
        assert_eq!(c.budget, 0.01);
        assert_eq!(c.threshold, 0.5);
        assert_eq!(c.train.learning_rate, 0.001);
        assert_eq!(c.train.epochs, 200);
        assert_eq!(c.stream_batch_size, 500);
        assert_eq!(c.stream_batches, 100);
        assert_eq!(c.rs_runs, 100);
        c.validate().unwrap();
    }

    #[test]
    fn fractions() {
        assert_eq!(parse_fraction("1%").unwrap(), 0.01);
        assert_eq!(parse_fraction("0.25").unwrap(), 0.25);
        assert!(parse_fraction("0").is_err());
        assert!(parse_fraction("150%").is_err());
        assert!(parse_fraction("abc").is_err());
    }

    #[test]
    fn config_file_then_flags() {
        let mut c = RunConfig::default();
        c.apply_file_text(
            "# comment\nmembers = 5\nbudget = 2%\nhidden = 8, 4\ninference = mc_dropout\n\nseed=9 # trailing\n",
            "cfg",
        )
        .unwrap();
        assert_eq!(c.members, 5);
        assert_eq!(c.budget, 0.02);
        assert_eq!(c.hidden_dims, Some(vec![8, 4]));
        assert_eq!(c.inference, Some(InferenceMode::McDropout));
        assert_eq!(c.seed, 9);

        let cli = Cli::try_parse_from(["accmon", "pretrain", "--members", "3", "--seed", "4"]).unwrap();
        cli.command.apply(&mut c);
        assert_eq!((c.members, c.seed), (3, 4));
        assert_eq!(c.budget, 0.02);
    }

    #[test]
    fn config_file_errors_name_the_line() {
        let mut c = RunConfig::default();
        let e = c.apply_file_text("members = 2\nbogus = 1\n", "run.cfg").unwrap_err();
        assert!(e.to_string().contains("run.cfg:2"), "{e}");
        assert!(c.apply_file_text("no equals sign", "x").is_err());
        assert!(c.apply_file_text("members = -1", "x").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::config("x")), EXIT_USAGE);
        assert_eq!(exit_code(&Error::EmptyDataset), EXIT_DATA);
        let mut sink = Vec::new();
        assert_eq!(run(["accmon", "gen", "--out", "x.jsonl", "--acc", "1.5"], &mut sink), EXIT_USAGE);
        assert_eq!(run(["accmon", "frobnicate"], &mut sink), EXIT_USAGE);
        assert_eq!(run(["accmon", "--help"], &mut sink), EXIT_OK);
    }
}
