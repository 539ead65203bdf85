//! Softmax records, datasets and their file formats.
//!
//! A [`SoftmaxRecord`] is one output of the target classifier: its probability
//! vector, an optional ground-truth label and the cached predicted class. Two
//! on-disk formats are supported:
//!
//! * JSONL, one object per line: `{"id": "s00042", "probs": [..], "label": 3}`.
//!   `label` may be absent, `null`, or the string `"NULL"`.
//! * CSV with header `id,label,p0,...,p{C-1}`. An empty label cell means
//!   unlabeled; the literal `NULL` is the out-of-distribution marker.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

/// Largest tolerated deviation of a probability vector's sum from one.
pub const PROB_SUM_TOLERANCE: f64 = 1e-4;

/// Ground truth for a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Class(usize),
    /// Sample that belongs to none of the target classes. Always scored wrong.
    Null,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Class(k) => write!(f, "{k}"),
            Label::Null => f.write_str("NULL"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxRecord {
    id: String,
    probs: Vec<f64>,
    label: Option<Label>,
    predicted: usize,
}

impl SoftmaxRecord {
    /// Validates `probs`, renormalizes it to sum exactly to one and caches the
    /// predicted class.
    pub fn new(id: impl Into<String>, mut probs: Vec<f64>, label: Option<Label>) -> Result<Self> {
        let id = id.into();
        if probs.len() < 2 {
            return Err(Error::InvalidProbabilities(format!(
                "record `{id}` has {} classes, need at least 2",
                probs.len()
            )));
        }
        if let Some(bad) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidProbabilities(format!(
                "record `{id}` has entry {bad}"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(Error::InvalidProbabilities(format!(
                "record `{id}` sums to {sum}"
            )));
        }
        if sum != 1.0 {
            probs.iter_mut().for_each(|p| *p /= sum);
        }
        if let Some(Label::Class(k)) = label {
            if k >= probs.len() {
                return Err(Error::InvalidProbabilities(format!(
                    "record `{id}` has label {k} but only {} classes",
                    probs.len()
                )));
            }
        }
        let predicted = argmax(&probs);
        Ok(SoftmaxRecord {
            id,
            probs,
            label,
            predicted,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn label(&self) -> Option<Label> {
        self.label
    }

    pub fn predicted(&self) -> usize {
        self.predicted
    }

    pub fn class_count(&self) -> usize {
        self.probs.len()
    }

    /// `None` when unlabeled, otherwise whether the prediction matches.
    pub fn is_correct(&self) -> Option<bool> {
        self.label.map(|label| match label {
            Label::Class(k) => k == self.predicted,
            Label::Null => false,
        })
    }

    pub fn with_label(mut self, label: Option<Label>) -> Result<Self> {
        if let Some(Label::Class(k)) = label {
            if k >= self.probs.len() {
                return Err(Error::InvalidProbabilities(format!(
                    "record `{}` has label {k} but only {} classes",
                    self.id,
                    self.probs.len()
                )));
            }
        }
        self.label = label;
        Ok(self)
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

/// An ordered collection of records sharing one class count and unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<SoftmaxRecord>,
    class_count: usize,
}

impl Dataset {
    pub fn new(records: Vec<SoftmaxRecord>) -> Result<Self> {
        let class_count = records.first().map_or(0, SoftmaxRecord::class_count);
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if r.class_count() != class_count {
                return Err(Error::ClassCountMismatch {
                    expected: class_count,
                    found: r.class_count(),
                    id: r.id.clone(),
                });
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        Ok(Dataset {
            records,
            class_count,
        })
    }

    pub fn records(&self) -> &[SoftmaxRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<SoftmaxRecord> {
        self.records
    }

    /// Zero for an empty dataset.
    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labeled_fraction(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        let labeled = self.records.iter().filter(|r| r.label.is_some()).count();
        labeled as f64 / self.records.len() as f64
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.records.iter().all(|r| r.label.is_some())
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.id.as_str())
    }

    /// Records with the given ids, in the order the ids are listed.
    pub fn subset(&self, ids: &[String]) -> Result<Dataset> {
        let index: std::collections::HashMap<&str, usize> = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.as_str(), i))
            .collect();
        let mut records = Vec::with_capacity(ids.len());
        for id in ids {
            let i = index.get(id.as_str()).ok_or_else(|| Error::UnknownId(id.clone()))?;
            records.push(self.records[*i].clone());
        }
        Dataset::new(records)
    }

    /// Records whose id is not in `ids`, original order preserved.
    pub fn excluding(&self, ids: &HashSet<&str>) -> Dataset {
        Dataset {
            records: self
                .records
                .iter()
                .filter(|r| !ids.contains(r.id.as_str()))
                .cloned()
                .collect(),
            class_count: self.class_count,
        }
    }

    /// Records selected by position; positions may repeat.
    pub(crate) fn records_at<'a>(
        &'a self,
        positions: &'a [usize],
    ) -> impl Iterator<Item = &'a SoftmaxRecord> + 'a {
        positions.iter().map(move |&i| &self.records[i])
    }
}

/// Per-record correctness indicator aligned with a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrectnessVector(Vec<bool>);

impl CorrectnessVector {
    pub fn from_bools(values: Vec<bool>) -> Self {
        CorrectnessVector(values)
    }

    pub fn values(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count_correct(&self) -> usize {
        self.0.iter().filter(|&&c| c).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect()
    }
}

/// Correctness of every record. Fails on the first unlabeled record.
pub fn correctness(dataset: &Dataset) -> Result<CorrectnessVector> {
    dataset
        .records
        .iter()
        .map(|r| r.is_correct().ok_or_else(|| Error::Unlabeled(r.id.clone())))
        .collect::<Result<Vec<_>>>()
        .map(CorrectnessVector)
}

/// Fraction of records the target classified correctly.
pub fn true_accuracy(dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cw = correctness(dataset)?;
    Ok(cw.count_correct() as f64 / cw.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Jsonl,
    Csv,
}

impl Format {
    /// `.csv` maps to CSV, everything else to JSONL.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Jsonl,
        }
    }
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(Format::Jsonl),
            "csv" => Ok(Format::Csv),
            other => Err(Error::config(format!("unknown dataset format `{other}`"))),
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawLabel {
    Index(u64),
    Text(String),
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    probs: Vec<f64>,
    #[serde(default)]
    label: Option<RawLabel>,
}

#[derive(Serialize)]
struct RawRecordOut<'a> {
    id: &'a str,
    probs: &'a [f64],
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<serde_json::Value>,
}

fn parse_label_text(text: &str) -> std::result::Result<Option<Label>, String> {
    let text = text.trim();
    if text.is_empty() {
        Ok(None)
    } else if text == "NULL" {
        Ok(Some(Label::Null))
    } else {
        text.parse::<usize>()
            .map(|k| Some(Label::Class(k)))
            .map_err(|_| format!("invalid label `{text}`"))
    }
}

pub fn load_dataset(path: impl AsRef<Path>, format: Format) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    match format {
        Format::Jsonl => read_jsonl(BufReader::new(file), &name),
        Format::Csv => read_csv(file, &name),
    }
}

/// Reads JSONL; `source` names the input in error messages.
pub fn read_jsonl<R: BufRead>(reader: R, source: &str) -> Result<Dataset> {
    let mut records = Vec::new();
    let mut class_count = None;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::MalformedRow {
            path: source.to_string(),
            line: lineno,
            message,
        };
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let label = match raw.label {
            None => None,
            Some(RawLabel::Index(k)) => Some(Label::Class(k as usize)),
            Some(RawLabel::Text(t)) => parse_label_text(&t).map_err(malformed)?,
        };
        let record = build_record(raw.id, raw.probs, label, &mut class_count)
            .map_err(|e| malformed(e.to_string()))?;
        records.push(record);
    }
    Dataset::new(records)
}

fn build_record(
    id: String,
    probs: Vec<f64>,
    label: Option<Label>,
    class_count: &mut Option<usize>,
) -> Result<SoftmaxRecord> {
    match *class_count {
        Some(c) if c != probs.len() => {
            return Err(Error::ClassCountMismatch {
                expected: c,
                found: probs.len(),
                id,
            })
        }
        None => *class_count = Some(probs.len()),
        _ => {}
    }
    SoftmaxRecord::new(id, probs, label)
}

pub fn read_csv<R: Read>(reader: R, source: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::MalformedRow {
            path: source.to_string(),
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if headers.len() < 4 || &headers[0] != "id" || &headers[1] != "label" {
        return Err(Error::MalformedRow {
            path: source.to_string(),
            line: 1,
            message: "expected header `id,label,p0,...`".into(),
        });
    }
    let mut records = Vec::new();
    let mut class_count = None;
    for row in rdr.records() {
        let row = row.map_err(|e| Error::MalformedRow {
            path: source.to_string(),
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let lineno = row.position().map_or(0, |p| p.line() as usize);
        let malformed = |message: String| Error::MalformedRow {
            path: source.to_string(),
            line: lineno,
            message,
        };
        if row.len() < 4 {
            return Err(malformed(format!("expected at least 4 fields, got {}", row.len())));
        }
        let label = parse_label_text(&row[1]).map_err(malformed)?;
        let probs = row
            .iter()
            .skip(2)
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| malformed(format!("invalid probability `{f}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let record = build_record(row[0].to_string(), probs, label, &mut class_count)
            .map_err(|e| malformed(e.to_string()))?;
        records.push(record);
    }
    Dataset::new(records)
}

pub fn write_jsonl<W: Write>(dataset: &Dataset, mut out: W) -> std::io::Result<()> {
    for r in &dataset.records {
        let label = r.label.map(|l| match l {
            Label::Class(k) => serde_json::Value::from(k),
            Label::Null => serde_json::Value::from("NULL"),
        });
        let raw = RawRecordOut {
            id: &r.id,
            probs: &r.probs,
            label,
        };
        serde_json::to_writer(&mut out, &raw)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_csv<W: Write>(dataset: &Dataset, out: W) -> std::io::Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..dataset.class_count).map(|k| format!("p{k}")));
    wtr.write_record(&header)?;
    for r in &dataset.records {
        let mut row = Vec::with_capacity(2 + r.probs.len());
        row.push(r.id.clone());
        row.push(r.label.map(|l| l.to_string()).unwrap_or_default());
        row.extend(r.probs.iter().map(|p| p.to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush()
}

/// Writes the dataset atomically (temp file + rename).
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>, format: Format) -> Result<()> {
    let path = path.as_ref();
    fsutil::write_atomic(path, |w| match format {
        Format::Jsonl => write_jsonl(dataset, w),
        Format::Csv => write_csv(dataset, w),
    })
}
