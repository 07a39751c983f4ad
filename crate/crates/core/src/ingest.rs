//! Loading of benchmark CSVs, per-dataset configuration and labeled BGL logs.

use std::fs;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ground-truth anomaly label of a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyLabel {
    Normal,
    Anomaly,
}

impl AnomalyLabel {
    pub fn is_anomaly(self) -> bool {
        self == AnomalyLabel::Anomaly
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AnomalyLabel::Normal => "normal",
            AnomalyLabel::Anomaly => "anomaly",
        }
    }
}

/// One log message with optional ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub line_id: u64,
    pub content: String,
    pub truth_event_id: Option<String>,
    pub truth_template: Option<String>,
    pub anomaly_label: Option<AnomalyLabel>,
}

impl LogRecord {
    pub fn new(line_id: u64, content: impl Into<String>) -> Self {
        LogRecord {
            line_id,
            content: content.into(),
            truth_event_id: None,
            truth_template: None,
            anomaly_label: None,
        }
    }
}

/// Per-dataset tokenization and extraction settings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub name: String,
    pub tokenization_filter: String,
    pub epochs: u32,
    pub epsilon: u32,
    pub frame_length_override: Option<u32>,
}

pub const DEFAULT_EPOCHS: u32 = 5;
pub const DEFAULT_EPSILON: u32 = 50;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    name: String,
    tokenization_filter: String,
    epochs: Option<i64>,
    epsilon: Option<i64>,
    frame_length_override: Option<i64>,
}

impl DatasetConfig {
    pub fn new(name: &str, filter: &str, epochs: u32, epsilon: u32) -> Self {
        DatasetConfig {
            name: name.to_string(),
            tokenization_filter: filter.to_string(),
            epochs,
            epsilon,
            frame_length_override: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Validation("epochs must be at least 1".into()));
        }
        if self.epsilon == 0 {
            return Err(Error::Validation("epsilon must be at least 1".into()));
        }
        if self.frame_length_override == Some(0) {
            return Err(Error::Validation(
                "frame_length_override must be positive".into(),
            ));
        }
        Regex::new(&self.tokenization_filter).map_err(|e| {
            Error::Config(format!(
                "tokenization_filter {:?} does not compile: {e}",
                self.tokenization_filter
            ))
        })?;
        Ok(())
    }

    /// Parses the TOML config text; see `configs/` for the shipped datasets.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].lines().count().max(1))
                .unwrap_or(1);
            Error::Config(format!("line {line}: {}", e.message()))
        })?;
        let positive = |key: &str, v: Option<i64>, default: u32| -> Result<u32> {
            match v {
                None => Ok(default),
                Some(v) if v >= 1 && v <= u32::MAX as i64 => Ok(v as u32),
                Some(v) => Err(Error::Validation(format!("{key} must be positive, got {v}"))),
            }
        };
        let cfg = DatasetConfig {
            name: raw.name,
            tokenization_filter: raw.tokenization_filter,
            epochs: positive("epochs", raw.epochs, DEFAULT_EPOCHS)?,
            epsilon: positive("epsilon", raw.epsilon, DEFAULT_EPSILON)?,
            frame_length_override: raw
                .frame_length_override
                .map(|v| positive("frame_length_override", Some(v), 0))
                .transpose()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        let mut out = format!(
            "name = {}\ntokenization_filter = {}\nepochs = {}\nepsilon = {}\n",
            toml_string(&self.name),
            toml_string(&self.tokenization_filter),
            self.epochs,
            self.epsilon
        );
        if let Some(m) = self.frame_length_override {
            out.push_str(&format!("frame_length_override = {m}\n"));
        }
        out
    }

    /// Settings for the ten loghub benchmark systems.
    pub fn builtin(name: &str) -> Option<Self> {
        let (filter, epochs, epsilon) = match name.to_ascii_lowercase().as_str() {
            "bgl" => (r"([ |:|\(|\)|=|,])|(core.)|(\.{2,})", 3, 50),
            "android" => (r#"([ |:|\(|\)|=|,|"|\{|\}|@|\$|\[|\]|\||;])"#, 5, 25),
            "openstack" => (r#"([ |:|\(|\)|"|\{|\}|@|\$|\[|\]|\||;])"#, 6, 5),
            "hdfs" => (r"(\s+blk_)|(:)|(\s)", 5, 15),
            "apache" => (r"([ ])", 5, 12),
            "hpc" => (r"([ |=])", 3, 10),
            "windows" => (r"([ ])", 5, 95),
            "healthapp" => (r"([ ])", 5, 100),
            "mac" => (r"([ ])|([\w-]+\.){2,}[\w-]+", 10, 300),
            "spark" => (r"([ ])|(\d+\sB)|(\d+\sKB)|(\d+\.){3}\d+", 3, 50),
            _ => return None,
        };
        let canonical = BUILTIN_DATASETS
            .iter()
            .find(|n| n.eq_ignore_ascii_case(name))
            .copied()
            .unwrap_or(name);
        Some(DatasetConfig::new(canonical, filter, epochs, epsilon))
    }
}

/// Names accepted by [`DatasetConfig::builtin`].
pub const BUILTIN_DATASETS: [&str; 10] = [
    "BGL",
    "Android",
    "OpenStack",
    "HDFS",
    "Apache",
    "HPC",
    "Windows",
    "HealthApp",
    "Mac",
    "Spark",
];

fn toml_string(s: &str) -> String {
    if !s.contains('\'') && !s.contains('\n') {
        format!("'{s}'")
    } else {
        format!("{s:?}")
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<DatasetConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DatasetConfig::from_toml_str(&text)
}

/// Reads a loghub "structured" CSV (`LineId,...,Content,EventId,EventTemplate`).
///
/// Only `Content` is required. A `Label` column (`-` for normal, anything
/// else an alert) fills in anomaly labels. Without a `LineId` column, line ids are the
/// 1-based row numbers.
pub fn load_loghub_csv(path: impl AsRef<Path>) -> Result<Vec<LogRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_loghub_csv(file)
}

pub fn read_loghub_csv(reader: impl std::io::Read) -> Result<Vec<LogRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let content_col = col("Content").ok_or_else(|| {
        Error::Schema(format!(
            "missing Content column; header was [{}]",
            headers.iter().collect::<Vec<_>>().join(", ")
        ))
    })?;
    let (line_col, event_col, template_col) = (col("LineId"), col("EventId"), col("EventTemplate"));
    let label_col = col("Label");

    let mut records = Vec::new();
    for (row, result) in rdr.records().enumerate() {
        let rec = result?;
        let line_id = match line_col {
            Some(c) => rec[c].trim().parse::<u64>().map_err(|_| {
                Error::Validation(format!("row {}: LineId {:?} is not an integer", row + 1, &rec[c]))
            })?,
            None => row as u64 + 1,
        };
        records.push(LogRecord {
            line_id,
            content: rec[content_col].to_string(),
            truth_event_id: event_col.map(|c| rec[c].to_string()),
            truth_template: template_col.map(|c| rec[c].to_string()),
            anomaly_label: label_col.map(|c| {
                if rec[c].trim() == "-" {
                    AnomalyLabel::Normal
                } else {
                    AnomalyLabel::Anomaly
                }
            }),
        });
    }
    Ok(records)
}

/// Number of leading whitespace-separated header fields on a raw BGL line
/// (label, timestamp, date, node, time, node repeat, type, component, level).
const BGL_HEADER_FIELDS: usize = 9;

/// Parses one raw BGL line into its alert label and message content.
pub fn parse_bgl_line(line: &str) -> (AnomalyLabel, String) {
    let mut rest = line.trim_start();
    let mut label = AnomalyLabel::Normal;
    for i in 0..BGL_HEADER_FIELDS {
        let end = rest.find(char::is_whitespace).unwrap_or(rest.len());
        if i == 0 && &rest[..end] != "-" {
            label = AnomalyLabel::Anomaly;
        }
        rest = rest[end..].trim_start();
    }
    (label, rest.trim_end().to_string())
}

/// Loads the leading `fraction` of a raw BGL log, labeling each line from its alert field.
pub fn load_labeled_bgl(path: impl AsRef<Path>, fraction: f64) -> Result<Vec<LogRecord>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Validation(format!(
            "fraction must be in (0, 1], got {fraction}"
        )));
    }
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8_lossy(&bytes);
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let keep = ((lines.len() as f64) * fraction + 1e-9).floor() as usize;
    Ok(lines[..keep.min(lines.len())]
        .iter()
        .enumerate()
        .map(|(i, line)| {
            let (label, content) = parse_bgl_line(line);
            LogRecord {
                line_id: i as u64 + 1,
                content,
                truth_event_id: None,
                truth_template: None,
                anomaly_label: Some(label),
            }
        })
        .collect())
}
