//! Loading attributed impression logs from delimited text.
//!
//! Each row is one impression. Configured columns become known attributes;
//! the conversion delay, discretized into fixed buckets, is the single
//! unknown attribute. The bucket domain is fixed by the spec, not by the
//! delays that happen to be observed.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::{Attribute, AttributeSchema, AttributionRecord};

/// Token substituted for empty categorical values.
pub const MISSING: &str = "(missing)";

const MALFORMED_SAMPLES: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnownColumn {
    pub attribute: String,
    pub column: String,
}

/// How to tell whether a row received an attributed conversion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConversionIndicator {
    /// Converted iff `column` holds one of `positive`.
    Flag { column: String, positive: Vec<String> },
    /// Converted iff the delay field parses to a non-negative number; a
    /// negative sentinel (such as `-1`) marks no conversion.
    DelayPresent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DelaySource {
    /// Column already holds the delay in seconds.
    Delay { column: String },
    /// Delay is `column - timestamp_column`.
    ConversionTimestamp { column: String },
}

fn default_delimiter() -> char {
    ','
}

fn default_true() -> bool {
    true
}

fn default_unknown_name() -> String {
    "delay".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub path: PathBuf,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default = "default_true")]
    pub has_header: bool,
    /// Column names for files without a header row.
    #[serde(default)]
    pub column_names: Option<Vec<String>>,
    pub timestamp_column: String,
    /// Known attributes in tree order.
    pub known_columns: Vec<KnownColumn>,
    pub conversion: ConversionIndicator,
    pub delay: DelaySource,
    #[serde(default = "default_unknown_name")]
    pub unknown_attribute: String,
    pub delay_bucket_seconds: u64,
    pub delay_bucket_count: usize,
    /// Longest attributable delay; when set, the buckets must cover it.
    #[serde(default)]
    pub attribution_window_seconds: Option<u64>,
    #[serde(default)]
    pub max_malformed_rows: usize,
    #[serde(default)]
    pub prior_cutoff_timestamp: Option<i64>,
    /// Alternative to an explicit cutoff: fraction of the observed time range.
    #[serde(default)]
    pub prior_fraction: Option<f64>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.delay_bucket_seconds == 0 || self.delay_bucket_count == 0 {
            return Err(Error::Config("delay buckets need positive width and count".into()));
        }
        if let Some(window) = self.attribution_window_seconds {
            let covered = self.delay_bucket_seconds.saturating_mul(self.delay_bucket_count as u64);
            if covered < window {
                return Err(Error::Config(format!(
                    "{} buckets of {} s cover {covered} s, less than the {window} s attribution window",
                    self.delay_bucket_count, self.delay_bucket_seconds
                )));
            }
        }
        if let Some(f) = self.prior_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("prior_fraction must lie in [0, 1], got {f}")));
            }
        }
        if !self.delimiter.is_ascii() {
            return Err(Error::Config("delimiter must be a single ASCII character".into()));
        }
        Ok(())
    }

    pub fn bucket_domain(&self) -> Vec<String> {
        (0..self.delay_bucket_count).map(|b| b.to_string()).collect()
    }

    /// Known columns in order, then the delay bucket as the unknown attribute.
    pub fn schema(&self) -> Result<AttributeSchema> {
        let mut attrs: Vec<Attribute> = self
            .known_columns
            .iter()
            .map(|k| Attribute::known(k.attribute.clone()))
            .collect();
        attrs.push(Attribute::unknown(self.unknown_attribute.clone(), self.bucket_domain()));
        AttributeSchema::new(attrs)
    }
}

/// `floor(delay / width)`, clamped to the last bucket.
pub fn discretize_delay(delay_seconds: u64, spec: &DatasetSpec) -> usize {
    let bucket = delay_seconds / spec.delay_bucket_seconds;
    usize::try_from(bucket)
        .unwrap_or(usize::MAX)
        .min(spec.delay_bucket_count - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedRecords {
    pub records: Vec<AttributionRecord>,
    pub malformed_rows: usize,
    /// Up to a handful of `(row, reason)` pairs, rows numbered from 1
    /// counting the header.
    pub malformed_samples: Vec<(usize, String)>,
}

struct ColumnIndex {
    timestamp: usize,
    known: Vec<(String, usize)>,
    flag: Option<(usize, Vec<String>)>,
    delay: usize,
    delay_is_timestamp: bool,
}

fn resolve_columns(spec: &DatasetSpec, header: &[String]) -> Result<ColumnIndex> {
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let (delay_col, delay_is_timestamp) = match &spec.delay {
        DelaySource::Delay { column } => (column, false),
        DelaySource::ConversionTimestamp { column } => (column, true),
    };
    Ok(ColumnIndex {
        timestamp: find(&spec.timestamp_column)?,
        known: spec
            .known_columns
            .iter()
            .map(|k| Ok((k.attribute.clone(), find(&k.column)?)))
            .collect::<Result<_>>()?,
        flag: match &spec.conversion {
            ConversionIndicator::Flag { column, positive } => Some((find(column)?, positive.clone())),
            ConversionIndicator::DelayPresent => None,
        },
        delay: find(delay_col)?,
        delay_is_timestamp,
    })
}

fn parse_int(field: &str, what: &str) -> std::result::Result<i64, String> {
    let field = field.trim();
    field
        .parse::<i64>()
        .or_else(|_| field.parse::<f64>().ok().filter(|f| f.is_finite()).map(|f| f as i64).ok_or(()))
        .map_err(|_| format!("cannot parse {what} `{field}`"))
}

fn parse_row(spec: &DatasetSpec, cols: &ColumnIndex, row: &csv::StringRecord) -> std::result::Result<AttributionRecord, String> {
    let get = |i: usize| row.get(i).ok_or_else(|| format!("row has no field {i}"));
    let timestamp = parse_int(get(cols.timestamp)?, "timestamp")?;
    let known: BTreeMap<String, String> = cols
        .known
        .iter()
        .map(|(attr, i)| {
            let value = get(*i)?.trim();
            Ok((attr.clone(), if value.is_empty() { MISSING.to_string() } else { value.to_string() }))
        })
        .collect::<std::result::Result<_, String>>()?;
    let raw_delay = get(cols.delay)?.trim();
    let converted = match &cols.flag {
        Some((i, positive)) => {
            let flag = get(*i)?.trim();
            positive.iter().any(|p| p == flag)
        }
        None => !raw_delay.is_empty() && parse_int(raw_delay, "delay")? >= 0,
    };
    let mut record = AttributionRecord {
        known_values: known,
        unknown_values: None,
        timestamp,
    };
    if converted {
        let value = parse_int(raw_delay, "delay")?;
        let delay = if cols.delay_is_timestamp { value - timestamp } else { value };
        if delay < 0 {
            return Err(format!("negative conversion delay {delay}"));
        }
        let bucket = discretize_delay(delay as u64, spec);
        record = record.with_conversion(spec.unknown_attribute.clone(), bucket.to_string());
    }
    Ok(record)
}

/// Streams the file described by `spec` into records.
pub fn load_records(spec: &DatasetSpec) -> Result<LoadedRecords> {
    spec.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(spec.delimiter as u8)
        .has_headers(spec.has_header)
        .flexible(true)
        .from_path(&spec.path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", spec.path.display())))?;
    let header: Vec<String> = match (&spec.column_names, spec.has_header) {
        (Some(names), _) => names.clone(),
        (None, true) => reader.headers()?.iter().map(|h| h.trim().to_string()).collect(),
        (None, false) => {
            return Err(Error::Config("files without a header need `column_names`".into()));
        }
    };
    let cols = resolve_columns(spec, &header)?;
    let first_row = if spec.has_header { 2 } else { 1 };

    let mut records = Vec::new();
    let mut malformed_rows = 0;
    let mut malformed_samples = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + first_row;
        let parsed = row
            .map_err(|e| e.to_string())
            .and_then(|row| parse_row(spec, &cols, &row));
        match parsed {
            Ok(record) => records.push(record),
            Err(reason) => {
                malformed_rows += 1;
                if malformed_samples.len() < MALFORMED_SAMPLES {
                    malformed_samples.push((row_no, reason));
                }
                if malformed_rows > spec.max_malformed_rows {
                    let samples: Vec<String> = malformed_samples
                        .iter()
                        .map(|(r, why)| format!("row {r}: {why}"))
                        .collect();
                    return Err(Error::Data(format!(
                        "more than {} malformed rows in {}; first: {}",
                        spec.max_malformed_rows,
                        spec.path.display(),
                        samples.join("; ")
                    )));
                }
            }
        }
    }
    Ok(LoadedRecords {
        records,
        malformed_rows,
        malformed_samples,
    })
}

/// Cutoff at `fraction` of the way through the records' time range.
pub fn cutoff_from_fraction(records: &[AttributionRecord], fraction: f64) -> Option<i64> {
    let min = records.iter().map(|r| r.timestamp).min()?;
    let max = records.iter().map(|r| r.timestamp).max()?;
    Some(min + ((max - min) as f64 * fraction).round() as i64)
}

/// Partition by impression timestamp: `< cutoff` goes to the prior side.
pub fn temporal_split(
    records: &[AttributionRecord],
    cutoff: i64,
) -> (Vec<AttributionRecord>, Vec<AttributionRecord>) {
    records.iter().cloned().partition(|r| r.timestamp < cutoff)
}
