//! Seeded synthetic impression logs in the ingest CSV format.
//!
//! Columns: `timestamp`, `partner_id`, one column per extra known attribute,
//! `converted` (`0`/`1`) and `conversion_timestamp` (`-1` when unconverted).

use std::io::Write;
use std::path::PathBuf;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{ConversionIndicator, DatasetSpec, DelaySource, KnownColumn};
use crate::noise::seeded_stream;
use crate::tree::AttributionRecord;

const DAY: i64 = 86_400;
pub const GROUP_COLUMN: &str = "partner_id";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthAttribute {
    pub name: String,
    pub cardinality: usize,
    /// Zipf exponent of the value distribution; 0 is uniform.
    #[serde(default)]
    pub skew: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub groups: usize,
    /// Mean impressions per group.
    pub impressions_per_group: usize,
    /// Zipf exponent of group volumes; 0 gives every group the same volume.
    #[serde(default)]
    pub volume_skew: f64,
    pub conversion_rate: f64,
    /// Known attributes below `partner_id`, in tree order.
    pub attributes: Vec<SynthAttribute>,
    pub days: u32,
    pub mean_delay_days: f64,
    pub attribution_window_days: u32,
    pub delay_bucket_days: u32,
    /// Share of the time range used for priors.
    #[serde(default = "default_prior_fraction")]
    pub prior_fraction: f64,
}

fn default_prior_fraction() -> f64 {
    0.5
}

/// One generated impression.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthRow {
    pub timestamp: i64,
    pub known: Vec<String>,
    pub conversion_timestamp: Option<i64>,
}

impl SyntheticSpec {
    /// Ten partners, three further known attributes and five 6-day delay
    /// buckets: each partner's subtree has depth 4.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            seed,
            groups: 10,
            impressions_per_group: 20_000,
            volume_skew: 1.0,
            conversion_rate: 0.05,
            attributes: vec![
                SynthAttribute { name: "country".into(), cardinality: 4, skew: 1.0 },
                SynthAttribute { name: "device".into(), cardinality: 3, skew: 0.5 },
                SynthAttribute { name: "age_group".into(), cardinality: 3, skew: 0.8 },
            ],
            days: 90,
            mean_delay_days: 5.0,
            attribution_window_days: 30,
            delay_bucket_days: 6,
            prior_fraction: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.days == 0 {
            return Err(Error::Config("synthetic spec needs at least one group and one day".into()));
        }
        if !(0.0..=1.0).contains(&self.conversion_rate) {
            return Err(Error::Config(format!(
                "conversion rate must lie in [0, 1], got {}",
                self.conversion_rate
            )));
        }
        if self.attributes.iter().any(|a| a.cardinality == 0) {
            return Err(Error::Config("attribute cardinality must be positive".into()));
        }
        if self.delay_bucket_days == 0 || self.attribution_window_days == 0 || !(self.mean_delay_days > 0.0) {
            return Err(Error::Config("delay parameters must be positive".into()));
        }
        Ok(())
    }

    pub fn bucket_count(&self) -> usize {
        self.attribution_window_days.div_ceil(self.delay_bucket_days) as usize
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut cols = vec!["timestamp".to_string(), GROUP_COLUMN.to_string()];
        cols.extend(self.attributes.iter().map(|a| a.name.clone()));
        cols.push("converted".into());
        cols.push("conversion_timestamp".into());
        cols
    }

    /// Spec for reading the generated file back with [`crate::ingest::load_records`].
    pub fn dataset_spec(&self, path: impl Into<PathBuf>) -> DatasetSpec {
        let mut known = vec![KnownColumn {
            attribute: GROUP_COLUMN.into(),
            column: GROUP_COLUMN.into(),
        }];
        known.extend(self.attributes.iter().map(|a| KnownColumn {
            attribute: a.name.clone(),
            column: a.name.clone(),
        }));
        DatasetSpec {
            path: path.into(),
            delimiter: ',',
            has_header: true,
            column_names: None,
            timestamp_column: "timestamp".into(),
            known_columns: known,
            conversion: ConversionIndicator::Flag {
                column: "converted".into(),
                positive: vec!["1".into()],
            },
            delay: DelaySource::ConversionTimestamp {
                column: "conversion_timestamp".into(),
            },
            unknown_attribute: "delay".into(),
            delay_bucket_seconds: self.delay_bucket_days as u64 * DAY as u64,
            delay_bucket_count: self.bucket_count(),
            attribution_window_seconds: Some(self.attribution_window_days as u64 * DAY as u64),
            max_malformed_rows: 0,
            prior_cutoff_timestamp: Some(self.prior_cutoff()),
            prior_fraction: None,
        }
    }

    pub fn prior_cutoff(&self) -> i64 {
        (self.days as f64 * DAY as f64 * self.prior_fraction).round() as i64
    }

    fn group_volumes(&self) -> Vec<usize> {
        let total = self.groups * self.impressions_per_group;
        let weights: Vec<f64> = (0..self.groups).map(|g| ((g + 1) as f64).powf(-self.volume_skew)).collect();
        let sum: f64 = weights.iter().sum();
        weights.iter().map(|w| (total as f64 * w / sum).round() as usize).collect()
    }

    pub fn generate_rows(&self) -> Result<Vec<SynthRow>> {
        self.validate()?;
        let mut rng = seeded_stream(self.seed, 0);
        let value_dists = self
            .attributes
            .iter()
            .map(|a| {
                WeightedIndex::new((0..a.cardinality).map(|j| ((j + 1) as f64).powf(-a.skew)))
                    .map_err(|e| Error::Config(format!("attribute `{}`: {e}", a.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        let span = self.days as i64 * DAY;
        let window = self.attribution_window_days as i64 * DAY;
        let mean_delay = self.mean_delay_days * DAY as f64;

        let mut rows = Vec::new();
        for (g, volume) in self.group_volumes().into_iter().enumerate() {
            for _ in 0..volume {
                let timestamp = rng.random_range(0..span);
                let mut known = vec![format!("p{g:02}")];
                for (attr, dist) in self.attributes.iter().zip(&value_dists) {
                    known.push(format!("{}_{}", attr.name, dist.sample(&mut rng)));
                }
                let conversion_timestamp = rng.random_bool(self.conversion_rate).then(|| {
                    let u = 1.0 - rng.random::<f64>();
                    let delay = ((-u.ln() * mean_delay) as i64).min(window - 1);
                    timestamp + delay
                });
                rows.push(SynthRow {
                    timestamp,
                    known,
                    conversion_timestamp,
                });
            }
        }
        Ok(rows)
    }

    /// Records equivalent to loading the generated CSV with [`Self::dataset_spec`].
    pub fn generate_records(&self) -> Result<Vec<AttributionRecord>> {
        let spec = self.dataset_spec(PathBuf::new());
        let names: Vec<String> = spec.known_columns.iter().map(|k| k.attribute.clone()).collect();
        Ok(self
            .generate_rows()?
            .into_iter()
            .map(|row| {
                let record = AttributionRecord::new(names.iter().cloned().zip(row.known), row.timestamp);
                match row.conversion_timestamp {
                    Some(conv) => {
                        let bucket = crate::ingest::discretize_delay((conv - row.timestamp) as u64, &spec);
                        record.with_conversion(spec.unknown_attribute.clone(), bucket.to_string())
                    }
                    None => record,
                }
            })
            .collect())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record(self.column_names())?;
        for row in self.generate_rows()? {
            let mut fields = vec![row.timestamp.to_string()];
            fields.extend(row.known);
            fields.push(u8::from(row.conversion_timestamp.is_some()).to_string());
            fields.push(row.conversion_timestamp.unwrap_or(-1).to_string());
            writer.write_record(&fields)?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Writes the CSV for `spec` and returns its raw bytes.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    spec.write_csv(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::load_records;
    use crate::tree::build_tree;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            seed: 11,
            groups: 10,
            impressions_per_group: 1000,
            volume_skew: 0.0,
            conversion_rate: 0.2,
            attributes: vec![SynthAttribute { name: "device".into(), cardinality: 3, skew: 1.0 }],
            days: 30,
            mean_delay_days: 3.0,
            attribution_window_days: 30,
            delay_bucket_days: 2,
            prior_fraction: 0.5,
        }
    }

    #[test]
    fn conversion_count_within_binomial_band() {
        let rows = small().generate_rows().unwrap();
        assert_eq!(rows.len(), 10_000);
        let converted = rows.iter().filter(|r| r.conversion_timestamp.is_some()).count() as f64;
        let sd = (10_000.0f64 * 0.2 * 0.8).sqrt();
        assert!((converted - 2000.0).abs() < 4.0 * sd, "{converted}");
    }

    #[test]
    fn same_seed_same_bytes() {
        assert_eq!(generate_synthetic(&small()).unwrap(), generate_synthetic(&small()).unwrap());
        let mut other = small();
        other.seed = 12;
        assert_ne!(generate_synthetic(&small()).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn csv_round_trips_through_ingest() {
        let spec = small();
        let file = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(file.path(), generate_synthetic(&spec).unwrap()).unwrap();
        let loaded = load_records(&spec.dataset_spec(file.path())).unwrap();
        assert_eq!(loaded.malformed_rows, 0);
        assert_eq!(loaded.records, spec.generate_records().unwrap());
        let tree = build_tree(&loaded.records, &spec.dataset_spec(file.path()).schema().unwrap()).unwrap();
        assert!(tree.validate_consistency());
        assert_eq!(spec.bucket_count(), 15);
    }

    #[test]
    fn benchmark_shape() {
        let spec = SyntheticSpec::benchmark(1);
        assert_eq!(spec.bucket_count(), 5);
        assert_eq!(spec.dataset_spec("x").schema().unwrap().depth(), 5);
    }
}
