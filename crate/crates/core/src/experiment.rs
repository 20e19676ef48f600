//! End-to-end runs: data, priors, splits, noise, post-processing, error.

use std::fmt;
use std::io::Write;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::budgeting::{
    equal_split, greedy_split, leaves_only_split, noisy_prior, predict_with_objective, BudgetSplit,
    GreedyConfig, Objective, PriorTree,
};
use crate::error::{Error, Result};
use crate::ingest::{cutoff_from_fraction, load_records, temporal_split, DatasetSpec};
use crate::metrics::rmsre_tree;
use crate::noise::{noise_tree, seeded_stream, NoiseConfig, NoiseMode, L1_CAP};
use crate::postprocess::tree_post_process;
use crate::synth::SyntheticSpec;
use crate::tree::{build_tree, AttributeSchema, AttributionRecord, HierTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    EqualNoPp,
    EqualPp,
    LeavesPp,
    GreedyNoPp,
    GreedyPp,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::EqualNoPp,
        Method::EqualPp,
        Method::LeavesPp,
        Method::GreedyNoPp,
        Method::GreedyPp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::EqualNoPp => "equal_no_pp",
            Method::EqualPp => "equal_pp",
            Method::LeavesPp => "leaves_pp",
            Method::GreedyNoPp => "greedy_no_pp",
            Method::GreedyPp => "greedy_pp",
        }
    }

    pub fn post_processed(self) -> bool {
        !matches!(self, Method::EqualNoPp | Method::GreedyNoPp)
    }

    pub fn needs_prior(self) -> bool {
        matches!(self, Method::GreedyNoPp | Method::GreedyPp)
    }

    fn objective(self) -> Objective {
        if self.post_processed() {
            Objective::PostProcessed
        } else {
            Objective::Raw
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum PriorSource {
    /// Exact counts of the evaluation tree. Not private; for reference runs.
    True,
    /// Exact counts of the historical split.
    Historical,
    /// Historical counts released at `epsilon`.
    Noisy { epsilon: f64 },
}

impl Default for PriorSource {
    fn default() -> Self {
        PriorSource::Noisy { epsilon: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Dataset(DatasetSpec),
    Synthetic(SyntheticSpec),
}

fn default_trials() -> usize {
    100
}
fn default_k() -> usize {
    GreedyConfig::DEFAULT_PHASES
}
fn default_gamma() -> f64 {
    GreedyConfig::DEFAULT_GAMMA
}
fn default_l1_cap() -> u64 {
    L1_CAP
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub epsilons: Vec<f64>,
    pub taus: Vec<f64>,
    pub methods: Vec<Method>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    pub seed: u64,
    #[serde(default)]
    pub prior: PriorSource,
    /// One tree per first-level value (e.g. per partner).
    #[serde(default = "default_true")]
    pub per_group: bool,
    /// Reuse noise streams across methods so their trials are paired.
    #[serde(default)]
    pub paired: bool,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub noise_mode: NoiseMode,
    #[serde(default = "default_l1_cap")]
    pub l1_cap: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilons.is_empty() || self.taus.is_empty() || self.methods.is_empty() {
            return Err(Error::Config("epsilons, taus and methods must be non-empty".into()));
        }
        if let Some(e) = self.epsilons.iter().find(|e| !(**e > 0.0) || !e.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive and finite, got {e}")));
        }
        if let Some(t) = self.taus.iter().find(|t| !(**t > 0.0) || !t.is_finite()) {
            return Err(Error::Config(format!("tau must be positive and finite, got {t}")));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if let PriorSource::Noisy { epsilon } = self.prior {
            if !(epsilon > 0.0) || !epsilon.is_finite() {
                return Err(Error::Config(format!("prior epsilon must be positive, got {epsilon}")));
            }
        }
        GreedyConfig::new(self.k, self.gamma, self.taus[0]).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the config, output path excluded.
    pub fn hash(&self) -> String {
        let canonical = Self {
            output: None,
            ..self.clone()
        };
        let json = serde_json::to_string(&canonical).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub epsilon: f64,
    pub tau: f64,
    pub method: Method,
    pub trials: usize,
    pub mean_rmsre: f64,
    pub std_err: f64,
    /// Analytic error on the evaluation counts, averaged over units.
    pub predicted_rmsre: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnitSplit {
    pub epsilon: f64,
    pub tau: f64,
    pub method: Method,
    pub unit: String,
    pub split: BudgetSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub prior_records: usize,
    pub eval_records: usize,
    pub units: Vec<String>,
    pub splits: Vec<UnitSplit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResults {
    pub rows: Vec<ResultRow>,
    pub metadata: RunMetadata,
    /// Per-trial RMSRE for each row, in row order.
    pub trial_values: Vec<Vec<f64>>,
}

impl ExperimentResults {
    pub fn row(&self, epsilon: f64, tau: f64, method: Method) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.epsilon == epsilon && r.tau == tau && r.method == method)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let cfg = &self.metadata.config;
        let prior = match cfg.prior {
            PriorSource::True => "true".to_string(),
            PriorSource::Historical => "historical".to_string(),
            PriorSource::Noisy { epsilon } => format!("noisy:{epsilon}"),
        };
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "epsilon",
            "tau",
            "method",
            "trials",
            "mean_rmsre",
            "std_err",
            "predicted_rmsre",
            "seed",
            "prior",
            "per_group",
            "paired",
            "k",
            "gamma",
            "noise_mode",
            "config_hash",
        ])?;
        let mode = match cfg.noise_mode {
            NoiseMode::Abstract => "abstract",
            NoiseMode::ApiFaithful => "api_faithful",
        };
        for r in &self.rows {
            w.write_record([
                r.epsilon.to_string(),
                r.tau.to_string(),
                r.method.to_string(),
                r.trials.to_string(),
                r.mean_rmsre.to_string(),
                r.std_err.to_string(),
                r.predicted_rmsre.to_string(),
                cfg.seed.to_string(),
                prior.clone(),
                cfg.per_group.to_string(),
                cfg.paired.to_string(),
                cfg.k.to_string(),
                cfg.gamma.to_string(),
                mode.to_string(),
                self.metadata.config_hash.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Unit {
    name: String,
    tree: HierTree,
    prior: Option<PriorTree>,
}

const PRIOR_STREAM: u64 = 0;

fn load(config: &ExperimentConfig) -> Result<(Vec<AttributionRecord>, AttributeSchema, Option<i64>)> {
    match &config.data {
        DataSource::Dataset(spec) => {
            let loaded = load_records(spec)?;
            let cutoff = spec
                .prior_cutoff_timestamp
                .or_else(|| spec.prior_fraction.and_then(|f| cutoff_from_fraction(&loaded.records, f)));
            Ok((loaded.records, spec.schema()?, cutoff))
        }
        DataSource::Synthetic(spec) => {
            let dataset = spec.dataset_spec(PathBuf::new());
            Ok((spec.generate_records()?, dataset.schema()?, Some(spec.prior_cutoff())))
        }
    }
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn split_for(method: Method, unit: &Unit, epsilon: f64, tau: f64, config: &ExperimentConfig) -> Result<BudgetSplit> {
    let levels = unit.tree.topology().num_levels();
    match method {
        Method::EqualNoPp | Method::EqualPp => equal_split(epsilon, levels),
        Method::LeavesPp => leaves_only_split(epsilon, levels, config.gamma),
        Method::GreedyNoPp | Method::GreedyPp => {
            let prior = unit
                .prior
                .as_ref()
                .ok_or_else(|| Error::Config(format!("method {method} needs a prior")))?;
            let greedy = GreedyConfig::new(config.k, config.gamma, tau)?.objective(method.objective());
            greedy_split(prior, epsilon, &greedy)
        }
    }
}

fn build_units(
    config: &ExperimentConfig,
    eval_tree: &HierTree,
    prior_tree: Option<PriorTree>,
) -> Result<Vec<Unit>> {
    if !config.per_group {
        let prior = match config.prior {
            PriorSource::True => Some(PriorTree::from(eval_tree)),
            _ => prior_tree,
        };
        return Ok(vec![Unit {
            name: "all".into(),
            tree: eval_tree.clone(),
            prior,
        }]);
    }
    let topo = eval_tree.topology();
    if topo.num_levels() < 2 {
        return Err(Error::Config("per-group runs need at least one known attribute".into()));
    }
    let prior_groups: Option<Vec<PriorTree>> = prior_tree
        .as_ref()
        .map(|p| p.topology().children(p.topology().root()).iter().map(|&c| p.subtree(c)).collect());
    let pooled = match &prior_groups {
        Some(groups) if !groups.is_empty() => Some(PriorTree::pooled(groups)?),
        _ => None,
    };
    let mut units = Vec::new();
    for &g in topo.children(topo.root()) {
        let tree = eval_tree.subtree(g);
        let path = eval_tree.path(g);
        let prior = match config.prior {
            PriorSource::True => Some(PriorTree::from(&tree)),
            _ => match (&prior_tree, &pooled) {
                (Some(p), Some(pool)) => Some(match p.find(path) {
                    Some(node) => p.subtree(node),
                    None => pool.clone(),
                }),
                _ => None,
            },
        };
        units.push(Unit {
            name: path.join("/"),
            tree,
            prior,
        });
    }
    Ok(units)
}

/// One trial: noise every unit, optionally post-process, and average the
/// units' tree errors.
fn run_trial(
    units: &[Unit],
    splits: &[BudgetSplit],
    method: Method,
    tau: f64,
    config: &ExperimentConfig,
    stream: u64,
) -> Result<f64> {
    let mut rng = seeded_stream(config.seed, stream);
    let mut total = 0.0;
    for (unit, split) in units.iter().zip(splits) {
        let noise = NoiseConfig::new(config.noise_mode, split.clone()).with_l1_cap(config.l1_cap);
        let noisy = noise_tree(&unit.tree, &noise, &mut rng)?;
        let report = if method.post_processed() {
            rmsre_tree(&unit.tree, &[tree_post_process(&noisy)?], tau)?
        } else {
            rmsre_tree(&unit.tree, &[noisy], tau)?
        };
        total += report.tree_rmsre;
    }
    Ok(total / units.len() as f64)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResults> {
    config.validate()?;
    let (records, schema, cutoff) = load(config)?;
    let needs_prior = config.methods.iter().any(|m| m.needs_prior());
    let history_prior = !matches!(config.prior, PriorSource::True);

    let (prior_records, eval_records) = match cutoff {
        Some(c) => temporal_split(&records, c),
        None if needs_prior && history_prior => {
            return Err(Error::Config(
                "greedy methods need a prior: set a prior cutoff or use the true prior".into(),
            ))
        }
        None => (Vec::new(), records),
    };
    if eval_records.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let eval_tree = build_tree(&eval_records, &schema)?;

    let prior_tree = if needs_prior && history_prior {
        if prior_records.is_empty() {
            return Err(Error::Data("prior set is empty; greedy methods need a prior".into()));
        }
        let tree = build_tree(&prior_records, &schema)?;
        Some(match config.prior {
            PriorSource::Noisy { epsilon } => {
                noisy_prior(&tree, epsilon, &mut seeded_stream(config.seed, PRIOR_STREAM))?
            }
            _ => PriorTree::from(&tree),
        })
    } else {
        None
    };
    let units = build_units(config, &eval_tree, prior_tree)?;

    let n_tau = config.taus.len() as u64;
    let n_methods = config.methods.len() as u64;
    let trials = config.trials as u64;
    let mut rows = Vec::new();
    let mut trial_values = Vec::new();
    let mut unit_splits = Vec::new();
    for (ei, &epsilon) in config.epsilons.iter().enumerate() {
        for (ti, &tau) in config.taus.iter().enumerate() {
            for (mi, &method) in config.methods.iter().enumerate() {
                let splits = units
                    .iter()
                    .map(|u| split_for(method, u, epsilon, tau, config))
                    .collect::<Result<Vec<_>>>()?;
                let predicted = units
                    .iter()
                    .zip(&splits)
                    .map(|(u, s)| predict_with_objective(&PriorTree::from(&u.tree), s.levels(), tau, method.objective()))
                    .sum::<Result<f64>>()?
                    / units.len() as f64;
                let cell = (ei as u64 * n_tau + ti as u64) * if config.paired { 1 } else { n_methods }
                    + if config.paired { 0 } else { mi as u64 };
                let values = (0..trials)
                    .into_par_iter()
                    .map(|t| run_trial(&units, &splits, method, tau, config, 1 + cell * trials + t))
                    .collect::<Result<Vec<f64>>>()?;
                let (mean, se) = mean_and_se(&values);
                rows.push(ResultRow {
                    epsilon,
                    tau,
                    method,
                    trials: config.trials,
                    mean_rmsre: mean,
                    std_err: se,
                    predicted_rmsre: predicted,
                });
                trial_values.push(values);
                unit_splits.extend(units.iter().zip(splits).map(|(u, split)| UnitSplit {
                    epsilon,
                    tau,
                    method,
                    unit: u.name.clone(),
                    split,
                }));
            }
        }
    }

    Ok(ExperimentResults {
        rows,
        trial_values,
        metadata: RunMetadata {
            seed: config.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config.hash(),
            config: config.clone(),
            prior_records: prior_records.len(),
            eval_records: eval_records.len(),
            units: units.iter().map(|u| u.name.clone()).collect(),
            splits: unit_splits,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SynthAttribute;

    fn tiny(methods: Vec<Method>) -> ExperimentConfig {
        ExperimentConfig {
            data: DataSource::Synthetic(SyntheticSpec {
                seed: 3,
                groups: 3,
                impressions_per_group: 400,
                volume_skew: 1.0,
                conversion_rate: 0.1,
                attributes: vec![SynthAttribute {
                    name: "device".into(),
                    cardinality: 2,
                    skew: 0.5,
                }],
                days: 20,
                mean_delay_days: 2.0,
                attribution_window_days: 10,
                delay_bucket_days: 5,
                prior_fraction: 0.5,
            }),
            epsilons: vec![1.0],
            taus: vec![5.0],
            methods,
            trials: 8,
            seed: 9,
            prior: PriorSource::default(),
            per_group: true,
            paired: true,
            k: 5,
            gamma: 1e-5,
            noise_mode: NoiseMode::Abstract,
            l1_cap: L1_CAP,
            output: None,
        }
    }

    #[test]
    fn reproducible_csv() {
        let cfg = tiny(Method::ALL.to_vec());
        let mut a = Vec::new();
        let mut b = Vec::new();
        run_experiment(&cfg).unwrap().write_csv(&mut a).unwrap();
        run_experiment(&cfg).unwrap().write_csv(&mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(String::from_utf8(a).unwrap().lines().count(), 6);
    }

    #[test]
    fn paired_trials_share_noise() {
        // Same split and same streams: post-processing can only differ from raw
        // through the estimator.
        let res = run_experiment(&tiny(vec![Method::EqualNoPp, Method::EqualPp])).unwrap();
        assert_eq!(res.metadata.units.len(), 3);
        let raw = &res.trial_values[0];
        let pp = &res.trial_values[1];
        assert!(pp.iter().sum::<f64>() < raw.iter().sum::<f64>());
    }

    #[test]
    fn greedy_with_empty_prior_is_error() {
        let mut cfg = tiny(vec![Method::GreedyPp]);
        if let DataSource::Synthetic(s) = &mut cfg.data {
            s.prior_fraction = 0.0;
        }
        let err = run_experiment(&cfg).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }

    #[test]
    fn empty_eval_set_is_error() {
        let mut cfg = tiny(vec![Method::EqualPp]);
        if let DataSource::Synthetic(s) = &mut cfg.data {
            s.prior_fraction = 1.0;
        }
        assert!(matches!(run_experiment(&cfg), Err(Error::Data(_))));
    }

    #[test]
    fn toml_round_trip() {
        let text = r#"
            epsilons = [1.0, 4.0]
            taus = [10.0]
            methods = ["equal_pp", "greedy_pp"]
            seed = 7

            [prior]
            source = "noisy"
            epsilon = 1.0

            [data]
            kind = "synthetic"
            seed = 1
            groups = 2
            impressions_per_group = 100
            conversion_rate = 0.1
            days = 10
            mean_delay_days = 1.0
            attribution_window_days = 4
            delay_bucket_days = 2
            attributes = [{ name = "device", cardinality = 2 }]
        "#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.trials, 100);
        assert_eq!(cfg.k, 20);
        assert_eq!(cfg.methods, vec![Method::EqualPp, Method::GreedyPp]);
        assert!(ExperimentConfig::from_toml("seed = 1").is_err());
        assert_eq!(cfg.hash(), cfg.clone().hash());
    }
}
