//! Discrete Laplace noise and the two ways of noising a tree.
//!
//! `Abstract` mode adds `DLap(ε_i)` to every node at level `i`: one row moves
//! at most one node per level by one, so level `i` is `ε_i`-DP and the whole
//! release is `Σ ε_i`-DP by basic composition. `ApiFaithful` mode reproduces
//! the aggregation service instead: every level's increment is scaled up to a
//! share `v_i` of the L1 contribution cap, one `DLap(ε / L1)` draw is added to
//! each key, and the result is scaled back down.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::budgeting::BudgetSplit;
use crate::error::{Error, Result};
use crate::tree::{HierTree, NoisyTree};

/// The aggregation service's L1 contribution cap, 2^16.
pub const L1_CAP: u64 = 1 << 16;

/// `DLap(a)`: pmf at integer `k` is `((e^a - 1) / (e^a + 1)) e^{-a|k|}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscreteLaplace {
    a: f64,
}

impl DiscreteLaplace {
    pub fn new(a: f64) -> Result<Self> {
        if !(a > 0.0) || a.is_nan() {
            return Err(Error::InvalidParameter(format!(
                "discrete Laplace parameter must be positive, got {a}"
            )));
        }
        Ok(Self { a })
    }

    pub fn parameter(&self) -> f64 {
        self.a
    }

    pub fn pmf(&self, k: i64) -> f64 {
        // (e^a - 1) / (e^a + 1) = tanh(a / 2)
        (self.a / 2.0).tanh() * (-self.a * k.unsigned_abs() as f64).exp()
    }

    /// `2 e^a / (e^a - 1)^2`, floored at the smallest positive normal `f64`
    /// so the result stays a usable variance when it underflows.
    pub fn variance(&self) -> f64 {
        let denom = (-self.a).exp_m1();
        (2.0 * (-self.a).exp() / (denom * denom)).max(f64::MIN_POSITIVE)
    }

    /// Difference of two i.i.d. geometric variables with failure probability
    /// `e^{-a}`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> i64 {
        self.geometric(rng) - self.geometric(rng)
    }

    /// Number of failures before the first success, by inversion:
    /// `P[G >= k] = P[U <= e^{-ak}] = e^{-ak}` for `U` uniform on `(0, 1]`.
    fn geometric<R: Rng + ?Sized>(&self, rng: &mut R) -> i64 {
        let u = 1.0 - rng.random::<f64>();
        (u.ln() / -self.a).floor() as i64
    }
}

pub fn dlap_sample<R: Rng + ?Sized>(a: f64, rng: &mut R) -> Result<i64> {
    Ok(DiscreteLaplace::new(a)?.sample(rng))
}

pub fn dlap_variance(a: f64) -> Result<f64> {
    Ok(DiscreteLaplace::new(a)?.variance())
}

/// Independent generator for `(seed, stream)`; distinct streams never overlap.
pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    #[default]
    Abstract,
    ApiFaithful,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseConfig {
    pub mode: NoiseMode,
    pub total_epsilon: f64,
    pub budget_split: BudgetSplit,
    pub l1_cap: u64,
}

impl NoiseConfig {
    pub fn new(mode: NoiseMode, budget_split: BudgetSplit) -> Self {
        Self {
            mode,
            total_epsilon: budget_split.total(),
            budget_split,
            l1_cap: L1_CAP,
        }
    }

    pub fn with_l1_cap(mut self, l1_cap: u64) -> Self {
        self.l1_cap = l1_cap;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.total_epsilon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "total epsilon must be positive, got {}",
                self.total_epsilon
            )));
        }
        let sum = self.budget_split.total();
        if (sum - self.total_epsilon).abs() > 1e-12 * self.total_epsilon {
            return Err(Error::InvalidParameter(format!(
                "budget split sums to {sum}, expected {}",
                self.total_epsilon
            )));
        }
        if self.l1_cap == 0 {
            return Err(Error::InvalidParameter("L1 cap must be positive".into()));
        }
        Ok(())
    }
}

fn check_levels(tree: &HierTree, split: &BudgetSplit) -> Result<()> {
    let levels = tree.topology().num_levels();
    if split.levels().len() != levels {
        return Err(Error::InvalidParameter(format!(
            "budget split has {} levels, tree has {levels}",
            split.levels().len()
        )));
    }
    Ok(())
}

/// Adds `DLap(ε_i)` to every count at level `i`.
pub fn noise_tree_abstract<R: Rng + ?Sized>(
    tree: &HierTree,
    split: &BudgetSplit,
    rng: &mut R,
) -> Result<NoisyTree> {
    check_levels(tree, split)?;
    let dists = split
        .levels()
        .iter()
        .map(|&eps| DiscreteLaplace::new(eps))
        .collect::<Result<Vec<_>>>()?;
    let topology = tree.topology();
    let mut values = Vec::with_capacity(tree.len());
    let mut variances = Vec::with_capacity(tree.len());
    for v in 0..tree.len() {
        let dist = &dists[topology.level(v)];
        values.push((tree.count(v) + dist.sample(rng)) as f64);
        variances.push(dist.variance());
    }
    NoisyTree::new(topology.clone(), values, variances)
}

/// Per-level contribution weights `v_i = floor(L1 ε_i / ε)`.
pub fn contribution_weights(config: &NoiseConfig) -> Result<Vec<u64>> {
    config.validate()?;
    let l1 = config.l1_cap as f64;
    config
        .budget_split
        .levels()
        .iter()
        .enumerate()
        .map(|(i, &eps)| {
            let weight = (l1 * eps / config.total_epsilon).floor() as u64;
            if weight == 0 {
                Err(Error::InvalidParameter(format!(
                    "level {i}: budget {eps} is below one contribution unit \
                     (needs at least ε / L1 = {}); raise the level's budget or use abstract mode",
                    config.total_epsilon / l1
                )))
            } else {
                Ok(weight)
            }
        })
        .collect()
}

/// Simulates summary reports: level-`i` keys receive `v_i` per conversion,
/// `DLap(ε / L1)` noise is added per key, and the output is rescaled by `v_i`.
pub fn noise_tree_api_faithful<R: Rng + ?Sized>(
    tree: &HierTree,
    config: &NoiseConfig,
    rng: &mut R,
) -> Result<NoisyTree> {
    check_levels(tree, &config.budget_split)?;
    let weights = contribution_weights(config)?;
    let dist = DiscreteLaplace::new(config.total_epsilon / config.l1_cap as f64)?;
    let base_variance = dist.variance();
    let topology = tree.topology();
    let mut values = Vec::with_capacity(tree.len());
    let mut variances = Vec::with_capacity(tree.len());
    for v in 0..tree.len() {
        let weight = weights[topology.level(v)];
        let raw = weight as i64 * tree.count(v) + dist.sample(rng);
        values.push(raw as f64 / weight as f64);
        variances.push(base_variance / (weight as f64).powi(2));
    }
    NoisyTree::new(topology.clone(), values, variances)
}

pub fn noise_tree<R: Rng + ?Sized>(tree: &HierTree, config: &NoiseConfig, rng: &mut R) -> Result<NoisyTree> {
    match config.mode {
        NoiseMode::Abstract => {
            config.validate()?;
            noise_tree_abstract(tree, &config.budget_split, rng)
        }
        NoiseMode::ApiFaithful => noise_tree_api_faithful(tree, config, rng),
    }
}
