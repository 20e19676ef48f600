//! Privacy-budget allocation across tree levels.
//!
//! Every split here sums to the total ε, so by basic composition the full
//! release is ε-DP. The greedy allocator spends the budget in `k` equal units,
//! each time on the level that most reduces the predicted tree error.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{dlap_variance, noise_tree_abstract};
use crate::postprocess::tree_post_process;
use crate::tree::{extract_subtree, topology_from_paths, HierTree, NoisyTree, Topology};

/// Relative tolerance on `Σ ε_i = total`.
pub const SPLIT_SUM_TOLERANCE: f64 = 1e-12;

/// Per-level ε allocation, serialized as `{"total": ε, "levels": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSplit", into = "RawSplit")]
pub struct BudgetSplit {
    total: f64,
    levels: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawSplit {
    total: f64,
    levels: Vec<f64>,
}

impl TryFrom<RawSplit> for BudgetSplit {
    type Error = Error;

    fn try_from(raw: RawSplit) -> Result<Self> {
        Self::new(raw.total, raw.levels)
    }
}

impl From<BudgetSplit> for RawSplit {
    fn from(split: BudgetSplit) -> Self {
        Self {
            total: split.total,
            levels: split.levels,
        }
    }
}

impl BudgetSplit {
    pub fn new(total: f64, levels: Vec<f64>) -> Result<Self> {
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::InvalidParameter(format!("total epsilon must be positive, got {total}")));
        }
        if levels.is_empty() {
            return Err(Error::InvalidParameter("budget split needs at least one level".into()));
        }
        if let Some(i) = levels.iter().position(|&e| !(e > 0.0) || !e.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "level {i}: epsilon must be positive, got {}",
                levels[i]
            )));
        }
        let sum: f64 = levels.iter().sum();
        if (sum - total).abs() > SPLIT_SUM_TOLERANCE * total {
            return Err(Error::InvalidParameter(format!(
                "level budgets sum to {sum}, expected {total}"
            )));
        }
        Ok(Self { total, levels })
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

fn check_total(epsilon: f64, levels: usize) -> Result<()> {
    if levels == 0 {
        return Err(Error::InvalidParameter("need at least one level".into()));
    }
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(())
}

pub fn equal_split(epsilon: f64, levels: usize) -> Result<BudgetSplit> {
    check_total(epsilon, levels)?;
    BudgetSplit::new(epsilon, vec![epsilon / levels as f64; levels])
}

/// Everything on the leaf level except a `γ ε` floor spread over the others.
pub fn leaves_only_split(epsilon: f64, levels: usize, gamma: f64) -> Result<BudgetSplit> {
    check_total(epsilon, levels)?;
    check_gamma(gamma)?;
    if levels == 1 {
        return BudgetSplit::new(epsilon, vec![epsilon]);
    }
    let inner = levels - 1;
    let mut eps = vec![gamma * epsilon / inner as f64; inner];
    eps.push((1.0 - gamma) * epsilon);
    BudgetSplit::new(epsilon, eps)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma < 0.01) {
        return Err(Error::InvalidParameter(format!("gamma must lie in (0, 0.01), got {gamma}")));
    }
    Ok(())
}

/// Which estimates the predicted error refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Error of the post-processed estimates.
    #[default]
    PostProcessed,
    /// Error of the raw noisy measurements.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GreedyConfig {
    pub k: usize,
    pub gamma: f64,
    pub tau: f64,
    pub objective: Objective,
}

impl GreedyConfig {
    pub const DEFAULT_PHASES: usize = 20;
    pub const DEFAULT_GAMMA: f64 = 1e-5;

    pub fn new(k: usize, gamma: f64, tau: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidParameter("number of phases k must be at least 1".into()));
        }
        check_gamma(gamma)?;
        check_tau(tau)?;
        Ok(Self {
            k,
            gamma,
            tau,
            objective: Objective::PostProcessed,
        })
    }

    pub fn with_tau(tau: f64) -> Result<Self> {
        Self::new(Self::DEFAULT_PHASES, Self::DEFAULT_GAMMA, tau)
    }

    pub fn objective(mut self, objective: Objective) -> Self {
        self.objective = objective;
        self
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidParameter(format!("tau must be positive, got {tau}")));
    }
    Ok(())
}

/// Tree with real-valued counts used to drive budget optimization: true,
/// historical, or privately estimated.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorTree {
    topology: Arc<Topology>,
    paths: Vec<Vec<String>>,
    counts: Vec<f64>,
}

impl From<&HierTree> for PriorTree {
    fn from(tree: &HierTree) -> Self {
        Self {
            topology: tree.topology().clone(),
            paths: tree.paths().to_vec(),
            counts: tree.counts().iter().map(|&c| c as f64).collect(),
        }
    }
}

impl PriorTree {
    pub fn new(topology: Arc<Topology>, paths: Vec<Vec<String>>, counts: Vec<f64>) -> Result<Self> {
        let n = topology.len();
        if paths.len() != n || counts.len() != n {
            return Err(Error::Topology(format!(
                "expected {n} paths and counts, got {} and {}",
                paths.len(),
                counts.len()
            )));
        }
        if counts.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParameter("prior counts must be finite".into()));
        }
        Ok(Self {
            topology,
            paths,
            counts,
        })
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topology
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn paths(&self) -> &[Vec<String>] {
        &self.paths
    }

    pub fn num_levels(&self) -> usize {
        self.topology.num_levels()
    }

    pub fn find(&self, path: &[String]) -> Option<usize> {
        self.topology
            .levels()
            .get(path.len())?
            .iter()
            .copied()
            .find(|&v| self.paths[v] == path)
    }

    /// The subtree rooted at `node`, with paths relative to `node`.
    pub fn subtree(&self, node: usize) -> PriorTree {
        let (topology, members) = extract_subtree(&self.topology, node);
        let strip = self.topology.level(node);
        PriorTree {
            topology: Arc::new(topology),
            paths: members.iter().map(|&v| self.paths[v][strip..].to_vec()).collect(),
            counts: members.iter().map(|&v| self.counts[v]).collect(),
        }
    }

    /// Union of several trees, aligned by path, with counts summed.
    pub fn pooled(trees: &[PriorTree]) -> Result<PriorTree> {
        if trees.is_empty() {
            return Err(Error::Data("cannot pool an empty set of prior trees".into()));
        }
        let mut sums: BTreeMap<(usize, &[String]), f64> = BTreeMap::new();
        for tree in trees {
            for (path, &count) in tree.paths.iter().zip(&tree.counts) {
                *sums.entry((path.len(), path.as_slice())).or_insert(0.0) += count;
            }
        }
        let paths: Vec<Vec<String>> = sums.keys().map(|(_, p)| p.to_vec()).collect();
        let counts = sums.values().copied().collect();
        let topology = topology_from_paths(&paths)?;
        PriorTree::new(Arc::new(topology), paths, counts)
    }
}

/// Analytic tree error `RMSRE_τ(T)` under `split`, from the post-processed
/// (or raw) variances alone; no noise is drawn.
pub fn predict_tree_rmsre(tree: &PriorTree, split: &BudgetSplit, tau: f64) -> Result<f64> {
    predict_with_objective(tree, split.levels(), tau, Objective::PostProcessed)
}

pub fn predict_with_objective(
    tree: &PriorTree,
    level_epsilons: &[f64],
    tau: f64,
    objective: Objective,
) -> Result<f64> {
    check_tau(tau)?;
    let topology = tree.topology();
    if level_epsilons.len() != topology.num_levels() {
        return Err(Error::InvalidParameter(format!(
            "budget split has {} levels, tree has {}",
            level_epsilons.len(),
            topology.num_levels()
        )));
    }
    let level_var = level_epsilons
        .iter()
        .map(|&eps| dlap_variance(eps))
        .collect::<Result<Vec<_>>>()?;
    let variances: Vec<f64> = (0..topology.len()).map(|v| level_var[topology.level(v)]).collect();
    let variances = match objective {
        Objective::Raw => variances,
        Objective::PostProcessed => {
            let noisy = NoisyTree::new(topology.clone(), tree.counts().to_vec(), variances)?;
            tree_post_process(&noisy)?.variances().to_vec()
        }
    };
    let levels = topology.levels();
    let sum: f64 = levels
        .iter()
        .map(|nodes| {
            nodes
                .iter()
                .map(|&v| variances[v] / tau.max(tree.counts()[v]).powi(2))
                .sum::<f64>()
                / nodes.len() as f64
        })
        .sum();
    Ok((sum / levels.len() as f64).sqrt())
}

/// Greedy per-level allocation against the predicted tree error of `prior`.
///
/// Every level starts at a `γ ε / (d + 1)` floor; the remaining `(1 - γ) ε`
/// is spent in `k` units. Ties go to the lowest level.
pub fn greedy_split(prior: &PriorTree, epsilon: f64, config: &GreedyConfig) -> Result<BudgetSplit> {
    let levels = prior.num_levels();
    check_total(epsilon, levels)?;
    if config.k == 0 {
        return Err(Error::InvalidParameter("number of phases k must be at least 1".into()));
    }
    check_gamma(config.gamma)?;
    if levels == 1 {
        return BudgetSplit::new(epsilon, vec![epsilon]);
    }
    let mut eps = vec![config.gamma * epsilon / levels as f64; levels];
    let unit = (1.0 - config.gamma) * epsilon / config.k as f64;
    let mut trial = eps.clone();
    for _ in 0..config.k {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..levels {
            trial.copy_from_slice(&eps);
            trial[i] += unit;
            let err = predict_with_objective(prior, &trial, config.tau, config.objective)?;
            if best.is_none_or(|(_, e)| err < e) {
                best = Some((i, err));
            }
        }
        let (i, _) = best.expect("at least one level");
        eps[i] += unit;
    }
    BudgetSplit::new(epsilon, eps)
}

/// Privately estimated prior: equal split at `epsilon_prior`, post-processed.
/// Estimates are kept real-valued, unclamped.
pub fn noisy_prior<R: Rng + ?Sized>(tree: &HierTree, epsilon_prior: f64, rng: &mut R) -> Result<PriorTree> {
    let split = equal_split(epsilon_prior, tree.topology().num_levels())?;
    let noisy = noise_tree_abstract(tree, &split, rng)?;
    let estimate = tree_post_process(&noisy)?;
    PriorTree::new(tree.topology().clone(), tree.paths().to_vec(), estimate.values().to_vec())
}
