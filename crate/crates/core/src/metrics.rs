//! Relative error at a threshold, per node and per tree.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::postprocess::EstimateTree;
use crate::tree::{HierTree, NoisyTree, Topology};

/// Anything carrying one estimate per node of a topology.
pub trait NodeEstimates {
    fn topology(&self) -> &Arc<Topology>;
    fn estimates(&self) -> &[f64];
}

impl NodeEstimates for EstimateTree {
    fn topology(&self) -> &Arc<Topology> {
        EstimateTree::topology(self)
    }

    fn estimates(&self) -> &[f64] {
        self.values()
    }
}

impl NodeEstimates for NoisyTree {
    fn topology(&self) -> &Arc<Topology> {
        NoisyTree::topology(self)
    }

    fn estimates(&self) -> &[f64] {
        self.values()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorReport {
    /// Mean squared relative error of each level, averaged over its nodes and
    /// over the samples.
    pub per_level: Vec<f64>,
    pub tree_rmsre: f64,
    pub tau: f64,
    pub num_trials: usize,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidParameter(format!("tau must be positive, got {tau}")));
    }
    Ok(())
}

#[inline]
fn squared_relative_error(count: f64, estimate: f64, tau: f64) -> f64 {
    ((estimate - count) / tau.max(count)).powi(2)
}

/// Monte-Carlo `RMSRE_τ(c, ĉ)` over the given draws of `ĉ`.
pub fn rmsre_point(count: f64, samples: &[f64], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if samples.is_empty() {
        return Err(Error::InvalidParameter("need at least one sample".into()));
    }
    let mean = samples
        .iter()
        .map(|&s| squared_relative_error(count, s, tau))
        .sum::<f64>()
        / samples.len() as f64;
    Ok(mean.sqrt())
}

/// Tree error: per-level means of per-node squared relative errors, averaged
/// with equal weight per level, then square-rooted.
pub fn rmsre_tree<E: NodeEstimates>(tree: &HierTree, samples: &[E], tau: f64) -> Result<ErrorReport> {
    check_tau(tau)?;
    if samples.is_empty() {
        return Err(Error::InvalidParameter("need at least one estimate sample".into()));
    }
    let topology = tree.topology();
    for (i, sample) in samples.iter().enumerate() {
        let same = Arc::ptr_eq(sample.topology(), topology) || **sample.topology() == **topology;
        if !same {
            return Err(Error::Topology(format!("sample {i} does not share the tree's topology")));
        }
    }
    let per_level: Vec<f64> = topology
        .levels()
        .iter()
        .map(|nodes| {
            let total: f64 = samples
                .iter()
                .map(|s| {
                    let est = s.estimates();
                    nodes
                        .iter()
                        .map(|&v| squared_relative_error(tree.count(v) as f64, est[v], tau))
                        .sum::<f64>()
                })
                .sum();
            total / (nodes.len() * samples.len()) as f64
        })
        .collect();
    let tree_rmsre = (per_level.iter().sum::<f64>() / per_level.len() as f64).sqrt();
    Ok(ErrorReport {
        per_level,
        tree_rmsre,
        tau,
        num_trials: samples.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_node() -> HierTree {
        let topo = Arc::new(Topology::from_parents(&[None, Some(0), Some(0)]).unwrap());
        HierTree::from_topology(topo, vec![100, 50, 50]).unwrap()
    }

    fn raw(tree: &HierTree, values: Vec<f64>) -> NoisyTree {
        let n = values.len();
        NoisyTree::new(tree.topology().clone(), values, vec![1.0; n]).unwrap()
    }

    #[test]
    fn point_examples() {
        assert!((rmsre_point(0.0, &[2.0], 5.0).unwrap() - 0.4).abs() < 1e-15);
        for tau in [5.0, 10.0] {
            assert!((rmsre_point(20.0, &[22.0], tau).unwrap() - 0.1).abs() < 1e-15);
        }
        assert!((rmsre_point(20.0, &[18.0, 22.0], 5.0).unwrap() - 0.1).abs() < 1e-15);
        assert!(rmsre_point(1.0, &[], 5.0).is_err());
        assert!(rmsre_point(1.0, &[1.0], 0.0).is_err());
    }

    #[test]
    fn single_node_tree_reduces_to_point() {
        let topo = Arc::new(Topology::from_parents(&[None]).unwrap());
        let tree = HierTree::from_topology(topo, vec![3]).unwrap();
        let samples = vec![raw(&tree, vec![5.0]), raw(&tree, vec![0.0])];
        let report = rmsre_tree(&tree, &samples, 5.0).unwrap();
        assert!((report.tree_rmsre - rmsre_point(3.0, &[5.0, 0.0], 5.0).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn exact_estimates_have_zero_error() {
        let tree = three_node();
        let report = rmsre_tree(&tree, &[raw(&tree, vec![100.0, 50.0, 50.0])], 5.0).unwrap();
        assert_eq!(report.tree_rmsre, 0.0);
    }

    #[test]
    fn level_average_example() {
        // Relative errors: root 0.1, leaves 0.2 and 0.2.
        let tree = three_node();
        let report = rmsre_tree(&tree, &[raw(&tree, vec![110.0, 60.0, 40.0])], 5.0).unwrap();
        assert!((report.tree_rmsre - (0.05f64 / 2.0).sqrt()).abs() < 1e-12);
        assert!((report.tree_rmsre - 0.1581).abs() < 1e-4);
        let mean: f64 = report.per_level.iter().sum::<f64>() / 2.0;
        assert!((report.tree_rmsre.powi(2) - mean).abs() < 1e-12);
    }

    #[test]
    fn scaling_errors_scales_rmsre() {
        let tree = three_node();
        let a = rmsre_tree(&tree, &[raw(&tree, vec![103.0, 49.0, 52.0])], 5.0).unwrap();
        let b = rmsre_tree(&tree, &[raw(&tree, vec![109.0, 47.0, 56.0])], 5.0).unwrap();
        assert!((b.tree_rmsre - 3.0 * a.tree_rmsre).abs() < 1e-12);
    }

    #[test]
    fn topology_mismatch_is_error() {
        let tree = three_node();
        let other = Arc::new(Topology::from_parents(&[None, Some(0), Some(1)]).unwrap());
        let sample = NoisyTree::new(other, vec![1.0; 3], vec![1.0; 3]).unwrap();
        assert!(rmsre_tree(&tree, &[sample], 5.0).is_err());
    }
}
