//! Consistent, minimum-variance post-processing of noisy tree counts.
//!
//! [`tree_post_process`] runs in two linear passes over an arbitrary tree.
//! The bottom-up pass computes, for every node, the best estimate from its
//! own subtree; the top-down pass computes the best estimate from everything
//! outside the subtree and merges the two. The result is consistent (every
//! internal estimate equals the sum of its children) and coincides with the
//! weighted least-squares fit computed densely by [`ols_oracle`].

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::tree::{NoisyTree, Topology};

/// An unbiased estimate together with its variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub variance: f64,
}

impl Estimate {
    /// Placeholder carrying no information (infinite variance), used where a
    /// quantity is undefined: below a leaf, above the root.
    pub const NONE: Estimate = Estimate {
        value: 0.0,
        variance: f64::INFINITY,
    };

    pub fn new(value: f64, variance: f64) -> Self {
        Self { value, variance }
    }

    /// Inverse-variance weighted combination of two independent estimates of
    /// the same quantity. Both variances must be positive.
    fn combine(self, other: Estimate) -> Estimate {
        let total = self.variance + other.variance;
        let weight = self.variance / total;
        Estimate {
            value: self.value + weight * (other.value - self.value),
            variance: self.variance * (other.variance / total),
        }
    }
}

/// Minimum-variance convex combination of independent unbiased estimates
/// `(x, var_x)` and `(y, var_y)`.
pub fn combine_estimates(x: f64, var_x: f64, y: f64, var_y: f64) -> Result<(f64, f64)> {
    for var in [var_x, var_y] {
        if !(var > 0.0) || !var.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "variances must be positive and finite, got {var}"
            )));
        }
    }
    let z = Estimate::new(x, var_x).combine(Estimate::new(y, var_y));
    Ok((z.value, z.variance))
}

/// Per-node partial estimates retained from the two passes.
#[derive(Debug, Clone, PartialEq)]
pub struct Intermediates {
    /// Sum of the children's subtree estimates; [`Estimate::NONE`] at leaves.
    pub children_sum: Vec<Estimate>,
    /// Best estimate from the node's subtree, the node included.
    pub subtree: Vec<Estimate>,
    /// Best estimate from measurements outside the node's subtree;
    /// [`Estimate::NONE`] at the root.
    pub outside: Vec<Estimate>,
    /// `outside` combined with the node's own measurement.
    pub outside_with_self: Vec<Estimate>,
}

/// Post-processed estimates `x̂_v` and variances `var̂_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateTree {
    topology: Arc<Topology>,
    values: Vec<f64>,
    variances: Vec<f64>,
    intermediates: Option<Intermediates>,
}

impl EstimateTree {
    pub fn topology(&self) -> &Arc<Topology> {
        &self.topology
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Present for [`tree_post_process`] output, absent for [`ols_oracle`].
    pub fn intermediates(&self) -> Option<&Intermediates> {
        self.intermediates.as_ref()
    }
}

/// Two-pass consistent post-processing over an arbitrary tree.
pub fn tree_post_process(noisy: &NoisyTree) -> Result<EstimateTree> {
    let topology = noisy.topology();
    let n = topology.len();
    let measured: Vec<Estimate> = noisy
        .values()
        .iter()
        .zip(noisy.variances())
        .map(|(&x, &var)| Estimate::new(x, var))
        .collect();

    let mut children_sum = vec![Estimate::NONE; n];
    let mut subtree = vec![Estimate::NONE; n];
    for level in topology.levels().iter().rev() {
        for &v in level {
            let children = topology.children(v);
            if children.is_empty() {
                subtree[v] = measured[v];
                continue;
            }
            let below = children.iter().fold(Estimate::new(0.0, 0.0), |acc, &u| {
                Estimate::new(acc.value + subtree[u].value, acc.variance + subtree[u].variance)
            });
            children_sum[v] = below;
            subtree[v] = measured[v].combine(below);
        }
    }

    let root = topology.root();
    let mut estimate = vec![Estimate::NONE; n];
    let mut outside = vec![Estimate::NONE; n];
    let mut outside_with_self = vec![Estimate::NONE; n];
    estimate[root] = subtree[root];
    outside_with_self[root] = measured[root];
    for level in topology.levels().iter().skip(1) {
        for &v in level {
            let p = topology
                .parent(v)
                .ok_or_else(|| Error::Topology(format!("non-root node {v} has no parent")))?;
            // Siblings' total via the parent's children sum, avoiding a
            // per-child re-summation over high-fanout parents.
            let siblings = Estimate::new(
                children_sum[p].value - subtree[v].value,
                (children_sum[p].variance - subtree[v].variance).max(0.0),
            );
            let from_outside = Estimate::new(
                outside_with_self[p].value - siblings.value,
                outside_with_self[p].variance + siblings.variance,
            );
            outside[v] = from_outside;
            estimate[v] = subtree[v].combine(from_outside);
            outside_with_self[v] = measured[v].combine(from_outside);
        }
    }

    let values: Vec<f64> = estimate.iter().map(|e| e.value).collect();
    let variances: Vec<f64> = estimate.iter().map(|e| e.variance).collect();
    if let Some(v) = (0..n).find(|&v| !values[v].is_finite() || !(variances[v] > 0.0) || !variances[v].is_finite()) {
        return Err(Error::Numerical(format!(
            "node {v}: post-processed estimate {} with variance {}",
            values[v], variances[v]
        )));
    }
    Ok(EstimateTree {
        topology: topology.clone(),
        values,
        variances,
        intermediates: Some(Intermediates {
            children_sum,
            subtree,
            outside,
            outside_with_self,
        }),
    })
}

/// Largest tree accepted by the dense oracle.
pub const OLS_MAX_NODES: usize = 4000;

/// Weighted least squares over leaf counts, solved densely.
///
/// With `A[u, l] = 1` iff leaf `l` is `u` or lies below `u`, minimizes
/// `Σ_u (x_u - (Aθ)_u)² / var_u` over leaf vectors `θ`, returning `x̂ = Aθ̂`
/// and `var̂_u = a_uᵀ (AᵀWA)⁻¹ a_u`.
pub fn ols_oracle(noisy: &NoisyTree) -> Result<EstimateTree> {
    let topology = noisy.topology();
    let n = topology.len();
    if n > OLS_MAX_NODES {
        return Err(Error::InvalidParameter(format!(
            "dense oracle supports at most {OLS_MAX_NODES} nodes, got {n}"
        )));
    }
    let leaves: Vec<usize> = topology.leaves().collect();
    let mut design = DMatrix::<f64>::zeros(n, leaves.len());
    for (col, &leaf) in leaves.iter().enumerate() {
        for u in topology.ancestors(leaf) {
            design[(u, col)] = 1.0;
        }
    }
    let weights = DVector::from_iterator(n, noisy.variances().iter().map(|&var| 1.0 / var));
    let x = DVector::from_column_slice(noisy.values());

    let weighted = DMatrix::from_fn(n, leaves.len(), |r, c| design[(r, c)] * weights[r]);
    let normal = design.transpose() * &weighted;
    let rhs = weighted.transpose() * &x;
    let chol = normal
        .cholesky()
        .ok_or_else(|| Error::Numerical("normal matrix is not positive definite".into()))?;
    let theta = chol.solve(&rhs);
    let covariance = chol.inverse();

    let fitted = &design * theta;
    let projected = &design * covariance;
    let variances = (0..n)
        .map(|u| projected.row(u).dot(&design.row(u)))
        .collect();
    Ok(EstimateTree {
        topology: topology.clone(),
        values: fitted.iter().copied().collect(),
        variances,
        intermediates: None,
    })
}
