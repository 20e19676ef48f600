#![allow(dead_code)]

use std::sync::Arc;

use hierdp::{HierTree, NoisyTree, Topology};
use rand::Rng;

/// Random irregular topology: nodes expand breadth-first with fanout 1..=5 or
/// stop as leaves, until `max_nodes` is reached.
pub fn random_topology<R: Rng>(rng: &mut R, max_nodes: usize) -> Topology {
    let mut parents: Vec<Option<usize>> = vec![None];
    let mut next = 0;
    while next < parents.len() && parents.len() < max_nodes {
        let is_leaf = next > 0 && rng.random_bool(0.35);
        if !is_leaf {
            let fanout = rng.random_range(1..=5).min(max_nodes - parents.len());
            parents.extend(std::iter::repeat_n(Some(next), fanout));
        }
        next += 1;
    }
    Topology::from_parents(&parents).unwrap()
}

pub fn random_noisy_tree<R: Rng>(rng: &mut R, max_nodes: usize) -> NoisyTree {
    let topo = Arc::new(random_topology(rng, max_nodes));
    let n = topo.len();
    let values = (0..n).map(|_| rng.random_range(-50.0..150.0)).collect();
    let variances = (0..n).map(|_| rng.random_range(0.1..10.0)).collect();
    NoisyTree::new(topo, values, variances).unwrap()
}

pub fn chain(len: usize) -> Topology {
    let parents: Vec<Option<usize>> = (0..len).map(|i| i.checked_sub(1)).collect();
    Topology::from_parents(&parents).unwrap()
}

pub fn star(leaves: usize) -> Topology {
    let mut parents = vec![None];
    parents.extend(std::iter::repeat_n(Some(0), leaves));
    Topology::from_parents(&parents).unwrap()
}

/// Largest consistency violation `|x̂_v - Σ x̂_child| / max(1, |x̂_v|)`.
pub fn consistency_gap(topo: &Topology, est: &[f64]) -> f64 {
    (0..topo.len())
        .filter(|&v| !topo.is_leaf(v))
        .map(|v| {
            let sum: f64 = topo.children(v).iter().map(|&c| est[c]).sum();
            (est[v] - sum).abs() / est[v].abs().max(1.0)
        })
        .fold(0.0, f64::max)
}

/// Largest relative change of `Σ_{u ∈ anc(leaf)} x_u / var_u` over leaves.
pub fn weighted_path_gap(noisy: &NoisyTree, est: &[f64]) -> f64 {
    let topo = noisy.topology();
    topo.leaves()
        .map(|leaf| {
            let anc = topo.ancestors(leaf);
            let before: f64 = anc.iter().map(|&u| noisy.values()[u] / noisy.variances()[u]).sum();
            let after: f64 = anc.iter().map(|&u| est[u] / noisy.variances()[u]).sum();
            let scale: f64 = anc
                .iter()
                .map(|&u| noisy.values()[u].abs() / noisy.variances()[u])
                .sum::<f64>()
                .max(1.0);
            (before - after).abs() / scale
        })
        .fold(0.0, f64::max)
}

/// Root, three children, four leaves under each.
pub fn depth_two_instance() -> HierTree {
    let mut parents = vec![None, Some(0), Some(0), Some(0)];
    for p in 1..=3 {
        parents.extend(std::iter::repeat_n(Some(p), 4));
    }
    let leaves = [70, 30, 15, 5, 30, 20, 8, 2, 10, 6, 3, 1];
    let mid: Vec<i64> = leaves.chunks(4).map(|c| c.iter().sum()).collect();
    let mut counts = vec![mid.iter().sum::<i64>()];
    counts.extend(&mid);
    counts.extend(leaves);
    HierTree::from_topology(Arc::new(Topology::from_parents(&parents).unwrap()), counts).unwrap()
}

/// Every way of spreading `k` units over `levels` levels on top of the floor.
pub fn all_allocations(levels: usize, k: usize) -> Vec<Vec<usize>> {
    if levels == 1 {
        return vec![vec![k]];
    }
    (0..=k)
        .flat_map(|first| {
            all_allocations(levels - 1, k - first).into_iter().map(move |mut rest| {
                rest.insert(0, first);
                rest
            })
        })
        .collect()
}

