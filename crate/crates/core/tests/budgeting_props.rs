mod common;

use std::sync::Arc;

use hierdp::budgeting::{equal_split, predict_with_objective};
use hierdp::{
    greedy_split, noise_tree, noisy_prior, predict_tree_rmsre, rmsre_tree, seeded_stream, tree_post_process,
    BudgetSplit, GreedyConfig, HierTree, NoiseConfig, NoiseMode, Objective, PriorTree,
};
use proptest::prelude::*;
use rand::Rng;

use common::{all_allocations, depth_two_instance, random_topology};

fn random_tree<R: Rng>(rng: &mut R) -> PriorTree {
    // Balanced depth so levels are meaningful: pad shallow leaves with chains.
    let topo = random_topology(rng, 40);
    let counts: Vec<i64> = {
        let mut c = vec![0i64; topo.len()];
        for v in (0..topo.len()).rev() {
            c[v] = if topo.is_leaf(v) {
                rng.random_range(0..60)
            } else {
                topo.children(v).iter().map(|&u| c[u]).sum()
            };
        }
        c
    };
    PriorTree::from(&HierTree::from_topology(Arc::new(topo), counts).unwrap())
}

#[test]
fn greedy_is_best_of_fifteen_allocations() {
    let prior = PriorTree::from(&depth_two_instance());
    let (eps, tau, gamma, k) = (2.0, 10.0, 1e-5, 4);
    let allocations = all_allocations(3, k);
    assert_eq!(allocations.len(), 15);
    let floor = gamma * eps / 3.0;
    let unit = (1.0 - gamma) * eps / k as f64;
    let errors: Vec<f64> = allocations
        .iter()
        .map(|a| {
            let levels: Vec<f64> = a.iter().map(|&n| floor + n as f64 * unit).collect();
            predict_tree_rmsre(&prior, &BudgetSplit::new(eps, levels).unwrap(), tau).unwrap()
        })
        .collect();
    let greedy = greedy_split(&prior, eps, &GreedyConfig::new(k, gamma, tau).unwrap()).unwrap();
    let err = predict_tree_rmsre(&prior, &greedy, tau).unwrap();
    assert!(errors.iter().any(|e| (e - err).abs() <= 1e-12 * e), "greedy is one of the allocations");
    let best = errors.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(err <= best * (1.0 + 1e-12), "greedy {err} vs best {best}");
    assert!(err <= predict_tree_rmsre(&prior, &equal_split(eps, 3).unwrap(), tau).unwrap());
}

#[test]
fn gamma_floor_is_negligible() {
    let prior = PriorTree::from(&depth_two_instance());
    for eps in [0.5, 2.0, 8.0] {
        let a = greedy_split(&prior, eps, &GreedyConfig::new(20, 1e-5, 10.0).unwrap()).unwrap();
        let b = greedy_split(&prior, eps, &GreedyConfig::new(20, 1e-7, 10.0).unwrap()).unwrap();
        let ea = predict_tree_rmsre(&prior, &a, 10.0).unwrap();
        let eb = predict_tree_rmsre(&prior, &b, 10.0).unwrap();
        assert!((ea - eb).abs() / eb < 1e-3, "eps {eps}: {ea} vs {eb}");
    }
}

#[test]
fn predicted_error_matches_monte_carlo() {
    let tree = depth_two_instance();
    let prior = PriorTree::from(&tree);
    let split = BudgetSplit::new(3.0, vec![0.5, 1.0, 1.5]).unwrap();
    let tau = 10.0;
    let config = NoiseConfig::new(NoiseMode::Abstract, split.clone());
    let mut rng = seeded_stream(77, 0);
    let samples: Vec<_> = (0..10_000)
        .map(|_| tree_post_process(&noise_tree(&tree, &config, &mut rng).unwrap()).unwrap())
        .collect();
    let empirical = rmsre_tree(&tree, &samples, tau).unwrap().tree_rmsre;
    let predicted = predict_tree_rmsre(&prior, &split, tau).unwrap();
    assert!((empirical / predicted - 1.0).abs() < 0.03, "{empirical} vs {predicted}");
}

#[test]
fn noisy_prior_gap_shrinks_with_prior_budget() {
    let tree = depth_two_instance();
    let truth = PriorTree::from(&tree);
    let config = GreedyConfig::new(20, 1e-5, 10.0).unwrap();
    let best = predict_tree_rmsre(&truth, &greedy_split(&truth, 2.0, &config).unwrap(), 10.0).unwrap();
    let gap = |eps_prior: f64| {
        let reps = 40;
        (0..reps)
            .map(|r| {
                let prior = noisy_prior(&tree, eps_prior, &mut seeded_stream(r, 0)).unwrap();
                let split = greedy_split(&prior, 2.0, &config).unwrap();
                predict_tree_rmsre(&truth, &split, 10.0).unwrap() - best
            })
            .sum::<f64>()
            / reps as f64
    };
    let (low, high) = (gap(0.05), gap(20.0));
    assert!(high <= low, "{high} vs {low}");
    assert!(high < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn greedy_beats_equal_when_k_divides_levels(seed in any::<u64>(), eps in 0.2f64..16.0, tau in 1.0f64..20.0) {
        let prior = random_tree(&mut seeded_stream(seed, 0));
        let levels = prior.num_levels();
        let k = levels * 4;
        for objective in [Objective::PostProcessed, Objective::Raw] {
            let config = GreedyConfig::new(k, 1e-5, tau).unwrap().objective(objective);
            let split = greedy_split(&prior, eps, &config).unwrap();
            prop_assert!((split.levels().iter().sum::<f64>() - eps).abs() <= 1e-12 * eps);
            let g = predict_with_objective(&prior, split.levels(), tau, objective).unwrap();
            let e = predict_with_objective(&prior, equal_split(eps, levels).unwrap().levels(), tau, objective).unwrap();
            prop_assert!(g <= e * (1.0 + 1e-9), "greedy {} equal {}", g, e);
        }
    }

    #[test]
    fn doubling_budget_lowers_error(seed in any::<u64>(), eps in 0.1f64..10.0) {
        let prior = random_tree(&mut seeded_stream(seed, 1));
        let levels: Vec<f64> = (0..prior.num_levels()).map(|i| eps * (i + 1) as f64).collect();
        let doubled: Vec<f64> = levels.iter().map(|e| 2.0 * e).collect();
        let a = predict_with_objective(&prior, &levels, 5.0, Objective::PostProcessed).unwrap();
        let b = predict_with_objective(&prior, &doubled, 5.0, Objective::PostProcessed).unwrap();
        prop_assert!(b < a);
    }
}
