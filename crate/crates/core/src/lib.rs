//! Differentially private release of hierarchical conversion counts.
//!
//! Records are aggregated into a tree ([`tree`]), each level is noised with
//! discrete Laplace noise ([`noise`]), and the noisy tree is made consistent
//! by a linear-time estimator ([`postprocess`]). [`budgeting`] chooses how the
//! privacy budget is spread over levels.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod budgeting;
pub mod error;
pub mod experiment;
pub mod ingest;
pub mod metrics;
pub mod noise;
pub mod postprocess;
pub mod synth;
pub mod tree;

pub use budgeting::{
    equal_split, greedy_split, leaves_only_split, noisy_prior, predict_tree_rmsre, BudgetSplit, GreedyConfig,
    Objective, PriorTree,
};
pub use error::{Error, ErrorCategory, Result};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentResults, Method, PriorSource};
pub use ingest::{load_records, temporal_split, DatasetSpec};
pub use metrics::{rmsre_point, rmsre_tree, ErrorReport};
pub use noise::{dlap_sample, dlap_variance, noise_tree, seeded_stream, DiscreteLaplace, NoiseConfig, NoiseMode};
pub use postprocess::{combine_estimates, ols_oracle, tree_post_process, EstimateTree};
pub use synth::{generate_synthetic, SyntheticSpec};
pub use tree::{
    build_tree, validate_consistency, Attribute, AttributeKind, AttributeSchema, AttributionRecord, HierTree,
    NoisyTree, Topology,
};
