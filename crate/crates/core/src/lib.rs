//! Simulator and theory toolkit for personalized federated learning with
//! probabilistic communication and bidirectional model compression.
//!
//! The crate is organized around the protocol pipeline:
//! - [`data`]: LIBSVM ingestion, client partitioning, synthetic instances;
//! - [`objective`]: the penalized objective F = f + h, gradients, and
//!   smoothness/strong-convexity constants;
//! - [`compressors`]: unbiased and biased compression operators with
//!   variance certificates and exact bit accounting;
//! - [`engine`]: the seeded L2GD state machine and the FedAvg baseline,
//!   producing per-iteration metric traces;
//! - [`theory`]: expected-smoothness constants, convergence bounds,
//!   optimal-probability closed forms, and the oracles that validate them.

pub mod compressors;
pub mod data;
pub mod engine;
pub mod error;
pub mod objective;
pub mod rng;
pub mod theory;

pub use compressors::{
    bit_cost, compress, joint_variance_factor, variance_factor, CompressedMessage,
    CompressorKind, CompressorSpec,
};
pub use data::{
    parse_libsvm, partition_sequential, partition_shuffled, serialize_libsvm, synth_instance,
    LabeledExample, PartitionedDataset,
};
pub use engine::{
    run_fedavg, run_fedavg_schedule, run_l2gd, stochastic_gradient, FedAvgConfig, FedAvgRun,
    L2gdConfig, L2gdRun, L2gdState, MetricsTrace, StepOutcome, TraceRecord,
    TRACE_SCHEMA_VERSION,
};
pub use error::{Error, Result};
pub use objective::{
    f_gradient, f_value, full_gradient, full_smoothness_bound, h_gradient, h_value, minimize,
    objective_value, LogisticProblem, MinimizerReport, Objective, SigmoidProblem,
    SmoothnessConstants, StackedModel,
};
pub use rng::StreamFactory;
pub use theory::{
    alpha, beta_estimate, compute_constants, delta, gamma, gamma_no_compression, gamma_upper,
    grad_norm_sq_at_optimum, nonconvex_budget, optimal_p_communication, optimal_p_rate,
    p_e_exact, p_e_upper, recursion_bound_check, strongly_convex_bound, ConstantsRequest,
    MonteCarloEstimate, NonconvexBudget, OptimalP, TheoryConstants,
};
