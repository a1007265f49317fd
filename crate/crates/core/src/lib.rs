//! Equilibrium mean-variance dividend strategies for a Brownian surplus with a
//! capped dividend rate: closed forms, a Monte Carlo evaluator, independent
//! numerical oracles and an equilibrium-condition checker.

// `!(x > 0.0)` style guards reject NaN along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod closed_form;
pub mod equilibrium;
pub mod model;
pub mod oracle;
pub mod root;
pub mod scalar;
pub mod simulate;
pub mod strategy;

pub use closed_form::{
    classify_regime, compute_constants, f_value, find_eps_tilde, payout_condition, payout_threshold, solve,
    solve_barrier, BarrierConstants, Classification, ClosedForm, ClosedFormError, EpsTilde, EquilibriumSolution,
    Jet, Regime, RegimeClass, Side, SolveError,
};
pub use equilibrium::{
    equilibrium_sweep, perturbed_objective, slope_estimate, EquilibriumError, PerturbationSpec, SlopeEstimate,
    SweepReport, Verdict,
};
pub use model::{compute_roots, CharRoots, ModelParams, ParamError, RawParams};
pub use oracle::{hjb_residual, solve_moments, OdeGrid, OracleError};
pub use scalar::Scalar;
pub use simulate::{estimate, simulate_path, simulate_paths, MCEstimate, PathOutcome, RuinTime, SimConfig, SimError};
pub use strategy::{Partition, Strategy, StrategyError, StrategyKind};

pub type ModelParamsF64 = ModelParams<f64>;
pub type ModelParamsF32 = ModelParams<f32>;
pub type CharRootsF64 = CharRoots<f64>;
pub type StrategyF64 = Strategy<f64>;
pub type ClosedFormF64 = ClosedForm<f64>;
pub type EquilibriumSolutionF64 = EquilibriumSolution<f64>;
pub type EquilibriumSolutionF32 = EquilibriumSolution<f32>;
pub type OdeGridF64 = OdeGrid<f64>;
pub type SweepReportF64 = SweepReport<f64>;
