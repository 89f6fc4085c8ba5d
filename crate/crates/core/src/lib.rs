//! Model predictive control with funnel-shaped stage costs for output
//! tracking of nonlinear systems with arbitrary relative degree.

pub mod errchain;
pub mod error;
pub mod funnel;
pub mod mpc;
pub mod ocp;
pub mod scenario;
pub mod sim;
pub mod systems;

pub use errchain::{
    chain_matrix, error_derivative, error_variables, highest_error_identity_check,
    polynomial_coefficients, ChainMatrix, ErrorTable, GainVector, JetVector,
};
pub use error::{Error, Result};
pub use funnel::{
    build_funnel_chain, class_g_check, default_gamma, derivative_bounds,
    derivative_bounds_from_sups, funnel_membership, gain_lower_bounds, gamma_margin,
    saturation_bound, saturation_bound_from_sups, select_gains, uniform_grid, ClassGReport,
    ExpTerm, FunnelChain, FunnelFunction, FunnelProfile, GainSelection, InitialJetData, SupNorms,
};
pub use mpc::{
    run_fmpc, verify_guarantees, verify_samples, ClosedLoopLog, GuaranteeReport, LogSample,
    MpcConfig, OcpRecord,
};
pub use ocp::{
    brute_force_ocp, cost_functional, solve_ocp, stage_cost, BruteForceResult, CostEvaluation,
    InfeasibleReason, OcpSolution, OcpSpec, OcpStatus, Quadrature, StageCost,
};
pub use scenario::TrackingSetup;
pub use sim::{
    estimate_dynamics_bounds, feedback_rollout, integrate, integrate_open_loop, project_to_ball,
    sampled_feedback_rollout, ControlSignal, FeedbackLaw, Reference, RunStatus, Sinusoid,
    SinusoidalReference, Stage, Trajectory, DEFAULT_INTEGRATOR_STEP,
};
pub use systems::{
    delay_oscillator, mass_on_car_normal_form, mass_on_car_state_space, rhs_highest_derivative,
    CausalOperator, MassOnCarParams, NormalFormPlant, Plant, RelativeDegreeSystem, StateSpacePlant,
};
