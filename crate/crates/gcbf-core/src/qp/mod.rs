//! Dense convex QP solving and the QP-based controllers: the certificate
//! descent target and the hand-crafted CBF-QP baselines.

mod controllers;
mod hocbf;
pub mod reference;
mod solver;

pub use controllers::{
    centralized_cbfqp, decentralized_cbfqp, pi_qp_target, ControllerError, QpControls,
};
pub use hocbf::{hocbf_value, pair_row, HocbfParams, PairBody, PairRow};
pub use solver::{
    solve_qp, solve_relaxed, KktResiduals, QpError, QpProblem, QpRow, QpSolution, QpStatus,
    RelaxedSolution, SLACK_PENALTY,
};
