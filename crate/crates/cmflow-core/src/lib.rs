//! Matrix dynamics for Calogero-Moser systems with internal degrees of freedom.
//!
//! The library is organized around exact matrix-space flows ([`flows`]) that
//! serve as ground-truth oracles for the reduced dynamical systems integrated
//! in [`reduced`]. The coupling matrix `L` carries the internal degrees of
//! freedom; its gauge structure lives in [`gauge`], its vector decomposition
//! and rank classification in [`vectorial`], and reachable-set analysis of
//! its orbits in [`reach`]. [`matcore`] provides the Hermitian matrix
//! substrate shared by everything else.

pub mod flows;
pub mod gauge;
pub mod matcore;
pub mod ode;
pub mod reach;
pub mod reduced;
pub mod vectorial;

use thiserror::Error;

/// Errors produced across the library.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("matrix class violation: {0}")]
    ClassViolation(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is not positive semidefinite (minimum eigenvalue {min_eig:.3e} < -{tol:.3e})")]
    NotPositiveSemidefinite { min_eig: f64, tol: f64 },

    #[error("particle positions too close at t = {t:.6e} (minimum gap {min_gap:.3e})")]
    Singularity { t: f64, min_gap: f64 },

    #[error("step size underflow at t = {t:.6e} (h = {h:.3e}, minimum gap {min_gap:.3e})")]
    StepUnderflow { t: f64, h: f64, min_gap: f64 },

    #[error("invariant drift {drift:.3e} exceeds {limit:.3e} at t = {t:.6e} ({name})")]
    InvariantDrift {
        name: String,
        t: f64,
        drift: f64,
        limit: f64,
    },

    #[error("sign pattern infeasible: {0}")]
    InfeasiblePattern(String),

    #[error("rank bookkeeping disagrees: eigenvalue multiplicity gives {from_eigen}, Cholesky pivots give {from_cholesky}")]
    RankMismatch {
        from_eigen: usize,
        from_cholesky: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
