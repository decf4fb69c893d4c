//! Lattice-gas Monte Carlo with two-level coarse-grained proposals.
//!
//! The library samples Gibbs measures of long-range lattice-gas Hamiltonians
//! on 1d/2d tori. Besides plain single-site Metropolis and a coarse-cell
//! chain, it implements a two-level kernel: propose a move of the block-spin
//! (cell occupation) variables, accept it against the coarse Hamiltonian,
//! reconstruct a microscopic move consistent with the block move, then accept
//! that against the energy mismatch between the two levels. The composite
//! chain is reversible for the full Gibbs measure while doing most of its
//! arithmetic on the much smaller coarse system.
//!
//! `kernel_analysis` builds the transition kernels as dense matrices on small
//! instances and checks reversibility, the entrywise comparison with the
//! single-site kernel, and two-sided spectral gap bounds. Those checks back
//! the statistical tests on the samplers themselves.

pub mod energy;
pub mod exec;
pub mod kernel_analysis;
pub mod lattice;
pub mod observables;
pub mod potentials;
pub mod samplers;

/// Crate version, for run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Errors produced by construction and analysis entry points.
///
/// Hot loops (single steps, energy differences) never return `Result`; all
/// validation happens when geometries, potentials and chains are built.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("refusing: {0}")]
    Refused(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
    pub(crate) fn refused(msg: impl Into<String>) -> Self {
        Error::Refused(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
