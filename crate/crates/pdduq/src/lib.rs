//! Adaptive-sparse polynomial dimensional decomposition (PDD) for uncertainty
//! quantification of expensive multivariate models.
//!
//! The library builds surrogate expansions of a model output in measure-consistent
//! orthonormal polynomials, organized by variable-interaction subsets. Component
//! functions and polynomial orders are either fixed up front (truncated PDD) or
//! selected on the fly from global sensitivity indices (adaptive-sparse PDD).
//! Expansion coefficients are estimated by dimension-reduction integration on
//! full tensor grids or nested sparse grids, or by quasi Monte Carlo sampling.
//!
//! Top-level layout:
//! - [`input`]: random input vectors, marginal distributions, standardization maps
//! - [`orthopoly`]: orthonormal bases and Gauss rules per marginal
//! - [`pdd`]: coefficient stores, surrogate evaluation, moments, reference
//!   ANOVA/anchored decompositions
//! - [`quad`]: dimension-reduction integration engines (full grid and nested
//!   fully symmetric sparse grid)
//! - [`qmc`]: Sobol sequences and quasi Monte Carlo coefficient estimation
//! - [`adaptive`]: global sensitivity indices, ranking, and the adaptive loop
//! - [`models`]: built-in verification models and the external-model protocol
//! - [`postproc`]: surrogate resampling, output distributions, sweep studies
//! - [`config`]: campaign configuration files, reports, and run manifests

pub mod adaptive;
pub mod config;
pub mod input;
pub(crate) mod linalg;
pub mod models;
pub mod orthopoly;
pub mod pdd;
pub mod postproc;
pub mod qmc;
pub mod quad;

pub use input::{MarginalSpec, RandomInput};
pub use pdd::{CoefficientStore, MultiIndex, SubsetIndex, SurrogateModel};
