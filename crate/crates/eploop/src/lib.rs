//! Spectral continuation and non-adiabatic population transfer around
//! exceptional points (EPs) of parameter-dependent non-Hermitian matrix
//! families.
//!
//! The crate covers the full pipeline for studying resonance dynamics near
//! EPs at desk scale:
//!
//! * [`family`] — polynomial matrix pencils `A(p1,p2) = Σ p1^e1 p2^e2 B_k`
//!   with a real symmetric positive-definite metric `C`, built-in analytic
//!   models (EP2, EP3, spectator variants) and a JSON file format for
//!   externally computed families.
//! * [`loops`] — closed paths in the two-dimensional parameter plane
//!   (circles, shifted circles, polygons) with a uniform-angular-speed time
//!   parametrization.
//! * [`spectral`] — the generalized eigenproblem `A r = μ C r`, c-product /
//!   bi-orthogonal normalization, eigenpair matching along a loop, loop
//!   permutation signatures and EP location by recursive loop bisection.
//! * [`dynamics`] — time integration of occupation coefficients in the
//!   instantaneous eigenbasis, the adiabatic reference, and an independent
//!   fixed-basis oracle.
//! * [`experiments`] — canned, config-driven scenario runs (braid maps,
//!   state-flip runs, shift scans) emitting figure-ready CSV datasets.
//! * [`cli`] — the `eploop` command-line front end.
//!
//! Most entry points are also demonstrated by the runnable examples in
//! `examples/`; see the README for a map.

pub mod assign;
pub mod cli;
pub mod dynamics;
pub mod experiments;
pub mod family;
mod linalg;
pub mod loops;
pub mod perm;
pub mod spectral;

pub use family::{FamilyError, FamilyTerm, MatrixFamily, ParameterPoint};
pub use loops::{LoopError, LoopShape, ParameterLoop, RadiusMode};
pub use perm::Permutation;
pub use spectral::{ContinuationTrack, SpectralError, SpectralFrame, SpectralOptions};
