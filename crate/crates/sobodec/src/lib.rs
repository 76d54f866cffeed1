//! Grid-based machinery for compactness defects of bounded sequences in
//! W_0^{1,p} ∩ W_0^{1,q}.
//!
//! The crate discretizes a domain Ω ⊂ ℝ^N as a uniform cell grid, represents
//! vector-valued functions with zero Dirichlet extension, and provides
//!
//! * the four defect moduli (concentration, tightness, spreading, vanishing),
//! * three truncation-operator families (outer cutoff, gradient truncation at
//!   a level, removal of small values), built on a boundary-preserving
//!   Lipschitz truncation with an explicit good set,
//! * a decomposition driver splitting a bounded sequence into five canonical
//!   components, each carrying exactly one defect,
//! * model quasilinear operators and energies with growth envelopes, and the
//!   orthogonality residuals certifying that the operator/energy is
//!   asymptotically additive across the decomposition.
//!
//! All operations are pure functions of their inputs. Cell loops are
//! data-parallel; reductions are sequential in cell order so that outputs are
//! byte-reproducible for a fixed configuration and seed.

pub mod calibration;
pub mod corpus;
pub mod decompose;
pub mod diagnostics;
pub mod grid;
pub mod maximal;
pub mod operators;
pub mod scales;
pub mod sgf1;
pub mod truncation;

pub use grid::{build_domain, DomainSpec, ExponentConfig, GridDomain, GridFunction};
