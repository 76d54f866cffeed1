//! Frozen empirical constants.
//!
//! The continuum theory guarantees these constants exist but never names
//! numbers; the discretization adds quadrature factors of its own (cell
//! averaging overshoots a plateau by up to 3/2, forward differences see a
//! √N factor). Each constant below was measured on the fixed corpus in
//! `measure_constants` and frozen with headroom as a regression bound.
//! Rerun that test with `--ignored --nocapture` after changing any kernel
//! and refresh the numbers if the measured values moved.

/// Gradient truncation sup bound: sup(|φ_λ(u)| + |∇φ_λ(u)|) ≤ C0·λ.
pub const C0: f64 = 5.0;

/// Bad-set bound: |Ω \ R̂^λ| ≤ (C3/λ)^r · ‖u‖_{W^{1,r}}^r for r ∈ {q, p}.
pub const C3: f64 = 4.0;

/// Equiboundedness of the families: ‖φ_n(u)‖_X ≤ C·‖u‖_X for every level.
pub const FAMILY_BOUND_OUTER: f64 = 4.0;
pub const FAMILY_BOUND_ABOVE: f64 = 6.0;
pub const FAMILY_BOUND_BELOW: f64 = 7.0;

/// Empirical L^p operator bound of the discrete maximal function for
/// p ∈ [1.5, 4] on the calibration corpus.
pub const MAXIMAL_LP_RATIO: f64 = 4.0;

/// Discrete Sobolev embedding factor: ‖u‖_{L^{p*} + L^{q}} ≤ C_EMB·‖u‖_X
/// on the calibration corpus (used by the dual-norm residual surrogate).
pub const C_EMB: f64 = 2.0;

/// First Dirichlet eigenvalue factor of the unit interval in the discrete
/// (r=1 ball, N=1) Poincaré inequality: frozen analytic value π/2.
pub const POINCARE_S_1D_R2: f64 = std::f64::consts::FRAC_PI_2;
