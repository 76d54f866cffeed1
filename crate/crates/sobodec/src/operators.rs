//! Quasilinear operators and energies on grid functions: coefficient
//! families with power-law growth envelopes, Nemytskii fields in the dual
//! sum spaces, a test bank for dual-norm surrogates, the truncation action
//! on functionals and integrands, and the orthogonality residuals that
//! certify a decomposition splits the operator and the energy additively.
//!
//! The operator is F(u)[phi] = int Q(x,u,Du):Dphi + (g1+g2)(x,u,Du).phi dx
//! and the energy is E(u) = int W(x,u,Du) dx with W = W1 + W2. Everything
//! is evaluated cellwise on the grid; functionals are represented by their
//! integrand fields and never materialized as abstract duals.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::calibration::{C0, C3, C_EMB, FAMILY_BOUND_ABOVE, FAMILY_BOUND_BELOW};
use crate::decompose::Decomposition;
use crate::grid::{
    conjugate, lp_norm, lp_norm_where, sum_space_norm, ExponentConfig, GridDomain, GridFunction,
};
use crate::truncation::{apply_family, cutoff_outer, eta, nu, TruncationFamily, TruncationParams};

#[derive(Debug, Error)]
pub enum OperatorError {
    #[error("{what} produced a non-finite value at cell {cell}")]
    NonFiniteField { what: &'static str, cell: usize },
    #[error("the test bank has no members")]
    EmptyBank,
    #[error("the pair corpus is empty")]
    EmptyCorpus,
    #[error("{name} = {value} must satisfy {require}")]
    BadParameter { name: &'static str, value: f64, require: &'static str },
    #[error("truncation stage must be 1, 2 or 3, got {stage}")]
    BadStage { stage: usize },
}

// ---------------------------------------------------------------------------
// growth envelopes

/// The admissible upper bounds: `HAlpha` bounds the principal coefficient,
/// `IAlpha` the critical lower-order source, `JRho` the decaying source.
/// The tilde variants bound energy densities (one power higher, since no
/// gradient slot of the test function absorbs a factor).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EnvelopeKind {
    HAlpha,
    IAlpha,
    JRho,
    HTildeAlpha,
    JTildeRho,
}

/// A pointwise bound `eval(x, s, t)` where s stands for the value magnitude
/// and t for the gradient magnitude. The weight functions come from the
/// exponent configuration; `exponent` is the Holder offset (alpha) for the
/// H/I kinds and the decay exponent (rho) for the J kinds. J-kind bounds
/// carry their constants inside the weights, so `c` is ignored there.
#[derive(Debug, Clone, Copy)]
pub struct GrowthEnvelope {
    pub kind: EnvelopeKind,
    pub c: f64,
    pub exponent: f64,
}

impl GrowthEnvelope {
    pub fn eval(&self, exps: &ExponentConfig, cell: usize, s: f64, t: f64) -> f64 {
        let (q, p, ps) = (exps.q, exps.p, exps.p_star);
        let hq = exps.h_q.value(cell, 0);
        let hp = exps.h_p.value(cell, 0);
        let hps = exps.h_pstar.value(cell, 0);
        let hinf = exps.h_inf.value(cell, 0);
        let a = self.exponent;
        match self.kind {
            EnvelopeKind::HAlpha => {
                self.c * (hq + s + t).powf(q - 1.0 - a)
                    + self.c * (hp + s.powf(ps / p) + t).powf(p - 1.0 - a)
            }
            EnvelopeKind::IAlpha => {
                self.c * (hq + s + t).powf(q - 1.0 - a)
                    + self.c * (hp + s.powf(ps / p) + t).powf(p - p / ps - a)
            }
            EnvelopeKind::JRho => {
                hinf * (s + t).powf(q - 1.0)
                    + hq.powf(a) * (hq + s + t).powf(q - 1.0 - a)
                    + hps.powf(a) * (hps + s + t.powf(p / ps)).powf(ps - 1.0 - a)
            }
            EnvelopeKind::HTildeAlpha => {
                self.c * (hq + s + t).powf(q - a)
                    + self.c * (hp + s.powf(ps / p) + t).powf(p - a)
            }
            EnvelopeKind::JTildeRho => {
                hinf * (s + t).powf(q)
                    + hq.powf(a) * (hq + s + t).powf(q - a)
                    + hps.powf(a) * (hps + s + t.powf(p / ps)).powf(ps - a)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// coefficient families

/// One evaluation point of a coefficient: the cell, its center, the weight
/// values there, the function value mu (M components) and the gradient xi
/// (M*N components, axis fastest within each component).
pub struct CoefficientInput<'a> {
    pub cell: usize,
    pub x: &'a [f64],
    pub h_q: f64,
    pub h_p: f64,
    pub h_pstar: f64,
    pub h_inf: f64,
    pub mu: &'a [f64],
    pub xi: &'a [f64],
}

pub type CoefficientFn = Arc<dyn Fn(&CoefficientInput, &mut [f64]) + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FamilyPart {
    Q,
    G1,
    G2,
}

/// A coefficient triple (Q, g1, g2) together with the constants it claims
/// for its growth and continuity bounds: Q maps into M x N matrices, the
/// sources into M vectors. `alpha` is the Holder exponent shared by Q and
/// g1, `rho` the decay exponent of g2.
#[derive(Clone)]
pub struct CoefficientFamily {
    pub label: String,
    pub c: f64,
    pub alpha: f64,
    pub rho: f64,
    q_fn: CoefficientFn,
    g1_fn: CoefficientFn,
    g2_fn: CoefficientFn,
}

impl fmt::Debug for CoefficientFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientFamily")
            .field("label", &self.label)
            .field("c", &self.c)
            .field("alpha", &self.alpha)
            .field("rho", &self.rho)
            .finish()
    }
}

fn zero_fn() -> CoefficientFn {
    Arc::new(|_, _| {})
}

fn slice_norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

impl CoefficientFamily {
    /// Sum of the p- and q-Laplacian coefficients, no sources.
    pub fn double_power(exps: &ExponentConfig) -> Self {
        let (p, q) = (exps.p, exps.q);
        let q_fn: CoefficientFn = Arc::new(move |inp, out| {
            let t = slice_norm(inp.xi);
            if t > 0.0 {
                let f = t.powf(p - 2.0) + t.powf(q - 2.0);
                for (o, &x) in out.iter_mut().zip(inp.xi) {
                    *o = f * x;
                }
            }
        });
        CoefficientFamily {
            label: "double-power".into(),
            c: 1.3 * (p - 1.0).max(2.0),
            alpha: q - 1.0,
            rho: q - 1.0,
            q_fn,
            g1_fn: zero_fn(),
            g2_fn: zero_fn(),
        }
    }

    /// Double-power principal part plus the critical gradient source
    /// g1 = gamma(x) |xi|^(p - p/p*). The weight is scalar (broadcast to
    /// every component) or has exactly M components.
    pub fn weighted_gradient(exps: &ExponentConfig, gamma: GridFunction) -> Self {
        let base = Self::double_power(exps);
        let (p, ps) = (exps.p, exps.p_star);
        let e1 = p - p / ps;
        let gamma_sup = lp_norm(&gamma, f64::INFINITY);
        let gamma = Arc::new(gamma);
        let g1_fn: CoefficientFn = Arc::new(move |inp, out| {
            let t = slice_norm(inp.xi).powf(e1);
            let gm = gamma.components();
            let m = out.len();
            for (k, o) in out.iter_mut().enumerate() {
                let g = if gm == 1 {
                    gamma.value(inp.cell, 0)
                } else if gm == m {
                    gamma.value(inp.cell, k)
                } else {
                    f64::NAN
                };
                *o = g * t;
            }
        });
        CoefficientFamily {
            label: "weighted-gradient".into(),
            c: base.c.max(1.3 * gamma_sup * e1.max(2.0)),
            g1_fn,
            ..base
        }
    }

    /// Double-power principal part plus the decaying source
    /// g2 = h_inf(x) |(mu, xi)|^(q-2) mu, which sits under the first term
    /// of its envelope with no constant.
    pub fn decaying(exps: &ExponentConfig) -> Self {
        let base = Self::double_power(exps);
        let q = exps.q;
        let g2_fn: CoefficientFn = Arc::new(move |inp, out| {
            let r = (slice_norm(inp.mu).powi(2) + slice_norm(inp.xi).powi(2)).sqrt();
            if r > 0.0 {
                let f = inp.h_inf * r.powf(q - 2.0);
                for (o, &m) in out.iter_mut().zip(inp.mu) {
                    *o = f * m;
                }
            }
        });
        CoefficientFamily { label: "decaying".into(), g2_fn, ..base }
    }

    /// Natural-growth source g1 = scale * |xi|^p mu. Grows one full power
    /// past every admissible envelope; exists to exercise the failure path
    /// of the checker.
    pub fn natural_growth(exps: &ExponentConfig, scale: f64) -> Self {
        let base = Self::double_power(exps);
        let p = exps.p;
        let g1_fn: CoefficientFn = Arc::new(move |inp, out| {
            let t = slice_norm(inp.xi).powf(p);
            for (o, &m) in out.iter_mut().zip(inp.mu) {
                *o = scale * t * m;
            }
        });
        CoefficientFamily { label: "natural-growth".into(), g1_fn, ..base }
    }

    /// The zero operator; passes every check with room to spare.
    pub fn zero(exps: &ExponentConfig) -> Self {
        CoefficientFamily {
            label: "zero".into(),
            c: 1.0,
            alpha: exps.q - 1.0,
            rho: exps.q - 1.0,
            q_fn: zero_fn(),
            g1_fn: zero_fn(),
            g2_fn: zero_fn(),
        }
    }

    /// User-supplied coefficients. The claimed exponents must lie in
    /// (0, q-1]; the claims are only as good as `envelope_check` says.
    pub fn custom(
        exps: &ExponentConfig,
        label: &str,
        c: f64,
        alpha: f64,
        rho: f64,
        q_fn: CoefficientFn,
        g1_fn: CoefficientFn,
        g2_fn: CoefficientFn,
    ) -> Result<Self, OperatorError> {
        let top = exps.q - 1.0;
        if !(alpha > 0.0 && alpha <= top) {
            return Err(OperatorError::BadParameter {
                name: "alpha",
                value: alpha,
                require: "0 < alpha <= q-1",
            });
        }
        if !(rho > 0.0 && rho <= top) {
            return Err(OperatorError::BadParameter {
                name: "rho",
                value: rho,
                require: "0 < rho <= q-1",
            });
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(OperatorError::BadParameter {
                name: "c",
                value: c,
                require: "a positive finite constant",
            });
        }
        Ok(CoefficientFamily { label: label.into(), c, alpha, rho, q_fn, g1_fn, g2_fn })
    }

    fn part(&self, part: FamilyPart) -> &CoefficientFn {
        match part {
            FamilyPart::Q => &self.q_fn,
            FamilyPart::G1 => &self.g1_fn,
            FamilyPart::G2 => &self.g2_fn,
        }
    }
}

// ---------------------------------------------------------------------------
// Nemytskii fields and pairings

fn coefficient_input<'a>(
    exps: &'a ExponentConfig,
    dom: &'a GridDomain,
    u: &'a GridFunction,
    grad: &'a GridFunction,
    cell: usize,
) -> CoefficientInput<'a> {
    CoefficientInput {
        cell,
        x: dom.center(cell),
        h_q: exps.h_q.value(cell, 0),
        h_p: exps.h_p.value(cell, 0),
        h_pstar: exps.h_pstar.value(cell, 0),
        h_inf: exps.h_inf.value(cell, 0),
        mu: u.cell_values(cell),
        xi: grad.cell_values(cell),
    }
}

/// Evaluate one coefficient of the family along u, cell by cell. The Q
/// field has M*N components and is measured in L^{p'} + L^{q'}; the source
/// fields have M components and are measured in L^{p*'} + L^{q'}.
pub fn nemytskii(
    family: &CoefficientFamily,
    exps: &ExponentConfig,
    u: &GridFunction,
    part: FamilyPart,
) -> Result<GridFunction, OperatorError> {
    let dom = u.domain().clone();
    assert!(
        exps.h_q.domain().as_ref() == dom.as_ref(),
        "weights and data must share one grid"
    );
    let m = u.components();
    let out_m = if part == FamilyPart::Q { m * dom.dim() } else { m };
    let grad = u.gradient();
    let f = family.part(part);
    let mut values = vec![0.0; dom.cells() * out_m];
    values.par_chunks_mut(out_m).enumerate().for_each(|(c, out)| {
        if dom.is_masked(c) {
            f(&coefficient_input(exps, &dom, u, grad, c), out);
        }
    });
    let what = match part {
        FamilyPart::Q => "the principal coefficient",
        FamilyPart::G1 => "the critical source",
        FamilyPart::G2 => "the decaying source",
    };
    if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
        return Err(OperatorError::NonFiniteField { what, cell: bad / out_m });
    }
    Ok(GridFunction::from_values(dom, out_m, values).expect("values checked finite"))
}

/// The integrand fields representing F(u): pair `q` against gradients of
/// test functions and `g` against their values.
#[derive(Debug, Clone)]
pub struct OperatorFields {
    pub q: GridFunction,
    pub g: GridFunction,
}

pub fn operator_fields(
    family: &CoefficientFamily,
    exps: &ExponentConfig,
    u: &GridFunction,
) -> Result<OperatorFields, OperatorError> {
    operator_fields_part(family, exps, u, true)
}

/// Same with the decaying source optionally dropped; the small-value
/// truncation stage is certified against the principal part only.
pub fn operator_fields_part(
    family: &CoefficientFamily,
    exps: &ExponentConfig,
    u: &GridFunction,
    with_g2: bool,
) -> Result<OperatorFields, OperatorError> {
    let q = nemytskii(family, exps, u, FamilyPart::Q)?;
    let g1 = nemytskii(family, exps, u, FamilyPart::G1)?;
    let g = if with_g2 { g1.add(&nemytskii(family, exps, u, FamilyPart::G2)?) } else { g1 };
    Ok(OperatorFields { q, g })
}

fn combine_fields(terms: &[(f64, &OperatorFields)]) -> OperatorFields {
    let qs: Vec<(f64, &GridFunction)> = terms.iter().map(|(s, f)| (*s, &f.q)).collect();
    let gs: Vec<(f64, &GridFunction)> = terms.iter().map(|(s, f)| (*s, &f.g)).collect();
    OperatorFields {
        q: GridFunction::linear_combination(&qs),
        g: GridFunction::linear_combination(&gs),
    }
}

/// The duality pairing int q : Dphi + g . phi dx.
pub fn pair_fields(fields: &OperatorFields, phi: &GridFunction) -> f64 {
    let dom = phi.domain();
    let gp = phi.gradient();
    assert!(fields.q.components() == gp.components(), "field shape mismatch");
    assert!(fields.g.components() == phi.components(), "field shape mismatch");
    let mut sum = 0.0;
    for c in 0..dom.cells() {
        if dom.is_masked(c) {
            let dot_q: f64 = fields
                .q
                .cell_values(c)
                .iter()
                .zip(gp.cell_values(c))
                .map(|(a, b)| a * b)
                .sum();
            let dot_g: f64 = fields
                .g
                .cell_values(c)
                .iter()
                .zip(phi.cell_values(c))
                .map(|(a, b)| a * b)
                .sum();
            sum += dot_q + dot_g;
        }
    }
    sum * dom.cell_volume()
}

/// F(u)[phi].
pub fn apply_f(
    family: &CoefficientFamily,
    exps: &ExponentConfig,
    u: &GridFunction,
    phi: &GridFunction,
) -> Result<f64, OperatorError> {
    Ok(pair_fields(&operator_fields(family, exps, u)?, phi))
}

// ---------------------------------------------------------------------------
// envelope checks

#[derive(Debug, Clone, Serialize)]
pub struct EnvelopeCheck {
    pub label: String,
    pub worst_ratio: f64,
    /// Magnitudes (s, t) of the worst sample, then (s, t) of its partner
    /// for the continuity checks (zeros for the growth checks).
    pub witness: [f64; 4],
    pub witness_cell: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnvelopeReport {
    pub family: String,
    pub samples: usize,
    pub checks: Vec<EnvelopeCheck>,
    pub pass: bool,
}

struct SamplePoint {
    cell: usize,
    mu: Vec<f64>,
    xi: Vec<f64>,
}

fn sample_point(
    rng: &mut ChaCha8Rng,
    masked: &[usize],
    components: usize,
    dim: usize,
) -> SamplePoint {
    let cell = masked[rng.gen_range(0..masked.len())];
    let scale_mu = 10f64.powf(rng.gen_range(-2.0..2.5));
    let scale_xi = 10f64.powf(rng.gen_range(-2.0..2.5));
    let mu = (0..components).map(|_| scale_mu * rng.gen_range(-1.0..1.0)).collect();
    let xi = (0..components * dim).map(|_| scale_xi * rng.gen_range(-1.0..1.0)).collect();
    SamplePoint { cell, mu, xi }
}

fn eval_at(
    family: &CoefficientFamily,
    exps: &ExponentConfig,
    dom: &GridDomain,
    part: FamilyPart,
    point: &SamplePoint,
    dim: usize,
) -> Vec<f64> {
    let inp = CoefficientInput {
        cell: point.cell,
        x: dom.center(point.cell),
        h_q: exps.h_q.value(point.cell, 0),
        h_p: exps.h_p.value(point.cell, 0),
        h_pstar: exps.h_pstar.value(point.cell, 0),
        h_inf: exps.h_inf.value(point.cell, 0),
        mu: &point.mu,
        xi: &point.xi,
    };
    let out_len = if part == FamilyPart::Q { point.mu.len() * dim } else { point.mu.len() };
    let mut out = vec![0.0; out_len];
    family.part(part)(&inp, &mut out);
    out
}

fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else if den == 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

/// Randomized audit of the declared growth and continuity bounds: the
/// coefficients are sampled over cells and over value/gradient magnitudes
/// spanning several decades, and each sample's output is compared against
/// the matching envelope. Ratios above one fail, and the worst witness is
/// reported per check.
pub fn envelope_check(
    family: &CoefficientFamily,
    exps: &ExponentConfig,
    components: usize,
    samples: usize,
    seed: u64,
) -> EnvelopeReport {
    let dom = exps.h_q.domain().clone();
    let dim = dom.dim();
    let masked: Vec<usize> = (0..dom.cells()).filter(|&c| dom.is_masked(c)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let growth = [
        ("principal growth", FamilyPart::Q, EnvelopeKind::HAlpha, 0.0),
        ("critical source growth", FamilyPart::G1, EnvelopeKind::IAlpha, 0.0),
        ("decaying source growth", FamilyPart::G2, EnvelopeKind::JRho, family.rho),
    ];
    let continuity = [
        ("principal continuity", FamilyPart::Q, EnvelopeKind::HAlpha),
        ("critical source continuity", FamilyPart::G1, EnvelopeKind::IAlpha),
    ];

    let mut checks = Vec::new();
    let mut worst = vec![(0.0f64, [0.0; 4], 0usize); growth.len() + continuity.len()];
    let ps_over_p = exps.p_star / exps.p;

    for _ in 0..samples {
        let a = sample_point(&mut rng, &masked, components, dim);
        let b = SamplePoint { cell: a.cell, ..sample_point(&mut rng, &masked, components, dim) };
        let (sa, ta) = (slice_norm(&a.mu), slice_norm(&a.xi));
        let (sb, tb) = (slice_norm(&b.mu), slice_norm(&b.xi));

        for (i, &(_, part, kind, exponent)) in growth.iter().enumerate() {
            let env = GrowthEnvelope { kind, c: family.c, exponent };
            let out = eval_at(family, exps, &dom, part, &a, dim);
            let r = ratio(slice_norm(&out), env.eval(exps, a.cell, sa, ta));
            if r > worst[i].0 {
                worst[i] = (r, [sa, ta, 0.0, 0.0], a.cell);
            }
        }
        for (j, &(_, part, kind)) in continuity.iter().enumerate() {
            let i = growth.len() + j;
            let env = GrowthEnvelope { kind, c: family.c, exponent: family.alpha };
            let oa = eval_at(family, exps, &dom, part, &a, dim);
            let ob = eval_at(family, exps, &dom, part, &b, dim);
            let diff: f64 = oa
                .iter()
                .zip(&ob)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            let dmu = a.mu.iter().zip(&b.mu).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let dxi = a.xi.iter().zip(&b.xi).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let den = env.eval(exps, a.cell, sa + sb, ta + tb)
                * (dmu + dmu.powf(ps_over_p) + dxi).powf(family.alpha);
            let r = ratio(diff, den);
            if r > worst[i].0 {
                worst[i] = (r, [sa, ta, sb, tb], a.cell);
            }
        }
    }

    let labels = growth
        .iter()
        .map(|&(l, ..)| l)
        .chain(continuity.iter().map(|&(l, ..)| l));
    for (i, label) in labels.enumerate() {
        let (r, witness, cell) = worst[i];
        checks.push(EnvelopeCheck {
            label: label.into(),
            worst_ratio: r,
            witness,
            witness_cell: cell,
            pass: r <= 1.0 + 1e-9,
        });
    }
    let pass = checks.iter().all(|c| c.pass);
    EnvelopeReport { family: family.label.clone(), samples, checks, pass }
}

// ---------------------------------------------------------------------------
// test bank and dual-norm surrogates

/// An append-only collection of test functions, each normalized to unit
/// ambient norm on insertion, used to witness dual norms from below.
#[derive(Debug, Clone)]
pub struct TestBank {
    exps: ExponentConfig,
    members: Vec<GridFunction>,
    /// ||phi||_{p*} + ||phi||_q per member, the factor a source field sees
    /// in the pairing bound.
    value_factors: Vec<f64>,
}

impl TestBank {
    pub fn new(exps: &ExponentConfig) -> Self {
        TestBank { exps: exps.clone(), members: Vec::new(), value_factors: Vec::new() }
    }

    /// Normalize and keep the function; silently drops (near-)zero input.
    /// Returns whether a member was added.
    pub fn insert(&mut self, phi: &GridFunction) -> bool {
        let norm = self.exps.x_norm(phi);
        if norm <= 1e-300 {
            return false;
        }
        let member = phi.scale(1.0 / norm);
        self.value_factors
            .push(lp_norm(&member, self.exps.p_star) + lp_norm(&member, self.exps.q));
        self.members.push(member);
        true
    }

    /// Bumps of two widths at a coarse lattice of centers, one copy per
    /// component slot.
    pub fn lattice(exps: &ExponentConfig, components: usize) -> Self {
        let dom = exps.h_q.domain().clone();
        let dim = dom.dim();
        let per_axis = match dim {
            1 => 5,
            2 => 3,
            _ => 2,
        };
        let mut centers: Vec<Vec<f64>> = vec![Vec::new()];
        for a in 0..dim {
            let lo = dom.origin()[a];
            let ext = (dom.dims()[a] - 1) as f64 * dom.spacing();
            let mut next = Vec::new();
            for c in &centers {
                for i in 0..per_axis {
                    let frac = if per_axis == 1 {
                        0.5
                    } else {
                        0.15 + 0.7 * i as f64 / (per_axis - 1) as f64
                    };
                    let mut cc = c.clone();
                    cc.push(lo + frac * ext);
                    next.push(cc);
                }
            }
            centers = next;
        }
        let diam = dom.box_diameter();
        let mut bank = Self::new(exps);
        for center in &centers {
            for width in [diam / 16.0, diam / 5.0] {
                for k in 0..components {
                    let phi = GridFunction::from_fn(dom.clone(), components, |x, out| {
                        let d: f64 = x
                            .iter()
                            .zip(center)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt();
                        out[k] = nu(2.0 * d / width - 1.0);
                    })
                    .expect("bump profile is finite");
                    bank.insert(&phi);
                }
            }
        }
        bank
    }

    /// Enrich with normalized copies of the mapped inputs and of every
    /// component, so the lower bounds see the directions the residuals
    /// actually live in.
    pub fn with_decomposition(mut self, dec: &Decomposition) -> Self {
        for n in 0..dec.len() {
            self.insert(&dec.input[dec.composite[n]]);
            for comp in &dec.components {
                self.insert(&comp[n]);
            }
        }
        self
    }

    pub fn members(&self) -> &[GridFunction] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// The factor multiplying a source-field norm in the pairing bound:
    /// the embedding constant, or the measured worst member if that is
    /// larger, so the witnessed lower bound can never cross the upper one.
    fn value_factor(&self) -> f64 {
        self.value_factors.iter().fold(1.0 + C_EMB, |a, &b| a.max(b))
    }
}

fn hoelder_upper(exps: &ExponentConfig, fields: &OperatorFields, value_factor: f64) -> f64 {
    sum_space_norm(&fields.q, conjugate(exps.p), conjugate(exps.q))
        + value_factor * sum_space_norm(&fields.g, conjugate(exps.p_star), conjugate(exps.q))
}

/// Bracket the dual norm of the functional represented by `fields`:
/// the lower bound is the best witness among the bank members, the upper
/// bound is the Holder pairing estimate through the dual sum-space norms.
pub fn dual_norm_pair(
    exps: &ExponentConfig,
    fields: &OperatorFields,
    bank: &TestBank,
) -> Result<(f64, f64), OperatorError> {
    if bank.is_empty() {
        return Err(OperatorError::EmptyBank);
    }
    let lower = bank
        .members
        .iter()
        .map(|phi| pair_fields(fields, phi).abs())
        .fold(0.0, f64::max);
    let upper = hoelder_upper(exps, fields, bank.value_factor());
    Ok((lower, upper))
}

/// Dual-norm bracket of a signed combination sum_i c_i F(u_i).
pub fn dual_residual_norm(
    family: &CoefficientFamily,
    exps: &ExponentConfig,
    terms: &[(f64, &GridFunction)],
    bank: &TestBank,
) -> Result<(f64, f64), OperatorError> {
    let fields: Vec<OperatorFields> = terms
        .iter()
        .map(|(_, u)| operator_fields(family, exps, u))
        .collect::<Result<_, _>>()?;
    let combo: Vec<(f64, &OperatorFields)> =
        terms.iter().zip(&fields).map(|(&(s, _), f)| (s, f)).collect();
    dual_norm_pair(exps, &combine_fields(&combo), bank)
}

// ---------------------------------------------------------------------------
// truncation action on functionals and integrands

/// The outer-cutoff stage acting on a functional through its integrand
/// fields: testing the result against phi agrees with testing the original
/// against the cutoff of phi, up to the one-cell product-rule collar of the
/// forward difference. The q-field is scaled by the cutoff profile and the
/// profile's gradient moves a q-contribution into the value slot.
pub fn outer_truncate_functional(fields: &OperatorFields, level: f64) -> OperatorFields {
    assert!(level > 0.0, "cutoff level must be positive");
    let dom = fields.q.domain().clone();
    let dim = dom.dim();
    let m = fields.g.components();
    assert!(fields.q.components() == m * dim, "field shape mismatch");
    let profile = GridFunction::from_fn(dom.clone(), 1, |x, out| {
        let r: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        out[0] = nu(r - level);
    })
    .expect("cutoff profile is finite");
    let dprofile = profile.gradient();
    let mut q_vals = vec![0.0; dom.cells() * m * dim];
    let mut g_vals = vec![0.0; dom.cells() * m];
    for c in 0..dom.cells() {
        if !dom.is_masked(c) {
            continue;
        }
        let s = profile.value(c, 0);
        let qv = fields.q.cell_values(c);
        let gv = fields.g.cell_values(c);
        let dp = dprofile.cell_values(c);
        for k in 0..m {
            let mut moved = 0.0;
            for a in 0..dim {
                q_vals[c * m * dim + k * dim + a] = s * qv[k * dim + a];
                moved += qv[k * dim + a] * dp[a];
            }
            g_vals[c * m + k] = s * gv[k] + moved;
        }
    }
    OperatorFields {
        q: GridFunction::from_values(dom.clone(), m * dim, q_vals).expect("finite by construction"),
        g: GridFunction::from_values(dom, m, g_vals).expect("finite by construction"),
    }
}

/// The three truncation stages acting pointwise on an integrand: cutoff
/// outside the ball of the given level, clamp at the level, or remove the
/// part below the reciprocal level.
pub fn outer_truncate_integrand(
    stage: usize,
    level: f64,
    g: &GridFunction,
) -> Result<GridFunction, OperatorError> {
    if !(level > 0.0 && level.is_finite()) {
        return Err(OperatorError::BadParameter {
            name: "level",
            value: level,
            require: "a positive finite level",
        });
    }
    match stage {
        1 => Ok(cutoff_outer(g, level)),
        2 => Ok(g.map(|v| eta(level, v))),
        3 => Ok(g.map(|v| v - eta(1.0 / level, v))),
        _ => Err(OperatorError::BadStage { stage }),
    }
}

// ---------------------------------------------------------------------------
// compatibility of the truncation stages with the operator

#[derive(Debug, Clone, Serialize)]
pub struct CompatibilityReport {
    pub stage: usize,
    pub m_level: f64,
    pub n_levels: Vec<f64>,
    /// Truncate the functional at the fixed level, perturb beyond the
    /// moving one: witnessed lower bound and Holder upper bound per rung.
    pub forward_lower: Vec<f64>,
    pub forward_upper: Vec<f64>,
    /// Complementary side: perturb inside the fixed level, keep only the
    /// functional's tail past the moving one.
    pub backward_lower: Vec<f64>,
    pub backward_upper: Vec<f64>,
}

impl CompatibilityReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "n_level,forward_lower,forward_upper,backward_lower,backward_upper\n",
        );
        for i in 0..self.n_levels.len() {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                self.n_levels[i],
                self.forward_lower[i],
                self.forward_upper[i],
                self.backward_lower[i],
                self.backward_upper[i],
            ));
        }
        s
    }
}

fn stage_family(stage: usize) -> Result<TruncationFamily, OperatorError> {
    match stage {
        1 => Ok(TruncationFamily::Outer),
        2 => Ok(TruncationFamily::Above),
        3 => Ok(TruncationFamily::Below),
        _ => Err(OperatorError::BadStage { stage }),
    }
}

/// Worst-set bound for the threshold-split norm: each branch is maximized
/// separately over cell sets of at most the given measure, which dominates
/// the restriction to any single admissible set.
fn restricted_split_norm(u: &GridFunction, r: f64, s: f64, budget: f64) -> f64 {
    let dom = u.domain();
    let vol = dom.cell_volume();
    let cap = (budget / vol).floor() as usize;
    if cap == 0 {
        return 0.0;
    }
    let mut big = Vec::new();
    let mut small = Vec::new();
    for c in 0..dom.cells() {
        if dom.is_masked(c) {
            let mag = u.magnitude(c);
            if mag > 1.0 {
                big.push(mag);
            } else if mag > 0.0 {
                small.push(mag);
            }
        }
    }
    big.sort_by(|a, b| b.partial_cmp(a).expect("magnitudes are finite"));
    small.sort_by(|a, b| b.partial_cmp(a).expect("magnitudes are finite"));
    let bp: f64 = big.iter().take(cap).map(|v| v.powf(r)).sum();
    let sp: f64 = small.iter().take(cap).map(|v| v.powf(s)).sum();
    (bp * vol).powf(1.0 / r) + (sp * vol).powf(1.0 / s)
}

/// Top-cells L^1 mass over sets of at most the given measure.
fn worst_set_l1(u: &GridFunction, budget: f64) -> f64 {
    let dom = u.domain();
    let vol = dom.cell_volume();
    let cap = (budget / vol).floor() as usize;
    if cap == 0 {
        return 0.0;
    }
    let mut mags: Vec<f64> = (0..dom.cells())
        .filter(|&c| dom.is_masked(c))
        .map(|c| u.magnitude(c))
        .collect();
    mags.sort_by(|a, b| b.partial_cmp(a).expect("magnitudes are finite"));
    mags.iter().take(cap).sum::<f64>() * vol
}

/// Measure how far a truncation stage is from commuting with the operator
/// on a corpus of pairs (v, w), along a ladder of moving levels with the
/// complementary level fixed. Both displayed quantities of the axiom are
/// reported as dual-norm brackets; stage 3 certifies the principal part
/// only, its decaying source being covered by equiintegrability instead.
pub fn compatibility_residual(
    family: &CoefficientFamily,
    exps: &ExponentConfig,
    stage: usize,
    m_level: f64,
    n_levels: &[f64],
    pairs: &[(GridFunction, GridFunction)],
    bank: &TestBank,
    params: TruncationParams,
) -> Result<CompatibilityReport, OperatorError> {
    let fam = stage_family(stage)?;
    if pairs.is_empty() {
        return Err(OperatorError::EmptyCorpus);
    }
    if bank.is_empty() {
        return Err(OperatorError::EmptyBank);
    }
    let with_g2 = stage != 3;
    let dim = pairs[0].0.domain().dim() as f64;
    let bound = match stage {
        2 => FAMILY_BOUND_ABOVE,
        3 => FAMILY_BOUND_BELOW,
        _ => 1.0,
    };
    let (pp, qp, psp) = (conjugate(exps.p), conjugate(exps.q), conjugate(exps.p_star));

    // The fixed-level composition applied to every bank member, for the
    // forward lower bounds of the pointwise stages.
    let composed_bank: Vec<GridFunction> = bank
        .members
        .iter()
        .map(|phi| apply_family(phi, fam, m_level, params))
        .collect();

    let base: Vec<(OperatorFields, OperatorFields)> = pairs
        .iter()
        .map(|(v, w)| {
            let fv = operator_fields_part(family, exps, v, with_g2)?;
            let near = v.add(&apply_family(w, fam, m_level, params));
            let fnear = operator_fields_part(family, exps, &near, with_g2)?;
            let diff = combine_fields(&[(1.0, &fnear), (-1.0, &fv)]);
            Ok((fv, diff))
        })
        .collect::<Result<_, OperatorError>>()?;

    let mut forward_lower = Vec::new();
    let mut forward_upper = Vec::new();
    let mut backward_lower = Vec::new();
    let mut backward_upper = Vec::new();

    for &n_level in n_levels {
        let moving_bank: Vec<GridFunction> = if stage == 1 {
            Vec::new()
        } else {
            bank.members
                .iter()
                .map(|phi| phi.sub(&apply_family(phi, fam, n_level, params)))
                .collect()
        };

        let mut fl: f64 = 0.0;
        let mut fu: f64 = 0.0;
        let mut bl: f64 = 0.0;
        let mut bu: f64 = 0.0;
        for (pair_idx, (v, w)) in pairs.iter().enumerate() {
            let (fv, fixed_diff) = &base[pair_idx];
            let tail = w.sub(&apply_family(w, fam, n_level, params));
            let far = v.add(&tail);
            let ffar = operator_fields_part(family, exps, &far, with_g2)?;
            let moving_diff = combine_fields(&[(1.0, &ffar), (-1.0, fv)]);

            match stage {
                1 => {
                    let tf = outer_truncate_functional(&moving_diff, m_level);
                    let (lo, up) = dual_norm_pair(exps, &tf, bank)?;
                    fl = fl.max(lo);
                    fu = fu.max(up);
                    let inner = outer_truncate_functional(fixed_diff, n_level);
                    let tb = combine_fields(&[(1.0, fixed_diff), (-1.0, &inner)]);
                    let (lo, up) = dual_norm_pair(exps, &tb, bank)?;
                    bl = bl.max(lo);
                    bu = bu.max(up);
                }
                2 => {
                    let lo = composed_bank
                        .iter()
                        .map(|t| pair_fields(&moving_diff, t).abs())
                        .fold(0.0, f64::max);
                    fl = fl.max(lo);
                    fu = fu.max(bound * hoelder_upper(exps, &moving_diff, 1.0 + C_EMB));
                    let lo = moving_bank
                        .iter()
                        .map(|t| pair_fields(fixed_diff, t).abs())
                        .fold(0.0, f64::max);
                    bl = bl.max(lo);
                    // A unit test function differs from its truncation on a
                    // set of measure at most (C3/n)^p; the gradient collar
                    // widens that by one neighbor per axis.
                    let small = (C3 / n_level).powf(exps.p);
                    bu = bu.max(
                        (1.0 + bound)
                            * (restricted_split_norm(&fixed_diff.q, pp, qp, (1.0 + dim) * small)
                                + (1.0 + C_EMB)
                                    * restricted_split_norm(&fixed_diff.g, psp, qp, small)),
                    );
                }
                3 => {
                    let lo = composed_bank
                        .iter()
                        .map(|t| pair_fields(&moving_diff, t).abs())
                        .fold(0.0, f64::max);
                    fl = fl.max(lo);
                    fu = fu.max(bound * hoelder_upper(exps, &moving_diff, 1.0 + C_EMB));
                    let lo = moving_bank
                        .iter()
                        .map(|t| pair_fields(fixed_diff, t).abs())
                        .fold(0.0, f64::max);
                    bl = bl.max(lo);
                    // The removed small part of a unit test function is
                    // uniformly of size C0/n together with its gradient.
                    bu = bu.max(
                        (lp_norm(&fixed_diff.q, 1.0) + lp_norm(&fixed_diff.g, 1.0)) * C0
                            / n_level,
                    );
                }
                _ => unreachable!("stage validated above"),
            }
        }
        forward_lower.push(fl);
        forward_upper.push(fu);
        backward_lower.push(bl);
        backward_upper.push(bu);
    }

    Ok(CompatibilityReport {
        stage,
        m_level,
        n_levels: n_levels.to_vec(),
        forward_lower,
        forward_upper,
        backward_lower,
        backward_upper,
    })
}

/// Energy-side compatibility: identical drama, but the truncation stages
/// act pointwise on the scalar integrand and the distance is an exact L^1
/// norm, so lower and upper coincide.
pub fn energy_compatibility_residual(
    density: &EnergyDensity,
    exps: &ExponentConfig,
    stage: usize,
    m_level: f64,
    n_levels: &[f64],
    pairs: &[(GridFunction, GridFunction)],
    params: TruncationParams,
) -> Result<CompatibilityReport, OperatorError> {
    let fam = stage_family(stage)?;
    if pairs.is_empty() {
        return Err(OperatorError::EmptyCorpus);
    }
    let with_w2 = stage != 3;

    let base: Vec<(GridFunction, GridFunction)> = pairs
        .iter()
        .map(|(v, w)| {
            let wv = energy_field_part(density, exps, v, with_w2)?;
            let near = v.add(&apply_family(w, fam, m_level, params));
            let wnear = energy_field_part(density, exps, &near, with_w2)?;
            Ok((wv, wnear))
        })
        .collect::<Result<_, OperatorError>>()?;

    let mut forward = Vec::new();
    let mut backward = Vec::new();
    for &n_level in n_levels {
        let mut f: f64 = 0.0;
        let mut b: f64 = 0.0;
        for (pair_idx, (v, w)) in pairs.iter().enumerate() {
            let (wv, wnear) = &base[pair_idx];
            let tail = w.sub(&apply_family(w, fam, n_level, params));
            let wfar = energy_field_part(density, exps, &v.add(&tail), with_w2)?;
            let fwd = outer_truncate_integrand(stage, m_level, &wfar)?
                .sub(&outer_truncate_integrand(stage, m_level, wv)?);
            f = f.max(lp_norm(&fwd, 1.0));
            let keep_near = wnear.sub(&outer_truncate_integrand(stage, n_level, wnear)?);
            let keep_v = wv.sub(&outer_truncate_integrand(stage, n_level, wv)?);
            b = b.max(lp_norm(&keep_near.sub(&keep_v), 1.0));
        }
        forward.push(f);
        backward.push(b);
    }

    Ok(CompatibilityReport {
        stage,
        m_level,
        n_levels: n_levels.to_vec(),
        forward_lower: forward.clone(),
        forward_upper: forward,
        backward_lower: backward.clone(),
        backward_upper: backward,
    })
}

// ---------------------------------------------------------------------------
// energy densities

pub type DensityFn = Arc<dyn Fn(&CoefficientInput) -> f64 + Send + Sync>;

/// An integrand W = W1 + W2 with the constants claimed for its bounds:
/// W1 under the tilde-H envelope with Holder exponent `alpha` in (0, 1],
/// W2 under the tilde-J envelope with decay exponent `rho` in (0, 1].
#[derive(Clone)]
pub struct EnergyDensity {
    pub label: String,
    pub c: f64,
    pub alpha: f64,
    pub rho: f64,
    w1_fn: DensityFn,
    w2_fn: DensityFn,
}

impl fmt::Debug for EnergyDensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EnergyDensity")
            .field("label", &self.label)
            .field("c", &self.c)
            .field("alpha", &self.alpha)
            .field("rho", &self.rho)
            .finish()
    }
}

impl EnergyDensity {
    /// W1 = |xi|^p/p + |xi|^q/q plus the decaying bulk term
    /// W2 = h_inf(x) (|mu| + |xi|)^q.
    pub fn double_power(exps: &ExponentConfig) -> Self {
        let (p, q) = (exps.p, exps.q);
        let w1_fn: DensityFn = Arc::new(move |inp| {
            let t = slice_norm(inp.xi);
            t.powf(p) / p + t.powf(q) / q
        });
        let w2_fn: DensityFn = Arc::new(move |inp| {
            inp.h_inf * (slice_norm(inp.mu) + slice_norm(inp.xi)).powf(q)
        });
        EnergyDensity { label: "double-power".into(), c: 1.3, alpha: 1.0, rho: 1.0, w1_fn, w2_fn }
    }

    /// User-supplied integrand; exponents must lie in (0, 1].
    pub fn custom(
        label: &str,
        c: f64,
        alpha: f64,
        rho: f64,
        w1_fn: DensityFn,
        w2_fn: DensityFn,
    ) -> Result<Self, OperatorError> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(OperatorError::BadParameter {
                name: "alpha",
                value: alpha,
                require: "0 < alpha <= 1",
            });
        }
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(OperatorError::BadParameter {
                name: "rho",
                value: rho,
                require: "0 < rho <= 1",
            });
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(OperatorError::BadParameter {
                name: "c",
                value: c,
                require: "a positive finite constant",
            });
        }
        Ok(EnergyDensity { label: label.into(), c, alpha, rho, w1_fn, w2_fn })
    }
}

/// The scalar integrand x -> W(x, u(x), Du(x)).
pub fn energy_field(
    density: &EnergyDensity,
    exps: &ExponentConfig,
    u: &GridFunction,
) -> Result<GridFunction, OperatorError> {
    energy_field_part(density, exps, u, true)
}

fn energy_field_part(
    density: &EnergyDensity,
    exps: &ExponentConfig,
    u: &GridFunction,
    with_w2: bool,
) -> Result<GridFunction, OperatorError> {
    let dom = u.domain().clone();
    assert!(
        exps.h_q.domain().as_ref() == dom.as_ref(),
        "weights and data must share one grid"
    );
    let grad = u.gradient();
    let mut values = vec![0.0; dom.cells()];
    values.par_iter_mut().enumerate().for_each(|(c, out)| {
        if dom.is_masked(c) {
            let inp = coefficient_input(exps, &dom, u, grad, c);
            *out = (density.w1_fn)(&inp) + if with_w2 { (density.w2_fn)(&inp) } else { 0.0 };
        }
    });
    if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
        return Err(OperatorError::NonFiniteField { what: "the energy density", cell: bad });
    }
    Ok(GridFunction::from_values(dom, 1, values).expect("values checked finite"))
}

fn integral(u: &GridFunction) -> f64 {
    let dom = u.domain();
    let mut sum = 0.0;
    for c in 0..dom.cells() {
        if dom.is_masked(c) {
            sum += u.cell_values(c).iter().sum::<f64>();
        }
    }
    sum * dom.cell_volume()
}

/// E(u) = int W(x, u, Du) dx.
pub fn energy(
    density: &EnergyDensity,
    exps: &ExponentConfig,
    u: &GridFunction,
) -> Result<f64, OperatorError> {
    Ok(integral(&energy_field(density, exps, u)?))
}

/// Randomized audit of the density bounds, mirroring `envelope_check`.
pub fn density_envelope_check(
    density: &EnergyDensity,
    exps: &ExponentConfig,
    components: usize,
    samples: usize,
    seed: u64,
) -> EnvelopeReport {
    let dom = exps.h_q.domain().clone();
    let dim = dom.dim();
    let masked: Vec<usize> = (0..dom.cells()).filter(|&c| dom.is_masked(c)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ps_over_p = exps.p_star / exps.p;

    let eval = |point: &SamplePoint, with: usize| -> f64 {
        let inp = CoefficientInput {
            cell: point.cell,
            x: dom.center(point.cell),
            h_q: exps.h_q.value(point.cell, 0),
            h_p: exps.h_p.value(point.cell, 0),
            h_pstar: exps.h_pstar.value(point.cell, 0),
            h_inf: exps.h_inf.value(point.cell, 0),
            mu: &point.mu,
            xi: &point.xi,
        };
        match with {
            1 => (density.w1_fn)(&inp),
            _ => (density.w2_fn)(&inp),
        }
    };

    let mut worst = vec![(0.0f64, [0.0; 4], 0usize); 3];
    for _ in 0..samples {
        let a = sample_point(&mut rng, &masked, components, dim);
        let b = SamplePoint { cell: a.cell, ..sample_point(&mut rng, &masked, components, dim) };
        let (sa, ta) = (slice_norm(&a.mu), slice_norm(&a.xi));
        let (sb, tb) = (slice_norm(&b.mu), slice_norm(&b.xi));

        let h0 = GrowthEnvelope { kind: EnvelopeKind::HTildeAlpha, c: density.c, exponent: 0.0 };
        let r = ratio(eval(&a, 1).abs(), h0.eval(exps, a.cell, sa, ta));
        if r > worst[0].0 {
            worst[0] = (r, [sa, ta, 0.0, 0.0], a.cell);
        }
        let j = GrowthEnvelope { kind: EnvelopeKind::JTildeRho, c: density.c, exponent: density.rho };
        let r = ratio(eval(&a, 2).abs(), j.eval(exps, a.cell, sa, ta));
        if r > worst[1].0 {
            worst[1] = (r, [sa, ta, 0.0, 0.0], a.cell);
        }
        let ha =
            GrowthEnvelope { kind: EnvelopeKind::HTildeAlpha, c: density.c, exponent: density.alpha };
        let dmu = a.mu.iter().zip(&b.mu).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let dxi = a.xi.iter().zip(&b.xi).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let den = ha.eval(exps, a.cell, sa + sb, ta + tb)
            * (dmu + dmu.powf(ps_over_p) + dxi).powf(density.alpha);
        let r = ratio((eval(&a, 1) - eval(&b, 1)).abs(), den);
        if r > worst[2].0 {
            worst[2] = (r, [sa, ta, sb, tb], a.cell);
        }
    }

    let labels = ["bulk growth", "decaying bulk growth", "bulk continuity"];
    let checks: Vec<EnvelopeCheck> = labels
        .iter()
        .zip(&worst)
        .map(|(label, &(r, witness, cell))| EnvelopeCheck {
            label: (*label).into(),
            worst_ratio: r,
            witness,
            witness_cell: cell,
            pass: r <= 1.0 + 1e-9,
        })
        .collect();
    let pass = checks.iter().all(|c| c.pass);
    EnvelopeReport { family: density.label.clone(), samples, checks, pass }
}

// ---------------------------------------------------------------------------
// equiintegrability of the decaying parts

/// Tail mass beyond each radius and worst-set mass within each measure
/// budget, for the decaying source over a bounded corpus. Both curves must
/// fall for the source to qualify as equiintegrable at desk scale.
pub fn g2_equiintegrability(
    family: &CoefficientFamily,
    exps: &ExponentConfig,
    corpus: &[GridFunction],
    radii: &[f64],
    budgets: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), OperatorError> {
    if corpus.is_empty() {
        return Err(OperatorError::EmptyCorpus);
    }
    let fields: Vec<GridFunction> = corpus
        .iter()
        .map(|u| nemytskii(family, exps, u, FamilyPart::G2))
        .collect::<Result<_, _>>()?;
    let (psp, qp) = (conjugate(exps.p_star), conjugate(exps.q));
    let tails = radii
        .iter()
        .map(|&radius| {
            fields
                .iter()
                .map(|g| {
                    let dom = g.domain().clone();
                    split_norm_where(g, psp, qp, |c| dom.center_abs(c) >= radius)
                })
                .fold(0.0, f64::max)
        })
        .collect();
    let smalls = budgets
        .iter()
        .map(|&b| fields.iter().map(|g| restricted_split_norm(g, psp, qp, b)).fold(0.0, f64::max))
        .collect();
    Ok((tails, smalls))
}

/// Same two curves for the decaying bulk term of an energy density, in L^1.
pub fn density_equiintegrability(
    density: &EnergyDensity,
    exps: &ExponentConfig,
    corpus: &[GridFunction],
    radii: &[f64],
    budgets: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), OperatorError> {
    if corpus.is_empty() {
        return Err(OperatorError::EmptyCorpus);
    }
    let fields: Vec<GridFunction> = corpus
        .iter()
        .map(|u| {
            let full = energy_field_part(density, exps, u, true)?;
            let principal = energy_field_part(density, exps, u, false)?;
            Ok(full.sub(&principal))
        })
        .collect::<Result<_, OperatorError>>()?;
    let tails = radii
        .iter()
        .map(|&radius| {
            fields
                .iter()
                .map(|g| {
                    let dom = g.domain().clone();
                    lp_norm_where(g, 1.0, |c| dom.center_abs(c) >= radius)
                })
                .fold(0.0, f64::max)
        })
        .collect();
    let smalls = budgets
        .iter()
        .map(|&b| fields.iter().map(|g| worst_set_l1(g, b)).fold(0.0, f64::max))
        .collect();
    Ok((tails, smalls))
}

fn split_norm_where(u: &GridFunction, r: f64, s: f64, keep: impl Fn(usize) -> bool) -> f64 {
    let dom = u.domain();
    let hn = dom.cell_volume();
    let mut big = 0.0;
    let mut small = 0.0;
    for c in 0..dom.cells() {
        if dom.is_masked(c) && keep(c) {
            let mag = u.magnitude(c);
            if mag > 1.0 {
                big += mag.powf(r);
            } else {
                small += mag.powf(s);
            }
        }
    }
    (big * hn).powf(1.0 / r) + (small * hn).powf(1.0 / s)
}

// ---------------------------------------------------------------------------
// orthogonality residuals

/// Per-position brackets of the orthogonality residual
/// [T(u_k(n)) - T(U0_n)] + sum_i [T(0) - T(Ui_n)]: the whole combination
/// and the five summands separately. For the operator the brackets are
/// dual-norm surrogates; for the energy they are exact L^1 norms and the
/// scalar column carries the plain energy-difference magnitude. Positions
/// are labeled by the selected 1-based source index k(n), which is also
/// the rung every truncation level of that position is pegged to.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualReport {
    pub label: String,
    pub positions: Vec<usize>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub summands: [Vec<f64>; 5],
    pub scalar: Option<Vec<f64>>,
    /// Residual of the zero state under the deepest truncation; pinned to
    /// zero for every shipped family.
    pub h_term: f64,
}

impl ResidualReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("position,lower,upper,summand0,summand1,summand2,summand3,summand4");
        if self.scalar.is_some() {
            s.push_str(",scalar");
        }
        s.push('\n');
        for (row, &n) in self.positions.iter().enumerate() {
            s.push_str(&format!("{},{},{}", n, self.lower[row], self.upper[row]));
            for part in &self.summands {
                s.push_str(&format!(",{}", part[row]));
            }
            if let Some(sc) = &self.scalar {
                s.push_str(&format!(",{}", sc[row]));
            }
            s.push('\n');
        }
        s
    }
}

fn assert_rest_state_vanishes(scale: f64) {
    assert!(
        scale <= 1e-9,
        "the residual harness assumes a vanishing rest state; families whose \
         zero-input fields are nonzero ({scale:.3e}) would leave a stationary term"
    );
}

/// Orthogonality residual of the operator across a decomposition, bracketed
/// per output position, with a bank of lattice bumps enriched by the
/// decomposition's own directions.
pub fn orthogonality_residual_f(
    dec: &Decomposition,
    family: &CoefficientFamily,
) -> Result<ResidualReport, OperatorError> {
    let exps = &dec.exps;
    let m = dec.input[0].components();
    let zero = GridFunction::zeros(dec.input[0].domain().clone(), m);
    let f0 = operator_fields(family, exps, &zero)?;
    let h_term = hoelder_upper(exps, &f0, 1.0 + C_EMB);
    assert_rest_state_vanishes(h_term);
    let bank = TestBank::lattice(exps, m).with_decomposition(dec);

    struct Row {
        lower: f64,
        upper: f64,
        summands: [f64; 5],
    }
    let rows: Vec<Row> = (0..dec.len())
        .into_par_iter()
        .map(|n| -> Result<Row, OperatorError> {
            let fu = operator_fields(family, exps, &dec.input[dec.composite[n]])?;
            let fc: Vec<OperatorFields> = dec
                .components
                .iter()
                .map(|comp| operator_fields(family, exps, &comp[n]))
                .collect::<Result<_, _>>()?;
            let mut combo: Vec<(f64, &OperatorFields)> = vec![(1.0, &fu), (4.0, &f0)];
            combo.extend(fc.iter().map(|f| (-1.0, f)));
            let (lower, upper) = dual_norm_pair(exps, &combine_fields(&combo), &bank)?;
            let mut summands = [0.0; 5];
            summands[0] =
                hoelder_upper(exps, &combine_fields(&[(1.0, &fu), (-1.0, &fc[0])]), bank.value_factor());
            for i in 1..5 {
                summands[i] = hoelder_upper(
                    exps,
                    &combine_fields(&[(1.0, &f0), (-1.0, &fc[i])]),
                    bank.value_factor(),
                );
            }
            Ok(Row { lower, upper, summands })
        })
        .collect::<Result<_, _>>()?;

    let mut report = ResidualReport {
        label: family.label.clone(),
        positions: dec.composite.iter().map(|&k| k + 1).collect(),
        lower: Vec::new(),
        upper: Vec::new(),
        summands: Default::default(),
        scalar: None,
        h_term,
    };
    for row in rows {
        report.lower.push(row.lower);
        report.upper.push(row.upper);
        for i in 0..5 {
            report.summands[i].push(row.summands[i]);
        }
    }
    Ok(report)
}

/// Orthogonality residual of the energy across a decomposition: exact L^1
/// distance of the integrand combination per position, plus the scalar
/// energy difference it dominates.
pub fn orthogonality_residual_e(
    dec: &Decomposition,
    density: &EnergyDensity,
) -> Result<ResidualReport, OperatorError> {
    let exps = &dec.exps;
    let m = dec.input[0].components();
    let zero = GridFunction::zeros(dec.input[0].domain().clone(), m);
    let w0 = energy_field(density, exps, &zero)?;
    let h_term = lp_norm(&w0, 1.0);
    assert_rest_state_vanishes(h_term);

    struct Row {
        norm: f64,
        summands: [f64; 5],
        scalar: f64,
    }
    let rows: Vec<Row> = (0..dec.len())
        .into_par_iter()
        .map(|n| -> Result<Row, OperatorError> {
            let wu = energy_field(density, exps, &dec.input[dec.composite[n]])?;
            let wc: Vec<GridFunction> = dec
                .components
                .iter()
                .map(|comp| energy_field(density, exps, &comp[n]))
                .collect::<Result<_, _>>()?;
            let mut combo: Vec<(f64, &GridFunction)> = vec![(1.0, &wu), (4.0, &w0)];
            combo.extend(wc.iter().map(|w| (-1.0, w)));
            let diff = GridFunction::linear_combination(&combo);
            let mut summands = [0.0; 5];
            summands[0] = lp_norm(&GridFunction::linear_combination(&[(1.0, &wu), (-1.0, &wc[0])]), 1.0);
            for i in 1..5 {
                summands[i] =
                    lp_norm(&GridFunction::linear_combination(&[(1.0, &w0), (-1.0, &wc[i])]), 1.0);
            }
            Ok(Row { norm: lp_norm(&diff, 1.0), summands, scalar: integral(&diff).abs() })
        })
        .collect::<Result<_, _>>()?;

    let mut report = ResidualReport {
        label: density.label.clone(),
        positions: dec.composite.iter().map(|&k| k + 1).collect(),
        lower: Vec::new(),
        upper: Vec::new(),
        summands: Default::default(),
        scalar: Some(Vec::new()),
        h_term,
    };
    for row in rows {
        report.lower.push(row.norm);
        report.upper.push(row.norm);
        for i in 0..5 {
            report.summands[i].push(row.summands[i]);
        }
        report.scalar.as_mut().expect("set above").push(row.scalar);
    }
    Ok(report)
}
