//! Canonical test sequences: each generator produces one pure compactness
//! defect (concentration, escape to infinity, spreading, vanishing), plus
//! the piecewise-linear sequence witnessing that gradient truncation fails
//! in W^{1,1}, and seeded random smooth functions for property scans.

use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::grid::{lp_norm, sobolev_norm, GridDomain, GridError, GridFunction};
use crate::truncation::nu;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("support of term {n} needs the box to reach {needed} along axis {axis}, but it ends at {have}")]
    SupportEscapesBox { n: usize, axis: usize, needed: f64, have: f64 },
    #[error("generated sequence is not norm-bounded: term {n} has norm {norm}, reference {reference}")]
    Unbounded { n: usize, norm: f64, reference: f64 },
    #[error("{0}")]
    BadParams(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Radial plateau profile of unit support radius: 1 for d ≤ 1/2, smooth
/// descent to 0 at d = 1.
pub fn bump(d: f64) -> f64 {
    nu(2.0 * d - 1.0)
}

/// Plateau of half-width `a` with a smooth edge of width `e`.
fn edged(d: f64, a: f64, e: f64) -> f64 {
    nu((d - a) / e)
}

fn check_support(
    dom: &GridDomain,
    n: usize,
    center: &[f64],
    radius: f64,
) -> Result<(), CorpusError> {
    for axis in 0..dom.dim() {
        let lo = dom.origin()[axis] + dom.spacing();
        let hi = dom.origin()[axis] + (dom.dims()[axis] as f64 - 1.0) * dom.spacing();
        if center[axis] - radius < lo {
            return Err(CorpusError::SupportEscapesBox {
                n,
                axis,
                needed: center[axis] - radius,
                have: lo,
            });
        }
        if center[axis] + radius > hi {
            return Err(CorpusError::SupportEscapesBox {
                n,
                axis,
                needed: center[axis] + radius,
                have: hi,
            });
        }
    }
    Ok(())
}

fn check_bounded(seq: &[GridFunction], norm: impl Fn(&GridFunction) -> f64) -> Result<(), CorpusError> {
    let norms: Vec<f64> = seq.iter().map(&norm).collect();
    let reference = norms.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    for (n, &v) in norms.iter().enumerate() {
        if !v.is_finite() {
            return Err(CorpusError::Unbounded { n: n + 1, norm: v, reference });
        }
    }
    Ok(())
}

/// Concentrating bubbles u_n(x) = n^{(N−p)/p} φ(n(x−c)/w): the W^{1,p}
/// gradient mass is scale-invariant and piles onto shrinking balls.
#[derive(Debug, Clone)]
pub struct BubbleSpec {
    pub center: Vec<f64>,
    pub width: f64,
    pub p: f64,
}

pub fn bubble_sequence(
    dom: &Arc<GridDomain>,
    count: usize,
    spec: &BubbleSpec,
) -> Result<Vec<GridFunction>, CorpusError> {
    let nd = dom.dim() as f64;
    let mut out = Vec::with_capacity(count);
    for n in 1..=count {
        let s = n as f64;
        let amp = s.powf((nd - spec.p) / spec.p);
        check_support(dom, n, &spec.center, spec.width / s)?;
        let center = spec.center.clone();
        let width = spec.width;
        out.push(GridFunction::from_fn(dom.clone(), 1, move |x, val| {
            let d = dist(x, &center);
            val[0] = amp * bump(s * d / width);
        })?);
    }
    check_bounded(&out, |u| sobolev_norm(u, spec.p))?;
    Ok(out)
}

/// Fixed bump escaping toward the box edge: u_n(x) = φ((x−y_n)/w).
#[derive(Debug, Clone)]
pub struct TravelingSpec {
    pub width: f64,
    pub start: Vec<f64>,
    pub step: Vec<f64>,
}

pub fn traveling_bump_sequence(
    dom: &Arc<GridDomain>,
    count: usize,
    spec: &TravelingSpec,
) -> Result<Vec<GridFunction>, CorpusError> {
    let mut out = Vec::with_capacity(count);
    for n in 1..=count {
        let y: Vec<f64> = spec
            .start
            .iter()
            .zip(&spec.step)
            .map(|(s, d)| s + d * (n as f64 - 1.0))
            .collect();
        check_support(dom, n, &y, spec.width)?;
        let width = spec.width;
        out.push(GridFunction::from_fn(dom.clone(), 1, move |x, val| {
            val[0] = bump(dist(x, &y) / width);
        })?);
    }
    Ok(out)
}

/// Traveling bump with decaying amplitude n^{−amp_exp} and shrinking width
/// w·n^{−width_exp}: vanishing in the local-mass sense while never tight.
#[derive(Debug, Clone)]
pub struct VanisherSpec {
    pub amp_exp: f64,
    pub width_exp: f64,
    pub width: f64,
    pub start: Vec<f64>,
    pub step: Vec<f64>,
}

pub fn vanisher_sequence(
    dom: &Arc<GridDomain>,
    count: usize,
    spec: &VanisherSpec,
) -> Result<Vec<GridFunction>, CorpusError> {
    let mut out = Vec::with_capacity(count);
    for n in 1..=count {
        let s = n as f64;
        let amp = s.powf(-spec.amp_exp);
        let width = spec.width * s.powf(-spec.width_exp);
        let y: Vec<f64> = spec
            .start
            .iter()
            .zip(&spec.step)
            .map(|(a, d)| a + d * (s - 1.0))
            .collect();
        check_support(dom, n, &y, width)?;
        out.push(GridFunction::from_fn(dom.clone(), 1, move |x, val| {
            val[0] = amp * bump(dist(x, &y) / width);
        })?);
    }
    Ok(out)
}

/// Spreading plateaus v_n = n^{−N/r}·(smoothed χ of B_{scale·n}): the level
/// drops while the support grows, keeping the L^r mass of order one.
#[derive(Debug, Clone)]
pub struct SpreaderBallSpec {
    /// Exponent r of the norm the spreader preserves.
    pub r: f64,
    /// Ball radius per index: ρ_n = radius_scale·n.
    pub radius_scale: f64,
    /// Physical width of the smoothed rim.
    pub edge: f64,
}

pub fn spreader_ball_sequence(
    dom: &Arc<GridDomain>,
    count: usize,
    spec: &SpreaderBallSpec,
) -> Result<Vec<GridFunction>, CorpusError> {
    if spec.edge < 2.0 * dom.spacing() {
        return Err(CorpusError::BadParams(format!(
            "spreader edge {} is below two cells ({})",
            spec.edge,
            2.0 * dom.spacing()
        )));
    }
    let nd = dom.dim() as f64;
    let origin = vec![0.0; dom.dim()];
    let mut out = Vec::with_capacity(count);
    for n in 1..=count {
        let s = n as f64;
        let amp = s.powf(-nd / spec.r);
        let rho = spec.radius_scale * s;
        check_support(dom, n, &origin, rho)?;
        let plateau = (rho - spec.edge).max(0.0);
        let edge = spec.edge;
        out.push(GridFunction::from_fn(dom.clone(), 1, move |x, val| {
            val[0] = amp * edged(norm2(x), plateau, edge);
        })?);
    }
    check_bounded(&out, |u| lp_norm(u, spec.r))?;
    Ok(out)
}

/// Thin slabs of constant measure: sharp indicators of
/// {|x₁| ≤ ℓ₀·2^{n−1}} ∩ {|x_j| ≤ t₀·2^{1−n}}, grid-aligned so the
/// discrete measure is exactly constant along the sequence. Vanishing (the
/// slab thins out of every unit ball) but the L^r norm never moves; the
/// gradient norms blow up, which is the point of the counterexample.
#[derive(Debug, Clone)]
pub struct SpreaderSlabSpec {
    pub length0: f64,
    pub thickness0: f64,
}

pub fn spreader_slab_sequence(
    dom: &Arc<GridDomain>,
    count: usize,
    spec: &SpreaderSlabSpec,
) -> Result<Vec<GridFunction>, CorpusError> {
    if dom.dim() < 2 {
        return Err(CorpusError::BadParams(
            "slab spreaders need at least two dimensions".into(),
        ));
    }
    let h = dom.spacing();
    let mut out = Vec::with_capacity(count);
    for n in 1..=count {
        let len = spec.length0 * 2f64.powi(n as i32 - 1);
        let thick = spec.thickness0 * 2f64.powi(1 - n as i32);
        for (v, name) in [(len, "length"), (thick, "thickness")] {
            let cells = v / h;
            if (cells - cells.round()).abs() > 1e-9 || cells < 1.0 {
                return Err(CorpusError::BadParams(format!(
                    "slab {name} {v} is not a positive whole number of cells at h={h}"
                )));
            }
        }
        let mut half = vec![thick; dom.dim()];
        half[0] = len;
        check_support(dom, n, &vec![0.0; dom.dim()], half.iter().cloned().fold(0.0, f64::max))?;
        out.push(GridFunction::from_fn(dom.clone(), 1, move |x, val| {
            let inside = x.iter().enumerate().all(|(a, &v)| v.abs() < half[a]);
            val[0] = if inside { 1.0 } else { 0.0 };
        })?);
    }
    check_bounded(&out, |u| lp_norm(u, 2.0))?;
    Ok(out)
}

/// The zero-trace piecewise-linear sequence on (−1,1) with a slope-(n−1)
/// middle segment: bounded in W^{1,1}, and the height jump of 2 across the
/// shrinking middle makes any gradient truncation concentrate.
pub fn w11_counterexample(dom: &Arc<GridDomain>, n: usize) -> Result<GridFunction, CorpusError> {
    if dom.dim() != 1 {
        return Err(CorpusError::BadParams("the W^{1,1} sequence is one-dimensional".into()));
    }
    if n < 2 {
        return Err(CorpusError::BadParams("the W^{1,1} sequence needs n >= 2".into()));
    }
    let s = n as f64;
    Ok(GridFunction::from_fn(dom.clone(), 1, move |x, val| {
        let t = x[0];
        val[0] = if t <= -1.0 || t >= 1.0 {
            0.0
        } else if t < -1.0 / s {
            -t - 1.0
        } else if t <= 1.0 / s {
            (s - 1.0) * t
        } else {
            -t + 1.0
        };
    })?)
}

pub fn w11_sequence(
    dom: &Arc<GridDomain>,
    ns: &[usize],
) -> Result<Vec<GridFunction>, CorpusError> {
    let out: Result<Vec<_>, _> = ns.iter().map(|&n| w11_counterexample(dom, n)).collect();
    let out = out?;
    check_bounded(&out, |u| sobolev_norm(u, 1.0))?;
    Ok(out)
}

/// Sum of random plateau bumps, all supported strictly inside the box.
/// Widths stay above `min_width` so gradients are resolution-independent.
pub fn random_smooth(
    dom: &Arc<GridDomain>,
    m: usize,
    bumps: usize,
    max_amp: f64,
    min_width: f64,
    rng: &mut impl Rng,
) -> GridFunction {
    let nd = dom.dim();
    let h = dom.spacing();
    let mut terms: Vec<(f64, Vec<f64>, f64, usize)> = Vec::with_capacity(bumps * m);
    for comp in 0..m {
        for _ in 0..bumps {
            let amp = rng.gen_range(-max_amp..max_amp);
            let width = rng.gen_range(min_width..4.0 * min_width);
            let mut center = Vec::with_capacity(nd);
            for a in 0..nd {
                let lo = dom.origin()[a] + h + width;
                let hi = dom.origin()[a] + (dom.dims()[a] as f64 - 1.0) * h - width;
                center.push(if lo < hi { rng.gen_range(lo..hi) } else { 0.5 * (lo + hi) });
            }
            terms.push((amp, center, width, comp));
        }
    }
    GridFunction::from_fn(dom.clone(), m, move |x, val| {
        for v in val.iter_mut() {
            *v = 0.0;
        }
        for (amp, center, width, comp) in &terms {
            val[*comp] += amp * bump(dist(x, center) / width);
        }
    })
    .expect("bump sums are finite and vanish near the boundary")
}

/// Pointwise sum of three pure-defect sequences: a concentrating bubble, an
/// escaping bump, and a spreading plateau. The standard pathological corpus
/// for the decomposition and orthogonality harnesses.
pub fn composite_sequence(
    dom: &Arc<GridDomain>,
    count: usize,
    bubble: &BubbleSpec,
    traveling: &TravelingSpec,
    spreader: &SpreaderBallSpec,
) -> Result<Vec<GridFunction>, CorpusError> {
    let b = bubble_sequence(dom, count, bubble)?;
    let t = traveling_bump_sequence(dom, count, traveling)?;
    let s = spreader_ball_sequence(dom, count, spreader)?;
    Ok(b.iter()
        .zip(&t)
        .zip(&s)
        .map(|((b, t), s)| b.add(t).add(s))
        .collect())
}

fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}
