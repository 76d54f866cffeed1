//! The three truncation-operator families and their scalar primitives.
//!
//! Family "outer" multiplies by a smooth radial cutoff and kills far-field
//! tails. Family "above" truncates gradients: each component is replaced by
//! a boundary-preserving Lipschitz function that agrees with it on a good
//! set where the maximal function of |u|+|∇u| is below the level. Family
//! "below" subtracts the level-1/n gradient truncation, keeping only the
//! steep part of a function.
//!
//! The Lipschitz truncation pipeline: the good set R^λ collects the box
//! cells where M(|u|+|∇u|) ≤ λ; a symmetric McShane extension with slope
//! K = C̄λ rebuilds the function everywhere from its good values (the
//! average of the inf- and sup-extensions keeps |ū| ≤ λ globally); a clamp
//! to ±C̄λ·c_Ω·dist(x, ∁Ω) forces the boundary values to vanish fast enough
//! that the result stays in the zero-trace class, and the cells surviving
//! the clamp filter form the reported good set R̂^λ.

use std::sync::Arc;

use thiserror::Error;

use crate::grid::{GridDomain, GridFunction};
use crate::maximal::{maximal_full, RadiusSchedule};

#[derive(Debug, Error)]
pub enum TruncationError {
    #[error("tail difference requires j < n, got j={j}, n={n}")]
    TailIndices { j: f64, n: f64 },
    #[error("scalar truncation requires a single component, got {m}")]
    NotScalar { m: usize },
}

/// Contract constants of the smooth step: |ν′| ≤ 2 and |ν″| ≤ 16.
pub const NU_SLOPE_BOUND: f64 = 2.0;
pub const NU_CURVATURE_BOUND: f64 = 16.0;

/// Quintic smoothstep profile: 1 on (-∞,0], 0 on [1,∞), monotone between,
/// with |ν′| ≤ 15/8 and |ν″| ≤ 10/√3 (inside the contract bounds 2 and 16).
pub fn nu(r: f64) -> f64 {
    if r <= 0.0 {
        1.0
    } else if r >= 1.0 {
        0.0
    } else {
        1.0 - r * r * r * (10.0 - 15.0 * r + 6.0 * r * r)
    }
}

/// Scalar clamp of t into [-λ, λ].
pub fn eta(lambda: f64, t: f64) -> f64 {
    assert!(lambda > 0.0, "clamp level must be positive");
    t.clamp(-lambda, lambda)
}

/// Indicator of the open ball B_radius(0), sampled at cell centers.
pub fn ball_indicator(dom: &Arc<GridDomain>, radius: f64) -> GridFunction {
    GridFunction::from_fn(dom.clone(), 1, |x, out| {
        let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        out[0] = if r < radius { 1.0 } else { 0.0 };
    })
    .expect("indicator values are finite")
}

/// Outer cutoff φ⁽¹⁾: pointwise product with ν(|x|−level). The result is
/// supported in B_{level+1}(0) and the map is linear in u.
pub fn cutoff_outer(u: &GridFunction, level: f64) -> GridFunction {
    assert!(level > 0.0, "cutoff level must be positive");
    let dom = u.domain();
    let m = u.components();
    let mut values = vec![0.0; dom.cells() * m];
    for c in 0..dom.cells() {
        if dom.is_masked(c) {
            let f = nu(dom.center_abs(c) - level);
            for k in 0..m {
                values[c * m + k] = f * u.value(c, k);
            }
        }
    }
    GridFunction::from_values(dom.clone(), m, values).expect("cutoff preserves validity")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruncationFamily {
    Outer,
    Above,
    Below,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct TruncationParams {
    /// Extension slope factor: the McShane slope is K = c_bar·λ and the
    /// boundary clamp is c_bar·λ·c_Ω·dist.
    pub c_bar: f64,
    /// Growth ratio of the maximal-function radius schedule.
    pub schedule_ratio: f64,
}

impl Default for TruncationParams {
    fn default() -> Self {
        Self { c_bar: 2.0, schedule_ratio: 1.5 }
    }
}

/// Output of a gradient truncation, with measured audit quantities.
#[derive(Debug, Clone)]
pub struct TruncationResult {
    pub truncated: GridFunction,
    /// Box-indexed good set R̂ (family below reports R̂ of the inner 1/n
    /// truncation). Always a subset of the domain mask.
    pub good_set: Vec<bool>,
    pub level: f64,
    pub family: TruncationFamily,
    /// sup over Ω of (|out|+|∇out|)/λ where `out` is the part controlled by
    /// the level: the truncated function for family above, the removed part
    /// u − φ⁽³⁾(u) for family below (λ = 1/level there).
    pub sup_ratio: f64,
    /// |Ω \ R̂|.
    pub bad_measure: f64,
    /// max over the good set of |truncated − u| (above) or |truncated|
    /// (below); exactly 0 when the discrete Lipschitz property holds.
    pub agreement_error: f64,
}

impl TruncationResult {
    pub fn good_measure(&self) -> f64 {
        let hn = self.truncated.domain().cell_volume();
        self.good_set.iter().filter(|&&g| g).count() as f64 * hn
    }
}

struct ScalarPlan {
    /// Component values over the full box (zero off mask).
    u_box: Vec<f64>,
    /// M(|u_i| + |∇u_i|) over the full box.
    m_v: Vec<f64>,
}

/// Per-function state for gradient truncation: the maximal functions of
/// |u_i|+|∇u_i| are computed once and reused across levels.
pub struct GradientTruncator {
    u: GridFunction,
    plans: Vec<ScalarPlan>,
    params: TruncationParams,
}

impl GradientTruncator {
    pub fn new(u: &GridFunction, params: TruncationParams) -> Self {
        let dom = u.domain();
        let sched = RadiusSchedule::geometric(dom, params.schedule_ratio);
        let grad = u.gradient();
        let n = dom.dim();
        let m = u.components();
        let plans = (0..m)
            .map(|i| {
                let u_box: Vec<f64> = (0..dom.cells()).map(|c| u.value(c, i)).collect();
                let v: Vec<f64> = (0..dom.cells())
                    .map(|c| {
                        let g2: f64 =
                            (0..n).map(|a| grad.value(c, i * n + a).powi(2)).sum();
                        u_box[c].abs() + g2.sqrt()
                    })
                    .collect();
                let m_v = maximal_full(dom, &v, &sched);
                ScalarPlan { u_box, m_v }
            })
            .collect();
        Self { u: u.clone(), plans, params }
    }

    pub fn input(&self) -> &GridFunction {
        &self.u
    }

    /// Gradient truncation at a level λ > 0 (family "above" semantics).
    pub fn truncate_at(&self, lambda: f64) -> TruncationResult {
        assert!(lambda > 0.0 && lambda.is_finite());
        let dom = self.u.domain();
        let m = self.u.components();
        let cells = dom.cells();
        let k_slope = self.params.c_bar * lambda;
        let clamp_factor = k_slope * dom.lipschitz().c_omega();
        let dist = dom.boundary_distance();

        let mut values = vec![0.0; cells * m];
        let mut good = dom.mask().to_vec();
        for (i, plan) in self.plans.iter().enumerate() {
            // R^λ over the full box, zero extension included.
            let anchors: Vec<usize> =
                (0..cells).filter(|&c| plan.m_v[c] <= lambda).collect();
            if anchors.is_empty() {
                // Everything is bad: the truncation collapses to zero.
                for g in good.iter_mut() {
                    *g = false;
                }
                continue;
            }
            let nd = dom.dim();
            let mut axy = Vec::with_capacity(anchors.len() * nd);
            let mut au = Vec::with_capacity(anchors.len());
            for &a in &anchors {
                axy.extend_from_slice(dom.center(a));
                au.push(plan.u_box[a]);
            }
            for c in 0..cells {
                if !dom.is_masked(c) {
                    continue;
                }
                let cx = dom.center(c);
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for (j, &uy) in au.iter().enumerate() {
                    let mut d2 = 0.0;
                    for a in 0..nd {
                        let t = cx[a] - axy[j * nd + a];
                        d2 += t * t;
                    }
                    let kd = k_slope * d2.sqrt();
                    if uy + kd < lo {
                        lo = uy + kd;
                    }
                    if uy - kd > hi {
                        hi = uy - kd;
                    }
                }
                let bar = 0.5 * (lo + hi);
                let bound = clamp_factor * dist[c];
                values[c * m + i] = bar.clamp(-bound, bound);
                if plan.m_v[c] > lambda || bar.abs() > bound {
                    good[c] = false;
                }
            }
        }
        let truncated = GridFunction::from_values(dom.clone(), m, values)
            .expect("truncation output is finite and masked");
        let (sup_ratio, agreement_error) =
            audit(&self.u, &truncated, &good, lambda, TruncationFamily::Above);
        let bad_measure = dom.measure()
            - good.iter().filter(|&&g| g).count() as f64 * dom.cell_volume();
        TruncationResult {
            truncated,
            good_set: good,
            level: lambda,
            family: TruncationFamily::Above,
            sup_ratio,
            bad_measure,
            agreement_error,
        }
    }

    /// u minus the λ = 1/level truncation (family "below" semantics).
    pub fn truncate_below_at(&self, level: f64) -> TruncationResult {
        assert!(level > 0.0 && level.is_finite());
        let inner = self.truncate_at(1.0 / level);
        let truncated = self.u.sub(&inner.truncated);
        let (_, agreement_error) = audit(
            &self.u,
            &truncated,
            &inner.good_set,
            1.0 / level,
            TruncationFamily::Below,
        );
        TruncationResult {
            truncated,
            good_set: inner.good_set,
            level,
            family: TruncationFamily::Below,
            sup_ratio: inner.sup_ratio,
            bad_measure: inner.bad_measure,
            agreement_error,
        }
    }
}

fn audit(
    u: &GridFunction,
    out: &GridFunction,
    good: &[bool],
    lambda: f64,
    family: TruncationFamily,
) -> (f64, f64) {
    let dom = u.domain();
    let controlled = match family {
        // The level controls the output itself.
        TruncationFamily::Above => out.clone(),
        // The level controls the removed part.
        TruncationFamily::Below => u.sub(out),
        TruncationFamily::Outer => unreachable!("outer cutoffs carry no audit"),
    };
    let grad = controlled.gradient();
    let mut sup = 0.0f64;
    let mut agree = 0.0f64;
    for c in 0..dom.cells() {
        if !dom.is_masked(c) {
            continue;
        }
        sup = sup.max(controlled.magnitude(c) + grad.magnitude(c));
        if good[c] {
            let err = match family {
                TruncationFamily::Above => (0..u.components())
                    .map(|k| (out.value(c, k) - u.value(c, k)).abs())
                    .fold(0.0f64, f64::max),
                TruncationFamily::Below => out.magnitude(c),
                TruncationFamily::Outer => unreachable!(),
            };
            agree = agree.max(err);
        }
    }
    (sup / lambda, agree)
}

/// φ_λ of the boundary-preserving Lipschitz truncation, scalar input only.
pub fn lipschitz_truncate_scalar(
    u: &GridFunction,
    lambda: f64,
    params: TruncationParams,
) -> Result<TruncationResult, TruncationError> {
    if u.components() != 1 {
        return Err(TruncationError::NotScalar { m: u.components() });
    }
    Ok(GradientTruncator::new(u, params).truncate_at(lambda))
}

/// φ⁽²⁾: component-wise gradient truncation at λ = level, good set the
/// intersection of the component good sets.
pub fn truncate_above(u: &GridFunction, level: f64, params: TruncationParams) -> TruncationResult {
    GradientTruncator::new(u, params).truncate_at(level)
}

/// φ⁽³⁾: u − φ_{1/level}(u) component-wise.
pub fn truncate_below(u: &GridFunction, level: f64, params: TruncationParams) -> TruncationResult {
    GradientTruncator::new(u, params).truncate_below_at(level)
}

/// Apply one family member as a plain function, discarding audit data.
pub fn apply_family(
    u: &GridFunction,
    family: TruncationFamily,
    level: f64,
    params: TruncationParams,
) -> GridFunction {
    match family {
        TruncationFamily::Outer => cutoff_outer(u, level),
        TruncationFamily::Above => truncate_above(u, level, params).truncated,
        TruncationFamily::Below => truncate_below(u, level, params).truncated,
    }
}

/// X-norm of (φ_n − φ_j)(u) for one family, the quantity whose uniform
/// smallness along a subsequence makes a truncation family admissible.
pub fn tail_difference(
    u: &GridFunction,
    family: TruncationFamily,
    j: f64,
    n: f64,
    exps: &crate::grid::ExponentConfig,
    params: TruncationParams,
) -> Result<f64, TruncationError> {
    if j >= n {
        return Err(TruncationError::TailIndices { j, n });
    }
    let diff = match family {
        TruncationFamily::Outer => cutoff_outer(u, n).sub(&cutoff_outer(u, j)),
        TruncationFamily::Above => {
            let t = GradientTruncator::new(u, params);
            t.truncate_at(n).truncated.sub(&t.truncate_at(j).truncated)
        }
        TruncationFamily::Below => {
            let t = GradientTruncator::new(u, params);
            t.truncate_below_at(n).truncated.sub(&t.truncate_below_at(j).truncated)
        }
    };
    Ok(exps.x_norm(&diff))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_domain, DomainSpec, ExponentConfig};

    fn interval(lo: f64, hi: f64, h: f64) -> Arc<GridDomain> {
        build_domain(&DomainSpec::Box { lo: vec![lo], hi: vec![hi], h }).unwrap()
    }

    #[test]
    fn clamp_cases() {
        assert_eq!(eta(2.0, 3.0), 2.0);
        assert_eq!(eta(2.0, -5.0), -2.0);
        assert_eq!(eta(2.0, 1.5), 1.5);
    }

    #[test]
    fn smoothstep_profile_and_derivative_bounds() {
        assert_eq!(nu(-0.5), 1.0);
        assert_eq!(nu(0.0), 1.0);
        assert_eq!(nu(1.0), 0.0);
        assert_eq!(nu(2.0), 0.0);
        assert_eq!(nu(0.5), 0.5);
        let mut prev = 1.0;
        for k in 1..=1000 {
            let r = k as f64 / 1000.0;
            let v = nu(r);
            assert!(v <= prev + 1e-15, "not nonincreasing at {r}");
            prev = v;
        }
        // Sampled derivative bounds; the analytic maxima are 15/8 and 10/√3.
        let d = 1e-6;
        let mut max1 = 0.0f64;
        let mut max2 = 0.0f64;
        for k in 1..2000 {
            let r = k as f64 / 2000.0;
            let d1 = (nu(r + d) - nu(r - d)) / (2.0 * d);
            let d2 = (nu(r + d) - 2.0 * nu(r) + nu(r - d)) / (d * d);
            max1 = max1.max(d1.abs());
            max2 = max2.max(d2.abs());
        }
        assert!((max1 - 15.0 / 8.0).abs() < 1e-3);
        assert!(max1 <= NU_SLOPE_BOUND);
        assert!((max2 - 10.0 / 3.0f64.sqrt()).abs() < 1e-2);
        assert!(max2 <= NU_CURVATURE_BOUND);
    }

    #[test]
    fn ball_indicator_on_four_cells() {
        let dom = interval(-2.0, 2.0, 1.0);
        let ind = ball_indicator(&dom, 1.0);
        let got: Vec<f64> = (0..dom.cells())
            .filter(|&c| dom.is_masked(c))
            .map(|c| ind.value(c, 0))
            .collect();
        assert_eq!(got, vec![0.0, 1.0, 1.0, 0.0]);
        assert!(ball_indicator(&dom, 100.0)
            .values()
            .iter()
            .zip(dom.mask())
            .all(|(&v, &m)| v == if m { 1.0 } else { 0.0 }));
        assert!(ball_indicator(&dom, 1e-12).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn outer_cutoff_support_and_linearity() {
        let dom = interval(-8.0, 8.0, 0.5);
        let inner = GridFunction::from_fn(dom.clone(), 1, |x, out| {
            out[0] = if x[0].abs() < 2.0 { 1.0 + x[0] } else { 0.0 };
        })
        .unwrap();
        // Supported inside the cutoff radius: identity.
        assert_eq!(cutoff_outer(&inner, 3.0).values(), inner.values());
        // Supported outside radius+1: annihilated.
        let outer = GridFunction::from_fn(dom.clone(), 1, |x, out| {
            out[0] = if x[0].abs() > 5.0 { 1.0 } else { 0.0 };
        })
        .unwrap();
        assert!(cutoff_outer(&outer, 3.0).values().iter().all(|&v| v == 0.0));
        // One cell at |x| = level + 0.5 is scaled by ν(1/2) = 1/2 exactly.
        let mid = GridFunction::from_fn(dom.clone(), 1, |x, out| {
            out[0] = if (x[0] - 3.75).abs() < 1e-9 { 2.0 } else { 0.0 };
        })
        .unwrap();
        let cut = cutoff_outer(&mid, 3.25);
        let cell = (0..dom.cells())
            .find(|&c| (dom.center(c)[0] - 3.75).abs() < 1e-9)
            .unwrap();
        assert_eq!(cut.value(cell, 0), 1.0);
        // Linearity is exact.
        let a = cutoff_outer(&inner.scale(2.0).add(&outer.scale(-3.0)), 3.0);
        let b = cutoff_outer(&inner, 3.0)
            .scale(2.0)
            .add(&cutoff_outer(&outer, 3.0).scale(-3.0));
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn truncating_zero_keeps_the_whole_domain_good() {
        let dom = interval(0.0, 2.0, 0.25);
        let z = GridFunction::zeros(dom.clone(), 1);
        let r = lipschitz_truncate_scalar(&z, 1.0, TruncationParams::default()).unwrap();
        assert!(r.truncated.values().iter().all(|&v| v == 0.0));
        assert_eq!(r.bad_measure, 0.0);
        assert_eq!(r.agreement_error, 0.0);
        for c in 0..dom.cells() {
            assert_eq!(r.good_set[c], dom.is_masked(c));
        }
    }

    #[test]
    fn huge_level_reproduces_a_centered_bump() {
        let dom = interval(-4.0, 4.0, 0.125);
        let u = GridFunction::from_fn(dom.clone(), 1, |x, out| {
            out[0] = nu(x[0].abs() - 1.0);
        })
        .unwrap();
        let r = lipschitz_truncate_scalar(&u, 50.0, TruncationParams::default()).unwrap();
        assert_eq!(r.bad_measure, 0.0);
        assert_eq!(r.agreement_error, 0.0);
        assert_eq!(r.truncated.values(), u.values());
    }

    #[test]
    fn steep_segment_is_cut_out_and_the_rest_is_reproduced() {
        let h = 1.0 / 16.0;
        let dom = interval(0.0, 4.0, h);
        // Ramp up with slope 1, plateau, then a slope-10 drop on [2, 2.1].
        let u = GridFunction::from_fn(dom.clone(), 1, |x, out| {
            let t = x[0];
            out[0] = if t <= 1.0 {
                t
            } else if t <= 2.0 {
                1.0
            } else if t <= 2.1 {
                1.0 - 10.0 * (t - 2.0)
            } else {
                0.0
            };
        })
        .unwrap();
        let r = lipschitz_truncate_scalar(&u, 2.0, TruncationParams::default()).unwrap();
        // The steep strip is bad, but far from it cells stay good.
        assert!(r.bad_measure > 0.0);
        assert!(r.bad_measure < 1.5, "bad measure {}", r.bad_measure);
        assert_eq!(r.agreement_error, 0.0);
        let k = 2.0 * 2.0;
        let grad = r.truncated.gradient();
        for c in 0..dom.cells() {
            assert!(grad.value(c, 0).abs() <= k * (1.0 + 1e-12));
        }
        // Sample cells far from the steep segment are good and exact.
        for target in [0.25, 1.6, 3.5] {
            let c = (0..dom.cells())
                .find(|&c| (dom.center(c)[0] - target).abs() < h)
                .unwrap();
            assert!(r.good_set[c], "cell at {target} should be good");
            assert_eq!(r.truncated.value(c, 0), u.value(c, 0));
        }
    }

    #[test]
    fn componentwise_truncation_intersects_good_sets() {
        let dom = interval(0.0, 4.0, 1.0 / 16.0);
        let steep = |t: f64| {
            if t <= 1.8 || t >= 2.2 {
                0.0
            } else if t <= 2.0 {
                5.0 * (t - 1.8)
            } else {
                5.0 * (2.2 - t)
            }
        };
        let u = GridFunction::from_fn(dom.clone(), 2, |x, out| {
            out[0] = steep(x[0]);
            out[1] = 0.2 * nu((x[0] - 2.0).abs() - 1.0);
        })
        .unwrap();
        let r = truncate_above(&u, 1.5, TruncationParams::default());
        let gentle = lipschitz_truncate_scalar(&u.component(1), 1.5, TruncationParams::default())
            .unwrap();
        // The gentle component alone is reproduced everywhere.
        assert_eq!(gentle.bad_measure, 0.0);
        // The joint good set is exactly the steep component's.
        let steep_only =
            lipschitz_truncate_scalar(&u.component(0), 1.5, TruncationParams::default()).unwrap();
        assert_eq!(r.good_set, steep_only.good_set);
        // Component 2 of the output equals the untouched component.
        for c in 0..dom.cells() {
            assert_eq!(r.truncated.value(c, 1), gentle.truncated.value(c, 0));
        }
        assert_eq!(r.agreement_error, 0.0);
    }

    #[test]
    fn below_family_deletes_small_functions_and_keeps_spikes() {
        let dom = interval(0.0, 4.0, 1.0 / 16.0);
        // A tiny smooth ramp: everything is below the 1/n threshold.
        let tiny = GridFunction::from_fn(dom.clone(), 1, |x, out| {
            out[0] = 2e-4 * nu((x[0] - 2.0).abs() - 1.0);
        })
        .unwrap();
        let n = 4.0;
        let r = truncate_below(&tiny, n, TruncationParams::default());
        assert_eq!(r.bad_measure, 0.0);
        assert!(r.truncated.values().iter().all(|&v| v == 0.0));

        // Spike plus the same tiny ramp: the spike survives, and the removed
        // part is uniformly below C/n in value and gradient.
        let spike = GridFunction::from_fn(dom.clone(), 1, |x, out| {
            let d = (x[0] - 2.0).abs();
            out[0] = if d < 0.25 { 8.0 * (0.25 - d) * 4.0 } else { 0.0 };
        })
        .unwrap();
        let both = spike.add(&tiny);
        let rb = truncate_below(&both, n, TruncationParams::default());
        let removed = both.sub(&rb.truncated);
        let sup = crate::grid::lp_norm(&removed, f64::INFINITY)
            + crate::grid::lp_norm(removed.gradient(), f64::INFINITY);
        assert!(sup <= 6.0 / n, "removed part too large: {sup}");
        // The spike's peak is essentially untouched.
        let peak = (0..dom.cells())
            .max_by(|&a, &b| both.value(a, 0).partial_cmp(&both.value(b, 0)).unwrap())
            .unwrap();
        assert!((rb.truncated.value(peak, 0) - both.value(peak, 0)).abs() <= 6.0 / n);
        assert_eq!(rb.agreement_error, 0.0);
    }

    #[test]
    fn tail_difference_contracts() {
        let dom = interval(-8.0, 8.0, 0.25);
        let u = GridFunction::from_fn(dom.clone(), 1, |x, out| {
            out[0] = nu(x[0].abs() - 1.5);
        })
        .unwrap();
        let exps = ExponentConfig::standard(&dom, 1.5, 2.5, Some(5.0)).unwrap();
        let params = TruncationParams::default();
        // Support inside B_j: the outer tail vanishes identically.
        assert_eq!(
            tail_difference(&u, TruncationFamily::Outer, 3.0, 6.0, &exps, params).unwrap(),
            0.0
        );
        // Large levels reproduce u, so the above tail dies as j grows.
        let t_small =
            tail_difference(&u, TruncationFamily::Above, 2.0, 64.0, &exps, params).unwrap();
        let t_large =
            tail_difference(&u, TruncationFamily::Above, 32.0, 64.0, &exps, params).unwrap();
        assert!(t_large <= t_small);
        assert!(t_large < 1e-9, "tail at high levels is {t_large}");
        assert!(matches!(
            tail_difference(&u, TruncationFamily::Outer, 5.0, 5.0, &exps, params),
            Err(TruncationError::TailIndices { .. })
        ));
    }
}
