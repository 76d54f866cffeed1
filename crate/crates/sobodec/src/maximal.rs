//! Discrete Hardy–Littlewood maximal operator and the Euclidean distance
//! transform, the two kernels behind gradient truncation.
//!
//! The continuum sup over ball radii is quadratured on a finite schedule.
//! Cell membership in a ball is decided by the cell-center distance and the
//! averaging volume is the exact continuum ball volume, so the operator is
//! reproducible bit-for-bit from the schedule alone. The mandatory first
//! radius h/2 captures only the cell itself and its average equals or
//! exceeds |v| there, giving pointwise domination M(v) >= |v|.

use std::sync::Arc;

use thiserror::Error;

use crate::grid::{unit_ball_volume, GridDomain, GridFunction};

#[derive(Debug, Error)]
pub enum MaximalError {
    #[error("radius schedule must start at h/2 = {expected}, got {got}")]
    BadFirstRadius { got: f64, expected: f64 },
    #[error("radius schedule must be strictly increasing")]
    NotIncreasing,
    #[error("radius schedule is empty")]
    Empty,
}

/// Finite increasing list of ball radii over which the maximal sup is taken.
#[derive(Debug, Clone)]
pub struct RadiusSchedule {
    radii: Vec<f64>,
}

impl RadiusSchedule {
    /// r1 = h/2, then geometric growth until the radius covers half the box
    /// diameter (so the largest ball sees every cell from anywhere).
    pub fn geometric(dom: &GridDomain, ratio: f64) -> Self {
        assert!(ratio > 1.0, "schedule ratio must exceed 1");
        let target = 0.5 * dom.box_diameter();
        let mut radii = vec![0.5 * dom.spacing()];
        while *radii.last().unwrap() < target {
            let next = radii.last().unwrap() * ratio;
            radii.push(next);
        }
        Self { radii }
    }

    pub fn default_for(dom: &GridDomain) -> Self {
        Self::geometric(dom, 1.5)
    }

    pub fn from_radii(radii: Vec<f64>, h: f64) -> Result<Self, MaximalError> {
        let first = *radii.first().ok_or(MaximalError::Empty)?;
        if first != 0.5 * h {
            return Err(MaximalError::BadFirstRadius { got: first, expected: 0.5 * h });
        }
        if radii.windows(2).any(|w| w[1] <= w[0]) {
            return Err(MaximalError::NotIncreasing);
        }
        Ok(Self { radii })
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }
}

/// M(v) on the masked cells. Input is scalar; the zero extension off the
/// mask participates in every average.
pub fn maximal_function(v: &GridFunction, sched: &RadiusSchedule) -> GridFunction {
    assert_eq!(v.components(), 1, "maximal operator acts on scalar functions");
    let dom = v.domain();
    let full = maximal_full(dom, v.values(), sched);
    let values = (0..dom.cells())
        .map(|c| if dom.is_masked(c) { full[c] } else { 0.0 })
        .collect();
    GridFunction::from_values(dom.clone(), 1, values)
        .expect("maximal values are finite and masked")
}

/// M(v) on every box cell (masked or not), for good-set construction where
/// the zero extension's own maximal values matter.
pub(crate) fn maximal_full(
    dom: &GridDomain,
    values: &[f64],
    sched: &RadiusSchedule,
) -> Vec<f64> {
    let n = dom.dim();
    let h = dom.spacing();
    let hn = dom.cell_volume();
    let radii = sched.radii();

    // Group index offsets into annuli between consecutive schedule radii so
    // each cell's ball sums are accumulated incrementally, largest ball paid
    // once. Offsets are ordered deterministically (annulus, then lexicographic).
    let r_max = *radii.last().unwrap();
    let w = (r_max / h).floor() as isize;
    let mut annuli: Vec<Vec<(isize, isize, isize)>> = vec![Vec::new(); radii.len()];
    let range = |active: bool| if active { -w..=w } else { 0..=0 };
    for di in range(true) {
        for dj in range(n >= 2) {
            for dk in range(n >= 3) {
                let dist = h * (((di * di + dj * dj + dk * dk) as f64).sqrt());
                if let Some(k) = radii.iter().position(|&r| dist <= r) {
                    annuli[k].push((di, dj, dk));
                }
            }
        }
    }
    let vols: Vec<f64> =
        radii.iter().map(|&r| unit_ball_volume(n) * r.powi(n as i32)).collect();

    let dims = dom.dims();
    let mut out = vec![0.0; dom.cells()];
    let mut idx = [0usize; 3];
    for c in 0..dom.cells() {
        dom.decode(c, &mut idx[..n]);
        let (i0, j0, k0) = (
            idx[0] as isize,
            if n >= 2 { idx[1] as isize } else { 0 },
            if n >= 3 { idx[2] as isize } else { 0 },
        );
        let inb = |t: isize, a: usize| t >= 0 && (t as usize) < dims[a];
        let mut sum = 0.0;
        let mut best = 0.0f64;
        for (k, ring) in annuli.iter().enumerate() {
            for &(di, dj, dk) in ring {
                let (i, j, kk) = (i0 + di, j0 + dj, k0 + dk);
                if !inb(i, 0) || (n >= 2 && !inb(j, 1)) || (n >= 3 && !inb(kk, 2)) {
                    continue;
                }
                let mut flat = i as usize;
                if n >= 2 {
                    flat = flat * dims[1] + j as usize;
                }
                if n >= 3 {
                    flat = flat * dims[2] + kk as usize;
                }
                sum += values[flat].abs();
            }
            best = best.max(sum * hn / vols[k]);
        }
        out[c] = best;
    }
    out
}

/// Exact Euclidean distance from each masked cell center to the nearest
/// unmasked cell center, as a scalar function (0 off the mask).
pub fn distance_to_complement(dom: &Arc<GridDomain>) -> GridFunction {
    let d = dom.boundary_distance().to_vec();
    GridFunction::from_values(dom.clone(), 1, d).expect("distances are finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_domain, lp_norm, DomainSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bruteforce(dom: &GridDomain, values: &[f64], sched: &RadiusSchedule) -> Vec<f64> {
        (0..dom.cells())
            .map(|c| {
                sched
                    .radii()
                    .iter()
                    .map(|&r| {
                        let mass: f64 = (0..dom.cells())
                            .filter(|&y| dom.distance(c, y) <= r)
                            .map(|y| values[y].abs())
                            .sum();
                        mass * dom.cell_volume()
                            / (unit_ball_volume(dom.dim()) * r.powi(dom.dim() as i32))
                    })
                    .fold(0.0f64, f64::max)
            })
            .collect()
    }

    #[test]
    fn zero_maps_to_zero() {
        let dom = build_domain(&DomainSpec::Box { lo: vec![0.0], hi: vec![2.0], h: 0.25 })
            .unwrap();
        let v = GridFunction::zeros(dom.clone(), 1);
        let m = maximal_function(&v, &RadiusSchedule::default_for(&dom));
        assert!(m.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matches_bruteforce_on_random_plane_grid() {
        let dom = build_domain(&DomainSpec::Box {
            lo: vec![0.0, 0.0],
            hi: vec![2.0, 1.5],
            h: 0.25,
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v = GridFunction::from_fn(dom.clone(), 1, |_, out| {
            out[0] = rng.gen_range(-2.0..2.0)
        })
        .unwrap();
        let sched = RadiusSchedule::default_for(&dom);
        let fast = maximal_full(&dom, v.values(), &sched);
        let slow = bruteforce(&dom, v.values(), &sched);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-12 * b.max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn dominates_pointwise_and_is_sublinear() {
        let dom = build_domain(&DomainSpec::Box {
            lo: vec![-2.0, -2.0],
            hi: vec![2.0, 2.0],
            h: 0.5,
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v = GridFunction::from_fn(dom.clone(), 1, |_, out| {
            out[0] = rng.gen_range(-1.0..1.0)
        })
        .unwrap();
        let w = GridFunction::from_fn(dom.clone(), 1, |x, out| out[0] = x[0].cos()).unwrap();
        let sched = RadiusSchedule::default_for(&dom);
        let mv = maximal_function(&v, &sched);
        let mw = maximal_function(&w, &sched);
        let msum = maximal_function(&v.add(&w), &sched);
        let mscaled = maximal_function(&v.scale(-3.0), &sched);
        for c in 0..dom.cells() {
            assert!(mv.value(c, 0) >= v.value(c, 0).abs() - 1e-14);
            assert!(msum.value(c, 0) <= mv.value(c, 0) + mw.value(c, 0) + 1e-12);
            assert!((mscaled.value(c, 0) - 3.0 * mv.value(c, 0)).abs() <= 1e-12);
        }
    }

    #[test]
    fn interval_indicator_averages() {
        // v = indicator of (0,1) on [-1,2], cell centers at 0.1 steps of 0.2.
        let dom = build_domain(&DomainSpec::Box { lo: vec![-1.0], hi: vec![2.0], h: 0.2 })
            .unwrap();
        let v = GridFunction::from_fn(dom.clone(), 1, |x, out| {
            out[0] = if x[0] > 0.0 && x[0] < 1.0 { 1.0 } else { 0.0 };
        })
        .unwrap();
        let at = |x: f64| {
            (0..dom.cells())
                .find(|&c| (dom.center(c)[0] - x).abs() < 1e-9)
                .unwrap()
        };
        // Inside the support the continuum value is 1; the cell quadrature
        // can overshoot up to 3/2 when a radius lands just past a center.
        let m = maximal_function(&v, &RadiusSchedule::default_for(&dom));
        let inside = m.value(at(0.5), 0);
        assert!((1.0..=1.5).contains(&inside), "M at 0.5 is {inside}");

        // Half a unit outside, the continuum sup is 1/3 at r = 3/2. A fine
        // schedule brackets it within quadrature error.
        let fine = RadiusSchedule::geometric(&dom, 1.05);
        let mf = maximal_function(&v, &fine);
        let outside = mf.value(at(1.5), 0);
        assert!(
            (outside - 1.0 / 3.0).abs() < 0.05,
            "M at 1.5 is {outside}, expected near 1/3"
        );
        // The coarse default undershoots the sup by at most its ratio and
        // never exceeds the continuum value times the cell overshoot.
        let coarse = m.value(at(1.5), 0);
        assert!((0.2..=0.5).contains(&coarse), "coarse M at 1.5 is {coarse}");
    }

    #[test]
    fn lp_ratio_stays_bounded_for_p_above_one() {
        let dom = build_domain(&DomainSpec::Box { lo: vec![-4.0], hi: vec![4.0], h: 0.125 })
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sched = RadiusSchedule::default_for(&dom);
        for _ in 0..5 {
            let c0 = rng.gen_range(-2.0..2.0);
            let s = rng.gen_range(0.3..1.0);
            let v = GridFunction::from_fn(dom.clone(), 1, |x, out| {
                out[0] = (-((x[0] - c0) / s).powi(2)).exp();
            })
            .unwrap();
            let m = maximal_function(&v, &sched);
            for p in [1.5, 2.0, 4.0] {
                let ratio = lp_norm(&m, p) / lp_norm(&v, p);
                assert!(ratio < 4.0, "p={p} ratio {ratio}");
            }
        }
    }

    #[test]
    fn distance_transform_tracks_the_excluded_ball() {
        let dom = build_domain(&DomainSpec::ExteriorOfBall {
            lo: vec![-4.0, -4.0],
            hi: vec![4.0, 4.0],
            h: 0.25,
            radius: 1.0,
        })
        .unwrap();
        let d = distance_to_complement(&dom);
        for c in 0..dom.cells() {
            if !dom.is_masked(c) {
                continue;
            }
            let r = dom.center_abs(c);
            let to_ball = r - 1.0;
            let to_box = 4.0 - dom.center(c).iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            if to_ball < to_box - 0.5 {
                assert!(
                    (d.value(c, 0) - to_ball).abs() <= 1.5 * 0.25,
                    "cell at radius {r}: got {}, analytic {to_ball}",
                    d.value(c, 0)
                );
            }
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(RadiusSchedule::from_radii(vec![0.25, 0.5, 1.0], 0.5).is_ok());
        assert!(matches!(
            RadiusSchedule::from_radii(vec![0.3, 0.5], 0.5),
            Err(MaximalError::BadFirstRadius { .. })
        ));
        assert!(matches!(
            RadiusSchedule::from_radii(vec![0.25, 0.25], 0.5),
            Err(MaximalError::NotIncreasing)
        ));
        assert!(matches!(
            RadiusSchedule::from_radii(vec![], 0.5),
            Err(MaximalError::Empty)
        ));
    }
}
