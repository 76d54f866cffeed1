//! Level ladders and parameter grids.
//!
//! Truncation levels are tied to sequence positions through a geometric
//! ladder: position i gets level `base * ratio^(i-1)`. Grids cannot resolve
//! a literal level-to-infinity limit, so the rungs are calibrated to the
//! dynamic range of the corpus under study. Parameter grids for the moduli
//! (delta ladders, radius ladders) are geometric as well.

use serde::{Deserialize, Serialize};

/// Geometric ladder of truncation levels, indexed from 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelLadder {
    pub base: f64,
    pub ratio: f64,
}

impl LevelLadder {
    pub fn new(base: f64, ratio: f64) -> Self {
        assert!(base > 0.0 && ratio >= 1.0, "ladder must be positive and nondecreasing");
        Self { base, ratio }
    }

    /// Level at 1-based position `i`.
    pub fn level(&self, i: usize) -> f64 {
        assert!(i >= 1, "ladder positions are 1-based");
        self.base * self.ratio.powi(i as i32 - 1)
    }

    pub fn levels(&self, count: usize) -> Vec<f64> {
        (1..=count).map(|i| self.level(i)).collect()
    }
}

/// Geometric grid of `count` points from `lo` to `hi` inclusive.
pub fn geometric_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi >= lo && count >= 2, "need 0 < lo <= hi and at least two points");
    let step = (hi / lo).powf(1.0 / (count as f64 - 1.0));
    (0..count)
        .map(|k| {
            if k + 1 == count {
                hi
            } else {
                lo * step.powi(k as i32)
            }
        })
        .collect()
}
