//! Uniform Cartesian grids, vector-valued cell functions with zero Dirichlet
//! extension, discrete gradients, measures, and norms.
//!
//! A domain Ω is a connected cell mask inside a finite index box. Every
//! masked cell is strictly interior to the box, so a one-cell collar of
//! exterior cells always surrounds the discretization and the zero extension
//! of any function is representable on the same grid. Functions vanish
//! identically off the mask; the discrete gradient is the forward difference
//! reading 0 outside the mask, so a function vanishing on a cell and its
//! forward neighbors has zero gradient there.

use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("domain mask is empty")]
    EmptyMask,
    #[error("domain mask is disconnected ({components} components)")]
    DisconnectedMask { components: usize },
    #[error("masked cell {cell} touches the index box boundary; a one-cell exterior collar is required")]
    MissingCollar { cell: usize },
    #[error("spacing must be positive and finite, got {h}")]
    BadSpacing { h: f64 },
    #[error("box extent along axis {axis} is not an integral number of cells (extent {extent}, h {h})")]
    NonIntegralExtent { axis: usize, extent: f64, h: f64 },
    #[error("dimension must be 1, 2, or 3, got {n}")]
    BadDimension { n: usize },
    #[error("box corners must satisfy lo < hi componentwise")]
    EmptyBox,
    #[error("mask length {got} does not match index box cell count {expected}")]
    MaskLength { got: usize, expected: usize },
    #[error("function values must be finite; cell {cell} component {comp} is {value}")]
    NonFiniteValue { cell: usize, comp: usize, value: f64 },
    #[error("value length {got} does not match cells*components = {expected}")]
    ValueLength { got: usize, expected: usize },
    #[error("nonzero value {value} on unmasked cell {cell}; functions carry a zero Dirichlet extension")]
    NonzeroOffMask { cell: usize, value: f64 },
    #[error("exponents must satisfy 1 < q <= p, got q={q}, p={p}")]
    BadExponents { q: f64, p: f64 },
    #[error("p={p} >= N={n}: the critical exponent cannot be derived, supply p_star >= p explicitly")]
    PStarRequired { p: f64, n: usize },
    #[error("p_star={p_star} must be >= p={p}")]
    BadPStar { p_star: f64, p: f64 },
    #[error("weight function must be nonnegative, found {value} at cell {cell}")]
    NegativeWeight { cell: usize, value: f64 },
    #[error("expected a scalar function, got {m} components")]
    NotScalar { m: usize },
}

/// Shape tag of a built domain, kept for serialization and reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DomainKind {
    Box,
    ExteriorOfBall { radius: f64 },
    HalfSpaceStrip { axis: usize, from: f64, to: f64 },
    Custom,
}

/// Lipschitz-boundary metadata. The geometry is not checked against it; the
/// values only enter the boundary clamp of the gradient truncation through
/// `c_omega = l^2 * max(1, 1/rho)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzMeta {
    pub l: f64,
    pub rho: f64,
}

impl Default for LipschitzMeta {
    fn default() -> Self {
        Self { l: 1.0, rho: 1.0 }
    }
}

impl LipschitzMeta {
    pub fn c_omega(&self) -> f64 {
        self.l * self.l * 1.0_f64.max(1.0 / self.rho)
    }
}

/// Description of a domain to build. Box-like kinds get a one-cell collar
/// added around the stated box automatically; a custom mask must already
/// contain its collar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DomainSpec {
    Box {
        lo: Vec<f64>,
        hi: Vec<f64>,
        h: f64,
    },
    /// Box minus the ball of the given radius centered at the coordinate origin.
    ExteriorOfBall {
        lo: Vec<f64>,
        hi: Vec<f64>,
        h: f64,
        radius: f64,
    },
    /// Cells of the box whose center coordinate along `axis` lies in (from, to).
    HalfSpaceStrip {
        lo: Vec<f64>,
        hi: Vec<f64>,
        h: f64,
        axis: usize,
        from: f64,
        to: f64,
    },
    Custom {
        origin: Vec<f64>,
        h: f64,
        dims: Vec<usize>,
        mask: Vec<bool>,
    },
}

/// Discretized domain: index box, spacing, cell mask, and metadata.
#[derive(Debug)]
pub struct GridDomain {
    n: usize,
    h: f64,
    dims: Vec<usize>,
    origin: Vec<f64>,
    mask: Vec<bool>,
    kind: DomainKind,
    lipschitz: LipschitzMeta,
    centers: Vec<f64>,
    masked_count: usize,
    strides: Vec<usize>,
    dist: OnceLock<Vec<f64>>,
}

impl PartialEq for GridDomain {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n
            && self.h == other.h
            && self.dims == other.dims
            && self.origin == other.origin
            && self.mask == other.mask
    }
}

pub fn build_domain(spec: &DomainSpec) -> Result<Arc<GridDomain>, GridError> {
    GridDomain::build(spec).map(Arc::new)
}

impl GridDomain {
    pub fn build(spec: &DomainSpec) -> Result<GridDomain, GridError> {
        match spec {
            DomainSpec::Box { lo, hi, h } => {
                Self::boxlike(lo, hi, *h, DomainKind::Box, |_| true)
            }
            DomainSpec::ExteriorOfBall { lo, hi, h, radius } => {
                let r = *radius;
                Self::boxlike(lo, hi, *h, DomainKind::ExteriorOfBall { radius: r }, move |x| {
                    x.iter().map(|v| v * v).sum::<f64>() > r * r
                })
            }
            DomainSpec::HalfSpaceStrip { lo, hi, h, axis, from, to } => {
                let (axis, from, to) = (*axis, *from, *to);
                if axis >= lo.len() {
                    return Err(GridError::BadDimension { n: axis });
                }
                Self::boxlike(
                    lo,
                    hi,
                    *h,
                    DomainKind::HalfSpaceStrip { axis, from, to },
                    move |x| x[axis] > from && x[axis] < to,
                )
            }
            DomainSpec::Custom { origin, h, dims, mask } => {
                Self::from_mask(origin.clone(), *h, dims.clone(), mask.clone(), DomainKind::Custom)
            }
        }
    }

    fn boxlike(
        lo: &[f64],
        hi: &[f64],
        h: f64,
        kind: DomainKind,
        keep: impl Fn(&[f64]) -> bool,
    ) -> Result<GridDomain, GridError> {
        let n = lo.len();
        if n == 0 || n > 3 || hi.len() != n {
            return Err(GridError::BadDimension { n });
        }
        if !(h.is_finite() && h > 0.0) {
            return Err(GridError::BadSpacing { h });
        }
        let mut dims = Vec::with_capacity(n);
        for a in 0..n {
            let extent = hi[a] - lo[a];
            if extent <= 0.0 {
                return Err(GridError::EmptyBox);
            }
            let cells = extent / h;
            let rounded = cells.round();
            if (cells - rounded).abs() > 1e-9 * cells.max(1.0) || rounded < 1.0 {
                return Err(GridError::NonIntegralExtent { axis: a, extent, h });
            }
            dims.push(rounded as usize + 2);
        }
        let origin: Vec<f64> = (0..n).map(|a| lo[a] - h).collect();
        let total: usize = dims.iter().product();
        let mut mask = vec![false; total];
        let mut x = vec![0.0; n];
        let mut idx = vec![0usize; n];
        for (flat, m) in mask.iter_mut().enumerate() {
            decode(flat, &dims, &mut idx);
            let interior = (0..n).all(|a| idx[a] >= 1 && idx[a] + 2 <= dims[a]);
            if interior {
                for a in 0..n {
                    x[a] = origin[a] + (idx[a] as f64 + 0.5) * h;
                }
                *m = keep(&x);
            }
        }
        Self::from_mask(origin, h, dims, mask, kind)
    }

    fn from_mask(
        origin: Vec<f64>,
        h: f64,
        dims: Vec<usize>,
        mask: Vec<bool>,
        kind: DomainKind,
    ) -> Result<GridDomain, GridError> {
        let n = dims.len();
        if n == 0 || n > 3 || origin.len() != n {
            return Err(GridError::BadDimension { n });
        }
        if !(h.is_finite() && h > 0.0) {
            return Err(GridError::BadSpacing { h });
        }
        let total: usize = dims.iter().product();
        if mask.len() != total {
            return Err(GridError::MaskLength { got: mask.len(), expected: total });
        }
        let masked_count = mask.iter().filter(|&&m| m).count();
        if masked_count == 0 {
            return Err(GridError::EmptyMask);
        }
        let mut strides = vec![1usize; n];
        for a in (0..n.saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * dims[a + 1];
        }
        // Collar invariant: no masked cell on the index box boundary.
        let mut idx = vec![0usize; n];
        for (flat, &m) in mask.iter().enumerate() {
            if m {
                decode(flat, &dims, &mut idx);
                if (0..n).any(|a| idx[a] == 0 || idx[a] + 1 == dims[a]) {
                    return Err(GridError::MissingCollar { cell: flat });
                }
            }
        }
        // Connectivity over face neighbors.
        let start = mask.iter().position(|&m| m).unwrap();
        let mut seen = vec![false; total];
        let mut stack = vec![start];
        seen[start] = true;
        let mut reached = 0usize;
        while let Some(c) = stack.pop() {
            reached += 1;
            decode(c, &dims, &mut idx);
            for a in 0..n {
                for step in [-1isize, 1] {
                    let j = idx[a] as isize + step;
                    if j < 0 || j as usize >= dims[a] {
                        continue;
                    }
                    let nb = (c as isize + step * strides[a] as isize) as usize;
                    if mask[nb] && !seen[nb] {
                        seen[nb] = true;
                        stack.push(nb);
                    }
                }
            }
        }
        if reached != masked_count {
            // Count components for the diagnostic.
            let mut comp = 0usize;
            let mut seen = vec![false; total];
            for s in 0..total {
                if mask[s] && !seen[s] {
                    comp += 1;
                    let mut stack = vec![s];
                    seen[s] = true;
                    while let Some(c) = stack.pop() {
                        decode(c, &dims, &mut idx);
                        for a in 0..n {
                            for step in [-1isize, 1] {
                                let j = idx[a] as isize + step;
                                if j < 0 || j as usize >= dims[a] {
                                    continue;
                                }
                                let nb = (c as isize + step * strides[a] as isize) as usize;
                                if mask[nb] && !seen[nb] {
                                    seen[nb] = true;
                                    stack.push(nb);
                                }
                            }
                        }
                    }
                }
            }
            return Err(GridError::DisconnectedMask { components: comp });
        }
        let mut centers = vec![0.0; total * n];
        for flat in 0..total {
            decode(flat, &dims, &mut idx);
            for a in 0..n {
                centers[flat * n + a] = origin[a] + (idx[a] as f64 + 0.5) * h;
            }
        }
        Ok(GridDomain {
            n,
            h,
            dims,
            origin,
            mask,
            kind,
            lipschitz: LipschitzMeta::default(),
            centers,
            masked_count,
            strides,
            dist: OnceLock::new(),
        })
    }

    pub fn with_lipschitz(mut self, meta: LipschitzMeta) -> Self {
        self.lipschitz = meta;
        self
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    pub fn kind(&self) -> &DomainKind {
        &self.kind
    }

    pub fn lipschitz(&self) -> LipschitzMeta {
        self.lipschitz
    }

    /// Total cells in the index box, masked or not.
    pub fn cells(&self) -> usize {
        self.mask.len()
    }

    pub fn masked_cells(&self) -> usize {
        self.masked_count
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn is_masked(&self, cell: usize) -> bool {
        self.mask[cell]
    }

    /// Volume of one cell, h^N.
    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.n as i32)
    }

    /// |Ω| of the discretization.
    pub fn measure(&self) -> f64 {
        self.masked_count as f64 * self.cell_volume()
    }

    pub fn center(&self, cell: usize) -> &[f64] {
        &self.centers[cell * self.n..(cell + 1) * self.n]
    }

    /// Euclidean norm of the cell center.
    pub fn center_abs(&self, cell: usize) -> f64 {
        self.center(cell).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        let (ca, cb) = (self.center(a), self.center(b));
        (0..self.n).map(|i| (ca[i] - cb[i]) * (ca[i] - cb[i])).sum::<f64>().sqrt()
    }

    /// Index box diameter (corner to corner, in physical units).
    pub fn box_diameter(&self) -> f64 {
        (0..self.n)
            .map(|a| {
                let e = self.dims[a] as f64 * self.h;
                e * e
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn decode(&self, flat: usize, idx: &mut [usize]) {
        decode(flat, &self.dims, idx)
    }

    pub fn encode(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    /// Forward neighbor along `axis`, or None at the box edge.
    pub fn forward_neighbor(&self, cell: usize, axis: usize) -> Option<usize> {
        let mut idx = [0usize; 3];
        decode(cell, &self.dims, &mut idx[..self.n]);
        if idx[axis] + 1 >= self.dims[axis] {
            None
        } else {
            Some(cell + self.strides[axis])
        }
    }

    /// Exact Euclidean distance from each cell center to the nearest
    /// unmasked cell center; 0 on unmasked cells. Cached after first use.
    pub fn boundary_distance(&self) -> &[f64] {
        self.dist.get_or_init(|| {
            let outside: Vec<usize> =
                (0..self.cells()).filter(|&c| !self.mask[c]).collect();
            (0..self.cells())
                .map(|c| {
                    if !self.mask[c] {
                        return 0.0;
                    }
                    let mut best = f64::INFINITY;
                    for &o in &outside {
                        let d = self.distance(c, o);
                        if d < best {
                            best = d;
                        }
                    }
                    best
                })
                .collect()
        })
    }
}

fn decode(flat: usize, dims: &[usize], idx: &mut [usize]) {
    let mut rest = flat;
    for a in (0..dims.len()).rev() {
        idx[a] = rest % dims[a];
        rest /= dims[a];
    }
}

/// Vector-valued cell function with zero Dirichlet extension: values live on
/// masked cells and are identically 0 elsewhere.
#[derive(Debug)]
pub struct GridFunction {
    dom: Arc<GridDomain>,
    m: usize,
    values: Vec<f64>,
    grad: OnceLock<Box<GridFunction>>,
}

impl Clone for GridFunction {
    fn clone(&self) -> Self {
        Self {
            dom: self.dom.clone(),
            m: self.m,
            values: self.values.clone(),
            grad: OnceLock::new(),
        }
    }
}

impl GridFunction {
    pub fn zeros(dom: Arc<GridDomain>, m: usize) -> Self {
        assert!(m >= 1, "need at least one component");
        let values = vec![0.0; dom.cells() * m];
        Self { dom, m, values, grad: OnceLock::new() }
    }

    /// Evaluate `f(center, out)` on every masked cell.
    pub fn from_fn(
        dom: Arc<GridDomain>,
        m: usize,
        mut f: impl FnMut(&[f64], &mut [f64]),
    ) -> Result<Self, GridError> {
        let mut g = Self::zeros(dom, m);
        let dom = g.dom.clone();
        for c in 0..dom.cells() {
            if dom.is_masked(c) {
                let (lo, hi) = (c * m, (c + 1) * m);
                f(dom.center(c), &mut g.values[lo..hi]);
            }
        }
        g.validate()?;
        Ok(g)
    }

    /// Wrap a full value vector (length cells*m, component index fastest).
    pub fn from_values(
        dom: Arc<GridDomain>,
        m: usize,
        values: Vec<f64>,
    ) -> Result<Self, GridError> {
        if values.len() != dom.cells() * m {
            return Err(GridError::ValueLength {
                got: values.len(),
                expected: dom.cells() * m,
            });
        }
        let g = Self { dom, m, values, grad: OnceLock::new() };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<(), GridError> {
        for c in 0..self.dom.cells() {
            for k in 0..self.m {
                let v = self.values[c * self.m + k];
                if !v.is_finite() {
                    return Err(GridError::NonFiniteValue { cell: c, comp: k, value: v });
                }
                if !self.dom.is_masked(c) && v != 0.0 {
                    return Err(GridError::NonzeroOffMask { cell: c, value: v });
                }
            }
        }
        Ok(())
    }

    pub fn domain(&self) -> &Arc<GridDomain> {
        &self.dom
    }

    pub fn components(&self) -> usize {
        self.m
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, cell: usize, comp: usize) -> f64 {
        self.values[cell * self.m + comp]
    }

    pub fn cell_values(&self, cell: usize) -> &[f64] {
        &self.values[cell * self.m..(cell + 1) * self.m]
    }

    /// Euclidean magnitude over the components at one cell.
    pub fn magnitude(&self, cell: usize) -> f64 {
        self.cell_values(cell).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Extract one component as a scalar function.
    pub fn component(&self, comp: usize) -> GridFunction {
        assert!(comp < self.m);
        let values = (0..self.dom.cells()).map(|c| self.value(c, comp)).collect();
        GridFunction { dom: self.dom.clone(), m: 1, values, grad: OnceLock::new() }
    }

    /// Reassemble a vector function from per-component scalars.
    pub fn from_components(parts: &[GridFunction]) -> GridFunction {
        assert!(!parts.is_empty());
        let dom = parts[0].dom.clone();
        let m = parts.len();
        for p in parts {
            assert!(p.m == 1 && Arc::ptr_eq(&p.dom, &dom), "components must be scalars on one domain");
        }
        let mut values = vec![0.0; dom.cells() * m];
        for c in 0..dom.cells() {
            for (k, p) in parts.iter().enumerate() {
                values[c * m + k] = p.values[c];
            }
        }
        GridFunction { dom, m, values, grad: OnceLock::new() }
    }

    /// Forward-difference gradient with zero Dirichlet extension, M*N
    /// components ordered (comp, axis). Cached.
    pub fn gradient(&self) -> &GridFunction {
        self.grad.get_or_init(|| Box::new(self.compute_gradient()))
    }

    fn compute_gradient(&self) -> GridFunction {
        let dom = &self.dom;
        let n = dom.dim();
        let m = self.m;
        let h = dom.spacing();
        let mut out = vec![0.0; dom.cells() * m * n];
        for c in 0..dom.cells() {
            if !dom.is_masked(c) {
                continue;
            }
            for a in 0..n {
                // Collar invariant keeps the forward neighbor inside the box.
                let nb = dom.forward_neighbor(c, a).expect("masked cell has a forward neighbor");
                for k in 0..m {
                    let here = self.values[c * m + k];
                    let next = if dom.is_masked(nb) { self.values[nb * m + k] } else { 0.0 };
                    out[c * m * n + k * n + a] = (next - here) / h;
                }
            }
        }
        GridFunction { dom: dom.clone(), m: m * n, values: out, grad: OnceLock::new() }
    }

    /// Pointwise map of the masked values; the zero extension is preserved
    /// regardless of f(0).
    pub fn map(&self, f: impl Fn(f64) -> f64) -> GridFunction {
        let mut out = self.clone_without_cache();
        for c in 0..self.dom.cells() {
            if self.dom.is_masked(c) {
                for k in 0..self.m {
                    out.values[c * self.m + k] = f(self.values[c * self.m + k]);
                }
            }
        }
        out
    }

    fn clone_without_cache(&self) -> GridFunction {
        GridFunction {
            dom: self.dom.clone(),
            m: self.m,
            values: self.values.clone(),
            grad: OnceLock::new(),
        }
    }

    pub fn scale(&self, s: f64) -> GridFunction {
        self.map(|v| s * v)
    }

    pub fn add(&self, other: &GridFunction) -> GridFunction {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &GridFunction) -> GridFunction {
        self.zip(other, |a, b| a - b)
    }

    pub fn zip(&self, other: &GridFunction, f: impl Fn(f64, f64) -> f64) -> GridFunction {
        assert!(self.m == other.m, "component counts differ");
        assert!(self.dom.as_ref() == other.dom.as_ref(), "domains differ");
        let mut out = self.clone_without_cache();
        for (i, v) in out.values.iter_mut().enumerate() {
            *v = f(self.values[i], other.values[i]);
        }
        out
    }

    /// Σ terms[i].0 * terms[i].1, cell-exact.
    pub fn linear_combination(terms: &[(f64, &GridFunction)]) -> GridFunction {
        assert!(!terms.is_empty());
        let mut out = terms[0].1.clone_without_cache();
        for v in out.values.iter_mut() {
            *v *= terms[0].0;
        }
        for &(s, g) in &terms[1..] {
            assert!(g.m == out.m && g.dom.as_ref() == out.dom.as_ref());
            for (o, v) in out.values.iter_mut().zip(&g.values) {
                *o += s * v;
            }
        }
        out
    }
}

/// (Σ_cells |u(cell)|^r h^N)^{1/r}, or the max cell magnitude for r = ∞.
/// |·| is the Euclidean norm over the components.
pub fn lp_norm(u: &GridFunction, r: f64) -> f64 {
    lp_norm_where(u, r, |_| true)
}

/// Same restricted to cells selected by the predicate (box cell index).
pub fn lp_norm_where(u: &GridFunction, r: f64, keep: impl Fn(usize) -> bool) -> f64 {
    assert!(r >= 1.0, "exponent must be in [1, inf]");
    let dom = u.domain();
    if r.is_infinite() {
        let mut best: f64 = 0.0;
        for c in 0..dom.cells() {
            if dom.is_masked(c) && keep(c) {
                best = best.max(u.magnitude(c));
            }
        }
        return best;
    }
    let mut sum = 0.0;
    for c in 0..dom.cells() {
        if dom.is_masked(c) && keep(c) {
            sum += u.magnitude(c).powf(r);
        }
    }
    (sum * dom.cell_volume()).powf(1.0 / r)
}

/// ‖u‖_{L^r} + ‖∇u‖_{L^r}.
pub fn sobolev_norm(u: &GridFunction, r: f64) -> f64 {
    lp_norm(u, r) + lp_norm(u.gradient(), r)
}

/// Norm of the ambient space: ‖u‖_{W^{1,p}} + ‖u‖_{W^{1,q}}.
pub fn x_norm(u: &GridFunction, exps: &ExponentConfig) -> f64 {
    sobolev_norm(u, exps.p) + sobolev_norm(u, exps.q)
}

/// Norm of the intersection space L^r ∩ L^s for r >= s (as the sum of the
/// two norms), or of the sum space L^r + L^s for r < s via the threshold
/// split ‖u·1_{|u|>1}‖_r + ‖u·1_{|u|<=1}‖_s, which is within a factor 2 of
/// the infimum norm.
pub fn sum_space_norm(u: &GridFunction, r: f64, s: f64) -> f64 {
    assert!(r > 1.0 && s > 1.0, "sum space exponents must lie in (1, inf)");
    if r >= s {
        lp_norm(u, r) + lp_norm(u, s)
    } else {
        let dom = u.domain();
        let hn = dom.cell_volume();
        let mut big = 0.0;
        let mut small = 0.0;
        for c in 0..dom.cells() {
            if dom.is_masked(c) {
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
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cmp {
    Gt,
    Ge,
    Lt,
    Le,
}

/// h^N * #{masked cells whose value satisfies the predicate}. Scalar input.
pub fn level_set_measure(f: &GridFunction, op: Cmp, c: f64) -> f64 {
    assert!(f.components() == 1, "level sets are taken of scalar functions");
    let dom = f.domain();
    let count = (0..dom.cells())
        .filter(|&cell| dom.is_masked(cell))
        .filter(|&cell| {
            let v = f.value(cell, 0);
            match op {
                Cmp::Gt => v > c,
                Cmp::Ge => v >= c,
                Cmp::Lt => v < c,
                Cmp::Le => v <= c,
            }
        })
        .count();
    count as f64 * dom.cell_volume()
}

/// Hölder conjugate r' = r/(r-1).
pub fn conjugate(r: f64) -> f64 {
    assert!(r > 1.0);
    r / (r - 1.0)
}

/// Exponent family q <= p with the critical exponent and the weight
/// functions entering growth envelopes.
#[derive(Debug, Clone)]
pub struct ExponentConfig {
    pub q: f64,
    pub p: f64,
    pub p_star: f64,
    pub h_q: GridFunction,
    pub h_p: GridFunction,
    pub h_pstar: GridFunction,
    pub h_inf: GridFunction,
    pub h_inf_decays: bool,
}

impl ExponentConfig {
    /// Standard weights: h_q = h_p = h_{p*} = 1 on Ω and h_∞ = (1+|x|)^{-1}.
    /// For p < N the critical exponent is p* = pN/(N-p); otherwise it must
    /// be supplied (any value >= p is admissible).
    pub fn standard(
        dom: &Arc<GridDomain>,
        q: f64,
        p: f64,
        p_star: Option<f64>,
    ) -> Result<Self, GridError> {
        if !(q > 1.0 && q <= p && p.is_finite()) {
            return Err(GridError::BadExponents { q, p });
        }
        let n = dom.dim() as f64;
        let p_star = if p < n {
            let derived = p * n / (n - p);
            match p_star {
                None => derived,
                Some(ps) if ps >= p => ps,
                Some(ps) => return Err(GridError::BadPStar { p_star: ps, p }),
            }
        } else {
            match p_star {
                Some(ps) if ps >= p => ps,
                Some(ps) => return Err(GridError::BadPStar { p_star: ps, p }),
                None => return Err(GridError::PStarRequired { p, n: dom.dim() }),
            }
        };
        let one = GridFunction::from_fn(dom.clone(), 1, |_, out| out[0] = 1.0)?;
        let h_inf = GridFunction::from_fn(dom.clone(), 1, |x, out| {
            let abs = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            out[0] = 1.0 / (1.0 + abs);
        })?;
        let mut cfg = Self {
            q,
            p,
            p_star,
            h_q: one.clone(),
            h_p: one.clone(),
            h_pstar: one,
            h_inf,
            h_inf_decays: false,
        };
        cfg.h_inf_decays = cfg.measure_h_inf_decay();
        Ok(cfg)
    }

    pub fn with_weights(
        mut self,
        h_q: GridFunction,
        h_p: GridFunction,
        h_pstar: GridFunction,
        h_inf: GridFunction,
    ) -> Result<Self, GridError> {
        for w in [&h_q, &h_p, &h_pstar, &h_inf] {
            check_nonnegative(w)?;
        }
        self.h_q = h_q;
        self.h_p = h_p;
        self.h_pstar = h_pstar;
        self.h_inf = h_inf;
        self.h_inf_decays = self.measure_h_inf_decay();
        Ok(self)
    }

    /// sup of h_∞ outside B_R(0). Nonincreasing in R by construction.
    pub fn h_inf_tail_sup(&self, radius: f64) -> f64 {
        let dom = self.h_inf.domain();
        let mut best: f64 = 0.0;
        for c in 0..dom.cells() {
            if dom.is_masked(c) && dom.center_abs(c) > radius {
                best = best.max(self.h_inf.value(c, 0).abs());
            }
        }
        best
    }

    fn measure_h_inf_decay(&self) -> bool {
        let dom = self.h_inf.domain();
        let r_max = 0.5 * dom.box_diameter();
        let full = self.h_inf_tail_sup(0.0);
        full == 0.0 || self.h_inf_tail_sup(0.75 * r_max) <= 0.5 * full
    }

    /// ‖u‖_X = ‖u‖_{W^{1,p}} + ‖u‖_{W^{1,q}}.
    pub fn x_norm(&self, u: &GridFunction) -> f64 {
        x_norm(u, self)
    }
}

fn check_nonnegative(w: &GridFunction) -> Result<(), GridError> {
    let dom = w.domain();
    for c in 0..dom.cells() {
        for k in 0..w.components() {
            let v = w.value(c, k);
            if v < 0.0 {
                return Err(GridError::NegativeWeight { cell: c, value: v });
            }
        }
    }
    Ok(())
}

/// Exact volume of the unit ball in ℝ^N, N <= 3.
pub fn unit_ball_volume(n: usize) -> f64 {
    match n {
        1 => 2.0,
        2 => std::f64::consts::PI,
        3 => 4.0 * std::f64::consts::PI / 3.0,
        _ => panic!("dimension {n} not supported"),
    }
}
