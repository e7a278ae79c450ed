//! Domains, uniform node grids, node masks and fields, quadrature and discrete
//! Sobolev norms.
//!
//! Nodes are stored row-major: index `j * nx + i` holds the node at
//! `(x0 + i * hx, y0 + j * hy)`. Every node is exactly one of interior,
//! boundary or exterior.

use std::io::Write;
use std::ops::{Add, Mul, Sub};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The physical domain. Rectangles sit at the origin, `(0, x_extent) × (0, y_extent)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Domain {
    Rectangle { x_extent: f64, y_extent: f64 },
    Disk { center: [f64; 2], radius: f64 },
}

impl Domain {
    pub fn rectangle(x_extent: f64, y_extent: f64) -> Result<Self> {
        let d = Domain::Rectangle { x_extent, y_extent };
        d.validate()?;
        Ok(d)
    }

    pub fn unit_square() -> Self {
        Domain::Rectangle {
            x_extent: 1.0,
            y_extent: 1.0,
        }
    }

    pub fn disk(center: [f64; 2], radius: f64) -> Result<Self> {
        let d = Domain::Disk { center, radius };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Domain::Rectangle { x_extent, y_extent } => {
                x_extent.is_finite() && y_extent.is_finite() && x_extent > 0.0 && y_extent > 0.0
            }
            Domain::Disk { center, radius } => {
                center.iter().all(|c| c.is_finite()) && radius.is_finite() && radius > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidDomain(format!(
                "extents and radius must be strictly positive and finite: {self:?}"
            )))
        }
    }

    /// Lower-left corner and side lengths of the bounding box.
    pub fn bounding_box(&self) -> ([f64; 2], [f64; 2]) {
        match *self {
            Domain::Rectangle { x_extent, y_extent } => ([0.0, 0.0], [x_extent, y_extent]),
            Domain::Disk { center, radius } => (
                [center[0] - radius, center[1] - radius],
                [2.0 * radius, 2.0 * radius],
            ),
        }
    }

    pub fn center(&self) -> [f64; 2] {
        let (o, e) = self.bounding_box();
        [o[0] + 0.5 * e[0], o[1] + 0.5 * e[1]]
    }

    pub fn diameter(&self) -> f64 {
        match *self {
            Domain::Rectangle { x_extent, y_extent } => x_extent.hypot(y_extent),
            Domain::Disk { radius, .. } => 2.0 * radius,
        }
    }

    /// Length of the boundary curve.
    pub fn boundary_length(&self) -> f64 {
        match *self {
            Domain::Rectangle { x_extent, y_extent } => 2.0 * (x_extent + y_extent),
            Domain::Disk { radius, .. } => 2.0 * std::f64::consts::PI * radius,
        }
    }

    /// Strict interior test.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.signed_depth(p) > 0.0
    }

    /// Distance to the boundary, positive inside and negative outside.
    pub fn signed_depth(&self, p: [f64; 2]) -> f64 {
        match *self {
            Domain::Rectangle { x_extent, y_extent } => {
                let inside = p[0].min(x_extent - p[0]).min(p[1]).min(y_extent - p[1]);
                if inside >= 0.0 {
                    inside
                } else {
                    let dx = (-p[0]).max(p[0] - x_extent).max(0.0);
                    let dy = (-p[1]).max(p[1] - y_extent).max(0.0);
                    -dx.hypot(dy)
                }
            }
            Domain::Disk { center, radius } => {
                radius - (p[0] - center[0]).hypot(p[1] - center[1])
            }
        }
    }

    /// Nearest point of the boundary curve.
    pub fn project_to_boundary(&self, p: [f64; 2]) -> [f64; 2] {
        match *self {
            Domain::Rectangle { x_extent, y_extent } => {
                let q = [p[0].clamp(0.0, x_extent), p[1].clamp(0.0, y_extent)];
                if self.contains(q) {
                    // Push to the nearest side.
                    let cands = [
                        (q[0], [0.0, q[1]]),
                        (x_extent - q[0], [x_extent, q[1]]),
                        (q[1], [q[0], 0.0]),
                        (y_extent - q[1], [q[0], y_extent]),
                    ];
                    cands
                        .iter()
                        .min_by(|a, b| a.0.total_cmp(&b.0))
                        .map(|c| c.1)
                        .unwrap_or(q)
                } else {
                    q
                }
            }
            Domain::Disk { center, radius } => {
                let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
                let r = dx.hypot(dy);
                if r == 0.0 {
                    [center[0] + radius, center[1]]
                } else {
                    [center[0] + radius * dx / r, center[1] + radius * dy / r]
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Interior,
    Boundary,
    Exterior,
}

/// A uniform Cartesian node lattice over the domain's bounding box.
///
/// Both axes carry `n_cells` cells, so the spacing is `extent / n_cells` per
/// axis; cells are square whenever the two extents agree.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    domain: Domain,
    n_cells: usize,
    nx: usize,
    ny: usize,
    hx: f64,
    hy: f64,
    origin: [f64; 2],
    kinds: Vec<NodeKind>,
}

/// Builds the node lattice and classifies nodes.
///
/// Rectangle: the outer ring is boundary. Disk: nodes strictly inside are
/// interior; nodes outside (or on) the circle that touch an interior node
/// through an 8-neighbourhood carry the Dirichlet data.
pub fn build_grid(domain: Domain, n_cells: usize) -> Result<Grid> {
    if n_cells < 2 {
        return Err(Error::InvalidResolution(n_cells));
    }
    domain.validate()?;
    let (origin, extent) = domain.bounding_box();
    let nx = n_cells + 1;
    let ny = n_cells + 1;
    let hx = extent[0] / n_cells as f64;
    let hy = extent[1] / n_cells as f64;
    let mut kinds = vec![NodeKind::Exterior; nx * ny];
    match domain {
        Domain::Rectangle { .. } => {
            for j in 0..ny {
                for i in 0..nx {
                    let edge = i == 0 || j == 0 || i == nx - 1 || j == ny - 1;
                    kinds[j * nx + i] = if edge {
                        NodeKind::Boundary
                    } else {
                        NodeKind::Interior
                    };
                }
            }
        }
        Domain::Disk { radius, .. } => {
            let tol = 1e-12 * radius;
            for j in 0..ny {
                for i in 0..nx {
                    let p = [origin[0] + i as f64 * hx, origin[1] + j as f64 * hy];
                    if domain.signed_depth(p) > tol {
                        kinds[j * nx + i] = NodeKind::Interior;
                    }
                }
            }
            let interior: Vec<bool> = kinds.iter().map(|k| *k == NodeKind::Interior).collect();
            for j in 0..ny {
                for i in 0..nx {
                    let k = j * nx + i;
                    if interior[k] {
                        continue;
                    }
                    let touches = neighbours8(i, j, nx, ny).any(|(a, b)| interior[b * nx + a]);
                    if touches {
                        kinds[k] = NodeKind::Boundary;
                    }
                }
            }
        }
    }
    Ok(Grid {
        domain,
        n_cells,
        nx,
        ny,
        hx,
        hy,
        origin,
        kinds,
    })
}

fn neighbours8(i: usize, j: usize, nx: usize, ny: usize) -> impl Iterator<Item = (usize, usize)> {
    (-1i64..=1)
        .flat_map(move |dj| (-1i64..=1).map(move |di| (di, dj)))
        .filter(|&(di, dj)| di != 0 || dj != 0)
        .filter_map(move |(di, dj)| {
            let a = i as i64 + di;
            let b = j as i64 + dj;
            (a >= 0 && b >= 0 && (a as usize) < nx && (b as usize) < ny)
                .then_some((a as usize, b as usize))
        })
}

impl Grid {
    pub fn domain(&self) -> &Domain {
        &self.domain
    }
    pub fn n_cells(&self) -> usize {
        self.n_cells
    }
    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn ny(&self) -> usize {
        self.ny
    }
    pub fn shape(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }
    pub fn hx(&self) -> f64 {
        self.hx
    }
    pub fn hy(&self) -> f64 {
        self.hy
    }
    /// The coarser of the two spacings; the resolution scale used by tolerances.
    pub fn h(&self) -> f64 {
        self.hx.max(self.hy)
    }
    pub fn cell_area(&self) -> f64 {
        self.hx * self.hy
    }
    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }
    pub fn node_count(&self) -> usize {
        self.nx * self.ny
    }
    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }
    #[inline]
    pub fn ij(&self, k: usize) -> (usize, usize) {
        (k % self.nx, k / self.nx)
    }
    #[inline]
    pub fn coords(&self, k: usize) -> [f64; 2] {
        let (i, j) = self.ij(k);
        self.coords_ij(i, j)
    }
    #[inline]
    pub fn coords_ij(&self, i: usize, j: usize) -> [f64; 2] {
        [
            self.origin[0] + i as f64 * self.hx,
            self.origin[1] + j as f64 * self.hy,
        ]
    }
    pub fn kind(&self, k: usize) -> NodeKind {
        self.kinds[k]
    }
    pub fn kinds(&self) -> &[NodeKind] {
        &self.kinds
    }
    /// Node nearest to a point (clamped to the lattice).
    pub fn nearest_node(&self, p: [f64; 2]) -> usize {
        let fi = ((p[0] - self.origin[0]) / self.hx).round();
        let fj = ((p[1] - self.origin[1]) / self.hy).round();
        let i = fi.clamp(0.0, (self.nx - 1) as f64) as usize;
        let j = fj.clamp(0.0, (self.ny - 1) as f64) as usize;
        self.index(i, j)
    }

    pub fn interior_mask(&self) -> Mask {
        Mask::from_fn(self, |k, _| self.kinds[k] == NodeKind::Interior)
    }
    pub fn boundary_mask(&self) -> Mask {
        Mask::from_fn(self, |k, _| self.kinds[k] == NodeKind::Boundary)
    }
    /// Interior and boundary nodes together: the discrete closure of Ω.
    pub fn closure_mask(&self) -> Mask {
        Mask::from_fn(self, |k, _| self.kinds[k] != NodeKind::Exterior)
    }

    /// Interior nodes at distance more than `margin` from the complement of Ω.
    pub fn depth_mask(&self, margin: f64) -> Mask {
        Mask::from_fn(self, |k, p| {
            self.kinds[k] == NodeKind::Interior && self.domain.signed_depth(p) > margin
        })
    }

    /// Ω_d = {x ∈ Ω : dist(x, ℝ²∖Ω) > d}.
    pub fn shrink_set(&self, depth: f64) -> Result<ShrinkSet> {
        if !(depth > 0.0) {
            return Err(Error::Precondition(format!(
                "shrink depth must be positive, got {depth}"
            )));
        }
        Ok(ShrinkSet {
            depth,
            mask: self.depth_mask(depth),
        })
    }

    fn check_shape(&self, shape: (usize, usize)) -> Result<()> {
        if shape == self.shape() {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: self.shape(),
                found: shape,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkSet {
    pub depth: f64,
    pub mask: Mask,
}

/// A boolean per node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    shape: (usize, usize),
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(grid: &Grid) -> Self {
        Mask {
            shape: grid.shape(),
            bits: vec![false; grid.node_count()],
        }
    }
    pub fn full(grid: &Grid) -> Self {
        Mask {
            shape: grid.shape(),
            bits: vec![true; grid.node_count()],
        }
    }
    pub fn from_fn(grid: &Grid, f: impl Fn(usize, [f64; 2]) -> bool) -> Self {
        Mask {
            shape: grid.shape(),
            bits: (0..grid.node_count()).map(|k| f(k, grid.coords(k))).collect(),
        }
    }
    pub fn from_bits(grid: &Grid, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != grid.node_count() {
            return Err(Error::ShapeMismatch {
                expected: grid.shape(),
                found: (bits.len(), 1),
            });
        }
        Ok(Mask {
            shape: grid.shape(),
            bits,
        })
    }
    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }
    pub fn len(&self) -> usize {
        self.bits.len()
    }
    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }
    #[inline]
    pub fn get(&self, k: usize) -> bool {
        self.bits[k]
    }
    pub fn set(&mut self, k: usize, v: bool) {
        self.bits[k] = v;
    }
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(k, &b)| b.then_some(k))
    }
    pub fn and(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a && b)
    }
    pub fn or(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a || b)
    }
    pub fn and_not(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a && !b)
    }
    pub fn not(&self) -> Mask {
        Mask {
            shape: self.shape,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
    fn zip(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Mask {
        assert_eq!(self.shape, other.shape, "mask shape mismatch");
        Mask {
            shape: self.shape,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }
}

/// Scalar types a [`GridField`] can hold.
pub trait FieldValue:
    Copy
    + Send
    + Sync
    + PartialEq
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<f64, Output = Self>
    + 'static
{
    fn zero() -> Self;
    fn modulus(self) -> f64;
    fn to_complex(self) -> Complex64;
}

impl FieldValue for f64 {
    fn zero() -> Self {
        0.0
    }
    fn modulus(self) -> f64 {
        self.abs()
    }
    fn to_complex(self) -> Complex64 {
        Complex64::new(self, 0.0)
    }
}

impl FieldValue for Complex64 {
    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
    fn modulus(self) -> f64 {
        self.norm()
    }
    fn to_complex(self) -> Complex64 {
        self
    }
}

/// Node values plus a validity flag per node.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField<T = Complex64> {
    shape: (usize, usize),
    values: Vec<T>,
    valid: Vec<bool>,
}

pub type RealField = GridField<f64>;
pub type ComplexField = GridField<Complex64>;

impl<T: FieldValue> GridField<T> {
    pub fn from_fn(grid: &Grid, f: impl Fn(usize, [f64; 2]) -> T) -> Self {
        GridField {
            shape: grid.shape(),
            values: (0..grid.node_count()).map(|k| f(k, grid.coords(k))).collect(),
            valid: vec![true; grid.node_count()],
        }
    }

    pub fn constant(grid: &Grid, v: T) -> Self {
        Self::from_fn(grid, |_, _| v)
    }

    pub fn from_parts(grid: &Grid, values: Vec<T>, valid: Vec<bool>) -> Result<Self> {
        let n = grid.node_count();
        if values.len() != n || valid.len() != n {
            return Err(Error::ShapeMismatch {
                expected: grid.shape(),
                found: (values.len(), valid.len()),
            });
        }
        Ok(GridField {
            shape: grid.shape(),
            values,
            valid,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
    #[inline]
    pub fn value(&self, k: usize) -> T {
        self.values[k]
    }
    #[inline]
    pub fn get(&self, k: usize) -> Option<T> {
        self.valid[k].then(|| self.values[k])
    }
    #[inline]
    pub fn is_valid(&self, k: usize) -> bool {
        self.valid[k]
    }
    pub fn values(&self) -> &[T] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }
    pub fn validity(&self) -> &[bool] {
        &self.valid
    }
    pub fn set(&mut self, k: usize, v: T) {
        self.values[k] = v;
        self.valid[k] = true;
    }
    pub fn invalidate(&mut self, k: usize) {
        self.valid[k] = false;
    }
    pub fn valid_mask(&self) -> Mask {
        Mask {
            shape: self.shape,
            bits: self.valid.clone(),
        }
    }

    /// Valid nodes whose value satisfies `pred`.
    pub fn mask_where(&self, pred: impl Fn(T) -> bool) -> Mask {
        Mask {
            shape: self.shape,
            bits: self.values.iter().zip(&self.valid).map(|(&v, &ok)| ok && pred(v)).collect(),
        }
    }

    pub fn map<U: FieldValue>(&self, f: impl Fn(T) -> U) -> GridField<U> {
        GridField {
            shape: self.shape,
            values: self.values.iter().map(|&v| f(v)).collect(),
            valid: self.valid.clone(),
        }
    }

    /// Nodewise combination; valid where both inputs are.
    pub fn zip_with<U: FieldValue, V: FieldValue>(
        &self,
        other: &GridField<U>,
        f: impl Fn(T, U) -> V,
    ) -> GridField<V> {
        assert_eq!(self.shape, other.shape, "field shape mismatch");
        GridField {
            shape: self.shape,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            valid: self
                .valid
                .iter()
                .zip(&other.valid)
                .map(|(&a, &b)| a && b)
                .collect(),
        }
    }

    pub fn abs(&self) -> RealField {
        self.map(|v| v.modulus())
    }

    pub fn to_complex(&self) -> ComplexField {
        self.map(|v| v.to_complex())
    }

    /// Max modulus over the valid nodes of `mask`; invalid masked nodes are skipped.
    pub fn max_abs_on(&self, mask: &Mask) -> f64 {
        mask.indices()
            .filter(|&k| self.valid[k])
            .map(|k| self.values[k].modulus())
            .fold(0.0, f64::max)
    }
}

impl ComplexField {
    pub fn re(&self) -> RealField {
        self.map(|v| v.re)
    }
    pub fn im(&self) -> RealField {
        self.map(|v| v.im)
    }
    pub fn conj(&self) -> ComplexField {
        self.map(|v| v.conj())
    }
}

fn check_masked_valid<T: FieldValue>(f: &GridField<T>, mask: &Mask) -> Result<()> {
    let mut bad = mask.indices().filter(|&k| !f.valid[k]);
    if let Some(first) = bad.next() {
        return Err(Error::MaskedValue {
            count: 1 + bad.count(),
            first,
        });
    }
    Ok(())
}

/// Cell quadrature over a node mask: every cell whose four corners lie in the
/// mask contributes its area times the corner average. On a full rectangle
/// this is the composite trapezoid rule.
pub fn integrate<T: FieldValue>(grid: &Grid, f: &GridField<T>, mask: &Mask) -> Result<T> {
    grid.check_shape(f.shape)?;
    grid.check_shape(mask.shape)?;
    check_masked_valid(f, mask)?;
    let (nx, ny) = grid.shape();
    let w = 0.25 * grid.cell_area();
    let mut acc = T::zero();
    for j in 0..ny - 1 {
        let mut row = T::zero();
        for i in 0..nx - 1 {
            let k00 = j * nx + i;
            let k10 = k00 + 1;
            let k01 = k00 + nx;
            let k11 = k01 + 1;
            if mask.bits[k00] && mask.bits[k10] && mask.bits[k01] && mask.bits[k11] {
                row = row + f.values[k00] + f.values[k10] + f.values[k01] + f.values[k11];
            }
        }
        acc = acc + row;
    }
    Ok(acc * w)
}

/// Area of the cells integrated by [`integrate`] for this mask.
pub fn mask_area(grid: &Grid, mask: &Mask) -> f64 {
    let one = RealField::constant(grid, 1.0);
    integrate(grid, &one, mask).unwrap_or(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NormKind {
    Linf,
    L1,
    /// W^{1,s} with exponent s > 2.
    W1s(f64),
    W11,
    W21,
}

/// Central first differences. Valid where both neighbours along each axis are valid.
pub fn gradient<T: FieldValue>(grid: &Grid, f: &GridField<T>) -> [GridField<T>; 2] {
    let (nx, ny) = grid.shape();
    let (hx, hy) = (grid.hx(), grid.hy());
    let mut dx = GridField {
        shape: f.shape,
        values: vec![T::zero(); f.len()],
        valid: vec![false; f.len()],
    };
    let mut dy = dx.clone();
    for j in 0..ny {
        for i in 0..nx {
            let k = j * nx + i;
            if i > 0 && i + 1 < nx && f.valid[k - 1] && f.valid[k + 1] && f.valid[k] {
                dx.values[k] = (f.values[k + 1] - f.values[k - 1]) * (0.5 / hx);
                dx.valid[k] = true;
            }
            if j > 0 && j + 1 < ny && f.valid[k - nx] && f.valid[k + nx] && f.valid[k] {
                dy.values[k] = (f.values[k + nx] - f.values[k - nx]) * (0.5 / hy);
                dy.valid[k] = true;
            }
        }
    }
    [dx, dy]
}

/// Second differences `[∂₁₁, ∂₁₂, ∂₂₂]`. Valid where the full 3×3 stencil is valid.
pub fn hessian<T: FieldValue>(grid: &Grid, f: &GridField<T>) -> [GridField<T>; 3] {
    let (nx, ny) = grid.shape();
    let (hx, hy) = (grid.hx(), grid.hy());
    let blank = GridField {
        shape: f.shape,
        values: vec![T::zero(); f.len()],
        valid: vec![false; f.len()],
    };
    let (mut dxx, mut dxy, mut dyy) = (blank.clone(), blank.clone(), blank);
    for j in 1..ny.saturating_sub(1) {
        for i in 1..nx.saturating_sub(1) {
            let k = j * nx + i;
            let stencil_ok = [
                k - nx - 1,
                k - nx,
                k - nx + 1,
                k - 1,
                k,
                k + 1,
                k + nx - 1,
                k + nx,
                k + nx + 1,
            ]
            .iter()
            .all(|&m| f.valid[m]);
            if !stencil_ok {
                continue;
            }
            let v = &f.values;
            dxx.values[k] = (v[k + 1] - v[k] * 2.0 + v[k - 1]) * (1.0 / (hx * hx));
            dyy.values[k] = (v[k + nx] - v[k] * 2.0 + v[k - nx]) * (1.0 / (hy * hy));
            dxy.values[k] = (v[k + nx + 1] - v[k - nx + 1] - v[k + nx - 1] + v[k - nx - 1])
                * (0.25 / (hx * hy));
            dxx.valid[k] = true;
            dxy.valid[k] = true;
            dyy.valid[k] = true;
        }
    }
    [dxx, dxy, dyy]
}

/// Discrete norms. Derivative terms are integrated over the part of the mask
/// where the central stencils are defined (the outermost node layer drops out).
pub fn norm<T: FieldValue>(grid: &Grid, f: &GridField<T>, kind: NormKind, mask: &Mask) -> Result<f64> {
    grid.check_shape(f.shape)?;
    grid.check_shape(mask.shape)?;
    match kind {
        NormKind::Linf => {
            check_masked_valid(f, mask)?;
            Ok(f.max_abs_on(mask))
        }
        NormKind::L1 => integrate(grid, &f.abs(), mask),
        NormKind::W1s(s) => {
            if !(s > 2.0) || !s.is_finite() {
                return Err(Error::Exponent(format!(
                    "W^{{1,s}} requires s > n = 2, got s = {s}"
                )));
            }
            let [dx, dy] = gradient(grid, f);
            let dmask = mask.and(&dx.valid_mask()).and(&dy.valid_mask());
            let pow = |g: &GridField<T>| g.map(|v| v.modulus().powf(s));
            let total = integrate(grid, &pow(f), mask)?
                + integrate(grid, &pow(&dx), &dmask)?
                + integrate(grid, &pow(&dy), &dmask)?;
            Ok(total.powf(1.0 / s))
        }
        NormKind::W11 => {
            let [dx, dy] = gradient(grid, f);
            let m1 = mask.and(&dx.valid_mask()).and(&dy.valid_mask());
            Ok(integrate(grid, &f.abs(), mask)?
                + integrate(grid, &dx.abs(), &m1)?
                + integrate(grid, &dy.abs(), &m1)?)
        }
        NormKind::W21 => {
            let [dx, dy] = gradient(grid, f);
            let [dxx, dxy, dyy] = hessian(grid, f);
            let m1 = mask.and(&dx.valid_mask()).and(&dy.valid_mask());
            let m2 = mask.and(&dxx.valid_mask());
            let mut total = integrate(grid, &f.abs(), mask)?;
            for d in [&dx, &dy] {
                total += integrate(grid, &d.abs(), &m1)?;
            }
            for d in [&dxx, &dxy, &dyy] {
                total += integrate(grid, &d.abs(), &m2)?;
            }
            Ok(total)
        }
    }
}

/// Writes a field as CSV with header `x,y,re,im` in row-major node order.
/// Undefined nodes are written as `NaN`.
pub fn write_field_csv<T: FieldValue, W: Write>(grid: &Grid, f: &GridField<T>, mut out: W) -> std::io::Result<()> {
    let mut buf = String::with_capacity(f.len() * 48);
    buf.push_str("x,y,re,im\n");
    for k in 0..f.len() {
        let p = grid.coords(k);
        let (re, im) = if f.valid[k] {
            let z = f.values[k].to_complex();
            (z.re, z.im)
        } else {
            (f64::NAN, f64::NAN)
        };
        use std::fmt::Write as _;
        let _ = writeln!(buf, "{},{},{},{}", p[0], p[1], re, im);
    }
    out.write_all(buf.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn unit(n: usize) -> Grid {
        build_grid(Domain::unit_square(), n).unwrap()
    }

    #[test]
    fn rectangle_counts() {
        let g = unit(4);
        assert_eq!(g.node_count(), 25);
        assert_eq!(g.h(), 0.25);
        assert_eq!(g.interior_mask().count(), 9);
        assert_eq!(g.boundary_mask().count(), 16);
    }

    #[test]
    fn disk_interior_count_matches_area() {
        let g = build_grid(Domain::disk([0.0, 0.0], 1.0).unwrap(), 64).unwrap();
        let expected = PI / (g.h() * g.h());
        let n = g.interior_mask().count() as f64;
        assert!((n - expected).abs() / expected < 0.02, "{n} vs {expected}");
        // Every node has exactly one kind and boundary nodes ring the interior.
        assert!(g.boundary_mask().and(&g.interior_mask()).is_empty());
        assert!(g.boundary_mask().count() > 0);
    }

    #[test]
    fn bad_resolution() {
        assert_eq!(
            build_grid(Domain::unit_square(), 0).unwrap_err(),
            Error::InvalidResolution(0)
        );
        assert!(build_grid(Domain::unit_square(), 1).is_err());
        assert!(Domain::rectangle(0.0, 1.0).is_err());
        assert!(Domain::disk([0.0, 0.0], -1.0).is_err());
    }

    #[test]
    fn quadrature_examples() {
        let g = unit(64);
        let m = g.closure_mask();
        let one = RealField::constant(&g, 1.0);
        assert!((integrate(&g, &one, &m).unwrap() - 1.0).abs() < g.h());
        let x = RealField::from_fn(&g, |_, p| p[0]);
        assert!((integrate(&g, &x, &m).unwrap() - 0.5).abs() < g.h() * g.h());

        let g = build_grid(Domain::rectangle(2.0 * PI, 1.0).unwrap(), 64).unwrap();
        let e = ComplexField::from_fn(&g, |_, p| Complex64::new(0.0, p[0]).exp());
        let v = integrate(&g, &e, &g.closure_mask()).unwrap();
        assert!(v.norm() < g.h() * g.h(), "{v}");
    }

    #[test]
    fn quadrature_second_order() {
        // ∫∫ sin(x) e^y over (0,1)² = (1 − cos 1)(e − 1).
        let exact = (1.0 - 1f64.cos()) * (1f64.exp() - 1.0);
        let mut errs = vec![];
        let mut hs = vec![];
        for n in [16, 32, 64, 128] {
            let g = unit(n);
            let f = RealField::from_fn(&g, |_, p| p[0].sin() * p[1].exp());
            errs.push((integrate(&g, &f, &g.closure_mask()).unwrap() - exact).abs());
            hs.push(g.h());
        }
        let slope = crate::fit::loglog_slope(&hs, &errs);
        assert!(slope >= 1.8, "slope {slope}");
    }

    #[test]
    fn masked_value_error() {
        let g = unit(8);
        let mut f = RealField::constant(&g, 1.0);
        f.invalidate(10);
        let err = integrate(&g, &f, &g.closure_mask()).unwrap_err();
        assert!(matches!(err, Error::MaskedValue { count: 1, first: 10 }));
    }

    #[test]
    fn norm_examples() {
        let g = unit(32);
        let m = g.closure_mask();
        let one = RealField::constant(&g, 1.0);
        assert_eq!(norm(&g, &one, NormKind::Linf, &m).unwrap(), 1.0);
        assert!((norm(&g, &one, NormKind::L1, &m).unwrap() - 1.0).abs() < 1e-12);
        let x = RealField::from_fn(&g, |_, p| p[0]);
        assert!((norm(&g, &x, NormKind::Linf, &m).unwrap() - 1.0).abs() < 1e-12);
        assert!((norm(&g, &x, NormKind::L1, &m).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(
            norm(&g, &x, NormKind::W1s(2.0), &m),
            Err(Error::Exponent(_))
        ));
    }

    #[test]
    fn w21_of_parabola() {
        // ∫x² + ∫|2x| + ∫2 = 1/3 + 1 + 2.
        let g = unit(128);
        let f = RealField::from_fn(&g, |_, p| p[0] * p[0]);
        let v = norm(&g, &f, NormKind::W21, &g.closure_mask()).unwrap();
        assert!((v - 10.0 / 3.0).abs() / (10.0 / 3.0) < 0.03, "{v}");
    }

    #[test]
    fn shrink_sets_nest() {
        let g = unit(64);
        let a = g.shrink_set(0.05).unwrap();
        let b = g.shrink_set(0.1).unwrap();
        let c = g.shrink_set(0.2).unwrap();
        assert!(c.mask.is_subset_of(&b.mask));
        assert!(b.mask.is_subset_of(&a.mask));
        assert!(a.mask.is_subset_of(&g.interior_mask()));
        assert!(g.shrink_set(0.0).is_err());
    }

    #[test]
    fn csv_dump_layout() {
        let g = unit(2);
        let f = RealField::from_fn(&g, |k, _| k as f64);
        let mut out = Vec::new();
        write_field_csv(&g, &f, &mut out).unwrap();
        let s = String::from_utf8(out).unwrap();
        let lines: Vec<_> = s.lines().collect();
        assert_eq!(lines[0], "x,y,re,im");
        assert_eq!(lines.len(), 10);
        assert_eq!(lines[2], "0.5,0,1,0");
        assert_eq!(lines[4], "0,0.5,3,0");
    }
}
