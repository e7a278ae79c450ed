//! Critical set of u₁, its stratification into points and Lipschitz graph
//! pieces, slab covers U(η), and the fitted covering and Łojasiewicz
//! constants.

use std::collections::VecDeque;

use num_complex::Complex64;
use serde::Serialize;

use crate::contour::level_segments;
use crate::error::{Error, Result};
use crate::fit::{linear_fit, loglog_slope};
use crate::grid::{gradient, hessian, ComplexField, Grid, Mask, NodeKind, RealField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    Point,
    Curve,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Component {
    pub nodes: Vec<usize>,
    pub kind: ComponentKind,
    /// Skeleton length squared over area.
    pub elongation: f64,
    /// Share of nodes with |∇u| ≤ τ_Z/4 (absent for synthetic masks).
    pub flat_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticalSet {
    pub mask: Mask,
    pub tau_z: f64,
    pub components: Vec<Component>,
    /// The thresholded field (|∇_h u₁| or |u₁|) when detected from data.
    pub grad_mag: Option<RealField>,
}

impl CriticalSet {
    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }
}

/// Default detection threshold: 10·h·max|D²_h u| over the mask.
pub fn default_tau_z(grid: &Grid, u: &ComplexField, mask: &Mask) -> f64 {
    let hs = hessian(grid, u);
    let m = hs.iter().map(|d| d.max_abs_on(&mask.and(&d.valid_mask()))).fold(0.0, f64::max);
    10.0 * grid.h() * m
}

pub fn grad_magnitude(grid: &Grid, u: &ComplexField) -> RealField {
    let [ux, uy] = gradient(grid, u);
    ux.zip_with(&uy, |a: Complex64, b: Complex64| Complex64::new((a.norm_sqr() + b.norm_sqr()).sqrt(), 0.0))
        .map(|z| z.re)
}

/// Nodes of `w_region` with |∇_h u| ≤ τ_Z, split into 8-connected components.
pub fn detect_critical_set(u: &ComplexField, grid: &Grid, tau_z: Option<f64>, w_region: &Mask) -> Result<CriticalSet> {
    let tau = match tau_z {
        Some(t) => t,
        None => default_tau_z(grid, u, w_region),
    };
    detect_small_set(&grad_magnitude(grid, u), grid, tau, w_region, tau_z.is_some())
}

/// Nodes of `w_region` where the nonnegative field `m` is at most τ. Used for
/// |∇u| (critical sets) and |u| (nodal sets).
pub fn detect_small_set(m: &RealField, grid: &Grid, tau: f64, w_region: &Mask, explicit: bool) -> Result<CriticalSet> {
    if explicit && !(tau > 0.0) {
        return Err(Error::Precondition(format!("tau_Z must be positive, got {tau}")));
    }
    let mask = Mask::from_fn(grid, |k, _| w_region.get(k) && m.is_valid(k) && m.value(k) <= tau);
    let total = w_region.count().max(1);
    if mask.count() as f64 > 0.2 * total as f64 {
        return Err(Error::DegenerateField(format!(
            "small set covers {} of {} nodes (> 20%); the field looks locally constant",
            mask.count(),
            total
        )));
    }
    let mut set = classify(grid, mask, Some(m), tau);
    set.grad_mag = Some(m.clone());
    Ok(set)
}

/// Wraps a prescribed node mask as a critical set (no gradient information).
pub fn critical_set_from_mask(grid: &Grid, mask: Mask) -> CriticalSet {
    classify(grid, mask, None, 0.0)
}

fn classify(grid: &Grid, mask: Mask, gm: Option<&RealField>, tau: f64) -> CriticalSet {
    let comps = components(grid, &mask);
    let components = comps
        .into_iter()
        .map(|nodes| {
            let skel = thin(grid, &nodes);
            let length = skel.len() as f64 * grid.h();
            let area = nodes.len() as f64 * grid.cell_area();
            let elongation = length * length / area;
            let flat_fraction =
                gm.map(|g| nodes.iter().filter(|&&k| g.value(k) <= 0.25 * tau).count() as f64 / nodes.len() as f64);
            Component {
                kind: if elongation >= 4.0 { ComponentKind::Curve } else { ComponentKind::Point },
                nodes,
                elongation,
                flat_fraction,
            }
        })
        .collect();
    CriticalSet { mask, tau_z: tau, components, grad_mag: None }
}

fn neighbours8(grid: &Grid, k: usize) -> impl Iterator<Item = usize> + '_ {
    let (nx, ny) = grid.shape();
    let (i, j) = grid.ij(k);
    (-1i64..=1).flat_map(move |dj| {
        (-1i64..=1).filter_map(move |di| {
            let (a, b) = (i as i64 + di, j as i64 + dj);
            ((di, dj) != (0, 0) && a >= 0 && b >= 0 && (a as usize) < nx && (b as usize) < ny)
                .then(|| b as usize * nx + a as usize)
        })
    })
}

/// 8-connected components in increasing order of their smallest node.
pub fn components(grid: &Grid, mask: &Mask) -> Vec<Vec<usize>> {
    let mut seen = vec![false; grid.node_count()];
    let mut out = Vec::new();
    for start in mask.indices() {
        if seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(k) = queue.pop_front() {
            comp.push(k);
            for m in neighbours8(grid, k) {
                if mask.get(m) && !seen[m] {
                    seen[m] = true;
                    queue.push_back(m);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Zhang–Suen thinning of one component; returns skeleton node indices.
fn thin(grid: &Grid, nodes: &[usize]) -> Vec<usize> {
    let (i0, i1, j0, j1) = nodes.iter().fold((usize::MAX, 0, usize::MAX, 0), |acc, &k| {
        let (i, j) = grid.ij(k);
        (acc.0.min(i), acc.1.max(i), acc.2.min(j), acc.3.max(j))
    });
    let w = i1 - i0 + 3;
    let h = j1 - j0 + 3;
    let mut img = vec![false; w * h];
    for &k in nodes {
        let (i, j) = grid.ij(k);
        img[(j - j0 + 1) * w + (i - i0 + 1)] = true;
    }
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut del = Vec::new();
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    if !img[y * w + x] {
                        continue;
                    }
                    // P2..P9 clockwise from north.
                    let p = [
                        img[(y + 1) * w + x],
                        img[(y + 1) * w + x + 1],
                        img[y * w + x + 1],
                        img[(y - 1) * w + x + 1],
                        img[(y - 1) * w + x],
                        img[(y - 1) * w + x - 1],
                        img[y * w + x - 1],
                        img[(y + 1) * w + x - 1],
                    ];
                    let b = p.iter().filter(|&&v| v).count();
                    let a = (0..8).filter(|&t| !p[t] && p[(t + 1) % 8]).count();
                    if !(2..=6).contains(&b) || a != 1 {
                        continue;
                    }
                    let (p2, p4, p6, p8) = (p[0], p[2], p[4], p[6]);
                    let ok = if pass == 0 { !(p2 && p4 && p6) && !(p4 && p6 && p8) } else { !(p2 && p4 && p8) && !(p2 && p6 && p8) };
                    if ok {
                        del.push(y * w + x);
                    }
                }
            }
            changed |= !del.is_empty();
            for d in del {
                img[d] = false;
            }
        }
        if !changed {
            break;
        }
    }
    let mut out = Vec::new();
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            if img[y * w + x] {
                out.push(grid.index(x - 1 + i0, y - 1 + j0));
            }
        }
    }
    out
}

/// A Lipschitz graph `x_other = h(x_axis)` over a base interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphPiece {
    /// 1 or 2: the coordinate the graph is parametrized by.
    pub axis: u8,
    /// Strictly increasing base coordinates.
    pub base: Vec<f64>,
    pub values: Vec<f64>,
    /// Largest sampled slope.
    pub lipschitz: f64,
}

impl GraphPiece {
    /// Samples sorted by the base coordinate; values sharing a base
    /// coordinate are averaged, then interior samples closer than `spacing`
    /// to the previous kept one are dropped.
    fn new(axis: u8, mut pts: Vec<[f64; 2]>, spacing: f64) -> Option<Self> {
        let a = (axis - 1) as usize;
        pts.sort_by(|p, q| p[a].total_cmp(&q[a]));
        let mut base: Vec<f64> = Vec::new();
        let mut values: Vec<f64> = Vec::new();
        let mut count: Vec<f64> = Vec::new();
        for p in pts {
            match base.last() {
                Some(&b) if (p[a] - b).abs() <= 1e-12 => {
                    let n = count.last_mut().expect("nonempty");
                    let v = values.last_mut().expect("nonempty");
                    *v = (*v * *n + p[1 - a]) / (*n + 1.0);
                    *n += 1.0;
                }
                _ => {
                    base.push(p[a]);
                    values.push(p[1 - a]);
                    count.push(1.0);
                }
            }
        }
        let last = base.len().checked_sub(1)?;
        let keep: Vec<usize> = (0..base.len())
            .scan(f64::NEG_INFINITY, |prev, m| {
                let ok = m == 0 || m == last || base[m] - *prev >= spacing && base[last] - base[m] >= 0.5 * spacing;
                if ok {
                    *prev = base[m];
                }
                Some((m, ok))
            })
            .filter_map(|(m, ok)| ok.then_some(m))
            .collect();
        let base: Vec<f64> = keep.iter().map(|&m| base[m]).collect();
        let values: Vec<f64> = keep.iter().map(|&m| values[m]).collect();
        if base.len() < 2 {
            return None;
        }
        let lipschitz = base
            .windows(2)
            .zip(values.windows(2))
            .map(|(b, v)| ((v[1] - v[0]) / (b[1] - b[0])).abs())
            .fold(0.0, f64::max);
        Some(GraphPiece { axis, base, values, lipschitz })
    }

    /// h(t), extended by constants beyond the base interval.
    pub fn eval(&self, t: f64) -> f64 {
        let n = self.base.len();
        if t <= self.base[0] {
            return self.values[0];
        }
        if t >= self.base[n - 1] {
            return self.values[n - 1];
        }
        let m = self.base.partition_point(|&b| b <= t);
        let (b0, b1) = (self.base[m - 1], self.base[m]);
        let s = (t - b0) / (b1 - b0);
        self.values[m - 1] + s * (self.values[m] - self.values[m - 1])
    }

    fn point(&self, m: usize) -> [f64; 2] {
        if self.axis == 1 {
            [self.base[m], self.values[m]]
        } else {
            [self.values[m], self.base[m]]
        }
    }

    fn distance(&self, p: [f64; 2]) -> f64 {
        (0..self.base.len() - 1)
            .map(|m| segment_distance(p, self.point(m), self.point(m + 1)))
            .fold(f64::INFINITY, f64::min)
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let l2 = d[0] * d[0] + d[1] * d[1];
    let s = if l2 > 0.0 { (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / l2).clamp(0.0, 1.0) } else { 0.0 };
    (p[0] - a[0] - s * d[0]).hypot(p[1] - a[1] - s * d[1])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Stratum {
    Point { coords: [f64; 2] },
    Graph(GraphPiece),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrataDecomposition {
    pub strata: Vec<Stratum>,
    /// Grid nodes the strata were built from (refined point nodes, skeletons).
    #[serde(skip)]
    pub support_nodes: Vec<usize>,
}

impl StrataDecomposition {
    pub fn points(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        self.strata.iter().filter_map(|s| match s {
            Stratum::Point { coords } => Some(*coords),
            Stratum::Graph(_) => None,
        })
    }

    pub fn graphs(&self) -> impl Iterator<Item = &GraphPiece> + '_ {
        self.strata.iter().filter_map(|s| match s {
            Stratum::Graph(g) => Some(g),
            Stratum::Point { .. } => None,
        })
    }

    /// Euclidean distance to the union of the strata.
    pub fn distance(&self, p: [f64; 2]) -> f64 {
        self.strata
            .iter()
            .map(|s| match s {
                Stratum::Point { coords } => (p[0] - coords[0]).hypot(p[1] - coords[1]),
                Stratum::Graph(g) => g.distance(p),
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn distance_field(&self, grid: &Grid) -> RealField {
        RealField::from_fn(grid, |_, p| self.distance(p))
    }
}

/// Points become point strata; curves are thinned, traced and split into
/// monotone graph pieces over the axis with slope at most one.
pub fn extract_strata(z: &CriticalSet, grid: &Grid) -> Result<StrataDecomposition> {
    if z.is_empty() {
        return Err(Error::Refusal("the critical set is empty; there is nothing to stratify".into()));
    }
    let mut strata = Vec::new();
    let mut support = Vec::new();
    for c in &z.components {
        if let Some(ff) = c.flat_fraction {
            if ff > 0.5 {
                return Err(Error::DegenerateStratum(format!(
                    "component of {} nodes is a two-dimensional blob ({:.0}% nearly flat)",
                    c.nodes.len(),
                    100.0 * ff
                )));
            }
        }
        match c.kind {
            ComponentKind::Point => {
                let (coords, node) = locate_point(grid, &c.nodes, z.grad_mag.as_ref());
                strata.push(Stratum::Point { coords });
                support.push(node);
            }
            ComponentKind::Curve => {
                let skel = thin(grid, &c.nodes);
                for path in trace(grid, &skel) {
                    for piece in split_monotone(&path, grid.h()) {
                        strata.push(Stratum::Graph(piece));
                    }
                    support.extend(path.nodes);
                }
            }
        }
    }
    Ok(StrataDecomposition { strata, support_nodes: support })
}

/// Minimum of |∇u| refined by a parabola through the neighbours on each
/// axis; the centroid for synthetic masks.
fn locate_point(grid: &Grid, nodes: &[usize], gm: Option<&RealField>) -> ([f64; 2], usize) {
    let Some(gm) = gm else {
        let n = nodes.len() as f64;
        let c = nodes.iter().fold([0.0, 0.0], |acc, &k| {
            let p = grid.coords(k);
            [acc[0] + p[0] / n, acc[1] + p[1] / n]
        });
        return (c, grid.nearest_node(c));
    };
    let k = *nodes.iter().min_by(|&&a, &&b| gm.value(a).total_cmp(&gm.value(b))).expect("nonempty");
    let (i, j) = grid.ij(k);
    let mut p = grid.coords(k);
    let (nx, ny) = grid.shape();
    let sq = |m: usize| gm.value(m).powi(2);
    let refine = |a: usize, b: usize, c: usize, h: f64| -> f64 {
        if !(gm.is_valid(a) && gm.is_valid(c)) {
            return 0.0;
        }
        let (fa, fb, fc) = (sq(a), sq(b), sq(c));
        let den = fa - 2.0 * fb + fc;
        if den <= 0.0 {
            return 0.0;
        }
        (0.5 * h * (fa - fc) / den).clamp(-0.5 * h, 0.5 * h)
    };
    if i > 0 && i + 1 < nx {
        p[0] += refine(k - 1, k, k + 1, grid.hx());
    }
    if j > 0 && j + 1 < ny {
        p[1] += refine(k - nx, k, k + nx, grid.hy());
    }
    (p, k)
}

struct Path {
    nodes: Vec<usize>,
    pts: Vec<[f64; 2]>,
    closed: bool,
}

/// Greedy walks over the skeleton graph, starting from endpoints when there
/// are any. Fragments shorter than three nodes are dropped.
fn trace(grid: &Grid, skel: &[usize]) -> Vec<Path> {
    let in_skel: std::collections::HashSet<usize> = skel.iter().copied().collect();
    let nbrs = |k: usize| -> Vec<usize> { neighbours8(grid, k).filter(|m| in_skel.contains(m)).collect() };
    let mut visited = std::collections::HashSet::new();
    let mut paths = Vec::new();
    let mut order: Vec<usize> = skel.to_vec();
    order.sort_by_key(|&k| (nbrs(k).len() != 1, k));
    for &start in &order {
        if visited.contains(&start) {
            continue;
        }
        let mut nodes = vec![start];
        visited.insert(start);
        let mut cur = start;
        loop {
            let (ci, cj) = grid.ij(cur);
            let next = nbrs(cur)
                .into_iter()
                .filter(|m| !visited.contains(m))
                .min_by_key(|&m| {
                    let (mi, mj) = grid.ij(m);
                    // Prefer edge neighbours, then diagonals.
                    (mi.abs_diff(ci) + mj.abs_diff(cj), m)
                });
            match next {
                Some(m) => {
                    visited.insert(m);
                    nodes.push(m);
                    cur = m;
                }
                None => break,
            }
        }
        if nodes.len() < 3 {
            continue;
        }
        let closed = nodes.len() > 8 && nbrs(*nodes.last().expect("nonempty")).contains(&start);
        let pts = nodes.iter().map(|&k| grid.coords(k)).collect();
        paths.push(Path { nodes, pts, closed });
    }
    paths
}

/// Moving average over ±2 vertices, then runs of constant (axis, direction)
/// judged from the chord over ±3 vertices.
fn split_monotone(path: &Path, h: f64) -> Vec<GraphPiece> {
    let n = path.pts.len();
    let at = |i: isize| -> [f64; 2] {
        if path.closed {
            path.pts[i.rem_euclid(n as isize) as usize]
        } else {
            path.pts[i.clamp(0, n as isize - 1) as usize]
        }
    };
    let smooth: Vec<[f64; 2]> = (0..n as isize)
        .map(|i| {
            let w: Vec<[f64; 2]> = (-2..=2).map(|d| at(i + d)).collect();
            let m = w.len() as f64;
            [w.iter().map(|p| p[0]).sum::<f64>() / m, w.iter().map(|p| p[1]).sum::<f64>() / m]
        })
        .collect();
    let sat = |i: isize| -> [f64; 2] {
        if path.closed {
            smooth[i.rem_euclid(n as isize) as usize]
        } else {
            smooth[i.clamp(0, n as isize - 1) as usize]
        }
    };
    let labels: Vec<(u8, bool)> = (0..n as isize)
        .map(|i| {
            let (a, b) = (sat(i - 3), sat(i + 3));
            let t = [b[0] - a[0], b[1] - a[1]];
            if t[0].abs() >= t[1].abs() {
                (1, t[0] >= 0.0)
            } else {
                (2, t[1] >= 0.0)
            }
        })
        .collect();
    // Runs of equal labels, short runs absorbed by their predecessor.
    let mut runs: Vec<(usize, usize, (u8, bool))> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        match runs.last_mut() {
            Some(r) if r.2 == l => r.1 = i + 1,
            _ => runs.push((i, i + 1, l)),
        }
    }
    let mut merged: Vec<(usize, usize, (u8, bool))> = Vec::new();
    for r in runs {
        match merged.last_mut() {
            Some(m) if r.1 - r.0 < 4 || m.2 == r.2 => m.1 = r.1,
            _ => merged.push(r),
        }
    }
    if merged.len() > 1 && merged[0].1 - merged[0].0 < 4 {
        let first = merged.remove(0);
        merged[0].0 = first.0;
    }
    if path.closed && merged.len() > 1 && merged[0].2 == merged[merged.len() - 1].2 {
        let last = merged.pop().expect("nonempty");
        // Wrap the trailing run onto the front.
        merged[0].0 = last.0;
        merged[0].1 += n;
    }
    let count = merged.len();
    merged
        .iter()
        .enumerate()
        .filter_map(|(idx, &(s, e, (axis, _)))| {
            // Share the junction vertex with the next piece.
            let end = if idx + 1 < count || path.closed { e + 1 } else { e };
            let pts: Vec<[f64; 2]> = (s..end).map(|i| sat(i as isize)).collect();
            GraphPiece::new(axis, pts, 2.0 * h)
        })
        .collect()
}

/// Dual cell of a closure node clipped to the bounding box, as
/// ([x0, x1], [y0, y1]) plus a weight (½ on disk boundary nodes).
fn dual_cell(grid: &Grid, k: usize) -> Option<([f64; 2], [f64; 2], f64)> {
    let w = match grid.kind(k) {
        NodeKind::Exterior => return None,
        NodeKind::Boundary if matches!(grid.domain(), crate::grid::Domain::Disk { .. }) => 0.5,
        _ => 1.0,
    };
    let (o, e) = grid.domain().bounding_box();
    let p = grid.coords(k);
    let (hx, hy) = (grid.hx(), grid.hy());
    let x = [(p[0] - 0.5 * hx).max(o[0]), (p[0] + 0.5 * hx).min(o[0] + e[0])];
    let y = [(p[1] - 0.5 * hy).max(o[1]), (p[1] + 0.5 * hy).min(o[1] + e[1])];
    Some((x, y, w))
}

/// Length of [a0, a1] ∩ (lo, hi).
fn overlap(a: [f64; 2], lo: f64, hi: f64) -> f64 {
    (a[1].min(hi) - a[0].max(lo)).max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlabCover {
    pub eta: f64,
    pub mask: Mask,
    /// Area of U(η) ∩ Ω from fractional dual-cell occupancy.
    pub volume: f64,
}

/// The union of coordinate slabs of half-width η around every stratum,
/// clipped to the box |x − c| < R about the domain centre.
pub fn build_slab_cover(strata: &StrataDecomposition, eta: f64, r_box: f64, grid: &Grid) -> Result<SlabCover> {
    if !(eta > 0.0) {
        return Err(Error::Precondition(format!("eta must be positive, got {eta}")));
    }
    let c = grid.domain().center();
    let mut mask = Mask::empty(grid);
    let mut volume = 0.0;
    for k in 0..grid.node_count() {
        let Some((dx, dy, w)) = dual_cell(grid, k) else { continue };
        let p = grid.coords(k);
        let mut frac = 0.0f64;
        let mut inside = false;
        for s in &strata.strata {
            let (pa, po, da, dout, ca, other_centre) = match s {
                Stratum::Point { coords } => (p[0], p[1], dx, dy, c[0], coords[1]),
                Stratum::Graph(g) => {
                    let a = (g.axis - 1) as usize;
                    let (da, dout) = if a == 0 { (dx, dy) } else { (dy, dx) };
                    (p[a], p[1 - a], da, dout, c[a], g.eval(p[a]))
                }
            };
            let in_box = (pa - ca).abs() < r_box;
            let in_slab = (po - other_centre).abs() < eta;
            inside |= in_box && in_slab;
            let f = overlap(da, ca - r_box, ca + r_box) * overlap(dout, other_centre - eta, other_centre + eta);
            frac = frac.max(f);
        }
        if inside {
            mask.set(k, true);
        }
        volume += w * frac;
    }
    Ok(SlabCover { eta, mask, volume })
}

/// Area of the distance-ball cover {dist(x, Z) < η}, by 4×4 sub-sampling of
/// each dual cell.
pub fn ball_cover_volume(strata: &StrataDecomposition, eta: f64, grid: &Grid) -> f64 {
    let (hx, hy) = (grid.hx(), grid.hy());
    let sub = 4;
    let mut vol = 0.0;
    for k in 0..grid.node_count() {
        let Some((dx, dy, w)) = dual_cell(grid, k) else { continue };
        let p = grid.coords(k);
        // Skip nodes far from every stratum.
        if strata.distance(p) > eta + hx + hy {
            continue;
        }
        let mut hits = 0;
        for a in 0..sub {
            for b in 0..sub {
                let q = [
                    dx[0] + (dx[1] - dx[0]) * (a as f64 + 0.5) / sub as f64,
                    dy[0] + (dy[1] - dy[0]) * (b as f64 + 0.5) / sub as f64,
                ];
                if strata.distance(q) < eta {
                    hits += 1;
                }
            }
        }
        vol += w * hits as f64 / (sub * sub) as f64 * (dx[1] - dx[0]) * (dy[1] - dy[0]);
    }
    vol
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TubeRow {
    pub eta: f64,
    pub vol: f64,
    pub vol_over_eta: f64,
    pub min_dist_ratio: f64,
    pub ball_vol: f64,
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TubeFit {
    pub rows: Vec<TubeRow>,
    pub C1: f64,
    pub volume_exponent: f64,
    pub C2: f64,
    pub ball_exponent: f64,
    pub R: f64,
    /// Every support node of the strata lies in U(η) for every η.
    pub cover_ok: bool,
    /// U(η) masks are nested along the sweep.
    pub monotone_ok: bool,
}

pub const DEFAULT_ETAS: [f64; 5] = [0.025, 0.05, 0.1, 0.2, 0.4];

/// Half the larger extent of the domain's bounding box.
pub fn default_box_radius(grid: &Grid) -> f64 {
    let (_, ext) = grid.domain().bounding_box();
    0.5 * ext[0].max(ext[1])
}

/// Fits vol(U(η)) ≤ C₁η and dist(p, Z) ≥ C₂η over a sweep of η.
pub fn fit_tube_constants(strata: &StrataDecomposition, grid: &Grid, etas: &[f64], r_box: f64) -> Result<TubeFit> {
    if strata.strata.is_empty() {
        return Err(Error::Refusal("no strata to cover".into()));
    }
    let mut es: Vec<f64> = etas.to_vec();
    es.sort_by(f64::total_cmp);
    es.dedup();
    if es.len() < 4 || es.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
        return Err(Error::Precondition("need at least 4 distinct eta values in (0, 1]".into()));
    }
    let closure = grid.closure_mask();
    let dist = strata.distance_field(grid);
    let mut rows = Vec::new();
    let mut cover_ok = true;
    let mut monotone_ok = true;
    let mut prev: Option<Mask> = None;
    for &eta in &es {
        let cover = build_slab_cover(strata, eta, r_box, grid)?;
        cover_ok &= strata.support_nodes.iter().all(|&k| cover.mask.get(k));
        if let Some(p) = &prev {
            monotone_ok &= p.is_subset_of(&cover.mask);
        }
        // Exterior sample: the 500 nodes nearest Z plus 500 strided ones.
        let outside: Vec<usize> = closure.and_not(&cover.mask).indices().collect();
        let mut near = outside.clone();
        near.sort_by(|&a, &b| dist.value(a).total_cmp(&dist.value(b)).then(a.cmp(&b)));
        near.truncate(500);
        let stride = (outside.len() / 500).max(1);
        let sample = near.into_iter().chain(outside.iter().step_by(stride).copied().take(500));
        let ratio = sample.map(|k| dist.value(k) / eta).fold(f64::INFINITY, f64::min);
        rows.push(TubeRow {
            eta,
            vol: cover.volume,
            vol_over_eta: cover.volume / eta,
            min_dist_ratio: ratio,
            ball_vol: ball_cover_volume(strata, eta, grid),
        });
        prev = Some(cover.mask);
    }
    let x: Vec<f64> = rows.iter().map(|r| r.eta).collect();
    let v: Vec<f64> = rows.iter().map(|r| r.vol).collect();
    let b: Vec<f64> = rows.iter().map(|r| r.ball_vol).collect();
    Ok(TubeFit {
        C1: rows.iter().map(|r| r.vol_over_eta).fold(0.0, f64::max),
        volume_exponent: loglog_slope(&x, &v),
        C2: rows.iter().map(|r| r.min_dist_ratio).fold(f64::INFINITY, f64::min),
        ball_exponent: loglog_slope(&x, &b),
        R: r_box,
        cover_ok,
        monotone_ok,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LojasiewiczOptions {
    /// Lower quantile taken per distance bin.
    pub quantile: f64,
    /// The fit uses d ∈ [d_lo, window·d_lo].
    pub window: f64,
    pub bins: usize,
    /// Defaults to the smallest distance found in V.
    pub d_lo: Option<f64>,
}

impl Default for LojasiewiczOptions {
    fn default() -> Self {
        LojasiewiczOptions { quantile: 0.01, window: 2.0, bins: 8, d_lo: None }
    }
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LojasiewiczFit {
    pub r: f64,
    /// min over V of f/d^r.
    pub C3: f64,
    /// min of f/d^r over the fitting window.
    pub C3_local: f64,
    pub d_lo: f64,
    pub d_hi: f64,
    /// Share of V-nodes with f ≥ C₃ d^r.
    pub certificate_fraction: f64,
    pub nodes: usize,
    /// The fitted slope is below 0.1: f is bounded below away from Z and the
    /// exponent carries no information.
    pub non_binding: bool,
    pub envelope: Vec<[f64; 2]>,
}

/// Lower-envelope fit of f ≥ C₃ d^r over the nodes of V.
pub fn fit_lojasiewicz(f: &RealField, d: &RealField, v: &Mask, opts: &LojasiewiczOptions) -> Result<LojasiewiczFit> {
    let nodes: Vec<(f64, f64)> = v
        .indices()
        .filter(|&k| f.is_valid(k) && d.is_valid(k))
        .map(|k| (d.value(k), f.value(k)))
        .filter(|&(dd, ff)| dd > 0.0 && dd.is_finite() && ff > 0.0)
        .collect();
    if v.indices().any(|k| d.value(k).is_infinite()) || nodes.is_empty() {
        return Err(Error::Refusal("the critical set is empty; f is bounded below directly".into()));
    }
    let d_min = nodes.iter().map(|n| n.0).fold(f64::INFINITY, f64::min);
    let d_lo = opts.d_lo.unwrap_or(d_min).max(d_min);
    let d_hi = opts.window * d_lo;
    let (l0, l1) = (d_lo.ln(), d_hi.ln());
    let mut envelope = Vec::new();
    for b in 0..opts.bins {
        let lo = l0 + (l1 - l0) * b as f64 / opts.bins as f64;
        let hi = l0 + (l1 - l0) * (b + 1) as f64 / opts.bins as f64;
        let mut bin: Vec<(f64, f64)> = nodes
            .iter()
            .copied()
            .filter(|&(dd, _)| {
                let l = dd.ln();
                l >= lo && (l < hi || (b + 1 == opts.bins && l <= hi))
            })
            .collect();
        if bin.is_empty() {
            continue;
        }
        bin.sort_by(|x, y| x.1.total_cmp(&y.1));
        let idx = ((opts.quantile * bin.len() as f64).floor() as usize).min(bin.len() - 1);
        envelope.push([bin[idx].0, bin[idx].1]);
    }
    let r_fit = if envelope.len() >= 2 {
        let x: Vec<f64> = envelope.iter().map(|e| e[0].ln()).collect();
        let y: Vec<f64> = envelope.iter().map(|e| e[1].ln()).collect();
        linear_fit(&x, &y).0
    } else {
        0.0
    };
    let non_binding = !(r_fit >= 0.1);
    let r = if non_binding { 0.1 } else { r_fit };
    let ratio = |&(dd, ff): &(f64, f64)| ff / dd.powf(r);
    let c3 = nodes.iter().map(ratio).fold(f64::INFINITY, f64::min);
    let c3_local = nodes
        .iter()
        .filter(|n| n.0 >= d_lo && n.0 <= d_hi)
        .map(ratio)
        .fold(f64::INFINITY, f64::min);
    let ok = nodes.iter().filter(|&&(dd, ff)| ff >= c3 * dd.powf(r) * (1.0 - 1e-12)).count();
    Ok(LojasiewiczFit {
        r,
        C3: c3,
        C3_local: c3_local,
        d_lo,
        d_hi,
        certificate_fraction: ok as f64 / nodes.len() as f64,
        nodes: nodes.len(),
        non_binding,
        envelope,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileRow {
    pub t: f64,
    pub eps: f64,
    pub measure: f64,
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelProfile {
    pub rows: Vec<ProfileRow>,
    /// sup over t of H₁({f = t} ∩ Z_ε), one entry per ε.
    pub sup_by_eps: Vec<[f64; 2]>,
    /// max over t of H₁({f = t}).
    pub M_f: f64,
    /// Levels on which f is constant over a whole cell.
    pub exceptional: Vec<f64>,
}

/// Length of the part of segment ab inside the union of disks.
fn clipped_length(a: [f64; 2], b: [f64; 2], centres: &[[f64; 2]], eps: f64) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len = d[0].hypot(d[1]);
    if len == 0.0 {
        return 0.0;
    }
    let mut spans: Vec<(f64, f64)> = Vec::new();
    for c in centres {
        // |a + s d − c|² < ε², s ∈ [0, 1].
        let f = [a[0] - c[0], a[1] - c[1]];
        let qa = d[0] * d[0] + d[1] * d[1];
        let qb = 2.0 * (f[0] * d[0] + f[1] * d[1]);
        let qc = f[0] * f[0] + f[1] * f[1] - eps * eps;
        let disc = qb * qb - 4.0 * qa * qc;
        if disc <= 0.0 {
            continue;
        }
        let sq = disc.sqrt();
        let s0 = ((-qb - sq) / (2.0 * qa)).max(0.0);
        let s1 = ((-qb + sq) / (2.0 * qa)).min(1.0);
        if s1 > s0 {
            spans.push((s0, s1));
        }
    }
    spans.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut total = 0.0;
    let mut cur: Option<(f64, f64)> = None;
    for (s0, s1) in spans {
        cur = match cur {
            Some((c0, c1)) if s0 <= c1 => Some((c0, c1.max(s1))),
            Some((c0, c1)) => {
                total += c1 - c0;
                Some((s0, s1))
            }
            None => Some((s0, s1)),
        };
    }
    if let Some((c0, c1)) = cur {
        total += c1 - c0;
    }
    total * len
}

/// Level-set lengths of f over a grid of levels, globally and inside the
/// ε-neighbourhoods of the point set `z_points`.
pub fn level_measure_profile(
    f: &RealField,
    ts: &[f64],
    z_points: &[[f64; 2]],
    eps: &[f64],
    grid: &Grid,
) -> LevelProfile {
    let region = grid.closure_mask().and(&f.valid_mask());
    let (nx, ny) = grid.shape();
    let mut rows = Vec::new();
    let mut exceptional = Vec::new();
    let mut m_f = 0.0f64;
    let mut sup = vec![0.0f64; eps.len()];
    for &t in ts {
        let flat = (0..ny - 1).any(|j| {
            (0..nx - 1).any(|i| {
                let k = grid.index(i, j);
                [k, k + 1, k + nx, k + nx + 1].iter().all(|&m| region.get(m) && f.value(m) == t)
            })
        });
        if flat {
            exceptional.push(t);
            continue;
        }
        let segs = level_segments(grid, f, t, &region);
        let total: f64 = segs.iter().map(|[a, b]| (a[0] - b[0]).hypot(a[1] - b[1])).sum();
        m_f = m_f.max(total);
        for (e, s) in eps.iter().zip(sup.iter_mut()) {
            let m: f64 = segs.iter().map(|&[a, b]| clipped_length(a, b, z_points, *e)).sum();
            *s = s.max(m);
            rows.push(ProfileRow { t, eps: *e, measure: m });
        }
    }
    LevelProfile {
        rows,
        sup_by_eps: eps.iter().zip(&sup).map(|(&e, &s)| [e, s]).collect(),
        M_f: m_f,
        exceptional,
    }
}
