//! Flux-form finite differences for ∇·(γA∇u) + ω²ρu = 0 with Dirichlet data.

use std::time::Instant;

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::coefficients::{check_hermitian_pd, ProblemFields, ProblemSpec};
use crate::error::{Error, Result};
use crate::grid::{integrate, ComplexField, Grid, Mask, NodeKind};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Relative residual required of every solve.
pub const SOLVER_TOL: f64 = 1e-10;

/// Direct factorization is used up to this many cells per axis.
pub const DIRECT_MAX_CELLS: usize = 256;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    #[default]
    Auto,
    Direct,
    Krylov,
}

/// Compressed-row system over the interior unknowns; rows are scaled by
/// the cell area `hx·hy`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<Complex64>,
    pub rhs: Vec<Complex64>,
    /// Node index of each unknown.
    pub unknowns: Vec<usize>,
}

impl LinearSystem {
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, Complex64)> + '_ {
        (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |p| (self.col_idx[p], self.values[p]))
    }

    pub fn matvec(&self, x: &[Complex64], y: &mut [Complex64]) {
        y.par_iter_mut().enumerate().for_each(|(r, yr)| {
            *yr = self.row(r).map(|(c, v)| v * x[c]).sum();
        });
    }

    fn matvec_adjoint(&self, x: &[Complex64]) -> Vec<Complex64> {
        let mut y = vec![ZERO; self.n];
        for (r, &xr) in x.iter().enumerate() {
            for (c, v) in self.row(r) {
                y[c] += v.conj() * xr;
            }
        }
        y
    }

    fn residual_norm(&self, x: &[Complex64]) -> f64 {
        let mut ax = vec![ZERO; self.n];
        self.matvec(x, &mut ax);
        norm2(&ax.iter().zip(&self.rhs).map(|(a, b)| a - b).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    pub solver: String,
    pub iterations: usize,
    pub relative_residual: f64,
    pub wall_time_s: f64,
    pub unknowns: usize,
    /// Estimated smallest singular value of the unscaled operator.
    pub sigma_min_estimate: Option<f64>,
    pub condition_estimate: Option<f64>,
}

fn norm2(x: &[Complex64]) -> f64 {
    x.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Flux coefficients of the unscaled operator at node `(i, j)`: `c[dj+1][di+1]`
/// multiplies `u(i+di, j+dj)`. The ω²ρ term is not included. Face values of
/// γA are averages of the two adjacent nodes; cross derivatives on faces use
/// four-node averages.
fn flux_stencil(f: &ProblemFields, grid: &Grid, i: usize, j: usize) -> [[Complex64; 3]; 3] {
    let (hx, hy) = (grid.hx(), grid.hy());
    let k = grid.index(i, j);
    let nx = grid.nx();
    let kk = |m: usize| {
        let g = f.gamma.value(m);
        let a12 = f.a12.value(m);
        [g * f.a11.value(m), g * a12, g * a12.conj(), g * f.a22.value(m)]
    };
    let avg = |a: usize, b: usize| -> [Complex64; 4] {
        let (p, q) = (kk(a), kk(b));
        std::array::from_fn(|t| 0.5 * (p[t] + q[t]))
    };
    let e = avg(k, k + 1);
    let w = avg(k, k - 1);
    let n = avg(k, k + nx);
    let s = avg(k, k - nx);
    let mut c = [[ZERO; 3]; 3];
    let rx = 1.0 / (hx * hx);
    let ry = 1.0 / (hy * hy);
    let rxy = 0.25 / (hx * hy);
    // East face: k11 ∂₁u + k12 ∂₂u.
    c[1][2] += e[0] * rx;
    c[1][1] -= e[0] * rx;
    c[2][2] += e[1] * rxy;
    c[2][1] += e[1] * rxy;
    c[0][2] -= e[1] * rxy;
    c[0][1] -= e[1] * rxy;
    // West face, subtracted.
    c[1][1] -= w[0] * rx;
    c[1][0] += w[0] * rx;
    c[2][1] -= w[1] * rxy;
    c[2][0] -= w[1] * rxy;
    c[0][1] += w[1] * rxy;
    c[0][0] += w[1] * rxy;
    // North face: k21 ∂₁u + k22 ∂₂u.
    c[2][1] += n[3] * ry;
    c[1][1] -= n[3] * ry;
    c[2][2] += n[2] * rxy;
    c[1][2] += n[2] * rxy;
    c[2][0] -= n[2] * rxy;
    c[1][0] -= n[2] * rxy;
    // South face, subtracted.
    c[1][1] -= s[3] * ry;
    c[0][1] += s[3] * ry;
    c[1][2] -= s[2] * rxy;
    c[0][2] -= s[2] * rxy;
    c[1][0] += s[2] * rxy;
    c[0][0] += s[2] * rxy;
    c
}

/// Nodes whose full 3×3 neighbourhood lies in the closure, where the
/// stencil can be applied.
fn stencil_ok(grid: &Grid, i: usize, j: usize) -> bool {
    let (nx, ny) = grid.shape();
    if i == 0 || j == 0 || i + 1 >= nx || j + 1 >= ny {
        return false;
    }
    (0..3).all(|b| (0..3).all(|a| grid.kind(grid.index(i + a - 1, j + b - 1)) != NodeKind::Exterior))
}

/// ∇·(γA∇u) by the solver's flux stencil, defined at interior nodes whose
/// stencil sees only valid values.
pub fn flux_divergence(f: &ProblemFields, grid: &Grid, u: &ComplexField) -> ComplexField {
    let mut out = ComplexField::constant(grid, ZERO);
    for k in 0..grid.node_count() {
        let (i, j) = grid.ij(k);
        let ok = grid.kind(k) == NodeKind::Interior
            && stencil_ok(grid, i, j)
            && (0..3).all(|b| (0..3).all(|a| u.is_valid(grid.index(i + a - 1, j + b - 1))));
        if !ok {
            out.invalidate(k);
            continue;
        }
        let c = flux_stencil(f, grid, i, j);
        let mut v = ZERO;
        for (b, row) in c.iter().enumerate() {
            for (a, &cv) in row.iter().enumerate() {
                v += cv * u.value(grid.index(i + a - 1, j + b - 1));
            }
        }
        out.set(k, v);
    }
    out
}

/// The discrete residual ∇·(γA∇u) + ω²ρu at interior nodes.
pub fn apply_operator(f: &ProblemFields, grid: &Grid, u: &ComplexField) -> ComplexField {
    let div = flux_divergence(f, grid, u);
    div.zip_with(&u.zip_with(&f.rho, |a, b| a * b), |d, ur| d + f.omega2 * ur)
}

pub fn assemble(f: &ProblemFields, grid: &Grid) -> Result<LinearSystem> {
    check_hermitian_pd(f, &grid.closure_mask())?;
    let mut index = vec![usize::MAX; grid.node_count()];
    let unknowns: Vec<usize> = (0..grid.node_count()).filter(|&k| grid.kind(k) == NodeKind::Interior).collect();
    for (r, &k) in unknowns.iter().enumerate() {
        index[k] = r;
        let (i, j) = grid.ij(k);
        if !stencil_ok(grid, i, j) {
            return Err(Error::Assembly(format!("interior node {k} lacks a full stencil")));
        }
    }
    let area = grid.cell_area();
    let rows: Vec<(Vec<(usize, Complex64)>, Complex64)> = unknowns
        .par_iter()
        .map(|&k| {
            let (i, j) = grid.ij(k);
            let mut c = flux_stencil(f, grid, i, j);
            c[1][1] += f.omega2 * f.rho.value(k);
            let mut entries = Vec::with_capacity(9);
            let mut rhs = ZERO;
            for (b, row) in c.iter().enumerate() {
                for (a, &cv) in row.iter().enumerate() {
                    let m = grid.index(i + a - 1, j + b - 1);
                    let v = cv * area;
                    if index[m] != usize::MAX {
                        entries.push((index[m], v));
                    } else {
                        rhs -= v * f.g.value(m);
                    }
                }
            }
            entries.sort_by_key(|e| e.0);
            entries.retain(|e| e.1 != ZERO || e.0 == index[k]);
            (entries, rhs)
        })
        .collect();
    let mut sys = LinearSystem {
        n: unknowns.len(),
        row_ptr: Vec::with_capacity(unknowns.len() + 1),
        col_idx: Vec::new(),
        values: Vec::new(),
        rhs: Vec::with_capacity(unknowns.len()),
        unknowns,
    };
    sys.row_ptr.push(0);
    for (entries, rhs) in rows {
        for (c, v) in entries {
            sys.col_idx.push(c);
            sys.values.push(v);
        }
        sys.row_ptr.push(sys.col_idx.len());
        sys.rhs.push(rhs);
    }
    Ok(sys)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub kind: SolverKind,
    pub tol: f64,
    /// Inverse-iteration steps for the resonance check (0 disables it).
    pub resonance_iterations: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { kind: SolverKind::Auto, tol: SOLVER_TOL, resonance_iterations: 12 }
    }
}

pub fn solve_forward(spec: &ProblemSpec, grid: &Grid) -> Result<(ComplexField, SolveReport)> {
    let f = spec.sample(grid)?;
    solve_fields(&f, grid, &SolveOptions::default())
}

/// Solves with sampled data. The result equals g on boundary nodes and is
/// undefined at exterior nodes.
pub fn solve_fields(f: &ProblemFields, grid: &Grid, opts: &SolveOptions) -> Result<(ComplexField, SolveReport)> {
    let t0 = Instant::now();
    let sys = assemble(f, grid)?;
    let direct = match opts.kind {
        SolverKind::Direct => true,
        SolverKind::Krylov => false,
        SolverKind::Auto => grid.n_cells() <= DIRECT_MAX_CELLS,
    };
    let bnorm = norm2(&sys.rhs);
    let scale = if bnorm > 0.0 { bnorm } else { 1.0 };
    let mut report = SolveReport {
        solver: String::new(),
        iterations: 0,
        relative_residual: 0.0,
        wall_time_s: 0.0,
        unknowns: sys.n,
        sigma_min_estimate: None,
        condition_estimate: None,
    };

    let mut x = None;
    if direct {
        match solve_direct(&sys, opts, grid, f)? {
            Some((sol, refine, smin, cond)) => {
                report.solver = if refine > 0 { "sparse_lu+refine".into() } else { "sparse_lu".into() };
                report.iterations = refine;
                report.sigma_min_estimate = smin;
                report.condition_estimate = cond;
                x = Some(sol);
            }
            None => {}
        }
    }
    let x = match x {
        Some(x) => x,
        None => {
            let (sol, iters) = bicgstab(&sys, opts.tol, 20 * sys.n.max(100))?;
            report.solver = if direct { "bicgstab_fallback".into() } else { "bicgstab".into() };
            report.iterations = iters;
            sol
        }
    };
    report.relative_residual = sys.residual_norm(&x) / scale;
    if !(report.relative_residual <= opts.tol) {
        return Err(Error::Solver(format!(
            "relative residual {:.3e} exceeds tolerance {:.1e}",
            report.relative_residual, opts.tol
        )));
    }
    let mut u = f.g.clone();
    for k in 0..grid.node_count() {
        if grid.kind(k) == NodeKind::Exterior {
            u.invalidate(k);
        }
    }
    for (r, &k) in sys.unknowns.iter().enumerate() {
        u.set(k, x[r]);
    }
    report.wall_time_s = t0.elapsed().as_secs_f64();
    Ok((u, report))
}

type DirectOutcome = Option<(Vec<Complex64>, usize, Option<f64>, Option<f64>)>;

fn solve_direct(sys: &LinearSystem, opts: &SolveOptions, grid: &Grid, f: &ProblemFields) -> Result<DirectOutcome> {
    let mut trip = Vec::with_capacity(sys.values.len());
    for r in 0..sys.n {
        for (c, v) in sys.row(r) {
            trip.push(Triplet::new(r, c, v));
        }
    }
    let a = SparseColMat::<usize, Complex64>::try_new_from_triplets(sys.n, sys.n, &trip)
        .map_err(|e| Error::Solver(format!("sparse matrix construction failed: {e:?}")))?;
    let Ok(lu) = a.sp_lu() else {
        return Ok(None);
    };
    let solve = |rhs: &[Complex64]| -> Vec<Complex64> {
        let mut b = Mat::<Complex64>::from_fn(sys.n, 1, |i, _| rhs[i]);
        lu.solve_in_place(&mut b);
        (0..sys.n).map(|i| b[(i, 0)]).collect()
    };
    let solve_adj = |rhs: &[Complex64]| -> Vec<Complex64> {
        let mut b = Mat::<Complex64>::from_fn(sys.n, 1, |i, _| rhs[i]);
        lu.solve_adjoint_in_place(&mut b);
        (0..sys.n).map(|i| b[(i, 0)]).collect()
    };

    // Resonance check: smallest singular value of the unscaled operator by
    // inverse iteration on (MᴴM)⁻¹.
    let area = grid.cell_area();
    let mut smin = None;
    let mut cond = None;
    if opts.resonance_iterations > 0 && sys.n > 0 {
        let mut v: Vec<Complex64> =
            (0..sys.n).map(|i| Complex64::new(1.0 + ((i * 7919) % 101) as f64 / 101.0, 0.0)).collect();
        let nv = norm2(&v);
        v.iter_mut().for_each(|z| *z /= nv);
        let mut growth = 0.0;
        for _ in 0..opts.resonance_iterations {
            let w = solve(&solve_adj(&v));
            growth = norm2(&w);
            if !growth.is_finite() || growth == 0.0 {
                return Err(Error::Resonance("factorization is singular".into()));
            }
            v = w.into_iter().map(|z| z / growth).collect();
        }
        let s = 1.0 / growth.sqrt() / area;
        // Largest singular value by a few power steps on MᴴM.
        let mut p: Vec<Complex64> = vec![Complex64::new(1.0, 0.0); sys.n];
        let mut big = 0.0;
        for it in 0..20 {
            if it == 0 {
                // Alternate signs to excite the high-frequency modes.
                for (i, z) in p.iter_mut().enumerate() {
                    let (gi, gj) = grid.ij(sys.unknowns[i]);
                    if (gi + gj) % 2 == 1 {
                        *z = -*z;
                    }
                }
            }
            let np = norm2(&p);
            p.iter_mut().for_each(|z| *z /= np);
            let mut q = vec![ZERO; sys.n];
            sys.matvec(&p, &mut q);
            p = sys.matvec_adjoint(&q);
            big = norm2(&p);
        }
        let smax = big.sqrt() / area;
        smin = Some(s);
        cond = Some(smax / s);
        let rho_max = f.rho.max_abs_on(&grid.closure_mask());
        let threshold = 1e-2 * (f.omega2 * rho_max).max(1.0);
        if s < threshold {
            return Err(Error::Resonance(format!(
                "smallest singular value of the operator is {s:.3e} (threshold {threshold:.3e}, condition ~{:.3e}); \
                 omega^2 is at or near a Dirichlet eigenvalue",
                smax / s
            )));
        }
    }

    let mut x = solve(&sys.rhs);
    let bnorm = norm2(&sys.rhs).max(f64::MIN_POSITIVE);
    let mut refine = 0;
    for _ in 0..3 {
        let mut ax = vec![ZERO; sys.n];
        sys.matvec(&x, &mut ax);
        let r: Vec<Complex64> = sys.rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let rn = norm2(&r);
        if !rn.is_finite() {
            return Ok(None);
        }
        if rn <= 0.1 * opts.tol * bnorm {
            break;
        }
        let dx = solve(&r);
        x.iter_mut().zip(dx).for_each(|(a, d)| *a += d);
        refine += 1;
    }
    Ok(Some((x, refine, smin, cond)))
}

/// Jacobi-preconditioned BiCGSTAB. Stagnation is reported as a resonance error.
pub fn bicgstab(sys: &LinearSystem, tol: f64, max_iter: usize) -> Result<(Vec<Complex64>, usize)> {
    let n = sys.n;
    let dinv: Vec<Complex64> = (0..n)
        .map(|r| {
            let d = sys.row(r).find(|&(c, _)| c == r).map(|e| e.1).unwrap_or(ZERO);
            if d == ZERO {
                Complex64::new(1.0, 0.0)
            } else {
                1.0 / d
            }
        })
        .collect();
    let dot = |a: &[Complex64], b: &[Complex64]| -> Complex64 { a.iter().zip(b).map(|(x, y)| x.conj() * y).sum() };
    let bnorm = norm2(&sys.rhs);
    let mut x = vec![ZERO; n];
    if bnorm == 0.0 {
        return Ok((x, 0));
    }
    let mut r = sys.rhs.clone();
    let r0 = r.clone();
    let (mut rho, mut alpha, mut omega) = (Complex64::new(1.0, 0.0), Complex64::new(1.0, 0.0), Complex64::new(1.0, 0.0));
    let mut v = vec![ZERO; n];
    let mut p = vec![ZERO; n];
    let mut y = vec![ZERO; n];
    let mut z = vec![ZERO; n];
    let mut t = vec![ZERO; n];
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    for it in 1..=max_iter {
        let rho_new = dot(&r0, &r);
        if rho_new.norm() < 1e-300 {
            break;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
            y[i] = dinv[i] * p[i];
        }
        sys.matvec(&y, &mut v);
        alpha = rho / dot(&r0, &v);
        let mut s = r.clone();
        for i in 0..n {
            s[i] -= alpha * v[i];
        }
        if norm2(&s) <= tol * bnorm {
            for i in 0..n {
                x[i] += alpha * y[i];
            }
            return Ok((x, it));
        }
        for i in 0..n {
            z[i] = dinv[i] * s[i];
        }
        sys.matvec(&z, &mut t);
        omega = dot(&t, &s) / dot(&t, &t);
        for i in 0..n {
            x[i] += alpha * y[i] + omega * z[i];
            r[i] = s[i] - omega * t[i];
        }
        let rn = norm2(&r);
        if !rn.is_finite() {
            break;
        }
        if rn <= tol * bnorm {
            // Accept only on the true residual; otherwise restart from it.
            let mut ax = vec![ZERO; n];
            sys.matvec(&x, &mut ax);
            let true_r: Vec<Complex64> = sys.rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
            if norm2(&true_r) <= tol * bnorm {
                return Ok((x, it));
            }
            r = true_r;
        }
        if rn < 0.99 * best {
            best = rn;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > 2000 {
                break;
            }
        }
    }
    Err(Error::Resonance(format!(
        "Krylov solver stagnated at relative residual {:.3e}",
        best / bnorm
    )))
}

/// L1 norm of the discrete residual over interior nodes one layer away from
/// the boundary.
pub fn pde_residual(u: &ComplexField, f: &ProblemFields, grid: &Grid) -> Result<f64> {
    let r = apply_operator(f, grid, u);
    let (nx, ny) = grid.shape();
    let mask = Mask::from_fn(grid, |k, _| {
        let (i, j) = grid.ij(k);
        i >= 2
            && j >= 2
            && i + 2 < nx
            && j + 2 < ny
            && (0..5).all(|b| (0..5).all(|a| grid.kind(grid.index(i + a - 2, j + b - 2)) != NodeKind::Exterior))
            && r.is_valid(k)
    });
    integrate(grid, &r.abs(), &mask)
}
