//! Hölder stability chain (split estimate, η optimisation, interpolation,
//! certificate) and the two coefficient reconstructions.

use num_complex::Complex64;
use serde::Serialize;

use crate::coefficients::ProblemFields;
use crate::error::{Error, Result};
use crate::grid::{gradient, integrate, norm, ComplexField, Grid, Mask, NormKind, RealField};
use crate::solver::flux_divergence;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitBound {
    pub eta: f64,
    pub a: f64,
    pub b: f64,
    /// a·η + b·η^{−r}.
    pub value: f64,
    /// ∫_V g, the quantity being bounded.
    pub integral: f64,
    pub holds: bool,
}

/// Tube constants consumed by the chain.
#[allow(non_snake_case)]
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TubeConstants {
    pub C1: f64,
    pub C2: f64,
    pub C3: f64,
    pub r: f64,
}

impl TubeConstants {
    fn check(&self) -> Result<()> {
        if !(self.C1 > 0.0 && self.C2 > 0.0 && self.C3 > 0.0 && self.r > 0.0) {
            return Err(Error::Precondition(format!("tube constants must be positive: {self:?}")));
        }
        Ok(())
    }

    /// (C₂^r C₃)^{−1}.
    fn b_factor(&self) -> f64 {
        1.0 / (self.C2.powf(self.r) * self.C3)
    }
}

/// ∫_V g ≤ C₁η‖g‖_{L∞(V)} + (C₂^r C₃)^{−1} η^{−r} ∫_V g·f for a nonnegative g.
pub fn split_bound_real(
    g: &RealField,
    f: &RealField,
    tube: &TubeConstants,
    eta: f64,
    v: &Mask,
    grid: &Grid,
) -> Result<SplitBound> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::Precondition(format!("eta must lie in (0, 1], got {eta}")));
    }
    tube.check()?;
    let a = tube.C1 * g.max_abs_on(v);
    let b = tube.b_factor() * weighted_integral(g, f, v, grid)?;
    let value = a * eta + b * eta.powf(-tube.r);
    let integral = integrate(grid, g, v)?;
    Ok(SplitBound { eta, a, b, value, integral, holds: integral <= value * (1.0 + 1e-9) + 1e-14 })
}

/// The split bound for g = |ψ|.
pub fn split_bound(
    psi: &ComplexField,
    f: &RealField,
    tube: &TubeConstants,
    eta: f64,
    v: &Mask,
    grid: &Grid,
) -> Result<SplitBound> {
    split_bound_real(&psi.map(|z| z.norm()), f, tube, eta, v, grid)
}

/// ∫_V g·f.
pub fn weighted_integral(g: &RealField, f: &RealField, v: &Mask, grid: &Grid) -> Result<f64> {
    let gf = g.zip_with(f, |x, y| x * y);
    integrate(grid, &gf, &v.and(&gf.valid_mask()))
}

/// Minimises a·η + b·η^{−r} over η ∈ (0, 1]. Returns (η*, value); η* = 0
/// marks the infimum case b = 0 < a.
pub fn optimize_eta(a: f64, b: f64, r: f64) -> Result<(f64, f64)> {
    if !(a >= 0.0 && b >= 0.0) {
        return Err(Error::Precondition(format!("a and b must be nonnegative, got a = {a}, b = {b}")));
    }
    if !(r > 0.0) {
        return Err(Error::Precondition(format!("r must be positive, got {r}")));
    }
    if b == 0.0 {
        return Ok(if a == 0.0 { (1.0, 0.0) } else { (0.0, 0.0) });
    }
    if a == 0.0 {
        return Ok((1.0, b));
    }
    let eta = (r * b / a).powf(1.0 / (r + 1.0)).min(1.0);
    Ok((eta, a * eta + b * eta.powf(-r)))
}

/// θ = n/(n+1−n/s), κ = 1−θ for s > n; `s = ∞` is allowed.
pub fn gn_exponents(n: u32, s: f64) -> Result<(f64, f64)> {
    let nf = n as f64;
    if !(s > nf) {
        return Err(Error::Exponent(format!("the interpolation step needs s > n = {n}, got s = {s}")));
    }
    let theta = nf / (nf + 1.0 - nf / s);
    Ok((theta, 1.0 - theta))
}

/// ‖φ‖_∞ / (‖φ‖^θ_{W^{1,s}} ‖φ‖^κ_{L¹}) on `v`, or None when φ vanishes there.
pub fn gn_ratio(grid: &Grid, phi: &RealField, v: &Mask, s: f64, theta: f64, kappa: f64) -> Result<Option<f64>> {
    let sup = phi.max_abs_on(v);
    let l1 = norm(grid, phi, NormKind::L1, v)?;
    if sup == 0.0 || l1 == 0.0 {
        return Ok(None);
    }
    let w1s = norm(grid, phi, NormKind::W1s(s), v)?;
    Ok(Some(sup / (w1s.powf(theta) * l1.powf(kappa))))
}

/// The 20 test fields used to fit the interpolation constant: smooth bumps
/// (1 − |x−c|²/ρ²)₊² on a 5×4 lattice of centres in the bounding box with
/// radii cycling through {0.15, 0.25, 0.35, 0.5} of the shorter extent.
pub fn gn_test_family(grid: &Grid) -> Vec<RealField> {
    let (o, e) = grid.domain().bounding_box();
    let radii = [0.15, 0.25, 0.35, 0.5];
    let mut out = Vec::with_capacity(20);
    for a in 0..5 {
        for b in 0..4 {
            let c = [o[0] + e[0] * (a as f64 + 0.5) / 5.0, o[1] + e[1] * (b as f64 + 0.5) / 4.0];
            let rad = radii[(a + b) % 4] * e[0].min(e[1]);
            out.push(RealField::from_fn(grid, |_, p| {
                let q = 1.0 - ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)) / (rad * rad);
                q.max(0.0).powi(2)
            }));
        }
    }
    out
}

/// Smallest C' with ‖φ‖_∞ ≤ C'‖φ‖^θ_{W^{1,s}}‖φ‖^κ_{L¹} over the test family.
pub fn fit_gn_constant(grid: &Grid, v: &Mask, s: f64) -> Result<f64> {
    let (theta, kappa) = gn_exponents(2, s)?;
    let mut best = 0.0f64;
    for phi in gn_test_family(grid) {
        if let Some(r) = gn_ratio(grid, &phi, v, s, theta, kappa)? {
            best = best.max(r);
        }
    }
    if best == 0.0 {
        return Err(Error::Precondition("no test field is supported in V".into()));
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// A critical set was found; the tube and Łojasiewicz constants apply.
    Critical,
    /// The weight is bounded below on V; min f replaces the tube argument.
    Noncritical,
}

/// Inputs of the certificate. The chain runs on a nonnegative g = |ψ|^p
/// (p = 1 for γ, p = 2 for ρ).
#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateInputs {
    pub power: u32,
    pub g_linf_v: f64,
    pub g_w1s_v: f64,
    /// ∫_V g·f.
    pub weighted_integral: f64,
    pub tube: Option<TubeConstants>,
    /// min_V f; used when `tube` is None.
    pub f_min: f64,
    pub s: f64,
    pub C_prime: f64,
    /// Factor E of the estimate ∫_V g·f ≤ E·rhs.
    pub estimate_factor: f64,
    pub rhs: f64,
    /// ‖ψ‖_{L∞(Ω_d)}.
    pub lhs: f64,
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certificate {
    pub regime: Regime,
    pub theta: f64,
    pub kappa: f64,
    /// Exponent of the bound on ‖g‖_∞ in terms of ∫ g·f.
    pub alpha_g: f64,
    pub alpha: f64,
    /// C₁ raised where needed so that η* ≤ 1.
    pub C1_eff: Option<f64>,
    pub eta_star: Option<f64>,
    /// C_L with ∫_V g ≤ C_L ‖g‖^{r/(r+1)} (∫_V g f)^{1/(r+1)}.
    pub C_L: Option<f64>,
    /// The same bound evaluated in closed form and by `optimize_eta`.
    pub chain_value: Option<f64>,
    pub optimize_value: Option<f64>,
    pub C_psi: f64,
    /// C_ψ·(∫_V g f)^{α_g}, an upper bound for ‖g‖_{L∞(V)}.
    pub chain_bound: f64,
    pub chain_holds: bool,
    pub C_final: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub verdict: bool,
}

/// α = κ/(r+1) (critical) or κ (noncritical), divided by p;
/// C_final = (C_ψ E^{α_g})^{1/p}.
pub fn holder_certificate(inp: &CertificateInputs) -> Result<Certificate> {
    let (theta, kappa) = gn_exponents(2, inp.s)?;
    let p = inp.power as f64;
    let g = inp.g_linf_v;
    let i = inp.weighted_integral;
    let (regime, alpha_g, c_psi, c1_eff, eta_star, c_l, chain_value, optimize_value) = match &inp.tube {
        Some(t) => {
            t.check()?;
            let r = t.r;
            let b = t.b_factor() * i;
            let c1 = if g > 0.0 { t.C1.max(r * b / g) } else { t.C1 };
            let kr = r.powf(1.0 / (r + 1.0)) + r.powf(-r / (r + 1.0));
            let c_l = kr * c1.powf(r / (r + 1.0)) * t.b_factor().powf(1.0 / (r + 1.0));
            let chain_value = c_l * g.powf(r / (r + 1.0)) * i.powf(1.0 / (r + 1.0));
            let (eta, opt) = optimize_eta(c1 * g, b, r)?;
            let c_psi = inp.C_prime * inp.g_w1s_v.powf(theta) * (c_l * g.powf(r / (r + 1.0))).powf(kappa);
            (Regime::Critical, kappa / (r + 1.0), c_psi, Some(c1), Some(eta), Some(c_l), Some(chain_value), Some(opt))
        }
        None => {
            if !(inp.f_min > 0.0) {
                return Err(Error::DegenerateField(format!(
                    "noncritical mode needs min f > 0 on V, got {}",
                    inp.f_min
                )));
            }
            let c_psi = inp.C_prime * inp.g_w1s_v.powf(theta) * inp.f_min.powf(-kappa);
            (Regime::Noncritical, kappa, c_psi, None, None, None, None, None)
        }
    };
    let chain_bound = c_psi * i.powf(alpha_g);
    let c_final = (c_psi * inp.estimate_factor.powf(alpha_g)).powf(1.0 / p);
    let alpha = alpha_g / p;
    let bound = c_final * inp.rhs.powf(alpha);
    Ok(Certificate {
        regime,
        theta,
        kappa,
        alpha_g,
        alpha,
        C1_eff: c1_eff,
        eta_star,
        C_L: c_l,
        chain_value,
        optimize_value,
        C_psi: c_psi,
        chain_bound,
        chain_holds: g <= chain_bound * (1.0 + 1e-9),
        C_final: c_final,
        lhs: inp.lhs,
        rhs: inp.rhs,
        verdict: inp.lhs <= bound * (1.0 + 1e-12),
    })
}

/// A reconstructed coefficient; `excluded` marks closure nodes without a value.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub field: ComplexField,
    pub excluded: Mask,
}

/// ρ = −∇_h·(γA∇_h u)/(ω²u) where |u| ≥ u_floor·max|u|.
pub fn reconstruct_rho(u: &ComplexField, f: &ProblemFields, grid: &Grid, u_floor: f64) -> Result<Reconstruction> {
    if !(f.omega2 > 0.0) {
        return Err(Error::Precondition(format!("reconstruction needs omega^2 > 0, got {}", f.omega2)));
    }
    let closure = grid.closure_mask();
    let div = flux_divergence(f, grid, u);
    let umax = u.max_abs_on(&closure.and(&u.valid_mask()));
    let mut field = ComplexField::constant(grid, Complex64::new(0.0, 0.0));
    let mut excluded = closure.clone();
    for k in closure.indices() {
        field.invalidate(k);
        if div.is_valid(k) && u.is_valid(k) && u.value(k).norm() >= u_floor * umax && umax > 0.0 {
            field.set(k, -div.value(k) / (f.omega2 * u.value(k)));
            excluded.set(k, false);
        }
    }
    for k in 0..grid.node_count() {
        if !closure.get(k) {
            field.invalidate(k);
        }
    }
    if excluded.count() == closure.count() {
        return Err(Error::EmptyReconstruction("every node falls below the |u| floor".into()));
    }
    Ok(Reconstruction { field, excluded })
}

/// Real γ from the transport relation (A∇u)·∇γ + γ∇·(A∇u) = −ω²ρu,
/// marched in +x₁ from the inflow column with Heun steps and an upwind
/// x₂-difference. The complex relation is projected onto the direction of
/// p₁ = (A∇u)₁ in the least-squares sense. Nodes with |p₁| below
/// grad_floor·max|p₁| are excluded along with everything marched from them.
pub fn reconstruct_gamma_march(
    u: &ComplexField,
    f: &ProblemFields,
    boundary_gamma: &RealField,
    grid: &Grid,
    grad_floor: f64,
) -> Result<Reconstruction> {
    if !matches!(grid.domain(), crate::grid::Domain::Rectangle { .. }) {
        return Err(Error::Precondition("marching runs along grid lines of a rectangle".into()));
    }
    let (nx, ny) = grid.shape();
    let (hx, hy) = (grid.hx(), grid.hy());
    for k in grid.boundary_mask().indices() {
        let (i, j) = grid.ij(k);
        if (i == 0 || j == 0 || j == ny - 1 || i == nx - 1) && !boundary_gamma.is_valid(k) {
            return Err(Error::Precondition(format!("inflow/boundary gamma missing at node ({i}, {j})")));
        }
    }
    let [ux, uy] = gradient(grid, u);
    let mut unit = f.clone();
    unit.gamma = ComplexField::constant(grid, Complex64::new(1.0, 0.0));
    let q = flux_divergence(&unit, grid, u);
    let p = |k: usize| -> Option<[Complex64; 2]> {
        (ux.is_valid(k) && uy.is_valid(k)).then(|| {
            let g = [ux.value(k), uy.value(k)];
            [
                f.a11.value(k) * g[0] + f.a12.value(k) * g[1],
                f.a12.value(k).conj() * g[0] + f.a22.value(k) * g[1],
            ]
        })
    };
    let p1max = (0..grid.node_count()).filter_map(|k| p(k).map(|v| v[0].norm())).fold(0.0, f64::max);
    // Per node: (R, c₂, c_q) of ∂₁γ = R − c₂∂₂γ − c_q γ.
    let coeff: Vec<Option<[f64; 3]>> = (0..grid.node_count())
        .map(|k| {
            let pv = p(k)?;
            if !q.is_valid(k) || pv[0].norm() < grad_floor * p1max || pv[0].norm() == 0.0 {
                return None;
            }
            let n2 = pv[0].norm_sqr();
            let rhs = -f.omega2 * f.rho.value(k) * u.value(k);
            let proj = |z: Complex64| (pv[0].conj() * z).re / n2;
            Some([proj(rhs), proj(pv[1]), proj(q.value(k))])
        })
        .collect();
    let col_coeff = |i: usize| -> Vec<Option<[f64; 3]>> {
        // The inflow column borrows the coefficients of its neighbour.
        let i = i.clamp(1, nx - 2);
        (0..ny).map(|j| coeff[grid.index(i, j)]).collect()
    };
    let rhs_col = |cf: &[Option<[f64; 3]>], col: &[Option<f64>]| -> Vec<Option<f64>> {
        (0..ny)
            .map(|j| {
                if j == 0 || j == ny - 1 {
                    return None;
                }
                let [r, c2, cq] = cf[j]?;
                let g = col[j]?;
                let d2 = if c2 > 0.0 { (g - col[j - 1]?) / hy } else { (col[j + 1]? - g) / hy };
                Some(r - c2 * d2 - cq * g)
            })
            .collect()
    };
    let mut gamma: Vec<Option<f64>> = vec![None; grid.node_count()];
    let mut col: Vec<Option<f64>> = (0..ny).map(|j| Some(boundary_gamma.value(grid.index(0, j)))).collect();
    for (j, v) in col.iter().enumerate() {
        gamma[grid.index(0, j)] = *v;
    }
    for i in 0..nx - 1 {
        let (c0, c1) = (col_coeff(i), col_coeff(i + 1));
        let cfl = c0.iter().chain(&c1).flatten().map(|c| c[1].abs() * hx / hy).fold(0.0, f64::max);
        let m = (cfl.ceil() as usize).max(1);
        let mix = |t: f64| -> Vec<Option<[f64; 3]>> {
            c0.iter()
                .zip(&c1)
                .map(|(a, b)| {
                    let (a, b) = ((*a)?, (*b)?);
                    Some([0, 1, 2].map(|n| a[n] + t * (b[n] - a[n])))
                })
                .collect()
        };
        let bnd = |t: f64, j: usize| -> f64 {
            let (a, b) = (boundary_gamma.value(grid.index(i, j)), boundary_gamma.value(grid.index(i + 1, j)));
            a + t * (b - a)
        };
        let dt = hx / m as f64;
        for s in 0..m {
            let (t0, t1) = (s as f64 / m as f64, (s + 1) as f64 / m as f64);
            let f0 = rhs_col(&mix(t0), &col);
            let mut pred: Vec<Option<f64>> = (0..ny).map(|j| Some(col[j]? + dt * f0[j]?)).collect();
            pred[0] = Some(bnd(t1, 0));
            pred[ny - 1] = Some(bnd(t1, ny - 1));
            let f1 = rhs_col(&mix(t1), &pred);
            let mut next: Vec<Option<f64>> =
                (0..ny).map(|j| Some(col[j]? + 0.5 * dt * (f0[j]? + f1[j]?))).collect();
            next[0] = Some(bnd(t1, 0));
            next[ny - 1] = Some(bnd(t1, ny - 1));
            col = next;
        }
        if i + 1 == nx - 1 {
            col = (0..ny).map(|j| Some(boundary_gamma.value(grid.index(nx - 1, j)))).collect();
        }
        for (j, v) in col.iter().enumerate() {
            gamma[grid.index(i + 1, j)] = *v;
        }
    }
    let mut field = ComplexField::constant(grid, Complex64::new(0.0, 0.0));
    let mut excluded = Mask::empty(grid);
    for (k, g) in gamma.iter().enumerate() {
        match g {
            Some(v) => field.set(k, Complex64::new(*v, 0.0)),
            None => {
                field.invalidate(k);
                excluded.set(k, true);
            }
        }
    }
    Ok(Reconstruction { field, excluded })
}
