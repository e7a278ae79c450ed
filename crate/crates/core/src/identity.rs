//! Integral identities between two forward solutions and the fundamental
//! estimate bounding ∫|ψ| A∇u₁·∇ū₁.

use num_complex::Complex64;
use serde::Serialize;

use crate::coefficients::ProblemFields;
use crate::error::{Error, Result};
use crate::grid::{gradient, integrate, norm, ComplexField, Grid, NormKind, RealField};
use crate::sectors::{cutoff_tau, theta_clamped, theta_field, SectorDecomposition};

/// Floor for the relative-residual denominator.
const TINY: f64 = 1e-300;

/// The smoothstep cutoff's gradient bound.
pub const C_TAU: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityReport {
    pub lhs: Complex64,
    pub rhs: Complex64,
    pub residual: f64,
    pub relative_residual: f64,
    pub n_cells: usize,
    pub h_band: Option<f64>,
}

impl IdentityReport {
    fn new(lhs: Complex64, rhs: Complex64, grid: &Grid, h_band: Option<f64>) -> Self {
        let residual = (lhs - rhs).norm();
        IdentityReport {
            lhs,
            rhs,
            residual,
            relative_residual: residual / lhs.norm().max(rhs.norm()).max(TINY),
            n_cells: grid.n_cells(),
            h_band,
        }
    }
}

/// ζ = ū₁·τ·θ_{k,h}.
pub fn build_test_function(u1: &ComplexField, tau: &RealField, theta_kh: &RealField) -> ComplexField {
    let w = tau.zip_with(theta_kh, |a, b| a * b);
    u1.zip_with(&w, |u, t| u.conj() * t)
}

/// A∇u·∇v with the unconjugated product, A Hermitian with a21 = conj(a12).
#[inline]
fn a_dot(p: &ProblemFields, k: usize, gu: [Complex64; 2], gv: [Complex64; 2]) -> Complex64 {
    let a11 = p.a11.value(k);
    let a12 = p.a12.value(k);
    let a22 = p.a22.value(k);
    (a11 * gu[0] + a12 * gu[1]) * gv[0] + (a12.conj() * gu[0] + a22 * gu[1]) * gv[1]
}

/// A∇u at node k.
#[inline]
fn a_grad(p: &ProblemFields, k: usize, gu: [Complex64; 2]) -> [Complex64; 2] {
    let a12 = p.a12.value(k);
    [p.a11.value(k) * gu[0] + a12 * gu[1], a12.conj() * gu[0] + p.a22.value(k) * gu[1]]
}

/// Nodewise A∇u·∇v, defined where both gradients are.
fn bilinear(grid: &Grid, p: &ProblemFields, u: &ComplexField, v: &ComplexField) -> ComplexField {
    let [ux, uy] = gradient(grid, u);
    let [vx, vy] = gradient(grid, v);
    let mut out = ComplexField::constant(grid, Complex64::new(0.0, 0.0));
    for k in 0..grid.node_count() {
        if ux.is_valid(k) && uy.is_valid(k) && vx.is_valid(k) && vy.is_valid(k) {
            out.set(k, a_dot(p, k, [ux.value(k), uy.value(k)], [vx.value(k), vy.value(k)]));
        } else {
            out.invalidate(k);
        }
    }
    out
}

/// The energy density f = A∇u·∇ū (real, nonnegative for Hermitian positive A).
pub fn energy_density(grid: &Grid, p: &ProblemFields, u: &ComplexField) -> RealField {
    bilinear(grid, p, u, &u.conj()).map(|z| z.re)
}

fn check_trace(grid: &Grid, zeta: &ComplexField) -> Result<()> {
    let scale = zeta.max_abs_on(&grid.closure_mask()).max(1.0);
    let worst = zeta.max_abs_on(&grid.boundary_mask());
    if worst > 1e-12 * scale {
        return Err(Error::Precondition(format!(
            "test function must vanish on the boundary; |zeta| reaches {worst:.3e} there"
        )));
    }
    Ok(())
}

/// Corner indices `[k00, k10, k01, k11]` of every cell whose corners all lie
/// in the closure and carry valid values of `fields`.
fn cells<'a>(grid: &'a Grid, fields: &'a [&'a ComplexField]) -> impl Iterator<Item = [usize; 4]> + 'a {
    let (nx, ny) = grid.shape();
    let closure = grid.closure_mask();
    (0..ny - 1).flat_map(move |j| (0..nx - 1).map(move |i| (i, j))).filter_map(move |(i, j)| {
        let k = j * nx + i;
        let ks = [k, k + 1, k + nx, k + nx + 1];
        ks.iter()
            .all(|&m| closure.get(m) && fields.iter().all(|f| f.is_valid(m)))
            .then_some(ks)
    })
}

#[inline]
fn cell_avg(f: &ComplexField, ks: &[usize; 4]) -> Complex64 {
    0.25 * (f.value(ks[0]) + f.value(ks[1]) + f.value(ks[2]) + f.value(ks[3]))
}

/// Cell-centred differences.
#[inline]
fn cell_grad(grid: &Grid, f: &ComplexField, ks: &[usize; 4]) -> [Complex64; 2] {
    let v = ks.map(|k| f.value(k));
    [
        ((v[1] - v[0]) + (v[3] - v[2])) / (2.0 * grid.hx()),
        ((v[2] - v[0]) + (v[3] - v[1])) / (2.0 * grid.hy()),
    ]
}

/// A∇u·∇v with cell-averaged A.
#[inline]
fn cell_a_dot(p: &ProblemFields, ks: &[usize; 4], gu: [Complex64; 2], gv: [Complex64; 2]) -> Complex64 {
    let a11 = cell_avg(&p.a11, ks);
    let a12 = cell_avg(&p.a12, ks);
    let a22 = cell_avg(&p.a22, ks);
    (a11 * gu[0] + a12 * gu[1]) * gv[0] + (a12.conj() * gu[0] + a22 * gu[1]) * gv[1]
}

/// ∫ψA∇u₁·∇ζ against −∫γ₂A∇(u₂−u₁)·∇ζ + ω²∫ρ(u₂−u₁)ζ, both by cell-centre
/// quadrature over the closure.
#[allow(clippy::too_many_arguments)]
pub fn key_identity_check(
    grid: &Grid,
    p1: &ProblemFields,
    gamma2: &ComplexField,
    u1: &ComplexField,
    u2: &ComplexField,
    zeta: &ComplexField,
    h_band: Option<f64>,
) -> Result<IdentityReport> {
    check_trace(grid, zeta)?;
    let w = u2.zip_with(u1, |a, b| a - b);
    let area = grid.cell_area();
    let fields = [u1, u2, zeta, gamma2, &p1.gamma, &p1.rho];
    let (mut lhs, mut rhs) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
    for ks in cells(grid, &fields) {
        let gz = cell_grad(grid, zeta, &ks);
        let psi = cell_avg(gamma2, &ks) - cell_avg(&p1.gamma, &ks);
        lhs += area * psi * cell_a_dot(p1, &ks, cell_grad(grid, u1, &ks), gz);
        rhs += area
            * (-cell_avg(gamma2, &ks) * cell_a_dot(p1, &ks, cell_grad(grid, &w, &ks), gz)
                + p1.omega2 * cell_avg(&p1.rho, &ks) * cell_avg(&w, &ks) * cell_avg(zeta, &ks));
    }
    Ok(IdentityReport::new(lhs, rhs, grid, h_band))
}

/// ω²∫u₁(ρ₂−ρ₁)ζ against ∫γA∇(u₂−u₁)·∇ζ − ω²∫ρ₂(u₂−u₁)ζ.
pub fn potential_identity_check(
    grid: &Grid,
    p1: &ProblemFields,
    rho2: &ComplexField,
    u1: &ComplexField,
    u2: &ComplexField,
    zeta: &ComplexField,
    h_band: Option<f64>,
) -> Result<IdentityReport> {
    if p1.omega2 == 0.0 {
        return Err(Error::DegenerateField("omega^2 = 0 makes the potential identity trivial".into()));
    }
    check_trace(grid, zeta)?;
    let w = u2.zip_with(u1, |a, b| a - b);
    let area = grid.cell_area();
    let fields = [u1, u2, zeta, rho2, &p1.gamma, &p1.rho];
    let (mut lhs, mut rhs) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
    for ks in cells(grid, &fields) {
        let drho = cell_avg(rho2, &ks) - cell_avg(&p1.rho, &ks);
        let z = cell_avg(zeta, &ks);
        lhs += area * p1.omega2 * cell_avg(u1, &ks) * drho * z;
        rhs += area
            * (cell_avg(&p1.gamma, &ks) * cell_a_dot(p1, &ks, cell_grad(grid, &w, &ks), cell_grad(grid, zeta, &ks))
                - p1.omega2 * cell_avg(rho2, &ks) * cell_avg(&w, &ks) * z);
    }
    Ok(IdentityReport::new(lhs, rhs, grid, h_band))
}

/// ∫ψA∇u₁·∇ζ alone, by the same cell quadrature.
fn identity_lhs(grid: &Grid, p1: &ProblemFields, psi: &ComplexField, u1: &ComplexField, zeta: &ComplexField) -> Complex64 {
    let area = grid.cell_area();
    let fields = [u1, zeta, psi];
    cells(grid, &fields)
        .map(|ks| {
            area * cell_avg(psi, &ks) * cell_a_dot(p1, &ks, cell_grad(grid, u1, &ks), cell_grad(grid, zeta, &ks))
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SectorIntegral {
    pub kappa_lo: f64,
    pub kappa_hi: f64,
    /// ∫ over {θ_k ≥ 0} of ψ A∇u₁·∇ū₁.
    pub integral: Complex64,
    /// ∫ over {θ_k ≥ 0} of |ψ| A∇u₁·∇ū₁.
    pub abs_integral: f64,
}

/// One h_band snapshot: ∫ψA∇u₁·∇ζ_{k,h} per sector with ζ_{k,h} = ū₁τ_hθ_{k,h}.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandSnapshot {
    pub h_band: f64,
    pub sector_lhs: Vec<Complex64>,
    pub band_nodes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[allow(non_snake_case)]
pub struct EstimateReport {
    pub lhs: f64,
    pub lhs_imag: f64,
    pub sector_integrals: Vec<SectorIntegral>,
    pub ell: usize,
    pub C_tau: f64,
    pub H1_boundary: f64,
    pub u_grad_sup: f64,
    pub rho_sup: f64,
    pub C: f64,
    pub sigma: f64,
    pub four_C_over_sin: f64,
    pub psi_boundary_linf: f64,
    pub w21_diff: f64,
    pub rhs: f64,
    /// (1/sin(σ/2))·Σ_k |∫_{Ω̂_k} ψ A∇u₁·∇ū₁|, the chain's intermediate value.
    pub sector_chain: f64,
    pub margin_ratio: f64,
    pub verdict: bool,
    pub h_band_sweep: Vec<BandSnapshot>,
}

/// Evaluates both sides of the fundamental estimate with C_τ = 3.
#[allow(clippy::too_many_arguments)]
pub fn fundamental_estimate_check(
    grid: &Grid,
    p1: &ProblemFields,
    psi: &ComplexField,
    u1: &ComplexField,
    u2: &ComplexField,
    sectors: &SectorDecomposition,
    h_bands: &[f64],
) -> Result<EstimateReport> {
    if !sectors.is_admissible() {
        return Err(Error::Refusal("the fundamental estimate needs an admissible pair".into()));
    }
    let sigma = sectors.sigma;
    let closure = grid.closure_mask();
    let [ux, uy] = gradient(grid, u1);
    let energy = energy_density(grid, p1, u1);
    let emask = closure.and(&energy.valid_mask());

    let density = psi.zip_with(&energy, |z, e| Complex64::new(z.norm() * e, 0.0));
    let lhs_c = integrate(grid, &density, &emask)?;

    let mut sector_integrals = Vec::with_capacity(sectors.sectors.len());
    for (k, s) in sectors.sectors.iter().enumerate() {
        let theta = theta_field(psi, sectors, k)?;
        let chi = theta.map(|t| if t >= 0.0 { 1.0 } else { 0.0 });
        let signed = psi.zip_with(&energy, |z, e| z * e).zip_with(&chi, |a, c| a * c);
        let absv = density.zip_with(&chi, |a, c| a * c);
        sector_integrals.push(SectorIntegral {
            kappa_lo: s.kappa_lo,
            kappa_hi: s.kappa_hi,
            integral: integrate(grid, &signed, &emask)?,
            abs_integral: integrate(grid, &absv, &emask)?.re,
        });
    }

    let u_grad_sup = emask
        .indices()
        .filter(|&k| ux.is_valid(k) && uy.is_valid(k))
        .map(|k| {
            let ag = a_grad(p1, k, [ux.value(k), uy.value(k)]);
            u1.value(k).norm() * (ag[0].norm_sqr() + ag[1].norm_sqr()).sqrt()
        })
        .fold(0.0, f64::max);
    let h1 = grid.domain().boundary_length();
    let rho_sup = p1.rho.max_abs_on(&closure);
    let c = (C_TAU * h1 * u_grad_sup).max(2.0 / (sigma * sigma) + p1.omega2 * rho_sup);
    let sin = (0.5 * sigma).sin();
    let four_c = 4.0 * c / sin;
    let psi_b = psi.max_abs_on(&grid.boundary_mask());
    let w = u2.zip_with(u1, |a, b| a - b);
    let w21 = norm(grid, &w, NormKind::W21, &closure)?;
    let rhs = four_c * (psi_b + w21);
    let sector_chain = sector_integrals.iter().map(|s| s.integral.norm()).sum::<f64>() / sin;

    let mut sweep = Vec::with_capacity(h_bands.len());
    for &h in h_bands {
        if h <= 2.0 * grid.h() {
            continue;
        }
        let tau = cutoff_tau(&grid.interior_mask(), h, grid)?;
        let mut lhs_k = Vec::new();
        let mut band_nodes = Vec::new();
        for k in 0..sectors.sectors.len() {
            let theta = theta_field(psi, sectors, k)?;
            let (tkh, band) = theta_clamped(&theta, h)?;
            let zeta = build_test_function(u1, &tau, &tkh);
            lhs_k.push(identity_lhs(grid, p1, psi, u1, &zeta));
            band_nodes.push(band.count());
        }
        sweep.push(BandSnapshot { h_band: h, sector_lhs: lhs_k, band_nodes });
    }

    Ok(EstimateReport {
        lhs: lhs_c.re,
        lhs_imag: lhs_c.im,
        ell: sectors.sectors.len(),
        sector_integrals,
        C_tau: C_TAU,
        H1_boundary: h1,
        u_grad_sup,
        rho_sup,
        C: c,
        sigma,
        four_C_over_sin: four_c,
        psi_boundary_linf: psi_b,
        w21_diff: w21,
        rhs,
        sector_chain,
        margin_ratio: if rhs > 0.0 { lhs_c.re / rhs } else { 0.0 },
        verdict: lhs_c.re <= rhs,
        h_band_sweep: sweep,
    })
}

/// Default h_band sweep.
pub const H_BANDS: [f64; 3] = [0.2, 0.1, 0.05];

/// The product x₁(1−x₁)x₂(1−x₂) rescaled to a rectangle's extents, or
/// (1 − |x−c|²/R²) on a disk. Vanishes on the boundary.
pub fn boundary_bump(grid: &Grid) -> RealField {
    let (lo, ext) = grid.domain().bounding_box();
    let disk = matches!(grid.domain(), crate::grid::Domain::Disk { .. });
    let closure = grid.closure_mask();
    RealField::from_fn(grid, |k, p| {
        if !closure.get(k) || grid.kind(k) == crate::grid::NodeKind::Boundary {
            return 0.0;
        }
        if disk {
            let c = grid.domain().center();
            let r = 0.5 * ext[0];
            (1.0 - ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)) / (r * r)).max(0.0)
        } else {
            let s = (p[0] - lo[0]) / ext[0];
            let t = (p[1] - lo[1]) / ext[1];
            16.0 * s * (1.0 - s) * t * (1.0 - t)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{CoefficientField, MatrixField, ProblemSpec};
    use crate::fit::loglog_slope;
    use crate::grid::{build_grid, Domain};
    use crate::sectors::sector_decompose;
    use crate::solver::solve_forward;
    use std::f64::consts::PI;

    fn spec(gamma: &str, rho: &str, omega2: f64, g: &str) -> ProblemSpec {
        ProblemSpec {
            gamma: CoefficientField::parse(gamma).unwrap(),
            rho: CoefficientField::parse(rho).unwrap(),
            a: MatrixField::identity(),
            omega2,
            g: CoefficientField::parse(g).unwrap(),
        }
    }

    const BUMP: &str = "x1*(1-x1)*x2*(1-x2)";

    #[test]
    fn test_function_examples() {
        let g = build_grid(Domain::unit_square(), 8).unwrap();
        let u = ComplexField::from_fn(&g, |_, p| Complex64::from_polar(1.0, p[0]));
        let zero = RealField::constant(&g, 0.0);
        let one = RealField::constant(&g, 1.0);
        assert!(build_test_function(&u, &zero, &one).values().iter().all(|z| z.norm() == 0.0));
        let ones = ComplexField::constant(&g, Complex64::new(1.0, 0.0));
        assert!(build_test_function(&ones, &one, &one).values().iter().all(|&z| z == Complex64::new(1.0, 0.0)));
        let tau = RealField::from_fn(&g, |_, p| p[1]);
        let th = RealField::from_fn(&g, |_, p| 0.5 * p[0]);
        let z = build_test_function(&u, &tau, &th);
        for k in 0..g.node_count() {
            let p = g.coords(k);
            let expect = Complex64::from_polar(1.0, -p[0]) * p[1] * 0.5 * p[0];
            assert!((z.value(k) - expect).norm() < 1e-15);
        }
    }

    fn key_identity_at(n: usize) -> IdentityReport {
        let g = build_grid(Domain::unit_square(), n).unwrap();
        let s1 = spec("1", "1", 1.0, "exp(i*x1)");
        let mut s2 = s1.clone();
        s2.gamma = CoefficientField::parse(&format!("1+0.1*{BUMP}")).unwrap();
        let (u1, _) = solve_forward(&s1, &g).unwrap();
        let (u2, _) = solve_forward(&s2, &g).unwrap();
        let p1 = s1.sample(&g).unwrap();
        let gamma2 = s2.gamma.evaluate(&g).unwrap();
        let bump = RealField::from_fn(&g, |_, p| p[0] * (1.0 - p[0]) * p[1] * (1.0 - p[1]));
        let zeta = u1.conj().zip_with(&bump, |a, b| a * b);
        key_identity_check(&g, &p1, &gamma2, &u1, &u2, &zeta, None).unwrap()
    }

    #[test]
    fn key_identity_converges() {
        let ns = [32, 64, 128];
        let reps: Vec<IdentityReport> = ns.iter().map(|&n| key_identity_at(n)).collect();
        let h: Vec<f64> = ns.iter().map(|&n| 1.0 / n as f64).collect();
        let r: Vec<f64> = reps.iter().map(|r| r.relative_residual).collect();
        let slope = loglog_slope(&h, &r);
        assert!(slope >= 0.8, "slope {slope} residuals {r:?}");
        assert!(r[2] < 1e-2, "{r:?}");
    }

    #[test]
    fn identical_problems_give_zero() {
        let g = build_grid(Domain::unit_square(), 16).unwrap();
        let s = spec("1", "1", 1.0, "exp(i*x1)");
        let (u, _) = solve_forward(&s, &g).unwrap();
        let p = s.sample(&g).unwrap();
        let bump = RealField::from_fn(&g, |_, q| q[0] * (1.0 - q[0]) * q[1] * (1.0 - q[1]));
        let zeta = u.conj().zip_with(&bump, |a, b| a * b);
        let r = key_identity_check(&g, &p, &p.gamma, &u, &u, &zeta, None).unwrap();
        assert_eq!(r.lhs, Complex64::new(0.0, 0.0));
        assert_eq!(r.rhs, Complex64::new(0.0, 0.0));
        let r = potential_identity_check(&g, &p, &p.rho, &u, &u, &zeta, None).unwrap();
        assert_eq!((r.lhs.norm(), r.rhs.norm()), (0.0, 0.0));
    }

    #[test]
    fn nonzero_trace_is_rejected() {
        let g = build_grid(Domain::unit_square(), 8).unwrap();
        let s = spec("1", "1", 1.0, "exp(i*x1)");
        let (u, _) = solve_forward(&s, &g).unwrap();
        let p = s.sample(&g).unwrap();
        let one = ComplexField::constant(&g, Complex64::new(1.0, 0.0));
        assert!(matches!(
            key_identity_check(&g, &p, &p.gamma, &u, &u, &one, None),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn potential_identity_converges() {
        let mut res = Vec::new();
        let ns = [32, 64, 128];
        for &n in &ns {
            let g = build_grid(Domain::unit_square(), n).unwrap();
            let s1 = spec("1", "1", 1.0, "exp(i*x1)");
            let mut s2 = s1.clone();
            s2.rho = CoefficientField::parse("1+0.1*x1").unwrap();
            let (u1, _) = solve_forward(&s1, &g).unwrap();
            let (u2, _) = solve_forward(&s2, &g).unwrap();
            let p1 = s1.sample(&g).unwrap();
            let rho2 = s2.rho.evaluate(&g).unwrap();
            let bump = RealField::from_fn(&g, |_, p| p[0] * (1.0 - p[0]) * p[1] * (1.0 - p[1]));
            let zeta = u1.conj().zip_with(&bump, |a, b| a * b);
            res.push(potential_identity_check(&g, &p1, &rho2, &u1, &u2, &zeta, None).unwrap().relative_residual);
        }
        let h: Vec<f64> = ns.iter().map(|&n| 1.0 / n as f64).collect();
        assert!(loglog_slope(&h, &res) >= 0.8, "{res:?}");
    }

    #[test]
    fn potential_identity_needs_frequency() {
        let g = build_grid(Domain::unit_square(), 8).unwrap();
        let s = spec("1", "1", 0.0, "x1");
        let (u, _) = solve_forward(&s, &g).unwrap();
        let p = s.sample(&g).unwrap();
        let z = ComplexField::constant(&g, Complex64::new(0.0, 0.0));
        assert!(matches!(
            potential_identity_check(&g, &p, &p.rho, &u, &u, &z, None),
            Err(Error::DegenerateField(_))
        ));
    }

    fn estimate_for(gamma2: &str) -> EstimateReport {
        let g = build_grid(Domain::unit_square(), 64).unwrap();
        let s1 = spec("1", "1", 1.0, "exp(i*x1)");
        let mut s2 = s1.clone();
        s2.gamma = CoefficientField::parse(gamma2).unwrap();
        let (u1, _) = solve_forward(&s1, &g).unwrap();
        let (u2, _) = solve_forward(&s2, &g).unwrap();
        let p1 = s1.sample(&g).unwrap();
        let psi = s2.gamma.evaluate(&g).unwrap().zip_with(&p1.gamma, |a, b| a - b);
        let sectors = sector_decompose(&psi, 0.1 * PI, &g).unwrap();
        fundamental_estimate_check(&g, &p1, &psi, &u1, &u2, &sectors, &H_BANDS).unwrap()
    }

    #[test]
    fn estimate_examples() {
        let same = estimate_for("1");
        assert_eq!(same.lhs, 0.0);
        assert!(same.verdict);
        for g2 in [format!("1+0.1*{BUMP}"), format!("1+(1+0.5*i)*0.1*{BUMP}")] {
            let r = estimate_for(&g2);
            assert!(r.verdict && r.lhs > 0.0 && r.margin_ratio < 1.0, "{r:?}");
            assert!(r.lhs_imag.abs() <= 1e-10 * r.lhs);
            let total: f64 = r.sector_integrals.iter().map(|s| s.abs_integral).sum();
            assert!(r.lhs <= total * (1.0 + 1e-12));
            assert!(r.lhs <= r.sector_chain * (1.0 + 1e-9));
            assert_eq!(r.h_band_sweep.len(), 3);
        }
    }

    #[test]
    fn scaling_covariance() {
        let g = build_grid(Domain::unit_square(), 32).unwrap();
        let run = |lam: f64| {
            let s1 = spec("1", "1", 1.0, &format!("{lam}*exp(i*x1)"));
            let mut s2 = s1.clone();
            s2.gamma = CoefficientField::parse(&format!("1+0.1*{BUMP}")).unwrap();
            let (u1, _) = solve_forward(&s1, &g).unwrap();
            let (u2, _) = solve_forward(&s2, &g).unwrap();
            let p1 = s1.sample(&g).unwrap();
            let gamma2 = s2.gamma.evaluate(&g).unwrap();
            let psi = gamma2.zip_with(&p1.gamma, |a, b| a - b);
            let sectors = sector_decompose(&psi, 0.1 * PI, &g).unwrap();
            let est = fundamental_estimate_check(&g, &p1, &psi, &u1, &u2, &sectors, &[]).unwrap();
            let bump = RealField::from_fn(&g, |_, p| p[0] * (1.0 - p[0]) * p[1] * (1.0 - p[1]));
            let zeta = u1.conj().zip_with(&bump, |a, b| a * b);
            let id = key_identity_check(&g, &p1, &gamma2, &u1, &u2, &zeta, None).unwrap();
            (est.lhs, est.w21_diff, id.residual)
        };
        let (l1, w1, r1) = run(1.0);
        let (l2, w2, r2) = run(2.0);
        assert!((l2 / l1 - 4.0).abs() < 1e-8);
        assert!((w2 / w1 - 2.0).abs() < 1e-8);
        assert!((r2 / r1 - 4.0).abs() < 1e-6);
    }

    #[test]
    fn refuses_inadmissible_sectors() {
        let g = build_grid(Domain::unit_square(), 8).unwrap();
        let s = spec("1", "1", 1.0, "x1");
        let (u, _) = solve_forward(&s, &g).unwrap();
        let p = s.sample(&g).unwrap();
        let mut d = SectorDecomposition::from_angles(vec![0.0, 2.0, 4.0], 0.1 * PI);
        d.verdict = crate::sectors::Verdict::NotAdmissible { witness: 1.0, measure: 1.0 };
        assert!(matches!(
            fundamental_estimate_check(&g, &p, &p.gamma, &u, &u, &d, &[]),
            Err(Error::Refusal(_))
        ));
    }
}
