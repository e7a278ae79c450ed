//! End-to-end pipelines behind the command-line subcommands.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::coefficients::{check_coefficients, CoefficientCheck, ProblemFields, ProblemSpec};
use crate::config::{ExperimentConfig, Mode, Perturbation};
use crate::error::{Error, Result, StageExt};
use crate::geometry::{
    default_box_radius, detect_critical_set, detect_small_set, extract_strata, fit_lojasiewicz, fit_tube_constants,
    level_measure_profile, Component, ComponentKind, LevelProfile, LojasiewiczFit, LojasiewiczOptions, Stratum, TubeFit,
};
use crate::grid::{build_grid, gradient, norm, ComplexField, Grid, Mask, NormKind, RealField};
use crate::identity::{
    build_test_function, energy_density, fundamental_estimate_check, key_identity_check, potential_identity_check,
    EstimateReport, IdentityReport,
};
use crate::sectors::{cutoff_tau, sector_decompose, theta_clamped, theta_field, SectorDecomposition, Verdict};
use crate::solver::{pde_residual, solve_fields, SolveOptions, SolveReport};
use crate::stability::{
    fit_gn_constant, gn_exponents, gn_ratio, holder_certificate, reconstruct_gamma_march, reconstruct_rho,
    split_bound_real, weighted_integral, Certificate, CertificateInputs, Regime, SplitBound, TubeConstants,
};

/// W ⊃ V ⊃ Ω_d as depth masks.
#[derive(Debug, Clone)]
pub struct Regions {
    pub w: Mask,
    pub v: Mask,
    pub omega_d: Mask,
    pub v_depth: f64,
}

pub fn regions(grid: &Grid, cfg: &ExperimentConfig) -> Regions {
    let diam = grid.domain().diameter();
    Regions {
        w: grid.depth_mask(cfg.tube.w_margin * diam),
        v: grid.depth_mask(cfg.tube.v_margin * diam),
        omega_d: grid.depth_mask(cfg.tube.d_margin * diam),
        v_depth: cfg.tube.v_margin * diam,
    }
}

/// Grid and sampled first problem.
pub fn prepare(cfg: &ExperimentConfig) -> Result<(Grid, ProblemFields)> {
    let grid = build_grid(cfg.domain.clone(), cfg.grid.n_cells).stage("grid")?;
    let p1 = cfg.problem1.sample(&grid).stage("coefficients")?;
    Ok((grid, p1))
}

pub struct Setup {
    pub grid: Grid,
    pub p1: ProblemFields,
    pub u1: ComplexField,
    pub solve1: SolveReport,
    pub regions: Regions,
}

pub fn setup(cfg: &ExperimentConfig) -> Result<Setup> {
    let (grid, p1) = prepare(cfg)?;
    let (u1, solve1) = solve_fields(&p1, &grid, &SolveOptions::default()).stage("solve_u1")?;
    let regions = regions(&grid, cfg);
    Ok(Setup { grid, p1, u1, solve1, regions })
}

fn perturbation(cfg: &ExperimentConfig) -> Result<&Perturbation> {
    let p = cfg.require_problem2()?;
    match cfg.mode {
        Mode::Gamma if p.rho_delta.is_some() => {
            Err(Error::Config("problem2.rho_delta is not used in gamma mode (ρ₂ = ρ₁)".into()))
        }
        Mode::Rho if p.gamma_delta.is_some() => {
            Err(Error::Config("problem2.gamma_delta is not used in rho mode (γ₂ = γ₁)".into()))
        }
        _ => Ok(p),
    }
}

/// Second problem at amplitude t.
pub fn perturbed(cfg: &ExperimentConfig, grid: &Grid, p1: &ProblemFields, t: f64) -> Result<ProblemFields> {
    let pert = perturbation(cfg)?;
    let mut p2 = p1.clone();
    let shift = |base: &ComplexField, delta: &crate::coefficients::CoefficientField| -> Result<ComplexField> {
        let d = delta.evaluate(grid)?;
        Ok(base.zip_with(&d, |a, b| a + t * b))
    };
    if let Some(d) = &pert.gamma_delta {
        p2.gamma = shift(&p1.gamma, d)?;
    }
    if let Some(d) = &pert.rho_delta {
        p2.rho = shift(&p1.rho, d)?;
    }
    if let Some(g) = &pert.g {
        let spec = ProblemSpec { g: g.clone(), ..cfg.problem1.clone() };
        p2.g = spec.sample(grid)?.g;
    }
    Ok(p2)
}

/// ψ = γ₂ − γ₁ (gamma mode) or ρ₂ − ρ₁ (rho mode).
pub fn psi_of(mode: Mode, p1: &ProblemFields, p2: &ProblemFields) -> ComplexField {
    match mode {
        Mode::Gamma => p2.gamma.zip_with(&p1.gamma, |a, b| a - b),
        Mode::Rho => p2.rho.zip_with(&p1.rho, |a, b| a - b),
    }
}

// ---------------------------------------------------------------- solve

#[derive(Debug, Clone, Serialize)]
pub struct SolveOutput {
    pub id: String,
    pub n_cells: usize,
    pub solver: SolveReport,
    pub pde_residual: f64,
    pub u_linf: f64,
    pub coefficient_check: Option<CoefficientCheck>,
    /// Why the coefficient check failed, if it did (informational).
    pub coefficient_warning: Option<String>,
    pub verdict: bool,
}

pub fn solve(cfg: &ExperimentConfig) -> Result<(SolveOutput, Grid, ComplexField)> {
    let s = setup(cfg)?;
    let residual = pde_residual(&s.u1, &s.p1, &s.grid).stage("residual")?;
    let (check, warning) = match check_coefficients(&s.grid, &s.p1, cfg.sectors.sigma) {
        Ok(c) => (Some(c), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let out = SolveOutput {
        id: cfg.id.clone(),
        n_cells: cfg.grid.n_cells,
        u_linf: s.u1.max_abs_on(&s.grid.closure_mask()),
        solver: s.solve1,
        pde_residual: residual,
        coefficient_check: check,
        coefficient_warning: warning,
        verdict: true,
    };
    Ok((out, s.grid, s.u1))
}

// ---------------------------------------------------------------- admissibility

#[derive(Debug, Clone, Serialize)]
pub struct AdmissibilityRow {
    pub amplitude: f64,
    pub decomposition: SectorDecomposition,
}

#[derive(Debug, Clone, Serialize)]
pub struct AdmissibilityOutput {
    pub id: String,
    pub sigma: f64,
    pub rows: Vec<AdmissibilityRow>,
    pub verdict: bool,
}

pub fn check_admissible(cfg: &ExperimentConfig) -> Result<AdmissibilityOutput> {
    let (grid, p1) = prepare(cfg)?;
    let rows = cfg
        .chain
        .amplitudes
        .iter()
        .map(|&t| {
            let p2 = perturbed(cfg, &grid, &p1, t).stage("coefficients")?;
            let psi = psi_of(cfg.mode, &p1, &p2);
            let decomposition = sector_decompose(&psi, cfg.sectors.sigma, &grid).stage("sectors")?;
            Ok(AdmissibilityRow { amplitude: t, decomposition })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AdmissibilityOutput {
        id: cfg.id.clone(),
        sigma: cfg.sectors.sigma,
        verdict: rows.iter().all(|r| r.decomposition.is_admissible()),
        rows,
    })
}

// ---------------------------------------------------------------- identities

/// I_V = ∫_V |u₁ψ|² bounded through the potential identity:
/// I_V ≤ K·‖u₂−u₁‖_{W^{1,1}} with
/// K = max(‖γ‖_∞‖A‖_∞‖∇ζ‖_∞, ω²‖ρ₂‖_∞‖ζ‖_∞)/ω².
#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RhoEstimate {
    pub K: f64,
    pub h_band: f64,
    pub integral: f64,
    pub w11_diff: f64,
    pub bound: f64,
    pub verdict: bool,
}

/// Largest eigenvalue of the Hermitian A over the closure.
fn a_operator_sup(grid: &Grid, f: &ProblemFields) -> f64 {
    grid.closure_mask()
        .indices()
        .map(|k| {
            let (a11, a22) = (f.a11.value(k).re, f.a22.value(k).re);
            0.5 * (a11 + a22) + (0.25 * (a11 - a22).powi(2) + f.a12.value(k).norm_sqr()).sqrt()
        })
        .fold(0.0, f64::max)
}

pub struct Comparison {
    pub amplitude: f64,
    pub p2: ProblemFields,
    pub u2: ComplexField,
    pub solve2: SolveReport,
    pub psi: ComplexField,
    pub sectors: Option<SectorDecomposition>,
    pub identity: Option<IdentityReport>,
    pub estimate: Option<EstimateReport>,
    pub rho_estimate: Option<RhoEstimate>,
}

fn compare(cfg: &ExperimentConfig, s: &Setup, t: f64) -> Result<Comparison> {
    let grid = &s.grid;
    let p2 = perturbed(cfg, grid, &s.p1, t).stage("coefficients")?;
    let (u2, solve2) = solve_fields(&p2, grid, &SolveOptions::default()).stage("solve_u2")?;
    let psi = psi_of(cfg.mode, &s.p1, &p2);
    let zero = psi.max_abs_on(&grid.closure_mask()) == 0.0;
    let mut out = Comparison {
        amplitude: t,
        p2,
        u2,
        solve2,
        psi,
        sectors: None,
        identity: None,
        estimate: None,
        rho_estimate: None,
    };
    if zero {
        return Ok(out);
    }
    let h_band = cfg.chain.h_band;
    match cfg.mode {
        Mode::Gamma => {
            let sectors = sector_decompose(&out.psi, cfg.sectors.sigma, grid).stage("sectors")?;
            if let Verdict::NotAdmissible { witness, measure } = sectors.verdict {
                return Err(Error::NotAdmissible { witness, measure }.at_stage("sectors"));
            }
            let tau = cutoff_tau(&grid.interior_mask(), h_band, grid).stage("identity")?;
            // The sector carrying the most positive θ mass, so ζ is not trivially zero.
            let interior = grid.interior_mask();
            let mut theta = theta_field(&out.psi, &sectors, 0).stage("identity")?;
            let mut best = f64::NEG_INFINITY;
            for k in 0..sectors.sectors.len() {
                let th = theta_field(&out.psi, &sectors, k).stage("identity")?;
                let mass = crate::grid::integrate(grid, &th.map(|t| t.max(0.0)), &interior).stage("identity")?;
                if mass > best {
                    best = mass;
                    theta = th;
                }
            }
            let (tkh, _) = theta_clamped(&theta, h_band).stage("identity")?;
            let zeta = build_test_function(&s.u1, &tau, &tkh);
            out.identity = Some(
                key_identity_check(grid, &s.p1, &out.p2.gamma, &s.u1, &out.u2, &zeta, Some(h_band)).stage("identity")?,
            );
            out.estimate = Some(
                fundamental_estimate_check(grid, &s.p1, &out.psi, &s.u1, &out.u2, &sectors, &[h_band])
                    .stage("estimate")?,
            );
            out.sectors = Some(sectors);
        }
        Mode::Rho => {
            let h = h_band.min(s.regions.v_depth);
            let tau = cutoff_tau(&grid.interior_mask(), h, grid).stage("identity")?;
            let zeta = s.u1.zip_with(&out.psi, |u, p| (u * p).conj()).zip_with(&tau, |z, t| z * t);
            out.identity = Some(
                potential_identity_check(grid, &s.p1, &out.p2.rho, &s.u1, &out.u2, &zeta, Some(h)).stage("identity")?,
            );
            let [zx, zy] = gradient(grid, &zeta);
            let grad_sup = zx
                .zip_with(&zy, |a, b| Complex64::new((a.norm_sqr() + b.norm_sqr()).sqrt(), 0.0))
                .max_abs_on(&grid.interior_mask().and(&zx.valid_mask()).and(&zy.valid_mask()));
            let closure = grid.closure_mask();
            let w2 = s.p1.omega2;
            let k = (s.p1.gamma.max_abs_on(&closure) * a_operator_sup(grid, &s.p1) * grad_sup)
                .max(w2 * out.p2.rho.max_abs_on(&closure) * zeta.max_abs_on(&closure))
                / w2;
            let g = s.u1.zip_with(&out.psi, |u, p| Complex64::new((u * p).norm_sqr(), 0.0)).re();
            let integral = crate::grid::integrate(grid, &g, &s.regions.v).stage("estimate")?;
            let w = out.u2.zip_with(&s.u1, |a, b| a - b);
            let w11 = norm(grid, &w, NormKind::W11, &closure).stage("estimate")?;
            out.rho_estimate = Some(RhoEstimate {
                K: k,
                h_band: h,
                integral,
                w11_diff: w11,
                bound: k * w11,
                verdict: integral <= k * w11,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentityRow {
    pub amplitude: f64,
    pub identity: Option<IdentityReport>,
    pub estimate: Option<EstimateReport>,
    pub rho_estimate: Option<RhoEstimate>,
    pub verdict: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentityOutput {
    pub id: String,
    pub mode: Mode,
    pub rows: Vec<IdentityRow>,
    pub verdict: bool,
}

pub fn verify_identity(cfg: &ExperimentConfig) -> Result<IdentityOutput> {
    perturbation(cfg)?;
    let s = setup(cfg)?;
    let rows = cfg
        .chain
        .amplitudes
        .par_iter()
        .map(|&t| {
            let c = compare(cfg, &s, t)?;
            let verdict = c.estimate.as_ref().map_or(true, |e| e.verdict) && c.rho_estimate.as_ref().map_or(true, |e| e.verdict);
            Ok(IdentityRow { amplitude: t, identity: c.identity, estimate: c.estimate, rho_estimate: c.rho_estimate, verdict })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(IdentityOutput { id: cfg.id.clone(), mode: cfg.mode, verdict: rows.iter().all(|r| r.verdict), rows })
}

// ---------------------------------------------------------------- geometry

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentSummary {
    pub kind: ComponentKind,
    pub nodes: usize,
    pub elongation: f64,
    pub flat_fraction: Option<f64>,
}

impl From<&Component> for ComponentSummary {
    fn from(c: &Component) -> Self {
        ComponentSummary { kind: c.kind, nodes: c.nodes.len(), elongation: c.elongation, flat_fraction: c.flat_fraction }
    }
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, Serialize)]
pub struct GeometryReport {
    pub id: String,
    pub regime: Regime,
    /// "gradient" (|∇u₁|, gamma mode) or "modulus" (|u₁|, rho mode).
    pub detection: &'static str,
    pub tau_z: f64,
    pub z_nodes: usize,
    pub components: Vec<ComponentSummary>,
    pub strata: Vec<Stratum>,
    pub tube: Option<TubeFit>,
    pub lojasiewicz: Option<LojasiewiczFit>,
    /// C₃ used by the chain: min of f/d^r over all of V.
    pub chain_C3: Option<f64>,
    pub f_min_v: f64,
    pub profile: Option<LevelProfile>,
    pub verdict: bool,
}

pub struct GeometryAnalysis {
    pub report: GeometryReport,
    /// The weight f (A∇u₁·∇ū₁ or |u₁|²).
    pub f: RealField,
    pub tube: Option<TubeConstants>,
    pub z_points: Vec<[f64; 2]>,
}

pub fn analyze_geometry(cfg: &ExperimentConfig, s: &Setup) -> Result<GeometryAnalysis> {
    let grid = &s.grid;
    let r = &s.regions;
    let (f, z, detection) = match cfg.mode {
        Mode::Gamma => {
            let f = energy_density(grid, &s.p1, &s.u1);
            (f, detect_critical_set(&s.u1, grid, cfg.tube.tau_z, &r.w)?, "gradient")
        }
        Mode::Rho => {
            let m = s.u1.abs();
            let tau = match cfg.tube.tau_z {
                Some(t) => t,
                None => {
                    let [ux, uy] = gradient(grid, &s.u1);
                    let sup = ux
                        .zip_with(&uy, |a, b| Complex64::new((a.norm_sqr() + b.norm_sqr()).sqrt(), 0.0))
                        .max_abs_on(&r.w.and(&ux.valid_mask()).and(&uy.valid_mask()));
                    10.0 * grid.h() * sup
                }
            };
            let f = m.map(|x| x * x);
            (f, detect_small_set(&m, grid, tau, &r.w, cfg.tube.tau_z.is_some())?, "modulus")
        }
    };
    let fv: Vec<usize> = r.v.indices().filter(|&k| f.is_valid(k)).collect();
    let f_min_v = fv.iter().map(|&k| f.value(k)).fold(f64::INFINITY, f64::min);
    let components: Vec<ComponentSummary> = z.components.iter().map(ComponentSummary::from).collect();
    if z.is_empty() {
        let report = GeometryReport {
            id: cfg.id.clone(),
            regime: Regime::Noncritical,
            detection,
            tau_z: z.tau_z,
            z_nodes: 0,
            components,
            strata: vec![],
            tube: None,
            lojasiewicz: None,
            chain_C3: None,
            f_min_v,
            profile: None,
            verdict: f_min_v > 0.0,
        };
        return Ok(GeometryAnalysis { report, f, tube: None, z_points: vec![] });
    }
    let strata = extract_strata(&z, grid)?;
    let tube = fit_tube_constants(&strata, grid, &cfg.tube.etas, default_box_radius(grid))?;
    let d = strata.distance_field(grid);
    let opts = LojasiewiczOptions { quantile: cfg.tube.quantile, window: cfg.tube.window, ..Default::default() };
    let loj = fit_lojasiewicz(&f, &d, &r.v.and_not(&z.mask), &opts)?;
    let c3 = fv
        .iter()
        .filter(|&&k| d.value(k) > 0.0)
        .map(|&k| f.value(k) / d.value(k).powf(loj.r))
        .fold(f64::INFINITY, f64::min);
    let z_points: Vec<[f64; 2]> = strata.support_nodes.iter().map(|&k| grid.coords(k)).collect();
    let verdict = tube.cover_ok && tube.monotone_ok && tube.C2 > 0.0 && loj.certificate_fraction >= 0.999 && c3 > 0.0;
    let constants = TubeConstants { C1: tube.C1, C2: tube.C2, C3: c3, r: loj.r };
    let report = GeometryReport {
        id: cfg.id.clone(),
        regime: Regime::Critical,
        detection,
        tau_z: z.tau_z,
        z_nodes: z.mask.count(),
        components,
        strata: strata.strata.clone(),
        tube: Some(tube),
        lojasiewicz: Some(loj),
        chain_C3: Some(c3),
        f_min_v,
        profile: None,
        verdict,
    };
    Ok(GeometryAnalysis { report, f, tube: Some(constants), z_points })
}

/// Geometry subcommand: analysis plus the level-measure profile of f.
pub fn geometry(cfg: &ExperimentConfig) -> Result<GeometryReport> {
    let s = setup(cfg)?;
    let mut g = analyze_geometry(cfg, &s).stage("geometry")?;
    let valid = s.grid.closure_mask().and(&g.f.valid_mask());
    let (lo, hi) = valid.indices().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), k| {
        let v = g.f.value(k);
        (a.min(v), b.max(v))
    });
    let ts: Vec<f64> = (1..=40).map(|m| lo + (hi - lo) * m as f64 / 41.0).collect();
    g.report.profile = Some(level_measure_profile(&g.f, &ts, &g.z_points, &[0.2, 0.1, 0.05, 0.02, 0.01], &s.grid));
    Ok(g.report)
}

// ---------------------------------------------------------------- stability

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Norms {
    pub psi_linf_omega_d: f64,
    pub psi_linf_boundary: f64,
    pub w_w21: f64,
    pub w_w11: f64,
    /// g = |ψ|^p with p = 1 (gamma) or 2 (rho).
    pub g_linf_v: f64,
    pub g_w1s_v: f64,
    pub g_l1_v: f64,
    /// ∫_V g·f.
    pub weighted_integral_v: f64,
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    pub id: String,
    pub mode: Mode,
    pub amplitude: f64,
    pub regime: Regime,
    pub norms: Norms,
    pub tube: Option<TubeConstants>,
    pub theta: f64,
    pub kappa: f64,
    pub s: f64,
    pub C_prime: f64,
    /// Interpolation ratio of g itself, for comparison with C'.
    pub gn_ratio_g: Option<f64>,
    /// Constant C of the fundamental estimate (gamma mode).
    pub C: Option<f64>,
    pub identity: Option<IdentityReport>,
    pub estimate: Option<EstimateReport>,
    pub rho_estimate: Option<RhoEstimate>,
    pub split: Option<SplitBound>,
    pub certificate: Option<Certificate>,
    pub eta_star: Option<f64>,
    pub alpha: f64,
    /// Constant of the family, calibrated at the largest amplitude.
    pub C_final: f64,
    /// lhs/rhs^α at the largest amplitude.
    pub C_fitted: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub verdict: bool,
    pub verdict_fitted: bool,
    pub solver: Vec<SolveReport>,
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, Serialize)]
pub struct FamilyReport {
    pub id: String,
    pub mode: Mode,
    pub regime: Regime,
    pub alpha: f64,
    pub calibration_amplitude: f64,
    pub C_final: f64,
    pub C_fitted: f64,
    /// lhs and rhs both nondecreasing in the amplitude.
    pub monotone: bool,
    pub geometry: GeometryReport,
    pub reports: Vec<StabilityReport>,
    pub verdict: bool,
    pub config: ExperimentConfig,
}

fn amplitude_report(
    cfg: &ExperimentConfig,
    s: &Setup,
    geo: &GeometryAnalysis,
    c_prime: f64,
    t: f64,
) -> Result<StabilityReport> {
    let grid = &s.grid;
    let r = &s.regions;
    let c = compare(cfg, s, t)?;
    let closure = grid.closure_mask();
    let w = c.u2.zip_with(&s.u1, |a, b| a - b);
    let power: u32 = match cfg.mode {
        Mode::Gamma => 1,
        Mode::Rho => 2,
    };
    let g = c.psi.map(|z| z.norm().powi(power as i32));
    let chain_err = |e: Error| e.at_stage("chain");
    let s_exp = cfg.chain.s;
    let (theta, kappa) = gn_exponents(2, s_exp).map_err(chain_err)?;
    let g_linf_v = g.max_abs_on(&r.v);
    let norms = Norms {
        psi_linf_omega_d: c.psi.max_abs_on(&r.omega_d),
        psi_linf_boundary: c.psi.max_abs_on(&grid.boundary_mask()),
        w_w21: norm(grid, &w, NormKind::W21, &closure).map_err(chain_err)?,
        w_w11: norm(grid, &w, NormKind::W11, &closure).map_err(chain_err)?,
        g_linf_v,
        g_w1s_v: norm(grid, &g, NormKind::W1s(s_exp), &r.v).map_err(chain_err)?,
        g_l1_v: norm(grid, &g, NormKind::L1, &r.v).map_err(chain_err)?,
        weighted_integral_v: weighted_integral(&g, &geo.f, &r.v, grid).map_err(chain_err)?,
    };
    let (estimate_factor, rhs) = match (&c.estimate, &c.rho_estimate) {
        (Some(e), _) => (e.four_C_over_sin, norms.psi_linf_boundary + norms.w_w21),
        (_, Some(e)) => (e.K, norms.w_w11),
        _ => (0.0, 0.0),
    };
    let certificate = if g_linf_v > 0.0 {
        Some(
            holder_certificate(&CertificateInputs {
                power,
                g_linf_v,
                g_w1s_v: norms.g_w1s_v,
                weighted_integral: norms.weighted_integral_v,
                tube: geo.tube,
                f_min: geo.report.f_min_v,
                s: s_exp,
                C_prime: c_prime,
                estimate_factor,
                rhs,
                lhs: norms.psi_linf_omega_d,
            })
            .map_err(chain_err)?,
        )
    } else {
        None
    };
    let eta_star = certificate.as_ref().and_then(|c| c.eta_star);
    let split = match (&geo.tube, eta_star) {
        (Some(tc), Some(eta)) if eta > 0.0 => {
            let tc = TubeConstants { C1: certificate.as_ref().and_then(|c| c.C1_eff).unwrap_or(tc.C1), ..*tc };
            Some(split_bound_real(&g, &geo.f, &tc, eta, &r.v, grid).map_err(chain_err)?)
        }
        _ => None,
    };
    let alpha = match (&geo.tube, power) {
        (Some(tc), p) => kappa / (tc.r + 1.0) / p as f64,
        (None, p) => kappa / p as f64,
    };
    Ok(StabilityReport {
        id: cfg.id.clone(),
        mode: cfg.mode,
        amplitude: t,
        regime: geo.report.regime,
        tube: geo.tube,
        theta,
        kappa,
        s: s_exp,
        C_prime: c_prime,
        gn_ratio_g: gn_ratio(grid, &g, &r.v, s_exp, theta, kappa).map_err(chain_err)?,
        C: c.estimate.as_ref().map(|e| e.C),
        identity: c.identity,
        estimate: c.estimate,
        rho_estimate: c.rho_estimate,
        split,
        eta_star,
        alpha,
        C_final: 0.0,
        C_fitted: 0.0,
        lhs: norms.psi_linf_omega_d,
        rhs,
        verdict: false,
        verdict_fitted: false,
        certificate,
        norms,
        solver: vec![s.solve1.clone(), c.solve2],
    })
}

/// Runs the amplitude family of one config and calibrates a single C_final
/// at the largest amplitude.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<FamilyReport> {
    perturbation(cfg)?;
    let s = setup(cfg)?;
    let geo = analyze_geometry(cfg, &s).stage("geometry")?;
    let c_prime = fit_gn_constant(&s.grid, &s.regions.v, cfg.chain.s).stage("chain")?;
    let mut reports = cfg
        .chain
        .amplitudes
        .par_iter()
        .map(|&t| amplitude_report(cfg, &s, &geo, c_prime, t))
        .collect::<Result<Vec<_>>>()?;
    let cal = reports
        .iter()
        .filter(|r| r.certificate.is_some())
        .max_by(|a, b| a.amplitude.total_cmp(&b.amplitude))
        .map(|r| (r.amplitude, r.certificate.as_ref().map_or(0.0, |c| c.C_final), r.lhs, r.rhs, r.alpha));
    let (cal_t, c_final, c_fitted, alpha) = match cal {
        Some((t, cf, lhs, rhs, a)) => (t, cf, if rhs > 0.0 { lhs / rhs.powf(a) } else { 0.0 }, a),
        None => (
            cfg.chain.amplitudes.iter().copied().fold(0.0, f64::max),
            0.0,
            0.0,
            reports.first().map_or(0.0, |r| r.alpha),
        ),
    };
    for r in &mut reports {
        let scale = r.rhs.powf(r.alpha);
        r.C_final = c_final;
        r.C_fitted = c_fitted;
        r.verdict = r.lhs <= c_final * scale * (1.0 + 1e-12);
        r.verdict_fitted = r.lhs <= c_fitted * scale * (1.0 + 1e-9);
    }
    let mut order: Vec<&StabilityReport> = reports.iter().collect();
    order.sort_by(|a, b| a.amplitude.total_cmp(&b.amplitude));
    let monotone = order.windows(2).all(|w| w[1].lhs >= w[0].lhs && w[1].rhs >= w[0].rhs);
    Ok(FamilyReport {
        id: cfg.id.clone(),
        mode: cfg.mode,
        regime: geo.report.regime,
        alpha,
        calibration_amplitude: cal_t,
        C_final: c_final,
        C_fitted: c_fitted,
        monotone,
        verdict: reports.iter().all(|r| r.verdict),
        geometry: geo.report,
        reports,
        config: cfg.clone(),
    })
}

// ---------------------------------------------------------------- reconstruction

#[derive(Debug, Clone, Serialize)]
pub struct ReconstructionOutput {
    pub id: String,
    pub mode: Mode,
    pub method: &'static str,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub valid_nodes: usize,
    pub excluded_fraction: f64,
    pub tolerance: f64,
    pub verdict: bool,
}

/// Recovers the first problem's γ (marching) or ρ (quotient) from u₁ and
/// compares it with the truth on the interior nodes that received a value.
pub fn reconstruct(cfg: &ExperimentConfig) -> Result<(ReconstructionOutput, Grid, ComplexField)> {
    let s = setup(cfg)?;
    let grid = &s.grid;
    let (rec, truth, method) = match cfg.mode {
        Mode::Rho => {
            let rec = reconstruct_rho(&s.u1, &s.p1, grid, cfg.reconstruct.u_floor).stage("reconstruct")?;
            (rec, s.p1.rho.clone(), "rho_quotient")
        }
        Mode::Gamma => {
            let bg = s.p1.gamma.re();
            let rec = reconstruct_gamma_march(&s.u1, &s.p1, &bg, grid, cfg.reconstruct.grad_floor).stage("reconstruct")?;
            (rec, s.p1.gamma.clone(), "gamma_march")
        }
    };
    let errs: Vec<f64> = grid
        .interior_mask()
        .indices()
        .filter(|&k| rec.field.is_valid(k))
        .map(|k| (rec.field.value(k) - truth.value(k)).norm() / truth.value(k).norm().max(1e-300))
        .collect();
    if errs.is_empty() {
        return Err(Error::EmptyReconstruction("no interior node was reconstructed".into()).at_stage("reconstruct"));
    }
    let max = errs.iter().copied().fold(0.0, f64::max);
    let out = ReconstructionOutput {
        id: cfg.id.clone(),
        mode: cfg.mode,
        method,
        max_rel_error: max,
        mean_rel_error: errs.iter().sum::<f64>() / errs.len() as f64,
        valid_nodes: errs.len(),
        excluded_fraction: rec.excluded.count() as f64 / grid.closure_mask().count() as f64,
        tolerance: cfg.reconstruct.tolerance,
        verdict: max <= cfg.reconstruct.tolerance,
    };
    Ok((out, s.grid, rec.field))
}
