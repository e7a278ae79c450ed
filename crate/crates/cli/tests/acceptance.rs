//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to
//! stderr (uncaptured) before asserting.

use std::f64::consts::{PI, TAU};
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};

use imstab_core::coefficients::ProblemSpec;
use imstab_core::config::{parse_config_str, ExperimentConfig};
use imstab_core::fit::loglog_slope;
use imstab_core::geometry::{
    fit_lojasiewicz, level_measure_profile, LojasiewiczOptions, StrataDecomposition, Stratum,
};
use imstab_core::pipeline;
use imstab_core::sectors::{reduce_angles, sector_decompose, Verdict};
use imstab_core::solver::solve_forward;
use imstab_core::{build_grid, Complex64, Domain, RealField};

const COS: &str = include_str!("../../../configs/cosine_phantom_gamma.json");
const RHO: &str = include_str!("../../../configs/plane_wave_rho.json");

fn report(n: u32, name: &str, pass: bool, detail: String) {
    let line = format!("criterion {n:>2} [{}] {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} failed: {detail}");
}

fn sci(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.2e}")).collect::<Vec<_>>().join(" ")
}

fn load(text: &str, overrides: &[&str]) -> ExperimentConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    parse_config_str(text, &o).unwrap()
}

fn spec(v: serde_json::Value) -> ProblemSpec {
    serde_json::from_value(v).unwrap()
}

fn mms_order(domain: Domain, spec: &ProblemSpec, exact: impl Fn([f64; 2]) -> Complex64) -> (Vec<f64>, f64) {
    let mut hs = Vec::new();
    let mut errs = Vec::new();
    for n in [32, 64, 128] {
        let g = build_grid(domain.clone(), n).unwrap();
        let (u, _) = solve_forward(spec, &g).unwrap();
        let err = g
            .closure_mask()
            .indices()
            .map(|k| (u.value(k) - exact(g.coords(k))).norm())
            .fold(0.0, f64::max);
        hs.push(g.h());
        errs.push(err);
    }
    let order = loglog_slope(&hs, &errs);
    (errs, order)
}

#[test]
fn criterion_01_forward_solver_convergence() {
    let t0 = Instant::now();
    let plane = spec(serde_json::json!({"gamma": 1.0, "rho": 1.0, "omega2": 1.0, "g": "exp(i*x1)"}));
    let (e1, o1) = mms_order(Domain::unit_square(), &plane, |p| Complex64::from_polar(1.0, p[0]));
    let cosine = spec(serde_json::json!({"gamma": 1.0, "rho": 1.0, "omega2": 2.0, "g": "cos(x1)*cos(x2)"}));
    let (e2, o2) = mms_order(Domain::rectangle(2.0, 2.0).unwrap(), &cosine, |p| {
        Complex64::new(p[0].cos() * p[1].cos(), 0.0)
    });
    let secs = t0.elapsed().as_secs_f64();
    let ok = (1.8..=2.2).contains(&o1) && (1.8..=2.2).contains(&o2) && secs < 10.0;
    report(
        1,
        "forward solver order",
        ok,
        format!("plane wave order {o1:.3} (errors {}), cosine order {o2:.3} (errors {}), {secs:.1} s", sci(&e1), sci(&e2)),
    );
}

fn identity_residuals(text: &str) -> (Vec<f64>, Vec<f64>) {
    let mut hs = Vec::new();
    let mut res = Vec::new();
    for n in [64, 128, 256] {
        let nc = format!("grid.n_cells={n}");
        let cfg = load(text, &[&nc, "chain.amplitudes=[0.1]"]);
        let out = pipeline::verify_identity(&cfg).unwrap();
        let id = out.rows[0].identity.as_ref().unwrap();
        hs.push(cfg.domain.diameter() / n as f64);
        res.push(id.relative_residual);
    }
    (hs, res)
}

#[test]
fn criterion_02_identities_converge() {
    let t0 = Instant::now();
    let (h, key) = identity_residuals(COS);
    let (h2, pot) = identity_residuals(RHO);
    let sk = loglog_slope(&h, &key);
    let sp = loglog_slope(&h2, &pot);
    let secs = t0.elapsed().as_secs_f64();
    let ok = sk >= 0.8 && sp >= 0.8 && key[2] <= 1e-2 && pot[2] <= 1e-2 && secs < 60.0;
    report(
        2,
        "identity residual convergence",
        ok,
        format!("key {} slope {sk:.2}; potential {} slope {sp:.2}; {secs:.1} s", sci(&key), sci(&pot)),
    );
}

const PAIRS: [&str; 3] = [
    "x1*(2-x1)*x2*(2-x2)",
    "(1+0.5*i)*x1*(2-x1)*x2*(2-x2)",
    "(1+0.8*i*x1)*x1*(2-x1)*x2*(2-x2)",
];

#[test]
fn criterion_03_fundamental_estimate() {
    let mut ok = true;
    let mut detail = Vec::new();
    for delta in PAIRS {
        let d = format!("problem2.gamma_delta={delta}");
        let cfg = load(COS, &[&d, "chain.amplitudes=[0.1]", "grid.n_cells=64"]);
        assert!((cfg.sectors.sigma - 0.1 * PI).abs() < 1e-15);
        let out = pipeline::verify_identity(&cfg).unwrap();
        let e = out.rows[0].estimate.as_ref().unwrap();
        let real = e.lhs >= 0.0 && e.lhs_imag.abs() <= 1e-10 * e.lhs.abs();
        ok &= real && e.lhs <= e.rhs && e.C_tau == 3.0 && e.verdict;
        detail.push(format!("[{delta}] lhs {:.3e} <= rhs {:.3e} (imag {:.1e})", e.lhs, e.rhs, e.lhs_imag));
    }
    report(3, "fundamental estimate", ok, detail.join("; "));
}

#[test]
fn criterion_04_admissibility() {
    let real = pipeline::check_admissible(&load(COS, &["grid.n_cells=64"])).unwrap();
    let rot = pipeline::check_admissible(&load(include_str!("../../../configs/rotating_phase.json"), &[])).unwrap();
    let rot_witness = matches!(rot.rows[0].decomposition.verdict, Verdict::NotAdmissible { .. });

    let mut rng = rand::rngs::StdRng::seed_from_u64(7);
    let mut reduced_ok = 0;
    let mut tried = 0;
    while tried < 1000 {
        let sigma = rng.gen_range(0.01..0.2) * PI;
        let n = rng.gen_range(5..16);
        let mut a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..TAU)).collect();
        a.sort_by(f64::total_cmp);
        let gap_ok = (0..n).all(|k| {
            let next = if k + 1 < n { a[k + 1] } else { a[0] + TAU };
            next - a[k] <= PI - sigma
        });
        if !gap_ok {
            continue;
        }
        tried += 1;
        let r = reduce_angles(&a, sigma).unwrap();
        let l = r.len();
        let gaps_ok = (0..l).all(|k| {
            let next = if k + 1 < l { r[k + 1] } else { r[0] + TAU };
            next - r[k] <= PI - sigma + 1e-12
        });
        let subset = r.iter().all(|x| a.iter().any(|y| (x - y).abs() < 1e-12));
        if l <= 4 && gaps_ok && subset {
            reduced_ok += 1;
        }
    }

    let mut beta_nodes = 0usize;
    let mut beta_worst = f64::NEG_INFINITY;
    for delta in PAIRS {
        let d = format!("problem2.gamma_delta={delta}");
        let cfg = load(COS, &[&d, "grid.n_cells=64"]);
        let (grid, p1) = pipeline::prepare(&cfg).unwrap();
        let p2 = pipeline::perturbed(&cfg, &grid, &p1, 0.1).unwrap();
        let psi = pipeline::psi_of(cfg.mode, &p1, &p2);
        let dec = sector_decompose(&psi, cfg.sectors.sigma, &grid).unwrap();
        let s2 = (cfg.sectors.sigma / 2.0).sin();
        for k in 0..grid.node_count() {
            if !psi.is_valid(k) || psi.value(k).norm() <= dec.tau_0 {
                continue;
            }
            let z = psi.value(k);
            for s in &dec.sectors {
                if s.theta(z) >= 0.0 {
                    beta_nodes += 1;
                    beta_worst = beta_worst.max(z.norm() - (s.beta * z).re / s2);
                }
            }
        }
    }
    let ok = real.verdict && !rot.verdict && rot_witness && reduced_ok == 1000 && beta_worst <= 1e-10;
    report(
        4,
        "admissibility machinery",
        ok,
        format!(
            "real pair admissible {}, e^(i x1) not admissible {}, reduce_angles {reduced_ok}/1000, beta bound worst excess {beta_worst:.2e} over {beta_nodes} sector nodes",
            real.verdict, !rot.verdict
        ),
    );
}

#[test]
fn criterion_05_covering() {
    let t0 = Instant::now();
    let g = pipeline::geometry(&load(COS, &[])).unwrap();
    let t = g.tube.as_ref().unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let ok = (0.9..=1.1).contains(&t.volume_exponent)
        && (t.C1 - 4.0).abs() <= 0.4
        && t.C2 >= 0.95
        && secs < 30.0;
    report(
        5,
        "slab cover",
        ok,
        format!(
            "volume exponent {:.3}, C1 {:.3} (prediction 4), C2 {:.3}, ball exponent {:.3}, {secs:.1} s",
            t.volume_exponent, t.C1, t.C2, t.ball_exponent
        ),
    );
}

#[test]
fn criterion_06_lojasiewicz() {
    let g = pipeline::geometry(&load(COS, &[])).unwrap();
    let l = g.lojasiewicz.as_ref().unwrap();

    let grid = build_grid(Domain::unit_square(), 128).unwrap();
    let s = StrataDecomposition { strata: vec![Stratum::Point { coords: [0.5, 0.5] }], support_nodes: vec![] };
    let d = s.distance_field(&grid);
    let f = d.map(|x| x.powi(4));
    let v = grid.depth_mask(0.1).and(&d.mask_where(|x| x > 0.05));
    let inj = fit_lojasiewicz(&f, &d, &v, &LojasiewiczOptions::default()).unwrap();

    let ok = (1.8..=2.3).contains(&l.r) && l.certificate_fraction >= 0.999 && (3.8..=4.2).contains(&inj.r);
    report(
        6,
        "lojasiewicz exponent",
        ok,
        format!(
            "cosine r {:.3}, certificate {:.4} of {} nodes; injected d^4 r {:.3}",
            l.r, l.certificate_fraction, l.nodes, inj.r
        ),
    );
}

#[test]
fn criterion_07_holder_certificate() {
    let t0 = Instant::now();
    let fam = pipeline::run_experiment(&load(COS, &[])).unwrap();
    let rho = pipeline::run_experiment(&load(RHO, &[])).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let r = fam.geometry.lojasiewicz.as_ref().unwrap().r;
    let alpha_expected = 0.2 / (r + 1.0);
    let amps: Vec<f64> = fam.reports.iter().map(|x| x.amplitude).collect();
    let single_c = fam.reports.iter().all(|x| x.C_final == fam.C_final);
    let ok = amps == [1e-3, 1e-2, 1e-1]
        && (fam.alpha - alpha_expected).abs() < 1e-12
        && r.round() == 2.0
        && single_c
        && fam.calibration_amplitude == 0.1
        && fam.verdict
        && rho.verdict
        && rho.reports.iter().all(|x| x.verdict)
        && secs < 300.0;
    let rows: Vec<String> = fam
        .reports
        .iter()
        .map(|x| format!("t={} lhs {:.2e} <= {:.2e}", x.amplitude, x.lhs, x.C_final * x.rhs.powf(x.alpha)))
        .collect();
    report(
        7,
        "holder certificate",
        ok,
        format!(
            "alpha {:.5} (0.2/3 = {:.5} at r = 2), C_final {:.3e}; {}; rho mode alpha {:.3} pass {}; {secs:.1} s",
            fam.alpha,
            0.2 / 3.0,
            fam.C_final,
            rows.join(", "),
            rho.alpha,
            rho.verdict
        ),
    );
}

#[test]
fn criterion_08_reconstructions() {
    let text = include_str!("../../../configs/reconstruct_rho.json");
    let mut errs = Vec::new();
    for r in ["problem1.rho=1", "problem1.rho=2"] {
        let (o, _, _) = pipeline::reconstruct(&load(text, &[r, "grid.n_cells=128"])).unwrap();
        errs.push(o.max_rel_error);
    }
    let (g, _, _) = pipeline::reconstruct(&load(include_str!("../../../configs/reconstruct_gamma.json"), &[])).unwrap();
    let ok = errs.iter().all(|&e| e <= 1e-3) && g.max_rel_error <= 0.05;
    report(
        8,
        "reconstructions",
        ok,
        format!("rho=1 {:.2e}, rho=2 {:.2e}, gamma march {:.2e}", errs[0], errs[1], g.max_rel_error),
    );
}

#[test]
fn criterion_09_level_set_measure() {
    let g = build_grid(Domain::rectangle(TAU, 1.0).unwrap(), 256).unwrap();
    let f = RealField::from_fn(&g, |_, p| p[0].cos());
    // Levels cos(x) for x uniform in (0, π), so the branches approach x₁ = π.
    let ts: Vec<f64> = (0..41).map(|m| (PI * (m as f64 + 0.5) / 41.0).cos()).collect();
    let eps = [0.2, 0.1, 0.05, 0.02, 0.01];
    let prof = level_measure_profile(&f, &ts, &[[PI, 0.5]], &eps, &g);
    let sups: Vec<f64> = prof.sup_by_eps.iter().map(|e| e[1]).collect();
    let monotone = sups.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    let ok = (1.9..=2.2).contains(&prof.M_f) && monotone && sups[4] < 0.05;
    report(9, "level-set measure", ok, format!("M_f {:.4}, shrinkage {sups:.4?}", prof.M_f));
}

fn imstab(args: &[&str], out: &Path) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_imstab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .current_dir(concat!(env!("CARGO_MANIFEST_DIR"), "/../.."))
        .output()
        .unwrap();
    (o.status.code().unwrap_or(-1), String::from_utf8_lossy(&o.stderr).into_owned())
}

#[test]
fn criterion_10_determinism_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let args = ["stability", "--config", "configs/cosine_phantom_gamma.json", "--set", "grid.n_cells=64"];
    let (ca, _) = imstab(&[&args[..], &["--workers", "1"]].concat(), &a);
    let (cb, _) = imstab(&[&args[..], &["--workers", "3"]].concat(), &b);
    let name = "cosine-phantom-gamma.stability.json";
    let same = std::fs::read(a.join(name)).unwrap() == std::fs::read(b.join(name)).unwrap();

    let c = dir.path().join("c");
    let (e0, _) = imstab(&["stability", "--config", "configs/identical_pair.json"], &c);
    let (e2, _) = imstab(&["check-admissible", "--config", "configs/rotating_phase.json"], &c);
    let (e1, msg) = imstab(&["solve", "--config", "configs/resonant.json"], &c);
    let tagged = msg.contains("[solve_u1]") && msg.contains("resonance");
    let ok = same && ca == 0 && cb == 0 && e0 == 0 && e2 == 2 && e1 == 1 && tagged;
    report(
        10,
        "determinism and exit codes",
        ok,
        format!("byte-identical reports {same}; exit codes identical-pair {e0}, rotating phase {e2}, resonant {e1}"),
    );
}
