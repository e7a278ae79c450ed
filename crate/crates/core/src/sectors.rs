//! Exceptional-angle sectors for the coefficient difference ψ and the cutoff
//! functions built from them.

use std::f64::consts::{PI, TAU};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::contour::level_measure;
use crate::distance::distance_field;
use crate::error::{Error, Result};
use crate::grid::{ComplexField, Grid, Mask, RealField};

/// Candidate angle spacing for the sweep.
pub const ANGLE_STEP: f64 = PI / 36.0;

/// One sector Γ_k = {z : arg z ∈ [κ_k, κ_{k+1}]}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Sector {
    pub kappa_lo: f64,
    pub kappa_hi: f64,
    /// c_k = 1 / tan((κ_{k+1} − κ_k) / 2).
    pub c: f64,
    /// β_k = exp(−i(κ_k + κ_{k+1}) / 2).
    pub beta: Complex64,
}

impl Sector {
    pub fn new(kappa_lo: f64, kappa_hi: f64) -> Self {
        let half = 0.5 * (kappa_hi - kappa_lo);
        Sector {
            kappa_lo,
            kappa_hi,
            c: 1.0 / half.tan(),
            beta: Complex64::from_polar(1.0, -0.5 * (kappa_lo + kappa_hi)),
        }
    }

    /// θ_k(z) = Re ψ_k − c_k |Im ψ_k| with ψ_k = β_k z.
    pub fn theta(&self, z: Complex64) -> f64 {
        let w = self.beta * z;
        w.re - self.c * w.im.abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Verdict {
    Admissible,
    NotAdmissible { witness: f64, measure: f64 },
}

/// Level measure of {arg ψ = κ} for one candidate angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AngleProbe {
    pub angle: f64,
    /// Marching-squares length; `+inf` when ψ has constant argument κ on a cell.
    pub measure: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SectorDecomposition {
    pub angles: Vec<f64>,
    pub sigma: f64,
    pub sectors: Vec<Sector>,
    pub verdict: Verdict,
    /// True when ψ vanishes (below τ₀) everywhere.
    pub vacuous: bool,
    pub tau_0: f64,
    pub tau_h: f64,
    pub probes: Vec<AngleProbe>,
}

impl SectorDecomposition {
    pub fn is_admissible(&self) -> bool {
        self.verdict == Verdict::Admissible
    }

    pub fn from_angles(angles: Vec<f64>, sigma: f64) -> Self {
        let l = angles.len();
        let sectors = (0..l)
            .map(|k| {
                let hi = if k + 1 < l { angles[k + 1] } else { angles[0] + TAU };
                Sector::new(angles[k], hi)
            })
            .collect();
        SectorDecomposition {
            angles,
            sigma,
            sectors,
            verdict: Verdict::Admissible,
            vacuous: false,
            tau_0: 0.0,
            tau_h: 0.0,
            probes: Vec::new(),
        }
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma <= PI / 4.0 {
        Ok(())
    } else {
        Err(Error::Precondition(format!("sigma must lie in (0, pi/4], got {sigma}")))
    }
}

/// |Im ψ| ≤ tan(κ)·|Re ψ| at every valid node.
pub fn sufficient_condition_check(psi: &ComplexField, kappa: f64, sigma: f64) -> Result<bool> {
    check_sigma(sigma)?;
    if !(kappa >= 0.0 && kappa < 0.5 * (PI - sigma)) {
        return Err(Error::Precondition(format!(
            "kappa must lie in [0, (pi - sigma)/2), got {kappa}"
        )));
    }
    let t = kappa.tan();
    Ok(psi
        .values()
        .iter()
        .zip(psi.validity())
        .filter(|(_, &ok)| ok)
        .all(|(z, _)| z.im.abs() <= t * z.re.abs() + 1e-14 * z.norm()))
}

/// Cyclic gaps of a sorted angle list in [0, 2π).
fn gaps(angles: &[f64]) -> Vec<f64> {
    let l = angles.len();
    (0..l)
        .map(|k| if k + 1 < l { angles[k + 1] - angles[k] } else { angles[0] + TAU - angles[k] })
        .collect()
}

fn normalize_angles(angles: &[f64]) -> Vec<f64> {
    let mut a: Vec<f64> = angles.iter().map(|x| x.rem_euclid(TAU)).collect();
    a.sort_by(f64::total_cmp);
    a
}

/// Removes angles while some κ_{k+2} − κ_k ≤ π − σ, always removing the middle
/// angle of the tightest triple, until at most four remain.
pub fn reduce_angles(angles: &[f64], sigma: f64) -> Result<Vec<f64>> {
    let bound = PI - sigma;
    let tol = 1e-12;
    let mut a = normalize_angles(angles);
    if a.is_empty() || gaps(&a).iter().any(|&g| g > bound + tol) {
        return Err(Error::Precondition(format!(
            "angle gaps must not exceed pi - sigma = {bound:.6}"
        )));
    }
    while a.len() > 4 {
        let g = gaps(&a);
        let l = a.len();
        let (k, pair) = (0..l)
            .map(|k| (k, g[k] + g[(k + 1) % l]))
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .expect("nonempty");
        if pair > bound + tol {
            return Err(Error::Precondition(format!(
                "cannot reduce {l} angles: every two-gap span exceeds pi - sigma (sigma too large)"
            )));
        }
        a.remove((k + 1) % l);
    }
    Ok(a)
}

/// Per-angle probe of the level set {ψ ≠ 0, arg ψ = κ}.
///
/// The real field arg(ψ e^{−iκ}) is contoured at 0 on the nodes where
/// |ψ| > τ₀ and Re(ψ e^{−iκ}) > 0, which keeps the branch cut away. A cell on
/// which the argument equals κ identically has positive area and so
/// infinite length.
pub fn probe_angle(grid: &Grid, psi: &ComplexField, kappa: f64, tau_0: f64) -> f64 {
    let rot = Complex64::from_polar(1.0, -kappa);
    let w = psi.map(|z| z * rot);
    let region = Mask::from_fn(grid, |k, _| {
        psi.is_valid(k) && psi.value(k).norm() > tau_0 && w.value(k).re > 0.0
    });
    let arg = w.map(|z| z.arg());
    let (nx, ny) = grid.shape();
    let flat_tol = 1e-9;
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let k = grid.index(i, j);
            let ks = [k, k + 1, k + nx, k + nx + 1];
            if ks.iter().all(|&m| region.get(m) && arg.value(m).abs() <= flat_tol) {
                return f64::INFINITY;
            }
        }
    }
    level_measure(grid, &arg, 0.0, &region)
}

/// Searches exceptional angles among the multiples of π/36.
///
/// Every candidate is probed; an angle is good when its level measure is
/// below τ_H = 5·h_grid. ψ is admissible when the good angles leave no cyclic
/// gap larger than π − σ; the good set is then reduced to at most four angles.
/// Otherwise the witness is the bad angle nearest the middle of the widest gap.
pub fn sector_decompose(psi: &ComplexField, sigma: f64, grid: &Grid) -> Result<SectorDecomposition> {
    check_sigma(sigma)?;
    let maxabs = psi.max_abs_on(&psi.valid_mask());
    let tau_0 = 1e-10 * maxabs;
    let tau_h = 5.0 * grid.h();
    let n_angles = (TAU / ANGLE_STEP).round() as usize;
    let candidates: Vec<f64> = (0..n_angles).map(|m| m as f64 * ANGLE_STEP).collect();

    if maxabs == 0.0 || !psi.values().iter().zip(psi.validity()).any(|(z, &ok)| ok && z.norm() > tau_0) {
        let angles = vec![PI / 4.0, 3.0 * PI / 4.0, 3.0 * PI / 2.0];
        let mut d = SectorDecomposition::from_angles(angles, sigma);
        d.vacuous = true;
        d.tau_0 = tau_0;
        d.tau_h = tau_h;
        return Ok(d);
    }

    let probes: Vec<AngleProbe> = candidates
        .par_iter()
        .map(|&angle| AngleProbe { angle, measure: probe_angle(grid, psi, angle, tau_0) })
        .collect();
    let good: Vec<f64> = probes.iter().filter(|p| p.measure < tau_h).map(|p| p.angle).collect();
    let bound = PI - sigma;

    let widest = if good.is_empty() {
        None
    } else {
        let g = gaps(&good);
        let (k, w) = g
            .iter()
            .copied()
            .enumerate()
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .expect("nonempty");
        Some((good[k], w))
    };

    let mut d = match widest {
        Some((_, w)) if w <= bound + 1e-12 => {
            let angles = reduce_angles(&good, sigma)?;
            SectorDecomposition::from_angles(angles, sigma)
        }
        _ => {
            let (start, w) = widest.unwrap_or((0.0, TAU));
            let mid = (start + 0.5 * w).rem_euclid(TAU);
            let cyc = |a: f64| {
                let d = (a - mid).rem_euclid(TAU);
                d.min(TAU - d)
            };
            let witness = probes
                .iter()
                .filter(|p| p.measure >= tau_h)
                .min_by(|x, y| cyc(x.angle).total_cmp(&cyc(y.angle)))
                .expect("a gap wider than pi - sigma contains a bad angle");
            let mut d = SectorDecomposition::from_angles(Vec::new(), sigma);
            d.verdict = Verdict::NotAdmissible { witness: witness.angle, measure: witness.measure };
            d
        }
    };
    d.tau_0 = tau_0;
    d.tau_h = tau_h;
    d.probes = probes;
    Ok(d)
}

/// θ_k at every node.
pub fn theta_field(psi: &ComplexField, sectors: &SectorDecomposition, k: usize) -> Result<RealField> {
    let s = sectors.sectors.get(k).ok_or_else(|| {
        Error::Precondition(format!("sector index {k} out of range 0..{}", sectors.sectors.len()))
    })?;
    Ok(psi.map(|z| s.theta(z)))
}

/// θ_{k,h} = min(max(θ_k, 0), h) / h and the band mask {0 < θ_k < h}.
pub fn theta_clamped(theta: &RealField, h_band: f64) -> Result<(RealField, Mask)> {
    if !(h_band > 0.0) {
        return Err(Error::Precondition(format!("h_band must be positive, got {h_band}")));
    }
    let clamped = theta.map(|t| t.max(0.0).min(h_band) / h_band);
    let band = theta.mask_where(|t| t > 0.0 && t < h_band);
    Ok((clamped, band))
}

/// Cubic smoothstep of the distance to the complement of `region`: 0 up to
/// h_band/2, 1 beyond h_band. The slope is at most 3/h_band.
pub fn cutoff_tau(region: &Mask, h_band: f64, grid: &Grid) -> Result<RealField> {
    if !(h_band > 2.0 * grid.h()) {
        return Err(Error::Resolution(format!(
            "h_band = {h_band} must exceed twice the grid spacing {}",
            grid.h()
        )));
    }
    let d = distance_field(&region.not(), grid);
    Ok(d.map(|d| smoothstep((d - 0.5 * h_band) / (0.5 * h_band))))
}

pub fn smoothstep(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, gradient, Domain};
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    const SIGMA: f64 = 0.1 * PI;

    #[test]
    fn sufficient_condition_examples() {
        let g = build_grid(Domain::unit_square(), 16).unwrap();
        let psi = ComplexField::from_fn(&g, |_, p| c(1.0, 0.5) * p[0]);
        assert!(sufficient_condition_check(&psi, 0.5f64.atan() + 0.01, SIGMA).unwrap());
        let real = ComplexField::from_fn(&g, |_, p| c(p[0] - 0.3, 0.0));
        assert!(sufficient_condition_check(&real, 0.0, SIGMA).unwrap());
        let imag = ComplexField::from_fn(&g, |_, p| c(0.0, p[0]));
        for kappa in [0.0, 0.5, 1.0, 1.4] {
            assert!(!sufficient_condition_check(&imag, kappa, SIGMA).unwrap());
        }
        assert!(sufficient_condition_check(&real, 1.5, SIGMA).is_err());
    }

    #[test]
    fn real_psi_is_admissible() {
        let g = build_grid(Domain::unit_square(), 32).unwrap();
        let psi = ComplexField::from_fn(&g, |_, p| c((p[0] - 0.4) * p[1], 0.0));
        let d = sector_decompose(&psi, SIGMA, &g).unwrap();
        assert!(d.is_admissible());
        assert!(d.angles.len() >= 3 && d.angles.len() <= 4);
        for gap in gaps(&d.angles) {
            assert!(gap <= PI - SIGMA + 1e-12);
        }
        // 0 and π are exceptional for a real field and must not be chosen.
        for a in &d.angles {
            assert!(a.abs() > 1e-9 && (a - PI).abs() > 1e-9);
        }
    }

    #[test]
    fn rotating_phase_is_not_admissible() {
        let g = build_grid(Domain::rectangle(TAU, 1.0).unwrap(), 64).unwrap();
        let psi = ComplexField::from_fn(&g, |_, p| Complex64::from_polar(1.0, p[0]));
        let d = sector_decompose(&psi, SIGMA, &g).unwrap();
        match d.verdict {
            Verdict::NotAdmissible { measure, .. } => assert!((measure - 1.0).abs() < 0.02, "{measure}"),
            _ => panic!("expected not admissible"),
        }
        // Every interior angle has a unit-length level set.
        for p in &d.probes {
            if p.angle > 0.1 && p.angle < TAU - 0.1 {
                assert!((p.measure - 1.0).abs() < 0.02, "{p:?}");
            }
        }
    }

    #[test]
    fn zero_psi_is_vacuous() {
        let g = build_grid(Domain::unit_square(), 8).unwrap();
        let psi = ComplexField::constant(&g, c(0.0, 0.0));
        let d = sector_decompose(&psi, SIGMA, &g).unwrap();
        assert!(d.is_admissible() && d.vacuous);
    }

    #[test]
    fn reduce_examples() {
        let five: Vec<f64> = (0..5).map(|k| k as f64 * TAU / 5.0).collect();
        assert_eq!(reduce_angles(&five, SIGMA).unwrap().len(), 4);
        let three = vec![0.5, 2.5, 4.5];
        assert_eq!(reduce_angles(&three, SIGMA).unwrap(), three);
        let eight: Vec<f64> = (0..8).map(|k| k as f64 * TAU / 8.0).collect();
        let r = reduce_angles(&eight, SIGMA).unwrap();
        assert_eq!(r.len(), 4);
        assert!(gaps(&r).iter().all(|&g| g <= PI - SIGMA + 1e-12));
        assert!(reduce_angles(&[0.0, 1.0], SIGMA).is_err());
    }

    /// Exhaustive oracle: some subset of size ≤ 4 satisfies the gap bound
    /// whenever the reduction succeeds, and the reduction output is such a subset.
    #[test]
    fn reduce_matches_exhaustive_oracle() {
        let eight: Vec<f64> = (0..8).map(|k| k as f64 * TAU / 8.0 + 0.1).collect();
        let mut found = false;
        for mask in 0u32..256 {
            let sub: Vec<f64> = (0..8).filter(|i| mask >> i & 1 == 1).map(|i| eight[i]).collect();
            if sub.len() >= 3 && sub.len() <= 4 && gaps(&normalize_angles(&sub)).iter().all(|&g| g <= PI - SIGMA) {
                found = true;
            }
        }
        assert!(found);
        let r = reduce_angles(&eight, SIGMA).unwrap();
        assert!(r.iter().all(|a| eight.iter().any(|b| (a - b.rem_euclid(TAU)).abs() < 1e-12)));
    }

    #[test]
    fn theta_examples() {
        let s = Sector::new(-PI / 4.0, PI / 4.0);
        assert!((s.c - 1.0).abs() < 1e-15);
        assert!((s.theta(c(1.0, 0.0)) - 1.0).abs() < 1e-15);
        assert!((s.theta(c(0.0, 1.0)) + 1.0).abs() < 1e-15);
        assert!(s.theta(Complex64::from_polar(1.0, PI / 4.0)).abs() < 1e-15);
    }

    #[test]
    fn clamp_examples() {
        let g = build_grid(Domain::unit_square(), 2).unwrap();
        let t = RealField::constant(&g, 0.5);
        assert_eq!(theta_clamped(&t, 1.0).unwrap().0.value(0), 0.5);
        let t = RealField::constant(&g, -3.0);
        assert_eq!(theta_clamped(&t, 1.0).unwrap().0.value(0), 0.0);
        let t = RealField::constant(&g, 7.0);
        let (v, band) = theta_clamped(&t, 2.0).unwrap();
        assert_eq!(v.value(0), 1.0);
        assert!(!band.get(0));
        assert!(theta_clamped(&t, 0.0).is_err());
    }

    #[test]
    fn clamp_converges_upward_to_indicator() {
        let g = build_grid(Domain::unit_square(), 2).unwrap();
        for th in [-0.3, -0.01, 0.01, 0.07, 0.15, 0.5] {
            let t = RealField::constant(&g, th);
            let vals: Vec<f64> = [0.2, 0.1, 0.05]
                .iter()
                .map(|&h| theta_clamped(&t, h).unwrap().0.value(0))
                .collect();
            assert!(vals.windows(2).all(|w| w[1] >= w[0]));
            let ind = if th > 0.0 { 1.0 } else { 0.0 };
            assert!((vals[2] - ind).abs() <= (vals[0] - ind).abs());
        }
    }

    #[test]
    fn cutoff_examples() {
        let n = 256;
        let g = build_grid(Domain::unit_square(), n).unwrap();
        let h_band = 0.1;
        let tau = cutoff_tau(&g.interior_mask(), h_band, &g).unwrap();
        // Distance from (x, 0.5) to the boundary ring is x for x ≤ 0.5.
        assert_eq!(tau.value(g.nearest_node([1.5 * h_band, 0.5])), 1.0);
        assert_eq!(tau.value(g.nearest_node([0.25 * h_band, 0.5])), 0.0);
        let [dx, dy] = gradient(&g, &tau);
        let mut max = 0.0f64;
        for k in 0..g.node_count() {
            if dx.is_valid(k) && dy.is_valid(k) {
                max = max.max(dx.value(k).hypot(dy.value(k)));
            }
        }
        assert!(max <= 3.2 / h_band, "{max}");
        assert!(cutoff_tau(&g.interior_mask(), 1.5 * g.h(), &g).is_err());
    }

    #[test]
    fn sector_cover_and_beta_bound() {
        let g = build_grid(Domain::unit_square(), 32).unwrap();
        // Argument sweeps [0, atan 0.3] on the bump support and its negative.
        let psi = ComplexField::from_fn(&g, |_, p| {
            c(1.0, 0.3 * p[0]) * 0.1 * (p[0] - 0.5) * p[1] * (1.0 - p[1])
        });
        let d = sector_decompose(&psi, SIGMA, &g).unwrap();
        assert!(d.is_admissible());
        let s2 = (SIGMA / 2.0).sin();
        for k in 0..g.node_count() {
            let z = psi.value(k);
            if z.norm() <= d.tau_0 {
                continue;
            }
            let th: Vec<f64> = d.sectors.iter().map(|s| s.theta(z)).collect();
            assert!(th.iter().any(|&t| t >= -1e-12));
            assert!(th.iter().filter(|&&t| t > 1e-12).count() <= 1);
            for (s, &t) in d.sectors.iter().zip(&th) {
                if t >= 0.0 {
                    assert!(z.norm() <= (s.beta * z).re / s2 + 1e-10);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn reduce_random_inputs(n in 5usize..16, seed in proptest::collection::vec(0.0f64..1.0, 16), sigma_frac in 0.01f64..0.2) {
            let sigma = sigma_frac * PI;
            // Random angles with every gap ≤ π − σ: jitter a regular tuple.
            let base = TAU / n as f64;
            let angles: Vec<f64> = (0..n).map(|k| k as f64 * base + 0.45 * base * seed[k]).collect();
            prop_assume!(gaps(&normalize_angles(&angles)).iter().all(|&g| g <= PI - sigma));
            let r = reduce_angles(&angles, sigma).unwrap();
            prop_assert!(r.len() <= 4 && r.len() >= 3);
            prop_assert!(gaps(&r).iter().all(|&g| g <= PI - sigma + 1e-12));
        }
    }
}
