//! Piecewise closed-form coefficient fields and the problem data built from them.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::grid::{gradient, ComplexField, Domain, Grid, Mask};

/// Where a piece applies. The first piece whose region contains a point wins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "params", rename_all = "lowercase")]
pub enum Region {
    /// Everywhere.
    All,
    /// `a·x1 + b·x2 ≥ c`.
    Halfplane([f64; 3]),
    /// Closed disk `[cx, cy, r]`.
    Disk([f64; 3]),
}

impl Region {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        match *self {
            Region::All => true,
            Region::Halfplane([a, b, c]) => a * p[0] + b * p[1] >= c,
            Region::Disk([cx, cy, r]) => (p[0] - cx).hypot(p[1] - cy) <= r,
        }
    }

    /// Points on the region boundary inside the box, paired with the unit
    /// normal pointing into the region.
    fn boundary_samples(&self, lo: [f64; 2], hi: [f64; 2], count: usize) -> Vec<([f64; 2], [f64; 2])> {
        let inside = |p: [f64; 2]| p[0] >= lo[0] && p[0] <= hi[0] && p[1] >= lo[1] && p[1] <= hi[1];
        match *self {
            Region::All => Vec::new(),
            Region::Halfplane([a, b, c]) => {
                let nn = a.hypot(b);
                if nn == 0.0 {
                    return Vec::new();
                }
                let n = [a / nn, b / nn];
                let t = [-n[1], n[0]];
                let p0 = [n[0] * c / nn, n[1] * c / nn];
                let centre = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
                let sc = (centre[0] - p0[0]) * t[0] + (centre[1] - p0[1]) * t[1];
                let half = (hi[0] - lo[0]).hypot(hi[1] - lo[1]);
                (0..count)
                    .map(|m| sc - half + 2.0 * half * (m as f64 + 0.5) / count as f64)
                    .map(|s| [p0[0] + s * t[0], p0[1] + s * t[1]])
                    .filter(|&p| inside(p))
                    .map(|p| (p, n))
                    .collect()
            }
            Region::Disk([cx, cy, r]) => (0..count)
                .map(|m| 2.0 * std::f64::consts::PI * m as f64 / count as f64)
                .map(|a| ([cx + r * a.cos(), cy + r * a.sin()], [-a.cos(), -a.sin()]))
                .filter(|&(p, _)| inside(p))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Continuity {
    /// No continuity requirement across interfaces (jumps allowed).
    #[serde(rename = "discontinuous")]
    Discontinuous,
    #[default]
    C0,
    C1,
    #[serde(rename = "analytic")]
    Analytic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Piece {
    pub expr: Expr,
    pub region: Region,
}

/// A piecewise closed-form complex field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FieldRepr", into = "FieldRepr")]
pub struct CoefficientField {
    pieces: Vec<Piece>,
    continuity: Continuity,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum FieldRepr {
    Number(f64),
    Short(String),
    Full(FullRepr),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FullRepr {
    pieces: Vec<PieceRepr>,
    #[serde(default)]
    continuity: Continuity,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PieceRepr {
    expr: String,
    #[serde(default = "region_all")]
    region: Region,
}

fn region_all() -> Region {
    Region::All
}

impl TryFrom<FieldRepr> for CoefficientField {
    type Error = Error;
    fn try_from(r: FieldRepr) -> Result<Self> {
        match r {
            FieldRepr::Number(v) => Ok(CoefficientField::constant(Complex64::new(v, 0.0))),
            FieldRepr::Short(s) => CoefficientField::parse(&s),
            FieldRepr::Full(full) => {
                let pieces = full
                    .pieces
                    .into_iter()
                    .map(|p| Ok(Piece { expr: Expr::parse(&p.expr)?, region: p.region }))
                    .collect::<Result<Vec<_>>>()?;
                CoefficientField::new(pieces, full.continuity)
            }
        }
    }
}

impl From<CoefficientField> for FieldRepr {
    fn from(f: CoefficientField) -> Self {
        FieldRepr::Full(FullRepr {
            pieces: f
                .pieces
                .into_iter()
                .map(|p| PieceRepr { expr: p.expr.source().to_string(), region: p.region })
                .collect(),
            continuity: f.continuity,
        })
    }
}

impl CoefficientField {
    pub fn new(pieces: Vec<Piece>, continuity: Continuity) -> Result<Self> {
        if pieces.is_empty() {
            return Err(Error::Coefficient("a coefficient field needs at least one piece".into()));
        }
        Ok(CoefficientField { pieces, continuity })
    }

    /// One expression valid everywhere.
    pub fn parse(expr: &str) -> Result<Self> {
        Self::new(
            vec![Piece { expr: Expr::parse(expr)?, region: Region::All }],
            Continuity::Analytic,
        )
    }

    pub fn constant(v: Complex64) -> Self {
        CoefficientField {
            pieces: vec![Piece { expr: Expr::constant(v), region: Region::All }],
            continuity: Continuity::Analytic,
        }
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    pub fn continuity(&self) -> Continuity {
        self.continuity
    }

    fn select(&self, p: [f64; 2]) -> Option<usize> {
        self.pieces.iter().position(|pc| pc.region.contains(p))
    }

    /// Value at a point, or `None` when no piece covers it.
    pub fn eval(&self, p: [f64; 2]) -> Option<Complex64> {
        self.select(p).map(|i| self.pieces[i].expr.eval(p))
    }

    /// Interface curves: the boundaries of every non-trivial region.
    pub fn interfaces(&self) -> Vec<Region> {
        let mut out: Vec<Region> = Vec::new();
        for p in &self.pieces {
            if p.region != Region::All && !out.contains(&p.region) {
                out.push(p.region);
            }
        }
        out
    }

    /// Checks the continuity tag by comparing one-sided limits at sampled
    /// interface points inside the domain's bounding box.
    pub fn check_continuity(&self, domain: &Domain) -> Result<()> {
        if self.continuity == Continuity::Discontinuous || self.pieces.len() == 1 {
            return Ok(());
        }
        let (lo, ext) = domain.bounding_box();
        let hi = [lo[0] + ext[0], lo[1] + ext[1]];
        let eps = 1e-9 * ext[0].max(ext[1]);
        for region in self.interfaces() {
            for (q, n) in region.boundary_samples(lo, hi, 257) {
                let a = self.select([q[0] + eps * n[0], q[1] + eps * n[1]]);
                let b = self.select([q[0] - eps * n[0], q[1] - eps * n[1]]);
                let (Some(a), Some(b)) = (a, b) else { continue };
                if a == b {
                    continue;
                }
                let (ea, eb) = (&self.pieces[a].expr, &self.pieces[b].expr);
                let (va, vb) = (ea.eval(q), eb.eval(q));
                if (va - vb).norm() >= 1e-8 * va.norm().max(1.0) {
                    return Err(Error::Coefficient(format!(
                        "jump of {:.3e} across interface at ({:.6}, {:.6}) between {:?} and {:?}",
                        (va - vb).norm(),
                        q[0],
                        q[1],
                        ea.source(),
                        eb.source()
                    )));
                }
                if matches!(self.continuity, Continuity::C1 | Continuity::Analytic) {
                    let d = 1e-5 * ext[0].max(ext[1]);
                    for axis in 0..2 {
                        let mut p1 = q;
                        let mut p0 = q;
                        p1[axis] += d;
                        p0[axis] -= d;
                        let ga = (ea.eval(p1) - ea.eval(p0)) / (2.0 * d);
                        let gb = (eb.eval(p1) - eb.eval(p0)) / (2.0 * d);
                        if (ga - gb).norm() >= 1e-5 * ga.norm().max(1.0) {
                            return Err(Error::Coefficient(format!(
                                "derivative jump across interface at ({:.6}, {:.6})",
                                q[0], q[1]
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Nodewise evaluation. Closure nodes must be covered; uncovered exterior
    /// nodes are left undefined.
    pub fn evaluate(&self, grid: &Grid) -> Result<ComplexField> {
        let closure = grid.closure_mask();
        let mut f = ComplexField::constant(grid, Complex64::new(0.0, 0.0));
        for k in 0..grid.node_count() {
            let p = grid.coords(k);
            match self.eval(p) {
                Some(v) => f.set(k, v),
                None if closure.get(k) => return Err(Error::Coverage { node: k, x: p[0], y: p[1] }),
                None => f.invalidate(k),
            }
        }
        Ok(f)
    }
}

/// ψ = γ₂ − γ₁ on the grid.
pub fn psi_field(gamma1: &CoefficientField, gamma2: &CoefficientField, grid: &Grid) -> Result<ComplexField> {
    let g1 = gamma1.evaluate(grid)?;
    let g2 = gamma2.evaluate(grid)?;
    Ok(g2.zip_with(&g1, |a, b| a - b))
}

/// Entries of the Hermitian matrix A; `a21 = conj(a12)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixField {
    pub a11: CoefficientField,
    #[serde(default = "zero_field")]
    pub a12: CoefficientField,
    pub a22: CoefficientField,
}

fn zero_field() -> CoefficientField {
    CoefficientField::constant(Complex64::new(0.0, 0.0))
}

impl MatrixField {
    pub fn identity() -> Self {
        let one = CoefficientField::constant(Complex64::new(1.0, 0.0));
        MatrixField { a11: one.clone(), a12: zero_field(), a22: one }
    }
}

impl Default for MatrixField {
    fn default() -> Self {
        Self::identity()
    }
}

/// Closed-form data for ∇·(γA∇u) + ω²ρu = 0, u = g on ∂Ω.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub gamma: CoefficientField,
    pub rho: CoefficientField,
    #[serde(default)]
    pub a: MatrixField,
    pub omega2: f64,
    pub g: CoefficientField,
}

/// Problem data sampled on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemFields {
    pub gamma: ComplexField,
    pub rho: ComplexField,
    pub a11: ComplexField,
    pub a12: ComplexField,
    pub a22: ComplexField,
    pub omega2: f64,
    /// Dirichlet values; only read at boundary nodes.
    pub g: ComplexField,
}

impl ProblemSpec {
    pub fn sample(&self, grid: &Grid) -> Result<ProblemFields> {
        if !(self.omega2 >= 0.0) || !self.omega2.is_finite() {
            return Err(Error::Coefficient(format!("omega2 must be a nonnegative real, got {}", self.omega2)));
        }
        let domain = grid.domain();
        let g = ComplexField::from_fn(grid, |_, p| {
            let q = match domain {
                Domain::Disk { .. } => domain.project_to_boundary(p),
                Domain::Rectangle { .. } => p,
            };
            self.g.eval(q).unwrap_or(Complex64::new(f64::NAN, f64::NAN))
        });
        for k in grid.boundary_mask().indices() {
            if g.value(k).re.is_nan() {
                let p = grid.coords(k);
                return Err(Error::Coverage { node: k, x: p[0], y: p[1] });
            }
        }
        Ok(ProblemFields {
            gamma: self.gamma.evaluate(grid)?,
            rho: self.rho.evaluate(grid)?,
            a11: self.a.a11.evaluate(grid)?,
            a12: self.a.a12.evaluate(grid)?,
            a22: self.a.a22.evaluate(grid)?,
            omega2: self.omega2,
            g,
        })
    }

    pub fn check_continuity(&self, domain: &Domain) -> Result<()> {
        for f in [&self.gamma, &self.rho, &self.a.a11, &self.a.a12, &self.a.a22] {
            f.check_continuity(domain)?;
        }
        Ok(())
    }
}

/// Smallest eigenvalue of the Hermitian matrix `[[a11, a12], [conj a12, a22]]`
/// with real diagonal.
pub fn hermitian_min_eig(a11: f64, a12: Complex64, a22: f64) -> f64 {
    let m = 0.5 * (a11 + a22);
    let d = (0.5 * (a11 - a22)).hypot(a12.norm());
    m - d
}

/// Checks that A is Hermitian positive definite at every node of `mask`.
pub fn check_hermitian_pd(f: &ProblemFields, mask: &Mask) -> Result<()> {
    for k in mask.indices() {
        let (a11, a12, a22) = (f.a11.value(k), f.a12.value(k), f.a22.value(k));
        let scale = a11.norm().max(a22.norm()).max(1.0);
        if a11.im.abs() > 1e-12 * scale || a22.im.abs() > 1e-12 * scale {
            return Err(Error::Assembly(format!("A is not Hermitian at node {k}: complex diagonal")));
        }
        let lmin = hermitian_min_eig(a11.re, a12, a22.re);
        if !(lmin > 0.0) {
            return Err(Error::Assembly(format!(
                "A is not positive definite at node {k}: min eigenvalue {lmin:.3e}"
            )));
        }
    }
    Ok(())
}

/// Sampled W^{1,∞} norm: max over the value and first differences.
pub fn w1inf(grid: &Grid, f: &ComplexField, mask: &Mask) -> f64 {
    let [dx, dy] = gradient(grid, f);
    f.max_abs_on(mask).max(dx.max_abs_on(mask)).max(dy.max_abs_on(mask))
}

/// Sampled sign and regularity conditions on the coefficients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefficientCheck {
    pub min_eig_a: f64,
    pub min_re_gamma: f64,
    pub min_im_gamma: f64,
    pub max_im_rho: f64,
    pub w1inf_gamma: f64,
    pub w1inf_a: f64,
    pub sigma_inv: f64,
}

/// Validates the sign conditions (Re γ > 0, Im γ ≥ 0, Im ρ ≤ 0 where γ is
/// complex), A Hermitian positive definite, and the W^{1,∞} ≤ σ⁻¹ bounds.
pub fn check_coefficients(grid: &Grid, f: &ProblemFields, sigma: f64) -> Result<CoefficientCheck> {
    let mask = grid.closure_mask();
    check_hermitian_pd(f, &mask)?;
    let mut c = CoefficientCheck {
        min_eig_a: f64::INFINITY,
        min_re_gamma: f64::INFINITY,
        min_im_gamma: f64::INFINITY,
        max_im_rho: f64::NEG_INFINITY,
        w1inf_gamma: w1inf(grid, &f.gamma, &mask),
        w1inf_a: w1inf(grid, &f.a11, &mask) + 2.0 * w1inf(grid, &f.a12, &mask) + w1inf(grid, &f.a22, &mask),
        sigma_inv: 1.0 / sigma,
    };
    let mut complex_gamma = false;
    for k in mask.indices() {
        let g = f.gamma.value(k);
        c.min_eig_a = c.min_eig_a.min(hermitian_min_eig(f.a11.value(k).re, f.a12.value(k), f.a22.value(k).re));
        c.min_re_gamma = c.min_re_gamma.min(g.re);
        c.min_im_gamma = c.min_im_gamma.min(g.im);
        c.max_im_rho = c.max_im_rho.max(f.rho.value(k).im);
        complex_gamma |= g.im != 0.0;
    }
    if !(c.min_re_gamma > 0.0) {
        return Err(Error::Coefficient(format!("Re gamma must be positive, min is {:.3e}", c.min_re_gamma)));
    }
    if complex_gamma && c.min_im_gamma < 0.0 {
        return Err(Error::Coefficient(format!("Im gamma must be nonnegative, min is {:.3e}", c.min_im_gamma)));
    }
    if complex_gamma && c.max_im_rho > 0.0 {
        return Err(Error::Coefficient(format!(
            "Im rho must be nonpositive when gamma is complex, max is {:.3e}",
            c.max_im_rho
        )));
    }
    if c.w1inf_gamma > c.sigma_inv || c.w1inf_a > c.sigma_inv {
        return Err(Error::Coefficient(format!(
            "W^{{1,inf}} bound violated: |gamma| = {:.4}, |A| = {:.4}, 1/sigma = {:.4}",
            c.w1inf_gamma, c.w1inf_a, c.sigma_inv
        )));
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, hessian};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn constant_field() {
        let g = build_grid(Domain::unit_square(), 8).unwrap();
        let f: CoefficientField = serde_json::from_str("\"1+2*i\"").unwrap();
        let v = f.evaluate(&g).unwrap();
        assert!(v.values().iter().all(|&z| z == c(1.0, 2.0)));
    }

    #[test]
    fn same_expression_on_both_sides() {
        let g = build_grid(Domain::unit_square(), 16).unwrap();
        let f: CoefficientField = serde_json::from_str(
            r#"{"pieces":[{"expr":"1+x1^2","region":{"type":"halfplane","params":[-1,0,-0.5]}},
                          {"expr":"1+x1^2","region":{"type":"all"}}],"continuity":"C1"}"#,
        )
        .unwrap();
        f.check_continuity(g.domain()).unwrap();
        let v = f.evaluate(&g).unwrap();
        for k in 0..g.node_count() {
            let x = g.coords(k)[0];
            assert!((v.value(k) - c(1.0 + x * x, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn c2_break_passes_continuity_and_shows_second_difference_jump() {
        let n = 64;
        let g = build_grid(Domain::unit_square(), n).unwrap();
        let f: CoefficientField = serde_json::from_str(
            r#"{"pieces":[{"expr":"1","region":{"type":"halfplane","params":[-1,0,-0.5]}},
                          {"expr":"1+(x1-0.5)^3","region":{"type":"all"}}],"continuity":"C1"}"#,
        )
        .unwrap();
        f.check_continuity(g.domain()).unwrap();
        let v = f.evaluate(&g).unwrap();
        // Exact second derivative: 0 left of the seam, 6(x-0.5) right of it.
        let [dxx, _, _] = hessian(&g, &v);
        let j = n / 2;
        let at = |i: usize| dxx.value(g.index(i, j)).re;
        let h = g.hx();
        assert!(at(n / 2 - 2).abs() < 1e-9);
        assert!((at(n / 2 + 2) - 6.0 * 2.0 * h).abs() < 1e-9);
        // The stencil centred on the seam sees a jump: h³/h² = h.
        assert!((at(n / 2) - h).abs() < 1e-9);

        let jump: CoefficientField = serde_json::from_str(
            r#"{"pieces":[{"expr":"1","region":{"type":"halfplane","params":[-1,0,-0.5]}},
                          {"expr":"2","region":{"type":"all"}}]}"#,
        )
        .unwrap();
        assert!(jump.check_continuity(g.domain()).is_err());
    }

    #[test]
    fn coverage_error() {
        let g = build_grid(Domain::unit_square(), 8).unwrap();
        let f: CoefficientField = serde_json::from_str(
            r#"{"pieces":[{"expr":"1","region":{"type":"disk","params":[0.5,0.5,0.2]}}],"continuity":"discontinuous"}"#,
        )
        .unwrap();
        assert!(matches!(f.evaluate(&g), Err(Error::Coverage { .. })));
    }

    #[test]
    fn psi_examples() {
        let g = build_grid(Domain::unit_square(), 10).unwrap();
        let g1 = CoefficientField::parse("1").unwrap();
        let zero = psi_field(&g1, &g1, &g).unwrap();
        assert!(zero.values().iter().all(|z| z.norm() == 0.0));
        let g2 = CoefficientField::parse("1+(1+0.5*i)*x1").unwrap();
        let psi = psi_field(&g1, &g2, &g).unwrap();
        for k in 0..g.node_count() {
            let x = g.coords(k)[0];
            assert!((psi.value(k) - c(1.0, 0.5) * x).norm() < 1e-15);
        }
    }

    #[test]
    fn psi_matches_pointwise_subtraction() {
        let g = build_grid(Domain::rectangle(2.0, 1.0).unwrap(), 12).unwrap();
        let a = CoefficientField::parse("1 + 0.3*x1^3 - 2*x1*x2 + (0.1+0.2*i)*x2^2").unwrap();
        let b = CoefficientField::parse("0.5 - x1 + i*x1*x2^2").unwrap();
        let psi = psi_field(&a, &b, &g).unwrap();
        for k in 0..g.node_count() {
            let p = g.coords(k);
            let (x, y) = (p[0], p[1]);
            let va = c(1.0 + 0.3 * x.powi(3) - 2.0 * x * y + 0.1 * y * y, 0.2 * y * y);
            let vb = c(0.5 - x, x * y * y);
            assert!((psi.value(k) - (vb - va)).norm() < 1e-13);
        }
    }

    #[test]
    fn serde_round_trip() {
        let src = r#"{"pieces":[{"expr":"x1","region":{"type":"disk","params":[0.5,0.5,0.25]}},{"expr":"0.5"}]}"#;
        let f: CoefficientField = serde_json::from_str(src).unwrap();
        let back: CoefficientField = serde_json::from_str(&serde_json::to_string(&f).unwrap()).unwrap();
        assert_eq!(f, back);
        let n: CoefficientField = serde_json::from_str("2.5").unwrap();
        assert_eq!(n.eval([0.0, 0.0]), Some(c(2.5, 0.0)));
        assert!(serde_json::from_str::<CoefficientField>(r#"{"pieces":[{"expr":"1","bogus":1}]}"#).is_err());
    }

    #[test]
    fn coefficient_checks() {
        let g = build_grid(Domain::unit_square(), 16).unwrap();
        let mut spec = ProblemSpec {
            gamma: CoefficientField::parse("1+0.5*x1").unwrap(),
            rho: CoefficientField::parse("1").unwrap(),
            a: MatrixField::identity(),
            omega2: 1.0,
            g: CoefficientField::parse("exp(i*x1)").unwrap(),
        };
        let sigma = 0.1 * std::f64::consts::PI;
        let chk = check_coefficients(&g, &spec.sample(&g).unwrap(), sigma).unwrap();
        assert!((chk.min_eig_a - 1.0).abs() < 1e-15);
        spec.gamma = CoefficientField::parse("1-0.1*i").unwrap();
        assert!(check_coefficients(&g, &spec.sample(&g).unwrap(), sigma).is_err());
        spec.gamma = CoefficientField::parse("1").unwrap();
        spec.a.a12 = CoefficientField::parse("2").unwrap();
        assert!(matches!(
            check_coefficients(&g, &spec.sample(&g).unwrap(), sigma),
            Err(Error::Assembly(_))
        ));
    }
}
