//! Fixtures shared by the benches in `benches/`.

use imstab_core::coefficients::{CoefficientField, MatrixField, ProblemSpec};
use imstab_core::{build_grid, Complex64, ComplexField, Domain, Grid};

/// γ = ρ = 1, ω² = 2 on (0, 2)² with g = cos x₁ cos x₂.
pub fn cosine_problem(n_cells: usize) -> (Grid, ProblemSpec) {
    let grid = build_grid(Domain::rectangle(2.0, 2.0).expect("valid domain"), n_cells).expect("valid grid");
    let spec = ProblemSpec {
        gamma: CoefficientField::constant(Complex64::new(1.0, 0.0)),
        rho: CoefficientField::constant(Complex64::new(1.0, 0.0)),
        a: MatrixField::default(),
        omega2: 2.0,
        g: CoefficientField::parse("cos(x1)*cos(x2)").expect("valid expression"),
    };
    (grid, spec)
}

/// The exact cosine phantom sampled on `grid`.
pub fn cosine_field(grid: &Grid) -> ComplexField {
    ComplexField::from_fn(grid, |_, p| Complex64::new(p[0].cos() * p[1].cos(), 0.0))
}

/// A complex bump difference whose argument sweeps about 58 degrees.
pub fn complex_bump(grid: &Grid) -> ComplexField {
    ComplexField::from_fn(grid, |_, p| {
        Complex64::new(1.0, 0.8 * p[0]) * 0.1 * p[0] * (2.0 - p[0]) * p[1] * (2.0 - p[1])
    })
}
