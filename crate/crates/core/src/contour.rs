//! Level-set extraction by marching squares and its total length (the
//! one-dimensional Hausdorff measure of `{f = t}` in the plane).

use crate::grid::{Grid, Mask, RealField};

pub type Segment = [[f64; 2]; 2];

/// Level-set segments of `{f = t}` over cells whose four corners lie in
/// `region` and carry valid values. Nodes with `f > t` count as above; saddle
/// cells are resolved with the cell-centre average.
pub fn level_segments(grid: &Grid, f: &RealField, t: f64, region: &Mask) -> Vec<Segment> {
    let (nx, ny) = grid.shape();
    let mut segs = Vec::new();
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let ks = [
                grid.index(i, j),
                grid.index(i + 1, j),
                grid.index(i + 1, j + 1),
                grid.index(i, j + 1),
            ];
            if !ks.iter().all(|&k| region.get(k) && f.is_valid(k)) {
                continue;
            }
            let v = ks.map(|k| f.value(k));
            let above = v.map(|x| x > t);
            let case = above.iter().enumerate().fold(0u8, |acc, (n, &a)| acc | ((a as u8) << n));
            if case == 0 || case == 15 {
                continue;
            }
            let pts = ks.map(|k| grid.coords(k));
            // Edge e joins corner e and corner e+1.
            let cross = |e: usize| -> [f64; 2] {
                let (a, b) = (e, (e + 1) % 4);
                let s = ((t - v[a]) / (v[b] - v[a])).clamp(0.0, 1.0);
                [
                    pts[a][0] + s * (pts[b][0] - pts[a][0]),
                    pts[a][1] + s * (pts[b][1] - pts[a][1]),
                ]
            };
            let edges: Vec<usize> = (0..4).filter(|&e| above[e] != above[(e + 1) % 4]).collect();
            if edges.len() == 2 {
                segs.push([cross(edges[0]), cross(edges[1])]);
            } else {
                let centre_above = v.iter().sum::<f64>() * 0.25 > t;
                // Cut off every corner whose class differs from the centre.
                for c in 0..4 {
                    if above[c] != centre_above {
                        segs.push([cross((c + 3) % 4), cross(c)]);
                    }
                }
            }
        }
    }
    segs
}

/// Total polyline length of `{f = t}` inside `region`; zero for an empty level set.
pub fn level_measure(grid: &Grid, f: &RealField, t: f64, region: &Mask) -> f64 {
    level_segments(grid, f, t, region)
        .iter()
        .map(|[a, b]| (a[0] - b[0]).hypot(a[1] - b[1]))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, Domain};
    use std::f64::consts::PI;

    #[test]
    fn straight_line() {
        let g = build_grid(Domain::unit_square(), 64).unwrap();
        let f = RealField::from_fn(&g, |_, p| p[0]);
        let m = g.closure_mask();
        assert!((level_measure(&g, &f, 0.5, &m) - 1.0).abs() < 0.01);
        // Off-lattice level.
        assert!((level_measure(&g, &f, 0.337, &m) - 1.0).abs() < 0.01);
        assert_eq!(level_measure(&g, &f, -1.0, &m), 0.0);
    }

    #[test]
    fn circle_circumference() {
        let g = build_grid(Domain::unit_square(), 256).unwrap();
        let f = RealField::from_fn(&g, |_, p| (p[0] - 0.5).powi(2) + (p[1] - 0.5).powi(2));
        let l = level_measure(&g, &f, 0.04, &g.closure_mask());
        let exact = 2.0 * PI * 0.2;
        assert!((l - exact).abs() / exact < 0.02, "{l}");
    }

    #[test]
    fn circle_error_shrinks_with_h() {
        let exact = 2.0 * PI * 0.3;
        let mut prev = f64::INFINITY;
        for n in [16, 32, 64, 128] {
            let g = build_grid(Domain::unit_square(), n).unwrap();
            let f = RealField::from_fn(&g, |_, p| (p[0] - 0.5).hypot(p[1] - 0.5));
            let err = (level_measure(&g, &f, 0.3, &g.closure_mask()) - exact).abs();
            assert!(err <= prev + 1e-12 && err < 2.0 * g.h(), "n={n} err={err}");
            prev = err;
        }
    }

    #[test]
    fn region_restricts_measure() {
        let g = build_grid(Domain::unit_square(), 64).unwrap();
        let f = RealField::from_fn(&g, |_, p| p[0]);
        let lower = Mask::from_fn(&g, |_, p| p[1] <= 0.5 + 1e-12);
        assert!((level_measure(&g, &f, 0.3, &lower) - 0.5).abs() < 1e-9);
    }
}
