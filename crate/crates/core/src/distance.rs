//! Exact Euclidean distance transform on the node lattice.
//!
//! Separable lower-envelope-of-parabolas transform (Felzenszwalb and
//! Huttenlocher), run in physical coordinates so anisotropic spacing stays
//! exact.

use crate::grid::{Grid, Mask, RealField};

/// Distance from every node to the nearest node of `mask`.
/// An empty mask yields `+inf` everywhere.
pub fn distance_field(mask: &Mask, grid: &Grid) -> RealField {
    let sq = squared_distance(mask, grid);
    RealField::from_fn(grid, |k, _| sq[k].sqrt())
}

pub(crate) fn squared_distance(mask: &Mask, grid: &Grid) -> Vec<f64> {
    let (nx, ny) = grid.shape();
    let mut d = vec![f64::INFINITY; nx * ny];
    let mut line = vec![0.0; nx.max(ny)];
    let mut out = vec![0.0; nx.max(ny)];
    let mut scratch = Scratch::new(nx.max(ny));

    for i in 0..nx {
        for j in 0..ny {
            line[j] = if mask.get(j * nx + i) { 0.0 } else { f64::INFINITY };
        }
        envelope_1d(&line[..ny], grid.hy(), &mut out[..ny], &mut scratch);
        for j in 0..ny {
            d[j * nx + i] = out[j];
        }
    }
    for j in 0..ny {
        line[..nx].copy_from_slice(&d[j * nx..(j + 1) * nx]);
        envelope_1d(&line[..nx], grid.hx(), &mut out[..nx], &mut scratch);
        d[j * nx..(j + 1) * nx].copy_from_slice(&out[..nx]);
    }
    d
}

struct Scratch {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Scratch {
            v: vec![0; n],
            z: vec![0.0; n + 1],
        }
    }
}

/// `out[p] = min_q ((p − q)·h)² + f[q]`.
fn envelope_1d(f: &[f64], h: f64, out: &mut [f64], s: &mut Scratch) {
    let n = f.len();
    let pos = |q: usize| q as f64 * h;
    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                s.v[0] = q;
                s.z[0] = f64::NEG_INFINITY;
                s.z[1] = f64::INFINITY;
                break;
            }
            let v = s.v[k as usize];
            let inter = ((f[q] + pos(q) * pos(q)) - (f[v] + pos(v) * pos(v)))
                / (2.0 * (pos(q) - pos(v)));
            if inter <= s.z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            s.v[k as usize] = q;
            s.z[k as usize] = inter;
            s.z[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut m = 0usize;
    for (p, o) in out.iter_mut().enumerate() {
        let x = pos(p);
        while s.z[m + 1] < x {
            m += 1;
        }
        let v = s.v[m];
        let dx = x - pos(v);
        *o = dx * dx + f[v];
    }
}
