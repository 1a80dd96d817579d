//! Velocity-space discretization: a cell-centered uniform grid on the box
//! |v_i| ≤ L, scalar fields sampled on it, and midpoint integration.
//!
//! Midpoint sums are spectrally accurate for the rapidly decaying fields
//! used throughout (Gaussian tails at the box edge are ~e^{−L²/2}), which is
//! what justifies the truncation defaults.

use crate::util::par_map;
use serde::{Deserialize, Serialize};

/// Anything that can be evaluated at a velocity point. The slice has length
/// n (2 or 3); implementations must be thread-safe.
pub trait VelocityFn: Sync {
    fn eval(&self, v: &[f64]) -> f64;
}

impl<F: Fn(&[f64]) -> f64 + Sync> VelocityFn for F {
    fn eval(&self, v: &[f64]) -> f64 {
        self(v)
    }
}

/// Cell-centered uniform grid: m points per axis covering [−L, L], node
/// coordinates −L + (i + ½)h with h = 2L/m.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub n: usize,
    pub l: f64,
    pub m: usize,
}

impl Grid {
    pub fn new(n: usize, l: f64, m: usize) -> Grid {
        assert!(n == 2 || n == 3, "velocity dimension must be 2 or 3");
        assert!(l > 0.0 && m >= 4);
        Grid { n, l, m }
    }

    pub fn h(&self) -> f64 {
        2.0 * self.l / self.m as f64
    }

    pub fn axis(&self, i: usize) -> f64 {
        -self.l + (i as f64 + 0.5) * self.h()
    }

    /// Total number of grid points, m^n.
    pub fn len(&self) -> usize {
        self.m.pow(self.n as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cell_volume(&self) -> f64 {
        self.h().powi(self.n as i32)
    }

    /// Decode a flat row-major index into a velocity point (padded to 3).
    pub fn point(&self, idx: usize) -> [f64; 3] {
        let mut v = [0.0; 3];
        match self.n {
            2 => {
                v[0] = self.axis(idx / self.m);
                v[1] = self.axis(idx % self.m);
            }
            _ => {
                v[0] = self.axis(idx / (self.m * self.m));
                v[1] = self.axis((idx / self.m) % self.m);
                v[2] = self.axis(idx % self.m);
            }
        }
        v
    }

    /// Sample a function at every node (parallel, deterministic order).
    pub fn sample(&self, f: &dyn VelocityFn) -> GridField {
        let g = *self;
        let vals = par_map(self.len(), move |idx| {
            let p = g.point(idx);
            f.eval(&p[..g.n])
        });
        GridField { grid: *self, vals }
    }

    /// Midpoint-rule integral of sampled values.
    pub fn integrate(&self, vals: &[f64]) -> f64 {
        debug_assert_eq!(vals.len(), self.len());
        self.cell_volume() * vals.iter().sum::<f64>()
    }

    /// Midpoint-rule L² inner product of two sampled fields.
    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        self.cell_volume() * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
    }

    /// Same box, factor-times finer spacing.
    pub fn refined(&self, factor: usize) -> Grid {
        Grid::new(self.n, self.l, self.m * factor)
    }
}

/// A scalar field stored by value at every grid node (row-major).
#[derive(Debug, Clone)]
pub struct GridField {
    pub grid: Grid,
    pub vals: Vec<f64>,
}

/// Alias used in signatures that mirror the operator contracts.
pub type Field = GridField;

impl GridField {
    pub fn zeros(grid: Grid) -> GridField {
        GridField {
            grid,
            vals: vec![0.0; grid.len()],
        }
    }

    pub fn from_fn(grid: Grid, f: &dyn VelocityFn) -> GridField {
        grid.sample(f)
    }

    /// L² norm under the midpoint rule.
    pub fn l2(&self) -> f64 {
        self.grid.inner(&self.vals, &self.vals).sqrt()
    }

    pub fn scaled(&self, c: f64) -> GridField {
        GridField {
            grid: self.grid,
            vals: self.vals.iter().map(|v| c * v).collect(),
        }
    }

    /// self + c·other (grids must match).
    pub fn axpy(&self, c: f64, other: &GridField) -> GridField {
        assert_eq!(self.grid, other.grid);
        GridField {
            grid: self.grid,
            vals: self
                .vals
                .iter()
                .zip(&other.vals)
                .map(|(a, b)| a + c * b)
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.vals.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn axis_index(&self, x: f64) -> (isize, f64) {
        // Cell index and fractional offset from node i toward node i+1.
        let h = self.grid.h();
        let t = (x + self.grid.l) / h - 0.5;
        let i = t.floor();
        (i as isize, t - i)
    }

    fn node_clamped(&self, i: isize, j: isize) -> f64 {
        let m = self.grid.m as isize;
        let ic = i.clamp(0, m - 1) as usize;
        let jc = j.clamp(0, m - 1) as usize;
        self.vals[ic * self.grid.m + jc]
    }
}

/// Catmull–Rom weights for parameter t ∈ [0, 1] between the middle nodes.
fn catmull_rom(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        -0.5 * t3 + t2 - 0.5 * t,
        1.5 * t3 - 2.5 * t2 + 1.0,
        -1.5 * t3 + 2.0 * t2 + 0.5 * t,
        0.5 * t3 - 0.5 * t2,
    ]
}

impl VelocityFn for GridField {
    /// Bicubic (Catmull–Rom) interpolation; zero outside the box. Only the
    /// n = 2 layout supports off-node evaluation.
    fn eval(&self, v: &[f64]) -> f64 {
        assert_eq!(self.grid.n, 2, "off-node evaluation is implemented for n = 2");
        if v[0].abs() > self.grid.l || v[1].abs() > self.grid.l {
            return 0.0;
        }
        let (i, ti) = self.axis_index(v[0]);
        let (j, tj) = self.axis_index(v[1]);
        let wi = catmull_rom(ti);
        let wj = catmull_rom(tj);
        let mut acc = 0.0;
        for (a, &wa) in wi.iter().enumerate() {
            let row = i + a as isize - 1;
            let mut line = 0.0;
            for (b, &wb) in wj.iter().enumerate() {
                line += wb * self.node_clamped(row, j + b as isize - 1);
            }
            acc += wa * line;
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_axis_is_cell_centered() {
        let g = Grid::new(2, 8.0, 32);
        assert!((g.h() - 0.5).abs() < 1e-15);
        assert!((g.axis(0) + 7.75).abs() < 1e-13);
        assert!((g.axis(31) - 7.75).abs() < 1e-13);
    }

    #[test]
    fn maxwellian_mass_on_default_grid() {
        // ∫ (2π)^{−1} e^{−|v|²/2} dv = 1; midpoint on the decaying tail is
        // accurate far beyond the 1e−8 contract.
        let g = Grid::new(2, 8.0, 32);
        let f = g.sample(&|v: &[f64]| {
            (-(v[0] * v[0] + v[1] * v[1]) / 2.0).exp() / (2.0 * std::f64::consts::PI)
        });
        assert!((g.integrate(&f.vals) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn bicubic_reproduces_linear_functions() {
        let g = Grid::new(2, 4.0, 16);
        let f = g.sample(&|v: &[f64]| 2.0 * v[0] - 3.0 * v[1] + 1.0);
        // Away from the boundary the clamped stencil is interior.
        for &(x, y) in &[(0.13, -1.2), (1.7, 2.3), (-2.4, 0.9)] {
            let got = f.eval(&[x, y]);
            let want = 2.0 * x - 3.0 * y + 1.0;
            assert!((got - want).abs() < 1e-12, "at ({x},{y}): {got} vs {want}");
        }
    }

    #[test]
    fn bicubic_tracks_smooth_fields_to_third_order() {
        let g = Grid::new(2, 4.0, 32);
        let f = g.sample(&|v: &[f64]| (-(v[0] * v[0] + v[1] * v[1]) / 2.0).exp());
        let got = f.eval(&[0.63, -0.41]);
        let want = (-(0.63f64 * 0.63 + 0.41 * 0.41) / 2.0).exp();
        assert!((got - want).abs() < 5e-4);
    }

    #[test]
    fn refined_grid_halves_spacing() {
        let g = Grid::new(2, 8.0, 32);
        let r = g.refined(2);
        assert_eq!(r.m, 64);
        assert!((r.h() - 0.25).abs() < 1e-15);
    }
}
