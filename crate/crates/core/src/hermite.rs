//! Hermite-function basis in velocity.
//!
//! The one-dimensional basis functions are
//!
//! ```text
//!     h_k(x) = (2π)^{-1/4} (2^k k!)^{-1/2} H_k(x/√2) e^{-x²/4},
//! ```
//!
//! orthonormal in `L²(dx)` and adapted to the Gaussian weight in the sense
//! that `h_0(x)² = (2π)^{-1/2} e^{-x²/2}` is the standard normal density.
//! Everything in this module is driven by the three-term recurrences
//!
//! ```text
//!     x h_k = √(k+1) h_{k+1} + √k h_{k-1},
//!     ∂ h_k = ½ (√k h_{k-1} - √(k+1) h_{k+1}),
//! ```
//!
//! which we use both for stable pointwise evaluation and for assembling
//! exact multiplication matrices in truncated bases.
//!
//! Multi-dimensional basis elements are tensor products `e_κ(v) = ∏_a
//! h_{κ_a}(v_a)` collected in graded order (total degree 0, 1, 2, … with a
//! fixed order inside each degree).  The grading makes truncated bases
//! nested: the matrix of an operator on the degree-≤8 basis is the leading
//! principal submatrix of its matrix on the degree-≤16 basis.
//!
//! Two identities are used throughout the operator code and are pinned by
//! tests here: `e_0 = √μ` with `μ` the standard Gaussian, and
//! `|v|²√μ = 2 e_{(0,0)} + √2 e_{(2,0)} + √2 e_{(0,2)}` in dimension two.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::VelocityFn;
use crate::quadrature::gauss_hermite_prob;
use crate::util::multi_indices;

/// Values `h_0(x), …, h_max(x)` by the three-term recurrence.
pub fn hermite_values(max_k: usize, x: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(max_k + 1);
    let h0 = (2.0 * std::f64::consts::PI).powf(-0.25) * (-x * x / 4.0).exp();
    out.push(h0);
    if max_k == 0 {
        return out;
    }
    out.push(x * h0);
    for k in 1..max_k {
        let next = (x * out[k] - (k as f64).sqrt() * out[k - 1]) / ((k + 1) as f64).sqrt();
        out.push(next);
    }
    out
}

/// Values of the polynomial parts `p_k(x) = h_k(x) e^{x²/4}`.
///
/// The `p_k` obey the same recurrence as the `h_k` but stay polynomial, so
/// ratios like `e_κ/√μ` can be evaluated without forming large exponentials.
pub fn hermite_poly_values(max_k: usize, x: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(max_k + 1);
    out.push((2.0 * std::f64::consts::PI).powf(-0.25));
    if max_k == 0 {
        return out;
    }
    out.push(x * out[0]);
    for k in 1..max_k {
        let next = (x * out[k] - (k as f64).sqrt() * out[k - 1]) / ((k + 1) as f64).sqrt();
        out.push(next);
    }
    out
}

/// Values `∂h_0(x), …, ∂h_max(x)`.
pub fn hermite_derivatives(max_k: usize, x: f64) -> Vec<f64> {
    let h = hermite_values(max_k + 1, x);
    (0..=max_k)
        .map(|k| {
            let lower = if k == 0 {
                0.0
            } else {
                (k as f64).sqrt() * h[k - 1]
            };
            0.5 * (lower - ((k + 1) as f64).sqrt() * h[k + 1])
        })
        .collect()
}

/// Tensor-product Hermite basis of all elements with total degree ≤ `max_degree`.
#[derive(Debug, Clone)]
pub struct TensorBasis {
    pub n: usize,
    pub max_degree: usize,
    /// Multi-indices in graded order; unused trailing axes are zero.
    pub indices: Vec<[usize; 3]>,
}

impl TensorBasis {
    pub fn new(n: usize, max_degree: usize) -> Result<Self> {
        if n != 2 && n != 3 {
            return Err(Error::Config(format!("basis dimension must be 2 or 3, got {n}")));
        }
        let indices = multi_indices(n, max_degree)
            .into_iter()
            .map(|idx| {
                let mut k = [0usize; 3];
                k[..n].copy_from_slice(&idx);
                k
            })
            .collect();
        Ok(Self { n, max_degree, indices })
    }

    pub fn dim(&self) -> usize {
        self.indices.len()
    }

    /// Position of a multi-index in the graded order.
    pub fn index_of(&self, k: &[usize]) -> Option<usize> {
        let mut key = [0usize; 3];
        key[..self.n].copy_from_slice(k);
        self.indices.iter().position(|idx| *idx == key)
    }

    fn axis_tables(&self, v: &[f64], table: impl Fn(usize, f64) -> Vec<f64>) -> Vec<Vec<f64>> {
        (0..self.n).map(|a| table(self.max_degree, v[a])).collect()
    }

    fn products(&self, tables: &[Vec<f64>]) -> Vec<f64> {
        self.indices
            .iter()
            .map(|k| (0..self.n).map(|a| tables[a][k[a]]).product())
            .collect()
    }

    /// Values of every basis element at `v`.
    pub fn eval_all(&self, v: &[f64]) -> Vec<f64> {
        let tables = self.axis_tables(v, hermite_values);
        self.products(&tables)
    }

    /// Values of `e_κ(v) / √μ(v)`; polynomial in `v`, so no exponential ratios.
    pub fn eval_all_over_sqrt_mu(&self, v: &[f64]) -> Vec<f64> {
        let tables = self.axis_tables(v, hermite_poly_values);
        let norm = (2.0 * std::f64::consts::PI).powf(self.n as f64 / 4.0);
        self.products(&tables).into_iter().map(|p| norm * p).collect()
    }

    /// Values of `∂_{axis} e_κ` at `v`.
    pub fn eval_all_deriv(&self, v: &[f64], axis: usize) -> Vec<f64> {
        let values = self.axis_tables(v, hermite_values);
        let derivs = self.axis_tables(v, hermite_derivatives);
        self.indices
            .iter()
            .map(|k| {
                (0..self.n)
                    .map(|a| if a == axis { derivs[a][k[a]] } else { values[a][k[a]] })
                    .product()
            })
            .collect()
    }

    /// Matrix of multiplication by the coordinate `v_axis`, truncated to the
    /// basis.  Exact on inputs of degree < `max_degree`; top-degree output is
    /// clipped.  Symmetric by the raising/lowering symmetry of √k.
    pub fn mult_matrix(&self, axis: usize) -> DMatrix<f64> {
        let d = self.dim();
        let mut m = DMatrix::zeros(d, d);
        for (col, k) in self.indices.iter().enumerate() {
            let mut up = *k;
            up[axis] += 1;
            if let Some(row) = self.index_of(&up[..self.n]) {
                m[(row, col)] = ((k[axis] + 1) as f64).sqrt();
            }
            if k[axis] > 0 {
                let mut down = *k;
                down[axis] -= 1;
                if let Some(row) = self.index_of(&down[..self.n]) {
                    m[(row, col)] = (k[axis] as f64).sqrt();
                }
            }
        }
        m
    }

    /// Coefficient vectors of the collision invariants
    /// `√μ, v_1√μ, …, v_n√μ, |v|²√μ` in this basis.
    ///
    /// Built by applying the exact multiplication matrices to the coefficient
    /// vector of `√μ = e_0`; requires `max_degree ≥ 2` so nothing truncates.
    pub fn invariant_coeffs(&self) -> Result<Vec<DVector<f64>>> {
        if self.max_degree < 2 {
            return Err(Error::Config(
                "invariant coefficients need max_degree >= 2".into(),
            ));
        }
        let d = self.dim();
        let mut sqrt_mu = DVector::zeros(d);
        sqrt_mu[0] = 1.0;
        let mult: Vec<DMatrix<f64>> = (0..self.n).map(|a| self.mult_matrix(a)).collect();
        let mut out = vec![sqrt_mu.clone()];
        for m in &mult {
            out.push(m * &sqrt_mu);
        }
        let mut energy = DVector::zeros(d);
        for m in &mult {
            energy += m * (m * &sqrt_mu);
        }
        out.push(energy);
        Ok(out)
    }

    /// Coefficients `c_κ = ∫ f e_κ dv` by tensor Gauss–Hermite quadrature
    /// with `m` nodes per axis.  Exact when `f · e_κ · e^{|v|²/2}` is a
    /// polynomial that the rule resolves, e.g. `f` = polynomial × `√μ`.
    pub fn project(&self, f: &dyn VelocityFn, m: usize) -> DVector<f64> {
        let quad = gauss_hermite_prob(m);
        let d = self.dim();
        let mut coeffs = DVector::zeros(d);
        let mut v = [0.0f64; 3];
        let visit = |v: &[f64], w: f64, coeffs: &mut DVector<f64>| {
            // Quadrature weight carries e^{-|v|²/2}; fold the compensating
            // factor into the polynomial parts of the basis elements.
            let fv = f.eval(v);
            if fv == 0.0 {
                return;
            }
            let polys = self.eval_all_over_sqrt_mu(v);
            let half_gauss =
                (2.0 * std::f64::consts::PI).powf(-(self.n as f64) / 4.0) * ((v[..self.n]
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>())
                    / 4.0)
                    .exp();
            let scale = w * fv * half_gauss;
            for i in 0..d {
                coeffs[i] += scale * polys[i];
            }
        };
        if self.n == 2 {
            for (i, &x) in quad.nodes.iter().enumerate() {
                for (j, &y) in quad.nodes.iter().enumerate() {
                    v[0] = x;
                    v[1] = y;
                    visit(&v[..2], quad.weights[i] * quad.weights[j], &mut coeffs);
                }
            }
        } else {
            for (i, &x) in quad.nodes.iter().enumerate() {
                for (j, &y) in quad.nodes.iter().enumerate() {
                    for (k, &z) in quad.nodes.iter().enumerate() {
                        v = [x, y, z];
                        let w = quad.weights[i] * quad.weights[j] * quad.weights[k];
                        visit(&v, w, &mut coeffs);
                    }
                }
            }
        }
        coeffs
    }
}

/// A function in the span of a [`TensorBasis`], `g(v) = Σ c_κ e_κ(v)`.
#[derive(Debug, Clone)]
pub struct HermiteExpansion {
    pub basis: TensorBasis,
    pub coeffs: DVector<f64>,
}

impl HermiteExpansion {
    pub fn new(basis: TensorBasis, coeffs: DVector<f64>) -> Result<Self> {
        if coeffs.len() != basis.dim() {
            return Err(Error::Config(format!(
                "coefficient length {} does not match basis dimension {}",
                coeffs.len(),
                basis.dim()
            )));
        }
        Ok(Self { basis, coeffs })
    }

    pub fn zeros(basis: TensorBasis) -> Self {
        let d = basis.dim();
        Self { basis, coeffs: DVector::zeros(d) }
    }

    pub fn eval(&self, v: &[f64]) -> f64 {
        let vals = self.basis.eval_all(v);
        vals.iter().zip(self.coeffs.iter()).map(|(e, c)| e * c).sum()
    }

    /// Value of `∂_{axis} g` at `v`.
    pub fn eval_deriv(&self, v: &[f64], axis: usize) -> f64 {
        let vals = self.basis.eval_all_deriv(v, axis);
        vals.iter().zip(self.coeffs.iter()).map(|(e, c)| e * c).sum()
    }
}

impl VelocityFn for HermiteExpansion {
    fn eval(&self, v: &[f64]) -> f64 {
        HermiteExpansion::eval(self, v)
    }
}
