//! Dense Hermite-basis matrices of the linearized collision operator.
//!
//! Everything here runs through one device: write the quadratic form as a
//! positively weighted sum of squares and accumulate rank-one rows, so the
//! assembled matrix is symmetric positive semidefinite at every quadrature
//! level, not merely in the limit. For the full operator the starting point
//! is the classical symmetrization of the Dirichlet form: with G = g/√μ,
//!
//!   ⟨Lg, g⟩ = ¼ ∫∫∫ B μ μ_* (G(v') + G(v'_*) − G(v) − G(v_*))² dσ dv_* dv,
//!
//! whose null directions are the collision invariants — annihilated
//! pointwise at every σ node because the post-collisional map conserves
//! momentum and energy identically, so the null space survives any
//! truncation of the rule. The coercive part splits into a multiplication
//! piece and a difference piece,
//!
//!   ⟨Ng, g⟩ = ∫ ν g² dv + ½ ∫∫∫ B (g(v') − g(v))² M(v'_*) M(v_*) dσ dv_* dv,
//!
//! with M = √μ and ν the fitted power-law part of the collision frequency.
//! The compact remainder is the matrix difference K = L − N on the shared
//! basis.
//!
//! Quadrature. The μμ_* pair measure of the full form is matched exactly by
//! a tensor Gauss–Hermite rule. The difference piece of N decays more slowly
//! (worst case e^{−|v|²/4} in v once the post-collisional Gaussians are
//! accounted for, e^{−3|v_*|²/8} in v_*), so its axes use Gauss–Hermite
//! nodes rescaled to those envelopes with the weight ratio folded into the
//! node weights. Shells finer than `k_max` are dropped — the same truncation
//! the grid-route operators apply, so the two routes see the same operator.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::hermite::TensorBasis;
use crate::kernel::{for_each_sigma, k_min_for, KernelParams, SigmaQuadSpec};
use crate::quadrature::{gauss_hermite_prob, gauss_legendre};

use super::{check_pao, PaoSplit};

/// Which operator a matrix represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixKind {
    /// The full linearized operator L.
    FullL,
    /// The coercive part N (multiplication by ν plus the difference form).
    NormN,
    /// The compact remainder K = L − N.
    CompactK,
}

impl MatrixKind {
    fn tag(&self) -> &'static str {
        match self {
            MatrixKind::FullL => "full_l",
            MatrixKind::NormN => "norm_n",
            MatrixKind::CompactK => "compact_k",
        }
    }

    fn from_tag(tag: &str) -> Result<MatrixKind> {
        match tag {
            "full_l" => Ok(MatrixKind::FullL),
            "norm_n" => Ok(MatrixKind::NormN),
            "compact_k" => Ok(MatrixKind::CompactK),
            other => Err(Error::Config(format!("unknown matrix kind tag {other:?}"))),
        }
    }
}

/// Node counts for the matrix assemblies.
#[derive(Debug, Clone, Copy)]
pub struct MatrixQuad {
    /// Gauss–Hermite nodes per axis for the full form (weight matches μμ_*).
    pub gh_nodes: usize,
    /// Rescaled Gauss–Hermite nodes per axis for the difference piece of N.
    pub gh_scaled: usize,
    /// θ nodes per dyadic shell of the σ rule.
    pub theta_per_shell: usize,
    /// Finest shell retained; must match the grid-route truncation when the
    /// two are compared.
    pub k_max: i32,
    /// Gauss–Legendre nodes per axis for the ν multiplication piece.
    pub gl_nu: usize,
    /// Half-width of the ν integration box.
    pub nu_half: f64,
    /// Rows accumulated between rank-k updates.
    pub batch: usize,
}

impl MatrixQuad {
    /// Desk-scale defaults: resolves bases up to degree 16 at n = 2.
    pub fn desk() -> MatrixQuad {
        MatrixQuad {
            gh_nodes: 16,
            gh_scaled: 18,
            theta_per_shell: 8,
            k_max: 12,
            gl_nu: 48,
            nu_half: 12.0,
            batch: 512,
        }
    }
}

/// A dense operator matrix A_ij = ⟨Op e_i, e_j⟩ on a graded tensor Hermite
/// basis, together with enough metadata to rebuild it from disk.
#[derive(Debug, Clone)]
pub struct OperatorMatrix {
    pub basis: TensorBasis,
    pub kind: MatrixKind,
    pub params: KernelParams,
    pub a: DMatrix<f64>,
}

/// Accumulates A ← A + Σ w_r x_r x_rᵀ from batches of scaled rows, keeping
/// the result symmetric PSD by construction.
struct GramAccumulator {
    a: DMatrix<f64>,
    rows: DMatrix<f64>,
    filled: usize,
}

impl GramAccumulator {
    fn new(dim: usize, batch: usize) -> GramAccumulator {
        GramAccumulator {
            a: DMatrix::zeros(dim, dim),
            rows: DMatrix::zeros(batch.max(1), dim),
            filled: 0,
        }
    }

    fn push(&mut self, weight: f64, row: &[f64]) {
        debug_assert_eq!(row.len(), self.a.nrows());
        debug_assert!(weight >= 0.0, "Gram weights must be nonnegative");
        if weight <= 0.0 {
            return;
        }
        let c = weight.sqrt();
        for (j, &x) in row.iter().enumerate() {
            self.rows[(self.filled, j)] = c * x;
        }
        self.filled += 1;
        if self.filled == self.rows.nrows() {
            self.flush();
        }
    }

    fn flush(&mut self) {
        if self.filled == 0 {
            return;
        }
        let r = self.rows.rows(0, self.filled);
        self.a.gemm_tr(1.0, &r, &r, 1.0);
        self.filled = 0;
    }

    fn finish(mut self) -> DMatrix<f64> {
        self.flush();
        // Clean up the last bits of rounding asymmetry from blocked products.
        let at = self.a.transpose();
        0.5 * (self.a + at)
    }
}

fn gate_assembly(params: &KernelParams, degree: usize) -> Result<TensorBasis> {
    if params.n != 2 {
        return Err(Error::OutOfRange(
            "matrix assembly is wired for n = 2".into(),
        ));
    }
    if !(2..=16).contains(&degree) {
        return Err(Error::OutOfRange(format!(
            "matrix basis degree must lie in [2, 16], got {degree}"
        )));
    }
    TensorBasis::new(params.n, degree)
}

fn tensor_nodes(axis: &[(f64, f64)]) -> (Vec<[f64; 2]>, Vec<f64>) {
    let mut nodes = Vec::with_capacity(axis.len() * axis.len());
    let mut weights = Vec::with_capacity(axis.len() * axis.len());
    for &(xa, wa) in axis {
        for &(xb, wb) in axis {
            nodes.push([xa, xb]);
            weights.push(wa * wb);
        }
    }
    (nodes, weights)
}

/// Assemble the full-operator matrix A_ij = ⟨L e_i, e_j⟩ in plain L² via the
/// symmetrized quartic form. Symmetry and positive semidefiniteness hold by
/// construction; the collision invariants are annihilated to rounding.
pub fn assemble_matrix(
    params: &KernelParams,
    degree: usize,
    quad: &MatrixQuad,
) -> Result<OperatorMatrix> {
    let basis = gate_assembly(params, degree)?;
    let dim = basis.dim();
    let gh = gauss_hermite_prob(quad.gh_nodes);
    let axis: Vec<(f64, f64)> = gh.nodes.iter().copied().zip(gh.weights.iter().copied()).collect();
    let (nodes, weights) = tensor_nodes(&axis);

    // All e_i/√μ values at the pair nodes, computed once.
    let poly: Vec<Vec<f64>> = nodes.iter().map(|v| basis.eval_all_over_sqrt_mu(v)).collect();

    let reach = nodes
        .iter()
        .map(|v| (v[0] * v[0] + v[1] * v[1]).sqrt())
        .fold(0.0f64, f64::max);
    let k_min = k_min_for(2.0 * reach).min(quad.k_max);
    let sspec = SigmaQuadSpec::new(quad.theta_per_shell, k_min, quad.k_max, 8);
    let gl_theta = gauss_legendre(quad.theta_per_shell);

    let two_pi = 2.0 * std::f64::consts::PI;
    let norm_c = 0.25 / two_pi.powi(params.n as i32);

    let mut acc = GramAccumulator::new(dim, quad.batch);
    let mut psi = vec![0.0f64; dim];
    for p in 0..nodes.len() {
        // The (p, q) and (q, p) contributions coincide: exchanging the pair
        // flips k̂, and the σ node set maps onto its own reflection with the
        // same weights while Ψ is invariant. Scan unordered pairs at double
        // weight; the diagonal has ρ = 0 and contributes nothing.
        for q in (p + 1)..nodes.len() {
            let v = nodes[p];
            let vs = nodes[q];
            let rel = [v[0] - vs[0], v[1] - vs[1]];
            let rho = (rel[0] * rel[0] + rel[1] * rel[1]).sqrt();
            if rho < 1e-12 {
                continue;
            }
            let khat = [rel[0] / rho, rel[1] / rho];
            let mid = [0.5 * (v[0] + vs[0]), 0.5 * (v[1] + vs[1])];
            let half = 0.5 * rho;
            let pair_w = 2.0 * norm_c * weights[p] * weights[q] * params.phi(rho);
            let hp = &poly[p];
            let hq = &poly[q];
            for_each_sigma(params, &khat, rho, &sspec, &gl_theta, |node| {
                let vp = [mid[0] + half * node.sigma[0], mid[1] + half * node.sigma[1]];
                let vsp = [mid[0] - half * node.sigma[0], mid[1] - half * node.sigma[1]];
                let hup = basis.eval_all_over_sqrt_mu(&vp);
                let husp = basis.eval_all_over_sqrt_mu(&vsp);
                for i in 0..dim {
                    psi[i] = hup[i] + husp[i] - hp[i] - hq[i];
                }
                acc.push(pair_w * node.w, &psi);
            });
        }
    }

    Ok(OperatorMatrix {
        basis,
        kind: MatrixKind::FullL,
        params: *params,
        a: acc.finish(),
    })
}

/// Assemble the coercive-part matrix A_ij = ⟨N e_i, e_j⟩: the ν
/// multiplication piece on a Gauss–Legendre box plus the difference piece on
/// envelope-rescaled Gauss–Hermite axes.
pub fn assemble_norm_matrix(
    params: &KernelParams,
    pao: &PaoSplit,
    degree: usize,
    quad: &MatrixQuad,
) -> Result<OperatorMatrix> {
    check_pao(params, pao);
    let basis = gate_assembly(params, degree)?;
    let dim = basis.dim();
    let mut acc = GramAccumulator::new(dim, quad.batch);

    // Multiplication piece: ∫ ν e_i e_j dv. The integrand carries the L²
    // Gaussian of the basis elements, so a fixed box is enough.
    let gl = gauss_legendre(quad.gl_nu).mapped(-quad.nu_half, quad.nu_half);
    for (&x, &wx) in gl.nodes.iter().zip(&gl.weights) {
        for (&y, &wy) in gl.nodes.iter().zip(&gl.weights) {
            let v = [x, y];
            let e = basis.eval_all(&v);
            acc.push(wx * wy * pao.nu(&v), &e);
        }
    }

    // Difference piece: ½ ∫∫∫ B (e_i' − e_i)(e_j' − e_j) M'_* M_*. Envelope
    // scalings: 2 for v (the e_i(v') factors decay like e^{−|v|²/4} after
    // energy conservation), √2 for v_* (the M'_* M_* product never decays
    // slower than e^{−3|v_*|²/8} on the admissible σ range).
    let gh = gauss_hermite_prob(quad.gh_scaled);
    let scaled_axis = |scale: f64| -> Vec<(f64, f64)> {
        gh.nodes
            .iter()
            .zip(&gh.weights)
            .map(|(&x, &w)| (scale * x, scale * w * (0.5 * x * x).exp()))
            .collect()
    };
    let (v_nodes, v_weights) = tensor_nodes(&scaled_axis(2.0));
    let (s_nodes, s_weights) = tensor_nodes(&scaled_axis(std::f64::consts::SQRT_2));

    let e_table: Vec<Vec<f64>> = v_nodes.iter().map(|v| basis.eval_all(v)).collect();
    let ms_table: Vec<f64> = s_nodes
        .iter()
        .map(|v| crate::analytic::sqrt_mu_at(params.n, v))
        .collect();

    let reach_v = v_nodes
        .iter()
        .chain(s_nodes.iter())
        .map(|v| (v[0] * v[0] + v[1] * v[1]).sqrt())
        .fold(0.0f64, f64::max);
    let k_min = k_min_for(2.0 * reach_v).min(quad.k_max);
    let sspec = SigmaQuadSpec::new(quad.theta_per_shell, k_min, quad.k_max, 8);
    let gl_theta = gauss_legendre(quad.theta_per_shell);

    let mut delta = vec![0.0f64; dim];
    for (p, v) in v_nodes.iter().enumerate() {
        for (q, vs) in s_nodes.iter().enumerate() {
            let ms = ms_table[q];
            if ms < 1e-280 {
                continue;
            }
            let rel = [v[0] - vs[0], v[1] - vs[1]];
            let rho = (rel[0] * rel[0] + rel[1] * rel[1]).sqrt();
            if rho < 1e-12 {
                continue;
            }
            let khat = [rel[0] / rho, rel[1] / rho];
            let mid = [0.5 * (v[0] + vs[0]), 0.5 * (v[1] + vs[1])];
            let half = 0.5 * rho;
            let pair_w = 0.5 * v_weights[p] * s_weights[q] * params.phi(rho) * ms;
            let ev = &e_table[p];
            for_each_sigma(params, &khat, rho, &sspec, &gl_theta, |node| {
                let vp = [mid[0] + half * node.sigma[0], mid[1] + half * node.sigma[1]];
                let vsp = [mid[0] - half * node.sigma[0], mid[1] - half * node.sigma[1]];
                let msp = crate::analytic::sqrt_mu_at(params.n, &vsp);
                if msp < 1e-280 {
                    return;
                }
                let evp = basis.eval_all(&vp);
                for i in 0..dim {
                    delta[i] = evp[i] - ev[i];
                }
                acc.push(pair_w * node.w * msp, &delta);
            });
        }
    }

    Ok(OperatorMatrix {
        basis,
        kind: MatrixKind::NormN,
        params: *params,
        a: acc.finish(),
    })
}

/// The compact part as the closed difference K = L − N on the shared basis.
pub fn compact_difference(
    full: &OperatorMatrix,
    norm: &OperatorMatrix,
) -> Result<OperatorMatrix> {
    if full.kind != MatrixKind::FullL || norm.kind != MatrixKind::NormN {
        return Err(Error::Config(format!(
            "compact difference expects (full_l, norm_n), got ({}, {})",
            full.kind.tag(),
            norm.kind.tag()
        )));
    }
    if full.params != norm.params || full.basis.max_degree != norm.basis.max_degree {
        return Err(Error::Config(
            "compact difference needs matching parameters and basis degree".into(),
        ));
    }
    Ok(OperatorMatrix {
        basis: full.basis.clone(),
        kind: MatrixKind::CompactK,
        params: full.params,
        a: &full.a - &norm.a,
    })
}

impl OperatorMatrix {
    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// Largest entry magnitude; the reference scale for relative checks.
    pub fn scale(&self) -> f64 {
        self.a.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
    }

    /// A·c for coefficient vectors on this basis.
    pub fn apply(&self, coeffs: &DVector<f64>) -> DVector<f64> {
        &self.a * coeffs
    }

    /// cᵀA c.
    pub fn quadratic_form(&self, coeffs: &[f64]) -> f64 {
        let dim = self.dim();
        debug_assert_eq!(coeffs.len(), dim);
        let mut total = 0.0;
        for i in 0..dim {
            let mut row = 0.0;
            for j in 0..dim {
                row += self.a[(i, j)] * coeffs[j];
            }
            total += coeffs[i] * row;
        }
        total
    }

    /// max |A_ij − A_ji| relative to the entry scale.
    pub fn sym_defect(&self) -> f64 {
        let scale = self.scale();
        if scale == 0.0 {
            return 0.0;
        }
        let dim = self.dim();
        let mut worst = 0.0f64;
        for i in 0..dim {
            for j in (i + 1)..dim {
                worst = worst.max((self.a[(i, j)] - self.a[(j, i)]).abs());
            }
        }
        worst / scale
    }

    /// Eigenvalues in ascending order (the matrix is treated as symmetric).
    pub fn eigenvalues(&self) -> Vec<f64> {
        let eig = self.a.clone().symmetric_eigen();
        let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vals
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues()[0]
    }

    /// Worst relative residual ‖A c‖₂ / (scale · ‖c‖₂) over the n + 2
    /// collision-invariant coefficient vectors.
    pub fn null_residual(&self) -> Result<f64> {
        let scale = self.scale();
        if scale == 0.0 {
            return Ok(0.0);
        }
        let mut worst = 0.0f64;
        for c in self.basis.invariant_coeffs()? {
            worst = worst.max((&self.a * &c).norm() / (scale * c.norm()));
        }
        Ok(worst)
    }

    /// Smallest eigenvalue transverse to the invariants: ascending
    /// eigenvalues with the n + 2 null directions skipped. Meaningful for
    /// the full-operator matrix, whose null space is exactly that span.
    pub fn spectral_gap(&self) -> f64 {
        let skip = self.basis.n + 2;
        self.eigenvalues()[skip]
    }

    /// The leading principal block on the sub-basis of degree ≤ `degree`.
    /// Graded ordering makes the sub-basis an exact prefix, so this equals a
    /// direct assembly at the lower degree on the same quadrature.
    pub fn principal(&self, degree: usize) -> Result<OperatorMatrix> {
        if degree > self.basis.max_degree {
            return Err(Error::OutOfRange(format!(
                "principal block degree {degree} exceeds basis degree {}",
                self.basis.max_degree
            )));
        }
        let sub = TensorBasis::new(self.basis.n, degree)?;
        let d = sub.dim();
        debug_assert_eq!(sub.indices[..], self.basis.indices[..d]);
        Ok(OperatorMatrix {
            basis: sub,
            kind: self.kind,
            params: self.params,
            a: self.a.view((0, 0), (d, d)).into_owned(),
        })
    }

    /// Structural checks appropriate to the kind: symmetry for all kinds,
    /// positive semidefiniteness and the invariant null space for the full
    /// operator, strict positivity for the coercive part.
    pub fn validate(&self) -> Result<()> {
        let defect = self.sym_defect();
        if defect > 1e-8 {
            return Err(Error::NonConvergence(format!(
                "matrix symmetry defect {defect:.2e} exceeds 1e-8"
            )));
        }
        match self.kind {
            MatrixKind::FullL => {
                let eigs = self.eigenvalues();
                let top = eigs[eigs.len() - 1];
                if eigs[0] < -1e-8 * top {
                    return Err(Error::NonConvergence(format!(
                        "full matrix has eigenvalue {:.2e} below -1e-8 · {top:.2e}",
                        eigs[0]
                    )));
                }
                let residual = self.null_residual()?;
                if residual > 1e-6 {
                    return Err(Error::NonConvergence(format!(
                        "invariant residual {residual:.2e} exceeds 1e-6"
                    )));
                }
            }
            MatrixKind::NormN => {
                let min = self.min_eigenvalue();
                if min <= 0.0 {
                    return Err(Error::NonConvergence(format!(
                        "coercive matrix has nonpositive eigenvalue {min:.2e}"
                    )));
                }
            }
            MatrixKind::CompactK => {}
        }
        Ok(())
    }

    /// Write `stem.bin` (f64, little-endian, row-major) and `stem.json`
    /// (kind, degree, dimensions, kernel parameters) under `dir`.
    pub fn export(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let dim = self.dim();
        let mut bytes = Vec::with_capacity(8 * dim * dim);
        for i in 0..dim {
            for j in 0..dim {
                bytes.extend_from_slice(&self.a[(i, j)].to_le_bytes());
            }
        }
        std::fs::write(dir.join(format!("{stem}.bin")), &bytes)?;
        let meta = serde_json::json!({
            "kind": self.kind.tag(),
            "degree": self.basis.max_degree,
            "dim": dim,
            "layout": "f64le-row-major",
            "params": self.params,
        });
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&meta)?,
        )?;
        Ok(())
    }

    /// Rebuild a matrix written by [`export`](Self::export).
    pub fn import(dir: &Path, stem: &str) -> Result<OperatorMatrix> {
        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        let missing = |field: &str| Error::Config(format!("matrix metadata lacks {field:?}"));
        let kind = MatrixKind::from_tag(
            meta.get("kind").and_then(|v| v.as_str()).ok_or_else(|| missing("kind"))?,
        )?;
        let degree = meta
            .get("degree")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| missing("degree"))? as usize;
        let params: KernelParams =
            serde_json::from_value(meta.get("params").cloned().ok_or_else(|| missing("params"))?)?;
        let basis = TensorBasis::new(params.n, degree)?;
        let dim = basis.dim();
        let declared = meta
            .get("dim")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| missing("dim"))? as usize;
        if declared != dim {
            return Err(Error::Config(format!(
                "matrix metadata dim {declared} disagrees with basis dim {dim}"
            )));
        }
        let bytes = std::fs::read(dir.join(format!("{stem}.bin")))?;
        if bytes.len() != 8 * dim * dim {
            return Err(Error::Config(format!(
                "matrix payload holds {} bytes, expected {}",
                bytes.len(),
                8 * dim * dim
            )));
        }
        let mut a = DMatrix::zeros(dim, dim);
        for (idx, chunk) in bytes.chunks_exact(8).enumerate() {
            a[(idx / dim, idx % dim)] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(OperatorMatrix { basis, kind, params, a })
    }
}
