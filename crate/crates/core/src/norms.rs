//! Weighted norms and semi-norms characterizing the linearized collision
//! operator: the regime weight `w`, weighted L² and Sobolev norms, the
//! anisotropic fractional semi-norm built on the lifted-paraboloid metric,
//! the collision semi-norm in dyadic-shell form, the Littlewood–Paley square
//! function, and a side-by-side equivalence report.
//!
//! Conventions: `norm_l2_ell` / `norm_h_k_ell` return norms, while the
//! `seminorm_*` and `lp_square_norm` functions return the quadratic
//! (squared) forms their definitions are stated in. The kinetic exponent
//! γ + 2s carried by [`WeightSpec`] sets both the ⟨v⟩^{γ+2s} L² weight and
//! the regime branch of `w`.

use crate::analytic::{sqrt_mu_at, AnalyticField};
use crate::error::{Error, Result};
use crate::grid::{Grid, GridField, VelocityFn};
use crate::kernel::{for_each_sigma, k_min_for, KernelParams, SigmaQuadSpec};
use crate::paraboloid::{metric_d, AeCache, LPStack};
use crate::quadrature::gauss_legendre;
use crate::util::{bracket, fit_line, multi_indices, par_map, par_sum};

/// Weight regime. Hard means γ + 2s ≥ 0 (the boundary case included); the
/// two branches never coincide away from |v| → 0, so the selection is part
/// of the contract rather than a continuity statement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Regime {
    Hard,
    Soft,
}

/// Parameters of the polynomial weight w and of the weighted L² measure
/// ⟨v⟩^{γ+2s} dv. The regime is derived from γ + 2s, never stored
/// independently. Construction is intentionally ungated: the weight is
/// well-defined for any real (γ, s) pair, including extrapolated soft
/// parameters that no admissible kernel produces.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WeightSpec {
    pub gamma: f64,
    pub s: f64,
    /// Weight order ℓ of w^ℓ.
    pub ell: f64,
    pub regime: Regime,
}

impl WeightSpec {
    pub fn new(gamma: f64, s: f64, ell: f64) -> WeightSpec {
        let regime = if gamma + 2.0 * s >= 0.0 {
            Regime::Hard
        } else {
            Regime::Soft
        };
        WeightSpec {
            gamma,
            s,
            ell,
            regime,
        }
    }

    pub fn from_params(params: &KernelParams, ell: f64) -> WeightSpec {
        WeightSpec::new(params.gamma, params.s, ell)
    }

    /// The kinetic exponent γ + 2s.
    pub fn kinetic_exponent(&self) -> f64 {
        self.gamma + 2.0 * self.s
    }

    /// w(v) = ⟨v⟩ in the hard regime, ⟨v⟩^{−γ−2s} in the soft regime.
    /// Both branches satisfy w(0) = 1, w ≥ 1, and w → ∞ with |v|.
    pub fn w(&self, v: &[f64]) -> f64 {
        let b = bracket(v);
        match self.regime {
            Regime::Hard => b,
            Regime::Soft => b.powf(-self.kinetic_exponent()),
        }
    }

    fn with_ell(&self, ell: f64) -> WeightSpec {
        WeightSpec { ell, ..*self }
    }
}

/// Free-function form of the weight evaluation.
pub fn weight_w(spec: &WeightSpec, v: &[f64]) -> f64 {
    spec.w(v)
}

// ---------------------------------------------------------------------------
// Grid derivative stencils
// ---------------------------------------------------------------------------

/// Highest per-axis derivative order with a provided central stencil.
pub const MAX_STENCIL_ORDER: usize = 3;

/// Second-order central difference of one axis derivative (order ≤ 3).
/// Stencil indices clamp at the box edge (mirroring the interpolation
/// stencil), so constants differentiate to zero everywhere; for the decaying
/// test family the clamped values are negligible anyway.
fn central_axis_derivative(f: &GridField, axis: usize, order: usize) -> GridField {
    let grid = f.grid;
    let m = grid.m as isize;
    let h = grid.h();
    let stride = grid.m.pow((grid.n - 1 - axis) as u32) as isize;
    let vals = &f.vals;
    let at = |idx: usize, ai: isize, off: isize| -> f64 {
        let aj = (ai + off).clamp(0, m - 1);
        vals[(idx as isize + (aj - ai) * stride) as usize]
    };
    let out = par_map(grid.len(), |idx| {
        let ai = (idx as isize / stride) % m;
        match order {
            0 => vals[idx],
            1 => (at(idx, ai, 1) - at(idx, ai, -1)) / (2.0 * h),
            2 => (at(idx, ai, 1) - 2.0 * vals[idx] + at(idx, ai, -1)) / (h * h),
            3 => {
                (at(idx, ai, 2) - 2.0 * at(idx, ai, 1) + 2.0 * at(idx, ai, -1)
                    - at(idx, ai, -2))
                    / (2.0 * h * h * h)
            }
            _ => unreachable!("stencil orders are gated at {MAX_STENCIL_ORDER}"),
        }
    });
    GridField { grid, vals: out }
}

/// ∂_β f by repeated per-axis central differences (each axis order ≤ 3).
fn central_multi_derivative(f: &GridField, beta: &[usize]) -> GridField {
    let mut out = f.clone();
    for (axis, &order) in beta.iter().enumerate() {
        if order > 0 {
            out = central_axis_derivative(&out, axis, order);
        }
    }
    out
}

fn stencil_gate(beta_total: usize) -> Result<()> {
    if beta_total > MAX_STENCIL_ORDER {
        return Err(Error::Config(format!(
            "derivative order {beta_total} exceeds the provided central stencils (max {MAX_STENCIL_ORDER})"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Weighted L² and Sobolev norms
// ---------------------------------------------------------------------------

/// ∫ w^{2·ell_eff}(v) ⟨v⟩^{γ+2s} g(v)² dv by the midpoint rule.
fn weighted_square(spec: &WeightSpec, g: &GridField, ell_eff: f64) -> f64 {
    let grid = g.grid;
    let kin = spec.kinetic_exponent();
    let wspec = spec.with_ell(ell_eff);
    let vals = &g.vals;
    grid.cell_volume()
        * par_sum(grid.len(), |idx| {
            let v = grid.point(idx);
            let v = &v[..grid.n];
            let w = wspec.w(v).powf(2.0 * ell_eff);
            w * bracket(v).powf(kin) * vals[idx] * vals[idx]
        })
}

/// |w^ℓ f|_{L²_{γ+2s}} = (∫ w^{2ℓ} ⟨v⟩^{γ+2s} f²)^{1/2}.
pub fn norm_l2_ell(spec: &WeightSpec, f: &GridField) -> f64 {
    weighted_square(spec, f, spec.ell).sqrt()
}

/// ( Σ_{|β| ≤ K} |w^{ℓ−|β|} ∂_β f|²_{L²_{γ+2s}} )^{1/2} with ∂_β by
/// second-order central differences; K ≤ 3 is the stencil limit.
pub fn norm_h_k_ell(spec: &WeightSpec, f: &GridField, k: usize) -> Result<f64> {
    stencil_gate(k)?;
    let mut total = 0.0;
    for beta in multi_indices(f.grid.n, k) {
        let order: usize = beta.iter().sum();
        let df = central_multi_derivative(f, &beta);
        total += weighted_square(spec, &df, spec.ell - order as f64);
    }
    Ok(total.sqrt())
}

// ---------------------------------------------------------------------------
// Anisotropic fractional semi-norm
// ---------------------------------------------------------------------------

/// The three pieces of the fractional semi-norm: the weighted L² part, the
/// off-diagonal double sum over {h ≤ d ≤ 1}, and the local model for the
/// excluded near-diagonal region {d < h}.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct NsgBreakdown {
    pub l2_part: f64,
    pub difference_part: f64,
    pub correction: f64,
}

impl NsgBreakdown {
    pub fn total(&self) -> f64 {
        self.l2_part + self.difference_part + self.correction
    }
}

/// Squared anisotropic norm
/// |w^ℓ f|²_{L²_{γ+2s}}
///   + ∬ w^{2ℓ}(v) (⟨v⟩⟨v'⟩)^{(γ+2s+1)/2} (f(v')−f(v))² / d(v,v')^{n+2s}
///     over {d(v,v') ≤ 1},
/// with the grid-singular diagonal handled by exclusion-plus-correction:
/// pairs with d < h are dropped (on a uniform grid that is exactly the
/// self-pairs, since d ≥ |v−v'| ≥ h otherwise) and replaced by the local
/// polar integral of the frozen-gradient model
///   ∫_{d<h} (∇f·δ)²/d^{n+2s} dδ
///     = π h^{2−2s}/(2−2s) · ⟨v⟩^{−1} (f_⊥² + f_∥²/⟨v⟩²),
/// which follows from d² ≈ |δ_⊥|² + ⟨v⟩²δ_∥² near the diagonal.
pub fn seminorm_nsg_parts(spec: &WeightSpec, f: &GridField) -> NsgBreakdown {
    let grid = f.grid;
    assert_eq!(grid.n, 2, "the anisotropic semi-norm is implemented for n = 2");
    let n = grid.n;
    let h = grid.h();
    let cv = grid.cell_volume();
    let kin = spec.kinetic_exponent();
    let mid_pow = 0.5 * (kin + 1.0);
    let np2s = n as f64 + 2.0 * spec.s;

    // Per-node weight tables shared by all three pieces.
    let w2l: Vec<f64> = (0..grid.len())
        .map(|idx| {
            let v = grid.point(idx);
            spec.w(&v[..n]).powf(2.0 * spec.ell)
        })
        .collect();
    let mid: Vec<f64> = (0..grid.len())
        .map(|idx| {
            let v = grid.point(idx);
            bracket(&v[..n]).powf(mid_pow)
        })
        .collect();

    let vals = &f.vals;
    let l2_part = cv
        * par_sum(grid.len(), |idx| {
            let v = grid.point(idx);
            w2l[idx] * bracket(&v[..n]).powf(kin) * vals[idx] * vals[idx]
        });

    // Euclidean prefilter: d ≥ |v − v'|, so only offsets with |δv| ≤ 1 can
    // contribute to {d ≤ 1}.
    let reach = (1.0 / h).floor() as isize;
    let mut offsets: Vec<(isize, isize)> = Vec::new();
    for a in -reach..=reach {
        for b in -reach..=reach {
            if (a, b) != (0, 0) && ((a * a + b * b) as f64) * h * h <= 1.0 {
                offsets.push((a, b));
            }
        }
    }

    let m = grid.m as isize;
    let difference_part = cv
        * cv
        * par_sum(grid.len(), |idx| {
            let i0 = (idx / grid.m) as isize;
            let i1 = (idx % grid.m) as isize;
            let vi = grid.point(idx);
            let vi = &vi[..n];
            let mut acc = 0.0;
            for &(a, b) in &offsets {
                let (j0, j1) = (i0 + a, i1 + b);
                if j0 < 0 || j0 >= m || j1 < 0 || j1 >= m {
                    continue;
                }
                let jdx = (j0 * m + j1) as usize;
                let vj = grid.point(jdx);
                let d = metric_d(vi, &vj[..n]);
                if d > 1.0 || d < h {
                    continue;
                }
                let fd = vals[jdx] - vals[idx];
                acc += mid[jdx] * fd * fd / d.powf(np2s);
            }
            w2l[idx] * mid[idx] * acc
        });

    let gx = central_axis_derivative(f, 0, 1);
    let gy = central_axis_derivative(f, 1, 1);
    let c_local = std::f64::consts::PI * h.powf(2.0 - 2.0 * spec.s) / (2.0 - 2.0 * spec.s);
    let correction = cv
        * c_local
        * par_sum(grid.len(), |idx| {
            let v = grid.point(idx);
            let v = &v[..n];
            let vv: f64 = v.iter().map(|x| x * x).sum();
            let br2 = 1.0 + vv;
            let g2 = gx.vals[idx] * gx.vals[idx] + gy.vals[idx] * gy.vals[idx];
            let proj = if vv > 0.0 {
                let dot = gx.vals[idx] * v[0] + gy.vals[idx] * v[1];
                dot * dot / vv
            } else {
                0.0
            };
            let aniso = g2 - (1.0 - 1.0 / br2) * proj;
            w2l[idx] * bracket(v).powf(kin) * aniso
        });

    NsgBreakdown {
        l2_part,
        difference_part,
        correction,
    }
}

/// Total of [`seminorm_nsg_parts`]; dominates the weighted L² part by
/// construction (the added pieces are sums of nonnegative terms).
pub fn seminorm_nsg(spec: &WeightSpec, f: &GridField) -> f64 {
    seminorm_nsg_parts(spec, f).total()
}

// ---------------------------------------------------------------------------
// Collision semi-norm in dyadic-shell form
// ---------------------------------------------------------------------------

/// Quadrature plan for the collision semi-norm: the outer v integral rides
/// the caller's grid; v_* is integrated in polar coordinates around v (a
/// t² substitution on [0,1] absorbs soft kinetic factors r^γ down to
/// γ > −2); σ uses the dyadic-shell rule with `theta_per_shell` Gauss nodes
/// per shell (×2 reflection signs at n = 2) up to shell `k_max`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ShellQuad {
    pub theta_per_shell: usize,
    pub k_max: i32,
    pub rho_nodes: usize,
    pub omega_nodes: usize,
    /// The radial rule covers [0, |v| + rho_pad]; the Maxwellian factors
    /// make anything beyond that invisible at working precision.
    pub rho_pad: f64,
}

impl ShellQuad {
    /// Desk-scale default: 64 σ nodes per shell at n = 2, shells to k = 12.
    pub fn desk() -> ShellQuad {
        ShellQuad {
            theta_per_shell: 32,
            k_max: 12,
            rho_nodes: 32,
            omega_nodes: 16,
            rho_pad: 9.0,
        }
    }

    /// Same truncations, doubled node counts — the self-consistency oracle.
    pub fn doubled(&self) -> ShellQuad {
        ShellQuad {
            theta_per_shell: 2 * self.theta_per_shell,
            k_max: self.k_max,
            rho_nodes: 2 * self.rho_nodes,
            omega_nodes: 2 * self.omega_nodes,
            rho_pad: self.rho_pad,
        }
    }
}

/// Shell-resolved output of the collision semi-norm.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ShellSumReport {
    /// Coarsest shell index covered by the quadrature range.
    pub k_min: i32,
    /// Contribution of each shell k = k_min ..= k_max, in order.
    pub shell_sums: Vec<f64>,
    /// Σ of shell_sums: the semi-norm value, truncated at k_max.
    pub value: f64,
    /// Fitted log2-slope of the last shells (None when they vanish).
    pub tail_slope: Option<f64>,
    /// Geometric-series estimate of the truncated k > k_max tail.
    pub tail_estimate: Option<f64>,
}

/// Squared collision semi-norm
/// ½ ∫ dv w^ℓ(v) ∫ dv_* ∫ dσ B(v−v_*, σ) (f(v')−f(v))² M(v'_*) M(v_*),
/// decomposed over dyadic shells in |v−v'| and truncated at `quad.k_max`,
/// with the truncation tail estimated from the measured shell decay. The
/// weight is w^ℓ (not squared): doubling ℓ squares the weight factor.
pub fn seminorm_b_ell(
    params: &KernelParams,
    spec: &WeightSpec,
    f: &dyn VelocityFn,
    grid: Grid,
    quad: &ShellQuad,
) -> ShellSumReport {
    assert_eq!(grid.n, 2, "the collision semi-norm is implemented for n = 2");
    let n = grid.n;
    let cv = grid.cell_volume();
    let rho_max = grid.l * (n as f64).sqrt() + quad.rho_pad;
    let k_min = k_min_for(rho_max);
    let nshell = (quad.k_max - k_min + 1) as usize;
    let sspec = SigmaQuadSpec::new(quad.theta_per_shell, k_min, quad.k_max, 1);
    let gl_theta = gauss_legendre(quad.theta_per_shell);
    // Radial rule: ρ = t² on [0,1] (regularizes r^γ for γ > −2), then plain
    // Gauss–Legendre on [1, |v| + pad].
    let lo_nodes = quad.rho_nodes / 2;
    let gl_lo = gauss_legendre(lo_nodes).mapped(0.0, 1.0);
    let gl_hi = gauss_legendre(quad.rho_nodes - lo_nodes);

    let per_node: Vec<Vec<f64>> = {
        use rayon::prelude::*;
        (0..grid.len())
            .into_par_iter()
            .map(|idx| {
                let v3 = grid.point(idx);
                let v = &v3[..n];
                let fv = f.eval(v);
                let speed = (v[0] * v[0] + v[1] * v[1]).sqrt();
                let cap = speed + quad.rho_pad;
                let outer = 0.5 * cv * spec.w(v).powf(spec.ell);
                let mut shells = vec![0.0; nshell];
                let mut radial = |rho: f64, wrho: f64| {
                    if rho <= 0.0 {
                        return;
                    }
                    for iom in 0..quad.omega_nodes {
                        let phi = std::f64::consts::TAU * (iom as f64 + 0.5)
                            / quad.omega_nodes as f64;
                        let (sp, cp) = phi.sin_cos();
                        let vstar = [v[0] + rho * cp, v[1] + rho * sp];
                        let mstar = sqrt_mu_at(n, &vstar);
                        if mstar < 1e-18 {
                            continue;
                        }
                        let base = outer
                            * wrho
                            * rho
                            * (std::f64::consts::TAU / quad.omega_nodes as f64)
                            * params.phi(rho)
                            * mstar;
                        let khat = [-cp, -sp];
                        let mid0 = v[0] + 0.5 * rho * cp;
                        let mid1 = v[1] + 0.5 * rho * sp;
                        for_each_sigma(params, &khat, rho, &sspec, &gl_theta, |node| {
                            let vp = [
                                mid0 + 0.5 * rho * node.sigma[0],
                                mid1 + 0.5 * rho * node.sigma[1],
                            ];
                            let vsp = [
                                mid0 - 0.5 * rho * node.sigma[0],
                                mid1 - 0.5 * rho * node.sigma[1],
                            ];
                            let fd = f.eval(&vp) - fv;
                            shells[(node.k - k_min) as usize] +=
                                base * node.w * sqrt_mu_at(n, &vsp) * fd * fd;
                        });
                    }
                };
                for (&t, &wt) in gl_lo.nodes.iter().zip(&gl_lo.weights) {
                    radial(t * t, 2.0 * t * wt);
                }
                for (&x, &wx) in gl_hi.nodes.iter().zip(&gl_hi.weights) {
                    let half = 0.5 * (cap - 1.0);
                    radial(1.0 + half * (x + 1.0), half * wx);
                }
                shells
            })
            .collect()
    };

    let mut shell_sums = vec![0.0; nshell];
    for node_shells in &per_node {
        for (acc, &x) in shell_sums.iter_mut().zip(node_shells) {
            *acc += x;
        }
    }
    let value: f64 = shell_sums.iter().sum();

    // Tail: fit the decay of the last (up to four) positive shells and sum
    // the implied geometric series beyond k_max.
    let fit_lo = (nshell.saturating_sub(4)).max(0);
    let mut ks = Vec::new();
    let mut logs = Vec::new();
    for (i, &sk) in shell_sums.iter().enumerate().skip(fit_lo) {
        if sk > 0.0 {
            ks.push((k_min + i as i32) as f64);
            logs.push(sk.log2());
        }
    }
    let (tail_slope, tail_estimate) = if ks.len() >= 2 {
        let fit = fit_line(&ks, &logs);
        let r = fit.slope.exp2();
        let last = *shell_sums.last().unwrap();
        if r > 0.0 && r < 1.0 {
            (Some(fit.slope), Some(last * r / (1.0 - r)))
        } else {
            (Some(fit.slope), None)
        }
    } else {
        (None, None)
    };

    ShellSumReport {
        k_min,
        shell_sums,
        value,
        tail_slope,
        tail_estimate,
    }
}

// ---------------------------------------------------------------------------
// Littlewood–Paley square function
// ---------------------------------------------------------------------------

/// Squared square-function norm
/// Σ_{j=0}^{j_max} 2^{2(s−|α|)j} ∫ |∂_β ∇̃^α Q_j f|² ⟨v⟩^{γ+2s} w^{2ℓ−2|β|},
/// with ∇̃ the tangential (lifted) gradient supplied by the kernel stack and
/// ∂_β central differences on the sampling grid.
pub fn lp_square_norm(
    stack: &LPStack,
    spec: &WeightSpec,
    f: &dyn VelocityFn,
    grid: Grid,
    j_max: i64,
    alpha: [usize; 3],
    beta: &[usize],
) -> Result<f64> {
    let mut cache = AeCache::new();
    lp_square_norm_cached(stack, spec, f, grid, j_max, alpha, beta, &mut cache)
}

/// [`lp_square_norm`] reusing an `A_e` cache across calls with the same
/// field and grid (weights may differ; the cached primitives do not).
#[allow(clippy::too_many_arguments)]
pub fn lp_square_norm_cached(
    stack: &LPStack,
    spec: &WeightSpec,
    f: &dyn VelocityFn,
    grid: Grid,
    j_max: i64,
    alpha: [usize; 3],
    beta: &[usize],
    cache: &mut AeCache,
) -> Result<f64> {
    let beta_total: usize = beta.iter().sum();
    stencil_gate(beta_total)?;
    let mut total = 0.0;
    for j in 0..=j_max {
        // grad_q_grid already carries the 2^{−|α|j} compensation, so the
        // level weight here is 2^{2sj} independent of α.
        let gq = stack.grad_q_grid(cache, f, grid, j, alpha)?;
        let gb = central_multi_derivative(&gq, beta);
        let term = weighted_square(spec, &gb, spec.ell - beta_total as f64);
        total += (2.0 * spec.s * j as f64).exp2() * term;
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Equivalence report
// ---------------------------------------------------------------------------

/// Sizes for one equivalence study. The same kernel parameters feed the
/// weight spec and the collision semi-norm so the variants are comparable.
#[derive(Debug, Clone)]
pub struct EquivalenceConfig {
    pub params: KernelParams,
    pub ell: f64,
    pub grid: Grid,
    /// Sobolev order for the H^K entry.
    pub sobolev_k: usize,
    pub shell: ShellQuad,
    pub j_max: i64,
    /// Also evaluate everything on a once-refined grid and record deltas.
    pub refine: bool,
}

/// All norm variants of one field, as quadratic (squared) forms, with their
/// mutual ratios and, optionally, relative changes under one grid
/// refinement.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct NormReport {
    pub l2_ell: f64,
    pub h_k_ell: f64,
    pub n_sg_ell: f64,
    pub b_ell: f64,
    pub lp_square: f64,
    pub ratio_h_over_l2: f64,
    pub ratio_nsg_over_l2: f64,
    pub ratio_b_over_nsg: f64,
    pub ratio_lp_over_nsg: f64,
    /// Relative refinement deltas in entry order [l2, h_k, n_sg, b, lp].
    pub refine_delta: Option<[f64; 5]>,
}

impl NormReport {
    /// True when every refinement delta is within `tol` (vacuously true if
    /// the study was run without refinement).
    pub fn refine_ok(&self, tol: f64) -> bool {
        self.refine_delta
            .map(|d| d.iter().all(|&x| x <= tol))
            .unwrap_or(true)
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        0.0
    }
}

/// Evaluate every norm variant for each field. At least five fields are
/// required — a smaller sample says nothing about equivalence constants.
pub fn equivalence_report(
    stack: &LPStack,
    cfg: &EquivalenceConfig,
    fields: &[AnalyticField],
) -> Result<Vec<NormReport>> {
    if fields.len() < 5 {
        return Err(Error::Config(format!(
            "equivalence report needs at least 5 fields, got {}",
            fields.len()
        )));
    }
    let spec = WeightSpec::from_params(&cfg.params, cfg.ell);
    let entries = |f: &AnalyticField, grid: Grid| -> Result<[f64; 5]> {
        let fg = grid.sample(f);
        let l2 = norm_l2_ell(&spec, &fg).powi(2);
        let hk = norm_h_k_ell(&spec, &fg, cfg.sobolev_k)?.powi(2);
        let nsg = seminorm_nsg(&spec, &fg);
        let bell = seminorm_b_ell(&cfg.params, &spec, f, grid, &cfg.shell).value;
        let lp = lp_square_norm(stack, &spec, f, grid, cfg.j_max, [0; 3], &[0, 0])?;
        Ok([l2, hk, nsg, bell, lp])
    };
    let mut out = Vec::with_capacity(fields.len());
    for f in fields {
        let base = entries(f, cfg.grid)?;
        let refine_delta = if cfg.refine {
            let fine = entries(f, cfg.grid.refined(2))?;
            let mut d = [0.0; 5];
            for i in 0..5 {
                let scale = base[i].abs().max(fine[i].abs());
                d[i] = if scale > 0.0 {
                    (fine[i] - base[i]).abs() / scale
                } else {
                    0.0
                };
            }
            Some(d)
        } else {
            None
        };
        out.push(NormReport {
            l2_ell: base[0],
            h_k_ell: base[1],
            n_sg_ell: base[2],
            b_ell: base[3],
            lp_square: base[4],
            ratio_h_over_l2: ratio(base[1], base[0]),
            ratio_nsg_over_l2: ratio(base[2], base[0]),
            ratio_b_over_nsg: ratio(base[3], base[2]),
            ratio_lp_over_nsg: ratio(base[4], base[2]),
            refine_delta,
        });
    }
    Ok(out)
}
