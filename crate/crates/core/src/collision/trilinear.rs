//! Shell-localized trilinear forms. With the kernel restricted to one
//! dyadic shell B_k = Φ·b·χ_k(|v−v'|), the forms
//!
//!   T^{k,ℓ}_+(g,h,f) = ∫∫∫ B_k g_* h M_β(v'_*) f(v') w^{2ℓ}(v'),
//!   T^{k,ℓ}_−(g,h,f) = ∫∫∫ B_k g_* h M_β(v_*)  f(v)  w^{2ℓ}(v)
//!
//! are evaluated in the σ parametrization, while the dual pair
//!
//!   T^{k,ℓ}_+ = ∫dv' w^{2ℓ}(v') ∫dv_* ∫_E dπ_v (B_k/2^{1−n})
//!               g_* f' M_β(v'_*) h(v) / (|v'−v_*| |v−v_*|^{n−2}),
//!   T^{k,ℓ}_* = ∫dv' w^{2ℓ}(v') ∫dv_* ∫_E dπ_v (B_k/2^{1−n})
//!               Φ(v'−v_*)|v'−v_*|^{n−1} / (Φ(v−v_*)|v−v_*|^{2n−2})
//!               · g_* f' M_β(v_*) h(v')
//!
//! integrates over the plane E through v' with normal v'−v_* (a line at
//! n = 2). Each pass accumulates its two single forms and their difference
//! at the same quadrature nodes, so the near-total cancellation of
//! T_+ − T_− and T_+ − T_* at fine shells is realized pointwise instead of
//! by subtracting two large totals.

use crate::analytic::AnalyticField;
use crate::error::{Error, Result};
use crate::grid::{Grid, VelocityFn};
use crate::kernel::{shell_bounds, KernelParams};
use crate::norms::WeightSpec;
use crate::quadrature::gauss_legendre;
use crate::util::{fit_line, LineFit};

use super::{CollisionQuad, MaxwellianFamily, PairScan};

/// Which single form a pointwise evaluation requests. The plus form admits
/// both parametrizations; minus lives in the σ-form and star in the
/// Carleman form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrilinearVariant {
    Plus,
    Minus,
    Star,
}

/// One shell-localized form: shell index, weight order, companion
/// derivative multi-index and variant.
#[derive(Debug, Clone, Copy)]
pub struct TrilinearSpec {
    pub k: i32,
    pub ell: f64,
    pub beta: [usize; 3],
    pub variant: TrilinearVariant,
}

/// Both parametrizations of one shell. `diff_*` are accumulated
/// node-by-node, not as a difference of the stored totals.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrilinearRow {
    pub k: i32,
    pub plus_sigma: f64,
    pub minus_sigma: f64,
    pub diff_sigma: f64,
    pub plus_carl: f64,
    pub star_carl: f64,
    pub diff_carl: f64,
}

/// A contiguous range of shells evaluated with shared outer quadrature.
#[derive(Debug, Clone)]
pub struct ShellScan {
    pub rows: Vec<TrilinearRow>,
}

impl ShellScan {
    pub fn row(&self, k: i32) -> Option<&TrilinearRow> {
        self.rows.iter().find(|r| r.k == k)
    }

    /// Σ_k (T_+ − T_−) over the scanned range, each term from the σ-form.
    pub fn summed_sigma_difference(&self) -> f64 {
        self.rows.iter().map(|r| r.diff_sigma).sum()
    }

    /// Σ_k (T_+ − T_*) over the scanned range, each term from the
    /// Carleman form.
    pub fn summed_carleman_difference(&self) -> f64 {
        self.rows.iter().map(|r| r.diff_carl).sum()
    }
}

fn validate(params: &KernelParams, grid: Grid, beta: &[usize; 3], k_lo: i32, k_hi: i32) -> Result<()> {
    if params.n != grid.n {
        return Err(Error::Config(format!(
            "kernel dimension {} vs grid dimension {}",
            params.n, grid.n
        )));
    }
    if params.n != 2 {
        return Err(Error::OutOfRange(
            "shell scans pair the σ-form with the planar Carleman form, which is wired for n = 2"
                .into(),
        ));
    }
    let order: usize = beta.iter().sum();
    if order > 2 || beta[params.n..].iter().any(|&b| b > 0) {
        return Err(Error::OutOfRange(format!(
            "companion multi-index {beta:?} outside |beta| <= 2 in {} dimensions",
            params.n
        )));
    }
    if k_lo > k_hi {
        return Err(Error::Config(format!("empty shell range [{k_lo}, {k_hi}]")));
    }
    Ok(())
}

/// σ-form pass: per shell, (T_+, T_−, T_+ − T_−).
#[allow(clippy::too_many_arguments)]
fn sigma_pass(
    params: &KernelParams,
    ell: f64,
    m_beta: &AnalyticField,
    g: &dyn VelocityFn,
    h: &dyn VelocityFn,
    f: &dyn VelocityFn,
    grid: Grid,
    quad: &CollisionQuad,
    k_lo: i32,
    k_hi: i32,
) -> Vec<[f64; 3]> {
    let n = grid.n;
    let wspec = WeightSpec::from_params(params, ell);
    let mut local = *quad;
    local.k_max = k_hi;
    let scan = PairScan::new(params, grid.l * (n as f64).sqrt(), &local);
    let nsh = (k_hi - k_lo + 1) as usize;
    use rayon::prelude::*;
    let per: Vec<Vec<[f64; 3]>> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let p = grid.point(idx);
            let v = &p[..n];
            let hv = h.eval(v);
            let fw = f.eval(v) * wspec.w(v).powf(2.0 * ell);
            let mut rows = vec![[0.0; 3]; nsh];
            scan.run(
                params,
                v,
                |vstar, _rho, w| {
                    let gh = g.eval(&vstar[..n]) * hv;
                    if gh.abs() < 1e-290 {
                        return None;
                    }
                    Some((w * gh, m_beta.eval(&vstar[..n]) * fw))
                },
                |&(common, minus_core), vp, vsp, k, wsig| {
                    if k < k_lo {
                        return;
                    }
                    let c = common * wsig;
                    let plus = c
                        * m_beta.eval(&vsp[..n])
                        * f.eval(&vp[..n])
                        * wspec.w(&vp[..n]).powf(2.0 * ell);
                    let minus = c * minus_core;
                    let row = &mut rows[(k - k_lo) as usize];
                    row[0] += plus;
                    row[1] += minus;
                    row[2] += plus - minus;
                },
            );
            rows
        })
        .collect();
    let cv = grid.cell_volume();
    let mut rows = vec![[0.0; 3]; nsh];
    for node_rows in &per {
        for (acc, r) in rows.iter_mut().zip(node_rows) {
            acc[0] += cv * r[0];
            acc[1] += cv * r[1];
            acc[2] += cv * r[2];
        }
    }
    rows
}

/// Carleman pass at n = 2: per shell, (T_+, T_*, T_+ − T_*). The companion
/// is polar around the outer point, v_* = v' + ρ'ω̂, and the plane is the
/// line v = v' + t τ̂ with τ̂ ⊥ ω̂; the shell indicator pins |t| into
/// [2^{−k−1}, min(2^{−k}, ρ')], the upper cap because b vanishes past
/// θ = π/2. The polar Jacobian ρ' cancels the 1/|v'−v_*| of the plus form
/// exactly, so nothing singular is ever evaluated.
#[allow(clippy::too_many_arguments)]
fn carleman_pass(
    params: &KernelParams,
    ell: f64,
    m_beta: &AnalyticField,
    g: &dyn VelocityFn,
    h: &dyn VelocityFn,
    f: &dyn VelocityFn,
    grid: Grid,
    quad: &CollisionQuad,
    k_lo: i32,
    k_hi: i32,
) -> Vec<[f64; 3]> {
    let n = grid.n;
    let wspec = WeightSpec::from_params(params, ell);
    let nsh = (k_hi - k_lo + 1) as usize;
    let nr_near = quad.theta_per_shell.max(8);
    let nr_far = quad.rho_nodes / 2 + 8;
    let gl_near = gauss_legendre(nr_near);
    let gl_far = gauss_legendre(nr_far);
    let gl_t = gauss_legendre(quad.theta_per_shell);
    let dphi = std::f64::consts::TAU / quad.omega_nodes as f64;
    use rayon::prelude::*;
    let per: Vec<Vec<[f64; 3]>> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let p = grid.point(idx);
            let vp = &p[..n];
            let w2p = wspec.w(vp).powf(2.0 * ell);
            let fp = f.eval(vp);
            let hp = h.eval(vp);
            let mut rows = vec![[0.0; 3]; nsh];
            if (fp * w2p).abs() < 1e-290 {
                return rows;
            }
            let cap = vp.iter().map(|x| x * x).sum::<f64>().sqrt() + quad.rho_pad;
            for k in k_lo..=k_hi {
                let (t_lo, t_hi) = shell_bounds(k);
                if t_lo >= cap {
                    continue;
                }
                // ρ' segments: below t_hi the line cap |t| ≤ ρ' is active,
                // above it the full shell [t_lo, t_hi] is available.
                let row = &mut rows[(k - k_lo) as usize];
                let mut segments = [(t_lo, t_hi.min(cap), &gl_near, true), (0.0, 0.0, &gl_far, false)];
                let mut nseg = 1;
                if t_hi < cap {
                    segments[1] = (t_hi, cap, &gl_far, false);
                    nseg = 2;
                }
                for &(a, b, gl, capped) in &segments[..nseg] {
                    if b <= a {
                        continue;
                    }
                    let half = 0.5 * (b - a);
                    for (&x, &wx) in gl.nodes.iter().zip(&gl.weights) {
                        let rho_p = a + half * (x + 1.0);
                        let w_rho = half * wx;
                        let upper = if capped { rho_p } else { t_hi };
                        if upper <= t_lo {
                            continue;
                        }
                        let t_half = 0.5 * (upper - t_lo);
                        for iom in 0..quad.omega_nodes {
                            let phi = dphi * (iom as f64 + 0.5);
                            let (sp, cp) = phi.sin_cos();
                            let omega = [cp, sp];
                            let tau = [-sp, cp];
                            let vstar = [vp[0] + rho_p * omega[0], vp[1] + rho_p * omega[1]];
                            let gs = g.eval(&vstar);
                            if gs.abs() < 1e-290 {
                                continue;
                            }
                            let star_core = m_beta.eval(&vstar) * hp;
                            let base = w2p * fp * gs * w_rho * dphi;
                            for (&xt, &wxt) in gl_t.nodes.iter().zip(&gl_t.weights) {
                                let t = t_lo + t_half * (xt + 1.0);
                                let wt = t_half * wxt;
                                let rho_u2 = rho_p * rho_p + t * t;
                                let theta = ((rho_p * rho_p - t * t) / rho_u2).acos();
                                let b_ang = params
                                    .angular_b(theta)
                                    .expect("line nodes keep theta in (0, pi/2]");
                                let w_node = 2.0 * base * wt * b_ang;
                                // Per half-line contribution of the star
                                // form; it is even in t, so each sign adds
                                // the same amount.
                                let star = w_node
                                    * params.phi(rho_p)
                                    * (rho_p * rho_p / rho_u2)
                                    * star_core;
                                let phi_u = params.phi(rho_u2.sqrt());
                                for sgn in [1.0, -1.0] {
                                    let vv = [vp[0] + sgn * t * tau[0], vp[1] + sgn * t * tau[1]];
                                    let vsp = [vv[0] + rho_p * omega[0], vv[1] + rho_p * omega[1]];
                                    let plus = w_node * phi_u * m_beta.eval(&vsp) * h.eval(&vv);
                                    row[0] += plus;
                                    row[1] += star;
                                    row[2] += plus - star;
                                }
                            }
                        }
                    }
                }
            }
            rows
        })
        .collect();
    let cv = grid.cell_volume();
    let mut rows = vec![[0.0; 3]; nsh];
    for node_rows in &per {
        for (acc, r) in rows.iter_mut().zip(node_rows) {
            acc[0] += cv * r[0];
            acc[1] += cv * r[1];
            acc[2] += cv * r[2];
        }
    }
    rows
}

/// Evaluate every shell in [k_lo, k_hi] in both parametrizations.
#[allow(clippy::too_many_arguments)]
pub fn shell_scan(
    params: &KernelParams,
    ell: f64,
    beta: &[usize; 3],
    g: &dyn VelocityFn,
    h: &dyn VelocityFn,
    f: &dyn VelocityFn,
    grid: Grid,
    quad: &CollisionQuad,
    k_lo: i32,
    k_hi: i32,
) -> Result<ShellScan> {
    validate(params, grid, beta, k_lo, k_hi)?;
    let m_beta = MaxwellianFamily::new(params.n).m_beta(beta);
    let sig = sigma_pass(params, ell, &m_beta, g, h, f, grid, quad, k_lo, k_hi);
    let carl = carleman_pass(params, ell, &m_beta, g, h, f, grid, quad, k_lo, k_hi);
    let rows = sig
        .iter()
        .zip(&carl)
        .enumerate()
        .map(|(i, (s, c))| TrilinearRow {
            k: k_lo + i as i32,
            plus_sigma: s[0],
            minus_sigma: s[1],
            diff_sigma: s[2],
            plus_carl: c[0],
            star_carl: c[1],
            diff_carl: c[2],
        })
        .collect();
    Ok(ShellScan { rows })
}

/// One single form on one shell. Plus and minus are evaluated in the
/// σ-form, star in the Carleman form.
pub fn trilinear_t(
    params: &KernelParams,
    spec: &TrilinearSpec,
    g: &dyn VelocityFn,
    h: &dyn VelocityFn,
    f: &dyn VelocityFn,
    grid: Grid,
    quad: &CollisionQuad,
) -> Result<f64> {
    validate(params, grid, &spec.beta, spec.k, spec.k)?;
    let m_beta = MaxwellianFamily::new(params.n).m_beta(&spec.beta);
    Ok(match spec.variant {
        TrilinearVariant::Plus => {
            sigma_pass(params, spec.ell, &m_beta, g, h, f, grid, quad, spec.k, spec.k)[0][0]
        }
        TrilinearVariant::Minus => {
            sigma_pass(params, spec.ell, &m_beta, g, h, f, grid, quad, spec.k, spec.k)[0][1]
        }
        TrilinearVariant::Star => {
            carleman_pass(params, spec.ell, &m_beta, g, h, f, grid, quad, spec.k, spec.k)[0][1]
        }
    })
}

/// Fitted log₂|T| versus shell index over a sub-range of a scan: the single
/// forms grow like 2^{2sk} while the node-paired differences decay like
/// 2^{(2s−2)k}, and the fitted slopes make both visible.
#[derive(Debug, Clone)]
pub struct ProbeFit {
    pub single_plus: LineFit,
    pub single_minus: LineFit,
    pub diff_pm: LineFit,
    pub diff_ps: LineFit,
}

pub fn scaling_probe(scan: &ShellScan, k_lo: i32, k_hi: i32) -> Result<ProbeFit> {
    let pick = |get: &dyn Fn(&TrilinearRow) -> f64| -> Result<LineFit> {
        let mut ks = Vec::new();
        let mut logs = Vec::new();
        for r in &scan.rows {
            if r.k < k_lo || r.k > k_hi {
                continue;
            }
            let val = get(r).abs();
            if val > 0.0 {
                ks.push(r.k as f64);
                logs.push(val.log2());
            }
        }
        if ks.len() < 3 {
            return Err(Error::NonConvergence(format!(
                "only {} usable shells in [{k_lo}, {k_hi}] for a slope fit",
                ks.len()
            )));
        }
        Ok(fit_line(&ks, &logs))
    };
    Ok(ProbeFit {
        single_plus: pick(&|r| r.plus_sigma)?,
        single_minus: pick(&|r| r.minus_sigma)?,
        diff_pm: pick(&|r| r.diff_sigma)?,
        diff_ps: pick(&|r| r.diff_carl)?,
    })
}
