//! The linearized collision machinery: the bilinear operator Γ and its
//! derivative-shifted variants Γ_β, the collision frequency ν̃ with its
//! power-law/compact split ν + ν_K, and the operator routes N, K and
//! L = N + K.
//!
//! All companion integrals ∫dv_* ∫dσ share one quadrature pattern. For a
//! fixed velocity v the companion is parametrized as v_* = v + ρω̂ (polar in
//! the separation ρ, regularized by ρ = t² near the kinetic singularity) and
//! the σ sphere is handled per dyadic shell in |v−v'| by the kernel's
//! azimuthally symmetric node sets, so grazing-odd integrands cancel
//! exactly. Shells finer than the configured cutoff are dropped; a geometric
//! tail estimate fitted from the decay of the last resolved shells is
//! reported with every Γ evaluation, so truncation is visible rather than
//! silent.

use crate::analytic::AnalyticField;
use crate::error::{Error, Result};
use crate::grid::{Grid, GridField, VelocityFn};
use crate::kernel::{for_each_sigma, k_min_for, KernelParams, SigmaQuadSpec};
use crate::quadrature::{gauss_legendre, Quad1};
use crate::util::{bracket, fit_line};

mod kappa;
mod matrix;
mod trilinear;

pub use kappa::{grad_bound_check, kappa_at, GradBoundReport, KappaRow};
pub use matrix::{
    assemble_matrix, assemble_norm_matrix, compact_difference, MatrixKind, MatrixQuad,
    OperatorMatrix,
};
pub use trilinear::{
    scaling_probe, shell_scan, trilinear_t, ProbeFit, ShellScan, TrilinearRow, TrilinearSpec,
    TrilinearVariant,
};

/// The equilibrium family: the Maxwellian density μ, its square root
/// M = √μ = (2π)^{−n/4} e^{−|v|²/4}, and the derivative fields
/// M_β = ∂^β M = p_β·M with p_β a polynomial of degree |β|.
#[derive(Debug, Clone)]
pub struct MaxwellianFamily {
    pub n: usize,
    m: AnalyticField,
    density: AnalyticField,
}

impl MaxwellianFamily {
    pub fn new(n: usize) -> MaxwellianFamily {
        MaxwellianFamily {
            n,
            m: AnalyticField::sqrt_mu(n),
            density: AnalyticField::mu(n),
        }
    }

    /// μ, normalized so that ∫μ dv = 1.
    pub fn density(&self) -> &AnalyticField {
        &self.density
    }

    /// M = √μ.
    pub fn m(&self) -> &AnalyticField {
        &self.m
    }

    /// M_β = ∂^β M, computed symbolically; β = 0 returns M itself.
    pub fn m_beta(&self, beta: &[usize]) -> AnalyticField {
        self.m.derivative_multi(beta)
    }

    /// The polynomial factor p_β(v) = M_β(v)/M(v).
    pub fn p_beta_at(&self, beta: &[usize], v: &[f64]) -> f64 {
        self.m_beta(beta).eval(v) / self.m.eval(v)
    }
}

/// Quadrature levels for the collision scans. `omega_nodes` is the azimuth
/// count of the companion direction ω̂ (the full circle at n = 2, the ring at
/// fixed polar angle at n = 3); `omega_polar` and `sigma_azim` are only used
/// at n = 3. The radial rule covers [0, |v| + rho_pad] with ρ = t² on the
/// unit interval, which regularizes r^γ for every admissible soft exponent.
#[derive(Debug, Clone, Copy)]
pub struct CollisionQuad {
    pub theta_per_shell: usize,
    pub k_max: i32,
    pub rho_nodes: usize,
    pub omega_nodes: usize,
    pub omega_polar: usize,
    pub sigma_azim: usize,
    pub rho_pad: f64,
}

impl CollisionQuad {
    /// Desk-scale default.
    pub fn desk() -> CollisionQuad {
        CollisionQuad {
            theta_per_shell: 12,
            k_max: 12,
            rho_nodes: 32,
            omega_nodes: 16,
            omega_polar: 12,
            sigma_azim: 8,
            rho_pad: 9.0,
        }
    }

    /// Same shell range, twice the nodes on every rule: the reference level
    /// for convergence checks.
    pub fn doubled(&self) -> CollisionQuad {
        CollisionQuad {
            theta_per_shell: 2 * self.theta_per_shell,
            k_max: self.k_max,
            rho_nodes: 2 * self.rho_nodes,
            omega_nodes: 2 * self.omega_nodes,
            omega_polar: 2 * self.omega_polar,
            sigma_azim: 2 * self.sigma_azim,
            rho_pad: self.rho_pad,
        }
    }
}

/// Prepared rules for scanning ∫dv_* ∫dσ around one velocity. The σ weights
/// absorb b·dσ per shell; the radial weight absorbs the polar Jacobian
/// ρ^{n−1} and the kinetic factor Φ(ρ), so a full pair weight is
/// w_star · w_sigma.
pub(crate) struct PairScan {
    n: usize,
    quad: CollisionQuad,
    pub(crate) k_min: i32,
    gl_lo: Quad1,
    gl_hi: Quad1,
    omega_mu: Quad1,
    sspec: SigmaQuadSpec,
    gl_theta: Quad1,
}

impl PairScan {
    /// `reach` is the largest |v| the scan will be run at; it fixes the
    /// coarsest shell index so that shell bookkeeping is uniform across a
    /// whole grid.
    pub(crate) fn new(params: &KernelParams, reach: f64, quad: &CollisionQuad) -> PairScan {
        let k_min = k_min_for(reach + quad.rho_pad);
        let lo_nodes = quad.rho_nodes / 2;
        PairScan {
            n: params.n,
            quad: *quad,
            k_min,
            gl_lo: gauss_legendre(lo_nodes).mapped(0.0, 1.0),
            gl_hi: gauss_legendre(quad.rho_nodes - lo_nodes),
            omega_mu: gauss_legendre(quad.omega_polar),
            sspec: SigmaQuadSpec::new(quad.theta_per_shell, k_min, quad.k_max, quad.sigma_azim),
            gl_theta: gauss_legendre(quad.theta_per_shell),
        }
    }

    pub(crate) fn shell_count(&self) -> usize {
        (self.quad.k_max - self.k_min + 1) as usize
    }

    /// Visit every companion node around v. `on_star(v_*, ρ, w_star)` runs
    /// once per (ρ, ω̂) node and may return None to prune the σ descent (for
    /// example when the factors it owns underflow); `on_sigma` then runs for
    /// every σ node with the per-star state, the post-collisional pair
    /// (v', v'_*), the shell index and the b-absorbed σ weight.
    pub(crate) fn run<S>(
        &self,
        params: &KernelParams,
        v: &[f64],
        mut on_star: impl FnMut(&[f64; 3], f64, f64) -> Option<S>,
        mut on_sigma: impl FnMut(&S, &[f64; 3], &[f64; 3], i32, f64),
    ) {
        let n = self.n;
        let speed = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cap = speed + self.quad.rho_pad;
        let mut radial: Vec<(f64, f64)> =
            Vec::with_capacity(self.gl_lo.len() + self.gl_hi.len());
        for (&t, &wt) in self.gl_lo.nodes.iter().zip(&self.gl_lo.weights) {
            radial.push((t * t, 2.0 * t * wt));
        }
        if cap > 1.0 {
            let half = 0.5 * (cap - 1.0);
            for (&x, &wx) in self.gl_hi.nodes.iter().zip(&self.gl_hi.weights) {
                radial.push((1.0 + half * (x + 1.0), half * wx));
            }
        }
        let dphi = std::f64::consts::TAU / self.quad.omega_nodes as f64;
        for &(rho, wrho) in &radial {
            if rho <= 0.0 {
                continue;
            }
            let jac = wrho * rho.powi(n as i32 - 1) * params.phi(rho);
            if n == 2 {
                for iom in 0..self.quad.omega_nodes {
                    let phi = dphi * (iom as f64 + 0.5);
                    let (sp, cp) = phi.sin_cos();
                    let omega = [cp, sp, 0.0];
                    self.star(params, v, rho, jac * dphi, &omega, &mut on_star, &mut on_sigma);
                }
            } else {
                for (&u, &wu) in self.omega_mu.nodes.iter().zip(&self.omega_mu.weights) {
                    let su = (1.0 - u * u).max(0.0).sqrt();
                    for iom in 0..self.quad.omega_nodes {
                        let phi = dphi * (iom as f64 + 0.5);
                        let (sp, cp) = phi.sin_cos();
                        let omega = [su * cp, su * sp, u];
                        self.star(
                            params,
                            v,
                            rho,
                            jac * wu * dphi,
                            &omega,
                            &mut on_star,
                            &mut on_sigma,
                        );
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn star<S>(
        &self,
        params: &KernelParams,
        v: &[f64],
        rho: f64,
        w_star: f64,
        omega: &[f64; 3],
        on_star: &mut impl FnMut(&[f64; 3], f64, f64) -> Option<S>,
        on_sigma: &mut impl FnMut(&S, &[f64; 3], &[f64; 3], i32, f64),
    ) {
        let n = self.n;
        let mut vstar = [0.0; 3];
        let mut mid = [0.0; 3];
        let mut khat = [0.0; 3];
        for i in 0..n {
            vstar[i] = v[i] + rho * omega[i];
            mid[i] = v[i] + 0.5 * rho * omega[i];
            khat[i] = -omega[i];
        }
        let state = match on_star(&vstar, rho, w_star) {
            Some(s) => s,
            None => return,
        };
        let half = 0.5 * rho;
        for_each_sigma(params, &khat[..n], rho, &self.sspec, &self.gl_theta, |node| {
            let mut vp = [0.0; 3];
            let mut vsp = [0.0; 3];
            for i in 0..n {
                vp[i] = mid[i] + half * node.sigma[i];
                vsp[i] = mid[i] - half * node.sigma[i];
            }
            on_sigma(&state, &vp, &vsp, node.k, node.w);
        });
    }
}

/// Fit the decay of the last (up to four) positive shell sums and return the
/// log2 slope plus the implied geometric tail beyond the cutoff. The tail is
/// None when the measured ratio is not contracting.
pub(crate) fn geometric_tail(k_min: i32, sums: &[f64]) -> (Option<f64>, Option<f64>) {
    let fit_lo = sums.len().saturating_sub(4);
    let mut ks = Vec::new();
    let mut logs = Vec::new();
    for (i, &sk) in sums.iter().enumerate().skip(fit_lo) {
        if sk > 0.0 {
            ks.push((k_min + i as i32) as f64);
            logs.push(sk.log2());
        }
    }
    if ks.len() < 2 {
        return (None, None);
    }
    let fit = fit_line(&ks, &logs);
    let r = fit.slope.exp2();
    let last = *sums.last().unwrap();
    if r > 0.0 && r < 1.0 {
        (Some(fit.slope), Some(last * r / (1.0 - r)))
    } else {
        (Some(fit.slope), None)
    }
}

/// Γ_β(g,h) on a grid, with its dyadic shell decomposition. `shell_l1` is
/// the cell-weighted ℓ¹ magnitude of each shell's contribution; the tail
/// fields estimate what the dropped shells k > k_max would add.
#[derive(Debug, Clone)]
pub struct GammaResult {
    pub field: GridField,
    pub k_min: i32,
    pub shell_l1: Vec<f64>,
    pub tail_slope: Option<f64>,
    pub tail_estimate: Option<f64>,
}

fn gamma_over_points(
    params: &KernelParams,
    m_beta: &AnalyticField,
    g: &dyn VelocityFn,
    h: &dyn VelocityFn,
    points: &[[f64; 3]],
    reach: f64,
    quad: &CollisionQuad,
) -> (Vec<f64>, Vec<Vec<f64>>, i32) {
    let scan = PairScan::new(params, reach, quad);
    let nshell = scan.shell_count();
    let n = params.n;
    use rayon::prelude::*;
    let per: Vec<Vec<f64>> = points
        .par_iter()
        .map(|p| {
            let v = &p[..n];
            let hv = h.eval(v);
            let mut shells = vec![0.0; nshell];
            scan.run(
                params,
                v,
                |vstar, _rho, w| {
                    let mb = m_beta.eval(&vstar[..n]);
                    if mb.abs() < 1e-290 {
                        return None;
                    }
                    Some((w * mb, g.eval(&vstar[..n]) * hv))
                },
                |&(wmb, minus), vp, vsp, k, wsig| {
                    let plus = g.eval(&vsp[..n]) * h.eval(&vp[..n]);
                    shells[(k - scan.k_min) as usize] += wmb * wsig * (plus - minus);
                },
            );
            shells
        })
        .collect();
    let vals = per.iter().map(|s| s.iter().sum()).collect();
    (vals, per, scan.k_min)
}

fn gamma_field(
    params: &KernelParams,
    m_beta: &AnalyticField,
    g: &dyn VelocityFn,
    h: &dyn VelocityFn,
    grid: Grid,
    quad: &CollisionQuad,
) -> GammaResult {
    assert_eq!(params.n, grid.n, "kernel and grid dimensions must agree");
    let points: Vec<[f64; 3]> = (0..grid.len()).map(|i| grid.point(i)).collect();
    let reach = grid.l * (grid.n as f64).sqrt();
    let (vals, per, k_min) = gamma_over_points(params, m_beta, g, h, &points, reach, quad);
    let cv = grid.cell_volume();
    let nshell = per.first().map_or(0, Vec::len);
    let mut shell_l1 = vec![0.0; nshell];
    for shells in &per {
        for (acc, &x) in shell_l1.iter_mut().zip(shells) {
            *acc += cv * x.abs();
        }
    }
    let (tail_slope, tail_estimate) = geometric_tail(k_min, &shell_l1);
    GammaResult {
        field: GridField {
            grid,
            vals,
        },
        k_min,
        shell_l1,
        tail_slope,
        tail_estimate,
    }
}

/// The bilinear operator
/// Γ(g,h)(v) = ∫dv_* ∫dσ B M(v_*) (g(v'_*)h(v') − g(v_*)h(v)),
/// sampled on every grid node.
pub fn gamma_bilinear(
    params: &KernelParams,
    g: &dyn VelocityFn,
    h: &dyn VelocityFn,
    grid: Grid,
    quad: &CollisionQuad,
) -> GammaResult {
    let family = MaxwellianFamily::new(params.n);
    gamma_field(params, &family.m_beta(&[0; 3]), g, h, grid, quad)
}

/// The derivative-shifted variant Γ_β, identical to Γ except that the
/// companion factor M(v_*) is replaced by M_β(v_*). Orders |β| > 2 are not
/// part of the estimates exercised here and are rejected.
pub fn gamma_beta(
    params: &KernelParams,
    beta: &[usize],
    g: &dyn VelocityFn,
    h: &dyn VelocityFn,
    grid: Grid,
    quad: &CollisionQuad,
) -> Result<GammaResult> {
    let order: usize = beta.iter().sum();
    if order > 2 {
        return Err(Error::OutOfRange(format!(
            "gamma_beta supports |beta| <= 2, got {order}"
        )));
    }
    let family = MaxwellianFamily::new(params.n);
    Ok(gamma_field(params, &family.m_beta(beta), g, h, grid, quad))
}

/// Γ_β(g,h) at a single velocity (no shell report). Useful for pointwise
/// derivative-expansion checks away from grid nodes.
pub fn gamma_at(
    params: &KernelParams,
    beta: &[usize],
    g: &dyn VelocityFn,
    h: &dyn VelocityFn,
    v: &[f64],
    quad: &CollisionQuad,
) -> Result<f64> {
    let order: usize = beta.iter().sum();
    if order > 2 {
        return Err(Error::OutOfRange(format!(
            "gamma_at supports |beta| <= 2, got {order}"
        )));
    }
    let family = MaxwellianFamily::new(params.n);
    let mut p = [0.0; 3];
    p[..v.len()].copy_from_slice(v);
    let reach = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (vals, _, _) = gamma_over_points(
        params,
        &family.m_beta(beta),
        g,
        h,
        std::slice::from_ref(&p),
        reach,
        quad,
    );
    Ok(vals[0])
}

/// The collision frequency ν̃(v) = ∫dv_* ∫dσ B (M(v_*) − M(v'_*)) M(v_*).
/// The azimuthally symmetric σ node sets are what make the grazing limit of
/// this integrand convergent for s ≥ 1/2: the linear-in-θ part of
/// M(v_*) − M(v'_*) is odd in the azimuth and cancels node-for-node.
pub fn nu_tilde_at(params: &KernelParams, quad: &CollisionQuad, v: &[f64]) -> f64 {
    let n = params.n;
    let reach = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scan = PairScan::new(params, reach, quad);
    let mut acc = 0.0;
    scan.run(
        params,
        v,
        |vstar, _rho, w| {
            let ms = crate::analytic::sqrt_mu_at(n, &vstar[..n]);
            if ms < 1e-290 {
                return None;
            }
            Some((w * ms, ms))
        },
        |&(wms, ms), _vp, vsp, _k, wsig| {
            acc += wms * wsig * (ms - crate::analytic::sqrt_mu_at(n, &vsp[..n]));
        },
    );
    acc
}

/// ν̃ tabulated on a uniform radial grid together with the fitted power-law
/// part: ν(v) := c_fit ⟨v⟩^{γ+2s} (exponent fixed by the kernel, prefactor
/// fitted over ⟨v⟩ ∈ fit window) and the remainder ν_K := ν̃ − ν. The
/// growth of ν_K against ⟨v⟩^γ is a diagnostic, not an enforced bound.
#[derive(Debug, Clone)]
pub struct PaoSplit {
    pub gamma: f64,
    pub s: f64,
    pub n: usize,
    pub radii: Vec<f64>,
    pub values: Vec<f64>,
    pub c_fit: f64,
    pub fitted_slope: f64,
}

const PAO_FIT_LO: f64 = 4.0;
const PAO_FIT_HI: f64 = 8.0;

/// Build the radial ν̃ table and its power-law fit. Fails when ν̃ loses
/// positivity inside the fit window or when a doubled-resolution probe
/// disagrees beyond the convergence guard (both signal a broken angular
/// rule).
///
/// ν̃ is genuinely negative near the origin and the table keeps those
/// values: at v = 0 energy conservation forces |v'_*| = ρ cos(θ/2) < ρ
/// for every deflection in (0, π/2], so M'_* > M_* pointwise and the
/// integrand has a single sign. Positivity (and the ⟨v⟩^{γ+2s} envelope)
/// sets in at large speeds, which is where the gate applies.
pub fn build_pao_split(
    params: &KernelParams,
    quad: &CollisionQuad,
    r_max: f64,
    samples: usize,
) -> Result<PaoSplit> {
    if r_max < PAO_FIT_HI || samples < 17 {
        return Err(Error::Config(format!(
            "pao table needs r_max >= {PAO_FIT_HI} and >= 17 samples, got ({r_max}, {samples})"
        )));
    }
    let radii: Vec<f64> = (0..samples)
        .map(|i| r_max * i as f64 / (samples - 1) as f64)
        .collect();
    use rayon::prelude::*;
    let values: Vec<f64> = radii
        .par_iter()
        .map(|&r| {
            let mut v = [0.0; 3];
            v[0] = r;
            nu_tilde_at(params, quad, &v[..params.n])
        })
        .collect();
    if let Some((i, &bad)) = values
        .iter()
        .enumerate()
        .find(|&(i, &x)| radii[i] >= PAO_FIT_LO && x <= 0.0)
    {
        return Err(Error::NonConvergence(format!(
            "nu_tilde not positive at r = {}: {bad}",
            radii[i]
        )));
    }
    // Convergence guard: three probe radii against the doubled rule.
    let fine = quad.doubled();
    for &r in &[1.0, 4.0, 7.0] {
        let mut v = [0.0; 3];
        v[0] = r;
        let coarse = nu_tilde_at(params, quad, &v[..params.n]);
        let better = nu_tilde_at(params, &fine, &v[..params.n]);
        let rel = (coarse - better).abs() / better.abs();
        if rel > 5e-3 {
            return Err(Error::NonConvergence(format!(
                "nu_tilde drifted {rel:.2e} under refinement at r = {r}"
            )));
        }
    }
    let kappa = params.gamma + 2.0 * params.s;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut offsets = Vec::new();
    for (&r, &val) in radii.iter().zip(&values) {
        if (PAO_FIT_LO..=PAO_FIT_HI).contains(&r) {
            let b = bracket(&[r]);
            xs.push(b.ln());
            ys.push(val.ln());
            offsets.push(val.ln() - kappa * b.ln());
        }
    }
    if xs.len() < 3 {
        return Err(Error::Config(
            "pao fit window holds fewer than three samples".into(),
        ));
    }
    let fit = fit_line(&xs, &ys);
    let c_fit = (offsets.iter().sum::<f64>() / offsets.len() as f64).exp();
    Ok(PaoSplit {
        gamma: params.gamma,
        s: params.s,
        n: params.n,
        radii,
        values,
        c_fit,
        fitted_slope: fit.slope,
    })
}

impl PaoSplit {
    pub fn kinetic_exponent(&self) -> f64 {
        self.gamma + 2.0 * self.s
    }

    /// ν̃ at speed r by cubic interpolation of the table; beyond the table
    /// the power-law envelope anchored at the last sample is used.
    pub fn nu_tilde(&self, r: f64) -> f64 {
        let r = r.abs();
        let m = self.radii.len();
        let r_max = self.radii[m - 1];
        if r >= r_max {
            let anchor = bracket(&[r_max]);
            return self.values[m - 1] * (bracket(&[r]) / anchor).powf(self.kinetic_exponent());
        }
        let dr = self.radii[1] - self.radii[0];
        let x = r / dr;
        let i = (x.floor() as usize).min(m - 2);
        let t = x - i as f64;
        let at = |j: isize| self.values[j.clamp(0, m as isize - 1) as usize];
        let (p0, p1, p2, p3) = (at(i as isize - 1), at(i as isize), at(i as isize + 1), at(i as isize + 2));
        // Catmull–Rom with clamped end handling.
        0.5 * (2.0 * p1
            + (p2 - p0) * t
            + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t * t
            + (3.0 * p1 - p0 - 3.0 * p2 + p3) * t * t * t)
    }

    /// The power-law part ν(v) = c_fit ⟨v⟩^{γ+2s}.
    pub fn nu(&self, v: &[f64]) -> f64 {
        self.c_fit * bracket(v).powf(self.kinetic_exponent())
    }

    /// The remainder ν_K(v) = ν̃(|v|) − ν(v).
    pub fn nu_k(&self, v: &[f64]) -> f64 {
        let r = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        self.nu_tilde(r) - self.nu(v)
    }
}

/// The symmetric difference part ∫dv_* ∫dσ B (g(v') − g(v)) M(v'_*) M(v_*),
/// sampled on the grid. N and the change-of-variables identities are built
/// from this field.
pub fn n_difference_field(
    params: &KernelParams,
    g: &dyn VelocityFn,
    grid: Grid,
    quad: &CollisionQuad,
) -> GridField {
    assert_eq!(params.n, grid.n);
    let n = grid.n;
    let scan = PairScan::new(params, grid.l * (n as f64).sqrt(), quad);
    use rayon::prelude::*;
    let vals: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let p = grid.point(idx);
            let v = &p[..n];
            let gv = g.eval(v);
            let mut acc = 0.0;
            scan.run(
                params,
                v,
                |vstar, _rho, w| {
                    let ms = crate::analytic::sqrt_mu_at(n, &vstar[..n]);
                    if ms < 1e-290 {
                        return None;
                    }
                    Some(w * ms)
                },
                |&wms, vp, vsp, _k, wsig| {
                    acc += wms
                        * wsig
                        * (g.eval(&vp[..n]) - gv)
                        * crate::analytic::sqrt_mu_at(n, &vsp[..n]);
                },
            );
            acc
        })
        .collect();
    GridField { grid, vals }
}

/// The symmetrized Dirichlet pairing
/// ½ ∫dv ∫dv_* ∫dσ B (g(v')−g(v)) (h(v')−h(v)) M(v'_*) M(v_*),
/// the form that the pre/post change of variables turns the difference part
/// of ⟨Ng, h⟩ into.
pub fn dirichlet_pairing(
    params: &KernelParams,
    g: &dyn VelocityFn,
    h: &dyn VelocityFn,
    grid: Grid,
    quad: &CollisionQuad,
) -> f64 {
    assert_eq!(params.n, grid.n);
    let n = grid.n;
    let cv = grid.cell_volume();
    let scan = PairScan::new(params, grid.l * (n as f64).sqrt(), quad);
    use rayon::prelude::*;
    let parts: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let p = grid.point(idx);
            let v = &p[..n];
            let gv = g.eval(v);
            let hv = h.eval(v);
            let mut acc = 0.0;
            scan.run(
                params,
                v,
                |vstar, _rho, w| {
                    let ms = crate::analytic::sqrt_mu_at(n, &vstar[..n]);
                    if ms < 1e-290 {
                        return None;
                    }
                    Some(w * ms)
                },
                |&wms, vp, vsp, _k, wsig| {
                    acc += wms
                        * wsig
                        * (g.eval(&vp[..n]) - gv)
                        * (h.eval(&vp[..n]) - hv)
                        * crate::analytic::sqrt_mu_at(n, &vsp[..n]);
                },
            );
            0.5 * cv * acc
        })
        .collect();
    parts.iter().sum()
}

fn check_pao(params: &KernelParams, pao: &PaoSplit) {
    assert!(
        pao.n == params.n && pao.gamma == params.gamma && pao.s == params.s,
        "pao split was built for different kernel parameters"
    );
}

/// The coercive route: Ng = −∫∫ B (g'−g) M'_* M_* + ν g, with ν the fitted
/// power-law part of the collision frequency.
pub fn apply_n(
    params: &KernelParams,
    pao: &PaoSplit,
    g: &dyn VelocityFn,
    grid: Grid,
    quad: &CollisionQuad,
) -> GridField {
    check_pao(params, pao);
    let diff = n_difference_field(params, g, grid, quad);
    let n = grid.n;
    let vals = (0..grid.len())
        .map(|idx| {
            let p = grid.point(idx);
            let v = &p[..n];
            pao.nu(v) * g.eval(v) - diff.vals[idx]
        })
        .collect();
    GridField { grid, vals }
}

/// The compact route: Kg = ν_K g − Γ(g, M).
pub fn apply_k(
    params: &KernelParams,
    pao: &PaoSplit,
    g: &dyn VelocityFn,
    grid: Grid,
    quad: &CollisionQuad,
) -> GridField {
    check_pao(params, pao);
    let family = MaxwellianFamily::new(params.n);
    let gm = gamma_bilinear(params, g, family.m(), grid, quad);
    let n = grid.n;
    let vals = (0..grid.len())
        .map(|idx| {
            let p = grid.point(idx);
            let v = &p[..n];
            pao.nu_k(v) * g.eval(v) - gm.field.vals[idx]
        })
        .collect();
    GridField { grid, vals }
}

/// The full linearized operator via the product expansion:
/// Lg = −Γ(M, g) − Γ(g, M). Up to the fidelity of the radial ν̃ table this
/// equals apply_n + apply_k.
pub fn apply_l(
    params: &KernelParams,
    g: &dyn VelocityFn,
    grid: Grid,
    quad: &CollisionQuad,
) -> GridField {
    let family = MaxwellianFamily::new(params.n);
    let mg = gamma_bilinear(params, family.m(), g, grid, quad);
    let gm = gamma_bilinear(params, g, family.m(), grid, quad);
    let vals = mg
        .field
        .vals
        .iter()
        .zip(&gm.field.vals)
        .map(|(a, b)| -a - b)
        .collect();
    GridField { grid, vals }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{random_field, sqrt_mu_at};
    use crate::norms::{seminorm_b_ell, ShellQuad, WeightSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quick_quad() -> CollisionQuad {
        CollisionQuad {
            theta_per_shell: 8,
            k_max: 12,
            rho_nodes: 24,
            omega_nodes: 12,
            omega_polar: 10,
            sigma_azim: 8,
            rho_pad: 9.0,
        }
    }

    #[test]
    fn maxwellian_family_normalization_and_p_beta() {
        let fam = MaxwellianFamily::new(2);
        let grid = Grid::new(2, 8.0, 48);
        let mass = grid.integrate(&grid.sample(fam.density()).vals);
        assert!((mass - 1.0).abs() < 1e-10, "mass = {mass}");

        let v = [0.7, -0.3];
        // m_beta with beta = 0 is M itself.
        assert_eq!(fam.m_beta(&[0, 0, 0]).eval(&v), fam.m().eval(&v));
        // Closed forms of the polynomial factors p_β = M_β/M.
        let p10 = fam.p_beta_at(&[1, 0], &v);
        assert!((p10 - (-v[0] / 2.0)).abs() < 1e-14);
        let p20 = fam.p_beta_at(&[2, 0], &v);
        assert!((p20 - (v[0] * v[0] - 2.0) / 4.0).abs() < 1e-14);
        let p11 = fam.p_beta_at(&[1, 1], &v);
        assert!((p11 - v[0] * v[1] / 4.0).abs() < 1e-14);
    }

    #[test]
    fn gamma_of_equilibrium_pair_vanishes_pointwise() {
        // M(v'_*)M(v') = M(v_*)M(v) at every σ node (energy conservation),
        // so Γ(M, M) cancels inside each quadrature term, not just in the
        // integral: the result is pure roundoff.
        let params = KernelParams::new(2, 0.0, 0.25).unwrap();
        let fam = MaxwellianFamily::new(2);
        let grid = Grid::new(2, 6.0, 16);
        let quad = CollisionQuad {
            theta_per_shell: 6,
            rho_nodes: 16,
            omega_nodes: 8,
            ..quick_quad()
        };
        let out = gamma_bilinear(&params, fam.m(), fam.m(), grid, &quad);
        assert!(
            out.field.max_abs() < 1e-12,
            "|Gamma(M,M)| = {}",
            out.field.max_abs()
        );
    }

    #[test]
    fn gamma_conserves_collision_invariants() {
        let params = KernelParams::new(2, 0.0, 0.25).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = random_field(&mut rng, 2);
        let h = random_field(&mut rng, 2);
        let grid = Grid::new(2, 8.0, 28);
        let quad = CollisionQuad {
            theta_per_shell: 12,
            rho_nodes: 40,
            omega_nodes: 24,
            ..quick_quad()
        };
        let out = gamma_bilinear(&params, &g, &h, grid, &quad);
        let gam = grid.sample(&out.field);
        for (name, phi) in [
            ("mass", AnalyticField::sqrt_mu(2)),
            ("momentum", AnalyticField::poly_gaussian(2, 1.0, &[0.0, 0.0], std::f64::consts::SQRT_2, &[1, 0])),
            (
                "energy",
                AnalyticField::poly_gaussian(2, 1.0, &[0.0, 0.0], std::f64::consts::SQRT_2, &[2, 0])
                    .add(&AnalyticField::poly_gaussian(
                        2,
                        1.0,
                        &[0.0, 0.0],
                        std::f64::consts::SQRT_2,
                        &[0, 2],
                    )),
            ),
        ] {
            let phiv = grid.sample(&phi);
            let moment = grid.inner(&gam.vals, &phiv.vals);
            let scale: f64 = grid.cell_volume()
                * gam
                    .vals
                    .iter()
                    .zip(&phiv.vals)
                    .map(|(a, b)| (a * b).abs())
                    .sum::<f64>();
            assert!(
                moment.abs() <= 1e-7 * scale,
                "{name} moment {moment:.3e} vs scale {scale:.3e}"
            );
        }
    }

    #[test]
    fn gamma_pointwise_matches_doubled_resolution() {
        let params = KernelParams::new(2, 0.0, 0.25).unwrap();
        let g = AnalyticField::gaussian(2, 1.0, &[0.5, 0.0], 1.0);
        let h = AnalyticField::gaussian(2, 0.8, &[-0.3, 0.4], 1.2);
        let quad = quick_quad();
        let v = [0.0, 0.0];
        let coarse = gamma_at(&params, &[0, 0], &g, &h, &v, &quad).unwrap();
        let fine = gamma_at(&params, &[0, 0], &g, &h, &v, &quad.doubled()).unwrap();
        let rel = (coarse - fine).abs() / fine.abs();
        assert!(rel < 0.01, "coarse {coarse:.6e} fine {fine:.6e} rel {rel:.2e}");
    }

    #[test]
    fn gamma_beta_zero_reduces_to_bilinear() {
        let params = KernelParams::new(2, 0.5, 0.25).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = random_field(&mut rng, 2);
        let h = random_field(&mut rng, 2);
        let grid = Grid::new(2, 5.0, 8);
        let quad = CollisionQuad {
            theta_per_shell: 4,
            rho_nodes: 8,
            omega_nodes: 6,
            ..quick_quad()
        };
        let a = gamma_bilinear(&params, &g, &h, grid, &quad);
        let b = gamma_beta(&params, &[0, 0], &g, &h, grid, &quad).unwrap();
        let diff = a.field.axpy(-1.0, &b.field).max_abs();
        assert_eq!(diff, 0.0, "beta = 0 must take the identical code path");
    }

    #[test]
    fn gamma_beta_first_order_expansion() {
        // ∂_i Γ(g,h) = Γ_{e_i}(g,h) + Γ(∂_i g, h) + Γ(g, ∂_i h): the left side
        // by Richardson-extrapolated central differences of the pointwise
        // evaluation, the right side term by term with symbolic derivatives.
        let params = KernelParams::new(2, 0.0, 0.25).unwrap();
        let g = AnalyticField::gaussian(2, 1.0, &[0.4, -0.1], 1.1);
        let h = AnalyticField::gaussian(2, 0.7, &[-0.2, 0.3], 0.9);
        let quad = quick_quad();
        let v0 = [0.4, -0.2];
        let axis = 0;
        let e = [1.0, 0.0];
        let fd = 0.05;
        let diff_at = |step: f64| {
            let vp = [v0[0] + step * e[0], v0[1] + step * e[1]];
            let vm = [v0[0] - step * e[0], v0[1] - step * e[1]];
            let a = gamma_at(&params, &[0, 0], &g, &h, &vp, &quad).unwrap();
            let b = gamma_at(&params, &[0, 0], &g, &h, &vm, &quad).unwrap();
            (a - b) / (2.0 * step)
        };
        let lhs = (4.0 * diff_at(fd / 2.0) - diff_at(fd)) / 3.0;
        let rhs = gamma_at(&params, &[1, 0], &g, &h, &v0, &quad).unwrap()
            + gamma_at(&params, &[0, 0], &g.derivative(axis), &h, &v0, &quad).unwrap()
            + gamma_at(&params, &[0, 0], &g, &h.derivative(axis), &v0, &quad).unwrap();
        let scale = lhs.abs().max(rhs.abs());
        assert!(
            (lhs - rhs).abs() <= 1e-4 * scale,
            "lhs {lhs:.6e} rhs {rhs:.6e} scale {scale:.3e}"
        );
    }

    #[test]
    fn gamma_beta_rejects_high_order() {
        let params = KernelParams::new(2, 0.0, 0.25).unwrap();
        let g = AnalyticField::gaussian(2, 1.0, &[0.0, 0.0], 1.0);
        let grid = Grid::new(2, 5.0, 8);
        assert!(gamma_beta(&params, &[2, 1], &g, &g, grid, &quick_quad()).is_err());
        assert!(gamma_at(&params, &[3, 0], &g, &g, &[0.0, 0.0], &quick_quad()).is_err());
    }

    #[test]
    fn nu_tilde_pao_slopes_at_three_parameter_sets() {
        // The fitted log ν̃ / log⟨v⟩ slope over the far window recovers the
        // kinetic exponent γ + 2s for hard, borderline and very-soft-angle
        // parameters alike.
        let quad = CollisionQuad {
            theta_per_shell: 8,
            rho_nodes: 28,
            omega_nodes: 16,
            omega_polar: 12,
            sigma_azim: 8,
            ..quick_quad()
        };
        for &(gamma, s) in &[(0.0, 0.25), (-1.0, 0.5), (0.5, 0.125)] {
            let params = KernelParams::new(3, gamma, s).unwrap();
            let pao = build_pao_split(&params, &quad, 9.0, 25).unwrap();
            let want = gamma + 2.0 * s;
            assert!(
                (pao.fitted_slope - want).abs() <= 0.15,
                "(gamma, s) = ({gamma}, {s}): slope {} vs {want}",
                pao.fitted_slope
            );
            assert!(pao.c_fit > 0.0);
            assert!(pao.values.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn nu_tilde_is_radial_within_quadrature_accuracy() {
        let params = KernelParams::new(3, 0.0, 0.25).unwrap();
        let quad = CollisionQuad {
            theta_per_shell: 8,
            rho_nodes: 28,
            omega_nodes: 16,
            omega_polar: 16,
            sigma_azim: 8,
            ..quick_quad()
        };
        let a = nu_tilde_at(&params, &quad, &[2.0, 0.0, 0.0]);
        let b = nu_tilde_at(&params, &quad, &[0.0, 0.0, 2.0]);
        let rel = (a - b).abs() / a.abs();
        assert!(rel < 1e-6, "axis values {a:.9e} vs {b:.9e}, rel {rel:.2e}");
    }

    #[test]
    fn pao_split_interpolates_and_splits_consistently() {
        let params = KernelParams::new(2, 0.0, 0.25).unwrap();
        let quad = quick_quad();
        let pao = build_pao_split(&params, &quad, 12.0, 97).unwrap();
        // Off-node interpolation against a direct evaluation.
        let r = 2.35;
        let direct = nu_tilde_at(&params, &quad, &[r, 0.0]);
        let interp = pao.nu_tilde(r);
        assert!(
            (direct - interp).abs() / direct <= 1e-5,
            "interp {interp:.8e} direct {direct:.8e}"
        );
        // The split is exact by construction, everywhere.
        for &v in &[[0.3f64, -1.2], [3.5, 2.0], [-6.0, 1.0]] {
            let r = (v[0] * v[0] + v[1] * v[1]).sqrt();
            let lhs = pao.nu_tilde(r);
            let rhs = pao.nu(&v) + pao.nu_k(&v);
            assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        }
        assert!(pao.nu(&[0.0, 0.0]) > 0.0);
    }

    #[test]
    fn operator_routes_agree_and_annihilate_invariants() {
        let params = KernelParams::new(2, 0.0, 0.25).unwrap();
        let quad = quick_quad();
        let grid = Grid::new(2, 8.0, 20);
        let pao = build_pao_split(&params, &quad, 13.0, 105).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_field(&mut rng, 2);

        // Route agreement: L = N + K up to the fidelity of the radial table.
        let full = apply_l(&params, &g, grid, &quad);
        let coercive = apply_n(&params, &pao, &g, grid, &quad);
        let compact = apply_k(&params, &pao, &g, grid, &quad);
        let split = coercive.axpy(1.0, &compact);
        let scale = full.max_abs();
        let dev = full.axpy(-1.0, &split).max_abs();
        assert!(dev <= 1e-5 * scale, "route deviation {dev:.3e} vs scale {scale:.3e}");

        // Collision invariants are annihilated node-for-node: the two Γ
        // calls inside apply_l share quadrature nodes, and the summed
        // integrand vanishes by momentum/energy conservation.
        let sqrt2 = std::f64::consts::SQRT_2;
        let invariants = [
            AnalyticField::sqrt_mu(2),
            AnalyticField::poly_gaussian(2, 1.0, &[0.0, 0.0], sqrt2, &[1, 0]),
            AnalyticField::poly_gaussian(2, 1.0, &[0.0, 0.0], sqrt2, &[2, 0]).add(
                &AnalyticField::poly_gaussian(2, 1.0, &[0.0, 0.0], sqrt2, &[0, 2]),
            ),
        ];
        let ref_scale = pao.nu_tilde(0.0) * sqrt_mu_at(2, &[0.0, 0.0]);
        for (i, phi) in invariants.iter().enumerate() {
            let out = apply_l(&params, phi, grid, &quad);
            assert!(
                out.max_abs() <= 1e-10 * ref_scale,
                "invariant {i}: |L phi| = {:.3e}, scale {ref_scale:.3e}",
                out.max_abs()
            );
        }
    }

    #[test]
    fn n_quadratic_form_matches_collision_seminorm() {
        // ⟨Ng, g⟩ = |g|²_{B_0} + ∫ ν g²: left side through the operator
        // route, right side through the independent semi-norm scan.
        let params = KernelParams::new(2, 0.0, 0.25).unwrap();
        let grid = Grid::new(2, 8.0, 24);
        let quad = CollisionQuad {
            theta_per_shell: 16,
            rho_nodes: 32,
            omega_nodes: 16,
            ..quick_quad()
        };
        let pao = build_pao_split(&params, &quad, 13.0, 105).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let g = random_field(&mut rng, 2);
        let ng = apply_n(&params, &pao, &g, grid, &quad);
        let gv = grid.sample(&g);
        let lhs = grid.inner(&ng.vals, &gv.vals);

        let wspec = WeightSpec::from_params(&params, 0.0);
        let shell = ShellQuad {
            theta_per_shell: 16,
            k_max: 12,
            rho_nodes: 32,
            omega_nodes: 16,
            rho_pad: 9.0,
        };
        let b0 = seminorm_b_ell(&params, &wspec, &g, grid, &shell);
        let nu_part: f64 = grid.cell_volume()
            * (0..grid.len())
                .map(|i| {
                    let p = grid.point(i);
                    pao.nu(&p[..2]) * gv.vals[i] * gv.vals[i]
                })
                .sum::<f64>();
        let rhs = b0.value + nu_part;
        let rel = (lhs - rhs).abs() / rhs.abs();
        assert!(lhs > 0.0);
        assert!(rel <= 1e-6, "lhs {lhs:.9e} rhs {rhs:.9e} rel {rel:.2e}");
    }

    #[test]
    fn pre_post_change_of_variables_symmetry() {
        // −∫∫∫ B (g'−g) h M'_* M_* = ½ ∫∫∫ B (g'−g)(h'−h) M'_* M_*.
        let params = KernelParams::new(2, 0.0, 0.25).unwrap();
        let grid = Grid::new(2, 8.0, 20);
        let quad = quick_quad();
        for seed in [1u64, 2, 3] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_field(&mut rng, 2);
            let h = random_field(&mut rng, 2);
            let diff = n_difference_field(&params, &g, grid, &quad);
            let hv = grid.sample(&h);
            let lhs = -grid.inner(&diff.vals, &hv.vals);
            let rhs = dirichlet_pairing(&params, &g, &h, grid, &quad);
            let scale = lhs.abs().max(rhs.abs());
            assert!(
                (lhs - rhs).abs() <= 1e-5 * scale,
                "seed {seed}: lhs {lhs:.8e} rhs {rhs:.8e}"
            );
        }
    }

    #[test]
    fn gamma_reports_contracting_shell_tail() {
        let params = KernelParams::new(2, 0.0, 0.25).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_field(&mut rng, 2);
        let h = random_field(&mut rng, 2);
        let grid = Grid::new(2, 6.0, 12);
        let out = gamma_bilinear(&params, &g, &h, grid, &quick_quad());
        let slope = out.tail_slope.expect("tail slope");
        let want = 2.0 * params.s - 2.0;
        assert!(
            (slope - want).abs() < 0.4,
            "cancellation slope {slope:.3} vs {want}"
        );
        let tail = out.tail_estimate.expect("tail estimate");
        let total: f64 = out.shell_l1.iter().sum();
        assert!(tail > 0.0 && tail < 0.05 * total, "tail {tail:.3e} of {total:.3e}");
    }
}
