//! The compact-part kernel. On the coarse shells j ≤ 0 the compact piece of
//! the linearized operator acts through
//!
//!   κ_j^{ψ,φ}(v', v_*) = 2^{n−1} ∫_E dπ_v
//!       B_j(v−v_*, 2v'−v−v_*) / (|v'−v_*| |v−v_*|^{n−2}) · ψ(v'_*) φ(v)
//!
//! with v'_* = v + v_* − v' and E the plane through v' with normal v'−v_*.
//! For Gaussian-decaying ψ, φ the weighted mass of each shell obeys the
//! Grad-style transfer bound
//!
//!   ∫ |κ_j(v', v_*)| w^ℓ(v') dv' ≤ C 2^{2sj} ⟨v_*⟩^{γ+2s−(n−1)} w^ℓ(v_*),
//!
//! uniformly in j ≤ 0, with the same bound when the roles of v' and v_* are
//! reversed. `grad_bound_check` probes both the 2^{2sj} shell scaling and
//! the ⟨v_*⟩ weight transfer.
//!
//! One geometric fact shapes the probe. Write z = v − v'; the Carleman
//! plane forces z ⊥ (v'−v_*) and the angular support forces |z| ≤ |v'−v_*|,
//! and under those two constraints |v|² + |v'_*|² ≥ |v_*|²/3 for every
//! admissible configuration. Gaussian-decay inputs therefore pay at least
//! e^{−c|v_*|²/3} no matter where v' sits, and the measured weighted mass
//! falls much faster than the polynomial rate the transfer bound allows —
//! the bound is an upper envelope over the whole input class, not a sharp
//! rate for any fixed pair ψ, φ. The probe samples each radius inside the
//! shell that covers it (radius 3 on shell −2, radius 6 on shell −3, where
//! the forced penalty is smallest), removes the per-shell 2^{2sj} factor,
//! and checks the inequality direction: the measured transfer exponent must
//! not come out *slower* than γ + 2s − (n−1), which is exactly the
//! statement that the bound's constant does not grow with |v_*|.

use crate::error::{Error, Result};
use crate::grid::VelocityFn;
use crate::kernel::{carleman_frame, shell_bounds, KernelParams};
use crate::norms::WeightSpec;
use crate::quadrature::gauss_legendre;
use crate::util::{bracket, fit_line};

/// κ_j^{ψ,φ}(v', v_*) by Gauss–Legendre quadrature on the Carleman line
/// (n = 2). The line parameter is capped at |t| ≤ |v'−v_*| because the
/// deviation angle leaves (0, π/2] beyond it; together with the shell
/// window this makes the integrand smooth on the integration set.
pub fn kappa_at(
    params: &KernelParams,
    j: i32,
    psi: &dyn VelocityFn,
    phi: &dyn VelocityFn,
    v_prime: &[f64],
    v_star: &[f64],
    t_nodes: usize,
) -> Result<f64> {
    if j > 0 {
        return Err(Error::OutOfRange(format!(
            "compact shells require j <= 0, got {j}"
        )));
    }
    if params.n != 2 {
        return Err(Error::OutOfRange(
            "kappa line quadrature is wired for n = 2".into(),
        ));
    }
    let frame = carleman_frame(v_prime, v_star)?;
    let rho_p = frame.dist;
    let (t_lo, t_hi) = shell_bounds(j);
    let t_hi = t_hi.min(rho_p);
    if t_hi <= t_lo {
        return Ok(0.0);
    }
    let gl = gauss_legendre(t_nodes).mapped(t_lo, t_hi);
    let mut acc = 0.0;
    for (&t, &wt) in gl.nodes.iter().zip(&gl.weights) {
        let rho_u2 = rho_p * rho_p + t * t;
        let theta = ((rho_p * rho_p - t * t) / rho_u2).acos();
        let b_ang = params
            .angular_b(theta)
            .expect("line nodes keep theta in (0, pi/2]");
        let core = 2.0 * wt * params.phi(rho_u2.sqrt()) * b_ang / rho_p;
        for sgn in [1.0, -1.0] {
            let v = frame.point(sgn * t);
            let vsp = [
                v_star[0] + (v[0] - v_prime[0]),
                v_star[1] + (v[1] - v_prime[1]),
            ];
            acc += core * psi.eval(&vsp) * phi.eval(&v[..2]);
        }
    }
    Ok(acc)
}

/// One sampled point of the transfer bound: the weighted integral
/// I = ∫ |κ_j| w^ℓ and its ratio against the bound's right-hand side.
#[derive(Debug, Clone, Copy)]
pub struct KappaRow {
    pub j: i32,
    pub radius: f64,
    pub integral: f64,
    /// I / (2^{2sj} ⟨r⟩^{γ+2s−(n−1)} w^ℓ(r e₁)) — the constant the bound
    /// asserts is uniform.
    pub bound_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct GradBoundReport {
    pub rows: Vec<KappaRow>,
    /// Fitted log₂ I versus j at the anchor radius. The bound caps the
    /// shell mass by 2^{2sj}, so the fitted slope must not fall below 2s.
    pub j_slope: f64,
    /// Measured weight-transfer exponent from the shell-aligned radii, with
    /// the 2^{2sj} factor removed. The bound requires it to stay at or below
    /// `predicted_exponent`; Gaussian inputs land far below (see the module
    /// notes on the forced e^{−c|v_*|²/3} penalty).
    pub decay_exponent: f64,
    /// γ + 2s − (n−1), the fastest growth the bound tolerates.
    pub predicted_exponent: f64,
    pub reversed: bool,
}

const ANCHOR_RADIUS: f64 = 3.0;
const FAR_RADIUS: f64 = 6.0;
/// Shells whose |v−v'| windows contain the probe radii: [2,4) ∋ 3, [4,8) ∋ 6.
const ANCHOR_SHELL: i32 = -2;
const FAR_SHELL: i32 = -3;

fn weighted_integral(
    params: &KernelParams,
    psi: &dyn VelocityFn,
    phi: &dyn VelocityFn,
    wspec: &WeightSpec,
    ell: f64,
    j: i32,
    radius: f64,
    reversed: bool,
) -> f64 {
    let fixed = [radius, 0.0];
    let l = (-(j as f64)).exp2() + 8.0;
    let m = 96usize;
    let h = 2.0 * l / m as f64;
    let t_nodes = 24;
    use rayon::prelude::*;
    let total: f64 = (0..m * m)
        .into_par_iter()
        .map(|idx| {
            let i = idx / m;
            let jj = idx % m;
            let p = [
                -l + (i as f64 + 0.5) * h,
                -l + (jj as f64 + 0.5) * h,
            ];
            let kap = if reversed {
                kappa_at(params, j, psi, phi, &fixed, &p, t_nodes)
            } else {
                kappa_at(params, j, psi, phi, &p, &fixed, t_nodes)
            };
            match kap {
                Ok(val) => val.abs() * wspec.w(&p).powf(ell),
                Err(_) => 0.0,
            }
        })
        .sum();
    total * h * h
}

/// Probe the transfer bound. The forward direction integrates over v' at
/// fixed v_* = r·e₁; the reversed direction integrates over v_* at fixed
/// v' = r·e₁. Rows hold every sampled (j, radius) with its bound ratio;
/// `j_lo` must reach the far shell so both aligned radii are available.
pub fn grad_bound_check(
    params: &KernelParams,
    psi: &dyn VelocityFn,
    phi: &dyn VelocityFn,
    ell: f64,
    j_lo: i32,
    reversed: bool,
) -> Result<GradBoundReport> {
    if params.n != 2 {
        return Err(Error::OutOfRange(
            "kappa line quadrature is wired for n = 2".into(),
        ));
    }
    if j_lo > FAR_SHELL {
        return Err(Error::Config(format!(
            "grad bound probe needs j_lo <= {FAR_SHELL}, got {j_lo}"
        )));
    }
    let wspec = WeightSpec::from_params(params, ell);
    let exponent = params.gamma + 2.0 * params.s - (params.n as f64 - 1.0);
    let ratio = |j: i32, r: f64, integral: f64| {
        let rhs = (2.0 * params.s * j as f64).exp2()
            * bracket(&[r]).powf(exponent)
            * wspec.w(&[r, 0.0]).powf(ell);
        integral / rhs
    };

    let mut rows = Vec::new();
    for j in j_lo..=0 {
        let i_val = weighted_integral(params, psi, phi, &wspec, ell, j, ANCHOR_RADIUS, reversed);
        rows.push(KappaRow {
            j,
            radius: ANCHOR_RADIUS,
            integral: i_val,
            bound_ratio: ratio(j, ANCHOR_RADIUS, i_val),
        });
    }
    let i_far = weighted_integral(params, psi, phi, &wspec, ell, FAR_SHELL, FAR_RADIUS, reversed);
    rows.push(KappaRow {
        j: FAR_SHELL,
        radius: FAR_RADIUS,
        integral: i_far,
        bound_ratio: ratio(FAR_SHELL, FAR_RADIUS, i_far),
    });

    let js: Vec<f64> = rows
        .iter()
        .filter(|r| r.radius == ANCHOR_RADIUS && r.integral > 0.0)
        .map(|r| r.j as f64)
        .collect();
    let logs: Vec<f64> = rows
        .iter()
        .filter(|r| r.radius == ANCHOR_RADIUS && r.integral > 0.0)
        .map(|r| r.integral.log2())
        .collect();
    if js.len() < 3 {
        return Err(Error::NonConvergence(
            "too few positive shell integrals for a j-slope fit".into(),
        ));
    }
    let j_slope = fit_line(&js, &logs).slope;

    let near = rows
        .iter()
        .find(|r| r.j == ANCHOR_SHELL && r.radius == ANCHOR_RADIUS)
        .expect("anchor shell is inside the scanned range");
    let shellless = |row: &KappaRow| {
        (row.integral / (2.0 * params.s * row.j as f64).exp2() / wspec.w(&[row.radius, 0.0]).powf(ell))
            .ln()
    };
    let far = rows.last().unwrap();
    let decay_exponent = (shellless(far) - shellless(near))
        / (bracket(&[FAR_RADIUS]).ln() - bracket(&[ANCHOR_RADIUS]).ln());

    Ok(GradBoundReport {
        rows,
        j_slope,
        decay_exponent,
        predicted_exponent: exponent,
        reversed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::AnalyticField;

    fn decaying_pair() -> (AnalyticField, AnalyticField) {
        (
            AnalyticField::gaussian(2, 1.0, &[0.0, 0.0], 1.0),
            AnalyticField::gaussian(2, 1.0, &[0.0, 0.0], 1.0),
        )
    }

    #[test]
    fn gates_and_degenerate_inputs() {
        let params = KernelParams::new(2, 0.0, 0.25).unwrap();
        let params3 = KernelParams::new(3, 0.0, 0.25).unwrap();
        let (psi, phi) = decaying_pair();
        let vp = [1.0, 0.0];
        let vs = [-1.0, 0.5];
        // Fine shells are not compact territory.
        assert!(kappa_at(&params, 1, &psi, &phi, &vp, &vs, 16).is_err());
        // Only the planar geometry is wired.
        assert!(kappa_at(&params3, 0, &psi, &phi, &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], 16).is_err());
        // Coincident pair has no frame.
        assert!(kappa_at(&params, 0, &psi, &phi, &vp, &vp, 16).is_err());
        // Separation below the shell floor leaves an empty line window.
        assert_eq!(
            kappa_at(&params, 0, &psi, &phi, &[0.2, 0.0], &[0.0, 0.0], 16).unwrap(),
            0.0
        );
    }

    #[test]
    fn vanishing_inputs_give_zero() {
        let params = KernelParams::new(2, 0.0, 0.25).unwrap();
        let zero = AnalyticField::constant(2, 0.0);
        let (_, phi) = decaying_pair();
        let val = kappa_at(&params, -1, &zero, &phi, &[2.0, 0.0], &[-1.0, 1.0], 16).unwrap();
        assert_eq!(val, 0.0);
    }

    #[test]
    fn kappa_converges_in_line_nodes() {
        let params = KernelParams::new(2, -0.5, 0.5).unwrap();
        let (psi, phi) = decaying_pair();
        let vp = [1.5, 0.5];
        let vs = [-0.8, -0.4];
        let coarse = kappa_at(&params, -1, &psi, &phi, &vp, &vs, 16).unwrap();
        let fine = kappa_at(&params, -1, &psi, &phi, &vp, &vs, 48).unwrap();
        assert!(
            (coarse - fine).abs() <= 1e-10 * fine.abs(),
            "coarse {coarse:.12e} fine {fine:.12e}"
        );
    }

    #[test]
    fn grad_bound_scalings_hold_both_ways() {
        let params = KernelParams::new(2, 0.0, 0.25).unwrap();
        let (psi, phi) = decaying_pair();
        for reversed in [false, true] {
            let report = grad_bound_check(&params, &psi, &phi, 1.0, -4, reversed).unwrap();
            assert!(
                report.j_slope >= 2.0 * params.s - 0.2,
                "reversed = {reversed}: j-slope {:.3} below 2s − 0.2",
                report.j_slope
            );
            // The transfer bound caps growth at ⟨v_*⟩^{γ+2s−(n−1)}; the
            // measured exponent must not exceed that (faster decay only
            // strengthens the constant's uniformity).
            assert!(
                report.decay_exponent <= report.predicted_exponent + 0.3,
                "reversed = {reversed}: transfer exponent {:.3} outruns allowed {:.3}",
                report.decay_exponent,
                report.predicted_exponent
            );
            // C-uniformity across radii: the normalized ratio must not grow
            // from the anchor radius to the far one.
            let anchor = report
                .rows
                .iter()
                .find(|r| r.j == -2 && r.radius == 3.0)
                .unwrap();
            let far = report.rows.last().unwrap();
            assert!(
                far.bound_ratio <= anchor.bound_ratio * 1.25,
                "reversed = {reversed}: bound ratio grows {:.3e} -> {:.3e}",
                anchor.bound_ratio,
                far.bound_ratio
            );
            assert!(report
                .rows
                .iter()
                .all(|r| r.bound_ratio.is_finite() && r.bound_ratio >= 0.0));
        }
    }
}
