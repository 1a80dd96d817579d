//! Collision kernels with the grazing singularity, dyadic shell
//! decomposition, and collisional geometry in both the σ-representation and
//! the Carleman-plane representation.
//!
//! The kernel is B(v−v_*, σ) = Φ(|v−v_*|)·b(cosθ) with kinetic factor
//! Φ(r) = C_Φ r^γ and angular factor fixed as b(cosθ) = θ^{−1−2s} sin^{2−n}θ
//! on θ ∈ (0, π/2] (deviation angle after symmetrization). This choice makes
//! sin^{n−2}θ·b(cosθ)·θ^{1+2s} ≡ 1, so the sandwich bounds hold with
//! constant one and dyadic scaling slopes come out exactly 2s.

use crate::error::{Error, Result};
use crate::quadrature::Quad1;

/// Kernel parameters (n, γ, s, C_Φ, c_b) with admissibility checking.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KernelParams {
    pub n: usize,
    pub gamma: f64,
    pub s: f64,
    pub c_phi: f64,
    pub c_b: f64,
    /// True when γ > −(n−2)−2s (the strict hypothesis); constructors that
    /// relax the range record it here.
    pub strict: bool,
}

impl KernelParams {
    /// Strictly admissible parameters: s ∈ (0,1) and γ > −(n−2) − 2s.
    pub fn new(n: usize, gamma: f64, s: f64) -> Result<KernelParams> {
        if n < 2 {
            return Err(Error::Inadmissible(format!("dimension n = {n} < 2")));
        }
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::Inadmissible(format!("s = {s} outside (0,1)")));
        }
        let floor = -((n as f64) - 2.0) - 2.0 * s;
        if gamma <= floor {
            return Err(Error::Inadmissible(format!(
                "gamma = {gamma} must exceed -(n-2)-2s = {floor} at n = {n}"
            )));
        }
        Ok(KernelParams {
            n,
            gamma,
            s,
            c_phi: 1.0,
            c_b: 1.0,
            strict: true,
        })
    }

    /// Relaxed constructor for soft-regime experiments: requires only local
    /// integrability of the kinetic factor (γ > −n) and s ∈ (0,1). At n = 2
    /// the strict hypothesis admits no soft potential at all (γ > −2s forces
    /// γ + 2s > 0), so every desk-scale soft configuration necessarily lives
    /// in this extrapolated range; `strict` is false to record that.
    pub fn new_relaxed(n: usize, gamma: f64, s: f64) -> Result<KernelParams> {
        if n < 2 {
            return Err(Error::Inadmissible(format!("dimension n = {n} < 2")));
        }
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::Inadmissible(format!("s = {s} outside (0,1)")));
        }
        if gamma <= -(n as f64) {
            return Err(Error::Inadmissible(format!(
                "gamma = {gamma} must exceed -n = {} for local integrability",
                -(n as f64)
            )));
        }
        let strict = gamma > -((n as f64) - 2.0) - 2.0 * s;
        Ok(KernelParams {
            n,
            gamma,
            s,
            c_phi: 1.0,
            c_b: 1.0,
            strict,
        })
    }

    /// Inverse power-law interaction potential r^{−(p−1)} in n = 3:
    /// γ = (p−5)/(p−1) and s = 1/(p−1). For n ≠ 3 the mapping is not
    /// defined; supply (γ, s) directly.
    pub fn from_inverse_power(p: f64, n: usize) -> Result<KernelParams> {
        if p <= 2.0 {
            return Err(Error::Inadmissible(format!(
                "inverse-power exponent p = {p} must exceed 2"
            )));
        }
        if n != 3 {
            return Err(Error::Inadmissible(format!(
                "inverse-power mapping is defined for n = 3 (got n = {n}); pass gamma and s directly"
            )));
        }
        let gamma = (p - 5.0) / (p - 1.0);
        let s = 1.0 / (p - 1.0);
        KernelParams::new(n, gamma, s)
    }

    /// Kinetic factor Φ(r) = C_Φ r^γ.
    pub fn phi(&self, r: f64) -> f64 {
        self.c_phi * r.powf(self.gamma)
    }

    /// Angular factor b(cosθ) = θ^{−1−2s} sin^{2−n}θ for θ ∈ (0, π/2].
    /// Calling outside that range is a contract violation.
    pub fn angular_b(&self, theta: f64) -> Result<f64> {
        if !(theta > 0.0 && theta <= std::f64::consts::FRAC_PI_2) {
            return Err(Error::OutOfRange(format!(
                "theta = {theta} outside (0, pi/2]"
            )));
        }
        Ok(theta.powf(-1.0 - 2.0 * self.s) * theta.sin().powi(2 - self.n as i32))
    }

    /// Hard regime iff γ + 2s ≥ 0.
    pub fn is_hard(&self) -> bool {
        self.gamma + 2.0 * self.s >= 0.0
    }
}

/// Pre- and post-collisional velocities for one (v, v_*, σ).
#[derive(Debug, Clone)]
pub struct CollisionPair {
    pub n: usize,
    pub v: [f64; 3],
    pub v_star: [f64; 3],
    pub v_prime: [f64; 3],
    pub v_star_prime: [f64; 3],
    pub sigma: [f64; 3],
    pub cos_theta: f64,
    /// |v − v'| = |v − v_*| sin(θ/2).
    pub dist_v_vprime: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// The σ-representation: v' = (v+v_*)/2 + (|v−v_*|/2)σ and
/// v'_* = (v+v_*)/2 − (|v−v_*|/2)σ. Momentum and kinetic energy are
/// conserved identically; cosθ = ⟨(v−v_*)/|v−v_*|, σ⟩.
pub fn post_collision(v: &[f64], v_star: &[f64], sigma: &[f64]) -> Result<CollisionPair> {
    let n = v.len();
    assert!(n == 2 || n == 3);
    assert_eq!(v_star.len(), n);
    assert_eq!(sigma.len(), n);
    let mut rel = [0.0; 3];
    for i in 0..n {
        rel[i] = v[i] - v_star[i];
    }
    let r = norm(&rel[..n]);
    if r == 0.0 {
        return Err(Error::DegeneratePair);
    }
    let half_r = 0.5 * r;
    let mut out = CollisionPair {
        n,
        v: [0.0; 3],
        v_star: [0.0; 3],
        v_prime: [0.0; 3],
        v_star_prime: [0.0; 3],
        sigma: [0.0; 3],
        cos_theta: 0.0,
        dist_v_vprime: 0.0,
    };
    for i in 0..n {
        let mid = 0.5 * (v[i] + v_star[i]);
        out.v[i] = v[i];
        out.v_star[i] = v_star[i];
        out.sigma[i] = sigma[i];
        out.v_prime[i] = mid + half_r * sigma[i];
        out.v_star_prime[i] = mid - half_r * sigma[i];
    }
    out.cos_theta = dot(&rel[..n], sigma) / r;
    // |v − v'|² = (|v−v_*|²/2)(1 − cosθ).
    out.dist_v_vprime = (0.5 * r * r * (1.0 - out.cos_theta)).max(0.0).sqrt();
    Ok(out)
}

/// Indicator of the dyadic shell [2^{−k−1}, 2^{−k}); the shells tile (0, ∞)
/// with the half-open convention.
pub fn shell_of(k: i32, r: f64) -> Result<f64> {
    if r <= 0.0 {
        return Err(Error::OutOfRange(format!("shell argument r = {r} <= 0")));
    }
    let lo = (-(k as f64) - 1.0).exp2();
    let hi = (-(k as f64)).exp2();
    Ok(if r >= lo && r < hi { 1.0 } else { 0.0 })
}

/// Shell bounds (lo, hi) = (2^{−k−1}, 2^{−k}).
pub fn shell_bounds(k: i32) -> (f64, f64) {
    ((-(k as f64) - 1.0).exp2(), (-(k as f64)).exp2())
}

/// Smallest shell index whose support intersects (0, r_max/√2], i.e. the
/// coarsest shell reachable by |v−v'| = |v−v_*| sin(θ/2) with θ ≤ π/2 and
/// |v−v_*| ≤ r_max.
pub fn k_min_for(r_max: f64) -> i32 {
    let cap = r_max / std::f64::consts::SQRT_2;
    // Need 2^{−k−1} < cap, i.e. k > −log2(cap) − 1.
    (-cap.log2() - 1.0).floor() as i32 + 1
}

/// Quadrature plan for ∫ b(cosθ) (...) dσ, decomposed over dyadic shells in
/// |v−v'|. Combined node weights absorb b·dσ = θ^{−1−2s} dθ × (azimuth
/// measure), which is exact for the D-choice of b in both n = 2 and n = 3.
#[derive(Debug, Clone, Copy)]
pub struct SigmaQuadSpec {
    /// Gauss–Legendre nodes per shell in θ.
    pub theta_per_shell: usize,
    pub k_min: i32,
    pub k_max: i32,
    /// Azimuthal ring size for n = 3 (ignored at n = 2, which uses the two
    /// reflection-symmetric signs).
    pub azim: usize,
}

impl SigmaQuadSpec {
    pub fn new(theta_per_shell: usize, k_min: i32, k_max: i32, azim: usize) -> SigmaQuadSpec {
        SigmaQuadSpec {
            theta_per_shell,
            k_min,
            k_max,
            azim,
        }
    }
}

/// One σ node: direction, deviation angle, combined angular weight (so that
/// Σ w·F(σ) ≈ ∫ b(cosθ) F(σ) dσ over the shells covered), and shell index.
#[derive(Debug, Clone, Copy)]
pub struct SigmaNode {
    pub sigma: [f64; 3],
    pub theta: f64,
    pub w: f64,
    pub k: i32,
}

/// Enumerate σ nodes for relative direction k̂ = (v−v_*)/|v−v_*| and
/// separation rho = |v−v_*|. The azimuthal node set is symmetric (± pairs at
/// n = 2, a uniform ring at n = 3) so odd-in-azimuth integrands cancel
/// exactly — required for grazing-limit convergence of ν̃-type integrals.
///
/// `gl` is a reference Gauss–Legendre rule on [−1, 1] with
/// spec.theta_per_shell nodes.
pub fn for_each_sigma(
    params: &KernelParams,
    khat: &[f64],
    rho: f64,
    spec: &SigmaQuadSpec,
    gl: &Quad1,
    mut visit: impl FnMut(&SigmaNode),
) {
    debug_assert_eq!(gl.len(), spec.theta_per_shell);
    let n = params.n;
    let sin_cap = std::f64::consts::FRAC_1_SQRT_2;
    // Orthonormal frame completing k̂.
    let mut e1 = [0.0; 3];
    let mut e2 = [0.0; 3];
    if n == 2 {
        e1[0] = -khat[1];
        e1[1] = khat[0];
    } else {
        // Pick the axis least aligned with k̂ and orthogonalize.
        let pick = if khat[0].abs() <= khat[1].abs() && khat[0].abs() <= khat[2].abs() {
            [1.0, 0.0, 0.0]
        } else if khat[1].abs() <= khat[2].abs() {
            [0.0, 1.0, 0.0]
        } else {
            [0.0, 0.0, 1.0]
        };
        let c = dot(&pick, &khat[..3]);
        for i in 0..3 {
            e1[i] = pick[i] - c * khat[i];
        }
        let s = norm(&e1);
        for e in e1.iter_mut() {
            *e /= s;
        }
        e2[0] = khat[1] * e1[2] - khat[2] * e1[1];
        e2[1] = khat[2] * e1[0] - khat[0] * e1[2];
        e2[2] = khat[0] * e1[1] - khat[1] * e1[0];
    }
    let exponent = -1.0 - 2.0 * params.s;
    for k in spec.k_min..=spec.k_max {
        let (lo, hi) = shell_bounds(k);
        let slo = lo / rho;
        let shi = (hi / rho).min(sin_cap);
        if slo >= shi {
            continue;
        }
        let th_lo = 2.0 * slo.asin();
        let th_hi = 2.0 * shi.asin();
        for (&x, &wx) in gl.nodes.iter().zip(&gl.weights) {
            let theta = 0.5 * (th_lo + th_hi) + 0.5 * (th_hi - th_lo) * x;
            let wt = wx * 0.5 * (th_hi - th_lo) * theta.powf(exponent);
            let (st, ct) = theta.sin_cos();
            if n == 2 {
                for sgn in [1.0, -1.0] {
                    let node = SigmaNode {
                        sigma: [
                            ct * khat[0] + sgn * st * e1[0],
                            ct * khat[1] + sgn * st * e1[1],
                            0.0,
                        ],
                        theta,
                        w: wt,
                        k,
                    };
                    visit(&node);
                }
            } else {
                let ring_w = 2.0 * std::f64::consts::PI / spec.azim as f64;
                for a in 0..spec.azim {
                    let phi = 2.0 * std::f64::consts::PI * (a as f64 + 0.5) / spec.azim as f64;
                    let (sp, cp) = phi.sin_cos();
                    let node = SigmaNode {
                        sigma: [
                            ct * khat[0] + st * (cp * e1[0] + sp * e2[0]),
                            ct * khat[1] + st * (cp * e1[1] + sp * e2[1]),
                            ct * khat[2] + st * (cp * e1[2] + sp * e2[2]),
                        ],
                        theta,
                        w: wt * ring_w,
                        k,
                    };
                    visit(&node);
                }
            }
        }
    }
}

/// Orthonormal parametrization of the Carleman plane E through v' with
/// normal v' − v_*. At n = 2 the plane is the line v' + t·e with e ⊥ (v'−v_*);
/// plane quadrature is provided for n = 2 (the desk-scale Carleman paths).
#[derive(Debug, Clone)]
pub struct CarlemanFrame {
    pub n: usize,
    pub origin: [f64; 3],
    /// Unit normal (v' − v_*)/|v' − v_*|.
    pub normal: [f64; 3],
    /// Orthonormal tangent basis (one vector at n = 2, two at n = 3).
    pub tangent: [[f64; 3]; 2],
    pub dist: f64,
}

pub fn carleman_frame(v_prime: &[f64], v_star: &[f64]) -> Result<CarlemanFrame> {
    let n = v_prime.len();
    assert!(n == 2 || n == 3);
    let mut nrm = [0.0; 3];
    for i in 0..n {
        nrm[i] = v_prime[i] - v_star[i];
    }
    let d = norm(&nrm[..n]);
    if d == 0.0 {
        return Err(Error::DegeneratePair);
    }
    for x in nrm.iter_mut() {
        *x /= d;
    }
    let mut tangent = [[0.0; 3]; 2];
    if n == 2 {
        tangent[0] = [-nrm[1], nrm[0], 0.0];
    } else {
        let pick = if nrm[0].abs() <= nrm[1].abs() && nrm[0].abs() <= nrm[2].abs() {
            [1.0, 0.0, 0.0]
        } else if nrm[1].abs() <= nrm[2].abs() {
            [0.0, 1.0, 0.0]
        } else {
            [0.0, 0.0, 1.0]
        };
        let c = dot(&pick, &nrm);
        let mut e1 = [0.0; 3];
        for i in 0..3 {
            e1[i] = pick[i] - c * nrm[i];
        }
        let s = norm(&e1);
        for e in e1.iter_mut() {
            *e /= s;
        }
        tangent[0] = e1;
        tangent[1] = [
            nrm[1] * e1[2] - nrm[2] * e1[1],
            nrm[2] * e1[0] - nrm[0] * e1[2],
            nrm[0] * e1[1] - nrm[1] * e1[0],
        ];
    }
    let mut origin = [0.0; 3];
    origin[..n].copy_from_slice(&v_prime[..n]);
    Ok(CarlemanFrame {
        n,
        origin,
        normal: nrm,
        tangent,
        dist: d,
    })
}

impl CarlemanFrame {
    /// Point v' + t·e on the line (n = 2).
    pub fn point(&self, t: f64) -> [f64; 3] {
        debug_assert_eq!(self.n, 2);
        [
            self.origin[0] + t * self.tangent[0][0],
            self.origin[1] + t * self.tangent[0][1],
            0.0,
        ]
    }

    /// Parameter interval where the line stays inside the box |v_i| ≤ L
    /// (n = 2). Returns None when the intersection is empty.
    pub fn box_interval(&self, l: f64) -> Option<(f64, f64)> {
        debug_assert_eq!(self.n, 2);
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for i in 0..2 {
            let e = self.tangent[0][i];
            let o = self.origin[i];
            if e.abs() < 1e-300 {
                if o.abs() > l {
                    return None;
                }
            } else {
                let a = (-l - o) / e;
                let b = (l - o) / e;
                lo = lo.max(a.min(b));
                hi = hi.min(a.max(b));
            }
        }
        if lo < hi {
            Some((lo, hi))
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::gauss_legendre;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn inverse_power_mapping_exact_values() {
        let k5 = KernelParams::from_inverse_power(5.0, 3).unwrap();
        assert_eq!(k5.gamma, 0.0);
        assert_eq!(k5.s, 0.25);
        let k3 = KernelParams::from_inverse_power(3.0, 3).unwrap();
        assert_eq!(k3.gamma, -1.0);
        assert_eq!(k3.s, 0.5);
        let k9 = KernelParams::from_inverse_power(9.0, 3).unwrap();
        assert_eq!(k9.gamma, 0.5);
        assert_eq!(k9.s, 0.125);
    }

    #[test]
    fn inverse_power_rejects_bad_input() {
        assert!(KernelParams::from_inverse_power(2.0, 3).is_err());
        assert!(KernelParams::from_inverse_power(1.5, 3).is_err());
        assert!(KernelParams::from_inverse_power(5.0, 2).is_err());
    }

    #[test]
    fn strict_admissibility_gate() {
        // At n = 2 the strict range forces gamma + 2s > 0: every soft
        // parameter pair is rejected.
        assert!(KernelParams::new(2, -1.5, 0.25).is_err());
        assert!(KernelParams::new(2, -0.6, 0.25).is_err());
        assert!(KernelParams::new(2, -0.4, 0.25).is_ok()); // γ+2s = 0.1, hard
        assert!(KernelParams::new(2, 0.0, 0.25).is_ok());
        // n = 3 boundary case: gamma = -1-2s is rejected, above it passes.
        assert!(KernelParams::new(3, -1.5, 0.25).is_err());
        assert!(KernelParams::new(3, -1.4, 0.25).is_ok());
        // Relaxed constructor admits desk-scale soft parameters.
        let soft = KernelParams::new_relaxed(2, -1.5, 0.25).unwrap();
        assert!(!soft.strict);
        assert!(!soft.is_hard());
        assert!(KernelParams::new_relaxed(2, -2.0, 0.25).is_err());
    }

    #[test]
    fn angular_b_matches_closed_form() {
        let k = KernelParams::new(3, 0.0, 0.5).unwrap();
        let th = std::f64::consts::FRAC_PI_2;
        let want = th.powf(-2.0) / th.sin();
        assert!((k.angular_b(th).unwrap() - want).abs() < 1e-15);
        assert!((k.angular_b(th).unwrap() - 0.4052847345693511).abs() < 1e-12);
        assert!(k.angular_b(0.0).is_err());
        assert!(k.angular_b(2.0).is_err());
    }

    #[test]
    fn angular_sandwich_identity_is_one() {
        for &(n, s) in &[(2usize, 0.25), (3, 0.5), (3, 0.125)] {
            let k = if n == 2 {
                KernelParams::new(2, 0.0, s).unwrap()
            } else {
                KernelParams::new(3, 0.0, s).unwrap()
            };
            for i in 1..=40 {
                let th = std::f64::consts::FRAC_PI_2 * i as f64 / 40.0;
                let lhs =
                    th.sin().powi(n as i32 - 2) * k.angular_b(th).unwrap() * th.powf(1.0 + 2.0 * s);
                assert!((lhs - 1.0).abs() < 1e-12, "n={n} s={s} theta={th}: {lhs}");
            }
        }
    }

    #[test]
    fn post_collision_axis_example() {
        let p = post_collision(&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(&p.v_prime[..2], &[0.0, 1.0]);
        assert_eq!(&p.v_star_prime[..2], &[0.0, -1.0]);
        assert!((p.cos_theta - 0.0).abs() < 1e-15);
        assert!((p.dist_v_vprime - std::f64::consts::SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn post_collision_identity_when_sigma_is_khat() {
        let v: [f64; 2] = [0.3, -1.2];
        let vs = [1.0, 0.4];
        let rel = [v[0] - vs[0], v[1] - vs[1]];
        let r = (rel[0] * rel[0] + rel[1] * rel[1]).sqrt();
        let sigma = [rel[0] / r, rel[1] / r];
        let p = post_collision(&v, &vs, &sigma).unwrap();
        assert!((p.v_prime[0] - v[0]).abs() < 1e-15);
        assert!((p.v_prime[1] - v[1]).abs() < 1e-15);
        assert!((p.v_star_prime[0] - vs[0]).abs() < 1e-15);
        assert!((p.cos_theta - 1.0).abs() < 1e-14);
    }

    #[test]
    fn post_collision_rejects_degenerate_pair() {
        assert!(post_collision(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn collision_invariants_hold_on_random_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let v: [f64; 2] = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let vs = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let sigma = [ang.cos(), ang.sin()];
            let Ok(p) = post_collision(&v, &vs, &sigma) else {
                continue;
            };
            for i in 0..2 {
                let mom = p.v[i] + p.v_star[i] - p.v_prime[i] - p.v_star_prime[i];
                assert!(mom.abs() < 1e-12);
            }
            let e_pre = p.v[..2].iter().map(|x| x * x).sum::<f64>()
                + p.v_star[..2].iter().map(|x| x * x).sum::<f64>();
            let e_post = p.v_prime[..2].iter().map(|x| x * x).sum::<f64>()
                + p.v_star_prime[..2].iter().map(|x| x * x).sum::<f64>();
            assert!((e_pre - e_post).abs() < 1e-12);
        }
    }

    #[test]
    fn pre_post_involution_recovers_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let v: [f64; 2] = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let vs = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let ang: f64 = rng.random_range(0.0..std::f64::consts::FRAC_PI_2);
            let rel = [v[0] - vs[0], v[1] - vs[1]];
            let r = (rel[0] * rel[0] + rel[1] * rel[1]).sqrt();
            if r < 1e-9 {
                continue;
            }
            let khat = [rel[0] / r, rel[1] / r];
            let eperp = [-khat[1], khat[0]];
            let sigma = [
                ang.cos() * khat[0] + ang.sin() * eperp[0],
                ang.cos() * khat[1] + ang.sin() * eperp[1],
            ];
            let p = post_collision(&v, &vs, &sigma).unwrap();
            // Re-collide the post pair with σ' = k̂ (pre-relative direction).
            let q = post_collision(&p.v_prime[..2], &p.v_star_prime[..2], &khat).unwrap();
            for i in 0..2 {
                assert!((q.v_prime[i] - v[i]).abs() < 1e-13);
                assert!((q.v_star_prime[i] - vs[i]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn shells_tile_the_half_line() {
        assert_eq!(shell_of(0, 0.75).unwrap(), 1.0);
        assert_eq!(shell_of(0, 1.0).unwrap(), 0.0);
        assert_eq!(shell_of(-1, 1.0).unwrap(), 1.0);
        assert!(shell_of(0, 0.0).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let r = (rng.random_range(-10.0f64..10.0)).exp2() * rng.random_range(1.0..2.0);
            let total: f64 = (-12..=12).map(|k| shell_of(k, r).unwrap()).sum();
            assert_eq!(total, 1.0, "r = {r}");
        }
    }

    #[test]
    fn sigma_rule_integrates_b_over_shells() {
        // For fixed rho, Σ_k ∫_{shell k} b dσ should match ∫ θ^{−1−2s} dθ
        // over the θ range where shells are nonempty (n = 2, both signs).
        let params = KernelParams::new(2, 0.0, 0.25).unwrap();
        let spec = SigmaQuadSpec::new(16, k_min_for(2.0), 12, 1);
        let gl = gauss_legendre(16);
        let rho = 2.0;
        let mut acc = 0.0;
        for_each_sigma(&params, &[1.0, 0.0], rho, &spec, &gl, |node| {
            acc += node.w;
        });
        // Exact: 2·∫_{θ_min}^{π/2} θ^{−1.5} dθ with θ_min from the smallest
        // covered shell boundary sin(θ/2) = 2^{−13}/ρ.
        let th_min = 2.0 * ((2.0f64).powi(-13) / rho).asin();
        let exact = 2.0
            * ((std::f64::consts::FRAC_PI_2).powf(-0.5) - th_min.powf(-0.5))
            / -0.5;
        assert!(
            (acc - exact).abs() < 1e-6 * exact.abs(),
            "acc = {acc}, exact = {exact}"
        );
    }

    #[test]
    fn sigma_nodes_are_unit_and_shell_consistent() {
        let params = KernelParams::new(2, 0.5, 0.375).unwrap();
        let spec = SigmaQuadSpec::new(8, -2, 10, 1);
        let gl = gauss_legendre(8);
        let khat = [0.6, 0.8];
        let rho = 1.7;
        for_each_sigma(&params, &khat, rho, &spec, &gl, |node| {
            let nrm = (node.sigma[0] * node.sigma[0] + node.sigma[1] * node.sigma[1]).sqrt();
            assert!((nrm - 1.0).abs() < 1e-13);
            let d = rho * (node.theta / 2.0).sin();
            assert_eq!(shell_of(node.k, d).unwrap(), 1.0);
        });
    }

    #[test]
    fn k_min_covers_box_diagonal() {
        // r_max = 16√2 (box diagonal at L = 8): coarsest distance 16, so the
        // k = −5 shell [16, 32) must be reachable and k = −4 must cap it.
        assert_eq!(k_min_for(16.0 * std::f64::consts::SQRT_2), -4);
        // cap = 32 / sqrt(2) ~ 22.6, so shell -5 = [16, 32) is reachable.
        assert_eq!(k_min_for(32.0), -5);
        assert_eq!(k_min_for(33.0), -5);
    }

    #[test]
    fn carleman_frame_axis_example() {
        let f = carleman_frame(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((f.normal[0] + 1.0).abs() < 1e-15);
        assert!(f.tangent[0][1].abs() == 1.0);
        // Every node on the line is orthogonal to the normal direction.
        for &t in &[-2.0, 0.3, 1.7] {
            let p = f.point(t);
            let d = (p[0] - 0.0) * (1.0 - 0.0) + (p[1] - 0.0) * (0.0 - 0.0);
            assert!(d.abs() < 1e-12);
        }
    }

    #[test]
    fn carleman_box_interval_matches_segment_length() {
        // Line through origin at 45°: inside |v_i| ≤ 2 it has length 4√2.
        let f = carleman_frame(&[0.0, 0.0], &[1.0, -1.0]).unwrap();
        let (lo, hi) = f.box_interval(2.0).unwrap();
        assert!((hi - lo - 4.0 * std::f64::consts::SQRT_2).abs() < 1e-12);
        let gl = gauss_legendre(8).mapped(lo, hi);
        let len: f64 = gl.weights.iter().sum();
        assert!((len - 4.0 * std::f64::consts::SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn carleman_plane_nodes_satisfy_plane_equation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let vp = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let vs = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let Ok(f) = carleman_frame(&vp, &vs) else {
                continue;
            };
            for &t in &[-1.0, 0.5, 2.0] {
                let u = f.point(t);
                // ⟨v_* − v', u − v'⟩ = 0.
                let ip = (vs[0] - vp[0]) * (u[0] - vp[0]) + (vs[1] - vp[1]) * (u[1] - vp[1]);
                assert!(ip.abs() < 1e-12);
            }
        }
    }
}
