//! Closed-form test fields: sums of separable polynomial-times-Gaussian
//! terms. The family is closed under partial differentiation, which keeps
//! derivative-based checks free of finite-difference error, and every member
//! has the closed-form lifted extension F(v, z) = f(v)·e^{−(z−|v|²/2)²/2}
//! used by geometry-aware diagnostics.

use crate::grid::VelocityFn;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;

/// One separable term a·∏_i p_i(v_i − c_i)·e^{−(v_i−c_i)²/(2σ²)} with
/// per-axis polynomials p_i given by coefficient vectors.
#[derive(Debug, Clone)]
pub struct SepTerm {
    pub amp: f64,
    pub center: [f64; 3],
    pub sigma2: f64,
    pub polys: [Vec<f64>; 3],
    pub n: usize,
}

fn poly_eval(c: &[f64], x: f64) -> f64 {
    let mut acc = 0.0;
    for &ck in c.iter().rev() {
        acc = acc * x + ck;
    }
    acc
}

/// d/dx of p(x)e^{−x²/(2σ²)} expressed as q(x)e^{−x²/(2σ²)}:
/// q = p' − x·p/σ².
fn poly_gauss_derivative(p: &[f64], sigma2: f64) -> Vec<f64> {
    let mut q = vec![0.0; p.len() + 1];
    for (k, &ck) in p.iter().enumerate() {
        if k >= 1 {
            q[k - 1] += k as f64 * ck;
        }
        q[k + 1] -= ck / sigma2;
    }
    q
}

impl SepTerm {
    fn eval(&self, v: &[f64]) -> f64 {
        let mut acc = self.amp;
        for i in 0..self.n {
            let x = v[i] - self.center[i];
            acc *= poly_eval(&self.polys[i], x) * (-x * x / (2.0 * self.sigma2)).exp();
        }
        acc
    }

    fn derivative(&self, axis: usize) -> SepTerm {
        let mut out = self.clone();
        out.polys[axis] = poly_gauss_derivative(&self.polys[axis], self.sigma2);
        out
    }
}

/// A finite sum of separable terms plus a constant offset.
#[derive(Debug, Clone)]
pub struct AnalyticField {
    pub terms: Vec<SepTerm>,
    pub constant: f64,
    pub n: usize,
}

impl AnalyticField {
    pub fn constant(n: usize, c: f64) -> AnalyticField {
        AnalyticField {
            terms: vec![],
            constant: c,
            n,
        }
    }

    /// Isotropic Gaussian a·e^{−|v−c|²/(2σ²)}.
    pub fn gaussian(n: usize, amp: f64, center: &[f64], sigma: f64) -> AnalyticField {
        let mut c = [0.0; 3];
        c[..n].copy_from_slice(&center[..n]);
        AnalyticField {
            terms: vec![SepTerm {
                amp,
                center: c,
                sigma2: sigma * sigma,
                polys: [vec![1.0], vec![1.0], vec![1.0]],
                n,
            }],
            constant: 0.0,
            n,
        }
    }

    /// Monomial-times-Gaussian a·∏(v_i−c_i)^{p_i}·e^{−|v−c|²/(2σ²)}.
    pub fn poly_gaussian(
        n: usize,
        amp: f64,
        center: &[f64],
        sigma: f64,
        powers: &[usize],
    ) -> AnalyticField {
        let mut c = [0.0; 3];
        c[..n].copy_from_slice(&center[..n]);
        let mono = |p: usize| {
            let mut v = vec![0.0; p + 1];
            v[p] = 1.0;
            v
        };
        let mut polys = [vec![1.0], vec![1.0], vec![1.0]];
        for i in 0..n {
            polys[i] = mono(powers[i]);
        }
        AnalyticField {
            terms: vec![SepTerm {
                amp,
                center: c,
                sigma2: sigma * sigma,
                polys,
                n,
            }],
            constant: 0.0,
            n,
        }
    }

    /// √μ = (2π)^{−n/4} e^{−|v|²/4}: the Maxwellian square root.
    pub fn sqrt_mu(n: usize) -> AnalyticField {
        let amp = (2.0 * std::f64::consts::PI).powf(-(n as f64) / 4.0);
        // e^{−|v|²/4} has σ² = 2 in the e^{−x²/(2σ²)} convention.
        AnalyticField::gaussian(n, amp, &[0.0; 3][..n], std::f64::consts::SQRT_2)
    }

    /// μ = (2π)^{−n/2} e^{−|v|²/2}.
    pub fn mu(n: usize) -> AnalyticField {
        let amp = (2.0 * std::f64::consts::PI).powf(-(n as f64) / 2.0);
        AnalyticField::gaussian(n, amp, &[0.0; 3][..n], 1.0)
    }

    pub fn add(mut self, other: &AnalyticField) -> AnalyticField {
        assert_eq!(self.n, other.n);
        self.terms.extend(other.terms.iter().cloned());
        self.constant += other.constant;
        self
    }

    pub fn scaled(mut self, c: f64) -> AnalyticField {
        for t in &mut self.terms {
            t.amp *= c;
        }
        self.constant *= c;
        self
    }

    /// Exact symbolic partial derivative along one axis. The constant part
    /// differentiates to zero, so constants are only meaningful for
    /// evaluation-only uses.
    pub fn derivative(&self, axis: usize) -> AnalyticField {
        assert!(axis < self.n);
        AnalyticField {
            terms: self.terms.iter().map(|t| t.derivative(axis)).collect(),
            constant: 0.0,
            n: self.n,
        }
    }

    /// Exact ∂_β via repeated single-axis derivatives.
    pub fn derivative_multi(&self, beta: &[usize]) -> AnalyticField {
        let mut f = self.clone();
        for (axis, &k) in beta.iter().enumerate() {
            for _ in 0..k {
                f = f.derivative(axis);
            }
        }
        f
    }

    /// Closed-form lifted extension F(v, z) = f(v)·e^{−(z−|v|²/2)²/2};
    /// restricting to z = |v|²/2 recovers f.
    pub fn eval_lifted(&self, v: &[f64], z: f64) -> f64 {
        let r2: f64 = v.iter().map(|x| x * x).sum();
        let d = z - r2 / 2.0;
        self.eval(v) * (-d * d / 2.0).exp()
    }
}

impl VelocityFn for AnalyticField {
    fn eval(&self, v: &[f64]) -> f64 {
        debug_assert_eq!(v.len(), self.n);
        self.constant + self.terms.iter().map(|t| t.eval(v)).sum::<f64>()
    }
}

/// Point evaluation of μ = (2π)^{−n/2} e^{−|v|²/2} without building a field.
pub fn mu_at(n: usize, v: &[f64]) -> f64 {
    let r2: f64 = v[..n].iter().map(|x| x * x).sum();
    (2.0 * std::f64::consts::PI).powf(-(n as f64) / 2.0) * (-r2 / 2.0).exp()
}

/// Point evaluation of M = √μ = (2π)^{−n/4} e^{−|v|²/4}.
pub fn sqrt_mu_at(n: usize, v: &[f64]) -> f64 {
    let r2: f64 = v[..n].iter().map(|x| x * x).sum();
    (2.0 * std::f64::consts::PI).powf(-(n as f64) / 4.0) * (-r2 / 4.0).exp()
}

/// Seeded sample from the test family: 1–3 terms, centers within |c| ≤ 2,
/// widths in [0.7, 1.4], monomial powers ≤ 2. Decays fast inside the box.
pub fn random_field(rng: &mut ChaCha8Rng, n: usize) -> AnalyticField {
    let k = rng.random_range(1..=3);
    let mut f = AnalyticField::constant(n, 0.0);
    for _ in 0..k {
        let mut center = [0.0; 3];
        for c in center.iter_mut().take(n) {
            *c = rng.random_range(-2.0..2.0);
        }
        let sigma = rng.random_range(0.7..1.4);
        let amp = rng.random_range(0.3..1.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
        let term = if rng.random::<bool>() {
            let powers: Vec<usize> = (0..n).map(|_| rng.random_range(0..=2)).collect();
            AnalyticField::poly_gaussian(n, amp, &center[..n], sigma, &powers)
        } else {
            AnalyticField::gaussian(n, amp, &center[..n], sigma)
        };
        f = f.add(&term);
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn symbolic_derivative_matches_finite_difference() {
        let f = AnalyticField::poly_gaussian(2, 0.8, &[0.3, -0.2], 1.1, &[2, 1]);
        let fx = f.derivative(0);
        let fxy = fx.derivative(1);
        let v = [0.7, -0.4];
        let h = 1e-5;
        let fd_x = (f.eval(&[v[0] + h, v[1]]) - f.eval(&[v[0] - h, v[1]])) / (2.0 * h);
        assert!((fx.eval(&v) - fd_x).abs() < 1e-9);
        let fd_xy = (fx.eval(&[v[0], v[1] + h]) - fx.eval(&[v[0], v[1] - h])) / (2.0 * h);
        assert!((fxy.eval(&v) - fd_xy).abs() < 1e-9);
    }

    #[test]
    fn sqrt_mu_squares_to_mu() {
        let m = AnalyticField::sqrt_mu(2);
        let mu = AnalyticField::mu(2);
        for &v in &[[0.0, 0.0], [1.0, -2.0], [3.0, 0.5]] {
            let a = m.eval(&v);
            assert!((a * a - mu.eval(&v)).abs() < 1e-15);
        }
    }

    #[test]
    fn lifted_extension_restricts_to_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = random_field(&mut rng, 2);
        let v = [0.9, -1.3];
        let z = (v[0] * v[0] + v[1] * v[1]) / 2.0;
        assert!((f.eval_lifted(&v, z) - f.eval(&v)).abs() < 1e-15);
        // Off the paraboloid the extension is strictly smaller in magnitude.
        assert!(f.eval_lifted(&v, z + 1.0).abs() < f.eval(&v).abs() + 1e-15);
    }

    #[test]
    fn random_family_is_deterministic_per_seed() {
        let mut a = ChaCha8Rng::seed_from_u64(42);
        let mut b = ChaCha8Rng::seed_from_u64(42);
        let fa = random_field(&mut a, 2);
        let fb = random_field(&mut b, 2);
        let v = [0.4, 1.7];
        assert_eq!(fa.eval(&v), fb.eval(&v));
    }
}
