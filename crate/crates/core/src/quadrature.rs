//! One-dimensional Gauss rules and tensor-product helpers.
//!
//! Gauss–Legendre nodes are computed by Newton iteration on the Legendre
//! recurrence (no tables), Gauss–Hermite nodes by Golub–Welsch on the Jacobi
//! matrix of the probabilists' Hermite polynomials. Both are deterministic.

use nalgebra::DMatrix;

/// A one-dimensional quadrature rule: ∫ f ≈ Σ w_i f(x_i).
#[derive(Debug, Clone)]
pub struct Quad1 {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Quad1 {
    /// Affinely map a rule on [-1, 1] to [a, b].
    pub fn mapped(&self, a: f64, b: f64) -> Quad1 {
        let mid = 0.5 * (a + b);
        let half = 0.5 * (b - a);
        Quad1 {
            nodes: self.nodes.iter().map(|x| mid + half * x).collect(),
            weights: self.weights.iter().map(|w| w * half).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Apply the rule to a scalar function.
    pub fn integrate(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// Legendre P_m(x) and its derivative, by the three-term recurrence.
fn legendre_pair(m: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if m == 0 {
        return (1.0, 0.0);
    }
    for k in 1..m {
        let kf = k as f64;
        let p2 = ((2.0 * kf + 1.0) * x * p1 - kf * p0) / (kf + 1.0);
        p0 = p1;
        p1 = p2;
    }
    let dp = m as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Gauss–Legendre rule with m nodes on [-1, 1]; exact for degree ≤ 2m−1.
pub fn gauss_legendre(m: usize) -> Quad1 {
    assert!(m >= 1);
    let mut nodes = vec![0.0; m];
    let mut weights = vec![0.0; m];
    for i in 0..m.div_ceil(2) {
        // Tricomi-style initial guess, then Newton.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_pair(m, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_pair(m, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[m - 1 - i] = x;
        weights[i] = w;
        weights[m - 1 - i] = w;
    }
    Quad1 { nodes, weights }
}

/// Gauss–Hermite rule for the weight e^{−x²/2} on ℝ (probabilists'
/// normalization): ∫ f(x) e^{−x²/2} dx ≈ Σ w_i f(x_i).
pub fn gauss_hermite_prob(m: usize) -> Quad1 {
    assert!(m >= 1);
    // Jacobi matrix of He_k: zero diagonal, off-diagonal √k.
    let mut j = DMatrix::<f64>::zeros(m, m);
    for k in 1..m {
        let b = (k as f64).sqrt();
        j[(k - 1, k)] = b;
        j[(k, k - 1)] = b;
    }
    let eig = j.symmetric_eigen();
    let mu0 = (2.0 * std::f64::consts::PI).sqrt();
    let mut pairs: Vec<(f64, f64)> = (0..m)
        .map(|i| {
            let node = eig.eigenvalues[i];
            let q0 = eig.eigenvectors[(0, i)];
            (node, mu0 * q0 * q0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    Quad1 {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    }
}

/// Tanh–sinh (double-exponential) rule on (0, 1) with step `h`.
///
/// Nodes are x_k = (1 + tanh((π/2) sinh(kh)))/2 with the matching trapezoid
/// weights; generation stops once a node is within 1e−16 of an endpoint, so
/// the rule is meant for integrands that stay bounded there (unbounded
/// endpoint singularities lose the truncated tail). It converges
/// geometrically for integrands analytic on the open interval even when they
/// are merely C^∞-flat at the endpoints, which is exactly the boundary
/// behaviour of compactly supported bump profiles — Gauss rules only manage
/// root-exponential rates there.
pub fn tanh_sinh_01(h: f64) -> Quad1 {
    assert!(h > 0.0);
    let half_pi = 0.5 * std::f64::consts::PI;
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    let mut push = |k: i64| -> bool {
        let t = k as f64 * h;
        let u = half_pi * t.sinh();
        let x = 0.5 * (1.0 + u.tanh());
        if x <= 1e-16 || x >= 1.0 - 1e-16 {
            return false;
        }
        let sech = 1.0 / u.cosh();
        nodes.push(x);
        weights.push(0.5 * h * half_pi * t.cosh() * sech * sech);
        true
    };
    push(0);
    let mut k = 1i64;
    loop {
        let lo = push(-k);
        let hi = push(k);
        if !lo && !hi {
            break;
        }
        k += 1;
    }
    let mut order: Vec<usize> = (0..nodes.len()).collect();
    order.sort_by(|&a, &b| nodes[a].partial_cmp(&nodes[b]).unwrap());
    Quad1 {
        nodes: order.iter().map(|&i| nodes[i]).collect(),
        weights: order.iter().map(|&i| weights[i]).collect(),
    }
}

/// Tensor-product rule over n ∈ {2, 3} axes. Nodes are padded to length 3;
/// only the first n coordinates are meaningful.
#[derive(Debug, Clone)]
pub struct QuadN {
    pub n: usize,
    pub nodes: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

impl QuadN {
    pub fn tensor(axis: &Quad1, n: usize) -> QuadN {
        assert!(n == 2 || n == 3);
        let m = axis.len();
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        if n == 2 {
            nodes.reserve(m * m);
            weights.reserve(m * m);
            for i in 0..m {
                for j in 0..m {
                    nodes.push([axis.nodes[i], axis.nodes[j], 0.0]);
                    weights.push(axis.weights[i] * axis.weights[j]);
                }
            }
        } else {
            nodes.reserve(m * m * m);
            weights.reserve(m * m * m);
            for i in 0..m {
                for j in 0..m {
                    for k in 0..m {
                        nodes.push([axis.nodes[i], axis.nodes[j], axis.nodes[k]]);
                        weights.push(axis.weights[i] * axis.weights[j] * axis.weights[k]);
                    }
                }
            }
        }
        QuadN { n, nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}
