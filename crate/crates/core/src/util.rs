//! Small shared utilities: least-squares line fits, deterministic parallel
//! reductions, multi-index enumeration, and a stable config hash.

use rayon::prelude::*;

/// Result of an ordinary least-squares line fit y ≈ slope·x + intercept.
#[derive(Debug, Clone, Copy)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Coefficient of determination of the fit.
    pub r2: f64,
}

/// Least-squares fit of a line through the points (xs[i], ys[i]).
///
/// Panics if fewer than two points are supplied (a slope is meaningless).
pub fn fit_line(xs: &[f64], ys: &[f64]) -> LineFit {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2, "line fit needs at least two points");
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    LineFit { slope, intercept, r2 }
}

/// Deterministic parallel sum of f(i) for i in 0..len.
///
/// Work is split into fixed-size chunks; per-chunk partial sums are combined
/// in index order, so the result does not depend on the number of threads.
pub fn par_sum(len: usize, f: impl Fn(usize) -> f64 + Sync + Send) -> f64 {
    const CHUNK: usize = 256;
    let nchunks = len.div_ceil(CHUNK);
    let partials: Vec<f64> = (0..nchunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(len);
            let mut acc = 0.0;
            for i in lo..hi {
                acc += f(i);
            }
            acc
        })
        .collect();
    partials.iter().sum()
}

/// Deterministic parallel map: out[i] = f(i). Order is preserved by collect.
pub fn par_map(len: usize, f: impl Fn(usize) -> f64 + Sync + Send) -> Vec<f64> {
    (0..len).into_par_iter().map(f).collect()
}

/// Install the global thread pool honoring NONCUTOFF_THREADS (default: all
/// cores). Safe to call more than once; later calls are ignored.
pub fn init_threads() {
    if let Ok(val) = std::env::var("NONCUTOFF_THREADS") {
        if let Ok(k) = val.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(k.max(1))
                .build_global();
        }
    }
}

/// All multi-indices β ∈ ℕ^dim with |β| ≤ max_order, in graded
/// lexicographic order (total order ascending).
pub fn multi_indices(dim: usize, max_order: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for total in 0..=max_order {
        let mut idx = vec![0usize; dim];
        fill(&mut out, &mut idx, 0, total);
    }
    return out;

    fn fill(out: &mut Vec<Vec<usize>>, idx: &mut [usize], pos: usize, left: usize) {
        if pos + 1 == idx.len() {
            idx[pos] = left;
            out.push(idx.to_vec());
            return;
        }
        for take in (0..=left).rev() {
            idx[pos] = take;
            fill(out, idx, pos + 1, left - take);
        }
    }
}

/// Binomial coefficient as f64 (arguments stay tiny here).
pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

/// Product of per-coordinate binomials: the multinomial weight in the
/// Leibniz expansion over multi-indices, ∏_i C(beta[i], sub[i]).
pub fn multi_binomial(beta: &[usize], sub: &[usize]) -> f64 {
    beta.iter()
        .zip(sub)
        .map(|(&b, &s)| binomial(b, s))
        .product()
}

/// FNV-1a 64-bit hash, used for stable config fingerprints in reports.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1_0000_01b3);
    }
    h
}

/// Velocity bracket ⟨v⟩ = (1 + |v|²)^{1/2}.
pub fn bracket(v: &[f64]) -> f64 {
    (1.0 + v.iter().map(|x| x * x).sum::<f64>()).sqrt()
}

/// n uniformly spaced points covering [a, b] inclusive.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2);
    (0..n)
        .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
        .collect()
}
