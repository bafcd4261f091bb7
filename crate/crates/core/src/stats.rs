//! Deterministic reductions, Monte Carlo summaries and Kolmogorov–Smirnov distances.

use libm::erfc;

/// Pairwise summation in a fixed order, so results do not depend on threading.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(xs) / xs.len() as f64
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let m = mean(xs);
        if n < 2 {
            return Self { mean: m, stderr: f64::INFINITY };
        }
        let dev: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
        let var = pairwise_sum(&dev) / (n - 1) as f64;
        Self { mean: m, stderr: (var / n as f64).sqrt() }
    }

    /// Treats consecutive pairs as one draw (antithetic sampling).
    pub fn from_pairs(xs: &[f64]) -> Self {
        if xs.len() < 4 || xs.len() % 2 == 1 {
            return Self::from_samples(xs);
        }
        let pairs: Vec<f64> = xs.chunks_exact(2).map(|p| 0.5 * (p[0] + p[1])).collect();
        Self::from_samples(&pairs)
    }

    /// `|mean - target| <= k * stderr`, plus a round-off floor for estimates
    /// whose antithetic pairs cancel exactly.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.stderr + 1e-12 * (1.0 + target.abs())
    }
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `sup |F_n - F|` for a continuous reference cdf.
pub fn ks_one_sample(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// `sup |F_a - F_b|` between two empirical distributions.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < xa.len() && j < xb.len() {
        let x = xa[i].min(xb[j]);
        while i < xa.len() && xa[i] <= x {
            i += 1;
        }
        while j < xb.len() && xb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}
