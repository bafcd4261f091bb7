//! Gauss–Hermite rules rescaled to the standard normal.

use gauss_quad::GaussHermite;

/// Nodes `z_k` and weights `w_k` with `sum w_k f(z_k) ~ E f(G)`, `G ~ N(0,1)`.
#[derive(Debug, Clone)]
pub struct NormalRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl NormalRule {
    pub fn new(order: usize) -> Self {
        let order = std::num::NonZeroUsize::new(order.max(1)).unwrap();
        let rule = GaussHermite::new(order);
        let norm = std::f64::consts::PI.sqrt();
        let (nodes, weights) = rule
            .iter()
            .map(|(x, w)| (std::f64::consts::SQRT_2 * x, w / norm))
            .unzip();
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&z, &w)| w * f(z)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_moments() {
        let r = NormalRule::new(64);
        assert!((r.expect(|_| 1.0) - 1.0).abs() < 1e-13);
        assert!(r.expect(|z| z).abs() < 1e-13);
        assert!((r.expect(|z| z * z) - 1.0).abs() < 1e-12);
        assert!((r.expect(|z| z.powi(4)) - 3.0).abs() < 1e-11);
        assert!((r.expect(|z| z.powi(8)) - 105.0).abs() < 1e-9);
        assert!((r.expect(f64::cos) - (-0.5f64).exp()).abs() < 1e-13);
    }
}
