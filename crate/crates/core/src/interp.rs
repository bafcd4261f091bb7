//! Cubic Hermite interpolation on a uniform grid with quadratic extrapolation.

/// Exact for quadratics, including outside the grid.
#[derive(Debug, Clone)]
pub struct UniformCubic<'a> {
    x0: f64,
    dx: f64,
    y: &'a [f64],
    slopes: Vec<f64>,
    left_curv: f64,
    right_curv: f64,
}

impl<'a> UniformCubic<'a> {
    pub fn new(x0: f64, dx: f64, y: &'a [f64]) -> Self {
        let n = y.len();
        assert!(n >= 4, "cubic interpolation needs at least 4 points");
        let mut slopes = vec![0.0; n];
        for j in 1..n - 1 {
            slopes[j] = (y[j + 1] - y[j - 1]) / (2.0 * dx);
        }
        slopes[0] = (-3.0 * y[0] + 4.0 * y[1] - y[2]) / (2.0 * dx);
        slopes[n - 1] = (3.0 * y[n - 1] - 4.0 * y[n - 2] + y[n - 3]) / (2.0 * dx);
        let left_curv = (y[0] - 2.0 * y[1] + y[2]) / (dx * dx);
        let right_curv = (y[n - 1] - 2.0 * y[n - 2] + y[n - 3]) / (dx * dx);
        Self { x0, dx, y, slopes, left_curv, right_curv }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.y.len();
        let pos = (x - self.x0) / self.dx;
        if pos <= 0.0 {
            let d = x - self.x0;
            return self.y[0] + self.slopes[0] * d + 0.5 * self.left_curv * d * d;
        }
        if pos >= (n - 1) as f64 {
            let d = x - (self.x0 + (n - 1) as f64 * self.dx);
            return self.y[n - 1] + self.slopes[n - 1] * d + 0.5 * self.right_curv * d * d;
        }
        let j = (pos.floor() as usize).min(n - 2);
        let u = pos - j as f64;
        let u2 = u * u;
        let u3 = u2 * u;
        let h00 = 2.0 * u3 - 3.0 * u2 + 1.0;
        let h10 = u3 - 2.0 * u2 + u;
        let h01 = -2.0 * u3 + 3.0 * u2;
        let h11 = u3 - u2;
        h00 * self.y[j] + h10 * self.dx * self.slopes[j] + h01 * self.y[j + 1] + h11 * self.dx * self.slopes[j + 1]
    }
}
