//! Objectives `h`, the terminal envelope `sup_u { h(x+u) - u^2/2c }` and the
//! tilted concave hull `h_c`.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::order_params::parse_f64;

#[derive(Clone, Debug)]
enum Shape {
    /// `-eps * log(1 + exp((kappa - x)/eps))`, a smooth `min(x - kappa, 0)`.
    Perceptron { kappa: f64, epsilon: f64 },
    /// `slope * clamp(x, -radius, radius)`.
    ClippedLinear { slope: f64, radius: f64 },
    /// `-a x^2 / 2`.
    NegQuadratic { a: f64 },
    /// `-depth * min((x-sep)^2, (x+sep)^2) / 2`.
    DoubleWell { sep: f64, depth: f64 },
    Zero,
    Concavified(Arc<Hull>),
}

/// An objective with analytic first and second derivatives.
#[derive(Clone, Debug)]
pub struct TestFunction {
    shape: Shape,
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl TestFunction {
    pub fn perceptron(kappa: f64, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !kappa.is_finite() {
            return Err(Error::Domain(format!("perceptron needs epsilon > 0, got {epsilon}")));
        }
        Ok(Self { shape: Shape::Perceptron { kappa, epsilon } })
    }

    pub fn clipped_linear(slope: f64, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !slope.is_finite() {
            return Err(Error::Domain(format!("clipped_linear needs radius > 0, got {radius}")));
        }
        Ok(Self { shape: Shape::ClippedLinear { slope, radius } })
    }

    pub fn neg_quadratic(a: f64) -> Result<Self> {
        if !(a >= 0.0) {
            return Err(Error::Domain(format!("neg_quadratic needs a >= 0, got {a}")));
        }
        Ok(Self { shape: Shape::NegQuadratic { a } })
    }

    pub fn double_well(sep: f64, depth: f64) -> Result<Self> {
        if !(sep >= 0.0 && depth > 0.0) {
            return Err(Error::Domain(format!("double_well needs sep >= 0, depth > 0")));
        }
        Ok(Self { shape: Shape::DoubleWell { sep, depth } })
    }

    pub fn zero() -> Self {
        Self { shape: Shape::Zero }
    }

    /// Parses `name(p1, p2)` or `name(key=value, ...)`.
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        let (name, rest) = match text.split_once('(') {
            Some((n, r)) => (n.trim(), r.trim_end().strip_suffix(')').ok_or_else(|| Error::Parse(format!("unclosed `(` in `{text}`")))?),
            None => (text, ""),
        };
        let mut positional = Vec::new();
        let mut named = Vec::new();
        for part in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.split_once('=') {
                Some((k, v)) => named.push((k.trim().to_string(), parse_f64(v)?)),
                None => positional.push(parse_f64(part)?),
            }
        }
        let arg = |idx: usize, key: &str, default: Option<f64>| -> Result<f64> {
            if let Some((_, v)) = named.iter().find(|(k, _)| k == key) {
                return Ok(*v);
            }
            positional
                .get(idx)
                .copied()
                .or(default)
                .ok_or_else(|| Error::Parse(format!("`{name}` needs parameter `{key}`")))
        };
        match name {
            "perceptron" => Self::perceptron(arg(0, "kappa", None)?, arg(1, "epsilon", Some(1e-2))?),
            "clipped_linear" => Self::clipped_linear(arg(0, "slope", Some(1.0))?, arg(1, "radius", Some(50.0))?),
            "neg_quadratic" => Self::neg_quadratic(arg(0, "a", Some(1.0))?),
            "double_well" => Self::double_well(arg(0, "sep", Some(1.0))?, arg(1, "depth", Some(1.0))?),
            "zero" => Ok(Self::zero()),
            other => Err(Error::Parse(format!("unknown test function `{other}`"))),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match &self.shape {
            Shape::Perceptron { kappa, epsilon } => -epsilon * softplus((kappa - x) / epsilon),
            Shape::ClippedLinear { slope, radius } => slope * x.clamp(-radius, *radius),
            Shape::NegQuadratic { a } => -0.5 * a * x * x,
            Shape::DoubleWell { sep, depth } => {
                let d = x.abs() - sep;
                -0.5 * depth * d * d
            }
            Shape::Zero => 0.0,
            Shape::Concavified(hull) => hull.eval(x),
        }
    }

    pub fn d1(&self, x: f64) -> f64 {
        match &self.shape {
            Shape::Perceptron { kappa, epsilon } => sigmoid((kappa - x) / epsilon),
            Shape::ClippedLinear { slope, radius } => {
                if x.abs() < *radius {
                    *slope
                } else {
                    0.0
                }
            }
            Shape::NegQuadratic { a } => -a * x,
            Shape::DoubleWell { sep, depth } => -depth * (x.abs() - sep) * x.signum(),
            Shape::Zero => 0.0,
            Shape::Concavified(hull) => hull.d1(x),
        }
    }

    pub fn d2(&self, x: f64) -> f64 {
        match &self.shape {
            Shape::Perceptron { kappa, epsilon } => {
                let s = sigmoid((kappa - x) / epsilon);
                -s * (1.0 - s) / epsilon
            }
            Shape::ClippedLinear { .. } | Shape::Zero => 0.0,
            Shape::NegQuadratic { a } => -a,
            Shape::DoubleWell { depth, .. } => -depth,
            Shape::Concavified(hull) => hull.d2(x),
        }
    }

    /// Bound on `|h'|`; infinite for quadratic growth.
    pub fn lipschitz(&self) -> f64 {
        match &self.shape {
            Shape::Perceptron { .. } => 1.0,
            Shape::ClippedLinear { slope, .. } => slope.abs(),
            Shape::NegQuadratic { a } => {
                if *a == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            Shape::DoubleWell { .. } => f64::INFINITY,
            Shape::Zero => 0.0,
            Shape::Concavified(hull) => hull.base.lipschitz(),
        }
    }

    /// `sup h''`, counting convex kinks as `+inf`.
    pub fn sup_d2(&self) -> f64 {
        match &self.shape {
            Shape::Perceptron { .. } | Shape::ClippedLinear { .. } | Shape::Zero => 0.0,
            Shape::NegQuadratic { a } => -a,
            Shape::DoubleWell { sep, depth } => {
                if *sep > 0.0 {
                    f64::INFINITY
                } else {
                    -depth
                }
            }
            Shape::Concavified(hull) => hull.base.sup_d2().min(1.0 / hull.c),
        }
    }

    pub fn upper_bound(&self) -> f64 {
        match &self.shape {
            Shape::Perceptron { .. } | Shape::NegQuadratic { .. } | Shape::DoubleWell { .. } | Shape::Zero => 0.0,
            Shape::ClippedLinear { slope, radius } => slope.abs() * radius,
            Shape::Concavified(hull) => hull.base.upper_bound(),
        }
    }

    pub fn label(&self) -> String {
        self.to_string()
    }

    pub fn is_concavified(&self) -> bool {
        matches!(self.shape, Shape::Concavified(_))
    }

    /// Largest `|u|` a maximiser of `h(x+u) - u^2/2c` can have, plus margin.
    fn search_radius(&self, c: f64, x: f64) -> f64 {
        let from_lip = self.lipschitz() * c;
        let from_bound = (2.0 * c * (self.upper_bound() - self.eval(x))).max(0.0).sqrt();
        from_lip.min(from_bound) + 1.0
    }
}

impl fmt::Display for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.shape {
            Shape::Perceptron { kappa, epsilon } => write!(f, "perceptron(kappa={kappa:?}, epsilon={epsilon:?})"),
            Shape::ClippedLinear { slope, radius } => write!(f, "clipped_linear(slope={slope:?}, radius={radius:?})"),
            Shape::NegQuadratic { a } => write!(f, "neg_quadratic(a={a:?})"),
            Shape::DoubleWell { sep, depth } => write!(f, "double_well(sep={sep:?}, depth={depth:?})"),
            Shape::Zero => write!(f, "zero"),
            Shape::Concavified(hull) => write!(f, "concavified[c={:?}]({})", hull.c, hull.base),
        }
    }
}

/// Upper concave envelope of `h(x) - x^2/2c` on a grid, tilted back.
#[derive(Debug)]
struct Hull {
    base: TestFunction,
    c: f64,
    xs: Vec<f64>,
    /// Grid indices of hull vertices, increasing.
    vertices: Vec<usize>,
    /// Tilted values `h(x) - x^2/2c` on the grid.
    tilted: Vec<f64>,
}

impl Hull {
    /// Vertex pair `(a, b)` bracketing `x`, or `None` outside the grid.
    fn segment(&self, x: f64) -> Option<(usize, usize)> {
        let first = self.xs[0];
        let last = *self.xs.last().unwrap();
        if !(x >= first && x <= last) {
            return None;
        }
        let k = self.vertices.partition_point(|&i| self.xs[i] <= x);
        let k = k.clamp(1, self.vertices.len() - 1);
        Some((self.vertices[k - 1], self.vertices[k]))
    }

    fn bridge(&self, x: f64) -> Option<(f64, f64)> {
        match self.segment(x) {
            Some((a, b)) if b > a + 1 => {
                let slope = (self.tilted[b] - self.tilted[a]) / (self.xs[b] - self.xs[a]);
                Some((self.tilted[a] + slope * (x - self.xs[a]), slope))
            }
            _ => None,
        }
    }

    fn eval(&self, x: f64) -> f64 {
        match self.bridge(x) {
            Some((g, _)) => g + x * x / (2.0 * self.c),
            None => self.base.eval(x),
        }
    }

    fn d1(&self, x: f64) -> f64 {
        match self.bridge(x) {
            Some((_, slope)) => slope + x / self.c,
            None => self.base.d1(x),
        }
    }

    fn d2(&self, x: f64) -> f64 {
        match self.bridge(x) {
            Some(_) => 1.0 / self.c,
            None => self.base.d2(x),
        }
    }
}

/// Smallest `h_c >= h` with `h_c - x^2/2c` concave, sampled on `grid`.
pub fn concavify(h: &TestFunction, c: f64, grid: &[f64]) -> Result<TestFunction> {
    if !(c > 0.0) {
        return Err(Error::Domain(format!("concavify needs c > 0, got {c}")));
    }
    if grid.len() < 3 || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Domain("concavify needs an increasing grid of >= 3 points".into()));
    }
    let base = match &h.shape {
        Shape::Concavified(hull) if hull.c == c => hull.base.clone(),
        _ => h.clone(),
    };
    let tilted: Vec<f64> = grid.iter().map(|&x| base.eval(x) - x * x / (2.0 * c)).collect();
    if tilted.iter().any(|v| !v.is_finite()) {
        return Err(Error::Evaluation(format!("{base} is not finite on the hull grid")));
    }
    let mut vertices: Vec<usize> = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        while vertices.len() >= 2 {
            let a = vertices[vertices.len() - 2];
            let b = vertices[vertices.len() - 1];
            let cross = (grid[b] - grid[a]) * (tilted[i] - tilted[a]) - (tilted[b] - tilted[a]) * (grid[i] - grid[a]);
            if cross > 0.0 {
                vertices.pop();
            } else {
                break;
            }
        }
        vertices.push(i);
    }
    let n = grid.len();
    if vertices[1] != 1 || vertices[vertices.len() - 2] != n - 2 {
        return Err(Error::WidenGrid(format!(
            "hull of {base} touches the grid edge on [{}, {}]",
            grid[0],
            grid[n - 1]
        )));
    }
    Ok(TestFunction {
        shape: Shape::Concavified(Arc::new(Hull { base, c, xs: grid.to_vec(), vertices, tilted })),
    })
}

/// `h_c(x) - h(x)`; zero exactly on the contact set.
pub fn envelope_gap(h: &TestFunction, h_c: &TestFunction, x: f64) -> f64 {
    h_c.eval(x) - h.eval(x)
}

const INV_PHI: f64 = 0.618_033_988_749_894_8;

fn golden_max(obj: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = obj(x1);
    let mut f2 = obj(x2);
    while b - a > tol {
        // ties move left so the smaller maximiser wins
        if f1 >= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = obj(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = obj(x2);
        }
    }
    0.5 * (a + b)
}

/// Maximiser `u*` of `h(x+u) - u^2/2c`.
pub fn moreau_argmax(h: &TestFunction, c: f64, x: f64) -> Result<f64> {
    if !(c > 0.0) {
        return Err(Error::Domain(format!("envelope needs c > 0, got {c}")));
    }
    let radius = h.search_radius(c, x);
    if !radius.is_finite() {
        return Err(Error::Evaluation(format!("no finite search radius for {h} at x = {x}")));
    }
    let obj = |u: f64| h.eval(x + u) - u * u / (2.0 * c);
    let (lo, hi) = if h.sup_d2() < 1.0 / c {
        (-radius, radius)
    } else {
        // possibly several local maxima: coarse scan, then refine around the first best
        let n = 4001;
        let step = 2.0 * radius / (n - 1) as f64;
        let mut best = (f64::NEG_INFINITY, 0usize);
        for i in 0..n {
            let v = obj(-radius + i as f64 * step);
            if !v.is_finite() {
                return Err(Error::Evaluation(format!("{h} not finite at {}", x - radius + i as f64 * step)));
            }
            if v > best.0 {
                best = (v, i);
            }
        }
        let centre = -radius + best.1 as f64 * step;
        (centre - step, centre + step)
    };
    let mut u = golden_max(obj, lo, hi, 1e-11 * (1.0 + radius));
    // Newton polish on the stationarity condition h'(x+u) = u/c
    for _ in 0..4 {
        let g1 = h.d1(x + u) - u / c;
        let g2 = h.d2(x + u) - 1.0 / c;
        if !(g2 < 0.0) {
            break;
        }
        let next = u - g1 / g2;
        if !(next > lo && next < hi) || obj(next) < obj(u) {
            break;
        }
        u = next;
    }
    let v = obj(u);
    if !v.is_finite() {
        return Err(Error::Evaluation(format!("{h} not finite near x = {x}")));
    }
    Ok(u)
}

/// `sup_u { h(x+u) - u^2/2c }`.
pub fn moreau_terminal(h: &TestFunction, c: f64, x: f64) -> Result<f64> {
    let u = moreau_argmax(h, c, x)?;
    Ok(h.eval(x + u) - u * u / (2.0 * c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
    }

    fn double_well() -> TestFunction {
        TestFunction::double_well(1.0, 1.0).unwrap()
    }

    #[test]
    fn envelope_of_linear() {
        let h = TestFunction::clipped_linear(1.0, 50.0).unwrap();
        assert!((moreau_terminal(&h, 1.0, 0.0).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn envelope_of_quadratic() {
        let h = TestFunction::neg_quadratic(1.0).unwrap();
        assert!((moreau_terminal(&h, 1.0, 2.0).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn envelope_matches_dense_scan() {
        let h = TestFunction::perceptron(-1.0, 1e-2).unwrap();
        let c = 0.5;
        let got = moreau_terminal(&h, c, 0.0).unwrap();
        let mut best = f64::NEG_INFINITY;
        let mut u = -3.0;
        while u <= 3.0 {
            best = best.max(h.eval(u) - u * u / (2.0 * c));
            u += 1e-4;
        }
        // grid oracle is below the true sup by at most O(step^2)
        assert!(got >= best - 1e-12 && got - best < 1e-7, "{got} vs {best}");
    }

    #[test]
    fn nonconvex_envelope_picks_smallest_maximiser() {
        // symmetric wells: the two maximisers at x = 0 are +-u*, the smaller is negative
        let h = double_well();
        let u = moreau_argmax(&h, 10.0, 0.0).unwrap();
        assert!(u < 0.0);
        let v = moreau_terminal(&h, 10.0, 0.0).unwrap();
        let w = h.eval(-u) - u * u / 20.0;
        assert!((v - w).abs() < 1e-10);
    }

    #[test]
    fn perceptron_limits() {
        let h = TestFunction::perceptron(0.5, 1e-4).unwrap();
        for x in [-3.0, 0.0, 0.49, 0.51, 2.0] {
            assert!((h.eval(x) - (x - 0.5f64).min(0.0)).abs() < 1e-4);
        }
        assert_eq!(h.lipschitz(), 1.0);
    }

    #[test]
    fn parses_labels() {
        let h = TestFunction::parse("perceptron(kappa=-1, epsilon=0.02)").unwrap();
        assert_eq!(h.label(), "perceptron(kappa=-1.0, epsilon=0.02)");
        let h = TestFunction::parse("perceptron(-1)").unwrap();
        assert_eq!(h.label(), "perceptron(kappa=-1.0, epsilon=0.01)");
        assert!(TestFunction::parse("clipped_linear").is_ok());
        assert!(TestFunction::parse("nope(1)").is_err());
        assert!(TestFunction::parse("perceptron(kappa=x)").is_err());
        let again = TestFunction::parse(&TestFunction::double_well(2.0, 0.5).unwrap().label()).unwrap();
        assert_eq!(again.label(), "double_well(sep=2.0, depth=0.5)");
    }

    #[test]
    fn concave_functions_are_fixed_by_hull() {
        let grid = linspace(-20.0, 20.0, 4001);
        let h = TestFunction::perceptron(-1.0, 1e-2).unwrap();
        let hc = concavify(&h, 0.5, &grid).unwrap();
        for &x in grid.iter().step_by(37) {
            assert!(envelope_gap(&h, &hc, x).abs() < 1e-12);
        }
        let z = concavify(&TestFunction::zero(), 3.0, &grid).unwrap();
        for &x in grid.iter().step_by(101) {
            assert!(z.eval(x).abs() < 1e-12);
        }
    }

    /// Concave envelope through the discrete double Legendre transform.
    fn legendre_hull(xs: &[f64], g: &[f64], slopes: &[f64], at: f64) -> f64 {
        let conj: Vec<f64> = slopes
            .iter()
            .map(|&p| xs.iter().zip(g).map(|(&x, &v)| v - p * x).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        slopes.iter().zip(&conj).map(|(&p, &s)| p * at + s).fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn double_well_hull_matches_legendre_oracle() {
        let c = 10.0;
        let h = double_well();
        let grid = linspace(-6.0, 6.0, 100_001);
        let hc = concavify(&h, c, &grid).unwrap();
        let g: Vec<f64> = grid.iter().map(|&x| h.eval(x) - x * x / (2.0 * c)).collect();
        let slopes = linspace(-8.0, 8.0, 4001);
        for at in [-3.0, -1.5, -0.9, -0.5, 0.0, 0.3, 0.8, 1.2, 3.0] {
            let oracle = legendre_hull(&grid, &g, &slopes, at) + at * at / (2.0 * c);
            assert!((hc.eval(at) - oracle).abs() < 1e-5, "x={at}: {} vs {oracle}", hc.eval(at));
        }
        assert!(envelope_gap(&h, &hc, 0.0) > 0.1);
        assert!(envelope_gap(&h, &hc, 3.0).abs() < 1e-12);
        assert!(envelope_gap(&h, &hc, -3.0).abs() < 1e-12);
    }

    #[test]
    fn narrow_grid_is_rejected() {
        // the bridge over the barrier reaches past a grid confined to [-0.5, 0.5]
        let grid = linspace(-0.5, 0.5, 101);
        assert!(matches!(concavify(&double_well(), 10.0, &grid), Err(Error::WidenGrid(_))));
    }

    #[test]
    fn hull_is_idempotent_and_preserves_envelope() {
        let c = 10.0;
        let h = double_well();
        let grid = linspace(-15.0, 15.0, 30_001);
        let hc = concavify(&h, c, &grid).unwrap();
        let hcc = concavify(&hc, c, &grid).unwrap();
        for &x in grid.iter().step_by(997) {
            assert!((hc.eval(x) - hcc.eval(x)).abs() < 1e-12);
        }
        for x in [-2.0, -0.7, 0.0, 0.4, 1.9] {
            let a = moreau_terminal(&h, c, x).unwrap();
            let b = moreau_terminal(&hc, c, x).unwrap();
            assert!((a - b).abs() < 1e-6, "x={x}: {a} vs {b}");
        }
    }

    proptest! {
        #[test]
        fn envelope_is_lipschitz(kappa in -2.0..2.0f64, c in 0.05..5.0f64, x in -5.0..5.0f64, dx in -1.0..1.0f64) {
            let h = TestFunction::perceptron(kappa, 1e-2).unwrap();
            let a = moreau_terminal(&h, c, x).unwrap();
            let b = moreau_terminal(&h, c, x + dx).unwrap();
            prop_assert!((a - b).abs() <= h.lipschitz() * dx.abs() + 1e-9);
        }

        #[test]
        fn envelope_curvature_bounds(kappa in -2.0..2.0f64, c in 0.1..3.0f64, x in -4.0..4.0f64) {
            let h = TestFunction::perceptron(kappa, 0.05).unwrap();
            let e = 1e-3;
            let fm = moreau_terminal(&h, c, x - e).unwrap();
            let f0 = moreau_terminal(&h, c, x).unwrap();
            let fp = moreau_terminal(&h, c, x + e).unwrap();
            let second = (fp - 2.0 * f0 + fm) / (e * e);
            let gamma = 1.0 / c;
            let upper = gamma * h.sup_d2() / (gamma - h.sup_d2());
            prop_assert!(second > -gamma - 1e-3, "{second}");
            prop_assert!(second < upper + 1e-3, "{second}");
        }

        #[test]
        fn envelope_tends_to_h_as_c_vanishes(x in -3.0..3.0f64) {
            let h = TestFunction::perceptron(0.3, 0.1).unwrap();
            let v = moreau_terminal(&h, 1e-6, x).unwrap();
            prop_assert!((v - h.eval(x)).abs() < 1e-5);
        }

        #[test]
        fn envelope_dominates_h(x in -5.0..5.0f64, c in 0.1..5.0f64) {
            for h in [TestFunction::perceptron(-1.0, 1e-2).unwrap(), TestFunction::neg_quadratic(2.0).unwrap(), double_well()] {
                prop_assert!(moreau_terminal(&h, c, x).unwrap() >= h.eval(x) - 1e-12);
            }
        }
    }
}
