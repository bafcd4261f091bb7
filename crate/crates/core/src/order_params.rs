//! Piecewise-constant order parameters `(mu, c)` and the multiplier
//! `gamma(t) = 1 / (c + int_t^1 mu)`.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Right-open step function on `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseFn {
    knots: Vec<f64>,
    values: Vec<f64>,
}

impl PiecewiseFn {
    pub fn new(knots: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 || values.len() + 1 != knots.len() {
            return Err(Error::Domain(format!(
                "need k+1 knots for k values, got {} knots and {} values",
                knots.len(),
                values.len()
            )));
        }
        if knots[0] != 0.0 || *knots.last().unwrap() != 1.0 {
            return Err(Error::Domain("knots must start at 0 and end at 1".into()));
        }
        if knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Domain("knots must be strictly increasing".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("values must be finite".into()));
        }
        Ok(Self { knots, values })
    }

    pub fn constant(value: f64) -> Self {
        Self { knots: vec![0.0, 1.0], values: vec![value] }
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    /// Zero on `[0, q)` followed by `values.len()` equal intervals on `[q, 1)`.
    pub fn flat_then_uniform(q: f64, values: &[f64]) -> Result<Self> {
        if !(0.0..1.0).contains(&q) || values.is_empty() {
            return Err(Error::Domain(format!("bad flat prefix q={q} or empty values")));
        }
        let k = values.len();
        let mut knots = Vec::with_capacity(k + 2);
        let mut vals = Vec::with_capacity(k + 1);
        knots.push(0.0);
        if q > 0.0 {
            knots.push(q);
            vals.push(0.0);
        }
        for i in 1..=k {
            knots.push(if i == k { 1.0 } else { q + (1.0 - q) * i as f64 / k as f64 });
        }
        vals.extend_from_slice(values);
        Self::new(knots, vals)
    }

    /// Indicator of `[a, b)` times `height`.
    pub fn indicator(a: f64, b: f64, height: f64) -> Result<Self> {
        if !(0.0 <= a && a < b && b <= 1.0) {
            return Err(Error::Domain(format!("bad indicator range [{a},{b})")));
        }
        let mut knots = vec![0.0];
        let mut vals = Vec::new();
        if a > 0.0 {
            knots.push(a);
            vals.push(0.0);
        }
        knots.push(b);
        vals.push(height);
        if b < 1.0 {
            knots.push(1.0);
            vals.push(0.0);
        }
        Self::new(knots, vals)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn intervals(&self) -> usize {
        self.values.len()
    }

    /// Index of the interval containing `t`; `t = 1` maps to the last one.
    pub fn interval_of(&self, t: f64) -> usize {
        let k = self.values.len();
        // first knot strictly greater than t, minus one
        let idx = self.knots.partition_point(|&x| x <= t);
        idx.saturating_sub(1).min(k - 1)
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.values[self.interval_of(t)]
    }

    /// Exact integral over `[a, b]`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        let (lo, hi, sign) = if a <= b { (a, b, 1.0) } else { (b, a, -1.0) };
        let mut acc = 0.0;
        for (i, v) in self.values.iter().enumerate() {
            let l = self.knots[i].max(lo);
            let r = self.knots[i + 1].min(hi);
            if r > l {
                acc += v * (r - l);
            }
        }
        sign * acc
    }

    pub fn l1_norm(&self) -> f64 {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| v.abs() * (self.knots[i + 1] - self.knots[i]))
            .sum()
    }

    /// Same function with an extra breakpoint at `t`.
    pub fn refine_at(&self, t: f64) -> Self {
        if t <= 0.0 || t >= 1.0 || self.knots.iter().any(|&k| k == t) {
            return self.clone();
        }
        let i = self.interval_of(t);
        let mut knots = self.knots.clone();
        let mut values = self.values.clone();
        knots.insert(i + 1, t);
        values.insert(i + 1, values[i]);
        Self { knots, values }
    }

    /// Pointwise `self + s * other` on the merged knot set.
    pub fn axpy(&self, s: f64, other: &PiecewiseFn) -> Self {
        let mut knots: Vec<f64> = self.knots.iter().chain(other.knots.iter()).copied().collect();
        knots.sort_by(f64::total_cmp);
        knots.dedup();
        let values = knots
            .windows(2)
            .map(|w| {
                let mid = 0.5 * (w[0] + w[1]);
                self.eval(mid) + s * other.eval(mid)
            })
            .collect();
        Self { knots, values }
    }

    /// Same function with adjacent equal values fused into one interval.
    pub fn merged(&self) -> Self {
        let mut knots = vec![0.0];
        let mut values: Vec<f64> = Vec::new();
        for (i, &v) in self.values.iter().enumerate() {
            if values.last() == Some(&v) {
                *knots.last_mut().unwrap() = self.knots[i + 1];
            } else {
                values.push(v);
                knots.push(self.knots[i + 1]);
            }
        }
        Self { knots, values }
    }

    pub fn is_nonnegative(&self) -> bool {
        self.values.iter().all(|&v| v >= 0.0)
    }

    pub fn is_nondecreasing(&self) -> bool {
        self.values.windows(2).all(|w| w[1] >= w[0])
    }
}

/// `int_t^1 mu(s) ds`, exact for step functions.
pub fn tail_integral(mu: &PiecewiseFn, t: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0,1]")));
    }
    Ok(mu.integral(t, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderParam {
    pub mu: PiecewiseFn,
    pub c: f64,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// `c + int_t^1 mu <= 0` at knot time `t`.
    NonPositiveDenominator { t: f64, value: f64 },
    /// `mu` nonzero on an interval meeting `[0, q]`.
    NonzeroOnPrefix { start: f64, value: f64 },
    /// Negative value where the caller requires `mu >= 0`.
    Negative { start: f64, value: f64 },
    NonPositiveC(f64),
    PrefixOutOfRange(f64),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MembershipReport {
    pub violations: Vec<Violation>,
}

impl MembershipReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl OrderParam {
    pub fn new(mu: PiecewiseFn, c: f64, q: f64) -> Result<Self> {
        let p = Self { mu, c, q };
        let report = p.validate_membership(false);
        if report.is_valid() {
            Ok(p)
        } else {
            Err(Error::Membership(format!("{:?}", report.violations)))
        }
    }

    /// Constructs without validation; use `validate_membership` afterwards.
    pub fn unchecked(mu: PiecewiseFn, c: f64, q: f64) -> Self {
        Self { mu, c, q }
    }

    pub fn validate_membership(&self, require_nonneg: bool) -> MembershipReport {
        let mut v = Vec::new();
        if !(self.c > 0.0) || !self.c.is_finite() {
            v.push(Violation::NonPositiveC(self.c));
        }
        if !(0.0..1.0).contains(&self.q) {
            v.push(Violation::PrefixOutOfRange(self.q));
        }
        let knots = self.mu.knots();
        // c + tail is affine between knots, so its minimum over [0,1) sits on a knot
        for &t in &knots[..knots.len() - 1] {
            let d = self.c + self.mu.integral(t, 1.0);
            if !(d > 0.0) {
                v.push(Violation::NonPositiveDenominator { t, value: d });
            }
        }
        for (i, &val) in self.mu.values().iter().enumerate() {
            let start = knots[i];
            // the point t = q itself carries no mass, so only intervals starting before q count
            if start < self.q && val != 0.0 {
                v.push(Violation::NonzeroOnPrefix { start, value: val });
            }
            if require_nonneg && val < 0.0 {
                v.push(Violation::Negative { start, value: val });
            }
        }
        MembershipReport { violations: v }
    }

    /// `c + int_t^1 mu`.
    pub fn denominator(&self, t: f64) -> f64 {
        self.c + self.mu.integral(t.clamp(0.0, 1.0), 1.0)
    }

    pub fn gamma(&self, t: f64) -> f64 {
        1.0 / self.denominator(t)
    }

    /// `int_a^b gamma(t) dt` in closed form.
    pub fn gamma_integral(&self, a: f64, b: f64) -> f64 {
        self.piecewise_gamma_integral(a, b, |len, base, slope| {
            let r = slope * len / base;
            if r.abs() < 1e-10 {
                len / base * (1.0 - 0.5 * r)
            } else {
                r.ln_1p() / slope
            }
        })
    }

    /// `int_a^b gamma(t)^2 dt` in closed form.
    pub fn gamma_sq_integral(&self, a: f64, b: f64) -> f64 {
        self.piecewise_gamma_integral(a, b, |len, base, slope| len / (base * (base + slope * len)))
    }

    /// Sums `piece(len, base, slope)` over sub-intervals `[l, r]`, where on
    /// each the denominator is `base + slope * (r - t)`.
    fn piecewise_gamma_integral(&self, a: f64, b: f64, piece: impl Fn(f64, f64, f64) -> f64) -> f64 {
        let (lo, hi) = (a.clamp(0.0, 1.0), b.clamp(0.0, 1.0));
        if hi <= lo {
            return 0.0;
        }
        let knots = self.mu.knots();
        let mut acc = 0.0;
        for (i, &slope) in self.mu.values().iter().enumerate() {
            let l = knots[i].max(lo);
            let r = knots[i + 1].min(hi);
            if r > l {
                acc += piece(r - l, self.denominator(r), slope);
            }
        }
        acc
    }

    /// Knot values strictly increasing past `q` (beyond `slack`) and zero before.
    pub fn strictly_increasing_after_prefix(&self, slack: f64) -> bool {
        let knots = self.mu.knots();
        let vals = self.mu.values();
        let mut tail = Vec::new();
        for (i, &v) in vals.iter().enumerate() {
            if knots[i + 1] <= self.q + 1e-15 {
                if v != 0.0 {
                    return false;
                }
            } else {
                tail.push(v);
            }
        }
        if tail.len() < 2 {
            return tail.first().is_some_and(|&v| v > slack);
        }
        tail[0] > slack && tail.windows(2).all(|w| w[1] > w[0] + slack)
    }

    /// `key = value` lines; floats use the shortest round-trip form.
    pub fn to_config_block(&self) -> String {
        let join = |xs: &[f64]| xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ");
        let mut s = String::new();
        let _ = writeln!(s, "mu.knots = {}", join(self.mu.knots()));
        let _ = writeln!(s, "mu.values = {}", join(self.mu.values()));
        let _ = writeln!(s, "c = {:?}", self.c);
        let _ = writeln!(s, "q = {:?}", self.q);
        s
    }

    pub fn from_config_block(text: &str) -> Result<Self> {
        let mut knots = None;
        let mut values = None;
        let mut c = None;
        let mut q = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("expected key = value, got `{line}`")))?;
            match k.trim() {
                "mu.knots" => knots = Some(parse_list(v)?),
                "mu.values" => values = Some(parse_list(v)?),
                "c" => c = Some(parse_f64(v)?),
                "q" => q = Some(parse_f64(v)?),
                _ => {}
            }
        }
        let missing = |name: &str| Error::Parse(format!("order parameter block lacks `{name}`"));
        let mu = PiecewiseFn::new(knots.ok_or_else(|| missing("mu.knots"))?, values.ok_or_else(|| missing("mu.values"))?)?;
        Ok(Self::unchecked(mu, c.ok_or_else(|| missing("c"))?, q.ok_or_else(|| missing("q"))?))
    }
}

/// `gamma(t)`; errors when the denominator is not positive.
pub fn gamma_at(p: &OrderParam, t: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0,1]")));
    }
    if t == 1.0 {
        return if p.c > 0.0 { Ok(1.0 / p.c) } else { Err(Error::Membership(format!("c = {} <= 0", p.c))) };
    }
    let d = p.denominator(t);
    if d > 0.0 {
        Ok(1.0 / d)
    } else {
        Err(Error::Membership(format!("c + tail = {d} <= 0 at t = {t}")))
    }
}

pub fn validate_membership(p: &OrderParam) -> MembershipReport {
    p.validate_membership(false)
}

pub(crate) fn parse_f64(s: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("`{}`: {e}", s.trim())))
}

pub(crate) fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',').filter(|x| !x.trim().is_empty()).map(parse_f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tail_integral_examples() {
        assert_eq!(tail_integral(&PiecewiseFn::zero(), 0.3).unwrap(), 0.0);
        assert!((tail_integral(&PiecewiseFn::constant(1.0), 0.25).unwrap() - 0.75).abs() < 1e-15);
        let mu = PiecewiseFn::indicator(0.5, 1.0, 2.0).unwrap();
        assert!((tail_integral(&mu, 0.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(tail_integral(&mu, 1.5).is_err());
        assert!(tail_integral(&mu, -0.1).is_err());
    }

    #[test]
    fn gamma_examples() {
        let p = OrderParam::new(PiecewiseFn::zero(), 1.0, 0.0).unwrap();
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(gamma_at(&p, t).unwrap(), 1.0);
        }
        let p = OrderParam::new(PiecewiseFn::indicator(0.5, 1.0, 2.0).unwrap(), 1.0, 0.0).unwrap();
        assert!((gamma_at(&p, 0.0).unwrap() - 0.5).abs() < 1e-15);
        let p = OrderParam::new(PiecewiseFn::constant(1.0), 0.5, 0.0).unwrap();
        assert_eq!(gamma_at(&p, 1.0).unwrap(), 2.0);
        let bad = OrderParam::unchecked(PiecewiseFn::constant(-2.0), 1.0, 0.0);
        assert!(matches!(gamma_at(&bad, 0.0), Err(Error::Membership(_))));
    }

    #[test]
    fn membership_examples() {
        assert!(OrderParam::unchecked(PiecewiseFn::zero(), 1.0, 0.0).validate_membership(true).is_valid());
        let r = OrderParam::unchecked(PiecewiseFn::constant(-2.0), 1.0, 0.0).validate_membership(false);
        assert!(r.violations.iter().any(|v| matches!(v, Violation::NonPositiveDenominator { t, .. } if *t == 0.0)));
        let r = OrderParam::unchecked(PiecewiseFn::indicator(0.0, 0.5, 1.0).unwrap(), 1.0, 0.5).validate_membership(false);
        assert!(r.violations.iter().any(|v| matches!(v, Violation::NonzeroOnPrefix { .. })));
        let r = OrderParam::unchecked(PiecewiseFn::constant(-0.1), 1.0, 0.0).validate_membership(true);
        assert!(r.violations.iter().any(|v| matches!(v, Violation::Negative { .. })));
    }

    #[test]
    fn prefix_boundary_interval_is_allowed() {
        // mu supported on [q,1) is a member of L(q)
        let mu = PiecewiseFn::flat_then_uniform(0.4, &[1.0, 2.0]).unwrap();
        assert!(OrderParam::new(mu, 1.0, 0.4).is_ok());
    }

    #[test]
    fn closed_form_gamma_integrals() {
        // mu = 1, c = 1: int_0^1 dt/(2-t) = ln 2, int_0^1 dt/(2-t)^2 = 1/2
        let p = OrderParam::new(PiecewiseFn::constant(1.0), 1.0, 0.0).unwrap();
        assert!((p.gamma_integral(0.0, 1.0) - 2f64.ln()).abs() < 1e-14);
        assert!((p.gamma_sq_integral(0.0, 1.0) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn config_block_round_trip() {
        let mu = PiecewiseFn::flat_then_uniform(0.3, &[0.1, 0.7, 1.0 / 3.0]).unwrap();
        let p = OrderParam::new(mu, 0.123456789, 0.3).unwrap();
        let back = OrderParam::from_config_block(&p.to_config_block()).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn ogp_flag_examples() {
        let flat = OrderParam::new(PiecewiseFn::zero(), 1.0, 0.0).unwrap();
        assert!(!flat.strictly_increasing_after_prefix(1e-6));
        let inc = OrderParam::new(PiecewiseFn::flat_then_uniform(0.2, &[0.1, 0.2, 0.3]).unwrap(), 1.0, 0.2).unwrap();
        assert!(inc.strictly_increasing_after_prefix(1e-6));
        let pair = OrderParam::new(PiecewiseFn::flat_then_uniform(0.2, &[0.1, 0.2, 0.2]).unwrap(), 1.0, 0.2).unwrap();
        assert!(!pair.strictly_increasing_after_prefix(1e-6));
    }

    fn arb_member() -> impl Strategy<Value = OrderParam> {
        (0.0..0.9f64, prop::collection::vec(0.0..5.0f64, 1..6), 0.01..5.0f64).prop_map(|(q, vals, c)| {
            OrderParam::new(PiecewiseFn::flat_then_uniform(q, &vals).unwrap(), c, q).unwrap()
        })
    }

    proptest! {
        #[test]
        fn gamma_positive_and_nondecreasing(p in arb_member()) {
            let mut prev = 0.0;
            for i in 0..=50 {
                let t = i as f64 / 50.0;
                let g = gamma_at(&p, t).unwrap();
                prop_assert!(g > 0.0);
                prop_assert!(g >= prev * (1.0 - 1e-14));
                prev = g;
            }
            prop_assert_eq!(gamma_at(&p, 1.0).unwrap(), 1.0 / p.c);
        }

        #[test]
        fn mu_recovered_from_inverse_gamma(p in arb_member()) {
            let knots = p.mu.knots();
            for (i, &v) in p.mu.values().iter().enumerate() {
                let (a, b) = (knots[i], knots[i + 1]);
                let rec = (1.0 / gamma_at(&p, a).unwrap() - 1.0 / gamma_at(&p, b).unwrap()) / (b - a);
                prop_assert!((rec - v).abs() < 1e-9 * (1.0 + v.abs()));
            }
        }

        #[test]
        fn gamma_constant_on_prefix(p in arb_member()) {
            let g0 = gamma_at(&p, 0.0).unwrap();
            for i in 0..=10 {
                let t = p.q * i as f64 / 10.0;
                prop_assert!((gamma_at(&p, t).unwrap() - g0).abs() < 1e-12 * g0);
            }
        }

        #[test]
        fn refinement_is_invisible(p in arb_member(), t in 0.01..0.99f64) {
            let r = p.mu.refine_at(t);
            for i in 0..=40 {
                let s = i as f64 / 40.0;
                prop_assert_eq!(r.eval(s), p.mu.eval(s));
                prop_assert!((r.integral(s, 1.0) - p.mu.integral(s, 1.0)).abs() < 1e-13);
            }
        }

        #[test]
        fn merging_undoes_refinement(p in arb_member(), t in 0.01..0.99f64) {
            let m = p.mu.refine_at(t).merged();
            prop_assert_eq!(&m, &p.mu.merged());
            prop_assert!(m.intervals() <= p.mu.intervals());
            for i in 0..=40 {
                let s = i as f64 / 40.0;
                prop_assert_eq!(m.eval(s), p.mu.eval(s));
            }
        }

        #[test]
        fn gamma_integral_matches_quadrature(p in arb_member(), a in 0.0..1.0f64) {
            // Richardson-extrapolated midpoint rule
            let midpoint = |n: usize| {
                let h = (1.0 - a) / n as f64;
                let (mut s1, mut s2) = (0.0, 0.0);
                for i in 0..n {
                    let g = p.gamma(a + (i as f64 + 0.5) * h);
                    s1 += g * h;
                    s2 += g * g * h;
                }
                (s1, s2)
            };
            let (c1, c2) = midpoint(20000);
            let (f1, f2) = midpoint(40000);
            let mid = (4.0 * f1 - c1) / 3.0;
            let mid2 = (4.0 * f2 - c2) / 3.0;
            prop_assert!((p.gamma_integral(a, 1.0) - mid).abs() < 1e-6 * (1.0 + mid));
            prop_assert!((p.gamma_sq_integral(a, 1.0) - mid2).abs() < 1e-6 * (1.0 + mid2));
        }
    }
}
