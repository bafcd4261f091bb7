//! Backward solve of `f_t + mu/2 f_x^2 + f_xx/2 = 0` with envelope terminal data.
//!
//! On every interval where `mu` is a constant `k` the exponential transform
//! `exp(k f)` solves the heat equation, so each slice is produced directly from
//! the slice at the interval's right end by a Gaussian expectation. The
//! expectation integrates the piecewise-linear interpolant exactly, which keeps
//! the scheme monotone and robust to kinks in the terminal data.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::interp::UniformCubic;
use crate::order_params::{OrderParam, PiecewiseFn};
use crate::stats::{normal_cdf, normal_pdf};
use crate::test_functions::{concavify, moreau_terminal, TestFunction};

pub const DEFAULT_NX: usize = 1025;
pub const DEFAULT_DT: f64 = 1e-3;
pub const REGULARITY_TOL: f64 = 1e-3;
/// Largest Gaussian tail allowed to leave the x-range.
pub const MAX_TAIL: f64 = 1e-8;
/// Shrink factor applied to `c` for derivative data when `h` needs concavifying.
pub const C_SHRINK: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub nx: usize,
    /// Increasing, from 0 to 1, containing every knot of `mu` and `q`.
    pub time_knots: Vec<f64>,
}

/// How far the drift `mu f_x` can carry a path over [0,1].
fn drift_margin(h: &TestFunction, mu: &PiecewiseFn) -> f64 {
    let lip = h.lipschitz();
    if lip.is_finite() {
        lip * mu.integral(0.0, 1.0).abs()
    } else {
        // quadratic growth: the drift pulls paths back towards the maximisers
        0.0
    }
}

/// Increasing times from `start` to 1 through every anchor in `(start, 1)`,
/// with steps of at most `dt`.
pub fn refine_times(start: f64, anchors: &[f64], dt: f64) -> Vec<f64> {
    let mut marks: Vec<f64> = anchors.iter().copied().filter(|&t| t > start && t < 1.0).collect();
    marks.push(start);
    marks.push(1.0);
    marks.sort_by(f64::total_cmp);
    marks.dedup();
    let mut times = vec![start];
    for w in marks.windows(2) {
        let steps = ((w[1] - w[0]) / dt - 1e-9).ceil().max(1.0) as usize;
        for k in 1..=steps {
            times.push(if k == steps { w[1] } else { w[0] + (w[1] - w[0]) * k as f64 / steps as f64 });
        }
    }
    times
}

impl SpaceTimeGrid {
    /// Grid through the knots of `p`, each interval split into steps of at most `dt`.
    pub fn new(x_min: f64, x_max: f64, nx: usize, p: &OrderParam, dt: f64) -> Result<Self> {
        if !(x_max > x_min) || nx < 8 {
            return Err(Error::Domain(format!("bad x-range [{x_min}, {x_max}] with {nx} points")));
        }
        if !(dt > 0.0) {
            return Err(Error::Domain(format!("dt must be positive, got {dt}")));
        }
        let mut anchors: Vec<f64> = p.mu.knots().to_vec();
        anchors.push(p.q);
        let time_knots = refine_times(0.0, &anchors, dt);
        Ok(Self { x_min, x_max, nx, time_knots })
    }

    /// Symmetric range wide enough for the terminal diffusion plus drift.
    /// `nx` is the count for the base width 16 and grows with the drift margin
    /// so the spacing stays put; it is rounded up to an odd count so that the
    /// origin is a node.
    pub fn auto(h: &TestFunction, p: &OrderParam, nx: usize, dt: f64) -> Result<Self> {
        let margin = drift_margin(h, &p.mu);
        let half = 8.0 + margin;
        let nx = nx.max(8);
        let scaled = ((nx - 1) as f64 * half / 8.0).ceil() as usize + 1;
        Self::new(-half, half, scaled | 1, p, dt)
    }

    /// Default resolution.
    pub fn standard(h: &TestFunction, p: &OrderParam) -> Result<Self> {
        Self::auto(h, p, DEFAULT_NX, DEFAULT_DT)
    }

    /// Only the knots themselves; enough for `f(0, .)`.
    pub fn knots_only(h: &TestFunction, p: &OrderParam, nx: usize) -> Result<Self> {
        Self::auto(h, p, nx, f64::INFINITY)
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.nx - 1) as f64
    }

    pub fn x(&self, j: usize) -> f64 {
        self.x_min + j as f64 * self.dx()
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.nx).map(|j| self.x(j)).collect()
    }

    /// Probability that a unit-variance path shifted by `margin` leaves the range.
    pub fn tail_mass(&self, margin: f64) -> f64 {
        normal_cdf(-(self.x_max - margin)) + normal_cdf(self.x_min + margin)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceRegularity {
    pub t: f64,
    pub gamma: f64,
    pub max_abs_fx: f64,
    /// `min (f_xx + gamma)`.
    pub min_curvature_margin: f64,
    pub max_fxx: f64,
    /// Upper curvature bound, when one applies.
    pub fxx_cap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Offender {
    pub t: f64,
    pub x: f64,
    pub kind: &'static str,
    pub excess: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularityReport {
    pub slices: Vec<SliceRegularity>,
    pub lipschitz: f64,
    pub sup_d2: f64,
    pub tol: f64,
    pub fx_violation: bool,
    pub lower_violation: bool,
    pub upper_violation: bool,
    /// Worst node for each violated bound.
    pub worst: Vec<Offender>,
}

impl RegularityReport {
    pub fn passed(&self) -> bool {
        !(self.fx_violation || self.lower_violation || self.upper_violation)
    }

    /// Empirical stand-in for the curvature constant: `max f_xx` over all slices.
    pub fn max_fxx(&self) -> f64 {
        self.slices.iter().map(|s| s.max_fxx).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs_fx(&self) -> f64 {
        self.slices.iter().map(|s| s.max_abs_fx).fold(0.0, f64::max)
    }

    pub fn min_curvature_margin(&self) -> f64 {
        self.slices.iter().map(|s| s.min_curvature_margin).fold(f64::INFINITY, f64::min)
    }

    pub fn summary(&self) -> String {
        let mut out = format!(
            "max|fx| = {:?} (bound {:?}), min(fxx + gamma) = {:?}, max fxx = {:?}, passed = {}",
            self.max_abs_fx(),
            self.lipschitz,
            self.min_curvature_margin(),
            self.max_fxx(),
            self.passed()
        );
        for o in &self.worst {
            let _ = write!(out, "; {} violated by {:?} at t = {:?}, x = {:?}", o.kind, o.excess, o.t, o.x);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeLoc {
    pub index: usize,
    pub weight: f64,
}

/// Which stored field to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    F,
    Fx,
    Fxx,
}

impl Field {
    pub fn from_order(order: u8) -> Result<Self> {
        match order {
            0 => Ok(Field::F),
            1 => Ok(Field::Fx),
            2 => Ok(Field::Fxx),
            _ => Err(Error::Domain(format!("derivative order must be 0, 1 or 2, got {order}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PdeSolution {
    pub grid: SpaceTimeGrid,
    pub order_param: OrderParam,
    /// The parameter whose `gamma` matches `fx`, `fxx`; differs from
    /// `order_param` only in a slightly smaller `c` when `h` was concavified.
    pub drift_param: OrderParam,
    pub test_fn: String,
    pub lipschitz: f64,
    pub sup_d2: f64,
    pub concavified: bool,
    pub regularity: RegularityReport,
    f: Vec<f64>,
    fx: Vec<f64>,
    fxx: Vec<f64>,
}

/// Weights of the Gaussian `N(0, s^2)` against grid hat functions, offsets `-K..=K`.
///
/// The hat interpolant adds variance `dx^2/6`, which is taken out of `s^2` so that
/// second moments are exact; all weights are non-negative.
pub(crate) fn hat_weights(s: f64, dx: f64) -> Vec<f64> {
    let hat_var = dx * dx / 6.0;
    if s * s <= hat_var {
        let w = s * s / (2.0 * dx * dx);
        return vec![w, 1.0 - 2.0 * w, w];
    }
    let se = (s * s - hat_var).sqrt();
    let a = dx / se;
    let half = (9.0 / a).ceil() as usize + 1;
    // upper tails, accurate far out
    let tail: Vec<f64> = (0..=half + 1).map(|i| normal_cdf(-(i as f64) * a)).collect();
    let dens: Vec<f64> = (0..=half + 1).map(|i| normal_pdf(i as f64 * a)).collect();
    let mass = |i: usize| tail[i] - tail[i + 1];
    let mut right = vec![0.0; half + 1];
    for (k, w) in right.iter_mut().enumerate() {
        // falling part on [k a, (k+1) a]
        let z1 = (k + 1) as f64 * a;
        let mut v = (z1 * mass(k) - (dens[k] - dens[k + 1])) / a;
        // rising part on [(k-1) a, k a]
        if k >= 1 {
            let z0 = (k - 1) as f64 * a;
            v += ((dens[k - 1] - dens[k]) - z0 * mass(k - 1)) / a;
        } else {
            // mirror of the falling part
            v *= 2.0;
        }
        *w = v.max(0.0);
    }
    let mut out: Vec<f64> = right.iter().rev().chain(&right[1..]).copied().collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|w| *w /= total);
    out
}

/// One backward sweep; returns slices aligned with `times`.
fn propagate(terminal: Vec<f64>, mu: &PiecewiseFn, grid: &SpaceTimeGrid, times: &[f64]) -> Vec<Vec<f64>> {
    let nt = times.len();
    let nx = grid.nx;
    let mut slices: Vec<Vec<f64>> = vec![Vec::new(); nt];
    slices[nt - 1] = terminal;
    let dx = grid.dx();
    let knots = mu.knots();
    for k in (0..mu.intervals()).rev() {
        let (a, b) = (knots[k], knots[k + 1]);
        let kappa = mu.values()[k];
        let ib = times.partition_point(|&t| t < b);
        let ia = times.partition_point(|&t| t < a);
        if ia == ib {
            continue;
        }
        let pad = (hat_weights((b - a).sqrt(), dx).len() - 1) / 2;
        let padded: Vec<f64> = {
            let source = &slices[ib];
            let interp = UniformCubic::new(grid.x_min, dx, source);
            (0..nx + 2 * pad)
                .map(|i| {
                    if i < pad || i >= nx + pad {
                        interp.eval(grid.x_min + (i as f64 - pad as f64) * dx)
                    } else {
                        source[i - pad]
                    }
                })
                .collect()
        };
        let tilted = if kappa.abs() < 1e-12 {
            None
        } else {
            let top = padded.iter().map(|&f| kappa * f).fold(f64::NEG_INFINITY, f64::max);
            Some((top, padded.iter().map(|&f| (kappa * f - top).exp()).collect::<Vec<f64>>()))
        };
        for i in ia..ib {
            let weights = hat_weights((b - times[i]).sqrt(), dx);
            let half = (weights.len() - 1) / 2;
            let offset = pad - half;
            slices[i] = (0..nx)
                .into_par_iter()
                .map(|j| {
                    let window = &padded[j + offset..j + offset + weights.len()];
                    match &tilted {
                        None => dot(&weights, window),
                        Some((top, u)) => {
                            let sum = dot(&weights, &u[j + offset..j + offset + weights.len()]);
                            if sum > 1e-250 && sum.is_finite() {
                                (top + sum.ln()) / kappa
                            } else {
                                local_log_mean(&weights, window, kappa)
                            }
                        }
                    }
                })
                .collect();
        }
    }
    slices
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(1/k) log sum w exp(k f)` with a per-window shift.
fn local_log_mean(weights: &[f64], f: &[f64], kappa: f64) -> f64 {
    let top = weights
        .iter()
        .zip(f)
        .filter(|(w, _)| **w > 0.0)
        .map(|(_, &v)| kappa * v)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = weights.iter().zip(f).map(|(w, &v)| w * (kappa * v - top).exp()).sum();
    (top + sum.ln()) / kappa
}

fn first_difference(y: &[f64], dx: f64) -> Vec<f64> {
    let n = y.len();
    let mut d = vec![0.0; n];
    for j in 1..n - 1 {
        d[j] = (y[j + 1] - y[j - 1]) / (2.0 * dx);
    }
    d[0] = (-3.0 * y[0] + 4.0 * y[1] - y[2]) / (2.0 * dx);
    d[n - 1] = (3.0 * y[n - 1] - 4.0 * y[n - 2] + y[n - 3]) / (2.0 * dx);
    d
}

fn second_difference(y: &[f64], dx: f64) -> Vec<f64> {
    let n = y.len();
    let mut d = vec![0.0; n];
    for j in 1..n - 1 {
        d[j] = (y[j + 1] - 2.0 * y[j] + y[j - 1]) / (dx * dx);
    }
    d[0] = d[1];
    d[n - 1] = d[n - 2];
    d
}

fn terminal_slice(h: &TestFunction, c: f64, xs: &[f64]) -> Result<Vec<f64>> {
    xs.par_iter().map(|&x| moreau_terminal(h, c, x)).collect()
}

/// Solve on `grid`; fails if the regularity bounds are violated.
pub fn solve_parisi(h: &TestFunction, p: &OrderParam, grid: &SpaceTimeGrid) -> Result<PdeSolution> {
    let sol = solve_unchecked(h, p, grid)?;
    if sol.regularity.passed() {
        Ok(sol)
    } else {
        Err(Error::SolverFailure {
            msg: format!("regularity bounds violated for {h}: {}", sol.regularity.summary()),
            report: Box::new(sol.regularity.clone()),
        })
    }
}

/// As [`solve_parisi`] but returns the solution even when the report fails.
pub fn solve_unchecked(h: &TestFunction, p: &OrderParam, grid: &SpaceTimeGrid) -> Result<PdeSolution> {
    let membership = p.validate_membership(false);
    if !membership.is_valid() {
        return Err(Error::Membership(format!("{:?}", membership.violations)));
    }
    if grid.nx < 8 || grid.time_knots.first() != Some(&0.0) || grid.time_knots.last() != Some(&1.0) {
        return Err(Error::Domain("grid must span t in [0,1] with at least 8 x-points".into()));
    }
    for &k in p.mu.knots().iter().chain(std::iter::once(&p.q)) {
        if !grid.time_knots.iter().any(|&t| t == k) {
            return Err(Error::Domain(format!("time grid is missing the knot {k}")));
        }
    }
    let margin = drift_margin(h, &p.mu);
    let tail = grid.tail_mass(margin);
    if tail > MAX_TAIL {
        return Err(Error::WidenGrid(format!(
            "Gaussian mass {tail:e} escapes [{}, {}] (drift margin {margin})",
            grid.x_min, grid.x_max
        )));
    }
    let xs = grid.xs();
    let c = p.c;
    let needs_hull = h.sup_d2() >= 1.0 / c;
    let (h_used, drift_param) = if needs_hull {
        let reach = |x: f64| {
            let gap = (2.0 * c * (h.upper_bound() - h.eval(x))).max(0.0).sqrt();
            gap.min(h.lipschitz() * c)
        };
        let radius = reach(grid.x_min).max(reach(grid.x_max)) + 2.0;
        let lo = grid.x_min - radius;
        let hi = grid.x_max + radius;
        let n = (((hi - lo) / (grid.dx() / 8.0)).ceil() as usize + 1).max(1001);
        let hull_grid: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
        let hull = concavify(h, c, &hull_grid)?;
        let dp = OrderParam::unchecked(p.mu.clone(), c * (1.0 - C_SHRINK), p.q);
        (hull, dp)
    } else {
        (h.clone(), p.clone())
    };

    let times = &grid.time_knots;
    let f_slices = propagate(terminal_slice(&h_used, c, &xs)?, &p.mu, grid, times);
    let deriv_slices = if needs_hull {
        propagate(terminal_slice(&h_used, drift_param.c, &xs)?, &p.mu, grid, times)
    } else {
        f_slices.clone()
    };
    let dx = grid.dx();
    let nx = grid.nx;
    let nt = times.len();
    let mut f = Vec::with_capacity(nt * nx);
    let mut fx = Vec::with_capacity(nt * nx);
    let mut fxx = Vec::with_capacity(nt * nx);
    for (fs, ds) in f_slices.iter().zip(&deriv_slices) {
        if fs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Evaluation(format!("non-finite values while solving for {h}")));
        }
        f.extend_from_slice(fs);
        fx.extend(first_difference(ds, dx));
        fxx.extend(second_difference(ds, dx));
    }
    let mut sol = PdeSolution {
        grid: grid.clone(),
        order_param: p.clone(),
        drift_param,
        test_fn: h.label(),
        lipschitz: h.lipschitz(),
        sup_d2: h_used.sup_d2(),
        concavified: needs_hull,
        regularity: RegularityReport {
            slices: Vec::new(),
            lipschitz: 0.0,
            sup_d2: 0.0,
            tol: REGULARITY_TOL,
            fx_violation: false,
            lower_violation: false,
            upper_violation: false,
            worst: Vec::new(),
        },
        f,
        fx,
        fxx,
    };
    sol.regularity = check_regularity(&sol);
    Ok(sol)
}

/// Evaluate the three bounds on every stored slice.
pub fn check_regularity(sol: &PdeSolution) -> RegularityReport {
    check_regularity_with(sol, REGULARITY_TOL)
}

pub fn check_regularity_with(sol: &PdeSolution, tol: f64) -> RegularityReport {
    let nx = sol.grid.nx;
    let lip = sol.lipschitz;
    let sup = sol.sup_d2;
    let c_inv = 1.0 / sol.drift_param.c;
    let mut slices = Vec::with_capacity(sol.times().len());
    let mut worst: [Option<Offender>; 3] = [None, None, None];
    let mut note = |slot: usize, o: Offender| {
        if worst[slot].as_ref().is_none_or(|w| o.excess > w.excess) {
            worst[slot] = Some(o);
        }
    };
    for (i, &t) in sol.times().iter().enumerate() {
        let gamma = sol.drift_param.gamma(t);
        let cap = if sup < c_inv && gamma > sup { Some(gamma * sup / (gamma - sup)) } else { None };
        let fx = &sol.fx[i * nx..(i + 1) * nx];
        let fxx = &sol.fxx[i * nx..(i + 1) * nx];
        let mut s = SliceRegularity {
            t,
            gamma,
            max_abs_fx: 0.0,
            min_curvature_margin: f64::INFINITY,
            max_fxx: f64::NEG_INFINITY,
            fxx_cap: cap,
        };
        for j in 0..nx {
            let x = sol.grid.x(j);
            let a = fx[j].abs();
            if !(a <= s.max_abs_fx) {
                s.max_abs_fx = if a.is_nan() { f64::INFINITY } else { a };
            }
            let m = fxx[j] + gamma;
            if !(m >= s.min_curvature_margin) {
                s.min_curvature_margin = if m.is_nan() { f64::NEG_INFINITY } else { m };
            }
            if !(fxx[j] <= s.max_fxx) {
                s.max_fxx = if fxx[j].is_nan() { f64::INFINITY } else { fxx[j] };
            }
            if !(a <= lip + tol) {
                note(0, Offender { t, x, kind: "|fx| <= lip(h)", excess: a - lip });
            }
            if !(m > -tol) {
                note(1, Offender { t, x, kind: "fxx > -gamma", excess: -m });
            }
            if let Some(cap) = cap {
                if !(fxx[j] <= cap + tol) {
                    note(2, Offender { t, x, kind: "fxx <= curvature cap", excess: fxx[j] - cap });
                }
            }
        }
        slices.push(s);
    }
    let [w0, w1, w2] = worst;
    RegularityReport {
        slices,
        lipschitz: lip,
        sup_d2: sup,
        tol,
        fx_violation: w0.is_some(),
        lower_violation: w1.is_some(),
        upper_violation: w2.is_some(),
        worst: [w0, w1, w2].into_iter().flatten().collect(),
    }
}

impl PdeSolution {
    pub fn times(&self) -> &[f64] {
        &self.grid.time_knots
    }

    fn data(&self, field: Field) -> &[f64] {
        match field {
            Field::F => &self.f,
            Field::Fx => &self.fx,
            Field::Fxx => &self.fxx,
        }
    }

    pub fn slice(&self, field: Field, i: usize) -> &[f64] {
        let nx = self.grid.nx;
        &self.data(field)[i * nx..(i + 1) * nx]
    }

    /// Raw mutable access; callers must rerun [`check_regularity`] afterwards.
    pub fn slice_mut(&mut self, field: Field, i: usize) -> &mut [f64] {
        let nx = self.grid.nx;
        let data = match field {
            Field::F => &mut self.f,
            Field::Fx => &mut self.fx,
            Field::Fxx => &mut self.fxx,
        };
        &mut data[i * nx..(i + 1) * nx]
    }

    /// Index of the last stored time `<= t`, clamped to `[0, nt-2]`.
    pub fn time_index(&self, t: f64) -> usize {
        let times = self.times();
        times.partition_point(|&s| s <= t).saturating_sub(1).min(times.len() - 2)
    }

    /// `f`, `fx` or `fxx` at `(t, x)` by bilinear interpolation.
    pub fn f_at(&self, t: f64, x: f64, order: u8) -> Result<f64> {
        let field = Field::from_order(order)?;
        if !(0.0..=1.0).contains(&t) || !(self.grid.x_min..=self.grid.x_max).contains(&x) {
            return Err(Error::Domain(format!(
                "({t}, {x}) is outside the grid [0,1] x [{}, {}]; refusing to extrapolate",
                self.grid.x_min, self.grid.x_max
            )));
        }
        Ok(self.at(field, t, x))
    }

    /// Bracketing slice and linear weight for time `t`.
    pub fn locate(&self, t: f64) -> TimeLoc {
        let i = self.time_index(t);
        let times = self.times();
        let w = ((t - times[i]) / (times[i + 1] - times[i])).clamp(0.0, 1.0);
        TimeLoc { index: i, weight: w }
    }

    /// Bilinear lookup with `x` clamped to the grid; no checks.
    pub fn at(&self, field: Field, t: f64, x: f64) -> f64 {
        self.at_loc(field, self.locate(t), x)
    }

    pub fn at_loc(&self, field: Field, loc: TimeLoc, x: f64) -> f64 {
        let lo = self.at_slice(field, loc.index, x);
        if loc.weight == 0.0 {
            return lo;
        }
        let hi = self.at_slice(field, loc.index + 1, x);
        lo + loc.weight * (hi - lo)
    }

    /// `f` with cubic interpolation in `x`, linear in `t`.
    pub fn f_cubic(&self, t: f64, x: f64) -> f64 {
        let loc = self.locate(t);
        let dx = self.grid.dx();
        let lo = UniformCubic::new(self.grid.x_min, dx, self.slice(Field::F, loc.index)).eval(x);
        if loc.weight == 0.0 {
            return lo;
        }
        let hi = UniformCubic::new(self.grid.x_min, dx, self.slice(Field::F, loc.index + 1)).eval(x);
        lo + loc.weight * (hi - lo)
    }

    pub fn in_range(&self, x: f64) -> bool {
        x >= self.grid.x_min && x <= self.grid.x_max
    }

    /// Linear interpolation within slice `i`.
    pub fn at_slice(&self, field: Field, i: usize, x: f64) -> f64 {
        let nx = self.grid.nx;
        let pos = ((x - self.grid.x_min) / self.grid.dx()).clamp(0.0, (nx - 1) as f64);
        let j = (pos as usize).min(nx - 2);
        let u = pos - j as f64;
        let s = self.slice(field, i);
        s[j] + u * (s[j + 1] - s[j])
    }

    /// Third derivative by differencing the stored `fxx`.
    pub fn fxxx_at(&self, t: f64, x: f64) -> f64 {
        let dx = self.grid.dx();
        (self.at(Field::Fxx, t, x + dx) - self.at(Field::Fxx, t, x - dx)) / (2.0 * dx)
    }

    /// `f(0, 0)`.
    pub fn value_at_origin(&self) -> f64 {
        UniformCubic::new(self.grid.x_min, self.grid.dx(), self.slice(Field::F, 0)).eval(0.0)
    }

    /// Header text followed by little-endian `f64` arrays `t, f, fx, fxx`.
    pub fn write_binary(&self, path: &Path) -> Result<String> {
        let payload = self.payload();
        let digest = hex::encode(Sha256::digest(&payload));
        let mut header = String::new();
        let _ = writeln!(header, "# exproj pde solution");
        let _ = writeln!(header, "test_fn = {}", self.test_fn);
        let _ = writeln!(header, "nx = {}", self.grid.nx);
        let _ = writeln!(header, "nt = {}", self.times().len());
        let _ = writeln!(header, "x_min = {:?}", self.grid.x_min);
        let _ = writeln!(header, "x_max = {:?}", self.grid.x_max);
        let _ = writeln!(header, "concavified = {}", self.concavified);
        header.push_str(&self.order_param.to_config_block());
        let _ = writeln!(header, "sha256 = {digest}");
        header.push_str("---\n");
        let mut file = std::fs::File::create(path)?;
        file.write_all(header.as_bytes())?;
        file.write_all(&payload)?;
        Ok(digest)
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * (self.times().len() + 3 * self.f.len()));
        for v in self.times().iter().chain(&self.f).chain(&self.fx).chain(&self.fxx) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Reads the arrays written by [`write_binary`](Self::write_binary), verifying the checksum.
    pub fn read_binary_arrays(path: &Path) -> Result<BinaryDump> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let marker = b"---\n";
        let split = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .ok_or_else(|| Error::Parse("missing header terminator".into()))?;
        let header = std::str::from_utf8(&bytes[..split]).map_err(|e| Error::Parse(e.to_string()))?;
        let payload = &bytes[split + marker.len()..];
        let field = |key: &str| -> Result<String> {
            header
                .lines()
                .find_map(|l| l.split_once('=').filter(|(k, _)| k.trim() == key).map(|(_, v)| v.trim().to_string()))
                .ok_or_else(|| Error::Parse(format!("header lacks {key}")))
        };
        let want = field("sha256")?;
        let got = hex::encode(Sha256::digest(payload));
        if want != got {
            return Err(Error::Parse(format!("checksum mismatch: header {want}, payload {got}")));
        }
        let nx: usize = field("nx")?.parse().map_err(|_| Error::Parse("bad nx".into()))?;
        let nt: usize = field("nt")?.parse().map_err(|_| Error::Parse("bad nt".into()))?;
        let vals: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if vals.len() != nt + 3 * nt * nx {
            return Err(Error::Parse("payload length does not match nx, nt".into()));
        }
        let block = nt * nx;
        Ok(BinaryDump {
            header: header.to_string(),
            times: vals[..nt].to_vec(),
            f: vals[nt..nt + block].to_vec(),
            fx: vals[nt + block..nt + 2 * block].to_vec(),
            fxx: vals[nt + 2 * block..].to_vec(),
        })
    }

    /// CSV rows `t,x,f,fx,fxx` for the stored slices nearest to `at_times`.
    pub fn write_csv_slices(&self, path: &Path, at_times: &[f64]) -> Result<()> {
        let mut out = String::from("t,x,f,fx,fxx\n");
        for &t in at_times {
            let times = self.times();
            let i = times
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
                .map(|(i, _)| i)
                .unwrap_or(0);
            let (f, fx, fxx) = (self.slice(Field::F, i), self.slice(Field::Fx, i), self.slice(Field::Fxx, i));
            for j in 0..self.grid.nx {
                let _ = writeln!(out, "{:?},{:?},{:?},{:?},{:?}", times[i], self.grid.x(j), f[j], fx[j], fxx[j]);
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BinaryDump {
    pub header: String,
    pub times: Vec<f64>,
    pub f: Vec<f64>,
    pub fx: Vec<f64>,
    pub fxx: Vec<f64>,
}
