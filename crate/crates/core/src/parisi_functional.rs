//! The extended functional `F(mu, c) = f(0,0) + (1/2 alpha) int_0^1 gamma`, its
//! first variation in `mu`, and a local minimiser over step-function order
//! parameters with a flat prefix.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::RngExt;
use rayon::prelude::*;

use crate::control_sde::{propagate_law, SdeBundle};
use crate::error::{Error, Result};
use crate::order_params::{OrderParam, PiecewiseFn};
use crate::parisi_pde::{solve_parisi, PdeSolution, SpaceTimeGrid, DEFAULT_NX};
use crate::rng::{stream, Purpose};
use crate::stats::Estimate;
use crate::test_functions::TestFunction;

/// Time step of the grid used for gradients and stationarity profiles.
pub const GRADIENT_DT: f64 = 1e-2;
/// Slack for the strict-increase test in [`no_ogp_check`].
pub const OGP_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FunctionalValue {
    pub total: f64,
    pub pde_part: f64,
    pub entropy_part: f64,
}

impl FunctionalValue {
    fn new(pde_part: f64, entropy_part: f64) -> Self {
        Self { total: pde_part + entropy_part, pde_part, entropy_part }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("alpha must be positive and finite, got {alpha}")))
    }
}

fn check_member(p: &OrderParam) -> Result<()> {
    let report = p.validate_membership(false);
    if report.is_valid() {
        Ok(())
    } else {
        Err(Error::Membership(format!("{:?}", report.violations)))
    }
}

/// `(1/2 alpha) int_0^1 gamma`, integrated interval by interval in closed form.
pub fn entropy_part(p: &OrderParam, alpha: f64) -> f64 {
    p.gamma_integral(0.0, 1.0) / (2.0 * alpha)
}

/// Evaluates on a caller-supplied grid.
pub fn eval_functional(h: &TestFunction, p: &OrderParam, alpha: f64, grid: &SpaceTimeGrid) -> Result<FunctionalValue> {
    check_alpha(alpha)?;
    check_member(p)?;
    let sol = solve_parisi(h, p, grid)?;
    Ok(FunctionalValue::new(sol.value_at_origin(), entropy_part(p, alpha)))
}

/// Evaluates on a knots-only grid built for the merged form of `mu`, so the
/// result depends on `mu` only as a function.
pub fn eval_functional_auto(h: &TestFunction, p: &OrderParam, alpha: f64, nx: usize) -> Result<FunctionalValue> {
    check_alpha(alpha)?;
    check_member(p)?;
    let canon = OrderParam::unchecked(p.mu.merged(), p.c, 0.0);
    let grid = SpaceTimeGrid::knots_only(h, &canon, nx)?;
    let sol = solve_parisi(h, &canon, &grid)?;
    Ok(FunctionalValue::new(sol.value_at_origin(), entropy_part(&canon, alpha)))
}

/// Node weights `w` such that `int delta(t) g(t) dt = sum_k w_k g(t_k)` for every
/// `g` linear between the nodes.
fn delta_weights(times: &[f64], delta: &PiecewiseFn) -> Vec<f64> {
    let mut w = vec![0.0; times.len()];
    let knots = delta.knots();
    for k in 0..times.len().saturating_sub(1) {
        let (a, b) = (times[k], times[k + 1]);
        let len = b - a;
        if len <= 0.0 {
            continue;
        }
        let mut cuts = vec![a];
        cuts.extend(knots.iter().copied().filter(|&s| s > a && s < b));
        cuts.push(b);
        for piece in cuts.windows(2) {
            let d = delta.eval(0.5 * (piece[0] + piece[1]));
            if d == 0.0 {
                continue;
            }
            let width = piece[1] - piece[0];
            let mid = 0.5 * (piece[0] + piece[1]);
            let u = (mid - a) / len;
            w[k] += d * width * (1.0 - u);
            w[k + 1] += d * width * u;
        }
    }
    w
}

fn check_delta(delta: &PiecewiseFn, q: f64) -> Result<()> {
    let knots = delta.knots();
    for (i, &v) in delta.values().iter().enumerate() {
        if knots[i] < q && v != 0.0 {
            return Err(Error::Domain(format!("perturbation is nonzero on [{}, {q})", knots[i])));
        }
    }
    Ok(())
}

/// `(d/ds) F(mu + s delta, c)` at `s = 0` by Monte Carlo over the bundle:
/// `1/2 int delta(t) (E fx(t, X_t)^2 - (1/alpha) int_0^t gamma^2) dt`.
/// The error bar comes from per-path integrals.
pub fn first_variation(bundle: &SdeBundle, alpha: f64, delta: &PiecewiseFn) -> Result<Estimate> {
    check_alpha(alpha)?;
    let p = &bundle.sol.order_param;
    check_delta(delta, p.q)?;
    let weights = delta_weights(&bundle.times, delta);
    let mut per_path = vec![0.0; bundle.n_paths];
    let mut shift = 0.0;
    for (k, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (acc, d) in per_path.iter_mut().zip(bundle.fx_col(k)) {
            *acc += w * d * d;
        }
        shift += w * p.gamma_sq_integral(0.0, bundle.times[k]) / alpha;
    }
    let est = bundle.estimate(&per_path);
    Ok(Estimate { mean: 0.5 * (est.mean - shift), stderr: 0.5 * est.stderr })
}

/// Same quantity with the expectation taken against the law propagated on
/// the grid instead of sampled paths.
pub fn first_variation_exact(sol: &PdeSolution, alpha: f64, delta: &PiecewiseFn) -> Result<f64> {
    check_alpha(alpha)?;
    check_delta(delta, sol.order_param.q)?;
    let law = propagate_law(sol);
    let g = law.stationarity(sol, alpha);
    let w = delta_weights(&law.times, delta);
    Ok(0.5 * w.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>())
}

/// Derivatives of `F` in each interval value of `mu` and in `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub d_mu: Vec<f64>,
    pub d_c: f64,
    /// `(t, g(t))` with `g(t) = E fx^2 - (1/alpha) int_0^t gamma^2`.
    pub profile: Vec<(f64, f64)>,
}

pub fn gradient(sol: &PdeSolution, alpha: f64) -> Result<Gradient> {
    check_alpha(alpha)?;
    let law = propagate_law(sol);
    let g = law.stationarity(sol, alpha);
    let mu = &sol.order_param.mu;
    let knots = mu.knots();
    let d_mu = (0..mu.intervals())
        .map(|k| {
            let ind = PiecewiseFn::indicator(knots[k], knots[k + 1], 1.0).expect("interval inside [0,1]");
            let w = delta_weights(&law.times, &ind);
            0.5 * w.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect();
    // d/dc of the envelope is fx(1,.)^2 / 2, of the entropy part -(1/2 alpha) int gamma^2
    let d_c = 0.5 * g.last().copied().unwrap_or(0.0);
    let profile = law.times.iter().copied().zip(g).collect();
    Ok(Gradient { d_mu, d_c, profile })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinimizeOptions {
    pub knot_count: usize,
    /// Functional evaluations; a gradient counts as two.
    pub budget: usize,
    pub seed: u64,
    pub nx: usize,
    pub gradient_dt: f64,
    pub log_c_range: (f64, f64),
    pub mu_max: f64,
}

impl MinimizeOptions {
    pub fn new(knot_count: usize, budget: usize, seed: u64) -> Self {
        Self {
            knot_count,
            budget,
            seed,
            nx: DEFAULT_NX,
            gradient_dt: GRADIENT_DT,
            log_c_range: (1e-3f64.ln(), 1e4f64.ln()),
            mu_max: 50.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MinimizerResult {
    pub test_fn: String,
    pub alpha: f64,
    pub q: f64,
    pub param: OrderParam,
    pub value: FunctionalValue,
    /// `(t, g(t))` for `t >= q`.
    pub stationarity: Vec<(f64, f64)>,
    /// Largest violation of the first-order conditions: `|v - max(0, v - mean g)|`
    /// per interval value `v` of `mu`, and `|g(1)|` for `c`.
    pub kkt_residual: f64,
    pub no_ogp: bool,
    /// `c` ended on a bound of its search range, so the infimum is approached
    /// rather than attained.
    pub degenerate: bool,
    pub warning: Option<String>,
    pub evaluations: usize,
}

impl MinimizerResult {
    pub fn to_manifest(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "test_fn = {}", self.test_fn);
        let _ = writeln!(s, "alpha = {:?}", self.alpha);
        s.push_str(&self.param.to_config_block());
        let _ = writeln!(s, "value = {:?}", self.value.total);
        let _ = writeln!(s, "value.pde_part = {:?}", self.value.pde_part);
        let _ = writeln!(s, "value.entropy_part = {:?}", self.value.entropy_part);
        let _ = writeln!(s, "kkt_residual = {:?}", self.kkt_residual);
        let _ = writeln!(s, "no_ogp = {}", self.no_ogp);
        let _ = writeln!(s, "degenerate = {}", self.degenerate);
        let _ = writeln!(s, "evaluations = {}", self.evaluations);
        let _ = writeln!(s, "warning = {}", self.warning.as_deref().unwrap_or("none"));
        s
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_manifest())?;
        Ok(())
    }

    pub fn write_stationarity_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("t,g\n");
        for (t, g) in &self.stationarity {
            let _ = writeln!(out, "{t:?},{g:?}");
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// True iff `mu*` vanishes on `[0, q]` and strictly increases after it.
pub fn no_ogp_check(result: &MinimizerResult) -> bool {
    result.param.strictly_increasing_after_prefix(OGP_SLACK)
}

struct Search<'a> {
    h: &'a TestFunction,
    alpha: f64,
    q: f64,
    opts: &'a MinimizeOptions,
    evals: usize,
}

impl Search<'_> {
    fn param(&self, values: &[f64], log_c: f64) -> OrderParam {
        let (lo, hi) = self.opts.log_c_range;
        let mu = PiecewiseFn::flat_then_uniform(self.q, values).expect("q checked on entry");
        OrderParam::unchecked(mu, log_c.clamp(lo, hi).exp(), self.q)
    }

    /// Squared knot values and log c.
    fn decode(&self, theta: &[f64]) -> OrderParam {
        let k = self.opts.knot_count;
        let values: Vec<f64> = theta[..k].iter().map(|t| (t * t).min(self.opts.mu_max)).collect();
        self.param(&values, theta[k])
    }

    fn value_of(&self, p: &OrderParam) -> f64 {
        eval_functional_auto(self.h, p, self.alpha, self.opts.nx).map_or(f64::INFINITY, |v| v.total)
    }

    fn eval_many(&mut self, thetas: &[Vec<f64>]) -> Vec<f64> {
        self.evals += thetas.len();
        let this = &*self;
        thetas.par_iter().map(|t| this.value_of(&this.decode(t))).collect()
    }

    fn eval(&mut self, theta: &[f64]) -> f64 {
        self.evals += 1;
        self.value_of(&self.decode(theta))
    }
}

struct Simplex {
    points: Vec<Vec<f64>>,
    values: Vec<f64>,
}

impl Simplex {
    fn sort(&mut self) {
        let mut idx: Vec<usize> = (0..self.values.len()).collect();
        idx.sort_by(|&a, &b| self.values[a].total_cmp(&self.values[b]));
        self.points = idx.iter().map(|&i| self.points[i].clone()).collect();
        self.values = idx.iter().map(|&i| self.values[i]).collect();
    }

    fn converged(&self) -> bool {
        let best = self.values[0];
        let worst = *self.values.last().unwrap();
        let spread = self.points[1..]
            .iter()
            .flat_map(|p| p.iter().zip(&self.points[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        worst - best <= 1e-10 * (1.0 + best.abs()) && spread < 1e-5
    }
}

fn blend(a: &[f64], b: &[f64], s: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + s * (y - x)).collect()
}

/// Nelder-Mead with standard coefficients; returns whether the simplex collapsed.
fn nelder_mead(search: &mut Search, start: Vec<f64>, budget: usize) -> (Vec<f64>, f64, bool) {
    let dim = start.len();
    let mut rng = stream(search.opts.seed, Purpose::Optimizer, 0);
    let mut points = vec![start.clone()];
    for i in 0..dim {
        let mut p = start.clone();
        p[i] += 0.5 * (0.8 + 0.4 * rng.random::<f64>());
        points.push(p);
    }
    let take = points.len().min(budget.max(1));
    points.truncate(take);
    let values = search.eval_many(&points);
    let mut s = Simplex { points, values };
    s.sort();
    if s.points.len() < dim + 1 {
        return (s.points[0].clone(), s.values[0], false);
    }
    while search.evals < budget {
        if s.converged() {
            return (s.points[0].clone(), s.values[0], true);
        }
        let worst = dim;
        let centroid: Vec<f64> =
            (0..dim).map(|j| s.points[..worst].iter().map(|p| p[j]).sum::<f64>() / dim as f64).collect();
        let reflected = blend(&centroid, &s.points[worst], -1.0);
        let fr = search.eval(&reflected);
        if fr < s.values[0] {
            let expanded = blend(&centroid, &s.points[worst], -2.0);
            let fe = if search.evals < budget { search.eval(&expanded) } else { f64::INFINITY };
            if fe < fr {
                s.points[worst] = expanded;
                s.values[worst] = fe;
            } else {
                s.points[worst] = reflected;
                s.values[worst] = fr;
            }
        } else if fr < s.values[worst - 1] {
            s.points[worst] = reflected;
            s.values[worst] = fr;
        } else {
            if search.evals >= budget {
                break;
            }
            let outside = fr < s.values[worst];
            let contracted = if outside {
                blend(&centroid, &reflected, 0.5)
            } else {
                blend(&centroid, &s.points[worst], 0.5)
            };
            let fc = search.eval(&contracted);
            if fc < fr.min(s.values[worst]) {
                s.points[worst] = contracted;
                s.values[worst] = fc;
            } else {
                let best = s.points[0].clone();
                let shrunk: Vec<Vec<f64>> = s.points[1..].iter().map(|p| blend(&best, p, 0.5)).collect();
                let vals = search.eval_many(&shrunk);
                for (i, (p, v)) in shrunk.into_iter().zip(vals).enumerate() {
                    s.points[i + 1] = p;
                    s.values[i + 1] = v;
                }
            }
        }
        s.sort();
    }
    let done = s.converged();
    (s.points[0].clone(), s.values[0], done)
}

/// State of the projected-gradient phase: knot values and `log c`.
struct Iterate {
    values: Vec<f64>,
    log_c: f64,
    f: f64,
}

fn gradient_at(search: &mut Search, it: &Iterate) -> Option<Gradient> {
    search.evals += 2;
    let p = search.param(&it.values, it.log_c);
    let grid = SpaceTimeGrid::auto(search.h, &p, search.opts.nx, search.opts.gradient_dt).ok()?;
    let sol = solve_parisi(search.h, &p, &grid).ok()?;
    gradient(&sol, search.alpha).ok()
}

/// Projected gradient in `(mu values, log c)`, with `mu` steps scaled by the
/// interval length. Returns whether it stopped at a point where no descent
/// step was found.
fn projected_gradient(search: &mut Search, it: &mut Iterate, budget: usize) -> bool {
    let (lo, hi) = search.opts.log_c_range;
    let k = search.opts.knot_count;
    let len = (1.0 - search.q) / k as f64;
    let mut step = 1.0;
    while search.evals + 3 <= budget {
        let Some(grad) = gradient_at(search, it) else { return false };
        // the prefix interval, if any, is not a free variable
        let offset = grad.d_mu.len() - k;
        let c = it.log_c.exp();
        let mut dir: Vec<f64> = grad.d_mu[offset..].iter().map(|g| -g / len).collect();
        for (d, &v) in dir.iter_mut().zip(&it.values) {
            if v <= 0.0 && *d < 0.0 {
                *d = 0.0;
            }
        }
        let mut dir_c = -c * grad.d_c;
        if (it.log_c >= hi && dir_c > 0.0) || (it.log_c <= lo && dir_c < 0.0) {
            dir_c = 0.0;
        }
        let norm = dir.iter().map(|d| d * d).sum::<f64>() + dir_c * dir_c;
        if norm.sqrt() < 1e-8 {
            return true;
        }
        let mut accepted = false;
        while search.evals < budget && step > 1e-8 {
            let values: Vec<f64> =
                it.values.iter().zip(&dir).map(|(v, d)| (v + step * d).clamp(0.0, search.opts.mu_max)).collect();
            let log_c = (it.log_c + step * dir_c).clamp(lo, hi);
            search.evals += 1;
            let f = search.value_of(&search.param(&values, log_c));
            // decrease predicted by the gradient along the projected move
            let predicted: f64 = values.iter().zip(&it.values).zip(&dir).map(|((a, b), d)| -(a - b) * d * len).sum::<f64>()
                + -(log_c - it.log_c) * dir_c;
            if f <= it.f + 1e-4 * predicted && f < it.f {
                *it = Iterate { values, log_c, f };
                step *= 2.0;
                accepted = true;
                break;
            }
            step *= 0.25;
        }
        if !accepted {
            return step <= 1e-8;
        }
    }
    false
}

/// Local minimisation of `F` over `mu` with `knot_count` equal intervals on
/// `(q, 1)` and `c > 0`: Nelder-Mead from `mu = 0, c = 1` on half the budget,
/// then projected gradient. The result is an upper bound on the infimum.
pub fn minimize(h: &TestFunction, alpha: f64, q: f64, knot_count: usize, budget: usize, seed: u64) -> Result<MinimizerResult> {
    minimize_with(h, alpha, q, &MinimizeOptions::new(knot_count, budget, seed))
}

pub fn minimize_with(h: &TestFunction, alpha: f64, q: f64, opts: &MinimizeOptions) -> Result<MinimizerResult> {
    check_alpha(alpha)?;
    if opts.knot_count == 0 {
        return Err(Error::Domain("knot_count must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&q) {
        return Err(Error::Domain(format!("q must lie in [0,1), got {q}")));
    }
    if opts.budget == 0 {
        return Err(Error::Domain("budget must be at least 1".into()));
    }
    let k = opts.knot_count;
    let mut search = Search { h, alpha, q, opts, evals: 0 };
    let start = vec![0.0; k + 1];
    let start_value = search.eval(&start);
    if !start_value.is_finite() {
        return Err(Error::Evaluation("functional is not finite at the warm start mu = 0, c = 1".into()));
    }
    let nm_budget = opts.budget / 2;
    let (theta, f_nm, nm_done) = if nm_budget > search.evals {
        nelder_mead(&mut search, start, nm_budget)
    } else {
        (start, start_value, false)
    };
    let (theta, f_nm) = if f_nm <= start_value { (theta, f_nm) } else { (vec![0.0; k + 1], start_value) };
    let decoded = search.decode(&theta);
    let mut it = Iterate {
        values: decoded.mu.values()[decoded.mu.values().len() - k..].to_vec(),
        log_c: decoded.c.ln(),
        f: f_nm,
    };
    let pg_done = projected_gradient(&mut search, &mut it, opts.budget);
    let param = search.param(&it.values, it.log_c);
    let value = eval_functional_auto(h, &param, alpha, opts.nx)?;

    let (lo, hi) = opts.log_c_range;
    let degenerate = param.c.ln() >= hi - 1e-3 || param.c.ln() <= lo + 1e-3;
    let grid = SpaceTimeGrid::auto(h, &param, opts.nx, opts.gradient_dt)?;
    let sol = solve_parisi(h, &param, &grid)?;
    let grad = gradient(&sol, alpha)?;
    let stationarity: Vec<(f64, f64)> = grad.profile.iter().copied().filter(|&(t, _)| t >= q).collect();
    let offset = grad.d_mu.len() - k;
    let len = (1.0 - q) / k as f64;
    let mut kkt = grad.d_mu[offset..]
        .iter()
        .zip(&it.values)
        .map(|(d, &v)| {
            let mean_g = 2.0 * d / len;
            // projected-gradient step size, so a value pinned near 0 counts as active
            if mean_g >= 0.0 {
                mean_g.min(v)
            } else {
                -mean_g
            }
        })
        .fold(0.0, f64::max);
    if !degenerate {
        kkt = kkt.max(2.0 * grad.d_c.abs());
    }

    let warning = if value.total >= start_value && opts.budget > 1 && !(nm_done || pg_done) {
        Some("budget exhausted without descent progress; returning the warm start".to_string())
    } else if !(nm_done || pg_done) {
        Some(format!("budget of {} evaluations exhausted before convergence; best found returned", opts.budget))
    } else {
        None
    };
    let no_ogp = param.strictly_increasing_after_prefix(OGP_SLACK);
    Ok(MinimizerResult {
        test_fn: h.label(),
        alpha,
        q,
        param,
        value,
        stationarity,
        kkt_residual: kkt,
        no_ogp,
        degenerate,
        warning,
        evaluations: search.evals,
    })
}

#[derive(Debug, Clone)]
pub struct SweepTable {
    pub rows: Vec<MinimizerResult>,
}

impl SweepTable {
    pub fn values(&self) -> Vec<(f64, f64)> {
        self.rows.iter().map(|r| (r.q, r.value.total)).collect()
    }

    /// Row with the largest minimised value.
    pub fn best(&self) -> &MinimizerResult {
        self.rows.iter().max_by(|a, b| a.value.total.total_cmp(&b.value.total)).expect("non-empty sweep")
    }

    pub fn argmax_q(&self) -> f64 {
        self.best().q
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("q,value,c,degenerate,warning\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:?},{:?},{:?},{},{}",
                r.q,
                r.value.total,
                r.param.c,
                r.degenerate,
                r.warning.is_some()
            );
        }
        out
    }
}

/// Minimises at every `q` in the grid.
pub fn sweep_q(h: &TestFunction, alpha: f64, q_grid: &[f64], opts: &MinimizeOptions) -> Result<SweepTable> {
    if q_grid.is_empty() {
        return Err(Error::Domain("empty q grid".into()));
    }
    let rows = q_grid.iter().map(|&q| minimize_with(h, alpha, q, opts)).collect::<Result<Vec<_>>>()?;
    Ok(SweepTable { rows })
}

/// Solution at the order parameter of a minimiser on the standard grid.
pub fn solve_at(h: &TestFunction, result: &MinimizerResult) -> Result<Arc<PdeSolution>> {
    let grid = SpaceTimeGrid::standard(h, &result.param)?;
    Ok(Arc::new(solve_parisi(h, &result.param, &grid)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control_sde::{simulate_sde, SdeOptions};
    use proptest::prelude::*;

    fn linear() -> TestFunction {
        TestFunction::clipped_linear(1.0, 60.0).unwrap()
    }

    fn heat(c: f64) -> OrderParam {
        OrderParam::new(PiecewiseFn::zero(), c, 0.0).unwrap()
    }

    #[test]
    fn heat_closed_form() {
        for &(alpha, c) in &[(1.0, 1.0), (4.0, 0.3), (2.5, 2.0)] {
            let v = eval_functional_auto(&linear(), &heat(c), alpha, DEFAULT_NX).unwrap();
            let want = c / 2.0 + 1.0 / (2.0 * alpha * c);
            assert!((v.total - want).abs() < 1e-4, "{alpha} {c}: {} vs {want}", v.total);
            assert_eq!(v.total, v.pde_part + v.entropy_part);
        }
    }

    #[test]
    fn heat_minimum_over_c() {
        for &alpha in &[1.0f64, 4.0, 16.0] {
            let v = eval_functional_auto(&linear(), &heat(1.0 / alpha.sqrt()), alpha, DEFAULT_NX).unwrap();
            assert!((v.total - 1.0 / alpha.sqrt()).abs() < 1e-4);
        }
    }

    #[test]
    fn entropy_constant_mu() {
        let p = OrderParam::new(PiecewiseFn::constant(1.0), 1.0, 0.0).unwrap();
        for &alpha in &[1.0, 3.0] {
            assert!((entropy_part(&p, alpha) - 2f64.ln() / (2.0 * alpha)).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let p = heat(1.0);
        assert!(matches!(eval_functional_auto(&linear(), &p, 0.0, 257), Err(Error::Domain(_))));
        let bad = OrderParam::unchecked(PiecewiseFn::constant(1.0), 1.0, 0.5);
        assert!(matches!(eval_functional_auto(&linear(), &bad, 1.0, 257), Err(Error::Membership(_))));
    }

    #[test]
    fn delta_weights_integrate_linear_functions() {
        let times = [0.0, 0.1, 0.35, 0.7, 1.0];
        let delta = PiecewiseFn::new(vec![0.0, 0.2, 0.5, 1.0], vec![0.0, 2.0, -1.0]).unwrap();
        let w = delta_weights(&times, &delta);
        let g = |t: f64| 3.0 - 2.0 * t;
        let got: f64 = w.iter().zip(&times).map(|(a, &t)| a * g(t)).sum();
        // 2 int_0.2^0.5 g - int_0.5^1 g
        let anti = |t: f64| 3.0 * t - t * t;
        let want = 2.0 * (anti(0.5) - anti(0.2)) - (anti(1.0) - anti(0.5));
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn first_variation_heat_case() {
        let (alpha, c) = (2.0, 0.7);
        let p = heat(c);
        let grid = SpaceTimeGrid::standard(&linear(), &p).unwrap();
        let sol = Arc::new(solve_parisi(&linear(), &p, &grid).unwrap());
        let bundle = simulate_sde(sol.clone(), &SdeOptions::new(512, 1e-2, 3)).unwrap();
        let want = 0.5 * (1.0 - 1.0 / (2.0 * alpha * c * c));
        let est = first_variation(&bundle, alpha, &PiecewiseFn::constant(1.0)).unwrap();
        assert!((est.mean - want).abs() < 1e-9, "{} vs {want}", est.mean);
        let exact = first_variation_exact(&sol, alpha, &PiecewiseFn::constant(1.0)).unwrap();
        assert!((exact - want).abs() < 1e-9);
        let zero = first_variation(&bundle, alpha, &PiecewiseFn::zero()).unwrap();
        assert_eq!(zero.mean, 0.0);
    }

    #[test]
    fn first_variation_rejects_prefix_support() {
        let p = OrderParam::new(PiecewiseFn::flat_then_uniform(0.3, &[1.0]).unwrap(), 1.0, 0.3).unwrap();
        let grid = SpaceTimeGrid::standard(&linear(), &p).unwrap();
        let sol = solve_parisi(&linear(), &p, &grid).unwrap();
        assert!(first_variation_exact(&sol, 1.0, &PiecewiseFn::constant(1.0)).is_err());
    }

    #[test]
    fn first_variation_matches_finite_difference() {
        let h = TestFunction::perceptron(-0.5, 0.1).unwrap();
        let alpha = 2.0;
        let mu = PiecewiseFn::flat_then_uniform(0.2, &[0.5, 1.5]).unwrap();
        let p = OrderParam::new(mu.clone(), 0.8, 0.2).unwrap();
        let delta = PiecewiseFn::indicator(mu.knots()[2], 1.0, 1.0).unwrap();
        let grid = SpaceTimeGrid::new(-12.0, 12.0, 1537, &p, 1e-3).unwrap();
        let knots = SpaceTimeGrid::new(-12.0, 12.0, 1537, &p, f64::INFINITY).unwrap();
        let s = 1e-3;
        let at = |sign: f64| {
            let shifted = OrderParam::new(mu.axpy(sign * s, &delta), 0.8, 0.2).unwrap();
            eval_functional(&h, &shifted, alpha, &knots).unwrap().total
        };
        let fd = (at(1.0) - at(-1.0)) / (2.0 * s);
        let sol = Arc::new(solve_parisi(&h, &p, &grid).unwrap());
        let exact = first_variation_exact(&sol, alpha, &delta).unwrap();
        assert!((exact - fd).abs() < 1e-3, "law route {exact} vs fd {fd}");
        let bundle = simulate_sde(sol, &SdeOptions::new(20_000, 1e-3, 11)).unwrap();
        let mc = first_variation(&bundle, alpha, &delta).unwrap();
        assert!((mc.mean - fd).abs() < 1e-3 + 3.0 * mc.stderr, "mc {mc:?} vs fd {fd}");
    }

    #[test]
    fn gradient_in_c_matches_finite_difference() {
        let h = TestFunction::perceptron(0.0, 0.05).unwrap();
        let alpha = 3.0;
        let mu = PiecewiseFn::flat_then_uniform(0.0, &[0.4, 1.2]).unwrap();
        let at = |c: f64| {
            let p = OrderParam::new(mu.clone(), c, 0.0).unwrap();
            let g = SpaceTimeGrid::new(-12.0, 12.0, 1537, &p, f64::INFINITY).unwrap();
            eval_functional(&h, &p, alpha, &g).unwrap().total
        };
        let c = 0.9;
        let fd = (at(c + 1e-3) - at(c - 1e-3)) / 2e-3;
        let p = OrderParam::new(mu.clone(), c, 0.0).unwrap();
        let grid = SpaceTimeGrid::new(-12.0, 12.0, 1537, &p, 1e-3).unwrap();
        let sol = solve_parisi(&h, &p, &grid).unwrap();
        let grad = gradient(&sol, alpha).unwrap();
        assert!((grad.d_c - fd).abs() < 1e-3, "{} vs {fd}", grad.d_c);
        assert_eq!(grad.d_mu.len(), 2);
    }

    fn fake_result(values: &[f64], q: f64) -> MinimizerResult {
        let param = OrderParam::new(PiecewiseFn::flat_then_uniform(q, values).unwrap(), 1.0, q).unwrap();
        MinimizerResult {
            test_fn: "zero".into(),
            alpha: 1.0,
            q,
            param,
            value: FunctionalValue::new(0.0, 0.0),
            stationarity: Vec::new(),
            kkt_residual: 0.0,
            no_ogp: false,
            degenerate: false,
            warning: None,
            evaluations: 0,
        }
    }

    #[test]
    fn ogp_flag_examples() {
        assert!(!no_ogp_check(&fake_result(&[0.0], 0.0)));
        assert!(no_ogp_check(&fake_result(&[0.1, 0.2, 0.3], 0.25)));
        assert!(!no_ogp_check(&fake_result(&[0.1, 0.2, 0.2], 0.25)));
    }

    #[test]
    fn minimizer_recovers_heat_optimum() {
        let alpha = 4.0;
        let r = minimize(&linear(), alpha, 0.0, 2, 80, 1).unwrap();
        assert!((r.value.total - 0.5).abs() < 5e-3, "{}", r.value.total);
        assert!((r.param.c - 0.5).abs() < 0.05, "{}", r.param.c);
        assert!(r.param.mu.values().iter().all(|&v| v < 1e-2));
        assert!(r.param.validate_membership(true).is_valid());
        assert!(!r.degenerate);
    }

    #[test]
    fn zero_objective_is_degenerate() {
        let r = minimize(&TestFunction::zero(), 2.0, 0.0, 1, 40, 0).unwrap();
        assert!(r.degenerate);
        assert!(r.value.total.abs() < 1e-3);
    }

    #[test]
    fn tiny_budget_warns() {
        let r = minimize(&linear(), 2.0, 0.0, 1, 1, 0).unwrap();
        assert!(r.warning.is_some());
        assert_eq!(r.evaluations, 1);
    }

    #[test]
    fn single_point_sweep() {
        let t = sweep_q(&linear(), 1.0, &[0.3], &MinimizeOptions::new(1, 30, 0)).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.argmax_q(), 0.3);
    }

    #[test]
    fn manifest_round_trips_order_param() {
        let r = fake_result(&[0.1, 0.4], 0.2);
        let back = OrderParam::from_config_block(&r.to_manifest()).unwrap();
        assert_eq!(back, r.param);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn knot_refinement_changes_nothing(
            vals in proptest::collection::vec(0.0..2.0f64, 1..4),
            c in 0.2..2.0f64,
            t in 0.05..0.95f64,
        ) {
            let h = TestFunction::perceptron(-0.3, 0.1).unwrap();
            let p = OrderParam::new(PiecewiseFn::flat_then_uniform(0.0, &vals).unwrap(), c, 0.0).unwrap();
            let r = OrderParam::new(p.mu.refine_at(t), c, 0.0).unwrap();
            let a = eval_functional_auto(&h, &p, 2.0, 513).unwrap();
            let b = eval_functional_auto(&h, &r, 2.0, 513).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
