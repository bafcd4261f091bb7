//! The controlled diffusion `dX = mu f_x dt + dB`, the optimal pair `(F, phi)`,
//! the dual value function and the limiting projection law.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::parisi_pde::{hat_weights, refine_times, Field, PdeSolution, TimeLoc};
use crate::rng::{stream, Purpose};
use crate::stats::{mean, Estimate};
use crate::test_functions::TestFunction;

pub const DEFAULT_DT_SDE: f64 = 1e-3;
pub const DEFAULT_PATHS: usize = 20_000;
/// Paths per random stream.
pub const BLOCK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdeOptions {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub antithetic: bool,
}

impl Default for SdeOptions {
    fn default() -> Self {
        Self { n_paths: DEFAULT_PATHS, dt: DEFAULT_DT_SDE, seed: 0, antithetic: true }
    }
}

impl SdeOptions {
    pub fn new(n_paths: usize, dt: f64, seed: u64) -> Self {
        Self { n_paths, dt, seed, antithetic: true }
    }
}

/// Euler–Maruyama paths stored time-major.
#[derive(Debug, Clone)]
pub struct SdeBundle {
    pub sol: Arc<PdeSolution>,
    pub times: Vec<f64>,
    pub n_paths: usize,
    pub seed: u64,
    pub dt: f64,
    pub antithetic: bool,
    x: Vec<f64>,
    db: Vec<f64>,
}

/// Paths from `X_0 = 0` on [0, 1].
pub fn simulate_sde(sol: Arc<PdeSolution>, opts: &SdeOptions) -> Result<SdeBundle> {
    simulate_from(sol, 0.0, 0.0, opts)
}

/// Paths from `X_{t0} = x0` on [t0, 1].
pub fn simulate_from(sol: Arc<PdeSolution>, t0: f64, x0: f64, opts: &SdeOptions) -> Result<SdeBundle> {
    if !sol.regularity.passed() {
        return Err(Error::SolverFailure {
            msg: "refusing to simulate from a solution that failed its regularity check".into(),
            report: Box::new(sol.regularity.clone()),
        });
    }
    if opts.n_paths == 0 || !(opts.dt > 0.0) || !(0.0..1.0).contains(&t0) {
        return Err(Error::Domain(format!(
            "need n_paths >= 1, dt > 0 and t0 in [0,1); got {}, {}, {t0}",
            opts.n_paths, opts.dt
        )));
    }
    if !sol.in_range(x0) {
        return Err(Error::WidenGrid(format!("start point {x0} is outside the grid")));
    }
    let p = &sol.order_param;
    let mut anchors = p.mu.knots().to_vec();
    anchors.push(p.q);
    let times = refine_times(t0, &anchors, opts.dt);
    let steps = times.len() - 1;
    let drift: Vec<(f64, TimeLoc)> = times[..steps].iter().map(|&t| (p.mu.eval(t), sol.locate(t))).collect();
    let n = opts.n_paths;
    let blocks = n.div_ceil(BLOCK);
    let results: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let count = BLOCK.min(n - b * BLOCK);
            let mut rng = stream(opts.seed, Purpose::Brownian, b as u64);
            let mut xs = vec![0.0; (steps + 1) * count];
            let mut dbs = vec![0.0; steps * count];
            xs[..count].fill(x0);
            for k in 0..steps {
                let h = times[k + 1] - times[k];
                let root = h.sqrt();
                let (kappa, loc) = drift[k];
                let mut i = 0;
                while i < count {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let pair = if opts.antithetic && i + 1 < count { 2 } else { 1 };
                    for (s, sign) in [1.0, -1.0].iter().take(pair).enumerate() {
                        let x = xs[k * count + i + s];
                        let inc = sign * root * z;
                        let mut next = x + inc;
                        if kappa != 0.0 {
                            next += kappa * sol.at_loc(Field::Fx, loc, x) * h;
                        }
                        if !sol.in_range(next) {
                            return Err(Error::WidenGrid(format!(
                                "path left the grid at t = {} (x = {next})",
                                times[k + 1]
                            )));
                        }
                        xs[(k + 1) * count + i + s] = next;
                        dbs[k * count + i + s] = inc;
                    }
                    i += pair;
                }
            }
            Ok((xs, dbs))
        })
        .collect();
    let mut x = vec![0.0; (steps + 1) * n];
    let mut db = vec![0.0; steps * n];
    for (b, r) in results.into_iter().enumerate() {
        let (xs, dbs) = r?;
        let start = b * BLOCK;
        let count = BLOCK.min(n - start);
        for k in 0..=steps {
            x[k * n + start..k * n + start + count].copy_from_slice(&xs[k * count..(k + 1) * count]);
            if k < steps {
                db[k * n + start..k * n + start + count].copy_from_slice(&dbs[k * count..(k + 1) * count]);
            }
        }
    }
    Ok(SdeBundle { sol, times, n_paths: n, seed: opts.seed, dt: opts.dt, antithetic: opts.antithetic, x, db })
}

impl SdeBundle {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn x_col(&self, k: usize) -> &[f64] {
        &self.x[k * self.n_paths..(k + 1) * self.n_paths]
    }

    pub fn db_col(&self, k: usize) -> &[f64] {
        &self.db[k * self.n_paths..(k + 1) * self.n_paths]
    }

    /// Index of the stored time nearest to `t`.
    pub fn index_of(&self, t: f64) -> usize {
        let i = self.times.partition_point(|&s| s < t);
        if i == 0 {
            0
        } else if i == self.times.len() || (t - self.times[i - 1]) < (self.times[i] - t) {
            i - 1
        } else {
            i
        }
    }

    /// `gamma` consistent with the stored derivatives.
    pub fn gamma(&self, t: f64) -> f64 {
        self.sol.drift_param.gamma(t)
    }

    fn field_col(&self, field: Field, k: usize) -> Vec<f64> {
        let loc = self.sol.locate(self.times[k]);
        self.x_col(k).iter().map(|&x| self.sol.at_loc(field, loc, x)).collect()
    }

    pub fn fx_col(&self, k: usize) -> Vec<f64> {
        self.field_col(Field::Fx, k)
    }

    pub fn fxx_col(&self, k: usize) -> Vec<f64> {
        self.field_col(Field::Fxx, k)
    }

    /// `phi_t = f_xx(t, X_t) / gamma(t)`.
    pub fn phi_col(&self, k: usize) -> Vec<f64> {
        let g = self.gamma(self.times[k]);
        self.fxx_col(k).into_iter().map(|v| v / g).collect()
    }

    /// `M_t = f_x(t, X_t) / gamma(t) + X_t`.
    pub fn m_col(&self, k: usize) -> Vec<f64> {
        let g = self.gamma(self.times[k]);
        self.fx_col(k).into_iter().zip(self.x_col(k)).map(|(d, &x)| d / g + x).collect()
    }

    /// Mean with a standard error that respects antithetic pairing.
    pub fn estimate(&self, vals: &[f64]) -> Estimate {
        if self.antithetic {
            Estimate::from_pairs(vals)
        } else {
            Estimate::from_samples(vals)
        }
    }

    pub fn phi_sq(&self, k: usize) -> Estimate {
        let v: Vec<f64> = self.phi_col(k).into_iter().map(|p| p * p).collect();
        self.estimate(&v)
    }

    pub fn fx_sq(&self, k: usize) -> Estimate {
        let v: Vec<f64> = self.fx_col(k).into_iter().map(|p| p * p).collect();
        self.estimate(&v)
    }

    /// Indices of about `count` evenly spread stored times in `[from, 1]`.
    pub fn sample_indices(&self, from: f64, count: usize) -> Vec<usize> {
        let first = self.index_of(from);
        let last = self.steps();
        let count = count.max(1).min(last - first + 1);
        let mut idx: Vec<usize> = (0..count)
            .map(|i| first + ((last - first) as f64 * i as f64 / (count.max(2) - 1) as f64).round() as usize)
            .collect();
        idx.dedup();
        idx
    }

    /// CSV rows `t, mean phi^2, mean fx^2, mean (M_t - M_0)` every `stride` steps.
    pub fn write_profile_csv(&self, path: &Path, stride: usize) -> Result<()> {
        let m0 = self.m_col(0);
        let mut out = String::from("t,phi_sq,fx_sq,m_drift\n");
        for k in (0..=self.steps()).step_by(stride.max(1)) {
            let drift: Vec<f64> = self.m_col(k).iter().zip(&m0).map(|(a, b)| a - b).collect();
            let _ = writeln!(
                out,
                "{:?},{:?},{:?},{:?}",
                self.times[k],
                self.phi_sq(k).mean,
                self.fx_sq(k).mean,
                mean(&drift)
            );
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// `F(x) = (alpha / gamma(q)) f_x(q, x)` and its derivative.
#[derive(Debug, Clone)]
pub struct OptimalF {
    sol: Arc<PdeSolution>,
    loc: TimeLoc,
    pub q: f64,
    pub alpha: f64,
    pub gamma_q: f64,
}

pub fn optimal_f(sol: Arc<PdeSolution>, q: f64, alpha: f64) -> Result<OptimalF> {
    if (q - sol.order_param.q).abs() > 1e-12 {
        return Err(Error::Domain(format!(
            "q = {q} is not the flat prefix {} of the order parameter",
            sol.order_param.q
        )));
    }
    if !(alpha > 0.0) {
        return Err(Error::Domain(format!("alpha must be positive, got {alpha}")));
    }
    let gamma_q = sol.drift_param.gamma(q);
    let loc = sol.locate(q);
    Ok(OptimalF { sol, loc, q, alpha, gamma_q })
}

impl OptimalF {
    pub fn eval(&self, v: f64) -> f64 {
        self.alpha / self.gamma_q * self.sol.at_loc(Field::Fx, self.loc, v)
    }

    pub fn deriv(&self, v: f64) -> f64 {
        self.alpha / self.gamma_q * self.sol.at_loc(Field::Fxx, self.loc, v)
    }

    pub fn solution(&self) -> &Arc<PdeSolution> {
        &self.sol
    }
}

fn entropy_tail(sol: &PdeSolution, alpha: f64, t: f64) -> f64 {
    sol.order_param.gamma_integral(t, 1.0) / (2.0 * alpha)
}

/// `inf_x { f(t,x) + gamma(t)/2 (x - z)^2 } + (1/2 alpha) int_t^1 gamma`, by a grid
/// search refined with a parabola through the best three nodes.
pub fn value_function(sol: &PdeSolution, alpha: f64, t: f64, z: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("t = {t} outside [0,1]")));
    }
    let g = sol.order_param.gamma(t);
    let loc = sol.locate(t);
    let nx = sol.grid.nx;
    let dx = sol.grid.dx();
    let obj = |j: usize| {
        let x = sol.grid.x(j);
        let lo = sol.slice(Field::F, loc.index)[j];
        let f = if loc.weight == 0.0 { lo } else { lo + loc.weight * (sol.slice(Field::F, loc.index + 1)[j] - lo) };
        f + 0.5 * g * (x - z) * (x - z)
    };
    let (best, _) = (0..nx).map(|j| (j, obj(j))).fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    if best == 0 || best == nx - 1 {
        return Err(Error::WidenGrid(format!("infimum for z = {z} sits on the grid boundary")));
    }
    let (a, b, c) = (obj(best - 1), obj(best), obj(best + 1));
    let curv = a - 2.0 * b + c;
    let min = if curv > 0.0 {
        let shift = 0.5 * (a - c) / curv;
        b - 0.25 * (a - c) * shift
    } else {
        b
    };
    let _ = dx;
    Ok(min + entropy_tail(sol, alpha, t))
}

/// Solves `f_x(t,x)/gamma(t) + x = z` by bisection; the left side is increasing
/// because `f_xx > -gamma`.
pub fn initial_point(sol: &PdeSolution, t: f64, z: f64) -> Result<f64> {
    let g = sol.drift_param.gamma(t);
    let loc = sol.locate(t);
    let map = |x: f64| sol.at_loc(Field::Fx, loc, x) / g + x - z;
    let (mut lo, mut hi) = (sol.grid.x_min, sol.grid.x_max);
    if map(lo) > 0.0 || map(hi) < 0.0 {
        return Err(Error::WidenGrid(format!("no start point for z = {z} inside the grid")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if map(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Same quantity as [`value_function`], through the stationarity root and cubic
/// interpolation of `f` instead of a grid search.
pub fn value_function_by_root(sol: &PdeSolution, alpha: f64, t: f64, z: f64) -> Result<f64> {
    let x = initial_point(sol, t, z)?;
    let g = sol.order_param.gamma(t);
    Ok(sol.f_cubic(t, x) + 0.5 * g * (x - z) * (x - z) + entropy_tail(sol, alpha, t))
}

/// `h(z + int (1+phi) dB) - 1/2 int gamma (phi^2 - 1/alpha)` along the optimal
/// control started at `(t, z)`.
pub fn control_objective_mc(
    sol: Arc<PdeSolution>,
    h: &TestFunction,
    alpha: f64,
    t: f64,
    z: f64,
    opts: &SdeOptions,
) -> Result<Estimate> {
    let x0 = initial_point(&sol, t, z)?;
    let bundle = simulate_from(sol, t, x0, opts)?;
    let n = bundle.n_paths;
    let mut endpoint = vec![z; n];
    let mut penalty = vec![0.0; n];
    for k in 0..bundle.steps() {
        let tk = bundle.times[k];
        let step = bundle.times[k + 1] - tk;
        let gamma = bundle.sol.order_param.gamma(tk);
        let phi = bundle.phi_col(k);
        for ((e, pen), (&p, &db)) in endpoint.iter_mut().zip(penalty.iter_mut()).zip(phi.iter().zip(bundle.db_col(k))) {
            *e += (1.0 + p) * db;
            *pen += gamma * (p * p - 1.0 / alpha) * step;
        }
    }
    let vals: Vec<f64> = endpoint.iter().zip(&penalty).map(|(&e, &pen)| h.eval(e) - 0.5 * pen).collect();
    Ok(bundle.estimate(&vals))
}

/// Samples of `U = X_q + F(X_q)/alpha + int_q^1 (1 + phi) dB`.
#[derive(Debug, Clone)]
pub struct ProjectionSamples {
    pub samples: Vec<f64>,
    /// Monte Carlo `E h(U)`.
    pub h_mean: Estimate,
    pub q: f64,
    pub alpha: f64,
    pub seed: u64,
    pub test_fn: String,
    pub order_param: String,
}

pub fn realize_projection_law(
    sol: Arc<PdeSolution>,
    h: &TestFunction,
    alpha: f64,
    opts: &SdeOptions,
) -> Result<ProjectionSamples> {
    let bundle = simulate_sde(sol, opts)?;
    projection_from_bundle(&bundle, h, alpha)
}

pub fn projection_from_bundle(bundle: &SdeBundle, h: &TestFunction, alpha: f64) -> Result<ProjectionSamples> {
    let q = bundle.sol.order_param.q;
    let f_star = optimal_f(bundle.sol.clone(), q, alpha)?;
    let kq = bundle.index_of(q);
    let mut u: Vec<f64> = bundle.x_col(kq).iter().map(|&v| v + f_star.eval(v) / alpha).collect();
    for k in kq..bundle.steps() {
        let phi = bundle.phi_col(k);
        for ((ui, &p), &db) in u.iter_mut().zip(&phi).zip(bundle.db_col(k)) {
            *ui += (1.0 + p) * db;
        }
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::Evaluation("non-finite projection sample".into()));
    }
    let hv: Vec<f64> = u.iter().map(|&v| h.eval(v)).collect();
    Ok(ProjectionSamples {
        h_mean: bundle.estimate(&hv),
        samples: u,
        q,
        alpha,
        seed: bundle.seed,
        test_fn: h.label(),
        order_param: bundle.sol.order_param.to_config_block(),
    })
}

impl ProjectionSamples {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("u\n");
        for v in &self.samples {
            let _ = writeln!(out, "{v:?}");
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Residual of `E fx(t)^2 - E fx(s)^2 = int_s^t E fxx^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ItoResidual {
    pub residual: Estimate,
    /// Residual with the pathwise martingale part `sum 2 fx fxx dB` removed: what
    /// is left is time-discretisation error.
    pub discretization: Estimate,
}

pub fn ito_identity_check(bundle: &SdeBundle, s: f64, t: f64) -> Result<ItoResidual> {
    if !(s < t) {
        return Err(Error::Domain(format!("need s < t, got {s}, {t}")));
    }
    let (ks, kt) = (bundle.index_of(s), bundle.index_of(t));
    let n = bundle.n_paths;
    let mut integral = vec![0.0; n];
    let mut mart = vec![0.0; n];
    for k in ks..kt {
        let step = bundle.times[k + 1] - bundle.times[k];
        let fx = bundle.fx_col(k);
        let fxx = bundle.fxx_col(k);
        for i in 0..n {
            integral[i] += fxx[i] * fxx[i] * step;
            mart[i] += 2.0 * fx[i] * fxx[i] * bundle.db_col(k)[i];
        }
    }
    let (fs, ft) = (bundle.fx_col(ks), bundle.fx_col(kt));
    let r: Vec<f64> = (0..n).map(|i| ft[i] * ft[i] - fs[i] * fs[i] - integral[i]).collect();
    let d: Vec<f64> = r.iter().zip(&mart).map(|(a, b)| a - b).collect();
    Ok(ItoResidual { residual: bundle.estimate(&r), discretization: bundle.estimate(&d) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleReport {
    /// Largest |z-score| of binned conditional increment means.
    pub max_abs_z: f64,
    pub cells: usize,
    /// `M_1 - M_0` averaged over paths.
    pub terminal: Estimate,
    /// Root mean square of `M_1 - M_0` per path.
    pub spread: f64,
}

impl MartingaleReport {
    /// Bonferroni-style threshold for the number of cells tested.
    pub fn passed(&self) -> bool {
        let bound = 3.0 + (self.cells as f64).ln().max(0.0).sqrt();
        // antithetic pairs can cancel to round-off, far below the paired stderr
        let terminal_ok = self.terminal.within(0.0, 3.0) || self.terminal.mean.abs() <= 1e-9 * self.spread;
        self.max_abs_z < bound && terminal_ok
    }
}

/// Bins paths by `X_k` into quantile cells at a few steps and tests that the
/// increments of `M` average to zero in every cell.
pub fn martingale_check(bundle: &SdeBundle, bins: usize, checkpoints: usize) -> MartingaleReport {
    let n = bundle.n_paths;
    let mut max_abs_z: f64 = 0.0;
    let mut cells = 0;
    let steps = bundle.steps();
    for k in bundle.sample_indices(0.0, checkpoints + 1).into_iter().filter(|&k| k < steps) {
        let (m0, m1) = (bundle.m_col(k), bundle.m_col(k + 1));
        let x = bundle.x_col(k);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
        let per = n / bins.max(1);
        if per < 2 {
            continue;
        }
        for chunk in order.chunks(per) {
            if chunk.len() < 2 {
                continue;
            }
            let inc: Vec<f64> = chunk.iter().map(|&i| m1[i] - m0[i]).collect();
            let est = Estimate::from_samples(&inc);
            if est.stderr > 0.0 {
                max_abs_z = max_abs_z.max(est.mean.abs() / est.stderr);
            }
            cells += 1;
        }
    }
    let (first, last) = (bundle.m_col(0), bundle.m_col(steps));
    let drift: Vec<f64> = last.iter().zip(&first).map(|(a, b)| a - b).collect();
    let spread = (drift.iter().map(|d| d * d).sum::<f64>() / drift.len().max(1) as f64).sqrt();
    MartingaleReport { max_abs_z, cells, terminal: bundle.estimate(&drift), spread }
}

/// `V_t + 1/2 gamma V_zz / (gamma - V_zz) + gamma / (2 alpha)` by central differences.
pub fn hjb_residual(sol: &PdeSolution, alpha: f64, t: f64, z: f64, ht: f64, hz: f64) -> Result<f64> {
    let v = |t: f64, z: f64| value_function_by_root(sol, alpha, t, z);
    let vt = (v(t + ht, z)? - v(t - ht, z)?) / (2.0 * ht);
    let vzz = (v(t, z + hz)? - 2.0 * v(t, z)? + v(t, z - hz)?) / (hz * hz);
    let g = sol.order_param.gamma(t);
    Ok(vt + 0.5 * g * vzz / (g - vzz) + g / (2.0 * alpha))
}

/// Law of `X_t` propagated on the grid without sampling, through the transition
/// density `phi_{t-a}(y-x) exp(k (f(t,y) - f(a,x)))` on each interval where
/// `mu = k`.
#[derive(Debug, Clone)]
pub struct LawProfile {
    pub times: Vec<f64>,
    pub fx_sq: Vec<f64>,
    pub fxx_sq: Vec<f64>,
    pub phi_sq: Vec<f64>,
    /// Mass before renormalisation; a diagnostic close to 1.
    pub mass: Vec<f64>,
}

pub fn propagate_law(sol: &PdeSolution) -> LawProfile {
    let nx = sol.grid.nx;
    let dx = sol.grid.dx();
    let times = sol.times().to_vec();
    let nt = times.len();
    let mu = &sol.order_param.mu;
    let mut start = vec![0.0; nx];
    let pos = (0.0 - sol.grid.x_min) / dx;
    let j = (pos.floor() as usize).min(nx - 2);
    let w = pos - j as f64;
    start[j] = 1.0 - w;
    start[j + 1] = w;
    let mut laws: Vec<Option<Vec<f64>>> = vec![None; nt];
    let mut mass = vec![1.0; nt];
    laws[0] = Some(start);
    let knots = mu.knots();
    for k in 0..mu.intervals() {
        let (a, b) = (knots[k], knots[k + 1]);
        let kappa = mu.values()[k];
        let ia = times.partition_point(|&t| t < a);
        let ib = times.partition_point(|&t| t < b);
        let base = laws[ia].clone().expect("law at interval start");
        let fa = sol.slice(Field::F, ia);
        let support: Vec<usize> = (0..nx).filter(|&m| base[m] > 1e-300).collect();
        let (lo, hi) = (support[0], *support.last().unwrap_or(&0));
        for i in ia + 1..=ib {
            let weights = hat_weights((times[i] - a).sqrt(), dx);
            let half = (weights.len() - 1) / 2;
            let fi = sol.slice(Field::F, i);
            let mut next: Vec<f64> = (0..nx)
                .into_par_iter()
                .map(|jj| {
                    let from = jj.saturating_sub(half).max(lo);
                    let to = (jj + half).min(hi);
                    if from > to {
                        return 0.0;
                    }
                    let mut acc = 0.0;
                    for m in from..=to {
                        let wk = weights[m + half - jj];
                        if wk == 0.0 || base[m] == 0.0 {
                            continue;
                        }
                        let tilt = if kappa == 0.0 { 1.0 } else { (kappa * (fi[jj] - fa[m])).min(700.0).exp() };
                        acc += wk * base[m] * tilt;
                    }
                    acc
                })
                .collect();
            let total: f64 = next.iter().sum();
            mass[i] = total;
            if total > 0.0 {
                next.iter_mut().for_each(|v| *v /= total);
            }
            laws[i] = Some(next);
        }
    }
    let mut fx_sq = Vec::with_capacity(nt);
    let mut fxx_sq = Vec::with_capacity(nt);
    let mut phi_sq = Vec::with_capacity(nt);
    for (i, law) in laws.iter().enumerate() {
        let law = law.as_ref().expect("every slice reached");
        let fx = sol.slice(Field::Fx, i);
        let fxx = sol.slice(Field::Fxx, i);
        let e1: f64 = law.iter().zip(fx).map(|(p, d)| p * d * d).sum();
        let e2: f64 = law.iter().zip(fxx).map(|(p, d)| p * d * d).sum();
        let g = sol.drift_param.gamma(times[i]);
        fx_sq.push(e1);
        fxx_sq.push(e2);
        phi_sq.push(e2 / (g * g));
    }
    LawProfile { times, fx_sq, fxx_sq, phi_sq, mass }
}

impl LawProfile {
    /// `g(t) = E fx(t, X_t)^2 - (1/alpha) int_0^t gamma^2` at every slice.
    pub fn stationarity(&self, sol: &PdeSolution, alpha: f64) -> Vec<f64> {
        self.times
            .iter()
            .zip(&self.fx_sq)
            .map(|(&t, &e)| e - sol.order_param.gamma_sq_integral(0.0, t) / alpha)
            .collect()
    }
}
