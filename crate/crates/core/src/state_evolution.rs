//! State evolution for the two-stage AMP iteration: the fixed-point map on
//! cross-covariances, contraction certificates, and a sampled version of the
//! whole recursion for one-dimensional projections.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::RngExt;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::control_sde::OptimalF;
use crate::error::{Error, Result};
use crate::parisi_pde::{Field, PdeSolution, TimeLoc};
use crate::quadrature::NormalRule;
use crate::rng::{stream, Purpose};
use crate::stats::pairwise_sum;

/// Map `R^m -> R^m` applied row by row.
pub trait VectorMap: Send + Sync {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64], out: &mut [f64]);
    /// Row-major, `out[a * m + b] = dF_a / dv_b`.
    fn jacobian(&self, v: &[f64], out: &mut [f64]);
    fn label(&self) -> String {
        format!("map<{}>", self.dim())
    }
}

type Scalar = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// One-dimensional map with its derivative.
#[derive(Clone)]
pub struct ScalarMap {
    f: Scalar,
    df: Scalar,
    label: String,
}

impl fmt::Debug for ScalarMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarMap").field("label", &self.label).finish()
    }
}

impl ScalarMap {
    pub fn new(
        label: impl Into<String>,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        df: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { f: Arc::new(f), df: Arc::new(df), label: label.into() }
    }

    pub fn linear(slope: f64) -> Self {
        Self::new(format!("linear({slope})"), move |v| slope * v, move |_| slope)
    }

    pub fn zero() -> Self {
        Self::new("zero", |_| 0.0, |_| 0.0)
    }

    pub fn optimal(f_star: OptimalF) -> Self {
        let g = Arc::new(f_star);
        let g2 = g.clone();
        Self::new("optimal", move |v| g.eval(v), move |v| g2.deriv(v))
    }

    pub fn eval(&self, v: f64) -> f64 {
        (self.f)(v)
    }

    pub fn deriv(&self, v: f64) -> f64 {
        (self.df)(v)
    }

    pub fn name(&self) -> &str {
        &self.label
    }

    /// `self` scaled by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        let (f, df) = (self.f.clone(), self.df.clone());
        Self::new(format!("{k}*{}", self.label), move |v| k * f(v), move |v| k * df(v))
    }

    /// Rescaled so that `rule` gives `E F(v)^2 = alpha q` for `v ~ N(0, q)`.
    pub fn normalized(&self, q: f64, alpha: f64, rule: &NormalRule) -> Result<Self> {
        let root = q.max(0.0).sqrt();
        let m2 = rule.expect(|z| self.eval(root * z).powi(2));
        if !(m2 > 0.0) {
            return Err(Error::Degenerate(format!("{} has zero second moment", self.label)));
        }
        Ok(self.scaled((alpha * q / m2).sqrt()))
    }
}

impl VectorMap for ScalarMap {
    fn dim(&self) -> usize {
        1
    }
    fn apply(&self, v: &[f64], out: &mut [f64]) {
        out[0] = self.eval(v[0]);
    }
    fn jacobian(&self, v: &[f64], out: &mut [f64]) {
        out[0] = self.deriv(v[0]);
    }
    fn label(&self) -> String {
        self.label.clone()
    }
}

/// `F(v) = A v`.
#[derive(Debug, Clone)]
pub struct LinearMap {
    pub a: DMatrix<f64>,
}

impl VectorMap for LinearMap {
    fn dim(&self) -> usize {
        self.a.nrows()
    }
    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let m = self.dim();
        for (i, o) in out.iter_mut().enumerate().take(m) {
            *o = (0..m).map(|j| self.a[(i, j)] * v[j]).sum();
        }
    }
    fn jacobian(&self, _v: &[f64], out: &mut [f64]) {
        let m = self.dim();
        for i in 0..m {
            for j in 0..m {
                out[i * m + j] = self.a[(i, j)];
            }
        }
    }
}

/// Independent scalar maps on each coordinate, optionally mixed by `A`:
/// `F(v) = A (g_1(v_1), ..., g_m(v_m))`.
#[derive(Debug, Clone)]
pub struct Componentwise {
    pub maps: Vec<ScalarMap>,
    pub mix: Option<DMatrix<f64>>,
}

impl VectorMap for Componentwise {
    fn dim(&self) -> usize {
        self.maps.len()
    }
    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let inner: Vec<f64> = self.maps.iter().zip(v).map(|(g, &x)| g.eval(x)).collect();
        match &self.mix {
            None => out.copy_from_slice(&inner),
            Some(a) => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = inner.iter().enumerate().map(|(j, x)| a[(i, j)] * x).sum();
                }
            }
        }
    }
    fn jacobian(&self, v: &[f64], out: &mut [f64]) {
        let m = self.dim();
        let d: Vec<f64> = self.maps.iter().zip(v).map(|(g, &x)| g.deriv(x)).collect();
        for i in 0..m {
            for j in 0..m {
                let a = self.mix.as_ref().map_or(if i == j { 1.0 } else { 0.0 }, |a| a[(i, j)]);
                out[i * m + j] = a * d[j];
            }
        }
    }
}

/// How Gaussian expectations are taken.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Expectation {
    /// Tensor Gauss-Hermite with `order` nodes per dimension.
    Quadrature { order: usize },
    MonteCarlo { samples: usize, seed: u64 },
}

impl Expectation {
    /// Quadrature for `m <= 2`, sampling beyond.
    pub fn default_for(m: usize) -> Self {
        match m {
            1 => Expectation::Quadrature { order: 64 },
            2 => Expectation::Quadrature { order: 16 },
            _ => Expectation::MonteCarlo { samples: 200_000, seed: 0 },
        }
    }

    fn is_exactish(&self) -> bool {
        matches!(self, Expectation::Quadrature { .. })
    }
}

const MC_BLOCK: usize = 4096;

/// `E body(G)` for `G ~ N(0, I_dim)`, entrywise, with standard errors (zero
/// for quadrature).
fn gauss_expect<B>(dim: usize, how: Expectation, len: usize, body: B) -> (Vec<f64>, Vec<f64>)
where
    B: Fn(&[f64], &mut [f64]) + Sync,
{
    match how {
        Expectation::Quadrature { order } => {
            let rule = NormalRule::new(order);
            let k = rule.len();
            let total = k.pow(dim as u32);
            // fixed chunks keep the summation order independent of the thread pool
            let sums: Vec<Vec<f64>> = (0..total.div_ceil(MC_BLOCK))
                .into_par_iter()
                .map(|chunk| {
                    let mut acc = vec![0.0; len];
                    let mut g = vec![0.0; dim];
                    let mut out = vec![0.0; len];
                    for idx in chunk * MC_BLOCK..((chunk + 1) * MC_BLOCK).min(total) {
                        let mut rest = idx;
                        let mut w = 1.0;
                        for gi in g.iter_mut() {
                            let j = rest % k;
                            rest /= k;
                            *gi = rule.nodes[j];
                            w *= rule.weights[j];
                        }
                        body(&g, &mut out);
                        for (a, o) in acc.iter_mut().zip(&out) {
                            *a += w * o;
                        }
                    }
                    acc
                })
                .collect();
            let mut mean = vec![0.0; len];
            for s in &sums {
                for (m, v) in mean.iter_mut().zip(s) {
                    *m += v;
                }
            }
            (mean, vec![0.0; len])
        }
        Expectation::MonteCarlo { samples, seed } => {
            let blocks = samples.div_ceil(MC_BLOCK);
            let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..blocks)
                .into_par_iter()
                .map(|b| {
                    let count = MC_BLOCK.min(samples - b * MC_BLOCK);
                    let mut rng = stream(seed, Purpose::MonteCarlo, b as u64);
                    let mut g = vec![0.0; dim];
                    let mut out = vec![0.0; len];
                    let mut s1 = vec![0.0; len];
                    let mut s2 = vec![0.0; len];
                    for _ in 0..count {
                        for gi in g.iter_mut() {
                            *gi = StandardNormal.sample(&mut rng);
                        }
                        body(&g, &mut out);
                        for ((a, b2), o) in s1.iter_mut().zip(s2.iter_mut()).zip(&out) {
                            *a += o;
                            *b2 += o * o;
                        }
                    }
                    (s1, s2)
                })
                .collect();
            let n = samples as f64;
            let mut mean = vec![0.0; len];
            let mut stderr = vec![0.0; len];
            for i in 0..len {
                let s1: Vec<f64> = parts.iter().map(|p| p.0[i]).collect();
                let s2: Vec<f64> = parts.iter().map(|p| p.1[i]).collect();
                let m = pairwise_sum(&s1) / n;
                let var = (pairwise_sum(&s2) / n - m * m).max(0.0) * n / (n - 1.0).max(1.0);
                mean[i] = m;
                stderr[i] = (var / n).sqrt();
            }
            (mean, stderr)
        }
    }
}

fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(a)).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

pub fn max_eigenvalue(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(a)).eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Symmetric square root with negative eigenvalues clipped to zero.
pub fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(a));
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Moore-Penrose inverse of a symmetric matrix; eigenvalues below
/// `rel_tol * max |eigenvalue|` count as zero.
pub fn psd_pinv(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(a));
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, l| m.max(l.abs()));
    let d = eig.eigenvalues.map(|l| if l.abs() > rel_tol * top && l.abs() > 0.0 { 1.0 / l } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// `(Z, Z')` with covariance `[[Q, C], [C, Q]]` as `Z = a g1`, `Z' = b g1 + d g2`.
/// At `C = Q` the two coincide exactly, at `C = 0` they are independent.
struct PairFactor {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    d: DMatrix<f64>,
}

fn pair_factor(q: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<PairFactor> {
    let m = q.nrows();
    if q.ncols() != m || c.nrows() != m || c.ncols() != m {
        return Err(Error::Domain("Q and C must be square of the same size".into()));
    }
    let mut block = DMatrix::zeros(2 * m, 2 * m);
    block.view_mut((0, 0), (m, m)).copy_from(q);
    block.view_mut((m, m), (m, m)).copy_from(q);
    block.view_mut((0, m), (m, m)).copy_from(c);
    block.view_mut((m, 0), (m, m)).copy_from(&c.transpose());
    let scale = 1.0 + q.abs().max();
    let low = min_eigenvalue(&block);
    if low < -1e-10 * scale {
        return Err(Error::Domain(format!("covariance [[Q, C], [C, Q]] is not PSD (min eigenvalue {low:.3e})")));
    }
    let a = psd_sqrt(q);
    let b = c * psd_pinv(&a, 1e-12);
    let resid = q - &b * b.transpose();
    let d = psd_sqrt(&resid);
    Ok(PairFactor { a, b, d })
}

fn mat_vec(a: &DMatrix<f64>, g: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = (0..g.len()).map(|j| a[(i, j)] * g[j]).sum();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsiEstimate {
    pub value: DMatrix<f64>,
    pub stderr: DMatrix<f64>,
}

/// `psi(C) = (1/alpha) E[F(Z) F(Z')^T]` under `[[Q, C], [C, Q]]`.
pub fn psi_map(f: &dyn VectorMap, q: &DMatrix<f64>, c: &DMatrix<f64>, alpha: f64, how: Expectation) -> Result<PsiEstimate> {
    if !(alpha > 0.0) {
        return Err(Error::Domain(format!("alpha must be positive, got {alpha}")));
    }
    let m = f.dim();
    if q.nrows() != m {
        return Err(Error::Domain(format!("map has dimension {m} but Q is {}x{}", q.nrows(), q.ncols())));
    }
    let pf = pair_factor(q, c)?;
    let (mean, se) = gauss_expect(2 * m, how, m * m, |g, out| {
        let (g1, g2) = g.split_at(m);
        let mut z = vec![0.0; m];
        let mut z2 = vec![0.0; m];
        let mut tmp = vec![0.0; m];
        mat_vec(&pf.a, g1, &mut z);
        mat_vec(&pf.b, g1, &mut z2);
        mat_vec(&pf.d, g2, &mut tmp);
        for (a, b) in z2.iter_mut().zip(&tmp) {
            *a += b;
        }
        let mut fz = vec![0.0; m];
        let mut fz2 = vec![0.0; m];
        f.apply(&z, &mut fz);
        f.apply(&z2, &mut fz2);
        for i in 0..m {
            for j in 0..m {
                out[i * m + j] = fz[i] * fz2[j];
            }
        }
    });
    let value = symmetrize(&DMatrix::from_row_slice(m, m, &mean)) / alpha;
    let stderr = DMatrix::from_row_slice(m, m, &se) / alpha;
    Ok(PsiEstimate { value, stderr })
}

/// Iterates `C_1 = 0, C_{t+1} = psi(C_t)`.
#[derive(Debug, Clone)]
pub struct CovarianceState {
    pub q: DMatrix<f64>,
    pub alpha: f64,
    /// `C_1, C_2, ...`
    pub trace: Vec<DMatrix<f64>>,
    pub converged: bool,
    /// `psi(Q)`, the self-overlap `E[Z_t^T Z_t]` of every iterate.
    pub self_overlap: DMatrix<f64>,
    /// Smallest eigenvalue of `C_{t+1} - C_t` over the run.
    pub min_increment_eig: f64,
}

impl CovarianceState {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }

    pub fn last(&self) -> &DMatrix<f64> {
        self.trace.last().expect("trace starts with C_1")
    }

    pub fn distance_to_q(&self) -> f64 {
        (self.last() - &self.q).norm()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,dist_to_q\n");
        for (t, c) in self.trace.iter().enumerate() {
            out.push_str(&format!("{},{:?}\n", t + 1, (c - &self.q).norm()));
        }
        out
    }

    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn noise_floor(est: &PsiEstimate, how: Expectation) -> f64 {
    if how.is_exactish() {
        1e-10
    } else {
        5.0 * est.stderr.max() * est.stderr.nrows() as f64
    }
}

pub fn iterate_to_fixed_point(
    f: &dyn VectorMap,
    q: &DMatrix<f64>,
    alpha: f64,
    max_iter: usize,
    tol: f64,
    how: Expectation,
) -> Result<CovarianceState> {
    let m = f.dim();
    let self_overlap = psi_map(f, q, q, alpha, how)?.value;
    let mut trace = vec![DMatrix::zeros(m, m)];
    let mut converged = false;
    let mut min_inc = f64::INFINITY;
    let mut prev_step = f64::INFINITY;
    while trace.len() < max_iter.max(1) {
        let cur = trace.last().unwrap();
        let est = psi_map(f, q, cur, alpha, how)?;
        let inc = &est.value - cur;
        let low = min_eigenvalue(&inc);
        min_inc = min_inc.min(low);
        if low < -noise_floor(&est, how) {
            return Err(Error::Certification(format!(
                "C_t decreased at iteration {} (min eigenvalue of increment {low:.3e})",
                trace.len()
            )));
        }
        let step = inc.norm();
        trace.push(est.value);
        // geometric tail bound from the last two steps
        let ratio = if prev_step.is_finite() && prev_step > 0.0 { (step / prev_step).min(0.999) } else { 0.999 };
        prev_step = step;
        if step < 1e-3 * tol || step * ratio / (1.0 - ratio) < tol && step < tol {
            converged = true;
            break;
        }
    }
    Ok(CovarianceState { q: q.clone(), alpha, trace, converged, self_overlap, min_increment_eig: min_inc })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Certified,
    /// The Jacobian bound holds only with equality on every probe.
    CertifiedNonStrict,
    /// The second-moment identity holds but no probe satisfies the bound.
    Inconclusive,
    MomentMismatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub name: String,
    /// Largest eigenvalue of `E[J^T S J] - alpha S`.
    pub margin: f64,
    pub strict: bool,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractionCertificate {
    /// `max |E[F F^T] - alpha Q|`.
    pub moment_residual: f64,
    pub moment_stderr: f64,
    pub probes: Vec<ProbeOutcome>,
    pub verdict: Verdict,
}

impl ContractionCertificate {
    pub fn certified(&self) -> bool {
        matches!(self.verdict, Verdict::Certified | Verdict::CertifiedNonStrict)
    }
}

/// `I`, the pseudo-inverse of `Q` when nonzero, and `random` draws `A A^T + I/10`.
pub fn default_probes(q: &DMatrix<f64>, random: usize, seed: u64) -> Vec<(String, DMatrix<f64>)> {
    let m = q.nrows();
    let mut probes = vec![("identity".to_string(), DMatrix::identity(m, m))];
    if q.norm() > 0.0 {
        let p = psd_pinv(q, 1e-10);
        // a singular Q gives a singular pseudo-inverse; keep it strictly positive
        probes.push(("pinv(Q)".to_string(), p + DMatrix::identity(m, m) * 1e-3));
    }
    let mut rng = stream(seed, Purpose::Probe, 0);
    for r in 0..random {
        let a: DMatrix<f64> = DMatrix::from_fn(m, m, |_, _| StandardNormal.sample(&mut rng));
        probes.push((format!("random{r}"), &a * a.transpose() + DMatrix::identity(m, m) * 0.1));
    }
    probes
}

/// Checks `E[F F^T] = alpha Q` within `tol` (plus 3 standard errors) and
/// `E[J^T S J] <= alpha S` on each probe.
pub fn certify_contraction(
    f: &dyn VectorMap,
    q: &DMatrix<f64>,
    alpha: f64,
    probes: &[(String, DMatrix<f64>)],
    how: Expectation,
    tol: f64,
) -> Result<ContractionCertificate> {
    let m = f.dim();
    if q.nrows() != m {
        return Err(Error::Domain(format!("map has dimension {m} but Q is {}x{}", q.nrows(), q.ncols())));
    }
    let root = psd_sqrt(q);
    // entries: F F^T (m*m), then J^T S J for every probe (m*m each)
    let len = m * m * (1 + probes.len());
    let (mean, se) = gauss_expect(m, how, len, |g, out| {
        let mut z = vec![0.0; m];
        mat_vec(&root, g, &mut z);
        let mut fz = vec![0.0; m];
        let mut jac = vec![0.0; m * m];
        f.apply(&z, &mut fz);
        f.jacobian(&z, &mut jac);
        for i in 0..m {
            for j in 0..m {
                out[i * m + j] = fz[i] * fz[j];
            }
        }
        for (p, (_, s)) in probes.iter().enumerate() {
            let base = m * m * (p + 1);
            for i in 0..m {
                for j in 0..m {
                    let mut acc = 0.0;
                    for a in 0..m {
                        for b in 0..m {
                            acc += jac[a * m + i] * s[(a, b)] * jac[b * m + j];
                        }
                    }
                    out[base + i * m + j] = acc;
                }
            }
        }
    });
    let moment = DMatrix::from_row_slice(m, m, &mean[..m * m]);
    let moment_residual = (moment - q * alpha).abs().max();
    let moment_stderr = se[..m * m].iter().copied().fold(0.0, f64::max);
    let exact = how.is_exactish();
    let outcomes: Vec<ProbeOutcome> = probes
        .iter()
        .enumerate()
        .map(|(p, (name, s))| {
            let base = m * m * (p + 1);
            let e = DMatrix::from_row_slice(m, m, &mean[base..base + m * m]);
            let noise = if exact { 1e-9 * (1.0 + s.norm()) } else { 3.0 * se[base..base + m * m].iter().copied().fold(0.0, f64::max) * m as f64 };
            let margin = max_eigenvalue(&(e - s * alpha));
            ProbeOutcome { name: name.clone(), margin, strict: margin < -noise, holds: margin <= noise }
        })
        .collect();
    let moment_ok = moment_residual <= tol + 3.0 * moment_stderr;
    let verdict = if !moment_ok {
        Verdict::MomentMismatch
    } else if outcomes.iter().any(|o| o.strict) {
        Verdict::Certified
    } else if outcomes.iter().any(|o| o.holds) {
        Verdict::CertifiedNonStrict
    } else {
        Verdict::Inconclusive
    };
    Ok(ContractionCertificate { moment_residual, moment_stderr, probes: outcomes, verdict })
}

/// Control process driving the incremental stage.
#[derive(Debug, Clone)]
pub enum PhiSchedule {
    /// `phi = 0`: pure Brownian increments.
    Zero,
    /// Deterministic values, one per step.
    Constant(Vec<f64>),
    /// `phi = f_xx / gamma` along the Parisi SDE of a solved PDE.
    Control(Arc<PdeSolution>),
}

/// Discretisation of the incremental stage with `t2` equal steps on `[q, 1]`:
/// step `k` sits at `t_k = q + k (1-q)/t2`, uses weight `sqrt((1-q)/t2)`, a unit
/// control `phi_k / s_k` and gain `a_k = min(s_k, 1/sqrt(alpha))`, where
/// `s_k^2 = E phi_k^2` under the discrete chain.
#[derive(Debug, Clone)]
pub struct IncrementalPlan {
    pub schedule: PhiSchedule,
    pub q: f64,
    pub alpha: f64,
    pub t2: usize,
    pub delta: f64,
    pub times: Vec<f64>,
    pub scale: Vec<f64>,
    pub gain: Vec<f64>,
    /// Steps where `s_k > 1/sqrt(alpha)` forced a smaller gain.
    pub clipped: Vec<bool>,
    locs: Vec<TimeLoc>,
    gammas: Vec<f64>,
    mus: Vec<f64>,
}

/// Scales below this count as a vanishing control.
const TINY_SCALE: f64 = 1e-12;

impl IncrementalPlan {
    pub fn new(schedule: PhiSchedule, q: f64, alpha: f64, t2: usize, samples: usize, seed: u64) -> Result<Self> {
        if t2 == 0 || !(0.0..1.0).contains(&q) || !(alpha > 0.0) {
            return Err(Error::Domain(format!("need t2 >= 1, q in [0,1), alpha > 0; got {t2}, {q}, {alpha}")));
        }
        let delta = (1.0 - q) / t2 as f64;
        let times: Vec<f64> = (0..t2).map(|k| q + k as f64 * delta).collect();
        let (locs, gammas, mus) = match &schedule {
            PhiSchedule::Control(sol) => {
                if (sol.order_param.q - q).abs() > 1e-12 {
                    return Err(Error::Domain(format!("plan q = {q} differs from the solution's q = {}", sol.order_param.q)));
                }
                if !sol.regularity.passed() {
                    return Err(Error::SolverFailure {
                        msg: "control schedule from a solution that failed its regularity check".into(),
                        report: Box::new(sol.regularity.clone()),
                    });
                }
                (
                    times.iter().map(|&t| sol.locate(t)).collect(),
                    times.iter().map(|&t| sol.drift_param.gamma(t)).collect(),
                    times.iter().map(|&t| sol.order_param.mu.eval(t)).collect(),
                )
            }
            PhiSchedule::Constant(v) if v.len() != t2 => {
                return Err(Error::Domain(format!("constant schedule has {} values for {t2} steps", v.len())));
            }
            _ => (Vec::new(), Vec::new(), Vec::new()),
        };
        let mut plan = Self {
            schedule,
            q,
            alpha,
            t2,
            delta,
            times,
            scale: vec![0.0; t2],
            gain: vec![0.0; t2],
            clipped: vec![false; t2],
            locs,
            gammas,
            mus,
        };
        plan.scale = plan.chain_scales(samples.max(2), seed);
        let cap = 1.0 / alpha.sqrt();
        for k in 0..t2 {
            plan.gain[k] = plan.scale[k].min(cap);
            plan.clipped[k] = plan.scale[k] > cap * (1.0 + 1e-9);
        }
        Ok(plan)
    }

    fn chain_scales(&self, samples: usize, seed: u64) -> Vec<f64> {
        match &self.schedule {
            PhiSchedule::Zero => vec![0.0; self.t2],
            PhiSchedule::Constant(v) => v.iter().map(|x| x.abs()).collect(),
            PhiSchedule::Control(_) => {
                let blocks = samples.div_ceil(MC_BLOCK);
                let parts: Vec<Vec<f64>> = (0..blocks)
                    .into_par_iter()
                    .map(|b| {
                        let count = MC_BLOCK.min(samples - b * MC_BLOCK);
                        let mut rng = stream(seed, Purpose::MonteCarlo, (1 << 32) + b as u64);
                        let mut acc = vec![0.0; self.t2];
                        for _ in 0..count {
                            let g: f64 = StandardNormal.sample(&mut rng);
                            let mut x = self.q.sqrt() * g;
                            for (k, a) in acc.iter_mut().enumerate() {
                                let p = self.phi(k, x);
                                *a += p * p;
                                let e: f64 = StandardNormal.sample(&mut rng);
                                x = self.step(k, x, self.delta.sqrt() * e);
                            }
                        }
                        acc
                    })
                    .collect();
                (0..self.t2)
                    .map(|k| {
                        let col: Vec<f64> = parts.iter().map(|p| p[k]).collect();
                        (pairwise_sum(&col) / samples as f64).sqrt()
                    })
                    .collect()
            }
        }
    }

    fn sol(&self) -> Option<&PdeSolution> {
        match &self.schedule {
            PhiSchedule::Control(s) => Some(s),
            _ => None,
        }
    }

    fn clamp(&self, x: f64) -> f64 {
        self.sol().map_or(x, |s| x.clamp(s.grid.x_min, s.grid.x_max))
    }

    /// Raw control `phi_k(x)`.
    pub fn phi(&self, k: usize, x: f64) -> f64 {
        match &self.schedule {
            PhiSchedule::Zero => 0.0,
            PhiSchedule::Constant(v) => v[k],
            PhiSchedule::Control(s) => s.at_loc(Field::Fxx, self.locs[k], self.clamp(x)) / self.gammas[k],
        }
    }

    pub fn dphi(&self, k: usize, x: f64) -> f64 {
        match &self.schedule {
            PhiSchedule::Control(s) => s.fxxx_at(self.times[k], self.clamp(x)) / self.gammas[k],
            _ => 0.0,
        }
    }

    /// Drift `mu f_x` per unit time.
    pub fn drift(&self, k: usize, x: f64) -> f64 {
        match &self.schedule {
            PhiSchedule::Control(s) if self.mus[k] != 0.0 => self.mus[k] * s.at_loc(Field::Fx, self.locs[k], self.clamp(x)),
            _ => 0.0,
        }
    }

    pub fn ddrift(&self, k: usize, x: f64) -> f64 {
        match &self.schedule {
            PhiSchedule::Control(s) if self.mus[k] != 0.0 => self.mus[k] * s.at_loc(Field::Fxx, self.locs[k], self.clamp(x)),
            _ => 0.0,
        }
    }

    pub fn step(&self, k: usize, x: f64, increment: f64) -> f64 {
        x + self.drift(k, x) * self.delta + increment
    }

    /// Weights `Q_k`, all equal to `sqrt(delta)`.
    pub fn weights(&self) -> Vec<f64> {
        vec![self.delta.sqrt(); self.t2]
    }

    /// `sum Q_k^2`, which equals `1 - q`.
    pub fn weight_sum(&self) -> f64 {
        self.weights().iter().map(|w| w * w).sum()
    }
}

/// Empirical normalisation of one incremental step: with `R = v phi(x)` and
/// `r^2 = mean R^2`, the step uses `F = R / r` and gain `a = min(r, 1/sqrt(alpha))`,
/// so `a F = R` whenever the gain is not clipped. A vanishing control gives
/// `F = v / rms(v)` and `a = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepNorm {
    pub r: f64,
    /// Root mean square of `v`; only used when the control vanishes.
    pub v_rms: f64,
    pub gain: f64,
    pub clipped: bool,
}

impl StepNorm {
    pub fn new(v: &[f64], phi: &[f64], alpha: f64) -> Self {
        let len = v.len().max(1) as f64;
        let prods: Vec<f64> = v.iter().zip(phi).map(|(a, b)| (a * b) * (a * b)).collect();
        let r = (pairwise_sum(&prods) / len).sqrt();
        let squares: Vec<f64> = v.iter().map(|a| a * a).collect();
        let v_rms = (pairwise_sum(&squares) / len).sqrt().max(TINY_SCALE);
        let cap = 1.0 / alpha.sqrt();
        if r > TINY_SCALE {
            Self { r, v_rms, gain: r.min(cap), clipped: r > cap * (1.0 + 1e-9) }
        } else {
            Self { r: 0.0, v_rms, gain: 0.0, clipped: false }
        }
    }

    pub fn vanishing(&self) -> bool {
        self.r == 0.0
    }

    /// `F_i` from `v_i` and `phi_i`.
    pub fn apply(&self, v: f64, phi: f64) -> f64 {
        if self.vanishing() {
            v / self.v_rms
        } else {
            v * phi / self.r
        }
    }

    /// `dF_i / dv_i` at fixed `phi_i`, with the normalisation held constant.
    pub fn slope(&self, phi: f64) -> f64 {
        if self.vanishing() {
            1.0 / self.v_rms
        } else {
            phi / self.r
        }
    }
}

/// Sampled state evolution of the whole two-stage recursion for `m = 1`.
#[derive(Debug, Clone)]
pub struct TwoStageSe {
    pub t1: usize,
    pub t2: usize,
    pub q: f64,
    pub alpha: f64,
    pub samples: usize,
    /// Empirical `E[Zbar_i Zbar_j]`, `i, j = 1..=t1+t2+1`.
    pub zbar_cov: DMatrix<f64>,
    /// Empirical `E[Z_i Z_j]`.
    pub z_cov: DMatrix<f64>,
    /// Per-step normalisations.
    pub norms: Vec<StepNorm>,
    /// Samples of the predicted projection law.
    pub u: Vec<f64>,
}

impl TwoStageSe {
    /// Largest deviation of the post-`t1` blocks from the identity and of the
    /// cross blocks from zero, over both sides.
    pub fn iamp_residual(&self) -> f64 {
        let n = self.zbar_cov.nrows();
        let mut worst = 0.0f64;
        for cov in [&self.zbar_cov, &self.z_cov] {
            for i in self.t1..n {
                for j in 0..n {
                    let target = if i == j { 1.0 } else { 0.0 };
                    worst = worst.max((cov[(i, j)] - target).abs());
                }
            }
        }
        worst
    }
}

/// Gaussian columns whose empirical Gram matrix equals that of a
/// sequence of source columns: each source is expanded in an orthonormal basis
/// (modified Gram-Schmidt) and the same coefficients multiply fresh noise.
struct Lift {
    basis: Vec<Vec<f64>>,
    noise: Vec<Vec<f64>>,
    seed: u64,
    tag: u64,
}

impl Lift {
    fn new(seed: u64, tag: u64) -> Self {
        Self { basis: Vec::new(), noise: Vec::new(), seed, tag }
    }

    /// Column with covariance `scale * E[source source_s]` against earlier ones.
    fn push(&mut self, source: &[f64], scale: f64) -> Vec<f64> {
        let n = source.len();
        let mut resid = source.to_vec();
        let mut coef = Vec::with_capacity(self.basis.len() + 1);
        for e in &self.basis {
            let r = dot_mean(&resid, e);
            for (x, b) in resid.iter_mut().zip(e) {
                *x -= r * b;
            }
            coef.push(r);
        }
        let norm = dot_mean(&resid, &resid).sqrt();
        let size = dot_mean(source, source).sqrt();
        if norm > 1e-10 * size && norm > 0.0 {
            self.basis.push(resid.iter().map(|x| x / norm).collect());
            let id = (self.tag << 40) + self.noise.len() as u64;
            // empirically orthonormal noise, so output Grams equal source Grams
            let mut eps = normals(self.seed, id, n);
            for prev in &self.noise {
                let r = dot_mean(&eps, prev);
                for (x, p) in eps.iter_mut().zip(prev) {
                    *x -= r * p;
                }
            }
            let len = dot_mean(&eps, &eps).sqrt();
            eps.iter_mut().for_each(|x| *x /= len);
            self.noise.push(eps);
            coef.push(norm);
        }
        let root = scale.sqrt();
        let mut out = vec![0.0; n];
        for (c, eps) in coef.iter().zip(&self.noise) {
            for (o, e) in out.iter_mut().zip(eps) {
                *o += root * c * e;
            }
        }
        out
    }
}

fn dot_mean(a: &[f64], b: &[f64]) -> f64 {
    let prods: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    pairwise_sum(&prods) / a.len() as f64
}

fn normals(seed: u64, id: u64, n: usize) -> Vec<f64> {
    let mut rng = stream(seed, Purpose::MonteCarlo, (2 << 60) + id);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn gram_of(cols: &[Vec<f64>]) -> DMatrix<f64> {
    let t = cols.len();
    let mut g = DMatrix::zeros(t, t);
    for a in 0..t {
        for b in 0..=a {
            let v = dot_mean(&cols[a], &cols[b]);
            g[(a, b)] = v;
            g[(b, a)] = v;
        }
    }
    g
}

/// Samples the state-evolution variables of the two-stage iteration with
/// stage-1 map `f` (a `q`-contraction), `F_0 = sqrt(alpha q) xi`, `t1` fixed-point
/// steps and the incremental stage of `plan`.
pub fn simulate_two_stage(f: &ScalarMap, alpha: f64, t1: usize, plan: &IncrementalPlan, samples: usize, seed: u64) -> Result<TwoStageSe> {
    if t1 == 0 || samples < 2 {
        return Err(Error::Domain("need t1 >= 1 and at least two samples".into()));
    }
    let q = plan.q;
    let t2 = plan.t2;
    let total = t1 + t2 + 1;
    let n = samples;
    // index t holds Zbar_t, Z_t, G_t (t >= 1) and F_t (t >= 0)
    let mut zbar: Vec<Vec<f64>> = Vec::with_capacity(total);
    let mut z: Vec<Vec<f64>> = Vec::with_capacity(total);
    let mut fcol: Vec<Vec<f64>> = Vec::with_capacity(total);
    let mut lift_z = Lift::new(seed, 1);
    let mut lift_zbar = Lift::new(seed, 2);
    fcol.push(normals(seed, 0, n).into_iter().map(|x| (alpha * q).sqrt() * x).collect());
    let mut chain: Vec<f64> = Vec::new();
    let mut norms: Vec<StepNorm> = Vec::with_capacity(t2);
    for t in 1..=total {
        let zt = lift_z.push(&fcol[t - 1], 1.0);
        let gt: Vec<f64> = if t <= t1 {
            zt.clone()
        } else if t == t1 + 1 {
            zt.iter().map(|x| alpha.sqrt() * x).collect()
        } else {
            let k = t - t1 - 2;
            let mean = alpha * norms[k].gain;
            let spread = (alpha - mean * mean).max(0.0).sqrt();
            let mut rng = stream(seed, Purpose::MonteCarlo, (3 << 32) + t as u64);
            zt.iter().map(|x| x * (mean + if rng.random::<bool>() { spread } else { -spread })).collect()
        };
        z.push(zt);
        let zb = lift_zbar.push(&gt, 1.0 / alpha);
        let ft: Vec<f64> = if t < t1 {
            zb.iter().map(|&v| f.eval(v)).collect()
        } else if t == t1 {
            chain = zb.clone();
            normals(seed, 4 * t as u64 + 3, n)
        } else if t < total {
            let k = t - t1 - 1;
            let phi: Vec<f64> = chain.iter().map(|&x| plan.phi(k, x)).collect();
            let norm = StepNorm::new(&zb, &phi, alpha);
            norms.push(norm);
            let root = plan.delta.sqrt();
            for (x, &v) in chain.iter_mut().zip(&zb) {
                *x = plan.step(k, *x, root * v);
            }
            zb.iter().zip(&phi).map(|(&v, &p)| norm.apply(v, p)).collect()
        } else {
            Vec::new()
        };
        zbar.push(zb);
        fcol.push(ft);
    }
    let root = plan.delta.sqrt();
    let mut u: Vec<f64> = (0..n).map(|i| zbar[t1 - 1][i] + fcol[t1 - 1][i] / alpha).collect();
    for k in 0..t2 {
        let brown = &zbar[t1 + k + 1];
        let ctrl = &fcol[t1 + 1 + k];
        for i in 0..n {
            u[i] += root * (brown[i] + ctrl[i] * norms[k].gain);
        }
    }
    Ok(TwoStageSe {
        t1,
        t2,
        q,
        alpha,
        samples: n,
        zbar_cov: gram_of(&zbar),
        z_cov: gram_of(&z),
        norms,
        u,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{ks_one_sample, normal_cdf};
    use proptest::prelude::*;

    fn m1(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    fn tanh_map(q: f64, alpha: f64) -> ScalarMap {
        ScalarMap::new("tanh", |v: f64| (2.0 * v).tanh(), |v: f64| 2.0 / (2.0 * v).cosh().powi(2))
            .normalized(q, alpha, &NormalRule::new(64))
            .unwrap()
    }

    /// Gaussian Poincare forces `E F'^2 >= alpha` for centred maps with
    /// `E F^2 = alpha q`, so contractions need a mean.
    fn shifted_map(q: f64, alpha: f64) -> ScalarMap {
        ScalarMap::new("shifted", |v: f64| 1.0 + 0.5 * (2.0 * v).tanh(), |v: f64| 1.0 / (2.0 * v).cosh().powi(2))
            .normalized(q, alpha, &NormalRule::new(64))
            .unwrap()
    }

    const QUAD: Expectation = Expectation::Quadrature { order: 64 };

    #[test]
    fn fixed_point_at_q() {
        let (q, alpha) = (0.4, 3.0);
        let f = tanh_map(q, alpha);
        let p = psi_map(&f, &m1(q), &m1(q), alpha, QUAD).unwrap();
        assert!((p.value[(0, 0)] - q).abs() < 1e-12);
    }

    #[test]
    fn independent_arguments_give_zero() {
        let (q, alpha) = (0.4, 3.0);
        let p = psi_map(&tanh_map(q, alpha), &m1(q), &m1(0.0), alpha, QUAD).unwrap();
        assert!(p.value[(0, 0)].abs() < 1e-14);
    }

    #[test]
    fn linear_map_is_identity_on_c() {
        let alpha: f64 = 2.5;
        let f = ScalarMap::linear(alpha.sqrt());
        for c in [0.0, 0.1, 0.3, 0.5] {
            let p = psi_map(&f, &m1(0.5), &m1(c), alpha, QUAD).unwrap();
            assert!((p.value[(0, 0)] - c).abs() < 1e-13);
        }
        let cert = certify_contraction(&f, &m1(0.5), alpha, &default_probes(&m1(0.5), 0, 0), QUAD, 1e-10).unwrap();
        assert_eq!(cert.verdict, Verdict::CertifiedNonStrict);
    }

    #[test]
    fn rejects_c_above_q() {
        let f = tanh_map(0.3, 2.0);
        assert!(matches!(psi_map(&f, &m1(0.3), &m1(0.35), 2.0, QUAD), Err(Error::Domain(_))));
    }

    #[test]
    fn iteration_starts_at_zero_and_climbs_to_q() {
        let (q, alpha) = (0.6, 4.0);
        let f = shifted_map(q, alpha);
        let cert = certify_contraction(&f, &m1(q), alpha, &default_probes(&m1(q), 2, 1), QUAD, 1e-10).unwrap();
        assert_eq!(cert.verdict, Verdict::Certified);
        let st = iterate_to_fixed_point(&f, &m1(q), alpha, 500, 1e-9, QUAD).unwrap();
        assert_eq!(st.trace[0][(0, 0)], 0.0);
        assert!(st.converged);
        assert!(st.trace.windows(2).all(|w| w[1][(0, 0)] >= w[0][(0, 0)] - 1e-12));
        assert!(st.distance_to_q() < 1e-6, "{}", st.distance_to_q());
        assert!((st.self_overlap[(0, 0)] - q).abs() < 1e-12);
        assert!(st.to_csv().starts_with("iteration,dist_to_q\n1,"));
    }

    #[test]
    fn certificate_examples() {
        let zero = ScalarMap::zero();
        let cert = certify_contraction(&zero, &m1(0.0), 2.0, &default_probes(&m1(0.0), 1, 0), QUAD, 1e-12).unwrap();
        assert_eq!(cert.verdict, Verdict::Certified);
        let two = ScalarMap::linear(2.0);
        let cert = certify_contraction(&two, &m1(0.5), 4.0, &default_probes(&m1(0.5), 0, 0), QUAD, 1e-10).unwrap();
        assert!(cert.moment_residual < 1e-12);
        assert_eq!(cert.verdict, Verdict::CertifiedNonStrict);
        let steep = ScalarMap::linear(3.0);
        let cert = certify_contraction(&steep, &m1(1.0), 9.0, &default_probes(&m1(1.0), 0, 0), QUAD, 1e-10).unwrap();
        assert_eq!(cert.verdict, Verdict::CertifiedNonStrict);
        let cert = certify_contraction(&steep, &m1(0.5), 4.0, &default_probes(&m1(0.5), 0, 0), QUAD, 1e-10).unwrap();
        assert_eq!(cert.verdict, Verdict::MomentMismatch);
    }

    fn coupled(alpha: f64) -> (Componentwise, DMatrix<f64>) {
        let q = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]);
        let maps = vec![
            ScalarMap::new("t", |v: f64| 1.0 + 0.4 * (1.5 * v).tanh(), |v: f64| 0.6 / (1.5 * v).cosh().powi(2)),
            ScalarMap::new("s", |v: f64| 0.8 + 0.3 * v.sin(), |v: f64| 0.3 * v.cos()),
        ];
        // choose the mixing so that E F F^T = alpha Q under the quadrature
        let base = Componentwise { maps: maps.clone(), mix: None };
        let raw = psi_map(&base, &q, &q, 1.0, Expectation::Quadrature { order: 16 }).unwrap().value;
        let mix = psd_sqrt(&(&q * alpha)) * psd_pinv(&psd_sqrt(&raw), 1e-14);
        (Componentwise { maps, mix: Some(mix) }, q)
    }

    #[test]
    fn two_dimensional_fixed_point() {
        let alpha = 5.0;
        let (f, q) = coupled(alpha);
        let how = Expectation::Quadrature { order: 16 };
        let cert = certify_contraction(&f, &q, alpha, &default_probes(&q, 3, 2), how, 1e-9).unwrap();
        assert!(cert.certified(), "{cert:?}");
        let st = iterate_to_fixed_point(&f, &q, alpha, 400, 1e-7, how).unwrap();
        assert!((&st.self_overlap - &q).abs().max() < 1e-10);
        assert!(st.converged);
        assert!(st.distance_to_q() < 1e-6);
        assert!(st.min_increment_eig > -1e-10);
    }

    #[test]
    fn quadrature_and_sampling_agree() {
        let alpha = 5.0;
        let (f, q) = coupled(alpha);
        let c = &q * 0.5;
        let a = psi_map(&f, &q, &c, alpha, Expectation::Quadrature { order: 16 }).unwrap();
        let b = psi_map(&f, &q, &c, alpha, Expectation::MonteCarlo { samples: 100_000, seed: 4 }).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((a.value[(i, j)] - b.value[(i, j)]).abs() < 3.0 * b.stderr[(i, j)] + 1e-12);
            }
        }
        let f1 = tanh_map(0.5, 2.0);
        let a = psi_map(&f1, &m1(0.5), &m1(0.2), 2.0, QUAD).unwrap();
        let b = psi_map(&f1, &m1(0.5), &m1(0.2), 2.0, Expectation::MonteCarlo { samples: 100_000, seed: 9 }).unwrap();
        assert!((a.value[(0, 0)] - b.value[(0, 0)]).abs() < 3.0 * b.stderr[(0, 0)]);
    }

    #[test]
    fn three_dimensions_use_sampling() {
        assert!(matches!(Expectation::default_for(3), Expectation::MonteCarlo { .. }));
        let f = LinearMap { a: DMatrix::identity(3, 3) * 2.0 };
        let q = DMatrix::identity(3, 3) * 0.25;
        let p = psi_map(&f, &q, &(&q * 0.5), 4.0, Expectation::default_for(3)).unwrap();
        for i in 0..3 {
            assert!((p.value[(i, i)] - 0.125).abs() < 4.0 * p.stderr[(i, i)] + 1e-3);
        }
    }

    #[test]
    fn brownian_stage_two_is_iid_and_gaussian() {
        let alpha = 2.0;
        let plan = IncrementalPlan::new(PhiSchedule::Zero, 0.0, alpha, 8, 10, 0).unwrap();
        assert!((plan.weight_sum() - 1.0).abs() < 1e-14);
        let se = simulate_two_stage(&ScalarMap::zero(), alpha, 3, &plan, 20_000, 5).unwrap();
        assert!(se.iamp_residual() < 0.05, "{}", se.iamp_residual());
        let ks = ks_one_sample(&se.u, normal_cdf);
        assert!(ks < 0.015, "{ks}");
    }

    #[test]
    fn single_step_weight_constraint() {
        let plan = IncrementalPlan::new(PhiSchedule::Constant(vec![0.3]), 0.36, 4.0, 1, 10, 0).unwrap();
        assert_eq!(plan.weights().len(), 1);
        assert!((plan.weight_sum() - 0.64).abs() < 1e-15);
        assert!((plan.gain[0] - 0.3).abs() < 1e-15);
        let clipped = IncrementalPlan::new(PhiSchedule::Constant(vec![0.9]), 0.36, 4.0, 1, 10, 0).unwrap();
        assert!(clipped.clipped[0]);
        assert_eq!(clipped.gain[0], 0.5);
    }

    #[test]
    fn stage_one_cross_covariances_follow_psi() {
        let (q, alpha) = (0.5, 3.0);
        let f = shifted_map(q, alpha);
        let plan = IncrementalPlan::new(PhiSchedule::Constant(vec![0.2; 4]), q, alpha, 4, 10, 0).unwrap();
        let t1 = 6;
        let se = simulate_two_stage(&f, alpha, t1, &plan, 40_000, 2).unwrap();
        let st = iterate_to_fixed_point(&f, &m1(q), alpha, t1, 0.0, QUAD).unwrap();
        for t in 0..t1 - 1 {
            assert!((se.zbar_cov[(t, t)] - q).abs() < 0.03, "diag {t}");
            // E[Zbar_{t+1} Zbar_t] = C_t
            assert!((se.zbar_cov[(t + 1, t)] - st.trace[t][(0, 0)]).abs() < 0.03, "cross {t}");
        }
        assert!(se.iamp_residual() < 0.05);
        assert!(se.norms.iter().zip(&plan.scale).all(|(nm, s)| (nm.r - s).abs() < 0.02));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn psi_is_monotone(a in 0.0..1.0f64, b in 0.0..1.0f64) {
            let (q, alpha) = (0.7, 3.0);
            let f = tanh_map(q, alpha);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let pl = psi_map(&f, &m1(q), &m1(lo * q), alpha, QUAD).unwrap().value[(0, 0)];
            let ph = psi_map(&f, &m1(q), &m1(hi * q), alpha, QUAD).unwrap().value[(0, 0)];
            prop_assert!(ph >= pl - 1e-12);
            prop_assert!(ph <= q + 1e-12);
        }
    }
}
