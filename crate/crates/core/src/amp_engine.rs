//! Two-stage AMP on a synthetic Gaussian cloud: a fixed-point stage driven by a
//! contraction `F`, an incremental stage steered by a control schedule, then
//! orthonormalisation of the combined direction.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::RngExt;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::control_sde::optimal_f;
use crate::error::{Error, Result};
use crate::order_params::{OrderParam, PiecewiseFn};
use crate::parisi_pde::{solve_parisi, PdeSolution, SpaceTimeGrid};
use crate::quadrature::NormalRule;
use crate::rng::{stream, Purpose};
use crate::state_evolution::{psd_pinv, psd_sqrt, IncrementalPlan, StepNorm, VectorMap};
use crate::stats::{ks_two_sample, pairwise_sum, Estimate};
use crate::test_functions::TestFunction;

/// Rows per parallel block; fixed so results do not depend on the thread count.
const ROW_BLOCK: usize = 256;

/// Envelope for the overlap entries before a run is declared unstable.
const OVERLAP_ENVELOPE: f64 = 2.0;

/// Row-major `n x d` data matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl DataMatrix {
    /// Standard Gaussian entries, one random stream per block of rows.
    pub fn generate(n: usize, d: usize, seed: u64) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::Domain(format!("data matrix needs n, d >= 1, got {n} x {d}")));
        }
        let len = n
            .checked_mul(d)
            .ok_or_else(|| Error::Resource(format!("{n} x {d} overflows the address space")))?;
        let mut data: Vec<f64> = Vec::new();
        data.try_reserve_exact(len)
            .map_err(|e| Error::Resource(format!("cannot allocate a {n} x {d} matrix: {e}")))?;
        data.resize(len, 0.0);
        data.par_chunks_mut(ROW_BLOCK * d).enumerate().for_each(|(b, chunk)| {
            let mut rng = stream(seed, Purpose::DataMatrix, b as u64);
            for x in chunk.iter_mut() {
                *x = StandardNormal.sample(&mut rng);
            }
        });
        Ok(Self { n, d, data })
    }

    pub fn from_rows(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || d == 0 || data.len() != n * d {
            return Err(Error::Domain(format!("{} entries do not form a {n} x {d} matrix", data.len())));
        }
        Ok(Self { n, d, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn alpha(&self) -> f64 {
        self.n as f64 / self.d as f64
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `X w` for `w` of shape `d x m`, row-major.
    pub fn mul(&self, w: &[f64], m: usize) -> Vec<f64> {
        assert_eq!(w.len(), self.d * m);
        let mut out = vec![0.0; self.n * m];
        out.par_chunks_mut(m).enumerate().for_each(|(i, o)| {
            let row = self.row(i);
            if m == 1 {
                o[0] = row.iter().zip(w).map(|(a, b)| a * b).sum();
            } else {
                for (j, &x) in row.iter().enumerate() {
                    for (a, oa) in o.iter_mut().enumerate() {
                        *oa += x * w[j * m + a];
                    }
                }
            }
        });
        out
    }

    /// `X^T f` for `f` of shape `n x m`; block partials are combined pairwise
    /// in a fixed order.
    pub fn tmul(&self, f: &[f64], m: usize) -> Vec<f64> {
        assert_eq!(f.len(), self.n * m);
        let d = self.d;
        let parts: Vec<Vec<f64>> = self
            .data
            .par_chunks(ROW_BLOCK * d)
            .enumerate()
            .map(|(b, chunk)| {
                let mut acc = vec![0.0; d * m];
                for (r, row) in chunk.chunks_exact(d).enumerate() {
                    let fi = &f[(b * ROW_BLOCK + r) * m..(b * ROW_BLOCK + r + 1) * m];
                    for (j, &x) in row.iter().enumerate() {
                        for a in 0..m {
                            acc[j * m + a] += x * fi[a];
                        }
                    }
                }
                acc
            })
            .collect();
        pairwise_reduce(parts)
    }

    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for x in &self.data {
            hasher.update(x.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

fn pairwise_reduce(mut parts: Vec<Vec<f64>>) -> Vec<f64> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().unwrap_or_default()
}

/// `A^T B / rows` for row-major `rows x m` blocks.
fn gram(a: &[f64], b: &[f64], m: usize, scale: f64) -> DMatrix<f64> {
    let rows = a.len() / m;
    DMatrix::from_fn(m, m, |i, j| {
        let prods: Vec<f64> = (0..rows).map(|r| a[r * m + i] * b[r * m + j]).collect();
        pairwise_sum(&prods) / scale
    })
}

fn mean_of(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    pairwise_sum(&v) / v.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmpConfig {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub t1: usize,
    pub t2: usize,
    /// Target overlap of the fixed-point stage.
    pub q: DMatrix<f64>,
    pub seed: u64,
    /// Stage 1 stops once `||W^{t+1} - W^t||_F^2 / n` falls below this.
    pub early_stop: f64,
    /// Number of V iterates kept for diagnostics.
    pub history: usize,
}

impl AmpConfig {
    pub const DEFAULT_T1: usize = 50;
    pub const DEFAULT_T2: usize = 32;
    pub const MAX_T2: usize = 64;

    pub fn scalar(n: usize, d: usize, q: f64, seed: u64) -> Self {
        Self {
            n,
            d,
            m: 1,
            t1: Self::DEFAULT_T1,
            t2: Self::DEFAULT_T2,
            q: DMatrix::from_element(1, 1, q),
            seed,
            early_stop: 1e-3,
            history: 128,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.n as f64 / self.d as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.m == 0 {
            return Err(Error::Domain("n, d and m must be at least 1".into()));
        }
        if self.m > self.d {
            return Err(Error::Domain(format!("m = {} exceeds d = {}", self.m, self.d)));
        }
        if self.t1 == 0 || self.t2 == 0 {
            return Err(Error::Domain("T1 and T2 must be at least 1".into()));
        }
        if self.t2 > Self::MAX_T2 {
            return Err(Error::Domain(format!("T2 = {} exceeds the cap {}", self.t2, Self::MAX_T2)));
        }
        if self.q.nrows() != self.m || self.q.ncols() != self.m {
            return Err(Error::Domain(format!("Q must be {0} x {0}", self.m)));
        }
        let eig = SymmetricEigen::new(self.q.clone()).eigenvalues;
        if eig.iter().any(|&l| !(-1e-12..=1.0 + 1e-12).contains(&l)) || (&self.q - self.q.transpose()).abs().max() > 1e-12 {
            return Err(Error::Domain("Q must be symmetric with 0 <= Q <= I".into()));
        }
        Ok(())
    }

    /// Scalar stage-2 weights `Q_t = sqrt((1 - q)/T2)` (times `I_m`); for
    /// `m = 1` they satisfy `sum Q_t^2 = 1 - q`.
    pub fn stage2_weights(&self) -> Vec<f64> {
        vec![((1.0 - self.q[(0, 0)]) / self.t2 as f64).sqrt(); self.t2]
    }

    pub fn to_config_block(&self) -> String {
        let q: Vec<String> = self.q.iter().map(|x| format!("{x:?}")).collect();
        format!(
            "n = {}\nd = {}\nm = {}\nt1 = {}\nt2 = {}\nq = {}\nseed = {}\nearly_stop = {:?}\nhistory = {}\n",
            self.n,
            self.d,
            self.m,
            self.t1,
            self.t2,
            q.join(","),
            self.seed,
            self.early_stop,
            self.history
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Iterate {
    pub t: usize,
    /// `n x m`, row-major.
    pub v: Vec<f64>,
}

fn remember(history: &mut VecDeque<Iterate>, cap: usize, t: usize, v: &[f64]) {
    if cap == 0 {
        return;
    }
    if history.len() == cap {
        history.pop_front();
    }
    history.push_back(Iterate { t, v: v.to_vec() });
}

fn check_overlap(o: &DMatrix<f64>, t: usize) -> Result<()> {
    if o.iter().any(|x| !x.is_finite() || x.abs() > OVERLAP_ENVELOPE) {
        return Err(Error::Instability(format!("overlap {:?} left [-2, 2] at iteration {t}", o.as_slice())));
    }
    Ok(())
}

/// Fixed-point stage output.
#[derive(Debug, Clone)]
pub struct Stage1 {
    pub m: usize,
    /// Iterations actually run (at most `T1`).
    pub iterations: usize,
    pub early_stopped: bool,
    /// `W^{T1}`, `d x m`.
    pub w: Vec<f64>,
    /// `V^{T1}`, `n x m`.
    pub v: Vec<f64>,
    /// `F(V^{T1-1})` (or `F_0` when `T1 = 1`).
    pub f_prev: Vec<f64>,
    /// `(W^t)^T W^t / n` for `t = 1..=T1`.
    pub overlap: Vec<DMatrix<f64>>,
    /// `||W^{t+1} - W^t||_F^2 / n`.
    pub step_sq: Vec<f64>,
    /// Empirical `K_t = (1/n) sum_i J_F(v_i^t)`.
    pub onsager: Vec<DMatrix<f64>>,
    pub history: VecDeque<Iterate>,
}

/// `W^1 = X^T F_0 / sqrt(n)`, then `V^t = X W^t / sqrt(n) - (d/n) F(V^{t-1})`
/// and `W^{t+1} = X^T F(V^t) / sqrt(n) - W^t K_t^T`. `F_0` rows are Gaussian
/// with covariance `alpha Q`. `F` is applied to `V^t` rescaled to empirical
/// covariance `Q`.
pub fn run_stage1(x: &DataMatrix, f: &dyn VectorMap, cfg: &AmpConfig) -> Result<Stage1> {
    cfg.validate()?;
    let m = cfg.m;
    if f.dim() != m {
        return Err(Error::Domain(format!("map has dimension {} but m = {m}", f.dim())));
    }
    if x.n() != cfg.n || x.d() != cfg.d {
        return Err(Error::Domain("data matrix does not match the config".into()));
    }
    let (n, d) = (cfg.n as f64, cfg.d as f64);
    let root_n = n.sqrt();
    let ratio = d / n;
    let scale = psd_sqrt(&(&cfg.q * cfg.alpha()));
    let mut rng = stream(cfg.seed, Purpose::AmpInit, 0);
    let mut f_prev = vec![0.0; cfg.n * m];
    let mut xi = vec![0.0; m];
    for row in f_prev.chunks_exact_mut(m) {
        for g in xi.iter_mut() {
            *g = StandardNormal.sample(&mut rng);
        }
        for (a, r) in row.iter_mut().enumerate() {
            *r = (0..m).map(|b| scale[(a, b)] * xi[b]).sum();
        }
    }
    let mut w: Vec<f64> = x.tmul(&f_prev, m).into_iter().map(|v| v / root_n).collect();
    let mut out = Stage1 {
        m,
        iterations: 0,
        early_stopped: false,
        w: Vec::new(),
        v: Vec::new(),
        f_prev: Vec::new(),
        overlap: Vec::new(),
        step_sq: Vec::new(),
        onsager: Vec::new(),
        history: VecDeque::new(),
    };
    for t in 1..=cfg.t1 {
        let xw = x.mul(&w, m);
        let v: Vec<f64> = xw.iter().zip(&f_prev).map(|(a, b)| a / root_n - ratio * b).collect();
        let o = gram(&w, &w, m, n);
        check_overlap(&o, t)?;
        out.overlap.push(o);
        remember(&mut out.history, cfg.history, t, &v);
        let stop = t == cfg.t1 || out.step_sq.last().is_some_and(|&s| s < cfg.early_stop);
        if stop {
            out.early_stopped = t < cfg.t1;
            out.iterations = t;
            out.w = w;
            out.v = v;
            out.f_prev = f_prev;
            return Ok(out);
        }
        // F sees V^t rescaled to covariance Q; the rescaling is held fixed in K_t
        let pin = pin_covariance(&v, m, &cfg.q);
        let mut fv = vec![0.0; cfg.n * m];
        let mut jac = vec![0.0; cfg.n * m * m];
        fv.par_chunks_mut(m)
            .zip(jac.par_chunks_mut(m * m))
            .zip(v.par_chunks(m))
            .for_each(|((fo, jo), vi)| {
                let u: Vec<f64> = (0..m).map(|a| (0..m).map(|b| pin[(a, b)] * vi[b]).sum()).collect();
                f.apply(&u, fo);
                f.jacobian(&u, jo);
            });
        let k_raw = DMatrix::from_fn(m, m, |a, b| mean_of(jac.chunks_exact(m * m).map(|j| j[a * m + b])));
        let k = k_raw * &pin;
        let xtf = x.tmul(&fv, m);
        let mut next = vec![0.0; cfg.d * m];
        for j in 0..cfg.d {
            for a in 0..m {
                let onsager: f64 = (0..m).map(|b| w[j * m + b] * k[(a, b)]).sum();
                next[j * m + a] = xtf[j * m + a] / root_n - onsager;
            }
        }
        let diff: Vec<f64> = next.iter().zip(&w).map(|(a, b)| (a - b) * (a - b)).collect();
        out.step_sq.push(pairwise_sum(&diff) / n);
        out.onsager.push(k);
        if fv.iter().any(|v| !v.is_finite()) {
            return Err(Error::Instability(format!("non-finite F at iteration {t}")));
        }
        w = next;
        f_prev = fv;
    }
    unreachable!("the loop returns at t = T1")
}

/// `A = Q^{1/2} S^{-1/2}` with `S` the empirical covariance of the rows of `v`,
/// so the rows of `v A^T` have covariance `Q`. The self-variance of the exact
/// recursion sits at `Q` but need not be attracting, and without this finite-n
/// noise can drain it.
fn pin_covariance(v: &[f64], m: usize, q: &DMatrix<f64>) -> DMatrix<f64> {
    let n = (v.len() / m) as f64;
    let s = DMatrix::from_fn(m, m, |a, b| pairwise_sum(&v.chunks_exact(m).map(|r| r[a] * r[b]).collect::<Vec<_>>()) / n);
    psd_sqrt(q) * psd_pinv(&psd_sqrt(&s), 1e-12)
}

/// `k` with `||k g||^2 / n = 1`, or `fallback` for a zero vector.
fn unit_scale(g: &[f64], fallback: f64, n: f64) -> f64 {
    let norm_sq = pairwise_sum(&g.iter().map(|v| v * v).collect::<Vec<_>>()) / n;
    if norm_sq > 0.0 {
        1.0 / norm_sq.sqrt()
    } else {
        fallback
    }
}

/// Incremental stage output (`m = 1`).
#[derive(Debug, Clone)]
pub struct Stage2 {
    /// `W_I = (1/sqrt(n)) sum_k Q_k G_{T1+2+k}`, length `d`.
    pub w_i: Vec<f64>,
    /// Row `k` holds `K_{t,s}` for `t = T1+1+k` and `s = T1..=t`.
    pub onsager: Vec<Vec<f64>>,
    /// `D_{t,t}` for `t = T1+1 ..= T1+T2+1`.
    pub d_coeffs: Vec<f64>,
    /// Per-step normalisations and gains.
    pub norms: Vec<StepNorm>,
    /// Factors bringing each `G_t` to `||G_t||^2 / n = 1`.
    pub g_scale: Vec<f64>,
    pub overlap: Vec<f64>,
    pub history: VecDeque<Iterate>,
}

/// Runs the incremental stage for `m = 1` with `F_{T1} = xi`,
/// `G_{T1+1} = sqrt(alpha) W`, `F_t = V^t Phi_k(x_k)` and
/// `G_{t+1} = W^{t+1} Psi` where `Psi_j = alpha a_k +/- sqrt(alpha - alpha^2 a_k^2)`.
/// The chain `x_k` starts at `V^{T1}` and moves by `drift * delta + V^t sqrt(delta)`;
/// the Onsager terms `K_{t,s}` use forward sensitivities of `x_k`.
pub fn run_stage2(x: &DataMatrix, s1: &Stage1, plan: &IncrementalPlan, cfg: &AmpConfig) -> Result<Stage2> {
    cfg.validate()?;
    if cfg.m != 1 {
        return Err(Error::Domain("the incremental stage is implemented for m = 1 only".into()));
    }
    if plan.t2 != cfg.t2 || (plan.q - cfg.q[(0, 0)]).abs() > 1e-12 {
        return Err(Error::Domain("control plan does not match T2 and q of the config".into()));
    }
    let alpha = cfg.alpha();
    if ((plan.alpha - alpha) / alpha).abs() > 0.01 {
        return Err(Error::Domain(format!("plan alpha {} differs from n/d = {alpha}", plan.alpha)));
    }
    let (nn, dd) = (cfg.n, cfg.d);
    let n = nn as f64;
    let root_n = n.sqrt();
    let ratio = dd as f64 / n;
    let root_delta = plan.delta.sqrt();
    let t1 = s1.iterations;
    let mut rng = stream(cfg.seed, Purpose::AmpStage2, 0);
    let xi: Vec<f64> = (0..nn).map(|_| StandardNormal.sample(&mut rng)).collect();

    let w_next: Vec<f64> = x.tmul(&xi, 1).into_iter().map(|v| v / root_n).collect();
    let first_scale = unit_scale(&w_next, alpha.sqrt(), n);
    let mut g_hist: Vec<Vec<f64>> = vec![s1.w.clone(), w_next.iter().map(|w| first_scale * w).collect()];
    let d_first = ratio * first_scale;
    let xg = x.mul(&g_hist[1], 1);
    let mut v: Vec<f64> = xg.iter().zip(&xi).map(|(a, b)| a / root_n - d_first * b).collect();
    let mut out = Stage2 {
        w_i: vec![0.0; dd],
        onsager: Vec::with_capacity(plan.t2),
        d_coeffs: vec![d_first],
        norms: Vec::with_capacity(plan.t2),
        g_scale: vec![first_scale / alpha.sqrt()],
        overlap: vec![gram(&w_next, &w_next, 1, n)[(0, 0)]],
        history: VecDeque::new(),
    };
    remember(&mut out.history, cfg.history, t1 + 1, &v);
    let mut chain = s1.v.clone();
    // sens[s - T1][i] = d x_k,i / d v_i^s
    let mut sens: Vec<Vec<f64>> = vec![vec![1.0; nn]];
    let mut rad = stream(cfg.seed, Purpose::AmpStage2, 1);
    for k in 0..plan.t2 {
        let t = t1 + 1 + k;
        let phi: Vec<f64> = chain.par_iter().map(|&c| plan.phi(k, c)).collect();
        let norm = StepNorm::new(&v, &phi, alpha);
        let ft: Vec<f64> = v.iter().zip(&phi).map(|(&a, &p)| norm.apply(a, p)).collect();
        // the normalisation r is treated as a constant in the Onsager terms
        let mut kts: Vec<f64> = if norm.vanishing() {
            vec![0.0; sens.len()]
        } else {
            let dphi: Vec<f64> = chain.par_iter().map(|&c| plan.dphi(k, c)).collect();
            sens.iter().map(|s| mean_of((0..nn).map(|i| v[i] * dphi[i] * s[i])) / norm.r).collect()
        };
        kts.push(mean_of(phi.iter().map(|&p| norm.slope(p))));
        out.norms.push(norm);
        let xtf = x.tmul(&ft, 1);
        let w_new: Vec<f64> = (0..dd)
            .map(|j| xtf[j] / root_n - g_hist.iter().zip(&kts).map(|(g, kk)| g[j] * kk).sum::<f64>())
            .collect();
        let o = gram(&w_new, &w_new, 1, n);
        check_overlap(&o, t + 1)?;
        out.overlap.push(o[(0, 0)]);
        out.onsager.push(kts);
        let mean = alpha * norm.gain;
        let spread = (alpha - mean * mean).max(0.0).sqrt();
        let psi: Vec<f64> = (0..dd).map(|_| mean + if rad.random::<bool>() { spread } else { -spread }).collect();
        let g_raw: Vec<f64> = w_new.iter().zip(&psi).map(|(a, b)| a * b).collect();
        // the limit has ||G||^2 / n = 1; the d-side O(1/sqrt(d)) error is removed
        // and the factor is held fixed in D
        let scale = unit_scale(&g_raw, 1.0, n);
        out.g_scale.push(scale);
        let g_new: Vec<f64> = g_raw.iter().map(|g| scale * g).collect();
        let d_coef = scale * pairwise_sum(&psi) / n;
        out.d_coeffs.push(d_coef);
        for (acc, g) in out.w_i.iter_mut().zip(&g_new) {
            *acc += root_delta * g / root_n;
        }
        let xg = x.mul(&g_new, 1);
        // chain and sensitivities move with V^t
        let grow: Vec<f64> = chain.par_iter().map(|&c| 1.0 + plan.ddrift(k, c) * plan.delta).collect();
        for s in sens.iter_mut() {
            for (si, gi) in s.iter_mut().zip(&grow) {
                *si *= gi;
            }
        }
        sens.push(vec![root_delta; nn]);
        chain = chain.par_iter().zip(&v).map(|(&c, &vt)| plan.step(k, c, root_delta * vt)).collect();
        v = xg.iter().zip(&ft).map(|(a, b)| a / root_n - d_coef * b).collect();
        if v.iter().any(|z| !z.is_finite()) {
            return Err(Error::Instability(format!("non-finite iterate at step {}", t + 1)));
        }
        remember(&mut out.history, cfg.history, t + 1, &v);
        g_hist.push(g_new);
    }
    Ok(out)
}

/// A finished run.
#[derive(Debug, Clone)]
pub struct AmpRun {
    pub config: AmpConfig,
    pub test_fn: String,
    pub t1_used: usize,
    pub early_stopped: bool,
    pub stage1_overlap: Vec<DMatrix<f64>>,
    pub stage1_steps: Vec<f64>,
    pub stage1_onsager: Vec<DMatrix<f64>>,
    pub stage2_onsager: Vec<Vec<f64>>,
    pub stage2_d: Vec<f64>,
    pub stage2_overlap: Vec<f64>,
    pub norms: Vec<StepNorm>,
    /// `W_Q^T W_Q`.
    pub wq_gram: DMatrix<f64>,
    /// `d x m`, row-major, orthonormal columns.
    pub w_hat: Vec<f64>,
    /// Rows of `X W_hat`, `n x m`.
    pub projections: Vec<f64>,
    /// `(1/n) sum_i h(x_i^T w_hat)` (`m = 1`).
    pub objective: Estimate,
    pub history: Vec<Iterate>,
    pub data_checksum: String,
}

/// `W_Q = W^{T1}/sqrt(n) + W_I`, `W_hat = W_Q (W_Q^T W_Q)^{-1/2}` and the
/// objective on the projected cloud.
pub fn finalize(x: &DataMatrix, cfg: &AmpConfig, s1: Stage1, s2: Option<Stage2>, h: &TestFunction) -> Result<AmpRun> {
    let m = cfg.m;
    let root_n = (cfg.n as f64).sqrt();
    let mut wq: Vec<f64> = s1.w.iter().map(|w| w / root_n).collect();
    if let Some(s2) = &s2 {
        for (a, b) in wq.iter_mut().zip(&s2.w_i) {
            *a += b;
        }
    }
    let g = gram(&wq, &wq, m, 1.0);
    let eig = SymmetricEigen::new(g.clone());
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
    if eig.eigenvalues.iter().any(|&l| !(l > 1e-12 * top.max(1e-300))) || !(top > 0.0) {
        return Err(Error::Degenerate(format!("W_Q^T W_Q is singular: eigenvalues {:?}", eig.eigenvalues.as_slice())));
    }
    let inv = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()))
        * eig.eigenvectors.transpose();
    let mut w_hat = vec![0.0; cfg.d * m];
    for j in 0..cfg.d {
        for a in 0..m {
            w_hat[j * m + a] = (0..m).map(|b| wq[j * m + b] * inv[(b, a)]).sum();
        }
    }
    let projections = x.mul(&w_hat, m);
    let hv: Vec<f64> = projections.chunks_exact(m).map(|p| h.eval(p[0])).collect();
    let mut history: Vec<Iterate> = s1.history.into_iter().collect();
    let (stage2_onsager, stage2_d, stage2_overlap, norms) = match s2 {
        Some(s2) => {
            history.extend(s2.history);
            (s2.onsager, s2.d_coeffs, s2.overlap, s2.norms)
        }
        None => Default::default(),
    };
    Ok(AmpRun {
        config: cfg.clone(),
        test_fn: h.label(),
        t1_used: s1.iterations,
        early_stopped: s1.early_stopped,
        stage1_overlap: s1.overlap,
        stage1_steps: s1.step_sq,
        stage1_onsager: s1.onsager,
        stage2_onsager,
        stage2_d,
        stage2_overlap,
        norms,
        wq_gram: g,
        w_hat,
        projections,
        objective: Estimate::from_samples(&hv),
        history,
        data_checksum: x.checksum(),
    })
}

/// Data generation, both stages and finalisation.
pub fn run_amp(cfg: &AmpConfig, f: &dyn VectorMap, plan: &IncrementalPlan, h: &TestFunction) -> Result<AmpRun> {
    let x = DataMatrix::generate(cfg.n, cfg.d, cfg.seed)?;
    run_amp_on(&x, cfg, f, plan, h)
}

pub fn run_amp_on(x: &DataMatrix, cfg: &AmpConfig, f: &dyn VectorMap, plan: &IncrementalPlan, h: &TestFunction) -> Result<AmpRun> {
    let s1 = run_stage1(x, f, cfg)?;
    let s2 = run_stage2(x, &s1, plan, cfg)?;
    finalize(x, cfg, s1, Some(s2), h)
}

impl AmpRun {
    /// `max |W_hat^T W_hat - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let m = self.config.m;
        let g = gram(&self.w_hat, &self.w_hat, m, 1.0);
        (g - DMatrix::identity(m, m)).abs().max()
    }

    /// `max |W_Q^T W_Q - I|`.
    pub fn gram_defect(&self) -> f64 {
        let m = self.config.m;
        (&self.wq_gram - DMatrix::identity(m, m)).abs().max()
    }

    /// Projections on the first direction.
    pub fn projection_column(&self, a: usize) -> Vec<f64> {
        self.projections.chunks_exact(self.config.m).map(|p| p[a]).collect()
    }

    pub fn iterate(&self, t: usize) -> Option<&[f64]> {
        self.history.iter().find(|it| it.t == t).map(|it| it.v.as_slice())
    }

    pub fn to_manifest(&self) -> String {
        let mut out = String::from("[amp_run]\n");
        out.push_str(&self.config.to_config_block());
        let _ = writeln!(out, "test_fn = {}", self.test_fn);
        let _ = writeln!(out, "alpha = {:?}", self.config.alpha());
        let _ = writeln!(out, "t1_used = {}", self.t1_used);
        let _ = writeln!(out, "early_stopped = {}", self.early_stopped);
        let _ = writeln!(out, "objective = {:?}", self.objective.mean);
        let _ = writeln!(out, "objective_stderr = {:?}", self.objective.stderr);
        let _ = writeln!(out, "orthonormality_error = {:?}", self.orthonormality_error());
        let _ = writeln!(out, "wq_gram_defect = {:?}", self.gram_defect());
        let _ = writeln!(out, "wq_gram_envelope = {:?}  # 10/sqrt(n), empirical calibration", 10.0 / (self.config.n as f64).sqrt());
        if let Some(o) = self.stage1_overlap.last() {
            let _ = writeln!(out, "stage1_overlap = {:?}", o.as_slice());
        }
        let r: Vec<f64> = self.norms.iter().map(|nm| nm.r).collect();
        let _ = writeln!(out, "stage2_control_scale = {r:?}");
        let _ = writeln!(out, "stage2_clipped_steps = {}", self.norms.iter().filter(|nm| nm.clipped).count());
        let _ = writeln!(out, "data_sha256 = {}", self.data_checksum);
        out
    }

    pub fn write_projections_csv(&self, path: &Path) -> Result<()> {
        let m = self.config.m;
        let mut out = (0..m).map(|a| format!("p{a}")).collect::<Vec<_>>().join(",");
        out.push('\n');
        for row in self.projections.chunks_exact(m) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// `stage,t,overlap` for both stages (first entry of the matrix for `m > 1`).
    pub fn write_overlap_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("stage,t,overlap\n");
        for (t, o) in self.stage1_overlap.iter().enumerate() {
            let _ = writeln!(out, "1,{},{:?}", t + 1, o[(0, 0)]);
        }
        for (k, o) in self.stage2_overlap.iter().enumerate() {
            let _ = writeln!(out, "2,{},{:?}", self.t1_used + 1 + k, o);
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Little-endian `f64` dump of `W_hat`, row-major `d x m`.
    pub fn write_w_hat_binary(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.w_hat.iter().flat_map(|x| x.to_le_bytes()).collect();
        std::fs::write(path, bytes)?;
        Ok(())
    }
}

/// Equal-width histogram as `left,right,count` rows.
pub fn histogram_csv(samples: &[f64], bins: usize, lo: f64, hi: f64) -> String {
    let mut counts = vec![0usize; bins.max(1)];
    let width = (hi - lo) / counts.len() as f64;
    for &s in samples {
        if s >= lo && s < hi {
            let b = (((s - lo) / width) as usize).min(counts.len() - 1);
            counts[b] += 1;
        }
    }
    let mut out = String::from("left,right,count\n");
    for (b, c) in counts.iter().enumerate() {
        let l = lo + b as f64 * width;
        let _ = writeln!(out, "{l:?},{:?},{c}", l + width);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionReport {
    pub ks: f64,
    pub h_amp: Estimate,
    pub h_predicted: Estimate,
    /// `H - E h(U)`.
    pub gap: f64,
    pub gap_stderr: f64,
}

/// Two-sample KS between the projections and predicted samples, and the
/// objective gap with joint error bars.
pub fn compare_to_prediction(projections: &[f64], predicted: &[f64], h: &TestFunction) -> Result<PredictionReport> {
    if projections.is_empty() || predicted.is_empty() {
        return Err(Error::Domain("both sample sets must be nonempty".into()));
    }
    let ha: Vec<f64> = projections.iter().map(|&p| h.eval(p)).collect();
    let hp: Vec<f64> = predicted.iter().map(|&p| h.eval(p)).collect();
    let h_amp = Estimate::from_samples(&ha);
    let h_predicted = Estimate::from_samples(&hp);
    Ok(PredictionReport {
        ks: ks_two_sample(projections, predicted),
        gap: h_amp.mean - h_predicted.mean,
        gap_stderr: h_amp.stderr.hypot(h_predicted.stderr),
        h_amp,
        h_predicted,
    })
}

/// When `mu` vanishes on `[0, t0)` the prefix `q` is not pinned by the
/// functional; this picks the root in `(0, t0)` of `E F*(v)^2 = alpha q` for
/// `v ~ N(0, q)`, which makes `F*` a valid stage-1 map. Returns `q` and the
/// solution labelled with it; `q = 0` when `F*` vanishes at the origin.
pub fn self_consistent_q(h: &TestFunction, alpha: f64, mu: &PiecewiseFn, c: f64) -> Result<(f64, Arc<PdeSolution>)> {
    let rule = NormalRule::new(64);
    let flat_end = mu.values().iter().position(|&v| v != 0.0).map_or(1.0, |i| mu.knots()[i]);
    if flat_end < 1e-5 {
        return Err(Error::Domain("mu has no flat prefix to place q in".into()));
    }
    // only the slice at q matters while bracketing, so skip the interior times
    let solve_on = |q: f64, full: bool| -> Result<(f64, Arc<PdeSolution>)> {
        let p = OrderParam::new(mu.clone(), c, q)?;
        let grid = if full { SpaceTimeGrid::standard(h, &p)? } else { SpaceTimeGrid::knots_only(h, &p, 1025)? };
        let sol = Arc::new(solve_parisi(h, &p, &grid)?);
        let fs = optimal_f(sol.clone(), q, alpha)?;
        let m2 = rule.expect(|z| fs.eval(q.sqrt() * z).powi(2));
        Ok((m2 - alpha * q, sol))
    };
    let solve = |q: f64| solve_on(q, false);
    let (mut lo, mut hi) = (1e-6, flat_end - 1e-6);
    let (g_lo, _) = solve(lo)?;
    let (g_hi, _) = solve(hi)?;
    if g_lo <= 0.0 && g_hi <= 0.0 && g_lo >= -alpha * lo * (1.0 + 1e-9) {
        // F* vanishes near 0 (e.g. h constant): the root is q = 0
        let (_, sol) = solve_on(0.0, true)?;
        return Ok((0.0, sol));
    }
    if g_lo.signum() == g_hi.signum() {
        return Err(Error::Domain(format!(
            "E F*^2 - alpha q keeps one sign on (0, {flat_end}) ({g_lo:.3e}, {g_hi:.3e})"
        )));
    }
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        let (g, _) = solve(mid)?;
        if g.signum() == g_lo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-9 {
            break;
        }
    }
    let q = 0.5 * (lo + hi);
    let (_, sol) = solve_on(q, true)?;
    Ok((q, sol))
}
