//! The five subcommands. Each writes its files into the output directory and
//! returns the manifest; the manifest itself is written exactly once by
//! [`execute`], also when a stage fails.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use exproj_core::amp_engine::{histogram_csv, self_consistent_q};
use exproj_core::control_sde::{
    control_objective_mc, ito_identity_check, martingale_check, optimal_f, projection_from_bundle, simulate_sde,
    value_function, value_function_by_root, hjb_residual, SdeBundle, SdeOptions,
};
use exproj_core::nalgebra::DMatrix;
use exproj_core::parisi_functional::{entropy_part, minimize_with};
use exproj_core::quadrature::NormalRule;
use exproj_core::state_evolution::{default_probes, simulate_two_stage};
use exproj_core::stats::{ks_one_sample, normal_cdf};
use exproj_core::{
    certify_contraction, compare_to_prediction, iterate_to_fixed_point, run_amp, solve_parisi, sweep_q, AmpConfig,
    Error as CoreError, Expectation, IncrementalPlan, MinimizeOptions, MinimizerResult, OrderParam, PdeSolution, PiecewiseFn,
    PhiSchedule, ScalarMap, SpaceTimeGrid,
};

use crate::config::{Command, ExperimentConfig, SeMap, StageQ};
use crate::error::{io_err, CliError, Result};
use crate::manifest::{RunManifest, Status};

/// Output directory plus the manifest being filled.
pub struct Run<'a> {
    pub cfg: &'a ExperimentConfig,
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

impl Run<'_> {
    fn emit(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents).map_err(io_err(&path))?;
        self.manifest.record_file(&self.dir, name)
    }

    /// For writers in the core that take a path.
    fn emit_with(&mut self, name: &str, write: impl FnOnce(&Path) -> exproj_core::Result<()>) -> Result<()> {
        write(&self.dir.join(name))?;
        self.manifest.record_file(&self.dir, name)
    }

    fn out(&mut self, stage: &str, key: &str, value: impl ToString) {
        self.manifest.output(stage, key, value);
    }

    fn outf(&mut self, stage: &str, key: &str, value: f64) {
        self.manifest.output(stage, key, format!("{value:?}"));
    }
}

/// Runs one command end to end and writes its manifest.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let start = Instant::now();
    std::fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let mut run = Run { cfg, dir: cfg.out_dir.clone(), manifest: RunManifest::new(cfg.command.name(), cfg.echo()) };
    let res = match cfg.command {
        Command::SolvePde => cmd_solve_pde(&mut run),
        Command::Minimize => cmd_minimize(&mut run),
        Command::RunAmp => cmd_run_amp(&mut run),
        Command::StateEvolution => cmd_state_evolution(&mut run),
        Command::VerifyDuality => cmd_verify_duality(&mut run),
    };
    let res = res.map_err(|e| attach_report(&mut run, e));
    run.manifest.wall_clock = start.elapsed();
    if let Err(e) = &res {
        run.manifest.status = Status::Failed { category: e.category().to_string(), message: e.to_string() };
    }
    run.manifest.write(&run.dir)?;
    res.map(|()| run.manifest)
}

/// Writes the regularity report of a failed solve and points the error at it.
fn attach_report(run: &mut Run, e: CliError) -> CliError {
    match e {
        CliError::Numerical { source: CoreError::SolverFailure { msg, report }, report: None } => {
            let name = "regularity_failure.txt";
            let written = run.emit(name, format!("{msg}\n{}\n", report.summary())).is_ok();
            CliError::Numerical {
                source: CoreError::SolverFailure { msg, report },
                report: written.then(|| run.dir.join(name)),
            }
        }
        other => other,
    }
}

fn solve_on_grid(cfg: &ExperimentConfig, p: &OrderParam) -> Result<Arc<PdeSolution>> {
    let grid = SpaceTimeGrid::auto(&cfg.test_fn, p, cfg.grid.nx, cfg.grid.dt)?;
    Ok(Arc::new(solve_parisi(&cfg.test_fn, p, &grid)?))
}

fn regularity_text(sol: &PdeSolution) -> String {
    let r = &sol.regularity;
    let mut s = String::new();
    let _ = writeln!(s, "passed = {}", r.passed());
    let _ = writeln!(s, "max_abs_fx = {:?}", r.max_abs_fx());
    let _ = writeln!(s, "lipschitz_bound = {:?}", r.lipschitz);
    let _ = writeln!(s, "min_fxx_plus_gamma = {:?}", r.min_curvature_margin());
    let _ = writeln!(s, "max_fxx = {:?}", r.max_fxx());
    let _ = writeln!(s, "tolerance = {:?}", r.tol);
    let _ = writeln!(s, "concavified = {}", sol.concavified);
    let _ = writeln!(s, "summary = {}", r.summary());
    s
}

fn cmd_solve_pde(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let p = cfg.order_param.clone().expect("validated: solve-pde has an order parameter");
    let sol = solve_on_grid(cfg, &p)?;
    let digest = sol.write_binary(&run.dir.join("solution.bin"))?;
    run.manifest.record_file(&run.dir, "solution.bin")?;
    run.emit_with("slices.csv", |path| sol.write_csv_slices(path, &cfg.slice_times))?;
    run.emit("regularity.txt", regularity_text(&sol))?;
    let f00 = sol.value_at_origin();
    run.out("pde", "payload_sha256", digest);
    run.outf("pde", "f00", f00);
    run.out("pde", "nx", sol.grid.nx);
    run.out("pde", "nt", sol.times().len());
    run.out("pde", "regularity_passed", sol.regularity.passed());
    if let Some(alpha) = cfg.alpha {
        run.outf("pde", "functional", f00 + entropy_part(&p, alpha));
    }
    if let Some(target) = cfg.checks.oracle_f00 {
        let err = (f00 - target).abs();
        run.outf("oracle", "abs_error", err);
        run.out("oracle", "passed", err <= cfg.checks.oracle_tol);
        if err > cfg.checks.oracle_tol {
            return Err(CliError::Numerical {
                source: CoreError::Evaluation(format!("f(0,0) = {f00:?} misses the oracle {target:?} by {err:?}")),
                report: Some(run.dir.join("regularity.txt")),
            });
        }
    }
    Ok(())
}

fn minimizer_options(cfg: &ExperimentConfig) -> MinimizeOptions {
    let mut opts = MinimizeOptions::new(cfg.optimizer.knots, cfg.optimizer.budget, cfg.seed);
    opts.nx = cfg.grid.nx;
    opts
}

fn record_minimizer(run: &mut Run, res: &MinimizerResult) -> Result<()> {
    run.emit("minimizer.txt", res.to_manifest())?;
    run.emit_with("stationarity.csv", |path| res.write_stationarity_csv(path))?;
    run.outf("minimize", "value", res.value.total);
    run.outf("minimize", "c", res.param.c);
    run.outf("minimize", "q", res.q);
    run.outf("minimize", "kkt_residual", res.kkt_residual);
    run.out("minimize", "degenerate", res.degenerate);
    run.out("minimize", "no_ogp", res.no_ogp);
    run.out("minimize", "evaluations", res.evaluations);
    run.out("minimize", "warning", res.warning.as_deref().unwrap_or("none"));
    Ok(())
}

fn cmd_minimize(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let opts = minimizer_options(cfg);
    let res = match &cfg.optimizer.q_grid {
        Some(grid) => {
            let table = sweep_q(&cfg.test_fn, cfg.alpha(), grid, &opts)?;
            run.emit("sweep.csv", table.to_csv())?;
            run.outf("sweep", "argmax_q", table.argmax_q());
            table.best().clone()
        }
        None => minimize_with(&cfg.test_fn, cfg.alpha(), cfg.optimizer.q, &opts)?,
    };
    record_minimizer(run, &res)
}

/// The given order parameter, or the minimiser's, and whether the minimiser
/// ended degenerate.
fn order_param(run: &mut Run) -> Result<(OrderParam, Option<bool>)> {
    let cfg = run.cfg;
    match &cfg.order_param {
        Some(p) => Ok((p.clone(), None)),
        None => {
            let res = minimize_with(&cfg.test_fn, cfg.alpha(), cfg.optimizer.q, &minimizer_options(cfg))?;
            record_minimizer(run, &res)?;
            Ok((res.param, Some(res.degenerate)))
        }
    }
}

/// Minimiser output below this is read as `mu = 0`.
pub const FLAT_MU: f64 = 1e-5;

/// `mu` with values at or below [`FLAT_MU`] set to zero; a degenerate
/// minimiser leaves `mu` unpinned, which is read as `mu = 0`.
fn snapped_mu(p: &OrderParam, degenerate: bool) -> Result<PiecewiseFn> {
    if degenerate {
        return Ok(PiecewiseFn::zero());
    }
    let values = p.mu.values().iter().map(|&v| if v.abs() <= FLAT_MU { 0.0 } else { v }).collect();
    Ok(PiecewiseFn::new(p.mu.knots().to_vec(), values)?.merged())
}

/// Stage-1 overlap and the PDE solution labelled with it. With `q = 0` and a
/// flat start of `mu` the overlap is not pinned, and the self-consistent root
/// is used instead.
fn stage_solution(run: &mut Run, p: &OrderParam, degenerate: bool) -> Result<(f64, Arc<PdeSolution>)> {
    let cfg = run.cfg;
    let mu = snapped_mu(p, degenerate)?;
    let unpinned = p.q == 0.0 && mu.values()[0] == 0.0;
    let (q, sol, rule) = match cfg.amp.q {
        StageQ::Fixed(q) => {
            let p = OrderParam::new(mu, p.c, q)?;
            (q, solve_on_grid(cfg, &p)?, "fixed")
        }
        StageQ::Auto if unpinned => {
            let (q, sol) = self_consistent_q(&cfg.test_fn, cfg.alpha(), &mu, p.c)?;
            (q, sol, "self_consistent")
        }
        StageQ::Auto => (p.q, solve_on_grid(cfg, p)?, "order_parameter"),
    };
    run.outf("stage", "q", q);
    run.out("stage", "q_rule", rule);
    run.outf("stage", "functional", sol.value_at_origin() + entropy_part(&sol.order_param, cfg.alpha()));
    Ok((q, sol))
}

fn se_map(cfg: &ExperimentConfig, sol: &Arc<PdeSolution>, q: f64) -> Result<ScalarMap> {
    let alpha = cfg.alpha();
    Ok(match cfg.se.map {
        SeMap::Optimal => ScalarMap::optimal(optimal_f(sol.clone(), q, alpha)?),
        SeMap::AffineTanh { a, b, s } => ScalarMap::new(
            format!("affine_tanh({a:?}, {b:?}, {s:?})"),
            move |v| a + b * (s * v).tanh(),
            move |v| b * s / (s * v).cosh().powi(2),
        )
        .normalized(q, alpha, &NormalRule::new(64))?,
    })
}

fn ks_gaussian(samples: &[f64]) -> f64 {
    ks_one_sample(samples, normal_cdf)
}

fn cmd_run_amp(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let alpha = cfg.alpha();
    let h = &cfg.test_fn;
    let (p, degenerate) = order_param(run)?;
    let (q, sol) = stage_solution(run, &p, degenerate == Some(true))?;
    let functional = sol.value_at_origin() + entropy_part(&sol.order_param, alpha);
    let f_star = ScalarMap::optimal(optimal_f(sol.clone(), q, alpha)?);

    let a = &cfg.amp;
    let mut amp_cfg = AmpConfig::scalar(a.n, a.d, q, cfg.seed);
    amp_cfg.t1 = a.t1;
    amp_cfg.t2 = a.t2;
    amp_cfg.early_stop = a.early_stop;
    amp_cfg.history = a.history;
    let plan = IncrementalPlan::new(PhiSchedule::Control(sol.clone()), q, amp_cfg.alpha(), a.t2, a.plan_samples, cfg.seed)?;
    let amp = run_amp(&amp_cfg, &f_star, &plan, h)?;
    run.emit("amp_run.txt", amp.to_manifest())?;
    run.emit_with("projections.csv", |path| amp.write_projections_csv(path))?;
    run.emit_with("overlap.csv", |path| amp.write_overlap_csv(path))?;
    run.emit_with("w_hat.bin", |path| amp.write_w_hat_binary(path))?;
    let proj = amp.projection_column(0);
    run.emit("hist_projections.csv", histogram_csv(&proj, a.bins, a.hist_lo, a.hist_hi))?;

    let sde = SdeOptions::new(cfg.sde.paths, cfg.sde.dt, cfg.seed);
    let bundle = simulate_sde(sol.clone(), &sde)?;
    let law = projection_from_bundle(&bundle, h, alpha)?;
    run.emit("hist_predicted.csv", histogram_csv(&law.samples, a.bins, a.hist_lo, a.hist_hi))?;
    let report = compare_to_prediction(&proj, &law.samples, h)?;

    let se = simulate_two_stage(&f_star, amp_cfg.alpha(), amp.t1_used, &plan, a.predicted_samples, cfg.seed)?;
    run.emit("hist_discrete.csv", histogram_csv(&se.u, a.bins, a.hist_lo, a.hist_hi))?;
    let discrete = compare_to_prediction(&proj, &se.u, h)?;

    let gap = (amp.objective.mean - functional).abs();
    run.out("amp", "t1_used", amp.t1_used);
    run.outf("amp", "objective", amp.objective.mean);
    run.outf("amp", "objective_stderr", amp.objective.stderr);
    run.outf("amp", "wq_gram_defect", amp.gram_defect());
    run.outf("amp", "orthonormality_error", amp.orthonormality_error());
    run.outf("summary", "functional", functional);
    run.outf("summary", "duality_gap", gap);
    run.out("summary", "duality_gap_passed", gap < cfg.checks.gap);
    run.outf("summary", "ks_sde", report.ks);
    run.out("summary", "ks_sde_passed", report.ks < cfg.checks.ks);
    run.outf("summary", "h_sde", report.h_predicted.mean);
    run.outf("summary", "ks_discrete", discrete.ks);
    run.outf("summary", "h_discrete", discrete.h_predicted.mean);
    run.outf("summary", "ks_gaussian", ks_gaussian(&proj));
    run.outf("summary", "iamp_residual", se.iamp_residual());
    let summary: String = run
        .manifest
        .outputs
        .iter()
        .filter(|(s, _, _)| s == "summary")
        .map(|(_, k, v)| format!("{k} = {v}\n"))
        .collect();
    run.emit("summary.txt", summary)
}

fn cmd_state_evolution(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let alpha = cfg.alpha();
    let (p, degenerate) = order_param(run)?;
    let (q, sol) = stage_solution(run, &p, degenerate == Some(true))?;
    let map = se_map(cfg, &sol, q)?;
    let qm = DMatrix::from_element(1, 1, q);
    let how = Expectation::default_for(1);
    let state = iterate_to_fixed_point(&map, &qm, alpha, cfg.se.max_iter, cfg.se.tol, how)?;
    run.emit("trace.csv", state.to_csv())?;
    run.out("se", "map", map.name());
    run.out("se", "iterations", state.iterations());
    run.out("se", "converged", state.converged);
    run.outf("se", "distance_to_q", state.distance_to_q());
    run.outf("se", "self_overlap", state.self_overlap[(0, 0)]);
    run.outf("se", "min_increment_eig", state.min_increment_eig);

    let probes = default_probes(&qm, 2, cfg.seed);
    let cert = certify_contraction(&map, &qm, alpha, &probes, how, 1e-6)?;
    let mut text = format!(
        "verdict = {:?}\nmoment_residual = {:?}\nmoment_stderr = {:?}\n",
        cert.verdict, cert.moment_residual, cert.moment_stderr
    );
    for pr in &cert.probes {
        let _ = writeln!(text, "probe.{} = margin {:?}, strict {}, holds {}", pr.name, pr.margin, pr.strict, pr.holds);
    }
    run.emit("certificate.txt", text)?;
    run.out("se", "verdict", format!("{:?}", cert.verdict));

    if cfg.se.map == SeMap::Optimal {
        let a = &cfg.amp;
        let plan = IncrementalPlan::new(PhiSchedule::Control(sol.clone()), q, alpha, a.t2, a.plan_samples, cfg.seed)?;
        let se = simulate_two_stage(&map, alpha, a.t1, &plan, cfg.se.samples, cfg.seed)?;
        run.emit("hist_discrete.csv", histogram_csv(&se.u, a.bins, a.hist_lo, a.hist_hi))?;
        let mut cov = String::from("s,t,zbar_cov\n");
        for s in 0..se.zbar_cov.nrows() {
            for t in 0..se.zbar_cov.ncols() {
                let _ = writeln!(cov, "{s},{t},{:?}", se.zbar_cov[(s, t)]);
            }
        }
        run.emit("zbar_covariance.csv", cov)?;
        let hv: Vec<f64> = se.u.iter().map(|&u| cfg.test_fn.eval(u)).collect();
        run.outf("se", "iamp_residual", se.iamp_residual());
        run.outf("se", "h_discrete", exproj_core::stats::mean(&hv));
        run.out("se", "clipped_steps", plan.clipped.iter().filter(|c| **c).count());
    }
    Ok(())
}

/// Paths at `dt` and `dt / 2` for the shrinking-residual check.
fn bundles(cfg: &ExperimentConfig, sol: &Arc<PdeSolution>) -> Result<(SdeBundle, SdeBundle)> {
    let opts = SdeOptions::new(cfg.sde.paths, cfg.sde.dt, cfg.seed);
    let half = SdeOptions::new(cfg.sde.paths, cfg.sde.dt / 2.0, cfg.seed);
    Ok((simulate_sde(sol.clone(), &opts)?, simulate_sde(sol.clone(), &half)?))
}

fn cmd_verify_duality(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let alpha = cfg.alpha();
    let h = &cfg.test_fn;
    let (p, minimized) = order_param(run)?;
    let minimized = minimized.is_some();
    let sol = solve_on_grid(cfg, &p)?;
    let tol = cfg.checks.value_tol;
    let mut lines = String::new();
    let mut all = true;
    let mut check = |lines: &mut String, name: &str, value: f64, passed: bool| {
        let _ = writeln!(lines, "{name} = {value:?}");
        let _ = writeln!(lines, "{name}.passed = {passed}");
        all &= passed;
    };

    let v_grid = value_function(&sol, alpha, 0.0, 0.0)?;
    let v_root = value_function_by_root(&sol, alpha, 0.0, 0.0)?;
    let functional = sol.value_at_origin() + entropy_part(&p, alpha);
    let _ = writeln!(lines, "value_function = {v_grid:?}\nvalue_function_by_root = {v_root:?}\nfunctional = {functional:?}");
    check(&mut lines, "value_routes_gap", (v_grid - v_root).abs(), (v_grid - v_root).abs() <= tol);
    // V(0,0) takes the infimum over x, so it can only sit below the functional
    check(&mut lines, "value_minus_functional", v_grid - functional, v_grid <= functional + tol);

    let sde = SdeOptions::new(cfg.sde.paths, cfg.sde.dt, cfg.seed);
    let mc = control_objective_mc(sol.clone(), h, alpha, 0.0, 0.0, &sde)?;
    let _ = writeln!(lines, "control_objective = {:?}\ncontrol_objective_stderr = {:?}", mc.mean, mc.stderr);
    let gap = (mc.mean - v_grid).abs();
    check(&mut lines, "control_gap", gap, gap <= (3.0 * mc.stderr).max(tol));

    let (coarse, fine) = bundles(cfg, &sol)?;
    let (s, t) = (p.q.max(0.05), 0.95);
    let rc = ito_identity_check(&coarse, s, t)?;
    let rf = ito_identity_check(&fine, s, t)?;
    let _ = writeln!(lines, "ito_residual_stderr = {:?}", rc.residual.stderr);
    check(&mut lines, "ito_residual", rc.residual.mean, rc.residual.within(0.0, 3.0));
    let shrinks = rf.discretization.mean.abs() <= rc.discretization.mean.abs() + 3.0 * rf.discretization.stderr;
    let _ = writeln!(lines, "ito_discretization_coarse = {:?}", rc.discretization.mean);
    check(&mut lines, "ito_discretization_fine", rf.discretization.mean, shrinks);
    let mart = martingale_check(&coarse, 10, 8);
    let _ = writeln!(lines, "martingale_cells = {}", mart.cells);
    let _ = writeln!(lines, "martingale_terminal = {:?}", mart.terminal.mean);
    let _ = writeln!(lines, "martingale_terminal_stderr = {:?}", mart.terminal.stderr);
    check(&mut lines, "martingale_max_abs_z", mart.max_abs_z, mart.passed());

    let knots = p.mu.knots().to_vec();
    let ht = 0.01;
    let mut worst: f64 = 0.0;
    for &t in &[0.3, 0.6, 0.85] {
        if knots.iter().chain(std::iter::once(&p.q)).any(|k| (k - t).abs() < 2.0 * ht) {
            continue;
        }
        for &z in &[-0.5, 0.0, 0.5] {
            worst = worst.max(hjb_residual(&sol, alpha, t, z, ht, 0.05)?.abs());
        }
    }
    check(&mut lines, "hjb_max_abs_residual", worst, worst < 1e-2);

    if minimized {
        // first-order conditions: E phi_t^2 = 1/alpha on [q, 1], E F*(X_q)^2 = alpha q
        let f_star = optimal_f(sol.clone(), p.q, alpha)?;
        let kq = coarse.index_of(p.q);
        let fq: Vec<f64> = coarse.x_col(kq).iter().map(|&x| f_star.eval(x).powi(2)).collect();
        let est = coarse.estimate(&fq);
        check(&mut lines, "f_star_second_moment_gap", est.mean - alpha * p.q, (est.mean - alpha * p.q).abs() <= 3.0 * est.stderr + tol);
        let mut worst_phi: f64 = 0.0;
        let mut ok = true;
        for k in coarse.sample_indices(p.q, 10) {
            let e = coarse.phi_sq(k);
            worst_phi = worst_phi.max((e.mean - 1.0 / alpha).abs());
            ok &= (e.mean - 1.0 / alpha).abs() <= 3.0 * e.stderr + tol;
        }
        check(&mut lines, "phi_second_moment_gap", worst_phi, ok);
    }
    let law = projection_from_bundle(&coarse, h, alpha)?;
    let _ = writeln!(lines, "h_of_u = {:?}", law.h_mean.mean);
    let _ = writeln!(lines, "passed = {all}");
    run.emit("duality.txt", &lines)?;
    for l in lines.lines() {
        if let Some((k, v)) = l.split_once(" = ") {
            run.out("duality", k, v);
        }
    }
    if all {
        Ok(())
    } else {
        Err(CliError::Numerical {
            source: CoreError::Evaluation("one or more duality checks failed".into()),
            report: Some(run.dir.join("duality.txt")),
        })
    }
}
