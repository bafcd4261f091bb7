use std::sync::OnceLock;

use exproj_core::amp_engine::self_consistent_q;
use exproj_core::control_sde::optimal_f;
use exproj_core::*;
use proptest::prelude::*;

const ALPHA: f64 = 4.0;

fn perceptron() -> TestFunction {
    TestFunction::perceptron(-1.0, 1e-2).unwrap()
}

fn small_run(seed: u64) -> AmpRun {
    let h = perceptron();
    let (q, sol) = self_consistent_q(&h, ALPHA, &PiecewiseFn::zero(), 1e4).unwrap();
    let f = ScalarMap::optimal(optimal_f(sol.clone(), q, ALPHA).unwrap());
    let mut cfg = AmpConfig::scalar(2000, 500, q, seed);
    cfg.t2 = 16;
    let plan = IncrementalPlan::new(PhiSchedule::Control(sol), q, ALPHA, cfg.t2, 20_000, 1).unwrap();
    run_amp(&cfg, &f, &plan, &h).unwrap()
}

fn shared_run() -> &'static AmpRun {
    static RUN: OnceLock<AmpRun> = OnceLock::new();
    RUN.get_or_init(|| small_run(3))
}

#[test]
fn finalized_direction_is_unit() {
    assert!(shared_run().orthonormality_error() < 1e-10);
}

#[test]
fn identical_configs_give_identical_runs() {
    let (a, b) = (small_run(5), small_run(5));
    assert_eq!(a.data_checksum, b.data_checksum);
    assert!(a.w_hat.iter().zip(&b.w_hat).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(a.projections.iter().zip(&b.projections).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_ne!(small_run(6).data_checksum, a.data_checksum);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn objective_never_beats_the_functional(level in 0.0f64..3.0, c in 0.2f64..5.0, q in 0.05f64..0.6) {
        let run = shared_run();
        // valid order parameters vanish below q
        let mu = PiecewiseFn::indicator(q, 1.0, level).unwrap();
        let p = OrderParam::new(mu, c, q).unwrap();
        let bound = eval_functional_auto(&perceptron(), &p, ALPHA, 801).unwrap().total;
        let slack = 3.0 * run.objective.stderr;
        prop_assert!(run.objective.mean <= bound + slack, "H = {} > F = {bound}", run.objective.mean);
    }
}
