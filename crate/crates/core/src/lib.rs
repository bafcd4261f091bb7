//! Numerical core: extended Parisi functional, its PDE and control problem,
//! state evolution and a two-stage AMP engine for projection pursuit on
//! Gaussian point clouds.

pub mod amp_engine;
pub mod control_sde;
pub mod error;
pub mod interp;
pub mod order_params;
pub mod parisi_functional;
pub mod parisi_pde;
pub mod quadrature;
pub mod rng;
pub mod state_evolution;
pub mod stats;
pub mod test_functions;

pub use amp_engine::{
    compare_to_prediction, finalize, run_amp, run_stage1, run_stage2, AmpConfig, AmpRun, DataMatrix, PredictionReport,
};
pub use error::{Error, Result};
pub use nalgebra;
pub use order_params::{gamma_at, tail_integral, validate_membership, OrderParam, PiecewiseFn};
pub use parisi_functional::{
    eval_functional, eval_functional_auto, first_variation, minimize, no_ogp_check, sweep_q, FunctionalValue,
    MinimizeOptions, MinimizerResult,
};
pub use parisi_pde::{check_regularity, solve_parisi, Field, PdeSolution, RegularityReport, SpaceTimeGrid};
pub use state_evolution::{
    certify_contraction, iterate_to_fixed_point, psi_map, ContractionCertificate, CovarianceState, Expectation,
    IncrementalPlan, PhiSchedule, ScalarMap, VectorMap,
};
pub use test_functions::{concavify, moreau_terminal, TestFunction};
