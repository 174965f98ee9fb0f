//! Fixtures shared by the kernel benchmarks.

use aoed_core::config::ExperimentConfig;
use aoed_core::experiments::Problem;
use aoed_core::forward::DataSample;
use aoed_core::trace::ProbeSet;

pub struct Fixture {
    pub problem: Problem,
    pub samples: Vec<DataSample>,
    pub probes: ProbeSet,
}

/// Default configuration on a `cells` × `cells` mesh with `n_d` samples and `n_tr` probes.
pub fn fixture(cells: usize, n_d: usize, n_tr: usize) -> Fixture {
    let mut cfg = ExperimentConfig::default();
    cfg.scenario.nx = cells;
    cfg.scenario.ny = cells;
    cfg.oed.n_d = n_d;
    cfg.oed.n_tr = n_tr;
    let problem = Problem::from_config(&cfg).expect("default configuration builds");
    let samples = problem.training_samples(&cfg).expect("samples");
    let probes = ProbeSet::generate(&problem.prior, n_tr, cfg.seed).expect("probes");
    Fixture {
        problem,
        samples,
        probes,
    }
}
