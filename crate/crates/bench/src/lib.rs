//! Fixtures shared by the benchmarks.

use saoosc_core::numkit::RngStream;
use saoosc_core::pipeline::{synthetic_sample, Split};
use saoosc_core::{ExperimentConfig, HvModel, JsccModel, Method, Sample, TrainedSystem};

/// Default config and one rendered test scene.
pub fn scene() -> (ExperimentConfig, Sample) {
    let cfg = ExperimentConfig::default();
    let sample = synthetic_sample(&cfg, Split::Test, 0).expect("default scene renders");
    (cfg, sample)
}

/// Freshly initialized system; weights do not affect the cost being measured.
pub fn untrained(cfg: &ExperimentConfig, method: Method) -> TrainedSystem {
    let mut rng = RngStream::new(cfg.seed);
    let hv = HvModel::new(cfg.hv.clone(), &mut rng).expect("valid codec config");
    let jscc = JsccModel::new(cfg.jscc.clone(), &mut rng).expect("valid jscc config");
    TrainedSystem {
        method,
        hv,
        jscc,
        fixed_k: cfg.training.fixed_k,
    }
}
