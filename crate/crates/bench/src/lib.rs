//! Shared fixtures for the benchmarks.

use ivi_core::infer::{Method, RunState, TrainLoopConfig};
use ivi_core::models::{Dataset, LatentVariableModel, NetSpec};
use ivi_core::numerics::{Activation, Rng};

/// Sprinkler model, a marginal dataset and a fresh run state with `width`-unit
/// two-layer networks.
pub fn sprinkler_setup(method: Method, width: usize) -> (LatentVariableModel, Dataset, TrainLoopConfig, RunState) {
    let model = LatentVariableModel::sprinkler(1.0).unwrap();
    let mut rng = Rng::new(0);
    let data = Dataset::from_model(&model, 10_000, &mut rng).unwrap();
    let mut cfg = TrainLoopConfig::new(method);
    cfg.networks.generator = NetSpec::new(vec![width, width], Activation::Tanh);
    cfg.networks.ratio = NetSpec::new(vec![width, width], Activation::Relu);
    cfg.networks.denoiser = NetSpec::new(vec![width, width], Activation::Tanh);
    cfg.networks.encoding.scale = 10.0;
    let state = RunState::new(&model, &cfg, &mut rng).unwrap();
    (model, data, cfg, state)
}
