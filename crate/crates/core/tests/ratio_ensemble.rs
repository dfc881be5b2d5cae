//! With q equal to the exact posterior, the prior-contrastive log ratio is
//! `log p(x|z) - log p(x)`. Adding `log p(x|z)` to the network output leaves
//! only the z-independent part for the network to learn.

use ivi_core::eval::GridSpec;
use ivi_core::models::{exact_posterior, LatentVariableModel, NetSpec, ObsEncoding};
use ivi_core::numerics::{Activation, AdamState, Rng};
use ivi_core::ratio::{fit_ratio, ContrastBatch, DiscTrainConfig, Pair, RatioNet};

fn train(lambda: f64, model: &LatentVariableModel) -> RatioNet {
    let mut rng = Rng::new(31);
    let mut r = RatioNet::new(
        2,
        &NetSpec::new(vec![32, 32], Activation::Relu),
        ObsEncoding::default(),
        &mut rng,
    )
    .with_ensemble_weight(lambda)
    .unwrap();
    let cfg = DiscTrainConfig {
        inner_steps: 3000,
        batch: 256,
        lr: 1e-3,
    };
    let mut opt = AdamState::new("phi", r.net.num_params(), cfg.adam());
    let sampler = |rng: &mut Rng, b: usize| {
        let mut batch = ContrastBatch::default();
        for _ in 0..b {
            let (x, _) = model.sample_joint(rng);
            batch.p_side.push(Pair::new(x, model.sample_prior(rng)));
            let post = exact_posterior(&[1.0, 1.0], 1.0, x)?;
            batch.q_side.push(Pair::new(x, post.sample(rng)));
        }
        Ok(batch)
    };
    fit_ratio(&mut r, model, sampler, &cfg, &mut opt, &mut rng).unwrap();
    r
}

fn variance(values: &[f64]) -> f64 {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64
}

#[test]
fn ensemble_residual_varies_less_than_full_ratio() {
    let model = LatentVariableModel::linear_gaussian(vec![1.0, 1.0], 1.0).unwrap();
    let full = train(0.0, &model);
    let ensemble = train(1.0, &model);
    let grid = GridSpec::square(2.5, 25);
    for x in [-1.0, 0.0, 1.5] {
        let r_full: Vec<f64> = (0..grid.len())
            .map(|k| full.eval(&model, x, &grid.center(k)).unwrap())
            .collect();
        let residual: Vec<f64> = (0..grid.len())
            .map(|k| ensemble.residual(x, &grid.center(k)).unwrap())
            .collect();
        let (vf, vr) = (variance(&r_full), variance(&residual));
        assert!(vr <= vf, "x={x}: residual variance {vr} vs full {vf}");
    }
}
