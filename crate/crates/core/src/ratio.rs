//! Log density-ratio estimation with logistic-regression discriminators.
//!
//! A discriminator trained to tell samples of `q` (label 1) from samples of
//! `p` (label 0) with the logistic loss
//!
//! ```text
//!   sum_b softplus(r(p_b)) - softminus(r(q_b))
//! ```
//!
//! is minimized by the log ratio `r*(x, z) = log q / p`. With `p` the prior
//! this estimates the prior-contrastive ratio; with `p` the model joint and
//! `q` the data joint it estimates the joint-contrastive one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{GaussianSpec, LatentVariableModel, NetSpec, ObsEncoding};
use crate::numerics::{
    sigmoid, softminus, softplus, Activation, AdamConfig, AdamState, BatchCache, Binding, MlpParams, Rng, Scalar, Tape,
};

/// An observation paired with a latent.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub x: f64,
    pub z: Vec<f64>,
}

impl Pair {
    pub fn new(x: f64, z: Vec<f64>) -> Self {
        Pair { x, z }
    }
}

/// One minibatch for the logistic loss: `p_side` plays label 0, `q_side` label 1.
#[derive(Clone, Debug, Default)]
pub struct ContrastBatch {
    pub p_side: Vec<Pair>,
    pub q_side: Vec<Pair>,
}

pub fn default_ratio_net() -> NetSpec {
    NetSpec::new(vec![64, 64], Activation::Relu)
}

/// Discriminator producing an unconstrained log ratio over `(x, z)`.
///
/// With `ensemble_weight = lambda > 0` the output is
/// `net(x, z) + lambda * log p(x|z)`, so the network only has to model the
/// residual between the ratio and the model log-likelihood.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioNet {
    pub net: MlpParams,
    pub encoding: ObsEncoding,
    pub ensemble_weight: f64,
}

impl RatioNet {
    pub fn new(latent_dim: usize, spec: &NetSpec, encoding: ObsEncoding, rng: &mut Rng) -> Self {
        RatioNet {
            net: MlpParams::new(ObsEncoding::WIDTH + latent_dim, &spec.hidden, 1, spec.activation, rng),
            encoding,
            ensemble_weight: 0.0,
        }
    }

    pub fn from_net(net: MlpParams, encoding: ObsEncoding) -> Result<Self> {
        net.validate()?;
        Error::check_dim("ratio output", 1, net.output_dim())?;
        Ok(RatioNet {
            net,
            encoding,
            ensemble_weight: 0.0,
        })
    }

    pub fn with_ensemble_weight(mut self, lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::invalid("ensemble_weight", "must lie in [0, 1]"));
        }
        self.ensemble_weight = lambda;
        Ok(self)
    }

    pub fn latent_dim(&self) -> usize {
        self.net.input_dim() - ObsEncoding::WIDTH
    }

    /// The ensemble needs `log p(x|z)`, so the likelihood must be explicit.
    pub fn check_model(&self, model: &LatentVariableModel) -> Result<()> {
        Error::check_dim("ratio latent", model.latent_dim(), self.latent_dim())?;
        if self.ensemble_weight > 0.0 && !model.explicit_likelihood() {
            return Err(Error::Config(
                "ensemble_weight > 0 requires an explicit likelihood".into(),
            ));
        }
        Ok(())
    }

    fn input(&self, x: f64, z: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(ObsEncoding::WIDTH + z.len());
        v.extend(self.encoding.features(x));
        v.extend_from_slice(z);
        v
    }

    /// The network part alone, without the likelihood ensemble term.
    pub fn residual(&self, x: f64, z: &[f64]) -> Result<f64> {
        Error::check_dim("ratio latent", self.latent_dim(), z.len())?;
        Ok(self.net.eval(&self.input(x, z))?[0])
    }

    pub fn eval(&self, model: &LatentVariableModel, x: f64, z: &[f64]) -> Result<f64> {
        let mut out = self.residual(x, z)?;
        if self.ensemble_weight > 0.0 {
            out += self.ensemble_weight * model.likelihood_logpdf(x, z)?;
        }
        Ok(out)
    }

    fn input_matrix<'a>(&self, pairs: impl Iterator<Item = (f64, &'a [f64])>) -> Result<Vec<f64>> {
        let mut m = Vec::new();
        for (x, z) in pairs {
            Error::check_dim("ratio latent", self.latent_dim(), z.len())?;
            m.extend(self.encoding.features(x));
            m.extend_from_slice(z);
        }
        Ok(m)
    }

    /// Values `r(x_b, z_b)` and their gradients with respect to `z_b`.
    pub fn value_and_z_grad(
        &self,
        model: &LatentVariableModel,
        xs: &[f64],
        zs: &[Vec<f64>],
        cache: &mut BatchCache,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        Error::check_dim("ratio batch", xs.len(), zs.len())?;
        let input = self.input_matrix(xs.iter().copied().zip(zs.iter().map(|z| &z[..])))?;
        let mut values = self.net.forward_batch(&input, xs.len(), cache)?.to_vec();
        let mut input_grad = vec![0.0; input.len()];
        self.net
            .backward_batch(cache, &vec![1.0; xs.len()], None, Some(&mut input_grad))?;
        let width = self.net.input_dim();
        let mut grads: Vec<Vec<f64>> = input_grad
            .chunks_exact(width)
            .map(|row| row[ObsEncoding::WIDTH..].to_vec())
            .collect();
        if self.ensemble_weight > 0.0 {
            for ((v, g), (&x, z)) in values.iter_mut().zip(&mut grads).zip(xs.iter().zip(zs)) {
                *v += self.ensemble_weight * model.likelihood_logpdf(x, z)?;
                for (gi, si) in g.iter_mut().zip(model.likelihood_score(x, z)?) {
                    *gi += self.ensemble_weight * si;
                }
            }
        }
        Ok((values, grads))
    }

    /// The log ratio recorded on the tape. `z` may carry gradients (generator
    /// step) and `binding` decides whether the discriminator parameters do.
    pub fn eval_tape(
        &self,
        tape: &mut Tape,
        binding: Binding,
        model: &LatentVariableModel,
        x: f64,
        z: &[Scalar],
    ) -> Result<Scalar> {
        Error::check_dim("ratio latent", self.latent_dim(), z.len())?;
        let mut input: Vec<Scalar> = self.encoding.features(x).into_iter().map(Scalar::Const).collect();
        input.extend_from_slice(z);
        let out = self.net.apply(tape, binding, &input)?[0];
        if self.ensemble_weight > 0.0 {
            let ll = model.likelihood_logpdf_tape(tape, x, z)?;
            let w = tape.scale(ll, self.ensemble_weight);
            Ok(tape.add(out, w))
        } else {
            Ok(out)
        }
    }
}

/// `sum_b softplus(r(p_b)) - softminus(r(q_b))` on the tape.
fn logistic_loss(
    r: &RatioNet,
    tape: &mut Tape,
    binding: Binding,
    model: &LatentVariableModel,
    p_side: &[Pair],
    q_side: &[Pair],
) -> Result<Scalar> {
    let mut terms = Vec::with_capacity(p_side.len() + q_side.len());
    for pair in p_side {
        let z: Vec<Scalar> = pair.z.iter().map(|&v| Scalar::Const(v)).collect();
        let out = r.eval_tape(tape, binding, model, pair.x, &z)?;
        terms.push(tape.softplus(out));
    }
    for pair in q_side {
        let z: Vec<Scalar> = pair.z.iter().map(|&v| Scalar::Const(v)).collect();
        let out = r.eval_tape(tape, binding, model, pair.x, &z)?;
        let sm = tape.softminus(out);
        terms.push(tape.neg(sm));
    }
    Ok(tape.sum(&terms))
}

/// The logistic loss and its gradient in the network parameters, computed
/// with the batched forward/backward pass instead of a tape.
pub fn logistic_loss_grad(
    r: &RatioNet,
    model: &LatentVariableModel,
    batch: &ContrastBatch,
    cache: &mut BatchCache,
) -> Result<(f64, Vec<f64>)> {
    let n_p = batch.p_side.len();
    let pairs = batch.p_side.iter().chain(&batch.q_side);
    let input = r.input_matrix(pairs.clone().map(|p| (p.x, &p.z[..])))?;
    let rows = n_p + batch.q_side.len();
    let mut out = r.net.forward_batch(&input, rows, cache)?.to_vec();
    if r.ensemble_weight > 0.0 {
        for (o, p) in out.iter_mut().zip(pairs) {
            *o += r.ensemble_weight * model.likelihood_logpdf(p.x, &p.z)?;
        }
    }
    let mut loss = 0.0;
    let mut out_grad = Vec::with_capacity(rows);
    for (i, &o) in out.iter().enumerate() {
        if i < n_p {
            loss += softplus(o);
            out_grad.push(sigmoid(o));
        } else {
            loss -= softminus(o);
            out_grad.push(-sigmoid(-o));
        }
    }
    let mut grad = vec![0.0; r.net.num_params()];
    r.net.backward_batch(cache, &out_grad, Some(&mut grad), None)?;
    Ok((loss, grad))
}

/// Prior-contrastive discriminator loss. `z_prior[b]` and `z_q[b]` are both
/// paired with observation `xs[b]`.
pub fn pc_disc_loss(
    r: &RatioNet,
    tape: &mut Tape,
    binding: Binding,
    model: &LatentVariableModel,
    xs: &[f64],
    z_prior: &[Vec<f64>],
    z_q: &[Vec<f64>],
) -> Result<Scalar> {
    Error::check_dim("prior batch", xs.len(), z_prior.len())?;
    Error::check_dim("posterior batch", xs.len(), z_q.len())?;
    let p: Vec<Pair> = xs.iter().zip(z_prior).map(|(&x, z)| Pair::new(x, z.clone())).collect();
    let q: Vec<Pair> = xs.iter().zip(z_q).map(|(&x, z)| Pair::new(x, z.clone())).collect();
    logistic_loss(r, tape, binding, model, &p, &q)
}

/// Joint-contrastive discriminator loss: `q_side` pairs are `x ~ D, z ~ q(z|x)`,
/// `p_side` pairs are ancestral draws from the model joint.
pub fn jc_disc_loss(
    s: &RatioNet,
    tape: &mut Tape,
    binding: Binding,
    model: &LatentVariableModel,
    q_side: &[Pair],
    p_side: &[Pair],
) -> Result<Scalar> {
    Error::check_dim("joint batch", q_side.len(), p_side.len())?;
    logistic_loss(s, tape, binding, model, p_side, q_side)
}

/// Inner-loop settings shared by discriminators and denoisers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscTrainConfig {
    pub inner_steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for DiscTrainConfig {
    fn default() -> Self {
        DiscTrainConfig {
            inner_steps: 5,
            batch: 128,
            lr: 1e-3,
        }
    }
}

impl DiscTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::invalid("batch", "must be >= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("lr", "must be > 0"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr)
    }
}

/// Summary of one inner fit.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FitReport {
    pub steps: usize,
    /// Loss of the final step (before its update), summed over the batch.
    pub last_loss: f64,
}

/// Run `cfg.inner_steps` optimizer steps on the logistic loss, drawing a fresh
/// batch from `sampler` every step.
///
/// The optimizer state is owned by the caller; nothing else survives the call
/// besides the updated network parameters.
pub fn fit_ratio<F>(
    r: &mut RatioNet,
    model: &LatentVariableModel,
    mut sampler: F,
    cfg: &DiscTrainConfig,
    opt: &mut AdamState,
    rng: &mut Rng,
) -> Result<FitReport>
where
    F: FnMut(&mut Rng, usize) -> Result<ContrastBatch>,
{
    cfg.validate()?;
    r.check_model(model)?;
    let mut cache = BatchCache::default();
    let mut report = FitReport::default();
    for step in 0..cfg.inner_steps {
        let batch = sampler(rng, cfg.batch)?;
        let (value, grad) = logistic_loss_grad(r, model, &batch, &mut cache)?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: "discriminator loss",
                step,
            });
        }
        opt.step(r.net.params_mut(), &grad)?;
        report.steps += 1;
        report.last_loss = value;
    }
    Ok(report)
}

/// Loss of `r` on a batch without building gradients.
pub fn eval_logistic_loss(r: &RatioNet, model: &LatentVariableModel, batch: &ContrastBatch) -> Result<f64> {
    let mut total = 0.0;
    for pair in &batch.p_side {
        total += softplus(r.eval(model, pair.x, &pair.z)?);
    }
    for pair in &batch.q_side {
        total -= softminus(r.eval(model, pair.x, &pair.z)?);
    }
    Ok(total)
}

/// `log q(z) - log p(z)` for diagonal Gaussians.
pub fn analytic_gaussian_log_ratio(q: &GaussianSpec, p: &GaussianSpec, z: &[f64]) -> Result<f64> {
    Ok(q.logpdf(z)? - p.logpdf(z)?)
}
