//! Denoising networks as score estimators.
//!
//! The minimizer of `E || u(z + eta, x) - z ||^2` with `eta ~ N(0, s^2 I)`
//! satisfies `u(z) ~ z + s^2 d log q(z|x) / dz` for small `s`, so
//! `(u(z) - z) / s^2` estimates the score of the distribution the denoiser
//! was trained on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{NetSpec, ObsEncoding};
use crate::numerics::{AdamState, BatchCache, Binding, MlpParams, Rng, Scalar, Tape};
use crate::ratio::{DiscTrainConfig, FitReport, Pair};

/// Denoiser `u(z_noisy, x) = z_noisy + residual_scale * net(z_noisy, x)`.
///
/// The skip connection makes the all-zero network the identity map, and
/// with `residual_scale = s^2` the raw network output is directly on the
/// scale of the score it encodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserNet {
    pub net: MlpParams,
    pub conditioned_on_x: bool,
    pub encoding: ObsEncoding,
    pub residual_scale: f64,
}

impl DenoiserNet {
    pub fn new(
        latent_dim: usize,
        conditioned_on_x: bool,
        spec: &NetSpec,
        encoding: ObsEncoding,
        sigma: f64,
        rng: &mut Rng,
    ) -> Self {
        let extra = if conditioned_on_x { ObsEncoding::WIDTH } else { 0 };
        DenoiserNet {
            net: MlpParams::new(latent_dim + extra, &spec.hidden, latent_dim, spec.activation, rng),
            conditioned_on_x,
            encoding,
            residual_scale: sigma * sigma,
        }
    }

    pub fn from_net(
        net: MlpParams,
        conditioned_on_x: bool,
        encoding: ObsEncoding,
        residual_scale: f64,
    ) -> Result<Self> {
        net.validate()?;
        let extra = if conditioned_on_x { ObsEncoding::WIDTH } else { 0 };
        Error::check_dim("denoiser input", net.output_dim() + extra, net.input_dim())?;
        Ok(DenoiserNet {
            net,
            conditioned_on_x,
            encoding,
            residual_scale,
        })
    }

    /// The identity denoiser: zero network.
    pub fn identity(latent_dim: usize, conditioned_on_x: bool, spec: &NetSpec, sigma: f64) -> Self {
        let extra = if conditioned_on_x { ObsEncoding::WIDTH } else { 0 };
        DenoiserNet {
            net: MlpParams::zeros(latent_dim + extra, &spec.hidden, latent_dim, spec.activation),
            conditioned_on_x,
            encoding: ObsEncoding::default(),
            residual_scale: sigma * sigma,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.net.output_dim()
    }

    fn input(&self, z_noisy: &[f64], x: f64) -> Vec<f64> {
        let mut v = z_noisy.to_vec();
        if self.conditioned_on_x {
            v.extend(self.encoding.features(x));
        }
        v
    }

    pub fn denoise(&self, z_noisy: &[f64], x: f64) -> Result<Vec<f64>> {
        Error::check_dim("denoiser latent", self.latent_dim(), z_noisy.len())?;
        let out = self.net.eval(&self.input(z_noisy, x))?;
        Ok(z_noisy
            .iter()
            .zip(out)
            .map(|(z, o)| z + self.residual_scale * o)
            .collect())
    }

    fn denoise_tape(&self, tape: &mut Tape, binding: Binding, z_noisy: &[f64], x: f64) -> Result<Vec<Scalar>> {
        let input: Vec<Scalar> = self.input(z_noisy, x).into_iter().map(Scalar::Const).collect();
        let out = self.net.apply(tape, binding, &input)?;
        Ok(z_noisy
            .iter()
            .zip(out)
            .map(|(&z, o)| {
                let scaled = tape.scale(o, self.residual_scale);
                tape.offset(scaled, z)
            })
            .collect())
    }
}

/// Noise level for the denoising loss, optionally annealed geometrically per
/// outer step down to `sigma_min`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub sigma: f64,
    pub anneal: f64,
    pub sigma_min: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            sigma: 0.1,
            anneal: 1.0,
            sigma_min: 0.1,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0) || !(self.sigma >= self.sigma_min) {
            return Err(Error::invalid("noise", "need sigma >= sigma_min > 0"));
        }
        if !(self.anneal > 0.0 && self.anneal <= 1.0) {
            return Err(Error::invalid("anneal", "must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn sigma_at(&self, outer_step: usize) -> f64 {
        (self.sigma * self.anneal.powi(outer_step.min(i32::MAX as usize) as i32)).max(self.sigma_min)
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid("sigma", format!("must be > 0, got {sigma}")))
    }
}

/// Batch-mean of `|| u(z + eta, x) - z ||^2` with fresh noise `eta ~ N(0, sigma^2 I)`.
pub fn denoiser_loss(
    u: &DenoiserNet,
    tape: &mut Tape,
    binding: Binding,
    zs: &[Vec<f64>],
    xs: &[f64],
    rng: &mut Rng,
    sigma: f64,
) -> Result<Scalar> {
    check_sigma(sigma)?;
    Error::check_dim("denoiser batch", zs.len(), xs.len())?;
    if zs.is_empty() {
        return Err(Error::Empty("denoiser batch"));
    }
    let mut terms = Vec::with_capacity(zs.len() * u.latent_dim());
    for (z, &x) in zs.iter().zip(xs) {
        Error::check_dim("denoiser latent", u.latent_dim(), z.len())?;
        let noisy: Vec<f64> = z.iter().map(|v| v + sigma * rng.normal()).collect();
        let out = u.denoise_tape(tape, binding, &noisy, x)?;
        for (o, &target) in out.into_iter().zip(z) {
            let d = tape.offset(o, -target);
            terms.push(tape.square(d));
        }
    }
    let total = tape.sum(&terms);
    Ok(tape.scale(total, 1.0 / zs.len() as f64))
}

/// [`denoiser_loss`] and its parameter gradient via the batched pass. Draws
/// the noise from `rng` in the same order as the tape version.
pub fn denoiser_loss_grad(
    u: &DenoiserNet,
    zs: &[Vec<f64>],
    xs: &[f64],
    rng: &mut Rng,
    sigma: f64,
    cache: &mut BatchCache,
) -> Result<(f64, Vec<f64>)> {
    check_sigma(sigma)?;
    Error::check_dim("denoiser batch", zs.len(), xs.len())?;
    if zs.is_empty() {
        return Err(Error::Empty("denoiser batch"));
    }
    let d = u.latent_dim();
    let mut input = Vec::with_capacity(zs.len() * u.net.input_dim());
    let mut noisy_all = Vec::with_capacity(zs.len() * d);
    for (z, &x) in zs.iter().zip(xs) {
        Error::check_dim("denoiser latent", d, z.len())?;
        let noisy: Vec<f64> = z.iter().map(|v| v + sigma * rng.normal()).collect();
        input.extend(u.input(&noisy, x));
        noisy_all.extend(noisy);
    }
    let out = u.net.forward_batch(&input, zs.len(), cache)?;
    let inv_b = 1.0 / zs.len() as f64;
    let mut loss = 0.0;
    let mut out_grad = Vec::with_capacity(out.len());
    for ((o, noisy), target) in out.iter().zip(&noisy_all).zip(zs.iter().flatten()) {
        let diff = noisy + u.residual_scale * o - target;
        loss += diff * diff;
        out_grad.push(2.0 * inv_b * diff * u.residual_scale);
    }
    let mut grad = vec![0.0; u.net.num_params()];
    u.net.backward_batch(cache, &out_grad, Some(&mut grad), None)?;
    Ok((loss * inv_b, grad))
}

/// `(u(z, x) - z) / sigma^2`, the score estimate at `z`.
pub fn score_from_denoiser(u: &DenoiserNet, z: &[f64], x: f64, sigma: f64) -> Result<Vec<f64>> {
    check_sigma(sigma)?;
    let s2 = sigma * sigma;
    Ok(u.denoise(z, x)?.iter().zip(z).map(|(d, v)| (d - v) / s2).collect())
}

/// Run `cfg.inner_steps` optimizer steps on [`denoiser_loss`]. `sampler`
/// returns `(x, z)` pairs from the distribution whose score is wanted.
pub fn fit_denoiser<F>(
    u: &mut DenoiserNet,
    mut sampler: F,
    cfg: &DiscTrainConfig,
    sigma: f64,
    opt: &mut AdamState,
    rng: &mut Rng,
) -> Result<FitReport>
where
    F: FnMut(&mut Rng, usize) -> Result<Vec<Pair>>,
{
    cfg.validate()?;
    check_sigma(sigma)?;
    let mut cache = BatchCache::default();
    let mut report = FitReport::default();
    for step in 0..cfg.inner_steps {
        let pairs = sampler(rng, cfg.batch)?;
        let xs: Vec<f64> = pairs.iter().map(|p| p.x).collect();
        let zs: Vec<Vec<f64>> = pairs.into_iter().map(|p| p.z).collect();
        let (value, grad) = denoiser_loss_grad(u, &zs, &xs, rng, sigma, &mut cache)?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: "denoiser loss",
                step,
            });
        }
        opt.step(u.net.params_mut(), &grad)?;
        report.steps += 1;
        report.last_loss = value;
    }
    Ok(report)
}

/// JC-Den generator-gradient kernel: `score_p(z|x) - score_q(z|x)`, i.e. an estimate
/// of `-d s(x, z) / dz` for the joint log ratio `s`.
///
/// `u_q` is trained on `x ~ D, z ~ q(z|x)` and `u_p` on ancestral draws from
/// the model joint, both with noise on `z` only.
pub fn joint_scores_from_denoisers(
    u_q: &DenoiserNet,
    u_p: &DenoiserNet,
    x: f64,
    z: &[f64],
    sigma: f64,
) -> Result<Vec<f64>> {
    let sq = score_from_denoiser(u_q, z, x, sigma)?;
    let sp = score_from_denoiser(u_p, z, x, sigma)?;
    Ok(sp.iter().zip(&sq).map(|(p, q)| p - q).collect())
}
