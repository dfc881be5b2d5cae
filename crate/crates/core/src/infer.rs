//! Outer-loop variational inference with implicit posteriors.
//!
//! Every method alternates `K` inner steps on an auxiliary network (a log
//! ratio discriminator or a denoiser) with one Adam step on the generator
//! `g_psi(x, eps)`. During the generator step the auxiliary network is held
//! fixed: its parameters never receive adjoints, so gradients reach `psi`
//! only through the sampled latents `z = g_psi(x, eps)`.
//!
//! | method   | auxiliary nets                        | generator gradient                     |
//! |----------|---------------------------------------|----------------------------------------|
//! | `pc_adv` | ratio `r(x, z) ~ log q(z|x) / p(z)`   | `d/dpsi mean[r - log p(x|z)]`          |
//! | `jc_adv` | ratio `s(x, z) ~ log q p_D / p(x, z)` | `d/dpsi mean[s]`                       |
//! | `pc_den` | denoiser for `q` (+ prior denoiser)   | `-J^T [dlog p(x,z)/dz + (z - u(z))/s^2]` |
//! | `jc_den` | denoisers for `q` and the model joint | `-J^T [score_p - score_q]`             |
//! | `hybrid` | ratio and denoiser                    | `a * pc_adv + (1 - a) * pc_den`        |
//!
//! The model parameters are never updated.

use serde::{Deserialize, Serialize};

use crate::denoise::{fit_denoiser, joint_scores_from_denoisers, score_from_denoiser, DenoiserNet, NoiseConfig};
use crate::error::{Error, Result};
use crate::models::{Dataset, ImplicitPosterior, LatentVariableModel, NetSpec, ObsEncoding};
use crate::numerics::{Activation, AdamConfig, AdamState, BatchCache, Binding, Rng, Scalar, Tape};
use crate::ratio::{fit_ratio, ContrastBatch, DiscTrainConfig, FitReport, Pair, RatioNet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    PcAdv,
    JcAdv,
    PcDen,
    JcDen,
    Hybrid,
}

impl Method {
    pub fn uses_ratio(self) -> bool {
        matches!(self, Method::PcAdv | Method::JcAdv | Method::Hybrid)
    }

    pub fn uses_denoiser(self) -> bool {
        matches!(self, Method::PcDen | Method::JcDen | Method::Hybrid)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::PcAdv => "pc_adv",
            Method::JcAdv => "jc_adv",
            Method::PcDen => "pc_den",
            Method::JcDen => "jc_den",
            Method::Hybrid => "hybrid",
        }
    }
}

/// Architecture of the generator and the auxiliary networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub noise_dim: usize,
    pub generator: NetSpec,
    pub ratio: NetSpec,
    pub denoiser: NetSpec,
    pub encoding: ObsEncoding,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            noise_dim: 8,
            generator: NetSpec::default(),
            ratio: crate::ratio::default_ratio_net(),
            denoiser: NetSpec::new(vec![64, 64], Activation::Tanh),
            encoding: ObsEncoding::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainLoopConfig {
    pub method: Method,
    #[serde(default = "defaults::outer_steps")]
    pub outer_steps: usize,
    /// Minibatch size for both the inner fits and the generator step.
    #[serde(default = "defaults::batch")]
    pub batch: usize,
    #[serde(default = "defaults::inner_steps")]
    pub inner_steps: usize,
    #[serde(default = "defaults::lr")]
    pub inner_lr: f64,
    #[serde(default = "defaults::lr")]
    pub psi_lr: f64,
    /// Generator learning rate at the last outer step; the rate moves linearly
    /// from `psi_lr` to this value. Constant when absent.
    #[serde(default)]
    pub psi_lr_final: Option<f64>,
    #[serde(default)]
    pub noise: NoiseConfig,
    /// Keep auxiliary network weights and Adam moments across outer steps.
    /// When false both are re-initialized before every inner fit.
    #[serde(default = "defaults::yes")]
    pub warm_start_inner: bool,
    /// Weight of the adversarial gradient in the hybrid method.
    #[serde(default = "defaults::alpha")]
    pub hybrid_alpha: f64,
    /// Weight of `log p(x|z)` added to the prior-contrastive ratio output.
    #[serde(default)]
    pub ensemble_weight: f64,
    /// Estimate the prior score with a denoiser even when the prior density is explicit.
    #[serde(default)]
    pub prior_denoiser: bool,
    #[serde(default)]
    pub networks: NetworkConfig,
}

mod defaults {
    pub fn outer_steps() -> usize {
        3000
    }
    pub fn batch() -> usize {
        128
    }
    pub fn inner_steps() -> usize {
        5
    }
    pub fn lr() -> f64 {
        1e-3
    }
    pub fn yes() -> bool {
        true
    }
    pub fn alpha() -> f64 {
        0.5
    }
}

impl TrainLoopConfig {
    pub fn new(method: Method) -> Self {
        TrainLoopConfig {
            method,
            outer_steps: defaults::outer_steps(),
            batch: defaults::batch(),
            inner_steps: defaults::inner_steps(),
            inner_lr: defaults::lr(),
            psi_lr: defaults::lr(),
            psi_lr_final: None,
            noise: NoiseConfig::default(),
            warm_start_inner: true,
            hybrid_alpha: defaults::alpha(),
            ensemble_weight: 0.0,
            prior_denoiser: false,
            networks: NetworkConfig::default(),
        }
    }

    pub fn inner(&self) -> DiscTrainConfig {
        DiscTrainConfig {
            inner_steps: self.inner_steps,
            batch: self.batch,
            lr: self.inner_lr,
        }
    }

    /// Generator learning rate used at outer step `step`.
    pub fn psi_lr_at(&self, step: usize) -> f64 {
        match self.psi_lr_final {
            Some(last) if self.outer_steps > 1 => {
                let t = (step.min(self.outer_steps - 1)) as f64 / (self.outer_steps - 1) as f64;
                self.psi_lr + t * (last - self.psi_lr)
            }
            _ => self.psi_lr,
        }
    }

    fn uses_prior_denoiser(&self, model: &LatentVariableModel) -> bool {
        matches!(self.method, Method::PcDen | Method::Hybrid) && (self.prior_denoiser || !model.explicit_prior())
    }

    /// Checks that do not depend on the model.
    pub fn validate(&self) -> Result<()> {
        self.inner().validate()?;
        if !(self.psi_lr > 0.0) {
            return Err(Error::invalid("psi_lr", "must be > 0"));
        }
        if self.psi_lr_final.is_some_and(|lr| !(lr > 0.0)) {
            return Err(Error::invalid("psi_lr_final", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.hybrid_alpha) {
            return Err(Error::invalid("hybrid_alpha", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.ensemble_weight) {
            return Err(Error::invalid("ensemble_weight", "must lie in [0, 1]"));
        }
        if self.networks.noise_dim == 0 {
            return Err(Error::invalid("noise_dim", "must be >= 1"));
        }
        if !(self.networks.encoding.scale > 0.0) {
            return Err(Error::invalid("encoding.scale", "must be > 0"));
        }
        self.noise.validate()
    }

    /// Checks that the method can run on `model`.
    pub fn validate_for(&self, model: &LatentVariableModel) -> Result<()> {
        self.validate()?;
        let needs_likelihood = match self.method {
            Method::PcAdv | Method::PcDen | Method::Hybrid => true,
            Method::JcAdv => self.ensemble_weight > 0.0,
            Method::JcDen => false,
        };
        if needs_likelihood && !model.explicit_likelihood() {
            return Err(Error::Config(format!(
                "{} needs an explicit likelihood log p(x|z)",
                self.method.name()
            )));
        }
        if self.method == Method::JcAdv && self.ensemble_weight > 0.0 {
            return Err(Error::Config(
                "ensemble_weight applies to the prior-contrastive ratio only".into(),
            ));
        }
        Ok(())
    }
}

/// An auxiliary network with its optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trained<N> {
    pub net: N,
    pub opt: AdamState,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Last inner-step loss per batch element; absent when no inner steps ran.
    pub inner_loss: Option<f64>,
    /// Generator objective of the adversarial methods.
    pub psi_objective: Option<f64>,
    pub elbo_estimate: Option<f64>,
    pub psi_displacement_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub posterior: ImplicitPosterior,
    pub psi_opt: AdamState,
    pub ratio: Option<Trained<RatioNet>>,
    /// Denoiser for `q(z|x)`.
    pub denoiser_q: Option<Trained<DenoiserNet>>,
    /// Denoiser for the model side: the prior (pc_den, hybrid) or the joint (jc_den).
    pub denoiser_p: Option<Trained<DenoiserNet>>,
    step: usize,
    pub history: Vec<StepRecord>,
}

fn new_ratio(model: &LatentVariableModel, cfg: &TrainLoopConfig, rng: &mut Rng) -> Result<Trained<RatioNet>> {
    let net = RatioNet::new(model.latent_dim(), &cfg.networks.ratio, cfg.networks.encoding, rng)
        .with_ensemble_weight(cfg.ensemble_weight)?;
    let opt = AdamState::new("ratio", net.net.num_params(), AdamConfig::with_lr(cfg.inner_lr));
    Ok(Trained { net, opt })
}

fn new_denoiser(
    label: &str,
    conditioned: bool,
    model: &LatentVariableModel,
    cfg: &TrainLoopConfig,
    rng: &mut Rng,
) -> Trained<DenoiserNet> {
    let net = DenoiserNet::new(
        model.latent_dim(),
        conditioned,
        &cfg.networks.denoiser,
        cfg.networks.encoding,
        cfg.noise.sigma,
        rng,
    );
    let opt = AdamState::new(label, net.net.num_params(), AdamConfig::with_lr(cfg.inner_lr));
    Trained { net, opt }
}

impl RunState {
    /// Fresh generator and the auxiliary networks `cfg.method` needs.
    pub fn new(model: &LatentVariableModel, cfg: &TrainLoopConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate_for(model)?;
        let posterior = ImplicitPosterior::new(
            model.latent_dim(),
            cfg.networks.noise_dim,
            &cfg.networks.generator,
            cfg.networks.encoding,
            rng,
        );
        let psi_opt = AdamState::new(
            "generator",
            posterior.generator.num_params(),
            AdamConfig::with_lr(cfg.psi_lr),
        );
        let mut state = RunState {
            posterior,
            psi_opt,
            ratio: None,
            denoiser_q: None,
            denoiser_p: None,
            step: 0,
            history: Vec::new(),
        };
        state.init_auxiliary(model, cfg, rng)?;
        Ok(state)
    }

    fn init_auxiliary(&mut self, model: &LatentVariableModel, cfg: &TrainLoopConfig, rng: &mut Rng) -> Result<()> {
        self.ratio = if cfg.method.uses_ratio() {
            Some(new_ratio(model, cfg, rng)?)
        } else {
            None
        };
        self.denoiser_q = if cfg.method.uses_denoiser() {
            Some(new_denoiser("denoiser_q", true, model, cfg, rng))
        } else {
            None
        };
        self.denoiser_p = if cfg.method == Method::JcDen {
            Some(new_denoiser("denoiser_joint", true, model, cfg, rng))
        } else if cfg.uses_prior_denoiser(model) {
            Some(new_denoiser("denoiser_prior", false, model, cfg, rng))
        } else {
            None
        };
        Ok(())
    }

    /// Number of completed outer steps.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn psi(&self) -> &[f64] {
        self.posterior.generator.params()
    }

    /// Checks that a loaded state has the network layout `cfg` would build
    /// for `model`. Parameter values are not compared.
    pub fn check_compatible(&self, model: &LatentVariableModel, cfg: &TrainLoopConfig) -> Result<()> {
        let expected = RunState::new(model, cfg, &mut Rng::new(0))?;
        let mismatch = |what: &str| Err(Error::Config(format!("snapshot does not match config: {what}")));
        if self.posterior.noise_dim != expected.posterior.noise_dim {
            return mismatch("noise_dim");
        }
        if self.posterior.encoding != expected.posterior.encoding {
            return mismatch("observation encoding");
        }
        if self.posterior.generator.layers() != expected.posterior.generator.layers() {
            return mismatch("generator layers");
        }
        let ratio_layers = |s: &RunState| {
            s.ratio
                .as_ref()
                .map(|t| (t.net.net.layers().to_vec(), t.net.ensemble_weight))
        };
        if ratio_layers(self) != ratio_layers(&expected) {
            return mismatch("ratio network");
        }
        let den_layers = |d: &Option<Trained<DenoiserNet>>| {
            d.as_ref()
                .map(|t| (t.net.net.layers().to_vec(), t.net.conditioned_on_x))
        };
        if den_layers(&self.denoiser_q) != den_layers(&expected.denoiser_q)
            || den_layers(&self.denoiser_p) != den_layers(&expected.denoiser_p)
        {
            return mismatch("denoiser networks");
        }
        Ok(())
    }

    fn ratio_ref(&self) -> Result<&RatioNet> {
        self.ratio
            .as_ref()
            .map(|t| &t.net)
            .ok_or_else(|| Error::Config("run state has no ratio network".into()))
    }
}

/// Per-parameter generator gradient and how it was obtained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub values: Vec<f64>,
    pub provenance: Provenance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Adversarial,
    Denoising,
    Hybrid,
}

impl GradientEstimate {
    pub fn new(values: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                label: "generator".into(),
                index,
            });
        }
        Ok(GradientEstimate { values, provenance })
    }
}

/// `alpha * adv + (1 - alpha) * den`.
pub fn hybrid_gradient(adv: &GradientEstimate, den: &GradientEstimate, alpha: f64) -> Result<GradientEstimate> {
    Error::check_dim("hybrid gradient", adv.values.len(), den.values.len())?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("alpha", "must lie in [0, 1]"));
    }
    let values = adv
        .values
        .iter()
        .zip(&den.values)
        .map(|(a, d)| alpha * a + (1.0 - alpha) * d)
        .collect();
    GradientEstimate::new(values, Provenance::Hybrid)
}

/// Read-only view of a ratio network for the generator step: the network is
/// evaluated with constant parameters, so no adjoint ever reaches them.
#[derive(Clone, Copy, Debug)]
pub struct FrozenRatio<'a> {
    net: &'a RatioNet,
}

pub fn freeze_ratio_for_psi_step(r: &RatioNet) -> FrozenRatio<'_> {
    FrozenRatio { net: r }
}

impl FrozenRatio<'_> {
    pub fn eval_tape(&self, tape: &mut Tape, model: &LatentVariableModel, x: f64, z: &[Scalar]) -> Result<Scalar> {
        self.net.eval_tape(tape, Binding::Frozen, model, x, z)
    }

    pub fn eval(&self, model: &LatentVariableModel, x: f64, z: &[f64]) -> Result<f64> {
        self.net.eval(model, x, z)
    }

    pub fn value_and_z_grad(
        &self,
        model: &LatentVariableModel,
        xs: &[f64],
        zs: &[Vec<f64>],
        cache: &mut BatchCache,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        self.net.value_and_z_grad(model, xs, zs, cache)
    }
}

/// Which log ratio the adversarial objective uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Contrast {
    /// `mean[r(x, z) - log p(x|z)]`, the negative ELBO up to the ratio error.
    Prior,
    /// `mean[s(x, z)]`.
    Joint,
}

/// Gradient of the adversarial generator objective at noise `eps`, with the
/// ratio frozen. Returns the gradient and the objective value.
pub fn adversarial_gradient(
    q: &ImplicitPosterior,
    ratio: FrozenRatio<'_>,
    model: &LatentVariableModel,
    contrast: Contrast,
    xs: &[f64],
    eps: &[Vec<f64>],
) -> Result<(GradientEstimate, f64)> {
    if xs.is_empty() {
        return Err(Error::Empty("generator batch"));
    }
    let mut gen_cache = BatchCache::default();
    let zs = q.generate_batch(xs, eps, &mut gen_cache)?;
    let (values, dz) = ratio.value_and_z_grad(model, xs, &zs, &mut BatchCache::default())?;
    let inv_b = 1.0 / xs.len() as f64;
    let mut objective = 0.0;
    let mut out_grad = Vec::with_capacity(xs.len() * q.latent_dim());
    for ((&x, z), (v, g)) in xs.iter().zip(&zs).zip(values.iter().zip(&dz)) {
        match contrast {
            Contrast::Prior => {
                objective += v - model.likelihood_logpdf(x, z)?;
                let s = model.likelihood_score(x, z)?;
                out_grad.extend(g.iter().zip(&s).map(|(g, s)| (g - s) * inv_b));
            }
            Contrast::Joint => {
                objective += v;
                out_grad.extend(g.iter().map(|g| g * inv_b));
            }
        }
    }
    let mut grad = vec![0.0; q.generator.num_params()];
    q.generator
        .backward_batch(&gen_cache, &out_grad, Some(&mut grad), None)?;
    Ok((GradientEstimate::new(grad, Provenance::Adversarial)?, objective * inv_b))
}

/// Descent direction on the negative ELBO from a per-sample score kernel:
/// `-(1/B) sum_b J_b^T k(x_b, z_b)` with `J_b = dg(x_b, eps_b)/dpsi`.
///
/// `kernel(x, z)` estimates `d/dz [log p(x, z) - log q(z|x)]`.
pub fn denoising_gradient<K>(
    q: &ImplicitPosterior,
    xs: &[f64],
    eps: &[Vec<f64>],
    mut kernel: K,
) -> Result<GradientEstimate>
where
    K: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    if xs.is_empty() {
        return Err(Error::Empty("generator batch"));
    }
    let mut gen_cache = BatchCache::default();
    let zs = q.generate_batch(xs, eps, &mut gen_cache)?;
    let inv_b = 1.0 / xs.len() as f64;
    let mut out_grad = Vec::with_capacity(xs.len() * q.latent_dim());
    for (&x, z) in xs.iter().zip(&zs) {
        let k = kernel(x, z)?;
        Error::check_dim("score kernel", z.len(), k.len())?;
        out_grad.extend(k.iter().map(|v| -v * inv_b));
    }
    let mut grad = vec![0.0; q.generator.num_params()];
    q.generator
        .backward_batch(&gen_cache, &out_grad, Some(&mut grad), None)?;
    GradientEstimate::new(grad, Provenance::Denoising)
}

/// Monte-Carlo ELBO `mean_b[log p(x_b|z_b) - ratio(x_b, z_b)]` for given latents.
pub fn elbo_from_samples<F>(model: &LatentVariableModel, xs: &[f64], zs: &[Vec<f64>], mut ratio: F) -> Result<f64>
where
    F: FnMut(f64, &[f64]) -> Result<f64>,
{
    Error::check_dim("elbo batch", xs.len(), zs.len())?;
    if xs.is_empty() {
        return Err(Error::Empty("elbo batch"));
    }
    let mut total = 0.0;
    for (&x, z) in xs.iter().zip(zs) {
        total += model.likelihood_logpdf(x, z)? - ratio(x, z)?;
    }
    Ok(total / xs.len() as f64)
}

/// ELBO estimate with the current generator and prior-contrastive ratio.
pub fn elbo_monitor(state: &RunState, model: &LatentVariableModel, xs: &[f64], rng: &mut Rng) -> Result<f64> {
    let r = state.ratio_ref()?;
    let zs = state.posterior.sample_batch(xs, rng);
    elbo_from_samples(model, xs, &zs, |x, z| r.eval(model, x, z))
}

fn psi_batch(state: &RunState, data: &Dataset, batch: usize, rng: &mut Rng) -> (Vec<f64>, Vec<Vec<f64>>) {
    let xs = data.batch(rng, batch);
    let eps = xs.iter().map(|_| state.posterior.draw_noise(rng)).collect();
    (xs, eps)
}

/// Applies the Adam step and records the outer step.
fn finish_step(
    state: &mut RunState,
    cfg: &TrainLoopConfig,
    grad: &GradientEstimate,
    inner: Option<FitReport>,
    per_pair: f64,
    psi_objective: Option<f64>,
    elbo_estimate: Option<f64>,
) -> Result<StepRecord> {
    let before = state.posterior.generator.params().to_vec();
    state.psi_opt.config.lr = cfg.psi_lr_at(state.step);
    state
        .psi_opt
        .step(state.posterior.generator.params_mut(), &grad.values)?;
    let psi_displacement_norm = before
        .iter()
        .zip(state.posterior.generator.params())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let record = StepRecord {
        step: state.step,
        inner_loss: inner.filter(|r| r.steps > 0).map(|r| r.last_loss * per_pair),
        psi_objective,
        elbo_estimate,
        psi_displacement_norm,
    };
    state.step += 1;
    state.history.push(record.clone());
    Ok(record)
}

fn restart_inner(
    state: &mut RunState,
    model: &LatentVariableModel,
    cfg: &TrainLoopConfig,
    rng: &mut Rng,
) -> Result<()> {
    if !cfg.warm_start_inner {
        state.init_auxiliary(model, cfg, rng)?;
    }
    Ok(())
}

fn fit_pc_ratio(
    state: &mut RunState,
    model: &LatentVariableModel,
    data: &Dataset,
    cfg: &TrainLoopConfig,
    rng: &mut Rng,
) -> Result<FitReport> {
    let posterior = &state.posterior;
    let ratio = state
        .ratio
        .as_mut()
        .ok_or_else(|| Error::Config("run state has no ratio network".into()))?;
    let sampler = |rng: &mut Rng, b: usize| -> Result<ContrastBatch> {
        let xs = data.batch(rng, b);
        let p_side = xs.iter().map(|&x| Pair::new(x, model.sample_prior(rng))).collect();
        let zq = posterior.sample_batch(&xs, rng);
        let q_side = xs.iter().zip(zq).map(|(&x, z)| Pair::new(x, z)).collect();
        Ok(ContrastBatch { p_side, q_side })
    };
    fit_ratio(&mut ratio.net, model, sampler, &cfg.inner(), &mut ratio.opt, rng)
}

fn fit_jc_ratio(
    state: &mut RunState,
    model: &LatentVariableModel,
    data: &Dataset,
    cfg: &TrainLoopConfig,
    rng: &mut Rng,
) -> Result<FitReport> {
    let posterior = &state.posterior;
    let ratio = state
        .ratio
        .as_mut()
        .ok_or_else(|| Error::Config("run state has no ratio network".into()))?;
    let sampler = |rng: &mut Rng, b: usize| -> Result<ContrastBatch> {
        let xs = data.batch(rng, b);
        let zq = posterior.sample_batch(&xs, rng);
        let q_side = xs.iter().zip(zq).map(|(&x, z)| Pair::new(x, z)).collect();
        let p_side = (0..b)
            .map(|_| {
                let (x, z) = model.sample_joint(rng);
                Pair::new(x, z)
            })
            .collect();
        Ok(ContrastBatch { p_side, q_side })
    };
    fit_ratio(&mut ratio.net, model, sampler, &cfg.inner(), &mut ratio.opt, rng)
}

/// Fits the posterior denoiser and, when present, the model-side denoiser.
/// Returns the report of the posterior denoiser.
fn fit_denoisers(
    state: &mut RunState,
    model: &LatentVariableModel,
    data: &Dataset,
    cfg: &TrainLoopConfig,
    joint: bool,
    sigma: f64,
    rng: &mut Rng,
) -> Result<FitReport> {
    let posterior = &state.posterior;
    let u_q = state
        .denoiser_q
        .as_mut()
        .ok_or_else(|| Error::Config("run state has no posterior denoiser".into()))?;
    let q_sampler = |rng: &mut Rng, b: usize| -> Result<Vec<Pair>> {
        let xs = data.batch(rng, b);
        let zq = posterior.sample_batch(&xs, rng);
        Ok(xs.iter().zip(zq).map(|(&x, z)| Pair::new(x, z)).collect())
    };
    let report = fit_denoiser(&mut u_q.net, q_sampler, &cfg.inner(), sigma, &mut u_q.opt, rng)?;
    if let Some(u_p) = state.denoiser_p.as_mut() {
        let p_sampler = |rng: &mut Rng, b: usize| -> Result<Vec<Pair>> {
            Ok((0..b)
                .map(|_| {
                    if joint {
                        let (x, z) = model.sample_joint(rng);
                        Pair::new(x, z)
                    } else {
                        Pair::new(0.0, model.sample_prior(rng))
                    }
                })
                .collect())
        };
        fit_denoiser(&mut u_p.net, p_sampler, &cfg.inner(), sigma, &mut u_p.opt, rng)?;
    }
    Ok(report)
}

/// `d/dz log p(x, z)`, with the prior part from the prior denoiser when one is configured.
fn model_score(state: &RunState, model: &LatentVariableModel, x: f64, z: &[f64], sigma: f64) -> Result<Vec<f64>> {
    match &state.denoiser_p {
        Some(u_p) => {
            let prior = score_from_denoiser(&u_p.net, z, x, sigma)?;
            let lik = model.likelihood_score(x, z)?;
            Ok(prior.iter().zip(&lik).map(|(a, b)| a + b).collect())
        }
        None if model.explicit_prior() => model.joint_score(x, z),
        None => Err(Error::Config(
            "implicit prior needs a prior denoiser for the joint score".into(),
        )),
    }
}

fn pc_den_gradient(
    state: &RunState,
    model: &LatentVariableModel,
    xs: &[f64],
    eps: &[Vec<f64>],
    sigma: f64,
) -> Result<GradientEstimate> {
    let u_q = &state
        .denoiser_q
        .as_ref()
        .ok_or_else(|| Error::Config("run state has no posterior denoiser".into()))?
        .net;
    denoising_gradient(&state.posterior, xs, eps, |x, z| {
        let sp = model_score(state, model, x, z, sigma)?;
        let sq = score_from_denoiser(u_q, z, x, sigma)?;
        Ok(sp.iter().zip(&sq).map(|(p, q)| p - q).collect())
    })
}

/// K discriminator steps on prior vs posterior samples, then one generator
/// step on `mean[r(x, z) - log p(x|z)]`.
pub fn pc_adv_outer_step(
    state: &mut RunState,
    model: &LatentVariableModel,
    data: &Dataset,
    cfg: &TrainLoopConfig,
    rng: &mut Rng,
) -> Result<StepRecord> {
    if !model.explicit_likelihood() {
        return Err(Error::Config("pc_adv needs an explicit likelihood log p(x|z)".into()));
    }
    restart_inner(state, model, cfg, rng)?;
    let report = fit_pc_ratio(state, model, data, cfg, rng)?;
    let (xs, eps) = psi_batch(state, data, cfg.batch, rng);
    let frozen = freeze_ratio_for_psi_step(state.ratio_ref()?);
    let (grad, objective) = adversarial_gradient(&state.posterior, frozen, model, Contrast::Prior, &xs, &eps)?;
    finish_step(
        state,
        cfg,
        &grad,
        Some(report),
        1.0 / cfg.batch as f64,
        Some(objective),
        Some(-objective),
    )
}

/// K discriminator steps on `(x ~ D, z ~ q)` vs model joint samples, then
/// one generator step on `mean[s(x, z)]`. Only samplers of the model are used.
pub fn jc_adv_outer_step(
    state: &mut RunState,
    model: &LatentVariableModel,
    data: &Dataset,
    cfg: &TrainLoopConfig,
    rng: &mut Rng,
) -> Result<StepRecord> {
    restart_inner(state, model, cfg, rng)?;
    let report = fit_jc_ratio(state, model, data, cfg, rng)?;
    let (xs, eps) = psi_batch(state, data, cfg.batch, rng);
    let frozen = freeze_ratio_for_psi_step(state.ratio_ref()?);
    let (grad, objective) = adversarial_gradient(&state.posterior, frozen, model, Contrast::Joint, &xs, &eps)?;
    finish_step(
        state,
        cfg,
        &grad,
        Some(report),
        1.0 / cfg.batch as f64,
        Some(objective),
        None,
    )
}

/// K denoiser steps on posterior samples (and prior samples when the prior
/// score is learned), then one generator step along the assembled gradient.
pub fn pc_den_outer_step(
    state: &mut RunState,
    model: &LatentVariableModel,
    data: &Dataset,
    cfg: &TrainLoopConfig,
    rng: &mut Rng,
) -> Result<StepRecord> {
    if !model.explicit_likelihood() {
        return Err(Error::Config("pc_den needs an explicit likelihood log p(x|z)".into()));
    }
    if !model.explicit_prior() && state.denoiser_p.is_none() {
        return Err(Error::Config(
            "implicit prior needs a prior denoiser for the joint score".into(),
        ));
    }
    let sigma = cfg.noise.sigma_at(state.step);
    restart_inner(state, model, cfg, rng)?;
    let report = fit_denoisers(state, model, data, cfg, false, sigma, rng)?;
    let (xs, eps) = psi_batch(state, data, cfg.batch, rng);
    let grad = pc_den_gradient(state, model, &xs, &eps, sigma)?;
    finish_step(state, cfg, &grad, Some(report), 1.0, None, None)
}

/// K steps on a posterior denoiser and a model-joint denoiser, then one
/// generator step with kernel `score_p - score_q`.
pub fn jc_den_outer_step(
    state: &mut RunState,
    model: &LatentVariableModel,
    data: &Dataset,
    cfg: &TrainLoopConfig,
    rng: &mut Rng,
) -> Result<StepRecord> {
    if state.denoiser_p.is_none() || state.denoiser_q.is_none() {
        return Err(Error::Config("jc_den needs posterior and joint denoisers".into()));
    }
    let sigma = cfg.noise.sigma_at(state.step);
    restart_inner(state, model, cfg, rng)?;
    let report = fit_denoisers(state, model, data, cfg, true, sigma, rng)?;
    let (xs, eps) = psi_batch(state, data, cfg.batch, rng);
    let (Some(u_q), Some(u_p)) = (&state.denoiser_q, &state.denoiser_p) else {
        unreachable!("checked above")
    };
    let grad = denoising_gradient(&state.posterior, &xs, &eps, |x, z| {
        joint_scores_from_denoisers(&u_q.net, &u_p.net, x, z, sigma)
    })?;
    finish_step(state, cfg, &grad, Some(report), 1.0, None, None)
}

/// PC-Adv and PC-Den inner fits, then one generator step along the blend of
/// both gradients on a shared batch.
pub fn hybrid_outer_step(
    state: &mut RunState,
    model: &LatentVariableModel,
    data: &Dataset,
    cfg: &TrainLoopConfig,
    rng: &mut Rng,
) -> Result<StepRecord> {
    if !model.explicit_likelihood() {
        return Err(Error::Config("hybrid needs an explicit likelihood log p(x|z)".into()));
    }
    let sigma = cfg.noise.sigma_at(state.step);
    restart_inner(state, model, cfg, rng)?;
    let report = fit_pc_ratio(state, model, data, cfg, rng)?;
    fit_denoisers(state, model, data, cfg, false, sigma, rng)?;
    let (xs, eps) = psi_batch(state, data, cfg.batch, rng);
    let frozen = freeze_ratio_for_psi_step(state.ratio_ref()?);
    let (adv, objective) = adversarial_gradient(&state.posterior, frozen, model, Contrast::Prior, &xs, &eps)?;
    let den = pc_den_gradient(state, model, &xs, &eps, sigma)?;
    let grad = hybrid_gradient(&adv, &den, cfg.hybrid_alpha)?;
    finish_step(
        state,
        cfg,
        &grad,
        Some(report),
        1.0 / cfg.batch as f64,
        Some(objective),
        Some(-objective),
    )
}

pub fn outer_step(
    state: &mut RunState,
    model: &LatentVariableModel,
    data: &Dataset,
    cfg: &TrainLoopConfig,
    rng: &mut Rng,
) -> Result<StepRecord> {
    match cfg.method {
        Method::PcAdv => pc_adv_outer_step(state, model, data, cfg, rng),
        Method::JcAdv => jc_adv_outer_step(state, model, data, cfg, rng),
        Method::PcDen => pc_den_outer_step(state, model, data, cfg, rng),
        Method::JcDen => jc_den_outer_step(state, model, data, cfg, rng),
        Method::Hybrid => hybrid_outer_step(state, model, data, cfg, rng),
    }
}

/// Runs the remaining `cfg.outer_steps - state.step()` outer steps, calling
/// `on_step` after each. Errors carry the failing outer step in `Err.0`.
pub fn train<F>(
    state: &mut RunState,
    model: &LatentVariableModel,
    data: &Dataset,
    cfg: &TrainLoopConfig,
    rng: &mut Rng,
    mut on_step: F,
) -> std::result::Result<(), (usize, Error)>
where
    F: FnMut(&StepRecord),
{
    cfg.validate_for(model).map_err(|e| (state.step, e))?;
    while state.step < cfg.outer_steps {
        let step = state.step;
        let record = outer_step(state, model, data, cfg, rng).map_err(|e| (step, e))?;
        on_step(&record);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{exact_posterior, GaussianSpec};
    use crate::numerics::MlpParams;

    fn lg_model() -> LatentVariableModel {
        LatentVariableModel::linear_gaussian(vec![1.0, 1.0], 1.0).unwrap()
    }

    fn small_cfg(method: Method) -> TrainLoopConfig {
        let mut cfg = TrainLoopConfig::new(method);
        cfg.batch = 16;
        cfg.inner_steps = 2;
        cfg.outer_steps = 3;
        cfg.networks.generator = NetSpec::new(vec![8], Activation::Tanh);
        cfg.networks.ratio = NetSpec::new(vec![8], Activation::Relu);
        cfg.networks.denoiser = NetSpec::new(vec![8], Activation::Tanh);
        cfg
    }

    /// 1-D `q_psi(z) = N(psi, 1)` as a generator `g(x, eps) = psi + eps`.
    fn shift_generator(psi: f64) -> ImplicitPosterior {
        let net = MlpParams::from_layers(vec![(vec![0.0, 0.0, 1.0], vec![psi], Activation::Identity)]).unwrap();
        ImplicitPosterior::from_generator(net, 1, ObsEncoding::default()).unwrap()
    }

    /// The log ratio `log N(z; psi0, 1) / N(z; 0, 1) = psi0 z - psi0^2 / 2` as a network.
    fn gaussian_ratio(psi0: f64) -> RatioNet {
        let net = MlpParams::from_layers(vec![(
            vec![0.0, 0.0, psi0],
            vec![-0.5 * psi0 * psi0],
            Activation::Identity,
        )])
        .unwrap();
        RatioNet::from_net(net, ObsEncoding::default()).unwrap()
    }

    // Probabilists' Gauss-Hermite rule, exact for polynomials up to degree 5.
    const GH_NODES: [f64; 3] = [-1.732_050_807_568_877_2, 0.0, 1.732_050_807_568_877_2];
    const GH_WEIGHTS: [f64; 3] = [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0];

    #[test]
    fn frozen_ratio_gradient_matches_kl_gradient() {
        let model = LatentVariableModel::linear_gaussian(vec![0.0], 1.0).unwrap();
        for psi0 in [-1.3, 0.0, 0.4, 2.0] {
            // Full dependence: KL(q_psi || p) = E[log q_psi(z) - log p(z)] with
            // q's parameters live on the tape.
            let mut tape = Tape::new();
            let psi = tape.leaf(psi0);
            let mut terms = Vec::new();
            for (&e, &w) in GH_NODES.iter().zip(&GH_WEIGHTS) {
                let z = tape.offset(psi, e);
                let d = tape.sub(z, psi);
                let lq = tape.square(d);
                let lp = tape.square(z);
                let diff = tape.sub(lp, lq);
                terms.push(tape.scale(diff, 0.5 * w));
            }
            let kl = tape.sum(&terms);
            assert!((tape.value(kl) - 0.5 * psi0 * psi0).abs() < 1e-12);
            let full = tape.backward(kl).wrt(psi);

            // Frozen ratio, gradient only through the samples.
            let r = gaussian_ratio(psi0);
            let frozen = freeze_ratio_for_psi_step(&r);
            let mut tape = Tape::new();
            let psi = tape.leaf(psi0);
            let mut terms = Vec::new();
            for (&e, &w) in GH_NODES.iter().zip(&GH_WEIGHTS) {
                let z = tape.offset(psi, e);
                let v = frozen.eval_tape(&mut tape, &model, 0.0, &[z]).unwrap();
                terms.push(tape.scale(v, w));
            }
            let obj = tape.sum(&terms);
            let stopped = tape.backward(obj).wrt(psi);

            assert!((full - psi0).abs() < 1e-6, "{full} vs {psi0}");
            assert!((stopped - psi0).abs() < 1e-6, "{stopped} vs {psi0}");
        }
    }

    #[test]
    fn frozen_ratio_leaves_phi_without_adjoints() {
        let model = lg_model();
        let mut rng = Rng::new(3);
        let q = ImplicitPosterior::new(
            2,
            2,
            &NetSpec::new(vec![5], Activation::Tanh),
            ObsEncoding::default(),
            &mut rng,
        );
        let r = RatioNet::new(
            2,
            &NetSpec::new(vec![6], Activation::Relu),
            ObsEncoding::default(),
            &mut rng,
        );
        let x = 0.7;
        let eps = [0.3, -1.1];

        let mut tape = Tape::new();
        let psi = q.generator.track(&mut tape);
        let phi = r.net.track(&mut tape);
        let z = q.generate_tape(&mut tape, psi, x, &eps).unwrap();
        let out = freeze_ratio_for_psi_step(&r)
            .eval_tape(&mut tape, &model, x, &z)
            .unwrap();
        let adj = tape.backward(out);
        let (Binding::Tracked(psi), Binding::Tracked(phi)) = (psi, phi) else {
            unreachable!()
        };
        assert!(adj.leaves(phi).iter().all(|&a| a == 0.0));
        let frozen_grad = adj.leaves(psi).to_vec();
        assert!(frozen_grad.iter().any(|&a| a != 0.0));

        // Same graph with phi tracked: phi does not depend on psi, so the psi
        // gradient is unchanged and only phi gains adjoints.
        let mut tape = Tape::new();
        let psi_b = q.generator.track(&mut tape);
        let phi_b = r.net.track(&mut tape);
        let z = q.generate_tape(&mut tape, psi_b, x, &eps).unwrap();
        let out = r.eval_tape(&mut tape, phi_b, &model, x, &z).unwrap();
        let adj = tape.backward(out);
        let Binding::Tracked(psi_b) = psi_b else { unreachable!() };
        assert_eq!(adj.leaves(psi_b), &frozen_grad[..]);
    }

    #[test]
    fn hybrid_blend_arithmetic() {
        let adv = GradientEstimate::new(vec![2.0, -2.0], Provenance::Adversarial).unwrap();
        let den = GradientEstimate::new(vec![0.0, 4.0], Provenance::Denoising).unwrap();
        let h = hybrid_gradient(&adv, &den, 0.5).unwrap();
        assert_eq!(h.values, vec![1.0, 1.0]);
        assert_eq!(h.provenance, Provenance::Hybrid);
        assert_eq!(hybrid_gradient(&adv, &den, 1.0).unwrap().values, adv.values);
        assert_eq!(hybrid_gradient(&adv, &den, 0.0).unwrap().values, den.values);
        let short = GradientEstimate::new(vec![1.0], Provenance::Denoising).unwrap();
        assert!(matches!(
            hybrid_gradient(&adv, &short, 0.5),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(GradientEstimate::new(vec![f64::NAN], Provenance::Adversarial).is_err());
    }

    #[test]
    fn zero_joint_ratio_gives_zero_gradient() {
        let model = lg_model();
        let mut rng = Rng::new(5);
        let q = ImplicitPosterior::new(
            2,
            2,
            &NetSpec::new(vec![5], Activation::Tanh),
            ObsEncoding::default(),
            &mut rng,
        );
        let s = RatioNet::from_net(
            MlpParams::zeros(ObsEncoding::WIDTH + 2, &[4], 1, Activation::Relu),
            ObsEncoding::default(),
        )
        .unwrap();
        let xs = vec![0.0, 1.0, -2.0];
        let eps: Vec<Vec<f64>> = xs.iter().map(|_| rng.normals(2)).collect();
        let (g, obj) =
            adversarial_gradient(&q, freeze_ratio_for_psi_step(&s), &model, Contrast::Joint, &xs, &eps).unwrap();
        assert_eq!(obj, 0.0);
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_prior_ratio_reduces_to_likelihood() {
        // With r = 0 the objective is the mean negative log-likelihood.
        let model = lg_model();
        let mut rng = Rng::new(6);
        let q = ImplicitPosterior::new(
            2,
            2,
            &NetSpec::new(vec![5], Activation::Tanh),
            ObsEncoding::default(),
            &mut rng,
        );
        let r = RatioNet::from_net(
            MlpParams::zeros(ObsEncoding::WIDTH + 2, &[4], 1, Activation::Relu),
            ObsEncoding::default(),
        )
        .unwrap();
        let xs = vec![0.5, -1.0];
        let eps: Vec<Vec<f64>> = xs.iter().map(|_| rng.normals(2)).collect();
        let (_, obj) =
            adversarial_gradient(&q, freeze_ratio_for_psi_step(&r), &model, Contrast::Prior, &xs, &eps).unwrap();
        let mut nll = 0.0;
        for (&x, e) in xs.iter().zip(&eps) {
            nll -= model.likelihood_logpdf(x, &q.generate(x, e).unwrap()).unwrap();
        }
        assert!((obj - nll / 2.0).abs() < 1e-12);
    }

    #[test]
    fn identity_denoiser_kernel_is_model_score() {
        let model = lg_model();
        let mut rng = Rng::new(8);
        let q = ImplicitPosterior::new(
            2,
            2,
            &NetSpec::new(vec![5], Activation::Tanh),
            ObsEncoding::default(),
            &mut rng,
        );
        let u = DenoiserNet::identity(2, true, &NetSpec::new(vec![3], Activation::Tanh), 0.1);
        let xs = vec![1.0, -0.5, 2.0];
        let eps: Vec<Vec<f64>> = xs.iter().map(|_| rng.normals(2)).collect();
        let with_entropy = denoising_gradient(&q, &xs, &eps, |x, z| {
            let sp = model.joint_score(x, z)?;
            let sq = score_from_denoiser(&u, z, x, 0.1)?;
            Ok(sp.iter().zip(&sq).map(|(a, b)| a - b).collect())
        })
        .unwrap();
        let model_only = denoising_gradient(&q, &xs, &eps, |x, z| model.joint_score(x, z)).unwrap();
        assert_eq!(with_entropy.values, model_only.values);

        // Identical joint and posterior denoisers cancel.
        let zero = denoising_gradient(&q, &xs, &eps, |x, z| joint_scores_from_denoisers(&u, &u, x, z, 0.1)).unwrap();
        assert!(zero.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn optimal_denoiser_gradient_matches_analytic_elbo_gradient() {
        // q = N(psi, 1), joint log p(x, z) = -z^2/2 - (x - z)^2/2:
        // dELBO/dpsi = x - 2 psi, so the descent gradient is 2 psi - x.
        let model = LatentVariableModel::linear_gaussian(vec![1.0], 1.0).unwrap();
        let sigma = 0.1;
        let s2 = sigma * sigma;
        let (psi, x) = (0.7, 1.5);
        let q = shift_generator(psi);
        // Optimal denoiser for N(psi, 1): u(z) = psi + (z - psi) / (1 + s^2).
        let slope = -1.0 / (1.0 + s2);
        let net = MlpParams::from_layers(vec![(vec![slope], vec![-slope * psi], Activation::Identity)]).unwrap();
        let u = DenoiserNet::from_net(net, false, ObsEncoding::default(), s2).unwrap();
        let mut rng = Rng::new(10);
        let n = 20_000;
        let xs = vec![x; n];
        let eps: Vec<Vec<f64>> = (0..n).map(|_| rng.normals(1)).collect();
        let g = denoising_gradient(&q, &xs, &eps, |x, z| {
            let sp = model.joint_score(x, z)?;
            let sq = score_from_denoiser(&u, z, x, sigma)?;
            Ok(vec![sp[0] - sq[0]])
        })
        .unwrap();
        // The bias is the only parameter that moves the mean.
        let bias = q.generator.output_bias_range().start;
        assert!((g.values[bias] - (2.0 * psi - x)).abs() < 0.05, "{}", g.values[bias]);
    }

    #[test]
    fn elbo_of_exact_posterior_is_log_evidence() {
        let a = vec![1.0, 1.0];
        let model = LatentVariableModel::linear_gaussian(a.clone(), 1.0).unwrap();
        let x = 1.2;
        let post = exact_posterior(&a, 1.0, x).unwrap();
        let evidence = GaussianSpec::new(vec![0.0], vec![3.0_f64.sqrt()])
            .unwrap()
            .logpdf(&[x])
            .unwrap();
        let mut rng = Rng::new(12);
        let zs: Vec<Vec<f64>> = (0..200).map(|_| post.sample(&mut rng)).collect();
        let xs = vec![x; zs.len()];
        let elbo = elbo_from_samples(&model, &xs, &zs, |_, z| Ok(post.logpdf(z)? - model.prior_logpdf(z)?)).unwrap();
        assert!((elbo - evidence).abs() < 1e-9, "{elbo} vs {evidence}");
    }

    #[test]
    fn implicit_likelihood_rejected_for_pc_methods() {
        let model = lg_model().with_implicit_likelihood();
        let mut rng = Rng::new(1);
        for method in [Method::PcAdv, Method::PcDen, Method::Hybrid] {
            assert!(matches!(
                RunState::new(&model, &small_cfg(method), &mut rng),
                Err(Error::Config(_))
            ));
        }
        let cfg = small_cfg(Method::JcAdv);
        let mut state = RunState::new(&model, &cfg, &mut rng).unwrap();
        let data = Dataset::new(vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            pc_adv_outer_step(&mut state, &model, &data, &cfg, &mut rng),
            Err(Error::Config(_))
        ));
        jc_adv_outer_step(&mut state, &model, &data, &cfg, &mut rng).unwrap();
    }

    #[test]
    fn implicit_prior_uses_prior_denoiser() {
        let model = lg_model().with_implicit_prior();
        let cfg = small_cfg(Method::PcDen);
        let mut rng = Rng::new(2);
        let mut state = RunState::new(&model, &cfg, &mut rng).unwrap();
        assert!(state.denoiser_p.as_ref().is_some_and(|u| !u.net.conditioned_on_x));
        let data = Dataset::new(vec![0.0, 1.0]).unwrap();
        pc_den_outer_step(&mut state, &model, &data, &cfg, &mut rng).unwrap();
        state.denoiser_p = None;
        assert!(matches!(
            pc_den_outer_step(&mut state, &model, &data, &cfg, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn every_method_runs_and_is_deterministic() {
        let model = lg_model();
        for method in [
            Method::PcAdv,
            Method::JcAdv,
            Method::PcDen,
            Method::JcDen,
            Method::Hybrid,
        ] {
            let cfg = small_cfg(method);
            let run = || {
                let mut rng = Rng::new(42);
                let data = Dataset::from_model(&model, 50, &mut rng).unwrap();
                let mut state = RunState::new(&model, &cfg, &mut rng).unwrap();
                let mut seen = 0;
                train(&mut state, &model, &data, &cfg, &mut rng, |_| seen += 1).unwrap();
                assert_eq!(seen, cfg.outer_steps);
                state
            };
            let a = run();
            let b = run();
            assert_eq!(a, b, "{method:?}");
            assert_eq!(a.step(), cfg.outer_steps);
            assert!(a.history.iter().all(|r| r.psi_displacement_norm > 0.0));
            let steps: Vec<usize> = a.history.iter().map(|r| r.step).collect();
            assert_eq!(steps, (0..cfg.outer_steps).collect::<Vec<_>>());
            assert_eq!(
                a.history[0].elbo_estimate.is_some(),
                matches!(method, Method::PcAdv | Method::Hybrid)
            );
        }
    }

    #[test]
    fn cold_start_reinitializes_auxiliary_nets() {
        let model = lg_model();
        let mut cfg = small_cfg(Method::PcAdv);
        cfg.warm_start_inner = false;
        let mut rng = Rng::new(4);
        let data = Dataset::from_model(&model, 20, &mut rng).unwrap();
        let mut state = RunState::new(&model, &cfg, &mut rng).unwrap();
        pc_adv_outer_step(&mut state, &model, &data, &cfg, &mut rng).unwrap();
        pc_adv_outer_step(&mut state, &model, &data, &cfg, &mut rng).unwrap();
        assert_eq!(state.ratio.unwrap().opt.steps_taken(), cfg.inner_steps as u64);

        cfg.warm_start_inner = true;
        let mut state = RunState::new(&model, &cfg, &mut rng).unwrap();
        pc_adv_outer_step(&mut state, &model, &data, &cfg, &mut rng).unwrap();
        pc_adv_outer_step(&mut state, &model, &data, &cfg, &mut rng).unwrap();
        assert_eq!(state.ratio.unwrap().opt.steps_taken(), 2 * cfg.inner_steps as u64);
    }

    #[test]
    fn zero_inner_steps_with_zero_ratio_follows_likelihood() {
        let model = lg_model();
        let mut cfg = small_cfg(Method::PcAdv);
        cfg.inner_steps = 0;
        let mut rng = Rng::new(9);
        let data = Dataset::new(vec![1.0]).unwrap();
        let mut state = RunState::new(&model, &cfg, &mut rng).unwrap();
        let ratio = &mut state.ratio.as_mut().unwrap().net.net;
        ratio.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let record = pc_adv_outer_step(&mut state, &model, &data, &cfg, &mut rng).unwrap();
        assert_eq!(record.inner_loss, None);
        assert!(state.ratio.unwrap().net.net.params().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn config_round_trip_and_strictness() {
        let cfg = TrainLoopConfig::new(Method::JcDen);
        let text = serde_json::to_string(&cfg).unwrap();
        let back: TrainLoopConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let minimal: TrainLoopConfig = serde_json::from_str(r#"{"method": "pc_adv"}"#).unwrap();
        assert_eq!(minimal, TrainLoopConfig::new(Method::PcAdv));
        assert!(serde_json::from_str::<TrainLoopConfig>(r#"{"method": "pc_adv", "outer_step": 3}"#).is_err());
        let mut bad = TrainLoopConfig::new(Method::Hybrid);
        bad.hybrid_alpha = 1.5;
        assert!(bad.validate().is_err());
    }

    /// The adversarial objective built on a tape, as an independent route.
    fn tape_adversarial(
        q: &ImplicitPosterior,
        r: &RatioNet,
        model: &LatentVariableModel,
        contrast: Contrast,
        xs: &[f64],
        eps: &[Vec<f64>],
    ) -> (Vec<f64>, f64) {
        let frozen = freeze_ratio_for_psi_step(r);
        let mut tape = Tape::new();
        let binding = q.generator.track(&mut tape);
        let mut terms = Vec::new();
        for (&x, e) in xs.iter().zip(eps) {
            let z = q.generate_tape(&mut tape, binding, x, e).unwrap();
            let v = frozen.eval_tape(&mut tape, model, x, &z).unwrap();
            terms.push(match contrast {
                Contrast::Prior => {
                    let ll = model.likelihood_logpdf_tape(&mut tape, x, &z).unwrap();
                    tape.sub(v, ll)
                }
                Contrast::Joint => v,
            });
        }
        let total = tape.sum(&terms);
        let obj = tape.scale(total, 1.0 / xs.len() as f64);
        let Binding::Tracked(leaves) = binding else {
            unreachable!()
        };
        (tape.backward(obj).leaves(leaves).to_vec(), tape.value(obj))
    }

    #[test]
    fn batched_generator_gradients_match_tape() {
        let model = LatentVariableModel::sprinkler(1.0).unwrap();
        let mut rng = Rng::new(77);
        let q = ImplicitPosterior::new(
            2,
            3,
            &NetSpec::new(vec![6, 6], Activation::Tanh),
            ObsEncoding { scale: 10.0 },
            &mut rng,
        );
        let r = RatioNet::new(
            2,
            &NetSpec::new(vec![7], Activation::Relu),
            ObsEncoding::default(),
            &mut rng,
        )
        .with_ensemble_weight(0.3)
        .unwrap();
        let xs: Vec<f64> = (0..9).map(|_| model.sample_joint(&mut rng).0).collect();
        let eps: Vec<Vec<f64>> = xs.iter().map(|_| rng.normals(3)).collect();
        for contrast in [Contrast::Prior, Contrast::Joint] {
            let (g, obj) =
                adversarial_gradient(&q, freeze_ratio_for_psi_step(&r), &model, contrast, &xs, &eps).unwrap();
            let (g_tape, obj_tape) = tape_adversarial(&q, &r, &model, contrast, &xs, &eps);
            assert!((obj - obj_tape).abs() < 1e-12 * (1.0 + obj.abs()));
            for (a, b) in g.values.iter().zip(&g_tape) {
                assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }

        // Denoising route: surrogate -(1/B) sum k . g on a tape.
        let kernel = |x: f64, z: &[f64]| -> Result<Vec<f64>> { Ok(vec![z[1] - x.ln_1p(), z[0] * z[0]]) };
        let g = denoising_gradient(&q, &xs, &eps, kernel).unwrap();
        let mut tape = Tape::new();
        let binding = q.generator.track(&mut tape);
        let mut terms = Vec::new();
        for (&x, e) in xs.iter().zip(&eps) {
            let z = q.generate_tape(&mut tape, binding, x, e).unwrap();
            let k = kernel(x, &tape.values(&z)).unwrap();
            let k: Vec<Scalar> = k.into_iter().map(|v| Scalar::Const(-v / xs.len() as f64)).collect();
            terms.push(tape.dot(&k, &z));
        }
        let total = tape.sum(&terms);
        let Binding::Tracked(leaves) = binding else {
            unreachable!()
        };
        for (a, b) in g.values.iter().zip(tape.backward(total).leaves(leaves)) {
            assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}
