//! Probability building blocks, the benchmark latent-variable models and the
//! generator-based approximate posterior.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{signed_log1p, Activation, BatchCache, Binding, MlpParams, Rng, Scalar, Tape};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Diagonal Gaussian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GaussianSpec {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        Error::check_dim("gaussian std", mean.len(), std.len())?;
        if let Some(s) = std.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::invalid("std", format!("must be > 0, got {s}")));
        }
        Ok(GaussianSpec { mean, std })
    }

    pub fn standard(dim: usize) -> Self {
        GaussianSpec {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn logpdf(&self, z: &[f64]) -> Result<f64> {
        Error::check_dim("gaussian argument", self.dim(), z.len())?;
        Ok(self
            .mean
            .iter()
            .zip(&self.std)
            .zip(z)
            .map(|((m, s), x)| {
                let u = (x - m) / s;
                -0.5 * u * u - s.ln() - HALF_LN_2PI
            })
            .sum())
    }

    /// `d logpdf / dz`.
    pub fn score(&self, z: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim("gaussian argument", self.dim(), z.len())?;
        Ok(self
            .mean
            .iter()
            .zip(&self.std)
            .zip(z)
            .map(|((m, s), x)| -(x - m) / (s * s))
            .collect())
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(m, s)| m + s * rng.normal())
            .collect()
    }

    fn logpdf_tape(&self, tape: &mut Tape, z: &[Scalar]) -> Scalar {
        let mut terms = Vec::with_capacity(z.len() + 1);
        let mut constant = 0.0;
        for ((m, s), &x) in self.mean.iter().zip(&self.std).zip(z) {
            let centred = tape.offset(x, -m);
            let sq = tape.square(centred);
            terms.push(tape.scale(sq, -0.5 / (s * s)));
            constant -= s.ln() + HALF_LN_2PI;
        }
        terms.push(Scalar::Const(constant));
        tape.sum(&terms)
    }
}

pub fn gaussian_logpdf(spec: &GaussianSpec, z: &[f64]) -> Result<f64> {
    spec.logpdf(z)
}

/// Exponential distribution parameterized by its mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentialSpec {
    pub mean: f64,
}

impl ExponentialSpec {
    pub fn new(mean: f64) -> Result<Self> {
        if !(mean > 0.0) {
            return Err(Error::invalid("mean", format!("must be > 0, got {mean}")));
        }
        Ok(ExponentialSpec { mean })
    }

    pub fn logpdf(&self, x: f64) -> f64 {
        if x < 0.0 {
            f64::NEG_INFINITY
        } else {
            -self.mean.ln() - x / self.mean
        }
    }
}

pub fn exponential_logpdf(spec: &ExponentialSpec, x: f64) -> Result<f64> {
    ExponentialSpec::new(spec.mean).map(|s| s.logpdf(x))
}

/// `3 + max(0, z1)^3 + max(0, z2)^3`.
pub fn sprinkler_mean(z: &[f64]) -> f64 {
    3.0 + z.iter().map(|v| v.max(0.0).powi(3)).sum::<f64>()
}

pub fn sprinkler_mean_tape(tape: &mut Tape, z: &[Scalar]) -> Scalar {
    let mut terms: Vec<Scalar> = z.iter().map(|&v| tape.relu_cubed(v)).collect();
    terms.push(Scalar::Const(3.0));
    tape.sum(&terms)
}

/// Full-covariance Gaussian, used for conjugate posteriors.
#[derive(Clone, Debug, PartialEq)]
pub struct FullGaussian {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    chol: Vec<Vec<f64>>,
}

impl FullGaussian {
    pub fn new(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> Result<Self> {
        let d = mean.len();
        Error::check_dim("covariance rows", d, cov.len())?;
        let mut chol = vec![vec![0.0; d]; d];
        for i in 0..d {
            Error::check_dim("covariance columns", d, cov[i].len())?;
            for j in 0..=i {
                let s = cov[i][j] - (0..j).map(|k| chol[i][k] * chol[j][k]).sum::<f64>();
                if i == j {
                    if !(s > 0.0) {
                        return Err(Error::invalid("cov", "not positive definite"));
                    }
                    chol[i][i] = s.sqrt();
                } else {
                    chol[i][j] = s / chol[j][j];
                }
            }
        }
        Ok(FullGaussian { mean, cov, chol })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn logpdf(&self, z: &[f64]) -> Result<f64> {
        let d = self.dim();
        Error::check_dim("gaussian argument", d, z.len())?;
        // Solve L y = z - mean.
        let mut y = vec![0.0; d];
        for i in 0..d {
            let s = z[i] - self.mean[i] - (0..i).map(|k| self.chol[i][k] * y[k]).sum::<f64>();
            y[i] = s / self.chol[i][i];
        }
        let log_det: f64 = (0..d).map(|i| self.chol[i][i].ln()).sum();
        Ok(-0.5 * y.iter().map(|v| v * v).sum::<f64>() - log_det - d as f64 * HALF_LN_2PI)
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let d = self.dim();
        let e = rng.normals(d);
        (0..d)
            .map(|i| self.mean[i] + (0..=i).map(|k| self.chol[i][k] * e[k]).sum::<f64>())
            .collect()
    }
}

/// The bundled generative models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelKind {
    /// `z ~ N(0, prior_std^2 I_2)`, `x ~ Exp(mean = 3 + relu(z1)^3 + relu(z2)^3)`.
    Sprinkler { prior_std: f64 },
    /// `z ~ N(0, I)`, `x ~ N(weights . z, obs_std^2)`.
    LinearGaussian { weights: Vec<f64>, obs_std: f64 },
}

/// A latent-variable model `p(z) p(x|z)` with scalar observations.
///
/// Samplers are always available. Densities can be hidden to emulate implicit
/// components; algorithms must then fall back to sample-based estimators.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVariableModel {
    kind: ModelKind,
    explicit_prior: bool,
    explicit_likelihood: bool,
}

impl LatentVariableModel {
    pub fn new(kind: ModelKind) -> Result<Self> {
        match &kind {
            ModelKind::Sprinkler { prior_std } => {
                if !(*prior_std > 0.0) {
                    return Err(Error::invalid("prior_std", "must be > 0"));
                }
            }
            ModelKind::LinearGaussian { weights, obs_std } => {
                if !(*obs_std > 0.0) {
                    return Err(Error::invalid("obs_std", "must be > 0"));
                }
                if weights.is_empty() {
                    return Err(Error::Empty("linear-Gaussian weights"));
                }
            }
        }
        Ok(LatentVariableModel {
            kind,
            explicit_prior: true,
            explicit_likelihood: true,
        })
    }

    pub fn sprinkler(prior_std: f64) -> Result<Self> {
        Self::new(ModelKind::Sprinkler { prior_std })
    }

    pub fn linear_gaussian(weights: Vec<f64>, obs_std: f64) -> Result<Self> {
        Self::new(ModelKind::LinearGaussian { weights, obs_std })
    }

    /// Hide the prior density; only its sampler remains.
    pub fn with_implicit_prior(mut self) -> Self {
        self.explicit_prior = false;
        self
    }

    /// Hide the likelihood density; only its sampler remains.
    pub fn with_implicit_likelihood(mut self) -> Self {
        self.explicit_likelihood = false;
        self
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn latent_dim(&self) -> usize {
        match &self.kind {
            ModelKind::Sprinkler { .. } => 2,
            ModelKind::LinearGaussian { weights, .. } => weights.len(),
        }
    }

    pub fn obs_dim(&self) -> usize {
        1
    }

    pub fn explicit_prior(&self) -> bool {
        self.explicit_prior
    }

    pub fn explicit_likelihood(&self) -> bool {
        self.explicit_likelihood
    }

    pub fn explicit_joint(&self) -> bool {
        self.explicit_prior && self.explicit_likelihood
    }

    fn prior_spec(&self) -> GaussianSpec {
        match &self.kind {
            ModelKind::Sprinkler { prior_std } => GaussianSpec {
                mean: vec![0.0; 2],
                std: vec![*prior_std; 2],
            },
            ModelKind::LinearGaussian { weights, .. } => GaussianSpec::standard(weights.len()),
        }
    }

    pub fn sample_prior(&self, rng: &mut Rng) -> Vec<f64> {
        self.prior_spec().sample(rng)
    }

    pub fn sample_likelihood(&self, z: &[f64], rng: &mut Rng) -> f64 {
        match &self.kind {
            ModelKind::Sprinkler { .. } => rng.exponential(sprinkler_mean(z)),
            ModelKind::LinearGaussian { weights, obs_std } => dot(weights, z) + obs_std * rng.normal(),
        }
    }

    /// Ancestral draw `(x, z)` from the joint.
    pub fn sample_joint(&self, rng: &mut Rng) -> (f64, Vec<f64>) {
        let z = self.sample_prior(rng);
        let x = self.sample_likelihood(&z, rng);
        (x, z)
    }

    pub fn prior_logpdf(&self, z: &[f64]) -> Result<f64> {
        self.require_prior()?;
        self.prior_spec().logpdf(z)
    }

    pub fn likelihood_logpdf(&self, x: f64, z: &[f64]) -> Result<f64> {
        self.require_likelihood()?;
        Error::check_dim("latent", self.latent_dim(), z.len())?;
        Ok(match &self.kind {
            ModelKind::Sprinkler { .. } => ExponentialSpec {
                mean: sprinkler_mean(z),
            }
            .logpdf(x),
            ModelKind::LinearGaussian { weights, obs_std } => {
                let u = (x - dot(weights, z)) / obs_std;
                -0.5 * u * u - obs_std.ln() - HALF_LN_2PI
            }
        })
    }

    pub fn joint_logpdf(&self, x: f64, z: &[f64]) -> Result<f64> {
        Ok(self.prior_logpdf(z)? + self.likelihood_logpdf(x, z)?)
    }

    pub fn prior_logpdf_tape(&self, tape: &mut Tape, z: &[Scalar]) -> Result<Scalar> {
        self.require_prior()?;
        Error::check_dim("latent", self.latent_dim(), z.len())?;
        Ok(self.prior_spec().logpdf_tape(tape, z))
    }

    /// `log p(x|z)` recorded on the tape, differentiable in `z`.
    pub fn likelihood_logpdf_tape(&self, tape: &mut Tape, x: f64, z: &[Scalar]) -> Result<Scalar> {
        self.require_likelihood()?;
        Error::check_dim("latent", self.latent_dim(), z.len())?;
        Ok(match &self.kind {
            ModelKind::Sprinkler { .. } => {
                if x < 0.0 {
                    return Ok(Scalar::Const(f64::NEG_INFINITY));
                }
                let mean = sprinkler_mean_tape(tape, z);
                let log_mean = tape.ln(mean);
                let inv = tape.div(Scalar::Const(x), mean);
                let s = tape.add(log_mean, inv);
                tape.neg(s)
            }
            ModelKind::LinearGaussian { weights, obs_std } => {
                let w: Vec<Scalar> = weights.iter().map(|&v| Scalar::Const(v)).collect();
                let mean = tape.dot(&w, z);
                let resid = tape.sub(Scalar::Const(x), mean);
                let sq = tape.square(resid);
                let s = tape.scale(sq, -0.5 / (obs_std * obs_std));
                tape.offset(s, -obs_std.ln() - HALF_LN_2PI)
            }
        })
    }

    pub fn joint_logpdf_tape(&self, tape: &mut Tape, x: f64, z: &[Scalar]) -> Result<Scalar> {
        let p = self.prior_logpdf_tape(tape, z)?;
        let l = self.likelihood_logpdf_tape(tape, x, z)?;
        Ok(tape.add(p, l))
    }

    pub fn prior_score(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.require_prior()?;
        self.prior_spec().score(z)
    }

    /// `d log p(x|z) / dz`.
    pub fn likelihood_score(&self, x: f64, z: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let zs: Vec<Scalar> = z.iter().map(|&v| tape.leaf(v)).collect();
        let out = self.likelihood_logpdf_tape(&mut tape, x, &zs)?;
        let adj = tape.backward(out);
        Ok(zs.iter().map(|&s| adj.wrt(s)).collect())
    }

    /// `d log p(x, z) / dz`.
    pub fn joint_score(&self, x: f64, z: &[f64]) -> Result<Vec<f64>> {
        let prior = self.prior_score(z)?;
        let lik = self.likelihood_score(x, z)?;
        Ok(prior.iter().zip(&lik).map(|(a, b)| a + b).collect())
    }

    fn require_prior(&self) -> Result<()> {
        if self.explicit_prior {
            Ok(())
        } else {
            Err(Error::ImplicitDensity("prior"))
        }
    }

    fn require_likelihood(&self) -> Result<()> {
        if self.explicit_likelihood {
            Ok(())
        } else {
            Err(Error::ImplicitDensity("likelihood"))
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Exact posterior of the linear-Gaussian model `z ~ N(0, I)`, `x ~ N(a.z, s^2)`.
///
/// Precision is `I + a a^T / s^2`; by Sherman-Morrison the covariance is
/// `I - a a^T / (s^2 + |a|^2)` and the mean is `cov a x / s^2`.
pub fn exact_posterior(weights: &[f64], obs_std: f64, x: f64) -> Result<FullGaussian> {
    if !(obs_std > 0.0) {
        return Err(Error::invalid("obs_std", "must be > 0"));
    }
    let d = weights.len();
    let s2 = obs_std * obs_std;
    let denom = s2 + dot(weights, weights);
    let cov: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| f64::from(u8::from(i == j)) - weights[i] * weights[j] / denom)
                .collect()
        })
        .collect();
    let mean = (0..d)
        .map(|i| (0..d).map(|j| cov[i][j] * weights[j]).sum::<f64>() * x / s2)
        .collect();
    FullGaussian::new(mean, cov)
}

/// Observation encoding shared by every network that consumes `x`.
///
/// Produces `[x / scale, sign(x) log(1 + |x|)]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObsEncoding {
    pub scale: f64,
}

impl Default for ObsEncoding {
    fn default() -> Self {
        ObsEncoding { scale: 1.0 }
    }
}

impl ObsEncoding {
    pub const WIDTH: usize = 2;

    pub fn features(&self, x: f64) -> [f64; 2] {
        [x / self.scale, signed_log1p(x)]
    }
}

/// Generator network sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl NetSpec {
    pub fn new(hidden: Vec<usize>, activation: Activation) -> Self {
        NetSpec { hidden, activation }
    }
}

impl Default for NetSpec {
    fn default() -> Self {
        NetSpec {
            hidden: vec![64, 64],
            activation: Activation::Tanh,
        }
    }
}

/// Reparametrised approximate posterior `z = g(x, eps)`, `eps ~ N(0, I)`.
///
/// Sampling never evaluates a density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImplicitPosterior {
    pub generator: MlpParams,
    pub noise_dim: usize,
    pub encoding: ObsEncoding,
}

impl ImplicitPosterior {
    pub fn new(latent_dim: usize, noise_dim: usize, net: &NetSpec, encoding: ObsEncoding, rng: &mut Rng) -> Self {
        let generator = MlpParams::new(
            ObsEncoding::WIDTH + noise_dim,
            &net.hidden,
            latent_dim,
            net.activation,
            rng,
        );
        ImplicitPosterior {
            generator,
            noise_dim,
            encoding,
        }
    }

    pub fn from_generator(generator: MlpParams, noise_dim: usize, encoding: ObsEncoding) -> Result<Self> {
        generator.validate()?;
        Error::check_dim("generator input", ObsEncoding::WIDTH + noise_dim, generator.input_dim())?;
        Ok(ImplicitPosterior {
            generator,
            noise_dim,
            encoding,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.generator.output_dim()
    }

    fn input(&self, x: f64, eps: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(ObsEncoding::WIDTH + eps.len());
        v.extend(self.encoding.features(x));
        v.extend_from_slice(eps);
        v
    }

    pub fn draw_noise(&self, rng: &mut Rng) -> Vec<f64> {
        rng.normals(self.noise_dim)
    }

    /// `g(x, eps)` without a tape.
    pub fn generate(&self, x: f64, eps: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim("noise", self.noise_dim, eps.len())?;
        self.generator.eval(&self.input(x, eps))
    }

    pub fn sample(&self, x: f64, rng: &mut Rng) -> Vec<f64> {
        let eps = self.draw_noise(rng);
        self.generate(x, &eps).expect("noise has the generator's width")
    }

    /// Row-major generator inputs for a batch.
    pub fn input_matrix(&self, xs: &[f64], eps: &[Vec<f64>]) -> Result<Vec<f64>> {
        Error::check_dim("noise batch", xs.len(), eps.len())?;
        let mut m = Vec::with_capacity(xs.len() * self.generator.input_dim());
        for (&x, e) in xs.iter().zip(eps) {
            Error::check_dim("noise", self.noise_dim, e.len())?;
            m.extend(self.input(x, e));
        }
        Ok(m)
    }

    /// `g(x_b, eps_b)` for a whole batch.
    pub fn generate_batch(&self, xs: &[f64], eps: &[Vec<f64>], cache: &mut BatchCache) -> Result<Vec<Vec<f64>>> {
        let input = self.input_matrix(xs, eps)?;
        let out = self.generator.forward_batch(&input, xs.len(), cache)?;
        Ok(out.chunks_exact(self.latent_dim()).map(|c| c.to_vec()).collect())
    }

    /// One draw per observation; all noise is drawn before the forward pass.
    pub fn sample_batch(&self, xs: &[f64], rng: &mut Rng) -> Vec<Vec<f64>> {
        let eps: Vec<Vec<f64>> = xs.iter().map(|_| self.draw_noise(rng)).collect();
        self.generate_batch(xs, &eps, &mut BatchCache::default())
            .expect("noise has the generator's width")
    }

    /// `g(x, eps)` on the tape, differentiable in the generator parameters.
    pub fn generate_tape(&self, tape: &mut Tape, binding: Binding, x: f64, eps: &[f64]) -> Result<Vec<Scalar>> {
        Error::check_dim("noise", self.noise_dim, eps.len())?;
        let input: Vec<Scalar> = self.input(x, eps).into_iter().map(Scalar::Const).collect();
        self.generator.apply(tape, binding, &input)
    }
}

/// `n` draws `g(x, eps_i)`.
pub fn posterior_sample(q: &ImplicitPosterior, x: f64, rng: &mut Rng, n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| q.sample(x, rng)).collect()
}

/// The observed dataset `D`, sampled uniformly with replacement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    xs: Vec<f64>,
}

impl Dataset {
    pub fn new(xs: Vec<f64>) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if xs.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("dataset", "non-finite observation"));
        }
        Ok(Dataset { xs })
    }

    /// `n` ancestral draws from the model's marginal `p(x)`.
    pub fn from_model(model: &LatentVariableModel, n: usize, rng: &mut Rng) -> Result<Self> {
        Self::new((0..n).map(|_| model.sample_joint(rng).0).collect())
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.xs
    }

    pub fn batch(&self, rng: &mut Rng, b: usize) -> Vec<f64> {
        (0..b).map(|_| self.xs[rng.below(self.xs.len())]).collect()
    }
}
