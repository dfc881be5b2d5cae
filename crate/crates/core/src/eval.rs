//! Reference posteriors on 2-D grids and the quality metrics computed on them.
//!
//! Densities live on cell centers of a regular grid over `[z1_min, z1_max] x
//! [z2_min, z2_max]`, stored row-major with `z1` as the slow index. Every
//! reduction uses pairwise summation in a fixed order, so results do not
//! depend on anything but the inputs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::LatentVariableModel;
use crate::ratio::{Pair, RatioNet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub z1_min: f64,
    pub z1_max: f64,
    pub z2_min: f64,
    pub z2_max: f64,
    pub n1: usize,
    pub n2: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::square(4.0, 200)
    }
}

impl GridSpec {
    /// `[-half_width, half_width]^2` with `n` cells per side.
    pub fn square(half_width: f64, n: usize) -> Self {
        GridSpec {
            z1_min: -half_width,
            z1_max: half_width,
            z2_min: -half_width,
            z2_max: half_width,
            n1: n,
            n2: n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.z1_min, self.z1_max, self.z2_min, self.z2_max]
            .iter()
            .all(|v| v.is_finite());
        if !ok || self.z1_min >= self.z1_max || self.z2_min >= self.z2_max {
            return Err(Error::invalid("grid", "bounds must be finite with min < max"));
        }
        if self.n1 == 0 || self.n2 == 0 {
            return Err(Error::invalid("grid", "resolution must be >= 1"));
        }
        Ok(())
    }

    pub fn h1(&self) -> f64 {
        (self.z1_max - self.z1_min) / self.n1 as f64
    }

    pub fn h2(&self) -> f64 {
        (self.z2_max - self.z2_min) / self.n2 as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.h1() * self.h2()
    }

    pub fn len(&self) -> usize {
        self.n1 * self.n2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn z1_at(&self, i: usize) -> f64 {
        self.z1_min + (i as f64 + 0.5) * self.h1()
    }

    pub fn z2_at(&self, j: usize) -> f64 {
        self.z2_min + (j as f64 + 0.5) * self.h2()
    }

    /// Center of the cell at flat index `k`.
    pub fn center(&self, k: usize) -> [f64; 2] {
        [self.z1_at(k / self.n2), self.z2_at(k % self.n2)]
    }

    /// Flat index of the cell containing `z`, if inside the bounds.
    pub fn cell_of(&self, z: &[f64]) -> Option<usize> {
        let (a, b) = (z[0], z[1]);
        if !(a >= self.z1_min && a < self.z1_max && b >= self.z2_min && b < self.z2_max) {
            return None;
        }
        let i = (((a - self.z1_min) / self.h1()) as usize).min(self.n1 - 1);
        let j = (((b - self.z2_min) / self.h2()) as usize).min(self.n2 - 1);
        Some(i * self.n2 + j)
    }
}

/// Sum in a fixed binary-tree order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        xs.iter().sum()
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

/// Values on cell centers of a [`GridSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub spec: GridSpec,
    pub values: Vec<f64>,
}

impl Grid2D {
    pub fn new(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        Error::check_dim("grid values", spec.len(), values.len())?;
        Ok(Grid2D { spec, values })
    }

    pub fn from_fn<F>(spec: GridSpec, mut f: F) -> Result<Self>
    where
        F: FnMut([f64; 2]) -> Result<f64>,
    {
        spec.validate()?;
        let values = (0..spec.len()).map(|k| f(spec.center(k))).collect::<Result<Vec<_>>>()?;
        Ok(Grid2D { spec, values })
    }

    /// Normalizes `exp(log_values)` into a density, subtracting the maximum first.
    pub fn from_log_density(spec: GridSpec, log_values: Vec<f64>, what: &str) -> Result<Self> {
        let max = log_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // Below this the unshifted density underflows in every cell.
        if !(max > f64::MIN_POSITIVE.ln()) {
            return Err(Error::ZeroMass(format!("{what}: density vanishes on the grid")));
        }
        let unnorm: Vec<f64> = log_values.iter().map(|l| (l - max).exp()).collect();
        let mut grid = Grid2D::new(spec, unnorm)?;
        grid.normalize(what)?;
        Ok(grid)
    }

    pub fn cell_area(&self) -> f64 {
        self.spec.cell_area()
    }

    /// `sum values * cell_area`.
    pub fn mass(&self) -> f64 {
        pairwise_sum(&self.values) * self.cell_area()
    }

    pub fn normalize(&mut self, what: &str) -> Result<()> {
        let mass = self.mass();
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::ZeroMass(format!("{what}: mass {mass}")));
        }
        self.values.iter_mut().for_each(|v| *v /= mass);
        Ok(())
    }

    /// `(z1, z2, value)` in storage order.
    pub fn rows(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.values.iter().enumerate().map(|(k, &v)| {
            let [a, b] = self.spec.center(k);
            (a, b, v)
        })
    }

    fn check_same_grid(&self, other: &Grid2D) -> Result<()> {
        if self.spec != other.spec {
            return Err(Error::GridMismatch(format!("{:?} vs {:?}", self.spec, other.spec)));
        }
        Ok(())
    }

    /// Means, variances and correlation of the density.
    pub fn moments(&self) -> Moments {
        let area = self.cell_area();
        let weighted = |f: &dyn Fn([f64; 2]) -> f64| -> f64 {
            let terms: Vec<f64> = self
                .values
                .iter()
                .enumerate()
                .map(|(k, &v)| v * f(self.spec.center(k)))
                .collect();
            pairwise_sum(&terms) * area
        };
        let mass = self.mass();
        let m1 = weighted(&|z| z[0]) / mass;
        let m2 = weighted(&|z| z[1]) / mass;
        let v1 = weighted(&|z| (z[0] - m1).powi(2)) / mass;
        let v2 = weighted(&|z| (z[1] - m2).powi(2)) / mass;
        let c12 = weighted(&|z| (z[0] - m1) * (z[1] - m2)) / mass;
        Moments {
            mean: [m1, m2],
            var: [v1, v2],
            correlation: c12 / (v1 * v2).sqrt(),
        }
    }

    /// Header `z1,z2,value`, one row per cell in storage order, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.values.len() * 72 + 16);
        out.push_str("z1,z2,value\n");
        for (a, b, v) in self.rows() {
            writeln!(out, "{a:.16e},{b:.16e},{v:.16e}").expect("writing to a String");
        }
        out
    }
}

/// Parses the rows written by [`Grid2D::to_csv`].
pub fn parse_grid_csv(text: &str) -> Result<Vec<(f64, f64, f64)>> {
    let mut lines = text.lines();
    if lines.next() != Some("z1,z2,value") {
        return Err(Error::Config("grid csv: missing `z1,z2,value` header".into()));
    }
    lines
        .map(|line| {
            let mut cols = line.split(',').map(|c| c.parse::<f64>());
            match (cols.next(), cols.next(), cols.next(), cols.next()) {
                (Some(Ok(a)), Some(Ok(b)), Some(Ok(v)), None) => Ok((a, b, v)),
                _ => Err(Error::Config(format!("grid csv: bad row `{line}`"))),
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: [f64; 2],
    pub var: [f64; 2],
    pub correlation: f64,
}

fn check_latent_2d(model: &LatentVariableModel) -> Result<()> {
    Error::check_dim("grid latent", 2, model.latent_dim())
}

/// `p(z|x)` on the grid by normalizing `exp(log p(x, z))`.
pub fn grid_posterior(model: &LatentVariableModel, x: f64, spec: &GridSpec) -> Result<Grid2D> {
    check_latent_2d(model)?;
    if !model.explicit_joint() {
        return Err(Error::ImplicitDensity("joint"));
    }
    spec.validate()?;
    let logs = (0..spec.len())
        .map(|k| model.joint_logpdf(x, &spec.center(k)))
        .collect::<Result<Vec<_>>>()?;
    Grid2D::from_log_density(*spec, logs, &format!("posterior at x = {x}"))
}

/// A normalized histogram plus the fraction of samples that fell outside it.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub density: Grid2D,
    pub out_of_bounds: f64,
}

/// Cell counts of `samples` as a density over the in-bounds samples.
pub fn histogram_density(samples: &[Vec<f64>], spec: &GridSpec) -> Result<Histogram> {
    spec.validate()?;
    let mut counts = vec![0.0; spec.len()];
    let mut inside = 0usize;
    for z in samples {
        Error::check_dim("histogram sample", 2, z.len())?;
        if let Some(k) = spec.cell_of(z) {
            counts[k] += 1.0;
            inside += 1;
        }
    }
    if inside == 0 {
        return Err(Error::ZeroMass("no samples inside the histogram bounds".into()));
    }
    let scale = 1.0 / (inside as f64 * spec.cell_area());
    counts.iter_mut().for_each(|c| *c *= scale);
    Ok(Histogram {
        density: Grid2D::new(*spec, counts)?,
        out_of_bounds: (samples.len() - inside) as f64 / samples.len() as f64,
    })
}

pub const KL_SMOOTHING: f64 = 1e-10;

/// `sum q ln((q + eps) / (p + eps)) * cell_area`, i.e. `KL(q || p)` on the grid.
pub fn kl_grid(q_hat: &Grid2D, p_ref: &Grid2D, eps: f64) -> Result<f64> {
    q_hat.check_same_grid(p_ref)?;
    let terms: Vec<f64> = q_hat
        .values
        .iter()
        .zip(&p_ref.values)
        .map(|(&q, &p)| if q > 0.0 { q * ((q + eps) / (p + eps)).ln() } else { 0.0 })
        .collect();
    Ok(pairwise_sum(&terms) * q_hat.cell_area())
}

/// `0.5 * sum |a - b| * cell_area`.
pub fn total_variation(a: &Grid2D, b: &Grid2D) -> Result<f64> {
    a.check_same_grid(b)?;
    let terms: Vec<f64> = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).collect();
    Ok(0.5 * pairwise_sum(&terms) * a.cell_area())
}

/// Mass-weighted standard deviation of `f(z)` under the grid density.
fn weighted_std<F>(grid: &Grid2D, mut f: F) -> Result<f64>
where
    F: FnMut([f64; 2]) -> Result<f64>,
{
    let mut weights = Vec::new();
    let mut values = Vec::new();
    for (k, &w) in grid.values.iter().enumerate() {
        if w > 0.0 {
            weights.push(w);
            values.push(f(grid.spec.center(k))?);
        }
    }
    if weights.is_empty() {
        return Err(Error::ZeroMass("weighting grid".into()));
    }
    let total = pairwise_sum(&weights);
    let wv: Vec<f64> = weights.iter().zip(&values).map(|(w, v)| w * v).collect();
    let mean = pairwise_sum(&wv) / total;
    let dev: Vec<f64> = weights
        .iter()
        .zip(&values)
        .map(|(w, v)| w * (v - mean) * (v - mean))
        .collect();
    Ok((pairwise_sum(&dev) / total).sqrt())
}

/// Posterior-weighted std of `ratio(z) - log p(x|z)`. Zero when the ratio equals
/// the log-likelihood up to a constant.
pub fn ratio_limit_std<F>(model: &LatentVariableModel, x: f64, posterior: &Grid2D, mut ratio: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !model.explicit_likelihood() {
        return Err(Error::ImplicitDensity("likelihood"));
    }
    check_latent_2d(model)?;
    weighted_std(posterior, |z| Ok(ratio(&z)? - model.likelihood_logpdf(x, &z)?))
}

pub fn ratio_limit_diagnostic(r: &RatioNet, model: &LatentVariableModel, x: f64, posterior: &Grid2D) -> Result<f64> {
    ratio_limit_std(model, x, posterior, |z| r.eval(model, x, z))
}

/// Mean `|s(x, z)|` over held-out pairs.
pub fn flatness_diagnostic(s: &RatioNet, model: &LatentVariableModel, samples: &[Pair]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("flatness samples"));
    }
    let abs = samples
        .iter()
        .map(|p| Ok(s.eval(model, p.x, &p.z)?.abs()))
        .collect::<Result<Vec<_>>>()?;
    Ok(pairwise_sum(&abs) / samples.len() as f64)
}

/// Mean `|d f1/d z2 - d f2/d z1|` over the grid centers by central
/// differences with step `h`. Zero for gradient fields.
pub fn curl_proxy<F>(mut field: F, spec: &GridSpec, h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    spec.validate()?;
    if !(h > 0.0) {
        return Err(Error::invalid("h", "must be > 0"));
    }
    let mut eval = |z: [f64; 2]| -> Result<Vec<f64>> {
        let v = field(&z)?;
        Error::check_dim("vector field", 2, v.len())?;
        Ok(v)
    };
    let mut curls = Vec::with_capacity(spec.len());
    for k in 0..spec.len() {
        let [a, b] = spec.center(k);
        let d1_dz2 = (eval([a, b + h])?[0] - eval([a, b - h])?[0]) / (2.0 * h);
        let d2_dz1 = (eval([a + h, b])?[1] - eval([a - h, b])?[1]) / (2.0 * h);
        curls.push((d1_dz2 - d2_dz1).abs());
    }
    Ok(pairwise_sum(&curls) / curls.len() as f64)
}

/// Per-observation summary of a fitted posterior. Entries that do not apply
/// to the method are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Diagnostics {
    pub x: f64,
    pub kl_nats: Option<f64>,
    pub ratio_limit_std: Option<f64>,
    pub flatness_mean_abs: Option<f64>,
    pub posterior_correlation: Option<f64>,
    pub curl_proxy: Option<f64>,
    pub out_of_bounds: Option<f64>,
}

impl Diagnostics {
    pub fn all_finite(&self) -> bool {
        [
            Some(self.x),
            self.kl_nats,
            self.ratio_limit_std,
            self.flatness_mean_abs,
            self.posterior_correlation,
            self.curl_proxy,
            self.out_of_bounds,
        ]
        .iter()
        .flatten()
        .all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{exact_posterior, GaussianSpec, ObsEncoding};
    use crate::numerics::{Activation, MlpParams, Rng};

    fn gaussian_grid(spec: GridSpec, mean: [f64; 2]) -> Grid2D {
        let g = GaussianSpec::new(mean.to_vec(), vec![1.0, 1.0]).unwrap();
        let logs = (0..spec.len()).map(|k| g.logpdf(&spec.center(k)).unwrap()).collect();
        Grid2D::from_log_density(spec, logs, "gaussian").unwrap()
    }

    fn sprinkler() -> LatentVariableModel {
        LatentVariableModel::sprinkler(1.0).unwrap()
    }

    /// Zero network plus the likelihood, shifted by `c`.
    fn likelihood_ratio(c: f64) -> RatioNet {
        let mut net = MlpParams::zeros(ObsEncoding::WIDTH + 2, &[3], 1, Activation::Relu);
        let r = net.output_bias_range();
        net.params_mut()[r].copy_from_slice(&[c]);
        RatioNet::from_net(net, ObsEncoding::default())
            .unwrap()
            .with_ensemble_weight(1.0)
            .unwrap()
    }

    #[test]
    fn default_grid() {
        let s = GridSpec::default();
        assert_eq!((s.n1, s.n2), (200, 200));
        assert!((s.cell_area() - 0.0016).abs() < 1e-15);
        assert_eq!(s.center(0), [-3.98, -3.98]);
        assert_eq!(s.cell_of(&[-3.98, -3.98]), Some(0));
        assert_eq!(s.cell_of(&[4.0, 0.0]), None);
        assert_eq!(s.cell_of(&[3.999, 3.999]), Some(s.len() - 1));
    }

    #[test]
    fn pairwise_sum_is_accurate() {
        let xs = vec![0.1; 100_000];
        assert!((pairwise_sum(&xs) - 10_000.0).abs() < 1e-9);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }

    #[test]
    fn posterior_is_normalized() {
        for x in [0.0, 8.0, 50.0] {
            let g = grid_posterior(&sprinkler(), x, &GridSpec::default()).unwrap();
            assert!((g.mass() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn linear_gaussian_grid_matches_conjugate() {
        let a = vec![1.0, 1.0];
        let model = LatentVariableModel::linear_gaussian(a.clone(), 1.0).unwrap();
        let spec = GridSpec::square(5.0, 200);
        let grid = grid_posterior(&model, 3.0, &spec).unwrap();
        let exact = exact_posterior(&a, 1.0, 3.0).unwrap();
        let mut reference = Grid2D::from_fn(spec, |z| Ok(exact.logpdf(&z)?.exp())).unwrap();
        reference.normalize("conjugate").unwrap();
        assert!(total_variation(&grid, &reference).unwrap() < 1e-3);
        let m = grid.moments();
        assert!((m.mean[0] - 1.0).abs() < 1e-3 && (m.mean[1] - 1.0).abs() < 1e-3);
        assert!((m.correlation + 0.5).abs() < 1e-3);
    }

    #[test]
    fn explaining_away_ordering() {
        let c: Vec<f64> = [0.0, 8.0, 50.0]
            .iter()
            .map(|&x| {
                grid_posterior(&sprinkler(), x, &GridSpec::default())
                    .unwrap()
                    .moments()
                    .correlation
            })
            .collect();
        assert!(c[0] > c[1] && c[1] > c[2], "{c:?}");
    }

    #[test]
    fn zero_mass_is_an_error() {
        // Negative counts are impossible under the exponential likelihood.
        assert!(matches!(
            grid_posterior(&sprinkler(), -1.0, &GridSpec::default()),
            Err(Error::ZeroMass(_))
        ));
        let implicit = sprinkler().with_implicit_prior();
        assert!(grid_posterior(&implicit, 0.0, &GridSpec::default()).is_err());
    }

    #[test]
    fn histogram_single_cell() {
        let spec = GridSpec::square(1.0, 4);
        let h = histogram_density(&[vec![0.1, 0.1], vec![0.2, 0.2], vec![9.0, 0.0]], &spec).unwrap();
        let k = spec.cell_of(&[0.1, 0.1]).unwrap();
        assert_eq!(h.density.values[k], 1.0 / spec.cell_area());
        assert_eq!(h.density.values.iter().filter(|&&v| v != 0.0).count(), 1);
        assert!((h.out_of_bounds - 1.0 / 3.0).abs() < 1e-15);
        assert!((h.density.mass() - 1.0).abs() < 1e-12);
        assert!(matches!(
            histogram_density(&[vec![5.0, 5.0]], &spec),
            Err(Error::ZeroMass(_))
        ));
    }

    /// Expected TV between a multinomial histogram of `n` draws and its cell
    /// probabilities: `0.5 * sum_k sqrt(2 p_k (1 - p_k) / (pi n))`.
    fn multinomial_tv_floor(reference: &Grid2D, n: usize) -> f64 {
        let area = reference.cell_area();
        let terms: Vec<f64> = reference
            .values
            .iter()
            .map(|&d| {
                let p = d * area;
                (2.0 * p * (1.0 - p) / (std::f64::consts::PI * n as f64)).sqrt()
            })
            .collect();
        0.5 * pairwise_sum(&terms)
    }

    #[test]
    fn histogram_of_normal_samples_matches_density() {
        let mut rng = Rng::new(17);
        let n = 1_000_000;
        let samples: Vec<Vec<f64>> = (0..n).map(|_| rng.normals(2)).collect();
        for (cells, bound) in [(100, None), (50, Some(0.02))] {
            let spec = GridSpec::square(4.0, cells);
            let reference = gaussian_grid(spec, [0.0, 0.0]);
            let h = histogram_density(&samples, &spec).unwrap();
            let tv = total_variation(&h.density, &reference).unwrap();
            let floor = multinomial_tv_floor(&reference, n);
            assert!(tv <= 1.1 * floor, "{cells}: tv = {tv}, noise floor {floor}");
            if let Some(b) = bound {
                assert!(tv <= b, "{cells}: tv = {tv}");
            }
        }
    }

    #[test]
    fn kl_identities() {
        let spec = GridSpec::square(6.0, 200);
        let p = gaussian_grid(spec, [0.0, 0.0]);
        let q = gaussian_grid(spec, [1.0, 0.0]);
        assert!(kl_grid(&p, &p, KL_SMOOTHING).unwrap().abs() < 1e-12);
        let kl = kl_grid(&p, &q, KL_SMOOTHING).unwrap();
        assert!((kl - 0.5).abs() < 0.01, "{kl}");

        let wide = {
            let g = GaussianSpec::new(vec![0.0, 0.0], vec![2.0, 1.0]).unwrap();
            let logs = (0..spec.len()).map(|k| g.logpdf(&spec.center(k)).unwrap()).collect();
            Grid2D::from_log_density(spec, logs, "wide").unwrap()
        };
        let ab = kl_grid(&p, &wide, KL_SMOOTHING).unwrap();
        let ba = kl_grid(&wide, &p, KL_SMOOTHING).unwrap();
        assert!((ab - ba).abs() > 0.1, "{ab} {ba}");

        let other = GridSpec::square(5.0, 200);
        assert!(matches!(
            kl_grid(&p, &gaussian_grid(other, [0.0, 0.0]), KL_SMOOTHING),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn ratio_limit_ignores_constants() {
        let model = sprinkler();
        let spec = GridSpec::square(4.0, 50);
        for x in [0.0, 8.0] {
            let post = grid_posterior(&model, x, &spec).unwrap();
            for c in [-5.0, 0.0, 7.0, 13.0] {
                let d = ratio_limit_diagnostic(&likelihood_ratio(c), &model, x, &post).unwrap();
                assert!(d.abs() < 1e-9, "{c}: {d}");
            }
        }
    }

    #[test]
    fn ratio_limit_of_zero_ratio_is_likelihood_spread() {
        let model = sprinkler();
        let spec = GridSpec::square(4.0, 50);
        let post = grid_posterior(&model, 8.0, &spec).unwrap();
        let zero = RatioNet::from_net(
            MlpParams::zeros(ObsEncoding::WIDTH + 2, &[3], 1, Activation::Relu),
            ObsEncoding::default(),
        )
        .unwrap();
        let d = ratio_limit_diagnostic(&zero, &model, 8.0, &post).unwrap();
        let spread = weighted_std(&post, |z| Ok(-model.likelihood_logpdf(8.0, &z)?)).unwrap();
        assert!(d > 0.0);
        assert!((d - spread).abs() < 1e-12);
    }

    #[test]
    fn flatness() {
        let model = sprinkler();
        let pairs = vec![Pair::new(1.0, vec![0.0, 0.0]), Pair::new(3.0, vec![1.0, -1.0])];
        let zero = likelihood_ratio(0.0).with_ensemble_weight(0.0).unwrap();
        assert_eq!(flatness_diagnostic(&zero, &model, &pairs).unwrap(), 0.0);
        let c = likelihood_ratio(-2.5).with_ensemble_weight(0.0).unwrap();
        assert_eq!(flatness_diagnostic(&c, &model, &pairs).unwrap(), 2.5);
        assert!(matches!(flatness_diagnostic(&c, &model, &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn curl_of_rotation_and_gradient_fields() {
        let spec = GridSpec::square(2.0, 20);
        let rot = curl_proxy(|z| Ok(vec![-z[1], z[0]]), &spec, 1e-4).unwrap();
        assert!((rot - 2.0).abs() < 1e-6);

        // Gradient of a scalar network f(z) via the tape.
        let mut rng = Rng::new(23);
        let net = MlpParams::new(2, &[8, 8], 1, Activation::Tanh, &mut rng);
        let grad = |z: &[f64]| -> Result<Vec<f64>> {
            let mut tape = crate::numerics::Tape::new();
            let leaves = tape.leaves(z);
            let input: Vec<_> = (0..2).map(|i| leaves.get(i)).collect();
            let out = net.apply(&mut tape, crate::numerics::Binding::Frozen, &input)?[0];
            Ok(tape.backward(out).leaves(leaves).to_vec())
        };
        let curl = curl_proxy(grad, &spec, 1e-4).unwrap();
        assert!(curl <= 1e-3, "{curl}");
    }

    #[test]
    fn csv_round_trip() {
        let spec = GridSpec::square(1.5, 7);
        let g = gaussian_grid(spec, [0.3, -0.2]);
        let text = g.to_csv();
        assert!(text.starts_with("z1,z2,value\n"));
        let rows = parse_grid_csv(&text).unwrap();
        assert_eq!(rows, g.rows().collect::<Vec<_>>());
        assert!(parse_grid_csv("a,b\n").is_err());
    }

    #[test]
    fn diagnostics_json_round_trip() {
        let d = Diagnostics {
            x: 8.0,
            kl_nats: Some(0.123_456_789_012_345_67),
            posterior_correlation: Some(-0.1),
            ..Default::default()
        };
        let text = serde_json::to_string(&d).unwrap();
        assert_eq!(serde_json::from_str::<Diagnostics>(&text).unwrap(), d);
        assert!(d.all_finite());
    }
}
