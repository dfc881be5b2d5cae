//! Scalar special functions shared by the losses.

/// `log(1 + e^t)`, evaluated as `max(t, 0) + log(1 + e^{-|t|})` so that large
/// magnitudes neither overflow nor lose the asymptote.
#[inline]
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// `t - softplus(t)`, i.e. `log(sigmoid(t))`.
#[inline]
pub fn softminus(t: f64) -> f64 {
    t.min(0.0) - (-t.abs()).exp().ln_1p()
}

/// Logistic sigmoid; the derivative of [`softplus`].
#[inline]
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `sign(x) * log(1 + |x|)`; the observation feature fed to every network.
#[inline]
pub fn signed_log1p(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}
