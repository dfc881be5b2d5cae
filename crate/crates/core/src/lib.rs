//! Variational inference with implicit distributions.
//!
//! The approximate posterior is a generator network `g(x, eps)` that can be
//! sampled and differentiated but has no density. The ELBO terms that need a
//! density are replaced by learned surrogates:
//!
//! * [`ratio`]: logistic-regression discriminators estimating the log ratio
//!   `q(z|x) / p(z)` (prior-contrastive) or `q(z|x) p_D(x) / p(x, z)`
//!   (joint-contrastive);
//! * [`denoise`]: denoising networks whose residual estimates the score
//!   `d log q(z|x) / dz`.
//!
//! [`infer`] drives the outer loops (PC-Adv, JC-Adv, PC-Den, JC-Den and an
//! adversarial/denoising hybrid) and [`eval`] scores the results against
//! exact posteriors computed on a grid.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod denoise;
pub mod error;
pub mod eval;
pub mod infer;
pub mod models;
pub mod numerics;
pub mod ratio;

pub use error::{Error, Result};
