//! Unsupervised speech enhancement in the complex STFT domain.
//!
//! A diffusion prior over clean speech (optionally conditioned on visual
//! embeddings) is combined with a low-rank NMF noise model. Enhancement runs
//! a predictor-corrector reverse diffusion with an observation-consistency
//! gradient; noise parameters are refit either once per reverse step
//! (`udiffse+`) or by outer EM rounds (`udiffse`).

pub mod av_fusion;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod nmf;
pub mod sampler;
pub mod score;
pub mod sde;
pub mod spectral;

pub use error::{Error, Result};
