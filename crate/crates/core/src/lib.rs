//! NodeDiffRec: augmentation of implicit-feedback interaction matrices with
//! diffusion-generated pseudo-items and diffusion-refined user preferences.
//!
//! The pipeline has two stages. Stage one pretrains LightGCN node
//! embeddings, fits an injection VAE over graph nodes, learns a
//! class-conditional DDPM over the node latents and decodes sampled item
//! latents into new item columns ([`enrichment`]). Stage two fits a
//! per-user preference VAE over the augmented matrix, trains a latent
//! diffusion model and denoises every user's latent before decoding
//! ([`preference_denoiser`]). Downstream [`recommenders`] are trained on the
//! result and scored with [`metrics`].

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod enrichment;
pub mod error;
pub mod graph_embed;
pub mod injection_diffusion;
pub mod injection_vae;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod preference_denoiser;
pub mod recommenders;
pub mod report;
pub mod schedule;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded generator for one named stream of a run.
///
/// Each stage draws from its own stream so adding draws to one stage does
/// not perturb the others.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
