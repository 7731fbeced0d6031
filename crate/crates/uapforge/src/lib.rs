//! uapforge: universal multimodal adversarial perturbations for
//! dual-encoder vision-language models.
//!
//! The toolkit learns a single image perturbation (sign-PGD with
//! future-aware momentum over a ScMix-augmented corpus) and a single
//! trigger word (intra- plus inter-sentence importance mining), then
//! evaluates both against image-text retrieval, including transfer to
//! encoders with a different input geometry.
//!
//! Models plug in through the [`adapter::EncoderBundle`] trait; a
//! deterministic toy dual encoder with analytic gradients ships for
//! desk-scale verification and as the adapter reference.

pub mod adapter;
pub mod augment;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod objective;
pub mod optimizer;
pub mod persist;
pub mod rng;
pub mod text_attack;
pub mod uap;

pub use error::{Result, UapError};
pub use uap::ImageUAP;
