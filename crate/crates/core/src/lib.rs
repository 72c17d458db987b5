//! Single-GAN story visualization with dynamic attention selection.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]), the
//! two attention modes and the Gumbel-Softmax selector between them
//! ([`attention`], [`dynamic_block`]), a bidirectional LSTM text encoder, the
//! generator/discriminator pair and its training loop ([`storygan`]), a
//! procedural story dataset ([`synth_data`]), and FID/FSD/Cosine evaluation
//! ([`metrics`]).

pub mod error;
pub mod init;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tensor::Tensor;
pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dynamic_block;
pub mod gradcheck;
pub mod image;
pub mod text_encoder;
pub mod storygan;
pub mod synth_data;
pub mod vocab;
