//! LoRA-of-Change: visual-instruction image editing with generated adapters.
//!
//! A hypernetwork reads a before/after image pair and emits a low-rank adapter
//! bundle for every attention layer of a frozen, image-conditioned x0-prediction
//! diffusion generator. Training only needs paired data: the query/target are
//! horizontal flips of the pair, and a reversed objective (negated bundle, roles
//! of query and target swapped) keeps the bundle from memorizing the after-image.
//!
//! Module map:
//! - [`datamodel`]: images, edit samples, checkpoint archives
//! - [`lora`]: adapter bundles and their algebra
//! - [`hypernetwork`]: pair encoder, query decoder and projection heads
//! - [`diffusion`]: noise schedule, generator UNet, DDIM sampler
//! - [`training`]: LoRA-Reverse loss, data plumbing and the optimizer loop
//! - [`synthdata`]: procedural scenes, transforms and corpora
//! - [`eval`]: alignment, fidelity and leakage metrics, ablations

pub mod config;
pub mod datamodel;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod hypernetwork;
pub mod lora;
pub mod nn;
pub mod rng;
pub mod synthdata;
pub mod training;

pub use error::{LocError, Result};
