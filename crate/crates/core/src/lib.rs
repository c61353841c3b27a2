//! Diffusion autoencoder with a group-supervised disentangling head.
//!
//! Layers, bottom up: [`nn`] (tensors, reverse-mode autodiff, Adam,
//! checkpoints), [`schedules`] and [`ddim`] (noise schedule, deterministic
//! sampler and inversion), the three networks ([`encoder`], [`denoiser`],
//! [`gae`]), the procedural [`dataset`], staged [`training`], and [`eval`].

pub mod blocks;
pub mod config;
pub mod dataset;
pub mod ddim;
pub mod denoiser;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gae;
pub mod nn;
pub mod rng;
pub mod schedules;
pub mod training;

pub use config::{EvalConfig, ExperimentConfig, ScheduleConfig, Stage, StageConfig};
pub use dataset::{AttributeTuple, GroupSample, LatentStore};
pub use ddim::SamplerConfig;
pub use denoiser::{Denoiser, DenoiserConfig};
pub use encoder::{EncoderConfig, SemanticEncoder};
pub use error::{Error, Result};
pub use eval::{EvalReport, Model, NoiseSource};
pub use gae::{Attribute, AttributeLayout, Gae, GaeConfig};
pub use nn::{Checkpoint, ParamStore, Tensor};
pub use rng::Rng;
pub use schedules::NoiseSchedule;
pub use training::{Pipeline, TrainState};
