//! Joint video–action flow-matching policy with a learned per-frame
//! denoising schedule, trained and evaluated on a built-in deterministic
//! 2-D manipulation environment.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`] — dense f64 arrays plus a tape-based reverse-mode engine.
//! - [`env`] — the toy environment: rendering, dynamics, rewards, demos.
//! - [`params`] / [`optim`] / [`checkpoint`] — parameter registry, AdamW,
//!   and binary checkpoint I/O.
//! - [`flow`] — rectified-flow interpolation, per-frame timestep vectors,
//!   and the Euler update used at sampling time.
//! - [`backbone`] — the mixture-of-transformers video+action denoiser.
//! - [`gpn`] — the gating policy network that emits per-frame denoising
//!   rates.
//! - [`sched`] — denoising-schedule policies (shared, hand-crafted,
//!   learned) and the heterogeneous sampler loop.
//! - [`stage1`] / [`grpo`] — the two training stages.
//! - [`stats`] — rank correlation, KS distance, CSV number formatting.
//! - [`config`] / [`manifest`] — run configuration and reproducibility
//!   manifests for the CLI.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod env;
pub mod flow;
pub mod gpn;
pub mod grpo;
pub mod manifest;
pub mod optim;
pub mod params;
pub mod rng;
pub mod sched;
pub mod stage1;
pub mod stats;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("autodiff: {0}")]
    Autodiff(String),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("environment: {0}")]
    Env(String),
    #[error("training: {0}")]
    Train(String),
    #[error("verification: {0}")]
    Verify(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
