//! Dense out-of-distribution detection with diffusion score matching.
//!
//! A small MLP noise predictor is trained on in-distribution feature vectors.
//! At inference every feature vector of a map is perturbed by forward
//! diffusion, the predicted noise is compared against the true perturbation by
//! cosine, and the per-timestep maps are aggregated into a pixel-wise score.

pub mod checkpoint;
pub mod cli;
pub mod denoiser;
pub mod error;
pub mod exec;
pub mod metrics;
pub mod rng;
pub mod schedule;
pub mod scorer;
pub mod synth;
pub mod tensor_store;
pub mod trainer;

pub use denoiser::{DenoiserConfig, DenoiserParams, ParamGrads, SkipMode};
pub use error::{Error, Result};
pub use exec::Execution;
pub use schedule::NoiseSchedule;
pub use tensor_store::{read_tensor, write_tensor, DenseTensor, FeatureMap, OodMask};
