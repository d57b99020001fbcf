//! Denoised distribution estimation (DDE) for preference optimization of
//! small diffusion models, with the baselines it is compared against and the
//! toy world used to evaluate them.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod dde_core;
pub mod error;
pub mod evaluation;
pub mod optim;
pub mod predictor;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use baselines::{method_loss, MethodKind, MethodSpec};
pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use dataset::{build_preference_pairs, PreferenceDataset, PreferencePair, ToyWorld};
pub use dde_core::{dde_loss, CalibrationTable, LossContext, PairDraw, Role};
pub use error::{DdeError, Result};
pub use evaluation::{ablation_grid, evaluate, export_diagnostics, EvalConfig, EvalReport};
pub use optim::{AdamConfig, AdamState};
pub use predictor::{Architecture, NoisePredictor, ParamGradient};
pub use sampler::{SamplerConfig, SamplerKind};
pub use schedule::{Schedule, ScheduleParams};
pub use trainer::{pretrain_reference, train, PretrainConfig, TrainConfig, TrainLog, Trainer};
