//! Online class-incremental learning with prototype memory for the final
//! classification layer and fine-grained hypergradient gradient reweighting.
//!
//! The crate is organised bottom-up:
//!
//! - [`numkit`]: dense row-major matrices and a seeded splittable generator.
//! - [`model`]: the classifier `features(x) · W + b` with explicit backprop
//!   and batch-masked softmax cross-entropy.
//! - [`prototypes`]: running class means and the prototype recalibration loss.
//! - [`fgh`]: the hypergradient reweighting wrapper and the base optimizers.
//! - [`stream`]: synthetic and CSV datasets, clear and Si-Blurry streams.
//! - [`trainer`]: the single-pass training loop, replay buffer, evaluation.
//! - [`metrics`]: average accuracy/performance and gradient-imbalance stats.
//! - [`experiment`]: seeded sweeps, best-hyperparameter selection, tables.
//! - [`checkpoint`]: the versioned binary container for params and banks.

pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod fgh;
pub mod metrics;
pub mod model;
pub mod numkit;
pub mod prototypes;
pub mod stream;
pub mod trainer;

pub use error::{Error, Result};
pub use fgh::{BaseOptimizer, DotNormalization, Fgh, FghConfig, Granularity, OptimizerKind};
pub use metrics::{AccuracyMatrix, GradNormLog};
pub use model::{Extractor, ForwardCache, GradientSet, ModelConfig, ModelParams};
pub use numkit::{Matrix, Rng};
pub use prototypes::{PrototypeBank, ProtoNorm};
pub use stream::{Dataset, Sample, StreamMode, StreamSpec, TaskStream};
pub use trainer::{Method, MethodConfig, ReplayBuffer, RunRecord};
