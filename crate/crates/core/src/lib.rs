//! Domain dynamic adjustment meta-learning for live/spoof classification.
//!
//! The crate discovers latent domains in a mixed-source training set by
//! clustering convolutional style statistics, then meta-trains a classifier
//! across those pseudo domains with MMD and depth regularization.

pub mod clustering;
pub mod data_synth;
pub mod domain_repr;
pub mod error;
pub mod harness;
pub mod losses;
pub mod meta_trainer;
pub mod model;
pub mod real;
pub mod rng;
pub mod tensor;

pub use clustering::{assign_pseudo_domains, kmeans, kuhn_munkres, nmi, ClusterAssignment, ReferenceExtractor};
pub use data_synth::{generate_dataset, load_dataset, save_dataset, Dataset, DatasetSpec, DomainStyle, Sample};
pub use domain_repr::EntropyForm;
pub use error::{Error, Result};
pub use harness::{evaluate, AblationVariant, MetricsReport};
pub use meta_trainer::{train, HyperParams, TrainOutcome};
pub use model::{ModelConfig, ModelParams, ModelState};
pub use tensor::{FeatureMap, Tensor};
