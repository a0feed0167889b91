//! Contrastive latent-space auditing of building energy rating records.
//!
//! The crate covers loading and splitting tabular records, preprocessing,
//! tree-based feature ranking, contrastive pretraining of an encoder, latent
//! nearest-neighbour search, the rating audit itself, supervised baselines and
//! a synthetic data generator.

pub mod audit;
pub mod error;
pub mod io;
pub mod latent;
pub mod matrix;
pub mod neural;
pub mod pipeline;
pub mod preprocess;
pub mod rng;
pub mod scarf;
pub mod supervised;
pub mod synth;
pub mod tabular;
pub mod trees;

pub use audit::{audit_all, audit_one, AuditConfig, AuditFinding, AuditReport, AuditSummary};
pub use error::{Error, Result};
pub use latent::{pca_fit, EmbeddingStore, Metric, Neighbor, PcaBasis};
pub use matrix::Matrix;
pub use neural::{AdamState, DenseNet};
pub use preprocess::PreprocessorState;
pub use rng::{derive_seed, Rng};
pub use scarf::{encode, pretrain, EncoderWeights, ScarfConfig};
pub use supervised::{evaluate, train_classifier, ClassifierConfig, EvalResult, Granularity};
pub use synth::{generate, GroundTruth, SynthConfig};
pub use tabular::{BerLevel, CoarseLevel, DataTable, FeatureSchema, SplitSpec};
pub use trees::{fit_forest, fit_tree, DecisionTree, ForestModel, ForestParams};
