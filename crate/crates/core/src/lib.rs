//! Aspect-gated mixture of LoRA adapters on a small transformer, trained with
//! next-token, aspect-separation and attribute-aware losses, plus the
//! synthetic corpus, evaluator and experiment drivers around it.

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod experiments;
pub mod gating;
pub mod losses;
pub mod model;
pub mod trainer;

pub use autodiff::{Graph, Tensor, Var};
pub use corpus::{Constraint, Corpus, CorpusConfig, TaskSpec, TrainingSample, Vocab};
pub use error::{Error, Result};
pub use experiments::{ExperimentName, ExperimentResult, ExperimentSpec};
pub use gating::{AspectId, GateParams, GateWeights, RoutingStrategy};
pub use model::{AdapterConfig, Model, ModelConfig, ParamGroup, SamplingConfig};
