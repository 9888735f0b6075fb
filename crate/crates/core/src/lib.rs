//! Adapter-enhanced semantic prompting for rehearsal-free continual learning.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod iqkm;
pub mod losses;
pub mod math;
pub mod model;
pub mod objective;
pub mod run;
pub mod tensors;
pub mod text;
pub mod trainer;

pub use backbone::{AdapterParams, Backbone, BackboneConfig, ForwardOutput, PromptAttention};
pub use data::{Dataset, Image, Sample};
pub use error::{AespError, Result};
pub use iqkm::{IqkmMode, SelectionRecord, SelectorConfig};
pub use losses::{ContrastConfig, LossTerms};
pub use model::{Classifier, LabelSpace, PromptPool, TaskBundle, TaskParams, TokenSequence};
