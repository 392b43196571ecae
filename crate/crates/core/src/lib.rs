//! Unified generative ranking over serialized user journeys.

pub mod catalog;
pub mod corpus;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod grammar;
pub mod lm;
pub mod prompt;
pub mod scalar;
pub mod story;
pub mod vocab;

pub use catalog::{CatalogCarousel, CatalogIndex, CatalogItem};
pub use error::{Error, Result};
pub use grammar::{parse, serialize, StoryText};
pub use story::{segment_sessions, validate_story, UserStory};
pub use vocab::{TokenId, Vocabulary};
pub use lm::{Checkpoint, Model, ModelConfig, TrainConfig, Trainer};
pub use prompt::{RankedList, TaskKind, TaskPrompt};
pub use scalar::{Dtype, Scalar};

pub type Model32 = lm::Model<f32>;
pub type Model64 = lm::Model<f64>;
pub type Trainer32 = lm::Trainer<f32>;
pub type Trainer64 = lm::Trainer<f64>;
pub type Checkpoint32 = lm::Checkpoint<f32>;
pub type Checkpoint64 = lm::Checkpoint<f64>;
