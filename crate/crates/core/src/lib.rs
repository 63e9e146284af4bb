//! Multi-template transformer tracking: a joint attention encoder over
//! static templates, dynamic templates and a search crop, staged search-token
//! pruning, a center-point head, training losses, the template-updating
//! tracking loop, and a synthetic benchmark for evaluating all of it.

pub mod config;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod flops;
pub mod geometry;
pub mod head;
pub mod image;
pub mod model;
pub mod objectives;
pub mod params;
pub mod pruning;
pub mod tensor;
pub mod tracker;
pub mod trainkit;

pub use config::RunConfig;
pub use encoder::{EncoderConfig, EncoderInput, TokenSequence};
pub use error::{Error, Result};
pub use evalkit::{EvalReport, SequenceRecord};
pub use geometry::{giou, iou, BBox};
pub use head::TrackOutput;
pub use image::Frame;
pub use model::{Model, ModelConfig};
pub use objectives::TrainTarget;
pub use pruning::{PruneConfig, PruneDecision};
pub use tensor::{Tape, Tensor, Var};
pub use tracker::{TemplateSet, TrackerConfig, TrackerState};
pub use trainkit::{TrainConfig, TrainSample};
