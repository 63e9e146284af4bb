//! Synthetic benchmark, metrics and report output.

pub mod generate;
pub mod metrics;
pub mod persist;
pub mod report;

pub use generate::{generate, generate_benchmark, train_eval_split, GeneratorParams, SequenceRecord};
pub use metrics::{aggregate, evaluate, success_rate, summarize_trace, SequenceScore};
pub use report::{config_hash, fmt6, EvalReport};

pub use crate::geometry::iou;

use rayon::prelude::*;

use crate::error::Result;
use crate::tracker::{track_sequence, Predictor, TrackResult, TrackerConfig};

/// Tracks every sequence from its first ground-truth box and scores it.
/// Sequences run in parallel; results keep input order.
pub fn track_and_score<P: Predictor + Sync + ?Sized>(
    predictor: &P,
    sequences: &[SequenceRecord],
    config: &TrackerConfig,
) -> Result<Vec<(TrackResult, SequenceScore)>> {
    sequences
        .par_iter()
        .map(|s| {
            let r = track_sequence(predictor, &s.frames, &s.gt[0], config)?;
            let score = evaluate(&s.name, &r.boxes, &s.gt)?;
            Ok((r, score))
        })
        .collect()
}
