//! Average overlap and success rate.

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

pub const SUCCESS_THRESHOLDS: [f64; 2] = [0.5, 0.75];

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceScore {
    pub name: String,
    /// IoU of every evaluated frame (the initial frame is not evaluated).
    pub ious: Vec<f64>,
    pub ao: f64,
    pub sr50: f64,
    pub sr75: f64,
}

/// Fraction of entries strictly above `threshold`; 0 for an empty trace.
pub fn success_rate(ious: &[f64], threshold: f64) -> f64 {
    if ious.is_empty() {
        return 0.0;
    }
    ious.iter().filter(|&&v| v > threshold).count() as f64 / ious.len() as f64
}

/// `(AO, SR_0.5, SR_0.75)` of an IoU trace.
pub fn summarize_trace(ious: &[f64]) -> (f64, f64, f64) {
    if ious.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let ao = ious.iter().sum::<f64>() / ious.len() as f64;
    (ao, success_rate(ious, 0.5), success_rate(ious, 0.75))
}

/// Scores frames `2..n`; frame 1 carries the given box and is skipped.
pub fn evaluate(name: &str, predicted: &[BBox], gt: &[BBox]) -> Result<SequenceScore> {
    if predicted.len() != gt.len() {
        return Err(Error::dim(
            "evaluate",
            format!("{} predictions for {} ground-truth boxes", predicted.len(), gt.len()),
        ));
    }
    let ious: Vec<f64> = predicted.iter().zip(gt).skip(1).map(|(p, g)| iou(p, g)).collect();
    let (ao, sr50, sr75) = summarize_trace(&ious);
    Ok(SequenceScore {
        name: name.to_string(),
        ious,
        ao,
        sr50,
        sr75,
    })
}

/// Per-sequence scores averaged over sequences that have evaluated frames.
pub fn aggregate(scores: &[SequenceScore]) -> (f64, f64, f64) {
    let used: Vec<&SequenceScore> = scores.iter().filter(|s| !s.ious.is_empty()).collect();
    if used.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let n = used.len() as f64;
    (
        used.iter().map(|s| s.ao).sum::<f64>() / n,
        used.iter().map(|s| s.sr50).sum::<f64>() / n,
        used.iter().map(|s| s.sr75).sum::<f64>() / n,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_trace() {
        let (ao, s5, s75) = summarize_trace(&[1.0, 0.6, 0.4]);
        assert!((ao - 2.0 / 3.0).abs() < 1e-15);
        assert!((s5 - 2.0 / 3.0).abs() < 1e-15);
        assert!((s75 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_missing() {
        let gt = vec![BBox::new(0.0, 0.0, 4.0, 4.0); 5];
        let s = evaluate("a", &gt, &gt).unwrap();
        assert_eq!((s.ao, s.sr50, s.sr75), (1.0, 1.0, 1.0));
        let miss: Vec<BBox> = gt.iter().map(|_| BBox::new(50.0, 50.0, 4.0, 4.0)).collect();
        let mut pred = miss;
        pred[0] = gt[0];
        let s = evaluate("b", &pred, &gt).unwrap();
        assert_eq!((s.ao, s.sr50, s.sr75), (0.0, 0.0, 0.0));
    }

    #[test]
    fn threshold_is_strict() {
        assert_eq!(success_rate(&[0.5, 0.75], 0.5), 0.5);
        assert_eq!(success_rate(&[0.75], 0.75), 0.0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let b = [BBox::new(0.0, 0.0, 1.0, 1.0)];
        assert!(evaluate("c", &b, &[b[0], b[0]]).is_err());
    }
}
