//! Evaluation reports as CSV and as `key: value` text.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use super::metrics::{aggregate, SequenceScore};
use crate::flops::FlopsReport;

/// `%g`-style formatting with six significant digits.
pub fn fmt6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = mantissa.trim_end_matches('0').trim_end_matches('.');
        return format!("{m}e{exp}");
    }
    let decimals = (5 - exp).max(0) as usize;
    let s = format!("{v:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// First 16 hex digits of the SHA-256 of `text`.
pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub sequences: Vec<SequenceScore>,
    pub ao: f64,
    pub sr50: f64,
    pub sr75: f64,
    pub config_hash: String,
    pub flops: Option<FlopsReport>,
}

impl EvalReport {
    pub fn new(sequences: Vec<SequenceScore>, config_hash: String, flops: Option<FlopsReport>) -> Self {
        let (ao, sr50, sr75) = aggregate(&sequences);
        Self {
            sequences,
            ao,
            sr50,
            sr75,
            config_hash,
            flops,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sequence,frames,ao,sr50,sr75\n");
        for q in &self.sequences {
            let _ = writeln!(s, "{},{},{},{},{}", q.name, q.ious.len(), fmt6(q.ao), fmt6(q.sr50), fmt6(q.sr75));
        }
        let frames: usize = self.sequences.iter().map(|q| q.ious.len()).sum();
        let _ = writeln!(s, "mean,{frames},{},{},{}", fmt6(self.ao), fmt6(self.sr50), fmt6(self.sr75));
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "config_hash: {}", self.config_hash);
        let _ = writeln!(s, "sequences: {}", self.sequences.len());
        let _ = writeln!(s, "ao: {}", fmt6(self.ao));
        let _ = writeln!(s, "sr50: {}", fmt6(self.sr50));
        let _ = writeln!(s, "sr75: {}", fmt6(self.sr75));
        if let Some(f) = &self.flops {
            let _ = writeln!(s, "keep_ratio: {}", fmt6(f.keep_ratio));
            let _ = writeln!(s, "total_macs: {}", f.total_macs());
            let _ = writeln!(s, "total_gflops: {}", fmt6(f.total_gflops()));
        }
        for q in &self.sequences {
            let trace: Vec<String> = q.ious.iter().map(|&v| fmt6(v)).collect();
            let _ = writeln!(s, "sequence {}: ao {} sr50 {} sr75 {} iou [{}]", q.name, fmt6(q.ao), fmt6(q.sr50), fmt6(q.sr75), trace.join(" "));
        }
        s
    }
}
