//! Analytic multiply-accumulate counts for the encoder and head.

use std::fmt::Write as _;

use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::head::head_macs;
use crate::pruning::{keep_count, PruneConfig};

/// MACs of one block over `n` tokens: Q/K/V/output projections `4·n·D²`,
/// scores and weighted values `2·n²·D`, and the MLP `2·n·D·(r·D)`.
pub fn block_macs(n: usize, dim: usize, mlp_ratio: usize) -> u64 {
    let (n, d, r) = (n as u64, dim as u64, mlp_ratio as u64);
    4 * n * d * d + 2 * n * n * d + 2 * n * d * r * d
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopsReport {
    pub keep_ratio: f64,
    pub tokens_per_block: Vec<usize>,
    pub block_macs: Vec<u64>,
    pub embed_macs: u64,
    pub head_macs: u64,
}

impl FlopsReport {
    pub fn encoder_macs(&self) -> u64 {
        self.block_macs.iter().sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.embed_macs + self.encoder_macs() + self.head_macs
    }

    /// Two FLOPs per multiply-accumulate, in units of 10⁹.
    pub fn total_gflops(&self) -> f64 {
        2.0 * self.total_macs() as f64 / 1e9
    }
}

pub fn analyze(cfg: &EncoderConfig, prune: &PruneConfig) -> Result<FlopsReport> {
    cfg.validate()?;
    prune.validate(cfg.num_blocks)?;
    let templates = cfg.num_template_tokens();
    let mut search = cfg.num_search_tokens();
    let mut tokens_per_block = Vec::with_capacity(cfg.num_blocks);
    for b in 0..cfg.num_blocks {
        if prune.stages.contains(&b) {
            search = keep_count(search, prune.keep_ratio);
        }
        tokens_per_block.push(templates + search);
    }
    let block_macs = tokens_per_block
        .iter()
        .map(|&n| block_macs(n, cfg.embed_dim, cfg.mlp_ratio))
        .collect();
    Ok(FlopsReport {
        keep_ratio: prune.keep_ratio,
        tokens_per_block,
        block_macs,
        embed_macs: (cfg.num_tokens() * cfg.patch_dim() * cfg.embed_dim) as u64,
        head_macs: head_macs(cfg.embed_dim, cfg.num_search_tokens()),
    })
}

/// One row per block plus embedding, head and total rows.
pub fn to_csv(reports: &[FlopsReport]) -> String {
    let mut out = String::from("keep_ratio,stage,tokens,macs,gflops\n");
    for r in reports {
        let rho = crate::evalkit::fmt6(r.keep_ratio);
        let g = |m: u64| crate::evalkit::fmt6(2.0 * m as f64 / 1e9);
        let _ = writeln!(out, "{rho},embed,{},{},{}", r.tokens_per_block.first().copied().unwrap_or(0), r.embed_macs, g(r.embed_macs));
        for (b, (&n, &m)) in r.tokens_per_block.iter().zip(&r.block_macs).enumerate() {
            let _ = writeln!(out, "{rho},block{b},{n},{m},{}", g(m));
        }
        let _ = writeln!(out, "{rho},head,,{},{}", r.head_macs, g(r.head_macs));
        let _ = writeln!(out, "{rho},total,,{},{}", r.total_macs(), g(r.total_macs()));
    }
    out
}
