//! Search-token pruning driven by template-center attention.

use crate::encoder::TokenSequence;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct PruneConfig {
    /// Fraction `ρ ∈ (0, 1]` of current search tokens kept at each stage.
    pub keep_ratio: f64,
    /// 0-based indices of the blocks before which pruning runs.
    pub stages: Vec<usize>,
}

impl PruneConfig {
    pub fn none() -> Self {
        Self {
            keep_ratio: 1.0,
            stages: Vec::new(),
        }
    }

    pub fn new(keep_ratio: f64, stages: Vec<usize>) -> Self {
        Self { keep_ratio, stages }
    }

    pub fn validate(&self, num_blocks: usize) -> Result<()> {
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return Err(Error::Config(format!("keep ratio {} outside (0, 1]", self.keep_ratio)));
        }
        if self.stages.first() == Some(&0) {
            return Err(Error::Config(
                "pruning before block 0 has no attention weights to score with".into(),
            ));
        }
        if self.stages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("stages {:?} not strictly increasing", self.stages)));
        }
        if let Some(&s) = self.stages.iter().find(|&&s| s >= num_blocks) {
            return Err(Error::Config(format!("stage {s} beyond {num_blocks} blocks")));
        }
        Ok(())
    }
}

/// `⌈ρ·n⌉`, at least one token. The small slack keeps products such as
/// `0.7 · 290` that land a rounding error above an integer from rounding up.
pub fn keep_count(n: usize, keep_ratio: f64) -> usize {
    if n == 0 {
        return 0;
    }
    ((keep_ratio * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

/// Search-token counts after each of `stages` successive prunings.
pub fn search_counts(initial: usize, keep_ratio: f64, stages: usize) -> Vec<usize> {
    let mut n = initial;
    (0..stages)
        .map(|_| {
            n = keep_count(n, keep_ratio);
            n
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneDecision {
    /// Score per current search token, in sequence order.
    pub omega: Vec<f64>,
    /// Sequence positions that survive, template tokens included, ascending.
    pub kept_indices: Vec<usize>,
    /// Number of search tokens among `kept_indices`.
    pub kept_search: usize,
    pub dropped_grid_coords: Vec<(usize, usize)>,
}

/// Relevance of each search token: per head, the summed attention that
/// center-flagged static and dynamic template rows pay to it, averaged over
/// heads.
pub fn score_tokens(attention: &[Tensor], seq: &TokenSequence) -> Result<Vec<f64>> {
    if attention.is_empty() {
        return Err(Error::Contract("no attention weights to score search tokens".into()));
    }
    let n = seq.len();
    let rows: Vec<usize> = (0..n).filter(|&i| seq.tokens[i].center).collect();
    if rows.is_empty() {
        return Err(Error::Contract("no template center tokens in sequence".into()));
    }
    let cols = seq.search_positions();
    let mut omega = vec![0.0; cols.len()];
    for a in attention {
        if a.shape() != [n, n] {
            return Err(Error::dim(
                "score_tokens",
                format!("attention {:?} for {n} tokens", a.shape()),
            ));
        }
        for &r in &rows {
            for (o, &c) in omega.iter_mut().zip(&cols) {
                *o += a.at2(r, c);
            }
        }
    }
    let heads = attention.len() as f64;
    omega.iter_mut().for_each(|o| *o /= heads);
    Ok(omega)
}

/// Indices (into `omega`) of the top `k`, highest first. Ties go to the
/// lower original grid index `keys`.
pub fn top_k(omega: &[f64], keys: &[usize], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..omega.len()).collect();
    order.sort_by(|&a, &b| omega[b].total_cmp(&omega[a]).then(keys[a].cmp(&keys[b])));
    order.truncate(k);
    order
}

/// Drops search tokens outside the top `⌈ρ·n⌉` of `omega`. Survivors keep
/// their relative order and grid coordinates.
pub fn prune(
    tape: &mut Tape,
    seq: TokenSequence,
    omega: &[f64],
    keep_ratio: f64,
) -> Result<(TokenSequence, PruneDecision)> {
    let search = seq.search_positions();
    if omega.len() != search.len() {
        return Err(Error::dim(
            "prune",
            format!("{} scores for {} search tokens", omega.len(), search.len()),
        ));
    }
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::Config(format!("keep ratio {keep_ratio} outside (0, 1]")));
    }
    let width = seq.tokens.iter().map(|t| t.col).max().unwrap_or(0) + 1;
    let keys: Vec<usize> = search
        .iter()
        .map(|&i| seq.tokens[i].row * width + seq.tokens[i].col)
        .collect();
    let k = keep_count(search.len(), keep_ratio);
    let mut keep = vec![false; seq.len()];
    for (i, t) in seq.tokens.iter().enumerate() {
        keep[i] = !t.segment.is_search();
    }
    for j in top_k(omega, &keys, k) {
        keep[search[j]] = true;
    }
    let kept_indices: Vec<usize> = (0..seq.len()).filter(|&i| keep[i]).collect();
    let dropped_grid_coords = search
        .iter()
        .filter(|&&i| !keep[i])
        .map(|&i| (seq.tokens[i].row, seq.tokens[i].col))
        .collect();
    let embeddings = tape.gather_rows(seq.embeddings, &kept_indices)?;
    let tokens = kept_indices.iter().map(|&i| seq.tokens[i]).collect();
    let decision = PruneDecision {
        omega: omega.to_vec(),
        kept_indices,
        kept_search: k,
        dropped_grid_coords,
    };
    Ok((TokenSequence { embeddings, tokens }, decision))
}

/// Search tokens placed at their original cells of a `height × width` grid,
/// as a `[D, H·W]` channel-major feature map. Pruned cells are zero.
pub fn scatter_to_grid(tape: &mut Tape, seq: &TokenSequence, width: usize, height: usize) -> Result<Var> {
    let positions = seq.search_positions();
    let mut cells = Vec::with_capacity(positions.len());
    for &i in &positions {
        let t = seq.tokens[i];
        if t.row >= height || t.col >= width {
            return Err(Error::Contract(format!(
                "search token at ({}, {}) outside {height}x{width} grid",
                t.row, t.col
            )));
        }
        cells.push(t.row * width + t.col);
    }
    let rows = tape.gather_rows(seq.embeddings, &positions)?;
    let grid = tape.scatter_rows(rows, &cells, width * height)?;
    tape.transpose(grid)
}
