//! Patch embedding and the stack of attention blocks that run jointly over
//! static template, dynamic template and search tokens.
//!
//! The token sequence is always laid out as
//! `[static_1 .. static_m ; dynamic_1 .. dynamic_m ; search]`. Each block is
//! pre-norm (`x + attn(ln(x))`, then `x + mlp(ln(x))`) and attends over the
//! whole concatenation, so template↔template, template↔search and
//! search↔search interactions all come out of one softmax per row.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::pruning::{self, PruneConfig, PruneDecision};
use crate::tensor::{mac_count, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub mlp_ratio: usize,
    pub template_resolution: usize,
    pub search_resolution: usize,
    /// Number of template scales `m`.
    pub num_scales: usize,
    /// When false the dynamic segment is omitted from the sequence entirely.
    pub dynamic_templates: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// Small CPU-trainable configuration.
    pub fn desk() -> Self {
        Self {
            patch_size: 16,
            embed_dim: 64,
            num_heads: 4,
            num_blocks: 6,
            mlp_ratio: 4,
            template_resolution: 32,
            search_resolution: 64,
            num_scales: 2,
            dynamic_templates: true,
        }
    }

    /// ViT-B geometry with 192² templates and a 384² search area.
    pub fn full_size() -> Self {
        Self {
            patch_size: 16,
            embed_dim: 768,
            num_heads: 12,
            num_blocks: 12,
            mlp_ratio: 4,
            template_resolution: 192,
            search_resolution: 384,
            num_scales: 2,
            dynamic_templates: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.embed_dim == 0 || self.num_heads == 0 || self.num_blocks == 0 {
            return bad("patch_size, embed_dim, num_heads and num_blocks must be positive".into());
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        if self.template_resolution == 0 || self.template_resolution % self.patch_size != 0 {
            return bad(format!(
                "template_resolution {} is not a positive multiple of patch_size {}",
                self.template_resolution, self.patch_size
            ));
        }
        if self.search_resolution == 0 || self.search_resolution % self.patch_size != 0 {
            return bad(format!(
                "search_resolution {} is not a positive multiple of patch_size {}",
                self.search_resolution, self.patch_size
            ));
        }
        if self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_scales == 0 {
            return bad("at least one template scale is required".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn template_grid(&self) -> usize {
        self.template_resolution / self.patch_size
    }

    pub fn search_grid(&self) -> usize {
        self.search_resolution / self.patch_size
    }

    pub fn tokens_per_template(&self) -> usize {
        self.template_grid().pow(2)
    }

    pub fn num_search_tokens(&self) -> usize {
        self.search_grid().pow(2)
    }

    pub fn num_template_tokens(&self) -> usize {
        let copies = if self.dynamic_templates { 2 } else { 1 };
        copies * self.num_scales * self.tokens_per_template()
    }

    pub fn num_tokens(&self) -> usize {
        self.num_template_tokens() + self.num_search_tokens()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Static(usize),
    Dynamic(usize),
    Search,
}

impl Segment {
    fn type_index(self) -> usize {
        match self {
            Segment::Static(_) => 0,
            Segment::Dynamic(_) => 1,
            Segment::Search => 2,
        }
    }

    pub fn is_search(self) -> bool {
        self == Segment::Search
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenInfo {
    pub segment: Segment,
    /// Position in the source patch grid; survives pruning.
    pub row: usize,
    pub col: usize,
    /// Template center token, used to score search tokens for pruning.
    pub center: bool,
}

/// Token embeddings on a tape plus per-token metadata.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub embeddings: Var,
    pub tokens: Vec<TokenInfo>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn search_positions(&self) -> Vec<usize> {
        (0..self.tokens.len()).filter(|&i| self.tokens[i].segment.is_search()).collect()
    }

    pub fn num_search(&self) -> usize {
        self.tokens.iter().filter(|t| t.segment.is_search()).count()
    }

    /// Grid coordinates of the search tokens still present.
    pub fn search_coords(&self) -> Vec<(usize, usize)> {
        self.tokens
            .iter()
            .filter(|t| t.segment.is_search())
            .map(|t| (t.row, t.col))
            .collect()
    }
}

/// Image crops feeding one forward pass, each planar `[3, R, R]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderInput {
    pub static_crops: Vec<Tensor>,
    /// Ignored when the config disables dynamic templates.
    pub dynamic_crops: Vec<Tensor>,
    pub search: Tensor,
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub patch_weight: ParamId,
    pub patch_bias: ParamId,
    /// Positional table for template grids, shared by all scales and both
    /// template kinds.
    pub pos_template: ParamId,
    pub pos_search: ParamId,
    /// Rows: static, dynamic, search.
    pub segment: ParamId,
    pub blocks: Vec<BlockParams>,
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
}

impl EncoderParams {
    pub fn init<R: Rng>(cfg: &EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        let hidden = d * cfg.mlp_ratio;
        let patch_weight = store.linear("encoder.patch.weight", cfg.patch_dim(), d, rng);
        let patch_bias = store.add("encoder.patch.bias", Tensor::zeros([d]));
        let pos_template = store.add(
            "encoder.pos.template",
            Tensor::randn([cfg.tokens_per_template(), d], 0.02, rng),
        );
        let pos_search = store.add(
            "encoder.pos.search",
            Tensor::randn([cfg.num_search_tokens(), d], 0.02, rng),
        );
        let segment = store.add("encoder.segment", Tensor::randn([3, d], 0.02, rng));
        let blocks = (0..cfg.num_blocks)
            .map(|b| {
                let p = |s: &str| format!("encoder.block{b}.{s}");
                BlockParams {
                    ln1_gamma: store.add(p("ln1.gamma"), Tensor::ones([d])),
                    ln1_beta: store.add(p("ln1.beta"), Tensor::zeros([d])),
                    wq: store.linear(&p("attn.wq"), d, d, rng),
                    bq: store.add(p("attn.bq"), Tensor::zeros([d])),
                    wk: store.linear(&p("attn.wk"), d, d, rng),
                    bk: store.add(p("attn.bk"), Tensor::zeros([d])),
                    wv: store.linear(&p("attn.wv"), d, d, rng),
                    bv: store.add(p("attn.bv"), Tensor::zeros([d])),
                    wo: store.linear(&p("attn.wo"), d, d, rng),
                    bo: store.add(p("attn.bo"), Tensor::zeros([d])),
                    ln2_gamma: store.add(p("ln2.gamma"), Tensor::ones([d])),
                    ln2_beta: store.add(p("ln2.beta"), Tensor::zeros([d])),
                    mlp_w1: store.linear(&p("mlp.w1"), d, hidden, rng),
                    mlp_b1: store.add(p("mlp.b1"), Tensor::zeros([hidden])),
                    mlp_w2: store.linear(&p("mlp.w2"), hidden, d, rng),
                    mlp_b2: store.add(p("mlp.b2"), Tensor::zeros([d])),
                }
            })
            .collect();
        let norm_gamma = store.add("encoder.norm.gamma", Tensor::ones([d]));
        let norm_beta = store.add("encoder.norm.beta", Tensor::zeros([d]));
        Self {
            patch_weight,
            patch_bias,
            pos_template,
            pos_search,
            segment,
            blocks,
            norm_gamma,
            norm_beta,
        }
    }
}

/// Splits a planar `[3, R, R]` image into non-overlapping `p×p` patches, in
/// raster order, each flattened as `(channel, y, x)`.
pub fn patchify(img: &Tensor, resolution: usize, patch: usize) -> Result<Tensor> {
    if img.shape() != [3, resolution, resolution] {
        return Err(Error::dim(
            "patchify",
            format!("expected [3, {resolution}, {resolution}], got {:?}", img.shape()),
        ));
    }
    let g = resolution / patch;
    let src = img.data();
    let dim = 3 * patch * patch;
    let mut out = Vec::with_capacity(g * g * dim);
    for gy in 0..g {
        for gx in 0..g {
            for c in 0..3 {
                for py in 0..patch {
                    let row = c * resolution * resolution + (gy * patch + py) * resolution + gx * patch;
                    out.extend_from_slice(&src[row..row + patch]);
                }
            }
        }
    }
    Tensor::new([g * g, dim], out)
}

/// Center tokens of a `g×g` grid: the middle cell for odd `g`, the four
/// cells around the middle for even `g`.
pub fn is_center(row: usize, col: usize, g: usize) -> bool {
    let half = g / 2;
    if g % 2 == 1 {
        row == half && col == half
    } else {
        (half - 1..=half).contains(&row) && (half - 1..=half).contains(&col)
    }
}

fn embed_crop(
    tape: &mut Tape,
    bound: &Bound,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    img: &Tensor,
    resolution: usize,
    segment: Segment,
) -> Result<(Var, Vec<TokenInfo>)> {
    let patches = patchify(img, resolution, cfg.patch_size)?;
    let p = tape.constant(patches);
    let e = tape.matmul(p, bound.var(params.patch_weight))?;
    let e = tape.add_row(e, bound.var(params.patch_bias))?;
    let pos = if segment.is_search() { params.pos_search } else { params.pos_template };
    let e = tape.add(e, bound.var(pos))?;
    let seg_row = tape.gather_rows(bound.var(params.segment), &[segment.type_index()])?;
    let e = tape.add_row(e, seg_row)?;
    let g = resolution / cfg.patch_size;
    let tokens = (0..g * g)
        .map(|i| {
            let (row, col) = (i / g, i % g);
            TokenInfo {
                segment,
                row,
                col,
                center: !segment.is_search() && is_center(row, col, g),
            }
        })
        .collect();
    Ok((e, tokens))
}

/// Linear patch embedding plus positional and segment-type embeddings for
/// every crop, concatenated in static, dynamic, search order.
pub fn embed(
    tape: &mut Tape,
    bound: &Bound,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    input: &EncoderInput,
) -> Result<TokenSequence> {
    let m = cfg.num_scales;
    if input.static_crops.len() != m {
        return Err(Error::dim(
            "embed",
            format!("{} static crops for {m} scales", input.static_crops.len()),
        ));
    }
    if cfg.dynamic_templates && input.dynamic_crops.len() != m {
        return Err(Error::dim(
            "embed",
            format!("{} dynamic crops for {m} scales", input.dynamic_crops.len()),
        ));
    }
    let mut parts = Vec::new();
    let mut tokens = Vec::with_capacity(cfg.num_tokens());
    let mut crops: Vec<(&Tensor, usize, Segment)> = input
        .static_crops
        .iter()
        .enumerate()
        .map(|(i, c)| (c, cfg.template_resolution, Segment::Static(i)))
        .collect();
    if cfg.dynamic_templates {
        crops.extend(
            input
                .dynamic_crops
                .iter()
                .enumerate()
                .map(|(i, c)| (c, cfg.template_resolution, Segment::Dynamic(i))),
        );
    }
    crops.push((&input.search, cfg.search_resolution, Segment::Search));
    for (img, res, seg) in crops {
        let (e, t) = embed_crop(tape, bound, params, cfg, img, res, seg)?;
        parts.push(e);
        tokens.extend(t);
    }
    let embeddings = tape.concat(&parts, 0)?;
    Ok(TokenSequence { embeddings, tokens })
}

/// Multi-head scaled dot-product attention over the full sequence.
///
/// `x` is the normalized block input. Returns the projected output and the
/// post-softmax attention matrix of each head.
pub fn self_attention(
    tape: &mut Tape,
    bound: &Bound,
    block: &BlockParams,
    x: Var,
    num_heads: usize,
) -> Result<(Var, Vec<Tensor>)> {
    let (_, d) = tape.value(x).dims2()?;
    if d % num_heads != 0 {
        return Err(Error::dim("self_attention", format!("width {d} over {num_heads} heads")));
    }
    let dk = d / num_heads;
    let project = |tape: &mut Tape, w: ParamId, b: ParamId| -> Result<Var> {
        let y = tape.matmul(x, bound.var(w))?;
        tape.add_row(y, bound.var(b))
    };
    let q = project(tape, block.wq, block.bq)?;
    let k = project(tape, block.wk, block.bk)?;
    let v = project(tape, block.wv, block.bv)?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(num_heads);
    let mut weights = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = tape.narrow(q, 1, h * dk, dk)?;
        let kh = tape.narrow(k, 1, h * dk, dk)?;
        let vh = tape.narrow(v, 1, h * dk, dk)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax_rows(scores)?;
        weights.push(tape.value(attn).clone());
        heads.push(tape.matmul(attn, vh)?);
    }
    let merged = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 1)? };
    let out = tape.matmul(merged, bound.var(block.wo))?;
    let out = tape.add_row(out, bound.var(block.bo))?;
    Ok((out, weights))
}

/// One pre-norm transformer block.
pub fn block_forward(
    tape: &mut Tape,
    bound: &Bound,
    block: &BlockParams,
    num_heads: usize,
    x: Var,
) -> Result<(Var, Vec<Tensor>)> {
    let n1 = tape.layer_norm(x, bound.var(block.ln1_gamma), bound.var(block.ln1_beta))?;
    let (attn, weights) = self_attention(tape, bound, block, n1, num_heads)?;
    let h = tape.add(x, attn)?;
    let n2 = tape.layer_norm(h, bound.var(block.ln2_gamma), bound.var(block.ln2_beta))?;
    let m = tape.matmul(n2, bound.var(block.mlp_w1))?;
    let m = tape.add_row(m, bound.var(block.mlp_b1))?;
    let m = tape.gelu(m)?;
    let m = tape.matmul(m, bound.var(block.mlp_w2))?;
    let m = tape.add_row(m, bound.var(block.mlp_b2))?;
    Ok((tape.add(h, m)?, weights))
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Final (normalized) token sequence with surviving search tokens.
    pub sequence: TokenSequence,
    pub decisions: Vec<PruneDecision>,
    /// Tokens alive when each block ran.
    pub tokens_per_block: Vec<usize>,
    /// Multiply-accumulates counted while each block ran.
    pub block_macs: Vec<u64>,
}

impl EncoderOutput {
    pub fn kept_search_coords(&self) -> Vec<(usize, usize)> {
        self.sequence.search_coords()
    }
}

/// Runs every block, pruning search tokens before each scheduled block using
/// the attention weights of the block just before it.
pub fn forward(
    tape: &mut Tape,
    bound: &Bound,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    seq: TokenSequence,
    prune: &PruneConfig,
) -> Result<EncoderOutput> {
    if seq.is_empty() {
        return Err(Error::Contract("empty token sequence".into()));
    }
    prune.validate(cfg.num_blocks)?;
    let mut seq = seq;
    let mut decisions = Vec::new();
    let mut tokens_per_block = Vec::with_capacity(cfg.num_blocks);
    let mut block_macs = Vec::with_capacity(cfg.num_blocks);
    let mut last_attention: Vec<Tensor> = Vec::new();
    for (b, block) in params.blocks.iter().enumerate() {
        if prune.stages.contains(&b) {
            let omega = pruning::score_tokens(&last_attention, &seq)?;
            let (next, decision) = pruning::prune(tape, seq, &omega, prune.keep_ratio)?;
            seq = next;
            decisions.push(decision);
        }
        tokens_per_block.push(seq.len());
        let before = mac_count();
        let (x, weights) = block_forward(tape, bound, block, cfg.num_heads, seq.embeddings)?;
        block_macs.push(mac_count() - before);
        seq.embeddings = x;
        last_attention = weights;
    }
    seq.embeddings = tape.layer_norm(
        seq.embeddings,
        bound.var(params.norm_gamma),
        bound.var(params.norm_beta),
    )?;
    Ok(EncoderOutput {
        sequence: seq,
        decisions,
        tokens_per_block,
        block_macs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg(m: usize) -> EncoderConfig {
        EncoderConfig {
            embed_dim: 8,
            num_heads: 2,
            num_blocks: 3,
            mlp_ratio: 2,
            template_resolution: 32,
            search_resolution: 64,
            num_scales: m,
            ..EncoderConfig::desk()
        }
    }

    fn setup(cfg: &EncoderConfig, seed: u64) -> (ParamStore, EncoderParams, EncoderInput) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = EncoderParams::init(cfg, &mut store, &mut rng);
        let t = cfg.template_resolution;
        let s = cfg.search_resolution;
        let input = EncoderInput {
            static_crops: (0..cfg.num_scales).map(|_| Tensor::uniform([3, t, t], -0.5, 0.5, &mut rng)).collect(),
            dynamic_crops: (0..cfg.num_scales).map(|_| Tensor::uniform([3, t, t], -0.5, 0.5, &mut rng)).collect(),
            search: Tensor::uniform([3, s, s], -0.5, 0.5, &mut rng),
        };
        (store, params, input)
    }

    #[test]
    fn token_counts_from_config() {
        let cfg = EncoderConfig { num_scales: 1, ..EncoderConfig::desk() };
        assert_eq!(cfg.num_tokens(), 4 + 4 + 16);
        assert_eq!(EncoderConfig::full_size().num_tokens(), 2 * 144 + 2 * 144 + 576);
    }

    #[test]
    fn embed_layout_and_centers() {
        let cfg = tiny_cfg(2);
        let (store, params, input) = setup(&cfg, 1);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let seq = embed(&mut tape, &bound, &params, &cfg, &input).unwrap();
        assert_eq!(seq.len(), cfg.num_tokens());
        assert_eq!(tape.shape(seq.embeddings), &[cfg.num_tokens(), 8]);
        let segs: Vec<Segment> = seq.tokens.iter().map(|t| t.segment).collect();
        assert_eq!(segs[0], Segment::Static(0));
        assert_eq!(segs[4], Segment::Static(1));
        assert_eq!(segs[8], Segment::Dynamic(0));
        assert_eq!(segs[12], Segment::Dynamic(1));
        assert!(segs[16..].iter().all(|s| s.is_search()));
        // 2x2 template grid: every template token is a center token
        assert!(seq.tokens[..16].iter().all(|t| t.center));
        assert!(seq.tokens[16..].iter().all(|t| !t.center));
    }

    #[test]
    fn center_tokens_odd_and_even() {
        let odd: Vec<_> = (0..9).filter(|i| is_center(i / 3, i % 3, 3)).collect();
        assert_eq!(odd, vec![4]);
        let even: Vec<_> = (0..16).filter(|i| is_center(i / 4, i % 4, 4)).collect();
        assert_eq!(even, vec![5, 6, 9, 10]);
    }

    #[test]
    fn zero_image_embeds_to_bias_plus_positions() {
        let cfg = tiny_cfg(1);
        let (store, params, mut input) = setup(&cfg, 2);
        input.search = Tensor::zeros([3, 64, 64]);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let seq = embed(&mut tape, &bound, &params, &cfg, &input).unwrap();
        let e = tape.value(seq.embeddings);
        let bias = store.get(params.patch_bias).data();
        let pos = store.get(params.pos_search);
        let seg = store.get(params.segment);
        let first_search = cfg.num_template_tokens();
        for j in 0..16 {
            for c in 0..8 {
                let expected = bias[c] + pos.at2(j, c) + seg.at2(2, c);
                assert_eq!(e.at2(first_search + j, c), expected);
            }
        }
    }

    #[test]
    fn wrong_resolution_is_a_dimension_error() {
        let cfg = tiny_cfg(1);
        let (store, params, mut input) = setup(&cfg, 3);
        input.search = Tensor::zeros([3, 48, 48]);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        assert!(matches!(
            embed(&mut tape, &bound, &params, &cfg, &input),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let cfg = tiny_cfg(1);
        let (store, params, _) = setup(&cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = Tensor::uniform([1, 8], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x = tape.constant(x0.clone());
        let blk = &params.blocks[0];
        let (out, w) = self_attention(&mut tape, &bound, blk, x, 2).unwrap();
        assert!(w.iter().all(|a| a.data() == [1.0]));
        let v = x0.matmul(store.get(blk.wv)).unwrap();
        let mut expected = v.data().to_vec();
        for (e, b) in expected.iter_mut().zip(store.get(blk.bv).data()) {
            *e += b;
        }
        let expected = Tensor::new([1, 8], expected).unwrap().matmul(store.get(blk.wo)).unwrap();
        for (a, (e, b)) in tape.value(out).data().iter().zip(expected.data().iter().zip(store.get(blk.bo).data())) {
            assert!((a - (e + b)).abs() < 1e-14);
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let cfg = tiny_cfg(1);
        let (mut store, params, _) = setup(&cfg, 5);
        let blk = params.blocks[0].clone();
        *store.get_mut(blk.wk) = Tensor::zeros([8, 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x0 = Tensor::uniform([2, 8], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x = tape.constant(x0);
        let (_, w) = self_attention(&mut tape, &bound, &blk, x, 2).unwrap();
        for a in w {
            assert!(a.data().iter().all(|v| (v - 0.5).abs() < 1e-15));
        }
    }

    #[test]
    fn unpruned_forward_keeps_token_count() {
        let cfg = tiny_cfg(2);
        let (store, params, input) = setup(&cfg, 6);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let seq = embed(&mut tape, &bound, &params, &cfg, &input).unwrap();
        let out = forward(&mut tape, &bound, &params, &cfg, seq, &PruneConfig::none()).unwrap();
        assert_eq!(out.tokens_per_block, vec![cfg.num_tokens(); 3]);
        assert_eq!(out.kept_search_coords().len(), 16);
    }

    #[test]
    fn stage_zero_is_rejected() {
        let cfg = tiny_cfg(1);
        let (store, params, input) = setup(&cfg, 7);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let seq = embed(&mut tape, &bound, &params, &cfg, &input).unwrap();
        let prune = PruneConfig { keep_ratio: 0.7, stages: vec![0, 2] };
        assert!(matches!(
            forward(&mut tape, &bound, &params, &cfg, seq, &prune),
            Err(Error::Config(_))
        ));
    }
}
