//! Score, offset and size branches over the search feature grid, and box
//! decoding from their outputs.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadGeometry {
    pub channels: usize,
    pub grid: usize,
    /// Search-crop pixels per grid cell.
    pub stride: usize,
}

impl HeadGeometry {
    pub fn extent(&self) -> f64 {
        (self.grid * self.stride) as f64
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }
}

#[derive(Clone, Debug)]
pub struct ConvParams {
    /// `[C_out, C_in·9]` for 3×3 layers, `[C_out, C_in]` for the projection.
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct BranchParams {
    pub convs: Vec<ConvParams>,
    pub proj: ConvParams,
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub score: BranchParams,
    pub offset: BranchParams,
    pub size: BranchParams,
}

/// Channel widths `D, D/2, D/4, D/8` of one branch.
pub fn branch_widths(channels: usize) -> [usize; 4] {
    [channels, channels / 2, channels / 4, channels / 8]
}

fn init_branch<R: Rng>(name: &str, channels: usize, out: usize, store: &mut ParamStore, rng: &mut R) -> BranchParams {
    let w = branch_widths(channels);
    let convs = (0..3)
        .map(|i| {
            let fan_in = w[i] * 9;
            let std = (2.0 / fan_in as f64).sqrt();
            ConvParams {
                weight: store.add(
                    format!("head.{name}.conv{i}.weight"),
                    Tensor::randn([w[i + 1], fan_in], std, rng),
                ),
                bias: store.add(format!("head.{name}.conv{i}.bias"), Tensor::zeros([w[i + 1]])),
            }
        })
        .collect();
    let proj = ConvParams {
        weight: store.add(
            format!("head.{name}.proj.weight"),
            Tensor::randn([out, w[3]], 0.02, rng),
        ),
        bias: store.add(format!("head.{name}.proj.bias"), Tensor::zeros([out])),
    };
    BranchParams { convs, proj }
}

impl HeadParams {
    pub fn init<R: Rng>(channels: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        if channels < 8 || channels % 8 != 0 {
            return Err(Error::Config(format!(
                "head needs a channel count divisible by 8, got {channels}"
            )));
        }
        Ok(Self {
            score: init_branch("score", channels, 1, store, rng),
            offset: init_branch("offset", channels, 2, store, rng),
            size: init_branch("size", channels, 2, store, rng),
        })
    }
}

/// Head outputs on the tape, each `[C, H·W]`.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub score_logits: Var,
    pub score: Var,
    pub offset: Var,
    pub size: Var,
}

fn branch_forward(
    tape: &mut Tape,
    bound: &Bound,
    branch: &BranchParams,
    g: &HeadGeometry,
    x: Var,
) -> Result<Var> {
    let widths = branch_widths(g.channels);
    let mut h = x;
    for (i, conv) in branch.convs.iter().enumerate() {
        let cols = tape.im2col3x3(h, widths[i], g.grid, g.grid)?;
        let y = tape.matmul(bound.var(conv.weight), cols)?;
        let y = tape.add_col(y, bound.var(conv.bias))?;
        h = tape.gelu(y)?;
    }
    let y = tape.matmul(bound.var(branch.proj.weight), h)?;
    tape.add_col(y, bound.var(branch.proj.bias))
}

/// Runs the three branches over a `[D, H·W]` feature map.
pub fn head_forward(
    tape: &mut Tape,
    bound: &Bound,
    params: &HeadParams,
    g: &HeadGeometry,
    grid: Var,
) -> Result<HeadVars> {
    if tape.shape(grid) != [g.channels, g.cells()] {
        return Err(Error::dim(
            "head_forward",
            format!("expected [{}, {}], got {:?}", g.channels, g.cells(), tape.shape(grid)),
        ));
    }
    let score_logits = branch_forward(tape, bound, &params.score, g, grid)?;
    let score = tape.sigmoid(score_logits)?;
    let offset = branch_forward(tape, bound, &params.offset, g, grid)?;
    let offset = tape.sigmoid(offset)?;
    let size = branch_forward(tape, bound, &params.size, g, grid)?;
    let size = tape.sigmoid(size)?;
    Ok(HeadVars {
        score_logits,
        score,
        offset,
        size,
    })
}

/// Multiply-accumulates of one head pass.
pub fn head_macs(channels: usize, cells: usize) -> u64 {
    let w = branch_widths(channels);
    let convs: usize = (0..3).map(|i| w[i] * 9 * w[i + 1]).sum();
    let proj = w[3] * (1 + 2 + 2);
    ((3 * convs + proj) * cells) as u64
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackOutput {
    /// `[1, H, W]` values in `[0, 1]`.
    pub score_map: Tensor,
    pub score_logits: Tensor,
    /// `[2, H, W]`: x then y, fraction of a cell.
    pub offset: Tensor,
    /// `[2, H, W]`: w then h, fraction of the search extent.
    pub size: Tensor,
    pub geometry: HeadGeometry,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decoded {
    /// Top-left `(x, y, w, h)` in search-crop pixels.
    pub bbox: BBox,
    pub confidence: f64,
    /// Peak cell `(x̂, ŷ)`.
    pub cell: (usize, usize),
}

impl TrackOutput {
    pub fn from_vars(tape: &Tape, vars: &HeadVars, g: HeadGeometry) -> Result<Self> {
        let (h, w) = (g.grid, g.grid);
        Ok(Self {
            score_map: tape.value(vars.score).clone().reshape([1, h, w])?,
            score_logits: tape.value(vars.score_logits).clone().reshape([1, h, w])?,
            offset: tape.value(vars.offset).clone().reshape([2, h, w])?,
            size: tape.value(vars.size).clone().reshape([2, h, w])?,
            geometry: g,
        })
    }

    pub fn confidence(&self) -> f64 {
        self.score_map.max()
    }

    pub fn decode(&self) -> Decoded {
        decode(&self.score_logits, &self.score_map, &self.offset, &self.size, &self.geometry)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Box at the score peak: center `((x̂ + δx)·s, (ŷ + δy)·s)`, size
/// `(ŵ, ĥ)·extent`, clamped to the crop.
///
/// The peak is taken over `logits`, which orders cells exactly like the
/// sigmoid scores but without saturation ties.
pub fn decode(logits: &Tensor, score: &Tensor, offset: &Tensor, size: &Tensor, g: &HeadGeometry) -> Decoded {
    let cells = g.cells();
    let idx = argmax(logits.data());
    let (cx_cell, cy_cell) = (idx % g.grid, idx / g.grid);
    let off = offset.data();
    let sz = size.data();
    let stride = g.stride as f64;
    let extent = g.extent();
    let cx = (cx_cell as f64 + off[idx]) * stride;
    let cy = (cy_cell as f64 + off[cells + idx]) * stride;
    let w = sz[idx] * extent;
    let h = sz[cells + idx] * extent;
    let bbox = BBox::from_center(cx, cy, w, h).clamp_to(extent, extent, 1e-3 * extent);
    Decoded {
        bbox,
        confidence: score.max(),
        cell: (cx_cell, cy_cell),
    }
}
