//! Heatmap supervision, focal loss, box losses and their weighted total.

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::head::{argmax, HeadGeometry, HeadVars};
use crate::tensor::{Tape, Tensor, Var};

pub const FOCAL_ALPHA: f64 = 2.0;
pub const FOCAL_BETA: f64 = 4.0;
pub const SCORE_EPS: f64 = 1e-6;
/// Overlap a corner-perturbed box must keep for the heatmap radius.
pub const MIN_OVERLAP: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub giou: f64,
    pub l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { giou: 2.0, l1: 5.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainTarget {
    /// Row-major `H·W` heatmap.
    pub heatmap: Tensor,
    /// Search-crop pixels.
    pub gt_box: BBox,
    pub cell: (usize, usize),
    pub sigma: f64,
    pub geometry: HeadGeometry,
}

/// Largest `r` such that each of three corner perturbations of a `w × h`
/// box keeps IoU ≥ `overlap`: both corners shifted by `r` in the same
/// direction, both pulled inward, or both pushed outward.
pub fn gaussian_radius(w: f64, h: f64, overlap: f64) -> f64 {
    let s = w + h;
    let p = w * h;
    // (w-r)(h-r) / (2wh - (w-r)(h-r)) = o
    let c1 = p * (1.0 - overlap) / (1.0 + overlap);
    let r1 = (s - (s * s - 4.0 * c1).sqrt()) / 2.0;
    // (w-2r)(h-2r) / wh = o
    let r2 = (2.0 * s - (4.0 * s * s - 16.0 * (1.0 - overlap) * p).sqrt()) / 8.0;
    // wh / ((w+2r)(h+2r)) = o
    let a3 = 4.0 * overlap;
    let b3 = 2.0 * overlap * s;
    let c3 = (overlap - 1.0) * p;
    let r3 = (-b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / (2.0 * a3);
    r1.min(r2).min(r3)
}

/// `σ = (2r + 1) / 6` for a box measured in grid cells.
pub fn gaussian_sigma(w_cells: f64, h_cells: f64) -> f64 {
    (2.0 * gaussian_radius(w_cells, h_cells, MIN_OVERLAP) + 1.0) / 6.0
}

/// `exp(-((x-px)² + (y-py)²) / 2σ²)` over a `width × height` grid.
pub fn gaussian_map(width: usize, height: usize, peak: (f64, f64), sigma: f64) -> Tensor {
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let dx = x as f64 - peak.0;
            let dy = y as f64 - peak.1;
            data.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
        }
    }
    Tensor::new([height * width], data).expect("sized buffer")
}

/// Heatmap target for a box in search-crop pixels. The peak sits on the
/// cell containing the box center.
pub fn gaussian_target(gt: &BBox, g: &HeadGeometry) -> Result<TrainTarget> {
    gt.validate()?;
    let stride = g.stride as f64;
    let (cx, cy) = gt.center();
    let cell_of = |v: f64| ((v / stride).floor().max(0.0) as usize).min(g.grid - 1);
    let cell = (cell_of(cx), cell_of(cy));
    let sigma = gaussian_sigma(gt.w / stride, gt.h / stride);
    let heatmap = gaussian_map(g.grid, g.grid, (cell.0 as f64, cell.1 as f64), sigma);
    Ok(TrainTarget {
        heatmap,
        gt_box: *gt,
        cell,
        sigma,
        geometry: *g,
    })
}

/// One cell's contribution to the focal loss (already negated).
pub fn focal_term(target: f64, pred: f64) -> f64 {
    let p = pred.clamp(SCORE_EPS, 1.0 - SCORE_EPS);
    if target == 1.0 {
        -(1.0 - p).powf(FOCAL_ALPHA) * p.ln()
    } else {
        -(1.0 - target).powf(FOCAL_BETA) * p.powf(FOCAL_ALPHA) * (1.0 - p).ln()
    }
}

/// Penalty-reduced focal loss summed over cells.
pub fn focal_loss(tape: &mut Tape, score: Var, heatmap: &Tensor) -> Result<Var> {
    let n = tape.value(score).numel();
    if heatmap.numel() != n {
        return Err(Error::dim("focal_loss", format!("{} targets for {n} scores", heatmap.numel())));
    }
    let shape = tape.shape(score).to_vec();
    let (pos, neg): (Vec<f64>, Vec<f64>) = heatmap
        .data()
        .iter()
        .map(|&g| if g == 1.0 { (1.0, 0.0) } else { (0.0, (1.0 - g).powf(FOCAL_BETA)) })
        .unzip();
    let pos = tape.constant(Tensor::new(shape.clone(), pos)?);
    let neg = tape.constant(Tensor::new(shape, neg)?);
    let p = tape.clamp(score, SCORE_EPS, 1.0 - SCORE_EPS)?;
    let one_minus = tape.rsub_scalar(1.0, p)?;
    let log_p = tape.log(p)?;
    let log_1mp = tape.log(one_minus)?;
    let pos_w = tape.powf(one_minus, FOCAL_ALPHA)?;
    let pos_term = tape.mul(pos_w, log_p)?;
    let pos_term = tape.mul(pos_term, pos)?;
    let neg_w = tape.powf(p, FOCAL_ALPHA)?;
    let neg_term = tape.mul(neg_w, log_1mp)?;
    let neg_term = tape.mul(neg_term, neg)?;
    let total = tape.add(pos_term, neg_term)?;
    let total = tape.sum(total)?;
    tape.scale(total, -1.0)
}

/// Box as four `[1]` vars: x1, y1, x2, y2.
#[derive(Clone, Copy, Debug)]
pub struct BoxVars {
    pub x1: Var,
    pub y1: Var,
    pub x2: Var,
    pub y2: Var,
}

impl BoxVars {
    pub fn constant(tape: &mut Tape, b: &BBox) -> Self {
        let mut c = |v: f64| tape.constant(Tensor::scalar(v));
        Self {
            x1: c(b.x),
            y1: c(b.y),
            x2: c(b.x2()),
            y2: c(b.y2()),
        }
    }

    pub fn value(&self, tape: &Tape) -> BBox {
        let v = |x: Var| tape.value(x).data()[0];
        BBox::from_corners(v(self.x1), v(self.y1), v(self.x2), v(self.y2))
    }
}

/// `1 - GIoU(a, b)` built from tape primitives.
pub fn giou_loss(tape: &mut Tape, a: &BoxVars, b: &BoxVars) -> Result<Var> {
    let area = |tape: &mut Tape, bx: &BoxVars| -> Result<Var> {
        let w = tape.sub(bx.x2, bx.x1)?;
        let h = tape.sub(bx.y2, bx.y1)?;
        tape.mul(w, h)
    };
    let ix1 = tape.maximum(a.x1, b.x1)?;
    let iy1 = tape.maximum(a.y1, b.y1)?;
    let ix2 = tape.minimum(a.x2, b.x2)?;
    let iy2 = tape.minimum(a.y2, b.y2)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw)?;
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih)?;
    let inter = tape.mul(iw, ih)?;
    let area_a = area(tape, a)?;
    let area_b = area(tape, b)?;
    let union = tape.add(area_a, area_b)?;
    let union = tape.sub(union, inter)?;
    let iou = tape.div(inter, union)?;
    let cx1 = tape.minimum(a.x1, b.x1)?;
    let cy1 = tape.minimum(a.y1, b.y1)?;
    let cx2 = tape.maximum(a.x2, b.x2)?;
    let cy2 = tape.maximum(a.y2, b.y2)?;
    let enclosing = area(
        tape,
        &BoxVars {
            x1: cx1,
            y1: cy1,
            x2: cx2,
            y2: cy2,
        },
    )?;
    let gap = tape.sub(enclosing, union)?;
    let penalty = tape.div(gap, enclosing)?;
    let giou = tape.sub(iou, penalty)?;
    tape.rsub_scalar(1.0, giou)
}

/// Mean absolute difference of the `(x, y, w, h)` coordinates.
pub fn l1_loss(tape: &mut Tape, a: &BoxVars, b: &BoxVars) -> Result<Var> {
    let coords = |tape: &mut Tape, bx: &BoxVars| -> Result<Var> {
        let w = tape.sub(bx.x2, bx.x1)?;
        let h = tape.sub(bx.y2, bx.y1)?;
        tape.concat(&[bx.x1, bx.y1, w, h], 0)
    };
    let ca = coords(tape, a)?;
    let cb = coords(tape, b)?;
    let d = tape.sub(ca, cb)?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

/// Predicted box at the score peak, normalized by the search extent and
/// clamped to `[0, 1]`.
pub fn predicted_box(tape: &mut Tape, head: &HeadVars, g: &HeadGeometry) -> Result<BoxVars> {
    let cells = g.cells();
    let idx = argmax(tape.value(head.score_logits).data());
    let (cx_cell, cy_cell) = ((idx % g.grid) as f64, (idx / g.grid) as f64);
    let inv = 1.0 / g.grid as f64;
    let offset = tape.reshape(head.offset, [2 * cells])?;
    let size = tape.reshape(head.size, [2 * cells])?;
    let pick = |tape: &mut Tape, v: Var, i: usize| -> Result<Var> {
        let col = tape.reshape(v, [2 * cells, 1])?;
        let row = tape.gather_rows(col, &[i])?;
        tape.reshape(row, [1])
    };
    let dx = pick(tape, offset, idx)?;
    let dy = pick(tape, offset, cells + idx)?;
    let w = pick(tape, size, idx)?;
    let h = pick(tape, size, cells + idx)?;
    // center in units of the extent: (cell + δ) / grid
    let cx = tape.add_scalar(dx, cx_cell)?;
    let cx = tape.scale(cx, inv)?;
    let cy = tape.add_scalar(dy, cy_cell)?;
    let cy = tape.scale(cy, inv)?;
    let hw = tape.scale(w, 0.5)?;
    let hh = tape.scale(h, 0.5)?;
    let x1 = tape.sub(cx, hw)?;
    let x2 = tape.add(cx, hw)?;
    let y1 = tape.sub(cy, hh)?;
    let y2 = tape.add(cy, hh)?;
    Ok(BoxVars {
        x1: tape.clamp(x1, 0.0, 1.0)?,
        y1: tape.clamp(y1, 0.0, 1.0)?,
        x2: tape.clamp(x2, 0.0, 1.0)?,
        y2: tape.clamp(y2, 0.0, 1.0)?,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub focal: Var,
    pub giou: Var,
    pub l1: Var,
}

impl LossTerms {
    pub fn values(&self, tape: &Tape) -> LossValues {
        let v = |x: Var| tape.value(x).data()[0];
        LossValues {
            total: v(self.total),
            focal: v(self.focal),
            giou: v(self.giou),
            l1: v(self.l1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub focal: f64,
    pub giou: f64,
    pub l1: f64,
}

/// `L_s + λ_giou·L_giou + λ_l1·L_1`.
pub fn combine(tape: &mut Tape, focal: Var, giou: Var, l1: Var, w: &LossWeights) -> Result<LossTerms> {
    let g = tape.scale(giou, w.giou)?;
    let l = tape.scale(l1, w.l1)?;
    let total = tape.add(focal, g)?;
    let total = tape.add(total, l)?;
    Ok(LossTerms { total, focal, giou, l1 })
}

pub fn total_loss(tape: &mut Tape, head: &HeadVars, target: &TrainTarget, w: &LossWeights) -> Result<LossTerms> {
    let g = &target.geometry;
    let focal = focal_loss(tape, head.score, &target.heatmap)?;
    let pred = predicted_box(tape, head, g)?;
    let gt = BoxVars::constant(tape, &target.gt_box.scaled(1.0 / g.extent()));
    let giou = giou_loss(tape, &pred, &gt)?;
    let l1 = l1_loss(tape, &pred, &gt)?;
    combine(tape, focal, giou, l1, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::giou;

    fn geom() -> HeadGeometry {
        HeadGeometry {
            channels: 16,
            grid: 4,
            stride: 16,
        }
    }

    fn scalar_loss(f: impl FnOnce(&mut Tape) -> Var) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape);
        tape.value(v).data()[0]
    }

    #[test]
    fn focal_single_positive_cell() {
        assert!((focal_term(1.0, 0.5) - 0.173287).abs() < 1e-6);
        let l = scalar_loss(|t| {
            let s = t.constant(Tensor::new([1], vec![0.5]).unwrap());
            focal_loss(t, s, &Tensor::ones([1])).unwrap()
        });
        assert!((l - 0.25 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn focal_limit_is_zero() {
        let l = scalar_loss(|t| {
            let s = t.constant(Tensor::new([3], vec![1.0, 0.0, 0.0]).unwrap());
            focal_loss(t, s, &Tensor::new([3], vec![1.0, 0.3, 0.0]).unwrap()).unwrap()
        });
        assert!(l >= 0.0 && l < 1e-9, "{l}");
    }

    #[test]
    fn focal_monotone_in_prediction() {
        let ps: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
        for w in ps.windows(2) {
            assert!(focal_term(1.0, w[1]) < focal_term(1.0, w[0]));
            assert!(focal_term(0.2, w[1]) > focal_term(0.2, w[0]));
        }
    }

    #[test]
    fn gaussian_values() {
        let m = gaussian_map(3, 3, (1.0, 1.0), 1.0);
        assert_eq!(m.data()[4], 1.0);
        assert!((m.data()[1] - 0.606531).abs() < 1e-6);
    }

    #[test]
    fn target_peak_on_center_cell() {
        let t = gaussian_target(&BBox::new(20.0, 36.0, 16.0, 8.0), &geom()).unwrap();
        assert_eq!(t.cell, (1, 2));
        assert_eq!(t.heatmap.data()[2 * 4 + 1], 1.0);
        assert!(gaussian_target(&BBox::new(0.0, 0.0, 0.0, 3.0), &geom()).is_err());
    }

    #[test]
    fn whole_cell_shift_translates_target() {
        let g = HeadGeometry { grid: 8, ..geom() };
        let a = gaussian_target(&BBox::new(20.0, 20.0, 30.0, 20.0), &g).unwrap();
        let b = gaussian_target(&BBox::new(36.0, 52.0, 30.0, 20.0), &g).unwrap();
        for y in 0..6 {
            for x in 0..7 {
                assert_eq!(a.heatmap.data()[y * 8 + x], b.heatmap.data()[(y + 2) * 8 + x + 1]);
            }
        }
    }

    /// Largest r (bisection on the IoU itself) keeping every perturbation at
    /// or above the overlap.
    fn radius_oracle(w: f64, h: f64, o: f64) -> f64 {
        let b = BBox::new(0.0, 0.0, w, h);
        let worst = |r: f64| {
            let shift = crate::geometry::iou(&b, &BBox::new(r, r, w, h));
            let shrink = crate::geometry::iou(&b, &BBox::new(r, r, w - 2.0 * r, h - 2.0 * r));
            let grow = crate::geometry::iou(&b, &BBox::new(-r, -r, w + 2.0 * r, h + 2.0 * r));
            shift.min(shrink).min(grow)
        };
        let (mut lo, mut hi) = (0.0, w.min(h) / 2.0);
        for _ in 0..200 {
            let mid = (lo + hi) / 2.0;
            if worst(mid) >= o {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    #[test]
    fn radius_matches_bisection_oracle() {
        for &(w, h) in &[(1.0, 1.0), (4.0, 2.0), (0.5, 3.0), (10.0, 10.0), (2.5, 7.25)] {
            let r = gaussian_radius(w, h, 0.7);
            assert!((r - radius_oracle(w, h, 0.7)).abs() < 1e-9, "{w}x{h}");
        }
    }

    fn box_losses(a: BBox, b: BBox) -> (f64, f64) {
        let mut tape = Tape::new();
        let va = BoxVars::constant(&mut tape, &a);
        let vb = BoxVars::constant(&mut tape, &b);
        let g = giou_loss(&mut tape, &va, &vb).unwrap();
        let l = l1_loss(&mut tape, &va, &vb).unwrap();
        (tape.value(g).data()[0], tape.value(l).data()[0])
    }

    #[test]
    fn box_loss_hand_values() {
        let a = BBox::new(0.1, 0.2, 0.3, 0.4);
        let (g, l) = box_losses(a, a);
        assert!(g.abs() < 1e-15 && l == 0.0);
        let (g, _) = box_losses(BBox::new(0.0, 0.0, 1.0, 1.0), BBox::new(1.0, 0.0, 1.0, 1.0));
        assert_eq!(g, 1.0);
        let (g, l) = box_losses(BBox::new(0.0, 0.0, 2.0, 2.0), BBox::new(1.0, 1.0, 2.0, 2.0));
        assert!((g - (1.0 - giou(&BBox::new(0.0, 0.0, 2.0, 2.0), &BBox::new(1.0, 1.0, 2.0, 2.0)))).abs() < 1e-15);
        assert_eq!(l, 0.5);
    }

    #[test]
    fn total_is_weighted_sum() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::scalar(0.3));
        let g = tape.constant(Tensor::scalar(0.7));
        let l = tape.constant(Tensor::scalar(0.11));
        let terms = combine(&mut tape, f, g, l, &LossWeights::default()).unwrap();
        let v = terms.values(&tape);
        assert_eq!(v.total, 0.3 + 2.0 * 0.7 + 5.0 * 0.11);
    }
}
