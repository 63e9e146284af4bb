//! Axis-aligned boxes in `(x, y, w, h)` form with `(x, y)` the top-left corner.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self::new(x1, y1, x2 - x1, y2 - y1)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    /// Errors unless the box has finite coordinates and positive extent.
    pub fn validate(&self) -> Result<()> {
        if !self.is_finite() || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidBox(format!("{self:?}")));
        }
        Ok(())
    }

    /// Geometric-mean side `sqrt(w·h)`.
    pub fn mean_side(&self) -> f64 {
        (self.w * self.h).sqrt()
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let iw = (self.x2().min(other.x2()) - self.x.max(other.x)).max(0.0);
        let ih = (self.y2().min(other.y2()) - self.y.max(other.y)).max(0.0);
        iw * ih
    }

    /// Intersection with `[0, width] × [0, height]`, keeping at least
    /// `min_side` of extent so the result stays a valid box.
    pub fn clamp_to(&self, width: f64, height: f64, min_side: f64) -> BBox {
        let inside = self.x >= 0.0 && self.y >= 0.0 && self.x2() <= width && self.y2() <= height;
        if inside && self.w >= min_side.min(width) && self.h >= min_side.min(height) {
            return *self;
        }
        let x1 = self.x.clamp(0.0, width);
        let y1 = self.y.clamp(0.0, height);
        let x2 = self.x2().clamp(0.0, width);
        let y2 = self.y2().clamp(0.0, height);
        let (x1, x2) = widen(x1, x2, min_side.min(width), width);
        let (y1, y2) = widen(y1, y2, min_side.min(height), height);
        BBox::from_corners(x1, y1, x2, y2)
    }

    pub fn scaled(&self, factor: f64) -> BBox {
        BBox::new(self.x * factor, self.y * factor, self.w * factor, self.h * factor)
    }

    /// Mirror across the vertical line `x = width / 2`.
    pub fn flipped_horizontally(&self, width: f64) -> BBox {
        BBox::new(width - self.x - self.w, self.y, self.w, self.h)
    }
}

fn widen(lo: f64, hi: f64, min_side: f64, limit: f64) -> (f64, f64) {
    if hi - lo >= min_side {
        return (lo, hi);
    }
    let mid = ((lo + hi) / 2.0).clamp(min_side / 2.0, limit - min_side / 2.0);
    (mid - min_side / 2.0, mid + min_side / 2.0)
}

/// Intersection over union; zero when either box is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU - |C \ (A ∪ B)| / |C|` with `C` the smallest
/// enclosing box. Lies in `(-1, 1]`.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    let cw = a.x2().max(b.x2()) - a.x.min(b.x);
    let ch = a.y2().max(b.y2()) - a.y.min(b.y);
    let enclosing = cw * ch;
    if union <= 0.0 || enclosing <= 0.0 {
        return 0.0;
    }
    inter / union - (enclosing - union) / enclosing
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_hand_values() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 1.0, 1.0)), 0.0);
        let b = BBox::new(1.0, 1.0, 2.0, 2.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn giou_of_touching_unit_boxes_is_zero() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        let b = BBox::new(1.0, 0.0, 1.0, 1.0);
        assert_eq!(giou(&a, &b), 0.0);
        assert_eq!(giou(&a, &a), 1.0);
    }

    #[test]
    fn clamp_keeps_minimum_extent() {
        let b = BBox::new(-10.0, 5.0, 5.0, 1000.0).clamp_to(100.0, 50.0, 2.0);
        assert_eq!(b, BBox::new(0.0, 5.0, 2.0, 45.0));
        b.validate().unwrap();
    }

    #[test]
    fn flip_is_an_involution() {
        let b = BBox::new(3.0, 4.0, 10.0, 7.0);
        let f = b.flipped_horizontally(64.0);
        assert_eq!(f.x, 64.0 - 3.0 - 10.0);
        assert_eq!(f.flipped_horizontally(64.0), b);
    }
}
