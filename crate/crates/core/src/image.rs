//! RGB frames, square context crops and their crop↔frame mapping.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::dim(
                "frame",
                format!("{width}x{height} RGB needs {} bytes, got {}", width * height * 3, data.len()),
            ));
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn mean_color(&self) -> [f64; 3] {
        let mut acc = [0u64; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += px[c] as u64;
            }
        }
        let n = (self.width * self.height).max(1) as f64;
        acc.map(|v| v as f64 / n)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Frame::from_raw(w as usize, h as usize, img.into_raw())
    }

    /// Writes a binary PPM.
    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .ok_or_else(|| Error::dim("frame", "buffer does not match dimensions"))?;
        img.save_with_format(path, image::ImageFormat::Pnm)?;
        Ok(())
    }

    /// Draws a one-pixel rectangle outline.
    pub fn draw_box(&mut self, b: &BBox, rgb: [u8; 3]) {
        if self.width == 0 || self.height == 0 || !b.is_finite() {
            return;
        }
        let clampx = |v: f64| (v.round().max(0.0) as usize).min(self.width - 1);
        let clampy = |v: f64| (v.round().max(0.0) as usize).min(self.height - 1);
        let (x1, x2, y1, y2) = (clampx(b.x), clampx(b.x2()), clampy(b.y), clampy(b.y2()));
        for x in x1..=x2 {
            self.set_pixel(x, y1, rgb);
            self.set_pixel(x, y2, rgb);
        }
        for y in y1..=y2 {
            self.set_pixel(x1, y, rgb);
            self.set_pixel(x2, y, rgb);
        }
    }
}

/// A square region of a frame: center and side length in frame pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
}

impl CropWindow {
    /// Square of side `k·sqrt(w·h)` centered on the box.
    pub fn around(b: &BBox, k: f64) -> Result<Self> {
        b.validate()?;
        if !(k >= 1.0 && k.is_finite()) {
            return Err(Error::Config(format!("crop scale factor must be >= 1, got {k}")));
        }
        let (cx, cy) = b.center();
        Ok(Self {
            cx,
            cy,
            side: k * b.mean_side(),
        })
    }

    pub fn x0(&self) -> f64 {
        self.cx - self.side / 2.0
    }

    pub fn y0(&self) -> f64 {
        self.cy - self.side / 2.0
    }

    pub fn transform(&self, resolution: usize) -> CropTransform {
        CropTransform {
            x0: self.x0(),
            y0: self.y0(),
            scale: self.side / resolution as f64,
            resolution,
        }
    }
}

/// Affine map between crop pixels and frame pixels:
/// `frame = origin + crop · scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropTransform {
    pub x0: f64,
    pub y0: f64,
    /// Frame pixels per crop pixel.
    pub scale: f64,
    pub resolution: usize,
}

impl CropTransform {
    pub fn to_frame(&self, b: &BBox) -> BBox {
        BBox::new(
            self.x0 + b.x * self.scale,
            self.y0 + b.y * self.scale,
            b.w * self.scale,
            b.h * self.scale,
        )
    }

    pub fn to_crop(&self, b: &BBox) -> BBox {
        BBox::new(
            (b.x - self.x0) / self.scale,
            (b.y - self.y0) / self.scale,
            b.w / self.scale,
            b.h / self.scale,
        )
    }
}

/// Converts an 8-bit channel value to the network's input range.
#[inline]
pub fn normalize_channel(v: f64) -> f64 {
    v / 255.0 - 0.5
}

/// Resamples `window` of `frame` to a `resolution²` planar `[3, R, R]`
/// tensor with bilinear interpolation. Samples outside the frame read the
/// frame's mean color.
pub fn render_crop(frame: &Frame, window: &CropWindow, resolution: usize) -> Result<(Tensor, CropTransform)> {
    if frame.width == 0 || frame.height == 0 {
        return Err(Error::dim("crop", "empty frame"));
    }
    if !(window.side > 0.0 && window.side.is_finite()) {
        return Err(Error::InvalidBox(format!("crop window {window:?}")));
    }
    let tf = window.transform(resolution);
    let mean = frame.mean_color();
    let r = resolution;
    let mut out = vec![0.0; 3 * r * r];
    let fetch = |x: isize, y: isize| -> [f64; 3] {
        if x < 0 || y < 0 || x >= frame.width as isize || y >= frame.height as isize {
            mean
        } else {
            frame.pixel(x as usize, y as usize).map(|v| v as f64)
        }
    };
    for v in 0..r {
        let fy = tf.y0 + (v as f64 + 0.5) * tf.scale - 0.5;
        let y0 = fy.floor();
        let wy = fy - y0;
        for u in 0..r {
            let fx = tf.x0 + (u as f64 + 0.5) * tf.scale - 0.5;
            let x0 = fx.floor();
            let wx = fx - x0;
            let (xi, yi) = (x0 as isize, y0 as isize);
            let p00 = fetch(xi, yi);
            let p10 = fetch(xi + 1, yi);
            let p01 = fetch(xi, yi + 1);
            let p11 = fetch(xi + 1, yi + 1);
            for c in 0..3 {
                let top = p00[c] * (1.0 - wx) + p10[c] * wx;
                let bottom = p01[c] * (1.0 - wx) + p11[c] * wx;
                out[c * r * r + v * r + u] = normalize_channel(top * (1.0 - wy) + bottom * wy);
            }
        }
    }
    Ok((Tensor::new([3, r, r], out)?, tf))
}

/// Mirrors a planar `[C, H, W]` image left-right.
pub fn flip_planar(t: &Tensor) -> Result<Tensor> {
    let &[c, h, w] = t.shape() else {
        return Err(Error::dim("flip_planar", format!("expected [C,H,W], got {:?}", t.shape())));
    };
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * h + y) * w;
            for x in 0..w {
                out[row + x] = src[row + w - 1 - x];
            }
        }
    }
    Tensor::new([c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_frame(w: usize, h: usize) -> Frame {
        let mut f = Frame::filled(w, h, [0, 0, 0]);
        for y in 0..h {
            for x in 0..w {
                f.set_pixel(x, y, [(x * 7 % 256) as u8, (y * 5 % 256) as u8, ((x + y) % 256) as u8]);
            }
        }
        f
    }

    #[test]
    fn side_is_k_times_mean_side() {
        let w = CropWindow::around(&BBox::new(40.0, 40.0, 10.0, 10.0), 2.0).unwrap();
        assert_eq!(w.side, 20.0);
        assert_eq!((w.x0(), w.y0()), (35.0, 35.0));
    }

    #[test]
    fn zero_area_box_is_rejected() {
        assert!(matches!(
            CropWindow::around(&BBox::new(1.0, 1.0, 0.0, 4.0), 2.0),
            Err(Error::InvalidBox(_))
        ));
    }

    #[test]
    fn unit_scale_crop_reproduces_box_pixels() {
        let frame = gradient_frame(64, 64);
        let b = BBox::new(20.0, 24.0, 16.0, 16.0);
        let win = CropWindow::around(&b, 1.0).unwrap();
        let (t, _) = render_crop(&frame, &win, 16).unwrap();
        for v in 0..16 {
            for u in 0..16 {
                let px = frame.pixel(20 + u, 24 + v);
                for c in 0..3 {
                    let got = t.data()[c * 256 + v * 16 + u];
                    assert!((got - normalize_channel(px[c] as f64)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn out_of_frame_area_reads_mean_color() {
        let frame = gradient_frame(32, 32);
        let mean = frame.mean_color();
        let win = CropWindow { cx: -100.0, cy: -100.0, side: 10.0 };
        let (t, _) = render_crop(&frame, &win, 4).unwrap();
        for c in 0..3 {
            assert!((t.data()[c * 16] - normalize_channel(mean[c])).abs() < 1e-12);
        }
    }

    #[test]
    fn transform_round_trip() {
        let win = CropWindow::around(&BBox::new(13.3, 71.9, 22.1, 9.4), 4.0).unwrap();
        let tf = win.transform(64);
        let b = BBox::new(3.7, 11.2, 20.5, 8.25);
        let back = tf.to_crop(&tf.to_frame(&b));
        for (x, y) in [(back.x, b.x), (back.y, b.y), (back.w, b.w), (back.h, b.h)] {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let t = Tensor::new([2, 2, 3], (0..12).map(f64::from).collect()).unwrap();
        let f = flip_planar(&t).unwrap();
        assert_eq!(f.data()[..3], [2.0, 1.0, 0.0]);
        assert_eq!(flip_planar(&f).unwrap(), t);
    }
}
