//! Synthetic crowded-scene sequences: one drifting target among look-alikes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::Frame;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub frame_size: usize,
    pub num_frames: usize,
    /// Initial target side in pixels.
    pub target_size: f64,
    /// Target polygon vertex count.
    pub target_sides: usize,
    /// Degrees of hue change per frame.
    pub hue_drift: f64,
    /// Fractional size change per frame; negative shrinks.
    pub scale_drift: f64,
    pub distractors: usize,
    /// Distractor hue is the target's initial hue ± up to this many degrees.
    pub distractor_hue_jitter: f64,
    /// Standard deviation of the per-frame velocity kick, in pixels.
    pub motion_step: f64,
    pub momentum: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            frame_size: 256,
            num_frames: 40,
            target_size: 64.0,
            target_sides: 6,
            hue_drift: 3.0,
            scale_drift: -0.008,
            distractors: 3,
            distractor_hue_jitter: 10.0,
            motion_step: 3.0,
            momentum: 0.85,
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_frames == 0 {
            return bad("sequence needs at least one frame".into());
        }
        if !(self.target_size >= 4.0 && self.target_size.is_finite()) {
            return bad(format!("target size {} too small", self.target_size));
        }
        if (self.frame_size as f64) < 4.0 * self.max_object_size() {
            return bad(format!(
                "frame {} px is smaller than 4x the largest object ({} px)",
                self.frame_size,
                self.max_object_size()
            ));
        }
        if self.target_sides < 3 {
            return bad("target polygon needs at least 3 sides".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.scale_drift > -0.5 && self.scale_drift < 0.5) {
            return bad(format!("scale drift {} per frame is implausible", self.scale_drift));
        }
        Ok(())
    }

    /// Largest side any object reaches over the sequence.
    pub fn max_object_size(&self) -> f64 {
        let growth = (1.0 + self.scale_drift.max(0.0)).powi(self.num_frames as i32);
        self.target_size * growth
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    pub name: String,
    pub frames: Vec<Frame>,
    pub gt: Vec<BBox>,
    pub params: GeneratorParams,
    pub seed: u64,
    /// Target hue in degrees per frame, unwrapped.
    pub target_hues: Vec<f64>,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// A star-shaped polygon with unit-ish radius around the origin.
#[derive(Clone, Debug)]
struct Shape {
    /// `(cos θ, sin θ)·r` per vertex, radius at most 1.
    vertices: Vec<(f64, f64)>,
}

impl Shape {
    fn random(sides: usize, rng: &mut ChaCha8Rng) -> Self {
        let phase = rng.random::<f64>() * std::f64::consts::TAU;
        let vertices = (0..sides)
            .map(|i| {
                let a = phase + i as f64 * std::f64::consts::TAU / sides as f64;
                let r = rng.random_range(0.75..1.0);
                (a.cos() * r, a.sin() * r)
            })
            .collect();
        Self { vertices }
    }

    fn placed(&self, cx: f64, cy: f64, half: f64) -> Vec<(f64, f64)> {
        self.vertices.iter().map(|&(x, y)| (cx + x * half, cy + y * half)).collect()
    }
}

fn bounds(poly: &[(f64, f64)]) -> BBox {
    let (mut x1, mut y1, mut x2, mut y2) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for &(x, y) in poly {
        x1 = x1.min(x);
        y1 = y1.min(y);
        x2 = x2.max(x);
        y2 = y2.max(y);
    }
    BBox::from_corners(x1, y1, x2, y2)
}

fn contains(poly: &[(f64, f64)], px: f64, py: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn fill(frame: &mut Frame, poly: &[(f64, f64)], rgb: [u8; 3]) {
    let b = bounds(poly);
    let x0 = b.x.floor().max(0.0) as usize;
    let y0 = b.y.floor().max(0.0) as usize;
    let x1 = (b.x2().ceil() as usize).min(frame.width);
    let y1 = (b.y2().ceil() as usize).min(frame.height);
    for y in y0..y1 {
        for x in x0..x1 {
            if contains(poly, x as f64 + 0.5, y as f64 + 0.5) {
                frame.set_pixel(x, y, rgb);
            }
        }
    }
}

/// Position and velocity of a moving object, reflected at the frame edges.
#[derive(Clone, Debug)]
struct Walker {
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
}

impl Walker {
    fn step(&mut self, kick: &Normal<f64>, momentum: f64, margin: f64, limit: f64, rng: &mut ChaCha8Rng) {
        self.vx = momentum * self.vx + kick.sample(rng);
        self.vy = momentum * self.vy + kick.sample(rng);
        self.x += self.vx;
        self.y += self.vy;
        let (lo, hi) = (margin, limit - margin);
        if self.x < lo || self.x > hi {
            self.vx = -self.vx;
            self.x = self.x.clamp(lo, hi);
        }
        if self.y < lo || self.y > hi {
            self.vy = -self.vy;
            self.y = self.y.clamp(lo, hi);
        }
    }
}

fn background(size: usize, rng: &mut ChaCha8Rng) -> Frame {
    let base: [f64; 3] = [rng.random_range(70.0..110.0), rng.random_range(70.0..110.0), rng.random_range(70.0..110.0)];
    let fx = rng.random_range(0.01..0.04);
    let fy = rng.random_range(0.01..0.04);
    let phase = rng.random::<f64>() * std::f64::consts::TAU;
    let mut f = Frame::filled(size, size, [0; 3]);
    for y in 0..size {
        for x in 0..size {
            let wave = 15.0 * ((x as f64 * fx + y as f64 * fy) + phase).sin();
            let px = base.map(|c| (c + wave + rng.random_range(-6.0..6.0)).round().clamp(0.0, 255.0) as u8);
            f.set_pixel(x, y, px);
        }
    }
    f
}

/// Renders one sequence. Identical `(params, seed)` give identical pixels.
pub fn generate(params: &GeneratorParams, seed: u64) -> Result<SequenceRecord> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = params.frame_size as f64;
    let bg = background(params.frame_size, &mut rng);
    let kick = Normal::new(0.0, params.motion_step.max(1e-12)).map_err(|e| Error::Config(e.to_string()))?;
    let hue0 = rng.random_range(0.0..360.0);
    let start = |rng: &mut ChaCha8Rng, margin: f64| Walker {
        x: rng.random_range(margin..size - margin),
        y: rng.random_range(margin..size - margin),
        vx: 0.0,
        vy: 0.0,
    };
    let half = params.target_size / 2.0;
    let target_shape = Shape::random(params.target_sides, &mut rng);
    let mut target = start(&mut rng, 1.5 * half);
    let mut others: Vec<(Shape, Walker, f64, f64)> = (0..params.distractors)
        .map(|_| {
            let shape = Shape::random(params.target_sides, &mut rng);
            let scale = rng.random_range(0.8..1.0);
            let walker = start(&mut rng, half);
            let hue = hue0 + rng.random_range(-1.0..=1.0) * params.distractor_hue_jitter;
            (shape, walker, scale, hue)
        })
        .collect();
    let mut frames = Vec::with_capacity(params.num_frames);
    let mut gt = Vec::with_capacity(params.num_frames);
    let mut hues = Vec::with_capacity(params.num_frames);
    for t in 0..params.num_frames {
        if t > 0 {
            let h = half * (1.0 + params.scale_drift).powi(t as i32);
            target.step(&kick, params.momentum, h, size, &mut rng);
            for (_, w, s, _) in others.iter_mut() {
                w.step(&kick, params.momentum, half * *s, size, &mut rng);
            }
        }
        let mut frame = bg.clone();
        for (shape, w, s, hue) in &others {
            fill(&mut frame, &shape.placed(w.x, w.y, half * s), hsv_to_rgb(*hue, 0.8, 0.9));
        }
        let hue = hue0 + params.hue_drift * t as f64;
        let h = half * (1.0 + params.scale_drift).powi(t as i32);
        let poly = target_shape.placed(target.x, target.y, h);
        fill(&mut frame, &poly, hsv_to_rgb(hue, 0.8, 0.9));
        gt.push(bounds(&poly).clamp_to(size, size, 1.0));
        frames.push(frame);
        hues.push(hue);
    }
    Ok(SequenceRecord {
        name: format!("seq{seed:08x}"),
        frames,
        gt,
        params: params.clone(),
        seed,
        target_hues: hues,
    })
}

/// Seed of sequence `index` in a benchmark drawn from `seed`.
pub fn sequence_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F).rotate_left(17)
}

pub fn generate_benchmark(params: &GeneratorParams, count: usize, seed: u64) -> Result<Vec<SequenceRecord>> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rec = generate(params, sequence_seed(seed, i))?;
            rec.name = format!("seq{:03}", i + 1);
            Ok(rec)
        })
        .collect()
}

/// Disjoint training and held-out sets: one benchmark of `train + eval`
/// sequences split in order, each part numbered from 1.
pub fn train_eval_split(
    params: &GeneratorParams,
    train: usize,
    eval: usize,
    seed: u64,
) -> Result<(Vec<SequenceRecord>, Vec<SequenceRecord>)> {
    let mut all = generate_benchmark(params, train + eval, seed)?;
    let mut held_out = all.split_off(train);
    for (i, rec) in held_out.iter_mut().enumerate() {
        rec.name = format!("seq{:03}", i + 1);
    }
    Ok((all, held_out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorParams {
        GeneratorParams {
            frame_size: 64,
            num_frames: 6,
            target_size: 16.0,
            ..GeneratorParams::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(generate(&small(), 7).unwrap(), generate(&small(), 7).unwrap());
        assert_ne!(generate(&small(), 7).unwrap().frames, generate(&small(), 8).unwrap().frames);
    }

    #[test]
    fn hue_bookkeeping() {
        let p = GeneratorParams { hue_drift: 2.5, ..small() };
        let r = generate(&p, 1).unwrap();
        let n = p.num_frames - 1;
        assert!((r.target_hues[n] - r.target_hues[0] - 2.5 * n as f64).abs() < 1e-12);
    }

    #[test]
    fn static_appearance_without_drift() {
        let p = GeneratorParams {
            hue_drift: 0.0,
            scale_drift: 0.0,
            distractors: 0,
            ..small()
        };
        let r = generate(&p, 3).unwrap();
        let color = |i: usize| {
            let (cx, cy) = r.gt[i].center();
            r.frames[i].pixel(cx as usize, cy as usize)
        };
        assert!((1..r.len()).all(|i| color(i) == color(0)));
        assert!((1..r.len()).all(|i| (r.gt[i].w - r.gt[0].w).abs() < 1e-9));
    }

    #[test]
    fn boxes_inside_frame() {
        let r = generate(&GeneratorParams::default(), 11).unwrap();
        assert_eq!(r.len(), 40);
        for b in &r.gt {
            b.validate().unwrap();
            assert!(b.x >= 0.0 && b.y >= 0.0 && b.x2() <= 256.0 && b.y2() <= 256.0);
        }
    }

    #[test]
    fn oversized_object_rejected() {
        let p = GeneratorParams { target_size: 20.0, ..small() };
        assert!(matches!(generate(&p, 0), Err(Error::Config(_))));
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [255, 0, 0]);
        assert_eq!(hsv_to_rgb(120.0, 1.0, 1.0), [0, 255, 0]);
        assert_eq!(hsv_to_rgb(600.0, 1.0, 1.0), [0, 0, 255]);
    }
}
