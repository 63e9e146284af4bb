//! Frame-by-frame tracking with confidence-gated dynamic template updates.

use crate::encoder::EncoderInput;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::{render_crop, CropWindow, Frame};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const DEFAULT_TAU: f64 = 0.7;

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerConfig {
    pub scales: Vec<f64>,
    pub search_scale: f64,
    /// Dynamic templates are replaced when the score is strictly above this.
    pub tau: f64,
    pub template_resolution: usize,
    pub search_resolution: usize,
}

impl TrackerConfig {
    pub fn for_model(cfg: &ModelConfig, tau: f64) -> Self {
        Self {
            scales: cfg.scales.clone(),
            search_scale: cfg.search_scale,
            tau,
            template_resolution: cfg.encoder.template_resolution,
            search_resolution: cfg.encoder.search_resolution,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau {} outside (0, 1)", self.tau)));
        }
        if self.scales.is_empty() {
            return Err(Error::Config("no template scales".into()));
        }
        Ok(())
    }
}

/// Anything that maps crops to a box in search-crop pixels and a confidence.
pub trait Predictor {
    fn predict(&self, input: &EncoderInput) -> Result<(BBox, f64)>;
}

impl Predictor for Model {
    fn predict(&self, input: &EncoderInput) -> Result<(BBox, f64)> {
        let p = Model::predict(self, input)?;
        Ok((p.decoded.bbox, p.decoded.confidence))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub crop: Tensor,
    pub source_box: BBox,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemplateSet {
    pub static_templates: Vec<Template>,
    pub dynamic_templates: Vec<Template>,
}

/// Crops `frame` around `b` at every scale.
pub fn crop_templates(frame: &Frame, b: &BBox, scales: &[f64], resolution: usize) -> Result<Vec<Template>> {
    scales
        .iter()
        .map(|&k| {
            let win = CropWindow::around(b, k)?;
            let (crop, _) = render_crop(frame, &win, resolution)?;
            Ok(Template {
                crop,
                source_box: *b,
                scale: k,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerState {
    pub templates: TemplateSet,
    pub b_pred: BBox,
    pub config: TrackerConfig,
    /// 0-based index of the last processed frame.
    pub frame_index: usize,
    frame_size: (usize, usize),
}

/// Smallest frame side accepted; the search crop needs some support.
pub const MIN_FRAME_SIDE: usize = 2;

fn check_frame(frame: &Frame) -> Result<()> {
    if frame.width < MIN_FRAME_SIDE || frame.height < MIN_FRAME_SIDE {
        return Err(Error::dim(
            "track",
            format!("frame {}x{} below {MIN_FRAME_SIDE} px", frame.width, frame.height),
        ));
    }
    Ok(())
}

fn clamp_to_frame(b: &BBox, frame: &Frame) -> BBox {
    b.clamp_to(frame.width as f64, frame.height as f64, 1.0)
}

impl TrackerState {
    /// Static templates from the first frame; dynamic ones start as copies.
    pub fn init(frame: &Frame, b_init: &BBox, config: TrackerConfig) -> Result<Self> {
        config.validate()?;
        check_frame(frame)?;
        b_init.validate()?;
        let b = clamp_to_frame(b_init, frame);
        let static_templates = crop_templates(frame, &b, &config.scales, config.template_resolution)?;
        Ok(Self {
            templates: TemplateSet {
                dynamic_templates: static_templates.clone(),
                static_templates,
            },
            b_pred: b,
            config,
            frame_index: 0,
            frame_size: (frame.width, frame.height),
        })
    }

    fn input(&self, search: Tensor) -> EncoderInput {
        EncoderInput {
            static_crops: self.templates.static_templates.iter().map(|t| t.crop.clone()).collect(),
            dynamic_crops: self.templates.dynamic_templates.iter().map(|t| t.crop.clone()).collect(),
            search,
        }
    }

    /// Searches around the previous box, returns the new box in frame
    /// coordinates and its score, and refreshes every dynamic template when
    /// the score exceeds `tau`.
    pub fn track_frame<P: Predictor + ?Sized>(&mut self, predictor: &P, frame: &Frame) -> Result<FrameResult> {
        check_frame(frame)?;
        if (frame.width, frame.height) != self.frame_size {
            return Err(Error::dim(
                "track",
                format!(
                    "frame {}x{} differs from initial {}x{}",
                    frame.width, frame.height, self.frame_size.0, self.frame_size.1
                ),
            ));
        }
        let win = CropWindow::around(&self.b_pred, self.config.search_scale)?;
        let (search, tf) = render_crop(frame, &win, self.config.search_resolution)?;
        let (crop_box, score) = predictor.predict(&self.input(search))?;
        if !score.is_finite() || !crop_box.is_finite() {
            return Err(Error::NonFinite { op: "track" });
        }
        let b = clamp_to_frame(&tf.to_frame(&crop_box), frame);
        let updated = score > self.config.tau;
        if updated {
            self.templates.dynamic_templates =
                crop_templates(frame, &b, &self.config.scales, self.config.template_resolution)?;
        }
        self.b_pred = b;
        self.frame_index += 1;
        Ok(FrameResult {
            bbox: b,
            score,
            updated,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameResult {
    pub bbox: BBox,
    pub score: f64,
    pub updated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackResult {
    /// One box per frame; the first is the initial box.
    pub boxes: Vec<BBox>,
    /// Confidence per frame; 1 for the initial frame.
    pub scores: Vec<f64>,
    pub updated: Vec<bool>,
}

pub fn track_sequence<P: Predictor + ?Sized>(
    predictor: &P,
    frames: &[Frame],
    b_init: &BBox,
    config: &TrackerConfig,
) -> Result<TrackResult> {
    let first = frames.first().ok_or_else(|| Error::Contract("no frames to track".into()))?;
    let mut state = TrackerState::init(first, b_init, config.clone())?;
    let mut result = TrackResult {
        boxes: vec![*b_init],
        scores: vec![1.0],
        updated: vec![false],
    };
    for frame in &frames[1..] {
        let r = state.track_frame(predictor, frame)?;
        result.boxes.push(r.bbox);
        result.scores.push(r.score);
        result.updated.push(r.updated);
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    /// Returns the crop-centered box of fixed size with scripted scores.
    struct Scripted {
        scores: Vec<f64>,
        next: Cell<usize>,
        side: f64,
        resolution: f64,
    }

    impl Predictor for Scripted {
        fn predict(&self, _: &EncoderInput) -> Result<(BBox, f64)> {
            let i = self.next.get();
            self.next.set(i + 1);
            let c = self.resolution / 2.0;
            Ok((BBox::from_center(c, c, self.side, self.side), self.scores[i]))
        }
    }

    fn cfg() -> TrackerConfig {
        TrackerConfig {
            scales: vec![2.0, 4.0],
            search_scale: 4.0,
            tau: 0.7,
            template_resolution: 8,
            search_resolution: 16,
        }
    }

    fn frames(n: usize) -> Vec<Frame> {
        (0..n)
            .map(|i| {
                let mut f = Frame::filled(40, 40, [10, 20, 30]);
                for y in 10..20 {
                    for x in 10 + i..20 + i {
                        f.set_pixel(x, y, [200, (i * 40 % 256) as u8, 50]);
                    }
                }
                f
            })
            .collect()
    }

    fn scripted(scores: Vec<f64>) -> Scripted {
        Scripted {
            scores,
            next: Cell::new(0),
            side: 4.0,
            resolution: 16.0,
        }
    }

    #[test]
    fn gate_is_strict() {
        let f = frames(3);
        let b = BBox::new(10.0, 10.0, 10.0, 10.0);
        let p = scripted(vec![0.69, 0.71]);
        let mut s = TrackerState::init(&f[0], &b, cfg()).unwrap();
        assert_eq!(s.templates.dynamic_templates, s.templates.static_templates);
        let before = s.templates.clone();
        assert!(!s.track_frame(&p, &f[1]).unwrap().updated);
        assert_eq!(s.templates, before);
        let r = s.track_frame(&p, &f[2]).unwrap();
        assert!(r.updated);
        assert_eq!(s.templates.static_templates, before.static_templates);
        assert_ne!(s.templates.dynamic_templates, before.dynamic_templates);
        assert!(s.templates.dynamic_templates.iter().all(|t| t.source_box == r.bbox));
    }

    #[test]
    fn exactly_tau_does_not_update() {
        let f = frames(2);
        let mut s = TrackerState::init(&f[0], &BBox::new(10.0, 10.0, 10.0, 10.0), cfg()).unwrap();
        assert!(!s.track_frame(&scripted(vec![0.7]), &f[1]).unwrap().updated);
    }

    #[test]
    fn single_frame_returns_init() {
        let b = BBox::new(3.5, 4.25, 10.0, 12.0);
        let r = track_sequence(&scripted(vec![]), &frames(1), &b, &cfg()).unwrap();
        assert_eq!(r.boxes, vec![b]);
    }

    #[test]
    fn predicted_box_maps_through_crop() {
        let f = frames(2);
        let b = BBox::new(10.0, 10.0, 10.0, 10.0);
        let r = track_sequence(&scripted(vec![0.5]), &f, &b, &cfg()).unwrap();
        // search window side 40 over 16 px: 4 crop px -> 10 frame px, centered
        assert_eq!(r.boxes[1], BBox::new(10.0, 10.0, 10.0, 10.0));
    }

    #[test]
    fn rejects_tiny_or_mismatched_frames() {
        let b = BBox::new(0.0, 0.0, 1.0, 1.0);
        assert!(TrackerState::init(&Frame::filled(1, 1, [0; 3]), &b, cfg()).is_err());
        let f = frames(1);
        let mut s = TrackerState::init(&f[0], &BBox::new(10.0, 10.0, 10.0, 10.0), cfg()).unwrap();
        assert!(s.track_frame(&scripted(vec![0.9]), &Frame::filled(30, 30, [0; 3])).is_err());
    }

    #[test]
    fn zero_area_init_rejected() {
        let f = frames(1);
        assert!(matches!(
            TrackerState::init(&f[0], &BBox::new(10.0, 10.0, 0.0, 10.0), cfg()),
            Err(Error::InvalidBox(_))
        ));
    }
}
