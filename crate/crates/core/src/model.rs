//! Encoder and head wired together, with parameters and checkpoint I/O.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config;
use crate::encoder::{self, EncoderConfig, EncoderInput, EncoderOutput, EncoderParams};
use crate::error::{Error, Result};
use crate::head::{self, Decoded, HeadGeometry, HeadParams, HeadVars, TrackOutput};
use crate::objectives::{self, LossValues, LossWeights, TrainTarget};
use crate::params::{Bound, ParamStore};
use crate::pruning::{self, PruneConfig};
use crate::geometry::BBox;
use crate::tensor::gradcheck::{max_relative_error, GradReport, Probe, DEFAULT_EPS, DEFAULT_TOLERANCE};
use crate::tensor::{read_checkpoint, write_checkpoint, Checkpoint, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub prune: PruneConfig,
    /// Template context factors `𝒦`, one per scale.
    pub scales: Vec<f64>,
    /// Context factor of the search crop.
    pub search_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            prune: PruneConfig::new(0.7, vec![2, 4]),
            scales: vec![2.0, 4.0],
            search_scale: 4.0,
        }
    }

    /// Full-size geometry, pruning before the 4th, 7th and 10th blocks.
    pub fn full_size() -> Self {
        Self {
            encoder: EncoderConfig::full_size(),
            prune: PruneConfig::new(0.7, vec![3, 6, 9]),
            scales: vec![2.0, 4.0],
            search_scale: 4.0,
        }
    }

    pub fn with_scales(mut self, scales: Vec<f64>) -> Self {
        self.encoder.num_scales = scales.len();
        self.scales = scales;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.prune.validate(self.encoder.num_blocks)?;
        if self.encoder.embed_dim % 8 != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be divisible by 8 for the head",
                self.encoder.embed_dim
            )));
        }
        if self.scales.len() != self.encoder.num_scales {
            return Err(Error::Config(format!(
                "{} scale factors for num_scales {}",
                self.scales.len(),
                self.encoder.num_scales
            )));
        }
        if let Some(k) = self.scales.iter().find(|&&k| !(k >= 1.0 && k.is_finite())) {
            return Err(Error::Config(format!("template scale {k} must be >= 1")));
        }
        if !(self.search_scale >= 1.0 && self.search_scale.is_finite()) {
            return Err(Error::Config(format!("search scale {} must be >= 1", self.search_scale)));
        }
        Ok(())
    }

    pub fn head_geometry(&self) -> HeadGeometry {
        HeadGeometry {
            channels: self.encoder.embed_dim,
            grid: self.encoder.search_grid(),
            stride: self.encoder.patch_size,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub head: HeadParams,
}

/// Everything a forward pass leaves on the tape.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub encoder: EncoderOutput,
    pub head: HeadVars,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub output: TrackOutput,
    pub decoded: Decoded,
    pub tokens_per_block: Vec<usize>,
    pub kept_search_coords: Vec<(usize, usize)>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::init(&config.encoder, &mut store, &mut rng);
        let head = HeadParams::init(config.encoder.embed_dim, &mut store, &mut rng)?;
        Ok(Self {
            config,
            store,
            encoder,
            head,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, input: &EncoderInput) -> Result<ForwardPass> {
        let cfg = &self.config.encoder;
        let seq = encoder::embed(tape, bound, &self.encoder, cfg, input)?;
        let enc = encoder::forward(tape, bound, &self.encoder, cfg, seq, &self.config.prune)?;
        let g = cfg.search_grid();
        let grid = pruning::scatter_to_grid(tape, &enc.sequence, g, g)?;
        let head = head::head_forward(tape, bound, &self.head, &self.config.head_geometry(), grid)?;
        Ok(ForwardPass { encoder: enc, head })
    }

    pub fn predict(&self, input: &EncoderInput) -> Result<Prediction> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let pass = self.forward(&mut tape, &bound, input)?;
        let output = TrackOutput::from_vars(&tape, &pass.head, self.config.head_geometry())?;
        let decoded = output.decode();
        Ok(Prediction {
            output,
            decoded,
            tokens_per_block: pass.encoder.tokens_per_block.clone(),
            kept_search_coords: pass.encoder.kept_search_coords(),
        })
    }

    /// Loss of one sample and the gradient of every parameter.
    pub fn loss_and_grads(
        &self,
        input: &EncoderInput,
        target: &TrainTarget,
        weights: &LossWeights,
    ) -> Result<(LossValues, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, true);
        let pass = self.forward(&mut tape, &bound, input)?;
        let terms = objectives::total_loss(&mut tape, &pass.head, target, weights)?;
        let values = terms.values(&tape);
        tape.backward(terms.total)?;
        Ok((values, bound.grads(&tape, &self.store)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            config: config::model_to_pairs(&self.config),
            tensors: self
                .store
                .names()
                .iter()
                .cloned()
                .zip(self.store.tensors().iter().cloned())
                .collect(),
        };
        write_checkpoint(path, &ckpt)
    }

    /// Rebuilds the model described by the checkpoint manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = read_checkpoint(path)?;
        let config = config::model_from_pairs(&ckpt.config)?;
        let mut model = Model::new(config, 0)?;
        model.store.load(ckpt.tensors)?;
        Ok(model)
    }

    /// Like [`Model::load`], but the stored configuration must equal `expected`.
    pub fn load_matching(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let model = Self::load(path)?;
        if &model.config != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint config {:?} does not match requested {:?}",
                config::model_to_pairs(&model.config),
                config::model_to_pairs(expected)
            )));
        }
        Ok(model)
    }
}

/// Finite-difference check of the whole encoder, head and total loss with
/// respect to every parameter tensor of a freshly initialized model.
pub fn full_graph_gradcheck(config: &ModelConfig, seed: u64, probe: Probe) -> Result<GradReport> {
    let model = Model::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let t = config.encoder.template_resolution;
    let s = config.encoder.search_resolution;
    let mut crop = |r: usize| Tensor::uniform([3, r, r], -0.5, 0.5, &mut rng);
    let n = config.scales.len();
    let input = EncoderInput {
        static_crops: (0..n).map(|_| crop(t)).collect(),
        dynamic_crops: (0..n).map(|_| crop(t)).collect(),
        search: crop(s),
    };
    let g = config.head_geometry();
    let e = g.extent();
    let gt = BBox::from_center(0.45 * e, 0.55 * e, 0.3 * e, 0.25 * e);
    let target = objectives::gaussian_target(&gt, &g)?;
    let weights = LossWeights::default();
    let err = max_relative_error(
        model.store.tensors(),
        |tape, vars| {
            let bound = Bound::from_vars(vars.to_vec());
            let pass = model.forward(tape, &bound, &input)?;
            Ok(objectives::total_loss(tape, &pass.head, &target, &weights)?.total)
        },
        DEFAULT_EPS,
        probe,
        seed,
    )?;
    Ok(GradReport::new("encoder+head+total_loss", err, DEFAULT_TOLERANCE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                embed_dim: 16,
                num_heads: 2,
                num_blocks: 3,
                mlp_ratio: 2,
                num_scales: 1,
                ..EncoderConfig::desk()
            },
            prune: PruneConfig::new(0.7, vec![1]),
            scales: vec![2.0],
            search_scale: 4.0,
        }
    }

    fn input(cfg: &ModelConfig, seed: u64) -> EncoderInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = cfg.encoder.template_resolution;
        let s = cfg.encoder.search_resolution;
        let crop = |rng: &mut ChaCha8Rng, r| Tensor::uniform([3, r, r], -0.5, 0.5, rng);
        EncoderInput {
            static_crops: (0..cfg.scales.len()).map(|_| crop(&mut rng, t)).collect(),
            dynamic_crops: (0..cfg.scales.len()).map(|_| crop(&mut rng, t)).collect(),
            search: crop(&mut rng, s),
        }
    }

    #[test]
    fn prediction_is_deterministic_and_valid() {
        let cfg = tiny();
        let model = Model::new(cfg.clone(), 1).unwrap();
        let x = input(&cfg, 2);
        let a = model.predict(&x).unwrap();
        let b = model.predict(&x).unwrap();
        assert_eq!(a.output, b.output);
        a.decoded.bbox.validate().unwrap();
        assert_eq!(a.decoded.confidence, a.output.score_map.max());
        assert_eq!(a.kept_search_coords.len(), 12);
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = tiny();
        let model = Model::new(cfg.clone(), 3).unwrap();
        model.save(&path).unwrap();
        let back = Model::load_matching(&path, &cfg).unwrap();
        assert_eq!(back.store.tensors(), model.store.tensors());
        let mut other = cfg;
        other.prune.keep_ratio = 0.9;
        assert!(matches!(Model::load_matching(&path, &other), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn gradients_cover_every_parameter() {
        let cfg = tiny();
        let model = Model::new(cfg.clone(), 4).unwrap();
        let target = objectives::gaussian_target(
            &crate::geometry::BBox::new(20.0, 20.0, 16.0, 16.0),
            &cfg.head_geometry(),
        )
        .unwrap();
        let (loss, grads) = model.loss_and_grads(&input(&cfg, 5), &target, &LossWeights::default()).unwrap();
        assert!(loss.total.is_finite() && loss.total > 0.0);
        assert_eq!(grads.len(), model.store.len());
        let touched = grads.iter().filter(|g| g.data().iter().any(|&v| v != 0.0)).count();
        assert!(touched * 10 >= grads.len() * 9, "{touched} of {}", grads.len());
    }
}
