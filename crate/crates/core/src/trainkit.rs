//! Training-sample construction, the optimization loop and ablation sweeps.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::encoder::EncoderInput;
use crate::error::{Error, Result};
use crate::evalkit::{self, SequenceRecord};
use crate::flops;
use crate::geometry::BBox;
use crate::image::{flip_planar, render_crop, CropWindow};
use crate::model::{Model, ModelConfig};
use crate::objectives::{gaussian_target, LossWeights, TrainTarget};
use crate::tensor::{AdamW, AdamWConfig, Tensor};
use crate::tracker::TrackerConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    /// Largest `t_s - t_d`.
    pub max_gap: usize,
    pub flip_prob: f64,
    /// Template side multiplied by `U(1 - j, 1 + j)`.
    pub template_scale_jitter: f64,
    /// Template center moved by `U(-j, j)` of the crop side, per axis.
    pub template_center_jitter: f64,
    /// Search center moved by `U(-j, j)` of the box's mean side, per axis.
    pub search_center_jitter: f64,
    pub search_scale_jitter: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            max_gap: 10,
            flip_prob: 0.5,
            template_scale_jitter: 0.1,
            template_center_jitter: 0.05,
            search_center_jitter: 1.0,
            search_scale_jitter: 0.15,
        }
    }
}

impl SamplerConfig {
    /// No flips and no jitter of any window.
    pub fn deterministic(max_gap: usize) -> Self {
        Self {
            max_gap,
            flip_prob: 0.0,
            template_scale_jitter: 0.0,
            template_center_jitter: 0.0,
            search_center_jitter: 0.0,
            search_scale_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_gap == 0 {
            return Err(Error::Config("max_gap must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        for (name, v, hi) in [
            ("template_scale_jitter", self.template_scale_jitter, 1.0),
            ("template_center_jitter", self.template_center_jitter, 1.0),
            ("search_center_jitter", self.search_center_jitter, 2.0),
            ("search_scale_jitter", self.search_scale_jitter, 1.0),
        ] {
            if !(0.0..hi).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0, {hi})")));
            }
        }
        Ok(())
    }
}

/// Frames and crop windows of one training tuple, before rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePlan {
    /// 0-based frame index of the dynamic templates.
    pub t_d: usize,
    /// 0-based frame index of the search crop.
    pub t_s: usize,
    pub static_windows: Vec<CropWindow>,
    pub dynamic_windows: Vec<CropWindow>,
    pub search_window: CropWindow,
    pub flip: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub plan: SamplePlan,
    pub input: EncoderInput,
    pub target: TrainTarget,
}

/// `t_d` uniform over `[0, n-2]`, `t_s` uniform over `(t_d, min(n-1, t_d+gap)]`.
pub fn sample_frames<R: Rng>(n: usize, max_gap: usize, rng: &mut R) -> Result<(usize, usize)> {
    if n < 3 {
        return Err(Error::Contract(format!("sequence of {n} frames is too short to sample")));
    }
    let t_d = rng.random_range(0..=n - 2);
    let hi = (n - 1).min(t_d + max_gap);
    let t_s = rng.random_range(t_d + 1..=hi);
    Ok((t_d, t_s))
}

fn plan<R: Rng>(seq: &SequenceRecord, model: &ModelConfig, sampler: &SamplerConfig, rng: &mut R) -> Result<SamplePlan> {
    let (t_d, t_s) = sample_frames(seq.len(), sampler.max_gap, rng)?;
    let windows = |b: &BBox| -> Result<Vec<CropWindow>> {
        model.scales.iter().map(|&k| CropWindow::around(b, k)).collect()
    };
    let prev = &seq.gt[t_s - 1];
    let mut search_window = CropWindow::around(prev, model.search_scale)?;
    let side = prev.mean_side();
    let j = sampler.search_center_jitter;
    if j > 0.0 {
        search_window.cx += rng.random_range(-j..=j) * side;
        search_window.cy += rng.random_range(-j..=j) * side;
    }
    if sampler.search_scale_jitter > 0.0 {
        let s = sampler.search_scale_jitter;
        search_window.side *= rng.random_range(1.0 - s..=1.0 + s);
    }
    Ok(SamplePlan {
        t_d,
        t_s,
        static_windows: windows(&seq.gt[0])?,
        dynamic_windows: windows(&seq.gt[t_d])?,
        search_window,
        flip: false,
    })
}

fn jitter_window<R: Rng>(w: &CropWindow, sampler: &SamplerConfig, rng: &mut R) -> CropWindow {
    let mut out = *w;
    let c = sampler.template_center_jitter;
    if c > 0.0 {
        out.cx += rng.random_range(-c..=c) * w.side;
        out.cy += rng.random_range(-c..=c) * w.side;
    }
    let s = sampler.template_scale_jitter;
    if s > 0.0 {
        out.side *= rng.random_range(1.0 - s..=1.0 + s);
    }
    out
}

/// Jitters every template window and draws the horizontal flip.
pub fn augment<R: Rng>(p: &SamplePlan, sampler: &SamplerConfig, rng: &mut R) -> SamplePlan {
    let mut out = p.clone();
    out.static_windows = p.static_windows.iter().map(|w| jitter_window(w, sampler, rng)).collect();
    out.dynamic_windows = p.dynamic_windows.iter().map(|w| jitter_window(w, sampler, rng)).collect();
    out.flip = sampler.flip_prob > 0.0 && rng.random::<f64>() < sampler.flip_prob;
    out
}

/// Whether `b` lies entirely inside a `side × side` crop.
fn inside(b: &BBox, side: f64) -> bool {
    b.x >= 0.0 && b.y >= 0.0 && b.x2() <= side && b.y2() <= side
}

/// Renders the crops and the heatmap target of a plan.
pub fn render(p: &SamplePlan, seq: &SequenceRecord, model: &ModelConfig) -> Result<TrainSample> {
    let t_res = model.encoder.template_resolution;
    let s_res = model.encoder.search_resolution;
    let crops = |frame: usize, windows: &[CropWindow]| -> Result<Vec<Tensor>> {
        windows
            .iter()
            .map(|w| render_crop(&seq.frames[frame], w, t_res).map(|(t, _)| t))
            .collect()
    };
    let static_crops = crops(0, &p.static_windows)?;
    let dynamic_crops = if model.encoder.dynamic_templates {
        crops(p.t_d, &p.dynamic_windows)?
    } else {
        Vec::new()
    };
    let (search, tf) = render_crop(&seq.frames[p.t_s], &p.search_window, s_res)?;
    let gt = tf.to_crop(&seq.gt[p.t_s]);
    let sample = TrainSample {
        plan: SamplePlan { flip: false, ..p.clone() },
        input: EncoderInput {
            static_crops,
            dynamic_crops,
            search,
        },
        target: gaussian_target(&gt, &model.head_geometry())?,
    };
    if p.flip {
        flip_sample(&sample)
    } else {
        Ok(sample)
    }
}

/// Mirrors every crop and the target box left-right.
pub fn flip_sample(s: &TrainSample) -> Result<TrainSample> {
    let flip_all = |v: &[Tensor]| v.iter().map(flip_planar).collect::<Result<Vec<_>>>();
    let g = s.target.geometry;
    let gt = s.target.gt_box.flipped_horizontally(g.extent());
    Ok(TrainSample {
        plan: SamplePlan {
            flip: !s.plan.flip,
            ..s.plan.clone()
        },
        input: EncoderInput {
            static_crops: flip_all(&s.input.static_crops)?,
            dynamic_crops: flip_all(&s.input.dynamic_crops)?,
            search: flip_planar(&s.input.search)?,
        },
        target: gaussian_target(&gt, &g)?,
    })
}

pub const MAX_RESAMPLES: usize = 100;

/// Draws an augmented sample whose target lies inside the search crop,
/// resampling on violation.
pub fn sample<R: Rng>(seq: &SequenceRecord, model: &ModelConfig, sampler: &SamplerConfig, rng: &mut R) -> Result<TrainSample> {
    for _ in 0..MAX_RESAMPLES {
        let p = augment(&plan(seq, model, sampler, rng)?, sampler, rng);
        let s = render(&p, seq, model)?;
        if inside(&s.target.gt_box, s.target.geometry.extent()) {
            return Ok(s);
        }
    }
    Err(Error::Contract(format!(
        "no valid sample in {MAX_RESAMPLES} draws from {}",
        seq.name
    )))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Samples drawn from each sequence per epoch.
    pub samples_per_sequence: usize,
    pub optimizer: AdamWConfig,
    pub loss: LossWeights,
    pub sampler: SamplerConfig,
    pub seed: u64,
    /// Threads for per-sample work; 1 runs everything on the caller.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            samples_per_sequence: 8,
            optimizer: AdamWConfig::default(),
            loss: LossWeights::default(),
            sampler: SamplerConfig::default(),
            seed: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.samples_per_sequence == 0 {
            return Err(Error::Config("epochs, batch_size and samples_per_sequence must be positive".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if !(self.optimizer.lr > 0.0) || self.optimizer.weight_decay < 0.0 {
            return Err(Error::Config("learning rate must be positive, weight decay non-negative".into()));
        }
        self.sampler.validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    /// Mean total loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub epoch_focal: Vec<f64>,
    pub epoch_giou: Vec<f64>,
    pub epoch_l1: Vec<f64>,
    pub steps: u64,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::from("epoch,total,focal,giou,l1\n");
        for e in 0..self.epoch_loss.len() {
            let f = evalkit::fmt6;
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                e + 1,
                f(self.epoch_loss[e]),
                f(self.epoch_focal[e]),
                f(self.epoch_giou[e]),
                f(self.epoch_l1[e])
            );
        }
        s
    }
}

/// Seed for sample `index` of `epoch`, independent of scheduling.
pub fn item_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut h = seed ^ 0x5851_F42D_4C95_7F2D;
    for v in [epoch as u64, index as u64] {
        h = (h ^ v).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        h ^= h >> 29;
    }
    h
}

fn run_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers <= 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// AdamW on per-batch mean gradients. Per-sample results are reduced in
/// sample order, so the outcome does not depend on `workers`.
pub fn train(
    model: &mut Model,
    data: &[SequenceRecord],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainHistory> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    let mut opt = AdamW::new(cfg.optimizer, model.store.tensors());
    let mut history = TrainHistory::default();
    let workers = cfg.workers;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len())
            .flat_map(|i| std::iter::repeat_n(i, cfg.samples_per_sequence))
            .collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, epoch, usize::MAX)));
        let mut sums = [0.0; 4];
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let m: &Model = model;
            let work = |(j, &seq): (usize, &usize)| -> Result<_> {
                let index = b * cfg.batch_size + j;
                let mut rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, epoch, index));
                let s = sample(&data[seq], &m.config, &cfg.sampler, &mut rng)?;
                m.loss_and_grads(&s.input, &s.target, &cfg.loss)
            };
            let results: Vec<Result<_>> = if workers <= 1 {
                batch.iter().enumerate().map(work).collect()
            } else {
                run_pool(workers, || batch.par_iter().enumerate().map(work).collect())?
            };
            let mut grads: Option<Vec<Tensor>> = None;
            for r in results {
                let (loss, g) = r?;
                if !loss.total.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        step: opt.steps() as usize,
                        detail: format!("loss {loss:?}"),
                    });
                }
                sums[0] += loss.total;
                sums[1] += loss.focal;
                sums[2] += loss.giou;
                sums[3] += loss.l1;
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, x) in acc.iter_mut().zip(&g) {
                            a.data_mut().iter_mut().zip(x.data()).for_each(|(p, q)| *p += q);
                        }
                    }
                }
            }
            let mut grads = grads.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f64;
            for g in grads.iter_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            opt.step(model.store.tensors_mut(), &grads).map_err(|e| Error::Divergence {
                epoch,
                step: opt.steps() as usize,
                detail: e.to_string(),
            })?;
        }
        let n = order.len() as f64;
        history.epoch_loss.push(sums[0] / n);
        history.epoch_focal.push(sums[1] / n);
        history.epoch_giou.push(sums[2] / n);
        history.epoch_l1.push(sums[3] / n);
        on_epoch(epoch, sums[0] / n);
    }
    history.steps = opt.steps();
    Ok(history)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationSpec {
    pub name: String,
    pub scales: Vec<f64>,
    pub dynamic: bool,
    pub keep_ratio: f64,
}

impl AblationSpec {
    pub fn new(name: &str, scales: &[f64], dynamic: bool, keep_ratio: f64) -> Self {
        Self {
            name: name.into(),
            scales: scales.to_vec(),
            dynamic,
            keep_ratio,
        }
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone().with_scales(self.scales.clone());
        cfg.encoder.dynamic_templates = self.dynamic;
        cfg.prune.keep_ratio = self.keep_ratio;
        cfg
    }
}

/// Static-template scale counts, no dynamic templates.
pub fn scales_table(keep_ratio: f64) -> Vec<AblationSpec> {
    vec![
        AblationSpec::new("scales1", &[2.0], false, keep_ratio),
        AblationSpec::new("scales2", &[2.0, 4.0], false, keep_ratio),
        AblationSpec::new("scales3", &[2.0, 3.0, 4.0], false, keep_ratio),
        AblationSpec::new("scales4", &[2.0, 2.7, 3.3, 4.0], false, keep_ratio),
    ]
}

pub fn dynamic_table(keep_ratio: f64) -> Vec<AblationSpec> {
    vec![
        AblationSpec::new("static", &[2.0], false, keep_ratio),
        AblationSpec::new("dynamic", &[2.0], true, keep_ratio),
        AblationSpec::new("multiscale_dynamic", &[2.0, 4.0], true, keep_ratio),
    ]
}

pub fn keep_ratio_table() -> Vec<AblationSpec> {
    [0.6, 0.7, 0.8, 0.9, 1.0]
        .iter()
        .map(|&r| AblationSpec::new(&format!("rho{r}"), &[2.0, 4.0], true, r))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub spec: AblationSpec,
    pub ao: f64,
    pub sr50: f64,
    pub sr75: f64,
    pub gflops: f64,
    pub final_loss: f64,
    pub initial_loss: f64,
}

/// Trains and evaluates each configuration from the same seed.
pub fn ablate(
    specs: &[AblationSpec],
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    tau: f64,
    train_set: &[SequenceRecord],
    eval_set: &[SequenceRecord],
    mut progress: impl FnMut(&str, usize, f64),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(specs.len());
    for spec in specs {
        let cfg = spec.apply(base);
        let mut model = Model::new(cfg.clone(), train_cfg.seed)?;
        let history = train(&mut model, train_set, train_cfg, |e, l| progress(&spec.name, e, l))?;
        let tracker = TrackerConfig::for_model(&cfg, tau);
        let scored = run_pool(train_cfg.workers, || evalkit::track_and_score(&model, eval_set, &tracker))??;
        let scores: Vec<_> = scored.into_iter().map(|(_, s)| s).collect();
        let (ao, sr50, sr75) = evalkit::aggregate(&scores);
        let report = flops::analyze(&cfg.encoder, &cfg.prune)?;
        rows.push(AblationRow {
            spec: spec.clone(),
            ao,
            sr50,
            sr75,
            gflops: report.total_gflops(),
            final_loss: *history.epoch_loss.last().unwrap_or(&f64::NAN),
            initial_loss: *history.epoch_loss.first().unwrap_or(&f64::NAN),
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    use std::fmt::Write as _;
    let f = evalkit::fmt6;
    let mut s = String::from("name,scales,dynamic,keep_ratio,gflops,ao,sr50,sr75,initial_loss,final_loss\n");
    for r in rows {
        let scales: Vec<String> = r.spec.scales.iter().map(|&k| f(k)).collect();
        let _ = writeln!(
            s,
            "{},[{}],{},{},{},{},{},{},{},{}",
            r.spec.name,
            scales.join(" "),
            if r.spec.dynamic { "on" } else { "off" },
            f(r.spec.keep_ratio),
            f(r.gflops),
            f(r.ao),
            f(r.sr50),
            f(r.sr75),
            f(r.initial_loss),
            f(r.final_loss)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::{generate, GeneratorParams};

    fn seq(n: usize) -> SequenceRecord {
        generate(
            &GeneratorParams {
                frame_size: 128,
                num_frames: n,
                target_size: 32.0,
                ..GeneratorParams::default()
            },
            9,
        )
        .unwrap()
    }

    #[test]
    fn three_frame_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..500 {
            seen.insert(sample_frames(3, 10, &mut rng).unwrap());
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![(0, 1), (0, 2), (1, 2)]);
        assert!(sample_frames(2, 10, &mut rng).is_err());
    }

    #[test]
    fn gap_bound_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let (d, s) = sample_frames(40, 10, &mut rng).unwrap();
            assert!(d < s && s - d <= 10 && s < 40);
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let r = seq(6);
        let cfg = ModelConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = sample(&r, &cfg, &SamplerConfig::deterministic(10), &mut rng).unwrap();
        let f = flip_sample(&s).unwrap();
        let w = s.target.geometry.extent();
        assert!((f.target.gt_box.x - (w - s.target.gt_box.x - s.target.gt_box.w)).abs() < 1e-12);
        let back = flip_sample(&f).unwrap();
        assert_eq!(back.input, s.input);
        assert!((back.target.gt_box.x - s.target.gt_box.x).abs() < 1e-12);
    }

    #[test]
    fn zero_jitter_leaves_plan_unchanged() {
        let r = seq(6);
        let cfg = ModelConfig::desk();
        let sampler = SamplerConfig::deterministic(10);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = plan(&r, &cfg, &sampler, &mut rng).unwrap();
        assert_eq!(augment(&p, &sampler, &mut rng), p);
    }

    #[test]
    fn samples_keep_target_inside_crop() {
        let r = seq(12);
        let cfg = ModelConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let s = sample(&r, &cfg, &SamplerConfig::default(), &mut rng).unwrap();
            assert!(inside(&s.target.gt_box, 64.0));
            assert!(s.plan.t_d < s.plan.t_s);
        }
    }

    #[test]
    fn item_seeds_differ() {
        assert_ne!(item_seed(1, 0, 0), item_seed(1, 0, 1));
        assert_ne!(item_seed(1, 0, 0), item_seed(1, 1, 0));
        assert_eq!(item_seed(5, 2, 3), item_seed(5, 2, 3));
    }

    #[test]
    fn table_shapes() {
        assert_eq!(dynamic_table(0.7).len(), 3);
        let rhos: Vec<f64> = keep_ratio_table().iter().map(|s| s.keep_ratio).collect();
        assert_eq!(rhos, vec![0.6, 0.7, 0.8, 0.9, 1.0]);
        assert_eq!(scales_table(0.7)[3].scales, vec![2.0, 2.7, 3.3, 4.0]);
    }
}
