use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ctxtrack_core::evalkit::{generate_benchmark, track_and_score, train_eval_split, GeneratorParams};
use ctxtrack_core::tracker::{track_sequence, TrackerConfig};
use ctxtrack_core::trainkit::{sample, sample_frames, train, SamplerConfig, TrainConfig};
use ctxtrack_core::{Model, ModelConfig};

fn bench(count: usize, seed: u64) -> Vec<ctxtrack_core::SequenceRecord> {
    generate_benchmark(&GeneratorParams::default(), count, seed).unwrap()
}

fn short(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        samples_per_sequence: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_bitwise_reproducible_across_worker_counts() {
    let data = bench(4, 11);
    let run = |workers: usize| {
        let mut m = Model::new(ModelConfig::desk(), 3).unwrap();
        let cfg = TrainConfig { workers, ..short(2) };
        let h = train(&mut m, &data, &cfg, |_, _| {}).unwrap();
        (m.store.tensors().to_vec(), h)
    };
    let (a, ha) = run(1);
    let (b, hb) = run(1);
    let (c, hc) = run(2);
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert_eq!(ha, hb);
    assert_eq!(ha, hc);
}

#[test]
fn loss_falls_early_and_halves_over_thirty_epochs() {
    let run = ctxtrack_core::RunConfig::default();
    let (data, _) = train_eval_split(&run.bench, run.train_sequences, run.eval_sequences, run.train.seed).unwrap();
    let mut m = Model::new(ModelConfig::desk(), 5).unwrap();
    let h = train(&mut m, &data, &run.train, |_, _| {}).unwrap();
    let l = &h.epoch_loss;
    let running: Vec<f64> = (1..=5).map(|k| l[..k].iter().sum::<f64>() / k as f64).collect();
    assert!(running.windows(2).all(|w| w[1] < w[0]), "{running:?}");
    assert!(l[29] < 0.5 * l[0], "{} -> {}", l[0], l[29]);
}

#[test]
fn dynamic_frame_index_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (n, draws) = (40usize, 10_000usize);
    let mut counts = vec![0usize; n - 1];
    for _ in 0..draws {
        let (t_d, t_s) = sample_frames(n, 10, &mut rng).unwrap();
        assert!(t_d < t_s && t_s - t_d <= 10 && t_s < n);
        counts[t_d] += 1;
    }
    let p = 1.0 / (n - 1) as f64;
    let mean = draws as f64 * p;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - mean).abs() <= 3.0 * sd + 1.0, "count {c}, mean {mean}");
    }
}

#[test]
fn samples_keep_target_inside_search_crop() {
    let data = bench(3, 14);
    let cfg = ModelConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for i in 0..60 {
        let s = sample(&data[i % 3], &cfg, &SamplerConfig::default(), &mut rng).unwrap();
        let b = s.target.gt_box;
        let e = s.target.geometry.extent();
        assert!(b.x >= 0.0 && b.y >= 0.0 && b.x2() <= e && b.y2() <= e);
        assert!(s.plan.t_d < s.plan.t_s);
    }
}

#[test]
fn tracking_a_benchmark_is_deterministic_and_complete() {
    let data = bench(3, 16);
    let cfg = ModelConfig::desk();
    let model = Model::new(cfg.clone(), 6).unwrap();
    let tracker = TrackerConfig::for_model(&cfg, 0.7);
    let a = track_and_score(&model, &data, &tracker).unwrap();
    let b = track_and_score(&model, &data, &tracker).unwrap();
    assert_eq!(a, b);
    for ((r, s), seq) in a.iter().zip(&data) {
        assert_eq!(r.boxes.len(), seq.len());
        assert_eq!(r.boxes[0], seq.gt[0]);
        assert_eq!(s.ious.len(), seq.len() - 1);
        assert!((0.0..=1.0).contains(&s.ao));
    }
}

#[test]
fn checkpoint_reload_reproduces_tracks() {
    let data = bench(1, 17);
    let cfg = ModelConfig::desk();
    let model = Model::new(cfg.clone(), 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    let tracker = TrackerConfig::for_model(&cfg, 0.7);
    let a = track_sequence(&model, &data[0].frames, &data[0].gt[0], &tracker).unwrap();
    let b = track_sequence(&back, &data[0].frames, &data[0].gt[0], &tracker).unwrap();
    assert_eq!(a, b);
}
