use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
epochs = 1
batch_size = 4
samples_per_sequence = 2
train_sequences = 2
eval_sequences = 2
frame_size = 96
num_frames = 6
target_size = 24
";

fn ctxtrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxtrack")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = ctxtrack(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn flops_total(rho: &str) -> f64 {
    let text = ok(&["flops", "--rho", rho]);
    let line = text.lines().find(|l| l.contains(",total,")).unwrap();
    line.rsplit(',').next().unwrap().parse().unwrap()
}

#[test]
fn gradcheck_passes() {
    let text = ok(&["gradcheck"]);
    assert!(text.contains("PASS"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn pruning_lowers_reported_flops() {
    assert!(flops_total("1.0") > flops_total("0.7"));
    assert!(flops_total("0.7") > flops_total("0.6"));
}

#[test]
fn train_track_eval_round_trip_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.txt");
    fs::write(&cfg, TINY).unwrap();
    let bench = dir.path().join("bench");
    ok(&["genbench", "--config", s(&cfg), "--out", s(&bench)]);

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for o in [&a, &b] {
        ok(&["train", "--config", s(&cfg), "--data", s(&bench.join("train")), "--out", s(o)]);
    }
    assert_eq!(fs::read(a.join("checkpoint.ckpt")).unwrap(), fs::read(b.join("checkpoint.ckpt")).unwrap());
    assert_eq!(fs::read(a.join("loss.csv")).unwrap(), fs::read(b.join("loss.csv")).unwrap());

    let ckpt = a.join("checkpoint.ckpt");
    let (ea, eb) = (dir.path().join("ea"), dir.path().join("eb"));
    for o in [&ea, &eb] {
        ok(&["eval", "--checkpoint", s(&ckpt), "--input", s(&bench.join("eval")), "--out", s(o)]);
    }
    let report = fs::read_to_string(ea.join("report.csv")).unwrap();
    assert_eq!(report, fs::read_to_string(eb.join("report.csv")).unwrap());
    assert!(report.lines().count() >= 3);

    let rescored = dir.path().join("rescored");
    ok(&["eval", "--boxes", s(&ea), "--input", s(&bench.join("eval")), "--out", s(&rescored)]);
    let again = fs::read_to_string(rescored.join("report.csv")).unwrap();
    let rows = |t: &str| -> Vec<Vec<f64>> {
        t.lines()
            .filter(|l| l.starts_with("seq0") || l.starts_with("mean"))
            .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
            .collect()
    };
    let (x, y) = (rows(&report), rows(&again));
    assert_eq!(x.len(), y.len());
    for (r, q) in x.iter().zip(&y) {
        for (u, v) in r.iter().zip(q) {
            assert!((u - v).abs() <= 1e-5, "{x:?} vs {y:?}");
        }
    }

    let tracked = dir.path().join("tracked");
    ok(&["track", "--checkpoint", s(&ckpt), "--input", s(&bench.join("eval/seq001")), "--overlays", "--out", s(&tracked)]);
    let lines = fs::read_to_string(tracked.join("boxes.csv")).unwrap().lines().count();
    assert_eq!(lines, 7);
    assert_eq!(fs::read_dir(tracked.join("overlays")).unwrap().count(), 6);
}

#[test]
fn one_frame_sequence_returns_the_initial_box() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.txt");
    fs::write(&cfg, TINY).unwrap();
    let bench = dir.path().join("bench");
    ok(&["genbench", "--config", s(&cfg), "--out", s(&bench)]);
    let model = dir.path().join("m");
    ok(&["train", "--config", s(&cfg), "--data", s(&bench.join("train")), "--out", s(&model)]);

    let src = bench.join("eval/seq001");
    let one = dir.path().join("one");
    fs::create_dir(&one).unwrap();
    fs::copy(src.join("00000001.ppm"), one.join("00000001.ppm")).unwrap();
    let init = fs::read_to_string(src.join("init.txt")).unwrap();
    fs::write(one.join("init.txt"), &init).unwrap();

    let out = dir.path().join("out");
    ok(&["track", "--checkpoint", s(&model.join("checkpoint.ckpt")), "--input", s(&one), "--out", s(&out)]);
    let csv = fs::read_to_string(out.join("boxes.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 1);
    let got: Vec<f64> = rows[0].split(',').skip(1).take(4).map(|v| v.parse().unwrap()).collect();
    let want: Vec<f64> = init.split_whitespace().map(|v| v.parse().unwrap()).collect();
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() <= 1e-5 * w.abs().max(1.0), "{got:?} vs {want:?}");
    }
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "embed_dim = 63\n").unwrap();
    assert!(!ctxtrack(&["flops", "--config", s(&bad)]).status.success());
    fs::write(&bad, "no_such_key = 1\n").unwrap();
    assert!(!ctxtrack(&["flops", "--config", s(&bad)]).status.success());

    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let seq = dir.path().join("seq");
    fs::create_dir(&seq).unwrap();
    let out = ctxtrack(&["track", "--checkpoint", s(&junk), "--input", s(&seq), "--out", s(&dir.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let cfg = dir.path().join("tiny.txt");
    fs::write(&cfg, TINY).unwrap();
    let m = dir.path().join("m");
    ok(&["train", "--config", s(&cfg), "--out", s(&m)]);
    let other = dir.path().join("other.txt");
    fs::write(&other, format!("{TINY}embed_dim = 32\n")).unwrap();
    let out = ctxtrack(&[
        "track", "--config", s(&other), "--checkpoint", s(&m.join("checkpoint.ckpt")),
        "--input", s(&seq), "--out", s(&dir.path().join("o2")),
    ]);
    assert!(!out.status.success());

    assert!(!ctxtrack(&["genbench"]).status.success());
    assert!(!ctxtrack(&["flops", "--rho", "1.5"]).status.success());
}
