use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ctxtrack_core::config::parse_switch;
use ctxtrack_core::evalkit::persist::{self, LoadedSequence};
use ctxtrack_core::evalkit::{self, config_hash, fmt6, train_eval_split, EvalReport, SequenceScore};
use ctxtrack_core::flops;
use ctxtrack_core::model::full_graph_gradcheck;
use ctxtrack_core::tensor::gradcheck::{primitive_suite, GradReport, Probe};
use ctxtrack_core::tracker::{track_sequence, TrackResult};
use ctxtrack_core::trainkit::{self, AblationSpec};
use ctxtrack_core::{BBox, Error, Frame, Model, ModelConfig, Result, RunConfig, SequenceRecord, TrackerConfig};

#[derive(Parser)]
#[command(name = "ctxtrack", version, about = "Multi-template transformer tracker with search-token pruning")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Threads for per-sample and per-sequence work.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Search-token keeping ratio.
    #[arg(long, global = true)]
    rho: Option<f64>,
    /// Template scale factors, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    scales: Option<Vec<f64>>,
    /// Dynamic templates: on or off.
    #[arg(long, global = true, value_parser = ["on", "off"])]
    dynamic: Option<String>,
    /// Confidence threshold for dynamic template updates.
    #[arg(long, global = true)]
    tau: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint and loss history.
    Train {
        /// Directory of training sequences; generated from the config if absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Track one sequence directory and write boxes.csv.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sequence directory with frames and init.txt.
        #[arg(long)]
        input: PathBuf,
        /// Also write frames with the predicted box drawn in.
        #[arg(long)]
        overlays: bool,
    },
    /// Score tracking results against ground truth.
    Eval {
        /// A sequence directory or a directory of sequence directories.
        #[arg(long)]
        input: PathBuf,
        /// Track with this checkpoint.
        #[arg(long, conflicts_with = "boxes", required_unless_present = "boxes")]
        checkpoint: Option<PathBuf>,
        /// Read `<name>/boxes.csv` (or `boxes.csv` for a single sequence) from here.
        #[arg(long)]
        boxes: Option<PathBuf>,
    },
    /// Train and evaluate each row of an ablation table.
    Ablate {
        #[arg(long, value_enum, default_value_t = Table::Dynamic)]
        table: Table,
    },
    /// Analytic FLOPs per block for the configured model.
    Flops {
        /// Use the full-size geometry instead of the configured one.
        #[arg(long)]
        full_size: bool,
    },
    /// Finite-difference gradient checks of every differentiable op and the full graph.
    Gradcheck,
    /// Write synthetic training and held-out benchmark sequences.
    Genbench,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Table {
    Scales,
    Dynamic,
    Rho,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.train.workers = w;
        }
        if let Some(r) = self.rho {
            cfg.model.prune.keep_ratio = r;
        }
        if let Some(s) = &self.scales {
            cfg.model = cfg.model.clone().with_scales(s.clone());
        }
        if let Some(d) = &self.dynamic {
            cfg.model.encoder.dynamic_templates = parse_switch("dynamic", d)?;
        }
        if let Some(t) = self.tau {
            cfg.tau = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self
            .out
            .clone()
            .ok_or_else(|| Error::Config("--out is required for this command".into()))?;
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    /// Checkpoint model, with inference-time overrides. With `--config` the
    /// stored configuration must match the requested one.
    fn load_model(&self, path: &Path) -> Result<(Model, RunConfig)> {
        let mut run = self.run_config()?;
        let model = if self.config.is_some() {
            Model::load_matching(path, &run.model)?
        } else {
            let mut m = Model::load(path)?;
            if let Some(r) = self.rho {
                m.config.prune.keep_ratio = r;
                m.config.validate()?;
            }
            run.model = m.config.clone();
            m
        };
        Ok((model, run))
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

fn train_cmd(common: &Common, data: &Option<PathBuf>) -> Result<()> {
    let cfg = common.run_config()?;
    let out = common.out_dir()?;
    let sequences = match data {
        Some(dir) => read_records(dir)?,
        None => train_eval_split(&cfg.bench, cfg.train_sequences, 0, cfg.train.seed)?.0,
    };
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    let history = trainkit::train(&mut model, &sequences, &cfg.train, |e, loss| {
        eprintln!("epoch {} loss {}", e + 1, fmt6(loss));
    })?;
    model.save(&out.join("checkpoint.ckpt"))?;
    write(&out.join("loss.csv"), &history.to_csv())?;
    write(&out.join("config.txt"), &cfg.to_text())?;
    println!("wrote {}", out.join("checkpoint.ckpt").display());
    Ok(())
}

/// Sequence directories below `dir`, or `dir` itself if it holds frames.
fn sequence_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !persist::frame_paths(dir)?.is_empty() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::format(dir, "no sequences found"));
    }
    Ok(dirs)
}

fn read_records(dir: &Path) -> Result<Vec<SequenceRecord>> {
    sequence_dirs(dir)?
        .iter()
        .map(|d| {
            let s = persist::read_sequence(d)?;
            let gt = s
                .gt
                .ok_or_else(|| Error::format(d, "training sequences need gt.txt"))?;
            if gt.len() != s.frames.len() {
                return Err(Error::format(d, format!("{} boxes for {} frames", gt.len(), s.frames.len())));
            }
            Ok(SequenceRecord {
                name: s.name,
                frames: s.frames,
                gt,
                params: Default::default(),
                seed: 0,
                target_hues: Vec::new(),
            })
        })
        .collect()
}

fn track_loaded(model: &Model, run: &RunConfig, seq: &LoadedSequence) -> Result<TrackResult> {
    let tracker = TrackerConfig::for_model(&model.config, run.tau);
    track_sequence(model, &seq.frames, &seq.init, &tracker)
}

fn write_overlays(dir: &Path, frames: &[Frame], boxes: &[BBox], gt: Option<&[BBox]>) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, (f, b)) in frames.iter().zip(boxes).enumerate() {
        let mut f = f.clone();
        if let Some(g) = gt.and_then(|g| g.get(i)) {
            f.draw_box(g, [0, 255, 0]);
        }
        f.draw_box(b, [255, 0, 0]);
        f.save_ppm(&dir.join(persist::frame_file_name(i)))?;
    }
    Ok(())
}

fn track_cmd(common: &Common, checkpoint: &Path, input: &Path, overlays: bool) -> Result<()> {
    let (model, run) = common.load_model(checkpoint)?;
    let out = common.out_dir()?;
    let seq = persist::read_sequence(input)?;
    let result = track_loaded(&model, &run, &seq)?;
    write(&out.join("boxes.csv"), &persist::boxes_csv(&result.boxes, &result.scores))?;
    if overlays {
        write_overlays(&out.join("overlays"), &seq.frames, &result.boxes, seq.gt.as_deref())?;
    }
    let updates = result.updated.iter().filter(|&&u| u).count();
    println!("tracked {} frames of {} ({updates} template updates)", result.boxes.len(), seq.name);
    Ok(())
}

fn eval_cmd(common: &Common, input: &Path, checkpoint: &Option<PathBuf>, boxes: &Option<PathBuf>) -> Result<()> {
    let out = common.out_dir()?;
    let dirs = sequence_dirs(input)?;
    let single = dirs.len() == 1 && dirs[0] == input;
    let loaded: Vec<LoadedSequence> = dirs.iter().map(|d| persist::read_sequence(d)).collect::<Result<_>>()?;
    let (model, run) = match checkpoint {
        Some(p) => {
            let (m, r) = common.load_model(p)?;
            (Some(m), r)
        }
        None => (None, common.run_config()?),
    };
    let mut scores: Vec<SequenceScore> = Vec::with_capacity(loaded.len());
    for seq in &loaded {
        let gt = seq
            .gt
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("sequence {} has no gt.txt", seq.name)))?;
        let predicted = match (&model, boxes) {
            (Some(m), _) => {
                let r = track_loaded(m, &run, seq)?;
                let dir = out.join(&seq.name);
                fs::create_dir_all(&dir)?;
                write(&dir.join("boxes.csv"), &persist::boxes_csv(&r.boxes, &r.scores))?;
                r.boxes
            }
            (None, Some(b)) => {
                let path = if single { b.join("boxes.csv") } else { b.join(&seq.name).join("boxes.csv") };
                persist::read_boxes_csv(&path)?.0
            }
            (None, None) => return Err(Error::Config("eval needs --checkpoint or --boxes".into())),
        };
        scores.push(evalkit::evaluate(&seq.name, &predicted, gt)?);
    }
    let model_cfg: ModelConfig = model.as_ref().map(|m| m.config.clone()).unwrap_or(run.model.clone());
    let report = EvalReport::new(
        scores,
        config_hash(&run.to_text()),
        Some(flops::analyze(&model_cfg.encoder, &model_cfg.prune)?),
    );
    write(&out.join("report.csv"), &report.to_csv())?;
    write(&out.join("report.txt"), &report.to_text())?;
    println!("ao {} sr50 {} sr75 {}", fmt6(report.ao), fmt6(report.sr50), fmt6(report.sr75));
    Ok(())
}

fn ablate_cmd(common: &Common, table: Table) -> Result<()> {
    let cfg = common.run_config()?;
    let out = common.out_dir()?;
    let rho = cfg.model.prune.keep_ratio;
    let (specs, name): (Vec<AblationSpec>, &str) = match table {
        Table::Scales => (trainkit::scales_table(rho), "scales"),
        Table::Dynamic => (trainkit::dynamic_table(rho), "dynamic"),
        Table::Rho => (trainkit::keep_ratio_table(), "rho"),
    };
    let (train, eval) = train_eval_split(&cfg.bench, cfg.train_sequences, cfg.eval_sequences, cfg.train.seed)?;
    let rows = trainkit::ablate(&specs, &cfg.model, &cfg.train, cfg.tau, &train, &eval, |spec, e, loss| {
        eprintln!("{spec}: epoch {} loss {}", e + 1, fmt6(loss));
    })?;
    let csv = trainkit::ablation_csv(&rows);
    write(&out.join(format!("ablation_{name}.csv")), &csv)?;
    print!("{csv}");
    Ok(())
}

fn flops_cmd(common: &Common, full_size: bool) -> Result<()> {
    let cfg = common.run_config()?;
    let mut model = if full_size { ModelConfig::full_size() } else { cfg.model.clone() };
    if full_size {
        model.prune.keep_ratio = cfg.model.prune.keep_ratio;
    }
    let report = flops::analyze(&model.encoder, &model.prune)?;
    let csv = flops::to_csv(std::slice::from_ref(&report));
    if common.out.is_some() {
        write(&common.out_dir()?.join("flops.csv"), &csv)?;
    }
    print!("{csv}");
    Ok(())
}

fn gradcheck_cmd(common: &Common) -> Result<bool> {
    let seed = common.seed.unwrap_or(0);
    let mut reports: Vec<GradReport> = primitive_suite(seed)?;
    reports.push(full_graph_gradcheck(&ModelConfig::desk(), seed, Probe::Sample(4))?);
    let mut csv = String::from("op,max_rel_err,status\n");
    for r in &reports {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{:<26} {:>12} {status}", r.name, fmt6(r.max_rel_err));
        csv.push_str(&format!("{},{},{status}\n", r.name, fmt6(r.max_rel_err)));
    }
    if common.out.is_some() {
        write(&common.out_dir()?.join("gradcheck.csv"), &csv)?;
    }
    Ok(reports.iter().all(|r| r.passed))
}

fn genbench_cmd(common: &Common) -> Result<()> {
    let cfg = common.run_config()?;
    let out = common.out_dir()?;
    let (train, eval) = train_eval_split(&cfg.bench, cfg.train_sequences, cfg.eval_sequences, cfg.train.seed)?;
    for (split, records) in [("train", &train), ("eval", &eval)] {
        for rec in records {
            persist::write_sequence(&out.join(split).join(&rec.name), rec)?;
        }
    }
    write(&out.join("config.txt"), &cfg.to_text())?;
    println!("wrote {} training and {} held-out sequences to {}", train.len(), eval.len(), out.display());
    Ok(())
}

fn run(command: &Command, common: &Common) -> Result<bool> {
    match command {
        Command::Train { data } => train_cmd(common, data)?,
        Command::Track {
            checkpoint,
            input,
            overlays,
        } => track_cmd(common, checkpoint, input, *overlays)?,
        Command::Eval {
            input,
            checkpoint,
            boxes,
        } => eval_cmd(common, input, checkpoint, boxes)?,
        Command::Ablate { table } => ablate_cmd(common, *table)?,
        Command::Flops { full_size } => flops_cmd(common, *full_size)?,
        Command::Gradcheck => return gradcheck_cmd(common),
        Command::Genbench => genbench_cmd(common)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command, &cli.common) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: some gradient checks failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
