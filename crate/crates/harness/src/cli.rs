//! Command-line driver. Every command except `inspect` writes
//! `OUT/report.json`; `inspect` prints its report to stdout.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use gridit::eval::EvalReport;
use gridit::voldenoise::{DenoiseMode, NoisyVolume, DEFAULT_T_STAR};
use gridit::Sequence;
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::dataset::synth_dataset;
use crate::error::{HarnessError, Result};
use crate::io::{load_frame_folder, load_sequences, read_json, save_sequence, write_json};
use crate::pipeline::{self, Metric};

#[derive(Debug, Parser)]
#[command(name = "gridit", version, about = "Grid-factorized image-sequence diffusion")]
pub struct Cli {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Literal,
    Sdedit,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset as frame folders.
    Dataset,
    /// Train the grid model.
    TrainStage1 {
        /// Frame folders (default: synthesize from the config).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        train_steps: Option<usize>,
    },
    /// Train the per-frame super-resolution model.
    TrainStage2 {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        train_steps: Option<usize>,
    },
    /// Sample a sequence with the grid model, optionally refined by stage 2.
    Sample {
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        stage2: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        control_rows: Option<usize>,
        /// Sampling steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Super-resolve every frame of a folder.
    Sr {
        #[arg(long)]
        stage2: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        scale: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Denoise a frame volume with the grid model.
    Denoise {
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        stage2: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        tstar: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// Add Gaussian noise of this std (0–255 scale) before denoising.
        #[arg(long)]
        add_noise: Option<f64>,
    },
    /// Compute a metric over frame folders.
    Eval {
        #[arg(long, value_enum)]
        metric: Metric,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Print a checkpoint's configuration and tensor table.
    Inspect { checkpoint: PathBuf },
}

#[derive(Serialize)]
struct RunReport<'a> {
    command: &'a str,
    config_digest: String,
    config: &'a RunConfig,
    outputs: Vec<String>,
    result: serde_json::Value,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &cli.config {
        Some(p) => read_json(p).map_err(|e| HarnessError::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.dataset.seed = s;
    }
    match &cli.command {
        Command::TrainStage1 { train_steps: Some(n), .. } => cfg.train_stage1.steps = *n,
        Command::TrainStage2 { train_steps: Some(n), .. } => cfg.train_stage2.steps = *n,
        Command::Sample { iterations, grid, control_rows, steps, .. } => {
            if let Some(n) = iterations {
                cfg.plan.iterations = *n;
            }
            if let Some(k) = grid {
                cfg.plan.k = *k;
                cfg.stage1.grid_k = *k;
            }
            if let Some(r) = control_rows {
                cfg.plan.control_rows = *r;
            }
            if let Some(s) = steps {
                cfg.plan.sample_steps = *s;
            }
        }
        Command::Sr { scale, steps, .. } => {
            if let Some(s) = scale {
                cfg.sr.scale = *s;
            }
            if let Some(s) = steps {
                cfg.sr.sample_steps = *s;
            }
        }
        Command::Denoise { mode, tstar, steps, add_noise, .. } => {
            let t_star = match (tstar, cfg.denoise.mode) {
                (Some(t), _) => *t,
                (None, DenoiseMode::Sdedit { t_star }) => t_star,
                (None, DenoiseMode::Literal) => DEFAULT_T_STAR,
            };
            cfg.denoise.mode = match (mode, cfg.denoise.mode) {
                (Some(ModeArg::Literal), _) => DenoiseMode::Literal,
                (Some(ModeArg::Sdedit), _) | (None, DenoiseMode::Sdedit { .. }) => DenoiseMode::Sdedit { t_star },
                (None, DenoiseMode::Literal) => DenoiseMode::Literal,
            };
            if let Some(s) = steps {
                cfg.denoise.sample_steps = *s;
            }
            if let Some(s) = add_noise {
                cfg.denoise.noise_std = *s;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_role(path: &Path, role: &str) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if ck.meta.role != role {
        return Err(HarnessError::Usage(format!("{} holds a {} model, expected {role}", path.display(), ck.meta.role)));
    }
    Ok(ck)
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

fn dataset_or_synth(cfg: &RunConfig, data: &Option<PathBuf>) -> Result<Vec<Sequence>> {
    match data {
        Some(d) => load_sequences(d),
        None => synth_dataset(&cfg.dataset),
    }
}

fn path_string(p: &Path) -> String {
    p.display().to_string()
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(HarnessError::Usage("--workers must be positive".into()));
        }
        if rayon::ThreadPoolBuilder::new().num_threads(w).build_global().is_err() {
            log::warn!("worker pool already initialized; --workers ignored");
        }
    }
    if let Command::Inspect { checkpoint } = &cli.command {
        let ck = load_checkpoint(checkpoint)?;
        let tensors: Vec<serde_json::Value> =
            ck.model.params.named_tensors().into_iter().map(|(n, t)| json!({ "name": n, "shape": t.shape })).collect();
        let report = json!({
            "command": "inspect",
            "checkpoint": path_string(checkpoint),
            "role": ck.meta.role,
            "model": ck.meta.model,
            "schedule": ck.sched.params,
            "num_params": ck.model.num_params(),
            "tensors": tensors,
        });
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }

    let cfg = resolve_config(&cli)?;
    let out = &cli.out;
    create_out(out)?;
    let mut outputs = Vec::new();
    let (name, result) = match &cli.command {
        Command::Dataset => {
            let seqs = synth_dataset(&cfg.dataset)?;
            for (i, s) in seqs.iter().enumerate() {
                let dir = out.join(format!("seq_{i:05}"));
                save_sequence(s, &dir)?;
                outputs.push(path_string(&dir));
            }
            ("dataset", json!({ "sequences": seqs.len(), "frames_per_sequence": cfg.dataset.n_frames }))
        }
        Command::TrainStage1 { data, .. } => {
            let seqs = dataset_or_synth(&cfg, data)?;
            let (model, report) = pipeline::train_stage1(&cfg, &seqs)?;
            let path = out.join("stage1.grdt");
            save_checkpoint(&model, "stage1", &cfg.schedule, &path)?;
            outputs.push(path_string(&path));
            ("train-stage1", json!({ "num_params": model.num_params(), "training": report }))
        }
        Command::TrainStage2 { data, .. } => {
            let seqs = dataset_or_synth(&cfg, data)?;
            let (model, report) = pipeline::train_stage2(&cfg, &seqs)?;
            let path = out.join("stage2.grdt");
            save_checkpoint(&model, "stage2", &cfg.schedule, &path)?;
            outputs.push(path_string(&path));
            ("train-stage2", json!({ "num_params": model.num_params(), "training": report }))
        }
        Command::Sample { stage1, stage2, .. } => {
            let s1 = load_role(stage1, "stage1")?;
            let coarse = pipeline::sample_sequence(&cfg, &s1.model)?;
            let seq = pipeline::clamp_sequence(&coarse)?;
            let dir = out.join("frames");
            save_sequence(&seq, &dir)?;
            outputs.push(path_string(&dir));
            if let Some(p) = stage2 {
                let s2 = load_role(p, "stage2")?;
                let fine = pipeline::super_resolve_sequence(&cfg, &s2.model, &seq)?;
                let dir = out.join("refined");
                save_sequence(&fine, &dir)?;
                outputs.push(path_string(&dir));
            }
            ("sample", json!({ "length": seq.len(), "provenance": coarse.provenance }))
        }
        Command::Sr { stage2, input, .. } => {
            let s2 = load_role(stage2, "stage2")?;
            let seq = load_frame_folder(input, None)?;
            let fine = pipeline::super_resolve_sequence(&cfg, &s2.model, &seq)?;
            let dir = out.join("frames");
            save_sequence(&fine, &dir)?;
            outputs.push(path_string(&dir));
            ("sr", json!({ "frames": fine.len(), "frame_shape": fine.frame_shape() }))
        }
        Command::Denoise { stage1, stage2, input, add_noise, .. } => {
            let s1 = load_role(stage1, "stage1")?;
            let s2 = stage2.as_deref().map(|p| load_role(p, "stage2")).transpose()?;
            let seq = load_frame_folder(input, None)?;
            let vol = match add_noise {
                Some(_) => pipeline::add_noise(&seq, cfg.denoise.noise_std, cfg.seed)?,
                None => NoisyVolume::new(seq, None),
            };
            if add_noise.is_some() {
                let dir = out.join("noisy");
                save_sequence(&vol.frames, &dir)?;
                outputs.push(path_string(&dir));
            }
            let clean = pipeline::denoise(&cfg, &s1.model, s2.as_ref().map(|c| &c.model), &vol)?;
            let dir = out.join("frames");
            save_sequence(&clean, &dir)?;
            outputs.push(path_string(&dir));
            ("denoise", json!({ "frames": clean.len(), "mode": cfg.denoise.mode }))
        }
        Command::Eval { metric, input, reference } => {
            let a = load_sequences(input)?;
            let b = reference.as_deref().map(load_sequences).transpose()?;
            let (value, n) = pipeline::evaluate(*metric, &a, b.as_deref())?;
            let name = serde_json::to_value(metric)?.as_str().unwrap_or_default().to_string();
            ("eval", serde_json::to_value(EvalReport::new(&name, value, n, cfg.digest()))?)
        }
        Command::Inspect { .. } => unreachable!("handled above"),
    };
    let report = RunReport { command: name, config_digest: cfg.digest(), config: &cfg, outputs, result };
    let path = out.join("report.json");
    write_json(&path, &report)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

/// Parses `argv` and runs it, returning the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
