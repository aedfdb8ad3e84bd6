//! Command-line entry points.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::{attention_dominated_config, bench, bench_csv, thread_cap};
use crate::diffusion::VarianceSchedule;
use crate::error::{Error, Result};
use crate::io::frames::{encode_flt1, frame_stem, list_frames, manifest_csv, read_flt1, write_pgm};
use crate::io::metrics::{eval_csv, frame_stats, loss_csv};
use crate::io::{load_checkpoint, save_checkpoint, DataSource, RunConfig};
use crate::model::AdaBovDenoiser;
use crate::rng::{SeedStreams, Stream};
use crate::stream::{init_stream, iterate, self_start_frames, NoisePredictor};
use crate::synthetic::{
    gen_ar1_video, gen_moving_bar_video, oracle_trajectory_variance, AnalyticOracle, Ar1Params, MovingBarParams,
};
use crate::tensor::{GradCheckOptions, Tensor};
use crate::training::{model_grad_check, train_with, ScheduleKind};

#[derive(Debug, Parser)]
#[command(name = "abov", version, about = "Streaming video diffusion with a reference-conditioned denoiser")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a denoiser on synthetic video and write a checkpoint.
    Train(TrainArgs),
    /// Generate frames from a checkpoint or the analytic oracle.
    Sample(SampleArgs),
    /// Time generation across window sizes and substep counts.
    Bench(BenchArgs),
    /// Summary statistics of a directory of frames.
    Eval(EvalArgs),
    /// Finite-difference check of every model gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub schedule: Option<ScheduleKind>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub data: Option<DataSource>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Defaults to `<out>.loss.csv`.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Export {
    Flt1,
    Pgm,
    Both,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long, conflicts_with = "oracle", required_unless_present = "oracle")]
    pub ckpt: Option<PathBuf>,
    /// Closed-form denoiser for standard-normal data.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub frames: Option<usize>,
    /// Substeps per iteration.
    #[arg(long)]
    pub n: Option<usize>,
    /// Window length.
    #[arg(long = "L")]
    pub window: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory of L + 1 FLT1 frames, or one FLT1 file of shape [L + 1, C, H, W].
    #[arg(long, conflicts_with = "self_start")]
    pub cond: Option<PathBuf>,
    /// Repeat one synthetic frame L + 1 times as conditioning.
    #[arg(long)]
    pub self_start: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "flt1")]
    pub export: Export,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long = "L", value_delimiter = ',', default_values_t = [8usize, 16])]
    pub windows: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 4])]
    pub n: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// CSV destination; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub frames: PathBuf,
    /// Add the closed-form oracle variance and keep only steady-state frames.
    #[arg(long)]
    pub oracle_stats: bool,
    /// Window length; read from `run.cfg` in the frame directory when absent.
    #[arg(long = "L")]
    pub window: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Probe every coordinate instead of a sample per tensor.
    #[arg(long)]
    pub all: bool,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Numerics(_) => 3,
        Error::CorruptCheckpoint(_) | Error::Version { .. } => 4,
        _ => 1,
    }
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn main_with<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(&a),
        Command::Sample(a) => cmd_sample(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    }
}

fn base_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Synthetic frames from the configured source, drawn from the data stream.
fn synthetic_video(cfg: &RunConfig, rho: f64, length: usize) -> Result<Vec<Tensor<f32>>> {
    let shape = cfg.model.frame_shape();
    match cfg.data {
        DataSource::Ar1 => {
            let mut rng = SeedStreams::new(cfg.seed).stream(Stream::Data);
            gen_ar1_video(&Ar1Params { rho, frame_shape: shape }, length, &mut rng)
        }
        DataSource::Bar => Ok(gen_moving_bar_video(
            &MovingBarParams { frame_shape: shape, bar_width: cfg.bar_width, velocity: cfg.bar_velocity, phase: 0 },
            length,
        )),
    }
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = base_config(a.config.as_deref())?;
    if let Some(s) = a.schedule {
        cfg.schedule = s;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(d) = a.data {
        cfg.data = d;
    }
    if let Some(lr) = a.lr {
        cfg.adam.lr = lr;
    }
    cfg.validate()?;
    let video = synthetic_video(&cfg, cfg.rho, cfg.video_len)?;
    let mut model = AdaBovDenoiser::<f32>::new(cfg.model, cfg.seed)?;
    let tc = cfg.training();
    let steps = tc.steps;
    let quiet = a.quiet;
    let history = train_with(&mut model, &video, &tc, |step, loss| {
        if !quiet && (step == 0 || (step + 1) % 50 == 0 || step + 1 == steps) {
            eprintln!("step {:>5}/{steps}  loss {loss:.6}", step + 1);
        }
    })?;
    save_checkpoint(&model, &a.out)?;
    let loss_path = a.loss_csv.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    write(&loss_path, loss_csv(&history))?;
    Ok(())
}

/// Conditioning frames from a directory or a stacked FLT1 file.
fn read_conditioning(path: &Path) -> Result<Vec<Tensor<f32>>> {
    if path.is_dir() {
        list_frames(path)?.iter().map(read_flt1).collect()
    } else {
        let t = read_flt1(path)?;
        if t.rank() != 4 {
            return Err(Error::Config(format!(
                "{}: expected a [L + 1, C, H, W] tensor, got {:?}",
                path.display(),
                t.shape()
            )));
        }
        (0..t.shape()[0]).map(|i| t.index_first(i)).collect()
    }
}

fn cmd_sample(a: &SampleArgs) -> Result<()> {
    let mut cfg = base_config(a.config.as_deref())?;
    let model = match &a.ckpt {
        Some(p) => {
            // a file that does not parse as a checkpoint is as corrupt as one failing its CRC
            let m = load_checkpoint(p).map_err(|e| match e {
                Error::Format(msg) => Error::CorruptCheckpoint(format!("{}: {msg}", p.display())),
                e => e,
            })?;
            let window = cfg.model.window;
            cfg.model = *m.config();
            cfg.model.window = window;
            Some(m)
        }
        None => None,
    };
    if let Some(k) = a.frames {
        cfg.frames = k;
    }
    if let Some(n) = a.n {
        cfg.substeps = n;
    }
    if let Some(l) = a.window {
        cfg.model.window = l;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let gen = cfg.generation();
    gen.validate()?;
    let l = gen.window;
    // the oracle is exact for i.i.d. standard-normal frames only
    let rho = if a.oracle { 0.0 } else { cfg.rho };
    let cond = if let Some(p) = &a.cond {
        read_conditioning(p)?
    } else if a.self_start {
        self_start_frames(&synthetic_video(&cfg, rho, 1)?[0], l)
    } else {
        synthetic_video(&cfg, rho, l + 1)?
    };
    if let Some(m) = &model {
        let want = m.config().frame_shape();
        if let Some(f) = cond.iter().find(|f| f.shape() != want) {
            return Err(Error::Config(format!(
                "conditioning frame {:?} does not match model frames {want:?}",
                f.shape()
            )));
        }
    }
    let schedule = VarianceSchedule::standard();
    let oracle = AnalyticOracle::new(schedule.clone());
    let predictor: &dyn NoisePredictor = match &model {
        Some(m) => m,
        None => &oracle,
    };
    let mut state = init_stream(&cond, gen, schedule.clone())?;

    fs::create_dir_all(&a.out)?;
    let mut manifest = Vec::with_capacity(gen.frames);
    let mut steady = Vec::new();
    let mut all = Vec::new();
    let mut predicted = Vec::new();
    for _ in 0..gen.frames {
        let f = iterate(&mut state, predictor)?;
        let bytes = encode_flt1(&f.data);
        manifest.push((f.index, crc32fast::hash(&bytes)));
        let stem = frame_stem(f.index);
        if a.export != Export::Pgm {
            write(&a.out.join(format!("{stem}.flt1")), &bytes)?;
        }
        if a.export != Export::Flt1 {
            write_pgm(a.out.join(format!("{stem}.pgm")), &f.data)?;
        }
        if f.index > l {
            if a.oracle {
                predicted.push(oracle_trajectory_variance(&f.trajectory, &schedule)?);
            }
            steady.push(f.data.clone());
        }
        all.push(f.data);
    }
    write(&a.out.join("manifest.csv"), manifest_csv(&manifest))?;

    let (frames, pred) = if steady.is_empty() { (&all, None) } else { (&steady, predicted.first().copied()) };
    let stats = frame_stats(frames)?;
    write(&a.out.join("metrics.csv"), eval_csv(&stats, pred))?;

    let mut run_cfg = cfg.to_text();
    let source = match &a.ckpt {
        Some(p) => format!("checkpoint {}", p.display()),
        None => "oracle".to_string(),
    };
    writeln!(run_cfg, "# denoiser: {source}").expect("writing to a String");
    writeln!(
        run_cfg,
        "# schedule: T = {}, beta linear {} .. {}",
        schedule.t_max(),
        schedule.beta(1),
        schedule.beta(schedule.t_max())
    )
    .expect("writing to a String");
    write(&a.out.join("run.cfg"), run_cfg)?;
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let model = AdaBovDenoiser::<f32>::new(attention_dominated_config(), a.seed)?;
    let rows = bench(&model, &a.windows, &a.n, a.frames, a.repeats, thread_cap(), a.seed)?;
    let csv = bench_csv(&rows);
    match &a.out {
        Some(p) => write(p, csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

/// Frame index encoded in a `frame_XXXXX.flt1` name.
fn frame_index(path: &Path) -> Option<usize> {
    path.file_stem()?.to_str()?.strip_prefix("frame_")?.parse().ok()
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let paths = list_frames(&a.frames)
        .map_err(|e| Error::Config(format!("cannot list frames in {}: {e}", a.frames.display())))?;
    if paths.is_empty() {
        return Err(Error::Config(format!("no frame_*.flt1 files in {}", a.frames.display())));
    }
    let (stats, predicted) = if a.oracle_stats {
        let saved = a.frames.join("run.cfg");
        let cfg = if saved.exists() { RunConfig::load(&saved)? } else { RunConfig::default() };
        let l = a.window.unwrap_or(cfg.model.window);
        let n = a.n.unwrap_or(cfg.substeps);
        if l == 0 || n == 0 {
            return Err(Error::Config("L and n must be at least 1".into()));
        }
        let schedule = VarianceSchedule::standard();
        let steps = n * l;
        let grid: Vec<f64> =
            (0..=steps).rev().map(|g| crate::diffusion::grid_level(schedule.t_max(), l, n, g)).collect();
        let predicted = oracle_trajectory_variance(&grid, &schedule)?;
        let frames: Vec<Tensor<f32>> =
            paths.iter().filter(|p| frame_index(p).is_some_and(|i| i > l)).map(read_flt1).collect::<Result<_>>()?;
        if frames.is_empty() {
            return Err(Error::Config(format!("no steady-state frames (index > {l}) in {}", a.frames.display())));
        }
        (frame_stats(&frames)?, Some(predicted))
    } else {
        let frames: Vec<Tensor<f32>> = paths.iter().map(read_flt1).collect::<Result<_>>()?;
        (frame_stats(&frames)?, None)
    };
    let csv = eval_csv(&stats, predicted);
    match &a.out {
        Some(p) => write(p, csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let opts =
        GradCheckOptions { coords_per_input: if a.all { usize::MAX } else { 8 }, seed: a.seed, ..Default::default() };
    let report = model_grad_check(a.seed, a.tol, opts)?;
    println!("max_rel_error = {:.3e} over {} coordinates (tol {:.0e})", report.max_rel_error, report.checked, a.tol);
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Numerics(format!("gradient mismatch at {:?}", report.worst)))
    }
}
