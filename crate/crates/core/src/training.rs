//! Training-time noise levels, window assembly, the epsilon-prediction loss
//! and the optimization loop.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::diffusion::{forward_noise, VarianceSchedule};
use crate::error::{Error, Result};
use crate::model::{AdaBovDenoiser, DenoiserConfig, ForwardOptions};
use crate::num::Scalar;
use crate::rng::{normal_tensor, standard_normal, SeedStreams, Stream};
use crate::synthetic::{gen_ar1_video, Ar1Params};
use crate::tensor::{grad_check, Adam, AdamConfig, GradCheckOptions, GradCheckReport, Graph, Tensor, Var};

/// Relative size of the disturbance in units of the grid spacing `T/L`.
pub const DISTURBANCE_SCALE: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScheduleKind {
    /// `[T/L, 2T/L, ..., T]`.
    Progressive,
    /// i.i.d. `U(1, T)` per slot.
    Random,
    /// Progressive plus `0.4·N(0,1)·T/L` per slot, clamped to `[1, T]`.
    DisturbanceAugmented,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "progressive" => Ok(Self::Progressive),
            "random" => Ok(Self::Random),
            "dist-aug" | "disturbance-augmented" => Ok(Self::DisturbanceAugmented),
            other => Err(Error::Config(format!("unknown schedule '{other}' (progressive|random|dist-aug)"))),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Progressive => "progressive",
            Self::Random => "random",
            Self::DisturbanceAugmented => "dist-aug",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseLevelVector {
    pub levels: Vec<f64>,
    pub kind: ScheduleKind,
}

pub fn sample_training_levels<R: Rng + ?Sized>(
    kind: ScheduleKind,
    window: usize,
    t_max: usize,
    rng: &mut R,
) -> Result<NoiseLevelVector> {
    if window == 0 || t_max == 0 {
        return Err(Error::Config(format!("need L >= 1 and T >= 1, got L={window}, T={t_max}")));
    }
    let t = t_max as f64;
    let grid = (1..=window).map(|i| (i * t_max) as f64 / window as f64);
    let levels = match kind {
        ScheduleKind::Progressive => grid.collect(),
        ScheduleKind::Random => (0..window).map(|_| rng.gen_range(1.0..=t)).collect(),
        ScheduleKind::DisturbanceAugmented => {
            let spread = DISTURBANCE_SCALE * t / window as f64;
            grid.map(|g| (g + spread * standard_normal(rng)).clamp(1.0, t)).collect()
        }
    };
    Ok(NoiseLevelVector { levels, kind })
}

/// One training window.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch<T> {
    pub start: usize,
    /// Clean frame preceding the window, `[C, H, W]`.
    pub reference: Tensor<T>,
    /// Clean targets, `[L, C, H, W]`.
    pub targets: Tensor<T>,
    /// Targets noised at `levels`.
    pub noised: Tensor<T>,
    pub eps: Tensor<T>,
    pub levels: NoiseLevelVector,
}

/// Window starting at `start` with levels drawn from `kind`.
pub fn make_batch<T: Scalar, R1: Rng + ?Sized, R2: Rng + ?Sized>(
    video: &[Tensor<T>],
    start: usize,
    window: usize,
    kind: ScheduleKind,
    level_rng: &mut R1,
    eps_rng: &mut R2,
    schedule: &VarianceSchedule,
) -> Result<TrainingBatch<T>> {
    check_span(video, start, window)?;
    let levels = sample_training_levels(kind, window, schedule.t_max(), level_rng)?;
    make_batch_with_levels(video, start, levels, eps_rng, schedule)
}

/// As [`make_batch`] but with explicit levels (any value in `[0, T]`).
pub fn make_batch_with_levels<T: Scalar, R: Rng + ?Sized>(
    video: &[Tensor<T>],
    start: usize,
    levels: NoiseLevelVector,
    eps_rng: &mut R,
    schedule: &VarianceSchedule,
) -> Result<TrainingBatch<T>> {
    let l = levels.levels.len();
    check_span(video, start, l)?;
    let shape = video[start].shape().to_vec();
    let mut targets = Vec::with_capacity(l);
    let mut noised = Vec::with_capacity(l);
    let mut eps = Vec::with_capacity(l);
    for (i, &t) in levels.levels.iter().enumerate() {
        let x0 = &video[start + 1 + i];
        if x0.shape() != shape {
            return Err(Error::Data(format!("frame {} has shape {:?}, expected {shape:?}", start + 1 + i, x0.shape())));
        }
        let e: Tensor<T> = normal_tensor(&shape, eps_rng);
        noised.push(forward_noise(x0, t, &e, schedule)?);
        targets.push(x0.clone());
        eps.push(e);
    }
    Ok(TrainingBatch {
        start,
        reference: video[start].clone(),
        targets: Tensor::stack(&targets)?,
        noised: Tensor::stack(&noised)?,
        eps: Tensor::stack(&eps)?,
        levels,
    })
}

fn check_span<T>(video: &[Tensor<T>], start: usize, window: usize) -> Result<()> {
    if start + window >= video.len() {
        return Err(Error::Data(format!(
            "window of {} frames plus reference from index {start} needs {} frames, video has {}",
            window,
            start + window + 1,
            video.len()
        )));
    }
    Ok(())
}

/// Mean squared error between the prediction and the true noise, on the tape.
/// Only the `L` noisy slots contribute; the reference is conditioning.
pub fn loss_on_tape<T: Scalar>(
    g: &mut Graph<T>,
    p: &[Var],
    model: &AdaBovDenoiser<T>,
    batch: &TrainingBatch<T>,
) -> Result<Var> {
    let f = model.forward(g, p, &batch.noised, &batch.levels.levels, &batch.reference, ForwardOptions::default())?;
    let eps = g.constant(batch.eps.clone());
    let diff = g.sub(f.eps, eps)?;
    let sq = g.mul(diff, diff)?;
    g.mean_all(sq)
}

pub fn training_loss<T: Scalar>(model: &AdaBovDenoiser<T>, batch: &TrainingBatch<T>) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, false);
    let loss = loss_on_tape(&mut g, &p, model, batch)?;
    let v = g.value(loss).data()[0].to_f64();
    if !v.is_finite() {
        return Err(Error::Numerics(format!("training loss is {v}")));
    }
    Ok(v)
}

/// Loss and per-parameter gradients for one batch.
pub fn loss_and_grads<T: Scalar>(model: &AdaBovDenoiser<T>, batch: &TrainingBatch<T>) -> Result<(f64, Vec<Vec<T>>)> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, true);
    let loss = loss_on_tape(&mut g, &p, model, batch)?;
    g.backward(loss)?;
    let v = g.value(loss).data()[0].to_f64();
    if !v.is_finite() {
        return Err(Error::Numerics(format!("training loss is {v}")));
    }
    let grads = p
        .iter()
        .map(|&v| g.grad(v).map(<[T]>::to_vec).ok_or_else(|| Error::Internal("parameter without gradient".into())))
        .collect::<Result<_>>()?;
    Ok((v, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub kind: ScheduleKind,
    /// Windows averaged per optimizer step.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            kind: ScheduleKind::DisturbanceAugmented,
            batch_size: 1,
            adam: AdamConfig::default(),
            seed: 42,
        }
    }
}

/// Train on random windows of `video`; returns the loss of every step.
pub fn train<T: Scalar>(model: &mut AdaBovDenoiser<T>, video: &[Tensor<T>], cfg: &TrainConfig) -> Result<Vec<f64>> {
    train_with(model, video, cfg, |_, _| {})
}

/// [`train`] with a callback after every step (`step`, `loss`).
pub fn train_with<T: Scalar>(
    model: &mut AdaBovDenoiser<T>,
    video: &[Tensor<T>],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("steps and batch size must be at least 1".into()));
    }
    let l = model.config().window;
    check_span(video, 0, l)?;
    let schedule = VarianceSchedule::standard();
    let streams = SeedStreams::new(cfg.seed);
    let mut level_rng = streams.stream(Stream::ScheduleLevels);
    let mut eps_rng = streams.stream(Stream::TrainEps);
    let mut window_rng = streams.stream(Stream::BatchWindow);
    let mut opt = Adam::new(cfg.adam);
    let last_start = video.len() - l - 1;
    let inv = T::from_f64(1.0 / cfg.batch_size as f64);

    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut total = 0.0;
        let mut acc: Option<Vec<Vec<T>>> = None;
        for _ in 0..cfg.batch_size {
            let start = window_rng.gen_range(0..=last_start);
            let batch = make_batch(video, start, l, cfg.kind, &mut level_rng, &mut eps_rng, &schedule)?;
            let (loss, grads) = loss_and_grads(model, &batch)?;
            total += loss;
            match &mut acc {
                None => acc = Some(grads),
                Some(a) => {
                    for (x, y) in a.iter_mut().zip(grads) {
                        for (u, v) in x.iter_mut().zip(y) {
                            *u += v;
                        }
                    }
                }
            }
        }
        let mut grads = acc.expect("batch_size >= 1");
        if cfg.batch_size > 1 {
            grads.iter_mut().flatten().for_each(|x| *x *= inv);
        }
        let grad_refs: Vec<&[T]> = grads.iter().map(Vec::as_slice).collect();
        let mut params: Vec<&mut Tensor<T>> = model.params_mut().tensors_mut().collect();
        opt.step(&mut params, &grad_refs)?;
        let loss = total / cfg.batch_size as f64;
        on_step(step, loss);
        history.push(loss);
    }
    Ok(history)
}

/// Two-frame window of 4x4 frames, hidden 16: small enough for dense
/// finite differences over every parameter tensor.
pub fn grad_check_config() -> DenoiserConfig {
    DenoiserConfig { frame_h: 4, frame_w: 4, hidden: 16, depth: 2, heads: 2, window: 2, ..Default::default() }
}

/// Finite-difference check of the training loss against the tape, over all
/// parameters of a randomly perturbed 64-bit model.
pub fn model_grad_check(seed: u64, tol: f64, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let cfg = grad_check_config();
    let mut model = AdaBovDenoiser::<f64>::new(cfg, seed)?;
    // move every tensor off its initial value so zero-initialized layers
    // still pass gradient to everything upstream
    model.perturb(seed ^ 0x5eed, 0.3, |_| true);
    let streams = SeedStreams::new(seed);
    let video = gen_ar1_video(
        &Ar1Params { rho: 0.9, frame_shape: cfg.frame_shape() },
        cfg.window + 1,
        &mut streams.stream(Stream::Data),
    )?;
    let video: Vec<Tensor<f64>> = video.iter().map(Tensor::cast).collect();
    let batch = make_batch(
        &video,
        0,
        cfg.window,
        ScheduleKind::Random,
        &mut streams.stream(Stream::ScheduleLevels),
        &mut streams.stream(Stream::TrainEps),
        &VarianceSchedule::standard(),
    )?;
    let inputs: Vec<Tensor<f64>> = model.params().iter().map(|(_, t)| t.clone()).collect();
    grad_check(|g, p| loss_on_tape(g, p, &model, &batch), &inputs, tol, opts)
}
