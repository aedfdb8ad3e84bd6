//! Stream denoising with `n` substeps per autoregressive iteration.
//!
//! The window holds `L` frames at strictly increasing noise levels. Each
//! substep runs the denoiser once over the whole window and moves every frame
//! down by `T / (n·L)`. After `n` substeps the first frame is clean; it is
//! emitted, becomes the reference for the next iteration, and a pure-noise
//! frame enters at level `T` on the right.

use rand_chacha::ChaCha8Rng;

use crate::diffusion::{ddim_step, forward_noise, grid_level, VarianceSchedule};
use crate::error::{Error, Result};
use crate::model::AdaBovDenoiser;
use crate::rng::{normal_tensor, SeedStreams, Stream};
use crate::tensor::Tensor;

/// Anything that predicts per-frame noise for a window.
pub trait NoisePredictor {
    /// `window` is `[L, C, H, W]`, `levels[m]` is the level of frame `m`.
    fn predict_noise(&self, window: &Tensor<f32>, levels: &[f64], reference: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl NoisePredictor for AdaBovDenoiser<f32> {
    fn predict_noise(&self, window: &Tensor<f32>, levels: &[f64], reference: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.predict(window, levels, reference)
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn predict_noise(&self, window: &Tensor<f32>, levels: &[f64], reference: &Tensor<f32>) -> Result<Tensor<f32>> {
        (**self).predict_noise(window, levels, reference)
    }
}

/// A frame travelling through the window.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFrame {
    pub index: usize,
    pub data: Tensor<f32>,
    /// Every level this frame has occupied, in order.
    pub trajectory: Vec<f64>,
    /// Denoiser-conditioned updates applied so far.
    pub updates: usize,
}

/// The latest clean frame; its level is 0 by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceFrame {
    pub index: usize,
    pub data: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameWindow {
    frames: Vec<LatentFrame>,
    /// Level of each slot as an index into the `n·L`-step grid.
    grid_index: Vec<usize>,
}

impl FrameWindow {
    pub fn frames(&self) -> &[LatentFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationConfig {
    /// Attention window `L`.
    pub window: usize,
    /// Substeps per iteration `n`.
    pub substeps: usize,
    /// Frames to generate `K`.
    pub frames: usize,
    pub seed: u64,
    pub bov_enabled: bool,
    /// Multiplier on every injected noise draw. 1 in normal use.
    pub noise_scale: f32,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { window: 8, substeps: 4, frames: 16, seed: 42, bov_enabled: true, noise_scale: 1.0 }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.substeps == 0 || self.frames == 0 {
            return Err(Error::Config(format!("L, n and K must all be at least 1: {self:?}")));
        }
        Ok(())
    }
}

/// Full autoregressive state.
#[derive(Debug, Clone)]
pub struct StreamState {
    window: FrameWindow,
    reference: ReferenceFrame,
    iteration: usize,
    substep: usize,
    config: GenerationConfig,
    schedule: VarianceSchedule,
    rng: ChaCha8Rng,
    emitted: usize,
    evals: usize,
}

impl StreamState {
    pub fn window(&self) -> &FrameWindow {
        &self.window
    }

    pub fn reference(&self) -> &ReferenceFrame {
        &self.reference
    }

    /// Current iteration `k` (starts at 1).
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn substep_count(&self) -> usize {
        self.substep
    }

    pub fn emitted(&self) -> usize {
        self.emitted
    }

    /// Denoiser evaluations so far.
    pub fn evals(&self) -> usize {
        self.evals
    }

    pub fn config(&self) -> &GenerationConfig {
        &self.config
    }

    pub fn schedule(&self) -> &VarianceSchedule {
        &self.schedule
    }

    fn level(&self, g: usize) -> f64 {
        grid_level(self.schedule.t_max(), self.config.window, self.config.substeps, g)
    }

    pub fn levels(&self) -> Vec<f64> {
        self.window.grid_index.iter().map(|&g| self.level(g)).collect()
    }

    fn draw_noise(&mut self, shape: &[usize]) -> Tensor<f32> {
        let eps: Tensor<f32> = normal_tensor(shape, &mut self.rng);
        if self.config.noise_scale == 1.0 {
            eps
        } else {
            eps.scaled(self.config.noise_scale)
        }
    }
}

/// `L + 1` copies of one frame, for starting without real conditioning.
pub fn self_start_frames(seed_frame: &Tensor<f32>, window: usize) -> Vec<Tensor<f32>> {
    vec![seed_frame.clone(); window + 1]
}

/// Place `z_0 .. z_L` on the progressive grid: `z_0` becomes the reference and
/// `z_m` is noised to level `m·T/L`.
pub fn init_stream(
    initial: &[Tensor<f32>],
    config: GenerationConfig,
    schedule: VarianceSchedule,
) -> Result<StreamState> {
    config.validate()?;
    let l = config.window;
    if initial.len() != l + 1 {
        return Err(Error::Config(format!("need {} conditioning frames (L + 1), got {}", l + 1, initial.len())));
    }
    let shape = initial[0].shape().to_vec();
    if initial.iter().any(|f| f.shape() != shape) {
        return Err(Error::Config("conditioning frames differ in shape".into()));
    }
    let streams = SeedStreams::new(config.seed);
    let mut init_rng = streams.stream(Stream::InitNoise);
    let n = config.substeps;
    let mut frames = Vec::with_capacity(l);
    let mut grid_index = Vec::with_capacity(l);
    for (m, z) in initial[1..].iter().enumerate() {
        let g = (m + 1) * n;
        let level = grid_level(schedule.t_max(), l, n, g);
        let mut eps: Tensor<f32> = normal_tensor(&shape, &mut init_rng);
        if config.noise_scale != 1.0 {
            eps = eps.scaled(config.noise_scale);
        }
        let data = forward_noise(z, level, &eps, &schedule)?;
        frames.push(LatentFrame { index: m + 1, data, trajectory: vec![level], updates: 0 });
        grid_index.push(g);
    }
    Ok(StreamState {
        window: FrameWindow { frames, grid_index },
        reference: ReferenceFrame { index: 0, data: initial[0].clone() },
        iteration: 1,
        substep: 0,
        config,
        schedule,
        rng: streams.stream(Stream::AppendNoise),
        emitted: 0,
        evals: 0,
    })
}

/// One denoiser pass over the window, lowering every level by `T/(n·L)`.
pub fn substep<P: NoisePredictor + ?Sized>(state: &mut StreamState, model: &P) -> Result<()> {
    if state.substep >= state.config.substeps {
        return Err(Error::Internal(format!(
            "substep {} requested but only {} per iteration",
            state.substep + 1,
            state.config.substeps
        )));
    }
    if state.window.grid_index.contains(&0) {
        return Err(Error::Internal("a window frame is already at level 0".into()));
    }
    let levels = state.levels();
    let stacked = Tensor::stack(&state.window.frames.iter().map(|f| f.data.clone()).collect::<Vec<_>>())?;
    let eps = model.predict_noise(&stacked, &levels, &state.reference.data)?;
    state.evals += 1;
    for m in 0..state.window.len() {
        let g = state.window.grid_index[m] - 1;
        let to = state.level(g);
        let eps_m = eps.index_first(m)?;
        let frame = &mut state.window.frames[m];
        frame.data = ddim_step(&frame.data, &eps_m, levels[m], to, &state.schedule)?;
        frame.trajectory.push(to);
        frame.updates += 1;
        state.window.grid_index[m] = g;
    }
    state.substep += 1;
    Ok(())
}

/// Run `n` substeps, emit the now-clean first frame, and slide the window.
pub fn iterate<P: NoisePredictor + ?Sized>(state: &mut StreamState, model: &P) -> Result<LatentFrame> {
    if state.substep != 0 {
        return Err(Error::Internal(format!("iterate called mid-iteration at substep {}", state.substep)));
    }
    for _ in 0..state.config.substeps {
        substep(state, model)?;
    }
    if state.window.grid_index[0] != 0 {
        return Err(Error::Internal("first frame is not clean after n substeps".into()));
    }
    let clean = state.window.frames.remove(0);
    state.window.grid_index.remove(0);
    state.reference = ReferenceFrame { index: clean.index, data: clean.data.clone() };

    let l = state.config.window;
    let top = l * state.config.substeps;
    let noise = state.draw_noise(clean.data.shape());
    let t_max = state.level(top);
    state.window.frames.push(LatentFrame {
        index: state.iteration + l,
        data: noise,
        trajectory: vec![t_max],
        updates: 0,
    });
    state.window.grid_index.push(top);
    state.iteration += 1;
    state.substep = 0;
    state.emitted += 1;
    Ok(clean)
}

/// Generate `k` clean frames.
pub fn run<P: NoisePredictor + ?Sized>(state: &mut StreamState, model: &P, k: usize) -> Result<Vec<LatentFrame>> {
    (0..k).map(|_| iterate(state, model)).collect()
}
