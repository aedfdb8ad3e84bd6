//! Synthetic videos with known statistics, and the closed-form noise
//! predictor for i.i.d. standard-normal frames.

use rand::Rng;

use crate::diffusion::VarianceSchedule;
use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::rng::standard_normal;
use crate::stream::NoisePredictor;
use crate::tensor::Tensor;

/// Per-pixel AR(1) source: `x_i = rho·x_{i-1} + sqrt(1 - rho²)·w`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ar1Params {
    pub rho: f64,
    /// `[C, H, W]`
    pub frame_shape: [usize; 3],
}

pub fn gen_ar1_video<R: Rng + ?Sized>(params: &Ar1Params, length: usize, rng: &mut R) -> Result<Vec<Tensor<f32>>> {
    if !(0.0..1.0).contains(&params.rho) {
        return Err(Error::Config(format!("rho must lie in [0, 1), got {}", params.rho)));
    }
    if length == 0 {
        return Err(Error::Config("video length must be at least 1".into()));
    }
    let n: usize = params.frame_shape.iter().product();
    let innov = (1.0 - params.rho * params.rho).sqrt();
    let mut state: Vec<f64> = (0..n).map(|_| standard_normal(rng)).collect();
    let mut frames = Vec::with_capacity(length);
    for i in 0..length {
        if i > 0 {
            for x in &mut state {
                *x = params.rho * *x + innov * standard_normal(rng);
            }
        }
        frames.push(Tensor::from_vec(params.frame_shape.to_vec(), state.iter().map(|&x| x as f32).collect())?);
    }
    Ok(frames)
}

/// A vertical bright bar translating horizontally with wraparound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MovingBarParams {
    pub frame_shape: [usize; 3],
    pub bar_width: usize,
    /// Pixels per frame; negative moves left.
    pub velocity: i64,
    pub phase: i64,
}

pub fn gen_moving_bar_video(params: &MovingBarParams, length: usize) -> Vec<Tensor<f32>> {
    let [c, h, w] = params.frame_shape;
    (0..length)
        .map(|t| {
            let start = (params.phase + params.velocity * t as i64).rem_euclid(w as i64) as usize;
            let mut data = vec![0.0f32; c * h * w];
            for ch in 0..c {
                for y in 0..h {
                    for k in 0..params.bar_width.min(w) {
                        data[ch * h * w + y * w + (start + k) % w] = 1.0;
                    }
                }
            }
            Tensor::from_vec(params.frame_shape.to_vec(), data).expect("frame shape")
        })
        .collect()
}

/// Bayes-optimal noise prediction for N(0, 1) data: `sqrt(1 - ab(t))·z_t`.
pub fn analytic_eps<T: Scalar>(z_t: &Tensor<T>, t: f64, schedule: &VarianceSchedule) -> Result<Tensor<T>> {
    if t <= 0.0 {
        return Err(Error::Range(format!("noise is undefined at level {t}")));
    }
    let ab = schedule.alpha_bar_at(t)?;
    Ok(z_t.scaled(T::from_f64((1.0 - ab).sqrt())))
}

/// [`analytic_eps`] behind the denoiser interface. Ignores the reference.
#[derive(Debug, Clone)]
pub struct AnalyticOracle {
    schedule: VarianceSchedule,
}

impl AnalyticOracle {
    pub fn new(schedule: VarianceSchedule) -> Self {
        Self { schedule }
    }
}

impl NoisePredictor for AnalyticOracle {
    fn predict_noise(&self, window: &Tensor<f32>, levels: &[f64], _reference: &Tensor<f32>) -> Result<Tensor<f32>> {
        if window.shape()[0] != levels.len() {
            return Err(crate::error::shape_err!("{} frames but {} levels", window.shape()[0], levels.len()));
        }
        let frames: Result<Vec<Tensor<f32>>> =
            levels.iter().enumerate().map(|(i, &t)| analytic_eps(&window.index_first(i)?, t, &self.schedule)).collect();
        Tensor::stack(&frames?)
    }
}

/// Predicted per-pixel variance of a frame carried by the oracle along
/// `trajectory` (descending levels), starting from unit variance.
pub fn oracle_trajectory_variance(trajectory: &[f64], schedule: &VarianceSchedule) -> Result<f64> {
    let mut var = 1.0;
    for w in trajectory.windows(2) {
        let ab_from = schedule.alpha_bar_at(w[0])?;
        let ab_to = schedule.alpha_bar_at(w[1])?;
        let c = crate::diffusion::oracle_contraction(ab_to, ab_from);
        var *= c * c;
    }
    Ok(var)
}
