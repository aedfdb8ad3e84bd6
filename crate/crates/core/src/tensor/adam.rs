use super::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::num::Scalar;

/// Adam hyperparameters. `weight_decay` is the decoupled (AdamW) term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First and second moments, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub step_count: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub state: AdamState<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, state: AdamState { step_count: 0, m: Vec::new(), v: Vec::new() } }
    }

    /// One bias-corrected update of every parameter in place.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&[T]]) -> Result<()> {
        let c = self.config;
        if c.lr < 0.0 || !c.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", c.lr)));
        }
        if params.len() != grads.len() {
            return Err(shape_err!("{} parameters but {} gradients", params.len(), grads.len()));
        }
        if self.state.m.is_empty() {
            self.state.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.state.v = self.state.m.clone();
        }
        if self.state.m.len() != params.len() {
            return Err(shape_err!("optimizer state holds {} tensors, got {}", self.state.m.len(), params.len()));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.state.m) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(shape_err!("parameter of {} values, gradient of {}", p.len(), g.len()));
            }
        }
        self.state.step_count += 1;
        let t = self.state.step_count as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one, eps) = (T::one(), T::from_f64(c.eps));
        let lr = T::from_f64(c.lr);
        let decay = T::from_f64(c.lr * c.weight_decay);
        let (inv_bc1, inv_bc2) = (T::from_f64(1.0 / bc1), T::from_f64(1.0 / bc2));
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.state.m[i], &mut self.state.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = grads[i][j];
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mhat = m[j] * inv_bc1;
                let vhat = v[j] * inv_bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps) + decay * *w;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::<f64>::from_f64(vec![3], &[1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            opt.step(&mut [&mut p], &[&[0.0; 3]]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(opt.state.step_count, 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::<f64>::scalar(3.0);
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        opt.step(&mut [&mut p], &[&[1.0]]).unwrap();
        assert!((p.data()[0] - 2.9).abs() < 1e-6);
    }

    /// Plain scalar Adam written out independently of the tensor path.
    fn reference_scalar_adam(mut w: f64, lr: f64, steps: usize) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=steps {
            let g = 2.0 * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        w
    }

    #[test]
    fn quadratic_descends_like_reference() {
        let lr = 0.01;
        let mut p = Tensor::<f64>::scalar(1.0);
        let mut opt = Adam::new(AdamConfig { lr, ..Default::default() });
        for _ in 0..100 {
            let g = [2.0 * p.data()[0]];
            opt.step(&mut [&mut p], &[&g]).unwrap();
        }
        let w = p.data()[0];
        assert!(w.abs() < 0.5);
        assert!((w - reference_scalar_adam(1.0, lr, 100)).abs() < 1e-12);
    }

    #[test]
    fn misaligned_shapes_error() {
        let mut p = Tensor::<f64>::zeros(&[2]);
        let mut opt = Adam::new(AdamConfig::default());
        assert!(matches!(opt.step(&mut [&mut p], &[&[0.0; 3]]), Err(Error::Shape(_))));
    }
}
