//! Variance schedule, forward noising and deterministic DDIM transport
//! between arbitrary (possibly fractional) noise levels.

use crate::error::{shape_err, Error, Result};
use crate::num::Scalar;
use crate::tensor::Tensor;

/// Linear-beta variance schedule over `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSchedule {
    t_max: usize,
    /// `beta[t - 1]` is the variance added at step `t`.
    beta: Vec<f64>,
    /// `log_alpha_bar[t] = sum_{m <= t} ln(1 - beta_m)`, entry 0 is 0.
    log_alpha_bar: Vec<f64>,
}

impl VarianceSchedule {
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max < 1 {
            return Err(Error::Config("T must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!("need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")));
        }
        let beta: Vec<f64> = if t_max == 1 {
            vec![beta_start]
        } else {
            (0..t_max).map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64).collect()
        };
        // Neumaier-compensated running sum
        let mut log_alpha_bar = Vec::with_capacity(t_max + 1);
        log_alpha_bar.push(0.0);
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for &b in &beta {
            let x = (-b).ln_1p();
            let s = sum + x;
            comp += if sum.abs() >= x.abs() { (sum - s) + x } else { (x - s) + sum };
            sum = s;
            log_alpha_bar.push(sum + comp);
        }
        Ok(Self { t_max, beta, log_alpha_bar })
    }

    /// Default schedule: T = 1000, beta from 1e-4 to 0.02.
    pub fn standard() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("valid defaults")
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t - 1]
    }

    pub fn log_alpha_bar_table(&self) -> &[f64] {
        &self.log_alpha_bar
    }

    /// Table value at an integer level.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.log_alpha_bar[t].exp()
    }

    /// `alpha_bar` at a real level, by linear interpolation of its logarithm.
    pub fn alpha_bar_at(&self, t: f64) -> Result<f64> {
        if !(0.0..=self.t_max as f64).contains(&t) {
            return Err(Error::Range(format!("level {t} outside [0, {}]", self.t_max)));
        }
        let lo = t.floor() as usize;
        let frac = t - lo as f64;
        if frac == 0.0 {
            return Ok(self.alpha_bar(lo));
        }
        let (a, b) = (self.log_alpha_bar[lo], self.log_alpha_bar[lo + 1]);
        Ok((a + frac * (b - a)).exp())
    }
}

/// `sqrt(ab(t))·z0 + sqrt(1 - ab(t))·eps`.
pub fn forward_noise<T: Scalar>(
    z0: &Tensor<T>,
    t: f64,
    eps: &Tensor<T>,
    schedule: &VarianceSchedule,
) -> Result<Tensor<T>> {
    if z0.shape() != eps.shape() {
        return Err(shape_err!("forward_noise: frame {:?}, noise {:?}", z0.shape(), eps.shape()));
    }
    let ab = schedule.alpha_bar_at(t)?;
    if ab == 1.0 {
        return Ok(z0.clone());
    }
    z0.axpby(T::from_f64(ab.sqrt()), eps, T::from_f64((1.0 - ab).sqrt()))
}

/// Clean-frame estimate implied by a noise prediction at level `t`.
pub fn predict_x0<T: Scalar>(
    z_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: f64,
    schedule: &VarianceSchedule,
) -> Result<Tensor<T>> {
    let ab = schedule.alpha_bar_at(t)?;
    if ab <= 0.0 {
        return Err(Error::Singularity(format!("alpha_bar({t}) = 0")));
    }
    let inv = 1.0 / ab.sqrt();
    z_t.axpby(T::from_f64(inv), eps_hat, T::from_f64(-(1.0 - ab).sqrt() * inv))
}

/// Deterministic (eta = 0) DDIM move from `t_from` down to `t_to`.
pub fn ddim_step<T: Scalar>(
    z_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t_from: f64,
    t_to: f64,
    schedule: &VarianceSchedule,
) -> Result<Tensor<T>> {
    if z_t.shape() != eps_hat.shape() {
        return Err(shape_err!("ddim_step: sample {:?}, eps {:?}", z_t.shape(), eps_hat.shape()));
    }
    if t_to > t_from {
        return Err(Error::Order(format!("cannot step upward from {t_from} to {t_to}")));
    }
    if t_to < 0.0 {
        return Err(Error::Range(format!("target level {t_to} below 0")));
    }
    if t_to == t_from {
        schedule.alpha_bar_at(t_from)?;
        return Ok(z_t.clone());
    }
    let x0 = predict_x0(z_t, eps_hat, t_from, schedule)?;
    if t_to == 0.0 {
        return Ok(x0);
    }
    let ab_to = schedule.alpha_bar_at(t_to)?;
    x0.axpby(T::from_f64(ab_to.sqrt()), eps_hat, T::from_f64((1.0 - ab_to).sqrt()))
}

/// Level at grid index `g` of the `n·L`-point uniform grid over `[0, T]`.
///
/// Every level in the crate is produced by this one expression so grids
/// compare exactly.
pub fn grid_level(t_max: usize, window: usize, substeps: usize, g: usize) -> f64 {
    (g as f64 * t_max as f64) / (window * substeps) as f64
}

/// `{0, T/(nL), 2T/(nL), ..., T}` in ascending order.
pub fn sampling_grid(t_max: usize, window: usize, substeps: usize) -> Vec<f64> {
    (0..=window * substeps).map(|g| grid_level(t_max, window, substeps, g)).collect()
}

/// Closed-form factor applied to `z_t` by one DDIM move from `t_from` to
/// `t_to` when the noise prediction is `sqrt(1 - ab(t_from))·z_t`.
pub fn oracle_contraction(ab_to: f64, ab_from: f64) -> f64 {
    (ab_to * ab_from).sqrt() + ((1.0 - ab_to) * (1.0 - ab_from)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_step_schedule() {
        let s = VarianceSchedule::linear(1, 0.5, 0.5).unwrap();
        assert!((s.alpha_bar(1) - 0.5).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_eq!(s.alpha_bar_at(0.0).unwrap(), 1.0);
    }

    #[test]
    fn bounds_are_enforced() {
        assert!(matches!(VarianceSchedule::linear(0, 0.1, 0.2), Err(Error::Config(_))));
        assert!(matches!(VarianceSchedule::linear(10, 0.0, 0.2), Err(Error::Config(_))));
        assert!(matches!(VarianceSchedule::linear(10, 0.3, 0.2), Err(Error::Config(_))));
        assert!(matches!(VarianceSchedule::linear(10, 0.1, 1.0), Err(Error::Config(_))));
        let s = VarianceSchedule::standard();
        assert!(matches!(s.alpha_bar_at(-0.1), Err(Error::Range(_))));
        assert!(matches!(s.alpha_bar_at(1000.5), Err(Error::Range(_))));
    }

    #[test]
    fn alpha_bar_matches_direct_product() {
        let s = VarianceSchedule::standard();
        let mut prod = 1.0f64;
        for t in 1..=1000 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0);
        }
        let rel = (s.alpha_bar(1000) - prod).abs() / prod;
        assert!(rel < 1e-12, "rel {rel}");
        assert!(s.beta(1) == 1e-4 && (s.beta(1000) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn half_level_interpolates_log() {
        let s = VarianceSchedule::standard();
        let want = (0.5 * s.alpha_bar(1).ln()).exp();
        assert!((s.alpha_bar_at(0.5).unwrap() - want).abs() < 1e-15);
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        for t in [1usize, 17, 500, 1000] {
            assert_eq!(s.alpha_bar_at(t as f64).unwrap(), s.alpha_bar(t));
        }
    }

    #[test]
    fn forward_noise_examples() {
        let s = VarianceSchedule::standard();
        let z0 = Tensor::<f32>::from_f64(vec![2], &[1.0, -3.0]).unwrap();
        let eps = Tensor::<f32>::from_f64(vec![2], &[0.3, 0.7]).unwrap();
        assert_eq!(forward_noise(&z0, 0.0, &eps, &s).unwrap(), z0);

        // pick the level where alpha_bar = 0.25
        let t = find_level(&s, 0.25);
        let zero = Tensor::<f64>::zeros(&[1]);
        let one = Tensor::<f64>::scalar(1.0);
        let out = forward_noise(&one, t, &zero, &s).unwrap();
        assert!((out.data()[0] - 0.5).abs() < 1e-9);
        let two = Tensor::<f64>::scalar(2.0);
        let out = forward_noise(&one, t, &two, &s).unwrap();
        assert!((out.data()[0] - 2.232_050_8).abs() < 1e-6);
        let bad = Tensor::<f32>::zeros(&[3]);
        assert!(matches!(forward_noise(&z0, 1.0, &bad, &s), Err(Error::Shape(_))));
    }

    fn find_level(s: &VarianceSchedule, target: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, s.t_max() as f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if s.alpha_bar_at(mid).unwrap() > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn ddim_identity_and_order() {
        let s = VarianceSchedule::standard();
        let z = Tensor::<f32>::from_f64(vec![2], &[0.1, 0.2]).unwrap();
        let e = Tensor::<f32>::from_f64(vec![2], &[1.0, -1.0]).unwrap();
        assert_eq!(ddim_step(&z, &e, 300.0, 300.0, &s).unwrap(), z);
        assert!(matches!(ddim_step(&z, &e, 300.0, 301.0, &s), Err(Error::Order(_))));
    }

    #[test]
    fn ddim_with_true_eps_recovers_clean() {
        let s = VarianceSchedule::standard();
        let z0 = Tensor::<f32>::from_f64(vec![3], &[0.5, -1.25, 2.0]).unwrap();
        let eps = Tensor::<f32>::from_f64(vec![3], &[-0.3, 0.9, 1.4]).unwrap();
        for t in [1.0, 62.5, 400.0, 999.0] {
            let zt = forward_noise(&z0, t, &eps, &s).unwrap();
            let rec = ddim_step(&zt, &eps, t, 0.0, &s).unwrap();
            // f32 rounding of z_t is amplified by 1/sqrt(ab(t)) near T
            let tol = 1e-5 * (1.0 / s.alpha_bar_at(t).unwrap().sqrt()).max(1.0);
            assert!(rec.max_abs_diff(&z0) < tol, "t={t}: {:?}", rec.data());
        }
    }

    #[test]
    fn ddim_oracle_scalar_form() {
        let s = VarianceSchedule::standard();
        let (tf, tt) = (437.5, 375.0);
        let abf = s.alpha_bar_at(tf).unwrap();
        let abt = s.alpha_bar_at(tt).unwrap();
        let z = Tensor::<f64>::from_f64(vec![2], &[1.3, -0.4]).unwrap();
        let eps_hat = z.scaled((1.0 - abf).sqrt());
        let out = ddim_step(&z, &eps_hat, tf, tt, &s).unwrap();
        // c = sqrt(ab_to ab_from) + sqrt((1-ab_to)(1-ab_from)), written out
        let c = (abt * abf).sqrt() + ((1.0 - abt) * (1.0 - abf)).sqrt();
        for (o, zi) in out.data().iter().zip(z.data()) {
            assert!((o - c * zi).abs() < 1e-12);
        }
        assert!((oracle_contraction(abt, abf) - c).abs() < 1e-15);
    }

    #[test]
    fn grids() {
        assert_eq!(sampling_grid(1000, 4, 1), vec![0.0, 250.0, 500.0, 750.0, 1000.0]);
        let g = sampling_grid(1000, 16, 4);
        assert_eq!(g.len(), 65);
        assert!(g.windows(2).all(|w| w[1] - w[0] == 15.625));
        assert_eq!(sampling_grid(8, 2, 2), vec![0.0, 2.0, 4.0, 6.0, 8.0]);
    }

    proptest! {
        #[test]
        fn alpha_bar_is_monotone(a in 0.0f64..1000.0, b in 0.0f64..1000.0) {
            let s = VarianceSchedule::standard();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assume!(hi - lo > 1e-9);
            prop_assert!(s.alpha_bar_at(lo).unwrap() > s.alpha_bar_at(hi).unwrap());
        }

        #[test]
        fn noise_then_invert(t in 0.01f64..=1000.0, seed in 0u64..1000) {
            use rand::SeedableRng;
            let s = VarianceSchedule::standard();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let z0 = crate::rng::normal_tensor::<f32, _>(&[16], &mut rng);
            let eps = crate::rng::normal_tensor::<f32, _>(&[16], &mut rng);
            let zt = forward_noise(&z0, t, &eps, &s).unwrap();
            let rec = ddim_step(&zt, &eps, t, 0.0, &s).unwrap();
            // inversion divides by sqrt(ab(t)); scale tolerance with it
            let amp = 1.0 / s.alpha_bar_at(t).unwrap().sqrt();
            prop_assert!(rec.max_abs_diff(&z0) < 1e-5 * amp.max(1.0));
        }

        #[test]
        fn ddim_composes(t in 1.0f64..1000.0, f1 in 0.0f64..1.0, f2 in 0.0f64..1.0) {
            let s = VarianceSchedule::standard();
            let mid = t * f1.max(f2);
            let low = t * f1.min(f2);
            let z = Tensor::<f32>::from_f64(vec![3], &[0.4, -1.1, 2.2]).unwrap();
            let e = Tensor::<f32>::from_f64(vec![3], &[1.0, 0.3, -0.8]).unwrap();
            let two = ddim_step(&ddim_step(&z, &e, t, mid, &s).unwrap(), &e, mid, low, &s).unwrap();
            let one = ddim_step(&z, &e, t, low, &s).unwrap();
            let amp = 1.0 / s.alpha_bar_at(t).unwrap().sqrt();
            prop_assert!(two.max_abs_diff(&one) < 1e-5 * amp.max(1.0));
        }
    }
}
