use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Step of the five-point central difference.
    pub step: f64,
    /// Coordinates probed per input tensor (all of them if the tensor is smaller).
    pub coords_per_input: usize,
    /// Gradients smaller than this are compared in absolute terms.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-3, coords_per_input: 8, floor: 1e-6, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Input index and flat coordinate of the worst mismatch.
    pub worst: Option<(usize, usize)>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

/// Compare tape gradients of a scalar closure with fourth-order central
/// differences, `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`.
///
/// The closure receives a fresh graph and one leaf per input and must return
/// a one-element loss. Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], tol: f64, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>], with_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone().with_requires_grad(with_grad))).collect();
        let loss = f(&mut g, &vars)?;
        let value = g.value(loss).data()[0];
        let mut grads = Vec::new();
        if with_grad {
            g.backward(loss)?;
            for (v, t) in vars.iter().zip(values) {
                grads.push(g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]));
            }
        }
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, worst: None, tol };
    for i in 0..inputs.len() {
        let n = inputs[i].len();
        let coords: Vec<usize> = if n <= opts.coords_per_input {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.coords_per_input).into_vec();
            c.sort_unstable();
            c
        };
        for c in coords {
            let orig = work[i].data()[c];
            let mut at = |offset: f64| -> Result<f64> {
                work[i].data_mut()[c] = orig + offset;
                Ok(eval(&work, false)?.0)
            };
            let h = opts.step;
            let (p2, p1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
            work[i].data_mut()[c] = orig;
            let numeric = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h);
            let a = analytic[i][c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((i, c));
            }
        }
    }
    Ok(report)
}
