//! Adaptive begin-of-video tokens.
//!
//! Each temporal block owns a learnable token `b` and a small MLP that maps
//! pooled features of the latest clean frame to a scale/shift pair. The token
//! that enters attention is `(1 + gamma_raw) * b + beta`; the MLP's output
//! layer starts at zero so the token starts unmodulated.

use super::params::ParamId;
use crate::error::{shape_err, Result};
use crate::num::Scalar;
use crate::tensor::{Graph, Var};

#[derive(Debug, Clone, Copy)]
pub struct BovIds {
    pub token: ParamId,
    pub mlp1_w: ParamId,
    pub mlp1_b: ParamId,
    /// Output layer, `[hidden, 2 * hidden]`, zero at init.
    pub mlp2_w: ParamId,
    pub mlp2_b: ParamId,
}

/// `(1 + gamma_raw) ⊙ b + beta`.
pub fn apply_modulation<T: Scalar>(g: &mut Graph<T>, token: Var, gamma_raw: Var, beta: Var) -> Result<Var> {
    let scaled = g.mul(gamma_raw, token)?;
    let t = g.add(token, scaled)?;
    g.add(t, beta)
}

/// Modulated token for one block from pooled reference features `[hidden]`.
pub fn modulate_bov<T: Scalar>(g: &mut Graph<T>, p: &[Var], ids: &BovIds, ref_feat: Var) -> Result<Var> {
    let d = g.shape(p[ids.token.0])[0];
    if g.shape(ref_feat) != [d] {
        return Err(shape_err!("reference features {:?} vs hidden {d}", g.shape(ref_feat)));
    }
    let x = g.reshape(ref_feat, &[1, d])?;
    let h = g.linear(x, p[ids.mlp1_w.0], p[ids.mlp1_b.0])?;
    let h = g.gelu(h)?;
    let out = g.linear(h, p[ids.mlp2_w.0], p[ids.mlp2_b.0])?;
    let gamma_raw = g.slice(out, 1, 0, d)?;
    let gamma_raw = g.reshape(gamma_raw, &[d])?;
    let beta = g.slice(out, 1, d, 2 * d)?;
    let beta = g.reshape(beta, &[d])?;
    apply_modulation(g, p[ids.token.0], gamma_raw, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn modulation_example() {
        let mut g = Graph::<f64>::new();
        let b = g.constant(Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap());
        let gr = g.constant(Tensor::from_f64(vec![2], &[1.0, 0.0]).unwrap());
        let be = g.constant(Tensor::from_f64(vec![2], &[0.5, -1.0]).unwrap());
        let out = apply_modulation(&mut g, b, gr, be).unwrap();
        assert_eq!(g.value(out).data(), &[2.5, 1.0]);
    }
}
