use super::params::ParamId;
use crate::error::{shape_err, Result};
use crate::num::Scalar;
use crate::tensor::{Graph, Var};

pub(crate) const LN_EPS: f64 = 1e-6;

/// Parameters of one pre-norm multi-head self-attention sublayer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionIds {
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

pub struct AttentionOut {
    pub out: Var,
    /// Softmax probabilities, `[batch * heads, seq, seq]`.
    pub probs: Var,
}

/// Multi-head self-attention over `[batch, seq, hidden]`, no residual.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    p: &[Var],
    ids: &AttentionIds,
    x: Var,
    heads: usize,
) -> Result<AttentionOut> {
    let &[b, s, d] = g.shape(x) else {
        return Err(shape_err!("attention input must be [batch, seq, hidden], got {:?}", g.shape(x)));
    };
    if d % heads != 0 {
        return Err(shape_err!("hidden {d} not divisible by {heads} heads"));
    }
    let dh = d / heads;
    let qkv = g.linear(x, p[ids.qkv_w.0], p[ids.qkv_b.0])?;
    let qkv = g.reshape(qkv, &[b, s, 3, heads, dh])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
    let qkv = g.reshape(qkv, &[3, b * heads, s, dh])?;
    let mut parts = [x; 3];
    for (i, part) in parts.iter_mut().enumerate() {
        let sl = g.slice(qkv, 0, i, i + 1)?;
        *part = g.reshape(sl, &[b * heads, s, dh])?;
    }
    let [q, k, v] = parts;
    let scores = g.matmul_t(q, k)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let probs = g.softmax(scores)?;
    let ctx = g.matmul(probs, v)?;
    let ctx = g.reshape(ctx, &[b, heads, s, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, s, d])?;
    let out = g.linear(ctx, p[ids.out_w.0], p[ids.out_b.0])?;
    Ok(AttentionOut { out, probs })
}

/// `x + attention(layer_norm(x))`.
pub fn attention_sublayer<T: Scalar>(
    g: &mut Graph<T>,
    p: &[Var],
    ids: &AttentionIds,
    x: Var,
    heads: usize,
) -> Result<AttentionOut> {
    let h = g.layer_norm(x, p[ids.ln_g.0], p[ids.ln_b.0], LN_EPS)?;
    let a = multi_head_attention(g, p, ids, h, heads)?;
    let out = g.add(x, a.out)?;
    Ok(AttentionOut { out, probs: a.probs })
}

pub struct TemporalOut {
    pub out: Var,
    pub probs: Var,
    /// Sequence length seen by the attention (L + 1 with a BOV token).
    pub tokens_in: usize,
    pub tokens_out: usize,
}

/// Temporal attention over `[sites, L, hidden]`.
///
/// With `bov` set, the same `[hidden]` token is prepended to every site's
/// sequence, attention runs over `L + 1` positions and output position 0 is
/// dropped. Without it this is plain attention over the `L` frame tokens.
pub fn temporal_attention_with_bov<T: Scalar>(
    g: &mut Graph<T>,
    p: &[Var],
    ids: &AttentionIds,
    tokens: Var,
    bov: Option<Var>,
    heads: usize,
) -> Result<TemporalOut> {
    let &[sites, len, d] = g.shape(tokens) else {
        return Err(shape_err!("temporal tokens must be [sites, L, hidden], got {:?}", g.shape(tokens)));
    };
    let Some(b) = bov else {
        let a = attention_sublayer(g, p, ids, tokens, heads)?;
        return Ok(TemporalOut { out: a.out, probs: a.probs, tokens_in: len, tokens_out: len });
    };
    if g.shape(b) != [d] {
        return Err(shape_err!("BOV token {:?} does not match hidden {d}", g.shape(b)));
    }
    let b = g.reshape(b, &[1, 1, d])?;
    let b = g.broadcast_to(b, &[sites, 1, d])?;
    let ext = g.concat(&[b, tokens], 1)?;
    let a = attention_sublayer(g, p, ids, ext, heads)?;
    let out = g.slice(a.out, 1, 1, len + 1)?;
    Ok(TemporalOut { out, probs: a.probs, tokens_in: len + 1, tokens_out: len })
}
