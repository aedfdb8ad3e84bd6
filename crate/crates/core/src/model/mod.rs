//! The toy spatio-temporal denoiser.
//!
//! Frames are cut into patches, embedded, tagged with an embedding of their
//! own noise level, and passed through `depth` rounds of
//! spatial attention → temporal attention (with an ada-BOV token) → MLP.

mod attention;
mod bov;
mod params;

pub use attention::{
    attention_sublayer, multi_head_attention, temporal_attention_with_bov, AttentionIds, AttentionOut, TemporalOut,
};
pub use bov::{apply_modulation, modulate_bov, BovIds};
pub use params::{ParamId, ParamStore};

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::num::Scalar;
use crate::rng::{normal_tensor, SeedStreams, Stream};
use crate::tensor::{Graph, Tensor, Var};
use attention::LN_EPS;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub frame_h: usize,
    pub frame_w: usize,
    pub channels: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub hidden: usize,
    /// Number of spatial/temporal block pairs.
    pub depth: usize,
    pub heads: usize,
    /// Attention window `L` (frames per forward pass).
    pub window: usize,
    pub bov_enabled: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            frame_h: 16,
            frame_w: 16,
            channels: 1,
            patch_h: 2,
            patch_w: 2,
            hidden: 64,
            depth: 4,
            heads: 4,
            window: 8,
            bov_enabled: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.frame_h,
            self.frame_w,
            self.channels,
            self.patch_h,
            self.patch_w,
            self.hidden,
            self.depth,
            self.heads,
            self.window,
        ];
        if positive.contains(&0) {
            return Err(Error::Config(format!("all extents must be positive: {self:?}")));
        }
        if self.frame_h % self.patch_h != 0 || self.frame_w % self.patch_w != 0 {
            return Err(Error::Config(format!(
                "frame {}x{} is not divisible by patch {}x{}",
                self.frame_h, self.frame_w, self.patch_h, self.patch_w
            )));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!("hidden {} not divisible by heads {}", self.hidden, self.heads)));
        }
        if self.hidden % 2 != 0 {
            return Err(Error::Config("hidden must be even for the level embedding".into()));
        }
        Ok(())
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        [self.channels, self.frame_h, self.frame_w]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.frame_h / self.patch_h, self.frame_w / self.patch_w)
    }

    /// Spatial tokens per frame.
    pub fn patches(&self) -> usize {
        let (a, b) = self.grid();
        a * b
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_h * self.patch_w
    }
}

#[derive(Debug, Clone, Copy)]
struct FfnIds {
    ln_g: ParamId,
    ln_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct BlockIds {
    spatial: AttentionIds,
    temporal: AttentionIds,
    bov: BovIds,
    ffn: FfnIds,
}

#[derive(Debug, Clone)]
struct Layout {
    patch_w: ParamId,
    patch_b: ParamId,
    pos: ParamId,
    time_w1: ParamId,
    time_b1: ParamId,
    time_w2: ParamId,
    time_b2: ParamId,
    blocks: Vec<BlockIds>,
    final_ln_g: ParamId,
    final_ln_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

/// Per-call switches used by tests and diagnostics.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Feed the raw BOV tokens to attention, skipping the reference MLPs.
    pub unmodulated_bov: bool,
    /// Keep attention probabilities and token counts in the trace.
    pub record_trace: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardTrace<T> {
    pub temporal_tokens_in: Vec<usize>,
    pub temporal_tokens_out: Vec<usize>,
    pub spatial_probs: Vec<Tensor<T>>,
    pub temporal_probs: Vec<Tensor<T>>,
}

pub struct Forward<T> {
    /// Predicted noise, `[L, C, H, W]`.
    pub eps: Var,
    pub trace: ForwardTrace<T>,
}

/// Denoiser weights plus the layout that addresses them.
#[derive(Debug, Clone)]
pub struct AdaBovDenoiser<T> {
    config: DenoiserConfig,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Scalar> AdaBovDenoiser<T> {
    /// Seeded initialization. Output projection and the last layer of every
    /// modulation MLP start at zero.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeedStreams::new(seed).stream(Stream::ParamInit);
        let d = config.hidden;
        let pd = config.patch_dim();
        let mut ps = ParamStore::new();
        let dense =
            |ps: &mut ParamStore<T>, rng: &mut rand_chacha::ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize| {
                let w =
                    normal_tensor::<T, _>(&[fan_in, fan_out], rng).scaled(T::from_f64(1.0 / (fan_in as f64).sqrt()));
                let wid = ps.add(format!("{name}.w"), w);
                let bid = ps.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
                (wid, bid)
            };
        let ln = |ps: &mut ParamStore<T>, name: &str| {
            (
                ps.add(format!("{name}.g"), Tensor::full(&[d], T::one())),
                ps.add(format!("{name}.b"), Tensor::zeros(&[d])),
            )
        };
        let (patch_w, patch_b) = dense(&mut ps, &mut rng, "patch_embed", pd, d);
        let pos =
            ps.add("pos_embed", normal_tensor::<T, _>(&[config.patches(), d], &mut rng).scaled(T::from_f64(0.02)));
        let (time_w1, time_b1) = dense(&mut ps, &mut rng, "time_embed.fc1", d, d);
        let (time_w2, time_b2) = dense(&mut ps, &mut rng, "time_embed.fc2", d, d);
        let mut blocks = Vec::with_capacity(config.depth);
        for j in 0..config.depth {
            let attn = |ps: &mut ParamStore<T>, rng: &mut rand_chacha::ChaCha8Rng, kind: &str| {
                let (ln_g, ln_b) = ln(ps, &format!("blocks.{j}.{kind}.ln"));
                let (qkv_w, qkv_b) = dense(ps, rng, &format!("blocks.{j}.{kind}.qkv"), d, 3 * d);
                let (out_w, out_b) = dense(ps, rng, &format!("blocks.{j}.{kind}.proj"), d, d);
                AttentionIds { ln_g, ln_b, qkv_w, qkv_b, out_w, out_b }
            };
            let spatial = attn(&mut ps, &mut rng, "spatial");
            let temporal = attn(&mut ps, &mut rng, "temporal");
            let token = ps
                .add(format!("blocks.{j}.bov.token"), normal_tensor::<T, _>(&[d], &mut rng).scaled(T::from_f64(0.02)));
            let (mlp1_w, mlp1_b) = dense(&mut ps, &mut rng, &format!("blocks.{j}.bov.mlp1"), d, d);
            let mlp2_w = ps.add(format!("blocks.{j}.bov.mlp2.w"), Tensor::zeros(&[d, 2 * d]));
            let mlp2_b = ps.add(format!("blocks.{j}.bov.mlp2.b"), Tensor::zeros(&[2 * d]));
            let (fln_g, fln_b) = ln(&mut ps, &format!("blocks.{j}.ffn.ln"));
            let (fc1_w, fc1_b) = dense(&mut ps, &mut rng, &format!("blocks.{j}.ffn.fc1"), d, 4 * d);
            let (fc2_w, fc2_b) = dense(&mut ps, &mut rng, &format!("blocks.{j}.ffn.fc2"), 4 * d, d);
            blocks.push(BlockIds {
                spatial,
                temporal,
                bov: BovIds { token, mlp1_w, mlp1_b, mlp2_w, mlp2_b },
                ffn: FfnIds { ln_g: fln_g, ln_b: fln_b, fc1_w, fc1_b, fc2_w, fc2_b },
            });
        }
        let (final_ln_g, final_ln_b) = ln(&mut ps, "final.ln");
        let out_w = ps.add("final.out.w", Tensor::zeros(&[d, pd]));
        let out_b = ps.add("final.out.b", Tensor::zeros(&[pd]));
        let layout = Layout {
            patch_w,
            patch_b,
            pos,
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            blocks,
            final_ln_g,
            final_ln_b,
            out_w,
            out_b,
        };
        Ok(Self { config, params: ps, layout })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Toggle the ada-BOV path without touching weights.
    pub fn set_bov_enabled(&mut self, flag: bool) {
        self.config.bov_enabled = flag;
    }

    /// Same architecture and weights in another precision.
    pub fn cast<U: Scalar>(&self) -> AdaBovDenoiser<U> {
        AdaBovDenoiser { config: self.config, params: self.params.cast(), layout: self.layout.clone() }
    }

    /// Ids of every parameter that belongs to the ada-BOV path.
    pub fn bov_param_ids(&self) -> Vec<ParamId> {
        self.layout
            .blocks
            .iter()
            .flat_map(|b| [b.bov.token, b.bov.mlp1_w, b.bov.mlp1_b, b.bov.mlp2_w, b.bov.mlp2_b])
            .collect()
    }

    /// Add `N(0, scale²)` noise to every parameter whose name passes `filter`.
    /// Used to move tests away from the zero-initialized layers.
    pub fn perturb(&mut self, seed: u64, scale: f64, filter: impl Fn(&str) -> bool) {
        let mut rng = SeedStreams::new(seed).stream(Stream::Aux);
        let names: Vec<String> = self.params.iter().map(|(n, _)| n.to_string()).collect();
        for (name, t) in names.iter().zip(self.params.tensors_mut()) {
            if filter(name) {
                for v in t.data_mut() {
                    *v += T::from_f64(scale * crate::rng::standard_normal(&mut rng));
                }
            }
        }
    }

    fn check_frame(&self, frame: &Tensor<T>, what: &str) -> Result<()> {
        if frame.shape() != self.config.frame_shape() {
            return Err(shape_err!(
                "{what} has shape {:?}, model expects {:?}",
                frame.shape(),
                self.config.frame_shape()
            ));
        }
        Ok(())
    }

    /// `[N, C, H, W]` → `[N, P, C*ph*pw]` with patches in row-major grid order.
    fn patchify(&self, g: &mut Graph<T>, frames: Var) -> Result<Var> {
        let c = &self.config;
        let n = g.shape(frames)[0];
        let (gh, gw) = c.grid();
        let x = g.reshape(frames, &[n, c.channels, gh, c.patch_h, gw, c.patch_w])?;
        let x = g.permute(x, &[0, 2, 4, 1, 3, 5])?;
        g.reshape(x, &[n, gh * gw, c.patch_dim()])
    }

    fn unpatchify(&self, g: &mut Graph<T>, tokens: Var) -> Result<Var> {
        let c = &self.config;
        let n = g.shape(tokens)[0];
        let (gh, gw) = c.grid();
        let x = g.reshape(tokens, &[n, gh, gw, c.channels, c.patch_h, c.patch_w])?;
        let x = g.permute(x, &[0, 3, 1, 4, 2, 5])?;
        g.reshape(x, &[n, c.channels, c.frame_h, c.frame_w])
    }

    /// Shared patch embedding of the reference frame, mean-pooled over patches.
    pub fn embed_reference(&self, g: &mut Graph<T>, p: &[Var], reference: &Tensor<T>) -> Result<Var> {
        self.check_frame(reference, "reference frame")?;
        let r = g.constant(reference.reshape(&[1, self.config.channels, self.config.frame_h, self.config.frame_w])?);
        let patches = self.patchify(g, r)?;
        let emb = g.linear(patches, p[self.layout.patch_w.0], p[self.layout.patch_b.0])?;
        let pooled = g.mean(emb, &[0, 1])?;
        Ok(pooled)
    }

    /// BOV token of block `j` as it enters attention.
    pub fn block_bov(&self, g: &mut Graph<T>, p: &[Var], j: usize, ref_feat: Option<Var>) -> Result<Var> {
        let ids = &self.layout.blocks[j].bov;
        match ref_feat {
            Some(f) => modulate_bov(g, p, ids, f),
            None => Ok(p[ids.token.0]),
        }
    }

    /// Predict the noise in every frame of `window` (`[L, C, H, W]`), each at
    /// its own level, conditioned on the clean `reference` frame.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        window: &Tensor<T>,
        levels: &[f64],
        reference: &Tensor<T>,
        opts: ForwardOptions,
    ) -> Result<Forward<T>> {
        let c = &self.config;
        if p.len() != self.params.len() {
            return Err(shape_err!("{} bound parameters for a model with {}", p.len(), self.params.len()));
        }
        let l = levels.len();
        if window.rank() != 4 || window.shape()[0] != l || window.shape()[1..] != c.frame_shape() {
            return Err(shape_err!(
                "window {:?} does not match {} levels of frames {:?}",
                window.shape(),
                l,
                c.frame_shape()
            ));
        }
        let (d, np) = (c.hidden, c.patches());
        let lay = &self.layout;
        let mut trace = ForwardTrace::default();

        let frames = g.constant(window.clone());
        let patches = self.patchify(g, frames)?;
        let mut x = g.linear(patches, p[lay.patch_w.0], p[lay.patch_b.0])?;
        let pos = g.broadcast_to(p[lay.pos.0], &[l, np, d])?;
        x = g.add(x, pos)?;

        let lv = g.constant(Tensor::from_f64(vec![l], levels)?);
        let temb = g.sinusoidal_embed(lv, d)?;
        let temb = g.linear(temb, p[lay.time_w1.0], p[lay.time_b1.0])?;
        let temb = g.gelu(temb)?;
        let temb = g.linear(temb, p[lay.time_w2.0], p[lay.time_b2.0])?;
        let temb = g.reshape(temb, &[l, 1, d])?;
        let temb = g.broadcast_to(temb, &[l, np, d])?;
        x = g.add(x, temb)?;

        let ref_feat = if c.bov_enabled && !opts.unmodulated_bov {
            Some(self.embed_reference(g, p, reference)?)
        } else {
            self.check_frame(reference, "reference frame")?;
            None
        };

        for (j, blk) in lay.blocks.iter().enumerate() {
            let sp = attention_sublayer(g, p, &blk.spatial, x, c.heads)?;
            x = sp.out;

            let bov = if c.bov_enabled { Some(self.block_bov(g, p, j, ref_feat)?) } else { None };
            let xt = g.permute(x, &[1, 0, 2])?;
            let tp = temporal_attention_with_bov(g, p, &blk.temporal, xt, bov, c.heads)?;
            x = g.permute(tp.out, &[1, 0, 2])?;

            let f = &blk.ffn;
            let h = g.layer_norm(x, p[f.ln_g.0], p[f.ln_b.0], LN_EPS)?;
            let h = g.linear(h, p[f.fc1_w.0], p[f.fc1_b.0])?;
            let h = g.gelu(h)?;
            let h = g.linear(h, p[f.fc2_w.0], p[f.fc2_b.0])?;
            x = g.add(x, h)?;

            if opts.record_trace {
                trace.temporal_tokens_in.push(tp.tokens_in);
                trace.temporal_tokens_out.push(g.shape(tp.out)[1]);
                trace.spatial_probs.push(g.value(sp.probs).clone());
                trace.temporal_probs.push(g.value(tp.probs).clone());
            }
        }

        let h = g.layer_norm(x, p[lay.final_ln_g.0], p[lay.final_ln_b.0], LN_EPS)?;
        let out = g.linear(h, p[lay.out_w.0], p[lay.out_b.0])?;
        let eps = self.unpatchify(g, out)?;
        Ok(Forward { eps, trace })
    }

    /// Inference-only forward returning `[L, C, H, W]` noise predictions.
    pub fn predict(&self, window: &Tensor<T>, levels: &[f64], reference: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let f = self.forward(&mut g, &p, window, levels, reference, ForwardOptions::default())?;
        Ok(g.into_value(f.eps))
    }

    /// Random frame of the configured shape, handy for tests and benches.
    pub fn random_frame<R: Rng>(&self, rng: &mut R) -> Tensor<T> {
        normal_tensor(&self.config.frame_shape(), rng)
    }
}
