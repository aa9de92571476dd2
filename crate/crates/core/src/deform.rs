//! Multi-scale deformable attention layer.
//!
//! Each query predicts, per head and per level, `K_p` sampling offsets around
//! its reference point and one attention logit per sampled point. Values are
//! read from the projected level maps by bilinear interpolation, weighted by
//! a softmax taken jointly over all `levels × K_p` points of a head, summed,
//! concatenated across heads and projected. The layer output is
//! `FFN(norm(V + dropout(V)))`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{linear, xavier, Bound, FfnParams, NormParams, ParamStore};
use crate::tensor::{RngState, Tensor};

/// Training-time context threaded through every stochastic layer.
pub struct RunCtx<'a> {
    pub rng: &'a mut RngState,
    pub training: bool,
}

impl<'a> RunCtx<'a> {
    pub fn eval(rng: &'a mut RngState) -> Self {
        Self { rng, training: false }
    }

    pub fn train(rng: &'a mut RngState) -> Self {
        Self { rng, training: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformConfig {
    pub channels: usize,
    pub heads: usize,
    pub points: usize,
    pub levels: usize,
    pub ffn_ratio: usize,
    pub dropout: f64,
    /// Adds `x + FFN(x)` around the feed-forward block instead of `FFN(x)`.
    pub ffn_residual: bool,
}

impl Default for DeformConfig {
    fn default() -> Self {
        Self { channels: 32, heads: 4, points: 4, levels: 4, ffn_ratio: 2, dropout: 0.1, ffn_residual: false }
    }
}

/// Standard deviation-like scale of the initial offset weights, in normalised units.
pub const OFFSET_INIT_SCALE: f64 = 0.01;

impl DeformConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if self.points == 0 || self.levels == 0 || self.ffn_ratio == 0 {
            return Err(Error::Config("points, levels and ffn_ratio must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// Sampled points per head across all levels.
    pub fn points_per_head(&self) -> usize {
        self.levels * self.points
    }

    /// Column of the attention logit for `(head, level, point)`; offsets use
    /// columns `2·col` (row) and `2·col + 1` (column).
    pub fn column(&self, head: usize, level: usize, point: usize) -> usize {
        (head * self.levels + level) * self.points + point
    }

    pub fn init(&self, store: &mut ParamStore, prefix: &str, rng: &mut RngState) -> Result<()> {
        self.validate()?;
        let c = self.channels;
        let samples = self.heads * self.points_per_head();
        let off = rng.uniform_tensor(&[c, 2 * samples], -OFFSET_INIT_SCALE, OFFSET_INIT_SCALE);
        store.insert(format!("{prefix}.w_off"), off);
        store.insert(format!("{prefix}.b_off"), Tensor::zeros(&[2 * samples]));
        store.insert(format!("{prefix}.w_attn"), xavier(rng, c, samples, 1.0));
        store.insert(format!("{prefix}.b_attn"), Tensor::zeros(&[samples]));
        store.insert(format!("{prefix}.w_val"), xavier(rng, c, c, 1.0));
        store.insert(format!("{prefix}.b_val"), Tensor::zeros(&[c]));
        store.insert(format!("{prefix}.w_out"), xavier(rng, c, c, 1.0));
        store.insert(format!("{prefix}.b_out"), Tensor::zeros(&[c]));
        NormParams::init(store, prefix, c);
        FfnParams::init(store, prefix, c, c * self.ffn_ratio, rng);
        Ok(())
    }
}

/// Tape handles for one deformable layer.
#[derive(Clone, Copy, Debug)]
pub struct DeformParams {
    pub cfg: DeformConfig,
    pub w_off: Var,
    pub b_off: Var,
    pub w_attn: Var,
    pub b_attn: Var,
    pub w_val: Var,
    pub b_val: Var,
    pub w_out: Var,
    pub b_out: Var,
    pub norm: NormParams,
    pub ffn: FfnParams,
}

impl DeformParams {
    pub fn bind(bound: &Bound, prefix: &str, cfg: DeformConfig) -> Result<Self> {
        let v = |n: &str| bound.var(&format!("{prefix}.{n}"));
        Ok(Self {
            cfg,
            w_off: v("w_off")?,
            b_off: v("b_off")?,
            w_attn: v("w_attn")?,
            b_attn: v("b_attn")?,
            w_val: v("w_val")?,
            b_val: v("b_val")?,
            w_out: v("w_out")?,
            b_out: v("b_out")?,
            norm: NormParams::bind(bound, prefix)?,
            ffn: FfnParams::bind(bound, prefix)?,
        })
    }
}

/// A flattened `rows·cols × c` map with its grid shape.
#[derive(Clone, Copy, Debug)]
pub struct LevelMap {
    pub features: Var,
    pub rows: usize,
    pub cols: usize,
}

/// Queries, one reference point per query row, and the maps to sample.
pub struct DeformInput<'a> {
    pub queries: Var,
    pub refs: &'a Tensor,
    pub maps: &'a [LevelMap],
}

/// The attention part of the layer, before dropout, norm and FFN.
pub fn deform_attention(tape: &mut Tape, input: &DeformInput<'_>, p: &DeformParams) -> Result<Var> {
    let cfg = &p.cfg;
    let q = input.queries;
    let rows = tape.value(q).rows();
    if input.refs.rows() != rows || input.refs.cols() != 2 {
        return Err(Error::Contract(format!(
            "{} reference points for {rows} query rows",
            input.refs.rows()
        )));
    }
    if input.maps.len() != cfg.levels {
        return Err(Error::Contract(format!("{} maps for {} levels", input.maps.len(), cfg.levels)));
    }
    let (m_heads, dh, lk) = (cfg.heads, cfg.head_dim(), cfg.points_per_head());

    let offsets = linear(tape, q, p.w_off, Some(p.b_off))?;
    let logits = linear(tape, q, p.w_attn, Some(p.b_attn))?;
    let logits = tape.reshape(logits, &[rows, m_heads, lk])?;
    let attn = tape.softmax(logits, 2)?;
    let attn = tape.reshape(attn, &[rows, m_heads * lk])?;

    let values = input
        .maps
        .iter()
        .map(|m| linear(tape, m.features, p.w_val, Some(p.b_val)))
        .collect::<Result<Vec<_>>>()?;
    let refs = tape.constant(input.refs.clone());

    let mut heads = Vec::with_capacity(m_heads);
    for h in 0..m_heads {
        let mut acc: Option<Var> = None;
        for (l, map) in input.maps.iter().enumerate() {
            let vh = tape.slice_cols(values[l], h * dh, (h + 1) * dh)?;
            let vmap = tape.reshape(vh, &[map.rows, map.cols, dh])?;
            for k in 0..cfg.points {
                let col = cfg.column(h, l, k);
                let delta = tape.slice_cols(offsets, 2 * col, 2 * col + 2)?;
                let pts = tape.add(refs, delta)?;
                let sampled = tape.bilinear_sample(vmap, pts)?;
                let weight = tape.slice_cols(attn, col, col + 1)?;
                let term = tape.mul_col(sampled, weight)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, term)?,
                    None => term,
                });
            }
        }
        heads.push(acc.expect("at least one level and point"));
    }
    let cat = tape.concat_cols(&heads)?;
    linear(tape, cat, p.w_out, Some(p.b_out))
}

/// Full layer: `FFN(norm(V + dropout(V)))`, or `x + FFN(x)` with
/// `x = norm(V + dropout(V))` when `ffn_residual` is set.
pub fn deform_layer(tape: &mut Tape, input: &DeformInput<'_>, p: &DeformParams, ctx: &mut RunCtx<'_>) -> Result<Var> {
    let v = deform_attention(tape, input, p)?;
    let dropped = tape.dropout(v, p.cfg.dropout, ctx.rng, ctx.training)?;
    let x = tape.add(v, dropped)?;
    let x = p.norm.forward(tape, x)?;
    let y = p.ffn.forward(tape, x)?;
    if p.cfg.ffn_residual {
        tape.add(x, y)
    } else {
        Ok(y)
    }
}

/// Applies `layers` in order, each re-encoding the queries against the same
/// maps and reference points. An empty stack is the identity.
pub fn stack_encoder(
    tape: &mut Tape,
    queries: Var,
    refs: &Tensor,
    maps: &[LevelMap],
    layers: &[DeformParams],
    ctx: &mut RunCtx<'_>,
) -> Result<Var> {
    let mut x = queries;
    for p in layers {
        x = deform_layer(tape, &DeformInput { queries: x, refs, maps }, p, ctx)?;
    }
    Ok(x)
}
