//! Multi-round phrase/pixel aggregation.
//!
//! Each round selects the `k` most similar pixels per phrase, injects the
//! phrase (and the pixels' positional codes) into them, re-encodes them
//! with a deformable layer over the frozen encoder-stage maps, updates the
//! phrase by multi-head cross-attention over the refined pixels, and finally
//! recomputes the similarity map against the updated pixel features.


use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::deform::{deform_layer, DeformInput, DeformParams, LevelMap, RunCtx};
use crate::error::{Error, Result};
use crate::matching::{similarity, upsample_maps};
use crate::nn::{linear, xavier, Bound, FfnParams, NormParams, ParamStore};
use crate::tensor::{RngState, Tensor};

/// Indices of the `k` largest entries of each row, largest first; equal
/// values are ordered by smaller index.
pub fn topk_select(h: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    let width = h.cols();
    if k == 0 || k > width {
        return Err(Error::Config(format!("top-k of {k} from {width} pixels")));
    }
    Ok((0..h.rows())
        .map(|j| {
            let row = h.row(j);
            let mut idx: Vec<usize> = (0..width).collect();
            let by = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
            if k < width {
                idx.select_nth_unstable_by(k - 1, by);
                idx.truncate(k);
            }
            idx.sort_by(by);
            idx
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossAttnConfig {
    pub channels: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub dropout: f64,
}

impl CrossAttnConfig {
    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }

    pub fn init(&self, store: &mut ParamStore, prefix: &str, rng: &mut RngState) -> Result<()> {
        self.validate()?;
        let (c, dh) = (self.channels, self.head_dim());
        for i in 0..self.heads {
            store.insert(format!("{prefix}.wq{i}"), xavier(rng, dh, dh, 1.0));
            store.insert(format!("{prefix}.wk{i}"), xavier(rng, dh, dh, 1.0));
            store.insert(format!("{prefix}.wv{i}"), xavier(rng, dh, dh, 1.0));
        }
        store.insert(format!("{prefix}.w_out"), xavier(rng, c, c, 1.0));
        store.insert(format!("{prefix}.b_out"), Tensor::zeros(&[c]));
        NormParams::init(store, prefix, c);
        FfnParams::init(store, prefix, c, c * self.ffn_ratio, rng);
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CrossAttnParams {
    pub cfg: CrossAttnConfig,
    pub wq: Vec<Var>,
    pub wk: Vec<Var>,
    pub wv: Vec<Var>,
    pub w_out: Var,
    pub b_out: Var,
    pub norm: NormParams,
    pub ffn: FfnParams,
}

impl CrossAttnParams {
    pub fn bind(bound: &Bound, prefix: &str, cfg: CrossAttnConfig) -> Result<Self> {
        let heads = |n: &str| (0..cfg.heads).map(|i| bound.var(&format!("{prefix}.{n}{i}"))).collect::<Result<Vec<_>>>();
        Ok(Self {
            cfg,
            wq: heads("wq")?,
            wk: heads("wk")?,
            wv: heads("wv")?,
            w_out: bound.var(&format!("{prefix}.w_out"))?,
            b_out: bound.var(&format!("{prefix}.b_out"))?,
            norm: NormParams::bind(bound, prefix)?,
            ffn: FfnParams::bind(bound, prefix)?,
        })
    }
}

pub struct CrossAttnOutput {
    /// Updated phrase row.
    pub phrase: Var,
    /// Concatenated head outputs before the output projection.
    pub heads: Var,
    /// Per-head `1 × k` attention weights.
    pub weights: Vec<Var>,
}

/// Multi-head attention of one phrase row over the selected pixel rows,
/// followed by `Ḡ = dropout(G + Ĝ)` and `Ĝ' = FFN(norm(Ĝ + Ḡ))`.
pub fn cross_attend(
    tape: &mut Tape,
    phrase: Var,
    pixels: Var,
    p: &CrossAttnParams,
    ctx: &mut RunCtx<'_>,
) -> Result<CrossAttnOutput> {
    let dh = p.cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(p.cfg.heads);
    let mut weights = Vec::with_capacity(p.cfg.heads);
    for i in 0..p.cfg.heads {
        let q = tape.slice_cols(phrase, i * dh, (i + 1) * dh)?;
        let kv = tape.slice_cols(pixels, i * dh, (i + 1) * dh)?;
        let q = tape.matmul(q, p.wq[i])?;
        let k = tape.matmul(kv, p.wk[i])?;
        let v = tape.matmul(kv, p.wv[i])?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, scale);
        let a = tape.softmax(scores, 1)?;
        outs.push(tape.matmul(a, v)?);
        weights.push(a);
    }
    let heads = tape.concat_cols(&outs)?;
    let g = linear(tape, heads, p.w_out, Some(p.b_out))?;
    let sum = tape.add(g, phrase)?;
    let gbar = tape.dropout(sum, p.cfg.dropout, ctx.rng, ctx.training)?;
    let x = tape.add(phrase, gbar)?;
    let x = p.norm.forward(tape, x)?;
    let phrase = p.ffn.forward(tape, x)?;
    Ok(CrossAttnOutput { phrase, heads, weights })
}

/// `F̂[s] + pos(s) + Ĝ[j]` for the selected rows `s`, as a `k × c` block.
pub fn inject_phrase(tape: &mut Tape, fhat: Var, s: &[usize], pos: &Tensor, phrase: Var) -> Result<Var> {
    let rows = tape.gather_rows(fhat, s)?;
    let pos = tape.constant(pos.gather_rows(s));
    let x = tape.add(rows, pos)?;
    tape.add_row(x, phrase)
}

/// Re-encodes the selected rows against the encoder-stage maps, using the
/// rows' own grid points as references.
pub fn refine_pixels(
    tape: &mut Tape,
    rows: Var,
    refs: &Tensor,
    maps: &[LevelMap],
    p: &DeformParams,
    ctx: &mut RunCtx<'_>,
) -> Result<Var> {
    deform_layer(tape, &DeformInput { queries: rows, refs, maps }, p, ctx)
}

/// Everything `run_rounds` needs besides the per-round parameters.
pub struct RoundInputs<'a> {
    /// Pixel features at the matching level, one row per cell.
    pub pixels: Var,
    /// Projected phrases, `n × c`.
    pub phrases: Var,
    /// Initial similarity map at the matching level.
    pub initial: Var,
    /// Encoder-stage multi-scale outputs, sampled by every refinement.
    pub maps: &'a [LevelMap],
    /// Matching-level grid points and their positional codes.
    pub grid: &'a Tensor,
    pub pos: &'a Tensor,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub upsample: usize,
}

pub struct RoundParams<'a> {
    pub refine: &'a DeformParams,
    pub cross: &'a CrossAttnParams,
}

pub struct RoundsOutput {
    /// Upsampled maps, initial map first; `rounds + 1` entries.
    pub history: Vec<Var>,
    /// Matching-level maps, same indexing as `history`.
    pub maps: Vec<Var>,
    /// Top-k selections used by each round.
    pub selections: Vec<Vec<Vec<usize>>>,
    pub pixels: Var,
    pub phrases: Vec<Var>,
}

/// Runs `rounds.len()` aggregation rounds. Phrases are processed in index
/// order within a round, so overlapping selections see earlier refinements.
pub fn run_rounds(
    tape: &mut Tape,
    input: &RoundInputs<'_>,
    rounds: &[RoundParams<'_>],
    k: usize,
    ctx: &mut RunCtx<'_>,
) -> Result<RoundsOutput> {
    let n = tape.value(input.phrases).rows();
    let mut fhat = input.pixels;
    let mut phrase_rows =
        (0..n).map(|j| tape.slice_rows(input.phrases, j, j + 1)).collect::<Result<Vec<_>>>()?;
    let mut h = input.initial;
    let mut maps = vec![h];
    let mut history = vec![upsample_maps(tape, h, input.grid_rows, input.grid_cols, input.upsample)?];
    let mut selections = Vec::with_capacity(rounds.len());

    for rp in rounds {
        let sel = topk_select(tape.value(h), k)?;
        for (j, s) in sel.iter().enumerate() {
            let injected = inject_phrase(tape, fhat, s, input.pos, phrase_rows[j])?;
            let refs = input.grid.gather_rows(s);
            let refined = refine_pixels(tape, injected, &refs, input.maps, rp.refine, ctx)?;
            fhat = tape.scatter_rows(fhat, refined, s)?;
            phrase_rows[j] = cross_attend(tape, phrase_rows[j], refined, rp.cross, ctx)?.phrase;
        }
        let ghat = tape.concat_rows(&phrase_rows)?;
        h = similarity(tape, ghat, fhat)?;
        maps.push(h);
        history.push(upsample_maps(tape, h, input.grid_rows, input.grid_cols, input.upsample)?);
        selections.push(sel);
    }
    Ok(RoundsOutput { history, maps, selections, pixels: fhat, phrases: phrase_rows })
}
