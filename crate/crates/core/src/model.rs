//! End-to-end grounding model: encoder over the pyramid, cross-scale fusion,
//! initial matching, then the aggregation rounds.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aggregation::{run_rounds, CrossAttnConfig, CrossAttnParams, RoundInputs, RoundParams, RoundsOutput};
use crate::autodiff::{Tape, Var};
use crate::deform::{stack_encoder, DeformConfig, DeformParams, LevelMap, RunCtx};
use crate::error::{Error, Result};
use crate::featuremaps::{check_image_size, make_grid, PosEncoder, LEVELS, MATCH_LEVEL};
use crate::matching::{fuse, project_phrases, resample_level, similarity};
use crate::nn::{xavier, Bound, ParamStore};
use crate::tensor::{RngState, Tensor};

/// How the refinement-stage layers are parameterised across rounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    /// One refinement deformable layer and one cross-attention block,
    /// distinct from the encoder and reused by every round.
    Shared,
    /// Separate refinement and cross-attention parameters per round.
    PerRound,
    /// Refinement reuses the last encoder layer; cross-attention is shared.
    Encoder,
}

impl fmt::Display for Sharing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sharing::Shared => "shared",
            Sharing::PerRound => "per_round",
            Sharing::Encoder => "encoder",
        })
    }
}

impl FromStr for Sharing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(Sharing::Shared),
            "per_round" => Ok(Sharing::PerRound),
            "encoder" => Ok(Sharing::Encoder),
            other => Err(Error::Config(format!("unknown sharing scheme {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub phrase_dim: usize,
    pub heads: usize,
    pub points: usize,
    pub ffn_ratio: usize,
    pub dropout: f64,
    pub ffn_residual: bool,
    pub encoder_layers: usize,
    pub rounds: usize,
    pub topk: usize,
    pub sharing: Sharing,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            phrase_dim: 32,
            heads: 4,
            points: 4,
            ffn_ratio: 2,
            dropout: 0.1,
            ffn_residual: false,
            encoder_layers: 2,
            rounds: 3,
            topk: 50,
            sharing: Sharing::Shared,
        }
    }
}

/// Level-3 cells per image side ratio.
pub const UPSAMPLE: usize = 1 << MATCH_LEVEL;

impl ModelConfig {
    pub fn deform(&self) -> DeformConfig {
        DeformConfig {
            channels: self.channels,
            heads: self.heads,
            points: self.points,
            levels: LEVELS.len(),
            ffn_ratio: self.ffn_ratio,
            dropout: self.dropout,
            ffn_residual: self.ffn_residual,
        }
    }

    pub fn cross(&self) -> CrossAttnConfig {
        CrossAttnConfig { channels: self.channels, heads: self.heads, ffn_ratio: self.ffn_ratio, dropout: self.dropout }
    }

    pub fn validate(&self) -> Result<()> {
        self.deform().validate()?;
        self.cross().validate()?;
        PosEncoder::new(self.channels)?;
        if self.phrase_dim == 0 {
            return Err(Error::Config("phrase_dim must be positive".into()));
        }
        if self.topk == 0 {
            return Err(Error::Config("topk must be positive".into()));
        }
        if self.sharing == Sharing::Encoder && self.encoder_layers == 0 && self.rounds > 0 {
            return Err(Error::Config("sharing=encoder needs at least one encoder layer".into()));
        }
        Ok(())
    }

    fn refine_prefix(&self, round: usize) -> String {
        match self.sharing {
            Sharing::Shared => "ref".into(),
            Sharing::PerRound => format!("ref{round}"),
            Sharing::Encoder => format!("enc{}", self.encoder_layers - 1),
        }
    }

    fn cross_prefix(&self, round: usize) -> String {
        match self.sharing {
            Sharing::PerRound => format!("xattn{round}"),
            _ => "xattn".into(),
        }
    }

    /// Fresh parameters: fan-based uniform weights, zero biases, unit norms.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut rng = RngState::new(seed);
        let mut store = ParamStore::new();
        store.insert("vg", xavier(&mut rng, self.phrase_dim, self.channels, 1.0));
        let d = self.deform();
        for t in 0..self.encoder_layers {
            d.init(&mut store, &format!("enc{t}"), &mut rng)?;
        }
        let mut seen = std::collections::BTreeSet::new();
        for i in 0..self.rounds {
            let rp = self.refine_prefix(i);
            if !rp.starts_with("enc") && seen.insert(rp.clone()) {
                d.init(&mut store, &rp, &mut rng)?;
            }
            let cp = self.cross_prefix(i);
            if seen.insert(cp.clone()) {
                self.cross().init(&mut store, &cp, &mut rng)?;
            }
        }
        Ok(store)
    }

    /// Parameter names and shapes implied by the architecture.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        Ok(self.init_params(0)?.iter().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect())
    }
}

/// One scene's model inputs.
pub struct ModelInput<'a> {
    pub height: usize,
    pub width: usize,
    /// Flattened per-level features, levels 2..=5.
    pub features: &'a [Tensor],
    /// Phrase embeddings, `n × d`.
    pub embeddings: &'a Tensor,
}

pub struct ModelOutput {
    pub rounds: RoundsOutput,
    /// Encoder output across all levels, before fusion.
    pub encoded: Var,
    /// Fused matching-level pixel features.
    pub fused: Var,
    pub phrases: Var,
}

pub fn forward(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    input: &ModelInput<'_>,
    ctx: &mut RunCtx<'_>,
) -> Result<ModelOutput> {
    check_image_size(input.height, input.width)?;
    if input.features.len() != LEVELS.len() {
        return Err(Error::Shape(format!("{} feature levels, expected {}", input.features.len(), LEVELS.len())));
    }
    if input.embeddings.cols() != cfg.phrase_dim {
        return Err(Error::Shape(format!(
            "phrase width {} vs configured {}",
            input.embeddings.cols(),
            cfg.phrase_dim
        )));
    }
    let enc = PosEncoder::new(cfg.channels)?;
    let mut raw = Vec::with_capacity(4);
    let mut queries = Vec::with_capacity(4);
    let mut grids = Vec::with_capacity(4);
    for (&l, f) in LEVELS.iter().zip(input.features) {
        let (rows, cols) = (input.height >> l, input.width >> l);
        if f.rows() != rows * cols || f.cols() != cfg.channels {
            return Err(Error::Shape(format!("level {l} features {:?}", f.shape())));
        }
        let grid = make_grid(rows, cols);
        let fv = tape.constant(f.clone());
        let pos = tape.constant(enc.encode(&grid));
        queries.push(tape.add(fv, pos)?);
        raw.push(LevelMap { features: fv, rows, cols });
        grids.push(grid);
    }
    let fhat = tape.concat_rows(&queries)?;
    let refs = Tensor::from_parts(
        vec![grids.iter().map(Tensor::rows).sum(), 2],
        grids.iter().flat_map(|g| g.data().iter().copied()).collect(),
    );

    let layers = (0..cfg.encoder_layers)
        .map(|t| DeformParams::bind(bound, &format!("enc{t}"), cfg.deform()))
        .collect::<Result<Vec<_>>>()?;
    let encoded = stack_encoder(tape, fhat, &refs, &raw, &layers, ctx)?;

    // Split back into levels and fuse at the matching resolution.
    let (mr, mc) = (input.height >> MATCH_LEVEL, input.width >> MATCH_LEVEL);
    let mut maps = Vec::with_capacity(4);
    let mut resampled = Vec::with_capacity(4);
    let mut start = 0;
    for m in &raw {
        let end = start + m.rows * m.cols;
        let part = tape.slice_rows(encoded, start, end)?;
        let lm = LevelMap { features: part, rows: m.rows, cols: m.cols };
        resampled.push(resample_level(tape, lm, mr, mc)?);
        maps.push(lm);
        start = end;
    }
    let fused = fuse(tape, &resampled)?;

    let g = tape.constant(input.embeddings.clone());
    let phrases = project_phrases(tape, g, bound.var("vg")?)?;
    let initial = similarity(tape, phrases, fused)?;

    let refine = (0..cfg.rounds)
        .map(|i| DeformParams::bind(bound, &cfg.refine_prefix(i), cfg.deform()))
        .collect::<Result<Vec<_>>>()?;
    let cross = (0..cfg.rounds)
        .map(|i| CrossAttnParams::bind(bound, &cfg.cross_prefix(i), cfg.cross()))
        .collect::<Result<Vec<_>>>()?;
    let round_params: Vec<RoundParams<'_>> =
        refine.iter().zip(&cross).map(|(r, c)| RoundParams { refine: r, cross: c }).collect();

    let grid = make_grid(mr, mc);
    let pos = enc.encode(&grid);
    let inputs = RoundInputs {
        pixels: fused,
        phrases,
        initial,
        maps: &maps,
        grid: &grid,
        pos: &pos,
        grid_rows: mr,
        grid_cols: mc,
        upsample: UPSAMPLE,
    };
    let rounds = run_rounds(tape, &inputs, &round_params, cfg.topk, ctx)?;
    Ok(ModelOutput { rounds, encoded, fused, phrases })
}

/// Runs the model without gradients and returns the upsampled map history.
pub fn predict(
    params: &ParamStore,
    cfg: &ModelConfig,
    input: &ModelInput<'_>,
    rng: &mut RngState,
) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = forward(&mut tape, &bound, cfg, input, &mut RunCtx::eval(rng))?;
    Ok(out.rounds.history.iter().map(|&v| tape.value(v).clone()).collect())
}
