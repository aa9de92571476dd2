//! Mini-batch Adam training over synthetic samples.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::deform::RunCtx;
use crate::error::{Error, Result};
use crate::featuremaps::{synth_pyramid, Phrase, SceneConfig, SyntheticScene};
use crate::loss::{total_loss, LossConfig, LossParts};
use crate::model::{forward, ModelConfig, ModelInput};
use crate::nn::ParamStore;
use crate::tensor::{RngState, Tensor};

/// One training/evaluation example: pyramid features, phrases and masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    pub features: Vec<Tensor>,
    pub embeddings: Tensor,
    pub masks: Tensor,
    pub phrases: Vec<Phrase>,
}

impl Sample {
    /// Synthesises the pyramid for `scene` with noise drawn from a stream
    /// keyed by the scene seed.
    pub fn from_scene(scene: &SyntheticScene, cfg: &SceneConfig) -> Result<Self> {
        let mut rng = RngState::new(scene.seed).fork(0xfea7);
        let pyr = synth_pyramid(scene, cfg, cfg.noise_sigma, &mut rng)?;
        Ok(Self {
            height: scene.height,
            width: scene.width,
            features: pyr.levels.into_iter().map(|l| l.features).collect(),
            embeddings: scene.embeddings.clone(),
            masks: scene.masks.clone(),
            phrases: scene.phrases.clone(),
        })
    }

    pub fn input(&self) -> ModelInput<'_> {
        ModelInput { height: self.height, width: self.width, features: &self.features, embeddings: &self.embeddings }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-4, epochs: 20, batch_size: 10, seed: 0, beta1: 0.9, beta2: 0.999, adam_eps: 1e-8 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(Error::Config("Adam betas must lie in [0,1) and eps be positive".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                *w -= cfg.lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Loss and parameter gradients for one sample.
pub fn sample_grads(
    params: &ParamStore,
    model: &ModelConfig,
    loss: &LossConfig,
    sample: &Sample,
    rng: &mut RngState,
    training: bool,
) -> Result<(LossParts, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = forward(&mut tape, &bound, model, &sample.input(), &mut RunCtx { rng, training })?;
    let (l, parts) = total_loss(&mut tape, &out.rounds.history, &sample.masks, loss)?;
    tape.backward(l)?;
    Ok((parts, bound.grads(&tape)))
}

/// Forward-only loss for one sample in eval mode.
pub fn sample_loss(params: &ParamStore, model: &ModelConfig, loss: &LossConfig, sample: &Sample) -> Result<LossParts> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut rng = RngState::new(0);
    let out = forward(&mut tape, &bound, model, &sample.input(), &mut RunCtx::eval(&mut rng))?;
    Ok(total_loss(&mut tape, &out.rounds.history, &sample.masks, loss)?.1)
}

/// Mean losses of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub total: f64,
    pub bce: f64,
    pub dice: f64,
    pub per_round: Vec<f64>,
}

pub struct TrainOutcome {
    pub params: ParamStore,
    pub trace: Vec<TraceRow>,
}

/// Deterministic per-sample stream for dropout.
fn sample_rng(seed: u64, epoch: usize, index: usize) -> RngState {
    RngState::new(seed).fork(((epoch as u64) << 32) | index as u64)
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = RngState::new(seed).fork(u64::MAX - epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.below(i + 1));
    }
    order
}

/// Trains `params` in place of a copy; the input store is untouched.
pub fn train(
    dataset: &[Sample],
    params: &ParamStore,
    model: &ModelConfig,
    loss: &LossConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Contract("training on an empty dataset".into()));
    }
    cfg.validate()?;
    loss.validate()?;
    model.validate()?;
    let mut params = params.clone();
    let mut adam = Adam::default();
    let mut trace = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, dataset.len());
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut row = TraceRow { step, total: 0.0, bce: 0.0, dice: 0.0, per_round: Vec::new() };
            for &i in batch {
                let mut rng = sample_rng(cfg.seed, epoch, i);
                let (parts, grads) =
                    sample_grads(&params, model, loss, &dataset[i], &mut rng, true).map_err(|e| match e {
                        Error::NonFinite(detail) => Error::Diverged { step, detail },
                        e => e,
                    })?;
                if !parts.total.is_finite() {
                    return Err(Error::Diverged { step, detail: format!("loss {} on sample {i}", parts.total) });
                }
                row.total += scale * parts.total;
                row.bce += scale * parts.bce;
                row.dice += scale * parts.dice;
                row.per_round.resize(parts.per_round.len(), 0.0);
                row.per_round.iter_mut().zip(&parts.per_round).for_each(|(a, b)| *a += scale * b);
                for (name, g) in grads {
                    match acc.get_mut(&name) {
                        Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(p, q)| *p += scale * q),
                        None => {
                            acc.insert(name, g.map(|q| q * scale));
                        }
                    }
                }
            }
            if let Some((name, _)) = acc.iter().find(|(_, g)| g.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged { step, detail: format!("non-finite gradient for {name}") });
            }
            adam.step(&mut params, &acc, cfg);
            if let Some((name, _)) = params.iter().find(|(_, p)| p.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged { step, detail: format!("parameter {name} became non-finite") });
            }
            trace.push(row);
            step += 1;
        }
    }
    Ok(TrainOutcome { params, trace })
}
