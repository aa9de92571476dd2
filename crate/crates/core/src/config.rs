//! Plain-text `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional and
//! defaults to the value printed by `show-config`; unknown or repeated keys
//! are rejected with the offending line number.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featuremaps::SceneConfig;
use crate::loss::{LossConfig, THRESHOLD};
use crate::model::{ModelConfig, Sharing};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scenes: usize,
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenes: 200,
            scene: SceneConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            threshold: THRESHOLD,
        }
    }
}

/// Every key in printing order, grouped by section.
pub const KEYS: &[&str] = &[
    "seed",
    "scenes",
    "height",
    "width",
    "channels",
    "phrase_dim",
    "num_classes",
    "min_objects",
    "max_objects",
    "stuff_prob",
    "plural_prob",
    "noise_sigma",
    "phrase_noise",
    "palette_seed",
    "heads",
    "points",
    "ffn_ratio",
    "dropout",
    "ffn_residual",
    "encoder_layers",
    "rounds",
    "topk",
    "sharing",
    "lambda_bce",
    "lambda_dice",
    "dice_eps",
    "threshold",
    "lr",
    "epochs",
    "batch_size",
    "beta1",
    "beta2",
    "adam_eps",
];

fn parse<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: invalid value {value:?} for {key}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected `key = value`, got {body:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) && KEYS.contains(&key) {
                return Err(Error::Config(format!("line {line}: duplicate key {key}")));
            }
            cfg.set(key, value, line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn set(&mut self, key: &str, v: &str, line: usize) -> Result<()> {
        let (s, m, l, t) = (&mut self.scene, &mut self.model, &mut self.loss, &mut self.train);
        match key {
            "seed" => self.seed = parse(key, v, line)?,
            "scenes" => self.scenes = parse(key, v, line)?,
            "height" => s.height = parse(key, v, line)?,
            "width" => s.width = parse(key, v, line)?,
            "channels" => {
                s.channels = parse(key, v, line)?;
                m.channels = s.channels;
            }
            "phrase_dim" => {
                s.phrase_dim = parse(key, v, line)?;
                m.phrase_dim = s.phrase_dim;
            }
            "num_classes" => s.num_classes = parse(key, v, line)?,
            "min_objects" => s.min_objects = parse(key, v, line)?,
            "max_objects" => s.max_objects = parse(key, v, line)?,
            "stuff_prob" => s.stuff_prob = parse(key, v, line)?,
            "plural_prob" => s.plural_prob = parse(key, v, line)?,
            "noise_sigma" => s.noise_sigma = parse(key, v, line)?,
            "phrase_noise" => s.phrase_noise = parse(key, v, line)?,
            "palette_seed" => s.palette_seed = parse(key, v, line)?,
            "heads" => m.heads = parse(key, v, line)?,
            "points" => m.points = parse(key, v, line)?,
            "ffn_ratio" => m.ffn_ratio = parse(key, v, line)?,
            "dropout" => m.dropout = parse(key, v, line)?,
            "ffn_residual" => m.ffn_residual = parse(key, v, line)?,
            "encoder_layers" => m.encoder_layers = parse(key, v, line)?,
            "rounds" => m.rounds = parse(key, v, line)?,
            "topk" => m.topk = parse(key, v, line)?,
            "sharing" => {
                m.sharing = v.parse::<Sharing>().map_err(|e| Error::Config(format!("line {line}: {e}")))?
            }
            "lambda_bce" => l.lambda_bce = parse(key, v, line)?,
            "lambda_dice" => l.lambda_dice = parse(key, v, line)?,
            "dice_eps" => l.dice_eps = parse(key, v, line)?,
            "threshold" => self.threshold = parse(key, v, line)?,
            "lr" => t.lr = parse(key, v, line)?,
            "epochs" => t.epochs = parse(key, v, line)?,
            "batch_size" => t.batch_size = parse(key, v, line)?,
            "beta1" => t.beta1 = parse(key, v, line)?,
            "beta2" => t.beta2 = parse(key, v, line)?,
            "adam_eps" => t.adam_eps = parse(key, v, line)?,
            other => return Err(Error::Config(format!("line {line}: unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.scene.channels != self.model.channels || self.scene.phrase_dim != self.model.phrase_dim {
            return Err(Error::Config("scene and model widths disagree".into()));
        }
        if self.scenes == 0 {
            return Err(Error::Config("scenes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }

    fn value(&self, key: &str) -> String {
        let (s, m, l, t) = (&self.scene, &self.model, &self.loss, &self.train);
        match key {
            "seed" => self.seed.to_string(),
            "scenes" => self.scenes.to_string(),
            "height" => s.height.to_string(),
            "width" => s.width.to_string(),
            "channels" => s.channels.to_string(),
            "phrase_dim" => s.phrase_dim.to_string(),
            "num_classes" => s.num_classes.to_string(),
            "min_objects" => s.min_objects.to_string(),
            "max_objects" => s.max_objects.to_string(),
            "stuff_prob" => s.stuff_prob.to_string(),
            "plural_prob" => s.plural_prob.to_string(),
            "noise_sigma" => s.noise_sigma.to_string(),
            "phrase_noise" => s.phrase_noise.to_string(),
            "palette_seed" => s.palette_seed.to_string(),
            "heads" => m.heads.to_string(),
            "points" => m.points.to_string(),
            "ffn_ratio" => m.ffn_ratio.to_string(),
            "dropout" => m.dropout.to_string(),
            "ffn_residual" => m.ffn_residual.to_string(),
            "encoder_layers" => m.encoder_layers.to_string(),
            "rounds" => m.rounds.to_string(),
            "topk" => m.topk.to_string(),
            "sharing" => m.sharing.to_string(),
            "lambda_bce" => l.lambda_bce.to_string(),
            "lambda_dice" => l.lambda_dice.to_string(),
            "dice_eps" => l.dice_eps.to_string(),
            "threshold" => self.threshold.to_string(),
            "lr" => t.lr.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "beta1" => t.beta1.to_string(),
            "beta2" => t.beta2.to_string(),
            "adam_eps" => t.adam_eps.to_string(),
            _ => unreachable!("key list and accessor out of sync"),
        }
    }

    /// The configuration in the same format `parse` accepts.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, key) in KEYS.iter().enumerate() {
            let header = match i {
                0 => Some("run"),
                2 => Some("scenes"),
                14 => Some("model"),
                23 => Some("loss and inference"),
                27 => Some("optimiser"),
                _ => None,
            };
            if let Some(h) = header {
                if i > 0 {
                    out.push('\n');
                }
                let _ = writeln!(out, "# {h}");
            }
            let _ = writeln!(out, "{key} = {}", self.value(key));
        }
        out
    }
}
