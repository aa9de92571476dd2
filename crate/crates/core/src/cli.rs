//! Command-line entry points. Exit codes: 0 ok, 1 usage, 2 validation or
//! IO, 3 numeric abort.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::cluster::{alternate, ClusterProblem};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{default_thresholds, iou, CategoryCurves, EvalRecord};
use crate::loss::infer;
use crate::model::{predict, ModelConfig};
use crate::nn::ParamStore;
use crate::store::{read_checkpoint, read_csv, read_dataset, write_checkpoint, write_dataset, Csv, RunMetadata, StoredScene};
use crate::tensor::RngState;
use crate::train::{train, TraceRow};

/// Tolerance on objective increases before `oracle` fails.
pub const MONOTONE_TOL: f64 = 1e-12;

#[derive(Parser, Debug)]
#[command(name = "drmn", version, about = "Phrase-to-pixel grounding with deformable attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData {
        /// Config file (`key = value` lines); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from fresh parameters and write a checkpoint directory.
    Train {
        /// Config file (`key = value` lines); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset directory from `gen-data`.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint: per-round AR table, per-phrase IoUs, curves.
    Eval {
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory to evaluate on.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for CSV files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute the AR table and curves from an eval directory's ious.csv.
    Curves {
        /// Eval output directory containing ious.csv.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the recomputed CSV files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the alternating cluster solver on a JSON problem.
    Oracle {
        /// JSON problem file.
        problem: PathBuf,
        /// Write oracle_trace.csv here instead of printing to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the effective configuration.
    ShowConfig {
        /// Config file (`key = value` lines); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<String> {
    cfg.validate()?;
    let m = write_dataset(out, &cfg.scene, cfg.seed, cfg.scenes)?;
    Ok(format!("wrote {} scenes to {}\n", m.scenes.len(), out.display()))
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

pub fn trace_csv(trace: &[TraceRow], rounds: usize) -> Csv {
    let mut header = vec!["step".to_string(), "total".into(), "bce".into(), "dice".into()];
    header.extend((0..=rounds).map(|r| format!("round{r}")));
    let mut csv = Csv::new(&header.iter().map(String::as_str).collect::<Vec<_>>());
    for r in trace {
        let mut row = vec![r.step.to_string(), fmt(r.total), fmt(r.bce), fmt(r.dice)];
        row.extend(r.per_round.iter().map(|&v| fmt(v)));
        csv.row(row);
    }
    csv
}

pub fn train_cmd(cfg: &RunConfig, data: &Path, out: &Path) -> Result<String> {
    cfg.validate()?;
    let (manifest, scenes) = read_dataset(data)?;
    if manifest.scene_config.channels != cfg.model.channels || manifest.scene_config.phrase_dim != cfg.model.phrase_dim {
        return Err(Error::Config("dataset feature widths differ from the model configuration".into()));
    }
    let samples: Vec<_> = scenes.into_iter().map(|s| s.sample).collect();
    let mut cfg = cfg.clone();
    cfg.train.seed = cfg.seed;
    let init = cfg.model.init_params(cfg.seed)?;
    let outcome = train(&samples, &init, &cfg.model, &cfg.loss, &cfg.train)?;
    let meta = RunMetadata {
        crate_version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        train_scenes: samples.len(),
        steps: outcome.trace.len(),
    };
    write_checkpoint(out, &outcome.params, &meta)?;
    trace_csv(&outcome.trace, cfg.model.rounds).write(&out.join("loss_trace.csv"))?;
    let last = outcome.trace.last().map_or(String::from("n/a"), |r| fmt(r.total));
    Ok(format!("trained {} steps on {} scenes, final batch loss {last}\n", outcome.trace.len(), samples.len()))
}

/// One phrase's IoU after one round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhraseIou {
    pub scene: usize,
    pub phrase: usize,
    pub round: usize,
    pub record: EvalRecord,
}

/// IoU of every phrase after every round (round 0 is the initial matching).
pub fn evaluate(
    params: &ParamStore,
    model: &ModelConfig,
    threshold: f64,
    scenes: &[StoredScene],
) -> Result<Vec<PhraseIou>> {
    let mut out = Vec::new();
    let mut rng = RngState::new(0);
    for (si, scene) in scenes.iter().enumerate() {
        let history = predict(params, model, &scene.sample.input(), &mut rng)?;
        let gts = (0..scene.meta.phrases.len()).map(|j| scene.ground_truth(j)).collect::<Result<Vec<_>>>()?;
        for (round, h) in history.iter().enumerate() {
            for (j, pred) in infer(h, threshold).iter().enumerate() {
                let p = &scene.meta.phrases[j];
                let record = EvalRecord { iou: iou(pred, &gts[j])?, stuff: p.stuff, plural: p.plural };
                out.push(PhraseIou { scene: si, phrase: j, round, record });
            }
        }
    }
    Ok(out)
}

const CATEGORY_HEADER: [&str; 5] = ["overall", "things", "stuff", "singulars", "plurals"];

/// Writes `ar_by_round.csv` and `curves_round{r}.csv`; returns the table text.
pub fn write_summaries(ious: &[PhraseIou], out: &Path) -> Result<String> {
    let rounds = ious.iter().map(|p| p.round + 1).max().unwrap_or(0);
    let th = default_thresholds();
    let mut header = vec!["round"];
    header.extend(CATEGORY_HEADER);
    let mut table = Csv::new(&header);
    for r in 0..rounds {
        let recs: Vec<EvalRecord> = ious.iter().filter(|p| p.round == r).map(|p| p.record).collect();
        let curves = CategoryCurves::compute(&recs, &th)?;
        let mut row = vec![r.to_string()];
        row.extend(curves.areas().iter().map(|a| a.map_or(String::new(), fmt)));
        table.row(row);

        let mut header = vec!["threshold"];
        header.extend(CATEGORY_HEADER);
        let mut csv = Csv::new(&header);
        let all = [Some(&curves.overall), curves.things.as_ref(), curves.stuff.as_ref(), curves.singulars.as_ref(), curves.plurals.as_ref()];
        for (i, &t) in th.iter().enumerate() {
            let mut row = vec![fmt(t)];
            row.extend(all.iter().map(|c| c.map_or(String::new(), |c| fmt(c.recall[i]))));
            csv.row(row);
        }
        csv.write(&out.join(format!("curves_round{r}.csv")))?;
    }
    table.write(&out.join("ar_by_round.csv"))?;
    Ok(table.as_str().to_string())
}

pub fn ious_csv(ious: &[PhraseIou]) -> Csv {
    let mut csv = Csv::new(&["scene", "phrase", "round", "iou", "stuff", "plural"]);
    for p in ious {
        csv.row([
            p.scene.to_string(),
            p.phrase.to_string(),
            p.round.to_string(),
            fmt(p.record.iou),
            (p.record.stuff as u8).to_string(),
            (p.record.plural as u8).to_string(),
        ]);
    }
    csv
}

pub fn read_ious(path: &Path) -> Result<Vec<PhraseIou>> {
    let (header, rows) = read_csv(path)?;
    if header != ["scene", "phrase", "round", "iou", "stuff", "plural"] {
        return Err(Error::Format(format!("{}: unexpected header", path.display())));
    }
    let bad = |i: usize| Error::Format(format!("{}: line {}: malformed field", path.display(), i + 2));
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let u = |k: usize| r[k].parse::<usize>().map_err(|_| bad(i));
            let flag = |k: usize| match r[k].as_str() {
                "0" => Ok(false),
                "1" => Ok(true),
                _ => Err(bad(i)),
            };
            Ok(PhraseIou {
                scene: u(0)?,
                phrase: u(1)?,
                round: u(2)?,
                record: EvalRecord { iou: r[3].parse().map_err(|_| bad(i))?, stuff: flag(4)?, plural: flag(5)? },
            })
        })
        .collect()
}

pub fn eval_cmd(checkpoint: &Path, data: &Path, out: &Path) -> Result<String> {
    let (params, meta) = read_checkpoint(checkpoint)?;
    let (_, scenes) = read_dataset(data)?;
    let ious = evaluate(&params, &meta.config.model, meta.config.threshold, &scenes)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    ious_csv(&ious).write(&out.join("ious.csv"))?;
    write_summaries(&ious, out)
}

pub fn curves_cmd(data: &Path, out: &Path) -> Result<String> {
    let ious = read_ious(&data.join("ious.csv"))?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_summaries(&ious, out)
}

pub fn load_problem(path: &Path) -> Result<ClusterProblem> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let p: ClusterProblem = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: line {} column {}: {e}", path.display(), e.line(), e.column())))?;
    p.validate()?;
    Ok(p)
}

/// Runs the solver; the trace is returned even when monotonicity fails so
/// it can be written before exiting.
pub fn oracle_cmd(problem: &ClusterProblem) -> Result<(Csv, Option<Error>)> {
    let trace = alternate(problem)?;
    let mut csv = Csv::new(&["iter", "objective"]);
    for (i, &o) in trace.objectives.iter().enumerate() {
        csv.row([i.to_string(), fmt(o)]);
    }
    let violation = trace.first_increase(MONOTONE_TOL).map(|iter| Error::NotMonotone {
        iter,
        before: trace.objectives[iter - 1],
        after: trace.objectives[iter],
    });
    Ok((csv, violation))
}

/// Runs a parsed command, returning stdout text.
pub fn execute(cmd: &Command) -> Result<String> {
    match cmd {
        Command::GenData { config, seed, out } => gen_data(&load_config(config.as_deref(), *seed)?, out),
        Command::Train { config, seed, data, out } => train_cmd(&load_config(config.as_deref(), *seed)?, data, out),
        Command::Eval { checkpoint, data, out } => eval_cmd(checkpoint, data, out),
        Command::Curves { data, out } => curves_cmd(data, out),
        Command::Oracle { problem, out } => {
            let (csv, violation) = oracle_cmd(&load_problem(problem)?)?;
            let text = match out {
                Some(dir) => {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                    csv.write(&dir.join("oracle_trace.csv"))?;
                    String::new()
                }
                None => csv.as_str().to_string(),
            };
            match violation {
                Some(e) => {
                    print!("{text}");
                    Err(e)
                }
                None => Ok(text),
            }
        }
        Command::ShowConfig { config, seed } => Ok(load_config(config.as_deref(), *seed)?.render()),
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
