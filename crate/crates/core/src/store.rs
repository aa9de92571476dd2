//! On-disk layouts: datasets, checkpoints and CSV tables.
//!
//! Dataset directory:
//! ```text
//! manifest.json
//! scene_0000/scene.json        seed, size, objects, phrases
//! scene_0000/masks.dtf         n × (h·w) phrase masks
//! scene_0000/phrases.dtf       n × d phrase embeddings
//! scene_0000/features_l{2..5}.dtf
//! ```
//! Checkpoint directory: `manifest.json` (parameter names, files, shapes and
//! the attention geometry), `params/<name>.dtf`, `run_metadata.json`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dtf;
use crate::error::{Error, Result};
use crate::featuremaps::{gen_scene, Phrase, SceneConfig, SceneObject, LEVELS};
use crate::metrics::merge_plural;
use crate::model::ModelConfig;
use crate::nn::ParamStore;
use crate::train::Sample;

pub const DATASET_FORMAT: &str = "drmn-dataset";
pub const CHECKPOINT_FORMAT: &str = "drmn-checkpoint";

/// Seed of scene `index` in a dataset generated from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_string(path)?)
        .map_err(|e| Error::Format(format!("{}: line {} column {}: {e}", path.display(), e.line(), e.column())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub dir: String,
    pub seed: u64,
    pub phrases: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub scene_config: SceneConfig,
    pub scenes: Vec<SceneEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneMeta {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub objects: Vec<SceneObject>,
    pub phrases: Vec<Phrase>,
}

/// A loaded scene with the geometry needed for ground-truth unions.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredScene {
    pub meta: SceneMeta,
    pub sample: Sample,
}

impl StoredScene {
    /// Ground truth of phrase `j`: the union of its objects' masks.
    pub fn ground_truth(&self, j: usize) -> Result<Vec<bool>> {
        let (h, w) = (self.meta.height, self.meta.width);
        let masks: Vec<Vec<bool>> =
            self.meta.phrases[j].objects.iter().map(|&o| self.meta.objects[o].shape.rasterize(h, w)).collect();
        merge_plural(&masks)
    }
}

/// Generates `count` scenes from `seed` into `out`.
pub fn write_dataset(out: &Path, cfg: &SceneConfig, seed: u64, count: usize) -> Result<DatasetManifest> {
    cfg.validate()?;
    create_dir(out)?;
    let mut scenes = Vec::with_capacity(count);
    for i in 0..count {
        let s = scene_seed(seed, i);
        let scene = gen_scene(cfg, s)?;
        let sample = Sample::from_scene(&scene, cfg)?;
        let name = format!("scene_{i:04}");
        let dir = out.join(&name);
        create_dir(&dir)?;
        let meta = SceneMeta {
            seed: s,
            height: scene.height,
            width: scene.width,
            objects: scene.objects.clone(),
            phrases: scene.phrases.clone(),
        };
        write_json(&dir.join("scene.json"), &meta)?;
        dtf::write(&dir.join("masks.dtf"), &scene.masks)?;
        dtf::write(&dir.join("phrases.dtf"), &scene.embeddings)?;
        for (&l, f) in LEVELS.iter().zip(&sample.features) {
            dtf::write(&dir.join(format!("features_l{l}.dtf")), f)?;
        }
        scenes.push(SceneEntry { dir: name, seed: s, phrases: scene.phrases.len() });
    }
    let manifest =
        DatasetManifest { format: DATASET_FORMAT.into(), version: 1, seed, scene_config: cfg.clone(), scenes };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<StoredScene>)> {
    let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.format != DATASET_FORMAT || manifest.version != 1 {
        return Err(Error::Format(format!("{}: not a version-1 dataset", dir.display())));
    }
    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for entry in &manifest.scenes {
        let sd = dir.join(&entry.dir);
        let meta: SceneMeta = read_json(&sd.join("scene.json"))?;
        let masks = dtf::read(&sd.join("masks.dtf"))?;
        let embeddings = dtf::read(&sd.join("phrases.dtf"))?;
        let features =
            LEVELS.iter().map(|l| dtf::read(&sd.join(format!("features_l{l}.dtf")))).collect::<Result<Vec<_>>>()?;
        let n = meta.phrases.len();
        if masks.shape() != [n, meta.height * meta.width] || embeddings.rows() != n || entry.phrases != n {
            return Err(Error::Shape(format!("{}: phrase count disagrees between files", sd.display())));
        }
        let sample = Sample { height: meta.height, width: meta.width, features, embeddings, masks, phrases: meta.phrases.clone() };
        scenes.push(StoredScene { meta, sample });
    }
    Ok((manifest, scenes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub heads: usize,
    pub points: usize,
    pub ffn_ratio: usize,
    pub params: Vec<ParamEntry>,
}

/// Everything needed to rebuild the architecture and reproduce the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMetadata {
    pub crate_version: String,
    pub config: RunConfig,
    pub train_scenes: usize,
    pub steps: usize,
}

pub fn write_checkpoint(dir: &Path, params: &ParamStore, meta: &RunMetadata) -> Result<()> {
    let pdir = dir.join("params");
    create_dir(&pdir)?;
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        let file = format!("params/{name}.dtf");
        dtf::write(&dir.join(&file), t)?;
        entries.push(ParamEntry { name: name.clone(), file, shape: t.shape().to_vec() });
    }
    let m = &meta.config.model;
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        heads: m.heads,
        points: m.points,
        ffn_ratio: m.ffn_ratio,
        params: entries,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_json(&dir.join("run_metadata.json"), meta)
}

/// Loads a checkpoint and checks every parameter against the shapes implied
/// by its recorded architecture.
pub fn read_checkpoint(dir: &Path) -> Result<(ParamStore, RunMetadata)> {
    let manifest: CheckpointManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.version != 1 {
        return Err(Error::Format(format!("{}: not a version-1 checkpoint", dir.display())));
    }
    let meta: RunMetadata = read_json(&dir.join("run_metadata.json"))?;
    meta.config.validate()?;
    let model: &ModelConfig = &meta.config.model;
    if (model.heads, model.points, model.ffn_ratio) != (manifest.heads, manifest.points, manifest.ffn_ratio) {
        return Err(Error::Format("manifest geometry disagrees with run metadata".into()));
    }
    let expected = model.param_shapes()?;
    if expected.len() != manifest.params.len() {
        return Err(Error::Shape(format!(
            "checkpoint has {} parameters, architecture needs {}",
            manifest.params.len(),
            expected.len()
        )));
    }
    let mut store = ParamStore::new();
    for ((name, shape), entry) in expected.iter().zip(&manifest.params) {
        let t = dtf::read(&dir.join(&entry.file))?;
        if &entry.name != name || t.shape() != shape.as_slice() || entry.shape != *shape {
            return Err(Error::Shape(format!(
                "parameter {} {:?} does not match expected {name} {shape:?}",
                entry.name,
                t.shape()
            )));
        }
        store.insert(name.clone(), t);
    }
    Ok((store, meta))
}

/// Minimal CSV writer; fields never need quoting in the tables produced here.
#[derive(Default)]
pub struct Csv {
    text: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        let mut c = Self::default();
        c.row(header.iter().map(|s| s.to_string()));
        c
    }

    pub fn row<I: IntoIterator<Item = String>>(&mut self, fields: I) {
        let fields: Vec<String> = fields.into_iter().collect();
        let _ = writeln!(self.text, "{}", fields.join(","));
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, self.text.as_bytes())
    }
}

/// Parses a CSV produced by [`Csv`] into a header and rows.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = read_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty CSV", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, l) in lines.enumerate() {
        let row: Vec<String> = l.split(',').map(str::to_string).collect();
        if row.len() != header.len() {
            return Err(Error::Format(format!("{}: line {}: expected {} fields", path.display(), i + 2, header.len())));
        }
        rows.push(row);
    }
    Ok((header, rows))
}
