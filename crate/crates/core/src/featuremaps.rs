//! Multi-scale inputs: reference grids, sinusoidal positional codes, and the
//! procedural scene generator that stands in for pretrained image and text
//! encoders.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{RngState, Tensor};

/// Pyramid levels, strides `2^l`.
pub const LEVELS: [u32; 4] = [2, 3, 4, 5];
/// Level whose resolution the similarity maps live at.
pub const MATCH_LEVEL: u32 = 3;

/// Row-major flattened cell centres `((i+0.5)/rows, (j+0.5)/cols)`.
pub fn make_grid(rows: usize, cols: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols * 2);
    for i in 0..rows {
        for j in 0..cols {
            data.push((i as f64 + 0.5) / rows as f64);
            data.push((j as f64 + 0.5) / cols as f64);
        }
    }
    Tensor::from_parts(vec![rows * cols, 2], data)
}

/// 2D sinusoidal encoder: the first half of the channels encodes the row
/// coordinate, the second half the column coordinate, with `sin`/`cos`
/// interleaved at frequencies `temperature^(-2i / (c/2))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosEncoder {
    pub channels: usize,
    pub temperature: f64,
}

impl PosEncoder {
    pub fn new(channels: usize) -> Result<Self> {
        Self::with_temperature(channels, 10_000.0)
    }

    pub fn with_temperature(channels: usize, temperature: f64) -> Result<Self> {
        if channels == 0 || !channels.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "positional encoding needs channels divisible by 4, got {channels}"
            )));
        }
        Ok(Self { channels, temperature })
    }

    pub fn encode(&self, pts: &Tensor) -> Tensor {
        let half = self.channels / 2;
        let k = pts.rows();
        let mut out = vec![0.0; k * self.channels];
        for r in 0..k {
            for axis in 0..2 {
                let p = pts.get2(r, axis);
                for i in 0..half / 2 {
                    let freq = self.temperature.powf(-((2 * i) as f64) / half as f64);
                    let base = r * self.channels + axis * half + 2 * i;
                    out[base] = (p * freq).sin();
                    out[base + 1] = (p * freq).cos();
                }
            }
        }
        Tensor::from_parts(vec![k, self.channels], out)
    }
}

/// One pyramid level: flattened features, their reference points and grid shape.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLevel {
    pub level: u32,
    pub rows: usize,
    pub cols: usize,
    pub features: Tensor,
    pub ref_points: Tensor,
}

impl PyramidLevel {
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<PyramidLevel>,
    pub channels: usize,
}

impl FeaturePyramid {
    /// Assembles a pyramid from per-level features for an `h×w` image.
    pub fn from_features(height: usize, width: usize, features: Vec<Tensor>) -> Result<Self> {
        check_image_size(height, width)?;
        if features.len() != LEVELS.len() {
            return Err(Error::Shape(format!("expected {} levels", LEVELS.len())));
        }
        let channels = features[0].cols();
        let mut levels = Vec::with_capacity(4);
        for (&l, f) in LEVELS.iter().zip(features) {
            let (rows, cols) = (height >> l, width >> l);
            if f.rank() != 2 || f.rows() != rows * cols || f.cols() != channels {
                return Err(Error::Shape(format!(
                    "level {l} features {:?}, expected [{}, {channels}]",
                    f.shape(),
                    rows * cols
                )));
            }
            levels.push(PyramidLevel { level: l, rows, cols, features: f, ref_points: make_grid(rows, cols) });
        }
        Ok(Self { levels, channels })
    }

    pub fn level(&self, l: u32) -> &PyramidLevel {
        &self.levels[(l - LEVELS[0]) as usize]
    }

    pub fn total_rows(&self) -> usize {
        self.levels.iter().map(PyramidLevel::cells).sum()
    }
}

pub fn check_image_size(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || !height.is_multiple_of(32) || !width.is_multiple_of(32) {
        return Err(Error::Config(format!("image size {height}x{width} must be positive multiples of 32")));
    }
    Ok(())
}

/// Object geometry in pixel units; a pixel belongs to a shape when its
/// centre `(i+0.5, j+0.5)` does.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Disc { cy: f64, cx: f64, r: f64 },
    Rectangle { y0: f64, x0: f64, y1: f64, x1: f64 },
    /// Full-length band; `horizontal` bands span all columns.
    Stripe { horizontal: bool, start: f64, end: f64 },
}

impl Shape {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Disc { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Rectangle { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Stripe { horizontal, start, end } => {
                let t = if horizontal { y } else { x };
                t >= start && t < end
            }
        }
    }

    /// Stripes are amorphous "stuff"; discs and rectangles are "things".
    pub fn is_stuff(&self) -> bool {
        matches!(self, Shape::Stripe { .. })
    }

    pub fn rasterize(&self, height: usize, width: usize) -> Vec<bool> {
        let mut m = vec![false; height * width];
        for i in 0..height {
            for j in 0..width {
                m[i * width + j] = self.contains(i as f64 + 0.5, j as f64 + 0.5);
            }
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phrase {
    /// Indices into the scene's objects; more than one for plural phrases.
    pub objects: Vec<usize>,
    pub class: usize,
    pub plural: bool,
    pub stuff: bool,
}

/// Generator settings. `palette_seed` fixes the class vectors, background
/// and phrase-embedding map shared by every scene of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub phrase_dim: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub stuff_prob: f64,
    pub plural_prob: f64,
    pub noise_sigma: f64,
    pub phrase_noise: f64,
    pub palette_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: 32,
            phrase_dim: 32,
            num_classes: 12,
            min_objects: 2,
            max_objects: 4,
            stuff_prob: 0.3,
            plural_prob: 0.25,
            noise_sigma: 0.05,
            phrase_noise: 0.05,
            palette_seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        check_image_size(self.height, self.width)?;
        let bad = |m: String| Err(Error::Config(m));
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad(format!("object count range {}..={} invalid", self.min_objects, self.max_objects));
        }
        if self.channels == 0 || self.phrase_dim == 0 {
            return bad("channels and phrase_dim must be positive".into());
        }
        if self.num_classes < 2 * self.max_objects {
            return bad(format!(
                "num_classes {} too small for {} objects (need two per object)",
                self.num_classes, self.max_objects
            ));
        }
        for (name, p) in [("stuff_prob", self.stuff_prob), ("plural_prob", self.plural_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0,1]"));
            }
        }
        if self.noise_sigma < 0.0 || self.phrase_noise < 0.0 {
            return bad("noise levels must be non-negative".into());
        }
        Ok(())
    }

    /// Classes `0..num_classes/2` are things, the rest stuff.
    pub fn thing_classes(&self) -> usize {
        self.num_classes / 2
    }
}

/// Dataset-wide class vectors, background vector and phrase-embedding map.
#[derive(Clone, Debug, PartialEq)]
pub struct Palette {
    pub classes: Tensor,
    pub background: Vec<f64>,
    pub embed: Tensor,
}

impl Palette {
    pub fn new(cfg: &SceneConfig) -> Self {
        let mut rng = RngState::new(cfg.palette_seed).fork(0x9a1e);
        let classes = rng.normal_tensor(&[cfg.num_classes, cfg.channels], 1.0);
        let background = (0..cfg.channels).map(|i| if i % 2 == 0 { 0.5 } else { -0.5 }).collect();
        let scale = 1.0 / (cfg.channels as f64).sqrt();
        let embed = rng.normal_tensor(&[cfg.channels, cfg.phrase_dim], scale);
        Self { classes, background, embed }
    }

    pub fn class_vector(&self, class: usize) -> &[f64] {
        self.classes.row(class)
    }

    /// Phrase embedding for a class: the class vector through the shared
    /// embedding map plus seeded noise.
    pub fn embed_phrase(&self, class: usize, noise: f64, rng: &mut RngState) -> Vec<f64> {
        let cv = self.class_vector(class);
        let d = self.embed.cols();
        (0..d)
            .map(|k| {
                let v: f64 = cv.iter().enumerate().map(|(i, x)| x * self.embed.get2(i, k)).sum();
                v + noise * rng.normal()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub objects: Vec<SceneObject>,
    pub phrases: Vec<Phrase>,
    /// `n × (h·w)` binary ground truth, one row per phrase.
    pub masks: Tensor,
    /// `n × d` phrase embeddings.
    pub embeddings: Tensor,
}

impl SyntheticScene {
    pub fn object_mask(&self, i: usize) -> Vec<bool> {
        self.objects[i].shape.rasterize(self.height, self.width)
    }
}

fn random_shape(cfg: &SceneConfig, stuff: bool, rng: &mut RngState) -> Shape {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let short = h.min(w);
    if stuff {
        let horizontal = rng.bernoulli(0.5);
        let extent = if horizontal { h } else { w };
        let thick = rng.uniform_range(0.15, 0.35) * extent;
        let start = rng.uniform_range(0.0, extent - thick);
        Shape::Stripe { horizontal, start, end: start + thick }
    } else if rng.bernoulli(0.5) {
        let r = rng.uniform_range(0.12, 0.25) * short;
        Shape::Disc { cy: rng.uniform_range(r, h - r), cx: rng.uniform_range(r, w - r), r }
    } else {
        let sh = rng.uniform_range(0.2, 0.45) * h;
        let sw = rng.uniform_range(0.2, 0.45) * w;
        let y0 = rng.uniform_range(0.0, h - sh);
        let x0 = rng.uniform_range(0.0, w - sw);
        Shape::Rectangle { y0, x0, y1: y0 + sh, x1: x0 + sw }
    }
}

fn shuffled_prefix(n: usize, take: usize, rng: &mut RngState) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    for i in 0..take.min(n) {
        let j = i + rng.below(n - i);
        v.swap(i, j);
    }
    v.truncate(take);
    v
}

/// Generates a reproducible scene. With probability `plural_prob` (and at
/// least two objects) the first two or three objects become same-class
/// things grounded by one plural phrase whose mask is their union; every
/// other object gets its own singular phrase.
pub fn gen_scene(cfg: &SceneConfig, seed: u64) -> Result<SyntheticScene> {
    cfg.validate()?;
    let palette = Palette::new(cfg);
    let mut rng = RngState::new(seed);
    let count = cfg.min_objects + rng.below(cfg.max_objects - cfg.min_objects + 1);
    let group = if count >= 2 && rng.bernoulli(cfg.plural_prob) { 2 + rng.below(count.min(3) - 1) } else { 0 };

    let things = cfg.thing_classes();
    let mut thing_pool = shuffled_prefix(things, count, &mut rng).into_iter();
    let mut stuff_pool = shuffled_prefix(cfg.num_classes - things, count, &mut rng).into_iter().map(|c| c + things);

    let mut objects = Vec::with_capacity(count);
    let mut group_class = None;
    for i in 0..count {
        let stuff = i >= group && rng.bernoulli(cfg.stuff_prob);
        let class = if i < group {
            *group_class.get_or_insert_with(|| thing_pool.next().expect("pool sized to count"))
        } else if stuff {
            stuff_pool.next().expect("pool sized to count")
        } else {
            thing_pool.next().expect("pool sized to count")
        };
        let shape = loop {
            let s = random_shape(cfg, stuff, &mut rng);
            if s.rasterize(cfg.height, cfg.width).iter().any(|&b| b) {
                break s;
            }
        };
        objects.push(SceneObject { shape, class });
    }

    let mut phrases = Vec::new();
    if group > 0 {
        phrases.push(Phrase { objects: (0..group).collect(), class: objects[0].class, plural: true, stuff: false });
    }
    for (i, o) in objects.iter().enumerate().skip(group) {
        phrases.push(Phrase { objects: vec![i], class: o.class, plural: false, stuff: o.shape.is_stuff() });
    }

    let hw = cfg.height * cfg.width;
    let object_masks: Vec<Vec<bool>> = objects.iter().map(|o| o.shape.rasterize(cfg.height, cfg.width)).collect();
    let mut masks = vec![0.0; phrases.len() * hw];
    let mut embeddings = Vec::with_capacity(phrases.len() * cfg.phrase_dim);
    let mut emb_rng = rng.fork(1);
    for (j, p) in phrases.iter().enumerate() {
        for &o in &p.objects {
            for (k, &on) in object_masks[o].iter().enumerate() {
                if on {
                    masks[j * hw + k] = 1.0;
                }
            }
        }
        embeddings.extend(palette.embed_phrase(p.class, cfg.phrase_noise, &mut emb_rng));
    }
    let n = phrases.len();
    Ok(SyntheticScene {
        seed,
        height: cfg.height,
        width: cfg.width,
        objects,
        phrases,
        masks: Tensor::from_parts(vec![n, hw], masks),
        embeddings: Tensor::from_parts(vec![n, cfg.phrase_dim], embeddings),
    })
}

/// Per-pixel feature: mean class vector of the covering objects, or the
/// background vector where nothing covers the pixel.
fn pixel_features(scene: &SyntheticScene, palette: &Palette) -> Vec<f64> {
    let c = palette.background.len();
    let (h, w) = (scene.height, scene.width);
    let masks: Vec<Vec<bool>> = scene.objects.iter().map(|o| o.shape.rasterize(h, w)).collect();
    let mut out = vec![0.0; h * w * c];
    for p in 0..h * w {
        let px = &mut out[p * c..(p + 1) * c];
        let covering: Vec<usize> = (0..scene.objects.len()).filter(|&o| masks[o][p]).collect();
        if covering.is_empty() {
            px.copy_from_slice(&palette.background);
        } else {
            for &o in &covering {
                let cv = palette.class_vector(scene.objects[o].class);
                px.iter_mut().zip(cv).for_each(|(a, b)| *a += b / covering.len() as f64);
            }
        }
    }
    out
}

/// Level-`l` cell features are means of the pixel features inside each
/// `2^l × 2^l` block, plus Gaussian noise of standard deviation `sigma`.
pub fn synth_pyramid(
    scene: &SyntheticScene,
    cfg: &SceneConfig,
    sigma: f64,
    rng: &mut RngState,
) -> Result<FeaturePyramid> {
    check_image_size(scene.height, scene.width)?;
    let palette = Palette::new(cfg);
    let c = cfg.channels;
    let (h, w) = (scene.height, scene.width);
    let px = pixel_features(scene, &palette);
    let mut feats = Vec::with_capacity(4);
    for &l in &LEVELS {
        let s = 1usize << l;
        let (rows, cols) = (h / s, w / s);
        let mut f = vec![0.0; rows * cols * c];
        let inv = 1.0 / (s * s) as f64;
        for i in 0..rows {
            for j in 0..cols {
                let cell = &mut f[(i * cols + j) * c..(i * cols + j + 1) * c];
                for y in i * s..(i + 1) * s {
                    for x in j * s..(j + 1) * s {
                        let p = &px[(y * w + x) * c..(y * w + x + 1) * c];
                        cell.iter_mut().zip(p).for_each(|(a, b)| *a += b * inv);
                    }
                }
                if sigma > 0.0 {
                    cell.iter_mut().for_each(|a| *a += sigma * rng.normal());
                }
            }
        }
        feats.push(Tensor::from_parts(vec![rows * cols, c], f));
    }
    FeaturePyramid::from_features(h, w, feats)
}
