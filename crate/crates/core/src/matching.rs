//! Cross-scale fusion at the matching resolution and phrase-to-pixel
//! similarity maps.

use crate::autodiff::{Tape, Var};
use crate::deform::LevelMap;
use crate::error::{Error, Result};
use crate::featuremaps::make_grid;
use crate::tensor::Tensor;

/// Bilinearly resamples a flattened level map onto a `rows × cols` grid of
/// cell centres. Same-shape requests return the input unchanged.
pub fn resample_level(tape: &mut Tape, map: LevelMap, rows: usize, cols: usize) -> Result<Var> {
    if map.rows == rows && map.cols == cols {
        return Ok(map.features);
    }
    let c = tape.value(map.features).cols();
    let grid = tape.constant(make_grid(rows, cols));
    let m = tape.reshape(map.features, &[map.rows, map.cols, c])?;
    tape.bilinear_sample(m, grid)
}

/// Mean of same-shape maps, already flattened row-major.
pub fn fuse(tape: &mut Tape, maps: &[Var]) -> Result<Var> {
    let first = *maps.first().ok_or_else(|| Error::Contract("fuse of no maps".into()))?;
    let shape = tape.shape(first).to_vec();
    let mut acc = first;
    for &m in &maps[1..] {
        if tape.shape(m) != shape.as_slice() {
            return Err(Error::Contract(format!("fuse shape {:?} vs {shape:?}", tape.shape(m))));
        }
        acc = tape.add(acc, m)?;
    }
    Ok(tape.scale(acc, 1.0 / maps.len() as f64))
}

/// Projects phrase embeddings `G[n×d]` into pixel feature space with `V^g[d×c]`.
pub fn project_phrases(tape: &mut Tape, g: Var, vg: Var) -> Result<Var> {
    tape.matmul(g, vg)
}

/// Raw matching logits `Ĝ·Fᵀ`.
pub fn similarity_logits(tape: &mut Tape, ghat: Var, pixels: Var) -> Result<Var> {
    let (cg, cp) = (tape.value(ghat).cols(), tape.value(pixels).cols());
    if cg != cp {
        return Err(Error::Shape(format!("phrase width {cg} vs pixel width {cp}")));
    }
    let ft = tape.transpose(pixels)?;
    tape.matmul(ghat, ft)
}

/// `H = sigmoid(Ĝ·Fᵀ)`, shape `n × pixels`.
pub fn similarity(tape: &mut Tape, ghat: Var, pixels: Var) -> Result<Var> {
    let logits = similarity_logits(tape, ghat, pixels)?;
    Ok(tape.sigmoid(logits))
}

/// Bilinear upsampling of per-phrase maps `h[n × rows·cols]` by an integer
/// factor to `n × (rows·f)·(cols·f)`.
pub fn upsample_maps(tape: &mut Tape, h: Var, rows: usize, cols: usize, factor: usize) -> Result<Var> {
    let n = tape.value(h).rows();
    if tape.value(h).cols() != rows * cols {
        return Err(Error::Shape(format!("map width {} for a {rows}x{cols} grid", tape.value(h).cols())));
    }
    let ht = tape.transpose(h)?;
    let m = tape.reshape(ht, &[rows, cols, n])?;
    let grid = tape.constant(make_grid(rows * factor, cols * factor));
    let up = tape.bilinear_sample(m, grid)?;
    tape.transpose(up)
}

/// Exported similarity map for one round.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap {
    pub round: usize,
    pub values: Tensor,
}
