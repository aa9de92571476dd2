//! Shared helpers: finite differences and straight-line reference
//! implementations written without the tape.
#![allow(dead_code, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod checks;

use drmn::autodiff::{Tape, Var};
use drmn::nn::ParamStore;
use drmn::{Result, RngState, Tensor};

pub const FD_STEP: f64 = 1e-6;

/// Reduces a tensor output to a scalar with a fixed random projection so
/// every output element contributes to the checked gradient.
pub fn scalarize(tape: &mut Tape, out: Var) -> Var {
    if tape.value(out).len() == 1 {
        return out;
    }
    let shape = tape.shape(out).to_vec();
    let r = tape.constant(RngState::new(0x5ca1a7).normal_tensor(&shape, 1.0));
    let p = tape.mul(out, r).expect("same shape");
    tape.sum(p)
}

fn eval_scalar<F>(inputs: &[Tensor], f: &F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars).expect("forward");
    let s = scalarize(&mut tape, out);
    tape.value(s).item()
}

/// `‖a − n‖ / (‖a‖ + ‖n‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt() + n.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

/// Worst relative error between tape gradients and central differences,
/// over every input. `coords` limits how many entries per input are
/// perturbed (chosen at random); `None` checks all of them.
pub fn grad_check<F>(inputs: &[Tensor], coords: Option<usize>, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars).expect("forward");
    let s = scalarize(&mut tape, out);
    tape.backward(s).expect("backward");
    let analytic: Vec<Tensor> =
        vars.iter().map(|&v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v)))).collect();

    let mut pick = RngState::new(0xfd);
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let idx: Vec<usize> = match coords {
            Some(m) if m < t.len() => (0..m).map(|_| pick.below(t.len())).collect(),
            _ => (0..t.len()).collect(),
        };
        let mut a = Vec::with_capacity(idx.len());
        let mut n = Vec::with_capacity(idx.len());
        for &k in &idx {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= FD_STEP;
            n.push((eval_scalar(&plus, &f) - eval_scalar(&minus, &f)) / (2.0 * FD_STEP));
            a.push(analytic[i].data()[k]);
        }
        worst = worst.max(rel_err(&a, &n));
    }
    worst
}

// ---- naive dense helpers ----------------------------------------------------

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn from_mat(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn vecmat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), k);
    let mut out = vec![0.0; n];
    for j in 0..n {
        for (i, xi) in x.iter().enumerate() {
            out[j] += xi * w.data()[i * n + j];
        }
    }
    out
}

pub fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    vecmat(x, w).iter().zip(b.data()).map(|(a, b)| a + b).collect()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

pub fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let s = (var + drmn::nn::NORM_EPS).sqrt();
    x.iter().zip(g).zip(b).map(|((v, g), b)| (v - mean) / s * g + b).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Dense interpolation weights over the `n` cells of one axis. Cell centres
/// sit at `(i+0.5)/n`; reads clamp to the edge cell inside `[0,1]` and fade
/// to zero across one further cell outside it.
pub fn axis_ref(p: f64, n: usize) -> Vec<f64> {
    let nf = n as f64;
    let mut w = vec![0.0; n];
    if p < 0.0 {
        w[0] = (1.0 + p * nf).max(0.0);
    } else if p > 1.0 {
        w[n - 1] = (1.0 - (p - 1.0) * nf).max(0.0);
    } else {
        let u = (p * nf - 0.5).clamp(0.0, nf - 1.0);
        let lo = u.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let f = u - lo as f64;
        w[lo] += 1.0 - f;
        w[hi] += f;
    }
    w
}

/// Bilinear read of `map[rows][cols][c]` stored as `(rows·cols) × c` rows.
pub fn bilinear_ref(map: &Mat, rows: usize, cols: usize, y: f64, x: f64) -> Vec<f64> {
    let c = map[0].len();
    let (wy, wx) = (axis_ref(y, rows), axis_ref(x, cols));
    let mut out = vec![0.0; c];
    for i in 0..rows {
        for j in 0..cols {
            let w = wy[i] * wx[j];
            if w != 0.0 {
                for (o, v) in out.iter_mut().zip(&map[i * cols + j]) {
                    *o += w * v;
                }
            }
        }
    }
    out
}

pub fn grid_ref(rows: usize, cols: usize) -> Mat {
    let mut g = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            g.push(vec![(i as f64 + 0.5) / rows as f64, (j as f64 + 0.5) / cols as f64]);
        }
    }
    g
}

// ---- reference layers -------------------------------------------------------

pub struct RefMap {
    pub rows: usize,
    pub cols: usize,
    pub feats: Mat,
}

fn p<'a>(store: &'a ParamStore, prefix: &str, name: &str) -> &'a Tensor {
    store.get(&format!("{prefix}.{name}")).unwrap()
}

fn ffn(store: &ParamStore, prefix: &str, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = affine(x, p(store, prefix, "ffn_w1"), p(store, prefix, "ffn_b1")).iter().map(|v| v.max(0.0)).collect();
    affine(&h, p(store, prefix, "ffn_w2"), p(store, prefix, "ffn_b2"))
}

/// One deformable layer in eval mode, query by query, point by point.
pub fn deform_ref(
    store: &ParamStore,
    prefix: &str,
    heads: usize,
    points: usize,
    ffn_residual: bool,
    queries: &Mat,
    refs: &Mat,
    maps: &[RefMap],
) -> Mat {
    let c = queries[0].len();
    let dh = c / heads;
    let levels = maps.len();
    let values: Vec<Mat> = maps
        .iter()
        .map(|m| m.feats.iter().map(|f| affine(f, p(store, prefix, "w_val"), p(store, prefix, "b_val"))).collect())
        .collect();
    let mut out = Vec::with_capacity(queries.len());
    for (q, r) in queries.iter().zip(refs) {
        let off = affine(q, p(store, prefix, "w_off"), p(store, prefix, "b_off"));
        let logits = affine(q, p(store, prefix, "w_attn"), p(store, prefix, "b_attn"));
        let mut cat = Vec::with_capacity(c);
        for h in 0..heads {
            let per = levels * points;
            let a = softmax(&logits[h * per..(h + 1) * per]);
            let mut acc = vec![0.0; dh];
            for l in 0..levels {
                for k in 0..points {
                    let col = (h * levels + l) * points + k;
                    let (y, x) = (r[0] + off[2 * col], r[1] + off[2 * col + 1]);
                    let head_map: Mat = values[l].iter().map(|v| v[h * dh..(h + 1) * dh].to_vec()).collect();
                    let s = bilinear_ref(&head_map, maps[l].rows, maps[l].cols, y, x);
                    for d in 0..dh {
                        acc[d] += a[l * points + k] * s[d];
                    }
                }
            }
            cat.extend(acc);
        }
        let v = affine(&cat, p(store, prefix, "w_out"), p(store, prefix, "b_out"));
        let doubled: Vec<f64> = v.iter().map(|x| x + x).collect();
        let x = layer_norm(&doubled, p(store, prefix, "norm_g").data(), p(store, prefix, "norm_b").data());
        let y = ffn(store, prefix, &x);
        out.push(if ffn_residual { x.iter().zip(&y).map(|(a, b)| a + b).collect() } else { y });
    }
    out
}

/// Multi-head cross-attention of one phrase over `pixels`, eval mode.
pub fn cross_ref(store: &ParamStore, prefix: &str, heads: usize, phrase: &[f64], pixels: &Mat) -> Vec<f64> {
    let c = phrase.len();
    let dh = c / heads;
    let mut cat = Vec::with_capacity(c);
    for i in 0..heads {
        let sl = |v: &[f64]| v[i * dh..(i + 1) * dh].to_vec();
        let q = vecmat(&sl(phrase), p(store, prefix, &format!("wq{i}")));
        let keys: Mat = pixels.iter().map(|r| vecmat(&sl(r), p(store, prefix, &format!("wk{i}")))).collect();
        let vals: Mat = pixels.iter().map(|r| vecmat(&sl(r), p(store, prefix, &format!("wv{i}")))).collect();
        let scores: Vec<f64> =
            keys.iter().map(|k| k.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()).collect();
        let a = softmax(&scores);
        let mut o = vec![0.0; dh];
        for (w, v) in a.iter().zip(&vals) {
            for d in 0..dh {
                o[d] += w * v[d];
            }
        }
        cat.extend(o);
    }
    let g = affine(&cat, p(store, prefix, "w_out"), p(store, prefix, "b_out"));
    let gbar: Vec<f64> = g.iter().zip(phrase).map(|(a, b)| a + b).collect();
    let x: Vec<f64> = phrase.iter().zip(&gbar).map(|(a, b)| a + b).collect();
    let x = layer_norm(&x, p(store, prefix, "norm_g").data(), p(store, prefix, "norm_b").data());
    ffn(store, prefix, &x)
}

pub fn similarity_ref(phrases: &Mat, pixels: &Mat) -> Mat {
    phrases
        .iter()
        .map(|g| pixels.iter().map(|f| sigmoid(g.iter().zip(f).map(|(a, b)| a * b).sum())).collect())
        .collect()
}

pub fn upsample_ref(h: &Mat, rows: usize, cols: usize, factor: usize) -> Mat {
    let grid = grid_ref(rows * factor, cols * factor);
    h.iter()
        .map(|row| {
            let m: Mat = row.iter().map(|&v| vec![v]).collect();
            grid.iter().map(|pt| bilinear_ref(&m, rows, cols, pt[0], pt[1])[0]).collect()
        })
        .collect()
}

/// Top-k by full sort: larger value first, then smaller index.
pub fn topk_ref(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub struct RoundsRef {
    pub history: Vec<Mat>,
    pub selections: Vec<Vec<Vec<usize>>>,
    pub pixels: Mat,
    pub phrases: Mat,
}

/// Straight-line transcription of the aggregation loop.
#[allow(clippy::too_many_arguments)]
pub fn rounds_ref(
    store: &ParamStore,
    refine_prefixes: &[String],
    cross_prefixes: &[String],
    heads: usize,
    points: usize,
    k: usize,
    pixels: &Mat,
    phrases: &Mat,
    pos: &Mat,
    maps: &[RefMap],
    rows: usize,
    cols: usize,
    factor: usize,
) -> RoundsRef {
    let grid = grid_ref(rows, cols);
    let mut f = pixels.clone();
    let mut g = phrases.clone();
    let mut h = similarity_ref(&g, &f);
    let mut history = vec![upsample_ref(&h, rows, cols, factor)];
    let mut selections = Vec::new();
    for (rp, cp) in refine_prefixes.iter().zip(cross_prefixes) {
        let sel: Vec<Vec<usize>> = h.iter().map(|row| topk_ref(row, k)).collect();
        for j in 0..g.len() {
            let s = &sel[j];
            let x: Mat = s.iter().map(|&i| (0..f[i].len()).map(|d| f[i][d] + pos[i][d] + g[j][d]).collect()).collect();
            let refs: Mat = s.iter().map(|&i| grid[i].clone()).collect();
            let refined = deform_ref(store, rp, heads, points, false, &x, &refs, maps);
            for (r, &i) in s.iter().enumerate() {
                f[i] = refined[r].clone();
            }
            g[j] = cross_ref(store, cp, heads, &g[j], &refined);
        }
        h = similarity_ref(&g, &f);
        history.push(upsample_ref(&h, rows, cols, factor));
        selections.push(sel);
    }
    RoundsRef { history, selections, pixels: f, phrases: g }
}

pub fn max_diff(a: &Mat, b: &Tensor) -> f64 {
    assert_eq!(a.len(), b.rows());
    a.iter()
        .enumerate()
        .flat_map(|(i, r)| r.iter().zip(b.row(i)).map(|(x, y)| (x - y).abs()))
        .fold(0.0, worse)
}

/// Maximum that propagates NaN, so a broken value is never hidden.
pub fn worse(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}
