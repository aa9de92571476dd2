//! Measurements shared by the topic tests and the acceptance report.
#![allow(dead_code)]

use std::path::Path;

use drmn::aggregation::{cross_attend, run_rounds, CrossAttnConfig, CrossAttnParams, RoundInputs, RoundParams};
use drmn::autodiff::{Tape, Var};
use drmn::cli;
use drmn::cluster::{alternate, assign_topk, fuzzy_update, objective, sq_dist, ClusterProblem, Mode, Points};
use drmn::config::RunConfig;
use drmn::deform::{deform_layer, DeformConfig, DeformInput, DeformParams, LevelMap, RunCtx};
use drmn::featuremaps::{gen_scene, make_grid, PosEncoder, SceneConfig};
use drmn::loss::{total_loss, LossConfig};
use drmn::matching::{fuse, resample_level, similarity, upsample_maps};
use drmn::metrics::{average_recall, default_thresholds, iou, merge_plural, CategoryCurves, EvalRecord};
use drmn::model::{forward, ModelConfig};
use drmn::nn::{Bound, FfnParams, NormParams, ParamStore};
use drmn::store::{scene_seed, SceneMeta, StoredScene};
use drmn::train::{train, Sample};
use drmn::{RngState, Tensor};

use super::*;

pub const GRAD_TOL: f64 = 1e-4;

fn rng(seed: u64) -> RngState {
    RngState::new(seed)
}

fn normal(seed: u64, shape: &[usize]) -> Tensor {
    rng(seed).normal_tensor(shape, 1.0)
}

fn uniform(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    rng(seed).uniform_tensor(shape, lo, hi)
}

/// Relative error of every differentiable primitive and composite block.
pub fn op_gradients() -> Vec<(&'static str, f64)> {
    let mut r: Vec<(&'static str, f64)> = Vec::new();
    let a = normal(1, &[3, 4]);
    let b = normal(2, &[3, 4]);
    r.push(("add", grad_check(&[a.clone(), b.clone()], None, |t, v| t.add(v[0], v[1]))));
    r.push(("sub", grad_check(&[a.clone(), b.clone()], None, |t, v| t.sub(v[0], v[1]))));
    r.push(("mul", grad_check(&[a.clone(), b.clone()], None, |t, v| t.mul(v[0], v[1]))));
    r.push(("scale", grad_check(std::slice::from_ref(&a), None, |t, v| Ok(t.scale(v[0], -1.7)))));
    r.push(("add_row", grad_check(&[a.clone(), normal(3, &[4])], None, |t, v| t.add_row(v[0], v[1]))));
    r.push(("mul_col", grad_check(&[a.clone(), normal(4, &[3, 1])], None, |t, v| t.mul_col(v[0], v[1]))));
    r.push(("relu", grad_check(std::slice::from_ref(&a), None, |t, v| Ok(t.relu(v[0])))));
    r.push(("sigmoid", grad_check(std::slice::from_ref(&a), None, |t, v| Ok(t.sigmoid(v[0])))));
    r.push(("matmul", grad_check(&[a.clone(), normal(5, &[4, 2])], None, |t, v| t.matmul(v[0], v[1]))));
    r.push(("transpose", grad_check(std::slice::from_ref(&a), None, |t, v| t.transpose(v[0]))));
    r.push(("reshape", grad_check(std::slice::from_ref(&a), None, |t, v| t.reshape(v[0], &[2, 6]))));
    r.push(("softmax_rows", grad_check(std::slice::from_ref(&a), None, |t, v| t.softmax(v[0], 1))));
    r.push(("softmax_cols", grad_check(std::slice::from_ref(&a), None, |t, v| t.softmax(v[0], 0))));
    r.push(("softmax_rank3", grad_check(&[normal(6, &[2, 3, 4])], None, |t, v| t.softmax(v[0], 2))));
    r.push((
        "layer_norm",
        grad_check(&[a.clone(), normal(7, &[4]), normal(8, &[4])], None, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
    ));
    r.push((
        "dropout",
        grad_check(std::slice::from_ref(&a), None, |t, v| t.dropout(v[0], 0.3, &mut rng(9), true)),
    ));
    let map = normal(10, &[3, 4, 2]);
    let inside = uniform(11, &[5, 2], 0.02, 0.98);
    r.push(("bilinear_map", grad_check(std::slice::from_ref(&map), None, |t, v| {
        let p = t.constant(inside.clone());
        t.bilinear_sample(v[0], p)
    })));
    r.push(("bilinear_points", grad_check(&[map.clone(), inside.clone()], None, |t, v| t.bilinear_sample(v[0], v[1]))));
    // Points in the fade band outside the map and in the interior.
    let edge = Tensor::from_rows(&[vec![-0.1, 0.4], vec![0.45, 1.07], vec![1.2, -0.05], vec![0.33, 0.61]]).unwrap();
    r.push(("bilinear_border", grad_check(&[map.clone(), edge], None, |t, v| t.bilinear_sample(v[0], v[1]))));
    r.push(("concat_rows", grad_check(&[a.clone(), normal(12, &[2, 4])], None, |t, v| t.concat_rows(&[v[0], v[1]]))));
    r.push(("concat_cols", grad_check(&[a.clone(), normal(13, &[3, 2])], None, |t, v| t.concat_cols(&[v[0], v[1]]))));
    r.push(("slice_rows", grad_check(std::slice::from_ref(&a), None, |t, v| t.slice_rows(v[0], 1, 3))));
    r.push(("slice_cols", grad_check(std::slice::from_ref(&a), None, |t, v| t.slice_cols(v[0], 1, 3))));
    r.push(("gather_rows", grad_check(std::slice::from_ref(&a), None, |t, v| t.gather_rows(v[0], &[2, 0, 2]))));
    r.push((
        "scatter_rows",
        grad_check(&[a.clone(), normal(14, &[2, 4])], None, |t, v| t.scatter_rows(v[0], v[1], &[2, 0])),
    ));
    r.push(("sum", grad_check(std::slice::from_ref(&a), None, |t, v| Ok(t.sum(v[0])))));
    r.push(("mean", grad_check(std::slice::from_ref(&a), None, |t, v| Ok(t.mean(v[0])))));
    let probs = uniform(15, &[2, 5], 0.05, 0.95);
    let y = Tensor::from_rows(&[vec![1.0, 0.0, 1.0, 1.0, 0.0], vec![0.0, 0.0, 1.0, 0.0, 1.0]]).unwrap();
    r.push(("bce", grad_check(std::slice::from_ref(&probs), None, |t, v| t.bce(v[0], &y))));
    r.push(("dice", grad_check(std::slice::from_ref(&probs), None, |t, v| t.dice(v[0], &y, 1e-6))));

    // Composite blocks.
    let mut store = ParamStore::new();
    FfnParams::init(&mut store, "f", 4, 8, &mut rng(16));
    NormParams::init(&mut store, "f", 4);
    *store.get_mut("f.norm_g").unwrap() = uniform(17, &[4], 0.5, 1.5);
    r.push(("ffn_norm", store_check(&store, std::slice::from_ref(&a), None, |t, b, x| {
        let y = NormParams::bind(b, "f")?.forward(t, x[0])?;
        FfnParams::bind(b, "f")?.forward(t, y)
    })));

    r.push(("deform_layer", deform_gradient(false)));
    r.push(("deform_layer_ffn_residual", deform_gradient(true)));
    r.push(("cross_attend", cross_gradient()));
    r.push(("matching", matching_gradient()));
    r.push(("total_loss", grad_check(std::slice::from_ref(&probs), None, |t, v| {
        let h2 = t.scale(v[0], 0.9);
        Ok(total_loss(t, &[v[0], h2], &y, &LossConfig::default())?.0)
    })));
    r
}

/// Gradient check over every parameter of a store plus extra inputs;
/// `build` receives the store's variables (sorted by name) then the extras.
fn store_check<F>(store: &ParamStore, extras: &[Tensor], coords: Option<usize>, build: F) -> f64
where
    F: Fn(&mut Tape, &Bound, &[Var]) -> drmn::Result<Var>,
{
    let names: Vec<String> = store.names().cloned().collect();
    let mut inputs: Vec<Tensor> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
    inputs.extend(extras.iter().cloned());
    let np = names.len();
    grad_check(&inputs, coords, |t, v| {
        let bound = Bound::from_vars(names.iter().cloned().zip(v[..np].iter().copied()));
        build(t, &bound, &v[np..])
    })
}

fn deform_gradient(ffn_residual: bool) -> f64 {
    let cfg = DeformConfig { channels: 4, heads: 2, points: 2, levels: 2, ffn_ratio: 2, dropout: 0.2, ffn_residual };
    let mut store = ParamStore::new();
    cfg.init(&mut store, "d", &mut rng(20)).unwrap();
    // Larger offsets so sampling points move between cells.
    *store.get_mut("d.w_off").unwrap() = uniform(21, &[4, 16], -0.3, 0.3);
    let q = normal(22, &[3, 4]);
    let m0 = normal(23, &[4, 4]);
    let m1 = normal(24, &[1, 4]);
    let refs = uniform(25, &[3, 2], 0.1, 0.9);
    store_check(&store, &[q, m0, m1], None, |t, b, x| {
        let p = DeformParams::bind(b, "d", cfg)?;
        let maps = [LevelMap { features: x[1], rows: 2, cols: 2 }, LevelMap { features: x[2], rows: 1, cols: 1 }];
        let mut r = rng(26);
        deform_layer(t, &DeformInput { queries: x[0], refs: &refs, maps: &maps }, &p, &mut RunCtx::train(&mut r))
    })
}

fn cross_gradient() -> f64 {
    let cfg = CrossAttnConfig { channels: 4, heads: 2, ffn_ratio: 2, dropout: 0.2 };
    let mut store = ParamStore::new();
    cfg.init(&mut store, "x", &mut rng(30)).unwrap();
    store_check(&store, &[normal(31, &[1, 4]), normal(32, &[3, 4])], None, |t, b, x| {
        let p = CrossAttnParams::bind(b, "x", cfg)?;
        let mut r = rng(33);
        Ok(cross_attend(t, x[0], x[1], &p, &mut RunCtx::train(&mut r))?.phrase)
    })
}

fn matching_gradient() -> f64 {
    let f_fine = normal(40, &[16, 4]);
    let f_mid = normal(41, &[4, 4]);
    let f_coarse = normal(42, &[1, 4]);
    let g = normal(43, &[2, 4]);
    grad_check(&[f_fine, f_mid, f_coarse, g], None, |t, v| {
        let maps = [
            LevelMap { features: v[0], rows: 4, cols: 4 },
            LevelMap { features: v[1], rows: 2, cols: 2 },
            LevelMap { features: v[2], rows: 1, cols: 1 },
        ];
        let parts = maps.iter().map(|&m| resample_level(t, m, 2, 2)).collect::<drmn::Result<Vec<_>>>()?;
        let fused = fuse(t, &parts)?;
        let h = similarity(t, v[3], fused)?;
        upsample_maps(t, h, 2, 2, 2)
    })
}

/// The tiny end-to-end model: 32×32 image, c=8, two heads, one encoder
/// layer, one round, k=3, two phrases.
pub fn tiny_model_config() -> (ModelConfig, SceneConfig) {
    let model = ModelConfig {
        channels: 8,
        phrase_dim: 8,
        heads: 2,
        points: 2,
        encoder_layers: 1,
        rounds: 1,
        topk: 3,
        ..ModelConfig::default()
    };
    let scene = SceneConfig {
        height: 32,
        width: 32,
        channels: 8,
        phrase_dim: 8,
        min_objects: 2,
        max_objects: 2,
        plural_prob: 0.0,
        ..SceneConfig::default()
    };
    (model, scene)
}

/// Finite differences through the whole model and loss; every parameter
/// tensor is probed at up to `coords` random entries.
pub fn end_to_end_gradient(coords: usize) -> f64 {
    let (model, scene_cfg) = tiny_model_config();
    let scene = gen_scene(&scene_cfg, 3).unwrap();
    assert_eq!(scene.phrases.len(), 2);
    let sample = Sample::from_scene(&scene, &scene_cfg).unwrap();
    let store = model.init_params(5).unwrap();
    store_check(&store, &[], Some(coords), |t, b, _| {
        let mut r = rng(7);
        let out = forward(t, b, &model, &sample.input(), &mut RunCtx::train(&mut r))?;
        Ok(total_loss(t, &out.rounds.history, &sample.masks, &LossConfig::default())?.0)
    })
}

/// Largest deviation of `deform_layer` from the per-point reference.
pub fn deform_oracle(seed: u64, ffn_residual: bool) -> f64 {
    let cfg = DeformConfig { channels: 6, heads: 3, points: 2, levels: 3, ffn_ratio: 2, dropout: 0.1, ffn_residual };
    let mut store = ParamStore::new();
    cfg.init(&mut store, "d", &mut rng(seed)).unwrap();
    *store.get_mut("d.w_off").unwrap() = uniform(seed + 1, &[6, 36], -0.4, 0.4);
    *store.get_mut("d.b_off").unwrap() = uniform(seed + 2, &[36], -0.2, 0.2);
    *store.get_mut("d.norm_g").unwrap() = uniform(seed + 3, &[6], 0.5, 1.5);
    let q = normal(seed + 4, &[6, 6]);
    let shapes = [(4, 3), (2, 2), (1, 1)];
    let feats: Vec<Tensor> = shapes.iter().enumerate().map(|(i, &(r, c))| normal(seed + 10 + i as u64, &[r * c, 6])).collect();
    let refs = uniform(seed + 5, &[6, 2], 0.0, 1.0);

    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let p = DeformParams::bind(&b, "d", cfg).unwrap();
    let qv = tape.constant(q.clone());
    let maps: Vec<LevelMap> = shapes
        .iter()
        .zip(&feats)
        .map(|(&(rows, cols), f)| LevelMap { features: tape.constant(f.clone()), rows, cols })
        .collect();
    let mut r = rng(0);
    let out = deform_layer(&mut tape, &DeformInput { queries: qv, refs: &refs, maps: &maps }, &p, &mut RunCtx::eval(&mut r)).unwrap();

    let ref_maps: Vec<RefMap> =
        shapes.iter().zip(&feats).map(|(&(rows, cols), f)| RefMap { rows, cols, feats: to_mat(f) }).collect();
    let expect = deform_ref(&store, "d", 3, 2, ffn_residual, &to_mat(&q), &to_mat(&refs), &ref_maps);
    max_diff(&expect, tape.value(out))
}

/// Largest deviation of `run_rounds` (maps, pixels, phrases) from the
/// straight-line loop, plus whether the selections agree.
pub fn rounds_oracle(seed: u64, rounds: usize, per_round: bool) -> (f64, bool) {
    let (c, heads, points, k, n) = (4, 2, 1, 3, 2);
    let (rows, cols, factor) = (3, 2, 2);
    let dcfg = DeformConfig { channels: c, heads, points, levels: 2, ffn_ratio: 2, dropout: 0.1, ffn_residual: false };
    let xcfg = CrossAttnConfig { channels: c, heads, ffn_ratio: 2, dropout: 0.1 };
    let mut store = ParamStore::new();
    let mut g = rng(seed);
    let prefixes: Vec<(String, String)> = (0..rounds)
        .map(|i| if per_round { (format!("ref{i}"), format!("xattn{i}")) } else { ("ref".into(), "xattn".into()) })
        .collect();
    for (rp, cp) in &prefixes {
        if store.get(&format!("{rp}.w_off")).is_err() {
            dcfg.init(&mut store, rp, &mut g).unwrap();
            *store.get_mut(&format!("{rp}.w_off")).unwrap() = g.uniform_tensor(&[c, 2 * heads * 2 * points], -0.3, 0.3);
            xcfg.init(&mut store, cp, &mut g).unwrap();
        }
    }
    let pixels = g.normal_tensor(&[rows * cols, c], 1.0);
    let phrases = g.normal_tensor(&[n, c], 1.0);
    let level_shapes = [(rows, cols), (1, 1)];
    let feats: Vec<Tensor> = level_shapes.iter().map(|&(r, cc)| g.normal_tensor(&[r * cc, c], 1.0)).collect();
    let grid = make_grid(rows, cols);
    let pos = PosEncoder::new(c).unwrap().encode(&grid);

    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let refine: Vec<DeformParams> = prefixes.iter().map(|(rp, _)| DeformParams::bind(&b, rp, dcfg).unwrap()).collect();
    let cross: Vec<CrossAttnParams> = prefixes.iter().map(|(_, cp)| CrossAttnParams::bind(&b, cp, xcfg).unwrap()).collect();
    let rp: Vec<RoundParams> = refine.iter().zip(&cross).map(|(r, c)| RoundParams { refine: r, cross: c }).collect();
    let pv = tape.constant(pixels.clone());
    let gv = tape.constant(phrases.clone());
    let initial = similarity(&mut tape, gv, pv).unwrap();
    let maps: Vec<LevelMap> = level_shapes
        .iter()
        .zip(&feats)
        .map(|(&(r, cc), f)| LevelMap { features: tape.constant(f.clone()), rows: r, cols: cc })
        .collect();
    let inputs = RoundInputs {
        pixels: pv,
        phrases: gv,
        initial,
        maps: &maps,
        grid: &grid,
        pos: &pos,
        grid_rows: rows,
        grid_cols: cols,
        upsample: factor,
    };
    let mut r = rng(0);
    let out = run_rounds(&mut tape, &inputs, &rp, k, &mut RunCtx::eval(&mut r)).unwrap();

    let ref_maps: Vec<RefMap> =
        level_shapes.iter().zip(&feats).map(|(&(r, cc), f)| RefMap { rows: r, cols: cc, feats: to_mat(f) }).collect();
    let expect = rounds_ref(
        &store,
        &prefixes.iter().map(|p| p.0.clone()).collect::<Vec<_>>(),
        &prefixes.iter().map(|p| p.1.clone()).collect::<Vec<_>>(),
        heads,
        points,
        k,
        &to_mat(&pixels),
        &to_mat(&phrases),
        &to_mat(&pos),
        &ref_maps,
        rows,
        cols,
        factor,
    );
    let mut worst: f64 = 0.0;
    for (e, &h) in expect.history.iter().zip(&out.history) {
        worst = worse(worst, max_diff(e, tape.value(h)));
    }
    worst = worse(worst, max_diff(&expect.pixels, tape.value(out.pixels)));
    let got_phrases = tape.concat_rows(&out.phrases).unwrap();
    worst = worse(worst, max_diff(&expect.phrases, tape.value(got_phrases)));
    let same = expect.selections == out.selections && expect.history.len() == out.history.len();
    (worst, same)
}

fn random_points(r: &mut RngState, m: usize) -> Points {
    (0..m).map(|_| vec![r.uniform(), r.uniform()]).collect()
}

/// All `m^n` assignments where each target takes one point (k = 1).
fn best_assignment_objective(x: &Points, t: &Points) -> f64 {
    let (m, n) = (x.len(), t.len());
    let mut best = f64::INFINITY;
    for code in 0..m.pow(n as u32) {
        let mut u = vec![vec![0.0; n]; m];
        let mut c = code;
        for j in 0..n {
            u[c % m][j] = 1.0;
            c /= m;
        }
        best = best.min(objective(x, t, &u));
    }
    best
}

pub struct ModeAStats {
    pub optimal: usize,
    pub monotone: usize,
    pub runs: usize,
}

/// Mode A on `runs` random m=6, n=2, k=1 instances. A run counts as optimal
/// when its final assignment attains the exhaustive minimum at the final
/// points and had already settled by the last iteration.
pub fn mode_a(runs: usize) -> ModeAStats {
    let mut s = ModeAStats { optimal: 0, monotone: 0, runs };
    for seed in 0..runs as u64 {
        let mut r = rng(0xa000 + seed);
        let problem = ClusterProblem {
            mode: Mode::A,
            points: random_points(&mut r, 6),
            targets: random_points(&mut r, 2),
            k: 1,
            alpha: 0.5,
            iters: 20,
        };
        let tr = alternate(&problem).unwrap();
        if tr.first_increase(1e-12).is_none() {
            s.monotone += 1;
        }
        let last = tr.last_memberships();
        let best = best_assignment_objective(&tr.points, &tr.targets);
        let settled = tr.memberships[tr.memberships.len() - 2] == *last;
        let at = objective(&tr.points, &tr.targets, last);
        if settled && at <= best + 1e-12 && *last == assign_topk(&tr.points, &tr.targets, 1).unwrap() {
            s.optimal += 1;
        }
    }
    s
}

/// Worst violation of the stationarity conditions of one fuzzy update:
/// `u_ij‖x_i − t_j‖²` equal across j with `Σ_j u_ij = 1` (memberships), and
/// `Σ_i u_ij²(t'_j − x_i) = 0` (targets).
pub fn fuzzy_kkt(instances: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..instances as u64 {
        let mut r = rng(0xb000 + seed);
        let m = 3 + r.below(6);
        let n = 2 + r.below(3);
        let dim = 1 + r.below(3);
        let x: Points = (0..m).map(|_| (0..dim).map(|_| r.normal()).collect()).collect();
        let t: Points = (0..n).map(|_| (0..dim).map(|_| r.normal()).collect()).collect();
        let (u, t2) = fuzzy_update(&x, &t).unwrap();
        for (xi, ui) in x.iter().zip(&u) {
            let prod: Vec<f64> = t.iter().zip(ui).map(|(tj, &uij)| uij * sq_dist(xi, tj)).collect();
            let inv_sum: f64 = t.iter().map(|tj| 1.0 / sq_dist(xi, tj)).sum();
            for (tj, &uij) in t.iter().zip(ui) {
                let expect = (1.0 / sq_dist(xi, tj)) / inv_sum;
                worst = worse(worst, (uij - expect).abs());
            }
            let spread = prod.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - prod.iter().cloned().fold(f64::INFINITY, f64::min);
            worst = worse(worst, spread / prod[0].abs().max(1.0));
            worst = worse(worst, (ui.iter().sum::<f64>() - 1.0).abs());
        }
        for (j, tj) in t2.iter().enumerate() {
            for d in 0..dim {
                let g: f64 = x.iter().zip(&u).map(|(xi, ui)| ui[j] * ui[j] * (tj[d] - xi[d])).sum();
                worst = worse(worst, g.abs());
            }
        }
    }
    worst
}

/// Hand-integrated AR values for a fixed four-phrase record set built from
/// 2×2 masks, including one plural phrase scored against its union.
/// Returns the worst deviation and the plural IoU against a single object.
pub fn metric_hand_values() -> (f64, f64) {
    let top = vec![true, true, false, false];
    let left = vec![true, false, true, false];
    let a = vec![true, false, false, false];
    let b = vec![false, false, false, true];
    let union = merge_plural(&[a.clone(), b.clone()]).unwrap();
    let pred_plural = vec![true, false, false, true];
    let records = [
        EvalRecord { iou: iou(&top, &left).unwrap(), stuff: false, plural: false },
        EvalRecord { iou: iou(&pred_plural, &union).unwrap(), stuff: false, plural: true },
        EvalRecord { iou: iou(&[true, true, true, false], &[true; 4]).unwrap(), stuff: true, plural: false },
        EvalRecord { iou: iou(&[false; 4], &[false, true, true, false]).unwrap(), stuff: true, plural: false },
    ];
    let th = default_thresholds();
    let c = CategoryCurves::compute(&records, &th).unwrap();
    // A single record with IoU v (0 ≤ v < 1) has AR = floor(100v)/100 + 0.005.
    let expect = [
        (c.overall.area, (0.335 + 1.0 + 0.755 + 0.005) / 4.0),
        (c.things.as_ref().unwrap().area, (0.335 + 1.0) / 2.0),
        (c.stuff.as_ref().unwrap().area, (0.755 + 0.005) / 2.0),
        (c.singulars.as_ref().unwrap().area, (0.335 + 0.755 + 0.005) / 3.0),
        (c.plurals.as_ref().unwrap().area, 1.0),
        (average_recall(&records[..1], &th).unwrap().area, 0.335),
    ];
    let worst = expect.iter().map(|(got, want)| (got - want).abs()).fold(0.0, f64::max);
    (worst, iou(&pred_plural, &a).unwrap())
}

/// Small configuration for end-to-end CLI runs.
pub fn small_run_config() -> RunConfig {
    let text = "scenes = 6\nheight = 32\nwidth = 32\nchannels = 8\nphrase_dim = 8\nheads = 2\npoints = 2\n\
                encoder_layers = 1\nrounds = 2\ntopk = 5\nepochs = 2\nbatch_size = 3\nlr = 0.001\n";
    RunConfig::parse(text).unwrap()
}

/// gen-data → train → eval into `dir`.
pub fn full_run(cfg: &RunConfig, dir: &Path) -> drmn::Result<()> {
    cli::gen_data(cfg, &dir.join("data"))?;
    cli::train_cmd(cfg, &dir.join("data"), &dir.join("ckpt"))?;
    cli::eval_cmd(&dir.join("ckpt"), &dir.join("data"), &dir.join("eval"))?;
    Ok(())
}

/// Relative paths and contents of every file under `dir`, sorted.
pub fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

// ---- ablation -----------------------------------------------------------------

pub const ABLATION_TRAIN_SCENES: usize = 200;
pub const ABLATION_EVAL_SCENES: usize = 100;
pub const ABLATION_EPOCHS: usize = 20;
pub const ABLATION_SEEDS: u64 = 5;

fn stored(cfg: &SceneConfig, seed: u64, count: usize) -> Vec<StoredScene> {
    (0..count)
        .map(|i| {
            let s = gen_scene(cfg, scene_seed(seed, i)).unwrap();
            let sample = Sample::from_scene(&s, cfg).unwrap();
            let meta = SceneMeta { seed: s.seed, height: s.height, width: s.width, objects: s.objects, phrases: s.phrases };
            StoredScene { meta, sample }
        })
        .collect()
}

/// Final-round overall AR (in points) of one trained (T, I) variant.
pub fn ablation_run(encoder_layers: usize, rounds: usize, seed: u64) -> f64 {
    let mut cfg = RunConfig::default();
    cfg.model.encoder_layers = encoder_layers;
    cfg.model.rounds = rounds;
    cfg.train.epochs = ABLATION_EPOCHS;
    cfg.train.seed = seed;
    let train_set = stored(&cfg.scene, 1000 + seed, ABLATION_TRAIN_SCENES);
    let eval_set = stored(&cfg.scene, 5000, ABLATION_EVAL_SCENES);
    let samples: Vec<Sample> = train_set.into_iter().map(|s| s.sample).collect();
    let init = cfg.model.init_params(seed).unwrap();
    let out = train(&samples, &init, &cfg.model, &cfg.loss, &cfg.train).unwrap();
    let ious = cli::evaluate(&out.params, &cfg.model, cfg.threshold, &eval_set).unwrap();
    let last: Vec<EvalRecord> = ious.iter().filter(|p| p.round == rounds).map(|p| p.record).collect();
    100.0 * average_recall(&last, &default_thresholds()).unwrap().area
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
