//! C ABI over the `drmn` core.
//!
//! Every entry point returns a [`DrmnStatus`]; on failure a message is kept
//! per thread and can be copied out with [`drmn_last_error`]. Handles are
//! opaque and must be released with the matching `_free` function. Panics
//! never cross the boundary; they surface as `DRMN_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use drmn::cluster::{alternate, ClusterProblem, Mode};
use drmn::config::RunConfig;
use drmn::featuremaps::{gen_scene, SyntheticScene};
use drmn::metrics::{average_recall, default_thresholds, EvalRecord};
use drmn::model::predict;
use drmn::nn::ParamStore;
use drmn::store::read_checkpoint;
use drmn::train::Sample;
use drmn::{Error, RngState};

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DrmnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Shape = 4,
    Numeric = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Synthetic scene with its feature pyramid.
pub struct DrmnScene {
    scene: SyntheticScene,
    sample: Sample,
}

/// Model parameters plus the run configuration that shaped them.
pub struct DrmnModel {
    params: ParamStore,
    config: RunConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

enum Fail {
    Status(DrmnStatus, String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn status_of(e: &Error) -> DrmnStatus {
    match e {
        Error::Shape(_) => DrmnStatus::Shape,
        Error::Io { .. } => DrmnStatus::Io,
        Error::NonFinite(_) | Error::Diverged { .. } | Error::NotMonotone { .. } => DrmnStatus::Numeric,
        _ => DrmnStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DrmnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DrmnStatus::Ok,
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            DrmnStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail::Status(DrmnStatus::NullPointer, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Status(DrmnStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Null means defaults; otherwise the `key = value` config format.
unsafe fn config(p: *const c_char) -> Result<RunConfig, Fail> {
    let cfg = if p.is_null() { RunConfig::default() } else { RunConfig::parse(text(p, "config")?)? };
    cfg.validate()?;
    Ok(cfg)
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, need: usize) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null("output buffer"));
    }
    if len < need {
        return Err(Fail::Status(DrmnStatus::BufferTooSmall, format!("buffer holds {len}, need {need}")));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

fn store<T>(out: *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    // SAFETY: non-null, caller provides a writable location.
    unsafe { out.write(v) };
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn drmn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message (NUL-terminated, truncated
/// to fit) into `buf` and returns its full length excluding the terminator.
/// `buf` may be null to query the length.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn drmn_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Generates a scene. `config` is config-file text or null for defaults.
///
/// # Safety
/// `config` must be null or a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn drmn_scene_generate(config: *const c_char, seed: u64, out: *mut *mut DrmnScene) -> DrmnStatus {
    guard(|| {
        let cfg = self::config(config)?;
        let scene = gen_scene(&cfg.scene, seed)?;
        let sample = Sample::from_scene(&scene, &cfg.scene)?;
        store(out, Box::into_raw(Box::new(DrmnScene { scene, sample })))
    })
}

/// Height, width and phrase count of a scene. Any output may be null.
///
/// # Safety
/// `scene` must come from `drmn_scene_generate`; outputs null or writable.
#[no_mangle]
pub unsafe extern "C" fn drmn_scene_dims(
    scene: *const DrmnScene,
    height: *mut usize,
    width: *mut usize,
    phrases: *mut usize,
) -> DrmnStatus {
    guard(|| {
        let s = &scene.as_ref().ok_or_else(|| null("scene"))?.scene;
        for (p, v) in [(height, s.height), (width, s.width), (phrases, s.phrases.len())] {
            if !p.is_null() {
                p.write(v);
            }
        }
        Ok(())
    })
}

/// Writes the ground-truth mask (row-major, 0/1) of one phrase.
///
/// # Safety
/// `scene` must be a live handle and `out` valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn drmn_scene_mask(scene: *const DrmnScene, phrase: usize, out: *mut u8, len: usize) -> DrmnStatus {
    guard(|| {
        let s = &scene.as_ref().ok_or_else(|| null("scene"))?.scene;
        let n = s.phrases.len();
        if phrase >= n {
            return Err(Fail::Status(DrmnStatus::InvalidArgument, format!("phrase {phrase} of {n}")));
        }
        let px = s.height * s.width;
        let dst = out_slice(out, len, px)?;
        for (d, &v) in dst.iter_mut().zip(&s.masks.data()[phrase * px..(phrase + 1) * px]) {
            *d = u8::from(v > 0.5);
        }
        Ok(())
    })
}

/// # Safety
/// `scene` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn drmn_scene_free(scene: *mut DrmnScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Freshly initialised model. `config` as for `drmn_scene_generate`.
///
/// # Safety
/// `config` must be null or a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn drmn_model_init(config: *const c_char, seed: u64, out: *mut *mut DrmnModel) -> DrmnStatus {
    guard(|| {
        let config = self::config(config)?;
        let params = config.model.init_params(seed)?;
        store(out, Box::into_raw(Box::new(DrmnModel { params, config })))
    })
}

/// Loads a checkpoint directory written by `drmn train`.
///
/// # Safety
/// `dir` must be a NUL-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn drmn_model_load(dir: *const c_char, out: *mut *mut DrmnModel) -> DrmnStatus {
    guard(|| {
        let (params, meta) = read_checkpoint(Path::new(text(dir, "dir")?))?;
        store(out, Box::into_raw(Box::new(DrmnModel { params, config: meta.config })))
    })
}

/// Number of refinement rounds; predictions exist for `0..=rounds`.
///
/// # Safety
/// `model` must be a live handle and `rounds` writable.
#[no_mangle]
pub unsafe extern "C" fn drmn_model_rounds(model: *const DrmnModel, rounds: *mut usize) -> DrmnStatus {
    guard(|| store(rounds, model.as_ref().ok_or_else(|| null("model"))?.config.model.rounds))
}

/// Per-pixel probabilities after `round` (0 is the initial map) for every
/// phrase of `scene`: `phrases × height × width` values, row-major.
///
/// # Safety
/// Handles must be live and `out` valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn drmn_model_predict(
    model: *const DrmnModel,
    scene: *const DrmnScene,
    round: usize,
    out: *mut f64,
    len: usize,
) -> DrmnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let s = scene.as_ref().ok_or_else(|| null("scene"))?;
        if round > m.config.model.rounds {
            return Err(Fail::Status(
                DrmnStatus::InvalidArgument,
                format!("round {round} beyond {}", m.config.model.rounds),
            ));
        }
        let need = s.scene.phrases.len() * s.scene.height * s.scene.width;
        let dst = out_slice(out, len, need)?;
        let mut rng = RngState::new(0);
        let history = predict(&m.params, &m.config.model, &s.sample.input(), &mut rng)?;
        dst.copy_from_slice(history[round].data());
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn drmn_model_free(model: *mut DrmnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Runs the alternating assignment problem given as JSON (same schema as
/// `drmn oracle`). Writes the objective trace (initial value, then one per
/// iteration, so `iters + 1` values) and its length to `written`. A
/// hard-assignment objective that increases returns `DRMN_STATUS_NUMERIC`
/// with the trace still written.
///
/// # Safety
/// `problem` must be NUL-terminated; `objectives` valid for `len` doubles;
/// `written` writable.
#[no_mangle]
pub unsafe extern "C" fn drmn_cluster_alternate(
    problem: *const c_char,
    objectives: *mut f64,
    len: usize,
    written: *mut usize,
) -> DrmnStatus {
    guard(|| {
        let p: ClusterProblem = serde_json::from_str(text(problem, "problem")?)
            .map_err(|e| Fail::Status(DrmnStatus::InvalidArgument, format!("problem JSON: {e}")))?;
        let trace = alternate(&p)?;
        let dst = out_slice(objectives, len, trace.objectives.len())?;
        dst.copy_from_slice(&trace.objectives);
        store(written, trace.objectives.len())?;
        match (p.mode, trace.first_increase(1e-12)) {
            (Mode::A, Some(iter)) => Err(Error::NotMonotone {
                iter,
                before: trace.objectives[iter - 1],
                after: trace.objectives[iter],
            }
            .into()),
            _ => Ok(()),
        }
    })
}

/// Area under the recall-vs-threshold curve (thresholds 0, 0.01, ..., 1) for
/// `n` per-phrase IoUs.
///
/// # Safety
/// `ious` must be valid for `n` doubles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn drmn_average_recall(ious: *const f64, n: usize, out: *mut f64) -> DrmnStatus {
    guard(|| {
        if ious.is_null() {
            return Err(null("ious"));
        }
        let records: Vec<EvalRecord> = std::slice::from_raw_parts(ious, n)
            .iter()
            .map(|&iou| EvalRecord { iou, stuff: false, plural: false })
            .collect();
        if let Some(bad) = records.iter().find(|r| !(0.0..=1.0).contains(&r.iou)) {
            return Err(Fail::Status(DrmnStatus::InvalidArgument, format!("IoU {} outside [0,1]", bad.iou)));
        }
        store(out, average_recall(&records, &default_thresholds())?.area)
    })
}
