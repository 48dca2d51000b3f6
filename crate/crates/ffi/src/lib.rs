//! C ABI for trajectory prediction with a trained checkpoint.
//!
//! Every function returns an [`OnevlStatus`]; on failure the message is
//! available from [`onevl_last_error`] on the same thread. Handles are opaque
//! and must be released with [`onevl_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use onevl::infer::{predict, DecodeMode};
use onevl::layout::{EncodedSample, Vocab};
use onevl::model::ModelBundle;
use onevl::vq::Codebook;
use onevl::world::{make_sample, Raster, Scenario, N_CLASSES, N_WAYPOINTS};
use onevl::Error;

/// Result code of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OnevlStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// A file could not be read or is not a valid artifact.
    Io = 3,
    /// Checkpoint and codebook disagree, or a setting is out of range.
    Config = 4,
    InvalidInput = 5,
    /// The model produced no parsable trajectory; outputs are NaN.
    DecodeFailure = 6,
    Panic = 7,
}

pub const ONEVL_MODE_ANSWER_ONLY: u32 = 0;
pub const ONEVL_MODE_EXPLICIT_COT: u32 = 1;
pub const ONEVL_MODE_LATENT_PREFILL: u32 = 2;
pub const ONEVL_MODE_LATENT_ITERATIVE: u32 = 3;
pub const ONEVL_MODE_MLP_HEAD: u32 = 4;

pub const ONEVL_SCENARIO_STRAIGHT: u32 = 0;
pub const ONEVL_SCENARIO_SLOW_LEAD: u32 = 1;
pub const ONEVL_SCENARIO_CUT_IN: u32 = 2;
pub const ONEVL_SCENARIO_WORKZONE_TAPER: u32 = 3;

/// Number of doubles written by the predict functions: 8 waypoints × (x, y).
pub const ONEVL_TRAJECTORY_LEN: usize = 16;

/// A loaded model with its vocabulary and visual codebook.
pub struct OnevlModel {
    bundle: ModelBundle,
    vocab: Vocab,
    codebook: Codebook,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).expect("nul bytes removed"));
}

fn status_of(e: &Error) -> OnevlStatus {
    match e {
        Error::Io { .. } | Error::Missing { .. } | Error::Parse { .. } => OnevlStatus::Io,
        Error::Tensor(onevl::tensor::TensorError::Checkpoint(_)) => OnevlStatus::Io,
        Error::Config(_) | Error::Codebook(_) => OnevlStatus::Config,
        _ => OnevlStatus::InvalidInput,
    }
}

/// Runs `f`, translating errors and panics into a status plus a stored message.
fn guard(f: impl FnOnce() -> Result<(), (OnevlStatus, String)>) -> OnevlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            OnevlStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            OnevlStatus::Panic
        }
    }
}

fn fail(e: Error) -> (OnevlStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (OnevlStatus, String) {
    (OnevlStatus::NullArgument, format!("{what} is null"))
}

/// # Safety
/// `p` must be null or point to a NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (OnevlStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (OnevlStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn mode_of(mode: u32) -> Result<DecodeMode, (OnevlStatus, String)> {
    DecodeMode::ALL
        .get(mode as usize)
        .copied()
        .ok_or_else(|| (OnevlStatus::InvalidInput, format!("unknown mode {mode}")))
}

fn load(checkpoint: &str, codebook: &str) -> Result<OnevlModel, Error> {
    let bundle = ModelBundle::load(Path::new(checkpoint))?;
    let codebook = Codebook::load(Path::new(codebook))?;
    let c = &bundle.config;
    if codebook.k != c.codebook_size || codebook.patch != c.patch {
        return Err(Error::Config(format!(
            "codebook has k={} patch={}, model expects k={} patch={}",
            codebook.k, codebook.patch, c.codebook_size, c.patch
        )));
    }
    let vocab = Vocab::new(c.codebook_size, c.latent_vis_count, c.latent_lang_count)?;
    Ok(OnevlModel { bundle, vocab, codebook })
}

/// # Safety
/// `model` must come from [`onevl_model_load`]; `out_xy` must hold
/// [`ONEVL_TRAJECTORY_LEN`] doubles; `out_decoded` may be null.
unsafe fn run_predict(
    model: *const OnevlModel,
    sample: impl FnOnce(&OnevlModel) -> Result<EncodedSample, (OnevlStatus, String)>,
    mode: u32,
    out_xy: *mut f64,
    out_decoded: *mut usize,
) -> Result<(), (OnevlStatus, String)> {
    let m = model.as_ref().ok_or_else(|| null("model"))?;
    if out_xy.is_null() {
        return Err(null("out_xy"));
    }
    let mode = mode_of(mode)?;
    if mode == DecodeMode::MlpHead && !m.bundle.has_head() {
        return Err((OnevlStatus::Config, "model has no regression head".into()));
    }
    let s = sample(m)?;
    let p = predict(&m.bundle, &m.vocab, &s, mode).map_err(fail)?;
    let out = std::slice::from_raw_parts_mut(out_xy, ONEVL_TRAJECTORY_LEN);
    if !out_decoded.is_null() {
        *out_decoded = p.latency.decoded_tokens;
    }
    match p.trajectory {
        Some(t) if t.len() == N_WAYPOINTS => {
            for (o, v) in out.iter_mut().zip(t.iter().flatten()) {
                *o = *v;
            }
            Ok(())
        }
        _ => {
            out.fill(f64::NAN);
            Err((OnevlStatus::DecodeFailure, "no parsable trajectory in the model output".into()))
        }
    }
}

/// Loads a model checkpoint and the visual codebook it was trained with.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn onevl_model_load(checkpoint_path: *const c_char, codebook_path: *const c_char, out: *mut *mut OnevlModel) -> OnevlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let ck = str_arg(checkpoint_path, "checkpoint_path")?;
        let cb = str_arg(codebook_path, "codebook_path")?;
        let m = load(ck, cb).map_err(fail)?;
        *out = Box::into_raw(Box::new(m));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from [`onevl_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn onevl_model_free(model: *mut OnevlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Raster height and width the model expects.
///
/// # Safety
/// `model` must be a live handle; `h` and `w` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn onevl_model_raster_size(model: *const OnevlModel, h: *mut usize, w: *mut usize) -> OnevlStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if h.is_null() || w.is_null() {
            return Err(null("h/w"));
        }
        *h = m.bundle.config.raster_h;
        *w = m.bundle.config.raster_w;
        Ok(())
    })
}

/// Predicts a trajectory from a row-major raster of cell classes and the
/// ego-state sentence. Writes 16 doubles (x0, y0, …, x7, y7) in meters.
///
/// # Safety
/// `cells` must hold `n_cells` bytes; `ego_state_text` must be NUL-terminated;
/// `out_xy` must hold 16 doubles; `out_decoded_tokens` may be null.
#[no_mangle]
pub unsafe extern "C" fn onevl_predict(
    model: *const OnevlModel,
    cells: *const u8,
    n_cells: usize,
    ego_state_text: *const c_char,
    mode: u32,
    out_xy: *mut f64,
    out_decoded_tokens: *mut usize,
) -> OnevlStatus {
    guard(|| {
        let text = str_arg(ego_state_text, "ego_state_text")?;
        if cells.is_null() {
            return Err(null("cells"));
        }
        let cells = std::slice::from_raw_parts(cells, n_cells);
        run_predict(
            model,
            |m| {
                let (h, w) = (m.bundle.config.raster_h, m.bundle.config.raster_w);
                if cells.len() != h * w {
                    return Err((OnevlStatus::InvalidInput, format!("expected {} cells, got {}", h * w, cells.len())));
                }
                if let Some(c) = cells.iter().find(|&&c| c as usize >= N_CLASSES) {
                    return Err((OnevlStatus::InvalidInput, format!("cell class {c} out of range")));
                }
                let mut r = Raster::new(h, w);
                r.cells.copy_from_slice(cells);
                EncodedSample::for_inference(text, r, &m.vocab, &m.codebook).map_err(fail)
            },
            mode,
            out_xy,
            out_decoded_tokens,
        )
    })
}

/// Generates the simulator scene for (`seed`, `scenario`) and predicts on it.
///
/// # Safety
/// As for [`onevl_predict`].
#[no_mangle]
pub unsafe extern "C" fn onevl_predict_scenario(model: *const OnevlModel, seed: u64, scenario: u32, mode: u32, out_xy: *mut f64, out_decoded_tokens: *mut usize) -> OnevlStatus {
    guard(|| {
        let sc = *Scenario::ALL
            .get(scenario as usize)
            .ok_or_else(|| (OnevlStatus::InvalidInput, format!("unknown scenario {scenario}")))?;
        run_predict(
            model,
            |m| {
                let s = make_sample(seed, sc, m.bundle.config.raster_h, m.bundle.config.raster_w);
                EncodedSample::for_inference(&s.ego_state_text, s.frame_now, &m.vocab, &m.codebook).map_err(fail)
            },
            mode,
            out_xy,
            out_decoded_tokens,
        )
    })
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn onevl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, NUL-terminated and static.
#[no_mangle]
pub extern "C" fn onevl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
