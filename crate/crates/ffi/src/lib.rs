//! C ABI over the `mixste` crate.
//!
//! Models are opaque `MxModel` handles created by [`mx_model_load`] or
//! [`mx_model_new`] and released with [`mx_model_free`]. Every fallible call
//! returns an [`MxStatus`]; on failure [`mx_last_error`] describes the error
//! for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mixste::bench::{count_passes, frame_evaluations_gap, InferencePlan, Mode};
use mixste::model::{load_checkpoint, save_checkpoint, KeypointSequence2D, MixSTE, ModelConfig};
use mixste::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MxStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Numeric = 4,
    Config = 5,
    Parse = 6,
    Schema = 7,
    Io = 8,
    Panic = 9,
}

/// Inference mode for [`mx_count_passes`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MxMode {
    Seq2seq = 0,
    Seq2frame = 1,
}

/// Opaque model handle.
pub struct MxModel {
    inner: MixSTE<f32>,
}

/// Architecture summary filled by [`mx_model_info`].
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MxModelInfo {
    pub joints: usize,
    pub frames: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub parameters: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MxStatus {
    match e {
        Error::Shape { .. } | Error::ShapeMsg(_) => MxStatus::Shape,
        Error::Numeric(_) | Error::NonFiniteLoss { .. } | Error::MissingGrad(_) => MxStatus::Numeric,
        Error::Param(_) => MxStatus::InvalidArgument,
        Error::Config(_) => MxStatus::Config,
        Error::Parse(_) | Error::Json(_) => MxStatus::Parse,
        Error::Schema(_) => MxStatus::Schema,
        Error::Io(_) => MxStatus::Io,
    }
}

enum Failure {
    Status(MxStatus, String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

/// Runs `f`, converting errors and panics into a status and the thread's
/// last-error message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MxStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MxStatus::Ok
        }
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            MxStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(MxStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Status(MxStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(Path::new(s))
}

/// Message for the last failed call on this thread, or null after a
/// successful call. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn mx_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint written by the `mixste` tools (with its `.json`
/// sidecar) into `*out`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mx_model_load(path: *const c_char, out: *mut *mut MxModel) -> MxStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = load_checkpoint::<f32>(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(MxModel { inner: model }));
        Ok(())
    })
}

/// Creates a freshly initialized model. Unset dropout and activation take
/// their defaults.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mx_model_new(
    joints: usize,
    frames: usize,
    dim: usize,
    depth: usize,
    heads: usize,
    seed: u64,
    out: *mut *mut MxModel,
) -> MxStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = ModelConfig {
            joints,
            frames,
            dim,
            depth,
            heads,
            ..ModelConfig::default()
        };
        let model = MixSTE::<f32>::new(cfg, seed)?;
        *out = Box::into_raw(Box::new(MxModel { inner: model }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mx_model_free(model: *mut MxModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the checkpoint and its `.json` sidecar.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mx_model_save(model: *const MxModel, path: *const c_char) -> MxStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        save_checkpoint(&m.inner, path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mx_model_info(model: *const MxModel, out: *mut MxModelInfo) -> MxStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let o = out.as_mut().ok_or_else(|| null("out"))?;
        let c = &m.inner.config;
        *o = MxModelInfo {
            joints: c.joints,
            frames: c.frames,
            dim: c.dim,
            depth: c.depth,
            heads: c.heads,
            parameters: m.inner.count_parameters(),
        };
        Ok(())
    })
}

/// Lifts `frames * joints` normalized 2D keypoints (row-major
/// `[frames][joints][2]`) to root-relative 3D millimetres written to `out`
/// (`[frames][joints][3]`, `out_len >= frames * joints * 3`). Sequences of
/// any length are processed in consecutive windows of the model's frame
/// count.
///
/// # Safety
/// `keypoints` must point to `frames * joints * 2` doubles and `out` to
/// `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mx_predict(
    model: *const MxModel,
    keypoints: *const f64,
    frames: usize,
    joints: usize,
    out: *mut f64,
    out_len: usize,
) -> MxStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if keypoints.is_null() {
            return Err(null("keypoints"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        if frames == 0 || joints != m.inner.config.joints {
            return Err(Failure::Status(
                MxStatus::InvalidArgument,
                format!(
                    "expected a non-empty sequence of {} joints, got {frames} frames of {joints}",
                    m.inner.config.joints
                ),
            ));
        }
        let need = frames * joints * 3;
        if out_len < need {
            return Err(Failure::Status(
                MxStatus::InvalidArgument,
                format!("output buffer holds {out_len} values, {need} needed"),
            ));
        }
        let input = std::slice::from_raw_parts(keypoints, frames * joints * 2).to_vec();
        let seq = KeypointSequence2D::new(joints, frames, input, "ffi")?;
        let pred = m.inner.predict_long(&seq, 8)?;
        std::slice::from_raw_parts_mut(out, need).copy_from_slice(&pred.coords);
        Ok(())
    })
}

/// Forward passes needed for `frames` frames with window `window`
/// (seq2seq) or one pass per frame (seq2frame). Zero when `window` is 0.
#[no_mangle]
pub extern "C" fn mx_count_passes(frames: usize, window: usize, mode: MxMode) -> usize {
    if window == 0 {
        return 0;
    }
    let mode = match mode {
        MxMode::Seq2seq => Mode::Seq2Seq,
        MxMode::Seq2frame => Mode::Seq2Frame,
    };
    count_passes(&InferencePlan {
        frames,
        window,
        padding: 0,
        mode,
    })
}

/// Ratio of seq2frame to seq2seq frame evaluations, exact and in the
/// large-sequence limit.
///
/// # Safety
/// `exact` and `approx` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mx_frame_evaluations_gap(
    frames: usize,
    window: usize,
    padding: usize,
    exact: *mut f64,
    approx: *mut f64,
) -> MxStatus {
    guard(|| {
        let e = exact.as_mut().ok_or_else(|| null("exact"))?;
        let a = approx.as_mut().ok_or_else(|| null("approx"))?;
        let g = frame_evaluations_gap(frames, window, padding)?;
        *e = g.exact;
        *a = g.approx;
        Ok(())
    })
}
