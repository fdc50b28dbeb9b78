//! C ABI over a trained stancemoe checkpoint.
//!
//! Every fallible call returns an [`SmStatus`]; on failure the message is
//! available from [`sm_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use stancemoe::evaluation::{confusion, macro_metrics};
use stancemoe::model::{EncoderMode, ModelInput};
use stancemoe::textpipe::{encode_tokens, tokenize};
use stancemoe::{Checkpoint, Error, Label};

pub const SM_NUM_CLASSES: usize = 3;
pub const SM_NUM_EXPERTS: usize = 6;

const _: () = assert!(SM_NUM_CLASSES == stancemoe::textpipe::NUM_CLASSES);
const _: () = assert!(SM_NUM_EXPERTS == stancemoe::experts::NUM_EXPERTS);

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Format = 4,
    Dimension = 5,
    Config = 6,
    InvalidArgument = 7,
    Internal = 8,
}

/// Opaque handle to a loaded ensemble.
pub struct SmModel {
    checkpoint: Checkpoint,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SmPrediction {
    /// Label index: 0 pro-Palestine, 1 pro-Israel, 2 neutral.
    pub label: i32,
    pub probs: [f64; SM_NUM_CLASSES],
    /// First `gate_len` entries are the weights of the active experts.
    pub gate_weights: [f64; SM_NUM_EXPERTS],
    pub gate_len: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SmMetrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub precision: [f64; SM_NUM_CLASSES],
    pub recall: [f64; SM_NUM_CLASSES],
    pub f1: [f64; SM_NUM_CLASSES],
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> SmStatus {
    match err {
        Error::Io { .. } => SmStatus::Io,
        Error::Format(_) | Error::Json(_) | Error::Parse { .. } => SmStatus::Format,
        Error::Dimension { .. } | Error::Shape(_) => SmStatus::Dimension,
        Error::Config(_) | Error::InsufficientClass { .. } => SmStatus::Config,
        _ => SmStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (SmStatus, String)>) -> SmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SmStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SmStatus::Internal
        }
    }
}

fn lib_err(e: Error) -> (SmStatus, String) {
    (status_of(&e), e.to_string())
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (SmStatus, String)> {
    if p.is_null() {
        return Err((SmStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (SmStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

/// Loads an SMCK1 checkpoint. On success `*out` owns a handle to release
/// with [`sm_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sm_model_load(path: *const c_char, out: *mut *mut SmModel) -> SmStatus {
    guard(|| {
        if out.is_null() {
            return Err((SmStatus::NullPointer, "out is null".into()));
        }
        *out = ptr::null_mut();
        let path = c_str(path, "path")?;
        let checkpoint = Checkpoint::load(Path::new(path)).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(SmModel { checkpoint }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`sm_model_load`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn sm_model_free(model: *mut SmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of fold models in the ensemble, 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sm_model_num_folds(model: *const SmModel) -> usize {
    model
        .as_ref()
        .map_or(0, |m| m.checkpoint.ensemble.folds.len())
}

/// Tokenizes `text` with the checkpoint's vocabulary and lexicons and runs
/// the ensemble. Models trained on precomputed embeddings are rejected.
///
/// # Safety
/// `model` must be a live handle, `text` NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn sm_predict_text(
    model: *const SmModel,
    text: *const c_char,
    out: *mut SmPrediction,
) -> SmStatus {
    guard(|| {
        let model = model
            .as_ref()
            .ok_or((SmStatus::NullPointer, "model is null".to_string()))?;
        if out.is_null() {
            return Err((SmStatus::NullPointer, "out is null".into()));
        }
        let text = c_str(text, "text")?;
        let ck = &model.checkpoint;
        let spec = ck.ensemble.spec();
        if spec.encoder == EncoderMode::Precomputed {
            return Err((
                SmStatus::Config,
                "model was trained on precomputed embeddings; raw text is not supported".into(),
            ));
        }
        let tokens = tokenize(text, spec.max_len);
        // the label is not read during inference
        let example = encode_tokens("", &tokens, Label::Neutral, &ck.vocab, &ck.lexicon);
        let p = ck
            .ensemble
            .predict(&ModelInput::from_example(&example, None))
            .map_err(lib_err)?;
        let mut pred = SmPrediction {
            label: p.class.index() as i32,
            gate_len: p.gate_weights.dim(),
            ..Default::default()
        };
        pred.probs.copy_from_slice(&p.probs);
        pred.gate_weights[..p.gate_weights.dim()].copy_from_slice(&p.gate_weights);
        *out = pred;
        Ok(())
    })
}

/// Accuracy and per-class/macro metrics from `n` gold and predicted label indices.
///
/// # Safety
/// `golds` and `preds` must each point to `n` values (may be null when `n == 0`).
#[no_mangle]
pub unsafe extern "C" fn sm_metrics_from_labels(
    golds: *const i32,
    preds: *const i32,
    n: usize,
    out: *mut SmMetrics,
) -> SmStatus {
    guard(|| {
        if out.is_null() || (n > 0 && (golds.is_null() || preds.is_null())) {
            return Err((SmStatus::NullPointer, "null argument".into()));
        }
        if n == 0 {
            return Err((SmStatus::InvalidArgument, "no labels given".into()));
        }
        let to_labels = |p: *const i32| -> Result<Vec<Label>, (SmStatus, String)> {
            std::slice::from_raw_parts(p, n)
                .iter()
                .map(|&i| {
                    usize::try_from(i).ok().and_then(Label::from_index).ok_or((
                        SmStatus::InvalidArgument,
                        format!("label index {i} is not 0, 1 or 2"),
                    ))
                })
                .collect()
        };
        let cm = confusion(&to_labels(golds)?, &to_labels(preds)?).map_err(lib_err)?;
        let r = macro_metrics(&cm);
        let mut m = SmMetrics {
            accuracy: r.accuracy,
            macro_precision: r.macro_precision,
            macro_recall: r.macro_recall,
            macro_f1: r.macro_f1,
            ..Default::default()
        };
        for (c, cls) in r.per_class.iter().enumerate() {
            m.precision[c] = cls.precision;
            m.recall[c] = cls.recall;
            m.f1[c] = cls.f1;
        }
        *out = m;
        Ok(())
    })
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn sm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn sm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Static label key (`pro_palestine`, `pro_israel`, `neutral`), or null when out of range.
#[no_mangle]
pub extern "C" fn sm_label_name(index: i32) -> *const c_char {
    match index {
        0 => c"pro_palestine".as_ptr(),
        1 => c"pro_israel".as_ptr(),
        2 => c"neutral".as_ptr(),
        _ => ptr::null(),
    }
}
