//! C interface. Models are opaque handles; every fallible call returns an
//! `LccStatus` and leaves a message for `lcc_last_error` on failure.
//!
//! Strings passed in must be NUL-terminated UTF-8. Strings returned by the
//! library are owned by the caller and released with `lcc_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use lcc_core::harness::config::ExperimentConfig;
use lcc_core::harness::eval::evaluate;
use lcc_core::harness::pipeline::Pipeline;
use lcc_core::harness::task::{ingest_jsonl, Split, Vocabulary};
use lcc_core::model::{forward, load_checkpoint, logit_lens, save_checkpoint, HeadSite, ModelParams};
use lcc_core::LccError;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LccStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    OutOfRange = 4,
    Io = 5,
    Format = 6,
    Config = 7,
    Numeric = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LccSplit {
    Train = 0,
    Recovery = 1,
    Probe = 2,
    HeldOut = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LccModelInfo {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LccMetrics {
    pub accuracy: f64,
    pub perplexity: f64,
    pub n_samples: usize,
}

/// A loaded model.
pub struct LccModel {
    params: ModelParams<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &LccError) -> LccStatus {
    match e {
        LccError::Stage { source, .. } => status_of(source),
        LccError::InvalidArgument(_) => LccStatus::InvalidArgument,
        LccError::ShapeMismatch { .. } => LccStatus::ShapeMismatch,
        LccError::TokenOutOfRange { .. } | LccError::SequenceTooLong { .. } | LccError::SiteOutOfRange(_) => {
            LccStatus::OutOfRange
        }
        LccError::Io { .. } => LccStatus::Io,
        LccError::Format(_) | LccError::Json(_) => LccStatus::Format,
        LccError::Config(_) => LccStatus::Config,
        LccError::NonFinite { .. } | LccError::Diverged { .. } => LccStatus::Numeric,
    }
}

struct Fail(LccStatus, String);

impl From<LccError> for Fail {
    fn from(e: LccError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(LccStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> LccStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LccStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            LccStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Fail(LccStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

unsafe fn model_ref<'a>(m: *const LccModel) -> Result<&'a LccModel, Fail> {
    unsafe { m.as_ref() }.ok_or_else(|| null("model"))
}

fn check_len(got: usize, want: usize, what: &str) -> Result<(), Fail> {
    if got != want {
        return Err(Fail(LccStatus::ShapeMismatch, format!("{what} has length {got}; expected {want}")));
    }
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lcc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint into a new handle stored in `*out`.
///
/// # Safety
/// `path` must be a valid C string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn lcc_model_load(path: *const c_char, out: *mut *mut LccModel) -> LccStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = unsafe { path_arg(path, "path") }?;
        let params = load_checkpoint(&path)?;
        unsafe { *out = Box::into_raw(Box::new(LccModel { params })) };
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must come from `lcc_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lcc_model_free(model: *mut LccModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// # Safety
/// `model` must be a live handle and `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn lcc_model_save(model: *const LccModel, path: *const c_char) -> LccStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }?;
        let path = unsafe { path_arg(path, "path") }?;
        save_checkpoint(&m.params, &path)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lcc_model_info(model: *const LccModel, out: *mut LccModelInfo) -> LccStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }?;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let c = &m.params.config;
        *out = LccModelInfo {
            vocab_size: c.vocab_size,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            d_model: c.d_model,
            d_head: c.d_head,
            d_ffn: c.d_ffn,
            max_seq_len: c.max_seq_len,
        };
        Ok(())
    })
}

/// Writes `n_tokens × vocab_size` row-major logits to `logits`, whose
/// length must be exactly that.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn lcc_model_forward(
    model: *const LccModel,
    tokens: *const u32,
    n_tokens: usize,
    logits: *mut f32,
    logits_len: usize,
) -> LccStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }?;
        let tokens = unsafe { slice_arg(tokens, n_tokens, "tokens") }?;
        check_len(logits_len, n_tokens * m.params.config.vocab_size, "logits")?;
        if logits.is_null() && logits_len > 0 {
            return Err(null("logits"));
        }
        let out = forward(&m.params, tokens, None)?;
        if logits_len > 0 {
            unsafe { std::slice::from_raw_parts_mut(logits, logits_len) }.copy_from_slice(&out.data);
        }
        Ok(())
    })
}

/// Reads a head activation `z` (length `d_head`) through the model's
/// output projection, final norm and unembedding into `out` (length
/// `vocab_size`).
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn lcc_model_logit_lens(
    model: *const LccModel,
    layer: usize,
    head: usize,
    z: *const f32,
    z_len: usize,
    out: *mut f32,
    out_len: usize,
) -> LccStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }?;
        let z = unsafe { slice_arg(z, z_len, "z") }?;
        check_len(out_len, m.params.config.vocab_size, "out")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let logits = logit_lens(z, HeadSite::new(layer, head), &m.params)?;
        unsafe { std::slice::from_raw_parts_mut(out, out_len) }.copy_from_slice(&logits);
        Ok(())
    })
}

/// Overwrites the constant bias slot of one head with `c` (length
/// `d_head`).
///
/// # Safety
/// `model` must be a live handle and `c` hold `len` elements.
#[no_mangle]
pub unsafe extern "C" fn lcc_model_inject_head_bias(
    model: *mut LccModel,
    layer: usize,
    head: usize,
    c: *const f32,
    len: usize,
) -> LccStatus {
    guard(|| {
        let m = unsafe { model.as_mut() }.ok_or_else(|| null("model"))?;
        let c = unsafe { slice_arg(c, len, "c") }?;
        m.params.inject_head_bias(HeadSite::new(layer, head), c)?;
        Ok(())
    })
}

/// Accuracy and perplexity of one split of a JSONL dataset. Records without
/// a split belong to the training split.
///
/// # Safety
/// `model` must be a live handle, `path` a valid C string, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lcc_evaluate(
    model: *const LccModel,
    path: *const c_char,
    split: LccSplit,
    out: *mut LccMetrics,
) -> LccStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }?;
        let path = unsafe { path_arg(path, "path") }?;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let vocab = Vocabulary::new(m.params.config.vocab_size)?;
        let (ds, _) = ingest_jsonl(&path, &vocab)?;
        let split = match split {
            LccSplit::Train => Split::Train,
            LccSplit::Recovery => Split::Recovery,
            LccSplit::Probe => Split::Probe,
            LccSplit::HeldOut => Split::HeldOut,
        };
        let r = evaluate(&m.params, &ds.split(split))?;
        *out = LccMetrics {
            accuracy: r.accuracy,
            perplexity: r.perplexity,
            n_samples: r.n_samples,
        };
        Ok(())
    })
}

/// Runs the full pipeline for a TOML config and stores the JSON report in
/// `*report_json`.
///
/// # Safety
/// `config_path` must be a valid C string and `report_json` writable.
#[no_mangle]
pub unsafe extern "C" fn lcc_run_pipeline(config_path: *const c_char, report_json: *mut *mut c_char) -> LccStatus {
    guard(|| {
        if report_json.is_null() {
            return Err(null("report_json"));
        }
        let path = unsafe { path_arg(config_path, "config_path") }?;
        let cfg = ExperimentConfig::load(&path)?;
        let report = Pipeline::new(cfg)?.run()?;
        let text = CString::new(report.to_json()?).expect("JSON has no NUL");
        unsafe { *report_json = text.into_raw() };
        Ok(())
    })
}

/// Releases a string returned by the library; null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lcc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}
