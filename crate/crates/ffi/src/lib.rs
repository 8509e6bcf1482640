//! C ABI over the `strip-mlp` crate.
//!
//! Every function returns a [`StripMlpStatus`]; on failure the message is
//! available from [`strip_mlp_last_error`] on the same thread. Models are
//! opaque handles released with [`strip_mlp_model_free`]; strings returned
//! through `char **` are released with [`strip_mlp_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use strip_mlp::checkpoint::{load_checkpoint, save_checkpoint};
use strip_mlp::cost::{self, Table1Config};
use strip_mlp::model::{ModelConfig, StripMlp, Variant};
use strip_mlp::params::ParamStore;
use strip_mlp::{Error, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StripMlpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Dimension = 4,
    NonFinite = 5,
    Io = 6,
    Checkpoint = 7,
    Data = 8,
    Panic = 9,
}

/// A built model and its parameters.
pub struct StripMlpModel {
    model: StripMlp,
    store: ParamStore,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> StripMlpStatus {
    match e {
        Error::Config(_) | Error::Parse(_) => StripMlpStatus::Config,
        Error::Dimension(_) | Error::TensorShape { .. } => StripMlpStatus::Dimension,
        Error::NonFinite { .. } | Error::Diverged { .. } => StripMlpStatus::NonFinite,
        Error::Io(_) => StripMlpStatus::Io,
        Error::Checkpoint(_) => StripMlpStatus::Checkpoint,
        Error::Ingestion { .. } | Error::Data(_) => StripMlpStatus::Data,
        Error::Usage(_) => StripMlpStatus::InvalidArgument,
    }
}

struct Fail(StripMlpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> StripMlpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            StripMlpStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            StripMlpStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(StripMlpStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(StripMlpStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn model_ref<'a>(m: *const StripMlpModel) -> Result<&'a StripMlpModel, Fail> {
    m.as_ref().ok_or_else(|| null("model"))
}

fn out_string(s: String, out: *mut *mut c_char) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    let c = CString::new(s).map_err(|_| Fail(StripMlpStatus::InvalidArgument, "interior NUL".into()))?;
    unsafe { *out = c.into_raw() };
    Ok(())
}

fn build(cfg: &ModelConfig, seed: u64, out: *mut *mut StripMlpModel) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    let (model, store) = StripMlp::build(cfg, seed)?;
    unsafe { *out = Box::into_raw(Box::new(StripMlpModel { model, store })) };
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn strip_mlp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds a named variant (`tstar`, `t`, `s`, `b`).
///
/// # Safety
/// `variant` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn strip_mlp_model_new(
    variant: *const c_char,
    num_classes: usize,
    image_size: usize,
    seed: u64,
    out: *mut *mut StripMlpModel,
) -> StripMlpStatus {
    guard(|| {
        let v: Variant = str_arg(variant, "variant")?.parse()?;
        let cfg = ModelConfig { num_classes, image_size, ..ModelConfig::variant(v) };
        build(&cfg, seed, out)
    })
}

/// Builds a model from a TOML table of model fields.
///
/// # Safety
/// `config_toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn strip_mlp_model_from_toml(
    config_toml: *const c_char,
    seed: u64,
    out: *mut *mut StripMlpModel,
) -> StripMlpStatus {
    guard(|| {
        let cfg = ModelConfig::from_toml(str_arg(config_toml, "config_toml")?)?;
        build(&cfg, seed, out)
    })
}

/// # Safety
/// `model` must come from a constructor of this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn strip_mlp_model_free(model: *mut StripMlpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of trainable scalars.
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn strip_mlp_model_param_count(model: *const StripMlpModel, out: *mut u64) -> StripMlpStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.store.trainable_count() as u64;
        Ok(())
    })
}

/// Input channels, image side and class count.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn strip_mlp_model_dims(
    model: *const StripMlpModel,
    in_channels: *mut usize,
    image_size: *mut usize,
    num_classes: *mut usize,
) -> StripMlpStatus {
    guard(|| {
        let m = model_ref(model)?;
        let cfg = &m.model.cfg;
        for (p, v, name) in [
            (in_channels, cfg.in_channels, "in_channels"),
            (image_size, cfg.image_size, "image_size"),
            (num_classes, cfg.num_classes, "num_classes"),
        ] {
            *p.as_mut().ok_or_else(|| null(name))? = v;
        }
        Ok(())
    })
}

/// Eval-mode logits for `batch` images in NCHW order.
/// `input_len` must equal `batch * in_channels * image_size^2` and
/// `logits_len` must equal `batch * num_classes`.
///
/// # Safety
/// `input` and `logits` must point to at least `input_len` / `logits_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn strip_mlp_model_forward(
    model: *const StripMlpModel,
    input: *const f64,
    input_len: usize,
    batch: usize,
    logits: *mut f64,
    logits_len: usize,
) -> StripMlpStatus {
    guard(|| {
        let m = model_ref(model)?;
        if input.is_null() {
            return Err(null("input"));
        }
        if logits.is_null() {
            return Err(null("logits"));
        }
        let shape = m.model.input_shape(batch);
        let expected: usize = shape.iter().product();
        if input_len != expected || logits_len != batch * m.model.cfg.num_classes {
            return Err(Fail(
                StripMlpStatus::Dimension,
                format!(
                    "batch {batch} needs {expected} input and {} logit values, got {input_len} and {logits_len}",
                    batch * m.model.cfg.num_classes
                ),
            ));
        }
        let x = Tensor::from_vec(&shape, std::slice::from_raw_parts(input, input_len).to_vec())?;
        let y = m.model.logits(&m.store, &x)?;
        ptr::copy_nonoverlapping(y.data().as_ptr(), logits, logits_len);
        Ok(())
    })
}

/// Writes the parameters to a checkpoint file.
///
/// # Safety
/// `model` must be valid and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn strip_mlp_model_save(model: *const StripMlpModel, path: *const c_char) -> StripMlpStatus {
    guard(|| {
        let m = model_ref(model)?;
        save_checkpoint(Path::new(str_arg(path, "path")?), &m.store, None)?;
        Ok(())
    })
}

/// Replaces the parameters with those of a checkpoint file.
///
/// # Safety
/// `model` must be valid and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn strip_mlp_model_load(model: *mut StripMlpModel, path: *const c_char) -> StripMlpStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let mut store = m.store.clone();
        load_checkpoint(Path::new(str_arg(path, "path")?), &mut store, None)?;
        m.store = store;
        Ok(())
    })
}

/// The stage-1 / stage-4 token-mixing cost report as JSON.
///
/// # Safety
/// `out` must be a valid pointer; free the result with [`strip_mlp_string_free`].
#[no_mangle]
pub unsafe extern "C" fn strip_mlp_table1_json(out: *mut *mut c_char) -> StripMlpStatus {
    guard(|| out_string(cost::table1(&Table1Config::default())?.to_json()?, out))
}

/// Per-part cost breakdown of a built model as JSON.
///
/// # Safety
/// `model` and `out` must be valid; free the result with [`strip_mlp_string_free`].
#[no_mangle]
pub unsafe extern "C" fn strip_mlp_model_cost_json(
    model: *const StripMlpModel,
    out: *mut *mut c_char,
) -> StripMlpStatus {
    guard(|| {
        let m = model_ref(model)?;
        out_string(cost::model_report(&m.model.cfg)?.to_json()?, out)
    })
}

/// # Safety
/// `s` must come from this library, or be null.
#[no_mangle]
pub unsafe extern "C" fn strip_mlp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
