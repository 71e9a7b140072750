//! C ABI over `decoy-core`.
//!
//! Every fallible function returns a [`DecoyStatus`]; on failure the message
//! is available from [`decoy_last_error`] on the same thread. Handles are
//! opaque and must be released with their matching `*_free` function.
//! Images are `IMAGE_SIDE * IMAGE_SIDE * 3` floats in row-major HWC order
//! with values in `[0, 1]`; masks are `IMAGE_SIDE * IMAGE_SIDE` floats where
//! 1 keeps a pixel and 0 marks it for inpainting.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use decoy_core::attack::{protect, AdversarialNoise};
use decoy_core::diffusion::codec::{IMAGE_CHANNELS, IMAGE_SIDE};
use decoy_core::diffusion::sampler::{sample_inpaint, SampleOptions};
use decoy_core::harness::{measure, RunConfig};
use decoy_core::model::Model;
use decoy_core::tensor::Tensor;
use decoy_core::Error;
use serde_json::Value;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoyStatus {
    Ok = 0,
    NullArgument = 1,
    /// Bad JSON, unknown keys, invalid values or an untokenizable prompt.
    Config = 2,
    /// Wrong tensor shape or out-of-range pixel values.
    Shape = 3,
    /// Missing, corrupt or untrained checkpoint.
    Checkpoint = 4,
    Io = 5,
    /// Non-finite loss or divergence.
    Numeric = 6,
    /// Malformed file contents.
    Format = 7,
    BufferTooSmall = 8,
    /// A Rust panic was caught at the boundary.
    Panic = 9,
}

/// Class masses of the cross-attention in the inpaint region.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DecoyMasses {
    pub content: f32,
    pub bos: f32,
    pub eos: f32,
}

/// Opaque model handle.
pub struct DecoyModel(Model);

/// Opaque handle to a computed protective perturbation.
pub struct DecoyNoise(AdversarialNoise);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DecoyStatus {
    match e {
        Error::Config(_) | Error::Json(_) | Error::Text(_) => DecoyStatus::Config,
        Error::Tensor(_) | Error::Shape(_) => DecoyStatus::Shape,
        Error::Checkpoint(_) => DecoyStatus::Checkpoint,
        Error::Io(_) => DecoyStatus::Io,
        Error::NonFiniteLoss { .. } | Error::Diverged { .. } => DecoyStatus::Numeric,
        Error::Format(_) => DecoyStatus::Format,
    }
}

struct Fail(DecoyStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(DecoyStatus::NullArgument, format!("{what} is null"))
}

/// Run `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DecoyStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DecoyStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            DecoyStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(DecoyStatus::Config, format!("{what} is not valid UTF-8")))
}

unsafe fn tensor_arg(p: *const f32, shape: &[usize], what: &str) -> Result<Tensor<f32>, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let n = shape.iter().product();
    let data = std::slice::from_raw_parts(p, n).to_vec();
    Ok(Tensor::new(shape.to_vec(), data).map_err(Error::from)?)
}

unsafe fn image_arg(p: *const f32) -> Result<Tensor<f32>, Fail> {
    tensor_arg(p, &[IMAGE_SIDE, IMAGE_SIDE, IMAGE_CHANNELS], "image")
}

unsafe fn mask_arg(p: *const f32) -> Result<Tensor<f32>, Fail> {
    tensor_arg(p, &[IMAGE_SIDE, IMAGE_SIDE], "mask")
}

unsafe fn out_slice<'a>(p: *mut f32, len: usize, need: usize) -> Result<&'a mut [f32], Fail> {
    if p.is_null() {
        return Err(null("output buffer"));
    }
    if len < need {
        return Err(Fail(DecoyStatus::BufferTooSmall, format!("output buffer holds {len} floats, need {need}")));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn model_arg<'a>(p: *const DecoyModel) -> Result<&'a Model, Fail> {
    p.as_ref().map(|m| &m.0).ok_or_else(|| null("model"))
}

unsafe fn noise_arg<'a>(p: *const DecoyNoise) -> Result<&'a AdversarialNoise, Fail> {
    p.as_ref().map(|n| &n.0).ok_or_else(|| null("noise"))
}

/// Resolve an optional JSON object as the `section` part of a run config,
/// on top of defaults.
unsafe fn config_arg(section: &str, json: *const c_char) -> Result<RunConfig, Fail> {
    if json.is_null() {
        return Ok(RunConfig::default());
    }
    let text = str_arg(json, section)?;
    let patch: Value = serde_json::from_str(text).map_err(Error::from)?;
    let file = serde_json::json!({ section: patch });
    Ok(RunConfig::resolve(Some(&file), &[])?.0)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn decoy_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn decoy_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Number of floats in an image buffer.
#[no_mangle]
pub extern "C" fn decoy_image_len() -> usize {
    IMAGE_SIDE * IMAGE_SIDE * IMAGE_CHANNELS
}

/// Number of floats in a mask buffer.
#[no_mangle]
pub extern "C" fn decoy_mask_len() -> usize {
    IMAGE_SIDE * IMAGE_SIDE
}

/// Fresh, untrained model. `model_json` may be null for the default
/// architecture, or a JSON object overriding model config keys.
///
/// # Safety
/// `model_json` must be null or a NUL-terminated string; `out` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn decoy_model_new(model_json: *const c_char, out: *mut *mut DecoyModel) -> DecoyStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = config_arg("model", model_json)?;
        let model = Model::new(cfg.model)?;
        *out = Box::into_raw(Box::new(DecoyModel(model)));
        Ok(())
    })
}

/// Load a checkpoint directory written by `decoy train`.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn decoy_model_load(dir: *const c_char, out: *mut *mut DecoyModel) -> DecoyStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = str_arg(dir, "dir")?;
        let model = Model::load(Path::new(dir))?;
        *out = Box::into_raw(Box::new(DecoyModel(model)));
        Ok(())
    })
}

/// Write the model to a checkpoint directory.
///
/// # Safety
/// `model` must come from this library; `dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn decoy_model_save(model: *const DecoyModel, dir: *const c_char) -> DecoyStatus {
    guard(|| {
        let model = model_arg(model)?;
        let dir = str_arg(dir, "dir")?;
        model.save(Path::new(dir))?;
        Ok(())
    })
}

/// Copy the 64-character hex weight hash and a terminating NUL into `buf`.
///
/// # Safety
/// `model` must come from this library; `buf` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn decoy_model_hash(model: *const DecoyModel, buf: *mut c_char, len: usize) -> DecoyStatus {
    guard(|| {
        let model = model_arg(model)?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let hash = model.hash()?;
        if len < hash.len() + 1 {
            return Err(Fail(DecoyStatus::BufferTooSmall, format!("hash needs {} bytes", hash.len() + 1)));
        }
        std::ptr::copy_nonoverlapping(hash.as_ptr().cast(), buf, hash.len());
        *buf.add(hash.len()) = 0;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn decoy_model_free(model: *mut DecoyModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Compute a protective perturbation for `image` under `mask`.
/// `attack_json` may be null for defaults, or a JSON object overriding
/// attack config keys (e.g. `{"epsilon": 0.047, "iterations": 100}`).
///
/// # Safety
/// Buffers must hold `decoy_image_len()` and `decoy_mask_len()` floats;
/// `attack_json` must be null or NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn decoy_protect(
    model: *const DecoyModel,
    image: *const f32,
    mask: *const f32,
    attack_json: *const c_char,
    out: *mut *mut DecoyNoise,
) -> DecoyStatus {
    guard(|| {
        let model = model_arg(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let x = image_arg(image)?;
        let m = mask_arg(mask)?;
        let cfg = config_arg("attack", attack_json)?;
        let noise = protect(model, &x, &m, &cfg.attack)?;
        *out = Box::into_raw(Box::new(DecoyNoise(noise)));
        Ok(())
    })
}

/// Copy the perturbation into `out` (`decoy_image_len()` floats).
///
/// # Safety
/// `noise` must come from this library; `out` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn decoy_noise_delta(noise: *const DecoyNoise, out: *mut f32, len: usize) -> DecoyStatus {
    guard(|| {
        let noise = noise_arg(noise)?;
        let d = noise.delta.data();
        out_slice(out, len, d.len())?.copy_from_slice(d);
        Ok(())
    })
}

/// Write `image + delta` into `out`.
///
/// # Safety
/// `noise` must come from this library; `image` must hold
/// `decoy_image_len()` floats and `out` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn decoy_noise_apply(
    noise: *const DecoyNoise,
    image: *const f32,
    out: *mut f32,
    len: usize,
) -> DecoyStatus {
    guard(|| {
        let noise = noise_arg(noise)?;
        let x = image_arg(image)?;
        let p = noise.protected(&x)?;
        out_slice(out, len, p.data().len())?.copy_from_slice(p.data());
        Ok(())
    })
}

/// Number of entries in the per-iteration loss history.
///
/// # Safety
/// `noise` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn decoy_noise_loss_len(noise: *const DecoyNoise) -> usize {
    noise.as_ref().map_or(0, |n| n.0.loss_history.len())
}

/// Copy the per-iteration attention loss into `out`.
///
/// # Safety
/// `noise` must come from this library; `out` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn decoy_noise_loss_history(noise: *const DecoyNoise, out: *mut f32, len: usize) -> DecoyStatus {
    guard(|| {
        let h = &noise_arg(noise)?.loss_history;
        out_slice(out, len, h.len())?.copy_from_slice(h);
        Ok(())
    })
}

/// # Safety
/// `noise` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn decoy_noise_free(noise: *mut DecoyNoise) {
    if !noise.is_null() {
        drop(Box::from_raw(noise));
    }
}

/// Inpaint the mask-0 region of `image` from `prompt`; writes
/// `decoy_image_len()` floats to `out`. `sampler_json` may be null or a JSON
/// object overriding sampler config keys.
///
/// # Safety
/// Buffers as for [`decoy_protect`]; `prompt` must be NUL-terminated and
/// `out` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn decoy_inpaint(
    model: *const DecoyModel,
    image: *const f32,
    mask: *const f32,
    prompt: *const c_char,
    sampler_json: *const c_char,
    out: *mut f32,
    len: usize,
) -> DecoyStatus {
    guard(|| {
        let model = model_arg(model)?;
        let x = image_arg(image)?;
        let m = mask_arg(mask)?;
        let prompt = str_arg(prompt, "prompt")?;
        let cfg = config_arg("sampler", sampler_json)?;
        let tokens = model.tokenize(prompt)?;
        let opts = SampleOptions {
            trace: false,
            force_uncond: false,
        };
        let o = sample_inpaint(model, &x, &m, &tokens, &cfg.sampler, opts)?;
        out_slice(out, len, o.image.data().len())?.copy_from_slice(o.image.data());
        Ok(())
    })
}

/// Inpaint as [`decoy_inpaint`] and report where the cross-attention of the
/// inpaint region went, averaged over steps and all layers.
///
/// # Safety
/// As for [`decoy_inpaint`]; `masses` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn decoy_attention_masses(
    model: *const DecoyModel,
    image: *const f32,
    mask: *const f32,
    prompt: *const c_char,
    sampler_json: *const c_char,
    masses: *mut DecoyMasses,
) -> DecoyStatus {
    guard(|| {
        let model = model_arg(model)?;
        let x = image_arg(image)?;
        let m = mask_arg(mask)?;
        let prompt = str_arg(prompt, "prompt")?;
        if masses.is_null() {
            return Err(null("masses"));
        }
        let cfg = config_arg("sampler", sampler_json)?;
        let r = measure(model, &x, &m, prompt, &cfg.sampler, None)?;
        *masses = DecoyMasses {
            content: r.masses.content,
            bos: r.masses.bos,
            eos: r.masses.eos,
        };
        Ok(())
    })
}
