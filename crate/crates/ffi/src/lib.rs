//! C ABI over the sandformer library.
//!
//! Images cross the boundary as interleaved RGB `float` buffers of
//! `height * width * 3` values in `[0, 1]`, row-major. Every function
//! returns an [`SfStatus`]; on failure [`sf_last_error`] describes it.
//! Panics are caught at the boundary and reported as `SF_ERR_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use sandformer::dcp::{dehaze_dcp, DcpConfig};
use sandformer::metrics::{psnr, ssim};
use sandformer::synth::{synthesize_sample, DepthMode, Preset, Severity};
use sandformer::train::{load_checkpoint, restore_image};
use sandformer::{Error, ImageBuffer, Model, ModelConfig};

/// Result of every call.
#[repr(C)]
#[allow(non_camel_case_types)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SfStatus {
    SF_OK = 0,
    /// A required pointer was null.
    SF_ERR_NULL = 1,
    /// Bad size, parameter or enum value.
    SF_ERR_INVALID = 2,
    /// File could not be read or written.
    SF_ERR_IO = 3,
    /// Malformed or mismatched checkpoint.
    SF_ERR_FORMAT = 4,
    /// Non-finite values or a failed numeric check.
    SF_ERR_NUMERIC = 5,
    /// Internal panic; the library state is still usable.
    SF_ERR_PANIC = 6,
}

/// Sand severity preset.
#[repr(C)]
#[allow(non_camel_case_types)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SfSeverity {
    SF_DUST = 0,
    SF_SAND = 1,
    SF_SANDSTORM = 2,
}

/// Opaque model handle. Create with `sf_model_load` or `sf_model_new`,
/// release with `sf_model_free`.
pub struct SfModel {
    model: Model<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SfStatus {
    match e {
        Error::Io { .. } | Error::Image { .. } | Error::Data(_) => SfStatus::SF_ERR_IO,
        Error::Format(_)
        | Error::UnsupportedVersion(_)
        | Error::Corrupt { .. }
        | Error::Checksum { .. }
        | Error::ConfigMismatch { .. } => SfStatus::SF_ERR_FORMAT,
        Error::Numeric(_) => SfStatus::SF_ERR_NUMERIC,
        Error::InvalidArgument(_) | Error::Config(_) | Error::State(_) => SfStatus::SF_ERR_INVALID,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SfStatus::SF_OK
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(&format!("null pointer: {what}"));
            SfStatus::SF_ERR_NULL
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            SfStatus::SF_ERR_PANIC
        }
    }
}

fn image_len(height: usize, width: usize) -> Result<usize, Fail> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!("empty image {height}x{width}")).into());
    }
    height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::InvalidArgument("image size overflows".into()).into())
}

/// Copies a caller buffer into an image.
///
/// Safety: `data` must point to `height * width * 3` readable floats.
unsafe fn read_image(data: *const f32, height: usize, width: usize, what: &'static str) -> Result<ImageBuffer, Fail> {
    if data.is_null() {
        return Err(Fail::Null(what));
    }
    let n = image_len(height, width)?;
    let slice = std::slice::from_raw_parts(data, n);
    Ok(ImageBuffer::new(height, width, slice.to_vec())?)
}

unsafe fn write_slice(out: *mut f32, src: &[f32]) {
    ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
}

/// Message for the most recent failed call on this thread, or `""`.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn sf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Synthesizes a sand-degraded image from `clean` with the default ranges of
/// `severity` (an `SfSeverity` value) and the default depth ramp. `out_transmission` may be null;
/// otherwise it receives `height * width` values.
///
/// # Safety
/// `clean` and `out_degraded` must each hold `height * width * 3` floats.
#[no_mangle]
pub unsafe extern "C" fn sf_degrade(
    clean: *const f32,
    height: usize,
    width: usize,
    severity: i32,
    seed: u64,
    out_degraded: *mut f32,
    out_transmission: *mut f32,
) -> SfStatus {
    guard(|| {
        let img = read_image(clean, height, width, "clean")?;
        if out_degraded.is_null() {
            return Err(Fail::Null("out_degraded"));
        }
        let sev = match severity {
            x if x == SfSeverity::SF_DUST as i32 => Severity::Dust,
            x if x == SfSeverity::SF_SAND as i32 => Severity::Sand,
            x if x == SfSeverity::SF_SANDSTORM as i32 => Severity::Sandstorm,
            x => return Err(Error::InvalidArgument(format!("unknown severity {x}")).into()),
        };
        let s = synthesize_sample(&img, sev, &Preset::default_for(sev), &DepthMode::default(), seed)?;
        write_slice(out_degraded, s.degraded.data());
        if !out_transmission.is_null() {
            write_slice(out_transmission, s.transmission.data());
        }
        Ok(())
    })
}

/// PSNR in dB with peak 1; infinite for identical images.
///
/// # Safety
/// `a` and `b` must each hold `height * width * 3` floats.
#[no_mangle]
pub unsafe extern "C" fn sf_psnr(
    a: *const f32,
    b: *const f32,
    height: usize,
    width: usize,
    out_db: *mut f64,
) -> SfStatus {
    guard(|| {
        let (x, y) = (read_image(a, height, width, "a")?, read_image(b, height, width, "b")?);
        if out_db.is_null() {
            return Err(Fail::Null("out_db"));
        }
        *out_db = psnr(&x, &y, 1.0)?;
        Ok(())
    })
}

/// Luminance SSIM (11x11 Gaussian window, sigma 1.5). Both sides must be at least 11.
///
/// # Safety
/// `a` and `b` must each hold `height * width * 3` floats.
#[no_mangle]
pub unsafe extern "C" fn sf_ssim(a: *const f32, b: *const f32, height: usize, width: usize, out: *mut f64) -> SfStatus {
    guard(|| {
        let (x, y) = (read_image(a, height, width, "a")?, read_image(b, height, width, "b")?);
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        *out = ssim(&x, &y)?;
        Ok(())
    })
}

/// Dark-channel-prior dehazing.
///
/// # Safety
/// `image` and `out` must each hold `height * width * 3` floats.
#[no_mangle]
pub unsafe extern "C" fn sf_dehaze_dcp(
    image: *const f32,
    height: usize,
    width: usize,
    patch: usize,
    omega: f32,
    t0: f32,
    airlight_percent: f32,
    out: *mut f32,
) -> SfStatus {
    guard(|| {
        let img = read_image(image, height, width, "image")?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let cfg = DcpConfig {
            patch,
            omega,
            t0,
            airlight_percent,
        };
        write_slice(out, dehaze_dcp(&img, &cfg)?.data());
        Ok(())
    })
}

/// Builds a fresh toy-scale model. At initialization it is the identity map.
///
/// # Safety
/// `out_model` must be a valid pointer to write the handle into.
#[no_mangle]
pub unsafe extern "C" fn sf_model_new(seed: u64, out_model: *mut *mut SfModel) -> SfStatus {
    guard(|| {
        if out_model.is_null() {
            return Err(Fail::Null("out_model"));
        }
        let model = Model::<f32>::build(&ModelConfig::toy(), seed)?;
        *out_model = Box::into_raw(Box::new(SfModel { model }));
        Ok(())
    })
}

/// Loads the model stored in a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out_model` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sf_model_load(path: *const c_char, out_model: *mut *mut SfModel) -> SfStatus {
    guard(|| {
        if path.is_null() {
            return Err(Fail::Null("path"));
        }
        if out_model.is_null() {
            return Err(Fail::Null("out_model"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|e| Error::InvalidArgument(format!("path is not UTF-8: {e}")))?;
        let model = load_checkpoint(p, None)?.model;
        *out_model = Box::into_raw(Box::new(SfModel { model }));
        Ok(())
    })
}

/// Number of scalar parameters in the model.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sf_model_num_parameters(model: *const SfModel, out: *mut usize) -> SfStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        *out = m.model.num_parameters();
        Ok(())
    })
}

/// Restores an image of any size with the model.
///
/// # Safety
/// `model` must be a live handle; `image` and `out` must each hold
/// `height * width * 3` floats.
#[no_mangle]
pub unsafe extern "C" fn sf_model_restore(
    model: *const SfModel,
    image: *const f32,
    height: usize,
    width: usize,
    out: *mut f32,
) -> SfStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let img = read_image(image, height, width, "image")?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        write_slice(out, restore_image(&m.model, &img)?.data());
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sf_model_free(model: *mut SfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
