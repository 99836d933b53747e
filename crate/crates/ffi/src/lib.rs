//! C interface: opaque recognizer handles, rectification and geometry
//! helpers. Every function returns a [`PmStatus`]; on failure the message is
//! available from [`pm_last_error`] on the same thread.
//!
//! Images cross the boundary as row-major `f32` intensities in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use portmanteau_core::davit::{closed_form_macs, AttentionMode, AttentionShape};
use portmanteau_core::geometry::{legendre_to_monomial, monomial_to_legendre, rectify_with_boxes, LegendreCoeffs, PolyCurve, QuadBoxSet};
use portmanteau_core::image::GrayImage;
use portmanteau_core::model::{
    model_input, params_dir, read_model_config, recognize_batch, stored_dtype, ModelConfig, Rectifier, Variant,
};
use portmanteau_core::stn::Localizer;
use portmanteau_core::tensor::ParamStore;
use portmanteau_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Contract = 6,
    Geometry = 7,
    Config = 8,
    NonFinite = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

/// Attention layouts accepted by [`pm_closed_form_macs`].
pub const PM_ATTENTION_VIT: u32 = 0;
pub const PM_ATTENTION_AXIAL: u32 = 1;
pub const PM_ATTENTION_DAVIT: u32 = 2;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(PmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape { .. } => PmStatus::Shape,
            Error::Contract(_) => PmStatus::Contract,
            Error::NonFinite(_) => PmStatus::NonFinite,
            Error::Geometry(_) => PmStatus::Geometry,
            Error::Config(_) => PmStatus::Config,
            Error::Format(_) | Error::Json(_) => PmStatus::Format,
            Error::Io(_) => PmStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PmStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PmStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(PmStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(PmStatus::InvalidArgument, msg.into())
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("`{what}` is not UTF-8")))
}

unsafe fn image_arg(pixels: *const f32, height: usize, width: usize) -> Result<GrayImage, Failure> {
    if pixels.is_null() {
        return Err(null("pixels"));
    }
    let n = height.checked_mul(width).ok_or_else(|| invalid("image size overflows"))?;
    Ok(GrayImage::new(height, width, std::slice::from_raw_parts(pixels, n).to_vec())?)
}

unsafe fn boxes_arg(json: *const c_char) -> Result<Option<QuadBoxSet>, Failure> {
    if json.is_null() {
        return Ok(None);
    }
    let text = c_str(json, "boxes_json")?;
    let boxes: QuadBoxSet = serde_json::from_str(text).map_err(|e| Failure(PmStatus::Format, e.to_string()))?;
    Ok(Some(boxes))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn pm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn pm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

enum Params {
    F32(ParamStore<f32>),
    F64(ParamStore<f64>),
}

/// A loaded recognizer.
pub struct PmRecognizer {
    cfg: ModelConfig,
    params: Params,
    localizer: Option<Localizer<f32>>,
}

impl PmRecognizer {
    fn load(dir: &Path, variant: Option<Variant>) -> Result<Self, Failure> {
        let cfg = match (read_model_config(dir)?, variant) {
            (Some(c), Some(v)) if c.variant != v => {
                return Err(invalid(format!("weights are a {} model, not {v}", c.variant)));
            }
            (Some(c), _) => c,
            (None, v) => ModelConfig::toy(v.unwrap_or(Variant::Port)),
        };
        let pdir = params_dir(dir);
        let params = match stored_dtype(&pdir)?.as_str() {
            "f64" => Params::F64(ParamStore::load_dir(&pdir)?),
            _ => Params::F32(ParamStore::load_dir(&pdir)?),
        };
        let stn = dir.join("stn");
        let localizer = if stn.is_dir() && cfg.variant.needs_rectified() {
            Some(Localizer::load_dir(&stn)?)
        } else {
            None
        };
        Ok(Self { cfg, params, localizer })
    }

    fn recognize(&self, img: &GrayImage, boxes: Option<&QuadBoxSet>) -> Result<String, Failure> {
        let rect = match (boxes, &self.localizer) {
            (Some(b), _) => Rectifier::Boxes(b),
            (None, Some(l)) => Rectifier::Localizer(l),
            (None, None) => Rectifier::Resize,
        };
        let decoded = match &self.params {
            Params::F32(p) => {
                let x = model_input::<f32>(&self.cfg, img, &rect)?;
                let x = x.clone().reshape(&[[1].as_slice(), x.shape()].concat())?;
                recognize_batch(p, &self.cfg, &x)?
            }
            Params::F64(p) => {
                let x = model_input::<f64>(&self.cfg, img, &rect)?;
                let x = x.clone().reshape(&[[1].as_slice(), x.shape()].concat())?;
                recognize_batch(p, &self.cfg, &x)?
            }
        };
        Ok(decoded.into_iter().next().map(|d| d.text).unwrap_or_default())
    }
}

/// Loads a weights directory written by `train-toy`. `variant` may be null
/// (use the recorded model) or one of `port`, `stn`, `plain`, `savit`.
///
/// # Safety
/// `dir` and a non-null `variant` must be NUL-terminated strings; `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn pm_recognizer_load(dir: *const c_char, variant: *const c_char, out: *mut *mut PmRecognizer) -> PmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let dir = c_str(dir, "dir")?;
        let variant = if variant.is_null() {
            None
        } else {
            Some(c_str(variant, "variant")?.parse::<Variant>()?)
        };
        *out = Box::into_raw(Box::new(PmRecognizer::load(Path::new(dir), variant)?));
        Ok(())
    })
}

/// Transcribes one image. `boxes_json` (nullable) holds character boxes in
/// the JSON layout written by `gen-data`. On success `*out_text` receives a
/// string to release with [`pm_string_free`].
///
/// # Safety
/// `rec` must be a live handle, `pixels` must hold `height * width` values,
/// `out_text` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pm_recognizer_recognize(
    rec: *const PmRecognizer,
    pixels: *const f32,
    height: usize,
    width: usize,
    boxes_json: *const c_char,
    out_text: *mut *mut c_char,
) -> PmStatus {
    guard(|| {
        if out_text.is_null() {
            return Err(null("out_text"));
        }
        *out_text = ptr::null_mut();
        let rec = rec.as_ref().ok_or_else(|| null("rec"))?;
        let img = image_arg(pixels, height, width)?;
        let boxes = boxes_arg(boxes_json)?;
        let text = rec.recognize(&img, boxes.as_ref())?;
        *out_text = CString::new(text).map_err(|_| invalid("transcription contains NUL"))?.into_raw();
        Ok(())
    })
}

/// Variant name of a loaded recognizer as a static string, or null.
///
/// # Safety
/// `rec` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn pm_recognizer_variant(rec: *const PmRecognizer) -> *const c_char {
    match rec.as_ref().map(|r| r.cfg.variant) {
        Some(Variant::Port) => c"port".as_ptr(),
        Some(Variant::Stn) => c"stn".as_ptr(),
        Some(Variant::Plain) => c"plain".as_ptr(),
        Some(Variant::Savit) => c"savit".as_ptr(),
        None => ptr::null(),
    }
}

/// # Safety
/// `rec` must come from [`pm_recognizer_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn pm_recognizer_free(rec: *mut PmRecognizer) {
    if !rec.is_null() {
        drop(Box::from_raw(rec));
    }
}

/// Rectifies an image with ground-truth character boxes into
/// `out_height × out_width` pixels written to `out` (capacity `out_len`).
///
/// # Safety
/// `pixels` must hold `height * width` values, `boxes_json` must be a
/// NUL-terminated string and `out` must hold `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn pm_rectify_with_boxes(
    pixels: *const f32,
    height: usize,
    width: usize,
    boxes_json: *const c_char,
    out_height: usize,
    out_width: usize,
    out: *mut f32,
    out_len: usize,
) -> PmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let needed = out_height.checked_mul(out_width).ok_or_else(|| invalid("output size overflows"))?;
        if out_len < needed {
            return Err(Failure(PmStatus::BufferTooSmall, format!("output needs {needed} values, got {out_len}")));
        }
        let img = image_arg(pixels, height, width)?;
        let boxes = boxes_arg(boxes_json)?.ok_or_else(|| null("boxes_json"))?;
        let rect = rectify_with_boxes(&img, &boxes, out_height, out_width)?;
        std::slice::from_raw_parts_mut(out, needed).copy_from_slice(rect.data());
        Ok(())
    })
}

/// Converts 5 monomial coefficients (constant first) to Legendre coefficients.
///
/// # Safety
/// `monomial` and `out` must each point to 5 values.
#[no_mangle]
pub unsafe extern "C" fn pm_monomial_to_legendre(monomial: *const f64, out: *mut f64) -> PmStatus {
    guard(|| {
        let c = PolyCurve::new(read5(monomial, "monomial")?);
        write5(out, monomial_to_legendre(&c).psi)
    })
}

/// Inverse of [`pm_monomial_to_legendre`].
///
/// # Safety
/// `legendre` and `out` must each point to 5 values.
#[no_mangle]
pub unsafe extern "C" fn pm_legendre_to_monomial(legendre: *const f64, out: *mut f64) -> PmStatus {
    guard(|| {
        let l = LegendreCoeffs {
            psi: read5(legendre, "legendre")?,
        };
        write5(out, legendre_to_monomial(&l).coeffs)
    })
}

unsafe fn read5(p: *const f64, what: &str) -> Result<[f64; 5], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(ptr::read_unaligned(p.cast::<[f64; 5]>()))
}

unsafe fn write5(p: *mut f64, v: [f64; 5]) -> Result<(), Failure> {
    if p.is_null() {
        return Err(null("out"));
    }
    ptr::write_unaligned(p.cast::<[f64; 5]>(), v);
    Ok(())
}

/// Closed-form per-product attention score MACs.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pm_closed_form_macs(
    mode: u32,
    n_x: usize,
    n_y: usize,
    d_x: usize,
    l_y: usize,
    out: *mut u64,
) -> PmStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let shape = AttentionShape { n_x, n_y, d_x, l_y };
        shape.validate()?;
        let mode = match mode {
            PM_ATTENTION_VIT => AttentionMode::Vit,
            PM_ATTENTION_AXIAL => AttentionMode::Axial,
            PM_ATTENTION_DAVIT => AttentionMode::Davit,
            m => return Err(invalid(format!("unknown attention mode {m}"))),
        };
        *out = closed_form_macs(&shape, mode);
        Ok(())
    })
}
