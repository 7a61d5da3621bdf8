//! C interface to the codec.
//!
//! Every function returns a [`ClicStatus`]; on failure a description is
//! available from [`clic_last_error`] on the same thread. Objects handed
//! out through `out` pointers are owned by the caller and released with the
//! matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use clic_core::codec::{self, EncodeOptions, RgbImage, Weights};
use clic_core::pqf::{solve_coefficients, Ridge};
use clic_core::transform::ArchConfig;
use clic_core::ClicError;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClicStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    CorruptStream = 4,
    Internal = 5,
}

/// Architecture selector for [`clic_model_new_random`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClicArch {
    Default = 0,
    Toy = 1,
}

/// Loaded network weights.
pub struct ClicModel {
    weights: Weights,
}

/// Owned byte buffer, used for compressed streams.
pub struct ClicBuffer {
    data: Vec<u8>,
}

/// Owned interleaved 8-bit RGB image.
pub struct ClicImage {
    image: RgbImage,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &ClicError) -> ClicStatus {
    match e {
        ClicError::Io(_) | ClicError::Image(_) | ClicError::Weights(_) => ClicStatus::Io,
        ClicError::Decode(_) => ClicStatus::CorruptStream,
        ClicError::InvalidArgument(_) | ClicError::Shape { .. } => ClicStatus::InvalidArgument,
        _ => ClicStatus::Internal,
    }
}

struct Fail(ClicStatus, String);

impl From<ClicError> for Fail {
    fn from(e: ClicError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(ClicStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ClicStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            ClicStatus::Ok
        }
        Ok(Err(Fail(s, msg))) => {
            set_error(&msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            ClicStatus::Internal
        }
    }
}

unsafe fn out_ptr<'a, T>(p: *mut *mut T, what: &str) -> Result<&'a mut *mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn clic_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or an empty string.
/// Valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn clic_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a weights file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn clic_model_load(
    path: *const c_char,
    out: *mut *mut ClicModel,
) -> ClicStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(ClicStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let weights = Weights::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(ClicModel { weights }));
        Ok(())
    })
}

/// Creates a model with seeded random weights; `arch` is a [`ClicArch`] value.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn clic_model_new_random(
    arch: u32,
    seed: u64,
    out: *mut *mut ClicModel,
) -> ClicStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let cfg = match arch {
            a if a == ClicArch::Default as u32 => ArchConfig::default(),
            a if a == ClicArch::Toy as u32 => ArchConfig::toy(),
            a => {
                return Err(Fail(
                    ClicStatus::InvalidArgument,
                    format!("unknown architecture {a}"),
                ))
            }
        };
        let weights = Weights::random(cfg, seed)?;
        *out = Box::into_raw(Box::new(ClicModel { weights }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn clic_model_free(model: *mut ClicModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Compresses `height` rows of `width` RGB pixels; rows are `stride` bytes
/// apart (`stride >= 3 * width`). `quality` is 1..=6, `pqf` toggles the
/// latent filter.
///
/// # Safety
/// `pixels` must point to `stride * height` readable bytes; `model` and
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn clic_encode_rgb8(
    model: *const ClicModel,
    pixels: *const u8,
    width: usize,
    height: usize,
    stride: usize,
    quality: u8,
    pqf: bool,
    out: *mut *mut ClicBuffer,
) -> ClicStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        let row = width
            .checked_mul(3)
            .ok_or_else(|| Fail(ClicStatus::InvalidArgument, "width too large".into()))?;
        if stride < row {
            return Err(Fail(
                ClicStatus::InvalidArgument,
                format!("stride {stride} < {row}"),
            ));
        }
        let mut data = Vec::with_capacity(row * height);
        for y in 0..height {
            data.extend_from_slice(std::slice::from_raw_parts(pixels.add(y * stride), row));
        }
        let img = RgbImage::new(width, height, data)?;
        let opts = EncodeOptions {
            quality,
            pqf,
            raw_coeffs: false,
        };
        let enc = codec::encode(&model.weights, &img, &opts)?;
        *out = Box::into_raw(Box::new(ClicBuffer { data: enc.bytes }));
        Ok(())
    })
}

/// Decompresses a stream produced by [`clic_encode_rgb8`] with the same model.
///
/// # Safety
/// `data` must point to `len` readable bytes; `model` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn clic_decode_rgb8(
    model: *const ClicModel,
    data: *const u8,
    len: usize,
    out: *mut *mut ClicImage,
) -> ClicStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if data.is_null() {
            return Err(null("data"));
        }
        let bytes = std::slice::from_raw_parts(data, len);
        let dec = codec::decode(&model.weights, bytes)?;
        *out = Box::into_raw(Box::new(ClicImage { image: dec.image }));
        Ok(())
    })
}

/// # Safety
/// `buf` must be a live buffer or null.
#[no_mangle]
pub unsafe extern "C" fn clic_buffer_data(buf: *const ClicBuffer) -> *const u8 {
    buf.as_ref().map_or(ptr::null(), |b| b.data.as_ptr())
}

/// # Safety
/// `buf` must be a live buffer or null.
#[no_mangle]
pub unsafe extern "C" fn clic_buffer_len(buf: *const ClicBuffer) -> usize {
    buf.as_ref().map_or(0, |b| b.data.len())
}

/// # Safety
/// `buf` must come from this library and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn clic_buffer_free(buf: *mut ClicBuffer) {
    if !buf.is_null() {
        drop(Box::from_raw(buf));
    }
}

/// # Safety
/// `img` must be a live image or null.
#[no_mangle]
pub unsafe extern "C" fn clic_image_width(img: *const ClicImage) -> usize {
    img.as_ref().map_or(0, |i| i.image.width)
}

/// # Safety
/// `img` must be a live image or null.
#[no_mangle]
pub unsafe extern "C" fn clic_image_height(img: *const ClicImage) -> usize {
    img.as_ref().map_or(0, |i| i.image.height)
}

/// Tightly packed RGB rows, `3 * width * height` bytes.
///
/// # Safety
/// `img` must be a live image or null.
#[no_mangle]
pub unsafe extern "C" fn clic_image_data(img: *const ClicImage) -> *const u8 {
    img.as_ref().map_or(ptr::null(), |i| i.image.data.as_ptr())
}

/// # Safety
/// `img` must come from this library and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn clic_image_free(img: *mut ClicImage) {
    if !img.is_null() {
        drop(Box::from_raw(img));
    }
}

/// Least-squares weights `a` (length `n`) minimising `‖C a − eps‖²`, where
/// `c` holds `n` columns of length `p` back to back. A negative `ridge`
/// selects the automatic regulariser.
///
/// # Safety
/// `c` must hold `p * n` values, `eps` `p` values and `a_out` room for `n`.
#[no_mangle]
pub unsafe extern "C" fn clic_solve_coefficients(
    c: *const f64,
    eps: *const f64,
    p: usize,
    n: usize,
    ridge: f64,
    a_out: *mut f64,
) -> ClicStatus {
    guard(|| {
        if c.is_null() || eps.is_null() || a_out.is_null() {
            return Err(null("c, eps or a_out"));
        }
        let len = p
            .checked_mul(n)
            .ok_or_else(|| Fail(ClicStatus::InvalidArgument, "p * n overflows".into()))?;
        let ridge = if ridge < 0.0 {
            Ridge::Auto
        } else if ridge.is_finite() {
            Ridge::Fixed(ridge)
        } else {
            return Err(Fail(
                ClicStatus::InvalidArgument,
                "ridge is not finite".into(),
            ));
        };
        let c = std::slice::from_raw_parts(c, len);
        let eps = std::slice::from_raw_parts(eps, p);
        let sol = solve_coefficients(c, eps, ridge)?;
        std::slice::from_raw_parts_mut(a_out, n).copy_from_slice(&sol.a);
        Ok(())
    })
}
