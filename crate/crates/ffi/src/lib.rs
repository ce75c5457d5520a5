//! C ABI over the restoration pipeline.
//!
//! Images cross the boundary as planar `float` buffers in channel, row,
//! column order with values in `[-1, 1]`. Every fallible call returns an
//! [`OmgsrStatus`]; on failure a message is available from
//! [`omgsr_last_error`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use omgsr::checkpoint::CheckpointBundle;
use omgsr::chunking::{plan_chunks, ChunkLayout};
use omgsr::error::Error;
use omgsr::infer;
use omgsr::metrics::{self, IMAGE_PEAK, SSIM_WINDOW};
use omgsr::tensor::Tensor;

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OmgsrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Shape = 5,
    Runtime = 6,
    Panic = 7,
}

/// A loaded checkpoint bundle.
pub struct OmgsrModel {
    bundle: CheckpointBundle,
}

/// A planned chunk layout.
pub struct OmgsrChunkPlan {
    layout: ChunkLayout,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(OmgsrStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } | Error::Image(_) => OmgsrStatus::Io,
            Error::Checkpoint(_) | Error::Json(_) | Error::Toml(_) => OmgsrStatus::Checkpoint,
            Error::ShapeMismatch { .. } | Error::InvalidShape { .. } => OmgsrStatus::Shape,
            Error::Config(_)
            | Error::Layout(_)
            | Error::StepOutOfRange { .. }
            | Error::Empty(_) => OmgsrStatus::InvalidArgument,
            _ => OmgsrStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(OmgsrStatus::InvalidArgument, msg.into())
}

fn null(what: &str) -> Failure {
    Failure(OmgsrStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> OmgsrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OmgsrStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            OmgsrStatus::Panic
        }
    }
}

unsafe fn image_in(
    data: *const f32,
    channels: usize,
    height: usize,
    width: usize,
) -> Result<Tensor, Failure> {
    if data.is_null() {
        return Err(null("image"));
    }
    let n = channels
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .filter(|&n| n > 0)
        .ok_or_else(|| invalid("image dimensions must be positive"))?;
    let src = std::slice::from_raw_parts(data, n);
    Ok(Tensor::from_vec(
        &[channels, height, width],
        src.iter().map(|&v| v as f64).collect(),
    )?)
}

unsafe fn image_out(img: &Tensor, out: *mut f32, out_len: usize) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output buffer"));
    }
    if out_len != img.len() {
        return Err(Failure(
            OmgsrStatus::Shape,
            format!(
                "output buffer holds {out_len} values, result needs {}",
                img.len()
            ),
        ));
    }
    let dst = std::slice::from_raw_parts_mut(out, out_len);
    for (d, &s) in dst.iter_mut().zip(img.data()) {
        *d = s as f32;
    }
    Ok(())
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn omgsr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Load a checkpoint directory. On success `*out` owns a model that must be
/// released with [`omgsr_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn omgsr_model_load(
    path: *const c_char,
    out: *mut *mut OmgsrModel,
) -> OmgsrStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not UTF-8"))?;
        let bundle = CheckpointBundle::load(Path::new(path))?;
        if bundle.t_star.is_none() {
            return Err(Failure(
                OmgsrStatus::Checkpoint,
                "checkpoint has no selected t*".into(),
            ));
        }
        *out = Box::into_raw(Box::new(OmgsrModel { bundle }));
        Ok(())
    })
}

/// Release a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`omgsr_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn omgsr_model_free(model: *mut OmgsrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// LQ to HQ upscale factor of a model, or 0 for a null model.
///
/// # Safety
/// `model` must be null or a live model.
#[no_mangle]
pub unsafe extern "C" fn omgsr_model_scale(model: *const OmgsrModel) -> usize {
    model
        .as_ref()
        .map_or(0, |m| m.bundle.config.degradation.downscale_factor)
}

/// One-pass restoration. `out_len` must equal
/// `channels * height * scale * width * scale`.
///
/// # Safety
/// `lq` must hold `channels * height * width` floats and `out` `out_len`.
#[no_mangle]
pub unsafe extern "C" fn omgsr_restore(
    model: *const OmgsrModel,
    lq: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    out: *mut f32,
    out_len: usize,
) -> OmgsrStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let x = image_in(lq, channels, height, width)?;
        let y = infer::restore(&m.bundle, &x)?;
        image_out(&y, out, out_len)
    })
}

/// Two-stage tiled restoration with feathered blending. `out_len` must equal
/// `channels * (height * scale * stage2) * (width * scale * stage2)` where
/// `stage2` is the model's configured stage-2 factor.
///
/// # Safety
/// As [`omgsr_restore`].
#[no_mangle]
pub unsafe extern "C" fn omgsr_tiled_restore(
    model: *const OmgsrModel,
    lq: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    tile: usize,
    min_overlap: usize,
    out: *mut f32,
    out_len: usize,
) -> OmgsrStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let x = image_in(lq, channels, height, width)?;
        let y = infer::tiled_restore(&m.bundle, &x, tile, min_overlap)?;
        image_out(&y, out, out_len)
    })
}

/// PSNR of two same-shaped images with peak-to-peak range 2.
///
/// # Safety
/// `a` and `b` must each hold `channels * height * width` floats.
#[no_mangle]
pub unsafe extern "C" fn omgsr_psnr(
    a: *const f32,
    b: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    out: *mut f64,
) -> OmgsrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let a = image_in(a, channels, height, width)?;
        let b = image_in(b, channels, height, width)?;
        *out = metrics::psnr(&a, &b, IMAGE_PEAK)?;
        Ok(())
    })
}

/// Mean SSIM over 7x7 windows with peak-to-peak range 2.
///
/// # Safety
/// As [`omgsr_psnr`].
#[no_mangle]
pub unsafe extern "C" fn omgsr_ssim(
    a: *const f32,
    b: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    out: *mut f64,
) -> OmgsrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let a = image_in(a, channels, height, width)?;
        let b = image_in(b, channels, height, width)?;
        *out = metrics::ssim(&a, &b, SSIM_WINDOW, IMAGE_PEAK)?;
        Ok(())
    })
}

/// Plan overlapping square chunks over a `height` x `width` image.
///
/// # Safety
/// `out` must be a valid pointer; the plan is released with
/// [`omgsr_chunk_plan_free`].
#[no_mangle]
pub unsafe extern "C" fn omgsr_plan_chunks(
    height: usize,
    width: usize,
    patch: usize,
    min_overlap: usize,
    out: *mut *mut OmgsrChunkPlan,
) -> OmgsrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let layout = plan_chunks((height, width), patch, min_overlap)?;
        *out = Box::into_raw(Box::new(OmgsrChunkPlan { layout }));
        Ok(())
    })
}

/// Number of chunks, or 0 for a null plan.
///
/// # Safety
/// `plan` must be null or a live plan.
#[no_mangle]
pub unsafe extern "C" fn omgsr_chunk_plan_count(plan: *const OmgsrChunkPlan) -> usize {
    plan.as_ref().map_or(0, |p| p.layout.num_patches())
}

/// Top-left corner of chunk `index` in row-major order.
///
/// # Safety
/// `plan` must be a live plan; `y` and `x` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn omgsr_chunk_plan_origin(
    plan: *const OmgsrChunkPlan,
    index: usize,
    y: *mut usize,
    x: *mut usize,
) -> OmgsrStatus {
    guard(|| {
        let p = plan.as_ref().ok_or_else(|| null("plan"))?;
        if y.is_null() || x.is_null() {
            return Err(null("origin output"));
        }
        let (oy, ox) = p
            .layout
            .origins()
            .nth(index)
            .ok_or_else(|| invalid(format!("chunk {index} out of range")))?;
        *y = oy;
        *x = ox;
        Ok(())
    })
}

/// Release a plan. Null is ignored.
///
/// # Safety
/// `plan` must come from [`omgsr_plan_chunks`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn omgsr_chunk_plan_free(plan: *mut OmgsrChunkPlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        unsafe { CStr::from_ptr(omgsr_last_error()) }
            .to_string_lossy()
            .into_owned()
    }

    #[test]
    fn chunk_plan_round_trip() {
        let mut plan = ptr::null_mut();
        assert_eq!(
            unsafe { omgsr_plan_chunks(512, 512, 224, 32, &mut plan) },
            OmgsrStatus::Ok
        );
        assert_eq!(unsafe { omgsr_chunk_plan_count(plan) }, 9);
        let (mut y, mut x) = (0, 0);
        assert_eq!(
            unsafe { omgsr_chunk_plan_origin(plan, 8, &mut y, &mut x) },
            OmgsrStatus::Ok
        );
        assert_eq!((y, x), (288, 288));
        assert_eq!(
            unsafe { omgsr_chunk_plan_origin(plan, 9, &mut y, &mut x) },
            OmgsrStatus::InvalidArgument
        );
        unsafe { omgsr_chunk_plan_free(plan) };
    }

    #[test]
    fn errors_are_reported() {
        let mut plan = ptr::null_mut();
        assert_eq!(
            unsafe { omgsr_plan_chunks(100, 100, 224, 0, &mut plan) },
            OmgsrStatus::InvalidArgument
        );
        assert!(last_error().contains("larger than image"));
        assert!(plan.is_null());

        let mut model = ptr::null_mut();
        let missing = CString::new("/nonexistent/bundle").unwrap();
        assert_eq!(
            unsafe { omgsr_model_load(missing.as_ptr(), &mut model) },
            OmgsrStatus::Io
        );
        assert_eq!(
            unsafe { omgsr_model_load(ptr::null(), &mut model) },
            OmgsrStatus::NullPointer
        );
        assert_eq!(unsafe { omgsr_model_scale(ptr::null()) }, 0);
        let mut v = 0.0;
        let a = [0.0f32; 4];
        assert_eq!(
            unsafe { omgsr_restore(ptr::null(), a.as_ptr(), 1, 2, 2, ptr::null_mut(), 0) },
            OmgsrStatus::NullPointer
        );
        assert_eq!(
            unsafe { omgsr_psnr(a.as_ptr(), a.as_ptr(), 0, 2, 2, &mut v) },
            OmgsrStatus::InvalidArgument
        );
    }

    #[test]
    fn metrics_match_core() {
        let a: Vec<f32> = (0..3 * 8 * 8)
            .map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0)
            .collect();
        let b: Vec<f32> = a.iter().map(|v| v * 0.9).collect();
        let (mut p, mut s) = (0.0, 0.0);
        assert_eq!(
            unsafe { omgsr_psnr(a.as_ptr(), b.as_ptr(), 3, 8, 8, &mut p) },
            OmgsrStatus::Ok
        );
        assert_eq!(
            unsafe { omgsr_ssim(a.as_ptr(), b.as_ptr(), 3, 8, 8, &mut s) },
            OmgsrStatus::Ok
        );
        let ta = Tensor::from_vec(&[3, 8, 8], a.iter().map(|&v| v as f64).collect()).unwrap();
        let tb = Tensor::from_vec(&[3, 8, 8], b.iter().map(|&v| v as f64).collect()).unwrap();
        assert_eq!(p, metrics::psnr(&ta, &tb, IMAGE_PEAK).unwrap());
        assert_eq!(s, metrics::ssim(&ta, &tb, SSIM_WINDOW, IMAGE_PEAK).unwrap());
    }
}
