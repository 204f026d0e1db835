//! C ABI over the `ddep` library.
//!
//! Every function returns a [`DdepStatus`]; on failure the message is
//! available from [`ddep_last_error_message`] on the same thread. Panics
//! never cross the boundary and are reported as `DDEP_STATUS_PANIC`.
//!
//! Images are passed as `n × 3 × h × w` row-major `f32` planes in `[0, 1]`;
//! the model normalizes them with the statistics stored in its checkpoint.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ddep::data::NormStats;
use ddep::eval::{self, ConfusionMatrix};
use ddep::model::{Head, Model};
use ddep::pipelines::Checkpoint;
use ddep::{corruption, Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DdepStatus {
    Ok = 0,
    InvalidArgument = 1,
    InvalidData = 2,
    Io = 3,
    Checkpoint = 4,
    ConfigMismatch = 5,
    NullPointer = 6,
    UndefinedMetric = 7,
    Internal = 8,
    Panic = 9,
}

/// A trained network with its input normalization.
pub struct DdepModel {
    model: Model,
    norm: NormStats,
}

/// Running confusion matrix for mIoU.
pub struct DdepConfusion {
    cm: ConfusionMatrix,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DdepStatus {
    match e {
        Error::InvalidArgument(_) | Error::UnknownKey(_) | Error::BadValue { .. } => DdepStatus::InvalidArgument,
        Error::InvalidData(_) => DdepStatus::InvalidData,
        Error::Io { .. } => DdepStatus::Io,
        Error::Checkpoint { .. } => DdepStatus::Checkpoint,
        Error::ConfigMismatch { .. } => DdepStatus::ConfigMismatch,
        Error::UndefinedMetric(_) => DdepStatus::UndefinedMetric,
        _ => DdepStatus::Internal,
    }
}

enum Failure {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DdepStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DdepStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null"));
            DdepStatus::NullPointer
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            DdepStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &'static str) -> Result<*const T, Failure> {
    if p.is_null() {
        Err(Failure::Null(what))
    } else {
        Ok(p)
    }
}

/// # Safety
/// `p` must be null or valid for `len` reads.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    Ok(std::slice::from_raw_parts(non_null(p, what)?, len))
}

/// # Safety
/// `p` must be null or valid for `len` writes.
unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Message of the last failed call on this thread, or null after a
/// success. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ddep_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// γ such that the scaled corruption matches a simple one with noise `sigma`.
///
/// # Safety
/// `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn ddep_sigma_to_gamma(sigma: f64, out: *mut f64) -> DdepStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = corruption::sigma_to_gamma(sigma)?;
        Ok(())
    })
}

/// Inverse of [`ddep_sigma_to_gamma`].
///
/// # Safety
/// `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn ddep_gamma_to_sigma(gamma: f64, out: *mut f64) -> DdepStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = corruption::gamma_to_sigma(gamma)?;
        Ok(())
    })
}

/// Loads a checkpoint. Release the handle with [`ddep_model_free`].
///
/// # Safety
/// `path` must be a nul-terminated UTF-8 string; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn ddep_model_load(path: *const c_char, out: *mut *mut DdepModel) -> DdepStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let path = CStr::from_ptr(non_null(path, "path")?)
            .to_str()
            .map_err(|_| Error::invalid("path is not valid UTF-8"))?;
        let ck = Checkpoint::load(Path::new(path))?;
        let norm = ck.norm.clone();
        *out = Box::into_raw(Box::new(DdepModel { model: ck.into_model(), norm }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`ddep_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ddep_model_free(model: *mut DdepModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Output channels (classes, or 3 for a denoiser) and the number every
/// input height and width must be a multiple of.
///
/// # Safety
/// `model` must be a live handle; `channels` and `divisor` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ddep_model_info(
    model: *const DdepModel,
    channels: *mut usize,
    divisor: *mut usize,
) -> DdepStatus {
    guard(|| {
        let m = &*non_null(model, "model")?;
        non_null(channels, "channels")?;
        non_null(divisor, "divisor")?;
        *channels = m.model.config.num_classes;
        *divisor = m.model.config.divisor();
        Ok(())
    })
}

/// # Safety
/// `pixels` must be valid for `n * 3 * h * w` reads.
unsafe fn forward(m: &DdepModel, pixels: *const f32, n: usize, h: usize, w: usize) -> Result<Tensor, Failure> {
    let len = n.checked_mul(3 * h * w).ok_or_else(|| Error::invalid("image extents overflow"))?;
    let x = Tensor::new(&[n, 3, h, w], slice(pixels, len, "pixels")?.to_vec())?;
    Ok(m.model.forward(&m.norm.normalize(&x)?)?)
}

/// Raw network output: `n × C × h × w` for segmentation and denoising
/// heads, `n × C` for a classifier. `out_len` must equal that size.
///
/// # Safety
/// `model` must be a live handle, `pixels` valid for `n * 3 * h * w` reads
/// and `out` valid for `out_len` writes.
#[no_mangle]
pub unsafe extern "C" fn ddep_model_infer(
    model: *const DdepModel,
    pixels: *const f32,
    n: usize,
    h: usize,
    w: usize,
    out: *mut f32,
    out_len: usize,
) -> DdepStatus {
    guard(|| {
        let m = &*non_null(model, "model")?;
        let y = forward(m, pixels, n, h, w)?;
        if y.numel() != out_len {
            return Err(Error::invalid(format!("output holds {} values, buffer has {out_len}", y.numel())).into());
        }
        slice_mut(out, out_len, "out")?.copy_from_slice(y.data());
        Ok(())
    })
}

/// Per-pixel class ids (`n × h × w`) from a segmentation checkpoint.
///
/// # Safety
/// As [`ddep_model_infer`], with `mask` valid for `n * h * w` writes.
#[no_mangle]
pub unsafe extern "C" fn ddep_model_predict_mask(
    model: *const DdepModel,
    pixels: *const f32,
    n: usize,
    h: usize,
    w: usize,
    mask: *mut u8,
) -> DdepStatus {
    guard(|| {
        let m = &*non_null(model, "model")?;
        if m.model.config.head != Head::Segmenter {
            return Err(Error::invalid(format!("a {} checkpoint does not predict masks", m.model.config.head)).into());
        }
        let ids = forward(m, pixels, n, h, w)?.argmax_channels()?;
        slice_mut(mask, ids.len(), "mask")?.copy_from_slice(&ids);
        Ok(())
    })
}

/// # Safety
/// `out` must be valid for a write. Release with [`ddep_confusion_free`].
#[no_mangle]
pub unsafe extern "C" fn ddep_confusion_new(num_classes: usize, out: *mut *mut DdepConfusion) -> DdepStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        *out = Box::into_raw(Box::new(DdepConfusion { cm: ConfusionMatrix::new(num_classes)? }));
        Ok(())
    })
}

/// Adds `len` (prediction, ground truth) pixel pairs; ground truth 255 is
/// ignored. The matrix is unchanged on failure.
///
/// # Safety
/// `cm` must be a live handle; `pred` and `gt` valid for `len` reads.
#[no_mangle]
pub unsafe extern "C" fn ddep_confusion_update(
    cm: *mut DdepConfusion,
    pred: *const u8,
    gt: *const u8,
    len: usize,
) -> DdepStatus {
    guard(|| {
        let c = &mut *(non_null(cm, "cm")? as *mut DdepConfusion);
        c.cm.update(slice(pred, len, "pred")?, slice(gt, len, "gt")?)?;
        Ok(())
    })
}

/// Mean IoU over classes present in prediction or ground truth.
///
/// # Safety
/// `cm` must be a live handle; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn ddep_confusion_miou(cm: *const DdepConfusion, out: *mut f64) -> DdepStatus {
    guard(|| {
        let c = &*non_null(cm, "cm")?;
        non_null(out, "out")?;
        *out = eval::miou(&c.cm)?.miou;
        Ok(())
    })
}

/// # Safety
/// `cm` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ddep_confusion_free(cm: *mut DdepConfusion) {
    if !cm.is_null() {
        drop(Box::from_raw(cm));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn message() -> String {
        let p = ddep_last_error_message();
        assert!(!p.is_null());
        unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
    }

    #[test]
    fn noise_conversion_round_trips() {
        let (mut g, mut s) = (0.0, 0.0);
        unsafe {
            assert_eq!(ddep_sigma_to_gamma(0.22, &mut g), DdepStatus::Ok);
            assert_eq!(ddep_gamma_to_sigma(g, &mut s), DdepStatus::Ok);
        }
        assert!((0.949..=0.959).contains(&g));
        assert!((s - 0.22).abs() < 1e-9);
        assert!(ddep_last_error_message().is_null());
    }

    #[test]
    fn errors_carry_codes_and_messages() {
        let mut g = 0.0;
        unsafe {
            assert_eq!(ddep_sigma_to_gamma(-1.0, &mut g), DdepStatus::InvalidArgument);
            assert!(!message().is_empty());
            assert_eq!(ddep_sigma_to_gamma(0.1, ptr::null_mut()), DdepStatus::NullPointer);
            assert_eq!(message(), "out is null");
        }
    }

    #[test]
    fn confusion_matches_worked_example() {
        let mut cm = ptr::null_mut();
        let mut v = 0.0;
        unsafe {
            assert_eq!(ddep_confusion_new(2, &mut cm), DdepStatus::Ok);
            assert_eq!(ddep_confusion_miou(cm, &mut v), DdepStatus::UndefinedMetric);
            let (pred, gt) = ([0u8, 1, 1, 1], [0u8, 0, 1, 1]);
            assert_eq!(ddep_confusion_update(cm, pred.as_ptr(), gt.as_ptr(), 4), DdepStatus::Ok);
            assert_eq!(ddep_confusion_update(cm, [7u8].as_ptr(), [0u8].as_ptr(), 1), DdepStatus::InvalidData);
            assert_eq!(ddep_confusion_miou(cm, &mut v), DdepStatus::Ok);
            ddep_confusion_free(cm);
        }
        assert!((v - 7.0 / 12.0).abs() < 1e-12);
    }
}
