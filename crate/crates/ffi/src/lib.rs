//! C ABI over the bleedscope detector.
//!
//! Every fallible function returns a [`BsStatus`]; on failure a message is
//! available from [`bs_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function. Images are passed as
//! planar RGB `f64` buffers of length `3 * width * height` with values in
//! `[0, 1]` (all red values, then green, then blue).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use bleedscope::category::{Category, FrameLabel};
use bleedscope::data::AnnotationRecord;
use bleedscope::error::Error;
use bleedscope::geometry::{giou, iou, BoxXyxy};
use bleedscope::model::{classify_frame, Detector, ModelConfig};
use bleedscope::train::{
    eval_input, load_checkpoint, normalized_to_pixels, parse_config, save_checkpoint, OptimizerState, Sample,
    TrainConfig,
};
use bleedscope::Tensor;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Data = 4,
    Checkpoint = 5,
    Config = 6,
    Runtime = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Frame label: 1 for bleeding, 0 for non-bleeding.
pub const BS_FRAME_BLEEDING: i32 = 1;
pub const BS_FRAME_NON_BLEEDING: i32 = 0;
/// Region categories.
pub const BS_CATEGORY_BLEED: i32 = 0;
pub const BS_CATEGORY_NON_BLEED: i32 = 1;

/// A detected region in pixel coordinates of the input image.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BsRegion {
    pub category: i32,
    pub probability: f64,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

/// Opaque detector handle.
pub struct BsDetector {
    model: Detector,
    state: OptimizerState,
    config: TrainConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("interior NULs removed"));
}

fn status_of(e: &Error) -> BsStatus {
    match e {
        Error::Io { .. } => BsStatus::Io,
        Error::Data(_) => BsStatus::Data,
        Error::Checkpoint(_) => BsStatus::Checkpoint,
        Error::Config(_) => BsStatus::Config,
        Error::Geometry(_) => BsStatus::InvalidArgument,
        _ => BsStatus::Runtime,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (BsStatus, String)>) -> BsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            BsStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            BsStatus::Panic
        }
    }
}

fn lib<T>(r: Result<T, Error>) -> Result<T, (BsStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (BsStatus, String) {
    (BsStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (BsStatus, String) {
    (BsStatus::InvalidArgument, msg.into())
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (BsStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn bs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a randomly initialized detector with the default configuration.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn bs_detector_new(seed: u64, out: *mut *mut BsDetector) -> BsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = lib(Detector::new(ModelConfig::default(), seed).map_err(Error::from))?;
        let state = OptimizerState::new(model.params());
        *out = Box::into_raw(Box::new(BsDetector {
            model,
            state,
            config: TrainConfig::default(),
        }));
        Ok(())
    })
}

/// Loads a checkpoint. `config_path` may be null; otherwise it names a
/// training config whose preprocessing and threshold are used.
///
/// # Safety
/// `path` (and `config_path` if non-null) must be NUL-terminated strings;
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn bs_detector_load(
    path: *const c_char,
    config_path: *const c_char,
    out: *mut *mut BsDetector,
) -> BsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path, "path")?;
        let config = if config_path.is_null() {
            TrainConfig::default()
        } else {
            let p = path_arg(config_path, "config_path")?;
            let text = std::fs::read_to_string(&p).map_err(|e| (BsStatus::Io, format!("{}: {e}", p.display())))?;
            lib(parse_config(&text).map_err(Error::from))?.0
        };
        let (model, state) = lib(load_checkpoint(&path))?;
        *out = Box::into_raw(Box::new(BsDetector { model, state, config }));
        Ok(())
    })
}

/// Writes the detector (weights and optimizer state) to `path`.
///
/// # Safety
/// `det` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bs_detector_save(det: *const BsDetector, path: *const c_char) -> BsStatus {
    guard(|| {
        let det = det.as_ref().ok_or_else(|| null("det"))?;
        let path = path_arg(path, "path")?;
        lib(save_checkpoint(&path, &det.model, &det.state))
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `det` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bs_detector_free(det: *mut BsDetector) {
    if !det.is_null() {
        drop(Box::from_raw(det));
    }
}

/// Side length of the square model input; 0 for a null handle.
///
/// # Safety
/// `det` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bs_detector_input_size(det: *const BsDetector) -> usize {
    det.as_ref().map_or(0, |d| d.model.config().input_size)
}

/// Sets the frame decision threshold (strictly between 0 and 1).
///
/// # Safety
/// `det` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn bs_detector_set_threshold(det: *mut BsDetector, threshold: f64) -> BsStatus {
    guard(|| {
        let det = det.as_mut().ok_or_else(|| null("det"))?;
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(invalid(format!("threshold {threshold} outside (0, 1)")));
        }
        det.config.threshold = threshold;
        Ok(())
    })
}

/// Classifies one frame. Writes the frame label to `label_out` and up to
/// `capacity` regions (bleed and non-bleed, in query order) to `regions`;
/// `count_out` receives the total number of regions. If that exceeds
/// `capacity` the call returns `BS_STATUS_BUFFER_TOO_SMALL` after filling the
/// buffer, so callers can retry with a larger one. `regions` may be null when
/// `capacity` is 0.
///
/// # Safety
/// `pixels` must point to `3 * width * height` doubles; `regions` to
/// `capacity` writable entries; `label_out` and `count_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bs_detector_detect(
    det: *const BsDetector,
    pixels: *const f64,
    width: usize,
    height: usize,
    regions: *mut BsRegion,
    capacity: usize,
    count_out: *mut usize,
    label_out: *mut i32,
) -> BsStatus {
    let mut overflow = false;
    let status = guard(|| {
        let det = det.as_ref().ok_or_else(|| null("det"))?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        if count_out.is_null() || label_out.is_null() {
            return Err(null("output pointer"));
        }
        if regions.is_null() && capacity > 0 {
            return Err(null("regions"));
        }
        if width == 0 || height == 0 {
            return Err(invalid("image must be non-empty"));
        }
        let n = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(3))
            .ok_or_else(|| invalid("image too large"))?;
        let data = std::slice::from_raw_parts(pixels, n).to_vec();
        let image = Tensor::new(&[3, height, width], data).map_err(|e| invalid(e.to_string()))?;
        let record = lib(AnnotationRecord::from_regions("ffi", "", vec![], (width, height)).map_err(Error::from))?;
        let sample = lib(Sample::new(image, record, det.model.config().input_size))?;
        let input = lib(eval_input(&sample, &det.config))?;
        let preds = lib(det.model.predict(&input).map_err(Error::from))?;
        let decision = classify_frame(&preds, det.config.threshold);
        *label_out = match decision.frame_label {
            FrameLabel::Bleeding => BS_FRAME_BLEEDING,
            FrameLabel::NonBleeding => BS_FRAME_NON_BLEEDING,
        };
        let found: Vec<BsRegion> = decision
            .regions
            .iter()
            .filter_map(|r| {
                let b = r.bbox;
                normalized_to_pixels([b.cx, b.cy, b.w, b.h], width as f64, height as f64).map(|p| BsRegion {
                    category: if r.category == Category::Bleed {
                        BS_CATEGORY_BLEED
                    } else {
                        BS_CATEGORY_NON_BLEED
                    },
                    probability: r.probability,
                    x_min: p.x_min,
                    y_min: p.y_min,
                    x_max: p.x_max,
                    y_max: p.y_max,
                })
            })
            .collect();
        *count_out = found.len();
        for (i, r) in found.iter().take(capacity).enumerate() {
            *regions.add(i) = *r;
        }
        overflow = found.len() > capacity;
        Ok(())
    });
    if status == BsStatus::Ok && overflow {
        set_error("region buffer too small");
        return BsStatus::BufferTooSmall;
    }
    status
}

unsafe fn read_box(b: *const f64) -> Result<BoxXyxy, (BsStatus, String)> {
    if b.is_null() {
        return Err(null("box"));
    }
    let v = std::slice::from_raw_parts(b, 4);
    BoxXyxy::pixels(v[0], v[1], v[2], v[3]).map_err(|e| invalid(e.to_string()))
}

/// IoU of two `(x_min, y_min, x_max, y_max)` boxes.
///
/// # Safety
/// `a` and `b` must point to 4 doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bs_box_iou(a: *const f64, b: *const f64, out: *mut f64) -> BsStatus {
    guard(|| {
        let (a, b) = (read_box(a)?, read_box(b)?);
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = iou(&a, &b).map_err(|e| invalid(e.to_string()))?;
        Ok(())
    })
}

/// Generalized IoU of two `(x_min, y_min, x_max, y_max)` boxes.
///
/// # Safety
/// `a` and `b` must point to 4 doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bs_box_giou(a: *const f64, b: *const f64, out: *mut f64) -> BsStatus {
    guard(|| {
        let (a, b) = (read_box(a)?, read_box(b)?);
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = giou(&a, &b).map_err(|e| invalid(e.to_string()))?;
        Ok(())
    })
}
