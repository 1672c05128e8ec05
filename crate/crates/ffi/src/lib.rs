//! C ABI for loading a trained detector and running inference, plus the
//! decoding and adaptation-loss primitives on caller-owned buffers.
//!
//! Every function returns a [`UdadetStatus`]. On failure a description is kept
//! per thread and can be read with [`udadet_last_error`]. Panics never cross the
//! boundary; they are reported as [`UdadetStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use udadet::checkpoint;
use udadet::codec::{decode, DecodeParams, Detection};
use udadet::config::Config;
use udadet::data::{stack_images, Image};
use udadet::losses;
use udadet::model::DetectorParams;
use udadet::tensor::{Tape, Tensor};

/// Result code of every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UdadetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Runtime = 5,
    Panic = 6,
}

/// One detection in input-pixel coordinates.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UdadetDetection {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
    pub class_id: u32,
    pub score: f32,
}

impl From<&Detection> for UdadetDetection {
    fn from(d: &Detection) -> Self {
        Self {
            x1: d.bbox.x1 as f32,
            y1: d.bbox.y1 as f32,
            x2: d.bbox.x2 as f32,
            y2: d.bbox.y2 as f32,
            class_id: d.class_id as u32,
            score: d.score as f32,
        }
    }
}

/// Opaque handle to a loaded detector.
pub struct UdadetDetector {
    params: DetectorParams<f32>,
    decode: DecodeParams,
}

struct Failure(UdadetStatus, String);

type FfiResult = Result<(), Failure>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> FfiResult) -> UdadetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => UdadetStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(&format!("internal panic: {msg}"));
            UdadetStatus::Panic
        }
    }
}

fn fail<E: std::fmt::Display>(status: UdadetStatus) -> impl FnOnce(E) -> Failure {
    move |e| Failure(status, e.to_string())
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(UdadetStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(UdadetStatus::InvalidArgument, msg.into())
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn udadet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn udadet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a model or training checkpoint. Decoding settings come from the
/// configuration stored in the checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn udadet_detector_load(path: *const c_char, out: *mut *mut UdadetDetector) -> UdadetStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        let path = PathBuf::from(CStr::from_ptr(path).to_str().map_err(fail(UdadetStatus::InvalidArgument))?);
        let ckpt = checkpoint::load::<f32>(&path).map_err(|e| {
            let status = match e {
                checkpoint::CheckpointError::Io { .. } => UdadetStatus::Io,
                _ => UdadetStatus::Format,
            };
            Failure(status, format!("{}: {e}", path.display()))
        })?;
        let decode = Config::from_toml_str(&ckpt.config).map(|c| c.decode).unwrap_or_default();
        let det = Box::new(UdadetDetector { params: ckpt.params, decode });
        *out = Box::into_raw(det);
        Ok(())
    })
}

/// Releases a detector. Null is ignored.
///
/// # Safety
/// `detector` must come from [`udadet_detector_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn udadet_detector_free(detector: *mut UdadetDetector) {
    if !detector.is_null() {
        drop(Box::from_raw(detector));
    }
}

/// # Safety
/// `detector` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn udadet_detector_num_classes(detector: *const UdadetDetector, out: *mut u32) -> UdadetStatus {
    guard(|| {
        non_null(detector, "detector")?;
        non_null(out, "out")?;
        *out = (*detector).params.num_classes as u32;
        Ok(())
    })
}

/// Input height and width must be multiples of this value.
///
/// # Safety
/// `detector` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn udadet_detector_output_stride(detector: *const UdadetDetector, out: *mut u32) -> UdadetStatus {
    guard(|| {
        non_null(detector, "detector")?;
        non_null(out, "out")?;
        *out = (*detector).params.output_stride() as u32;
        Ok(())
    })
}

/// Overrides the number of peaks kept and the minimum score.
///
/// # Safety
/// `detector` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn udadet_detector_set_decode(detector: *mut UdadetDetector, top_k: u32, score_threshold: f32) -> UdadetStatus {
    guard(|| {
        non_null(detector, "detector")?;
        if !score_threshold.is_finite() {
            return Err(invalid("score_threshold must be finite"));
        }
        (*detector).decode = DecodeParams {
            top_k: top_k as usize,
            score_threshold: score_threshold as f64,
        };
        Ok(())
    })
}

/// Copies up to `capacity` detections into `out` and stores the total number
/// found in `count`, which may exceed `capacity`.
unsafe fn write_detections(dets: &[Detection], out: *mut UdadetDetection, capacity: usize, count: *mut usize) -> FfiResult {
    if capacity > 0 {
        non_null(out, "out")?;
    }
    for (i, d) in dets.iter().take(capacity).enumerate() {
        *out.add(i) = d.into();
    }
    *count = dets.len();
    Ok(())
}

/// Runs the detector on one interleaved RGB image (`height·width·3` bytes, row
/// major). Detections are ordered by descending score.
///
/// # Safety
/// `pixels` must hold `width·height·3` bytes, `out` room for `capacity`
/// detections, and `count` must be valid.
#[no_mangle]
pub unsafe extern "C" fn udadet_detector_detect_rgb8(
    detector: *const UdadetDetector,
    pixels: *const u8,
    width: u32,
    height: u32,
    out: *mut UdadetDetection,
    capacity: usize,
    count: *mut usize,
) -> UdadetStatus {
    guard(|| {
        non_null(detector, "detector")?;
        non_null(pixels, "pixels")?;
        non_null(count, "count")?;
        let det = &*detector;
        let (w, h) = (width as usize, height as usize);
        let stride = det.params.output_stride();
        if w == 0 || h == 0 || w % stride != 0 || h % stride != 0 {
            return Err(invalid(format!("image {w}x{h} must be non-empty multiples of {stride}")));
        }
        let rgb = std::slice::from_raw_parts(pixels, w * h * 3);
        let img = Image::from_rgb8(w, h, rgb);
        let x: Tensor<f32> = stack_images(&[img]);
        let y = det.params.predict(&x).map_err(fail(UdadetStatus::Runtime))?;
        let dets = decode(&y.heatmap, &y.offset, &y.size, 0, stride, &det.decode).map_err(fail(UdadetStatus::Runtime))?;
        write_detections(&dets, out, capacity, count)
    })
}

fn map_len(dims: &[usize]) -> Result<usize, Failure> {
    dims.iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n > 0)
        .ok_or_else(|| invalid(format!("invalid map dimensions {dims:?}")))
}

/// Decodes one image's head outputs: `heatmap` is `classes·h·w`, `offset` and
/// `size` are `2·h·w`, all row major in grid units.
///
/// # Safety
/// Buffers must have the stated lengths; `out` must have room for `capacity`.
#[no_mangle]
pub unsafe extern "C" fn udadet_decode(
    heatmap: *const f32,
    offset: *const f32,
    size: *const f32,
    classes: u32,
    height: u32,
    width: u32,
    stride: u32,
    top_k: u32,
    score_threshold: f32,
    out: *mut UdadetDetection,
    capacity: usize,
    count: *mut usize,
) -> UdadetStatus {
    guard(|| {
        non_null(heatmap, "heatmap")?;
        non_null(offset, "offset")?;
        non_null(size, "size")?;
        non_null(count, "count")?;
        let (c, h, w) = (classes as usize, height as usize, width as usize);
        let plane = map_len(&[h, w])?;
        let hm_len = map_len(&[c, plane])?;
        if stride == 0 {
            return Err(invalid("stride must be positive"));
        }
        let t = |p: *const f32, ch: usize, len: usize| Tensor::new(vec![1, ch, h, w], std::slice::from_raw_parts(p, len).to_vec());
        let hm = t(heatmap, c, hm_len).map_err(fail(UdadetStatus::InvalidArgument))?;
        let off = t(offset, 2, 2 * plane).map_err(fail(UdadetStatus::InvalidArgument))?;
        let sz = t(size, 2, 2 * plane).map_err(fail(UdadetStatus::InvalidArgument))?;
        let params = DecodeParams {
            top_k: top_k as usize,
            score_threshold: score_threshold as f64,
        };
        let dets = decode(&hm, &off, &sz, 0, stride as usize, &params).map_err(fail(UdadetStatus::InvalidArgument))?;
        write_detections(&dets, out, capacity, count)
    })
}

enum AdaptationTerm {
    Entropy,
    MaxSquares(usize),
}

unsafe fn adaptation_loss(heatmap: *const f64, n: u32, c: u32, h: u32, w: u32, term: AdaptationTerm, out: *mut f64) -> FfiResult {
    non_null(heatmap, "heatmap")?;
    non_null(out, "out")?;
    let dims = [n as usize, c as usize, h as usize, w as usize];
    let len = map_len(&dims)?;
    let x = Tensor::new(dims.to_vec(), std::slice::from_raw_parts(heatmap, len).to_vec()).map_err(fail(UdadetStatus::InvalidArgument))?;
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(x);
    let l = match term {
        AdaptationTerm::Entropy => losses::entropy_loss(&mut tape, v),
        AdaptationTerm::MaxSquares(stride) => losses::max_squares_loss(&mut tape, v, stride),
    }
    .map_err(fail(UdadetStatus::InvalidArgument))?;
    *out = tape.item(l);
    Ok(())
}

/// Mean normalised entropy of an `n×c×h×w` heatmap after a softmax across the
/// `c ≥ 2` class channels.
///
/// # Safety
/// `heatmap` must hold `n·c·h·w` values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn udadet_entropy_loss(heatmap: *const f64, n: u32, c: u32, h: u32, w: u32, out: *mut f64) -> UdadetStatus {
    guard(|| adaptation_loss(heatmap, n, c, h, w, AdaptationTerm::Entropy, out))
}

/// Maximum squares loss of an `n×c×h×w` heatmap after a softmax across the
/// class channels, scaled by the output stride.
///
/// # Safety
/// `heatmap` must hold `n·c·h·w` values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn udadet_max_squares_loss(heatmap: *const f64, n: u32, c: u32, h: u32, w: u32, stride: u32, out: *mut f64) -> UdadetStatus {
    guard(|| adaptation_loss(heatmap, n, c, h, w, AdaptationTerm::MaxSquares(stride as usize), out))
}
