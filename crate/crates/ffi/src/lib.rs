//! C ABI over `granatt`.
//!
//! Every fallible call returns a [`GranattStatus`]; on failure the message is
//! available from [`granatt_last_error`] on the same thread. Arrays are
//! row-major `double` buffers in `[0, 1]`. Handles are opaque and must be
//! released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use granatt::granularity::{build_histogram, masks_for_depth, multi_otsu, DepthHistogram, DepthMap, GranularityMasks, BINS, MAX_THRESHOLDS};
use granatt::imageio::{add_depth_noise, noise_stats};
use granatt::metrics::evaluate_pair;
use granatt::network::{load_checkpoint, save_checkpoint, Network, NetworkConfig, SHARED};
use granatt::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GranattStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Checkpoint = 5,
    Unreachable = 6,
    Panic = 7,
}

/// Opaque set of granularity masks for one depth map.
pub struct GranattMasks {
    thresholds: Vec<u8>,
    objective: f64,
    masks: GranularityMasks,
}

/// Opaque network with its parameters.
pub struct GranattNetwork {
    net: Network,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GranattMetrics {
    pub mae: f64,
    pub max_f: f64,
    pub s_measure: f64,
    pub e_measure: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> GranattStatus {
    match e {
        Error::Shape { .. } => GranattStatus::Shape,
        Error::InvalidArgument(_) | Error::NonFinite { .. } => GranattStatus::InvalidArgument,
        Error::UnreachableNoise { .. } => GranattStatus::Unreachable,
        Error::Checkpoint(_) => GranattStatus::Checkpoint,
        Error::Io { .. } | Error::Image { .. } => GranattStatus::Io,
    }
}

struct Fail(GranattStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(GranattStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(GranattStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GranattStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GranattStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            GranattStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

fn area(height: usize, width: usize) -> Result<usize, Fail> {
    height
        .checked_mul(width)
        .filter(|&n| n > 0)
        .ok_or_else(|| invalid(format!("bad image size {height}x{width}")))
}

unsafe fn map(p: *const f64, height: usize, width: usize, what: &str) -> Result<Tensor, Fail> {
    let n = area(height, width)?;
    Ok(Tensor::new(&[1, height, width], slice(p, n, what)?.to_vec())?)
}

unsafe fn path_arg(p: *const c_char) -> Result<&'static Path, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not UTF-8"))?;
    Ok(Path::new(s))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn granatt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn granatt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Multi-threshold Otsu on a 256-bin histogram. Writes up to `t` thresholds
/// to `out_thresholds` (room for 3), their number to `out_count` and the
/// between-class variance to `out_objective` (may be null).
///
/// # Safety
/// `hist` must point to 256 counts; the out pointers must be valid or null
/// where allowed.
#[no_mangle]
pub unsafe extern "C" fn granatt_multi_otsu(
    hist: *const u64,
    t: usize,
    out_thresholds: *mut u8,
    out_count: *mut usize,
    out_objective: *mut f64,
) -> GranattStatus {
    guard(|| {
        let counts: [u64; BINS] = slice(hist, BINS, "hist")?.try_into().expect("256 bins");
        let th = slice_mut(out_thresholds, MAX_THRESHOLDS, "out_thresholds")?;
        let count = out(out_count, "out_count")?;
        let set = multi_otsu(&DepthHistogram::from_counts(counts), t)?;
        th[..set.effective()].copy_from_slice(&set.thresholds);
        *count = set.effective();
        if let Some(o) = out_objective.as_mut() {
            *o = set.objective;
        }
        Ok(())
    })
}

/// 256-bin histogram of a depth map.
///
/// # Safety
/// `depth` holds `height * width` values; `out_hist` has room for 256.
#[no_mangle]
pub unsafe extern "C" fn granatt_depth_histogram(
    depth: *const f64,
    height: usize,
    width: usize,
    out_hist: *mut u64,
) -> GranattStatus {
    guard(|| {
        let d = DepthMap::new(height, width, slice(depth, area(height, width)?, "depth")?.to_vec())?;
        let h = slice_mut(out_hist, BINS, "out_hist")?;
        h.copy_from_slice(build_histogram(&d).bins());
        Ok(())
    })
}

/// Thresholds and masks of a depth map.
///
/// # Safety
/// `depth` holds `height * width` values; `out_masks` must be valid.
#[no_mangle]
pub unsafe extern "C" fn granatt_masks_new(
    depth: *const f64,
    height: usize,
    width: usize,
    t: usize,
    out_masks: *mut *mut GranattMasks,
) -> GranattStatus {
    guard(|| {
        let slot = out(out_masks, "out_masks")?;
        let d = DepthMap::new(height, width, slice(depth, area(height, width)?, "depth")?.to_vec())?;
        let (set, masks) = masks_for_depth(&d, t)?;
        *slot = Box::into_raw(Box::new(GranattMasks {
            thresholds: set.thresholds,
            objective: set.objective,
            masks,
        }));
        Ok(())
    })
}

/// Number of masks (effective thresholds plus one); 0 for a null handle.
///
/// # Safety
/// `masks` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn granatt_masks_regions(masks: *const GranattMasks) -> usize {
    masks.as_ref().map_or(0, |m| m.masks.regions())
}

/// Copies thresholds (up to 3) and returns how many there are; the
/// objective goes to `out_objective` when non-null.
///
/// # Safety
/// `masks` is a live handle; `out_thresholds` has room for 3.
#[no_mangle]
pub unsafe extern "C" fn granatt_masks_thresholds(
    masks: *const GranattMasks,
    out_thresholds: *mut u8,
    out_count: *mut usize,
    out_objective: *mut f64,
) -> GranattStatus {
    guard(|| {
        let m = masks.as_ref().ok_or_else(|| null("masks"))?;
        let th = slice_mut(out_thresholds, MAX_THRESHOLDS, "out_thresholds")?;
        th[..m.thresholds.len()].copy_from_slice(&m.thresholds);
        *out(out_count, "out_count")? = m.thresholds.len();
        if let Some(o) = out_objective.as_mut() {
            *o = m.objective;
        }
        Ok(())
    })
}

/// Writes mask `index` as 0/255 bytes into `out_bytes` of length `len`,
/// which must equal height * width.
///
/// # Safety
/// `masks` is a live handle; `out_bytes` has room for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn granatt_masks_copy(
    masks: *const GranattMasks,
    index: usize,
    out_bytes: *mut u8,
    len: usize,
) -> GranattStatus {
    guard(|| {
        let m = masks.as_ref().ok_or_else(|| null("masks"))?;
        if index >= m.masks.regions() {
            return Err(invalid(format!("mask {index} of {}", m.masks.regions())));
        }
        let n = m.masks.height() * m.masks.width();
        if len != n {
            return Err(Fail(GranattStatus::Shape, format!("buffer of {len} bytes for {n} pixels")));
        }
        slice_mut(out_bytes, len, "out_bytes")?.copy_from_slice(&m.masks.mask_bytes(index));
        Ok(())
    })
}

/// # Safety
/// `masks` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn granatt_masks_free(masks: *mut GranattMasks) {
    if !masks.is_null() {
        drop(Box::from_raw(masks));
    }
}

/// Network with default widths and parameters drawn from `seed`.
///
/// # Safety
/// `out_network` must be valid.
#[no_mangle]
pub unsafe extern "C" fn granatt_network_new(
    input_size: usize,
    seed: u64,
    out_network: *mut *mut GranattNetwork,
) -> GranattStatus {
    guard(|| {
        let slot = out(out_network, "out_network")?;
        let net = Network::new(NetworkConfig {
            input_size,
            seed,
            ..NetworkConfig::default()
        })?;
        *slot = Box::into_raw(Box::new(GranattNetwork { net }));
        Ok(())
    })
}

/// Loads a GRANATT1 checkpoint.
///
/// # Safety
/// `path` is a NUL-terminated UTF-8 string; `out_network` must be valid.
#[no_mangle]
pub unsafe extern "C" fn granatt_network_load(
    path: *const c_char,
    out_network: *mut *mut GranattNetwork,
) -> GranattStatus {
    guard(|| {
        let slot = out(out_network, "out_network")?;
        let net = load_checkpoint(path_arg(path)?)?;
        *slot = Box::into_raw(Box::new(GranattNetwork { net }));
        Ok(())
    })
}

/// # Safety
/// `network` is a live handle; `path` is a NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn granatt_network_save(network: *const GranattNetwork, path: *const c_char) -> GranattStatus {
    guard(|| {
        let n = network.as_ref().ok_or_else(|| null("network"))?;
        save_checkpoint(&n.net, path_arg(path)?)?;
        Ok(())
    })
}

/// Square input side length; 0 for a null handle.
///
/// # Safety
/// `network` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn granatt_network_input_size(network: *const GranattNetwork) -> usize {
    network.as_ref().map_or(0, |n| n.net.config().input_size)
}

/// Number of scalar parameters; 0 for a null handle.
///
/// # Safety
/// `network` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn granatt_network_parameter_count(network: *const GranattNetwork) -> usize {
    network.as_ref().map_or(0, |n| n.net.parameter_count())
}

/// Final saliency map for one input pair at the network input size `s`.
/// `rgb` is planar 3*s*s, `depth` and `out_map` are s*s.
///
/// # Safety
/// Buffers must have the sizes above; `network` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn granatt_network_predict(
    network: *const GranattNetwork,
    rgb: *const f64,
    depth: *const f64,
    out_map: *mut f64,
) -> GranattStatus {
    guard(|| {
        let n = network.as_ref().ok_or_else(|| null("network"))?;
        let s = n.net.config().input_size;
        let rgb = Tensor::new(&[3, s, s], slice(rgb, 3 * s * s, "rgb")?.to_vec())?;
        let depth = Tensor::new(&[1, s, s], slice(depth, s * s, "depth")?.to_vec())?;
        let dst = slice_mut(out_map, s * s, "out_map")?;
        let maps = n.net.predict(&rgb, &depth, None)?;
        dst.copy_from_slice(maps[SHARED][0].data());
        Ok(())
    })
}

/// # Safety
/// `network` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn granatt_network_free(network: *mut GranattNetwork) {
    if !network.is_null() {
        drop(Box::from_raw(network));
    }
}

/// MAE, max F-measure, S-measure and E-measure of one prediction.
///
/// # Safety
/// `pred` and `gt` hold `height * width` values; `out_metrics` must be valid.
#[no_mangle]
pub unsafe extern "C" fn granatt_evaluate(
    pred: *const f64,
    gt: *const f64,
    height: usize,
    width: usize,
    out_metrics: *mut GranattMetrics,
) -> GranattStatus {
    guard(|| {
        let dst = out(out_metrics, "out_metrics")?;
        let m = evaluate_pair("", &map(pred, height, width, "pred")?, &map(gt, height, width, "gt")?)?;
        *dst = GranattMetrics {
            mae: m.mae,
            max_f: m.max_f,
            s_measure: m.s_measure,
            e_measure: m.e_measure,
        };
        Ok(())
    })
}

/// RMSE and failing delta1 fraction between two depth maps.
///
/// # Safety
/// `clean` and `noisy` hold `height * width` values; out pointers valid.
#[no_mangle]
pub unsafe extern "C" fn granatt_noise_stats(
    clean: *const f64,
    noisy: *const f64,
    height: usize,
    width: usize,
    out_rmse: *mut f64,
    out_delta1: *mut f64,
) -> GranattStatus {
    guard(|| {
        let n = area(height, width)?;
        let a = DepthMap::new(height, width, slice(clean, n, "clean")?.to_vec())?;
        let b = DepthMap::new(height, width, slice(noisy, n, "noisy")?.to_vec())?;
        let (r, d) = noise_stats(&a, &b)?;
        *out(out_rmse, "out_rmse")? = r;
        *out(out_delta1, "out_delta1")? = d;
        Ok(())
    })
}

/// Adds clamped Gaussian noise calibrated to `target_rmse`. `out_depth`
/// receives `height * width` values; `out_sigma` and `out_rmse` may be null.
///
/// # Safety
/// Buffers must hold `height * width` values.
#[no_mangle]
pub unsafe extern "C" fn granatt_add_depth_noise(
    depth: *const f64,
    height: usize,
    width: usize,
    target_rmse: f64,
    seed: u64,
    out_depth: *mut f64,
    out_sigma: *mut f64,
    out_rmse: *mut f64,
) -> GranattStatus {
    guard(|| {
        let n = area(height, width)?;
        let d = DepthMap::new(height, width, slice(depth, n, "depth")?.to_vec())?;
        let dst = slice_mut(out_depth, n, "out_depth")?;
        let (noisy, spec) = add_depth_noise(&d, target_rmse, seed)?;
        dst.copy_from_slice(noisy.values());
        if let Some(s) = out_sigma.as_mut() {
            *s = spec.sigma;
        }
        if let Some(r) = out_rmse.as_mut() {
            *r = spec.achieved_rmse;
        }
        Ok(())
    })
}
