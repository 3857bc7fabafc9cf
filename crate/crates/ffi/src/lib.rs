//! C interface to photonshrink.
//!
//! Objects are opaque handles created by `ps_*` constructors and released by
//! the matching `ps_*_free`. Every fallible function returns a [`PsStatus`];
//! on failure [`ps_last_error_message`] describes the error for the calling
//! thread. A handle must not be used from two threads at the same time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use photonshrink::io::{
    read_cube, read_depth, synth_scene, write_cube, write_depth, PatchSpec, Reflectivity, SceneKind,
};
use photonshrink::loss::{Metrics, DEFAULT_DELTAS};
use photonshrink::nn::{load_model, DatasetSpec, PrsNet};
use photonshrink::pipeline::{reconstruct, Method, ReconstructOptions};
use photonshrink::simulator::{simulate, SbrTarget};
use photonshrink::{DepthImage, DetectorConfig, Error, PhotonCube, PulseModel};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    ShapeMismatch = 5,
    NonFinite = 6,
    Panic = 7,
}

/// Depth estimator selector for [`ps_reconstruct`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsMethod {
    Argmax = 0,
    LmFilter = 1,
    Shrinkage = 2,
    PrsNet = 3,
}

/// Synthetic scene selector for [`ps_simulate`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsScene {
    Staircase = 0,
    Wedge = 1,
    Blocks = 2,
}

/// Photon-count cube.
pub struct PsCube(PhotonCube);

/// Depth map in meters.
pub struct PsDepth(DepthImage);

/// Trained network.
pub struct PsModel(PrsNet);

/// Evaluation of a depth map against ground truth.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PsMetrics {
    pub rmse: f64,
    pub acc_1_01: f64,
    pub acc_1_02: f64,
    pub acc_1_03: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> PsStatus {
    match e {
        Error::InvalidParameter { .. }
        | Error::DepthOutOfRange { .. }
        | Error::ZeroReflectivity => PsStatus::InvalidArgument,
        Error::ShapeMismatch { .. } => PsStatus::ShapeMismatch,
        Error::NonFinite(_) => PsStatus::NonFinite,
        Error::BadMagic { .. }
        | Error::UnsupportedVersion(_)
        | Error::Truncated { .. }
        | Error::DimOverflow(_)
        | Error::Format(_) => PsStatus::Format,
        Error::Io(_) => PsStatus::Io,
    }
}

/// Failure inside a call: a status and its message.
struct Fail(PsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(PsStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PsStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PsStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(PsStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message describing the last failure on this thread, empty after a
/// success. The pointer stays valid until the next `ps_*` call on the same
/// thread.
#[no_mangle]
pub extern "C" fn ps_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ps_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a cube from `bins * rows * cols` pixel-major counts.
///
/// # Safety
/// `counts` must point to `len` readable values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ps_cube_from_counts(
    bins: usize,
    rows: usize,
    cols: usize,
    bin_ps: u32,
    counts: *const u32,
    len: usize,
    out: *mut *mut PsCube,
) -> PsStatus {
    guard(|| {
        if counts.is_null() && len > 0 {
            return Err(null("counts"));
        }
        let data = if len == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(counts, len).to_vec()
        };
        store(
            out,
            PsCube(PhotonCube::new(bins, rows, cols, bin_ps, data)?),
        )
    })
}

/// Reads a cube file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ps_cube_read(path: *const c_char, out: *mut *mut PsCube) -> PsStatus {
    guard(|| store(out, PsCube(read_cube(&path_arg(path)?)?)))
}

/// Writes a cube file atomically.
///
/// # Safety
/// `cube` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ps_cube_write(cube: *const PsCube, path: *const c_char) -> PsStatus {
    guard(|| Ok(write_cube(&path_arg(path)?, &borrow(cube, "cube")?.0)?))
}

/// Reports the cube dimensions; any output pointer may be null.
///
/// # Safety
/// `cube` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ps_cube_dims(
    cube: *const PsCube,
    bins: *mut usize,
    rows: *mut usize,
    cols: *mut usize,
    bin_ps: *mut u32,
) -> PsStatus {
    guard(|| {
        let c = &borrow(cube, "cube")?.0;
        for (p, v) in [(bins, c.bins()), (rows, c.rows()), (cols, c.cols())] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        if let Some(p) = bin_ps.as_mut() {
            *p = c.bin_width_ps();
        }
        Ok(())
    })
}

/// Copies the pixel-major counts into `dst`, which must hold exactly
/// `bins * rows * cols` values.
///
/// # Safety
/// `cube` must be a live handle and `dst` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn ps_cube_counts(
    cube: *const PsCube,
    dst: *mut u32,
    len: usize,
) -> PsStatus {
    guard(|| {
        let c = &borrow(cube, "cube")?.0;
        if dst.is_null() {
            return Err(null("dst"));
        }
        if len != c.counts().len() {
            return Err(Fail(
                PsStatus::ShapeMismatch,
                format!("buffer holds {len}, cube has {}", c.counts().len()),
            ));
        }
        std::slice::from_raw_parts_mut(dst, len).copy_from_slice(c.counts());
        Ok(())
    })
}

/// Releases a cube; null is ignored.
///
/// # Safety
/// `cube` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ps_cube_free(cube: *mut PsCube) {
    if !cube.is_null() {
        drop(Box::from_raw(cube));
    }
}

/// Simulates a synthetic scene. `gt_out` may be null; otherwise it receives
/// the ground-truth depth map.
///
/// # Safety
/// `cube_out` must be writable; `gt_out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn ps_simulate(
    scene: PsScene,
    rows: usize,
    cols: usize,
    signal: f64,
    background: f64,
    bins: usize,
    bin_ps: f64,
    fwhm_ps: f64,
    seed: u64,
    cube_out: *mut *mut PsCube,
    gt_out: *mut *mut PsDepth,
) -> PsStatus {
    guard(|| {
        if cube_out.is_null() {
            return Err(null("cube_out"));
        }
        let cfg = DetectorConfig::from_picoseconds(bins, bin_ps)?;
        let pulse = PulseModel::from_picoseconds(fwhm_ps)?;
        let range = DatasetSpec {
            bins,
            bin_ps,
            fwhm_ps,
            ..DatasetSpec::default()
        }
        .depth_range()?;
        let kind = match scene {
            PsScene::Staircase => SceneKind::Staircase { steps: 4 },
            PsScene::Wedge => SceneKind::Wedge,
            PsScene::Blocks => SceneKind::Blocks(Vec::new()),
        };
        let scene = synth_scene(&kind, rows, cols, range, Reflectivity::Constant)?;
        let sim = simulate(
            &scene,
            &cfg,
            &pulse,
            &SbrTarget::new(signal, background)?,
            seed,
        )?;
        store(cube_out, PsCube(sim.cube))?;
        if !gt_out.is_null() {
            store(gt_out, PsDepth(scene.depth_image()))?;
        }
        Ok(())
    })
}

/// Loads a trained model checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ps_model_load(path: *const c_char, out: *mut *mut PsModel) -> PsStatus {
    guard(|| store(out, PsModel(load_model(&path_arg(path)?)?)))
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ps_model_free(model: *mut PsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Estimates a depth map. `model` is required for [`PsMethod::PrsNet`] and
/// ignored otherwise. `patch == 0` processes the whole image; otherwise
/// square patches of that size are placed every `stride` pixels and overlaps
/// are averaged.
///
/// # Safety
/// `cube` must be a live handle, `model` null or a live handle, `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn ps_reconstruct(
    cube: *const PsCube,
    method: PsMethod,
    fwhm_ps: f64,
    s0: f64,
    model: *mut PsModel,
    patch: usize,
    stride: usize,
    out: *mut *mut PsDepth,
) -> PsStatus {
    guard(|| {
        let c = &borrow(cube, "cube")?.0;
        let method = match method {
            PsMethod::Argmax => Method::Argmax,
            PsMethod::LmFilter => Method::LmFilter,
            PsMethod::Shrinkage => Method::Shrinkage,
            PsMethod::PrsNet => Method::PrsNet,
        };
        let opts = ReconstructOptions {
            method,
            fwhm: fwhm_ps * 1e-12,
            s0,
            window: None,
            patch: if patch == 0 {
                None
            } else {
                Some(PatchSpec::new(patch, stride)?)
            },
        };
        let net = model.as_mut().map(|m| &mut m.0);
        store(out, PsDepth(reconstruct(c, &opts, net)?))
    })
}

/// Reads a PFM depth map.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ps_depth_read_pfm(
    path: *const c_char,
    out: *mut *mut PsDepth,
) -> PsStatus {
    guard(|| store(out, PsDepth(read_depth(&path_arg(path)?)?)))
}

/// Writes a depth map as PFM atomically.
///
/// # Safety
/// `depth` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ps_depth_write_pfm(
    depth: *const PsDepth,
    path: *const c_char,
) -> PsStatus {
    guard(|| Ok(write_depth(&path_arg(path)?, &borrow(depth, "depth")?.0)?))
}

/// Reports the depth map size; any output pointer may be null.
///
/// # Safety
/// `depth` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ps_depth_dims(
    depth: *const PsDepth,
    rows: *mut usize,
    cols: *mut usize,
) -> PsStatus {
    guard(|| {
        let d = &borrow(depth, "depth")?.0;
        if let Some(p) = rows.as_mut() {
            *p = d.rows();
        }
        if let Some(p) = cols.as_mut() {
            *p = d.cols();
        }
        Ok(())
    })
}

/// Copies the row-major depths into `dst`, which must hold `rows * cols`
/// values.
///
/// # Safety
/// `depth` must be a live handle and `dst` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn ps_depth_values(
    depth: *const PsDepth,
    dst: *mut f64,
    len: usize,
) -> PsStatus {
    guard(|| {
        let d = &borrow(depth, "depth")?.0;
        if dst.is_null() {
            return Err(null("dst"));
        }
        if len != d.values().len() {
            return Err(Fail(
                PsStatus::ShapeMismatch,
                format!("buffer holds {len}, image has {}", d.values().len()),
            ));
        }
        std::slice::from_raw_parts_mut(dst, len).copy_from_slice(d.values());
        Ok(())
    })
}

/// Releases a depth map; null is ignored.
///
/// # Safety
/// `depth` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ps_depth_free(depth: *mut PsDepth) {
    if !depth.is_null() {
        drop(Box::from_raw(depth));
    }
}

/// RMSE and accuracy at thresholds 1.01, 1.02 and 1.03.
///
/// # Safety
/// `pred` and `gt` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ps_metrics(
    pred: *const PsDepth,
    gt: *const PsDepth,
    out: *mut PsMetrics,
) -> PsStatus {
    guard(|| {
        let m = Metrics::compute(
            &borrow(gt, "gt")?.0,
            &borrow(pred, "pred")?.0,
            &DEFAULT_DELTAS,
            None,
        )?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = PsMetrics {
            rmse: m.rmse,
            acc_1_01: m.accuracy[0].1,
            acc_1_02: m.accuracy[1].1,
            acc_1_03: m.accuracy[2].1,
        };
        Ok(())
    })
}
