//! C interface to `hsrecon`.
//!
//! Every fallible call returns an [`HsStatus`]. On failure the message of the
//! most recent error on the calling thread is available through
//! [`hs_last_error_message`]. Objects cross the boundary as opaque handles
//! owned by the caller and released with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use hsrecon::alignnet::AlignNet;
use hsrecon::body::{load_template, procedural_template, BodyTemplate};
use hsrecon::eval::depth_metrics;
use hsrecon::geometry::Accumulation;
use hsrecon::pipeline::{export_reconstruction, reconstruct, ExportFrame, ReconstructOptions, Reconstruction};
use hsrecon::roe::{solve, Objective, RoeConfig};
use hsrecon::tensor_io::{read_bundle, SequenceBundle};
use hsrecon::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    OutOfRange = 3,
    Io = 10,
    Container = 11,
    Json = 12,
    Detection = 13,
    Geometry = 14,
    Unsolvable = 15,
    InvalidInput = 16,
    ShapeMismatch = 17,
    EmptyMask = 18,
    EmptySet = 19,
    Degenerate = 20,
    MissingField = 21,
    NonFinite = 22,
    Diverged = 23,
    Panic = 99,
}

fn status_of(e: &Error) -> HsStatus {
    match e {
        Error::Io { .. } => HsStatus::Io,
        Error::InvalidContainer(_) | Error::BadMagic(_) | Error::Truncated { .. } | Error::UnknownDtype(_) => HsStatus::Container,
        Error::MalformedDetection { .. } | Error::InvalidDetection { .. } => HsStatus::Detection,
        Error::Json(_) => HsStatus::Json,
        Error::BehindCamera(_) | Error::NonPositiveDepth { .. } => HsStatus::Geometry,
        Error::NoSolution(_) | Error::Unsolvable(_) => HsStatus::Unsolvable,
        Error::InvalidInput(_) => HsStatus::InvalidInput,
        Error::ShapeMismatch(_) | Error::NonScalarRoot(..) => HsStatus::ShapeMismatch,
        Error::EmptyMask => HsStatus::EmptyMask,
        Error::EmptySet => HsStatus::EmptySet,
        Error::Degenerate(_) => HsStatus::Degenerate,
        Error::MissingField(_) => HsStatus::MissingField,
        Error::NonFinite(_) => HsStatus::NonFinite,
        Error::Diverged { .. } => HsStatus::Diverged,
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(HsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            HsStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            HsStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail(HsStatus::NullPointer, format!("{what} is null")));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Fail(HsStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail(HsStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    // SAFETY: the caller passes a valid, aligned, writable pointer or null.
    unsafe { p.as_mut() }.ok_or_else(|| Fail(HsStatus::NullPointer, format!("{what} is null")))
}

fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    // SAFETY: non-null handles come from the matching constructor.
    unsafe { p.as_ref() }.ok_or_else(|| Fail(HsStatus::NullPointer, format!("{what} is null")))
}

/// Message of the last failed call on this thread, or null after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn hs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn hs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HsAlignMode {
    ScaleOnly = 0,
    ScaleShift = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct HsAlignment {
    pub scale: f64,
    pub shift: f64,
    pub objective: f64,
    pub inlier_count: usize,
}

/// Robust alignment of `pred` to `target`. `weights` may be null for unit
/// weights. `truncation` selects the objective: negative for plain L1, zero
/// for the default truncation, positive for an explicit threshold.
///
/// # Safety
/// `pred`, `target` and a non-null `weights` must point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn hs_roe_solve(
    pred: *const f64,
    target: *const f64,
    weights: *const f64,
    n: usize,
    mode: HsAlignMode,
    truncation: f64,
    out: *mut HsAlignment,
) -> HsStatus {
    guard(|| {
        let p = slice_arg(pred, n, "pred")?;
        let q = slice_arg(target, n, "target")?;
        let ones;
        let w = if weights.is_null() {
            ones = vec![1.0; n];
            &ones[..]
        } else {
            slice_arg(weights, n, "weights")?
        };
        let objective = if truncation < 0.0 {
            Objective::L1
        } else if truncation == 0.0 {
            Objective::TruncatedL1(None)
        } else if truncation.is_finite() {
            Objective::TruncatedL1(Some(truncation))
        } else {
            return Err(Fail(HsStatus::InvalidInput, "truncation must be finite".into()));
        };
        let cfg = match mode {
            HsAlignMode::ScaleOnly => RoeConfig::scale_only(objective),
            HsAlignMode::ScaleShift => RoeConfig::scale_shift(objective),
        };
        let r = solve(p, q, w, &cfg)?;
        *out_arg(out, "out")? = HsAlignment { scale: r.scale, shift: r.shift, objective: r.objective, inlier_count: r.inlier_count };
        Ok(())
    })
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct HsDepthMetrics {
    pub abs_rel: f64,
    pub delta_125: f64,
    pub alignment_scale: f64,
    pub pixels: usize,
}

/// Depth metrics over the pixels where `mask` is nonzero. A null mask keeps
/// every pixel with positive ground truth.
///
/// # Safety
/// `pred`, `gt` and a non-null `mask` must point to `n` elements.
#[no_mangle]
pub unsafe extern "C" fn hs_depth_metrics(pred: *const f64, gt: *const f64, mask: *const u8, n: usize, align: bool, out: *mut HsDepthMetrics) -> HsStatus {
    guard(|| {
        let p = slice_arg(pred, n, "pred")?;
        let g = slice_arg(gt, n, "gt")?;
        let m: Vec<bool> = if mask.is_null() { g.iter().map(|&x| x > 0.0).collect() } else { slice_arg(mask, n, "mask")?.iter().map(|&b| b != 0).collect() };
        let r = depth_metrics(p, g, &m, align)?;
        *out_arg(out, "out")? = HsDepthMetrics { abs_rel: r.abs_rel, delta_125: r.delta_125, alignment_scale: r.alignment_scale, pixels: r.pixels };
        Ok(())
    })
}

/// Opaque sequence bundle.
pub struct HsBundle(SequenceBundle);
/// Opaque AlignNet model.
pub struct HsModel(AlignNet);
/// Opaque body template.
pub struct HsTemplate(BodyTemplate);
/// Opaque reconstruction result.
pub struct HsReconstruction(Reconstruction);

fn store<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    *out_arg(out, "out")? = Box::into_raw(Box::new(value));
    Ok(())
}

/// # Safety
/// `dir` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hs_bundle_open(dir: *const c_char, out: *mut *mut HsBundle) -> HsStatus {
    guard(|| store(out, HsBundle(read_bundle(path_arg(dir, "dir")?)?)))
}

/// # Safety
/// `bundle` must be null or a handle from [`hs_bundle_open`], freed once.
#[no_mangle]
pub unsafe extern "C" fn hs_bundle_free(bundle: *mut HsBundle) {
    if !bundle.is_null() {
        drop(Box::from_raw(bundle));
    }
}

/// Loads weights from a directory holding `manifest.json`.
///
/// # Safety
/// `dir` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hs_model_load(dir: *const c_char, out: *mut *mut HsModel) -> HsStatus {
    guard(|| store(out, HsModel(AlignNet::load(path_arg(dir, "dir")?)?)))
}

/// # Safety
/// `model` must be null or a handle from [`hs_model_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn hs_model_free(model: *mut HsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Loads a template directory, or the built-in template when `dir` is null.
///
/// # Safety
/// A non-null `dir` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hs_template_load(dir: *const c_char, out: *mut *mut HsTemplate) -> HsStatus {
    guard(|| {
        let t = if dir.is_null() { procedural_template() } else { load_template(path_arg(dir, "dir")?)? };
        store(out, HsTemplate(t))
    })
}

/// # Safety
/// `tmpl` must be null or a handle from [`hs_template_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn hs_template_free(tmpl: *mut HsTemplate) {
    if !tmpl.is_null() {
        drop(Box::from_raw(tmpl));
    }
}

/// Runs the full reconstruction. `f32_accumulation` selects the single
/// precision accumulator for the pointmap scaling.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hs_reconstruct(
    bundle: *const HsBundle,
    model: *const HsModel,
    tmpl: *const HsTemplate,
    f32_accumulation: bool,
    out: *mut *mut HsReconstruction,
) -> HsStatus {
    guard(|| {
        let b = handle(bundle, "bundle")?;
        let m = handle(model, "model")?;
        let t = handle(tmpl, "template")?;
        let opts = ReconstructOptions {
            accumulation: if f32_accumulation { Accumulation::F32 } else { Accumulation::F64 },
            ..ReconstructOptions::default()
        };
        store(out, HsReconstruction(reconstruct(&b.0, &m.0, &t.0, &opts)?))
    })
}

/// # Safety
/// `rec` must be null or a handle from [`hs_reconstruct`], freed once.
#[no_mangle]
pub unsafe extern "C" fn hs_reconstruction_free(rec: *mut HsReconstruction) {
    if !rec.is_null() {
        drop(Box::from_raw(rec));
    }
}

/// Number of frames, or 0 for a null handle.
///
/// # Safety
/// `rec` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn hs_reconstruction_frames(rec: *const HsReconstruction) -> usize {
    rec.as_ref().map_or(0, |r| r.0.frames())
}

/// Metric scale, or NaN for a null handle.
///
/// # Safety
/// `rec` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn hs_reconstruction_scale(rec: *const HsReconstruction) -> f64 {
    rec.as_ref().map_or(f64::NAN, |r| r.0.scale)
}

/// Metric body translation of `frame` into `out[0..3]`.
///
/// # Safety
/// `rec` must be live; `out` must point to 3 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn hs_reconstruction_translation(rec: *const HsReconstruction, frame: usize, out: *mut f64) -> HsStatus {
    guard(|| {
        let r = handle(rec, "reconstruction")?;
        let p = r.0.params.get(frame).ok_or_else(|| Fail(HsStatus::OutOfRange, format!("frame {frame} of {}", r.0.frames())))?;
        if out.is_null() {
            return Err(Fail(HsStatus::NullPointer, "out is null".into()));
        }
        std::slice::from_raw_parts_mut(out, 3).copy_from_slice(&p.translation);
        Ok(())
    })
}

/// Writes the PLY export to `dir`, in world coordinates when `world` is set.
///
/// # Safety
/// Handles must be live; `dir` must be a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hs_reconstruction_export(rec: *const HsReconstruction, tmpl: *const HsTemplate, dir: *const c_char, world: bool) -> HsStatus {
    guard(|| {
        let r = handle(rec, "reconstruction")?;
        let t = handle(tmpl, "template")?;
        let frame = if world { ExportFrame::World } else { ExportFrame::Camera };
        export_reconstruction(&r.0, &t.0, path_arg(dir, "dir")?, frame)?;
        Ok(())
    })
}
