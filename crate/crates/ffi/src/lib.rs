//! C ABI over `landmark-core`.
//!
//! Every fallible function returns an `LmkStatus` (0 on success). On failure the message is
//! kept per thread and can be fetched with `lmk_last_error_message`. Handles are opaque and
//! must be released with their `*_free` function; passing NULL to a free function is a no-op.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use landmark_core::eval::evaluate_dirs;
use landmark_core::inference::{predict_image, Ensemble};
use landmark_core::plan::Plan;
use landmark_core::synth::{synth_generate, SynthConfig};
use landmark_core::train::Checkpoint;
use landmark_core::{io, Error, LandmarkSet, Volume3D};

/// Result codes. Values from 10 upward mirror the core error categories.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmkStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Panic = 3,
    Geometry = 10,
    Config = 11,
    Encoding = 12,
    Validation = 13,
    Preprocessing = 14,
    Contract = 15,
    Evaluation = 16,
    Conversion = 17,
    Generation = 18,
    Training = 19,
    Format = 20,
    Io = 21,
    Json = 22,
}

impl From<&Error> for LmkStatus {
    fn from(e: &Error) -> Self {
        match e.code() {
            10 => LmkStatus::Geometry,
            11 => LmkStatus::Config,
            12 => LmkStatus::Encoding,
            13 => LmkStatus::Validation,
            14 => LmkStatus::Preprocessing,
            15 => LmkStatus::Contract,
            16 => LmkStatus::Evaluation,
            17 => LmkStatus::Conversion,
            18 => LmkStatus::Generation,
            19 => LmkStatus::Training,
            20 => LmkStatus::Format,
            21 => LmkStatus::Io,
            _ => LmkStatus::Json,
        }
    }
}

/// A 3D image.
pub struct LmkVolume(Volume3D);

/// A loaded model (one or more checkpoints) with its plan.
pub struct LmkModel {
    plan: Plan,
    ensemble: Ensemble,
}

/// Predicted landmarks for one case, with per-landmark confidence.
pub struct LmkLandmarks {
    set: LandmarkSet,
    names: Vec<CString>,
    confidence: Vec<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: LmkStatus, msg: impl Into<String>) -> LmkStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), LmkStatus>) -> LmkStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LmkStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(LmkStatus::Panic, msg)
        }
    }
}

fn core<T>(r: landmark_core::Result<T>) -> Result<T, LmkStatus> {
    r.map_err(|e| fail(LmkStatus::from(&e), e.to_string()))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, LmkStatus> {
    if p.is_null() {
        return Err(fail(LmkStatus::NullPointer, format!("{what} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(LmkStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), LmkStatus> {
    if p.is_null() {
        Err(fail(LmkStatus::NullPointer, format!("{what} is NULL")))
    } else {
        Ok(())
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lmk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Length in bytes of the last error message on this thread, excluding the NUL; 0 if none.
#[no_mangle]
pub extern "C" fn lmk_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(0, |c| c.as_bytes().len()))
}

/// Copies the last error message into `buf` (NUL-terminated, truncated to `len - 1` bytes).
/// Returns the number of bytes written excluding the NUL.
#[no_mangle]
pub unsafe extern "C" fn lmk_last_error_message(buf: *mut c_char, len: usize) -> usize {
    if buf.is_null() || len == 0 {
        return 0;
    }
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_ref().map_or(&[][..], |c| c.as_bytes());
        let n = bytes.len().min(len - 1);
        ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
        *buf.add(n) = 0;
        n
    })
}

/// Reads a `.nii`, `.nii.gz` or `.raw` volume.
#[no_mangle]
pub unsafe extern "C" fn lmk_volume_read(path: *const c_char, out: *mut *mut LmkVolume) -> LmkStatus {
    guard(|| {
        non_null(out, "out")?;
        let p = path_arg(path, "path")?;
        let v = core(io::read_volume(&p))?;
        *out = Box::into_raw(Box::new(LmkVolume(v)));
        Ok(())
    })
}

/// Builds a volume from x-fastest voxel data, spacing in mm and origin in mm (LPS),
/// with identity direction.
#[no_mangle]
pub unsafe extern "C" fn lmk_volume_from_data(
    data: *const f32,
    shape: *const usize,
    spacing: *const f64,
    origin: *const f64,
    out: *mut *mut LmkVolume,
) -> LmkStatus {
    guard(|| {
        non_null(data, "data")?;
        non_null(shape, "shape")?;
        non_null(spacing, "spacing")?;
        non_null(origin, "origin")?;
        non_null(out, "out")?;
        let sh: [usize; 3] = std::slice::from_raw_parts(shape, 3).try_into().expect("3");
        let sp: [f64; 3] = std::slice::from_raw_parts(spacing, 3).try_into().expect("3");
        let or: [f64; 3] = std::slice::from_raw_parts(origin, 3).try_into().expect("3");
        let n = sh
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .ok_or_else(|| fail(LmkStatus::InvalidArgument, "shape overflows"))?;
        let g = core(landmark_core::Geometry::new(sh, sp, or, landmark_core::geometry::IDENTITY_DIRECTION))?;
        let v = core(Volume3D::new(g, std::slice::from_raw_parts(data, n).to_vec()))?;
        *out = Box::into_raw(Box::new(LmkVolume(v)));
        Ok(())
    })
}

/// Writes `shape[3]` (voxels) and `spacing[3]` (mm); either may be NULL.
#[no_mangle]
pub unsafe extern "C" fn lmk_volume_info(v: *const LmkVolume, shape: *mut usize, spacing: *mut f64) -> LmkStatus {
    guard(|| {
        non_null(v, "volume")?;
        let g = &(*v).0.geometry;
        if !shape.is_null() {
            ptr::copy_nonoverlapping(g.shape.as_ptr(), shape, 3);
        }
        if !spacing.is_null() {
            ptr::copy_nonoverlapping(g.spacing.as_ptr(), spacing, 3);
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn lmk_volume_free(v: *mut LmkVolume) {
    if !v.is_null() {
        drop(Box::from_raw(v));
    }
}

/// Loads `plan.json` and `n` checkpoints whose predictions are averaged.
#[no_mangle]
pub unsafe extern "C" fn lmk_model_load(
    plan_path: *const c_char,
    checkpoints: *const *const c_char,
    n: usize,
    out: *mut *mut LmkModel,
) -> LmkStatus {
    guard(|| {
        non_null(out, "out")?;
        non_null(checkpoints, "checkpoints")?;
        if n == 0 {
            return Err(fail(LmkStatus::InvalidArgument, "at least one checkpoint is required"));
        }
        let plan: Plan = core(io::read_json(&path_arg(plan_path, "plan_path")?))?;
        core(plan.validate())?;
        let mut models = Vec::with_capacity(n);
        for i in 0..n {
            let p = path_arg(*checkpoints.add(i), "checkpoint")?;
            let ck = core(Checkpoint::load(&p))?;
            if ck.header.classes != plan.classes {
                return Err(fail(LmkStatus::Config, format!("{} was trained for other classes", p.display())));
            }
            models.push(core(ck.into_model())?);
        }
        *out = Box::into_raw(Box::new(LmkModel { plan, ensemble: Ensemble { models } }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn lmk_model_class_count(m: *const LmkModel) -> usize {
    if m.is_null() {
        0
    } else {
        (*m).plan.classes.len()
    }
}

#[no_mangle]
pub unsafe extern "C" fn lmk_model_free(m: *mut LmkModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Preprocesses `image` with the model's plan, runs sliding-window inference and decodes one
/// landmark per class.
#[no_mangle]
pub unsafe extern "C" fn lmk_predict(
    m: *const LmkModel,
    image: *const LmkVolume,
    case_id: *const c_char,
    out: *mut *mut LmkLandmarks,
) -> LmkStatus {
    guard(|| {
        non_null(m, "model")?;
        non_null(image, "image")?;
        non_null(out, "out")?;
        let id =
            if case_id.is_null() { "case".to_string() } else { path_arg(case_id, "case_id")?.display().to_string() };
        let model = &*m;
        let pred = core(predict_image(&model.ensemble, &(*image).0, &model.plan, &id))?;
        let names = pred.landmarks.names.iter().map(|n| CString::new(n.as_str()).unwrap_or_default()).collect();
        *out = Box::into_raw(Box::new(LmkLandmarks { set: pred.landmarks, names, confidence: pred.confidence }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn lmk_landmarks_count(l: *const LmkLandmarks) -> usize {
    if l.is_null() {
        0
    } else {
        (*l).set.len()
    }
}

/// Landmark `i`: world position in mm (LPS) and confidence; `confidence` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn lmk_landmarks_get(
    l: *const LmkLandmarks,
    i: usize,
    position_mm: *mut f64,
    confidence: *mut f64,
) -> LmkStatus {
    guard(|| {
        non_null(l, "landmarks")?;
        non_null(position_mm, "position_mm")?;
        let l = &*l;
        if i >= l.set.len() {
            return Err(fail(
                LmkStatus::InvalidArgument,
                format!("index {i} out of range for {} landmarks", l.set.len()),
            ));
        }
        ptr::copy_nonoverlapping(l.set.positions_mm[i].as_ptr(), position_mm, 3);
        if !confidence.is_null() {
            *confidence = l.confidence[i];
        }
        Ok(())
    })
}

/// Name of landmark `i`, valid until the handle is freed; NULL when out of range.
#[no_mangle]
pub unsafe extern "C" fn lmk_landmarks_name(l: *const LmkLandmarks, i: usize) -> *const c_char {
    if l.is_null() {
        return ptr::null();
    }
    let l = &*l;
    l.names.get(i).map_or(ptr::null(), |c| c.as_ptr())
}

/// Writes the landmarks in the JSON landmark-file schema.
#[no_mangle]
pub unsafe extern "C" fn lmk_landmarks_write_json(l: *const LmkLandmarks, path: *const c_char) -> LmkStatus {
    guard(|| {
        non_null(l, "landmarks")?;
        let p = path_arg(path, "path")?;
        core(io::landmarks::write(&p, &(*l).set, Some(&(*l).confidence)))
    })
}

#[no_mangle]
pub unsafe extern "C" fn lmk_landmarks_free(l: *mut LmkLandmarks) {
    if !l.is_null() {
        drop(Box::from_raw(l));
    }
}

/// Scores a prediction directory against ground truth. Writes the MRE, its standard
/// deviation and one SDR percentage per threshold into `sdr_out[n_thresholds]`.
/// Errors are in mm, or in voxels when `voxel_size > 0`.
#[no_mangle]
pub unsafe extern "C" fn lmk_evaluate_dirs(
    gt_dir: *const c_char,
    pred_dir: *const c_char,
    thresholds: *const f64,
    n_thresholds: usize,
    voxel_size: f64,
    mre_out: *mut f64,
    std_out: *mut f64,
    sdr_out: *mut f64,
) -> LmkStatus {
    guard(|| {
        let gt = path_arg(gt_dir, "gt_dir")?;
        let pred = path_arg(pred_dir, "pred_dir")?;
        let t: &[f64] = if n_thresholds == 0 {
            &[]
        } else {
            non_null(thresholds, "thresholds")?;
            non_null(sdr_out, "sdr_out")?;
            std::slice::from_raw_parts(thresholds, n_thresholds)
        };
        let vs = (voxel_size > 0.0).then_some(voxel_size);
        let r = core(evaluate_dirs(&gt, &pred, t, None, vs))?;
        if !mre_out.is_null() {
            *mre_out = r.mre;
        }
        if !std_out.is_null() {
            *std_out = r.std;
        }
        if n_thresholds > 0 {
            ptr::copy_nonoverlapping(r.sdr.as_ptr(), sdr_out, n_thresholds);
        }
        Ok(())
    })
}

/// Generates a synthetic phantom dataset; the last `test_cases` cases go to the test split.
#[no_mangle]
pub unsafe extern "C" fn lmk_synth_generate(
    out_dir: *const c_char,
    n_cases: usize,
    test_cases: usize,
    shape: *const usize,
    class_count: usize,
    seed: u64,
    noise: f64,
) -> LmkStatus {
    guard(|| {
        let dir = path_arg(out_dir, "out_dir")?;
        non_null(shape, "shape")?;
        let sh: [usize; 3] = std::slice::from_raw_parts(shape, 3).try_into().expect("3");
        let mut cfg = SynthConfig::new(n_cases, sh, class_count, seed, noise);
        cfg.test_cases = test_cases;
        core(synth_generate(&cfg, &dir).map(|_| ()))
    })
}
