//! C ABI over the branchscope core.
//!
//! Every fallible function returns a [`BsStatus`]; on failure the message
//! is available from [`bs_last_error`] on the same thread until the next
//! call. Models are opaque [`BsModel`] handles released with
//! [`bs_model_free`]. Output buffers are caller-allocated and their
//! capacity is passed alongside.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use branchscope::attribution::softmax_shares;
use branchscope::dataio::{ActivationMatrix, ComponentId, Role};
use branchscope::evaluation::{
    classify_archetype, eer, ArchetypeLabel, ArchetypeThresholds, ScoreSet,
};
use branchscope::gbdt::TreeEnsemble;
use branchscope::pipeline::{run_pipeline, PipelineConfig, PipelineError};
use branchscope::spectral::{eigenvalues_sym, signature, SpectralError, SquareMatrix};
use branchscope::treeshap::TreeExplainer;

/// Status codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// An output buffer is too small; the required length is reported.
    BufferTooSmall = 3,
    Io = 4,
    Format = 5,
    Compute = 6,
    Panic = 7,
}

/// Archetype codes in the same order as the five labels.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BsArchetype {
    EffectiveSpecialization = 0,
    EffectiveConsensus = 1,
    IneffectiveConsensus = 2,
    IneffectiveSpecialization = 3,
    FlawedSpecialization = 4,
}

impl From<ArchetypeLabel> for BsArchetype {
    fn from(l: ArchetypeLabel) -> Self {
        match l {
            ArchetypeLabel::EffectiveSpecialization => Self::EffectiveSpecialization,
            ArchetypeLabel::EffectiveConsensus => Self::EffectiveConsensus,
            ArchetypeLabel::IneffectiveConsensus => Self::IneffectiveConsensus,
            ArchetypeLabel::IneffectiveSpecialization => Self::IneffectiveSpecialization,
            ArchetypeLabel::FlawedSpecialization => Self::FlawedSpecialization,
        }
    }
}

/// Opaque trained meta-classifier.
pub struct BsModel {
    ensemble: TreeEnsemble,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(BsStatus, String);

impl Failure {
    fn arg(msg: impl Into<String>) -> Self {
        Failure(BsStatus::InvalidArgument, msg.into())
    }

    fn compute(e: impl std::fmt::Display) -> Self {
        Failure(BsStatus::Compute, e.to_string())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let status = match &e {
            PipelineError::ConfigInvalid(_) => BsStatus::InvalidArgument,
            PipelineError::Io { .. } => BsStatus::Io,
            PipelineError::Format { .. } => BsStatus::Format,
            _ => BsStatus::Compute,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> BsStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BsStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            BsStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(BsStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

unsafe fn input<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, name)?;
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a>(
    p: *mut f64,
    cap: usize,
    needed: usize,
    name: &str,
) -> Result<&'a mut [f64], Failure> {
    non_null(p, name)?;
    if cap < needed {
        return Err(Failure(
            BsStatus::BufferTooSmall,
            format!("{name} holds {cap} values, {needed} required"),
        ));
    }
    Ok(slice::from_raw_parts_mut(p, needed))
}

unsafe fn text<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    non_null(p, name)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::arg(format!("{name} is not valid UTF-8")))
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn bs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a model from a `model.json` file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bs_model_load(path: *const c_char, out: *mut *mut BsModel) -> BsStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = text(path, "path")?;
        let json = std::fs::read_to_string(path)
            .map_err(|e| Failure(BsStatus::Io, format!("{path}: {e}")))?;
        let ensemble =
            TreeEnsemble::from_json(&json).map_err(|e| Failure(BsStatus::Format, e.to_string()))?;
        *out = Box::into_raw(Box::new(BsModel { ensemble }));
        Ok(())
    })
}

/// Parses a model from JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bs_model_from_json(
    json: *const c_char,
    out: *mut *mut BsModel,
) -> BsStatus {
    guard(|| {
        non_null(out, "out")?;
        let ensemble = TreeEnsemble::from_json(text(json, "json")?)
            .map_err(|e| Failure(BsStatus::Format, e.to_string()))?;
        *out = Box::into_raw(Box::new(BsModel { ensemble }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bs_model_free(model: *mut BsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bs_model_n_classes(model: *const BsModel) -> usize {
    model.as_ref().map_or(0, |m| m.ensemble.n_classes())
}

/// Number of input features, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bs_model_n_features(model: *const BsModel) -> usize {
    model.as_ref().map_or(0, |m| m.ensemble.feature_count)
}

/// Class probabilities for one feature row.
///
/// # Safety
/// `x` must hold `n_features` values and `out` `out_cap` values.
#[no_mangle]
pub unsafe extern "C" fn bs_model_predict_proba(
    model: *const BsModel,
    x: *const f64,
    n_features: usize,
    out: *mut f64,
    out_cap: usize,
) -> BsStatus {
    guard(|| {
        non_null(model, "model")?;
        let m = &(*model).ensemble;
        let x = input(x, n_features, "x")?;
        let p = m
            .predict_proba(x)
            .map_err(|e| Failure::arg(e.to_string()))?;
        output(out, out_cap, p.len(), "out")?.copy_from_slice(&p);
        Ok(())
    })
}

/// TreeSHAP values of one class margin for one row.
///
/// # Safety
/// `x` must hold `n_features` values, `phi` `phi_cap` values and
/// `base_value` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bs_model_shap(
    model: *const BsModel,
    x: *const f64,
    n_features: usize,
    class_index: usize,
    phi: *mut f64,
    phi_cap: usize,
    base_value: *mut f64,
) -> BsStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(base_value, "base_value")?;
        let m = &(*model).ensemble;
        let x = input(x, n_features, "x")?;
        let ex = TreeExplainer::new(m).map_err(Failure::compute)?;
        let a = ex
            .explain_class("", x, class_index)
            .map_err(|e| Failure::arg(e.to_string()))?;
        output(phi, phi_cap, a.phi.len(), "phi")?.copy_from_slice(&a.phi);
        *base_value = a.base_value;
        Ok(())
    })
}

/// Top-`k` covariance eigenvalues of a row-major `rows × cols` activation
/// matrix (features by samples).
///
/// # Safety
/// `values` must hold `rows * cols` values and `out` `k` values.
#[no_mangle]
pub unsafe extern "C" fn bs_signature(
    values: *const f64,
    rows: usize,
    cols: usize,
    k: usize,
    out: *mut f64,
) -> BsStatus {
    guard(|| {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Failure::arg("rows * cols overflows"))?;
        let v = input(values, n, "values")?.to_vec();
        let a = ActivationMatrix::new(ComponentId::new("ffi", Role::Global), rows, cols, v)
            .map_err(|e| Failure::arg(e.to_string()))?;
        let sig = signature(&a, k).map_err(|e| Failure::arg(e.to_string()))?;
        output(out, k, k, "out")?.copy_from_slice(&sig.values);
        Ok(())
    })
}

/// Eigenvalues of a symmetric row-major `n × n` matrix, descending.
///
/// # Safety
/// `matrix` must hold `n * n` values and `out` `n` values.
#[no_mangle]
pub unsafe extern "C" fn bs_eigenvalues_sym(
    matrix: *const f64,
    n: usize,
    out: *mut f64,
) -> BsStatus {
    guard(|| {
        let len = n
            .checked_mul(n)
            .ok_or_else(|| Failure::arg("n * n overflows"))?;
        let m = SquareMatrix::from_row_major(n, input(matrix, len, "matrix")?.to_vec())
            .map_err(|e| Failure::arg(e.to_string()))?;
        let ev = eigenvalues_sym(&m).map_err(|e| match e {
            SpectralError::NoConvergence(_) => Failure::compute(e),
            _ => Failure::arg(e.to_string()),
        })?;
        output(out, n, n, "out")?.copy_from_slice(&ev);
        Ok(())
    })
}

/// Equal error rate (fraction) and its threshold.
///
/// # Safety
/// `bona`/`spoof` must hold `n_bona`/`n_spoof` values; outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn bs_eer(
    bona: *const f64,
    n_bona: usize,
    spoof: *const f64,
    n_spoof: usize,
    eer_out: *mut f64,
    threshold_out: *mut f64,
) -> BsStatus {
    guard(|| {
        non_null(eer_out, "eer_out")?;
        non_null(threshold_out, "threshold_out")?;
        let set = ScoreSet {
            bona_scores: input(bona, n_bona, "bona")?.to_vec(),
            spoof_scores: input(spoof, n_spoof, "spoof")?.to_vec(),
        };
        let r = eer(&set).map_err(|e| Failure::arg(e.to_string()))?;
        *eer_out = r.eer;
        *threshold_out = r.threshold;
        Ok(())
    })
}

/// Softmax shares of `n` block confidence scores.
///
/// # Safety
/// `scores` and `out` must each hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn bs_shares(scores: *const f64, n: usize, out: *mut f64) -> BsStatus {
    guard(|| {
        let s =
            softmax_shares(input(scores, n, "scores")?).map_err(|e| Failure::arg(e.to_string()))?;
        output(out, n, n, "out")?.copy_from_slice(&s);
        Ok(())
    })
}

/// Quadrant rule with the default thresholds (EER 1 % / 10 %, share 20 %).
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bs_classify_archetype(
    eer_percent: f64,
    dominant_share_percent: f64,
    out: *mut BsArchetype,
) -> BsStatus {
    guard(|| {
        non_null(out, "out")?;
        let l = classify_archetype(
            eer_percent,
            dominant_share_percent,
            &ArchetypeThresholds::default(),
        )
        .map_err(|e| Failure::arg(e.to_string()))?;
        *out = l.into();
        Ok(())
    })
}

/// Canonical name of an archetype code, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bs_archetype_name(code: BsArchetype) -> *const c_char {
    let s: &'static str = match code {
        BsArchetype::EffectiveSpecialization => "EFFECTIVE_SPECIALIZATION\0",
        BsArchetype::EffectiveConsensus => "EFFECTIVE_CONSENSUS\0",
        BsArchetype::IneffectiveConsensus => "INEFFECTIVE_CONSENSUS\0",
        BsArchetype::IneffectiveSpecialization => "INEFFECTIVE_SPECIALIZATION\0",
        BsArchetype::FlawedSpecialization => "FLAWED_SPECIALIZATION\0",
    };
    s.as_ptr().cast()
}

/// Runs the full pipeline described by a JSON config file and writes its
/// reports. `n_records`, when non-null, receives the number of attacks.
///
/// # Safety
/// `config_path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bs_run_pipeline(
    config_path: *const c_char,
    n_records: *mut usize,
) -> BsStatus {
    guard(|| {
        let cfg = PipelineConfig::load(Path::new(text(config_path, "config_path")?))?;
        let records = run_pipeline(&cfg)?;
        if !n_records.is_null() {
            *n_records = records.len();
        }
        Ok(())
    })
}
