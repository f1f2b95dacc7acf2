//! C interface to retinakit: opaque handles for datasets and trained
//! models, metric functions on raw buffers, integer status codes and a
//! per-thread last-error message.
//!
//! Every function returns an [`RkStatus`]; results go through out
//! pointers. Handles are created by `rk_*_new` / `rk_*_load` and released
//! with the matching `rk_*_free` (which accepts null).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use retinakit::data::{
    load_dataset, synthesize_multidisease, synthesize_phantom, Dataset, DatasetKind, DiseasePhantomSpec, GradeMode,
    PhantomSpec,
};
use retinakit::grading::{load_grading_checkpoint, GradeModel};
use retinakit::metrics::{self, MetricError};
use retinakit::segnet::{load_checkpoint, prepare_inputs, SegModel};
use retinakit::transfer::{load_transfer_checkpoint, TransferSystem};

/// Status codes returned by every function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RkStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    DataError = 4,
    Io = 5,
    /// A metric is undefined for the input (e.g. a single class).
    Undefined = 6,
    BufferTooSmall = 7,
    Runtime = 8,
    Panic = 9,
}

/// Collection of fundus samples.
pub struct RkDataset(Dataset);
/// Trained segmentation network.
pub struct RkSegModel(SegModel);
/// Trained grading classifier.
pub struct RkGradeModel(GradeModel);
/// Trained source/target/discriminator system.
pub struct RkTransferSystem(TransferSystem);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(text).expect("nul bytes removed")));
}

struct Failure(RkStatus, String);

impl From<MetricError> for Failure {
    fn from(e: MetricError) -> Self {
        let code = match e {
            MetricError::DegenerateLabels(_) | MetricError::DegenerateAgreement | MetricError::Empty => {
                RkStatus::Undefined
            }
            _ => RkStatus::InvalidArgument,
        };
        Failure(code, e.to_string())
    }
}

fn fail<T>(code: RkStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(code, msg.into()))
}

/// Status for an error whose source type exposes a data/config split.
fn classify(msg: String, data: bool, config: bool) -> Failure {
    let code = if data {
        RkStatus::DataError
    } else if config {
        RkStatus::InvalidConfig
    } else {
        RkStatus::Runtime
    };
    Failure(code, msg)
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RkStatus::Ok,
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("panic inside retinakit");
            RkStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return fail(RkStatus::NullPointer, format!("{what} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(RkStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return fail(RkStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(RkStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure(RkStatus::NullPointer, format!("{what} is null")))
}

/// Length in bytes of the last error message on this thread, excluding
/// the terminating nul; 0 when there is none.
#[no_mangle]
pub extern "C" fn rk_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(0, |s| s.as_bytes().len()))
}

/// Copy the last error message into `buf` (nul terminated, truncated to
/// `len - 1` bytes). Returns the number of bytes written without the nul.
///
/// # Safety
/// `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn rk_last_error_message(buf: *mut c_char, len: usize) -> usize {
    if buf.is_null() || len == 0 {
        return 0;
    }
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_ref().map_or(&[][..], |s| s.as_bytes());
        let n = bytes.len().min(len - 1);
        ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
        *buf.add(n) = 0;
        n
    })
}

/// Toolkit version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn rk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Lesion phantom with the standard lesion mix. `balanced` cycles the
/// grades 0..4 over the images.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn rk_phantom_new(
    num_images: usize,
    image_size: usize,
    seed: u64,
    balanced: bool,
    out_dataset: *mut *mut RkDataset,
) -> RkStatus {
    guard(|| {
        let slot = out(out_dataset, "out_dataset")?;
        let spec = PhantomSpec {
            grade_mode: if balanced {
                GradeMode::Balanced
            } else {
                GradeMode::FromCounts
            },
            ..PhantomSpec::standard(num_images, image_size, seed)
        };
        let (ds, _) = synthesize_phantom(&spec).map_err(|e| Failure(RkStatus::InvalidArgument, e.to_string()))?;
        *slot = Box::into_raw(Box::new(RkDataset(ds)));
        Ok(())
    })
}

/// Multi-disease phantom with eight disease labels per image.
///
/// # Safety
/// `out_dataset` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn rk_disease_phantom_new(
    num_images: usize,
    image_size: usize,
    seed: u64,
    out_dataset: *mut *mut RkDataset,
) -> RkStatus {
    guard(|| {
        let slot = out(out_dataset, "out_dataset")?;
        let (ds, _) = synthesize_multidisease(&DiseasePhantomSpec::new(num_images, image_size, seed))
            .map_err(|e| Failure(RkStatus::InvalidArgument, e.to_string()))?;
        *slot = Box::into_raw(Box::new(RkDataset(ds)));
        Ok(())
    })
}

/// Load a dataset in the standard layout. `kind` is one of `seg-set`,
/// `grade-set`, `multi-disease`, `phantom`.
///
/// # Safety
/// `root` and `kind` must be nul-terminated strings; `out_dataset` a valid
/// handle slot.
#[no_mangle]
pub unsafe extern "C" fn rk_dataset_load(
    root: *const c_char,
    kind: *const c_char,
    out_dataset: *mut *mut RkDataset,
) -> RkStatus {
    guard(|| {
        let slot = out(out_dataset, "out_dataset")?;
        let root = PathBuf::from(str_arg(root, "root")?);
        let kind: DatasetKind = str_arg(kind, "kind")?
            .parse()
            .map_err(|e: String| Failure(RkStatus::InvalidArgument, e))?;
        let ds = load_dataset(&root, kind).map_err(|e| Failure(RkStatus::DataError, e.to_string()))?;
        *slot = Box::into_raw(Box::new(RkDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `dataset` must be a live handle; `out_len` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rk_dataset_len(dataset: *const RkDataset, out_len: *mut usize) -> RkStatus {
    guard(|| {
        *out(out_len, "out_len")? = handle(dataset, "dataset")?.0.len();
        Ok(())
    })
}

/// Grade of sample `index`, or -1 when it has none.
///
/// # Safety
/// `dataset` must be a live handle; `out_grade` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rk_dataset_grade(dataset: *const RkDataset, index: usize, out_grade: *mut i32) -> RkStatus {
    guard(|| {
        let ds = &handle(dataset, "dataset")?.0;
        let s = ds
            .samples
            .get(index)
            .ok_or_else(|| Failure(RkStatus::InvalidArgument, format!("index {index} of {}", ds.len())))?;
        *out(out_grade, "out_grade")? = s.grade.map_or(-1, i32::from);
        Ok(())
    })
}

/// # Safety
/// `dataset` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rk_dataset_free(dataset: *mut RkDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

fn sample(ds: &Dataset, index: usize) -> Result<Dataset, Failure> {
    if index >= ds.len() {
        return fail(RkStatus::InvalidArgument, format!("index {index} of {}", ds.len()));
    }
    Ok(ds.subset(&[index], "ffi"))
}

/// # Safety
/// `path` must be a nul-terminated string; `out_model` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn rk_seg_model_load(path: *const c_char, out_model: *mut *mut RkSegModel) -> RkStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        let p = PathBuf::from(str_arg(path, "path")?);
        let m = load_checkpoint(&p).map_err(|e| {
            let data = matches!(e, retinakit::segnet::SegError::Archive(_));
            classify(e.to_string(), data, !data)
        })?;
        *slot = Box::into_raw(Box::new(RkSegModel(m)));
        Ok(())
    })
}

/// Channels and side length of the probability maps a model produces.
///
/// # Safety
/// `model` must be a live handle; out pointers valid.
#[no_mangle]
pub unsafe extern "C" fn rk_seg_model_output_shape(
    model: *const RkSegModel,
    out_channels: *mut usize,
    out_size: *mut usize,
) -> RkStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        *out(out_channels, "out_channels")? = m.config.out_channels;
        *out(out_size, "out_size")? = m.config.input_size;
        Ok(())
    })
}

/// Per-pixel lesion probabilities for sample `index`, written to `probs`
/// as `[channels][size][size]`. `len` is the capacity of `probs`.
///
/// # Safety
/// Handles must be live; `probs` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn rk_seg_model_predict(
    model: *const RkSegModel,
    dataset: *const RkDataset,
    index: usize,
    probs: *mut f32,
    len: usize,
) -> RkStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let one = sample(&handle(dataset, "dataset")?.0, index)?;
        let (images, _) =
            prepare_inputs(&one, m.config.input_size, None).map_err(|e| Failure(RkStatus::DataError, e.to_string()))?;
        let p = m
            .predict(&images, 1)
            .map_err(|e| Failure(RkStatus::Runtime, e.to_string()))?;
        if probs.is_null() {
            return fail(RkStatus::NullPointer, "probs is null");
        }
        if len < p.len() {
            return fail(RkStatus::BufferTooSmall, format!("need {} floats, got {len}", p.len()));
        }
        ptr::copy_nonoverlapping(p.data().as_ptr(), probs, p.len());
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rk_seg_model_free(model: *mut RkSegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `path` must be a nul-terminated string; `out_model` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn rk_grade_model_load(path: *const c_char, out_model: *mut *mut RkGradeModel) -> RkStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        let p = PathBuf::from(str_arg(path, "path")?);
        let m = load_grading_checkpoint(&p).map_err(|e| {
            let data = matches!(e, retinakit::grading::GradeError::Archive(_));
            classify(e.to_string(), data, !data)
        })?;
        *slot = Box::into_raw(Box::new(RkGradeModel(m)));
        Ok(())
    })
}

/// Predicted grade of sample `index`; `logits` (may be null) receives the
/// five class logits.
///
/// # Safety
/// Handles must be live; `logits` null or 5 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn rk_grade_model_predict(
    model: *const RkGradeModel,
    dataset: *const RkDataset,
    index: usize,
    out_grade: *mut u8,
    logits: *mut f64,
) -> RkStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let one = sample(&handle(dataset, "dataset")?.0, index)?;
        let grade = out(out_grade, "out_grade")?;
        let pred = m.predict(&one).map_err(|e| Failure(RkStatus::Runtime, e.to_string()))?;
        *grade = pred[0].grade;
        if !logits.is_null() {
            ptr::copy_nonoverlapping(pred[0].logits.as_ptr(), logits, 5);
        }
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rk_grade_model_free(model: *mut RkGradeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `path` must be a nul-terminated string; `out_system` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn rk_transfer_load(path: *const c_char, out_system: *mut *mut RkTransferSystem) -> RkStatus {
    guard(|| {
        let slot = out(out_system, "out_system")?;
        let p = PathBuf::from(str_arg(path, "path")?);
        let s = load_transfer_checkpoint(&p).map_err(|e| {
            let data = matches!(e, retinakit::transfer::TransferError::Archive(_));
            classify(e.to_string(), data, !data)
        })?;
        *slot = Box::into_raw(Box::new(RkTransferSystem(s.0)));
        Ok(())
    })
}

/// Eight disease probabilities for sample `index`.
///
/// # Safety
/// Handles must be live; `probs` must hold 8 doubles.
#[no_mangle]
pub unsafe extern "C" fn rk_transfer_predict(
    system: *const RkTransferSystem,
    dataset: *const RkDataset,
    index: usize,
    probs: *mut f64,
) -> RkStatus {
    guard(|| {
        let s = &handle(system, "system")?.0;
        let one = sample(&handle(dataset, "dataset")?.0, index)?;
        if probs.is_null() {
            return fail(RkStatus::NullPointer, "probs is null");
        }
        let p = s.predict(&one).map_err(|e| Failure(RkStatus::Runtime, e.to_string()))?;
        ptr::copy_nonoverlapping(p[0].as_ptr(), probs, p[0].len());
        Ok(())
    })
}

/// # Safety
/// `system` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rk_transfer_free(system: *mut RkTransferSystem) {
    if !system.is_null() {
        drop(Box::from_raw(system));
    }
}

fn bools(v: &[u8]) -> Vec<bool> {
    v.iter().map(|&b| b != 0).collect()
}

fn labels(v: &[u32]) -> Vec<usize> {
    v.iter().map(|&x| x as usize).collect()
}

/// Dice of `pred >= threshold` against the binary mask `gt` (nonzero =
/// lesion), both of length `n`.
///
/// # Safety
/// `pred` and `gt` must hold `n` elements; `out_value` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rk_dice(
    pred: *const f64,
    gt: *const u8,
    n: usize,
    threshold: f64,
    out_value: *mut f64,
) -> RkStatus {
    guard(|| {
        let v = metrics::dice(slice_arg(pred, n, "pred")?, &bools(slice_arg(gt, n, "gt")?), threshold)?;
        *out(out_value, "out_value")? = v;
        Ok(())
    })
}

/// Pooled AUC-ROC of `scores` against binary `labels`.
///
/// # Safety
/// Buffers must hold `n` elements; `out_value` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rk_auc_roc(scores: *const f64, labels: *const u8, n: usize, out_value: *mut f64) -> RkStatus {
    guard(|| {
        let v = metrics::auc_roc(slice_arg(scores, n, "scores")?, &bools(slice_arg(labels, n, "labels")?))?;
        *out(out_value, "out_value")? = v;
        Ok(())
    })
}

/// Quadratic weighted kappa of ratings in `0..k`.
///
/// # Safety
/// Buffers must hold `n` elements; `out_value` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rk_quadratic_weighted_kappa(
    pred: *const u32,
    gt: *const u32,
    n: usize,
    k: usize,
    out_value: *mut f64,
) -> RkStatus {
    guard(|| {
        let v = metrics::quadratic_weighted_kappa(
            &labels(slice_arg(pred, n, "pred")?),
            &labels(slice_arg(gt, n, "gt")?),
            k,
        )?;
        *out(out_value, "out_value")? = v;
        Ok(())
    })
}

/// Unweighted Cohen's kappa.
///
/// # Safety
/// Buffers must hold `n` elements; `out_value` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rk_cohens_kappa(pred: *const u32, gt: *const u32, n: usize, out_value: *mut f64) -> RkStatus {
    guard(|| {
        let v = metrics::cohens_kappa(&labels(slice_arg(pred, n, "pred")?), &labels(slice_arg(gt, n, "gt")?))?;
        *out(out_value, "out_value")? = v;
        Ok(())
    })
}
