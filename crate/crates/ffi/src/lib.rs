//! C ABI over the partkit core: opaque model and vocabulary handles, plain
//! numeric buffers, and integer status codes. The failing call's message is
//! kept per thread and read back with [`pk_last_error`].
//!
//! Every entry point catches panics and reports them as
//! [`PkStatus::Panic`]; no Rust unwinding crosses the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use partkit::advtrain::{project, Norm};
use partkit::evalmetrics::{human_consistency, mask_iou, AccuracyAveraging, DecisionRecord};
use partkit::mpm::checkpoint::load_model;
use partkit::mpm::{forward_infer, MpmModel};
use partkit::part_data::{BinaryMask, PartVocabulary};
use partkit::pseudolabel::category_filter;
use partkit::tensor::Tensor;
use partkit::Error;

/// Result of every call. Zero is success.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PkStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Io = 5,
    Shape = 6,
    VocabMismatch = 7,
    AllZero = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PkNorm {
    Linf = 0,
    L1 = 1,
    L2 = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PkConsistency {
    pub accuracy_difference: f64,
    pub observed_consistency: f64,
    pub error_consistency: f64,
    pub model_accuracy: f64,
    pub human_accuracy: f64,
}

/// Opaque classifier handle.
pub struct PkModel {
    inner: MpmModel,
}

/// Opaque part vocabulary handle.
pub struct PkVocab {
    inner: PartVocabulary,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> PkStatus {
    match e {
        Error::Config(_) | Error::Spec(_) | Error::Ratio(_) => PkStatus::Config,
        Error::Io { .. } => PkStatus::Io,
        Error::Shape(_) | Error::Dimension(_) => PkStatus::Shape,
        Error::VocabMismatch(_) => PkStatus::VocabMismatch,
        Error::AllZero => PkStatus::AllZero,
        Error::Domain(_) | Error::EmptyInput(_) => PkStatus::InvalidArgument,
        _ => PkStatus::Data,
    }
}

enum Fail {
    Status(PkStatus, String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn null(what: &str) -> Fail {
    Fail::Status(PkStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail::Status(PkStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PkStatus::Ok
        }
        Ok(Err(Fail::Status(s, m))) => {
            set_error(m);
            s
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            PkStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or point to `n` readable values.
unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

/// # Safety
/// `p` must be null or point to `n` writable values.
unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn c_path<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not UTF-8"))?;
    Ok(Path::new(s))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `cap`) and returns its full length in bytes.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn pk_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Projects `delta[0..n]` onto the `norm` ball of radius `epsilon`.
///
/// # Safety
/// `delta` and `out` must each hold `n` doubles; they may alias.
#[no_mangle]
pub unsafe extern "C" fn pk_project(delta: *const f64, n: usize, norm: PkNorm, epsilon: f64, out: *mut f64) -> PkStatus {
    guard(|| {
        if !(epsilon >= 0.0) {
            return Err(invalid(format!("epsilon {epsilon} must be >= 0")));
        }
        let d = slice(delta, n, "delta")?.to_vec();
        let norm = match norm {
            PkNorm::Linf => Norm::Linf,
            PkNorm::L1 => Norm::L1,
            PkNorm::L2 => Norm::L2,
        };
        slice_mut(out, n, "out")?.copy_from_slice(&project(&d, norm, epsilon));
        Ok(())
    })
}

/// IoU of two row-major `height x width` masks (nonzero bytes are set).
///
/// # Safety
/// `a` and `b` must each hold `height * width` bytes; `out` one double.
#[no_mangle]
pub unsafe extern "C" fn pk_mask_iou(a: *const u8, b: *const u8, height: usize, width: usize, out: *mut f64) -> PkStatus {
    guard(|| {
        let n = height.checked_mul(width).ok_or_else(|| invalid("mask size overflows"))?;
        let to_mask = |s: &[u8]| BinaryMask::from_vec(height, width, s.iter().map(|&v| v != 0).collect());
        let ma = to_mask(slice(a, n, "a")?)?;
        let mb = to_mask(slice(b, n, "b")?)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = mask_iou(&ma, &mb)?;
        Ok(())
    })
}

/// Loads a vocabulary from its JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pk_vocab_load(path: *const c_char, out: *mut *mut PkVocab) -> PkStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner: PartVocabulary = partkit::part_data::store::read_json(c_path(path)?)?;
        *out = Box::into_raw(Box::new(PkVocab { inner }));
        Ok(())
    })
}

/// Builds a vocabulary from per-object part counts: object `i` owns the
/// next `counts[i]` part ids.
///
/// # Safety
/// `counts` must hold `num_objects` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pk_vocab_from_counts(counts: *const usize, num_objects: usize, out: *mut *mut PkVocab) -> PkStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mut next = 0;
        let parts_of = slice(counts, num_objects, "counts")?
            .iter()
            .map(|&c| {
                let ids: Vec<usize> = (next..next + c).collect();
                next += c;
                ids
            })
            .collect();
        let inner = PartVocabulary::new(parts_of)?;
        *out = Box::into_raw(Box::new(PkVocab { inner }));
        Ok(())
    })
}

/// Total part categories of `vocab`, or 0 for a null handle.
///
/// # Safety
/// `vocab` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pk_vocab_num_parts(vocab: *const PkVocab) -> usize {
    vocab.as_ref().map_or(0, |v| v.inner.num_parts())
}

/// # Safety
/// `vocab` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pk_vocab_free(vocab: *mut PkVocab) {
    if !vocab.is_null() {
        drop(Box::from_raw(vocab));
    }
}

/// Zeroes the entries of `probs` (one per vocabulary part) that do not
/// belong to `object_id`, writing the result to `out`.
///
/// # Safety
/// `probs` and `out` must each hold `n` doubles; `vocab` must be live.
#[no_mangle]
pub unsafe extern "C" fn pk_category_filter(
    vocab: *const PkVocab,
    probs: *const f64,
    n: usize,
    object_id: usize,
    out: *mut f64,
) -> PkStatus {
    guard(|| {
        let v = vocab.as_ref().ok_or_else(|| null("vocab"))?;
        let filtered = category_filter(slice(probs, n, "probs")?, object_id, &v.inner)?;
        slice_mut(out, n, "out")?.copy_from_slice(&filtered);
        Ok(())
    })
}

/// Error consistency between two binary correctness vectors (nonzero is
/// correct) over the same `n` trials.
///
/// # Safety
/// `model` and `human` must hold `n` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pk_human_consistency(model: *const u8, human: *const u8, n: usize, out: *mut PkConsistency) -> PkStatus {
    guard(|| {
        let rec = |s: &[u8]| -> Vec<DecisionRecord> {
            s.iter()
                .enumerate()
                .map(|(i, &c)| DecisionRecord {
                    sample_id: i.to_string(),
                    condition: String::new(),
                    decision: usize::from(c == 0),
                    correct: c != 0,
                    truth: None,
                })
                .collect()
        };
        let r = human_consistency(&rec(slice(model, n, "model")?), &rec(slice(human, n, "human")?), AccuracyAveraging::Samples)?;
        let o = out.as_mut().ok_or_else(|| null("out"))?;
        *o = PkConsistency {
            accuracy_difference: r.accuracy_difference,
            observed_consistency: r.observed_consistency,
            error_consistency: r.error_consistency,
            model_accuracy: r.model_accuracy,
            human_accuracy: r.human_accuracy,
        };
        Ok(())
    })
}

/// Loads a checkpoint written by the `train` or `strip` commands.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pk_model_load(path: *const c_char, out: *mut *mut PkModel) -> PkStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = load_model(c_path(path)?)?;
        *out = Box::into_raw(Box::new(PkModel { inner }));
        Ok(())
    })
}

/// Side of the square input images, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pk_model_image_size(model: *const PkModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.spec.image_size)
}

/// Number of output classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pk_model_num_classes(model: *const PkModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.spec.num_classes)
}

/// Class logits for `batch` images laid out `[batch, 3, S, S]` in `[0, 1]`,
/// written row-major to `logits` (`batch * num_classes` doubles).
///
/// # Safety
/// Buffers must hold the stated number of doubles; `model` must be live.
#[no_mangle]
pub unsafe extern "C" fn pk_model_forward(model: *const PkModel, images: *const f64, batch: usize, logits: *mut f64) -> PkStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        if batch == 0 {
            return Err(invalid("batch must be positive"));
        }
        let s = m.spec.image_size;
        let x = Tensor::from_vec(&[batch, 3, s, s], slice(images, batch * 3 * s * s, "images")?.to_vec())?;
        let y = forward_infer(m, &x)?;
        slice_mut(logits, batch * m.spec.num_classes, "logits")?.copy_from_slice(y.data());
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pk_model_free(model: *mut PkModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
