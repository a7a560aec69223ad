//! C ABI for shiftlab.
//!
//! Every fallible function returns a [`ShiftlabStatus`]; on failure the
//! message is available from [`shiftlab_last_error`] on the same thread.
//! Corpora and checkpoints cross the boundary as opaque handles that the
//! caller releases with the matching `_free` function. Panics never unwind
//! into C; they are reported as `SHIFTLAB_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ndarray::ArrayView2;
use shiftlab::corpus::{generate_corpus, Corpus, Split};
use shiftlab::eval::{evaluate_examples, exact_match, rouge_l, EvalSettings};
use shiftlab::model::checkpoint::Checkpoint;
use shiftlab::model::TokenId;
use shiftlab::shift::{kl_rows, suppress_row, KL_EPS};
use shiftlab::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftlabStatus {
    Ok = 0,
    InvalidArgument = 1,
    NullPointer = 2,
    UnknownWord = 3,
    SequenceTooLong = 4,
    Io = 5,
    Checkpoint = 6,
    CorpusFormat = 7,
    /// Degenerate rows, non-finite values or shape mismatches.
    Numeric = 8,
    NotMemorized = 9,
    Panic = 10,
}

pub const SHIFTLAB_SPLIT_FORGET: u32 = 0;
pub const SHIFTLAB_SPLIT_NEIGHBOUR: u32 = 1;
pub const SHIFTLAB_SPLIT_GENERAL: u32 = 2;

/// Opaque corpus handle.
pub struct ShiftlabCorpus(Corpus);

/// Opaque handle to a loaded checkpoint: base weights plus adapters, if any.
pub struct ShiftlabModel(Checkpoint);

/// Metrics of one split.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ShiftlabSplitMetrics {
    pub records: usize,
    pub exact_match: f64,
    pub rouge_l: f64,
    pub tr_at_k: f64,
    pub el_n: f64,
    pub el_forgotten: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(ShiftlabStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidArgument(_) => ShiftlabStatus::InvalidArgument,
            Error::UnknownWord(_) => ShiftlabStatus::UnknownWord,
            Error::SequenceTooLong { .. } => ShiftlabStatus::SequenceTooLong,
            Error::DegenerateRow { .. } | Error::NonFinite(_) | Error::ShapeMismatch(_) => ShiftlabStatus::Numeric,
            Error::NotMemorized { .. } => ShiftlabStatus::NotMemorized,
            Error::Checkpoint { .. } => ShiftlabStatus::Checkpoint,
            Error::CorpusFormat { .. } => ShiftlabStatus::CorpusFormat,
            Error::Io { .. } => ShiftlabStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(ShiftlabStatus::InvalidArgument, msg.into())
}

fn null(what: &str) -> Failure {
    Failure(ShiftlabStatus::NullPointer, format!("{what} is null"))
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ShiftlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            ShiftlabStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            ShiftlabStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(Path::new(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

fn split_arg(split: u32) -> Result<Split, Failure> {
    Split::ALL.get(split as usize).copied().ok_or_else(|| invalid(format!("unknown split {split}")))
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call into this library on the thread.
#[no_mangle]
pub extern "C" fn shiftlab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn shiftlab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Generate a synthetic corpus. `*out` receives a new handle.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn shiftlab_corpus_generate(
    seed: u64,
    entities: usize,
    attributes: usize,
    out: *mut *mut ShiftlabCorpus,
) -> ShiftlabStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let corpus = generate_corpus(seed, entities, attributes)?;
        *out = Box::into_raw(Box::new(ShiftlabCorpus(corpus)));
        Ok(())
    })
}

/// Load a corpus file written by `shiftlab gen`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn shiftlab_corpus_load(path: *const c_char, out: *mut *mut ShiftlabCorpus) -> ShiftlabStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let corpus = Corpus::load(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(ShiftlabCorpus(corpus)));
        Ok(())
    })
}

/// # Safety
/// `corpus` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn shiftlab_corpus_save(corpus: *const ShiftlabCorpus, path: *const c_char) -> ShiftlabStatus {
    guard(|| {
        let corpus = corpus.as_ref().ok_or_else(|| null("corpus"))?;
        corpus.0.save(path_arg(path)?)?;
        Ok(())
    })
}

/// Vocabulary size of the corpus, 0 for a null handle.
///
/// # Safety
/// `corpus` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn shiftlab_corpus_vocab_size(corpus: *const ShiftlabCorpus) -> usize {
    corpus.as_ref().map_or(0, |c| c.0.vocab.len())
}

/// Number of QA records in `split` (one of the `SHIFTLAB_SPLIT_*`
/// constants), 0 for a null handle or unknown split.
///
/// # Safety
/// `corpus` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn shiftlab_corpus_record_count(corpus: *const ShiftlabCorpus, split: u32) -> usize {
    match (corpus.as_ref(), Split::ALL.get(split as usize)) {
        (Some(c), Some(&s)) => c.0.record_indices(s).len(),
        _ => 0,
    }
}

/// # Safety
/// `corpus` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn shiftlab_corpus_free(corpus: *mut ShiftlabCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Load a checkpoint written by `shiftlab pretrain` or `shiftlab unlearn`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn shiftlab_model_load(path: *const c_char, out: *mut *mut ShiftlabModel) -> ShiftlabStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ck = Checkpoint::load(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(ShiftlabModel(ck)));
        Ok(())
    })
}

/// Nonzero if the checkpoint carries trained adapters.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn shiftlab_model_has_adapters(model: *const ShiftlabModel) -> i32 {
    model.as_ref().is_some_and(|m| m.0.adapters.is_some()) as i32
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn shiftlab_model_free(model: *mut ShiftlabModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

fn matched<'a>(model: &'a ShiftlabModel, corpus: &ShiftlabCorpus) -> Result<&'a Checkpoint, Failure> {
    let ck = &model.0;
    if ck.corpus_hash != corpus.0.hash() {
        return Err(invalid("checkpoint was trained on a different corpus"));
    }
    if corpus.0.max_len() > ck.params.config.max_seq {
        return Err(Error::SequenceTooLong { len: corpus.0.max_len(), max: ck.params.config.max_seq }.into());
    }
    Ok(ck)
}

/// Teacher-forced exact-match rate of the model on one split.
///
/// # Safety
/// Handles must be live and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn shiftlab_model_exact_match(
    model: *const ShiftlabModel,
    corpus: *const ShiftlabCorpus,
    split: u32,
    out: *mut f64,
) -> ShiftlabStatus {
    guard(|| {
        let (model, corpus) =
            (model.as_ref().ok_or_else(|| null("model"))?, corpus.as_ref().ok_or_else(|| null("corpus"))?);
        let out = out_arg(out, "out")?;
        let ck = matched(model, corpus)?;
        let examples = corpus.0.examples(split_arg(split)?)?;
        *out = exact_match(&ck.params, &ck.active_adapters(), &examples)?;
        Ok(())
    })
}

/// Full generation-based metrics of one split, with top-`k` token recall
/// and `el_n`-gram extraction windows.
///
/// # Safety
/// Handles must be live and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn shiftlab_model_evaluate(
    model: *const ShiftlabModel,
    corpus: *const ShiftlabCorpus,
    split: u32,
    k: usize,
    el_n: usize,
    out: *mut ShiftlabSplitMetrics,
) -> ShiftlabStatus {
    guard(|| {
        let (model, corpus) =
            (model.as_ref().ok_or_else(|| null("model"))?, corpus.as_ref().ok_or_else(|| null("corpus"))?);
        let out = out_arg(out, "out")?;
        let ck = matched(model, corpus)?;
        let examples = corpus.0.examples(split_arg(split)?)?;
        let m = evaluate_examples(&ck.params, &ck.active_adapters(), &corpus.0, &examples, EvalSettings { k, el_n })?;
        *out = ShiftlabSplitMetrics {
            records: m.records,
            exact_match: m.exact_match,
            rouge_l: m.rouge_l,
            tr_at_k: m.tr_at_k,
            el_n: m.el_n,
            el_forgotten: m.el_forgotten,
        };
        Ok(())
    })
}

/// Suppress the flagged columns of one attention row by `lambda` and
/// renormalize. `mask[j]` nonzero flags column `j`. Writes `n` values to
/// `out`, which may alias `row`.
///
/// # Safety
/// `row` and `out` must hold `n` doubles, `mask` `n` bytes.
#[no_mangle]
pub unsafe extern "C" fn shiftlab_suppress_row(
    row: *const f64,
    mask: *const u8,
    n: usize,
    lambda: f64,
    out: *mut f64,
) -> ShiftlabStatus {
    guard(|| {
        let r = slice_arg(row, n, "row")?.to_vec();
        let m: Vec<bool> = slice_arg(mask, n, "mask")?.iter().map(|&b| b != 0).collect();
        if n > 0 && out.is_null() {
            return Err(null("out"));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(invalid(format!("lambda {lambda} outside [0, 1]")));
        }
        let shifted = suppress_row(&r, &m, lambda)
            .ok_or_else(|| Failure(ShiftlabStatus::Numeric, "row has no mass left to renormalize".into()))?;
        if n > 0 {
            ptr::copy_nonoverlapping(shifted.as_ptr(), out, n);
        }
        Ok(())
    })
}

/// Mean row-wise KL(P || Q) over `rows` rows of `cols` probabilities each,
/// row-major, with the library's epsilon smoothing.
///
/// # Safety
/// `p` and `q` must each hold `rows * cols` doubles; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn shiftlab_kl(
    p: *const f64,
    q: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
) -> ShiftlabStatus {
    guard(|| {
        let n = rows.checked_mul(cols).ok_or_else(|| invalid("rows * cols overflows"))?;
        let p = ArrayView2::from_shape((rows, cols), slice_arg(p, n, "p")?).map_err(|e| invalid(e.to_string()))?;
        let q = ArrayView2::from_shape((rows, cols), slice_arg(q, n, "q")?).map_err(|e| invalid(e.to_string()))?;
        let out = out_arg(out, "out")?;
        *out = kl_rows(p, q, KL_EPS)?;
        Ok(())
    })
}

/// ROUGE-L F-measure of a candidate token sequence against a reference.
///
/// # Safety
/// `candidate` must hold `n_candidate` ids, `reference` `n_reference` ids.
#[no_mangle]
pub unsafe extern "C" fn shiftlab_rouge_l(
    candidate: *const u32,
    n_candidate: usize,
    reference: *const u32,
    n_reference: usize,
    out: *mut f64,
) -> ShiftlabStatus {
    guard(|| {
        let c: &[TokenId] = slice_arg(candidate, n_candidate, "candidate")?;
        let r: &[TokenId] = slice_arg(reference, n_reference, "reference")?;
        let out = out_arg(out, "out")?;
        *out = rouge_l(c, r)?;
        Ok(())
    })
}
