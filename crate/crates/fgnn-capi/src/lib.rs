//! C ABI for the session recommender: opaque handles, integer status
//! codes, and a thread-local last-error message. The header is
//! generated into `include/fgnn.h` by the build script.
//!
//! Ownership rules: every `*_load`/`*_synth`/`fgnn_train` out-pointer
//! is owned by the caller and released with the matching `*_free`. All
//! functions are panic-safe at the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use fgnn::data::{self, synth, Dataset};
use fgnn::error::FgnnError;
use fgnn::eval::{evaluate, ModelRanker};
use fgnn::model::{forward, predict_topk, Architecture, ModelParams};
use fgnn::readout::ReadoutKind;
use fgnn::train::{checkpoint, train, Schedule, TrainingConfig};
use fgnn::wgat::{EdgeWeightNorm, HeadCombine};

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FgnnStatus {
    Ok = 0,
    /// Any error without a more specific category.
    Error = 1,
    /// Invalid parameters or configuration.
    Usage = 2,
    /// Missing or malformed data/files.
    Data = 3,
    /// A numerical self-check failed.
    Numeric = 4,
    /// A required pointer argument was null.
    NullArgument = 5,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 6,
    /// The library caught a panic at the boundary.
    Panic = 7,
}

/// Opaque dataset handle.
pub struct FgnnDataset {
    inner: Dataset,
}

/// Opaque model handle.
pub struct FgnnModel {
    inner: ModelParams,
}

/// Readout variant selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FgnnReadout {
    Set2set = 0,
    Mean = 1,
    Sum = 2,
    Max = 3,
    LastAttention = 4,
}

/// Head combination mode.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FgnnCombine {
    Mean = 0,
    Concat = 1,
}

/// Learning-rate schedule shape.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FgnnSchedule {
    Step = 0,
    Linear = 1,
}

/// Training options; fill with `fgnn_train_options_default` first.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FgnnTrainOptions {
    pub epochs: u32,
    pub batch_size: u32,
    pub seed: u64,
    pub lr: f64,
    pub l2: f64,
    pub decay_factor: f64,
    pub decay_every_epochs: u32,
    pub schedule: FgnnSchedule,
    pub embed_dim: u32,
    pub layers: u32,
    pub heads: u32,
    pub readout_steps: u32,
    pub readout: FgnnReadout,
    pub combine: FgnnCombine,
}

/// Corpus statistics for a loaded or generated dataset.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FgnnDatasetStats {
    pub clicks: u64,
    pub train_sessions: u64,
    pub test_sessions: u64,
    pub items: u64,
    pub train_examples: u64,
    pub test_examples: u64,
    pub avg_length: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', "?"))
        .unwrap_or_else(|_| CString::new("error").expect("static string"));
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn status_of(error: &FgnnError) -> FgnnStatus {
    match error.exit_code() {
        2 => FgnnStatus::Usage,
        3 => FgnnStatus::Data,
        4 => FgnnStatus::Numeric,
        _ => FgnnStatus::Error,
    }
}

fn fail(error: FgnnError) -> FgnnStatus {
    let status = status_of(&error);
    set_last_error(error.to_string());
    status
}

fn guard(body: impl FnOnce() -> FgnnStatus) -> FgnnStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_last_error(format!("panic: {message}"));
            FgnnStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be null (checked) or a valid NUL-terminated string.
unsafe fn path_arg<'a>(ptr: *const c_char) -> Result<&'a Path, FgnnStatus> {
    if ptr.is_null() {
        set_last_error("null path argument".into());
        return Err(FgnnStatus::NullArgument);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_last_error("path is not valid UTF-8".into());
            Err(FgnnStatus::InvalidUtf8)
        }
    }
}

macro_rules! require_out {
    ($ptr:expr) => {
        if $ptr.is_null() {
            set_last_error("null output pointer".into());
            return FgnnStatus::NullArgument;
        }
    };
}

macro_rules! require_handle {
    ($ptr:expr) => {
        match unsafe { $ptr.as_ref() } {
            Some(handle) => handle,
            None => {
                set_last_error("null handle".into());
                return FgnnStatus::NullArgument;
            }
        }
    };
}

/// Message describing the most recent error on this thread, or null if
/// none occurred. The pointer stays valid until the next failing call
/// on the same thread.
#[no_mangle]
pub extern "C" fn fgnn_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map_or(std::ptr::null(), |c| c.as_ptr())
    })
}

/// Generate a synthetic Markov-chain corpus, filter it with the default
/// support/length rules and split off the most recent `test_fraction`.
///
/// # Safety
/// `out` must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn fgnn_dataset_synth(
    items: u32,
    sessions: u32,
    min_len: u32,
    max_len: u32,
    concentration: f64,
    seed: u64,
    test_fraction: f64,
    out: *mut *mut FgnnDataset,
) -> FgnnStatus {
    guard(|| {
        require_out!(out);
        let config = synth::SynthConfig {
            n_items: items as usize,
            n_sessions: sessions as usize,
            min_len: min_len as usize,
            max_len: max_len as usize,
            transition_concentration: concentration,
            seed,
        };
        let build = || -> Result<Dataset, FgnnError> {
            let generated = synth::generate(&config)?;
            let events = synth::to_events(&generated);
            let keyed = data::sessionize(&events);
            let (filtered, vocab) = data::filter(
                &keyed,
                data::DEFAULT_MIN_ITEM_SUPPORT,
                data::DEFAULT_MIN_SESSION_LEN,
            )?;
            data::temporal_split(filtered, vocab, test_fraction, 1.0)
        };
        match build() {
            Ok(dataset) => {
                unsafe { *out = Box::into_raw(Box::new(FgnnDataset { inner: dataset })) };
                FgnnStatus::Ok
            }
            Err(error) => fail(error),
        }
    })
}

/// Load a preprocessed dataset directory (`manifest.json` plus example
/// and session files).
///
/// # Safety
/// `dir` must be a valid C string or null; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fgnn_dataset_load(
    dir: *const c_char,
    out: *mut *mut FgnnDataset,
) -> FgnnStatus {
    guard(|| {
        require_out!(out);
        let dir = match unsafe { path_arg(dir) } {
            Ok(p) => p,
            Err(status) => return status,
        };
        match Dataset::load(dir) {
            Ok(dataset) => {
                unsafe { *out = Box::into_raw(Box::new(FgnnDataset { inner: dataset })) };
                FgnnStatus::Ok
            }
            Err(error) => fail(error),
        }
    })
}

/// Write a dataset to a directory in the on-disk layout `fgnn
/// preprocess` produces.
///
/// # Safety
/// `dataset` must be a live handle; `dir` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn fgnn_dataset_save(
    dataset: *const FgnnDataset,
    dir: *const c_char,
) -> FgnnStatus {
    guard(|| {
        let handle = require_handle!(dataset);
        let dir = match unsafe { path_arg(dir) } {
            Ok(p) => p,
            Err(status) => return status,
        };
        match handle.inner.save(dir) {
            Ok(()) => FgnnStatus::Ok,
            Err(error) => fail(error),
        }
    })
}

/// Fill `stats` with the dataset's corpus statistics.
///
/// # Safety
/// Both pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn fgnn_dataset_stats(
    dataset: *const FgnnDataset,
    stats: *mut FgnnDatasetStats,
) -> FgnnStatus {
    guard(|| {
        let handle = require_handle!(dataset);
        require_out!(stats);
        let s = &handle.inner.stats;
        unsafe {
            *stats = FgnnDatasetStats {
                clicks: s.clicks as u64,
                train_sessions: s.train_sessions as u64,
                test_sessions: s.test_sessions as u64,
                items: s.items as u64,
                train_examples: s.train_examples as u64,
                test_examples: s.test_examples as u64,
                avg_length: s.avg_length,
            };
        }
        FgnnStatus::Ok
    })
}

/// Number of items in the dataset vocabulary, 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fgnn_dataset_vocab_size(dataset: *const FgnnDataset) -> u32 {
    match unsafe { dataset.as_ref() } {
        Some(handle) => handle.inner.vocab.len() as u32,
        None => 0,
    }
}

/// Copy the opaque key of item `index` into `buffer` (NUL-terminated,
/// truncated to `buffer_len`).
///
/// # Safety
/// `buffer` must point to `buffer_len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn fgnn_dataset_item_key(
    dataset: *const FgnnDataset,
    index: u32,
    buffer: *mut c_char,
    buffer_len: usize,
) -> FgnnStatus {
    guard(|| {
        let handle = require_handle!(dataset);
        require_out!(buffer);
        if buffer_len == 0 {
            set_last_error("zero-length buffer".into());
            return FgnnStatus::Usage;
        }
        let Some(key) = handle.inner.vocab.key_of(index as usize) else {
            return fail(FgnnError::IndexOutOfRange {
                what: "item index",
                index: index as usize,
                size: handle.inner.vocab.len(),
            });
        };
        let bytes = key.as_bytes();
        let copy_len = bytes.len().min(buffer_len - 1);
        unsafe {
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buffer.cast::<u8>(), copy_len);
            *buffer.add(copy_len) = 0;
        }
        FgnnStatus::Ok
    })
}

/// Release a dataset handle.
///
/// # Safety
/// `dataset` must be null or an unfreed pointer from this library.
#[no_mangle]
pub unsafe extern "C" fn fgnn_dataset_free(dataset: *mut FgnnDataset) {
    if !dataset.is_null() {
        drop(unsafe { Box::from_raw(dataset) });
    }
}

/// Reference defaults (the published hyperparameters).
///
/// # Safety
/// `options` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fgnn_train_options_default(options: *mut FgnnTrainOptions) -> FgnnStatus {
    guard(|| {
        require_out!(options);
        let reference = TrainingConfig::default();
        unsafe {
            *options = FgnnTrainOptions {
                epochs: reference.epochs as u32,
                batch_size: reference.batch_size as u32,
                seed: reference.seed,
                lr: reference.lr,
                l2: reference.l2,
                decay_factor: reference.decay_factor,
                decay_every_epochs: reference.decay_every_epochs as u32,
                schedule: FgnnSchedule::Step,
                embed_dim: reference.arch.embed_dim as u32,
                layers: reference.arch.layers as u32,
                heads: reference.arch.heads as u32,
                readout_steps: reference.arch.readout_steps as u32,
                readout: FgnnReadout::Set2set,
                combine: FgnnCombine::Mean,
            };
        }
        FgnnStatus::Ok
    })
}

fn training_config(options: &FgnnTrainOptions) -> TrainingConfig {
    TrainingConfig {
        lr: options.lr,
        decay_factor: options.decay_factor,
        decay_every_epochs: options.decay_every_epochs as usize,
        schedule: match options.schedule {
            FgnnSchedule::Step => Schedule::Step,
            FgnnSchedule::Linear => Schedule::Linear,
        },
        l2: options.l2,
        batch_size: options.batch_size as usize,
        epochs: options.epochs as usize,
        seed: options.seed,
        eval_each_epoch: false,
        arch: Architecture {
            embed_dim: options.embed_dim as usize,
            layers: options.layers as usize,
            heads: options.heads as usize,
            readout_steps: options.readout_steps as usize,
            combine: match options.combine {
                FgnnCombine::Mean => HeadCombine::Mean,
                FgnnCombine::Concat => HeadCombine::Concat,
            },
            readout: match options.readout {
                FgnnReadout::Set2set => ReadoutKind::Set2Set,
                FgnnReadout::Mean => ReadoutKind::Mean,
                FgnnReadout::Sum => ReadoutKind::Sum,
                FgnnReadout::Max => ReadoutKind::Max,
                FgnnReadout::LastAttention => ReadoutKind::LastAttention,
            },
            edge_weight_norm: EdgeWeightNorm::None,
            selfloop_clamp: false,
        },
        ..TrainingConfig::default()
    }
}

/// Train a model on the dataset's train split.
///
/// # Safety
/// `dataset` must be live, `options` null or valid, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fgnn_train(
    dataset: *const FgnnDataset,
    options: *const FgnnTrainOptions,
    out: *mut *mut FgnnModel,
) -> FgnnStatus {
    guard(|| {
        let handle = require_handle!(dataset);
        require_out!(out);
        let config = match unsafe { options.as_ref() } {
            Some(options) => training_config(options),
            None => TrainingConfig::default(),
        };
        match train(&config, &handle.inner) {
            Ok(run) => {
                unsafe { *out = Box::into_raw(Box::new(FgnnModel { inner: run.params })) };
                FgnnStatus::Ok
            }
            Err(error) => fail(error),
        }
    })
}

/// Write a checkpoint file for the model.
///
/// # Safety
/// `model` must be live; `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn fgnn_model_save(
    model: *const FgnnModel,
    path: *const c_char,
) -> FgnnStatus {
    guard(|| {
        let handle = require_handle!(model);
        let path = match unsafe { path_arg(path) } {
            Ok(p) => p,
            Err(status) => return status,
        };
        match checkpoint::save(&handle.inner, None, path) {
            Ok(()) => FgnnStatus::Ok,
            Err(error) => fail(error),
        }
    })
}

/// Load a checkpoint file.
///
/// # Safety
/// `path` must be a valid C string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fgnn_model_load(
    path: *const c_char,
    out: *mut *mut FgnnModel,
) -> FgnnStatus {
    guard(|| {
        require_out!(out);
        let path = match unsafe { path_arg(path) } {
            Ok(p) => p,
            Err(status) => return status,
        };
        match checkpoint::load(path) {
            Ok((params, _)) => {
                unsafe { *out = Box::into_raw(Box::new(FgnnModel { inner: params })) };
                FgnnStatus::Ok
            }
            Err(error) => fail(error),
        }
    })
}

/// Vocabulary size the model scores over, 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fgnn_model_vocab_size(model: *const FgnnModel) -> u32 {
    match unsafe { model.as_ref() } {
        Some(handle) => handle.inner.vocab_size() as u32,
        None => 0,
    }
}

/// Rank the vocabulary for a session prefix; writes the top `k` item
/// indices (and, when `out_probabilities` is non-null, their
/// probabilities) best first.
///
/// # Safety
/// `items` must point to `item_count` values; the out arrays must hold
/// `k` entries.
#[no_mangle]
pub unsafe extern "C" fn fgnn_predict_topk(
    model: *const FgnnModel,
    items: *const u32,
    item_count: usize,
    k: u32,
    out_items: *mut u32,
    out_probabilities: *mut f64,
) -> FgnnStatus {
    guard(|| {
        let handle = require_handle!(model);
        require_out!(out_items);
        if items.is_null() || item_count == 0 {
            set_last_error("empty session prefix".into());
            return FgnnStatus::Usage;
        }
        let prefix: Vec<usize> = unsafe { std::slice::from_raw_parts(items, item_count) }
            .iter()
            .map(|&i| i as usize)
            .collect();
        let ranked = match forward(&handle.inner, &prefix) {
            Ok(r) => r,
            Err(error) => return fail(error),
        };
        let top = match predict_topk(&ranked, k as usize) {
            Ok(t) => t,
            Err(error) => return fail(error),
        };
        for (i, &item) in top.iter().enumerate() {
            unsafe {
                *out_items.add(i) = item as u32;
                if !out_probabilities.is_null() {
                    *out_probabilities.add(i) = ranked.probabilities[item];
                }
            }
        }
        FgnnStatus::Ok
    })
}

/// Recall@K and MRR@K of the model over the dataset's test split.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn fgnn_evaluate(
    model: *const FgnnModel,
    dataset: *const FgnnDataset,
    k: u32,
    out_recall: *mut f64,
    out_mrr: *mut f64,
) -> FgnnStatus {
    guard(|| {
        let model = require_handle!(model);
        let dataset = require_handle!(dataset);
        require_out!(out_recall);
        require_out!(out_mrr);
        let report = match evaluate(
            &ModelRanker {
                params: &model.inner,
            },
            &dataset.inner.test_examples,
            &[k as usize],
        ) {
            Ok(r) => r,
            Err(error) => return fail(error),
        };
        unsafe {
            *out_recall = report.at_k[0].recall;
            *out_mrr = report.at_k[0].mrr;
        }
        FgnnStatus::Ok
    })
}

/// Run the finite-difference gradient check on a toy model; returns
/// `Numeric` (4) and leaves the worst entry in the error message when
/// the check fails.
///
/// # Safety
/// `out_max_rel_err` may be null.
#[no_mangle]
pub unsafe extern "C" fn fgnn_gradcheck(seed: u64, out_max_rel_err: *mut f64) -> FgnnStatus {
    guard(|| {
        let args = fgnn::cli::GradcheckArgs {
            seed,
            vocab: 6,
            embed_dim: 8,
            layers: 2,
            heads: 2,
            readout_steps: 2,
        };
        match fgnn::cli::gradcheck_model(&args) {
            Ok(report) => {
                if !out_max_rel_err.is_null() {
                    unsafe { *out_max_rel_err = report.max_rel_err };
                }
                if report.passed(1e-4) {
                    FgnnStatus::Ok
                } else {
                    fail(FgnnError::NumericalCheck(format!(
                        "max rel err {:.3e} above 1e-4",
                        report.max_rel_err
                    )))
                }
            }
            Err(error) => fail(error),
        }
    })
}

/// Release a model handle.
///
/// # Safety
/// `model` must be null or an unfreed pointer from this library.
#[no_mangle]
pub unsafe extern "C" fn fgnn_model_free(model: *mut FgnnModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}
