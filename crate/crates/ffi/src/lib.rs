//! C ABI over the coact library: opaque handles, integer status codes, and a
//! thread-local last-error message. Strings returned through out-pointers
//! are owned by the caller and must be released with `coact_string_free`.
//!
//! Callers must pass valid, properly aligned pointers; NULLs are detected
//! and reported as usage errors, everything else is on the C side.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use coact::config::{RunConfig, SynthSpec};
use coact::decoder::sigmoid;
use coact::error::Error;
use coact::macc::macc_estimate;
use coact::model::{forward, gradcheck_model, load_model, save_model, ModelParams};
use coact::synth::{synth_dataset, Dataset};
use coact::tensor::Tensor;
use coact::train::{evaluate_model, Trainer};

/// Result of every fallible call. Mirrors the CLI exit codes.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CoactStatus {
    /// Success.
    Ok = 0,
    /// Invalid arguments, configuration or input files.
    Usage = 1,
    /// A verification (gradient check) did not pass.
    Verify = 2,
    /// A numerical failure (non-finite values).
    Numeric = 3,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let cleaned: Vec<u8> = msg.bytes().filter(|&b| b != 0).collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(cleaned).unwrap());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::default());
}

fn fail(err: Error) -> CoactStatus {
    let status = if err.is_numerical() {
        CoactStatus::Numeric
    } else {
        CoactStatus::Usage
    };
    set_error(&err.to_string());
    status
}

fn usage(msg: &str) -> CoactStatus {
    set_error(msg);
    CoactStatus::Usage
}

/// Message describing the most recent failure on this thread; empty after a
/// successful call. The pointer stays valid until the next call on the same
/// thread.
#[no_mangle]
pub extern "C" fn coact_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

fn guard(body: impl FnOnce() -> CoactStatus) -> CoactStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            CoactStatus::Numeric
        }
    }
}

unsafe fn cstr<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, CoactStatus> {
    if ptr.is_null() {
        return Err(usage(&format!("{what} is NULL")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| usage(&format!("{what} is not valid UTF-8")))
}

fn out_string(dst: *mut *mut c_char, text: String) {
    if !dst.is_null() {
        let cleaned: Vec<u8> = text.into_bytes().into_iter().filter(|&b| b != 0).collect();
        unsafe { *dst = CString::new(cleaned).unwrap().into_raw() };
    }
}

/// Frees a string returned by this library. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn coact_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// A dataset of feature maps with multi-hot labels.
pub struct CoactDataset {
    inner: Dataset,
}

/// A trained (or initialized) model bundle: configuration, parameters and
/// association masks.
pub struct CoactModel {
    config: coact::config::ModelConfig,
    params: ModelParams,
    masks: coact::decoder::AssociationMasks,
}

/// Generates a synthetic dataset from a generator-spec JSON document.
#[no_mangle]
pub unsafe extern "C" fn coact_dataset_synth(
    spec_json: *const c_char,
    seed: u64,
    out: *mut *mut CoactDataset,
) -> CoactStatus {
    guard(|| {
        if out.is_null() {
            return usage("out is NULL");
        }
        let text = match cstr(spec_json, "spec_json") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let spec: SynthSpec = match serde_json::from_str(text) {
            Ok(s) => s,
            Err(e) => return usage(&format!("spec: {e}")),
        };
        match synth_dataset(&spec, seed) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(CoactDataset { inner }));
                CoactStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Loads a dataset directory (TNSR samples plus labels.csv).
#[no_mangle]
pub unsafe extern "C" fn coact_dataset_load(
    dir: *const c_char,
    out: *mut *mut CoactDataset,
) -> CoactStatus {
    guard(|| {
        if out.is_null() {
            return usage("out is NULL");
        }
        let dir = match cstr(dir, "dir") {
            Ok(t) => t,
            Err(s) => return s,
        };
        match Dataset::load_dir(Path::new(dir)) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(CoactDataset { inner }));
                CoactStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Writes a dataset into a directory, creating it if needed.
#[no_mangle]
pub unsafe extern "C" fn coact_dataset_save(
    dataset: *const CoactDataset,
    dir: *const c_char,
) -> CoactStatus {
    guard(|| {
        let Some(ds) = dataset.as_ref() else {
            return usage("dataset is NULL");
        };
        let dir = match cstr(dir, "dir") {
            Ok(t) => t,
            Err(s) => return s,
        };
        match ds.inner.save_dir(Path::new(dir)) {
            Ok(()) => CoactStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// Number of samples; 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn coact_dataset_len(dataset: *const CoactDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.len())
}

#[no_mangle]
pub unsafe extern "C" fn coact_dataset_free(dataset: *mut CoactDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Trains a model on a dataset. `config_json` is the same document the CLI
/// takes: a `model` section plus optional `augment`.
#[no_mangle]
pub unsafe extern "C" fn coact_train(
    config_json: *const c_char,
    dataset: *const CoactDataset,
    out: *mut *mut CoactModel,
) -> CoactStatus {
    guard(|| {
        if out.is_null() {
            return usage("out is NULL");
        }
        let Some(ds) = dataset.as_ref() else {
            return usage("dataset is NULL");
        };
        let text = match cstr(config_json, "config_json") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let cfg: RunConfig = match serde_json::from_str(text) {
            Ok(c) => c,
            Err(e) => return usage(&format!("config: {e}")),
        };
        if let Err(e) = cfg.model.validate() {
            return fail(e);
        }
        let mut trainer = match Trainer::new(&cfg.model, &ds.inner, cfg.augment.clone()) {
            Ok(t) => t,
            Err(e) => return fail(e),
        };
        if let Err(e) = trainer.run_epochs(&ds.inner, cfg.model.epochs) {
            return fail(e);
        }
        *out = Box::into_raw(Box::new(CoactModel {
            config: trainer.config.clone(),
            params: trainer.params,
            masks: trainer.masks,
        }));
        CoactStatus::Ok
    })
}

/// Loads a model bundle written by `coact_model_save` or the CLI.
#[no_mangle]
pub unsafe extern "C" fn coact_model_load(
    path: *const c_char,
    out: *mut *mut CoactModel,
) -> CoactStatus {
    guard(|| {
        if out.is_null() {
            return usage("out is NULL");
        }
        let path = match cstr(path, "path") {
            Ok(t) => t,
            Err(s) => return s,
        };
        match load_model(Path::new(path)) {
            Ok((config, params, masks)) => {
                *out = Box::into_raw(Box::new(CoactModel {
                    config,
                    params,
                    masks,
                }));
                CoactStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn coact_model_save(
    model: *const CoactModel,
    path: *const c_char,
) -> CoactStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return usage("model is NULL");
        };
        let path = match cstr(path, "path") {
            Ok(t) => t,
            Err(s) => return s,
        };
        match save_model(Path::new(path), &m.config, &m.params, &m.masks) {
            Ok(()) => CoactStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn coact_model_free(model: *mut CoactModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of activities the model scores; 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn coact_model_activities(model: *const CoactModel) -> usize {
    model.as_ref().map_or(0, |m| m.config.activities)
}

/// Row-major element count of one input feature map; 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn coact_model_input_len(model: *const CoactModel) -> usize {
    model
        .as_ref()
        .map_or(0, |m| m.config.input_shape().iter().product())
}

/// Scores one feature map (row-major `[T, W, H, C']`, `features_len`
/// elements) and writes per-activity sigmoid scores into `scores_out`.
#[no_mangle]
pub unsafe extern "C" fn coact_predict(
    model: *const CoactModel,
    features: *const f64,
    features_len: usize,
    scores_out: *mut f64,
    scores_len: usize,
) -> CoactStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return usage("model is NULL");
        };
        if features.is_null() || scores_out.is_null() {
            return usage("features or scores_out is NULL");
        }
        let expected: usize = m.config.input_shape().iter().product();
        if features_len != expected {
            return usage(&format!(
                "features_len {features_len} != expected {expected}"
            ));
        }
        if scores_len != m.config.activities {
            return usage(&format!(
                "scores_len {scores_len} != activities {}",
                m.config.activities
            ));
        }
        let data = std::slice::from_raw_parts(features, features_len).to_vec();
        let fm = match Tensor::new(&m.config.input_shape(), data) {
            Ok(t) => t,
            Err(e) => return fail(e),
        };
        match forward(&m.config, &m.params, &m.masks, &fm, None) {
            Ok(logits) => {
                let out = std::slice::from_raw_parts_mut(scores_out, scores_len);
                for (dst, &z) in out.iter_mut().zip(logits.data()) {
                    *dst = sigmoid(z);
                }
                CoactStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Evaluates a model on a dataset; writes the metrics JSON document to
/// `metrics_json_out`.
#[no_mangle]
pub unsafe extern "C" fn coact_evaluate(
    model: *const CoactModel,
    dataset: *const CoactDataset,
    threshold: f64,
    metrics_json_out: *mut *mut c_char,
) -> CoactStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return usage("model is NULL");
        };
        let Some(ds) = dataset.as_ref() else {
            return usage("dataset is NULL");
        };
        if !(threshold > 0.0 && threshold < 1.0) {
            return usage(&format!("threshold {threshold} outside (0, 1)"));
        }
        match evaluate_model(&m.config, &m.params, &m.masks, &ds.inner, threshold) {
            Ok(metrics) => {
                out_string(
                    metrics_json_out,
                    serde_json::to_string_pretty(&metrics).expect("metrics serialize"),
                );
                CoactStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Analytic multiply-accumulate counts for a config document; writes a JSON
/// report.
#[no_mangle]
pub unsafe extern "C" fn coact_macc(
    config_json: *const c_char,
    report_json_out: *mut *mut c_char,
) -> CoactStatus {
    guard(|| {
        let text = match cstr(config_json, "config_json") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let cfg: RunConfig = match serde_json::from_str(text) {
            Ok(c) => c,
            Err(e) => return usage(&format!("config: {e}")),
        };
        if let Err(e) = cfg.model.validate() {
            return fail(e);
        }
        let report = macc_estimate(&cfg.model);
        out_string(
            report_json_out,
            serde_json::to_string_pretty(&report).expect("report serializes"),
        );
        CoactStatus::Ok
    })
}

/// Runs the gradient check (reverse-mode versus central differences) on the
/// config's model at tolerance 1e-4. Returns `Verify` when any group fails;
/// the JSON report is written either way.
#[no_mangle]
pub unsafe extern "C" fn coact_gradcheck(
    config_json: *const c_char,
    seed: u64,
    report_json_out: *mut *mut c_char,
) -> CoactStatus {
    guard(|| {
        let text = match cstr(config_json, "config_json") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let cfg: RunConfig = match serde_json::from_str(text) {
            Ok(c) => c,
            Err(e) => return usage(&format!("config: {e}")),
        };
        match gradcheck_model(&cfg.model, seed, 1e-4, None) {
            Ok(report) => {
                let pass = report.pass;
                out_string(
                    report_json_out,
                    serde_json::to_string_pretty(&report).expect("report serializes"),
                );
                if pass {
                    CoactStatus::Ok
                } else {
                    set_error("gradient check failed");
                    CoactStatus::Verify
                }
            }
            Err(e) => fail(e),
        }
    })
}
