//! C ABI over the firmcx pipeline.
//!
//! Every function returns a [`FirmcxStatus`]; on anything but `OK` the
//! calling thread's message is available from [`firmcx_last_error`].
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use firmcx::matrix::{rca, ExportMatrix};
use firmcx::pipeline::{run_pipeline, synthesize, RunConfig, RunReport, Stage};
use firmcx::relatedness::sapling_entry;
use firmcx::synth::SynthConfig;
use firmcx::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FirmcxStatus {
    Ok = 0,
    /// Bad input data or config; matches CLI exit code 1.
    Validation = 1,
    /// A numerical stage failed; matches CLI exit code 2.
    Compute = 2,
    /// Null pointer, non-UTF-8 string or out-of-range argument.
    InvalidArgument = 3,
    /// Unknown model id or term.
    NotFound = 4,
    /// A Rust panic was caught at the boundary.
    Panic = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FirmcxStage {
    Ingest = 0,
    Blocks = 1,
    Indicators = 2,
    Regress = 3,
    Figures = 4,
}

impl From<FirmcxStage> for Stage {
    fn from(s: FirmcxStage) -> Self {
        match s {
            FirmcxStage::Ingest => Stage::Ingest,
            FirmcxStage::Blocks => Stage::Blocks,
            FirmcxStage::Indicators => Stage::Indicators,
            FirmcxStage::Regress => Stage::Regress,
            FirmcxStage::Figures => Stage::Figures,
        }
    }
}

/// Parsed run configuration.
pub struct FirmcxConfig(RunConfig);

/// Outcome of a pipeline run.
pub struct FirmcxRun(RunReport);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: FirmcxStatus, message: impl Into<String>) -> FirmcxStatus {
    set_error(message.into());
    status
}

fn from_error(e: Error) -> FirmcxStatus {
    let status = if e.is_validation() {
        FirmcxStatus::Validation
    } else {
        FirmcxStatus::Compute
    };
    fail(status, e.to_string())
}

/// Runs `body`, turning panics into `PANIC`.
fn guard(body: impl FnOnce() -> FirmcxStatus) -> FirmcxStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(FirmcxStatus::Panic, format!("panic: {msg}"))
        }
    }
}

/// # Safety
/// `s` is null or a NUL-terminated string valid for the call.
unsafe fn text<'a>(s: *const c_char, what: &str) -> Result<&'a str, FirmcxStatus> {
    if s.is_null() {
        return Err(fail(FirmcxStatus::InvalidArgument, format!("{what} is null")));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| fail(FirmcxStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(status) => return status,
        }
    };
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn firmcx_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next firmcx call on the same thread.
#[no_mangle]
pub extern "C" fn firmcx_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a TOML run config. Relative paths resolve against the file's
/// directory.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn firmcx_config_load(path: *const c_char, out: *mut *mut FirmcxConfig) -> FirmcxStatus {
    guard(|| {
        if out.is_null() {
            return fail(FirmcxStatus::InvalidArgument, "out is null");
        }
        *out = ptr::null_mut();
        let path = tri!(text(path, "path"));
        match RunConfig::load(&PathBuf::from(path)) {
            Ok(c) => {
                *out = Box::into_raw(Box::new(FirmcxConfig(c)));
                FirmcxStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `config` is null or a handle from [`firmcx_config_load`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn firmcx_config_free(config: *mut FirmcxConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// # Safety
/// `config` is a live handle; `dir` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn firmcx_config_set_output_dir(config: *mut FirmcxConfig, dir: *const c_char) -> FirmcxStatus {
    guard(|| {
        let Some(c) = config.as_mut() else {
            return fail(FirmcxStatus::InvalidArgument, "config is null");
        };
        c.0.output_dir = PathBuf::from(tri!(text(dir, "dir")));
        FirmcxStatus::Ok
    })
}

/// Overrides the block-detection seed.
///
/// # Safety
/// `config` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn firmcx_config_set_seed(config: *mut FirmcxConfig, seed: u64) -> FirmcxStatus {
    guard(|| match config.as_mut() {
        Some(c) => {
            c.0.blocks.brim.seed = seed;
            FirmcxStatus::Ok
        }
        None => fail(FirmcxStatus::InvalidArgument, "config is null"),
    })
}

/// Worker threads for the run; 0 restores the default pool.
///
/// # Safety
/// `config` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn firmcx_config_set_threads(config: *mut FirmcxConfig, threads: usize) -> FirmcxStatus {
    guard(|| match config.as_mut() {
        Some(c) => {
            c.0.threads = (threads > 0).then_some(threads);
            FirmcxStatus::Ok
        }
        None => fail(FirmcxStatus::InvalidArgument, "config is null"),
    })
}

/// Runs the pipeline through `stage` and writes its outputs.
///
/// # Safety
/// `config` is a live handle; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn firmcx_run(config: *const FirmcxConfig, stage: FirmcxStage, out: *mut *mut FirmcxRun) -> FirmcxStatus {
    guard(|| {
        if out.is_null() {
            return fail(FirmcxStatus::InvalidArgument, "out is null");
        }
        *out = ptr::null_mut();
        let Some(c) = config.as_ref() else {
            return fail(FirmcxStatus::InvalidArgument, "config is null");
        };
        match run_pipeline(&c.0, stage.into()) {
            Ok(r) => {
                *out = Box::into_raw(Box::new(FirmcxRun(r)));
                FirmcxStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `run` is null or a handle from [`firmcx_run`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn firmcx_run_free(run: *mut FirmcxRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Number of fitted models; 0 for a null handle.
///
/// # Safety
/// `run` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn firmcx_run_model_count(run: *const FirmcxRun) -> usize {
    run.as_ref().map_or(0, |r| r.0.results.len())
}

/// Estimate, HC1 standard error and p-value of `term` in model `model_id`.
/// Any of the out pointers may be null.
///
/// # Safety
/// `run` is a live handle; strings are NUL-terminated; non-null out
/// pointers are writable.
#[no_mangle]
pub unsafe extern "C" fn firmcx_run_coefficient(
    run: *const FirmcxRun,
    model_id: *const c_char,
    term: *const c_char,
    estimate: *mut f64,
    std_error: *mut f64,
    p_value: *mut f64,
) -> FirmcxStatus {
    guard(|| {
        let Some(run) = run.as_ref() else {
            return fail(FirmcxStatus::InvalidArgument, "run is null");
        };
        let (model_id, term) = (tri!(text(model_id, "model_id")), tri!(text(term, "term")));
        let Some(model) = run.0.results.iter().find(|r| r.model_id == model_id) else {
            return fail(FirmcxStatus::NotFound, format!("no model {model_id:?}"));
        };
        let Some((b, se, p)) = model.coefficient(term) else {
            return fail(FirmcxStatus::NotFound, format!("model {model_id} has no term {term:?}"));
        };
        for (dst, v) in [(estimate, b), (std_error, se), (p_value, p)] {
            if let Some(d) = dst.as_mut() {
                *d = v;
            }
        }
        FirmcxStatus::Ok
    })
}

/// Observation count of model `model_id`.
///
/// # Safety
/// `run` is a live handle; `model_id` is NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn firmcx_run_observations(run: *const FirmcxRun, model_id: *const c_char, out: *mut usize) -> FirmcxStatus {
    guard(|| {
        let (Some(run), Some(out)) = (run.as_ref(), out.as_mut()) else {
            return fail(FirmcxStatus::InvalidArgument, "run or out is null");
        };
        let model_id = tri!(text(model_id, "model_id"));
        match run.0.results.iter().find(|r| r.model_id == model_id) {
            Some(m) => {
                *out = m.n;
                FirmcxStatus::Ok
            }
            None => fail(FirmcxStatus::NotFound, format!("no model {model_id:?}")),
        }
    })
}

/// Writes a synthetic dataset for `preset` ("small", "default", "paper")
/// into `dir`, plus a `run.toml` that reads it.
///
/// # Safety
/// `preset` and `dir` are NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn firmcx_synth_write(preset: *const c_char, seed: u64, dir: *const c_char) -> FirmcxStatus {
    guard(|| {
        let preset = tri!(text(preset, "preset"));
        let dir = PathBuf::from(tri!(text(dir, "dir")));
        let config = match SynthConfig::preset(preset) {
            Ok(c) => SynthConfig { seed, ..c },
            Err(e) => return from_error(e),
        };
        match synthesize(&dir, &config) {
            Ok(_) => FirmcxStatus::Ok,
            Err(e) => from_error(e),
        }
    })
}

/// RCA of a dense row-major `rows × cols` matrix into `out` (same shape).
/// All-zero rows come back as zeros.
///
/// # Safety
/// `values` and `out` point to `rows * cols` doubles.
#[no_mangle]
pub unsafe extern "C" fn firmcx_rca_dense(values: *const f64, rows: usize, cols: usize, out: *mut f64) -> FirmcxStatus {
    guard(|| {
        if values.is_null() || out.is_null() {
            return fail(FirmcxStatus::InvalidArgument, "values or out is null");
        }
        let Some(len) = rows.checked_mul(cols).filter(|&n| n > 0) else {
            return fail(FirmcxStatus::InvalidArgument, "empty or oversized shape");
        };
        let input = std::slice::from_raw_parts(values, len);
        let dense: Vec<Vec<f64>> = input.chunks(cols).map(<[f64]>::to_vec).collect();
        let matrix = match ExportMatrix::from_dense(&dense) {
            Ok(m) => m,
            Err(e) => return from_error(e),
        };
        let r = match rca(&matrix) {
            Ok(r) => r,
            Err(e) => return from_error(e),
        };
        let output = std::slice::from_raw_parts_mut(out, len);
        output.fill(0.0);
        for (i, j, v) in r.data().iter() {
            output[i * cols + j] = v;
        }
        FirmcxStatus::Ok
    })
}

/// Sapling similarity from co-occurrence `co`, degrees `k_p`, `k_q` and row
/// count `n`. `INVALID_ARGUMENT` where the similarity is undefined.
///
/// # Safety
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn firmcx_sapling(co: u32, k_p: u32, k_q: u32, n: u32, out: *mut f64) -> FirmcxStatus {
    guard(|| {
        let Some(out) = out.as_mut() else {
            return fail(FirmcxStatus::InvalidArgument, "out is null");
        };
        match sapling_entry(co, k_p, k_q, n) {
            Some(b) => {
                *out = b;
                FirmcxStatus::Ok
            }
            None => fail(
                FirmcxStatus::InvalidArgument,
                format!("similarity undefined for co={co}, k_p={k_p}, k_q={k_q}, n={n}"),
            ),
        }
    })
}
