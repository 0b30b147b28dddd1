//! C ABI over `ncd-core`.
//!
//! Every function returns an [`NcdStatus`]; on failure the message is available
//! from [`ncd_last_error_message`] on the same thread. Handles are opaque and
//! must be released with their `_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use ncd_core::config::PipelineConfig;
use ncd_core::error::Error;
use ncd_core::eval::{cluster_accuracy, hungarian_match};
use ncd_core::losses::{total_loss, LossBatch};
use ncd_core::pipeline::run_pipeline;
use ncd_core::retrieval::{cosine_similarity, retrieve_topk};
use ncd_core::sskmeans::{fit, ClusterConfig, ClusterModel};
use ncd_core::store::load_bundle;
use ncd_core::EmbeddingBundle;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NcdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Validation = 5,
    /// Output buffer too small; the required length has been written.
    BufferTooSmall = 6,
    Internal = 7,
    Panic = 8,
}

/// Loaded embedding bundle.
pub struct NcdBundle(EmbeddingBundle);

/// Fitted semi-supervised k-means model.
pub struct NcdClusterModel(ClusterModel);

/// Clustering accuracy over all, known-class and novel-class samples.
/// Absent subsets are reported as NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NcdReport {
    pub acc_all: f64,
    pub acc_old: f64,
    pub acc_new: f64,
    pub n_all: usize,
    pub n_old: usize,
    pub n_new: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> NcdStatus {
    match e {
        Error::Io { .. } => NcdStatus::Io,
        Error::Format { .. } | Error::MatrixSizeMismatch { .. } => NcdStatus::Format,
        Error::Invalid(_) | Error::NonFinite { .. } | Error::DuplicateId(_) | Error::RowOutOfRange { .. } => {
            NcdStatus::Validation
        }
        Error::Stage { source, .. } | Error::Sample { source, .. } => status_of(source),
        Error::Locked(_) => NcdStatus::Internal,
        _ => NcdStatus::InvalidArgument,
    }
}

struct Fail(NcdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(NcdStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> NcdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NcdStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("panic inside ncd".into());
            NcdStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(NcdStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Copies `src` into a caller buffer of capacity `cap`, always reporting the length in `len_out`.
unsafe fn copy_out<T: Copy>(src: &[T], dst: *mut T, cap: usize, len_out: *mut usize) -> Result<(), Fail> {
    *out_arg(len_out, "length output")? = src.len();
    if cap < src.len() {
        return Err(Fail(
            NcdStatus::BufferTooSmall,
            format!("buffer holds {cap} elements, {} needed", src.len()),
        ));
    }
    if !src.is_empty() {
        if dst.is_null() {
            return Err(null("output buffer"));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    }
    Ok(())
}

/// Message for the most recent failure on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ncd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ncd_bundle_load(path: *const c_char, out: *mut *mut NcdBundle) -> NcdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let bundle = load_bundle(&PathBuf::from(path))?;
        *out = Box::into_raw(Box::new(NcdBundle(bundle)));
        Ok(())
    })
}

/// # Safety
/// `bundle` must come from [`ncd_bundle_load`] and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn ncd_bundle_free(bundle: *mut NcdBundle) {
    if !bundle.is_null() {
        drop(Box::from_raw(bundle));
    }
}

/// Row dimension, or 0 for NULL.
///
/// # Safety
/// `bundle` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ncd_bundle_dim(bundle: *const NcdBundle) -> usize {
    bundle.as_ref().map_or(0, |b| b.0.dim())
}

/// Row count, or 0 for NULL.
///
/// # Safety
/// `bundle` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ncd_bundle_count(bundle: *const NcdBundle) -> usize {
    bundle.as_ref().map_or(0, |b| b.0.count())
}

/// Copies row `row` into `out` (capacity `cap`); the row length goes to `len_out`.
///
/// # Safety
/// Pointers must be valid for the given capacities.
#[no_mangle]
pub unsafe extern "C" fn ncd_bundle_row(
    bundle: *const NcdBundle,
    row: usize,
    out: *mut f32,
    cap: usize,
    len_out: *mut usize,
) -> NcdStatus {
    guard(|| {
        let b = &bundle.as_ref().ok_or_else(|| null("bundle"))?.0;
        if row >= b.count() {
            return Err(Fail(
                NcdStatus::InvalidArgument,
                format!("row {row} out of range for {} rows", b.count()),
            ));
        }
        copy_out(b.row(row), out, cap, len_out)
    })
}

/// # Safety
/// `a` and `b` must point at `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ncd_cosine_similarity(a: *const f64, b: *const f64, len: usize, out: *mut f64) -> NcdStatus {
    guard(|| {
        let a = slice_arg(a, len, "a")?;
        let b = slice_arg(b, len, "b")?;
        *out_arg(out, "out")? = cosine_similarity(a, b)?;
        Ok(())
    })
}

/// Top-`k` corpus rows for `query` by cosine similarity, best first (ties by row).
/// Writes up to `cap` row indices and scores; the hit count goes to `len_out`.
///
/// # Safety
/// `query` must hold `dim` floats; output buffers must hold `cap` elements.
#[no_mangle]
pub unsafe extern "C" fn ncd_retrieve_topk(
    query: *const f32,
    dim: usize,
    corpus: *const NcdBundle,
    k: usize,
    rows_out: *mut usize,
    scores_out: *mut f64,
    cap: usize,
    len_out: *mut usize,
) -> NcdStatus {
    guard(|| {
        let corpus = &corpus.as_ref().ok_or_else(|| null("corpus"))?.0;
        let query = slice_arg(query, dim, "query")?;
        let result = retrieve_topk(query, corpus, k)?;
        let index = corpus.id_index();
        let rows: Vec<usize> = result.hits.iter().map(|h| index[h.caption_id.as_str()]).collect();
        let scores: Vec<f64> = result.hits.iter().map(|h| h.score).collect();
        copy_out(&rows, rows_out, cap, len_out)?;
        copy_out(&scores, scores_out, cap, len_out)
    })
}

/// Fits semi-supervised k-means with `clusters` centers. `tol` may be infinite.
///
/// # Safety
/// `fused` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ncd_cluster_fit(
    fused: *const NcdBundle,
    clusters: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
    freeze_known_centers: bool,
    out: *mut *mut NcdClusterModel,
) -> NcdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let fused = &fused.as_ref().ok_or_else(|| null("fused"))?.0;
        let cfg = ClusterConfig {
            max_iters,
            tol,
            seed,
            freeze_known_centers,
            ..ClusterConfig::new(clusters)
        };
        let model = fit(fused, &cfg)?;
        *out = Box::into_raw(Box::new(NcdClusterModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`ncd_cluster_fit`] and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn ncd_cluster_model_free(model: *mut NcdClusterModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Lloyd iterations performed, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ncd_cluster_model_iterations(model: *const NcdClusterModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.iterations_run)
}

/// Cluster index per bundle row.
///
/// # Safety
/// `out` must hold `cap` elements.
#[no_mangle]
pub unsafe extern "C" fn ncd_cluster_model_assignments(
    model: *const NcdClusterModel,
    out: *mut usize,
    cap: usize,
    len_out: *mut usize,
) -> NcdStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.0;
        copy_out(&m.assignments, out, cap, len_out)
    })
}

/// Inertia recorded at each iteration.
///
/// # Safety
/// `out` must hold `cap` elements.
#[no_mangle]
pub unsafe extern "C" fn ncd_cluster_model_inertia(
    model: *const NcdClusterModel,
    out: *mut f64,
    cap: usize,
    len_out: *mut usize,
) -> NcdStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.0;
        copy_out(&m.inertia_trace, out, cap, len_out)
    })
}

/// Best one-to-one matching accuracy between cluster ids and class ids.
///
/// # Safety
/// `pred` and `truth` must hold `n` elements.
#[no_mangle]
pub unsafe extern "C" fn ncd_cluster_accuracy(
    pred: *const usize,
    truth: *const u32,
    n: usize,
    out: *mut f64,
) -> NcdStatus {
    guard(|| {
        let pred = slice_arg(pred, n, "pred")?;
        let truth = slice_arg(truth, n, "truth")?;
        *out_arg(out, "out")? = cluster_accuracy(pred, truth)?.acc();
        Ok(())
    })
}

/// Minimum-cost assignment on a row-major `rows x cols` matrix. `out` receives,
/// for each row, its column or -1 when unmatched (more rows than columns).
///
/// # Safety
/// `cost` must hold `rows * cols` doubles and `out` `rows` elements.
#[no_mangle]
pub unsafe extern "C" fn ncd_hungarian_match(
    cost: *const f64,
    rows: usize,
    cols: usize,
    out: *mut isize,
) -> NcdStatus {
    guard(|| {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Fail(NcdStatus::InvalidArgument, "matrix too large".into()))?;
        let flat = slice_arg(cost, n, "cost")?;
        let matrix: Vec<Vec<f64>> = (0..rows).map(|r| flat[r * cols..(r + 1) * cols].to_vec()).collect();
        let pairs = hungarian_match(&matrix)?;
        if rows == 0 {
            return Ok(());
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let out = slice::from_raw_parts_mut(out, rows);
        out.fill(-1);
        for (r, c) in pairs {
            out[r] = c as isize;
        }
        Ok(())
    })
}

/// Mixed contrastive loss. `z` and `zp` are row-major `rows x dim` unit rows;
/// `labels[i] < 0` marks row `i` unlabelled.
///
/// # Safety
/// Buffers must hold `rows * dim` doubles and `rows` labels.
#[no_mangle]
pub unsafe extern "C" fn ncd_total_loss(
    z: *const f64,
    zp: *const f64,
    labels: *const i64,
    rows: usize,
    dim: usize,
    tau: f64,
    lambda: f64,
    out: *mut f64,
) -> NcdStatus {
    guard(|| {
        let n = rows
            .checked_mul(dim)
            .ok_or_else(|| Fail(NcdStatus::InvalidArgument, "batch too large".into()))?;
        let z = slice_arg(z, n, "z")?.to_vec();
        let zp = slice_arg(zp, n, "zp")?.to_vec();
        let labels = slice_arg(labels, rows, "labels")?
            .iter()
            .map(|&l| u32::try_from(l).ok())
            .collect();
        let batch = LossBatch::new(dim, z, zp, labels, tau, lambda)?;
        *out_arg(out, "out")? = total_loss(&batch)?;
        Ok(())
    })
}

/// Runs the full pipeline from a TOML config string into `out_dir`.
///
/// # Safety
/// Strings must be NUL-terminated; `report` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ncd_run_pipeline(
    config_toml: *const c_char,
    out_dir: *const c_char,
    report: *mut NcdReport,
) -> NcdStatus {
    guard(|| {
        let report = out_arg(report, "report")?;
        let cfg = PipelineConfig::from_toml_str(str_arg(config_toml, "config_toml")?)?;
        let out = PathBuf::from(str_arg(out_dir, "out_dir")?);
        let r = run_pipeline(&cfg, &out)?.report;
        *report = NcdReport {
            acc_all: r.acc_all,
            acc_old: r.acc_old.unwrap_or(f64::NAN),
            acc_new: r.acc_new.unwrap_or(f64::NAN),
            n_all: r.n_all,
            n_old: r.n_old,
            n_new: r.n_new,
        };
        Ok(())
    })
}
