//! C ABI over `fmtc-core`.
//!
//! Every function returns an [`FmtcStatus`]. On failure a message is kept in
//! thread-local storage and can be read with [`fmtc_last_error_message`].
//! Matrices cross the boundary as dense row-major `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use fmtc_core::clustering::{out_of_sample, KMeansResult};
use fmtc_core::graph::{DataMatrix, Sigma};
use fmtc_core::metrics::{accuracy, nmi, rand_index, LabelVector};
use fmtc_core::orchestrator::{fit, HyperParams};
use fmtc_core::FmtcError;
use nalgebra::DMatrix;

const RESTARTS: usize = 10;

/// Result codes. `FMTC_STATUS_OK` is zero.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FmtcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Numeric = 4,
    Io = 5,
    BufferTooSmall = 6,
    Internal = 7,
    Panic = 8,
}

/// Solver settings. Fill with [`fmtc_params_default`] and override fields.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FmtcParams {
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    pub p: f64,
    pub clusters: usize,
    pub knn_k: usize,
    /// Kernel bandwidth; zero or negative selects the median heuristic.
    pub sigma: f64,
    pub eta: f64,
    pub inner_iters: usize,
    pub max_rounds: usize,
    pub tol_primal: f64,
    pub tol_obj: f64,
    pub seed: u64,
    pub parallel: bool,
}

impl From<&HyperParams> for FmtcParams {
    fn from(h: &HyperParams) -> Self {
        FmtcParams {
            alpha: h.alpha,
            beta: h.beta,
            rho: h.rho,
            p: h.p,
            clusters: h.clusters,
            knn_k: h.knn_k,
            sigma: match h.sigma {
                Sigma::Auto => 0.0,
                Sigma::Fixed(s) => s,
            },
            eta: h.eta,
            inner_iters: h.inner_iters,
            max_rounds: h.max_rounds,
            tol_primal: h.tol_primal,
            tol_obj: h.tol_obj,
            seed: h.seed,
            parallel: h.parallel,
        }
    }
}

impl From<&FmtcParams> for HyperParams {
    fn from(p: &FmtcParams) -> Self {
        HyperParams {
            alpha: p.alpha,
            beta: p.beta,
            rho: p.rho,
            p: p.p,
            clusters: p.clusters,
            knn_k: p.knn_k,
            sigma: if p.sigma > 0.0 {
                Sigma::Fixed(p.sigma)
            } else {
                Sigma::Auto
            },
            eta: p.eta,
            inner_iters: p.inner_iters,
            max_rounds: p.max_rounds,
            tol_primal: p.tol_primal,
            tol_obj: p.tol_obj,
            seed: p.seed,
            parallel: p.parallel,
        }
    }
}

/// Opaque fitted model.
pub struct FmtcModel {
    inner: fmtc_core::orchestrator::FmtcModel,
    clusters: Vec<KMeansResult>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &FmtcError) -> FmtcStatus {
    match e {
        FmtcError::InvalidParameter(_) | FmtcError::Config(_) => FmtcStatus::InvalidArgument,
        FmtcError::DimensionMismatch(_) => FmtcStatus::DimensionMismatch,
        FmtcError::IsolatedVertex { .. }
        | FmtcError::DegenerateData(_)
        | FmtcError::DegenerateProjection { .. }
        | FmtcError::Numeric(_) => FmtcStatus::Numeric,
        FmtcError::Parse { .. } | FmtcError::Io { .. } => FmtcStatus::Io,
        FmtcError::Internal(_) => FmtcStatus::Internal,
        FmtcError::Client { source, .. } | FmtcError::Server { source, .. } => status_of(source),
    }
}

struct Failure(FmtcStatus, String);

impl From<FmtcError> for Failure {
    fn from(e: FmtcError) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn fail(status: FmtcStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, converting errors and panics into a status plus stored message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FmtcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FmtcStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            FmtcStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    // SAFETY: callers pass either null or a pointer to a live `T`.
    unsafe { p.as_ref() }.ok_or_else(|| fail(FmtcStatus::NullPointer, format!("{name} is null")))
}

/// Borrows `len` elements; a zero length accepts a null pointer.
unsafe fn view<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(FmtcStatus::NullPointer, format!("{name} is null")));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn view_mut<'a, T>(p: *mut T, len: usize, name: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(fail(FmtcStatus::NullPointer, format!("{name} is null")));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

fn checked_len(rows: usize, cols: usize) -> Result<usize, Failure> {
    rows.checked_mul(cols)
        .ok_or_else(|| fail(FmtcStatus::InvalidArgument, "matrix size overflows"))
}

fn write_out<T>(out: *mut T, value: T, name: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(FmtcStatus::NullPointer, format!("{name} is null")));
    }
    // SAFETY: non-null and, per the contract, valid for writes.
    unsafe { out.write(value) };
    Ok(())
}

fn copy_row_major(m: &DMatrix<f64>, buf: *mut f64, len: usize) -> Result<(), Failure> {
    let need = m.nrows() * m.ncols();
    if len < need {
        return Err(fail(
            FmtcStatus::BufferTooSmall,
            format!("buffer holds {len} values, {need} needed"),
        ));
    }
    // SAFETY: the caller guarantees `len` writable doubles at `buf`.
    let out = unsafe { view_mut(buf, len, "buffer") }?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out[i * m.ncols() + j] = m[(i, j)];
        }
    }
    Ok(())
}

fn client_index(model: &FmtcModel, client: usize) -> Result<usize, Failure> {
    if client >= model.inner.num_clients() {
        return Err(fail(
            FmtcStatus::InvalidArgument,
            format!(
                "client {client} out of range, model has {}",
                model.inner.num_clients()
            ),
        ));
    }
    Ok(client)
}

/// Message for the most recent failure on this thread, or null after a
/// success. Valid until the next `fmtc_*` call on the same thread.
#[no_mangle]
pub extern "C" fn fmtc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Writes the library defaults into `out`.
///
/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fmtc_params_default(out: *mut FmtcParams) -> FmtcStatus {
    guard(|| write_out(out, FmtcParams::from(&HyperParams::default()), "out"))
}

/// Fits a model. `data[t]` points at `rows[t] * cols` row-major doubles for
/// client `t`. On success `*out` receives a handle to release with
/// [`fmtc_model_free`].
///
/// # Safety
/// `data` and `rows` must each hold `num_clients` entries, every `data[t]`
/// must be readable for `rows[t] * cols` doubles, `params` must be null or
/// valid, and `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fmtc_fit(
    data: *const *const f64,
    rows: *const usize,
    num_clients: usize,
    cols: usize,
    params: *const FmtcParams,
    out: *mut *mut FmtcModel,
) -> FmtcStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(FmtcStatus::NullPointer, "out is null"));
        }
        out.write(ptr::null_mut());
        let params = non_null(params, "params")?;
        let data = view(data, num_clients, "data")?;
        let rows = view(rows, num_clients, "rows")?;
        let mut datasets = Vec::with_capacity(num_clients);
        for (t, (&p, &n)) in data.iter().zip(rows).enumerate() {
            let values = view(p, checked_len(n, cols)?, &format!("data[{t}]"))?;
            datasets.push(DataMatrix::from_rows(n, cols, values)?);
        }
        let inner = fit(&datasets, &HyperParams::from(params))?;
        let clusters = inner.cluster(RESTARTS)?;
        out.write(Box::into_raw(Box::new(FmtcModel { inner, clusters })));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from [`fmtc_fit`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fmtc_model_free(model: *mut FmtcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of clients, rounds run and whether the stopping rule fired.
///
/// # Safety
/// `model` must be a live handle; the out pointers must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fmtc_model_info(
    model: *const FmtcModel,
    num_clients: *mut usize,
    rounds: *mut usize,
    converged: *mut bool,
) -> FmtcStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        write_out(num_clients, m.inner.num_clients(), "num_clients")?;
        write_out(rounds, m.inner.trace().len(), "rounds")?;
        write_out(converged, m.inner.converged(), "converged")
    })
}

/// Shape of client `client`'s projection `W` (features × clusters).
///
/// # Safety
/// `model` must be a live handle; the out pointers must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fmtc_model_w_shape(
    model: *const FmtcModel,
    client: usize,
    rows: *mut usize,
    cols: *mut usize,
) -> FmtcStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let w = m.inner.w(client_index(m, client)?);
        write_out(rows, w.nrows(), "rows")?;
        write_out(cols, w.ncols(), "cols")
    })
}

/// Copies `W` row-major into `buf`, which holds `len` doubles.
///
/// # Safety
/// `model` must be a live handle and `buf` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fmtc_model_w(
    model: *const FmtcModel,
    client: usize,
    buf: *mut f64,
    len: usize,
) -> FmtcStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        copy_row_major(m.inner.w(client_index(m, client)?), buf, len)
    })
}

/// Shape of client `client`'s embedding `F` (samples × clusters).
///
/// # Safety
/// `model` must be a live handle; the out pointers must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fmtc_model_f_shape(
    model: *const FmtcModel,
    client: usize,
    rows: *mut usize,
    cols: *mut usize,
) -> FmtcStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let f = m.inner.f(client_index(m, client)?);
        write_out(rows, f.nrows(), "rows")?;
        write_out(cols, f.ncols(), "cols")
    })
}

/// Copies `F` row-major into `buf`, which holds `len` doubles.
///
/// # Safety
/// `model` must be a live handle and `buf` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fmtc_model_f(
    model: *const FmtcModel,
    client: usize,
    buf: *mut f64,
    len: usize,
) -> FmtcStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        copy_row_major(m.inner.f(client_index(m, client)?), buf, len)
    })
}

/// Cluster labels of the training samples of `client`; `len` must be at
/// least the client's sample count.
///
/// # Safety
/// `model` must be a live handle and `labels` writable for `len` entries.
#[no_mangle]
pub unsafe extern "C" fn fmtc_model_labels(
    model: *const FmtcModel,
    client: usize,
    labels: *mut usize,
    len: usize,
) -> FmtcStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let own = &m.clusters[client_index(m, client)?].labels;
        if len < own.len() {
            return Err(fail(
                FmtcStatus::BufferTooSmall,
                format!("buffer holds {len} labels, {} needed", own.len()),
            ));
        }
        view_mut(labels, len, "labels")?[..own.len()].copy_from_slice(own);
        Ok(())
    })
}

/// Labels `rows` unseen samples (row-major, `cols` features) with client
/// `client`'s frozen projection and centroids.
///
/// # Safety
/// `model` must be a live handle, `x` readable for `rows * cols` doubles and
/// `labels` writable for `rows` entries.
#[no_mangle]
pub unsafe extern "C" fn fmtc_model_predict(
    model: *const FmtcModel,
    client: usize,
    x: *const f64,
    rows: usize,
    cols: usize,
    labels: *mut usize,
) -> FmtcStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let t = client_index(m, client)?;
        let values = view(x, checked_len(rows, cols)?, "x")?;
        let x = DMatrix::from_row_slice(rows, cols, values);
        let pred = out_of_sample(&x, m.inner.w(t), &m.clusters[t].centroids)?;
        view_mut(labels, rows, "labels")?.copy_from_slice(&pred);
        Ok(())
    })
}

/// Which score [`fmtc_score`] computes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FmtcMetric {
    Accuracy = 0,
    Nmi = 1,
    RandIndex = 2,
}

/// Compares two labelings of `n` samples.
///
/// # Safety
/// `pred` and `truth` must be readable for `n` entries; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fmtc_score(
    metric: FmtcMetric,
    pred: *const usize,
    truth: *const usize,
    n: usize,
    out: *mut f64,
) -> FmtcStatus {
    guard(|| {
        let pred = LabelVector::new(view(pred, n, "pred")?.to_vec());
        let truth = LabelVector::new(view(truth, n, "truth")?.to_vec());
        let value = match metric {
            FmtcMetric::Accuracy => accuracy(&pred, &truth)?,
            FmtcMetric::Nmi => nmi(&pred, &truth)?,
            FmtcMetric::RandIndex => rand_index(&pred, &truth)?,
        };
        write_out(out, value, "out")
    })
}
