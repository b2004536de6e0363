//! C ABI over the irtest core.
//!
//! Every function returns an [`IrtStatus`]; results are written through out
//! pointers. On failure, [`irt_last_error`] returns a message describing the
//! most recent error on the calling thread. Models and random streams are
//! opaque handles that must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use irtest::acquisition::{q_density, sample_state, AcquisitionParams};
use irtest::bench::PrCurve;
use irtest::isweights::{weight_plain, weight_rebalanced, RateEstimates, WeightCase};
use irtest::mixture::{solve_simplex_qp, QpProblem};
use irtest::spm::{self, init_model, MlpModel};
use irtest::{make_rng, Error, PredictionModel, Rng, TestState, UniformBox};
use ndarray::{Array1, Array2};

/// Status codes returned by every function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IrtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    NonFinite = 4,
    Undefined = 5,
    ZeroDenominator = 6,
    Io = 7,
    Format = 8,
    Panic = 9,
}

/// Opaque surrogate network.
pub struct IrtModel(MlpModel);

/// Opaque seeded random stream.
pub struct IrtRng(Rng);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> IrtStatus {
    match e {
        Error::InvalidArgument(_) | Error::SingleClass | Error::Empty(_) => IrtStatus::InvalidArgument,
        Error::DimensionMismatch { .. } => IrtStatus::DimensionMismatch,
        Error::NonFinite(_) => IrtStatus::NonFinite,
        Error::Undefined(_) => IrtStatus::Undefined,
        Error::ZeroDenominator(_) => IrtStatus::ZeroDenominator,
        Error::Io(_) => IrtStatus::Io,
        Error::Format(_) | Error::Json(_) | Error::Csv(_) => IrtStatus::Format,
    }
}

enum Fail {
    Null,
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> IrtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => IrtStatus::Ok,
        Ok(Err(Fail::Null)) => {
            set_error("null pointer argument".into());
            IrtStatus::NullPointer
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            IrtStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, n: usize) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null);
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize) -> Result<&'a mut [T], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null);
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn write<T>(out: *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null);
    }
    out.write(v);
    Ok(())
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(Fail::Null);
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::InvalidArgument("path is not UTF-8".into()))?;
    Ok(Path::new(s))
}

fn labels_of(labels: &[u8]) -> Vec<bool> {
    labels.iter().map(|&y| y != 0).collect()
}

/// Message for the last failed call on this thread, or null. The pointer is
/// valid until the next call that fails on the same thread.
#[no_mangle]
pub extern "C" fn irt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Create a random stream from a seed.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn irt_rng_new(seed: u64, out: *mut *mut IrtRng) -> IrtStatus {
    guard(|| write(out, Box::into_raw(Box::new(IrtRng(make_rng(seed))))))
}

/// # Safety
/// `rng` must come from [`irt_rng_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn irt_rng_free(rng: *mut IrtRng) {
    if !rng.is_null() {
        drop(Box::from_raw(rng));
    }
}

/// Randomly initialised network with input dimension `dim` and `n_hidden`
/// hidden layers of the given widths.
///
/// # Safety
/// `hidden` must point to `n_hidden` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn irt_model_init(
    dim: usize,
    hidden: *const usize,
    n_hidden: usize,
    seed: u64,
    out: *mut *mut IrtModel,
) -> IrtStatus {
    guard(|| {
        let hidden = slice(hidden, n_hidden)?;
        let m = init_model(dim, hidden, &mut make_rng(seed))?;
        write(out, Box::into_raw(Box::new(IrtModel(m))))
    })
}

/// Load a network saved by the core library.
///
/// # Safety
/// `file` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn irt_model_load(file: *const c_char, out: *mut *mut IrtModel) -> IrtStatus {
    guard(|| {
        let m = spm::io::load(path(file)?)?;
        write(out, Box::into_raw(Box::new(IrtModel(m))))
    })
}

/// # Safety
/// `model` must be a live handle; `file` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn irt_model_save(model: *const IrtModel, file: *const c_char) -> IrtStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null)?;
        spm::io::save(&m.0, path(file)?, serde_json::Value::Null)?;
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn irt_model_free(model: *mut IrtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn irt_model_input_dim(model: *const IrtModel, out: *mut usize) -> IrtStatus {
    guard(|| write(out, model.as_ref().ok_or(Fail::Null)?.0.input_dim()))
}

/// Failure probabilities for `n_rows` row-major states of width `dim`.
///
/// # Safety
/// `x` must hold `n_rows * dim` values and `out` room for `n_rows`.
#[no_mangle]
pub unsafe extern "C" fn irt_model_predict(
    model: *const IrtModel,
    x: *const f64,
    n_rows: usize,
    dim: usize,
    out: *mut f64,
) -> IrtStatus {
    guard(|| {
        let m = &model.as_ref().ok_or(Fail::Null)?.0;
        if dim != m.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: m.input_dim(),
                actual: dim,
            }
            .into());
        }
        let x = slice(x, n_rows * dim)?;
        let out = slice_mut(out, n_rows)?;
        for (row, o) in x.chunks_exact(dim.max(1)).zip(out.iter_mut()) {
            *o = m.predict(&TestState::new(row.to_vec())?);
        }
        Ok(())
    })
}

/// Importance weight `p/q` of a state.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn irt_weight_plain(
    in_critical: bool,
    epsilon: f64,
    critical_mass: f64,
    out: *mut f64,
) -> IrtStatus {
    guard(|| write(out, weight_plain(in_critical, epsilon, critical_mass)?))
}

/// Class-rebalanced importance weight of a labelled state.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn irt_weight_rebalanced(
    in_critical: bool,
    failed: bool,
    epsilon: f64,
    p_fail: f64,
    critical_mass: f64,
    precision: f64,
    out: *mut f64,
) -> IrtStatus {
    guard(|| {
        let rates = RateEstimates::from_parts(epsilon, p_fail, critical_mass, precision);
        write(out, weight_rebalanced(WeightCase::of(in_critical, failed), epsilon, &rates)?)
    })
}

/// Acquisition density at a state with naturalistic density `p_density`.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn irt_q_density(
    p_density: f64,
    in_critical: bool,
    epsilon: f64,
    f_th: f64,
    critical_mass: f64,
    out: *mut f64,
) -> IrtStatus {
    guard(|| {
        let params = AcquisitionParams::new(epsilon, f_th, critical_mass)?;
        write(out, q_density(p_density, in_critical, &params)?)
    })
}

/// Average precision of `scores` against 0/1 `labels`.
///
/// # Safety
/// `scores` and `labels` must hold `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn irt_average_precision(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> IrtStatus {
    guard(|| {
        let curve = PrCurve::new(slice(scores, n)?, &labels_of(slice(labels, n)?))?;
        write(out, curve.average_precision())
    })
}

/// Highest precision at recall of at least `recall`.
///
/// # Safety
/// `scores` and `labels` must hold `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn irt_precision_at_recall(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    recall: f64,
    out: *mut f64,
) -> IrtStatus {
    guard(|| {
        let curve = PrCurve::new(slice(scores, n)?, &labels_of(slice(labels, n)?))?;
        write(out, curve.precision_at_recall(recall)?)
    })
}

/// Minimise `|A alpha - t|^2` over the probability simplex. `a` is
/// row-major `n_rows x n_cols`; `warm_start` may be null.
///
/// # Safety
/// Buffers must match the given sizes; `alpha_out` needs `n_cols` slots.
#[no_mangle]
pub unsafe extern "C" fn irt_solve_simplex_qp(
    a: *const f64,
    t: *const f64,
    n_rows: usize,
    n_cols: usize,
    tol: f64,
    warm_start: *const f64,
    alpha_out: *mut f64,
    objective_out: *mut f64,
) -> IrtStatus {
    guard(|| {
        if !(tol > 0.0) {
            return Err(Error::InvalidArgument("tol must be positive".into()).into());
        }
        let a = Array2::from_shape_vec((n_rows, n_cols), slice(a, n_rows * n_cols)?.to_vec())
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let problem = QpProblem::new(a, Array1::from(slice(t, n_rows)?.to_vec()))?;
        let warm = if warm_start.is_null() { None } else { Some(slice(warm_start, n_cols)?) };
        let sol = solve_simplex_qp(&problem, tol, warm);
        slice_mut(alpha_out, n_cols)?.copy_from_slice(&sol.alpha);
        if !objective_out.is_null() {
            objective_out.write(sol.objective);
        }
        Ok(())
    })
}

/// Draw one state from the acquisition distribution built on `model` over
/// the uniform box `[low, high]^dim`.
///
/// # Safety
/// `low`, `high` and `state_out` must hold `dim` values; `rng` and `model`
/// must be live handles. `in_critical_out` may be null.
#[no_mangle]
pub unsafe extern "C" fn irt_sample_state(
    model: *const IrtModel,
    low: *const f64,
    high: *const f64,
    dim: usize,
    epsilon: f64,
    f_th: f64,
    critical_mass: f64,
    rng: *mut IrtRng,
    state_out: *mut f64,
    in_critical_out: *mut bool,
) -> IrtStatus {
    guard(|| {
        let m = &model.as_ref().ok_or(Fail::Null)?.0;
        let rng = &mut rng.as_mut().ok_or(Fail::Null)?.0;
        if dim != m.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: m.input_dim(),
                actual: dim,
            }
            .into());
        }
        let bounds = slice(low, dim)?.iter().copied().zip(slice(high, dim)?.iter().copied()).collect();
        let p = UniformBox::new(bounds)?;
        let params = AcquisitionParams::new(epsilon, f_th, critical_mass)?;
        let trace = sample_state(m, &p, &params, rng);
        slice_mut(state_out, dim)?.copy_from_slice(trace.state.as_slice());
        if !in_critical_out.is_null() {
            in_critical_out.write(trace.in_critical);
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn errors_set_message_and_code() {
        let mut w = 0.0;
        let s = unsafe { irt_weight_plain(true, 0.2, 0.0, &mut w) };
        assert_eq!(s, IrtStatus::ZeroDenominator);
        let msg = unsafe { CStr::from_ptr(irt_last_error()) }.to_str().unwrap();
        assert!(msg.contains("zero"), "{msg}");
        assert_eq!(unsafe { irt_weight_plain(true, 0.2, 0.5, ptr::null_mut()) }, IrtStatus::NullPointer);
    }
}
