//! C interface to `gamblet-core`.
//!
//! A `GambletSystem` handle owns an operator and its gamblet decomposition.
//! Every fallible function returns a [`GambletStatus`]; on failure the message
//! is available from [`gamblet_last_error_message`] on the same thread until
//! the next failing call. A handle may be shared between threads for the
//! read-only calls but must not be freed while in use.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use gamblet_core::denoise::{level_filter, select_level, DenoiseConfig};
use gamblet_core::gamblets::{transform, GambletSystem as CoreSystem, MultiresCoefficients};
use gamblet_core::hierarchy::Hierarchy;
use gamblet_core::nalgebra::DMatrix;
use gamblet_core::operators::{assemble_fem, CoefficientField, DiscreteOperator};
use gamblet_core::{GambletError, SymMatrix, Vector};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GambletStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    NotSpd = 4,
    NoConvergence = 5,
    Io = 6,
    Parse = 7,
    Panic = 8,
}

/// Coefficient field of a finite-element operator, passed as its integer
/// value.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GambletCoefficient {
    Unit = 0,
    Rough = 1,
}

/// Opaque handle to an operator and its gamblet decomposition.
pub struct GambletSystem {
    op: DiscreteOperator,
    sys: CoreSystem,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &GambletError) -> GambletStatus {
    match e {
        GambletError::NotSpd { .. } => GambletStatus::NotSpd,
        GambletError::DimensionMismatch { .. } | GambletError::ShapeMismatch(_) => {
            GambletStatus::DimensionMismatch
        }
        GambletError::NoConvergence { .. } | GambletError::NoBracket { .. } => {
            GambletStatus::NoConvergence
        }
        GambletError::Io { .. } => GambletStatus::Io,
        GambletError::Parse { .. } => GambletStatus::Parse,
        _ => GambletStatus::InvalidArgument,
    }
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), (GambletStatus, String)>) -> GambletStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GambletStatus::Ok,
        Ok(Err((status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("internal error: {msg}"));
            GambletStatus::Panic
        }
    }
}

fn core<T>(r: gamblet_core::Result<T>) -> Result<T, (GambletStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (GambletStatus, String) {
    (GambletStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: String) -> (GambletStatus, String) {
    (GambletStatus::InvalidArgument, msg)
}

fn system<'a>(h: *const GambletSystem) -> Result<&'a GambletSystem, (GambletStatus, String)> {
    // SAFETY: non-null handles come from `Box::into_raw` in this crate.
    unsafe { h.as_ref() }.ok_or_else(|| null("system handle"))
}

fn input<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], (GambletStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: the caller guarantees `len` readable values at `p`.
    Ok(unsafe { slice::from_raw_parts(p, len) })
}

fn output<'a>(
    p: *mut f64,
    len: usize,
    what: &str,
) -> Result<&'a mut [f64], (GambletStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: the caller guarantees `len` writable values at `p`.
    Ok(unsafe { slice::from_raw_parts_mut(p, len) })
}

fn expect_len(expected: usize, actual: usize, what: &str) -> Result<(), (GambletStatus, String)> {
    if expected == actual {
        Ok(())
    } else {
        Err((
            GambletStatus::DimensionMismatch,
            format!("{what}: expected length {expected}, got {actual}"),
        ))
    }
}

fn publish(
    out: *mut *mut GambletSystem,
    value: GambletSystem,
) -> Result<(), (GambletStatus, String)> {
    if out.is_null() {
        return Err(null("output handle pointer"));
    }
    // SAFETY: `out` is non-null and points to writable storage for a pointer.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Message of the last failed call on this thread, or null if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn gamblet_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Forgets the last error message of this thread.
#[no_mangle]
pub extern "C" fn gamblet_clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn gamblet_version() -> *const c_char {
    static VERSION: &CStr =
        match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
            Ok(v) => v,
            Err(_) => panic!("version string"),
        };
    VERSION.as_ptr()
}

/// Builds the finite-element operator of `-div(a grad u)` on the unit
/// interval (`dim = 1`) or square (`dim = 2`) with `2^q` cells per axis and
/// computes its gamblet decomposition. `coefficient` is a
/// [`GambletCoefficient`] value; `trunc = 0` keeps every entry.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn gamblet_system_new_fem(
    dim: usize,
    q: usize,
    coefficient: u32,
    trunc: f64,
    out: *mut *mut GambletSystem,
) -> GambletStatus {
    guard(|| {
        let field = match (coefficient, dim) {
            (c, d) if c == GambletCoefficient::Unit as u32 => CoefficientField::unit(d),
            (c, 1) if c == GambletCoefficient::Rough as u32 => CoefficientField::rough_1d(),
            (c, _) if c == GambletCoefficient::Rough as u32 => CoefficientField::rough_2d(),
            (c, _) => return Err(invalid(format!("unknown coefficient {c}"))),
        };
        let h = core(Hierarchy::build_dyadic(dim, q))?;
        let op = core(assemble_fem(&field, &h))?;
        let sys = core(transform(&op, &h, trunc))?;
        publish(out, GambletSystem { op, sys })
    })
}

/// Decomposes a caller-supplied SPD matrix (row-major, `n × n`) on the
/// dyadic hierarchy of dimension `dim` with `q` levels; `n` must equal
/// `2^(dim·q)`.
///
/// # Safety
/// `matrix` must point to `n * n` readable values and `out` to writable
/// storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn gamblet_system_new_dense(
    dim: usize,
    q: usize,
    matrix: *const f64,
    n: usize,
    trunc: f64,
    out: *mut *mut GambletSystem,
) -> GambletStatus {
    guard(|| {
        let h = core(Hierarchy::build_dyadic(dim, q))?;
        expect_len(h.fine_size(), n, "matrix side")?;
        let values = input(matrix, n * n, "matrix")?;
        let m = core(SymMatrix::new(DMatrix::from_row_slice(n, n, values)))?;
        let op = DiscreteOperator::from_matrix(m, q);
        let sys = core(transform(&op, &h, trunc))?;
        publish(out, GambletSystem { op, sys })
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `handle` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gamblet_system_free(handle: *mut GambletSystem) {
    if !handle.is_null() {
        // SAFETY: per the contract above the handle came from `Box::into_raw`.
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// Number of levels `q`, or 0 for a null handle.
///
/// # Safety
/// `handle` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gamblet_system_levels(handle: *const GambletSystem) -> usize {
    system(handle).map_or(0, |s| s.sys.q())
}

/// Number of fine unknowns, or 0 for a null handle.
///
/// # Safety
/// `handle` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gamblet_system_fine_size(handle: *const GambletSystem) -> usize {
    system(handle).map_or(0, |s| s.sys.fine_size())
}

/// Number of coefficients `|J^(k)|` on level `k` (`1 ≤ k ≤ q`).
///
/// # Safety
/// `handle` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn gamblet_system_level_size(
    handle: *const GambletSystem,
    k: usize,
    out: *mut usize,
) -> GambletStatus {
    guard(|| {
        let s = system(handle)?;
        if k == 0 || k > s.sys.q() {
            return Err(invalid(format!("level {k} outside 1..={}", s.sys.q())));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: checked non-null above.
        unsafe { *out = s.sys.hierarchy().detail_size(k) };
        Ok(())
    })
}

/// Solves `A x = f` with the multilevel solver.
///
/// # Safety
/// `f` and `x` must each point to `n` values, `n` being the fine size.
#[no_mangle]
pub unsafe extern "C" fn gamblet_system_solve(
    handle: *const GambletSystem,
    f: *const f64,
    x: *mut f64,
    n: usize,
) -> GambletStatus {
    guard(|| {
        let s = system(handle)?;
        expect_len(s.sys.fine_size(), n, "vector")?;
        let f = Vector::from_column_slice(input(f, n, "f")?);
        let sol = core(s.sys.solve(&f))?;
        output(x, n, "x")?.copy_from_slice(sol.as_slice());
        Ok(())
    })
}

/// Multiresolution coefficients `c^(1), …, c^(q)` of `y`, concatenated by
/// level (total length equals the fine size).
///
/// # Safety
/// `y` and `coeffs` must each point to `n` values.
#[no_mangle]
pub unsafe extern "C" fn gamblet_system_analyze(
    handle: *const GambletSystem,
    y: *const f64,
    coeffs: *mut f64,
    n: usize,
) -> GambletStatus {
    guard(|| {
        let s = system(handle)?;
        expect_len(s.sys.fine_size(), n, "vector")?;
        let y = Vector::from_column_slice(input(y, n, "y")?);
        let c = core(s.sys.analyze(&y))?;
        let out = output(coeffs, n, "coeffs")?;
        let mut at = 0;
        for level in c.levels() {
            out[at..at + level.len()].copy_from_slice(level.as_slice());
            at += level.len();
        }
        Ok(())
    })
}

/// Inverse of [`gamblet_system_analyze`] using levels `1..=upto` only.
///
/// # Safety
/// `coeffs` and `y` must each point to `n` values.
#[no_mangle]
pub unsafe extern "C" fn gamblet_system_reconstruct(
    handle: *const GambletSystem,
    coeffs: *const f64,
    upto: usize,
    y: *mut f64,
    n: usize,
) -> GambletStatus {
    guard(|| {
        let s = system(handle)?;
        expect_len(s.sys.fine_size(), n, "vector")?;
        let flat = input(coeffs, n, "coeffs")?;
        let mut levels = Vec::with_capacity(s.sys.q());
        let mut at = 0;
        for size in s.sys.hierarchy().detail_sizes() {
            levels.push(Vector::from_column_slice(&flat[at..at + size]));
            at += size;
        }
        let v = core(s.sys.reconstruct(&MultiresCoefficients::new(levels), upto))?;
        output(y, n, "y")?.copy_from_slice(v.as_slice());
        Ok(())
    })
}

/// Keeps levels `1..=level` of `y`; `level = q` returns `y`.
///
/// # Safety
/// `y` and `out` must each point to `n` values.
#[no_mangle]
pub unsafe extern "C" fn gamblet_system_level_filter(
    handle: *const GambletSystem,
    y: *const f64,
    level: usize,
    out: *mut f64,
    n: usize,
) -> GambletStatus {
    guard(|| {
        let s = system(handle)?;
        expect_len(s.sys.fine_size(), n, "vector")?;
        let y = Vector::from_column_slice(input(y, n, "y")?);
        let r = core(level_filter(&s.sys, &y, level))?;
        output(out, n, "out")?.copy_from_slice(r.recovered.as_slice());
        Ok(())
    })
}

/// Energy norm `sqrt(xᵀ A x)` of a fine vector.
///
/// # Safety
/// `x` must point to `n` values and `out` to one writable value.
#[no_mangle]
pub unsafe extern "C" fn gamblet_system_energy_norm(
    handle: *const GambletSystem,
    x: *const f64,
    n: usize,
    out: *mut f64,
) -> GambletStatus {
    guard(|| {
        let s = system(handle)?;
        expect_len(s.sys.fine_size(), n, "vector")?;
        let x = Vector::from_column_slice(input(x, n, "x")?);
        let e = core(gamblet_core::gamblets::energy_norm(&s.op, &x))?;
        output(out, 1, "out")?[0] = e;
        Ok(())
    })
}

/// Near-minimax level `l†` for a dyadic problem of dimension `dim`
/// (`h = 1/2`, `s = 1`).
///
/// # Safety
/// `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn gamblet_select_level(
    dim: usize,
    q: usize,
    sigma: f64,
    m: f64,
    out: *mut usize,
) -> GambletStatus {
    guard(|| {
        let cfg = core(DenoiseConfig::new(dim, q, sigma, m))?;
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: checked non-null above.
        unsafe { *out = select_level(&cfg) };
        Ok(())
    })
}
