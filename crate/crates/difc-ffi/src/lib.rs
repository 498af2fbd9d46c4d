//! C ABI over the difc solvers. Every entry point returns a `DifcStatus`;
//! on failure a thread-local message is kept and can be fetched with
//! [`difc_last_error_message`] until the next failing call on the same
//! thread. Result data lives behind the opaque `DifcResult` handle, which
//! the caller frees with [`difc_result_free`]. Panics never cross the
//! boundary; they are caught and reported as numerical failures.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use difc::fem::{error_norm, solve_forward, NormKind, EXACT_LEVEL};
use difc::field::ScalarField;
use difc::lmm::{discovery_stable, recover_with_default_seeds, reference_trajectory};
use difc::mesh::build_uniform_mesh;
use difc::recon_fem::{reconstruct_fem, FemReconConfig};
use difc::study::{fit_rate, parameter_choice, parse_method};
use difc::synth::{make_observation, problem, NoiseMode, NormTag};
use difc::Error;

/// Status codes shared by every entry point. They mirror the CLI exit
/// codes: 0 success, 1 numerical failure, 2 invalid input.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DifcStatus {
    Ok = 0,
    Numerical = 1,
    Invalid = 2,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(e: &Error) -> DifcStatus {
    set_error(&e.to_string());
    match e {
        Error::Numerical(_) => DifcStatus::Numerical,
        _ => DifcStatus::Invalid,
    }
}

fn invalid_arg(msg: &str) -> DifcStatus {
    set_error(msg);
    DifcStatus::Invalid
}

fn guard(f: impl FnOnce() -> DifcStatus) -> DifcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            DifcStatus::Numerical
        }
    }
}

/// Message of the most recent failure on this thread, empty when none.
/// The pointer stays valid until the next failing call on the same thread.
///
/// # Safety
/// The returned pointer must not be freed or written through.
#[no_mangle]
pub unsafe extern "C" fn difc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
///
/// # Safety
/// The returned pointer is static and must not be freed.
#[no_mangle]
pub unsafe extern "C" fn difc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

unsafe fn utf8_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, DifcStatus> {
    if ptr.is_null() {
        return Err(invalid_arg(&format!("{what} must not be null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| invalid_arg(&format!("{what} must be valid UTF-8")))
}

/// Nodal solver output: mesh coordinates, state, coefficient, and the
/// headline errors. Opaque to C; use the accessor functions.
pub struct DifcResult {
    dim: usize,
    coordinates: Vec<f64>,
    state: Vec<f64>,
    coefficient: Vec<f64>,
    l2_error: f64,
    weighted_error: f64,
    converged: bool,
    iterations: usize,
}

impl DifcResult {
    fn node_count(&self) -> usize {
        self.state.len()
    }
}

unsafe fn write_handle(out: *mut *mut DifcResult, result: DifcResult) -> DifcStatus {
    if out.is_null() {
        return invalid_arg("out must not be null");
    }
    *out = Box::into_raw(Box::new(result));
    DifcStatus::Ok
}

/// Solve the Dirichlet problem of a registered benchmark on a uniform
/// mesh with `cells` cells per side. The handle's state is the finite
/// element solution, its coefficient the true one sampled at the nodes,
/// `l2_error` the state L2 error and `weighted_error` the H1 seminorm
/// error against the manufactured solution.
///
/// # Safety
/// `problem_id` must be a NUL-terminated string and `out` a valid pointer;
/// the returned handle must be released with `difc_result_free`.
#[no_mangle]
pub unsafe extern "C" fn difc_forward_solve(
    problem_id: *const c_char,
    cells: usize,
    out: *mut *mut DifcResult,
) -> DifcStatus {
    let name = match utf8_arg(problem_id, "problem_id") {
        Ok(s) => s,
        Err(status) => return status,
    };
    guard(|| {
        let prob = match problem(name) {
            Ok(p) => p,
            Err(e) => return fail(&e),
        };
        let mesh = match build_uniform_mesh(prob.dim, cells) {
            Ok(m) => Arc::new(m),
            Err(e) => return fail(&e),
        };
        let solved = solve_forward(
            &mesh,
            EXACT_LEVEL,
            EXACT_LEVEL,
            |_, _, x| prob.a_true.value(x),
            |_, _, x| prob.f.value(x),
        );
        let (u_h, _) = match solved {
            Ok(pair) => pair,
            Err(e) => return fail(&e),
        };
        let result = DifcResult {
            dim: prob.dim,
            coordinates: flatten_nodes(&mesh.nodes, prob.dim),
            coefficient: mesh
                .nodes
                .iter()
                .map(|p| prob.a_true.value(&p[..prob.dim]))
                .collect(),
            l2_error: error_norm(&u_h, &prob.u_true, NormKind::L2, EXACT_LEVEL),
            weighted_error: error_norm(&u_h, &prob.u_true, NormKind::H1Semi, EXACT_LEVEL),
            state: u_h.values,
            converged: true,
            iterations: 0,
        };
        write_handle(out, result)
    })
}

fn flatten_nodes(nodes: &[[f64; 2]], dim: usize) -> Vec<f64> {
    let mut flat = Vec::with_capacity(nodes.len() * dim);
    for p in nodes {
        flat.extend_from_slice(&p[..dim]);
    }
    flat
}

/// Tikhonov finite element reconstruction from a smooth synthetic
/// observation at noise level `delta`. Pass `cells = 0` or a negative
/// `gamma` to couple that parameter to delta through the built-in rule
/// (mesh width tracking sqrt(delta), penalty tracking delta squared).
/// The handle's coefficient is the reconstruction, the state the final
/// forward solve, and `l2_error`/`weighted_error` compare the coefficient
/// against the true one.
///
/// # Safety
/// `problem_id` must be a NUL-terminated string and `out` a valid pointer;
/// the returned handle must be released with `difc_result_free`.
#[no_mangle]
pub unsafe extern "C" fn difc_fem_reconstruct(
    problem_id: *const c_char,
    delta: f64,
    cells: usize,
    gamma: f64,
    seed: u64,
    out: *mut *mut DifcResult,
) -> DifcStatus {
    let name = match utf8_arg(problem_id, "problem_id") {
        Ok(s) => s,
        Err(status) => return status,
    };
    guard(|| {
        let prob = match problem(name) {
            Ok(p) => p,
            Err(e) => return fail(&e),
        };
        let coupled = match parameter_choice(delta, 1.0, 1.0) {
            Ok(pc) => pc,
            Err(e) => return fail(&e),
        };
        let cells = if cells == 0 { coupled.cells } else { cells };
        let gamma = if gamma < 0.0 { coupled.gamma } else { gamma };
        let mesh = match build_uniform_mesh(prob.dim, cells) {
            Ok(m) => Arc::new(m),
            Err(e) => return fail(&e),
        };
        let obs = match make_observation(
            &prob,
            delta,
            NormTag::L2,
            NoiseMode::Smooth,
            seed,
            Some(&mesh),
        ) {
            Ok(o) => o,
            Err(e) => return fail(&e),
        };
        let cfg = match FemReconConfig::new(gamma, prob.bounds) {
            Ok(mut c) => {
                c.seed = seed;
                c
            }
            Err(e) => return fail(&e),
        };
        let recon = match reconstruct_fem(&prob, &obs, &mesh, &cfg) {
            Ok(r) => r,
            Err(e) => return fail(&e),
        };
        let result = DifcResult {
            dim: prob.dim,
            coordinates: flatten_nodes(&mesh.nodes, prob.dim),
            state: recon.u_h.values,
            coefficient: recon.a_h.values,
            l2_error: recon.l2_error,
            weighted_error: recon.weighted_error,
            converged: recon.converged,
            iterations: recon.iterations,
        };
        write_handle(out, result)
    })
}

/// Spatial dimension of the handle's mesh, 0 for a null handle.
///
/// # Safety
/// `result` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn difc_result_dim(result: *const DifcResult) -> usize {
    result.as_ref().map_or(0, |r| r.dim)
}

/// Number of mesh nodes, 0 for a null handle.
///
/// # Safety
/// `result` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn difc_result_len(result: *const DifcResult) -> usize {
    result.as_ref().map_or(0, |r| r.node_count())
}

unsafe fn copy_out(src: &[f64], buf: *mut f64, len: usize) -> DifcStatus {
    if buf.is_null() {
        return invalid_arg("buffer must not be null");
    }
    if len != src.len() {
        return invalid_arg(&format!(
            "buffer holds {len} values, need exactly {}",
            src.len()
        ));
    }
    std::ptr::copy_nonoverlapping(src.as_ptr(), buf, len);
    DifcStatus::Ok
}

/// Copy the node coordinates into `buf`, which must hold exactly
/// `dim * len` doubles, laid out per node.
///
/// # Safety
/// `result` must be a live handle and `buf` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn difc_result_coordinates(
    result: *const DifcResult,
    buf: *mut f64,
    len: usize,
) -> DifcStatus {
    match result.as_ref() {
        Some(r) => copy_out(&r.coordinates, buf, len),
        None => invalid_arg("result must not be null"),
    }
}

/// Copy the nodal state values into `buf` (exactly `len` doubles).
///
/// # Safety
/// `result` must be a live handle and `buf` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn difc_result_state(
    result: *const DifcResult,
    buf: *mut f64,
    len: usize,
) -> DifcStatus {
    match result.as_ref() {
        Some(r) => copy_out(&r.state, buf, len),
        None => invalid_arg("result must not be null"),
    }
}

/// Copy the nodal coefficient values into `buf` (exactly `len` doubles).
///
/// # Safety
/// `result` must be a live handle and `buf` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn difc_result_coefficient(
    result: *const DifcResult,
    buf: *mut f64,
    len: usize,
) -> DifcStatus {
    match result.as_ref() {
        Some(r) => copy_out(&r.coefficient, buf, len),
        None => invalid_arg("result must not be null"),
    }
}

/// Headline L2 error of the handle, NaN for a null handle.
///
/// # Safety
/// `result` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn difc_result_l2_error(result: *const DifcResult) -> f64 {
    result.as_ref().map_or(f64::NAN, |r| r.l2_error)
}

/// Secondary error of the handle (weighted coefficient error for
/// reconstructions, H1 seminorm error for forward solves); NaN when null.
///
/// # Safety
/// `result` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn difc_result_weighted_error(result: *const DifcResult) -> f64 {
    result.as_ref().map_or(f64::NAN, |r| r.weighted_error)
}

/// 1 when the optimizer met its tolerance, 0 when it hit the iteration
/// cap, -1 for a null handle.
///
/// # Safety
/// `result` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn difc_result_converged(result: *const DifcResult) -> i32 {
    result.as_ref().map_or(-1, |r| i32::from(r.converged))
}

/// Optimizer iterations behind the handle, 0 for forward solves or null.
///
/// # Safety
/// `result` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn difc_result_iterations(result: *const DifcResult) -> usize {
    result.as_ref().map_or(0, |r| r.iterations)
}

/// Release a handle. Null is a no-op; a handle must not be freed twice.
///
/// # Safety
/// `result` must be null or an unfreed handle from this library.
#[no_mangle]
pub unsafe extern "C" fn difc_result_free(result: *mut DifcResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// Discovery stability of a multistep method named like "ab2", "am3" or
/// "bdf4": writes 1/0 into `stable`, the number of sigma-root moduli into
/// `n_moduli`, and up to `capacity` moduli into `moduli` (which may be
/// null when `capacity` is 0). Fails with an invalid-input status when the
/// moduli do not fit.
///
/// # Safety
/// `method` must be NUL-terminated; `stable` and `n_moduli` must be valid
/// pointers; `moduli` must be writable for `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn difc_lmm_stability(
    method: *const c_char,
    stable: *mut i32,
    moduli: *mut f64,
    capacity: usize,
    n_moduli: *mut usize,
) -> DifcStatus {
    let name = match utf8_arg(method, "method") {
        Ok(s) => s,
        Err(status) => return status,
    };
    if stable.is_null() || n_moduli.is_null() {
        return invalid_arg("stable and n_moduli must not be null");
    }
    guard(|| {
        let scheme = match parse_method(name) {
            Ok(s) => s,
            Err(e) => return fail(&e),
        };
        let report = match discovery_stable(&scheme) {
            Ok(r) => r,
            Err(e) => return fail(&e),
        };
        *n_moduli = report.root_moduli.len();
        if report.root_moduli.len() > capacity {
            return invalid_arg(&format!(
                "moduli buffer holds {capacity} values, need {}",
                report.root_moduli.len()
            ));
        }
        if !report.root_moduli.is_empty() {
            if moduli.is_null() {
                return invalid_arg("moduli must not be null");
            }
            std::ptr::copy_nonoverlapping(
                report.root_moduli.as_ptr(),
                moduli,
                report.root_moduli.len(),
            );
        }
        *stable = i32::from(report.stable);
        DifcStatus::Ok
    })
}

/// Recover the right-hand side of y' = y, y(0) = 1 from an exact
/// trajectory with `n` steps of size `h`, using the named multistep
/// method, and write the sup-norm recovery error into `max_error`.
///
/// # Safety
/// `method` must be NUL-terminated and `max_error` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn difc_lmm_recover(
    method: *const c_char,
    h: f64,
    n: usize,
    max_error: *mut f64,
) -> DifcStatus {
    let name = match utf8_arg(method, "method") {
        Ok(s) => s,
        Err(status) => return status,
    };
    if max_error.is_null() {
        return invalid_arg("max_error must not be null");
    }
    guard(|| {
        let scheme = match parse_method(name) {
            Ok(s) => s,
            Err(e) => return fail(&e),
        };
        let f = |y: &[f64]| y.to_vec();
        let traj = match reference_trajectory(&f, &[1.0], h, n) {
            Ok(t) => t,
            Err(e) => return fail(&e),
        };
        let fhat = match recover_with_default_seeds(&scheme, &traj) {
            Ok(v) => v,
            Err(e) => return fail(&e),
        };
        let mut worst = 0.0f64;
        for (row, state) in fhat.iter().zip(&traj.states) {
            for (a, b) in row.iter().zip(state) {
                worst = worst.max((a - b).abs());
            }
        }
        *max_error = worst;
        DifcStatus::Ok
    })
}

/// Least-squares power-law fit through (x, err) pairs on log axes; writes
/// the fitted exponent and natural-log intercept. Needs at least three
/// pairs, all positive.
///
/// # Safety
/// `xs` and `errs` must be readable for `len` doubles; `slope` and
/// `intercept` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn difc_fit_rate(
    xs: *const f64,
    errs: *const f64,
    len: usize,
    slope: *mut f64,
    intercept: *mut f64,
) -> DifcStatus {
    if xs.is_null() || errs.is_null() || slope.is_null() || intercept.is_null() {
        return invalid_arg("all pointers must be non-null");
    }
    let xs = std::slice::from_raw_parts(xs, len);
    let errs = std::slice::from_raw_parts(errs, len);
    guard(|| {
        let pairs: Vec<(f64, f64)> = xs.iter().copied().zip(errs.iter().copied()).collect();
        match fit_rate(&pairs) {
            Ok(fit) => {
                *slope = fit.slope;
                *intercept = fit.intercept;
                DifcStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}
