//! C ABI over `spider_lab`.
//!
//! Every function returns a [`SpiderStatus`]; results come back through out
//! pointers. On failure the message is kept per thread and can be read with
//! [`spider_last_error`]. Handles are opaque and released with their `_free`
//! function. Ribs are numbered from 0.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use spider_lab::dp::{self, DPGrid, Method, SolveOptions};
use spider_lab::mc::{self, CensorPolicy, EstimateOptions, MCEstimate};
use spider_lab::value_fn;
use spider_lab::{EvalPoint, SpiderError, StoppingRule, ValueParams, WalkConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpiderStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    UnsupportedN = 3,
    DomainViolation = 4,
    DimensionMismatch = 5,
    ExcessiveCensoring = 6,
    NonConvergence = 7,
    TruncationContaminated = 8,
    DegenerateGrid = 9,
    RuleParse = 10,
    Panic = 11,
}

impl From<&SpiderError> for SpiderStatus {
    fn from(e: &SpiderError) -> Self {
        match e {
            SpiderError::UnsupportedN { .. } => SpiderStatus::UnsupportedN,
            SpiderError::DomainViolation(_) => SpiderStatus::DomainViolation,
            SpiderError::DimensionMismatch { .. } => SpiderStatus::DimensionMismatch,
            SpiderError::InvalidParameter(_) => SpiderStatus::InvalidArgument,
            SpiderError::ExcessiveCensoring { .. } => SpiderStatus::ExcessiveCensoring,
            SpiderError::NonConvergence { .. } => SpiderStatus::NonConvergence,
            SpiderError::TruncationContaminated { .. } => SpiderStatus::TruncationContaminated,
            SpiderError::DegenerateGrid(_) => SpiderStatus::DegenerateGrid,
            SpiderError::RuleParse(_) => SpiderStatus::RuleParse,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: &str) {
    LAST_ERROR.with(|e| {
        let mut e = e.borrow_mut();
        e.clear();
        e.extend_from_slice(msg.as_bytes());
    });
}

enum Failure {
    Null(&'static str),
    Arg(String),
    Spider(SpiderError),
}

impl From<SpiderError> for Failure {
    fn from(e: SpiderError) -> Self {
        Failure::Spider(e)
    }
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> SpiderStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error("");
            SpiderStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(&format!("null pointer: {what}"));
            SpiderStatus::NullPointer
        }
        Ok(Err(Failure::Arg(msg))) => {
            set_error(&msg);
            SpiderStatus::InvalidArgument
        }
        Ok(Err(Failure::Spider(e))) => {
            set_error(&e.to_string());
            SpiderStatus::from(&e)
        }
        Err(_) => {
            set_error("internal panic");
            SpiderStatus::Panic
        }
    }
}

fn out<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    // SAFETY: callers pass either null or a valid, writable pointer.
    unsafe { p.as_mut() }.ok_or(Failure::Null(what))
}

fn records<'a>(s: *const f64, len: usize) -> Result<&'a [f64], Failure> {
    if s.is_null() {
        return Err(Failure::Null("s"));
    }
    // SAFETY: the caller guarantees `s` points to `len` readable doubles.
    Ok(unsafe { slice::from_raw_parts(s, len) })
}

/// Copies the calling thread's last error message (NUL terminated,
/// truncated to `cap`) into `buf` and returns its full length in bytes
/// without the terminator. Pass a null `buf` to query the length.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn spider_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = e.len().min(cap - 1);
            // SAFETY: `buf` has room for `cap` bytes and `n < cap`.
            unsafe {
                ptr::copy_nonoverlapping(e.as_ptr(), buf.cast::<u8>(), n);
                *buf.add(n) = 0;
            }
        }
        e.len()
    })
}

/// Origin value at unit cost for `n` in 0..=2.
#[no_mangle]
pub extern "C" fn spider_theta(n: usize, result: *mut f64) -> SpiderStatus {
    guard(|| {
        *out(result, "result")? = value_fn::theta(n)?;
        Ok(())
    })
}

/// Spider constant `sqrt(n + 1)` for `n` in 0..=2.
#[no_mangle]
pub extern "C" fn spider_c_n(n: usize, result: *mut f64) -> SpiderStatus {
    guard(|| {
        *out(result, "result")? = value_fn::c_n(n)?;
        Ok(())
    })
}

/// Time cost that is optimal when the mean stopping time is `m`.
#[no_mangle]
pub extern "C" fn spider_optimal_c(n: usize, m: f64, result: *mut f64) -> SpiderStatus {
    guard(|| {
        *out(result, "result")? = value_fn::optimal_c(n, m)?;
        Ok(())
    })
}

/// Closed-form value at `(x, r, s[0..s_len])` with time cost `c`. For
/// `n = 0`, `s_len` is 1 and `x` may be negative.
///
/// # Safety
/// `s` must point to `s_len` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn spider_v_hat(
    n: usize,
    c: f64,
    x: f64,
    r: usize,
    s: *const f64,
    s_len: usize,
    result: *mut f64,
) -> SpiderStatus {
    guard(|| {
        let params = ValueParams::new(n, c)?;
        let p = EvalPoint::spider(x, r, records(s, s_len)?.to_vec());
        *out(result, "result")? = value_fn::v_hat(&params, &p)?;
        Ok(())
    })
}

/// Writes 1 to `result` if the point is in the stopping set, else 0.
///
/// # Safety
/// `s` must point to `s_len` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn spider_in_stopping_set(
    n: usize,
    c: f64,
    x: f64,
    r: usize,
    s: *const f64,
    s_len: usize,
    result: *mut i32,
) -> SpiderStatus {
    guard(|| {
        let params = ValueParams::new(n, c)?;
        let p = EvalPoint::spider(x, r, records(s, s_len)?.to_vec());
        *out(result, "result")? = value_fn::in_stopping_set(&params, &p)? as i32;
        Ok(())
    })
}

/// Monte Carlo estimate from the origin.
pub struct SpiderEstimate(MCEstimate);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SpiderEstimateSummary {
    pub n_paths: usize,
    pub mean_s: f64,
    pub se_s: f64,
    pub mean_tau: f64,
    pub se_tau: f64,
    pub penalized: f64,
    pub se_penalized: f64,
    pub ratio: f64,
    pub se_ratio: f64,
    pub censored_fraction: f64,
}

/// Runs `paths` lattice paths of step `h` under the rule `rule`
/// (for example `"first-entry:C=1"`). `threads = 0` uses every core; the
/// result does not depend on it. `max_steps = 0` picks a horizon of 1000.
///
/// # Safety
/// `rule` must be a NUL-terminated string; `handle` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spider_estimate_new(
    rule: *const c_char,
    n: usize,
    c: f64,
    h: f64,
    paths: usize,
    seed: u64,
    max_steps: u64,
    threads: usize,
    handle: *mut *mut SpiderEstimate,
) -> SpiderStatus {
    guard(|| {
        let slot = out(handle, "handle")?;
        *slot = ptr::null_mut();
        if rule.is_null() {
            return Err(Failure::Null("rule"));
        }
        // SAFETY: checked non-null; the caller guarantees NUL termination.
        let spec = unsafe { CStr::from_ptr(rule) }
            .to_str()
            .map_err(|_| Failure::Arg("rule is not UTF-8".into()))?;
        let rule: StoppingRule = spec.parse()?;
        let steps = if max_steps == 0 {
            (1000.0 / (h * h)).min(1e15) as u64
        } else {
            max_steps
        };
        let config = WalkConfig::new(h, n, seed, steps)?;
        let opts = EstimateOptions {
            threads,
            censor_policy: CensorPolicy::Fail,
            ..EstimateOptions::default()
        };
        let est = mc::estimate(&rule, &ValueParams::new(n, c)?, &config, paths, &opts)?;
        *slot = Box::into_raw(Box::new(SpiderEstimate(est)));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`spider_estimate_new`].
#[no_mangle]
pub unsafe extern "C" fn spider_estimate_summary(
    handle: *const SpiderEstimate,
    summary: *mut SpiderEstimateSummary,
) -> SpiderStatus {
    guard(|| {
        // SAFETY: null or a live handle from `spider_estimate_new`.
        let est = &unsafe { handle.as_ref() }.ok_or(Failure::Null("handle"))?.0;
        *out(summary, "summary")? = SpiderEstimateSummary {
            n_paths: est.n_paths,
            mean_s: est.mean_s,
            se_s: est.se_s,
            mean_tau: est.mean_tau,
            se_tau: est.se_tau,
            penalized: est.penalized,
            se_penalized: est.se_penalized,
            ratio: est.ratio,
            se_ratio: est.se_ratio,
            censored_fraction: est.censored_fraction,
        };
        Ok(())
    })
}

/// # Safety
/// `handle` must be null or come from [`spider_estimate_new`], and must not
/// be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn spider_estimate_free(handle: *mut SpiderEstimate) {
    if !handle.is_null() {
        // SAFETY: allocated by `Box::into_raw` in `spider_estimate_new`.
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// Solved dynamic-programming grid at unit cost.
pub struct SpiderDpGrid(DPGrid);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SpiderDpSummary {
    pub n: usize,
    pub h: f64,
    pub s_max: f64,
    pub theta_estimate: f64,
    pub iterations: u64,
    pub residual: f64,
    pub boundary_settlement: f64,
    pub face_hit_probability: f64,
    pub states: u64,
}

/// Solves on the `h`-lattice with records truncated at `s_max`. `n = 0`
/// solves the line with stop depth `x_depth` (ignored otherwise). Set
/// `keep_surface` non-zero to allow [`spider_dp_value_at`].
///
/// # Safety
/// `handle` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spider_dp_solve(
    n: usize,
    h: f64,
    s_max: f64,
    x_depth: f64,
    tol: f64,
    max_iters: u64,
    threads: usize,
    keep_surface: i32,
    handle: *mut *mut SpiderDpGrid,
) -> SpiderStatus {
    guard(|| {
        let slot = out(handle, "handle")?;
        *slot = ptr::null_mut();
        let opts = SolveOptions {
            tol,
            max_iters,
            threads,
            keep_surface: keep_surface != 0,
            method: Method::PolicyIteration,
        };
        let grid = if n == 0 {
            dp::solve_line(h, x_depth, s_max, &opts)?
        } else {
            dp::solve(n, h, s_max, &opts)?
        };
        *slot = Box::into_raw(Box::new(SpiderDpGrid(grid)));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`spider_dp_solve`].
#[no_mangle]
pub unsafe extern "C" fn spider_dp_summary(
    handle: *const SpiderDpGrid,
    summary: *mut SpiderDpSummary,
) -> SpiderStatus {
    guard(|| {
        // SAFETY: null or a live handle from `spider_dp_solve`.
        let g = &unsafe { handle.as_ref() }.ok_or(Failure::Null("handle"))?.0;
        *out(summary, "summary")? = SpiderDpSummary {
            n: g.n,
            h: g.h,
            s_max: g.s_max,
            theta_estimate: g.theta_estimate,
            iterations: g.iterations,
            residual: g.residual,
            boundary_settlement: g.boundary_settlement,
            face_hit_probability: g.face_hit_probability,
            states: g.states,
        };
        Ok(())
    })
}

/// Grid value at a lattice point.
///
/// # Safety
/// `handle` must come from [`spider_dp_solve`]; `s` must point to `s_len`
/// readable doubles.
#[no_mangle]
pub unsafe extern "C" fn spider_dp_value_at(
    handle: *const SpiderDpGrid,
    x: f64,
    r: usize,
    s: *const f64,
    s_len: usize,
    result: *mut f64,
) -> SpiderStatus {
    guard(|| {
        // SAFETY: null or a live handle from `spider_dp_solve`.
        let g = &unsafe { handle.as_ref() }.ok_or(Failure::Null("handle"))?.0;
        let p = EvalPoint::spider(x, r, records(s, s_len)?.to_vec());
        *out(result, "result")? = g.value_at(&p)?;
        Ok(())
    })
}

/// # Safety
/// `handle` must be null or come from [`spider_dp_solve`], and must not be
/// used afterwards.
#[no_mangle]
pub unsafe extern "C" fn spider_dp_free(handle: *mut SpiderDpGrid) {
    if !handle.is_null() {
        // SAFETY: allocated by `Box::into_raw` in `spider_dp_solve`.
        drop(unsafe { Box::from_raw(handle) });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn statuses_cover_every_error() {
        let e = SpiderError::UnsupportedN { n: 3 };
        assert_eq!(SpiderStatus::from(&e), SpiderStatus::UnsupportedN);
        assert_eq!(
            SpiderStatus::from(&SpiderError::RuleParse("x".into())),
            SpiderStatus::RuleParse
        );
    }

    #[test]
    fn last_error_is_per_call() {
        let mut v = 0.0;
        assert_eq!(spider_theta(3, &mut v), SpiderStatus::UnsupportedN);
        let len = unsafe { spider_last_error(ptr::null_mut(), 0) };
        assert!(len > 0);
        assert_eq!(spider_theta(1, &mut v), SpiderStatus::Ok);
        assert_eq!(unsafe { spider_last_error(ptr::null_mut(), 0) }, 0);
        assert_eq!(v, 0.5);
    }
}
