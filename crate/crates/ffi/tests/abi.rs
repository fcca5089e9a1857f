use std::ffi::CString;
use std::path::Path;
use std::process::Command;
use std::ptr;

use spider_lab_ffi::*;

#[test]
fn constants_and_closed_form() {
    let mut v = 0.0;
    assert_eq!(spider_c_n(2, &mut v), SpiderStatus::Ok);
    assert_eq!(v, 3f64.sqrt());
    assert_eq!(spider_optimal_c(0, 1.0, &mut v), SpiderStatus::Ok);
    assert_eq!(v, 0.5);

    let s = [0.2, 0.2];
    assert_eq!(
        unsafe { spider_v_hat(2, 1.0, 0.0, 0, s.as_ptr(), 2, &mut v) },
        SpiderStatus::Ok
    );
    assert!((v - 0.79).abs() < 1e-12);

    let mut flag = -1;
    let s = [0.8, 0.4];
    assert_eq!(
        unsafe { spider_in_stopping_set(2, 1.0, 0.2, 0, s.as_ptr(), 2, &mut flag) },
        SpiderStatus::Ok
    );
    assert_eq!(flag, 1);
}

#[test]
fn errors_carry_a_message() {
    let mut v = 0.0;
    let s = [0.5];
    let status = unsafe { spider_v_hat(1, 1.0, 0.9, 0, s.as_ptr(), 1, &mut v) };
    assert_eq!(status, SpiderStatus::DomainViolation);
    let mut buf = [0 as std::ffi::c_char; 256];
    let len = unsafe { spider_last_error(buf.as_mut_ptr(), buf.len()) };
    let msg = unsafe { std::ffi::CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap();
    assert_eq!(msg.len(), len);
    assert!(msg.contains("x"), "{msg}");

    assert_eq!(
        unsafe { spider_v_hat(1, 1.0, 0.0, 0, ptr::null(), 1, &mut v) },
        SpiderStatus::NullPointer
    );
    assert_eq!(spider_theta(0, ptr::null_mut()), SpiderStatus::NullPointer);
}

#[test]
fn estimate_handle_round_trip() {
    let rule = CString::new("drawdown:a=1").unwrap();
    let mut handle = ptr::null_mut();
    let status = unsafe { spider_estimate_new(rule.as_ptr(), 0, 1.0, 0.05, 2000, 9, 0, 1, &mut handle) };
    assert_eq!(status, SpiderStatus::Ok);
    let mut summary = SpiderEstimateSummary::default();
    assert_eq!(unsafe { spider_estimate_summary(handle, &mut summary) }, SpiderStatus::Ok);
    assert_eq!(summary.n_paths, 2000);
    assert!((summary.mean_s - 1.0).abs() < 5.0 * summary.se_s);
    unsafe { spider_estimate_free(handle) };

    let bad = CString::new("nope").unwrap();
    let status = unsafe { spider_estimate_new(bad.as_ptr(), 0, 1.0, 0.05, 2000, 9, 0, 1, &mut handle) };
    assert_eq!(status, SpiderStatus::RuleParse);
    assert!(handle.is_null());
}

#[test]
fn dp_handle_round_trip() {
    let mut handle = ptr::null_mut();
    let status = unsafe { spider_dp_solve(1, 0.05, 2.0, 0.0, 1e-10, 1000, 1, 1, &mut handle) };
    assert_eq!(status, SpiderStatus::Ok);
    let mut summary = SpiderDpSummary::default();
    assert_eq!(unsafe { spider_dp_summary(handle, &mut summary) }, SpiderStatus::Ok);
    assert!((summary.theta_estimate - 0.5).abs() < 0.05);
    let mut v = 0.0;
    let s = [0.0];
    assert_eq!(
        unsafe { spider_dp_value_at(handle, 0.0, 0, s.as_ptr(), 1, &mut v) },
        SpiderStatus::Ok
    );
    assert_eq!(v, summary.theta_estimate);
    unsafe { spider_dp_free(handle) };
    unsafe { spider_dp_free(ptr::null_mut()) };

    let status = unsafe { spider_dp_solve(1, 0.07, 2.0, 0.0, 1e-10, 1000, 1, 0, &mut handle) };
    assert_eq!(status, SpiderStatus::DegenerateGrid);
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/spider_lab.h");
    assert!(header.exists());
    let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-x", "c"]).arg(&header).output() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
