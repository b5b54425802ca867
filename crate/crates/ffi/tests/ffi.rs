use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use fracpole_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { fp_last_error(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 0);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

#[test]
fn mittag_leffler_through_the_abi() {
    let (mut re, mut im) = (0.0, 0.0);
    let st = unsafe { fp_mittag_leffler(1.0, 1.0, 0.5, 0.0, &mut re, &mut im) };
    assert_eq!(st, FpStatus::Ok);
    assert!((re - 0.5f64.exp()).abs() < 1e-14 && im == 0.0);

    let st = unsafe { fp_mittag_leffler(1.0, 1.0, 0.5, 0.0, ptr::null_mut(), &mut im) };
    assert_eq!(st, FpStatus::NullPointer);
    assert!(last_error().contains("out_re"));
}

#[test]
fn c0_matches_the_oracle() {
    let mut c0 = 0.0;
    let st = unsafe { fp_c0(1.0, 1.0, 1.25, 1.5, 0.5, 1, 1.0, std::f64::consts::PI.powi(2), &mut c0) };
    assert_eq!(st, FpStatus::Ok);
    assert!((c0 - 0.19946327387498374).abs() <= 1e-12 * c0);

    let st = unsafe { fp_c0(1.0, 1.0, 1.5, 1.25, 0.5, 1, 1.0, 1.0, &mut c0) };
    assert_ne!(st, FpStatus::Ok);
}

#[test]
fn error_buffer_truncates_and_reports_length() {
    let mut re = 0.0;
    let st = unsafe { fp_mittag_leffler(1.0, 1.0, 0.0, 0.0, &mut re, ptr::null_mut()) };
    assert_eq!(st, FpStatus::NullPointer);
    let full = unsafe { fp_last_error(ptr::null_mut(), 0) };
    let mut small = [0 as c_char; 4];
    let n = unsafe { fp_last_error(small.as_mut_ptr(), small.len()) };
    assert_eq!(n, full);
    assert_eq!(unsafe { CStr::from_ptr(small.as_ptr()) }.to_bytes().len(), 3);
}

#[test]
fn bad_config_leaves_a_null_handle() {
    let json = CString::new(r#"{"problem": {"a": -1}}"#).unwrap();
    let mut exp = ptr::NonNull::<FpExperiment>::dangling().as_ptr();
    let st = unsafe { fp_experiment_from_json(json.as_ptr(), &mut exp) };
    assert_eq!(st, FpStatus::Config);
    assert!(exp.is_null());
    let name = CString::new("no-such-fixture").unwrap();
    assert_eq!(unsafe { fp_experiment_builtin(name.as_ptr(), &mut exp) }, FpStatus::Config);
    unsafe { fp_experiment_free(ptr::null_mut()) };
}

const SMALL: &str = r#"{
    "problem": {"a": 0.7, "alpha": 1.4, "terms": [{"b": 1.0, "beta": 0.8}, {"b": 0.5, "beta": 0.3}],
                "domain": {"kind": "interval", "x1": 1.0}, "T_seconds": 1.0, "T_obs_seconds": 2.0},
    "source": {"n": 2, "g": {"shape": "poly", "p": 2, "q": 2}, "f": [1.0, 0.5, 0.25],
               "z": {"profile": {"shape": "poly", "p": 6, "q": 1}, "modes": 8, "power": 2.0}},
    "observation": {"kind": "point", "x0": [0.37]},
    "numerics": {"dt_seconds": 0.02, "K_max": 20, "L_max": 6, "max_terms": 2}
}"#;

#[test]
fn forward_and_invert_through_handles() {
    let json = CString::new(SMALL).unwrap();
    let mut exp = ptr::null_mut();
    assert_eq!(unsafe { fp_experiment_from_json(json.as_ptr(), &mut exp) }, FpStatus::Ok);
    let mut trace = ptr::null_mut();
    assert_eq!(unsafe { fp_experiment_forward(exp, &mut trace) }, FpStatus::Ok);
    let (mut len, mut dt) = (0usize, 0.0);
    assert_eq!(unsafe { fp_trace_shape(trace, &mut len, &mut dt) }, FpStatus::Ok);
    assert_eq!((len, dt), (101, 0.02));
    let mut h = vec![0.0; len];
    assert_eq!(unsafe { fp_trace_copy(trace, h.as_mut_ptr(), len) }, FpStatus::Ok);

    // Re-wrap the copied samples, as a caller with measured data would.
    let mut again = ptr::null_mut();
    assert_eq!(unsafe { fp_trace_from_samples(dt, h.as_ptr(), len, &mut again) }, FpStatus::Ok);
    let mut model = ptr::null_mut();
    let st = unsafe { fp_experiment_invert(exp, again, &mut model) };
    assert_eq!(st, FpStatus::Ok, "{}", last_error());

    let (mut alpha, mut a) = (0.0, 0.0);
    assert_eq!(unsafe { fp_model_scalars(model, &mut alpha, &mut a) }, FpStatus::Ok);
    assert!((alpha - 1.4).abs() < 1e-3 && (a - 0.7).abs() < 0.035 * 0.7, "{alpha} {a}");
    let mut count = 0usize;
    let st = unsafe { fp_model_terms(model, ptr::null_mut(), ptr::null_mut(), 0, &mut count) };
    assert_eq!((st, count), (FpStatus::BufferTooSmall, 2));
    let (mut b, mut beta) = ([0.0; 2], [0.0; 2]);
    let st = unsafe { fp_model_terms(model, b.as_mut_ptr(), beta.as_mut_ptr(), 2, &mut count) };
    assert_eq!(st, FpStatus::Ok);
    assert!((beta[0] - 0.8).abs() < 1e-2 && (beta[1] - 0.3).abs() < 1e-2, "{beta:?}");
    let mut pass = false;
    assert_eq!(unsafe { fp_model_passed(model, &mut pass) }, FpStatus::Ok);
    assert!(pass);

    let mut text = ptr::null_mut();
    assert_eq!(unsafe { fp_model_json(model, &mut text) }, FpStatus::Ok);
    let v: serde_json::Value = serde_json::from_str(unsafe { CStr::from_ptr(text) }.to_str().unwrap()).unwrap();
    assert_eq!(v["model"]["m_hat"], serde_json::json!(2));
    unsafe {
        fp_string_free(text);
        fp_model_free(model);
        fp_trace_free(again);
        fp_trace_free(trace);
        fp_experiment_free(exp);
    }
}

#[test]
fn short_trace_is_a_numerical_error() {
    let json = CString::new(SMALL).unwrap();
    let mut exp = ptr::null_mut();
    assert_eq!(unsafe { fp_experiment_from_json(json.as_ptr(), &mut exp) }, FpStatus::Ok);
    let h = vec![0.0; 51];
    let mut trace = ptr::null_mut();
    assert_eq!(unsafe { fp_trace_from_samples(0.02, h.as_ptr(), h.len(), &mut trace) }, FpStatus::Ok);
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { fp_experiment_invert(exp, trace, &mut model) }, FpStatus::Numerical);
    assert!(model.is_null());
    assert!(last_error().contains("poles"), "{}", last_error());
    unsafe {
        fp_trace_free(trace);
        fp_experiment_free(exp);
    }
}

fn target_dir() -> PathBuf {
    // tests/ffi-<hash> lives in target/<profile>/deps.
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_the_header() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib = target_dir().join("libfracpole_ffi.a");
    assert!(lib.is_file(), "static library missing at {}", lib.display());
    let out = target_dir().join("fracpole_smoke");
    let cc = Command::new("cc")
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&out)
        .output()
        .expect("a C compiler on PATH");
    assert!(cc.status.success(), "{}", String::from_utf8_lossy(&cc.stderr));
    let run = Command::new(&out).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(String::from_utf8_lossy(&run.stdout), "ok\n");
}
