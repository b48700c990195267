use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use firmcx_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = firmcx_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn synth_then_run_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    unsafe {
        assert_eq!(firmcx_synth_write(c("small").as_ptr(), 11, c(data.to_str().unwrap()).as_ptr()), FirmcxStatus::Ok);
        let mut config = ptr::null_mut();
        assert_eq!(firmcx_config_load(c(data.join("run.toml").to_str().unwrap()).as_ptr(), &mut config), FirmcxStatus::Ok);
        let out = dir.path().join("out");
        assert_eq!(firmcx_config_set_output_dir(config, c(out.to_str().unwrap()).as_ptr()), FirmcxStatus::Ok);
        assert_eq!(firmcx_config_set_threads(config, 1), FirmcxStatus::Ok);
        assert_eq!(firmcx_config_set_seed(config, 2), FirmcxStatus::Ok);

        let mut run = ptr::null_mut();
        assert_eq!(firmcx_run(config, FirmcxStage::Regress, &mut run), FirmcxStatus::Ok);
        assert!(firmcx_run_model_count(run) >= 2);
        let (mut b, mut se, mut p) = (f64::NAN, f64::NAN, f64::NAN);
        let model = c("main_growth");
        assert_eq!(
            firmcx_run_coefficient(run, model.as_ptr(), c("expy").as_ptr(), &mut b, &mut se, &mut p),
            FirmcxStatus::Ok
        );
        assert!(b.is_finite() && se > 0.0 && (0.0..=1.0).contains(&p));
        let mut n = 0usize;
        assert_eq!(firmcx_run_observations(run, model.as_ptr(), &mut n), FirmcxStatus::Ok);
        assert!(n > 0);

        assert_eq!(
            firmcx_run_coefficient(run, c("nope").as_ptr(), c("expy").as_ptr(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut()),
            FirmcxStatus::NotFound
        );
        assert!(last_error().contains("nope"));
        assert!(out.join("manifest.json").exists());

        firmcx_run_free(run);
        firmcx_config_free(config);
    }
}

#[test]
fn errors_map_to_status_codes() {
    unsafe {
        let mut config = ptr::null_mut();
        assert_eq!(firmcx_config_load(ptr::null(), &mut config), FirmcxStatus::InvalidArgument);
        assert!(config.is_null());
        assert_eq!(firmcx_config_load(c("/nonexistent/run.toml").as_ptr(), &mut config), FirmcxStatus::Validation);
        assert!(!last_error().is_empty());
        assert_eq!(firmcx_synth_write(c("huge").as_ptr(), 0, c("/tmp/x").as_ptr()), FirmcxStatus::Validation);
        assert_eq!(firmcx_run(ptr::null(), FirmcxStage::Ingest, &mut ptr::null_mut()), FirmcxStatus::InvalidArgument);
        assert_eq!(firmcx_run_model_count(ptr::null()), 0);
        firmcx_config_free(ptr::null_mut());
        firmcx_run_free(ptr::null_mut());
    }
}

#[test]
fn success_clears_last_error() {
    unsafe {
        let mut out = 0.0;
        assert_eq!(firmcx_sapling(0, 0, 0, 0, &mut out), FirmcxStatus::InvalidArgument);
        assert_eq!(firmcx_sapling(1, 1, 2, 4, &mut out), FirmcxStatus::Ok);
    }
    assert!(firmcx_last_error().is_null());
}

#[test]
fn numeric_kernels() {
    // Worked by hand: totals rows (3, 7), columns (4, 6), grand 10.
    let x = [1.0, 2.0, 3.0, 4.0];
    let mut out = [0.0; 4];
    unsafe {
        assert_eq!(firmcx_rca_dense(x.as_ptr(), 2, 2, out.as_mut_ptr()), FirmcxStatus::Ok);
    }
    let expected = [(1.0 / 3.0) / 0.4, (2.0 / 3.0) / 0.6, (3.0 / 7.0) / 0.4, (4.0 / 7.0) / 0.6];
    for (a, b) in out.iter().zip(expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    let mut s = 0.0;
    unsafe {
        assert_eq!(firmcx_sapling(1, 1, 2, 4, &mut s), FirmcxStatus::Ok);
    }
    assert!((s - 1.0 / 3.0).abs() < 1e-12);
    unsafe {
        assert_eq!(firmcx_rca_dense(x.as_ptr(), 0, 2, out.as_mut_ptr()), FirmcxStatus::InvalidArgument);
    }
}

#[test]
fn version_matches_package() {
    let v = unsafe { CStr::from_ptr(firmcx_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/firmcx.h")).unwrap();
    let source = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let exports: Vec<&str> = source
        .split("extern \"C\" fn ")
        .skip(1)
        .map(|s| s.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 14);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    assert!(header.contains("FIRMCX_STATUS_COMPUTE = 2"));
    assert!(header.contains("typedef struct FirmcxRun FirmcxRun;"));
}

/// The header compiles as C and links against the static library.
#[test]
fn c_smoke_program() {
    let Ok(cc) = which_cc() else { return };
    let manifest = env!("CARGO_MANIFEST_DIR");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"#include "firmcx.h"
#include <stdio.h>
int main(void) {
  double s = 0.0;
  if (firmcx_sapling(1, 1, 2, 4, &s) != FIRMCX_STATUS_OK) return 1;
  if (s < 0.3333 || s > 0.3334) return 2;
  if (firmcx_sapling(0, 0, 0, 0, &s) != FIRMCX_STATUS_INVALID_ARGUMENT) return 3;
  if (firmcx_last_error() == NULL) return 4;
  printf("%s\n", firmcx_version());
  return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("smoke");
    // The test binary lives in target/<profile>/deps; the static lib one level up.
    let deps = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = deps.join("libfirmcx_ffi.a");
    if !lib.exists() {
        eprintln!("skipping: {} not built", lib.display());
        return;
    }
    let status = Command::new(cc)
        .arg(&src)
        .arg(format!("-I{manifest}/include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let run = Command::new(&exe).output().unwrap();
    assert_eq!(run.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), env!("CARGO_PKG_VERSION"));
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}
