use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use fedrel_ffi::*;

const TINY: &str = r#"
seed = 3
mode = "fedrel"

[data]
transform_epochs = 0

[data.generator]
sequences = 24
channels = 3
signal_dim = 4
classes = 2

[model]
feature_dim = 4
transform_hidden = 4
node_emb = 4
graph_emb = 4
readout_hidden = [4]
classes = 2

[federation]
participants = 2
rounds = 2

[federation.relevance]
vae_epochs = 2
"#;

fn last_error() -> String {
    let p = fr_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tiny() -> *mut FrConfig {
    let toml = CString::new(TINY).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { fr_config_parse(toml.as_ptr(), &mut cfg) }, FrStatus::Ok);
    cfg
}

#[test]
fn run_through_the_handles() {
    let cfg = tiny();
    let mut run = ptr::null_mut();
    assert_eq!(unsafe { fr_run(cfg, &mut run) }, FrStatus::Ok);
    assert_eq!(unsafe { fr_run_rounds(run) }, 2);

    let mut m = FrRoundMetrics::default();
    assert_eq!(unsafe { fr_run_round(run, 1, &mut m) }, FrStatus::Ok);
    assert_eq!(m.round, 2);
    assert_eq!(m.participants, 2);
    assert!(m.loss.is_finite());

    let mut w = [0.0; 2];
    assert_eq!(unsafe { fr_run_relevance(run, 0, w.as_mut_ptr(), 2) }, FrStatus::Ok);
    assert!((w[0] + w[1] - 1.0).abs() < 1e-12);
    assert_eq!(unsafe { fr_run_relevance(run, 0, w.as_mut_ptr(), 1) }, FrStatus::OutOfRange);
    assert_eq!(unsafe { fr_run_round(run, 2, &mut m) }, FrStatus::OutOfRange);
    assert!(last_error().contains("round index 2"));

    let mut best = 0.0;
    assert_eq!(unsafe { fr_run_best_macro_f1(run, &mut best) }, FrStatus::Ok);
    assert!((0.0..=1.0).contains(&best));

    // Same config, same numbers.
    let mut again = ptr::null_mut();
    assert_eq!(unsafe { fr_run(cfg, &mut again) }, FrStatus::Ok);
    let mut m2 = FrRoundMetrics::default();
    unsafe { fr_run_round(again, 1, &mut m2) };
    assert_eq!(m.loss.to_bits(), m2.loss.to_bits());

    unsafe {
        fr_run_free(run);
        fr_run_free(again);
        fr_config_free(cfg);
    }
}

#[test]
fn errors_map_to_codes() {
    let mut cfg = ptr::null_mut();
    let bad = CString::new("seed = 1\n[model]\nwindow = 99\n").unwrap();
    assert_eq!(unsafe { fr_config_parse(bad.as_ptr(), &mut cfg) }, FrStatus::Config);
    assert!(last_error().contains("model.window"));
    assert!(cfg.is_null());

    assert_eq!(unsafe { fr_config_parse(ptr::null(), &mut cfg) }, FrStatus::NullPointer);
    let invalid = [0xffu8, 0xfe, 0];
    assert_eq!(unsafe { fr_config_parse(invalid.as_ptr().cast(), &mut cfg) }, FrStatus::InvalidUtf8);

    assert_eq!(unsafe { fr_config_new(1, &mut cfg) }, FrStatus::Ok);
    let mode = CString::new("fedprox").unwrap();
    assert_eq!(unsafe { fr_config_set_mode(cfg, mode.as_ptr()) }, FrStatus::UnknownMode);
    let mode = CString::new("fedatt").unwrap();
    assert_eq!(unsafe { fr_config_set_mode(cfg, mode.as_ptr()) }, FrStatus::Ok);
    // Rejected sizes leave the handle untouched.
    assert_eq!(unsafe { fr_config_set_sizes(cfg, 0, 0, 1) }, FrStatus::Config);
    assert!(last_error().contains("data.generator.sequences"));
    assert_eq!(unsafe { fr_config_set_sizes(cfg, 4, 10, 0) }, FrStatus::Ok);
    unsafe { fr_config_free(cfg) };

    assert_eq!(unsafe { fr_run(ptr::null(), ptr::null_mut()) }, FrStatus::NullPointer);
    assert_eq!(unsafe { fr_run_rounds(ptr::null()) }, 0);
    unsafe {
        fr_config_free(ptr::null_mut());
        fr_run_free(ptr::null_mut());
    }
}

#[test]
fn gradcheck_is_within_tolerance() {
    let mut worst = f64::NAN;
    assert_eq!(unsafe { fr_gradcheck(0, &mut worst) }, FrStatus::Ok);
    assert!(worst < 1e-4, "{worst}");
    let v = unsafe { CStr::from_ptr(fr_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_and_links_from_c() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header = root.join("include/fedrel.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in ["fr_config_parse", "fr_run_relevance", "fr_gradcheck", "FR_STATUS_PANIC"] {
        assert!(text.contains(sym), "{sym} missing from header");
    }

    // The static library sits next to the test binary's deps directory.
    let exe = std::env::current_exe().unwrap();
    let profile = exe.parent().unwrap().parent().unwrap();
    let lib = profile.join("libfedrel_ffi.a");
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler or static library");
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let src = dir.join("smoke.c");
    std::fs::write(
        &src,
        r#"#include "fedrel.h"
#include <stdio.h>
#include <string.h>
int main(void) {
    FrConfig *cfg = NULL;
    if (fr_config_new(1, &cfg) != FR_STATUS_OK) return 1;
    if (fr_config_set_mode(cfg, "nope") != FR_STATUS_UNKNOWN_MODE) return 2;
    if (strstr(fr_last_error(), "nope") == NULL) return 3;
    fr_config_free(cfg);
    double worst = 1.0;
    if (fr_gradcheck(0, &worst) != FR_STATUS_OK || worst >= 1e-4) return 4;
    printf("ok %s\n", fr_version());
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.join("smoke");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(root.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
