use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use mixste_ffi::*;

fn last_error() -> String {
    let p = mx_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn new_model(frames: usize) -> *mut MxModel {
    let mut m = ptr::null_mut();
    let s = unsafe { mx_model_new(5, frames, 8, 1, 2, 3, &mut m) };
    assert_eq!(s, MxStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn model_lifecycle_and_prediction() {
    let m = new_model(4);
    let mut info = MxModelInfo::default();
    assert_eq!(unsafe { mx_model_info(m, &mut info) }, MxStatus::Ok);
    assert_eq!((info.joints, info.frames, info.dim, info.depth, info.heads), (5, 4, 8, 1, 2));
    assert!(info.parameters > 0);
    assert!(mx_last_error().is_null());

    let frames = 7;
    let kp: Vec<f64> = (0..frames * 5 * 2).map(|i| ((i * 37) % 11) as f64 / 11.0 - 0.5).collect();
    let mut out = vec![f64::NAN; frames * 5 * 3];
    let s = unsafe { mx_predict(m, kp.as_ptr(), frames, 5, out.as_mut_ptr(), out.len()) };
    assert_eq!(s, MxStatus::Ok);
    assert!(out.iter().all(|v| v.is_finite()));

    // the same numbers come back after a save/load round trip
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.mxst").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { mx_model_save(m, path.as_ptr()) }, MxStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { mx_model_load(path.as_ptr(), &mut loaded) }, MxStatus::Ok);
    let mut again = vec![0.0; out.len()];
    let s = unsafe { mx_predict(loaded, kp.as_ptr(), frames, 5, again.as_mut_ptr(), again.len()) };
    assert_eq!(s, MxStatus::Ok);
    assert_eq!(out, again);
    unsafe {
        mx_model_free(loaded);
        mx_model_free(m);
        mx_model_free(ptr::null_mut());
    }
}

#[test]
fn errors_set_status_and_message() {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { mx_model_new(5, 4, 8, 1, 3, 0, &mut m) }, MxStatus::Config);
    assert!(m.is_null());
    assert!(last_error().contains("head"), "{}", last_error());

    let missing = CString::new("/nonexistent/model.mxst").unwrap();
    assert_eq!(unsafe { mx_model_load(missing.as_ptr(), &mut m) }, MxStatus::Io);
    assert_eq!(unsafe { mx_model_load(ptr::null(), &mut m) }, MxStatus::NullPointer);

    let model = new_model(4);
    let kp = vec![0.0; 4 * 5 * 2];
    let mut out = vec![0.0; 4 * 5 * 3];
    let short = unsafe { mx_predict(model, kp.as_ptr(), 4, 5, out.as_mut_ptr(), 10) };
    assert_eq!(short, MxStatus::InvalidArgument);
    let wrong_joints = unsafe { mx_predict(model, kp.as_ptr(), 4, 4, out.as_mut_ptr(), out.len()) };
    assert_eq!(wrong_joints, MxStatus::InvalidArgument);
    let mut bad = kp.clone();
    bad[3] = f64::NAN;
    let nan = unsafe { mx_predict(model, bad.as_ptr(), 4, 5, out.as_mut_ptr(), out.len()) };
    assert_ne!(nan, MxStatus::Ok);
    assert_eq!(unsafe { mx_model_info(ptr::null(), ptr::null_mut()) }, MxStatus::NullPointer);
    unsafe { mx_model_free(model) };
}

#[test]
fn pass_counting_and_gap() {
    assert_eq!(mx_count_passes(243, 81, MxMode::Seq2seq), 3);
    assert_eq!(mx_count_passes(243, 81, MxMode::Seq2frame), 243);
    assert_eq!(mx_count_passes(243, 0, MxMode::Seq2seq), 0);
    let (mut e, mut a) = (0.0, 0.0);
    assert_eq!(unsafe { mx_frame_evaluations_gap(243, 27, 0, &mut e, &mut a) }, MxStatus::Ok);
    assert_eq!((e, a), (27.0, 27.0));
    assert_eq!(unsafe { mx_frame_evaluations_gap(0, 27, 0, &mut e, &mut a) }, MxStatus::InvalidArgument);
}

/// Compiles a small C program against the generated header and the static
/// library. Skipped when no C compiler is available.
#[test]
fn c_program_links_against_header() {
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header_dir = crate_dir.join("include");
    assert!(header_dir.join("mixste.h").exists());
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler");
        return;
    }
    // target/<profile>/deps/<test binary>
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(|d| d.parent()).unwrap();
    let lib = profile_dir.join("libmixste_ffi.a");
    if !lib.exists() {
        eprintln!("skipping: {} not built", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "mixste.h"
int main(void) {
    MxModel *m = NULL;
    if (mx_model_new(3, 4, 8, 1, 2, 1, &m) != MX_STATUS_OK) return 1;
    double kp[6 * 3 * 2] = {0};
    double out[6 * 3 * 3];
    if (mx_predict(m, kp, 6, 3, out, 6 * 3 * 3) != MX_STATUS_OK) return 2;
    if (mx_predict(m, kp, 6, 2, out, 6 * 3 * 3) != MX_STATUS_INVALID_ARGUMENT) return 3;
    if (mx_last_error() == NULL) return 4;
    mx_model_free(m);
    printf("%zu\n", mx_count_passes(243, 81, MX_MODE_SEQ2SEQ));
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("main");
    let status = Command::new(&cc)
        .arg(&src)
        .arg("-I")
        .arg(&header_dir)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "3");
}
