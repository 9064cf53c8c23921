use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use pipetune_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(pt_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn preset(name: &str) -> *mut PtSpec {
    let mut spec = ptr::null_mut();
    assert_eq!(
        unsafe { pt_spec_preset(c(name).as_ptr(), &mut spec) },
        PtStatus::Ok
    );
    spec
}

#[test]
fn null_arguments_are_reported() {
    let mut spec = ptr::null_mut();
    let status = unsafe { pt_spec_from_json(ptr::null(), &mut spec) };
    assert_eq!(status, PtStatus::NullArgument);
    assert!(last_error().contains("json"));
    assert!(spec.is_null());
    assert!(unsafe { pt_spec_to_json(ptr::null()) }.is_null());
    assert!(unsafe { pt_plan_predicted(ptr::null()) }.is_nan());
    unsafe {
        pt_spec_free(ptr::null_mut());
        pt_string_free(ptr::null_mut());
        pt_tree_close(ptr::null_mut());
    }
}

#[test]
fn bad_json_and_unknown_presets_fail_cleanly() {
    let mut spec = ptr::null_mut();
    assert_eq!(
        unsafe { pt_spec_from_json(c("{not json").as_ptr(), &mut spec) },
        PtStatus::Parse
    );
    assert!(!last_error().is_empty());
    let bad = r#"{"root":"missing","nodes":[]}"#;
    assert_eq!(
        unsafe { pt_spec_from_json(c(bad).as_ptr(), &mut spec) },
        PtStatus::InvalidSpec
    );
    assert_eq!(
        unsafe { pt_spec_preset(c("nope").as_ptr(), &mut spec) },
        PtStatus::InvalidArgument
    );
    assert!(spec.is_null());
}

#[test]
fn parallelism_edits_round_trip_through_json() {
    let spec = preset("resnet_shape");
    let mut k = 0;
    unsafe {
        assert_eq!(
            pt_spec_set_parallelism(spec, c("decode").as_ptr(), 7),
            PtStatus::Ok
        );
        assert_eq!(
            pt_spec_get_parallelism(spec, c("decode").as_ptr(), &mut k),
            PtStatus::Ok
        );
        assert_eq!(k, 7);
        assert_eq!(
            pt_spec_set_parallelism(spec, c("decode").as_ptr(), 0),
            PtStatus::InvalidParallelism
        );
        assert_eq!(
            pt_spec_set_parallelism(spec, c("ghost").as_ptr(), 2),
            PtStatus::UnknownNode
        );
        assert_eq!(
            pt_spec_insert_prefetch(spec, c("decode").as_ptr(), 3),
            PtStatus::Ok
        );

        let json = pt_spec_to_json(spec);
        let mut copy = ptr::null_mut();
        assert_eq!(pt_spec_from_json(json, &mut copy), PtStatus::Ok);
        pt_string_free(json);
        assert_eq!(
            pt_spec_get_parallelism(copy, c("decode").as_ptr(), &mut k),
            PtStatus::Ok
        );
        assert_eq!(k, 7);
        pt_spec_free(copy);
        pt_spec_free(spec);
    }
}

#[test]
fn lp_solver_matches_closed_form() {
    let rates = [10.0, 40.0, 5.0];
    let sequential = [false, false, true];
    let mut theta = [0.0; 3];
    let mut x = 0.0;
    let status = unsafe {
        pt_solve_cpu_lp(
            rates.as_ptr(),
            sequential.as_ptr(),
            3,
            100.0,
            theta.as_mut_ptr(),
            &mut x,
        )
    };
    assert_eq!(status, PtStatus::Ok);
    assert!((x - 5.0).abs() < 1e-9, "{x}");
    assert!((theta[0] - 0.5).abs() < 1e-9);
    let status = unsafe {
        pt_solve_cpu_lp(
            rates.as_ptr(),
            sequential.as_ptr(),
            3,
            -1.0,
            theta.as_mut_ptr(),
            &mut x,
        )
    };
    assert_ne!(status, PtStatus::Ok);
}

#[test]
fn trace_plan_and_apply() {
    let spec = preset("text_shape");
    unsafe {
        let mut stores = ptr::null_mut();
        assert_eq!(pt_stores_builtin(&mut stores), PtStatus::Ok);

        let mut untraced = ptr::null_mut();
        assert_eq!(
            pt_tree_open(spec, stores, 16, 1, false, &mut untraced),
            PtStatus::Ok
        );
        let mut json = ptr::null_mut();
        assert_eq!(
            pt_tree_snapshot_json(untraced, &mut json),
            PtStatus::NotTraced
        );
        pt_tree_free(untraced);

        let mut tree = ptr::null_mut();
        assert_eq!(
            pt_tree_open(spec, stores, 16, 1, true, &mut tree),
            PtStatus::Ok
        );
        let (mut bytes, mut has) = (0u64, false);
        assert_eq!(pt_tree_next(tree, &mut bytes, &mut has), PtStatus::Ok);
        assert!(has && bytes > 0);
        let mut rate = 0.0;
        assert_eq!(pt_tree_benchmark(tree, 1.0, &mut rate), PtStatus::Ok);
        assert!(rate > 0.0);
        assert_eq!(pt_tree_snapshot_json(tree, &mut json), PtStatus::Ok);
        pt_tree_close(tree);
        assert_eq!(pt_tree_next(tree, &mut bytes, &mut has), PtStatus::Closed);
        pt_tree_free(tree);

        let mut plan = ptr::null_mut();
        assert_eq!(
            pt_plan_from_snapshot(json, stores, 16.0, 1 << 34, 0.0, &mut plan),
            PtStatus::Ok
        );
        pt_string_free(json);
        assert!(pt_plan_predicted(plan) > 0.0);
        let text = pt_plan_to_json(plan);
        assert!(!text.is_null());
        pt_string_free(text);

        let mut tuned = ptr::null_mut();
        assert_eq!(pt_plan_apply(plan, spec, &mut tuned), PtStatus::Ok);
        assert!(!tuned.is_null());

        let mut empty = ptr::null_mut();
        assert_eq!(
            pt_plan_from_snapshot(c("{}").as_ptr(), stores, 16.0, 0, 0.0, &mut empty),
            PtStatus::Parse
        );

        pt_spec_free(tuned);
        pt_plan_free(plan);
        pt_stores_free(stores);
        pt_spec_free(spec);
    }
}

fn library_dir() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let dir = exe.parent()?.parent()?.to_path_buf();
    dir.join("libpipetune_ffi.so").exists().then_some(dir)
}

#[test]
fn header_compiles_and_links_from_c() {
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(crate_dir.join("include/pipetune.h")).unwrap();
    for name in [
        "pt_last_error",
        "pt_plan_from_snapshot",
        "PT_STATUS_NOT_TRACED",
        "typedef struct PtSpec PtSpec",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
    let Some(lib_dir) = library_dir() else {
        eprintln!("shared library not found next to the test binary; skipping link step");
        return;
    };
    let out = tempfile_path();
    let status = Command::new("cc")
        .arg(crate_dir.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg("-L")
        .arg(&lib_dir)
        .arg(format!("-Wl,-rpath,{}", lib_dir.display()))
        .args(["-lpipetune_ffi", "-Wall", "-Werror", "-o"])
        .arg(&out)
        .status();
    let Ok(status) = status else {
        eprintln!("no C compiler available; skipping link step");
        return;
    };
    assert!(status.success(), "C smoke program failed to build");
    let run = Command::new(&out).output().unwrap();
    let _ = std::fs::remove_file(&out);
    assert!(
        run.status.success(),
        "smoke exited {:?}: {}",
        run.status,
        String::from_utf8_lossy(&run.stderr)
    );
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "ok");
}

fn tempfile_path() -> PathBuf {
    std::env::temp_dir().join(format!("pipetune-smoke-{}", std::process::id()))
}
