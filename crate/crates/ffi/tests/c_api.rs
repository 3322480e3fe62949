use std::ffi::{CStr, CString};
use std::ptr;

use colm_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(colm_last_error()).to_string_lossy().into_owned() }
}

fn instance(kind: &str, n: usize, seed: u64) -> *mut ColmInstance {
    let k = CString::new(kind).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { colm_instance_generate(k.as_ptr(), n, seed, &mut h) }, COLM_OK);
    h
}

#[test]
fn expert_then_verify() {
    let inst = instance("TSP", 6, 3);
    let mut buf = [0usize; 16];
    let (mut len, mut obj) = (0usize, 0.0f64);
    unsafe {
        assert_eq!(colm_expert_solve(inst, 12, buf.as_mut_ptr(), buf.len(), &mut len, &mut obj), COLM_OK);
        assert_eq!(len, 6);
        let (mut ok, mut vobj) = (false, 0.0);
        assert_eq!(colm_verify(inst, buf.as_ptr(), len, &mut ok, &mut vobj), COLM_OK);
        assert!(ok);
        assert!((vobj - obj).abs() < 1e-12);
        buf[1] = buf[0];
        assert_eq!(colm_verify(inst, buf.as_ptr(), len, &mut ok, &mut vobj), COLM_OK);
        assert!(!ok);
        colm_instance_free(inst);
    }
}

#[test]
fn small_buffer_reports_length() {
    let inst = instance("KNAPSACK", 8, 1);
    let mut buf = [0usize; 1];
    let (mut len, mut obj) = (0usize, 0.0f64);
    let rc = unsafe { colm_expert_solve(inst, 12, buf.as_mut_ptr(), 0, &mut len, &mut obj) };
    if len > 0 {
        assert_eq!(rc, COLM_ERR_BUFFER);
        assert!(last_error().contains("do not fit"));
    }
    unsafe { colm_instance_free(inst) };
}

#[test]
fn random_model_decodes_feasibly() {
    let preset = CString::new("tiny").unwrap();
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(colm_model_init(preset.as_ptr(), 1, &mut model), COLM_OK);
        for kind in ["TSP", "CVRP", "OP", "MIS"] {
            let inst = instance(kind, 5, 2);
            let mut buf = [0usize; 64];
            let (mut len, mut obj) = (0usize, 0.0f64);
            assert_eq!(colm_solve(model, inst, 4, 1.0, 7, buf.as_mut_ptr(), buf.len(), &mut len, &mut obj), COLM_OK);
            let (mut ok, mut vobj) = (false, 0.0);
            colm_verify(inst, buf.as_ptr(), len, &mut ok, &mut vobj);
            assert!(ok, "{kind}");
            colm_instance_free(inst);
        }
        colm_model_free(model);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    let bad = CString::new("SUDOKU").unwrap();
    let mut h = ptr::null_mut();
    unsafe {
        assert_eq!(colm_instance_generate(bad.as_ptr(), 5, 0, &mut h), 17);
        assert!(last_error().starts_with("config"));
        assert_eq!(colm_instance_generate(ptr::null(), 5, 0, &mut h), COLM_ERR_NULL);
        let mut v = 0.0;
        assert_eq!(colm_mu_law_encode(f64::NAN, &mut v), 13);
        let mut t = 0u32;
        assert_eq!(colm_continuous_to_token(0.0, &mut t), COLM_OK);
        assert_eq!(t, 1100);
        let dir = CString::new("/nonexistent/checkpoint").unwrap();
        let mut m = ptr::null_mut();
        assert_ne!(colm_model_load(dir.as_ptr(), &mut m), COLM_OK);
        assert!(m.is_null());
    }
}

#[test]
fn header_declares_api_and_compiles() {
    let root = env!("CARGO_MANIFEST_DIR");
    let header = std::fs::read_to_string(format!("{root}/include/colm.h")).unwrap();
    for f in ["colm_instance_generate", "colm_solve", "colm_last_error", "colm_model_load", "COLM_ERR_BUFFER"] {
        assert!(header.contains(f), "{f}");
    }
    let src = format!("#include \"{root}/include/colm.h\"\nint main(void) {{ return colm_last_error() == 0; }}\n");
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("probe.c");
    std::fs::write(&c, src).unwrap();
    if let Ok(status) = std::process::Command::new("cc").arg("-fsyntax-only").arg(&c).status() {
        assert!(status.success());
    }
}
