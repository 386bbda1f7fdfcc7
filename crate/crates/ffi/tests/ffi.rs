use std::ffi::{CStr, CString};
use std::ptr;

use lcc_core::model::{forward, save_checkpoint, ModelConfig, ModelParams};
use lcc_ffi::*;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        d_head: 4,
        d_ffn: 16,
        max_seq_len: 12,
        seed: 3,
    }
}

fn cstr(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = lcc_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn load(params: &ModelParams<f32>, dir: &std::path::Path) -> *mut LccModel {
    let path = dir.join("m.ckpt");
    save_checkpoint(params, &path).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { lcc_model_load(cstr(&path).as_ptr(), &mut handle) }, LccStatus::Ok);
    assert!(!handle.is_null());
    handle
}

#[test]
fn forward_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let params = ModelParams::<f32>::init(&tiny_config()).unwrap();
    let h = load(&params, dir.path());
    let tokens = [0u32, 5, 6, 7, 1];
    let mut logits = vec![0f32; tokens.len() * 16];
    let st = unsafe { lcc_model_forward(h, tokens.as_ptr(), tokens.len(), logits.as_mut_ptr(), logits.len()) };
    assert_eq!(st, LccStatus::Ok);
    assert_eq!(logits, forward(&params, &tokens, None).unwrap().data);

    let mut info = LccModelInfo::default();
    assert_eq!(unsafe { lcc_model_info(h, &mut info) }, LccStatus::Ok);
    assert_eq!((info.d_model, info.n_heads, info.vocab_size), (8, 2, 16));
    unsafe { lcc_model_free(h) };
}

#[test]
fn buffer_and_range_errors() {
    let dir = tempfile::tempdir().unwrap();
    let params = ModelParams::<f32>::init(&tiny_config()).unwrap();
    let h = load(&params, dir.path());
    let tokens = [0u32, 5];
    let mut short = vec![0f32; 3];
    let st = unsafe { lcc_model_forward(h, tokens.as_ptr(), 2, short.as_mut_ptr(), short.len()) };
    assert_eq!(st, LccStatus::ShapeMismatch);
    assert!(last_error().contains("logits"));

    let bad = [0u32, 99];
    let mut logits = vec![0f32; 32];
    let st = unsafe { lcc_model_forward(h, bad.as_ptr(), 2, logits.as_mut_ptr(), 32) };
    assert_eq!(st, LccStatus::OutOfRange);

    let c = [0.5f32; 4];
    assert_eq!(unsafe { lcc_model_inject_head_bias(h, 3, 0, c.as_ptr(), 4) }, LccStatus::OutOfRange);
    assert_eq!(unsafe { lcc_model_inject_head_bias(h, 0, 1, c.as_ptr(), 3) }, LccStatus::ShapeMismatch);
    unsafe { lcc_model_free(h) };
}

#[test]
fn null_pointers_are_reported() {
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { lcc_model_load(ptr::null(), &mut out) }, LccStatus::NullPointer);
    assert!(last_error().contains("path"));
    let mut info = LccModelInfo::default();
    assert_eq!(unsafe { lcc_model_info(ptr::null(), &mut info) }, LccStatus::NullPointer);
    unsafe {
        lcc_model_free(ptr::null_mut());
        lcc_string_free(ptr::null_mut());
    }
}

#[test]
fn missing_file_is_io_error() {
    let mut out = ptr::null_mut();
    let p = CString::new("/nonexistent/model.ckpt").unwrap();
    assert_eq!(unsafe { lcc_model_load(p.as_ptr(), &mut out) }, LccStatus::Io);
    assert!(out.is_null());
}

#[test]
fn injection_and_save_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let params = ModelParams::<f32>::init(&tiny_config()).unwrap();
    let h = load(&params, dir.path());
    let c = [0.25f32, -1.0, 0.0, 2.0];
    assert_eq!(unsafe { lcc_model_inject_head_bias(h, 0, 1, c.as_ptr(), 4) }, LccStatus::Ok);
    let out = dir.path().join("biased.ckpt");
    assert_eq!(unsafe { lcc_model_save(h, cstr(&out).as_ptr()) }, LccStatus::Ok);
    let reloaded = lcc_core::model::load_checkpoint(&out).unwrap();
    assert_eq!(reloaded.head_bias(lcc_core::model::HeadSite::new(0, 1)), &c);

    let z = [1.0f32, 0.0, 0.0, 0.0];
    let mut lens = vec![0f32; 16];
    let st = unsafe { lcc_model_logit_lens(h, 0, 1, z.as_ptr(), 4, lens.as_mut_ptr(), 16) };
    assert_eq!(st, LccStatus::Ok);
    assert!(lens.iter().all(|x| x.is_finite()));
    unsafe { lcc_model_free(h) };
}

#[test]
fn pipeline_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!(
        r#"out_dir = "{}"
[model]
vocab_size = 16
n_layers = 1
n_heads = 2
d_model = 8
d_head = 4
d_ffn = 16
max_seq_len = 24
[task]
n_samples = 200
max_count = 4
max_fillers = 2
[train]
epochs = 1
[prune]
calibration_samples = 16
[probe]
epochs = 2
[lcc]
epochs = 1
recovery_samples = 20
"#,
        dir.path().join("out").display()
    );
    let cfg_path = dir.path().join("exp.toml");
    std::fs::write(&cfg_path, cfg).unwrap();
    let mut report = ptr::null_mut();
    let st = unsafe { lcc_run_pipeline(cstr(&cfg_path).as_ptr(), &mut report) };
    assert_eq!(st, LccStatus::Ok, "{}", if st == LccStatus::Ok { String::new() } else { last_error() });
    let json = unsafe { CStr::from_ptr(report) }.to_str().unwrap().to_owned();
    unsafe { lcc_string_free(report) };
    assert!(json.contains("\"recovered\""));

    let data = std::fs::read_dir(dir.path().join("out/data")).unwrap().next().unwrap().unwrap().path();
    let fold = std::fs::read_dir(dir.path().join("out/fold")).unwrap().next().unwrap().unwrap().path();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { lcc_model_load(cstr(&fold).as_ptr(), &mut h) }, LccStatus::Ok);
    let mut m = LccMetrics::default();
    assert_eq!(unsafe { lcc_evaluate(h, cstr(&data).as_ptr(), LccSplit::HeldOut, &mut m) }, LccStatus::Ok);
    assert_eq!(m.n_samples, 20);
    assert!((0.0..=1.0).contains(&m.accuracy) && m.perplexity >= 1.0);
    unsafe { lcc_model_free(h) };

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "nonsense = 1\n").unwrap();
    let st = unsafe { lcc_run_pipeline(cstr(&bad).as_ptr(), &mut report) };
    assert_eq!(st, LccStatus::Config);
}

#[test]
fn header_declares_the_interface() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/lcc.h")).unwrap();
    for name in [
        "lcc_last_error",
        "lcc_model_load",
        "lcc_model_free",
        "lcc_model_forward",
        "lcc_model_logit_lens",
        "lcc_model_inject_head_bias",
        "lcc_evaluate",
        "lcc_run_pipeline",
        "lcc_string_free",
        "typedef struct LccModel LccModel",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = std::process::Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(cc.status.success());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("t.c");
    std::fs::write(&src, "#include \"lcc.h\"\nint main(void) { return lcc_last_error() == 0 ? 0 : 1; }\n").unwrap();
    let out = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
