use std::ffi::{CStr, CString};
use std::ptr;

use dggxnet::config::RunConfig;
use dggxnet::model::{Branch, FusionModel};
use dggxnet::pipeline::config_meta;
use dggxnet::train::{save_checkpoint, AdamHyper, AdamState, TrainLog};
use dggxnet::xai::{grad_cam, integrated_gradients_raw, IgConfig};
use dggxnet::Tensor;
use dggxnet_ffi::*;

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("data.size", "8"),
        ("backbone.a.widths", "3"),
        ("backbone.b.stem", "2"),
        ("backbone.b.growth", "2"),
        ("backbone.b.blocks", "1"),
        ("model.hidden", "4"),
        ("xai.ig_steps", "6"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

fn write_checkpoint(dir: &std::path::Path) -> (CString, FusionModel) {
    let cfg = small_config();
    let names = vec!["alpha".to_string(), "beta".to_string(), "gamma".to_string()];
    let model = FusionModel::build(cfg.model_spec(names)).unwrap();
    let adam = AdamState::for_params(model.params(), AdamHyper::default());
    let path = dir.join("m.dggx");
    save_checkpoint(&model, &adam, &TrainLog::default(), &config_meta(&cfg), &path).unwrap();
    (CString::new(path.to_str().unwrap()).unwrap(), model)
}

fn image() -> Vec<f64> {
    (0..64).map(|i| ((i * 37) % 64) as f64 / 63.0).collect()
}

struct Handle(*mut DggxModel);

impl Drop for Handle {
    fn drop(&mut self) {
        unsafe { dggx_model_free(self.0) };
    }
}

fn load(path: &CString) -> Handle {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { dggx_model_load(path.as_ptr(), &mut h) }, DggxStatus::Ok);
    assert!(!h.is_null());
    Handle(h)
}

#[test]
fn info_names_and_prediction_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, model) = write_checkpoint(dir.path());
    let h = load(&path);
    let (mut n, mut c, mut s) = (0, 0, 0);
    assert_eq!(unsafe { dggx_model_info(h.0, &mut n, &mut c, &mut s) }, DggxStatus::Ok);
    assert_eq!((n, c, s), (3, 1, 8));

    let mut name = ptr::null_mut();
    assert_eq!(unsafe { dggx_model_class_name(h.0, 1, &mut name) }, DggxStatus::Ok);
    assert_eq!(unsafe { CStr::from_ptr(name) }.to_str().unwrap(), "beta");
    unsafe { dggx_string_free(name) };
    assert_eq!(unsafe { dggx_model_class_name(h.0, 3, &mut name) }, DggxStatus::Parameter);

    let img = image();
    let mut probs = [0.0; 3];
    let mut predicted = usize::MAX;
    let status =
        unsafe { dggx_model_predict(h.0, img.as_ptr(), img.len(), probs.as_mut_ptr(), 3, &mut predicted) };
    assert_eq!(status, DggxStatus::Ok);
    let (want_cls, want_p) = model.predict(&Tensor::new(vec![1, 8, 8], img.clone()).unwrap()).unwrap();
    assert_eq!(predicted, want_cls);
    assert_eq!(probs.to_vec(), want_p);
}

#[test]
fn attributions_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, model) = write_checkpoint(dir.path());
    let h = load(&path);
    let img = image();
    let x = Tensor::new(vec![1, 8, 8], img.clone()).unwrap();

    let (mut hh, mut ww) = (0, 0);
    assert_eq!(unsafe { dggx_grad_cam_shape(h.0, DggxBranch::A, &mut hh, &mut ww) }, DggxStatus::Ok);
    let mut cam = vec![0.0; hh * ww];
    let status =
        unsafe { dggx_grad_cam(h.0, img.as_ptr(), img.len(), 2, DggxBranch::A, cam.as_mut_ptr(), cam.len()) };
    assert_eq!(status, DggxStatus::Ok);
    assert_eq!(cam, grad_cam(&model, &x, 2, Branch::A).unwrap().values.pixels());

    let mut ig = vec![0.0; 64];
    let status =
        unsafe { dggx_integrated_gradients(h.0, img.as_ptr(), img.len(), 0, 0, ig.as_mut_ptr(), ig.len()) };
    assert_eq!(status, DggxStatus::Ok);
    let cfg = IgConfig { baseline: None, steps: 6, batch: 16 };
    assert_eq!(ig, integrated_gradients_raw(&model, &x, 0, &cfg).unwrap().data());
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut h = ptr::null_mut();
    let missing = CString::new("/no/such/file.dggx").unwrap();
    assert_eq!(unsafe { dggx_model_load(missing.as_ptr(), &mut h) }, DggxStatus::Path);
    assert!(h.is_null());
    let msg = unsafe { CStr::from_ptr(dggx_last_error_message()) };
    assert!(msg.to_str().unwrap().contains("/no/such/file.dggx"));

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.dggx");
    std::fs::write(&junk, b"NOPE").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { dggx_model_load(junk.as_ptr(), &mut h) }, DggxStatus::Format);
    assert_eq!(unsafe { dggx_model_load(ptr::null(), &mut h) }, DggxStatus::NullPointer);

    let (path, _) = write_checkpoint(dir.path());
    let h = load(&path);
    let img = image();
    let mut probs = [0.0; 2];
    let short =
        unsafe { dggx_model_predict(h.0, img.as_ptr(), img.len(), probs.as_mut_ptr(), 2, ptr::null_mut()) };
    assert_eq!(short, DggxStatus::BufferTooSmall);
    let mut probs = [0.0; 3];
    let bad_len =
        unsafe { dggx_model_predict(h.0, img.as_ptr(), 10, probs.as_mut_ptr(), 3, ptr::null_mut()) };
    assert_eq!(bad_len, DggxStatus::Shape);
    let mut cam = [0.0; 64];
    let bad_class =
        unsafe { dggx_grad_cam(h.0, img.as_ptr(), img.len(), 7, DggxBranch::B, cam.as_mut_ptr(), 64) };
    assert_eq!(bad_class, DggxStatus::Parameter);
    assert!(!unsafe { CStr::from_ptr(dggx_version()) }.to_bytes().is_empty());
}

#[test]
fn header_declares_the_exports() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/dggxnet.h")).unwrap();
    for sym in [
        "dggx_model_load",
        "dggx_model_free",
        "dggx_model_predict",
        "dggx_grad_cam",
        "dggx_integrated_gradients",
        "dggx_last_error_message",
        "DGGX_STATUS_OK",
        "typedef struct DggxModel DggxModel",
    ] {
        assert!(header.contains(sym), "header lacks {sym}");
    }
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/dggxnet.h");
    match std::process::Command::new("cc").args(["-fsyntax-only", "-x", "c", header]).status() {
        Ok(status) => assert!(status.success(), "cc rejected the header"),
        Err(e) => eprintln!("skipping: no C compiler ({e})"),
    }
}
