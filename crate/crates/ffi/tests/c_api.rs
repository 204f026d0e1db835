use std::collections::BTreeMap;
use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use ddep::data::NormStats;
use ddep::model::{build_model, Head, ModelConfig};
use ddep::pipelines::{Checkpoint, Stage};
use ddep::Tensor;
use ddep_ffi::*;

fn tiny_checkpoint(dir: &Path, head: Head) -> (std::path::PathBuf, Checkpoint) {
    let config = ModelConfig {
        encoder_widths: vec![4, 8],
        base_decoder_widths: vec![8, 4],
        num_classes: if head == Head::Denoiser { 3 } else { 4 },
        head,
        ..Default::default()
    };
    let ck = Checkpoint {
        stage: Stage::FineTune,
        model: build_model(&config, 3).unwrap(),
        seed: 3,
        steps: 0,
        config_hash: "00".into(),
        norm: NormStats { mean: [0.4, 0.5, 0.6], std: [0.2, 0.25, 0.3] },
        settings: BTreeMap::new(),
    };
    let path = dir.join(format!("{head}.ddep"));
    ck.save(&path).unwrap();
    (path, ck)
}

fn c_path(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn pixels(n: usize, h: usize, w: usize) -> Vec<f32> {
    (0..n * 3 * h * w).map(|i| ((i * 37) % 101) as f32 / 100.0).collect()
}

#[test]
fn inference_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, ck) = tiny_checkpoint(dir.path(), Head::Segmenter);
    let (n, h, w) = (2, 8, 12);
    let px = pixels(n, h, w);
    let x = Tensor::new(&[n, 3, h, w], px.clone()).unwrap();
    let expected = ck.model.forward(&ck.norm.normalize(&x).unwrap()).unwrap();

    let mut model = ptr::null_mut();
    let (mut channels, mut divisor) = (0, 0);
    let mut logits = vec![0.0f32; expected.numel()];
    let mut mask = vec![0u8; n * h * w];
    unsafe {
        assert_eq!(ddep_model_load(c_path(&path).as_ptr(), &mut model), DdepStatus::Ok);
        assert_eq!(ddep_model_info(model, &mut channels, &mut divisor), DdepStatus::Ok);
        assert_eq!(ddep_model_infer(model, px.as_ptr(), n, h, w, logits.as_mut_ptr(), logits.len()), DdepStatus::Ok);
        assert_eq!(ddep_model_predict_mask(model, px.as_ptr(), n, h, w, mask.as_mut_ptr()), DdepStatus::Ok);
        assert_eq!(
            ddep_model_infer(model, px.as_ptr(), n, h, w, logits.as_mut_ptr(), logits.len() - 1),
            DdepStatus::InvalidArgument
        );
        assert_eq!(ddep_model_infer(model, px.as_ptr(), n, 6, w, logits.as_mut_ptr(), 0), DdepStatus::InvalidArgument);
        ddep_model_free(model);
    }
    assert_eq!((channels, divisor), (4, 4));
    assert_eq!(logits, expected.data());
    assert_eq!(mask, expected.argmax_channels().unwrap());
}

#[test]
fn a_denoiser_does_not_predict_masks() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = tiny_checkpoint(dir.path(), Head::Denoiser);
    let px = pixels(1, 4, 4);
    let mut mask = vec![0u8; 16];
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(ddep_model_load(c_path(&path).as_ptr(), &mut model), DdepStatus::Ok);
        assert_eq!(ddep_model_predict_mask(model, px.as_ptr(), 1, 4, 4, mask.as_mut_ptr()), DdepStatus::InvalidArgument);
        ddep_model_free(model);
    }
}

#[test]
fn load_failures_map_to_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = tiny_checkpoint(dir.path(), Head::Segmenter);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    let bad = dir.path().join("bad.ddep");
    std::fs::write(&bad, &bytes).unwrap();

    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(ddep_model_load(c_path(&bad).as_ptr(), &mut model), DdepStatus::Checkpoint);
        assert!(model.is_null());
        let msg = CStr::from_ptr(ddep_last_error_message()).to_string_lossy().into_owned();
        assert!(msg.contains("bad.ddep"), "{msg}");
        let missing = dir.path().join("missing.ddep");
        assert_eq!(ddep_model_load(c_path(&missing).as_ptr(), &mut model), DdepStatus::Io);
        assert_eq!(ddep_model_load(ptr::null(), &mut model), DdepStatus::NullPointer);
        ddep_model_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_the_api_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/ddep.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["ddep_model_load", "ddep_model_infer", "ddep_confusion_miou", "DDEP_STATUS_PANIC", "ddep_last_error_message"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    match std::process::Command::new("cc").args(["-fsyntax-only", "-x", "c", "-Wall", "-Werror"]).arg(&header).status() {
        Ok(status) => assert!(status.success(), "header does not compile"),
        Err(_) => eprintln!("no C compiler; skipped syntax check"),
    }
}
