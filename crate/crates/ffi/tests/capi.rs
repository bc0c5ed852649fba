use std::ffi::{CStr, CString};
use std::ptr;

use gadolab_ffi::*;

fn last_error() -> String {
    let p = gado_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/gadolab.h")).unwrap();
    for name in [
        "typedef struct GadoConfig GadoConfig;",
        "typedef struct GadoVolume GadoVolume;",
        "GADO_STATUS_OK = 0",
        "GADO_STATUS_PANIC",
        "gado_last_error(void)",
        "gado_config_from_json",
        "gado_run_train",
        "gado_volume_copy",
        "gado_dice_jaccard",
        "gado_ssim",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(gado_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn config_round_trip_and_errors() {
    unsafe {
        let mut cfg = ptr::null_mut();
        let json = CString::new(r#"{"seed": 7, "name": "c"}"#).unwrap();
        assert_eq!(gado_config_from_json(json.as_ptr(), &mut cfg), GadoStatus::Ok);
        let set = CString::new("train.epochs=3").unwrap();
        assert_eq!(gado_config_set(cfg, set.as_ptr()), GadoStatus::Ok);
        let bad = CString::new("train.epoch=3").unwrap();
        assert_eq!(gado_config_set(cfg, bad.as_ptr()), GadoStatus::InvalidArgument);
        assert!(last_error().contains("epoch"));
        let mut s = ptr::null_mut();
        assert_eq!(gado_config_to_json(cfg, &mut s), GadoStatus::Ok);
        let text = CStr::from_ptr(s).to_str().unwrap().to_owned();
        gado_string_free(s);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["seed"], 7);
        assert_eq!(v["train"]["epochs"], 3);
        gado_config_free(cfg);

        let unknown = CString::new(r#"{"sede": 1}"#).unwrap();
        let mut other = ptr::null_mut();
        assert_eq!(gado_config_from_json(unknown.as_ptr(), &mut other), GadoStatus::InvalidArgument);
        assert!(other.is_null());
        assert_eq!(gado_config_from_json(ptr::null(), &mut other), GadoStatus::NullPointer);
        gado_config_free(ptr::null_mut());
    }
}

#[test]
fn phantom_volume_handle() {
    unsafe {
        let recipe = CString::new(r#"{"height": 16, "width": 16, "depth": 16, "noise": 0.0, "seed": 3}"#).unwrap();
        let mut vol = ptr::null_mut();
        assert_eq!(gado_phantom_generate(recipe.as_ptr(), &mut vol), GadoStatus::Ok);
        let (mut h, mut w, mut d) = (0, 0, 0);
        assert_eq!(gado_volume_dims(vol, &mut h, &mut w, &mut d), GadoStatus::Ok);
        assert_eq!((h, w, d), (16, 16, 16));
        let n = h * w * d;
        let (mut pre, mut post, mut roi) = (vec![0.0f32; n], vec![0.0f32; n], vec![0.0f32; n]);
        assert_eq!(gado_volume_copy(vol, GadoVolumeField::Pre, pre.as_mut_ptr(), n), GadoStatus::Ok);
        assert_eq!(gado_volume_copy(vol, GadoVolumeField::Post, post.as_mut_ptr(), n), GadoStatus::Ok);
        assert_eq!(gado_volume_copy(vol, GadoVolumeField::Roi, roi.as_mut_ptr(), n), GadoStatus::Ok);
        assert!(pre.iter().all(|v| v.is_finite()));
        assert!(roi.iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(pre.iter().zip(&post).zip(&roi).all(|((a, b), &r)| r == 1.0 || a == b));
        assert_eq!(gado_volume_copy(vol, GadoVolumeField::Pre, pre.as_mut_ptr(), n - 1), GadoStatus::Shape);
        gado_volume_free(vol);

        let bad = CString::new(r#"{"height": 4}"#).unwrap();
        let mut none = ptr::null_mut();
        assert_eq!(gado_phantom_generate(bad.as_ptr(), &mut none), GadoStatus::InvalidArgument);
        assert!(last_error().contains("16"));
    }
}

#[test]
fn metrics_through_the_abi() {
    unsafe {
        let a = [1u8, 1, 0, 0];
        let b = [1u8, 0, 1, 0];
        let (mut d, mut j) = (0.0, 0.0);
        assert_eq!(gado_dice_jaccard(a.as_ptr(), b.as_ptr(), 4, &mut d, &mut j), GadoStatus::Ok);
        assert_eq!((d, j), (0.5, 1.0 / 3.0));
        assert_eq!(gado_dice_jaccard(ptr::null(), b.as_ptr(), 4, &mut d, &mut j), GadoStatus::NullPointer);

        let field = [0.1f32, -5.0, 3.0, 0.2, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let roi = [1u8; 10];
        let mut sel = [9u8; 10];
        assert_eq!(gado_threshold_segment(field.as_ptr(), roi.as_ptr(), 10, 20.0, sel.as_mut_ptr()), GadoStatus::Ok);
        assert_eq!(sel, [0, 1, 0, 0, 1, 0, 0, 0, 0, 0]);
        assert_eq!(gado_threshold_segment(field.as_ptr(), roi.as_ptr(), 10, 31.0, sel.as_mut_ptr()), GadoStatus::InvalidArgument);

        let u = [1.0f32, 2.0, 3.0, 4.0];
        let v = [2.0f32, 4.0, 6.0, 8.0];
        let (mut r, mut p) = (0.0, 1.0);
        assert_eq!(gado_pearson(u.as_ptr(), v.as_ptr(), 4, &mut r, &mut p), GadoStatus::Ok);
        assert!((r - 1.0).abs() < 1e-12 && p < 1e-6);

        let img: Vec<f32> = (0..144).map(|i| (i % 13) as f32).collect();
        let mut s = 0.0;
        assert_eq!(gado_ssim(img.as_ptr(), img.as_ptr(), 12, 12, 12.0, &mut s), GadoStatus::Ok);
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(gado_ssim(img.as_ptr(), img.as_ptr(), 4, 36, 12.0, &mut s), GadoStatus::InvalidArgument);
    }
}

#[test]
fn pipeline_errors_are_reported() {
    unsafe {
        let dir = tempfile::tempdir().unwrap();
        let json = serde_json::json!({ "name": "ffi", "output_dir": dir.path() }).to_string();
        let json = CString::new(json).unwrap();
        let mut cfg = ptr::null_mut();
        assert_eq!(gado_config_from_json(json.as_ptr(), &mut cfg), GadoStatus::Ok);
        let model = CString::new("dm").unwrap();
        assert_eq!(gado_run_sample(cfg, model.as_ptr(), ptr::null()), GadoStatus::InvalidArgument);
        assert!(last_error().contains("gen"));
        let bogus = CString::new("gan").unwrap();
        assert_eq!(gado_run_train(cfg, bogus.as_ptr(), ptr::null()), GadoStatus::InvalidArgument);
        assert_eq!(gado_run_eval(ptr::null()), GadoStatus::NullPointer);
        gado_config_free(cfg);
    }
}
