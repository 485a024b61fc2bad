use std::ffi::{CStr, CString};
use std::ptr;

use lanecascade::classifier::{ClsModel, ClsModelConfig, TaxonomyScheme};
use lanecascade::datasets::{generate_scene, SceneSpec};
use lanecascade::losses::Phase;
use lanecascade::segmentation::{Architecture, SegModel, SegModelConfig, BINARY_CHANNELS, INSTANCE_CHANNELS};
use lanecascade_ffi::*;

fn last_error() -> String {
    let p = lc_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cstr(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn mini() -> SegModelConfig {
    SegModelConfig {
        input_size: (64, 32),
        width_multiplier: 0.5,
        architecture: Architecture::Mini,
        ..SegModelConfig::default()
    }
}

/// Untrained but valid checkpoints; `phase` picks the segmentation head.
fn checkpoints(dir: &std::path::Path, phase: Phase) -> (CString, CString) {
    let channels = match phase {
        Phase::Binary => BINARY_CHANNELS,
        Phase::Instance => INSTANCE_CHANNELS,
    };
    let seg = SegModel::new(&mini(), 3, channels).unwrap();
    let cls = ClsModel::new(
        &ClsModelConfig::new(16, TaxonomyScheme::ThreeClass),
        TaxonomyScheme::ThreeClass,
        4,
    )
    .unwrap();
    let (sp, cp) = (dir.join("seg.safetensors"), dir.join("cls.safetensors"));
    seg.save(&sp, phase).unwrap();
    cls.save(&cp, Some(&seg.config().hash())).unwrap();
    (cstr(&sp), cstr(&cp))
}

#[test]
fn version_matches_the_crate() {
    let v = unsafe { CStr::from_ptr(lc_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn remap_follows_the_taxonomy() {
    let mut out = 0;
    unsafe {
        assert_eq!(lc_remap_class(5, LcScheme::TwoClass, &mut out), LcStatus::Ok);
        assert_eq!(out, 1);
        assert_eq!(lc_remap_class(5, LcScheme::ThreeClass, &mut out), LcStatus::Ok);
        assert_eq!(out, 2);
        assert_eq!(lc_remap_class(7, LcScheme::TwoClass, &mut out), LcStatus::Ok);
        assert_eq!(out, -1);
        assert_eq!(lc_remap_class(6, LcScheme::Full, &mut out), LcStatus::Ok);
        assert_eq!(out, 6);
        assert_eq!(lc_remap_class(8, LcScheme::Full, &mut out), LcStatus::InvalidArgument);
        assert!(last_error().contains("code 8"));
        assert_eq!(
            lc_remap_class(0, LcScheme::Full, ptr::null_mut()),
            LcStatus::NullPointer
        );
    }
}

#[test]
fn open_reports_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = cstr(&dir.path().join("nope.safetensors"));
    let mut handle = ptr::null_mut();
    unsafe {
        assert_eq!(
            lc_cascade_open(ptr::null(), missing.as_ptr(), &mut handle),
            LcStatus::NullPointer
        );
        let status = lc_cascade_open(missing.as_ptr(), missing.as_ptr(), &mut handle);
        assert!(matches!(status, LcStatus::Io | LcStatus::Checkpoint), "{status:?}");
        assert!(handle.is_null());
        assert!(!last_error().is_empty());

        // a binary-phase segmentation model cannot run the cascade
        let (seg, cls) = checkpoints(dir.path(), Phase::Binary);
        assert_eq!(
            lc_cascade_open(seg.as_ptr(), cls.as_ptr(), &mut handle),
            LcStatus::Incompatible
        );
        assert!(last_error().contains("instance"));
        lc_cascade_free(ptr::null_mut());
        lc_result_free(ptr::null_mut());
        assert_eq!(lc_result_count(ptr::null()), 0);
    }
}

#[test]
fn infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (seg, cls) = checkpoints(dir.path(), Phase::Instance);
    let scene = generate_scene(&SceneSpec::new(11, (128, 64), 3)).unwrap();
    let img = scene.image.loaded().unwrap();
    let (w, h) = img.dimensions();
    // padded rows exercise the stride
    let stride = w as usize * 3 + 5;
    let mut buf = vec![0u8; stride * h as usize];
    for y in 0..h as usize {
        buf[y * stride..y * stride + w as usize * 3]
            .copy_from_slice(&img.as_raw()[y * w as usize * 3..(y + 1) * w as usize * 3]);
    }
    unsafe {
        let mut cascade = ptr::null_mut();
        assert_eq!(lc_cascade_open(seg.as_ptr(), cls.as_ptr(), &mut cascade), LcStatus::Ok);
        let mut classes = 0;
        assert_eq!(lc_cascade_num_classes(cascade, &mut classes), LcStatus::Ok);
        assert_eq!(classes, 3);

        let mut bad = ptr::null_mut();
        assert_eq!(
            lc_cascade_infer(cascade, buf.as_ptr(), w, h, 2, &mut bad),
            LcStatus::InvalidArgument
        );

        let mut result = ptr::null_mut();
        assert_eq!(
            lc_cascade_infer(cascade, buf.as_ptr(), w, h, stride, &mut result),
            LcStatus::Ok
        );
        let n = lc_result_count(result);
        assert!(n <= 4);
        let mut calls = 0;
        assert_eq!(lc_cascade_invocations(cascade, &mut calls), LcStatus::Ok);
        assert_eq!(calls, if n > 0 { 2 } else { 1 });
        for i in 0..n {
            let mut count = 0;
            assert_eq!(lc_result_point_count(result, i, &mut count), LcStatus::Ok);
            assert!(count >= 3);
            let mut rows = vec![0i32; count];
            let mut xs = vec![0f64; count];
            assert_eq!(
                lc_result_points(result, i, rows.as_mut_ptr(), xs.as_mut_ptr(), count - 1),
                LcStatus::OutOfRange
            );
            assert_eq!(
                lc_result_points(result, i, rows.as_mut_ptr(), xs.as_mut_ptr(), count),
                LcStatus::Ok
            );
            assert!(rows.windows(2).all(|r| r[0] < r[1]));
            assert!(xs.iter().all(|x| (0.0..w as f64).contains(x)));
            let (mut class, mut conf) = (0u32, 0f32);
            assert_eq!(lc_result_class(result, i, &mut class, &mut conf), LcStatus::Ok);
            assert!(class < 3 && (0.0..=1.0).contains(&conf));
        }
        let mut count = 0;
        assert_eq!(lc_result_point_count(result, n, &mut count), LcStatus::OutOfRange);
        lc_result_free(result);
        lc_cascade_free(cascade);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/lanecascade.h")).unwrap();
    for name in [
        "lc_version",
        "lc_last_error_message",
        "lc_cascade_open",
        "lc_cascade_infer",
        "lc_cascade_free",
        "lc_result_points",
        "lc_result_class",
        "lc_remap_class",
        "LC_STATUS_OUT_OF_RANGE",
        "typedef struct LcCascade LcCascade",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
