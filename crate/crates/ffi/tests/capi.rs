use std::ffi::{CStr, CString};
use std::ptr;

use reachnet::nn::{save_model, Arch};
use reachnet_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(rn_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(rn_version()) };
    assert_eq!(v.to_str().unwrap(), reachnet::cli::VERSION);
}

#[test]
fn model_lifecycle_and_labels() {
    let name = CString::new("pendulum").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { rn_model_new(name.as_ptr(), &mut m) }, RnStatus::Ok);
    let (mut dim, mut t, mut h) = (0usize, 0.0, 0.0);
    assert_eq!(unsafe { rn_model_info(m, &mut dim, &mut t, &mut h) }, RnStatus::Ok);
    assert_eq!((dim, t, h), (2, 5.0, 0.01));

    let mut reaches = true;
    let upright = [0.0, 0.0];
    assert_eq!(unsafe { rn_reach_label(m, upright.as_ptr(), 2, t, h, &mut reaches) }, RnStatus::Ok);
    assert!(!reaches);
    let outside = [1.0, 0.0];
    assert_eq!(unsafe { rn_reach_label(m, outside.as_ptr(), 2, t, h, &mut reaches) }, RnStatus::Ok);
    assert!(reaches);

    assert_eq!(unsafe { rn_reach_label(m, upright.as_ptr(), 3, t, h, &mut reaches) }, RnStatus::InvalidArgument);
    assert!(last_error().contains("expected 2"));
    assert_eq!(unsafe { rn_reach_label(m, upright.as_ptr(), 2, -1.0, h, &mut reaches) }, RnStatus::InvalidArgument);
    unsafe { rn_model_free(m) };
}

#[test]
fn unknown_model_and_nulls() {
    let name = CString::new("rocket").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { rn_model_new(name.as_ptr(), &mut m) }, RnStatus::UnknownModel);
    assert!(m.is_null());
    assert!(last_error().contains("pendulum"));
    assert_eq!(unsafe { rn_model_new(ptr::null(), &mut m) }, RnStatus::NullPointer);
    let mut dim = 0usize;
    assert_eq!(unsafe { rn_classifier_input_dim(ptr::null(), &mut dim) }, RnStatus::NullPointer);
    unsafe {
        rn_model_free(ptr::null_mut());
        rn_classifier_free(ptr::null_mut());
    }
}

#[test]
fn classifier_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.json");
    let net = Arch::Snn.build(vec![-1.0, -2.0], vec![1.0, 2.0]).unwrap();
    save_model(&net, &path).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut c = ptr::null_mut();
    assert_eq!(unsafe { rn_classifier_load(cpath.as_ptr(), &mut c) }, RnStatus::Ok);
    let mut dim = 0usize;
    assert_eq!(unsafe { rn_classifier_input_dim(c, &mut dim) }, RnStatus::Ok);
    assert_eq!(dim, 2);

    let x = [0.3, -0.7];
    let mut score = -1.0;
    assert_eq!(unsafe { rn_classifier_score(c, x.as_ptr(), 2, &mut score) }, RnStatus::Ok);
    assert_eq!(score, net.forward(&x));
    let mut positive = false;
    assert_eq!(unsafe { rn_classifier_set_threshold(c, score / 2.0) }, RnStatus::Ok);
    assert_eq!(unsafe { rn_classifier_classify(c, x.as_ptr(), 2, &mut positive) }, RnStatus::Ok);
    assert!(positive);
    assert_eq!(unsafe { rn_classifier_set_threshold(c, 1.5) }, RnStatus::InvalidArgument);
    unsafe { rn_classifier_free(c) };

    let missing = CString::new(dir.path().join("nope.json").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { rn_classifier_load(missing.as_ptr(), &mut c) }, RnStatus::Io);
    std::fs::write(&path, "{\"schema\": 99, \"kind\": \"network\"}").unwrap();
    assert_eq!(unsafe { rn_classifier_load(cpath.as_ptr(), &mut c) }, RnStatus::Schema);
}

#[test]
fn wilson_through_c() {
    let (mut lo, mut hi) = (0.0, 0.0);
    assert_eq!(unsafe { rn_wilson_ci(0.9999, 10_000, 0.01, &mut lo, &mut hi) }, RnStatus::Ok);
    assert!((lo - 0.99915).abs() < 1e-5 && (hi - 0.99999).abs() < 1e-5);
    assert_eq!(unsafe { rn_wilson_ci(0.5, 0, 0.01, &mut lo, &mut hi) }, RnStatus::InvalidArgument);
    assert_eq!(unsafe { rn_wilson_ci(0.5, 10, 0.01, ptr::null_mut(), &mut hi) }, RnStatus::NullPointer);
}

#[test]
fn header_declares_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/reachnet.h")).unwrap();
    for name in [
        "rn_version",
        "rn_last_error",
        "rn_model_new",
        "rn_model_free",
        "rn_model_info",
        "rn_reach_label",
        "rn_classifier_load",
        "rn_classifier_free",
        "rn_classifier_score",
        "rn_classifier_classify",
        "rn_classifier_set_threshold",
        "rn_wilson_ci",
        "typedef struct RnModel RnModel",
        "RN_STATUS_NULL_POINTER",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
