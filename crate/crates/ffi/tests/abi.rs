use std::ffi::{CStr, CString};
use std::ptr;

use equicaps::capsnet::{EncoderConfig, ModelConfig, POSE_DIM};
use equicaps::geometry::{self, tait_bryan_to_rotation, RigidTransform, TaitBryanAngles};
use equicaps::training::{TrainConfig, TrainState, CHECKPOINT_FILE};
use equicaps_ffi::*;

fn transform(angles: [f64; 3], t: [f64; 3]) -> *mut EqTransform {
    let mut out = ptr::null_mut();
    let s = unsafe { eq_transform_new(angles[0], angles[1], angles[2], t[0], t[1], t[2], &mut out) };
    assert_eq!(s, EqStatus::Ok);
    assert!(!out.is_null());
    out
}

fn matrix(t: *const EqTransform) -> [f64; 16] {
    let mut m = [0.0; 16];
    assert_eq!(unsafe { eq_transform_matrix(t, m.as_mut_ptr()) }, EqStatus::Ok);
    m
}

fn last_error() -> String {
    let p = eq_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn transform_round_trip_matches_library() {
    let (angles, t) = ([0.3, -0.7, 1.1], [0.1, -0.2, 0.4]);
    let h = transform(angles, t);
    let r = tait_bryan_to_rotation(TaitBryanAngles::new(angles[0], angles[1], angles[2])).unwrap();
    let want = RigidTransform::new(r, t);
    let m = matrix(h);
    for (a, b) in m.iter().zip(want.matrix().iter().flatten()) {
        assert_eq!(a, b);
    }
    let mut rep = [0.0; 16];
    assert_eq!(unsafe { eq_transform_representation(h, rep.as_mut_ptr()) }, EqStatus::Ok);
    for i in 0..4 {
        for j in 0..4 {
            assert_eq!(rep[i * 4 + j], m[j * 4 + i]);
        }
    }
    let mut q = [0.0; 4];
    assert_eq!(unsafe { eq_transform_quaternion(h, q.as_mut_ptr()) }, EqStatus::Ok);
    assert_eq!(q, want.rotation.quaternion());

    let mut inv = ptr::null_mut();
    let mut id = ptr::null_mut();
    unsafe {
        assert_eq!(eq_transform_inverse(h, &mut inv), EqStatus::Ok);
        assert_eq!(eq_transform_compose(h, inv, &mut id), EqStatus::Ok);
    }
    for (a, b) in matrix(id).iter().zip(geometry::IDENTITY4.iter().flatten()) {
        assert!((a - b).abs() < 1e-12);
    }
    unsafe {
        eq_transform_free(h);
        eq_transform_free(inv);
        eq_transform_free(id);
        eq_transform_free(ptr::null_mut());
    }
}

#[test]
fn relative_transform_maps_first_onto_second() {
    let g1 = transform([0.2, 0.1, -0.4], [0.3, 0.0, -0.1]);
    let g2 = transform([-0.5, 0.9, 0.2], [-0.2, 0.4, 0.1]);
    let mut rel = ptr::null_mut();
    let mut back = ptr::null_mut();
    unsafe {
        assert_eq!(eq_transform_relative(g1, g2, &mut rel), EqStatus::Ok);
        assert_eq!(eq_transform_compose(rel, g1, &mut back), EqStatus::Ok);
    }
    for (a, b) in matrix(back).iter().zip(matrix(g2).iter()) {
        assert!((a - b).abs() < 1e-12);
    }
    for h in [g1, g2, rel, back] {
        unsafe { eq_transform_free(h) };
    }
}

#[test]
fn errors_set_status_and_message() {
    let mut out = ptr::null_mut();
    let s = unsafe { eq_transform_new(f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0, &mut out) };
    assert_eq!(s, EqStatus::Domain);
    assert!(out.is_null());
    assert!(!last_error().is_empty());

    let s = unsafe { eq_transform_new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, ptr::null_mut()) };
    assert_eq!(s, EqStatus::NullPointer);
    assert!(last_error().contains("out"));

    let missing = CString::new("/nonexistent/model.eqcp").unwrap();
    let cfg = CString::new("/nonexistent/config.json").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { eq_model_load(missing.as_ptr(), cfg.as_ptr(), &mut m) }, EqStatus::Io);
    assert!(m.is_null());
}

#[test]
fn predicted_poses_follow_the_right_action() {
    let capsules = 3;
    let poses: Vec<f64> = (0..capsules * POSE_DIM).map(|k| ((k * 7 % 11) as f64) - 5.0).collect();
    let g = transform([0.4, -0.3, 0.8], [0.1, 0.2, -0.3]);
    let mut out = vec![0.0; poses.len()];
    assert_eq!(unsafe { eq_predict_poses(poses.as_ptr(), capsules, g, out.as_mut_ptr()) }, EqStatus::Ok);
    let mut rep = [0.0; 16];
    unsafe { eq_transform_representation(g, rep.as_mut_ptr()) };
    for c in 0..capsules {
        let z = &poses[c * 16..(c + 1) * 16];
        let mut prod = [0.0; 16];
        for i in 0..4 {
            for j in 0..4 {
                prod[i * 4 + j] = (0..4).map(|k| z[i * 4 + k] * rep[k * 4 + j]).sum();
            }
        }
        let norm = prod.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, b) in out[c * 16..(c + 1) * 16].iter().zip(&prod) {
            assert!((a - b / norm).abs() < 1e-12);
        }
    }
    unsafe { eq_transform_free(g) };
}

#[test]
fn model_forward_shapes_and_normalization() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = TrainConfig::default();
    cfg.model = ModelConfig {
        encoder: EncoderConfig {
            resolution: 16,
            channels: vec![4, 8],
            strides: vec![2, 2],
            kernel: 3,
            norm_groups: 2,
        },
        primary_types: 2,
        capsules: 5,
        pose_bias: true,
    };
    TrainState::init(&cfg).unwrap().save(dir.path(), 0).unwrap();
    let cfg_path = dir.path().join("config.json");
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();

    let ckpt = CString::new(dir.path().join(CHECKPOINT_FILE).to_str().unwrap()).unwrap();
    let cfgc = CString::new(cfg_path.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { eq_model_load(ckpt.as_ptr(), cfgc.as_ptr(), &mut m) }, EqStatus::Ok);
    let (res, r, n) = unsafe { (eq_model_resolution(m), eq_model_representation_dim(m), eq_model_capsules(m)) };
    assert_eq!((res, r, n), (16, 8, 5));

    let count = 3;
    let images: Vec<u8> = (0..count * res * res * 3).map(|k| (k * 31 % 256) as u8).collect();
    let mut repr = vec![f32::NAN; count * r];
    let mut act = vec![f32::NAN; count * n];
    let mut poses = vec![f32::NAN; count * n * POSE_DIM];
    let s = unsafe {
        eq_model_forward(m, images.as_ptr(), count, repr.as_mut_ptr(), act.as_mut_ptr(), poses.as_mut_ptr())
    };
    assert_eq!(s, EqStatus::Ok);
    assert!(repr.iter().chain(&poses).all(|v| v.is_finite()));
    for row in act.chunks(n) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
    let s = unsafe { eq_model_forward(m, images.as_ptr(), 0, ptr::null_mut(), ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(s, EqStatus::InvalidArgument);
    unsafe { eq_model_free(m) };
}

#[test]
fn version_is_nul_terminated() {
    let v = unsafe { CStr::from_ptr(eq_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let header = include_str!("../include/equicaps.h");
    for name in [
        "eq_version",
        "eq_last_error_message",
        "eq_transform_new",
        "eq_transform_free",
        "eq_transform_compose",
        "eq_transform_inverse",
        "eq_transform_relative",
        "eq_transform_matrix",
        "eq_transform_representation",
        "eq_transform_quaternion",
        "eq_predict_poses",
        "eq_model_load",
        "eq_model_free",
        "eq_model_forward",
        "typedef struct EqModel EqModel",
        "EQ_STATUS_PANIC = 10",
    ] {
        assert!(header.contains(name), "missing {name}");
    }
}
