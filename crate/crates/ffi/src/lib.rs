//! C ABI over the `equicaps` library.
//!
//! Objects cross the boundary as opaque handles that the caller releases
//! with the matching `*_free`. Every fallible call returns an [`EqStatus`];
//! the message of the most recent failure on the calling thread is available
//! from [`eq_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use equicaps::capsnet::{forward, images_to_tensor, ModelConfig, POSE_DIM};
use equicaps::evaluation::predict_embedding;
use equicaps::geometry::{self, tait_bryan_to_rotation, RigidTransform, TaitBryanAngles};
use equicaps::tensor::{Graph, ParamStore};
use equicaps::training::{load_model_params, TrainConfig};
use equicaps::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EqStatus {
    Ok = 0,
    NullPointer = 1,
    Domain = 2,
    Shape = 3,
    InvalidArgument = 4,
    Degenerate = 5,
    NonFinite = 6,
    Config = 7,
    Format = 8,
    Io = 9,
    Panic = 10,
}

impl From<&Error> for EqStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Domain(_) => EqStatus::Domain,
            Error::Shape { .. } => EqStatus::Shape,
            Error::Invalid(_) => EqStatus::InvalidArgument,
            Error::Degenerate(_) => EqStatus::Degenerate,
            Error::NonFiniteGradient(_) | Error::NonFiniteLoss { .. } => EqStatus::NonFinite,
            Error::Config(_) => EqStatus::Config,
            Error::Format(_) => EqStatus::Format,
            Error::Io { .. } => EqStatus::Io,
        }
    }
}

/// Rigid transform in SE(3).
pub struct EqTransform(RigidTransform);

/// Frozen encoder and capsule projector.
pub struct EqModel {
    config: ModelConfig,
    params: ParamStore<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: EqStatus, msg: impl Into<String>) -> EqStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), EqStatus>) -> EqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EqStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(EqStatus::Panic, "internal panic"),
    }
}

fn check(r: equicaps::Result<()>) -> Result<(), EqStatus> {
    r.map_err(|e| fail(EqStatus::from(&e), e.to_string()))
}

fn lift<T>(r: equicaps::Result<T>) -> Result<T, EqStatus> {
    r.map_err(|e| fail(EqStatus::from(&e), e.to_string()))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), EqStatus> {
    if p.is_null() {
        Err(fail(EqStatus::NullPointer, format!("`{what}` is null")))
    } else {
        Ok(())
    }
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a Path, EqStatus> {
    non_null(p, what)?;
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(EqStatus::InvalidArgument, format!("`{what}` is not UTF-8")))?;
    Ok(Path::new(s))
}

unsafe fn put<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

fn flatten(m: &geometry::Mat4) -> impl Iterator<Item = f64> + '_ {
    m.iter().flat_map(|r| r.iter().copied())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn eq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn eq_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds `[R | t]` from Tait–Bryan angles in radians (`R = Rz·Ry·Rx`) and a
/// translation.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn eq_transform_new(
    rx: f64,
    ry: f64,
    rz: f64,
    tx: f64,
    ty: f64,
    tz: f64,
    out: *mut *mut EqTransform,
) -> EqStatus {
    guard(|| {
        non_null(out, "out")?;
        if ![tx, ty, tz].iter().all(|v| v.is_finite()) {
            return Err(fail(EqStatus::Domain, "translation must be finite"));
        }
        let r = lift(tait_bryan_to_rotation(TaitBryanAngles::new(rx, ry, rz)))?;
        put(out, EqTransform(RigidTransform::new(r, [tx, ty, tz])));
        Ok(())
    })
}

/// Releases a transform; null is ignored.
///
/// # Safety
/// `t` must be null or a handle from this library that was not yet freed.
#[no_mangle]
pub unsafe extern "C" fn eq_transform_free(t: *mut EqTransform) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// `out = a ∘ b` (apply `b` first).
///
/// # Safety
/// `a` and `b` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn eq_transform_compose(
    a: *const EqTransform,
    b: *const EqTransform,
    out: *mut *mut EqTransform,
) -> EqStatus {
    guard(|| {
        non_null(a, "a")?;
        non_null(b, "b")?;
        non_null(out, "out")?;
        put(out, EqTransform(geometry::compose(&(*a).0, &(*b).0)));
        Ok(())
    })
}

/// # Safety
/// `t` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn eq_transform_inverse(t: *const EqTransform, out: *mut *mut EqTransform) -> EqStatus {
    guard(|| {
        non_null(t, "t")?;
        non_null(out, "out")?;
        put(out, EqTransform((*t).0.inverse()));
        Ok(())
    })
}

/// `out = g2 ∘ g1⁻¹`, the transform taking view 1 to view 2.
///
/// # Safety
/// `g1` and `g2` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn eq_transform_relative(
    g1: *const EqTransform,
    g2: *const EqTransform,
    out: *mut *mut EqTransform,
) -> EqStatus {
    guard(|| {
        non_null(g1, "g1")?;
        non_null(g2, "g2")?;
        non_null(out, "out")?;
        put(out, EqTransform(geometry::relative_transform(&(*g1).0, &(*g2).0)));
        Ok(())
    })
}

/// Homogeneous 4×4 matrix, row-major, into `out[16]`.
///
/// # Safety
/// `t` must be a live handle and `out` point to 16 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn eq_transform_matrix(t: *const EqTransform, out: *mut f64) -> EqStatus {
    guard(|| {
        non_null(t, "t")?;
        non_null(out, "out")?;
        for (k, v) in flatten(&(*t).0.matrix()).enumerate() {
            *out.add(k) = v;
        }
        Ok(())
    })
}

/// Representation matrix acting on capsule poses from the right, row-major.
///
/// # Safety
/// `t` must be a live handle and `out` point to 16 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn eq_transform_representation(t: *const EqTransform, out: *mut f64) -> EqStatus {
    guard(|| {
        non_null(t, "t")?;
        non_null(out, "out")?;
        for (k, v) in flatten(&(*t).0.representation()).enumerate() {
            *out.add(k) = v;
        }
        Ok(())
    })
}

/// Unit quaternion `(w, x, y, z)` with `w ≥ 0`.
///
/// # Safety
/// `t` must be a live handle and `out` point to 4 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn eq_transform_quaternion(t: *const EqTransform, out: *mut f64) -> EqStatus {
    guard(|| {
        non_null(t, "t")?;
        non_null(out, "out")?;
        for (k, v) in (*t).0.rotation.quaternion().into_iter().enumerate() {
            *out.add(k) = v;
        }
        Ok(())
    })
}

/// Applies `t` to the poses of one embedding (`capsules × 16` values) and
/// renormalizes every capsule, writing `capsules × 16` values to `out`.
///
/// # Safety
/// `poses` and `out` must each hold `capsules * 16` doubles; `t` must be live.
#[no_mangle]
pub unsafe extern "C" fn eq_predict_poses(
    poses: *const f64,
    capsules: usize,
    t: *const EqTransform,
    out: *mut f64,
) -> EqStatus {
    guard(|| {
        non_null(poses, "poses")?;
        non_null(t, "t")?;
        non_null(out, "out")?;
        let n = capsules * POSE_DIM;
        let src = std::slice::from_raw_parts(poses, n);
        let pred = lift(predict_embedding(src, &(*t).0))?;
        ptr::copy_nonoverlapping(pred.as_ptr(), out, n);
        Ok(())
    })
}

/// Loads a checkpoint (`encoder.*` and `projector.*` tensors) with the model
/// section of a training configuration file (JSON or TOML).
///
/// # Safety
/// Paths must be NUL-terminated UTF-8; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn eq_model_load(
    checkpoint: *const c_char,
    config: *const c_char,
    out: *mut *mut EqModel,
) -> EqStatus {
    guard(|| {
        non_null(out, "out")?;
        let ckpt = path_arg(checkpoint, "checkpoint")?;
        let cfg = path_arg(config, "config")?;
        let config = lift(TrainConfig::load(cfg, None))?.model;
        check(config.validate())?;
        let params = lift(load_model_params(ckpt))?;
        put(out, EqModel { config, params });
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `m` must be null or a live handle from [`eq_model_load`].
#[no_mangle]
pub unsafe extern "C" fn eq_model_free(m: *mut EqModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Expected input resolution (images are `res × res × 3` bytes).
///
/// # Safety
/// `m` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn eq_model_resolution(m: *const EqModel) -> usize {
    if m.is_null() {
        return 0;
    }
    (*m).config.encoder.resolution
}

/// Width of the pooled representation.
///
/// # Safety
/// `m` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn eq_model_representation_dim(m: *const EqModel) -> usize {
    if m.is_null() {
        return 0;
    }
    (*m).config.encoder.representation_dim()
}

/// Number of output capsules.
///
/// # Safety
/// `m` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn eq_model_capsules(m: *const EqModel) -> usize {
    if m.is_null() {
        return 0;
    }
    (*m).config.capsules
}

/// Runs `count` interleaved RGB images through the model. Any output pointer
/// may be null to skip it; otherwise `representation` holds
/// `count × representation_dim` floats, `activations` `count × capsules` and
/// `poses` `count × capsules × 16` (raw, not normalized).
///
/// # Safety
/// `images` must hold `count × res × res × 3` bytes and every non-null output
/// must have the documented length.
#[no_mangle]
pub unsafe extern "C" fn eq_model_forward(
    m: *const EqModel,
    images: *const u8,
    count: usize,
    representation: *mut f32,
    activations: *mut f32,
    poses: *mut f32,
) -> EqStatus {
    guard(|| {
        non_null(m, "model")?;
        non_null(images, "images")?;
        if count == 0 {
            return Err(fail(EqStatus::InvalidArgument, "count must be positive"));
        }
        let model = &*m;
        let res = model.config.encoder.resolution;
        let bytes = std::slice::from_raw_parts(images, count * res * res * 3);
        let views: Vec<&[u8]> = bytes.chunks(res * res * 3).collect();
        let mut g = Graph::<f32>::new();
        let bound = model.params.bind_frozen(&mut g);
        let x = g.constant(lift(images_to_tensor(&views, res))?);
        let f = lift(forward(&mut g, &bound, &model.config, x))?;
        for (dst, var) in [
            (representation, f.encoded.representation),
            (activations, f.capsules.activations),
            (poses, f.capsules.poses),
        ] {
            if !dst.is_null() {
                let v = g.value(var).data();
                ptr::copy_nonoverlapping(v.as_ptr(), dst, v.len());
            }
        }
        Ok(())
    })
}
