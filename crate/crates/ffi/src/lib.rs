//! C ABI over a pretrained backbone and the geometry kernels.
//!
//! Every fallible call returns a [`PraeStatus`]; on failure the message is
//! available from [`prae_last_error_message`] on the same thread. Panics are
//! caught at the boundary and reported as `PRAE_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use point_rae::finetune::{backbone_features, FeatureSeeds, Topology, TopologySpec};
use point_rae::geometry::{chamfer_l2, farthest_point_sample, Point, PointCloud};
use point_rae::model::checkpoint::Checkpoint;
use point_rae::model::{BindMode, Binder, Forward, ModelState};
use point_rae::numerics::Tape;
use point_rae::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PraeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Numerics = 5,
    Panic = 6,
}

/// Opaque handle to a loaded model.
pub struct PraeModel {
    state: ModelState,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: PraeStatus, msg: impl Into<String>) -> PraeStatus {
    set_error(msg.into());
    status
}

fn status_of(e: &Error) -> PraeStatus {
    match e {
        Error::Io { .. } => PraeStatus::Io,
        Error::Checkpoint(_) => PraeStatus::Checkpoint,
        Error::Numerics(_) | Error::NonFiniteLoss { .. } => PraeStatus::Numerics,
        Error::Contract(_) | Error::Config { .. } | Error::Parse { .. } => PraeStatus::InvalidArgument,
    }
}

/// Runs `f` with panics and library errors mapped to status codes.
fn guard(f: impl FnOnce() -> Result<(), PraeStatus>) -> PraeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PraeStatus::Ok,
        Ok(Err(s)) => s,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(PraeStatus::Panic, format!("panic: {msg}"))
        }
    }
}

fn lib<T>(r: point_rae::Result<T>) -> Result<T, PraeStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), PraeStatus> {
    if p.is_null() {
        Err(fail(PraeStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// `n` points from a packed `x, y, z` array.
unsafe fn read_points(xyz: *const f64, n: usize, what: &str) -> Result<Vec<Point>, PraeStatus> {
    non_null(xyz, what)?;
    if n == 0 {
        return Err(fail(PraeStatus::InvalidArgument, format!("{what} has no points")));
    }
    let flat = std::slice::from_raw_parts(xyz, n * 3);
    Ok(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

fn topology(code: u32) -> Result<Topology, PraeStatus> {
    Topology::ALL
        .get(code as usize)
        .copied()
        .ok_or_else(|| fail(PraeStatus::InvalidArgument, format!("topology {code} is not 0..=3")))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn prae_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn prae_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint file into a new handle stored in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prae_model_load(path: *const c_char, out: *mut *mut PraeModel) -> PraeStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        *out = std::ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(PraeStatus::InvalidArgument, "path is not UTF-8"))?;
        let ckpt = lib(Checkpoint::load(Path::new(path)))?;
        *out = Box::into_raw(Box::new(PraeModel { state: ckpt.model }));
        Ok(())
    })
}

/// Releases a handle; NULL is ignored.
///
/// # Safety
/// `model` must come from [`prae_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn prae_model_free(model: *mut PraeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Token width `d` of the model.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prae_model_dim(model: *const PraeModel, out: *mut usize) -> PraeStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        *out = (*model).state.config.dim;
        Ok(())
    })
}

/// Feature width for a topology code (0 = a, 1 = b, 2 = c, 3 = d).
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prae_model_feature_dim(model: *const PraeModel, topology_code: u32, out: *mut usize) -> PraeStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        let spec = TopologySpec::new(topology(topology_code)?);
        *out = spec.feature_dim((*model).state.config.dim);
        Ok(())
    })
}

/// Pooled backbone feature of one cloud of `n_points` packed `x, y, z`
/// triples. `out_len` must equal the feature width of the topology.
/// `seed` fixes patch and query sampling.
///
/// # Safety
/// `xyz` must hold `3 * n_points` doubles and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn prae_model_features(
    model: *const PraeModel,
    xyz: *const f64,
    n_points: usize,
    topology_code: u32,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> PraeStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        let state = &(*model).state;
        let spec = TopologySpec::new(topology(topology_code)?);
        let width = spec.feature_dim(state.config.dim);
        if out_len != width {
            return Err(fail(PraeStatus::InvalidArgument, format!("out_len is {out_len}, feature width is {width}")));
        }
        let cloud = lib(PointCloud::new(read_points(xyz, n_points, "xyz")?))?;
        let mut tape = Tape::with_precision(state.config.precision);
        let mut f = Forward::new(&mut tape, Binder::new(&state.params, BindMode::Constant), &state.layout, &state.config);
        let feats = lib(backbone_features(&mut f, &cloud, &spec, FeatureSeeds::new(seed, 0)))?;
        std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(tape.value(feats).data());
        Ok(())
    })
}

/// Symmetric l2 Chamfer distance between two packed point sets.
///
/// # Safety
/// `a` and `b` must hold `3 * n_a` and `3 * n_b` doubles.
#[no_mangle]
pub unsafe extern "C" fn prae_chamfer_l2(a: *const f64, n_a: usize, b: *const f64, n_b: usize, out: *mut f64) -> PraeStatus {
    guard(|| {
        non_null(out, "out")?;
        let pa = lib(PointCloud::new(read_points(a, n_a, "a")?))?;
        let pb = lib(PointCloud::new(read_points(b, n_b, "b")?))?;
        *out = lib(chamfer_l2(pa.points(), pb.points()))?;
        Ok(())
    })
}

/// Farthest point sampling of `count` indices into `out_indices`.
///
/// # Safety
/// `xyz` must hold `3 * n_points` doubles and `out_indices` `count` slots.
#[no_mangle]
pub unsafe extern "C" fn prae_farthest_point_sample(
    xyz: *const f64,
    n_points: usize,
    count: usize,
    seed: u64,
    out_indices: *mut usize,
) -> PraeStatus {
    guard(|| {
        non_null(out_indices, "out_indices")?;
        let cloud = lib(PointCloud::new(read_points(xyz, n_points, "xyz")?))?;
        let idx = lib(farthest_point_sample(&cloud, count, seed))?;
        std::slice::from_raw_parts_mut(out_indices, count).copy_from_slice(&idx);
        Ok(())
    })
}
