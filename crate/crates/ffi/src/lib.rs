//! C interface over lens projection, polar tokenization, k-NN projection and
//! checkpointed depth inference.
//!
//! Every fallible call returns a [`DsStatus`]. On failure the message is kept
//! per thread and can be copied out with [`ds_last_error`]. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use darswin::imageio::Raster;
use darswin::lens::LensModel;
use darswin::model::{DarSwinUnet, Geometry};
use darswin::polar_grid::{GridSpec, KnnIndex, PolarGrid};
use darswin::sampling::RadialProfile;
use darswin::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsStatus {
    Ok = 0,
    NullPointer = 1,
    Domain = 2,
    InvalidDimension = 3,
    ShapeMismatch = 4,
    InsufficientSamples = 5,
    InvalidValue = 6,
    Io = 7,
    Format = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsProfile {
    G = 0,
    Theta = 1,
    Tan = 2,
}

pub struct DsLens(LensModel);

pub struct DsGrid(PolarGrid);

pub struct DsKnn(KnnIndex);

pub struct DsModel(DarSwinUnet);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> DsStatus {
    match err {
        Error::Domain(_) | Error::NoSolution(_) => DsStatus::Domain,
        Error::InvalidDimension(_) => DsStatus::InvalidDimension,
        Error::ShapeMismatch(_) => DsStatus::ShapeMismatch,
        Error::InsufficientSamples { .. } => DsStatus::InsufficientSamples,
        Error::Empty(_) | Error::InvalidValue(_) => DsStatus::InvalidValue,
        Error::Io(_) => DsStatus::Io,
        Error::Format(_) | Error::Checkpoint(_) | Error::Json(_) | Error::Image(_) => DsStatus::Format,
    }
}

struct Fail(DsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(DsStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            DsStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DsStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn input<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, needed: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    if len < needed {
        return Err(Fail(
            DsStatus::BufferTooSmall,
            format!("{what} holds {len} values, {needed} needed"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(p, needed))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn release<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Copies the last error message of this thread, NUL terminated and
/// truncated to `cap` bytes. Returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ds_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Unified lens with distortion `xi` in [0, 1] and field of view in degrees.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ds_lens_new(xi: f64, fov_deg: f64, out: *mut *mut DsLens) -> DsStatus {
    guard(|| store(out, DsLens(LensModel::from_degrees(xi, fov_deg)?)))
}

/// # Safety
/// `lens` must come from [`ds_lens_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ds_lens_free(lens: *mut DsLens) {
    release(lens);
}

/// Normalized image radius of incidence angle `theta` (radians).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ds_lens_project(lens: *const DsLens, theta: f64, radius: *mut f64) -> DsStatus {
    guard(|| {
        let lens = deref(lens, "lens")?;
        let r = lens.0.project(theta)?;
        *output(radius, 1, 1, "radius")?.first_mut().unwrap() = r;
        Ok(())
    })
}

/// Incidence angle of normalized radius `radius`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ds_lens_unproject(lens: *const DsLens, radius: f64, theta: *mut f64) -> DsStatus {
    guard(|| {
        let lens = deref(lens, "lens")?;
        let t = lens.0.unproject(radius)?;
        *output(theta, 1, 1, "theta")?.first_mut().unwrap() = t;
        Ok(())
    })
}

/// Polar grid of `n_r x n_phi` patches with `s_r x s_phi` samples each over a
/// `height x width` image.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn ds_grid_new(
    lens: *const DsLens,
    profile: DsProfile,
    n_r: usize,
    n_phi: usize,
    s_r: usize,
    s_phi: usize,
    height: usize,
    width: usize,
    out: *mut *mut DsGrid,
) -> DsStatus {
    guard(|| {
        let lens = deref(lens, "lens")?.0;
        let name = match profile {
            DsProfile::G => "g",
            DsProfile::Theta => "theta",
            DsProfile::Tan => "tan",
        };
        let spec = GridSpec {
            n_r,
            n_phi,
            s_r,
            s_phi,
            height,
            width,
        };
        let grid = PolarGrid::build(lens, RadialProfile::parse(name, lens.fov())?, spec)?;
        store(out, DsGrid(grid))
    })
}

/// # Safety
/// `grid` must come from [`ds_grid_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ds_grid_free(grid: *mut DsGrid) {
    release(grid);
}

/// Number of sample points, or 0 for a null handle.
///
/// # Safety
/// `grid` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn ds_grid_sample_count(grid: *const DsGrid) -> usize {
    grid.as_ref().map_or(0, |g| g.0.points.len())
}

/// Writes interleaved `x, y` pixel coordinates of every sample.
///
/// # Safety
/// `xy` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ds_grid_points(grid: *const DsGrid, xy: *mut f64, len: usize) -> DsStatus {
    guard(|| {
        let g = &deref(grid, "grid")?.0;
        let out = output(xy, len, 2 * g.points.len(), "xy")?;
        for (o, &(x, y)) in out.chunks_mut(2).zip(&g.points) {
            o[0] = x;
            o[1] = y;
        }
        Ok(())
    })
}

/// Bilinearly samples a row-major `height x width x channels` image.
/// `out` receives `sample_count * channels` values.
///
/// # Safety
/// `image` must hold `height * width * channels` doubles and `out` `out_len`.
#[no_mangle]
pub unsafe extern "C" fn ds_grid_sample(
    grid: *const DsGrid,
    image: *const f64,
    channels: usize,
    out: *mut f64,
    out_len: usize,
) -> DsStatus {
    guard(|| {
        let g = &deref(grid, "grid")?.0;
        let (h, w) = (g.spec.height, g.spec.width);
        if channels == 0 {
            return Err(Fail(DsStatus::InvalidDimension, "channels must be >= 1".into()));
        }
        let data = input(image, h * w * channels, "image")?;
        let raster = Raster {
            height: h,
            width: w,
            channels,
            data: data.to_vec(),
        };
        let samples = g.sample(&raster)?;
        output(out, out_len, samples.len(), "out")?.copy_from_slice(&samples);
        Ok(())
    })
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ds_knn_new(grid: *const DsGrid, k: usize, out: *mut *mut DsKnn) -> DsStatus {
    guard(|| {
        let g = &deref(grid, "grid")?.0;
        store(out, DsKnn(KnnIndex::build(g, k)?))
    })
}

/// # Safety
/// `knn` must come from [`ds_knn_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ds_knn_free(knn: *mut DsKnn) {
    release(knn);
}

/// Averages `k` neighbor features into each valid pixel. `features` holds
/// `sample_count * dim` values; `out` receives `height * width * dim`.
///
/// # Safety
/// Buffers must hold the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn ds_knn_project(
    knn: *const DsKnn,
    features: *const f64,
    features_len: usize,
    dim: usize,
    out: *mut f64,
    out_len: usize,
) -> DsStatus {
    guard(|| {
        let k = &deref(knn, "knn")?.0;
        let f = input(features, features_len, "features")?;
        let raster = k.project(f, dim)?;
        output(out, out_len, raster.data.len(), "out")?.copy_from_slice(&raster.data);
        Ok(())
    })
}

/// Loads a model checkpoint from a UTF-8 path.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn ds_model_load(path: *const c_char, out: *mut *mut DsModel) -> DsStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(DsStatus::InvalidValue, "path is not UTF-8".into()))?;
        store(out, DsModel(DarSwinUnet::load(Path::new(p))?))
    })
}

/// # Safety
/// `model` must come from [`ds_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ds_model_free(model: *mut DsModel) {
    release(model);
}

/// Side length of the square images the model expects, or 0 for null.
///
/// # Safety
/// `model` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn ds_model_image_size(model: *const DsModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config.image_size)
}

/// Predicts log-depth for a `size x size x 3` RGB image in [0, 1] taken
/// through `lens`. `mask` receives 1 where the prediction is defined.
///
/// # Safety
/// `rgb` must hold `3 * size * size` doubles; `log_depth` and `mask` `len`
/// entries each.
#[no_mangle]
pub unsafe extern "C" fn ds_model_predict(
    model: *const DsModel,
    lens: *const DsLens,
    rgb: *const f64,
    log_depth: *mut f64,
    mask: *mut u8,
    len: usize,
) -> DsStatus {
    guard(|| {
        let m = &deref(model, "model")?.0;
        let lens = &deref(lens, "lens")?.0;
        let size = m.config.image_size;
        let pixels = size * size;
        let data = input(rgb, 3 * pixels, "rgb")?;
        let depth_out = output(log_depth, len, pixels, "log_depth")?;
        let mask_out = output(mask, len, pixels, "mask")?;
        let geom = Geometry::new(&m.config, lens)?;
        let image = Raster {
            height: size,
            width: size,
            channels: 3,
            data: data.to_vec(),
        };
        let (pred, valid) = m.predict(&geom, &image)?;
        depth_out.copy_from_slice(&pred.data);
        for (o, v) in mask_out.iter_mut().zip(valid) {
            *o = v as u8;
        }
        Ok(())
    })
}
