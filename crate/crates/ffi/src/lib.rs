//! C ABI over the gadolab library.
//!
//! Every fallible function returns a [`GadoStatus`]. On failure the message
//! is kept per thread and read with [`gado_last_error`]. Objects cross the
//! boundary as opaque handles that the caller frees with the matching
//! `*_free` function. Panics are caught and reported as
//! [`GadoStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use gadolab::config::RunConfig;
use gadolab::metrics::{self, SegmentationSource, SsimParams};
use gadolab::nets::Role;
use gadolab::phantom::{self, PhantomRecipe, PhantomVolume};
use gadolab::{pipeline, Error, Mask, Modality};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GadoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Numeric = 4,
    Integration = 5,
    Io = 6,
    Format = 7,
    Panic = 8,
}

/// Which array of a phantom volume to copy out.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GadoVolumeField {
    Pre = 0,
    Post = 1,
    /// Region of interest as 0/1 values.
    Roi = 2,
    /// Enhancing voxels as 0/1 values.
    Enhancing = 3,
}

/// A validated run configuration.
pub struct GadoConfig(RunConfig);

/// A generated pre/post phantom volume, stored `[H, W, D]` row-major.
pub struct GadoVolume(PhantomVolume);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(GadoStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape { .. } => GadoStatus::Shape,
            Error::InvalidArgument(_) | Error::Json(_) => GadoStatus::InvalidArgument,
            Error::Numeric(_) => GadoStatus::Numeric,
            Error::Integration { .. } => GadoStatus::Integration,
            Error::Format(_) => GadoStatus::Format,
            Error::Io(_) => GadoStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(GadoStatus::NullPointer, format!("{what} is null"))
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GadoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GadoStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p.downcast_ref::<&str>().map(|s| s.to_string()).or_else(|| p.downcast_ref::<String>().cloned());
            set_error(format!("panic: {}", msg.unwrap_or_else(|| "unknown".into())));
            GadoStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(GadoStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn optional<T: std::str::FromStr<Err = Error>>(p: *const c_char, what: &str) -> Result<Option<T>, Failure> {
    if p.is_null() {
        return Ok(None);
    }
    Ok(Some(text(p, what)?.parse()?))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn config<'a>(p: *const GadoConfig) -> Result<&'a RunConfig, Failure> {
    p.as_ref().map(|c| &c.0).ok_or_else(|| null("config"))
}

fn mask(shape: &[usize], bytes: &[u8]) -> Result<Mask, Failure> {
    Ok(Mask::new(shape, bytes.iter().map(|&b| b != 0).collect())?)
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn gado_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gado_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Frees a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn gado_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Default configuration.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gado_config_new(out: *mut *mut GadoConfig) -> GadoStatus {
    guard(|| {
        *self::out(out, "out")? = Box::into_raw(Box::new(GadoConfig(RunConfig::default())));
        Ok(())
    })
}

/// Parses a JSON configuration; omitted keys take their defaults.
///
/// # Safety
/// `json` must be NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gado_config_from_json(json: *const c_char, out: *mut *mut GadoConfig) -> GadoStatus {
    guard(|| {
        let cfg = RunConfig::from_json_with(text(json, "json")?, &[])?;
        *self::out(out, "out")? = Box::into_raw(Box::new(GadoConfig(cfg)));
        Ok(())
    })
}

/// Applies one `key.path=value` override. The handle is unchanged on failure.
///
/// # Safety
/// `cfg` must be a live handle and `assignment` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gado_config_set(cfg: *mut GadoConfig, assignment: *const c_char) -> GadoStatus {
    guard(|| {
        let c = cfg.as_mut().ok_or_else(|| null("config"))?;
        c.0 = c.0.with_overrides(&[text(assignment, "assignment")?.to_string()])?;
        Ok(())
    })
}

/// Serializes the configuration; free the result with [`gado_string_free`].
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gado_config_to_json(cfg: *const GadoConfig, out: *mut *mut c_char) -> GadoStatus {
    guard(|| {
        let json = config(cfg)?.to_json()?;
        *self::out(out, "out")? = CString::new(json).map_err(|e| Failure(GadoStatus::Format, e.to_string()))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `cfg` must be NULL or a live handle, and not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gado_config_free(cfg: *mut GadoConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

fn argv(parts: &[&str]) -> Vec<String> {
    std::iter::once("gadolab-ffi").chain(parts.iter().copied()).map(String::from).collect()
}

/// Generates the run's datasets.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gado_run_gen(cfg: *const GadoConfig) -> GadoStatus {
    guard(|| {
        let c = config(cfg)?;
        pipeline::timed(c, &argv(&["gen"]), "gen", || pipeline::gen(c))?;
        Ok(())
    })
}

unsafe fn per_target(
    cfg: *const GadoConfig,
    model: *const c_char,
    modality: *const c_char,
    command: &str,
    run: fn(&RunConfig, Role, Modality) -> gadolab::Result<()>,
) -> GadoStatus {
    guard(|| {
        let c = config(cfg)?;
        let role: Option<Role> = optional(model, "model")?;
        let m: Option<Modality> = optional(modality, "modality")?;
        let roles = role.map_or_else(|| c.models.clone(), |r| vec![r]);
        let mods = m.map_or_else(|| c.modalities.clone(), |m| vec![m]);
        let mut args = vec![command.to_string()];
        if let Some(r) = role {
            args.extend(["--model".into(), r.name().into()]);
        }
        if let Some(m) = m {
            args.extend(["--modality".into(), m.name().into()]);
        }
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        pipeline::timed(c, &argv(&refs), command, || {
            for &r in &roles {
                for &m in &mods {
                    run(c, r, m)?;
                }
            }
            Ok(())
        })?;
        Ok(())
    })
}

/// Trains `model` ("e2e", "dm", "fm") on `modality` ("t1", "t1w"). NULL
/// selects every configured model or modality.
///
/// # Safety
/// `cfg` must be a live handle; the strings NULL or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gado_run_train(cfg: *const GadoConfig, model: *const c_char, modality: *const c_char) -> GadoStatus {
    per_target(cfg, model, modality, "train", |c, r, m| pipeline::train(c, r, m, |_| {}).map(|_| ()))
}

/// Writes test-slice predictions or posterior samples. NULL arguments as
/// for [`gado_run_train`].
///
/// # Safety
/// `cfg` must be a live handle; the strings NULL or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gado_run_sample(cfg: *const GadoConfig, model: *const c_char, modality: *const c_char) -> GadoStatus {
    per_target(cfg, model, modality, "sample", pipeline::sample)
}

/// Writes `reports/metrics.csv`.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gado_run_eval(cfg: *const GadoConfig) -> GadoStatus {
    guard(|| {
        let c = config(cfg)?;
        pipeline::timed(c, &argv(&["eval"]), "eval", || pipeline::eval(c))?;
        Ok(())
    })
}

/// Writes `reports/sweep.csv` and the sweep plots.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gado_run_sweep(cfg: *const GadoConfig) -> GadoStatus {
    guard(|| {
        let c = config(cfg)?;
        pipeline::timed(c, &argv(&["sweep"]), "sweep", || pipeline::sweep(c))?;
        Ok(())
    })
}

/// Generates one phantom from a JSON recipe (NULL for the default recipe).
///
/// # Safety
/// `recipe_json` must be NULL or NUL-terminated; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gado_phantom_generate(recipe_json: *const c_char, out: *mut *mut GadoVolume) -> GadoStatus {
    guard(|| {
        let recipe: PhantomRecipe = if recipe_json.is_null() {
            PhantomRecipe::default()
        } else {
            serde_json::from_str(text(recipe_json, "recipe")?).map_err(Error::from)?
        };
        let vol = phantom::generate(&recipe)?;
        *self::out(out, "out")? = Box::into_raw(Box::new(GadoVolume(vol)));
        Ok(())
    })
}

/// # Safety
/// `vol` must be a live handle; the outputs valid pointers.
#[no_mangle]
pub unsafe extern "C" fn gado_volume_dims(vol: *const GadoVolume, height: *mut usize, width: *mut usize, depth: *mut usize) -> GadoStatus {
    guard(|| {
        let v = vol.as_ref().ok_or_else(|| null("volume"))?;
        let (h, w, d) = v.0.dims();
        *out(height, "height")? = h;
        *out(width, "width")? = w;
        *out(depth, "depth")? = d;
        Ok(())
    })
}

/// Copies one field into `buf`, which must hold exactly `H * W * D` values.
///
/// # Safety
/// `vol` must be a live handle and `buf` writable for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn gado_volume_copy(vol: *const GadoVolume, field: GadoVolumeField, buf: *mut f32, len: usize) -> GadoStatus {
    guard(|| {
        let v = &vol.as_ref().ok_or_else(|| null("volume"))?.0;
        let data: Vec<f32> = match field {
            GadoVolumeField::Pre => v.pre.data().to_vec(),
            GadoVolumeField::Post => v.post.data().to_vec(),
            GadoVolumeField::Roi => v.roi.to_tensor().into_data(),
            GadoVolumeField::Enhancing => v.enhancing.to_tensor().into_data(),
        };
        if len != data.len() {
            return Err(Failure(GadoStatus::Shape, format!("buffer holds {len} values, volume has {}", data.len())));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        std::slice::from_raw_parts_mut(buf, len).copy_from_slice(&data);
        Ok(())
    })
}

/// # Safety
/// `vol` must be NULL or a live handle, and not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gado_volume_free(vol: *mut GadoVolume) {
    if !vol.is_null() {
        drop(Box::from_raw(vol));
    }
}

/// Dice and Jaccard of two masks of `len` bytes (nonzero = set).
///
/// # Safety
/// `pred` and `gt` must be readable for `len` bytes; outputs valid pointers.
#[no_mangle]
pub unsafe extern "C" fn gado_dice_jaccard(pred: *const u8, gt: *const u8, len: usize, dice: *mut f64, jaccard: *mut f64) -> GadoStatus {
    guard(|| {
        let a = mask(&[len], slice(pred, len, "pred")?)?;
        let b = mask(&[len], slice(gt, len, "gt")?)?;
        let (d, j) = metrics::dice_jaccard(&a, &b)?;
        *out(dice, "dice")? = d;
        *out(jaccard, "jaccard")? = j;
        Ok(())
    })
}

/// Marks in `mask_out` the `round(p / 100 * |ROI|)` ROI voxels with the
/// largest `|field|`, ties in index order.
///
/// # Safety
/// `field` readable for `len` floats, `roi` for `len` bytes, `mask_out`
/// writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn gado_threshold_segment(field: *const f32, roi: *const u8, len: usize, percent: f64, mask_out: *mut u8) -> GadoStatus {
    guard(|| {
        let r = mask(&[len], slice(roi, len, "roi")?)?;
        let s = metrics::threshold_segment(slice(field, len, "field")?, &r, percent, SegmentationSource::GroundTruth)?;
        if mask_out.is_null() {
            return Err(null("mask_out"));
        }
        let dst = std::slice::from_raw_parts_mut(mask_out, len);
        for (d, &m) in dst.iter_mut().zip(s.mask.data()) {
            *d = u8::from(m);
        }
        Ok(())
    })
}

/// Pearson correlation and two-sided p-value of two `len`-value arrays.
///
/// # Safety
/// `u` and `v` readable for `len` floats; outputs valid pointers.
#[no_mangle]
pub unsafe extern "C" fn gado_pearson(u: *const f32, v: *const f32, len: usize, r: *mut f64, p_value: *mut f64) -> GadoStatus {
    guard(|| {
        let c = metrics::pearson(slice(u, len, "u")?, slice(v, len, "v")?, None)?;
        *out(r, "r")? = c.r;
        *out(p_value, "p_value")? = c.p_value;
        Ok(())
    })
}

/// Mean SSIM of two row-major `height x width` images with dynamic range `range`.
///
/// # Safety
/// `a` and `b` readable for `height * width` floats; `result` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gado_ssim(a: *const f32, b: *const f32, height: usize, width: usize, range: f64, result: *mut f64) -> GadoStatus {
    guard(|| {
        let n = height.checked_mul(width).ok_or_else(|| Failure(GadoStatus::InvalidArgument, "image size overflows".into()))?;
        *out(result, "result")? = metrics::ssim(slice(a, n, "a")?, slice(b, n, "b")?, height, width, &SsimParams::with_range(range))?;
        Ok(())
    })
}
