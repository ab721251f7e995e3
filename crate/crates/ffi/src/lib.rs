//! C ABI over trained dggxnet checkpoints.
//!
//! Every function returns a [`DggxStatus`]; on failure a message is kept per
//! thread and can be fetched with [`dggx_last_error_message`]. Models are
//! opaque handles created by [`dggx_model_load`] and released with
//! [`dggx_model_free`]. Images are passed as `channels × size × size`
//! row-major `double` buffers with values in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dggxnet::model::{Branch, FusionModel};
use dggxnet::pipeline::checkpoint_config;
use dggxnet::train::load_checkpoint;
use dggxnet::xai::{grad_cam, integrated_gradients_raw, IgConfig};
use dggxnet::{Error, Tensor};

/// Result codes shared by every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DggxStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Parameter = 4,
    Validation = 5,
    State = 6,
    Config = 7,
    Format = 8,
    Path = 9,
    Io = 10,
    BufferTooSmall = 11,
    Panic = 12,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DggxBranch {
    A = 0,
    B = 1,
}

impl From<DggxBranch> for Branch {
    fn from(b: DggxBranch) -> Self {
        match b {
            DggxBranch::A => Branch::A,
            DggxBranch::B => Branch::B,
        }
    }
}

/// Opaque model handle.
pub struct DggxModel {
    model: FusionModel,
    ig_steps: usize,
    ig_batch: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DggxStatus {
    match e {
        Error::Shape(_) => DggxStatus::Shape,
        Error::Parameter(_) => DggxStatus::Parameter,
        Error::Validation(_) => DggxStatus::Validation,
        Error::State(_) => DggxStatus::State,
        Error::Config(_) => DggxStatus::Config,
        Error::Format(_) | Error::Load(_) => DggxStatus::Format,
        Error::Path(_) => DggxStatus::Path,
        Error::Io(_) => DggxStatus::Io,
    }
}

struct Fail(DggxStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DggxStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DggxStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DggxStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(DggxStatus::NullPointer, format!("{what} is null"))
}

unsafe fn model_ref<'a>(m: *const DggxModel) -> Result<&'a DggxModel, Fail> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn image_tensor(m: &DggxModel, pixels: *const f64, len: usize) -> Result<Tensor, Fail> {
    if pixels.is_null() {
        return Err(null("pixels"));
    }
    let (c, s) = m.model.input_spec();
    if len != c * s * s {
        return Err(Fail(
            DggxStatus::Shape,
            format!("image buffer has {len} values, model expects {c}x{s}x{s} = {}", c * s * s),
        ));
    }
    let data = std::slice::from_raw_parts(pixels, len).to_vec();
    Ok(Tensor::new(vec![c, s, s], data)?)
}

unsafe fn out_slice<'a>(out: *mut f64, len: usize, need: usize) -> Result<&'a mut [f64], Fail> {
    if out.is_null() {
        return Err(null("output buffer"));
    }
    if len < need {
        return Err(Fail(
            DggxStatus::BufferTooSmall,
            format!("output buffer holds {len} values, {need} needed"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(out, len))
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dggx_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn dggx_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by `dggxnet train`.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dggx_model_load(path: *const c_char, out: *mut *mut DggxModel) -> DggxStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(DggxStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let ck = load_checkpoint(Path::new(path))?;
        let cfg = checkpoint_config(&ck)?;
        let handle = Box::new(DggxModel { model: ck.model, ig_steps: cfg.ig_steps, ig_batch: cfg.ig_batch });
        *out = Box::into_raw(handle);
        Ok(())
    })
}

/// Releases a handle from [`dggx_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must come from [`dggx_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dggx_model_free(model: *mut DggxModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of classes, input channels and input side length.
///
/// # Safety
/// `model` must be a live handle; outputs may be null to skip them.
#[no_mangle]
pub unsafe extern "C" fn dggx_model_info(
    model: *const DggxModel,
    num_classes: *mut usize,
    channels: *mut usize,
    size: *mut usize,
) -> DggxStatus {
    guard(|| {
        let m = model_ref(model)?;
        let (c, s) = m.model.input_spec();
        for (p, v) in [(num_classes, m.model.num_classes()), (channels, c), (size, s)] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Name of class `index` as a newly allocated string; free it with
/// [`dggx_string_free`].
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dggx_model_class_name(
    model: *const DggxModel,
    index: usize,
    out: *mut *mut c_char,
) -> DggxStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let name = m.model.class_names().get(index).ok_or_else(|| {
            Fail(
                DggxStatus::Parameter,
                format!("class {index} out of range for {} classes", m.model.num_classes()),
            )
        })?;
        *out = CString::new(name.as_str())
            .map_err(|_| Fail(DggxStatus::InvalidArgument, "class name contains nul".into()))?
            .into_raw();
        Ok(())
    })
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dggx_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Class probabilities for one image. `probs` must hold `num_classes`
/// values; `predicted` (optional) receives the arg-max class.
///
/// # Safety
/// Buffers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn dggx_model_predict(
    model: *const DggxModel,
    pixels: *const f64,
    pixels_len: usize,
    probs: *mut f64,
    probs_len: usize,
    predicted: *mut usize,
) -> DggxStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = image_tensor(m, pixels, pixels_len)?;
        let out = out_slice(probs, probs_len, m.model.num_classes())?;
        let (cls, p) = m.model.predict(&x)?;
        out[..p.len()].copy_from_slice(&p);
        if !predicted.is_null() {
            *predicted = cls;
        }
        Ok(())
    })
}

/// Side lengths of the Grad-CAM map for `branch`.
///
/// # Safety
/// `model` must be a live handle; `height` and `width` writable.
#[no_mangle]
pub unsafe extern "C" fn dggx_grad_cam_shape(
    model: *const DggxModel,
    branch: DggxBranch,
    height: *mut usize,
    width: *mut usize,
) -> DggxStatus {
    guard(|| {
        let m = model_ref(model)?;
        if height.is_null() || width.is_null() {
            return Err(null("height/width"));
        }
        let bb = m
            .model
            .backbone(branch.into())
            .ok_or_else(|| Fail(DggxStatus::Parameter, format!("model has no branch {:?}", branch)))?;
        *height = bb.output_size();
        *width = bb.output_size();
        Ok(())
    })
}

/// Grad-CAM heatmap (non-negative, feature-map resolution, row-major) for
/// `class` on the final maps of `branch`.
///
/// # Safety
/// Buffers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn dggx_grad_cam(
    model: *const DggxModel,
    pixels: *const f64,
    pixels_len: usize,
    class: usize,
    branch: DggxBranch,
    out: *mut f64,
    out_len: usize,
) -> DggxStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = image_tensor(m, pixels, pixels_len)?;
        let map = grad_cam(&m.model, &x, class, branch.into())?;
        let values = map.values.pixels();
        out_slice(out, out_len, values.len())?[..values.len()].copy_from_slice(values);
        Ok(())
    })
}

/// Integrated Gradients with an all-zero baseline, per input element
/// (`channels × size × size`). `steps = 0` uses the checkpoint's setting.
///
/// # Safety
/// Buffers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn dggx_integrated_gradients(
    model: *const DggxModel,
    pixels: *const f64,
    pixels_len: usize,
    class: usize,
    steps: usize,
    out: *mut f64,
    out_len: usize,
) -> DggxStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = image_tensor(m, pixels, pixels_len)?;
        let cfg = IgConfig {
            baseline: None,
            steps: if steps == 0 { m.ig_steps } else { steps },
            batch: m.ig_batch,
        };
        let attr = integrated_gradients_raw(&m.model, &x, class, &cfg)?;
        out_slice(out, out_len, attr.numel())?[..attr.numel()].copy_from_slice(attr.data());
        Ok(())
    })
}
