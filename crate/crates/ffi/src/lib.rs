//! C interface to the attnmod engine.
//!
//! Every function returns an [`AttnmodStatus`]. On failure a message is
//! available from [`attnmod_last_error`] on the same thread until the next
//! call. Models are opaque handles released with [`attnmod_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use attnmod::diffusion::{denoise, DenoiseRequest};
use attnmod::trainer::Checkpoint;
use attnmod::unet::{list_attention_blocks, BlockAddress, UNet, UNetConfig};
use attnmod::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnmodStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    UnknownBlock = 3,
    Io = 4,
    Checkpoint = 5,
    Numeric = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// A loaded network.
pub struct AttnmodModel {
    net: UNet,
    blocks: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let clean = message.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).expect("no interior nul"));
}

fn status_of(e: &Error) -> AttnmodStatus {
    match e {
        Error::UnknownBlock(_) | Error::MalformedBlockCode(_) => AttnmodStatus::UnknownBlock,
        Error::Io { .. } => AttnmodStatus::Io,
        Error::BadMagic
        | Error::VersionMismatch(_)
        | Error::Truncated(_)
        | Error::DuplicateTensor(_)
        | Error::MissingTensor(_)
        | Error::Checkpoint(_) => AttnmodStatus::Checkpoint,
        Error::NonFinite(_) | Error::Shape(_) | Error::Divergence { .. } => AttnmodStatus::Numeric,
        Error::Config(_) | Error::InvalidArgument(_) | Error::UnknownToken(_) | Error::Json(_) => {
            AttnmodStatus::InvalidArgument
        }
    }
}

struct Failure(AttnmodStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(AttnmodStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AttnmodStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            AttnmodStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(&message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            AttnmodStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(AttnmodStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn wrap(net: UNet) -> Box<AttnmodModel> {
    let blocks = list_attention_blocks(net.config())
        .iter()
        .map(|b| CString::new(b.code()).expect("block codes are ASCII"))
        .collect();
    Box::new(AttnmodModel { net, blocks })
}

/// Message for the last failed call on this thread; empty after success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn attnmod_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn attnmod_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn attnmod_model_load(path: *const c_char, out: *mut *mut AttnmodModel) -> AttnmodStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let net = Checkpoint::load(path)?.to_model()?;
        *out = Box::into_raw(wrap(net));
        Ok(())
    })
}

/// Builds an untrained network with the default configuration.
///
/// # Safety
/// `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn attnmod_model_init(seed: u64, out: *mut *mut AttnmodModel) -> AttnmodStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        *out = Box::into_raw(wrap(UNet::init(&UNetConfig::default(), seed)?));
        Ok(())
    })
}

/// Releases a model. Null is accepted.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn attnmod_model_free(model: *mut AttnmodModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of `f32` values in one generated image (`3·H·W`).
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn attnmod_model_image_len(model: *const AttnmodModel, out: *mut usize) -> AttnmodStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.net.config().image_shape().iter().product();
        Ok(())
    })
}

/// Number of addressable attention blocks.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn attnmod_model_block_count(model: *const AttnmodModel, out: *mut usize) -> AttnmodStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.blocks.len();
        Ok(())
    })
}

/// Short code of block `index`, e.g. `U1A1A2`. The pointer lives as long as
/// the model.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn attnmod_model_block_code(
    model: *const AttnmodModel,
    index: usize,
    out: *mut *const c_char,
) -> AttnmodStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let code = m.blocks.get(index).ok_or_else(|| {
            Failure(AttnmodStatus::InvalidArgument, format!("block index {index} out of range"))
        })?;
        *out = code.as_ptr();
        Ok(())
    })
}

/// Runs one generation described by a JSON request, for example
/// `{"seed": 0, "prompt": [0, 6, 11, 13], "attnmod": [{"block": "U1A1A2",
/// "start": -20.0, "rate": {"constant": 1.0}}]}`, and writes the `[3×H×W]`
/// image in `[−1, 1]` to `image`.
///
/// # Safety
/// `model` must be a live handle, `request_json` NUL-terminated and `image`
/// valid for `image_len` floats.
#[no_mangle]
pub unsafe extern "C" fn attnmod_denoise(
    model: *const AttnmodModel,
    request_json: *const c_char,
    image: *mut f32,
    image_len: usize,
) -> AttnmodStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let json = str_arg(request_json, "request_json")?;
        if image.is_null() {
            return Err(null("image"));
        }
        let request: DenoiseRequest = serde_json::from_str(json).map_err(Error::from)?;
        if let Some(setup) = &request.attnmod {
            for (block, _) in setup.iter() {
                BlockAddress::parse(&block.code(), m.net.config())?;
            }
        }
        let needed: usize = m.net.config().image_shape().iter().product();
        if image_len < needed {
            return Err(Failure(AttnmodStatus::BufferTooSmall, format!("image buffer needs {needed} floats")));
        }
        let out = denoise(&m.net, &request)?;
        std::slice::from_raw_parts_mut(image, needed).copy_from_slice(out.image.data());
        Ok(())
    })
}
