//! C ABI for the emint pipeline.
//!
//! The surface is deliberately small: load a trained checkpoint into an
//! opaque handle, query its dimensions, and run single-sample inference
//! from raw embedding buffers. Status codes mirror the CLI exit codes
//! (0 ok, 2 configuration, 3 data format, 4 dimension/checkpoint); the
//! thread-local message from [`emint_last_error`] carries the detail.
//!
//! The generated header lands in `include/emint.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use emint::checkpoint::{load_checkpoint, CheckpointMeta};
use emint::dataio::{mean_pool_time, LoadedSample, Split};
use emint::model::JointModel;
use emint::Error;
use ndarray::Array2;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmintStatus {
    Ok = 0,
    /// Unexpected internal failure (panic caught at the boundary).
    Internal = 1,
    /// Bad arguments or configuration (null pointers, invalid values).
    Config = 2,
    /// Malformed data.
    Data = 3,
    /// Dimension or checkpoint mismatch.
    Dims = 4,
}

fn status_of(err: &Error) -> EmintStatus {
    match err.exit_code() {
        2 => EmintStatus::Config,
        3 => EmintStatus::Data,
        4 => EmintStatus::Dims,
        _ => EmintStatus::Internal,
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap();
    });
}

/// A loaded model plus its checkpoint metadata.
pub struct EmintModel {
    model: JointModel,
    meta: CheckpointMeta,
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn emint_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next failing call on the same thread; do not
/// free it.
#[no_mangle]
pub extern "C" fn emint_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Loads a checkpoint directory (as written by the `train`/`finetune`
/// commands) into a freshly allocated handle.
///
/// # Safety
/// `checkpoint_dir` must be a valid NUL-terminated UTF-8 path and `out`
/// a valid pointer; on success `*out` owns the handle and must be
/// released with [`emint_model_free`].
#[no_mangle]
pub unsafe extern "C" fn emint_model_load(
    checkpoint_dir: *const c_char,
    out: *mut *mut EmintModel,
) -> EmintStatus {
    if checkpoint_dir.is_null() || out.is_null() {
        set_error("null pointer argument");
        return EmintStatus::Config;
    }
    let path = match CStr::from_ptr(checkpoint_dir).to_str() {
        Ok(s) => s,
        Err(_) => {
            set_error("checkpoint path is not valid UTF-8");
            return EmintStatus::Config;
        }
    };
    let result = catch_unwind(|| load_checkpoint(Path::new(path)));
    match result {
        Ok(Ok((model, meta))) => {
            *out = Box::into_raw(Box::new(EmintModel { model, meta }));
            EmintStatus::Ok
        }
        Ok(Err(err)) => {
            set_error(&err.to_string());
            status_of(&err)
        }
        Err(_) => {
            set_error("internal panic while loading the checkpoint");
            EmintStatus::Internal
        }
    }
}

/// Releases a handle returned by [`emint_model_load`]. Null is a no-op.
///
/// # Safety
/// `model` must have been returned by [`emint_model_load`] and not freed
/// already.
#[no_mangle]
pub unsafe extern "C" fn emint_model_free(model: *mut EmintModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Reports the hidden size and the class count of each task.
///
/// # Safety
/// All pointers must be valid; `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn emint_model_dims(
    model: *const EmintModel,
    hidden: *mut u32,
    emotion_classes: *mut u32,
    intent_classes: *mut u32,
) -> EmintStatus {
    if model.is_null() || hidden.is_null() || emotion_classes.is_null() || intent_classes.is_null()
    {
        set_error("null pointer argument");
        return EmintStatus::Config;
    }
    let dims = &(*model).model.dims;
    *hidden = dims.hidden as u32;
    *emotion_classes = dims.emotion_classes as u32;
    *intent_classes = dims.intent_classes as u32;
    EmintStatus::Ok
}

/// Reports the expected embedding width of each modality.
///
/// # Safety
/// All pointers must be valid; `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn emint_model_input_dims(
    model: *const EmintModel,
    visual: *mut u32,
    audio: *mut u32,
    text: *mut u32,
) -> EmintStatus {
    if model.is_null() || visual.is_null() || audio.is_null() || text.is_null() {
        set_error("null pointer argument");
        return EmintStatus::Config;
    }
    let dims = &(*model).model.dims.input_dims;
    *visual = dims.visual as u32;
    *audio = dims.audio as u32;
    *text = dims.text as u32;
    EmintStatus::Ok
}

unsafe fn buffer_to_matrix(
    name: &str,
    data: *const f32,
    steps: u32,
    dim: u32,
) -> Result<Array2<f64>, EmintStatus> {
    if data.is_null() {
        set_error(&format!("{name} buffer is null"));
        return Err(EmintStatus::Config);
    }
    if steps == 0 || dim == 0 {
        set_error(&format!("{name} shape {steps}x{dim} is degenerate"));
        return Err(EmintStatus::Config);
    }
    let len = steps as usize * dim as usize;
    let slice = std::slice::from_raw_parts(data, len);
    if slice.iter().any(|v| !v.is_finite()) {
        set_error(&format!("{name} buffer contains non-finite values"));
        return Err(EmintStatus::Data);
    }
    Ok(Array2::from_shape_fn(
        (steps as usize, dim as usize),
        |(t, j)| slice[t * dim as usize + j] as f64,
    ))
}

/// Runs evaluation-mode inference on one sample given as three row-major
/// f32 embedding matrices, writing softmax probabilities for both tasks.
/// Inputs are mean-pooled over time first when the checkpoint was trained
/// with averaged inputs.
///
/// # Safety
/// `model` must be a live handle; each data pointer must reference
/// `steps * dim` readable floats; `emotion_probs` and `intent_probs` must
/// have room for the class counts reported by [`emint_model_dims`].
#[no_mangle]
pub unsafe extern "C" fn emint_predict(
    model: *const EmintModel,
    visual: *const f32,
    visual_steps: u32,
    visual_dim: u32,
    audio: *const f32,
    audio_steps: u32,
    audio_dim: u32,
    text: *const f32,
    text_steps: u32,
    text_dim: u32,
    emotion_probs: *mut f64,
    intent_probs: *mut f64,
) -> EmintStatus {
    if model.is_null() || emotion_probs.is_null() || intent_probs.is_null() {
        set_error("null pointer argument");
        return EmintStatus::Config;
    }
    let handle = &*model;
    let visual = match buffer_to_matrix("visual", visual, visual_steps, visual_dim) {
        Ok(m) => m,
        Err(status) => return status,
    };
    let audio = match buffer_to_matrix("audio", audio, audio_steps, audio_dim) {
        Ok(m) => m,
        Err(status) => return status,
    };
    let text = match buffer_to_matrix("text", text, text_steps, text_dim) {
        Ok(m) => m,
        Err(status) => return status,
    };

    let result = catch_unwind(AssertUnwindSafe(|| -> emint::Result<(Vec<f64>, Vec<f64>)> {
        let pool = |m: Array2<f64>| -> emint::Result<Array2<f64>> {
            if handle.meta.config.average_inputs {
                mean_pool_time(&m)
            } else {
                Ok(m)
            }
        };
        let sample = LoadedSample {
            id: String::new(),
            split: Split::Test,
            emotion_label: None,
            intent_label: None,
            is_pseudo: false,
            visual: pool(visual)?,
            audio: pool(audio)?,
            text: pool(text)?,
        };
        handle.model.predict(&sample)
    }));
    match result {
        Ok(Ok((emotion, intent))) => {
            ptr::copy_nonoverlapping(emotion.as_ptr(), emotion_probs, emotion.len());
            ptr::copy_nonoverlapping(intent.as_ptr(), intent_probs, intent.len());
            EmintStatus::Ok
        }
        Ok(Err(err)) => {
            set_error(&err.to_string());
            status_of(&err)
        }
        Err(_) => {
            set_error("internal panic during inference");
            EmintStatus::Internal
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_is_a_valid_c_string() {
        let v = unsafe { CStr::from_ptr(emint_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn null_arguments_are_rejected_not_crashed() {
        unsafe {
            let status = emint_model_load(ptr::null(), ptr::null_mut());
            assert_eq!(status, EmintStatus::Config);
            let msg = CStr::from_ptr(emint_last_error()).to_str().unwrap();
            assert!(msg.contains("null"));
            emint_model_free(ptr::null_mut());
        }
    }
}
