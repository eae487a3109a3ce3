//! C interface to the simulator's inference surface: load model checkpoints
//! and adapter snapshots produced by the `fedpt` binary, combine them into a
//! proxy ensemble, generate text, and score it.
//!
//! Conventions shared by every function:
//!
//! - Handles are opaque pointers owned by the caller. Each `fedpt_*_free`
//!   releases exactly one handle and accepts NULL as a no-op. Handles are
//!   immutable after creation, so one handle may be shared across threads.
//! - Functions that can fail return a [`FedptStatus`]; anything but
//!   `Ok` leaves a message retrievable with [`fedpt_last_error`]. The
//!   message lives in thread-local storage and is overwritten by the next
//!   failure on the same thread.
//! - Text output goes into a caller-supplied buffer and is always
//!   NUL-terminated UTF-8. `*out_len` receives the text length in bytes,
//!   excluding the terminator; when the buffer is too small the function
//!   writes nothing, stores the required length, and returns
//!   `BufferTooSmall`, so a `cap` of `*out_len + 1` always succeeds.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;
use std::sync::Arc;

use fedpt::adapter::{AdaptedModel, LoraAdapter};
use fedpt::data::{wrap_prompt, ByteTokenizer, Example};
use fedpt::error::Error;
use fedpt::eval::rouge_l;
use fedpt::model::{greedy_decode, load_model, LogitSource, ModelParams, Token};
use fedpt::proxy::ProxyEnsemble;

/// Outcome of a fallible call. Values 2 through 6 coincide with the exit
/// codes of the `fedpt` command-line tool for the same failure classes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedptStatus {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer argument was NULL.
    NullPointer = 1,
    /// An argument violated the called operation's preconditions.
    InvalidInput = 2,
    /// A configuration value failed validation.
    InvalidConfig = 3,
    /// A file or byte buffer had the wrong magic, version, or layout.
    FormatError = 4,
    /// An internal invariant was violated; indicates a bug, not bad input.
    ContractViolation = 5,
    /// The operating system reported an I/O failure.
    IoError = 6,
    /// The output buffer cannot hold the result; `*out_len` has the size.
    BufferTooSmall = 7,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 8,
    /// The implementation panicked; state may be stale but memory is safe.
    Panic = 9,
}

/// Pretrained transformer weights loaded from a checkpoint file.
#[repr(C)]
pub struct FedptModel {
    _private: [u8; 0],
}

/// A low-rank adapter snapshot, as broadcast during federated rounds.
#[repr(C)]
pub struct FedptAdapter {
    _private: [u8; 0],
}

/// A proxy ensemble: large base steered by a tuned and a frozen small model.
#[repr(C)]
pub struct FedptProxy {
    _private: [u8; 0],
}

struct ModelHandle {
    params: Arc<ModelParams>,
}

struct AdapterHandle {
    adapter: LoraAdapter,
}

struct ProxyHandle {
    proxy: ProxyEnsemble,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let owned = CString::new(message.replace('\0', " "))
        .unwrap_or_else(|_| CString::default());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = owned);
}

fn status_for(err: &Error) -> FedptStatus {
    set_error(&err.to_string());
    match err.exit_code() {
        2 => FedptStatus::InvalidInput,
        3 => FedptStatus::InvalidConfig,
        4 => FedptStatus::FormatError,
        5 => FedptStatus::ContractViolation,
        _ => FedptStatus::IoError,
    }
}

fn guarded(body: impl FnOnce() -> FedptStatus) -> FedptStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            FedptStatus::Panic
        }
    }
}

/// Reads a NUL-terminated UTF-8 argument. The caller must guarantee the
/// pointer is either NULL or valid for the duration of the call.
unsafe fn text_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, FedptStatus> {
    if ptr.is_null() {
        set_error(&format!("{name} is NULL"));
        return Err(FedptStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(&format!("{name} is not valid UTF-8"));
        FedptStatus::InvalidUtf8
    })
}

unsafe fn write_text(
    text: &str,
    out: *mut c_char,
    cap: usize,
    out_len: *mut usize,
) -> FedptStatus {
    *out_len = text.len();
    if cap <= text.len() {
        set_error(&format!(
            "buffer of {cap} bytes cannot hold {} bytes plus terminator",
            text.len()
        ));
        return FedptStatus::BufferTooSmall;
    }
    ptr::copy_nonoverlapping(text.as_ptr(), out as *mut u8, text.len());
    *out.add(text.len()) = 0;
    FedptStatus::Ok
}

fn generate_text(
    source: &dyn LogitSource,
    prompt: &str,
    max_new_tokens: usize,
) -> Result<String, Error> {
    let tokenizer = ByteTokenizer::new(source.vocab())?;
    let mut tokens = vec![source.vocab().begin as Token];
    tokens.extend(tokenizer.tokenize(prompt));
    let generated = greedy_decode(source, &tokens, max_new_tokens)?;
    tokenizer.detokenize(&generated)
}

/// Returns the library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fedpt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Returns the message of the calling thread's most recent failure, or an
/// empty string if none occurred. The pointer stays valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn fedpt_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Loads model weights from a checkpoint file written by the simulator.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must point to writable memory.
#[no_mangle]
pub unsafe extern "C" fn fedpt_model_load(
    path: *const c_char,
    out: *mut *mut FedptModel,
) -> FedptStatus {
    guarded(|| {
        if out.is_null() {
            set_error("out is NULL");
            return FedptStatus::NullPointer;
        }
        let path = match text_arg(path, "path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        match load_model(Path::new(path)) {
            Ok((params, _seed)) => {
                let handle = Box::new(ModelHandle {
                    params: Arc::new(params),
                });
                *out = Box::into_raw(handle) as *mut FedptModel;
                FedptStatus::Ok
            }
            Err(e) => status_for(&e),
        }
    })
}

/// Releases a model handle. NULL is ignored.
///
/// # Safety
/// `model` must come from `fedpt_model_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fedpt_model_free(model: *mut FedptModel) {
    if !model.is_null() {
        drop(Box::from_raw(model as *mut ModelHandle));
    }
}

/// Number of parameters in the model, or 0 for NULL.
///
/// # Safety
/// `model` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn fedpt_model_param_count(model: *const FedptModel) -> u64 {
    if model.is_null() {
        return 0;
    }
    let handle = &*(model as *const ModelHandle);
    handle.params.param_count() as u64
}

/// Loads an adapter from a file in the broadcast wire format, as written
/// next to a run manifest after each checkpointed round.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must point to writable memory.
#[no_mangle]
pub unsafe extern "C" fn fedpt_adapter_load(
    path: *const c_char,
    out: *mut *mut FedptAdapter,
) -> FedptStatus {
    guarded(|| {
        if out.is_null() {
            set_error("out is NULL");
            return FedptStatus::NullPointer;
        }
        let path = match text_arg(path, "path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        let bytes = match std::fs::read(path) {
            Ok(b) => b,
            Err(e) => return status_for(&Error::io(Path::new(path), e)),
        };
        match LoraAdapter::from_wire(&bytes) {
            Ok(adapter) => {
                *out = Box::into_raw(Box::new(AdapterHandle { adapter })) as *mut FedptAdapter;
                FedptStatus::Ok
            }
            Err(e) => status_for(&e),
        }
    })
}

/// Decodes an adapter from an in-memory wire-format buffer.
///
/// # Safety
/// `bytes` must be readable for `len` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedpt_adapter_from_bytes(
    bytes: *const u8,
    len: usize,
    out: *mut *mut FedptAdapter,
) -> FedptStatus {
    guarded(|| {
        if out.is_null() || bytes.is_null() {
            set_error("bytes or out is NULL");
            return FedptStatus::NullPointer;
        }
        match LoraAdapter::from_wire(slice::from_raw_parts(bytes, len)) {
            Ok(adapter) => {
                *out = Box::into_raw(Box::new(AdapterHandle { adapter })) as *mut FedptAdapter;
                FedptStatus::Ok
            }
            Err(e) => status_for(&e),
        }
    })
}

/// Releases an adapter handle. NULL is ignored.
///
/// # Safety
/// `adapter` must come from an adapter constructor and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fedpt_adapter_free(adapter: *mut FedptAdapter) {
    if !adapter.is_null() {
        drop(Box::from_raw(adapter as *mut AdapterHandle));
    }
}

/// Number of trainable parameters in the adapter, or 0 for NULL.
///
/// # Safety
/// `adapter` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn fedpt_adapter_param_count(adapter: *const FedptAdapter) -> u64 {
    if adapter.is_null() {
        return 0;
    }
    let handle = &*(adapter as *const AdapterHandle);
    handle.adapter.param_count() as u64
}

/// Builds a proxy ensemble from a large base model, the small base model the
/// adapter was trained against, the adapter itself, and the steering
/// strength `alpha`. The models must share one vocabulary and the adapter
/// must fit the small model; violations return `InvalidInput`.
///
/// # Safety
/// All handles must be live; `out` must point to writable memory.
#[no_mangle]
pub unsafe extern "C" fn fedpt_proxy_new(
    large: *const FedptModel,
    small: *const FedptModel,
    adapter: *const FedptAdapter,
    alpha: f64,
    out: *mut *mut FedptProxy,
) -> FedptStatus {
    guarded(|| {
        if large.is_null() || small.is_null() || adapter.is_null() || out.is_null() {
            set_error("large, small, adapter, or out is NULL");
            return FedptStatus::NullPointer;
        }
        let large = &*(large as *const ModelHandle);
        let small = &*(small as *const ModelHandle);
        let adapter = &*(adapter as *const AdapterHandle);
        let tuned = match AdaptedModel::new(small.params.clone(), adapter.adapter.clone()) {
            Ok(t) => t,
            Err(e) => return status_for(&e),
        };
        match ProxyEnsemble::new(large.params.clone(), small.params.clone(), tuned, alpha) {
            Ok(proxy) => {
                *out = Box::into_raw(Box::new(ProxyHandle { proxy })) as *mut FedptProxy;
                FedptStatus::Ok
            }
            Err(e) => status_for(&e),
        }
    })
}

/// Releases a proxy handle. NULL is ignored.
///
/// # Safety
/// `proxy` must come from `fedpt_proxy_new` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fedpt_proxy_free(proxy: *mut FedptProxy) {
    if !proxy.is_null() {
        drop(Box::from_raw(proxy as *mut ProxyHandle));
    }
}

/// Greedy-decodes up to `max_new_tokens` tokens from the model, optionally
/// with an adapter applied (`adapter` may be NULL for the frozen base). The
/// beginning-of-sequence marker is prepended automatically, so `prompt` is
/// plain text, typically produced by [`fedpt_wrap_prompt`].
///
/// # Safety
/// Pointer arguments must satisfy the conventions in the crate docs.
#[no_mangle]
pub unsafe extern "C" fn fedpt_model_generate(
    model: *const FedptModel,
    adapter: *const FedptAdapter,
    prompt: *const c_char,
    max_new_tokens: usize,
    out: *mut c_char,
    cap: usize,
    out_len: *mut usize,
) -> FedptStatus {
    guarded(|| {
        if model.is_null() || out.is_null() || out_len.is_null() {
            set_error("model, out, or out_len is NULL");
            return FedptStatus::NullPointer;
        }
        let prompt = match text_arg(prompt, "prompt") {
            Ok(p) => p,
            Err(status) => return status,
        };
        if max_new_tokens == 0 {
            set_error("max_new_tokens must be positive");
            return FedptStatus::InvalidInput;
        }
        let handle = &*(model as *const ModelHandle);
        let result = if adapter.is_null() {
            generate_text(&*handle.params, prompt, max_new_tokens)
        } else {
            let adapter = &*(adapter as *const AdapterHandle);
            match AdaptedModel::new(handle.params.clone(), adapter.adapter.clone()) {
                Ok(tuned) => generate_text(&tuned, prompt, max_new_tokens),
                Err(e) => Err(e),
            }
        };
        match result {
            Ok(text) => write_text(&text, out, cap, out_len),
            Err(e) => status_for(&e),
        }
    })
}

/// Greedy-decodes up to `max_new_tokens` tokens from a proxy ensemble. The
/// beginning-of-sequence marker is prepended automatically.
///
/// # Safety
/// Pointer arguments must satisfy the conventions in the crate docs.
#[no_mangle]
pub unsafe extern "C" fn fedpt_proxy_generate(
    proxy: *const FedptProxy,
    prompt: *const c_char,
    max_new_tokens: usize,
    out: *mut c_char,
    cap: usize,
    out_len: *mut usize,
) -> FedptStatus {
    guarded(|| {
        if proxy.is_null() || out.is_null() || out_len.is_null() {
            set_error("proxy, out, or out_len is NULL");
            return FedptStatus::NullPointer;
        }
        let prompt = match text_arg(prompt, "prompt") {
            Ok(p) => p,
            Err(status) => return status,
        };
        if max_new_tokens == 0 {
            set_error("max_new_tokens must be positive");
            return FedptStatus::InvalidInput;
        }
        let handle = &*(proxy as *const ProxyHandle);
        match generate_text(&handle.proxy, prompt, max_new_tokens) {
            Ok(text) => write_text(&text, out, cap, out_len),
            Err(e) => status_for(&e),
        }
    })
}

/// Renders an instruction (and optional input, NULL or empty for none) into
/// the prompt template the models were trained on.
///
/// # Safety
/// Pointer arguments must satisfy the conventions in the crate docs.
#[no_mangle]
pub unsafe extern "C" fn fedpt_wrap_prompt(
    instruction: *const c_char,
    input: *const c_char,
    out: *mut c_char,
    cap: usize,
    out_len: *mut usize,
) -> FedptStatus {
    guarded(|| {
        if out.is_null() || out_len.is_null() {
            set_error("out or out_len is NULL");
            return FedptStatus::NullPointer;
        }
        let instruction = match text_arg(instruction, "instruction") {
            Ok(i) => i,
            Err(status) => return status,
        };
        let input = if input.is_null() {
            ""
        } else {
            match text_arg(input, "input") {
                Ok(i) => i,
                Err(status) => return status,
            }
        };
        let example = Example {
            instruction: instruction.into(),
            input: input.into(),
            response: String::new(),
            category: String::new(),
        };
        write_text(&wrap_prompt(&example), out, cap, out_len)
    })
}

/// Rouge-L F1 between a candidate and a reference text, in [0, 1].
/// Returns -1.0 on NULL or non-UTF-8 arguments.
///
/// # Safety
/// Both pointers must be NUL-terminated strings or NULL.
#[no_mangle]
pub unsafe extern "C" fn fedpt_rouge_l(
    candidate: *const c_char,
    reference: *const c_char,
) -> f64 {
    catch_unwind(AssertUnwindSafe(|| {
        let candidate = match text_arg(candidate, "candidate") {
            Ok(c) => c,
            Err(_) => return -1.0,
        };
        let reference = match text_arg(reference, "reference") {
            Ok(r) => r,
            Err(_) => return -1.0,
        };
        rouge_l(candidate, reference)
    }))
    .unwrap_or_else(|_| {
        set_error("internal panic");
        -1.0
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_is_nul_terminated_package_version() {
        let version = unsafe { CStr::from_ptr(fedpt_version()) };
        assert_eq!(version.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn last_error_starts_empty_and_reflects_failures() {
        let before = unsafe { CStr::from_ptr(fedpt_last_error()) };
        assert_eq!(before.to_str().unwrap(), "");
        let status = unsafe { fedpt_model_load(ptr::null(), ptr::null_mut()) };
        assert_eq!(status, FedptStatus::NullPointer);
        let after = unsafe { CStr::from_ptr(fedpt_last_error()) };
        assert!(!after.to_bytes().is_empty());
    }

    #[test]
    fn rouge_handles_null_and_valid_inputs() {
        let a = CString::new("the cat sat").unwrap();
        let b = CString::new("the cat sat").unwrap();
        let score = unsafe { fedpt_rouge_l(a.as_ptr(), b.as_ptr()) };
        assert_eq!(score, 1.0);
        let bad = unsafe { fedpt_rouge_l(ptr::null(), b.as_ptr()) };
        assert_eq!(bad, -1.0);
    }

    #[test]
    fn wrap_prompt_reports_required_length_then_fits() {
        let instruction = CString::new("Repeat the input.").unwrap();
        let mut needed = 0usize;
        let status = unsafe {
            fedpt_wrap_prompt(
                instruction.as_ptr(),
                ptr::null(),
                &mut 0i8 as *mut c_char,
                1,
                &mut needed,
            )
        };
        assert_eq!(status, FedptStatus::BufferTooSmall);
        assert!(needed > 0);

        let mut buf = vec![0i8; needed + 1];
        let mut written = 0usize;
        let status = unsafe {
            fedpt_wrap_prompt(
                instruction.as_ptr(),
                ptr::null(),
                buf.as_mut_ptr(),
                buf.len(),
                &mut written,
            )
        };
        assert_eq!(status, FedptStatus::Ok);
        assert_eq!(written, needed);
        let text = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap();
        assert!(text.contains("[Instruction]\nRepeat the input."));
        assert!(text.ends_with("[Response]\n"));
        assert!(!text.contains("[Input]"));
    }
}
