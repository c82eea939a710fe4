//! C ABI for loading a trained checkpoint and scoring raw signal buffers.
//!
//! The surface is deliberately small: load a model from a checkpoint file
//! into an opaque handle, query its geometry, and predict per-second stages
//! from caller-owned sample buffers. All functions return a status code;
//! `sdreamer_last_error` retrieves a thread-local message for the most
//! recent failure on the calling thread.
//!
//! Thread safety: a handle is immutable after load and may be shared across
//! threads; concurrent `sdreamer_predict` calls on one handle are safe.
//! The header `include/sdreamer.h` is regenerated by the build script.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use sdreamer::config::ModelKind;
use sdreamer::run::{predict_record, restore_model, RestoredModel};
use sdreamer::signal::SignalRecord;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdreamerStatus {
    /// Success.
    Ok = 0,
    /// Checkpoint missing, unreadable, or not compatible with this library.
    BadCheckpoint = 1,
    /// Null pointer, zero-length buffer, or otherwise invalid argument.
    InvalidArgument = 2,
    /// The model could not score the given signal.
    InferenceFailed = 3,
    /// A defensive catch-all for internal panics.
    Internal = 4,
}

/// Opaque trained-model handle.
pub struct SdreamerModel {
    inner: RestoredModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized = CString::new(message.replace('\0', "?"))
        .unwrap_or_else(|_| CString::new("error message unavailable").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = sanitized);
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread. Never null.
#[no_mangle]
pub extern "C" fn sdreamer_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

fn guard<F: FnOnce() -> SdreamerStatus>(body: F) -> SdreamerStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let what = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_error(&format!("internal panic: {what}"));
            SdreamerStatus::Internal
        }
    }
}

/// Load a checkpoint into a freshly allocated handle.
///
/// `checkpoint_path` is a NUL-terminated UTF-8 path; on success `*out`
/// receives the handle, which must be released with `sdreamer_model_free`.
///
/// # Safety
/// `checkpoint_path` must point to a valid NUL-terminated string and `out`
/// to a writable pointer slot.
#[no_mangle]
pub unsafe extern "C" fn sdreamer_model_load(
    checkpoint_path: *const c_char,
    out: *mut *mut SdreamerModel,
) -> SdreamerStatus {
    guard(|| {
        if checkpoint_path.is_null() || out.is_null() {
            set_error("checkpoint_path and out must be non-null");
            return SdreamerStatus::InvalidArgument;
        }
        // SAFETY: the caller guarantees a NUL-terminated string.
        let raw = unsafe { CStr::from_ptr(checkpoint_path) };
        let Ok(path) = raw.to_str() else {
            set_error("checkpoint_path is not valid UTF-8");
            return SdreamerStatus::InvalidArgument;
        };
        match restore_model(Path::new(path)) {
            Ok(inner) => {
                let handle = Box::new(SdreamerModel { inner });
                // SAFETY: `out` is a valid slot per the caller contract.
                unsafe { *out = Box::into_raw(handle) };
                SdreamerStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                SdreamerStatus::BadCheckpoint
            }
        }
    })
}

/// Release a handle. Passing null is a no-op.
///
/// # Safety
/// `model` must be null or a pointer returned by `sdreamer_model_load` that
/// has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn sdreamer_model_free(model: *mut SdreamerModel) {
    if !model.is_null() {
        // SAFETY: ownership returns to Rust exactly once per the contract.
        drop(unsafe { Box::from_raw(model) });
    }
}

unsafe fn borrow<'a>(model: *const SdreamerModel) -> Option<&'a SdreamerModel> {
    // SAFETY: the caller guarantees the pointer came from sdreamer_model_load.
    unsafe { model.as_ref() }
}

/// Number of stage classes the model scores (0 if `model` is null).
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sdreamer_model_classes(model: *const SdreamerModel) -> u32 {
    unsafe { borrow(model) }.map_or(0, |m| m.inner.model.n_classes() as u32)
}

/// Training step the checkpoint was saved at (0 if `model` is null).
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sdreamer_model_step(model: *const SdreamerModel) -> u64 {
    unsafe { borrow(model) }.map_or(0, |m| m.inner.step)
}

/// Smallest number of whole seconds `sdreamer_predict` accepts: 1 for an
/// epoch model, the sequence length for a sequence model (0 if null).
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sdreamer_model_min_seconds(model: *const SdreamerModel) -> u32 {
    unsafe { borrow(model) }.map_or(0, |m| match m.inner.config.kind {
        ModelKind::Epoch => 1,
        ModelKind::Sequence => m.inner.config.seq_len as u32,
    })
}

/// Score raw signal buffers, one prediction per whole second.
///
/// `eeg` and `emg` each point to `n_samples` doubles or are null; at least
/// one must be present, and the model normalizes each buffer with its own
/// whole-trace statistics before scoring. `sample_rate_hz` samples make one
/// second; trailing samples beyond the last whole second are ignored.
///
/// Outputs: `out_labels[i]` receives the class index of second `i`
/// (`n_seconds` entries); `out_probs`, unless null, receives the class
/// probabilities row-major (`n_seconds * n_classes` entries).
///
/// # Safety
/// All non-null pointers must be valid for the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn sdreamer_predict(
    model: *const SdreamerModel,
    eeg: *const f64,
    emg: *const f64,
    n_samples: usize,
    sample_rate_hz: u32,
    out_labels: *mut u32,
    out_probs: *mut f64,
) -> SdreamerStatus {
    guard(|| {
        let Some(handle) = (unsafe { borrow(model) }) else {
            set_error("model handle is null");
            return SdreamerStatus::InvalidArgument;
        };
        if out_labels.is_null() {
            set_error("out_labels must be non-null");
            return SdreamerStatus::InvalidArgument;
        }
        if sample_rate_hz == 0 || n_samples < sample_rate_hz as usize {
            set_error("need at least one whole second of samples");
            return SdreamerStatus::InvalidArgument;
        }
        if eeg.is_null() && emg.is_null() {
            set_error("at least one of eeg and emg must be non-null");
            return SdreamerStatus::InvalidArgument;
        }
        let grab = |p: *const f64| {
            if p.is_null() {
                Vec::new()
            } else {
                // SAFETY: non-null buffers hold n_samples elements.
                unsafe { std::slice::from_raw_parts(p, n_samples) }.to_vec()
            }
        };
        let seconds = n_samples / sample_rate_hz as usize;
        let record = SignalRecord {
            subject_id: "buffer".to_string(),
            sample_rate_hz,
            eeg: grab(eeg),
            emg: grab(emg),
            labels: vec![None; seconds],
        };

        let m = &handle.inner;
        let output = match predict_record(&m.config, &m.store, &m.model, &record, false) {
            Ok(out) => out,
            Err(e) => {
                set_error(&e.to_string());
                return SdreamerStatus::InferenceFailed;
            }
        };
        if output.predictions.len() != seconds {
            set_error(&format!(
                "model produced {} predictions for {seconds} seconds",
                output.predictions.len()
            ));
            return SdreamerStatus::InferenceFailed;
        }

        let n_classes = m.model.n_classes();
        for (i, p) in output.predictions.iter().enumerate() {
            // SAFETY: out_labels holds `seconds` entries.
            unsafe { *out_labels.add(i) = p.label.index() as u32 };
            if !out_probs.is_null() {
                for (c, &prob) in p.probs.iter().enumerate() {
                    // SAFETY: out_probs holds seconds * n_classes entries.
                    unsafe { *out_probs.add(i * n_classes + c) = prob };
                }
            }
        }
        SdreamerStatus::Ok
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use sdreamer::config::RunConfig;
    use sdreamer::model::checkpoint::save_checkpoint;
    use sdreamer::model::EpochModel;
    use sdreamer::params::ParamStore;
    use std::ptr;

    /// Build a tiny untrained model and write it as a checkpoint.
    fn write_checkpoint(dir: &Path) -> std::path::PathBuf {
        let config = RunConfig {
            data_dir: "unused".into(),
            train_subjects: vec!["s00".into()],
            test_subjects: vec!["s01".into()],
            layers: 1,
            mix_start_layer: 1,
            dim: 8,
            patch_width: 8,
            patches: Some(2),
            heads: 2,
            ffn_dim: 16,
            ..RunConfig::default()
        };

        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        EpochModel::build(&mut store, config.epoch_model_config(2), &mut rng).unwrap();
        let path = dir.join("model.ckpt");
        save_checkpoint(&path, &config.to_text(), 42, &rng, &store).unwrap();
        path
    }

    fn load(path: &Path) -> *mut SdreamerModel {
        let c_path = CString::new(path.to_str().unwrap()).unwrap();
        let mut handle: *mut SdreamerModel = ptr::null_mut();
        let status = unsafe { sdreamer_model_load(c_path.as_ptr(), &mut handle) };
        assert_eq!(status, SdreamerStatus::Ok, "load failed: {}", last_error_string());
        assert!(!handle.is_null());
        handle
    }

    fn last_error_string() -> String {
        unsafe { CStr::from_ptr(sdreamer_last_error()) }.to_string_lossy().into_owned()
    }

    fn signal(seconds: usize, rate: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..seconds * rate).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn load_query_predict_free_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = write_checkpoint(dir.path());
        let handle = load(&ckpt);

        unsafe {
            assert_eq!(sdreamer_model_classes(handle), 3);
            assert_eq!(sdreamer_model_step(handle), 42);
            assert_eq!(sdreamer_model_min_seconds(handle), 1);
        }

        let (seconds, rate) = (5, 16);
        let eeg = signal(seconds, rate, 1);
        let emg = signal(seconds, rate, 2);
        let mut labels = vec![u32::MAX; seconds];
        let mut probs = vec![0.0; seconds * 3];
        let status = unsafe {
            sdreamer_predict(
                handle,
                eeg.as_ptr(),
                emg.as_ptr(),
                seconds * rate,
                rate as u32,
                labels.as_mut_ptr(),
                probs.as_mut_ptr(),
            )
        };
        assert_eq!(status, SdreamerStatus::Ok, "{}", last_error_string());
        for &l in &labels {
            assert!(l < 3);
        }
        for row in probs.chunks(3) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "probabilities must sum to 1, got {sum}");
        }
        unsafe { sdreamer_model_free(handle) };
    }

    #[test]
    fn mono_buffer_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let handle = load(&write_checkpoint(dir.path()));
        let (seconds, rate) = (3, 16);
        let eeg = signal(seconds, rate, 3);
        let mut labels = vec![0u32; seconds];
        let status = unsafe {
            sdreamer_predict(
                handle,
                eeg.as_ptr(),
                ptr::null(),
                seconds * rate,
                rate as u32,
                labels.as_mut_ptr(),
                ptr::null_mut(),
            )
        };
        assert_eq!(status, SdreamerStatus::Ok, "{}", last_error_string());
        unsafe { sdreamer_model_free(handle) };
    }

    #[test]
    fn null_and_bad_arguments_are_rejected_with_messages() {
        let dir = tempfile::tempdir().unwrap();
        let handle = load(&write_checkpoint(dir.path()));

        let status = unsafe {
            sdreamer_predict(handle, ptr::null(), ptr::null(), 64, 16, ptr::null_mut(), ptr::null_mut())
        };
        assert_eq!(status, SdreamerStatus::InvalidArgument);
        assert!(last_error_string().contains("out_labels"));

        let mut labels = vec![0u32; 4];
        let status = unsafe {
            sdreamer_predict(
                handle,
                ptr::null(),
                ptr::null(),
                64,
                16,
                labels.as_mut_ptr(),
                ptr::null_mut(),
            )
        };
        assert_eq!(status, SdreamerStatus::InvalidArgument);
        assert!(last_error_string().contains("eeg"));

        let eeg = signal(1, 8, 4);
        let status = unsafe {
            sdreamer_predict(
                ptr::null(),
                eeg.as_ptr(),
                ptr::null(),
                8,
                8,
                labels.as_mut_ptr(),
                ptr::null_mut(),
            )
        };
        assert_eq!(status, SdreamerStatus::InvalidArgument);
        unsafe { sdreamer_model_free(handle) };
    }

    #[test]
    fn missing_checkpoint_reports_bad_checkpoint() {
        let c_path = CString::new("/definitely/not/here.ckpt").unwrap();
        let mut handle: *mut SdreamerModel = ptr::null_mut();
        let status = unsafe { sdreamer_model_load(c_path.as_ptr(), &mut handle) };
        assert_eq!(status, SdreamerStatus::BadCheckpoint);
        assert!(handle.is_null());
        assert!(last_error_string().contains("not/here.ckpt"));
    }

    #[test]
    fn freeing_null_is_a_no_op() {
        unsafe { sdreamer_model_free(ptr::null_mut()) };
    }

    #[test]
    fn constant_signal_fails_inference_not_crashes() {
        let dir = tempfile::tempdir().unwrap();
        let handle = load(&write_checkpoint(dir.path()));
        let eeg = vec![1.0; 64];
        let mut labels = vec![0u32; 4];
        let status = unsafe {
            sdreamer_predict(
                handle,
                eeg.as_ptr(),
                ptr::null(),
                64,
                16,
                labels.as_mut_ptr(),
                ptr::null_mut(),
            )
        };
        assert_eq!(status, SdreamerStatus::InferenceFailed);
        assert!(last_error_string().contains("degenerate"));
        unsafe { sdreamer_model_free(handle) };
    }
}
