//! C interface to spikecast.
//!
//! Models live behind an opaque `SpikecastModel` handle. Every function
//! returns a `SpikecastStatus`; on failure the message is available from
//! `spikecast_last_error` on the same thread until the next call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use spikecast::autograd::{Tape, Tensor};
use spikecast::lif::{lif_step, LifConfig, LifState};
use spikecast::metrics::{r2, rse};
use spikecast::nets::{load_checkpoint, save_checkpoint, CheckpointError, ForecastModel, ModelConfig, ModelDims};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpikecastStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidString = 2,
    Io = 3,
    Config = 4,
    Shape = 5,
    Runtime = 6,
    Panic = 7,
}

/// Opaque model handle.
pub struct SpikecastModel {
    inner: ForecastModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), (SpikecastStatus, String)>) -> SpikecastStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SpikecastStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SpikecastStatus::Panic
        }
    }
}

type FfiResult<T> = Result<T, (SpikecastStatus, String)>;

fn non_null<T>(p: *const T, what: &str) -> FfiResult<()> {
    if p.is_null() {
        Err((SpikecastStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    non_null(p, what)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (SpikecastStatus::InvalidString, format!("{what} is not valid UTF-8")))
}

fn checkpoint_status(e: CheckpointError) -> (SpikecastStatus, String) {
    let status = match e {
        CheckpointError::Io(_) => SpikecastStatus::Io,
        CheckpointError::Shape { .. } | CheckpointError::Missing(_) | CheckpointError::Unexpected(_) => {
            SpikecastStatus::Shape
        }
        _ => SpikecastStatus::Config,
    };
    (status, e.to_string())
}

/// Message of the last failed call on this thread, or null. Owned by the
/// library and valid until the next call.
#[no_mangle]
pub extern "C" fn spikecast_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn spikecast_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds an untrained model from a TOML model section (may be empty).
///
/// # Safety
/// `config_toml` must be null or a NUL-terminated string; `out` must be a
/// valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn spikecast_model_new(
    config_toml: *const c_char,
    lookback: usize,
    horizon: usize,
    channels: usize,
    seed: u64,
    out: *mut *mut SpikecastModel,
) -> SpikecastStatus {
    guard(|| {
        non_null(out, "out")?;
        let text = if config_toml.is_null() {
            ""
        } else {
            read_str(config_toml, "config_toml")?
        };
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| (SpikecastStatus::Config, e.to_string()))?;
        let dims = ModelDims {
            lookback,
            horizon,
            channels,
        };
        let inner = ForecastModel::new(&cfg, dims, seed).map_err(|e| (SpikecastStatus::Config, e.to_string()))?;
        *out = Box::into_raw(Box::new(SpikecastModel { inner }));
        Ok(())
    })
}

/// Loads a checkpoint written by `spikecast train` or `spikecast_model_save`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn spikecast_model_load(path: *const c_char, out: *mut *mut SpikecastModel) -> SpikecastStatus {
    guard(|| {
        non_null(out, "out")?;
        let p = read_str(path, "path")?;
        let inner = load_checkpoint(Path::new(p)).map_err(checkpoint_status)?;
        *out = Box::into_raw(Box::new(SpikecastModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn spikecast_model_save(model: *const SpikecastModel, path: *const c_char) -> SpikecastStatus {
    guard(|| {
        non_null(model, "model")?;
        let p = read_str(path, "path")?;
        save_checkpoint(&(*model).inner, Path::new(p)).map_err(checkpoint_status)
    })
}

/// Releases a handle. Null is accepted.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spikecast_model_free(model: *mut SpikecastModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; the output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn spikecast_model_dims(
    model: *const SpikecastModel,
    lookback: *mut usize,
    horizon: *mut usize,
    channels: *mut usize,
) -> SpikecastStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(lookback, "lookback")?;
        non_null(horizon, "horizon")?;
        non_null(channels, "channels")?;
        let d = (*model).inner.dims();
        *lookback = d.lookback;
        *horizon = d.horizon;
        *channels = d.channels;
        Ok(())
    })
}

/// Forecasts `n_windows` windows laid out `[n, lookback, channels]` into
/// `out` (`[n, horizon, channels]`, `out_len` floats).
///
/// # Safety
/// `input` must hold `n_windows * lookback * channels` floats and `out`
/// must have room for `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn spikecast_model_predict(
    model: *const SpikecastModel,
    input: *const f32,
    n_windows: usize,
    out: *mut f32,
    out_len: usize,
) -> SpikecastStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(input, "input")?;
        non_null(out, "out")?;
        let m = &(*model).inner;
        let d = m.dims();
        let need = n_windows * d.horizon * d.channels;
        if out_len != need || n_windows == 0 {
            return Err((
                SpikecastStatus::Shape,
                format!("out_len must be {need} for {n_windows} windows, got {out_len}"),
            ));
        }
        let x = std::slice::from_raw_parts(input, n_windows * d.lookback * d.channels).to_vec();
        let x = Tensor::new(vec![n_windows, d.lookback, d.channels], x).map_err(|e| (SpikecastStatus::Shape, e.to_string()))?;
        let y = m.predict(&x, 256).map_err(|e| (SpikecastStatus::Runtime, e.to_string()))?;
        std::slice::from_raw_parts_mut(out, need).copy_from_slice(y.data());
        Ok(())
    })
}

/// Multiply-accumulate count per sample and sub-step, summed over layers.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spikecast_model_flops(model: *const SpikecastModel, out: *mut u64) -> SpikecastStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        *out = (*model).inner.op_counts().iter().map(|c| c.flops).sum();
        Ok(())
    })
}

/// Drives one LIF neuron with `n` input currents, writing spikes and the
/// post-step potential `H` of every step.
///
/// # Safety
/// `currents`, `spikes` and `potentials` must each hold `n` floats.
#[no_mangle]
pub unsafe extern "C" fn spikecast_lif_trace(
    currents: *const f32,
    n: usize,
    threshold: f32,
    beta: f32,
    v_reset: f32,
    spikes: *mut f32,
    potentials: *mut f32,
) -> SpikecastStatus {
    guard(|| {
        non_null(currents, "currents")?;
        non_null(spikes, "spikes")?;
        non_null(potentials, "potentials")?;
        let cfg = LifConfig {
            u_thr: threshold,
            beta,
            v_reset,
            ..LifConfig::default()
        };
        cfg.validate().map_err(|e| (SpikecastStatus::Config, e.to_string()))?;
        let input = std::slice::from_raw_parts(currents, n);
        let (s_out, h_out) = (
            std::slice::from_raw_parts_mut(spikes, n),
            std::slice::from_raw_parts_mut(potentials, n),
        );
        let mut tape = Tape::new();
        let mut state = LifState::new();
        let rt = |e: &dyn std::fmt::Display| (SpikecastStatus::Runtime, e.to_string());
        for (k, &c) in input.iter().enumerate() {
            let i = tape.constant(Tensor::vector(vec![c])).map_err(|e| rt(&e))?;
            let s = lif_step(&mut tape, i, &mut state, &cfg).map_err(|e| rt(&e))?;
            s_out[k] = tape.value(s).data()[0];
            h_out[k] = tape.value(state.h().expect("stepped")).data()[0];
        }
        Ok(())
    })
}

/// RSE and R² of forecasts laid out `[m, l, c]`.
///
/// # Safety
/// `preds` and `truths` must each hold `m * l * c` floats; `rse_out` and
/// `r2_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spikecast_metrics(
    preds: *const f32,
    truths: *const f32,
    m: usize,
    l: usize,
    c: usize,
    rse_out: *mut f64,
    r2_out: *mut f64,
) -> SpikecastStatus {
    guard(|| {
        non_null(preds, "preds")?;
        non_null(truths, "truths")?;
        non_null(rse_out, "rse_out")?;
        non_null(r2_out, "r2_out")?;
        let n = m * l * c;
        let shape = |p: *const f32| {
            Tensor::new(vec![m, l, c], std::slice::from_raw_parts(p, n).to_vec())
                .map_err(|e| (SpikecastStatus::Shape, e.to_string()))
        };
        let (p, t) = (shape(preds)?, shape(truths)?);
        *rse_out = rse(&p, &t).map_err(|e| (SpikecastStatus::Runtime, e.to_string()))?;
        *r2_out = r2(&p, &t).map_err(|e| (SpikecastStatus::Runtime, e.to_string()))?;
        Ok(())
    })
}
