//! C ABI over `cea-core`.
//!
//! Every fallible function returns a [`CeaStatus`]; on failure the message is
//! available from [`cea_last_error`] on the same thread. Objects are opaque
//! handles created by `*_new`/`*_load` and released with the matching
//! `*_free`. Strings returned to the caller are released with
//! [`cea_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use cea_core::cea::{ctp_match, CeaConfig};
use cea_core::config::ExperimentConfig;
use cea_core::kde::{entropy, optimize_candidates, KdeModel, SamplerConfig};
use cea_core::replay::{PerBuffer, PerConfig, Provenance, Transition};
use cea_core::rng::{seeded, StreamRng};
use cea_core::runner::{ema_smooth, run_experiment};
use cea_core::space::Action;
use cea_core::sta::StaModel;
use cea_core::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CeaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    State = 5,
    Numeric = 6,
    Io = 7,
    Snapshot = 8,
    Panic = 9,
}

#[derive(Debug, thiserror::Error)]
enum Failure {
    #[error("null pointer passed for `{0}`")]
    Null(&'static str),
    #[error("`{0}` is not valid UTF-8")]
    Utf8(&'static str),
    #[error(transparent)]
    Core(#[from] Error),
}

impl Failure {
    fn status(&self) -> CeaStatus {
        match self {
            Failure::Null(_) => CeaStatus::NullPointer,
            Failure::Utf8(_) => CeaStatus::InvalidArgument,
            Failure::Core(e) => match e {
                Error::Shape(_) => CeaStatus::Shape,
                Error::Numeric(_) => CeaStatus::Numeric,
                Error::State(_) | Error::Usage(_) => CeaStatus::State,
                Error::Config(_) | Error::Toml(_) => CeaStatus::Config,
                Error::Io(_) | Error::Json(_) => CeaStatus::Io,
                Error::Snapshot(_) => CeaStatus::Snapshot,
                Error::InvalidArgument(_) | Error::Sampling(_) | Error::Match(_) => CeaStatus::InvalidArgument,
            },
        }
    }
}

type FfiResult<T> = Result<T, Failure>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> CeaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CeaStatus::Ok,
        Ok(Err(e)) => {
            set_last_error(e.to_string());
            e.status()
        }
        Err(_) => {
            set_last_error("internal panic".into());
            CeaStatus::Panic
        }
    }
}

unsafe fn view<'a, T>(p: *const T, n: usize, name: &'static str) -> FfiResult<&'a [T]> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn view_mut<'a, T>(p: *mut T, n: usize, name: &'static str) -> FfiResult<&'a mut [T]> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    Ok(slice::from_raw_parts_mut(p, n))
}

unsafe fn text<'a>(p: *const c_char, name: &'static str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::Utf8(name))
}

unsafe fn out<T>(p: *mut T, name: &'static str, value: T) -> FfiResult<()> {
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    p.write(value);
    Ok(())
}

fn rows(flat: &[f64], dim: usize) -> Vec<Vec<f64>> {
    flat.chunks(dim).map(<[f64]>::to_vec).collect()
}

fn check_dim(dim: usize) -> FfiResult<()> {
    if dim == 0 {
        return Err(Error::InvalidArgument("dimension must be positive".into()).into());
    }
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cea_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn cea_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---------------------------------------------------------------------------
// Replay buffer

/// Prioritized replay buffer with its own sampling generator.
pub struct CeaPerBuffer {
    inner: PerBuffer,
    rng: StreamRng,
}

/// # Safety
/// `out` must be a valid pointer to receive the handle.
#[no_mangle]
pub unsafe extern "C" fn cea_per_buffer_new(
    capacity: usize,
    alpha: f64,
    beta: f64,
    prior_eps: f64,
    seed: u64,
    out_buffer: *mut *mut CeaPerBuffer,
) -> CeaStatus {
    guard(|| {
        let cfg = PerConfig { capacity, alpha, beta, beta_end: beta, prior_eps };
        let inner = PerBuffer::new(&cfg)?;
        let handle = Box::into_raw(Box::new(CeaPerBuffer { inner, rng: seeded(seed) }));
        out(out_buffer, "out_buffer", handle)
    })
}

/// # Safety
/// `buffer` must be null or a handle from [`cea_per_buffer_new`].
#[no_mangle]
pub unsafe extern "C" fn cea_per_buffer_free(buffer: *mut CeaPerBuffer) {
    if !buffer.is_null() {
        drop(Box::from_raw(buffer));
    }
}

unsafe fn buffer_mut<'a>(b: *mut CeaPerBuffer) -> FfiResult<&'a mut CeaPerBuffer> {
    b.as_mut().ok_or(Failure::Null("buffer"))
}

/// Stores a transition with a discrete action; writes the slot index.
///
/// # Safety
/// `s` and `s_next` must point to `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn cea_per_buffer_push_discrete(
    buffer: *mut CeaPerBuffer,
    s: *const f64,
    s_next: *const f64,
    dim: usize,
    action: usize,
    reward: f64,
    done: bool,
    counterfactual: bool,
    out_index: *mut usize,
) -> CeaStatus {
    guard(|| {
        check_dim(dim)?;
        let b = buffer_mut(buffer)?;
        let t = transition(view(s, dim, "s")?, view(s_next, dim, "s_next")?, Action::Discrete(action), reward, done, counterfactual)?;
        let idx = b.inner.push(t);
        if !out_index.is_null() {
            out_index.write(idx);
        }
        Ok(())
    })
}

/// Stores a transition with a continuous action of `action_dim` components.
///
/// # Safety
/// `s` and `s_next` must point to `dim` doubles, `action` to `action_dim`.
#[no_mangle]
pub unsafe extern "C" fn cea_per_buffer_push_continuous(
    buffer: *mut CeaPerBuffer,
    s: *const f64,
    s_next: *const f64,
    dim: usize,
    action: *const f64,
    action_dim: usize,
    reward: f64,
    done: bool,
    counterfactual: bool,
    out_index: *mut usize,
) -> CeaStatus {
    guard(|| {
        check_dim(dim)?;
        check_dim(action_dim)?;
        let b = buffer_mut(buffer)?;
        let a = Action::Continuous(view(action, action_dim, "action")?.to_vec());
        let t = transition(view(s, dim, "s")?, view(s_next, dim, "s_next")?, a, reward, done, counterfactual)?;
        let idx = b.inner.push(t);
        if !out_index.is_null() {
            out_index.write(idx);
        }
        Ok(())
    })
}

fn transition(s: &[f64], s_next: &[f64], a: Action, r: f64, done: bool, counterfactual: bool) -> FfiResult<Transition> {
    let provenance = if counterfactual { Provenance::Counterfactual } else { Provenance::Real };
    Ok(Transition::new(s.to_vec(), a, r, s_next.to_vec(), done, provenance)?)
}

/// Number of stored transitions.
///
/// # Safety
/// `buffer` must be a live handle; `out_len` writable.
#[no_mangle]
pub unsafe extern "C" fn cea_per_buffer_len(buffer: *mut CeaPerBuffer, out_len: *mut usize) -> CeaStatus {
    guard(|| {
        let b = buffer_mut(buffer)?;
        out(out_len, "out_len", b.inner.len())
    })
}

/// Draws `batch` slot indices and their normalized importance weights.
///
/// # Safety
/// `out_indices` and `out_weights` must hold `batch` elements.
#[no_mangle]
pub unsafe extern "C" fn cea_per_buffer_sample(
    buffer: *mut CeaPerBuffer,
    batch: usize,
    out_indices: *mut usize,
    out_weights: *mut f64,
) -> CeaStatus {
    guard(|| {
        let b = buffer_mut(buffer)?;
        let idx = view_mut(out_indices, batch, "out_indices")?;
        let w = view_mut(out_weights, batch, "out_weights")?;
        let drawn = b.inner.sample(batch, &mut b.rng)?;
        idx.copy_from_slice(&drawn.indices);
        w.copy_from_slice(&drawn.weights);
        Ok(())
    })
}

/// Sets priorities from TD errors for `n` sampled indices.
///
/// # Safety
/// `indices` and `td_errors` must hold `n` elements.
#[no_mangle]
pub unsafe extern "C" fn cea_per_buffer_update(
    buffer: *mut CeaPerBuffer,
    indices: *const usize,
    td_errors: *const f64,
    n: usize,
) -> CeaStatus {
    guard(|| {
        let b = buffer_mut(buffer)?;
        b.inner.update_priorities(view(indices, n, "indices")?, view(td_errors, n, "td_errors")?)?;
        Ok(())
    })
}

/// Probability that one draw returns slot `index`.
///
/// # Safety
/// `buffer` must be a live handle; `out_probability` writable.
#[no_mangle]
pub unsafe extern "C" fn cea_per_buffer_probability(
    buffer: *mut CeaPerBuffer,
    index: usize,
    out_probability: *mut f64,
) -> CeaStatus {
    guard(|| {
        let b = buffer_mut(buffer)?;
        let p = b
            .inner
            .probability(index)
            .ok_or_else(|| Error::InvalidArgument(format!("replay index {index} is empty or out of range")))?;
        out(out_probability, "out_probability", p)
    })
}

// ---------------------------------------------------------------------------
// Transition model

/// Pretrained transition model with its own sampling generator.
pub struct CeaSta {
    inner: StaModel,
    rng: StreamRng,
}

/// Loads a checkpoint written by `cea sta-pretrain`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_model` writable.
#[no_mangle]
pub unsafe extern "C" fn cea_sta_load(path: *const c_char, seed: u64, out_model: *mut *mut CeaSta) -> CeaStatus {
    guard(|| {
        let inner = StaModel::load(Path::new(text(path, "path")?))?;
        out(out_model, "out_model", Box::into_raw(Box::new(CeaSta { inner, rng: seeded(seed) })))
    })
}

/// # Safety
/// `model` must be null or a handle from [`cea_sta_load`].
#[no_mangle]
pub unsafe extern "C" fn cea_sta_free(model: *mut CeaSta) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// State dimension of the model.
///
/// # Safety
/// `model` must be a live handle; `out_dim` writable.
#[no_mangle]
pub unsafe extern "C" fn cea_sta_state_dim(model: *const CeaSta, out_dim: *mut usize) -> CeaStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Failure::Null("model"))?;
        out(out_dim, "out_dim", m.inner.state_dim())
    })
}

/// Samples a next state for `s` under discrete action `action`.
///
/// # Safety
/// `s` and `out_next` must hold `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn cea_sta_generate_discrete(
    model: *mut CeaSta,
    s: *const f64,
    dim: usize,
    action: usize,
    out_next: *mut f64,
) -> CeaStatus {
    guard(|| {
        let m = model.as_mut().ok_or(Failure::Null("model"))?;
        generate(m, view(s, dim, "s")?, &Action::Discrete(action), view_mut(out_next, dim, "out_next")?)
    })
}

/// Samples a next state for `s` under a continuous action.
///
/// # Safety
/// `s` and `out_next` must hold `dim` doubles, `action` `action_dim`.
#[no_mangle]
pub unsafe extern "C" fn cea_sta_generate_continuous(
    model: *mut CeaSta,
    s: *const f64,
    dim: usize,
    action: *const f64,
    action_dim: usize,
    out_next: *mut f64,
) -> CeaStatus {
    guard(|| {
        let m = model.as_mut().ok_or(Failure::Null("model"))?;
        let a = Action::Continuous(view(action, action_dim, "action")?.to_vec());
        generate(m, view(s, dim, "s")?, &a, view_mut(out_next, dim, "out_next")?)
    })
}

fn generate(m: &mut CeaSta, s: &[f64], a: &Action, dst: &mut [f64]) -> FfiResult<()> {
    let next = m.inner.generate(s, a, &mut m.rng)?;
    if next.len() != dst.len() {
        return Err(Error::Shape(format!("model state dimension {} but buffer of {}", next.len(), dst.len())).into());
    }
    dst.copy_from_slice(&next);
    Ok(())
}

// ---------------------------------------------------------------------------
// Stateless helpers

/// Places `n_samples` entropy-maximizing candidates around `n_known` points
/// inside the box `bounds` (`[low0, high0, low1, high1, ...]`).
///
/// # Safety
/// `known` holds `n_known * dim`, `bounds` `2 * dim`, `out_candidates`
/// `n_samples * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn cea_kde_optimize(
    known: *const f64,
    n_known: usize,
    dim: usize,
    bounds: *const f64,
    n_samples: usize,
    seed: u64,
    out_candidates: *mut f64,
) -> CeaStatus {
    guard(|| {
        check_dim(dim)?;
        let mut cfg = SamplerConfig::for_bounds(rows(view(bounds, 2 * dim, "bounds")?, 2).into_iter().map(|b| [b[0], b[1]]).collect());
        cfg.n_samples = n_samples;
        let known = rows(view(known, n_known * dim, "known")?, dim);
        let cands = optimize_candidates(&known, &cfg, &mut seeded(seed))?;
        let dst = view_mut(out_candidates, n_samples * dim, "out_candidates")?;
        for (chunk, c) in dst.chunks_mut(dim).zip(&cands) {
            chunk.copy_from_slice(c);
        }
        Ok(())
    })
}

/// Trapezoid entropy of the Gaussian KDE over `n` centers with bandwidth `h`.
///
/// # Safety
/// `centers` holds `n * dim`, `bounds` `2 * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn cea_kde_entropy(
    centers: *const f64,
    n: usize,
    dim: usize,
    bandwidth: f64,
    bounds: *const f64,
    grid_m: usize,
    out_entropy: *mut f64,
) -> CeaStatus {
    guard(|| {
        check_dim(dim)?;
        let mut cfg = SamplerConfig::for_bounds(rows(view(bounds, 2 * dim, "bounds")?, 2).into_iter().map(|b| [b[0], b[1]]).collect());
        cfg.grid_m = grid_m;
        cfg.validate()?;
        let model = KdeModel::of_points(rows(view(centers, n * dim, "centers")?, dim), bandwidth)?;
        out(out_entropy, "out_entropy", entropy(&model, &cfg)?)
    })
}

/// Exponential moving average of `n` values.
///
/// # Safety
/// `series` and `out_smoothed` must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn cea_ema_smooth(series: *const f64, n: usize, factor: f64, out_smoothed: *mut f64) -> CeaStatus {
    guard(|| {
        let s = ema_smooth(view(series, n, "series")?, factor)?;
        view_mut(out_smoothed, n, "out_smoothed")?.copy_from_slice(&s);
        Ok(())
    })
}

/// Closest-transition-pair matching under Euclidean distance. Writes up to
/// `n_cf` matches, closest first, and their count to `out_count`.
///
/// # Safety
/// `cf_next` holds `n_cf * dim`, `real_next` `n_real * dim`, `real_rewards`
/// `n_real` doubles; each output array holds `n_cf` elements.
#[no_mangle]
pub unsafe extern "C" fn cea_ctp_match(
    cf_next: *const f64,
    n_cf: usize,
    real_next: *const f64,
    real_rewards: *const f64,
    n_real: usize,
    dim: usize,
    threshold_ratio: f64,
    out_cf: *mut usize,
    out_real: *mut usize,
    out_distance: *mut f64,
    out_reward: *mut f64,
    out_count: *mut usize,
) -> CeaStatus {
    guard(|| {
        check_dim(dim)?;
        let cfg = CeaConfig { threshold_ratio, ..CeaConfig::default() };
        cfg.validate()?;
        let cf = rows(view(cf_next, n_cf * dim, "cf_next")?, dim);
        let real = rows(view(real_next, n_real * dim, "real_next")?, dim);
        let matches = ctp_match(&cf, &real, view(real_rewards, n_real, "real_rewards")?, &cfg)?;
        let (c, r) = (view_mut(out_cf, n_cf, "out_cf")?, view_mut(out_real, n_cf, "out_real")?);
        let (d, w) = (view_mut(out_distance, n_cf, "out_distance")?, view_mut(out_reward, n_cf, "out_reward")?);
        for (i, m) in matches.iter().enumerate() {
            c[i] = m.counterfactual;
            r[i] = m.real;
            d[i] = m.distance;
            w[i] = m.reward;
        }
        out(out_count, "out_count", matches.len())
    })
}

/// Runs an experiment described by TOML text, writes its output files and
/// returns the summary as a JSON string (free with [`cea_string_free`]).
///
/// # Safety
/// `config_toml` must be NUL-terminated; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn cea_run_experiment(config_toml: *const c_char, label: *const c_char, out_json: *mut *mut c_char) -> CeaStatus {
    guard(|| {
        let cfg = ExperimentConfig::from_toml_str(text(config_toml, "config_toml")?)?;
        let label = if label.is_null() { "experiment" } else { text(label, "label")? };
        let exp = run_experiment(&cfg, label)?;
        let json = serde_json::to_string(&exp.summary).map_err(Error::from)?;
        let c = CString::new(json).map_err(|_| Error::InvalidArgument("summary contains NUL".into()))?;
        out(out_json, "out_json", c.into_raw())
    })
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn cea_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
