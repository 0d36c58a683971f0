//! C ABI for conformal-koopman.
//!
//! Objects cross the boundary as opaque handles that the caller frees with the
//! matching `*_free`. Matrices are dense row-major `double` arrays. Every
//! fallible call returns a [`CkStatus`]; the message of the last failure on the
//! calling thread is available through [`ck_last_error_message`].

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use conformal_koopman::conformal::{conformal_quantile, ScoreKind};
use conformal_koopman::controller::{crdr_step, nfc_input, synthesize_metric, ControllerSpec};
use conformal_koopman::harness::{self, pipeline::ControllerFile, pipeline::ModelFile, ExperimentConfig};
use conformal_koopman::lifting::LiftedModel;
use conformal_koopman::Error;
use nalgebra::{DMatrix, DVector};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CkStatus {
    CkOk = 0,
    CkErrNullPointer = 1,
    /// Bad argument, dimension mismatch or invalid configuration.
    CkErrInput = 2,
    /// Numerical, synthesis or solver failure.
    CkErrNumerical = 3,
    /// File missing, unreadable or malformed.
    CkErrIo = 4,
    CkErrBufferTooSmall = 5,
    CkErrPanic = 6,
}

/// Identified latent model loaded from a `model.json`.
pub struct CkModel {
    inner: LiftedModel,
}

/// Feedback gain, contraction metric and CRDR parameters.
pub struct CkController {
    spec: ControllerSpec,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CkControllerInfo {
    pub latent_dim: usize,
    pub input_dim: usize,
    pub gamma: f64,
    pub rho: f64,
    pub c_v: f64,
    pub m_bar: f64,
    pub m_under: f64,
    pub certificate: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(CkStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.exit_code() {
            2 => CkStatus::CkErrInput,
            4 => CkStatus::CkErrIo,
            _ => CkStatus::CkErrNumerical,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> CkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CkStatus::CkOk,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CkStatus::CkErrPanic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(CkStatus::CkErrNullPointer, format!("{what} is null"))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<Option<PathBuf>, Failure> {
    if p.is_null() {
        return Ok(None);
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(CkStatus::CkErrInput, format!("{what} is not valid UTF-8")))?;
    Ok(Some(PathBuf::from(s)))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Some)
        .map_err(|_| Failure(CkStatus::CkErrInput, format!("{what} is not valid UTF-8")))
}

fn write_out(dst: &mut [f64], src: &[f64], what: &str) -> Result<(), Failure> {
    if dst.len() != src.len() {
        return Err(Failure(
            CkStatus::CkErrBufferTooSmall,
            format!("{what}: buffer holds {}, need {}", dst.len(), src.len()),
        ));
    }
    dst.copy_from_slice(src);
    Ok(())
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Length in bytes, including the terminating NUL, of the last error message
/// on this thread; 0 when there is none.
#[no_mangle]
pub extern "C" fn ck_last_error_length() -> usize {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(0, |c| c.as_bytes_with_nul().len()))
}

/// Copies the last error message into `buf`. Returns `CK_ERR_BUFFER_TOO_SMALL`
/// when `len` is shorter than [`ck_last_error_length`].
///
/// # Safety
/// `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ck_last_error_message(buf: *mut c_char, len: usize) -> CkStatus {
    if buf.is_null() {
        return CkStatus::CkErrNullPointer;
    }
    LAST_ERROR.with(|slot| {
        let slot = slot.borrow();
        let bytes: &[u8] = slot.as_ref().map_or(b"\0", |c| c.as_bytes_with_nul());
        if bytes.len() > len {
            return CkStatus::CkErrBufferTooSmall;
        }
        ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, bytes.len());
        CkStatus::CkOk
    })
}

/// Loads a `model.json` written by `ckoop fit`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ck_model_load(path: *const c_char, out: *mut *mut CkModel) -> CkStatus {
    guard(|| {
        let path = path_arg(path, "path")?.ok_or_else(|| null("path"))?;
        let file = ModelFile::load(&path)?;
        put(out, CkModel { inner: file.model })
    })
}

/// # Safety
/// `model` must come from [`ck_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ck_model_free(model: *mut CkModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// Every pointer must be valid; output pointers may be null to skip them.
#[no_mangle]
pub unsafe extern "C" fn ck_model_dims(
    model: *const CkModel,
    state_dim: *mut usize,
    latent_dim: *mut usize,
    input_dim: *mut usize,
) -> CkStatus {
    guard(|| {
        let m = &handle(model, "model")?.inner;
        for (p, v) in [(state_dim, m.state_dim()), (latent_dim, m.latent_dim()), (input_dim, m.input_dim())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Writes the lifted state of `x` into `z_out` (`z_len` must equal the latent dimension).
///
/// # Safety
/// `x` must hold `x_len` doubles and `z_out` `z_len`.
#[no_mangle]
pub unsafe extern "C" fn ck_model_lift(
    model: *const CkModel,
    x: *const f64,
    x_len: usize,
    z_out: *mut f64,
    z_len: usize,
) -> CkStatus {
    guard(|| {
        let m = &handle(model, "model")?.inner;
        let z = m.lift(slice(x, x_len, "x")?)?;
        write_out(slice_mut(z_out, z_len, "z_out")?, z.as_slice(), "lift")
    })
}

/// # Safety
/// `z` must hold `z_len` doubles and `x_out` `x_len`.
#[no_mangle]
pub unsafe extern "C" fn ck_model_decode(
    model: *const CkModel,
    z: *const f64,
    z_len: usize,
    x_out: *mut f64,
    x_len: usize,
) -> CkStatus {
    guard(|| {
        let m = &handle(model, "model")?.inner;
        let x = m.decode(&DVector::from_column_slice(slice(z, z_len, "z")?))?;
        write_out(slice_mut(x_out, x_len, "x_out")?, x.as_slice(), "decode")
    })
}

/// One latent step `A z + B u`; `z_next` has the length of `z`.
///
/// # Safety
/// `z` and `z_next` must hold `z_len` doubles, `u` `u_len`.
#[no_mangle]
pub unsafe extern "C" fn ck_model_predict(
    model: *const CkModel,
    z: *const f64,
    z_len: usize,
    u: *const f64,
    u_len: usize,
    z_next: *mut f64,
) -> CkStatus {
    guard(|| {
        let m = &handle(model, "model")?.inner;
        let zn = m.predict(&DVector::from_column_slice(slice(z, z_len, "z")?), slice(u, u_len, "u")?)?;
        write_out(slice_mut(z_next, z_len, "z_next")?, zn.as_slice(), "predict")
    })
}

/// Synthesizes gain and metric for `(A, B)` with contraction rate `gamma`,
/// then attaches the CRDR margin `rho` and slack weight `c_v`.
/// `a` is `n×n`, `b` is `n×m`, both row-major.
///
/// # Safety
/// `a` must hold `n*n` doubles, `b` `n*m`, `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ck_controller_synthesize(
    a: *const f64,
    b: *const f64,
    n: usize,
    m: usize,
    gamma: f64,
    rho: f64,
    c_v: f64,
    out: *mut *mut CkController,
) -> CkStatus {
    guard(|| {
        if n == 0 || m == 0 {
            return Err(Failure(CkStatus::CkErrInput, "n and m must be positive".into()));
        }
        let a = DMatrix::from_row_slice(n, n, slice(a, n * n, "a")?);
        let b = DMatrix::from_row_slice(n, m, slice(b, n * m, "b")?);
        let spec = synthesize_metric(&a, &b, gamma, &DMatrix::identity(n, n))?.with_crdr_params(rho, c_v)?;
        put(out, CkController { spec })
    })
}

/// Loads a `controller.json` written by `ckoop synth`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ck_controller_load(path: *const c_char, out: *mut *mut CkController) -> CkStatus {
    guard(|| {
        let path = path_arg(path, "path")?.ok_or_else(|| null("path"))?;
        let file = ControllerFile::load(&path)?;
        put(out, CkController { spec: file.spec })
    })
}

/// # Safety
/// `controller` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ck_controller_free(controller: *mut CkController) {
    if !controller.is_null() {
        drop(Box::from_raw(controller));
    }
}

/// # Safety
/// Both pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ck_controller_info(controller: *const CkController, info: *mut CkControllerInfo) -> CkStatus {
    guard(|| {
        let s = &handle(controller, "controller")?.spec;
        if info.is_null() {
            return Err(null("info"));
        }
        *info = CkControllerInfo {
            latent_dim: s.latent_dim(),
            input_dim: s.input_dim(),
            gamma: s.gamma,
            rho: s.rho,
            c_v: s.c_v,
            m_bar: s.m_bar,
            m_under: s.m_under,
            certificate: s.certificate,
        };
        Ok(())
    })
}

/// Copies the `m×n` gain row-major into `k_out` (`len` must be `m*n`).
///
/// # Safety
/// `k_out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ck_controller_gain(controller: *const CkController, k_out: *mut f64, len: usize) -> CkStatus {
    guard(|| {
        let k = &handle(controller, "controller")?.spec.k;
        let rows: Vec<f64> = k.transpose().iter().copied().collect();
        write_out(slice_mut(k_out, len, "k_out")?, &rows, "gain")
    })
}

/// Nominal feedback `u = u_d − K e`.
///
/// # Safety
/// `u_d` and `u_out` must hold `u_len` doubles, `e` `e_len`.
#[no_mangle]
pub unsafe extern "C" fn ck_nfc_input(
    controller: *const CkController,
    u_d: *const f64,
    u_len: usize,
    e: *const f64,
    e_len: usize,
    u_out: *mut f64,
) -> CkStatus {
    guard(|| {
        let spec = &handle(controller, "controller")?.spec;
        let u = nfc_input(
            spec,
            &DVector::from_column_slice(slice(u_d, u_len, "u_d")?),
            &DVector::from_column_slice(slice(e, e_len, "e")?),
        )?;
        write_out(slice_mut(u_out, u_len, "u_out")?, u.as_slice(), "nfc")
    })
}

/// One CRDR step on the latent error `e` using the model's `(A, B)`.
/// `delta_v` may be null.
///
/// # Safety
/// `u_d` and `u_out` must hold `u_len` doubles, `e` `e_len`.
#[no_mangle]
pub unsafe extern "C" fn ck_crdr_step(
    controller: *const CkController,
    model: *const CkModel,
    u_d: *const f64,
    u_len: usize,
    e: *const f64,
    e_len: usize,
    u_out: *mut f64,
    delta_v: *mut f64,
) -> CkStatus {
    guard(|| {
        let spec = &handle(controller, "controller")?.spec;
        let m = &handle(model, "model")?.inner;
        let sol = crdr_step(
            spec,
            &m.a,
            &m.b,
            &DVector::from_column_slice(slice(e, e_len, "e")?),
            &DVector::from_column_slice(slice(u_d, u_len, "u_d")?),
        )?;
        write_out(slice_mut(u_out, u_len, "u_out")?, sol.u.as_slice(), "crdr")?;
        if !delta_v.is_null() {
            *delta_v = sol.delta_v;
        }
        Ok(())
    })
}

/// Split-conformal quantile at miscoverage `delta`. `q_out` is `+inf` when
/// there are too few scores; `k_out` (nullable) receives the order-statistic index.
///
/// # Safety
/// `scores` must hold `len` doubles and `q_out` be valid.
#[no_mangle]
pub unsafe extern "C" fn ck_conformal_quantile(
    scores: *const f64,
    len: usize,
    delta: f64,
    q_out: *mut f64,
    k_out: *mut usize,
) -> CkStatus {
    guard(|| {
        if q_out.is_null() {
            return Err(null("q_out"));
        }
        let r = conformal_quantile(slice(scores, len, "scores")?, delta, ScoreKind::RoundTrip)?;
        *q_out = r.q;
        if !k_out.is_null() {
            *k_out = r.k_index;
        }
        Ok(())
    })
}

/// Runs every pipeline stage. `config_path`, `preset` and `out_dir` may be
/// null; the defaults are the `dubins-paper` preset and `out/`.
///
/// # Safety
/// Non-null strings must be NUL-terminated. `passed` may be null.
#[no_mangle]
pub unsafe extern "C" fn ck_pipeline_all(
    config_path: *const c_char,
    preset: *const c_char,
    out_dir: *const c_char,
    passed: *mut bool,
) -> CkStatus {
    guard(|| {
        let preset = str_arg(preset, "preset")?;
        let mut cfg = match path_arg(config_path, "config_path")? {
            Some(p) => ExperimentConfig::load(&p, preset)?,
            None => ExperimentConfig::preset(preset.unwrap_or("dubins-paper"))?,
        };
        if let Some(out) = path_arg(out_dir, "out_dir")? {
            cfg.report.out_dir = out;
        }
        cfg.validate()?;
        let summary = harness::all(&cfg)?;
        if !passed.is_null() {
            *passed = summary.pass;
        }
        Ok(())
    })
}
