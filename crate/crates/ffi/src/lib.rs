//! C ABI over the `eigenclean` library.
//!
//! Every fallible function returns an [`EcStatus`]; on failure a message is
//! available from [`ec_last_error_message`] until the next call on the same
//! thread. Output buffers are caller-allocated. Matrices are `n × n`,
//! row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use eigenclean::gen::{self, GeneratorTag, MethodMix, SpectrumSketch};
use eigenclean::net::MlpModel;
use eigenclean::rie::{rie_clean, RieConfig};
use eigenclean::sampling::sample_spectrum_direct;
use eigenclean::{Error, Rng};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Numerical = 4,
    Io = 5,
    Parse = 6,
    Panic = 7,
}

/// Opaque handle to a trained model.
pub struct EcModel {
    inner: MlpModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> EcStatus {
    match e {
        Error::Precondition(_) | Error::Domain(_) => EcStatus::InvalidArgument,
        Error::DimensionMismatch { .. } => EcStatus::DimensionMismatch,
        Error::NoConvergence { .. }
        | Error::GivensNoConvergence { .. }
        | Error::Singular { .. }
        | Error::Pole(_)
        | Error::Divergence { .. } => EcStatus::Numerical,
        Error::Io(_) => EcStatus::Io,
        Error::Parse { .. } | Error::Checksum { .. } | Error::Json(_) => EcStatus::Parse,
    }
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), (EcStatus, String)>) -> EcStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EcStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            EcStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (EcStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (EcStatus, String) {
    (EcStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `p` must be null or point to `n` readable doubles.
unsafe fn input<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], (EcStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

/// # Safety
/// `p` must be null or point to `n` writable doubles.
unsafe fn output<'a>(p: *mut f64, n: usize, what: &str) -> Result<&'a mut [f64], (EcStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ec_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn ec_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a model file. On success `*out` owns a handle to release with
/// [`ec_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ec_model_load(path: *const c_char, out: *mut *mut EcModel) -> EcStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (EcStatus::InvalidArgument, "path is not valid UTF-8".to_string()))?;
        let inner = MlpModel::load(path).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(EcModel { inner }));
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`ec_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ec_model_free(model: *mut EcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input and output lengths of a model.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ec_model_dims(model: *const EcModel, input_dim: *mut usize, output_dim: *mut usize) -> EcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if input_dim.is_null() || output_dim.is_null() {
            return Err(null("output"));
        }
        *input_dim = m.inner.input_dim();
        *output_dim = m.inner.output_dim();
        Ok(())
    })
}

/// Cleans a sample spectrum of length `n` observed at noise ratio `q`,
/// writing `n` ascending values to `out`.
///
/// # Safety
/// `spectrum` and `out` must each hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn ec_model_clean(
    model: *const EcModel,
    spectrum: *const f64,
    n: usize,
    q: f64,
    rescale: bool,
    out: *mut f64,
) -> EcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let s = input(spectrum, n, "spectrum")?;
        let o = output(out, n, "out")?;
        let cleaned = m.inner.clean(s, q, rescale).map_err(lib_err)?;
        o.copy_from_slice(&cleaned.values);
        Ok(())
    })
}

/// Rotational invariant estimate for a sample spectrum of length `n` at
/// noise ratio `q`, written ascending to `out`.
///
/// # Safety
/// `spectrum` and `out` must each hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn ec_rie_clean(spectrum: *const f64, n: usize, q: f64, rescale: bool, out: *mut f64) -> EcStatus {
    guard(|| {
        let s = input(spectrum, n, "spectrum")?;
        let o = output(out, n, "out")?;
        let cfg = RieConfig {
            rescale,
            ..Default::default()
        };
        let cleaned = rie_clean(s, q, &cfg).map_err(lib_err)?;
        o.copy_from_slice(&cleaned.values);
        Ok(())
    })
}

/// Random correlation matrix with the given spectrum (nonnegative, summing
/// to `n`), written to `out_matrix`.
///
/// # Safety
/// `spectrum` must hold `n` doubles and `out_matrix` `n * n`.
#[no_mangle]
pub unsafe extern "C" fn ec_corr_with_spectrum(
    spectrum: *const f64,
    n: usize,
    seed: u64,
    out_matrix: *mut f64,
) -> EcStatus {
    guard(|| {
        let s = input(spectrum, n, "spectrum")?;
        let o = output(out_matrix, n * n, "out_matrix")?;
        let sketch = SpectrumSketch::new(s.to_vec()).map_err(lib_err)?;
        let c = gen::corr_with_spectrum(&sketch, &mut Rng::new(seed)).map_err(lib_err)?;
        o.iter_mut().zip(c.as_array().iter()).for_each(|(d, v)| *d = *v);
        Ok(())
    })
}

/// Random `n × n` correlation matrix from the generator mix. `mix_weights`
/// holds four weights (spectrum sketch, unit sphere, constant blocks,
/// Toeplitz blocks) or is null for the default mix. The generator used is
/// written to `out_tag` (0–3, same order) when non-null.
///
/// # Safety
/// `mix_weights` must be null or hold 4 doubles; `out_matrix` must hold
/// `n * n` doubles.
#[no_mangle]
pub unsafe extern "C" fn ec_random_corr(
    n: usize,
    mix_weights: *const f64,
    seed: u64,
    out_matrix: *mut f64,
    out_tag: *mut i32,
) -> EcStatus {
    guard(|| {
        let mix = if mix_weights.is_null() {
            MethodMix::default()
        } else {
            let w: [f64; 4] = input(mix_weights, 4, "mix_weights")?.try_into().expect("length 4");
            MethodMix::new(w).map_err(lib_err)?
        };
        let o = output(out_matrix, n * n, "out_matrix")?;
        let (c, tag) = gen::random_corr(n, &mix, &mut Rng::new(seed)).map_err(lib_err)?;
        o.iter_mut().zip(c.as_array().iter()).for_each(|(d, v)| *d = *v);
        if !out_tag.is_null() {
            *out_tag = GeneratorTag::ALL.iter().position(|t| *t == tag).expect("known tag") as i32;
        }
        Ok(())
    })
}

/// Sample eigenvalues from `t` observations of a population with the given
/// true spectrum, drawn without building the matrix; ascending in `out`.
///
/// # Safety
/// `spectrum` and `out` must each hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn ec_sample_spectrum_direct(
    spectrum: *const f64,
    n: usize,
    t: usize,
    seed: u64,
    out: *mut f64,
) -> EcStatus {
    guard(|| {
        let s = input(spectrum, n, "spectrum")?;
        let o = output(out, n, "out")?;
        let sketch = SpectrumSketch::new(s.to_vec()).map_err(lib_err)?;
        let sample = sample_spectrum_direct(&sketch, t, &mut Rng::new(seed)).map_err(lib_err)?;
        o.copy_from_slice(&sample);
        Ok(())
    })
}
