//! C ABI over the spectral-moe layer.
//!
//! Layers are opaque `SmLayer` handles created by `sm_layer_new` or
//! `sm_layer_load` and released with `sm_layer_free`. Every fallible call
//! returns an `SmStatus`; on failure `sm_last_error` holds a message for the
//! calling thread. Matrices cross the boundary as row-major `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use spectral_moe::layer::{self, AdapterInit, LayerConfig, ScaleSetting, SpectralMoeLayer};
use spectral_moe::{checkpoint, routing, Error, Matrix, Vector};

/// Result codes. `SM_OK` is zero; every other value is an error.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmStatus {
    SmOk = 0,
    SmInvalidInput = 1,
    SmNumericalFailure = 2,
    SmInsufficientRank = 3,
    SmDegenerateSegment = 4,
    SmTrainingDiverged = 5,
    SmSchema = 6,
    SmIo = 7,
    SmNullPointer = 8,
    SmPanic = 9,
}

/// Expert initialization.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmInit {
    SmInitSpectral = 0,
    SmInitZero = 1,
}

/// Layer construction options; start from `sm_layer_options_default`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmLayerOptions {
    /// Output dimension.
    pub m: usize,
    /// Input dimension.
    pub n: usize,
    pub total_rank: usize,
    pub n_experts: usize,
    pub top_k: usize,
    /// Layer scale; zero, negative or NaN selects `sqrt(3 n eta / r)`.
    pub scale: f64,
    pub rho: f64,
    pub eta: f64,
    pub init: SmInit,
    pub router_std: f64,
}

/// Opaque layer handle.
pub struct SmLayer {
    inner: SpectralMoeLayer,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> SmStatus {
    match err {
        Error::InvalidInput(_) => SmStatus::SmInvalidInput,
        Error::NumericalFailure(_) => SmStatus::SmNumericalFailure,
        Error::InsufficientRank { .. } => SmStatus::SmInsufficientRank,
        Error::DegenerateSegment { .. } => SmStatus::SmDegenerateSegment,
        Error::TrainingDiverged { .. } => SmStatus::SmTrainingDiverged,
        Error::Schema(_) => SmStatus::SmSchema,
        Error::Io { .. } => SmStatus::SmIo,
    }
}

enum Failure {
    Core(Error),
    Null(&'static str),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

/// Runs `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SmStatus::SmOk
        }
        Ok(Err(Failure::Core(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Null(name))) => {
            set_last_error(format!("{name} is null"));
            SmStatus::SmNullPointer
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            SmStatus::SmPanic
        }
    }
}

unsafe fn input<'a>(data: *const f64, len: usize, name: &'static str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return Err(Failure::Null(name));
    }
    Ok(slice::from_raw_parts(data, len))
}

unsafe fn output<'a>(data: *mut f64, len: usize, name: &'static str) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if data.is_null() {
        return Err(Failure::Null(name));
    }
    Ok(slice::from_raw_parts_mut(data, len))
}

unsafe fn layer_ref<'a>(layer: *const SmLayer) -> Result<&'a SpectralMoeLayer, Failure> {
    layer.as_ref().map(|l| &l.inner).ok_or(Failure::Null("layer"))
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a Path, Failure> {
    if path.is_null() {
        return Err(Failure::Null("path"));
    }
    let text = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| Error::InvalidInput("path is not valid UTF-8".into()))?;
    Ok(Path::new(text))
}

fn check_len(name: &str, got: usize, expected: usize) -> Result<(), Failure> {
    if got != expected {
        return Err(Error::InvalidInput(format!("{name} has length {got}, expected {expected}")).into());
    }
    Ok(())
}

fn write_matrix(w: &Matrix, out: &mut [f64]) {
    let cols = w.ncols();
    for (i, row) in out.chunks_mut(cols).enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = w[(i, j)];
        }
    }
}

unsafe fn store(out: *mut *mut SmLayer, inner: SpectralMoeLayer) {
    *out = Box::into_raw(Box::new(SmLayer { inner }));
}

/// Options for an `m x n` layer with default scale, damping and router spread.
#[no_mangle]
pub extern "C" fn sm_layer_options_default(
    m: usize,
    n: usize,
    total_rank: usize,
    n_experts: usize,
    top_k: usize,
) -> SmLayerOptions {
    let c = LayerConfig::new(m, n, total_rank, n_experts, top_k);
    SmLayerOptions {
        m,
        n,
        total_rank,
        n_experts,
        top_k,
        scale: 0.0,
        rho: c.rho,
        eta: c.eta,
        init: SmInit::SmInitSpectral,
        router_std: c.router_std,
    }
}

fn layer_config(o: &SmLayerOptions) -> LayerConfig {
    let scale = if o.scale > 0.0 { ScaleSetting::Fixed(o.scale) } else { ScaleSetting::Auto };
    let init = match o.init {
        SmInit::SmInitSpectral => AdapterInit::Spectral,
        SmInit::SmInitZero => AdapterInit::Zero,
    };
    let mut c = LayerConfig::new(o.m, o.n, o.total_rank, o.n_experts, o.top_k)
        .with_scale(scale)
        .with_init(init)
        .with_rho(o.rho);
    c.eta = o.eta;
    c.router_std = o.router_std;
    c
}

/// Builds a layer from the row-major `m x n` pretrained weight `w0`.
///
/// # Safety
/// `options` must point to a valid `SmLayerOptions`, `w0` to `w0_len`
/// readable doubles, and `out` to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn sm_layer_new(
    options: *const SmLayerOptions,
    w0: *const f64,
    w0_len: usize,
    seed: u64,
    out: *mut *mut SmLayer,
) -> SmStatus {
    guard(|| {
        let options = options.as_ref().ok_or(Failure::Null("options"))?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        check_len("w0", w0_len, options.m * options.n)?;
        let data = input(w0, w0_len, "w0")?;
        let w = Matrix::from_row_slice(options.m, options.n, data);
        store(out, layer::init_layer(&w, &layer_config(options), seed)?);
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `layer` must be null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn sm_layer_free(layer: *mut SmLayer) {
    if !layer.is_null() {
        drop(Box::from_raw(layer));
    }
}

/// Writes the output and input dimensions, expert count and resolved scale.
/// Any output pointer may be null.
///
/// # Safety
/// `layer` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn sm_layer_shape(
    layer: *const SmLayer,
    m: *mut usize,
    n: *mut usize,
    n_experts: *mut usize,
    scale: *mut f64,
) -> SmStatus {
    guard(|| {
        let l = layer_ref(layer)?;
        if let Some(m) = m.as_mut() {
            *m = l.config.m;
        }
        if let Some(n) = n.as_mut() {
            *n = l.config.n;
        }
        if let Some(e) = n_experts.as_mut() {
            *e = l.n_experts();
        }
        if let Some(s) = scale.as_mut() {
            *s = l.scale;
        }
        Ok(())
    })
}

/// Number of trainable parameters (experts plus router).
///
/// # Safety
/// `layer` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_layer_trainable_params(layer: *const SmLayer, out: *mut usize) -> SmStatus {
    guard(|| {
        let l = layer_ref(layer)?;
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        *out = l.trainable_parameter_count();
        Ok(())
    })
}

/// Forward pass `y = W(x) x`. `gate_weights` may be null; otherwise it
/// receives the renormalized top-k weights, one per expert.
///
/// # Safety
/// Buffers must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn sm_layer_forward(
    layer: *const SmLayer,
    x: *const f64,
    x_len: usize,
    y: *mut f64,
    y_len: usize,
    gate_weights: *mut f64,
    gate_len: usize,
) -> SmStatus {
    guard(|| {
        let l = layer_ref(layer)?;
        check_len("x", x_len, l.config.n)?;
        check_len("y", y_len, l.config.m)?;
        let x = Vector::from_column_slice(input(x, x_len, "x")?);
        let (out, gate) = l.forward(&x)?;
        output(y, y_len, "y")?.copy_from_slice(out.as_slice());
        if !gate_weights.is_null() {
            check_len("gate_weights", gate_len, l.n_experts())?;
            output(gate_weights, gate_len, "gate_weights")?.copy_from_slice(gate.weights.as_slice());
        }
        Ok(())
    })
}

/// Row-major `m x n` equivalent weight for input `x`.
///
/// # Safety
/// Buffers must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn sm_layer_equivalent_weight(
    layer: *const SmLayer,
    x: *const f64,
    x_len: usize,
    w: *mut f64,
    w_len: usize,
) -> SmStatus {
    guard(|| {
        let l = layer_ref(layer)?;
        check_len("x", x_len, l.config.n)?;
        check_len("w", w_len, l.config.m * l.config.n)?;
        let x = Vector::from_column_slice(input(x, x_len, "x")?);
        write_matrix(&l.equivalent_weight(&x)?, output(w, w_len, "w")?);
        Ok(())
    })
}

/// Row-major `m x n` pretrained weight recovered from the frozen base and
/// residual.
///
/// # Safety
/// `w` must hold `w_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sm_layer_pretrained_weight(layer: *const SmLayer, w: *mut f64, w_len: usize) -> SmStatus {
    guard(|| {
        let l = layer_ref(layer)?;
        check_len("w", w_len, l.config.m * l.config.n)?;
        write_matrix(&l.pretrained_weight(), output(w, w_len, "w")?);
        Ok(())
    })
}

/// Writes a bit-exact JSON checkpoint.
///
/// # Safety
/// `layer` must be a live handle and `path` a NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn sm_layer_save(layer: *const SmLayer, path: *const c_char) -> SmStatus {
    guard(|| {
        let l = layer_ref(layer)?;
        checkpoint::save(l, path_arg(path)?)?;
        Ok(())
    })
}

/// Restores a layer written by `sm_layer_save`.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_layer_load(path: *const c_char, out: *mut *mut SmLayer) -> SmStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        store(out, checkpoint::load(path_arg(path)?)?);
        Ok(())
    })
}

/// The scale `sqrt(3 n eta / r)`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sm_optimal_scale(n: usize, rank: usize, eta: f64, out: *mut f64) -> SmStatus {
    guard(|| {
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        *out = layer::optimal_scale(n, rank, eta)?;
        Ok(())
    })
}

/// Per-expert mean and variance of top-k gate weights under exchangeable
/// routing.
///
/// # Safety
/// `mean` and `variance` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sm_gate_moments(
    n_experts: usize,
    top_k: usize,
    mean: *mut f64,
    variance: *mut f64,
) -> SmStatus {
    guard(|| {
        let mean = mean.as_mut().ok_or(Failure::Null("mean"))?;
        let variance = variance.as_mut().ok_or(Failure::Null("variance"))?;
        (*mean, *variance) = routing::theoretical_moments(n_experts, top_k)?;
        Ok(())
    })
}

/// Message for the last failed call on this thread, or null after a
/// successful one. Valid until the next call into this library.
#[no_mangle]
pub extern "C" fn sm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
