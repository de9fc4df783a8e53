//! C ABI for the loss-landscape probe toolkit.
//!
//! Every entry point returns an [`LpStatus`]; `0` (`Ok`) means success and
//! anything else names the failure class, with a human-readable message
//! readable through [`lp_last_error_message`]. Handles ([`LpSuite`],
//! [`LpModel`]) are opaque pointers created by the constructors here and
//! released exactly once with the matching `*_free` function. All entry
//! points catch panics and turn them into [`LpStatus::Panic`] instead of
//! unwinding across the boundary.
//!
//! The scalar measure functions reproduce the exact seeded evaluation
//! batches of the core measurement pipeline, so their outputs match the
//! corresponding CSV columns of [`lp_measure_csv`] bit for bit.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use libc::c_char;

use lprobe::analysis::model_accuracy;
use lprobe::datagen::{
    default_manifest, derive_seed, suite_from_manifest, DomainSuite, SplitCounts,
    DEFAULT_GEN_SEED, DEFAULT_PROTOTYPES_SEED,
};
use lprobe::measures::{
    frobenius_distance, margin, measure_all, phi_alpha, phi_difference, reports_to_csv,
    sample_indices, AlphaSharpnessConfig, MeasureError, MeasureIdentity, SharpnessConfig,
    DEFAULT_MEASURE_SEED,
};
use lprobe::model::{init_model, Model, ModelSpec};
use lprobe::objectives::{train, Objective, ObjectiveError, TrainConfig};

// ---------------------------------------------------------------------------
// Status codes and the thread-local error message.
// ---------------------------------------------------------------------------

/// Result code of every API call. `Ok` is zero; everything else is an error.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// A configuration value or index was rejected.
    InvalidArgument = 3,
    /// Dataset generation, loading, or saving failed.
    DataError = 4,
    /// Model construction, loading, or saving failed.
    ModelError = 5,
    /// Training failed (divergence included).
    TrainError = 6,
    /// A measure could not be evaluated.
    MeasureError = 7,
    /// A caller-provided buffer was too small for the result.
    BufferTooSmall = 8,
    /// An internal panic was caught at the boundary.
    Panic = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_last_error(msg: &str) {
    LAST_ERROR.with(|e| {
        let mut slot = e.borrow_mut();
        slot.clear();
        // Interior NULs would truncate the C copy; make them visible instead.
        slot.extend(msg.chars().map(|c| if c == '\0' { '?' } else { c }));
    });
}

fn fail(status: LpStatus, msg: impl std::fmt::Display) -> LpStatus {
    set_last_error(&msg.to_string());
    status
}

fn objective_error(e: ObjectiveError) -> LpStatus {
    match e {
        ObjectiveError::BadConfig(_) => fail(LpStatus::InvalidArgument, e),
        _ => fail(LpStatus::TrainError, e),
    }
}

fn measure_error(e: MeasureError) -> LpStatus {
    match e {
        MeasureError::BadConfig(_) => fail(LpStatus::InvalidArgument, e),
        _ => fail(LpStatus::MeasureError, e),
    }
}

/// Copy the most recent error message on this thread into `buf` as a
/// NUL-terminated string, truncating if needed. Returns the full message
/// length in bytes (excluding the NUL), regardless of how much was copied;
/// call again with a larger buffer to get the whole message. A null `buf`
/// or zero `len` copies nothing.
///
/// # Safety
/// `buf`, when non-null, must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn lp_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| unsafe {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Release a string returned by this library (for example by
/// [`lp_measure_csv`]). Null is ignored.
///
/// # Safety
/// `s` must be a pointer previously returned by a function of this library
/// that documents this deallocator, and must not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn lp_string_free(s: *mut c_char) {
    if s.is_null() {
        return;
    }
    drop(CString::from_raw(s));
}

// ---------------------------------------------------------------------------
// Guards and argument helpers.
// ---------------------------------------------------------------------------

fn guard(f: impl FnOnce() -> LpStatus) -> LpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(LpStatus::Panic, "internal panic caught at the C boundary"),
    }
}

/// Borrow a non-null pointer argument or fail with `NullPointer`.
unsafe fn arg_ref<'a, T>(ptr: *const T, name: &str) -> Result<&'a T, LpStatus> {
    ptr.as_ref()
        .ok_or_else(|| fail(LpStatus::NullPointer, format!("{name} is null")))
}

unsafe fn arg_str<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, LpStatus> {
    if ptr.is_null() {
        return Err(fail(LpStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(LpStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn put<T>(ptr: *mut T, name: &str, value: T) -> Result<(), LpStatus> {
    if ptr.is_null() {
        return Err(fail(LpStatus::NullPointer, format!("{name} is null")));
    }
    std::ptr::write(ptr, value);
    Ok(())
}

macro_rules! try_status {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(status) => return status,
        }
    };
}

// ---------------------------------------------------------------------------
// Opaque handles.
// ---------------------------------------------------------------------------

/// Opaque handle to a generated domain suite.
pub struct LpSuite(DomainSuite);

/// Opaque handle to a trained or loaded classifier.
pub struct LpModel(Model);

// ---------------------------------------------------------------------------
// Mirrored configuration structs.
// ---------------------------------------------------------------------------

/// Training objective selector; used as the `objective` field of
/// [`LpTrainConfig`] and as the argument of [`lp_train_config_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpObjective {
    Baseline = 0,
    Sam = 1,
    Fisher = 2,
    Consistency = 3,
}

fn core_objective(code: u32) -> Result<Objective, LpStatus> {
    match code {
        0 => Ok(Objective::Baseline),
        1 => Ok(Objective::Sam),
        2 => Ok(Objective::Fisher),
        3 => Ok(Objective::Consistency),
        other => Err(fail(
            LpStatus::InvalidArgument,
            format!("unknown objective code {other} (expected 0..=3)"),
        )),
    }
}

/// Training hyperparameters. `objective` takes [`LpObjective`] values;
/// it is a plain integer so that arbitrary input can be rejected with a
/// status code instead of being undefined behavior.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LpTrainConfig {
    pub objective: u32,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// SAM perturbation radius; read only by the SAM objective.
    pub sam_rho: f64,
    /// Penalty weight; read only by the Fisher objective.
    pub fisher_lambda: f64,
    /// KL bridge weight; read only by the consistency objective.
    pub consistency_lambda: f64,
    /// Noise std of the second view; read only by the consistency objective.
    pub view_noise_sigma: f64,
}

impl LpTrainConfig {
    fn to_core(self) -> Result<TrainConfig, LpStatus> {
        let objective = core_objective(self.objective)?;
        Ok(TrainConfig {
            objective,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            seed: self.seed,
            sam_rho: self.sam_rho,
            fisher_lambda: self.fisher_lambda,
            consistency_lambda: self.consistency_lambda,
            view_noise_sigma: self.view_noise_sigma,
        })
    }

    fn from_core(cfg: &TrainConfig) -> Self {
        Self {
            objective: match cfg.objective {
                Objective::Baseline => 0,
                Objective::Sam => 1,
                Objective::Fisher => 2,
                Objective::Consistency => 3,
            },
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            learning_rate: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            seed: cfg.seed,
            sam_rho: cfg.sam_rho,
            fisher_lambda: cfg.fisher_lambda,
            consistency_lambda: cfg.consistency_lambda,
            view_noise_sigma: cfg.view_noise_sigma,
        }
    }
}

/// Difference-sharpness parameters, mirroring the core configuration.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LpSharpnessConfig {
    /// Per-tensor RMS multiplier of the Gaussian weight noise.
    pub noise_scale: f64,
    /// Gradient-ascent step coefficient.
    pub ascent_coeff: f64,
    /// Projection radius factor.
    pub radius_lambda: f64,
    /// Rows per seeded evaluation batch.
    pub batch_size: usize,
    pub seed: u64,
}

impl LpSharpnessConfig {
    fn to_core(self) -> SharpnessConfig {
        SharpnessConfig {
            noise_scale: self.noise_scale,
            ascent_coeff: self.ascent_coeff,
            radius_lambda: self.radius_lambda,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }
}

/// Alpha-sharpness search parameters, mirroring the core configuration.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LpAlphaConfig {
    /// Worst-case loss budget above the loss at the measured point.
    pub loss_target_offset: f64,
    /// Projected-ascent steps per feasibility probe.
    pub ascent_steps: usize,
    /// Bisection iterations over the radius.
    pub binary_search_iters: usize,
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    pub seed: u64,
}

impl LpAlphaConfig {
    fn to_core(self) -> AlphaSharpnessConfig {
        AlphaSharpnessConfig {
            loss_target_offset: self.loss_target_offset,
            ascent_steps: self.ascent_steps,
            binary_search_iters: self.binary_search_iters,
            alpha_lo: self.alpha_lo,
            alpha_hi: self.alpha_hi,
            seed: self.seed,
        }
    }
}

/// Write the default training configuration for `objective` (an
/// [`LpObjective`] value) into `out`.
///
/// # Safety
/// `out` must point to writable memory for one [`LpTrainConfig`].
#[no_mangle]
pub unsafe extern "C" fn lp_train_config_default(
    objective: u32,
    out: *mut LpTrainConfig,
) -> LpStatus {
    guard(|| unsafe {
        let obj = try_status!(core_objective(objective));
        let cfg = LpTrainConfig::from_core(&TrainConfig::defaults(obj, 0));
        try_status!(put(out, "out", cfg));
        LpStatus::Ok
    })
}

/// Write the default difference-sharpness configuration into `out`.
///
/// # Safety
/// `out` must point to writable memory for one [`LpSharpnessConfig`].
#[no_mangle]
pub unsafe extern "C" fn lp_sharpness_config_default(
    seed: u64,
    out: *mut LpSharpnessConfig,
) -> LpStatus {
    guard(|| unsafe {
        let c = SharpnessConfig::defaults(seed);
        let cfg = LpSharpnessConfig {
            noise_scale: c.noise_scale,
            ascent_coeff: c.ascent_coeff,
            radius_lambda: c.radius_lambda,
            batch_size: c.batch_size,
            seed: c.seed,
        };
        try_status!(put(out, "out", cfg));
        LpStatus::Ok
    })
}

/// Write the default alpha-sharpness configuration into `out`.
///
/// # Safety
/// `out` must point to writable memory for one [`LpAlphaConfig`].
#[no_mangle]
pub unsafe extern "C" fn lp_alpha_config_default(seed: u64, out: *mut LpAlphaConfig) -> LpStatus {
    guard(|| unsafe {
        let c = AlphaSharpnessConfig::defaults(seed);
        let cfg = LpAlphaConfig {
            loss_target_offset: c.loss_target_offset,
            ascent_steps: c.ascent_steps,
            binary_search_iters: c.binary_search_iters,
            alpha_lo: c.alpha_lo,
            alpha_hi: c.alpha_hi,
            seed: c.seed,
        };
        try_status!(put(out, "out", cfg));
        LpStatus::Ok
    })
}

/// The seed the default measurement configurations use.
#[no_mangle]
pub extern "C" fn lp_default_measure_seed() -> u64 {
    DEFAULT_MEASURE_SEED
}

// ---------------------------------------------------------------------------
// Suite lifecycle.
// ---------------------------------------------------------------------------

/// Generate the default suite: 3 classes, 16 input dimensions,
/// 2000/500/500 anchor samples, one anchor plus fourteen shifted domains.
///
/// # Safety
/// `out` must point to writable memory for one `LpSuite*`.
#[no_mangle]
pub unsafe extern "C" fn lp_suite_default(out: *mut *mut LpSuite) -> LpStatus {
    lp_suite_generate(0, 0, 0, 0, 0, DEFAULT_PROTOTYPES_SEED, DEFAULT_GEN_SEED, out)
}

/// Generate a suite with the default domain geometry but custom sizes.
/// Passing zero for any of `num_classes`, `input_dim`, `train`, `val`, or
/// `test` keeps that value at its default (3 / 16 / 2000 / 500 / 500).
///
/// # Safety
/// `out` must point to writable memory for one `LpSuite*`.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn lp_suite_generate(
    num_classes: usize,
    input_dim: usize,
    train: usize,
    val: usize,
    test: usize,
    prototypes_seed: u64,
    gen_seed: u64,
    out: *mut *mut LpSuite,
) -> LpStatus {
    guard(|| unsafe {
        let mut manifest = default_manifest(prototypes_seed, gen_seed);
        if num_classes > 0 {
            manifest.num_classes = num_classes;
        }
        if input_dim > 0 {
            manifest.input_dim = input_dim;
        }
        let defaults = SplitCounts {
            train: manifest.counts.train,
            val: manifest.counts.val,
            test: manifest.counts.test,
        };
        manifest.counts = SplitCounts {
            train: if train > 0 { train } else { defaults.train },
            val: if val > 0 { val } else { defaults.val },
            test: if test > 0 { test } else { defaults.test },
        };
        match suite_from_manifest(&manifest) {
            Ok(suite) => {
                try_status!(put(out, "out", Box::into_raw(Box::new(LpSuite(suite)))));
                LpStatus::Ok
            }
            Err(e) => fail(LpStatus::DataError, e),
        }
    })
}

/// Load a suite previously written by [`lp_suite_save`] from `dir`.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must point to writable
/// memory for one `LpSuite*`.
#[no_mangle]
pub unsafe extern "C" fn lp_suite_load(dir: *const c_char, out: *mut *mut LpSuite) -> LpStatus {
    guard(|| unsafe {
        let dir = try_status!(arg_str(dir, "dir"));
        match DomainSuite::load(Path::new(dir)) {
            Ok(suite) => {
                try_status!(put(out, "out", Box::into_raw(Box::new(LpSuite(suite)))));
                LpStatus::Ok
            }
            Err(e) => fail(LpStatus::DataError, e),
        }
    })
}

/// Write `suite` (manifest plus one CSV per split and domain) into `dir`,
/// creating it if needed.
///
/// # Safety
/// `suite` must be a live handle from this library; `dir` must be a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lp_suite_save(suite: *const LpSuite, dir: *const c_char) -> LpStatus {
    guard(|| unsafe {
        let suite = try_status!(arg_ref(suite, "suite"));
        let dir = try_status!(arg_str(dir, "dir"));
        match suite.0.save(Path::new(dir)) {
            Ok(()) => LpStatus::Ok,
            Err(e) => fail(LpStatus::DataError, e),
        }
    })
}

/// Release a suite handle. Null is ignored.
///
/// # Safety
/// `suite` must be a pointer returned by a suite constructor of this
/// library, not freed before.
#[no_mangle]
pub unsafe extern "C" fn lp_suite_free(suite: *mut LpSuite) {
    if suite.is_null() {
        return;
    }
    drop(Box::from_raw(suite));
}

/// Feature dimensionality of the suite.
///
/// # Safety
/// `suite` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lp_suite_input_dim(suite: *const LpSuite, out: *mut usize) -> LpStatus {
    guard(|| unsafe {
        let suite = try_status!(arg_ref(suite, "suite"));
        try_status!(put(out, "out", suite.0.input_dim));
        LpStatus::Ok
    })
}

/// Number of classes of the suite.
///
/// # Safety
/// `suite` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lp_suite_num_classes(suite: *const LpSuite, out: *mut usize) -> LpStatus {
    guard(|| unsafe {
        let suite = try_status!(arg_ref(suite, "suite"));
        try_status!(put(out, "out", suite.0.num_classes));
        LpStatus::Ok
    })
}

/// Number of shifted evaluation domains (the anchor is not counted).
///
/// # Safety
/// `suite` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lp_suite_num_domains(suite: *const LpSuite, out: *mut usize) -> LpStatus {
    guard(|| unsafe {
        let suite = try_status!(arg_ref(suite, "suite"));
        try_status!(put(out, "out", suite.0.shifted.len()));
        LpStatus::Ok
    })
}

/// Copy the name of shifted domain `index` into `buf` as a NUL-terminated
/// string. Fails with `BufferTooSmall` when `len` cannot hold it.
///
/// # Safety
/// `suite` must be a live handle; `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn lp_suite_domain_name(
    suite: *const LpSuite,
    index: usize,
    buf: *mut c_char,
    len: usize,
) -> LpStatus {
    guard(|| unsafe {
        let suite = try_status!(arg_ref(suite, "suite"));
        let Some(domain) = suite.0.shifted.get(index) else {
            return fail(
                LpStatus::InvalidArgument,
                format!(
                    "domain index {index} out of range (suite has {})",
                    suite.0.shifted.len()
                ),
            );
        };
        let name = domain.spec.name.as_bytes();
        if buf.is_null() {
            return fail(LpStatus::NullPointer, "buf is null");
        }
        if len < name.len() + 1 {
            return fail(
                LpStatus::BufferTooSmall,
                format!("need {} bytes, got {len}", name.len() + 1),
            );
        }
        std::ptr::copy_nonoverlapping(name.as_ptr(), buf.cast::<u8>(), name.len());
        *buf.add(name.len()) = 0;
        LpStatus::Ok
    })
}

// ---------------------------------------------------------------------------
// Model lifecycle.
// ---------------------------------------------------------------------------

/// Train a fresh model on the suite's anchor domain.
///
/// `hidden_dims`/`hidden_len` describe the hidden layer widths (`hidden_len`
/// of zero trains a linear model; `hidden_dims` may then be null). The
/// initialization is seeded by `init_seed`. When `best_val_accuracy` is
/// non-null it receives the best anchor-validation accuracy; the returned
/// model carries the weights of that best epoch.
///
/// # Safety
/// `suite` must be a live handle; `config` must point to a valid
/// [`LpTrainConfig`]; `hidden_dims`, when non-null, must point to
/// `hidden_len` readable values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lp_model_train(
    suite: *const LpSuite,
    config: *const LpTrainConfig,
    hidden_dims: *const usize,
    hidden_len: usize,
    init_seed: u64,
    best_val_accuracy: *mut f64,
    out: *mut *mut LpModel,
) -> LpStatus {
    guard(|| unsafe {
        let suite = try_status!(arg_ref(suite, "suite"));
        let config = try_status!(arg_ref(config, "config"));
        let cfg = try_status!(config.to_core());
        let hidden = if hidden_len == 0 {
            Vec::new()
        } else {
            if hidden_dims.is_null() {
                return fail(LpStatus::NullPointer, "hidden_dims is null");
            }
            std::slice::from_raw_parts(hidden_dims, hidden_len).to_vec()
        };
        let spec = ModelSpec {
            input_dim: suite.0.input_dim,
            hidden_dims: hidden,
            num_classes: suite.0.num_classes,
            init_seed,
        };
        let model = match init_model(&spec) {
            Ok(m) => m,
            Err(e) => return fail(LpStatus::ModelError, e),
        };
        match train(model, &suite.0.anchor, &cfg) {
            Ok(result) => {
                if !best_val_accuracy.is_null() {
                    std::ptr::write(best_val_accuracy, result.best_val_accuracy);
                }
                try_status!(put(out, "out", Box::into_raw(Box::new(LpModel(result.model)))));
                LpStatus::Ok
            }
            Err(e) => objective_error(e),
        }
    })
}

/// Load a model checkpoint written by [`lp_model_save`].
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lp_model_load(path: *const c_char, out: *mut *mut LpModel) -> LpStatus {
    guard(|| unsafe {
        let path = try_status!(arg_str(path, "path"));
        match Model::load_checkpoint(Path::new(path)) {
            Ok(model) => {
                try_status!(put(out, "out", Box::into_raw(Box::new(LpModel(model)))));
                LpStatus::Ok
            }
            Err(e) => fail(LpStatus::ModelError, e),
        }
    })
}

/// Save the model (architecture, current and initial weights) to `path`.
///
/// # Safety
/// `model` must be a live handle; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lp_model_save(model: *const LpModel, path: *const c_char) -> LpStatus {
    guard(|| unsafe {
        let model = try_status!(arg_ref(model, "model"));
        let path = try_status!(arg_str(path, "path"));
        match model.0.save_checkpoint(Path::new(path)) {
            Ok(()) => LpStatus::Ok,
            Err(e) => fail(LpStatus::ModelError, e),
        }
    })
}

/// Release a model handle. Null is ignored.
///
/// # Safety
/// `model` must be a pointer returned by a model constructor of this
/// library, not freed before.
#[no_mangle]
pub unsafe extern "C" fn lp_model_free(model: *mut LpModel) {
    if model.is_null() {
        return;
    }
    drop(Box::from_raw(model));
}

/// Total number of weights (including biases) of the model.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lp_model_param_count(model: *const LpModel, out: *mut usize) -> LpStatus {
    guard(|| unsafe {
        let model = try_status!(arg_ref(model, "model"));
        try_status!(put(out, "out", model.0.param_count()));
        LpStatus::Ok
    })
}

// ---------------------------------------------------------------------------
// Measures.
// ---------------------------------------------------------------------------

fn domain_eval(
    suite: &LpSuite,
    index: usize,
) -> Result<&lprobe::datagen::ShiftedDomain, LpStatus> {
    suite.0.shifted.get(index).ok_or_else(|| {
        fail(
            LpStatus::InvalidArgument,
            format!(
                "domain index {index} out of range (suite has {})",
                suite.0.shifted.len()
            ),
        )
    })
}

/// Zero-shot accuracy of the model on shifted domain `index`.
///
/// # Safety
/// `model` and `suite` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lp_model_domain_accuracy(
    model: *const LpModel,
    suite: *const LpSuite,
    index: usize,
    out: *mut f64,
) -> LpStatus {
    guard(|| unsafe {
        let model = try_status!(arg_ref(model, "model"));
        let suite = try_status!(arg_ref(suite, "suite"));
        let domain = try_status!(domain_eval(suite, index));
        match model_accuracy(&model.0, &domain.eval) {
            Ok(acc) => {
                try_status!(put(out, "out", acc));
                LpStatus::Ok
            }
            Err(e) => fail(LpStatus::MeasureError, e),
        }
    })
}

/// Mean classification margin of the model on shifted domain `index`.
///
/// # Safety
/// `model` and `suite` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lp_model_domain_margin(
    model: *const LpModel,
    suite: *const LpSuite,
    index: usize,
    out: *mut f64,
) -> LpStatus {
    guard(|| unsafe {
        let model = try_status!(arg_ref(model, "model"));
        let suite = try_status!(arg_ref(suite, "suite"));
        let domain = try_status!(domain_eval(suite, index));
        match margin(&model.0, &domain.eval) {
            Ok(m) => {
                try_status!(put(out, "out", m));
                LpStatus::Ok
            }
            Err(e) => measure_error(e),
        }
    })
}

/// Difference sharpness of the model on shifted domain `index`, evaluated
/// on the same seeded batch the CSV report uses for that domain.
///
/// # Safety
/// `model` and `suite` must be live handles; `config` must point to a valid
/// [`LpSharpnessConfig`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lp_model_phi_difference(
    model: *const LpModel,
    suite: *const LpSuite,
    index: usize,
    config: *const LpSharpnessConfig,
    out: *mut f64,
) -> LpStatus {
    guard(|| unsafe {
        let model = try_status!(arg_ref(model, "model"));
        let suite = try_status!(arg_ref(suite, "suite"));
        let config = try_status!(arg_ref(config, "config"));
        let cfg = config.to_core();
        let domain = try_status!(domain_eval(suite, index));
        let name = &domain.spec.name;
        let idx = sample_indices(
            domain.eval.len(),
            cfg.batch_size,
            derive_seed(cfg.seed, &format!("batch/{name}")),
        );
        let batch = domain.eval.batch(&idx);
        match phi_difference(&model.0, batch, &cfg) {
            Ok(phi) => {
                try_status!(put(out, "out", phi));
                LpStatus::Ok
            }
            Err(e) => measure_error(e),
        }
    })
}

/// Alpha sharpness of the model on the seeded anchor-validation batch the
/// CSV report uses. Writes the sharpness into `out_phi` and the selected
/// radius into `out_alpha` (both NaN on failure), and the failure flag into
/// `out_failed`; a failed search still returns `Ok`.
///
/// # Safety
/// `model` and `suite` must be live handles; `sharpness` and `alpha` must
/// point to valid configurations; the three out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn lp_model_phi_alpha(
    model: *const LpModel,
    suite: *const LpSuite,
    sharpness: *const LpSharpnessConfig,
    alpha: *const LpAlphaConfig,
    out_phi: *mut f64,
    out_alpha: *mut f64,
    out_failed: *mut bool,
) -> LpStatus {
    guard(|| unsafe {
        let model = try_status!(arg_ref(model, "model"));
        let suite = try_status!(arg_ref(suite, "suite"));
        let sharp_cfg = try_status!(arg_ref(sharpness, "sharpness")).to_core();
        let alpha_cfg = try_status!(arg_ref(alpha, "alpha")).to_core();
        let val = &suite.0.anchor.val;
        if val.is_empty() {
            return fail(LpStatus::MeasureError, "anchor validation split is empty");
        }
        let idx = sample_indices(
            val.len(),
            sharp_cfg.batch_size,
            derive_seed(sharp_cfg.seed, "anchor-batch"),
        );
        let batch = val.batch(&idx);
        match phi_alpha(&model.0, batch, &alpha_cfg) {
            Ok(outcome) => {
                try_status!(put(out_phi, "out_phi", outcome.phi.unwrap_or(f64::NAN)));
                try_status!(put(out_alpha, "out_alpha", outcome.alpha.unwrap_or(f64::NAN)));
                try_status!(put(out_failed, "out_failed", outcome.failed));
                LpStatus::Ok
            }
            Err(e) => measure_error(e),
        }
    })
}

/// Euclidean distance of the model's weights from their initialization.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lp_model_frobenius_distance(
    model: *const LpModel,
    out: *mut f64,
) -> LpStatus {
    guard(|| unsafe {
        let model = try_status!(arg_ref(model, "model"));
        try_status!(put(out, "out", frobenius_distance(&model.0)));
        LpStatus::Ok
    })
}

/// Measure the model across every shifted domain of the suite and return
/// the full report as a CSV string (header line included; identical to the
/// measurement CSV the command-line tool writes). The returned string must
/// be released with [`lp_string_free`]. `model_id` and `objective` label
/// the rows; `sweep` adds one sharpness column per candidate noise scale.
///
/// # Safety
/// `model` and `suite` must be live handles; `model_id` and `objective`
/// must be NUL-terminated strings; `sharpness` and `alpha` must point to
/// valid configurations; `out` must be writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn lp_measure_csv(
    model: *const LpModel,
    suite: *const LpSuite,
    model_id: *const c_char,
    objective: *const c_char,
    seed: u64,
    sharpness: *const LpSharpnessConfig,
    alpha: *const LpAlphaConfig,
    sweep: bool,
    out: *mut *mut c_char,
) -> LpStatus {
    guard(|| unsafe {
        let model = try_status!(arg_ref(model, "model"));
        let suite = try_status!(arg_ref(suite, "suite"));
        let model_id = try_status!(arg_str(model_id, "model_id"));
        let objective = try_status!(arg_str(objective, "objective"));
        let sharp_cfg = try_status!(arg_ref(sharpness, "sharpness")).to_core();
        let alpha_cfg = try_status!(arg_ref(alpha, "alpha")).to_core();
        let identity = MeasureIdentity {
            model_id: model_id.to_string(),
            objective: objective.to_string(),
            seed,
        };
        let outcome =
            match measure_all(&identity, &model.0, &suite.0, &sharp_cfg, &alpha_cfg, sweep) {
                Ok(o) => o,
                Err(e) => return measure_error(e),
            };
        if !outcome.row_errors.is_empty() {
            let detail: Vec<String> = outcome
                .row_errors
                .iter()
                .map(|(domain, err)| format!("{domain}: {err}"))
                .collect();
            return fail(
                LpStatus::MeasureError,
                format!("{} domain rows failed: {}", detail.len(), detail.join("; ")),
            );
        }
        let csv = reports_to_csv(&outcome.reports, sweep);
        match CString::new(csv) {
            Ok(s) => {
                try_status!(put(out, "out", s.into_raw()));
                LpStatus::Ok
            }
            Err(_) => fail(LpStatus::MeasureError, "report contains an interior NUL"),
        }
    })
}

#[cfg(test)]
mod tests;
