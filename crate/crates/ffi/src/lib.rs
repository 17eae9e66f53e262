//! C ABI for the activetrack engine.
//!
//! Every function returns an [`AtStatus`]. On failure the message is kept in
//! a thread-local slot readable with [`at_last_error_message`]. Panics never
//! cross the boundary; they surface as [`AtStatus::Panic`].
//!
//! Matrices are row-major `n × dim` arrays of `double`.

use std::cell::RefCell;
use std::ffi::{c_char, c_void};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use activetrack::fisher_design::{optimize_design, DesignConfig, SamplePool};
use activetrack::models::{
    AnyModel, Feature, Label, LogisticMfModel, LogisticModel, ParamDomain, ParamVec, RegressionModel,
};
use activetrack::sampling::LabelSource;
use activetrack::session::{Policy, SamplingMode, Session, SessionConfig};
use activetrack::solver::{bound_b, select_sample_size, BoundParams};
use activetrack::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    SizeMismatch = 3,
    SingularInformation = 4,
    DegenerateDesign = 5,
    BudgetExhausted = 6,
    NumericalDivergence = 7,
    Io = 8,
    Parse = 9,
    LabelCallbackFailed = 10,
    Panic = 11,
}

/// Likelihood model selector.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AtModelKind {
    Regression = 0,
    Logistic = 1,
    LogisticMf = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AtPolicy {
    ActiveAdaptive = 0,
    PassiveAdaptive = 1,
    ActiveRandom = 2,
    PassiveRandom = 3,
}

/// Session settings. Start from [`at_session_config_default`].
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct AtSessionConfig {
    pub model: AtModelKind,
    pub dim: usize,
    /// Regression label-noise variance; ignored by the logistic models.
    pub noise_var: f64,
    pub policy: AtPolicy,
    pub eps: f64,
    pub alpha: f64,
    pub c1: f64,
    pub c2: f64,
    /// Diameter of the parameter ball centered at the origin.
    pub diameter: f64,
    pub window: usize,
    /// Label cap per step; 0 means ten times the pool size.
    pub k_cap: usize,
    /// Nonzero selects top-K sampling without replacement.
    pub top_k: i32,
    pub seed: u64,
}

/// Per-step summary. Unavailable quantities are NaN.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct AtStepReport {
    pub t: usize,
    pub k: usize,
    pub rho_hat: f64,
    pub m_hat: f64,
    pub lb_hat: f64,
    pub design_objective: f64,
    pub weighted_risk: f64,
}

/// Label oracle: writes the label of pool element `index` (features `x`,
/// length `dim`) at step `t` into `out` and returns 0, or nonzero on failure.
pub type AtLabelFn =
    Option<unsafe extern "C" fn(user: *mut c_void, t: usize, index: usize, x: *const f64, dim: usize, out: *mut f64) -> i32>;

/// Opaque sequential-learning session.
pub struct AtSession {
    // Declared first so it drops before the model it borrows.
    session: Session<'static, AnyModel>,
    model: *mut AnyModel,
}

impl Drop for AtSession {
    fn drop(&mut self) {
        // SAFETY: `model` came from `Box::into_raw` in `at_session_new`, and
        // the session borrowing it has already been dropped.
        unsafe { drop(Box::from_raw(self.model)) };
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> AtStatus {
    match err {
        Error::InvalidArgument(_) => AtStatus::InvalidArgument,
        Error::SizeMismatch { .. } => AtStatus::SizeMismatch,
        Error::SingularInformation => AtStatus::SingularInformation,
        Error::DegenerateDesign => AtStatus::DegenerateDesign,
        Error::BudgetExhausted { .. } => AtStatus::BudgetExhausted,
        Error::NumericalDivergence { .. } => AtStatus::NumericalDivergence,
        Error::Io { .. } => AtStatus::Io,
        Error::Parse { .. } => AtStatus::Parse,
    }
}

struct Failure(AtStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AtStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            AtStatus::Panic
        }
    }
}

fn null() -> Failure {
    Failure(AtStatus::NullPointer, "null pointer argument".into())
}

fn invalid(msg: &str) -> Failure {
    Failure(AtStatus::InvalidArgument, msg.into())
}

/// # Safety
/// `p` must be null or valid for `len` reads.
unsafe fn slice_in<'a>(p: *const f64, len: usize) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null());
    }
    Ok(unsafe { slice::from_raw_parts(p, len) })
}

fn pool_from(features: &[f64], n: usize, dim: usize, t: usize) -> Result<SamplePool, Failure> {
    if n == 0 || dim == 0 {
        return Err(invalid("pool size and dimension must be positive"));
    }
    let rows = features.chunks_exact(dim).map(Feature::from_slice).collect();
    Ok(SamplePool::new(rows, t)?)
}

fn build_model(kind: AtModelKind, dim: usize, noise_var: f64) -> activetrack::Result<AnyModel> {
    Ok(match kind {
        AtModelKind::Regression => AnyModel::Regression(RegressionModel::new(dim, noise_var)?),
        AtModelKind::Logistic => AnyModel::Logistic(LogisticModel::new(dim)?),
        AtModelKind::LogisticMf => AnyModel::LogisticMf(LogisticMfModel::new(dim)?),
    })
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len − 1` bytes) and returns the full message length.
///
/// # Safety
/// `buf` must be null or valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn at_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            unsafe {
                ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
                *buf.add(n) = 0;
            }
        }
        msg.len()
    })
}

/// Evaluates `c1·tau_sq/k + c2·(delta/k)²`.
///
/// # Safety
/// `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn at_bound_b(tau_sq: f64, delta: f64, k: usize, c1: f64, c2: f64, out: *mut f64) -> AtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        if k == 0 || !(tau_sq >= 0.0) || !(delta >= 0.0) {
            return Err(invalid("need k >= 1 and nonnegative tau_sq, delta"));
        }
        let p = BoundParams::new(c1, c2)?;
        unsafe { *out = bound_b(tau_sq, delta, k, &p) };
        Ok(())
    })
}

/// Smallest budget meeting the target excess risk `eps`.
///
/// # Safety
/// `out_k` must be valid for one write.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn at_select_sample_size(
    dim: usize,
    eps: f64,
    m_hat: f64,
    rho_hat: f64,
    c1: f64,
    c2: f64,
    cap: usize,
    out_k: *mut usize,
) -> AtStatus {
    guard(|| {
        if out_k.is_null() {
            return Err(null());
        }
        let p = BoundParams::new(c1, c2)?;
        let k = select_sample_size(dim, eps, m_hat, rho_hat, &p, cap)?;
        unsafe { *out_k = k };
        Ok(())
    })
}

/// Optimizes the sampling design over a pool at reference point `theta`.
///
/// # Safety
/// `features` must hold `n·dim` values, `theta` `dim` values and
/// `out_weights` room for `n`; `out_objective` may be null.
#[no_mangle]
pub unsafe extern "C" fn at_optimize_design(
    model: AtModelKind,
    dim: usize,
    features: *const f64,
    n: usize,
    theta: *const f64,
    out_weights: *mut f64,
    out_objective: *mut f64,
) -> AtStatus {
    guard(|| {
        let feats = unsafe { slice_in(features, n.checked_mul(dim).ok_or_else(|| invalid("size overflow"))?)? };
        let theta = unsafe { slice_in(theta, dim)? };
        if out_weights.is_null() {
            return Err(null());
        }
        let m = build_model(model, dim, RegressionModel::DEFAULT_NOISE_VAR)?;
        let pool = pool_from(feats, n, dim, 0)?;
        let sol = optimize_design(&m, &pool, &ParamVec::from_slice(theta), &DesignConfig::default())?;
        let out = unsafe { slice::from_raw_parts_mut(out_weights, n) };
        out.copy_from_slice(sol.dist.weights());
        if !out_objective.is_null() {
            unsafe { *out_objective = sol.objective };
        }
        Ok(())
    })
}

/// Default settings: active-adaptive regression with `eps = 1`.
#[no_mangle]
pub extern "C" fn at_session_config_default(dim: usize) -> AtSessionConfig {
    AtSessionConfig {
        model: AtModelKind::Regression,
        dim,
        noise_var: RegressionModel::DEFAULT_NOISE_VAR,
        policy: AtPolicy::ActiveAdaptive,
        eps: 1.0,
        alpha: 0.9,
        c1: BoundParams::default().c1,
        c2: BoundParams::default().c2,
        diameter: 200.0,
        window: 3,
        k_cap: 0,
        top_k: 0,
        seed: 0,
    }
}

/// Creates a session; free it with [`at_session_free`].
///
/// # Safety
/// `cfg` must point to a valid config and `out` be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn at_session_new(cfg: *const AtSessionConfig, out: *mut *mut AtSession) -> AtStatus {
    guard(|| {
        if cfg.is_null() || out.is_null() {
            return Err(null());
        }
        let c = unsafe { *cfg };
        let model = build_model(c.model, c.dim, c.noise_var)?;
        let policy = match c.policy {
            AtPolicy::ActiveAdaptive => Policy::ActiveAdaptive,
            AtPolicy::PassiveAdaptive => Policy::PassiveAdaptive,
            AtPolicy::ActiveRandom => Policy::ActiveRandom,
            AtPolicy::PassiveRandom => Policy::PassiveRandom,
        };
        let mut sc = SessionConfig::new(ParamDomain::centered(c.dim, c.diameter)?, c.eps, usize::MAX, c.seed);
        sc.alpha = c.alpha;
        sc.bound = BoundParams::new(c.c1, c.c2)?;
        sc.drift.window = c.window;
        sc.k_cap = (c.k_cap > 0).then_some(c.k_cap);
        if c.top_k != 0 {
            sc.sampling = SamplingMode::TopK;
        }
        let model = Box::into_raw(Box::new(model));
        // SAFETY: the box is freed only in `AtSession::drop`, after the session.
        let model_ref: &'static AnyModel = unsafe { &*model };
        match Session::new(model_ref, policy, sc) {
            Ok(session) => {
                unsafe { *out = Box::into_raw(Box::new(AtSession { session, model })) };
                Ok(())
            }
            Err(e) => {
                unsafe { drop(Box::from_raw(model)) };
                Err(e.into())
            }
        }
    })
}

/// # Safety
/// `session` must be null or a pointer from [`at_session_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn at_session_free(session: *mut AtSession) {
    if !session.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| unsafe { drop(Box::from_raw(session)) }));
    }
}

struct CallbackLabels {
    f: unsafe extern "C" fn(*mut c_void, usize, usize, *const f64, usize, *mut f64) -> i32,
    user: *mut c_void,
    failed: Option<i32>,
}

impl LabelSource for CallbackLabels {
    fn label(&mut self, t: usize, pool_index: usize, x: &Feature) -> activetrack::Result<Label> {
        let mut y = f64::NAN;
        // SAFETY: the caller of `at_session_step` vouches for the callback.
        let rc = unsafe { (self.f)(self.user, t, pool_index, x.as_vector().as_ptr(), x.dim(), &mut y) };
        if rc != 0 {
            self.failed = Some(rc);
            return Err(Error::InvalidArgument(format!("label callback failed with code {rc}")));
        }
        if !y.is_finite() {
            return Err(Error::InvalidArgument(format!("label callback returned non-finite {y}")));
        }
        Ok(Label(y))
    }
}

/// Runs one step on a pool of `n` items, querying labels through `label`.
///
/// # Safety
/// `session` must come from [`at_session_new`]; `features` must hold
/// `n·dim` values; `report` may be null. `label` is called synchronously.
#[no_mangle]
pub unsafe extern "C" fn at_session_step(
    session: *mut AtSession,
    features: *const f64,
    n: usize,
    label: AtLabelFn,
    user: *mut c_void,
    report: *mut AtStepReport,
) -> AtStatus {
    guard(|| {
        if session.is_null() {
            return Err(null());
        }
        let f = label.ok_or_else(null)?;
        let s = unsafe { &mut *session };
        let dim = s.session.config().domain.dim();
        let feats = unsafe { slice_in(features, n.checked_mul(dim).ok_or_else(|| invalid("size overflow"))?)? };
        let pool = pool_from(feats, n, dim, s.session.t() + 1)?;
        let mut labels = CallbackLabels { f, user, failed: None };
        let r = s.session.step(&pool, &mut labels, None).map_err(|e| match labels.failed {
            Some(_) => Failure(AtStatus::LabelCallbackFailed, e.to_string()),
            None => Failure::from(e),
        })?;
        if !report.is_null() {
            unsafe {
                *report = AtStepReport {
                    t: r.t,
                    k: r.k,
                    rho_hat: r.rho_hat().unwrap_or(f64::NAN),
                    m_hat: r.m_hat.unwrap_or(f64::NAN),
                    lb_hat: r.lb_hat.unwrap_or(f64::NAN),
                    design_objective: r.design_objective,
                    weighted_risk: r.weighted_risk.unwrap_or(f64::NAN),
                }
            };
        }
        Ok(())
    })
}

/// Copies the current estimate into `out` (room for `dim` values).
/// Returns `InvalidArgument` before the first step.
///
/// # Safety
/// `session` must come from [`at_session_new`]; `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn at_session_theta(session: *const AtSession, out: *mut f64, len: usize) -> AtStatus {
    guard(|| {
        if session.is_null() || out.is_null() {
            return Err(null());
        }
        let s = unsafe { &*session };
        let theta = s.session.theta_hat().ok_or_else(|| invalid("no estimate before the first step"))?;
        if len != theta.dim() {
            return Err(Failure(
                AtStatus::SizeMismatch,
                format!("size mismatch: expected {}, got {len}", theta.dim()),
            ));
        }
        unsafe { slice::from_raw_parts_mut(out, len) }.copy_from_slice(theta.as_slice());
        Ok(())
    })
}
