//! C ABI over `fpg-core`.
//!
//! Objects are opaque heap handles returned through out-pointers and
//! released with the matching `fpg_*_free`. Every fallible call returns an
//! [`FpgStatus`]; on failure the message is available from
//! [`fpg_last_error`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fpg_core::dataset::{simulate, Dataset};
use fpg_core::envs::{target_policy, EnvConfig};
use fpg_core::estimator::{estimate, EstimatorConfig};
use fpg_core::features::FeatureMap;
use fpg_core::fpg::{empirical_initial, Method};
use fpg_core::mdp::{exact_evaluation, MdpSpec};
use fpg_core::policy::{ActionPolicy, EpsilonGreedy, Policy, SoftmaxTabularPolicy};
use fpg_core::FpgError;

/// Status codes; the numeric values match the command-line exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FpgStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Numerical = 3,
    Degenerate = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// Estimators reachable through [`fpg_estimate`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FpgMethod {
    Fpg = 0,
    ModelBased = 1,
    Is = 2,
    Gpomdp = 3,
    Reinforce = 4,
}

impl From<FpgMethod> for Method {
    fn from(m: FpgMethod) -> Self {
        match m {
            FpgMethod::Fpg => Method::Fpg,
            FpgMethod::ModelBased => Method::ModelBased,
            FpgMethod::Is => Method::Is,
            FpgMethod::Gpomdp => Method::Gpomdp,
            FpgMethod::Reinforce => Method::Reinforce,
        }
    }
}

pub struct FpgMdp(MdpSpec);

/// A differentiable tabular softmax policy, or an epsilon-greedy mixture
/// around one (usable only as a behavior policy).
pub enum FpgPolicy {
    Softmax(SoftmaxTabularPolicy),
    Mixed(EpsilonGreedy<SoftmaxTabularPolicy>),
}

impl FpgPolicy {
    fn action_policy(&self) -> &dyn ActionPolicy {
        match self {
            FpgPolicy::Softmax(p) => p,
            FpgPolicy::Mixed(p) => p,
        }
    }

    fn target(&self) -> Result<&SoftmaxTabularPolicy, FpgError> {
        match self {
            FpgPolicy::Softmax(p) => Ok(p),
            FpgPolicy::Mixed(_) => Err(FpgError::Config("an epsilon-greedy mixture cannot be a target policy".into())),
        }
    }
}

pub struct FpgDataset(Dataset);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Core(FpgError),
    Null(&'static str),
    Buffer { needed: usize, got: usize },
}

impl From<FpgError> for Failure {
    fn from(e: FpgError) -> Self {
        Failure::Core(e)
    }
}

fn status_of(e: &FpgError) -> FpgStatus {
    match e.exit_code() {
        3 => FpgStatus::Numerical,
        4 => FpgStatus::Degenerate,
        _ => FpgStatus::Config,
    }
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FpgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FpgStatus::Ok,
        Ok(Err(Failure::Core(e))) => {
            let s = status_of(&e);
            set_error(e.to_string());
            s
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer passed for {what}"));
            FpgStatus::NullPointer
        }
        Ok(Err(Failure::Buffer { needed, got })) => {
            set_error(format!("output buffer holds {got} values, need {needed}"));
            FpgStatus::BufferTooSmall
        }
        Err(_) => {
            set_error("internal panic".into());
            FpgStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn as_str<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Core(FpgError::Config(format!("{what} is not valid UTF-8"))))
}

unsafe fn write_out<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn fill(out: *mut f64, len: usize, values: &[f64]) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    if len < values.len() {
        return Err(Failure::Buffer { needed: values.len(), got: len });
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fpg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Parses an MDP JSON document.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fpg_mdp_from_json(json: *const c_char, out: *mut *mut FpgMdp) -> FpgStatus {
    guard(|| {
        let text = as_str(json, "json")?;
        write_out(out, FpgMdp(MdpSpec::from_json(text)?))
    })
}

/// Built-in environment by name (`frozenlake`, `cliffwalk`, `grid:RxC`,
/// `random:SxA`). A zero horizon selects the environment default.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fpg_mdp_builtin(name: *const c_char, horizon: usize, seed: u64, out: *mut *mut FpgMdp) -> FpgStatus {
    guard(|| {
        let name = as_str(name, "name")?;
        let h = (horizon > 0).then_some(horizon);
        write_out(out, FpgMdp(EnvConfig::parse(name, h, seed)?.build()?))
    })
}

/// # Safety
/// `mdp` must come from an `fpg_mdp_*` constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fpg_mdp_free(mdp: *mut FpgMdp) {
    if !mdp.is_null() {
        drop(Box::from_raw(mdp));
    }
}

/// Writes `[n_states, n_actions, horizon]` into `dims`.
///
/// # Safety
/// `mdp` must be a live handle and `dims` point to three writable values.
#[no_mangle]
pub unsafe extern "C" fn fpg_mdp_dims(mdp: *const FpgMdp, dims: *mut usize) -> FpgStatus {
    guard(|| {
        let m = &as_ref(mdp, "mdp")?.0;
        if dims.is_null() {
            return Err(Failure::Null("dims"));
        }
        let d = [m.n_states(), m.n_actions(), m.horizon()];
        ptr::copy_nonoverlapping(d.as_ptr(), dims, 3);
        Ok(())
    })
}

/// Tabular softmax policy with `n_states * n_actions` logits, row-major.
///
/// # Safety
/// `theta` must point to `n_states * n_actions` readable values.
#[no_mangle]
pub unsafe extern "C" fn fpg_policy_softmax(
    n_states: usize,
    n_actions: usize,
    theta: *const f64,
    out: *mut *mut FpgPolicy,
) -> FpgStatus {
    guard(|| {
        if theta.is_null() {
            return Err(Failure::Null("theta"));
        }
        let t = std::slice::from_raw_parts(theta, n_states * n_actions).to_vec();
        write_out(out, FpgPolicy::Softmax(SoftmaxTabularPolicy::new(n_states, n_actions, t)?))
    })
}

/// Near-optimal softmax target for `mdp` at inverse temperature `beta`.
///
/// # Safety
/// `mdp` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fpg_policy_target(mdp: *const FpgMdp, beta: f64, out: *mut *mut FpgPolicy) -> FpgStatus {
    guard(|| {
        let m = &as_ref(mdp, "mdp")?.0;
        write_out(out, FpgPolicy::Softmax(target_policy(m, beta)?))
    })
}

/// `(1 - epsilon) * base + epsilon * uniform`, for use as a behavior policy.
///
/// # Safety
/// `base` must be a live softmax handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fpg_policy_epsilon_greedy(base: *const FpgPolicy, epsilon: f64, out: *mut *mut FpgPolicy) -> FpgStatus {
    guard(|| {
        let b = as_ref(base, "base")?.target()?.clone();
        write_out(out, FpgPolicy::Mixed(EpsilonGreedy::new(b, epsilon)?))
    })
}

/// Number of parameters; zero for mixtures and null handles.
///
/// # Safety
/// `policy` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn fpg_policy_n_params(policy: *const FpgPolicy) -> usize {
    match policy.as_ref() {
        Some(FpgPolicy::Softmax(p)) => p.n_params(),
        _ => 0,
    }
}

/// # Safety
/// `policy` must come from an `fpg_policy_*` constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fpg_policy_free(policy: *mut FpgPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// `k` episodes of `mdp` under `behavior`, episode `i` drawn from stream `i` of `seed`.
///
/// # Safety
/// Handles must be live and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fpg_dataset_simulate(
    mdp: *const FpgMdp,
    behavior: *const FpgPolicy,
    k: usize,
    seed: u64,
    out: *mut *mut FpgDataset,
) -> FpgStatus {
    guard(|| {
        let m = &as_ref(mdp, "mdp")?.0;
        let b = as_ref(behavior, "behavior")?.action_policy();
        write_out(out, FpgDataset(simulate(m, b, k, seed)?))
    })
}

/// Parses a JSONL dataset held in memory.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fpg_dataset_from_jsonl(text: *const c_char, out: *mut *mut FpgDataset) -> FpgStatus {
    guard(|| {
        let t = as_str(text, "text")?;
        write_out(out, FpgDataset(Dataset::read_jsonl(t.as_bytes())?))
    })
}

/// Number of episodes; zero for NULL.
///
/// # Safety
/// `ds` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn fpg_dataset_len(ds: *const FpgDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// # Safety
/// `ds` must come from an `fpg_dataset_*` constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fpg_dataset_free(ds: *mut FpgDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Gradient estimate with one-hot features written to `out[0..n_params]`.
/// `mdp` supplies the initial distribution and may be NULL, in which case
/// the dataset's empirical first states are used. `behavior` is required
/// for the importance-sampling methods and ignored otherwise.
///
/// # Safety
/// Non-NULL handles must be live; `out` must hold `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn fpg_estimate(
    ds: *const FpgDataset,
    target: *const FpgPolicy,
    behavior: *const FpgPolicy,
    mdp: *const FpgMdp,
    method: FpgMethod,
    lambda: f64,
    out: *mut f64,
    out_len: usize,
) -> FpgStatus {
    guard(|| {
        let d = &as_ref(ds, "dataset")?.0;
        let t = as_ref(target, "target")?.target()?;
        let b = behavior.as_ref().map(|b| b.action_policy());
        let xi = match mdp.as_ref() {
            Some(m) => m.0.initial_dist().to_vec(),
            None => empirical_initial(d, t.n_states()),
        };
        let cfg = EstimatorConfig {
            method: method.into(),
            lambda,
            phi: FeatureMap::one_hot(t.n_states(), t.n_actions()),
            xi,
            gamma: None,
        };
        let est = estimate(d, t, b, &cfg)?;
        fill(out, out_len, &est.grad)
    })
}

/// Exact value and gradient of `policy` on `mdp`. `value` may be NULL.
///
/// # Safety
/// Handles must be live; `grad` must hold `grad_len` values.
#[no_mangle]
pub unsafe extern "C" fn fpg_exact_gradient(
    mdp: *const FpgMdp,
    policy: *const FpgPolicy,
    value: *mut f64,
    grad: *mut f64,
    grad_len: usize,
) -> FpgStatus {
    guard(|| {
        let m = &as_ref(mdp, "mdp")?.0;
        let p = as_ref(policy, "policy")?.target()?;
        let ev = exact_evaluation(m, p)?;
        fill(grad, grad_len, &ev.grad_v)?;
        if !value.is_null() {
            *value = ev.v;
        }
        Ok(())
    })
}
