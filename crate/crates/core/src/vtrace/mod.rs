//! V-trace off-policy correction.
//!
//! With `ρ_t = min(ρ̄, π(a_t|x_t)/μ(a_t|x_t))` and `c_t = min(c̄, π/μ)`:
//!
//! ```text
//! δ_t  = ρ_t (r_t + γ_t V(x_{t+1}) − V(x_t))
//! v_s  = V(x_s) + δ_s + γ_s c_s (v_{s+1} − V(x_{s+1})),   v_T = V(x_T) = bootstrap
//! A_s  = ρ_s (r_s + γ_s v_{s+1} − V(x_s))
//! ```
//!
//! `γ_t` is the per-step discount, already zeroed where an episode ended.
//! All inputs are time-major `[T, B]`. The targets are plain values; no
//! gradient flows through them.

mod loss;
pub mod oracle;

use thiserror::Error;

use crate::numerics::array::{Array, DimError};
use crate::numerics::ops::log_softmax_row;
use crate::numerics::Scalar;
use crate::rollout::SchemaError;

pub use loss::{compute_losses, loss_with_targets, LossBundle, LossGradients, LossInputs, LossOutput};
pub use oracle::vtrace_oracle;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VtraceError {
    #[error(transparent)]
    Dim(#[from] DimError),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("action {value} outside [0, {limit})")]
    ActionRange { value: i64, limit: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VtraceConfig {
    pub discount: f64,
    pub rho_bar: f64,
    pub c_bar: f64,
    pub pg_cost: f64,
    pub baseline_cost: f64,
    pub entropy_cost: f64,
}

impl Default for VtraceConfig {
    fn default() -> Self {
        VtraceConfig {
            discount: 0.99,
            rho_bar: 1.0,
            c_bar: 1.0,
            pg_cost: 1.0,
            baseline_cost: 0.5,
            entropy_cost: 0.01,
        }
    }
}

impl VtraceConfig {
    pub fn validate(&self) -> Result<(), VtraceError> {
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(VtraceError::Config(format!("discount {} not in (0, 1]", self.discount)));
        }
        if self.c_bar.is_nan() || self.c_bar <= 0.0 || self.rho_bar.is_nan() || self.rho_bar < self.c_bar {
            return Err(VtraceError::Config(format!(
                "need rho_bar >= c_bar > 0, got rho_bar {} c_bar {}",
                self.rho_bar, self.c_bar
            )));
        }
        for (name, v) in [
            ("pg_cost", self.pg_cost),
            ("baseline_cost", self.baseline_cost),
            ("entropy_cost", self.entropy_cost),
        ] {
            if !v.is_finite() {
                return Err(VtraceError::Config(format!("{name} must be finite")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VtraceResult<S> {
    /// `[T, B]` value targets.
    pub vs: Array<S>,
    /// `[T, B]` policy-gradient advantages.
    pub pg_advantages: Array<S>,
    /// `[T, B]` importance weights clipped at `ρ̄`.
    pub clipped_rhos: Array<S>,
}

/// `log π_target(a|x) − log π_behavior(a|x)` for logits `[T, B, A]` and
/// actions `[T, B]`.
pub fn action_log_rhos<S: Scalar>(
    behavior_logits: &Array<S>,
    target_logits: &Array<S>,
    actions: &Array<i64>,
) -> Result<Array<S>, VtraceError> {
    let dims = behavior_logits.dims();
    if dims.len() != 3 || dims[2] == 0 {
        return Err(DimError::new("behavior logits", &[1, 1, 1], dims).into());
    }
    target_logits.expect_dims("target logits", dims)?;
    actions.expect_dims("actions", &dims[..2])?;
    let a = dims[2];
    let mut lp_b = vec![S::zero(); a];
    let mut lp_t = vec![S::zero(); a];
    let mut out = Vec::with_capacity(actions.len());
    for ((zb, zt), &act) in behavior_logits.rows().zip(target_logits.rows()).zip(actions.data()) {
        if act < 0 || act as u64 >= a as u64 {
            return Err(VtraceError::ActionRange { value: act, limit: a });
        }
        log_softmax_row(zb, &mut lp_b);
        log_softmax_row(zt, &mut lp_t);
        out.push(lp_t[act as usize] - lp_b[act as usize]);
    }
    Ok(Array::new(dims[..2].to_vec(), out)?)
}

pub(crate) fn check_inputs<S: Scalar>(
    log_rhos: &Array<S>,
    discounts: &Array<S>,
    rewards: &Array<S>,
    values: &Array<S>,
    bootstrap_value: &Array<S>,
) -> Result<(usize, usize), VtraceError> {
    let dims = log_rhos.dims();
    if dims.len() != 2 {
        return Err(DimError::new("log_rhos", &[1, 1], dims).into());
    }
    discounts.expect_dims("discounts", dims)?;
    rewards.expect_dims("rewards", dims)?;
    values.expect_dims("values", dims)?;
    bootstrap_value.expect_dims("bootstrap_value", &dims[1..])?;
    for (name, arr) in [
        ("log_rhos", log_rhos),
        ("discounts", discounts),
        ("rewards", rewards),
        ("values", values),
        ("bootstrap_value", bootstrap_value),
    ] {
        if !arr.data().iter().all(|x| x.is_finite()) {
            return Err(VtraceError::NonFinite(name));
        }
    }
    Ok((dims[0], dims[1]))
}

/// V-trace targets by the backward recursion, `O(T·B)`.
pub fn vtrace_targets<S: Scalar>(
    log_rhos: &Array<S>,
    discounts: &Array<S>,
    rewards: &Array<S>,
    values: &Array<S>,
    bootstrap_value: &Array<S>,
    cfg: &VtraceConfig,
) -> Result<VtraceResult<S>, VtraceError> {
    let (t_len, b) = check_inputs(log_rhos, discounts, rewards, values, bootstrap_value)?;
    let rho_bar = S::lit(cfg.rho_bar);
    let c_bar = S::lit(cfg.c_bar);

    let rhos: Vec<S> = log_rhos.data().iter().map(|&lr| lr.exp()).collect();
    let clipped: Vec<S> = rhos.iter().map(|&r| r.min(rho_bar)).collect();
    let mut vs = vec![S::zero(); t_len * b];
    let mut adv = vec![S::zero(); t_len * b];
    let (disc, rew, val) = (discounts.data(), rewards.data(), values.data());

    for j in 0..b {
        let boot = bootstrap_value.data()[j];
        // v_{s+1} − V(x_{s+1}) and V(x_{s+1}), starting past the end.
        let mut next_correction = S::zero();
        let mut next_value = boot;
        let mut next_vs = boot;
        for s in (0..t_len).rev() {
            let i = s * b + j;
            let c = rhos[i].min(c_bar);
            let delta = clipped[i] * (rew[i] + disc[i] * next_value - val[i]);
            let v = val[i] + delta + disc[i] * c * next_correction;
            adv[i] = clipped[i] * (rew[i] + disc[i] * next_vs - val[i]);
            vs[i] = v;
            next_correction = v - val[i];
            next_value = val[i];
            next_vs = v;
        }
    }

    let dims = vec![t_len, b];
    let result = VtraceResult {
        vs: Array::new(dims.clone(), vs)?,
        pg_advantages: Array::new(dims.clone(), adv)?,
        clipped_rhos: Array::new(dims, clipped)?,
    };
    if !result.vs.data().iter().all(|x| x.is_finite()) || !result.pg_advantages.data().iter().all(|x| x.is_finite()) {
        return Err(VtraceError::NonFinite("vtrace targets"));
    }
    Ok(result)
}
