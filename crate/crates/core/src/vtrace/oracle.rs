//! Definitional V-trace, evaluated as an explicit sum:
//!
//! ```text
//! v_s = V(x_s) + Σ_{t=s}^{T−1} (Π_{i=s}^{t−1} γ_i c_i) δ_t
//! ```
//!
//! `O(T²)` per batch column and deliberately free of the backward recursion,
//! so it can check [`super::vtrace_targets`].

use crate::numerics::array::Array;
use crate::numerics::Scalar;

use super::{check_inputs, VtraceConfig, VtraceError, VtraceResult};

pub fn vtrace_oracle<S: Scalar>(
    log_rhos: &Array<S>,
    discounts: &Array<S>,
    rewards: &Array<S>,
    values: &Array<S>,
    bootstrap_value: &Array<S>,
    cfg: &VtraceConfig,
) -> Result<VtraceResult<S>, VtraceError> {
    let (t_len, b) = check_inputs(log_rhos, discounts, rewards, values, bootstrap_value)?;
    let at = |a: &Array<S>, t: usize, j: usize| a.data()[t * b + j];
    let rho_bar = S::lit(cfg.rho_bar);
    let c_bar = S::lit(cfg.c_bar);

    let mut vs = Array::zeros(&[t_len, b]);
    let mut adv = Array::zeros(&[t_len, b]);
    let mut clipped = Array::zeros(&[t_len, b]);
    for j in 0..b {
        let value_at = |t: usize| {
            if t == t_len {
                bootstrap_value.data()[j]
            } else {
                at(values, t, j)
            }
        };
        let rho = |t: usize| at(log_rhos, t, j).exp().min(rho_bar);
        let c = |t: usize| at(log_rhos, t, j).exp().min(c_bar);
        let delta = |t: usize| rho(t) * (at(rewards, t, j) + at(discounts, t, j) * value_at(t + 1) - value_at(t));

        let target = |s: usize| -> S {
            if s == t_len {
                return bootstrap_value.data()[j];
            }
            let mut sum = S::zero();
            for t in s..t_len {
                let mut weight = S::one();
                for i in s..t {
                    weight *= at(discounts, i, j) * c(i);
                }
                sum += weight * delta(t);
            }
            value_at(s) + sum
        };

        for s in 0..t_len {
            vs.set(&[s, j], target(s));
            adv.set(
                &[s, j],
                rho(s) * (at(rewards, s, j) + at(discounts, s, j) * target(s + 1) - value_at(s)),
            );
            clipped.set(&[s, j], rho(s));
        }
    }
    Ok(VtraceResult {
        vs,
        pg_advantages: adv,
        clipped_rhos: clipped,
    })
}
