//! Actor-critic loss on V-trace targets, with its gradient with respect to
//! the learner's logits and baselines.
//!
//! Row alignment for a batch with `T + 1` rows: transition `t` uses the
//! learner outputs and stored action of row `t`, and the reward and done flag
//! of row `t + 1`. Row `T` of the learner baseline is the bootstrap value.

use crate::numerics::array::{Array, DimError};
use crate::numerics::ops::{entropy_from_log_probs, log_softmax_row};
use crate::numerics::Scalar;
use crate::rollout::{validate_batch, TrainingBatch};

use super::{action_log_rhos, vtrace_targets, VtraceConfig, VtraceError, VtraceResult};

/// Loss components, sum-reduced over `T × B`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle<S> {
    pub pg_loss: S,
    pub baseline_loss: S,
    /// Negative total entropy.
    pub entropy_loss: S,
    pub total: S,
}

/// Gradient of the total loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients<S> {
    /// `[T, B, A]`
    pub logits: Array<S>,
    /// `[T + 1, B]`; row `T` is always zero.
    pub baseline: Array<S>,
}

/// The time-aligned quantities the loss needs, extracted from a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossInputs<S> {
    /// `[T, B, A]`
    pub behavior_logits: Array<S>,
    /// `[T, B]`
    pub actions: Array<i64>,
    /// `[T, B]`
    pub rewards: Array<S>,
    /// `[T, B]`, `γ` or 0 where the next row starts a new episode.
    pub discounts: Array<S>,
}

impl<S: Scalar> LossInputs<S> {
    pub fn from_batch(batch: &TrainingBatch, discount: f64) -> Self {
        let (t_len, b, a) = (batch.unroll_length(), batch.batch_size(), batch.num_actions());
        let n = t_len * b;
        let gamma = S::lit(discount);
        let cast = |x: f32| S::lit(f64::from(x));
        LossInputs {
            behavior_logits: Array::from_fn(&[t_len, b, a], |i| cast(batch.policy_logits.data()[i])),
            actions: Array::new(vec![t_len, b], batch.action.data()[..n].to_vec()).unwrap(),
            rewards: Array::from_fn(&[t_len, b], |i| cast(batch.reward.data()[b + i])),
            discounts: Array::from_fn(
                &[t_len, b],
                |i| {
                    if batch.done.data()[b + i] {
                        S::zero()
                    } else {
                        gamma
                    }
                },
            ),
        }
    }
}

/// Loss values, their gradient and the V-trace targets they were built on.
pub type LossOutput<S> = (LossBundle<S>, LossGradients<S>, VtraceResult<S>);

/// Computes V-trace targets from the batch and the learner outputs, then the
/// loss and its gradient.
pub fn compute_losses<S: Scalar>(
    batch: &TrainingBatch,
    learner_logits: &Array<S>,
    learner_baseline: &Array<S>,
    cfg: &VtraceConfig,
) -> Result<LossOutput<S>, VtraceError> {
    validate_batch(batch, None)?;
    let (t_len, b, a) = (batch.unroll_length(), batch.batch_size(), batch.num_actions());
    learner_logits.expect_dims("learner logits", &[t_len, b, a])?;
    learner_baseline.expect_dims("learner baseline", &[t_len + 1, b])?;

    let inputs = LossInputs::<S>::from_batch(batch, cfg.discount);
    let log_rhos = action_log_rhos(&inputs.behavior_logits, learner_logits, &inputs.actions)?;
    let values = Array::new(vec![t_len, b], learner_baseline.data()[..t_len * b].to_vec())?;
    let bootstrap = Array::new(vec![b], learner_baseline.data()[t_len * b..].to_vec())?;
    let targets = vtrace_targets(&log_rhos, &inputs.discounts, &inputs.rewards, &values, &bootstrap, cfg)?;
    let (bundle, grads) = loss_with_targets(learner_logits, learner_baseline, &inputs.actions, &targets, cfg)?;
    Ok((bundle, grads, targets))
}

/// The loss with `vs` and `pg_advantages` held fixed.
///
/// ```text
/// pg       = −Σ A_s · log π(a_s|x_s)
/// baseline = ½ Σ (v_s − V(x_s))²
/// entropy  = Σ Σ_a π log π
/// total    = pg_cost·pg + baseline_cost·baseline + entropy_cost·entropy
/// ```
pub fn loss_with_targets<S: Scalar>(
    learner_logits: &Array<S>,
    learner_baseline: &Array<S>,
    actions: &Array<i64>,
    targets: &VtraceResult<S>,
    cfg: &VtraceConfig,
) -> Result<(LossBundle<S>, LossGradients<S>), VtraceError> {
    let ld = learner_logits.dims();
    if ld.len() != 3 || ld[2] == 0 {
        return Err(DimError::new("learner logits", &[1, 1, 1], ld).into());
    }
    let (t_len, b, a) = (ld[0], ld[1], ld[2]);
    learner_baseline.expect_dims("learner baseline", &[t_len + 1, b])?;
    actions.expect_dims("actions", &[t_len, b])?;
    targets.vs.expect_dims("vs", &[t_len, b])?;
    targets.pg_advantages.expect_dims("pg_advantages", &[t_len, b])?;

    let pg_cost = S::lit(cfg.pg_cost);
    let baseline_cost = S::lit(cfg.baseline_cost);
    let entropy_cost = S::lit(cfg.entropy_cost);
    let half = S::lit(0.5);

    let mut pg = S::zero();
    let mut base = S::zero();
    let mut ent = S::zero();
    let mut g_logits = Array::zeros(&[t_len, b, a]);
    let mut g_base = Array::zeros(&[t_len + 1, b]);
    let mut lp = vec![S::zero(); a];

    for (i, (z, g)) in learner_logits
        .rows()
        .zip(g_logits.data_mut().chunks_exact_mut(a))
        .enumerate()
    {
        let act = actions.data()[i];
        if act < 0 || act as u64 >= a as u64 {
            return Err(VtraceError::ActionRange { value: act, limit: a });
        }
        let act = act as usize;
        log_softmax_row(z, &mut lp);
        let adv = targets.pg_advantages.data()[i];
        let h = entropy_from_log_probs(&lp);

        pg -= adv * lp[act];
        ent -= h;
        for k in 0..a {
            let p = lp[k].exp();
            let onehot = if k == act { S::one() } else { S::zero() };
            g[k] = pg_cost * (-adv) * (onehot - p) + entropy_cost * p * (lp[k] + h);
        }

        let err = learner_baseline.data()[i] - targets.vs.data()[i];
        base += half * err * err;
        g_base.data_mut()[i] = baseline_cost * err;
    }

    let total = pg_cost * pg + baseline_cost * base + entropy_cost * ent;
    if !total.is_finite() {
        return Err(VtraceError::NonFinite("loss"));
    }
    Ok((
        LossBundle {
            pg_loss: pg,
            baseline_loss: base,
            entropy_loss: ent,
            total,
        },
        LossGradients {
            logits: g_logits,
            baseline: g_base,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::DynArray;

    fn targets(vs: Vec<f64>, adv: Vec<f64>, t: usize, b: usize) -> VtraceResult<f64> {
        VtraceResult {
            vs: Array::new(vec![t, b], vs).unwrap(),
            pg_advantages: Array::new(vec![t, b], adv).unwrap(),
            clipped_rhos: Array::full(&[t, b], 1.0),
        }
    }

    #[test]
    fn zero_advantage_uniform_logits() {
        let (t, b, a) = (3, 2, 4);
        let logits = Array::zeros(&[t, b, a]);
        let baseline = Array::zeros(&[t + 1, b]);
        let actions = Array::zeros(&[t, b]);
        let (loss, _) = loss_with_targets(
            &logits,
            &baseline,
            &actions,
            &targets(vec![0.0; 6], vec![0.0; 6], t, b),
            &VtraceConfig::default(),
        )
        .unwrap();
        assert_eq!(loss.pg_loss, 0.0);
        assert_eq!(loss.baseline_loss, 0.0);
        assert!((loss.entropy_loss + (t * b) as f64 * (a as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn baseline_equal_to_targets_has_no_loss() {
        let baseline = Array::new(vec![3, 1], vec![0.5, -1.0, 7.0]).unwrap();
        let (loss, grads) = loss_with_targets(
            &Array::zeros(&[2, 1, 2]),
            &baseline,
            &Array::zeros(&[2, 1]),
            &targets(vec![0.5, -1.0], vec![0.3, 0.1], 2, 1),
            &VtraceConfig::default(),
        )
        .unwrap();
        assert_eq!(loss.baseline_loss, 0.0);
        assert!(grads.baseline.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn total_combines_costs() {
        let cfg = VtraceConfig {
            pg_cost: 2.0,
            baseline_cost: 0.25,
            entropy_cost: 0.1,
            ..VtraceConfig::default()
        };
        let logits = Array::new(vec![1, 1, 2], vec![0.4, -0.3]).unwrap();
        let (loss, _) = loss_with_targets(
            &logits,
            &Array::new(vec![2, 1], vec![0.2, 0.0]).unwrap(),
            &Array::new(vec![1, 1], vec![1]).unwrap(),
            &targets(vec![1.0], vec![0.7], 1, 1),
            &cfg,
        )
        .unwrap();
        let expected = 2.0 * loss.pg_loss + 0.25 * loss.baseline_loss + 0.1 * loss.entropy_loss;
        assert!((loss.total - expected).abs() < 1e-15);
        assert!((loss.baseline_loss - 0.5 * 0.64).abs() < 1e-12);
    }

    #[test]
    fn compute_losses_aligns_rows() {
        // T = 1, B = 1: reward and done come from row 1, action from row 0.
        let batch = TrainingBatch {
            observation: DynArray::from(Array::<f32>::zeros(&[2, 1, 1])),
            reward: Array::new(vec![2, 1], vec![100.0, 1.0]).unwrap(),
            done: Array::new(vec![2, 1], vec![false, true]).unwrap(),
            policy_logits: Array::zeros(&[2, 1, 2]),
            baseline: Array::zeros(&[2, 1]),
            action: Array::new(vec![2, 1], vec![1, 0]).unwrap(),
            model_versions: vec![0],
        };
        let logits = Array::<f64>::zeros(&[1, 1, 2]);
        let baseline = Array::new(vec![2, 1], vec![0.25, 50.0]).unwrap();
        let (_, _, targets) = compute_losses(&batch, &logits, &baseline, &VtraceConfig::default()).unwrap();
        // done at row 1 zeroes the discount: v_0 = r_1 = 1.
        assert!((targets.vs.data()[0] - 1.0).abs() < 1e-12);
        assert!((targets.pg_advantages.data()[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn learner_output_shapes_checked() {
        let batch = TrainingBatch {
            observation: DynArray::from(Array::<f32>::zeros(&[3, 2, 1])),
            reward: Array::zeros(&[3, 2]),
            done: Array::zeros(&[3, 2]),
            policy_logits: Array::zeros(&[3, 2, 2]),
            baseline: Array::zeros(&[3, 2]),
            action: Array::zeros(&[3, 2]),
            model_versions: vec![0, 0],
        };
        let cfg = VtraceConfig::default();
        assert!(compute_losses(&batch, &Array::<f64>::zeros(&[3, 2, 2]), &Array::zeros(&[3, 2]), &cfg).is_err());
        assert!(compute_losses(&batch, &Array::<f64>::zeros(&[2, 2, 2]), &Array::zeros(&[2, 2]), &cfg).is_err());
        assert!(compute_losses(&batch, &Array::<f64>::zeros(&[2, 2, 2]), &Array::zeros(&[3, 2]), &cfg).is_ok());
    }
}
