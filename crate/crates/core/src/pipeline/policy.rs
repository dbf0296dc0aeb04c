use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::numerics::{Array, DimError};
use crate::rollout::AgentOutput;
use crate::Params;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    /// Categorical sampling from `softmax(logits)`, used while training.
    Sample,
    /// Highest logit, lowest index on ties, NaN never wins; used for evaluation.
    Greedy,
}

pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] || (logits[best].is_nan() && !v.is_nan()) {
            best = i;
        }
    }
    best
}

pub fn sample_action<R: Rng + ?Sized>(logits: &[f32], rng: &mut R) -> usize {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let weights = logits.iter().map(|&z| ((z - max) as f64).exp());
    match WeightedIndex::new(weights) {
        Ok(dist) => dist.sample(rng),
        // Only reachable with non-finite logits.
        Err(_) => argmax(logits),
    }
}

/// One forward pass over `obs` (`[N, obs_dim]`) and one action per row.
pub fn act<R: Rng + ?Sized>(
    params: &Params,
    obs: &Array<f32>,
    mode: ActMode,
    rng: &mut R,
) -> Result<Vec<AgentOutput>, DimError> {
    let out = params.forward(obs)?;
    Ok(out
        .logits
        .rows()
        .zip(out.baseline.data())
        .map(|(z, &baseline)| {
            let action = match mode {
                ActMode::Sample => sample_action(z, rng),
                ActMode::Greedy => argmax(z),
            };
            AgentOutput {
                action: action as i64,
                policy_logits: z.to_vec(),
                baseline,
            }
        })
        .collect())
}
