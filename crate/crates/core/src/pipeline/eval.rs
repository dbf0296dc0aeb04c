use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::envs::{Accounted, Environment};
use crate::numerics::Array;
use crate::Params;

use super::policy::{act, ActMode};
use super::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_return: f64,
    pub min_return: f64,
    pub max_return: f64,
    pub mean_length: f64,
}

/// Runs `episodes` greedy episodes of `env` under `params`.
pub fn evaluate(params: &Params, env: Box<dyn Environment>, episodes: usize) -> Result<EvalSummary, PipelineError> {
    let spec = env.spec();
    let shape = params.shape();
    if shape.obs_dim != spec.obs_len() || shape.num_actions != spec.num_actions {
        return Err(PipelineError::SpecMismatch(format!(
            "checkpoint expects obs_dim {} and {} actions, environment is {spec}",
            shape.obs_dim, shape.num_actions
        )));
    }
    let mut env = Accounted::new(env);
    // Greedy acting never draws from the RNG.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = env.initial();
    let mut returns = Vec::with_capacity(episodes);
    let mut lengths = 0i64;
    while returns.len() < episodes {
        let obs = Array::new(vec![1, spec.obs_len()], out.observation.to_f32())?;
        let agent = act(params, &obs, ActMode::Greedy, &mut rng)?.remove(0);
        out = env.step(agent.action)?;
        if out.done {
            returns.push(out.episode_return as f64);
            lengths += out.episode_step;
        }
    }
    let n = returns.len().max(1) as f64;
    Ok(EvalSummary {
        episodes,
        mean_return: returns.iter().sum::<f64>() / n,
        min_return: returns.iter().copied().fold(f64::INFINITY, f64::min),
        max_return: returns.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean_length: lengths as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::make_env;
    use crate::ModelShape;

    #[test]
    fn greedy_bandit_is_all_or_nothing() {
        for seed in 0..5 {
            let params = Params::init(ModelShape::new(1, 8, 2), &mut ChaCha8Rng::seed_from_u64(seed));
            let s = evaluate(&params, make_env("bandit").unwrap(), 20).unwrap();
            assert!(s.mean_return == 0.0 || s.mean_return == 1.0);
            assert_eq!(s.min_return, s.max_return);
            assert_eq!(s.mean_length, 1.0);
        }
    }

    #[test]
    fn spec_mismatch() {
        let params = Params::zeros(ModelShape::new(1, 8, 2));
        assert!(matches!(
            evaluate(&params, make_env("grid5").unwrap(), 1),
            Err(PipelineError::SpecMismatch(_))
        ));
    }
}
