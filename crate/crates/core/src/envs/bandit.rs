use crate::numerics::{Array, DType, DynArray};
use crate::rollout::EnvSpec;

use super::{check_action, EnvError, Environment, Transition};

/// Two-armed deterministic bandit: arm 0 pays 0, arm 1 pays 1, and every
/// episode is a single step. The observation is the constant `[1.0]`.
#[derive(Debug, Clone, Default)]
pub struct BanditEnv;

impl BanditEnv {
    pub const REWARDS: [f32; 2] = [0.0, 1.0];

    pub fn new() -> Self {
        BanditEnv
    }

    fn observation() -> DynArray {
        Array::vector(vec![1.0f32]).into()
    }
}

impl Environment for BanditEnv {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            obs_dtype: DType::F32,
            obs_shape: vec![1],
            num_actions: Self::REWARDS.len(),
        }
    }

    fn reset(&mut self) -> DynArray {
        Self::observation()
    }

    fn step(&mut self, action: i64) -> Result<Transition, EnvError> {
        let arm = check_action(action, Self::REWARDS.len())?;
        Ok(Transition {
            observation: Self::observation(),
            reward: Self::REWARDS[arm],
            done: true,
        })
    }
}
