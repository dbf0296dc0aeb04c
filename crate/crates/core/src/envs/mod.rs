//! Environments: a reset/step contract, episode accounting with automatic
//! reset, the built-in toy environments and the TCP environment server.

mod accounting;
mod bandit;
mod grid;
pub mod server;

use thiserror::Error;

use crate::numerics::DynArray;
use crate::rollout::EnvSpec;

pub use accounting::Accounted;
pub use bandit::BanditEnv;
pub use grid::GridMaze;
pub use server::{serve_envs, EnvServer, RunningServer, ServerStats, StopHandle};

/// Names accepted by [`make_env`].
pub const ENV_NAMES: [&str; 2] = ["grid5", "bandit"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnvError {
    #[error("action {action} outside [0, {num_actions})")]
    InvalidAction { action: i64, num_actions: usize },
    #[error("unknown environment {name:?}; valid names: {}", ENV_NAMES.join(", "))]
    Unknown { name: String },
}

/// Result of one environment step before episode accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub observation: DynArray,
    pub reward: f32,
    pub done: bool,
}

/// Gym-style discrete-action environment.
pub trait Environment: Send {
    fn spec(&self) -> EnvSpec;

    fn reset(&mut self) -> DynArray;

    fn step(&mut self, action: i64) -> Result<Transition, EnvError>;
}

impl<E: Environment + ?Sized> Environment for Box<E> {
    fn spec(&self) -> EnvSpec {
        (**self).spec()
    }

    fn reset(&mut self) -> DynArray {
        (**self).reset()
    }

    fn step(&mut self, action: i64) -> Result<Transition, EnvError> {
        (**self).step(action)
    }
}

pub(crate) fn check_action(action: i64, num_actions: usize) -> Result<usize, EnvError> {
    if action < 0 || action as u64 >= num_actions as u64 {
        return Err(EnvError::InvalidAction { action, num_actions });
    }
    Ok(action as usize)
}

/// Builds a fresh environment by name.
pub fn make_env(name: &str) -> Result<Box<dyn Environment>, EnvError> {
    match name {
        "grid5" => Ok(Box::new(GridMaze::new(5))),
        "bandit" => Ok(Box::new(BanditEnv::new())),
        _ => Err(EnvError::Unknown { name: name.to_string() }),
    }
}

/// Shared constructor used by servers and mono actors.
pub type EnvFactory = std::sync::Arc<dyn Fn() -> Box<dyn Environment> + Send + Sync>;

pub fn env_factory(name: &str) -> Result<EnvFactory, EnvError> {
    make_env(name)?;
    let name = name.to_string();
    Ok(std::sync::Arc::new(move || make_env(&name).expect("name validated")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry() {
        assert_eq!(make_env("bandit").unwrap().spec().num_actions, 2);
        assert_eq!(make_env("grid5").unwrap().spec().obs_shape, vec![25]);
        let err = make_env("pong").err().unwrap();
        assert!(err.to_string().contains("grid5, bandit"));
        assert!(env_factory("pong").is_err());
    }
}
