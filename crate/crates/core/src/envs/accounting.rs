use crate::rollout::{EnvOutput, EnvSpec};

use super::{EnvError, Environment};

/// Tracks `episode_step` / `episode_return` and resets automatically.
///
/// The first output of a fresh wrapper is the episode-boundary marker
/// (reward 0, done, counters 0). When the inner episode ends, the output
/// carries the terminal reward, `done = true`, the finished episode's final
/// step count and return, and the *next* episode's initial observation. So
/// `done` always flags the first observation of an episode.
pub struct Accounted<E> {
    env: E,
    episode_step: i64,
    episode_return: f32,
}

impl<E: Environment> Accounted<E> {
    pub fn new(env: E) -> Self {
        Accounted {
            env,
            episode_step: 0,
            episode_return: 0.0,
        }
    }

    pub fn spec(&self) -> EnvSpec {
        self.env.spec()
    }

    pub fn inner(&self) -> &E {
        &self.env
    }

    /// Resets the environment and returns the boundary marker output.
    pub fn initial(&mut self) -> EnvOutput {
        self.episode_step = 0;
        self.episode_return = 0.0;
        EnvOutput {
            observation: self.env.reset(),
            reward: 0.0,
            done: true,
            episode_step: 0,
            episode_return: 0.0,
        }
    }

    pub fn step(&mut self, action: i64) -> Result<EnvOutput, EnvError> {
        let t = self.env.step(action)?;
        self.episode_step += 1;
        self.episode_return += t.reward;
        let out = EnvOutput {
            observation: t.observation,
            reward: t.reward,
            done: t.done,
            episode_step: self.episode_step,
            episode_return: self.episode_return,
        };
        if t.done {
            self.episode_step = 0;
            self.episode_return = 0.0;
            return Ok(EnvOutput {
                observation: self.env.reset(),
                ..out
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{BanditEnv, GridMaze};

    #[test]
    fn fresh_wrapper_emits_marker() {
        let mut env = Accounted::new(GridMaze::new(5));
        let out = env.initial();
        assert_eq!(
            (out.reward, out.done, out.episode_step, out.episode_return),
            (0.0, true, 0, 0.0)
        );
    }

    #[test]
    fn optimal_grid_path() {
        let mut env = Accounted::new(GridMaze::new(5));
        let first = env.initial();
        let path = [3, 3, 3, 3, 1, 1, 1, 1];
        let outs: Vec<_> = path.iter().map(|&a| env.step(a).unwrap()).collect();
        for (i, o) in outs[..7].iter().enumerate() {
            assert!(!o.done);
            assert_eq!(o.episode_step, i as i64 + 1);
            assert_eq!(o.episode_return, 0.0);
        }
        let last = &outs[7];
        assert_eq!(
            (last.reward, last.done, last.episode_return, last.episode_step),
            (1.0, true, 1.0, 8)
        );
        assert_eq!(last.observation, first.observation);
        // Counters restart with the next episode.
        let next = env.step(3).unwrap();
        assert_eq!((next.episode_step, next.episode_return), (1, 0.0));
    }

    #[test]
    fn return_is_running_sum_since_done() {
        let mut env = Accounted::new(BanditEnv::new());
        env.initial();
        for a in [1, 0, 1, 1] {
            let o = env.step(a).unwrap();
            assert!(o.done);
            assert_eq!(o.episode_return, o.reward);
            assert_eq!(o.episode_step, 1);
        }
    }
}
