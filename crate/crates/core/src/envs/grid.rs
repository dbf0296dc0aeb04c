use crate::numerics::{Array, DType, DynArray};
use crate::rollout::EnvSpec;

use super::{check_action, EnvError, Environment, Transition};

pub const DEFAULT_STEP_LIMIT: usize = 50;

/// Deterministic `N × N` maze: start at `(0, 0)`, reward 1 on reaching
/// `(N−1, N−1)`. Actions are 0 up, 1 down, 2 left, 3 right; moves into a
/// wall leave the agent in place. Episodes that hit the step limit end with
/// reward 0. Observations are one-hot over the `N²` cells, index `y·N + x`.
#[derive(Debug, Clone)]
pub struct GridMaze {
    side: usize,
    step_limit: usize,
    x: usize,
    y: usize,
    steps: usize,
}

impl GridMaze {
    pub fn new(side: usize) -> Self {
        Self::with_step_limit(side, DEFAULT_STEP_LIMIT)
    }

    pub fn with_step_limit(side: usize, step_limit: usize) -> Self {
        assert!(side >= 2, "grid side must be at least 2");
        GridMaze {
            side,
            step_limit,
            x: 0,
            y: 0,
            steps: 0,
        }
    }

    pub fn position(&self) -> (usize, usize) {
        (self.x, self.y)
    }

    /// Places the agent, e.g. to test transitions near the goal.
    pub fn set_position(&mut self, x: usize, y: usize) {
        assert!(x < self.side && y < self.side);
        self.x = x;
        self.y = y;
    }

    fn observation(&self) -> DynArray {
        let n = self.side * self.side;
        let idx = self.y * self.side + self.x;
        Array::from_fn(&[n], |i| if i == idx { 1.0f32 } else { 0.0 }).into()
    }
}

impl Environment for GridMaze {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            obs_dtype: DType::F32,
            obs_shape: vec![self.side * self.side],
            num_actions: 4,
        }
    }

    fn reset(&mut self) -> DynArray {
        self.x = 0;
        self.y = 0;
        self.steps = 0;
        self.observation()
    }

    fn step(&mut self, action: i64) -> Result<Transition, EnvError> {
        let last = self.side - 1;
        match check_action(action, 4)? {
            0 => self.y = self.y.saturating_sub(1),
            1 => self.y = (self.y + 1).min(last),
            2 => self.x = self.x.saturating_sub(1),
            _ => self.x = (self.x + 1).min(last),
        }
        self.steps += 1;
        let at_goal = self.x == last && self.y == last;
        Ok(Transition {
            observation: self.observation(),
            reward: if at_goal { 1.0 } else { 0.0 },
            done: at_goal || self.steps >= self.step_limit,
        })
    }
}
