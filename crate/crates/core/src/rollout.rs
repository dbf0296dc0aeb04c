//! Experience schema shared by actors, queues and the learner.
//!
//! Rollouts are stored column-wise with `T + 1` rows: rows `0..T` are the
//! transitions and row `T` supplies the bootstrap value. Row `t` pairs the
//! environment output observed at step `t` with the agent output computed
//! from it, so `action[t]` is the action taken from `observation[t]`, and
//! `reward[t + 1]` / `done[t + 1]` are its consequences. Consecutive rollouts
//! from one actor overlap by one row.
//!
//! A [`TrainingBatch`] is `B` rollouts stacked time-major: every field has
//! leading dims `[T + 1, B]`.

use std::fmt;

use thiserror::Error;

use crate::numerics::{Array, DType, DynArray};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchemaError {
    #[error("{field}: expected dims {expected:?}, got {got:?}")]
    Dims {
        field: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{field}: dtype {got}, expected {expected}")]
    Dtype {
        field: &'static str,
        expected: DType,
        got: DType,
    },
    #[error("{field}: value {value} outside [0, {limit})")]
    Range {
        field: &'static str,
        value: i64,
        limit: usize,
    },
    #[error("{field}: non-finite value")]
    NonFinite { field: &'static str },
    #[error("cannot stack zero rollouts")]
    Empty,
    #[error("batch_dim must be 1, got {0}")]
    BatchDim(usize),
}

impl SchemaError {
    pub fn field(&self) -> Option<&'static str> {
        match self {
            SchemaError::Dims { field, .. }
            | SchemaError::Dtype { field, .. }
            | SchemaError::Range { field, .. }
            | SchemaError::NonFinite { field } => Some(field),
            _ => None,
        }
    }
}

fn dims_err(field: &'static str, expected: &[usize], got: &[usize]) -> SchemaError {
    SchemaError::Dims {
        field,
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

/// Observation layout and action count of an environment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvSpec {
    pub obs_dtype: DType,
    pub obs_shape: Vec<usize>,
    pub num_actions: usize,
}

impl EnvSpec {
    pub fn obs_len(&self) -> usize {
        self.obs_shape.iter().product()
    }

    pub fn check_observation(&self, obs: &DynArray) -> Result<(), SchemaError> {
        if obs.dtype() != self.obs_dtype {
            return Err(SchemaError::Dtype {
                field: "observation",
                expected: self.obs_dtype,
                got: obs.dtype(),
            });
        }
        if obs.dims() != self.obs_shape.as_slice() {
            return Err(dims_err("observation", &self.obs_shape, obs.dims()));
        }
        Ok(())
    }

    pub fn check_action(&self, action: i64) -> Result<(), SchemaError> {
        if action < 0 || action as u64 >= self.num_actions as u64 {
            return Err(SchemaError::Range {
                field: "action",
                value: action,
                limit: self.num_actions,
            });
        }
        Ok(())
    }
}

impl fmt::Display for EnvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "obs {}{:?}, {} actions",
            self.obs_dtype, self.obs_shape, self.num_actions
        )
    }
}

/// One environment step as seen by the agent.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvOutput {
    pub observation: DynArray,
    pub reward: f32,
    /// Set on the first row of every episode.
    pub done: bool,
    pub episode_step: i64,
    pub episode_return: f32,
}

/// Behavior policy output for one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentOutput {
    pub action: i64,
    pub policy_logits: Vec<f32>,
    pub baseline: f32,
}

/// `T + 1` rows of experience from one actor, column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// `[T + 1, *obs_shape]`
    pub observation: DynArray,
    pub reward: Vec<f32>,
    pub done: Vec<bool>,
    pub episode_step: Vec<i64>,
    pub episode_return: Vec<f32>,
    /// `[T + 1, num_actions]`
    pub policy_logits: Array<f32>,
    pub baseline: Vec<f32>,
    pub action: Vec<i64>,
    /// Oldest params version that produced any action in this rollout.
    pub model_version: u64,
    pub id: u64,
}

impl Rollout {
    /// Zero-filled rollout buffer for `unroll_length` transitions.
    pub fn zeros(spec: &EnvSpec, unroll_length: usize) -> Self {
        let rows = unroll_length + 1;
        let mut obs_dims = vec![rows];
        obs_dims.extend_from_slice(&spec.obs_shape);
        Rollout {
            observation: DynArray::zeros(spec.obs_dtype, &obs_dims),
            reward: vec![0.0; rows],
            done: vec![false; rows],
            episode_step: vec![0; rows],
            episode_return: vec![0.0; rows],
            policy_logits: Array::zeros(&[rows, spec.num_actions]),
            baseline: vec![0.0; rows],
            action: vec![0; rows],
            model_version: 0,
            id: 0,
        }
    }

    /// Builds a rollout from `T + 1` row pairs.
    pub fn from_rows(
        spec: &EnvSpec,
        rows: &[(EnvOutput, AgentOutput)],
        model_version: u64,
        id: u64,
    ) -> Result<Self, SchemaError> {
        if rows.len() < 2 {
            return Err(dims_err("rollout rows", &[2], &[rows.len()]));
        }
        let mut r = Rollout::zeros(spec, rows.len() - 1);
        for (t, (env, agent)) in rows.iter().enumerate() {
            r.write_row(t, env, agent)?;
        }
        r.model_version = model_version;
        r.id = id;
        Ok(r)
    }

    pub fn rows(&self) -> usize {
        self.reward.len()
    }

    pub fn unroll_length(&self) -> usize {
        self.rows() - 1
    }

    pub fn num_actions(&self) -> usize {
        self.policy_logits.row_len()
    }

    pub fn obs_shape(&self) -> &[usize] {
        &self.observation.dims()[1..]
    }

    pub fn write_row(&mut self, t: usize, env: &EnvOutput, agent: &AgentOutput) -> Result<(), SchemaError> {
        if t >= self.rows() {
            return Err(dims_err("row index", &[self.rows()], &[t + 1]));
        }
        if env.observation.dims() != self.obs_shape() {
            return Err(dims_err("observation", self.obs_shape(), env.observation.dims()));
        }
        let a = self.num_actions();
        if agent.policy_logits.len() != a {
            return Err(dims_err("policy_logits", &[a], &[agent.policy_logits.len()]));
        }
        let obs_len = env.observation.len();
        self.observation
            .write_at(t * obs_len, &env.observation)
            .map_err(|_| SchemaError::Dtype {
                field: "observation",
                expected: self.observation.dtype(),
                got: env.observation.dtype(),
            })?;
        self.reward[t] = env.reward;
        self.done[t] = env.done;
        self.episode_step[t] = env.episode_step;
        self.episode_return[t] = env.episode_return;
        self.policy_logits.data_mut()[t * a..(t + 1) * a].copy_from_slice(&agent.policy_logits);
        self.baseline[t] = agent.baseline;
        self.action[t] = agent.action;
        Ok(())
    }

    pub fn row(&self, t: usize) -> (EnvOutput, AgentOutput) {
        let shape = self.obs_shape().to_vec();
        let obs_len: usize = shape.iter().product();
        let a = self.num_actions();
        (
            EnvOutput {
                observation: self.observation.slice(t * obs_len, &shape),
                reward: self.reward[t],
                done: self.done[t],
                episode_step: self.episode_step[t],
                episode_return: self.episode_return[t],
            },
            AgentOutput {
                action: self.action[t],
                policy_logits: self.policy_logits.data()[t * a..(t + 1) * a].to_vec(),
                baseline: self.baseline[t],
            },
        )
    }

    /// Returns of episodes that ended inside this rollout. Row 0 is skipped
    /// because it repeats the previous rollout's last row, and fresh
    /// connection markers (`episode_step == 0`) are not episodes.
    pub fn finished_episodes(&self) -> impl Iterator<Item = (f32, i64)> + '_ {
        (1..self.rows())
            .filter(|&t| self.done[t] && self.episode_step[t] > 0)
            .map(|t| (self.episode_return[t], self.episode_step[t]))
    }
}

/// `B` rollouts stacked along axis 1.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    /// `[T + 1, B, *obs_shape]`
    pub observation: DynArray,
    pub reward: Array<f32>,
    pub done: Array<bool>,
    /// `[T + 1, B, num_actions]`
    pub policy_logits: Array<f32>,
    pub baseline: Array<f32>,
    pub action: Array<i64>,
    pub model_versions: Vec<u64>,
}

fn interleave<T: Copy + Default>(parts: &[&[T]], row_len: usize, dims: &[usize]) -> Array<T> {
    let len = parts[0].len();
    let mut data = Vec::with_capacity(len * parts.len());
    for start in (0..len).step_by(row_len) {
        for p in parts {
            data.extend_from_slice(&p[start..start + row_len]);
        }
    }
    Array::new(dims.to_vec(), data).expect("interleave preserves element count")
}

/// Stacks rollouts time-major, inserting the batch axis at `batch_dim`
/// (which must be 1). Batch order follows input order.
pub fn stack_rollouts<'a, I>(rollouts: I, batch_dim: usize) -> Result<TrainingBatch, SchemaError>
where
    I: IntoIterator<Item = &'a Rollout>,
{
    if batch_dim != 1 {
        return Err(SchemaError::BatchDim(batch_dim));
    }
    let rs: Vec<&Rollout> = rollouts.into_iter().collect();
    let first = *rs.first().ok_or(SchemaError::Empty)?;
    let rows = first.rows();
    let a = first.num_actions();
    for r in &rs[1..] {
        if r.rows() != rows {
            return Err(dims_err("reward", &[rows], &[r.rows()]));
        }
        if r.observation.dtype() != first.observation.dtype() {
            return Err(SchemaError::Dtype {
                field: "observation",
                expected: first.observation.dtype(),
                got: r.observation.dtype(),
            });
        }
        if r.observation.dims() != first.observation.dims() {
            return Err(dims_err("observation", first.observation.dims(), r.observation.dims()));
        }
        if r.num_actions() != a {
            return Err(dims_err(
                "policy_logits",
                first.policy_logits.dims(),
                r.policy_logits.dims(),
            ));
        }
    }
    let b = rs.len();
    let obs_len: usize = first.obs_shape().iter().product();
    let mut obs_dims = vec![rows, b];
    obs_dims.extend_from_slice(first.obs_shape());
    let observation = DynArray::interleave(&rs.iter().map(|r| &r.observation).collect::<Vec<_>>(), obs_len)
        .and_then(|o| o.reshape(&obs_dims))
        .map_err(|_| dims_err("observation", &obs_dims, first.observation.dims()))?;

    let td = [rows, b];
    Ok(TrainingBatch {
        observation,
        reward: interleave(&rs.iter().map(|r| &r.reward[..]).collect::<Vec<_>>(), 1, &td),
        done: interleave(&rs.iter().map(|r| &r.done[..]).collect::<Vec<_>>(), 1, &td),
        policy_logits: interleave(
            &rs.iter().map(|r| r.policy_logits.data()).collect::<Vec<_>>(),
            a,
            &[rows, b, a],
        ),
        baseline: interleave(&rs.iter().map(|r| &r.baseline[..]).collect::<Vec<_>>(), 1, &td),
        action: interleave(&rs.iter().map(|r| &r.action[..]).collect::<Vec<_>>(), 1, &td),
        model_versions: rs.iter().map(|r| r.model_version).collect(),
    })
}

impl TrainingBatch {
    pub fn rows(&self) -> usize {
        self.reward.dims()[0]
    }

    pub fn unroll_length(&self) -> usize {
        self.rows() - 1
    }

    pub fn batch_size(&self) -> usize {
        self.reward.dims()[1]
    }

    pub fn num_actions(&self) -> usize {
        self.policy_logits.row_len()
    }

    pub fn obs_shape(&self) -> &[usize] {
        &self.observation.dims()[2..]
    }

    /// Observations flattened to `[(T + 1)·B, obs_len]` in `f32`.
    pub fn observations_f32(&self) -> Array<f32> {
        let n = self.rows() * self.batch_size();
        let obs_len: usize = self.obs_shape().iter().product();
        Array::new(vec![n, obs_len], self.observation.to_f32()).expect("observation element count")
    }

    /// The single-rollout batch at batch index `j`.
    pub fn slice(&self, j: usize) -> TrainingBatch {
        let (rows, b, a) = (self.rows(), self.batch_size(), self.num_actions());
        assert!(j < b, "batch index {j} out of range {b}");
        let pick = |row_len: usize| move |i: usize| (i / row_len) * b * row_len + j * row_len + i % row_len;
        let col = |x: &Array<f32>| Array::from_fn(&[rows, 1], |t| x.data()[t * b + j]);
        let obs_shape = self.obs_shape().to_vec();
        let obs_len: usize = obs_shape.iter().product();
        let mut obs_dims = vec![rows, 1];
        obs_dims.extend_from_slice(&obs_shape);
        let obs_parts: Vec<DynArray> = (0..rows)
            .map(|t| self.observation.slice((t * b + j) * obs_len, &[obs_len]))
            .collect();
        let mut observation = DynArray::zeros(self.observation.dtype(), &obs_dims);
        for (t, part) in obs_parts.iter().enumerate() {
            observation.write_at(t * obs_len, part).expect("same dtype");
        }
        let logit_idx = pick(a);
        TrainingBatch {
            observation,
            reward: col(&self.reward),
            done: Array::from_fn(&[rows, 1], |t| self.done.data()[t * b + j]),
            policy_logits: Array::from_fn(&[rows, 1, a], |i| self.policy_logits.data()[logit_idx(i)]),
            baseline: col(&self.baseline),
            action: Array::from_fn(&[rows, 1], |t| self.action.data()[t * b + j]),
            model_versions: vec![self.model_versions[j]],
        }
    }
}

/// Checks the batch invariants, returning the first violation. When
/// `batch_size` is given, the batch axis must have exactly that length.
pub fn validate_batch(batch: &TrainingBatch, batch_size: Option<usize>) -> Result<(), SchemaError> {
    let lead = batch.reward.dims();
    if lead.len() != 2 || lead[0] < 2 || lead[1] == 0 {
        return Err(dims_err("reward", &[2, batch_size.unwrap_or(1)], lead));
    }
    let (rows, b) = (lead[0], lead[1]);
    if let Some(expected) = batch_size {
        if b != expected {
            return Err(dims_err("reward", &[rows, expected], lead));
        }
    }
    let td = [rows, b];
    batch
        .done
        .expect_dims("", &td)
        .map_err(|e| dims_err("done", &td, &e.got))?;
    batch
        .baseline
        .expect_dims("", &td)
        .map_err(|e| dims_err("baseline", &td, &e.got))?;
    batch
        .action
        .expect_dims("", &td)
        .map_err(|e| dims_err("action", &td, &e.got))?;
    let ld = batch.policy_logits.dims();
    if ld.len() != 3 || ld[..2] != td || ld[2] == 0 {
        return Err(dims_err(
            "policy_logits",
            &[rows, b, ld.get(2).copied().unwrap_or(1).max(1)],
            ld,
        ));
    }
    let od = batch.observation.dims();
    if od.len() < 2 || od[..2] != td {
        let mut expected = td.to_vec();
        expected.extend_from_slice(od.get(2..).unwrap_or(&[]));
        return Err(dims_err("observation", &expected, od));
    }
    if batch.model_versions.len() != b {
        return Err(dims_err("model_versions", &[b], &[batch.model_versions.len()]));
    }
    let a = ld[2];
    if let Some(&bad) = batch.action.data().iter().find(|&&x| x < 0 || x as u64 >= a as u64) {
        return Err(SchemaError::Range {
            field: "action",
            value: bad,
            limit: a,
        });
    }
    if !batch.reward.data().iter().all(|x| x.is_finite()) {
        return Err(SchemaError::NonFinite { field: "reward" });
    }
    if !batch.policy_logits.data().iter().all(|x| x.is_finite()) {
        return Err(SchemaError::NonFinite { field: "policy_logits" });
    }
    if !batch.baseline.data().iter().all(|x| x.is_finite()) {
        return Err(SchemaError::NonFinite { field: "baseline" });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(obs_len: usize, actions: usize) -> EnvSpec {
        EnvSpec {
            obs_dtype: DType::F32,
            obs_shape: vec![obs_len],
            num_actions: actions,
        }
    }

    fn rollout_with_rewards(rewards: &[f32], id: u64) -> Rollout {
        let s = spec(2, 3);
        let rows: Vec<_> = rewards
            .iter()
            .enumerate()
            .map(|(t, &r)| {
                (
                    EnvOutput {
                        observation: Array::vector(vec![r, t as f32]).into(),
                        reward: r,
                        done: t == 0,
                        episode_step: t as i64,
                        episode_return: r,
                    },
                    AgentOutput {
                        action: (t % 3) as i64,
                        policy_logits: vec![r, -r, 0.5],
                        baseline: r * 2.0,
                    },
                )
            })
            .collect();
        Rollout::from_rows(&s, &rows, id, id).unwrap()
    }

    #[test]
    fn singleton_stack() {
        let r = rollout_with_rewards(&[1.0, 2.0, 3.0], 5);
        let b = stack_rollouts([&r], 1).unwrap();
        assert_eq!(b.observation.dims(), &[3, 1, 2]);
        assert_eq!(b.reward.data(), &r.reward[..]);
        assert_eq!(b.policy_logits.data(), r.policy_logits.data());
        assert_eq!(b.model_versions, vec![5]);
        validate_batch(&b, Some(1)).unwrap();
    }

    #[test]
    fn batch_order_preserved() {
        let r0 = rollout_with_rewards(&[1.0, 2.0, 3.0], 0);
        let r1 = rollout_with_rewards(&[4.0, 5.0, 6.0], 1);
        let b = stack_rollouts([&r0, &r1], 1).unwrap();
        let col = |j: usize| (0..3).map(|t| b.reward.get(&[t, j])).collect::<Vec<_>>();
        assert_eq!(col(0), vec![1.0, 2.0, 3.0]);
        assert_eq!(col(1), vec![4.0, 5.0, 6.0]);
    }

    #[test]
    fn shape_arithmetic_includes_bootstrap_row() {
        let s = spec(25, 4);
        let rs: Vec<_> = (0..8).map(|_| Rollout::zeros(&s, 20)).collect();
        let b = stack_rollouts(&rs, 1).unwrap();
        assert_eq!(b.observation.dims(), &[21, 8, 25]);
        assert_eq!(b.policy_logits.dims(), &[21, 8, 4]);
    }

    #[test]
    fn heterogeneous_rollouts_rejected() {
        let a = Rollout::zeros(&spec(2, 3), 4);
        let b = Rollout::zeros(&spec(2, 3), 5);
        let c = Rollout::zeros(&spec(3, 3), 4);
        let d = Rollout::zeros(
            &EnvSpec {
                obs_dtype: DType::U8,
                ..spec(2, 3)
            },
            4,
        );
        assert!(stack_rollouts([&a, &b], 1).is_err());
        assert!(stack_rollouts([&a, &c], 1).is_err());
        assert!(matches!(stack_rollouts([&a, &d], 1), Err(SchemaError::Dtype { .. })));
        assert_eq!(stack_rollouts([&a], 0), Err(SchemaError::BatchDim(0)));
        assert_eq!(stack_rollouts(std::iter::empty(), 1), Err(SchemaError::Empty));
    }

    #[test]
    fn validate_reports_action_range() {
        let r = rollout_with_rewards(&[1.0, 2.0], 0);
        let mut b = stack_rollouts([&r], 1).unwrap();
        b.action.data_mut()[1] = 3;
        let err = validate_batch(&b, None).unwrap_err();
        assert_eq!(err.field(), Some("action"));
        assert!(matches!(err, SchemaError::Range { value: 3, limit: 3, .. }));
    }

    #[test]
    fn validate_reports_reward_dims() {
        let r = rollout_with_rewards(&[1.0, 2.0, 3.0], 0);
        let mut b = stack_rollouts([&r], 1).unwrap();
        b.reward = Array::zeros(&[2, 2]);
        let err = validate_batch(&b, None).unwrap_err();
        assert_eq!(err.field(), Some("done"));
        let mut b = stack_rollouts([&r], 1).unwrap();
        b.reward = Array::zeros(&[2, 2]);
        assert_eq!(validate_batch(&b, Some(1)).unwrap_err().field(), Some("reward"));
        let b = stack_rollouts([&r, &r], 1).unwrap();
        assert_eq!(validate_batch(&b, Some(3)).unwrap_err().field(), Some("reward"));
    }

    #[test]
    fn row_round_trip() {
        let r = rollout_with_rewards(&[1.0, 2.0, 3.0], 0);
        let (env, agent) = r.row(2);
        assert_eq!(env.reward, 3.0);
        assert_eq!(env.observation, DynArray::from(Array::vector(vec![3.0f32, 2.0])));
        assert_eq!(agent.policy_logits, vec![3.0, -3.0, 0.5]);
    }

    #[test]
    fn write_row_rejects_wrong_dtype() {
        let mut r = Rollout::zeros(&spec(2, 3), 2);
        let env = EnvOutput {
            observation: Array::vector(vec![1u8, 2]).into(),
            reward: 0.0,
            done: false,
            episode_step: 0,
            episode_return: 0.0,
        };
        let agent = AgentOutput {
            action: 0,
            policy_logits: vec![0.0; 3],
            baseline: 0.0,
        };
        assert!(matches!(r.write_row(0, &env, &agent), Err(SchemaError::Dtype { .. })));
    }

    #[test]
    fn finished_episodes_skip_overlap_row_and_fresh_marker() {
        let mut r = rollout_with_rewards(&[0.0, 1.0, 1.0], 0);
        r.done = vec![true, true, false];
        r.episode_step = vec![3, 2, 1];
        r.episode_return = vec![9.0, 1.0, 0.0];
        assert_eq!(r.finished_episodes().collect::<Vec<_>>(), vec![(1.0, 2)]);
        r.episode_step[1] = 0;
        assert_eq!(r.finished_episodes().count(), 0);
    }
}
