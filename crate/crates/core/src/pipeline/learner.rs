use std::collections::HashSet;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use log::{error, info, warn};

use crate::numerics::checkpoint;
use crate::numerics::{Array, RmsProp, RmsPropConfig};
use crate::rollout::{stack_rollouts, validate_batch, Rollout, TrainingBatch};
use crate::vtrace::{compute_losses, VtraceConfig};

use super::metrics::{EpisodeWindow, MetricsLog, MetricsRecord, EPISODE_WINDOW};
use super::{PipelineError, SharedModel};

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerConfig {
    pub unroll_length: usize,
    pub batch_size: usize,
    pub vtrace: VtraceConfig,
    pub optim: RmsPropConfig,
    pub grad_clip: f64,
    pub checkpoint_every: u64,
    pub logdir: Option<PathBuf>,
}

struct State {
    optimizer: RmsProp<f32>,
    step: u64,
    episodes: EpisodeWindow,
    max_staleness: u64,
    seen_ids: HashSet<u64>,
    duplicates: u64,
    consumed: u64,
    last: Option<MetricsRecord>,
    log: Option<MetricsLog>,
}

/// Turns batches of rollouts into parameter updates. Gradients are computed
/// against a snapshot; applying them is serialized, so every published
/// version is the result of exactly one optimizer step.
pub struct Learner {
    model: Arc<SharedModel>,
    cfg: LearnerConfig,
    state: Mutex<State>,
    started: Instant,
}

impl Learner {
    pub fn new(model: Arc<SharedModel>, cfg: LearnerConfig) -> Result<Self, PipelineError> {
        let shape = model.snapshot().shape();
        let log = match &cfg.logdir {
            Some(dir) => {
                let log = MetricsLog::open(dir)?;
                info!("logging metrics to {}", log.path().display());
                Some(log)
            }
            None => None,
        };
        Ok(Learner {
            state: Mutex::new(State {
                optimizer: RmsProp::new(shape, cfg.optim),
                step: 0,
                episodes: EpisodeWindow::new(EPISODE_WINDOW),
                max_staleness: 0,
                seen_ids: HashSet::new(),
                duplicates: 0,
                consumed: 0,
                last: None,
                log,
            }),
            model,
            cfg,
            started: Instant::now(),
        })
    }

    pub fn model(&self) -> &Arc<SharedModel> {
        &self.model
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.cfg
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn steps(&self) -> u64 {
        self.lock().step
    }

    pub fn frames(&self) -> u64 {
        self.steps() * (self.cfg.unroll_length * self.cfg.batch_size) as u64
    }

    pub fn last_metrics(&self) -> Option<MetricsRecord> {
        self.lock().last
    }

    pub fn max_staleness(&self) -> u64 {
        self.lock().max_staleness
    }

    pub fn rollouts_consumed(&self) -> u64 {
        self.lock().consumed
    }

    pub fn duplicate_rollout_ids(&self) -> u64 {
        self.lock().duplicates
    }

    pub fn episodes_finished(&self) -> u64 {
        self.lock().episodes.total()
    }

    pub fn elapsed(&self) -> std::time::Duration {
        self.started.elapsed()
    }

    /// One update from `B` rollouts.
    pub fn step(&self, rollouts: &[Rollout]) -> Result<MetricsRecord, PipelineError> {
        let batch = stack_rollouts(rollouts, 1)?;
        let finished: Vec<f32> = rollouts
            .iter()
            .flat_map(|r| r.finished_episodes().map(|(ret, _)| ret))
            .collect();
        let ids: Vec<u64> = rollouts.iter().map(|r| r.id).collect();
        self.step_batch(&batch, &finished, &ids)
    }

    /// One update from an already stacked batch. `finished_returns` feeds the
    /// episode window and `ids` the duplicate check.
    pub fn step_batch(
        &self,
        batch: &TrainingBatch,
        finished_returns: &[f32],
        ids: &[u64],
    ) -> Result<MetricsRecord, PipelineError> {
        validate_batch(batch, Some(self.cfg.batch_size))?;
        let (t_len, b, a) = (batch.unroll_length(), batch.batch_size(), batch.num_actions());
        if t_len != self.cfg.unroll_length {
            return Err(crate::numerics::DimError::new("unroll length", &[self.cfg.unroll_length], &[t_len]).into());
        }
        let snapshot = self.model.snapshot();
        let obs = batch.observations_f32();
        let fwd = snapshot.forward(&obs)?;
        let mut logits = fwd.logits.into_data();
        logits.truncate(t_len * b * a);
        let logits = Array::new(vec![t_len, b, a], logits)?;
        let baseline = fwd.baseline.reshape(&[t_len + 1, b])?;

        let (losses, grads, _) = compute_losses(batch, &logits, &baseline, &self.cfg.vtrace)?;
        if !losses.total.is_finite() {
            return Err(self.non_finite("loss", batch));
        }
        let mut up_logits = grads.logits.into_data();
        up_logits.resize((t_len + 1) * b * a, 0.0);
        let up_logits = Array::new(vec![(t_len + 1) * b, a], up_logits)?;
        let up_baseline = grads.baseline.reshape(&[(t_len + 1) * b])?;
        let mut g = snapshot.backward(&obs, &up_logits, &up_baseline)?;
        let norm = g.clip_global_norm(self.cfg.grad_clip as f32);
        if !norm.is_finite() {
            return Err(self.non_finite("gradient", batch));
        }

        let mut st = self.lock();
        let mut params = (*self.model.snapshot()).clone();
        let oldest = batch.model_versions.iter().copied().min().unwrap_or(params.version);
        st.max_staleness = st.max_staleness.max(params.version.saturating_sub(oldest));
        st.optimizer.step(&mut params, &g)?;
        let version = params.version;
        self.model.publish(params);

        st.step += 1;
        st.consumed += b as u64;
        for &id in ids {
            if !st.seen_ids.insert(id) {
                st.duplicates += 1;
                warn!("rollout id {id} consumed twice");
            }
        }
        for &r in finished_returns {
            st.episodes.push(r);
        }
        let frames = st.step * (t_len * b) as u64;
        let secs = self.started.elapsed().as_secs_f64();
        let record = MetricsRecord {
            step: st.step,
            frames,
            mean_episode_return: st.episodes.mean(),
            pg_loss: losses.pg_loss as f64,
            baseline_loss: losses.baseline_loss as f64,
            entropy_loss: losses.entropy_loss as f64,
            total_loss: losses.total as f64,
            fps: if secs > 0.0 { frames as f64 / secs } else { 0.0 },
        };
        st.last = Some(record);
        let step = st.step;
        if let Some(log) = st.log.as_mut() {
            log.append(&record)?;
            if step.is_multiple_of(50) {
                log.flush()?;
            }
        }
        if self.cfg.checkpoint_every > 0 && st.step.is_multiple_of(self.cfg.checkpoint_every) {
            if let Some(dir) = &self.cfg.logdir {
                let path = dir.join(format!("ckpt-{:08}.tbst", st.step));
                checkpoint::save(&*self.model.snapshot(), &path)?;
            }
        }
        if st.step.is_multiple_of(100) {
            info!(
                "step {} frames {} return {:.3} loss {:.4} fps {:.0} version {version}",
                record.step, record.frames, record.mean_episode_return, record.total_loss, record.fps
            );
        }
        Ok(record)
    }

    fn non_finite(&self, what: &str, batch: &TrainingBatch) -> PipelineError {
        let finite = |xs: &[f32]| xs.iter().all(|x| x.is_finite());
        let dump = format!(
            "T={} B={} versions={:?} rewards_finite={} logits_finite={} baseline_finite={} obs_finite={}",
            batch.unroll_length(),
            batch.batch_size(),
            batch.model_versions,
            finite(batch.reward.data()),
            finite(batch.policy_logits.data()),
            finite(batch.baseline.data()),
            finite(batch.observations_f32().data()),
        );
        error!("non-finite {what}: {dump}");
        PipelineError::NonFinite {
            what: what.to_string(),
            step: self.steps(),
            dump,
        }
    }

    /// Flushes logs and writes `model.tbst` into the log directory.
    pub fn finish(&self) -> Result<(), PipelineError> {
        let mut st = self.lock();
        if let Some(log) = st.log.as_mut() {
            log.flush()?;
        }
        if let Some(dir) = &self.cfg.logdir {
            checkpoint::save(&*self.model.snapshot(), dir.join("model.tbst"))?;
        }
        Ok(())
    }
}
