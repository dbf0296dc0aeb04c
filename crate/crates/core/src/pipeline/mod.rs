//! Training pipelines.
//!
//! Both modes feed the same [`Learner`]. In *poly* mode actor threads talk
//! to environment servers over TCP and share one dynamically batched
//! inference loop. In *mono* mode actors own local environments and write
//! rollouts into pre-allocated slots that cycle through a free and a full
//! index queue.

mod eval;
mod learner;
mod metrics;
mod mono;
mod policy;
mod poly;
mod shared;

use std::path::PathBuf;
use std::time::Duration;

use thiserror::Error;

use crate::numerics::checkpoint::CheckpointError;
use crate::numerics::{DimError, OptimError, RmsPropConfig, DEFAULT_HIDDEN};
use crate::rollout::SchemaError;
use crate::vtrace::{VtraceConfig, VtraceError};
use crate::wire::ProtocolError;

pub use eval::{evaluate, EvalSummary};
pub use learner::{Learner, LearnerConfig};
pub use metrics::{EpisodeWindow, MetricsLog, MetricsRecord, CSV_HEADER, EPISODE_WINDOW};
pub use mono::{run_mono, IndexLedger, LedgerReport, Owner};
pub use policy::{act, argmax, sample_action, ActMode};
pub use poly::{actor_loop, inference_loop, run_poly, ActorStats, InferenceBatcher};
pub use shared::SharedModel;

/// Settings shared by both modes. Mode-specific fields are ignored by the
/// other mode.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub unroll_length: usize,
    pub batch_size: usize,
    pub num_actors: usize,
    /// Mono: rollout slots cycling between actors and learner threads.
    pub num_buffers: usize,
    /// Mono: batch consumers.
    pub num_learner_threads: usize,
    /// Poly: environment servers; actor `i` uses address `i mod len`.
    pub server_addresses: Vec<String>,
    /// Mono: environment name.
    pub env: String,
    /// Training stops once this many environment frames are consumed.
    pub total_steps: u64,
    pub hidden: usize,
    pub vtrace: VtraceConfig,
    pub optim: RmsPropConfig,
    pub grad_clip: f64,
    pub seed: u64,
    pub logdir: Option<PathBuf>,
    /// Write a checkpoint every this many learner steps; 0 disables.
    pub checkpoint_every: u64,
    /// Poly: connection attempts per actor before giving up.
    pub connect_retries: u32,
    pub connect_backoff: Duration,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            unroll_length: 20,
            batch_size: 8,
            num_actors: 4,
            num_buffers: 16,
            num_learner_threads: 1,
            server_addresses: Vec::new(),
            env: "grid5".into(),
            total_steps: 500_000,
            hidden: DEFAULT_HIDDEN,
            vtrace: VtraceConfig::default(),
            optim: RmsPropConfig::default(),
            grad_clip: 40.0,
            seed: 1,
            logdir: None,
            checkpoint_every: 0,
            connect_retries: 20,
            connect_backoff: Duration::from_millis(50),
        }
    }
}

/// Smallest valid slot count for a mono run.
pub fn default_num_buffers(batch_size: usize, num_actors: usize) -> usize {
    (2 * batch_size).max(num_actors + 1)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("unroll_length must be ≥ 1")]
    UnrollLength,
    #[error("batch_size must be ≥ 1")]
    BatchSize,
    #[error("num_actors must be ≥ 1")]
    NumActors,
    #[error("num_buffers must be ≥ 2·batch_size (got {num_buffers}, batch_size {batch_size})")]
    BuffersVsBatch { num_buffers: usize, batch_size: usize },
    #[error("num_buffers must be > num_actors (got {num_buffers}, num_actors {num_actors})")]
    BuffersVsActors { num_buffers: usize, num_actors: usize },
    #[error("num_learner_threads must be ≥ 1")]
    LearnerThreads,
    #[error("server_addresses must not be empty")]
    NoServers,
    #[error("hidden must be ≥ 1")]
    Hidden,
    #[error("{0} must be finite and ≥ 0")]
    NonNegative(&'static str),
    #[error("{0}")]
    Vtrace(String),
}

impl PipelineConfig {
    fn validate_common(&self) -> Result<(), ConfigError> {
        if self.unroll_length == 0 {
            return Err(ConfigError::UnrollLength);
        }
        if self.batch_size == 0 {
            return Err(ConfigError::BatchSize);
        }
        if self.num_actors == 0 {
            return Err(ConfigError::NumActors);
        }
        if self.hidden == 0 {
            return Err(ConfigError::Hidden);
        }
        for (name, v) in [
            ("learning_rate", self.optim.learning_rate),
            ("epsilon", self.optim.epsilon),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ConfigError::NonNegative(name));
            }
        }
        if !(0.0..1.0).contains(&self.optim.decay) {
            return Err(ConfigError::Vtrace("decay must lie in [0, 1)".into()));
        }
        self.vtrace.validate().map_err(|e| ConfigError::Vtrace(e.to_string()))
    }

    pub fn validate_poly(&self) -> Result<(), ConfigError> {
        self.validate_common()?;
        if self.server_addresses.is_empty() {
            return Err(ConfigError::NoServers);
        }
        Ok(())
    }

    pub fn validate_mono(&self) -> Result<(), ConfigError> {
        self.validate_common()?;
        if self.num_buffers < 2 * self.batch_size {
            return Err(ConfigError::BuffersVsBatch {
                num_buffers: self.num_buffers,
                batch_size: self.batch_size,
            });
        }
        if self.num_buffers <= self.num_actors {
            return Err(ConfigError::BuffersVsActors {
                num_buffers: self.num_buffers,
                num_actors: self.num_actors,
            });
        }
        if self.num_learner_threads == 0 {
            return Err(ConfigError::LearnerThreads);
        }
        Ok(())
    }

    pub fn learner_config(&self) -> LearnerConfig {
        LearnerConfig {
            unroll_length: self.unroll_length,
            batch_size: self.batch_size,
            vtrace: self.vtrace,
            optim: self.optim,
            grad_clip: self.grad_clip,
            checkpoint_every: self.checkpoint_every,
            logdir: self.logdir.clone(),
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("cannot reach environment server {address}: {source}")]
    Connect {
        address: String,
        #[source]
        source: ProtocolError,
    },
    #[error("environment spec mismatch: {0}")]
    SpecMismatch(String),
    #[error("non-finite {what} at learner step {step}; batch: {dump}")]
    NonFinite { what: String, step: u64, dump: String },
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Vtrace(#[from] VtraceError),
    #[error(transparent)]
    Dim(#[from] DimError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Env(#[from] crate::envs::EnvError),
    #[error("worker {0} panicked")]
    WorkerPanic(String),
    #[error("index ledger: {0}")]
    Ledger(String),
}

/// Outcome of a training run.
#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub last: Option<MetricsRecord>,
    pub steps: u64,
    pub frames: u64,
    pub elapsed: Duration,
    pub fps: f64,
    /// Largest `model.version − min(batch.model_versions)` seen by the learner.
    pub max_staleness: u64,
    pub rollouts_produced: u64,
    pub rollouts_consumed: u64,
    pub rollouts_dropped: u64,
    pub duplicate_rollout_ids: u64,
    pub actors: Vec<ActorStats>,
    /// Mono only.
    pub ledger: Option<LedgerReport>,
}

impl RunSummary {
    pub fn mean_episode_return(&self) -> Option<f64> {
        self.last
            .as_ref()
            .map(|m| m.mean_episode_return)
            .filter(|v| v.is_finite())
    }
}
