//! Producer/consumer structures between actors, inference and the learner.

mod batching;
mod dynamic;

use thiserror::Error;

pub use batching::BatchingQueue;
pub use dynamic::{BatchHandle, DynamicBatcher, MinBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum QueueError {
    #[error("queue closed")]
    Closed,
    #[error("batch has {expected} inputs but {got} outputs were set")]
    BatchLength { expected: usize, got: usize },
    #[error("batch outputs already set")]
    AlreadyAnswered,
    #[error("timed out waiting for a batch")]
    Timeout,
}

/// Item counters. Over a run, `enqueued = batched + dropped + pending`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueueStats {
    pub enqueued: u64,
    pub batched: u64,
    pub dropped: u64,
    pub pending: u64,
}

impl QueueStats {
    pub fn is_conserved(&self) -> bool {
        self.enqueued == self.batched + self.dropped + self.pending
    }
}
