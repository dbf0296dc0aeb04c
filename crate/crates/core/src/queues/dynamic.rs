use std::collections::VecDeque;
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use log::warn;

use super::{QueueError, QueueStats};

struct Pending<I, O> {
    input: I,
    reply: SyncSender<O>,
}

struct State<I, O> {
    waiting: VecDeque<Pending<I, O>>,
    closed: bool,
    stats: QueueStats,
}

/// Optional lower bound on batch size: a consumer waits for `size` items,
/// but no longer than `timeout` after it first sees a waiting item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MinBatch {
    pub size: usize,
    pub timeout: Duration,
}

/// Round-trips single requests from many submitters through batched
/// evaluation by a consumer loop.
///
/// Each [`next_batch`](Self::next_batch) takes everything currently waiting,
/// up to `max_batch_size`, without artificial delay. The consumer answers
/// through [`BatchHandle::set_outputs`], which routes output `i` back to the
/// submitter of input `i`.
pub struct DynamicBatcher<I, O> {
    state: Mutex<State<I, O>>,
    available: Condvar,
    max_batch_size: usize,
    min_batch: Option<MinBatch>,
}

impl<I, O> DynamicBatcher<I, O> {
    /// # Panics
    /// If `max_batch_size` is 0.
    pub fn new(max_batch_size: usize) -> Self {
        assert!(max_batch_size >= 1, "max_batch_size must be at least 1");
        DynamicBatcher {
            state: Mutex::new(State {
                waiting: VecDeque::new(),
                closed: false,
                stats: QueueStats::default(),
            }),
            available: Condvar::new(),
            max_batch_size,
            min_batch: None,
        }
    }

    pub fn with_min_batch(mut self, min_batch: MinBatch) -> Self {
        self.min_batch = Some(MinBatch {
            size: min_batch.size.clamp(1, self.max_batch_size),
            ..min_batch
        });
        self
    }

    pub fn max_batch_size(&self) -> usize {
        self.max_batch_size
    }

    fn lock(&self) -> MutexGuard<'_, State<I, O>> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Queues `input` and blocks until a consumer answers it.
    pub fn submit(&self, input: I) -> Result<O, QueueError> {
        let rx = self.submit_async(input)?;
        rx.recv().map_err(|_| QueueError::Closed)
    }

    /// Queues `input` and returns the channel its output will arrive on. The
    /// sender side is dropped without a value if the batcher closes first.
    pub fn submit_async(&self, input: I) -> Result<Receiver<O>, QueueError> {
        let (tx, rx) = sync_channel(1);
        let mut st = self.lock();
        if st.closed {
            return Err(QueueError::Closed);
        }
        st.waiting.push_back(Pending { input, reply: tx });
        st.stats.enqueued += 1;
        drop(st);
        self.available.notify_one();
        Ok(rx)
    }

    /// Blocks until at least one request is waiting, then takes up to
    /// `max_batch_size` of them. `None` after close.
    pub fn next_batch(&self) -> Option<BatchHandle<I, O>> {
        let mut st = self.lock();
        let mut deadline: Option<Instant> = None;
        loop {
            if st.closed {
                return None;
            }
            let n = st.waiting.len();
            if n > 0 {
                match self.min_batch {
                    Some(min) if n < min.size => {
                        let d = *deadline.get_or_insert_with(|| Instant::now() + min.timeout);
                        let now = Instant::now();
                        if now < d {
                            st = self
                                .available
                                .wait_timeout(st, d - now)
                                .unwrap_or_else(|e| e.into_inner())
                                .0;
                            continue;
                        }
                    }
                    _ => {}
                }
                let take = n.min(self.max_batch_size);
                let (inputs, replies) = st.waiting.drain(..take).map(|p| (p.input, p.reply)).unzip();
                st.stats.batched += take as u64;
                return Some(BatchHandle {
                    inputs,
                    replies,
                    answered: false,
                });
            }
            st = self.available.wait(st).unwrap_or_else(|e| e.into_inner());
        }
    }

    /// Wakes blocked consumers and fails every request not yet taken into a
    /// batch. Handles already handed out still deliver. Idempotent.
    pub fn close(&self) {
        let mut st = self.lock();
        if !st.closed {
            st.closed = true;
            let n = st.waiting.len();
            if n > 0 {
                warn!("dropping {n} unbatched inference request(s) at close");
            }
            st.stats.dropped += n as u64;
            st.waiting.clear();
        }
        drop(st);
        self.available.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.lock().closed
    }

    pub fn stats(&self) -> QueueStats {
        let st = self.lock();
        QueueStats {
            pending: st.waiting.len() as u64,
            ..st.stats
        }
    }
}

/// One dynamically formed batch. Dropping it unanswered releases its
/// submitters with [`QueueError::Closed`].
pub struct BatchHandle<I, O> {
    inputs: Vec<I>,
    replies: Vec<SyncSender<O>>,
    answered: bool,
}

impl<I, O> BatchHandle<I, O> {
    pub fn inputs(&self) -> &[I] {
        &self.inputs
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Sends `outputs[i]` to the submitter of `inputs()[i]`. Accepted once;
    /// a length mismatch is rejected and leaves the handle answerable.
    pub fn set_outputs(&mut self, outputs: Vec<O>) -> Result<(), QueueError> {
        if self.answered {
            return Err(QueueError::AlreadyAnswered);
        }
        if outputs.len() != self.inputs.len() {
            return Err(QueueError::BatchLength {
                expected: self.inputs.len(),
                got: outputs.len(),
            });
        }
        self.answered = true;
        for (reply, out) in self.replies.drain(..).zip(outputs) {
            // A submitter that gave up is not an error for the batch.
            let _ = reply.send(out);
        }
        Ok(())
    }
}
