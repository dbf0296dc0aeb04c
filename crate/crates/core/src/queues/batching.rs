use std::collections::VecDeque;
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use log::warn;

use super::{QueueError, QueueStats};
use crate::rollout::{stack_rollouts, Rollout, SchemaError, TrainingBatch};

struct State<T> {
    items: VecDeque<T>,
    closed: bool,
    stats: QueueStats,
}

/// Bounded FIFO that hands out items in groups of exactly `batch_size`.
///
/// Producers block while the queue holds `capacity` items. Consumers block
/// until a full batch is available; several consumers may wait at once.
/// After [`close`](Self::close) full batches already queued are still
/// delivered, and a residue smaller than `batch_size` is dropped.
pub struct BatchingQueue<T> {
    state: Mutex<State<T>>,
    not_empty: Condvar,
    not_full: Condvar,
    batch_size: usize,
    capacity: usize,
}

impl<T> BatchingQueue<T> {
    /// Queue with the default capacity of `2 * batch_size`.
    pub fn new(batch_size: usize) -> Self {
        Self::with_capacity(batch_size, 2 * batch_size)
    }

    /// # Panics
    /// If `batch_size` is 0 or `capacity < batch_size`.
    pub fn with_capacity(batch_size: usize, capacity: usize) -> Self {
        assert!(batch_size >= 1, "batch_size must be at least 1");
        assert!(
            capacity >= batch_size,
            "capacity {capacity} cannot hold a batch of {batch_size}"
        );
        BatchingQueue {
            state: Mutex::new(State {
                items: VecDeque::with_capacity(capacity),
                closed: false,
                stats: QueueStats::default(),
            }),
            not_empty: Condvar::new(),
            not_full: Condvar::new(),
            batch_size,
            capacity,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn lock(&self) -> MutexGuard<'_, State<T>> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Appends `item`, blocking while the queue is full.
    pub fn enqueue(&self, item: T) -> Result<(), QueueError> {
        let mut st = self.lock();
        while !st.closed && st.items.len() >= self.capacity {
            st = self.not_full.wait(st).unwrap_or_else(|e| e.into_inner());
        }
        if st.closed {
            return Err(QueueError::Closed);
        }
        st.items.push_back(item);
        st.stats.enqueued += 1;
        if st.items.len() >= self.batch_size {
            self.not_empty.notify_one();
        }
        Ok(())
    }

    /// Blocks until `batch_size` items are queued and removes them in FIFO
    /// order. `None` means the queue was closed and no full batch remains.
    pub fn next_batch(&self) -> Option<Vec<T>> {
        let mut st = self.lock();
        loop {
            if st.items.len() >= self.batch_size {
                let batch: Vec<T> = st.items.drain(..self.batch_size).collect();
                st.stats.batched += batch.len() as u64;
                drop(st);
                self.not_full.notify_all();
                return Some(batch);
            }
            if st.closed {
                Self::drop_residue(&mut st);
                return None;
            }
            st = self.not_empty.wait(st).unwrap_or_else(|e| e.into_inner());
        }
    }

    /// Like [`next_batch`](Self::next_batch) but gives up after `timeout`
    /// with [`QueueError::Timeout`].
    pub fn next_batch_timeout(&self, timeout: Duration) -> Result<Vec<T>, QueueError> {
        let deadline = Instant::now() + timeout;
        let mut st = self.lock();
        loop {
            if st.items.len() >= self.batch_size {
                let batch: Vec<T> = st.items.drain(..self.batch_size).collect();
                st.stats.batched += batch.len() as u64;
                drop(st);
                self.not_full.notify_all();
                return Ok(batch);
            }
            if st.closed {
                Self::drop_residue(&mut st);
                return Err(QueueError::Closed);
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(QueueError::Timeout);
            }
            st = self
                .not_empty
                .wait_timeout(st, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    fn drop_residue(st: &mut State<T>) {
        let n = st.items.len();
        if n > 0 {
            warn!("dropping {n} queued item(s) smaller than a batch at close");
            st.items.clear();
            st.stats.dropped += n as u64;
        }
    }

    /// Wakes every blocked producer and consumer. Idempotent.
    pub fn close(&self) {
        let mut st = self.lock();
        if !st.closed {
            st.closed = true;
            if st.items.len() < self.batch_size {
                Self::drop_residue(&mut st);
            }
        }
        drop(st);
        self.not_empty.notify_all();
        self.not_full.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.lock().closed
    }

    pub fn len(&self) -> usize {
        self.lock().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> QueueStats {
        let st = self.lock();
        QueueStats {
            pending: st.items.len() as u64,
            ..st.stats
        }
    }
}

impl<T: Clone> BatchingQueue<T> {
    /// Copy of the queued items, front first.
    pub fn snapshot(&self) -> Vec<T> {
        self.lock().items.iter().cloned().collect()
    }
}

impl BatchingQueue<Rollout> {
    /// Next batch stacked along axis 1 into a [`TrainingBatch`].
    pub fn next_training_batch(&self) -> Option<Result<TrainingBatch, SchemaError>> {
        self.next_batch().map(|rs| stack_rollouts(&rs, 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use std::thread;
    use std::time::{Duration, Instant};

    #[test]
    fn timed_dequeue() {
        let q = BatchingQueue::new(2);
        q.enqueue(1).unwrap();
        assert_eq!(q.next_batch_timeout(Duration::from_millis(5)), Err(QueueError::Timeout));
        q.enqueue(2).unwrap();
        assert_eq!(q.next_batch_timeout(Duration::from_millis(5)), Ok(vec![1, 2]));
        q.close();
        assert_eq!(q.next_batch_timeout(Duration::from_millis(5)), Err(QueueError::Closed));
    }

    #[test]
    fn single_item_batches() {
        let q = BatchingQueue::new(1);
        q.enqueue(7).unwrap();
        assert_eq!(q.next_batch(), Some(vec![7]));
    }

    #[test]
    fn partial_batch_withheld() {
        let q = Arc::new(BatchingQueue::with_capacity(2, 4));
        for i in 0..3 {
            q.enqueue(i).unwrap();
        }
        assert_eq!(q.next_batch(), Some(vec![0, 1]));
        let q2 = Arc::clone(&q);
        let consumer = thread::spawn(move || q2.next_batch());
        thread::sleep(Duration::from_millis(50));
        assert!(!consumer.is_finished());
        q.enqueue(3).unwrap();
        assert_eq!(consumer.join().unwrap(), Some(vec![2, 3]));
    }

    #[test]
    fn enqueue_after_close_fails() {
        let q = BatchingQueue::new(2);
        q.close();
        assert_eq!(q.enqueue(1), Err(QueueError::Closed));
        assert_eq!(q.next_batch(), None);
    }

    #[test]
    fn residue_dropped_at_close() {
        let q = BatchingQueue::new(2);
        q.enqueue(1).unwrap();
        q.close();
        assert_eq!(q.next_batch(), None);
        let s = q.stats();
        assert_eq!((s.enqueued, s.batched, s.dropped, s.pending), (1, 0, 1, 0));
    }

    #[test]
    fn full_batches_survive_close() {
        let q = BatchingQueue::with_capacity(2, 5);
        for i in 0..5 {
            q.enqueue(i).unwrap();
        }
        q.close();
        assert_eq!(q.next_batch(), Some(vec![0, 1]));
        assert_eq!(q.next_batch(), Some(vec![2, 3]));
        assert_eq!(q.next_batch(), None);
        assert_eq!(q.stats().dropped, 1);
    }

    #[test]
    fn close_wakes_blocked_parties() {
        let q = Arc::new(BatchingQueue::with_capacity(2, 2));
        q.enqueue(0).unwrap();
        q.enqueue(1).unwrap();
        let producer = {
            let q = Arc::clone(&q);
            thread::spawn(move || q.enqueue(2))
        };
        let empty = Arc::new(BatchingQueue::<u32>::new(3));
        let consumer = {
            let q = Arc::clone(&empty);
            thread::spawn(move || q.next_batch())
        };
        thread::sleep(Duration::from_millis(30));
        let start = Instant::now();
        q.close();
        empty.close();
        empty.close();
        assert_eq!(producer.join().unwrap(), Err(QueueError::Closed));
        assert_eq!(consumer.join().unwrap(), None);
        assert!(start.elapsed() < Duration::from_secs(1));
    }

    #[test]
    fn k_batches_from_k_times_b_items() {
        let q = Arc::new(BatchingQueue::new(4));
        let producers: Vec<_> = (0..4)
            .map(|p| {
                let q = Arc::clone(&q);
                thread::spawn(move || {
                    for i in 0..25 {
                        q.enqueue((p, i)).unwrap();
                    }
                })
            })
            .collect();
        let mut batches = Vec::new();
        for _ in 0..25 {
            batches.push(q.next_batch().unwrap());
        }
        for p in producers {
            p.join().unwrap();
        }
        q.close();
        assert_eq!(q.next_batch(), None);
        assert_eq!(batches.len(), 25);
        // Per-producer FIFO.
        let flat: Vec<_> = batches.into_iter().flatten().collect();
        for p in 0..4 {
            let seq: Vec<_> = flat.iter().filter(|(q, _)| *q == p).map(|&(_, i)| i).collect();
            assert_eq!(seq, (0..25).collect::<Vec<_>>());
        }
    }
}
