use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::Duration;

use crate::Params;

/// Parameters shared between acting and learning. Readers take cheap
/// snapshots; the learner publishes whole new parameter sets.
pub struct SharedModel {
    params: RwLock<Arc<Params>>,
    version: Mutex<u64>,
    changed: Condvar,
}

impl SharedModel {
    pub fn new(params: Params) -> Self {
        let v = params.version;
        SharedModel {
            params: RwLock::new(Arc::new(params)),
            version: Mutex::new(v),
            changed: Condvar::new(),
        }
    }

    pub fn snapshot(&self) -> Arc<Params> {
        Arc::clone(&self.params.read().unwrap_or_else(|e| e.into_inner()))
    }

    pub fn version(&self) -> u64 {
        *self.version.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn publish(&self, params: Params) {
        let v = params.version;
        *self.params.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(params);
        *self.version.lock().unwrap_or_else(|e| e.into_inner()) = v;
        self.changed.notify_all();
    }

    /// Blocks until the version reaches `target` or `stop` is raised.
    /// Returns whether the target was reached.
    pub fn wait_for_version(&self, target: u64, stop: &AtomicBool) -> bool {
        let mut v = self.version.lock().unwrap_or_else(|e| e.into_inner());
        while *v < target {
            if stop.load(Ordering::SeqCst) {
                return false;
            }
            v = self
                .changed
                .wait_timeout(v, Duration::from_millis(20))
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
        true
    }
}
