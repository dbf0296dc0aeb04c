use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use log::{error, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::envs::{env_factory, Accounted, Environment};
use crate::numerics::{Array, ModelShape};
use crate::queues::{BatchingQueue, QueueError};
use crate::rollout::{AgentOutput, EnvOutput, EnvSpec, Rollout};
use crate::Params;

use super::policy::{act, ActMode};
use super::{ActorStats, Learner, PipelineConfig, PipelineError, RunSummary, SharedModel};

/// RNG stream for actor sampling, distinct from the one used to
/// initialize parameters from the same seed.
const ACTOR_STREAM: u64 = 1;
const POLL: Duration = Duration::from_millis(20);

/// Who holds a rollout slot index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Owner {
    Free,
    Full,
    Actor(usize),
    Learner(usize),
}

/// Result of the index audit.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LedgerReport {
    pub num_buffers: usize,
    pub transitions: u64,
    pub violations: u64,
    /// Completed Free → Actor → Full → Learner → Free cycles per index.
    pub trips: Vec<u64>,
    /// Final audit against queue contents passed.
    pub final_audit_ok: bool,
}

struct LedgerState {
    owners: Vec<Owner>,
    trips: Vec<u64>,
    transitions: u64,
    violations: u64,
}

/// Tracks the owner of every slot index and checks each hand-off against
/// the only legal cycle `Free → Actor → Full → Learner → Free`. Because each
/// index has exactly one recorded owner and every move must start from the
/// recorded owner, the multiset of free, full and owned indices stays equal
/// to `0..num_buffers` unless a violation is counted.
pub struct IndexLedger {
    state: Mutex<LedgerState>,
}

impl IndexLedger {
    pub fn new(num_buffers: usize) -> Self {
        IndexLedger {
            state: Mutex::new(LedgerState {
                owners: vec![Owner::Free; num_buffers],
                trips: vec![0; num_buffers],
                transitions: 0,
                violations: 0,
            }),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, LedgerState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Records `idx: from → to`. Returns false and counts a violation if the
    /// move is not legal.
    pub fn transition(&self, idx: usize, from: Owner, to: Owner) -> bool {
        let mut st = self.lock();
        st.transitions += 1;
        let legal = matches!(
            (from, to),
            (Owner::Free, Owner::Actor(_))
                | (Owner::Actor(_), Owner::Full)
                | (Owner::Full, Owner::Learner(_))
                | (Owner::Learner(_), Owner::Free)
        );
        let current = st.owners.get(idx).copied();
        if !legal || current != Some(from) {
            st.violations += 1;
            error!("index {idx}: illegal move {from:?} → {to:?} (recorded owner {current:?})");
            return false;
        }
        st.owners[idx] = to;
        if to == Owner::Free {
            st.trips[idx] += 1;
        }
        true
    }

    pub fn owner(&self, idx: usize) -> Owner {
        self.lock().owners[idx]
    }

    pub fn violations(&self) -> u64 {
        self.lock().violations
    }

    /// Checks quiescent queue contents against the ledger: each index appears
    /// exactly once across both queues and sits where the ledger says.
    pub fn audit(&self, free: &[usize], full: &[usize]) -> Result<(), String> {
        let st = self.lock();
        let n = st.owners.len();
        let mut seen = vec![0u32; n];
        for (&idx, place) in free
            .iter()
            .map(|i| (i, Owner::Free))
            .chain(full.iter().map(|i| (i, Owner::Full)))
        {
            if idx >= n {
                return Err(format!("index {idx} out of range"));
            }
            seen[idx] += 1;
            if st.owners[idx] != place {
                return Err(format!(
                    "index {idx} queued as {place:?} but recorded as {:?}",
                    st.owners[idx]
                ));
            }
        }
        for (idx, (&count, owner)) in seen.iter().zip(&st.owners).enumerate() {
            match (count, owner) {
                (1, _) => {}
                (0, Owner::Actor(_) | Owner::Learner(_)) => {
                    return Err(format!("index {idx} still owned by {owner:?}"));
                }
                (0, _) => return Err(format!("index {idx} lost")),
                (c, _) => return Err(format!("index {idx} queued {c} times")),
            }
        }
        Ok(())
    }

    pub fn report(&self, final_audit_ok: bool) -> LedgerReport {
        let st = self.lock();
        LedgerReport {
            num_buffers: st.owners.len(),
            transitions: st.transitions,
            violations: st.violations,
            trips: st.trips.clone(),
            final_audit_ok,
        }
    }
}

struct Shared<'a> {
    cfg: &'a PipelineConfig,
    spec: EnvSpec,
    slots: Vec<Mutex<Rollout>>,
    free: BatchingQueue<usize>,
    full: BatchingQueue<usize>,
    ledger: IndexLedger,
    learner: Learner,
    stop: AtomicBool,
    next_id: AtomicU64,
    failure: Mutex<Option<PipelineError>>,
    /// Lockstep scheduling: rollout `k` is acted with version `k / B` exactly.
    lockstep: bool,
}

impl Shared<'_> {
    fn fail(&self, e: PipelineError) {
        error!("mono run aborting: {e}");
        let mut f = self.failure.lock().unwrap_or_else(|e| e.into_inner());
        if f.is_none() {
            *f = Some(e);
        }
        self.stop.store(true, Ordering::SeqCst);
    }

    fn stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }
}

fn obs_row(env: &EnvOutput) -> Array<f32> {
    let flat = env.observation.to_f32();
    let n = flat.len();
    Array::new(vec![1, n], flat).expect("row shape")
}

fn actor_worker(sh: &Shared<'_>, index: usize, env: Box<dyn Environment>) -> Result<ActorStats, PipelineError> {
    let mut stats = ActorStats {
        index,
        address: "local".into(),
        connections: 1,
        ..Default::default()
    };
    let t_len = sh.cfg.unroll_length;
    let b = sh.cfg.batch_size as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(sh.cfg.seed.wrapping_add(index as u64));
    rng.set_stream(ACTOR_STREAM);
    let mut env = Accounted::new(env);
    let mut act_on = |params: &Params, out: &EnvOutput| -> Result<AgentOutput, PipelineError> {
        Ok(act(params, &obs_row(out), ActMode::Sample, &mut rng)?.remove(0))
    };

    let first = env.initial();
    let params = sh.learner.model().snapshot();
    let agent = act_on(&params, &first)?;
    let mut carried = (first, agent, params.version);
    let mut produced = 0u64;
    while !sh.stopped() {
        if sh.lockstep && !sh.learner.model().wait_for_version(produced / b, &sh.stop) {
            break;
        }
        let idx = match sh.free.next_batch_timeout(POLL) {
            Ok(v) => v[0],
            Err(QueueError::Timeout) => continue,
            Err(_) => break,
        };
        if !sh.ledger.transition(idx, Owner::Free, Owner::Actor(index)) {
            return Err(PipelineError::Ledger(format!(
                "actor {index} received index {idx} out of turn"
            )));
        }
        {
            let mut slot = sh.slots[idx].lock().unwrap_or_else(|e| e.into_inner());
            let (env_out, agent, mut version) = carried;
            slot.write_row(0, &env_out, &agent)?;
            let mut action = agent.action;
            let mut last = (env_out, agent, version);
            for t in 1..=t_len {
                let out = env.step(action)?;
                stats.steps += 1;
                let params = sh.learner.model().snapshot();
                version = version.min(params.version);
                let agent = act_on(&params, &out)?;
                slot.write_row(t, &out, &agent)?;
                action = agent.action;
                last = (out, agent, params.version);
            }
            slot.model_version = version;
            slot.id = sh.next_id.fetch_add(1, Ordering::SeqCst);
            carried = last;
        }
        sh.ledger.transition(idx, Owner::Actor(index), Owner::Full);
        if sh.full.enqueue(idx).is_err() {
            break;
        }
        stats.rollouts += 1;
        produced += 1;
    }
    Ok(stats)
}

fn learner_worker(sh: &Shared<'_>, index: usize) -> Result<(), PipelineError> {
    while !sh.stopped() {
        let idxs = match sh.full.next_batch_timeout(POLL) {
            Ok(v) => v,
            Err(QueueError::Timeout) => continue,
            Err(_) => break,
        };
        for &i in &idxs {
            if !sh.ledger.transition(i, Owner::Full, Owner::Learner(index)) {
                return Err(PipelineError::Ledger(format!(
                    "learner {index} dequeued index {i} out of turn"
                )));
            }
        }
        let rollouts: Vec<Rollout> = idxs
            .iter()
            .map(|&i| sh.slots[i].lock().unwrap_or_else(|e| e.into_inner()).clone())
            .collect();
        for &i in &idxs {
            sh.ledger.transition(i, Owner::Learner(index), Owner::Free);
            sh.free
                .enqueue(i)
                .map_err(|e| PipelineError::Ledger(format!("free queue: {e}")))?;
        }
        if sh.stopped() {
            break;
        }
        let record = sh.learner.step(&rollouts)?;
        if record.frames >= sh.cfg.total_steps {
            sh.stop.store(true, Ordering::SeqCst);
        }
    }
    Ok(())
}

/// Single-process training over shared rollout slots.
///
/// All slot indices start in `free_queue`. Actors take one index, fill the
/// slot with a rollout from their local environment, and push the index to
/// `full_queue`; learner threads take `B` indices, copy the slots out, return
/// the indices to `free_queue` and run a learner step. With one actor and one
/// learner thread acting is scheduled in lockstep with learning so that a
/// fixed seed reproduces the run exactly.
pub fn run_mono(cfg: &PipelineConfig) -> Result<RunSummary, PipelineError> {
    cfg.validate_mono()?;
    let factory = env_factory(&cfg.env)?;
    let spec = factory().spec();
    if spec.obs_dtype == crate::DType::F64 {
        return Err(PipelineError::SpecMismatch("f64 observations are not supported".into()));
    }
    let shape = ModelShape::new(spec.obs_len(), cfg.hidden, spec.num_actions);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Arc::new(SharedModel::new(Params::init(shape, &mut rng)));
    let learner = Learner::new(model, cfg.learner_config())?;

    let n = cfg.num_buffers;
    let free = BatchingQueue::with_capacity(1, n);
    for i in 0..n {
        free.enqueue(i).expect("fresh queue");
    }
    let sh = Shared {
        cfg,
        slots: (0..n)
            .map(|_| Mutex::new(Rollout::zeros(&spec, cfg.unroll_length)))
            .collect(),
        spec,
        free,
        full: BatchingQueue::with_capacity(cfg.batch_size, n),
        ledger: IndexLedger::new(n),
        learner,
        stop: AtomicBool::new(false),
        next_id: AtomicU64::new(0),
        failure: Mutex::new(None),
        lockstep: cfg.num_actors == 1 && cfg.num_learner_threads == 1,
    };
    debug_assert_eq!(sh.free.snapshot(), (0..n).collect::<Vec<_>>());
    info!(
        "mono run: {} actors, {} learner threads, {n} buffers, env {} ({})",
        cfg.num_actors, cfg.num_learner_threads, cfg.env, sh.spec
    );
    let started = Instant::now();

    let actors = thread::scope(|s| {
        let sh = &sh;
        let actors: Vec<_> = (0..cfg.num_actors)
            .map(|i| {
                let env = factory();
                thread::Builder::new()
                    .name(format!("actor-{i}"))
                    .spawn_scoped(s, move || actor_worker(sh, i, env))
                    .expect("spawn actor")
            })
            .collect();
        let learners: Vec<_> = (0..cfg.num_learner_threads)
            .map(|j| {
                thread::Builder::new()
                    .name(format!("learner-{j}"))
                    .spawn_scoped(s, move || learner_worker(sh, j))
                    .expect("spawn learner")
            })
            .collect();
        for (j, h) in learners.into_iter().enumerate() {
            match h.join() {
                Ok(Ok(())) => {}
                Ok(Err(e)) => sh.fail(e),
                Err(_) => sh.fail(PipelineError::WorkerPanic(format!("learner-{j}"))),
            }
        }
        sh.stop.store(true, Ordering::SeqCst);
        let mut stats = Vec::new();
        for (i, h) in actors.into_iter().enumerate() {
            match h.join() {
                Ok(Ok(a)) => stats.push(a),
                Ok(Err(e)) => sh.fail(e),
                Err(_) => sh.fail(PipelineError::WorkerPanic(format!("actor-{i}"))),
            }
        }
        stats
    });

    let audit = sh.ledger.audit(&sh.free.snapshot(), &sh.full.snapshot());
    if let Err(msg) = &audit {
        warn!("final index audit failed: {msg}");
    }
    let full_stats = sh.full.stats();
    sh.free.close();
    sh.full.close();
    if let Some(e) = sh.failure.lock().unwrap_or_else(|e| e.into_inner()).take() {
        return Err(e);
    }
    if let Err(msg) = audit {
        return Err(PipelineError::Ledger(msg));
    }
    sh.learner.finish()?;
    let elapsed = started.elapsed();
    let frames = sh.learner.frames();
    Ok(RunSummary {
        last: sh.learner.last_metrics(),
        steps: sh.learner.steps(),
        frames,
        elapsed,
        fps: frames as f64 / elapsed.as_secs_f64().max(1e-9),
        max_staleness: sh.learner.max_staleness(),
        rollouts_produced: full_stats.enqueued,
        rollouts_consumed: sh.learner.rollouts_consumed(),
        rollouts_dropped: full_stats.pending,
        duplicate_rollout_ids: sh.learner.duplicate_rollout_ids(),
        actors,
        ledger: Some(sh.ledger.report(true)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ledger_accepts_the_cycle() {
        let l = IndexLedger::new(2);
        assert!(l.transition(0, Owner::Free, Owner::Actor(3)));
        assert!(l.transition(0, Owner::Actor(3), Owner::Full));
        assert!(l.transition(0, Owner::Full, Owner::Learner(0)));
        assert!(l.transition(0, Owner::Learner(0), Owner::Free));
        let r = l.report(true);
        assert_eq!((r.violations, r.trips.clone()), (0, vec![1, 0]));
        assert!(l.audit(&[0, 1], &[]).is_ok());
    }

    #[test]
    fn ledger_flags_double_ownership() {
        let l = IndexLedger::new(2);
        assert!(l.transition(1, Owner::Free, Owner::Actor(0)));
        assert!(!l.transition(1, Owner::Free, Owner::Actor(1)));
        assert!(!l.transition(0, Owner::Free, Owner::Full));
        assert!(!l.transition(0, Owner::Actor(0), Owner::Full));
        assert_eq!(l.violations(), 3);
        assert_eq!(l.owner(1), Owner::Actor(0));
    }

    #[test]
    fn audit_detects_loss_and_duplicates() {
        let l = IndexLedger::new(3);
        assert!(l.audit(&[0, 1], &[]).unwrap_err().contains("lost"));
        assert!(l.audit(&[0, 1, 2, 2], &[]).unwrap_err().contains("2 times"));
        assert!(l.audit(&[0, 1], &[2]).unwrap_err().contains("recorded as Free"));
        l.transition(2, Owner::Free, Owner::Actor(0));
        assert!(l.audit(&[0, 1], &[]).unwrap_err().contains("still owned"));
    }

    #[test]
    fn small_run_conserves_indices() {
        let cfg = PipelineConfig {
            env: "bandit".into(),
            unroll_length: 3,
            batch_size: 2,
            num_actors: 3,
            num_buffers: 5,
            num_learner_threads: 2,
            hidden: 8,
            total_steps: 30 * 6,
            ..Default::default()
        };
        let summary = run_mono(&cfg).unwrap();
        assert!(summary.steps >= 30);
        let ledger = summary.ledger.unwrap();
        assert_eq!(ledger.violations, 0);
        assert!(ledger.final_audit_ok);
        // Batches dequeued after the budget is spent are returned unlearned.
        let trips = ledger.trips.iter().sum::<u64>();
        assert!(
            trips >= summary.steps * 2 && trips <= (summary.steps + 2) * 2,
            "{trips}"
        );
        assert_eq!(summary.duplicate_rollout_ids, 0);
    }
}
