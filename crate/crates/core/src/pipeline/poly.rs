use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::{Array, DynArray, ModelShape};
use crate::queues::{BatchingQueue, DynamicBatcher, QueueError};
use crate::rollout::{AgentOutput, EnvOutput, EnvSpec, Rollout};
use crate::wire::{EnvClient, ProtocolError};
use crate::Params;

use super::policy::{act, ActMode};
use super::{Learner, PipelineConfig, PipelineError, RunSummary, SharedModel};

/// Observations in, (agent output, acting model version) out.
pub type InferenceBatcher = DynamicBatcher<DynArray, (AgentOutput, u64)>;

/// Per-actor counters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ActorStats {
    pub index: usize,
    pub address: String,
    pub steps: u64,
    pub rollouts: u64,
    pub connections: u64,
    /// Rows thrown away because the connection dropped mid-rollout.
    pub discarded_rows: u64,
    pub error: Option<String>,
}

/// Serves inference requests until the batcher is closed: one forward pass
/// per batch on the current parameter snapshot, then one sampled action per
/// request.
pub fn inference_loop(model: &SharedModel, batcher: &InferenceBatcher, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while let Some(mut handle) = batcher.next_batch() {
        let params = model.snapshot();
        let mut flat = Vec::new();
        for obs in handle.inputs() {
            obs.extend_f32(&mut flat);
        }
        let n = handle.len();
        let obs = match Array::new(vec![n, flat.len() / n], flat) {
            Ok(o) => o,
            Err(e) => {
                warn!("inference batch rejected: {e}");
                continue;
            }
        };
        match act(&params, &obs, ActMode::Sample, &mut rng) {
            Ok(outs) => {
                let version = params.version;
                let outs = outs.into_iter().map(|o| (o, version)).collect();
                if let Err(e) = handle.set_outputs(outs) {
                    warn!("inference outputs rejected: {e}");
                }
            }
            // Dropping the handle releases the submitters with an error.
            Err(e) => warn!("inference forward failed: {e}"),
        }
    }
    debug!("inference loop exiting");
}

struct ActorCtx<'a> {
    index: usize,
    address: String,
    spec: &'a EnvSpec,
    unroll_length: usize,
    batcher: &'a InferenceBatcher,
    queue: &'a BatchingQueue<Rollout>,
    next_id: &'a AtomicU64,
    stop: &'a AtomicBool,
    retries: u32,
    backoff: Duration,
}

fn connect_with_retry(
    address: &str,
    retries: u32,
    backoff: Duration,
    stop: &AtomicBool,
) -> Result<Option<(EnvClient, EnvOutput)>, ProtocolError> {
    let mut delay = backoff;
    let mut attempt = 0;
    loop {
        if stop.load(Ordering::SeqCst) {
            return Ok(None);
        }
        match EnvClient::connect(address, Duration::from_secs(5)) {
            Ok(c) => return Ok(Some(c)),
            Err(e) if attempt + 1 >= retries.max(1) => return Err(e),
            Err(e) => {
                debug!("connect to {address} failed ({e}); retrying in {delay:?}");
                thread::sleep(delay);
                delay = (delay * 2).min(Duration::from_secs(1));
                attempt += 1;
            }
        }
    }
}

/// Drives one environment connection, assembling `T + 1`-row rollouts that
/// overlap by one row. Reconnects with backoff when the connection drops;
/// the partial rollout is discarded. Returns on stop or queue closure.
fn run_actor(ctx: ActorCtx<'_>) -> ActorStats {
    let mut stats = ActorStats {
        index: ctx.index,
        address: ctx.address.clone(),
        ..Default::default()
    };
    let t_len = ctx.unroll_length;
    'connect: loop {
        let (mut client, mut env_out) = match connect_with_retry(&ctx.address, ctx.retries, ctx.backoff, ctx.stop) {
            Ok(Some(c)) => c,
            Ok(None) => return stats,
            Err(e) => {
                warn!("actor {} giving up on {}: {e}", ctx.index, ctx.address);
                stats.error = Some(e.to_string());
                return stats;
            }
        };
        stats.connections += 1;
        if client.spec() != ctx.spec {
            stats.error = Some(format!("server advertises {}, expected {}", client.spec(), ctx.spec));
            client.close();
            return stats;
        }
        let mut rows: Vec<(EnvOutput, AgentOutput)> = Vec::with_capacity(t_len + 1);
        let mut versions: Vec<u64> = Vec::with_capacity(t_len + 1);
        loop {
            if ctx.stop.load(Ordering::SeqCst) {
                client.close();
                return stats;
            }
            let (agent, version) = match ctx.batcher.submit(env_out.observation.clone()) {
                Ok(r) => r,
                Err(_) => {
                    client.close();
                    return stats;
                }
            };
            let action = agent.action;
            rows.push((env_out, agent));
            versions.push(version);
            if rows.len() == t_len + 1 {
                let id = ctx.next_id.fetch_add(1, Ordering::SeqCst);
                let version = versions.iter().copied().min().unwrap_or(0);
                match Rollout::from_rows(ctx.spec, &rows, version, id) {
                    Ok(r) => {
                        if ctx.queue.enqueue(r).is_err() {
                            client.close();
                            return stats;
                        }
                        stats.rollouts += 1;
                    }
                    Err(e) => {
                        stats.error = Some(e.to_string());
                        client.close();
                        return stats;
                    }
                }
                let last = rows.pop().expect("rollout has rows");
                let last_version = versions.pop().unwrap_or(0);
                rows.clear();
                versions.clear();
                rows.push(last);
                versions.push(last_version);
            }
            match client.step(action) {
                Ok(o) => {
                    stats.steps += 1;
                    env_out = o;
                }
                Err(e) => {
                    if ctx.stop.load(Ordering::SeqCst) {
                        return stats;
                    }
                    warn!("actor {} lost {}: {e}; reconnecting", ctx.index, ctx.address);
                    stats.discarded_rows += rows.len() as u64;
                    continue 'connect;
                }
            }
        }
    }
}

/// Public entry for driving one actor against an address; used by tests
/// that wire the pieces by hand.
#[allow(clippy::too_many_arguments)]
pub fn actor_loop(
    index: usize,
    address: &str,
    spec: &EnvSpec,
    unroll_length: usize,
    batcher: &InferenceBatcher,
    queue: &BatchingQueue<Rollout>,
    next_id: &AtomicU64,
    stop: &AtomicBool,
) -> ActorStats {
    run_actor(ActorCtx {
        index,
        address: address.to_string(),
        spec,
        unroll_length,
        batcher,
        queue,
        next_id,
        stop,
        retries: 20,
        backoff: Duration::from_millis(50),
    })
}

fn probe_spec(cfg: &PipelineConfig) -> Result<EnvSpec, PipelineError> {
    let address = &cfg.server_addresses[0];
    let never = AtomicBool::new(false);
    match connect_with_retry(address, cfg.connect_retries, cfg.connect_backoff, &never) {
        Ok(Some((client, _))) => {
            let spec = client.spec().clone();
            client.close();
            Ok(spec)
        }
        Ok(None) => unreachable!("stop flag never raised"),
        Err(source) => Err(PipelineError::Connect {
            address: address.clone(),
            source,
        }),
    }
}

/// Networked training: `num_actors` actor threads spread round-robin over
/// `server_addresses`, one inference thread and the learner on the calling
/// thread. Runs until `total_steps` frames are consumed.
pub fn run_poly(cfg: &PipelineConfig) -> Result<RunSummary, PipelineError> {
    cfg.validate_poly()?;
    let spec = probe_spec(cfg)?;
    info!("environment: {spec}");
    if spec.obs_dtype == crate::DType::F64 {
        return Err(PipelineError::SpecMismatch("f64 observations are not supported".into()));
    }
    let shape = ModelShape::new(spec.obs_len(), cfg.hidden, spec.num_actions);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Arc::new(SharedModel::new(Params::init(shape, &mut rng)));
    let learner = Learner::new(Arc::clone(&model), cfg.learner_config())?;

    let batcher: InferenceBatcher = DynamicBatcher::new(cfg.num_actors);
    let queue: BatchingQueue<Rollout> = BatchingQueue::new(cfg.batch_size);
    let next_id = AtomicU64::new(0);
    let stop = AtomicBool::new(false);
    let started = Instant::now();

    let (result, actors) = thread::scope(|s| {
        let inference = thread::Builder::new()
            .name("inference".into())
            .spawn_scoped(s, || {
                inference_loop(&model, &batcher, cfg.seed.wrapping_add(cfg.num_actors as u64))
            })
            .expect("spawn inference thread");
        let handles: Vec<_> = (0..cfg.num_actors)
            .map(|i| {
                let ctx = ActorCtx {
                    index: i,
                    address: cfg.server_addresses[i % cfg.server_addresses.len()].clone(),
                    spec: &spec,
                    unroll_length: cfg.unroll_length,
                    batcher: &batcher,
                    queue: &queue,
                    next_id: &next_id,
                    stop: &stop,
                    retries: cfg.connect_retries,
                    backoff: cfg.connect_backoff,
                };
                thread::Builder::new()
                    .name(format!("actor-{i}"))
                    .spawn_scoped(s, move || run_actor(ctx))
                    .expect("spawn actor thread")
            })
            .collect();

        let result = learn_until_done(cfg, &learner, &queue);

        stop.store(true, Ordering::SeqCst);
        queue.close();
        batcher.close();
        let mut actors = Vec::new();
        let mut panicked = None;
        for (i, h) in handles.into_iter().enumerate() {
            match h.join() {
                Ok(a) => actors.push(a),
                Err(_) => panicked = Some(format!("actor-{i}")),
            }
        }
        if inference.join().is_err() {
            panicked = Some("inference".into());
        }
        let result = match panicked {
            Some(name) => Err(PipelineError::WorkerPanic(name)),
            None => result,
        };
        (result, actors)
    });

    let qs = queue.stats();
    if let Err(e) = &result {
        if learner.steps() == 0 {
            if let Some(a) = actors.iter().find(|a| a.error.is_some() && a.connections == 0) {
                warn!(
                    "actor {} never connected: {}",
                    a.index,
                    a.error.as_deref().unwrap_or("")
                );
            }
        }
        warn!("poly run failed: {e}");
    }
    result?;
    learner.finish()?;
    let elapsed = started.elapsed();
    let frames = learner.frames();
    Ok(RunSummary {
        last: learner.last_metrics(),
        steps: learner.steps(),
        frames,
        elapsed,
        fps: frames as f64 / elapsed.as_secs_f64().max(1e-9),
        max_staleness: learner.max_staleness(),
        rollouts_produced: qs.enqueued,
        rollouts_consumed: learner.rollouts_consumed(),
        rollouts_dropped: qs.dropped,
        duplicate_rollout_ids: learner.duplicate_rollout_ids(),
        actors,
        ledger: None,
    })
}

/// Learner loop: consume batches until the frame budget is spent. Fails if
/// every actor has given up before the budget is reached.
fn learn_until_done(
    cfg: &PipelineConfig,
    learner: &Learner,
    queue: &BatchingQueue<Rollout>,
) -> Result<(), PipelineError> {
    let poll = Duration::from_millis(100);
    let mut idle = Duration::ZERO;
    let patience = cfg.connect_backoff * 4 * cfg.connect_retries.max(1) + Duration::from_secs(10);
    while learner.frames() < cfg.total_steps {
        match queue.next_batch_timeout(poll) {
            Ok(rollouts) => {
                idle = Duration::ZERO;
                learner.step(&rollouts)?;
            }
            Err(QueueError::Timeout) => {
                idle += poll;
                if idle >= patience {
                    return Err(PipelineError::Connect {
                        address: cfg.server_addresses.join(","),
                        source: ProtocolError::Closed,
                    });
                }
            }
            Err(_) => break,
        }
    }
    Ok(())
}
