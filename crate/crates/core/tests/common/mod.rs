//! Oracles and generators shared by the integration tests.

#![allow(dead_code)]

use beastpipe::numerics::DynArray;
use beastpipe::rollout::{stack_rollouts, AgentOutput, EnvOutput, EnvSpec, Rollout, TrainingBatch};
use beastpipe::vtrace::{compute_losses, loss_with_targets, LossInputs, VtraceConfig};
use beastpipe::{Array, DType, ModelShape, Params64};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for per-element relative error.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn uniform_array<R: Rng>(rng: &mut R, dims: &[usize], lo: f64, hi: f64) -> Array<f64> {
    Array::from_fn(dims, |_| rng.gen_range(lo..hi))
}

/// `(log_rhos, discounts, rewards, values, bootstrap)`
pub type VtraceInputs = (Array<f64>, Array<f64>, Array<f64>, Array<f64>, Array<f64>);

pub fn vtrace_instance<R: Rng>(rng: &mut R, t: usize, b: usize) -> VtraceInputs {
    let log_rhos = uniform_array(rng, &[t, b], -2.0, 2.0);
    let discounts = Array::from_fn(&[t, b], |_| {
        if rng.gen_bool(0.2) {
            0.0
        } else {
            rng.gen_range(0.8..1.0)
        }
    });
    let rewards = uniform_array(rng, &[t, b], -1.0, 1.0);
    let values = uniform_array(rng, &[t, b], -2.0, 2.0);
    let bootstrap = uniform_array(rng, &[b], -2.0, 2.0);
    (log_rhos, discounts, rewards, values, bootstrap)
}

/// Discounted n-step return to the bootstrap value, summed forward:
/// `G_s = Σ_{t≥s} (Π_{k=s}^{t−1} γ_k) r_t + (Π_{k=s}^{T−1} γ_k) V_boot`.
pub fn nstep_returns(discounts: &Array<f64>, rewards: &Array<f64>, bootstrap: &Array<f64>) -> Array<f64> {
    let (t_len, b) = (discounts.dims()[0], discounts.dims()[1]);
    Array::from_fn(&[t_len, b], |i| {
        let (s, j) = (i / b, i % b);
        let mut g = 0.0;
        let mut scale = 1.0;
        for t in s..t_len {
            g += scale * rewards.get(&[t, j]);
            scale *= discounts.get(&[t, j]);
        }
        g + scale * bootstrap.data()[j]
    })
}

/// Random parameters and observations whose hidden pre-activations stay at
/// least `margin` away from the ReLU kink, so central differences are valid.
pub fn smooth_mlp_instance<R: Rng>(rng: &mut R, n: usize, shape: ModelShape, margin: f64) -> (Params64, Array<f64>) {
    loop {
        let mut params = Params64::init(shape, rng);
        for (_, t) in params.tensors_mut() {
            for v in t.data_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        let obs = uniform_array(rng, &[n, shape.obs_dim], -1.0, 1.0);
        let d = shape.obs_dim;
        let clear = obs.rows().all(|x| {
            params.w1.data().chunks_exact(d).zip(params.b1.data()).all(|(w, &b)| {
                let pre: f64 = b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
                pre.abs() > margin
            })
        });
        if clear {
            return (params, obs);
        }
    }
}

/// Central differences of `f` with respect to every parameter element,
/// compared against `analytic`. Returns the largest relative error.
pub fn check_param_gradient(
    params: &Params64,
    analytic: &beastpipe::numerics::GradientSet<f64>,
    f: impl Fn(&Params64) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (k, (_, g)) in analytic.tensors().into_iter().enumerate() {
        for i in 0..g.len() {
            let orig = params.tensors()[k].1.data()[i];
            probe.tensors_mut()[k].1.data_mut()[i] = orig + FD_STEP;
            let up = f(&probe);
            probe.tensors_mut()[k].1.data_mut()[i] = orig - FD_STEP;
            let down = f(&probe);
            probe.tensors_mut()[k].1.data_mut()[i] = orig;
            worst = worst.max(rel_err(g.data()[i], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// `mlp_backward` against central differences of `Σ u_l·logits + Σ u_b·baseline`.
pub fn mlp_gradcheck<R: Rng>(rng: &mut R) -> f64 {
    let shape = ModelShape::new(rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=8));
    let n = rng.gen_range(1..=5);
    let (params, obs) = smooth_mlp_instance(rng, n, shape, 1e-3);
    let ul = uniform_array(rng, &[n, shape.num_actions], -1.0, 1.0);
    let ub = uniform_array(rng, &[n], -1.0, 1.0);
    let objective = |p: &Params64| {
        let out = p.forward(&obs).unwrap();
        let a: f64 = out.logits.data().iter().zip(ul.data()).map(|(x, u)| x * u).sum();
        let b: f64 = out.baseline.data().iter().zip(ub.data()).map(|(x, u)| x * u).sum();
        a + b
    };
    let analytic = params.backward(&obs, &ul, &ub).unwrap();
    check_param_gradient(&params, &analytic, objective)
}

pub fn random_env_output<R: Rng>(rng: &mut R, spec: &EnvSpec) -> EnvOutput {
    let obs = Array::from_fn(&spec.obs_shape, |_| rng.gen_range(-1.0f32..1.0));
    EnvOutput {
        observation: DynArray::from(obs),
        reward: rng.gen_range(-1.0..1.0),
        done: rng.gen_bool(0.2),
        episode_step: rng.gen_range(0..10),
        episode_return: rng.gen_range(-3.0..3.0),
    }
}

pub fn random_agent_output<R: Rng>(rng: &mut R, num_actions: usize) -> AgentOutput {
    AgentOutput {
        action: rng.gen_range(0..num_actions as i64),
        policy_logits: (0..num_actions).map(|_| rng.gen_range(-2.0f32..2.0)).collect(),
        baseline: rng.gen_range(-1.0..1.0),
    }
}

pub fn random_batch<R: Rng>(rng: &mut R, spec: &EnvSpec, t: usize, b: usize) -> TrainingBatch {
    let rollouts: Vec<Rollout> = (0..b)
        .map(|j| {
            let rows: Vec<_> = (0..=t)
                .map(|_| (random_env_output(rng, spec), random_agent_output(rng, spec.num_actions)))
                .collect();
            Rollout::from_rows(spec, &rows, 0, j as u64).unwrap()
        })
        .collect();
    stack_rollouts(&rollouts, 1).unwrap()
}

pub fn random_vtrace_config<R: Rng>(rng: &mut R) -> VtraceConfig {
    VtraceConfig {
        discount: rng.gen_range(0.8..1.0),
        rho_bar: rng.gen_range(0.5..2.0),
        c_bar: rng.gen_range(0.5..2.0),
        pg_cost: rng.gen_range(0.5..1.5),
        baseline_cost: rng.gen_range(0.1..1.0),
        entropy_cost: rng.gen_range(0.001..0.1),
    }
}

/// `compute_losses` gradients with respect to learner logits and baseline
/// against central differences of the total loss (targets held fixed).
pub fn loss_gradcheck<R: Rng>(rng: &mut R) -> f64 {
    let spec = EnvSpec {
        obs_dtype: DType::F32,
        obs_shape: vec![rng.gen_range(1..=4)],
        num_actions: rng.gen_range(1..=6),
    };
    let (t, b, a) = (rng.gen_range(1..=6), rng.gen_range(1..=4), spec.num_actions);
    let batch = random_batch(rng, &spec, t, b);
    let cfg = random_vtrace_config(rng);
    let logits = uniform_array(rng, &[t, b, a], -2.0, 2.0);
    let baseline = uniform_array(rng, &[t + 1, b], -2.0, 2.0);
    let (_, grads, targets) = compute_losses(&batch, &logits, &baseline, &cfg).unwrap();
    let actions = LossInputs::<f64>::from_batch(&batch, cfg.discount).actions;
    let total = |z: &Array<f64>, v: &Array<f64>| loss_with_targets(z, v, &actions, &targets, &cfg).unwrap().0.total;

    let mut worst = 0.0f64;
    let mut z = logits.clone();
    for i in 0..z.len() {
        let orig = z.data()[i];
        z.data_mut()[i] = orig + FD_STEP;
        let up = total(&z, &baseline);
        z.data_mut()[i] = orig - FD_STEP;
        let down = total(&z, &baseline);
        z.data_mut()[i] = orig;
        worst = worst.max(rel_err(grads.logits.data()[i], (up - down) / (2.0 * FD_STEP)));
    }
    let mut v = baseline.clone();
    for i in 0..v.len() {
        let orig = v.data()[i];
        v.data_mut()[i] = orig + FD_STEP;
        let up = total(&logits, &v);
        v.data_mut()[i] = orig - FD_STEP;
        let down = total(&logits, &v);
        v.data_mut()[i] = orig;
        worst = worst.max(rel_err(grads.baseline.data()[i], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

/// The learner's full chain, loss gradients pushed through `mlp_backward`,
/// against central differences over the parameters with targets fixed.
pub fn learner_chain_gradcheck<R: Rng>(rng: &mut R) -> f64 {
    let d = rng.gen_range(1..=4);
    let shape = ModelShape::new(d, rng.gen_range(1..=8), rng.gen_range(2..=5));
    let spec = EnvSpec {
        obs_dtype: DType::F32,
        obs_shape: vec![d],
        num_actions: shape.num_actions,
    };
    let (t, b, a) = (rng.gen_range(1..=4), rng.gen_range(1..=3), shape.num_actions);
    let n = (t + 1) * b;
    let (params, _) = smooth_mlp_instance(rng, 1, shape, 1e-3);
    // Regenerate the batch until its observations also clear the kink.
    let (batch, obs) = loop {
        let batch = random_batch(rng, &spec, t, b);
        let obs = batch.observations_f32().map(|x| x as f64);
        let clear = obs.rows().all(|x| {
            params
                .w1
                .data()
                .chunks_exact(d)
                .zip(params.b1.data())
                .all(|(w, &bias)| (bias + w.iter().zip(x).map(|(p, q)| p * q).sum::<f64>()).abs() > 1e-3)
        });
        if clear {
            break (batch, obs);
        }
    };
    let cfg = random_vtrace_config(rng);
    let split = |p: &Params64| {
        let out = p.forward(&obs).unwrap();
        let logits = Array::new(vec![t, b, a], out.logits.data()[..t * b * a].to_vec()).unwrap();
        let baseline = out.baseline.reshape(&[t + 1, b]).unwrap();
        (logits, baseline)
    };
    let (logits, baseline) = split(&params);
    let (_, grads, targets) = compute_losses(&batch, &logits, &baseline, &cfg).unwrap();
    let actions = LossInputs::<f64>::from_batch(&batch, cfg.discount).actions;
    let mut up_logits = grads.logits.data().to_vec();
    up_logits.resize(n * a, 0.0);
    let up_logits = Array::new(vec![n, a], up_logits).unwrap();
    let up_baseline = grads.baseline.reshape(&[n]).unwrap();
    let analytic = params.backward(&obs, &up_logits, &up_baseline).unwrap();
    check_param_gradient(&params, &analytic, |p| {
        let (z, v) = split(p);
        loss_with_targets(&z, &v, &actions, &targets, &cfg).unwrap().0.total
    })
}

/// Fraction of successful episodes of a uniform random policy on a fresh
/// environment from `make`.
pub fn random_policy_return<R: Rng>(
    rng: &mut R,
    mut env: beastpipe::envs::Accounted<Box<dyn beastpipe::envs::Environment>>,
    episodes: usize,
) -> f64 {
    let a = env.spec().num_actions as i64;
    env.initial();
    let mut total = 0.0;
    let mut done = 0;
    while done < episodes {
        let out = env.step(rng.gen_range(0..a)).unwrap();
        if out.done {
            total += out.episode_return as f64;
            done += 1;
        }
    }
    total / episodes as f64
}
