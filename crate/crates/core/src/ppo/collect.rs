use rayon::prelude::*;

use super::buffer::RolloutBuffer;
use crate::autodiff::{Tape, Tensor};
use crate::env::{EnvConfig, EnvSnapshot, Observation, Reacher};
use crate::error::{contract_err, Error, Result};
use crate::model::{sample_action, Agent};
use crate::rng;

/// A fixed set of reachers stepped in lockstep on a private worker pool.
///
/// Every environment draws its episodes from its own seeded stream and
/// results are gathered by environment index, so the worker count never
/// changes what is observed.
pub struct VecEnv {
    envs: Vec<Reacher>,
    obs: Vec<Observation>,
    pool: rayon::ThreadPool,
    workers: usize,
}

pub(crate) struct StepOutcome {
    pub reward: f64,
    pub done: bool,
}

impl VecEnv {
    /// `n_envs` instances of `config`, each reset to its first episode.
    pub fn new(config: &EnvConfig, n_envs: usize, workers: usize) -> Result<Self> {
        if n_envs == 0 || workers == 0 {
            return contract_err("need at least one environment and one worker");
        }
        let mut envs = (0..n_envs)
            .map(|i| Reacher::new(config.clone(), i as u64))
            .collect::<Result<Vec<_>>>()?;
        let obs = envs.iter_mut().map(Reacher::reset).collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .thread_name(|i| format!("env-worker-{i}"))
            .build()
            .map_err(|e| Error::Config(format!("cannot start env workers: {e}")))?;
        Ok(Self {
            envs,
            obs,
            pool,
            workers,
        })
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn config(&self) -> &EnvConfig {
        self.envs[0].config()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.obs
    }

    pub fn snapshots(&self) -> Vec<EnvSnapshot> {
        self.envs.iter().map(|e| e.snapshot().clone()).collect()
    }

    /// Resume from snapshots; current observations are re-derived from state.
    pub fn restore(&mut self, snapshots: Vec<EnvSnapshot>) -> Result<()> {
        if snapshots.len() != self.envs.len() {
            return contract_err(format!(
                "{} snapshots for {} environments",
                snapshots.len(),
                self.envs.len()
            ));
        }
        for (env, snap) in self.envs.iter_mut().zip(snapshots) {
            if snap.done {
                return contract_err("cannot resume an environment mid-reset");
            }
            env.restore(snap)?;
        }
        self.obs = self.envs.iter().map(Reacher::observe).collect();
        Ok(())
    }

    /// Step every environment; finished episodes restart immediately.
    pub(crate) fn step(&mut self, actions: &[Vec<f64>]) -> Result<Vec<StepOutcome>> {
        if actions.len() != self.envs.len() {
            return contract_err("one action per environment required");
        }
        let envs = &mut self.envs;
        let obs = &mut self.obs;
        self.pool.install(|| {
            envs.par_iter_mut()
                .zip(obs.par_iter_mut())
                .zip(actions.par_iter())
                .map(|((env, ob), a)| {
                    let res = env.step(a)?;
                    let done = res.terminated || res.truncated;
                    *ob = if done { env.reset() } else { res.observation };
                    Ok(StepOutcome {
                        reward: res.reward,
                        done,
                    })
                })
                .collect()
        })
    }

    fn at_episode_start(&self, e: usize) -> bool {
        self.envs[e].snapshot().steps == 0
    }
}

/// Batched policy inputs: `B × global_width` and `(B·n) × d`.
pub fn policy_inputs(agent: &Agent, obs: &[&Observation], total_reach: f64) -> Result<(Tensor, Tensor)> {
    let b = obs.len();
    let global = if agent.variant().uses_images() {
        let images: Vec<_> = obs.iter().map(|o| &o.image).collect();
        agent.image_features(&images)?
    } else {
        let data = obs.iter().flat_map(|o| o.target_normalized).collect();
        Tensor::new(&[b, 2], data)?
    };
    let joints: Vec<f64> = obs.iter().flat_map(|o| o.joint_features(total_reach)).collect();
    let joints = Tensor::new(&[b * agent.n_joints(), agent.joint_dim()], joints)?;
    Ok((global, joints))
}

/// Means (`B × n`, flat) and values (`B`) without recording gradients.
pub(crate) fn forward_batch(agent: &Agent, global: Tensor, joints: Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let g = tape.constant(global);
    let j = tape.constant(joints);
    let out = agent.forward(&mut tape, g, j)?;
    Ok((
        tape.value(out.mean).data().to_vec(),
        tape.value(out.value).data().to_vec(),
    ))
}

/// Run `n_steps` synchronous steps on every environment with stochastic
/// actions and return the filled (not yet finished) buffer.
///
/// Action noise for environment `e` in rollout `k` comes from a stream keyed
/// by `(seed, k, e)`.
pub fn collect_rollout(
    agent: &Agent,
    venv: &mut VecEnv,
    n_steps: usize,
    seed: u64,
    rollout_index: u64,
) -> Result<RolloutBuffer> {
    let n_envs = venv.len();
    let n = agent.n_joints();
    let d = agent.joint_dim();
    let gw = agent.global_input_width();
    let reach = venv.config().total_reach();
    if venv.config().n_joints != n || venv.config().joint_dim() != d {
        return contract_err("agent and environment disagree on the joint layout");
    }
    let keep_images = agent.variant().uses_images();
    let mut buf = RolloutBuffer::zeroed(n_envs, n_steps, n, d, gw);
    let log_sigma = agent.log_sigma();
    buf.log_sigma = log_sigma;
    let mut rngs: Vec<_> = (0..n_envs as u64)
        .map(|e| rng::stream(seed, &[rng::tag::ACTION, rollout_index, e]))
        .collect();
    let mut images: Vec<Vec<_>> = vec![Vec::new(); if keep_images { n_envs } else { 0 }];

    for step in 0..n_steps {
        let obs_refs: Vec<_> = venv.observations().iter().collect();
        let (global, joints) = policy_inputs(agent, &obs_refs, reach)?;
        let (means, values) = forward_batch(agent, global.clone(), joints.clone())?;
        let mut actions = Vec::with_capacity(n_envs);
        for e in 0..n_envs {
            let i = buf.index(e, step);
            let ob = &venv.observations()[e];
            buf.global[i * gw..(i + 1) * gw].copy_from_slice(global.row(e));
            let jw = n * d;
            buf.joints[i * jw..(i + 1) * jw].copy_from_slice(&joints.data()[e * jw..(e + 1) * jw]);
            buf.targets[i] = ob.target_normalized;
            if keep_images {
                images[e].push(ob.image.clone());
            }
            buf.episode_starts[i] = venv.at_episode_start(e);
            let mean = &means[e * n..(e + 1) * n];
            let (action, lp) = sample_action(mean, log_sigma, false, &mut rngs[e]);
            buf.means[i * n..(i + 1) * n].copy_from_slice(mean);
            buf.actions[i * n..(i + 1) * n].copy_from_slice(&action);
            buf.log_probs[i] = lp;
            buf.values[i] = values[e];
            actions.push(action);
        }
        for (e, out) in venv.step(&actions)?.into_iter().enumerate() {
            let i = buf.index(e, step);
            buf.rewards[i] = out.reward;
            buf.dones[i] = out.done;
        }
    }

    let obs_refs: Vec<_> = venv.observations().iter().collect();
    let (global, joints) = policy_inputs(agent, &obs_refs, reach)?;
    buf.last_values = forward_batch(agent, global, joints)?.1;
    buf.images = images.into_iter().flatten().collect();
    Ok(buf)
}
