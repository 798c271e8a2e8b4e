//! The outer training loop: collect a rollout, update the policy with PPO,
//! then fit the image encoder to the rollout's privileged target
//! coordinates.

use rand::seq::SliceRandom;

use crate::autodiff::{Adam, ParamId, Tape, Tensor};
use crate::env::{EnvConfig, EnvSnapshot, GrayImage};
use crate::error::{contract_err, Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::{images_tensor, Agent, Variant};
use crate::ppo::{
    collect_rollout, evaluate_policy, learning_rate, ppo_update, EvalStats, PpoConfig,
    RolloutBuffer, UpdateStats, VecEnv,
};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Start every rollout's encoder phase with fresh Adam moments.
    pub fresh_adam: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 160,
            lr: 1e-3,
            fresh_adam: false,
        }
    }
}

/// Everything one training run (one seed) needs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub n_joints: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub ppo: PpoConfig,
    pub encoder: EncoderConfig,
    /// Evaluate whenever the step count crosses a multiple of this.
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Checkpoint every this many rollouts (and at the end).
    pub checkpoint_every: u64,
    /// Threads stepping the environments during collection.
    pub workers: usize,
}

impl TrainConfig {
    pub fn new(variant: Variant, n_joints: usize, total_steps: u64, seed: u64) -> Self {
        Self {
            variant,
            n_joints,
            total_steps,
            seed,
            ppo: PpoConfig::default(),
            encoder: EncoderConfig::default(),
            eval_every: 10_240,
            eval_episodes: 20,
            checkpoint_every: 10,
            workers: 1,
        }
    }

    pub fn env_config(&self) -> Result<EnvConfig> {
        EnvConfig::for_joints(self.n_joints, self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.ppo.validate()?;
        self.env_config()?.validate()?;
        let err = |m: &str| Err(Error::Config(m.into()));
        if self.total_steps == 0 {
            return err("total_steps must be positive");
        }
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return err("evaluation cadence and episode count must be positive");
        }
        if self.checkpoint_every == 0 || self.workers == 0 {
            return err("checkpoint cadence and worker count must be positive");
        }
        if self.encoder.epochs == 0 || self.encoder.batch_size == 0 || self.encoder.lr < 0.0 {
            return err("encoder epochs and batch size must be positive, lr non-negative");
        }
        Ok(())
    }

    /// Outer iterations needed to reach `total_steps`.
    pub fn iterations(&self) -> u64 {
        self.total_steps.div_ceil(self.ppo.rollout_size() as u64)
    }
}

/// Everything logged for one outer iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub rollout: u64,
    /// Environment steps consumed so far, including this rollout.
    pub timestep: u64,
    pub update: UpdateStats,
    /// Mean minibatch loss of the encoder phase; `None` for numeric variants.
    pub encoder_mse: Option<f64>,
    pub encoder_steps: usize,
    pub lr: f64,
    pub sigma: f64,
    pub eval: Option<EvalStats>,
}

/// Shuffled minibatches of buffer indices for one encoder epoch.
pub fn encoder_batches(len: usize, batch: usize, seed: u64, rollout: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::tag::ENCODER_SHUFFLE, rollout, epoch]));
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Mean squared error of the prediction head, averaged over batch and both
/// coordinates, recorded on `tape`.
pub fn encoder_loss(
    tape: &mut Tape,
    agent: &Agent,
    images: &[&GrayImage],
    targets: &[[f64; 2]],
) -> Result<crate::autodiff::Var> {
    if images.len() != targets.len() || images.is_empty() {
        return contract_err("encoder batch needs one target per image");
    }
    let x = tape.constant(images_tensor(images)?);
    let (_, pred) = agent.encode(tape, x)?;
    let y = tape.constant(Tensor::new(
        &[targets.len(), 2],
        targets.iter().flatten().copied().collect(),
    )?);
    let err = tape.sub(pred, y)?;
    let sq = tape.square(err);
    Ok(tape.mean(sq))
}

/// One supervised Adam step on the encoder; returns the batch MSE.
pub fn encoder_step(
    agent: &mut Agent,
    adam: &mut Adam,
    images: &[&GrayImage],
    targets: &[[f64; 2]],
    lr: f64,
) -> Result<f64> {
    agent.params.zero_grad();
    let mut tape = Tape::new();
    let loss = encoder_loss(&mut tape, agent, images, targets)?;
    tape.backward_into(loss, &mut agent.params)?;
    adam.step(&mut agent.params, lr);
    Ok(tape.value(loss).item())
}

/// A resumable training run.
pub struct Trainer {
    cfg: TrainConfig,
    env_cfg: EnvConfig,
    agent: Agent,
    policy_adam: Adam,
    encoder_adam: Option<Adam>,
    venv: VecEnv,
    rollouts: u64,
    steps: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let env_cfg = cfg.env_config()?;
        let agent = Agent::new(cfg.variant, cfg.n_joints, env_cfg.joint_dim(), cfg.seed)?;
        let policy_adam = Adam::new(&agent.params, agent.policy_ids());
        let encoder_adam = cfg
            .variant
            .uses_images()
            .then(|| Adam::new(&agent.params, agent.encoder_ids()));
        let venv = VecEnv::new(&env_cfg, cfg.ppo.n_envs, cfg.workers)?;
        Ok(Self {
            cfg,
            env_cfg,
            agent,
            policy_adam,
            encoder_adam,
            venv,
            rollouts: 0,
            steps: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn env_config(&self) -> &EnvConfig {
        &self.env_cfg
    }

    pub fn agent(&self) -> &Agent {
        &self.agent
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn rollouts(&self) -> u64 {
        self.rollouts
    }

    pub fn is_finished(&self) -> bool {
        self.steps >= self.cfg.total_steps
    }

    /// Whether the run's checkpoint cadence calls for a save now.
    pub fn checkpoint_due(&self) -> bool {
        self.rollouts % self.cfg.checkpoint_every == 0 || self.is_finished()
    }

    /// One iteration: rollout, all policy epochs, then all encoder epochs,
    /// then (when due) a deterministic evaluation.
    pub fn iterate(&mut self) -> Result<IterationRecord> {
        if self.is_finished() {
            return contract_err("training already reached its step budget");
        }
        let cfg = &self.cfg;
        let mut buf = collect_rollout(&self.agent, &mut self.venv, cfg.ppo.n_steps, cfg.seed, self.rollouts)?;
        buf.finish(cfg.ppo.gamma, cfg.ppo.lambda);
        let prev_steps = self.steps;
        self.steps += buf.len() as u64;
        let lr = learning_rate(self.steps, cfg.total_steps, cfg.ppo.lr0);
        let update = ppo_update(
            &mut self.agent,
            &mut self.policy_adam,
            &buf,
            &cfg.ppo,
            lr,
            cfg.seed,
            self.rollouts,
        )?;
        let (encoder_mse, encoder_steps) = self.encoder_phase(&buf)?;
        drop(buf);

        let crossed = self.steps / self.cfg.eval_every > prev_steps / self.cfg.eval_every;
        let eval = if crossed || self.is_finished() {
            Some(evaluate_policy(
                &self.agent,
                &self.env_cfg,
                self.cfg.eval_episodes,
                self.cfg.seed,
            )?)
        } else {
            None
        };
        let record = IterationRecord {
            rollout: self.rollouts,
            timestep: self.steps,
            update,
            encoder_mse,
            encoder_steps,
            lr,
            sigma: self.agent.log_sigma().exp(),
            eval,
        };
        self.rollouts += 1;
        Ok(record)
    }

    fn encoder_phase(&mut self, buf: &RolloutBuffer) -> Result<(Option<f64>, usize)> {
        let Some(adam) = self.encoder_adam.as_mut() else {
            return Ok((None, 0));
        };
        if self.cfg.encoder.fresh_adam {
            *adam = Adam::new(&self.agent.params, self.agent.encoder_ids());
        }
        let enc = &self.cfg.encoder;
        let mut total = 0.0;
        let mut count = 0;
        for epoch in 0..enc.epochs as u64 {
            for batch in encoder_batches(buf.len(), enc.batch_size, self.cfg.seed, self.rollouts, epoch) {
                let images: Vec<_> = batch.iter().map(|&i| &buf.images[i]).collect();
                let targets: Vec<_> = batch.iter().map(|&i| buf.targets[i]).collect();
                total += encoder_step(&mut self.agent, adam, &images, &targets, enc.lr)?;
                count += 1;
            }
        }
        Ok((Some(total / count.max(1) as f64), count))
    }

    /// Full run state: parameters, optimizer moments, environments, counters.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_agent(&self.agent);
        ck.push(
            "state/counters",
            Tensor::new(&[2], vec![self.rollouts as f64, self.steps as f64]).expect("two counters"),
        );
        push_adam(&mut ck, "adam/policy", &self.policy_adam, &self.agent);
        if let Some(a) = &self.encoder_adam {
            push_adam(&mut ck, "adam/encoder", a, &self.agent);
        }
        for (i, s) in self.venv.snapshots().iter().enumerate() {
            let mut v = vec![s.episode as f64, s.steps as f64, s.done as u8 as f64, s.target[0], s.target[1]];
            v.extend(&s.angles);
            v.extend(&s.velocities);
            ck.push(format!("env/{i}"), Tensor::new(&[v.len()], v).expect("non-empty"));
        }
        ck
    }

    /// Rebuild a run from `cfg` and a checkpoint written by [`checkpoint`].
    ///
    /// [`checkpoint`]: Trainer::checkpoint
    pub fn resume(cfg: TrainConfig, ck: &Checkpoint) -> Result<Self> {
        if ck.seed != cfg.seed {
            return Err(Error::Checkpoint(format!(
                "checkpoint seed {} differs from configured seed {}",
                ck.seed, cfg.seed
            )));
        }
        let mut t = Self::new(cfg)?;
        ck.load_into(&mut t.agent)?;
        let counters = ck.require("state/counters")?.data();
        t.rollouts = counters[0] as u64;
        t.steps = counters[1] as u64;
        restore_adam(ck, "adam/policy", &mut t.policy_adam, &t.agent)?;
        if let Some(a) = t.encoder_adam.as_mut() {
            restore_adam(ck, "adam/encoder", a, &t.agent)?;
        }
        let n = t.cfg.n_joints;
        let snaps = (0..t.venv.len())
            .map(|i| {
                let v = ck.require(&format!("env/{i}"))?.data();
                if v.len() != 5 + 2 * n {
                    return Err(Error::Checkpoint(format!("env/{i} has {} entries", v.len())));
                }
                Ok(EnvSnapshot {
                    episode: v[0] as u64,
                    steps: v[1] as usize,
                    done: v[2] != 0.0,
                    target: [v[3], v[4]],
                    angles: v[5..5 + n].to_vec(),
                    velocities: v[5 + n..].to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        t.venv.restore(snaps)?;
        Ok(t)
    }
}

fn param_name(agent: &Agent, id: ParamId) -> &str {
    &agent.params.get(id).name
}

fn push_adam(ck: &mut Checkpoint, prefix: &str, adam: &Adam, agent: &Agent) {
    ck.push(format!("{prefix}/step"), Tensor::scalar(adam.step_count() as f64));
    for (slot, &id) in adam.ids().iter().enumerate() {
        let (m, v) = adam.moments(slot);
        let shape = agent.params.value(id).shape();
        let name = param_name(agent, id);
        ck.push(format!("{prefix}/m/{name}"), Tensor::new(shape, m.to_vec()).expect("param shape"));
        ck.push(format!("{prefix}/v/{name}"), Tensor::new(shape, v.to_vec()).expect("param shape"));
    }
}

fn restore_adam(ck: &Checkpoint, prefix: &str, adam: &mut Adam, agent: &Agent) -> Result<()> {
    let step = ck.require(&format!("{prefix}/step"))?.item() as u64;
    let mut first = Vec::with_capacity(adam.ids().len());
    let mut second = Vec::with_capacity(adam.ids().len());
    for &id in adam.ids() {
        let name = param_name(agent, id);
        let numel = agent.params.value(id).numel();
        for (store, key) in [(&mut first, "m"), (&mut second, "v")] {
            let t = ck.require(&format!("{prefix}/{key}/{name}"))?;
            if t.numel() != numel {
                return Err(Error::Checkpoint(format!("{prefix}/{key}/{name} has the wrong size")));
            }
            store.push(t.data().to_vec());
        }
    }
    adam.restore(step, first, second);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iteration_count_is_ceil() {
        let mut c = TrainConfig::new(Variant::Mlp, 2, 10_240, 0);
        assert_eq!(c.iterations(), 2);
        c.total_steps = 10_241;
        assert_eq!(c.iterations(), 3);
    }

    #[test]
    fn encoder_batches_partition() {
        let batches = encoder_batches(500, 160, 3, 0, 1);
        assert_eq!(batches.len(), 4);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..500).collect::<Vec<_>>());
    }
}
