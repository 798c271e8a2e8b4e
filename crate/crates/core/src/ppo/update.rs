use rand::seq::SliceRandom;

use super::buffer::RolloutBuffer;
use super::loss::ppo_loss;
use super::PpoConfig;
use crate::autodiff::{clip_grad_norm, Adam, Tape};
use crate::error::{contract_err, Result};
use crate::model::Agent;
use crate::rng;

/// Means over every minibatch of an update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub minibatches: usize,
}

/// Seeded permutation of `0..len` for one `(rollout, epoch)` pair.
pub fn minibatch_order(len: usize, seed: u64, rollout_index: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut r = rng::stream(seed, &[rng::tag::SHUFFLE, rollout_index, epoch]);
    order.shuffle(&mut r);
    order
}

/// `epochs` passes over a finished buffer in shuffled minibatches, one Adam
/// step per minibatch at learning rate `lr`.
pub fn ppo_update(
    agent: &mut Agent,
    adam: &mut Adam,
    buf: &RolloutBuffer,
    cfg: &PpoConfig,
    lr: f64,
    seed: u64,
    rollout_index: u64,
) -> Result<UpdateStats> {
    if buf.len() % cfg.minibatch_size != 0 {
        return contract_err(format!(
            "minibatch size {} does not divide buffer length {}",
            cfg.minibatch_size,
            buf.len()
        ));
    }
    let mut stats = UpdateStats::default();
    for epoch in 0..cfg.epochs as u64 {
        let order = minibatch_order(buf.len(), seed, rollout_index, epoch);
        for batch in order.chunks(cfg.minibatch_size) {
            agent.params.zero_grad();
            let mut tape = Tape::new();
            let parts = ppo_loss(&mut tape, agent, buf, batch, cfg)?;
            tape.backward_into(parts.loss, &mut agent.params)?;
            if let Some(max) = cfg.grad_clip {
                clip_grad_norm(&mut agent.params, adam.ids(), max);
            }
            adam.step(&mut agent.params, lr);
            stats.policy_loss += parts.policy_loss;
            stats.value_loss += parts.value_loss;
            stats.clip_fraction += parts.clip_fraction;
            stats.approx_kl += parts.approx_kl;
            stats.minibatches += 1;
        }
    }
    let k = stats.minibatches.max(1) as f64;
    stats.policy_loss /= k;
    stats.value_loss /= k;
    stats.clip_fraction /= k;
    stats.approx_kl /= k;
    Ok(stats)
}
