//! Proximal policy optimization: rollout collection, advantage estimation,
//! the clipped surrogate loss, minibatch updates and deterministic evaluation.

mod buffer;
mod collect;
mod eval;
mod loss;
mod update;

pub use buffer::{compute_gae, normalize, RolloutBuffer};
pub use collect::{collect_rollout, policy_inputs, VecEnv};
pub(crate) use collect::forward_batch;
pub use eval::{evaluate_policy, EvalStats};
pub use loss::{clipped_surrogate, ppo_loss, LossParts};
pub use update::{minibatch_order, ppo_update, UpdateStats};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PpoConfig {
    pub clip_eps: f64,
    /// Weight of the squared value error.
    pub value_coef: f64,
    /// Weight of the entropy bonus.
    pub entropy_coef: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub lr0: f64,
    pub gamma: f64,
    pub lambda: f64,
    /// Global gradient-norm bound; `None` leaves gradients untouched.
    pub grad_clip: Option<f64>,
    pub n_envs: usize,
    pub n_steps: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.0,
            epochs: 4,
            minibatch_size: 160,
            lr0: 2.5e-4,
            gamma: 0.99,
            lambda: 0.95,
            grad_clip: None,
            n_envs: 20,
            n_steps: 256,
        }
    }
}

impl PpoConfig {
    pub fn rollout_size(&self) -> usize {
        self.n_envs * self.n_steps
    }

    pub fn minibatches(&self) -> usize {
        self.rollout_size() / self.minibatch_size
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.n_envs == 0 || self.n_steps == 0 || self.epochs == 0 || self.minibatch_size == 0 {
            return err("envs, steps, epochs and minibatch size must be positive".into());
        }
        if self.rollout_size() % self.minibatch_size != 0 {
            return err(format!(
                "minibatch size {} does not divide the rollout size {}",
                self.minibatch_size,
                self.rollout_size()
            ));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return err(format!("clip epsilon {} outside (0, 1)", self.clip_eps));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return err("gamma and lambda must lie in [0, 1]".into());
        }
        if self.lr0 < 0.0 || self.value_coef < 0.0 || self.entropy_coef < 0.0 {
            return err("learning rate and loss coefficients must be non-negative".into());
        }
        if matches!(self.grad_clip, Some(c) if c <= 0.0) {
            return err("grad_clip must be positive".into());
        }
        Ok(())
    }
}

/// `α₀ · min(1, 6/5 − t/T)`: flat for the first fifth of training, then a
/// linear decay to `α₀/5` at `t = T`. Steps past `T` keep the final rate.
pub fn learning_rate(t: u64, total: u64, lr0: f64) -> f64 {
    if total == 0 {
        return lr0 / 5.0;
    }
    let t = t.min(total);
    let frac = (6 * total - 5 * t) as f64 / (5 * total) as f64;
    lr0 * frac.min(1.0)
}
