use super::buffer::RolloutBuffer;
use super::PpoConfig;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{contract_err, Result};
use crate::model::Agent;

/// Differentiable loss plus the scalars worth logging.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub loss: Var,
    /// `−mean(min(r·A, clip(r)·A))`
    pub policy_loss: f64,
    /// `mean((V − V_target)²)`, before the coefficient.
    pub value_loss: f64,
    /// Fraction of samples whose ratio left `[1−ε, 1+ε]`.
    pub clip_fraction: f64,
    /// `mean((r − 1) − ln r)`
    pub approx_kl: f64,
}

/// Per-sample clipped objective `min(r·A, clip(r, 1−ε, 1+ε)·A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// Clipped-surrogate PPO loss on the transitions `indices` of a finished
/// buffer. Only the input models, policy, value function and `log σ` are on
/// the tape; stored encoder features enter as constants.
pub fn ppo_loss(
    tape: &mut Tape,
    agent: &Agent,
    buf: &RolloutBuffer,
    indices: &[usize],
    cfg: &PpoConfig,
) -> Result<LossParts> {
    if buf.advantages.len() != buf.len() {
        return contract_err("advantages must be computed before optimizing");
    }
    let b = indices.len();
    if b == 0 {
        return contract_err("empty minibatch");
    }
    let n = buf.n_joints;
    let mut global = Vec::with_capacity(b * buf.global_width);
    let mut joints = Vec::with_capacity(b * n * buf.joint_dim);
    let mut actions = Vec::with_capacity(b * n);
    let mut old_lp = Vec::with_capacity(b);
    let mut adv = Vec::with_capacity(b);
    let mut ret = Vec::with_capacity(b);
    for &i in indices {
        global.extend_from_slice(buf.global_row(i));
        joints.extend_from_slice(buf.joint_rows(i));
        actions.extend_from_slice(buf.action(i));
        old_lp.push(buf.log_probs[i]);
        adv.push(buf.advantages[i]);
        ret.push(buf.returns[i]);
    }
    let g = tape.constant(Tensor::new(&[b, buf.global_width], global)?);
    let j = tape.constant(Tensor::new(&[b * n, buf.joint_dim], joints)?);
    let out = agent.forward(tape, g, j)?;

    let lp = tape.gaussian_log_prob(&actions, out.mean, out.log_sigma)?;
    let old = tape.constant(Tensor::new(&[b], old_lp)?);
    let log_ratio = tape.sub(lp, old)?;
    let ratio = tape.exp(log_ratio);
    let a = tape.constant(Tensor::new(&[b], adv)?);
    let unclipped = tape.mul(ratio, a)?;
    let clipped_ratio = tape.clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
    let clipped = tape.mul(clipped_ratio, a)?;
    let surrogate = tape.minimum(unclipped, clipped)?;
    let surrogate = tape.mean(surrogate);
    let policy_loss = tape.scale(surrogate, -1.0);

    let v = tape.reshape(out.value, &[b])?;
    let target = tape.constant(Tensor::new(&[b], ret)?);
    let err = tape.sub(v, target)?;
    let sq = tape.square(err);
    let value_loss = tape.mean(sq);

    let weighted = tape.scale(value_loss, cfg.value_coef);
    let mut loss = tape.add(policy_loss, weighted)?;
    if cfg.entropy_coef != 0.0 {
        // Entropy of N(μ, σ²I) in n dimensions: n·(ln σ + ½·ln(2πe)).
        let half_log_2pie = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        let per_dim = tape.add_scalar(out.log_sigma, half_log_2pie);
        let ent = tape.scale(per_dim, -(cfg.entropy_coef * n as f64));
        loss = tape.add(loss, ent)?;
    }

    let ratios = tape.value(ratio).data();
    let clip_fraction =
        ratios.iter().filter(|r| (**r - 1.0).abs() > cfg.clip_eps).count() as f64 / b as f64;
    let approx_kl = ratios.iter().map(|r| (r - 1.0) - r.ln()).sum::<f64>() / b as f64;
    Ok(LossParts {
        loss,
        policy_loss: tape.value(policy_loss).item(),
        value_loss: tape.value(value_loss).item(),
        clip_fraction,
        approx_kl,
    })
}
