use super::collect::{forward_batch, policy_inputs};
use crate::env::{EnvConfig, Reacher};
use crate::error::{contract_err, Result};
use crate::model::Agent;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalStats {
    pub reward_mean: f64,
    pub reward_std: f64,
    pub success_rate: f64,
    pub episode_len_mean: f64,
    pub episodes: usize,
}

/// Run `episodes` episodes with deterministic actions (the policy mean).
///
/// Episode `i` always uses the target keyed by `(seed, i)`, so successive
/// evaluations of one run see the same task set. Episodes are stepped
/// together in one batch.
pub fn evaluate_policy(agent: &Agent, config: &EnvConfig, episodes: usize, seed: u64) -> Result<EvalStats> {
    if episodes == 0 {
        return contract_err("evaluation needs at least one episode");
    }
    let reach = config.total_reach();
    let mut envs = Vec::with_capacity(episodes);
    let mut obs = Vec::with_capacity(episodes);
    for i in 0..episodes as u64 {
        let mut env = Reacher::new(config.clone(), i)?;
        obs.push(env.reset_with_seed(rng::derive_seed(seed, &[rng::tag::EVAL, i])));
        envs.push(env);
    }
    let mut returns = vec![0.0; episodes];
    let mut lengths = vec![0usize; episodes];
    let mut success = vec![false; episodes];
    let mut active: Vec<usize> = (0..episodes).collect();
    let n = agent.n_joints();

    while !active.is_empty() {
        let refs: Vec<_> = active.iter().map(|&i| &obs[i]).collect();
        let (global, joints) = policy_inputs(agent, &refs, reach)?;
        let (means, _) = forward_batch(agent, global, joints)?;
        let mut still = Vec::with_capacity(active.len());
        for (k, &i) in active.iter().enumerate() {
            let res = envs[i].step(&means[k * n..(k + 1) * n])?;
            returns[i] += res.reward;
            lengths[i] += 1;
            if res.terminated || res.truncated {
                success[i] = res.terminated;
            } else {
                still.push(i);
            }
            obs[i] = res.observation;
        }
        active = still;
    }

    let m = episodes as f64;
    let reward_mean = returns.iter().sum::<f64>() / m;
    let reward_std = (returns.iter().map(|r| (r - reward_mean).powi(2)).sum::<f64>() / m).sqrt();
    Ok(EvalStats {
        reward_mean,
        reward_std,
        success_rate: success.iter().filter(|s| **s).count() as f64 / m,
        episode_len_mean: lengths.iter().sum::<usize>() as f64 / m,
        episodes,
    })
}
