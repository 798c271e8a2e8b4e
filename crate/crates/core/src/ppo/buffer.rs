use crate::env::GrayImage;

/// One rollout of `n_envs × n_steps` transitions, stored flat with index
/// `env · n_steps + step`.
///
/// `global` holds what the policy's global input model consumes: encoder
/// features (computed when the transition was collected) for image variants,
/// the normalized target otherwise. Frames and targets are kept separately
/// for the encoder's supervised phase.
#[derive(Clone, Debug)]
pub struct RolloutBuffer {
    pub n_envs: usize,
    pub n_steps: usize,
    pub n_joints: usize,
    pub joint_dim: usize,
    pub global_width: usize,
    /// `len × global_width`
    pub global: Vec<f64>,
    /// `len × n_joints × joint_dim`
    pub joints: Vec<f64>,
    /// Empty unless the agent consumes images.
    pub images: Vec<GrayImage>,
    pub targets: Vec<[f64; 2]>,
    /// `len × n_joints`, as sampled (before the environment clamps them).
    pub actions: Vec<f64>,
    pub means: Vec<f64>,
    pub log_sigma: f64,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    /// The episode ended (success or step limit) with this transition.
    pub dones: Vec<bool>,
    /// This transition's observation is the first of an episode.
    pub episode_starts: Vec<bool>,
    /// Value of each environment's observation after the final step.
    pub last_values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    /// Zero-filled buffer of the given geometry.
    pub fn zeroed(
        n_envs: usize,
        n_steps: usize,
        n_joints: usize,
        joint_dim: usize,
        global_width: usize,
    ) -> Self {
        let len = n_envs * n_steps;
        Self {
            n_envs,
            n_steps,
            n_joints,
            joint_dim,
            global_width,
            global: vec![0.0; len * global_width],
            joints: vec![0.0; len * n_joints * joint_dim],
            images: Vec::new(),
            targets: vec![[0.0; 2]; len],
            actions: vec![0.0; len * n_joints],
            means: vec![0.0; len * n_joints],
            log_sigma: 0.0,
            log_probs: vec![0.0; len],
            values: vec![0.0; len],
            rewards: vec![0.0; len],
            dones: vec![false; len],
            episode_starts: vec![false; len],
            last_values: vec![0.0; n_envs],
            advantages: Vec::new(),
            returns: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.n_envs * self.n_steps
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, env: usize, step: usize) -> usize {
        env * self.n_steps + step
    }

    pub fn action(&self, i: usize) -> &[f64] {
        &self.actions[i * self.n_joints..(i + 1) * self.n_joints]
    }

    pub fn mean(&self, i: usize) -> &[f64] {
        &self.means[i * self.n_joints..(i + 1) * self.n_joints]
    }

    pub fn global_row(&self, i: usize) -> &[f64] {
        &self.global[i * self.global_width..(i + 1) * self.global_width]
    }

    pub fn joint_rows(&self, i: usize) -> &[f64] {
        let w = self.n_joints * self.joint_dim;
        &self.joints[i * w..(i + 1) * w]
    }

    /// GAE per environment, value targets `A + V`, then advantages
    /// normalized over the whole rollout.
    pub fn finish(&mut self, gamma: f64, lambda: f64) {
        let mut adv = Vec::with_capacity(self.len());
        for e in 0..self.n_envs {
            let r = e * self.n_steps..(e + 1) * self.n_steps;
            adv.extend(compute_gae(
                &self.rewards[r.clone()],
                &self.values[r.clone()],
                &self.dones[r],
                self.last_values[e],
                gamma,
                lambda,
            ));
        }
        self.returns = adv.iter().zip(&self.values).map(|(a, v)| a + v).collect();
        self.advantages = normalize(&adv, 1e-8);
    }
}

/// Reverse-scan generalized advantage estimate for one environment's
/// trajectory. `dones[t]` cuts both the bootstrap and the trace at `t`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n, "GAE inputs differ in length");
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { last_value };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        running = delta + gamma * lambda * live * running;
        adv[t] = running;
    }
    adv
}

/// Shift to zero mean and divide by (population std + eps).
pub fn normalize(xs: &[f64], eps: f64) -> Vec<f64> {
    if xs.is_empty() {
        return Vec::new();
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let scale = var.sqrt() + eps;
    xs.iter().map(|x| (x - mean) / scale).collect()
}
