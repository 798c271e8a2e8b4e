//! Planar N-link reaching task with kinematic joint-velocity control.

pub mod kinematics;
pub mod render;

use rand::Rng;

use crate::error::{contract_err, Error, Result};
use crate::rng;
pub use kinematics::{chain_points, forward_kinematics, wrap_angle};
pub use render::{render, GrayImage, IMAGE_SIZE};

/// Static description of one reacher environment.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    pub n_joints: usize,
    /// Link lengths in meters, base to tip.
    pub link_lengths: Vec<f64>,
    /// Integration step in seconds.
    pub dt: f64,
    /// Commanded joint speeds are clamped to `±max_joint_speed` (rad/s).
    pub max_joint_speed: f64,
    /// End-effector distance (m) at which the episode counts as solved.
    pub success_radius: f64,
    pub success_bonus: f64,
    pub max_steps: usize,
    /// Append the (reach-normalized) end-effector position to every joint's
    /// feature vector.
    pub include_end_effector: bool,
    pub seed: u64,
}

impl EnvConfig {
    /// Defaults for an `n`-joint arm.
    ///
    /// Six joints mirror the larger manipulator setting (0.17 m links, 500
    /// steps, bonus 10, end-effector features); every other size uses the
    /// small-arm constants (equal links summing to 1 m, 300 steps, bonus 300).
    pub fn for_joints(n_joints: usize, seed: u64) -> Result<Self> {
        if n_joints == 0 {
            return contract_err("an arm needs at least one joint");
        }
        let six = n_joints == 6;
        let link = if six { 0.17 } else { 1.0 / n_joints as f64 };
        let link_lengths = vec![link; n_joints];
        let reach: f64 = link_lengths.iter().sum();
        Ok(Self {
            n_joints,
            link_lengths,
            dt: 0.05,
            max_joint_speed: 1.5,
            success_radius: 0.2 * reach,
            success_bonus: if six { 10.0 } else { 300.0 },
            max_steps: if six { 500 } else { 300 },
            include_end_effector: six,
            seed,
        })
    }

    pub fn total_reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    /// Width of one joint's feature vector.
    pub fn joint_dim(&self) -> usize {
        if self.include_end_effector {
            4
        } else {
            2
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.link_lengths.len() != self.n_joints || self.n_joints == 0 {
            return Err(Error::Config(format!(
                "{} link lengths for {} joints",
                self.link_lengths.len(),
                self.n_joints
            )));
        }
        if self.link_lengths.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::Config("link lengths must be positive".into()));
        }
        if !(self.success_radius > 0.0 && self.success_radius < self.total_reach()) {
            return Err(Error::Config("success radius must lie in (0, reach)".into()));
        }
        if !(self.dt > 0.0 && self.max_joint_speed > 0.0) || self.max_steps == 0 {
            return Err(Error::Config("dt, speed limit and step limit must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointState {
    /// Radians in `(−π, π]`.
    pub angle: f64,
    pub velocity: f64,
    /// End-effector position in meters; present only when the config asks
    /// for it.
    pub end_effector: Option<[f64; 2]>,
}

#[derive(Clone, Debug)]
pub struct Observation {
    pub image: GrayImage,
    pub joint_states: Vec<JointState>,
    /// Target divided by the total reach; privileged, training-only signal.
    pub target_normalized: [f64; 2],
    pub ee_distance: f64,
}

impl Observation {
    /// Per-joint input rows, flattened: `(q, q̇)` or `(q, q̇, p_x/R, p_y/R)`.
    pub fn joint_features(&self, total_reach: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.joint_states.len() * 4);
        for js in &self.joint_states {
            out.push(js.angle);
            out.push(js.velocity);
            if let Some(p) = js.end_effector {
                out.push(p[0] / total_reach);
                out.push(p[1] / total_reach);
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    /// The end-effector reached the target.
    pub terminated: bool,
    /// The step limit was hit without success.
    pub truncated: bool,
}

/// Mutable state of a reacher, enough to resume it bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvSnapshot {
    pub episode: u64,
    pub angles: Vec<f64>,
    pub velocities: Vec<f64>,
    pub target: [f64; 2],
    pub steps: usize,
    pub done: bool,
}

/// One planar reacher instance.
///
/// Targets for episode `k` of instance `i` come from a random stream keyed
/// by `(config.seed, i, k)`, so a set of instances can be stepped in any
/// order or on any number of threads with identical results.
#[derive(Clone, Debug)]
pub struct Reacher {
    config: EnvConfig,
    env_index: u64,
    state: EnvSnapshot,
}

impl Reacher {
    pub fn new(config: EnvConfig, env_index: u64) -> Result<Self> {
        config.validate()?;
        let n = config.n_joints;
        Ok(Self {
            config,
            env_index,
            state: EnvSnapshot {
                episode: 0,
                angles: vec![0.0; n],
                velocities: vec![0.0; n],
                target: [0.0, 0.0],
                steps: 0,
                done: true,
            },
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn snapshot(&self) -> &EnvSnapshot {
        &self.state
    }

    pub fn restore(&mut self, snapshot: EnvSnapshot) -> Result<()> {
        if snapshot.angles.len() != self.config.n_joints
            || snapshot.velocities.len() != self.config.n_joints
        {
            return contract_err("snapshot joint count differs from the config");
        }
        self.state = snapshot;
        Ok(())
    }

    pub fn target(&self) -> [f64; 2] {
        self.state.target
    }

    pub fn is_done(&self) -> bool {
        self.state.done
    }

    /// Start the next episode, sampling its target from this instance's
    /// episode stream.
    pub fn reset(&mut self) -> Observation {
        let seed = rng::derive_seed(
            self.config.seed,
            &[rng::tag::EPISODE, self.env_index, self.state.episode],
        );
        self.reset_with_seed(seed)
    }

    /// Zero pose, zero velocity, target uniform over the reachable disc.
    pub fn reset_with_seed(&mut self, episode_seed: u64) -> Observation {
        let mut r = rng::stream(episode_seed, &[]);
        let target = sample_disc(&mut r, self.config.total_reach());
        self.reset_to_target(target)
    }

    /// Zero pose with an explicit target.
    pub fn reset_to_target(&mut self, target: [f64; 2]) -> Observation {
        let n = self.config.n_joints;
        self.state.episode += 1;
        self.state.angles = vec![0.0; n];
        self.state.velocities = vec![0.0; n];
        self.state.target = target;
        self.state.steps = 0;
        self.state.done = false;
        self.observe()
    }

    pub fn end_effector(&self) -> [f64; 2] {
        forward_kinematics(&self.state.angles, &self.config.link_lengths)
    }

    pub fn observe(&self) -> Observation {
        let ee = self.end_effector();
        let include = self.config.include_end_effector;
        let joint_states = self
            .state
            .angles
            .iter()
            .zip(&self.state.velocities)
            .map(|(&angle, &velocity)| JointState {
                angle,
                velocity,
                end_effector: include.then_some(ee),
            })
            .collect();
        let reach = self.config.total_reach();
        let t = self.state.target;
        Observation {
            image: render(&self.state.angles, &self.config.link_lengths, t),
            joint_states,
            target_normalized: [t[0] / reach, t[1] / reach],
            ee_distance: distance(ee, t),
        }
    }

    /// Apply commanded joint velocities for one `dt`.
    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let cfg = &self.config;
        if action.len() != cfg.n_joints {
            return contract_err(format!(
                "action has {} entries for {} joints",
                action.len(),
                cfg.n_joints
            ));
        }
        if self.state.done {
            return contract_err("step called on a finished episode; reset first");
        }
        if action.iter().any(|a| !a.is_finite()) {
            return contract_err("non-finite action");
        }
        for (i, &a) in action.iter().enumerate() {
            let cmd = a.clamp(-cfg.max_joint_speed, cfg.max_joint_speed);
            self.state.angles[i] = wrap_angle(self.state.angles[i] + cmd * cfg.dt);
            self.state.velocities[i] = cmd;
        }
        self.state.steps += 1;
        let dist = distance(self.end_effector(), self.state.target);
        let terminated = dist <= self.config.success_radius;
        let mut reward = -dist;
        if terminated {
            reward += self.config.success_bonus;
        }
        let truncated = !terminated && self.state.steps >= self.config.max_steps;
        self.state.done = terminated || truncated;
        Ok(StepResult {
            observation: self.observe(),
            reward,
            terminated,
            truncated,
        })
    }
}

/// Uniform sample from the disc of radius `r` via `r·√u` polar sampling.
pub fn sample_disc<R: Rng>(rng: &mut R, radius: f64) -> [f64; 2] {
    let rho = radius * rng.gen::<f64>().sqrt();
    let theta = 2.0 * std::f64::consts::PI * rng.gen::<f64>();
    [rho * theta.cos(), rho * theta.sin()]
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_link() -> Reacher {
        Reacher::new(EnvConfig::for_joints(2, 11).unwrap(), 0).unwrap()
    }

    #[test]
    fn defaults_follow_arm_size() {
        let c2 = EnvConfig::for_joints(2, 0).unwrap();
        assert_eq!(c2.total_reach(), 1.0);
        assert!((c2.success_radius - 0.2).abs() < 1e-15);
        assert_eq!((c2.max_steps, c2.success_bonus, c2.joint_dim()), (300, 300.0, 2));
        let c6 = EnvConfig::for_joints(6, 0).unwrap();
        assert!((c6.total_reach() - 1.02).abs() < 1e-12);
        assert_eq!((c6.max_steps, c6.success_bonus, c6.joint_dim()), (500, 10.0, 4));
    }

    #[test]
    fn reset_starts_from_zero_pose() {
        let mut env = two_link();
        let obs = env.reset();
        assert!(obs.joint_states.iter().all(|j| j.angle == 0.0 && j.velocity == 0.0));
        let t = env.target();
        assert!((t[0].powi(2) + t[1].powi(2)).sqrt() <= 1.0);
        assert_eq!(obs.target_normalized, t);
    }

    #[test]
    fn zero_action_reward_is_distance_from_stretched_pose() {
        let mut env = two_link();
        env.reset_to_target([-0.3, 0.4]);
        let r = env.step(&[0.0, 0.0]).unwrap();
        let expect = -((1.0f64 + 0.3).powi(2) + 0.4f64.powi(2)).sqrt();
        assert_eq!(r.reward, expect);
        assert!(!r.terminated && !r.truncated);
    }

    #[test]
    fn target_at_effector_terminates_immediately() {
        let mut env = two_link();
        env.reset_to_target([1.0, 0.0]);
        let r = env.step(&[0.0, 0.0]).unwrap();
        assert!(r.terminated);
        assert!(r.reward >= 300.0 - 0.2);
        assert!(matches!(env.step(&[0.0, 0.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn wrong_action_length_is_rejected() {
        let mut env = two_link();
        env.reset();
        assert!(matches!(env.step(&[0.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn speeds_are_clamped() {
        let mut env = two_link();
        env.reset_to_target([-0.5, -0.5]);
        let r = env.step(&[10.0, -10.0]).unwrap();
        let js = &r.observation.joint_states;
        assert_eq!(js[0].velocity, 1.5);
        assert_eq!(js[1].velocity, -1.5);
        assert!((js[0].angle - 0.075).abs() < 1e-15);
    }

    #[test]
    fn truncates_at_step_limit() {
        let mut env = two_link();
        env.reset_to_target([-0.9, 0.0]);
        let mut last = None;
        for _ in 0..300 {
            last = Some(env.step(&[0.0, 0.0]).unwrap());
        }
        let last = last.unwrap();
        assert!(last.truncated && !last.terminated);
        assert!(env.is_done());
    }

    #[test]
    fn episodes_draw_distinct_reproducible_targets() {
        let mut a = two_link();
        let mut b = two_link();
        let ta: Vec<_> = (0..5).map(|_| a.reset().target_normalized).collect();
        let tb: Vec<_> = (0..5).map(|_| b.reset().target_normalized).collect();
        assert_eq!(ta, tb);
        assert_ne!(ta[0], ta[1]);
        let mut other = Reacher::new(EnvConfig::for_joints(2, 11).unwrap(), 1).unwrap();
        assert_ne!(other.reset().target_normalized, ta[0]);
    }

    #[test]
    fn six_joint_features_include_normalized_effector() {
        let mut env = Reacher::new(EnvConfig::for_joints(6, 3).unwrap(), 0).unwrap();
        let obs = env.reset();
        let f = obs.joint_features(env.config().total_reach());
        assert_eq!(f.len(), 24);
        assert!((f[2] - 1.0).abs() < 1e-12 && f[3] == 0.0);
    }
}
