use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::model::Variant;
use crate::train::{EncoderConfig, TrainConfig};
use crate::ppo::PpoConfig;

/// Declarative description of a run matrix over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub n_joints: usize,
    pub total_steps: u64,
    pub seeds: Vec<u64>,
    pub ppo: PpoConfig,
    pub encoder: EncoderConfig,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub checkpoint_every: u64,
    pub workers: usize,
    /// Root under which `<variant>-n<joints>/` is created.
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::new(Variant::CnnGn, 2, 1_000_000, 0);
        Self {
            variant: t.variant,
            n_joints: t.n_joints,
            total_steps: t.total_steps,
            seeds: vec![0, 1, 2, 3, 4],
            ppo: t.ppo,
            encoder: t.encoder,
            eval_every: t.eval_every,
            eval_episodes: t.eval_episodes,
            checkpoint_every: t.checkpoint_every,
            workers: t.workers,
            out_dir: PathBuf::from("runs"),
        }
    }
}

/// Every accepted key with its meaning, in snapshot order.
pub const KEYS: &[(&str, &str)] = &[
    ("variant", "architecture tag (cnn-gn, cnn-mlp, cnn-mlp-img, gn, mlp, cnn-gn-no-input-models, gn-node-shared, gn-node-dedicated)"),
    ("n_joints", "number of arm joints"),
    ("total_steps", "environment steps per seed"),
    ("seeds", "comma-separated run seeds"),
    ("eval_every", "evaluate when the step count crosses a multiple of this"),
    ("eval_episodes", "deterministic episodes per evaluation"),
    ("checkpoint_every", "rollouts between checkpoints"),
    ("workers", "threads stepping environments"),
    ("out_dir", "output root (KINEGRAPH_OUT overrides)"),
    ("n_envs", "parallel environments per rollout"),
    ("n_steps", "steps per environment per rollout"),
    ("epochs", "PPO epochs per rollout"),
    ("minibatch_size", "PPO minibatch size"),
    ("lr0", "initial policy learning rate"),
    ("clip_eps", "ratio clip range"),
    ("value_coef", "value loss coefficient"),
    ("entropy_coef", "entropy bonus coefficient"),
    ("gamma", "discount"),
    ("lambda", "GAE trace decay"),
    ("grad_clip", "global gradient-norm bound, or none"),
    ("encoder_epochs", "encoder epochs per rollout"),
    ("encoder_batch_size", "encoder minibatch size"),
    ("encoder_lr", "encoder Adam learning rate"),
    ("encoder_fresh_adam", "reset encoder Adam moments every rollout (true/false)"),
];

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl ExperimentConfig {
    /// Parse `key = value` lines over the defaults. `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one override.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "variant" => self.variant = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "n_joints" => self.n_joints = parse(key, v)?,
            "total_steps" => self.total_steps = parse(key, v)?,
            "seeds" => {
                self.seeds = v
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "eval_every" => self.eval_every = parse(key, v)?,
            "eval_episodes" => self.eval_episodes = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "workers" => self.workers = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "n_envs" => self.ppo.n_envs = parse(key, v)?,
            "n_steps" => self.ppo.n_steps = parse(key, v)?,
            "epochs" => self.ppo.epochs = parse(key, v)?,
            "minibatch_size" => self.ppo.minibatch_size = parse(key, v)?,
            "lr0" => self.ppo.lr0 = parse(key, v)?,
            "clip_eps" => self.ppo.clip_eps = parse(key, v)?,
            "value_coef" => self.ppo.value_coef = parse(key, v)?,
            "entropy_coef" => self.ppo.entropy_coef = parse(key, v)?,
            "gamma" => self.ppo.gamma = parse(key, v)?,
            "lambda" => self.ppo.lambda = parse(key, v)?,
            "grad_clip" => {
                self.ppo.grad_clip = match v {
                    "none" | "" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "encoder_epochs" => self.encoder.epochs = parse(key, v)?,
            "encoder_batch_size" => self.encoder.batch_size = parse(key, v)?,
            "encoder_lr" => self.encoder.lr = parse(key, v)?,
            "encoder_fresh_adam" => self.encoder.fresh_adam = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        self.train_config(self.seeds[0]).validate()
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            variant: self.variant,
            n_joints: self.n_joints,
            total_steps: self.total_steps,
            seed,
            ppo: self.ppo.clone(),
            encoder: self.encoder.clone(),
            eval_every: self.eval_every,
            eval_episodes: self.eval_episodes,
            checkpoint_every: self.checkpoint_every,
            workers: self.workers,
        }
    }

    /// Snapshot that [`from_text`](Self::from_text) parses back to an equal
    /// config. `workers` is omitted: it never changes results.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let p = &self.ppo;
        let e = &self.encoder;
        let grad_clip = p.grad_clip.map_or("none".to_string(), |c| c.to_string());
        let pairs: Vec<(&str, String)> = vec![
            ("variant", self.variant.to_string()),
            ("n_joints", self.n_joints.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("seeds", seeds.join(",")),
            ("eval_every", self.eval_every.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("n_envs", p.n_envs.to_string()),
            ("n_steps", p.n_steps.to_string()),
            ("epochs", p.epochs.to_string()),
            ("minibatch_size", p.minibatch_size.to_string()),
            ("lr0", p.lr0.to_string()),
            ("clip_eps", p.clip_eps.to_string()),
            ("value_coef", p.value_coef.to_string()),
            ("entropy_coef", p.entropy_coef.to_string()),
            ("gamma", p.gamma.to_string()),
            ("lambda", p.lambda.to_string()),
            ("grad_clip", grad_clip),
            ("encoder_epochs", e.epochs.to_string()),
            ("encoder_batch_size", e.batch_size.to_string()),
            ("encoder_lr", e.lr.to_string()),
            ("encoder_fresh_adam", e.fresh_adam.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// `<out_dir>/<variant>-n<joints>`
    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(format!("{}-n{}", self.variant, self.n_joints))
    }
}
