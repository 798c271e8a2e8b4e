use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use super::csv::{self, CsvRow, ERROR_MARKER, HEADER};
use crate::error::{contract_err, Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::Variant;
use crate::train::{IterationRecord, Trainer};

/// Evaluations with a timestep inside the final window count toward a
/// run's converged reward.
pub const SUMMARY_WINDOW: u64 = 100_000;

pub fn csv_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("seed-{seed}.csv"))
}

pub fn checkpoint_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("seed-{seed}.ckpt"))
}

/// Train one seed into `cfg.run_dir()`, appending a CSV row per iteration.
///
/// With `resume`, training continues from the seed's checkpoint (when one
/// exists) and log rows past the checkpoint are discarded first. A failure
/// leaves the rows written so far plus an error marker line.
pub fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    resume: bool,
    mut on_iteration: impl FnMut(u64, &IterationRecord),
) -> Result<()> {
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;
    let csv_file = csv_path(&dir, seed);
    let ckpt_file = checkpoint_path(&dir, seed);
    let tc = cfg.train_config(seed);

    let mut trainer = if resume && ckpt_file.exists() {
        let t = Trainer::resume(tc, &Checkpoint::load(&ckpt_file)?)?;
        let kept = match fs::read_to_string(&csv_file) {
            Ok(text) => csv::parse(&text)?
                .into_iter()
                .filter(|r| r.timestep <= t.steps())
                .count(),
            Err(_) => 0,
        };
        rewrite_prefix(&csv_file, kept)?;
        t
    } else {
        fs::write(&csv_file, format!("{HEADER}\n"))?;
        Trainer::new(tc)?
    };

    let mut log = fs::OpenOptions::new().append(true).open(&csv_file)?;
    while !trainer.is_finished() {
        let step = trainer.iterate().and_then(|rec| {
            writeln!(log, "{}", csv::format_row(&rec))?;
            log.flush()?;
            if trainer.checkpoint_due() {
                trainer.checkpoint().save(&ckpt_file)?;
            }
            Ok(rec)
        });
        match step {
            Ok(rec) => on_iteration(seed, &rec),
            Err(e) => {
                let msg = e.to_string().replace(['\n', ','], ";");
                writeln!(log, "{ERROR_MARKER}{msg}")?;
                log.flush()?;
                return Err(e);
            }
        }
    }
    Ok(())
}

/// Keep the header and the first `rows` data lines of a log.
fn rewrite_prefix(path: &Path, rows: usize) -> Result<()> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut out = format!("{HEADER}\n");
    for line in text
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .take(rows)
    {
        out.push_str(line);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Converged reward of one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedSummary {
    pub seed: u64,
    pub reward_mean: f64,
    pub success_rate: f64,
    pub evaluations: usize,
}

/// Mean ± std of the evaluation rewards logged in the last
/// [`SUMMARY_WINDOW`] steps, pooled over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub variant: Variant,
    pub n_joints: usize,
    pub total_steps: u64,
    pub window_start: u64,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub success_rate: f64,
    pub seeds: Vec<SeedSummary>,
}

impl Summary {
    pub fn from_logs(cfg: &ExperimentConfig, logs: &[(u64, Vec<CsvRow>)]) -> Result<Self> {
        if logs.is_empty() {
            return contract_err("no logs to summarize");
        }
        let window_start = cfg.total_steps.saturating_sub(SUMMARY_WINDOW);
        let mut pooled = Vec::new();
        let mut pooled_success = Vec::new();
        let mut seeds = Vec::new();
        for (seed, rows) in logs {
            let inside: Vec<&CsvRow> = rows
                .iter()
                .filter(|r| r.timestep > window_start && r.eval_reward_mean.is_some())
                .collect();
            if inside.is_empty() {
                return contract_err(format!(
                    "seed {seed} has no evaluation after step {window_start}"
                ));
            }
            let rewards: Vec<f64> = inside.iter().filter_map(|r| r.eval_reward_mean).collect();
            let success: Vec<f64> = inside.iter().filter_map(|r| r.success_rate).collect();
            seeds.push(SeedSummary {
                seed: *seed,
                reward_mean: mean(&rewards),
                success_rate: mean(&success),
                evaluations: rewards.len(),
            });
            pooled.extend(rewards);
            pooled_success.extend(success);
        }
        let (reward_mean, reward_std) = mean_std(&pooled);
        Ok(Self {
            variant: cfg.variant,
            n_joints: cfg.n_joints,
            total_steps: cfg.total_steps,
            window_start,
            reward_mean,
            reward_std,
            success_rate: mean(&pooled_success),
            seeds,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "variant = {}", self.variant);
        let _ = writeln!(s, "n_joints = {}", self.n_joints);
        let _ = writeln!(s, "total_steps = {}", self.total_steps);
        let _ = writeln!(s, "window_start = {}", self.window_start);
        let _ = writeln!(s, "reward_mean = {}", self.reward_mean);
        let _ = writeln!(s, "reward_std = {}", self.reward_std);
        let _ = writeln!(s, "success_rate = {}", self.success_rate);
        for sd in &self.seeds {
            let _ = writeln!(
                s,
                "seed = {} {} {} {}",
                sd.seed, sd.reward_mean, sd.success_rate, sd.evaluations
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        let mut seeds = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad summary line {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "seed" {
                let p: Vec<&str> = v.split_whitespace().collect();
                if p.len() != 4 {
                    return Err(Error::Parse(format!("bad seed line {line:?}")));
                }
                seeds.push(SeedSummary {
                    seed: num(p[0])?,
                    reward_mean: num(p[1])?,
                    success_rate: num(p[2])?,
                    evaluations: num(p[3])?,
                });
            } else {
                fields.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| {
            fields
                .get(k)
                .ok_or_else(|| Error::Parse(format!("summary lacks {k}")))
        };
        Ok(Self {
            variant: get("variant")?.parse()?,
            n_joints: num(get("n_joints")?)?,
            total_steps: num(get("total_steps")?)?,
            window_start: num(get("window_start")?)?,
            reward_mean: num(get("reward_mean")?)?,
            reward_std: num(get("reward_std")?)?,
            success_rate: num(get("success_rate")?)?,
            seeds,
        })
    }
}

fn num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Parse(format!("bad number {s:?}")))
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean and population standard deviation.
pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
    (m, var.sqrt())
}

pub fn read_log(path: &Path) -> Result<Vec<CsvRow>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    csv::parse(&text)
}

/// Train every configured seed in turn, then write `summary.txt`.
///
/// The config snapshot is written first; when resuming, an existing
/// snapshot must match the given config.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    resume: bool,
    mut on_iteration: impl FnMut(u64, &IterationRecord),
) -> Result<Summary> {
    cfg.validate()?;
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;
    let snapshot = dir.join("config.txt");
    let text = cfg.to_text();
    if resume && snapshot.exists() {
        let old = ExperimentConfig::from_text(&fs::read_to_string(&snapshot)?)?;
        let mut cur = cfg.clone();
        cur.workers = old.workers;
        if old != cur {
            return Err(Error::Config(format!(
                "{} differs from the requested config; refusing to resume",
                snapshot.display()
            )));
        }
    }
    fs::write(&snapshot, &text)?;
    for &seed in &cfg.seeds {
        run_seed(cfg, seed, resume, &mut on_iteration)?;
    }
    let logs = cfg
        .seeds
        .iter()
        .map(|&s| Ok((s, read_log(&csv_path(&dir, s))?)))
        .collect::<Result<Vec<_>>>()?;
    let summary = Summary::from_logs(cfg, &logs)?;
    fs::write(dir.join("summary.txt"), summary.to_text())?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t: u64, reward: Option<f64>) -> CsvRow {
        CsvRow {
            timestep: t,
            eval_reward_mean: reward,
            eval_reward_std: reward.map(|_| 0.0),
            success_rate: reward.map(|_| 1.0),
            episode_len_mean: reward.map(|_| 10.0),
            policy_loss: 0.0,
            value_loss: 0.0,
            clip_fraction: 0.0,
            approx_kl: 0.0,
            encoder_mse: None,
            lr: 0.0,
            sigma: 1.0,
        }
    }

    #[test]
    fn window_selects_late_evaluations() {
        let cfg = ExperimentConfig {
            total_steps: 200_000,
            ..ExperimentConfig::default()
        };
        let logs = vec![
            (0, vec![row(50_000, Some(-100.0)), row(150_000, Some(10.0)), row(200_000, Some(20.0))]),
            (1, vec![row(100_000, Some(-50.0)), row(190_000, None), row(200_000, Some(30.0))]),
        ];
        let s = Summary::from_logs(&cfg, &logs).unwrap();
        assert_eq!(s.window_start, 100_000);
        assert_eq!(s.seeds[0].reward_mean, 15.0);
        assert_eq!(s.seeds[1].evaluations, 1);
        assert_eq!(s.reward_mean, 20.0);
        assert!((s.reward_std - (200.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(Summary::parse(&s.to_text()).unwrap(), s);
    }

    #[test]
    fn seed_without_late_evaluation_is_an_error() {
        let cfg = ExperimentConfig {
            total_steps: 200_000,
            ..ExperimentConfig::default()
        };
        assert!(Summary::from_logs(&cfg, &[(0, vec![row(50_000, Some(1.0))])]).is_err());
    }
}
