use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kinegraph::env::{sample_disc, EnvConfig, Reacher};
use kinegraph::graph::RobotGraph;
use kinegraph::harness::{self, compare_variants, csv, run_experiment, ExperimentConfig, PlotSeries, Summary};
use kinegraph::model::checkpoint::Checkpoint;
use kinegraph::model::Agent;
use kinegraph::ppo::evaluate_policy;

#[derive(Parser)]
#[command(name = "kinegraph", version, about = "Graph-structured visuomotor policies for planar reaching arms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of an experiment config and write CSVs, checkpoints and a summary.
    Train {
        /// key = value config file; omitted keys take their defaults
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one key, e.g. --set variant=gn (repeatable)
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue each seed from its latest checkpoint
        #[arg(long)]
        resume: bool,
        /// List config keys and exit
        #[arg(long)]
        list_keys: bool,
    },
    /// Evaluate a checkpoint deterministically.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the gradient, shape, oracle and determinism self-checks.
    Verify,
    /// Plot eval reward curves; CSVs sharing a directory form one series.
    Plot {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "evaluation reward")]
        title: String,
        #[arg(required = true)]
        csvs: Vec<PathBuf>,
    },
    /// Rank variants from their summary files.
    Compare {
        #[arg(required = true, num_args = 2..)]
        summaries: Vec<PathBuf>,
    },
    /// Write rendered observations as PGM images.
    RenderDump {
        #[arg(long, default_value_t = 2)]
        joints: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the joint graph's adjacency and normalized adjacency.
    GraphDump {
        #[arg(long, default_value_t = 2)]
        joints: usize,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Train {
            config,
            overrides,
            resume,
            list_keys,
        } => {
            if list_keys {
                for (k, doc) in harness::config::KEYS {
                    println!("{k:<22} {doc}");
                }
                return Ok(ExitCode::SUCCESS);
            }
            let mut cfg = match &config {
                Some(p) => ExperimentConfig::from_text(
                    &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
                )?,
                None => ExperimentConfig::default(),
            };
            for kv in &overrides {
                let Some((k, v)) = kv.split_once('=') else {
                    bail!("--set expects KEY=VALUE, got {kv:?}");
                };
                cfg.set(k.trim(), v.trim())?;
            }
            harness::apply_out_override(&mut cfg);
            cfg.validate()?;
            eprintln!("writing to {}", cfg.run_dir().display());
            let summary = run_experiment(&cfg, resume, |seed, rec| {
                let eval = rec
                    .eval
                    .as_ref()
                    .map(|e| format!(" eval {:.2} ± {:.2} success {:.2}", e.reward_mean, e.reward_std, e.success_rate))
                    .unwrap_or_default();
                eprintln!(
                    "seed {seed} rollout {} step {} pi {:.4} v {:.4} kl {:.4}{eval}",
                    rec.rollout, rec.timestep, rec.update.policy_loss, rec.update.value_loss, rec.update.approx_kl
                );
            })?;
            print!("{}", summary.to_text());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            checkpoint,
            episodes,
            seed,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let env = EnvConfig::for_joints(ck.n_joints, ck.seed)?;
            let mut agent = Agent::new(ck.variant, ck.n_joints, env.joint_dim(), ck.seed)?;
            ck.load_into(&mut agent)?;
            let stats = evaluate_policy(&agent, &env, episodes, seed)?;
            println!("variant {} joints {}", ck.variant, ck.n_joints);
            println!("reward_mean {:.6}", stats.reward_mean);
            println!("reward_std {:.6}", stats.reward_std);
            println!("success_rate {:.6}", stats.success_rate);
            println!("episode_len_mean {:.3}", stats.episode_len_mean);
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify => {
            let report = kinegraph::verify::run_all();
            print!("{}", report.render());
            Ok(if report.all_passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Plot { out, title, csvs } => {
            let mut groups: BTreeMap<String, Vec<Vec<(u64, f64)>>> = BTreeMap::new();
            for p in &csvs {
                let rows = csv::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                    .with_context(|| format!("parsing {}", p.display()))?;
                let curve = csv::eval_curve(&rows);
                if curve.is_empty() {
                    bail!("{} has no evaluation rows", p.display());
                }
                let label = p
                    .parent()
                    .and_then(|d| d.file_name())
                    .map(|d| d.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "run".into());
                groups.entry(label).or_default().push(curve);
            }
            let series: Vec<PlotSeries> = groups.into_iter().map(|(label, runs)| PlotSeries { label, runs }).collect();
            fs::write(&out, harness::render_svg(&series, &title)?)?;
            eprintln!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare { summaries } => {
            let parsed = summaries
                .iter()
                .map(|p| {
                    Summary::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                        .with_context(|| format!("parsing {}", p.display()))
                })
                .collect::<Result<Vec<_>>>()?;
            print!("{}", compare_variants(&parsed)?.report());
            Ok(ExitCode::SUCCESS)
        }
        Command::RenderDump {
            joints,
            seed,
            count,
            out,
        } => {
            let cfg = EnvConfig::for_joints(joints, seed)?;
            let mut env = Reacher::new(cfg.clone(), 0)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            fs::create_dir_all(&out)?;
            for i in 0..count {
                // Random pose: a target from the disc plus a short burst of random torques.
                let mut obs = env.reset_to_target(sample_disc(&mut rng, cfg.total_reach()));
                let action: Vec<f64> = (0..joints).map(|_| rng.gen_range(-1.0..1.0)).collect();
                for _ in 0..20 {
                    obs = env.step(&action)?.observation;
                }
                let path = out.join(format!("frame_{i:04}.pgm"));
                fs::write(&path, obs.image.to_pgm())?;
            }
            eprintln!("wrote {count} frames to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::GraphDump { joints } => {
            print!("{}", RobotGraph::new(joints)?.dump());
            Ok(ExitCode::SUCCESS)
        }
    }
}
