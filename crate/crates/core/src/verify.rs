//! Self-check suite: gradient certificates, shape and oracle checks,
//! determinism, and a negative control proving the gradient check can fail.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::gradcheck::{check_stored_gradients, Entries, GradCheckReport};
use crate::autodiff::{gaussian_log_density, Activation, ParamId, Tape, Tensor, Var};
use crate::env::{render, EnvConfig, IMAGE_SIZE};
use crate::error::Result;
use crate::graph::{gcn_layer, RobotGraph};
use crate::model::{init, Agent, Variant};
use crate::ppo::{
    clipped_surrogate, collect_rollout, compute_gae, forward_batch, learning_rate, ppo_loss,
    PpoConfig, RolloutBuffer, VecEnv,
};
use crate::train::encoder_loss;

/// Central-difference step used by every gradient check.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error bound for network gradients.
pub const GRAD_TOL: f64 = 1e-4;
/// Relative-error bound for single operations.
pub const OP_GRAD_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

#[derive(Clone, Debug, Default)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(
                s,
                "[{}] {:<40} {:>7.2}s  {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.elapsed.as_secs_f64(),
                c.detail
            );
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        let _ = writeln!(s, "{} checks, {} failed", self.checks.len(), failed);
        s
    }
}

type Outcome = std::result::Result<String, String>;

fn run(name: &str, f: impl FnOnce() -> Outcome) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

fn lift<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn grad_outcome(report: &GradCheckReport, tol: f64) -> Outcome {
    let msg = format!(
        "{} probes ({} across a kink), max rel err {:.2e}",
        report.probes, report.kinks, report.max_rel_error
    );
    if report.passes(tol) {
        Ok(msg)
    } else {
        Err(format!("{msg}; worst {:?}", report.worst))
    }
}

/// Run the whole suite.
pub fn run_all() -> VerifyReport {
    let mut checks = vec![
        run("encoder shape trace (7744)", check_encoder_shapes),
        run("single-op gradients", check_op_gradients),
    ];
    for v in Variant::ALL {
        checks.push(run(&format!("ppo loss gradients [{v}]"), || check_ppo_gradients(v, 2, 8, 16, 7)));
    }
    checks.extend([
        run("ppo loss gradients [gn, 6 joints]", || check_ppo_gradients(Variant::Gn, 6, 8, 16, 8)),
        run("encoder loss gradients", check_encoder_gradients),
        run("negative control: corrupted gradient", check_negative_control),
        run("gcn layer vs message-passing loop", check_gcn_oracle),
        run("gae vs brute-force sum", check_gae_oracle),
        run("clipped surrogate hand cases", check_surrogate_cases),
        run("orthogonal init", check_orthogonality),
        run("learning-rate anchors", check_lr_anchors),
        run("deterministic forward and rollouts", check_determinism),
    ]);
    VerifyReport { checks }
}

fn check_encoder_shapes() -> Outcome {
    let agent = lift(Agent::new(Variant::CnnGn, 2, 2, 0))?;
    let mut tape = Tape::new();
    let img = render(&[0.3, -0.4], &[0.5, 0.5], [0.2, 0.1]);
    let x = tape.constant(lift(crate::model::images_tensor(&[&img]))?);
    let mut trace = Vec::new();
    lift(agent.encode_traced(&mut tape, x, &mut trace))?;
    let got: Vec<Vec<usize>> = trace.iter().map(|(_, s)| s.clone()).collect();
    let want = vec![
        vec![1, 6, 96, 96],
        vec![1, 6, 48, 48],
        vec![1, 16, 44, 44],
        vec![1, 16, 22, 22],
        vec![1, 7744],
        vec![1, 128],
    ];
    if got == want {
        Ok("6×96×96 → 6×48×48 → 16×44×44 → 16×22×22 → 7744 → 128".into())
    } else {
        Err(format!("got {trace:?}"))
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("positive extents")
}

/// Gradient check of `sum(w ⊙ f(inputs))` for a random weighting `w`,
/// perturbing every input entry.
pub fn op_gradcheck(
    inputs: Vec<Tensor>,
    seed: u64,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |inputs: &[Tensor], weights: Option<&Tensor>| -> Result<(Tape, Var, Vec<Var>, Tensor)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let w = match weights {
            Some(w) => w.clone(),
            None => Tensor::zeros(tape.value(out).shape()),
        };
        let wv = tape.constant(w.clone());
        let prod = tape.mul(out, wv)?;
        let loss = tape.sum(prod);
        Ok((tape, loss, vars, w))
    };
    let (tape0, _, _, w0) = eval(&inputs, None)?;
    drop(tape0);
    let weights = randn(&mut rng, w0.shape());
    let (tape, loss, vars, _) = eval(&inputs, Some(&weights))?;
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for i in 0..inputs[k].numel() {
            let mut shifted = inputs.clone();
            shifted[k].data_mut()[i] += FD_STEP;
            let (t_up, l_up, _, _) = eval(&shifted, Some(&weights))?;
            shifted[k].data_mut()[i] -= 2.0 * FD_STEP;
            let (t_dn, l_dn, _, _) = eval(&shifted, Some(&weights))?;
            let numeric = (t_up.value(l_up).item() - t_dn.value(l_dn).item()) / (2.0 * FD_STEP);
            worst = worst.max(crate::autodiff::gradcheck::relative_error(analytic[i], numeric));
        }
    }
    Ok(worst)
}

fn check_op_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let a = randn(&mut rng, &[3, 4]);
    let b = randn(&mut rng, &[4, 2]);
    worst.push(("matmul", lift(op_gradcheck(vec![a, b], 1, |t, v| t.matmul(v[0], v[1])))?));
    let x = randn(&mut rng, &[1, 8, 8]);
    let k = randn(&mut rng, &[2, 1, 5, 5]);
    let bias = randn(&mut rng, &[2]);
    worst.push(("conv2d", lift(op_gradcheck(vec![x, k, bias], 2, |t, v| t.conv2d(v[0], v[1], v[2])))?));
    // Pool inputs with well-separated values so no window has a near tie.
    let perm: Vec<f64> = {
        let mut p: Vec<f64> = (0..2 * 6 * 6).map(|i| i as f64 * 0.1).collect();
        rand::seq::SliceRandom::shuffle(p.as_mut_slice(), &mut rng);
        p
    };
    let pool_in = Tensor::new(&[2, 6, 6], perm).expect("2×6×6");
    worst.push(("max_pool2x2", lift(op_gradcheck(vec![pool_in], 3, |t, v| t.max_pool2x2(v[0])))?));
    let r = randn(&mut rng, &[10]);
    worst.push(("relu", lift(op_gradcheck(vec![r.clone()], 4, |t, v| Ok(t.relu(v[0]))))?));
    worst.push(("tanh", lift(op_gradcheck(vec![r], 5, |t, v| Ok(t.tanh(v[0]))))?));
    let mean = randn(&mut rng, &[3, 2]);
    let ls = Tensor::scalar(0.3);
    let action: Vec<f64> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
    worst.push((
        "gaussian_log_prob",
        lift(op_gradcheck(vec![mean, ls], 6, move |t, v| t.gaussian_log_prob(&action, v[0], v[1])))?,
    ));
    let a = randn(&mut rng, &[6, 3]);
    let adj = RobotGraph::new(3).expect("3 nodes").normalized_shared();
    worst.push(("propagate", lift(op_gradcheck(vec![a], 7, move |t, v| t.propagate(v[0], adj.clone(), 3)))?));
    let detail: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    if worst.iter().all(|(_, e)| *e <= OP_GRAD_TOL) {
        Ok(detail.join(", "))
    } else {
        Err(detail.join(", "))
    }
}

/// Random but well-conditioned transitions for loss-level checks.
///
/// Actions are drawn around the current policy means and the stored
/// log-probabilities are offset by up to ±0.4 nats, so ratios spread over
/// roughly `[0.67, 1.5]` and part of the batch is clipped.
pub fn synthetic_buffer(agent: &Agent, len: usize, seed: u64) -> Result<RolloutBuffer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = agent.n_joints();
    let d = agent.joint_dim();
    let gw = agent.global_input_width();
    let mut buf = RolloutBuffer::zeroed(1, len, n, d, gw);
    let images = agent.variant().uses_images();
    for v in buf.global.iter_mut() {
        *v = if images { rng.gen_range(0.0..1.5) } else { rng.gen_range(-1.0..1.0) };
    }
    for v in buf.joints.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let global = Tensor::new(&[len, gw], buf.global.clone())?;
    let joints = Tensor::new(&[len * n, d], buf.joints.clone())?;
    let (means, values) = forward_batch(agent, global, joints)?;
    let ls = agent.log_sigma();
    buf.log_sigma = ls;
    buf.means = means;
    buf.values = values;
    for i in 0..len {
        for j in 0..n {
            let eps: f64 = rng.sample(StandardNormal);
            buf.actions[i * n + j] = buf.means[i * n + j] + ls.exp() * eps;
        }
        buf.log_probs[i] =
            gaussian_log_density(buf.action(i), buf.mean(i), ls) + rng.gen_range(-0.4..0.4);
        buf.rewards[i] = rng.gen_range(-1.0..0.0);
    }
    buf.advantages = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    buf.returns = (0..len).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.5).collect();
    Ok(buf)
}

/// Copy the checked tensors into the probe agent; nothing else is perturbed.
fn sync(probe: &mut Agent, store: &crate::autodiff::ParamStore, ids: &[ParamId]) {
    for &id in ids {
        probe.params.get_mut(id).value.data_mut().copy_from_slice(store.value(id).data());
    }
}

/// Move biases and log σ off zero. With zero biases, flat image background
/// sits exactly on a ReLU kink where finite differences are meaningless.
fn jitter_biases(agent: &mut Agent, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = agent.params.ids().collect();
    for id in ids {
        let name = agent.params.get(id).name.clone();
        if name.ends_with(".bias") || name == "log_sigma" {
            for v in agent.params.get_mut(id).value.data_mut() {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
    }
}

/// Certify the PPO-loss gradient of every policy-side parameter of
/// `variant` on a synthetic buffer.
pub fn ppo_gradcheck(
    variant: Variant,
    n_joints: usize,
    transitions: usize,
    entries: Entries,
    seed: u64,
) -> Result<GradCheckReport> {
    let d = EnvConfig::for_joints(n_joints, seed)?.joint_dim();
    let mut agent = Agent::new(variant, n_joints, d, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    jitter_biases(&mut agent, &mut rng);
    let buf = synthetic_buffer(&agent, transitions, seed)?;
    let cfg = PpoConfig::default();
    let idx: Vec<usize> = (0..transitions).collect();
    let ids = agent.policy_ids();

    agent.params.zero_grad();
    let mut tape = Tape::new();
    let parts = ppo_loss(&mut tape, &agent, &buf, &idx, &cfg)?;
    tape.backward_into(parts.loss, &mut agent.params)?;
    let mut probe = agent.clone();
    check_stored_gradients(&mut agent.params, &ids.clone(), entries, FD_STEP, &mut rng, |store| {
        sync(&mut probe, store, &ids);
        let mut t = Tape::new();
        let p = ppo_loss(&mut t, &probe, &buf, &idx, &cfg)?;
        Ok(t.value(p.loss).item())
    })
}

fn check_ppo_gradients(variant: Variant, n: usize, transitions: usize, sample: usize, seed: u64) -> Outcome {
    let report = lift(ppo_gradcheck(variant, n, transitions, Entries::Sample(sample), seed))?;
    grad_outcome(&report, GRAD_TOL)
}

/// Certify the auxiliary-loss gradient of every encoder parameter on a few
/// rendered frames.
pub fn encoder_gradcheck(frames: usize, entries: Entries, seed: u64) -> Result<GradCheckReport> {
    let mut agent = Agent::new(Variant::CnnGn, 2, 2, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    jitter_biases(&mut agent, &mut rng);
    let links = [0.5, 0.5];
    let images: Vec<_> = (0..frames)
        .map(|_| render(&[rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)], &links, crate::env::sample_disc(&mut rng, 1.0)))
        .collect();
    let targets: Vec<[f64; 2]> = (0..frames).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
    let refs: Vec<_> = images.iter().collect();
    let ids = agent.encoder_ids();
    agent.params.zero_grad();
    let mut tape = Tape::new();
    let loss = encoder_loss(&mut tape, &agent, &refs, &targets)?;
    tape.backward_into(loss, &mut agent.params)?;
    let mut probe = agent.clone();
    check_stored_gradients(&mut agent.params, &ids.clone(), entries, FD_STEP, &mut rng, |store| {
        sync(&mut probe, store, &ids);
        let mut t = Tape::new();
        let l = encoder_loss(&mut t, &probe, &refs, &targets)?;
        Ok(t.value(l).item())
    })
}

fn check_encoder_gradients() -> Outcome {
    let report = lift(encoder_gradcheck(2, Entries::Sample(12), 3))?;
    grad_outcome(&report, GRAD_TOL)
}

/// Perturb one stored gradient entry by `delta` (relative) and rerun the
/// check on that tensor; returns the report, which must fail.
pub fn corrupted_gradient_report(delta: f64) -> Result<GradCheckReport> {
    let mut agent = Agent::new(Variant::Gn, 2, 2, 5)?;
    let buf = synthetic_buffer(&agent, 8, 5)?;
    let cfg = PpoConfig::default();
    let idx: Vec<usize> = (0..8).collect();
    agent.params.zero_grad();
    let mut tape = Tape::new();
    let parts = ppo_loss(&mut tape, &agent, &buf, &idx, &cfg)?;
    tape.backward_into(parts.loss, &mut agent.params)?;
    let id: ParamId = agent.params.id("value.out.bias").expect("value head bias");
    let g = &mut agent.params.get_mut(id).grad.data_mut()[0];
    *g += delta * g.abs().max(1e-3);
    let mut probe = agent.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ids = [id];
    check_stored_gradients(&mut agent.params, &ids, Entries::All, FD_STEP, &mut rng, |store| {
        sync(&mut probe, store, &ids);
        let mut t = Tape::new();
        let p = ppo_loss(&mut t, &probe, &buf, &idx, &cfg)?;
        Ok(t.value(p.loss).item())
    })
}

fn check_negative_control() -> Outcome {
    let report = lift(corrupted_gradient_report(0.01))?;
    if report.passes(GRAD_TOL) {
        Err(format!("a 1% gradient corruption went unnoticed (max rel err {:.2e})", report.max_rel_error))
    } else {
        Ok(format!("corruption detected, rel err {:.2e}", report.max_rel_error))
    }
}

fn check_gcn_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 6;
    let (din, dout) = (5, 4);
    let g = lift(RobotGraph::new(n))?;
    let v = randn(&mut rng, &[n, din]);
    let w = randn(&mut rng, &[din, dout]);
    let b = randn(&mut rng, &[dout]);
    let mut tape = Tape::new();
    let (vv, wv, bv) = (tape.constant(v.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let out = lift(gcn_layer(&mut tape, vv, &g, wv, bv, Activation::Identity))?;
    let a = g.normalized();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let mut msg = vec![0.0; din];
        for j in 0..n {
            for (m, x) in msg.iter_mut().zip(v.row(j)) {
                *m += a[i * n + j] * x;
            }
        }
        for c in 0..dout {
            let mut y = b.data()[c];
            for (k, m) in msg.iter().enumerate() {
                y += m * w.data()[k * dout + c];
            }
            worst = worst.max((y - tape.value(out).data()[i * dout + c]).abs());
        }
    }
    if worst <= 1e-12 {
        Ok(format!("max abs diff {worst:.1e}"))
    } else {
        Err(format!("max abs diff {worst:.1e}"))
    }
}

fn check_gae_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (gamma, lambda) = (0.99, 0.95);
    let t_len = 10;
    let rewards: Vec<f64> = (0..t_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let values: Vec<f64> = (0..t_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let dones: Vec<bool> = (0..t_len).map(|i| i == 4).collect();
    let last = 0.7;
    let got = compute_gae(&rewards, &values, &dones, last, gamma, lambda);
    let value_at = |k: usize| if k < t_len { values[k] } else { last };
    let mut worst: f64 = 0.0;
    for t in 0..t_len {
        // A_t = Σ_k (γλ)^k δ_{t+k}, truncated after the first episode end.
        let mut sum = 0.0;
        for k in t..t_len {
            let live = if dones[k] { 0.0 } else { 1.0 };
            let delta = rewards[k] + gamma * value_at(k + 1) * live - values[k];
            sum += (gamma * lambda).powi((k - t) as i32) * delta;
            if dones[k] {
                break;
            }
        }
        worst = worst.max((sum - got[t]).abs());
    }
    if worst <= 1e-10 {
        Ok(format!("max abs diff {worst:.1e}"))
    } else {
        Err(format!("max abs diff {worst:.1e}"))
    }
}

fn check_surrogate_cases() -> Outcome {
    let a = -clipped_surrogate(1.5, 1.0, 0.2);
    let b = -clipped_surrogate(0.5, -1.0, 0.2);
    if a == -1.2 && b == 0.8 {
        Ok("r=1.5,A=1 → −1.2; r=0.5,A=−1 → 0.8".into())
    } else {
        Err(format!("got {a} and {b}"))
    }
}

fn check_orthogonality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst: f64 = 0.0;
    for &(rows, cols, gain) in &[(16, 16, 2f64.sqrt()), (8, 20, 1.0), (2, 256, 0.01), (6, 25, 2f64.sqrt())] {
        let w = init::semi_orthogonal(rows, cols, gain, &mut rng);
        for i in 0..rows {
            for j in 0..rows {
                let dot: f64 = (0..cols).map(|k| w[i * cols + k] * w[j * cols + k]).sum();
                let want = if i == j { gain * gain } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
    }
    if worst <= 1e-10 {
        Ok(format!("max |WWᵀ − g²I| {worst:.1e}"))
    } else {
        Err(format!("max |WWᵀ − g²I| {worst:.1e}"))
    }
}

fn check_lr_anchors() -> Outcome {
    let t = 1_000_000;
    let got = [learning_rate(0, t, 0.00025), learning_rate(t / 5, t, 0.00025), learning_rate(t, t, 0.00025)];
    if got == [0.00025, 0.00025, 0.00005] {
        Ok("α(0) = α(T/5) = 2.5e-4, α(T) = 5e-5".into())
    } else {
        Err(format!("got {got:?}"))
    }
}

fn check_determinism() -> Outcome {
    let agent = lift(Agent::new(Variant::CnnGn, 2, 2, 9))?;
    let again = lift(Agent::new(Variant::CnnGn, 2, 2, 9))?;
    let ids: Vec<_> = agent.params.ids().collect();
    if agent.params.fingerprint(&ids) != again.params.fingerprint(&ids) {
        return Err("same-seed initializations differ".into());
    }
    let env = lift(EnvConfig::for_joints(2, 9))?;
    let mut fingerprints = Vec::new();
    for workers in [1, 3] {
        let mut venv = lift(VecEnv::new(&env, 3, workers))?;
        let buf = lift(collect_rollout(&agent, &mut venv, 4, 9, 0))?;
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for x in buf.global.iter().chain(&buf.actions).chain(&buf.log_probs).chain(&buf.values).chain(&buf.rewards) {
            h = (h ^ x.to_bits()).wrapping_mul(0x100_0000_01b3);
        }
        fingerprints.push(h);
    }
    if fingerprints[0] == fingerprints[1] {
        Ok(format!("rollout fingerprint {:016x} for 1 and 3 workers; {}×{} frames", fingerprints[0], IMAGE_SIZE, IMAGE_SIZE))
    } else {
        Err("rollouts differ between worker counts".into())
    }
}
