use std::f64::consts::PI;

use kinegraph::env::render::pixel_of;
use kinegraph::env::{forward_kinematics, render, sample_disc, wrap_angle, EnvConfig, Reacher, IMAGE_SIZE};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn two_link(seed: u64) -> Reacher {
    Reacher::new(EnvConfig::for_joints(2, seed).unwrap(), 0).unwrap()
}

/// End effector by composing homogeneous 2D transforms link by link.
fn fk_rotations(angles: &[f64], links: &[f64]) -> [f64; 2] {
    // Running transform [R | p] with R a 2×2 rotation.
    let (mut r, mut p) = ([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0]);
    for (q, l) in angles.iter().zip(links) {
        let rot = [[q.cos(), -q.sin()], [q.sin(), q.cos()]];
        let mut next = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                next[i][j] = r[i][0] * rot[0][j] + r[i][1] * rot[1][j];
            }
        }
        r = next;
        p = [p[0] + r[0][0] * l, p[1] + r[1][0] * l];
    }
    p
}

#[test]
fn default_constants() {
    let c2 = EnvConfig::for_joints(2, 0).unwrap();
    assert_eq!(c2.link_lengths, vec![0.5, 0.5]);
    assert!((c2.success_radius - 0.2).abs() < 1e-15);
    assert_eq!((c2.max_steps, c2.success_bonus, c2.joint_dim()), (300, 300.0, 2));
    let c6 = EnvConfig::for_joints(6, 0).unwrap();
    assert_eq!(c6.link_lengths, vec![0.17; 6]);
    assert!((c6.success_radius - 0.2 * 1.02).abs() < 1e-12);
    assert_eq!((c6.max_steps, c6.success_bonus, c6.joint_dim()), (500, 10.0, 4));
    assert!(EnvConfig::for_joints(0, 0).is_err());
}

#[test]
fn forward_kinematics_cases() {
    let links = [0.5, 0.5];
    assert_eq!(forward_kinematics(&[0.0, 0.0], &links), [1.0, 0.0]);
    let p = forward_kinematics(&[PI / 2.0, 0.0], &links);
    assert!(p[0].abs() < 1e-15 && (p[1] - 1.0).abs() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in 1..=7 {
        for _ in 0..50 {
            let angles: Vec<f64> = (0..n).map(|_| rng.gen_range(-PI..PI)).collect();
            let links: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
            let a = forward_kinematics(&angles, &links);
            let b = fk_rotations(&angles, &links);
            assert!((a[0] - b[0]).abs() <= 1e-12 && (a[1] - b[1]).abs() <= 1e-12);
        }
    }
}

#[test]
fn reset_is_zero_pose_with_target_in_disc() {
    let mut env = two_link(3);
    for _ in 0..200 {
        let obs = env.reset();
        assert!(obs.joint_states.iter().all(|j| j.angle == 0.0 && j.velocity == 0.0));
        let t = env.target();
        assert!(t[0].hypot(t[1]) <= 1.0);
        assert_eq!(obs.target_normalized, t);
    }
}

#[test]
fn disc_sampling_moments() {
    // Uniform on the unit disc: E[x] = E[y] = 0, Var[x] = 1/4, E[r²] = 1/2.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100_000;
    let (mut sx, mut sy, mut sr2) = (0.0, 0.0, 0.0);
    for _ in 0..n {
        let p = sample_disc(&mut rng, 1.0);
        sx += p[0];
        sy += p[1];
        sr2 += p[0] * p[0] + p[1] * p[1];
    }
    let nf = n as f64;
    let se = (0.25 / nf).sqrt();
    assert!((sx / nf).abs() < 3.0 * se && (sy / nf).abs() < 3.0 * se);
    // Var[r²] = E[r⁴] − 1/4 = 1/3 − 1/4.
    assert!((sr2 / nf - 0.5).abs() < 4.0 * (1.0 / 12.0 / nf).sqrt());
}

#[test]
fn step_semantics() {
    let mut env = two_link(7);
    env.reset_to_target([0.0, 0.6]);
    let r = env.step(&[0.0, 0.0]).unwrap();
    assert!((r.reward + (1.0f64.powi(2) + 0.36).sqrt()).abs() < 1e-15);
    assert!(!r.terminated && !r.truncated);

    let r = env.step(&[10.0, -10.0]).unwrap();
    let js = &r.observation.joint_states;
    assert_eq!((js[0].velocity, js[1].velocity), (1.5, -1.5));
    assert!((js[0].angle - 0.075).abs() < 1e-15 && (js[1].angle + 0.075).abs() < 1e-15);

    assert!(env.step(&[0.0]).is_err());
    assert!(env.step(&[f64::NAN, 0.0]).is_err());

    env.reset_to_target([1.0, 0.0]);
    let r = env.step(&[0.0, 0.0]).unwrap();
    assert!(r.terminated && !r.truncated);
    assert!(r.reward >= 300.0 - 0.2);
    assert!(env.step(&[0.0, 0.0]).is_err());
}

#[test]
fn truncation_at_step_limit() {
    let mut env = two_link(8);
    env.reset_to_target([-0.9, 0.0]);
    let mut steps = 0;
    loop {
        // Swing away from the target; never succeeds.
        let r = env.step(&[0.0, 0.0]).unwrap();
        steps += 1;
        assert!(r.reward < 0.0 && r.reward >= -2.0);
        if r.truncated {
            assert!(!r.terminated);
            break;
        }
    }
    assert_eq!(steps, 300);
}

#[test]
fn success_at_the_limit_counts_as_termination() {
    let mut env = two_link(9);
    env.reset_to_target([-0.9, 0.0]);
    for _ in 0..299 {
        env.step(&[0.0, 0.0]).unwrap();
    }
    // Teleport next to the target for the final step.
    let mut snap = env.snapshot().clone();
    snap.angles = vec![PI - 0.01, 0.0];
    env.restore(snap).unwrap();
    let r = env.step(&[0.0, 0.0]).unwrap();
    assert!(r.terminated && !r.truncated);
}

/// Analytic inverse kinematics (elbow-down) for a two-link arm.
fn ik(target: [f64; 2], l1: f64, l2: f64) -> [f64; 2] {
    let d2 = target[0] * target[0] + target[1] * target[1];
    let c2 = ((d2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    let q2 = c2.acos();
    let q1 = target[1].atan2(target[0]) - (l2 * q2.sin()).atan2(l1 + l2 * q2.cos());
    [q1, q2]
}

#[test]
fn scripted_controller_solves_most_episodes() {
    let mut env = two_link(11);
    let episodes = 1000;
    let mut solved = 0;
    for _ in 0..episodes {
        env.reset();
        let goal = ik(env.target(), 0.5, 0.5);
        let mut q = [0.0, 0.0];
        for _ in 0..300 {
            let cmd: Vec<f64> = (0..2).map(|i| 4.0 * wrap_angle(goal[i] - q[i])).collect();
            let r = env.step(&cmd).unwrap();
            q = [r.observation.joint_states[0].angle, r.observation.joint_states[1].angle];
            if r.terminated {
                solved += 1;
                break;
            }
            if r.truncated {
                break;
            }
        }
    }
    assert!(solved as f64 >= 0.95 * episodes as f64, "solved {solved}/{episodes}");
}

#[test]
fn random_policy_is_far_below_the_scripted_controller() {
    let mut env = two_link(12);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut solved = 0;
    for _ in 0..200 {
        env.reset();
        loop {
            let a = [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
            let r = env.step(&a).unwrap();
            if r.terminated {
                solved += 1;
            }
            if r.terminated || r.truncated {
                break;
            }
        }
    }
    assert!(solved < 190, "random policy solved {solved}/200");
}

#[test]
fn episode_return_matches_replay() {
    let cfg = EnvConfig::for_joints(2, 13).unwrap();
    let mut env = Reacher::new(cfg.clone(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        env.reset();
        let target = env.target();
        let goal = ik(target, 0.5, 0.5);
        let mut ret = 0.0;
        let mut actions = Vec::new();
        loop {
            let noise: f64 = rng.gen_range(-0.5..0.5);
            let q = env.snapshot().angles.clone();
            let a = vec![2.0 * wrap_angle(goal[0] - q[0]) + noise, 2.0 * wrap_angle(goal[1] - q[1])];
            actions.push(a.clone());
            let r = env.step(&a).unwrap();
            ret += r.reward;
            if r.terminated || r.truncated {
                break;
            }
        }
        // Replay: integrate the clamped commands and sum distances by hand.
        let mut q = [0.0, 0.0];
        let mut dists = 0.0;
        let mut last = 0.0;
        for a in &actions {
            for i in 0..2 {
                q[i] = wrap_angle(q[i] + a[i].clamp(-1.5, 1.5) * 0.05);
            }
            let p = forward_kinematics(&q, &cfg.link_lengths);
            last = (p[0] - target[0]).hypot(p[1] - target[1]);
            dists += last;
        }
        let bonus = if last <= cfg.success_radius { cfg.success_bonus } else { 0.0 };
        assert!((ret - (bonus - dists)).abs() < 1e-9);
    }
}

#[test]
fn render_properties() {
    let target = [0.3, -0.4];
    let a = render(&[0.0, 0.0], &[0.5, 0.5], target);
    let b = render(&[0.0, 0.0], &[0.5, 0.5], target);
    assert_eq!(a.to_pgm(), b.to_pgm());
    let moved = render(&[0.4, 0.0], &[0.5, 0.5], target);
    assert!(a.pixels().zip(moved.pixels()).any(|(x, y)| x != y));
    let (row, col) = pixel_of(target, 1.0).unwrap();
    assert_eq!(a.get(row, col), 1.0);
    let levels: std::collections::BTreeSet<u32> = a.pixels().map(|p| (p * 4.0) as u32).collect();
    assert_eq!(levels.into_iter().collect::<Vec<_>>(), vec![0, 2, 3, 4]);
    let pgm = a.to_pgm();
    let header = format!("P5\n{IMAGE_SIZE} {IMAGE_SIZE}\n255\n");
    assert!(pgm.starts_with(header.as_bytes()));
    assert_eq!(pgm.len(), header.len() + IMAGE_SIZE * IMAGE_SIZE);
}

#[test]
fn seeded_episodes_are_reproducible() {
    let run = || {
        let mut env = two_link(21);
        let mut trace = Vec::new();
        for _ in 0..3 {
            env.reset();
            trace.push(env.target()[0].to_bits());
            for k in 0..10 {
                let r = env.step(&[0.3 * k as f64, -0.2]).unwrap();
                trace.push(r.reward.to_bits());
                trace.extend(r.observation.image.pixels().map(|p| p.to_bits() as u64).step_by(97));
            }
        }
        trace
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn wrap_stays_in_half_open_interval(x in -1e4f64..1e4) {
        let w = wrap_angle(x);
        prop_assert!(w > -PI && w <= PI);
        prop_assert!(((x - w) / (2.0 * PI) - ((x - w) / (2.0 * PI)).round()).abs() < 1e-9);
    }

    #[test]
    fn steps_keep_invariants(seed in any::<u64>(), actions in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..60)) {
        let mut env = two_link(seed);
        env.reset();
        for (a0, a1) in actions {
            let r = env.step(&[a0, a1]).unwrap();
            for j in &r.observation.joint_states {
                prop_assert!(j.angle > -PI && j.angle <= PI);
                prop_assert!(j.velocity.abs() <= 1.5);
            }
            prop_assert!(!(r.terminated && r.truncated));
            if !r.terminated {
                prop_assert!(r.reward < 0.0 && r.reward >= -2.0);
            }
            let t = r.observation.target_normalized;
            prop_assert!(t[0].abs() <= 1.0 && t[1].abs() <= 1.0);
            if r.terminated || r.truncated {
                break;
            }
        }
    }
}
