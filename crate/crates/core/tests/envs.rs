use std::f64::consts::PI;

use nadpex::envs::{
    mountain_car, pendulum, replay_trajectory, Env, EnvKind, TrajectoryWriter, Variant, VectorEnv, VectorEnvSnapshot,
};
use nadpex::rng::{stream, uniform};

fn random_action(kind: EnvKind, rng: &mut nadpex::rng::StreamRng) -> Vec<f64> {
    let b = 1.5 * kind.action_bound();
    vec![uniform(rng, -b, b)]
}

#[test]
fn states_stay_in_bounds_under_random_actions() {
    let mut rng = stream(1, 99);
    for kind in [EnvKind::MountainCar, EnvKind::Pendulum] {
        for variant in [Variant::Dense, Variant::Sparse] {
            let mut env = Env::new(kind, variant, 200, stream(2, 1000)).unwrap();
            env.reset();
            for _ in 0..100_000 {
                let r = env.step(&random_action(kind, &mut rng)).unwrap();
                let [a, b] = env.state();
                assert!(r.reward.is_finite());
                match kind {
                    EnvKind::MountainCar => {
                        assert!((mountain_car::MIN_POSITION..=mountain_car::MAX_POSITION).contains(&a));
                        assert!(b.abs() <= mountain_car::MAX_SPEED);
                    }
                    EnvKind::Pendulum => {
                        assert!((-PI..PI).contains(&a));
                        assert!(b.abs() <= pendulum::MAX_SPEED);
                        assert!((r.obs[0].powi(2) + r.obs[1].powi(2) - 1.0).abs() < 1e-12);
                    }
                }
                if variant == Variant::Sparse {
                    assert!(r.reward == 0.0 || r.reward == 1.0);
                }
                if r.done {
                    env.reset();
                }
            }
        }
    }
}

#[test]
fn reset_distribution_has_the_expected_mean() {
    let n = 10_000;
    let mut car = Env::new(EnvKind::MountainCar, Variant::Dense, 10, stream(3, 1000)).unwrap();
    let xs: Vec<[f64; 2]> = (0..n).map(|_| {
        car.reset();
        car.state()
    }).collect();
    let mx = xs.iter().map(|s| s[0]).sum::<f64>() / n as f64;
    assert!((mx + 0.5).abs() < 4.0 * (0.2 / 12f64.sqrt()) / (n as f64).sqrt());
    assert!(xs.iter().all(|s| (-0.6..-0.4).contains(&s[0]) && s[1] == 0.0));

    let mut pend = Env::new(EnvKind::Pendulum, Variant::Dense, 10, stream(3, 1001)).unwrap();
    let ps: Vec<[f64; 2]> = (0..n).map(|_| {
        pend.reset();
        pend.state()
    }).collect();
    let mt = ps.iter().map(|s| s[0]).sum::<f64>() / n as f64;
    let mv = ps.iter().map(|s| s[1]).sum::<f64>() / n as f64;
    assert!(mt.abs() < 4.0 * (2.0 * PI / 12f64.sqrt()) / (n as f64).sqrt());
    assert!(mv.abs() < 4.0 * (2.0 / 12f64.sqrt()) / (n as f64).sqrt());
}

#[test]
fn sparse_and_dense_share_dynamics() {
    let mut rng = stream(5, 5);
    for kind in [EnvKind::MountainCar, EnvKind::Pendulum] {
        let mut d = Env::new(kind, Variant::Dense, 10_000, stream(6, 1000)).unwrap();
        let mut s = Env::new(kind, Variant::Sparse, 10_000, stream(6, 1000)).unwrap();
        d.reset();
        s.reset();
        for _ in 0..2000 {
            let a = random_action(kind, &mut rng);
            let rd = d.step(&a).unwrap();
            let rs = s.step(&a).unwrap();
            assert_eq!(d.state(), s.state());
            assert_eq!(rd.milestone, rs.milestone);
            assert_eq!(rs.reward, if rs.milestone { 1.0 } else { 0.0 });
            if rd.done || rs.done {
                assert_eq!(rd.done, rs.done);
                d.reset();
                s.reset();
            }
        }
    }
}

#[test]
fn horizon_and_goal_end_episodes() {
    let mut p = Env::new(EnvKind::Pendulum, Variant::Dense, 10, stream(1, 1000)).unwrap();
    p.reset();
    let dones: Vec<bool> = (0..10).map(|_| p.step(&[0.0]).unwrap().done).collect();
    assert_eq!(dones.iter().filter(|d| **d).count(), 1);
    assert!(dones[9]);

    let mut c = Env::new(EnvKind::MountainCar, Variant::Sparse, 500, stream(1, 1000)).unwrap();
    c.restore([0.449, 0.02], 3);
    let r = c.step(&[1.0]).unwrap();
    assert!(r.done && r.milestone && r.reward == 1.0);
}

#[test]
fn vector_env_assigns_fresh_episode_ids() {
    let mut v = VectorEnv::new(EnvKind::Pendulum, Variant::Dense, 10, 1, 7).unwrap();
    assert_eq!(v.episode_ids(), &[0]);
    let mut seen = vec![];
    for _ in 0..10 {
        let s = v.step(&[vec![0.0]]).unwrap();
        seen.push(s[0].episode_id);
        if let Some(b) = &s[0].boundary {
            assert_eq!((b.finished, b.started), (0, 1));
        }
    }
    assert!(seen.iter().all(|&e| e == 0));
    assert_eq!(v.episode_ids(), &[1]);

    let mut w = VectorEnv::new(EnvKind::Pendulum, Variant::Dense, 10, 2, 7).unwrap();
    assert_eq!(w.episode_ids(), &[0, 1]);
    let mut boundaries = 0;
    for _ in 0..25 {
        for s in w.step(&[vec![0.0], vec![0.0]]).unwrap() {
            boundaries += usize::from(s.boundary.is_some());
        }
    }
    assert_eq!(boundaries, 4);
    assert_eq!(w.episode_ids(), &[4, 5]);
    assert!(w.step(&[vec![0.0]]).is_err());
}

#[test]
fn vector_env_snapshot_resumes_bit_exactly() {
    let mut rng = stream(9, 9);
    let mut v = VectorEnv::new(EnvKind::MountainCar, Variant::Sparse, 50, 3, 11).unwrap();
    for _ in 0..123 {
        let a: Vec<Vec<f64>> = (0..3).map(|_| random_action(EnvKind::MountainCar, &mut rng)).collect();
        v.step(&a).unwrap();
    }
    let json = serde_json::to_string(&v.snapshot()).unwrap();
    let snap: VectorEnvSnapshot = serde_json::from_str(&json).unwrap();
    assert_eq!(snap, v.snapshot());
    let mut w = VectorEnv::from_snapshot(&snap).unwrap();
    for _ in 0..300 {
        let a: Vec<Vec<f64>> = (0..3).map(|_| random_action(EnvKind::MountainCar, &mut rng)).collect();
        assert_eq!(v.step(&a).unwrap(), w.step(&a).unwrap());
    }
}

#[test]
fn recorded_trajectories_replay_exactly_and_tampering_is_caught() {
    let mut rng = stream(4, 4);
    let mut v = VectorEnv::new(EnvKind::Pendulum, Variant::Sparse, 40, 2, 3).unwrap();
    let mut w = TrajectoryWriter::new(Vec::new(), EnvKind::Pendulum).unwrap();
    for _ in 0..200 {
        let pre: Vec<([f64; 2], usize)> = v.envs().iter().map(|e| (e.state(), e.step_count())).collect();
        let a: Vec<Vec<f64>> = (0..2).map(|_| random_action(EnvKind::Pendulum, &mut rng)).collect();
        for (i, s) in v.step(&a).unwrap().into_iter().enumerate() {
            w.record(s.episode_id, pre[i].1, &pre[i].0, &a[i], s.result.reward, s.result.done).unwrap();
        }
    }
    let text = String::from_utf8(w.into_inner()).unwrap();
    let ok = replay_trajectory(&text, EnvKind::Pendulum, Variant::Sparse, 40).unwrap();
    assert!(ok.is_exact());
    assert_eq!(ok.rows, 400);
    assert_eq!(ok.episodes, 10);

    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let row = lines[5].clone();
    let mut f: Vec<&str> = row.split(',').collect();
    let last = f.len() - 2;
    let bumped = if f[last].trim() == "1" { "0" } else { "1" };
    f[last] = bumped;
    lines[5] = f.join(",");
    let bad = replay_trajectory(&lines.join("\n"), EnvKind::Pendulum, Variant::Sparse, 40).unwrap();
    assert!(!bad.is_exact());
}
