use std::collections::{HashMap, HashSet};
use std::fs;

use nadpex::config::{ExplorationMode, TrainConfig};
use nadpex::dropoutdist::DropoutKind;
use nadpex::envs::{EnvKind, Variant};
use nadpex::estimators::{compute_gradients, Batch, DropoutPath, LossSpec, Surrogate};
use nadpex::runner::{
    exploration_storage_bytes, resume_seed, run_experiment, train_seed, train_seed_checkpointed, Checkpoint, Trainer,
};
use nadpex::Error;

fn small(mode: ExplorationMode) -> TrainConfig {
    TrainConfig {
        env: EnvKind::Pendulum,
        variant: Variant::Dense,
        episode_horizon: Some(10),
        mode,
        hidden: vec![8, 8],
        num_envs: 1,
        batch_steps: 10,
        epochs: 2,
        seeds: vec![1],
        total_steps: 40,
        ..TrainConfig::default()
    }
}

const GAUSS: ExplorationMode = ExplorationMode::Nadpex(DropoutKind::Gaussian);

#[test]
fn one_episode_uses_one_mask_for_every_step() {
    let mut t = Trainer::new(&small(GAUSS), 1).unwrap();
    let r = t.collect_batch().unwrap();
    assert_eq!(r.episodes.len(), 1);
    assert!(r.episodes[0].mask.is_some());
    assert_eq!(r.episode_ids, vec![r.episodes[0].episode_id; 10]);
    assert!(r.state_hashes.iter().all(|h| *h == r.state_hashes[0]));
}

#[test]
fn five_boundaries_give_six_episodes_with_fresh_masks() {
    let cfg = TrainConfig {
        batch_steps: 60,
        ..small(GAUSS)
    };
    let mut t = Trainer::new(&cfg, 2).unwrap();
    let r = t.collect_batch().unwrap();
    let ids: HashSet<u64> = r.episode_ids.iter().copied().collect();
    assert_eq!(ids.len(), 6);
    assert_eq!(r.episodes.len(), 6);
    let mut per_episode: HashMap<u64, HashSet<u64>> = HashMap::new();
    for (id, h) in r.episode_ids.iter().zip(&r.state_hashes) {
        per_episode.entry(*id).or_default().insert(*h);
    }
    assert!(per_episode.values().all(|s| s.len() == 1));
    let distinct: HashSet<u64> = r.state_hashes.iter().copied().collect();
    assert_eq!(distinct.len(), 6);
}

#[test]
fn bernoulli_masks_of_concurrent_episodes_differ() {
    let cfg = TrainConfig {
        mode: ExplorationMode::Nadpex(DropoutKind::Bernoulli),
        dropout_rate: 0.3,
        hidden: vec![64, 64],
        num_envs: 2,
        batch_steps: 20,
        ..small(GAUSS)
    };
    let mut t = Trainer::new(&cfg, 3).unwrap();
    for _ in 0..100 {
        let r = t.collect_batch().unwrap();
        assert_eq!(r.episodes.len(), 2);
        let a = r.episodes[0].mask.as_ref().unwrap().values();
        let b = r.episodes[1].mask.as_ref().unwrap().values();
        assert_ne!(a, b);
    }
}

#[test]
fn stored_log_probs_are_reproducible_in_every_mode() {
    for mode in [
        ExplorationMode::ActionNoiseOnly,
        ExplorationMode::ParameterNoise,
        GAUSS,
        ExplorationMode::Nadpex(DropoutKind::Bernoulli),
        ExplorationMode::Bootstrap(DropoutKind::Gaussian),
    ] {
        let mut t = Trainer::new(&small(mode), 4).unwrap();
        for _ in 0..3 {
            let r = t.collect_batch().unwrap();
            assert!(t.verify_log_probs(&r).unwrap() <= 1e-12, "{mode:?}");
            t.update(&r).unwrap();
        }
    }
}

#[test]
fn bootstrap_leaves_the_dropout_distribution_untouched() {
    let mut t = Trainer::new(&small(ExplorationMode::Bootstrap(DropoutKind::Gaussian)), 5).unwrap();
    let before = t.dropout().unwrap().params().to_vec();
    for _ in 0..3 {
        let r = t.collect_batch().unwrap();
        t.update(&r).unwrap();
    }
    assert_eq!(t.dropout().unwrap().params(), before.as_slice());
}

#[test]
fn zero_advantage_batch_leaves_the_policy_unchanged() {
    let cfg = TrainConfig {
        surrogate: nadpex::config::SurrogateKind::Kl,
        beta: 0.0,
        ..small(ExplorationMode::ActionNoiseOnly)
    };
    let mut t = Trainer::new(&cfg, 6).unwrap();
    let r = t.collect_batch().unwrap();
    let mut b = t.build_batch(&r).unwrap();
    b.advantages.iter_mut().for_each(|a| *a = 0.0);
    let before = t.policy().flat();
    t.update_on_batch(&b).unwrap();
    assert_eq!(t.policy().flat(), before);
}

/// One unit, advantages aligned with the sign of `∂ log π / ∂σ` per step:
/// the surrogate's σ-derivative is `mean |g_t| > 0`.
#[test]
fn rigged_batch_increases_sigma() {
    let cfg = TrainConfig {
        hidden: vec![1],
        epochs: 1,
        batch_steps: 40,
        ..small(GAUSS)
    };
    let mut t = Trainer::new(&cfg, 7).unwrap();
    let r = t.collect_batch().unwrap();
    let mut b = t.build_batch(&r).unwrap();
    let spec = LossSpec {
        value_coef: 0.0,
        ..LossSpec::new(Surrogate::Clip { epsilon: 0.2 }, DropoutPath::Reparam)
    };
    let mut total = 0.0;
    for row in 0..b.len() {
        let one = single_row(&b, row);
        let g = compute_gradients(&one, t.policy(), t.value(), t.dropout(), &spec).unwrap();
        let gs = g.dropout.unwrap()[0];
        b.advantages[row] = gs.signum();
        total += gs.abs();
    }
    assert!(total > 0.0);
    let sigma = t.dropout().unwrap().params()[0];
    t.update_on_batch(&b).unwrap();
    assert!(t.dropout().unwrap().params()[0] > sigma);
}

fn single_row(b: &Batch, row: usize) -> Batch {
    let ep = b.episode_of_step[row];
    Batch {
        obs: b.obs[row * b.obs_dim..(row + 1) * b.obs_dim].to_vec(),
        actions: b.actions[row * b.act_dim..(row + 1) * b.act_dim].to_vec(),
        old_log_probs: vec![b.old_log_probs[row]],
        old_means: b.old_means[row * b.act_dim..(row + 1) * b.act_dim].to_vec(),
        advantages: vec![1.0],
        returns: vec![b.returns[row]],
        old_values: vec![b.old_values[row]],
        episode_of_step: vec![0],
        masks: vec![b.masks[ep].clone()],
        episode_advantages: vec![0.0],
        ..b.clone()
    }
}

#[test]
fn zero_parameter_noise_matches_action_noise() {
    let pn = TrainConfig {
        param_noise_sigma: 0.0,
        param_noise_adapt: false,
        ..small(ExplorationMode::ParameterNoise)
    };
    let mut a = Trainer::new(&pn, 8).unwrap();
    let mut b = Trainer::new(&small(ExplorationMode::ActionNoiseOnly), 8).unwrap();
    let (ra, rb) = (a.collect_batch().unwrap(), b.collect_batch().unwrap());
    assert_eq!(ra.actions, rb.actions);
    assert_eq!(ra.rewards, rb.rewards);
    assert_eq!(ra.log_probs, rb.log_probs);
}

#[test]
fn parameter_noise_over_capacity_is_an_error() {
    let cfg = TrainConfig {
        param_noise_capacity: Some(16),
        ..small(ExplorationMode::ParameterNoise)
    };
    let mut t = Trainer::new(&cfg, 9).unwrap();
    assert!(matches!(t.collect_batch(), Err(Error::Capacity { .. })));
}

#[test]
fn perturbation_storage_dwarfs_mask_storage() {
    let base = TrainConfig::default();
    let masks = exploration_storage_bytes(&base, 1).unwrap();
    let pert = exploration_storage_bytes(
        &TrainConfig {
            mode: ExplorationMode::ParameterNoise,
            ..base.clone()
        },
        1,
    )
    .unwrap();
    assert!(masks > 0);
    assert!(pert as f64 / masks as f64 > 32.0, "{pert} / {masks}");
}

#[test]
fn a_single_batch_gives_one_metrics_row() {
    let cfg = TrainConfig {
        total_steps: 10,
        ..small(GAUSS)
    };
    let rows = train_seed(&cfg, 1, None).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].phi_grad_norm, 0.0);
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = TrainConfig {
        seeds: vec![3, 4],
        ..small(ExplorationMode::Nadpex(DropoutKind::Bernoulli))
    };
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        cfg.output_dir = dir.path().join(run);
        run_experiment(&cfg).unwrap();
        outputs.push(
            ["metrics_3.csv", "metrics_4.csv", "summary.json", "curves.svg"]
                .map(|f| fs::read(cfg.output_dir.join(f)).unwrap()),
        );
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn checkpoint_resume_reproduces_a_longer_run() {
    let dir = tempfile::tempdir().unwrap();
    for mode in [GAUSS, ExplorationMode::ParameterNoise, ExplorationMode::Nadpex(DropoutKind::Bernoulli)] {
        let short = TrainConfig {
            num_envs: 2,
            batch_steps: 16,
            total_steps: 48,
            ..small(mode)
        };
        let long = TrainConfig {
            total_steps: 96,
            ..short.clone()
        };
        let (_, ckpt) = train_seed_checkpointed(&short, 5, None).unwrap();
        let path = dir.path().join("ckpt.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);
        let resumed = resume_seed(loaded, 96).unwrap();
        let full = train_seed(&long, 5, None).unwrap();
        let rows = |m: &[nadpex::runner::IterationMetrics]| m.iter().map(|r| r.csv_row()).collect::<Vec<_>>();
        assert_eq!(rows(&resumed), rows(&full[2..]), "{mode:?}");
        assert!(resume_seed(ckpt, 16).is_err());
    }
}
