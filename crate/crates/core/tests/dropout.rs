use std::sync::Arc;

use nadpex::dropoutdist::{
    kl_bernoulli_dropout, kl_gaussian_dropout, rate_from_sigma, sigma_from_rate, DropoutDistribution, DropoutKind,
    DropoutMask,
};
use nadpex::policy::{per_state_kl, ActionDistribution, PolicyNet};
use nadpex::rng::{normal, stream, uniform};
use proptest::prelude::*;

#[test]
fn kl_is_non_negative_and_zero_on_the_diagonal() {
    let mut rng = stream(11, 0);
    for _ in 0..1000 {
        let n = 1 + (uniform(&mut rng, 0.0, 6.0) as usize);
        let p: Vec<f64> = (0..n).map(|_| uniform(&mut rng, 0.005, 0.5)).collect();
        let q: Vec<f64> = (0..n).map(|_| uniform(&mut rng, 0.005, 0.5)).collect();
        assert!(kl_bernoulli_dropout(&p, &q).unwrap() >= 0.0);
        assert!(kl_bernoulli_dropout(&p, &p).unwrap().abs() < 1e-15);
        let s = sigma_from_rate(&p).unwrap();
        let so = sigma_from_rate(&q).unwrap();
        assert!(kl_gaussian_dropout(&s, &so).unwrap() >= -1e-15);
        assert!(kl_gaussian_dropout(&s, &s).unwrap().abs() < 1e-15);
    }
}

#[test]
fn kl_rejects_out_of_domain_parameters() {
    assert!(kl_bernoulli_dropout(&[0.0], &[0.1]).is_err());
    assert!(kl_bernoulli_dropout(&[0.1], &[1.0]).is_err());
    assert!(kl_gaussian_dropout(&[-0.1], &[0.1]).is_err());
    assert!(kl_gaussian_dropout(&[0.1, 0.2], &[0.1]).is_err());
}

#[test]
fn bernoulli_log_prob_sums_to_one_over_all_masks() {
    for n in 1..=10usize {
        let p: Vec<f64> = (0..n).map(|j| 0.05 + 0.04 * j as f64).collect();
        let d = DropoutDistribution::bernoulli(vec![n], p).unwrap();
        let total: f64 = (0..1u32 << n)
            .map(|bits| {
                let z: Vec<f64> = (0..n).map(|j| f64::from((bits >> j) & 1)).collect();
                d.log_prob(&DropoutMask::fixed(0, z)).unwrap().exp()
            })
            .sum();
        assert!((total - 1.0).abs() < 1e-12, "n={n}: {total}");
    }
}

#[test]
fn non_binary_mask_is_an_integrity_error() {
    let d = DropoutDistribution::bernoulli(vec![2], vec![0.1, 0.2]).unwrap();
    assert!(d.log_prob(&DropoutMask::fixed(0, vec![1.0, 0.5])).is_err());
    let g = DropoutDistribution::gaussian(vec![2], vec![0.1, 0.2]).unwrap();
    assert!(g.log_prob(&g.mean_mask()).is_err());
}

#[test]
fn rate_and_sigma_are_inverse() {
    let p = [0.005, 0.1, 0.3, 0.5];
    let back = rate_from_sigma(&sigma_from_rate(&p).unwrap()).unwrap();
    for (a, b) in p.iter().zip(back) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn each_episode_gets_a_fresh_mask_and_gaussian_masks_regenerate() {
    let mut rng = stream(3, 3);
    for kind in [DropoutKind::Bernoulli, DropoutKind::Gaussian] {
        let d = DropoutDistribution::uniform(kind, vec![32, 32], 0.3).unwrap();
        let masks: Vec<DropoutMask> = (0..50).map(|id| d.sample(id, &mut rng)).collect();
        for w in masks.windows(2) {
            assert_ne!(w[0].values(), w[1].values(), "{kind:?}");
        }
        for (id, m) in masks.iter().enumerate() {
            assert_eq!(m.episode_id(), id as u64);
            assert_eq!(m.len(), 64);
        }
        if kind == DropoutKind::Gaussian {
            for m in &masks {
                let a: Vec<u64> = d.regenerate(m).unwrap().iter().map(|x| x.to_bits()).collect();
                let b: Vec<u64> = m.values().iter().map(|x| x.to_bits()).collect();
                assert_eq!(a, b);
            }
        } else {
            assert!(d.regenerate(&masks[0]).is_err());
        }
    }
}

#[test]
fn shared_scale_is_not_copied() {
    let d = DropoutDistribution::uniform(DropoutKind::Gaussian, vec![8], 0.1).unwrap();
    let scale: Arc<[f64]> = Arc::from(d.params());
    let mut rng = stream(1, 1);
    let a = d.sample_shared(0, &scale, &mut rng);
    let b = d.sample_shared(1, &scale, &mut rng);
    assert_eq!(Arc::strong_count(&scale), 3);
    assert!(std::ptr::eq(a.scale().unwrap(), b.scale().unwrap()));
}

/// With one hidden layer the action mean is affine in the mask, so averaging
/// over masks must reproduce the mean policy.
#[test]
fn mean_policy_matches_monte_carlo_average_over_masks() {
    let mut rng = stream(5, 5);
    let mut policy = PolicyNet::new(3, &[6], 2, &mut rng);
    let mut flat = policy.flat();
    for p in &mut flat {
        *p += 0.5 * normal(&mut rng);
    }
    policy.set_flat(&flat).unwrap();
    let obs = [0.3, -0.7, 1.1];
    for kind in [DropoutKind::Bernoulli, DropoutKind::Gaussian] {
        let d = DropoutDistribution::uniform(kind, vec![6], 0.2).unwrap();
        let target = policy.mean_policy_forward(&obs, &d).unwrap().mean;
        let n = 100_000;
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for id in 0..n {
            let m = policy.forward_mask(&obs, &d.sample(id, &mut rng)).unwrap().mean;
            for k in 0..2 {
                sum[k] += m[k];
                sq[k] += m[k] * m[k];
            }
        }
        for k in 0..2 {
            let mean = sum[k] / n as f64;
            let se = ((sq[k] / n as f64 - mean * mean) / n as f64).sqrt();
            assert!((mean - target[k]).abs() <= 4.0 * se + 1e-12, "{kind:?} dim {k}");
        }
    }
}

#[test]
fn output_is_linear_in_each_last_layer_unit() {
    let mut rng = stream(8, 8);
    let policy = PolicyNet::new(2, &[4, 3], 1, &mut rng);
    let obs = [0.4, -0.2];
    let base = vec![1.0; 7];
    let at = |v: f64| {
        let mut z = base.clone();
        z[5] = v;
        policy.forward_policy(&obs, Some(&z)).unwrap().mean[0]
    };
    let (a, b, c) = (at(0.0), at(1.0), at(2.5));
    assert!((c - (a + 2.5 * (b - a))).abs() < 1e-12);
}

fn kl_quadrature(p: &ActionDistribution, q: &ActionDistribution) -> f64 {
    let (mp, sp) = (p.mean[0], p.log_std[0].exp());
    let (mq, sq) = (q.mean[0], q.log_std[0].exp());
    let logn = |x: f64, m: f64, s: f64| -0.5 * ((x - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let (lo, hi, n) = (mp - 12.0 * sp, mp + 12.0 * sp, 20_000);
    let h = (hi - lo) / n as f64;
    (0..=n)
        .map(|i| {
            let x = lo + i as f64 * h;
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            w * logn(x, mp, sp).exp() * (logn(x, mp, sp) - logn(x, mq, sq))
        })
        .sum::<f64>()
        * h
        / 3.0
}

proptest! {
    #[test]
    fn per_state_kl_matches_quadrature(mp in -2.0f64..2.0, mq in -2.0f64..2.0, lp in -1.0f64..0.5, lq in -1.0f64..0.5) {
        let p = ActionDistribution { mean: vec![mp], log_std: vec![lp] };
        let q = ActionDistribution { mean: vec![mq], log_std: vec![lq] };
        let exact = per_state_kl(&p, &q);
        let quad = kl_quadrature(&p, &q);
        prop_assert!((exact - quad).abs() <= 1e-8 * (1.0 + exact.abs()), "{exact} vs {quad}");
    }
}
