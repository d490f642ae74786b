//! Episode-level dropout distributions `q_φ(z)` over hidden-unit masks.
//!
//! Two families are supported: Bernoulli masks parametrized by the per-unit
//! drop probability `p = P(z = 0)`, and Gaussian multiplicative masks
//! `z = 1 + σ ⊙ ε` with `ε ~ N(0, I)`. Parameters are optimized in an
//! unconstrained space (logit of `p`, log of `σ`) and clamped back into the
//! working rate range after every step.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{normal, StreamRng};
use crate::tensorgraph::{sigmoid, Graph, Tensor, Var};
use rand::Rng;

/// Lower edge of the working dropout-rate range.
pub const RATE_MIN: f64 = 0.005;
/// Upper edge of the working dropout-rate range.
pub const RATE_MAX: f64 = 0.5;
/// Smallest σ a Gaussian distribution will hold.
pub const SIGMA_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DropoutKind {
    Bernoulli,
    Gaussian,
}

impl DropoutKind {
    pub fn name(self) -> &'static str {
        match self {
            DropoutKind::Bernoulli => "bernoulli",
            DropoutKind::Gaussian => "gaussian",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutDistribution {
    kind: DropoutKind,
    /// Bernoulli: drop probabilities. Gaussian: multiplicative noise scales.
    params: Vec<f64>,
    /// Units per dropped hidden layer.
    layout: Vec<usize>,
}

impl DropoutDistribution {
    pub fn bernoulli(layout: Vec<usize>, rates: Vec<f64>) -> Result<Self> {
        check_layout(&layout, rates.len())?;
        if let Some((index, &value)) = rates.iter().enumerate().find(|(_, p)| !(**p >= 0.0 && **p < 1.0)) {
            return Err(Error::Domain {
                op: "bernoulli dropout rate",
                index,
                value,
            });
        }
        Ok(DropoutDistribution {
            kind: DropoutKind::Bernoulli,
            params: rates,
            layout,
        })
    }

    pub fn gaussian(layout: Vec<usize>, sigmas: Vec<f64>) -> Result<Self> {
        check_layout(&layout, sigmas.len())?;
        if let Some((index, &value)) = sigmas.iter().enumerate().find(|(_, s)| !(**s >= 0.0 && s.is_finite())) {
            return Err(Error::Domain {
                op: "gaussian dropout scale",
                index,
                value,
            });
        }
        Ok(DropoutDistribution {
            kind: DropoutKind::Gaussian,
            params: sigmas.into_iter().map(|s| s.max(SIGMA_FLOOR)).collect(),
            layout,
        })
    }

    /// Every unit starts at the same dropout rate; Gaussian scales are
    /// converted with `σ = p / (1 - p)`.
    pub fn uniform(kind: DropoutKind, layout: Vec<usize>, rate: f64) -> Result<Self> {
        let n = layout.iter().sum();
        match kind {
            DropoutKind::Bernoulli => DropoutDistribution::bernoulli(layout, vec![rate; n]),
            DropoutKind::Gaussian => {
                let sigma = sigma_from_rate(&[rate])?[0];
                DropoutDistribution::gaussian(layout, vec![sigma; n])
            }
        }
    }

    pub fn kind(&self) -> DropoutKind {
        self.kind
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn layout(&self) -> &[usize] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Per-unit dropout rate (Gaussian scales mapped through `σ / (1 + σ)`).
    pub fn rates(&self) -> Vec<f64> {
        match self.kind {
            DropoutKind::Bernoulli => self.params.clone(),
            DropoutKind::Gaussian => self.params.iter().map(|s| s / (1.0 + s)).collect(),
        }
    }

    pub fn mean_rate(&self) -> f64 {
        let r = self.rates();
        r.iter().sum::<f64>() / r.len() as f64
    }

    /// Optimizer coordinates: `logit(p)` or `ln σ`.
    pub fn unconstrained(&self) -> Vec<f64> {
        match self.kind {
            DropoutKind::Bernoulli => self.params.iter().map(|p| (p / (1.0 - p)).ln()).collect(),
            DropoutKind::Gaussian => self.params.iter().map(|s| s.ln()).collect(),
        }
    }

    /// Map optimizer coordinates back and clamp into the working range.
    pub fn set_unconstrained(&mut self, u: &[f64]) -> Result<()> {
        if u.len() != self.params.len() {
            return Err(Error::Length(format!(
                "dropout parameters: expected {}, got {}",
                self.params.len(),
                u.len()
            )));
        }
        for (p, &x) in self.params.iter_mut().zip(u) {
            *p = match self.kind {
                DropoutKind::Bernoulli => sigmoid(x),
                DropoutKind::Gaussian => x.exp(),
            };
        }
        self.clamp_to_working_range();
        Ok(())
    }

    /// Clamp rates into `[RATE_MIN, RATE_MAX]`; for Gaussian scales the
    /// clamp is applied to the implied rate `σ / (1 + σ)`.
    pub fn clamp_to_working_range(&mut self) {
        let (lo, hi) = match self.kind {
            DropoutKind::Bernoulli => (RATE_MIN, RATE_MAX),
            DropoutKind::Gaussian => (RATE_MIN / (1.0 - RATE_MIN), RATE_MAX / (1.0 - RATE_MAX)),
        };
        for p in &mut self.params {
            *p = p.clamp(lo, hi);
        }
    }

    pub fn sample(&self, episode_id: u64, rng: &mut StreamRng) -> DropoutMask {
        let repr = match self.kind {
            DropoutKind::Bernoulli => MaskRepr::Fixed(
                self.params
                    .iter()
                    .map(|&p| if rng.random::<f64>() < p { 0.0 } else { 1.0 })
                    .collect(),
            ),
            DropoutKind::Gaussian => MaskRepr::Gaussian {
                noise: self.params.iter().map(|_| normal(rng)).collect(),
                scale: Arc::from(self.params.as_slice()),
            },
        };
        DropoutMask { episode_id, repr }
    }

    /// Same as [`sample`](Self::sample) but every mask in a batch shares one
    /// snapshot of the scales.
    pub fn sample_shared(&self, episode_id: u64, scale: &Arc<[f64]>, rng: &mut StreamRng) -> DropoutMask {
        match self.kind {
            DropoutKind::Gaussian => DropoutMask {
                episode_id,
                repr: MaskRepr::Gaussian {
                    noise: self.params.iter().map(|_| normal(rng)).collect(),
                    scale: Arc::clone(scale),
                },
            },
            DropoutKind::Bernoulli => self.sample(episode_id, rng),
        }
    }

    /// `Σ_j [z_j ln(1 - p_j) + (1 - z_j) ln p_j]`.
    pub fn log_prob(&self, mask: &DropoutMask) -> Result<f64> {
        if self.kind != DropoutKind::Bernoulli {
            return Err(Error::Unsupported {
                op: "log_prob",
                kind: self.kind.name(),
            });
        }
        let z = mask.values();
        if z.len() != self.params.len() {
            return Err(Error::Length(format!(
                "mask has {} entries, distribution has {}",
                z.len(),
                self.params.len()
            )));
        }
        let mut total = 0.0;
        for (&zj, &p) in z.iter().zip(&self.params) {
            if zj == 1.0 {
                total += (1.0 - p).ln();
            } else if zj == 0.0 {
                total += p.ln();
            } else {
                return Err(Error::Integrity(format!("bernoulli mask entry {zj} is not binary")));
            }
        }
        Ok(total)
    }

    /// Expected mask: all ones for Gaussian, `1 - p` for Bernoulli.
    pub fn mean_mask(&self) -> DropoutMask {
        let values = match self.kind {
            DropoutKind::Gaussian => vec![1.0; self.params.len()],
            DropoutKind::Bernoulli => self.params.iter().map(|p| 1.0 - p).collect(),
        };
        DropoutMask::fixed(u64::MAX, values)
    }

    /// Rebuild a Gaussian mask's values from its stored noise.
    pub fn regenerate(&self, mask: &DropoutMask) -> Result<Vec<f64>> {
        match (&mask.repr, self.kind) {
            (MaskRepr::Gaussian { noise, scale }, DropoutKind::Gaussian) => {
                Ok(scale.iter().zip(noise).map(|(s, e)| 1.0 + s * e).collect())
            }
            _ => Err(Error::Integrity("mask carries no stored noise".into())),
        }
    }
}

fn check_layout(layout: &[usize], n: usize) -> Result<()> {
    let total: usize = layout.iter().sum();
    if total != n {
        return Err(Error::Length(format!(
            "layout {layout:?} covers {total} units, got {n} parameters"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum MaskRepr {
    Fixed(Vec<f64>),
    Gaussian { noise: Vec<f64>, scale: Arc<[f64]> },
}

/// One sampled mask, pinned for a whole episode. Immutable once built.
///
/// Gaussian masks store only their noise `ε`; the scale snapshot they were
/// drawn with is shared by every mask of the same batch, so per-episode
/// storage is one value per unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutMask {
    episode_id: u64,
    repr: MaskRepr,
}

impl DropoutMask {
    pub fn fixed(episode_id: u64, values: Vec<f64>) -> Self {
        DropoutMask {
            episode_id,
            repr: MaskRepr::Fixed(values),
        }
    }

    pub fn ones(episode_id: u64, n: usize) -> Self {
        DropoutMask::fixed(episode_id, vec![1.0; n])
    }

    /// Gaussian mask from explicit noise and scales.
    pub fn gaussian(episode_id: u64, noise: Vec<f64>, scale: Arc<[f64]>) -> Result<Self> {
        if noise.len() != scale.len() {
            return Err(Error::Length(format!(
                "noise has {} entries, scale has {}",
                noise.len(),
                scale.len()
            )));
        }
        Ok(DropoutMask {
            episode_id,
            repr: MaskRepr::Gaussian { noise, scale },
        })
    }

    pub fn episode_id(&self) -> u64 {
        self.episode_id
    }

    pub fn len(&self) -> usize {
        match &self.repr {
            MaskRepr::Fixed(v) => v.len(),
            MaskRepr::Gaussian { noise, .. } => noise.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The mask `z`.
    pub fn values(&self) -> Vec<f64> {
        match &self.repr {
            MaskRepr::Fixed(v) => v.clone(),
            MaskRepr::Gaussian { noise, scale } => scale.iter().zip(noise).map(|(s, e)| 1.0 + s * e).collect(),
        }
    }

    /// Dummy noise `ε` of a Gaussian mask.
    pub fn noise(&self) -> Option<&[f64]> {
        match &self.repr {
            MaskRepr::Gaussian { noise, .. } => Some(noise),
            MaskRepr::Fixed(_) => None,
        }
    }

    /// Scale snapshot a Gaussian mask was drawn with.
    pub fn scale(&self) -> Option<&[f64]> {
        match &self.repr {
            MaskRepr::Gaussian { scale, .. } => Some(scale),
            MaskRepr::Fixed(_) => None,
        }
    }

    /// Bytes held per episode (shared scale snapshots excluded).
    pub fn storage_bytes(&self) -> usize {
        self.len() * std::mem::size_of::<f64>()
    }

    /// Bit pattern of the mask values, for byte-identity checks.
    pub fn to_bits(&self) -> Vec<u64> {
        self.values().iter().map(|v| v.to_bits()).collect()
    }
}

/// Bernoulli log-probability on the graph, differentiable in the rates `p`
/// (a `1 × n` node with entries in `(0, 1)`).
pub fn log_prob_graph(g: &mut Graph, rates: Var, z: &[f64]) -> Result<Var> {
    let n = z.len();
    let keep = g.constant(Tensor::row(z.to_vec()));
    let drop = g.constant(Tensor::row(z.iter().map(|v| 1.0 - v).collect()));
    let neg = g.neg(rates);
    let one_minus = g.add_scalar(neg, 1.0);
    let log_keep = g.log(one_minus)?;
    let log_drop = g.log(rates)?;
    let a = g.mul(keep, log_keep)?;
    let b = g.mul(drop, log_drop)?;
    let terms = g.add(a, b)?;
    debug_assert_eq!(g.value(terms).len(), n);
    Ok(g.sum(terms))
}

/// `Σ_j [ln(σ_old/σ) + σ²/(2σ_old²) - 1/2]`: KL between `N(1, σ²)` and `N(1, σ_old²)`.
pub fn kl_gaussian_dropout(sigma: &[f64], sigma_old: &[f64]) -> Result<f64> {
    if sigma.len() != sigma_old.len() {
        return Err(Error::Length(format!("{} vs {} scales", sigma.len(), sigma_old.len())));
    }
    for (index, &value) in sigma.iter().chain(sigma_old).enumerate() {
        if !(value > 0.0) {
            return Err(Error::Domain {
                op: "kl_gaussian_dropout",
                index: index % sigma.len().max(1),
                value,
            });
        }
    }
    Ok(sigma
        .iter()
        .zip(sigma_old)
        .map(|(&s, &so)| (so / s).ln() + s * s / (2.0 * so * so) - 0.5)
        .sum())
}

/// `Σ_j [p ln(p/p_old) + (1-p) ln((1-p)/(1-p_old))]`.
pub fn kl_bernoulli_dropout(p: &[f64], p_old: &[f64]) -> Result<f64> {
    if p.len() != p_old.len() {
        return Err(Error::Length(format!("{} vs {} rates", p.len(), p_old.len())));
    }
    for (index, &value) in p.iter().chain(p_old).enumerate() {
        if !(value > 0.0 && value < 1.0) {
            return Err(Error::Domain {
                op: "kl_bernoulli_dropout",
                index: index % p.len().max(1),
                value,
            });
        }
    }
    Ok(p
        .iter()
        .zip(p_old)
        .map(|(&a, &b)| a * (a / b).ln() + (1.0 - a) * ((1.0 - a) / (1.0 - b)).ln())
        .sum())
}

/// `p = σ / (1 + σ)`.
pub fn rate_from_sigma(sigma: &[f64]) -> Result<Vec<f64>> {
    sigma
        .iter()
        .enumerate()
        .map(|(index, &s)| {
            if s > 0.0 && s.is_finite() {
                Ok(s / (1.0 + s))
            } else {
                Err(Error::Domain {
                    op: "rate_from_sigma",
                    index,
                    value: s,
                })
            }
        })
        .collect()
}

/// `σ = p / (1 - p)`.
pub fn sigma_from_rate(rate: &[f64]) -> Result<Vec<f64>> {
    rate.iter()
        .enumerate()
        .map(|(index, &p)| {
            if p > 0.0 && p < 1.0 {
                Ok(p / (1.0 - p))
            } else {
                Err(Error::Domain {
                    op: "sigma_from_rate",
                    index,
                    value: p,
                })
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn zero_rate_gives_all_ones() {
        let d = DropoutDistribution::bernoulli(vec![4], vec![0.0; 4]).unwrap();
        let mut rng = stream(0, 0);
        for i in 0..20 {
            assert_eq!(d.sample(i, &mut rng).values(), vec![1.0; 4]);
        }
    }

    #[test]
    fn vanishing_sigma_is_clamped_and_near_one() {
        let d = DropoutDistribution::gaussian(vec![3], vec![0.0; 3]).unwrap();
        assert_eq!(d.params(), &[SIGMA_FLOOR; 3]);
        let mut rng = stream(0, 0);
        let m = d.sample(0, &mut rng);
        for v in m.values() {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn drop_frequency_at_half() {
        let d = DropoutDistribution::bernoulli(vec![1], vec![0.5]).unwrap();
        let mut rng = stream(11, 0);
        let n = 100_000;
        let drops = (0..n).filter(|&i| d.sample(i, &mut rng).values()[0] == 0.0).count();
        let freq = drops as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.005, "frequency {freq}");
    }

    #[test]
    fn log_prob_examples() {
        let d = DropoutDistribution::bernoulli(vec![5], vec![0.5; 5]).unwrap();
        let z = DropoutMask::fixed(0, vec![1.0, 0.0, 1.0, 1.0, 0.0]);
        assert!((d.log_prob(&z).unwrap() + 5.0 * 2f64.ln()).abs() < 1e-12);

        let d = DropoutDistribution::bernoulli(vec![3], vec![0.1; 3]).unwrap();
        let z = DropoutMask::fixed(0, vec![1.0, 1.0, 0.0]);
        let lp = d.log_prob(&z).unwrap();
        assert!((lp - (2.0 * 0.9f64.ln() + 0.1f64.ln())).abs() < 1e-12);
        assert!((lp + 2.5133).abs() < 1e-4);

        let mut total = 0.0;
        for bits in 0..8u32 {
            let z: Vec<f64> = (0..3).map(|j| f64::from((bits >> j) & 1)).collect();
            total += d.log_prob(&DropoutMask::fixed(0, z)).unwrap().exp();
        }
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_prob_gradient_on_graph() {
        let mut g = Graph::new();
        let p = g.param(Tensor::row(vec![0.5]));
        let lp = log_prob_graph(&mut g, p, &[1.0]).unwrap();
        g.backward(lp).unwrap();
        assert!((g.grad(p)[0] + 2.0).abs() < 1e-12);

        let h = 1e-6;
        let f = |x: f64| (1.0 - x).ln();
        let fd = (f(0.5 + h) - f(0.5 - h)) / (2.0 * h);
        assert!((fd + 2.0).abs() < 1e-8);
    }

    #[test]
    fn log_prob_rejects_gaussian() {
        let d = DropoutDistribution::gaussian(vec![2], vec![0.1; 2]).unwrap();
        let m = DropoutMask::ones(0, 2);
        assert!(matches!(d.log_prob(&m), Err(Error::Unsupported { .. })));
    }

    #[test]
    fn mean_masks() {
        let g = DropoutDistribution::gaussian(vec![2, 2], vec![0.3; 4]).unwrap();
        assert_eq!(g.mean_mask().values(), vec![1.0; 4]);
        let b = DropoutDistribution::bernoulli(vec![2], vec![0.1; 2]).unwrap();
        assert_eq!(b.mean_mask().values(), vec![0.9; 2]);
        let b = DropoutDistribution::bernoulli(vec![2], vec![0.5; 2]).unwrap();
        assert_eq!(b.mean_mask().values(), vec![0.5; 2]);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_gaussian_dropout(&[0.3, 0.2], &[0.3, 0.2]).unwrap(), 0.0);
        let kl = kl_gaussian_dropout(&[0.2], &[0.1]).unwrap();
        assert!((kl - (0.5f64.ln() + 2.0 - 0.5)).abs() < 1e-12);
        assert!((kl - 0.8069).abs() < 1e-4);
        // x = Δσ/σ_old = 1 is the edge of the region where the bound is argued
        let x = 1.0f64;
        assert!((kl - (-(1.0 + x).ln() + x + x * x / 2.0)).abs() < 1e-12);
        assert!(kl < 1.0);

        assert_eq!(kl_bernoulli_dropout(&[0.2], &[0.2]).unwrap(), 0.0);
        let kl = kl_bernoulli_dropout(&[0.4], &[0.5]).unwrap();
        assert!((kl - (0.4 * 0.8f64.ln() + 0.6 * 1.2f64.ln())).abs() < 1e-12);
        assert!((kl - 0.02014).abs() < 1e-5);
    }

    #[test]
    fn kl_domain_errors() {
        assert!(matches!(kl_gaussian_dropout(&[0.0], &[0.1]), Err(Error::Domain { .. })));
        assert!(matches!(kl_bernoulli_dropout(&[1.0], &[0.1]), Err(Error::Domain { .. })));
        assert!(matches!(kl_bernoulli_dropout(&[0.2], &[0.0]), Err(Error::Domain { .. })));
    }

    #[test]
    fn rate_conversions() {
        assert_eq!(rate_from_sigma(&[1.0]).unwrap(), vec![0.5]);
        assert!((sigma_from_rate(&[0.1]).unwrap()[0] - 1.0 / 9.0).abs() < 1e-15);
        assert!(rate_from_sigma(&[-1.0]).is_err());
        assert!(sigma_from_rate(&[1.0]).is_err());
        assert!(sigma_from_rate(&[0.0]).is_err());
    }

    #[test]
    fn gaussian_mask_regenerates_from_noise() {
        let d = DropoutDistribution::gaussian(vec![2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        let mut rng = stream(3, 0);
        let m = d.sample(9, &mut rng);
        let regen = d.regenerate(&m).unwrap();
        assert_eq!(regen, m.values());
        let eps = m.noise().unwrap();
        for ((z, e), s) in m.values().iter().zip(eps).zip(d.params()) {
            assert_eq!(*z, 1.0 + s * e);
        }
    }

    #[test]
    fn clamping_after_unconstrained_update() {
        let mut d = DropoutDistribution::uniform(DropoutKind::Bernoulli, vec![2], 0.1).unwrap();
        d.set_unconstrained(&[-20.0, 20.0]).unwrap();
        assert_eq!(d.params(), &[RATE_MIN, RATE_MAX]);

        let mut d = DropoutDistribution::uniform(DropoutKind::Gaussian, vec![2], 0.1).unwrap();
        d.set_unconstrained(&[-20.0, 20.0]).unwrap();
        let r = d.rates();
        assert!((r[0] - RATE_MIN).abs() < 1e-12 && (r[1] - RATE_MAX).abs() < 1e-12);
    }

    #[test]
    fn unconstrained_round_trip() {
        let mut d = DropoutDistribution::bernoulli(vec![3], vec![0.01, 0.1, 0.3]).unwrap();
        let u = d.unconstrained();
        d.set_unconstrained(&u).unwrap();
        for (a, b) in d.params().iter().zip([0.01, 0.1, 0.3]) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
