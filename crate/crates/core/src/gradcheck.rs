//! Independent oracles for the estimators: central finite differences,
//! exhaustive sums over small Bernoulli masks, Monte-Carlo audits with
//! standard-error bands, and closed-form identities behind the stop-gradient
//! choices.
//!
//! Every check uses its own fixed-seed stream, so reruns are bit-identical.
//! [`registry`] maps each check to the estimators it exercises and
//! [`uncovered_estimators`] reports any estimator nobody checks.

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dropoutdist::{
    kl_bernoulli_dropout, kl_gaussian_dropout, rate_from_sigma, DropoutDistribution, DropoutKind, DropoutMask, RATE_MAX,
    RATE_MIN,
};
use crate::error::{Error, Result};
use crate::estimators::{
    adam_step, compute_gradients, gae, grad_bootstrap, grad_discrete_nadpex, grad_gaussian_nadpex,
    kl_first_order_grad_estimate, nadpex_kl_loss, ppo_clip_loss, ppo_kl_loss, Batch, DropoutPath, LossSpec, Surrogate,
    ESTIMATORS,
};
use crate::policy::{PolicyNet, ValueNet};
use crate::rng::{normal, stream, uniform, StreamRng};
use crate::tensorgraph::{Graph, Tensor};

/// Band width, in standard errors, for Monte-Carlo comparisons.
pub const SIGMA_BAND: f64 = 3.0;

/// Largest Bernoulli layer [`exhaustive_bernoulli_expectation`] will enumerate.
pub const MAX_EXHAUSTIVE_UNITS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Tolerance {
    /// `‖a − o‖ / max(‖a‖, ‖o‖) < tol`.
    Relative(f64),
    /// `max |a − o| ≤ tol`.
    Absolute(f64),
    /// `|a − o| ≤ k · se` coordinate-wise.
    StdErr(f64),
}

impl std::fmt::Display for Tolerance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Tolerance::Relative(t) => write!(f, "rel<{t:e}"),
            Tolerance::Absolute(t) => write!(f, "abs<={t:e}"),
            Tolerance::StdErr(k) => write!(f, "{k}se"),
        }
    }
}

/// Outcome of one oracle comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub name: String,
    pub analytic: Vec<f64>,
    pub oracle: Vec<f64>,
    pub abs_err: f64,
    pub rel_err: f64,
    /// Per-coordinate standard errors for Monte-Carlo estimates.
    pub std_err: Option<Vec<f64>>,
    pub tolerance: Tolerance,
    pub pass: bool,
    pub note: String,
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

impl OracleReport {
    /// Deterministic comparison under a relative or absolute tolerance.
    pub fn compare(name: impl Into<String>, analytic: Vec<f64>, oracle: Vec<f64>, tolerance: Tolerance) -> Self {
        let abs_err = max_abs_diff(&analytic, &oracle);
        let rel_err = relative_error(&analytic, &oracle);
        let finite = analytic.iter().chain(&oracle).all(|v| v.is_finite());
        let pass = finite
            && analytic.len() == oracle.len()
            && match tolerance {
                Tolerance::Relative(t) => rel_err < t,
                Tolerance::Absolute(t) => abs_err <= t,
                Tolerance::StdErr(_) => false,
            };
        OracleReport {
            name: name.into(),
            analytic,
            oracle,
            abs_err,
            rel_err,
            std_err: None,
            tolerance,
            pass,
            note: String::new(),
        }
    }

    /// Monte-Carlo estimate against an exact value, `k` standard errors wide.
    pub fn monte_carlo(name: impl Into<String>, estimate: Vec<f64>, std_err: Vec<f64>, oracle: Vec<f64>, k: f64) -> Self {
        let abs_err = max_abs_diff(&estimate, &oracle);
        let rel_err = relative_error(&estimate, &oracle);
        let pass = estimate.len() == oracle.len()
            && std_err.len() == oracle.len()
            && estimate
                .iter()
                .zip(&oracle)
                .zip(&std_err)
                .all(|((e, o), s)| s.is_finite() && (e - o).abs() <= k * s);
        OracleReport {
            name: name.into(),
            analytic: estimate,
            oracle,
            abs_err,
            rel_err,
            std_err: Some(std_err),
            tolerance: Tolerance::StdErr(k),
            pass,
            note: String::new(),
        }
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }

    /// Fold an extra condition into `pass`, recording it when it fails.
    pub fn require(mut self, ok: bool, what: &str) -> Self {
        if !ok {
            self.pass = false;
            if !self.note.is_empty() {
                self.note.push_str("; ");
            }
            self.note.push_str("failed: ");
            self.note.push_str(what);
        }
        self
    }

    /// Largest `|a − o| / se` over coordinates.
    pub fn z_score(&self) -> Option<f64> {
        self.std_err.as_ref().map(|se| {
            self.analytic
                .iter()
                .zip(&self.oracle)
                .zip(se)
                .map(|((a, o), s)| if *s > 0.0 { (a - o).abs() / s } else { f64::INFINITY })
                .fold(0.0, f64::max)
        })
    }
}

pub const CSV_HEADER: &str = "name,pass,abs_err,rel_err,max_z,tolerance,analytic,oracle,note";

fn join(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(";")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl OracleReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:?},{:?},{},{},{},{},{}",
            csv_field(&self.name),
            self.pass,
            self.abs_err,
            self.rel_err,
            self.z_score().map_or(String::new(), |z| format!("{z:?}")),
            self.tolerance,
            join(&self.analytic),
            join(&self.oracle),
            csv_field(&self.note)
        )
    }
}

pub fn reports_csv(reports: &[OracleReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Fixed-width text table, one line per report.
pub fn format_table(reports: &[OracleReport]) -> String {
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:<4}  {:>10}  {:>10}  {:>7}  tolerance", "check", "ok", "abs_err", "rel_err", "max_z");
    for r in reports {
        let z = r.z_score().map_or("-".to_string(), |z| format!("{z:.2}"));
        let _ = write!(
            out,
            "{:<width$}  {:<4}  {:>10.3e}  {:>10.3e}  {:>7}  {}",
            r.name,
            if r.pass { "PASS" } else { "FAIL" },
            r.abs_err,
            r.rel_err,
            z,
            r.tolerance
        );
        if !r.note.is_empty() {
            let _ = write!(out, "  {}", r.note);
        }
        out.push('\n');
    }
    out
}

/// Central differences, one coordinate at a time.
pub fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = work[i];
            work[i] = orig + h;
            let up = f(&work);
            work[i] = orig - h;
            let down = f(&work);
            work[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// [`finite_diff`] for fallible objectives; stops at the first error.
pub fn try_finite_diff(mut f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut failure = None;
    let grad = finite_diff(
        |p| match f(p) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        x,
        h,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(grad),
    }
}

/// Exact `E[f(z)]` and `∂E/∂p_j` for independent Bernoulli masks with drop
/// probabilities `p` (`z_j = 0` with probability `p_j`).
pub fn exhaustive_bernoulli_expectation(f: impl Fn(&[f64]) -> f64, p: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = p.len();
    if n > MAX_EXHAUSTIVE_UNITS {
        return Err(Error::Capacity {
            needed: n,
            limit: MAX_EXHAUSTIVE_UNITS,
        });
    }
    for (index, &value) in p.iter().enumerate() {
        if !(value > 0.0 && value < 1.0) {
            return Err(Error::Domain {
                op: "exhaustive_bernoulli_expectation",
                index,
                value,
            });
        }
    }
    let mut expectation = 0.0;
    let mut grad = vec![0.0; n];
    let mut z = vec![0.0; n];
    for bits in 0u64..(1u64 << n) {
        let mut q = 1.0;
        for j in 0..n {
            z[j] = ((bits >> j) & 1) as f64;
            q *= if z[j] == 1.0 { 1.0 - p[j] } else { p[j] };
        }
        let fz = f(&z);
        expectation += q * fz;
        for j in 0..n {
            // ∂ log q / ∂p_j
            let d = if z[j] == 1.0 { -1.0 / (1.0 - p[j]) } else { 1.0 / p[j] };
            grad[j] += q * d * fz;
        }
    }
    Ok((expectation, grad))
}

fn mean_and_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Column-wise mean and standard error of equally long vectors.
fn vector_mean_and_se(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = rows.first().map_or(0, Vec::len);
    (0..d)
        .map(|j| {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            mean_and_se(&col)
        })
        .unzip()
}

// ---------------------------------------------------------------------------
// Random problems for the finite-difference suite

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProblemNoise {
    None,
    Dropout(DropoutKind),
    Parameter,
}

/// A small policy, value net, optional dropout distribution and a batch
/// sampled from a nearby "old" policy.
#[derive(Clone, Debug)]
pub struct Problem {
    pub policy: PolicyNet,
    pub value: ValueNet,
    pub dropout: Option<DropoutDistribution>,
    pub batch: Batch,
}

fn jitter(rng: &mut StreamRng, xs: &mut [f64], scale: f64) {
    for x in xs {
        *x += scale * normal(rng);
    }
}

/// At most 8 steps and 8 hidden units, with generic (non-initial) weights.
pub fn random_problem(seed: u64, noise: ProblemNoise) -> Result<Problem> {
    let mut rng = stream(seed, 0x6772_6164);
    let obs_dim = 2;
    let act_dim = 1 + (rng_index(&mut rng, 2));
    let w1 = 1 + rng_index(&mut rng, 4);
    let w2 = rng_index(&mut rng, 5);
    let hidden: Vec<usize> = if w2 == 0 { vec![w1] } else { vec![w1, w2] };
    let steps = 2 + rng_index(&mut rng, 7);

    let mut policy = PolicyNet::new(obs_dim, &hidden, act_dim, &mut rng);
    let mut flat = policy.flat();
    let nn = policy.mlp().num_params();
    jitter(&mut rng, &mut flat[..nn], 0.5);
    for ls in &mut flat[nn..] {
        *ls = uniform(&mut rng, -0.7, 0.0);
    }
    policy.set_flat(&flat)?;
    let mut old = policy.clone();
    let mut old_flat = old.flat();
    jitter(&mut rng, &mut old_flat, 0.15);
    old.set_flat(&old_flat)?;
    let mut value = ValueNet::new(obs_dim, &hidden, &mut rng);
    let mut vflat = value.flat();
    jitter(&mut rng, &mut vflat, 0.5);
    value.set_flat(&vflat)?;

    let units: usize = hidden.iter().sum();
    let dropout = match noise {
        ProblemNoise::Dropout(DropoutKind::Bernoulli) => {
            let rates = (0..units).map(|_| uniform(&mut rng, 0.05, 0.45)).collect();
            Some(DropoutDistribution::bernoulli(hidden.clone(), rates)?)
        }
        ProblemNoise::Dropout(DropoutKind::Gaussian) => {
            let sigmas = (0..units).map(|_| uniform(&mut rng, 0.05, 0.5)).collect();
            Some(DropoutDistribution::gaussian(hidden.clone(), sigmas)?)
        }
        _ => None,
    };

    let mut episode_of_step = Vec::with_capacity(steps);
    let mut ep = 0;
    for t in 0..steps {
        if t > 0 && uniform(&mut rng, 0.0, 1.0) < 0.3 {
            ep += 1;
        }
        episode_of_step.push(ep);
    }
    let episodes = ep + 1;
    let masks: Vec<DropoutMask> = match &dropout {
        Some(d) => (0..episodes).map(|e| d.sample(e as u64, &mut rng)).collect(),
        None => Vec::new(),
    };
    let perturbations: Vec<Vec<f64>> = if noise == ProblemNoise::Parameter {
        (0..episodes).map(|_| (0..nn).map(|_| 0.1 * normal(&mut rng)).collect()).collect()
    } else {
        Vec::new()
    };
    let actors: Vec<PolicyNet> = if perturbations.is_empty() {
        vec![old.clone()]
    } else {
        perturbations.iter().map(|p| old.perturbed(p)).collect::<Result<_>>()?
    };

    let mut batch = Batch {
        obs_dim,
        act_dim,
        old_log_std: old.log_std().to_vec(),
        episode_of_step,
        masks,
        perturbations,
        ..Batch::default()
    };
    for t in 0..steps {
        let e = batch.episode_of_step[t];
        let obs: Vec<f64> = (0..obs_dim).map(|_| normal(&mut rng)).collect();
        let actor = &actors[if actors.len() == 1 { 0 } else { e }];
        let mask = batch.masks.get(e).map(DropoutMask::values);
        let dist = actor.forward_policy(&obs, mask.as_deref())?;
        let action = dist.sample(&mut rng);
        batch.old_log_probs.push(dist.log_prob(&action));
        batch.old_means.extend_from_slice(&dist.mean);
        batch.actions.extend(action);
        let v = value.value_row(&obs);
        batch.old_values.push(v + 0.3 * normal(&mut rng));
        batch.returns.push(v + normal(&mut rng));
        batch.advantages.push(normal(&mut rng));
        batch.obs.extend(obs);
    }
    batch.episode_advantages = (0..episodes).map(|_| normal(&mut rng)).collect();
    Ok(Problem {
        policy,
        value,
        dropout,
        batch,
    })
}

fn rng_index(rng: &mut StreamRng, n: usize) -> usize {
    (uniform(rng, 0.0, n as f64) as usize).min(n - 1)
}

/// Copy of `batch` whose Gaussian masks keep their noise but use `scale`.
fn rescaled_masks(batch: &Batch, scale: &[f64]) -> Result<Batch> {
    let shared: Arc<[f64]> = Arc::from(scale.to_vec());
    let mut out = batch.clone();
    out.masks = batch
        .masks
        .iter()
        .map(|m| {
            let eps = m
                .noise()
                .ok_or_else(|| Error::Invalid("rescaling needs Gaussian masks".into()))?
                .to_vec();
            DropoutMask::gaussian(m.episode_id(), eps, shared.clone())
        })
        .collect::<Result<_>>()?;
    Ok(out)
}

/// Relative errors of autodiff against central differences of the reported
/// total loss, per parameter block: `(theta, value, phi)`.
pub fn loss_fd_errors(problem: &Problem, spec: &LossSpec, h: f64) -> Result<(f64, f64, Option<f64>)> {
    let Problem {
        policy,
        value,
        dropout,
        batch,
    } = problem;
    let dist = dropout.as_ref();
    let grads = compute_gradients(batch, policy, value, dist, spec)?;
    let total = |b: &Batch, p: &PolicyNet, v: &ValueNet, d: Option<&DropoutDistribution>| -> Result<f64> {
        Ok(compute_gradients(b, p, v, d, spec)?.report.total)
    };

    let fd_theta = try_finite_diff(
        |x| {
            let mut p = policy.clone();
            p.set_flat(x)?;
            total(batch, &p, value, dist)
        },
        &policy.flat(),
        h,
    )?;
    let ascent: Vec<f64> = fd_theta.iter().map(|g| -g).collect();
    let theta = relative_error(&grads.policy, &ascent);

    let fd_value = try_finite_diff(
        |x| {
            let mut v = value.clone();
            v.set_flat(x)?;
            total(batch, policy, &v, dist)
        },
        &value.flat(),
        h,
    )?;
    let value_err = relative_error(&grads.value, &fd_value);

    let phi = match (&grads.dropout, dist) {
        (Some(analytic), Some(d)) => {
            let fd = try_finite_diff(
                |u| {
                    let mut d2 = d.clone();
                    d2.set_unconstrained(u)?;
                    if spec.dropout == DropoutPath::Reparam {
                        let b2 = rescaled_masks(batch, d2.params())?;
                        total(&b2, policy, value, Some(&d2))
                    } else {
                        total(batch, policy, value, Some(&d2))
                    }
                },
                &d.unconstrained(),
                h,
            )?;
            let ascent: Vec<f64> = fd.iter().map(|g| -g).collect();
            Some(relative_error(analytic, &ascent))
        }
        _ => None,
    };
    Ok((theta, value_err, phi))
}

/// One `(label, noise, spec, check φ)` row of the finite-difference suite.
fn fd_cases() -> Vec<(&'static str, ProblemNoise, LossSpec, bool)> {
    let clip = Surrogate::Clip { epsilon: 0.2 };
    let kl = Surrogate::Kl { beta: 0.7 };
    let bern = ProblemNoise::Dropout(DropoutKind::Bernoulli);
    let gauss = ProblemNoise::Dropout(DropoutKind::Gaussian);
    vec![
        ("clip", ProblemNoise::None, LossSpec::new(clip, DropoutPath::None), false),
        ("kl", ProblemNoise::None, LossSpec::new(kl, DropoutPath::None), false),
        ("clip/param-noise", ProblemNoise::Parameter, LossSpec::new(clip, DropoutPath::None), false),
        ("kl/param-noise", ProblemNoise::Parameter, LossSpec::new(kl, DropoutPath::None), false),
        ("clip/bernoulli/frozen", bern, LossSpec::new(clip, DropoutPath::Frozen), false),
        ("kl/bernoulli/frozen", bern, LossSpec::new(kl, DropoutPath::Frozen), false),
        ("clip/bernoulli/score", bern, LossSpec::new(clip, DropoutPath::Score), true),
        // the mean mask 1 − p moves with φ but is held constant on purpose,
        // so only θ is compared here
        ("kl/bernoulli/score", bern, LossSpec::new(kl, DropoutPath::Score), false),
        ("clip/gaussian/frozen", gauss, LossSpec::new(clip, DropoutPath::Frozen), false),
        ("kl/gaussian/frozen", gauss, LossSpec::new(kl, DropoutPath::Frozen), false),
        ("clip/gaussian/reparam", gauss, LossSpec::new(clip, DropoutPath::Reparam), true),
        ("kl/gaussian/reparam", gauss, LossSpec::new(kl, DropoutPath::Reparam), true),
    ]
}

/// Autodiff against finite differences for every loss and gradient path over
/// `batches` random problems; one report per case and parameter block, each
/// carrying the worst relative error seen.
pub fn loss_fd_suite(batches: usize, seed: u64) -> Result<Vec<OracleReport>> {
    const TOL: f64 = 1e-5;
    let mut reports = Vec::new();
    for (label, noise, spec, check_phi) in fd_cases() {
        let mut worst = [0.0f64; 3];
        for b in 0..batches {
            let problem = random_problem(seed.wrapping_mul(1000).wrapping_add(b as u64), noise)?;
            let (t, v, p) = loss_fd_errors(&problem, &spec, 1e-5)?;
            worst[0] = worst[0].max(t);
            worst[1] = worst[1].max(v);
            if check_phi {
                let p = p.ok_or_else(|| Error::Invalid(format!("{label}: no dropout gradient")))?;
                worst[2] = worst[2].max(p);
            }
        }
        let blocks: &[(&str, usize)] = if check_phi {
            &[("theta", 0), ("value", 1), ("phi", 2)]
        } else {
            &[("theta", 0), ("value", 1)]
        };
        for &(block, i) in blocks {
            let mut r = OracleReport::compare(
                format!("fd/{label}/{block}"),
                vec![worst[i]],
                vec![0.0],
                Tolerance::Absolute(TOL),
            )
            .with_note(format!("worst relative error over {batches} batches"));
            r.rel_err = worst[i];
            reports.push(r);
        }
    }
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Straight-line loss oracle

/// Per-row scalar reimplementation of the report fields.
struct ScalarLoss {
    surrogate: f64,
    penalty: f64,
    value_loss: f64,
    clip_fraction: f64,
}

fn scalar_loss(problem: &Problem, surrogate: Surrogate, use_masks: bool, value_clip: f64) -> Result<ScalarLoss> {
    let b = &problem.batch;
    let n = b.len();
    let mut surr = 0.0;
    let mut pen = 0.0;
    let mut vl = 0.0;
    let mut clipped = 0usize;
    let mean_mask = problem.dropout.as_ref().map(|d| d.mean_mask().values());
    for t in 0..n {
        let obs = &b.obs[t * b.obs_dim..(t + 1) * b.obs_dim];
        let act = &b.actions[t * b.act_dim..(t + 1) * b.act_dim];
        let mask = if use_masks {
            Some(b.masks[b.episode_of_step[t]].values())
        } else {
            None
        };
        let logp = problem.policy.forward_policy(obs, mask.as_deref())?.log_prob(act);
        let ratio = (logp - b.old_log_probs[t]).exp();
        let a = b.advantages[t];
        match surrogate {
            Surrogate::Clip { epsilon } => {
                let c = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
                surr += (ratio * a).min(c * a);
                if (ratio - 1.0).abs() > epsilon {
                    clipped += 1;
                }
            }
            Surrogate::Kl { beta } => {
                surr += ratio * a;
                let reference = match (&mean_mask, use_masks) {
                    (Some(mm), true) => problem.policy.forward_policy(obs, Some(mm))?.log_prob(act),
                    _ => logp,
                };
                let d = reference - b.old_log_probs[t];
                pen += 0.5 * beta * d * d;
            }
        }
        let v = problem.value.value_row(obs);
        let r = b.returns[t];
        let vo = b.old_values[t];
        let vc = vo + (v - vo).clamp(-value_clip, value_clip);
        vl += (v - r).powi(2).max((vc - r).powi(2));
    }
    let inv = 1.0 / n as f64;
    Ok(ScalarLoss {
        surrogate: surr * inv,
        penalty: pen * inv,
        value_loss: vl * inv,
        clip_fraction: clipped as f64 * inv,
    })
}

/// `ppo_clip_loss`, `ppo_kl_loss` and `nadpex_kl_loss` against per-row
/// scalar loops over random batches, to 1e-12.
pub fn straight_line_loss_check(batches: usize, seed: u64) -> Result<Vec<OracleReport>> {
    const TOL: f64 = 1e-12;
    let mut clip_a = Vec::new();
    let mut clip_o = Vec::new();
    let mut kl_a = Vec::new();
    let mut kl_o = Vec::new();
    let mut nad_a = Vec::new();
    let mut nad_o = Vec::new();
    for b in 0..batches {
        let s = seed.wrapping_mul(977).wrapping_add(b as u64);
        let plain = random_problem(s, ProblemNoise::None)?;
        let eps = 0.2;
        let r = ppo_clip_loss(&plain.batch, &plain.policy, &plain.value, None, eps)?;
        let o = scalar_loss(&plain, Surrogate::Clip { epsilon: eps }, false, 0.2)?;
        clip_a.extend([r.surrogate, r.value_loss, r.clip_fraction, r.total]);
        clip_o.extend([o.surrogate, o.value_loss, o.clip_fraction, -o.surrogate + 0.5 * o.value_loss]);

        let masked = random_problem(s, ProblemNoise::Dropout(DropoutKind::Bernoulli))?;
        let d = masked.dropout.as_ref().expect("dropout problem");
        let r = ppo_clip_loss(&masked.batch, &masked.policy, &masked.value, Some(d), eps)?;
        let o = scalar_loss(&masked, Surrogate::Clip { epsilon: eps }, true, 0.2)?;
        clip_a.extend([r.surrogate, r.total]);
        clip_o.extend([o.surrogate, -o.surrogate + 0.5 * o.value_loss]);

        let beta = 0.3;
        let r = ppo_kl_loss(&plain.batch, &plain.policy, &plain.value, beta)?;
        let o = scalar_loss(&plain, Surrogate::Kl { beta }, false, 0.2)?;
        kl_a.extend([r.surrogate, r.kl_penalty, r.total]);
        kl_o.extend([o.surrogate, o.penalty, -(o.surrogate - o.penalty) + 0.5 * o.value_loss]);

        for kind in [DropoutKind::Bernoulli, DropoutKind::Gaussian] {
            let p = random_problem(s, ProblemNoise::Dropout(kind))?;
            let d = p.dropout.as_ref().expect("dropout problem");
            let r = nadpex_kl_loss(&p.batch, &p.policy, &p.value, d, beta)?;
            let o = scalar_loss(&p, Surrogate::Kl { beta }, true, 0.2)?;
            nad_a.extend([r.surrogate, r.kl_penalty, r.total]);
            nad_o.extend([o.surrogate, o.penalty, -(o.surrogate - o.penalty) + 0.5 * o.value_loss]);
        }
    }
    Ok(vec![
        OracleReport::compare("scalar/ppo_clip_loss", clip_a, clip_o, Tolerance::Absolute(TOL)),
        OracleReport::compare("scalar/ppo_kl_loss", kl_a, kl_o, Tolerance::Absolute(TOL)),
        OracleReport::compare("scalar/nadpex_kl_loss", nad_a, nad_o, Tolerance::Absolute(TOL)),
    ])
}

/// The KL penalty reaches `φ` through no path: the `φ` gradient is the same
/// with and without it, and bootstrap gradients match the pathwise `θ` part.
pub fn stop_gradient_check(batches: usize, seed: u64) -> Result<Vec<OracleReport>> {
    let mut with_pen = Vec::new();
    let mut without = Vec::new();
    let mut boot = Vec::new();
    let mut path = Vec::new();
    let mut boot_has_phi = false;
    for b in 0..batches {
        let p = random_problem(seed.wrapping_mul(613).wrapping_add(b as u64), ProblemNoise::Dropout(DropoutKind::Gaussian))?;
        let d = p.dropout.as_ref().expect("dropout problem");
        let g1 = grad_gaussian_nadpex(&p.batch, &p.policy, &p.value, d, Surrogate::Kl { beta: 5.0 })?;
        let g0 = grad_gaussian_nadpex(&p.batch, &p.policy, &p.value, d, Surrogate::Kl { beta: 0.0 })?;
        with_pen.extend(g1.dropout.unwrap_or_default());
        without.extend(g0.dropout.unwrap_or_default());

        let clip = Surrogate::Clip { epsilon: 0.2 };
        let gb = grad_bootstrap(&p.batch, &p.policy, &p.value, d, clip)?;
        let gp = grad_gaussian_nadpex(&p.batch, &p.policy, &p.value, d, clip)?;
        boot_has_phi |= gb.dropout.is_some();
        boot.extend(gb.policy);
        path.extend(gp.policy);
    }
    Ok(vec![
        OracleReport::compare("stop_gradient/nadpex_kl_loss/phi", with_pen, without, Tolerance::Absolute(0.0))
            .with_note("phi gradient with beta=5 vs beta=0"),
        OracleReport::compare("stop_gradient/grad_bootstrap/theta", boot, path, Tolerance::Relative(1e-12))
            .require(!boot_has_phi, "bootstrap must not produce a phi gradient"),
    ])
}

// ---------------------------------------------------------------------------
// Monte-Carlo audits

/// A random quadratic `c + bᵀz + zᵀQz` on `units` inputs.
fn random_quadratic(rng: &mut StreamRng, units: usize) -> impl Fn(&[f64]) -> f64 {
    let c = normal(rng);
    let b: Vec<f64> = (0..units).map(|_| normal(rng)).collect();
    let q: Vec<f64> = (0..units * units).map(|_| normal(rng)).collect();
    move |z: &[f64]| {
        let mut s = c;
        for i in 0..units {
            s += b[i] * z[i];
            for j in 0..units {
                s += z[i] * q[i * units + j] * z[j];
            }
        }
        s
    }
}

/// Likelihood-ratio `φ` gradient of `grad_discrete_nadpex` on a one-step
/// bandit whose episode return is a random quadratic of the mask, against the
/// exhaustive-sum gradient. Gradients are in `logit p` coordinates.
pub fn score_unbiasedness_check(objective: u64, units: usize, episodes: usize) -> Result<OracleReport> {
    if units == 0 || units > 3 {
        return Err(Error::Invalid(format!("bandit check takes 1..=3 units, got {units}")));
    }
    let mut rng = stream(objective, 0x7363_6f72);
    let f = random_quadratic(&mut rng, units);
    let rates: Vec<f64> = (0..units).map(|_| uniform(&mut rng, 0.1, 0.5)).collect();
    let dist = DropoutDistribution::bernoulli(vec![units], rates.clone())?;
    let policy = PolicyNet::new(1, &[units], 1, &mut rng);
    let value = ValueNet::new(1, &[units], &mut rng);

    let masks: Vec<DropoutMask> = (0..episodes).map(|e| dist.sample(e as u64, &mut rng)).collect();
    let returns: Vec<f64> = masks.iter().map(|m| f(&m.values())).collect();
    let batch = Batch {
        obs_dim: 1,
        act_dim: 1,
        obs: vec![0.0; episodes],
        actions: vec![0.0; episodes],
        old_log_probs: vec![0.0; episodes],
        old_means: vec![0.0; episodes],
        old_log_std: policy.log_std().to_vec(),
        advantages: vec![0.0; episodes],
        returns: vec![0.0; episodes],
        old_values: vec![0.0; episodes],
        episode_of_step: (0..episodes).collect(),
        masks: masks.clone(),
        perturbations: Vec::new(),
        episode_advantages: returns.clone(),
    };
    let grads = grad_discrete_nadpex(&batch, &policy, &value, &dist, Surrogate::Clip { epsilon: 0.2 })?;
    let estimate = grads
        .dropout
        .ok_or_else(|| Error::Invalid("score path returned no dropout gradient".into()))?;

    // per-episode scores in logit coordinates: ((1 − z_j) − p_j) f(z)
    let per_sample: Vec<Vec<f64>> = masks
        .iter()
        .zip(&returns)
        .map(|(m, r)| m.values().iter().zip(&rates).map(|(z, p)| ((1.0 - z) - p) * r).collect())
        .collect();
    let (loop_mean, se) = vector_mean_and_se(&per_sample);

    let (_, dp) = exhaustive_bernoulli_expectation(&f, &rates)?;
    let exact: Vec<f64> = dp.iter().zip(&rates).map(|(g, p)| g * p * (1.0 - p)).collect();
    let agree = relative_error(&estimate, &loop_mean) < 1e-9;
    Ok(
        OracleReport::monte_carlo(format!("score/grad_discrete_nadpex/{objective}"), estimate, se, exact, SIGMA_BAND)
            .with_note(format!("{units} units, {episodes} episodes"))
            .require(agree, "estimator differs from the per-episode score mean"),
    )
}

/// Pathwise derivative of `E[(1 + σε)²]` on the graph against `2σ`.
pub fn pathwise_quadratic_check(sigma: f64, samples: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = stream(seed, 0x7061_7468);
    let eps: Vec<f64> = (0..samples).map(|_| normal(&mut rng)).collect();
    let mut g = Graph::new();
    let s = g.param(Tensor::row(vec![sigma]));
    let e = g.constant(Tensor::column(eps.clone()));
    let s_rep = g.repeat_rows(s, samples)?;
    let se_ = g.mul(s_rep, e)?;
    let z = g.add_scalar(se_, 1.0);
    let sq = g.square(z);
    let m = g.mean(sq);
    g.backward(m)?;
    let estimate = g.grad(s)[0];
    let per: Vec<f64> = eps.iter().map(|e| 2.0 * (1.0 + sigma * e) * e).collect();
    let (loop_mean, se) = mean_and_se(&per);
    Ok(
        OracleReport::monte_carlo("pathwise/quadratic", vec![estimate], vec![se], vec![2.0 * sigma], SIGMA_BAND)
            .require((estimate - loop_mean).abs() <= 1e-12 * (1.0 + loop_mean.abs()), "graph and loop disagree"),
    )
}

/// Reparameterized and score-function estimates of `∂σ E[(1+σε)²]` from
/// independent sample sets must agree within the combined standard error.
pub fn pathwise_vs_score_check(sigma: f64, samples: usize, seed: u64) -> Result<OracleReport> {
    let mut rp = stream(seed, 0x7061_7468);
    let mut rs = stream(seed, 0x7363_6f72);
    let path: Vec<f64> = (0..samples)
        .map(|_| {
            let e = normal(&mut rp);
            2.0 * (1.0 + sigma * e) * e
        })
        .collect();
    let score: Vec<f64> = (0..samples)
        .map(|_| {
            let z = 1.0 + sigma * normal(&mut rs);
            let d = z - 1.0;
            z * z * (d * d / sigma.powi(3) - 1.0 / sigma)
        })
        .collect();
    let (pm, pse) = mean_and_se(&path);
    let (sm, sse) = mean_and_se(&score);
    let combined = (pse * pse + sse * sse).sqrt();
    Ok(
        OracleReport::monte_carlo("pathwise/vs_score", vec![pm], vec![combined], vec![sm], SIGMA_BAND)
            .with_note(format!("score se {sse:.3e}, pathwise se {pse:.3e}")),
    )
}

/// Closed-form `∇_θ KL(π_θ(·|s) ‖ π_old(·|s))` through the graph.
fn analytic_kl_grad(policy: &PolicyNet, old: &PolicyNet, obs: &[f64]) -> Result<Vec<f64>> {
    let od = old.forward_policy(obs, None)?;
    let mut g = Graph::new();
    let pv = policy.bind(&mut g, true);
    let x = g.constant(Tensor::matrix(1, obs.len(), obs.to_vec())?);
    let mean = policy.forward_graph(&mut g, &pv, x, &[])?;
    let mu_old = g.constant(Tensor::row(od.mean.clone()));
    let diff = g.sub(mean, mu_old)?;
    let d2 = g.square(diff);
    let two_ls = g.scale(pv.log_std, 2.0);
    let var = g.exp(two_ls);
    let num = g.add(var, d2)?;
    let inv = g.constant(Tensor::row(od.log_std.iter().map(|l| 0.5 * (-2.0 * l).exp()).collect()));
    let quad = g.mul(num, inv)?;
    let log_old = g.constant(Tensor::row(od.log_std.clone()));
    let ratio = g.sub(log_old, pv.log_std)?;
    let terms = g.add(ratio, quad)?;
    let kl = g.sum(terms);
    g.backward(kl)?;
    Ok(policy.grads(&g, &pv))
}

fn one_d_pair(seed: u64, shift: f64) -> Result<(PolicyNet, PolicyNet, Vec<f64>)> {
    let mut rng = stream(seed, 0x6b6c_6b6c);
    let mut policy = PolicyNet::new(1, &[3], 1, &mut rng);
    let mut flat = policy.flat();
    jitter(&mut rng, &mut flat, 0.5);
    policy.set_flat(&flat)?;
    let mut old = policy.clone();
    let mut of = old.flat();
    jitter(&mut rng, &mut of, shift);
    old.set_flat(&of)?;
    let obs = vec![normal(&mut rng)];
    Ok((policy, old, obs))
}

/// `kl_first_order_grad_estimate` with unit masks samples from `π_θ`, so its
/// expectation is exactly `∇_θ KL(π_θ ‖ π_old)`; also with a baseline, which
/// must not move the expectation.
pub fn kl_first_order_check(seed: u64, chunks: usize, per_chunk: usize) -> Result<Vec<OracleReport>> {
    let (policy, old, obs) = one_d_pair(seed, 0.2)?;
    let exact = analytic_kl_grad(&policy, &old, &obs)?;
    let dist = DropoutDistribution::uniform(DropoutKind::Gaussian, policy.hidden_layout(), 0.1)?;
    let units = dist.len();
    let masks = vec![DropoutMask::fixed(0, vec![1.0; units])];
    let mut out = Vec::new();
    for (label, baseline) in [("plain", None), ("baseline", Some(vec![3.0]))] {
        let mut rng = stream(seed, 0x666f_6b6c);
        let rows: Vec<Vec<f64>> = (0..chunks)
            .map(|_| {
                kl_first_order_grad_estimate(
                    std::slice::from_ref(&obs),
                    &policy,
                    &old,
                    &dist,
                    &masks,
                    per_chunk,
                    baseline.as_deref(),
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;
        let (mean, se) = vector_mean_and_se(&rows);
        out.push(
            OracleReport::monte_carlo(format!("kl_first_order/{label}"), mean, se, exact.clone(), SIGMA_BAND)
                .with_note(format!("{} samples", chunks * per_chunk)),
        );
    }
    Ok(out)
}

/// The `ppo_kl_loss` penalty gradient at `θ` near `θ_old` against the
/// closed-form `∇_θ KL(π_θ ‖ π_old)`; the two agree to first order in the
/// policy change.
pub fn kl_penalty_direction_check(seed: u64, shift: f64, chunks: usize, per_chunk: usize) -> Result<OracleReport> {
    let (policy, old, obs) = one_d_pair(seed, shift)?;
    let exact = analytic_kl_grad(&policy, &old, &obs)?;
    let value = ValueNet::new(1, &[3], &mut stream(seed, 9));
    let od = old.forward_policy(&obs, None)?;
    let mut rng = stream(seed, 0x7065_6e61);
    let mut rows = Vec::with_capacity(chunks);
    for _ in 0..chunks {
        let mut actions = Vec::with_capacity(per_chunk);
        let mut logp = Vec::with_capacity(per_chunk);
        for _ in 0..per_chunk {
            let a = od.sample(&mut rng);
            logp.push(od.log_prob(&a));
            actions.extend(a);
        }
        let batch = Batch {
            obs_dim: 1,
            act_dim: 1,
            obs: vec![obs[0]; per_chunk],
            actions,
            old_log_probs: logp,
            old_means: vec![od.mean[0]; per_chunk],
            old_log_std: od.log_std.clone(),
            advantages: vec![0.0; per_chunk],
            returns: vec![0.0; per_chunk],
            old_values: vec![0.0; per_chunk],
            episode_of_step: vec![0; per_chunk],
            ..Batch::default()
        };
        let g = compute_gradients(&batch, &policy, &value, None, &LossSpec::new(Surrogate::Kl { beta: 1.0 }, DropoutPath::None))?;
        rows.push(g.policy.iter().map(|x| -x).collect::<Vec<f64>>());
    }
    let (mean, se) = vector_mean_and_se(&rows);
    Ok(OracleReport::monte_carlo("kl_penalty/ppo_kl_loss", mean, se, exact, SIGMA_BAND)
        .with_note(format!("{} samples from the old policy", chunks * per_chunk)))
}

// ---------------------------------------------------------------------------
// Deterministic identities

/// GAE against the direct sum `Σ_l (γλ)^l δ_{t+l}` truncated at episode ends.
pub fn gae_direct_sum_check(cases: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = stream(seed, 0x6761_6500);
    let mut analytic = Vec::new();
    let mut oracle = Vec::new();
    for _ in 0..cases {
        let n = 1 + rng_index(&mut rng, 30);
        let rewards: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let values: Vec<f64> = (0..=n).map(|_| normal(&mut rng)).collect();
        let dones: Vec<bool> = (0..n).map(|_| uniform(&mut rng, 0.0, 1.0) < 0.2).collect();
        let gamma = uniform(&mut rng, 0.9, 1.0);
        let lambda = uniform(&mut rng, 0.8, 1.0);
        let out = gae(&rewards, &values, &dones, gamma, lambda)?;
        let delta: Vec<f64> = (0..n)
            .map(|t| rewards[t] + if dones[t] { 0.0 } else { gamma * values[t + 1] } - values[t])
            .collect();
        for t in 0..n {
            let mut a = 0.0;
            let mut w = 1.0;
            for (d, done) in delta[t..].iter().zip(&dones[t..]) {
                a += w * d;
                if *done {
                    break;
                }
                w *= gamma * lambda;
            }
            oracle.push(a);
            oracle.push(a + values[t]);
            analytic.push(out.advantages[t]);
            analytic.push(out.returns[t]);
        }
    }
    Ok(OracleReport::compare("gae/direct_sum", analytic, oracle, Tolerance::Absolute(1e-10)))
}

/// Ten Adam steps on a quadratic against a scalar reimplementation.
pub fn adam_trace_check(seed: u64) -> Result<OracleReport> {
    let mut rng = stream(seed, 0x6164_616d);
    let dim = 4;
    let target: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
    let curvature: Vec<f64> = (0..dim).map(|_| uniform(&mut rng, 0.5, 3.0)).collect();
    let start: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
    let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
    let grad = |x: &[f64]| -> Vec<f64> { (0..dim).map(|i| curvature[i] * (x[i] - target[i])).collect() };

    let mut params = start.clone();
    let (mut m, mut v, mut t) = (vec![0.0; dim], vec![0.0; dim], 0u64);
    let mut analytic = Vec::new();
    for _ in 0..10 {
        let g = grad(&params);
        adam_step(&mut params, &g, &mut m, &mut v, &mut t, lr, b1, b2, eps)?;
        analytic.extend_from_slice(&params);
    }

    let mut oracle = Vec::new();
    let mut x = start;
    let mut mm = vec![0.0; dim];
    let mut vv = vec![0.0; dim];
    for step in 1..=10 {
        let g = grad(&x);
        for i in 0..dim {
            mm[i] = b1 * mm[i] + (1.0 - b1) * g[i];
            vv[i] = b2 * vv[i] + (1.0 - b2) * g[i] * g[i];
            let mhat = mm[i] / (1.0 - f64::powi(b1, step));
            let vhat = vv[i] / (1.0 - f64::powi(b2, step));
            x[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
        oracle.extend_from_slice(&x);
    }
    Ok(OracleReport::compare("adam/trace", analytic, oracle, Tolerance::Absolute(1e-12)))
}

/// Simpson's rule on `[a, b]` with an even number of panels.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let n = panels + panels % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

fn gaussian_kl_quadrature(sigma: f64, sigma_old: f64) -> f64 {
    let logpdf = |z: f64, s: f64| -0.5 * ((z - 1.0) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let half = 12.0 * sigma;
    simpson(
        |z| {
            let lp = logpdf(z, sigma);
            lp.exp() * (lp - logpdf(z, sigma_old))
        },
        1.0 - half,
        1.0 + half,
        20_000,
    )
}

/// Closed-form dropout KLs against quadrature (Gaussian) and a sum over all
/// masks (Bernoulli), to 1e-6.
pub fn kl_analytics_check(pairs: usize, seed: u64) -> Result<Vec<OracleReport>> {
    let mut rng = stream(seed, 0x6b6c_616e);
    let mut ga = Vec::new();
    let mut go = Vec::new();
    let mut ba = Vec::new();
    let mut bo = Vec::new();
    for _ in 0..pairs {
        let units = 1 + rng_index(&mut rng, 3);
        let s: Vec<f64> = (0..units).map(|_| uniform(&mut rng, 0.005, 1.0)).collect();
        let so: Vec<f64> = (0..units).map(|_| uniform(&mut rng, 0.005, 1.0)).collect();
        ga.push(kl_gaussian_dropout(&s, &so)?);
        go.push(s.iter().zip(&so).map(|(a, b)| gaussian_kl_quadrature(*a, *b)).sum());

        let units = 1 + rng_index(&mut rng, 6);
        let p: Vec<f64> = (0..units).map(|_| uniform(&mut rng, 0.005, 0.995)).collect();
        let po: Vec<f64> = (0..units).map(|_| uniform(&mut rng, 0.005, 0.995)).collect();
        ba.push(kl_bernoulli_dropout(&p, &po)?);
        let mut sum = 0.0;
        for bits in 0u64..(1 << units) {
            let (mut lq, mut lqo) = (0.0, 0.0);
            for j in 0..units {
                let keep = (bits >> j) & 1 == 1;
                lq += if keep { (1.0 - p[j]).ln() } else { p[j].ln() };
                lqo += if keep { (1.0 - po[j]).ln() } else { po[j].ln() };
            }
            sum += lq.exp() * (lq - lqo);
        }
        bo.push(sum);
    }
    Ok(vec![
        OracleReport::compare("kl/gaussian_dropout", ga, go, Tolerance::Absolute(1e-6)).with_note("vs Simpson quadrature"),
        OracleReport::compare("kl/bernoulli_dropout", ba, bo, Tolerance::Absolute(1e-6)).with_note("vs sum over all masks"),
    ])
}

/// `KL(N(1, σ²(1+x)²) ‖ N(1, σ²)) = −ln(1+x) + x + x²/2`.
pub fn gaussian_kl_relative_form(x: f64) -> f64 {
    -(1.0 + x).ln() + x + 0.5 * x * x
}

/// Grid sweep of the per-unit dropout KL under bounded rate changes.
///
/// Rates `p_old ∈ [0.005, 0.5]`, `Δ ∈ [−0.1, 0.1]`, `p = clip(p_old + Δ)` to
/// the working range. The Gaussian kind is swept over the relative scale
/// change `x = σ/σ_old − 1 ∈ [0, 1)`; the same rate grid mapped through
/// `σ = p/(1−p)` is unbounded and only reported.
pub fn kl_bound_sweep() -> Result<OracleReport> {
    let olds: Vec<f64> = (0..=99).map(|i| RATE_MIN + (RATE_MAX - RATE_MIN) * i as f64 / 99.0).collect();
    let deltas: Vec<f64> = (-20..=20).map(|i| i as f64 * 0.005).collect();
    let mut bern_max = 0.0f64;
    let mut raw_gauss_max = 0.0f64;
    let mut identity_err = 0.0f64;
    let mut zero_row = 0.0f64;
    for &po in &olds {
        for &d in &deltas {
            let p = (po + d).clamp(RATE_MIN, RATE_MAX);
            let kb = kl_bernoulli_dropout(&[p], &[po])?;
            let so = po / (1.0 - po);
            let s = p / (1.0 - p);
            let kg = kl_gaussian_dropout(&[s], &[so])?;
            let ident = gaussian_kl_relative_form(s / so - 1.0);
            identity_err = identity_err.max((kg - ident).abs() / (1.0 + kg.abs()));
            if d == 0.0 {
                zero_row = zero_row.max(kb.abs()).max(kg.abs());
            } else {
                bern_max = bern_max.max(kb);
                raw_gauss_max = raw_gauss_max.max(kg);
            }
        }
    }
    let mut rel_max = 0.0f64;
    for i in 0..1000 {
        let x = i as f64 / 1000.0;
        let k = kl_gaussian_dropout(&[1.0 + x], &[1.0])?;
        identity_err = identity_err.max((k - gaussian_kl_relative_form(x)).abs() / (1.0 + k.abs()));
        rel_max = rel_max.max(k);
    }
    // check the sigma mapping used above is the one the distribution uses
    let round_trip = rate_from_sigma(&[0.25])?[0];
    Ok(OracleReport::compare("kl_bound_sweep/bernoulli_max", vec![bern_max], vec![0.225], Tolerance::Absolute(0.01))
        .with_note(format!(
            "gaussian max over x in [0,1) = {rel_max:.4}; gaussian max on the raw rate grid = {raw_gauss_max:.1} (unbounded, informational)"
        ))
        .require(bern_max < 1.0 && rel_max < 1.0, "KL bound below 1")
        .require(identity_err <= 1e-10, "relative-change identity to 1e-10")
        .require(zero_row == 0.0, "zero-change row is zero")
        .require((round_trip - 0.2).abs() < 1e-15, "sigma/rate mapping"))
}

/// Analytic eliminations behind dropping the penalty's `φ` path.
///
/// Gaussian: `∂E[1 + σε]/∂σ = E[ε] = 0`, checked by Monte-Carlo over 1e6
/// draws. Bernoulli: `∂E[z]/∂p = −1` per unit by exhaustive sum (keep
/// probability `1 − p`), and the ratio term
/// `Σ ln[φ(1−φ_old)/((1−φ)φ_old)]` vanishes at `φ = φ_old` with slope
/// `1/(φ(1−φ))`.
pub fn muprop_identity_check(d: &DropoutDistribution) -> Result<OracleReport> {
    match d.kind() {
        DropoutKind::Gaussian => {
            let mut rng = stream(11, 0x6d75_7072);
            let eps: Vec<f64> = (0..1_000_000).map(|_| normal(&mut rng)).collect();
            let (mean, se) = mean_and_se(&eps);
            Ok(OracleReport::monte_carlo("muprop/gaussian_mean_derivative", vec![mean], vec![se], vec![0.0], SIGMA_BAND)
                .with_note(format!("sigma = {:?}", d.params().first().copied().unwrap_or(0.0))))
        }
        DropoutKind::Bernoulli => {
            let rates = d.params().to_vec();
            let mut analytic = Vec::new();
            let mut oracle = Vec::new();
            for &p in &rates {
                let (_, g) = exhaustive_bernoulli_expectation(|z| z[0], &[p])?;
                analytic.push(g[0]);
                oracle.push(-1.0);
                let ratio = |phi: f64| (phi * (1.0 - p) / ((1.0 - phi) * p)).ln();
                analytic.push(ratio(p));
                oracle.push(0.0);
                for delta in [1e-3, 1e-4, 1e-5] {
                    analytic.push(ratio(p + delta));
                    oracle.push(delta / (p * (1.0 - p)));
                }
            }
            // the series remainder is O(Δ²); allow it at the largest Δ
            let min_q = rates.iter().map(|p| p.min(1.0 - p)).fold(1.0, f64::min);
            let tol = 1e-6 / (min_q * min_q);
            Ok(OracleReport::compare("muprop/bernoulli_ratio_term", analytic, oracle, Tolerance::Absolute(tol)))
        }
    }
}

/// `z^λ`-scaled Concrete term `2λ [T(φ, z) − T(φ_old, z)]` with
/// `T(φ, z) = (φ z^{−λ−1} − (1−z)^{−λ−1}) / (φ z^{−λ} + (1−z)^{−λ})`,
/// evaluated after multiplying through by `z^λ (1−z)^λ` so large `λ` cannot
/// overflow.
pub fn concrete_first_term(phi: f64, phi_old: f64, lambda: f64, z: f64) -> f64 {
    let t = |f: f64| {
        let a = (lambda * (1.0 - z).ln()).exp();
        let b = (lambda * z.ln()).exp();
        (f * a / z - b / (1.0 - z)) / (f * a + b)
    };
    2.0 * lambda * (t(phi) - t(phi_old))
}

fn concrete_first_term_direct(phi: f64, phi_old: f64, lambda: f64, z: f64) -> f64 {
    let t = |f: f64| (f * z.powf(-lambda - 1.0) - (1.0 - z).powf(-lambda - 1.0)) / (f * z.powf(-lambda) + (1.0 - z).powf(-lambda));
    2.0 * lambda * (t(phi) - t(phi_old))
}

/// Leading behaviour `2λ z^{λ−1} (1/φ_old − 1/φ)` of the Concrete term as
/// `z → 0`.
pub fn concrete_first_term_limit(phi: f64, phi_old: f64, lambda: f64, z: f64) -> f64 {
    2.0 * lambda * z.powf(lambda - 1.0) * (1.0 / phi_old - 1.0 / phi)
}

/// Evaluates the Concrete-relaxed first term along `zbars` (decreasing).
///
/// Passes when the term is identically zero at `φ = φ_old`, the log-space
/// and direct forms agree where the direct form is finite, the value at
/// `λ = 200` is finite, and the smallest `z̄` matches the leading-order limit
/// to 1e-3. The term tends to zero only for `λ > 1`; at `λ = 1` it tends to
/// `2(1/φ_old − 1/φ)`.
pub fn concrete_kl_grad_check(phi: f64, phi_old: f64, lambda: f64, zbars: &[f64]) -> Result<OracleReport> {
    if !(lambda > 0.0) || zbars.iter().any(|z| !(*z > 0.0 && *z < 1.0)) {
        return Err(Error::Invalid("concrete check needs λ > 0 and z̄ in (0, 1)".into()));
    }
    let analytic: Vec<f64> = zbars.iter().map(|&z| concrete_first_term(phi, phi_old, lambda, z)).collect();
    let last = *zbars.last().expect("non-empty z grid");
    let limit = concrete_first_term_limit(phi, phi_old, lambda, last);
    let equal_zero = zbars.iter().all(|&z| concrete_first_term(phi_old, phi_old, lambda, z) == 0.0);
    let direct_ok = zbars.iter().all(|&z| {
        let d = concrete_first_term_direct(phi, phi_old, lambda, z);
        !d.is_finite() || (d - concrete_first_term(phi, phi_old, lambda, z)).abs() <= 1e-7 * (1.0 + d.abs())
    });
    let big = concrete_first_term(phi, phi_old, 200.0, zbars[0]);
    let tail = *analytic.last().expect("non-empty");
    let near_limit = (tail - limit).abs() <= 1e-3 * limit.abs().max(1e-300);
    let mut report = OracleReport::compare(
        format!("concrete/lambda={lambda}"),
        analytic.clone(),
        vec![limit; analytic.len()],
        Tolerance::Relative(f64::INFINITY),
    )
    .with_note(format!("limit at smallest z = {limit:.6e}"));
    report.pass = true;
    Ok(report
        .require(equal_zero, "zero at phi = phi_old")
        .require(direct_ok, "log-space form matches direct form")
        .require(big.is_finite(), "finite at lambda = 200")
        .require(near_limit, "leading-order limit at smallest z"))
}

/// Activation masking `(h ⊙ z) W` against next-layer weights scaled row-wise,
/// `h (diag(z) W)`, through the policy network's own forward pass.
pub fn local_reparam_check(layers: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = stream(seed, 0x6c72_6570);
    let mut worst = 0.0f64;
    for _ in 0..layers {
        let obs_dim = 1 + rng_index(&mut rng, 6);
        let width = 1 + rng_index(&mut rng, 8);
        let act = 1 + rng_index(&mut rng, 3);
        let mut policy = PolicyNet::new(obs_dim, &[width], act, &mut rng);
        let mut flat = policy.flat();
        jitter(&mut rng, &mut flat, 0.7);
        policy.set_flat(&flat)?;
        let sigmas: Vec<f64> = (0..width).map(|_| uniform(&mut rng, 0.01, 1.0)).collect();
        let dist = DropoutDistribution::gaussian(vec![width], sigmas)?;
        let z = dist.sample(0, &mut rng).values();
        let mut scaled = flat.clone();
        let offset = obs_dim * width + width;
        for i in 0..width {
            for j in 0..act {
                scaled[offset + i * act + j] *= z[i];
            }
        }
        let mut reparam = policy.clone();
        reparam.set_flat(&scaled)?;
        for _ in 0..3 {
            let obs: Vec<f64> = (0..obs_dim).map(|_| normal(&mut rng)).collect();
            let a = policy.forward_policy(&obs, Some(&z))?.mean;
            let b = reparam.forward_policy(&obs, None)?.mean;
            worst = worst.max(max_abs_diff(&a, &b));
        }
    }
    Ok(OracleReport::compare("local_reparam/activation_vs_weights", vec![worst], vec![0.0], Tolerance::Absolute(1e-12))
        .with_note(format!("{layers} random layers")))
}

/// Exhaustive expectation against a direct Monte-Carlo score estimate for a
/// 3-unit random quadratic (drop-probability coordinates).
pub fn exhaustive_vs_monte_carlo(seed: u64, samples: usize) -> Result<OracleReport> {
    let mut rng = stream(seed, 0x6578_6861);
    let f = random_quadratic(&mut rng, 3);
    let p: Vec<f64> = (0..3).map(|_| uniform(&mut rng, 0.1, 0.5)).collect();
    let d = DropoutDistribution::bernoulli(vec![3], p.clone())?;
    let (_, exact) = exhaustive_bernoulli_expectation(&f, &p)?;
    let rows: Vec<Vec<f64>> = (0..samples)
        .map(|e| {
            let z = d.sample(e as u64, &mut rng).values();
            let fz = f(&z);
            z.iter()
                .zip(&p)
                .map(|(zj, pj)| fz * if *zj == 1.0 { -1.0 / (1.0 - pj) } else { 1.0 / pj })
                .collect()
        })
        .collect();
    let (mean, se) = vector_mean_and_se(&rows);
    Ok(OracleReport::monte_carlo("exhaustive/score_monte_carlo", mean, se, exact, SIGMA_BAND))
}

// ---------------------------------------------------------------------------
// Registry

pub type CheckFn = fn() -> Result<Vec<OracleReport>>;

/// A named check and the estimators it exercises.
pub struct Check {
    pub name: &'static str,
    pub covers: &'static [&'static str],
    pub run: CheckFn,
}

/// Number of random objectives in the score-function audit.
pub const SCORE_OBJECTIVES: u64 = 10;
/// Episodes per score-function audit.
pub const SCORE_EPISODES: usize = 100_000;
/// Random batches in the finite-difference suite.
pub const FD_BATCHES: usize = 20;

fn run_fd() -> Result<Vec<OracleReport>> {
    loss_fd_suite(FD_BATCHES, 1)
}

fn run_scalar() -> Result<Vec<OracleReport>> {
    straight_line_loss_check(20, 2)
}

fn run_stop_gradient() -> Result<Vec<OracleReport>> {
    stop_gradient_check(10, 3)
}

fn run_score() -> Result<Vec<OracleReport>> {
    (1..=SCORE_OBJECTIVES)
        .map(|k| score_unbiasedness_check(k, 1 + (k as usize % 3), SCORE_EPISODES))
        .collect()
}

fn run_pathwise() -> Result<Vec<OracleReport>> {
    Ok(vec![
        pathwise_quadratic_check(0.3, 100_000, 4)?,
        pathwise_vs_score_check(0.3, 100_000, 5)?,
    ])
}

fn run_kl_first_order() -> Result<Vec<OracleReport>> {
    kl_first_order_check(5, 20, 5_000)
}

fn run_kl_penalty() -> Result<Vec<OracleReport>> {
    Ok(vec![kl_penalty_direction_check(6, 0.001, 20, 5_000)?])
}

fn run_gae() -> Result<Vec<OracleReport>> {
    Ok(vec![gae_direct_sum_check(50, 7)?])
}

fn run_adam() -> Result<Vec<OracleReport>> {
    Ok(vec![adam_trace_check(8)?])
}

fn run_kl_analytics() -> Result<Vec<OracleReport>> {
    kl_analytics_check(20, 9)
}

fn run_kl_bound() -> Result<Vec<OracleReport>> {
    Ok(vec![kl_bound_sweep()?])
}

fn run_muprop() -> Result<Vec<OracleReport>> {
    Ok(vec![
        muprop_identity_check(&DropoutDistribution::gaussian(vec![2], vec![0.1, 0.1])?)?,
        muprop_identity_check(&DropoutDistribution::bernoulli(vec![2], vec![0.3, 0.1])?)?,
    ])
}

fn run_concrete() -> Result<Vec<OracleReport>> {
    let zs = [1e-3, 1e-4, 1e-6];
    Ok(vec![
        concrete_kl_grad_check(0.31, 0.3, 1.0, &zs)?,
        concrete_kl_grad_check(0.31, 0.3, 2.0, &zs)?,
    ])
}

fn run_local_reparam() -> Result<Vec<OracleReport>> {
    Ok(vec![local_reparam_check(100, 10)?])
}

fn run_exhaustive() -> Result<Vec<OracleReport>> {
    Ok(vec![exhaustive_vs_monte_carlo(12, 100_000)?])
}

pub fn registry() -> Vec<Check> {
    vec![
        Check {
            name: "finite_differences",
            covers: &[
                "ppo_clip_loss",
                "ppo_kl_loss",
                "nadpex_kl_loss",
                "grad_discrete_nadpex",
                "grad_gaussian_nadpex",
                "grad_bootstrap",
            ],
            run: run_fd,
        },
        Check {
            name: "straight_line_losses",
            covers: &["ppo_clip_loss", "ppo_kl_loss", "nadpex_kl_loss"],
            run: run_scalar,
        },
        Check {
            name: "stop_gradient",
            covers: &["nadpex_kl_loss", "grad_bootstrap", "grad_gaussian_nadpex"],
            run: run_stop_gradient,
        },
        Check {
            name: "score_unbiasedness",
            covers: &["grad_discrete_nadpex"],
            run: run_score,
        },
        Check {
            name: "pathwise_quadratic",
            covers: &[],
            run: run_pathwise,
        },
        Check {
            name: "kl_first_order",
            covers: &["kl_first_order_grad_estimate"],
            run: run_kl_first_order,
        },
        Check {
            name: "kl_penalty_direction",
            covers: &["ppo_kl_loss"],
            run: run_kl_penalty,
        },
        Check {
            name: "gae_direct_sum",
            covers: &["gae"],
            run: run_gae,
        },
        Check {
            name: "adam_trace",
            covers: &["adam_step"],
            run: run_adam,
        },
        Check {
            name: "kl_analytics",
            covers: &[],
            run: run_kl_analytics,
        },
        Check {
            name: "kl_bound_sweep",
            covers: &[],
            run: run_kl_bound,
        },
        Check {
            name: "muprop_identity",
            covers: &[],
            run: run_muprop,
        },
        Check {
            name: "concrete_kl_grad",
            covers: &[],
            run: run_concrete,
        },
        Check {
            name: "local_reparam",
            covers: &[],
            run: run_local_reparam,
        },
        Check {
            name: "exhaustive_expectation",
            covers: &[],
            run: run_exhaustive,
        },
    ]
}

/// Estimators with no registered check.
pub fn uncovered_estimators() -> Vec<&'static str> {
    let checks = registry();
    ESTIMATORS
        .iter()
        .copied()
        .filter(|e| !checks.iter().any(|c| c.covers.contains(e)))
        .collect()
}

/// Runs every check (in parallel, results in registry order). A registry
/// gap is reported as a failing row.
pub fn run_all() -> Result<Vec<OracleReport>> {
    let checks = registry();
    let results: Vec<Result<Vec<OracleReport>>> = checks.par_iter().map(|c| (c.run)()).collect();
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    let missing = uncovered_estimators();
    let mut completeness = OracleReport::compare(
        "registry/completeness",
        vec![missing.len() as f64],
        vec![0.0],
        Tolerance::Absolute(0.0),
    );
    if !missing.is_empty() {
        completeness.note = format!("unchecked: {}", missing.join(", "));
    }
    out.push(completeness);
    Ok(out)
}

/// Runs the named checks only.
pub fn run_selected(names: &[&str]) -> Result<Vec<OracleReport>> {
    let checks = registry();
    for n in names {
        if !checks.iter().any(|c| c.name == *n) {
            return Err(Error::Invalid(format!("unknown check {n}")));
        }
    }
    let chosen: Vec<&Check> = checks.iter().filter(|c| names.contains(&c.name)).collect();
    let results: Vec<Result<Vec<OracleReport>>> = chosen.par_iter().map(|c| (c.run)()).collect();
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_of_square() {
        let g = finite_diff(|x| x[0] * x[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-8);
        let c = finite_diff(|_| 4.0, &[1.0, 2.0], 1e-5);
        assert_eq!(c, vec![0.0, 0.0]);
    }

    #[test]
    fn exhaustive_trivial_cases() {
        let (e, g) = exhaustive_bernoulli_expectation(|_| 2.5, &[0.2, 0.4]).unwrap();
        assert!((e - 2.5).abs() < 1e-12);
        assert!(g.iter().all(|x| x.abs() < 1e-12));
        let (e, g) = exhaustive_bernoulli_expectation(|z| z[0], &[0.3]).unwrap();
        assert!((e - 0.7).abs() < 1e-12);
        assert!((g[0] + 1.0).abs() < 1e-12);
        assert!(exhaustive_bernoulli_expectation(|_| 0.0, &[0.5; 21]).is_err());
    }

    #[test]
    fn registry_covers_every_estimator() {
        assert!(uncovered_estimators().is_empty(), "{:?}", uncovered_estimators());
    }

    #[test]
    fn concrete_term_limits() {
        let l1 = concrete_first_term(0.31, 0.3, 1.0, 1e-6);
        assert!((l1 - 2.0 * (1.0 / 0.3 - 1.0 / 0.31)).abs() < 1e-5);
        assert_eq!(concrete_first_term(0.3, 0.3, 1.0, 1e-3), 0.0);
        assert!(concrete_first_term(0.31, 0.3, 500.0, 1e-3).is_finite());
    }

    #[test]
    fn report_table_and_csv_have_one_line_per_report() {
        let r = vec![
            OracleReport::compare("a", vec![1.0], vec![1.0], Tolerance::Absolute(0.0)),
            OracleReport::monte_carlo("b", vec![0.1], vec![0.1], vec![0.0], 3.0),
        ];
        assert!(r.iter().all(|x| x.pass));
        assert_eq!(format_table(&r).lines().count(), 3);
        assert_eq!(reports_csv(&r).lines().count(), 3);
    }
}
