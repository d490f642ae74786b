//! Losses and gradient estimators.
//!
//! Conventions: policy objectives are *maximized*. [`Gradients`] carries the
//! ascent direction of the policy objective for `θ` and `φ`, and the descent
//! direction of the value loss. `φ` gradients are taken with respect to the
//! unconstrained dropout coordinates (`logit p` or `ln σ`).
//!
//! Dropout enters a batch in one of four ways ([`DropoutPath`]):
//! - `None`: plain PPO, no masks.
//! - `Frozen`: stored masks are constants; `φ` receives nothing (bootstrap).
//! - `Score`: Bernoulli masks are constants; `φ` is trained with the
//!   likelihood-ratio term `(1/N) Σ_i ∇_φ log q_φ(z_i) A(s₀ⁱ, a₀ⁱ)`.
//! - `Reparam`: Gaussian masks are rebuilt as `z = 1 + σ ⊙ ε` on the graph,
//!   so one backward pass reaches both `θ` and `σ`.

use serde::{Deserialize, Serialize};

use crate::dropoutdist::{DropoutDistribution, DropoutKind, DropoutMask};
use crate::error::{Error, Result};
use crate::policy::{log_prob_graph, per_state_kl, split_mask, ActionDistribution, PolicyNet, ValueNet};
use crate::rng::StreamRng;
use crate::tensorgraph::{Graph, Tensor, Var};

/// Names of every estimator exposed here; the oracle registry must cover each.
pub const ESTIMATORS: &[&str] = &[
    "gae",
    "ppo_clip_loss",
    "ppo_kl_loss",
    "nadpex_kl_loss",
    "grad_discrete_nadpex",
    "grad_gaussian_nadpex",
    "grad_bootstrap",
    "kl_first_order_grad_estimate",
    "adam_step",
];

#[derive(Clone, Debug, PartialEq)]
pub struct AdvantageSet {
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Generalized advantage estimation over one contiguous segment.
///
/// `values` has one more entry than `rewards`: the bootstrap value of the
/// state after the last step (ignored when that step is terminal).
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> Result<AdvantageSet> {
    let n = rewards.len();
    if values.len() != n + 1 || dones.len() != n {
        return Err(Error::Length(format!(
            "gae: {n} rewards, {} values, {} dones",
            values.len(),
            dones.len()
        )));
    }
    let mut advantages = vec![0.0; n];
    let mut next = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * live * values[t + 1] - values[t];
        next = delta + gamma * lambda * live * next;
        advantages[t] = next;
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok(AdvantageSet { advantages, returns })
}

/// Zero-mean, unit-std rescaling.
pub fn normalize(xs: &mut [f64]) {
    if xs.len() < 2 {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    xs.iter_mut().for_each(|x| *x = (*x - mean) / (std + 1e-8));
}

/// Subtract the cross-episode mean.
pub fn subtract_mean(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter_mut().for_each(|x| *x -= mean);
}

/// Sampled data for one update. Rows are time steps; `episode_of_step`
/// maps each row to its entry in the per-episode tables.
#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub obs_dim: usize,
    pub act_dim: usize,
    /// Normalized observations, `n × obs_dim`.
    pub obs: Vec<f64>,
    pub actions: Vec<f64>,
    /// `log π_{θ_old|z}(a|s)` recorded while acting.
    pub old_log_probs: Vec<f64>,
    /// Action means recorded while acting, `n × act_dim`.
    pub old_means: Vec<f64>,
    pub old_log_std: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub old_values: Vec<f64>,
    pub episode_of_step: Vec<usize>,
    /// One mask per episode touched by the batch (empty without dropout).
    pub masks: Vec<DropoutMask>,
    /// Parameter perturbation per episode (parameter-noise baseline only).
    pub perturbations: Vec<Vec<f64>>,
    /// `A(s₀, a₀)` per episode, baseline already subtracted.
    pub episode_advantages: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.old_log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.old_log_probs.is_empty()
    }

    pub fn num_episodes(&self) -> usize {
        self.episode_advantages.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let checks = [
            ("obs", self.obs.len(), n * self.obs_dim),
            ("actions", self.actions.len(), n * self.act_dim),
            ("old_means", self.old_means.len(), n * self.act_dim),
            ("advantages", self.advantages.len(), n),
            ("returns", self.returns.len(), n),
            ("old_values", self.old_values.len(), n),
            ("episode_of_step", self.episode_of_step.len(), n),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Length(format!("batch {name}: expected {want}, got {got}")));
            }
        }
        Ok(())
    }

    fn old_dist(&self, row: usize) -> ActionDistribution {
        ActionDistribution {
            mean: self.old_means[row * self.act_dim..(row + 1) * self.act_dim].to_vec(),
            log_std: self.old_log_std.clone(),
        }
    }

    fn mask_for(&self, row: usize) -> Result<&DropoutMask> {
        let ep = self.episode_of_step[row];
        self.masks
            .get(ep)
            .ok_or_else(|| Error::Integrity(format!("no mask stored for episode slot {ep} (row {row})")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Surrogate {
    /// `min(r A, clip(r, 1-ε, 1+ε) A)`.
    Clip { epsilon: f64 },
    /// `r A - (β/2)(log π_new - log π_old)²`; with dropout the first log
    /// term is the current mean policy.
    Kl { beta: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DropoutPath {
    None,
    Frozen,
    Score,
    Reparam,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSpec {
    pub surrogate: Surrogate,
    pub dropout: DropoutPath,
    pub value_coef: f64,
    pub value_clip: f64,
}

impl LossSpec {
    pub fn new(surrogate: Surrogate, dropout: DropoutPath) -> Self {
        LossSpec {
            surrogate,
            dropout,
            value_coef: 0.5,
            value_clip: 0.2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Mean surrogate term (clipped or ratio-weighted advantage).
    pub surrogate: f64,
    /// Mean `(β/2)(Δ log π)²`, reported as a positive number.
    pub kl_penalty: f64,
    /// Likelihood-ratio term for Bernoulli `φ` (zero elsewhere).
    pub score_term: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    /// Mean `KL(π_{θ_old|z} ‖ π_{θ|z})` over steps.
    pub mean_kl: f64,
    /// `-(surrogate - kl_penalty + score_term) + value_coef · value_loss`.
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct Gradients {
    /// Ascent direction of the policy objective, in [`PolicyNet::flat`] order.
    pub policy: Vec<f64>,
    /// Ascent direction for the unconstrained dropout coordinates.
    pub dropout: Option<Vec<f64>>,
    /// Descent direction of the value loss.
    pub value: Vec<f64>,
    pub report: LossReport,
}

impl Gradients {
    /// `∂J/∂σ` from `∂J/∂ln σ`.
    pub fn dropout_wrt_sigma(&self, dist: &DropoutDistribution) -> Option<Vec<f64>> {
        self.dropout
            .as_ref()
            .map(|g| g.iter().zip(dist.params()).map(|(d, s)| d / s).collect())
    }
}

/// Per-row mask matrices for each hidden layer, `rows × width`.
fn gather_masks(batch: &Batch, rows: &[usize], layout: &[usize]) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = layout.iter().map(|w| Vec::with_capacity(rows.len() * w)).collect();
    let mut cache: Option<(usize, Vec<Vec<f64>>)> = None;
    for &r in rows {
        let ep = batch.episode_of_step[r];
        if cache.as_ref().map(|c| c.0) != Some(ep) {
            let z = batch.mask_for(r)?.values();
            cache = Some((ep, split_mask(&z, layout)?));
        }
        let parts = &cache.as_ref().expect("filled above").1;
        for (o, p) in out.iter_mut().zip(parts) {
            o.extend_from_slice(p);
        }
    }
    Ok(out)
}

/// Per-row noise and scale-offset matrices for the reparametrized path.
fn gather_noise(batch: &Batch, rows: &[usize], layout: &[usize], current: &[f64]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut out: Vec<(Vec<f64>, Vec<f64>)> = layout
        .iter()
        .map(|w| (Vec::with_capacity(rows.len() * w), Vec::with_capacity(rows.len() * w)))
        .collect();
    for &r in rows {
        let mask = batch.mask_for(r)?;
        let (noise, scale) = match (mask.noise(), mask.scale()) {
            (Some(n), Some(s)) => (n, s),
            _ => {
                return Err(Error::Integrity(format!(
                    "episode {} has no stored noise for the reparametrized gradient",
                    mask.episode_id()
                )))
            }
        };
        let mut at = 0;
        for (k, &w) in layout.iter().enumerate() {
            out[k].0.extend_from_slice(&noise[at..at + w]);
            out[k].1.extend((at..at + w).map(|j| scale[j] - current[j]));
            at += w;
        }
    }
    Ok(out)
}

fn rows_matrix(data: &[f64], rows: &[usize], width: usize) -> Result<Tensor> {
    let mut out = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        out.extend_from_slice(&data[r * width..(r + 1) * width]);
    }
    Tensor::matrix(rows.len(), width, out)
}

fn rows_column(data: &[f64], rows: &[usize]) -> Tensor {
    Tensor::column(rows.iter().map(|&r| data[r]).collect())
}

struct Accum {
    objective: Option<Var>,
    surrogate: f64,
    penalty: f64,
    clipped: usize,
    ratio_sum: f64,
    kl_sum: f64,
}

impl Accum {
    fn add(&mut self, g: &mut Graph, term: Var) -> Result<()> {
        self.objective = Some(match self.objective {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
        Ok(())
    }
}

/// Forward, backward and report for one batch under `spec`.
pub fn compute_gradients(
    batch: &Batch,
    policy: &PolicyNet,
    value: &ValueNet,
    dropout: Option<&DropoutDistribution>,
    spec: &LossSpec,
) -> Result<Gradients> {
    batch.validate()?;
    let n = batch.len();
    if n == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    let layout = policy.hidden_layout();
    let uses_masks = spec.dropout != DropoutPath::None;
    let dist = if uses_masks {
        let d = dropout.ok_or_else(|| Error::Invalid("dropout path requires a distribution".into()))?;
        match (spec.dropout, d.kind()) {
            (DropoutPath::Score, DropoutKind::Gaussian) => {
                return Err(Error::Unsupported {
                    op: "score-function dropout gradient",
                    kind: "gaussian",
                })
            }
            (DropoutPath::Reparam, DropoutKind::Bernoulli) => {
                return Err(Error::Unsupported {
                    op: "reparametrized dropout gradient",
                    kind: "bernoulli",
                })
            }
            _ => {}
        }
        if batch.masks.len() < batch.num_episodes() {
            return Err(Error::Integrity(format!(
                "{} episodes but only {} stored masks",
                batch.num_episodes(),
                batch.masks.len()
            )));
        }
        Some(d)
    } else {
        None
    };

    let mut g = Graph::new();
    let pv = policy.bind(&mut g, true);
    let vv = value.bind(&mut g, true);

    // φ leaves, one per hidden layer
    let phi_vars: Vec<Var> = match (spec.dropout, dist) {
        (DropoutPath::Score | DropoutPath::Reparam, Some(d)) => {
            let u = d.unconstrained();
            split_mask(&u, &layout)?
                .into_iter()
                .map(|part| g.param(Tensor::row(part)))
                .collect()
        }
        _ => Vec::new(),
    };
    let sigma_vars: Vec<Var> = if spec.dropout == DropoutPath::Reparam {
        phi_vars.iter().map(|&u| g.exp(u)).collect()
    } else {
        Vec::new()
    };

    // Row groups: one per episode under parameter noise, otherwise one.
    let groups: Vec<Vec<usize>> = if batch.perturbations.is_empty() {
        vec![(0..n).collect()]
    } else {
        let mut gs = vec![Vec::new(); batch.num_episodes()];
        for (r, &ep) in batch.episode_of_step.iter().enumerate() {
            gs.get_mut(ep)
                .ok_or_else(|| Error::Integrity(format!("row {r} references missing episode {ep}")))?
                .push(r);
        }
        gs.into_iter().filter(|g| !g.is_empty()).collect()
    };

    let mut acc = Accum {
        objective: None,
        surrogate: 0.0,
        penalty: 0.0,
        clipped: 0,
        ratio_sum: 0.0,
        kl_sum: 0.0,
    };
    let inv_n = 1.0 / n as f64;

    for rows in &groups {
        let m = rows.len();
        let x = g.constant(rows_matrix(&batch.obs, rows, batch.obs_dim)?);

        // weights for this group: plain, or perturbed per episode
        let group_vars = if batch.perturbations.is_empty() {
            pv.clone()
        } else {
            let ep = batch.episode_of_step[rows[0]];
            perturb_vars(&mut g, policy, &pv, &batch.perturbations[ep])?
        };

        let masks: Vec<Option<Var>> = match (spec.dropout, dist) {
            (DropoutPath::None, _) => Vec::new(),
            (DropoutPath::Reparam, Some(d)) => {
                let parts = gather_noise(batch, rows, &layout, d.params())?;
                let mut out = Vec::with_capacity(parts.len());
                for (k, (noise, offset)) in parts.into_iter().enumerate() {
                    let w = layout[k];
                    let eps = g.constant(Tensor::matrix(m, w, noise)?);
                    let off = g.constant(Tensor::matrix(m, w, offset)?);
                    let sig = g.repeat_rows(sigma_vars[k], m)?;
                    let sig = g.add(sig, off)?;
                    let scaled = g.mul(sig, eps)?;
                    out.push(Some(g.add_scalar(scaled, 1.0)));
                }
                out
            }
            _ => gather_masks(batch, rows, &layout)?
                .into_iter()
                .enumerate()
                .map(|(k, vals)| Ok(Some(g.constant(Tensor::matrix(m, layout[k], vals)?))))
                .collect::<Result<_>>()?,
        };

        let mean = policy.forward_graph(&mut g, &group_vars, x, &masks)?;
        let actions: Vec<f64> = rows
            .iter()
            .flat_map(|&r| batch.actions[r * batch.act_dim..(r + 1) * batch.act_dim].iter().copied())
            .collect();
        let logp = log_prob_graph(&mut g, mean, group_vars.log_std, &actions)?;
        let old = g.constant(rows_column(&batch.old_log_probs, rows));
        let adv = g.constant(rows_column(&batch.advantages, rows));
        let diff = g.sub(logp, old)?;
        let ratio = g.exp(diff);
        let weighted = g.mul(ratio, adv)?;

        let surrogate = match spec.surrogate {
            Surrogate::Clip { epsilon } => {
                let clipped = g.clamp(ratio, 1.0 - epsilon, 1.0 + epsilon);
                let cw = g.mul(clipped, adv)?;
                g.minimum(weighted, cw)?
            }
            Surrogate::Kl { .. } => weighted,
        };
        let surr_sum = g.sum(surrogate);
        acc.surrogate += g.value(surr_sum).item();
        let scaled = g.scale(surr_sum, inv_n);
        acc.add(&mut g, scaled)?;

        if let Surrogate::Kl { beta } = spec.surrogate {
            let log_ref = match dist {
                // mean policy: current θ, expected mask, no path to φ
                Some(d) => {
                    let mean_mask = d.mean_mask().values();
                    let mm: Vec<Option<Var>> = split_mask(&mean_mask, &layout)?
                        .into_iter()
                        .map(|part| {
                            let rep: Vec<f64> = (0..m).flat_map(|_| part.iter().copied()).collect();
                            Ok(Some(g.constant(Tensor::matrix(m, part.len(), rep)?)))
                        })
                        .collect::<Result<_>>()?;
                    let mean_bar = policy.forward_graph(&mut g, &group_vars, x, &mm)?;
                    log_prob_graph(&mut g, mean_bar, group_vars.log_std, &actions)?
                }
                None => logp,
            };
            let d = g.sub(log_ref, old)?;
            let sq = g.square(d);
            let pen = g.sum(sq);
            let pen = g.scale(pen, 0.5 * beta);
            acc.penalty += g.value(pen).item();
            let pen = g.scale(pen, -inv_n);
            acc.add(&mut g, pen)?;
        }

        // diagnostics
        let ratios = g.value(ratio).data();
        if let Surrogate::Clip { epsilon } = spec.surrogate {
            acc.clipped += ratios.iter().filter(|r| (**r - 1.0).abs() > epsilon).count();
        }
        acc.ratio_sum += ratios.iter().sum::<f64>();
        let means = g.value(mean).data();
        let new_ls = policy.log_std();
        for (i, &r) in rows.iter().enumerate() {
            let new = ActionDistribution {
                mean: means[i * batch.act_dim..(i + 1) * batch.act_dim].to_vec(),
                log_std: new_ls.to_vec(),
            };
            acc.kl_sum += per_state_kl(&batch.old_dist(r), &new);
        }
    }

    // likelihood-ratio term for Bernoulli φ
    let mut score_value = 0.0;
    if spec.dropout == DropoutPath::Score {
        let n_ep = batch.num_episodes();
        if n_ep > 0 {
            let mut keep_w = vec![0.0; layout.iter().sum()];
            let mut drop_w = vec![0.0; keep_w.len()];
            for (i, &a0) in batch.episode_advantages.iter().enumerate() {
                let z = batch.masks[i].values();
                for j in 0..z.len() {
                    keep_w[j] += a0 * z[j];
                    drop_w[j] += a0 * (1.0 - z[j]);
                }
            }
            let keep_parts = split_mask(&keep_w, &layout)?;
            let drop_parts = split_mask(&drop_w, &layout)?;
            for (k, &u) in phi_vars.iter().enumerate() {
                let p = g.sigmoid(u);
                let neg = g.neg(p);
                let one_minus = g.add_scalar(neg, 1.0);
                let lk = g.log(one_minus)?;
                let ld = g.log(p)?;
                let kw = g.constant(Tensor::row(keep_parts[k].clone()));
                let dw = g.constant(Tensor::row(drop_parts[k].clone()));
                let a = g.mul(kw, lk)?;
                let b = g.mul(dw, ld)?;
                let s = g.add(a, b)?;
                let s = g.sum(s);
                let s = g.scale(s, 1.0 / n_ep as f64);
                score_value += g.value(s).item();
                acc.add(&mut g, s)?;
            }
        }
    }

    // clipped value loss
    let x_all = g.constant(Tensor::matrix(n, batch.obs_dim, batch.obs.clone())?);
    let v = value.forward_graph(&mut g, &vv, x_all)?;
    let ret = g.constant(Tensor::column(batch.returns.clone()));
    let v_old = g.constant(Tensor::column(batch.old_values.clone()));
    let e1 = g.sub(v, ret)?;
    let sq1 = g.square(e1);
    let dv = g.sub(v, v_old)?;
    let dv = g.clamp(dv, -spec.value_clip, spec.value_clip);
    let v_clip = g.add(v_old, dv)?;
    let e2 = g.sub(v_clip, ret)?;
    let sq2 = g.square(e2);
    let vmax = g.maximum(sq1, sq2)?;
    let value_loss = g.mean(vmax);
    let value_loss_val = g.value(value_loss).item();

    let objective = acc.objective.expect("at least one row group");
    let objective_val = g.value(objective).item();
    let neg_obj = g.neg(objective);
    let vl = g.scale(value_loss, spec.value_coef);
    let total = g.add(neg_obj, vl)?;
    let total_val = g.value(total).item();
    g.backward(total)?;

    let policy_grad: Vec<f64> = policy.grads(&g, &pv).into_iter().map(|x| -x).collect();
    let dropout_grad = if phi_vars.is_empty() {
        None
    } else {
        Some(phi_vars.iter().flat_map(|&u| g.grad(u)).map(|x| -x).collect())
    };
    let value_grad = value.grads(&g, &vv);

    let report = LossReport {
        surrogate: acc.surrogate * inv_n,
        kl_penalty: acc.penalty * inv_n,
        score_term: score_value,
        value_loss: value_loss_val,
        clip_fraction: acc.clipped as f64 * inv_n,
        mean_ratio: acc.ratio_sum * inv_n,
        mean_kl: acc.kl_sum * inv_n,
        total: total_val,
    };
    debug_assert!((objective_val - (report.surrogate - report.kl_penalty + report.score_term)).abs() < 1e-6 * (1.0 + objective_val.abs()));
    Ok(Gradients {
        policy: policy_grad,
        dropout: dropout_grad,
        value: value_grad,
        report,
    })
}

/// Policy variables with a constant perturbation added to weights and biases.
fn perturb_vars(g: &mut Graph, policy: &PolicyNet, vars: &crate::policy::PolicyVars, noise: &[f64]) -> Result<crate::policy::PolicyVars> {
    let mut out = vars.clone();
    let mut at = 0;
    for (layer, slot) in policy.mlp().layers().iter().zip(out.mlp.layers.iter_mut()) {
        let nw = layer.weight().len();
        let nb = layer.bias().len();
        if at + nw + nb > noise.len() {
            return Err(Error::Length("perturbation shorter than the network".into()));
        }
        let dw = g.constant(Tensor::matrix(layer.inputs(), layer.outputs(), noise[at..at + nw].to_vec())?);
        at += nw;
        let db = g.constant(Tensor::row(noise[at..at + nb].to_vec()));
        at += nb;
        slot.0 = g.add(slot.0, dw)?;
        slot.1 = g.add(slot.1, db)?;
    }
    Ok(out)
}

/// Clipped PPO objective with per-episode masks held fixed.
pub fn ppo_clip_loss(
    batch: &Batch,
    policy: &PolicyNet,
    value: &ValueNet,
    dropout: Option<&DropoutDistribution>,
    epsilon: f64,
) -> Result<LossReport> {
    let path = if dropout.is_some() { DropoutPath::Frozen } else { DropoutPath::None };
    Ok(compute_gradients(batch, policy, value, dropout, &LossSpec::new(Surrogate::Clip { epsilon }, path))?.report)
}

/// Maskless KL-penalized PPO objective.
pub fn ppo_kl_loss(batch: &Batch, policy: &PolicyNet, value: &ValueNet, beta: f64) -> Result<LossReport> {
    Ok(compute_gradients(batch, policy, value, None, &LossSpec::new(Surrogate::Kl { beta }, DropoutPath::None))?.report)
}

/// KL-penalized objective whose penalty is measured between the current
/// mean policy and the sampling-time dropout policy.
pub fn nadpex_kl_loss(
    batch: &Batch,
    policy: &PolicyNet,
    value: &ValueNet,
    dropout: &DropoutDistribution,
    beta: f64,
) -> Result<LossReport> {
    Ok(compute_gradients(
        batch,
        policy,
        value,
        Some(dropout),
        &LossSpec::new(Surrogate::Kl { beta }, DropoutPath::Frozen),
    )?
    .report)
}

/// `θ` from the surrogate, `φ` from `(1/N) Σ ∇_φ log q_φ(zⁱ) A(s₀ⁱ, a₀ⁱ)`.
pub fn grad_discrete_nadpex(
    batch: &Batch,
    policy: &PolicyNet,
    value: &ValueNet,
    dropout: &DropoutDistribution,
    surrogate: Surrogate,
) -> Result<Gradients> {
    if dropout.kind() != DropoutKind::Bernoulli {
        return Err(Error::Unsupported {
            op: "grad_discrete_nadpex",
            kind: dropout.kind().name(),
        });
    }
    compute_gradients(batch, policy, value, Some(dropout), &LossSpec::new(surrogate, DropoutPath::Score))
}

/// One backward pass through `z = 1 + σ ⊙ ε` for both `θ` and `σ`.
pub fn grad_gaussian_nadpex(
    batch: &Batch,
    policy: &PolicyNet,
    value: &ValueNet,
    dropout: &DropoutDistribution,
    surrogate: Surrogate,
) -> Result<Gradients> {
    if dropout.kind() != DropoutKind::Gaussian {
        return Err(Error::Unsupported {
            op: "grad_gaussian_nadpex",
            kind: dropout.kind().name(),
        });
    }
    compute_gradients(batch, policy, value, Some(dropout), &LossSpec::new(surrogate, DropoutPath::Reparam))
}

/// Masks sampled per episode but `φ` left untouched.
pub fn grad_bootstrap(
    batch: &Batch,
    policy: &PolicyNet,
    value: &ValueNet,
    dropout: &DropoutDistribution,
    surrogate: Surrogate,
) -> Result<Gradients> {
    compute_gradients(batch, policy, value, Some(dropout), &LossSpec::new(surrogate, DropoutPath::Frozen))
}

/// Monte-Carlo estimate of
/// `(1/N) Σ_i E_{a ~ π_{θ|z_i}} [½ ∇_θ (log π_θ̄(a|s_i) - log π_{θ_old|z_i}(a|s_i))²]`,
/// the gradient the mean-policy penalty realizes.
///
/// `baseline`, when given, adds `b_i ∇_θ log π_θ̄(a|s_i)` per state: a
/// mask-only constant inside the cross term, which leaves the expectation
/// unchanged when sampling from the mean policy.
#[allow(clippy::too_many_arguments)]
pub fn kl_first_order_grad_estimate(
    states: &[Vec<f64>],
    policy: &PolicyNet,
    old_policy: &PolicyNet,
    dropout: &DropoutDistribution,
    masks: &[DropoutMask],
    samples: usize,
    baseline: Option<&[f64]>,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    if states.len() != masks.len() {
        return Err(Error::Length(format!("{} states, {} masks", states.len(), masks.len())));
    }
    let layout = policy.hidden_layout();
    let obs_dim = policy.obs_dim();
    let act_dim = policy.act_dim();
    let rows = states.len() * samples;
    let mut obs = Vec::with_capacity(rows * obs_dim);
    let mut actions = Vec::with_capacity(rows * act_dim);
    let mut old_logp = Vec::with_capacity(rows);
    let mut weights = Vec::with_capacity(rows);
    for (i, (s, mask)) in states.iter().zip(masks).enumerate() {
        let act_dist = policy.forward_mask(s, mask)?;
        let old_dist = old_policy.forward_mask(s, mask)?;
        for _ in 0..samples {
            let a = act_dist.sample(rng);
            obs.extend_from_slice(s);
            old_logp.push(old_dist.log_prob(&a));
            actions.extend(a);
            weights.push(baseline.map_or(0.0, |b| b[i]));
        }
    }
    let mut g = Graph::new();
    let pv = policy.bind(&mut g, true);
    let x = g.constant(Tensor::matrix(rows, obs_dim, obs)?);
    let mean_mask = dropout.mean_mask().values();
    let masks_bar: Vec<Option<Var>> = split_mask(&mean_mask, &layout)?
        .into_iter()
        .map(|part| {
            let rep: Vec<f64> = (0..rows).flat_map(|_| part.iter().copied()).collect();
            Ok(Some(g.constant(Tensor::matrix(rows, part.len(), rep)?)))
        })
        .collect::<Result<_>>()?;
    let mean_bar = policy.forward_graph(&mut g, &pv, x, &masks_bar)?;
    let logp = log_prob_graph(&mut g, mean_bar, pv.log_std, &actions)?;
    let old = g.constant(Tensor::column(old_logp));
    let d = g.sub(logp, old)?;
    let sq = g.square(d);
    let half = g.scale(sq, 0.5);
    let b = g.constant(Tensor::column(weights));
    let cross = g.mul(b, logp)?;
    let per_row = g.add(half, cross)?;
    let root = g.mean(per_row);
    g.backward(root)?;
    Ok(policy.grads(&g, &pv))
}

/// Adam with bias correction; minimizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub stepsize: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(len: usize, stepsize: f64) -> Self {
        Adam {
            stepsize,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        adam_step(
            params,
            grads,
            &mut self.m,
            &mut self.v,
            &mut self.t,
            self.stepsize,
            self.beta1,
            self.beta2,
            self.eps,
        )
    }
}

/// One Adam update of `params` against loss gradient `grads`.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: &mut u64,
    stepsize: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || m.len() != n || v.len() != n {
        return Err(Error::Shape {
            op: "adam_step",
            left: vec![n],
            right: vec![grads.len(), m.len(), v.len()],
        });
    }
    *t += 1;
    let bc1 = 1.0 - beta1.powi(*t as i32);
    let bc2 = 1.0 - beta2.powi(*t as i32);
    for i in 0..n {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grads[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grads[i] * grads[i];
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        params[i] -= stepsize * mh / (vh.sqrt() + eps);
    }
    Ok(())
}
