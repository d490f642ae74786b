//! Sampling and training loop.
//!
//! Each iteration collects `batch_steps` transitions from `num_envs` slots,
//! drawing a fresh exploration state (dropout mask or parameter
//! perturbation) whenever a slot starts an episode, then runs `epochs`
//! passes of Adam over the batch.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::fs::{self, File};
use std::hash::{Hash, Hasher};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExplorationMode, TrainConfig};
use crate::dropoutdist::{DropoutDistribution, DropoutKind, DropoutMask};
use crate::envs::{TrajectoryWriter, VectorEnv, VectorEnvSnapshot};
use crate::error::{Error, Result};
use crate::estimators::{self, Adam, Batch, DropoutPath, LossReport, LossSpec};
use crate::policy::{per_state_kl, ObsNormalizer, PolicyNet, ValueNet};
use crate::rng::{self, streams, StreamRng, StreamState};

/// Exploration state owned by one episode.
#[derive(Clone, Debug)]
pub struct EpisodeRecord {
    pub episode_id: u64,
    pub slot: usize,
    pub mask: Option<DropoutMask>,
    pub perturbation: Option<Arc<Vec<f64>>>,
    /// Row of the episode's first step in this rollout.
    pub first_row: usize,
}

impl EpisodeRecord {
    /// Bytes of exploration state stored for this episode.
    pub fn storage_bytes(&self) -> usize {
        self.mask.as_ref().map_or(0, DropoutMask::storage_bytes)
            + self.perturbation.as_ref().map_or(0, |p| p.len() * std::mem::size_of::<f64>())
    }
}

/// One batch of transitions, stored slot-major: all of slot 0's steps in
/// time order, then slot 1's, and so on.
#[derive(Clone, Debug, Default)]
pub struct Rollout {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub raw_obs: Vec<f64>,
    /// Observations as the policy saw them.
    pub obs: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub means: Vec<f64>,
    pub log_std: Vec<f64>,
    pub episode_ids: Vec<u64>,
    /// Hash of the exploration state that produced each action.
    pub state_hashes: Vec<u64>,
    /// `(start row, length)` of each slot's segment.
    pub segments: Vec<(usize, usize)>,
    /// Value of the observation following each segment (0 after a done).
    pub bootstrap_values: Vec<f64>,
    /// Episodes in order of first appearance.
    pub episodes: Vec<EpisodeRecord>,
    pub completed_returns: Vec<f64>,
    /// Mean KL between the acting policy and the unperturbed policy.
    pub exploration_kl: f64,
    /// Mean Euclidean distance between acting and unperturbed action means.
    pub action_distance: f64,
    pub mean_dropout_rate: f64,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn episode_index(&self) -> HashMap<u64, usize> {
        self.episodes
            .iter()
            .enumerate()
            .map(|(i, e)| (e.episode_id, i))
            .collect()
    }

    /// Mean exploration-state bytes per stored episode.
    pub fn storage_per_episode(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().map(EpisodeRecord::storage_bytes).sum::<usize>() as f64 / self.episodes.len() as f64
    }
}

/// Stable hash of a mask's bit pattern.
pub fn mask_hash(mask: &DropoutMask) -> u64 {
    let mut h = DefaultHasher::new();
    mask.to_bits().hash(&mut h);
    h.finish()
}

fn perturbation_hash(p: &[f64]) -> u64 {
    let mut h = DefaultHasher::new();
    for x in p {
        x.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Episode id with the mask or perturbation that episode used.
type EpisodeNoise = (u64, Option<DropoutMask>, Option<Arc<Vec<f64>>>);

#[derive(Clone, Debug)]
struct SlotState {
    episode_id: u64,
    mask: Option<DropoutMask>,
    mask_values: Option<Vec<f64>>,
    perturbation: Option<Arc<Vec<f64>>>,
    actor: Option<PolicyNet>,
    hash: u64,
    ret: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub env_steps: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_kl: f64,
    pub clip_frac: f64,
    pub mean_dropout_rate: f64,
    pub phi_grad_norm: f64,
    pub wallclock_s: f64,
}

pub const METRICS_HEADER: &str =
    "iteration,env_steps,mean_return,std_return,mean_kl,clip_frac,mean_dropout_rate,phi_grad_norm,wallclock_s";

impl IterationMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.iteration,
            self.env_steps,
            self.mean_return,
            self.std_return,
            self.mean_kl,
            self.clip_frac,
            self.mean_dropout_rate,
            self.phi_grad_norm,
            self.wallclock_s
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct UpdateStats {
    /// One report per epoch (the last minibatch of each epoch).
    pub reports: Vec<LossReport>,
    pub phi_grad_norm: f64,
}

impl UpdateStats {
    pub fn last(&self) -> Option<&LossReport> {
        self.reports.last()
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Version tag written into every checkpoint.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Per-slot exploration state at a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotSnapshot {
    pub episode_id: u64,
    pub mask: Option<DropoutMask>,
    pub perturbation: Option<Vec<f64>>,
    pub hash: u64,
    pub ret: f64,
}

/// Everything needed to resume a [`Trainer`] bit for bit.
///
/// The trajectory sink is not part of the state; reattach it after loading.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub seed: u64,
    pub policy: PolicyNet,
    pub value: ValueNet,
    pub dropout: Option<DropoutDistribution>,
    pub scale_snapshot: Vec<f64>,
    pub normalizer: ObsNormalizer,
    pub venv: VectorEnvSnapshot,
    pub act_rng: StreamState,
    pub explore_rng: StreamState,
    pub slots: Vec<SlotSnapshot>,
    pub adam_policy: Adam,
    pub adam_value: Adam,
    pub adam_dropout: Option<Adam>,
    pub param_noise_sigma: f64,
    pub iteration: usize,
    pub env_steps: usize,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let c: Checkpoint = serde_json::from_str(&text)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Invalid(format!(
                "{}: checkpoint version {} (expected {CHECKPOINT_VERSION})",
                path.display(),
                c.version
            )));
        }
        Ok(c)
    }
}

/// Complete training state for one seed.
pub struct Trainer {
    cfg: TrainConfig,
    seed: u64,
    policy: PolicyNet,
    value: ValueNet,
    dropout: Option<DropoutDistribution>,
    scale_snapshot: Arc<[f64]>,
    normalizer: ObsNormalizer,
    venv: VectorEnv,
    act_rng: StreamRng,
    explore_rng: StreamRng,
    slots: Vec<SlotState>,
    adam_policy: Adam,
    adam_value: Adam,
    adam_dropout: Option<Adam>,
    param_noise_sigma: f64,
    iteration: usize,
    env_steps: usize,
    trajectory: Option<TrajectoryWriter<BufWriter<File>>>,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if !cfg.batch_steps.is_multiple_of(cfg.num_envs) {
            return Err(Error::config(
                "batch_steps",
                cfg.batch_steps.to_string(),
                format!("must be a multiple of num_envs ({})", cfg.num_envs),
            ));
        }
        let obs_dim = cfg.env.obs_dim();
        let act_dim = cfg.env.act_dim();
        let mut init = rng::stream(seed, streams::INIT);
        let policy = PolicyNet::new(obs_dim, &cfg.hidden, act_dim, &mut init);
        let value = ValueNet::new(obs_dim, &cfg.hidden, &mut init);
        let dropout = match cfg.mode.dropout_kind() {
            Some(kind) => Some(DropoutDistribution::uniform(kind, cfg.hidden.clone(), cfg.dropout_rate)?),
            None => None,
        };
        let scale_snapshot: Arc<[f64]> = Arc::from(dropout.as_ref().map_or(&[][..], |d| d.params()));
        let adam_dropout = match cfg.mode {
            ExplorationMode::Nadpex(_) => dropout.as_ref().map(|d| Adam::new(d.len(), cfg.dropout_stepsize)),
            _ => None,
        };
        let venv = VectorEnv::new(cfg.env, cfg.variant, cfg.horizon(), cfg.num_envs, seed)?;
        let mut t = Trainer {
            adam_policy: Adam::new(policy.num_params(), cfg.stepsize),
            adam_value: Adam::new(value.num_params(), cfg.stepsize),
            adam_dropout,
            normalizer: ObsNormalizer::new(obs_dim, cfg.normalize_obs),
            act_rng: rng::stream(seed, streams::ACTIONS),
            explore_rng: rng::stream(seed, streams::EXPLORATION),
            param_noise_sigma: cfg.param_noise_sigma,
            cfg: cfg.clone(),
            seed,
            policy,
            value,
            dropout,
            scale_snapshot,
            venv,
            slots: Vec::new(),
            iteration: 0,
            env_steps: 0,
            trajectory: None,
        };
        let ids = t.venv.episode_ids().to_vec();
        t.slots = ids.into_iter().map(|id| t.new_slot_state(id)).collect();
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn policy(&self) -> &PolicyNet {
        &self.policy
    }

    pub fn policy_mut(&mut self) -> &mut PolicyNet {
        &mut self.policy
    }

    pub fn value(&self) -> &ValueNet {
        &self.value
    }

    pub fn dropout(&self) -> Option<&DropoutDistribution> {
        self.dropout.as_ref()
    }

    pub fn normalizer(&self) -> &ObsNormalizer {
        &self.normalizer
    }

    pub fn param_noise_sigma(&self) -> f64 {
        self.param_noise_sigma
    }

    pub fn env_steps(&self) -> usize {
        self.env_steps
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.cfg.clone(),
            seed: self.seed,
            policy: self.policy.clone(),
            value: self.value.clone(),
            dropout: self.dropout.clone(),
            scale_snapshot: self.scale_snapshot.to_vec(),
            normalizer: self.normalizer.clone(),
            venv: self.venv.snapshot(),
            act_rng: StreamState::capture(&self.act_rng),
            explore_rng: StreamState::capture(&self.explore_rng),
            slots: self
                .slots
                .iter()
                .map(|s| SlotSnapshot {
                    episode_id: s.episode_id,
                    mask: s.mask.clone(),
                    perturbation: s.perturbation.as_ref().map(|p| p.to_vec()),
                    hash: s.hash,
                    ret: s.ret,
                })
                .collect(),
            adam_policy: self.adam_policy.clone(),
            adam_value: self.adam_value.clone(),
            adam_dropout: self.adam_dropout.clone(),
            param_noise_sigma: self.param_noise_sigma,
            iteration: self.iteration,
            env_steps: self.env_steps,
        }
    }

    pub fn from_checkpoint(c: Checkpoint) -> Result<Self> {
        c.config.validate()?;
        let venv = VectorEnv::from_snapshot(&c.venv)?;
        if c.slots.len() != venv.len() || venv.len() != c.config.num_envs {
            return Err(Error::Invalid("checkpoint slot count does not match num_envs".into()));
        }
        if c.policy.num_params() != c.adam_policy.m.len() || c.value.num_params() != c.adam_value.m.len() {
            return Err(Error::Invalid("checkpoint optimizer state does not match the networks".into()));
        }
        let slots = c
            .slots
            .into_iter()
            .map(|s| SlotState {
                episode_id: s.episode_id,
                mask_values: s.mask.as_ref().map(DropoutMask::values),
                mask: s.mask,
                perturbation: s.perturbation.map(Arc::new),
                actor: None,
                hash: s.hash,
                ret: s.ret,
            })
            .collect();
        Ok(Trainer {
            cfg: c.config,
            seed: c.seed,
            policy: c.policy,
            value: c.value,
            dropout: c.dropout,
            scale_snapshot: Arc::from(c.scale_snapshot),
            normalizer: c.normalizer,
            venv,
            act_rng: c.act_rng.restore(),
            explore_rng: c.explore_rng.restore(),
            slots,
            adam_policy: c.adam_policy,
            adam_value: c.adam_value,
            adam_dropout: c.adam_dropout,
            param_noise_sigma: c.param_noise_sigma,
            iteration: c.iteration,
            env_steps: c.env_steps,
            trajectory: None,
        })
    }

    /// Write every collected step to `path` as CSV.
    pub fn dump_trajectories(&mut self, path: &Path) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        self.trajectory = Some(TrajectoryWriter::new(file, self.cfg.env)?);
        Ok(())
    }

    fn perturbation_len(&self) -> usize {
        self.policy.mlp().num_params()
    }

    fn new_slot_state(&mut self, episode_id: u64) -> SlotState {
        let mut s = SlotState {
            episode_id,
            mask: None,
            mask_values: None,
            perturbation: None,
            actor: None,
            hash: 0,
            ret: 0.0,
        };
        if let Some(d) = &self.dropout {
            let mask = d.sample_shared(episode_id, &self.scale_snapshot, &mut self.explore_rng);
            s.hash = mask_hash(&mask);
            s.mask_values = Some(mask.values());
            s.mask = Some(mask);
        } else if self.cfg.mode == ExplorationMode::ParameterNoise {
            let n = self.perturbation_len();
            let sigma = self.param_noise_sigma;
            let noise: Vec<f64> = (0..n).map(|_| sigma * rng::normal(&mut self.explore_rng)).collect();
            s.hash = perturbation_hash(&noise);
            s.perturbation = Some(Arc::new(noise));
        }
        s
    }

    fn refresh_actor(&self, slot: &mut SlotState) -> Result<()> {
        if let Some(p) = &slot.perturbation {
            slot.actor = Some(self.policy.perturbed(p)?);
        }
        Ok(())
    }

    /// Collect one batch with the current parameters.
    pub fn collect_batch(&mut self) -> Result<Rollout> {
        let n_slots = self.cfg.num_envs;
        let per_slot = self.cfg.batch_steps / n_slots;
        let obs_dim = self.cfg.env.obs_dim();
        let act_dim = self.cfg.env.act_dim();
        let mut slots = std::mem::take(&mut self.slots);
        for s in &mut slots {
            self.refresh_actor(s)?;
        }
        let mean_mask = self.dropout.as_ref().map(|d| d.mean_mask().values());

        struct Buf {
            raw: Vec<f64>,
            obs: Vec<f64>,
            actions: Vec<f64>,
            rewards: Vec<f64>,
            logp: Vec<f64>,
            values: Vec<f64>,
            dones: Vec<bool>,
            means: Vec<f64>,
            ids: Vec<u64>,
            hashes: Vec<u64>,
            episodes: Vec<EpisodeNoise>,
        }
        let mut bufs: Vec<Buf> = (0..n_slots)
            .map(|_| Buf {
                raw: Vec::with_capacity(per_slot * obs_dim),
                obs: Vec::with_capacity(per_slot * obs_dim),
                actions: Vec::with_capacity(per_slot * act_dim),
                rewards: Vec::with_capacity(per_slot),
                logp: Vec::with_capacity(per_slot),
                values: Vec::with_capacity(per_slot),
                dones: Vec::with_capacity(per_slot),
                means: Vec::with_capacity(per_slot * act_dim),
                ids: Vec::with_capacity(per_slot),
                hashes: Vec::with_capacity(per_slot),
                episodes: Vec::new(),
            })
            .collect();
        let mut completed = Vec::new();
        let mut kl_sum = 0.0;
        let mut dist_sum = 0.0;
        let log_std = self.policy.log_std().to_vec();

        for _ in 0..per_slot {
            let mut actions = Vec::with_capacity(n_slots);
            let mut pre_states = Vec::with_capacity(n_slots);
            for (i, s) in slots.iter().enumerate() {
                let raw = &self.venv.observations()[i];
                let x = self.normalizer.normalize(raw);
                let actor = s.actor.as_ref().unwrap_or(&self.policy);
                let dist = actor.forward_policy(&x, s.mask_values.as_deref())?;
                let a = dist.sample(&mut self.act_rng);
                let b = &mut bufs[i];
                if b.episodes.last().map(|e| e.0) != Some(s.episode_id) {
                    b.episodes.push((s.episode_id, s.mask.clone(), s.perturbation.clone()));
                }
                if mean_mask.is_some() || s.actor.is_some() {
                    let base = self.policy.forward_policy(&x, mean_mask.as_deref())?;
                    kl_sum += per_state_kl(&dist, &base);
                    dist_sum += dist
                        .mean
                        .iter()
                        .zip(&base.mean)
                        .map(|(p, q)| (p - q) * (p - q))
                        .sum::<f64>()
                        .sqrt();
                }
                b.logp.push(dist.log_prob(&a));
                b.values.push(self.value.value_row(&x));
                b.raw.extend_from_slice(raw);
                b.obs.extend_from_slice(&x);
                b.means.extend_from_slice(&dist.mean);
                b.actions.extend_from_slice(&a);
                b.ids.push(s.episode_id);
                b.hashes.push(s.hash);
                pre_states.push((self.venv.envs()[i].state(), self.venv.envs()[i].step_count()));
                actions.push(a);
            }
            let steps = self.venv.step(&actions)?;
            for (i, st) in steps.into_iter().enumerate() {
                if let Some(w) = &mut self.trajectory {
                    let (state, t) = pre_states[i];
                    w.record(
                        st.episode_id,
                        t,
                        &state,
                        &actions[i],
                        st.result.reward,
                        st.result.done,
                    )?;
                }
                let b = &mut bufs[i];
                b.rewards.push(st.result.reward);
                b.dones.push(st.result.done);
                slots[i].ret += st.result.reward;
                if let Some(boundary) = st.boundary {
                    completed.push(slots[i].ret);
                    let mut fresh = self.new_slot_state(boundary.started);
                    self.refresh_actor(&mut fresh)?;
                    slots[i] = fresh;
                }
            }
            self.env_steps += n_slots;
        }
        if let Some(w) = &mut self.trajectory {
            w.flush()?;
        }

        let mut r = Rollout {
            obs_dim,
            act_dim,
            log_std,
            ..Default::default()
        };
        for (i, b) in bufs.into_iter().enumerate() {
            let start = r.rewards.len();
            r.segments.push((start, b.rewards.len()));
            let boot = if b.dones.last().copied().unwrap_or(true) {
                0.0
            } else {
                let x = self.normalizer.normalize(&self.venv.observations()[i]);
                self.value.value_row(&x)
            };
            r.bootstrap_values.push(boot);
            for (id, mask, pert) in b.episodes {
                let first = start + b.ids.iter().position(|&e| e == id).unwrap_or(0);
                r.episodes.push(EpisodeRecord {
                    episode_id: id,
                    slot: i,
                    mask,
                    perturbation: pert,
                    first_row: first,
                });
            }
            r.raw_obs.extend(b.raw);
            r.obs.extend(b.obs);
            r.actions.extend(b.actions);
            r.rewards.extend(b.rewards);
            r.log_probs.extend(b.logp);
            r.values.extend(b.values);
            r.dones.extend(b.dones);
            r.means.extend(b.means);
            r.episode_ids.extend(b.ids);
            r.state_hashes.extend(b.hashes);
        }
        let n = r.len().max(1) as f64;
        r.exploration_kl = kl_sum / n;
        r.action_distance = dist_sum / n;
        r.completed_returns = completed;
        r.mean_dropout_rate = self.dropout.as_ref().map_or(0.0, |d| d.mean_rate());
        self.slots = slots;

        if let Some(limit) = self.cfg.param_noise_capacity {
            let needed: usize = r.episodes.iter().map(EpisodeRecord::storage_bytes).sum();
            if needed > limit {
                return Err(Error::Capacity { needed, limit });
            }
        }
        Ok(r)
    }

    /// Assemble the update batch: GAE per segment, per-episode initial
    /// advantages with a cross-episode mean baseline, optional step-level
    /// normalization.
    pub fn build_batch(&self, r: &Rollout) -> Result<Batch> {
        let mut advantages = Vec::with_capacity(r.len());
        let mut returns = Vec::with_capacity(r.len());
        for (k, &(start, len)) in r.segments.iter().enumerate() {
            let mut values = r.values[start..start + len].to_vec();
            values.push(r.bootstrap_values[k]);
            let set = estimators::gae(
                &r.rewards[start..start + len],
                &values,
                &r.dones[start..start + len],
                self.cfg.gamma,
                self.cfg.lambda,
            )?;
            advantages.extend(set.advantages);
            returns.extend(set.returns);
        }
        let index = r.episode_index();
        let episode_of_step = r
            .episode_ids
            .iter()
            .map(|id| {
                index
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Integrity(format!("step references unknown episode {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut episode_advantages: Vec<f64> = r.episodes.iter().map(|e| advantages[e.first_row]).collect();
        estimators::subtract_mean(&mut episode_advantages);
        if self.cfg.normalize_advantages {
            estimators::normalize(&mut advantages);
        }
        let masks = if self.dropout.is_some() {
            r.episodes
                .iter()
                .map(|e| {
                    e.mask
                        .clone()
                        .ok_or_else(|| Error::Integrity(format!("episode {} has no stored mask", e.episode_id)))
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let perturbations = if self.cfg.mode == ExplorationMode::ParameterNoise {
            r.episodes
                .iter()
                .map(|e| e.perturbation.as_ref().map(|p| p.to_vec()))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| Error::Integrity("episode without stored perturbation".into()))?
        } else {
            Vec::new()
        };
        Ok(Batch {
            obs_dim: r.obs_dim,
            act_dim: r.act_dim,
            obs: r.obs.clone(),
            actions: r.actions.clone(),
            old_log_probs: r.log_probs.clone(),
            old_means: r.means.clone(),
            old_log_std: r.log_std.clone(),
            advantages,
            returns,
            old_values: r.values.clone(),
            episode_of_step,
            masks,
            perturbations,
            episode_advantages,
        })
    }

    pub fn loss_spec(&self) -> LossSpec {
        let path = match self.cfg.mode {
            ExplorationMode::Nadpex(DropoutKind::Bernoulli) => DropoutPath::Score,
            ExplorationMode::Nadpex(DropoutKind::Gaussian) => DropoutPath::Reparam,
            ExplorationMode::Bootstrap(_) => DropoutPath::Frozen,
            ExplorationMode::ActionNoiseOnly | ExplorationMode::ParameterNoise => DropoutPath::None,
        };
        LossSpec {
            surrogate: self.cfg.surrogate_spec(),
            dropout: path,
            value_coef: self.cfg.value_coef,
            value_clip: self.cfg.value_clip,
        }
    }

    /// Full update from a rollout: refresh observation statistics, then
    /// optimize on the batch, then adapt parameter noise.
    pub fn update(&mut self, r: &Rollout) -> Result<UpdateStats> {
        let batch = self.build_batch(r)?;
        let stats = self.update_on_batch(&batch)?;
        self.normalizer.update(&r.raw_obs);
        if self.cfg.mode == ExplorationMode::ParameterNoise && self.cfg.param_noise_adapt {
            let target = self.policy.log_std().iter().map(|l| l.exp()).sum::<f64>() / self.cfg.env.act_dim() as f64;
            if r.action_distance < target {
                self.param_noise_sigma *= 1.01;
            } else {
                self.param_noise_sigma /= 1.01;
            }
        }
        self.iteration += 1;
        Ok(stats)
    }

    /// `epochs` passes over `batch` split into `minibatches` contiguous chunks.
    pub fn update_on_batch(&mut self, batch: &Batch) -> Result<UpdateStats> {
        let spec = self.loss_spec();
        let chunks = split_batch(batch, self.cfg.minibatches)?;
        let mut stats = UpdateStats::default();
        let mut norm_sum = 0.0;
        let mut norm_count = 0usize;
        for epoch in 0..self.cfg.epochs {
            let mut last = None;
            for mb in &chunks {
                let g = estimators::compute_gradients(mb, &self.policy, &self.value, self.dropout.as_ref(), &spec)?;
                let finite = g.report.total.is_finite()
                    && g.policy.iter().all(|x| x.is_finite())
                    && g.value.iter().all(|x| x.is_finite())
                    && g.dropout.as_ref().is_none_or(|d| d.iter().all(|x| x.is_finite()));
                if !finite {
                    let snapshot = serde_json::to_string(&g.report)?;
                    return Err(Error::NonFinite {
                        iteration: self.iteration,
                        epoch,
                        snapshot,
                    });
                }
                let mut theta = self.policy.flat();
                let descent: Vec<f64> = g.policy.iter().map(|x| -x).collect();
                self.adam_policy.step(&mut theta, &descent)?;
                self.policy.set_flat(&theta)?;
                let mut w = self.value.flat();
                self.adam_value.step(&mut w, &g.value)?;
                self.value.set_flat(&w)?;
                if let (Some(grad), Some(adam), Some(d)) = (&g.dropout, &mut self.adam_dropout, &mut self.dropout) {
                    norm_sum += grad.iter().map(|x| x * x).sum::<f64>().sqrt();
                    norm_count += 1;
                    let mut u = d.unconstrained();
                    let descent: Vec<f64> = grad.iter().map(|x| -x).collect();
                    adam.step(&mut u, &descent)?;
                    d.set_unconstrained(&u)?;
                }
                last = Some(g.report);
            }
            stats.reports.extend(last);
        }
        if let Some(d) = &self.dropout {
            self.scale_snapshot = Arc::from(d.params());
        }
        stats.phi_grad_norm = if norm_count > 0 { norm_sum / norm_count as f64 } else { 0.0 };
        Ok(stats)
    }

    /// Largest deviation between stored log-probs and a recomputation from
    /// the stored observation, action and exploration state.
    pub fn verify_log_probs(&self, r: &Rollout) -> Result<f64> {
        let index = r.episode_index();
        let mut worst: f64 = 0.0;
        for row in 0..r.len() {
            let e = &r.episodes[index[&r.episode_ids[row]]];
            let x = &r.obs[row * r.obs_dim..(row + 1) * r.obs_dim];
            let a = &r.actions[row * r.act_dim..(row + 1) * r.act_dim];
            let dist = match (&e.mask, &e.perturbation) {
                (Some(m), _) => self.policy.forward_mask(x, m)?,
                (None, Some(p)) => self.policy.perturbed(p)?.forward_policy(x, None)?,
                (None, None) => self.policy.forward_policy(x, None)?,
            };
            worst = worst.max((dist.log_prob(a) - r.log_probs[row]).abs());
        }
        Ok(worst)
    }

    /// Metrics row for a collected batch and the update that followed it.
    pub fn metrics(&self, iteration: usize, r: &Rollout, stats: Option<&UpdateStats>, wallclock: f64) -> IterationMetrics {
        let (mean_return, std_return) = mean_std(&r.completed_returns);
        let last = stats.and_then(UpdateStats::last);
        IterationMetrics {
            iteration,
            env_steps: self.env_steps,
            mean_return,
            std_return,
            mean_kl: r.exploration_kl,
            clip_frac: last.map_or(0.0, |l| l.clip_fraction),
            mean_dropout_rate: r.mean_dropout_rate,
            phi_grad_norm: stats.map_or(0.0, |s| s.phi_grad_norm),
            wallclock_s: if self.cfg.record_wallclock { wallclock } else { 0.0 },
        }
    }
}

/// Split rows into `k` contiguous chunks, re-indexing the episode tables.
pub fn split_batch(batch: &Batch, k: usize) -> Result<Vec<Batch>> {
    if k <= 1 {
        return Ok(vec![batch.clone()]);
    }
    let n = batch.len();
    let mut out = Vec::with_capacity(k);
    for c in 0..k {
        let (lo, hi) = (c * n / k, (c + 1) * n / k);
        if lo == hi {
            continue;
        }
        let mut remap: HashMap<usize, usize> = HashMap::new();
        let mut order = Vec::new();
        let episode_of_step: Vec<usize> = batch.episode_of_step[lo..hi]
            .iter()
            .map(|&e| {
                *remap.entry(e).or_insert_with(|| {
                    order.push(e);
                    order.len() - 1
                })
            })
            .collect();
        let pick = |xs: &[f64], w: usize| xs[lo * w..hi * w].to_vec();
        out.push(Batch {
            obs_dim: batch.obs_dim,
            act_dim: batch.act_dim,
            obs: pick(&batch.obs, batch.obs_dim),
            actions: pick(&batch.actions, batch.act_dim),
            old_log_probs: pick(&batch.old_log_probs, 1),
            old_means: pick(&batch.old_means, batch.act_dim),
            old_log_std: batch.old_log_std.clone(),
            advantages: pick(&batch.advantages, 1),
            returns: pick(&batch.returns, 1),
            old_values: pick(&batch.old_values, 1),
            episode_of_step,
            masks: if batch.masks.is_empty() {
                Vec::new()
            } else {
                order.iter().map(|&e| batch.masks[e].clone()).collect()
            },
            perturbations: if batch.perturbations.is_empty() {
                Vec::new()
            } else {
                order.iter().map(|&e| batch.perturbations[e].clone()).collect()
            },
            episode_advantages: order.iter().map(|&e| batch.episode_advantages[e]).collect(),
        });
    }
    Ok(out)
}

/// Number of metrics rows a configuration produces per seed.
pub fn total_rows(cfg: &TrainConfig) -> usize {
    (cfg.total_steps / cfg.batch_steps).max(1)
}

/// Run rows `rows` of a `total`-row schedule: collect, record, and update
/// unless the row is the last one. Returns the rows plus a checkpoint taken
/// just before the final collect, which resumes with `checkpoint.iteration..`.
pub fn run_rows(
    trainer: &mut Trainer,
    rows: std::ops::Range<usize>,
    total: usize,
) -> Result<(Vec<IterationMetrics>, Checkpoint)> {
    let start = Instant::now();
    let mut out = Vec::with_capacity(rows.len());
    let mut ckpt = trainer.checkpoint();
    for it in rows {
        if it + 1 == total {
            ckpt = trainer.checkpoint();
        }
        let rollout = trainer.collect_batch()?;
        let stats = if it + 1 < total { Some(trainer.update(&rollout)?) } else { None };
        out.push(trainer.metrics(it, &rollout, stats.as_ref(), start.elapsed().as_secs_f64()));
    }
    Ok((out, ckpt))
}

/// Train one seed; one metrics row per collected batch. Row 0 is the
/// initial policy; an update follows every row except the last.
pub fn train_seed(cfg: &TrainConfig, seed: u64, trajectory: Option<&Path>) -> Result<Vec<IterationMetrics>> {
    train_seed_checkpointed(cfg, seed, trajectory).map(|r| r.0)
}

/// [`train_seed`] that also returns the resume checkpoint from [`run_rows`].
pub fn train_seed_checkpointed(
    cfg: &TrainConfig,
    seed: u64,
    trajectory: Option<&Path>,
) -> Result<(Vec<IterationMetrics>, Checkpoint)> {
    let mut trainer = Trainer::new(cfg, seed)?;
    if let Some(p) = trajectory {
        trainer.dump_trajectories(p)?;
    }
    let total = total_rows(cfg);
    run_rows(&mut trainer, 0..total, total)
}

/// Continue a checkpointed run up to `cfg.total_steps` of its (possibly
/// edited) configuration. Only `total_steps` and `output_dir` may differ.
pub fn resume_seed(checkpoint: Checkpoint, total_steps: usize) -> Result<Vec<IterationMetrics>> {
    let mut trainer = Trainer::from_checkpoint(checkpoint)?;
    let mut cfg = trainer.config().clone();
    cfg.total_steps = total_steps;
    let total = total_rows(&cfg);
    let first = trainer.iteration();
    if first >= total {
        return Err(Error::config(
            "total_steps",
            total_steps.to_string(),
            format!("checkpoint is already at row {first}"),
        ));
    }
    run_rows(&mut trainer, first..total, total).map(|r| r.0)
}

/// Parse a file written by [`write_metrics_csv`].
pub fn read_metrics_csv(path: &Path) -> Result<Vec<IterationMetrics>> {
    let text = fs::read_to_string(path)?;
    parse_metrics_csv(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<IterationMetrics>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == METRICS_HEADER => {}
        other => {
            return Err(Error::Invalid(format!(
                "expected header `{METRICS_HEADER}`, found `{}`",
                other.unwrap_or("")
            )))
        }
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(Error::Invalid(format!("row {}: expected 9 fields, got {}", i + 1, f.len())));
            }
            let bad = |k: usize| Error::Invalid(format!("row {}: bad value `{}`", i + 1, f[k]));
            let int = |k: usize| f[k].trim().parse::<usize>().map_err(|_| bad(k));
            let float = |k: usize| f[k].trim().parse::<f64>().map_err(|_| bad(k));
            Ok(IterationMetrics {
                iteration: int(0)?,
                env_steps: int(1)?,
                mean_return: float(2)?,
                std_return: float(3)?,
                mean_kl: float(4)?,
                clip_frac: float(5)?,
                mean_dropout_rate: float(6)?,
                phi_grad_norm: float(7)?,
                wallclock_s: float(8)?,
            })
        })
        .collect()
}

pub fn write_metrics_csv(path: &Path, rows: &[IterationMetrics]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_row())?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub iteration: usize,
    pub env_steps: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_kl: f64,
    pub mean_dropout_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seeds: Vec<u64>,
    pub mode: String,
    pub env: String,
    pub variant: String,
    /// Per-iteration mean ± std across seeds of each seed's mean return.
    pub iterations: Vec<SummaryRow>,
}

/// Aggregate per-seed metrics; requires aligned iteration grids.
pub fn summarize(cfg: &TrainConfig, runs: &[(u64, Vec<IterationMetrics>)]) -> Result<Summary> {
    let first = runs.first().ok_or_else(|| Error::config("seeds", "", "need at least one seed"))?;
    let len = first.1.len();
    if runs.iter().any(|(_, r)| r.len() != len) {
        return Err(Error::Invalid("seed runs have different iteration counts".into()));
    }
    let iterations = (0..len)
        .map(|i| {
            let col = |f: fn(&IterationMetrics) -> f64| -> Vec<f64> { runs.iter().map(|(_, r)| f(&r[i])).collect() };
            let (m, s) = mean_std(&col(|m| m.mean_return));
            SummaryRow {
                iteration: i,
                env_steps: first.1[i].env_steps,
                mean_return: m,
                std_return: s,
                mean_kl: mean_std(&col(|m| m.mean_kl)).0,
                mean_dropout_rate: mean_std(&col(|m| m.mean_dropout_rate)).0,
            }
        })
        .collect();
    Ok(Summary {
        seeds: runs.iter().map(|r| r.0).collect(),
        mode: cfg.mode.name().into(),
        env: cfg.env.name().into(),
        variant: cfg.variant.name().into(),
        iterations,
    })
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub runs: Vec<(u64, Vec<IterationMetrics>)>,
    pub summary: Summary,
}

/// Train every seed and write `config.echo`, `metrics_<seed>.csv` and
/// `summary.json` into the output directory.
pub fn run_experiment(cfg: &TrainConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.echo"), cfg.echo())?;
    let one = |seed: u64| -> Result<(u64, Vec<IterationMetrics>)> {
        let traj = cfg
            .dump_trajectories
            .then(|| dir.join(format!("trajectories_{seed}.csv")));
        let (rows, ckpt) = train_seed_checkpointed(cfg, seed, traj.as_deref())?;
        write_metrics_csv(&dir.join(format!("metrics_{seed}.csv")), &rows)?;
        ckpt.save(&dir.join(format!("checkpoint_{seed}.json")))?;
        Ok((seed, rows))
    };
    let runs: Vec<(u64, Vec<IterationMetrics>)> = if cfg.parallel_seeds {
        cfg.seeds.par_iter().map(|&s| one(s)).collect::<Result<_>>()?
    } else {
        cfg.seeds.iter().map(|&s| one(s)).collect::<Result<_>>()?
    };
    let summary = summarize(cfg, &runs)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    let arm = crate::plot::Arm::from_metrics(cfg.mode.name(), runs.iter().map(|r| r.1.as_slice()));
    let title = format!("{} {}", cfg.variant.name(), cfg.env.name());
    fs::write(dir.join("curves.svg"), crate::plot::render_curves(&[arm], &title)?)?;
    Ok(ExperimentResult { runs, summary })
}

/// Per-episode exploration bytes of the acting distribution, measured on
/// freshly sampled state for `cfg`'s network.
pub fn exploration_storage_bytes(cfg: &TrainConfig, seed: u64) -> Result<usize> {
    let t = Trainer::new(cfg, seed)?;
    Ok(t
        .slots
        .first()
        .map(|s| {
            s.mask.as_ref().map_or(0, DropoutMask::storage_bytes)
                + s.perturbation.as_ref().map_or(0, |p| p.len() * std::mem::size_of::<f64>())
        })
        .unwrap_or(0))
}
