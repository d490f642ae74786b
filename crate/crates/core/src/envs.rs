//! Continuous-control environments with dense and sparse reward variants.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, StreamRng, StreamState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvKind {
    MountainCar,
    Pendulum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Dense,
    Sparse,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::MountainCar => "mountaincar",
            EnvKind::Pendulum => "pendulum",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mountaincar" => Some(EnvKind::MountainCar),
            "pendulum" => Some(EnvKind::Pendulum),
            _ => None,
        }
    }

    pub fn obs_dim(self) -> usize {
        match self {
            EnvKind::MountainCar => 2,
            EnvKind::Pendulum => 3,
        }
    }

    pub fn act_dim(self) -> usize {
        1
    }

    /// Largest action magnitude; actions are clipped to `[-bound, bound]`.
    pub fn action_bound(self) -> f64 {
        match self {
            EnvKind::MountainCar => 1.0,
            EnvKind::Pendulum => 2.0,
        }
    }
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Dense => "dense",
            Variant::Sparse => "sparse",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dense" => Some(Variant::Dense),
            "sparse" => Some(Variant::Sparse),
            _ => None,
        }
    }

    pub fn default_horizon(self) -> usize {
        match self {
            Variant::Dense => 1000,
            Variant::Sparse => 500,
        }
    }
}

pub mod mountain_car {
    pub const MIN_POSITION: f64 = -1.2;
    pub const MAX_POSITION: f64 = 0.6;
    pub const MAX_SPEED: f64 = 0.07;
    pub const POWER: f64 = 0.0015;
    pub const GOAL: f64 = 0.45;
}

pub mod pendulum {
    pub const G: f64 = 10.0;
    pub const M: f64 = 1.0;
    pub const L: f64 = 1.0;
    pub const DT: f64 = 0.05;
    pub const MAX_SPEED: f64 = 8.0;
    pub const MAX_TORQUE: f64 = 2.0;
    pub const UPRIGHT_CONE: f64 = 0.2;
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub obs: Vec<f64>,
    pub reward: f64,
    /// Episode over, by horizon or by reaching a terminal milestone.
    pub done: bool,
    /// The milestone condition held after this step.
    pub milestone: bool,
}

/// `(x, v)` after one step, and whether the goal was reached.
pub fn mountain_car_step(x: f64, v: f64, action: f64, variant: Variant) -> (f64, f64, f64, bool) {
    use mountain_car::*;
    let a = action.clamp(-1.0, 1.0);
    let mut v2 = (v + POWER * a - 0.0025 * (3.0 * x).cos()).clamp(-MAX_SPEED, MAX_SPEED);
    let mut x2 = (x + v2).clamp(MIN_POSITION, MAX_POSITION);
    if x2 == MIN_POSITION && v2 < 0.0 {
        v2 = 0.0;
    }
    if x2 == MAX_POSITION && v2 > 0.0 {
        v2 = 0.0;
        x2 = MAX_POSITION;
    }
    let goal = x2 >= GOAL;
    let reward = match variant {
        Variant::Dense => -0.1 * a * a + if goal { 100.0 } else { 0.0 },
        Variant::Sparse => {
            if goal {
                1.0
            } else {
                0.0
            }
        }
    };
    (x2, v2, reward, goal)
}

/// Wrap an angle to `[-π, π)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let w = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// `(θ, θ̇)` after one step with `θ = 0` upright, plus reward and milestone.
pub fn pendulum_step(theta: f64, theta_dot: f64, torque: f64, variant: Variant) -> (f64, f64, f64, bool) {
    use pendulum::*;
    let u = torque.clamp(-MAX_TORQUE, MAX_TORQUE);
    let th = wrap_angle(theta);
    let cost = th * th + 0.1 * theta_dot * theta_dot + 0.001 * u * u;
    let acc = 3.0 * G / (2.0 * L) * theta.sin() + 3.0 / (M * L * L) * u;
    let new_dot = (theta_dot + acc * DT).clamp(-MAX_SPEED, MAX_SPEED);
    let new_theta = wrap_angle(theta + new_dot * DT);
    let upright = new_theta.abs() < UPRIGHT_CONE;
    let reward = match variant {
        Variant::Dense => -cost,
        Variant::Sparse => {
            if upright {
                1.0
            } else {
                0.0
            }
        }
    };
    (new_theta, new_dot, reward, upright)
}

/// One environment instance with its own reset stream.
#[derive(Clone, Debug)]
pub struct Env {
    kind: EnvKind,
    variant: Variant,
    horizon: usize,
    state: [f64; 2],
    t: usize,
    rng: StreamRng,
}

impl Env {
    pub fn new(kind: EnvKind, variant: Variant, horizon: usize, rng: StreamRng) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::config("horizon", "0", "must be at least 1"));
        }
        Ok(Env {
            kind,
            variant,
            horizon,
            state: [0.0; 2],
            t: 0,
            rng,
        })
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn step_count(&self) -> usize {
        self.t
    }

    /// Physical state: `(x, v)` or `(θ, θ̇)`.
    pub fn state(&self) -> [f64; 2] {
        self.state
    }

    pub fn set_state(&mut self, state: [f64; 2]) {
        self.state = state;
    }

    /// Put the environment at `state` with `t` steps already taken.
    pub fn restore(&mut self, state: [f64; 2], t: usize) {
        self.state = state;
        self.t = t;
    }

    pub fn rng(&self) -> &StreamRng {
        &self.rng
    }

    pub fn observation(&self) -> Vec<f64> {
        let [a, b] = self.state;
        match self.kind {
            EnvKind::MountainCar => vec![a, b],
            EnvKind::Pendulum => vec![a.cos(), a.sin(), b],
        }
    }

    pub fn reset(&mut self) -> Vec<f64> {
        self.t = 0;
        self.state = match self.kind {
            EnvKind::MountainCar => [rng::uniform(&mut self.rng, -0.6, -0.4), 0.0],
            EnvKind::Pendulum => [rng::uniform(&mut self.rng, -PI, PI), rng::uniform(&mut self.rng, -1.0, 1.0)],
        };
        self.observation()
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if action.len() != self.kind.act_dim() {
            return Err(Error::Shape {
                op: "env action",
                left: vec![action.len()],
                right: vec![self.kind.act_dim()],
            });
        }
        let [a, b] = self.state;
        let (a2, b2, reward, milestone) = match self.kind {
            EnvKind::MountainCar => mountain_car_step(a, b, action[0], self.variant),
            EnvKind::Pendulum => pendulum_step(a, b, action[0], self.variant),
        };
        self.state = [a2, b2];
        self.t += 1;
        let terminal = self.kind == EnvKind::MountainCar && milestone;
        Ok(StepResult {
            obs: self.observation(),
            reward,
            done: terminal || self.t >= self.horizon,
            milestone,
        })
    }
}

/// Emitted when a slot finishes an episode and starts the next.
#[derive(Clone, Debug, PartialEq)]
pub struct Boundary {
    pub finished: u64,
    pub started: u64,
    /// Observation that ended the finished episode.
    pub final_obs: Vec<f64>,
    pub final_milestone: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlotStep {
    /// `obs` is the next observation to act on (post-reset on a boundary).
    pub result: StepResult,
    pub episode_id: u64,
    pub boundary: Option<Boundary>,
}

/// Serializable copy of an [`Env`], including its reset stream position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSnapshot {
    pub kind: EnvKind,
    pub variant: Variant,
    pub horizon: usize,
    pub state: [f64; 2],
    pub t: usize,
    pub rng: StreamState,
}

impl Env {
    pub fn snapshot(&self) -> EnvSnapshot {
        EnvSnapshot {
            kind: self.kind,
            variant: self.variant,
            horizon: self.horizon,
            state: self.state,
            t: self.t,
            rng: StreamState::capture(&self.rng),
        }
    }

    pub fn from_snapshot(s: &EnvSnapshot) -> Result<Self> {
        let mut env = Env::new(s.kind, s.variant, s.horizon, s.rng.restore())?;
        env.restore(s.state, s.t);
        Ok(env)
    }
}

/// Serializable copy of a [`VectorEnv`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorEnvSnapshot {
    pub envs: Vec<EnvSnapshot>,
    pub episode_ids: Vec<u64>,
    pub next_episode: u64,
    pub obs: Vec<Vec<f64>>,
}

/// Fixed set of environment slots with auto-reset and global episode ids.
#[derive(Clone, Debug)]
pub struct VectorEnv {
    envs: Vec<Env>,
    episode_ids: Vec<u64>,
    next_episode: u64,
    obs: Vec<Vec<f64>>,
}

impl VectorEnv {
    /// Slot `i` draws resets from stream `ENV_RESET + i` of `seed`.
    pub fn new(kind: EnvKind, variant: Variant, horizon: usize, slots: usize, seed: u64) -> Result<Self> {
        if slots == 0 {
            return Err(Error::config("num_envs", "0", "must be at least 1"));
        }
        let envs = (0..slots)
            .map(|i| Env::new(kind, variant, horizon, rng::stream(seed, rng::streams::ENV_RESET + i as u64)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_envs(envs)
    }

    pub fn from_envs(mut envs: Vec<Env>) -> Result<Self> {
        if envs.is_empty() {
            return Err(Error::Invalid("vector env needs at least one slot".into()));
        }
        let obs = envs.iter_mut().map(Env::reset).collect();
        let n = envs.len() as u64;
        Ok(VectorEnv {
            episode_ids: (0..n).collect(),
            next_episode: n,
            envs,
            obs,
        })
    }

    pub fn snapshot(&self) -> VectorEnvSnapshot {
        VectorEnvSnapshot {
            envs: self.envs.iter().map(Env::snapshot).collect(),
            episode_ids: self.episode_ids.clone(),
            next_episode: self.next_episode,
            obs: self.obs.clone(),
        }
    }

    /// Rebuild without resetting; the slots continue exactly where the snapshot left them.
    pub fn from_snapshot(s: &VectorEnvSnapshot) -> Result<Self> {
        let n = s.envs.len();
        if n == 0 || s.episode_ids.len() != n || s.obs.len() != n {
            return Err(Error::Invalid("vector env snapshot has inconsistent slot counts".into()));
        }
        Ok(VectorEnv {
            envs: s.envs.iter().map(Env::from_snapshot).collect::<Result<_>>()?,
            episode_ids: s.episode_ids.clone(),
            next_episode: s.next_episode,
            obs: s.obs.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn envs(&self) -> &[Env] {
        &self.envs
    }

    pub fn observations(&self) -> &[Vec<f64>] {
        &self.obs
    }

    pub fn episode_ids(&self) -> &[u64] {
        &self.episode_ids
    }

    pub fn step(&mut self, actions: &[Vec<f64>]) -> Result<Vec<SlotStep>> {
        if actions.len() != self.envs.len() {
            return Err(Error::Length(format!(
                "{} action rows for {} environments",
                actions.len(),
                self.envs.len()
            )));
        }
        let mut out = Vec::with_capacity(self.envs.len());
        for (i, (env, action)) in self.envs.iter_mut().zip(actions).enumerate() {
            let mut result = env.step(action)?;
            let episode_id = self.episode_ids[i];
            let boundary = if result.done {
                let started = self.next_episode;
                self.next_episode += 1;
                self.episode_ids[i] = started;
                let fresh = env.reset();
                let final_obs = std::mem::replace(&mut result.obs, fresh);
                Some(Boundary {
                    finished: episode_id,
                    started,
                    final_obs,
                    final_milestone: result.milestone,
                })
            } else {
                None
            };
            self.obs[i] = result.obs.clone();
            out.push(SlotStep {
                result,
                episode_id,
                boundary,
            });
        }
        Ok(out)
    }
}

/// Per-step CSV dump: `episode_id, t, state..., action..., reward, done`.
pub struct TrajectoryWriter<W: Write> {
    out: W,
}

impl<W: Write> TrajectoryWriter<W> {
    pub fn new(mut out: W, kind: EnvKind) -> Result<Self> {
        let state: Vec<String> = (0..2).map(|i| format!("state{i}")).collect();
        let action: Vec<String> = (0..kind.act_dim()).map(|i| format!("action{i}")).collect();
        writeln!(out, "episode_id,t,{},{},reward,done", state.join(","), action.join(","))?;
        Ok(TrajectoryWriter { out })
    }

    pub fn record(&mut self, episode_id: u64, t: usize, state: &[f64], action: &[f64], reward: f64, done: bool) -> Result<()> {
        let cols: Vec<String> = state.iter().chain(action).map(|x| format!("{x:?}")).collect();
        writeln!(self.out, "{episode_id},{t},{},{reward:?},{}", cols.join(","), u8::from(done))?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Outcome of re-simulating a recorded trajectory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplaySummary {
    pub rows: usize,
    pub episodes: usize,
    /// Human-readable description of every disagreement.
    pub mismatches: Vec<String>,
}

impl ReplaySummary {
    pub fn is_exact(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Re-simulate every row of a [`TrajectoryWriter`] file from its recorded
/// state and action; rewards, done flags and successor states (the next
/// recorded row of the same episode) must match bit for bit.
pub fn replay_trajectory(text: &str, kind: EnvKind, variant: Variant, horizon: usize) -> Result<ReplaySummary> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Invalid("empty trajectory file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let want = 2 + 2 + kind.act_dim() + 2;
    if cols.len() != want || cols[0] != "episode_id" || cols[1] != "t" {
        return Err(Error::Invalid(format!("unexpected trajectory header `{header}`")));
    }
    let mut env = Env::new(kind, variant, horizon, rng::stream(0, 0))?;
    // episode -> (t of the last row, successor state it predicts)
    let mut pending: std::collections::BTreeMap<u64, (usize, [f64; 2])> = Default::default();
    let mut out = ReplaySummary::default();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != want {
            return Err(Error::Invalid(format!("line {row}: expected {want} fields, got {}", f.len())));
        }
        let bad = |k: usize| Error::Invalid(format!("line {row}: bad value `{}`", f[k]));
        let ep: u64 = f[0].parse().map_err(|_| bad(0))?;
        let t: usize = f[1].parse().map_err(|_| bad(1))?;
        let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad(k));
        let state = [num(2)?, num(3)?];
        let action: Vec<f64> = (0..kind.act_dim()).map(|j| num(4 + j)).collect::<Result<_>>()?;
        let reward = num(4 + kind.act_dim())?;
        let done = match f[5 + kind.act_dim()] {
            "0" => false,
            "1" => true,
            _ => return Err(bad(5 + kind.act_dim())),
        };

        match pending.get(&ep) {
            Some(&(prev_t, predicted)) if prev_t + 1 == t => {
                if predicted.map(f64::to_bits) != state.map(f64::to_bits) {
                    out.mismatches.push(format!(
                        "line {row}: episode {ep} t={t} state {state:?}, re-simulated {predicted:?}"
                    ));
                }
            }
            Some(&(prev_t, _)) => out.mismatches.push(format!(
                "line {row}: episode {ep} jumps from t={prev_t} to t={t}"
            )),
            None => out.episodes += 1,
        }

        env.restore(state, t);
        let step = env.step(&action)?;
        if step.reward.to_bits() != reward.to_bits() {
            out.mismatches.push(format!(
                "line {row}: episode {ep} t={t} reward {reward:?}, re-simulated {:?}",
                step.reward
            ));
        }
        if step.done != done {
            out.mismatches.push(format!("line {row}: episode {ep} t={t} done={done}, re-simulated {}", step.done));
        }
        if step.done {
            pending.remove(&ep);
        } else {
            pending.insert(ep, (t, env.state()));
        }
        out.rows += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mountain_car_force_free_point() {
        let x = PI / 6.0;
        let (_, v2, _, _) = mountain_car_step(x, 0.01, 0.0, Variant::Dense);
        assert!((v2 - 0.01).abs() < 1e-15);
    }

    #[test]
    fn mountain_car_at_rest() {
        let (_, v2, _, _) = mountain_car_step(-0.5, 0.0, 0.0, Variant::Sparse);
        let expected = -0.0025 * (-1.5f64).cos();
        assert_eq!(v2, expected);
        assert!((v2 + 0.000177).abs() < 1e-6);
    }

    #[test]
    fn mountain_car_rewards() {
        let (_, _, r, goal) = mountain_car_step(-0.5, 0.0, 0.5, Variant::Dense);
        assert!(!goal);
        assert!((r + 0.025).abs() < 1e-15);
        let (_, _, r, goal) = mountain_car_step(0.44, 0.05, 1.0, Variant::Dense);
        assert!(goal);
        assert!((r - 99.9).abs() < 1e-12);
        let (_, _, r, _) = mountain_car_step(0.44, 0.05, 1.0, Variant::Sparse);
        assert_eq!(r, 1.0);
    }

    #[test]
    fn pendulum_equilibria() {
        let (th, dot, _, up) = pendulum_step(0.0, 0.0, 0.0, Variant::Sparse);
        assert_eq!((th, dot), (0.0, 0.0));
        assert!(up);
        let (th, dot, r, _) = pendulum_step(-PI, 0.0, 0.0, Variant::Dense);
        assert!(dot.abs() < 1e-14);
        assert!((th.abs() - PI).abs() < 1e-12);
        assert!((r + PI * PI).abs() < 1e-12);
    }

    #[test]
    fn pendulum_one_step() {
        let (_, dot, _, _) = pendulum_step(0.1, 0.0, 0.0, Variant::Dense);
        let expected = 0.05 * 15.0 * 0.1f64.sin();
        assert_eq!(dot, expected);
        assert!((dot - 0.0749).abs() < 1e-4);
    }

    #[test]
    fn angle_wrapping() {
        assert_eq!(wrap_angle(PI), -PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(-0.5) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn reset_zeroes_step_counter() {
        let mut env = Env::new(EnvKind::Pendulum, Variant::Dense, 10, rng::stream(1, 5)).unwrap();
        env.reset();
        env.step(&[0.3]).unwrap();
        assert_eq!(env.step_count(), 1);
        env.reset();
        assert_eq!(env.step_count(), 0);
        assert!(env.step(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn trajectory_csv() {
        let mut w = TrajectoryWriter::new(Vec::new(), EnvKind::MountainCar).unwrap();
        w.record(3, 0, &[-0.5, 0.0], &[1.0], -0.1, false).unwrap();
        let text = String::from_utf8(w.into_inner()).unwrap();
        assert_eq!(text, "episode_id,t,state0,state1,action0,reward,done\n3,0,-0.5,0.0,1.0,-0.1,0\n");
    }
}
