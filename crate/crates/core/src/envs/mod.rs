//! Point-mass control tasks with a scripted expert.

mod demos;

pub use demos::{demos_read, demos_write, generate_demos, DemoDataset};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvName {
    #[serde(rename = "pointmass2d-dense")]
    Pointmass2dDense,
    #[serde(rename = "pointmass2d-sparse")]
    Pointmass2dSparse,
    #[serde(rename = "corridor1d")]
    Corridor1d,
}

impl EnvName {
    pub const ALL: [EnvName; 3] = [
        EnvName::Pointmass2dDense,
        EnvName::Pointmass2dSparse,
        EnvName::Corridor1d,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvName::Pointmass2dDense => "pointmass2d-dense",
            EnvName::Pointmass2dSparse => "pointmass2d-sparse",
            EnvName::Corridor1d => "corridor1d",
        }
    }
}

impl fmt::Display for EnvName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnvName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::Domain(format!("unknown environment {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    /// `−‖pos − goal‖`, no early termination.
    DenseDistance,
    /// 1 on entering the goal region, which also ends the episode.
    Binary,
}

/// Double-integrator task. The state is `[positions.., velocities..]` with
/// one position and one velocity per action dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub name: EnvName,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub episode_len: usize,
    pub mass: f64,
    pub damping: f64,
    pub dt: f64,
    pub goal: Vec<f64>,
    pub goal_radius: f64,
    pub reward: RewardKind,
    /// Positions are clamped to `[-workspace, workspace]`.
    pub workspace: f64,
    pub start_low: Vec<f64>,
    pub start_high: Vec<f64>,
    pub expert_kp: f64,
    pub expert_kd: f64,
}

impl EnvSpec {
    pub fn named(name: EnvName) -> Self {
        match name {
            EnvName::Pointmass2dDense | EnvName::Pointmass2dSparse => {
                let sparse = name == EnvName::Pointmass2dSparse;
                EnvSpec {
                    name,
                    action_low: vec![-1.0; 2],
                    action_high: vec![1.0; 2],
                    episode_len: if sparse { 100 } else { 200 },
                    mass: 1.0,
                    damping: 0.05,
                    dt: 0.1,
                    goal: vec![0.75, 0.75],
                    goal_radius: 0.1,
                    reward: if sparse { RewardKind::Binary } else { RewardKind::DenseDistance },
                    workspace: 1.0,
                    start_low: vec![-0.85; 2],
                    start_high: vec![-0.65; 2],
                    expert_kp: 2.0,
                    expert_kd: 1.5,
                }
            }
            EnvName::Corridor1d => EnvSpec {
                name,
                action_low: vec![-1.0],
                action_high: vec![1.0],
                episode_len: 100,
                mass: 1.0,
                damping: 0.05,
                dt: 0.1,
                goal: vec![0.8],
                goal_radius: 0.1,
                reward: RewardKind::Binary,
                workspace: 1.0,
                start_low: vec![-0.1],
                start_high: vec![0.1],
                expert_kp: 2.0,
                expert_kd: 1.5,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.action_dim();
        let lens = [
            ("action_high", self.action_high.len()),
            ("goal", self.goal.len()),
            ("start_low", self.start_low.len()),
            ("start_high", self.start_high.len()),
        ];
        for (name, len) in lens {
            if len != k {
                return Err(Error::Domain(format!(
                    "env.{name} has {len} entries, expected {k}"
                )));
            }
        }
        if k == 0 {
            return Err(Error::Domain("env needs at least one action dimension".into()));
        }
        if self.episode_len == 0 {
            return Err(Error::Domain("env.episode_len must be at least 1".into()));
        }
        for (lo, hi) in self.action_low.iter().zip(&self.action_high) {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Domain("env action bounds must be finite with low < high".into()));
            }
        }
        for (lo, hi) in self.start_low.iter().zip(&self.start_high) {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Domain("env start bounds must be finite with low <= high".into()));
            }
        }
        if !(self.goal_radius.is_finite() && self.goal_radius > 0.0) {
            return Err(Error::Domain("env.goal_radius must be positive".into()));
        }
        if !(self.mass.is_finite() && self.mass > 0.0) {
            return Err(Error::Domain("env.mass must be positive".into()));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Domain("env.dt must be positive".into()));
        }
        if !(self.damping.is_finite() && (0.0..1.0).contains(&self.damping)) {
            return Err(Error::Domain("env.damping must lie in [0, 1)".into()));
        }
        if !(self.workspace.is_finite() && self.workspace > 0.0) {
            return Err(Error::Domain("env.workspace must be positive".into()));
        }
        if !self.goal.iter().chain(&[self.expert_kp, self.expert_kd]).all(|v| v.is_finite()) {
            return Err(Error::Domain("env goal and expert gains must be finite".into()));
        }
        Ok(())
    }

    pub fn action_dim(&self) -> usize {
        self.action_low.len()
    }

    pub fn state_dim(&self) -> usize {
        2 * self.action_dim()
    }

    /// Midpoint and half-width of the action box per dimension.
    pub fn action_center_half(&self) -> (Vec<f64>, Vec<f64>) {
        self.action_low
            .iter()
            .zip(&self.action_high)
            .map(|(lo, hi)| (0.5 * (lo + hi), 0.5 * (hi - lo)))
            .unzip()
    }

    pub fn clip_action(&self, a: &[f64]) -> (Vec<f64>, bool) {
        let mut clipped = false;
        let out = a
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(&v, (&lo, &hi))| {
                let c = v.clamp(lo, hi);
                clipped |= c != v;
                c
            })
            .collect();
        (out, clipped)
    }

    pub fn in_goal(&self, state: &[f64]) -> bool {
        self.goal_distance(state) <= self.goal_radius
    }

    pub fn goal_distance(&self, state: &[f64]) -> f64 {
        state[..self.action_dim()]
            .iter()
            .zip(&self.goal)
            .map(|(p, g)| (p - g) * (p - g))
            .sum::<f64>()
            .sqrt()
    }

    /// Uniform draw over the whole state box: positions in the workspace,
    /// velocities in `[-1, 1]`.
    pub fn sample_state_box<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let k = self.action_dim();
        (0..2 * k)
            .map(|i| {
                let w = if i < k { self.workspace } else { 1.0 };
                rng.random_range(-w..=w)
            })
            .collect()
    }

    pub fn sample_start<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut s: Vec<f64> = self
            .start_low
            .iter()
            .zip(&self.start_high)
            .map(|(&lo, &hi)| if lo < hi { rng.random_range(lo..=hi) } else { lo })
            .collect();
        s.extend(std::iter::repeat_n(0.0, self.action_dim()));
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: Vec<f64>,
    pub reward: f64,
    /// True termination (goal entry for binary rewards). Episode caps are a
    /// truncation handled by [`Episode`].
    pub done: bool,
    pub clipped: bool,
}

pub fn env_reset(spec: &EnvSpec, seed: u64) -> Vec<f64> {
    spec.sample_start(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// One explicit-Euler step of the double integrator. Pure.
pub fn env_step(spec: &EnvSpec, state: &[f64], action: &[f64]) -> Result<StepOutcome> {
    let k = spec.action_dim();
    if state.len() != 2 * k {
        return Err(Error::dim("env state", 2 * k, state.len()));
    }
    if action.len() != k {
        return Err(Error::dim("env action", k, action.len()));
    }
    if !state.iter().chain(action).all(|v| v.is_finite()) {
        return Err(Error::Domain("non-finite state or action".into()));
    }
    let (a, clipped) = spec.clip_action(action);
    let mut next = vec![0.0; 2 * k];
    for i in 0..k {
        let (p, v) = (state[i], state[k + i]);
        let mut p2 = p + spec.dt * v;
        let mut v2 = (1.0 - spec.damping) * v + spec.dt * a[i] / spec.mass;
        if p2.abs() > spec.workspace {
            p2 = p2.clamp(-spec.workspace, spec.workspace);
            v2 = 0.0;
        }
        next[i] = p2;
        next[k + i] = v2;
    }
    let inside = spec.in_goal(&next);
    let (reward, done) = match spec.reward {
        RewardKind::DenseDistance => (-spec.goal_distance(&next), false),
        RewardKind::Binary => (if inside { 1.0 } else { 0.0 }, inside),
    };
    Ok(StepOutcome {
        state: next,
        reward,
        done,
        clipped,
    })
}

/// PD controller toward the goal, clipped to the action box.
pub fn scripted_expert(spec: &EnvSpec, state: &[f64]) -> Vec<f64> {
    let k = spec.action_dim();
    let raw: Vec<f64> = (0..k)
        .map(|i| spec.expert_kp * (spec.goal[i] - state[i]) - spec.expert_kd * state[k + i])
        .collect();
    spec.clip_action(&raw).0
}

/// Episode bookkeeping over [`env_step`] with the time cap.
#[derive(Clone, Debug)]
pub struct Episode {
    state: Vec<f64>,
    t: usize,
    finished: bool,
    success: bool,
    episode_return: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeStep {
    pub next_state: Vec<f64>,
    pub reward: f64,
    /// Terminal for bootstrapping purposes.
    pub terminal: bool,
    /// Episode over (terminal or cap reached).
    pub finished: bool,
}

impl Episode {
    pub fn start<R: Rng + ?Sized>(spec: &EnvSpec, rng: &mut R) -> Self {
        Episode::from_state(spec.sample_start(rng))
    }

    pub fn from_state(state: Vec<f64>) -> Self {
        Episode {
            state,
            t: 0,
            finished: false,
            success: false,
            episode_return: 0.0,
        }
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn finished(&self) -> bool {
        self.finished
    }

    /// The final state lies inside the goal region.
    pub fn success(&self) -> bool {
        self.success
    }

    pub fn episode_return(&self) -> f64 {
        self.episode_return
    }

    pub fn step(&mut self, spec: &EnvSpec, action: &[f64]) -> Result<EpisodeStep> {
        if self.finished {
            return Err(Error::State("episode already finished".into()));
        }
        let out = env_step(spec, &self.state, action)?;
        self.t += 1;
        self.episode_return += out.reward;
        self.finished = out.done || self.t >= spec.episode_len;
        self.success = spec.in_goal(&out.state);
        self.state = out.state.clone();
        Ok(EpisodeStep {
            next_state: out.state,
            reward: out.reward,
            terminal: out.done,
            finished: self.finished,
        })
    }
}
