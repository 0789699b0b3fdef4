//! Deterministic toy control tasks standing in for locomotion benchmarks.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    /// State `(pos x, pos y, vel x, vel y)`, force-controlled toward a goal.
    PointMass2d,
    /// Three coupled damped coordinates driven toward the origin.
    DampedChain,
}

impl FromStr for EnvKind {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "point-mass-2d" => Ok(EnvKind::PointMass2d),
            "damped-chain" => Ok(EnvKind::DampedChain),
            other => Err(DataError::InvalidArgument(format!(
                "unknown environment `{other}` (expected point-mass-2d or damped-chain)"
            ))),
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvKind::PointMass2d => "point-mass-2d",
            EnvKind::DampedChain => "damped-chain",
        })
    }
}

const DT: f64 = 0.1;
const KP: f64 = 5.0;
const KD: f64 = 2.0;
const CHAIN_LEN: usize = 3;
const CHAIN_COUPLING: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyEnv {
    pub kind: EnvKind,
    pub horizon: usize,
    pub action_bound: f64,
    pub goal: Vec<f64>,
    /// Per-coordinate damping (chain only).
    pub damping: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

impl ToyEnv {
    pub fn new(kind: EnvKind) -> Self {
        match kind {
            EnvKind::PointMass2d => Self {
                kind,
                horizon: 60,
                action_bound: 1.0,
                goal: vec![0.0, 0.0],
                damping: Vec::new(),
            },
            EnvKind::DampedChain => Self {
                kind,
                horizon: 60,
                action_bound: 1.0,
                goal: vec![0.0; CHAIN_LEN],
                damping: vec![0.1, 0.2, 0.3],
            },
        }
    }

    pub fn state_dim(&self) -> usize {
        match self.kind {
            EnvKind::PointMass2d => 4,
            EnvKind::DampedChain => CHAIN_LEN,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self.kind {
            EnvKind::PointMass2d => 2,
            EnvKind::DampedChain => CHAIN_LEN,
        }
    }

    /// Gaussian noise scale of the medium behaviour policy, calibrated so the
    /// generated data scores inside the one-third-of-expert band.
    pub fn default_medium_sigma(&self) -> f64 {
        match self.kind {
            EnvKind::PointMass2d => 1.07,
            EnvKind::DampedChain => 0.8,
        }
    }

    pub fn reset(&self, rng: &mut impl Rng) -> Vec<f64> {
        match self.kind {
            EnvKind::PointMass2d => vec![rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), 0.0, 0.0],
            EnvKind::DampedChain => (0..CHAIN_LEN).map(|_| rng.random_range(-1.0..=1.0)).collect(),
        }
    }

    pub fn clip_action(&self, a: &mut [f64]) {
        for v in a {
            *v = v.clamp(-self.action_bound, self.action_bound);
        }
    }

    /// Reward of taking `action` in `state`.
    pub fn reward(&self, state: &[f64]) -> f64 {
        match self.kind {
            EnvKind::PointMass2d => {
                let dx = state[0] - self.goal[0];
                let dy = state[1] - self.goal[1];
                -(dx * dx + dy * dy).sqrt()
            }
            EnvKind::DampedChain => -state.iter().map(|x| x * x).sum::<f64>(),
        }
    }

    /// Advances one step from time index `t`. Out-of-bound actions are clipped.
    pub fn step(&self, state: &[f64], action: &[f64], t: usize) -> Result<StepResult, DataError> {
        if state.len() != self.state_dim() {
            return Err(DataError::Dimension {
                what: "state",
                expected: self.state_dim(),
                got: state.len(),
            });
        }
        if action.len() != self.action_dim() {
            return Err(DataError::Dimension {
                what: "action",
                expected: self.action_dim(),
                got: action.len(),
            });
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(DataError::NonFiniteAction);
        }
        let mut a = action.to_vec();
        self.clip_action(&mut a);
        let reward = self.reward(state);
        let next_state = match self.kind {
            EnvKind::PointMass2d => vec![
                state[0] + DT * state[2],
                state[1] + DT * state[3],
                0.9 * state[2] + DT * a[0],
                0.9 * state[3] + DT * a[1],
            ],
            EnvKind::DampedChain => (0..CHAIN_LEN)
                .map(|i| {
                    let left = if i > 0 { state[i - 1] } else { 0.0 };
                    let right = if i + 1 < CHAIN_LEN { state[i + 1] } else { 0.0 };
                    let lap = left - 2.0 * state[i] + right;
                    state[i] + DT * (-self.damping[i] * state[i] + CHAIN_COUPLING * lap + a[i])
                })
                .collect(),
        };
        Ok(StepResult {
            next_state,
            reward,
            done: t + 1 >= self.horizon,
        })
    }

    /// Proportional-derivative controller toward the goal.
    pub fn expert_action(&self, state: &[f64]) -> Vec<f64> {
        let mut a = match self.kind {
            EnvKind::PointMass2d => (0..2)
                .map(|i| KP * (self.goal[i] - state[i]) - KD * state[2 + i])
                .collect(),
            EnvKind::DampedChain => state.iter().map(|x| -KP * x).collect::<Vec<_>>(),
        };
        self.clip_action(&mut a);
        a
    }

    pub fn random_action(&self, rng: &mut impl Rng) -> Vec<f64> {
        (0..self.action_dim())
            .map(|_| rng.random_range(-self.action_bound..=self.action_bound))
            .collect()
    }
}
