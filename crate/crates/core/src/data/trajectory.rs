use serde::{Deserialize, Serialize};

/// Suffix sums: `rtg[t] = rewards[t] + rtg[t + 1]`, `rtg[T] = 0`.
pub fn compute_rtg(rewards: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc += rewards[t];
        out[t] = acc;
    }
    out
}

/// One episode, stored as flat row-major arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub state_dim: usize,
    pub action_dim: usize,
    /// `[T, state_dim]`.
    pub states: Vec<f64>,
    /// `[T, action_dim]`.
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub rtgs: Vec<f64>,
    pub terminal: bool,
}

impl Trajectory {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        states: Vec<f64>,
        actions: Vec<f64>,
        rewards: Vec<f64>,
        terminal: bool,
    ) -> Self {
        debug_assert_eq!(states.len(), rewards.len() * state_dim);
        debug_assert_eq!(actions.len(), rewards.len() * action_dim);
        let rtgs = compute_rtg(&rewards);
        Self {
            state_dim,
            action_dim,
            states,
            actions,
            rewards,
            rtgs,
            terminal,
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t * self.state_dim..(t + 1) * self.state_dim]
    }

    pub fn action(&self, t: usize) -> &[f64] {
        &self.actions[t * self.action_dim..(t + 1) * self.action_dim]
    }

    pub fn action_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.actions[t * self.action_dim..(t + 1) * self.action_dim]
    }

    pub fn total_return(&self) -> f64 {
        self.rtgs.first().copied().unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub state_dim: usize,
    pub action_dim: usize,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(state_dim: usize, action_dim: usize) -> Self {
        Self {
            state_dim,
            action_dim,
            trajectories: Vec::new(),
        }
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_steps() == 0
    }

    pub fn returns(&self) -> Vec<f64> {
        self.trajectories.iter().map(Trajectory::total_return).collect()
    }

    pub fn mean_return(&self) -> f64 {
        let r = self.returns();
        r.iter().sum::<f64>() / r.len().max(1) as f64
    }

    pub fn max_return(&self) -> f64 {
        self.returns().into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Maps a global step index to `(episode, t)`.
    pub fn locate(&self, mut index: usize) -> Option<(usize, usize)> {
        for (e, tr) in self.trajectories.iter().enumerate() {
            if index < tr.len() {
                return Some((e, index));
            }
            index -= tr.len();
        }
        None
    }
}
