//! Context windows and the batched model input built from them.

use rand::Rng;

use super::{DataError, Dataset, DatasetStats, Trajectory};

/// The last `len` steps ending at some step `t`, left-padded with zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryWindow {
    pub len: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    /// `[len, state_dim]`, normalised.
    pub states: Vec<f64>,
    /// `[len, action_dim]`.
    pub actions: Vec<f64>,
    /// `[len]`, divided by the RTG scale.
    pub rtgs: Vec<f64>,
    pub timesteps: Vec<usize>,
    pub pad: Vec<bool>,
    /// Unnormalised action of the final step.
    pub target_action: Vec<f64>,
    /// `[len, state_dim]`, normalised state after each step.
    pub next_states: Vec<f64>,
    pub next_rtgs: Vec<f64>,
    /// False on padding and on an episode's final step.
    pub next_valid: Vec<bool>,
}

/// Builds a window from the trailing steps of raw per-step arrays. Only the
/// last `min(k, len)` of the `k` provided steps are used.
pub fn window_from_parts(
    states: &[f64],
    actions: &[f64],
    rtgs: &[f64],
    timesteps: &[usize],
    len: usize,
    stats: &DatasetStats,
) -> TrajectoryWindow {
    let sd = stats.state_mean.len();
    let k = rtgs.len();
    let ad = actions.len().checked_div(k).unwrap_or(0);
    let real = k.min(len);
    let pad_n = len - real;
    let first = k - real;
    let mut w = TrajectoryWindow {
        len,
        state_dim: sd,
        action_dim: ad,
        states: vec![0.0; len * sd],
        actions: vec![0.0; len * ad],
        rtgs: vec![0.0; len],
        timesteps: vec![0; len],
        pad: (0..len).map(|i| i < pad_n).collect(),
        target_action: actions[(k.max(1) - 1) * ad..k * ad].to_vec(),
        next_states: vec![0.0; len * sd],
        next_rtgs: vec![0.0; len],
        next_valid: vec![false; len],
    };
    for j in 0..real {
        let (src, dst) = (first + j, pad_n + j);
        stats.normalize_state(
            &states[src * sd..(src + 1) * sd],
            &mut w.states[dst * sd..(dst + 1) * sd],
        );
        w.actions[dst * ad..(dst + 1) * ad].copy_from_slice(&actions[src * ad..(src + 1) * ad]);
        w.rtgs[dst] = rtgs[src] / stats.rtg_scale;
        w.timesteps[dst] = timesteps[src];
    }
    w
}

/// Window of the last `min(t + 1, len)` steps of `traj` ending at `t`, with
/// next-step targets attached.
pub fn sample_window(
    traj: &Trajectory,
    t: usize,
    len: usize,
    stats: &DatasetStats,
) -> Result<TrajectoryWindow, DataError> {
    if t >= traj.len() {
        return Err(DataError::StepOutOfRange { t, len: traj.len() });
    }
    let (sd, ad) = (traj.state_dim, traj.action_dim);
    let steps: Vec<usize> = (0..=t).collect();
    let mut w = window_from_parts(
        &traj.states[..(t + 1) * sd],
        &traj.actions[..(t + 1) * ad],
        &traj.rtgs[..=t],
        &steps,
        len,
        stats,
    );
    let real = (t + 1).min(len);
    let pad_n = len - real;
    for j in 0..real {
        let step = t + 1 - real + j;
        let dst = pad_n + j;
        if step + 1 < traj.len() {
            stats.normalize_state(traj.state(step + 1), &mut w.next_states[dst * sd..(dst + 1) * sd]);
            w.next_rtgs[dst] = traj.rtgs[step + 1] / stats.rtg_scale;
            w.next_valid[dst] = true;
        }
    }
    Ok(w)
}

/// Batched, flattened model input. Shapes are `[batch, len, ·]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub batch: usize,
    pub len: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rtgs: Vec<f64>,
    pub timesteps: Vec<usize>,
    pub pad: Vec<bool>,
}

impl ModelInput {
    pub fn from_windows(windows: &[TrajectoryWindow]) -> Self {
        let w0 = &windows[0];
        let mut m = Self {
            batch: windows.len(),
            len: w0.len,
            state_dim: w0.state_dim,
            action_dim: w0.action_dim,
            states: Vec::with_capacity(windows.len() * w0.states.len()),
            actions: Vec::with_capacity(windows.len() * w0.actions.len()),
            rtgs: Vec::new(),
            timesteps: Vec::new(),
            pad: Vec::new(),
        };
        for w in windows {
            m.states.extend_from_slice(&w.states);
            m.actions.extend_from_slice(&w.actions);
            m.rtgs.extend_from_slice(&w.rtgs);
            m.timesteps.extend_from_slice(&w.timesteps);
            m.pad.extend_from_slice(&w.pad);
        }
        m
    }

    pub fn steps(&self) -> usize {
        self.batch * self.len
    }
}

/// Model input plus the masked regression targets of every head.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub input: ModelInput,
    /// `[batch, len, action_dim]`, 1 on real steps.
    pub action_mask: Vec<f64>,
    /// `[batch, len, 1]`.
    pub next_rtgs: Vec<f64>,
    pub rtg_mask: Vec<f64>,
    /// `[batch, len, state_dim]`.
    pub next_states: Vec<f64>,
    pub state_mask: Vec<f64>,
    /// `(episode, t)` of each row's final step.
    pub index: Vec<(usize, usize)>,
}

fn expand(mask: &[bool], width: usize) -> Vec<f64> {
    mask.iter()
        .flat_map(|m| std::iter::repeat_n(if *m { 1.0 } else { 0.0 }, width))
        .collect()
}

impl Batch {
    pub fn from_indices(
        ds: &Dataset,
        stats: &DatasetStats,
        len: usize,
        index: &[(usize, usize)],
    ) -> Result<Self, DataError> {
        let windows = index
            .iter()
            .map(|&(e, t)| sample_window(&ds.trajectories[e], t, len, stats))
            .collect::<Result<Vec<_>, _>>()?;
        let input = ModelInput::from_windows(&windows);
        let real: Vec<bool> = input.pad.iter().map(|p| !p).collect();
        let valid: Vec<bool> = windows.iter().flat_map(|w| w.next_valid.iter().copied()).collect();
        Ok(Self {
            action_mask: expand(&real, input.action_dim),
            next_rtgs: windows.iter().flat_map(|w| w.next_rtgs.iter().copied()).collect(),
            rtg_mask: expand(&valid, 1),
            next_states: windows.iter().flat_map(|w| w.next_states.iter().copied()).collect(),
            state_mask: expand(&valid, input.state_dim),
            index: index.to_vec(),
            input,
        })
    }
}

/// Uniform sampling over all `(episode, t)` pairs, so episodes are weighted by length.
#[derive(Clone, Debug)]
pub struct StepSampler {
    /// Exclusive prefix sums of episode lengths.
    ends: Vec<usize>,
}

impl StepSampler {
    pub fn new(ds: &Dataset) -> Self {
        let mut acc = 0;
        let ends = ds
            .trajectories
            .iter()
            .map(|t| {
                acc += t.len();
                acc
            })
            .collect();
        Self { ends }
    }

    pub fn total(&self) -> usize {
        self.ends.last().copied().unwrap_or(0)
    }

    pub fn locate(&self, g: usize) -> (usize, usize) {
        let e = self.ends.partition_point(|end| *end <= g);
        let start = if e == 0 { 0 } else { self.ends[e - 1] };
        (e, g - start)
    }

    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
        (0..n).map(|_| self.locate(rng.random_range(0..self.total()))).collect()
    }
}
