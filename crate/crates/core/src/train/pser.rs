use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::Batch;
use crate::policy::Predictions;

use super::TrainError;

/// Linear growth of the blend weight with a lower floor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PserSchedule {
    pub beta_k: f64,
    pub beta_min: f64,
    pub total_steps: usize,
    /// Steps between teacher refreshes. No teacher exists before step `refresh_every`.
    pub refresh_every: usize,
}

impl PserSchedule {
    pub fn new(beta_k: f64, beta_min: f64, total_steps: usize, refresh_every: usize) -> Result<Self, TrainError> {
        if !(0.0..=1.0).contains(&beta_k) || !(0.0..=beta_k).contains(&beta_min) {
            return Err(TrainError::Config(format!(
                "need 0 <= beta_min <= beta_k <= 1, got beta_min {beta_min}, beta_k {beta_k}"
            )));
        }
        if total_steps == 0 || refresh_every == 0 {
            return Err(TrainError::Config(
                "total steps and refresh interval must be positive".into(),
            ));
        }
        Ok(Self {
            beta_k,
            beta_min,
            total_steps,
            refresh_every,
        })
    }

    /// Schedule with the floor removed.
    pub fn without_floor(beta_k: f64, total_steps: usize, refresh_every: usize) -> Result<Self, TrainError> {
        Self::new(beta_k, 0.0, total_steps, refresh_every)
    }
}

/// `max(β_K·k/K, β_min)`, or 0 while no teacher exists (`k < E`). Steps past
/// `K` hold at `β_K`.
pub fn beta_at(k: usize, sched: &PserSchedule) -> f64 {
    if k < sched.refresh_every {
        return 0.0;
    }
    let k = k.min(sched.total_steps);
    (sched.beta_k * (k as f64 / sched.total_steps as f64)).max(sched.beta_min)
}

/// Non-negative head weights normalised to sum to one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub action: f64,
    pub rtg: f64,
    pub state: f64,
}

impl LossWeights {
    pub fn normalized(action: f64, rtg: f64, state: f64) -> Result<Self, TrainError> {
        let s = action + rtg + state;
        if [action, rtg, state].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || !(s > 0.0) {
            return Err(TrainError::Config(format!(
                "loss weights must be non-negative with a positive sum, got ({action}, {rtg}, {state})"
            )));
        }
        Ok(Self {
            action: action / s,
            rtg: rtg / s,
            state: state / s,
        })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            action: 0.8,
            rtg: 0.1,
            state: 0.1,
        }
    }
}

/// `(1 − β)·a + β·â_prev`, elementwise.
pub fn refine_target(a: &[f64], prev: &[f64], beta: f64) -> Result<Vec<f64>, TrainError> {
    if a.len() != prev.len() {
        return Err(TrainError::Shape {
            what: "teacher actions",
            expected: a.len(),
            got: prev.len(),
        });
    }
    Ok(a.iter().zip(prev).map(|(a, p)| (1.0 - beta) * a + beta * p).collect())
}

/// Masked MSE of `pred` against the refined target. `labels` and `prev` are constants.
pub fn pser_loss(
    tape: &mut Tape,
    pred: Var,
    labels: &[f64],
    prev: &[f64],
    beta: f64,
    mask: &[f64],
) -> Result<Var, TrainError> {
    let target = refine_target(labels, prev, beta)?;
    let shape = tape.shape(pred).to_vec();
    let target = tape.constant(Tensor::new(shape, target)?);
    Ok(tape.masked_mse(pred, target, mask)?)
}

/// The composite objective and its three unweighted terms.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub action: Var,
    pub rtg: Var,
    pub state: Var,
}

/// `λ1·pser(actions) + λ2·mse(next RTG) + λ3·mse(next state)`, all masked.
/// `teacher` holds the teacher's action predictions, or the labels when no teacher exists.
pub fn composite_loss(
    tape: &mut Tape,
    pred: &Predictions,
    batch: &Batch,
    teacher: &[f64],
    beta: f64,
    w: &LossWeights,
) -> Result<LossParts, TrainError> {
    let action = pser_loss(
        tape,
        pred.action,
        &batch.input.actions,
        teacher,
        beta,
        &batch.action_mask,
    )?;
    let shape = tape.shape(pred.rtg).to_vec();
    let rtg_target = tape.constant(Tensor::new(shape, batch.next_rtgs.clone())?);
    let rtg = tape.masked_mse(pred.rtg, rtg_target, &batch.rtg_mask)?;
    let shape = tape.shape(pred.state).to_vec();
    let state_target = tape.constant(Tensor::new(shape, batch.next_states.clone())?);
    let state = tape.masked_mse(pred.state, state_target, &batch.state_mask)?;
    let total = weighted_sum(tape, &[(action, w.action), (rtg, w.rtg), (state, w.state)])?;
    Ok(LossParts {
        total,
        action,
        rtg,
        state,
    })
}

fn weighted_sum(tape: &mut Tape, terms: &[(Var, f64)]) -> Result<Var, TrainError> {
    let mut acc = tape.scale(terms[0].0, terms[0].1);
    for &(v, c) in &terms[1..] {
        let s = tape.scale(v, c);
        acc = tape.add(acc, s)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let s = PserSchedule::new(0.85, 0.5, 1000, 10).unwrap();
        assert_eq!(beta_at(1000, &s), 0.85);
        assert_eq!(beta_at(500, &s), 0.5);
        assert_eq!(beta_at(9, &s), 0.0);
        assert_eq!(beta_at(5000, &s), 0.85);
        assert!(PserSchedule::new(0.4, 0.5, 10, 1).is_err());
    }

    #[test]
    fn refine_examples() {
        assert_eq!(refine_target(&[1.0], &[0.0], 0.5).unwrap(), vec![0.5]);
        let a = [0.3, -0.7, 1e-3];
        let p = [0.9, 0.1, -2.0];
        assert_eq!(refine_target(&a, &p, 0.0).unwrap(), a.to_vec());
        assert_eq!(refine_target(&a, &p, 1.0).unwrap(), p.to_vec());
        assert!(refine_target(&a, &p[..2], 0.5).is_err());
    }

    #[test]
    fn weights_normalise() {
        let w = LossWeights::normalized(8.0, 1.0, 1.0).unwrap();
        assert!((w.action - 0.8).abs() < 1e-15 && (w.rtg - 0.1).abs() < 1e-15);
        assert!(LossWeights::normalized(0.0, 0.0, 0.0).is_err());
        assert!(LossWeights::normalized(-1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn weighted_terms_combine() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(1.0));
        let r = tape.constant(Tensor::scalar(2.0));
        let s = tape.constant(Tensor::scalar(3.0));
        let t = weighted_sum(&mut tape, &[(a, 0.8), (r, 0.1), (s, 0.1)]).unwrap();
        assert!((tape.value(t).item() - 1.3).abs() < 1e-12);
    }
}
