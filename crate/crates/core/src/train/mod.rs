//! Training: the composite objective with self-evolving action targets, the
//! teacher, the optimizer and the step loop.

mod optim;
mod pser;
mod run;

pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use pser::{beta_at, composite_loss, pser_loss, refine_target, LossParts, LossWeights, PserSchedule};
pub use run::{load_policy, train_run, LoadedPolicy, RunSummary, METRICS_HEADER};

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamStore, Tape, Tensor};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{RunConfig, TeacherKind};
use crate::data::{Batch, DataError, Dataset, DatasetStats, ModelInput, StepSampler, ToyEnv};
use crate::policy::{BcConfig, BcPolicy, Mode, Policy, PolicyError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Config(String),
    #[error("{what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite {quantity} at step {step}")]
    NonFinite {
        step: usize,
        quantity: &'static str,
        batch: Box<Batch>,
    },
    #[error("non-finite {quantity} at step {step}; offending batch written to {}", dump.display())]
    NonFiniteDumped {
        step: usize,
        quantity: &'static str,
        dump: PathBuf,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint does not match this run: {0}")]
    Mismatch(String),
    #[error("dataset is empty")]
    EmptyDataset,
}

/// One metrics-log line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub beta: f64,
    pub loss_total: f64,
    pub loss_action: f64,
    pub loss_rtg: f64,
    pub loss_state: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.beta, self.loss_total, self.loss_action, self.loss_rtg, self.loss_state, self.grad_norm
        )
    }
}

/// Frozen copy of the policy parameters used to produce soft action targets.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub params: ParamStore,
    /// Step count at the last refresh.
    pub step: usize,
}

/// Everything that evolves during training; enough to resume exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub store: ParamStore,
    pub opt: AdamW,
    pub teacher: Option<Teacher>,
    /// Completed gradient steps.
    pub step: usize,
    pub rng: ChaCha8Rng,
}

/// Scalar loss terms from one forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub action: f64,
    pub rtg: f64,
    pub state: f64,
}

#[derive(Serialize, Deserialize)]
struct RngRecord {
    seed: [u8; 32],
    stream: u64,
    /// u128 does not survive JSON, so it travels as a decimal string.
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct TrainRecord {
    kind: String,
    run: RunConfig,
    model: crate::policy::ModelConfig,
    stats: DatasetStats,
    step: usize,
    adam_t: u64,
    teacher_step: Option<usize>,
    rng: RngRecord,
}

const CHECKPOINT_KIND: &str = "mgdm-policy";

pub struct Trainer<'a> {
    pub policy: Policy,
    pub config: RunConfig,
    pub sched: PserSchedule,
    pub weights: LossWeights,
    pub teacher_kind: TeacherKind,
    pub stats: DatasetStats,
    pub state: TrainState,
    data: &'a Dataset,
    sampler: StepSampler,
}

/// One epoch of steps: the number of batches needed to cover every step once.
pub fn epoch_steps(data: &Dataset, batch_size: usize) -> usize {
    data.total_steps().div_ceil(batch_size.max(1)).max(1)
}

impl<'a> Trainer<'a> {
    /// Fresh parameters drawn from `config.train.seed`. The stats' RTG scale
    /// is replaced by `config.data.rtg_scale`.
    pub fn new(config: &RunConfig, data: &'a Dataset, stats: &DatasetStats) -> Result<Self, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let env = ToyEnv::new(config.env_kind());
        for (what, expected, got) in [
            ("dataset state_dim", env.state_dim(), data.state_dim),
            ("dataset action_dim", env.action_dim(), data.action_dim),
            ("stats state_dim", data.state_dim, stats.state_mean.len()),
        ] {
            if expected != got {
                return Err(TrainError::Shape { what, expected, got });
            }
        }
        let model = config.model_config(data.state_dim, data.action_dim, env.action_bound);
        let mut store = ParamStore::new();
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let policy = Policy::new(model, &mut store, &mut init_rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        rng.set_stream(1);
        let refresh = match config.pser.refresh_every {
            0 => epoch_steps(data, config.train.batch_size),
            e => e,
        };
        // a zero β_K with the default floor is the no-regularisation ablation
        let beta_min = config.pser.beta_min.min(config.pser.beta_k);
        let sched = PserSchedule::new(config.pser.beta_k, beta_min, config.train.steps, refresh)?;
        let l = &config.loss;
        let weights = LossWeights::normalized(l.lambda_action, l.lambda_rtg, l.lambda_state)?;
        let mut stats = stats.clone();
        stats.rtg_scale = config.data.rtg_scale;
        let opt = AdamW::new(AdamWConfig::from(&config.optim), &store);
        Ok(Self {
            policy,
            config: config.clone(),
            sched,
            weights,
            teacher_kind: config.teacher_kind(),
            stats,
            state: TrainState {
                store,
                opt,
                teacher: None,
                step: 0,
                rng,
            },
            sampler: StepSampler::new(data),
            data,
        })
    }

    /// Restores a trainer from a checkpoint written by [`Trainer::checkpoint`].
    /// The checkpoint's embedded run config must equal `config`.
    pub fn resume(config: &RunConfig, data: &'a Dataset, ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let rec: TrainRecord = serde_json::from_value(ckpt.config.clone()).map_err(CheckpointError::from)?;
        if rec.kind != CHECKPOINT_KIND {
            return Err(TrainError::Mismatch(format!("checkpoint kind `{}`", rec.kind)));
        }
        if &rec.run != config {
            return Err(TrainError::Mismatch("run configuration differs".into()));
        }
        let mut t = Self::new(config, data, &rec.stats)?;
        if t.policy.config != rec.model {
            return Err(TrainError::Mismatch("model configuration differs".into()));
        }
        t.stats = rec.stats;
        ckpt.load_store("param", &mut t.state.store)?;
        for (i, p) in t.state.store.iter().enumerate() {
            for (prefix, slot) in [("adam.m", &mut t.state.opt.m[i]), ("adam.v", &mut t.state.opt.v[i])] {
                let key = format!("{prefix}/{}", p.name);
                let v = ckpt.get(&key).ok_or_else(|| CheckpointError::Missing(key.clone()))?;
                if v.shape() != slot.shape() {
                    return Err(CheckpointError::Shape {
                        name: key,
                        expected: slot.shape().to_vec(),
                        got: v.shape().to_vec(),
                    }
                    .into());
                }
                *slot = v.clone();
            }
        }
        t.state.opt.t = rec.adam_t;
        t.state.teacher = match rec.teacher_step {
            Some(step) => {
                let mut params = t.state.store.clone();
                ckpt.load_store("teacher", &mut params)?;
                Some(Teacher { params, step })
            }
            None => None,
        };
        t.state.step = rec.step;
        let word_pos: u128 = rec
            .rng
            .word_pos
            .parse()
            .map_err(|_| TrainError::Mismatch("bad RNG position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(rec.rng.seed);
        rng.set_stream(rec.rng.stream);
        rng.set_word_pos(word_pos);
        t.state.rng = rng;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let s = &self.state;
        let rec = TrainRecord {
            kind: CHECKPOINT_KIND.into(),
            run: self.config.clone(),
            model: self.policy.config.clone(),
            stats: self.stats.clone(),
            step: s.step,
            adam_t: s.opt.t,
            teacher_step: s.teacher.as_ref().map(|t| t.step),
            rng: RngRecord {
                seed: s.rng.get_seed(),
                stream: s.rng.get_stream(),
                word_pos: s.rng.get_word_pos().to_string(),
            },
        };
        let mut c = Checkpoint::new(serde_json::to_value(rec).expect("record serialises"));
        c.push_store("param", &s.store);
        for (p, (m, v)) in s.store.iter().zip(s.opt.m.iter().zip(&s.opt.v)) {
            c.push(format!("adam.m/{}", p.name), m.clone());
            c.push(format!("adam.v/{}", p.name), v.clone());
        }
        if let Some(t) = &s.teacher {
            c.push_store("teacher", &t.params);
        }
        c
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.data
    }

    /// β for the next step.
    pub fn current_beta(&self) -> f64 {
        if self.state.teacher.is_some() {
            beta_at(self.state.step, &self.sched)
        } else {
            0.0
        }
    }

    /// Action predictions of `params` on `input`, without gradient recording.
    pub fn teacher_actions(&mut self, params: &ParamStore, input: &ModelInput) -> Result<Vec<f64>, TrainError> {
        let mut tape = Tape::no_grad();
        let pv = tape.params(params);
        let mut mode = if self.config.pser.teacher_dropout {
            Mode::Train(&mut self.state.rng)
        } else {
            Mode::Eval
        };
        let pred = self.policy.forward(&mut tape, &pv, input, &mut mode)?;
        Ok(tape.value(pred.action).data().to_vec())
    }

    /// Forward and backward pass of the composite loss. Gradients are written
    /// into `store` (after zeroing); dropout draws from `rng`.
    pub fn accumulate_gradients(
        &self,
        store: &mut ParamStore,
        batch: &Batch,
        teacher: &[f64],
        beta: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossValues, TrainError> {
        store.zero_grad();
        let mut tape = Tape::new();
        let pv = tape.params(store);
        let pred = self
            .policy
            .forward(&mut tape, &pv, &batch.input, &mut Mode::Train(rng))?;
        let parts = composite_loss(&mut tape, &pred, batch, teacher, beta, &self.weights)?;
        let values = LossValues {
            total: tape.value(parts.total).item(),
            action: tape.value(parts.action).item(),
            rtg: tape.value(parts.rtg).item(),
            state: tape.value(parts.state).item(),
        };
        if !values.total.is_finite() {
            return Err(TrainError::NonFinite {
                step: self.state.step,
                quantity: "loss",
                batch: Box::new(batch.clone()),
            });
        }
        tape.backward(parts.total, store)?;
        Ok(values)
    }

    /// Runs one gradient step.
    pub fn step(&mut self) -> Result<MetricsRow, TrainError> {
        let k = self.state.step;
        let beta = self.current_beta();
        let index = self.sampler.sample(self.config.train.batch_size, &mut self.state.rng);
        let batch = Batch::from_indices(self.data, &self.stats, self.policy.config.context_len, &index)?;
        let teacher = match &self.state.teacher {
            Some(t) if beta > 0.0 => {
                let params = t.params.clone();
                self.teacher_actions(&params, &batch.input)?
            }
            _ => batch.input.actions.clone(),
        };
        let mut store = std::mem::take(&mut self.state.store);
        let mut rng = self.state.rng.clone();
        let result = self.accumulate_gradients(&mut store, &batch, &teacher, beta, &mut rng);
        self.state.store = store;
        self.state.rng = rng;
        let loss = result?;
        let grad_norm = clip_grad_norm(&mut self.state.store, self.config.optim.grad_clip);
        if !grad_norm.is_finite() {
            return Err(TrainError::NonFinite {
                step: k,
                quantity: "gradient",
                batch: Box::new(batch),
            });
        }
        let lr = self.state.opt.config.lr_at(k);
        self.state.opt.step(&mut self.state.store, lr)?;
        self.state.step = k + 1;
        self.refresh_teacher();
        Ok(MetricsRow {
            step: k,
            beta,
            loss_total: loss.total,
            loss_action: loss.action,
            loss_rtg: loss.rtg,
            loss_state: loss.state,
            grad_norm,
        })
    }

    /// Snapshot teacher: replaced at every multiple of the refresh interval.
    /// EMA teacher: created at the first boundary, then tracked every step.
    fn refresh_teacher(&mut self) {
        let done = self.state.step;
        let boundary = done.is_multiple_of(self.sched.refresh_every);
        let s = &mut self.state;
        match (self.teacher_kind, &mut s.teacher) {
            (TeacherKind::Ema, Some(t)) => {
                let d = self.config.pser.ema_decay;
                for (tp, p) in t.params.iter_mut().zip(s.store.iter()) {
                    for (a, b) in tp.value.data_mut().iter_mut().zip(p.value.data()) {
                        *a = d * *a + (1.0 - d) * b;
                    }
                }
                t.step = done;
            }
            (_, teacher) if boundary => {
                let mut params = s.store.clone();
                params.zero_grad();
                *teacher = Some(Teacher { params, step: done });
            }
            _ => {}
        }
    }

    /// Steps until `until` completed steps, reporting each row.
    pub fn run_until(
        &mut self,
        until: usize,
        mut on_step: impl FnMut(&MetricsRow, &Self) -> Result<(), TrainError>,
    ) -> Result<(), TrainError> {
        while self.state.step < until {
            let row = self.step()?;
            on_step(&row, self)?;
        }
        Ok(())
    }

    /// Deterministic action predictions of the current parameters on the
    /// window ending at each `(episode, t)`.
    pub fn predict_actions(&self, index: &[(usize, usize)]) -> Result<Vec<Vec<f64>>, TrainError> {
        let batch = Batch::from_indices(self.data, &self.stats, self.policy.config.context_len, index)?;
        Ok(self.policy.act_batch(&self.state.store, &batch.input)?)
    }
}

/// Settings of the state→action MLP baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct BcTrainConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    pub seed: u64,
}

/// Fits the MLP baseline by plain action regression on normalised states.
pub fn train_bc(
    cfg: &BcTrainConfig,
    data: &Dataset,
    stats: &DatasetStats,
    action_bound: f64,
) -> Result<(BcPolicy, ParamStore), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let (sd, ad) = (data.state_dim, data.action_dim);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bc = BcPolicy::new(
        BcConfig {
            state_dim: sd,
            action_dim: ad,
            hidden: cfg.hidden,
            action_bound,
        },
        &mut store,
        &mut rng,
    );
    rng.set_stream(1);
    let sampler = StepSampler::new(data);
    let mut opt = AdamW::new(cfg.optim, &store);
    for k in 0..cfg.steps {
        let index = sampler.sample(cfg.batch_size, &mut rng);
        let mut states = vec![0.0; index.len() * sd];
        let mut actions = Vec::with_capacity(index.len() * ad);
        for (i, &(e, t)) in index.iter().enumerate() {
            let tr = &data.trajectories[e];
            stats.normalize_state(tr.state(t), &mut states[i * sd..(i + 1) * sd]);
            actions.extend_from_slice(tr.action(t));
        }
        store.zero_grad();
        let mut tape = Tape::new();
        let pv = tape.params(&store);
        let x = tape.constant(Tensor::new(vec![index.len(), sd], states)?);
        let y = tape.constant(Tensor::new(vec![index.len(), ad], actions)?);
        let pred = bc.forward(&mut tape, &pv, x)?;
        let loss = tape.mse(pred, y)?;
        if !tape.value(loss).item().is_finite() {
            return Err(TrainError::Config(format!("baseline loss diverged at step {k}")));
        }
        tape.backward(loss, &mut store)?;
        clip_grad_norm(&mut store, cfg.optim.grad_clip);
        opt.step(&mut store, cfg.optim.lr_at(k))?;
    }
    Ok((bc, store))
}
