//! The full sequence policy: RTG/state/action tokenisation, a stack of
//! multi-grained blocks, and the action, next-RTG and next-state heads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamId, ParamStore, ParamVars, Tape, Tensor, Var};
use crate::block::{self, BlockConfig, Linear, MGBlockParams, Norm};
use crate::data::window::window_from_parts;
use crate::data::{DatasetStats, ModelInput};
use crate::init;
use crate::ssm::{BbarRule, ScanKind};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("timestep {t} exceeds the position table of {max} entries")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("{what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("token length {0} is not a multiple of 3")]
    TokenLength(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub ssm_state: usize,
    /// Steps per window; the token sequence is three times longer.
    pub context_len: usize,
    pub max_timestep: usize,
    pub dropout: f64,
    pub action_bound: f64,
    pub conv_width: usize,
    pub share_gate: bool,
    pub fusion_affine: bool,
    pub multi_grained: bool,
    pub bbar_rule: BbarRule,
    pub scan: ScanKind,
    pub ssm_skip: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            state_dim: 4,
            action_dim: 2,
            embed_dim: 128,
            n_layers: 3,
            ssm_state: 16,
            context_len: 20,
            max_timestep: 1024,
            dropout: 0.1,
            action_bound: 1.0,
            conv_width: 4,
            share_gate: false,
            fusion_affine: true,
            multi_grained: true,
            bbar_rule: BbarRule::Exact,
            scan: ScanKind::Naive,
            ssm_skip: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let positive = [
            ("state_dim", self.state_dim),
            ("action_dim", self.action_dim),
            ("embed_dim", self.embed_dim),
            ("n_layers", self.n_layers),
            ("ssm_state", self.ssm_state),
            ("context_len", self.context_len),
            ("max_timestep", self.max_timestep),
            ("conv_width", self.conv_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(PolicyError::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(PolicyError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.action_bound > 0.0) {
            return Err(PolicyError::Config("action_bound must be positive".into()));
        }
        if let ScanKind::Blocked { chunk: 0 } = self.scan {
            return Err(PolicyError::Config("scan chunk must be positive".into()));
        }
        Ok(())
    }

    pub fn block_config(&self) -> BlockConfig {
        let mut b = BlockConfig::new(self.embed_dim, self.ssm_state);
        b.conv_width = self.conv_width;
        b.share_gate = self.share_gate;
        b.fusion_affine = self.fusion_affine;
        b.multi_grained = self.multi_grained;
        b.ssm.rule = self.bbar_rule;
        b.ssm.scan = self.scan;
        b.ssm.skip = self.ssm_skip;
        b
    }
}

/// Training draws dropout masks from the given generator; evaluation is deterministic.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    fn dropout(&mut self, tape: &mut Tape, x: Var, p: f64) -> Result<Var, AutodiffError> {
        let Mode::Train(rng) = self else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let shape = tape.shape(x).to_vec();
        let n = shape.iter().product();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = tape.constant(Tensor::new(shape, mask)?);
        tape.mul(x, m)
    }
}

#[derive(Clone, Debug)]
pub struct PolicyParams {
    pub embed_rtg: Linear,
    pub embed_state: Linear,
    pub embed_action: Linear,
    /// `[max_timestep, D]`.
    pub timestep: ParamId,
    pub blocks: Vec<MGBlockParams>,
    pub norm_out: Norm,
    pub head_action: Linear,
    pub head_rtg: Linear,
    pub head_state: Linear,
}

/// Interleaved `(R, s, a)` tokens and the matching padding flags.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    /// `[B, 3l, D]`.
    pub tokens: Var,
    /// `[B, 3l]`.
    pub pad_mask: Vec<bool>,
}

/// Head outputs, each `[B, l, ·]`.
#[derive(Clone, Copy, Debug)]
pub struct Predictions {
    pub action: Var,
    pub rtg: Var,
    pub state: Var,
}

#[derive(Clone, Debug)]
pub struct Policy {
    pub config: ModelConfig,
    pub params: PolicyParams,
}

/// Raw (unnormalised) history of one episode up to the current step. `states`,
/// `rtgs` and `timesteps` include the current step; `actions` stops one short.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rtgs: Vec<f64>,
    pub timesteps: Vec<usize>,
}

impl History {
    pub fn steps(&self) -> usize {
        self.rtgs.len()
    }
}

impl Policy {
    pub fn new(config: ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self, PolicyError> {
        config.validate()?;
        let d = config.embed_dim;
        let bc = config.block_config();
        let params = PolicyParams {
            embed_rtg: Linear::init(store, "embed.rtg", 1, d, true, rng),
            embed_state: Linear::init(store, "embed.state", config.state_dim, d, true, rng),
            embed_action: Linear::init(store, "embed.action", config.action_dim, d, true, rng),
            timestep: store.add("embed.timestep", init::normal(&[config.max_timestep, d], 0.02, rng)),
            blocks: (0..config.n_layers)
                .map(|i| MGBlockParams::init(store, &format!("block{i}"), &bc, rng))
                .collect(),
            norm_out: Norm::init(store, "norm_out", d),
            head_action: Linear::zeros(store, "head.action", d, config.action_dim),
            head_rtg: Linear::zeros(store, "head.rtg", d, 1),
            head_state: Linear::zeros(store, "head.state", d, config.state_dim),
        };
        Ok(Self { config, params })
    }

    fn check_input(&self, input: &ModelInput) -> Result<(), PolicyError> {
        let c = &self.config;
        let checks = [
            ("state_dim", c.state_dim, input.state_dim),
            ("action_dim", c.action_dim, input.action_dim),
            ("states", input.steps() * c.state_dim, input.states.len()),
            ("actions", input.steps() * c.action_dim, input.actions.len()),
            ("rtgs", input.steps(), input.rtgs.len()),
            ("timesteps", input.steps(), input.timesteps.len()),
            ("pad", input.steps(), input.pad.len()),
        ];
        for (what, expected, got) in checks {
            if expected != got {
                return Err(PolicyError::Dimension { what, expected, got });
            }
        }
        if let Some(t) = input.timesteps.iter().find(|t| **t >= c.max_timestep) {
            return Err(PolicyError::TimestepOutOfRange {
                t: *t,
                max: c.max_timestep,
            });
        }
        Ok(())
    }

    /// Per-modality linear embeddings plus a shared per-step position vector,
    /// interleaved as `R_0, s_0, a_0, R_1, …`. Padded tokens are zero.
    pub fn embed(&self, tape: &mut Tape, pv: &ParamVars, input: &ModelInput) -> Result<TokenSequence, PolicyError> {
        self.check_input(input)?;
        let (b, l, d) = (input.batch, input.len, self.config.embed_dim);
        let p = &self.params;
        let rtg = tape.constant(Tensor::new(vec![b, l, 1], input.rtgs.clone())?);
        let st = tape.constant(Tensor::new(vec![b, l, input.state_dim], input.states.clone())?);
        let act = tape.constant(Tensor::new(vec![b, l, input.action_dim], input.actions.clone())?);
        let e_t = tape.gather(pv[p.timestep], &input.timesteps, &[b, l])?;
        tape.tag(e_t, "embed.time");
        let mut parts = Vec::with_capacity(3);
        for (lin, x, tag) in [
            (&p.embed_rtg, rtg, "embed.rtg"),
            (&p.embed_state, st, "embed.state"),
            (&p.embed_action, act, "embed.action"),
        ] {
            let e = lin.forward(tape, pv, x)?;
            tape.tag(e, tag);
            parts.push(tape.add(e, e_t)?);
        }
        let tokens = tape.interleave(&parts)?;
        let pad_mask: Vec<bool> = input.pad.iter().flat_map(|p| [*p; 3]).collect();
        let tokens = if pad_mask.iter().any(|p| *p) {
            let keep = pad_mask
                .iter()
                .flat_map(|p| std::iter::repeat_n(if *p { 0.0 } else { 1.0 }, d))
                .collect();
            let m = tape.constant(Tensor::new(vec![b, 3 * l, d], keep)?);
            tape.mul(tokens, m)?
        } else {
            tokens
        };
        tape.tag(tokens, "seq.tokens");
        Ok(TokenSequence { tokens, pad_mask })
    }

    /// Runs the block stack and heads over an embedded sequence.
    pub fn forward_tokens(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        tokens: Var,
        mode: &mut Mode,
    ) -> Result<Predictions, PolicyError> {
        let len = tape.shape(tokens)[1];
        if !len.is_multiple_of(3) {
            return Err(PolicyError::TokenLength(len));
        }
        let p = &self.params;
        let bc = self.config.block_config();
        let mut h = mode.dropout(tape, tokens, self.config.dropout)?;
        for blk in &p.blocks {
            h = block::block_forward(tape, pv, blk, &bc, h)?;
            h = mode.dropout(tape, h, self.config.dropout)?;
        }
        let h = p.norm_out.forward(tape, pv, h)?;
        tape.tag(h, "seq.out");
        let s_tok = tape.select_tokens(h, 1, 3)?;
        let a_tok = tape.select_tokens(h, 2, 3)?;
        let raw = p.head_action.forward(tape, pv, s_tok)?;
        let squashed = tape.tanh(raw);
        let action = tape.scale(squashed, self.config.action_bound);
        let rtg = p.head_rtg.forward(tape, pv, a_tok)?;
        let state = p.head_state.forward(tape, pv, a_tok)?;
        tape.tag(action, "head.action");
        tape.tag(rtg, "head.rtg");
        tape.tag(state, "head.state");
        Ok(Predictions { action, rtg, state })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        input: &ModelInput,
        mode: &mut Mode,
    ) -> Result<Predictions, PolicyError> {
        let seq = self.embed(tape, pv, input)?;
        self.forward_tokens(tape, pv, seq.tokens, mode)
    }

    /// Deterministic action for the final step of every row of `input`.
    pub fn act_batch(&self, store: &ParamStore, input: &ModelInput) -> Result<Vec<Vec<f64>>, PolicyError> {
        let mut tape = Tape::no_grad();
        let pv = tape.params(store);
        let pred = self.forward(&mut tape, &pv, input, &mut Mode::Eval)?;
        let ad = self.config.action_dim;
        let (b, l) = (input.batch, input.len);
        let data = tape.value(pred.action).data();
        Ok((0..b)
            .map(|i| data[((i + 1) * l - 1) * ad..(i + 1) * l * ad].to_vec())
            .collect())
    }

    /// Builds the model input for a batch of histories; the current step's
    /// action slot is left at zero.
    pub fn input_from_histories(
        &self,
        histories: &[&History],
        stats: &DatasetStats,
    ) -> Result<ModelInput, PolicyError> {
        let (sd, ad) = (self.config.state_dim, self.config.action_dim);
        let mut windows = Vec::with_capacity(histories.len());
        for h in histories {
            let k = h.steps();
            if k == 0 || h.states.len() != k * sd {
                return Err(PolicyError::Dimension {
                    what: "history states",
                    expected: k.max(1) * sd,
                    got: h.states.len(),
                });
            }
            if h.actions.len() != (k - 1) * ad || h.timesteps.len() != k {
                return Err(PolicyError::Dimension {
                    what: "history actions",
                    expected: (k - 1) * ad,
                    got: h.actions.len(),
                });
            }
            // only the trailing window is copied
            let l = self.config.context_len;
            let first = k.saturating_sub(l);
            let mut actions = h.actions[first * ad..].to_vec();
            actions.extend(std::iter::repeat_n(0.0, ad));
            windows.push(window_from_parts(
                &h.states[first * sd..],
                &actions,
                &h.rtgs[first..],
                &h.timesteps[first..],
                l,
                stats,
            ));
        }
        Ok(ModelInput::from_windows(&windows))
    }

    pub fn act(&self, store: &ParamStore, history: &History, stats: &DatasetStats) -> Result<Vec<f64>, PolicyError> {
        let input = self.input_from_histories(&[history], stats)?;
        Ok(self.act_batch(store, &input)?.remove(0))
    }
}

/// Three-layer MLP state→action baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BcConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub hidden: usize,
    pub action_bound: f64,
}

#[derive(Clone, Debug)]
pub struct BcPolicy {
    pub config: BcConfig,
    pub layers: [Linear; 3],
}

impl BcPolicy {
    pub fn new(config: BcConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let h = config.hidden;
        let layers = [
            Linear::init(store, "bc.l1", config.state_dim, h, true, rng),
            Linear::init(store, "bc.l2", h, h, true, rng),
            Linear::zeros(store, "bc.l3", h, config.action_dim),
        ];
        Self { config, layers }
    }

    /// `states: [B, state_dim]` (normalised) to `[B, action_dim]`.
    pub fn forward(&self, tape: &mut Tape, pv: &ParamVars, states: Var) -> Result<Var, AutodiffError> {
        let h = self.layers[0].forward(tape, pv, states)?;
        let h = tape.silu(h);
        let h = self.layers[1].forward(tape, pv, h)?;
        let h = tape.silu(h);
        let out = self.layers[2].forward(tape, pv, h)?;
        let out = tape.tanh(out);
        Ok(tape.scale(out, self.config.action_bound))
    }

    pub fn act_batch(&self, store: &ParamStore, states: Vec<f64>) -> Result<Vec<Vec<f64>>, AutodiffError> {
        let sd = self.config.state_dim;
        let b = states.len() / sd;
        let mut tape = Tape::no_grad();
        let pv = tape.params(store);
        let x = tape.constant(Tensor::new(vec![b, sd], states)?);
        let y = self.forward(&mut tape, &pv, x)?;
        Ok(tape
            .value(y)
            .data()
            .chunks(self.config.action_dim)
            .map(<[f64]>::to_vec)
            .collect())
    }
}
