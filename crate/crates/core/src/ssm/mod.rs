//! Selective state space primitive: input-dependent projections, ZOH
//! discretisation and the linear recurrence scan.

pub mod kernels;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::inverse_softplus;
use crate::autodiff::{AutodiffError, ParamId, ParamStore, ParamVars, Tape, Tensor, Var};
use crate::init;

/// How `B̄` is derived from `(Δ, A, B)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BbarRule {
    /// `B̄ = (ΔA)^{-1}(exp(ΔA) - I)·ΔB`, Taylor-expanded for |ΔA| < 1e-4.
    #[default]
    Exact,
    /// `B̄ = Δ·B`.
    Simplified,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
#[derive(Default)]
pub enum ScanKind {
    #[default]
    Naive,
    Blocked {
        chunk: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SsmDims {
    pub b: usize,
    pub l: usize,
    pub d: usize,
    pub n: usize,
}

impl SsmDims {
    pub fn state_shape(&self) -> [usize; 4] {
        [self.b, self.l, self.d, self.n]
    }

    pub fn state_len(&self) -> usize {
        self.b * self.l * self.d * self.n
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsmConfig {
    pub state_size: usize,
    pub dt_rank: usize,
    pub rule: BbarRule,
    pub scan: ScanKind,
    pub skip: bool,
}

impl SsmConfig {
    pub fn new(channels: usize, state_size: usize) -> Self {
        Self {
            state_size,
            dt_rank: (channels / 16).max(1),
            rule: BbarRule::Exact,
            scan: ScanKind::Naive,
            skip: true,
        }
    }
}

/// Learnable parameters of one selective SSM over `d` channels.
#[derive(Clone, Debug)]
pub struct SsmParams {
    /// `[D, N]`, with `A = -exp(a_log)`.
    pub a_log: ParamId,
    /// `[D, N]`, no bias.
    pub w_b: ParamId,
    /// `[D, N]`, no bias.
    pub w_c: ParamId,
    /// `[D, R]` low-rank down projection for Δ.
    pub w_dt_down: ParamId,
    /// `[R, D]`.
    pub w_dt_up: ParamId,
    /// `[D]`.
    pub dt_bias: ParamId,
    /// `[D]` per-channel input skip.
    pub d_skip: Option<ParamId>,
}

impl SsmParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, cfg: &SsmConfig, rng: &mut impl Rng) -> Self {
        let n = cfg.state_size;
        let r = cfg.dt_rank;
        // S4D-real: A[:, k] = -(k + 1)
        let a_log = Tensor::new(
            vec![d, n],
            (0..d * n).map(|i| ((i % n) + 1) as f64).map(f64::ln).collect(),
        )
        .expect("shape");
        let dt_bias = Tensor::from_vec((0..d).map(|_| inverse_softplus(rng.random_range(1e-3..1e-1))).collect());
        let dt_scale = (r as f64).powf(-0.5) * 0.1;
        Self {
            a_log: store.add(format!("{prefix}.a_log"), a_log),
            w_b: store.add(format!("{prefix}.w_b"), init::uniform(&[d, n], d, rng)),
            w_c: store.add(format!("{prefix}.w_c"), init::uniform(&[d, n], d, rng)),
            w_dt_down: store.add(format!("{prefix}.w_dt_down"), init::uniform(&[d, r], d, rng)),
            w_dt_up: store.add(
                format!("{prefix}.w_dt_up"),
                init::uniform_scaled(&[r, d], dt_scale, rng),
            ),
            dt_bias: store.add(format!("{prefix}.dt_bias"), dt_bias),
            d_skip: cfg
                .skip
                .then(|| store.add(format!("{prefix}.d_skip"), Tensor::full(&[d], 1.0))),
        }
    }
}

/// Input-dependent `(Δ, B, C)`.
#[derive(Clone, Copy, Debug)]
pub struct Projections {
    pub delta: Var,
    pub b: Var,
    pub c: Var,
}

/// `Ā` and `B̄`, both `[B, L, D, N]`.
#[derive(Clone, Copy, Debug)]
pub struct DiscreteOperators {
    pub abar: Var,
    pub bbar: Var,
}

/// `Δ = softplus(W_up(W_down h) + Δ_bias)`, `B = h W_B`, `C = h W_C`.
pub fn selective_project(
    tape: &mut Tape,
    pv: &ParamVars,
    params: &SsmParams,
    h: Var,
) -> Result<Projections, AutodiffError> {
    let low = tape.matmul(h, pv[params.w_dt_down])?;
    let up = tape.matmul(low, pv[params.w_dt_up])?;
    let pre = tape.add(up, pv[params.dt_bias])?;
    let delta = tape.softplus(pre);
    let b = tape.matmul(h, pv[params.w_b])?;
    let c = tape.matmul(h, pv[params.w_c])?;
    Ok(Projections { delta, b, c })
}

/// `A = -exp(A_log)`.
pub fn state_matrix(tape: &mut Tape, pv: &ParamVars, params: &SsmParams) -> Var {
    let e = tape.exp(pv[params.a_log]);
    tape.neg(e)
}

pub fn discretize(
    tape: &mut Tape,
    a: Var,
    b: Var,
    delta: Var,
    rule: BbarRule,
) -> Result<DiscreteOperators, AutodiffError> {
    let abar = tape.discretize_a(delta, a)?;
    let bbar = tape.discretize_b(delta, a, b, rule)?;
    Ok(DiscreteOperators { abar, bbar })
}

/// Runs the recurrence in token order and adds `skip ⊙ x` when given.
pub fn scan(tape: &mut Tape, ops: DiscreteOperators, c: Var, x: Var, skip: Option<Var>) -> Result<Var, AutodiffError> {
    scan_with(tape, ops, c, x, skip, ScanKind::Naive)
}

/// Chunked associative form of [`scan`]; same contract.
pub fn scan_blocked(
    tape: &mut Tape,
    ops: DiscreteOperators,
    c: Var,
    x: Var,
    skip: Option<Var>,
    chunk: usize,
) -> Result<Var, AutodiffError> {
    scan_with(tape, ops, c, x, skip, ScanKind::Blocked { chunk })
}

pub fn scan_with(
    tape: &mut Tape,
    ops: DiscreteOperators,
    c: Var,
    x: Var,
    skip: Option<Var>,
    kind: ScanKind,
) -> Result<Var, AutodiffError> {
    let y = tape.selective_scan(ops.abar, ops.bbar, c, x, kind)?;
    match skip {
        Some(d) => {
            let dx = tape.mul(x, d)?;
            tape.add(y, dx)
        }
        None => Ok(y),
    }
}

/// Full selective SSM over `h: [B, L, D]`, tagging each intermediate with `tag_prefix`.
pub fn ssm_forward(
    tape: &mut Tape,
    pv: &ParamVars,
    params: &SsmParams,
    cfg: &SsmConfig,
    h: Var,
    tags: &SsmTags,
) -> Result<Var, AutodiffError> {
    let a = state_matrix(tape, pv, params);
    tape.tag(a, tags.a);
    let proj = selective_project(tape, pv, params, h)?;
    tape.tag(proj.b, tags.b);
    tape.tag(proj.c, tags.c);
    tape.tag(proj.delta, tags.delta);
    let ops = discretize(tape, a, proj.b, proj.delta, cfg.rule)?;
    tape.tag(ops.abar, tags.abar);
    tape.tag(ops.bbar, tags.bbar);
    let skip = params.d_skip.map(|id| pv[id]);
    scan_with(tape, ops, proj.c, h, skip, cfg.scan)
}

/// Labels attached to the intermediates of one [`ssm_forward`] call.
#[derive(Clone, Copy, Debug)]
pub struct SsmTags {
    pub a: &'static str,
    pub b: &'static str,
    pub c: &'static str,
    pub delta: &'static str,
    pub abar: &'static str,
    pub bbar: &'static str,
}

impl SsmTags {
    pub const ANON: SsmTags = SsmTags {
        a: "ssm.a",
        b: "ssm.b",
        c: "ssm.c",
        delta: "ssm.delta",
        abar: "ssm.abar",
        bbar: "ssm.bbar",
    };
}
