//! One multi-grained encoder layer.
//!
//! The coarse-grained branch runs a selective SSM over the whole flattened
//! token sequence. The fine-grained branch first mixes each token with the
//! two before it (one return/state/action triplet) through a width-3 causal
//! convolution, then runs its own SSM. Each branch is gated by its own SiLU
//! projection of the layer input, the two are summed and layer-normalised,
//! and the residual is added before the output projection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, ParamId, ParamStore, ParamVars, Tape, Tensor, Var};
use crate::init;
use crate::ssm::{self, SsmConfig, SsmParams, SsmTags};

/// Width of the fine-grained convolution: one RSA triplet.
pub const FINE_GRAINED_WIDTH: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub channels: usize,
    pub ssm: SsmConfig,
    /// Width of the per-branch convolution ahead of each SSM.
    pub conv_width: usize,
    /// Gate the fine-grained branch with `z_cg` as well.
    pub share_gate: bool,
    /// Learnable affine on the fusion LayerNorm.
    pub fusion_affine: bool,
    /// When false the fine-grained branch is dropped entirely.
    pub multi_grained: bool,
}

impl BlockConfig {
    pub fn new(channels: usize, state_size: usize) -> Self {
        Self {
            channels,
            ssm: SsmConfig::new(channels, state_size),
            conv_width: 4,
            share_gate: false,
            fusion_affine: true,
            multi_grained: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), init::uniform(&[fan_in, fan_out], fan_in, rng)),
            bias: bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))),
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::zeros(&[fan_in, fan_out])),
            bias: Some(store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, pv: &ParamVars, x: Var) -> Result<Var, AutodiffError> {
        tape.linear(x, pv[self.weight], self.bias.map(|b| pv[b]))
    }
}

impl Norm {
    pub fn init(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, pv: &ParamVars, x: Var) -> Result<Var, AutodiffError> {
        tape.layer_norm(x, pv[self.gain], pv[self.bias])
    }
}

impl Conv {
    pub fn init(store: &mut ParamStore, name: &str, d: usize, w: usize, rng: &mut impl Rng) -> Self {
        Self {
            kernel: store.add(format!("{name}.kernel"), init::uniform(&[d, w], w, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, pv: &ParamVars, x: Var) -> Result<Var, AutodiffError> {
        tape.conv1d_causal(x, pv[self.kernel], pv[self.bias])
    }
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub conv: Conv,
    pub ssm: SsmParams,
}

#[derive(Clone, Debug)]
pub struct MGBlockParams {
    pub norm_in: Norm,
    pub conv_fg_pre: Conv,
    pub gate_cg: Linear,
    pub gate_fg: Linear,
    pub cg: Branch,
    pub fg: Branch,
    pub norm_fuse: Norm,
    pub proj_out: Linear,
}

impl MGBlockParams {
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: &BlockConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.channels;
        let branch = |store: &mut ParamStore, name: &str, rng: &mut _| Branch {
            conv: Conv::init(store, &format!("{prefix}.{name}.conv"), d, cfg.conv_width, rng),
            ssm: SsmParams::init(store, &format!("{prefix}.{name}.ssm"), d, &cfg.ssm, rng),
        };
        let norm_in = Norm::init(store, &format!("{prefix}.norm_in"), d);
        let conv_fg_pre = Conv::init(store, &format!("{prefix}.conv_fg_pre"), d, FINE_GRAINED_WIDTH, rng);
        let gate_cg = Linear::init(store, &format!("{prefix}.gate_cg"), d, d, true, rng);
        let gate_fg = Linear::init(store, &format!("{prefix}.gate_fg"), d, d, true, rng);
        let cg = branch(store, "cg", rng);
        let fg = branch(store, "fg", rng);
        let norm_fuse = Norm::init(store, &format!("{prefix}.norm_fuse"), d);
        if !cfg.fusion_affine {
            store.get_mut(norm_fuse.gain).requires_grad = false;
            store.get_mut(norm_fuse.bias).requires_grad = false;
        }
        let proj_out = Linear {
            weight: store.add(format!("{prefix}.proj_out.weight"), init::near_identity(d, 0.02, rng)),
            bias: Some(store.add(format!("{prefix}.proj_out.bias"), Tensor::zeros(&[d]))),
        };
        Self {
            norm_in,
            conv_fg_pre,
            gate_cg,
            gate_fg,
            cg,
            fg,
            norm_fuse,
            proj_out,
        }
    }
}

const CG_TAGS: SsmTags = SsmTags {
    a: "ssm.cg.a",
    b: "ssm.cg.b",
    c: "ssm.cg.c",
    delta: "ssm.cg.delta",
    abar: "ssm.cg.abar",
    bbar: "ssm.cg.bbar",
};

const FG_TAGS: SsmTags = SsmTags {
    a: "ssm.fg.a",
    b: "ssm.fg.b",
    c: "ssm.fg.c",
    delta: "ssm.fg.delta",
    abar: "ssm.fg.abar",
    bbar: "ssm.fg.bbar",
};

/// Width-3 causal depthwise convolution feeding the fine-grained branch.
pub fn fine_grained_conv(
    tape: &mut Tape,
    pv: &ParamVars,
    params: &MGBlockParams,
    h: Var,
) -> Result<Var, AutodiffError> {
    params.conv_fg_pre.forward(tape, pv, h)
}

fn branch_forward(
    tape: &mut Tape,
    pv: &ParamVars,
    branch: &Branch,
    cfg: &BlockConfig,
    h: Var,
    tags: &SsmTags,
    conv_tag: &'static str,
    out_tag: &'static str,
) -> Result<Var, AutodiffError> {
    let conv = branch.conv.forward(tape, pv, h)?;
    let act = tape.silu(conv);
    tape.tag(act, conv_tag);
    let y = ssm::ssm_forward(tape, pv, &branch.ssm, &cfg.ssm, act, tags)?;
    tape.tag(y, out_tag);
    Ok(y)
}

/// `h_prev: [B, L, D] -> [B, L, D]`.
pub fn block_forward(
    tape: &mut Tape,
    pv: &ParamVars,
    params: &MGBlockParams,
    cfg: &BlockConfig,
    h_prev: Var,
) -> Result<Var, AutodiffError> {
    let h_cg = params.norm_in.forward(tape, pv, h_prev)?;
    tape.tag(h_cg, "block.norm");
    let z_cg = params.gate_cg.forward(tape, pv, h_prev)?;
    tape.tag(z_cg, "block.gate_cg");

    let y_cg = branch_forward(
        tape,
        pv,
        &params.cg,
        cfg,
        h_cg,
        &CG_TAGS,
        "branch.cg.conv",
        "branch.cg.y",
    )?;
    let gate = tape.silu(z_cg);
    let mut mixed = tape.mul(y_cg, gate)?;
    tape.tag(mixed, "block.gated_cg");

    if cfg.multi_grained {
        let h_fg = fine_grained_conv(tape, pv, params, h_cg)?;
        tape.tag(h_fg, "block.fine_conv");
        let z_fg = if cfg.share_gate {
            z_cg
        } else {
            params.gate_fg.forward(tape, pv, h_prev)?
        };
        tape.tag(z_fg, "block.gate_fg");
        let y_fg = branch_forward(
            tape,
            pv,
            &params.fg,
            cfg,
            h_fg,
            &FG_TAGS,
            "branch.fg.conv",
            "branch.fg.y",
        )?;
        let gate = tape.silu(z_fg);
        let gated = tape.mul(y_fg, gate)?;
        tape.tag(gated, "block.gated_fg");
        mixed = tape.add(mixed, gated)?;
    }

    let h_mg = params.norm_fuse.forward(tape, pv, mixed)?;
    tape.tag(h_mg, "block.fused");
    let res = tape.add(h_mg, h_prev)?;
    let out = params.proj_out.forward(tape, pv, res)?;
    tape.tag(out, "block.out");
    Ok(out)
}
