use super::kernels;
use super::{AutodiffError, ParamId, ParamStore, Tensor};
use crate::par::Exec;
use crate::ssm::kernels as ssmk;
use crate::ssm::{BbarRule, ScanKind, SsmDims};

/// Index of a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul {
        x: Var,
        w: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    Exp(Var),
    Neg(Var),
    Silu(Var),
    Softplus(Var),
    Tanh(Var),
    Sum(Var),
    Mse {
        a: Var,
        b: Var,
    },
    MaskedMse {
        a: Var,
        b: Var,
        mask: Vec<f64>,
        count: f64,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
    },
    DiscretizeA {
        delta: Var,
        a: Var,
        dims: SsmDims,
    },
    DiscretizeB {
        delta: Var,
        a: Var,
        b: Var,
        dims: SsmDims,
        rule: BbarRule,
    },
    Scan {
        abar: Var,
        bbar: Var,
        c: Var,
        x: Var,
        dims: SsmDims,
        states: Vec<f64>,
        kind: ScanKind,
    },
    Interleave {
        parts: Vec<Var>,
    },
    SelectTokens {
        x: Var,
        offset: usize,
        stride: usize,
    },
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Per-node gradients produced by [`Tape::gradients`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Per-step dynamic graph. Operations are appended in evaluation order, so
/// the node list is already topologically sorted; backward walks it in
/// reverse. A tape created with [`Tape::no_grad`] evaluates values only.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
    exec: Exec,
    tags: Vec<(&'static str, Var)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape variables for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.index()]
    }
}

impl std::ops::Index<ParamId> for ParamVars {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.index()]
    }
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            exec: Exec::default(),
            tags: Vec::new(),
        }
    }

    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let op = if self.recording { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Labels a value so tests and diagnostics can find it after the forward pass.
    pub fn tag(&mut self, v: Var, name: &'static str) {
        self.tags.push((name, v));
    }

    pub fn tags(&self) -> &[(&'static str, Var)] {
        &self.tags
    }

    pub fn tagged(&self, name: &str) -> impl Iterator<Item = &Tensor> + '_ {
        let name = name.to_owned();
        self.tags
            .iter()
            .filter(move |(n, _)| *n == name)
            .map(move |(_, v)| self.value(*v))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let op = if p.requires_grad { Op::Param(id) } else { Op::Leaf };
        self.push(p.value.clone(), op)
    }

    pub fn params(&mut self, store: &ParamStore) -> ParamVars {
        ParamVars(store.ids().map(|id| self.param(store, id)).collect())
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a).map(f);
        self.push(v, op)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * kernels::sigmoid(x), Op::Silu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, kernels::softplus, Op::Softplus(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale { a, c })
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_suffix(ta.shape(), tb.shape()) {
            return Err(AutodiffError::ShapeMismatch {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let inner = tb.numel().max(1);
        let bd = tb.data();
        let data = ta
            .data()
            .chunks(inner)
            .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (leading-axis broadcast only).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let v = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let v = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let v = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul { a, b }))
    }

    /// `x: [..., k] · w: [k, n] -> [..., n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var, AutodiffError> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tw.rank() != 2 || tx.rank() == 0 || tx.last_dim() != tw.shape()[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        let (k, n) = (tw.shape()[0], tw.shape()[1]);
        let m = tx.numel() / k.max(1);
        let out = kernels::matmul(self.exec, tx.data(), tw.data(), m, k, n);
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::MatMul { x, w }))
    }

    /// `x · w + b` with `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, AutodiffError> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "mse",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let n = ta.numel().max(1) as f64;
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mse { a, b }))
    }

    /// Mean of squared differences over elements whose mask entry is nonzero.
    /// Returns 0 when the mask selects nothing.
    pub fn masked_mse(&mut self, a: Var, b: Var, mask: &[f64]) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() || mask.len() != ta.numel() {
            return Err(AutodiffError::ShapeMismatch {
                op: "masked_mse",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let count: f64 = mask.iter().filter(|m| **m != 0.0).count() as f64;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .zip(mask)
            .filter(|(_, m)| **m != 0.0)
            .map(|((x, y), _)| (x - y) * (x - y))
            .sum();
        let loss = if count > 0.0 { s / count } else { 0.0 };
        let mask = mask.iter().map(|m| if *m != 0.0 { 1.0 } else { 0.0 }).collect();
        Ok(self.push(Tensor::scalar(loss), Op::MaskedMse { a, b, mask, count }))
    }

    /// Normalises over the last axis (epsilon 1e-5), then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, AutodiffError> {
        let tx = self.value(x);
        let c = tx.last_dim();
        if tx.rank() == 0 || c == 0 {
            return Err(AutodiffError::EmptyChannel("layer_norm"));
        }
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(AutodiffError::ShapeMismatch {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let (y, xhat, rstd) = kernels::layer_norm(self.exec, tx.data(), tg.data(), tb.data(), c);
        let v = Tensor::new(tx.shape().to_vec(), y)?;
        let op = if self.recording {
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(v, op))
    }

    /// Depthwise causal convolution: `x: [B, L, D]`, `kernel: [D, W]`, `bias: [D]`.
    /// The sequence is left-padded with `W - 1` zeros.
    pub fn conv1d_causal(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (tx, tk, tb) = (self.value(x), self.value(kernel), self.value(bias));
        let ok = tx.rank() == 3
            && tk.rank() == 2
            && tk.shape()[0] == tx.shape()[2]
            && tk.shape()[1] >= 1
            && tb.shape() == [tx.shape()[2]];
        if !ok {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv1d_causal",
                lhs: tx.shape().to_vec(),
                rhs: tk.shape().to_vec(),
            });
        }
        let (b, l, d) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let w = tk.shape()[1];
        let out = kernels::conv1d_causal(self.exec, tx.data(), tk.data(), tb.data(), b, l, d, w);
        let v = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(v, Op::Conv1d { x, kernel, bias }))
    }

    fn ssm_dims(&self, delta: Var, a: Var) -> Result<SsmDims, AutodiffError> {
        let (td, ta) = (self.value(delta), self.value(a));
        if td.rank() != 3 || ta.rank() != 2 || ta.shape()[0] != td.shape()[2] {
            return Err(AutodiffError::ShapeMismatch {
                op: "discretize",
                lhs: td.shape().to_vec(),
                rhs: ta.shape().to_vec(),
            });
        }
        if ta.data().iter().any(|v| !(*v < 0.0)) {
            return Err(AutodiffError::NonNegativeA);
        }
        Ok(SsmDims {
            b: td.shape()[0],
            l: td.shape()[1],
            d: td.shape()[2],
            n: ta.shape()[1],
        })
    }

    /// `Ā = exp(Δ ⊗ A)`, shape `[B, L, D, N]`.
    pub fn discretize_a(&mut self, delta: Var, a: Var) -> Result<Var, AutodiffError> {
        let dims = self.ssm_dims(delta, a)?;
        let out = ssmk::discretize_a(self.exec, self.value(delta).data(), self.value(a).data(), dims);
        let v = Tensor::new(dims.state_shape().to_vec(), out)?;
        Ok(self.push(v, Op::DiscretizeA { delta, a, dims }))
    }

    /// `B̄` from `Δ: [B, L, D]`, `A: [D, N]`, `B: [B, L, N]` under `rule`.
    pub fn discretize_b(&mut self, delta: Var, a: Var, b: Var, rule: BbarRule) -> Result<Var, AutodiffError> {
        let dims = self.ssm_dims(delta, a)?;
        if self.value(b).shape() != [dims.b, dims.l, dims.n] {
            return Err(AutodiffError::ShapeMismatch {
                op: "discretize_b",
                lhs: self.value(delta).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let out = ssmk::discretize_b(
            self.exec,
            self.value(delta).data(),
            self.value(a).data(),
            self.value(b).data(),
            dims,
            rule,
        );
        let v = Tensor::new(dims.state_shape().to_vec(), out)?;
        Ok(self.push(
            v,
            Op::DiscretizeB {
                delta,
                a,
                b,
                dims,
                rule,
            },
        ))
    }

    /// Linear recurrence `h_t = Ā_t h_{t-1} + B̄_t x_t`, `y_t = C_t · h_t`, from `h_{-1} = 0`.
    pub fn selective_scan(
        &mut self,
        abar: Var,
        bbar: Var,
        c: Var,
        x: Var,
        kind: ScanKind,
    ) -> Result<Var, AutodiffError> {
        let tx = self.value(x);
        let ta = self.value(abar);
        let ok = tx.rank() == 3
            && ta.rank() == 4
            && ta.shape()[..3] == *tx.shape()
            && self.value(bbar).shape() == ta.shape()
            && self.value(c).shape() == [ta.shape()[0], ta.shape()[1], ta.shape()[3]];
        if !ok {
            return Err(AutodiffError::ShapeMismatch {
                op: "selective_scan",
                lhs: ta.shape().to_vec(),
                rhs: tx.shape().to_vec(),
            });
        }
        let s = ta.shape();
        let dims = SsmDims {
            b: s[0],
            l: s[1],
            d: s[2],
            n: s[3],
        };
        let (ad, bd, cd, xd) = (
            self.value(abar).data(),
            self.value(bbar).data(),
            self.value(c).data(),
            self.value(x).data(),
        );
        let states = match kind {
            ScanKind::Naive => ssmk::scan_states_naive(self.exec, ad, bd, xd, dims),
            ScanKind::Blocked { chunk } => ssmk::scan_states_blocked(self.exec, ad, bd, xd, dims, chunk),
        };
        let y = ssmk::scan_output(self.exec, &states, cd, dims);
        let v = Tensor::new(vec![dims.b, dims.l, dims.d], y)?;
        let op = if self.recording {
            Op::Scan {
                abar,
                bbar,
                c,
                x,
                dims,
                states,
                kind,
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(v, op))
    }

    /// Interleaves `k` tensors of shape `[B, l, D]` into `[B, k·l, D]`
    /// ordered `p0[0], p1[0], …, p0[1], p1[1], …`.
    pub fn interleave(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = self.value(parts[0]).shape().to_vec();
        if first.len() != 3 || parts.iter().any(|p| self.value(*p).shape() != first) {
            return Err(AutodiffError::ShapeMismatch {
                op: "interleave",
                lhs: first.clone(),
                rhs: self.value(*parts.last().unwrap()).shape().to_vec(),
            });
        }
        let (b, l, d) = (first[0], first[1], first[2]);
        let k = parts.len();
        let mut out = Vec::with_capacity(b * k * l * d);
        for bi in 0..b {
            for t in 0..l {
                for p in parts {
                    let src = &self.value(*p).data()[(bi * l + t) * d..(bi * l + t + 1) * d];
                    out.extend_from_slice(src);
                }
            }
        }
        let v = Tensor::new(vec![b, k * l, d], out)?;
        Ok(self.push(v, Op::Interleave { parts: parts.to_vec() }))
    }

    /// Picks tokens `offset, offset + stride, …` along axis 1 of `[B, L, D]`.
    pub fn select_tokens(&mut self, x: Var, offset: usize, stride: usize) -> Result<Var, AutodiffError> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 || stride == 0 || !s[1].is_multiple_of(stride) || offset >= stride {
            return Err(AutodiffError::InvalidArgument(format!(
                "select_tokens offset {offset} stride {stride} on {s:?}"
            )));
        }
        let (b, l, d) = (s[0], s[1], s[2]);
        let m = l / stride;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * m * d);
        for bi in 0..b {
            for j in 0..m {
                let t = j * stride + offset;
                out.extend_from_slice(&src[(bi * l + t) * d..(bi * l + t + 1) * d]);
            }
        }
        let v = Tensor::new(vec![b, m, d], out)?;
        Ok(self.push(v, Op::SelectTokens { x, offset, stride }))
    }

    /// Row lookup: `table: [T, D]`, returns `[rows.len(), D]` reshaped to `out_shape ++ [D]`.
    pub fn gather(&mut self, table: Var, rows: &[usize], out_shape: &[usize]) -> Result<Var, AutodiffError> {
        let ts = self.value(table).shape().to_vec();
        if ts.len() != 2 || out_shape.iter().product::<usize>() != rows.len() {
            return Err(AutodiffError::InvalidArgument(format!(
                "gather {} rows into {out_shape:?} from {ts:?}",
                rows.len()
            )));
        }
        if let Some(r) = rows.iter().find(|r| **r >= ts[0]) {
            return Err(AutodiffError::InvalidArgument(format!(
                "gather row {r} out of range for table of {} rows",
                ts[0]
            )));
        }
        let d = ts[1];
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for r in rows {
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let mut shape = out_shape.to_vec();
        shape.push(d);
        let v = Tensor::new(shape, out)?;
        Ok(self.push(
            v,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar `loss`; returns the gradient of every node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        if !self.recording {
            return Err(AutodiffError::NotRecording);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Accumulates `d loss / d param` into every gradient accumulator of `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<(), AutodiffError> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                let acc = store.get_mut(*id).grad.data_mut();
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let exec = self.exec;
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { x, w } => {
                let tw = &self.nodes[w.0].value;
                let (k, n) = (tw.shape()[0], tw.shape()[1]);
                let m = self.nodes[x.0].value.numel() / k.max(1);
                accumulate(grads, *x, kernels::matmul_grad_x(exec, g, val(*w), m, k, n));
                accumulate(grads, *w, kernels::matmul_grad_w(exec, val(*x), g, m, k, n));
            }
            Op::Add { a, b } => {
                let inner = self.nodes[b.0].value.numel().max(1);
                accumulate(grads, *a, g.to_vec());
                accumulate(grads, *b, kernels::reduce_leading(g, inner));
            }
            Op::Sub { a, b } => {
                let inner = self.nodes[b.0].value.numel().max(1);
                accumulate(grads, *a, g.to_vec());
                let gb = kernels::reduce_leading(g, inner);
                accumulate(grads, *b, gb.into_iter().map(|v| -v).collect());
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (val(*a), val(*b));
                let inner = bd.len().max(1);
                let ga: Vec<f64> = g
                    .chunks(inner)
                    .flat_map(|row| row.iter().zip(bd).map(|(x, y)| x * y))
                    .collect();
                let prod: Vec<f64> = g.iter().zip(ad).map(|(x, y)| x * y).collect();
                accumulate(grads, *a, ga);
                accumulate(grads, *b, kernels::reduce_leading(&prod, inner));
            }
            Op::Scale { a, c } => accumulate(grads, *a, g.iter().map(|v| v * c).collect()),
            Op::Exp(a) => {
                let y = node.value.data();
                accumulate(grads, *a, g.iter().zip(y).map(|(g, y)| g * y).collect());
            }
            Op::Neg(a) => accumulate(grads, *a, g.iter().map(|v| -v).collect()),
            Op::Silu(a) => {
                let gx = g
                    .iter()
                    .zip(val(*a))
                    .map(|(g, &x)| {
                        let s = kernels::sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                accumulate(grads, *a, gx);
            }
            Op::Softplus(a) => {
                let gx = g.iter().zip(val(*a)).map(|(g, &x)| g * kernels::sigmoid(x)).collect();
                accumulate(grads, *a, gx);
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                accumulate(grads, *a, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect());
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.numel();
                accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mse { a, b } => {
                let (ad, bd) = (val(*a), val(*b));
                let scale = 2.0 * g[0] / ad.len().max(1) as f64;
                let ga: Vec<f64> = ad.iter().zip(bd).map(|(x, y)| scale * (x - y)).collect();
                accumulate(grads, *b, ga.iter().map(|v| -v).collect());
                accumulate(grads, *a, ga);
            }
            Op::MaskedMse { a, b, mask, count } => {
                let (ad, bd) = (val(*a), val(*b));
                let scale = if *count > 0.0 { 2.0 * g[0] / count } else { 0.0 };
                let ga: Vec<f64> = ad
                    .iter()
                    .zip(bd)
                    .zip(mask)
                    .map(|((x, y), m)| m * scale * (x - y))
                    .collect();
                accumulate(grads, *b, ga.iter().map(|v| -v).collect());
                accumulate(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = self.nodes[gain.0].value.numel();
                let (gx, gg, gb) = kernels::layer_norm_backward(exec, g, xhat, rstd, val(*gain), c);
                accumulate(grads, *x, gx);
                accumulate(grads, *gain, gg);
                accumulate(grads, *bias, gb);
            }
            Op::Conv1d { x, kernel, bias } => {
                let s = self.nodes[x.0].value.shape();
                let w = self.nodes[kernel.0].value.shape()[1];
                let (gx, gk, gb) = kernels::conv1d_causal_backward(exec, g, val(*x), val(*kernel), s[0], s[1], s[2], w);
                accumulate(grads, *x, gx);
                accumulate(grads, *kernel, gk);
                accumulate(grads, *bias, gb);
            }
            Op::DiscretizeA { delta, a, dims } => {
                let (gd, ga) = ssmk::discretize_a_backward(exec, g, node.value.data(), val(*delta), val(*a), *dims);
                accumulate(grads, *delta, gd);
                accumulate(grads, *a, ga);
            }
            Op::DiscretizeB {
                delta,
                a,
                b,
                dims,
                rule,
            } => {
                let (gd, ga, gb) = ssmk::discretize_b_backward(exec, g, val(*delta), val(*a), val(*b), *dims, *rule);
                accumulate(grads, *delta, gd);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Scan {
                abar,
                bbar,
                c,
                x,
                dims,
                states,
                kind,
            } => {
                let (ad, bd, cd, xd) = (val(*abar), val(*bbar), val(*c), val(*x));
                let lam = match kind {
                    ScanKind::Naive => ssmk::adjoint_naive(exec, g, ad, cd, *dims),
                    ScanKind::Blocked { chunk } => ssmk::adjoint_blocked(exec, g, ad, cd, *dims, *chunk),
                };
                let (ga, gb, gx) = ssmk::scan_param_grads(exec, &lam, states, bd, xd, *dims);
                let gc = ssmk::scan_output_grad_c(exec, g, states, *dims);
                accumulate(grads, *abar, ga);
                accumulate(grads, *bbar, gb);
                accumulate(grads, *c, gc);
                accumulate(grads, *x, gx);
            }
            Op::Interleave { parts } => {
                let s = self.nodes[parts[0].0].value.shape();
                let (b, l, d) = (s[0], s[1], s[2]);
                let k = parts.len();
                for (pi, p) in parts.iter().enumerate() {
                    let mut gp = vec![0.0; b * l * d];
                    for bi in 0..b {
                        for t in 0..l {
                            let src = ((bi * l + t) * k + pi) * d;
                            gp[(bi * l + t) * d..(bi * l + t + 1) * d].copy_from_slice(&g[src..src + d]);
                        }
                    }
                    accumulate(grads, *p, gp);
                }
            }
            Op::SelectTokens { x, offset, stride } => {
                let s = self.nodes[x.0].value.shape();
                let (b, l, d) = (s[0], s[1], s[2]);
                let m = l / stride;
                let mut gx = vec![0.0; b * l * d];
                for bi in 0..b {
                    for j in 0..m {
                        let t = j * stride + offset;
                        gx[(bi * l + t) * d..(bi * l + t + 1) * d]
                            .copy_from_slice(&g[(bi * m + j) * d..(bi * m + j + 1) * d]);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Gather { table, rows } => {
                let ts = self.nodes[table.0].value.shape();
                let d = ts[1];
                let mut gt = vec![0.0; ts[0] * d];
                for (i, r) in rows.iter().enumerate() {
                    for c in 0..d {
                        gt[r * d + c] += g[i * d + c];
                    }
                }
                accumulate(grads, *table, gt);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, x) in acc.iter_mut().zip(&g) {
                *a += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
