use super::conv::{ConvOptions, ConvPlan};
use super::{shape_err, Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst { input: Var, factor: Vec<f64> },
    Conv { input: Var, kernel: Var, bias: Option<Var>, plan: Box<ConvPlan> },
    Linear { input: Var, weight: Var, bias: Option<Var>, n_in: usize, n_out: usize },
    GroupNorm { input: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    LayerNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Sigmoid(Var),
    SignedBound { input: Var, scale: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, bias: Option<Var>, probs: Vec<f64>, dims: [usize; 4] },
    Concat(Vec<Var>),
    Permute { input: Var, perm: Vec<usize> },
    Reshape(Var),
    Narrow { input: Var, offset: usize },
    MeanAxis0(Var),
    Gather { table: Var, rows: Vec<usize> },
    Sum(Var),
    SumSq(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation record. Creation order is a topological order, so
/// the backward sweep simply walks the node list in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    checked: bool,
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Result<Tensor> {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(self.shapes[v.0].clone(), g.clone()),
            None => Err(TensorError::DetachedLeaf(v.0)),
        }
    }

    /// Gradient as a flat vector, zeros when nothing reached the leaf.
    pub fn get_or_zero(&self, v: Var) -> Vec<f64> {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => vec![0.0; self.shapes[v.0].iter().product()],
        }
    }

    pub fn take_or_zero(&mut self, v: Var) -> Vec<f64> {
        match self.grads.get_mut(v.0).and_then(|g| g.take()) {
            Some(g) => g,
            None => vec![0.0; self.shapes[v.0].iter().product()],
        }
    }
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * INV_SQRT2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * INV_SQRT2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `s * (2 sigmoid(x / s) - 1)` pulled strictly inside `(-s, s)`.
pub(crate) fn signed_bound_scalar(x: f64, s: f64) -> f64 {
    let y = s * (0.5 * x / s).tanh();
    if y.abs() < s {
        y
    } else {
        // saturated tanh rounds onto the bound; step one ulp back inside
        let inner = f64::from_bits(s.to_bits() - 1);
        inner.copysign(y)
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output element of a permutation, the flat input offset it reads.
fn permute_gather_index(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_str = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let n: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut res = Vec::with_capacity(n);
    for _ in 0..n {
        let off: usize = (0..rank).map(|a| idx[a] * in_str[perm[a]]).sum();
        res.push(off);
        for a in (0..rank).rev() {
            idx[a] += 1;
            if idx[a] < out_shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    res
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::MulConst { .. } => "mul_const",
        Op::Conv { .. } => "conv_nd",
        Op::Linear { .. } => "linear",
        Op::GroupNorm { .. } => "group_norm",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Gelu(_) => "gelu",
        Op::Sigmoid(_) => "sigmoid",
        Op::SignedBound { .. } => "signed_bound",
        Op::Attention { .. } => "attention",
        Op::Concat(_) => "concat",
        Op::Permute { .. } => "permute",
        Op::Reshape(_) => "reshape",
        Op::Narrow { .. } => "narrow",
        Op::MeanAxis0(_) => "mean_axis0",
        Op::Gather { .. } => "gather",
        Op::Sum(_) => "sum",
        Op::SumSq(_) => "sum_sq",
    }
}

fn inputs_of(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Gelu(a)
        | Op::Sigmoid(a)
        | Op::Reshape(a)
        | Op::MeanAxis0(a)
        | Op::Sum(a)
        | Op::SumSq(a) => vec![*a],
        Op::MulConst { input, .. }
        | Op::SignedBound { input, .. }
        | Op::Permute { input, .. }
        | Op::Narrow { input, .. } => vec![*input],
        Op::Conv { input, kernel, bias, .. } => {
            let mut v = vec![*input, *kernel];
            v.extend(bias.iter().copied());
            v
        }
        Op::Linear { input, weight, bias, .. } => {
            let mut v = vec![*input, *weight];
            v.extend(bias.iter().copied());
            v
        }
        Op::GroupNorm { input, gamma, beta, .. } | Op::LayerNorm { input, gamma, beta, .. } => {
            vec![*input, *gamma, *beta]
        }
        Op::Attention { q, k, v, bias, .. } => {
            let mut r = vec![*q, *k, *v];
            r.extend(bias.iter().copied());
            r
        }
        Op::Concat(vs) => vs.clone(),
        Op::Gather { table, .. } => vec![*table],
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Checked mode reports the first operation producing NaN or infinity.
    pub fn checked() -> Self {
        Graph {
            nodes: Vec::new(),
            checked: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name(&op) });
        }
        let requires_grad = inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op_name(&op), a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(t, op)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let data = self.data(a).iter().map(|x| f(*x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    /// Elementwise product with a non-differentiable factor of the same size.
    pub fn mul_const(&mut self, a: Var, factor: Vec<f64>) -> Result<Var> {
        if factor.len() != self.value(a).numel() {
            return shape_err("mul_const", "factor length differs from input");
        }
        let data = self.data(a).iter().zip(&factor).map(|(x, f)| x * f).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(t, Op::MulConst { input: a, factor })
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Gelu(a), gelu_scalar)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), sigmoid_scalar)
    }

    /// Per-element bounded squashing `y = s (2 sigmoid(x/s) - 1)`, `|y| < s`.
    pub fn signed_bound(&mut self, a: Var, scale: Vec<f64>) -> Result<Var> {
        if scale.len() != self.value(a).numel() {
            return shape_err("signed_bound", "scale length differs from input");
        }
        if scale.iter().any(|s| !(*s > 0.0)) {
            return Err(TensorError::InvalidArgument {
                op: "signed_bound",
                detail: "scales must be positive".into(),
            });
        }
        let data = self
            .data(a)
            .iter()
            .zip(&scale)
            .map(|(x, s)| signed_bound_scalar(*x, *s))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(t, Op::SignedBound { input: a, scale })
    }

    pub fn conv_nd(&mut self, input: Var, kernel: Var, bias: Option<Var>, opts: ConvOptions) -> Result<Var> {
        let plan = ConvPlan::new(
            self.shape(input),
            self.shape(kernel),
            bias.map(|b| self.shape(b)),
            opts,
        )?;
        let out = plan.forward(self.data(input), self.data(kernel), bias.map(|b| self.data(b)));
        let t = Tensor::new(plan.out_shape.clone(), out)?;
        self.push(
            t,
            Op::Conv {
                input,
                kernel,
                bias,
                plan: Box::new(plan),
            },
        )
    }

    /// Affine map along the trailing dimension: `x W^T + b`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let ws = self.shape(weight).to_vec();
        if ws.len() != 2 {
            return shape_err("linear", format!("weight rank {}", ws.len()));
        }
        let (n_out, n_in) = (ws[0], ws[1]);
        let is = self.shape(input).to_vec();
        if is.last() != Some(&n_in) {
            return shape_err("linear", format!("input {:?} vs weight {:?}", is, ws));
        }
        if let Some(b) = bias {
            if self.shape(b) != [n_out] {
                return shape_err("linear", format!("bias {:?}", self.shape(b)));
            }
        }
        let rows = self.value(input).numel() / n_in;
        let x = self.data(input);
        let w = self.data(weight);
        let mut out = vec![0.0; rows * n_out];
        for r in 0..rows {
            let xr = &x[r * n_in..(r + 1) * n_in];
            let orow = &mut out[r * n_out..(r + 1) * n_out];
            for (o, ov) in orow.iter_mut().enumerate() {
                let wr = &w[o * n_in..(o + 1) * n_in];
                *ov = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(b) = bias {
            let bd = self.data(b);
            for r in 0..rows {
                for o in 0..n_out {
                    out[r * n_out + o] += bd[o];
                }
            }
        }
        let mut shape = is;
        *shape.last_mut().unwrap() = n_out;
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::Linear { input, weight, bias, n_in, n_out })
    }

    pub fn group_norm(&mut self, input: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return shape_err("group_norm", "input needs a channel and a spatial axis");
        }
        let c = shape[0];
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::InvalidArgument {
                op: "group_norm",
                detail: format!("{} groups do not divide {} channels", groups, c),
            });
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err("group_norm", "gamma/beta must be [C]");
        }
        let plane = self.value(input).numel() / c;
        let per = c / groups;
        let x = self.data(input);
        let (gm, bt) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; groups];
        let mut out = vec![0.0; x.len()];
        let count = (per * plane) as f64;
        for g in 0..groups {
            let range = g * per * plane..(g + 1) * per * plane;
            let seg = &x[range.clone()];
            let mean = seg.iter().sum::<f64>() / count;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[g] = rs;
            for (i, idx) in range.enumerate() {
                let ch = g * per + i / plane;
                let xh = (x[idx] - mean) * rs;
                xhat[idx] = xh;
                out[idx] = xh * gm[ch] + bt[ch];
            }
        }
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::GroupNorm { input, gamma, beta, groups, xhat, rstd })
    }

    /// Normalization over the trailing dimension of each row.
    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let d = *shape.last().ok_or(TensorError::ShapeMismatch {
            op: "layer_norm",
            detail: "scalar input".into(),
        })?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return shape_err("layer_norm", "gamma/beta must match trailing dim");
        }
        let x = self.data(input);
        let rows = x.len() / d;
        let (gm, bt) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let seg = &x[r * d..(r + 1) * d];
            let mean = seg.iter().sum::<f64>() / d as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (seg[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gm[j] + bt[j];
            }
        }
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::LayerNorm { input, gamma, beta, xhat, rstd })
    }

    /// Scaled dot-product self-attention with an additive per-head bias.
    ///
    /// `q`, `k`, `v` are `[heads, L, d_h]` or batched `[B, heads, L, d_h]`;
    /// `rel_bias` is `[heads, L, L]` and shared across the batch.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, rel_bias: Option<Var>) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (b, h, l, dh) = match qs.as_slice() {
            [h, l, d] => (1, *h, *l, *d),
            [b, h, l, d] => (*b, *h, *l, *d),
            _ => return shape_err("attention", format!("rank {} input", qs.len())),
        };
        if let Some(rb) = rel_bias {
            if self.shape(rb) != [h, l, l] {
                return shape_err(
                    "attention",
                    format!("bias {:?}, expected [{}, {}, {}]", self.shape(rb), h, l, l),
                );
            }
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let bd = rel_bias.map(|rb| self.data(rb));
        let mut probs = vec![0.0; b * h * l * l];
        let mut out = vec![0.0; qd.len()];
        for bi in 0..b {
            for hi in 0..h {
                let base = (bi * h + hi) * l * dh;
                let pbase = (bi * h + hi) * l * l;
                for i in 0..l {
                    let qi = &qd[base + i * dh..base + (i + 1) * dh];
                    let prow = &mut probs[pbase + i * l..pbase + (i + 1) * l];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..l {
                        let kj = &kd[base + j * dh..base + (j + 1) * dh];
                        let mut s = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                        if let Some(bd) = bd {
                            s += bd[(hi * l + i) * l + j];
                        }
                        prow[j] = s;
                        mx = mx.max(s);
                    }
                    let mut z = 0.0;
                    for p in prow.iter_mut() {
                        *p = (*p - mx).exp();
                        z += *p;
                    }
                    for p in prow.iter_mut() {
                        *p /= z;
                    }
                    let orow = &mut out[base + i * dh..base + (i + 1) * dh];
                    for j in 0..l {
                        let pj = prow[j];
                        let vj = &vd[base + j * dh..base + (j + 1) * dh];
                        for (o, vv) in orow.iter_mut().zip(vj) {
                            *o += pj * vv;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(qs, out)?;
        self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                bias: rel_bias,
                probs,
                dims: [b, h, l, dh],
            },
        )
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = match parts.first() {
            Some(p) => self.shape(*p).to_vec(),
            None => return shape_err("concat", "no inputs"),
        };
        if first.is_empty() {
            return shape_err("concat", "scalar inputs");
        }
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let s = self.shape(*p);
            if s.len() != first.len() || s[1..] != first[1..] {
                return shape_err("concat", format!("{:?} vs {:?}", s, first));
            }
            lead += s[0];
            data.extend_from_slice(self.data(*p));
        }
        let mut shape = first;
        shape[0] = lead;
        let t = Tensor::new(shape, data)?;
        self.push(t, Op::Concat(parts.to_vec()))
    }

    pub fn permute(&mut self, input: Var, perm: &[usize]) -> Result<Var> {
        let is = self.shape(input).to_vec();
        let mut check = perm.to_vec();
        check.sort_unstable();
        if perm.len() != is.len() || check != (0..is.len()).collect::<Vec<_>>() {
            return shape_err("permute", format!("bad permutation {:?} for rank {}", perm, is.len()));
        }
        let idx = permute_gather_index(&is, perm);
        let x = self.data(input);
        let data = idx.iter().map(|&i| x[i]).collect();
        let shape = perm.iter().map(|&p| is[p]).collect();
        let t = Tensor::new(shape, data)?;
        self.push(
            t,
            Op::Permute {
                input,
                perm: perm.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), self.data(input).to_vec())?;
        self.push(t, Op::Reshape(input))
    }

    /// Contiguous window of the flattened input, viewed with `shape`.
    pub fn narrow(&mut self, input: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let x = self.data(input);
        if offset + n > x.len() {
            return shape_err(
                "narrow",
                format!("window {}..{} exceeds length {}", offset, offset + n, x.len()),
            );
        }
        let t = Tensor::new(shape.to_vec(), x[offset..offset + n].to_vec())?;
        self.push(t, Op::Narrow { input, offset })
    }

    pub fn mean_axis0(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.is_empty() || s[0] == 0 {
            return shape_err("mean_axis0", "empty leading axis");
        }
        let n = s[0];
        let inner = self.value(input).numel() / n;
        let x = self.data(input);
        let mut out = vec![0.0; inner];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(&x[r * inner..(r + 1) * inner]) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= n as f64;
        }
        let t = Tensor::new(s[1..].to_vec(), out)?;
        self.push(t, Op::MeanAxis0(input))
    }

    /// Selects rows of `table` (leading axis) by index, with repetition.
    pub fn gather_rows(&mut self, table: Var, rows: Vec<usize>) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.is_empty() {
            return shape_err("gather_rows", "scalar table");
        }
        if let Some(bad) = rows.iter().find(|&&r| r >= s[0]) {
            return shape_err("gather_rows", format!("row {} out of {}", bad, s[0]));
        }
        let inner = self.value(table).numel() / s[0];
        let x = self.data(table);
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in &rows {
            data.extend_from_slice(&x[r * inner..(r + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = rows.len();
        let t = Tensor::new(shape, data)?;
        self.push(t, Op::Gather { table, rows })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn sum_sq(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSq(a))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let s = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(s.to_vec()));
        }
        self.backward_with(loss, &[1.0])
    }

    /// Reverse sweep seeded with an arbitrary cotangent for `output`.
    pub fn backward_with(&self, output: Var, seed: &[f64]) -> Result<Gradients> {
        if seed.len() != self.value(output).numel() {
            return shape_err("backward", "seed length differs from output");
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(seed.to_vec());
        }
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
        }
        // only leaves keep gradients
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let gb = g.iter().zip(self.data(*b)).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, gb);
                }
                if self.needs(*b) {
                    let ga = g.iter().zip(self.data(*a)).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, ga);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.iter().map(|v| v * c).collect()),
            Op::MulConst { input, factor } => {
                self.accumulate(grads, *input, g.iter().zip(factor).map(|(x, f)| x * f).collect())
            }
            Op::Gelu(a) => {
                let ga = g.iter().zip(self.data(*a)).map(|(gv, x)| gv * gelu_grad(*x)).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(gv, s)| gv * s * (1.0 - s))
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::SignedBound { input, scale } => {
                // d/dx s tanh(x / 2s) = (1 - (y/s)^2) / 2
                let ga = g
                    .iter()
                    .zip(node.value.data())
                    .zip(scale)
                    .map(|((gv, y), s)| {
                        let r = y / s;
                        gv * 0.5 * (1.0 - r * r)
                    })
                    .collect();
                self.accumulate(grads, *input, ga);
            }
            Op::Conv { input, kernel, bias, plan } => {
                let (gi, gk, gb) = plan.backward(
                    self.data(*input),
                    self.data(*kernel),
                    g,
                    self.needs(*input),
                    self.needs(*kernel),
                    bias.map(|b| self.needs(b)).unwrap_or(false),
                );
                if let Some(gi) = gi {
                    self.accumulate(grads, *input, gi);
                }
                if let Some(gk) = gk {
                    self.accumulate(grads, *kernel, gk);
                }
                if let (Some(b), Some(gb)) = (bias, gb) {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Linear { input, weight, bias, n_in, n_out } => {
                let (n_in, n_out) = (*n_in, *n_out);
                let x = self.data(*input);
                let w = self.data(*weight);
                let rows = x.len() / n_in;
                if self.needs(*input) {
                    let mut gx = vec![0.0; x.len()];
                    for r in 0..rows {
                        let gr = &g[r * n_out..(r + 1) * n_out];
                        let gxr = &mut gx[r * n_in..(r + 1) * n_in];
                        for (o, gv) in gr.iter().enumerate() {
                            if *gv == 0.0 {
                                continue;
                            }
                            let wr = &w[o * n_in..(o + 1) * n_in];
                            for (a, b) in gxr.iter_mut().zip(wr) {
                                *a += gv * b;
                            }
                        }
                    }
                    self.accumulate(grads, *input, gx);
                }
                if self.needs(*weight) {
                    let mut gw = vec![0.0; w.len()];
                    for r in 0..rows {
                        let gr = &g[r * n_out..(r + 1) * n_out];
                        let xr = &x[r * n_in..(r + 1) * n_in];
                        for (o, gv) in gr.iter().enumerate() {
                            if *gv == 0.0 {
                                continue;
                            }
                            let gwr = &mut gw[o * n_in..(o + 1) * n_in];
                            for (a, b) in gwr.iter_mut().zip(xr) {
                                *a += gv * b;
                            }
                        }
                    }
                    self.accumulate(grads, *weight, gw);
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let mut gb = vec![0.0; n_out];
                        for r in 0..rows {
                            for (a, gv) in gb.iter_mut().zip(&g[r * n_out..(r + 1) * n_out]) {
                                *a += gv;
                            }
                        }
                        self.accumulate(grads, *b, gb);
                    }
                }
            }
            Op::GroupNorm { input, gamma, beta, groups, xhat, rstd } => {
                let c = self.shape(*gamma)[0];
                let plane = xhat.len() / c;
                let per = c / groups;
                let gm = self.data(*gamma);
                let mut ggam = vec![0.0; c];
                let mut gbet = vec![0.0; c];
                for idx in 0..xhat.len() {
                    let ch = idx / plane;
                    ggam[ch] += g[idx] * xhat[idx];
                    gbet[ch] += g[idx];
                }
                if self.needs(*input) {
                    let mut gx = vec![0.0; xhat.len()];
                    let count = (per * plane) as f64;
                    for grp in 0..*groups {
                        let range = grp * per * plane..(grp + 1) * per * plane;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for idx in range.clone() {
                            let dxh = g[idx] * gm[idx / plane];
                            m1 += dxh;
                            m2 += dxh * xhat[idx];
                        }
                        m1 /= count;
                        m2 /= count;
                        for idx in range {
                            let dxh = g[idx] * gm[idx / plane];
                            gx[idx] = rstd[grp] * (dxh - m1 - xhat[idx] * m2);
                        }
                    }
                    self.accumulate(grads, *input, gx);
                }
                self.accumulate(grads, *gamma, ggam);
                self.accumulate(grads, *beta, gbet);
            }
            Op::LayerNorm { input, gamma, beta, xhat, rstd } => {
                let d = self.shape(*gamma)[0];
                let rows = xhat.len() / d;
                let gm = self.data(*gamma);
                let mut ggam = vec![0.0; d];
                let mut gbet = vec![0.0; d];
                let mut gx = vec![0.0; xhat.len()];
                for r in 0..rows {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let idx = r * d + j;
                        ggam[j] += g[idx] * xhat[idx];
                        gbet[j] += g[idx];
                        let dxh = g[idx] * gm[j];
                        m1 += dxh;
                        m2 += dxh * xhat[idx];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        let idx = r * d + j;
                        gx[idx] = rstd[r] * (g[idx] * gm[j] - m1 - xhat[idx] * m2);
                    }
                }
                self.accumulate(grads, *input, gx);
                self.accumulate(grads, *gamma, ggam);
                self.accumulate(grads, *beta, gbet);
            }
            Op::Attention { q, k, v, bias, probs, dims } => {
                let [b, h, l, dh] = *dims;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (self.data(*q), self.data(*k), self.data(*v));
                let mut gq = vec![0.0; qd.len()];
                let mut gk = vec![0.0; kd.len()];
                let mut gv = vec![0.0; vd.len()];
                let mut gbias = bias.map(|_| vec![0.0; h * l * l]);
                let mut ds = vec![0.0; l];
                for bi in 0..b {
                    for hi in 0..h {
                        let base = (bi * h + hi) * l * dh;
                        let pbase = (bi * h + hi) * l * l;
                        for i in 0..l {
                            let prow = &probs[pbase + i * l..pbase + (i + 1) * l];
                            let go = &g[base + i * dh..base + (i + 1) * dh];
                            // dP_ij = go . v_j ; dV_j += P_ij go
                            let mut dot = 0.0;
                            for j in 0..l {
                                let vj = &vd[base + j * dh..base + (j + 1) * dh];
                                let dp: f64 = go.iter().zip(vj).map(|(a, c)| a * c).sum();
                                ds[j] = dp;
                                dot += dp * prow[j];
                                let gvj = &mut gv[base + j * dh..base + (j + 1) * dh];
                                for (a, c) in gvj.iter_mut().zip(go) {
                                    *a += prow[j] * c;
                                }
                            }
                            for j in 0..l {
                                ds[j] = prow[j] * (ds[j] - dot);
                            }
                            if let Some(gb) = gbias.as_mut() {
                                for j in 0..l {
                                    gb[(hi * l + i) * l + j] += ds[j];
                                }
                            }
                            let qi = &qd[base + i * dh..base + (i + 1) * dh];
                            for j in 0..l {
                                let s = ds[j] * scale;
                                if s == 0.0 {
                                    continue;
                                }
                                let kj = &kd[base + j * dh..base + (j + 1) * dh];
                                let gqi = &mut gq[base + i * dh..base + (i + 1) * dh];
                                for (a, c) in gqi.iter_mut().zip(kj) {
                                    *a += s * c;
                                }
                                let gkj = &mut gk[base + j * dh..base + (j + 1) * dh];
                                for (a, c) in gkj.iter_mut().zip(qi) {
                                    *a += s * c;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, gq);
                self.accumulate(grads, *k, gk);
                self.accumulate(grads, *v, gv);
                if let (Some(bv), Some(gb)) = (bias, gbias) {
                    self.accumulate(grads, *bv, gb);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    self.accumulate(grads, *p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::Permute { input, perm } => {
                let idx = permute_gather_index(self.shape(*input), perm);
                let mut gi = vec![0.0; g.len()];
                for (o, &src) in idx.iter().enumerate() {
                    gi[src] = g[o];
                }
                self.accumulate(grads, *input, gi);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Narrow { input, offset } => {
                if self.needs(*input) {
                    let mut gi = vec![0.0; self.value(*input).numel()];
                    gi[*offset..*offset + g.len()].copy_from_slice(g);
                    self.accumulate(grads, *input, gi);
                }
            }
            Op::MeanAxis0(a) => {
                let n = self.shape(*a)[0];
                let inner = g.len();
                let mut gi = Vec::with_capacity(n * inner);
                for _ in 0..n {
                    gi.extend(g.iter().map(|v| v / n as f64));
                }
                self.accumulate(grads, *a, gi);
            }
            Op::Gather { table, rows } => {
                if self.needs(*table) {
                    let t = self.value(*table);
                    let inner = t.numel() / t.shape()[0];
                    let mut gt = vec![0.0; t.numel()];
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..inner {
                            gt[r * inner + j] += g[k * inner + j];
                        }
                    }
                    self.accumulate(grads, *table, gt);
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::SumSq(a) => {
                let ga = self.data(*a).iter().map(|x| 2.0 * x * g[0]).collect();
                self.accumulate(grads, *a, ga);
            }
        }
    }
}
