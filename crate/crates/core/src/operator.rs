//! The evolution-operator network: a small U-Net evaluated entirely from an
//! externally supplied flat parameter vector.
//!
//! Block structure (stride-2 kernels of size 2, spatial kernels of size 3):
//!
//! ```text
//! stem:    conv k3 (m[+mask] -> c) GeLU, conv k3 (c -> c) GeLU
//! down l:  conv k2 s2 (c_{l-1} -> c_l) GeLU, grouped conv k3, GroupNorm, GeLU
//! mid:     1x1 conv (c_D -> 2 c_D) GeLU, 1x1 conv (2 c_D -> c_D)
//! up l:    transposed conv k2 s2 (c_l -> c_{l-1}) GeLU, interleave with skip,
//!          grouped conv k3 (2 c_{l-1} -> c_{l-1}), GroupNorm, GeLU
//! head:    conv k3 (c -> m)
//! ```
//!
//! The k3 convolutions inside down/up blocks are channel-grouped (one group
//! per output channel), which keeps the network in the ~1.6e5 parameter
//! range at `depth = 4, c_start = 8`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{ConvOptions, Graph, Padding, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OperatorError {
    #[error("invalid operator config: {0}")]
    InvalidConfig(String),
    #[error("theta has {got} values, layout expects {expected}")]
    LayoutMismatch { got: usize, expected: usize },
    #[error("spatial size {size} not divisible by 2^{depth}")]
    Divisibility { size: usize, depth: usize },
    #[error("mask must be supplied iff boundary mode is masked_reflect")]
    MaskContract,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, OperatorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    Periodic,
    MaskedReflect,
}

impl BoundaryMode {
    pub fn padding(self) -> Padding {
        match self {
            BoundaryMode::Periodic => Padding::Circular,
            BoundaryMode::MaskedReflect => Padding::Reflect,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    UNet { depth: usize, c_start: usize },
    /// One k3 convolution `m -> m`; the finite-difference stencil case.
    SingleConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorConfig {
    pub dim: usize,
    pub fields: usize,
    pub arch: Architecture,
    pub kernel: usize,
    pub norm_groups: usize,
    pub boundary: BoundaryMode,
}

impl OperatorConfig {
    pub fn unet(dim: usize, fields: usize, depth: usize, c_start: usize, boundary: BoundaryMode) -> Self {
        OperatorConfig {
            dim,
            fields,
            arch: Architecture::UNet { depth, c_start },
            kernel: 3,
            norm_groups: 4,
            boundary,
        }
    }

    /// Small default used for training runs.
    pub fn desk(dim: usize, fields: usize, boundary: BoundaryMode) -> Self {
        Self::unet(dim, fields, 2, 4, boundary)
    }

    pub fn single_conv(dim: usize, fields: usize, boundary: BoundaryMode) -> Self {
        OperatorConfig {
            dim,
            fields,
            arch: Architecture::SingleConv,
            kernel: 3,
            norm_groups: 4,
            boundary,
        }
    }

    pub fn depth(&self) -> usize {
        match self.arch {
            Architecture::UNet { depth, .. } => depth,
            Architecture::SingleConv => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 1 && self.dim != 2 {
            return Err(OperatorError::InvalidConfig(format!("dim {} not in {{1, 2}}", self.dim)));
        }
        if self.fields == 0 {
            return Err(OperatorError::InvalidConfig("need at least one field".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(OperatorError::InvalidConfig("kernel size must be odd".into()));
        }
        if let Architecture::UNet { c_start, .. } = self.arch {
            if c_start == 0 || self.norm_groups == 0 || c_start % self.norm_groups != 0 {
                return Err(OperatorError::InvalidConfig(format!(
                    "c_start {} must be a positive multiple of norm groups {}",
                    c_start, self.norm_groups
                )));
            }
        }
        Ok(())
    }

    pub fn check_spatial(&self, spatial: &[usize]) -> Result<()> {
        let depth = self.depth();
        if spatial.len() != self.dim {
            return Err(OperatorError::InvalidConfig(format!(
                "{}D operator applied to {}D field",
                self.dim,
                spatial.len()
            )));
        }
        for &s in spatial {
            if s % (1 << depth) != 0 {
                return Err(OperatorError::Divisibility { size: s, depth });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    pub fan_in: usize,
    /// Expected L2 norm of a fresh uniform(-b, b) draw, b = 1/sqrt(fan_in).
    pub norm: f64,
    /// False for the first and last layers, whose size depends on the field count.
    pub interior: bool,
}

impl Segment {
    pub fn bound(&self) -> f64 {
        1.0 / (self.fan_in as f64).sqrt()
    }

    fn is_norm_gain(&self) -> bool {
        self.name.ends_with(".gamma")
    }

    fn is_norm_shift(&self) -> bool {
        self.name.ends_with(".beta")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub segments: Vec<Segment>,
    pub total: usize,
}

impl ParamLayout {
    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// `N_i * lambda` broadcast to every element.
    pub fn element_bounds(&self, lambda: f64) -> Vec<f64> {
        let mut b = Vec::with_capacity(self.total);
        for s in &self.segments {
            b.extend(std::iter::repeat(s.norm * lambda).take(s.len));
        }
        b
    }

    pub fn interior_len(&self) -> usize {
        self.segments.iter().filter(|s| s.interior).map(|s| s.len).sum()
    }

    /// Concatenation of the interior segments of `theta`.
    pub fn interior_values(&self, theta: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.interior_len());
        for s in self.segments.iter().filter(|s| s.interior) {
            out.extend_from_slice(&theta[s.offset..s.offset + s.len]);
        }
        out
    }

    /// Framework-style random initialization: uniform(-b, b) for weights and
    /// biases, unit gains and zero shifts for normalizations. Segments named
    /// in `zeroed` (prefix match) are set to zero.
    pub fn init_values<R: Rng>(&self, rng: &mut R, zeroed: &[&str]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total);
        for s in &self.segments {
            let zero = zeroed.iter().any(|z| s.name.starts_with(z));
            for _ in 0..s.len {
                let v = if zero || s.is_norm_shift() {
                    0.0
                } else if s.is_norm_gain() {
                    1.0
                } else {
                    let b = s.bound();
                    rng.gen_range(-b..b)
                };
                out.push(v);
            }
        }
        out
    }
}

struct LayoutBuilder {
    dim: usize,
    segments: Vec<Segment>,
    total: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, fan_in: usize, interior: bool) {
        let len: usize = shape.iter().product();
        let b = 1.0 / (fan_in as f64).sqrt();
        self.segments.push(Segment {
            name,
            shape,
            offset: self.total,
            len,
            fan_in,
            norm: b * (len as f64 / 3.0).sqrt(),
            interior,
        });
        self.total += len;
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, groups: usize, interior: bool) {
        let mut shape = vec![c_out, c_in / groups];
        shape.extend(std::iter::repeat(k).take(self.dim));
        let fan_in = (c_in / groups) * k.pow(self.dim as u32);
        self.push(format!("{name}.weight"), shape, fan_in, interior);
        self.push(format!("{name}.bias"), vec![c_out], fan_in, interior);
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.push(format!("{name}.gamma"), vec![c], 1, true);
        self.push(format!("{name}.beta"), vec![c], 1, true);
    }
}

pub fn build_layout(config: &OperatorConfig) -> Result<ParamLayout> {
    config.validate()?;
    let mut b = LayoutBuilder {
        dim: config.dim,
        segments: Vec::new(),
        total: 0,
    };
    let k = config.kernel;
    let m = config.fields;
    match config.arch {
        Architecture::SingleConv => b.conv("head", m, m, k, 1, false),
        Architecture::UNet { depth, c_start } => {
            let c_in = m + usize::from(config.boundary == BoundaryMode::MaskedReflect);
            let ch = |l: usize| c_start << l;
            b.conv("stem.conv1", c_in, c_start, k, 1, false);
            b.conv("stem.conv2", c_start, c_start, k, 1, true);
            for l in 1..=depth {
                b.conv(&format!("down{l}.conv_down"), ch(l - 1), ch(l), 2, 1, true);
                b.conv(&format!("down{l}.conv"), ch(l), ch(l), k, ch(l), true);
                b.norm(&format!("down{l}.norm"), ch(l));
            }
            let c = ch(depth);
            b.conv("mid.fc1", c, 2 * c, 1, 1, true);
            b.conv("mid.fc2", 2 * c, c, 1, 1, true);
            for l in (1..=depth).rev() {
                b.conv(&format!("up{l}.conv_up"), ch(l), ch(l - 1), 2, 1, true);
                b.conv(&format!("up{l}.conv"), 2 * ch(l - 1), ch(l - 1), k, ch(l - 1), true);
                b.norm(&format!("up{l}.norm"), ch(l - 1));
            }
            b.conv("head", c_start, m, k, 1, false);
        }
    }
    Ok(ParamLayout {
        segments: b.segments,
        total: b.total,
    })
}

pub fn count_params(config: &OperatorConfig) -> Result<usize> {
    Ok(build_layout(config)?.total)
}

/// Mask channel `[1, space...]`: 1 on boundary cells, 0 inside.
pub fn boundary_mask(spatial: &[usize]) -> Tensor {
    let n: usize = spatial.iter().product();
    let mut data = vec![0.0; n];
    for (p, v) in data.iter_mut().enumerate() {
        let mut rem = p;
        let mut edge = false;
        for &s in spatial.iter().rev() {
            let i = rem % s;
            rem /= s;
            edge |= i == 0 || i == s - 1;
        }
        if edge {
            *v = 1.0;
        }
    }
    let mut shape = vec![1];
    shape.extend_from_slice(spatial);
    Tensor::new(shape, data).expect("mask shape")
}

struct Weights<'a> {
    g: &'a mut Graph,
    theta: Var,
    layout: &'a ParamLayout,
}

impl Weights<'_> {
    fn get(&mut self, name: &str) -> Result<Var> {
        let s = self
            .layout
            .segment(name)
            .ok_or_else(|| OperatorError::InvalidConfig(format!("missing segment {name}")))?;
        Ok(self.g.narrow(self.theta, s.offset, &s.shape)?)
    }

    fn conv(&mut self, x: Var, name: &str, opts: ConvOptions) -> Result<Var> {
        let w = self.get(&format!("{name}.weight"))?;
        let b = self.get(&format!("{name}.bias"))?;
        Ok(self.g.conv_nd(x, w, Some(b), opts)?)
    }

    fn norm(&mut self, x: Var, name: &str, groups: usize) -> Result<Var> {
        let gm = self.get(&format!("{name}.gamma"))?;
        let bt = self.get(&format!("{name}.beta"))?;
        Ok(self.g.group_norm(x, groups, gm, bt, 1e-5)?)
    }
}

/// Channel interleave `[a0, b0, a1, b1, ...]` of two `[c, space...]` tensors.
fn interleave(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let shape = g.shape(a).to_vec();
    let mut one = vec![1];
    one.extend_from_slice(&shape);
    let a1 = g.reshape(a, &one)?;
    let b1 = g.reshape(b, &one)?;
    let stacked = g.concat(&[a1, b1])?;
    let mut perm: Vec<usize> = vec![1, 0];
    perm.extend(2..one.len());
    let p = g.permute(stacked, &perm)?;
    let mut out = shape;
    out[0] *= 2;
    Ok(g.reshape(p, &out)?)
}

/// Rate `du/ds` of the operator network on graph values.
///
/// `theta` must be a flat node of `layout.total` values and `u` a
/// `[fields, space...]` node.
pub fn f_theta_apply(
    g: &mut Graph,
    config: &OperatorConfig,
    layout: &ParamLayout,
    theta: Var,
    u: Var,
    mask: Option<Var>,
) -> Result<Var> {
    let tl = g.value(theta).numel();
    if tl != layout.total {
        return Err(OperatorError::LayoutMismatch {
            got: tl,
            expected: layout.total,
        });
    }
    let ushape = g.shape(u).to_vec();
    if ushape.first() != Some(&config.fields) {
        return Err(OperatorError::InvalidConfig(format!(
            "state has shape {:?}, expected {} fields",
            ushape, config.fields
        )));
    }
    config.check_spatial(&ushape[1..])?;
    if mask.is_some() != (config.boundary == BoundaryMode::MaskedReflect) {
        return Err(OperatorError::MaskContract);
    }
    let pad = config.boundary.padding();
    let same = ConvOptions::same(pad);
    let mut w = Weights { g, theta, layout };
    match config.arch {
        Architecture::SingleConv => w.conv(u, "head", same),
        Architecture::UNet { depth, c_start } => {
            let x = match mask {
                Some(mv) => w.g.concat(&[u, mv])?,
                None => u,
            };
            let ch = |l: usize| c_start << l;
            let groups = config.norm_groups;
            let h = w.conv(x, "stem.conv1", same)?;
            let h = w.g.gelu(h)?;
            let h = w.conv(h, "stem.conv2", same)?;
            let mut h = w.g.gelu(h)?;
            let mut skips = vec![h];
            for l in 1..=depth {
                let d = w.conv(h, &format!("down{l}.conv_down"), ConvOptions::down(pad))?;
                let d = w.g.gelu(d)?;
                let d = w.conv(d, &format!("down{l}.conv"), same.grouped(ch(l)))?;
                let d = w.norm(d, &format!("down{l}.norm"), groups)?;
                h = w.g.gelu(d)?;
                if l < depth {
                    skips.push(h);
                }
            }
            let one = ConvOptions::same(pad);
            let m = w.conv(h, "mid.fc1", one)?;
            let m = w.g.gelu(m)?;
            h = w.conv(m, "mid.fc2", one)?;
            for l in (1..=depth).rev() {
                let up = w.conv(h, &format!("up{l}.conv_up"), ConvOptions::up(pad))?;
                let up = w.g.gelu(up)?;
                let skip = skips[l - 1];
                let cat = interleave(w.g, up, skip)?;
                let c = w.conv(cat, &format!("up{l}.conv"), same.grouped(ch(l - 1)))?;
                let c = w.norm(c, &format!("up{l}.norm"), groups)?;
                h = w.g.gelu(c)?;
            }
            w.conv(h, "head", same)
        }
    }
}

/// Operator bound to a fixed parameter vector, evaluated on plain values.
#[derive(Debug, Clone)]
pub struct BoundOperator {
    pub config: OperatorConfig,
    pub layout: ParamLayout,
    pub theta: Vec<f64>,
    pub mask: Option<Tensor>,
    shape: Vec<usize>,
}

impl BoundOperator {
    /// `shape` is the `[fields, space...]` state shape the operator acts on.
    pub fn new(config: OperatorConfig, layout: ParamLayout, theta: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if theta.len() != layout.total {
            return Err(OperatorError::LayoutMismatch {
                got: theta.len(),
                expected: layout.total,
            });
        }
        let mask = (config.boundary == BoundaryMode::MaskedReflect).then(|| boundary_mask(&shape[1..]));
        Ok(BoundOperator {
            config,
            layout,
            theta,
            mask,
            shape: shape.to_vec(),
        })
    }

    pub fn state_shape(&self) -> &[usize] {
        &self.shape
    }

    fn build(&self, g: &mut Graph, u: &[f64], grad: bool) -> Result<(Var, Var, Var)> {
        let th = Tensor::vector(self.theta.clone());
        let ut = Tensor::new(self.shape.clone(), u.to_vec())?;
        let (tv, uv) = if grad {
            (g.param(th), g.param(ut))
        } else {
            (g.constant(th), g.constant(ut))
        };
        let mv = self.mask.as_ref().map(|m| g.constant(m.clone()));
        let out = f_theta_apply(g, &self.config, &self.layout, tv, uv, mv)?;
        Ok((tv, uv, out))
    }

    pub fn eval(&self, u: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let (_, _, out) = self.build(&mut g, u, false)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Vector-Jacobian product: `(cot^T df/du, cot^T df/dtheta)`.
    pub fn vjp(&self, u: &[f64], cot: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let (tv, uv, out) = self.build(&mut g, u, true)?;
        let mut grads = g.backward_with(out, cot)?;
        Ok((grads.take_or_zero(uv), grads.take_or_zero(tv)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_conv_segment_sizes() {
        let c = OperatorConfig::single_conv(1, 1, BoundaryMode::Periodic);
        assert_eq!(count_params(&c).unwrap(), 4);
        let mut b = LayoutBuilder {
            dim: 1,
            segments: vec![],
            total: 0,
        };
        b.conv("toy", 1, 2, 3, 1, true);
        assert_eq!(b.total, 8);
    }

    #[test]
    fn interior_excludes_first_and_last() {
        let layout = build_layout(&OperatorConfig::desk(1, 1, BoundaryMode::Periodic)).unwrap();
        let first = &layout.segments[0];
        let last = layout.segments.last().unwrap();
        assert!(!first.interior && !last.interior);
        assert!(layout.segments[2..layout.segments.len() - 2].iter().all(|s| s.interior));
    }

    #[test]
    fn mask_marks_edges() {
        let m = boundary_mask(&[4, 4]);
        let inner: f64 = [5, 6, 9, 10].iter().map(|&i| m.data()[i]).sum();
        assert_eq!(inner, 0.0);
        assert_eq!(m.data().iter().sum::<f64>(), 12.0);
    }

    #[test]
    fn invalid_configs() {
        let mut c = OperatorConfig::unet(2, 2, 2, 6, BoundaryMode::Periodic);
        assert!(build_layout(&c).is_err());
        c.arch = Architecture::UNet { depth: 2, c_start: 8 };
        c.dim = 3;
        assert!(build_layout(&c).is_err());
    }
}
