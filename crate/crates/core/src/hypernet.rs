//! The parameter-generating network: field embedding, strided convolutional
//! encoder, axial time/space attention, mean pooling and an MLP head whose
//! output is squashed into the per-segment operator bounds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::operator::ParamLayout;
use crate::tensor::{ConvOptions, Graph, Padding, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HyperError {
    #[error("invalid hypernetwork config: {0}")]
    InvalidConfig(String),
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("field `{0}` registered twice")]
    DuplicateField(String),
    #[error("context shape {got:?} incompatible with network built for {expected:?}")]
    ContextShape { got: Vec<usize>, expected: Vec<usize> },
    #[error("head width {got} differs from layout total {expected}")]
    WidthMismatch { got: usize, expected: usize },
    #[error("missing weight `{0}`")]
    MissingWeight(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, HyperError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderStage {
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperConfig {
    pub token_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub encoder: Vec<EncoderStage>,
    pub context_len: usize,
    pub head_hidden: Vec<usize>,
    pub ffn_hidden: usize,
    pub lambda: f64,
    pub drop_path: f64,
    /// Scale of the final head layer's weights relative to the usual bound.
    /// Zero makes the initial theta identical for every context.
    pub final_scale: f64,
}

impl Default for HyperConfig {
    fn default() -> Self {
        HyperConfig {
            token_dim: 64,
            blocks: 2,
            heads: 4,
            embed_dim: 32,
            encoder: vec![EncoderStage { kernel: 4, stride: 2 }, EncoderStage { kernel: 2, stride: 2 }],
            context_len: 5,
            head_hidden: vec![256, 256],
            ffn_hidden: 128,
            lambda: 2.0,
            drop_path: 0.0,
            final_scale: 0.0,
        }
    }
}

impl HyperConfig {
    /// Large configuration: 384-wide tokens, 12 blocks of 6 heads, patch 16.
    pub fn large() -> Self {
        HyperConfig {
            token_dim: 384,
            blocks: 12,
            heads: 6,
            embed_dim: 96,
            encoder: vec![
                EncoderStage { kernel: 4, stride: 2 },
                EncoderStage { kernel: 2, stride: 2 },
                EncoderStage { kernel: 2, stride: 2 },
                EncoderStage { kernel: 2, stride: 2 },
            ],
            head_hidden: vec![384, 384],
            ffn_hidden: 1536,
            drop_path: 0.1,
            ..Self::default()
        }
    }

    pub fn patch(&self) -> usize {
        self.encoder.iter().map(|s| s.stride).product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HyperError::InvalidConfig(m));
        if self.token_dim == 0 || self.heads == 0 || self.token_dim % self.heads != 0 {
            return bad(format!("token dim {} not divisible by {} heads", self.token_dim, self.heads));
        }
        if self.context_len == 0 || self.embed_dim == 0 || self.ffn_hidden == 0 {
            return bad("context length, embed and ffn widths must be positive".into());
        }
        if self.encoder.is_empty() {
            return bad("encoder needs at least one stage".into());
        }
        for s in &self.encoder {
            if !(s.stride == 1 || s.stride == 2) || s.kernel == 0 || (s.stride == 1 && s.kernel % 2 == 0) {
                return bad(format!("unsupported encoder stage {s:?}"));
            }
        }
        if !(self.lambda > 0.0) {
            return bad("lambda must be positive".into());
        }
        if !(self.final_scale >= 0.0) {
            return bad("final scale must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return bad("drop path rate must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Known field names; row `i` of the embedding matrix belongs to `names[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldRegistry {
    pub names: Vec<String>,
}

impl FieldRegistry {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut out: Vec<String> = Vec::new();
        for n in names {
            let n = n.as_ref().to_string();
            if out.contains(&n) {
                return Err(HyperError::DuplicateField(n));
            }
            out.push(n);
        }
        Ok(FieldRegistry { names: out })
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| HyperError::UnknownField(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Named weight tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index(name).map(|i| &self.tensors[i])
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// Registers every tensor as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t.clone())).collect()
    }
}

/// Relative-position index table for one attention axis of length `l`.
fn rel_index(l: usize, cyclic: bool) -> (usize, Vec<usize>) {
    let mut idx = Vec::with_capacity(l * l);
    for i in 0..l {
        for j in 0..l {
            idx.push(if cyclic { (j + l - i) % l } else { j + l - 1 - i });
        }
    }
    (if cyclic { l } else { 2 * l - 1 }, idx)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Inverse of `s * tanh(x / (2 s))`.
fn inverse_signed_bound(y: f64, s: f64) -> f64 {
    let r = (y / s).clamp(-1.0 + 1e-12, 1.0 - 1e-12);
    2.0 * s * r.atanh()
}

#[derive(Debug, Clone)]
pub struct HyperNet {
    pub config: HyperConfig,
    pub registry: FieldRegistry,
    pub store: ParamStore,
    /// Spatial grid the network was built for.
    pub spatial: Vec<usize>,
    pub periodic: bool,
    /// Per-element bound `N_i * lambda`.
    pub bounds: Vec<f64>,
    token_grid: Vec<usize>,
    rel: Vec<(usize, Vec<usize>)>,
}

/// Graph handles for one forward pass.
pub struct Bound<'a> {
    pub net: &'a HyperNet,
    pub vars: Vec<Var>,
}

impl HyperNet {
    pub fn new(
        config: HyperConfig,
        registry: FieldRegistry,
        layout: &ParamLayout,
        spatial: &[usize],
        periodic: bool,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if registry.is_empty() {
            return Err(HyperError::InvalidConfig("empty field registry".into()));
        }
        let patch = config.patch();
        let mut token_grid = Vec::new();
        for &s in spatial {
            if s % patch != 0 {
                return Err(HyperError::InvalidConfig(format!("spatial size {s} not divisible by patch {patch}")));
            }
            token_grid.push(s / patch);
        }
        let dim = spatial.len();
        let mut rel = vec![rel_index(config.context_len, false)];
        for &s in &token_grid {
            rel.push(rel_index(s, periodic));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut st = ParamStore::default();
        let d = config.token_dim;
        st.push("field_embedding", uniform(&mut rng, &[registry.len(), config.embed_dim], 1.0));
        let mut c_in = config.embed_dim;
        for (i, s) in config.encoder.iter().enumerate() {
            let mut shape = vec![d, c_in];
            shape.extend(std::iter::repeat(s.kernel).take(dim));
            let b = 1.0 / ((c_in * s.kernel.pow(dim as u32)) as f64).sqrt();
            st.push(format!("enc{i}.weight"), uniform(&mut rng, &shape, b));
            st.push(format!("enc{i}.bias"), uniform(&mut rng, &[d], b));
            c_in = d;
        }
        let lin = |st: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, n_in: usize, n_out: usize| {
            let b = 1.0 / (n_in as f64).sqrt();
            st.push(format!("{name}.weight"), uniform(rng, &[n_out, n_in], b));
            st.push(format!("{name}.bias"), uniform(rng, &[n_out], b));
        };
        let ln = |st: &mut ParamStore, name: &str, n: usize| {
            st.push(format!("{name}.gamma"), Tensor::full(&[n], 1.0));
            st.push(format!("{name}.beta"), Tensor::zeros(&[n]));
        };
        for b in 0..config.blocks {
            for (a, (n_rel, _)) in rel.iter().enumerate() {
                let p = format!("block{b}.axis{a}");
                ln(&mut st, &format!("{p}.norm"), d);
                for w in ["q", "k", "v", "o"] {
                    lin(&mut st, &mut rng, &format!("{p}.{w}"), d, d);
                }
                st.push(format!("{p}.rel_bias"), uniform(&mut rng, &[config.heads, *n_rel], 0.02));
            }
            ln(&mut st, &format!("block{b}.ffn.norm"), d);
            lin(&mut st, &mut rng, &format!("block{b}.ffn.fc1"), d, config.ffn_hidden);
            lin(&mut st, &mut rng, &format!("block{b}.ffn.fc2"), config.ffn_hidden, d);
        }
        let mut n_in = d;
        for (i, &h) in config.head_hidden.iter().enumerate() {
            lin(&mut st, &mut rng, &format!("head{i}"), n_in, h);
            n_in = h;
        }
        let bounds = layout.element_bounds(config.lambda);
        let wb = config.final_scale / (n_in as f64).sqrt();
        let w_out = if wb > 0.0 {
            uniform(&mut rng, &[layout.total, n_in], wb)
        } else {
            Tensor::zeros(&[layout.total, n_in])
        };
        st.push("head_out.weight", w_out);
        // bias chosen so the initial theta is a fresh standard draw with a
        // silent output layer, i.e. the initial flow is the identity
        let target = layout.init_values(&mut rng, &["head."]);
        let bias: Vec<f64> = target.iter().zip(&bounds).map(|(y, s)| inverse_signed_bound(*y, *s)).collect();
        st.push("head_out.bias", Tensor::vector(bias));

        Ok(HyperNet {
            config,
            registry,
            store: st,
            spatial: spatial.to_vec(),
            periodic,
            bounds,
            token_grid,
            rel,
        })
    }

    /// Rebuilds a network around stored weights (shapes are checked).
    pub fn with_weights(mut self, store: ParamStore) -> Result<Self> {
        if store.names != self.store.names {
            return Err(HyperError::InvalidConfig("weight names differ from architecture".into()));
        }
        for (a, b) in store.tensors.iter().zip(&self.store.tensors) {
            if a.shape() != b.shape() {
                return Err(HyperError::InvalidConfig(format!("weight shape {:?} vs {:?}", a.shape(), b.shape())));
            }
        }
        self.store = store;
        Ok(self)
    }

    pub fn n_weights(&self) -> usize {
        self.store.numel()
    }

    pub fn theta_len(&self) -> usize {
        self.bounds.len()
    }

    pub fn token_grid(&self) -> &[usize] {
        &self.token_grid
    }

    pub fn bind<'a>(&'a self, g: &mut Graph) -> Bound<'a> {
        Bound {
            net: self,
            vars: self.store.bind(g),
        }
    }

    /// Value-only parameter generation.
    pub fn psi_forward(&self, context: &Tensor, fields: &[String]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let th = b.psi_forward(&mut g, context, fields, None)?;
        Ok(g.value(th).data().to_vec())
    }
}

impl Bound<'_> {
    fn w(&self, name: &str) -> Result<Var> {
        self.net
            .store
            .index(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| HyperError::MissingWeight(name.to_string()))
    }

    fn linear(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let w = self.w(&format!("{name}.weight"))?;
        let b = self.w(&format!("{name}.bias"))?;
        Ok(g.linear(x, w, Some(b))?)
    }

    fn norm(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let gm = self.w(&format!("{name}.gamma"))?;
        let bt = self.w(&format!("{name}.beta"))?;
        Ok(g.layer_norm(x, gm, bt, 1e-5)?)
    }

    /// `[T, m, space...]` context to `[T, tokens..., d]`.
    pub fn encode(&self, g: &mut Graph, context: &Tensor, fields: &[String]) -> Result<Var> {
        let net = self.net;
        let cfg = &net.config;
        let cs = context.shape();
        let mut expected = vec![cfg.context_len, fields.len()];
        expected.extend_from_slice(&net.spatial);
        if cs != expected.as_slice() {
            return Err(HyperError::ContextShape {
                got: cs.to_vec(),
                expected,
            });
        }
        let rows = fields.iter().map(|f| net.registry.index_of(f)).collect::<Result<Vec<_>>>()?;
        let m = rows.len();
        let dim = net.spatial.len();
        let pad = if net.periodic { Padding::Circular } else { Padding::Reflect };
        let emb = g.gather_rows(self.w("field_embedding")?, rows)?;
        let emb = g.permute(emb, &[1, 0])?;
        let mut kshape = vec![cfg.embed_dim, m];
        kshape.extend(std::iter::repeat(1).take(dim));
        let ek = g.reshape(emb, &kshape)?;
        let frame_len: usize = net.spatial.iter().product::<usize>() * m;
        let mut frames = Vec::with_capacity(cfg.context_len);
        for t in 0..cfg.context_len {
            let mut fs = vec![m];
            fs.extend_from_slice(&net.spatial);
            let fr = Tensor::new(fs, context.data()[t * frame_len..(t + 1) * frame_len].to_vec())?;
            let x = g.constant(fr);
            let mut x = g.conv_nd(x, ek, None, ConvOptions::same(pad))?;
            for (i, s) in cfg.encoder.iter().enumerate() {
                let opts = ConvOptions {
                    stride: s.stride,
                    ..ConvOptions::same(pad)
                };
                let w = self.w(&format!("enc{i}.weight"))?;
                let b = self.w(&format!("enc{i}.bias"))?;
                x = g.conv_nd(x, w, Some(b), opts)?;
                if i + 1 < cfg.encoder.len() {
                    x = g.gelu(x)?;
                }
            }
            let mut one = vec![1];
            one.extend_from_slice(g.shape(x));
            frames.push(g.reshape(x, &one)?);
        }
        let stacked = g.concat(&frames)?;
        let mut perm = vec![0];
        perm.extend(2..dim + 2);
        perm.push(1);
        Ok(g.permute(stacked, &perm)?)
    }

    fn rel_bias(&self, g: &mut Graph, name: &str, axis: usize) -> Result<Var> {
        let (_, idx) = &self.net.rel[axis];
        let l = self.token_axes()[axis];
        let h = self.net.config.heads;
        let table = self.w(name)?;
        let tt = g.permute(table, &[1, 0])?;
        let gathered = g.gather_rows(tt, idx.clone())?;
        let back = g.permute(gathered, &[1, 0])?;
        Ok(g.reshape(back, &[h, l, l])?)
    }

    fn token_axes(&self) -> Vec<usize> {
        let mut a = vec![self.net.config.context_len];
        a.extend_from_slice(&self.net.token_grid);
        a
    }

    /// Self-attention along one token axis with pre-normalization.
    fn axial(&self, g: &mut Graph, x: Var, block: usize, axis: usize) -> Result<Var> {
        let cfg = &self.net.config;
        let axes = self.token_axes();
        let k = axes.len();
        let (d, h) = (cfg.token_dim, cfg.heads);
        let dh = d / h;
        let p = format!("block{block}.axis{axis}");
        let xn = self.norm(g, x, &format!("{p}.norm"))?;
        // [axes..., H, dh] -> [others..., H, axis, dh]
        let mut split = axes.clone();
        split.extend([h, dh]);
        let mut perm: Vec<usize> = (0..k).filter(|&a| a != axis).collect();
        perm.extend([k, axis, k + 1]);
        let batch: usize = axes.iter().enumerate().filter(|(a, _)| *a != axis).map(|(_, s)| s).product();
        let l = axes[axis];
        let mut heads = Vec::new();
        for w in ["q", "k", "v"] {
            let y = self.linear(g, xn, &format!("{p}.{w}"))?;
            let y = g.reshape(y, &split)?;
            let y = g.permute(y, &perm)?;
            heads.push(g.reshape(y, &[batch, h, l, dh])?);
        }
        let bias = self.rel_bias(g, &format!("{p}.rel_bias"), axis)?;
        let a = g.attention(heads[0], heads[1], heads[2], Some(bias))?;
        let mut permuted: Vec<usize> = perm.iter().map(|&i| split[i]).collect();
        let a = g.reshape(a, &permuted)?;
        let mut inv = vec![0; perm.len()];
        for (i, &pi) in perm.iter().enumerate() {
            inv[pi] = i;
        }
        let a = g.permute(a, &inv)?;
        permuted = axes.clone();
        permuted.push(d);
        let a = g.reshape(a, &permuted)?;
        Ok(self.linear(g, a, &format!("{p}.o"))?)
    }

    fn residual(&self, g: &mut Graph, x: Var, branch: Var, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var> {
        let rate = self.net.config.drop_path;
        let branch = match rng {
            Some(r) if rate > 0.0 => {
                if r.gen::<f64>() < rate {
                    return Ok(x);
                }
                g.scale(branch, 1.0 / (1.0 - rate))?
            }
            _ => branch,
        };
        Ok(g.add(x, branch)?)
    }

    /// Time-then-space axial attention blocks; `rng` enables drop path.
    pub fn process(&self, g: &mut Graph, tokens: Var, mut rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let mut x = tokens;
        let n_axes = self.token_axes().len();
        for b in 0..self.net.config.blocks {
            for axis in 0..n_axes {
                let y = self.axial(g, x, b, axis)?;
                x = self.residual(g, x, y, &mut rng)?;
            }
            let y = self.norm(g, x, &format!("block{b}.ffn.norm"))?;
            let y = self.linear(g, y, &format!("block{b}.ffn.fc1"))?;
            let y = g.gelu(y)?;
            let y = self.linear(g, y, &format!("block{b}.ffn.fc2"))?;
            x = self.residual(g, x, y, &mut rng)?;
        }
        Ok(x)
    }

    /// Mean-pools tokens and maps them to the bounded flat parameter vector.
    pub fn generate_params(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        let d = self.net.config.token_dim;
        let n = g.value(tokens).numel() / d;
        let flat = g.reshape(tokens, &[n, d])?;
        let mut h = g.mean_axis0(flat)?;
        for i in 0..self.net.config.head_hidden.len() {
            h = self.linear(g, h, &format!("head{i}"))?;
            h = g.gelu(h)?;
        }
        let raw = self.linear(g, h, "head_out")?;
        let width = g.value(raw).numel();
        if width != self.net.bounds.len() {
            return Err(HyperError::WidthMismatch {
                got: width,
                expected: self.net.bounds.len(),
            });
        }
        Ok(g.signed_bound(raw, self.net.bounds.clone())?)
    }

    pub fn psi_forward(
        &self,
        g: &mut Graph,
        context: &Tensor,
        fields: &[String],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let t = self.encode(g, context, fields)?;
        let t = self.process(g, t, rng)?;
        self.generate_params(g, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_bound_round_trips() {
        for (y, s) in [(0.3, 1.0), (-0.9, 1.0), (1.0, 2.3)] {
            let x = inverse_signed_bound(y, s);
            let mut g = Graph::new();
            let v = g.constant(Tensor::vector(vec![x]));
            let b = g.signed_bound(v, vec![s]).unwrap();
            assert!((g.value(b).data()[0] - y).abs() < 1e-9);
        }
    }

    #[test]
    fn cyclic_index_depends_on_difference_only() {
        let (n, idx) = rel_index(4, true);
        assert_eq!(n, 4);
        assert_eq!(idx[0 * 4 + 1], idx[3 * 4 + 0]);
        let (n, idx) = rel_index(3, false);
        assert_eq!(n, 5);
        assert_eq!(idx[0], 2);
        assert_eq!(idx[2], 4);
        assert_eq!(idx[6], 0);
    }

    #[test]
    fn registry_rejects_duplicates() {
        assert!(FieldRegistry::new(&["u", "u"]).is_err());
        let r = FieldRegistry::new(&["u", "v"]).unwrap();
        assert_eq!(r.index_of("v").unwrap(), 1);
        assert!(matches!(r.index_of("w"), Err(HyperError::UnknownField(_))));
    }
}
