//! Loss, schedule, optimizer, the end-to-end training loop and the
//! shared-plus-code baseline.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hypernet::{FieldRegistry, HyperConfig, HyperError, HyperNet};
use crate::integrator::{backward_through_trace, solve_unit_interval, IntegratorConfig, IntegratorError, SolveTrace};
use crate::operator::{build_layout, BoundOperator, BoundaryMode, OperatorConfig, OperatorError, ParamLayout};
use crate::parallel::{map_indexed, Execution};
use crate::pdegen::{Boundary, TrajectorySet};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFinite { epoch: usize, step: usize, detail: String },
    #[error(transparent)]
    Integrator(#[from] IntegratorError),
    #[error(transparent)]
    Hyper(#[from] HyperError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Channel-averaged relative error of `pred` against `target`, both `[C, space...]`.
pub fn nrmse(target: &[f64], pred: &[f64], channels: usize, eps: f64) -> Result<f64> {
    Ok(nrmse_with_grad(target, pred, channels, eps)?.0)
}

/// Loss value and its gradient with respect to `pred`.
pub fn nrmse_with_grad(target: &[f64], pred: &[f64], channels: usize, eps: f64) -> Result<(f64, Vec<f64>)> {
    if target.len() != pred.len() || channels == 0 || target.len() % channels != 0 {
        return Err(TrainError::Shape(format!(
            "target {} vs prediction {} values over {} channels",
            target.len(),
            pred.len(),
            channels
        )));
    }
    let n = target.len() / channels;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for c in 0..channels {
        let r = c * n..(c + 1) * n;
        let tn = target[r.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
        let dn = target[r.clone()]
            .iter()
            .zip(&pred[r.clone()])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let denom = tn + eps;
        loss += dn / denom;
        if dn > 0.0 {
            for i in r {
                grad[i] = (pred[i] - target[i]) / (dn * denom * channels as f64);
            }
        }
    }
    Ok((loss / channels as f64, grad))
}

pub fn cosine_lr(step: usize, total_steps: usize, lr_peak: f64, lr_final: f64) -> f64 {
    if total_steps == 0 {
        return lr_peak;
    }
    let x = step.min(total_steps) as f64 / total_steps as f64;
    lr_final + 0.5 * (lr_peak - lr_final) * (1.0 + (std::f64::consts::PI * x).cos())
}

/// Rescales `grads` in place to global norm at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let g = grads.iter().map(|v| v * v).sum::<f64>().sqrt();
    if g > max_norm {
        let s = max_norm / g;
        grads.iter_mut().for_each(|v| *v *= s);
    }
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamW {
    pub fn new(n: usize) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, weights: &mut [f64], grads: &[f64], lr: f64, weight_decay: f64) -> Result<()> {
        if weights.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TrainError::Shape(format!(
                "optimizer state {} vs weights {} / grads {}",
                self.m.len(),
                weights.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..weights.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            weights[i] -= lr * weight_decay * weights[i];
            weights[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub split: [f64; 3],
    pub loss_eps: f64,
    pub grad_accum: usize,
    /// Cap on validation windows scored per epoch (all when `None`).
    pub max_val_windows: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr_peak: 1e-3,
            lr_final: 1e-5,
            weight_decay: 1e-3,
            clip_norm: 1.0,
            seed: 0,
            split: [0.8, 0.1, 0.1],
            loss_eps: 1e-7,
            grad_accum: 1,
            max_val_windows: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 || self.split.iter().any(|f| *f < 0.0) {
            return bad("split fractions must be non-negative and sum to 1");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip norm must be positive");
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return bad("batch size and accumulation must be positive");
        }
        if !(self.lr_peak >= 0.0 && self.lr_final >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub traj: usize,
    pub start: usize,
}

/// Trajectory indices for the train, validation and test splits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_trajectories(n: usize, fractions: [f64; 3], seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..n_train + n_val].to_vec();
    let mut test = idx[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Split { train, val, test }
}

/// Every window of `context_len + 1` consecutive frames.
pub fn windows(trajs: &[usize], n_frames: usize, context_len: usize) -> Vec<Window> {
    let mut out = Vec::new();
    for &traj in trajs {
        for start in 0..(n_frames.saturating_sub(context_len)) {
            out.push(Window { traj, start });
        }
    }
    out
}

/// `[T, C, space...]` context starting at `start`.
pub fn context_tensor(data: &TrajectorySet, traj: usize, start: usize, len: usize) -> Tensor {
    let mut shape = vec![len];
    shape.extend_from_slice(&data.frame_shape());
    let mut v = Vec::with_capacity(len * data.frame_len());
    for t in start..start + len {
        v.extend(data.frame_slice(traj, t).iter().map(|x| *x as f64));
    }
    Tensor::new(shape, v).expect("context shape")
}

pub fn boundary_mode(data: &TrajectorySet) -> BoundaryMode {
    if data.grid.boundary.iter().all(|b| *b == Boundary::Periodic) {
        BoundaryMode::Periodic
    } else {
        BoundaryMode::MaskedReflect
    }
}

/// Operator configuration of the given size matched to a dataset.
pub fn operator_for(data: &TrajectorySet, depth: usize, c_start: usize) -> OperatorConfig {
    OperatorConfig::unet(data.grid.dim(), data.channels(), depth, c_start, boundary_mode(data))
}

/// Solves one frame interval with a fixed parameter vector.
pub fn advance(
    op: &OperatorConfig,
    layout: &ParamLayout,
    theta: &[f64],
    u: &[f64],
    shape: &[usize],
    integ: &IntegratorConfig,
) -> Result<(Vec<f64>, SolveTrace, BoundOperator)> {
    let bound = BoundOperator::new(*op, layout.clone(), theta.to_vec(), shape)?;
    let (next, trace) = solve_unit_interval(&bound, u, integ)?;
    Ok((next, trace, bound))
}

/// Hypernetwork, operator and solver settings bundled for prediction.
#[derive(Debug, Clone)]
pub struct DiscoModel {
    pub op: OperatorConfig,
    pub layout: ParamLayout,
    pub net: HyperNet,
    pub integrator: IntegratorConfig,
    pub fields: Vec<String>,
    pub frame_shape: Vec<usize>,
}

/// Result of a single-frame prediction.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub theta: Vec<f64>,
    pub next: Vec<f64>,
    pub budget_exhausted: bool,
}

impl DiscoModel {
    pub fn new(
        data: &TrajectorySet,
        op: OperatorConfig,
        hyper: HyperConfig,
        integrator: IntegratorConfig,
        seed: u64,
    ) -> Result<Self> {
        if op.fields != data.channels() || op.dim != data.grid.dim() || op.boundary != boundary_mode(data) {
            return Err(TrainError::InvalidConfig(format!(
                "operator ({}D, {} fields, {:?}) does not match dataset ({}D, {} fields)",
                op.dim,
                op.fields,
                op.boundary,
                data.grid.dim(),
                data.channels()
            )));
        }
        let layout = build_layout(&op)?;
        let registry = FieldRegistry::new(&data.field_names)?;
        let net = HyperNet::new(hyper, registry, &layout, &data.grid.points, data.grid.is_periodic(), seed)?;
        Ok(DiscoModel {
            op,
            layout,
            net,
            integrator,
            fields: data.field_names.clone(),
            frame_shape: data.frame_shape(),
        })
    }

    pub fn context_len(&self) -> usize {
        self.net.config.context_len
    }

    pub fn theta(&self, context: &Tensor) -> Result<Vec<f64>> {
        Ok(self.net.psi_forward(context, &self.fields)?)
    }

    pub fn step_with_theta(&self, theta: &[f64], u: &[f64]) -> Result<(Vec<f64>, SolveTrace)> {
        let (next, tr, _) = advance(&self.op, &self.layout, theta, u, &self.frame_shape, &self.integrator)?;
        Ok((next, tr))
    }

    /// Next frame after the last context frame.
    pub fn predict(&self, context: &Tensor) -> Result<Prediction> {
        let theta = self.theta(context)?;
        let fl: usize = self.frame_shape.iter().product();
        let last = &context.data()[context.numel() - fl..];
        let (next, tr) = self.step_with_theta(&theta, last)?;
        Ok(Prediction {
            theta,
            next,
            budget_exhausted: tr.budget_exhausted,
        })
    }

    /// Next-step loss and its gradient with respect to the hypernetwork weights.
    pub fn loss_and_grad(
        &self,
        context: &Tensor,
        target: &[f64],
        eps: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let b = self.net.bind(&mut g);
        let th = b.psi_forward(&mut g, context, &self.fields, rng)?;
        let theta = g.value(th).data().to_vec();
        let fl: usize = self.frame_shape.iter().product();
        let last = &context.data()[context.numel() - fl..];
        let (next, trace, bound) = advance(&self.op, &self.layout, &theta, last, &self.frame_shape, &self.integrator)?;
        let (loss, dl) = nrmse_with_grad(target, &next, self.op.fields, eps)?;
        let (gtheta, _) = backward_through_trace(&bound, &trace, &dl)?;
        let grads = g.backward_with(th, &gtheta).map_err(HyperError::from)?;
        let mut flat = Vec::with_capacity(self.net.n_weights());
        for v in &b.vars {
            flat.extend(grads.get_or_zero(*v));
        }
        Ok((loss, flat))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,lr,wall_seconds\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.8e},{:.8e},{:.8e},{:.3}\n",
            r.epoch, r.train_loss, r.val_loss, r.lr, r.wall_seconds
        ));
    }
    s
}

fn stream(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000_0000_0000);
    r.set_stream(a.wrapping_mul(1_000_003).wrapping_add(b));
    r
}

fn check_finite(loss: f64, epoch: usize, step: usize, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(TrainError::NonFinite {
            epoch,
            step,
            detail: format!("{what} = {loss}"),
        })
    }
}

fn subsample(ws: &[Window], cap: Option<usize>) -> Vec<Window> {
    match cap {
        Some(c) if c < ws.len() => (0..c).map(|i| ws[i * ws.len() / c]).collect(),
        _ => ws.to_vec(),
    }
}

/// Mean next-step loss of `model` over windows.
pub fn mean_window_loss(model: &DiscoModel, data: &TrajectorySet, ws: &[Window], eps: f64, exec: Execution) -> Result<f64> {
    if ws.is_empty() {
        return Ok(f64::NAN);
    }
    let t = model.context_len();
    let losses = map_indexed(exec, ws.len(), |i| -> Result<f64> {
        let w = ws[i];
        let ctx = context_tensor(data, w.traj, w.start, t);
        let p = model.predict(&ctx)?;
        let target: Vec<f64> = data.frame_slice(w.traj, w.start + t).iter().map(|x| *x as f64).collect();
        nrmse(&target, &p.next, model.op.fields, eps)
    });
    let mut s = 0.0;
    for l in losses {
        s += l?;
    }
    Ok(s / ws.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub metrics: Vec<EpochMetrics>,
    pub split: Split,
}

/// Shared minibatch loop over a model state `S`. `grad_fn` returns a loss
/// and a gradient over `weights`; `sync` writes updated weights into the
/// state after every optimizer step.
#[allow(clippy::too_many_arguments)]
fn run_loop<S, G, V, Y>(
    cfg: &TrainConfig,
    train_ws: &[Window],
    state: &mut S,
    weights: &mut [f64],
    exec: Execution,
    grad_fn: G,
    mut val_fn: V,
    mut sync: Y,
) -> Result<Vec<EpochMetrics>>
where
    S: Sync,
    G: Fn(&S, Window, u64) -> Result<(f64, Vec<f64>)> + Sync,
    V: FnMut(&S) -> Result<f64>,
    Y: FnMut(&mut S, &[f64]),
{
    let clock = Instant::now();
    let per_step = cfg.batch_size * cfg.grad_accum;
    let steps_per_epoch = train_ws.len().div_ceil(per_step);
    let total = steps_per_epoch * cfg.epochs;
    let mut opt = AdamW::new(weights.len());
    let mut metrics = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order = train_ws.to_vec();
        order.shuffle(&mut stream(cfg.seed, epoch as u64, u64::MAX));
        let mut sum_loss = 0.0;
        let mut lr = cosine_lr(step, total, cfg.lr_peak, cfg.lr_final);
        for (ci, chunk) in order.chunks(per_step).enumerate() {
            let st: &S = state;
            let res = map_indexed(exec, chunk.len(), |i| {
                grad_fn(st, chunk[i], (epoch * order.len() + ci * per_step + i) as u64)
            });
            let mut grad = vec![0.0; weights.len()];
            let mut batch_loss = 0.0;
            for r in res {
                let (l, gr) = r?;
                batch_loss += l;
                grad.iter_mut().zip(&gr).for_each(|(a, b)| *a += b);
            }
            let inv = 1.0 / chunk.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            batch_loss *= inv;
            check_finite(batch_loss, epoch, step, "batch loss")?;
            clip_global_norm(&mut grad, cfg.clip_norm);
            lr = cosine_lr(step, total, cfg.lr_peak, cfg.lr_final);
            opt.step(weights, &grad, lr, cfg.weight_decay)?;
            sync(state, weights);
            sum_loss += batch_loss * chunk.len() as f64;
            step += 1;
        }
        let train_loss = sum_loss / order.len().max(1) as f64;
        let val_loss = val_fn(state)?;
        check_finite(train_loss, epoch, step, "epoch train loss")?;
        metrics.push(EpochMetrics {
            epoch,
            train_loss,
            val_loss,
            lr,
            wall_seconds: clock.elapsed().as_secs_f64(),
        });
    }
    Ok(metrics)
}

/// End-to-end training of the hypernetwork on next-step loss.
pub fn train_disco(
    data: &TrajectorySet,
    op: OperatorConfig,
    hyper: HyperConfig,
    integrator: IntegratorConfig,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<TrainOutcome<DiscoModel>> {
    cfg.validate()?;
    let model = DiscoModel::new(data, op, hyper, integrator, cfg.seed)?;
    let split = split_trajectories(data.n_traj(), cfg.split, cfg.seed);
    let t = model.context_len();
    if t + 1 > data.n_frames {
        return Err(TrainError::InvalidConfig(format!(
            "context of {} frames needs trajectories longer than {}",
            t, data.n_frames
        )));
    }
    let train_ws = windows(&split.train, data.n_frames, t);
    let val_ws = subsample(&windows(&split.val, data.n_frames, t), cfg.max_val_windows);
    train_disco_on(model, data, &train_ws, &val_ws, cfg, exec).map(|(model, metrics)| TrainOutcome { model, metrics, split })
}

/// Trains an existing model on explicit window lists.
pub fn train_disco_on(
    mut model: DiscoModel,
    data: &TrajectorySet,
    train_ws: &[Window],
    val_ws: &[Window],
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<(DiscoModel, Vec<EpochMetrics>)> {
    cfg.validate()?;
    let t = model.context_len();
    let mut weights = model.net.store.flat();
    let seed = cfg.seed;
    let eps = cfg.loss_eps;
    let drop = model.net.config.drop_path > 0.0;
    let grad_fn = |m: &DiscoModel, win: Window, k: u64| -> Result<(f64, Vec<f64>)> {
        let ctx = context_tensor(data, win.traj, win.start, t);
        let target: Vec<f64> = data.frame_slice(win.traj, win.start + t).iter().map(|x| *x as f64).collect();
        let mut rng = stream(seed, k, 7);
        m.loss_and_grad(&ctx, &target, eps, drop.then_some(&mut rng))
    };
    let val_fn = |m: &DiscoModel| mean_window_loss(m, data, val_ws, eps, exec);
    let sync = |m: &mut DiscoModel, w: &[f64]| m.net.store.set_flat(w);
    let metrics = run_loop(cfg, train_ws, &mut model, &mut weights, exec, grad_fn, val_fn, sync)?;
    Ok((model, metrics))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GepsConfig {
    pub code_dim: usize,
    pub adapt_lrs: Vec<f64>,
    pub adapt_steps: usize,
}

impl Default for GepsConfig {
    fn default() -> Self {
        GepsConfig {
            code_dim: 12,
            adapt_lrs: vec![1e-3, 1e-2, 1e-1],
            adapt_steps: 20,
        }
    }
}

/// `theta(c) = shared + W c` with a linear map `W` of shape `[P, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GepsModel {
    pub op: OperatorConfig,
    pub layout: ParamLayout,
    pub integrator: IntegratorConfig,
    pub frame_shape: Vec<usize>,
    pub context_len: usize,
    pub code_dim: usize,
    pub shared: Vec<f64>,
    pub w: Vec<f64>,
    /// One code per training trajectory.
    pub codes: Vec<(usize, Vec<f64>)>,
}

impl GepsModel {
    pub fn new(
        data: &TrajectorySet,
        op: OperatorConfig,
        integrator: IntegratorConfig,
        context_len: usize,
        code_dim: usize,
        train_trajs: &[usize],
        seed: u64,
    ) -> Result<Self> {
        if code_dim == 0 {
            return Err(TrainError::InvalidConfig("code dimension must be at least 1".into()));
        }
        let layout = build_layout(&op)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shared = layout.init_values(&mut rng, &["head."]);
        let mut w = Vec::with_capacity(layout.total * code_dim);
        for s in &layout.segments {
            let b = 0.1 * s.bound();
            for _ in 0..s.len * code_dim {
                w.push(rng.gen_range(-b..b));
            }
        }
        Ok(GepsModel {
            op,
            layout,
            integrator,
            frame_shape: data.frame_shape(),
            context_len,
            code_dim,
            shared,
            w,
            codes: train_trajs.iter().map(|&t| (t, vec![0.0; code_dim])).collect(),
        })
    }

    pub fn theta(&self, code: &[f64]) -> Vec<f64> {
        let k = self.code_dim;
        self.shared
            .iter()
            .enumerate()
            .map(|(i, s)| s + (0..k).map(|j| self.w[i * k + j] * code[j]).sum::<f64>())
            .collect()
    }

    pub fn code_of(&self, traj: usize) -> Option<&[f64]> {
        self.codes.iter().find(|(t, _)| *t == traj).map(|(_, c)| c.as_slice())
    }

    /// Loss of one transition and its gradient with respect to theta.
    fn transition_grad(&self, theta: &[f64], u: &[f64], target: &[f64], eps: f64) -> Result<(f64, Vec<f64>)> {
        let (next, trace, bound) = advance(&self.op, &self.layout, theta, u, &self.frame_shape, &self.integrator)?;
        let (loss, dl) = nrmse_with_grad(target, &next, self.op.fields, eps)?;
        let (gt, _) = backward_through_trace(&bound, &trace, &dl)?;
        Ok((loss, gt))
    }

    pub fn predict_with_code(&self, code: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let theta = self.theta(code);
        Ok(advance(&self.op, &self.layout, &theta, u, &self.frame_shape, &self.integrator)?.0)
    }

    /// Fits a fresh code to the transitions observed inside `context`.
    /// Shared weights are never touched.
    pub fn adapt(&self, context: &Tensor, lr: f64, steps: usize, eps: f64) -> Result<Vec<f64>> {
        let fl: usize = self.frame_shape.iter().product();
        let frames = context.numel() / fl;
        let mut code = vec![0.0; self.code_dim];
        let mut opt = AdamW::new(self.code_dim);
        let k = self.code_dim;
        for _ in 0..steps {
            let theta = self.theta(&code);
            let mut gc = vec![0.0; k];
            for f in 0..frames.saturating_sub(1) {
                let u = &context.data()[f * fl..(f + 1) * fl];
                let tgt = &context.data()[(f + 1) * fl..(f + 2) * fl];
                let (_, gt) = self.transition_grad(&theta, u, tgt, eps)?;
                for (i, g) in gt.iter().enumerate() {
                    for j in 0..k {
                        gc[j] += self.w[i * k + j] * g;
                    }
                }
            }
            let n = frames.saturating_sub(1).max(1) as f64;
            gc.iter_mut().for_each(|g| *g /= n);
            opt.step(&mut code, &gc, lr, 0.0)?;
        }
        Ok(code)
    }
}

/// Adapted next-step loss over windows for one adaptation learning rate.
pub fn geps_window_loss(
    model: &GepsModel,
    data: &TrajectorySet,
    ws: &[Window],
    lr: f64,
    steps: usize,
    eps: f64,
    exec: Execution,
) -> Result<f64> {
    let t = model.context_len;
    let losses = map_indexed(exec, ws.len(), |i| -> Result<f64> {
        let w = ws[i];
        let ctx = context_tensor(data, w.traj, w.start, t);
        let code = model.adapt(&ctx, lr, steps, eps)?;
        let fl = data.frame_len();
        let last = &ctx.data()[ctx.numel() - fl..];
        let pred = model.predict_with_code(&code, last)?;
        let target: Vec<f64> = data.frame_slice(w.traj, w.start + t).iter().map(|x| *x as f64).collect();
        nrmse(&target, &pred, model.op.fields, eps)
    });
    let mut s = 0.0;
    for l in losses {
        s += l?;
    }
    Ok(s / ws.len().max(1) as f64)
}

/// Picks the adaptation learning rate with the lowest validation loss.
pub fn select_adapt_lr(
    model: &GepsModel,
    data: &TrajectorySet,
    val_ws: &[Window],
    geps: &GepsConfig,
    eps: f64,
    exec: Execution,
) -> Result<(f64, Vec<(f64, f64)>)> {
    let mut scores = Vec::new();
    for &lr in &geps.adapt_lrs {
        scores.push((lr, geps_window_loss(model, data, val_ws, lr, geps.adapt_steps, eps, exec)?));
    }
    let best = scores
        .iter()
        .filter(|s| s.1.is_finite())
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|s| s.0)
        .ok_or_else(|| TrainError::InvalidConfig("no adaptation learning rate candidates".into()))?;
    Ok((best, scores))
}

/// Joint training of shared weights, the code map and training codes.
pub fn geps_train(
    data: &TrajectorySet,
    op: OperatorConfig,
    integrator: IntegratorConfig,
    context_len: usize,
    geps: &GepsConfig,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<TrainOutcome<GepsModel>> {
    cfg.validate()?;
    let split = split_trajectories(data.n_traj(), cfg.split, cfg.seed);
    let model = GepsModel::new(data, op, integrator, context_len, geps.code_dim, &split.train, cfg.seed)?;
    let train_ws = windows(&split.train, data.n_frames, context_len);
    let val_ws = subsample(&windows(&split.val, data.n_frames, context_len), cfg.max_val_windows);
    let (model, metrics) = geps_train_on(model, data, &train_ws, &val_ws, cfg, exec)?;
    Ok(TrainOutcome { model, metrics, split })
}

pub fn geps_train_on(
    mut model: GepsModel,
    data: &TrajectorySet,
    train_ws: &[Window],
    val_ws: &[Window],
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<(GepsModel, Vec<EpochMetrics>)> {
    let p = model.layout.total;
    let k = model.code_dim;
    let n_codes = model.codes.len();
    // flat layout: shared | W | codes
    let mut weights = model.shared.clone();
    weights.extend_from_slice(&model.w);
    for (_, c) in &model.codes {
        weights.extend_from_slice(c);
    }
    let eps = cfg.loss_eps;
    let t = model.context_len;
    let grad_fn = |m: &GepsModel, win: Window, _k: u64| -> Result<(f64, Vec<f64>)> {
        let slot = m
            .codes
            .iter()
            .position(|(x, _)| *x == win.traj)
            .ok_or_else(|| TrainError::InvalidConfig(format!("trajectory {} has no code", win.traj)))?;
        let code = &m.codes[slot].1;
        let theta = m.theta(code);
        let u: Vec<f64> = data.frame_slice(win.traj, win.start + t - 1).iter().map(|x| *x as f64).collect();
        let target: Vec<f64> = data.frame_slice(win.traj, win.start + t).iter().map(|x| *x as f64).collect();
        let (loss, gt) = m.transition_grad(&theta, &u, &target, eps)?;
        let mut grad = vec![0.0; p + p * k + n_codes * k];
        grad[..p].copy_from_slice(&gt);
        let off = p + p * k + slot * k;
        for i in 0..p {
            for j in 0..k {
                grad[p + i * k + j] = gt[i] * code[j];
                grad[off + j] += m.w[i * k + j] * gt[i];
            }
        }
        Ok((loss, grad))
    };
    let val_fn = |m: &GepsModel| -> Result<f64> {
        // scored with code 0, the shared-weight forecast
        let zero = vec![0.0; k];
        let mut s = 0.0;
        for win in val_ws {
            let u: Vec<f64> = data.frame_slice(win.traj, win.start + t - 1).iter().map(|x| *x as f64).collect();
            let target: Vec<f64> = data.frame_slice(win.traj, win.start + t).iter().map(|x| *x as f64).collect();
            s += nrmse(&target, &m.predict_with_code(&zero, &u)?, m.op.fields, eps)?;
        }
        Ok(if val_ws.is_empty() { f64::NAN } else { s / val_ws.len() as f64 })
    };
    let sync = |m: &mut GepsModel, w: &[f64]| {
        m.shared.copy_from_slice(&w[..p]);
        m.w.copy_from_slice(&w[p..p + p * k]);
        for (s, (_, c)) in m.codes.iter_mut().enumerate() {
            c.copy_from_slice(&w[p + p * k + s * k..p + p * k + (s + 1) * k]);
        }
    };
    let metrics = run_loop(cfg, train_ws, &mut model, &mut weights, exec, grad_fn, val_fn, sync)?;
    Ok((model, metrics))
}
