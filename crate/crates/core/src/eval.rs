//! Rollout metrics, the identity baseline, the shift probe and parameter-space clustering.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrator::{IntegratorConfig, IntegratorError};
use crate::operator::{build_layout, BoundaryMode, OperatorConfig, ParamLayout};
use crate::parallel::{map_indexed, Execution};
use crate::pdegen::{GridSpec, TrajectorySet};
use crate::tensor::Tensor;
use crate::train::{advance, context_tensor, nrmse, DiscoModel, GepsModel, TrainError, Window};

pub const DEFAULT_HORIZONS: [usize; 4] = [1, 4, 8, 16];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shift probe needs periodic data")]
    NotPeriodic,
    #[error("parameter cloud is degenerate (all vectors identical)")]
    Degenerate,
    #[error("need at least 2 labels with 8 contexts each, got {0:?}")]
    InsufficientContexts(Vec<usize>),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Anything that maps a context `[T, C, space...]` to its next frame.
pub trait Predictor: Sync {
    fn context_len(&self) -> usize;
    fn channels(&self) -> usize;
    /// Operator parameters for a context, `None` for parameter-free predictors.
    fn infer(&self, context: &Tensor) -> Result<Option<Vec<f64>>>;
    /// Next frame from the last context frame; the flag reports an exhausted step budget.
    fn advance(&self, context: &Tensor, theta: Option<&[f64]>) -> Result<(Vec<f64>, bool)>;

    fn predict(&self, context: &Tensor) -> Result<(Vec<f64>, bool)> {
        let theta = self.infer(context)?;
        self.advance(context, theta.as_deref())
    }
}

fn last_frame(context: &Tensor) -> &[f64] {
    let fl = context.numel() / context.shape()[0];
    &context.data()[context.numel() - fl..]
}

fn theta_or_err(theta: Option<&[f64]>) -> Result<&[f64]> {
    theta.ok_or_else(|| EvalError::InvalidArgument("operator parameters required".into()))
}

impl Predictor for DiscoModel {
    fn context_len(&self) -> usize {
        DiscoModel::context_len(self)
    }

    fn channels(&self) -> usize {
        self.op.fields
    }

    fn infer(&self, context: &Tensor) -> Result<Option<Vec<f64>>> {
        Ok(Some(self.theta(context)?))
    }

    fn advance(&self, context: &Tensor, theta: Option<&[f64]>) -> Result<(Vec<f64>, bool)> {
        let (next, tr) = self.step_with_theta(theta_or_err(theta)?, last_frame(context))?;
        Ok((next, tr.budget_exhausted))
    }
}

/// Operator with a parameter vector supplied from outside, bypassing the hypernetwork.
#[derive(Debug, Clone)]
pub struct FixedTheta {
    pub op: OperatorConfig,
    pub layout: ParamLayout,
    pub theta: Vec<f64>,
    pub integrator: IntegratorConfig,
    pub frame_shape: Vec<usize>,
    pub context_len: usize,
}

impl FixedTheta {
    pub fn new(
        op: OperatorConfig,
        theta: Vec<f64>,
        integrator: IntegratorConfig,
        frame_shape: Vec<usize>,
        context_len: usize,
    ) -> Result<Self> {
        let layout = build_layout(&op).map_err(TrainError::from)?;
        if theta.len() != layout.total {
            return Err(EvalError::InvalidArgument(format!(
                "theta has {} values, layout needs {}",
                theta.len(),
                layout.total
            )));
        }
        Ok(FixedTheta {
            op,
            layout,
            theta,
            integrator,
            frame_shape,
            context_len,
        })
    }

    /// Single 3x3 convolution holding the five-point Laplacian, scaled so that the
    /// unit-interval solve covers one frame step of the heat equation.
    pub fn heat_stencil(grid: &GridSpec, beta: f64, dt: f64, integrator: IntegratorConfig) -> Result<Self> {
        if grid.dim() != 2 || !grid.is_periodic() {
            return Err(EvalError::InvalidArgument("heat stencil needs a periodic 2D grid".into()));
        }
        let (cy, cx) = (beta * dt / grid.dx(0).powi(2), beta * dt / grid.dx(1).powi(2));
        let op = OperatorConfig::single_conv(2, 1, BoundaryMode::Periodic);
        let theta = vec![0.0, cy, 0.0, cx, -2.0 * (cx + cy), cx, 0.0, cy, 0.0, 0.0];
        let mut shape = vec![1];
        shape.extend_from_slice(&grid.points);
        FixedTheta::new(op, theta, integrator, shape, 1)
    }
}

impl Predictor for FixedTheta {
    fn context_len(&self) -> usize {
        self.context_len
    }

    fn channels(&self) -> usize {
        self.op.fields
    }

    fn infer(&self, _context: &Tensor) -> Result<Option<Vec<f64>>> {
        Ok(Some(self.theta.clone()))
    }

    fn advance(&self, context: &Tensor, theta: Option<&[f64]>) -> Result<(Vec<f64>, bool)> {
        let th = theta_or_err(theta)?;
        let (next, tr, _) = advance(&self.op, &self.layout, th, last_frame(context), &self.frame_shape, &self.integrator)?;
        Ok((next, tr.budget_exhausted))
    }
}

/// Predicts the last context frame unchanged.
#[derive(Debug, Clone, Copy)]
pub struct Identity {
    pub context_len: usize,
    pub channels: usize,
}

impl Predictor for Identity {
    fn context_len(&self) -> usize {
        self.context_len
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn infer(&self, _context: &Tensor) -> Result<Option<Vec<f64>>> {
        Ok(None)
    }

    fn advance(&self, context: &Tensor, _theta: Option<&[f64]>) -> Result<(Vec<f64>, bool)> {
        Ok((last_frame(context).to_vec(), false))
    }
}

/// Shared-plus-code model whose code is fitted to each context before predicting.
#[derive(Debug, Clone)]
pub struct AdaptedGeps<'a> {
    pub model: &'a GepsModel,
    pub lr: f64,
    pub steps: usize,
    pub eps: f64,
}

impl Predictor for AdaptedGeps<'_> {
    fn context_len(&self) -> usize {
        self.model.context_len
    }

    fn channels(&self) -> usize {
        self.model.op.fields
    }

    fn infer(&self, context: &Tensor) -> Result<Option<Vec<f64>>> {
        let code = self.model.adapt(context, self.lr, self.steps, self.eps)?;
        Ok(Some(self.model.theta(&code)))
    }

    fn advance(&self, context: &Tensor, theta: Option<&[f64]>) -> Result<(Vec<f64>, bool)> {
        let m = self.model;
        let (next, tr, _) = advance(&m.op, &m.layout, theta_or_err(theta)?, last_frame(context), &m.frame_shape, &m.integrator)?;
        Ok((next, tr.budget_exhausted))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaMode {
    /// Recompute parameters from the sliding context at every step.
    #[default]
    Reestimate,
    /// Keep the parameters inferred from the initial context.
    Frozen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    /// Predicted frames, `[step][channel][space...]` flattened per step.
    pub frames: Vec<Vec<f64>>,
    pub frame_shape: Vec<usize>,
    /// NRMSE of every predicted step against the supplied truth.
    pub step_nrmse: Vec<f64>,
    /// Reported horizons (ascending) with their NRMSE.
    pub horizons: Vec<usize>,
    pub nrmse: Vec<f64>,
    /// One flag per solve.
    pub budget_exhausted: Vec<bool>,
    /// Set when a non-finite prediction stopped the rollout early.
    pub truncated: bool,
}

impl RolloutResult {
    pub fn nrmse_at(&self, horizon: usize) -> Option<f64> {
        self.horizons.iter().position(|h| *h == horizon).map(|i| self.nrmse[i])
    }
}

/// Autoregressive rollout of `truth.len()` steps; each prediction is appended to the
/// context and the oldest frame dropped.
pub fn rollout<P: Predictor + ?Sized>(
    model: &P,
    context: &Tensor,
    truth: &[Vec<f64>],
    horizons: &[usize],
    mode: ThetaMode,
) -> Result<RolloutResult> {
    let n = truth.len();
    if n == 0 {
        return Err(EvalError::InvalidArgument("rollout length must be at least 1".into()));
    }
    if context.shape().len() < 2 || context.shape()[0] != model.context_len() {
        return Err(EvalError::InvalidArgument(format!(
            "context shape {:?} does not hold {} frames",
            context.shape(),
            model.context_len()
        )));
    }
    let t = context.shape()[0];
    let fl = context.numel() / t;
    if truth.iter().any(|f| f.len() != fl) {
        return Err(EvalError::InvalidArgument("truth frames do not match the context frame size".into()));
    }
    let mut hs: Vec<usize> = horizons.iter().copied().filter(|h| *h >= 1 && *h <= n).collect();
    hs.sort_unstable();
    hs.dedup();

    let mut ctx = context.clone();
    let frozen = match mode {
        ThetaMode::Frozen => model.infer(&ctx)?,
        ThetaMode::Reestimate => None,
    };
    let mut out = RolloutResult {
        frames: Vec::with_capacity(n),
        frame_shape: context.shape()[1..].to_vec(),
        step_nrmse: Vec::with_capacity(n),
        horizons: Vec::new(),
        nrmse: Vec::new(),
        budget_exhausted: Vec::with_capacity(n),
        truncated: false,
    };
    for target in truth {
        let step = match mode {
            ThetaMode::Frozen => model.advance(&ctx, frozen.as_deref()),
            ThetaMode::Reestimate => model.predict(&ctx),
        };
        let (next, flag) = match step {
            Ok(v) => v,
            Err(EvalError::Train(TrainError::Integrator(IntegratorError::NonFinite { .. }))) => {
                out.truncated = true;
                break;
            }
            Err(e) => return Err(e),
        };
        if next.iter().any(|v| !v.is_finite()) {
            out.truncated = true;
            break;
        }
        out.step_nrmse.push(nrmse(target, &next, model.channels(), 1e-7)?);
        out.budget_exhausted.push(flag);
        let mut v = ctx.data()[fl..].to_vec();
        v.extend_from_slice(&next);
        ctx = Tensor::new(ctx.shape().to_vec(), v).expect("context shape");
        out.frames.push(next);
    }
    for h in hs {
        if h <= out.step_nrmse.len() {
            out.horizons.push(h);
            out.nrmse.push(out.step_nrmse[h - 1]);
        }
    }
    Ok(out)
}

/// Rollout starting from a stored window: context frames `start..start+T`, truth after it.
pub fn rollout_window<P: Predictor + ?Sized>(
    model: &P,
    data: &TrajectorySet,
    window: Window,
    steps: usize,
    horizons: &[usize],
    mode: ThetaMode,
) -> Result<RolloutResult> {
    let t = model.context_len();
    if window.traj >= data.n_traj() || window.start + t + steps > data.n_frames {
        return Err(EvalError::InvalidArgument(format!(
            "window {window:?} with {t} context frames and {steps} steps exceeds {} frames",
            data.n_frames
        )));
    }
    let ctx = context_tensor(data, window.traj, window.start, t);
    let truth: Vec<Vec<f64>> = (0..steps)
        .map(|k| data.frame_slice(window.traj, window.start + t + k).iter().map(|x| *x as f64).collect())
        .collect();
    rollout(model, &ctx, &truth, horizons, mode)
}

/// Per-horizon averages over a set of windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    pub horizons: Vec<usize>,
    pub nrmse: Vec<f64>,
    /// Number of windows that reached each horizon.
    pub counts: Vec<usize>,
    pub budget_exhausted: usize,
    pub truncated: usize,
}

impl HorizonReport {
    pub fn nrmse_at(&self, horizon: usize) -> Option<f64> {
        self.horizons.iter().position(|h| *h == horizon).map(|i| self.nrmse[i])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("horizon,nrmse,count\n");
        for ((h, v), c) in self.horizons.iter().zip(&self.nrmse).zip(&self.counts) {
            s.push_str(&format!("{h},{v},{c}\n"));
        }
        s
    }
}

/// Rolls every window as far as the data allows (up to the largest horizon) and averages.
pub fn evaluate<P: Predictor + ?Sized>(
    model: &P,
    data: &TrajectorySet,
    windows: &[Window],
    horizons: &[usize],
    mode: ThetaMode,
    exec: Execution,
) -> Result<HorizonReport> {
    let t = model.context_len();
    let max_h = horizons.iter().copied().max().unwrap_or(1).max(1);
    let results = map_indexed(exec, windows.len(), |i| {
        let w = windows[i];
        let avail = data.n_frames.saturating_sub(w.start + t);
        if avail == 0 {
            return Err(EvalError::InvalidArgument(format!("window {w:?} has no target frame")));
        }
        rollout_window(model, data, w, avail.min(max_h), horizons, mode)
    });
    let mut hs: Vec<usize> = horizons.iter().copied().filter(|h| *h >= 1).collect();
    hs.sort_unstable();
    hs.dedup();
    let mut sums = vec![0.0; hs.len()];
    let mut counts = vec![0usize; hs.len()];
    let (mut budget, mut truncated) = (0, 0);
    for r in results {
        let r = r?;
        budget += r.budget_exhausted.iter().filter(|f| **f).count();
        truncated += r.truncated as usize;
        for (k, h) in hs.iter().enumerate() {
            if let Some(v) = r.nrmse_at(*h) {
                sums[k] += v;
                counts[k] += 1;
            }
        }
    }
    let keep: Vec<usize> = (0..hs.len()).filter(|k| counts[*k] > 0).collect();
    Ok(HorizonReport {
        horizons: keep.iter().map(|k| hs[*k]).collect(),
        nrmse: keep.iter().map(|k| sums[*k] / counts[*k] as f64).collect(),
        counts: keep.iter().map(|k| counts[*k]).collect(),
        budget_exhausted: budget,
        truncated,
    })
}

/// `nrmse(u_{t+n}, u_t)` averaged over every frame `t >= context_len - 1` of the given
/// trajectories that has a frame `n` steps later.
pub fn identity_baseline(data: &TrajectorySet, trajs: &[usize], context_len: usize, horizons: &[usize]) -> Result<HorizonReport> {
    if context_len == 0 {
        return Err(EvalError::InvalidArgument("context length must be at least 1".into()));
    }
    let mut hs: Vec<usize> = horizons.iter().copied().filter(|h| *h >= 1).collect();
    hs.sort_unstable();
    hs.dedup();
    let c = data.channels();
    let frame = |tr: usize, t: usize| -> Vec<f64> { data.frame_slice(tr, t).iter().map(|x| *x as f64).collect() };
    let mut report = HorizonReport {
        horizons: Vec::new(),
        nrmse: Vec::new(),
        counts: Vec::new(),
        budget_exhausted: 0,
        truncated: 0,
    };
    for h in hs {
        let (mut sum, mut count) = (0.0, 0usize);
        for &tr in trajs {
            for t in context_len - 1..data.n_frames.saturating_sub(h) {
                sum += nrmse(&frame(tr, t + h), &frame(tr, t), c, 1e-7)?;
                count += 1;
            }
        }
        if count > 0 {
            report.horizons.push(h);
            report.nrmse.push(sum / count as f64);
            report.counts.push(count);
        }
    }
    Ok(report)
}

/// Next-step NRMSE after circularly shifting every context frame and the target by `shift`.
pub fn shift_probe<P: Predictor + ?Sized>(model: &P, data: &TrajectorySet, window: Window, shift: &[isize]) -> Result<f64> {
    if !data.grid.is_periodic() {
        return Err(EvalError::NotPeriodic);
    }
    if shift.len() != data.grid.dim() {
        return Err(EvalError::InvalidArgument(format!(
            "shift {shift:?} does not match a {}D grid",
            data.grid.dim()
        )));
    }
    let t = model.context_len();
    if window.start + t >= data.n_frames {
        return Err(EvalError::InvalidArgument(format!("window {window:?} has no target frame")));
    }
    let mut s = vec![0isize];
    s.extend_from_slice(shift);
    let ctx = context_tensor(data, window.traj, window.start, t).roll_spatial(&s).map_err(to_arg)?;
    let target = data.frame(window.traj, window.start + t).roll_spatial(shift).map_err(to_arg)?;
    let (pred, _) = model.predict(&ctx)?;
    Ok(nrmse(target.data(), &pred, model.channels(), 1e-7)?)
}

fn to_arg(e: impl std::fmt::Display) -> EvalError {
    EvalError::InvalidArgument(e.to_string())
}

/// Label index per trajectory, numbering distinct coefficient sets by first appearance.
pub fn coefficient_labels(data: &TrajectorySet) -> Vec<usize> {
    let mut seen = Vec::new();
    data.coefficients
        .iter()
        .map(|c| match seen.iter().position(|s| s == c) {
            Some(i) => i,
            None => {
                seen.push(c.clone());
                seen.len() - 1
            }
        })
        .collect()
}

/// Interior parameter vectors, one row per context.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCloud {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl ParamCloud {
    pub fn width(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }
}

/// Infers theta for every context and keeps the segments shared across field counts.
pub fn collect_cloud<P: Predictor + ?Sized>(
    model: &P,
    layout: &ParamLayout,
    contexts: &[(Tensor, usize)],
    exec: Execution,
) -> Result<ParamCloud> {
    let rows = map_indexed(exec, contexts.len(), |i| -> Result<Vec<f64>> {
        let th = model
            .infer(&contexts[i].0)?
            .ok_or_else(|| EvalError::InvalidArgument("predictor has no operator parameters".into()))?;
        Ok(layout.interior_values(&th))
    });
    Ok(ParamCloud {
        rows: rows.into_iter().collect::<Result<_>>()?,
        labels: contexts.iter().map(|c| c.1).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamAnalysis {
    /// First two principal coordinates per context.
    pub projection: Vec<[f64; 2]>,
    /// Variance captured by each of the two components.
    pub explained: [f64; 2],
    pub clusters: Vec<usize>,
    pub purity: f64,
    /// Mean purity of the same clustering against shuffled labels.
    pub null_purity: f64,
}

impl ParamAnalysis {
    pub fn projection_csv(&self, labels: &[usize]) -> String {
        let mut s = String::from("context_id,label,pc1,pc2,cluster\n");
        for (i, (p, c)) in self.projection.iter().zip(&self.clusters).enumerate() {
            s.push_str(&format!("{i},{},{},{},{c}\n", labels[i], p[0], p[1]));
        }
        s
    }
}

pub const KMEANS_RESTARTS: usize = 10;
const NULL_PERMUTATIONS: usize = 200;

/// PCA projection, k-means with one cluster per label and the resulting purity.
pub fn param_space_analysis(cloud: &ParamCloud, seed: u64) -> Result<ParamAnalysis> {
    let n = cloud.rows.len();
    let k = cloud.labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut per_label = vec![0usize; k];
    for l in &cloud.labels {
        per_label[*l] += 1;
    }
    if k < 2 || per_label.iter().any(|c| *c < 8) || cloud.labels.len() != n {
        return Err(EvalError::InsufficientContexts(per_label));
    }
    let d = cloud.width();
    if cloud.rows.iter().any(|r| r.len() != d) {
        return Err(EvalError::InvalidArgument("parameter rows differ in width".into()));
    }
    // a cloud without spread cannot be split: every context lands in one cluster
    let (projection, explained, clusters) = match pca2(&cloud.rows) {
        Ok((p, e)) => (p, e, kmeans(&cloud.rows, k, KMEANS_RESTARTS, seed)),
        Err(EvalError::Degenerate) => (vec![[0.0; 2]; n], [0.0; 2], vec![0; n]),
        Err(e) => return Err(e),
    };
    let purity = purity(&clusters, &cloud.labels, k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_4E11);
    let mut shuffled = cloud.labels.clone();
    let mut null = 0.0;
    for _ in 0..NULL_PERMUTATIONS {
        shuffled.shuffle(&mut rng);
        null += self::purity(&clusters, &shuffled, k);
    }
    Ok(ParamAnalysis {
        projection,
        explained,
        clusters,
        purity,
        null_purity: null / NULL_PERMUTATIONS as f64,
    })
}

/// `(1/N) sum over clusters of the majority label count`.
pub fn purity(clusters: &[usize], labels: &[usize], n_labels: usize) -> f64 {
    let nc = clusters.iter().copied().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; n_labels]; nc];
    for (c, l) in clusters.iter().zip(labels) {
        table[*c][*l] += 1;
    }
    let hit: usize = table.iter().map(|row| row.iter().copied().max().unwrap_or(0)).sum();
    hit as f64 / clusters.len().max(1) as f64
}

/// Two leading principal components via the eigendecomposition of the covariance,
/// computed in its `N x N` Gram form. Each component's largest-magnitude loading is positive.
pub fn pca2(rows: &[Vec<f64>]) -> Result<(Vec<[f64; 2]>, [f64; 2])> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if n < 2 || d == 0 {
        return Err(EvalError::Degenerate);
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect()).collect();
    let gram = DMatrix::from_fn(n, n, |i, j| {
        centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum::<f64>() / (n - 1) as f64
    });
    let total: f64 = gram.diagonal().iter().sum();
    let scale = mean.iter().map(|m| m * m).sum::<f64>().max(1.0);
    if !(total > 1e-24 * scale) {
        return Err(EvalError::Degenerate);
    }
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    let mut proj = vec![[0.0; 2]; n];
    let mut explained = [0.0; 2];
    for (c, &idx) in order.iter().take(2).enumerate() {
        let lam = eig.eigenvalues[idx].max(0.0);
        explained[c] = lam;
        if lam <= 1e-12 * total {
            continue;
        }
        // loading vector in parameter space: X^T a, normalized
        let a = eig.eigenvectors.column(idx);
        let mut load = vec![0.0; d];
        for (i, r) in centered.iter().enumerate() {
            for (l, v) in load.iter_mut().zip(r) {
                *l += a[i] * v;
            }
        }
        let norm = load.iter().map(|v| v * v).sum::<f64>().sqrt();
        let big = load.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let sign = if big < 0.0 { -1.0 } else { 1.0 };
        for (i, r) in centered.iter().enumerate() {
            proj[i][c] = sign * r.iter().zip(&load).map(|(x, l)| x * l).sum::<f64>() / norm;
        }
    }
    Ok((proj, explained))
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd iterations from k-means++ seeds; the restart with the lowest inertia wins.
pub fn kmeans(rows: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Vec<usize> {
    let n = rows.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for r in 0..restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64 * 0x9E37_79B9));
        let mut centers: Vec<Vec<f64>> = vec![rows[rng.gen_range(0..n)].clone()];
        while centers.len() < k {
            let w: Vec<f64> = rows
                .iter()
                .map(|x| centers.iter().map(|c| dist2(x, c)).fold(f64::INFINITY, f64::min))
                .collect();
            let total: f64 = w.iter().sum();
            let pick = if total > 0.0 {
                let mut u = rng.gen_range(0.0..total);
                let mut idx = n - 1;
                for (i, wi) in w.iter().enumerate() {
                    if u < *wi {
                        idx = i;
                        break;
                    }
                    u -= wi;
                }
                idx
            } else {
                rng.gen_range(0..n)
            };
            centers.push(rows[pick].clone());
        }
        let mut assign = vec![usize::MAX; n];
        for _ in 0..300 {
            let mut changed = false;
            for (i, x) in rows.iter().enumerate() {
                let c = (0..k)
                    .min_by(|a, b| dist2(x, &centers[*a]).total_cmp(&dist2(x, &centers[*b])))
                    .unwrap_or(0);
                if assign[i] != c {
                    assign[i] = c;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            for (c, center) in centers.iter_mut().enumerate() {
                let members: Vec<&Vec<f64>> = rows.iter().zip(&assign).filter(|(_, a)| **a == c).map(|(x, _)| x).collect();
                if members.is_empty() {
                    continue;
                }
                center.iter_mut().for_each(|v| *v = 0.0);
                for m in &members {
                    for (v, x) in center.iter_mut().zip(m.iter()) {
                        *v += x / members.len() as f64;
                    }
                }
            }
        }
        let inertia: f64 = rows.iter().zip(&assign).map(|(x, a)| dist2(x, &centers[*a])).sum();
        if best.as_ref().map_or(true, |(b, _)| inertia < *b) {
            best = Some((inertia, assign));
        }
    }
    best.map(|b| b.1).unwrap_or_default()
}
