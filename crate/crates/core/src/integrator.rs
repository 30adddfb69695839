//! Bogacki–Shampine 3(2) adaptive solve over the unit frame interval and
//! exact discrete backpropagation through the recorded step sequence.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::operator::{BoundOperator, OperatorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegratorError {
    #[error("invalid integrator config: {0}")]
    InvalidConfig(String),
    #[error("{rejects} consecutive rejected steps at s = {t}")]
    RejectLimit { t: f64, rejects: usize },
    #[error("non-finite state at s = {t}")]
    NonFinite { t: f64 },
    #[error("trace does not match right-hand side: {0}")]
    TraceMismatch(String),
    #[error(transparent)]
    Operator(#[from] OperatorError),
}

pub type Result<T> = std::result::Result<T, IntegratorError>;

/// Right-hand side `du/ds = f(s, u)` with a vector-Jacobian product.
pub trait OdeRhs: Sync {
    fn n_params(&self) -> usize;

    fn eval(&self, t: f64, u: &[f64]) -> Result<Vec<f64>>;

    /// `(cot^T df/du, cot^T df/dparams)` at `(t, u)`.
    fn vjp(&self, t: f64, u: &[f64], cot: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;
}

impl OdeRhs for BoundOperator {
    fn n_params(&self) -> usize {
        self.theta.len()
    }

    fn eval(&self, _t: f64, u: &[f64]) -> Result<Vec<f64>> {
        Ok(BoundOperator::eval(self, u)?)
    }

    fn vjp(&self, _t: f64, u: &[f64], cot: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok(BoundOperator::vjp(self, u, cot)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub rtol: f64,
    pub atol: f64,
    pub h0: f64,
    pub max_steps: usize,
    pub safety: f64,
    pub min_factor: f64,
    pub max_factor: f64,
    pub max_rejects: usize,
    /// Upper bound on fixed completion steps once `max_steps` is spent.
    pub tail_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            rtol: 1e-4,
            atol: 1e-6,
            h0: 0.125,
            max_steps: 32,
            safety: 0.9,
            min_factor: 0.2,
            max_factor: 5.0,
            max_rejects: 50,
            tail_steps: 4,
        }
    }
}

impl IntegratorConfig {
    /// Tight tolerances for analytic comparisons, with a step budget large
    /// enough that the completion tail never runs.
    pub fn tight() -> Self {
        IntegratorConfig {
            rtol: 1e-8,
            atol: 1e-10,
            max_steps: 100_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(IntegratorError::InvalidConfig(m.to_string()));
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return bad("rtol and atol must be positive");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1");
        }
        if !(self.h0 > 0.0 && self.h0 <= 1.0) {
            return bad("h0 must lie in (0, 1]");
        }
        if !(self.min_factor > 0.0 && self.min_factor <= 1.0 && self.max_factor >= 1.0) {
            return bad("step clamp must satisfy 0 < min <= 1 <= max");
        }
        if !(self.safety > 0.0 && self.safety <= 1.0) {
            return bad("safety must lie in (0, 1]");
        }
        if self.tail_steps == 0 {
            return bad("tail_steps must be at least 1");
        }
        Ok(())
    }
}

const C2: f64 = 0.5;
const C3: f64 = 0.75;
const B1: f64 = 2.0 / 9.0;
const B2: f64 = 1.0 / 3.0;
const B3: f64 = 4.0 / 9.0;
const E1: f64 = 7.0 / 24.0;
const E2: f64 = 0.25;
const E3: f64 = 1.0 / 3.0;
const E4: f64 = 0.125;

/// One accepted step: start time, size and the three stage inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub t: f64,
    pub h: f64,
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    pub y3: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveTrace {
    pub steps: Vec<TraceStep>,
    pub budget_exhausted: bool,
    pub rejects: usize,
    pub f_evals: usize,
}

impl SolveTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_time(&self) -> f64 {
        self.steps.iter().map(|s| s.h).sum()
    }
}

struct Step {
    y2: Vec<f64>,
    y3: Vec<f64>,
    u_next: Vec<f64>,
    err: Vec<f64>,
    k4: Vec<f64>,
}

fn axpy(u: &[f64], a: f64, k: &[f64]) -> Vec<f64> {
    u.iter().zip(k).map(|(x, y)| x + a * y).collect()
}

fn finite(v: &[f64], t: f64) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(IntegratorError::NonFinite { t })
    }
}

fn raw_step<F: OdeRhs + ?Sized>(f: &F, u: &[f64], k1: &[f64], t: f64, h: f64, evals: &mut usize) -> Result<Step> {
    let y2 = axpy(u, C2 * h, k1);
    let k2 = f.eval(t + C2 * h, &y2)?;
    finite(&k2, t)?;
    let y3 = axpy(u, C3 * h, &k2);
    let k3 = f.eval(t + C3 * h, &y3)?;
    finite(&k3, t)?;
    let u_next: Vec<f64> = (0..u.len())
        .map(|i| u[i] + h * (B1 * k1[i] + B2 * k2[i] + B3 * k3[i]))
        .collect();
    finite(&u_next, t)?;
    let k4 = f.eval(t + h, &u_next)?;
    finite(&k4, t)?;
    *evals += 3;
    let err = (0..u.len())
        .map(|i| {
            let low = u[i] + h * (E1 * k1[i] + E2 * k2[i] + E3 * k3[i] + E4 * k4[i]);
            (u_next[i] - low).abs()
        })
        .collect();
    Ok(Step { y2, y3, u_next, err, k4 })
}

/// A single step from `(t, u)`: third-order update and per-element
/// difference to the embedded second-order solution.
pub fn step_bs23<F: OdeRhs + ?Sized>(f: &F, u: &[f64], t: f64, h: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(h > 0.0) {
        return Err(IntegratorError::InvalidConfig(format!("step size {h} must be positive")));
    }
    let k1 = f.eval(t, u)?;
    finite(&k1, t)?;
    let mut n = 1;
    let s = raw_step(f, u, &k1, t, h, &mut n)?;
    Ok((s.u_next, s.err))
}

/// Weighted RMS of the local error. Terms are summed in sorted order so the value,
/// and with it every step-size decision, does not depend on element order.
fn error_norm(u: &[f64], next: &[f64], err: &[f64], cfg: &IntegratorConfig) -> f64 {
    if u.is_empty() {
        return 0.0;
    }
    let mut terms: Vec<f64> = (0..u.len())
        .map(|i| {
            let sc = cfg.atol + cfg.rtol * u[i].abs().max(next[i].abs());
            (err[i] / sc).powi(2)
        })
        .collect();
    terms.sort_unstable_by(f64::total_cmp);
    let s: f64 = terms.iter().sum();
    (s / u.len() as f64).sqrt()
}

/// Integrates `du/ds = f` from `s = 0` to `s = 1`.
pub fn solve_unit_interval<F: OdeRhs + ?Sized>(f: &F, u0: &[f64], cfg: &IntegratorConfig) -> Result<(Vec<f64>, SolveTrace)> {
    cfg.validate()?;
    finite(u0, 0.0)?;
    let mut trace = SolveTrace::default();
    let mut u = u0.to_vec();
    let mut k1 = f.eval(0.0, &u)?;
    finite(&k1, 0.0)?;
    trace.f_evals = 1;
    let mut t = 0.0f64;
    let mut h = cfg.h0.min(1.0);
    let mut consecutive = 0;
    while t < 1.0 && trace.steps.len() < cfg.max_steps {
        let last = t + h >= 1.0 - 1e-12;
        let h_try = if last { 1.0 - t } else { h };
        let s = raw_step(f, &u, &k1, t, h_try, &mut trace.f_evals)?;
        let e = error_norm(&u, &s.u_next, &s.err, cfg);
        let factor = if e == 0.0 {
            cfg.max_factor
        } else {
            (cfg.safety * e.powf(-1.0 / 3.0)).clamp(cfg.min_factor, cfg.max_factor)
        };
        if e <= 1.0 {
            trace.steps.push(TraceStep {
                t,
                h: h_try,
                y1: std::mem::replace(&mut u, s.u_next),
                y2: s.y2,
                y3: s.y3,
            });
            k1 = s.k4;
            t = if last { 1.0 } else { t + h_try };
            consecutive = 0;
            h = h_try * factor;
        } else {
            trace.rejects += 1;
            consecutive += 1;
            if consecutive >= cfg.max_rejects {
                return Err(IntegratorError::RejectLimit { t, rejects: consecutive });
            }
            h = h_try * factor;
        }
    }
    if t < 1.0 {
        trace.budget_exhausted = true;
        let remaining = 1.0 - t;
        let h_last = trace.steps.last().map(|s| s.h).unwrap_or(cfg.h0);
        let n = ((remaining / h_last).ceil() as usize).clamp(1, cfg.tail_steps);
        let hf = remaining / n as f64;
        for i in 0..n {
            let s = raw_step(f, &u, &k1, t, hf, &mut trace.f_evals)?;
            trace.steps.push(TraceStep {
                t,
                h: hf,
                y1: std::mem::replace(&mut u, s.u_next),
                y2: s.y2,
                y3: s.y3,
            });
            k1 = s.k4;
            t = if i + 1 == n { 1.0 } else { t + hf };
        }
    }
    Ok((u, trace))
}

/// Fixed-step integration with `n` equal steps over `[0, 1]`.
pub fn solve_fixed<F: OdeRhs + ?Sized>(f: &F, u0: &[f64], n: usize) -> Result<Vec<f64>> {
    let h = 1.0 / n as f64;
    let mut u = u0.to_vec();
    let mut k1 = f.eval(0.0, &u)?;
    let mut evals = 0;
    for i in 0..n {
        let s = raw_step(f, &u, &k1, i as f64 * h, h, &mut evals)?;
        u = s.u_next;
        k1 = s.k4;
    }
    Ok(u)
}

/// Reverse pass through the recorded steps. Returns `(grad params, grad u0)`.
pub fn backward_through_trace<F: OdeRhs + ?Sized>(f: &F, trace: &SolveTrace, grad_out: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut gp = vec![0.0; f.n_params()];
    let mut gu = grad_out.to_vec();
    for st in trace.steps.iter().rev() {
        if st.y1.len() != gu.len() || st.y2.len() != gu.len() || st.y3.len() != gu.len() {
            return Err(IntegratorError::TraceMismatch(format!(
                "stage length {} vs cotangent {}",
                st.y1.len(),
                gu.len()
            )));
        }
        let h = st.h;
        let mut kb2: Vec<f64> = gu.iter().map(|g| h * B2 * g).collect();
        let mut kb1: Vec<f64> = gu.iter().map(|g| h * B1 * g).collect();
        let kb3: Vec<f64> = gu.iter().map(|g| h * B3 * g).collect();
        let add_params = |gp: &mut Vec<f64>, p: Vec<f64>| -> Result<()> {
            if p.len() != gp.len() {
                return Err(IntegratorError::TraceMismatch(format!("param grad length {} vs {}", p.len(), gp.len())));
            }
            gp.iter_mut().zip(p).for_each(|(a, b)| *a += b);
            Ok(())
        };
        let (g3u, g3p) = f.vjp(st.t + C3 * h, &st.y3, &kb3)?;
        add_params(&mut gp, g3p)?;
        for i in 0..gu.len() {
            gu[i] += g3u[i];
            kb2[i] += C3 * h * g3u[i];
        }
        let (g2u, g2p) = f.vjp(st.t + C2 * h, &st.y2, &kb2)?;
        add_params(&mut gp, g2p)?;
        for i in 0..gu.len() {
            gu[i] += g2u[i];
            kb1[i] += C2 * h * g2u[i];
        }
        let (g1u, g1p) = f.vjp(st.t, &st.y1, &kb1)?;
        add_params(&mut gp, g1p)?;
        for i in 0..gu.len() {
            gu[i] += g1u[i];
        }
    }
    Ok((gp, gu))
}
