//! Finite-difference and spectral trajectory generators.
//!
//! Three families are provided: viscous Burgers in 1D (conservative
//! second-order upwind flux, central diffusion, SSP-RK2 substeps), the
//! FitzHugh–Nagumo diffusion-reaction system in 2D (5-point Laplacian with
//! mirrored ghost cells, classical RK4 substeps) and the periodic heat
//! equation in 2D solved exactly in Fourier space.
//!
//! Everything is computed in `f64`; [`TrajectorySet`] stores `f32`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parallel::{map_indexed, Execution};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PdeError {
    #[error("explicit step {dt:.3e} exceeds stability bound {bound:.3e}")]
    CflViolated { dt: f64, bound: f64 },
    #[error("boundary condition mismatch: {0}")]
    Boundary(String),
    #[error("unknown initial-condition sampler {0:?}")]
    UnknownSampler(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("missing coefficient {0:?}")]
    MissingCoefficient(String),
    #[error("invalid family: {0}")]
    InvalidFamily(String),
    #[error("non-finite state in trajectory {0}")]
    NonFinite(usize),
}

pub type Result<T> = std::result::Result<T, PdeError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Periodic,
    Neumann,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub points: Vec<usize>,
    pub length: Vec<f64>,
    pub boundary: Vec<Boundary>,
}

impl GridSpec {
    pub fn periodic_1d(points: usize, length: f64) -> Self {
        GridSpec {
            points: vec![points],
            length: vec![length],
            boundary: vec![Boundary::Periodic],
        }
    }

    pub fn periodic_2d(points: usize, length: f64) -> Self {
        GridSpec {
            points: vec![points; 2],
            length: vec![length; 2],
            boundary: vec![Boundary::Periodic; 2],
        }
    }

    pub fn neumann_2d(points: usize, length: f64) -> Self {
        GridSpec {
            points: vec![points; 2],
            length: vec![length; 2],
            boundary: vec![Boundary::Neumann; 2],
        }
    }

    pub fn dim(&self) -> usize {
        self.points.len()
    }

    pub fn len(&self) -> usize {
        self.points.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.points.len();
        if d == 0 || d > 2 {
            return Err(PdeError::InvalidGrid(format!("spatial dim {} not in 1..=2", d)));
        }
        if self.length.len() != d || self.boundary.len() != d {
            return Err(PdeError::InvalidGrid("per-axis lengths/boundaries must match dim".into()));
        }
        if self.points.iter().any(|&p| p < 3) || self.length.iter().any(|&l| !(l > 0.0)) {
            return Err(PdeError::InvalidGrid("need >= 3 points and positive length per axis".into()));
        }
        Ok(())
    }

    /// Grid spacing: `L / n` on periodic axes, `L / (n - 1)` otherwise.
    pub fn dx(&self, axis: usize) -> f64 {
        let n = self.points[axis] as f64;
        match self.boundary[axis] {
            Boundary::Periodic => self.length[axis] / n,
            Boundary::Neumann => self.length[axis] / (n - 1.0),
        }
    }

    pub fn is_periodic(&self) -> bool {
        self.boundary.iter().all(|b| *b == Boundary::Periodic)
    }

    /// Coordinate of grid index `i` on `axis`.
    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        i as f64 * self.dx(axis)
    }
}

pub type Coefficients = BTreeMap<String, f64>;

fn coef(c: &Coefficients, name: &str) -> Result<f64> {
    c.get(name).copied().ok_or_else(|| PdeError::MissingCoefficient(name.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyId {
    Burgers1d,
    Diffreact2d,
    Heat2d,
}

impl FamilyId {
    pub fn field_names(self) -> Vec<String> {
        match self {
            FamilyId::Burgers1d | FamilyId::Heat2d => vec!["u".into()],
            FamilyId::Diffreact2d => vec!["activator".into(), "inhibitor".into()],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FamilyId::Burgers1d => "burgers1d",
            FamilyId::Diffreact2d => "diffreact2d",
            FamilyId::Heat2d => "heat2d",
        }
    }
}

/// How per-trajectory coefficients are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientSampler {
    /// Trajectory `i` uses entry `i mod len`.
    Grid(Vec<Coefficients>),
    /// Independent uniform draw per named coefficient.
    Uniform(BTreeMap<String, (f64, f64)>),
}

impl CoefficientSampler {
    pub fn draw(&self, seed: u64, index: usize) -> Result<Coefficients> {
        match self {
            CoefficientSampler::Grid(g) => {
                if g.is_empty() {
                    return Err(PdeError::InvalidFamily("empty coefficient grid".into()));
                }
                Ok(g[index % g.len()].clone())
            }
            CoefficientSampler::Uniform(r) => {
                let mut rng = stream_rng(seed ^ 0xC0EF_F1C1_E475, index);
                Ok(r.iter().map(|(k, (lo, hi))| (k.clone(), rng.gen_range(*lo..=*hi))).collect())
            }
        }
    }

    pub fn label_count(&self) -> Option<usize> {
        match self {
            CoefficientSampler::Grid(g) => Some(g.len()),
            CoefficientSampler::Uniform(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IcSampler {
    GaussianWhite,
    FourierSuperposition,
    GaussianBump,
}

impl std::str::FromStr for IcSampler {
    type Err = PdeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_white" => Ok(IcSampler::GaussianWhite),
            "fourier_superposition" => Ok(IcSampler::FourierSuperposition),
            "gaussian_bump" => Ok(IcSampler::GaussianBump),
            other => Err(PdeError::UnknownSampler(other.into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdeFamily {
    pub id: FamilyId,
    pub coefficients: CoefficientSampler,
    pub ic: IcSampler,
    /// Internal steps per saved frame; `None` picks the smallest stable count.
    pub substeps: Option<usize>,
    /// Saved frames including the initial state.
    pub frames: usize,
    /// Physical time between saved frames.
    pub dt: f64,
}

fn grid_of(entries: &[&[(&str, f64)]]) -> CoefficientSampler {
    CoefficientSampler::Grid(
        entries
            .iter()
            .map(|e| e.iter().map(|(k, v)| (k.to_string(), *v)).collect())
            .collect(),
    )
}

impl PdeFamily {
    /// Burgers with ν/π ∈ {0.05, 0.2, 1.0}.
    pub fn burgers_default() -> Self {
        PdeFamily {
            id: FamilyId::Burgers1d,
            coefficients: grid_of(&[&[("nu", 0.05 * PI)], &[("nu", 0.2 * PI)], &[("nu", PI)]]),
            ic: IcSampler::FourierSuperposition,
            substeps: None,
            frames: 24,
            dt: 0.05,
        }
    }

    /// D_u ∈ {1e-3, 5e-3}, D_v = 5 D_u, k = 5e-3.
    pub fn diffreact_default() -> Self {
        PdeFamily {
            id: FamilyId::Diffreact2d,
            coefficients: grid_of(&[
                &[("d_u", 1e-3), ("d_v", 5e-3), ("k", 5e-3)],
                &[("d_u", 5e-3), ("d_v", 2.5e-2), ("k", 5e-3)],
            ]),
            ic: IcSampler::GaussianWhite,
            substeps: None,
            frames: 24,
            dt: 0.05,
        }
    }

    /// β ∈ {0.01, 0.05}.
    pub fn heat_default() -> Self {
        PdeFamily {
            id: FamilyId::Heat2d,
            coefficients: grid_of(&[&[("beta", 0.01)], &[("beta", 0.05)]]),
            ic: IcSampler::GaussianBump,
            substeps: None,
            frames: 9,
            dt: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.frames < 1 || !(self.dt > 0.0) {
            return Err(PdeError::InvalidFamily("need frames >= 1 and dt > 0".into()));
        }
        if self.substeps == Some(0) {
            return Err(PdeError::InvalidFamily("substeps must be positive".into()));
        }
        Ok(())
    }
}

/// A batch of trajectories stored as `[trajectory][time][channel][space...]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySet {
    pub grid: GridSpec,
    pub field_names: Vec<String>,
    pub coefficients: Vec<Coefficients>,
    pub n_frames: usize,
    pub dt: f64,
    pub generator: String,
    pub seed: u64,
    #[serde(skip)]
    pub data: Vec<f32>,
}

impl TrajectorySet {
    pub fn n_traj(&self) -> usize {
        self.coefficients.len()
    }

    pub fn channels(&self) -> usize {
        self.field_names.len()
    }

    pub fn frame_len(&self) -> usize {
        self.channels() * self.grid.len()
    }

    pub fn frame_shape(&self) -> Vec<usize> {
        let mut s = vec![self.channels()];
        s.extend(&self.grid.points);
        s
    }

    pub fn frame_slice(&self, traj: usize, t: usize) -> &[f32] {
        let fl = self.frame_len();
        let off = (traj * self.n_frames + t) * fl;
        &self.data[off..off + fl]
    }

    /// One frame as an `f64` tensor `[C, space...]`.
    pub fn frame(&self, traj: usize, t: usize) -> Tensor {
        let data = self.frame_slice(traj, t).iter().map(|v| *v as f64).collect();
        Tensor::new(self.frame_shape(), data).expect("frame shape consistent")
    }

    pub fn check(&self) -> Result<()> {
        let expect = self.n_traj() * self.n_frames * self.frame_len();
        if self.data.len() != expect {
            return Err(PdeError::InvalidGrid(format!(
                "payload has {} values, metadata implies {}",
                self.data.len(),
                expect
            )));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(PdeError::NonFinite(i / (self.n_frames * self.frame_len())));
        }
        Ok(())
    }

    /// Trajectory subset, preserving order.
    pub fn select(&self, trajs: &[usize]) -> TrajectorySet {
        let per = self.n_frames * self.frame_len();
        let mut data = Vec::with_capacity(trajs.len() * per);
        for &t in trajs {
            data.extend_from_slice(&self.data[t * per..(t + 1) * per]);
        }
        TrajectorySet {
            coefficients: trajs.iter().map(|&t| self.coefficients[t].clone()).collect(),
            data,
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> TrajectorySet {
        TrajectorySet {
            grid: self.grid.clone(),
            field_names: self.field_names.clone(),
            coefficients: vec![],
            n_frames: self.n_frames,
            dt: self.dt,
            generator: self.generator.clone(),
            seed: self.seed,
            data: vec![],
        }
    }
}

pub(crate) fn stream_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index as u64);
    r
}

/// Initial field drawn deterministically from `(seed, index)`.
pub fn sample_ic(sampler: IcSampler, grid: &GridSpec, seed: u64, index: usize) -> Result<Vec<f64>> {
    grid.validate()?;
    let mut rng = stream_rng(seed, index);
    let n = grid.len();
    let coords = |p: usize| -> Vec<f64> {
        let mut rem = p;
        let mut c = vec![0.0; grid.dim()];
        for a in (0..grid.dim()).rev() {
            c[a] = grid.coord(a, rem % grid.points[a]);
            rem /= grid.points[a];
        }
        c
    };
    match sampler {
        IcSampler::GaussianWhite => Ok((0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()),
        IcSampler::FourierSuperposition => {
            let modes = rng.gen_range(1..=4usize);
            let mut terms = Vec::with_capacity(modes);
            for _ in 0..modes {
                let mut k = vec![0i64; grid.dim()];
                while k.iter().all(|v| *v == 0) {
                    for kv in k.iter_mut() {
                        *kv = rng.gen_range(-3..=3);
                    }
                }
                let amp = rng.gen_range(0.1..1.0) / modes as f64;
                let phase = rng.gen_range(0.0..2.0 * PI);
                terms.push((k, amp, phase));
            }
            Ok((0..n)
                .map(|p| {
                    let x = coords(p);
                    terms
                        .iter()
                        .map(|(k, a, ph)| {
                            let arg: f64 = k
                                .iter()
                                .zip(&x)
                                .zip(&grid.length)
                                .map(|((kv, xv), l)| 2.0 * PI * *kv as f64 * xv / l)
                                .sum();
                            a * (arg + ph).sin()
                        })
                        .sum()
                })
                .collect())
        }
        IcSampler::GaussianBump => {
            let center: Vec<f64> = grid.length.iter().map(|l| rng.gen_range(0.0..*l)).collect();
            let width = rng.gen_range(0.05..0.15) * grid.length.iter().cloned().fold(f64::INFINITY, f64::min);
            let amp = rng.gen_range(0.5..1.5);
            Ok((0..n)
                .map(|p| {
                    let x = coords(p);
                    let r2: f64 = (0..grid.dim())
                        .map(|a| {
                            let mut d = (x[a] - center[a]).abs();
                            if grid.boundary[a] == Boundary::Periodic {
                                d = d.min(grid.length[a] - d);
                            }
                            d * d
                        })
                        .sum();
                    amp * (-r2 / (2.0 * width * width)).exp()
                })
                .collect())
        }
    }
}

fn assemble(
    family: &PdeFamily,
    grid: &GridSpec,
    n_traj: usize,
    seed: u64,
    exec: Execution,
    run: impl Fn(&Coefficients, usize) -> Result<Vec<f64>> + Sync + Send,
) -> Result<TrajectorySet> {
    let coefficients: Vec<Coefficients> = (0..n_traj)
        .map(|i| family.coefficients.draw(seed, i))
        .collect::<Result<_>>()?;
    let trajs = map_indexed(exec, n_traj, |i| run(&coefficients[i], i));
    let mut data = Vec::with_capacity(n_traj * family.frames * grid.len() * family.id.field_names().len());
    for (i, t) in trajs.into_iter().enumerate() {
        let t = t?;
        if t.iter().any(|v| !v.is_finite()) {
            return Err(PdeError::NonFinite(i));
        }
        data.extend(t.iter().map(|v| *v as f32));
    }
    Ok(TrajectorySet {
        grid: grid.clone(),
        field_names: family.id.field_names(),
        coefficients,
        n_frames: family.frames,
        dt: family.dt,
        generator: family.id.name().into(),
        seed,
        data,
    })
}

// ---------------------------------------------------------------- Burgers

fn burgers_rhs(u: &[f64], kappa: f64, dx: f64, out: &mut [f64]) {
    let n = u.len();
    let at = |i: isize| u[i.rem_euclid(n as isize) as usize];
    // flux through face i+1/2
    let flux = |i: isize| -> f64 {
        let a = 0.5 * (at(i) + at(i + 1));
        let w = if a >= 0.0 {
            1.5 * at(i) - 0.5 * at(i - 1)
        } else {
            1.5 * at(i + 1) - 0.5 * at(i + 2)
        };
        0.5 * w * w
    };
    let inv_dx = 1.0 / dx;
    let inv_dx2 = kappa / (dx * dx);
    let mut f_left = flux(-1);
    for i in 0..n {
        let ii = i as isize;
        let f_right = flux(ii);
        out[i] = -(f_right - f_left) * inv_dx + (at(ii + 1) - 2.0 * u[i] + at(ii - 1)) * inv_dx2;
        f_left = f_right;
    }
}

fn burgers_bound(max_u: f64, kappa: f64, dx: f64) -> f64 {
    let adv = if max_u > 0.0 { dx / max_u } else { f64::INFINITY };
    let dif = if kappa > 0.0 { dx * dx / (2.0 * kappa) } else { f64::INFINITY };
    0.4 * adv.min(dif)
}

/// One Burgers trajectory from an explicit initial state, frames flattened.
pub fn burgers_trajectory(u0: &[f64], nu: f64, dx: f64, family: &PdeFamily) -> Result<Vec<f64>> {
    let kappa = nu / PI;
    let max_abs = |u: &[f64]| u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut substeps = match family.substeps {
        Some(s) => s,
        None => {
            let b = burgers_bound(max_abs(u0), kappa, dx);
            ((family.dt / b).ceil() as usize).max(1)
        }
    };
    'retry: loop {
        let h = family.dt / substeps as f64;
        let n = u0.len();
        let mut u = u0.to_vec();
        let mut k1 = vec![0.0; n];
        let mut k2 = vec![0.0; n];
        let mut stage = vec![0.0; n];
        let mut out = Vec::with_capacity(family.frames * n);
        out.extend_from_slice(&u);
        for _ in 1..family.frames {
            for _ in 0..substeps {
                let bound = burgers_bound(max_abs(&u), kappa, dx);
                if h > bound * (1.0 + 1e-12) {
                    if family.substeps.is_some() {
                        return Err(PdeError::CflViolated { dt: h, bound });
                    }
                    substeps *= 2;
                    continue 'retry;
                }
                // SSP-RK2 (Heun)
                burgers_rhs(&u, kappa, dx, &mut k1);
                for i in 0..n {
                    stage[i] = u[i] + h * k1[i];
                }
                burgers_rhs(&stage, kappa, dx, &mut k2);
                for i in 0..n {
                    u[i] = 0.5 * u[i] + 0.5 * (stage[i] + h * k2[i]);
                }
            }
            out.extend_from_slice(&u);
        }
        return Ok(out);
    }
}

pub fn gen_burgers_1d(family: &PdeFamily, grid: &GridSpec, n_traj: usize, seed: u64) -> Result<TrajectorySet> {
    gen_burgers_1d_with(family, grid, n_traj, seed, Execution::from_env())
}

pub fn gen_burgers_1d_with(
    family: &PdeFamily,
    grid: &GridSpec,
    n_traj: usize,
    seed: u64,
    exec: Execution,
) -> Result<TrajectorySet> {
    family.validate()?;
    grid.validate()?;
    if grid.dim() != 1 || !grid.is_periodic() {
        return Err(PdeError::Boundary("burgers1d needs a periodic 1D grid".into()));
    }
    let dx = grid.dx(0);
    assemble(family, grid, n_traj, seed, exec, |c, i| {
        let nu = coef(c, "nu")?;
        let u0 = sample_ic(family.ic, grid, seed, i)?;
        burgers_trajectory(&u0, nu, dx, family)
    })
}

// ------------------------------------------------------ diffusion-reaction

/// 5-point Laplacian with mirrored ghost cells (`u[-1] = u[1]`).
pub fn neumann_laplacian(u: &[f64], ny: usize, nx: usize, dy: f64, dx: f64, out: &mut [f64]) {
    let mirror = |i: isize, n: usize| -> usize {
        if i < 0 {
            (-i) as usize
        } else if i as usize >= n {
            2 * (n - 1) - i as usize
        } else {
            i as usize
        }
    };
    let (ix2, iy2) = (1.0 / (dx * dx), 1.0 / (dy * dy));
    for y in 0..ny {
        let ym = mirror(y as isize - 1, ny);
        let yp = mirror(y as isize + 1, ny);
        for x in 0..nx {
            let xm = mirror(x as isize - 1, nx);
            let xp = mirror(x as isize + 1, nx);
            let c = u[y * nx + x];
            out[y * nx + x] =
                (u[y * nx + xm] - 2.0 * c + u[y * nx + xp]) * ix2 + (u[ym * nx + x] - 2.0 * c + u[yp * nx + x]) * iy2;
        }
    }
}

struct DiffReact {
    d_u: f64,
    d_v: f64,
    k: f64,
    ny: usize,
    nx: usize,
    dy: f64,
    dx: f64,
}

impl DiffReact {
    /// State layout `[u..., v...]`.
    fn rhs(&self, s: &[f64], out: &mut [f64]) {
        let n = self.ny * self.nx;
        let (u, v) = s.split_at(n);
        let (ou, ov) = out.split_at_mut(n);
        neumann_laplacian(u, self.ny, self.nx, self.dy, self.dx, ou);
        neumann_laplacian(v, self.ny, self.nx, self.dy, self.dx, ov);
        for i in 0..n {
            ou[i] = self.d_u * ou[i] + (u[i] - u[i] * u[i] * u[i] - self.k - v[i]);
            ov[i] = self.d_v * ov[i] + (u[i] - v[i]);
        }
    }

    fn bound(&self) -> f64 {
        let dmin = self.dx.min(self.dy);
        0.4 * dmin * dmin / (4.0 * self.d_u.max(self.d_v).max(1e-300))
    }
}

pub fn diffreact_trajectory(u0: &[f64], v0: &[f64], c: &Coefficients, grid: &GridSpec, family: &PdeFamily) -> Result<Vec<f64>> {
    let sys = DiffReact {
        d_u: coef(c, "d_u")?,
        d_v: coef(c, "d_v")?,
        k: coef(c, "k")?,
        ny: grid.points[0],
        nx: grid.points[1],
        dy: grid.dx(0),
        dx: grid.dx(1),
    };
    let bound = sys.bound();
    let substeps = match family.substeps {
        Some(s) => {
            let h = family.dt / s as f64;
            if h > bound {
                return Err(PdeError::CflViolated { dt: h, bound });
            }
            s
        }
        None => ((family.dt / bound).ceil() as usize).max(1),
    };
    let h = family.dt / substeps as f64;
    let n = 2 * sys.ny * sys.nx;
    let mut s: Vec<f64> = u0.iter().chain(v0).copied().collect();
    let mut k = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut tmp = vec![0.0; n];
    let mut out = Vec::with_capacity(family.frames * n);
    out.extend_from_slice(&s);
    for _ in 1..family.frames {
        for _ in 0..substeps {
            sys.rhs(&s, &mut k[0]);
            for i in 0..n {
                tmp[i] = s[i] + 0.5 * h * k[0][i];
            }
            sys.rhs(&tmp, &mut k[1]);
            for i in 0..n {
                tmp[i] = s[i] + 0.5 * h * k[1][i];
            }
            sys.rhs(&tmp, &mut k[2]);
            for i in 0..n {
                tmp[i] = s[i] + h * k[2][i];
            }
            sys.rhs(&tmp, &mut k[3]);
            for i in 0..n {
                s[i] += h / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
            }
        }
        out.extend_from_slice(&s);
    }
    Ok(out)
}

pub fn gen_diffreact_2d(family: &PdeFamily, grid: &GridSpec, n_traj: usize, seed: u64) -> Result<TrajectorySet> {
    gen_diffreact_2d_with(family, grid, n_traj, seed, Execution::from_env())
}

pub fn gen_diffreact_2d_with(
    family: &PdeFamily,
    grid: &GridSpec,
    n_traj: usize,
    seed: u64,
    exec: Execution,
) -> Result<TrajectorySet> {
    family.validate()?;
    grid.validate()?;
    if grid.dim() != 2 || grid.boundary.iter().any(|b| *b != Boundary::Neumann) {
        return Err(PdeError::Boundary("diffreact2d needs Neumann boundaries on a 2D grid".into()));
    }
    assemble(family, grid, n_traj, seed, exec, |c, i| {
        let u0 = sample_ic(family.ic, grid, seed, 2 * i)?;
        let v0 = sample_ic(family.ic, grid, seed, 2 * i + 1)?;
        diffreact_trajectory(&u0, &v0, c, grid, family)
    })
}

// ------------------------------------------------------------------- heat

fn fft2(data: &mut [Complex64], ny: usize, nx: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (fx, fy) = if inverse {
        (planner.plan_fft_inverse(nx), planner.plan_fft_inverse(ny))
    } else {
        (planner.plan_fft_forward(nx), planner.plan_fft_forward(ny))
    };
    for row in data.chunks_mut(nx) {
        fx.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); ny];
    for x in 0..nx {
        for y in 0..ny {
            col[y] = data[y * nx + x];
        }
        fy.process(&mut col);
        for y in 0..ny {
            data[y * nx + x] = col[y];
        }
    }
    if inverse {
        let s = 1.0 / (nx * ny) as f64;
        for v in data.iter_mut() {
            *v *= s;
        }
    }
}

fn signed_freq(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// Exact periodic heat propagation of `u0` through `frames` saved frames.
pub fn heat_trajectory(u0: &[f64], beta: f64, grid: &GridSpec, frames: usize, dt: f64) -> Vec<f64> {
    let (ny, nx) = (grid.points[0], grid.points[1]);
    let mut spec: Vec<Complex64> = u0.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    fft2(&mut spec, ny, nx, false);
    let mut out = Vec::with_capacity(frames * ny * nx);
    out.extend_from_slice(u0);
    let mut buf = vec![Complex64::new(0.0, 0.0); ny * nx];
    for f in 1..frames {
        let t = f as f64 * dt;
        for y in 0..ny {
            let ky = 2.0 * PI * signed_freq(y, ny) / grid.length[0];
            for x in 0..nx {
                let kx = 2.0 * PI * signed_freq(x, nx) / grid.length[1];
                let m = (-beta * (kx * kx + ky * ky) * t).exp();
                buf[y * nx + x] = spec[y * nx + x] * m;
            }
        }
        fft2(&mut buf, ny, nx, true);
        out.extend(buf.iter().map(|c| c.re));
    }
    out
}

pub fn gen_heat_2d(family: &PdeFamily, grid: &GridSpec, n_traj: usize, seed: u64) -> Result<TrajectorySet> {
    family.validate()?;
    grid.validate()?;
    if grid.dim() != 2 || !grid.is_periodic() {
        return Err(PdeError::Boundary("heat2d needs a periodic 2D grid".into()));
    }
    assemble(family, grid, n_traj, seed, Execution::from_env(), |c, i| {
        let beta = coef(c, "beta")?;
        let u0 = sample_ic(family.ic, grid, seed, i)?;
        Ok(heat_trajectory(&u0, beta, grid, family.frames, family.dt))
    })
}

/// Dispatch on the family id.
pub fn generate(family: &PdeFamily, grid: &GridSpec, n_traj: usize, seed: u64) -> Result<TrajectorySet> {
    match family.id {
        FamilyId::Burgers1d => gen_burgers_1d(family, grid, n_traj, seed),
        FamilyId::Diffreact2d => gen_diffreact_2d(family, grid, n_traj, seed),
        FamilyId::Heat2d => gen_heat_2d(family, grid, n_traj, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dx_follows_boundary_kind() {
        assert_eq!(GridSpec::periodic_1d(128, 2.0).dx(0), 2.0 / 128.0);
        assert_eq!(GridSpec::neumann_2d(65, 2.0).dx(1), 2.0 / 64.0);
    }

    #[test]
    fn unknown_sampler_is_rejected() {
        assert!(matches!("blue_noise".parse::<IcSampler>(), Err(PdeError::UnknownSampler(_))));
        assert_eq!("gaussian_bump".parse::<IcSampler>().unwrap(), IcSampler::GaussianBump);
    }

    #[test]
    fn wrong_boundary_is_rejected() {
        let f = PdeFamily::burgers_default();
        let g = GridSpec {
            points: vec![32],
            length: vec![1.0],
            boundary: vec![Boundary::Neumann],
        };
        assert!(matches!(gen_burgers_1d(&f, &g, 1, 0), Err(PdeError::Boundary(_))));
        let f = PdeFamily::diffreact_default();
        assert!(matches!(
            gen_diffreact_2d(&f, &GridSpec::periodic_2d(16, 1.0), 1, 0),
            Err(PdeError::Boundary(_))
        ));
        let f = PdeFamily::heat_default();
        assert!(matches!(
            gen_heat_2d(&f, &GridSpec::neumann_2d(16, 1.0), 1, 0),
            Err(PdeError::Boundary(_))
        ));
    }

    #[test]
    fn explicit_substeps_checked_against_cfl() {
        let mut f = PdeFamily::burgers_default();
        f.substeps = Some(1);
        let g = GridSpec::periodic_1d(128, 2.0 * PI);
        assert!(matches!(gen_burgers_1d(&f, &g, 3, 0), Err(PdeError::CflViolated { .. })));
        let mut f = PdeFamily::diffreact_default();
        f.substeps = Some(1);
        assert!(matches!(
            gen_diffreact_2d(&f, &GridSpec::neumann_2d(32, 2.0), 2, 0),
            Err(PdeError::CflViolated { .. })
        ));
    }
}
