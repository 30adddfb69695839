mod common;

use std::sync::atomic::{AtomicUsize, Ordering};

use common::{random_tensor, rng};
use disco::integrator::*;
use disco::operator::{build_layout, BoundOperator, BoundaryMode, OperatorConfig};
use rand::Rng;

/// `f(t, u)` from a closure, counting evaluations.
struct Fun<F> {
    f: F,
    calls: AtomicUsize,
}

impl<F: Fn(f64, &[f64]) -> Vec<f64> + Sync> Fun<F> {
    fn new(f: F) -> Self {
        Fun { f, calls: AtomicUsize::new(0) }
    }
}

impl<F: Fn(f64, &[f64]) -> Vec<f64> + Sync> OdeRhs for Fun<F> {
    fn n_params(&self) -> usize {
        0
    }
    fn eval(&self, t: f64, u: &[f64]) -> Result<Vec<f64>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok((self.f)(t, u))
    }
    fn vjp(&self, _t: f64, _u: &[f64], _cot: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        unimplemented!()
    }
}

/// `f(u) = A u` with `A` as the parameter vector.
struct Linear {
    n: usize,
    a: Vec<f64>,
}

impl OdeRhs for Linear {
    fn n_params(&self) -> usize {
        self.a.len()
    }
    fn eval(&self, _t: f64, u: &[f64]) -> Result<Vec<f64>> {
        Ok((0..self.n).map(|i| (0..self.n).map(|j| self.a[i * self.n + j] * u[j]).sum()).collect())
    }
    fn vjp(&self, _t: f64, u: &[f64], cot: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.n;
        let gu = (0..n).map(|j| (0..n).map(|i| self.a[i * n + j] * cot[i]).sum()).collect();
        let ga = (0..n * n).map(|k| cot[k / n] * u[k % n]).collect();
        Ok((gu, ga))
    }
}

#[test]
fn single_step_examples() {
    let zero = Fun::new(|_, u: &[f64]| vec![0.0; u.len()]);
    let (u, e) = step_bs23(&zero, &[1.5, -2.0], 0.0, 0.3).unwrap();
    assert_eq!(u, vec![1.5, -2.0]);
    assert_eq!(e, vec![0.0, 0.0]);

    let one = Fun::new(|_, u: &[f64]| vec![1.0; u.len()]);
    let (u, e) = step_bs23(&one, &[0.25], 0.0, 0.5).unwrap();
    assert_eq!(u, vec![0.75]);
    assert_eq!(e, vec![0.0]);

    let quad = Fun::new(|t, _: &[f64]| vec![t * t]);
    let (u, _) = step_bs23(&quad, &[0.0], 0.0, 1.0).unwrap();
    assert!((u[0] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn stationary_solve_is_one_step_with_four_evals() {
    let zero = Fun::new(|_, u: &[f64]| vec![0.0; u.len()]);
    let cfg = IntegratorConfig {
        h0: 1.0,
        ..Default::default()
    };
    let (u, tr) = solve_unit_interval(&zero, &[0.3, 0.4], &cfg).unwrap();
    assert_eq!(u, vec![0.3, 0.4]);
    assert_eq!(tr.len(), 1);
    assert_eq!(zero.calls.load(Ordering::Relaxed), 4);
    assert_eq!(tr.f_evals, 4);
}

#[test]
fn fsal_evaluation_count() {
    let f = Fun::new(|_, u: &[f64]| u.iter().map(|x| -3.0 * x * x.abs()).collect());
    let (_, tr) = solve_unit_interval(&f, &[2.0, -1.0], &IntegratorConfig::default()).unwrap();
    assert!(tr.len() > 1);
    let expect = 1 + 3 * (tr.len() + tr.rejects);
    assert_eq!(f.calls.load(Ordering::Relaxed), expect);
    assert_eq!(tr.f_evals, expect);
}

#[test]
fn exponential_decay_hits_analytic_value() {
    let f = Fun::new(|_, u: &[f64]| u.iter().map(|x| -x).collect());
    let (u, tr) = solve_unit_interval(&f, &[1.0], &IntegratorConfig::tight()).unwrap();
    assert!((u[0] - (-1.0f64).exp()).abs() <= 1e-6, "{}", u[0]);
    assert!((tr.total_time() - 1.0).abs() <= 1e-12);

    let (_, tr) = solve_unit_interval(&f, &[1.0], &IntegratorConfig::default()).unwrap();
    assert!(tr.len() <= 32 && !tr.budget_exhausted);
}

#[test]
fn fixed_step_global_order_is_three() {
    let f = Fun::new(|_, u: &[f64]| vec![u[0] * u[0]]);
    let hs: Vec<usize> = vec![4, 8, 16, 32, 64];
    let errs: Vec<f64> = hs.iter().map(|&n| (solve_fixed(&f, &[0.5], n).unwrap()[0] - 1.0).abs()).collect();
    let xs: Vec<f64> = hs.iter().map(|&n| (1.0 / n as f64).ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    assert!((2.7..=3.3).contains(&slope), "slope {slope}, errors {errs:?}");
}

#[test]
fn tightening_tolerance_never_hurts() {
    let decay = Fun::new(|_, u: &[f64]| u.iter().map(|x| -x).collect());
    let square = Fun::new(|_, u: &[f64]| vec![u[0] * u[0]]);
    let problems: [(&dyn OdeRhs, f64, f64); 2] = [(&decay, 1.0, (-1.0f64).exp()), (&square, 0.5, 1.0)];
    for (f, u0, exact) in problems {
        let mut prev = f64::INFINITY;
        for k in 2..10 {
            let tol = 10f64.powi(-k);
            let cfg = IntegratorConfig {
                rtol: tol,
                atol: tol * 1e-2,
                max_steps: 100_000,
                ..Default::default()
            };
            let (u, _) = solve_unit_interval(f, &[u0], &cfg).unwrap();
            let e = (u[0] - exact).abs();
            assert!(e <= prev + 1e-12, "tol {tol}: {e} after {prev}");
            prev = e;
        }
    }
}

#[test]
fn trace_replay_is_bit_identical() {
    let lin = Linear {
        n: 3,
        a: vec![-1.0, 0.5, 0.0, -0.5, -2.0, 1.0, 0.2, 0.0, -0.3],
    };
    let cfg = IntegratorConfig::default();
    let (a, ta) = solve_unit_interval(&lin, &[1.0, 2.0, -1.0], &cfg).unwrap();
    let (b, tb) = solve_unit_interval(&lin, &[1.0, 2.0, -1.0], &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
}

#[test]
fn step_budget_and_tail() {
    let stiff = Fun::new(|_, u: &[f64]| u.iter().map(|x| -400.0 * x).collect());
    let cfg = IntegratorConfig::default();
    let (u, tr) = solve_unit_interval(&stiff, &[1.0], &cfg).unwrap();
    assert!(tr.budget_exhausted);
    assert!(tr.len() <= cfg.max_steps + cfg.tail_steps);
    assert!((tr.total_time() - 1.0).abs() <= 1e-12);
    assert!(u[0].is_finite() || u[0].is_infinite());
}

#[test]
fn reject_limit_and_non_finite_are_errors() {
    let blow = Fun::new(|_, u: &[f64]| vec![f64::NAN; u.len()]);
    assert!(matches!(
        solve_unit_interval(&blow, &[1.0], &IntegratorConfig::default()),
        Err(IntegratorError::NonFinite { .. })
    ));
    let rough = Fun::new(|t, _: &[f64]| vec![(1e6 * t).sin() * 1e6]);
    let cfg = IntegratorConfig {
        max_rejects: 3,
        ..IntegratorConfig::tight()
    };
    assert!(matches!(solve_unit_interval(&rough, &[0.0], &cfg), Err(IntegratorError::RejectLimit { .. })));
}

#[test]
fn zero_rate_backward_is_identity() {
    let lin = Linear { n: 2, a: vec![0.0; 4] };
    let (_, tr) = solve_unit_interval(&lin, &[1.0, -1.0], &IntegratorConfig::default()).unwrap();
    let (gp, gu) = backward_through_trace(&lin, &tr, &[0.7, -0.2]).unwrap();
    assert_eq!(gu, vec![0.7, -0.2]);
    // parameter gradient is cot * u^T, not zero, because f depends on A
    assert!(gp.iter().any(|g| *g != 0.0));

    let zero = Fun::new(|_, u: &[f64]| vec![0.0; u.len()]);
    let (_, tr) = solve_unit_interval(&zero, &[1.0], &IntegratorConfig::default()).unwrap();
    struct ZeroVjp<'a>(&'a dyn OdeRhs);
    impl OdeRhs for ZeroVjp<'_> {
        fn n_params(&self) -> usize {
            2
        }
        fn eval(&self, t: f64, u: &[f64]) -> Result<Vec<f64>> {
            self.0.eval(t, u)
        }
        fn vjp(&self, _t: f64, u: &[f64], _c: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
            Ok((vec![0.0; u.len()], vec![0.0; 2]))
        }
    }
    let (gp, gu) = backward_through_trace(&ZeroVjp(&zero), &tr, &[0.4]).unwrap();
    assert_eq!(gu, vec![0.4]);
    assert_eq!(gp, vec![0.0, 0.0]);
}

/// Replays a recorded step sequence with a new right-hand side.
fn replay<F: OdeRhs>(f: &F, u0: &[f64], tr: &SolveTrace) -> Vec<f64> {
    let mut u = u0.to_vec();
    for st in &tr.steps {
        let (n, _) = step_bs23(f, &u, st.t, st.h).unwrap();
        u = n;
    }
    u
}

#[test]
fn linear_backward_matches_finite_differences() {
    let n = 4;
    let mut r = rng(21);
    let a: Vec<f64> = (0..n * n).map(|_| r.gen_range(-1.5..1.0)).collect();
    let u0: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
    let lin = Linear { n, a: a.clone() };
    let (_, tr) = solve_unit_interval(&lin, &u0, &IntegratorConfig::default()).unwrap();
    assert!(tr.len() > 2);
    let (gp, gu) = backward_through_trace(&lin, &tr, &w).unwrap();
    let loss = |a: &[f64], u: &[f64]| -> f64 {
        let out = replay(&Linear { n, a: a.to_vec() }, u, &tr);
        out.iter().zip(&w).map(|(x, y)| x * y).sum()
    };
    let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
    for i in 0..n {
        let h = 1e-5 * (1.0 + u0[i].abs());
        let (mut p, mut m) = (u0.clone(), u0.clone());
        p[i] += h;
        m[i] -= h;
        let fd = (loss(&a, &p) - loss(&a, &m)) / (2.0 * h);
        assert!(rel(fd, gu[i]) <= 1e-6, "u[{i}]: {fd} vs {}", gu[i]);
    }
    for k in 0..n * n {
        let h = 1e-5 * (1.0 + a[k].abs());
        let (mut p, mut m) = (a.clone(), a.clone());
        p[k] += h;
        m[k] -= h;
        let fd = (loss(&p, &u0) - loss(&m, &u0)) / (2.0 * h);
        assert!(rel(fd, gp[k]) <= 1e-6, "A[{k}]: {fd} vs {}", gp[k]);
    }
}

#[test]
fn operator_solve_gradient_matches_finite_differences() {
    let config = OperatorConfig::desk(1, 1, BoundaryMode::Periodic);
    let layout = build_layout(&config).unwrap();
    let mut r = rng(31);
    let theta = layout.init_values(&mut r, &[]);
    let u0 = random_tensor(&mut r, &[1, 16], 1.0).into_data();
    let w = random_tensor(&mut r, &[1, 16], 1.0).into_data();
    let cfg = IntegratorConfig::default();
    let op = BoundOperator::new(config, layout.clone(), theta.clone(), &[1, 16]).unwrap();
    let (_, tr) = solve_unit_interval(&op, &u0, &cfg).unwrap();
    let (gp, _) = backward_through_trace(&op, &tr, &w).unwrap();
    let loss = |th: &[f64]| -> f64 {
        let op = BoundOperator::new(config, layout.clone(), th.to_vec(), &[1, 16]).unwrap();
        let (u1, _) = solve_unit_interval(&op, &u0, &cfg).unwrap();
        u1.iter().zip(&w).map(|(x, y)| x * y).sum()
    };
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let k = r.gen_range(0..theta.len());
        let h = 1e-5 * (1.0 + theta[k].abs());
        let (mut p, mut m) = (theta.clone(), theta.clone());
        p[k] += h;
        m[k] -= h;
        let fd = (loss(&p) - loss(&m)) / (2.0 * h);
        worst = worst.max((fd - gp[k]).abs() / fd.abs().max(gp[k].abs()).max(1e-6));
    }
    assert!(worst <= 1e-3, "worst relative error {worst}");
}
