mod common;

use common::{fd_check, random_tensor, rng};
use disco::operator::*;
use disco::tensor::{Graph, Tensor};

fn random_theta(layout: &ParamLayout, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    let mut th = layout.init_values(&mut r, &[]);
    // perturb gains and shifts away from their neutral values too
    for s in &layout.segments {
        if s.name.contains(".norm.") {
            let t = random_tensor(&mut r, &[s.len], 0.3);
            for (i, v) in t.data().iter().enumerate() {
                th[s.offset + i] += v;
            }
        }
    }
    th
}

fn apply(config: &OperatorConfig, theta: &[f64], u: &Tensor) -> Tensor {
    let layout = build_layout(config).unwrap();
    let op = BoundOperator::new(*config, layout, theta.to_vec(), u.shape()).unwrap();
    Tensor::new(u.shape().to_vec(), op.eval(u.data()).unwrap()).unwrap()
}

#[test]
fn zero_theta_gives_zero_rate() {
    for config in [
        OperatorConfig::desk(1, 1, BoundaryMode::Periodic),
        OperatorConfig::desk(2, 2, BoundaryMode::Periodic),
        OperatorConfig::desk(2, 2, BoundaryMode::MaskedReflect),
    ] {
        let layout = build_layout(&config).unwrap();
        let shape: Vec<usize> = std::iter::once(config.fields).chain(std::iter::repeat(16).take(config.dim)).collect();
        let u = random_tensor(&mut rng(1), &shape, 1.0);
        let out = apply(&config, &vec![0.0; layout.total], &u);
        assert!(out.data().iter().all(|v| *v == 0.0));
    }
}

#[test]
fn single_conv_reproduces_heat_stencil() {
    let n = 12;
    let dx = 1.0 / n as f64;
    let beta = 0.01;
    let config = OperatorConfig::single_conv(2, 1, BoundaryMode::Periodic);
    let c = beta / (dx * dx);
    let theta = vec![0.0, c, 0.0, c, -4.0 * c, c, 0.0, c, 0.0, 0.0];
    assert_eq!(count_params(&config).unwrap(), theta.len());
    let u = random_tensor(&mut rng(2), &[1, n, n], 1.0);
    let out = apply(&config, &theta, &u);
    let at = |y: usize, x: usize| u.data()[(y % n) * n + (x % n)];
    for y in 0..n {
        for x in 0..n {
            let lap = at(y + 1, x) + at(y + n - 1, x) + at(y, x + 1) + at(y, x + n - 1) - 4.0 * at(y, x);
            let want = beta * lap / (dx * dx);
            assert!((out.data()[y * n + x] - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }
}

fn rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b) / b.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300)
}

#[test]
fn single_conv_commutes_with_every_shift() {
    let config = OperatorConfig::single_conv(2, 1, BoundaryMode::Periodic);
    let layout = build_layout(&config).unwrap();
    let theta = random_theta(&layout, 3);
    let u = random_tensor(&mut rng(4), &[1, 8, 8], 1.0);
    let base = apply(&config, &theta, &u);
    for sy in 0..8isize {
        for sx in 0..8isize {
            let shifted = apply(&config, &theta, &u.roll_spatial(&[sy, sx]).unwrap());
            assert!(rel_diff(&shifted, &base.roll_spatial(&[sy, sx]).unwrap()) <= 1e-10);
        }
    }
}

#[test]
fn unet_commutes_with_stride_multiple_shifts() {
    let c1 = OperatorConfig::desk(1, 1, BoundaryMode::Periodic);
    let l1 = build_layout(&c1).unwrap();
    let th1 = random_theta(&l1, 5);
    let u1 = random_tensor(&mut rng(6), &[1, 32], 1.0);
    let b1 = apply(&c1, &th1, &u1);
    for s in (-32..=32isize).step_by(4) {
        let out = apply(&c1, &th1, &u1.roll_spatial(&[s]).unwrap());
        assert!(rel_diff(&out, &b1.roll_spatial(&[s]).unwrap()) <= 1e-10, "shift {s}");
    }

    let c2 = OperatorConfig::desk(2, 2, BoundaryMode::Periodic);
    let l2 = build_layout(&c2).unwrap();
    let th2 = random_theta(&l2, 7);
    let u2 = random_tensor(&mut rng(8), &[2, 16, 16], 1.0);
    let b2 = apply(&c2, &th2, &u2);
    for v in [[4isize, 0], [0, 8], [-4, 12], [16, -16]] {
        let out = apply(&c2, &th2, &u2.roll_spatial(&v).unwrap());
        assert!(rel_diff(&out, &b2.roll_spatial(&v).unwrap()) <= 1e-10, "shift {v:?}");
    }
}

#[test]
fn unet_odd_shift_deviation_is_reported() {
    let c = OperatorConfig::desk(1, 1, BoundaryMode::Periodic);
    let l = build_layout(&c).unwrap();
    let th = random_theta(&l, 9);
    let u = random_tensor(&mut rng(10), &[1, 32], 1.0);
    let base = apply(&c, &th, &u);
    let out = apply(&c, &th, &u.roll_spatial(&[1]).unwrap());
    println!("unet shift-by-one relative deviation: {:.3e}", rel_diff(&out, &base.roll_spatial(&[1]).unwrap()));
}

#[test]
fn parameter_counts() {
    let mut b = OperatorConfig::single_conv(1, 1, BoundaryMode::Periodic);
    assert_eq!(count_params(&b).unwrap(), 4);
    b.fields = 2;
    assert_eq!(count_params(&b).unwrap(), 2 * 2 * 3 + 2);

    let paper = OperatorConfig::unet(2, 2, 4, 8, BoundaryMode::Periodic);
    let layout = build_layout(&paper).unwrap();
    println!("paper-default total {} interior {}", layout.total, layout.interior_len());
    assert!((140_000..=220_000).contains(&layout.total));

    let counts: Vec<usize> = [4, 8, 12]
        .iter()
        .map(|&c| count_params(&OperatorConfig::unet(2, 2, 4, c, BoundaryMode::Periodic)).unwrap())
        .collect();
    println!("c_start 4/8/12 totals {counts:?}");
    assert!(counts[0] < counts[1] && counts[1] < counts[2]);
}

#[test]
fn field_count_only_touches_outer_layers() {
    let a = build_layout(&OperatorConfig::unet(2, 1, 4, 8, BoundaryMode::Periodic)).unwrap();
    let b = build_layout(&OperatorConfig::unet(2, 4, 4, 8, BoundaryMode::Periodic)).unwrap();
    assert_eq!(a.interior_len(), b.interior_len());
    assert_eq!(a.segments.len(), b.segments.len());
    for (x, y) in a.segments.iter().zip(&b.segments) {
        if x.interior {
            assert_eq!((x.len, &x.shape), (y.len, &y.shape));
        } else if x.name.ends_with(".weight") || x.name == "head.bias" {
            assert_ne!(x.len, y.len);
        }
    }
}

#[test]
fn layout_is_contiguous_and_pure() {
    let c = OperatorConfig::desk(2, 2, BoundaryMode::MaskedReflect);
    let a = build_layout(&c).unwrap();
    assert_eq!(a, build_layout(&c).unwrap());
    let mut off = 0;
    for s in &a.segments {
        assert_eq!(s.offset, off);
        assert!(s.norm > 0.0);
        off += s.len;
    }
    assert_eq!(off, a.total);
    // mask channel widens the first layer only
    let p = build_layout(&OperatorConfig::desk(2, 2, BoundaryMode::Periodic)).unwrap();
    assert_eq!(a.segments[0].shape[1], p.segments[0].shape[1] + 1);
    assert_eq!(a.interior_len(), p.interior_len());
}

#[test]
fn error_contracts() {
    let c = OperatorConfig::desk(1, 1, BoundaryMode::Periodic);
    let layout = build_layout(&c).unwrap();
    assert!(matches!(
        BoundOperator::new(c, layout.clone(), vec![0.0; 3], &[1, 16]),
        Err(OperatorError::LayoutMismatch { .. })
    ));
    let op = BoundOperator::new(c, layout.clone(), vec![0.0; layout.total], &[1, 18]).unwrap();
    assert!(matches!(op.eval(&[0.0; 18]), Err(OperatorError::Divisibility { .. })));

    let mut g = Graph::new();
    let th = g.constant(Tensor::zeros(&[layout.total]));
    let u = g.constant(Tensor::zeros(&[1, 16]));
    let m = g.constant(Tensor::zeros(&[1, 16]));
    assert!(matches!(f_theta_apply(&mut g, &c, &layout, th, u, Some(m)), Err(OperatorError::MaskContract)));
    let cm = OperatorConfig::desk(1, 1, BoundaryMode::MaskedReflect);
    let lm = build_layout(&cm).unwrap();
    let th = g.constant(Tensor::zeros(&[lm.total]));
    assert!(matches!(f_theta_apply(&mut g, &cm, &lm, th, u, None), Err(OperatorError::MaskContract)));
}

#[test]
fn gradients_match_finite_differences() {
    for config in [
        OperatorConfig::desk(1, 1, BoundaryMode::Periodic),
        OperatorConfig::desk(1, 2, BoundaryMode::MaskedReflect),
    ] {
        let layout = build_layout(&config).unwrap();
        let theta = Tensor::vector(random_theta(&layout, 11));
        let shape = [config.fields, 16];
        let u = random_tensor(&mut rng(12), &shape, 1.0);
        let w = random_tensor(&mut rng(13), &shape, 1.0);
        let mask = (config.boundary == BoundaryMode::MaskedReflect).then(|| boundary_mask(&[16]));
        let err = fd_check(
            &[theta, u],
            |g, v| {
                let m = mask.as_ref().map(|m| g.constant(m.clone()));
                let out = f_theta_apply(g, &config, &layout, v[0], v[1], m).unwrap();
                let wc = g.constant(w.clone());
                let p = g.mul(out, wc).unwrap();
                g.sum(p).unwrap()
            },
            60,
            14,
        );
        assert!(err <= 1e-4, "worst relative error {err}");
    }
}
