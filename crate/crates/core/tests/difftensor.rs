mod common;

use common::{fd_check, random_tensor, rng};
use disco::tensor::{ConvOptions, Graph, Padding, Tensor, TensorError};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::from_slice(shape, data).unwrap()
}

#[test]
fn conv_hand_stencil_with_wrap() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
    let k = g.constant(t(&[1, 1, 3], &[1.0, 0.0, -1.0]));
    let y = g.conv_nd(x, k, None, ConvOptions::same(Padding::Circular)).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, -2.0, -2.0, 2.0]);
}

#[test]
fn laplacian_kernel_kills_constants() {
    let beta_dx2 = 0.01 * 64.0 * 64.0;
    let lap: Vec<f64> = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0]
        .iter()
        .map(|v| v * beta_dx2)
        .collect();
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 8, 8], 3.25));
    let k = g.constant(t(&[1, 1, 3, 3], &lap));
    let y = g.conv_nd(x, k, None, ConvOptions::same(Padding::Circular)).unwrap();
    assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn identity_kernel_is_exact() {
    let mut r = rng(1);
    let xin = random_tensor(&mut r, &[2, 6, 5], 3.0);
    let mut kd = vec![0.0; 2 * 2 * 9];
    kd[4] = 1.0; // out 0 <- in 0 center
    kd[3 * 9 + 4] = 1.0; // out 1 <- in 1 center
    for padding in [Padding::Circular, Padding::Reflect] {
        let mut g = Graph::new();
        let x = g.constant(xin.clone());
        let k = g.constant(t(&[2, 2, 3, 3], &kd));
        let y = g.conv_nd(x, k, None, ConvOptions::same(padding)).unwrap();
        assert_eq!(g.value(y), &xin);
    }
}

#[test]
fn conv_error_paths() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2]));
    let k = g.constant(Tensor::zeros(&[1, 1, 3]));
    assert!(matches!(
        g.conv_nd(x, k, None, ConvOptions::same(Padding::Reflect)),
        Err(TensorError::ReflectTooSmall { .. })
    ));
    let x4 = g.constant(Tensor::zeros(&[1, 8]));
    let opts = ConvOptions {
        stride: 3,
        ..ConvOptions::same(Padding::Circular)
    };
    assert!(matches!(g.conv_nd(x4, k, None, opts), Err(TensorError::BadStride(3))));
    let k2 = g.constant(Tensor::zeros(&[1, 2, 3]));
    assert!(matches!(
        g.conv_nd(x4, k2, None, ConvOptions::same(Padding::Circular)),
        Err(TensorError::ShapeMismatch { .. })
    ));
}

#[test]
fn transposed_inverts_stride_two_shape() {
    for shape in [vec![3, 16], vec![3, 8, 12]] {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&shape, 1.0));
        let kshape: Vec<usize> = std::iter::once(4)
            .chain(std::iter::once(3))
            .chain(std::iter::repeat(2).take(shape.len() - 1))
            .collect();
        let k = g.constant(Tensor::full(&kshape, 0.5));
        let down = g.conv_nd(x, k, None, ConvOptions::down(Padding::Circular)).unwrap();
        let kt_shape: Vec<usize> = [3, 4].iter().copied().chain(kshape[2..].iter().copied()).collect();
        let kt = g.constant(Tensor::full(&kt_shape, 0.5));
        let up = g.conv_nd(down, kt, None, ConvOptions::up(Padding::Circular)).unwrap();
        assert_eq!(g.shape(up), shape.as_slice());
    }
}

#[test]
fn circular_conv_commutes_with_shifts() {
    let mut r = rng(7);
    let xin = random_tensor(&mut r, &[2, 10, 12], 1.0);
    let kin = random_tensor(&mut r, &[3, 2, 3, 3], 1.0);
    let bin = random_tensor(&mut r, &[3], 1.0);
    let run = |x: &Tensor| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let kv = g.constant(kin.clone());
        let bv = g.constant(bin.clone());
        let y = g.conv_nd(xv, kv, Some(bv), ConvOptions::same(Padding::Circular)).unwrap();
        g.value(y).clone()
    };
    let base = run(&xin);
    for shift in [[1isize, 0], [0, 3], [-2, 5], [7, -11]] {
        let lhs = run(&xin.roll_spatial(&shift).unwrap());
        let rhs = base.roll_spatial(&shift).unwrap();
        assert!(lhs.max_abs_diff(&rhs) <= 1e-10 * (1.0 + rhs.l2_norm()));
    }
}

#[test]
fn linear_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2], &[1.0, 2.0]));
    let w = g.constant(t(&[2, 2], &[1.0, 1.0, 1.0, -1.0]));
    let b = g.constant(t(&[2], &[0.0, 0.0]));
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, -1.0]);

    let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let y = g.linear(x, eye, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0]);

    let xs = g.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let zw = g.constant(Tensor::zeros(&[2, 2]));
    let bb = g.constant(t(&[2], &[0.5, -0.25]));
    let y = g.linear(xs, zw, Some(bb)).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, -0.25, 0.5, -0.25, 0.5, -0.25]);

    let bad = g.constant(Tensor::zeros(&[2, 3]));
    assert!(g.linear(x, bad, None).is_err());
}

#[test]
fn group_norm_statistics() {
    let mut r = rng(3);
    let xin = random_tensor(&mut r, &[8, 5, 6], 4.0);
    let mut g = Graph::new();
    let x = g.constant(xin);
    let one = g.constant(Tensor::full(&[8], 1.0));
    let zero = g.constant(Tensor::zeros(&[8]));
    let y = g.group_norm(x, 4, one, zero, 1e-5).unwrap();
    let yd = g.value(y).data();
    let per = 2 * 30;
    for grp in 0..4 {
        let seg = &yd[grp * per..(grp + 1) * per];
        let m = seg.iter().sum::<f64>() / per as f64;
        let v = seg.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / per as f64;
        assert!(m.abs() <= 1e-6);
        assert!((v - 1.0).abs() <= 1e-5);
    }

    let c = g.constant(Tensor::full(&[8, 5, 6], 2.0));
    let y = g.group_norm(c, 4, one, zero, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-12));

    let gam0 = g.constant(Tensor::zeros(&[8]));
    let bet = g.constant(Tensor::full(&[8], 0.7));
    let y = g.group_norm(x, 4, gam0, bet, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.7));

    assert!(matches!(
        g.group_norm(x, 3, one, zero, 1e-5),
        Err(TensorError::InvalidArgument { .. })
    ));
}

#[test]
fn activation_values() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[0.0, 10.0, 1.0]));
    let ge = g.gelu(x).unwrap();
    let sg = g.sigmoid(x).unwrap();
    let gv = g.value(ge).data();
    let sv = g.value(sg).data();
    assert_eq!(gv[0], 0.0);
    assert!((gv[1] - 10.0).abs() <= 1e-6);
    assert_eq!(sv[0], 0.5);
    assert!((sv[2] - 0.73106).abs() < 1e-5);
}

#[test]
fn attention_examples() {
    let mut r = rng(5);
    // L = 1 returns v exactly
    let mut g = Graph::new();
    let q = g.constant(random_tensor(&mut r, &[2, 1, 4], 1.0));
    let k = g.constant(random_tensor(&mut r, &[2, 1, 4], 1.0));
    let vt = random_tensor(&mut r, &[2, 1, 4], 1.0);
    let v = g.constant(vt.clone());
    let o = g.attention(q, k, v, None).unwrap();
    assert_eq!(g.value(o), &vt);

    // saturated bias selects one row
    let l = 4;
    let vt = random_tensor(&mut r, &[1, l, 3], 1.0);
    let mut bias = vec![-1e9; l * l];
    for i in 0..l {
        bias[i * l + 2] = 0.0;
    }
    let q = g.constant(random_tensor(&mut r, &[1, l, 3], 1.0));
    let k = g.constant(random_tensor(&mut r, &[1, l, 3], 1.0));
    let v = g.constant(vt.clone());
    let b = g.constant(t(&[1, l, l], &bias));
    let o = g.attention(q, k, v, Some(b)).unwrap();
    let od = g.value(o).data();
    for i in 0..l {
        for d in 0..3 {
            assert!((od[i * 3 + d] - vt.data()[2 * 3 + d]).abs() <= 1e-6);
        }
    }

    // uniform scores average the values
    let q0 = g.constant(Tensor::zeros(&[1, l, 3]));
    let o = g.attention(q0, k, v, None).unwrap();
    let od = g.value(o).data();
    for d in 0..3 {
        let mean: f64 = (0..l).map(|j| vt.data()[j * 3 + d]).sum::<f64>() / l as f64;
        for i in 0..l {
            assert!((od[i * 3 + d] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn backward_trivial_cases() {
    let mut g = Graph::new();
    let xt = t(&[3], &[1.0, -2.0, 0.5]);
    let x = g.param(xt);
    let l = g.sum_sq(x).unwrap();
    let gr = g.backward(l).unwrap();
    assert_eq!(gr.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);

    let y = g.add(x, x).unwrap();
    let s = g.sum(y).unwrap();
    let gr = g.backward(s).unwrap();
    assert_eq!(gr.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);

    assert!(matches!(g.backward(y), Err(TensorError::NonScalarLoss(_))));

    let unused = g.param(Tensor::zeros(&[2]));
    let gr = g.backward(s).unwrap();
    assert!(matches!(gr.get(unused), Err(TensorError::DetachedLeaf(_))));
}

#[test]
fn checked_mode_reports_non_finite() {
    let mut g = Graph::checked();
    let x = g.constant(t(&[2], &[1e308, 1e308]));
    assert!(matches!(g.scale(x, 10.0), Err(TensorError::NonFinite { op: "scale" })));
    let mut g = Graph::new();
    let x = g.constant(t(&[2], &[1e308, 1e308]));
    assert!(g.scale(x, 10.0).is_ok());
}

#[test]
fn finite_differences_per_op() {
    let mut r = rng(11);
    let tol = 1e-4;
    // conv variants
    for (opts, xs, ks) in [
        (ConvOptions::same(Padding::Circular), vec![2, 6, 6], vec![3, 2, 3, 3]),
        (ConvOptions::same(Padding::Reflect), vec![2, 6, 6], vec![3, 2, 3, 3]),
        (ConvOptions::down(Padding::Reflect), vec![2, 8], vec![3, 2, 2]),
        (ConvOptions::up(Padding::Circular), vec![2, 4, 4], vec![3, 2, 2, 2]),
        (ConvOptions::same(Padding::Circular).grouped(2), vec![4, 7], vec![2, 2, 3]),
    ] {
        let x = random_tensor(&mut r, &xs, 1.0);
        let k = random_tensor(&mut r, &ks, 1.0);
        let b = random_tensor(&mut r, &[ks[0]], 1.0);
        let err = fd_check(
            &[x, k, b],
            |g, v| {
                let y = g.conv_nd(v[0], v[1], Some(v[2]), opts).unwrap();
                let z = g.gelu(y).unwrap();
                g.sum_sq(z).unwrap()
            },
            100,
            1,
        );
        assert!(err <= tol, "conv {:?}: {}", opts, err);
    }
    // linear + sigmoid
    let err = fd_check(
        &[
            random_tensor(&mut r, &[3, 4], 1.0),
            random_tensor(&mut r, &[5, 4], 1.0),
            random_tensor(&mut r, &[5], 1.0),
        ],
        |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
            let z = g.sigmoid(y).unwrap();
            g.sum_sq(z).unwrap()
        },
        100,
        2,
    );
    assert!(err <= tol, "linear {}", err);
    // norms
    let err = fd_check(
        &[
            random_tensor(&mut r, &[4, 3, 3], 2.0),
            random_tensor(&mut r, &[4], 1.0),
            random_tensor(&mut r, &[4], 1.0),
            random_tensor(&mut r, &[4, 3, 3], 1.0),
        ],
        |g, v| {
            let y = g.group_norm(v[0], 2, v[1], v[2], 1e-5).unwrap();
            let y = g.mul(y, v[3]).unwrap();
            g.sum(y).unwrap()
        },
        100,
        3,
    );
    assert!(err <= tol, "group_norm {}", err);
    let err = fd_check(
        &[
            random_tensor(&mut r, &[5, 6], 2.0),
            random_tensor(&mut r, &[6], 1.0),
            random_tensor(&mut r, &[6], 1.0),
            random_tensor(&mut r, &[5, 6], 1.0),
        ],
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            let y = g.mul(y, v[3]).unwrap();
            g.sum(y).unwrap()
        },
        100,
        4,
    );
    assert!(err <= tol, "layer_norm {}", err);
    // attention with bias
    let err = fd_check(
        &[
            random_tensor(&mut r, &[2, 2, 5, 3], 1.0),
            random_tensor(&mut r, &[2, 2, 5, 3], 1.0),
            random_tensor(&mut r, &[2, 2, 5, 3], 1.0),
            random_tensor(&mut r, &[2, 5, 5], 1.0),
            random_tensor(&mut r, &[2, 2, 5, 3], 1.0),
        ],
        |g, v| {
            let o = g.attention(v[0], v[1], v[2], Some(v[3])).unwrap();
            let o = g.mul(o, v[4]).unwrap();
            g.sum(o).unwrap()
        },
        100,
        5,
    );
    assert!(err <= tol, "attention {}", err);
    // shape plumbing + bounded squashing
    let err = fd_check(
        &[random_tensor(&mut r, &[3, 4], 3.0), random_tensor(&mut r, &[5, 2], 1.0)],
        |g, v| {
            let p = g.permute(v[0], &[1, 0]).unwrap();
            let p = g.reshape(p, &[2, 6]).unwrap();
            let c = g.concat(&[p, p]).unwrap();
            let m = g.mean_axis0(c).unwrap();
            let n = g.narrow(m, 1, &[4]).unwrap();
            let gt = g.gather_rows(v[1], vec![4, 0, 4, 1]).unwrap();
            let gt = g.reshape(gt, &[8]).unwrap();
            let gt = g.narrow(gt, 2, &[4]).unwrap();
            let s = g.mul(n, gt).unwrap();
            let s = g.signed_bound(s, vec![0.5, 1.0, 2.0, 3.0]).unwrap();
            let s = g.scale(s, 1.5).unwrap();
            let d = g.sub(s, gt).unwrap();
            g.sum_sq(d).unwrap()
        },
        100,
        6,
    );
    assert!(err <= tol, "plumbing {}", err);
}

#[test]
fn deterministic_repeat_is_bit_identical() {
    let run = || {
        let mut r = rng(99);
        let mut g = Graph::new();
        let x = g.param(random_tensor(&mut r, &[2, 8, 8], 1.0));
        let k = g.param(random_tensor(&mut r, &[4, 2, 3, 3], 1.0));
        let y = g.conv_nd(x, k, None, ConvOptions::same(Padding::Circular)).unwrap();
        let y = g.gelu(y).unwrap();
        let l = g.sum_sq(y).unwrap();
        let grads = g.backward(l).unwrap();
        (g.value(l).data()[0].to_bits(), grads.get(k).unwrap())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert_eq!(ga, gb);
}
