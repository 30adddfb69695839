mod common;

use common::{fd_check, random_tensor, rng};
use disco::hypernet::*;
use disco::operator::{build_layout, BoundaryMode, OperatorConfig, ParamLayout};
use disco::tensor::{Graph, Tensor};

fn tiny(context_len: usize) -> HyperConfig {
    HyperConfig {
        token_dim: 8,
        blocks: 1,
        heads: 2,
        embed_dim: 4,
        encoder: vec![EncoderStage { kernel: 4, stride: 2 }, EncoderStage { kernel: 2, stride: 2 }],
        context_len,
        head_hidden: vec![16, 16],
        ffn_hidden: 16,
        final_scale: 1.0,
        ..HyperConfig::default()
    }
}

fn layout_1d(fields: usize) -> ParamLayout {
    build_layout(&OperatorConfig::desk(1, fields, BoundaryMode::Periodic)).unwrap()
}

fn names(n: &[&str]) -> Vec<String> {
    n.iter().map(|s| s.to_string()).collect()
}

fn net_1d(cfg: HyperConfig, fields: &[&str], n: usize, seed: u64) -> HyperNet {
    let reg = FieldRegistry::new(fields).unwrap();
    HyperNet::new(cfg, reg, &layout_1d(fields.len()), &[n], true, seed).unwrap()
}

fn tokens(net: &HyperNet, ctx: &Tensor, fields: &[String]) -> Tensor {
    let mut g = Graph::new();
    let b = net.bind(&mut g);
    let t = b.encode(&mut g, ctx, fields).unwrap();
    g.value(t).clone()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let d = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    d / b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300)
}

#[test]
fn strided_encoder_is_local() {
    let cfg = HyperConfig {
        encoder: vec![EncoderStage { kernel: 2, stride: 2 }],
        ..tiny(1)
    };
    let net = net_1d(cfg, &["u"], 16, 1);
    let f = names(&["u"]);
    let ctx = random_tensor(&mut rng(2), &[1, 1, 16], 1.0);
    let base = tokens(&net, &ctx, &f);
    let mut bumped = ctx.clone();
    bumped.data_mut()[7] += 1.0;
    let moved = tokens(&net, &bumped, &f);
    // [T, S', d]: token s reads points 2s - 1 and 2s, so only token 4 changes
    for s in 0..8 {
        let a = &base.data()[s * 8..(s + 1) * 8];
        let b = &moved.data()[s * 8..(s + 1) * 8];
        assert_eq!(a == b, s != 4, "token {s}");
    }
}

#[test]
fn field_order_is_irrelevant() {
    let net = net_1d(tiny(2), &["u", "v", "w"], 16, 3);
    let ctx = random_tensor(&mut rng(4), &[2, 2, 16], 1.0);
    let a = tokens(&net, &ctx, &names(&["u", "w"]));
    let mut swapped = Tensor::zeros(&[2, 2, 16]);
    for t in 0..2 {
        for c in 0..2 {
            let src = &ctx.data()[(t * 2 + c) * 16..(t * 2 + c + 1) * 16];
            swapped.data_mut()[(t * 2 + 1 - c) * 16..(t * 2 + 2 - c) * 16].copy_from_slice(src);
        }
    }
    let b = tokens(&net, &swapped, &names(&["w", "u"]));
    assert!(rel(a.data(), b.data()) < 1e-14);
    let mut g = Graph::new();
    let bd = net.bind(&mut g);
    assert!(matches!(
        bd.encode(&mut g, &ctx, &names(&["u", "q"])),
        Err(HyperError::UnknownField(_))
    ));
    assert!(matches!(
        bd.encode(&mut g, &random_tensor(&mut rng(1), &[3, 2, 16], 1.0), &names(&["u", "v"])),
        Err(HyperError::ContextShape { .. })
    ));
}

#[test]
fn encoder_permutes_tokens_under_patch_shifts() {
    let net = net_1d(tiny(2), &["u"], 32, 5);
    let f = names(&["u"]);
    let ctx = random_tensor(&mut rng(6), &[2, 1, 32], 1.0);
    let base = tokens(&net, &ctx, &f);
    let shifted = tokens(&net, &ctx.roll_spatial(&[0, 8]).unwrap(), &f);
    // tokens [T, 8, d]: an 8-point shift moves tokens by 2
    let d = 8;
    for t in 0..2 {
        for s in 0..8 {
            let a = &shifted.data()[(t * 8 + (s + 2) % 8) * d..][..d];
            let b = &base.data()[(t * 8 + s) * d..][..d];
            assert!(rel(a, b) < 1e-12);
        }
    }
}

#[test]
fn zero_blocks_is_identity_and_singletons_ignore_attention_logits() {
    let mut cfg = tiny(1);
    cfg.blocks = 0;
    let net = net_1d(cfg, &["u"], 16, 7);
    let toks = random_tensor(&mut rng(8), &[1, 4, 8], 1.0);
    let mut g = Graph::new();
    let b = net.bind(&mut g);
    let x = g.constant(toks.clone());
    let y = b.process(&mut g, x, None).unwrap();
    assert_eq!(g.value(y), &toks);

    // T = 1 and a single spatial token: q, k and biases cannot matter
    let cfg = HyperConfig {
        encoder: vec![EncoderStage { kernel: 2, stride: 2 }, EncoderStage { kernel: 2, stride: 2 }],
        ..tiny(1)
    };
    let net = net_1d(cfg, &["u"], 4, 9);
    let toks = random_tensor(&mut rng(10), &[1, 1, 8], 1.0);
    let run = |net: &HyperNet| {
        let mut g = Graph::new();
        let b = net.bind(&mut g);
        let x = g.constant(toks.clone());
        let y = b.process(&mut g, x, None).unwrap();
        g.value(y).clone()
    };
    let base = run(&net);
    let mut other = net.clone();
    let mut r = rng(11);
    for (n, t) in other.store.names.iter().zip(other.store.tensors.iter_mut()) {
        if n.ends_with(".q.weight") || n.ends_with(".k.weight") || n.ends_with("rel_bias") {
            *t = random_tensor(&mut r, t.shape(), 3.0);
        }
    }
    assert!(rel(run(&other).data(), base.data()) < 1e-14);
}

#[test]
fn processor_commutes_with_spatial_token_shifts() {
    let mut cfg = tiny(3);
    cfg.blocks = 2;
    let net = net_1d(cfg, &["u"], 32, 12);
    let toks = random_tensor(&mut rng(13), &[3, 8, 8], 1.0);
    let run = |x: &Tensor| {
        let mut g = Graph::new();
        let b = net.bind(&mut g);
        let v = g.constant(x.clone());
        let y = b.process(&mut g, v, None).unwrap();
        g.value(y).clone()
    };
    // roll along the token axis: view as [T, S', d] and shift S'
    let roll = |x: &Tensor, k: usize| {
        let mut out = x.clone();
        for t in 0..3 {
            for s in 0..8 {
                let src = &x.data()[(t * 8 + s) * 8..][..8];
                out.data_mut()[(t * 8 + (s + k) % 8) * 8..][..8].copy_from_slice(src);
            }
        }
        out
    };
    let base = run(&toks);
    for k in 1..8 {
        assert!(rel(run(&roll(&toks, k)).data(), roll(&base, k).data()) <= 1e-6);
    }
}

#[test]
fn two_dimensional_theta_is_invariant_to_patch_shifts() {
    let layout = build_layout(&OperatorConfig::desk(2, 2, BoundaryMode::Periodic)).unwrap();
    let reg = FieldRegistry::new(&["a", "b"]).unwrap();
    let net = HyperNet::new(tiny(2), reg, &layout, &[16, 16], true, 14).unwrap();
    let f = names(&["a", "b"]);
    let ctx = random_tensor(&mut rng(15), &[2, 2, 16, 16], 1.0);
    let base = net.psi_forward(&ctx, &f).unwrap();
    for v in [[0isize, 4, 0], [0, 0, 8], [0, -4, 12]] {
        let th = net.psi_forward(&ctx.roll_spatial(&v).unwrap(), &f).unwrap();
        assert!(rel(&th, &base) <= 1e-6, "{v:?}");
    }
}

#[test]
fn theta_respects_bounds() {
    let net = net_1d(tiny(2), &["u"], 16, 16);
    let f = names(&["u"]);
    for (seed, scale) in [(1, 1.0), (2, 100.0), (3, 0.0)] {
        let ctx = random_tensor(&mut rng(seed), &[2, 1, 16], scale);
        let th = net.psi_forward(&ctx, &f).unwrap();
        for (t, b) in th.iter().zip(&net.bounds) {
            assert!(t.is_finite() && t.abs() < *b);
        }
    }
    // saturated head output
    let mut hot = net.clone();
    let i = hot.store.index("head_out.bias").unwrap();
    let n = hot.store.tensors[i].numel();
    hot.store.tensors[i] = Tensor::vector((0..n).map(|k| if k % 2 == 0 { 1e6 } else { -1e6 }).collect());
    let th = hot.psi_forward(&random_tensor(&mut rng(4), &[2, 1, 16], 1.0), &f).unwrap();
    for (t, b) in th.iter().zip(&net.bounds) {
        assert!(t.abs() < *b && t.abs() > 0.999 * b);
    }

    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1.0, 0.0]));
    let y = g.signed_bound(x, vec![1.0, 3.0]).unwrap();
    assert!((g.value(y).data()[0] - 0.46212).abs() < 5e-6);
    assert_eq!(g.value(y).data()[1], 0.0);
}

#[test]
fn forward_is_deterministic() {
    let a = net_1d(tiny(2), &["u"], 16, 17);
    let b = net_1d(tiny(2), &["u"], 16, 17);
    assert_eq!(a.store, b.store);
    let ctx = random_tensor(&mut rng(18), &[2, 1, 16], 1.0);
    let f = names(&["u"]);
    let x = a.psi_forward(&ctx, &f).unwrap();
    let y = b.psi_forward(&ctx, &f).unwrap();
    assert_eq!(
        x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        y.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn pooling_ignores_token_order_without_blocks() {
    let mut cfg = tiny(2);
    cfg.blocks = 0;
    let net = net_1d(cfg, &["u"], 16, 19);
    let toks = random_tensor(&mut rng(20), &[2, 4, 8], 1.0);
    let mut rev = toks.clone();
    for s in 0..8 {
        rev.data_mut()[s * 8..(s + 1) * 8].copy_from_slice(&toks.data()[(7 - s) * 8..(8 - s) * 8]);
    }
    let gen = |x: &Tensor| {
        let mut g = Graph::new();
        let b = net.bind(&mut g);
        let v = g.constant(x.clone());
        let th = b.generate_params(&mut g, v).unwrap();
        g.value(th).data().to_vec()
    };
    assert!(rel(&gen(&rev), &gen(&toks)) < 1e-13);
}

#[test]
fn initial_output_layer_is_silent() {
    let cfg = HyperConfig {
        final_scale: 1e-2,
        ..tiny(2)
    };
    let net = net_1d(cfg, &["u"], 16, 21);
    let layout = layout_1d(1);
    let th = net.psi_forward(&random_tensor(&mut rng(22), &[2, 1, 16], 1.0), &names(&["u"])).unwrap();
    for s in &layout.segments {
        let seg = &th[s.offset..s.offset + s.len];
        if s.name.starts_with("head.") {
            assert!(seg.iter().all(|v| v.abs() < 0.05 * s.bound()), "{}", s.name);
        } else if s.name.ends_with(".gamma") {
            assert!(seg.iter().all(|v| (v - 1.0).abs() < 0.05));
        }
    }
}

#[test]
fn weight_gradients_match_finite_differences() {
    let net = net_1d(tiny(2), &["u"], 16, 23);
    let ctx = random_tensor(&mut rng(24), &[2, 1, 16], 1.0);
    let w = random_tensor(&mut rng(25), &[net.theta_len()], 1.0);
    let f = names(&["u"]);
    let err = fd_check(
        &net.store.tensors,
        |g, vars| {
            let b = Bound {
                net: &net,
                vars: vars.to_vec(),
            };
            let th = b.psi_forward(g, &ctx, &f, None).unwrap();
            let wc = g.constant(w.clone());
            let p = g.mul(th, wc).unwrap();
            g.sum(p).unwrap()
        },
        80,
        26,
    );
    assert!(err <= 1e-4, "worst relative error {err}");
}
