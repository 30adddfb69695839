#![allow(dead_code)]

use disco::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Central-difference check of d(program)/d(inputs) on random coordinates.
/// Returns the worst relative error encountered.
pub fn fd_check<F>(inputs: &[Tensor], program: F, coords: usize, seed: u64) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = program(&mut g, &vars);
        g.value(out).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = program(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| grads.get_or_zero(*v)).collect();

    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let ti = r.gen_range(0..inputs.len());
        let ci = r.gen_range(0..inputs[ti].numel());
        let x = inputs[ti].data()[ci];
        let h = 1e-5 * (1.0 + x.abs());
        let mut plus = inputs.to_vec();
        plus[ti].data_mut()[ci] = x + h;
        let mut minus = inputs.to_vec();
        minus[ti].data_mut()[ci] = x - h;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let an = analytic[ti][ci];
        let rel = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-6));
        worst = worst.max(rel);
    }
    worst
}
