use std::f64::consts::PI;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use disco::hypernet::HyperConfig;
use disco::integrator::IntegratorConfig;
use disco::parallel::{map_indexed, Execution};
use disco::pdegen::{gen_burgers_1d_with, GridSpec, PdeFamily};
use disco::train::{context_tensor, operator_for, windows, DiscoModel};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn batch_gradients(c: &mut Criterion) {
    let fam = PdeFamily {
        frames: 8,
        ..PdeFamily::burgers_default()
    };
    let data = gen_burgers_1d_with(&fam, &GridSpec::periodic_1d(64, 2.0 * PI), 8, 1, Execution::Sequential).unwrap();
    let hyper = HyperConfig {
        context_len: 3,
        final_scale: 1e-2,
        ..HyperConfig::default()
    };
    let model = DiscoModel::new(&data, operator_for(&data, 2, 4), hyper, IntegratorConfig::default(), 0).unwrap();
    let batch: Vec<_> = windows(&[0, 1, 2, 3, 4, 5, 6, 7], data.n_frames, 3).into_iter().step_by(5).take(8).collect();

    let mut g = c.benchmark_group("batch_gradients");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                map_indexed(exec, batch.len(), |i| {
                    let w = batch[i];
                    let ctx = context_tensor(&data, w.traj, w.start, 3);
                    let target: Vec<f64> = data.frame_slice(w.traj, w.start + 3).iter().map(|x| *x as f64).collect();
                    model.loss_and_grad(&ctx, &target, 1e-7, None).unwrap().0
                })
            })
        });
    }
    g.finish();
}

fn trajectory_generation(c: &mut Criterion) {
    let fam = PdeFamily {
        frames: 10,
        ..PdeFamily::burgers_default()
    };
    let grid = GridSpec::periodic_1d(128, 2.0 * PI);
    let mut g = c.benchmark_group("burgers_generation");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| gen_burgers_1d_with(&fam, &grid, 16, 2, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, batch_gradients, trajectory_generation);
criterion_main!(benches);
