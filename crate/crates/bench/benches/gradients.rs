use criterion::{black_box, criterion_group, criterion_main, Criterion};
use stgrape_bench::Fixture;
use stgrape_core::objective::{unitary_preset, BasisKind};
use stgrape_core::optimize::{grape_gradient, stgrape_gradient};
use stgrape_core::{Backend, GateObjective, PropagationConfig, Task};

fn gate_gradients(c: &mut Criterion) {
    let cfg = PropagationConfig::default();
    let fx = Fixture::new(2, 1, 40, 0.5);
    let u = unitary_preset("cnot", 2).unwrap();
    let gobj = GateObjective::new(&fx.mset, u, BasisKind::DPlusOne, 0.1).unwrap();
    let task = Task::gate(&gobj);
    let mut group = c.benchmark_group("gate_gradient_nq2_n1_40steps");
    group.sample_size(10);
    group.bench_function("grape_expm", |b| {
        b.iter(|| black_box(grape_gradient(&fx.model, &fx.mset, &fx.grid, &task, Backend::Expm, &cfg, true).unwrap()))
    });
    group.bench_function("stgrape", |b| {
        b.iter(|| black_box(stgrape_gradient(&fx.model, &fx.mset, &fx.grid, &task, &cfg, true).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, gate_gradients);
criterion_main!(benches);
