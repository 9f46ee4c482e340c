use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rwpo::datasets::sample_base;
use rwpo::dynamics::{Flow, TimeGrid};
use rwpo::layer::{attention_direct, RwpoParams, TokenBatch};
use rwpo::par;
use rwpo::potential::DriftPotential;

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", true), ("sequential", false)]
}

fn attention(c: &mut Criterion) {
    let mut g = c.benchmark_group("attention");
    let p = RwpoParams::new(1.0, 1.0, 0.02).unwrap();
    for n in [256, 1024] {
        let x = sample_base(n, 2, 1);
        for (name, on) in modes() {
            g.bench_with_input(BenchmarkId::new(name, n), &x, |b, x| {
                par::set_parallel(on);
                b.iter(|| attention_direct(x, &p, true));
            });
        }
    }
    g.finish();
    par::set_parallel(true);
}

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    let a = sample_base(1024, 48, 2);
    let w = sample_base(48, 48, 3);
    for (name, on) in modes() {
        g.bench_function(name, |b| {
            par::set_parallel(on);
            b.iter(|| par::matmul(a.view(), w.view()));
        });
    }
    g.finish();
    par::set_parallel(true);
}

fn flow(c: &mut Criterion) {
    let mut g = c.benchmark_group("backward_flow");
    g.sample_size(10);
    let pot = DriftPotential::new(2, 48, 2, 4).unwrap();
    let rp = RwpoParams::new(1.0, 1.0, 1.0 / 16.0).unwrap();
    let grid = TimeGrid::new(1.0, 16).unwrap();
    let x = TokenBatch::new(sample_base(512, 2, 5), 16).unwrap();
    for (name, on) in modes() {
        g.bench_function(name, |b| {
            par::set_parallel(on);
            b.iter(|| Flow::new(&pot, &rp, grid).unwrap().backward(&x).unwrap());
        });
    }
    g.finish();
    par::set_parallel(true);
}

criterion_group!(benches, attention, matmul, flow);
criterion_main!(benches);
