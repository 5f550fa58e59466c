use criterion::{black_box, criterion_group, criterion_main, Criterion};

use vmesh::baselines::{run_baseline, BaselineConfig};
use vmesh::catalog::find;
use vmesh::simcore::{plan_for, run_vectormesh, ArchConfig, RunOptions};
use vmesh::tensor::random_inputs;
use vmesh::workload::make_gemm;

fn planning(c: &mut Criterion) {
    let cfg = ArchConfig::vectormesh_128();
    let w = find("VG CONV2").unwrap().at_spatial(56).build().unwrap();
    c.bench_function("plan VG CONV2", |b| {
        b.iter(|| plan_for(&cfg, black_box(&w)).unwrap())
    });
}

fn simulation(c: &mut Criterion) {
    let cfg = ArchConfig::vectormesh_128();
    let w = make_gemm(64, 64, 64).unwrap();
    let inputs = random_inputs(&w, 1);
    c.bench_function("vectormesh gemm 64 functional", |b| {
        b.iter(|| run_vectormesh(&cfg, &w, &inputs, RunOptions::functional()).unwrap())
    });
    c.bench_function("vectormesh gemm 64 timing", |b| {
        b.iter(|| run_vectormesh(&cfg, &w, &[], RunOptions::timing()).unwrap())
    });
    let conv = find("AL CONV3").unwrap().at_spatial(28).build().unwrap();
    for bl in [
        BaselineConfig::systolic(128).unwrap(),
        BaselineConfig::row_stationary(128).unwrap(),
    ] {
        c.bench_function(&format!("{} AL CONV3", bl.kind.name()), |b| {
            b.iter(|| run_baseline(&bl, black_box(&conv), None).unwrap())
        });
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = planning, simulation
}
criterion_main!(benches);
