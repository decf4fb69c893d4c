//! Compares the fan-out shim's parallel path against the sequential
//! reference on real workloads: independent replica chains and the
//! exact-kernel instance analysis. With the default `parallel` feature
//! the first path runs on rayon; built with `--no-default-features` both
//! paths are sequential and should time identically.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cgmc::energy::benchmark_hamiltonian;
use cgmc::exec::{par_map, seq_map};
use cgmc::kernel_analysis::{build_mh_kernel, exact_gibbs, spectral_gap};
use cgmc::lattice::LatticeGeometry;
use cgmc::samplers::{run_chain, Method, SamplerConfig};

/// One independent replica: a short single-site chain on the reference
/// model; returns the final coverage so the work cannot be elided.
fn replica(seed: u64) -> f64 {
    let geom = LatticeGeometry::new(1, 64).unwrap();
    let h = benchmark_hamiltonian(&geom, 1.0, 5.0, 2.0, 0.5).unwrap();
    let mut cfg = SamplerConfig::new(Method::Mh, seed);
    cfg.iterations = 20_000;
    let run = run_chain(&cfg, &h, None, None).unwrap();
    run.rows.last().map(|r| r.coverage).unwrap_or(0.0)
}

/// One exact-kernel analysis: dense single-site kernel and its spectral
/// gap on an enumerable instance.
fn gap_instance(n: usize) -> f64 {
    let geom = LatticeGeometry::new(1, n).unwrap();
    let h = benchmark_hamiltonian(&geom, 1.0, 5.0, 1.0, 0.5).unwrap();
    let mu = exact_gibbs(&h).unwrap();
    let kernel = build_mh_kernel(&h).unwrap();
    spectral_gap(&kernel, &mu).unwrap()
}

fn bench_replica_chains(c: &mut Criterion) {
    let mut group = c.benchmark_group("replica_chains");
    group.sample_size(10);
    for &replicas in &[4u64, 8] {
        let seeds: Vec<u64> = (0..replicas).collect();
        group.bench_with_input(BenchmarkId::new("seq_map", replicas), &seeds, |b, seeds| {
            b.iter(|| seq_map(seeds.clone(), replica))
        });
        group.bench_with_input(BenchmarkId::new("par_map", replicas), &seeds, |b, seeds| {
            b.iter(|| par_map(seeds.clone(), replica))
        });
    }
    group.finish();
}

fn bench_kernel_analysis(c: &mut Criterion) {
    let mut group = c.benchmark_group("kernel_gaps");
    group.sample_size(10);
    let sizes: Vec<usize> = vec![4, 6, 8];
    group.bench_with_input(BenchmarkId::new("seq_map", "4-6-8"), &sizes, |b, sizes| {
        b.iter(|| seq_map(sizes.clone(), gap_instance))
    });
    group.bench_with_input(BenchmarkId::new("par_map", "4-6-8"), &sizes, |b, sizes| {
        b.iter(|| par_map(sizes.clone(), gap_instance))
    });
    group.finish();
}

criterion_group!(benches, bench_replica_chains, bench_kernel_analysis);
criterion_main!(benches);
