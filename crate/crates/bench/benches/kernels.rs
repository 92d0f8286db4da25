use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use opdisc::discretize::functor_a_error;
use opdisc::galerkin_fem::{fem_convergence, singularity_scan, ConvexNonlinearity, GalerkinKind};
use opdisc::invert::{chain_inverse, InversionConfig};
use opdisc::monotone::pairwise_alpha;
use opdisc::nogo_isotopy::{default_t_grid, truncated_det_scan};
use opdisc::spectral_core::sample_ball;
use opdisc::{BasisKind, LinearOperatorExpr, Map, Subspace};
use opdisc_bench::{groupsort_chain, leaky_layer};

fn layer_eval(c: &mut Criterion) {
    let mut group = c.benchmark_group("layer_eval");
    for dim in [16, 64, 256] {
        let layer = leaky_layer(dim, 1);
        let x = sample_ball(dim, 1.0, 1, 1.0, 2).remove(0);
        group.bench_with_input(BenchmarkId::from_parameter(dim), &x, |b, x| b.iter(|| layer.apply(black_box(x))));
    }
    group.finish();
}

fn certificates(c: &mut Criterion) {
    let layer = leaky_layer(32, 3);
    c.bench_function("pairwise_alpha_32x64", |b| b.iter(|| pairwise_alpha(&layer, 1.0, 64, 4).unwrap()));
    c.bench_function("functor_a_error_32", |b| {
        b.iter(|| functor_a_error(&layer, &Subspace::prefix(8), 1.0, 64, 5))
    });
}

fn inversion(c: &mut Criterion) {
    let chain = groupsort_chain(32, 6, 4, 6);
    let y = sample_ball(32, 1.0, 1, 1.0, 7).remove(0);
    let cfg = InversionConfig::default();
    c.bench_function("chain_inverse_4x6", |b| {
        b.iter(|| chain_inverse(&chain, &LinearOperatorExpr::Identity, black_box(&y), &cfg).unwrap())
    });
}

fn scans(c: &mut Criterion) {
    let grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    c.bench_function("galerkin_scan_a_n6", |b| {
        b.iter(|| singularity_scan(GalerkinKind::A, 6, BasisKind::Fourier, &grid, 1e-10).unwrap())
    });
    let t_grid = default_t_grid(200, 6);
    c.bench_function("isotopy_scan_m7", |b| b.iter(|| truncated_det_scan(7, &t_grid, 1e-12).unwrap()));
    c.bench_function("fem_cubic_16_to_128", |b| {
        b.iter(|| fem_convergence(|x: f64| 10.0 * x, ConvexNonlinearity::Cubic, &[16, 32, 64, 128], 1e-10).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = layer_eval, certificates, inversion, scans
}
criterion_main!(benches);
