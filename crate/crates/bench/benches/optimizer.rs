//! Wall-time benchmarks for the optimizer's hot paths: kernel evaluation,
//! the analytic last stage, a full generic backward stage (per-cell control
//! scan), table lookups, retracing, exact tree evaluation, and the
//! closed-form sweep that backs the CSV output.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use qppm_core::baselines::{
    binary_pc_optimal, optimize_icn, pe_conditional_nulling, pe_direct_detection, pe_helstrom,
};
use qppm_core::dp::{run_backward, Family};
use qppm_core::numeric::scan_then_refine;
use qppm_core::tree::{dd_tree, exact_pc, retrace_forward};
use qppm_core::{config_from_mean_photons, GridSpec, Interpolation, LocalMeasurement};

fn bench_kernels(c: &mut Criterion) {
    let cfg = config_from_mean_photons(4, 1.0).unwrap();
    c.bench_function("kernel/projective", |b| {
        b.iter(|| {
            LocalMeasurement::projective(black_box(0.3))
                .kernel(&cfg)
                .unwrap()
        })
    });
    c.bench_function("kernel/generalized_kennedy", |b| {
        b.iter(|| {
            LocalMeasurement::generalized_kennedy(
                black_box(0.7),
                qppm_core::Association::Direct,
            )
            .unwrap()
            .kernel(&cfg)
            .unwrap()
        })
    });
    c.bench_function("kernel/povm", |b| {
        b.iter(|| {
            LocalMeasurement::povm(black_box(0.4), black_box(0.2))
                .unwrap()
                .kernel(&cfg)
                .unwrap()
        })
    });
}

fn bench_binary_closed_form(c: &mut Criterion) {
    let cfg = config_from_mean_photons(2, 1.0).unwrap();
    c.bench_function("binary/closed_form_pc", |b| {
        b.iter(|| binary_pc_optimal(black_box(0.4), black_box(0.35), &cfg))
    });
}

fn bench_scan_then_refine(c: &mut Criterion) {
    // Same shape as the per-cell control search: coarse scan plus golden
    // section refinement of a smooth unimodal objective.
    c.bench_function("search/scan_then_refine_720", |b| {
        b.iter(|| {
            scan_then_refine(
                |x| -(x - black_box(0.7)).powi(2),
                -std::f64::consts::FRAC_PI_2,
                std::f64::consts::FRAC_PI_2,
                720,
                1e-10,
            )
        })
    });
}

fn bench_backward(c: &mut Criterion) {
    // M=2 has only the analytic last stage; M=3 adds one scanned stage, the
    // unit of work every larger cardinality repeats per stage.
    let cfg2 = config_from_mean_photons(2, 1.0).unwrap();
    let grid2 = GridSpec::square_for(2, 251, Interpolation::Bilinear).unwrap();
    c.bench_function("backward/m2_analytic_stage_251", |b| {
        b.iter(|| run_backward(&cfg2, &grid2).unwrap())
    });

    let cfg3 = config_from_mean_photons(3, 1.0).unwrap();
    let grid3 = GridSpec::square_for(3, 121, Interpolation::Bilinear).unwrap();
    let mut group = c.benchmark_group("backward");
    group.sample_size(10);
    group.bench_function("m3_scanned_stage_121", |b| {
        b.iter(|| run_backward(&cfg3, &grid3).unwrap())
    });
    group.finish();
}

fn bench_probe_and_retrace(c: &mut Criterion) {
    let cfg = config_from_mean_photons(4, 1.0).unwrap();
    let grid = GridSpec::square_for(4, 151, Interpolation::Bilinear).unwrap();
    let result = run_backward(&cfg, &grid).unwrap();
    let table = result.stage_table(2).unwrap();
    c.bench_function("probe/value_bilinear", |b| {
        b.iter(|| table.value_probe(black_box(0.11), black_box(0.07)))
    });
    c.bench_function("probe/control_bilinear", |b| {
        b.iter(|| table.control_probe(black_box(0.11), black_box(0.07)))
    });
    c.bench_function("tree/retrace_m4", |b| {
        b.iter(|| retrace_forward(black_box(&result)).unwrap())
    });
    assert_eq!(result.family, Family::Projective);
}

fn bench_exact_pc(c: &mut Criterion) {
    let cfg = config_from_mean_photons(8, 1.0).unwrap();
    let tree = dd_tree(&cfg);
    c.bench_function("tree/exact_pc_m8", |b| {
        b.iter(|| exact_pc(black_box(&tree), &cfg).unwrap())
    });
}

fn bench_closed_form_sweep(c: &mut Criterion) {
    // The non-optimized part of a 20-point CSV sweep row set.
    c.bench_function("sweep/closed_forms_20pt", |b| {
        b.iter(|| {
            let mut acc = 0.0;
            for k in 0..20 {
                let a2 = 0.2 + 0.15 * k as f64;
                let cfg = config_from_mean_photons(black_box(4), a2).unwrap();
                acc += pe_helstrom(&cfg)
                    + pe_direct_detection(&cfg)
                    + pe_conditional_nulling(&cfg)
                    + optimize_icn(&cfg, true).unwrap().pe;
            }
            acc
        })
    });
}

criterion_group!(
    benches,
    bench_kernels,
    bench_binary_closed_form,
    bench_scan_then_refine,
    bench_backward,
    bench_probe_and_retrace,
    bench_exact_pc,
    bench_closed_form_sweep
);
criterion_main!(benches);
