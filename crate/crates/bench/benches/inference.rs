use criterion::{criterion_group, criterion_main, Criterion};
use mosc_bench::{sized_panel, study_panel};
use mosc_core::inference::{conformal_joint, permutation_test, ConformalObjective, PermutationConfig};
use mosc_core::screening::{contamination_scan, ContaminationParams};
use std::hint::black_box;

fn conformal(c: &mut Criterion) {
    let panel = study_panel(4);
    let tau0 = vec![0.0; panel.n_outcomes()];
    let mut g = c.benchmark_group("conformal_joint");
    g.bench_function("average", |b| b.iter(|| conformal_joint(black_box(&panel), ConformalObjective::Average, &tau0)));
    g.bench_function("concatenated", |b| {
        b.iter(|| conformal_joint(black_box(&panel), ConformalObjective::Concatenated, &tau0))
    });
    g.finish();
}

fn permutation(c: &mut Criterion) {
    let panel = study_panel(5);
    let cfg = PermutationConfig { n_in_time: 7, ..Default::default() };
    c.bench_function("permutation_6_donors_7_in_time", |b| b.iter(|| permutation_test(black_box(&panel), &cfg)));
}

fn contamination(c: &mut Criterion) {
    let panel = sized_panel(13, 40, 7, 6);
    let cands = panel.donor_labels().to_vec();
    let params = ContaminationParams::default();
    let mut g = c.benchmark_group("contamination_scan");
    g.sample_size(10);
    g.bench_function("12_candidates_t0_40", |b| b.iter(|| contamination_scan(black_box(&panel), &cands, &params)));
    g.finish();
}

criterion_group!(benches, conformal, permutation, contamination);
criterion_main!(benches);
