use criterion::{criterion_group, criterion_main, Criterion};

use polaron::config::CrystalConfig;
use polaron::defect::{scf_defect, DefectOptions};
use polaron::lattice::{Domain, Lattice};
use polaron::pekar::{solve_pekar_ground, FlowOptions, PekarKernel};
use polaron::response::{extract_eps_m, DielectricMatrix};
use polaron_bench::{centred_defect, context, reference_crystal};

fn crystal_scf(c: &mut Criterion) {
    let cfg = CrystalConfig::default();
    c.bench_function("crystal_scf", |b| b.iter(|| cfg.solve().unwrap()));
}

fn response(c: &mut Criterion) {
    let crystal = reference_crystal();
    let mut g = c.benchmark_group("response");
    g.sample_size(10);
    g.bench_function("supercell_build_3", |b| b.iter(|| context(crystal.clone(), [3; 3])));
    let ctx = context(crystal.clone(), [3; 3]);
    let nu = centred_defect(&ctx, 2.0, 0.1);
    g.bench_function("solve_one_plus_l_3", |b| b.iter(|| ctx.solve_one_plus_l(&nu).unwrap()));
    g.bench_function("extract_eps_3", |b| b.iter(|| extract_eps_m(&context(crystal.clone(), [3; 3])).unwrap()));
    g.finish();
}

fn defect(c: &mut Criterion) {
    let ctx = context(reference_crystal(), [2; 3]);
    let nu = centred_defect(&ctx, 1.5, 0.1);
    let mut g = c.benchmark_group("defect");
    g.sample_size(10);
    g.bench_function("scf_defect_2", |b| b.iter(|| scf_defect(&ctx, &nu, &DefectOptions::default()).unwrap()));
    g.finish();
}

fn pekar(c: &mut Criterion) {
    let d = Domain::new(Lattice::cubic(24.0), [24; 3]);
    let eps = DielectricMatrix::isotropic(4.0);
    let opts = FlowOptions { tol: 1e-7, check_box: false, ..FlowOptions::default() };
    let mut g = c.benchmark_group("pekar");
    g.sample_size(10);
    g.bench_function("ground_state_24", |b| {
        b.iter(|| solve_pekar_ground(&eps, &d, PekarKernel::truncated_for(&d, &eps), &opts).unwrap())
    });
    g.finish();
}

criterion_group!(benches, crystal_scf, response, defect, pekar);
criterion_main!(benches);
