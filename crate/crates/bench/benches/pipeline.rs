use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use latentedit::similarity::similarity_stack;
use latentedit::*;

fn scenario(size: usize) -> Scenario {
    let q = size / 4;
    generate_scenario(&ScenarioSpec {
        shape: Shape::new(4, size, size).unwrap(),
        mask: Rect {
            row0: q,
            col0: q,
            row1: 3 * q,
            col1: 3 * q,
        },
        ..Default::default()
    })
    .unwrap()
}

fn editors(c: &mut Criterion) {
    let mut group = c.benchmark_group("edit");
    for size in [16, 64] {
        let sc = scenario(size);
        for (sampler, mode) in [
            (Sampler::Ddim, EditMode::Inversion),
            (Sampler::Ddim, EditMode::InversionFree),
            (Sampler::Rf, EditMode::Inversion),
            (Sampler::Rf, EditMode::InversionFree),
        ] {
            let cfg = FusionConfig::new(sampler, mode);
            let id = format!("{}/{}/{size}", sampler.as_str(), mode.as_str());
            group.bench_function(BenchmarkId::from_parameter(id), |b| {
                b.iter(|| {
                    edit(
                        &sc.z0_source,
                        &sc.model,
                        &sc.source_cond,
                        &sc.target_cond,
                        black_box(&cfg),
                    )
                    .unwrap()
                })
            });
        }
    }
    group.finish();
}

fn similarity(c: &mut Criterion) {
    let mut group = c.benchmark_group("similarity_stack");
    for size in [16, 64, 128] {
        let shape = Shape::new(4, size, size).unwrap();
        let a = sample_gaussian(shape, Seed(1));
        let b = sample_gaussian(shape, Seed(2));
        group.bench_with_input(BenchmarkId::from_parameter(size), &size, |bench, _| {
            bench.iter(|| {
                similarity_stack(black_box(&a), &b, 0.5, 4, SharpenParams::default()).unwrap()
            })
        });
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let shape = Shape::new(4, 64, 64).unwrap();
    let a = sample_gaussian(shape, Seed(3));
    let b = sample_gaussian(shape, Seed(4));
    c.bench_function("ssim/64", |bench| {
        bench.iter(|| ssim(black_box(&a), &b, 6.0).unwrap())
    });
    c.bench_function("psnr/64", |bench| {
        bench.iter(|| psnr(black_box(&a), &b, 6.0).unwrap())
    });
}

criterion_group!(benches, editors, similarity, metrics);
criterion_main!(benches);
