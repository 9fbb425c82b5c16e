use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use segrisk::features::{extract_feature_vector, Connectivity};
use segrisk::forest::{train_forest, ForestConfig};
use segrisk::loss::{BiTemperedParams, LossKind};
use segrisk::synth::{gen_cohort, gen_slide, gen_tile, tile_specs, TileSpec, SIX_CLASS_MIX};
use segrisk::train::{train, Tile, TrainConfig};
use segrisk::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn tiles(n: usize, size: usize) -> Vec<Tile> {
    let template = TileSpec { size, class_mix: SIX_CLASS_MIX.to_vec(), ..Default::default() };
    tile_specs(&template, n, 1, 0)
        .iter()
        .map(|s| {
            let (rgb, labels) = gen_tile(s).unwrap();
            Tile { rgb, labels }
        })
        .collect()
}

fn bench_training(c: &mut Criterion) {
    let data = tiles(12, 64);
    let mut group = c.benchmark_group("train_epoch");
    group.sample_size(10);
    for loss in [LossKind::Cc, LossKind::BiTempered(BiTemperedParams::default()), LossKind::Lovasz] {
        let config = TrainConfig { loss, initial_lr: 0.1, max_epochs: 1, iterations_per_epoch: 4, batch_size: 5, ..Default::default() };
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(loss.name(), name), &exec, |b, &exec| {
                b.iter(|| train(&data[..10], &data[10..], 14, &config, exec).unwrap())
            });
        }
    }
    group.finish();
}

fn bench_forest(c: &mut Criterion) {
    let slides: Vec<_> = gen_cohort(40, 3).iter().map(|s| gen_slide(s).unwrap()).collect();
    let features: Vec<Vec<f64>> = slides
        .iter()
        .map(|s| extract_feature_vector(&s.map, 1.0, Connectivity::Four).unwrap().to_vec())
        .collect();
    let labels: Vec<usize> = slides.iter().map(|s| s.grade.index()).collect();
    let config = ForestConfig { n_trees: 100, seed: 5, ..Default::default() };
    let mut group = c.benchmark_group("forest_fit_100_trees");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| train_forest(&features, &labels, 4, &config, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_slides(c: &mut Criterion) {
    let specs = gen_cohort(16, 9);
    let mut group = c.benchmark_group("slide_features");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                exec.map(&specs, |s| {
                    let slide = gen_slide(s).unwrap();
                    extract_feature_vector(&slide.map, 1.0, Connectivity::Four).unwrap()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_training, bench_forest, bench_slides);
criterion_main!(benches);
