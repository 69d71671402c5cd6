use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hisp::appearance::AppearanceMode;
use hisp::filter::{external_weights, AssociationTable, RowSpec, UndetectedSpec};
use hisp::pipeline::{track_scenario, RunConfig};
use hisp::simulator::{simulate, Preset, ScenarioSpec};
use hisp::MeasurementId;

/// A banded sparse table: every hypothesis gates three neighbouring measurements.
fn banded_table(n: usize) -> AssociationTable {
    let rows = (0..n)
        .map(|i| {
            let w = 0.3 + 0.6 * ((i * 7919) % 97) as f64 / 97.0;
            RowSpec {
                prior_weight: w,
                missed: 0.1 * w,
                hits: (0..3)
                    .map(|k| ((i + k) % n, w * 0.9 / (k + 2) as f64))
                    .collect(),
            }
        })
        .collect();
    AssociationTable::from_specs(
        (0..n as u32).map(|j| MeasurementId::new(1, j)).collect(),
        vec![0.05; n],
        rows,
        UndetectedSpec {
            weight: 0.9,
            multiplicity: 2.0,
            missed: 0.8,
            births: vec![0.01; n],
        },
    )
    .expect("valid table")
}

fn bench_external_weights(c: &mut Criterion) {
    let mut group = c.benchmark_group("external_weights");
    for n in [16, 128, 1024] {
        let table = banded_table(n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &table, |b, t| {
            b.iter(|| external_weights(black_box(t.clone())))
        });
    }
    group.finish();
}

fn bench_sequence(c: &mut Criterion) {
    let mut group = c.benchmark_group("sequence");
    group.sample_size(10);
    for preset in [Preset::Easy, Preset::Hard] {
        let spec = ScenarioSpec::preset(preset, 1);
        let scenario = simulate(&spec).expect("scenario");
        let run = RunConfig::for_scenario(&spec);
        group.bench_function(format!("{preset:?}"), |b| {
            b.iter(|| track_scenario(&run, &scenario, AppearanceMode::Off).expect("run"))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_external_weights, bench_sequence);
criterion_main!(benches);
