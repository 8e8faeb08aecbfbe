use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use spine_core::backend::OracleBackend;
use spine_core::config::{Mode, PipelineConfig};
use spine_core::exec::Execution;
use spine_core::patch::plan_patches;
use spine_core::pipeline::{detect_slice, run_detection_pipeline, run_grading};
use spine_core::synth;

const STRATEGIES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn whole_spine_slice(c: &mut Criterion) {
    let scan = synth::whole_spine(1);
    let base = PipelineConfig::for_mode(Mode::WholeSpine);
    let oracle = OracleBackend::new(&scan.truth, base.render).unwrap();
    let (ns, h, w) = scan.volume.dims();
    let specs = plan_patches((h, w), scan.volume.pixel_spacing(), base.edge_mm, base.overlap_frac)
        .unwrap()
        .specs;
    let mut group = c.benchmark_group("detect_slice/wholespine");
    group.sample_size(10);
    for (name, execution) in STRATEGIES {
        let cfg = PipelineConfig { execution, ..base };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| detect_slice(&scan.volume, black_box(ns / 2), &specs, &oracle, &cfg).unwrap())
        });
    }
    group.finish();
}

fn lumbar_detection(c: &mut Criterion) {
    let scan = synth::lumbar(1);
    let base = PipelineConfig::for_mode(Mode::Lumbar);
    let oracle = OracleBackend::new(&scan.truth, base.render).unwrap();
    let mut group = c.benchmark_group("detection/lumbar");
    group.sample_size(10).measurement_time(Duration::from_secs(20));
    for (name, execution) in STRATEGIES {
        let cfg = PipelineConfig { execution, ..base };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_detection_pipeline(black_box(&scan.volume), &oracle, &cfg).unwrap())
        });
    }
    group.finish();
}

fn lumbar_grading(c: &mut Criterion) {
    let scan = synth::lumbar(1);
    let base = PipelineConfig::for_mode(Mode::Lumbar);
    let oracle = OracleBackend::new(&scan.truth, base.render).unwrap();
    let report = run_detection_pipeline(&scan.volume, &oracle, &base).unwrap();
    let mut group = c.benchmark_group("grading/lumbar");
    group.sample_size(10);
    for (name, execution) in STRATEGIES {
        let cfg = PipelineConfig { execution, ..base };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_grading(black_box(&scan.volume), &report, &oracle, &cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, whole_spine_slice, lumbar_detection, lumbar_grading);
criterion_main!(benches);
