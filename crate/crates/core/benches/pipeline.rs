use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use liteie::bench::synthetic_frame;
use liteie::{enhance_image, init_weights, parallel, EnhanceConfig, NetTopology};

fn pipeline(c: &mut Criterion) {
    let w = init_weights(&NetTopology::canonical(), 0);
    let cfg = EnhanceConfig::default();
    let mut group = c.benchmark_group("enhance_3-1-3_T8");
    group.sample_size(10);
    for &(h, w_px) in &[(360usize, 640usize), (720, 1280)] {
        let frame = synthetic_frame(h, w_px, 0);
        for &(label, threads) in &[("sequential", 1usize), ("parallel", 0)] {
            group.bench_with_input(BenchmarkId::new(label, format!("{w_px}x{h}")), &frame, |b, f| {
                parallel::with_threads(threads, || b.iter(|| enhance_image(&w, f, &cfg).unwrap()))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, pipeline);
criterion_main!(benches);
