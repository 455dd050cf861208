//! Parallel-versus-sequential comparison of the data-parallel core.
//!
//! With the default `parallel` feature the degree-N runs use the rayon
//! pool; built with `--no-default-features` every degree falls back to the
//! sequential path, which makes the two configurations directly
//! comparable.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ustydit::imaging::{canny, ImageBuffer};
use ustydit::util::par_map;

fn textured(edge: usize, salt: u64) -> ImageBuffer {
    let values = (0..edge * edge * 3)
        .map(|i| {
            let h = (i as u64)
                .wrapping_mul(0x9E3779B97F4A7C15)
                .wrapping_add(salt)
                .rotate_left(17);
            (h % 1000) as f64 / 999.0
        })
        .collect();
    ImageBuffer::new(edge, edge, 3, values).unwrap()
}

fn bench_parallel_canny(c: &mut Criterion) {
    let images: Vec<ImageBuffer> = (0..32).map(|i| textured(64, i)).collect();
    let mut group = c.benchmark_group("edge_extraction_batch");
    for &par in &[1usize, 2, 4, 8] {
        group.bench_with_input(BenchmarkId::from_parameter(par), &par, |b, &par| {
            b.iter(|| {
                let work: Vec<&ImageBuffer> = images.iter().collect();
                par_map(work, par, |img| canny(img, 100.0, 200.0).unwrap())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_parallel_canny);
criterion_main!(benches);
