use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use jmpe_nn::{conv, par, ConvGeom, Tensor};

fn input(n: usize, ch: usize) -> Tensor<f32> {
    Tensor::from_vec(
        [n; 3],
        ch,
        (0..n * n * n * ch).map(|i| (i % 7) as f32 * 0.1).collect(),
    )
}

fn conv3(c: &mut Criterion) {
    let all = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut group = c.benchmark_group("conv3d_32");
    group.sample_size(10);
    for (ci, co) in [(1, 4), (8, 8)] {
        let g = ConvGeom::new(ci, co, 3, 1, 1);
        let x = input(32, ci);
        let w: Vec<f32> = (0..g.weight_len()).map(|i| (i % 5) as f32 * 0.01).collect();
        let y = conv::forward(&x, &w, None, &g);
        for threads in [1, all] {
            let id = format!("{ci}to{co}/threads{threads}");
            group.bench_function(BenchmarkId::new("forward", &id), |b| {
                par::with_threads(threads, || b.iter(|| conv::forward(&x, &w, None, &g)))
            });
            group.bench_function(BenchmarkId::new("backward", &id), |b| {
                par::with_threads(threads, || {
                    b.iter(|| {
                        let dw = conv::backward_weight(&x, &y, &g, true);
                        let dx = conv::backward_input(&y, &w, &g, x.dims);
                        (dw, dx)
                    })
                })
            });
            if all == 1 {
                break;
            }
        }
    }
    group.finish();
}

criterion_group!(benches, conv3);
criterion_main!(benches);
