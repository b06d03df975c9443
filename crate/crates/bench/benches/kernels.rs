use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use qnn_core::datasets::synthetic;
use qnn_core::hwsim::{simulate_dims, BoardBudget, FoldingConfig, LogicCostModel, NetworkDims};
use qnn_core::model::{build_mlp, CLASSES, INPUT_FEATURES};
use qnn_core::{streamline, Rng, Tensor};

fn bench_matmul(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let a = Tensor::matrix(100, 1024, rng.uniform_vec(-1.0, 1.0, 100 * 1024).unwrap()).unwrap();
    let b = Tensor::matrix(1024, 64, rng.uniform_vec(-1.0, 1.0, 1024 * 64).unwrap()).unwrap();
    c.bench_function("matmul_100x1024x64", |bch| bch.iter(|| black_box(a.matmul(&b).unwrap())));
}

fn bench_inference(c: &mut Criterion) {
    let data = synthetic(3, 10, 1000, INPUT_FEATURES);
    let idx: Vec<usize> = (0..data.test.len()).collect();
    let (x, _) = data.test.gather(&idx).unwrap();
    let codes: Vec<u8> = (0..data.test.len()).flat_map(|i| data.test.codes(i).to_vec()).collect();
    let mut group = c.benchmark_group("inference_1000");
    for (a, w) in [(2u8, 2u8), (4, 4), (8, 8)] {
        let net = build_mlp(a, w, &[64, 64], 7).unwrap();
        let inet = streamline(&net).unwrap();
        let name = format!("A{a}W{w}");
        group.bench_with_input(BenchmarkId::new("float_reference", &name), &x, |bch, x| {
            bch.iter(|| black_box(net.forward_eval(x).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("integer", &name), &codes, |bch, codes| {
            bch.iter(|| black_box(inet.infer_codes(codes).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("streamline", &name), &net, |bch, net| {
            bch.iter(|| black_box(streamline(net).unwrap()))
        });
    }
    group.finish();
}

fn bench_simulate(c: &mut Criterion) {
    let budget = BoardBudget::pynq_z1();
    let cost = LogicCostModel::default();
    c.bench_function("simulate_grid_441", |bch| {
        bch.iter(|| {
            for a in 2..=8 {
                for w in 2..=8 {
                    let dims = NetworkDims::mlp(INPUT_FEATURES, &[64, 64], CLASSES, a, w).unwrap();
                    for (pe, simd) in [(2, 2), (2, 8), (2, 16), (8, 2), (8, 8), (8, 16), (16, 2), (16, 8), (16, 16)] {
                        let f = FoldingConfig::uniform(&dims, pe, simd).unwrap();
                        black_box(simulate_dims(&dims, &f, &budget, &cost).unwrap());
                    }
                }
            }
        })
    });
}

criterion_group!(benches, bench_matmul, bench_inference, bench_simulate);
criterion_main!(benches);
