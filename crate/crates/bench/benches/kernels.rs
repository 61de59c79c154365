use std::hint::black_box;

use attrib_core::eval::perturb::{perturb_until_flip, Direction};
use attrib_core::eval::wilcoxon_signed_rank;
use attrib_core::netzoo::{build_network, random_image};
use attrib_core::{ops, Explainer, InputShape, Method, NetworkSpec, PerturbConfig, Tensor};
use attrib_core::eval::SaliencyMethod;
use attrib_core::netzoo::{synth_patch_dataset, PatchConfig, Split};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("conv2d");
    for (cin, cout, side) in [(1, 8, 16), (8, 16, 8), (16, 32, 4)] {
        let x = uniform(&mut rng, &[1, cin, side, side]);
        let k = uniform(&mut rng, &[cout, cin, 3, 3]);
        let b = uniform(&mut rng, &[cout]);
        group.bench_with_input(BenchmarkId::new("forward", format!("{cin}x{side}->{cout}")), &(), |bench, _| {
            bench.iter(|| ops::conv2d(black_box(&x), black_box(&k), Some(&b), 1, 1).unwrap())
        });
        let up = uniform(&mut rng, &[1, cout, side, side]);
        group.bench_with_input(BenchmarkId::new("backward", format!("{cin}x{side}->{cout}")), &(), |bench, _| {
            bench.iter(|| ops::conv2d_backward(black_box(&x), black_box(&k), 1, 1, black_box(&up)).unwrap())
        });
    }
    group.finish();
}

fn explain(c: &mut Criterion) {
    let spec = NetworkSpec::vgg_mini(InputShape::new(16, 16, 1), 4, true);
    let ck = build_network(&spec, 0).unwrap();
    let x = random_image(&mut ChaCha8Rng::seed_from_u64(1), spec.input);
    c.bench_function("explainer/vgg-mini-16", |b| b.iter(|| Explainer::predicted(&ck, black_box(&x)).unwrap()));
    let data = synth_patch_dataset(1, 8, PatchConfig::new(16, 4), Split::Test).unwrap();
    let ex = Explainer::predicted(&ck, &data.image(0)).unwrap();
    for name in ["gradient", "agg:1", "fullgrad:per-feature"] {
        let m: Method = name.parse().unwrap();
        c.bench_function(&format!("saliency/{name}"), |b| b.iter(|| m.saliency(&ck, &data, 0, &ex).unwrap()));
    }
}

fn perturb(c: &mut Criterion) {
    let spec = NetworkSpec::vgg_mini(InputShape::new(16, 16, 1), 4, true);
    let ck = build_network(&spec, 0).unwrap();
    let data = synth_patch_dataset(1, 8, PatchConfig::new(16, 4), Split::Test).unwrap();
    let x = data.image(0);
    let ex = Explainer::predicted(&ck, &x).unwrap();
    let s = Method::Gradient.saliency(&ck, &data, 0, &ex).unwrap();
    for direction in [Direction::LeastFirst, Direction::MostFirst] {
        let cfg = PerturbConfig::default().with_direction(direction);
        c.bench_function(&format!("perturb_until_flip/{direction:?}"), |b| {
            b.iter(|| perturb_until_flip(&ck, black_box(&x), &s, &cfg).unwrap())
        });
    }
}

fn wilcoxon(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut group = c.benchmark_group("wilcoxon");
    for n in [20, 200, 2000] {
        let d: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.4).collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &d, |b, d| {
            b.iter(|| wilcoxon_signed_rank(black_box(d)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, conv, explain, perturb, wilcoxon);
criterion_main!(benches);
