use criterion::{black_box, criterion_group, criterion_main, Criterion};
use ifblend::freqkernels::{haar_dwt, haar_idwt, lowhigh_split, srgb_to_lab, HighPassMode};
use ifblend::losses_metrics::{psnr, ssim, LossConfig};
use ifblend::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(seed: u64, c: usize, side: usize) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([1, c, side, side], |_| r.gen_range(0.0..1.0))
}

fn wavelets(c: &mut Criterion) {
    let x = image(1, 3, 256);
    let bands = haar_dwt(&x).unwrap();
    c.bench_function("haar_dwt 3x256x256", |b| b.iter(|| haar_dwt(black_box(&x)).unwrap()));
    c.bench_function("haar_idwt 3x256x256", |b| b.iter(|| haar_idwt(black_box(&bands)).unwrap()));
}

fn pooling(c: &mut Criterion) {
    let x = image(2, 32, 128);
    c.bench_function("lowhigh_split 32x128x128 k3", |b| {
        b.iter(|| lowhigh_split(black_box(&x), 3, 1, HighPassMode::Maxpool).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let (x, y) = (image(3, 3, 256), image(4, 3, 256));
    let cfg = LossConfig::default();
    c.bench_function("psnr 3x256x256", |b| b.iter(|| psnr(black_box(&x), black_box(&y), 1.0).unwrap()));
    c.bench_function("ssim 3x256x256", |b| b.iter(|| ssim(black_box(&x), black_box(&y), &cfg).unwrap()));
    c.bench_function("srgb_to_lab 3x256x256", |b| b.iter(|| srgb_to_lab(black_box(&x)).unwrap()));
}

criterion_group!(benches, wavelets, pooling, metrics);
criterion_main!(benches);
