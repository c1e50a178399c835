use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scalcodec_core::conv::{conv2d_forward, transposed_conv2d_forward};
use scalcodec_core::pipelines::{EnhancementModel, Mode, PipelineConfig};
use scalcodec_core::range_coder::{decode_symbols, encode_latent, encode_symbols};
use scalcodec_core::{Array4, ConvGeometry, EntropyNet, EntropyNetConfig, ParamStore, Shape4};

fn random(shape: Shape4, rng: &mut ChaCha8Rng) -> Array4 {
    Array4::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

fn convolution(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("conv");
    for side in [16usize, 32, 64] {
        let x = random(Shape4::new(8, 32, side, side), &mut rng);
        let geo = ConvGeometry::new(32, 32, 5, 2, 2);
        let k: Vec<f32> = (0..geo.kernel_shape().len()).map(|_| rng.gen_range(-0.1..0.1)).collect();
        group.throughput(Throughput::Elements((8 * side * side) as u64));
        group.bench_with_input(BenchmarkId::new("strided 5x5", side), &x, |b, x| {
            b.iter(|| conv2d_forward(black_box(x), &geo, &k, None, None).unwrap())
        });
        let up = ConvGeometry::new(32, 32, 4, 2, 1);
        let ku: Vec<f32> = (0..up.kernel_shape().len()).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let small = random(Shape4::new(8, 32, side / 2, side / 2), &mut rng);
        group.bench_with_input(BenchmarkId::new("transposed 4x4", side), &small, |b, x| {
            b.iter(|| transposed_conv2d_forward(black_box(x), &up, &ku, None, None).unwrap())
        });
    }
    group.finish();
}

fn range_coding(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 16_384;
    let sigmas: Vec<f32> = (0..n).map(|_| rng.gen_range(0.11..20.0)).collect();
    let symbols: Vec<i32> = sigmas
        .iter()
        .map(|&s| (rng.gen_range(-2.0..2.0f32) * s).round() as i32)
        .collect();
    let (payload, _) = encode_symbols(&symbols, &sigmas).unwrap();
    let mut group = c.benchmark_group("range coder");
    group.throughput(Throughput::Elements(n as u64));
    group.bench_function("encode", |b| b.iter(|| encode_symbols(black_box(&symbols), &sigmas).unwrap()));
    group.bench_function("decode", |b| b.iter(|| decode_symbols(black_box(&payload), &sigmas).unwrap()));
    group.finish();
}

fn entropy_model(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let config = EntropyNetConfig {
        num_blocks: 2,
        kernel_size: 3,
        expansion_factor: 2,
        group_size: 4,
        channel_multiple: 1,
    };
    let mut store = ParamStore::new();
    let net = EntropyNet::new(&mut store, "em", 32, 0, config, &mut rng).unwrap();
    let latent = random(Shape4::new(1, 32, 4, 4), &mut rng);
    let mut group = c.benchmark_group("entropy model");
    group.bench_function("predict 32x4x4", |b| b.iter(|| net.predict(&store, black_box(&latent), None).unwrap()));
    group.sample_size(10);
    group.bench_function("sequential encode 32x4x4", |b| {
        b.iter(|| encode_latent(&net.bind(&store), black_box(&latent), None).unwrap())
    });
    let enh = EnhancementModel::new(&PipelineConfig::tiny(), Mode::Standalone, 4).unwrap();
    let image = Array4::from_fn(Shape4::new(1, 3, 64, 64), |_, c, y, x| ((x * 3 + y * 5 + c) % 17) as f32 / 16.0);
    group.bench_function("standalone evaluate 64x64", |b| b.iter(|| enh.evaluate(black_box(&image), None).unwrap()));
    group.finish();
}

criterion_group!(benches, convolution, range_coding, entropy_model);
criterion_main!(benches);
