use candle_core::DType;
use criterion::{criterion_group, criterion_main, Criterion};
use eden_core::data::{synth_sequence, triplet_sample, SpriteSceneConfig};
use eden_core::diffusion::{euler_sample, DiTConfig, Dit};
use eden_core::evaluation::{psnr, ssim};
use eden_core::frame::frames_to_tensor;
use eden_core::{DatasetStats, Tokenizer, TokenizerConfig};

fn desk_tokenizer() -> TokenizerConfig {
    TokenizerConfig {
        patch_size: 8,
        hidden_dim: 64,
        n_blocks: 2,
        latent_dim: 16,
        heads: Some(4),
        native_resolution: [64, 64],
        ..Default::default()
    }
}

fn desk_dit() -> DiTConfig {
    DiTConfig {
        hidden_dim: 64,
        n_blocks: 2,
        heads: Some(4),
        latent_dim: 16,
        patch_size: 8,
        mlp_ratio: 4,
        native_resolution: [64, 64],
        difference_embedding: true,
    }
}

fn scene() -> SpriteSceneConfig {
    SpriteSceneConfig {
        height: 64,
        width: 64,
        seq_len: 5,
        max_interval: 2,
        ..Default::default()
    }
}

fn bench_tokenizer(c: &mut Criterion) {
    let seq = synth_sequence(&scene()).unwrap();
    let rec = triplet_sample(&seq, 0, 2, "bench").unwrap();
    let tok = Tokenizer::new(desk_tokenizer(), 0, DType::F32).unwrap();
    let dev = candle_core::Device::Cpu;
    let [i0, it, i1] =
        [&rec.i0, &rec.it, &rec.i1].map(|f| frames_to_tensor(&[f], DType::F32, &dev).unwrap());
    c.bench_function("tokenizer_encode_64x64", |b| {
        b.iter(|| tok.encode(&i0, &it, &i1).unwrap())
    });
    let post = tok.encode(&i0, &it, &i1).unwrap();
    c.bench_function("tokenizer_decode_64x64", |b| {
        b.iter(|| tok.decode(&post.mean, &i0, &i1).unwrap())
    });
}

fn bench_sampler(c: &mut Criterion) {
    let seq = synth_sequence(&scene()).unwrap();
    let rec = triplet_sample(&seq, 0, 2, "bench").unwrap();
    let dit = Dit::new(desk_dit(), 1, DType::F32).unwrap();
    let stats = DatasetStats::new(0.9, 0.05);
    let ctx = dit.frame_context(&rec.i0, &rec.i1, &stats).unwrap();
    let mut g = c.benchmark_group("euler_sample_64x64");
    for steps in [1usize, 2, 5] {
        g.bench_function(format!("{steps}_steps"), |b| {
            b.iter(|| euler_sample(&dit, &ctx, steps, 0, 1.0).unwrap())
        });
    }
    g.finish();
}

fn bench_metrics(c: &mut Criterion) {
    let seq = synth_sequence(&SpriteSceneConfig::default()).unwrap();
    c.bench_function("psnr_128x128", |b| {
        b.iter(|| psnr(&seq[0], &seq[1]).unwrap())
    });
    c.bench_function("ssim_128x128", |b| {
        b.iter(|| ssim(&seq[0], &seq[1]).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_tokenizer, bench_sampler, bench_metrics
}
criterion_main!(benches);
