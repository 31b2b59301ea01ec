//! Acceptance checks. Runs every criterion in order, prints one PASS/FAIL line
//! each and exits non-zero if any fails. `ACCEPTANCE_ONLY=3,7` restricts the run.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use eden_core::checkpoint::Checkpoint;
use eden_core::data::{
    synth_sequence_indexed, triplet_sample, FixedTriplets, SequenceSampler, SpriteSceneConfig,
    TripletRecord, TripletSource,
};
use eden_core::diffusion::conditioning::difference_context;
use eden_core::diffusion::flow::{
    euler_integrate, flow_loss, forward_sample, forward_sample_batch, velocity_target,
};
use eden_core::diffusion::{DiTConfig, Dit, Interpolator, NoisedLatent};
use eden_core::evaluation::{psnr, sweep_denoising_steps};
use eden_core::frame::frames_to_tensor;
use eden_core::losses::{
    kl_penalty, scalar, tokenizer_total_loss, Discriminator, EdgePyramid, LossWeights,
};
use eden_core::nn::ParamStore;
use eden_core::seed;
use eden_core::tokenizer::{
    group_context, pool_tokens, temporal_sequence, upsample_tokens, PositionEmbedding,
};
use eden_core::training::{DitTrainer, Stage, TokenizerTrainer, TrainConfig};
use eden_core::{
    load_checkpoint, save_checkpoint, DatasetStats, Frame, LatentPosterior, TokenGrid, Tokenizer,
    TokenizerConfig,
};
use rand::Rng;

type Res<T> = Result<T, Box<dyn std::error::Error>>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Res<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

fn dev() -> Device {
    Device::Cpu
}

fn randn(shape: &[usize], seed_value: u64, dtype: DType) -> Tensor {
    let mut rng = seed::rng(seed_value, "test", &[]);
    eden_core::diffusion::flow::standard_normal(shape, &mut rng, dtype, &dev()).unwrap()
}

fn rand_frame(h: usize, w: usize, seed_value: u64) -> Frame {
    let mut rng = seed::rng(seed_value, "test-frame", &[]);
    Frame::from_fn(h, w, |_, _, _| rng.random_range(0.05..0.95)).unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    flat(a)
        .iter()
        .zip(flat(b))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn desk_tokenizer() -> TokenizerConfig {
    TokenizerConfig {
        patch_size: 8,
        hidden_dim: 64,
        n_blocks: 2,
        latent_dim: 16,
        heads: Some(4),
        mlp_ratio: 4,
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

fn desk_train(batch: usize, steps: u64) -> TrainConfig {
    let mut tc = TrainConfig::defaults(Stage::Stage1);
    tc.batch_size = batch;
    tc.total_steps = steps;
    tc.lr_start = 1e-3;
    tc.lr_min = 1e-6;
    tc.checkpoint_every = steps.max(1);
    tc.loss_weights.adversarial = 0.0;
    tc
}

fn scene(seed_value: u64) -> SpriteSceneConfig {
    SpriteSceneConfig {
        height: 64,
        width: 64,
        seed: seed_value,
        ..Default::default()
    }
}

/// Triplets `(i, i + k, i + 2k)` for each listed sequence index and start.
fn triplets(scene_seed: u64, seqs: &[u64], starts: &[usize], k: usize) -> Vec<TripletRecord> {
    let cfg = scene(scene_seed);
    let mut out = Vec::new();
    for &s in seqs {
        let frames = synth_sequence_indexed(&cfg, s).unwrap();
        for &i in starts {
            out.push(triplet_sample(&frames, i, k, &format!("seq{s}")).unwrap());
        }
    }
    out
}

fn c1_flow_oracle() -> Res<Outcome> {
    let start = Instant::now();
    let x0 = randn(&[2, 16, 8], 1, DType::F64);
    let eps = randn(&[2, 16, 8], 2, DType::F64);
    let v = velocity_target(&x0, &eps)?;
    let field = |_: &Tensor, _: f64| -> eden_core::Result<Tensor> { Ok(v.clone()) };
    let mut worst: f64 = 0.0;
    for steps in [1, 2, 50] {
        let x = euler_integrate(&eps, steps, &field)?;
        worst = worst.max(max_abs_diff(&x, &x0));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-6 && secs < 1.0,
        format!("max |x - x0| = {worst:.2e} over steps 1/2/50 in {secs:.3}s"),
    )
}

fn c2_forward_endpoints() -> Res<Outcome> {
    let x0 = randn(&[3, 4, 5], 3, DType::F64);
    let eps = randn(&[3, 4, 5], 4, DType::F64);
    let at0 = forward_sample(&x0, &eps, 0.0)?;
    let at1 = forward_sample(&x0, &eps, 1.0)?;
    let exact0 = flat(&at0.x_t) == flat(&x0);
    let exact1 = flat(&at1.x_t) == flat(&eps);
    let batch = forward_sample_batch(&x0, &eps, &[0.0, 1.0, 0.0])?;
    let exact_batch =
        flat(&batch.get(0)?) == flat(&x0.get(0)?) && flat(&batch.get(1)?) == flat(&eps.get(1)?);
    let loss = scalar(&flow_loss(&velocity_target(&x0, &eps)?, &x0, &eps)?)?;
    outcome(
        exact0 && exact1 && exact_batch && loss == 0.0,
        format!("t=0 exact {exact0}, t=1 exact {exact1}, batched {exact_batch}, loss of exact velocity {loss}"),
    )
}

fn c3_identity_at_init() -> Res<Outcome> {
    let cfg = DiTConfig {
        native_resolution: [32, 32],
        ..desk_dit()
    };
    let dit = Dit::new(cfg, 11, DType::F32)?;
    let (i0, i1) = (rand_frame(32, 32, 1), rand_frame(32, 32, 2));
    let stats = DatasetStats::new(0.9, 0.05);
    let ctx = dit.frame_context(&i0, &i1, &stats)?;
    let cond = dit.condition(&[0.3], &ctx)?;
    let x = randn(&[1, 4, 64], 5, DType::F32);
    let mut blocks_exact = true;
    for block in &dit.blocks {
        let y = block.forward(&x, &ctx.ctx0, &ctx.ctx1, &cond)?;
        blocks_exact &= flat(&y)
            .iter()
            .zip(flat(&x))
            .all(|(a, b)| a.to_bits() == b.to_bits());
    }
    let x_t = NoisedLatent {
        x_t: randn(&[4, 16], 6, DType::F32),
        t: 0.7,
    };
    let v = dit.predict_velocity(&x_t, &i0, &i1, Some(&stats))?;
    let zeros = flat(&v).iter().all(|&z| z == 0.0);
    outcome(
        blocks_exact && zeros,
        format!(
            "blocks return input bit-exactly: {blocks_exact}; initial velocity all zero: {zeros}"
        ),
    )
}

/// `(batch, n, 4, d)` grouping computed by index arithmetic on the flat grid.
fn group_oracle(vals: &[f64], b: usize, gh: usize, gw: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for bi in 0..b {
        for sy in 0..gh / 2 {
            for sx in 0..gw / 2 {
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * sy + dy) * gw + 2 * sx + dx;
                    let base = (bi * gh * gw + idx) * d;
                    out.extend_from_slice(&vals[base..base + d]);
                }
            }
        }
    }
    out
}

fn c4_pyramid_geometry() -> Res<Outcome> {
    let cfg = TokenizerConfig {
        patch_size: 16,
        hidden_dim: 16,
        n_blocks: 2,
        latent_dim: 4,
        heads: Some(2),
        mlp_ratio: 2,
        native_resolution: [256, 448],
        ..Default::default()
    };
    let tok = Tokenizer::new(cfg.clone(), 3, DType::F32)?;
    let mut notes = Vec::new();
    let mut ok = true;
    for (h, w) in [(64, 64), (64, 128), (256, 448)] {
        let frames: Vec<Frame> = (0..3).map(|i| rand_frame(h, w, 20 + i)).collect();
        let t: Vec<Tensor> = frames
            .iter()
            .map(|f| frames_to_tensor(&[f], DType::F32, &dev()).unwrap())
            .collect();
        let large = tok.encoder.patch_embed(&t[1])?;
        let small = pool_tokens(&large)?;
        let (m, n) = (large.count(), small.count());
        // the fusion attention refuses m != 4n, so a full encode/decode
        // exercises the relation in every encoder and decoder block
        let post = tok.encode(&t[0], &t[1], &t[2])?;
        let out = tok.decode(&post.mean, &t[0], &t[2])?;
        let shapes = post.mean.dims() == [1, n, 4] && out.dims() == t[1].dims();
        ok &= m == 4 * n && shapes;
        notes.push(format!("{h}x{w}: m={m} n={n}"));
    }

    let (b, gh, gw, d) = (2, 6, 8, 3);
    let vals: Vec<f64> = (0..b * gh * gw * d).map(|i| i as f64).collect();
    let grid = TokenGrid::new(Tensor::from_slice(&vals, (b, gh * gw, d), &dev())?, gh, gw)?;
    let grouped = flat(&group_context(&grid)?) == group_oracle(&vals, b, gh, gw, d);

    let small = TokenGrid::new(randn(&[2, 12, 5], 9, DType::F64), 3, 4)?;
    let round = pool_tokens(&upsample_tokens(&small)?)?;
    let pool_up = max_abs_diff(&round.tokens, &small.tokens) <= 1e-12;
    ok &= grouped && pool_up;
    outcome(
        ok,
        format!(
            "{}; group oracle {grouped}; pool(upsample) = id {pool_up}",
            notes.join(", ")
        ),
    )
}

fn c5_temporal_locality() -> Res<Outcome> {
    let cfg = TokenizerConfig {
        native_resolution: [32, 48],
        ..desk_tokenizer()
    };
    let tok = Tokenizer::new(cfg, 4, DType::F64)?;
    let temporal = &tok.encoder.blocks[0].temporal;
    let (n, d) = (6, 64);
    let stream = randn(&[1, n, d], 30, DType::F64);
    let ctx0 = randn(&[1, n, 4, d], 31, DType::F64);
    let ctx1 = randn(&[1, n, 4, d], 32, DType::F64);
    let base = flat(&temporal.forward(&stream, &ctx0, &ctx1)?);
    let mut local = true;
    for j in 0..n {
        let mut v = flat(&ctx0);
        for x in &mut v[j * 4 * d..(j + 1) * 4 * d] {
            *x += 0.5;
        }
        let bumped = Tensor::from_vec(v, (1, n, 4, d), &dev())?;
        let out = flat(&temporal.forward(&stream, &bumped, &ctx1)?);
        for i in 0..n {
            let changed = (0..d).any(|c| out[i * d + c] != base[i * d + c]);
            local &= changed == (i == j);
        }
    }
    let seq = temporal_sequence(&stream, &ctx0, &ctx1)?;
    let centre = flat(&seq.narrow(2, 4, 1)?.squeeze(2)?) == flat(&stream);
    let ends =
        flat(&seq.narrow(2, 0, 4)?) == flat(&ctx0) && flat(&seq.narrow(2, 5, 4)?) == flat(&ctx1);
    outcome(
        local && centre && ends && seq.dims() == [1, n, 9, d],
        format!("only token j moves when group j is perturbed: {local}; stream at index 4 of 9: {centre}; context order: {ends}"),
    )
}

/// Central-difference check of `loss` against autograd on `samples` random
/// scalar parameters of `store`; returns the worst relative error.
fn grad_check(
    store: &ParamStore,
    loss: &dyn Fn() -> eden_core::Result<Tensor>,
    samples: usize,
    rng_seed: u64,
    only: &dyn Fn(&str) -> bool,
) -> Res<(f64, usize)> {
    let grads = loss()?.backward()?;
    let names: Vec<String> = store.vars().keys().filter(|n| only(n)).cloned().collect();
    let mut rng = seed::rng(rng_seed, "grad-check", &[]);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let name = &names[rng.random_range(0..names.len())];
        let var = store.get(name).unwrap();
        let mut vals = store.flat_values(name)?;
        let i = rng.random_range(0..vals.len());
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => flat(g)[i],
            None => 0.0,
        };
        let orig = vals[i];
        vals[i] = orig + h;
        store.set_flat(name, &vals)?;
        let up = scalar(&loss()?)?;
        vals[i] = orig - h;
        store.set_flat(name, &vals)?;
        let down = scalar(&loss()?)?;
        vals[i] = orig;
        store.set_flat(name, &vals)?;
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok((worst, samples))
}

fn c6_gradient_checks() -> Res<Outcome> {
    let start = Instant::now();
    let cfg = TokenizerConfig {
        patch_size: 4,
        hidden_dim: 8,
        n_blocks: 1,
        latent_dim: 4,
        heads: Some(2),
        mlp_ratio: 2,
        native_resolution: [16, 16],
        ..Default::default()
    };
    let tok = Tokenizer::new(cfg, 5, DType::F64)?;
    let f: Vec<Tensor> = (0..3)
        .map(|i| frames_to_tensor(&[&rand_frame(16, 16, 40 + i)], DType::F64, &dev()).unwrap())
        .collect();
    let noise = randn(&[1, 4, 4], 44, DType::F64);
    let weights = LossWeights {
        adversarial: 0.0,
        ..Default::default()
    };
    let tok_loss = || -> eden_core::Result<Tensor> {
        let post = tok.encode(&f[0], &f[1], &f[2])?;
        let pred = tok.decode_raw(&post.reparameterize(&noise)?, &f[0], &f[2])?;
        Ok(tokenizer_total_loss(&pred, &f[1], &post, &weights, &EdgePyramid, None)?.total)
    };
    let (tok_err, tok_n) = grad_check(tok.store(), &tok_loss, 48, 1, &|_| true)?;

    let dcfg = DiTConfig {
        hidden_dim: 8,
        n_blocks: 1,
        heads: Some(2),
        latent_dim: 4,
        patch_size: 4,
        mlp_ratio: 2,
        native_resolution: [16, 16],
        difference_embedding: true,
    };
    let dit = Dit::new(dcfg, 6, DType::F64)?;
    // zero-initialized projections would hide most of the block from the check
    let mut rng = seed::rng(7, "randomize", &[]);
    dit.store().randomize_where(|_| true, 0.3, &mut rng)?;
    let x0 = randn(&[2, 4, 4], 45, DType::F64);
    let eps = randn(&[2, 4, 4], 46, DType::F64);
    let i0 = Tensor::cat(&[&f[0], &f[1]], 0)?;
    let i1 = Tensor::cat(&[&f[2], &f[0]], 0)?;
    let t = [0.25, 0.8];
    let dit_loss = || -> eden_core::Result<Tensor> {
        let ctx = dit.prepare_context(&i0, &i1, &[0.4, -1.1])?;
        let v = dit.velocity(&forward_sample_batch(&x0, &eps, &t)?, &t, &ctx)?;
        flow_loss(&v, &x0, &eps)
    };
    let (block_err, block_n) = grad_check(dit.store(), &dit_loss, 40, 2, &|n| {
        n.starts_with("blocks.0")
    })?;
    let (rest_err, rest_n) = grad_check(dit.store(), &dit_loss, 16, 3, &|n| {
        !n.starts_with("blocks.0")
    })?;
    let secs = start.elapsed().as_secs_f64();
    let worst = tok_err.max(block_err).max(rest_err);
    outcome(
        worst <= 1e-3 && secs < 300.0,
        format!(
            "tokenizer {tok_n} params max rel err {tok_err:.2e}; DiT block {block_n} params {block_err:.2e}, other {rest_n} params {rest_err:.2e}; {secs:.1}s"
        ),
    )
}

fn c7_loss_values() -> Res<Outcome> {
    let post = |m: f64, l: f64| {
        let ones = Tensor::ones((1, 4, 3), DType::F64, &dev()).unwrap();
        LatentPosterior::new((&ones * m).unwrap(), (&ones * l).unwrap(), 2, 2).unwrap()
    };
    let kl0 = scalar(&kl_penalty(&post(0.0, 0.0))?)?;
    let kl1 = scalar(&kl_penalty(&post(1.0, 0.0))?)?;
    let w = LossWeights::default();
    let defaults = (w.l1, w.perceptual, w.adversarial, w.kl) == (1.0, 1.0, 0.5, 1e-6);

    let pred = frames_to_tensor(&[&rand_frame(16, 16, 50)], DType::F64, &dev())?;
    let target = frames_to_tensor(&[&rand_frame(16, 16, 51)], DType::F64, &dev())?;
    let p = post(0.3, -0.2);
    let disc = Discriminator::new(1, DType::F64)?;
    let loss = tokenizer_total_loss(&pred, &target, &p, &w, &EdgePyramid, Some(&disc))?;
    let manual = loss.l1 + loss.perceptual + 0.5 * loss.generator + 1e-6 * loss.kl;
    let total = scalar(&loss.total)?;
    let applied = (total - manual).abs() <= 1e-12 && loss.generator != 0.0 && loss.kl > 0.0;
    outcome(
        kl0 == 0.0 && kl1 == 0.5 && defaults && applied,
        format!("kl(0,0) = {kl0}, kl(1,0) = {kl1}; weights (1, 1, 0.5, 1e-6): {defaults}; total {total:.12} vs weighted sum {manual:.12}"),
    )
}

fn c8_tokenizer_overfit() -> Res<Outcome> {
    let start = Instant::now();
    let trip = triplets(3, &[0], &[0, 2, 4, 6], 2);
    let src = FixedTriplets(trip.clone());
    let mut trainer = TokenizerTrainer::new(desk_tokenizer(), desk_train(4, 2000), 0, DType::F32)?;
    trainer.run(&src, |_| Ok(()), |_| Ok(()))?;
    let tok = &trainer.tokenizer;
    let (mut l1, mut psnrs) = (0.0, Vec::new());
    for r in &trip {
        let post = tok.encode_frames(&r.i0, &r.it, &r.i1)?;
        let rec = tok.decode_frames(&post.mean, &r.i0, &r.i1)?;
        let n = rec.pixels().len() as f64;
        l1 += rec
            .pixels()
            .iter()
            .zip(r.it.pixels())
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / n;
        psnrs.push(psnr(&rec, &r.it)?);
    }
    l1 /= trip.len() as f64;
    let mean = psnrs.iter().sum::<f64>() / psnrs.len() as f64;
    let min = psnrs.iter().cloned().fold(f64::INFINITY, f64::min);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        l1 <= 0.05 && mean >= 26.0 && secs <= 1200.0,
        format!("2000 steps: L1 {l1:.4}, PSNR mean {mean:.2} dB (min {min:.2}) in {secs:.0}s"),
    )
}

struct EndToEnd {
    trainer: DitTrainer,
    triplets: Vec<TripletRecord>,
    psnr: Vec<(usize, f64)>,
    secs: f64,
}

fn end_to_end() -> &'static EndToEnd {
    static FIXTURE: OnceLock<EndToEnd> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let start = Instant::now();
        let trip = triplets(5, &[0, 1], &[0, 3, 6, 9], 2);
        let src = FixedTriplets(trip.clone());
        let mut tok =
            TokenizerTrainer::new(desk_tokenizer(), desk_train(8, 3000), 0, DType::F32).unwrap();
        tok.run(&src, |_| Ok(()), |_| Ok(())).unwrap();
        let tok_ckpt = tok.checkpoints().unwrap().0;
        let mut dit = DitTrainer::new(
            desk_dit(),
            &tok_ckpt,
            &src,
            desk_train(8, 3000),
            0,
            DType::F32,
        )
        .unwrap();
        dit.run(&src, |_| Ok(()), |_| Ok(())).unwrap();
        let model =
            Interpolator::from_checkpoints(&tok_ckpt, &dit.checkpoint().unwrap(), DType::F32)
                .unwrap();
        let steps = [0, 1, 2, 5];
        let report = sweep_denoising_steps(&model, &trip, &steps, 7, None).unwrap();
        let psnr = steps
            .iter()
            .map(|&s| (s, report.mean_for(Some(s), Some(2)).unwrap().psnr))
            .collect();
        EndToEnd {
            trainer: dit,
            triplets: trip,
            psnr,
            secs: start.elapsed().as_secs_f64(),
        }
    })
}

fn c9_step_sweep() -> Res<Outcome> {
    let e = end_to_end();
    let at = |s: usize| e.psnr.iter().find(|p| p.0 == s).unwrap().1;
    let gain = at(2) - at(0);
    let flat_tail = (at(2) - at(5)).abs();
    let table: Vec<String> = e.psnr.iter().map(|(s, p)| format!("{s}: {p:.2}")).collect();
    outcome(
        gain >= 10.0 && flat_tail <= 1.0 && e.secs <= 2700.0,
        format!(
            "PSNR by steps [{}] dB; 2 vs 0 +{gain:.2} dB, |2 - 5| {flat_tail:.2} dB; {:.0}s",
            table.join(", "),
            e.secs
        ),
    )
}

fn c10_difference_context() -> Res<Outcome> {
    let stats = DatasetStats::new(0.8, 0.07);
    let mut symmetric = true;
    for s in 0..5 {
        let (a, b) = (rand_frame(16, 24, 60 + s), rand_frame(16, 24, 70 + s));
        symmetric &= difference_context(&a, &b, &stats)? == difference_context(&b, &a, &stats)?;
    }
    let a = rand_frame(16, 24, 80);
    let same = difference_context(&a, &a, &stats)?;
    let want = (1.0 - 0.8) / 0.07;
    let identical = (same - want).abs() <= 1e-9;

    let e = end_to_end();
    let diffs = e.trainer.difference_contexts(&e.triplets)?;
    let mut shuffled = diffs.clone();
    shuffled.rotate_left(1);
    let true_loss = e.trainer.evaluate_loss(&e.triplets, None)?;
    let shuffled_loss = e.trainer.evaluate_loss(&e.triplets, Some(&shuffled))?;
    outcome(
        symmetric && identical && shuffled_loss > true_loss,
        format!(
            "symmetric {symmetric}; identical frames {same:.6} vs {want:.6}; flow loss {true_loss:.5} -> {shuffled_loss:.5} with shuffled contexts"
        ),
    )
}

fn c11_determinism() -> Res<Outcome> {
    let tmp = tempfile::tempdir()?;
    let cfg = SpriteSceneConfig {
        height: 32,
        width: 32,
        seq_len: 11,
        max_interval: 5,
        seed: 9,
        ..Default::default()
    };
    let seqs: Vec<(String, Vec<Frame>)> = (0..2)
        .map(|i| (format!("s{i}"), synth_sequence_indexed(&cfg, i).unwrap()))
        .collect();
    let sampler = SequenceSampler::new(seqs, vec![1, 2, 3], vec![(32, 32), (16, 32)], 16)?;
    let tok_cfg = TokenizerConfig {
        hidden_dim: 32,
        heads: Some(2),
        native_resolution: [32, 32],
        ..desk_tokenizer()
    };
    let mut tc = desk_train(2, 10);
    tc.loss_weights = LossWeights::default();

    let tok_run = || -> Res<(Vec<u64>, TokenizerTrainer)> {
        let mut t = TokenizerTrainer::new(tok_cfg.clone(), tc.clone(), 17, DType::F32)?;
        let mut losses = Vec::new();
        t.run(
            &sampler,
            |r| {
                let _: () = losses.push(r.get("total").unwrap().to_bits());
                Ok(())
            },
            |_| Ok(()),
        )?;
        Ok((losses, t))
    };
    let (a, tok_a) = tok_run()?;
    let (b, _) = tok_run()?;
    let tok_same = a == b && a.len() == 10;

    let tok_ckpt = tok_a.checkpoints()?.0;
    let dit_cfg = DiTConfig {
        hidden_dim: 32,
        heads: Some(2),
        native_resolution: [32, 32],
        ..desk_dit()
    };
    let dit_run = || -> Res<(Vec<u64>, DitTrainer)> {
        let mut t = DitTrainer::new(
            dit_cfg.clone(),
            &tok_ckpt,
            &sampler,
            tc.clone(),
            17,
            DType::F32,
        )?;
        let mut losses = Vec::new();
        t.run(
            &sampler,
            |r| {
                let _: () = losses.push(r.get("flow").unwrap().to_bits());
                Ok(())
            },
            |_| Ok(()),
        )?;
        Ok((losses, t))
    };
    let (a, dit_a) = dit_run()?;
    let (b, _) = dit_run()?;
    let dit_same = a == b && a.len() == 10;

    // checkpoint bytes survive save -> load -> save and a model rebuild
    let dit_ckpt = dit_a.checkpoint()?;
    let (mut files_same, mut bytes_same) = (true, true);
    for (name, ckpt) in [("tok", &tok_ckpt), ("dit", &dit_ckpt)] {
        let p1 = tmp.path().join(format!("{name}1.ckpt"));
        let p2 = tmp.path().join(format!("{name}2.ckpt"));
        save_checkpoint(ckpt, &p1)?;
        save_checkpoint(&load_checkpoint(&p1)?, &p2)?;
        files_same &= std::fs::read(&p1)? == std::fs::read(&p2)?;
        bytes_same &= Checkpoint::from_bytes(&ckpt.to_bytes()?)?.to_bytes()? == ckpt.to_bytes()?;
    }
    let rebuilt = Tokenizer::from_checkpoint(&tok_ckpt, DType::F32)?
        .to_checkpoint(tok_ckpt.stats, tok_ckpt.step)?;
    let params_same = rebuilt.params == tok_ckpt.model_params();

    let rec = &sampler.enumerate()?[3];
    let mut pngs = Vec::new();
    for i in 0..2 {
        let model = Interpolator::from_checkpoints(&tok_ckpt, &dit_ckpt, DType::F32)?;
        let out = tmp.path().join(format!("mid{i}.png"));
        model
            .interpolate(&rec.i0, &rec.i1, 2, 123)?
            .save_png(&out)?;
        pngs.push(std::fs::read(out)?);
    }
    let interp_same = pngs[0] == pngs[1];
    outcome(
        tok_same && dit_same && files_same && bytes_same && params_same && interp_same,
        format!(
            "first 10 losses identical: tokenizer {tok_same}, DiT {dit_same}; checkpoint save/load/save {files_same}, bytes {bytes_same}, model rebuild {params_same}; interpolate bytes {interp_same}"
        ),
    )
}

fn c12_position_interpolation() -> Res<Outcome> {
    let vals: Vec<f64> = (0..2 * 3 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
    let pe = PositionEmbedding::from_table(Tensor::from_slice(&vals, (2, 3, 4), &dev())?)?;
    let identity = flat(&pe.interpolate(2, 3)?.table().clone()) == vals;

    let (a, b) = ([0.3, -1.2, 2.5], [1.1, 0.4, -0.7]);
    let col =
        PositionEmbedding::from_table(Tensor::from_slice(&[a, b].concat(), (2, 1, 3), &dev())?)?;
    let got = flat(col.interpolate(3, 1)?.table());
    let mut want = a.to_vec();
    want.extend((0..3).map(|c| 0.5 * a[c] + 0.5 * b[c]));
    want.extend_from_slice(&b);
    let err = got
        .iter()
        .zip(&want)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    outcome(
        identity && err <= 1e-12 && got.len() == 9,
        format!("native size identity {identity}; 2x1 -> 3x1 max err {err:.1e}"),
    )
}

type Check = fn() -> Res<Outcome>;

const CRITERIA: [(u32, &str, Check); 12] = [
    (1, "rectified-flow oracle", c1_flow_oracle),
    (2, "forward-process endpoints", c2_forward_endpoints),
    (3, "identity at init", c3_identity_at_init),
    (4, "pyramid fusion geometry", c4_pyramid_geometry),
    (5, "temporal-attention locality", c5_temporal_locality),
    (6, "gradient checks", c6_gradient_checks),
    (7, "loss unit values", c7_loss_values),
    (8, "tokenizer overfit", c8_tokenizer_overfit),
    (9, "end-to-end overfit and step sweep", c9_step_sweep),
    (10, "difference-context contracts", c10_difference_context),
    (11, "persistence and determinism", c11_determinism),
    (
        12,
        "position-embedding interpolation",
        c12_position_interpolation,
    ),
];

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    // written straight to stdout so the lines survive output capture
    let mut stdout = std::io::stdout();
    let mut failed = 0;
    for (n, name, check) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let line = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(Ok(o)) if o.pass => format!("PASS criterion {n:>2} ({name}): {}", o.detail),
            Ok(Ok(o)) => format!("FAIL criterion {n:>2} ({name}): {}", o.detail),
            Ok(Err(e)) => format!("FAIL criterion {n:>2} ({name}): error: {e}"),
            Err(_) => format!("FAIL criterion {n:>2} ({name}): panicked"),
        };
        if line.starts_with("FAIL") {
            failed += 1;
        }
        writeln!(stdout, "{line}").unwrap();
        stdout.flush().unwrap();
    }
    if failed > 0 {
        writeln!(stdout, "{failed} acceptance criteria failed").unwrap();
        std::process::exit(1);
    }
}
