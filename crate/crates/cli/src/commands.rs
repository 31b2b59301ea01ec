use std::cell::RefCell;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use eden_core::config::RunConfig;
use eden_core::data::{
    load_triplets, read_triplet_list, triplet_sample, write_frame_dir, write_triplet_list,
    TripletEntry, TripletRecord,
};
use eden_core::diffusion::Interpolator;
use eden_core::evaluation::{
    evaluate_triplets, sweep_denoising_steps, sweep_intervals, MetricReport,
};
use eden_core::training::{
    append_loss_log, DitTrainer, LossRecord, Stage, TokenizerTrainer, TrainConfig,
};
use eden_core::{load_checkpoint, save_checkpoint, EdenError, Frame, Result};

use crate::{Command, ModelCkpts, OutDir, Overrides};

const DTYPE: DType = DType::F32;

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config, out } => gen_data(&config, &out),
        Command::TrainTokenizer {
            config,
            stage,
            resume,
            init,
            overrides,
            out,
        } => train_tokenizer(
            &config,
            Stage::from_number(stage)?,
            resume,
            init,
            &overrides,
            &out,
        ),
        Command::TrainDit {
            config,
            tokenizer_ckpt,
            stage,
            resume,
            init,
            overrides,
            out,
        } => train_dit(
            &config,
            &tokenizer_ckpt,
            Stage::from_number(stage)?,
            resume,
            init,
            &overrides,
            &out,
        ),
        Command::Interpolate {
            ckpts,
            i0,
            i1,
            steps,
            seed,
            out,
        } => interpolate(&ckpts, &i0, &i1, steps, seed, out),
        Command::Eval {
            config,
            ckpts,
            triplets,
            steps,
            report,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let model = load_model(&ckpts)?;
            let samples = read_samples(&triplets)?;
            let steps = steps.unwrap_or(cfg.eval.denoise_steps);
            let rows = evaluate_triplets(&model, &samples, steps, cfg.eval.seed, None)?;
            finish_report(MetricReport { rows }, report, &out, &cfg, "eval.csv")
        }
        Command::SweepSteps {
            config,
            ckpts,
            triplets,
            steps_list,
            report,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let model = load_model(&ckpts)?;
            let samples = read_samples(&triplets)?;
            let steps = steps_list.unwrap_or_else(|| cfg.eval.steps.clone());
            let r = sweep_denoising_steps(&model, &samples, &steps, cfg.eval.seed, None)?;
            finish_report(r, report, &out, &cfg, "sweep_steps.csv")
        }
        Command::SweepIntervals {
            config,
            ckpts,
            intervals,
            steps,
            report,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let model = load_model(&ckpts)?;
            let sequences = cfg.data.load_sequences()?;
            let intervals = intervals.unwrap_or_else(|| cfg.eval.intervals.clone());
            let steps = steps.unwrap_or(cfg.eval.denoise_steps);
            let r = sweep_intervals(&model, &sequences, &intervals, steps, cfg.eval.seed, None)?;
            finish_report(r, report, &out, &cfg, "sweep_intervals.csv")
        }
    }
}

fn output_dir(out: &OutDir, cfg: &RunConfig) -> Result<PathBuf> {
    out.out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| {
            EdenError::InvalidArgument(
                "no output directory: pass --out, set EDEN_OUTPUT_DIR or output_dir in the config"
                    .into(),
            )
        })
}

fn gen_data(config: &Path, out: &OutDir) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let dir = output_dir(out, &cfg)?;
    fs::create_dir_all(&dir)?;
    let sequences = cfg.data.load_sequences()?;
    let intervals = &cfg.train.tokenizer.stage1.intervals;
    let mut entries = Vec::new();
    let mut triplets = Vec::new();
    for (i, (name, frames)) in sequences.iter().enumerate() {
        let seq_dir = match &cfg.data.synthetic {
            Some(_) => {
                let d = dir.join("sequences").join(name);
                write_frame_dir(&d, frames)?;
                d
            }
            None => cfg.data.frame_dirs[i].clone(),
        };
        for &k in intervals {
            for start in 0..frames.len().saturating_sub(2 * k) {
                triplets.push(triplet_sample(frames, start, k, name)?);
                entries.push(TripletEntry {
                    dir: seq_dir.clone(),
                    start,
                    mid: start + k,
                    end: start + 2 * k,
                });
            }
        }
    }
    let stats = eden_core::data::compute_dataset_stats(&triplets)?;
    write_triplet_list(&dir.join("triplets.txt"), &entries)?;
    fs::write(
        dir.join("stats.json"),
        serde_json::to_string_pretty(&stats)? + "\n",
    )?;
    log::info!(
        "wrote {} sequences and {} triplets to {} (sim_mean {:.6}, sim_std {:.6})",
        sequences.len(),
        entries.len(),
        dir.display(),
        stats.sim_mean,
        stats.sim_std
    );
    Ok(())
}

fn apply_overrides(mut tc: TrainConfig, o: &Overrides) -> TrainConfig {
    if let Some(s) = o.steps {
        tc.total_steps = s;
    }
    if let Some(b) = o.batch_size {
        tc.batch_size = b;
    }
    if let Some(s) = o.seed {
        tc.seed = Some(s);
    }
    tc
}

fn stage_dir(root: &Path, model: &str, stage: Stage) -> PathBuf {
    root.join(model).join(stage.to_string())
}

fn required(path: PathBuf, what: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(EdenError::StageOrder(format!(
            "stage 2 needs a stage-1 {what} checkpoint, but {} does not exist; run --stage 1 first",
            path.display()
        )))
    }
}

/// Buffers loss rows and flushes them to the log whenever a checkpoint is written.
struct LossLog {
    path: PathBuf,
    pending: RefCell<Vec<LossRecord>>,
}

impl LossLog {
    fn new(path: PathBuf, fresh: bool) -> Result<Self> {
        if fresh && path.exists() {
            fs::remove_file(&path)?;
        }
        Ok(Self {
            path,
            pending: RefCell::new(Vec::new()),
        })
    }

    fn push(&self, rec: &LossRecord) -> Result<()> {
        self.pending.borrow_mut().push(rec.clone());
        Ok(())
    }

    fn flush(&self) -> Result<()> {
        let rows: Vec<LossRecord> = self.pending.borrow_mut().drain(..).collect();
        if let Some(last) = rows.last() {
            let summary: Vec<String> = last
                .values
                .iter()
                .map(|(k, v)| format!("{k} {v:.5}"))
                .collect();
            log::info!(
                "step {} lr {:.3e} {}",
                last.step + 1,
                last.lr,
                summary.join(" ")
            );
        }
        append_loss_log(&self.path, &rows)
    }
}

fn train_tokenizer(
    config: &Path,
    stage: Stage,
    resume: Option<PathBuf>,
    init: Option<PathBuf>,
    overrides: &Overrides,
    out: &OutDir,
) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let root = output_dir(out, &cfg)?;
    let tc = apply_overrides(cfg.train.tokenizer.get(stage).clone(), overrides);
    let seed = overrides.seed.unwrap_or(cfg.seed);
    let dir = stage_dir(&root, "tokenizer", stage);
    fs::create_dir_all(&dir)?;
    let mut trainer = match (&resume, stage) {
        (Some(p), _) => {
            let tok = load_checkpoint(p)?;
            let disc = load_checkpoint(&p.with_file_name("discriminator.ckpt"))?;
            TokenizerTrainer::resume(&tok, &disc, tc.clone(), DTYPE)?
        }
        (None, Stage::Stage1) => {
            TokenizerTrainer::new(cfg.tokenizer.clone(), tc.clone(), seed, DTYPE)?
        }
        (None, Stage::Stage2) => {
            let path = required(
                init.unwrap_or_else(|| {
                    stage_dir(&root, "tokenizer", Stage::Stage1).join("tokenizer.ckpt")
                }),
                "tokenizer",
            )?;
            let tok = load_checkpoint(&path)?;
            let disc = load_checkpoint(&path.with_file_name("discriminator.ckpt"))?;
            TokenizerTrainer::from_stage1(&tok, &disc, tc.clone(), seed, DTYPE)?
        }
    };
    let sampler = cfg.sampler(&tc)?;
    let log = LossLog::new(dir.join("loss.csv"), resume.is_none())?;
    let start = trainer.step();
    log::info!(
        "training tokenizer {stage} from step {} to {} ({} parameters)",
        trainer.step(),
        tc.total_steps,
        trainer.tokenizer.store().num_scalars()
    );
    trainer.run(
        &sampler,
        |r| log.push(r),
        |t| {
            let (tok, disc) = t.checkpoints()?;
            save_checkpoint(&tok, &dir.join("tokenizer.ckpt"))?;
            save_checkpoint(&disc, &dir.join("discriminator.ckpt"))?;
            log.flush()
        },
    )?;
    log.flush()?;
    if trainer.step() == start {
        let (tok, disc) = trainer.checkpoints()?;
        save_checkpoint(&tok, &dir.join("tokenizer.ckpt"))?;
        save_checkpoint(&disc, &dir.join("discriminator.ckpt"))?;
    }
    println!("{}", dir.join("tokenizer.ckpt").display());
    Ok(())
}

fn train_dit(
    config: &Path,
    tokenizer_ckpt: &Path,
    stage: Stage,
    resume: Option<PathBuf>,
    init: Option<PathBuf>,
    overrides: &Overrides,
    out: &OutDir,
) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let root = output_dir(out, &cfg)?;
    let tc = apply_overrides(cfg.train.dit.get(stage).clone(), overrides);
    let seed = overrides.seed.unwrap_or(cfg.seed);
    let dir = stage_dir(&root, "dit", stage);
    fs::create_dir_all(&dir)?;
    let tok = load_checkpoint(tokenizer_ckpt)?;
    let sampler = cfg.sampler(&tc)?;
    let mut trainer = match (&resume, stage) {
        (Some(p), _) => DitTrainer::resume(&load_checkpoint(p)?, &tok, tc.clone(), DTYPE)?,
        (None, Stage::Stage1) => {
            DitTrainer::new(cfg.dit.clone(), &tok, &sampler, tc.clone(), seed, DTYPE)?
        }
        (None, Stage::Stage2) => {
            let path = required(
                init.unwrap_or_else(|| stage_dir(&root, "dit", Stage::Stage1).join("dit.ckpt")),
                "diffusion",
            )?;
            DitTrainer::from_stage1(&load_checkpoint(&path)?, &tok, tc.clone(), seed, DTYPE)?
        }
    };
    let log = LossLog::new(dir.join("loss.csv"), resume.is_none())?;
    let start = trainer.step();
    log::info!(
        "training diffusion model {stage} from step {} to {} (latent_std {:.4})",
        trainer.step(),
        tc.total_steps,
        trainer.stats().latent_std()?
    );
    trainer.run(
        &sampler,
        |r| log.push(r),
        |t| {
            save_checkpoint(&t.checkpoint()?, &dir.join("dit.ckpt"))?;
            log.flush()
        },
    )?;
    log.flush()?;
    if trainer.step() == start {
        save_checkpoint(&trainer.checkpoint()?, &dir.join("dit.ckpt"))?;
    }
    println!("{}", dir.join("dit.ckpt").display());
    Ok(())
}

fn load_model(ckpts: &ModelCkpts) -> Result<Interpolator> {
    let tok = load_checkpoint(&ckpts.tokenizer_ckpt)?;
    let dit = load_checkpoint(&ckpts.dit_ckpt)?;
    Interpolator::from_checkpoints(&tok, &dit, DTYPE)
}

fn interpolate(
    ckpts: &ModelCkpts,
    i0: &Path,
    i1: &Path,
    steps: usize,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<()> {
    let out = match out {
        Some(p) => p,
        None => std::env::var_os("EDEN_OUTPUT_DIR")
            .map(|d| PathBuf::from(d).join("interpolated.png"))
            .ok_or_else(|| {
                EdenError::InvalidArgument("pass --out or set EDEN_OUTPUT_DIR".into())
            })?,
    };
    let model = load_model(ckpts)?;
    let f0 = Frame::load_png(i0)?;
    let f1 = Frame::load_png(i1)?;
    let mid = model.interpolate(&f0, &f1, steps, seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    mid.save_png(&out)?;
    println!("{}", out.display());
    Ok(())
}

fn read_samples(list: &Path) -> Result<Vec<TripletRecord>> {
    let entries = read_triplet_list(list)?;
    if entries.is_empty() {
        return Err(EdenError::NoSamples(format!(
            "triplet list {} is empty",
            list.display()
        )));
    }
    load_triplets(&entries)
}

fn finish_report(
    report: MetricReport,
    path: Option<PathBuf>,
    out: &OutDir,
    cfg: &RunConfig,
    default: &str,
) -> Result<()> {
    let path = match path {
        Some(p) => p,
        None => output_dir(out, cfg)?.join(default),
    };
    report.write(&path)?;
    for m in report.aggregates() {
        log::info!(
            "steps {:?} interval {:?}: psnr {:.3} ssim {:.4} runtime {:.4}s",
            m.steps,
            m.interval,
            m.psnr,
            m.ssim,
            m.runtime_s
        );
    }
    println!("{}", path.display());
    Ok(())
}
