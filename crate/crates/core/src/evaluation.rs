//! Reference metrics, CSV reports and the step / interval sweeps.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device};

use crate::data::{triplet_sample, TripletRecord};
use crate::diffusion::Interpolator;
use crate::error::{EdenError, Result};
use crate::frame::{frames_to_tensor, Frame};
use crate::losses::{perceptual_loss, scalar, PerceptualExtractor};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

pub const DEFAULT_SWEEP_STEPS: [usize; 6] = [0, 1, 2, 5, 20, 50];
pub const DEFAULT_SWEEP_INTERVALS: [usize; 3] = [1, 2, 4];

pub const CSV_HEADER: [&str; 7] = [
    "sample_id",
    "steps",
    "interval",
    "psnr",
    "ssim",
    "perceptual",
    "runtime_s",
];
pub const MEAN_ID: &str = "MEAN";

fn check_dims(a: &Frame, b: &Frame) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(EdenError::shape(b.dims(), a.dims()));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` for `[0, 1]` pixels, capped at [`PSNR_CAP`].
pub fn psnr(pred: &Frame, target: &Frame) -> Result<f64> {
    check_dims(pred, target)?;
    let mse = pred
        .pixels()
        .iter()
        .zip(target.pixels())
        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
        .sum::<f64>()
        / pred.pixels().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over the valid region of one channel.
fn filter_valid(img: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5) over valid
/// positions, averaged over positions and channels.
pub fn ssim(pred: &Frame, target: &Frame) -> Result<f64> {
    check_dims(pred, target)?;
    let (h, w) = pred.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(EdenError::Dimension(format!(
            "SSIM needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let g = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let a: Vec<f64> = (0..h * w)
            .map(|i| pred.pixels()[i * 3 + c] as f64)
            .collect();
        let b: Vec<f64> = (0..h * w)
            .map(|i| target.pixels()[i * 3 + c] as f64)
            .collect();
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mu_a = filter_valid(&a, h, w, &g);
        let mu_b = filter_valid(&b, h, w, &g);
        let e_aa = filter_valid(&prod(&a, &a), h, w, &g);
        let e_bb = filter_valid(&prod(&b, &b), h, w, &g);
        let e_ab = filter_valid(&prod(&a, &b), h, w, &g);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Perceptual distance through a user-supplied extractor; `None` without one.
pub fn perceptual_metric(
    pred: &Frame,
    target: &Frame,
    extractor: Option<&dyn PerceptualExtractor>,
) -> Result<Option<f64>> {
    let Some(ex) = extractor else {
        return Ok(None);
    };
    check_dims(pred, target)?;
    let p = frames_to_tensor(&[pred], DType::F64, &Device::Cpu)?;
    let t = frames_to_tensor(&[target], DType::F64, &Device::Cpu)?;
    Ok(Some(scalar(&perceptual_loss(&p, &t, ex)?)?))
}

/// One row of a report: a sample at one sweep-axis value, or an aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub sample_id: String,
    pub steps: Option<usize>,
    pub interval: Option<usize>,
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: Option<f64>,
    /// Wall-clock seconds per interpolated frame.
    pub runtime_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

fn opt_field<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn parse_opt<T: std::str::FromStr>(s: &str, line: usize) -> Result<Option<T>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| EdenError::Data(format!("report line {line}: cannot parse {s:?}")))
}

impl MetricReport {
    /// Arithmetic means per `(steps, interval)` value, in first-seen order.
    pub fn aggregates(&self) -> Vec<MetricRow> {
        let mut order = Vec::new();
        let mut groups: BTreeMap<(Option<usize>, Option<usize>), Vec<&MetricRow>> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.sample_id != MEAN_ID) {
            let key = (r.steps, r.interval);
            if !groups.contains_key(&key) {
                order.push(key);
            }
            groups.entry(key).or_default().push(r);
        }
        order
            .into_iter()
            .map(|key| {
                let rows = &groups[&key];
                let n = rows.len() as f64;
                let mean = |f: fn(&MetricRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
                let perceptual = rows
                    .iter()
                    .map(|r| r.perceptual)
                    .collect::<Option<Vec<f64>>>()
                    .map(|v| v.iter().sum::<f64>() / n);
                MetricRow {
                    sample_id: MEAN_ID.into(),
                    steps: key.0,
                    interval: key.1,
                    psnr: mean(|r| r.psnr),
                    ssim: mean(|r| r.ssim),
                    perceptual,
                    runtime_s: mean(|r| r.runtime_s),
                }
            })
            .collect()
    }

    pub fn mean_for(&self, steps: Option<usize>, interval: Option<usize>) -> Option<MetricRow> {
        self.aggregates()
            .into_iter()
            .find(|r| r.steps == steps && r.interval == interval)
    }

    /// Per-sample rows followed by the `MEAN` rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER)?;
        let samples = self.rows.iter().filter(|r| r.sample_id != MEAN_ID);
        for r in samples.chain(self.aggregates().iter()) {
            w.write_record([
                r.sample_id.clone(),
                opt_field(r.steps),
                opt_field(r.interval),
                r.psnr.to_string(),
                r.ssim.to_string(),
                opt_field(r.perceptual),
                r.runtime_s.to_string(),
            ])?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| EdenError::Data(format!("csv buffer: {e}")))?;
        String::from_utf8(bytes).map_err(|e| EdenError::Data(e.to_string()))
    }

    /// Parses a report, keeping `MEAN` rows as written.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != CSV_HEADER {
            return Err(EdenError::Data(format!(
                "unexpected report header {header:?}"
            )));
        }
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let num = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| EdenError::Data(format!("report line {line}: cannot parse {s:?}")))
            };
            rows.push(MetricRow {
                sample_id: rec[0].to_string(),
                steps: parse_opt(&rec[1], line)?,
                interval: parse_opt(&rec[2], line)?,
                psnr: num(&rec[3])?,
                ssim: num(&rec[4])?,
                perceptual: parse_opt(&rec[5], line)?,
                runtime_s: num(&rec[6])?,
            });
        }
        Ok(Self { rows })
    }

    pub fn written_means(&self) -> Vec<MetricRow> {
        self.rows
            .iter()
            .filter(|r| r.sample_id == MEAN_ID)
            .cloned()
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

pub fn sample_id(rec: &TripletRecord) -> String {
    format!("{}:{}", rec.source, rec.start)
}

/// Interpolates every triplet with `steps` Euler steps and scores it against
/// the true intermediate frame.
pub fn evaluate_triplets(
    model: &Interpolator,
    triplets: &[TripletRecord],
    steps: usize,
    seed: u64,
    extractor: Option<&dyn PerceptualExtractor>,
) -> Result<Vec<MetricRow>> {
    if triplets.is_empty() {
        return Err(EdenError::NoSamples("no samples to evaluate".into()));
    }
    triplets
        .iter()
        .map(|rec| {
            let start = Instant::now();
            let pred = model.interpolate(&rec.i0, &rec.i1, steps, seed)?;
            let runtime_s = start.elapsed().as_secs_f64();
            Ok(MetricRow {
                sample_id: sample_id(rec),
                steps: Some(steps),
                interval: Some(rec.interval),
                psnr: psnr(&pred, &rec.it)?,
                ssim: ssim(&pred, &rec.it)?,
                perceptual: perceptual_metric(&pred, &rec.it, extractor)?,
                runtime_s,
            })
        })
        .collect()
}

pub fn sweep_denoising_steps(
    model: &Interpolator,
    triplets: &[TripletRecord],
    steps: &[usize],
    seed: u64,
    extractor: Option<&dyn PerceptualExtractor>,
) -> Result<MetricReport> {
    if steps.is_empty() {
        return Err(EdenError::InvalidArgument("step list is empty".into()));
    }
    let mut rows = Vec::new();
    for &s in steps {
        rows.extend(evaluate_triplets(model, triplets, s, seed, extractor)?);
    }
    Ok(MetricReport { rows })
}

/// Triplets centred on the middle frame of each sequence: `(c - k, c, c + k)`.
pub fn centered_triplets(
    sequences: &[(String, Vec<Frame>)],
    k: usize,
) -> Result<Vec<TripletRecord>> {
    sequences
        .iter()
        .map(|(name, seq)| {
            let c = seq.len() / 2;
            if k == 0 || c < k || c + k >= seq.len() {
                return Err(EdenError::Data(format!(
                    "sequence {name} has {} frames, too short for interval {k}",
                    seq.len()
                )));
            }
            triplet_sample(seq, c - k, k, name)
        })
        .collect()
}

/// Evaluates the same middle frame at growing start/end spacing.
pub fn sweep_intervals(
    model: &Interpolator,
    sequences: &[(String, Vec<Frame>)],
    intervals: &[usize],
    steps: usize,
    seed: u64,
    extractor: Option<&dyn PerceptualExtractor>,
) -> Result<MetricReport> {
    if intervals.is_empty() {
        return Err(EdenError::InvalidArgument("interval list is empty".into()));
    }
    if sequences.is_empty() {
        return Err(EdenError::NoSamples("no sequences to evaluate".into()));
    }
    let mut rows = Vec::new();
    for &k in intervals {
        let triplets = centered_triplets(sequences, k)?;
        rows.extend(evaluate_triplets(model, &triplets, steps, seed, extractor)?);
    }
    Ok(MetricReport { rows })
}
