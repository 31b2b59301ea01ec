//! Frame sequences, triplet sampling and corpus statistics.

mod synth;

pub use synth::{
    render_frame, synth_sequence, synth_sequence_indexed, Background, ShapeKind, Sprite,
    SpriteSceneConfig, Trajectory,
};

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::checkpoint::DatasetStats;
use crate::diffusion::cosine_similarity;
use crate::error::{EdenError, Result};
use crate::frame::Frame;
use crate::seed;

/// Start, intermediate and end frames at spacing `interval`.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletRecord {
    pub i0: Frame,
    pub it: Frame,
    pub i1: Frame,
    pub interval: usize,
    pub source: String,
    /// Index of `i0` in its source sequence.
    pub start: usize,
    /// Crop origin `(top, left)` relative to the source frames.
    pub origin: (usize, usize),
}

impl TripletRecord {
    pub fn dims(&self) -> (usize, usize) {
        self.i0.dims()
    }

    pub fn validate(&self) -> Result<()> {
        if self.it.dims() != self.i0.dims() || self.i1.dims() != self.i0.dims() {
            return Err(EdenError::Data(format!(
                "triplet {}@{} has mixed resolutions",
                self.source, self.start
            )));
        }
        Ok(())
    }
}

/// Frames `(i, i + k, i + 2k)` of `sequence`.
pub fn triplet_sample(
    sequence: &[Frame],
    i: usize,
    k: usize,
    source: &str,
) -> Result<TripletRecord> {
    if k == 0 {
        return Err(EdenError::InvalidArgument(
            "triplet interval must be at least 1".into(),
        ));
    }
    if i + 2 * k >= sequence.len() {
        return Err(EdenError::InvalidArgument(format!(
            "triplet ({i}, {}, {}) out of range for a {}-frame sequence",
            i + k,
            i + 2 * k,
            sequence.len()
        )));
    }
    let rec = TripletRecord {
        i0: sequence[i].clone(),
        it: sequence[i + k].clone(),
        i1: sequence[i + 2 * k].clone(),
        interval: k,
        source: source.to_string(),
        start: i,
        origin: (0, 0),
    };
    rec.validate()?;
    Ok(rec)
}

/// Same spatial crop of all three frames. The target size must divide by
/// `multiple` (twice the patch size for the tokenizer).
pub fn multi_res_crop(
    rec: &TripletRecord,
    height: usize,
    width: usize,
    origin: (usize, usize),
    multiple: usize,
) -> Result<TripletRecord> {
    if multiple == 0
        || !height.is_multiple_of(multiple)
        || !width.is_multiple_of(multiple)
        || height == 0
        || width == 0
    {
        return Err(EdenError::Dimension(format!(
            "crop {height}x{width} is not a positive multiple of {multiple}"
        )));
    }
    let (top, left) = origin;
    let (oy, ox) = rec.origin;
    Ok(TripletRecord {
        i0: rec.i0.crop(top, left, height, width)?,
        it: rec.it.crop(top, left, height, width)?,
        i1: rec.i1.crop(top, left, height, width)?,
        interval: rec.interval,
        source: rec.source.clone(),
        start: rec.start,
        origin: (oy + top, ox + left),
    })
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.png")
}

fn frame_index(name: &str) -> Option<usize> {
    let digits = name.strip_prefix("frame_")?.strip_suffix(".png")?;
    if digits.len() != 6 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

/// Loads `frame_000000.png, frame_000001.png, ...` in index order. Other
/// files in the directory are ignored.
pub fn ingest_frame_dir(path: &Path) -> Result<Vec<Frame>> {
    let mut indices = Vec::new();
    for entry in fs::read_dir(path)? {
        let entry = entry?;
        if let Some(i) = entry.file_name().to_str().and_then(frame_index) {
            indices.push(i);
        }
    }
    if indices.is_empty() {
        return Err(EdenError::Data(format!(
            "no frames found in {}",
            path.display()
        )));
    }
    indices.sort_unstable();
    for (expected, &i) in indices.iter().enumerate() {
        if i != expected {
            return Err(EdenError::Data(format!(
                "frame indices in {} are not contiguous: missing {}",
                path.display(),
                frame_file_name(expected)
            )));
        }
    }
    let mut frames: Vec<Frame> = Vec::with_capacity(indices.len());
    for i in indices {
        let f = Frame::load_png(&path.join(frame_file_name(i)))?;
        if let Some(first) = frames.first() {
            if first.dims() != f.dims() {
                return Err(EdenError::Data(format!(
                    "{} is {:?} but earlier frames are {:?}",
                    frame_file_name(i),
                    f.dims(),
                    first.dims()
                )));
            }
        }
        frames.push(f);
    }
    Ok(frames)
}

/// Writes `frames` using the naming convention read by [`ingest_frame_dir`].
pub fn write_frame_dir(path: &Path, frames: &[Frame]) -> Result<()> {
    fs::create_dir_all(path)?;
    for (i, f) in frames.iter().enumerate() {
        f.save_png(&path.join(frame_file_name(i)))?;
    }
    Ok(())
}

/// One line of a triplet list file: `dir start mid end`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletEntry {
    pub dir: PathBuf,
    pub start: usize,
    pub mid: usize,
    pub end: usize,
}

impl TripletEntry {
    pub fn interval(&self) -> usize {
        self.mid - self.start
    }
}

/// Parses a triplet list. Blank lines and `#` comments are skipped; relative
/// directories are resolved against `base`.
pub fn parse_triplet_list(text: &str, base: &Path) -> Result<Vec<TripletEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: &str| EdenError::Data(format!("triplet list line {}: {msg}", n + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(bad("expected `dir start mid end`"));
        }
        let idx = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| bad(&format!("bad index {s:?}")))
        };
        let (start, mid, end) = (idx(fields[1])?, idx(fields[2])?, idx(fields[3])?);
        if !(start < mid && mid - start == end.wrapping_sub(mid) && end > mid) {
            return Err(bad(
                "the middle index must lie halfway between start and end",
            ));
        }
        let dir = PathBuf::from(fields[0]);
        out.push(TripletEntry {
            dir: if dir.is_absolute() {
                dir
            } else {
                base.join(dir)
            },
            start,
            mid,
            end,
        });
    }
    Ok(out)
}

pub fn read_triplet_list(path: &Path) -> Result<Vec<TripletEntry>> {
    let text = fs::read_to_string(path)?;
    parse_triplet_list(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Writes entries with directories relative to the list file when possible.
pub fn write_triplet_list(path: &Path, entries: &[TripletEntry]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut text = String::new();
    for e in entries {
        let dir = e.dir.strip_prefix(base).unwrap_or(&e.dir);
        text.push_str(&format!(
            "{} {} {} {}\n",
            dir.display(),
            e.start,
            e.mid,
            e.end
        ));
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn load_triplet(entry: &TripletEntry) -> Result<TripletRecord> {
    let load = |i: usize| Frame::load_png(&entry.dir.join(frame_file_name(i)));
    let rec = TripletRecord {
        i0: load(entry.start)?,
        it: load(entry.mid)?,
        i1: load(entry.end)?,
        interval: entry.interval(),
        source: entry.dir.display().to_string(),
        start: entry.start,
        origin: (0, 0),
    };
    rec.validate()?;
    Ok(rec)
}

pub fn load_triplets(entries: &[TripletEntry]) -> Result<Vec<TripletRecord>> {
    entries.iter().map(load_triplet).collect()
}

/// Mean and population standard deviation of start/end cosine similarity.
pub fn compute_dataset_stats(triplets: &[TripletRecord]) -> Result<DatasetStats> {
    if triplets.is_empty() {
        return Err(EdenError::NoSamples(
            "cannot compute statistics of an empty triplet set".into(),
        ));
    }
    let sims = triplets
        .iter()
        .map(|r| cosine_similarity(&r.i0, &r.i1))
        .collect::<Result<Vec<_>>>()?;
    Ok(stats_from_similarities(&sims))
}

pub fn stats_from_similarities(sims: &[f64]) -> DatasetStats {
    let n = sims.len() as f64;
    let mean = sims.iter().sum::<f64>() / n;
    let var = sims.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    DatasetStats::new(mean, var.sqrt())
}

/// A source of training batches. `batch(seed, step, size)` must be a pure
/// function of its arguments.
pub trait TripletSource {
    fn batch(&self, seed: u64, step: u64, size: usize) -> Result<Vec<TripletRecord>>;

    /// Every triplet the source can emit at its base resolution, for statistics passes.
    fn enumerate(&self) -> Result<Vec<TripletRecord>>;
}

/// A fixed list cycled in order.
#[derive(Debug, Clone)]
pub struct FixedTriplets(pub Vec<TripletRecord>);

impl TripletSource for FixedTriplets {
    fn batch(&self, _seed: u64, step: u64, size: usize) -> Result<Vec<TripletRecord>> {
        if self.0.is_empty() {
            return Err(EdenError::NoSamples("empty triplet list".into()));
        }
        let n = self.0.len();
        let first = (step as usize).wrapping_mul(size);
        Ok((0..size).map(|j| self.0[(first + j) % n].clone()).collect())
    }

    fn enumerate(&self) -> Result<Vec<TripletRecord>> {
        Ok(self.0.clone())
    }
}

/// Draws one `(resolution, interval)` pair per batch with equal probability,
/// then per item a sequence, start index and crop origin.
#[derive(Debug, Clone)]
pub struct SequenceSampler {
    sequences: Vec<(String, Vec<Frame>)>,
    intervals: Vec<usize>,
    resolutions: Vec<(usize, usize)>,
    multiple: usize,
}

impl SequenceSampler {
    pub fn new(
        sequences: Vec<(String, Vec<Frame>)>,
        intervals: Vec<usize>,
        resolutions: Vec<(usize, usize)>,
        multiple: usize,
    ) -> Result<Self> {
        if sequences.is_empty() {
            return Err(EdenError::NoSamples("no sequences to sample from".into()));
        }
        if intervals.is_empty() || intervals.contains(&0) {
            return Err(EdenError::InvalidArgument(
                "interval set must be non-empty and >= 1".into(),
            ));
        }
        if resolutions.is_empty() {
            return Err(EdenError::InvalidArgument(
                "resolution set must be non-empty".into(),
            ));
        }
        let k_max = *intervals.iter().max().unwrap_or(&1);
        for (name, seq) in &sequences {
            if seq.len() < 2 * k_max + 1 {
                return Err(EdenError::Data(format!(
                    "sequence {name} has {} frames; interval {k_max} needs {}",
                    seq.len(),
                    2 * k_max + 1
                )));
            }
            let (h, w) = seq[0].dims();
            for &(rh, rw) in &resolutions {
                if rh > h || rw > w || rh % multiple != 0 || rw % multiple != 0 {
                    return Err(EdenError::Dimension(format!(
                        "resolution {rh}x{rw} does not fit {name} ({h}x{w}) in multiples of {multiple}"
                    )));
                }
            }
        }
        Ok(Self {
            sequences,
            intervals,
            resolutions,
            multiple,
        })
    }

    pub fn intervals(&self) -> &[usize] {
        &self.intervals
    }

    pub fn resolutions(&self) -> &[(usize, usize)] {
        &self.resolutions
    }
}

impl TripletSource for SequenceSampler {
    fn batch(&self, seed_root: u64, step: u64, size: usize) -> Result<Vec<TripletRecord>> {
        let mut rng = seed::rng(seed_root, seed::DATA, &[step]);
        let (h, w) = self.resolutions[rng.random_range(0..self.resolutions.len())];
        let k = self.intervals[rng.random_range(0..self.intervals.len())];
        (0..size)
            .map(|j| {
                let mut rng = seed::rng(seed_root, seed::DATA, &[step, j as u64 + 1]);
                let (name, seq) = &self.sequences[rng.random_range(0..self.sequences.len())];
                let i = rng.random_range(0..seq.len() - 2 * k);
                let (fh, fw) = seq[0].dims();
                let top = rng.random_range(0..=fh - h);
                let left = rng.random_range(0..=fw - w);
                let rec = triplet_sample(seq, i, k, name)?;
                multi_res_crop(&rec, h, w, (top, left), self.multiple)
            })
            .collect()
    }

    fn enumerate(&self) -> Result<Vec<TripletRecord>> {
        let mut out = Vec::new();
        for (name, seq) in &self.sequences {
            for &k in &self.intervals {
                for i in 0..seq.len() - 2 * k {
                    out.push(triplet_sample(seq, i, k, name)?);
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(t: usize, h: usize, w: usize) -> Frame {
        Frame::from_fn(h, w, |y, x, c| ((t * 7 + y * 3 + x + c) % 17) as f32 / 16.0).unwrap()
    }

    fn seq(len: usize, h: usize, w: usize) -> Vec<Frame> {
        (0..len).map(|t| ramp(t, h, w)).collect()
    }

    #[test]
    fn triplet_indices() {
        let s = seq(11, 4, 4);
        let r = triplet_sample(&s, 0, 5, "a").unwrap();
        assert_eq!(
            (r.i0.clone(), r.it.clone(), r.i1.clone()),
            (s[0].clone(), s[5].clone(), s[10].clone())
        );
        let r = triplet_sample(&s, 3, 1, "a").unwrap();
        assert_eq!((r.start, r.interval), (3, 1));
        assert_eq!(r.it, s[4]);
        assert!(triplet_sample(&s, 1, 5, "a").is_err());
        assert!(triplet_sample(&s, 0, 0, "a").is_err());

        let still = vec![ramp(0, 4, 4); 5];
        let r = triplet_sample(&still, 0, 2, "still").unwrap();
        assert!(r.i0 == r.it && r.it == r.i1);
    }

    #[test]
    fn crop_cases() {
        let s = seq(3, 128, 128);
        let r = triplet_sample(&s, 0, 1, "a").unwrap();
        assert_eq!(multi_res_crop(&r, 128, 128, (0, 0), 16).unwrap(), r);
        let c = multi_res_crop(&r, 64, 64, (32, 32), 16).unwrap();
        for (out, src) in [(&c.i0, &r.i0), (&c.it, &r.it), (&c.i1, &r.i1)] {
            for ch in 0..3 {
                assert_eq!(out.get(0, 0, ch), src.get(32, 32, ch));
            }
        }
        assert_eq!(c.interval, 1);
        assert_eq!(c.origin, (32, 32));
        assert!(multi_res_crop(&r, 64, 64, (80, 0), 16).is_err());
        assert!(multi_res_crop(&r, 40, 64, (0, 0), 16).is_err());
    }

    #[test]
    fn stats_cases() {
        let f = ramp(0, 4, 4);
        let r = TripletRecord {
            i0: f.clone(),
            it: f.clone(),
            i1: f.clone(),
            interval: 1,
            source: "s".into(),
            start: 0,
            origin: (0, 0),
        };
        let st = compute_dataset_stats(&[r.clone(), r]).unwrap();
        assert!((st.sim_mean - 1.0).abs() < 1e-12);
        assert_eq!(st.sim_std, 1e-6);
        assert!(st.latent_std.is_none());

        let st = stats_from_similarities(&[0.8, 1.0]);
        assert!((st.sim_mean - 0.9).abs() < 1e-12);
        assert!((st.sim_std - 0.1).abs() < 1e-12);
        assert!(compute_dataset_stats(&[]).is_err());
    }

    #[test]
    fn ingest_cases() {
        let dir = tempfile::tempdir().unwrap();
        let err = ingest_frame_dir(dir.path()).unwrap_err();
        assert!(err.to_string().contains("no frames found"), "{err}");

        let frames = seq(3, 8, 8);
        write_frame_dir(dir.path(), &frames).unwrap();
        fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let got = ingest_frame_dir(dir.path()).unwrap();
        assert_eq!(got.len(), 3);
        for (a, b) in got.iter().zip(&frames) {
            for (p, q) in a.pixels().iter().zip(b.pixels()) {
                assert!((p - q).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }

        fs::remove_file(dir.path().join(frame_file_name(1))).unwrap();
        let err = ingest_frame_dir(dir.path()).unwrap_err();
        assert!(err.to_string().contains("not contiguous"), "{err}");

        ramp(1, 8, 16)
            .save_png(&dir.path().join(frame_file_name(1)))
            .unwrap();
        assert!(ingest_frame_dir(dir.path()).is_err());
    }

    #[test]
    fn triplet_list_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_frame_dir(&dir.path().join("seq0"), &seq(5, 8, 8)).unwrap();
        let entries = vec![
            TripletEntry {
                dir: dir.path().join("seq0"),
                start: 0,
                mid: 2,
                end: 4,
            },
            TripletEntry {
                dir: dir.path().join("seq0"),
                start: 1,
                mid: 2,
                end: 3,
            },
        ];
        let list = dir.path().join("triplets.txt");
        write_triplet_list(&list, &entries).unwrap();
        assert!(fs::read_to_string(&list)
            .unwrap()
            .starts_with("seq0 0 2 4\n"));
        assert_eq!(read_triplet_list(&list).unwrap(), entries);
        let recs = load_triplets(&entries).unwrap();
        assert_eq!(recs[0].interval, 2);
        assert!(parse_triplet_list("a 0 1 3", dir.path()).is_err());
        assert!(parse_triplet_list("a 0 1", dir.path()).is_err());
    }

    #[test]
    fn sampler_is_pure_and_respects_sets() {
        let seqs = vec![
            ("a".to_string(), seq(21, 32, 64)),
            ("b".to_string(), seq(21, 32, 64)),
        ];
        let s = SequenceSampler::new(seqs, vec![1, 3, 10], vec![(16, 16), (32, 32)], 16).unwrap();
        for step in 0..20 {
            let a = s.batch(9, step, 3).unwrap();
            assert_eq!(a, s.batch(9, step, 3).unwrap());
            let dims = a[0].dims();
            for r in &a {
                assert_eq!(r.dims(), dims);
                assert!([1, 3, 10].contains(&r.interval));
                r.validate().unwrap();
            }
        }
        assert!(
            SequenceSampler::new(vec![("c".into(), seq(5, 8, 8))], vec![3], vec![(8, 8)], 8)
                .is_err()
        );
    }

    proptest! {
        #[test]
        fn crop_commutes_with_sampling(i in 0usize..4, k in 1usize..3, top in 0usize..3, left in 0usize..3) {
            let s = seq(9, 12, 12);
            let cropped: Vec<Frame> = s.iter().map(|f| f.crop(top * 4, left * 4, 4, 4).unwrap()).collect();
            let a = multi_res_crop(&triplet_sample(&s, i, k, "x").unwrap(), 4, 4, (top * 4, left * 4), 4).unwrap();
            let b = triplet_sample(&cropped, i, k, "x").unwrap();
            prop_assert_eq!((a.i0, a.it, a.i1), (b.i0, b.it, b.i1));
        }
    }
}
