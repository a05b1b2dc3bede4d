//! Synthetic frame-level video dataset with planted class prototypes, its
//! `.vds` file format and seeded train/validate splitting.
//!
//! `.vds` layout (little-endian):
//!
//! ```text
//! "VDST"  u16 version
//! u32 d_video  u32 d_audio  u32 num_classes  u64 video count
//! per video: u32 id len, id bytes, u32 frames,
//!            frames*d_video f32, frames*d_audio f32,
//!            u32 label count, label count x u32
//! ```

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Truth;
use crate::model::FrameFeatures;

pub const DATASET_MAGIC: &[u8; 4] = b"VDST";
pub const DATASET_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetConfig {
    pub num_videos: usize,
    pub num_classes: usize,
    pub d_video: usize,
    pub d_audio: usize,
    pub max_frames: usize,
    pub mean_labels_per_video: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticDatasetConfig {
    fn default() -> Self {
        Self {
            num_videos: 1000,
            num_classes: 25,
            d_video: 32,
            d_audio: 8,
            max_frames: 30,
            mean_labels_per_video: 3.0,
            noise_sigma: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_videos == 0 || self.num_classes == 0 || self.d_video == 0 || self.d_audio == 0 || self.max_frames == 0 {
            return Err(Error::Validation("dataset sizes must be positive".into()));
        }
        if !(self.mean_labels_per_video >= 1.0 && self.mean_labels_per_video <= self.num_classes as f64) {
            return Err(Error::Validation(format!(
                "mean labels per video must lie in [1, {}], got {}",
                self.num_classes, self.mean_labels_per_video
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Validation("noise sigma must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoExample {
    pub video_id: String,
    pub features: FrameFeatures,
    pub labels: BTreeSet<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub d_video: usize,
    pub d_audio: usize,
    pub num_classes: usize,
    pub videos: Vec<VideoExample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn truth(&self) -> Truth {
        self.videos.iter().map(|v| (v.video_id.clone(), v.labels.clone())).collect()
    }

    /// Multi-hot label vector of video `i`.
    pub fn dense_labels(&self, i: usize) -> Vec<f32> {
        let mut y = vec![0.0; self.num_classes];
        for &l in &self.videos[i].labels {
            y[l as usize] = 1.0;
        }
        y
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            d_video: self.d_video,
            d_audio: self.d_audio,
            num_classes: self.num_classes,
            videos: indices.iter().map(|&i| self.videos[i].clone()).collect(),
        }
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect()
}

/// Draws the dataset. Class prototypes come from the seed's first stream and
/// video `i` from stream `i + 1`, so each video is reproducible on its own.
pub fn generate(cfg: &SyntheticDatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut proto_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let video_protos: Vec<Vec<f32>> = (0..cfg.num_classes).map(|_| normal_vec(&mut proto_rng, cfg.d_video)).collect();
    let audio_protos: Vec<Vec<f32>> = (0..cfg.num_classes).map(|_| normal_vec(&mut proto_rng, cfg.d_audio)).collect();
    let extra = cfg.mean_labels_per_video - 1.0;
    let poisson = if extra > 0.0 {
        Some(Poisson::new(extra).map_err(|e| Error::Validation(e.to_string()))?)
    } else {
        None
    };
    let min_frames = (cfg.max_frames / 2).max(1);

    let videos = (0..cfg.num_videos)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64 + 1);
            let extra_labels = poisson.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
            let count = (1 + extra_labels).min(cfg.num_classes);
            let labels: BTreeSet<u32> =
                index::sample(&mut rng, cfg.num_classes, count).into_iter().map(|l| l as u32).collect();
            let frames = rng.random_range(min_frames..=cfg.max_frames);

            let mean = |protos: &[Vec<f32>], d: usize| {
                let mut m = vec![0.0f32; d];
                for &l in &labels {
                    for (a, &b) in m.iter_mut().zip(&protos[l as usize]) {
                        *a += b;
                    }
                }
                m.iter_mut().for_each(|a| *a /= labels.len() as f32);
                m
            };
            let vmean = mean(&video_protos, cfg.d_video);
            let amean = mean(&audio_protos, cfg.d_audio);
            let mut video = Vec::with_capacity(frames * cfg.d_video);
            let mut audio = Vec::with_capacity(frames * cfg.d_audio);
            for _ in 0..frames {
                for &m in &vmean {
                    video.push(m + (cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal)) as f32);
                }
                for &m in &amean {
                    audio.push(m + (cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal)) as f32);
                }
            }
            VideoExample {
                video_id: format!("vid{i:06}"),
                features: FrameFeatures { frames, video, audio },
                labels,
            }
        })
        .collect();
    Ok(Dataset { d_video: cfg.d_video, d_audio: cfg.d_audio, num_classes: cfg.num_classes, videos })
}

/// Seeded disjoint partition into `(train, validate)`; each side keeps the
/// original video order.
pub fn split(dataset: &Dataset, validate_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(validate_fraction > 0.0 && validate_fraction < 1.0) {
        return Err(Error::Split(format!("validate fraction must be in (0, 1), got {validate_fraction}")));
    }
    let n = dataset.len();
    let n_val = (validate_fraction * n as f64).round() as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::Split(format!("fraction {validate_fraction} of {n} videos leaves one side empty")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val: Vec<usize> = order[..n_val].to_vec();
    let mut train: Vec<usize> = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((dataset.subset(&train), dataset.subset(&val)))
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Validation(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f32s<W: Write>(w: &mut W, v: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(v.len() * 4);
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_dataset<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    put_u32(&mut w, ds.d_video)?;
    put_u32(&mut w, ds.d_audio)?;
    put_u32(&mut w, ds.num_classes)?;
    w.write_all(&(ds.videos.len() as u64).to_le_bytes())?;
    for v in &ds.videos {
        let f = &v.features;
        if f.video.len() != f.frames * ds.d_video || f.audio.len() != f.frames * ds.d_audio {
            return Err(Error::Shape(format!("video `{}` does not match dataset dimensions", v.video_id)));
        }
        put_u32(&mut w, v.video_id.len())?;
        w.write_all(v.video_id.as_bytes())?;
        put_u32(&mut w, f.frames)?;
        put_f32s(&mut w, &f.video)?;
        put_f32s(&mut w, &f.audio)?;
        put_u32(&mut w, v.labels.len())?;
        for &l in &v.labels {
            w.write_all(&l.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset_file(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_dataset(ds, BufWriter::new(File::create(path)?))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Corruption(format!("dataset truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Corruption("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
    }
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < 6 || &buf[..4] != DATASET_MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let mut rd = Reader { buf: &buf, pos: 6 };
    let d_video = rd.u32()?;
    let d_audio = rd.u32()?;
    let num_classes = rd.u32()?;
    let count = u64::from_le_bytes(rd.take(8)?.try_into().unwrap());
    let mut videos = Vec::new();
    for _ in 0..count {
        let len = rd.u32()?;
        let video_id = String::from_utf8(rd.take(len)?.to_vec())
            .map_err(|_| Error::Corruption("video id is not UTF-8".into()))?;
        let frames = rd.u32()?;
        if frames == 0 {
            return Err(Error::Corruption(format!("video `{video_id}` has no frames")));
        }
        let video = rd.f32s(frames * d_video)?;
        let audio = rd.f32s(frames * d_audio)?;
        let n_labels = rd.u32()?;
        let mut labels = BTreeSet::new();
        for _ in 0..n_labels {
            let l = rd.u32()? as u32;
            if l as usize >= num_classes || !labels.insert(l) {
                return Err(Error::Corruption(format!("video `{video_id}` has invalid label {l}")));
            }
        }
        videos.push(VideoExample { video_id, features: FrameFeatures { frames, video, audio }, labels });
    }
    if rd.pos != buf.len() {
        return Err(Error::Corruption("trailing bytes after last video".into()));
    }
    Ok(Dataset { d_video, d_audio, num_classes, videos })
}

pub fn read_dataset_file(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small(seed: u64) -> SyntheticDatasetConfig {
        SyntheticDatasetConfig { num_videos: 40, num_classes: 6, d_video: 5, d_audio: 3, max_frames: 8, seed, ..Default::default() }
    }

    fn encode(ds: &Dataset) -> Vec<u8> {
        let mut out = Vec::new();
        write_dataset(ds, &mut out).unwrap();
        out
    }

    #[test]
    fn zero_noise_single_label_frames_equal_prototype() {
        let cfg = SyntheticDatasetConfig { noise_sigma: 0.0, mean_labels_per_video: 1.0, ..small(4) };
        let ds = generate(&cfg).unwrap();
        let mut seen: std::collections::BTreeMap<u32, Vec<f32>> = Default::default();
        for v in &ds.videos {
            assert_eq!(v.labels.len(), 1);
            let first = v.features.video[..cfg.d_video].to_vec();
            for frame in v.features.video.chunks_exact(cfg.d_video) {
                assert_eq!(frame, first.as_slice());
            }
            let label = *v.labels.iter().next().unwrap();
            if let Some(p) = seen.insert(label, first.clone()) {
                assert_eq!(p, first);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(encode(&generate(&small(9)).unwrap()), encode(&generate(&small(9)).unwrap()));
        assert_ne!(encode(&generate(&small(9)).unwrap()), encode(&generate(&small(10)).unwrap()));
    }

    #[test]
    fn frame_counts_in_range() {
        let ds = generate(&small(1)).unwrap();
        assert!(ds.videos.iter().all(|v| (4..=8).contains(&v.features.frames)));
    }

    #[test]
    fn mean_label_count() {
        let cfg = SyntheticDatasetConfig { num_videos: 1000, num_classes: 25, d_video: 2, d_audio: 1, max_frames: 2, ..small(123) };
        let ds = generate(&cfg).unwrap();
        let mean = ds.videos.iter().map(|v| v.labels.len()).sum::<usize>() as f64 / 1000.0;
        assert!((2.7..=3.3).contains(&mean), "mean label count {mean}");
        assert!(ds.videos.iter().all(|v| !v.labels.is_empty()));
    }

    #[test]
    fn split_halves() {
        let ds = generate(&SyntheticDatasetConfig { num_videos: 10, ..small(2) }).unwrap();
        let (a, b) = split(&ds, 0.5, 7).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));
        let (a2, b2) = split(&ds, 0.5, 7).unwrap();
        assert_eq!((a, b), (a2, b2));
        assert!(matches!(split(&ds, 0.01, 7), Err(Error::Split(_))));
        assert!(matches!(split(&ds, 1.0, 7), Err(Error::Split(_))));
    }

    #[test]
    fn round_trip_and_payload_size() {
        let ds = generate(&small(5)).unwrap();
        let bytes = encode(&ds);
        assert_eq!(read_dataset(bytes.as_slice()).unwrap(), ds);
        let expected: usize = 4 + 2 + 12 + 8
            + ds.videos
                .iter()
                .map(|v| 4 + v.video_id.len() + 4 + 4 * v.features.frames * (5 + 3) + 4 + 4 * v.labels.len())
                .sum::<usize>();
        assert_eq!(bytes.len(), expected);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut bytes = encode(&generate(&small(5)).unwrap());
        let n = bytes.len();
        assert!(matches!(read_dataset(&bytes[..n - 3]), Err(Error::Corruption(_))));
        bytes[1] = b'?';
        assert!(matches!(read_dataset(bytes.as_slice()), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 2usize..60, frac in 0.05f64..0.95, seed in any::<u64>()) {
            let ds = generate(&SyntheticDatasetConfig { num_videos: n, max_frames: 1, d_video: 1, d_audio: 1, ..small(seed) }).unwrap();
            match split(&ds, frac, seed) {
                Ok((a, b)) => {
                    let ids = |d: &Dataset| d.videos.iter().map(|v| v.video_id.clone()).collect::<BTreeSet<_>>();
                    let (ia, ib) = (ids(&a), ids(&b));
                    prop_assert!(ia.is_disjoint(&ib));
                    let union: BTreeSet<_> = ia.union(&ib).cloned().collect();
                    prop_assert_eq!(union, ids(&ds));
                    prop_assert_eq!(a.len() + b.len(), n);
                }
                Err(Error::Split(_)) => {
                    let k = (frac * n as f64).round() as usize;
                    prop_assert!(k == 0 || k == n);
                }
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }
    }
}
