//! Synthetic segmentation data with a locally ambiguous structure.
//!
//! Each image holds an elliptical body, a thin tail attached to one end of
//! its major axis, and a straight distractor stripe of the same intensity
//! beyond the other end. The tail always leaves the body on the end whose
//! direction points into the lower half of the image (`0 <= angle < pi`
//! with `y` growing downwards), so telling the tail from the distractor
//! needs the body's orientation rather than local appearance.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CLASSES: usize = 2;
/// Largest allowed augmentation shift in pixels.
pub const MAX_SHIFT: i64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenParams {
    /// Image side; only 32 is supported.
    pub size: usize,
    /// Range of the body's full axis lengths.
    pub body_axis: [f64; 2],
    pub tail_length: [f64; 2],
    /// Range of stripe widths (both inclusive).
    pub tail_width: [usize; 2],
    /// Range of the gap between the body and the distractor.
    pub distractor_gap: [f64; 2],
    pub noise_sigma: f64,
    pub background: f64,
    pub body_intensity: f64,
    pub tail_intensity: [f64; 2],
    /// Largest `|distractor - tail|` intensity offset.
    pub distractor_offset: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            size: 32,
            body_axis: [6.0, 10.0],
            tail_length: [6.0, 12.0],
            tail_width: [2, 2],
            distractor_gap: [2.0, 4.0],
            noise_sigma: 0.05,
            background: 0.15,
            body_intensity: 0.85,
            tail_intensity: [0.45, 0.55],
            distractor_offset: 0.05,
        }
    }
}

fn within(name: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && lo <= r[0] && r[0] <= r[1] && r[1] <= hi) {
        return Err(Error::ParamOutOfRange(format!(
            "{name} = {r:?} must be an ordered range inside [{lo}, {hi}]"
        )));
    }
    Ok(())
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        if self.size != 32 {
            return Err(Error::ParamOutOfRange(format!("size = {} (must be 32)", self.size)));
        }
        within("body_axis", self.body_axis, 6.0, 10.0)?;
        within("tail_length", self.tail_length, 6.0, 12.0)?;
        let tw = [self.tail_width[0] as f64, self.tail_width[1] as f64];
        within("tail_width", tw, 1.0, 2.0)?;
        within("distractor_gap", self.distractor_gap, 1.5, 8.0)?;
        within("tail_intensity", self.tail_intensity, 0.0, 1.0)?;
        for (name, v, lo, hi) in [
            ("noise_sigma", self.noise_sigma, 0.0, 0.2),
            ("background", self.background, 0.0, 1.0),
            ("body_intensity", self.body_intensity, 0.0, 1.0),
            ("distractor_offset", self.distractor_offset, 0.0, 0.2),
        ] {
            within(name, [v, v], lo, hi)?;
        }
        Ok(())
    }
}

/// One grayscale image `H x W` in `[0, 1]` with its label mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    pub image: Vec<f64>,
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn foreground_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m != 0).count() as f64 / self.mask.len() as f64
    }

    /// Raw file body: little-endian `f64` image followed by the byte mask.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.image.len() * 9);
        for v in &self.image {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.mask);
        out
    }

    pub fn from_bytes(id: &str, bytes: &[u8], h: usize, w: usize, classes: usize) -> Result<Self> {
        let n = h * w;
        if bytes.len() != n * 9 {
            return Err(Error::CorruptSample {
                id: id.to_string(),
                reason: format!("{} bytes, expected {}", bytes.len(), n * 9),
            });
        }
        let image: Vec<f64> = bytes[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mask = bytes[n * 8..].to_vec();
        if let Some(l) = mask.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::CorruptSample {
                id: id.to_string(),
                reason: format!("label {l} out of range for {classes} classes"),
            });
        }
        if let Some(v) = image.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::CorruptSample {
                id: id.to_string(),
                reason: format!("intensity {v} outside [0, 1]"),
            });
        }
        Ok(Self {
            height: h,
            width: w,
            image,
            mask,
        })
    }
}

/// Which structure each pixel was drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Background,
    Body,
    Tail,
    Distractor,
}

/// A sample together with its per-pixel layer map and draw metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Detailed {
    pub sample: Sample,
    pub layers: Vec<Layer>,
    /// Major-axis angle in `[0, pi)`; the tail leaves along this direction.
    pub orientation: f64,
    /// `|distractor - tail|` intensity offset below half the noise level.
    pub ambiguous: bool,
}

struct Geometry {
    cx: f64,
    cy: f64,
    ux: f64,
    uy: f64,
    a: f64,
    b: f64,
    tail_len: f64,
    distractor_len: f64,
    gap: f64,
    half_width: f64,
}

impl Geometry {
    fn layer(&self, px: f64, py: f64) -> Layer {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let along = dx * self.ux + dy * self.uy;
        let across = -dx * self.uy + dy * self.ux;
        if (along / self.a).powi(2) + (across / self.b).powi(2) <= 1.0 {
            Layer::Body
        } else if across.abs() <= self.half_width
            && along >= self.a - 1.0
            && along <= self.a + self.tail_len
        {
            Layer::Tail
        } else if across.abs() <= self.half_width
            && -along >= self.a + self.gap
            && -along <= self.a + self.gap + self.distractor_len
        {
            Layer::Distractor
        } else {
            Layer::Background
        }
    }

    /// Bounding box `(min_x, max_x, min_y, max_y)` relative to the centre.
    fn bounds(&self) -> (f64, f64, f64, f64) {
        let ex = (self.a * self.ux).hypot(self.b * self.uy);
        let ey = (self.a * self.uy).hypot(self.b * self.ux);
        let mut b = (-ex, ex, -ey, ey);
        let ends = [
            self.a + self.tail_len,
            -(self.a + self.gap + self.distractor_len),
        ];
        for t in ends {
            for side in [-1.0, 1.0] {
                let x = t * self.ux - side * self.half_width * self.uy;
                let y = t * self.uy + side * self.half_width * self.ux;
                b = (b.0.min(x), b.1.max(x), b.2.min(y), b.3.max(y));
            }
        }
        b
    }
}

const MAX_ATTEMPTS: usize = 10_000;

/// Deterministic sample for `seed`.
pub fn gen_sample(seed: u64, params: &GenParams) -> Result<Sample> {
    Ok(gen_sample_detailed(seed, params)?.sample)
}

pub fn gen_sample_detailed(seed: u64, params: &GenParams) -> Result<Detailed> {
    params.validate()?;
    let n = params.size;
    let nf = n as f64;
    let mut rng = SplitMix64::derive(seed, &[0x6461_7461]);
    for _ in 0..MAX_ATTEMPTS {
        let ax1 = rng.uniform(params.body_axis[0], params.body_axis[1]);
        let ax2 = rng.uniform(params.body_axis[0], params.body_axis[1]);
        let theta = rng.uniform(0.0, std::f64::consts::PI);
        let width = params.tail_width[0]
            + rng.below((params.tail_width[1] - params.tail_width[0] + 1) as u64) as usize;
        let mut g = Geometry {
            cx: 0.0,
            cy: 0.0,
            ux: theta.cos(),
            uy: theta.sin(),
            a: 0.5 * ax1.max(ax2),
            b: 0.5 * ax1.min(ax2),
            tail_len: rng.uniform(params.tail_length[0], params.tail_length[1]),
            distractor_len: rng.uniform(params.tail_length[0], params.tail_length[1]),
            gap: rng.uniform(params.distractor_gap[0], params.distractor_gap[1]),
            half_width: width as f64 / 2.0,
        };
        let tail_level = rng.uniform(params.tail_intensity[0], params.tail_intensity[1]);
        let offset = rng.uniform(-params.distractor_offset, params.distractor_offset);
        let ux_pos = rng.next_f64();
        let uy_pos = rng.next_f64();
        let (min_x, max_x, min_y, max_y) = g.bounds();
        let margin = 1.0;
        let (lo_x, hi_x) = (margin - min_x, nf - margin - max_x);
        let (lo_y, hi_y) = (margin - min_y, nf - margin - max_y);
        if lo_x > hi_x || lo_y > hi_y {
            continue;
        }
        g.cx = lo_x + (hi_x - lo_x) * ux_pos;
        g.cy = lo_y + (hi_y - lo_y) * uy_pos;

        let mut layers = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                layers.push(g.layer(x as f64 + 0.5, y as f64 + 0.5));
            }
        }
        let count = |l: Layer| layers.iter().filter(|&&v| v == l).count();
        let (fg, distractor) = (count(Layer::Body) + count(Layer::Tail), count(Layer::Distractor));
        let frac = fg as f64 / (n * n) as f64;
        if !(0.05..=0.6).contains(&frac) || count(Layer::Tail) == 0 || distractor == 0 {
            continue;
        }
        if distractor_touches(&layers, n) {
            continue;
        }
        let mut image = Vec::with_capacity(n * n);
        for &l in &layers {
            let base = match l {
                Layer::Background => params.background,
                Layer::Body => params.body_intensity,
                Layer::Tail => tail_level,
                Layer::Distractor => tail_level + offset,
            };
            image.push((base + params.noise_sigma * rng.normal()).clamp(0.0, 1.0));
        }
        let mask = layers
            .iter()
            .map(|l| matches!(l, Layer::Body | Layer::Tail) as u8)
            .collect();
        return Ok(Detailed {
            sample: Sample {
                height: n,
                width: n,
                image,
                mask,
            },
            layers,
            orientation: theta,
            ambiguous: offset.abs() <= params.noise_sigma / 2.0,
        });
    }
    Err(Error::ParamOutOfRange(
        "no admissible sample found; geometry ranges too large for the image".into(),
    ))
}

/// Whether any distractor pixel is 8-adjacent to a foreground pixel.
fn distractor_touches(layers: &[Layer], n: usize) -> bool {
    for y in 0..n {
        for x in 0..n {
            if layers[y * n + x] != Layer::Distractor {
                continue;
            }
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    if yy < 0 || xx < 0 || yy >= n as i64 || xx >= n as i64 {
                        continue;
                    }
                    if matches!(layers[yy as usize * n + xx as usize], Layer::Body | Layer::Tail) {
                        return true;
                    }
                }
            }
        }
    }
    false
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn index(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Sample seed: the dataset seed in the high bits, then the split, then the
/// index, so the three splits use disjoint seed ranges.
pub fn sample_seed(dataset_seed: u64, split: Split, index: usize) -> u64 {
    (dataset_seed << 34) | (split.index() << 32) | index as u64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub seed: u64,
    pub split: Split,
    pub ambiguous: bool,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub count: usize,
    pub dataset_seed: u64,
    pub generator: GenParams,
    pub samples: Vec<SampleRecord>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Generate `n_train + n_val + n_test` samples into `out_dir`.
pub fn gen_dataset(
    seed: u64,
    counts: [usize; 3],
    params: &GenParams,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    params.validate()?;
    if counts.contains(&0) {
        return Err(Error::Config("every split needs at least one sample".into()));
    }
    if seed >= 1 << 30 || counts.iter().any(|&c| c >= 1 << 32) {
        return Err(Error::Config("dataset seed must be below 2^30".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::new();
    for (split, &count) in Split::ALL.iter().zip(&counts) {
        for i in 0..count {
            let id = format!("{}_{i:05}", split.name());
            records.push(SampleRecord {
                file: format!("{id}.bin"),
                id,
                seed: sample_seed(seed, *split, i),
                split: *split,
                ambiguous: false,
            });
        }
    }
    let flags: Vec<bool> = records
        .par_iter()
        .map(|r| {
            let d = gen_sample_detailed(r.seed, params)?;
            write_file(&out_dir.join(&r.file), &d.sample.to_bytes())?;
            Ok(d.ambiguous)
        })
        .collect::<Result<_>>()?;
    for (r, f) in records.iter_mut().zip(flags) {
        r.ambiguous = f;
    }
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        height: params.size,
        width: params.size,
        classes: CLASSES,
        count: records.len(),
        dataset_seed: seed,
        generator: params.clone(),
        samples: records,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    write_file(&out_dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(manifest)
}

/// An in-memory dataset in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.manifest
            .samples
            .iter()
            .zip(&self.samples)
            .filter(|(r, _)| r.split == split)
            .map(|(_, s)| s)
            .collect()
    }

    pub fn records(&self, split: Split) -> Vec<&SampleRecord> {
        self.manifest.samples.iter().filter(|r| r.split == split).collect()
    }
}

/// Read a manifest (or the manifest inside a directory) and every sample.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest_path: PathBuf = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let version: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", manifest_path.display())))?;
    let found = version["format_version"].as_u64().unwrap_or(0) as u32;
    if found != DATASET_FORMAT_VERSION {
        return Err(Error::FormatVersionMismatch {
            found,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", manifest_path.display())))?;
    if manifest.count != manifest.samples.len() {
        return Err(Error::Config(format!(
            "manifest declares {} samples but lists {}",
            manifest.count,
            manifest.samples.len()
        )));
    }
    let mut ids = std::collections::HashSet::new();
    for r in &manifest.samples {
        if !ids.insert(r.id.as_str()) {
            return Err(Error::Config(format!("duplicate sample id `{}`", r.id)));
        }
    }
    let (h, w, c) = (manifest.height, manifest.width, manifest.classes);
    let samples = manifest
        .samples
        .iter()
        .map(|r| {
            let p = dir.join(&r.file);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            Sample::from_bytes(&r.id, &bytes, h, w, c)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, samples })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Augment {
    HFlip,
    Shift { dx: i64, dy: i64 },
}

/// Apply one augmentation jointly to image and mask. Shifts zero-fill the
/// image and background-fill the mask.
pub fn augment(sample: &Sample, op: Augment) -> Result<Sample> {
    let (h, w) = (sample.height, sample.width);
    let mut out = sample.clone();
    match op {
        Augment::HFlip => {
            for y in 0..h {
                for x in 0..w {
                    out.image[y * w + x] = sample.image[y * w + (w - 1 - x)];
                    out.mask[y * w + x] = sample.mask[y * w + (w - 1 - x)];
                }
            }
        }
        Augment::Shift { dx, dy } => {
            if dx.abs() > MAX_SHIFT || dy.abs() > MAX_SHIFT {
                return Err(Error::ShiftOutOfRange { dx, dy });
            }
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let (sy, sx) = (y - dy, x - dx);
                    let j = (y * w as i64 + x) as usize;
                    if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                        out.image[j] = 0.0;
                        out.mask[j] = 0;
                    } else {
                        let i = (sy * w as i64 + sx) as usize;
                        out.image[j] = sample.image[i];
                        out.mask[j] = sample.mask[i];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Stack samples into an `N x 1 x H x W` batch.
pub fn make_batch(samples: &[&Sample]) -> Result<Batch> {
    let first = samples.first().ok_or(Error::EmptyDataset)?;
    let (h, w) = (first.height, first.width);
    let mut x = Vec::with_capacity(samples.len() * h * w);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height, s.width) != (h, w) {
            return Err(Error::shape("samples in a batch differ in size"));
        }
        x.extend_from_slice(&s.image);
        labels.extend_from_slice(&s.mask);
    }
    Batch::new(Tensor::new(&[samples.len(), 1, h, w], x)?, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_valid() {
        let p = GenParams::default();
        for seed in 0..200 {
            let a = gen_sample(seed, &p).unwrap();
            assert_eq!(a, gen_sample(seed, &p).unwrap());
            let f = a.foreground_fraction();
            assert!((0.05..=0.6).contains(&f), "seed {seed}: {f}");
            assert!(a.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn tail_leaves_downwards() {
        let p = GenParams::default();
        for seed in 0..50 {
            let d = gen_sample_detailed(seed, &p).unwrap();
            let n = p.size;
            let mean_y = |l: Layer| {
                let ys: Vec<f64> = (0..n * n)
                    .filter(|&i| d.layers[i] == l)
                    .map(|i| (i / n) as f64)
                    .collect();
                ys.iter().sum::<f64>() / ys.len() as f64
            };
            assert!(mean_y(Layer::Tail) >= mean_y(Layer::Distractor), "seed {seed}");
        }
    }

    #[test]
    fn bad_params_rejected() {
        let p = GenParams {
            size: 16,
            ..GenParams::default()
        };
        assert!(matches!(gen_sample(0, &p), Err(Error::ParamOutOfRange(_))));
        let p = GenParams {
            tail_length: [4.0, 12.0],
            ..GenParams::default()
        };
        assert!(matches!(gen_sample(0, &p), Err(Error::ParamOutOfRange(_))));
    }

    #[test]
    fn augment_contracts() {
        let s = gen_sample(3, &GenParams::default()).unwrap();
        let f = augment(&s, Augment::HFlip).unwrap();
        assert_eq!(augment(&f, Augment::HFlip).unwrap(), s);
        assert_eq!(f.foreground_fraction(), s.foreground_fraction());
        assert_eq!(augment(&s, Augment::Shift { dx: 0, dy: 0 }).unwrap(), s);
        assert!(matches!(
            augment(&s, Augment::Shift { dx: 3, dy: 0 }),
            Err(Error::ShiftOutOfRange { dx: 3, dy: 0 })
        ));
    }

    #[test]
    fn byte_round_trip() {
        let s = gen_sample(9, &GenParams::default()).unwrap();
        let b = s.to_bytes();
        assert_eq!(Sample::from_bytes("x", &b, 32, 32, 2).unwrap(), s);
        assert!(matches!(
            Sample::from_bytes("x", &b[..b.len() - 1], 32, 32, 2),
            Err(Error::CorruptSample { id, .. }) if id == "x"
        ));
    }
}
