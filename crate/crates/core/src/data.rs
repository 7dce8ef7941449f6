//! Datasets, batches, the procedural shapes dataset and the RGD1 file format.
//!
//! RGD1 layout (all little-endian):
//!
//! ```text
//! "RGD1" | u32 N | u32 C | u32 H | u32 W | u32 K | N*C*H*W f32 | N u8 labels | u64 checksum
//! ```
//!
//! The checksum is the wrapping sum of every preceding byte.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, labels};
use crate::tensor::{Real, Tensor};

pub const RGD_MAGIC: &[u8; 4] = b"RGD1";
const RGD_HEADER: usize = 4 + 5 * 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Synth {
        seed: u64,
        per_class: usize,
        num_classes: usize,
        size: usize,
    },
    File {
        sha256: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchKind {
    Real,
    Fake,
    Adversarial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    /// `[N, C, H, W]`, values in [-1, 1].
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub kind: BatchKind,
}

impl<T: Real> Batch<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, kind: BatchKind) -> Result<Self> {
        if images.rank() != 4 || images.dims()[0] != labels.len() {
            return Err(Error::shape(
                "batch",
                format!("images {:?} with {} labels", images.dims(), labels.len()),
            ));
        }
        Ok(Self { images, labels, kind })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One split of labelled images, stored as `f32` in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    pub split: SplitTag,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn batch<T: Real>(&self, indices: &[usize]) -> Batch<T> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| T::of_f32(v)));
        }
        let images = Tensor::new(
            vec![indices.len(), self.channels, self.height, self.width],
            data,
        )
        .expect("dataset dims");
        let labels = indices.iter().map(|&i| self.labels[i] as usize).collect();
        Batch {
            images,
            labels,
            kind: BatchKind::Real,
        }
    }

    pub fn all<T: Real>(&self) -> Batch<T> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    /// The first `n` samples (or all, if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone()
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn image_hashes(&self) -> HashSet<[u8; 32]> {
        (0..self.len())
            .map(|i| {
                let mut h = Sha256::new();
                for v in self.image(i) {
                    h.update(v.to_le_bytes());
                }
                h.finalize().into()
            })
            .collect()
    }

    pub fn check_pixel_range(&self) -> Result<()> {
        match self.images.iter().position(|v| !(-1.0..=1.0).contains(v)) {
            None => Ok(()),
            Some(i) => Err(Error::Validation(format!(
                "pixel {i} = {} outside [-1, 1]",
                self.images[i]
            ))),
        }
    }
}

/// Fails when any image appears in both splits.
pub fn check_disjoint(train: &Dataset, test: &Dataset) -> Result<()> {
    let shared = train.image_hashes().intersection(&test.image_hashes()).count();
    if shared > 0 {
        return Err(Error::Validation(format!(
            "{shared} images shared between train and test"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub seed: u64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub num_classes: usize,
    pub size: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            train_per_class: 200,
            test_per_class: 100,
            num_classes: 4,
            size: 16,
        }
    }
}

pub const SHAPE_NAMES: [&str; 4] = ["horizontal_bar", "vertical_bar", "square", "disc"];
const BACKGROUND: f64 = -0.6;
const FOREGROUND: (f64, f64) = (-0.1, 0.3);
const NOISE_SIGMA: f64 = 0.1;

/// Generates the train and test splits of the shapes dataset.
pub fn synth_shapes(spec: &SynthSpec) -> Result<(Dataset, Dataset)> {
    if spec.num_classes > SHAPE_NAMES.len() || spec.num_classes == 0 {
        return Err(Error::Validation(format!(
            "synth_shapes supports 1..=4 classes, got {}",
            spec.num_classes
        )));
    }
    if spec.size < 8 {
        return Err(Error::Validation(format!(
            "synth_shapes needs size >= 8, got {}",
            spec.size
        )));
    }
    let make = |label: &str, per_class: usize, split: SplitTag| {
        let mut rng = rng::derive(spec.seed, label);
        let n = per_class * spec.num_classes;
        let mut images = Vec::with_capacity(n * spec.size * spec.size);
        let mut ys = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % spec.num_classes;
            render_shape(class, spec.size, &mut rng, &mut images);
            ys.push(class as u8);
        }
        Dataset {
            channels: 1,
            height: spec.size,
            width: spec.size,
            num_classes: spec.num_classes,
            images,
            labels: ys,
            split,
            provenance: Provenance::Synth {
                seed: spec.seed,
                per_class,
                num_classes: spec.num_classes,
                size: spec.size,
            },
        }
    };
    let train = make(labels::SYNTH_TRAIN, spec.train_per_class, SplitTag::Train);
    let test = make(labels::SYNTH_TEST, spec.test_per_class, SplitTag::Test);
    check_disjoint(&train, &test)?;
    Ok((train, test))
}

fn render_shape(class: usize, size: usize, rng: &mut rng::StreamRng, out: &mut Vec<f32>) {
    let s = size as f64;
    let mid = (s - 1.0) / 2.0;
    let cx = mid + rng.gen_range(-1.0..1.0);
    let cy = mid + rng.gen_range(-1.0..1.0);
    let scale = rng.gen_range(0.85..1.15);
    let fg = rng.gen_range(FOREGROUND.0..FOREGROUND.1);
    let inside = |x: f64, y: f64| -> bool {
        let (dx, dy) = (x - cx, y - cy);
        match class {
            0 => dy.abs() <= 0.1 * s * scale && dx.abs() <= 0.35 * s * scale,
            1 => dx.abs() <= 0.1 * s * scale && dy.abs() <= 0.35 * s * scale,
            2 => dx.abs() <= 0.2 * s * scale && dy.abs() <= 0.2 * s * scale,
            _ => dx * dx + dy * dy <= (0.32 * s * scale).powi(2),
        }
    };
    for y in 0..size {
        for x in 0..size {
            let base = if inside(x as f64, y as f64) { fg } else { BACKGROUND };
            let noise: f64 = rng.sample(StandardNormal);
            out.push((base + NOISE_SIGMA * noise).clamp(-1.0, 1.0) as f32);
        }
    }
}

fn checksum(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0u64, |acc, &b| acc.wrapping_add(b as u64))
}

pub fn encode_rgd(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(RGD_HEADER + ds.images.len() * 4 + ds.len() + 8);
    out.extend_from_slice(RGD_MAGIC);
    for v in [ds.len(), ds.channels, ds.height, ds.width, ds.num_classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in &ds.images {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&ds.labels);
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

pub fn decode_rgd(bytes: &[u8], split: SplitTag) -> Result<Dataset> {
    let truncated = |offset: usize, what: &str| Error::Format {
        offset,
        reason: format!("truncated while reading {what}"),
    };
    if bytes.len() < 4 {
        return Err(truncated(bytes.len(), "magic"));
    }
    if &bytes[..4] != RGD_MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: format!("bad magic {:?}", &bytes[..4]),
        });
    }
    if bytes.len() < RGD_HEADER {
        return Err(truncated(bytes.len(), "header"));
    }
    let field = |i: usize| {
        let o = 4 + 4 * i;
        u32::from_le_bytes(bytes[o..o + 4].try_into().expect("sized")) as usize
    };
    let (n, c, h, w, k) = (field(0), field(1), field(2), field(3), field(4));
    let pixels = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::Format {
            offset: 4,
            reason: "dimension product overflows".into(),
        })?;
    let label_start = RGD_HEADER + pixels * 4;
    let sum_start = label_start + n;
    if bytes.len() < label_start {
        return Err(truncated(bytes.len(), "pixels"));
    }
    if bytes.len() < sum_start {
        return Err(truncated(bytes.len(), "labels"));
    }
    if bytes.len() < sum_start + 8 {
        return Err(truncated(bytes.len(), "checksum"));
    }
    if bytes.len() > sum_start + 8 {
        return Err(Error::Format {
            offset: sum_start + 8,
            reason: "trailing bytes after checksum".into(),
        });
    }
    let stored = u64::from_le_bytes(bytes[sum_start..].try_into().expect("sized"));
    if stored != checksum(&bytes[..sum_start]) {
        return Err(Error::Format {
            offset: sum_start,
            reason: "checksum mismatch".into(),
        });
    }
    let images: Vec<f32> = bytes[RGD_HEADER..label_start]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("sized")))
        .collect();
    if let Some(i) = images.iter().position(|v| !(-1.0..=1.0).contains(v)) {
        return Err(Error::Format {
            offset: RGD_HEADER + 4 * i,
            reason: format!("pixel {} outside [-1, 1]", images[i]),
        });
    }
    let labels = bytes[label_start..sum_start].to_vec();
    if let Some(i) = labels.iter().position(|&l| l as usize >= k) {
        return Err(Error::Format {
            offset: label_start + i,
            reason: format!("label {} >= K = {k}", labels[i]),
        });
    }
    let sha: [u8; 32] = Sha256::digest(bytes).into();
    Ok(Dataset {
        channels: c,
        height: h,
        width: w,
        num_classes: k,
        images,
        labels,
        split,
        provenance: Provenance::File {
            sha256: sha.iter().map(|b| format!("{b:02x}")).collect(),
        },
    })
}

pub fn save_rgd(ds: &Dataset, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &encode_rgd(ds))
}

pub fn load_rgd(path: &Path, split: SplitTag) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_rgd(&bytes, split)
}
