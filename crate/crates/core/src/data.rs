//! Image datasets: CIFAR-10 binary files, synthetic blobs, augmentation and batching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_PIXELS: usize = CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;
/// One label byte followed by the R, G and B planes.
pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;

/// Per-channel normalization applied after scaling pixels to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    /// CIFAR-10 training-set statistics.
    fn default() -> Self {
        Self { mean: [0.4914, 0.4822, 0.4465], std: [0.2470, 0.2435, 0.2616] }
    }
}

impl Normalization {
    pub fn identity() -> Self {
        Self { mean: [0.0; 3], std: [1.0; 3] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::config(format!("invalid normalization {self:?}")));
        }
        Ok(())
    }

    pub fn normalize(&self, channel: usize, v: f64) -> f64 {
        (v - self.mean[channel]) / self.std[channel]
    }

    pub fn denormalize(&self, channel: usize, v: f64) -> f64 {
        v * self.std[channel] + self.mean[channel]
    }
}

/// Images stored contiguously in `[N, C, H, W]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub side: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Vec<f64>, labels: Vec<usize>, channels: usize, side: usize, classes: usize) -> Result<Self> {
        if images.len() != labels.len() * channels * side * side {
            return Err(Error::dim(format!(
                "{} values for {} images of {channels}x{side}x{side}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self { images, labels, channels, side, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.side * self.side
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// The first `n` items (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset { images: self.images[..n * self.image_len()].to_vec(), labels: self.labels[..n].to_vec(), ..*self }
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Ok(Batch {
            images: Tensor::from_vec(&[indices.len(), self.channels, self.side, self.side], images)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }
}

/// Parses concatenated CIFAR-10 records; `source` names the input in errors.
pub fn parse_cifar10(bytes: &[u8], source: &str, norm: &Normalization) -> Result<Dataset> {
    norm.validate()?;
    let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
    if whole != bytes.len() {
        return Err(Error::Ingestion {
            path: source.into(),
            offset: whole as u64,
            reason: format!(
                "truncated record: {} trailing bytes, records are {CIFAR_RECORD} bytes",
                bytes.len() - whole
            ),
        });
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Data(format!(
                "{source}: label {label} at byte offset {} is not a CIFAR-10 class",
                r * CIFAR_RECORD
            )));
        }
        labels.push(label);
        images.extend(rec[1..].iter().enumerate().map(|(i, &p)| norm.normalize(i / plane, p as f64 / 255.0)));
    }
    Dataset::new(images, labels, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_CLASSES)
}

pub fn load_cifar10_bin<P: AsRef<Path>>(paths: &[P], norm: &Normalization) -> Result<Dataset> {
    let mut all: Option<Dataset> = None;
    for p in paths {
        let p = p.as_ref();
        let bytes = fs::read(p)?;
        let part = parse_cifar10(&bytes, &p.display().to_string(), norm)?;
        match &mut all {
            Some(d) => {
                d.images.extend(part.images);
                d.labels.extend(part.labels);
            }
            None => all = Some(part),
        }
    }
    all.ok_or_else(|| Error::Data("no CIFAR-10 files given".into()))
}

/// Inverse of [`parse_cifar10`]; pixels are rounded back to bytes.
pub fn to_cifar10_bytes(ds: &Dataset, norm: &Normalization) -> Result<Vec<u8>> {
    if ds.channels != CIFAR_CHANNELS || ds.side != CIFAR_SIDE || ds.classes > 256 {
        return Err(Error::Data(format!(
            "a {}x{}x{} dataset with {} classes does not fit the CIFAR-10 layout",
            ds.channels, ds.side, ds.side, ds.classes
        )));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for i in 0..ds.len() {
        out.push(ds.labels[i] as u8);
        out.extend(
            ds.image(i)
                .iter()
                .enumerate()
                .map(|(j, &v)| (norm.denormalize(j / plane, v) * 255.0).round().clamp(0.0, 255.0) as u8),
        );
    }
    Ok(out)
}

pub fn write_cifar10_bin(path: &Path, ds: &Dataset, norm: &Normalization) -> Result<()> {
    fs::write(path, to_cifar10_bytes(ds, norm)?)?;
    Ok(())
}

const BLOBS_PER_CLASS: usize = 2;
const NOISE_STD: f64 = 0.3;

/// Class-conditional Gaussian-blob images, labels assigned round-robin.
pub fn synthetic_dataset(n: usize, classes: usize, side: usize, seed: u64) -> Result<Dataset> {
    if classes == 0 || n < classes || side == 0 {
        return Err(Error::config(format!(
            "synthetic set needs n >= classes >= 1 and a positive side, got n={n}, classes={classes}, side={side}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = side * side;
    let img_len = CIFAR_CHANNELS * plane;
    let mut means = vec![0.0; classes * img_len];
    for proto in means.chunks_mut(img_len) {
        for _ in 0..BLOBS_PER_CLASS {
            let cy = rng.gen_range(0.0..side as f64);
            let cx = rng.gen_range(0.0..side as f64);
            let radius = rng.gen_range(0.15..0.35) * side as f64;
            let color: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.5..1.5));
            for (ch, col) in color.iter().enumerate() {
                for y in 0..side {
                    for x in 0..side {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        proto[ch * plane + y * side + x] += col * (-d2 / (2.0 * radius * radius)).exp();
                    }
                }
            }
        }
    }
    let min_dist = (0..classes)
        .flat_map(|a| (a + 1..classes).map(move |b| (a, b)))
        .map(|(a, b)| {
            let (pa, pb) = (&means[a * img_len..(a + 1) * img_len], &means[b * img_len..(b + 1) * img_len]);
            pa.iter().zip(pb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        })
        .fold(f64::INFINITY, f64::min);
    if min_dist.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Data("synthetic class means coincide".into()));
    }
    let noise = Normal::new(0.0, NOISE_STD).map_err(|e| Error::config(e.to_string()))?;
    let mut images = Vec::with_capacity(n * img_len);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for &l in &labels {
        let proto = &means[l * img_len..(l + 1) * img_len];
        images.extend(proto.iter().map(|m| m + noise.sample(&mut rng)));
    }
    Dataset::new(images, labels, CIFAR_CHANNELS, side, classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentPolicy {
    #[default]
    None,
    /// Pad-4 random crop and horizontal flip with probability 1/2.
    Basic,
}

impl std::str::FromStr for AugmentPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "basic" => Ok(Self::Basic),
            _ => Err(Error::Parse(format!("unknown augmentation `{s}` (none|basic)"))),
        }
    }
}

pub const CROP_PAD: usize = 4;

/// Mirrors every row of a `[C, side, side]` image.
pub fn flip_horizontal(image: &[f64], side: usize) -> Vec<f64> {
    image.chunks(side).flat_map(|row| row.iter().rev().copied()).collect()
}

/// Shifts a `[C, side, side]` image by `(dy, dx)`, filling with zeros; the
/// crop of a zero-padded image whose window is offset from the centre.
pub fn shift_crop(image: &[f64], side: usize, dy: isize, dx: isize) -> Vec<f64> {
    let plane = side * side;
    let mut out = vec![0.0; image.len()];
    for (src, dst) in image.chunks(plane).zip(out.chunks_mut(plane)) {
        for y in 0..side {
            let sy = y as isize + dy;
            if sy < 0 || sy >= side as isize {
                continue;
            }
            for x in 0..side {
                let sx = x as isize + dx;
                if sx >= 0 && sx < side as isize {
                    dst[y * side + x] = src[sy as usize * side + sx as usize];
                }
            }
        }
    }
    out
}

pub fn augment<R: Rng + ?Sized>(image: &[f64], side: usize, rng: &mut R, policy: AugmentPolicy) -> Vec<f64> {
    match policy {
        AugmentPolicy::None => image.to_vec(),
        AugmentPolicy::Basic => {
            let p = CROP_PAD as isize;
            let (dy, dx) = (rng.gen_range(-p..=p), rng.gen_range(-p..=p));
            let cropped = shift_crop(image, side, dy, dx);
            if rng.gen_bool(0.5) {
                flip_horizontal(&cropped, side)
            } else {
                cropped
            }
        }
    }
}

fn epoch_rng(seed: u64, epoch: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_mul(2).wrapping_add(stream));
    rng
}

/// One epoch of shuffled batches; the last partial batch is kept.
pub struct BatchIter<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    policy: AugmentPolicy,
    rng: ChaCha8Rng,
}

impl<'a> BatchIter<'a> {
    pub fn new(ds: &'a Dataset, batch_size: usize, seed: u64, epoch: u64, policy: AugmentPolicy) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut epoch_rng(seed, epoch, 0));
        Ok(Self { ds, order, batch_size, pos: 0, policy, rng: epoch_rng(seed, epoch, 1) })
    }

    /// Sequential order, no augmentation; for evaluation.
    pub fn sequential(ds: &'a Dataset, batch_size: usize) -> Result<Self> {
        let mut it = Self::new(ds, batch_size, 0, 0, AugmentPolicy::None)?;
        it.order.sort_unstable();
        Ok(it)
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let side = self.ds.side;
        let mut images = Vec::with_capacity(idx.len() * self.ds.image_len());
        for &i in idx {
            images.extend(augment(self.ds.image(i), side, &mut self.rng, self.policy));
        }
        let images = Tensor::from_vec(&[idx.len(), self.ds.channels, side, side], images).ok()?;
        Some(Batch { images, labels: idx.iter().map(|&i| self.ds.labels[i]).collect() })
    }
}

pub fn batch_iter(ds: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Result<BatchIter<'_>> {
    BatchIter::new(ds, batch_size, seed, epoch, AugmentPolicy::None)
}
