//! In-memory image datasets: a seeded synthetic generator plus IDX and
//! CIFAR-binary readers. Pixels are f32 in `[0, 1]`.

use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Per-sample `[c, h, w]`.
    pub sample_shape: Vec<usize>,
    pub num_classes: usize,
    images: Vec<f32>,
    labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(sample_shape: Vec<usize>, num_classes: usize, images: Vec<f32>, labels: Option<Vec<usize>>) -> Result<Self> {
        let per = sample_shape.iter().product::<usize>();
        if sample_shape.len() != 3 || per == 0 || !images.len().is_multiple_of(per) {
            return Err(Error::shape("dataset images", "whole [c, h, w] samples", &sample_shape));
        }
        let n = images.len() / per;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::invalid(format!("{n} images but {} labels", l.len())));
            }
            if let Some(bad) = l.iter().find(|&&y| y >= num_classes) {
                return Err(Error::invalid(format!("label {bad} outside [0, {num_classes})")));
            }
        }
        Ok(Self {
            sample_shape,
            num_classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len() / self.sample_len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Stacks the given samples into `[batch, c, h, w]`.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        Tensor::new(shape, data).expect("whole samples")
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            sample_shape: self.sample_shape.clone(),
            num_classes: self.num_classes,
            images,
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Seeded shuffle, then the first `train_fraction` of samples train and
    /// the rest validate.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::invalid(format!("train fraction {train_fraction} outside (0, 1)")));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = ((self.len() as f64) * train_fraction).round() as usize;
        let cut = cut.clamp(1.min(self.len()), self.len().saturating_sub(1));
        Ok((self.subset(&order[..cut]), self.subset(&order[cut..])))
    }

    pub fn without_labels(&self) -> Dataset {
        Dataset {
            labels: None,
            ..self.clone()
        }
    }

    /// Same images with the label column shuffled.
    pub fn with_permuted_labels(&self, seed: u64) -> Dataset {
        let mut out = self.clone();
        if let Some(l) = &mut out.labels {
            l.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        out
    }
}

/// Class-conditional synthetic images. Every class has a colour offset and
/// a zero-mean spatial grating; each sample scales the colour part by its
/// own random strength so some samples are separable from colour alone and
/// others need the spatial pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobConfig {
    pub num_samples: usize,
    pub num_classes: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_size")]
    pub image_size: usize,
    #[serde(default = "default_color")]
    pub color_scale: f32,
    #[serde(default = "default_pattern")]
    pub pattern_scale: f32,
    #[serde(default = "default_noise")]
    pub noise: f32,
    pub seed: u64,
}

fn default_channels() -> usize {
    3
}
fn default_size() -> usize {
    16
}
fn default_color() -> f32 {
    0.25
}
fn default_pattern() -> f32 {
    0.2
}
fn default_noise() -> f32 {
    0.2
}

impl BlobConfig {
    pub fn new(num_samples: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            num_samples,
            num_classes,
            channels: default_channels(),
            image_size: default_size(),
            color_scale: default_color(),
            pattern_scale: default_pattern(),
            noise: default_noise(),
            seed,
        }
    }
}

pub fn synthetic_blobs(cfg: &BlobConfig) -> Result<Dataset> {
    if cfg.num_samples == 0 || cfg.num_classes < 2 || cfg.channels == 0 || cfg.image_size == 0 {
        return Err(Error::invalid("synthetic blobs need samples, >= 2 classes, channels and a size"));
    }
    let (c, s, k) = (cfg.channels, cfg.image_size, cfg.num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut normal = || -> f32 { StandardNormal.sample(&mut rng) };

    let colors: Vec<Vec<f32>> = (0..k).map(|_| (0..c).map(|_| normal()).collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let patterns: Vec<Vec<f32>> = (0..k)
        .map(|class| {
            let angle = PI * class as f32 / k as f32 + rng.random::<f32>() * 0.2;
            let freq = 2.0 * PI * (1.5 + (class % 3) as f32) / s as f32;
            let (fx, fy) = (freq * angle.cos(), freq * angle.sin());
            let signs: Vec<f32> = (0..c).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
            let mut p = Vec::with_capacity(c * s * s);
            for sign in &signs {
                for y in 0..s {
                    for x in 0..s {
                        p.push(sign * (fx * x as f32 + fy * y as f32).cos());
                    }
                }
            }
            p
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut images = Vec::with_capacity(cfg.num_samples * c * s * s);
    let mut labels = Vec::with_capacity(cfg.num_samples);
    for _ in 0..cfg.num_samples {
        let label = rng.random_range(0..k);
        let strength: f32 = rng.random();
        let phase_x = rng.random_range(0..s);
        let phase_y = rng.random_range(0..s);
        for ch in 0..c {
            let base = 0.5 + cfg.color_scale * strength * colors[label][ch];
            for y in 0..s {
                for x in 0..s {
                    // translate the grating so position alone carries no signal
                    let idx = ch * s * s + ((y + phase_y) % s) * s + (x + phase_x) % s;
                    let n: f32 = StandardNormal.sample(&mut rng);
                    let v = base + cfg.pattern_scale * patterns[label][idx] + cfg.noise * n;
                    images.push(v.clamp(0.0, 1.0));
                }
            }
        }
        labels.push(label);
    }
    Dataset::new(vec![c, s, s], k, images, Some(labels))
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::DatasetFormat {
        offset: offset as u64,
        message: message.into(),
    }
}

/// A parsed IDX array: dims plus values converted to f64.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
    /// Type code from the header (0x08 for unsigned bytes).
    pub type_code: u8,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(format_err(0, "bad IDX magic: the first two bytes must be zero"));
    }
    let type_code = bytes[2];
    let width = match type_code {
        0x08 | 0x09 => 1,
        0x0B => 2,
        0x0C | 0x0D => 4,
        0x0E => 8,
        other => return Err(format_err(2, format!("unknown IDX type code 0x{other:02x}"))),
    };
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(format_err(3, "IDX array has zero dimensions"));
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(format_err(bytes.len(), format!("header needs {header} bytes")));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let count = dims.iter().product::<usize>();
    let expected = header + count * width;
    if bytes.len() != expected {
        return Err(format_err(
            bytes.len().min(expected),
            format!("dims {dims:?} need {expected} bytes, file has {}", bytes.len()),
        ));
    }
    let body = &bytes[header..];
    let values = body
        .chunks_exact(width)
        .map(|b| match type_code {
            0x08 => b[0] as f64,
            0x09 => b[0] as i8 as f64,
            0x0B => i16::from_be_bytes([b[0], b[1]]) as f64,
            0x0C => i32::from_be_bytes(b.try_into().expect("4 bytes")) as f64,
            0x0D => f32::from_be_bytes(b.try_into().expect("4 bytes")) as f64,
            _ => f64::from_be_bytes(b.try_into().expect("8 bytes")),
        })
        .collect();
    Ok(IdxArray { dims, values, type_code })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// IDX images (`[n, h, w]` or `[n, c, h, w]`) with optional IDX labels.
/// Unsigned-byte images are scaled by 1/255; other types must already lie
/// in `[0, 1]`.
pub fn load_idx(images: &Path, labels: Option<&Path>, num_classes: usize) -> Result<Dataset> {
    let arr = parse_idx(&read(images)?)?;
    let shape = match arr.dims[..] {
        [_, h, w] => vec![1, h, w],
        [_, c, h, w] => vec![c, h, w],
        _ => return Err(format_err(3, format!("expected 3 or 4 image dims, got {:?}", arr.dims))),
    };
    let scale = if arr.type_code == 0x08 { 1.0 / 255.0 } else { 1.0 };
    let pixels: Vec<f32> = arr.values.iter().map(|v| (v * scale) as f32).collect();
    if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(format_err(4 + 4 * arr.dims.len(), "pixel values outside [0, 1]"));
    }
    let labels = match labels {
        Some(p) => {
            let l = parse_idx(&read(p)?)?;
            if l.dims.len() != 1 || l.dims[0] != arr.dims[0] {
                return Err(format_err(4, format!("label dims {:?} do not match {} images", l.dims, arr.dims[0])));
            }
            let mut out = Vec::with_capacity(l.values.len());
            for (i, v) in l.values.iter().enumerate() {
                if *v < 0.0 || *v >= num_classes as f64 || v.fract() != 0.0 {
                    return Err(format_err(8 + i, format!("label {v} outside [0, {num_classes})")));
                }
                out.push(*v as usize);
            }
            Some(out)
        }
        None => None,
    };
    Dataset::new(shape, num_classes, pixels, labels)
}

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// CIFAR-10 binary batches: one label byte plus 3072 channel-major pixels
/// per record.
pub fn parse_cifar_binary(bytes: &[u8], num_classes: usize) -> Result<(Vec<f32>, Vec<usize>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let whole = bytes.len() / CIFAR_RECORD;
        return Err(format_err(
            whole * CIFAR_RECORD,
            format!(
                "file size {} is not a multiple of the {CIFAR_RECORD}-byte record; trailing partial record",
                bytes.len()
            ),
        ));
    }
    let mut pixels = Vec::with_capacity(bytes.len() / CIFAR_RECORD * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= num_classes {
            return Err(format_err(r * CIFAR_RECORD, format!("label {label} outside [0, {num_classes})")));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

pub fn load_cifar_binary(paths: &[PathBuf], num_classes: usize) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let (px, l) = parse_cifar_binary(&read(p)?, num_classes)?;
        pixels.extend(px);
        labels.extend(l);
    }
    Dataset::new(vec![3, 32, 32], num_classes, pixels, Some(labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSource {
    SyntheticBlobs(BlobConfig),
    IdxImages {
        images: PathBuf,
        #[serde(default)]
        labels: Option<PathBuf>,
        num_classes: usize,
    },
    CifarBinary {
        files: Vec<PathBuf>,
        #[serde(default = "ten")]
        num_classes: usize,
    },
}

fn ten() -> usize {
    10
}

pub fn load_dataset(source: &DatasetSource) -> Result<Dataset> {
    match source {
        DatasetSource::SyntheticBlobs(cfg) => synthetic_blobs(cfg),
        DatasetSource::IdxImages {
            images,
            labels,
            num_classes,
        } => load_idx(images, labels.as_deref(), *num_classes),
        DatasetSource::CifarBinary { files, num_classes } => load_cifar_binary(files, *num_classes),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_deterministic_and_in_range() {
        let cfg = BlobConfig::new(100, 10, 7);
        let a = synthetic_blobs(&cfg).unwrap();
        let b = synthetic_blobs(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        assert!(a.images().iter().all(|p| (0.0..=1.0).contains(p)));
        assert!(a.labels().unwrap().iter().all(|&l| l < 10));
    }

    #[test]
    fn split_partitions() {
        let d = synthetic_blobs(&BlobConfig::new(50, 3, 1)).unwrap();
        let (t, v) = d.split(0.9, 3).unwrap();
        assert_eq!((t.len(), v.len()), (45, 5));
        assert!(d.split(1.0, 3).is_err());
    }

    #[test]
    fn idx_bad_magic_at_offset_zero() {
        let err = parse_idx(&[1, 0, 8, 1, 0, 0, 0, 0]).unwrap_err();
        assert!(matches!(err, Error::DatasetFormat { offset: 0, .. }));
    }

    #[test]
    fn idx_roundtrip() {
        let mut bytes = vec![0, 0, 0x08, 3, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 2];
        bytes.extend_from_slice(&[0, 255, 51, 102]);
        let a = parse_idx(&bytes).unwrap();
        assert_eq!(a.dims, vec![2, 1, 2]);
        assert_eq!(a.values, vec![0.0, 255.0, 51.0, 102.0]);
        assert!(matches!(parse_idx(&bytes[..19]), Err(Error::DatasetFormat { .. })));
    }

    #[test]
    fn cifar_record_arithmetic() {
        let mut bytes = vec![0u8; 30_730];
        for r in 0..10 {
            bytes[r * CIFAR_RECORD] = r as u8;
        }
        let (px, labels) = parse_cifar_binary(&bytes, 10).unwrap();
        assert_eq!(labels, (0..10).collect::<Vec<_>>());
        assert_eq!(px.len(), 30_720);
        let err = parse_cifar_binary(&bytes[..30_729], 10).unwrap_err();
        assert!(matches!(err, Error::DatasetFormat { offset: 27_657, .. }));
    }
}
