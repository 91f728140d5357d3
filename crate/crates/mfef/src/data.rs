//! Dataset ingestion, augmentation, batching, and the synthetic blob
//! generator used by the desk-scale experiments.
//!
//! CIFAR files are read in the public binary layout: CIFAR-10 records are
//! 3073 bytes (label byte + 3x1024 channel-planar pixels), CIFAR-100 records
//! are 3074 bytes (coarse label, fine label, pixels). Pixels are scaled to
//! [0, 1] and normalized with per-channel statistics computed once from the
//! training split.

use std::path::Path;

use ndarray::{Array1, Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{MfefError, Result};
use crate::rng::SeedRng;
use crate::tensor::{LabelBatch, Scalar};

pub const CIFAR_PIXELS: usize = 3 * 32 * 32;
pub const CIFAR10_RECORD_BYTES: usize = 1 + CIFAR_PIXELS;
pub const CIFAR100_RECORD_BYTES: usize = 2 + CIFAR_PIXELS;

/// One raw CIFAR record, bit-faithful to the file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CifarRecord {
    pub label: u8,
    /// CIFAR-100 coarse label; `None` for CIFAR-10.
    pub coarse_label: Option<u8>,
    pub pixels: Vec<u8>,
}

pub fn parse_cifar10(bytes: &[u8]) -> Result<Vec<CifarRecord>> {
    if bytes.len() % CIFAR10_RECORD_BYTES != 0 {
        return Err(MfefError::DataFormat {
            offset: bytes.len() - bytes.len() % CIFAR10_RECORD_BYTES,
            message: format!(
                "truncated record: {} trailing bytes (records are {CIFAR10_RECORD_BYTES} bytes)",
                bytes.len() % CIFAR10_RECORD_BYTES
            ),
        });
    }
    bytes
        .chunks_exact(CIFAR10_RECORD_BYTES)
        .enumerate()
        .map(|(i, chunk)| {
            let label = chunk[0];
            if label > 9 {
                return Err(MfefError::DataFormat {
                    offset: i * CIFAR10_RECORD_BYTES,
                    message: format!("label byte {label} out of range 0-9"),
                });
            }
            Ok(CifarRecord {
                label,
                coarse_label: None,
                pixels: chunk[1..].to_vec(),
            })
        })
        .collect()
}

pub fn encode_cifar10(records: &[CifarRecord]) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * CIFAR10_RECORD_BYTES);
    for r in records {
        out.push(r.label);
        out.extend_from_slice(&r.pixels);
    }
    out
}

pub fn parse_cifar100(bytes: &[u8]) -> Result<Vec<CifarRecord>> {
    if bytes.len() % CIFAR100_RECORD_BYTES != 0 {
        return Err(MfefError::DataFormat {
            offset: bytes.len() - bytes.len() % CIFAR100_RECORD_BYTES,
            message: format!(
                "truncated record: {} trailing bytes (records are {CIFAR100_RECORD_BYTES} bytes)",
                bytes.len() % CIFAR100_RECORD_BYTES
            ),
        });
    }
    bytes
        .chunks_exact(CIFAR100_RECORD_BYTES)
        .enumerate()
        .map(|(i, chunk)| {
            let coarse = chunk[0];
            let fine = chunk[1];
            if coarse > 19 {
                return Err(MfefError::DataFormat {
                    offset: i * CIFAR100_RECORD_BYTES,
                    message: format!("coarse label byte {coarse} out of range 0-19"),
                });
            }
            if fine > 99 {
                return Err(MfefError::DataFormat {
                    offset: i * CIFAR100_RECORD_BYTES + 1,
                    message: format!("fine label byte {fine} out of range 0-99"),
                });
            }
            Ok(CifarRecord {
                label: fine,
                coarse_label: Some(coarse),
                pixels: chunk[2..].to_vec(),
            })
        })
        .collect()
}

pub fn encode_cifar100(records: &[CifarRecord]) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * CIFAR100_RECORD_BYTES);
    for r in records {
        out.push(r.coarse_label.unwrap_or(0));
        out.push(r.label);
        out.extend_from_slice(&r.pixels);
    }
    out
}

/// In-memory labeled image set, channels-first.
#[derive(Debug, Clone)]
pub struct LabeledSet<F: Scalar> {
    pub images: Array4<F>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl<F: Scalar> LabeledSet<F> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label_batch(&self, indices: &[usize]) -> Result<LabelBatch> {
        let labels: Vec<usize> = indices.iter().map(|&i| self.labels[i]).collect();
        LabelBatch::new(Array1::from(labels), self.num_classes)
    }

    /// First `n` samples, in stored order.
    pub fn take(&self, n: usize) -> LabeledSet<F> {
        let n = n.min(self.len());
        LabeledSet {
            images: self.images.slice(ndarray::s![0..n, .., .., ..]).to_owned(),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
        }
    }
}

/// Per-channel normalization statistics (computed on the training split).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn compute_channel_stats<F: Scalar>(images: &Array4<F>) -> ChannelStats {
    let c = images.shape()[1];
    let mut mean = vec![0.0f64; c];
    let mut std = vec![0.0f64; c];
    for ci in 0..c {
        let ch = images.index_axis(Axis(1), ci);
        let n = ch.len() as f64;
        let m: f64 = ch.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let var: f64 = ch.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>() / n;
        mean[ci] = m;
        std[ci] = var.sqrt().max(1e-8);
    }
    ChannelStats { mean, std }
}

pub fn apply_normalization<F: Scalar>(images: &mut Array4<F>, stats: &ChannelStats) {
    for ci in 0..images.shape()[1] {
        let m = F::from_f64(stats.mean[ci]);
        let s = F::from_f64(stats.std[ci]);
        images
            .index_axis_mut(Axis(1), ci)
            .mapv_inplace(|v| (v - m) / s);
    }
}

/// Train/test pair with the statistics that normalized both splits.
#[derive(Debug, Clone)]
pub struct DatasetPair<F: Scalar> {
    pub train: LabeledSet<F>,
    pub test: LabeledSet<F>,
    pub stats: ChannelStats,
}

fn records_to_set<F: Scalar>(records: &[CifarRecord], num_classes: usize) -> Result<LabeledSet<F>> {
    let n = records.len();
    let mut images = Array4::<F>::zeros((n, 3, 32, 32));
    let mut labels = Vec::with_capacity(n);
    let scale = F::from_f64(1.0 / 255.0);
    for (i, r) in records.iter().enumerate() {
        if r.pixels.len() != CIFAR_PIXELS {
            return Err(MfefError::DataFormat {
                offset: 0,
                message: format!("record {i} has {} pixel bytes", r.pixels.len()),
            });
        }
        let img = images.index_axis_mut(Axis(0), i);
        let flat = img.into_shape_with_order(CIFAR_PIXELS).expect("contiguous");
        for (dst, &src) in flat.into_iter().zip(r.pixels.iter()) {
            *dst = F::from_f64(src as f64) * scale;
        }
        labels.push(r.label as usize);
    }
    Ok(LabeledSet {
        images,
        labels,
        num_classes,
    })
}

fn read_records(path: &Path, kind: CifarKind) -> Result<Vec<CifarRecord>> {
    let bytes = std::fs::read(path).map_err(|e| {
        MfefError::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    match kind {
        CifarKind::Cifar10 => parse_cifar10(&bytes),
        CifarKind::Cifar100 => parse_cifar100(&bytes),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarKind {
    Cifar10,
    Cifar100,
}

/// Loads a CIFAR directory in the standard binary layout, optionally keeping
/// only the first `train_limit`/`test_limit` samples. Normalization is
/// computed from the (possibly truncated) training split and applied to both
/// splits.
pub fn load_cifar<F: Scalar>(
    root: &Path,
    kind: CifarKind,
    train_limit: Option<usize>,
    test_limit: Option<usize>,
) -> Result<DatasetPair<F>> {
    let (train_files, test_file, classes): (Vec<&str>, &str, usize) = match kind {
        CifarKind::Cifar10 => (
            vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            "test_batch.bin",
            10,
        ),
        CifarKind::Cifar100 => (vec!["train.bin"], "test.bin", 100),
    };
    let mut train_records = Vec::new();
    for f in train_files {
        train_records.extend(read_records(&root.join(f), kind)?);
        if let Some(limit) = train_limit {
            if train_records.len() >= limit {
                break;
            }
        }
    }
    if let Some(limit) = train_limit {
        train_records.truncate(limit);
    }
    let mut test_records = read_records(&root.join(test_file), kind)?;
    if let Some(limit) = test_limit {
        test_records.truncate(limit);
    }

    let mut train = records_to_set::<F>(&train_records, classes)?;
    let mut test = records_to_set::<F>(&test_records, classes)?;
    let stats = compute_channel_stats(&train.images);
    apply_normalization(&mut train.images, &stats);
    apply_normalization(&mut test.images, &stats);
    Ok(DatasetPair { train, test, stats })
}

/// Synthetic blob dataset: each class is Gaussian noise (sigma 0.3) around a
/// class-specific smooth template.
#[derive(Debug, Clone)]
pub struct SynthSet<F: Scalar> {
    pub set: LabeledSet<F>,
    /// `(M, 3, size, size)` class templates, before noise.
    pub templates: Array4<F>,
}

pub const SYNTH_NOISE_SIGMA: f64 = 0.3;

/// Bilinear upsampling of a coarse grid to `size x size`.
fn smooth_template(size: usize, rng: &mut SeedRng) -> Array3<f64> {
    let coarse_n = 4usize.min(size);
    let mut coarse = Array3::<f64>::zeros((3, coarse_n, coarse_n));
    coarse.mapv_inplace(|_| rng.uniform());
    let mut out = Array3::<f64>::zeros((3, size, size));
    let scale = coarse_n as f64 / size as f64;
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let fy = (y as f64 + 0.5) * scale - 0.5;
                let fx = (x as f64 + 0.5) * scale - 0.5;
                let y0 = fy.floor().clamp(0.0, (coarse_n - 1) as f64) as usize;
                let x0 = fx.floor().clamp(0.0, (coarse_n - 1) as f64) as usize;
                let y1 = (y0 + 1).min(coarse_n - 1);
                let x1 = (x0 + 1).min(coarse_n - 1);
                let wy = (fy - y0 as f64).clamp(0.0, 1.0);
                let wx = (fx - x0 as f64).clamp(0.0, 1.0);
                out[[c, y, x]] = coarse[[c, y0, x0]] * (1.0 - wy) * (1.0 - wx)
                    + coarse[[c, y0, x1]] * (1.0 - wy) * wx
                    + coarse[[c, y1, x0]] * wy * (1.0 - wx)
                    + coarse[[c, y1, x1]] * wy * wx;
            }
        }
    }
    out
}

/// Generates `num_classes * per_class` labeled images of shape
/// `(3, size, size)`. Templates are resampled until their minimum pairwise
/// L2 distance clears a floor, so a nearest-template classifier is reliable.
pub fn synth_blobs<F: Scalar>(
    num_classes: usize,
    per_class: usize,
    size: usize,
    rng: &mut SeedRng,
) -> Result<SynthSet<F>> {
    if num_classes < 2 {
        return Err(MfefError::InvalidConfig(format!(
            "synthetic set needs at least 2 classes, got {num_classes}"
        )));
    }
    let dims = (3 * size * size) as f64;
    let floor = dims.sqrt() / 6.0;

    let mut templates: Vec<Array3<f64>> = Vec::with_capacity(num_classes);
    while templates.len() < num_classes {
        let cand = smooth_template(size, rng);
        let ok = templates.iter().all(|t| {
            let d2: f64 = t
                .iter()
                .zip(cand.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d2.sqrt() >= floor
        });
        if ok {
            templates.push(cand);
        }
    }

    let n = num_classes * per_class;
    let mut images = Array4::<F>::zeros((n, 3, size, size));
    let mut labels = Vec::with_capacity(n);
    for k in 0..num_classes {
        for i in 0..per_class {
            let idx = k * per_class + i;
            let mut img = images.index_axis_mut(Axis(0), idx);
            for (dst, &t) in img.iter_mut().zip(templates[k].iter()) {
                *dst = F::from_f64(t + SYNTH_NOISE_SIGMA * rng.standard_normal());
            }
            labels.push(k);
        }
    }

    let mut tmpl = Array4::<F>::zeros((num_classes, 3, size, size));
    for (k, t) in templates.iter().enumerate() {
        for (dst, &v) in tmpl.index_axis_mut(Axis(0), k).iter_mut().zip(t.iter()) {
            *dst = F::from_f64(v);
        }
    }
    Ok(SynthSet {
        set: LabeledSet {
            images,
            labels,
            num_classes,
        },
        templates: tmpl,
    })
}

/// Classifies by nearest template in L2; the independent oracle for the
/// synthetic generator.
pub fn nearest_template_accuracy<F: Scalar>(set: &LabeledSet<F>, templates: &Array4<F>) -> f64 {
    let mut correct = 0usize;
    for i in 0..set.len() {
        let img = set.images.index_axis(Axis(0), i);
        let mut best = f64::INFINITY;
        let mut best_k = 0usize;
        for k in 0..templates.shape()[0] {
            let t = templates.index_axis(Axis(0), k);
            let d2: f64 = img
                .iter()
                .zip(t.iter())
                .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
                .sum();
            if d2 < best {
                best = d2;
                best_k = k;
            }
        }
        if best_k == set.labels[i] {
            correct += 1;
        }
    }
    correct as f64 / set.len() as f64
}

/// Pad / random-crop / horizontal-flip policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub pad: usize,
    pub crop: usize,
    pub horizontal_flip_prob: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            pad: 4,
            crop: 32,
            horizontal_flip_prob: 0.5,
        }
    }
}

/// Zero-pads by `pad` on each side, crops `crop x crop` at a uniform offset,
/// then flips horizontally with the configured probability.
pub fn augment<F: Scalar>(
    image: ArrayView3<'_, F>,
    policy: &AugmentPolicy,
    rng: &mut SeedRng,
) -> Result<Array3<F>> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if h != w {
        return Err(MfefError::InvalidShape(format!(
            "augment expects square images, got {h}x{w}"
        )));
    }
    let padded = h + 2 * policy.pad;
    if policy.crop > padded {
        return Err(MfefError::InvalidConfig(format!(
            "crop {} exceeds padded size {padded}",
            policy.crop
        )));
    }
    let range = padded - policy.crop + 1;
    let oy = rng.below(range);
    let ox = rng.below(range);
    let flip = rng.uniform() < policy.horizontal_flip_prob;

    let mut out = Array3::<F>::zeros((c, policy.crop, policy.crop));
    for ci in 0..c {
        for y in 0..policy.crop {
            for x in 0..policy.crop {
                let sy = (oy + y) as isize - policy.pad as isize;
                let sx = (ox + x) as isize - policy.pad as isize;
                let v = if sy >= 0 && (sy as usize) < h && sx >= 0 && (sx as usize) < w {
                    image[[ci, sy as usize, sx as usize]]
                } else {
                    F::zero()
                };
                let tx = if flip { policy.crop - 1 - x } else { x };
                out[[ci, y, tx]] = v;
            }
        }
    }
    Ok(out)
}

/// Index batches for one epoch: a seeded permutation when shuffling, with the
/// final short batch kept.
pub fn batch_indices(
    len: usize,
    batch_size: usize,
    rng: &mut SeedRng,
    shuffle: bool,
) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be >= 1");
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        rng.shuffle(&mut order);
    }
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_cifar10(n: usize, seed: u64) -> Vec<u8> {
        let mut rng = SeedRng::for_data(seed);
        let mut bytes = Vec::with_capacity(n * CIFAR10_RECORD_BYTES);
        for _ in 0..n {
            bytes.push(rng.below(10) as u8);
            for _ in 0..CIFAR_PIXELS {
                bytes.push(rng.below(256) as u8);
            }
        }
        bytes
    }

    #[test]
    fn cifar10_expected_file_length() {
        assert_eq!(10000 * CIFAR10_RECORD_BYTES, 30_730_000);
    }

    #[test]
    fn cifar10_round_trips_byte_exactly() {
        let bytes = fake_cifar10(7, 1);
        let records = parse_cifar10(&bytes).unwrap();
        assert_eq!(records.len(), 7);
        assert_eq!(encode_cifar10(&records), bytes);
    }

    #[test]
    fn cifar10_rejects_bad_label_with_offset() {
        let mut bytes = fake_cifar10(3, 2);
        bytes[2 * CIFAR10_RECORD_BYTES] = 10;
        match parse_cifar10(&bytes) {
            Err(MfefError::DataFormat { offset, message }) => {
                assert_eq!(offset, 2 * CIFAR10_RECORD_BYTES);
                assert!(message.contains("10"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn cifar10_rejects_truncation_with_offset() {
        let mut bytes = fake_cifar10(2, 3);
        bytes.truncate(CIFAR10_RECORD_BYTES + 100);
        match parse_cifar10(&bytes) {
            Err(MfefError::DataFormat { offset, .. }) => {
                assert_eq!(offset, CIFAR10_RECORD_BYTES);
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn cifar100_round_trips_and_validates_both_labels() {
        let mut rng = SeedRng::for_data(4);
        let mut bytes = Vec::new();
        for _ in 0..4 {
            bytes.push(rng.below(20) as u8);
            bytes.push(rng.below(100) as u8);
            for _ in 0..CIFAR_PIXELS {
                bytes.push(rng.below(256) as u8);
            }
        }
        let records = parse_cifar100(&bytes).unwrap();
        assert_eq!(encode_cifar100(&records), bytes);

        let mut bad = bytes.clone();
        bad[CIFAR100_RECORD_BYTES + 1] = 100;
        match parse_cifar100(&bad) {
            Err(MfefError::DataFormat { offset, .. }) => {
                assert_eq!(offset, CIFAR100_RECORD_BYTES + 1)
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn synth_blobs_is_balanced_and_deterministic() {
        let mut rng = SeedRng::for_data(5);
        let s = synth_blobs::<f32>(4, 125, 16, &mut rng).unwrap();
        assert_eq!(s.set.len(), 500);
        for k in 0..4 {
            assert_eq!(s.set.labels.iter().filter(|&&l| l == k).count(), 125);
        }
        let mut rng2 = SeedRng::for_data(5);
        let s2 = synth_blobs::<f32>(4, 125, 16, &mut rng2).unwrap();
        assert_eq!(s.set.images, s2.set.images);
        assert_eq!(s.set.labels, s2.set.labels);
    }

    #[test]
    fn nearest_template_oracle_is_nearly_perfect_on_fresh_draw() {
        let mut rng = SeedRng::for_data(6);
        let train = synth_blobs::<f64>(4, 50, 16, &mut rng).unwrap();
        // Fresh draw around the same templates.
        let mut fresh = train.set.clone();
        let mut noise_rng = SeedRng::for_data(7);
        for i in 0..fresh.len() {
            let k = fresh.labels[i];
            let mut img = fresh.images.index_axis_mut(Axis(0), i);
            for (dst, &t) in img.iter_mut().zip(train.templates.index_axis(Axis(0), k)) {
                *dst = t + SYNTH_NOISE_SIGMA * noise_rng.standard_normal();
            }
        }
        let acc = nearest_template_accuracy(&fresh, &train.templates);
        assert!(acc >= 0.99, "oracle accuracy {acc}");
    }

    #[test]
    fn augment_identity_when_disabled() {
        let mut rng = SeedRng::for_data(8);
        let img = Array3::from_shape_fn((3, 8, 8), |(c, y, x)| (c + y * 8 + x) as f64);
        let policy = AugmentPolicy {
            pad: 0,
            crop: 8,
            horizontal_flip_prob: 0.0,
        };
        let out = augment(img.view(), &policy, &mut rng).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn forced_flip_is_an_involution() {
        let mut rng = SeedRng::for_data(9);
        let img = Array3::from_shape_fn((1, 4, 4), |(_, y, x)| (y * 4 + x) as f64);
        let policy = AugmentPolicy {
            pad: 0,
            crop: 4,
            horizontal_flip_prob: 1.0,
        };
        let once = augment(img.view(), &policy, &mut rng).unwrap();
        let twice = augment(once.view(), &policy, &mut rng).unwrap();
        assert_eq!(twice, img);
        assert_ne!(once, img);
    }

    #[test]
    fn crop_offsets_are_uniform_over_the_9x9_grid() {
        // pad=4, crop=32 on a 32x32 image: offsets land in {0..8}^2. The
        // output obeys out[y][x] = img[oy+y-4][ox+x-4], so the center marker
        // img[16][16] appears at (20-oy, 20-ox) for every offset. Recover the
        // offsets over 10^4 draws and chi-square against uniformity (80 dof;
        // the 0.999 quantile is ~124.8).
        let mut rng = SeedRng::for_data(10);
        let img = Array3::from_shape_fn((1, 32, 32), |(_, y, x)| (y * 32 + x) as f64 + 1.0);
        let marker = img[[0, 16, 16]];
        let policy = AugmentPolicy {
            pad: 4,
            crop: 32,
            horizontal_flip_prob: 0.0,
        };
        let mut counts = vec![0usize; 81];
        let draws = 10_000usize;
        for _ in 0..draws {
            let out = augment(img.view(), &policy, &mut rng).unwrap();
            let mut found = None;
            for y in 12..=20 {
                for x in 12..=20 {
                    if out[[0, y, x]] == marker {
                        found = Some((20 - y, 20 - x));
                    }
                }
            }
            let (oy, ox) = found.expect("center marker survives every offset");
            counts[oy * 9 + ox] += 1;
        }
        let expected = draws as f64 / 81.0;
        let chi2: f64 = counts
            .iter()
            .map(|&o| {
                let d = o as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 124.8, "chi-square {chi2} rejects uniform offsets");
    }

    #[test]
    fn batches_keep_short_tail_and_are_seeded() {
        let mut rng = SeedRng::for_data(11);
        let b = batch_indices(500, 128, &mut rng, true);
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![128, 128, 128, 116]);
        let mut all: Vec<usize> = b.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..500).collect::<Vec<_>>());

        let mut r1 = SeedRng::for_data(12);
        let mut r2 = SeedRng::for_data(12);
        assert_eq!(batch_indices(50, 8, &mut r1, true), batch_indices(50, 8, &mut r2, true));

        let mut r3 = SeedRng::for_data(13);
        let no_shuffle = batch_indices(10, 4, &mut r3, false);
        assert_eq!(no_shuffle[0], vec![0, 1, 2, 3]);
        assert_eq!(no_shuffle[2], vec![8, 9]);
    }
}
