//! CIFAR-10 binary batches, normalization, augmentation and stratified subsets.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLASSES: usize = 10;
pub const SIDE: usize = 32;
pub const PLANE: usize = SIDE * SIDE;
pub const IMAGE_BYTES: usize = 3 * PLANE;
/// One label byte followed by planar R, G, B.
pub const RECORD_BYTES: usize = 1 + IMAGE_BYTES;
pub const PAD: usize = 4;

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

#[derive(Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub label: u8,
    /// `3 × 32 × 32` bytes, channel planes in R, G, B order.
    pub pixels: Vec<u8>,
}

impl std::fmt::Debug for ImageRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ImageRecord {{ label: {}, .. }}", self.label)
    }
}

impl ImageRecord {
    pub fn new(label: u8, pixels: Vec<u8>) -> Result<Self> {
        if usize::from(label) >= CLASSES {
            return Err(Error::data(format!("label {label} outside 0..{CLASSES}")));
        }
        if pixels.len() != IMAGE_BYTES {
            return Err(Error::data(format!("image has {} bytes, expected {IMAGE_BYTES}", pixels.len())));
        }
        Ok(ImageRecord { label, pixels })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(RECORD_BYTES);
        out.push(self.label);
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Parses concatenated records. Record `k` starts at byte `3073·k`.
pub fn parse_records(bytes: &[u8]) -> Result<Vec<ImageRecord>> {
    let whole = bytes.len() / RECORD_BYTES;
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::Format {
            offset: (whole * RECORD_BYTES) as u64,
            message: format!(
                "truncated record: {} trailing bytes, records are {RECORD_BYTES} bytes",
                bytes.len() % RECORD_BYTES
            ),
        });
    }
    bytes
        .chunks_exact(RECORD_BYTES)
        .enumerate()
        .map(|(k, rec)| {
            let label = rec[0];
            if usize::from(label) >= CLASSES {
                return Err(Error::Format {
                    offset: (k * RECORD_BYTES) as u64,
                    message: format!("label byte {label} outside 0..{CLASSES}"),
                });
            }
            Ok(ImageRecord {
                label,
                pixels: rec[1..].to_vec(),
            })
        })
        .collect()
}

pub fn load_batch_file(path: impl AsRef<Path>) -> Result<Vec<ImageRecord>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    parse_records(&bytes)
}

pub fn write_batch_file(path: impl AsRef<Path>, records: &[ImageRecord]) -> Result<()> {
    let bytes: Vec<u8> = records.iter().flat_map(ImageRecord::to_bytes).collect();
    fs::write(path, bytes)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct CifarSplits {
    pub train: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
}

/// Reads the five training batches and the test batch from `dir`. A directory
/// holding a `cifar-10-batches-bin` subdirectory is also accepted.
pub fn load_dir(dir: impl AsRef<Path>) -> Result<CifarSplits> {
    let mut dir = dir.as_ref().to_path_buf();
    let nested = dir.join("cifar-10-batches-bin");
    if !dir.join(TRAIN_FILES[0]).exists() && nested.is_dir() {
        dir = nested;
    }
    let mut train = Vec::new();
    for f in TRAIN_FILES {
        let p = dir.join(f);
        if !p.exists() {
            return Err(Error::data(format!("CIFAR-10 batch {} not found", p.display())));
        }
        train.extend(load_batch_file(p)?);
    }
    let p = dir.join(TEST_FILE);
    if !p.exists() {
        return Err(Error::data(format!("CIFAR-10 batch {} not found", p.display())));
    }
    Ok(CifarSplits {
        train,
        test: load_batch_file(p)?,
    })
}

pub fn class_histogram(records: &[ImageRecord]) -> [usize; CLASSES] {
    let mut h = [0; CLASSES];
    for r in records {
        h[usize::from(r.label)] += 1;
    }
    h
}

/// Per-channel standardization constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.4914, 0.4822, 0.4465],
            std: [0.2470, 0.2435, 0.2616],
        }
    }
}

impl Normalization {
    #[inline]
    fn apply(&self, c: usize, byte: u8) -> f32 {
        (f32::from(byte) / 255.0 - self.mean[c]) / self.std[c]
    }
}

/// `(pixel/255 − mean)/std` per channel; shape `(3, 32, 32)`.
pub fn normalize(img: &ImageRecord, norm: &Normalization) -> Tensor<f32> {
    let data = img
        .pixels
        .chunks_exact(PLANE)
        .enumerate()
        .flat_map(|(c, plane)| plane.iter().map(move |&b| norm.apply(c, b)))
        .collect();
    Tensor::from_vec(&[3, SIDE, SIDE], data).expect("fixed image shape")
}

/// Inverse of [`normalize`], rounded to the nearest byte.
pub fn denormalize(t: &Tensor<f32>, norm: &Normalization) -> Result<Vec<u8>> {
    if t.shape() != [3, SIDE, SIDE] {
        return Err(Error::shape(format!("expected (3, 32, 32), got {:?}", t.shape())));
    }
    Ok(t.data()
        .chunks_exact(PLANE)
        .enumerate()
        .flat_map(|(c, plane)| {
            plane
                .iter()
                .map(move |&v| ((v * norm.std[c] + norm.mean[c]) * 255.0).round().clamp(0.0, 255.0) as u8)
        })
        .collect())
}

/// Crop offset into the zero-padded 40×40 image, and whether to mirror.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentParams {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

impl AugmentParams {
    /// The crop that reproduces the original image.
    pub const IDENTITY: AugmentParams = AugmentParams {
        dy: PAD,
        dx: PAD,
        flip: false,
    };

    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AugmentParams {
            dy: rng.random_range(0..=2 * PAD),
            dx: rng.random_range(0..=2 * PAD),
            flip: rng.random_bool(0.5),
        }
    }
}

/// Pads by 4 zero pixels, crops 32×32 at the given offset, optionally mirrors,
/// then normalizes.
pub fn augment_with(img: &ImageRecord, p: AugmentParams, norm: &Normalization) -> Tensor<f32> {
    let mut data = Vec::with_capacity(IMAGE_BYTES);
    for (c, plane) in img.pixels.chunks_exact(PLANE).enumerate() {
        let zero = norm.apply(c, 0);
        for r in 0..SIDE {
            let sr = (r + p.dy).checked_sub(PAD).filter(|&v| v < SIDE);
            for col in 0..SIDE {
                let col = if p.flip { SIDE - 1 - col } else { col };
                let sc = (col + p.dx).checked_sub(PAD).filter(|&v| v < SIDE);
                data.push(match (sr, sc) {
                    (Some(sr), Some(sc)) => norm.apply(c, plane[sr * SIDE + sc]),
                    _ => zero,
                });
            }
        }
    }
    Tensor::from_vec(&[3, SIDE, SIDE], data).expect("fixed image shape")
}

/// [`augment_with`] using parameters drawn from `seed`.
pub fn augment(img: &ImageRecord, seed: u64, norm: &Normalization) -> Tensor<f32> {
    augment_with(img, AugmentParams::from_seed(seed), norm)
}

/// Stratified sample of `n` record indices. Each class contributes `n / 10`,
/// the remainder going one each to the lowest classes. Indices are returned in
/// ascending order.
pub fn subset(records: &[ImageRecord], n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > records.len() {
        return Err(Error::param(format!("subset of {n} from {} records", records.len())));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); CLASSES];
    for (i, r) in records.iter().enumerate() {
        by_class[usize::from(r.label)].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for (c, idx) in by_class.iter_mut().enumerate() {
        let want = n / CLASSES + usize::from(c < n % CLASSES);
        if want > idx.len() {
            return Err(Error::param(format!(
                "class {c} has {} records, stratified subset needs {want}",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        out.extend_from_slice(&idx[..want]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Batch tensor `(N, 3, 32, 32)` and labels from selected records.
pub fn make_batch<'a>(
    records: impl IntoIterator<Item = (&'a ImageRecord, Tensor<f32>)>,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    let (labels, images): (Vec<usize>, Vec<Tensor<f32>>) = records
        .into_iter()
        .map(|(r, t)| (usize::from(r.label), t))
        .unzip();
    Ok((Tensor::stack(&images)?, labels))
}

/// Deterministic synthetic CIFAR-format records whose class is visible in the
/// pixels (a class-specific colour cast and stripe pattern plus noise).
pub fn synthetic_records(n: usize, seed: u64) -> Vec<ImageRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = (i % CLASSES) as u8;
            let l = usize::from(label);
            let mut pixels = Vec::with_capacity(IMAGE_BYTES);
            for c in 0..3 {
                let base = 40 + ((l * 37 + c * 71) % 150) as i32;
                for r in 0..SIDE {
                    for col in 0..SIDE {
                        let stripe = if (r * (l % 3 + 1) + col * (l / 3 + 1)) / 4 % 2 == 0 { 50 } else { -30 };
                        let noise = rng.random_range(-25..=25);
                        pixels.push((base + stripe + noise).clamp(0, 255) as u8);
                    }
                }
            }
            ImageRecord { label, pixels }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_truncated_inputs() {
        assert!(parse_records(&[]).unwrap().is_empty());
        match parse_records(&[0u8; 3072]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        match parse_records(&[0u8; RECORD_BYTES * 2 + 5]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 2 * RECORD_BYTES as u64),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_label_reports_record_offset() {
        let mut bytes = vec![0u8; RECORD_BYTES * 3];
        bytes[RECORD_BYTES * 2] = 10;
        match parse_records(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 2 * RECORD_BYTES as u64),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mean_pixel_normalizes_to_zero() {
        let mut px = vec![0u8; IMAGE_BYTES];
        px[0] = 125;
        let img = ImageRecord::new(0, px).unwrap();
        let t = normalize(&img, &Normalization::default());
        assert!(t.data()[0].abs() < 0.01);
        let exact = (125.237f32 / 255.0 - 0.4914) / 0.2470;
        assert!(exact.abs() < 2e-3);
    }

    #[test]
    fn identity_crop_equals_normalize() {
        let img = synthetic_records(1, 5).remove(0);
        let norm = Normalization::default();
        assert_eq!(augment_with(&img, AugmentParams::IDENTITY, &norm), normalize(&img, &norm));
    }

    #[test]
    fn subset_is_stratified_and_deterministic() {
        let recs = synthetic_records(300, 1);
        let a = subset(&recs, 100, 3).unwrap();
        assert_eq!(a, subset(&recs, 100, 3).unwrap());
        let picked: Vec<ImageRecord> = a.iter().map(|&i| recs[i].clone()).collect();
        assert_eq!(class_histogram(&picked), [10; CLASSES]);
        assert!(matches!(subset(&recs, 301, 0), Err(Error::Parameter(_))));
    }
}
