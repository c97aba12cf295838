//! Dataset ingestion and batching.
//!
//! Three sources: IDX image/label pairs (big-endian, magic-tagged), the
//! CIFAR-10 binary batch format (3073-byte records), and a synthetic
//! Gaussian-cluster generator used as the fast experiment substrate. Pixels
//! are scaled to `[0, 1]` on load. Batch iteration draws a fixed permutation
//! per `(seed, epoch)` and includes the final partial batch.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::rng::Rng;
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 3073;
const CIFAR_RECORDS_PER_FILE: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images `[N, C, H, W]` in `[0, 1]` with integer labels.
#[derive(Clone, Debug)]
pub struct Dataset<E> {
    pub images: Tensor<E>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl<E: Float> Dataset<E> {
    pub fn new(
        images: Tensor<E>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::dim(format!(
                "dataset images must be [N, C, H, W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::dim(format!(
                "{} images vs {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::format(
                format!("label {bad} out of range for {num_classes} classes"),
                None,
            ));
        }
        Ok(Dataset { images, labels, num_classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Assemble the rows named by `indices` into a batch tensor plus labels.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<E>, Vec<usize>) {
        let s = self.images.shape();
        let chw: usize = s[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * chw);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * chw..(i + 1) * chw]);
            labels.push(self.labels[i]);
        }
        let images = Tensor::new(vec![indices.len(), s[1], s[2], s[3]], data)
            .expect("gather preserves layout");
        (images, labels)
    }
}

/// Train/test pair from one source.
#[derive(Clone, Debug)]
pub struct DataPair<E> {
    pub train: Dataset<E>,
    pub test: Dataset<E>,
}

// ---- IDX format ----

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                format!("{}: truncated (wanted {n} bytes)", self.path.display()),
                Some(self.pos as u64),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32_be(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Load an IDX image file plus its label file (MNIST layout).
pub fn load_idx<E: Float>(
    images_path: &Path,
    labels_path: &Path,
    split: Split,
) -> Result<Dataset<E>> {
    let image_bytes = std::fs::read(images_path)
        .map_err(|e| Error::format(format!("{}: {e}", images_path.display()), None))?;
    let mut r = ByteReader { bytes: &image_bytes, pos: 0, path: images_path };
    let magic = r.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            format!("{}: bad image magic {magic:#010x}", images_path.display()),
            Some(0),
        ));
    }
    let n = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    let pixels = r.take(n * rows * cols)?;
    if r.pos != image_bytes.len() {
        return Err(Error::format(
            format!("{}: {} trailing bytes", images_path.display(), image_bytes.len() - r.pos),
            Some(r.pos as u64),
        ));
    }

    let label_bytes = std::fs::read(labels_path)
        .map_err(|e| Error::format(format!("{}: {e}", labels_path.display()), None))?;
    let mut lr = ByteReader { bytes: &label_bytes, pos: 0, path: labels_path };
    let lmagic = lr.u32_be()?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            format!("{}: bad label magic {lmagic:#010x}", labels_path.display()),
            Some(0),
        ));
    }
    let ln = lr.u32_be()? as usize;
    if ln != n {
        return Err(Error::format(
            format!("{} labels for {n} images", ln),
            Some(4),
        ));
    }
    let raw_labels = lr.take(ln)?;
    if lr.pos != label_bytes.len() {
        return Err(Error::format(
            format!("{}: {} trailing bytes", labels_path.display(), label_bytes.len() - lr.pos),
            Some(lr.pos as u64),
        ));
    }

    let scale = E::from_f64(1.0 / 255.0);
    let data: Vec<E> = pixels.iter().map(|&b| E::from_f64(f64::from(b)) * scale).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&b| usize::from(b)).collect();
    let num_classes = labels.iter().copied().max().map_or(1, |m| m + 1).max(2);
    let images = Tensor::new(vec![n, 1, rows, cols], data)?;
    Dataset::new(images, labels, num_classes, split)
}

/// Write a single-channel dataset back out as an IDX image/label pair.
/// Pixels are scaled by 255 and rounded, so a loaded IDX dataset
/// round-trips exactly.
pub fn write_idx<E: Float>(ds: &Dataset<E>, images_path: &Path, labels_path: &Path) -> Result<()> {
    let s = ds.images.shape();
    if s[1] != 1 {
        return Err(Error::config(format!("IDX export is single-channel, got {} channels", s[1])));
    }
    let mut img = Vec::with_capacity(16 + ds.images.numel());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(s[0] as u32).to_be_bytes());
    img.extend_from_slice(&(s[2] as u32).to_be_bytes());
    img.extend_from_slice(&(s[3] as u32).to_be_bytes());
    for &v in ds.images.data() {
        img.push((v.to_f64() * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    std::fs::write(images_path, img)?;

    let mut lbl = Vec::with_capacity(8 + ds.labels.len());
    lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(ds.labels.len() as u32).to_be_bytes());
    for &y in &ds.labels {
        lbl.push(y as u8);
    }
    std::fs::write(labels_path, lbl)?;
    Ok(())
}

// ---- CIFAR-10 binary format ----

/// Load the standard CIFAR-10 binary directory: `data_batch_{1..5}.bin`
/// for the train split, `test_batch.bin` for test.
pub fn load_cifar10_bin<E: Float>(dir: &Path, split: Split) -> Result<Dataset<E>> {
    let files: Vec<PathBuf> = match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    };
    let mut data: Vec<E> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let scale = E::from_f64(1.0 / 255.0);
    for file in &files {
        let bytes = std::fs::read(file)
            .map_err(|e| Error::format(format!("{}: {e}", file.display()), None))?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::format(
                format!(
                    "{}: size {} is not a multiple of the {CIFAR_RECORD}-byte record",
                    file.display(),
                    bytes.len()
                ),
                Some((bytes.len() - bytes.len() % CIFAR_RECORD) as u64),
            ));
        }
        // Full-size batches carry exactly 10000 records; accept smaller
        // files only if whole records (handy for fixtures), never larger.
        if bytes.len() / CIFAR_RECORD > CIFAR_RECORDS_PER_FILE {
            return Err(Error::format(
                format!("{}: more than {CIFAR_RECORDS_PER_FILE} records", file.display()),
                None,
            ));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            let label = usize::from(rec[0]);
            if label > 9 {
                return Err(Error::format(
                    format!("{}: label byte {label} out of range", file.display()),
                    None,
                ));
            }
            labels.push(label);
            data.extend(rec[1..].iter().map(|&b| E::from_f64(f64::from(b)) * scale));
        }
    }
    let n = labels.len();
    let images = Tensor::new(vec![n, 3, 32, 32], data)?;
    Dataset::new(images, labels, 10, split)
}

// ---- synthetic clusters ----

/// Generator parameters for Gaussian class clusters rendered as
/// single-channel images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Images are `image_side x image_side`, one channel.
    pub image_side: usize,
    /// Distance scale between class means, in units of the per-pixel noise
    /// sigma (1.0).
    pub separation: f64,
    pub gen_seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("synth: classes must be >= 2".to_string()));
        }
        if self.separation < 0.0 {
            return Err(Error::config("synth: separation must be >= 0".to_string()));
        }
        if self.image_side == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::config("synth: sizes must be positive".to_string()));
        }
        Ok(())
    }
}

/// Generating parameters kept alongside the data so the exact Bayes
/// classifier stays computable.
#[derive(Clone, Debug)]
pub struct SynthMeta {
    /// Class means in pixel space, after the affine map to `[0, 1]`.
    pub means: Vec<Vec<f64>>,
    /// Per-pixel noise sigma after the affine map.
    pub sigma: f64,
}

impl SynthMeta {
    /// Accuracy of the exact Bayes classifier (equal priors, shared
    /// isotropic covariance: nearest mean) on a dataset.
    pub fn bayes_accuracy<E: Float>(&self, ds: &Dataset<E>) -> f64 {
        let dim: usize = ds.images.shape()[1..].iter().product();
        let mut correct = 0usize;
        for i in 0..ds.len() {
            let x = &ds.images.data()[i * dim..(i + 1) * dim];
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, mu) in self.means.iter().enumerate() {
                let mut d = 0.0;
                for (xv, mv) in x.iter().zip(mu) {
                    let diff = xv.to_f64() - mv;
                    d += diff * diff;
                }
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if best == ds.labels[i] {
                correct += 1;
            }
        }
        correct as f64 / ds.len().max(1) as f64
    }
}

/// Deterministic Gaussian blobs rendered into `[0, 1]` images via a fixed
/// affine map (clipping only beyond four sigma). Returns train and test
/// splits plus the generating parameters.
pub fn synth_clusters<E: Float>(spec: &SynthSpec) -> Result<(DataPair<E>, SynthMeta)> {
    spec.validate()?;
    let dim = spec.image_side * spec.image_side;
    let mut mean_rng = Rng::derive(spec.gen_seed, "synth/means");
    // Unit-normalized random directions scaled by the separation.
    let mut means_raw: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    for _ in 0..spec.classes {
        let v: Vec<f64> = (0..dim).map(|_| mean_rng.normal::<f64>()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        means_raw.push(v.into_iter().map(|x| x / norm * spec.separation).collect());
    }
    // Affine map raw -> [0,1]: x01 = 0.5 + raw / (2R).
    let radius = spec.separation + 4.0;
    let make_split = |tag: &str, per_class: usize, split: Split| -> Result<Dataset<E>> {
        let mut rng = Rng::derive(spec.gen_seed, &format!("synth/{tag}"));
        let n = per_class * spec.classes;
        let mut data = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for c in 0..spec.classes {
            for _ in 0..per_class {
                labels.push(c);
                for mu in &means_raw[c] {
                    let raw = mu + rng.normal::<f64>();
                    let mapped = (0.5 + raw / (2.0 * radius)).clamp(0.0, 1.0);
                    data.push(E::from_f64(mapped));
                }
            }
        }
        let images = Tensor::new(vec![n, 1, spec.image_side, spec.image_side], data)?;
        Dataset::new(images, labels, spec.classes, split)
    };
    let train = make_split("train", spec.train_per_class, Split::Train)?;
    let test = make_split("test", spec.test_per_class, Split::Test)?;
    let means = means_raw
        .iter()
        .map(|mu| mu.iter().map(|m| 0.5 + m / (2.0 * radius)).collect())
        .collect();
    let meta = SynthMeta { means, sigma: 1.0 / (2.0 * radius) };
    Ok((DataPair { train, test }, meta))
}

// ---- batching ----

/// Deterministic batch index stream: a fixed permutation per
/// `(seed, epoch)`, chunked with the final partial batch included.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u32) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Rng::derive(seed, &format!("shuffle/{epoch}"));
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

// ---- normalization ----

/// Per-channel standardization fitted on the train split only.
#[derive(Clone, Debug)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit<E: Float>(train: &Dataset<E>) -> Self {
        let s = train.images.shape();
        let (c, hw) = (s[1], s[2] * s[3]);
        let per = s[0] * hw;
        let mut mean = vec![0.0f64; c];
        let mut std = vec![0.0f64; c];
        for (i, v) in train.images.data().iter().enumerate() {
            mean[(i / hw) % c] += v.to_f64();
        }
        for m in &mut mean {
            *m /= per.max(1) as f64;
        }
        for (i, v) in train.images.data().iter().enumerate() {
            let ci = (i / hw) % c;
            let d = v.to_f64() - mean[ci];
            std[ci] += d * d;
        }
        for sd in &mut std {
            *sd = (*sd / per.max(1) as f64).sqrt().max(1e-8);
        }
        Normalizer { mean, std }
    }

    pub fn apply<E: Float>(&self, ds: &Dataset<E>) -> Dataset<E> {
        let s = ds.images.shape();
        let (c, hw) = (s[1], s[2] * s[3]);
        let mut data = ds.images.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            let ci = (i / hw) % c;
            *v = E::from_f64((v.to_f64() - self.mean[ci]) / self.std[ci]);
        }
        Dataset {
            images: Tensor::new(s.to_vec(), data).expect("same layout"),
            labels: ds.labels.clone(),
            num_classes: ds.num_classes,
            split: ds.split,
        }
    }
}

// ---- augmentation ----

/// Random horizontal flip plus 4-pixel zero-pad-and-crop, the standard
/// CIFAR recipe. Deterministic for a given RNG state.
pub fn augment_flip_crop<E: Float>(batch: &Tensor<E>, rng: &mut Rng) -> Tensor<E> {
    let s = batch.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let pad = 4usize;
    let mut out = vec![E::ZERO; batch.numel()];
    let src = batch.data();
    for ni in 0..n {
        let flip = rng.next_f64() < 0.5;
        let dy = rng.below(2 * pad + 1) as isize - pad as isize;
        let dx = rng.below(2 * pad + 1) as isize - pad as isize;
        for ci in 0..c {
            let plane = ((ni * c) + ci) * h * w;
            for y in 0..h {
                let sy = y as isize + dy;
                for x in 0..w {
                    let sx0 = if flip { w - 1 - x } else { x };
                    let sx = sx0 as isize + dx;
                    if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        out[plane + y * w + x] = src[plane + sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("same layout")
}
