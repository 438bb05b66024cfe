//! Dataset loading (CIFAR-10 binary, MNIST IDX), normalisation, splitting
//! and per-class subsampling.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::graph::FeatureShape;
use crate::rng::{self, Stream};
use crate::tensor::{Scalar, Tensor};

const CIFAR_RECORD: usize = 1 + 32 * 32 * 3;
const MNIST_IMAGES_MAGIC: u32 = 0x0000_0803;
const MNIST_LABELS_MAGIC: u32 = 0x0000_0801;

/// Byte images (HWC, row-major) with class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub shape: FeatureShape,
    pub images: Vec<u8>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(shape: FeatureShape, images: Vec<u8>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.len() != labels.len() * shape.numel() {
            return Err(Error::shape(format!(
                "{} labels of {shape} images need {} bytes, got {}",
                labels.len(),
                labels.len() * shape.numel(),
                images.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::contract(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Self {
            shape,
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.shape.numel();
        &self.images[i * n..(i + 1) * n]
    }

    /// Samples at the given indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.shape.numel());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            shape: self.shape,
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

fn open(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzDecoder::new(reader)))
    } else {
        Ok(Box::new(reader))
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

/// One CIFAR-10 batch file: records of a label byte followed by the red,
/// green and blue 32×32 planes.
pub fn load_cifar10_binary(path: &Path) -> Result<Dataset> {
    parse_cifar10(&read_all(path)?)
}

pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
    if whole != bytes.len() {
        return Err(Error::format(
            whole as u64,
            format!(
                "truncated record: {} trailing bytes, records are {CIFAR_RECORD} bytes",
                bytes.len() - whole
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let plane = 32 * 32;
    let mut images = vec![0u8; n * plane * 3];
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::format(
                (r * CIFAR_RECORD) as u64,
                format!("label {} out of range 0..=9", rec[0]),
            ));
        }
        labels.push(rec[0] as usize);
        let out = &mut images[r * plane * 3..(r + 1) * plane * 3];
        for c in 0..3 {
            for p in 0..plane {
                out[p * 3 + c] = rec[1 + c * plane + p];
            }
        }
    }
    Dataset::new(FeatureShape::new(32, 32, 3), images, labels, 10)
}

/// Inverse of [`parse_cifar10`].
pub fn write_cifar10_binary(path: &Path, ds: &Dataset) -> Result<()> {
    if ds.shape != FeatureShape::new(32, 32, 3) || ds.labels.iter().any(|&l| l > 9) {
        return Err(Error::contract("CIFAR-10 files hold 32×32×3 images with labels 0..=9"));
    }
    let plane = 32 * 32;
    let mut bytes = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for i in 0..ds.len() {
        bytes.push(ds.labels[i] as u8);
        let img = ds.image(i);
        for c in 0..3 {
            bytes.extend((0..plane).map(|p| img[p * 3 + c]));
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(offset as u64, "header ends early"))
}

/// MNIST image and label files in IDX format; `.gz` files are decompressed
/// on the fly.
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    parse_mnist(&read_all(images)?, &read_all(labels)?)
}

pub fn parse_mnist(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    for (bytes, expected, what) in [(images, MNIST_IMAGES_MAGIC, "image"), (labels, MNIST_LABELS_MAGIC, "label")] {
        let magic = be_u32(bytes, 0)?;
        if magic != expected {
            return Err(Error::format(
                0,
                format!("{what} file magic is {magic:#010x}, expected {expected:#010x}"),
            ));
        }
    }
    let count = be_u32(images, 4)? as usize;
    let rows = be_u32(images, 8)? as usize;
    let cols = be_u32(images, 12)? as usize;
    let label_count = be_u32(labels, 4)? as usize;
    if count != label_count {
        return Err(Error::format(4, format!("{count} images but {label_count} labels")));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::format(8, format!("image extent {rows}×{cols}")));
    }
    let pixels = &images[16..];
    if pixels.len() != count * rows * cols {
        return Err(Error::format(
            16 + pixels.len().min(count * rows * cols) as u64,
            format!("image payload holds {} bytes, header implies {}", pixels.len(), count * rows * cols),
        ));
    }
    let raw = &labels[8..];
    if raw.len() != count {
        return Err(Error::format(
            8 + raw.len().min(count) as u64,
            format!("label payload holds {} bytes, header implies {count}", raw.len()),
        ));
    }
    if let Some(i) = raw.iter().position(|&l| l > 9) {
        return Err(Error::format(8 + i as u64, format!("label {} out of range 0..=9", raw[i])));
    }
    Dataset::new(
        FeatureShape::new(rows, cols, 1),
        pixels.to_vec(),
        raw.iter().map(|&l| l as usize).collect(),
        10,
    )
}

/// Writes uncompressed IDX files (or gzip when a path ends in `.gz`).
pub fn write_mnist_idx(images: &Path, labels: &Path, ds: &Dataset) -> Result<()> {
    if ds.shape.c != 1 || ds.labels.iter().any(|&l| l > 9) {
        return Err(Error::contract("MNIST files hold single-channel images with labels 0..=9"));
    }
    let mut img = Vec::with_capacity(16 + ds.images.len());
    for v in [MNIST_IMAGES_MAGIC, ds.len() as u32, ds.shape.h as u32, ds.shape.w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(&ds.images);
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&MNIST_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    for (path, bytes) in [(images, img), (labels, lab)] {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let result = if path.extension().is_some_and(|e| e == "gz") {
            let mut gz = flate2::write::GzEncoder::new(file, flate2::Compression::default());
            gz.write_all(&bytes).and_then(|_| gz.finish().map(|_| ()))
        } else {
            let mut file = file;
            file.write_all(&bytes)
        };
        result.map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Pixels scaled to [0, 1] by `v / 255`, as an `[N, H, W, C]` tensor.
pub fn normalize(ds: &Dataset) -> Result<Tensor<f32>> {
    if ds.is_empty() {
        return Err(Error::contract("cannot normalise an empty dataset"));
    }
    let s = ds.shape;
    Tensor::new(
        vec![ds.len(), s.h, s.w, s.c],
        ds.images.iter().map(|&v| v as f32 / 255.0).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Seeded shuffle, then the first ⌊n·fraction⌋ samples train and the rest
/// validate.
pub fn split_train_val(ds: &Dataset, spec: SplitSpec) -> Result<(Dataset, Dataset)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::config(format!("train fraction {} not in (0, 1)", spec.train_fraction)));
    }
    if ds.is_empty() {
        return Err(Error::config("cannot split an empty dataset"));
    }
    let cut = (ds.len() as f64 * spec.train_fraction).floor() as usize;
    if cut == 0 || cut == ds.len() {
        return Err(Error::config(format!(
            "fraction {} of {} samples leaves one side empty",
            spec.train_fraction,
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng::stream(spec.seed, Stream::Split, 0));
    Ok((ds.select(&order[..cut]), ds.select(&order[cut..])))
}

/// Indices of a seeded per-class sample of at most `per_class` items per
/// class, in ascending order.
pub fn subsample_indices(ds: &Dataset, per_class: usize, seed: u64) -> Result<Vec<usize>> {
    if per_class == 0 {
        return Err(Error::config("per-class count must be at least 1"));
    }
    let mut rng = rng::stream(seed, Stream::Subsample, 0);
    let mut chosen = Vec::new();
    for class in 0..ds.classes {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        idx.shuffle(&mut rng);
        idx.truncate(per_class);
        chosen.extend(idx);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

pub fn subsample(ds: &Dataset, per_class: usize, seed: u64) -> Result<Dataset> {
    Ok(ds.select(&subsample_indices(ds, per_class, seed)?))
}

/// Nearest-neighbour resize of every image.
pub fn resize_nearest(ds: &Dataset, h: usize, w: usize) -> Result<Dataset> {
    if h == 0 || w == 0 {
        return Err(Error::contract("resize target must be non-empty"));
    }
    let s = ds.shape;
    let out_shape = FeatureShape::new(h, w, s.c);
    let mut images = Vec::with_capacity(ds.len() * out_shape.numel());
    for i in 0..ds.len() {
        let img = ds.image(i);
        for y in 0..h {
            let sy = y * s.h / h;
            for x in 0..w {
                let sx = x * s.w / w;
                images.extend_from_slice(&img[(sy * s.w + sx) * s.c..(sy * s.w + sx + 1) * s.c]);
            }
        }
    }
    Dataset::new(out_shape, images, ds.labels.clone(), ds.classes)
}

/// Normalised samples ready for batching.
#[derive(Debug, Clone)]
pub struct Samples {
    pub shape: FeatureShape,
    pub pixels: Vec<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Samples {
    pub fn from_dataset(ds: &Dataset) -> Self {
        Self {
            shape: ds.shape,
            pixels: ds.images.iter().map(|&v| v as f32 / 255.0).collect(),
            labels: ds.labels.clone(),
            classes: ds.classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gathers the given samples into an `[n, H, W, C]` batch.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let per = self.shape.numel();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend(self.pixels[i * per..(i + 1) * per].iter().map(|&v| T::from_f64(v as f64)));
        }
        let s = self.shape;
        let x = Tensor::new(vec![indices.len(), s.h, s.w, s.c], data)?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let shape = FeatureShape::new(2, 2, 1);
        let images = (0..n * 4).map(|v| v as u8).collect();
        Dataset::new(shape, images, (0..n).map(|i| i % 2).collect(), 2).unwrap()
    }

    #[test]
    fn cifar_single_white_record() {
        let mut rec = vec![255u8; CIFAR_RECORD];
        rec[0] = 3;
        let ds = parse_cifar10(&rec).unwrap();
        assert_eq!(ds.labels, vec![3]);
        assert!(ds.images.iter().all(|&v| v == 255));
    }

    #[test]
    fn cifar_missing_label_byte() {
        let err = parse_cifar10(&vec![0u8; 3072]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
    }

    #[test]
    fn cifar_bad_label_reports_record_offset() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[CIFAR_RECORD] = 10;
        assert!(matches!(parse_cifar10(&bytes), Err(Error::Format { offset, .. }) if offset == CIFAR_RECORD as u64));
    }

    fn mnist_header(count: u32) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        for v in [MNIST_IMAGES_MAGIC, count, 28, 28] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        let mut lab = Vec::new();
        lab.extend_from_slice(&MNIST_LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&count.to_be_bytes());
        (img, lab)
    }

    #[test]
    fn mnist_header_arithmetic() {
        let (mut img, mut lab) = mnist_header(60_000);
        img.resize(16 + 60_000 * 784, 0);
        lab.resize(8 + 60_000, 7);
        let ds = parse_mnist(&img, &lab).unwrap();
        assert_eq!(ds.len(), 60_000);
        assert_eq!(ds.shape, FeatureShape::new(28, 28, 1));
    }

    #[test]
    fn mnist_zero_images_is_empty_dataset() {
        let (img, lab) = mnist_header(0);
        assert!(parse_mnist(&img, &lab).unwrap().is_empty());
    }

    #[test]
    fn mnist_wrong_magic_names_both_values() {
        let (mut img, lab) = mnist_header(0);
        img[3] = 0x01;
        let msg = parse_mnist(&img, &lab).unwrap_err().to_string();
        assert!(msg.contains("0x00000801") && msg.contains("0x00000803"), "{msg}");
    }

    #[test]
    fn normalise_endpoints() {
        let ds = Dataset::new(FeatureShape::new(1, 3, 1), vec![0, 128, 255], vec![0], 1).unwrap();
        let t = normalize(&ds).unwrap();
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(t.data()[2], 1.0);
        assert!((t.data()[1] - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn split_ten_is_eight_two_partition() {
        let ds = toy(10);
        let (tr, va) = split_train_val(&ds, SplitSpec::default()).unwrap();
        assert_eq!((tr.len(), va.len()), (8, 2));
        let mut firsts: Vec<u8> = tr.images.chunks(4).chain(va.images.chunks(4)).map(|c| c[0]).collect();
        firsts.sort_unstable();
        assert_eq!(firsts, (0..10).map(|i| i * 4).collect::<Vec<u8>>());
        assert_eq!(split_train_val(&ds, SplitSpec::default()).unwrap(), (tr, va));
        let tiny = toy(1);
        assert!(matches!(split_train_val(&tiny, SplitSpec::default()), Err(Error::Config(_))));
    }

    #[test]
    fn subsample_saturates() {
        let ds = toy(7);
        let sub = subsample(&ds, 3, 1).unwrap();
        assert_eq!(sub.class_counts(), vec![3, 3]);
        let all = subsample(&ds, 100, 1).unwrap();
        assert_eq!(all, ds);
    }

    #[test]
    fn resize_doubles_pixels() {
        let ds = Dataset::new(FeatureShape::new(1, 2, 1), vec![1, 2], vec![0], 1).unwrap();
        let r = resize_nearest(&ds, 2, 4).unwrap();
        assert_eq!(r.images, vec![1, 1, 2, 2, 1, 1, 2, 2]);
    }
}
