//! IDX ingestion for MNIST and Fashion-MNIST, 28×28 → 32×32 zero padding,
//! 8-bit input codes and epoch batching.
//!
//! Datasets live under a root directory (`QNN_DATA_DIR`, default `./data`)
//! as `<root>/mnist/` or `<root>/fashion-mnist/` holding the four
//! uncompressed IDX files with their canonical names.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const SIDE: usize = 32;
pub const PAD: usize = 2;
pub const DATA_DIR_ENV: &str = "QNN_DATA_DIR";

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// sha256 digests of the uncompressed MNIST distribution files.
pub const MNIST_CHECKSUMS: &str = "\
ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db  train-images-idx3-ubyte
65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5  train-labels-idx1-ubyte
0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7  t10k-images-idx3-ubyte
ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2  t10k-labels-idx1-ubyte
";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    Mnist,
    FashionMnist,
    /// Generated in memory; used for hermetic smoke runs.
    Synthetic,
}

impl DatasetKind {
    pub fn dir_name(&self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::FashionMnist => "fashion-mnist",
            DatasetKind::Synthetic => "synthetic",
        }
    }

    pub fn checksums(&self) -> Option<&'static str> {
        match self {
            DatasetKind::Mnist => Some(MNIST_CHECKSUMS),
            _ => None,
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "fashion-mnist" | "fashion_mnist" => Ok(DatasetKind::FashionMnist),
            "synthetic" => Ok(DatasetKind::Synthetic),
            other => Err(Error::arg(format!("unknown dataset `{other}`"))),
        }
    }
}

/// Dataset root: explicit path, else `$QNN_DATA_DIR`, else `./data`.
pub fn data_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Raw contents of an IDX image/label file pair.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxData {
    pub rows: usize,
    pub cols: usize,
    /// `count × rows × cols` bytes.
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
}

impl IdxData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.images[i * n..(i + 1) * n]
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Truncation(format!("{what}: header ends before byte {}", at + 4)))
}

/// Parses an IDX3 image file; returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!("image file magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")));
    }
    let count = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let payload = &bytes[16..];
    let expected = count * rows * cols;
    if payload.len() != expected {
        return Err(Error::Truncation(format!(
            "image header promises {expected} bytes, payload has {}",
            payload.len()
        )));
    }
    Ok((count, rows, cols, payload.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format(format!("label file magic {magic:#010x}, expected {LABEL_MAGIC:#010x}")));
    }
    let count = be_u32(bytes, 4, "labels")? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(Error::Truncation(format!(
            "label header promises {count} bytes, payload has {}",
            payload.len()
        )));
    }
    Ok(payload.to_vec())
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<IdxData> {
    let (count, rows, cols, images) = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if labels.len() != count {
        return Err(Error::Pairing(format!("{count} images but {} labels", labels.len())));
    }
    Ok(IdxData {
        rows,
        cols,
        images,
        labels,
    })
}

/// Zero-pads a 28×28 image by two pixels on every side.
pub fn resize_to_32(image: &[u8]) -> Result<Vec<u8>> {
    let side = SIDE - 2 * PAD;
    if image.len() != side * side {
        return Err(Error::shape(format!(
            "expected a {side}x{side} image ({} bytes), got {}",
            side * side,
            image.len()
        )));
    }
    let mut out = vec![0u8; SIDE * SIDE];
    for r in 0..side {
        let dst = (r + PAD) * SIDE + PAD;
        out[dst..dst + side].copy_from_slice(&image[r * side..(r + 1) * side]);
    }
    Ok(out)
}

/// Pixel intensity of an 8-bit input code.
pub fn normalize(code: u8) -> f64 {
    f64::from(code) / 255.0
}

pub use crate::quantizers::quantize_input;

/// One split held as 8-bit input codes.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    images: Vec<u8>,
    labels: Vec<u8>,
    features: usize,
}

impl Split {
    pub fn new(images: Vec<u8>, labels: Vec<u8>, features: usize) -> Result<Self> {
        if features == 0 || images.len() != labels.len() * features {
            return Err(Error::Pairing(format!(
                "{} image bytes for {} labels of {features} features",
                images.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= 10) {
            return Err(Error::arg(format!("label {l} outside 0..10")));
        }
        Ok(Self {
            images,
            labels,
            features,
        })
    }

    fn from_idx(idx: IdxData) -> Result<Self> {
        let images = (0..idx.len())
            .map(|i| resize_to_32(idx.image(i)))
            .collect::<Result<Vec<_>>>()?
            .concat();
        Self::new(images, idx.labels, SIDE * SIDE)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn codes(&self, i: usize) -> &[u8] {
        &self.images[i * self.features..(i + 1) * self.features]
    }

    /// First `n` samples (all of them if `n` exceeds the split).
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images[..n * self.features].to_vec(),
            labels: self.labels[..n].to_vec(),
            features: self.features,
        }
    }

    /// Normalized images and labels of the given samples.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::arg(format!("sample {i} out of range")));
            }
            data.extend(self.codes(i).iter().map(|&c| normalize(c)));
            labels.push(usize::from(self.labels[i]));
        }
        Ok((Tensor::matrix(indices.len(), self.features, data)?, labels))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHandle {
    pub source: String,
    pub train: Split,
    pub test: Split,
}

impl DatasetHandle {
    /// Loads `<root>/<kind>/` IDX files (synthetic data is generated).
    pub fn load(kind: DatasetKind, root: &Path) -> Result<Self> {
        if kind == DatasetKind::Synthetic {
            return Ok(synthetic(0, 6000, 1000, SIDE * SIDE));
        }
        let dir = root.join(kind.dir_name());
        let train = load_idx(dir.join(TRAIN_IMAGES), dir.join(TRAIN_LABELS))?;
        let test = load_idx(dir.join(TEST_IMAGES), dir.join(TEST_LABELS))?;
        Ok(Self {
            source: kind.dir_name().to_string(),
            train: Split::from_idx(train)?,
            test: Split::from_idx(test)?,
        })
    }

    /// Keeps the first `n` training samples.
    pub fn limit_train(mut self, n: usize) -> Self {
        self.train = self.train.truncated(n);
        self
    }

    pub fn limit_test(mut self, n: usize) -> Self {
        self.test = self.test.truncated(n);
        self
    }
}

/// Ten noisy class prototypes; separable by a linear model.
pub fn synthetic(seed: u64, n_train: usize, n_test: usize, features: usize) -> DatasetHandle {
    let mut rng = Rng::new(seed ^ 0x5eed_da7a);
    let prototypes: Vec<Vec<f64>> = (0..10)
        .map(|_| (0..features).map(|_| if rng.next_f64() < 0.5 { 40.0 } else { 215.0 }).collect())
        .collect();
    let mut make = |n: usize| {
        let mut images = Vec::with_capacity(n * features);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let label = rng.below(10);
            labels.push(label as u8);
            for p in &prototypes[label] {
                let v = p + (rng.next_f64() - 0.5) * 120.0;
                images.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
        Split::new(images, labels, features).expect("consistent synthetic split")
    };
    let train = make(n_train);
    let test = make(n_test);
    DatasetHandle {
        source: "synthetic".into(),
        train,
        test,
    }
}

/// One pass over a split in a random order drawn from `rng`.
#[derive(Debug)]
pub struct Batches<'a> {
    split: &'a Split,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<'a> Batches<'a> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(self.split.gather(idx).expect("permutation indices are in range"))
    }
}

/// Shuffled mini-batches covering every sample exactly once; the final
/// batch may be short.
pub fn batches<'a>(split: &'a Split, batch_size: usize, rng: &mut Rng) -> Result<Batches<'a>> {
    if batch_size == 0 {
        return Err(Error::arg("batch size must be at least 1"));
    }
    Ok(Batches {
        split,
        order: rng.permutation(split.len()),
        batch_size,
        pos: 0,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Checks every `<digest>  <file>` line of `manifest` against files in `dir`.
pub fn verify_checksums(dir: &Path, manifest: &str) -> Result<()> {
    for (lineno, line) in manifest.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (digest, name) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| Error::Config(format!("checksum manifest line {}: `{line}`", lineno + 1)))?;
        let name = name.trim();
        let path = dir.join(name);
        let actual = sha256_hex(&fs::read(&path)?);
        if !actual.eq_ignore_ascii_case(digest) {
            return Err(Error::Checksum {
                path: path.display().to_string(),
                expected: digest.to_string(),
                actual,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGE_MAGIC, count, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn two_image_fixture() {
        let dir = tempfile::tempdir().unwrap();
        // Two 2x3 images, bytes spelled out.
        let pixels = [0u8, 1, 2, 3, 4, 5, 250, 251, 252, 253, 254, 255];
        let img = idx_images(2, 2, 3, &pixels);
        assert_eq!(&img[..8], &[0, 0, 8, 3, 0, 0, 0, 2]);
        fs::write(dir.path().join("i"), &img).unwrap();
        fs::write(dir.path().join("l"), idx_labels(&[7, 2])).unwrap();
        let data = load_idx(dir.path().join("i"), dir.path().join("l")).unwrap();
        assert_eq!((data.rows, data.cols, data.len()), (2, 3, 2));
        assert_eq!(data.image(0), &pixels[..6]);
        assert_eq!(data.image(1), &pixels[6..]);
        assert_eq!(data.labels, vec![7, 2]);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut img = idx_images(1, 2, 2, &[1, 2, 3, 4]);
        img[..4].copy_from_slice(&0u32.to_be_bytes());
        assert!(matches!(parse_idx_images(&img), Err(Error::Format(_))));
        let img = idx_images(2, 2, 2, &[1, 2, 3, 4]);
        assert!(matches!(parse_idx_images(&img), Err(Error::Truncation(_))));
        assert!(matches!(parse_idx_images(&img[..6]), Err(Error::Truncation(_))));
        let mut lab = idx_labels(&[1, 2]);
        lab[3] = 0x03;
        assert!(matches!(parse_idx_labels(&lab), Err(Error::Format(_))));
    }

    #[test]
    fn pairing_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("i"), idx_images(1, 1, 1, &[9])).unwrap();
        fs::write(dir.path().join("l"), idx_labels(&[1, 2])).unwrap();
        assert!(matches!(
            load_idx(dir.path().join("i"), dir.path().join("l")),
            Err(Error::Pairing(_))
        ));
    }

    #[test]
    fn padding() {
        assert_eq!(resize_to_32(&[0; 784]).unwrap(), vec![0; 1024]);
        let mut img = vec![0u8; 784];
        img[0] = 255;
        let out = resize_to_32(&img).unwrap();
        assert_eq!(out[2 * 32 + 2], 255);
        assert_eq!(out.iter().map(|&v| u32::from(v)).sum::<u32>(), 255);
        assert!(matches!(resize_to_32(&[0; 783]), Err(Error::Shape(_))));
    }

    #[test]
    fn padding_preserves_center_and_sum() {
        let mut rng = Rng::new(1);
        for _ in 0..20 {
            let img: Vec<u8> = (0..784).map(|_| rng.below(256) as u8).collect();
            let out = resize_to_32(&img).unwrap();
            let mut center = Vec::new();
            for r in 2..30 {
                center.extend_from_slice(&out[r * 32 + 2..r * 32 + 30]);
            }
            assert_eq!(center, img);
            let sum = |v: &[u8]| v.iter().map(|&x| u64::from(x)).sum::<u64>();
            assert_eq!(sum(&out), sum(&img));
        }
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize(0), 0.0);
        assert_eq!(normalize(255), 1.0);
        assert_eq!(normalize(128), 128.0 / 255.0);
        assert!((0..=255u8).all(|b| quantize_input(normalize(b)) == b));
    }

    #[test]
    fn batching() {
        let split = Split::new(vec![0; 105], vec![0; 105], 1).unwrap();
        let sizes: Vec<usize> = batches(&split, 100, &mut Rng::new(1)).unwrap().map(|(x, _)| x.rows()).collect();
        assert_eq!(sizes, [100, 5]);

        let big = Split::new(vec![0; 60_000], vec![0; 60_000], 1).unwrap();
        let b = batches(&big, 100, &mut Rng::new(2)).unwrap();
        let mut seen = b.order().to_vec();
        assert_eq!(b.count(), 600);
        seen.sort_unstable();
        assert!(seen.iter().enumerate().all(|(i, &s)| i == s));

        let a = batches(&big, 100, &mut Rng::new(3)).unwrap().order().to_vec();
        let c = batches(&big, 100, &mut Rng::new(3)).unwrap().order().to_vec();
        assert_eq!(a, c);
        assert!(batches(&big, 0, &mut Rng::new(3)).is_err());
    }

    #[test]
    fn checksum_verification() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a"), b"abc").unwrap();
        let good = format!("{}  a\n", sha256_hex(b"abc"));
        verify_checksums(dir.path(), &good).unwrap();
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        let bad = format!("{}  a\n", sha256_hex(b"abd"));
        assert!(matches!(verify_checksums(dir.path(), &bad), Err(Error::Checksum { .. })));
    }

    #[test]
    fn dataset_kind_parsing() {
        assert_eq!("mnist".parse::<DatasetKind>().unwrap(), DatasetKind::Mnist);
        assert_eq!("fashion-mnist".parse::<DatasetKind>().unwrap(), DatasetKind::FashionMnist);
        assert!("cifar".parse::<DatasetKind>().is_err());
    }
}
