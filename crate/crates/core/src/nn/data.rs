use std::fs;
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::numerics::{Purpose, SeededRng, StreamId};

/// Labelled samples with a fixed per-sample shape (e.g. `[1, 28, 28]` or `[4]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sample_shape: Vec<usize>,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(sample_shape: Vec<usize>, features: Vec<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per == 0 || features.len() != per * labels.len() {
            return Err(Error::dims(
                "Dataset",
                format!("{} values for {} samples of {per}", features.len(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::OutOfRange {
                what: "label",
                value: bad as f64,
                min: 0.0,
                max: num_classes as f64 - 1.0,
            });
        }
        Ok(Self {
            sample_shape,
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    /// Stacks the given samples into one batch tensor.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.features[i * per..(i + 1) * per]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&self.sample_shape);
        (
            Tensor::new(shape, data).expect("sizes agree"),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// First `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let per = self.sample_len();
        Self {
            sample_shape: self.sample_shape.clone(),
            features: self.features[..n * per].to_vec(),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
        }
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse("IDX header truncated".into()))
}

/// Parses an unsigned-byte IDX file into its dimensions and raw bytes.
pub fn parse_idx(bytes: &[u8]) -> Result<(Vec<usize>, Vec<u8>)> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Parse("bad IDX magic".into()));
    }
    if bytes[2] != 0x08 {
        return Err(Error::Parse(format!("unsupported IDX element type {:#04x}", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    let dims = (0..ndim)
        .map(|k| be_u32(bytes, 4 + 4 * k).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndim;
    let n: usize = dims.iter().product();
    if bytes.len() != start + n {
        return Err(Error::Parse(format!("IDX body has {} bytes, expected {n}", bytes.len() - start)));
    }
    Ok((dims, bytes[start..].to_vec()))
}

/// Encodes unsigned bytes as an IDX file.
pub fn write_idx(dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

/// Loads an image/label IDX pair, scaling pixels to `[0, 1]`.
pub fn load_idx_pair(images: &Path, labels: &Path) -> Result<Dataset> {
    let (idims, pixels) = parse_idx(&fs::read(images)?)?;
    let (ldims, lab) = parse_idx(&fs::read(labels)?)?;
    if idims.len() != 3 || ldims.len() != 1 || idims[0] != ldims[0] {
        return Err(Error::Parse(format!("IDX shapes {idims:?} and {ldims:?} do not pair")));
    }
    Dataset::new(
        vec![1, idims[1], idims[2]],
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
        lab.iter().map(|&l| l as usize).collect(),
        10,
    )
}

/// Loads `train-*` and `t10k-*` IDX files from a directory.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx_pair(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?;
    let test = load_idx_pair(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?;
    Ok((train, test))
}

/// Gaussian clusters in `dim` dimensions, one per class, centres on a sphere of radius 3.
pub fn synthetic_blobs(n: usize, dim: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if classes == 0 || dim == 0 {
        return Err(Error::param("synthetic_blobs", "need at least one class and dimension"));
    }
    let mut r = SeededRng::new(seed, StreamId::new(Purpose::Data));
    let centres: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| r.standard_normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| 3.0 * x / norm).collect()
        })
        .collect();
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        features.extend(centres[c].iter().map(|m| m + r.normal(0.0, 0.7)));
    }
    Dataset::new(vec![dim], features, labels, classes)
}

/// Blob-like 28x28 images: each class lights up its own pair of 7x7 patches.
pub fn synthetic_digits(n: usize, seed: u64) -> Dataset {
    let mut r = SeededRng::new(seed, StreamId::new(Purpose::Data).block(1, 0));
    let mut features = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 10;
        labels.push(c);
        let (pa, pb) = (c, (c * 3 + 5) % 16);
        for y in 0..28 {
            for x in 0..28 {
                let patch = (y / 7) * 4 + x / 7;
                let on = if patch == pa || patch == pb { 0.8 } else { 0.0 };
                features.push((on + r.normal(0.0, 0.15)).clamp(0.0, 1.0));
            }
        }
    }
    Dataset::new(vec![1, 28, 28], features, labels, 10).expect("sizes agree")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_roundtrip_and_errors() {
        let bytes = write_idx(&[2, 3], &[1, 2, 3, 4, 5, 6]);
        assert_eq!(&bytes[..4], &[0, 0, 8, 2]);
        let (dims, data) = parse_idx(&bytes).unwrap();
        assert_eq!(dims, vec![2, 3]);
        assert_eq!(data, vec![1, 2, 3, 4, 5, 6]);
        assert!(parse_idx(&bytes[..bytes.len() - 1]).is_err());
        assert!(parse_idx(&[0, 0, 0x0D, 1, 0, 0, 0, 0]).is_err());
        assert!(parse_idx(&[1, 0, 8, 0]).is_err());
    }

    #[test]
    fn idx_pair_loads_scaled_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("i");
        let lab = dir.path().join("l");
        fs::write(&img, write_idx(&[2, 2, 2], &[0, 255, 51, 0, 0, 0, 0, 255])).unwrap();
        fs::write(&lab, write_idx(&[2], &[7, 3])).unwrap();
        let d = load_idx_pair(&img, &lab).unwrap();
        assert_eq!(d.sample_shape, vec![1, 2, 2]);
        assert_eq!(d.features[..3], [0.0, 1.0, 0.2]);
        assert_eq!(d.labels, vec![7, 3]);
        fs::write(&lab, write_idx(&[3], &[7, 3, 1])).unwrap();
        assert!(load_idx_pair(&img, &lab).is_err());
    }

    #[test]
    fn blobs_are_deterministic_and_balanced() {
        let a = synthetic_blobs(30, 4, 3, 5).unwrap();
        assert_eq!(a, synthetic_blobs(30, 4, 3, 5).unwrap());
        assert_ne!(a, synthetic_blobs(30, 4, 3, 6).unwrap());
        assert_eq!(a.labels.iter().filter(|&&l| l == 2).count(), 10);
        let (x, y) = a.batch(&[0, 4]);
        assert_eq!(x.shape(), &[2, 4]);
        assert_eq!(y, vec![0, 1]);
    }

    #[test]
    fn dataset_rejects_bad_labels() {
        assert!(Dataset::new(vec![1], vec![0.0], vec![3], 3).is_err());
        assert!(Dataset::new(vec![2], vec![0.0], vec![0], 3).is_err());
    }
}
