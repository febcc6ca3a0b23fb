//! Dataset containers, the synthetic classification task, and the IDX loader.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{derive_rng, tag};

/// A labelled classification dataset with flattened feature rows.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Row-major features, `n * input_dim` values.
    pub features: Vec<f64>,
    /// One label per row, in `0..n_classes`.
    pub labels: Vec<u8>,
    pub input_dim: usize,
    pub n_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Borrow the feature row for sample `i`.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// Build a new dataset from a subset of row indices.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            labels,
            input_dim: self.input_dim,
            n_classes: self.n_classes,
        }
    }
}

/// Generate Gaussian class clusters that are linearly separable at the given
/// margin. Deterministic in `seed`; class counts balanced within one.
pub fn gen_synthetic(classes: usize, dims: usize, n: usize, seed: u64, margin: f64) -> Dataset {
    assert!(classes >= 2, "need at least two classes");
    assert!(n >= classes, "need at least one sample per class");
    let mut rng = derive_rng(seed, &[tag::SYNTH_DATA, classes as u64, dims as u64, n as u64]);

    // Class centers: random unit directions scaled by the margin, then
    // re-separated until every pair is at least `margin` apart. With unit
    // within-class noise this gives linear separability that grows with the
    // margin rather than being guaranteed at tiny margins.
    let mut centers = vec![0.0f64; classes * dims];
    for attempt in 0..1000 {
        for c in centers.iter_mut() {
            *c = StandardNormal.sample(&mut rng);
        }
        for k in 0..classes {
            let row = &mut centers[k * dims..(k + 1) * dims];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for v in row.iter_mut() {
                *v *= margin / norm;
            }
        }
        let mut min_gap = f64::INFINITY;
        for a in 0..classes {
            for b in (a + 1)..classes {
                let gap = (0..dims)
                    .map(|d| {
                        let diff = centers[a * dims + d] - centers[b * dims + d];
                        diff * diff
                    })
                    .sum::<f64>()
                    .sqrt();
                min_gap = min_gap.min(gap);
            }
        }
        if min_gap >= margin || attempt == 999 {
            break;
        }
    }

    // Round-robin class assignment keeps counts balanced within one even
    // when `classes` does not divide `n`.
    let mut features = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        for d in 0..dims {
            let noise: f64 = StandardNormal.sample(&mut rng);
            features.push(centers[class * dims + d] + noise);
        }
        labels.push(class as u8);
    }

    // Shuffle rows so shards are not striped by class.
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let staged = Dataset {
        features,
        labels,
        input_dim: dims,
        n_classes: classes,
    };
    staged.subset(&order)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(buf)
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::format(format!(
            "{}: truncated header ({} bytes)",
            path.display(),
            bytes.len()
        )));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Load an MNIST-style IDX image/label pair. Pixels are scaled to `[0,1]`.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = read_file(images_path)?;
    let lbl_bytes = read_file(labels_path)?;

    let img_magic = be_u32(&img_bytes, 0, images_path)?;
    if img_magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(format!(
            "{}: bad magic {img_magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}",
            images_path.display()
        )));
    }
    let n_images = be_u32(&img_bytes, 4, images_path)? as usize;
    let rows = be_u32(&img_bytes, 8, images_path)? as usize;
    let cols = be_u32(&img_bytes, 12, images_path)? as usize;
    let pixel_count = n_images * rows * cols;
    if img_bytes.len() != 16 + pixel_count {
        return Err(Error::format(format!(
            "{}: expected {} pixel bytes, found {}",
            images_path.display(),
            pixel_count,
            img_bytes.len().saturating_sub(16)
        )));
    }

    let lbl_magic = be_u32(&lbl_bytes, 0, labels_path)?;
    if lbl_magic != IDX_LABELS_MAGIC {
        return Err(Error::format(format!(
            "{}: bad magic {lbl_magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}",
            labels_path.display()
        )));
    }
    let n_labels = be_u32(&lbl_bytes, 4, labels_path)? as usize;
    if lbl_bytes.len() != 8 + n_labels {
        return Err(Error::format(format!(
            "{}: expected {} label bytes, found {}",
            labels_path.display(),
            n_labels,
            lbl_bytes.len().saturating_sub(8)
        )));
    }
    if n_images != n_labels {
        return Err(Error::format(format!(
            "image count {n_images} != label count {n_labels}"
        )));
    }

    let features = img_bytes[16..]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let labels: Vec<u8> = lbl_bytes[8..].to_vec();
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::format(format!("label {bad} outside 0..9")));
    }

    Ok(Dataset {
        features,
        labels,
        input_dim: rows * cols,
        n_classes: 10,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_deterministic() {
        let a = gen_synthetic(4, 10, 100, 7, 3.0);
        let b = gen_synthetic(4, 10, 100, 7, 3.0);
        assert_eq!(a.features, b.features);
        assert_eq!(a.labels, b.labels);
        let c = gen_synthetic(4, 10, 100, 8, 3.0);
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn synthetic_balanced_within_one() {
        let data = gen_synthetic(3, 5, 100, 1, 2.0);
        let mut counts = [0usize; 3];
        for &l in &data.labels {
            counts[l as usize] += 1;
        }
        let max = *counts.iter().max().unwrap();
        let min = *counts.iter().min().unwrap();
        assert!(max - min <= 1, "counts {counts:?}");
    }

    #[test]
    fn subset_picks_rows() {
        let data = gen_synthetic(2, 3, 10, 5, 2.0);
        let sub = data.subset(&[2, 7]);
        assert_eq!(sub.len(), 2);
        assert_eq!(sub.row(0), data.row(2));
        assert_eq!(sub.row(1), data.row(7));
        assert_eq!(sub.labels, vec![data.labels[2], data.labels[7]]);
    }

    fn write_idx(
        dir: &Path,
        n: usize,
        rows: usize,
        cols: usize,
        pixels: &[u8],
        labels: &[u8],
    ) -> (std::path::PathBuf, std::path::PathBuf) {
        use std::io::Write as _;
        let img_path = dir.join("images.idx");
        let lbl_path = dir.join("labels.idx");
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&(n as u32).to_be_bytes());
        img.extend_from_slice(&(rows as u32).to_be_bytes());
        img.extend_from_slice(&(cols as u32).to_be_bytes());
        img.extend_from_slice(pixels);
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lbl.extend_from_slice(&(n as u32).to_be_bytes());
        lbl.extend_from_slice(labels);
        File::create(&img_path).unwrap().write_all(&img).unwrap();
        File::create(&lbl_path).unwrap().write_all(&lbl).unwrap();
        (img_path, lbl_path)
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..2 * 4).map(|i| (i * 17) as u8).collect();
        let (img, lbl) = write_idx(dir.path(), 2, 2, 2, &pixels, &[3, 9]);
        let data = load_mnist_idx(&img, &lbl).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data.input_dim, 4);
        assert_eq!(data.labels, vec![3, 9]);
        assert!((data.features[1] - 17.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn idx_truncated_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = vec![0; 7]; // one byte short of 2 images of 2x2
        let (img, lbl) = write_idx(dir.path(), 2, 2, 2, &pixels, &[0, 1]);
        let err = load_mnist_idx(&img, &lbl).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "got {err:?}");
    }

    #[test]
    fn idx_count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = vec![0; 8];
        let (img, _) = write_idx(dir.path(), 2, 2, 2, &pixels, &[0, 1]);
        let other = tempfile::tempdir().unwrap();
        let lbl_pixels: Vec<u8> = vec![0; 12];
        let (_, lbl3) = write_idx(other.path(), 3, 2, 2, &lbl_pixels, &[0, 1, 2]);
        let err = load_mnist_idx(&img, &lbl3).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "got {err:?}");
    }
}
