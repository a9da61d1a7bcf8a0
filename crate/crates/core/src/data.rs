//! Datasets: seeded synthetic generators and the `LWDS1` binary image format.
//!
//! `LWDS1` layout (little-endian throughout):
//!
//! ```text
//! "LWDS1"                              5 bytes
//! N, C, H, W, num_classes              5 × u32
//! pixels                               N·C·H·W × f64, values in [0, 1]
//! labels                               N × u16
//! ```

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 5] = b"LWDS1";

/// Mixed into the seed so split shuffles never reuse generation draws.
const SPLIT_STREAM: u64 = 0x5eed_5011_7000_0001;

/// Seed used for the train/test split of externally supplied datasets.
const EXTERNAL_SPLIT_SEED: u64 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub seed: u64,
    /// Sample-major inputs: N × features or N × C × H × W.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    /// Assembles a dataset and draws a seeded 80/20 train/test split.
    pub fn new(name: impl Into<String>, seed: u64, inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::Empty("dataset"));
        }
        if inputs.shape().first() != Some(&n) {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                lhs: inputs.shape().to_vec(),
                rhs: vec![n],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_STREAM));
        let n_train = n * 4 / 5;
        let test = order.split_off(n_train);
        Ok(Dataset {
            name: name.into(),
            seed,
            inputs,
            labels,
            num_classes,
            train: order,
            test,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Inputs and labels of the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.inputs.select_rows(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }
}

/// Noise-free point on arm `arm` of `arms` at arm position `s` in [0, 1].
/// Radius grows linearly with `s` while the angle sweeps half a turn from
/// the arm's offset.
pub fn spiral_point(arm: usize, arms: usize, s: f64) -> [f64; 2] {
    let r = 0.1 + 0.9 * s;
    let theta = 2.0 * PI * (arm as f64 / arms as f64 + 0.5 * s);
    [r * theta.cos(), r * theta.sin()]
}

/// Interleaved spiral arms in the plane, one arm per class, with isotropic
/// Gaussian noise of standard deviation `noise_sigma` on each coordinate.
pub fn generate_spirals(n_per_class: usize, num_classes: usize, noise_sigma: f64, seed: u64) -> Result<Dataset> {
    if n_per_class < 2 {
        return Err(Error::config("dataset.n_per_class", "must be at least 2"));
    }
    if num_classes < 2 {
        return Err(Error::config("dataset.classes", "must be at least 2"));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::config("dataset.noise", "must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n = n_per_class * num_classes;
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for arm in 0..num_classes {
        for i in 0..n_per_class {
            let s = i as f64 / (n_per_class - 1) as f64;
            let [x, y] = spiral_point(arm, num_classes, s);
            data.push(x + noise_sigma * normal.sample(&mut rng));
            data.push(y + noise_sigma * normal.sample(&mut rng));
            labels.push(arm);
        }
    }
    Dataset::new("spirals", seed, Tensor::new(vec![n, 2], data)?, labels, num_classes)
}

/// Isotropic unit-variance Gaussian clusters. Class centres are standard
/// normal vectors scaled by `separation`.
pub fn generate_blobs(n_per_class: usize, num_classes: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if n_per_class < 2 {
        return Err(Error::config("dataset.n_per_class", "must be at least 2"));
    }
    if num_classes < 2 {
        return Err(Error::config("dataset.classes", "must be at least 2"));
    }
    if dim == 0 {
        return Err(Error::config("dataset.dim", "must be positive"));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::config("dataset.separation", "must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let centres: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| separation * normal.sample(&mut rng)).collect())
        .collect();
    let n = n_per_class * num_classes;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (class, centre) in centres.iter().enumerate() {
        for _ in 0..n_per_class {
            data.extend(centre.iter().map(|c| c + normal.sample(&mut rng)));
            labels.push(class);
        }
    }
    Dataset::new("blobs", seed, Tensor::new(vec![n, dim], data)?, labels, num_classes)
}

/// Writes an image dataset (inputs N × C × H × W) in `LWDS1` format.
pub fn write_image_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let shape = dataset.inputs.shape();
    if shape.len() != 4 {
        return Err(Error::InvalidShape {
            op: "write_image_dataset",
            shape: shape.to_vec(),
            reason: "expected N×C×H×W inputs".into(),
        });
    }
    let mut out = Vec::with_capacity(25 + dataset.inputs.numel() * 8 + dataset.len() * 2);
    out.extend_from_slice(DATASET_MAGIC);
    for v in shape.iter().chain(std::iter::once(&dataset.num_classes)) {
        let v = u32::try_from(*v).map_err(|_| Error::config("dataset", "dimension exceeds u32"))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in dataset.inputs.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &l in &dataset.labels {
        let l = u16::try_from(l).map_err(|_| Error::config("dataset", "label exceeds u16"))?;
        out.extend_from_slice(&l.to_le_bytes());
    }
    std::fs::write(path, &out).map_err(Error::file(path))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.bytes.len(),
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

/// Reads an `LWDS1` file. The train/test split is drawn with a fixed seed.
pub fn load_image_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(Error::file(path))?;
    parse_image_dataset(&bytes, &path.display().to_string())
}

/// Parses `LWDS1` bytes; see [`load_image_dataset`].
pub fn parse_image_dataset(bytes: &[u8], name: &str) -> Result<Dataset> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(5, "magic")? != DATASET_MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "bad magic, expected LWDS1".into(),
        });
    }
    let n = cur.u32("N")?;
    let c = cur.u32("C")?;
    let h = cur.u32("H")?;
    let w = cur.u32("W")?;
    let classes = cur.u32("num_classes")?;
    if n == 0 {
        return Err(Error::Format {
            offset: 5,
            reason: "empty dataset".into(),
        });
    }
    if c == 0 || h == 0 || w == 0 || classes == 0 {
        return Err(Error::Format {
            offset: 9,
            reason: "zero-sized dimension".into(),
        });
    }
    let count = n * c * h * w;
    let mut pixels = Vec::with_capacity(count);
    for _ in 0..count {
        let offset = cur.pos;
        let v = f64::from_le_bytes(cur.take(8, "pixels")?.try_into().expect("8 bytes"));
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Format {
                offset,
                reason: format!("pixel value {v} outside [0, 1]"),
            });
        }
        pixels.push(v);
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let offset = cur.pos;
        let l = u16::from_le_bytes(cur.take(2, "labels")?.try_into().expect("2 bytes")) as usize;
        if l >= classes {
            return Err(Error::Format {
                offset,
                reason: format!("label {l} out of range for {classes} classes"),
            });
        }
        labels.push(l);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            offset: cur.pos,
            reason: "trailing bytes after labels".into(),
        });
    }
    Dataset::new(name, EXTERNAL_SPLIT_SEED, Tensor::new(vec![n, c, h, w], pixels)?, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_spirals_lie_on_their_arms() {
        let d = generate_spirals(50, 3, 0.0, 1).unwrap();
        for (idx, &label) in d.labels.iter().enumerate() {
            let i = idx % 50;
            let s = i as f64 / 49.0;
            let p = spiral_point(label, 3, s);
            let x = d.inputs.index_axis0(idx).unwrap();
            let dist = ((x.data()[0] - p[0]).powi(2) + (x.data()[1] - p[1]).powi(2)).sqrt();
            assert!(dist <= 1e-9);
        }
    }

    #[test]
    fn spiral_sizes_and_split() {
        let d = generate_spirals(100, 3, 0.1, 4).unwrap();
        assert_eq!(d.len(), 300);
        assert_eq!(d.train.len(), 240);
        assert_eq!(d.test.len(), 60);
        let mut all: Vec<usize> = d.train.iter().chain(&d.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..300).collect::<Vec<_>>());
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(generate_spirals(20, 4, 0.2, 9).unwrap(), generate_spirals(20, 4, 0.2, 9).unwrap());
        assert_ne!(generate_spirals(20, 4, 0.2, 9).unwrap(), generate_spirals(20, 4, 0.2, 10).unwrap());
        assert_eq!(generate_blobs(10, 5, 3, 2.0, 1).unwrap(), generate_blobs(10, 5, 3, 2.0, 1).unwrap());
    }

    #[test]
    fn invalid_sizes_rejected() {
        assert!(generate_spirals(1, 3, 0.1, 0).is_err());
        assert!(generate_spirals(10, 1, 0.1, 0).is_err());
        assert!(generate_blobs(10, 3, 0, 1.0, 0).is_err());
    }

    #[test]
    fn header_only_file_is_empty_dataset() {
        let mut bytes = DATASET_MAGIC.to_vec();
        for v in [0u32, 1, 2, 2, 3] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let err = parse_image_dataset(&bytes, "x").unwrap_err().to_string();
        assert!(err.contains("empty dataset"), "{err}");
    }

    #[test]
    fn bad_magic_and_truncation_report_offsets() {
        match parse_image_dataset(b"LWDS2aaaa", "x") {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        let mut bytes = DATASET_MAGIC.to_vec();
        for v in [1u32, 1, 1, 2, 2] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&0.5f64.to_le_bytes());
        match parse_image_dataset(&bytes, "x") {
            Err(Error::Format { offset, reason }) => {
                assert_eq!(offset, bytes.len());
                assert!(reason.contains("truncated"));
            }
            other => panic!("{other:?}"),
        }
    }
}
