//! Datasets and the seeded batch iterator. Images are kept as reals in
//! `0..=255` with no standardization.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{DatasetKind, DatasetSpec};
use crate::{Error, Result, Tensor};

const SYNTHETIC_TRAIN: usize = 512;
const SYNTHETIC_VAL: usize = 1000;

/// Samples stored contiguously as `N×C×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub shape: [usize; 3],
    pub pixels: Vec<f64>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Datasets {
    pub train: Dataset,
    pub val: Dataset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let s = self.sample_len();
        &self.pixels[i * s..(i + 1) * s]
    }

    /// Gathers `indices` into a batch, mirroring the samples whose `flip`
    /// entry is set.
    pub fn gather(&self, indices: &[usize], flip: Option<&[bool]>) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::Dataset("empty batch".into()));
        }
        let [c, h, w] = self.shape;
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for (j, &i) in indices.iter().enumerate() {
            let src = self.sample(i);
            if flip.map_or(false, |f| f[j]) {
                for row in src.chunks(w) {
                    data.extend(row.iter().rev());
                }
            } else {
                data.extend_from_slice(src);
            }
        }
        Ok(Batch {
            images: Tensor::new(vec![indices.len(), c, h, w], data)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// Sequential batches of at most `size` samples, no augmentation.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Result<Batch>> + '_ {
        let n = self.len();
        (0..n).step_by(size.max(1)).map(move |start| {
            let idx: Vec<usize> = (start..(start + size).min(n)).collect();
            self.gather(&idx, None)
        })
    }

    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            self.labels.truncate(n);
            let s = self.sample_len();
            self.pixels.truncate(n * s);
        }
    }
}

/// Per-epoch shuffled batches with horizontal flips for 32×32 data. Order
/// and flips come from one seeded stream, independent of the model.
pub struct Batcher {
    rng: ChaCha8Rng,
    batch_size: usize,
    flip: bool,
}

impl Batcher {
    pub fn new(seed: u64, batch_size: usize, shape: [usize; 3]) -> Self {
        Batcher {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a),
            batch_size,
            flip: shape[1] == 32 && shape[2] == 32,
        }
    }

    /// Batches per epoch; the trailing partial batch is dropped.
    pub fn steps_per_epoch(&self, data: &Dataset) -> usize {
        data.len() / self.batch_size
    }

    /// The index and flip plan of the next epoch.
    pub fn epoch(&mut self, data: &Dataset) -> Vec<(Vec<usize>, Vec<bool>)> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        order
            .chunks_exact(self.batch_size)
            .map(|idx| {
                let flips = idx
                    .iter()
                    .map(|_| self.flip && self.rng.gen_bool(0.5))
                    .collect();
                (idx.to_vec(), flips)
            })
            .collect()
    }
}

fn smooth_pattern(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for _ in 0..4 {
            let fy: f64 = rng.gen_range(0.5..3.0);
            let fx: f64 = rng.gen_range(0.5..3.0);
            let ph: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp: f64 = rng.gen_range(0.5..1.0);
            for y in 0..h {
                for x in 0..w {
                    let t = std::f64::consts::TAU
                        * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64)
                        + ph;
                    out[(ch * h + y) * w + x] += amp * t.sin();
                }
            }
        }
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64).sqrt();
    out.iter_mut().for_each(|v| *v /= rms);
    out
}

/// Class-prototype images: each class owns a smooth random pattern; a
/// sample is its prototype, circularly shifted by up to 3 pixels, plus
/// Gaussian pixel noise of `noise` times the prototype amplitude, rounded
/// and clipped to `0..=255`. Labels cycle through the classes.
pub fn synthetic(spec: &DatasetSpec, classes: usize) -> Result<Datasets> {
    let (c, s) = (spec.channels, spec.image_size);
    if c == 0 || s == 0 || classes < 2 {
        return Err(Error::Dataset(
            "synthetic set needs channels, image_size ≥ 1 and ≥ 2 classes".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.data_seed);
    let protos: Vec<Vec<f64>> = (0..classes)
        .map(|_| smooth_pattern(&mut rng, c, s, s))
        .collect();
    let amp = 48.0;
    let mut make = |n: usize| {
        let mut pixels = Vec::with_capacity(n * c * s * s);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % classes;
            let (dy, dx) = (rng.gen_range(-3i64..=3), rng.gen_range(-3i64..=3));
            let p = &protos[label];
            for ch in 0..c {
                for y in 0..s {
                    for x in 0..s {
                        let sy = (y as i64 + dy).rem_euclid(s as i64) as usize;
                        let sx = (x as i64 + dx).rem_euclid(s as i64) as usize;
                        let z: f64 = rng.sample(StandardNormal);
                        let v = 128.0 + amp * (p[(ch * s + sy) * s + sx] + spec.noise * z);
                        pixels.push(v.round().clamp(0.0, 255.0));
                    }
                }
            }
            labels.push(label);
        }
        Dataset {
            shape: [c, s, s],
            pixels,
            labels,
        }
    };
    let train = make(spec.train_size.unwrap_or(SYNTHETIC_TRAIN));
    let val = make(spec.val_size.unwrap_or(SYNTHETIC_VAL));
    Ok(Datasets { train, val })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

/// One split of the IDX handwritten-digit format.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let ib = read(images)?;
    let lb = read(labels)?;
    if ib.len() < 16 || be_u32(&ib, 0) != 2051 {
        return Err(Error::Dataset(format!(
            "{}: not an IDX image file",
            images.display()
        )));
    }
    if lb.len() < 8 || be_u32(&lb, 0) != 2049 {
        return Err(Error::Dataset(format!(
            "{}: not an IDX label file",
            labels.display()
        )));
    }
    let (n, h, w) = (
        be_u32(&ib, 4) as usize,
        be_u32(&ib, 8) as usize,
        be_u32(&ib, 12) as usize,
    );
    let ln = be_u32(&lb, 4) as usize;
    if n != ln {
        return Err(Error::Dataset(format!("{n} images but {ln} labels")));
    }
    if ib.len() != 16 + n * h * w || lb.len() != 8 + n {
        return Err(Error::Dataset(format!(
            "{}: truncated IDX payload",
            images.display()
        )));
    }
    let labels: Vec<usize> = lb[8..].iter().map(|&v| v as usize).collect();
    if labels.iter().any(|&l| l >= 10) {
        return Err(Error::Dataset("label out of range".into()));
    }
    Ok(Dataset {
        shape: [1, h, w],
        pixels: ib[16..].iter().map(|&v| v as f64).collect(),
        labels,
    })
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Concatenated records of the 32×32 color binary format.
pub fn load_cifar_batches(files: &[&Path]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let b = read(f)?;
        if b.is_empty() || b.len() % CIFAR_RECORD != 0 {
            return Err(Error::Dataset(format!(
                "{}: size is not a multiple of {CIFAR_RECORD}",
                f.display()
            )));
        }
        for rec in b.chunks_exact(CIFAR_RECORD) {
            if rec[0] >= 10 {
                return Err(Error::Dataset(format!(
                    "{}: label {} out of range",
                    f.display(),
                    rec[0]
                )));
            }
            labels.push(rec[0] as usize);
            pixels.extend(rec[1..].iter().map(|&v| v as f64));
        }
    }
    Ok(Dataset {
        shape: [3, 32, 32],
        pixels,
        labels,
    })
}

fn existing_dir(spec: &DatasetSpec) -> Result<&Path> {
    let dir = spec
        .path
        .as_deref()
        .ok_or_else(|| Error::Dataset("no dataset path given".into()))?;
    if !dir.is_dir() {
        return Err(Error::Dataset(format!(
            "{}: not a directory",
            dir.display()
        )));
    }
    Ok(dir)
}

pub fn load_datasets(spec: &DatasetSpec, classes: usize) -> Result<Datasets> {
    let mut ds = match spec.kind {
        DatasetKind::Synthetic => synthetic(spec, classes)?,
        DatasetKind::Mnist => {
            let d = existing_dir(spec)?;
            Datasets {
                train: load_idx(
                    &d.join("train-images-idx3-ubyte"),
                    &d.join("train-labels-idx1-ubyte"),
                )?,
                val: load_idx(
                    &d.join("t10k-images-idx3-ubyte"),
                    &d.join("t10k-labels-idx1-ubyte"),
                )?,
            }
        }
        DatasetKind::Cifar10 => {
            let d = existing_dir(spec)?;
            let train: Vec<_> = (1..=5)
                .map(|i| d.join(format!("data_batch_{i}.bin")))
                .collect();
            let train: Vec<&Path> = train.iter().map(|p| p.as_path()).collect();
            Datasets {
                train: load_cifar_batches(&train)?,
                val: load_cifar_batches(&[&d.join("test_batch.bin")])?,
            }
        }
    };
    if spec.kind != DatasetKind::Synthetic {
        if let Some(n) = spec.train_size {
            ds.train.truncate(n);
        }
        if let Some(n) = spec.val_size {
            ds.val.truncate(n);
        }
    }
    if ds.train.is_empty() || ds.val.is_empty() {
        return Err(Error::Dataset("empty split".into()));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> DatasetSpec {
        DatasetSpec {
            kind: DatasetKind::Synthetic,
            path: None,
            train_size: Some(40),
            val_size: Some(20),
            image_size: 8,
            channels: 2,
            noise: 0.5,
            data_seed: 3,
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_in_range() {
        let a = synthetic(&spec(), 10).unwrap();
        let b = synthetic(&spec(), 10).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 40);
        assert!(a
            .train
            .pixels
            .iter()
            .all(|&v| (0.0..=255.0).contains(&v) && v.fract() == 0.0));
        let counts = (0..10).map(|c| a.train.labels.iter().filter(|&&l| l == c).count());
        assert!(counts.into_iter().all(|n| n == 4));
        let other = synthetic(
            &DatasetSpec {
                data_seed: 4,
                ..spec()
            },
            10,
        )
        .unwrap();
        assert_ne!(a.train.pixels, other.train.pixels);
    }

    #[test]
    fn batcher_covers_each_sample_once() {
        let d = synthetic(&spec(), 10).unwrap().train;
        let mut b = Batcher::new(1, 16, d.shape);
        assert_eq!(b.steps_per_epoch(&d), 2);
        let plan = b.epoch(&d);
        let mut seen: Vec<usize> = plan.iter().flat_map(|(i, _)| i.clone()).collect();
        assert_eq!(seen.len(), 32);
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 32);
        // 8×8 data is never flipped.
        assert!(plan.iter().all(|(_, f)| f.iter().all(|&x| !x)));
        let mut again = Batcher::new(1, 16, d.shape);
        assert_eq!(again.epoch(&d), plan);
    }

    #[test]
    fn flip_mirrors_rows() {
        let d = Dataset {
            shape: [1, 2, 3],
            pixels: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            labels: vec![0],
        };
        let b = d.gather(&[0], Some(&[true])).unwrap();
        assert_eq!(b.images.data(), &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Vec::new();
        for v in [2051u32, 2, 2, 2] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.extend_from_slice(&[0, 1, 2, 3, 255, 254, 253, 252]);
        let mut lab = Vec::new();
        for v in [2049u32, 2] {
            lab.extend_from_slice(&v.to_be_bytes());
        }
        lab.extend_from_slice(&[7, 3]);
        fs::write(dir.path().join("i"), &img).unwrap();
        fs::write(dir.path().join("l"), &lab).unwrap();
        let d = load_idx(&dir.path().join("i"), &dir.path().join("l")).unwrap();
        assert_eq!(d.shape, [1, 2, 2]);
        assert_eq!(d.labels, vec![7, 3]);
        assert_eq!(d.sample(1), &[255.0, 254.0, 253.0, 252.0]);

        fs::write(dir.path().join("bad"), &img[..20]).unwrap();
        assert!(load_idx(&dir.path().join("bad"), &dir.path().join("l")).is_err());
    }

    #[test]
    fn cifar_records() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![4u8];
        rec.extend((0..3072).map(|i| (i % 256) as u8));
        fs::write(dir.path().join("b.bin"), &rec).unwrap();
        let p = dir.path().join("b.bin");
        let d = load_cifar_batches(&[p.as_path()]).unwrap();
        assert_eq!(d.labels, vec![4]);
        assert_eq!(d.sample(0)[1025], 1.0);
        fs::write(&p, &rec[..100]).unwrap();
        assert!(load_cifar_batches(&[p.as_path()]).is_err());
    }

    #[test]
    fn missing_or_empty_dir_is_dataset_error() {
        let dir = tempfile::tempdir().unwrap();
        let s = DatasetSpec {
            kind: DatasetKind::Cifar10,
            path: Some(dir.path().to_path_buf()),
            ..spec()
        };
        assert!(matches!(load_datasets(&s, 10), Err(Error::Dataset(_))));
        let s = DatasetSpec {
            path: Some(dir.path().join("nope")),
            ..s
        };
        assert!(matches!(load_datasets(&s, 10), Err(Error::Dataset(_))));
    }
}
