//! Datasets: the CIFAR-10 binary format, synthetic Gaussian blobs with an
//! analytic separator, strided subsampling, and a small binary container.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::InputShape;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

const CIFAR_SHAPE: InputShape = InputShape {
    channels: 3,
    height: 32,
    width: 32,
};
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Examples with inputs in `[0, 1]`, stored flat and channel-planar.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: InputShape,
    pub num_classes: usize,
    pub split: String,
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    /// Position of each example in the dataset it was drawn from.
    pub indices: Vec<usize>,
}

impl Dataset {
    pub fn new(
        shape: InputShape,
        num_classes: usize,
        split: impl Into<String>,
        inputs: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let indices = (0..labels.len()).collect();
        let ds = Dataset {
            shape,
            num_classes,
            split: split.into(),
            inputs,
            labels,
            indices,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.len() != self.labels.len() * self.shape.len() {
            return Err(Error::input(format!(
                "{} input values for {} examples of shape {}",
                self.inputs.len(),
                self.labels.len(),
                self.shape
            )));
        }
        if self.indices.len() != self.labels.len() {
            return Err(Error::input("index metadata does not match example count"));
        }
        if let Some(i) = self.labels.iter().position(|&y| y >= self.num_classes) {
            return Err(Error::input(format!(
                "example {i} has label {} outside 0..{}",
                self.labels[i], self.num_classes
            )));
        }
        if let Some(p) = self.inputs.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::input(format!(
                "example {} has a value outside [0, 1]",
                p / self.shape.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        let d = self.shape.len();
        &self.inputs[i * d..(i + 1) * d]
    }

    /// Gathers the given examples into a batch tensor.
    pub fn batch(&self, rows: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.shape.len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(self.input(r));
        }
        let s = self.shape;
        let x = Tensor {
            n: rows.len(),
            c: s.channels,
            h: s.height,
            w: s.width,
            data,
        };
        (x, rows.iter().map(|&r| self.labels[r]).collect())
    }
}

fn cifar_files(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "bin"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::format(path, "directory contains no .bin files"));
    }
    Ok(files)
}

/// Reads one CIFAR-10 binary file, or every `.bin` file of a directory in name order.
pub fn read_cifar10_binary(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for file in cifar_files(path)? {
        let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
        if bytes.len() % CIFAR_RECORD != 0 {
            let offset = bytes.len() - bytes.len() % CIFAR_RECORD;
            return Err(Error::format(
                &file,
                format!(
                    "truncated record at byte offset {offset} (size {} is not a multiple of {CIFAR_RECORD})",
                    bytes.len()
                ),
            ));
        }
        for (r, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            if record[0] > 9 {
                return Err(Error::format(
                    &file,
                    format!("label byte {} at byte offset {}", record[0], r * CIFAR_RECORD),
                ));
            }
            labels.push(record[0] as usize);
            inputs.extend(record[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    let split = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(CIFAR_SHAPE, 10, split, inputs, labels)
}

/// The training (`data_batch_1..5.bin`) or test (`test_batch.bin`) split of a
/// CIFAR-10 binary directory. A plain file is read as is.
pub fn read_cifar10_split(path: impl AsRef<Path>, train: bool) -> Result<Dataset> {
    let path = path.as_ref();
    if !path.is_dir() {
        return read_cifar10_binary(path);
    }
    let names: Vec<String> = if train {
        (1..=5).map(|i| format!("data_batch_{i}.bin")).collect()
    } else {
        vec!["test_batch.bin".to_string()]
    };
    let mut parts = Vec::with_capacity(names.len());
    for name in &names {
        parts.push(read_cifar10_binary(path.join(name))?);
    }
    let mut ds = parts.remove(0);
    for p in parts {
        ds.inputs.extend(p.inputs);
        ds.labels.extend(p.labels);
    }
    ds.indices = (0..ds.labels.len()).collect();
    ds.split = if train { "train" } else { "test" }.to_string();
    Ok(ds)
}

/// Writes a dataset of shape 3x32x32 in the CIFAR-10 binary format; pixels
/// are rounded to the nearest byte.
pub fn write_cifar10_binary(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if dataset.shape != CIFAR_SHAPE || dataset.num_classes > 10 {
        return Err(Error::input(
            "only 3x32x32 datasets with at most 10 classes fit the CIFAR format",
        ));
    }
    let mut out = Vec::with_capacity(dataset.len() * CIFAR_RECORD);
    for i in 0..dataset.len() {
        out.push(dataset.labels[i] as u8);
        out.extend(dataset.input(i).iter().map(|v| (v * 255.0).round() as u8));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Two-class blobs with their Bayes-optimal separator `w . x + b`.
#[derive(Debug, Clone)]
pub struct SyntheticBlobs {
    pub dataset: Dataset,
    pub weight: Vec<f64>,
    pub bias: f64,
    /// Distance of each point to the separating hyperplane.
    pub margins: Vec<f64>,
}

impl SyntheticBlobs {
    pub fn separator_label(&self, x: &[f64]) -> usize {
        let s: f64 = self.weight.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias;
        usize::from(s > 0.0)
    }
}

/// Clusters centered at `0.5 -/+ (separation / 2) e1` with isotropic spread
/// `sigma_data`, clipped to `[0, 1]`. Labels alternate 0, 1, 0, ...; class 1
/// sits on the positive side. The input shape is `1x1xd`.
pub fn synthetic_blobs(d: usize, separation: f64, sigma_data: f64, count: usize, seed: u64) -> Result<SyntheticBlobs> {
    if !(separation > 0.0) {
        return Err(Error::config(format!("blob separation {separation} must be positive")));
    }
    if d == 0 || sigma_data < 0.0 {
        return Err(Error::config("blobs need d >= 1 and a non-negative spread"));
    }
    let mut rng = rng::stream(seed, "blobs", &[]);
    let mut inputs = Vec::with_capacity(count * d);
    let mut labels = Vec::with_capacity(count);
    let mut margins = Vec::with_capacity(count);
    for i in 0..count {
        let y = i % 2;
        let sign = if y == 1 { 1.0 } else { -1.0 };
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            let center = if j == 0 { sign * separation / 2.0 } else { 0.0 };
            inputs.push((0.5 + center + sigma_data * z).clamp(0.0, 1.0));
        }
        margins.push((inputs[i * d] - 0.5).abs());
        labels.push(y);
    }
    let mut weight = vec![0.0; d];
    weight[0] = 1.0;
    let dataset = Dataset::new(InputShape::new(1, 1, d), 2, "blobs", inputs, labels)?;
    Ok(SyntheticBlobs {
        dataset,
        weight,
        bias: -0.5,
        margins,
    })
}

/// Keeps examples `0, stride, 2 * stride, ...` with their original indices.
pub fn subsample_every(dataset: &Dataset, stride: usize) -> Result<Dataset> {
    if stride == 0 {
        return Err(Error::config("subsample stride must be at least 1"));
    }
    let rows: Vec<usize> = (0..dataset.len()).step_by(stride).collect();
    let d = dataset.shape.len();
    let mut out = dataset.clone();
    out.inputs = rows
        .iter()
        .flat_map(|&r| dataset.inputs[r * d..(r + 1) * d].iter().copied())
        .collect();
    out.labels = rows.iter().map(|&r| dataset.labels[r]).collect();
    out.indices = rows.iter().map(|&r| dataset.indices[r]).collect();
    Ok(out)
}

/// Random 4-pixel-padded crop and horizontal flip, per sample, in place.
pub fn augment_batch(x: &mut Tensor, rng: &mut Rng) {
    const PAD: i64 = 4;
    let (c, h, w) = (x.c, x.h as i64, x.w as i64);
    let (hu, wu) = (x.h, x.w);
    for s in 0..x.n {
        let dy = rng.random_range(-PAD..=PAD);
        let dx = rng.random_range(-PAD..=PAD);
        let flip = rng.random_bool(0.5);
        let src = x.sample(s).to_vec();
        let dst = x.sample_mut(s);
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let sj = if flip { w - 1 - j } else { j };
                    let (si, sj) = (i + dy, sj + dx);
                    let v = if (0..h).contains(&si) && (0..w).contains(&sj) {
                        src[(ch * hu + si as usize) * wu + sj as usize]
                    } else {
                        0.0
                    };
                    dst[(ch * hu + i as usize) * wu + j as usize] = v;
                }
            }
        }
    }
}

const CONTAINER_MAGIC: &[u8; 8] = b"SPCTDATA";
const CONTAINER_VERSION: u32 = 1;

/// Saves a dataset as: magic, version, shape and class count, split name,
/// then per example the original index, label and `f64` inputs (all little endian).
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    for v in [
        dataset.shape.channels,
        dataset.shape.height,
        dataset.shape.width,
        dataset.num_classes,
        dataset.len(),
        dataset.split.len(),
    ] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(dataset.split.as_bytes());
    for i in 0..dataset.len() {
        out.extend_from_slice(&(dataset.indices[i] as u64).to_le_bytes());
        out.extend_from_slice(&(dataset.labels[i] as u64).to_le_bytes());
        for v in dataset.input(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!("unexpected end of file at byte {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::format(self.path, format!("value {v} too large")))
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(8)? != CONTAINER_MAGIC {
        return Err(Error::format(path, "not a dataset container"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(Error::format(path, format!("unsupported container version {version}")));
    }
    let shape = InputShape::new(r.usize()?, r.usize()?, r.usize()?);
    let num_classes = r.usize()?;
    let count = r.usize()?;
    let name_len = r.usize()?;
    let split =
        String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::format(path, "split name is not UTF-8"))?;
    let d = shape.len();
    let mut ds = Dataset {
        shape,
        num_classes,
        split,
        inputs: Vec::with_capacity(count.saturating_mul(d).min(1 << 28)),
        labels: Vec::new(),
        indices: Vec::new(),
    };
    for _ in 0..count {
        ds.indices.push(r.usize()?);
        ds.labels.push(r.usize()?);
        for _ in 0..d {
            ds.inputs.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, format!("trailing bytes after offset {}", r.pos)));
    }
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cifar_bytes(labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        for (i, &y) in labels.iter().enumerate() {
            out.push(y);
            out.extend((0..3072).map(|p| ((p * 7 + i * 13) % 256) as u8));
        }
        out
    }

    #[test]
    fn reads_cifar_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test_batch.bin");
        let mut bytes = cifar_bytes(&[7, 0, 9]);
        bytes[1] = 255;
        fs::write(&path, &bytes).unwrap();
        let ds = read_cifar10_binary(&path).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.labels, vec![7, 0, 9]);
        assert_eq!(ds.input(0)[0], 1.0);
        assert_eq!(ds.split, "test_batch");
    }

    #[test]
    fn cifar_round_trip_preserves_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.bin");
        let b = dir.path().join("b.bin");
        let bytes = cifar_bytes(&[1, 2, 3, 4]);
        fs::write(&a, &bytes).unwrap();
        write_cifar10_binary(&read_cifar10_binary(&a).unwrap(), &b).unwrap();
        assert_eq!(fs::read(&b).unwrap(), bytes);
    }

    #[test]
    fn reads_directory_in_name_order() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("data_batch_2.bin"), cifar_bytes(&[2])).unwrap();
        fs::write(dir.path().join("data_batch_1.bin"), cifar_bytes(&[1])).unwrap();
        fs::write(dir.path().join("readme.txt"), b"x").unwrap();
        assert_eq!(read_cifar10_binary(dir.path()).unwrap().labels, vec![1, 2]);
    }

    #[test]
    fn reads_named_splits() {
        let dir = tempfile::tempdir().unwrap();
        for i in 1..=5u8 {
            fs::write(dir.path().join(format!("data_batch_{i}.bin")), cifar_bytes(&[i, i])).unwrap();
        }
        fs::write(dir.path().join("test_batch.bin"), cifar_bytes(&[0])).unwrap();
        let train = read_cifar10_split(dir.path(), true).unwrap();
        assert_eq!(train.labels, vec![1, 1, 2, 2, 3, 3, 4, 4, 5, 5]);
        assert_eq!(train.indices[9], 9);
        assert_eq!(read_cifar10_split(dir.path(), false).unwrap().len(), 1);
    }

    #[test]
    fn cifar_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        let mut bytes = cifar_bytes(&[1, 2]);
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        let err = read_cifar10_binary(&path).unwrap_err().to_string();
        assert!(err.contains("offset 3073"), "{err}");
        fs::write(&path, cifar_bytes(&[1, 10])).unwrap();
        let err = read_cifar10_binary(&path).unwrap_err().to_string();
        assert!(err.contains("label byte 10"), "{err}");
    }

    #[test]
    fn blobs_are_deterministic_and_separable() {
        let a = synthetic_blobs(8, 0.8, 0.05, 200, 3).unwrap();
        let b = synthetic_blobs(8, 0.8, 0.05, 200, 3).unwrap();
        assert_eq!(a.dataset, b.dataset);
        for i in 0..200 {
            assert_eq!(a.separator_label(a.dataset.input(i)), a.dataset.labels[i]);
        }
        let min = a.margins.iter().copied().fold(f64::MAX, f64::min);
        assert!(min > 0.2 && min <= 0.4 + 1e-12, "{min}");
        assert!(synthetic_blobs(8, 0.0, 0.1, 10, 0).is_err());
    }

    #[test]
    fn blob_accuracy_matches_gaussian_overlap() {
        // Phi(sep / (2 sigma)) with sep = 0.2, sigma = 0.1 is Phi(1) = 0.841345.
        let blobs = synthetic_blobs(4, 0.2, 0.1, 1000, 11).unwrap();
        let correct = (0..1000)
            .filter(|&i| blobs.separator_label(blobs.dataset.input(i)) == blobs.dataset.labels[i])
            .count();
        let acc = correct as f64 / 1000.0;
        assert!((acc - 0.841345).abs() < 0.03, "{acc}");
    }

    #[test]
    fn subsample_examples() {
        let blobs = synthetic_blobs(2, 0.5, 0.1, 10_000, 0).unwrap();
        let sub = subsample_every(&blobs.dataset, 20).unwrap();
        assert_eq!(sub.len(), 500);
        assert_eq!(sub.indices[3], 60);
        assert_eq!(sub.input(3), blobs.dataset.input(60));
        assert_eq!(subsample_every(&blobs.dataset, 1).unwrap(), blobs.dataset);
        let tiny = subsample_every(&sub, 1000).unwrap();
        assert_eq!(tiny.len(), 1);
        assert_eq!(tiny.indices, vec![0]);
        let nested = subsample_every(&sub, 2).unwrap();
        assert_eq!(nested.indices[1], 40);
        assert!(subsample_every(&sub, 0).is_err());
    }

    #[test]
    fn container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("blobs.dat");
        let ds = subsample_every(&synthetic_blobs(5, 0.6, 0.2, 50, 1).unwrap().dataset, 3).unwrap();
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
        let mut bytes = fs::read(&path).unwrap();
        bytes.push(0);
        fs::write(&path, bytes).unwrap();
        assert!(load_dataset(&path).is_err());
    }

    #[test]
    fn augmentation_keeps_shape_and_range() {
        let mut rng = rng::stream(0, "t", &[]);
        let mut x = Tensor::from_vec(2, 3, 8, 8, (0..384).map(|i| (i % 17) as f64 / 16.0).collect()).unwrap();
        augment_batch(&mut x, &mut rng);
        assert_eq!(x.data.len(), 384);
        assert!(x.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
