//! Datasets: MNIST IDX ingestion, synthetic Gaussian classes, deterministic
//! subsampling, and a small binary cache format.
//!
//! A [`Dataset`] keeps every row it was built from; subsampling only fills in
//! the train/test index sets. Inputs are always in `[0, 1]` and targets are
//! one-hot rows.

use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::rng;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;
const CACHE_HEADER: &str = "descentlab-dataset v1";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{file}: bad magic number 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic {
        file: String,
        found: u32,
        expected: u32,
    },
    #[error("{images} holds {n_images} images but {labels} holds {n_labels} labels")]
    CountMismatch {
        images: String,
        labels: String,
        n_images: usize,
        n_labels: usize,
    },
    #[error("{file}: truncated, expected {expected} bytes, found {actual}")]
    TruncatedFile {
        file: String,
        expected: usize,
        actual: usize,
    },
    #[error("requested {requested} rows but the dataset holds {available}")]
    NotEnoughRows { requested: usize, available: usize },
    #[error("invalid dataset parameter: {0}")]
    InvalidParameter(String),
    #[error("bad dataset cache: {0}")]
    BadCache(String),
}

/// Train/test index sets into a dataset's rows.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// How rows are drawn when subsampling.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Sampling {
    /// One shuffle over all rows.
    #[default]
    Uniform,
    /// Shuffle within each class, then deal classes round-robin.
    Balanced,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n_total × p`, every entry in `[0, 1]`.
    pub inputs: DMatrix<f64>,
    pub labels: Vec<usize>,
    /// `n_total × classes`, one-hot.
    pub targets: DMatrix<f64>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    /// Builds a dataset from raw inputs and labels with an empty split.
    pub fn new(inputs: DMatrix<f64>, labels: Vec<usize>, classes: usize) -> Result<Self, DataError> {
        if inputs.nrows() != labels.len() {
            return Err(DataError::InvalidParameter(format!(
                "{} input rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::InvalidParameter(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        if inputs.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DataError::InvalidParameter(
                "input entries must lie in [0, 1]".into(),
            ));
        }
        let targets = one_hot(&labels, classes);
        Ok(Self {
            inputs,
            labels,
            targets,
            classes,
            split: Split::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn rows(&self, idx: &[usize]) -> (DMatrix<f64>, DMatrix<f64>, Vec<usize>) {
        (
            select_rows(&self.inputs, idx),
            select_rows(&self.targets, idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Inputs, targets, labels of the train split.
    pub fn train(&self) -> (DMatrix<f64>, DMatrix<f64>, Vec<usize>) {
        self.rows(&self.split.train)
    }

    pub fn test(&self) -> (DMatrix<f64>, DMatrix<f64>, Vec<usize>) {
        self.rows(&self.split.test)
    }
}

pub(crate) fn select_rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |r, c| m[(idx[r], c)])
}

pub fn one_hot(labels: &[usize], classes: usize) -> DMatrix<f64> {
    let mut t = DMatrix::zeros(labels.len(), classes);
    for (row, &l) in labels.iter().enumerate() {
        t[(row, l)] = 1.0;
    }
    t
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize, file: &str) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::TruncatedFile {
            file: file.to_string(),
            expected: at + 4,
            actual: bytes.len(),
        })
}

/// Loads an MNIST image/label IDX pair. Pixels are scaled by 1/255 and the
/// class count is `max(label) + 1`.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;
    parse_mnist_idx(
        &images,
        &labels,
        &images_path.display().to_string(),
        &labels_path.display().to_string(),
    )
}

/// Byte-level half of [`load_mnist_idx`]; `images_name`/`labels_name` appear in errors.
pub fn parse_mnist_idx(
    images: &[u8],
    labels: &[u8],
    images_name: &str,
    labels_name: &str,
) -> Result<Dataset, DataError> {
    let magic = be_u32(images, 0, images_name)?;
    if magic != IMAGE_MAGIC {
        return Err(DataError::BadMagic {
            file: images_name.into(),
            found: magic,
            expected: IMAGE_MAGIC,
        });
    }
    let magic = be_u32(labels, 0, labels_name)?;
    if magic != LABEL_MAGIC {
        return Err(DataError::BadMagic {
            file: labels_name.into(),
            found: magic,
            expected: LABEL_MAGIC,
        });
    }
    let n_images = be_u32(images, 4, images_name)? as usize;
    let rows = be_u32(images, 8, images_name)? as usize;
    let cols = be_u32(images, 12, images_name)? as usize;
    let n_labels = be_u32(labels, 4, labels_name)? as usize;
    if n_images != n_labels {
        return Err(DataError::CountMismatch {
            images: images_name.into(),
            labels: labels_name.into(),
            n_images,
            n_labels,
        });
    }
    let pixels = rows * cols;
    let expected = 16 + n_images * pixels;
    if images.len() < expected {
        return Err(DataError::TruncatedFile {
            file: images_name.into(),
            expected,
            actual: images.len(),
        });
    }
    if labels.len() < 8 + n_labels {
        return Err(DataError::TruncatedFile {
            file: labels_name.into(),
            expected: 8 + n_labels,
            actual: labels.len(),
        });
    }
    let body = &images[16..expected];
    let inputs = DMatrix::from_fn(n_images, pixels, |r, c| f64::from(body[r * pixels + c]) / 255.0);
    let labels: Vec<usize> = labels[8..8 + n_labels].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    Dataset::new(inputs, labels, classes)
}

/// Deterministic subsample: shuffle row indices with `seed`, the first
/// `n_train` go to train and the next `n_test` to test.
pub fn subsample_and_split(
    ds: &Dataset,
    seed: u64,
    n_train: usize,
    n_test: usize,
) -> Result<Dataset, DataError> {
    subsample_and_split_with(ds, seed, n_train, n_test, Sampling::Uniform)
}

pub fn subsample_and_split_with(
    ds: &Dataset,
    seed: u64,
    n_train: usize,
    n_test: usize,
    sampling: Sampling,
) -> Result<Dataset, DataError> {
    let requested = n_train + n_test;
    if requested > ds.len() {
        return Err(DataError::NotEnoughRows {
            requested,
            available: ds.len(),
        });
    }
    let mut gen = rng::rng(seed);
    let order = match sampling {
        Sampling::Uniform => {
            let mut idx: Vec<usize> = (0..ds.len()).collect();
            rng::shuffle(&mut idx, &mut gen);
            idx
        }
        Sampling::Balanced => {
            let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
            for (i, &l) in ds.labels.iter().enumerate() {
                per_class[l].push(i);
            }
            for bucket in &mut per_class {
                rng::shuffle(bucket, &mut gen);
            }
            let longest = per_class.iter().map(Vec::len).max().unwrap_or(0);
            let mut idx = Vec::with_capacity(ds.len());
            for k in 0..longest {
                idx.extend(per_class.iter().filter_map(|b| b.get(k).copied()));
            }
            idx
        }
    };
    let mut out = ds.clone();
    out.split = Split {
        train: order[..n_train].to_vec(),
        test: order[n_train..requested].to_vec(),
    };
    Ok(out)
}

/// `classes` isotropic Gaussian blobs in `dim` dimensions.
///
/// Centers are drawn once from `N(0, center_scale² I)`, each point is its
/// center plus unit Gaussian noise, and every coordinate is then affinely
/// rescaled into `[0, 1]`. Rows are ordered class by class.
pub fn synth_gaussian_classes(
    seed: u64,
    n_per_class: usize,
    classes: usize,
    dim: usize,
    center_scale: f64,
) -> Result<Dataset, DataError> {
    if classes < 2 {
        return Err(DataError::InvalidParameter(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if dim < 1 {
        return Err(DataError::InvalidParameter("input dimension must be ≥ 1".into()));
    }
    if !center_scale.is_finite() || center_scale < 0.0 {
        return Err(DataError::InvalidParameter(format!(
            "center_scale must be finite and ≥ 0, got {center_scale}"
        )));
    }
    let mut center_rng = rng::stream_rng(seed, 0);
    let centers = DMatrix::from_fn(classes, dim, |_, _| {
        center_scale * rng::standard_normal(&mut center_rng)
    });
    let mut noise_rng = rng::stream_rng(seed, 1);
    let n = n_per_class * classes;
    let mut inputs = DMatrix::zeros(n, dim);
    let mut labels = Vec::with_capacity(n);
    for class in 0..classes {
        for i in 0..n_per_class {
            let row = class * n_per_class + i;
            for c in 0..dim {
                inputs[(row, c)] = centers[(class, c)] + rng::standard_normal(&mut noise_rng);
            }
            labels.push(class);
        }
    }
    for mut col in inputs.column_iter_mut() {
        let lo = col.min();
        let hi = col.max();
        let span = hi - lo;
        col.apply(|v| *v = if span > 0.0 { ((*v - lo) / span).clamp(0.0, 1.0) } else { 0.0 });
    }
    Dataset::new(inputs, labels, classes)
}

/// Writes the cache format:
///
/// ```text
/// descentlab-dataset v1\n
/// <n_total> <p> <k> <n_train> <n_test>\n
/// inputs   n_total·p  f64 LE, row-major
/// targets  n_total·k  f64 LE, row-major
/// train    n_train    u64 LE
/// test     n_test     u64 LE
/// ```
pub fn write_cache<W: Write>(ds: &Dataset, mut out: W) -> io::Result<()> {
    writeln!(out, "{CACHE_HEADER}")?;
    writeln!(
        out,
        "{} {} {} {} {}",
        ds.len(),
        ds.input_dim(),
        ds.classes,
        ds.split.train.len(),
        ds.split.test.len()
    )?;
    for m in [&ds.inputs, &ds.targets] {
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                out.write_all(&m[(r, c)].to_le_bytes())?;
            }
        }
    }
    for &i in ds.split.train.iter().chain(&ds.split.test) {
        out.write_all(&(i as u64).to_le_bytes())?;
    }
    out.flush()
}

pub fn read_cache<R: Read>(input: R) -> Result<Dataset, DataError> {
    let bad = |msg: &str| DataError::BadCache(msg.to_string());
    let mut reader = BufReader::new(input);
    let mut line = String::new();
    reader.read_line(&mut line).map_err(|e| bad(&e.to_string()))?;
    if line.trim_end() != CACHE_HEADER {
        return Err(bad("missing header line"));
    }
    line.clear();
    reader.read_line(&mut line).map_err(|e| bad(&e.to_string()))?;
    let dims: Vec<usize> = line
        .split_whitespace()
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|_| bad("malformed dimension line"))?;
    let [n, p, k, n_train, n_test] = dims[..] else {
        return Err(bad("dimension line needs five fields"));
    };
    let mut read_f64s = |count: usize| -> Result<Vec<f64>, DataError> {
        let mut buf = vec![0u8; count * 8];
        reader.read_exact(&mut buf).map_err(|_| bad("truncated body"))?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let inputs = DMatrix::from_row_slice(n, p, &read_f64s(n * p)?);
    let targets = DMatrix::from_row_slice(n, k, &read_f64s(n * k)?);
    let mut idx = vec![0u8; (n_train + n_test) * 8];
    reader.read_exact(&mut idx).map_err(|_| bad("truncated split"))?;
    let idx: Vec<usize> = idx
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    if idx.iter().any(|&i| i >= n) {
        return Err(bad("split index out of range"));
    }
    let mut labels = Vec::with_capacity(n);
    for row in targets.row_iter() {
        let hot: Vec<usize> = (0..k).filter(|&c| row[c] == 1.0).collect();
        if hot.len() != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(bad("target row is not one-hot"));
        }
        labels.push(hot[0]);
    }
    let mut ds = Dataset::new(inputs, labels, k)?;
    ds.split = Split {
        train: idx[..n_train].to_vec(),
        test: idx[n_train..].to_vec(),
    };
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_pair(n: usize, rows: usize, cols: usize, pixel: u8, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        for d in [n, rows, cols] {
            img.extend_from_slice(&(d as u32).to_be_bytes());
        }
        img.extend(std::iter::repeat(pixel).take(n * rows * cols));
        let mut lab = Vec::new();
        lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        lab.extend_from_slice(labels);
        (img, lab)
    }

    #[test]
    fn zero_pixel_fixture_loads_as_zeros() {
        let (img, lab) = idx_pair(10, 2, 3, 0, &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
        let ds = parse_mnist_idx(&img, &lab, "img", "lab").unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.input_dim(), 6);
        assert!(ds.inputs.iter().all(|&v| v == 0.0));
        assert!(ds.split.train.is_empty() && ds.split.test.is_empty());
    }

    #[test]
    fn label_seven_is_one_hot_at_column_seven() {
        let (img, lab) = idx_pair(2, 1, 1, 255, &[7, 2]);
        let ds = parse_mnist_idx(&img, &lab, "img", "lab").unwrap();
        assert_eq!(ds.classes, 8);
        let row: Vec<f64> = ds.targets.row(0).iter().copied().collect();
        assert_eq!(row, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(ds.inputs[(0, 0)], 1.0);
    }

    #[test]
    fn idx_errors_name_the_file() {
        let (mut img, lab) = idx_pair(3, 2, 2, 1, &[0, 1, 2]);
        let (_, short_lab) = idx_pair(3, 2, 2, 1, &[0, 1]);
        let err = parse_mnist_idx(&img, &short_lab, "a.idx", "b.idx").unwrap_err();
        assert!(matches!(err, DataError::CountMismatch { .. }));
        assert!(err.to_string().contains("b.idx"));

        img.truncate(20);
        let err = parse_mnist_idx(&img, &lab, "a.idx", "b.idx").unwrap_err();
        assert!(matches!(err, DataError::TruncatedFile { ref file, .. } if file == "a.idx"));

        let err = parse_mnist_idx(&lab, &lab, "a.idx", "b.idx").unwrap_err();
        assert!(matches!(err, DataError::BadMagic { ref file, .. } if file == "a.idx"));
        let err = parse_mnist_idx(&img, &img, "a.idx", "b.idx").unwrap_err();
        assert!(matches!(err, DataError::BadMagic { ref file, .. } if file == "b.idx"));
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load_mnist_idx(Path::new("/no/such/images"), Path::new("/no/labels")).unwrap_err();
        assert!(err.to_string().contains("/no/such/images"));
    }

    fn fixture(n: usize) -> Dataset {
        let inputs = DMatrix::from_fn(n, 3, |r, c| ((r * 3 + c) % 7) as f64 / 7.0);
        let labels = (0..n).map(|i| i % 4).collect();
        Dataset::new(inputs, labels, 4).unwrap()
    }

    #[test]
    fn empty_split_and_determinism() {
        let ds = fixture(100);
        let empty = subsample_and_split(&ds, 5, 0, 0).unwrap();
        assert!(empty.split.train.is_empty() && empty.split.test.is_empty());
        let a = subsample_and_split(&ds, 5, 30, 20).unwrap();
        let b = subsample_and_split(&ds, 5, 30, 20).unwrap();
        assert_eq!(a.split, b.split);
    }

    #[test]
    fn different_seeds_give_different_train_sets() {
        let ds = fixture(100);
        let a = subsample_and_split(&ds, 1, 50, 10).unwrap();
        let b = subsample_and_split(&ds, 2, 50, 10).unwrap();
        assert_ne!(a.split.train, b.split.train);
    }

    #[test]
    fn split_is_disjoint_and_bounded() {
        let ds = fixture(40);
        let s = subsample_and_split(&ds, 9, 25, 15).unwrap().split;
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 40);
        assert!(all.iter().all(|&i| i < 40));
        assert!(matches!(
            subsample_and_split(&ds, 9, 30, 11),
            Err(DataError::NotEnoughRows { requested: 41, available: 40 })
        ));
    }

    #[test]
    fn balanced_sampling_spreads_classes() {
        let ds = fixture(100);
        let s = subsample_and_split_with(&ds, 3, 40, 0, Sampling::Balanced).unwrap();
        let mut counts = [0usize; 4];
        for &i in &s.split.train {
            counts[ds.labels[i]] += 1;
        }
        assert_eq!(counts, [10, 10, 10, 10]);
    }

    #[test]
    fn synthetic_is_deterministic_and_normalized() {
        let a = synth_gaussian_classes(4, 20, 3, 5, 2.0).unwrap();
        let b = synth_gaussian_classes(4, 20, 3, 5, 2.0).unwrap();
        assert_eq!(a, b);
        assert!(a.inputs.iter().all(|v| (0.0..=1.0).contains(v)));
        for row in a.targets.row_iter() {
            assert_eq!(row.sum(), 1.0);
        }
        assert_eq!(a.len(), 60);
        assert!(synth_gaussian_classes(4, 20, 1, 5, 2.0).is_err());
        assert!(synth_gaussian_classes(4, 20, 2, 0, 2.0).is_err());
    }

    #[test]
    fn cache_round_trip_is_bit_identical() {
        let ds = subsample_and_split(&synth_gaussian_classes(8, 7, 3, 4, 1.5).unwrap(), 2, 10, 5).unwrap();
        let mut buf = Vec::new();
        write_cache(&ds, &mut buf).unwrap();
        let back = read_cache(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
        assert!(read_cache(&b"nope\n"[..]).is_err());
        assert!(read_cache(&buf[..buf.len() - 3]).is_err());
    }
}
