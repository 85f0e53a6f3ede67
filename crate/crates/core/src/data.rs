//! Dataset ingestion (CSV, IDX), synthetic Gaussian mixtures, feature
//! scaling and minibatching.
//!
//! Labels ride along in [`Dataset`] for evaluation only. Training code
//! receives the feature matrix alone.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Array;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    #[default]
    None,
    /// Per-feature affine map onto `[-1, 1]`.
    Minmax,
    /// Per-feature zero mean, unit variance.
    Standardize,
}

/// Per-feature affine transform `scaled = (x - offset) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub kind: Scaling,
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Scaler {
    pub fn identity(dim: usize) -> Self {
        Scaler {
            kind: Scaling::None,
            offset: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Fits per-feature statistics of `x` (rows are samples). Constant
    /// features get scale 1.
    pub fn fit(kind: Scaling, x: &Array) -> Self {
        let (n, d) = (x.rows(), x.cols());
        let column = |j: usize| (0..n).map(move |i| x.get2(i, j));
        let nonzero = |s: f64| if s > 0.0 { s } else { 1.0 };
        let (offset, scale) = match kind {
            Scaling::None => return Self::identity(d),
            Scaling::Minmax => (0..d)
                .map(|j| {
                    let lo = column(j).fold(f64::INFINITY, f64::min);
                    let hi = column(j).fold(f64::NEG_INFINITY, f64::max);
                    ((hi + lo) / 2.0, nonzero((hi - lo) / 2.0))
                })
                .unzip(),
            Scaling::Standardize => (0..d)
                .map(|j| {
                    let mean = column(j).sum::<f64>() / n as f64;
                    let var = column(j).map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                    (mean, nonzero(var.sqrt()))
                })
                .unzip(),
        };
        Scaler {
            kind,
            offset,
            scale,
        }
    }

    pub fn apply(&self, x: &Array) -> Array {
        self.map_rows(x, |v, o, s| (v - o) / s)
    }

    pub fn invert(&self, x: &Array) -> Array {
        self.map_rows(x, |v, o, s| v * s + o)
    }

    fn map_rows(&self, x: &Array, f: impl Fn(f64, f64, f64) -> f64) -> Array {
        let d = self.offset.len();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = f(*v, self.offset[j], self.scale[j]);
        }
        out
    }
}

/// Feature matrix with optional ground-truth labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N x d`, already scaled.
    pub x: Array,
    pub labels: Option<Vec<usize>>,
    /// Maps scaled features back to data units.
    pub scaler: Scaler,
}

impl Dataset {
    pub fn new(x: Array, labels: Option<Vec<usize>>) -> Result<Self> {
        if x.rank() != 2 || x.rows() == 0 || x.cols() == 0 {
            return Err(Error::dim(format!("dataset needs a non-empty N x d matrix, got {:?}", x.shape())));
        }
        if !x.is_finite() {
            return Err(Error::Domain("dataset contains NaN or infinite values".into()));
        }
        if let Some(l) = &labels {
            if l.len() != x.rows() {
                return Err(Error::dim(format!("{} labels for {} rows", l.len(), x.rows())));
            }
        }
        let scaler = Scaler::identity(x.cols());
        Ok(Dataset { x, labels, scaler })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Number of distinct label values.
    pub fn num_classes(&self) -> Option<usize> {
        self.labels.as_ref().map(|l| {
            let mut v = l.clone();
            v.sort_unstable();
            v.dedup();
            v.len()
        })
    }

    /// Fits and applies a scaler. Applying to an already scaled dataset
    /// composes with the existing transform.
    pub fn scaled(mut self, kind: Scaling) -> Self {
        let s = Scaler::fit(kind, &self.x);
        self.x = s.apply(&self.x);
        self.scaler = compose_scalers(&self.scaler, &s);
        self
    }
}

/// `outer` applied after `inner`.
fn compose_scalers(inner: &Scaler, outer: &Scaler) -> Scaler {
    if inner.kind == Scaling::None && inner.offset.iter().all(|&o| o == 0.0) && inner.scale.iter().all(|&s| s == 1.0) {
        return outer.clone();
    }
    // (((x - o1) / s1) - o2) / s2 = (x - (o1 + s1 o2)) / (s1 s2)
    let offset = inner
        .offset
        .iter()
        .zip(&inner.scale)
        .zip(&outer.offset)
        .map(|((o1, s1), o2)| o1 + s1 * o2)
        .collect();
    let scale = inner.scale.iter().zip(&outer.scale).map(|(a, b)| a * b).collect();
    Scaler {
        kind: if outer.kind == Scaling::None { inner.kind } else { outer.kind },
        offset,
        scale,
    }
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvOptions {
    /// Last column is an integer class label.
    pub has_label: bool,
    pub delimiter: char,
    /// Skip the first line.
    pub has_header: bool,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions {
            has_label: true,
            delimiter: ',',
            has_header: false,
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(file, opts)
}

/// Parses rectangular numeric CSV. Row numbers in errors are 1-based and
/// count the header line.
pub fn parse_csv(reader: impl Read, opts: &CsvOptions) -> Result<Dataset> {
    if !opts.delimiter.is_ascii() {
        return Err(Error::Config(format!("delimiter {:?} is not ASCII", opts.delimiter)));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(opts.has_header)
        .delimiter(opts.delimiter as u8)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let first_row = if opts.has_header { 2 } else { 1 };
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for (i, rec) in rdr.records().enumerate() {
        let row = first_row + i;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        match width {
            None => width = Some(rec.len()),
            Some(w) if w != rec.len() => {
                return Err(Error::Parse {
                    row,
                    message: format!("expected {w} fields, found {}", rec.len()),
                })
            }
            _ => {}
        }
        let n_feat = if opts.has_label { rec.len().saturating_sub(1) } else { rec.len() };
        if n_feat == 0 {
            return Err(Error::Parse {
                row,
                message: "no feature columns".into(),
            });
        }
        for (j, cell) in rec.iter().take(n_feat).enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                message: format!("column {} is not a number: {cell:?}", j + 1),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    message: format!("column {} is not finite", j + 1),
                });
            }
            data.push(v);
        }
        if opts.has_label {
            let cell = &rec[n_feat];
            let label = cell
                .parse::<f64>()
                .ok()
                .filter(|v| *v >= 0.0 && v.fract() == 0.0 && *v < u32::MAX as f64)
                .ok_or_else(|| Error::Parse {
                    row,
                    message: format!("label {cell:?} is not a non-negative integer"),
                })?;
            labels.push(label as usize);
        }
    }
    let Some(width) = width else {
        return Err(Error::Parse {
            row: first_row,
            message: "no data rows".into(),
        });
    };
    let d = if opts.has_label { width - 1 } else { width };
    let n = data.len() / d;
    Dataset::new(Array::new(vec![n, d], data)?, opts.has_label.then_some(labels))
}

/// Writes features in data units (scaling undone) with an optional label
/// column, 17 significant digits.
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw = dataset.scaler.invert(&dataset.x);
    let mut out = String::new();
    let mut header: Vec<String> = (0..dataset.dim()).map(|j| format!("x{j}")).collect();
    if dataset.labels.is_some() {
        header.push("label".into());
    }
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..dataset.len() {
        let mut cells: Vec<String> = raw.row(i).iter().map(|v| format!("{v:.17e}")).collect();
        if let Some(l) = &dataset.labels {
            cells.push(l[i].to_string());
        }
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

fn be_u32(bytes: &[u8], at: usize, field: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(field, "file ends inside the header"))
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format("magic", format!("expected 0x{IDX_IMAGES_MAGIC:08x}, found 0x{magic:08x}")));
    }
    let n = be_u32(bytes, 4, "count")? as usize;
    let r = be_u32(bytes, 8, "rows")? as usize;
    let c = be_u32(bytes, 12, "cols")? as usize;
    let body = &bytes[16..];
    if body.len() != n * r * c {
        return Err(Error::format(
            "pixels",
            format!("header promises {} bytes, file has {}", n * r * c, body.len()),
        ));
    }
    Ok((n, r, c, body.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format("magic", format!("expected 0x{IDX_LABELS_MAGIC:08x}, found 0x{magic:08x}")));
    }
    let n = be_u32(bytes, 4, "count")? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::format("labels", format!("header promises {n} labels, file has {}", body.len())));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Builds a dataset from raw IDX bytes. Pixels map `[0, 255] -> [-1, 1]`;
/// with `downscale`, 2x2 mean pooling runs first (odd edges dropped).
pub fn idx_dataset(images: &[u8], labels: Option<&[u8]>, downscale: bool) -> Result<Dataset> {
    let (n, r, c, px) = parse_idx_images(images)?;
    let labels = labels.map(parse_idx_labels).transpose()?;
    if let Some(l) = &labels {
        if l.len() != n {
            return Err(Error::format(
                "count",
                format!("{n} images but {} labels", l.len()),
            ));
        }
    }
    let (rows, cols) = if downscale { (r / 2, c / 2) } else { (r, c) };
    let d = rows * cols;
    let mut data = Vec::with_capacity(n * d);
    for img in px.chunks(r * c) {
        for i in 0..rows {
            for j in 0..cols {
                let v = if downscale {
                    let at = |a: usize, b: usize| img[a * c + b] as f64;
                    (at(2 * i, 2 * j) + at(2 * i, 2 * j + 1) + at(2 * i + 1, 2 * j) + at(2 * i + 1, 2 * j + 1)) / 4.0
                } else {
                    img[i * c + j] as f64
                };
                data.push(v);
            }
        }
    }
    let raw = Dataset::new(Array::new(vec![n, d], data)?, labels)?;
    let scaler = Scaler {
        kind: Scaling::Minmax,
        offset: vec![127.5; d],
        scale: vec![127.5; d],
    };
    Ok(Dataset {
        x: scaler.apply(&raw.x),
        labels: raw.labels,
        scaler,
    })
}

pub fn load_idx(images: impl AsRef<Path>, labels: Option<&Path>, downscale: bool) -> Result<Dataset> {
    let images = images.as_ref();
    let img = fs::read(images).map_err(|e| Error::io(images, e))?;
    let lab = labels
        .map(|p| fs::read(p).map_err(|e| Error::io(p, e)))
        .transpose()?;
    idx_dataset(&img, lab.as_deref(), downscale)
}

// ---------------------------------------------------------------------------
// Synthetic Gaussian mixture
// ---------------------------------------------------------------------------

/// Cluster means at pairwise distance at least `min_dist`, placed
/// deterministically by rejection sampling in a growing box.
fn place_means(k: usize, d: usize, min_dist: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut half = min_dist * (k as f64).powf(1.0 / d as f64).max(1.0);
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut failures = 0;
    while means.len() < k {
        let cand: Vec<f64> = (0..d).map(|_| rng.random_range(-half..=half)).collect();
        let ok = means.iter().all(|m| {
            m.iter().zip(&cand).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= min_dist
        });
        if ok {
            means.push(cand);
        } else {
            failures += 1;
            if failures % 1000 == 0 {
                half *= 1.25;
            }
        }
    }
    means
}

/// A labelled mixture of `k` isotropic Gaussians in `d` dimensions with
/// `n_per_cluster` points each, in cluster order.
pub fn synth_gmm(k: usize, d: usize, n_per_cluster: usize, mean_scale: f64, cluster_std: f64, seed: u64) -> Result<Dataset> {
    if k == 0 || d == 0 || n_per_cluster == 0 {
        return Err(Error::Config(format!(
            "synthetic sizes must be positive (clusters {k}, dim {d}, points {n_per_cluster})"
        )));
    }
    if !(cluster_std > 0.0 && mean_scale >= 0.0) {
        return Err(Error::Config("cluster std must be positive and mean scale non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = place_means(k, d, mean_scale, &mut rng);
    let noise = Normal::new(0.0, cluster_std).expect("validated std");
    let mut data = Vec::with_capacity(k * n_per_cluster * d);
    let mut labels = Vec::with_capacity(k * n_per_cluster);
    for (c, m) in means.iter().enumerate() {
        for _ in 0..n_per_cluster {
            data.extend(m.iter().map(|mu| mu + noise.sample(&mut rng)));
            labels.push(c);
        }
    }
    Dataset::new(Array::new(vec![k * n_per_cluster, d], data)?, Some(labels))
}

/// The means `synth_gmm` uses for the same arguments.
pub fn synth_gmm_means(k: usize, d: usize, mean_scale: f64, seed: u64) -> Vec<Vec<f64>> {
    place_means(k, d, mean_scale, &mut ChaCha8Rng::seed_from_u64(seed))
}

// ---------------------------------------------------------------------------
// Minibatches
// ---------------------------------------------------------------------------

/// Epoch-wise shuffled minibatches without replacement. The trailing
/// `N mod B` rows of each epoch's permutation are dropped.
///
/// Each epoch's permutation is derived from `(seed, epoch)`, so the
/// sampler's whole state is `(epoch, cursor)`.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    cursor: usize,
    perm: Vec<usize>,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self> {
        Self::resume(n, batch, seed, 0, 0)
    }

    pub fn resume(n: usize, batch: usize, seed: u64, epoch: u64, cursor: usize) -> Result<Self> {
        if batch == 0 || batch > n {
            return Err(Error::Config(format!(
                "batch size {batch} must be between 1 and the dataset size {n}"
            )));
        }
        if cursor > n - n % batch || cursor % batch != 0 {
            return Err(Error::Config(format!("sampler cursor {cursor} is not a batch boundary")));
        }
        let mut s = BatchSampler {
            n,
            batch,
            seed,
            epoch,
            cursor,
            perm: Vec::new(),
        };
        s.perm = s.permutation(epoch);
        Ok(s)
    }

    fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut p: Vec<usize> = (0..self.n).collect();
        p.shuffle(&mut rng);
        p
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n / self.batch
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Row indices of the next batch.
    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.cursor + self.batch > self.n {
            self.epoch += 1;
            self.cursor = 0;
            self.perm = self.permutation(self.epoch);
        }
        let idx = self.perm[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        idx
    }

    /// The next batch of rows of `x`.
    pub fn next_batch(&mut self, x: &Array) -> Array {
        x.select_rows(&self.next_indices())
    }
}
