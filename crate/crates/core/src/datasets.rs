//! Desk-scale data: Gaussian blobs, IDX image files, channel normalization,
//! splits and minibatch order.

use std::fs;
use std::io::{Cursor, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, Rng};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub name: String,
    pub num_classes: usize,
    /// Shape of one example, e.g. `[d]` or `[channels, rows, cols]`.
    pub input_shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub xs: Tensor,
    pub ys: Vec<usize>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(xs: Tensor, ys: Vec<usize>, meta: DatasetMeta) -> Result<Self> {
        let mut want = vec![ys.len()];
        want.extend_from_slice(&meta.input_shape);
        if xs.shape() != want.as_slice() {
            return Err(Error::Shape(format!(
                "dataset tensor {:?} does not match {} examples of {:?}",
                xs.shape(),
                ys.len(),
                meta.input_shape
            )));
        }
        if let Some(&y) = ys.iter().find(|&&y| y >= meta.num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {} classes",
                meta.num_classes
            )));
        }
        Ok(Dataset { xs, ys, meta })
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn example_len(&self) -> usize {
        self.meta.input_shape.iter().product()
    }

    /// Examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            xs: self.xs.select_rows(indices),
            ys: indices.iter().map(|&i| self.ys[i]).collect(),
            meta: self.meta.clone(),
        }
    }

    /// Inputs and labels of one minibatch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.subset(indices);
        (d.xs, d.ys)
    }

    /// Per-class example counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.meta.num_classes];
        for &y in &self.ys {
            c[y] += 1;
        }
        c
    }

    /// CSV with columns `f0..f{d-1},label`, one row per example.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let d = self.example_len();
        let mut header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        w.write_record(&header)
            .map_err(|e| Error::Csv(e.to_string()))?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.xs.row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(self.ys[i].to_string());
            w.write_record(&rec)
                .map_err(|e| Error::Csv(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Isotropic Gaussian clusters around random unit-norm centers.
///
/// Examples are ordered by class; `split` shuffles.
pub fn gen_blobs(
    k: usize,
    d: usize,
    n_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if k < 2 || d < 1 {
        return Err(Error::InvalidArgument(format!(
            "blobs need K >= 2 and d >= 1, got K={k}, d={d}"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "spread must be finite and >= 0, got {spread}"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let centers: Vec<Vec<f64>> = (0..k)
        .map(|_| loop {
            let c: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break c.into_iter().map(|v| v / norm).collect();
            }
        })
        .collect();
    let mut xs = Vec::with_capacity(k * n_per_class * d);
    let mut ys = Vec::with_capacity(k * n_per_class);
    for (class, c) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            for &m in c {
                let e: f64 = StandardNormal.sample(&mut rng);
                xs.push(m + spread * e);
            }
            ys.push(class);
        }
    }
    Dataset::new(
        Tensor::new(vec![k * n_per_class, d], xs)?,
        ys,
        DatasetMeta {
            name: "blobs".into(),
            num_classes: k,
            input_shape: vec![d],
        },
    )
}

fn idx_err(path: &Path, offset: u64, detail: impl Into<String>) -> Error {
    Error::Idx {
        path: path.to_path_buf(),
        offset,
        detail: detail.into(),
    }
}

fn read_u32_at(cur: &mut Cursor<&[u8]>, path: &Path) -> Result<u32> {
    let at = cur.position();
    cur.read_u32::<BigEndian>()
        .map_err(|_| idx_err(path, at, "truncated header"))
}

/// Parse an IDX image file and its label file.
///
/// Images come back as `(count, 1, rows, cols)` with pixels scaled to [0, 1];
/// the class count is `max label + 1`, at least 10.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let ip = images_path.as_ref();
    let lp = labels_path.as_ref();
    let ibytes = fs::read(ip)?;
    let lbytes = fs::read(lp)?;

    let mut cur = Cursor::new(ibytes.as_slice());
    let magic = read_u32_at(&mut cur, ip)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(idx_err(ip, 0, format!("bad image magic {magic:#010x}")));
    }
    let count = read_u32_at(&mut cur, ip)? as usize;
    let rows = read_u32_at(&mut cur, ip)? as usize;
    let cols = read_u32_at(&mut cur, ip)? as usize;
    let header = cur.position() as usize;
    let want = count * rows * cols;
    if ibytes.len() - header != want {
        return Err(idx_err(
            ip,
            header as u64,
            format!(
                "{count}x{rows}x{cols} header needs {want} pixel bytes, file has {}",
                ibytes.len() - header
            ),
        ));
    }

    let mut cur = Cursor::new(lbytes.as_slice());
    let magic = read_u32_at(&mut cur, lp)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(idx_err(lp, 0, format!("bad label magic {magic:#010x}")));
    }
    let n_labels = read_u32_at(&mut cur, lp)? as usize;
    if n_labels != count {
        return Err(idx_err(
            lp,
            4,
            format!("{n_labels} labels for {count} images"),
        ));
    }
    let lheader = cur.position() as usize;
    if lbytes.len() - lheader != count {
        return Err(idx_err(
            lp,
            lheader as u64,
            format!(
                "expected {count} label bytes, file has {}",
                lbytes.len() - lheader
            ),
        ));
    }

    let xs: Vec<f64> = ibytes[header..]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let ys: Vec<usize> = lbytes[lheader..].iter().map(|&b| usize::from(b)).collect();
    let num_classes = ys.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(
        Tensor::new(vec![count, 1, rows, cols], xs)?,
        ys,
        DatasetMeta {
            name: ip
                .file_name()
                .map_or_else(|| "idx".into(), |s| s.to_string_lossy().into_owned()),
            num_classes,
            input_shape: vec![1, rows, cols],
        },
    )
}

/// 2x2 average pooling of image data `(n, c, h, w)`; odd trailing rows or
/// columns are dropped.
pub fn downsample2(ds: &Dataset) -> Result<Dataset> {
    let &[c, h, w] = ds.meta.input_shape.as_slice() else {
        return Err(Error::Shape(format!(
            "downsampling needs (channels, rows, cols) examples, got {:?}",
            ds.meta.input_shape
        )));
    };
    let (h2, w2) = (h / 2, w / 2);
    let n = ds.len();
    let src = ds.xs.data();
    let mut out = Vec::with_capacity(n * c * h2 * w2);
    for i in 0..n {
        for ch in 0..c {
            let plane = &src[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
            for r in 0..h2 {
                for q in 0..w2 {
                    let s = plane[2 * r * w + 2 * q]
                        + plane[2 * r * w + 2 * q + 1]
                        + plane[(2 * r + 1) * w + 2 * q]
                        + plane[(2 * r + 1) * w + 2 * q + 1];
                    out.push(s / 4.0);
                }
            }
        }
    }
    let mut meta = ds.meta.clone();
    meta.input_shape = vec![c, h2, w2];
    Dataset::new(Tensor::new(vec![n, c, h2, w2], out)?, ds.ys.clone(), meta)
}

/// Per-channel affine standardization fitted on one split.
///
/// The channel axis is the first axis of an example; for flat vectors every
/// coordinate is its own channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

fn channel_layout(input_shape: &[usize]) -> (usize, usize) {
    match input_shape {
        [d] => (*d, 1),
        [c, rest @ ..] => (*c, rest.iter().product()),
        [] => (1, 1),
    }
}

impl ChannelNorm {
    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        let (channels, inner) = channel_layout(&ds.meta.input_shape);
        if channels != self.mean.len() {
            return Err(Error::Shape(format!(
                "normalizer fitted on {} channels applied to {channels}",
                self.mean.len()
            )));
        }
        let mut out = ds.clone();
        for (j, v) in out.xs.data_mut().iter_mut().enumerate() {
            let ch = (j / inner) % channels;
            *v = (*v - self.mean[ch]) / self.std[ch];
        }
        Ok(out)
    }
}

/// Fit channel statistics on `train` and return the transform with the
/// normalized training split. Zero-variance channels get a unit scale.
pub fn normalize_channels(train: &Dataset) -> Result<(ChannelNorm, Dataset)> {
    if train.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot normalize an empty split".into(),
        ));
    }
    let (channels, inner) = channel_layout(&train.meta.input_shape);
    let count = (train.len() * inner) as f64;
    let mut mean = vec![0.0; channels];
    for (j, v) in train.xs.data().iter().enumerate() {
        mean[(j / inner) % channels] += v;
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; channels];
    for (j, v) in train.xs.data().iter().enumerate() {
        let ch = (j / inner) % channels;
        var[ch] += (v - mean[ch]).powi(2);
    }
    let std = var
        .iter()
        .enumerate()
        .map(|(ch, v)| {
            let s = (v / count).sqrt();
            if s > 0.0 {
                s
            } else {
                log::warn!("channel {ch} has zero variance; leaving it unscaled");
                1.0
            }
        })
        .collect();
    let norm = ChannelNorm { mean, std };
    let out = norm.apply(train)?;
    Ok((norm, out))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Seeded shuffle of `0..n`, then contiguous train/val/test cuts.
pub fn split(n: usize, fractions: [f64; 3], seed: u64) -> Result<SplitSpec> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::InvalidArgument(format!(
            "split fractions must be in [0, 1] and sum to 1, got {fractions:?}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(SplitSpec {
        train: idx,
        val,
        test,
        seed,
    })
}

/// Minibatch index lists for one epoch over `n` examples.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}
