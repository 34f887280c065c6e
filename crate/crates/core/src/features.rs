//! Feature grouping of network parameters and learning-rate assignment.
//!
//! A feature is one unit together with all of its incoming weights and its
//! bias: a row of a dense weight matrix, a whole convolution filter, or a
//! BatchNorm channel's (gain, bias) pair. Every feature gets one learning rate.

use std::io::{BufRead, Write};
use std::ops::Range;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::nn::{Layer, Network};
use crate::rng::Rng;

/// A contiguous run of coordinates inside one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlice {
    /// Index into `Network::params()`.
    pub tensor: usize,
    pub range: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureGroup {
    pub layer: usize,
    pub feature_index: usize,
    pub slices: Vec<ParamSlice>,
}

impl FeatureGroup {
    pub fn size(&self) -> usize {
        self.slices.iter().map(|s| s.range.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FeaturePartition {
    pub groups: Vec<FeatureGroup>,
}

impl FeaturePartition {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn coordinate_count(&self) -> usize {
        self.groups.iter().map(FeatureGroup::size).sum()
    }

    /// One group spanning every coordinate of every tensor.
    pub fn single_group(params: &[&crate::Tensor]) -> Self {
        Self {
            groups: vec![FeatureGroup {
                layer: 0,
                feature_index: 0,
                slices: params
                    .iter()
                    .enumerate()
                    .map(|(tensor, p)| ParamSlice {
                        tensor,
                        range: 0..p.len(),
                    })
                    .collect(),
            }],
        }
    }
}

/// Learning rate per feature group, aligned with `FeaturePartition::groups`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LrAssignment {
    pub lrs: Vec<f64>,
}

impl LrAssignment {
    pub fn uniform(n: usize, lr: f64) -> Self {
        Self { lrs: vec![lr; n] }
    }

    pub fn len(&self) -> usize {
        self.lrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lrs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrInterval {
    eta_min: f64,
    eta_max: f64,
}

impl LrInterval {
    pub fn new(eta_min: f64, eta_max: f64) -> Result<Self> {
        if !(eta_min > 0.0 && eta_min.is_finite() && eta_max.is_finite() && eta_min <= eta_max) {
            return Err(Error::InvalidArgument(format!(
                "learning-rate interval needs 0 < eta_min <= eta_max, got ({eta_min}, {eta_max})"
            )));
        }
        Ok(Self { eta_min, eta_max })
    }

    pub fn degenerate(eta: f64) -> Result<Self> {
        Self::new(eta, eta)
    }

    pub fn eta_min(&self) -> f64 {
        self.eta_min
    }

    pub fn eta_max(&self) -> f64 {
        self.eta_max
    }

    pub fn contains(&self, eta: f64) -> bool {
        self.eta_min <= eta && eta <= self.eta_max
    }
}

/// Draw `eta` with `ln eta` uniform on `[ln eta_min, ln eta_max]`.
pub fn log_uniform_sample(rng: &mut Rng, interval: &LrInterval) -> f64 {
    if interval.eta_min == interval.eta_max {
        return interval.eta_min;
    }
    let (lo, hi) = (interval.eta_min.ln(), interval.eta_max.ln());
    let u: f64 = rng.random();
    (lo + u * (hi - lo))
        .exp()
        .clamp(interval.eta_min, interval.eta_max)
}

pub fn partition_features(net: &Network) -> Result<FeaturePartition> {
    let mut groups = Vec::new();
    let mut tensor = 0;
    for (li, layer) in net.layers().iter().enumerate() {
        match layer {
            Layer::Dense(d) => {
                let inp = d.in_units();
                for o in 0..d.out_units() {
                    groups.push(FeatureGroup {
                        layer: li,
                        feature_index: o,
                        slices: vec![
                            ParamSlice {
                                tensor,
                                range: o * inp..(o + 1) * inp,
                            },
                            ParamSlice {
                                tensor: tensor + 1,
                                range: o..o + 1,
                            },
                        ],
                    });
                }
            }
            Layer::Conv2d(c) => {
                let s = c.weight.shape();
                let per_filter = s[1] * s[2] * s[3];
                for o in 0..s[0] {
                    groups.push(FeatureGroup {
                        layer: li,
                        feature_index: o,
                        slices: vec![
                            ParamSlice {
                                tensor,
                                range: o * per_filter..(o + 1) * per_filter,
                            },
                            ParamSlice {
                                tensor: tensor + 1,
                                range: o..o + 1,
                            },
                        ],
                    });
                }
            }
            Layer::BatchNorm1d(b) => {
                for j in 0..b.features() {
                    groups.push(FeatureGroup {
                        layer: li,
                        feature_index: j,
                        slices: vec![
                            ParamSlice {
                                tensor,
                                range: j..j + 1,
                            },
                            ParamSlice {
                                tensor: tensor + 1,
                                range: j..j + 1,
                            },
                        ],
                    });
                }
            }
            Layer::Activation(_) => {}
        }
        let n_params = layer.params().len();
        if !matches!(layer, Layer::Activation(_)) && n_params != 2 {
            return Err(Error::UnsupportedLayer {
                layer: li,
                kind: layer.kind().to_string(),
            });
        }
        tensor += n_params;
    }
    Ok(FeaturePartition { groups })
}

/// One independent log-uniform draw per feature group.
pub fn sample_feature_lrs(
    partition: &FeaturePartition,
    interval: &LrInterval,
    rng: &mut Rng,
) -> LrAssignment {
    LrAssignment {
        lrs: partition
            .groups
            .iter()
            .map(|_| log_uniform_sample(rng, interval))
            .collect(),
    }
}

/// Deterministic log-uniform grid over the interval, endpoints included.
/// A single classifier gets the geometric mean of the interval.
pub fn classifier_lr_grid(n_cl: usize, interval: &LrInterval) -> Result<Vec<f64>> {
    match n_cl {
        0 => Err(Error::InvalidArgument(
            "need at least one classifier".into(),
        )),
        1 if interval.eta_min == interval.eta_max => Ok(vec![interval.eta_min]),
        1 => Ok(vec![(interval.eta_min * interval.eta_max).sqrt()]),
        _ => {
            let lo = interval.eta_min.ln();
            let span = (interval.eta_max / interval.eta_min).ln();
            Ok((0..n_cl)
                .map(|j| {
                    if j == 0 {
                        interval.eta_min
                    } else if j == n_cl - 1 {
                        interval.eta_max
                    } else {
                        (lo + j as f64 / (n_cl - 1) as f64 * span).exp()
                    }
                })
                .collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrRow {
    pub group_id: usize,
    pub layer: usize,
    pub feature_index: usize,
    pub lr: f64,
}

pub const LRS_HEADER: &str = "group_id,layer,feature_index,lr";

pub fn write_lrs_csv<W: Write>(
    out: &mut W,
    partition: &FeaturePartition,
    assignment: &LrAssignment,
) -> Result<()> {
    if partition.len() != assignment.len() {
        return Err(Error::Shape(format!(
            "{} groups but {} learning rates",
            partition.len(),
            assignment.len()
        )));
    }
    let rows: Vec<LrRow> = partition
        .groups
        .iter()
        .zip(&assignment.lrs)
        .enumerate()
        .map(|(group_id, (g, &lr))| LrRow {
            group_id,
            layer: g.layer,
            feature_index: g.feature_index,
            lr,
        })
        .collect();
    write_lr_rows(out, &rows)
}

pub fn write_lr_rows<W: Write>(out: &mut W, rows: &[LrRow]) -> Result<()> {
    writeln!(out, "{LRS_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:?}",
            r.group_id, r.layer, r.feature_index, r.lr
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_lrs_csv<R: BufRead>(input: R) -> Result<Vec<LrRow>> {
    let mut rows = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim() != LRS_HEADER {
                return Err(Error::Csv(format!("unexpected lrs header `{line}`")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::Csv(format!("line {}: expected 4 fields", i + 1)));
        }
        let bad = |what: &str| Error::Csv(format!("line {}: bad {what}", i + 1));
        rows.push(LrRow {
            group_id: f[0].parse().map_err(|_| bad("group_id"))?,
            layer: f[1].parse().map_err(|_| bad("layer"))?,
            feature_index: f[2].parse().map_err(|_| bad("feature_index"))?,
            lr: f[3].parse().map_err(|_| bad("lr"))?,
        });
    }
    Ok(rows)
}

/// Rebuild an assignment for `partition` from parsed rows.
pub fn assignment_from_rows(partition: &FeaturePartition, rows: &[LrRow]) -> Result<LrAssignment> {
    if rows.len() != partition.len() {
        return Err(Error::Shape(format!(
            "{} rows for {} groups",
            rows.len(),
            partition.len()
        )));
    }
    let mut lrs = vec![f64::NAN; partition.len()];
    for r in rows {
        let g = partition
            .groups
            .get(r.group_id)
            .ok_or_else(|| Error::Csv(format!("group_id {} out of range", r.group_id)))?;
        if g.layer != r.layer || g.feature_index != r.feature_index {
            return Err(Error::Csv(format!(
                "group {} is layer {} feature {}, row says layer {} feature {}",
                r.group_id, g.layer, g.feature_index, r.layer, r.feature_index
            )));
        }
        lrs[r.group_id] = r.lr;
    }
    Ok(LrAssignment { lrs })
}
