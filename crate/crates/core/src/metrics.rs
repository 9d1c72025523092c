//! Evaluation suite: Dice, lesion-wise F1 over connected components, lesion
//! volume and the cohort-level Pearson correlation of lesion volumes.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{flat_index, Dims, LabelMask};

/// 3D neighbourhood used for lesion components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Connectivity {
    #[serde(rename = "6")]
    Six,
    #[default]
    #[serde(rename = "18")]
    Eighteen,
    #[serde(rename = "26")]
    TwentySix,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Result<Self> {
        match n {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            _ => Err(Error::Invalid(format!("connectivity must be 6, 18 or 26, got {n}"))),
        }
    }

    pub fn count(self) -> u32 {
        match self {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }

    /// Neighbour offsets: non-zero offsets in {-1,0,1}³ with at most
    /// 1 / 2 / 3 non-zero coordinates.
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let max_nonzero = match self {
            Connectivity::Six => 1,
            Connectivity::Eighteen => 2,
            Connectivity::TwentySix => 3,
        };
        let mut out = Vec::with_capacity(26);
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let nz = [dx, dy, dz].iter().filter(|&&d| d != 0).count();
                    if nz >= 1 && nz <= max_nonzero {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// Metric knobs: component connectivity and the overlap needed to call a
/// lesion detected.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricOptions {
    pub connectivity: Connectivity,
    pub min_overlap: usize,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            connectivity: Connectivity::Eighteen,
            min_overlap: 1,
        }
    }
}

fn check_pair(a: &LabelMask, b: &LabelMask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `2|A∩B| / (|A|+|B|)`; 1.0 when both masks are empty.
pub fn dice(pred: &LabelMask, gt: &LabelMask) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(dice_raw(pred.data(), gt.data()))
}

pub(crate) fn dice_raw(a: &[u8], b: &[u8]) -> f64 {
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x != 0, y != 0);
        na += usize::from(x);
        nb += usize::from(y);
        inter += usize::from(x && y);
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// Labeled connected components, ids contiguous from 1 in scan order.
#[derive(Clone, Debug, PartialEq)]
pub struct LesionComponents {
    pub dims: Dims,
    pub labels: Vec<u32>,
    /// `sizes[k]` is the voxel count of component `k + 1`.
    pub sizes: Vec<usize>,
    pub connectivity: Connectivity,
}

impl LesionComponents {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

pub fn connected_components(mask: &LabelMask, connectivity: Connectivity) -> LesionComponents {
    label_components(mask.dims(), mask.data(), connectivity)
}

pub(crate) fn label_components(dims: Dims, data: &[u8], connectivity: Connectivity) -> LesionComponents {
    let offsets = connectivity.offsets();
    let mut labels = vec![0u32; data.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let start = flat_index(dims, x, y, z);
                if data[start] == 0 || labels[start] != 0 {
                    continue;
                }
                let id = sizes.len() as u32 + 1;
                labels[start] = id;
                let mut size = 0usize;
                queue.push_back([x, y, z]);
                while let Some(p) = queue.pop_front() {
                    size += 1;
                    for o in &offsets {
                        let q = [
                            p[0] as isize + o[0],
                            p[1] as isize + o[1],
                            p[2] as isize + o[2],
                        ];
                        if (0..3).any(|i| q[i] < 0 || q[i] >= dims[i] as isize) {
                            continue;
                        }
                        let q = [q[0] as usize, q[1] as usize, q[2] as usize];
                        let qi = flat_index(dims, q[0], q[1], q[2]);
                        if data[qi] != 0 && labels[qi] == 0 {
                            labels[qi] = id;
                            queue.push_back(q);
                        }
                    }
                }
                sizes.push(size);
            }
        }
    }
    LesionComponents {
        dims,
        labels,
        sizes,
        connectivity,
    }
}

/// Lesion-level detection scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Number of components of `comps` overlapping `other` in at least
/// `min_overlap` voxels.
fn overlapping(comps: &LesionComponents, other: &[u8], min_overlap: usize) -> usize {
    let mut hits = vec![0usize; comps.count()];
    for (&l, &o) in comps.labels.iter().zip(other) {
        if l != 0 && o != 0 {
            hits[l as usize - 1] += 1;
        }
    }
    hits.iter().filter(|&&h| h >= min_overlap.max(1)).count()
}

/// Lesion-wise precision / recall / F1.
///
/// A ground-truth lesion is detected when it overlaps the predicted
/// foreground in at least `min_overlap` voxels; a predicted component is a
/// true positive when it touches ground truth at all. Many-to-one
/// matches are allowed in both directions. With no predictions precision is
/// 1; with no ground-truth lesions recall is 1.
pub fn lesion_f1(pred: &LabelMask, gt: &LabelMask, opts: MetricOptions) -> Result<LesionF1> {
    check_pair(pred, gt)?;
    Ok(lesion_f1_raw(pred.dims(), pred.data(), gt.data(), opts))
}

pub(crate) fn lesion_f1_raw(dims: Dims, pred: &[u8], gt: &[u8], opts: MetricOptions) -> LesionF1 {
    let pc = label_components(dims, pred, opts.connectivity);
    let gc = label_components(dims, gt, opts.connectivity);
    let precision = if pc.count() == 0 {
        1.0
    } else {
        overlapping(&pc, gt, 1) as f64 / pc.count() as f64
    };
    let recall = if gc.count() == 0 {
        1.0
    } else {
        overlapping(&gc, pred, opts.min_overlap) as f64 / gc.count() as f64
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    // empty prediction against non-empty truth: (1, 0, 0)
    LesionF1 {
        precision,
        recall,
        f1,
    }
}

/// Foreground volume in mm³.
pub fn lesion_volume(mask: &LabelMask) -> f64 {
    let s = mask.spacing();
    mask.count() as f64 * f64::from(s[0]) * f64::from(s[1]) * f64::from(s[2])
}

/// Sample Pearson correlation between paired volume lists.
pub fn volume_correlation(gt_volumes: &[f64], pred_volumes: &[f64]) -> Result<f64> {
    if gt_volumes.len() != pred_volumes.len() {
        return Err(Error::UndefinedCorrelation(format!(
            "length mismatch {} vs {}",
            gt_volumes.len(),
            pred_volumes.len()
        )));
    }
    let n = gt_volumes.len();
    if n < 3 {
        return Err(Error::UndefinedCorrelation(format!("need at least 3 pairs, got {n}")));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (mx, my) = (mean(gt_volumes), mean(pred_volumes));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in gt_volumes.iter().zip(pred_volumes) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Per-subject evaluation row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub subject_id: String,
    pub epoch: usize,
    pub dsc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub gt_volume: f64,
    pub pred_volume: f64,
}

pub fn evaluate_subject(
    subject_id: &str,
    epoch: usize,
    pred: &LabelMask,
    gt: &LabelMask,
    opts: MetricOptions,
) -> Result<SubjectMetrics> {
    let dsc = dice(pred, gt)?;
    let lf = lesion_f1(pred, gt, opts)?;
    Ok(SubjectMetrics {
        subject_id: subject_id.to_string(),
        epoch,
        dsc,
        precision: lf.precision,
        recall: lf.recall,
        f1: lf.f1,
        gt_volume: lesion_volume(gt),
        pred_volume: lesion_volume(pred),
    })
}

/// Per-subject rows for one evaluation roster at one epoch, plus the
/// cohort-level volume correlation (absent when undefined).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub epoch: usize,
    pub rows: Vec<SubjectMetrics>,
    pub vc: Option<f64>,
}

impl MetricReport {
    pub fn from_rows(epoch: usize, rows: Vec<SubjectMetrics>) -> Self {
        let gt: Vec<f64> = rows.iter().map(|r| r.gt_volume).collect();
        let pr: Vec<f64> = rows.iter().map(|r| r.pred_volume).collect();
        let vc = volume_correlation(&gt, &pr).ok();
        MetricReport { epoch, rows, vc }
    }

    pub fn mean_dsc(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.dsc))
    }

    pub fn mean_f1(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.f1))
    }
}

pub(crate) fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}
