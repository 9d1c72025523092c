//! Brain masking and white-matter peak intensity normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{validate_subject, LabelMask, SubjectRecord, Volume3D};

pub const MIN_FOREGROUND_VOXELS: usize = 1000;
pub const HISTOGRAM_BINS: usize = 256;
pub const SMOOTHING_WIDTH: usize = 5;
/// Normalized white matter sits at this intensity.
pub const WM_TARGET: f32 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Contrast {
    T1w,
    Flair,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub wm_peak: f32,
    pub scale: f32,
    pub target_value: f32,
}

impl NormalizationStats {
    pub fn new(wm_peak: f32, target_value: f32) -> Result<Self> {
        if !(wm_peak > 0.0) || !wm_peak.is_finite() {
            return Err(Error::Degenerate(format!("white-matter peak {wm_peak} is not positive")));
        }
        Ok(NormalizationStats {
            wm_peak,
            scale: target_value / wm_peak,
            target_value,
        })
    }
}

/// Zeroes voxels outside `mask`.
pub fn apply_brain_mask(vol: &Volume3D, mask: &LabelMask) -> Result<Volume3D> {
    if vol.dims() != mask.dims() {
        return Err(Error::Shape(format!(
            "volume {:?} vs mask {:?}",
            vol.dims(),
            mask.dims()
        )));
    }
    vol.with_data(
        vol.data()
            .iter()
            .zip(mask.data())
            .map(|(&v, &m)| if m != 0 { v } else { 0.0 })
            .collect(),
    )
}

pub(crate) fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    sorted[lo] * (1.0 - t) + sorted[hi] * t
}

/// Centered moving average; the window shrinks at the edges.
pub(crate) fn moving_average(h: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    (0..h.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(h.len());
            h[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Estimates the white-matter intensity mode over `mask`.
///
/// 256-bin histogram between the 1st and 99th percentile of the masked
/// intensities, smoothed with a 5-bin moving average. On T1w the search is
/// restricted to bins above the masked median (white matter is the bright
/// tissue); FLAIR uses the global mode.
pub fn estimate_wm_peak(vol: &Volume3D, mask: &LabelMask, contrast: Contrast) -> Result<NormalizationStats> {
    if vol.dims() != mask.dims() {
        return Err(Error::Shape(format!(
            "volume {:?} vs mask {:?}",
            vol.dims(),
            mask.dims()
        )));
    }
    let mut vals: Vec<f64> = vol
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(_, &m)| m != 0)
        .map(|(&v, _)| f64::from(v))
        .collect();
    if vals.len() < MIN_FOREGROUND_VOXELS {
        return Err(Error::TooFewVoxels {
            found: vals.len(),
            required: MIN_FOREGROUND_VOXELS,
        });
    }
    vals.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&vals, 0.01);
    let hi = percentile_sorted(&vals, 0.99);
    if !(hi > lo) {
        return Err(Error::Degenerate(format!(
            "1st and 99th percentiles coincide at {lo}"
        )));
    }
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let mut hist = vec![0.0f64; HISTOGRAM_BINS];
    for &v in &vals {
        if v < lo || v > hi {
            continue;
        }
        let b = (((v - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
        hist[b] += 1.0;
    }
    let smooth = moving_average(&hist, SMOOTHING_WIDTH);
    let center = |b: usize| lo + (b as f64 + 0.5) * width;
    let floor = match contrast {
        Contrast::T1w => percentile_sorted(&vals, 0.5),
        Contrast::Flair => f64::NEG_INFINITY,
    };
    let mut best: Option<(usize, f64)> = None;
    for (b, &c) in smooth.iter().enumerate() {
        if center(b) <= floor {
            continue;
        }
        if best.map_or(true, |(_, bc)| c > bc) {
            best = Some((b, c));
        }
    }
    let (b, _) = best.ok_or_else(|| Error::Degenerate("no histogram bin above the median".into()))?;
    NormalizationStats::new(center(b) as f32, WM_TARGET)
}

/// Multiplies every voxel by `target_value / wm_peak`.
pub fn normalize_wm(vol: &Volume3D, stats: &NormalizationStats) -> Result<Volume3D> {
    if !(stats.wm_peak > 0.0) {
        return Err(Error::Invalid(format!("wm_peak {} must be positive", stats.wm_peak)));
    }
    let scale = stats.target_value / stats.wm_peak;
    vol.map(|v| v * scale)
}

/// Masks and WM-normalizes both contrasts, each with its own statistics.
pub fn preprocess_subject(record: &SubjectRecord) -> Result<SubjectRecord> {
    let mut out = record.clone();
    for (vol, contrast) in [(&mut out.t1w, Contrast::T1w), (&mut out.flair, Contrast::Flair)] {
        let masked = apply_brain_mask(vol, &record.brain_mask)?;
        let stats = estimate_wm_peak(&masked, &record.brain_mask, contrast).map_err(|e| {
            Error::Subject {
                subject: record.subject_id.clone(),
                field: match contrast {
                    Contrast::T1w => "t1w",
                    Contrast::Flair => "flair",
                },
                reason: e.to_string(),
            }
        })?;
        *vol = normalize_wm(&masked, &stats)?;
    }
    out.preprocessed = true;
    validate_subject(out)
}
