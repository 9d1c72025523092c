//! Contrast transfer from a source site to a target site.
//!
//! Two backends share one interface: histogram matching (per-contrast
//! monotone quantile maps fitted on brain-masked target voxels) and the
//! phantom oracle, which inverts the known source site model and applies the
//! target one. Histogram matching works on preprocessed records and is
//! followed by white-matter re-normalization; the oracle works in raw
//! intensity space and is followed by preprocessing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{oracle_harmonize, SiteTransform};
use crate::preprocess::{self, percentile_sorted, Contrast};
use crate::types::{SiteTag, SubjectRecord, Volume3D};

pub const DEFAULT_QUANTILES: usize = 64;
pub const MIN_QUANTILES: usize = 8;

/// Target intensities at evenly spaced quantile levels `k / (n − 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileLandmarks {
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Harmonizer {
    HistogramMatching {
        target_site: SiteTag,
        t1w: QuantileLandmarks,
        flair: QuantileLandmarks,
    },
    Oracle {
        source: SiteTransform,
        target: SiteTransform,
    },
}

fn masked_values(vol: &Volume3D, rec: &SubjectRecord) -> Vec<f64> {
    vol.data()
        .iter()
        .zip(rec.brain_mask.data())
        .filter(|(_, &m)| m != 0)
        .map(|(&v, _)| f64::from(v))
        .collect()
}

fn contrast_of(rec: &SubjectRecord, c: Contrast) -> &Volume3D {
    match c {
        Contrast::T1w => &rec.t1w,
        Contrast::Flair => &rec.flair,
    }
}

/// Quantile landmarks of the pooled brain-masked intensities.
pub fn quantile_profile(records: &[SubjectRecord], contrast: Contrast, n_quantiles: usize) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(Error::Harmonizer("empty subject pool".into()));
    }
    if n_quantiles < 2 {
        return Err(Error::Harmonizer("need at least 2 quantile levels".into()));
    }
    let mut vals: Vec<f64> = records
        .iter()
        .flat_map(|r| masked_values(contrast_of(r, contrast), r))
        .collect();
    if vals.is_empty() {
        return Err(Error::Harmonizer("no brain voxels in pool".into()));
    }
    vals.sort_by(f64::total_cmp);
    Ok((0..n_quantiles)
        .map(|k| percentile_sorted(&vals, k as f64 / (n_quantiles - 1) as f64))
        .collect())
}

/// Mean absolute difference between two quantile profiles.
pub fn profile_l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64
}

/// Fits per-contrast target landmarks on preprocessed target subjects.
/// `n_quantiles` below [`MIN_QUANTILES`] is rejected except for 2, the
/// min/max stretch.
pub fn fit_histogram_matcher(target_subjects: &[SubjectRecord], n_quantiles: usize) -> Result<Harmonizer> {
    if n_quantiles != 2 && n_quantiles < MIN_QUANTILES {
        return Err(Error::Harmonizer(format!(
            "n_quantiles must be >= {MIN_QUANTILES} (or 2), got {n_quantiles}"
        )));
    }
    let first = target_subjects
        .first()
        .ok_or_else(|| Error::Harmonizer("empty target pool".into()))?;
    let fit = |c: Contrast| -> Result<QuantileLandmarks> {
        let values = quantile_profile(target_subjects, c, n_quantiles)?;
        if values[n_quantiles - 1] <= values[0] {
            return Err(Error::Harmonizer(format!("{c:?} intensities are constant in the target pool")));
        }
        Ok(QuantileLandmarks { values })
    };
    Ok(Harmonizer::HistogramMatching {
        target_site: first.site.clone(),
        t1w: fit(Contrast::T1w)?,
        flair: fit(Contrast::Flair)?,
    })
}

/// Piecewise-linear map from source landmarks to target landmarks, clamped
/// to the end values. Ties in the source collapse to the first segment.
fn map_through(v: f64, src: &[f64], dst: &[f64]) -> f64 {
    let n = src.len();
    if v <= src[0] {
        return dst[0];
    }
    if v >= src[n - 1] {
        return dst[n - 1];
    }
    let k = src.partition_point(|&s| s <= v) - 1;
    let (x0, x1) = (src[k], src[k + 1]);
    if x1 <= x0 {
        return dst[k];
    }
    dst[k] + (v - x0) * (dst[k + 1] - dst[k]) / (x1 - x0)
}

fn match_volume(vol: &Volume3D, rec: &SubjectRecord, target: &QuantileLandmarks) -> Result<Volume3D> {
    let n = target.values.len();
    let mut vals = masked_values(vol, rec);
    vals.sort_by(f64::total_cmp);
    if vals.is_empty() {
        return Err(Error::Harmonizer(format!("{}: empty brain mask", rec.subject_id)));
    }
    let src: Vec<f64> = (0..n)
        .map(|k| percentile_sorted(&vals, k as f64 / (n - 1) as f64))
        .collect();
    let data = vol
        .data()
        .iter()
        .zip(rec.brain_mask.data())
        .map(|(&v, &m)| if m != 0 { map_through(f64::from(v), &src, &target.values) as f32 } else { v })
        .collect();
    vol.with_data(data)
}

impl Harmonizer {
    pub fn target_site(&self) -> &SiteTag {
        match self {
            Harmonizer::HistogramMatching { target_site, .. } => target_site,
            Harmonizer::Oracle { target, .. } => &target.site,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Harmonizer::HistogramMatching { .. } => "histogram-matching",
            Harmonizer::Oracle { .. } => "oracle",
        }
    }

    pub fn oracle(source: SiteTransform, target: SiteTransform) -> Self {
        Harmonizer::Oracle { source, target }
    }

    /// Maps intensities only. Histogram matching expects a preprocessed
    /// record; the oracle expects a raw one.
    pub fn harmonize_subject(&self, record: &SubjectRecord) -> Result<SubjectRecord> {
        match self {
            Harmonizer::HistogramMatching { target_site, t1w, flair } => {
                if !record.preprocessed {
                    return Err(Error::Harmonizer(format!(
                        "{}: histogram matching needs a preprocessed record",
                        record.subject_id
                    )));
                }
                Ok(SubjectRecord {
                    site: target_site.clone(),
                    t1w: match_volume(&record.t1w, record, t1w)?,
                    flair: match_volume(&record.flair, record, flair)?,
                    harmonized_by: Some(self.name().into()),
                    ..record.clone()
                })
            }
            Harmonizer::Oracle { source, target } => {
                if record.preprocessed {
                    return Err(Error::Harmonizer(format!(
                        "{}: the oracle maps raw intensities, got a preprocessed record",
                        record.subject_id
                    )));
                }
                oracle_harmonize(record, source, target)
            }
        }
    }

    /// Raw record in, preprocessed harmonized record out, in the order each
    /// backend needs.
    pub fn harmonize_raw(&self, raw: &SubjectRecord) -> Result<SubjectRecord> {
        match self {
            Harmonizer::HistogramMatching { .. } => {
                let pre = preprocess::preprocess_subject(raw)?;
                let matched = self.harmonize_subject(&pre)?;
                preprocess::preprocess_subject(&matched)
            }
            Harmonizer::Oracle { .. } => preprocess::preprocess_subject(&self.harmonize_subject(raw)?),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
