//! Domain data model: volumes, masks, subjects, sites and patches.
//!
//! Voxel storage is x-fastest (`x + nx * (y + ny * z)`), matching the
//! NIfTI-1 on-disk order. The network sees a volume as `(D, H, W) =
//! (nz, ny, nx)`, so the flat buffer can be handed over without copying.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Dims = [usize; 3];
pub type Affine = [[f32; 4]; 4];

pub const IDENTITY_AFFINE: Affine = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

/// Index of voxel (x, y, z) in an x-fastest buffer.
#[inline]
pub fn flat_index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

fn check_geometry(dims: Dims, spacing: [f32; 3]) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Invalid(format!("all dimensions must be >= 1, got {dims:?}")));
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::Invalid(format!("spacing must be positive, got {spacing:?}")));
    }
    Ok(())
}

/// A 3D scalar image with voxel spacing (mm) and a voxel-to-world affine.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    dims: Dims,
    spacing: [f32; 3],
    affine: Affine,
    data: Vec<f32>,
}

impl Volume3D {
    pub fn new(dims: Dims, data: Vec<f32>, spacing: [f32; 3], affine: Affine) -> Result<Self> {
        check_geometry(dims, spacing)?;
        if data.len() != voxel_count(dims) {
            return Err(Error::Shape(format!(
                "volume {dims:?} needs {} voxels, got {}",
                voxel_count(dims),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite intensity at voxel {i}")));
        }
        Ok(Volume3D {
            dims,
            spacing,
            affine,
            data,
        })
    }

    /// Isotropic 1 mm volume with identity affine.
    pub fn from_data(dims: Dims, data: Vec<f32>) -> Result<Self> {
        Self::new(dims, data, [1.0; 3], IDENTITY_AFFINE)
    }

    pub fn zeros(dims: Dims) -> Self {
        Volume3D {
            dims,
            spacing: [1.0; 3],
            affine: IDENTITY_AFFINE,
            data: vec![0.0; voxel_count(dims)],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[flat_index(self.dims, x, y, z)]
    }

    /// Same geometry, new voxel values. Non-finite results are rejected.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Volume3D::new(self.dims, data, self.spacing, self.affine)
    }

    /// Applies `f` voxelwise, keeping geometry.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn same_grid(&self, dims: Dims, affine: &Affine) -> bool {
        self.dims == dims && &self.affine == affine
    }
}

/// Binary mask with the geometry of its paired volume; values are exactly {0, 1}.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMask {
    dims: Dims,
    spacing: [f32; 3],
    affine: Affine,
    data: Vec<u8>,
}

impl LabelMask {
    pub fn new(dims: Dims, data: Vec<u8>, spacing: [f32; 3], affine: Affine) -> Result<Self> {
        check_geometry(dims, spacing)?;
        if data.len() != voxel_count(dims) {
            return Err(Error::Shape(format!(
                "mask {dims:?} needs {} voxels, got {}",
                voxel_count(dims),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::Invalid(format!(
                "mask value {} at voxel {i} is not binary",
                data[i]
            )));
        }
        Ok(LabelMask {
            dims,
            spacing,
            affine,
            data,
        })
    }

    pub fn from_data(dims: Dims, data: Vec<u8>) -> Result<Self> {
        Self::new(dims, data, [1.0; 3], IDENTITY_AFFINE)
    }

    /// Any nonzero value becomes 1.
    pub fn binarize(dims: Dims, raw: &[u8], spacing: [f32; 3], affine: Affine) -> Result<Self> {
        Self::new(dims, raw.iter().map(|&v| u8::from(v != 0)).collect(), spacing, affine)
    }

    pub fn zeros_like(vol: &Volume3D) -> Self {
        LabelMask {
            dims: vol.dims,
            spacing: vol.spacing,
            affine: vol.affine,
            data: vec![0; voxel_count(vol.dims)],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[flat_index(self.dims, x, y, z)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn with_data(&self, data: Vec<u8>) -> Result<Self> {
        LabelMask::new(self.dims, data, self.spacing, self.affine)
    }
}

/// Acquisition site identifier.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SiteTag(String);

impl SiteTag {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(Error::Invalid("site tag must be non-empty".into()));
        }
        Ok(SiteTag(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for SiteTag {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        SiteTag::new(s)
    }
}

impl From<SiteTag> for String {
    fn from(s: SiteTag) -> String {
        s.0
    }
}

impl std::fmt::Display for SiteTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Separator between the person part and the timepoint part of a subject id
/// (`"p03_tp2"` belongs to person `"p03"`).
pub const TIMEPOINT_SEPARATOR: &str = "_tp";

/// One subject's co-registered T1w + FLAIR scan with masks.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub site: SiteTag,
    pub t1w: Volume3D,
    pub flair: Volume3D,
    pub brain_mask: LabelMask,
    pub lesion_mask: Option<LabelMask>,
    pub preprocessed: bool,
    /// Name of the contrast transfer that produced this record, if any.
    pub harmonized_by: Option<String>,
}

impl SubjectRecord {
    pub fn dims(&self) -> Dims {
        self.t1w.dims()
    }

    pub fn person_id(&self) -> &str {
        person_id(&self.subject_id)
    }

    pub fn is_labeled(&self) -> bool {
        self.lesion_mask.is_some()
    }
}

pub fn person_id(subject_id: &str) -> &str {
    subject_id
        .split_once(TIMEPOINT_SEPARATOR)
        .map_or(subject_id, |(p, _)| p)
}

/// Checks every [`SubjectRecord`] invariant and hands the record back.
pub fn validate_subject(record: SubjectRecord) -> Result<SubjectRecord> {
    let fail = |field: &'static str, reason: String| Error::Subject {
        subject: record.subject_id.clone(),
        field,
        reason,
    };
    if record.subject_id.is_empty() {
        return Err(fail("subject_id", "empty identifier".into()));
    }
    let dims = record.t1w.dims();
    let affine = *record.t1w.affine();
    if !record.flair.same_grid(dims, &affine) {
        return Err(fail(
            "flair",
            format!(
                "shape mismatch: t1w {:?} vs flair {:?} (or affine differs)",
                dims,
                record.flair.dims()
            ),
        ));
    }
    if record.brain_mask.dims() != dims || record.brain_mask.affine() != &affine {
        return Err(fail(
            "brain_mask",
            format!("shape mismatch: {:?} vs {:?}", record.brain_mask.dims(), dims),
        ));
    }
    if let Some(lesion) = &record.lesion_mask {
        if lesion.dims() != dims || lesion.affine() != &affine {
            return Err(fail(
                "lesion_mask",
                format!("shape mismatch: {:?} vs {:?}", lesion.dims(), dims),
            ));
        }
        let outside = lesion
            .data()
            .iter()
            .zip(record.brain_mask.data())
            .filter(|(&l, &b)| l != 0 && b == 0)
            .count();
        if outside > 0 {
            return Err(fail(
                "lesion_mask",
                format!("{outside} lesion voxels lie outside the brain mask"),
            ));
        }
    }
    Ok(record)
}

/// A cubic training patch cropped from one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub t1w: Vec<f32>,
    pub flair: Vec<f32>,
    pub label: Vec<u8>,
    pub subject_id: String,
    /// Corner of the patch in (possibly padded) source coordinates, x/y/z.
    pub corner: [isize; 3],
}

impl Patch {
    pub fn dims(&self) -> Dims {
        [self.size; 3]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.size.pow(3);
        if self.t1w.len() != n || self.flair.len() != n || self.label.len() != n {
            return Err(Error::Shape(format!("patch arrays must hold {n} voxels")));
        }
        if self.label.iter().any(|&v| v > 1) {
            return Err(Error::Invalid("patch label is not binary".into()));
        }
        Ok(())
    }
}

/// Channel index of T1w in stacked network input.
pub const T1W_CHANNEL: usize = 0;
/// Channel index of FLAIR in stacked network input.
pub const FLAIR_CHANNEL: usize = 1;

/// Concatenates T1w and FLAIR along a new leading channel axis:
/// output shape `(2, nz, ny, nx)` with channel 0 = T1w, channel 1 = FLAIR.
pub fn stack_channels(t1w: &[f32], flair: &[f32], dims: Dims) -> Result<Tensor<f32>> {
    let n = voxel_count(dims);
    if t1w.len() != n || flair.len() != n {
        return Err(Error::Shape(format!(
            "stack_channels: t1w has {} voxels, flair {}, expected {n}",
            t1w.len(),
            flair.len()
        )));
    }
    let mut data = Vec::with_capacity(2 * n);
    data.extend_from_slice(t1w);
    data.extend_from_slice(flair);
    Tensor::new(vec![2, dims[2], dims[1], dims[0]], data)
}

/// Inverse of [`stack_channels`].
pub fn unstack_channels(stacked: &Tensor<f32>) -> Result<(Vec<f32>, Vec<f32>)> {
    if stacked.shape().len() != 4 || stacked.shape()[0] != 2 {
        return Err(Error::Shape(format!(
            "expected (2, D, H, W), got {:?}",
            stacked.shape()
        )));
    }
    Ok((stacked.slab(T1W_CHANNEL).to_vec(), stacked.slab(FLAIR_CHANNEL).to_vec()))
}
