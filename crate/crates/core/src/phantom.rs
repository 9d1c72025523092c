//! Synthetic multi-site brain phantoms.
//!
//! A subject is an ellipsoidal "brain" with nested CSF / GM / WM shells,
//! two small ventricles and spheroid lesions placed inside white matter.
//! Intensities are first drawn in a canonical contrast space and then
//! passed through a [`SiteTransform`]: a monotone piecewise-linear map per
//! contrast, a sign-preserving gamma, and a smooth multiplicative bias
//! field. The noise-free part of a transform is exactly invertible, which
//! gives the harmonization benchmark a ground-truth contrast transfer.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::types::{flat_index, voxel_count, Dims, LabelMask, SiteTag, SubjectRecord, Volume3D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum Tissue {
    Background = 0,
    Csf = 1,
    Gm = 2,
    Wm = 3,
    Lesion = 4,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TissueStat {
    pub mean: f32,
    pub std: f32,
}

const fn ts(mean: f32, std: f32) -> TissueStat {
    TissueStat { mean, std }
}

/// Canonical intensity distribution per tissue class for one contrast.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TissueTable {
    pub background: TissueStat,
    pub csf: TissueStat,
    pub gm: TissueStat,
    pub wm: TissueStat,
    pub lesion: TissueStat,
}

impl TissueTable {
    pub fn get(&self, t: Tissue) -> TissueStat {
        match t {
            Tissue::Background => self.background,
            Tissue::Csf => self.csf,
            Tissue::Gm => self.gm,
            Tissue::Wm => self.wm,
            Tissue::Lesion => self.lesion,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub shape: Dims,
    pub t1w: TissueTable,
    pub flair: TissueTable,
    /// Inclusive range of lesions per subject.
    pub lesion_count: (usize, usize),
    /// Range of lesion radii in voxels.
    pub lesion_radius: (f32, f32),
    /// Range of per-lesion contrast, as a fraction of the full WM→lesion
    /// step. Values below 1 give faint lesions.
    pub lesion_contrast: (f32, f32),
    /// Contrast left at the lesion rim, relative to its core (partial
    /// volume). 1 gives flat lesions.
    pub lesion_rim: f32,
    pub noise_sigma: f32,
    pub rng_seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            shape: [64; 3],
            t1w: TissueTable {
                background: ts(0.0, 0.0),
                csf: ts(30.0, 3.0),
                gm: ts(65.0, 3.0),
                wm: ts(100.0, 3.0),
                lesion: ts(55.0, 4.0),
            },
            flair: TissueTable {
                background: ts(0.0, 0.0),
                csf: ts(15.0, 2.0),
                gm: ts(85.0, 3.0),
                wm: ts(70.0, 3.0),
                lesion: ts(140.0, 6.0),
            },
            lesion_count: (3, 8),
            lesion_radius: (1.5, 3.5),
            lesion_contrast: (1.0, 1.0),
            lesion_rim: 1.0,
            noise_sigma: 2.0,
            rng_seed: 2023,
        }
    }
}

/// Shell boundaries in normalized ellipsoid radius.
const CSF_OUTER: f64 = 1.0;
const GM_OUTER: f64 = 0.94;
const WM_OUTER: f64 = 0.78;
const VENTRICLE_RADIUS: f64 = 0.2;

impl PhantomSpec {
    /// Desk-scale variant used by fast experiments: 32³ volumes, smaller
    /// lesions of varying conspicuity.
    pub fn desk() -> Self {
        PhantomSpec {
            shape: [32; 3],
            lesion_count: (2, 7),
            lesion_radius: (1.2, 2.5),
            lesion_contrast: (0.4, 1.0),
            lesion_rim: 0.6,
            noise_sigma: 1.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&d| d < 8) {
            return Err(Error::Spec(format!("shape {:?} must be at least 8 per axis", self.shape)));
        }
        if self.lesion_count.0 > self.lesion_count.1 {
            return Err(Error::Spec("lesion_count range is inverted".into()));
        }
        let (r0, r1) = self.lesion_radius;
        if !(r0 > 0.0 && r0 <= r1) {
            return Err(Error::Spec(format!("lesion_radius range ({r0}, {r1}) is invalid")));
        }
        let (c0, c1) = self.lesion_contrast;
        if !(c0 > 0.0 && c0 <= c1 && c1 <= 1.0) {
            return Err(Error::Spec(format!("lesion_contrast range ({c0}, {c1}) must lie in (0, 1]")));
        }
        if !(self.lesion_rim > 0.0 && self.lesion_rim <= 1.0) {
            return Err(Error::Spec(format!("lesion_rim {} must lie in (0, 1]", self.lesion_rim)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Spec("noise_sigma must be non-negative".into()));
        }
        if !(self.flair.lesion.mean > self.flair.wm.mean + 2.0 * self.noise_sigma) {
            return Err(Error::Spec(format!(
                "FLAIR lesion mean {} must exceed WM mean {} + 2·noise_sigma",
                self.flair.lesion.mean, self.flair.wm.mean
            )));
        }
        Ok(())
    }

    /// Smallest white-matter semi-axis in voxels (before per-subject jitter).
    fn wm_semi_axis(&self) -> f64 {
        let m = *self.shape.iter().min().expect("three axes") as f64;
        m * 0.40 * 0.96 * WM_OUTER * (1.0 - VENTRICLE_RADIUS)
    }
}

/// Tissue map and lesion list of one generated subject.
#[derive(Clone, Debug, PartialEq)]
pub struct Anatomy {
    pub dims: Dims,
    pub tissue: Vec<Tissue>,
    /// Fraction of the WM→lesion intensity step per voxel (0 outside lesions).
    pub lesion_weight: Vec<f32>,
    pub lesion_count: usize,
}

/// Draws the geometry of one subject.
pub fn generate_anatomy(spec: &PhantomSpec, seed: u64) -> Result<Anatomy> {
    spec.validate()?;
    let dims = spec.shape;
    let mut rng = rng::stream(seed, &["anatomy"]);
    let center: [f64; 3] =
        std::array::from_fn(|i| dims[i] as f64 / 2.0 - 0.5 + rng.gen_range(-0.5..0.5));
    let base = [0.40, 0.44, 0.38];
    let semi: [f64; 3] =
        std::array::from_fn(|i| dims[i] as f64 * base[i] * rng.gen_range(0.96..1.04));
    // low-frequency wobble of the internal shell boundaries
    let phases: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU));
    let wobble_amp = rng.gen_range(0.02..0.05);
    let vent_off = semi[0] * 0.22;

    let n = voxel_count(dims);
    let mut tissue = vec![Tissue::Background; n];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let d = [
                    (x as f64 - center[0]) / semi[0],
                    (y as f64 - center[1]) / semi[1],
                    (z as f64 - center[2]) / semi[2],
                ];
                let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                if r > CSF_OUTER {
                    continue;
                }
                let w = 1.0
                    + wobble_amp
                        * (3.0 * d[0] + phases[0]).sin()
                        * (2.0 * d[1] + phases[1]).cos()
                        * (3.0 * d[2] + phases[2]).sin();
                let rw = r * w;
                let mut t = if r > GM_OUTER {
                    Tissue::Csf
                } else if rw > WM_OUTER {
                    Tissue::Gm
                } else {
                    Tissue::Wm
                };
                if t == Tissue::Wm {
                    for side in [-1.0, 1.0] {
                        let v = [
                            (x as f64 - center[0] - side * vent_off) / (semi[0] * 0.12),
                            (y as f64 - center[1]) / (semi[1] * VENTRICLE_RADIUS * 1.4),
                            (z as f64 - center[2]) / (semi[2] * VENTRICLE_RADIUS),
                        ];
                        if v[0] * v[0] + v[1] * v[1] + v[2] * v[2] <= 1.0 {
                            t = Tissue::Csf;
                        }
                    }
                }
                tissue[flat_index(dims, x, y, z)] = t;
            }
        }
    }

    let n_lesions = rng.gen_range(spec.lesion_count.0..=spec.lesion_count.1);
    if n_lesions > 0 && f64::from(spec.lesion_radius.0) * 1.2 + 1.0 > spec.wm_semi_axis() {
        return Err(Error::Spec(format!(
            "lesion radius {} exceeds the white-matter shell (semi-axis ≈ {:.1} voxels)",
            spec.lesion_radius.0,
            spec.wm_semi_axis()
        )));
    }
    let wm_voxels: Vec<usize> = (0..n).filter(|&i| tissue[i] == Tissue::Wm).collect();
    let mut lesion_weight = vec![0f32; n];
    let mut placed = 0;
    for _ in 0..n_lesions {
        let mut ok = false;
        for _attempt in 0..2000 {
            let radius = f64::from(rng.gen_range(spec.lesion_radius.0..=spec.lesion_radius.1));
            let axes: [f64; 3] = std::array::from_fn(|_| radius * rng.gen_range(0.8..1.2));
            let c = wm_voxels[rng.gen_range(0..wm_voxels.len())];
            let cz = c / (dims[0] * dims[1]);
            let cy = (c / dims[0]) % dims[1];
            let cx = c % dims[0];
            let cen = [
                cx as f64 + rng.gen_range(-0.5..0.5),
                cy as f64 + rng.gen_range(-0.5..0.5),
                cz as f64 + rng.gen_range(-0.5..0.5),
            ];
            let contrast = rng.gen_range(spec.lesion_contrast.0..=spec.lesion_contrast.1);
            let voxels = rasterize_ellipsoid(dims, cen, axes);
            if voxels.is_empty() {
                continue;
            }
            // every lesion voxel sits in WM, and no voxel touches another lesion
            let fits = voxels.iter().all(|&(v, _)| {
                tissue[v] == Tissue::Wm && !touches(dims, &tissue, v, Tissue::Lesion)
            });
            if fits {
                for &(v, q) in &voxels {
                    tissue[v] = Tissue::Lesion;
                    let r = q.sqrt() as f32;
                    lesion_weight[v] = contrast * (1.0 - (1.0 - spec.lesion_rim) * r * r * r);
                }
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::Spec(format!(
                "could not place lesion {} of {n_lesions} inside white matter",
                placed + 1
            )));
        }
        placed += 1;
    }
    Ok(Anatomy {
        dims,
        tissue,
        lesion_weight,
        lesion_count: placed,
    })
}

/// Voxels inside the ellipsoid with their squared normalized radius.
fn rasterize_ellipsoid(dims: Dims, c: [f64; 3], axes: [f64; 3]) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    let lo: [isize; 3] = std::array::from_fn(|i| (c[i] - axes[i]).floor() as isize);
    let hi: [isize; 3] = std::array::from_fn(|i| (c[i] + axes[i]).ceil() as isize);
    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            for x in lo[0]..=hi[0] {
                let p = [x, y, z];
                if (0..3).any(|i| p[i] < 0 || p[i] >= dims[i] as isize) {
                    return Vec::new();
                }
                let q: f64 = (0..3)
                    .map(|i| ((p[i] as f64 - c[i]) / axes[i]).powi(2))
                    .sum();
                if q <= 1.0 {
                    out.push((flat_index(dims, x as usize, y as usize, z as usize), q));
                }
            }
        }
    }
    out
}

fn touches(dims: Dims, tissue: &[Tissue], v: usize, what: Tissue) -> bool {
    let z = (v / (dims[0] * dims[1])) as isize;
    let y = ((v / dims[0]) % dims[1]) as isize;
    let x = (v % dims[0]) as isize;
    for dz in -1..=1 {
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (a, b, c) = (x + dx, y + dy, z + dz);
                if a < 0 || b < 0 || c < 0 {
                    continue;
                }
                let (a, b, c) = (a as usize, b as usize, c as usize);
                if a >= dims[0] || b >= dims[1] || c >= dims[2] {
                    continue;
                }
                if tissue[flat_index(dims, a, b, c)] == what {
                    return true;
                }
            }
        }
    }
    false
}

/// Generates one labeled subject in canonical contrast space.
pub fn generate_subject(spec: &PhantomSpec, seed: u64) -> Result<SubjectRecord> {
    let anatomy = generate_anatomy(spec, seed)?;
    let dims = anatomy.dims;
    let mut rng = rng::stream(seed, &["intensity"]);
    let std_normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let draw = |table: &TissueTable, rng: &mut rng::Rng| -> Vec<f32> {
        anatomy
            .tissue
            .iter()
            .zip(&anatomy.lesion_weight)
            .map(|(&t, &w)| {
                let mut s = table.get(t);
                if t == Tissue::Background {
                    return (spec.noise_sigma * std_normal.sample(rng)).abs();
                }
                if t == Tissue::Lesion {
                    s.mean = table.wm.mean + w * (s.mean - table.wm.mean);
                }
                let v = s.mean
                    + s.std * std_normal.sample(rng)
                    + spec.noise_sigma * std_normal.sample(rng);
                v.max(0.0)
            })
            .collect()
    };
    let t1w = draw(&spec.t1w, &mut rng);
    let flair = draw(&spec.flair, &mut rng);
    let brain: Vec<u8> = anatomy
        .tissue
        .iter()
        .map(|&t| u8::from(t != Tissue::Background))
        .collect();
    let lesion: Vec<u8> = anatomy
        .tissue
        .iter()
        .map(|&t| u8::from(t == Tissue::Lesion))
        .collect();
    Ok(SubjectRecord {
        subject_id: format!("phantom-{seed:016x}"),
        site: SiteTag::new("canonical")?,
        t1w: Volume3D::from_data(dims, t1w)?,
        flair: Volume3D::from_data(dims, flair)?,
        brain_mask: LabelMask::from_data(dims, brain)?,
        lesion_mask: Some(LabelMask::from_data(dims, lesion)?),
        preprocessed: false,
        harmonized_by: None,
    })
}

/// Monotone piecewise-linear map in units of `SiteTransform::reference`,
/// extended linearly past both ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntensityMap {
    pub points: Vec<(f32, f32)>,
}

impl IntensityMap {
    pub fn identity() -> Self {
        IntensityMap {
            points: vec![(0.0, 0.0), (1.0, 1.0)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 2 {
            return Err(Error::Spec("intensity map needs at least 2 control points".into()));
        }
        for w in self.points.windows(2) {
            if !(w[1].0 > w[0].0 && w[1].1 > w[0].1) {
                return Err(Error::Spec(format!(
                    "intensity map is not strictly increasing between {:?} and {:?}",
                    w[0], w[1]
                )));
            }
        }
        Ok(())
    }

    fn eval_pl(pts: &[(f32, f32)], u: f64, inverse: bool) -> f64 {
        let get = |p: &(f32, f32)| {
            if inverse {
                (f64::from(p.1), f64::from(p.0))
            } else {
                (f64::from(p.0), f64::from(p.1))
            }
        };
        let n = pts.len();
        let k = if u <= get(&pts[0]).0 {
            0
        } else if u >= get(&pts[n - 1]).0 {
            n - 2
        } else {
            pts.iter().position(|p| get(p).0 > u).expect("bracketed") - 1
        };
        let (x0, y0) = get(&pts[k]);
        let (x1, y1) = get(&pts[k + 1]);
        y0 + (u - x0) * (y1 - y0) / (x1 - x0)
    }

    pub fn apply(&self, u: f64) -> f64 {
        Self::eval_pl(&self.points, u, false)
    }

    pub fn invert(&self, u: f64) -> f64 {
        Self::eval_pl(&self.points, u, true)
    }
}

/// Site contrast model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteTransform {
    pub site: SiteTag,
    pub t1w_map: IntensityMap,
    pub flair_map: IntensityMap,
    pub gamma: f32,
    /// Peak relative deviation of the multiplicative bias field (≤ 0.1).
    pub bias_amplitude: f32,
    pub bias_phases: [f32; 3],
    pub noise_sigma: f32,
    /// Canonical intensity that maps to 1.0 before the contrast map.
    pub reference: f32,
}

impl SiteTransform {
    pub fn identity(site: &str) -> Result<Self> {
        Ok(SiteTransform {
            site: SiteTag::new(site)?,
            t1w_map: IntensityMap::identity(),
            flair_map: IntensityMap::identity(),
            gamma: 1.0,
            bias_amplitude: 0.0,
            bias_phases: [0.0; 3],
            noise_sigma: 0.0,
            reference: 100.0,
        })
    }

    /// Near-identity source site.
    pub fn site_a() -> Self {
        SiteTransform {
            site: SiteTag::new("site-A").expect("literal"),
            t1w_map: IntensityMap::identity(),
            flair_map: IntensityMap::identity(),
            gamma: 1.0,
            bias_amplitude: 0.03,
            bias_phases: [0.3, 1.1, 2.0],
            noise_sigma: 1.0,
            reference: 100.0,
        }
    }

    /// Target site: gamma 0.7, compressed GM/WM gap and lesion contrast on
    /// FLAIR, flatter T1w contrast.
    pub fn site_b() -> Self {
        SiteTransform {
            site: SiteTag::new("site-B").expect("literal"),
            t1w_map: IntensityMap {
                points: vec![(0.0, 0.0), (0.3, 0.42), (0.65, 0.8), (1.0, 1.0), (2.0, 1.6)],
            },
            flair_map: IntensityMap {
                points: vec![
                    (0.0, 0.0),
                    (0.15, 0.3),
                    (0.7, 0.75),
                    (0.85, 0.8),
                    (1.4, 1.05),
                    (3.0, 1.9),
                ],
            },
            gamma: 0.7,
            bias_amplitude: 0.08,
            bias_phases: [1.7, 0.4, 2.6],
            noise_sigma: 1.5,
            reference: 100.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.t1w_map.validate()?;
        self.flair_map.validate()?;
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::Spec(format!("gamma {} must be positive", self.gamma)));
        }
        if !(0.0..=0.1).contains(&self.bias_amplitude) {
            return Err(Error::Spec(format!(
                "bias amplitude {} must lie in [0, 0.1]",
                self.bias_amplitude
            )));
        }
        if !(self.reference > 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::Spec("reference must be positive and noise non-negative".into()));
        }
        Ok(())
    }

    /// Bias field: `1 + A · Π_axis cos(π·t_axis + φ_axis)` over normalized
    /// coordinates `t ∈ [0, 1]`.
    pub fn bias_field(&self, dims: Dims) -> Vec<f64> {
        let a = f64::from(self.bias_amplitude);
        let axis = |i: usize| -> Vec<f64> {
            (0..dims[i])
                .map(|k| {
                    let t = if dims[i] > 1 { k as f64 / (dims[i] - 1) as f64 } else { 0.5 };
                    (std::f64::consts::PI * t + f64::from(self.bias_phases[i])).cos()
                })
                .collect()
        };
        let (cx, cy, cz) = (axis(0), axis(1), axis(2));
        let mut out = Vec::with_capacity(voxel_count(dims));
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    out.push(1.0 + a * cx[x] * cy[y] * cz[z]);
                }
            }
        }
        out
    }

    fn map_for(&self, flair: bool) -> &IntensityMap {
        if flair {
            &self.flair_map
        } else {
            &self.t1w_map
        }
    }

    /// Noise-free forward transform of one canonical intensity.
    pub fn forward(&self, v: f64, flair: bool, bias: f64) -> f64 {
        let r = f64::from(self.reference);
        let u = self.map_for(flair).apply(v / r);
        r * signed_pow(u, f64::from(self.gamma)) * bias
    }

    /// Exact inverse of [`SiteTransform::forward`].
    pub fn inverse(&self, v: f64, flair: bool, bias: f64) -> f64 {
        let r = f64::from(self.reference);
        let u = signed_pow(v / (r * bias), 1.0 / f64::from(self.gamma));
        r * self.map_for(flair).invert(u)
    }
}

fn signed_pow(u: f64, g: f64) -> f64 {
    u.signum() * u.abs().powf(g)
}

/// Maps a canonical-space record into the contrast of `t`, adding fresh noise.
pub fn apply_site_transform(record: &SubjectRecord, t: &SiteTransform, seed: u64) -> Result<SubjectRecord> {
    t.validate()?;
    let dims = record.dims();
    let bias = t.bias_field(dims);
    let mut rng = rng::stream(seed, &["site-noise", t.site.as_str()]);
    let noise = Normal::new(0.0f64, f64::from(t.noise_sigma).max(0.0))
        .map_err(|e| Error::Spec(e.to_string()))?;
    let mut map = |vol: &Volume3D, flair: bool| -> Result<Volume3D> {
        let data: Vec<f32> = vol
            .data()
            .iter()
            .zip(&bias)
            .map(|(&v, &b)| {
                let mut out = t.forward(f64::from(v), flair, b);
                if t.noise_sigma > 0.0 {
                    out += noise.sample(&mut rng);
                }
                out as f32
            })
            .collect();
        vol.with_data(data)
    };
    let t1w = map(&record.t1w, false)?;
    let flair = map(&record.flair, true)?;
    Ok(SubjectRecord {
        site: t.site.clone(),
        t1w,
        flair,
        ..record.clone()
    })
}

/// `n` subjects with per-subject seeds derived from `seed`, all in site `t`.
pub fn generate_cohort(
    n_subjects: usize,
    spec: &PhantomSpec,
    t: &SiteTransform,
    seed: u64,
) -> Result<Vec<SubjectRecord>> {
    if n_subjects == 0 {
        return Err(Error::Spec("cohort needs at least one subject".into()));
    }
    (0..n_subjects)
        .map(|i| {
            let idx = i.to_string();
            let subject_seed = rng::derive_seed(seed, &["cohort-subject", &idx]);
            let canonical = generate_subject(spec, subject_seed)?;
            let mut rec = apply_site_transform(
                &canonical,
                t,
                rng::derive_seed(subject_seed, &["site", t.site.as_str()]),
            )?;
            rec.subject_id = format!("{}-s{:02}", t.site, i + 1);
            Ok(rec)
        })
        .collect()
}

/// Ground-truth contrast transfer: `to ∘ from⁻¹` on the noise-free model.
pub fn oracle_harmonize(record: &SubjectRecord, from: &SiteTransform, to: &SiteTransform) -> Result<SubjectRecord> {
    from.validate().map_err(|e| Error::Harmonizer(format!("source transform not invertible: {e}")))?;
    to.validate()?;
    let dims = record.dims();
    let bf = from.bias_field(dims);
    let bt = to.bias_field(dims);
    let map = |vol: &Volume3D, flair: bool| -> Result<Volume3D> {
        let data: Vec<f32> = vol
            .data()
            .iter()
            .zip(bf.iter().zip(&bt))
            .map(|(&v, (&b0, &b1))| {
                let canon = from.inverse(f64::from(v), flair, b0);
                to.forward(canon, flair, b1) as f32
            })
            .collect();
        vol.with_data(data)
    };
    Ok(SubjectRecord {
        site: to.site.clone(),
        t1w: map(&record.t1w, false)?,
        flair: map(&record.flair, true)?,
        harmonized_by: Some("oracle".into()),
        ..record.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{label_components, Connectivity};

    fn small() -> PhantomSpec {
        PhantomSpec {
            shape: [32; 3],
            lesion_count: (3, 3),
            lesion_radius: (2.0, 3.0),
            ..Default::default()
        }
    }

    #[test]
    fn zero_lesions_gives_empty_mask() {
        let spec = PhantomSpec {
            lesion_count: (0, 0),
            ..small()
        };
        let r = generate_subject(&spec, 1).unwrap();
        assert_eq!(r.lesion_mask.unwrap().count(), 0);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_subject(&small(), 42).unwrap();
        let b = generate_subject(&small(), 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn three_lesions_are_three_components() {
        for seed in 0..5 {
            let r = generate_subject(&small(), seed).unwrap();
            let m = r.lesion_mask.unwrap();
            for c in [Connectivity::Six, Connectivity::Eighteen, Connectivity::TwentySix] {
                assert_eq!(label_components(m.dims(), m.data(), c).count(), 3);
            }
        }
    }

    #[test]
    fn oversized_lesions_are_rejected() {
        let spec = PhantomSpec {
            lesion_radius: (9.0, 10.0),
            ..small()
        };
        assert!(matches!(generate_subject(&spec, 0), Err(Error::Spec(_))));
    }

    #[test]
    fn lesions_inside_brain_and_hyperintense() {
        for seed in 0..4 {
            let spec = small();
            let r = generate_subject(&spec, seed).unwrap();
            let anat = generate_anatomy(&spec, seed).unwrap();
            let lm = r.lesion_mask.as_ref().unwrap();
            assert!(lm.data().iter().zip(r.brain_mask.data()).all(|(&l, &b)| l <= b));
            let mean_of = |t: Tissue| {
                let v: Vec<f32> = anat
                    .tissue
                    .iter()
                    .zip(r.flair.data())
                    .filter(|(&a, _)| a == t)
                    .map(|(_, &v)| v)
                    .collect();
                v.iter().sum::<f32>() / v.len() as f32
            };
            assert!(mean_of(Tissue::Lesion) > mean_of(Tissue::Wm));
        }
    }

    #[test]
    fn identity_transform_is_identity() {
        let r = generate_subject(&small(), 3).unwrap();
        let t = SiteTransform::identity("same").unwrap();
        let out = apply_site_transform(&r, &t, 9).unwrap();
        for (a, b) in out.flair.data().iter().zip(r.flair.data()) {
            assert!((a - b).abs() <= 1e-4 * b.abs().max(1.0));
        }
        assert_eq!(out.site.as_str(), "same");
    }

    #[test]
    fn doubling_map_doubles_mean() {
        let r = generate_subject(&small(), 4).unwrap();
        let mut t = SiteTransform::identity("x2").unwrap();
        t.t1w_map.points = vec![(0.0, 0.0), (1.0, 2.0)];
        let out = apply_site_transform(&r, &t, 1).unwrap();
        let mean = |v: &[f32]| v.iter().map(|&x| f64::from(x)).sum::<f64>() / v.len() as f64;
        let (m0, m1) = (mean(r.t1w.data()), mean(out.t1w.data()));
        assert!((m1 - 2.0 * m0).abs() < 1e-4 * m0);
    }

    #[test]
    fn site_transform_keeps_labels() {
        let r = generate_subject(&small(), 5).unwrap();
        let out = apply_site_transform(&r, &SiteTransform::site_b(), 2).unwrap();
        assert_eq!(out.lesion_mask, r.lesion_mask);
        assert_eq!(out.brain_mask, r.brain_mask);
    }

    #[test]
    fn non_monotone_points_rejected() {
        let mut t = SiteTransform::site_b();
        t.flair_map.points = vec![(0.0, 0.0), (0.5, 0.6), (1.0, 0.4)];
        let r = generate_subject(&small(), 5).unwrap();
        assert!(apply_site_transform(&r, &t, 0).is_err());
    }

    #[test]
    fn transform_preserves_tissue_mean_ordering() {
        let spec = PhantomSpec::default();
        for t in [SiteTransform::site_a(), SiteTransform::site_b()] {
            for (table, flair) in [(&spec.t1w, false), (&spec.flair, true)] {
                let mut means: Vec<f32> = [table.csf, table.gm, table.wm, table.lesion]
                    .iter()
                    .map(|s| s.mean)
                    .collect();
                means.sort_by(f32::total_cmp);
                let mapped: Vec<f64> = means.iter().map(|&m| t.forward(f64::from(m), flair, 1.0)).collect();
                assert!(mapped.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    #[test]
    fn cohort_ids_sites_and_seed_separation() {
        let spec = small();
        let t = SiteTransform::site_a();
        let c = generate_cohort(5, &spec, &t, 1).unwrap();
        let ids: std::collections::BTreeSet<_> = c.iter().map(|r| r.subject_id.clone()).collect();
        assert_eq!(ids.len(), 5);
        assert!(c.iter().all(|r| r.site == t.site));
        let d = generate_cohort(5, &spec, &t, 2).unwrap();
        for a in &c {
            for b in &d {
                assert_ne!(a.flair, b.flair);
                assert_ne!(a.t1w, b.t1w);
            }
        }
        assert!(generate_cohort(0, &spec, &t, 1).is_err());
    }

    #[test]
    fn ten_subject_target_cohort() {
        let c = generate_cohort(10, &small(), &SiteTransform::site_b(), 8).unwrap();
        assert_eq!(c.len(), 10);
        assert!(c.iter().all(|r| r.site.as_str() == "site-B"));
    }

    #[test]
    fn oracle_with_same_transform_is_identity() {
        let canon = generate_subject(&small(), 6).unwrap();
        let t = SiteTransform::site_b();
        let r = apply_site_transform(&canon, &t, 3).unwrap();
        let h = oracle_harmonize(&r, &t, &t).unwrap();
        for (a, b) in h.flair.data().iter().zip(r.flair.data()) {
            assert!((a - b).abs() <= 1e-4 * b.abs().max(1.0), "{a} vs {b}");
        }
        assert_eq!(h.lesion_mask, r.lesion_mask);
    }

    #[test]
    fn oracle_recovers_target_noise_free() {
        let canon = generate_subject(&small(), 7).unwrap();
        let mut a = SiteTransform::site_a();
        a.noise_sigma = 0.0;
        let mut b = SiteTransform::site_b();
        b.noise_sigma = 0.0;
        let ra = apply_site_transform(&canon, &a, 0).unwrap();
        let rb = apply_site_transform(&canon, &b, 0).unwrap();
        let h = oracle_harmonize(&ra, &a, &b).unwrap();
        for (x, y) in h.flair.data().iter().zip(rb.flair.data()) {
            assert!((x - y).abs() <= 1e-3 * y.abs().max(1.0));
        }
        assert_eq!(h.site, b.site);
    }
}
