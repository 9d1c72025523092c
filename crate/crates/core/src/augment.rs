//! On-the-fly training augmentation: lesion-biased random cropping, then
//! axis permutation, a single affine + elastic resampling pass, and an
//! additive intensity shift on the images.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::types::{flat_index, Dims, Patch, SubjectRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub crop_size: usize,
    /// Probability that a crop is forced to contain a lesion voxel.
    pub lesion_crop_prob: f64,
    pub permute_axes: bool,
    pub p_permute: f64,
    pub p_affine: f64,
    pub p_elastic: f64,
    pub p_intensity: f64,
    /// Half-width of the additive shift in WM-normalized units.
    pub intensity_shift: f32,
    pub max_rotation_deg: f64,
    pub scale_range: (f64, f64),
    pub max_translation: f64,
    /// Control points per axis.
    pub elastic_grid: usize,
    /// Standard deviation of control-point displacements, voxels.
    pub elastic_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_size: 112,
            lesion_crop_prob: 0.5,
            permute_axes: true,
            p_permute: 0.5,
            p_affine: 0.5,
            p_elastic: 0.5,
            p_intensity: 0.5,
            intensity_shift: 0.1,
            max_rotation_deg: 10.0,
            scale_range: (0.9, 1.1),
            max_translation: 5.0,
            elastic_grid: 4,
            elastic_sigma: 2.0,
        }
    }
}

impl AugmentConfig {
    pub fn desk() -> Self {
        AugmentConfig { crop_size: 32, ..Default::default() }
    }

    /// Cropping only.
    pub fn none(crop_size: usize) -> Self {
        AugmentConfig {
            crop_size,
            p_permute: 0.0,
            p_affine: 0.0,
            p_elastic: 0.0,
            p_intensity: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.lesion_crop_prob,
            self.p_permute,
            self.p_affine,
            self.p_elastic,
            self.p_intensity,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!("augmentation probabilities must lie in [0,1]: {probs:?}")));
        }
        if self.crop_size == 0 {
            return Err(Error::Config("crop_size must be positive".into()));
        }
        if self.elastic_grid < 2 {
            return Err(Error::Config("elastic_grid needs at least 2 control points".into()));
        }
        if !(self.scale_range.0 > 0.0 && self.scale_range.0 <= self.scale_range.1) {
            return Err(Error::Config(format!("invalid scale range {:?}", self.scale_range)));
        }
        Ok(())
    }
}

/// Seed for one augmentation draw; independent of worker scheduling.
pub fn draw_seed(global_seed: u64, subject_id: &str, epoch: usize, draw: usize) -> u64 {
    rng::derive_seed(global_seed, &["augment", subject_id, &epoch.to_string(), &draw.to_string()])
}

/// Random `P³` crop. Axes shorter than `P` are zero-padded symmetrically;
/// `corner` is reported in unpadded coordinates (negative inside padding).
pub fn sample_patch(record: &SubjectRecord, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Patch> {
    let p = cfg.crop_size;
    let dims = record.dims();
    let lesion = record
        .lesion_mask
        .as_ref()
        .ok_or_else(|| Error::Invalid(format!("{}: sampling needs a labeled subject", record.subject_id)))?;
    let pad: [isize; 3] = std::array::from_fn(|a| (p.saturating_sub(dims[a]) / 2) as isize);
    let max_corner: [isize; 3] = std::array::from_fn(|a| dims[a] as isize - p as isize + pad[a]);
    let lo: [isize; 3] = std::array::from_fn(|a| -pad[a]);
    let hi: [isize; 3] = std::array::from_fn(|a| max_corner[a].max(-pad[a]));
    let forced = rng.gen_bool(cfg.lesion_crop_prob);
    let corner: [isize; 3] = if forced && lesion.count() > 0 {
        let pick = rng.gen_range(0..lesion.count());
        let idx = lesion
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .nth(pick)
            .map(|(i, _)| i)
            .expect("count matches");
        let at = [idx % dims[0], (idx / dims[0]) % dims[1], idx / (dims[0] * dims[1])];
        std::array::from_fn(|a| {
            let v = at[a] as isize;
            let l = (v - p as isize + 1).max(lo[a]);
            let h = v.min(hi[a]);
            rng.gen_range(l..=h)
        })
    } else {
        std::array::from_fn(|a| rng.gen_range(lo[a]..=hi[a]))
    };
    Ok(crop(record, corner, p))
}

/// Extracts the `P³` block at `corner`, zero outside the volume.
pub fn crop(record: &SubjectRecord, corner: [isize; 3], p: usize) -> Patch {
    let dims = record.dims();
    let n = p * p * p;
    let (mut t1w, mut flair, mut label) = (vec![0f32; n], vec![0f32; n], vec![0u8; n]);
    let lesion = record.lesion_mask.as_ref();
    for z in 0..p {
        let sz = corner[2] + z as isize;
        if sz < 0 || sz >= dims[2] as isize {
            continue;
        }
        for y in 0..p {
            let sy = corner[1] + y as isize;
            if sy < 0 || sy >= dims[1] as isize {
                continue;
            }
            for x in 0..p {
                let sx = corner[0] + x as isize;
                if sx < 0 || sx >= dims[0] as isize {
                    continue;
                }
                let s = flat_index(dims, sx as usize, sy as usize, sz as usize);
                let d = x + p * (y + p * z);
                t1w[d] = record.t1w.data()[s];
                flair[d] = record.flair.data()[s];
                label[d] = lesion.map_or(0, |m| m.data()[s]);
            }
        }
    }
    Patch { size: p, t1w, flair, label, subject_id: record.subject_id.clone(), corner }
}

pub const AXIS_ORDERS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

/// Output axis `a` takes input axis `perm[a]`.
pub fn permute_patch(patch: &Patch, perm: [usize; 3]) -> Patch {
    let p = patch.size;
    let mut out = patch.clone();
    let mut src = [0usize; 3];
    for z in 0..p {
        for y in 0..p {
            for x in 0..p {
                let o = [x, y, z];
                for a in 0..3 {
                    src[perm[a]] = o[a];
                }
                let s = src[0] + p * (src[1] + p * src[2]);
                let d = x + p * (y + p * z);
                out.t1w[d] = patch.t1w[s];
                out.flair[d] = patch.flair[s];
                out.label[d] = patch.label[s];
            }
        }
    }
    out
}

pub fn inverse_perm(perm: [usize; 3]) -> [usize; 3] {
    let mut inv = [0; 3];
    for a in 0..3 {
        inv[perm[a]] = a;
    }
    inv
}

type Mat3 = [[f64; 3]; 3];

fn rotation(ax: f64, ay: f64, az: f64) -> Mat3 {
    let (sx, cx) = ax.sin_cos();
    let (sy, cy) = ay.sin_cos();
    let (sz, cz) = az.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    matmul(&rz, &matmul(&ry, &rx))
}

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

/// Output-to-input sampling map: `src = A·(dst − c) + c + t + elastic(dst)`.
struct Warp {
    a: Mat3,
    t: [f64; 3],
    /// Control-point displacements `[grid³][3]`, or empty.
    elastic: Vec<[f64; 3]>,
    grid: usize,
}

impl Warp {
    fn src(&self, p: usize, d: [f64; 3]) -> [f64; 3] {
        let c = (p as f64 - 1.0) / 2.0;
        let r = [d[0] - c, d[1] - c, d[2] - c];
        let mut s = [0.0; 3];
        for i in 0..3 {
            s[i] = (0..3).map(|k| self.a[i][k] * r[k]).sum::<f64>() + c + self.t[i];
        }
        if !self.elastic.is_empty() {
            let e = self.elastic_at(p, d);
            for i in 0..3 {
                s[i] += e[i];
            }
        }
        s
    }

    /// Trilinear interpolation of the control grid spanning the patch.
    fn elastic_at(&self, p: usize, d: [f64; 3]) -> [f64; 3] {
        let g = self.grid;
        let scale = (g - 1) as f64 / (p as f64 - 1.0).max(1.0);
        let u: [f64; 3] = std::array::from_fn(|a| d[a] * scale);
        let i0: [usize; 3] = std::array::from_fn(|a| (u[a].floor() as usize).min(g - 2));
        let f: [f64; 3] = std::array::from_fn(|a| u[a] - i0[a] as f64);
        let mut out = [0.0; 3];
        for corner in 0..8 {
            let b = [corner & 1, (corner >> 1) & 1, corner >> 2];
            let w: f64 = (0..3).map(|a| if b[a] == 1 { f[a] } else { 1.0 - f[a] }).product();
            let k = (i0[0] + b[0]) + g * ((i0[1] + b[1]) + g * (i0[2] + b[2]));
            for a in 0..3 {
                out[a] += w * self.elastic[k][a];
            }
        }
        out
    }
}

fn sample_trilinear(vol: &[f32], p: usize, s: [f64; 3]) -> f32 {
    let f: [f64; 3] = [s[0].floor(), s[1].floor(), s[2].floor()];
    let mut acc = 0.0f64;
    for corner in 0..8 {
        let b = [corner & 1, (corner >> 1) & 1, corner >> 2];
        let mut w = 1.0;
        let mut idx = [0isize; 3];
        for a in 0..3 {
            let fr = s[a] - f[a];
            w *= if b[a] == 1 { fr } else { 1.0 - fr };
            idx[a] = f[a] as isize + b[a] as isize;
        }
        if w == 0.0 || idx.iter().any(|&i| i < 0 || i >= p as isize) {
            continue;
        }
        acc += w * f64::from(vol[idx[0] as usize + p * (idx[1] as usize + p * idx[2] as usize)]);
    }
    acc as f32
}

fn sample_nearest(vol: &[u8], p: usize, s: [f64; 3]) -> u8 {
    let idx: [isize; 3] = std::array::from_fn(|a| s[a].round() as isize);
    if idx.iter().any(|&i| i < 0 || i >= p as isize) {
        return 0;
    }
    vol[idx[0] as usize + p * (idx[1] as usize + p * idx[2] as usize)]
}

fn resample(patch: &Patch, warp: &Warp) -> Patch {
    let p = patch.size;
    let mut out = patch.clone();
    for z in 0..p {
        for y in 0..p {
            for x in 0..p {
                let s = warp.src(p, [x as f64, y as f64, z as f64]);
                let d = x + p * (y + p * z);
                out.t1w[d] = sample_trilinear(&patch.t1w, p, s);
                out.flair[d] = sample_trilinear(&patch.flair, p, s);
                out.label[d] = sample_nearest(&patch.label, p, s);
            }
        }
    }
    out
}

/// Applies the augmentation stack in fixed order. Returns the input
/// unchanged when no transform fires.
pub fn apply_augmentations(patch: &Patch, cfg: &AugmentConfig, rng: &mut Rng) -> Patch {
    let mut out = patch.clone();
    if cfg.permute_axes && rng.gen_bool(cfg.p_permute) {
        out = permute_patch(&out, AXIS_ORDERS[rng.gen_range(0..6)]);
    }
    let affine = rng.gen_bool(cfg.p_affine);
    let elastic = rng.gen_bool(cfg.p_elastic);
    if affine || elastic {
        let mut warp = Warp {
            a: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            t: [0.0; 3],
            elastic: Vec::new(),
            grid: cfg.elastic_grid,
        };
        if affine {
            let m = cfg.max_rotation_deg.to_radians();
            let angles: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-m..=m));
            let scale = rng.gen_range(cfg.scale_range.0..=cfg.scale_range.1);
            let r = rotation(angles[0], angles[1], angles[2]);
            // sampling with A = R / s zooms the content by s
            warp.a = r.map(|row| row.map(|v| v / scale));
            let mt = cfg.max_translation;
            warp.t = std::array::from_fn(|_| rng.gen_range(-mt..=mt));
        }
        if elastic {
            let n = Normal::new(0.0, cfg.elastic_sigma.max(0.0)).expect("finite sigma");
            warp.elastic = (0..cfg.elastic_grid.pow(3))
                .map(|_| std::array::from_fn(|_| n.sample(rng)))
                .collect();
        }
        out = resample(&out, &warp);
    }
    if rng.gen_bool(cfg.p_intensity) {
        let s = cfg.intensity_shift;
        let (a, b) = (rng.gen_range(-s..=s), rng.gen_range(-s..=s));
        out.t1w.iter_mut().for_each(|v| *v += a);
        out.flair.iter_mut().for_each(|v| *v += b);
    }
    out
}

/// Sample + augment for one draw with its derived seed.
pub fn draw_patch(record: &SubjectRecord, cfg: &AugmentConfig, seed: u64) -> Result<Patch> {
    let mut r = <Rng as rand::SeedableRng>::seed_from_u64(seed);
    let p = sample_patch(record, cfg, &mut r)?;
    Ok(apply_augmentations(&p, cfg, &mut r))
}

pub fn patch_dims(cfg: &AugmentConfig) -> Dims {
    [cfg.crop_size; 3]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_subject, PhantomSpec};
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn subject() -> SubjectRecord {
        crate::preprocess::preprocess_subject(&generate_subject(&PhantomSpec::desk(), 5).unwrap()).unwrap()
    }

    fn r(seed: u64) -> crate::rng::Rng {
        crate::rng::Rng::seed_from_u64(seed)
    }

    #[test]
    fn whole_volume_crop() {
        let s = subject();
        let p = sample_patch(&s, &AugmentConfig::none(32), &mut r(1)).unwrap();
        assert_eq!(p.corner, [0, 0, 0]);
        assert_eq!(p.flair, s.flair.data());
        // larger crop pads symmetrically
        let p = sample_patch(&s, &AugmentConfig::none(40), &mut r(1)).unwrap();
        assert_eq!(p.corner, [-4, -4, -4]);
        assert_eq!(p.label.iter().map(|&v| v as usize).sum::<usize>(), s.lesion_mask.unwrap().count());
    }

    #[test]
    fn forced_crops_contain_lesions_and_are_deterministic() {
        let s = subject();
        let cfg = AugmentConfig { lesion_crop_prob: 1.0, ..AugmentConfig::none(12) };
        for k in 0..20 {
            let p = sample_patch(&s, &cfg, &mut r(k)).unwrap();
            assert!(p.label.iter().any(|&v| v == 1));
            assert_eq!(p, sample_patch(&s, &cfg, &mut r(k)).unwrap());
        }
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let s = subject();
        let p = sample_patch(&s, &AugmentConfig::none(16), &mut r(3)).unwrap();
        let cfg = AugmentConfig { p_permute: 0.0, p_affine: 0.0, p_elastic: 0.0, p_intensity: 0.0, ..AugmentConfig::desk() };
        assert_eq!(apply_augmentations(&p, &cfg, &mut r(4)), p);
    }

    #[test]
    fn permutations_invert() {
        let s = subject();
        let p = sample_patch(&s, &AugmentConfig::none(16), &mut r(3)).unwrap();
        for perm in AXIS_ORDERS {
            let q = permute_patch(&permute_patch(&p, perm), inverse_perm(perm));
            assert_eq!(q, p);
        }
    }

    #[test]
    fn intensity_shift_only_moves_images() {
        let s = subject();
        let p = sample_patch(&s, &AugmentConfig::none(16), &mut r(3)).unwrap();
        let cfg = AugmentConfig { p_intensity: 1.0, intensity_shift: 0.1, ..AugmentConfig::none(16) };
        let q = apply_augmentations(&p, &cfg, &mut r(9));
        assert_eq!(q.label, p.label);
        let mean = |v: &[f32]| v.iter().map(|&x| f64::from(x)).sum::<f64>() / v.len() as f64;
        let d = mean(&q.flair) - mean(&p.flair);
        assert!(d.abs() <= 0.1 + 1e-6);
        // every voxel moved by the same amount
        let d0 = q.flair[0] - p.flair[0];
        assert!(q.flair.iter().zip(&p.flair).all(|(a, b)| ((a - b) - d0).abs() < 1e-5));
    }

    #[test]
    fn identity_warp_reproduces_patch() {
        let s = subject();
        let p = sample_patch(&s, &AugmentConfig::none(16), &mut r(3)).unwrap();
        let w = Warp { a: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], t: [0.0; 3], elastic: vec![], grid: 4 };
        assert_eq!(resample(&p, &w), p);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn labels_stay_binary_and_volume_is_stable(seed in 0u64..10_000) {
            // lesions large enough that nearest-neighbour aliasing stays small
            let spec = PhantomSpec { lesion_count: (2, 4), lesion_radius: (2.5, 3.5), ..PhantomSpec::desk() };
            let s = crate::preprocess::preprocess_subject(&generate_subject(&spec, 5).unwrap()).unwrap();
            let base = AugmentConfig { lesion_crop_prob: 1.0, ..AugmentConfig::none(32) };
            let p = sample_patch(&s, &base, &mut r(seed)).unwrap();
            // small deformations: well inside the defaults
            let cfg = AugmentConfig {
                p_permute: 1.0, p_affine: 1.0, p_elastic: 1.0, p_intensity: 1.0,
                max_rotation_deg: 5.0, scale_range: (0.98, 1.02), max_translation: 0.0,
                elastic_sigma: 0.3,
                ..base
            };
            let q = apply_augmentations(&p, &cfg, &mut r(seed + 1));
            prop_assert!(q.label.iter().all(|&v| v <= 1));
            let before = p.label.iter().filter(|&&v| v == 1).count() as f64;
            let after = q.label.iter().filter(|&&v| v == 1).count() as f64;
            prop_assert!((after - before).abs() < 0.2 * before, "{before} -> {after}");
        }
    }
}
