//! Full-volume inference by overlapping windows with uniform averaging.

use super::segnet::{predict_binary, SegNet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{LabelMask, SubjectRecord, Volume3D};

/// Window starts along one axis of length `n` after shifting the tiling
/// origin by `shift` voxels; returns `(padded_len, starts)`.
fn axis_tiling(n: usize, window: usize, stride: usize, shift: usize) -> (usize, Vec<usize>) {
    let mut len = (n + shift).max(window);
    let extra = (len - window) % stride;
    if extra != 0 {
        len += stride - extra;
    }
    (len, (0..=len - window).step_by(stride).collect())
}

/// Per-voxel probabilities (x-fastest, same grid as the inputs). `shift`
/// moves the tiling origin by that many voxels per axis (x, y, z).
pub fn sliding_window_probabilities(
    net: &SegNet<f32>,
    t1w: &Volume3D,
    flair: &Volume3D,
    window: usize,
    shift: [usize; 3],
) -> Result<Vec<f32>> {
    let k = net.config().divisor();
    if window == 0 || window % k != 0 || window % 2 != 0 {
        return Err(Error::Shape(format!("window {window} must be a positive multiple of {k}")));
    }
    if flair.dims() != t1w.dims() {
        return Err(Error::Shape("t1w and flair grids differ".into()));
    }
    let stride = window / 2;
    let [nx, ny, nz] = t1w.dims();
    let (lx, sx) = axis_tiling(nx, window, stride, shift[0]);
    let (ly, sy) = axis_tiling(ny, window, stride, shift[1]);
    let (lz, sz) = axis_tiling(nz, window, stride, shift[2]);
    let pidx = |x: usize, y: usize, z: usize| x + lx * (y + ly * z);
    let mut padded = [vec![0f32; lx * ly * lz], vec![0f32; lx * ly * lz]];
    for (ch, vol) in [t1w, flair].into_iter().enumerate() {
        for z in 0..nz {
            for y in 0..ny {
                let src = &vol.data()[nx * (y + ny * z)..nx * (y + ny * z + 1)];
                let at = pidx(shift[0], y + shift[1], z + shift[2]);
                padded[ch][at..at + nx].copy_from_slice(src);
            }
        }
    }
    let mut sum = vec![0f32; lx * ly * lz];
    let mut count = vec![0u32; lx * ly * lz];
    let w3 = window * window * window;
    for &z0 in &sz {
        for &y0 in &sy {
            for &x0 in &sx {
                let mut input = vec![0f32; 2 * w3];
                for ch in 0..2 {
                    for z in 0..window {
                        for y in 0..window {
                            let at = pidx(x0, y0 + y, z0 + z);
                            let dst = ch * w3 + (z * window + y) * window;
                            input[dst..dst + window].copy_from_slice(&padded[ch][at..at + window]);
                        }
                    }
                }
                let p = net.forward(&Tensor::new(vec![1, 2, window, window, window], input)?)?;
                for z in 0..window {
                    for y in 0..window {
                        let at = pidx(x0, y0 + y, z0 + z);
                        let src = &p.data()[(z * window + y) * window..][..window];
                        for x in 0..window {
                            sum[at + x] += src[x];
                            count[at + x] += 1;
                        }
                    }
                }
            }
        }
    }
    let mut out = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = pidx(x + shift[0], y + shift[1], z + shift[2]);
                out.push(sum[i] / count[i] as f32);
            }
        }
    }
    Ok(out)
}

/// Thresholded full-volume prediction on the record's grid.
pub fn sliding_window_predict(net: &SegNet<f32>, record: &SubjectRecord, window: usize) -> Result<LabelMask> {
    let p = sliding_window_probabilities(net, &record.t1w, &record.flair, window, [0; 3])?;
    let m = predict_binary(&p, record.dims(), net.config().threshold)?;
    LabelMask::new(record.dims(), m.into_data(), record.t1w.spacing(), *record.t1w.affine())
}
