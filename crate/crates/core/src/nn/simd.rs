//! AVX-512 kernels for the stride-1 3×3×3 convolution on the padded grid.
//!
//! Both kernels work in blocks of 8 output channels. Inputs live in the
//! padded layout produced by `kernels::pad` (with at least 64 zero slack
//! elements at each end), so every tap is a constant offset.

#[cfg(target_arch = "x86_64")]
use std::arch::x86_64::*;
use std::sync::OnceLock;

pub const CO_BLOCK: usize = 8;
pub const VOXEL_BLOCK: usize = 32;

pub fn available() -> bool {
    static AVAILABLE: OnceLock<bool> = OnceLock::new();
    *AVAILABLE.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        {
            std::env::var_os("HARMOSEG_NO_SIMD").is_none() && is_x86_feature_detected!("avx512f")
        }
        #[cfg(not(target_arch = "x86_64"))]
        {
            false
        }
    })
}

/// Re-lays `w[co][ci][27]` as `[co/8][ci][27][8]` for broadcast loads.
pub fn relayout_weights(w: &[f32], ci: usize, co: usize) -> Vec<f32> {
    let mut out = vec![0f32; w.len()];
    for o in 0..co {
        let (cb, c) = (o / CO_BLOCK, o % CO_BLOCK);
        for i in 0..ci {
            for t in 0..27 {
                out[((cb * ci + i) * 27 + t) * CO_BLOCK + c] = w[(o * ci + i) * 27 + t];
            }
        }
    }
    out
}

/// `out[o][j] = Σ_{i,t} w[o][i][t] · xp[i][base + j + offs[t]]` for
/// `j < len_pad` (a multiple of 32). `out` has row stride `len_pad`.
///
/// # Safety
/// Requires AVX-512F; `xp` rows of length `row_len` must cover
/// `base + len_pad + max(offs)` and `base + min(offs) >= 0`.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
#[allow(clippy::too_many_arguments)]
pub unsafe fn conv3_forward(
    xp: &[f32],
    row_len: usize,
    ci: usize,
    co: usize,
    wr: &[f32],
    offs: &[isize; 27],
    base: usize,
    len_pad: usize,
    out: &mut [f32],
) {
    debug_assert_eq!(len_pad % VOXEL_BLOCK, 0);
    debug_assert!(out.len() >= co * len_pad);
    for cb in 0..co / CO_BLOCK {
        let wb = wr.as_ptr().add(cb * ci * 27 * CO_BLOCK);
        let mut j = 0;
        while j < len_pad {
            let mut a0 = [_mm512_setzero_ps(); CO_BLOCK];
            let mut a1 = [_mm512_setzero_ps(); CO_BLOCK];
            for i in 0..ci {
                let xr = xp.as_ptr().add(i * row_len + base + j);
                let wi = wb.add(i * 27 * CO_BLOCK);
                for t in 0..27 {
                    let xs = xr.offset(offs[t]);
                    let x0 = _mm512_loadu_ps(xs);
                    let x1 = _mm512_loadu_ps(xs.add(16));
                    let wt = wi.add(t * CO_BLOCK);
                    for c in 0..CO_BLOCK {
                        let wv = _mm512_set1_ps(*wt.add(c));
                        a0[c] = _mm512_fmadd_ps(wv, x0, a0[c]);
                        a1[c] = _mm512_fmadd_ps(wv, x1, a1[c]);
                    }
                }
            }
            for c in 0..CO_BLOCK {
                let o = out.as_mut_ptr().add((cb * CO_BLOCK + c) * len_pad + j);
                _mm512_storeu_ps(o, a0[c]);
                _mm512_storeu_ps(o.add(16), a1[c]);
            }
            j += VOXEL_BLOCK;
        }
    }
}

/// Weight gradient partial:
/// `dw[o][i][t] = Σ_j dy[o][j] · xp[i][base + j + offs[t]]` over `j < len_pad`
/// (a multiple of 16; `dy` rows have stride `len_pad`).
///
/// # Safety
/// Same layout requirements as [`conv3_forward`].
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
#[allow(clippy::too_many_arguments)]
pub unsafe fn conv3_weight_grad(
    xp: &[f32],
    row_len: usize,
    dy: &[f32],
    ci: usize,
    co: usize,
    offs: &[isize; 27],
    base: usize,
    len_pad: usize,
    dw: &mut [f32],
) {
    debug_assert_eq!(len_pad % 16, 0);
    for cb in 0..co / CO_BLOCK {
        let dyb = dy.as_ptr().add(cb * CO_BLOCK * len_pad);
        for i in 0..ci {
            let xr = xp.as_ptr().add(i * row_len + base);
            for t0 in (0..27).step_by(3) {
                let mut a0 = [_mm512_setzero_ps(); CO_BLOCK];
                let mut a1 = [_mm512_setzero_ps(); CO_BLOCK];
                let mut a2 = [_mm512_setzero_ps(); CO_BLOCK];
                let (p0, p1, p2) = (
                    xr.offset(offs[t0]),
                    xr.offset(offs[t0 + 1]),
                    xr.offset(offs[t0 + 2]),
                );
                let mut j = 0;
                while j < len_pad {
                    let x0 = _mm512_loadu_ps(p0.add(j));
                    let x1 = _mm512_loadu_ps(p1.add(j));
                    let x2 = _mm512_loadu_ps(p2.add(j));
                    for c in 0..CO_BLOCK {
                        let d = _mm512_loadu_ps(dyb.add(c * len_pad + j));
                        a0[c] = _mm512_fmadd_ps(d, x0, a0[c]);
                        a1[c] = _mm512_fmadd_ps(d, x1, a1[c]);
                        a2[c] = _mm512_fmadd_ps(d, x2, a2[c]);
                    }
                    j += 16;
                }
                for c in 0..CO_BLOCK {
                    let o = ((cb * CO_BLOCK + c) * ci + i) * 27 + t0;
                    dw[o] = _mm512_reduce_add_ps(a0[c]);
                    dw[o + 1] = _mm512_reduce_add_ps(a1[c]);
                    dw[o + 2] = _mm512_reduce_add_ps(a2[c]);
                }
            }
        }
    }
}
