//! Volumetric layer kernels with hand-written backward passes.
//!
//! Activations are `(channels, D, H, W)` slabs, one batch item at a time.
//! The 3×3×3 convolution runs on a zero-padded grid where every tap is a
//! constant flat offset; the backward-data pass is the same convolution with
//! flipped, transposed weights. Work is split into fixed `CHUNK`-sized
//! voxel ranges and partial reductions are summed in chunk order.

use super::real::Real;
use super::simd;
use crate::exec;

/// Zero slack on both ends of every padded channel row.
pub const SLACK: usize = 64;
/// Voxels per work chunk (multiple of the SIMD voxel block).
pub const CHUNK: usize = 2048;

/// Geometry of the padded grid for a `(d, h, w)` volume.
#[derive(Clone, Copy, Debug)]
pub struct PadGeom {
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub row: usize,
    pub plane: usize,
    pub np: usize,
    /// Padded flat index of voxel (0,0,0) and one past voxel (d-1,h-1,w-1).
    pub lo: usize,
    pub hi: usize,
}

impl PadGeom {
    pub fn new([d, h, w]: [usize; 3]) -> Self {
        let row = w + 2;
        let plane = (h + 2) * row;
        let np = (d + 2) * plane;
        let lo = plane + row + 1;
        let hi = d * plane + h * row + w + 1;
        PadGeom { d, h, w, row, plane, np, lo, hi }
    }

    pub fn voxels(&self) -> usize {
        self.d * self.h * self.w
    }

    /// Length of a padded channel row including slack.
    pub fn row_len(&self) -> usize {
        self.np + 2 * SLACK
    }

    /// Span `[lo, hi)` of padded positions covering all interior voxels.
    pub fn span(&self) -> usize {
        self.hi - self.lo
    }

    pub fn offsets(&self) -> [isize; 27] {
        let mut o = [0isize; 27];
        let mut t = 0;
        for kz in -1isize..=1 {
            for ky in -1isize..=1 {
                for kx in -1isize..=1 {
                    o[t] = kz * self.plane as isize + ky * self.row as isize + kx;
                    t += 1;
                }
            }
        }
        o
    }

    /// Position in the span of interior voxel (z, y, x).
    #[inline]
    pub fn span_index(&self, z: usize, y: usize, x: usize) -> usize {
        (z + 1) * self.plane + (y + 1) * self.row + x + 1 - self.lo
    }
}

/// Copies `c` channels of `x` into the padded layout.
pub fn pad<T: Real>(x: &[T], c: usize, g: &PadGeom) -> Vec<T> {
    let rl = g.row_len();
    let v = g.voxels();
    let mut out = vec![T::ZERO; c * rl];
    for ch in 0..c {
        let src = &x[ch * v..(ch + 1) * v];
        let dst = &mut out[ch * rl..(ch + 1) * rl];
        for z in 0..g.d {
            for y in 0..g.h {
                let s = (z * g.h + y) * g.w;
                let p = SLACK + g.lo + g.span_index(z, y, 0);
                dst[p..p + g.w].copy_from_slice(&src[s..s + g.w]);
            }
        }
    }
    out
}

/// Volumes up to this many voxels skip the padded grid and use a dense
/// im2col over real voxels only.
pub const DENSE_MAX_VOXELS: usize = 64;

/// `(ci·27, v)` patch matrix over interior voxels, zero outside the volume.
fn im2col_dense<T: Real>(x: &[T], ci: usize, [d, h, w]: [usize; 3]) -> Vec<T> {
    let v = d * h * w;
    let mut col = vec![T::ZERO; ci * 27 * v];
    for i in 0..ci {
        let xi = &x[i * v..(i + 1) * v];
        for t in 0..27 {
            let (kz, ky, kx) = (t / 9, (t / 3) % 3, t % 3);
            let row = &mut col[(i * 27 + t) * v..(i * 27 + t + 1) * v];
            for z in 0..d {
                let zz = z + kz;
                if zz < 1 || zz > d {
                    continue;
                }
                for y in 0..h {
                    let yy = y + ky;
                    if yy < 1 || yy > h {
                        continue;
                    }
                    let src = ((zz - 1) * h + (yy - 1)) * w;
                    let dst = (z * h + y) * w;
                    for xx in 0..w {
                        let xs = xx + kx;
                        if xs >= 1 && xs <= w {
                            row[dst + xx] = xi[src + xs - 1];
                        }
                    }
                }
            }
        }
    }
    col
}

fn round_up(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

fn span_chunks(g: &PadGeom) -> Vec<std::ops::Range<usize>> {
    exec::ranges(g.span(), CHUNK)
}

/// Output of one chunk on the span: `co` rows of stride `stride`.
struct ChunkOut<T> {
    stride: usize,
    data: Vec<T>,
}

fn im2col_span<T: Real>(xp: &[T], ci: usize, g: &PadGeom, offs: &[isize; 27], start: usize, len: usize) -> Vec<T> {
    let rl = g.row_len();
    let mut col = vec![T::ZERO; ci * 27 * len];
    for i in 0..ci {
        for (t, &o) in offs.iter().enumerate() {
            let src = (i * rl + SLACK + g.lo + start) as isize + o;
            let src = src as usize;
            col[(i * 27 + t) * len..(i * 27 + t + 1) * len].copy_from_slice(&xp[src..src + len]);
        }
    }
    col
}

fn conv3_chunk<T: Real>(
    xp: &[T],
    ci: usize,
    co: usize,
    w: &[T],
    wr_f32: Option<&[f32]>,
    g: &PadGeom,
    offs: &[isize; 27],
    r: std::ops::Range<usize>,
) -> ChunkOut<T> {
    let len = r.len();
    if let (Some(wr), Some(xpf)) = (wr_f32, T::as_f32_slice(xp)) {
        let len_pad = round_up(len, simd::VOXEL_BLOCK);
        let mut data = vec![T::ZERO; co * len_pad];
        let out = T::as_f32_slice_mut(&mut data).expect("f32 element type");
        #[cfg(target_arch = "x86_64")]
        unsafe {
            simd::conv3_forward(xpf, g.row_len(), ci, co, wr, offs, SLACK + g.lo + r.start, len_pad, out);
        }
        #[cfg(not(target_arch = "x86_64"))]
        let _ = (wr, xpf, out);
        return ChunkOut { stride: len_pad, data };
    }
    let k = ci * 27;
    let col = im2col_span(xp, ci, g, offs, r.start, len);
    let mut data = vec![T::ZERO; co * len];
    unsafe {
        T::gemm(
            co, k, len, T::ONE, w.as_ptr(), k as isize, 1, col.as_ptr(), len as isize, 1, T::ZERO,
            data.as_mut_ptr(), len as isize, 1,
        );
    }
    ChunkOut { stride: len, data }
}

fn use_simd<T: Real>(co: usize) -> bool {
    simd::available() && co % simd::CO_BLOCK == 0 && T::as_f32_slice(&[] as &[T]).is_some()
}

/// Stride-1, pad-1 3×3×3 convolution of one item: `x` is `(ci, d, h, w)`,
/// `w` is `(co, ci, 27)`; returns `(co, d, h, w)`.
pub fn conv3_forward<T: Real>(x: &[T], ci: usize, dims: [usize; 3], w: &[T], bias: Option<&[T]>, co: usize) -> Vec<T> {
    conv3_forward_impl(x, ci, dims, w, bias, co, use_simd::<T>(co))
}

pub(crate) fn conv3_forward_impl<T: Real>(
    x: &[T],
    ci: usize,
    dims: [usize; 3],
    w: &[T],
    bias: Option<&[T]>,
    co: usize,
    fast: bool,
) -> Vec<T> {
    let v: usize = dims.iter().product();
    if v <= DENSE_MAX_VOXELS {
        let col = im2col_dense(x, ci, dims);
        let k = ci * 27;
        let mut y = vec![T::ZERO; co * v];
        unsafe {
            T::gemm(
                co, k, v, T::ONE, w.as_ptr(), k as isize, 1, col.as_ptr(), v as isize, 1, T::ZERO,
                y.as_mut_ptr(), v as isize, 1,
            );
        }
        if let Some(b) = bias {
            for o in 0..co {
                y[o * v..(o + 1) * v].iter_mut().for_each(|a| *a += b[o]);
            }
        }
        return y;
    }
    let g = PadGeom::new(dims);
    let offs = g.offsets();
    let xp = pad(x, ci, &g);
    let wr = if fast {
        T::as_f32_slice(w).map(|wf| simd::relayout_weights(wf, ci, co))
    } else {
        None
    };
    let chunks = span_chunks(&g);
    let parts = exec::map_indexed(chunks.len(), |k| {
        conv3_chunk(&xp, ci, co, w, wr.as_deref(), &g, &offs, chunks[k].clone())
    });
    let v = g.voxels();
    let mut y = vec![T::ZERO; co * v];
    for o in 0..co {
        let b = bias.map_or(T::ZERO, |b| b[o]);
        let yo = &mut y[o * v..(o + 1) * v];
        let mut idx = 0;
        for z in 0..g.d {
            for yy in 0..g.h {
                for xx in 0..g.w {
                    let j = g.span_index(z, yy, xx);
                    let (k, jj) = (j / CHUNK, j % CHUNK);
                    let part = &parts[k];
                    yo[idx] = part.data[o * part.stride + jj] + b;
                    idx += 1;
                }
            }
        }
    }
    y
}

/// Flips the spatial taps and swaps channel roles: `(co, ci, 27)` →
/// `(ci, co, 27)` with tap `t` ↦ `26 - t`.
pub fn flip_transpose<T: Real>(w: &[T], ci: usize, co: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; w.len()];
    for o in 0..co {
        for i in 0..ci {
            for t in 0..27 {
                out[(i * co + o) * 27 + (26 - t)] = w[(o * ci + i) * 27 + t];
            }
        }
    }
    out
}

/// Gradient w.r.t. the input of [`conv3_forward`].
pub fn conv3_backward_data<T: Real>(dy: &[T], co: usize, dims: [usize; 3], w: &[T], ci: usize) -> Vec<T> {
    let wt = flip_transpose(w, ci, co);
    conv3_forward(dy, co, dims, &wt, None, ci)
}

/// Gradients w.r.t. weights `(co, ci, 27)` and bias `(co)`, summed into
/// `dw` / `db`.
pub fn conv3_backward_weights<T: Real>(
    x: &[T],
    ci: usize,
    dims: [usize; 3],
    dy: &[T],
    co: usize,
    dw: &mut [T],
    db: Option<&mut [T]>,
) {
    conv3_backward_weights_impl(x, ci, dims, dy, co, dw, db, use_simd::<T>(co))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3_backward_weights_impl<T: Real>(
    x: &[T],
    ci: usize,
    dims: [usize; 3],
    dy: &[T],
    co: usize,
    dw: &mut [T],
    db: Option<&mut [T]>,
    fast: bool,
) {
    let v: usize = dims.iter().product();
    let k = ci * 27;
    if let Some(db) = db {
        for o in 0..co {
            db[o] += dy[o * v..(o + 1) * v].iter().copied().sum::<T>();
        }
    }
    if v <= DENSE_MAX_VOXELS {
        let col = im2col_dense(x, ci, dims);
        let mut part = vec![T::ZERO; co * k];
        unsafe {
            T::gemm(
                co, v, k, T::ONE, dy.as_ptr(), v as isize, 1, col.as_ptr(), 1, v as isize, T::ZERO,
                part.as_mut_ptr(), k as isize, 1,
            );
        }
        for (a, &b) in dw.iter_mut().zip(&part) {
            *a += b;
        }
        return;
    }
    let g = PadGeom::new(dims);
    let offs = g.offsets();
    let xp = pad(x, ci, &g);
    let chunks = span_chunks(&g);
    // scatter dy into span coordinates once
    let span = g.span();
    let mut dys = vec![T::ZERO; co * span];
    for o in 0..co {
        let src = &dy[o * v..(o + 1) * v];
        let dst = &mut dys[o * span..(o + 1) * span];
        for z in 0..g.d {
            for yy in 0..g.h {
                let s = (z * g.h + yy) * g.w;
                let j = g.span_index(z, yy, 0);
                dst[j..j + g.w].copy_from_slice(&src[s..s + g.w]);
            }
        }
    }
    let parts = exec::map_indexed(chunks.len(), |c| {
        let r = chunks[c].clone();
        let len = r.len();
        let mut part = vec![T::ZERO; co * k];
        if fast {
            let len_pad = round_up(len, 16);
            let mut dyc = vec![0f32; co * len_pad];
            for o in 0..co {
                let row = T::as_f32_slice(&dys[o * span + r.start..o * span + r.end]).expect("f32");
                dyc[o * len_pad..o * len_pad + len].copy_from_slice(row);
            }
            let xpf = T::as_f32_slice(&xp).expect("f32");
            let pf = T::as_f32_slice_mut(&mut part).expect("f32");
            #[cfg(target_arch = "x86_64")]
            unsafe {
                simd::conv3_weight_grad(xpf, g.row_len(), &dyc, ci, co, &offs, SLACK + g.lo + r.start, len_pad, pf);
            }
            #[cfg(not(target_arch = "x86_64"))]
            let _ = (xpf, pf, dyc);
            return part;
        }
        let col = im2col_span(&xp, ci, &g, &offs, r.start, len);
        let mut dyc = vec![T::ZERO; co * len];
        for o in 0..co {
            dyc[o * len..(o + 1) * len].copy_from_slice(&dys[o * span + r.start..o * span + r.end]);
        }
        unsafe {
            T::gemm(
                co, len, k, T::ONE, dyc.as_ptr(), len as isize, 1, col.as_ptr(), 1, len as isize,
                T::ZERO, part.as_mut_ptr(), k as isize, 1,
            );
        }
        part
    });
    for p in &parts {
        for (a, &b) in dw.iter_mut().zip(p) {
            *a += b;
        }
    }
}

/// Flat offsets of the 8 taps of a 2×2×2 block in a `(d, h, w)` grid.
fn block_offsets([_, h, w]: [usize; 3]) -> [usize; 8] {
    let mut o = [0usize; 8];
    for a in 0..8 {
        let (az, ay, ax) = (a >> 2, (a >> 1) & 1, a & 1);
        o[a] = az * h * w + ay * w + ax;
    }
    o
}

/// Fine-grid index of the (0,0,0) corner of each coarse voxel in `r`.
fn block_bases(fine: [usize; 3], r: std::ops::Range<usize>) -> Vec<usize> {
    let (ch, cw) = (fine[1] / 2, fine[2] / 2);
    r.map(|q| {
        let (qz, qy, qx) = (q / (ch * cw), (q / cw) % ch, q % cw);
        2 * qz * fine[1] * fine[2] + 2 * qy * fine[2] + 2 * qx
    })
    .collect()
}

fn half(dims: [usize; 3]) -> [usize; 3] {
    [dims[0] / 2, dims[1] / 2, dims[2] / 2]
}

/// Stride-2 2×2×2 convolution: `x` `(ci, d, h, w)` with even extents,
/// `w` `(co, ci, 8)`; returns `(co, d/2, h/2, w/2)`.
pub fn down_forward<T: Real>(x: &[T], ci: usize, dims: [usize; 3], w: &[T], bias: &[T], co: usize) -> Vec<T> {
    let cv = half(dims).iter().product::<usize>();
    let v: usize = dims.iter().product();
    let bo = block_offsets(dims);
    let k = ci * 8;
    let chunks = exec::ranges(cv, CHUNK);
    let parts = exec::map_indexed(chunks.len(), |c| {
        let r = chunks[c].clone();
        let len = r.len();
        let bases = block_bases(dims, r);
        let mut col = vec![T::ZERO; k * len];
        for i in 0..ci {
            for (a, &off) in bo.iter().enumerate() {
                let row = &mut col[(i * 8 + a) * len..(i * 8 + a + 1) * len];
                for (dst, &b) in row.iter_mut().zip(&bases) {
                    *dst = x[i * v + b + off];
                }
            }
        }
        let mut out = vec![T::ZERO; co * len];
        unsafe {
            T::gemm(
                co, k, len, T::ONE, w.as_ptr(), k as isize, 1, col.as_ptr(), len as isize, 1,
                T::ZERO, out.as_mut_ptr(), len as isize, 1,
            );
        }
        out
    });
    let mut y = vec![T::ZERO; co * cv];
    for (c, r) in chunks.iter().enumerate() {
        let len = r.len();
        for o in 0..co {
            for (j, q) in r.clone().enumerate() {
                y[o * cv + q] = parts[c][o * len + j] + bias[o];
            }
        }
    }
    y
}

/// Backward of [`down_forward`]: returns `dx` and accumulates `dw`, `db`.
#[allow(clippy::too_many_arguments)]
pub fn down_backward<T: Real>(
    x: &[T],
    ci: usize,
    dims: [usize; 3],
    w: &[T],
    co: usize,
    dy: &[T],
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let cv = half(dims).iter().product::<usize>();
    let v: usize = dims.iter().product();
    let bo = block_offsets(dims);
    let k = ci * 8;
    let chunks = exec::ranges(cv, CHUNK);
    let parts = exec::map_indexed(chunks.len(), |c| {
        let r = chunks[c].clone();
        let len = r.len();
        let bases = block_bases(dims, r.clone());
        let mut col = vec![T::ZERO; k * len];
        for i in 0..ci {
            for (a, &off) in bo.iter().enumerate() {
                let row = &mut col[(i * 8 + a) * len..(i * 8 + a + 1) * len];
                for (dst, &b) in row.iter_mut().zip(&bases) {
                    *dst = x[i * v + b + off];
                }
            }
        }
        let mut dyc = vec![T::ZERO; co * len];
        for o in 0..co {
            dyc[o * len..(o + 1) * len].copy_from_slice(&dy[o * cv + r.start..o * cv + r.end]);
        }
        let mut dcol = vec![T::ZERO; k * len];
        let mut pw = vec![T::ZERO; co * k];
        unsafe {
            // dcol = Wᵀ · dy
            T::gemm(
                k, co, len, T::ONE, w.as_ptr(), 1, k as isize, dyc.as_ptr(), len as isize, 1,
                T::ZERO, dcol.as_mut_ptr(), len as isize, 1,
            );
            // dW = dy · colᵀ
            T::gemm(
                co, len, k, T::ONE, dyc.as_ptr(), len as isize, 1, col.as_ptr(), 1, len as isize,
                T::ZERO, pw.as_mut_ptr(), k as isize, 1,
            );
        }
        (bases, dcol, pw)
    });
    let mut dx = vec![T::ZERO; ci * v];
    for (bases, dcol, pw) in &parts {
        let len = bases.len();
        for i in 0..ci {
            for (a, &off) in bo.iter().enumerate() {
                let row = &dcol[(i * 8 + a) * len..(i * 8 + a + 1) * len];
                for (&val, &b) in row.iter().zip(bases) {
                    dx[i * v + b + off] = val;
                }
            }
        }
        for (a, &b) in dw.iter_mut().zip(pw) {
            *a += b;
        }
    }
    for o in 0..co {
        db[o] += dy[o * cv..(o + 1) * cv].iter().copied().sum::<T>();
    }
    dx
}

/// Stride-2 2×2×2 transposed convolution: `x` `(ci, d, h, w)`, `w`
/// `(ci, co, 8)`; returns `(co, 2d, 2h, 2w)`.
pub fn up_forward<T: Real>(x: &[T], ci: usize, dims: [usize; 3], w: &[T], bias: &[T], co: usize) -> Vec<T> {
    let cv: usize = dims.iter().product();
    let fine = [dims[0] * 2, dims[1] * 2, dims[2] * 2];
    let fv = cv * 8;
    let bo = block_offsets(fine);
    let m = co * 8;
    let chunks = exec::ranges(cv, CHUNK);
    let parts = exec::map_indexed(chunks.len(), |c| {
        let r = chunks[c].clone();
        let len = r.len();
        let mut z = vec![T::ZERO; m * len];
        unsafe {
            // Z[(o,a), j] = Σ_i w[i][o][a] · x[i][r.start + j]
            T::gemm(
                m, ci, len, T::ONE, w.as_ptr(), 1, m as isize, x.as_ptr().add(r.start), cv as isize, 1,
                T::ZERO, z.as_mut_ptr(), len as isize, 1,
            );
        }
        z
    });
    let mut y = vec![T::ZERO; co * fv];
    for (c, r) in chunks.iter().enumerate() {
        let len = r.len();
        let bases = block_bases(fine, r.clone());
        for o in 0..co {
            for (a, &off) in bo.iter().enumerate() {
                let row = &parts[c][(o * 8 + a) * len..(o * 8 + a + 1) * len];
                for (&val, &b) in row.iter().zip(&bases) {
                    y[o * fv + b + off] = val + bias[o];
                }
            }
        }
    }
    y
}

/// Backward of [`up_forward`]; `dims` are the coarse input extents.
#[allow(clippy::too_many_arguments)]
pub fn up_backward<T: Real>(
    x: &[T],
    ci: usize,
    dims: [usize; 3],
    w: &[T],
    co: usize,
    dy: &[T],
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let cv: usize = dims.iter().product();
    let fine = [dims[0] * 2, dims[1] * 2, dims[2] * 2];
    let fv = cv * 8;
    let bo = block_offsets(fine);
    let m = co * 8;
    let chunks = exec::ranges(cv, CHUNK);
    let parts = exec::map_indexed(chunks.len(), |c| {
        let r = chunks[c].clone();
        let len = r.len();
        let bases = block_bases(fine, r.clone());
        let mut dyc = vec![T::ZERO; m * len];
        for o in 0..co {
            for (a, &off) in bo.iter().enumerate() {
                let row = &mut dyc[(o * 8 + a) * len..(o * 8 + a + 1) * len];
                for (dst, &b) in row.iter_mut().zip(&bases) {
                    *dst = dy[o * fv + b + off];
                }
            }
        }
        let mut dxc = vec![T::ZERO; ci * len];
        let mut pw = vec![T::ZERO; ci * m];
        unsafe {
            // dx = W · dYcol
            T::gemm(
                ci, m, len, T::ONE, w.as_ptr(), m as isize, 1, dyc.as_ptr(), len as isize, 1,
                T::ZERO, dxc.as_mut_ptr(), len as isize, 1,
            );
            // dW = x · dYcolᵀ
            T::gemm(
                ci, len, m, T::ONE, x.as_ptr().add(r.start), cv as isize, 1, dyc.as_ptr(), 1,
                len as isize, T::ZERO, pw.as_mut_ptr(), m as isize, 1,
            );
        }
        (dxc, pw)
    });
    let mut dx = vec![T::ZERO; ci * cv];
    for (c, r) in chunks.iter().enumerate() {
        let (dxc, pw) = &parts[c];
        let len = r.len();
        for i in 0..ci {
            dx[i * cv + r.start..i * cv + r.end].copy_from_slice(&dxc[i * len..(i + 1) * len]);
        }
        for (a, &b) in dw.iter_mut().zip(pw) {
            *a += b;
        }
    }
    for o in 0..co {
        db[o] += dy[o * fv..(o + 1) * fv].iter().copied().sum::<T>();
    }
    dx
}

/// Per-channel normalization cache.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    /// Post-activation output (its sign is the ReLU mask).
    pub out: Vec<T>,
}

/// Instance normalization (per channel over space) followed by ReLU.
pub fn instnorm_relu_forward<T: Real>(x: &[T], c: usize, v: usize, gamma: &[T], beta: &[T], eps: f64) -> NormCache<T> {
    let mut xhat = vec![T::ZERO; c * v];
    let mut out = vec![T::ZERO; c * v];
    let mut inv_std = vec![T::ZERO; c];
    for ch in 0..c {
        let xs = &x[ch * v..(ch + 1) * v];
        let mean = xs.iter().map(|a| a.to_f64()).sum::<f64>() / v as f64;
        let var = xs.iter().map(|a| (a.to_f64() - mean).powi(2)).sum::<f64>() / v as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[ch] = T::from_f64(is);
        let (m, s) = (T::from_f64(mean), T::from_f64(is));
        for j in 0..v {
            let xh = (xs[j] - m) * s;
            xhat[ch * v + j] = xh;
            out[ch * v + j] = (gamma[ch] * xh + beta[ch]).max(T::ZERO);
        }
    }
    NormCache { xhat, inv_std, out }
}

/// Backward of [`instnorm_relu_forward`]; accumulates `dgamma`, `dbeta`.
pub fn instnorm_relu_backward<T: Real>(
    cache: &NormCache<T>,
    dy: &[T],
    c: usize,
    v: usize,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Vec<T> {
    let mut dx = vec![T::ZERO; c * v];
    let n = v as f64;
    for ch in 0..c {
        let r = ch * v..(ch + 1) * v;
        let (xh, out, g) = (&cache.xhat[r.clone()], &cache.out[r.clone()], &dy[r.clone()]);
        let (mut sdy, mut sdyx) = (0.0f64, 0.0f64);
        for j in 0..v {
            if out[j] > T::ZERO {
                let d = g[j].to_f64();
                sdy += d;
                sdyx += d * xh[j].to_f64();
            }
        }
        dgamma[ch] += T::from_f64(sdyx);
        dbeta[ch] += T::from_f64(sdy);
        let gm = gamma[ch].to_f64();
        let is = cache.inv_std[ch].to_f64();
        // dxhat = dy·γ on the active set; dx = is/n·(n·dxhat − Σdxhat − x̂·Σ(dxhat·x̂))
        let (a, b) = (gm * sdy, gm * sdyx);
        let dxs = &mut dx[r];
        for j in 0..v {
            let dxhat = if out[j] > T::ZERO { gm * g[j].to_f64() } else { 0.0 };
            dxs[j] = T::from_f64(is / n * (n * dxhat - a - xh[j].to_f64() * b));
        }
    }
    dx
}

/// 1×1×1 convolution to a single channel.
pub fn head_forward<T: Real>(x: &[T], ci: usize, v: usize, w: &[T], bias: T) -> Vec<T> {
    let mut y = vec![bias; v];
    for i in 0..ci {
        let wi = w[i];
        for (a, &b) in y.iter_mut().zip(&x[i * v..(i + 1) * v]) {
            *a += wi * b;
        }
    }
    y
}

pub fn head_backward<T: Real>(x: &[T], ci: usize, v: usize, w: &[T], dy: &[T], dw: &mut [T], db: &mut T) -> Vec<T> {
    let mut dx = vec![T::ZERO; ci * v];
    for i in 0..ci {
        let mut acc = T::ZERO;
        for j in 0..v {
            dx[i * v + j] = w[i] * dy[j];
            acc += x[i * v + j] * dy[j];
        }
        dw[i] += acc;
    }
    *db += dy.iter().copied().sum::<T>();
    dx
}

#[inline]
pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::ZERO {
        T::ONE / (T::ONE + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::ONE + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    /// Direct definition of the padded 3×3×3 convolution.
    fn conv3_naive(x: &[f64], ci: usize, [d, h, w]: [usize; 3], wt: &[f64], co: usize) -> Vec<f64> {
        let v = d * h * w;
        let mut y = vec![0.0; co * v];
        for o in 0..co {
            for z in 0..d as isize {
                for yy in 0..h as isize {
                    for xx in 0..w as isize {
                        let mut acc = 0.0;
                        for i in 0..ci {
                            for kz in 0..3isize {
                                for ky in 0..3isize {
                                    for kx in 0..3isize {
                                        let (a, b, c) = (z + kz - 1, yy + ky - 1, xx + kx - 1);
                                        if a < 0 || b < 0 || c < 0 || a >= d as isize || b >= h as isize || c >= w as isize {
                                            continue;
                                        }
                                        let t = (kz * 9 + ky * 3 + kx) as usize;
                                        acc += wt[(o * ci + i) * 27 + t]
                                            * x[i * v + (a as usize * h + b as usize) * w + c as usize];
                                    }
                                }
                            }
                        }
                        y[o * v + (z as usize * h + yy as usize) * w + xx as usize] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv3_matches_naive() {
        let dims = [5, 6, 7];
        let (ci, co) = (3, 4);
        let v = 5 * 6 * 7;
        let x = rand_vec(ci * v, 1);
        let w = rand_vec(co * ci * 27, 2);
        let y = conv3_forward(&x, ci, dims, &w, None, co);
        let yn = conv3_naive(&x, ci, dims, &w, co);
        for (a, b) in y.iter().zip(&yn) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv3_large_span_crosses_chunks() {
        let dims = [14, 15, 16];
        let (ci, co) = (2, 3);
        let v: usize = dims.iter().product();
        assert!(PadGeom::new(dims).span() > 2 * CHUNK);
        let x = rand_vec(ci * v, 3);
        let w = rand_vec(co * ci * 27, 4);
        let y = conv3_forward(&x, ci, dims, &w, None, co);
        let yn = conv3_naive(&x, ci, dims, &w, co);
        for (a, b) in y.iter().zip(&yn) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn simd_paths_agree_with_generic() {
        if !simd::available() {
            return;
        }
        let dims = [12, 9, 20];
        let (ci, co) = (5, 16);
        let v: usize = dims.iter().product();
        let x: Vec<f32> = rand_vec(ci * v, 5).iter().map(|&a| a as f32).collect();
        let w: Vec<f32> = rand_vec(co * ci * 27, 6).iter().map(|&a| a as f32).collect();
        let fast = conv3_forward_impl(&x, ci, dims, &w, None, co, true);
        let slow = conv3_forward_impl(&x, ci, dims, &w, None, co, false);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
        let dy: Vec<f32> = rand_vec(co * v, 7).iter().map(|&a| a as f32).collect();
        let mut dw1 = vec![0f32; co * ci * 27];
        let mut dw2 = vec![0f32; co * ci * 27];
        conv3_backward_weights_impl(&x, ci, dims, &dy, co, &mut dw1, None, true);
        conv3_backward_weights_impl(&x, ci, dims, &dy, co, &mut dw2, None, false);
        for (a, b) in dw1.iter().zip(&dw2) {
            assert!((a - b).abs() < 1e-3 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Adjoint identity ⟨A x, y⟩ = ⟨x, Aᵀ y⟩ for each linear kernel.
    #[test]
    fn backward_passes_are_adjoints() {
        // dense and padded-grid paths
        adjoints_at([4, 4, 4]);
        adjoints_at([8, 10, 8]);
    }

    fn adjoints_at(dims: [usize; 3]) {
        let (ci, co) = (3, 2);
        let v: usize = dims.iter().product();
        let x = rand_vec(ci * v, 10);
        let w = rand_vec(co * ci * 27, 11);
        let dy = rand_vec(co * v, 12);
        let y = conv3_forward(&x, ci, dims, &w, None, co);
        let dx = conv3_backward_data(&dy, co, dims, &w, ci);
        assert!((dot(&y, &dy) - dot(&x, &dx)).abs() < 1e-10);
        // weights: ⟨conv(x; W), dy⟩ is linear in W with gradient dW
        let mut dw = vec![0.0; w.len()];
        conv3_backward_weights(&x, ci, dims, &dy, co, &mut dw, None);
        assert!((dot(&y, &dy) - dot(&w, &dw)).abs() < 1e-10);

        let wd = rand_vec(co * ci * 8, 13);
        let bz = vec![0.0; co];
        let yd = down_forward(&x, ci, dims, &wd, &bz, co);
        let dyd = rand_vec(yd.len(), 14);
        let mut dwd = vec![0.0; wd.len()];
        let mut dbd = vec![0.0; co];
        let dxd = down_backward(&x, ci, dims, &wd, co, &dyd, &mut dwd, &mut dbd);
        assert!((dot(&yd, &dyd) - dot(&x, &dxd)).abs() < 1e-10);
        assert!((dot(&yd, &dyd) - dot(&wd, &dwd)).abs() < 1e-10);
        assert!((dbd.iter().sum::<f64>() - dyd.iter().sum::<f64>()).abs() < 1e-10);

        let wu = rand_vec(ci * co * 8, 15);
        let yu = up_forward(&x, ci, dims, &wu, &bz, co);
        assert_eq!(yu.len(), co * v * 8);
        let dyu = rand_vec(yu.len(), 16);
        let mut dwu = vec![0.0; wu.len()];
        let mut dbu = vec![0.0; co];
        let dxu = up_backward(&x, ci, dims, &wu, co, &dyu, &mut dwu, &mut dbu);
        assert!((dot(&yu, &dyu) - dot(&x, &dxu)).abs() < 1e-10);
        assert!((dot(&yu, &dyu) - dot(&wu, &dwu)).abs() < 1e-10);
    }

    #[test]
    fn up_then_down_block_structure() {
        // a transposed conv with a one-hot kernel scatters each voxel to one tap
        let dims = [2, 2, 2];
        let x: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let mut w = vec![0.0; 8];
        w[7] = 1.0; // tap (1,1,1)
        let y = up_forward(&x, 1, dims, &w, &[0.0], 1);
        assert_eq!(y[(1 * 4 + 1) * 4 + 1], 0.0 + x[0]);
        assert_eq!(y[(3 * 4 + 3) * 4 + 3], x[7]);
        assert_eq!(y.iter().filter(|&&v| v != 0.0).count(), 7);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert!(sigmoid(800.0f64) <= 1.0);
    }
}
