//! NIfTI-1 reading and writing for volumes and masks.
//!
//! Single-file `.nii` / `.nii.gz` only. Byte order is detected from `dim[0]`
//! (a valid header has `1 <= dim[0] <= 7`); gzip is detected from the stream
//! magic on read and chosen by the `.gz` extension on write.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::types::{voxel_count, Affine, Dims, LabelMask, Volume3D};

pub const HEADER_SIZE: usize = 348;
pub const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
pub const MAGIC_PAIR: &[u8; 4] = b"ni1\0";
const DEFAULT_VOX_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_INT32: i16 = 8;
pub const DT_FLOAT32: i16 = 16;
pub const DT_FLOAT64: i16 = 64;
pub const DT_INT8: i16 = 256;
pub const DT_UINT16: i16 = 512;
pub const DT_UINT32: i16 = 768;
pub const DT_INT64: i16 = 1024;
pub const DT_UINT64: i16 = 1280;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

/// The header fields this crate consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeaderView {
    pub endian: Endian,
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
    pub magic: [u8; 4],
}

fn bytes_per_voxel(datatype: i16) -> Result<usize> {
    Ok(match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 | DT_INT64 | DT_UINT64 => 8,
        other => return Err(Error::UnsupportedDatatype(other)),
    })
}

struct Reader<'a> {
    buf: &'a [u8],
    endian: Endian,
}

impl Reader<'_> {
    fn i16(&self, off: usize) -> i16 {
        match self.endian {
            Endian::Little => LittleEndian::read_i16(&self.buf[off..]),
            Endian::Big => BigEndian::read_i16(&self.buf[off..]),
        }
    }
    fn i32(&self, off: usize) -> i32 {
        match self.endian {
            Endian::Little => LittleEndian::read_i32(&self.buf[off..]),
            Endian::Big => BigEndian::read_i32(&self.buf[off..]),
        }
    }
    fn f32(&self, off: usize) -> f32 {
        match self.endian {
            Endian::Little => LittleEndian::read_f32(&self.buf[off..]),
            Endian::Big => BigEndian::read_f32(&self.buf[off..]),
        }
    }
}

impl NiftiHeaderView {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_SIZE {
            return Err(Error::Format(format!(
                "file is {} bytes, shorter than the {HEADER_SIZE}-byte header",
                bytes.len()
            )));
        }
        let dim0_le = LittleEndian::read_i16(&bytes[40..]);
        let dim0_be = BigEndian::read_i16(&bytes[40..]);
        let endian = if (1..=7).contains(&dim0_le) {
            Endian::Little
        } else if (1..=7).contains(&dim0_be) {
            Endian::Big
        } else {
            return Err(Error::Format(format!(
                "dim[0] = {dim0_le} is not in 1..=7 in either byte order"
            )));
        };
        let r = Reader { buf: bytes, endian };
        let sizeof_hdr = r.i32(0);
        if sizeof_hdr != HEADER_SIZE as i32 {
            return Err(Error::Format(format!(
                "header size field is {sizeof_hdr}, expected {HEADER_SIZE}"
            )));
        }
        let mut magic = [0u8; 4];
        magic.copy_from_slice(&bytes[344..348]);
        if &magic != MAGIC_SINGLE && &magic != MAGIC_PAIR {
            return Err(Error::Format(format!("bad magic bytes {magic:?}")));
        }
        let mut dim = [0i16; 8];
        for (i, d) in dim.iter_mut().enumerate() {
            *d = r.i16(40 + 2 * i);
        }
        let mut pixdim = [0f32; 8];
        for (i, p) in pixdim.iter_mut().enumerate() {
            *p = r.f32(76 + 4 * i);
        }
        let mut srow = [[0f32; 4]; 3];
        for (row, s) in srow.iter_mut().enumerate() {
            for (col, v) in s.iter_mut().enumerate() {
                *v = r.f32(280 + 16 * row + 4 * col);
            }
        }
        Ok(NiftiHeaderView {
            endian,
            dim,
            datatype: r.i16(70),
            bitpix: r.i16(72),
            pixdim,
            vox_offset: r.f32(108),
            scl_slope: r.f32(112),
            scl_inter: r.f32(116),
            qform_code: r.i16(252),
            sform_code: r.i16(254),
            quatern: [r.f32(256), r.f32(260), r.f32(264)],
            qoffset: [r.f32(268), r.f32(272), r.f32(276)],
            srow,
            magic,
        })
    }

    /// Spatial dimensions; 4D+ files are accepted only with singleton extras.
    pub fn dims(&self) -> Result<Dims> {
        let ndim = self.dim[0] as usize;
        let mut dims = [1usize; 3];
        for i in 0..ndim.min(3) {
            let d = self.dim[i + 1];
            if d < 1 {
                return Err(Error::Format(format!("dim[{}] = {d} must be >= 1", i + 1)));
            }
            dims[i] = d as usize;
        }
        if ndim > 3 {
            let extra = &self.dim[4..=ndim];
            if extra.iter().any(|&d| d != 1) {
                return Err(Error::Format(format!(
                    "{ndim}-dimensional image with non-singleton extra dims {extra:?}"
                )));
            }
        }
        Ok(dims)
    }

    pub fn spacing(&self) -> [f32; 3] {
        let mut s = [1.0f32; 3];
        for (i, v) in s.iter_mut().enumerate() {
            let p = self.pixdim[i + 1].abs();
            if p > 0.0 && p.is_finite() {
                *v = p;
            }
        }
        s
    }

    /// Voxel-to-world transform: sform when present, else qform, else scaling.
    pub fn affine(&self) -> Affine {
        if self.sform_code > 0 {
            let mut a = [[0f32; 4]; 4];
            a[..3].copy_from_slice(&self.srow);
            a[3] = [0.0, 0.0, 0.0, 1.0];
            return a;
        }
        let s = self.spacing();
        if self.qform_code > 0 {
            let [b, c, d] = self.quatern.map(f64::from);
            let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
            let r = [
                [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
                [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
                [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
            ];
            let qfac = if self.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
            let scale = [f64::from(s[0]), f64::from(s[1]), f64::from(s[2]) * qfac];
            let mut out = [[0f32; 4]; 4];
            for i in 0..3 {
                for j in 0..3 {
                    out[i][j] = (r[i][j] * scale[j]) as f32;
                }
                out[i][3] = self.qoffset[i];
            }
            out[3] = [0.0, 0.0, 0.0, 1.0];
            return out;
        }
        [
            [s[0], 0.0, 0.0, 0.0],
            [0.0, s[1], 0.0, 0.0],
            [0.0, 0.0, s[2], 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    /// `(slope, intercept)`, with the NIfTI rule that slope 0 means "unscaled".
    pub fn scaling(&self) -> (f64, f64) {
        if self.scl_slope == 0.0 || !self.scl_slope.is_finite() {
            (1.0, 0.0)
        } else {
            let inter = if self.scl_inter.is_finite() { self.scl_inter } else { 0.0 };
            (f64::from(self.scl_slope), f64::from(inter))
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Decoded raw voxel values (before slope/intercept), as f64.
fn decode_voxels(hdr: &NiftiHeaderView, bytes: &[u8], n: usize) -> Result<Vec<f64>> {
    let bpv = bytes_per_voxel(hdr.datatype)?;
    let offset = if hdr.vox_offset >= HEADER_SIZE as f32 {
        hdr.vox_offset as usize
    } else {
        DEFAULT_VOX_OFFSET
    };
    let need = n * bpv;
    let avail = bytes.len().saturating_sub(offset);
    if avail < need {
        return Err(Error::Truncated {
            expected: need,
            found: avail,
        });
    }
    let payload = &bytes[offset..offset + need];
    macro_rules! decode {
        ($read:ident) => {
            match hdr.endian {
                Endian::Little => payload.chunks_exact(bpv).map(|c| LittleEndian::$read(c) as f64).collect(),
                Endian::Big => payload.chunks_exact(bpv).map(|c| BigEndian::$read(c) as f64).collect(),
            }
        };
    }
    Ok(match hdr.datatype {
        DT_UINT8 => payload.iter().map(|&b| f64::from(b)).collect(),
        DT_INT8 => payload.iter().map(|&b| f64::from(b as i8)).collect(),
        DT_INT16 => decode!(read_i16),
        DT_UINT16 => decode!(read_u16),
        DT_INT32 => decode!(read_i32),
        DT_UINT32 => decode!(read_u32),
        DT_INT64 => decode!(read_i64),
        DT_UINT64 => decode!(read_u64),
        DT_FLOAT32 => decode!(read_f32),
        DT_FLOAT64 => decode!(read_f64),
        other => return Err(Error::UnsupportedDatatype(other)),
    })
}

fn load(path: &Path) -> Result<(NiftiHeaderView, Vec<f64>)> {
    let bytes = read_bytes(path)?;
    let hdr = NiftiHeaderView::parse(&bytes)?;
    let dims = hdr.dims()?;
    let raw = decode_voxels(&hdr, &bytes, voxel_count(dims))?;
    Ok((hdr, raw))
}

/// Reads a scalar volume, applying `scl_slope`/`scl_inter`.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let (hdr, raw) = load(path)?;
    let (slope, inter) = hdr.scaling();
    let data = if hdr.datatype == DT_FLOAT32 && slope == 1.0 && inter == 0.0 {
        raw.into_iter().map(|v| v as f32).collect()
    } else {
        raw.into_iter().map(|v| (slope * v + inter) as f32).collect()
    };
    Volume3D::new(hdr.dims()?, data, hdr.spacing(), hdr.affine())
}

/// Reads a mask; any nonzero (scaled) voxel becomes 1.
pub fn read_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    let path = path.as_ref();
    let (hdr, raw) = load(path)?;
    let (slope, inter) = hdr.scaling();
    let data = raw
        .into_iter()
        .map(|v| u8::from(slope * v + inter != 0.0))
        .collect();
    LabelMask::new(hdr.dims()?, data, hdr.spacing(), hdr.affine())
}

/// Builds a single-file header for the given grid and datatype.
pub fn build_header(dims: Dims, spacing: [f32; 3], affine: &Affine, datatype: i16) -> Result<Vec<u8>> {
    let bpv = bytes_per_voxel(datatype)?;
    let mut h = vec![0u8; DEFAULT_VOX_OFFSET];
    LittleEndian::write_i32(&mut h[0..], HEADER_SIZE as i32);
    h[38] = b'r';
    let dim: [i16; 8] = [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    if dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::Format(format!("dims {dims:?} exceed the NIfTI-1 limit")));
    }
    for (i, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut h[40 + 2 * i..], *d);
    }
    LittleEndian::write_i16(&mut h[70..], datatype);
    LittleEndian::write_i16(&mut h[72..], (bpv * 8) as i16);
    let pixdim = [1.0, spacing[0], spacing[1], spacing[2], 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * i..], *p);
    }
    LittleEndian::write_f32(&mut h[108..], DEFAULT_VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..], 1.0);
    LittleEndian::write_f32(&mut h[116..], 0.0);
    h[123] = 2; // mm
    LittleEndian::write_i16(&mut h[252..], 0);
    LittleEndian::write_i16(&mut h[254..], 1);
    for row in 0..3 {
        for col in 0..4 {
            LittleEndian::write_f32(&mut h[280 + 16 * row + 4 * col..], affine[row][col]);
        }
    }
    h[344..348].copy_from_slice(MAGIC_SINGLE);
    Ok(h)
}

fn write_bytes(path: &Path, header: &[u8], payload: &[u8]) -> Result<()> {
    let gz = path
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with(".gz"));
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let res = if gz {
        let mut enc = GzEncoder::new(file, Compression::fast());
        enc.write_all(header)
            .and_then(|_| enc.write_all(payload))
            .and_then(|_| enc.finish().map(|_| ()))
    } else {
        let mut w = std::io::BufWriter::new(file);
        w.write_all(header)
            .and_then(|_| w.write_all(payload))
            .and_then(|_| w.flush())
    };
    res.map_err(|e| Error::io(path, e))
}

/// Writes a float32 volume (slope 1, intercept 0); gzipped for `.gz` paths.
pub fn write_volume(vol: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let header = build_header(vol.dims(), vol.spacing(), vol.affine(), DT_FLOAT32)?;
    let mut payload = vec![0u8; vol.data().len() * 4];
    LittleEndian::write_f32_into(vol.data(), &mut payload);
    write_bytes(path.as_ref(), &header, &payload)
}

/// Writes a mask as uint8.
pub fn write_mask(mask: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    let header = build_header(mask.dims(), mask.spacing(), mask.affine(), DT_UINT8)?;
    write_bytes(path.as_ref(), &header, mask.data())
}
