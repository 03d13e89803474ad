//! Minimal NIfTI-1 single-file (`.nii` / `.nii.gz`) reader and writer.
//!
//! Only the parts of the format this crate needs are interpreted: the grid
//! dimensions, voxel spacing, the spatial transform, the scaling pair, the
//! description string and the common scalar datatypes. Extensions are
//! skipped on read and never written.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::{Error, Result};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;
const DT_UINT32: i16 = 768;

/// Decoded contents of a NIfTI-1 file.
///
/// `values` are stored x-fastest, which is the on-disk NIfTI order.
#[derive(Debug, Clone)]
pub struct NiftiData {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub affine: [[f64; 4]; 4],
    pub descrip: String,
    pub datatype: i16,
    pub values: Vec<f64>,
}

/// Voxel payload for [`write`].
pub enum Payload<'a> {
    U8(&'a [u8]),
    F32(&'a [f32]),
}

impl Payload<'_> {
    fn len(&self) -> usize {
        match self {
            Payload::U8(v) => v.len(),
            Payload::F32(v) => v.len(),
        }
    }
}

pub fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

pub fn read_file(path: &Path) -> Result<NiftiData> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Decode a NIfTI-1 byte stream, gzip-compressed or not.
pub fn decode(bytes: &[u8]) -> Result<NiftiData> {
    if is_gzip(bytes) {
        let mut raw = Vec::with_capacity(bytes.len() * 4);
        MultiGzDecoder::new(bytes)
            .read_to_end(&mut raw)
            .map_err(|e| Error::Nifti(format!("gzip stream: {e}")))?;
        decode_raw(&raw)
    } else {
        decode_raw(bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn arr<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut out = [0u8; N];
        out.copy_from_slice(&self.bytes[at..at + N]);
        if self.big_endian {
            out.reverse();
        }
        out
    }
    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.arr(at))
    }
    fn i32(&self, at: usize) -> i32 {
        i32::from_le_bytes(self.arr(at))
    }
    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.arr(at))
    }
}

fn decode_raw(bytes: &[u8]) -> Result<NiftiData> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Nifti(format!(
            "{} bytes is shorter than a NIfTI-1 header",
            bytes.len()
        )));
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let big_endian = match (le, be) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err(Error::Nifti(format!("bad sizeof_hdr {le}"))),
    };
    let r = Reader { bytes, big_endian };
    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err(Error::Nifti(format!(
            "unsupported magic {:?} (only single-file NIfTI-1 is read)",
            String::from_utf8_lossy(magic)
        )));
    }

    let ndim = r.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Nifti(format!("dim[0] = {ndim}")));
    }
    let ndim = ndim as usize;
    let raw_dims: Vec<i16> = (1..=ndim).map(|i| r.i16(40 + 2 * i)).collect();
    // Trailing singleton dimensions (e.g. a 4D file with one frame) are allowed.
    let effective = raw_dims.iter().rposition(|&d| d > 1).map_or(1, |p| p + 1);
    if ndim < 3 || effective > 3 {
        return Err(Error::Dimensionality(if ndim < 3 { ndim } else { effective }));
    }
    if raw_dims.iter().any(|&d| d < 1) {
        return Err(Error::Nifti(format!("non-positive dimension in {raw_dims:?}")));
    }
    let dims = [raw_dims[0] as usize, raw_dims[1] as usize, raw_dims[2] as usize];

    let datatype = r.i16(70);
    let pixdim = [r.f32(80), r.f32(84), r.f32(88)];
    let spacing = pixdim.map(|p| if p > 0.0 && p.is_finite() { p } else { 1.0 });
    let vox_offset = r.f32(108);
    if !(vox_offset >= HEADER_SIZE as f32) {
        return Err(Error::Nifti(format!("vox_offset {vox_offset}")));
    }
    let vox_offset = vox_offset as usize;
    let slope = r.f32(112);
    let inter = r.f32(116);
    let descrip = {
        let raw = &bytes[148..228];
        let end = raw.iter().position(|&b| b == 0).unwrap_or(raw.len());
        String::from_utf8_lossy(&raw[..end]).into_owned()
    };

    let affine = if r.i16(254) > 0 {
        let mut a = [[0.0; 4]; 4];
        for (row, base) in [280usize, 296, 312].iter().enumerate() {
            for (col, cell) in a[row].iter_mut().enumerate() {
                *cell = r.f32(base + 4 * col) as f64;
            }
        }
        a[3][3] = 1.0;
        a
    } else if r.i16(252) > 0 {
        let qfac = if r.f32(76) < 0.0 { -1.0 } else { 1.0 };
        quatern_to_affine(
            [r.f32(256), r.f32(260), r.f32(264)].map(f64::from),
            [r.f32(268), r.f32(272), r.f32(276)].map(f64::from),
            spacing.map(f64::from),
            qfac,
        )
    } else {
        scale_affine(spacing)
    };

    let count = dims.iter().product::<usize>();
    let elem = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(Error::Nifti(format!("unsupported datatype code {other}"))),
    };
    let end = vox_offset + count * elem;
    if bytes.len() < end {
        return Err(Error::Nifti(format!(
            "truncated payload: need {end} bytes, have {}",
            bytes.len()
        )));
    }
    let payload = Reader {
        bytes: &bytes[vox_offset..end],
        big_endian,
    };
    let mut values: Vec<f64> = (0..count)
        .map(|i| match datatype {
            DT_UINT8 => payload.bytes[i] as f64,
            DT_INT8 => payload.bytes[i] as i8 as f64,
            DT_INT16 => payload.i16(2 * i) as f64,
            DT_UINT16 => u16::from_le_bytes(payload.arr(2 * i)) as f64,
            DT_INT32 => payload.i32(4 * i) as f64,
            DT_UINT32 => u32::from_le_bytes(payload.arr(4 * i)) as f64,
            DT_FLOAT32 => payload.f32(4 * i) as f64,
            _ => f64::from_le_bytes(payload.arr(8 * i)),
        })
        .collect();
    if slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0) {
        let (s, b) = (slope as f64, inter as f64);
        values.iter_mut().for_each(|v| *v = *v * s + b);
    }

    Ok(NiftiData {
        dims,
        spacing,
        affine,
        descrip,
        datatype,
        values,
    })
}

pub fn scale_affine(spacing: [f32; 3]) -> [[f64; 4]; 4] {
    let mut a = [[0.0; 4]; 4];
    for i in 0..3 {
        a[i][i] = spacing[i] as f64;
    }
    a[3][3] = 1.0;
    a
}

fn quatern_to_affine(bcd: [f64; 3], offset: [f64; 3], pix: [f64; 3], qfac: f64) -> [[f64; 4]; 4] {
    let [b, c, d] = bcd;
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let rot = [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ];
    let scale = [pix[0], pix[1], pix[2] * qfac];
    let mut out = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = rot[i][j] * scale[j];
        }
        out[i][3] = offset[i];
    }
    out[3][3] = 1.0;
    out
}

/// Encode a 3D grid (values x-fastest) as a NIfTI-1 byte stream.
pub fn encode(
    dims: [usize; 3],
    spacing: [f32; 3],
    affine: &[[f64; 4]; 4],
    descrip: &str,
    payload: Payload<'_>,
) -> Result<Vec<u8>> {
    let count: usize = dims.iter().product();
    if payload.len() != count {
        return Err(Error::ShapeMismatch {
            expected: vec![count],
            found: vec![payload.len()],
        });
    }
    if dims.iter().any(|&d| d == 0 || d > i16::MAX as usize) {
        return Err(Error::Nifti(format!("dimensions {dims:?} not representable")));
    }
    let (datatype, bitpix) = match payload {
        Payload::U8(_) => (DT_UINT8, 8i16),
        Payload::F32(_) => (DT_FLOAT32, 32i16),
    };

    let mut h = vec![0u8; DATA_OFFSET];
    let mut put = |at: usize, b: &[u8]| h[at..at + b.len()].copy_from_slice(b);
    put(0, &348i32.to_le_bytes());
    put(38, b"r");
    let dim: [i16; 8] = [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        put(40 + 2 * i, &d.to_le_bytes());
    }
    put(70, &datatype.to_le_bytes());
    put(72, &bitpix.to_le_bytes());
    let pixdim: [f32; 8] = [1.0, spacing[0], spacing[1], spacing[2], 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        put(76 + 4 * i, &p.to_le_bytes());
    }
    put(108, &(DATA_OFFSET as f32).to_le_bytes());
    put(112, &1.0f32.to_le_bytes());
    put(123, &[2u8]); // NIFTI_UNITS_MM
    let text = descrip.as_bytes();
    put(148, &text[..text.len().min(79)]);
    put(254, &1i16.to_le_bytes()); // sform_code: scanner anatomical
    for (row, base) in [280usize, 296, 312].iter().enumerate() {
        for col in 0..4 {
            put(base + 4 * col, &(affine[row][col] as f32).to_le_bytes());
        }
    }
    put(344, b"n+1\0");

    let mut out = h;
    out.reserve(count * (bitpix as usize / 8));
    match payload {
        Payload::U8(v) => out.extend_from_slice(v),
        Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(out)
}

/// Write encoded bytes, gzip-compressing when the path ends in `.gz`.
///
/// The file is written to a sibling temporary and renamed into place so
/// readers never observe a partial file.
pub fn write_file(path: &Path, raw: &[u8]) -> Result<()> {
    let gz = path
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with(".gz"));
    let bytes = if gz { gzip(raw)? } else { raw.to_vec() };
    atomic_write(path, &bytes)
}

pub fn gzip(raw: &[u8]) -> Result<Vec<u8>> {
    let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
    enc.write_all(raw)
        .and_then(|_| enc.finish())
        .map_err(|e| Error::Nifti(format!("gzip: {e}")))
}

pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let write = || -> std::io::Result<()> {
        let mut f = BufWriter::new(File::create(&tmp)?);
        f.write_all(bytes)?;
        f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
