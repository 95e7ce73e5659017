//! Minimal single-file NIfTI-1 (`.nii`) reader and writer.
//!
//! Only the header fields needed for 3D scalar volumes are interpreted:
//! `sizeof_hdr`, `dim`, `datatype`, `bitpix`, `pixdim`, `vox_offset`,
//! `scl_slope`, `scl_inter` and `magic`. Everything else is written as zero.

use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};

use crate::error::{Error, Result};
use crate::volume::{offset, voxel_count, Dims, RawVolume};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;

const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_XYZT_UNITS: usize = 123;
const OFF_MAGIC: usize = 344;

/// NIfTI-1 datatype codes accepted by the reader.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    Uint8,
    Int8,
    Int16,
    Uint16,
    Float32,
    Float64,
}

impl Datatype {
    pub fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => Datatype::Uint8,
            256 => Datatype::Int8,
            4 => Datatype::Int16,
            512 => Datatype::Uint16,
            16 => Datatype::Float32,
            64 => Datatype::Float64,
            other => return Err(Error::UnsupportedDatatype(other)),
        })
    }

    pub fn code(self) -> i16 {
        match self {
            Datatype::Uint8 => 2,
            Datatype::Int8 => 256,
            Datatype::Int16 => 4,
            Datatype::Uint16 => 512,
            Datatype::Float32 => 16,
            Datatype::Float64 => 64,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Datatype::Uint8 | Datatype::Int8 => 1,
            Datatype::Int16 | Datatype::Uint16 => 2,
            Datatype::Float32 => 4,
            Datatype::Float64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Header {
    dims: Dims,
    spacing: [f64; 3],
    datatype: Datatype,
    vox_offset: usize,
    slope: f64,
    inter: f64,
}

fn parse_header<B: ByteOrder>(h: &[u8]) -> Result<Header> {
    if &h[OFF_MAGIC..OFF_MAGIC + 4] != b"n+1\0" {
        return Err(Error::Format(format!(
            "bad magic {:?} (only single-file n+1 is supported)",
            String::from_utf8_lossy(&h[OFF_MAGIC..OFF_MAGIC + 3])
        )));
    }
    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = B::read_i16(&h[OFF_DIM + 2 * i..]);
    }
    let ndim = dim[0];
    if !(3..=7).contains(&ndim) || dim[4..=ndim as usize].iter().any(|&d| d != 1) {
        return Err(Error::UnsupportedShape(format!(
            "expected a 3D image, header dim = {dim:?}"
        )));
    }
    if dim[1..4].iter().any(|&d| d < 1) {
        return Err(Error::UnsupportedShape(format!("non-positive extent in dim = {dim:?}")));
    }
    let datatype = Datatype::from_code(B::read_i16(&h[OFF_DATATYPE..]))?;
    let mut spacing = [1.0; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        let p = f64::from(B::read_f32(&h[OFF_PIXDIM + 4 * (i + 1)..])).abs();
        // pixdim of 0 is common in hand-made files; treat as unit spacing
        *s = if p > 0.0 && p.is_finite() { p } else { 1.0 };
    }
    let vox_offset = B::read_f32(&h[OFF_VOX_OFFSET..]);
    if !(vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(Error::Format(format!("invalid vox_offset {vox_offset}")));
    }
    let slope = f64::from(B::read_f32(&h[OFF_SCL_SLOPE..]));
    let inter = f64::from(B::read_f32(&h[OFF_SCL_INTER..]));
    Ok(Header {
        dims: [dim[1] as usize, dim[2] as usize, dim[3] as usize],
        spacing,
        datatype,
        vox_offset: vox_offset as usize,
        slope,
        inter,
    })
}

fn decode_body<B: ByteOrder>(h: &Header, body: &[u8]) -> Vec<f64> {
    let n = voxel_count(h.dims);
    let sz = h.datatype.size();
    let raw = |i: usize| -> f64 {
        let b = &body[i * sz..];
        match h.datatype {
            Datatype::Uint8 => f64::from(b[0]),
            Datatype::Int8 => f64::from(b[0] as i8),
            Datatype::Int16 => f64::from(B::read_i16(b)),
            Datatype::Uint16 => f64::from(B::read_u16(b)),
            Datatype::Float32 => f64::from(B::read_f32(b)),
            Datatype::Float64 => B::read_f64(b),
        }
    };
    let scale = h.slope != 0.0 && h.slope.is_finite() && !(h.slope == 1.0 && h.inter == 0.0);
    let [nx, ny, nz] = h.dims;
    let mut out = vec![0.0; n];
    // file order is x fastest; memory order is z fastest
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let v = raw(x + nx * (y + ny * z));
                out[offset(h.dims, x, y, z)] = if scale { v * h.slope + h.inter } else { v };
            }
        }
    }
    out
}

/// Parse a NIfTI-1 image held in memory.
pub fn decode(bytes: &[u8], modality: &str) -> Result<RawVolume> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Format(format!(
            "file too short for a NIfTI-1 header ({} bytes)",
            bytes.len()
        )));
    }
    let hdr = &bytes[..HEADER_SIZE];
    let (header, little) = if LittleEndian::read_i32(hdr) == HEADER_SIZE as i32 {
        (parse_header::<LittleEndian>(hdr)?, true)
    } else if BigEndian::read_i32(hdr) == HEADER_SIZE as i32 {
        (parse_header::<BigEndian>(hdr)?, false)
    } else {
        return Err(Error::Format("sizeof_hdr is not 348 in either byte order".into()));
    };
    let needed = voxel_count(header.dims) * header.datatype.size();
    let body = bytes.get(header.vox_offset..).unwrap_or(&[]);
    if body.len() < needed {
        return Err(Error::io(
            modality,
            std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                format!("data section truncated: {} of {needed} bytes", body.len()),
            ),
        ));
    }
    let voxels = if little {
        decode_body::<LittleEndian>(&header, body)
    } else {
        decode_body::<BigEndian>(&header, body)
    };
    RawVolume::new(header.dims, header.spacing, voxels, modality)
}

/// Encode a volume as little-endian float32 NIfTI-1 with `vox_offset = 352`.
pub fn encode(v: &RawVolume) -> Result<Vec<u8>> {
    if v.dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::UnsupportedShape(format!("dims {:?} exceed i16", v.dims)));
    }
    let n = voxel_count(v.dims);
    let mut buf = vec![0u8; VOX_OFFSET + 4 * n];
    let h = &mut buf[..HEADER_SIZE];
    LittleEndian::write_i32(&mut h[0..], HEADER_SIZE as i32);
    let dim: [i16; 8] = [3, v.dims[0] as i16, v.dims[1] as i16, v.dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut h[OFF_DIM + 2 * i..], *d);
    }
    LittleEndian::write_i16(&mut h[OFF_DATATYPE..], Datatype::Float32.code());
    LittleEndian::write_i16(&mut h[OFF_BITPIX..], 32);
    let pixdim = [1.0f32, v.spacing[0] as f32, v.spacing[1] as f32, v.spacing[2] as f32, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[OFF_PIXDIM + 4 * i..], *p);
    }
    LittleEndian::write_f32(&mut h[OFF_VOX_OFFSET..], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[OFF_SCL_SLOPE..], 1.0);
    LittleEndian::write_f32(&mut h[OFF_SCL_INTER..], 0.0);
    h[OFF_XYZT_UNITS] = 2; // mm
    h[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(b"n+1\0");

    let [nx, ny, nz] = v.dims;
    let body = &mut buf[VOX_OFFSET..];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                LittleEndian::write_f32(&mut body[4 * i..], v.voxels[offset(v.dims, x, y, z)] as f32);
            }
        }
    }
    Ok(buf)
}

pub fn read_volume(path: impl AsRef<Path>, modality: &str) -> Result<RawVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, modality).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn write_volume(v: &RawVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(v)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hand-assembled fixture: 4x4x4 float32 little-endian, body = 0..64 * 0.5.
    fn fixture() -> (Vec<u8>, Vec<f32>) {
        let body: Vec<f32> = (0..64).map(|i| i as f32 * 0.5 - 3.0).collect();
        let mut b = vec![0u8; 352 + 256];
        b[0..4].copy_from_slice(&348i32.to_le_bytes());
        for (i, d) in [3i16, 4, 4, 4, 1, 1, 1, 1].iter().enumerate() {
            b[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        b[70..72].copy_from_slice(&16i16.to_le_bytes());
        b[72..74].copy_from_slice(&32i16.to_le_bytes());
        for (i, p) in [1.0f32, 1.5, 2.0, 2.5].iter().enumerate() {
            b[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
        }
        b[108..112].copy_from_slice(&352f32.to_le_bytes());
        b[344..348].copy_from_slice(b"n+1\0");
        for (i, v) in body.iter().enumerate() {
            b[352 + 4 * i..356 + 4 * i].copy_from_slice(&v.to_le_bytes());
        }
        (b, body)
    }

    fn byte_swapped(le: &[u8]) -> Vec<u8> {
        let mut b = le.to_vec();
        let swap = |b: &mut [u8], at: usize, n: usize| b[at..at + n].reverse();
        swap(&mut b, 0, 4);
        for i in 0..8 {
            swap(&mut b, 40 + 2 * i, 2);
        }
        swap(&mut b, 70, 2);
        swap(&mut b, 72, 2);
        for i in 0..8 {
            swap(&mut b, 76 + 4 * i, 4);
        }
        swap(&mut b, 108, 4);
        swap(&mut b, 112, 4);
        swap(&mut b, 116, 4);
        for i in 0..64 {
            swap(&mut b, 352 + 4 * i, 4);
        }
        b
    }

    #[test]
    fn reads_crafted_float32_fixture() {
        let (bytes, body) = fixture();
        let v = decode(&bytes, "t1").unwrap();
        assert_eq!(v.dims, [4, 4, 4]);
        assert_eq!(v.spacing, [1.5, 2.0, 2.5]);
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    let want = body[x + 4 * y + 16 * z];
                    assert_eq!(v.get(x, y, z).to_bits(), f64::from(want).to_bits());
                }
            }
        }
    }

    #[test]
    fn big_endian_copy_reads_identically() {
        let (bytes, _) = fixture();
        let swapped = byte_swapped(&bytes);
        assert_ne!(swapped[0..4], bytes[0..4]);
        assert_eq!(decode(&swapped, "t1").unwrap(), decode(&bytes, "t1").unwrap());
    }

    #[test]
    fn rejects_bad_magic() {
        let (mut bytes, _) = fixture();
        bytes[344..348].copy_from_slice(b"xxx\0");
        assert!(matches!(decode(&bytes, "t1"), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_4d_and_unknown_datatype() {
        let (mut bytes, _) = fixture();
        bytes[40..42].copy_from_slice(&4i16.to_le_bytes());
        bytes[48..50].copy_from_slice(&2i16.to_le_bytes());
        assert!(matches!(decode(&bytes, "t1"), Err(Error::UnsupportedShape(_))));

        let (mut bytes, _) = fixture();
        bytes[70..72].copy_from_slice(&128i16.to_le_bytes()); // RGB24
        assert!(matches!(decode(&bytes, "t1"), Err(Error::UnsupportedDatatype(128))));
    }

    #[test]
    fn truncated_body_is_io_error() {
        let (bytes, _) = fixture();
        assert!(matches!(decode(&bytes[..400], "t1"), Err(Error::Io { .. })));
    }

    #[test]
    fn int16_with_scaling() {
        let (mut bytes, _) = fixture();
        bytes[70..72].copy_from_slice(&4i16.to_le_bytes());
        bytes[72..74].copy_from_slice(&16i16.to_le_bytes());
        bytes[112..116].copy_from_slice(&2.0f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&(-1.0f32).to_le_bytes());
        for i in 0..64i16 {
            let at = 352 + 2 * i as usize;
            bytes[at..at + 2].copy_from_slice(&(i - 10).to_le_bytes());
        }
        let v = decode(&bytes, "t1").unwrap();
        assert_eq!(v.get(1, 0, 0), ((1 - 10) as f64) * 2.0 - 1.0);
        assert_eq!(v.get(0, 0, 1), ((16 - 10) as f64) * 2.0 - 1.0);
    }

    #[test]
    fn singleton_volume_byte_accounting() {
        let v = RawVolume::new([1, 1, 1], [1.0; 3], vec![0.0], "t1").unwrap();
        assert_eq!(encode(&v).unwrap().len(), 348 + 4 + 4);
    }
}
