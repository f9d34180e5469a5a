//! Single-file NIfTI-1 reader and writer for a deliberately small subset:
//! little-endian, magic `n+1\0`, 3D only, datatypes uint8 / int16 / float32,
//! `vox_offset` 352, no compression. Orientation information beyond voxel
//! spacing and origin is ignored.

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use crate::error::{Error, Result};
use crate::volume::{Mask, Volume};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

// Header field byte offsets (NIfTI-1).
mod off {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const QFORM_CODE: usize = 252;
    pub const QOFFSET_X: usize = 268;
    pub const QOFFSET_Y: usize = 272;
    pub const QOFFSET_Z: usize = 276;
    pub const MAGIC: usize = 344;
}

/// On-disk element type for [`write_nifti`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    Uint8,
    Int16,
    Float32,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::Uint8 => 2,
            Datatype::Int16 => 4,
            Datatype::Float32 => 16,
        }
    }

    pub fn bitpix(self) -> i16 {
        match self {
            Datatype::Uint8 => 8,
            Datatype::Int16 => 16,
            Datatype::Float32 => 32,
        }
    }

    fn byte_size(self) -> usize {
        (self.bitpix() / 8) as usize
    }

    fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(Datatype::Uint8),
            4 => Ok(Datatype::Int16),
            16 => Ok(Datatype::Float32),
            other => Err(Error::UnsupportedDatatype(other)),
        }
    }
}

/// Reads a supported NIfTI-1 file into a [`Volume`]. Stored values are
/// converted with `scl_slope`/`scl_inter` (slope 0 treated as 1, the NIfTI
/// convention).
pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;

    if bytes.len() >= 2 && bytes[0] == 0x1F && bytes[1] == 0x8B {
        return Err(Error::CompressedNifti(path.to_path_buf()));
    }
    if bytes.len() < VOX_OFFSET {
        return Err(Error::InvalidHeader(format!(
            "{}: file shorter than header ({} bytes)",
            path.display(),
            bytes.len()
        )));
    }

    let sizeof_hdr = LittleEndian::read_i32(&bytes[off::SIZEOF_HDR..off::SIZEOF_HDR + 4]);
    if sizeof_hdr != HEADER_SIZE as i32 {
        // 348 read big-endian as LE comes out as 0x5C010000; report clearly.
        if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
            return Err(Error::InvalidHeader(
                "big-endian NIfTI is not supported".into(),
            ));
        }
        return Err(Error::InvalidHeader(format!(
            "sizeof_hdr is {sizeof_hdr}, expected 348"
        )));
    }
    let magic = &bytes[off::MAGIC..off::MAGIC + 4];
    if magic != b"n+1\0" {
        return Err(Error::InvalidHeader(format!(
            "magic {:?} is not \"n+1\\0\"",
            magic
        )));
    }

    let ndim = LittleEndian::read_i16(&bytes[off::DIM..off::DIM + 2]);
    if ndim != 3 {
        return Err(Error::InvalidHeader(format!(
            "dim[0] must be 3 for a volume, got {ndim}"
        )));
    }
    let mut dim = [0usize; 3];
    for (i, d) in dim.iter_mut().enumerate() {
        let raw = LittleEndian::read_i16(&bytes[off::DIM + 2 + 2 * i..off::DIM + 4 + 2 * i]);
        if raw < 1 {
            return Err(Error::InvalidHeader(format!("dim[{}] = {raw}", i + 1)));
        }
        *d = raw as usize;
    }
    // NIfTI stores x first; Volume dims are (z, y, x).
    let dims = [dim[2], dim[1], dim[0]];

    let datatype = Datatype::from_code(LittleEndian::read_i16(
        &bytes[off::DATATYPE..off::DATATYPE + 2],
    ))?;

    let mut pixdim = [0f64; 3];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = LittleEndian::read_f32(&bytes[off::PIXDIM + 4 + 4 * i..off::PIXDIM + 8 + 4 * i])
            as f64;
    }
    let spacing = [pixdim[2], pixdim[1], pixdim[0]];

    let vox_offset = LittleEndian::read_f32(&bytes[off::VOX_OFFSET..off::VOX_OFFSET + 4]);
    if vox_offset != VOX_OFFSET as f32 {
        return Err(Error::InvalidHeader(format!(
            "vox_offset {vox_offset} unsupported, expected 352"
        )));
    }

    let mut slope = LittleEndian::read_f32(&bytes[off::SCL_SLOPE..off::SCL_SLOPE + 4]);
    let inter = LittleEndian::read_f32(&bytes[off::SCL_INTER..off::SCL_INTER + 4]);
    if slope == 0.0 {
        slope = 1.0;
    }

    let origin = [
        LittleEndian::read_f32(&bytes[off::QOFFSET_Z..off::QOFFSET_Z + 4]) as f64,
        LittleEndian::read_f32(&bytes[off::QOFFSET_Y..off::QOFFSET_Y + 4]) as f64,
        LittleEndian::read_f32(&bytes[off::QOFFSET_X..off::QOFFSET_X + 4]) as f64,
    ];

    let nvox = dims[0] * dims[1] * dims[2];
    let expected = nvox * datatype.byte_size();
    let found = bytes.len() - VOX_OFFSET;
    if found != expected {
        return Err(Error::DataSizeMismatch { expected, found });
    }
    let raw = &bytes[VOX_OFFSET..];

    let identity_scale = slope == 1.0 && inter == 0.0;
    let mut data = Vec::with_capacity(nvox);
    match datatype {
        Datatype::Uint8 => {
            for &b in raw {
                data.push(b as f32 * slope + inter);
            }
        }
        Datatype::Int16 => {
            for chunk in raw.chunks_exact(2) {
                let v = LittleEndian::read_i16(chunk) as f32;
                data.push(v * slope + inter);
            }
        }
        Datatype::Float32 => {
            if identity_scale {
                // Keep bit-exact round trips: no arithmetic on the values.
                for chunk in raw.chunks_exact(4) {
                    data.push(LittleEndian::read_f32(chunk));
                }
            } else {
                for chunk in raw.chunks_exact(4) {
                    data.push(LittleEndian::read_f32(chunk) * slope + inter);
                }
            }
        }
    }

    Volume::new(dims, spacing, origin, data)
}

/// Reads a NIfTI file and validates that it is a binary mask.
pub fn read_nifti_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let v = read_nifti(path)?;
    Mask::from_volume(&v)
}

fn build_header(v: &Volume, datatype: Datatype) -> Vec<u8> {
    let mut h = vec![0u8; HEADER_SIZE + 4]; // header + zeroed extension flag
    LittleEndian::write_i32(&mut h[off::SIZEOF_HDR..off::SIZEOF_HDR + 4], 348);
    h[38] = b'r'; // "regular" per convention

    let dims = v.dims(); // (z, y, x)
    LittleEndian::write_i16(&mut h[off::DIM..off::DIM + 2], 3);
    let file_dims = [dims[2], dims[1], dims[0]];
    for (i, &d) in file_dims.iter().enumerate() {
        LittleEndian::write_i16(&mut h[off::DIM + 2 + 2 * i..off::DIM + 4 + 2 * i], d as i16);
    }
    for i in 4..8 {
        LittleEndian::write_i16(&mut h[off::DIM + 2 * i..off::DIM + 2 + 2 * i], 1);
    }

    LittleEndian::write_i16(&mut h[off::DATATYPE..off::DATATYPE + 2], datatype.code());
    LittleEndian::write_i16(&mut h[off::BITPIX..off::BITPIX + 2], datatype.bitpix());

    let spacing = v.spacing();
    LittleEndian::write_f32(&mut h[off::PIXDIM..off::PIXDIM + 4], 1.0); // qfac
    let file_spacing = [spacing[2], spacing[1], spacing[0]];
    for (i, &s) in file_spacing.iter().enumerate() {
        LittleEndian::write_f32(
            &mut h[off::PIXDIM + 4 + 4 * i..off::PIXDIM + 8 + 4 * i],
            s as f32,
        );
    }

    LittleEndian::write_f32(&mut h[off::VOX_OFFSET..off::VOX_OFFSET + 4], 352.0);
    LittleEndian::write_f32(&mut h[off::SCL_SLOPE..off::SCL_SLOPE + 4], 1.0);
    LittleEndian::write_f32(&mut h[off::SCL_INTER..off::SCL_INTER + 4], 0.0);
    h[off::XYZT_UNITS] = 2; // millimeters

    let descrip = b"pfnl3d";
    h[off::DESCRIP..off::DESCRIP + descrip.len()].copy_from_slice(descrip);

    LittleEndian::write_i16(&mut h[off::QFORM_CODE..off::QFORM_CODE + 2], 1);
    let origin = v.origin();
    LittleEndian::write_f32(&mut h[off::QOFFSET_X..off::QOFFSET_X + 4], origin[2] as f32);
    LittleEndian::write_f32(&mut h[off::QOFFSET_Y..off::QOFFSET_Y + 4], origin[1] as f32);
    LittleEndian::write_f32(&mut h[off::QOFFSET_Z..off::QOFFSET_Z + 4], origin[0] as f32);

    h[off::MAGIC..off::MAGIC + 4].copy_from_slice(b"n+1\0");
    h
}

/// Writes a volume as a single-file little-endian NIfTI-1 (`.nii`).
///
/// For `Int16` the intensities are rounded to nearest and must fit the i16
/// range; `Uint8` likewise. `Float32` stores the values bit-exactly.
pub fn write_nifti(v: &Volume, path: impl AsRef<Path>, datatype: Datatype) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = build_header(v, datatype);
    bytes.reserve(v.data().len() * datatype.byte_size());

    match datatype {
        Datatype::Uint8 => {
            for &x in v.data() {
                let r = x.round();
                if !(0.0..=255.0).contains(&r) {
                    return Err(Error::ValueOutOfRange {
                        value: x as f64,
                        datatype: "uint8",
                    });
                }
                bytes.push(r as u8);
            }
        }
        Datatype::Int16 => {
            for &x in v.data() {
                let r = x.round();
                if r < i16::MIN as f32 || r > i16::MAX as f32 {
                    return Err(Error::ValueOutOfRange {
                        value: x as f64,
                        datatype: "int16",
                    });
                }
                bytes.extend_from_slice(&(r as i16).to_le_bytes());
            }
        }
        Datatype::Float32 => {
            for &x in v.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
    }

    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a binary mask as uint8.
pub fn write_nifti_mask(m: &Mask, path: impl AsRef<Path>) -> Result<()> {
    write_nifti(&m.to_volume(), path, Datatype::Uint8)
}
