//! RVOL volume files.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "RVOL"
//! 4       1     version (1)
//! 5       1     dtype (0 = f32, 1 = u8)
//! 6       12    D, H, W as u32 LE
//! 18      24    spacing (slice, row, col) as f64 LE, mm
//! 42      ...   D*H*W voxels LE, width fastest
//! ```

use std::path::Path;

use crate::data::volume::{SegMask, Volume, VolumeImage};
use crate::error::{FormatError, Result};

pub const MAGIC: &[u8; 4] = b"RVOL";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 42;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RvolDtype {
    F32 = 0,
    U8 = 1,
}

impl RvolDtype {
    fn from_code(c: u8) -> std::result::Result<Self, FormatError> {
        match c {
            0 => Ok(RvolDtype::F32),
            1 => Ok(RvolDtype::U8),
            other => Err(FormatError::UnknownDtype(other)),
        }
    }

    fn name(self) -> &'static str {
        match self {
            RvolDtype::F32 => "f32",
            RvolDtype::U8 => "u8",
        }
    }

    fn size(self) -> usize {
        match self {
            RvolDtype::F32 => 4,
            RvolDtype::U8 => 1,
        }
    }
}

/// Either payload type, as found in a file.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyVolume {
    F32(VolumeImage),
    U8(SegMask),
}

fn header<T: Copy>(v: &Volume<T>, dtype: RvolDtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + v.len() * dtype.size());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype as u8);
    for d in v.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in v.spacing() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn encode_image(v: &VolumeImage) -> Vec<u8> {
    let mut out = header(v, RvolDtype::F32);
    for x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn encode_mask(v: &SegMask) -> Vec<u8> {
    let mut out = header(v, RvolDtype::U8);
    out.extend_from_slice(v.data());
    out
}

pub fn decode(bytes: &[u8]) -> Result<AnyVolume> {
    let need = |n: usize| {
        if bytes.len() < n {
            Err(FormatError::Truncated { needed: n, available: bytes.len() })
        } else {
            Ok(())
        }
    };
    need(4)?;
    if &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic { expected: "RVOL", found: bytes[..4].to_vec() }.into());
    }
    need(6)?;
    if bytes[4] != VERSION {
        return Err(FormatError::UnsupportedVersion(bytes[4]).into());
    }
    let dtype = RvolDtype::from_code(bytes[5])?;
    need(HEADER_LEN)?;
    let mut shape = [0usize; 3];
    for (a, s) in shape.iter_mut().enumerate() {
        let o = 6 + 4 * a;
        *s = u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    }
    let mut spacing = [0f64; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        let o = 18 + 8 * a;
        *s = f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(dtype.size()))
        .ok_or_else(|| FormatError::Invalid(format!("dims {shape:?} overflow")))?;
    let total = HEADER_LEN + n;
    need(total)?;
    if bytes.len() > total {
        return Err(FormatError::TrailingBytes(bytes.len() - total).into());
    }
    let payload = &bytes[HEADER_LEN..];
    let invalid = |e: crate::Error| FormatError::Invalid(e.to_string());
    Ok(match dtype {
        RvolDtype::F32 => {
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            AnyVolume::F32(Volume::new(shape, spacing, data).map_err(invalid)?)
        }
        RvolDtype::U8 => AnyVolume::U8(Volume::new(shape, spacing, payload.to_vec()).map_err(invalid)?),
    })
}

pub fn write_image(path: impl AsRef<Path>, v: &VolumeImage) -> Result<()> {
    Ok(std::fs::write(path, encode_image(v))?)
}

pub fn write_mask(path: impl AsRef<Path>, v: &SegMask) -> Result<()> {
    Ok(std::fs::write(path, encode_mask(v))?)
}

pub fn read_any(path: impl AsRef<Path>) -> Result<AnyVolume> {
    decode(&std::fs::read(path)?)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<VolumeImage> {
    match read_any(path)? {
        AnyVolume::F32(v) => Ok(v),
        AnyVolume::U8(_) => Err(mismatch(RvolDtype::F32, RvolDtype::U8)),
    }
}

/// Reads a u8 volume and checks that it is binary.
pub fn read_mask(path: impl AsRef<Path>) -> Result<SegMask> {
    match read_any(path)? {
        AnyVolume::U8(v) => {
            v.check_binary()?;
            Ok(v)
        }
        AnyVolume::F32(_) => Err(mismatch(RvolDtype::U8, RvolDtype::F32)),
    }
}

fn mismatch(expected: RvolDtype, found: RvolDtype) -> crate::Error {
    FormatError::DtypeMismatch { expected: expected.name(), found: found.name() }.into()
}
