//! CRSV raw container. Little-endian throughout:
//!
//! ```text
//! "CRSV"  u32 version
//! u32 D  u32 H  u32 W  f64 spacing[3]
//! u32 channels  u32 id_len  id (UTF-8)  u8 alphabet (0 external, 1 internal)
//! f32 data[channels·D·H·W]   channel-major, W fastest
//! u8  labels[D·H·W]
//! ```

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{LabelAlphabet, LabelMask, Result, Volume, VolumeError};

pub const CRSV_MAGIC: &[u8; 4] = b"CRSV";
pub const CRSV_VERSION: u32 = 1;

const MAX_ID: usize = 4096;
const MAX_CHANNELS: usize = 64;

pub fn encode_raw(volume: &Volume, mask: &LabelMask) -> Result<Vec<u8>> {
    if mask.dims != volume.dims {
        return Err(VolumeError::Shape(format!(
            "mask grid {:?} vs volume grid {:?}",
            mask.dims, volume.dims
        )));
    }
    let n = volume.voxels();
    let mut out = Vec::with_capacity(64 + volume.id.len() + n * (4 * volume.num_channels() + 1));
    out.extend_from_slice(CRSV_MAGIC);
    out.write_u32::<LittleEndian>(CRSV_VERSION)?;
    for &d in &volume.dims {
        out.write_u32::<LittleEndian>(d as u32)?;
    }
    for &s in &volume.spacing {
        out.write_f64::<LittleEndian>(s)?;
    }
    out.write_u32::<LittleEndian>(volume.num_channels() as u32)?;
    out.write_u32::<LittleEndian>(volume.id.len() as u32)?;
    out.extend_from_slice(volume.id.as_bytes());
    out.push(mask.alphabet.code());
    for c in &volume.channels {
        for &v in c {
            out.write_f32::<LittleEndian>(v)?;
        }
    }
    out.extend_from_slice(&mask.labels);
    Ok(out)
}

fn short(what: &'static str, needed: u64, bytes: &[u8]) -> VolumeError {
    VolumeError::Truncated {
        what,
        needed,
        available: bytes.len() as u64,
    }
}

pub fn decode_raw(bytes: &[u8]) -> Result<(Volume, LabelMask)> {
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic)
        .map_err(|_| short("CRSV magic", 4, bytes))?;
    if &magic != CRSV_MAGIC {
        return Err(VolumeError::BadMagic {
            format: "CRSV",
            found: magic.to_vec(),
        });
    }
    let fixed = 4 + 4 + 12 + 24 + 8;
    if bytes.len() < fixed {
        return Err(short("CRSV header", fixed as u64, bytes));
    }
    let version = cur.read_u32::<LittleEndian>()?;
    if version != CRSV_VERSION {
        return Err(VolumeError::Version {
            format: "CRSV",
            version,
        });
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = cur.read_u32::<LittleEndian>()? as usize;
    }
    let mut spacing = [0f64; 3];
    for s in &mut spacing {
        *s = cur.read_f64::<LittleEndian>()?;
    }
    let channels = cur.read_u32::<LittleEndian>()? as usize;
    let id_len = cur.read_u32::<LittleEndian>()? as usize;
    if channels == 0 || channels > MAX_CHANNELS {
        return Err(VolumeError::Header(format!(
            "channel count {channels} outside 1..={MAX_CHANNELS}"
        )));
    }
    if id_len > MAX_ID {
        return Err(VolumeError::Header(format!("id length {id_len} too large")));
    }
    let pos = cur.position() as usize;
    if bytes.len() < pos + id_len + 1 {
        return Err(short("CRSV id", (pos + id_len + 1) as u64, bytes));
    }
    let id = std::str::from_utf8(&bytes[pos..pos + id_len])
        .map_err(|_| VolumeError::Header("case id is not UTF-8".into()))?
        .to_string();
    let alphabet = LabelAlphabet::from_code(bytes[pos + id_len]).ok_or_else(|| {
        VolumeError::Header(format!("unknown label alphabet {}", bytes[pos + id_len]))
    })?;
    let start = (pos + id_len + 1) as u64;
    let n = dims.iter().map(|&d| d as u64).product::<u64>();
    let needed = (channels as u64)
        .checked_mul(n)
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(n))
        .and_then(|v| v.checked_add(start))
        .ok_or_else(|| VolumeError::Header(format!("grid {dims:?} too large")))?;
    if (bytes.len() as u64) < needed {
        return Err(short("CRSV data", needed, bytes));
    }
    if (bytes.len() as u64) > needed {
        return Err(VolumeError::Header(format!(
            "{} trailing bytes",
            bytes.len() as u64 - needed
        )));
    }
    let n = n as usize;
    let mut at = start as usize;
    let mut data = Vec::with_capacity(channels);
    for _ in 0..channels {
        let c: Vec<f32> = bytes[at..at + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        at += 4 * n;
        data.push(c);
    }
    let labels = bytes[at..at + n].to_vec();
    let volume = Volume::new(id, dims, spacing, data)?;
    let mask = LabelMask::new(dims, labels, alphabet)?;
    Ok((volume, mask))
}

pub fn write_raw(path: &Path, volume: &Volume, mask: &LabelMask) -> Result<()> {
    std::fs::write(path, encode_raw(volume, mask)?)?;
    Ok(())
}

pub fn read_raw(path: &Path) -> Result<(Volume, LabelMask)> {
    decode_raw(&std::fs::read(path)?)
}
