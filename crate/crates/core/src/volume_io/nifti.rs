//! Uncompressed single-file NIfTI-1 (`.nii`).
//!
//! Only the fields needed to locate and scale voxel data are interpreted.
//! Either byte order is accepted; the writer always emits little-endian.

use std::path::Path;

use super::{LabelAlphabet, LabelMask, Result, Volume, VolumeError};
use crate::windowing::Dims3;

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;
const MAX_VOXELS: u64 = 1 << 31;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NiftiDatatype {
    U8,
    I16,
    I32,
    F32,
    F64,
}

impl NiftiDatatype {
    pub fn code(self) -> i16 {
        match self {
            NiftiDatatype::U8 => 2,
            NiftiDatatype::I16 => 4,
            NiftiDatatype::I32 => 8,
            NiftiDatatype::F32 => 16,
            NiftiDatatype::F64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => NiftiDatatype::U8,
            4 => NiftiDatatype::I16,
            8 => NiftiDatatype::I32,
            16 => NiftiDatatype::F32,
            64 => NiftiDatatype::F64,
            other => return Err(VolumeError::UnsupportedDatatype(other)),
        })
    }

    pub fn bytes(self) -> usize {
        match self {
            NiftiDatatype::U8 => 1,
            NiftiDatatype::I16 => 2,
            NiftiDatatype::I32 | NiftiDatatype::F32 => 4,
            NiftiDatatype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: NiftiDatatype,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub magic: [u8; 4],
    pub little_endian: bool,
}

impl NiftiHeader {
    /// Extents in storage order (`x` fastest).
    pub fn extents(&self) -> Vec<usize> {
        (1..=self.dim[0] as usize)
            .map(|i| self.dim[i] as usize)
            .collect()
    }

    pub fn voxel_count(&self) -> usize {
        self.extents().iter().product()
    }
}

/// A decoded image. `raw` holds stored values exactly; [`NiftiImage::values`]
/// applies the intensity scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiImage {
    pub header: NiftiHeader,
    pub raw: Vec<f64>,
}

impl NiftiImage {
    /// Float image with unit scaling.
    pub fn from_values(
        dims: Dims3,
        spacing: [f64; 3],
        datatype: NiftiDatatype,
        raw: Vec<f64>,
    ) -> Result<Self> {
        if raw.len() != dims.iter().product::<usize>() {
            return Err(VolumeError::Shape(format!(
                "{} values for grid {dims:?}",
                raw.len()
            )));
        }
        if dims.iter().any(|&d| d == 0 || d > i16::MAX as usize) {
            return Err(VolumeError::Shape(format!(
                "grid {dims:?} not representable"
            )));
        }
        let mut dim = [1i16; 8];
        dim[0] = 3;
        dim[1] = dims[2] as i16;
        dim[2] = dims[1] as i16;
        dim[3] = dims[0] as i16;
        let mut pixdim = [1.0f32; 8];
        pixdim[1] = spacing[2] as f32;
        pixdim[2] = spacing[1] as f32;
        pixdim[3] = spacing[0] as f32;
        Ok(Self {
            header: NiftiHeader {
                dim,
                datatype,
                pixdim,
                vox_offset: DATA_OFFSET as f32,
                scl_slope: 0.0,
                scl_inter: 0.0,
                magic: *b"n+1\0",
                little_endian: true,
            },
            raw,
        })
    }

    /// Stored values with `scl_slope`/`scl_inter` applied when the slope is nonzero.
    pub fn values(&self) -> Vec<f64> {
        let (s, i) = (self.header.scl_slope as f64, self.header.scl_inter as f64);
        if s == 0.0 || !s.is_finite() || !i.is_finite() {
            self.raw.clone()
        } else {
            self.raw.iter().map(|v| v * s + i).collect()
        }
    }

    /// `[D, H, W]` of a 3D image (trailing unit dims allowed).
    pub fn grid(&self) -> Result<Dims3> {
        let e = self.header.extents();
        if e.len() < 3 && e.len() > 0 {
            let mut g = [1usize; 3];
            for (i, &v) in e.iter().enumerate() {
                g[2 - i] = v;
            }
            return Ok(g);
        }
        if e.len() >= 3 && e[3..].iter().all(|&v| v == 1) {
            return Ok([e[2], e[1], e[0]]);
        }
        Err(VolumeError::Header(format!(
            "expected a 3D image, got extents {e:?}"
        )))
    }

    /// Spacing along `[D, H, W]`; non-positive entries read as 1 mm.
    pub fn spacing(&self) -> [f64; 3] {
        let p = |i: usize| {
            let v = self.header.pixdim[i] as f64;
            if v.is_finite() && v > 0.0 {
                v
            } else {
                1.0
            }
        };
        [p(3), p(2), p(1)]
    }

    pub fn to_label_mask(&self, alphabet: LabelAlphabet) -> Result<LabelMask> {
        let labels = self
            .values()
            .into_iter()
            .map(|v| {
                if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                    Ok(v as u8)
                } else {
                    Err(VolumeError::Header(format!(
                        "label value {v} is not a small integer"
                    )))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        LabelMask::new(self.grid()?, labels, alphabet)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    little: bool,
}

impl Reader<'_> {
    fn i16(&self, at: usize) -> i16 {
        let b = [self.bytes[at], self.bytes[at + 1]];
        if self.little {
            i16::from_le_bytes(b)
        } else {
            i16::from_be_bytes(b)
        }
    }

    fn i32(&self, at: usize) -> i32 {
        let b: [u8; 4] = self.bytes[at..at + 4].try_into().unwrap();
        if self.little {
            i32::from_le_bytes(b)
        } else {
            i32::from_be_bytes(b)
        }
    }

    fn f32(&self, at: usize) -> f32 {
        f32::from_bits(self.i32(at) as u32)
    }

    fn f64(&self, at: usize) -> f64 {
        let b: [u8; 8] = self.bytes[at..at + 8].try_into().unwrap();
        if self.little {
            f64::from_le_bytes(b)
        } else {
            f64::from_be_bytes(b)
        }
    }
}

fn parse_header(bytes: &[u8]) -> Result<NiftiHeader> {
    if bytes.len() < HEADER_SIZE {
        return Err(VolumeError::Truncated {
            what: "NIfTI header",
            needed: HEADER_SIZE as u64,
            available: bytes.len() as u64,
        });
    }
    let first: [u8; 4] = bytes[0..4].try_into().unwrap();
    let little = if i32::from_le_bytes(first) == HEADER_SIZE as i32 {
        true
    } else if i32::from_be_bytes(first) == HEADER_SIZE as i32 {
        false
    } else {
        return Err(VolumeError::Header(format!(
            "sizeof_hdr is {} (expected 348)",
            i32::from_le_bytes(first)
        )));
    };
    let r = Reader { bytes, little };
    let magic: [u8; 4] = bytes[344..348].try_into().unwrap();
    if &magic != b"n+1\0" && &magic != b"ni1\0" {
        return Err(VolumeError::BadMagic {
            format: "NIfTI",
            found: magic.to_vec(),
        });
    }
    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = r.i16(40 + 2 * i);
    }
    if !(1..=7).contains(&dim[0]) {
        return Err(VolumeError::Header(format!(
            "dim[0] = {} outside 1..=7",
            dim[0]
        )));
    }
    if dim[1..=dim[0] as usize].iter().any(|&d| d <= 0) {
        return Err(VolumeError::Header(format!(
            "non-positive extent in {:?}",
            &dim[1..=dim[0] as usize]
        )));
    }
    let datatype = NiftiDatatype::from_code(r.i16(70))?;
    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = r.f32(76 + 4 * i);
    }
    Ok(NiftiHeader {
        dim,
        datatype,
        pixdim,
        vox_offset: r.f32(108),
        scl_slope: r.f32(112),
        scl_inter: r.f32(116),
        magic,
        little_endian: little,
    })
}

pub fn decode_nifti(bytes: &[u8]) -> Result<NiftiImage> {
    let header = parse_header(bytes)?;
    if &header.magic == b"ni1\0" {
        return Err(VolumeError::Header(
            "two-file (.hdr/.img) images are not supported".into(),
        ));
    }
    let off = header.vox_offset;
    if !(off.is_finite()
        && off >= DATA_OFFSET as f32
        && off.fract() == 0.0
        && (off as f64) < u32::MAX as f64)
    {
        return Err(VolumeError::Header(format!("vox_offset {off} invalid")));
    }
    let off = off as u64;
    let count = header.dim[1..=header.dim[0] as usize]
        .iter()
        .map(|&d| d as u64)
        .product::<u64>();
    if count > MAX_VOXELS {
        return Err(VolumeError::Header(format!(
            "{count} voxels exceed the supported maximum"
        )));
    }
    let size = header.datatype.bytes() as u64;
    let needed = off + count * size;
    if (bytes.len() as u64) < needed {
        return Err(VolumeError::Truncated {
            what: "NIfTI data",
            needed,
            available: bytes.len() as u64,
        });
    }
    let r = Reader {
        bytes,
        little: header.little_endian,
    };
    let (start, size) = (off as usize, size as usize);
    let raw = (0..count as usize)
        .map(|i| {
            let at = start + i * size;
            match header.datatype {
                NiftiDatatype::U8 => bytes[at] as f64,
                NiftiDatatype::I16 => r.i16(at) as f64,
                NiftiDatatype::I32 => r.i32(at) as f64,
                NiftiDatatype::F32 => r.f32(at) as f64,
                NiftiDatatype::F64 => r.f64(at),
            }
        })
        .collect();
    Ok(NiftiImage { header, raw })
}

/// Little-endian single-file encoding with data at byte 352.
pub fn encode_nifti(image: &NiftiImage) -> Result<Vec<u8>> {
    let h = &image.header;
    if h.voxel_count() != image.raw.len() {
        return Err(VolumeError::Shape(format!(
            "{} values for extents {:?}",
            image.raw.len(),
            h.extents()
        )));
    }
    let mut out = vec![0u8; DATA_OFFSET];
    out[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    out[38] = b'r';
    for (i, d) in h.dim.iter().enumerate() {
        out[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    out[70..72].copy_from_slice(&h.datatype.code().to_le_bytes());
    out[72..74].copy_from_slice(&((h.datatype.bytes() * 8) as i16).to_le_bytes());
    for (i, p) in h.pixdim.iter().enumerate() {
        out[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
    }
    out[108..112].copy_from_slice(&(DATA_OFFSET as f32).to_le_bytes());
    out[112..116].copy_from_slice(&h.scl_slope.to_le_bytes());
    out[116..120].copy_from_slice(&h.scl_inter.to_le_bytes());
    out[344..348].copy_from_slice(b"n+1\0");
    out.reserve(image.raw.len() * h.datatype.bytes());
    for &v in &image.raw {
        match h.datatype {
            NiftiDatatype::U8 => out.push(v as u8),
            NiftiDatatype::I16 => out.extend_from_slice(&(v as i16).to_le_bytes()),
            NiftiDatatype::I32 => out.extend_from_slice(&(v as i32).to_le_bytes()),
            NiftiDatatype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            NiftiDatatype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(out)
}

pub fn read_nifti(path: &Path) -> Result<NiftiImage> {
    decode_nifti(&std::fs::read(path)?)
}

pub fn write_nifti(path: &Path, image: &NiftiImage) -> Result<()> {
    std::fs::write(path, encode_nifti(image)?)?;
    Ok(())
}

/// One case from per-modality files (in [`super::MODALITIES`] order) and an
/// optional segmentation in the external alphabet.
pub fn load_nifti_case(
    id: &str,
    modalities: &[&Path],
    seg: Option<&Path>,
) -> Result<(Volume, Option<LabelMask>)> {
    let mut channels = Vec::with_capacity(modalities.len());
    let mut grid = None;
    let mut spacing = [1.0; 3];
    for path in modalities {
        let img = read_nifti(path)?;
        let g = img.grid()?;
        match grid {
            None => {
                grid = Some(g);
                spacing = img.spacing();
            }
            Some(prev) if prev != g => {
                return Err(VolumeError::Shape(format!(
                    "{} has grid {g:?}, expected {prev:?}",
                    path.display()
                )))
            }
            _ => {}
        }
        channels.push(img.values().into_iter().map(|v| v as f32).collect());
    }
    let grid = grid.ok_or_else(|| VolumeError::Shape("no modality files given".into()))?;
    let volume = Volume::new(id, grid, spacing, channels)?;
    let mask = match seg {
        Some(p) => {
            let m = read_nifti(p)?.to_label_mask(LabelAlphabet::External)?;
            if m.dims != grid {
                return Err(VolumeError::Shape(format!(
                    "segmentation grid {:?} differs from {grid:?}",
                    m.dims
                )));
            }
            Some(m)
        }
        None => None,
    };
    Ok((volume, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> NiftiImage {
        let raw: Vec<f64> = (0..24).map(|i| (i as f32 * 0.37 - 2.0) as f64).collect();
        NiftiImage::from_values([2, 3, 4], [1.0, 1.5, 2.0], NiftiDatatype::F32, raw).unwrap()
    }

    #[test]
    fn round_trip_and_axis_order() {
        let img = sample();
        let bytes = encode_nifti(&img).unwrap();
        let back = decode_nifti(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.grid().unwrap(), [2, 3, 4]);
        assert_eq!(back.spacing(), [1.0, 1.5, 2.0]);
        assert_eq!(&bytes[344..348], b"n+1\0");
    }

    #[test]
    fn big_endian_header_is_detected() {
        let mut h = [0u8; DATA_OFFSET + 2];
        h[0..4].copy_from_slice(&348i32.to_be_bytes());
        assert_eq!(i32::from_le_bytes(h[0..4].try_into().unwrap()), 1543569408);
        for (i, d) in [3i16, 2, 1, 1, 1, 1, 1, 1].iter().enumerate() {
            h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_be_bytes());
        }
        h[70..72].copy_from_slice(&4i16.to_be_bytes());
        h[108..112].copy_from_slice(&352f32.to_be_bytes());
        h[112..116].copy_from_slice(&2f32.to_be_bytes());
        h[116..120].copy_from_slice(&1f32.to_be_bytes());
        h[344..348].copy_from_slice(b"n+1\0");
        h[352..354].copy_from_slice(&(-7i16).to_be_bytes());
        let mut h = h.to_vec();
        h.extend_from_slice(&300i16.to_be_bytes());
        let img = decode_nifti(&h).unwrap();
        assert!(!img.header.little_endian);
        assert_eq!(img.raw, vec![-7.0, 300.0]);
        assert_eq!(img.values(), vec![-13.0, 601.0]);
    }

    #[test]
    fn distinct_errors() {
        let good = encode_nifti(&sample()).unwrap();
        let mut bad_magic = good.clone();
        bad_magic[345] = b'x';
        assert!(matches!(
            decode_nifti(&bad_magic),
            Err(VolumeError::BadMagic { .. })
        ));
        let mut bad_type = good.clone();
        bad_type[70..72].copy_from_slice(&32i16.to_le_bytes());
        assert!(matches!(
            decode_nifti(&bad_type),
            Err(VolumeError::UnsupportedDatatype(32))
        ));
        assert!(matches!(
            decode_nifti(&good[..good.len() - 1]),
            Err(VolumeError::Truncated { .. })
        ));
        assert!(matches!(
            decode_nifti(&good[..100]),
            Err(VolumeError::Truncated { .. })
        ));
    }
}
