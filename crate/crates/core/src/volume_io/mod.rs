//! Multi-modal MR volumes and label masks: NIfTI-1 ingestion, the CRSV raw
//! container, and a synthetic case generator.

mod nifti;
mod raw;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::windowing::Dims3;

pub use nifti::{
    decode_nifti, encode_nifti, load_nifti_case, read_nifti, write_nifti, NiftiDatatype,
    NiftiHeader, NiftiImage,
};
pub use raw::{decode_raw, encode_raw, read_raw, write_raw, CRSV_MAGIC, CRSV_VERSION};
pub use synthetic::{generate_synthetic, DEFAULT_DIFFICULTY, INTENSITY_SCALE, MIN_SYNTHETIC_DIM};

/// Channel order of every [`Volume`].
pub const MODALITIES: [&str; 4] = ["t1", "t1ce", "t2", "flair"];

/// Internal label ids, also the one-hot channel order.
pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_NCR: u8 = 1;
pub const LABEL_ED: u8 = 2;
pub const LABEL_ET_EXTERNAL: u8 = 4;
pub const LABEL_ET_INTERNAL: u8 = 3;

#[derive(Debug, thiserror::Error)]
pub enum VolumeError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad {format} magic {found:?}")]
    BadMagic {
        format: &'static str,
        found: Vec<u8>,
    },
    #[error("unsupported {format} version {version}")]
    Version { format: &'static str, version: u32 },
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("truncated {what}: need {needed} bytes, have {available}")]
    Truncated {
        what: &'static str,
        needed: u64,
        available: u64,
    },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("label {label} is not in the {alphabet:?} alphabet")]
    UnknownLabel { label: u8, alphabet: LabelAlphabet },
    #[error("synthetic volumes need every dim ≥ {min}, got {dims:?}")]
    DimsTooSmall { dims: Dims3, min: usize },
    #[error("inconsistent shapes: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, VolumeError>;

/// Co-registered modalities on one `D×H×W` grid, `W` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub id: String,
    pub dims: Dims3,
    /// Millimetres per voxel along `[D, H, W]`.
    pub spacing: [f64; 3],
    pub channels: Vec<Vec<f32>>,
}

impl Volume {
    pub fn new(
        id: impl Into<String>,
        dims: Dims3,
        spacing: [f64; 3],
        channels: Vec<Vec<f32>>,
    ) -> Result<Self> {
        let n = dims.iter().product::<usize>();
        if n == 0 {
            return Err(VolumeError::Shape(format!("empty grid {dims:?}")));
        }
        if channels.is_empty() || channels.iter().any(|c| c.len() != n) {
            return Err(VolumeError::Shape(format!(
                "every channel needs {n} voxels"
            )));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(VolumeError::Shape(format!(
                "spacing {spacing:?} must be positive"
            )));
        }
        Ok(Self {
            id: id.into(),
            dims,
            spacing,
            channels,
        })
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelAlphabet {
    /// `{0, 1, 2, 4}` as distributed with the public datasets.
    External,
    /// Dense `{0, 1, 2, 3}`.
    Internal,
}

impl LabelAlphabet {
    pub fn contains(self, label: u8) -> bool {
        match self {
            LabelAlphabet::External => matches!(label, 0 | 1 | 2 | 4),
            LabelAlphabet::Internal => label <= 3,
        }
    }

    fn code(self) -> u8 {
        match self {
            LabelAlphabet::External => 0,
            LabelAlphabet::Internal => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(LabelAlphabet::External),
            1 => Some(LabelAlphabet::Internal),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    pub dims: Dims3,
    pub labels: Vec<u8>,
    pub alphabet: LabelAlphabet,
}

impl LabelMask {
    pub fn new(dims: Dims3, labels: Vec<u8>, alphabet: LabelAlphabet) -> Result<Self> {
        if labels.len() != dims.iter().product::<usize>() {
            return Err(VolumeError::Shape(format!(
                "{} labels for grid {dims:?}",
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| !alphabet.contains(l)) {
            return Err(VolumeError::UnknownLabel { label, alphabet });
        }
        Ok(Self {
            dims,
            labels,
            alphabet,
        })
    }

    /// Count of voxels per label value.
    pub fn histogram(&self) -> [usize; 256] {
        let mut h = [0; 256];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemapDirection {
    ToInternal,
    ToExternal,
}

/// External `{0,1,2,4}` ↔ internal `{0,1,2,3}`.
pub fn remap_labels(mask: &LabelMask, direction: RemapDirection) -> Result<LabelMask> {
    let (from, to, src, dst) = match direction {
        RemapDirection::ToInternal => (LabelAlphabet::External, LabelAlphabet::Internal, 4, 3),
        RemapDirection::ToExternal => (LabelAlphabet::Internal, LabelAlphabet::External, 3, 4),
    };
    let labels = mask
        .labels
        .iter()
        .map(|&l| {
            if !from.contains(l) {
                Err(VolumeError::UnknownLabel {
                    label: l,
                    alphabet: from,
                })
            } else if l == src {
                Ok(dst)
            } else {
                Ok(l)
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok(LabelMask {
        dims: mask.dims,
        labels,
        alphabet: to,
    })
}
