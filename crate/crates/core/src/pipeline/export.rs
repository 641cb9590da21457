//! Slice snapshots as binary PPM (P6): grayscale anatomy with label colours.
//! Necrotic core blue, edema yellow, enhancing tumor red.

use std::path::{Path, PathBuf};

use super::{PipelineError, Result};
use crate::volume_io::{LabelAlphabet, LabelMask, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceAxis {
    /// Slices across `D`.
    Z,
    /// Slices across `H`.
    Y,
    /// Slices across `W`.
    X,
}

impl SliceAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "z" | "Z" => Ok(SliceAxis::Z),
            "y" | "Y" => Ok(SliceAxis::Y),
            "x" | "X" => Ok(SliceAxis::X),
            other => Err(PipelineError::Config(format!(
                "unknown slice axis {other:?} (use x, y or z)"
            ))),
        }
    }

    fn index(self) -> usize {
        match self {
            SliceAxis::Z => 0,
            SliceAxis::Y => 1,
            SliceAxis::X => 2,
        }
    }

    fn name(self) -> char {
        match self {
            SliceAxis::Z => 'z',
            SliceAxis::Y => 'y',
            SliceAxis::X => 'x',
        }
    }
}

pub const COLOR_NCR: [u8; 3] = [0, 0, 255];
pub const COLOR_ED: [u8; 3] = [255, 255, 0];
pub const COLOR_ET: [u8; 3] = [255, 0, 0];

fn label_color(label: u8, alphabet: LabelAlphabet) -> Option<[u8; 3]> {
    match (label, alphabet) {
        (1, _) => Some(COLOR_NCR),
        (2, _) => Some(COLOR_ED),
        (4, LabelAlphabet::External) | (3, LabelAlphabet::Internal) => Some(COLOR_ET),
        _ => None,
    }
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Voxel indices of one slice, row-major over the two remaining axes.
fn slice_indices(dims: [usize; 3], axis: SliceAxis, index: usize) -> (usize, usize, Vec<usize>) {
    let flat = |z: usize, y: usize, x: usize| (z * dims[1] + y) * dims[2] + x;
    match axis {
        SliceAxis::Z => (
            dims[2],
            dims[1],
            (0..dims[1])
                .flat_map(|y| (0..dims[2]).map(move |x| flat(index, y, x)))
                .collect(),
        ),
        SliceAxis::Y => (
            dims[2],
            dims[0],
            (0..dims[0])
                .flat_map(|z| (0..dims[2]).map(move |x| flat(z, index, x)))
                .collect(),
        ),
        SliceAxis::X => (
            dims[1],
            dims[0],
            (0..dims[0])
                .flat_map(|z| (0..dims[1]).map(move |y| flat(z, y, index)))
                .collect(),
        ),
    }
}

fn display_channel(volume: &Volume) -> (usize, f32, f32) {
    let ch = if volume.num_channels() >= 4 { 3 } else { 0 };
    let c = &volume.channels[ch];
    let (lo, hi) = c
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    (ch, lo, hi)
}

fn render(volume: &Volume, mask: Option<&LabelMask>, idx: &[usize]) -> Vec<u8> {
    let (ch, lo, hi) = display_channel(volume);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut rgb = Vec::with_capacity(idx.len() * 3);
    for &i in idx {
        let g = (((volume.channels[ch][i] - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8;
        let px = match mask.and_then(|m| label_color(m.labels[i], m.alphabet)) {
            Some(c) => c.map(|cc| ((g as u16 + cc as u16) / 2) as u8),
            None => [g; 3],
        };
        rgb.extend_from_slice(&px);
    }
    rgb
}

/// One slice: the prediction overlay, and the ground truth overlay to its
/// right (separated by a black column) when given.
pub fn render_slice(
    volume: &Volume,
    pred: &LabelMask,
    gt: Option<&LabelMask>,
    axis: SliceAxis,
    index: usize,
) -> Result<(usize, usize, Vec<u8>)> {
    if index >= volume.dims[axis.index()] {
        return Err(PipelineError::Config(format!(
            "slice {index} outside extent {}",
            volume.dims[axis.index()]
        )));
    }
    for m in std::iter::once(pred).chain(gt) {
        if m.dims != volume.dims {
            return Err(PipelineError::Shape(format!(
                "mask grid {:?} vs volume {:?}",
                m.dims, volume.dims
            )));
        }
    }
    let (w, h, idx) = slice_indices(volume.dims, axis, index);
    let left = render(volume, Some(pred), &idx);
    let Some(gt) = gt else {
        return Ok((w, h, left));
    };
    let right = render(volume, Some(gt), &idx);
    let width = 2 * w + 1;
    let mut rgb = Vec::with_capacity(width * h * 3);
    for row in 0..h {
        rgb.extend_from_slice(&left[row * w * 3..(row + 1) * w * 3]);
        rgb.extend_from_slice(&[0, 0, 0]);
        rgb.extend_from_slice(&right[row * w * 3..(row + 1) * w * 3]);
    }
    Ok((width, h, rgb))
}

/// Slices containing any label in either mask, or the middle slice when
/// there are none.
pub fn labelled_slices(pred: &LabelMask, gt: Option<&LabelMask>, axis: SliceAxis) -> Vec<usize> {
    let n = pred.dims[axis.index()];
    let hit: Vec<usize> = (0..n)
        .filter(|&s| {
            let (_, _, idx) = slice_indices(pred.dims, axis, s);
            idx.iter()
                .any(|&i| pred.labels[i] != 0 || gt.is_some_and(|g| g.labels[i] != 0))
        })
        .collect();
    if hit.is_empty() {
        vec![n / 2]
    } else {
        hit
    }
}

pub fn export_slices(
    volume: &Volume,
    pred: &LabelMask,
    gt: Option<&LabelMask>,
    axis: SliceAxis,
    indices: Option<&[usize]>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let chosen = match indices {
        Some(i) => i.to_vec(),
        None => labelled_slices(pred, gt, axis),
    };
    let safe_id: String = volume
        .id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    chosen
        .into_iter()
        .map(|s| {
            let (w, h, rgb) = render_slice(volume, pred, gt, axis, s)?;
            let path = out_dir.join(format!("{safe_id}_{}{s:03}.ppm", axis.name()));
            std::fs::write(&path, encode_ppm(w, h, &rgb))?;
            Ok(path)
        })
        .collect()
}
