//! Intensity normalization and cropping to the training patch size.

use crate::evaluation::percentile;
use crate::volume_io::{LabelMask, Volume};
use crate::windowing::Dims3;

/// Per channel: optional percentile clip, then min-max scaling to `[0, 1]`.
/// Constant channels become zeros; their indices are returned.
pub fn normalize_intensities(volume: &Volume, clip: Option<[f64; 2]>) -> (Volume, Vec<usize>) {
    let mut constant = Vec::new();
    let channels = volume
        .channels
        .iter()
        .enumerate()
        .map(|(ci, c)| {
            let vals: Vec<f64> = c.iter().map(|&v| v as f64).collect();
            let (lo, hi) = match clip {
                Some([pl, ph]) => (percentile(&vals, pl), percentile(&vals, ph)),
                None => vals
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                        (a.min(v), b.max(v))
                    }),
            };
            let clipped: Vec<f64> = vals.iter().map(|v| v.clamp(lo, hi)).collect();
            let (min, max) = clipped
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                    (a.min(v), b.max(v))
                });
            if !(max > min) {
                log::warn!("{}: channel {ci} is constant; scaled to zeros", volume.id);
                constant.push(ci);
                return vec![0.0f32; c.len()];
            }
            clipped
                .iter()
                .map(|v| ((v - min) / (max - min)) as f32)
                .collect()
        })
        .collect();
    (
        Volume {
            channels,
            ..volume.clone()
        },
        constant,
    )
}

/// Inclusive-exclusive bounding box of voxels nonzero in any channel.
pub fn nonzero_bbox(volume: &Volume) -> Option<[(usize, usize); 3]> {
    let [_, h, w] = volume.dims;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for i in 0..volume.voxels() {
        if volume.channels.iter().any(|c| c[i] != 0.0) {
            let p = [i / (h * w), (i / w) % h, i % w];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a] + 1);
            }
            any = true;
        }
    }
    any.then(|| [0, 1, 2].map(|a| (lo[a], hi[a])))
}

/// Start of a `size` window centred on the bounding box, kept inside the
/// volume when it fits, centred on the volume's padding when it does not.
pub fn crop_origin(dims: Dims3, bbox: Option<[(usize, usize); 3]>, size: Dims3) -> [isize; 3] {
    [0, 1, 2].map(|a| {
        let (n, s) = (dims[a] as isize, size[a] as isize);
        let centre2 = match bbox {
            Some(b) => (b[a].0 + b[a].1) as isize,
            None => n,
        };
        let start = (centre2 - s).div_euclid(2);
        if n >= s {
            start.clamp(0, n - s)
        } else {
            -(s - n) / 2
        }
    })
}

fn window<T: Copy>(src: &[T], dims: Dims3, origin: [isize; 3], size: Dims3, fill: T) -> Vec<T> {
    let mut out = Vec::with_capacity(size.iter().product());
    for z in 0..size[0] as isize {
        for y in 0..size[1] as isize {
            for x in 0..size[2] as isize {
                let p = [origin[0] + z, origin[1] + y, origin[2] + x];
                let inside = (0..3).all(|a| p[a] >= 0 && p[a] < dims[a] as isize);
                out.push(if inside {
                    src[((p[0] as usize) * dims[1] + p[1] as usize) * dims[2] + p[2] as usize]
                } else {
                    fill
                });
            }
        }
    }
    out
}

pub fn crop_volume(volume: &Volume, origin: [isize; 3], size: Dims3) -> Volume {
    Volume {
        dims: size,
        channels: volume
            .channels
            .iter()
            .map(|c| window(c, volume.dims, origin, size, 0.0))
            .collect(),
        ..volume.clone()
    }
}

pub fn crop_mask(mask: &LabelMask, origin: [isize; 3], size: Dims3) -> LabelMask {
    LabelMask {
        dims: size,
        labels: window(&mask.labels, mask.dims, origin, size, 0),
        alphabet: mask.alphabet,
    }
}

/// Normalized, cropped case plus the crop origin in source coordinates.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub volume: Volume,
    pub mask: Option<LabelMask>,
    pub origin: [isize; 3],
    pub constant_channels: Vec<usize>,
}

pub fn preprocess(
    volume: &Volume,
    mask: Option<&LabelMask>,
    clip: Option<[f64; 2]>,
    size: Dims3,
) -> Preprocessed {
    let origin = crop_origin(volume.dims, nonzero_bbox(volume), size);
    let (norm, constant_channels) = normalize_intensities(volume, clip);
    Preprocessed {
        volume: crop_volume(&norm, origin, size),
        mask: mask.map(|m| crop_mask(m, origin, size)),
        origin,
        constant_channels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(values: Vec<f32>, dims: Dims3) -> Volume {
        Volume::new("t", dims, [1.0; 3], vec![values]).unwrap()
    }

    #[test]
    fn min_max_without_clip() {
        let v = vol((0..=200).map(|x| x as f32).collect(), [1, 1, 201]);
        let (n, c) = normalize_intensities(&v, None);
        assert!(c.is_empty());
        assert_eq!(n.channels[0][50], 0.25);
        assert_eq!(n.channels[0][0], 0.0);
        assert_eq!(n.channels[0][200], 1.0);
    }

    #[test]
    fn constant_channel_becomes_zero() {
        let v = vol(vec![7.0; 8], [2, 2, 2]);
        let (n, c) = normalize_intensities(&v, Some([0.5, 99.5]));
        assert_eq!(c, vec![0]);
        assert!(n.channels[0].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn crop_centres_on_bbox_and_pads() {
        let mut data = vec![0.0f32; 10];
        data[8] = 1.0;
        let v = vol(data, [1, 1, 10]);
        let o = crop_origin(v.dims, nonzero_bbox(&v), [1, 1, 4]);
        assert_eq!(o, [0, 0, 6]);
        let c = crop_volume(&v, o, [1, 1, 4]);
        assert_eq!(c.channels[0], vec![0.0, 0.0, 1.0, 0.0]);
        let o = crop_origin([1, 1, 2], None, [1, 1, 4]);
        assert_eq!(o[2], -1);
    }
}
