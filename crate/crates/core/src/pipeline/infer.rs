//! Sliding-window inference over volumes larger than the model patch.

use rayon::prelude::*;

use super::{PipelineError, Result};
use crate::model::{ForwardCtx, SegmentationNet};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::volume_io::{LabelAlphabet, LabelMask, Volume, LABEL_ED, LABEL_ET_EXTERNAL};
use crate::windowing::Dims3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PatchWeighting {
    #[default]
    Uniform,
    /// Gaussian importance map with σ = patch/8 per axis.
    Gaussian,
}

#[derive(Debug, Clone)]
pub struct InferenceOutput {
    pub dims: Dims3,
    pub classes: usize,
    /// Averaged probabilities `[K, D, H, W]`.
    pub probs: Vec<f64>,
    /// Argmax class per voxel (lowest index wins ties).
    pub classes_map: Vec<u8>,
    /// Number of patches covering each voxel.
    pub coverage: Vec<u32>,
}

/// Window starts along one axis: stride `patch·(1−overlap)`, last window
/// flush with the end.
pub fn window_starts(n: usize, patch: usize, overlap: f64) -> Vec<usize> {
    if n <= patch {
        return vec![0];
    }
    let stride = ((patch as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let mut starts: Vec<usize> = (0..)
        .map(|i| i * stride)
        .take_while(|&s| s + patch < n)
        .collect();
    starts.push(n - patch);
    starts
}

/// `[C, D, H, W]` tensor of a volume's channels.
pub fn volume_tensor(volume: &Volume) -> Tensor {
    let data = volume
        .channels
        .iter()
        .flat_map(|c| c.iter().map(|&v| v as f64))
        .collect();
    let [d, h, w] = volume.dims;
    Tensor::new(data, &[volume.num_channels(), d, h, w]).expect("volume shape")
}

fn extract(volume: &Volume, origin: Dims3, patch: Dims3) -> Vec<f64> {
    let mut out = Vec::with_capacity(volume.num_channels() * patch.iter().product::<usize>());
    for c in &volume.channels {
        for z in 0..patch[0] {
            for y in 0..patch[1] {
                for x in 0..patch[2] {
                    let p = [origin[0] + z, origin[1] + y, origin[2] + x];
                    let inside = (0..3).all(|a| p[a] < volume.dims[a]);
                    out.push(if inside {
                        c[(p[0] * volume.dims[1] + p[1]) * volume.dims[2] + p[2]] as f64
                    } else {
                        0.0
                    });
                }
            }
        }
    }
    out
}

fn importance(patch: Dims3, weighting: PatchWeighting) -> Option<Vec<f64>> {
    if weighting == PatchWeighting::Uniform {
        return None;
    }
    let sigma = patch.map(|p| (p as f64 / 8.0).max(1e-3));
    let centre = patch.map(|p| (p as f64 - 1.0) / 2.0);
    let mut w = Vec::with_capacity(patch.iter().product());
    for z in 0..patch[0] {
        for y in 0..patch[1] {
            for x in 0..patch[2] {
                let p = [z, y, x];
                let e: f64 = (0..3)
                    .map(|a| ((p[a] as f64 - centre[a]) / sigma[a]).powi(2))
                    .sum();
                w.push((-0.5 * e).exp().max(1e-6));
            }
        }
    }
    Some(w)
}

/// Argmax over the class axis of `[K, V]` probabilities; ties go to the
/// lowest class.
pub fn argmax_classes(probs: &[f64], classes: usize) -> Vec<u8> {
    let v = probs.len() / classes;
    (0..v)
        .map(|i| {
            let mut best = 0;
            for k in 1..classes {
                if probs[k * v + i] > probs[best * v + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

/// Class map to an external-alphabet mask. Four classes are the internal
/// labels; two classes are background / whole tumor (written as edema).
pub fn classes_to_mask(classes_map: &[u8], classes: usize, dims: Dims3) -> Result<LabelMask> {
    let labels = match classes {
        4 => classes_map
            .iter()
            .map(|&c| if c == 3 { LABEL_ET_EXTERNAL } else { c })
            .collect(),
        2 => classes_map
            .iter()
            .map(|&c| if c == 1 { LABEL_ED } else { 0 })
            .collect(),
        k => {
            return Err(PipelineError::Config(format!(
                "no label mapping for {k} classes"
            )))
        }
    };
    Ok(LabelMask::new(dims, labels, LabelAlphabet::External)?)
}

/// Averages per-patch softmax probabilities over overlapping windows.
///
/// Volumes smaller than the patch are zero-padded at the far end and the
/// result cropped back. Patches run in parallel; accumulation follows the
/// fixed patch order, so results do not depend on thread scheduling.
pub fn sliding_window_infer<N: SegmentationNet + Sync>(
    net: &N,
    params: &ParamStore,
    volume: &Volume,
    patch: Dims3,
    overlap: f64,
    weighting: PatchWeighting,
) -> Result<InferenceOutput> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(PipelineError::Config(format!(
            "overlap {overlap} outside [0, 1)"
        )));
    }
    let dims = volume.dims;
    let padded = [0, 1, 2].map(|a| dims[a].max(patch[a]));
    let starts: Vec<Dims3> = {
        let s = [0, 1, 2].map(|a| window_starts(padded[a], patch[a], overlap));
        s[0].iter()
            .flat_map(|&z| {
                s[1].iter().flat_map({
                    let s2 = &s[2];
                    move |&y| s2.iter().map(move |&x| [z, y, x])
                })
            })
            .collect()
    };
    let weights = importance(patch, weighting);
    let pv = patch.iter().product::<usize>();
    let nv = padded.iter().product::<usize>();
    let mut classes = 0;
    let mut acc: Vec<f64> = Vec::new();
    let mut norm = vec![0.0f64; nv];
    let mut coverage = vec![0u32; nv];
    let chunk = (rayon::current_num_threads() * 2).max(1);
    for group in starts.chunks(chunk) {
        let outs: Vec<Result<(Vec<f64>, usize)>> = group
            .par_iter()
            .map(|&origin| {
                let data = extract(volume, origin, patch);
                let x = Tensor::new(data, &[volume.num_channels(), patch[0], patch[1], patch[2]])?;
                let logits = net.logits(&params.bind(false), &x, &mut ForwardCtx::eval())?;
                let k = logits.shape()[0];
                Ok((logits.softmax(0)?.to_vec(), k))
            })
            .collect();
        for (&origin, out) in group.iter().zip(outs) {
            let (p, k) = out?;
            if classes == 0 {
                classes = k;
                acc = vec![0.0; k * nv];
            }
            for z in 0..patch[0] {
                for y in 0..patch[1] {
                    for x in 0..patch[2] {
                        let li = (z * patch[1] + y) * patch[2] + x;
                        let gi = ((origin[0] + z) * padded[1] + origin[1] + y) * padded[2]
                            + origin[2]
                            + x;
                        let w = weights.as_ref().map_or(1.0, |w| w[li]);
                        for c in 0..k {
                            acc[c * nv + gi] += w * p[c * pv + li];
                        }
                        norm[gi] += w;
                        coverage[gi] += 1;
                    }
                }
            }
        }
    }
    let v = dims.iter().product::<usize>();
    let mut probs = vec![0.0; classes * v];
    let mut cov = Vec::with_capacity(v);
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let gi = (z * padded[1] + y) * padded[2] + x;
                let oi = (z * dims[1] + y) * dims[2] + x;
                for c in 0..classes {
                    probs[c * v + oi] = acc[c * nv + gi] / norm[gi];
                }
                cov.push(coverage[gi]);
            }
        }
    }
    let classes_map = argmax_classes(&probs, classes);
    Ok(InferenceOutput {
        dims,
        classes,
        probs,
        classes_map,
        coverage: cov,
    })
}
