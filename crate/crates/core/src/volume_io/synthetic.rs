//! Synthetic four-modality cases with a nested tumor.
//!
//! A brain ellipsoid holds a whole-tumor ellipsoid; inside it, a tumor-core
//! ellipsoid whose outer shell is enhancing tumor around a necrotic centre.
//! Every tissue class has a fixed intensity per modality, plus Gaussian noise
//! inside the brain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    LabelAlphabet, LabelMask, Result, Volume, VolumeError, LABEL_ED, LABEL_ET_EXTERNAL, LABEL_NCR,
};
use crate::windowing::Dims3;

pub const MIN_SYNTHETIC_DIM: usize = 16;
pub const DEFAULT_DIFFICULTY: f64 = 0.05;
/// Intensities are profile values times this.
pub const INTENSITY_SCALE: f64 = 1000.0;

const MAX_ATTEMPTS: usize = 64;

// Rows: background, healthy brain, NCR/NET, ED, ET. Columns: T1, T1CE, T2, FLAIR.
const PROFILES: [[f64; 4]; 5] = [
    [0.0, 0.0, 0.0, 0.0],
    [0.60, 0.55, 0.45, 0.40],
    [0.30, 0.30, 0.85, 0.55],
    [0.45, 0.45, 0.80, 0.90],
    [0.50, 0.95, 0.60, 0.70],
];

#[derive(Clone, Copy)]
enum Tissue {
    Background = 0,
    Brain = 1,
    Necrotic = 2,
    Edema = 3,
    Enhancing = 4,
}

struct Ellipsoid {
    centre: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    /// Squared normalized radius of a voxel centre.
    fn rho2(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.centre[a]) / self.radii[a]).powi(2))
            .sum()
    }
}

struct Layout {
    brain: Ellipsoid,
    wt: Ellipsoid,
    tc: Ellipsoid,
    /// Normalized radius inside the core below which tissue is necrotic.
    core: f64,
}

fn sample_layout(rng: &mut ChaCha8Rng, dims: Dims3) -> Layout {
    let d = dims.map(|e| e as f64);
    let mid = d.map(|e| (e - 1.0) / 2.0);
    let brain = Ellipsoid {
        centre: mid.map(|m| m + rng.random_range(-0.02..0.02) * m),
        radii: d.map(|e| e * rng.random_range(0.40..0.46)),
    };
    let centre = [0, 1, 2].map(|a| mid[a] + rng.random_range(-0.15..0.15) * d[a]);
    let wt_radii = d.map(|e| e * rng.random_range(0.18..0.25));
    let tc_scale = rng.random_range(0.55..0.70);
    let tc_centre = [0, 1, 2].map(|a| centre[a] + rng.random_range(-0.1..0.1) * wt_radii[a]);
    Layout {
        brain,
        wt: Ellipsoid {
            centre,
            radii: wt_radii,
        },
        tc: Ellipsoid {
            centre: tc_centre,
            radii: wt_radii.map(|r| r * tc_scale),
        },
        core: rng.random_range(0.45..0.65),
    }
}

fn rasterize(layout: &Layout, dims: Dims3) -> Vec<Tissue> {
    let mut out = Vec::with_capacity(dims.iter().product());
    let core2 = layout.core * layout.core;
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [z as f64, y as f64, x as f64];
                let tc = layout.tc.rho2(p);
                let t = if tc <= 1.0 && layout.wt.rho2(p) <= 1.0 {
                    if tc < core2 {
                        Tissue::Necrotic
                    } else {
                        Tissue::Enhancing
                    }
                } else if layout.wt.rho2(p) <= 1.0 {
                    Tissue::Edema
                } else if layout.brain.rho2(p) <= 1.0 {
                    Tissue::Brain
                } else {
                    Tissue::Background
                };
                out.push(t);
            }
        }
    }
    out
}

/// `(WT, TC, ET)` voxel counts.
fn region_counts(tissue: &[Tissue]) -> (usize, usize, usize) {
    let mut c = [0usize; 5];
    for &t in tissue {
        c[t as usize] += 1;
    }
    let et = c[Tissue::Enhancing as usize];
    let tc = et + c[Tissue::Necrotic as usize];
    (tc + c[Tissue::Edema as usize], tc, et)
}

/// Deterministic case for `seed`; labels use the external alphabet.
///
/// `difficulty` is the noise standard deviation relative to the intensity
/// scale. Layouts are redrawn until `WT > TC > ET > 0` (voxel counts).
pub fn generate_synthetic(seed: u64, dims: Dims3, difficulty: f64) -> Result<(Volume, LabelMask)> {
    if dims.iter().any(|&d| d < MIN_SYNTHETIC_DIM) {
        return Err(VolumeError::DimsTooSmall {
            dims,
            min: MIN_SYNTHETIC_DIM,
        });
    }
    if !(difficulty.is_finite() && difficulty >= 0.0) {
        return Err(VolumeError::Shape(format!(
            "difficulty {difficulty} must be non-negative"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tissue = None;
    for _ in 0..MAX_ATTEMPTS {
        let t = rasterize(&sample_layout(&mut rng, dims), dims);
        let (wt, tc, et) = region_counts(&t);
        if wt > tc && tc > et && et > 0 {
            tissue = Some(t);
            break;
        }
    }
    let tissue =
        tissue.ok_or_else(|| VolumeError::Shape(format!("no valid tumor layout for {dims:?}")))?;
    let gain: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.95..1.05));
    let noise = Normal::new(0.0, difficulty * INTENSITY_SCALE).expect("finite std");
    let channels = (0..4)
        .map(|m| {
            tissue
                .iter()
                .map(|&t| {
                    let base = PROFILES[t as usize][m] * gain[m] * INTENSITY_SCALE;
                    let v = match t {
                        Tissue::Background => base,
                        _ if difficulty > 0.0 => (base + noise.sample(&mut rng)).max(0.0),
                        _ => base,
                    };
                    v as f32
                })
                .collect()
        })
        .collect();
    let labels = tissue
        .iter()
        .map(|&t| match t {
            Tissue::Background | Tissue::Brain => 0,
            Tissue::Necrotic => LABEL_NCR,
            Tissue::Edema => LABEL_ED,
            Tissue::Enhancing => LABEL_ET_EXTERNAL,
        })
        .collect();
    let volume = Volume::new(
        format!("synthetic-{seed:06}"),
        dims,
        [1.0, 1.0, 1.0],
        channels,
    )?;
    Ok((
        volume,
        LabelMask::new(dims, labels, LabelAlphabet::External)?,
    ))
}
