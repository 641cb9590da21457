//! Reversible token-grid manipulations.
//!
//! Token grids are `[D, H, W, C]` tensors. Window and stripe partitions are
//! pure row gathers over the flattened grid, so every layout operation here
//! is differentiable and exactly invertible. Patch embedding, merging and
//! expanding carry learned linear maps and live here too.

use crate::params::{linear_fwd, Bound, Init, ParamId, ParamRegistry};
use crate::tensor::{Tensor, TensorError, PAD_INDEX};

pub type Dims3 = [usize; 3];

/// Additive mask value between tokens of different pre-shift regions.
pub const MASK_VALUE: f64 = -1e9;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WindowError {
    #[error("window {window:?} does not tile grid {grid:?}")]
    NotDivisible { grid: Dims3, window: Dims3 },
    #[error("shift {shift:?} must be smaller than window {window:?}")]
    ShiftTooLarge { shift: Dims3, window: Dims3 },
    #[error("invalid layout: {0}")]
    Invalid(String),
    #[error("grid {actual:?} does not match layout grid {expected:?}")]
    GridMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, WindowError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayoutKind {
    Block,
    /// Slabs thin along the given axis, spanning the other two.
    Stripe(usize),
}

/// Decomposition of a token grid into equal windows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowLayout {
    grid: Dims3,
    padded: Dims3,
    window: Dims3,
    shift: Dims3,
    kind: LayoutKind,
}

fn flat(d: usize, h: usize, w: usize, dims: Dims3) -> usize {
    (d * dims[1] + h) * dims[2] + w
}

impl WindowLayout {
    /// Block windows that tile `grid` exactly.
    pub fn block(grid: Dims3, window: Dims3, shift: Dims3) -> Result<Self> {
        if (0..3).any(|a| window[a] == 0 || grid[a] == 0 || grid[a] % window[a] != 0) {
            return Err(WindowError::NotDivisible { grid, window });
        }
        Self::checked(grid, grid, window, shift, LayoutKind::Block)
    }

    /// Block windows over `grid` zero-padded up to a multiple of `window`.
    pub fn block_padded(grid: Dims3, window: Dims3, shift: Dims3) -> Result<Self> {
        if (0..3).any(|a| window[a] == 0 || grid[a] == 0) {
            return Err(WindowError::Invalid(format!(
                "zero extent in grid {grid:?} or window {window:?}"
            )));
        }
        let padded = [0, 1, 2].map(|a| grid[a].div_ceil(window[a]) * window[a]);
        Self::checked(grid, padded, window, shift, LayoutKind::Block)
    }

    /// Stage layout: axes no longer than the window collapse to one window
    /// without shift; `shifted` selects a half-window shift elsewhere.
    pub fn for_stage(grid: Dims3, window: Dims3, shifted: bool) -> Result<Self> {
        let mut win = [0; 3];
        let mut shift = [0; 3];
        for a in 0..3 {
            if grid[a] <= window[a] {
                win[a] = grid[a];
            } else {
                win[a] = window[a];
                if shifted {
                    shift[a] = window[a] / 2;
                }
            }
        }
        Self::block(grid, win, shift)
    }

    /// Stripes of width `sw` along `axis`.
    pub fn stripe(grid: Dims3, axis: usize, sw: usize) -> Result<Self> {
        if axis > 2 {
            return Err(WindowError::Invalid(format!(
                "stripe axis {axis} out of range"
            )));
        }
        let mut window = grid;
        window[axis] = sw;
        if sw == 0 || grid[axis] % sw != 0 {
            return Err(WindowError::NotDivisible { grid, window });
        }
        Self::checked(grid, grid, window, [0; 3], LayoutKind::Stripe(axis))
    }

    fn checked(
        grid: Dims3,
        padded: Dims3,
        window: Dims3,
        shift: Dims3,
        kind: LayoutKind,
    ) -> Result<Self> {
        if (0..3).any(|a| shift[a] >= window[a] && shift[a] != 0) {
            return Err(WindowError::ShiftTooLarge { shift, window });
        }
        Ok(Self {
            grid,
            padded,
            window,
            shift,
            kind,
        })
    }

    pub fn grid(&self) -> Dims3 {
        self.grid
    }

    pub fn padded_grid(&self) -> Dims3 {
        self.padded
    }

    pub fn window(&self) -> Dims3 {
        self.window
    }

    pub fn shift(&self) -> Dims3 {
        self.shift
    }

    pub fn kind(&self) -> LayoutKind {
        self.kind
    }

    pub fn is_shifted(&self) -> bool {
        self.shift.iter().any(|&s| s > 0)
    }

    pub fn windows_per_axis(&self) -> Dims3 {
        [0, 1, 2].map(|a| self.padded[a] / self.window[a])
    }

    pub fn num_windows(&self) -> usize {
        self.windows_per_axis().iter().product()
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window.iter().product()
    }

    /// Padded-grid coordinates of every window slot, windows row-major and
    /// tokens row-major inside each window.
    pub fn slot_coords(&self) -> Vec<Dims3> {
        let nw = self.windows_per_axis();
        let w = self.window;
        let mut out = Vec::with_capacity(self.num_windows() * self.tokens_per_window());
        for a in 0..nw[0] {
            for b in 0..nw[1] {
                for c in 0..nw[2] {
                    for i in 0..w[0] {
                        for j in 0..w[1] {
                            for k in 0..w[2] {
                                out.push([a * w[0] + i, b * w[1] + j, c * w[2] + k]);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Grid row feeding each window slot ([`PAD_INDEX`] in the padding).
    pub fn token_index(&self) -> Vec<usize> {
        self.slot_coords()
            .into_iter()
            .map(|[d, h, w]| {
                if d < self.grid[0] && h < self.grid[1] && w < self.grid[2] {
                    flat(d, h, w, self.grid)
                } else {
                    PAD_INDEX
                }
            })
            .collect()
    }

    /// Window slot holding each grid token.
    pub fn reverse_index(&self) -> Vec<usize> {
        let mut rev = vec![0; self.grid.iter().product()];
        for (slot, g) in self.token_index().into_iter().enumerate() {
            if g != PAD_INDEX {
                rev[g] = slot;
            }
        }
        rev
    }

    /// Region label of every window slot after a cyclic shift by `-shift`:
    /// tokens sharing a label were contiguous before the shift.
    pub fn shift_region_ids(&self) -> Vec<usize> {
        let n = self.padded;
        let region = |a: usize, x: usize| -> usize {
            let (w, s) = (self.window[a], self.shift[a]);
            if s == 0 {
                0
            } else if x < n[a] - w {
                0
            } else if x < n[a] - s {
                1
            } else {
                2
            }
        };
        self.slot_coords()
            .into_iter()
            .map(|[d, h, w]| (region(0, d) * 3 + region(1, h)) * 3 + region(2, w))
            .collect()
    }
}

fn grid_dims(grid: &Tensor) -> Result<(Dims3, usize)> {
    match grid.shape() {
        &[d, h, w, c] => Ok(([d, h, w], c)),
        other => Err(WindowError::Invalid(format!(
            "token grid must be [D, H, W, C], got {other:?}"
        ))),
    }
}

/// Splits a `[D, H, W, C]` grid into `[N, T, C]` windows (shift not applied).
pub fn window_partition(grid: &Tensor, layout: &WindowLayout) -> Result<Tensor> {
    let (dims, c) = grid_dims(grid)?;
    if dims != layout.grid {
        return Err(WindowError::GridMismatch {
            expected: layout.grid.to_vec(),
            actual: dims.to_vec(),
        });
    }
    let rows = grid.reshape(&[dims.iter().product(), c])?;
    let windows = rows.gather_rows(&layout.token_index())?;
    Ok(windows.reshape(&[layout.num_windows(), layout.tokens_per_window(), c])?)
}

/// Inverse of [`window_partition`]; padding is cropped away.
pub fn window_reverse(windows: &Tensor, layout: &WindowLayout) -> Result<Tensor> {
    let (n, t) = (layout.num_windows(), layout.tokens_per_window());
    let c = match windows.shape() {
        &[wn, wt, c] if wn == n && wt == t => c,
        other => {
            return Err(WindowError::GridMismatch {
                expected: vec![n, t],
                actual: other.to_vec(),
            });
        }
    };
    let rows = windows.reshape(&[n * t, c])?;
    let grid = rows.gather_rows(&layout.reverse_index())?;
    let g = layout.grid;
    Ok(grid.reshape(&[g[0], g[1], g[2], c])?)
}

/// Stripes of width `sw` along `axis`, as `[N, T, C]` windows.
pub fn stripe_partition(grid: &Tensor, axis: usize, sw: usize) -> Result<(Tensor, WindowLayout)> {
    let (dims, _) = grid_dims(grid)?;
    let layout = WindowLayout::stripe(dims, axis, sw)?;
    Ok((window_partition(grid, &layout)?, layout))
}

pub fn stripe_reverse(windows: &Tensor, layout: &WindowLayout) -> Result<Tensor> {
    window_reverse(windows, layout)
}

/// Toroidal roll: output position `p` holds input position `p - offset`.
pub fn cyclic_shift(grid: &Tensor, offsets: [isize; 3]) -> Result<Tensor> {
    let (dims, c) = grid_dims(grid)?;
    if offsets == [0; 3] {
        return Ok(grid.clone());
    }
    let src = |p: usize, a: usize| -> usize {
        let n = dims[a] as isize;
        (p as isize - offsets[a]).rem_euclid(n) as usize
    };
    let mut index = Vec::with_capacity(dims.iter().product());
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                index.push(flat(src(d, 0), src(h, 1), src(w, 2), dims));
            }
        }
    }
    let rows = grid.reshape(&[index.len(), c])?.gather_rows(&index)?;
    Ok(rows.reshape(&[dims[0], dims[1], dims[2], c])?)
}

pub fn inverse_cyclic_shift(grid: &Tensor, offsets: [isize; 3]) -> Result<Tensor> {
    cyclic_shift(grid, offsets.map(|o| -o))
}

/// Additive `[N, T, T]` mask for shifted windows: 0 within a pre-shift
/// region, [`MASK_VALUE`] across regions. All zeros without shift.
pub fn shift_attention_mask(layout: &WindowLayout) -> Tensor {
    let (n, t) = (layout.num_windows(), layout.tokens_per_window());
    let mut mask = vec![0.0; n * t * t];
    if layout.is_shifted() {
        let ids = layout.shift_region_ids();
        for win in 0..n {
            let r = &ids[win * t..(win + 1) * t];
            let m = &mut mask[win * t * t..(win + 1) * t * t];
            for i in 0..t {
                for j in 0..t {
                    if r[i] != r[j] {
                        m[i * t + j] = MASK_VALUE;
                    }
                }
            }
        }
    }
    Tensor::new(mask, &[n, t, t]).expect("mask shape")
}

/// Rearranges a `[C_in, D, H, W]` volume into `[D/P, H/M, W/M, P·M·M·C_in]`
/// voxel patches (patch voxels row-major, channel fastest).
pub fn patch_partition(volume: &Tensor, kernel: Dims3) -> Result<Tensor> {
    let (cin, dims) = match volume.shape() {
        &[c, d, h, w] => (c, [d, h, w]),
        other => {
            return Err(WindowError::Invalid(format!(
                "volume must be [C, D, H, W], got {other:?}"
            )))
        }
    };
    if (0..3).any(|a| kernel[a] == 0 || dims[a] % kernel[a] != 0) {
        return Err(WindowError::NotDivisible {
            grid: dims,
            window: kernel,
        });
    }
    let g = [0, 1, 2].map(|a| dims[a] / kernel[a]);
    let x = volume.reshape(&[cin, g[0], kernel[0], g[1], kernel[1], g[2], kernel[2]])?;
    let x = x.permute(&[1, 3, 5, 2, 4, 6, 0])?;
    Ok(x.reshape(&[g[0], g[1], g[2], kernel.iter().product::<usize>() * cin])?)
}

/// Inverse layout of [`patch_partition`] for a channel-last voxel map:
/// `[D', H', W', P·M·M·C]` → `[D'·P, H'·M, W'·M, C]`.
pub fn patch_unpartition(tokens: &Tensor, kernel: Dims3, channels: usize) -> Result<Tensor> {
    let (g, width) = grid_dims(tokens)?;
    if width != kernel.iter().product::<usize>() * channels {
        return Err(WindowError::Invalid(format!(
            "token width {width} is not kernel {kernel:?} × {channels} channels"
        )));
    }
    let x = tokens.reshape(&[g[0], g[1], g[2], kernel[0], kernel[1], kernel[2], channels])?;
    let x = x.permute(&[0, 3, 1, 4, 2, 5, 6])?;
    Ok(x.reshape(&[
        g[0] * kernel[0],
        g[1] * kernel[1],
        g[2] * kernel[2],
        channels,
    ])?)
}

/// Non-overlapping `P×M×M` voxel patches mapped linearly to `C` channels.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub kernel: Dims3,
    pub in_channels: usize,
    pub dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl PatchEmbed {
    pub fn new(
        reg: &mut ParamRegistry,
        prefix: &str,
        kernel: Dims3,
        in_channels: usize,
        dim: usize,
    ) -> Self {
        let fan_in = kernel.iter().product::<usize>() * in_channels;
        Self {
            kernel,
            in_channels,
            dim,
            weight: reg.add(
                format!("{prefix}.weight"),
                &[fan_in, dim],
                Init::TruncNormal(INIT_STD),
            ),
            bias: reg.add(format!("{prefix}.bias"), &[dim], Init::Zeros),
        }
    }

    pub fn forward(&self, p: &Bound, volume: &Tensor) -> Result<Tensor> {
        let patches = patch_partition(volume, self.kernel)?;
        Ok(linear_fwd(p, &patches, self.weight, Some(self.bias))?)
    }
}

/// Concatenates each 2×2×2 neighbourhood (8C) and maps it to 2C.
#[derive(Debug, Clone)]
pub struct PatchMerge {
    pub dim: usize,
    pub weight: ParamId,
}

impl PatchMerge {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, dim: usize) -> Self {
        Self {
            dim,
            weight: reg.add(
                format!("{prefix}.weight"),
                &[8 * dim, 2 * dim],
                Init::TruncNormal(INIT_STD),
            ),
        }
    }

    pub fn forward(&self, p: &Bound, grid: &Tensor) -> Result<Tensor> {
        let merged = merge_neighbourhoods(grid)?;
        Ok(linear_fwd(p, &merged, self.weight, None)?)
    }
}

/// `[D, H, W, C]` → `[D/2, H/2, W/2, 8C]`, neighbours in (d, h, w) row-major order.
pub fn merge_neighbourhoods(grid: &Tensor) -> Result<Tensor> {
    let (g, c) = grid_dims(grid)?;
    if g.iter().any(|&e| e % 2 != 0) {
        return Err(WindowError::NotDivisible {
            grid: g,
            window: [2, 2, 2],
        });
    }
    let x = grid.reshape(&[g[0] / 2, 2, g[1] / 2, 2, g[2] / 2, 2, c])?;
    let x = x.permute(&[0, 2, 4, 1, 3, 5, 6])?;
    Ok(x.reshape(&[g[0] / 2, g[1] / 2, g[2] / 2, 8 * c])?)
}

/// Linear C → 4C, redistributed over a 2×2×2 neighbourhood of C/2 channels.
#[derive(Debug, Clone)]
pub struct PatchExpand {
    pub dim: usize,
    pub weight: ParamId,
}

impl PatchExpand {
    pub fn new(
        reg: &mut ParamRegistry,
        prefix: &str,
        dim: usize,
    ) -> std::result::Result<Self, WindowError> {
        if dim % 2 != 0 || dim == 0 {
            return Err(WindowError::Invalid(format!(
                "patch expand needs an even channel count, got {dim}"
            )));
        }
        Ok(Self {
            dim,
            weight: reg.add(
                format!("{prefix}.weight"),
                &[dim, 4 * dim],
                Init::TruncNormal(INIT_STD),
            ),
        })
    }

    pub fn forward(&self, p: &Bound, grid: &Tensor) -> Result<Tensor> {
        let (_, c) = grid_dims(grid)?;
        if c != self.dim {
            return Err(WindowError::Invalid(format!(
                "expected {} channels, got {c}",
                self.dim
            )));
        }
        let x = linear_fwd(p, grid, self.weight, None)?;
        Ok(patch_unpartition(&x, [2, 2, 2], self.dim / 2)?)
    }
}

/// Token grid back to voxel resolution: linear C → P·M·M·C_out, unpartitioned.
#[derive(Debug, Clone)]
pub struct FinalExpand {
    pub kernel: Dims3,
    pub dim: usize,
    pub out_channels: usize,
    pub weight: ParamId,
}

impl FinalExpand {
    pub fn new(
        reg: &mut ParamRegistry,
        prefix: &str,
        kernel: Dims3,
        dim: usize,
        out_channels: usize,
    ) -> std::result::Result<Self, WindowError> {
        if out_channels == 0 {
            return Err(WindowError::Invalid(format!(
                "final expand needs at least one output channel (dim {dim})"
            )));
        }
        let fan_out = kernel.iter().product::<usize>() * out_channels;
        Ok(Self {
            kernel,
            dim,
            out_channels,
            weight: reg.add(
                format!("{prefix}.weight"),
                &[dim, fan_out],
                Init::TruncNormal(INIT_STD),
            ),
        })
    }

    pub fn forward(&self, p: &Bound, grid: &Tensor) -> Result<Tensor> {
        let x = linear_fwd(p, grid, self.weight, None)?;
        patch_unpartition(&x, self.kernel, self.out_channels)
    }
}
