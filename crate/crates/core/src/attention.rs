//! Self-attention variants.
//!
//! * [`self_attention`]: `SoftMax(QKᵀ/√d)·V`.
//! * [`WindowAttention`]: multi-head attention inside block windows with a
//!   learned relative position bias added to the logits, plus the optional
//!   shifted-window mask.
//! * [`CrossShapedAttention`]: heads split into three groups, one per axis;
//!   each group attends inside axis-aligned stripes and adds a depthwise
//!   3×3×3 convolution of its values (locally-enhanced positional encoding).
//!
//! The logit scale is `1/√d` with `d` the per-head width.

use crate::params::{linear_fwd, Bound, Init, ParamId, ParamRegistry};
use crate::tensor::{Tensor, TensorError};
use crate::windowing::{window_partition, window_reverse, Dims3, WindowError, WindowLayout};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AttentionError {
    #[error("{heads} heads do not divide {dim} channels")]
    IndivisibleHeads { dim: usize, heads: usize },
    #[error("cross-shaped attention needs a head count divisible by 3, got {0}")]
    HeadsNotDivisibleBy3(usize),
    #[error("bias table built for window {expected:?}, layout has {actual:?}")]
    WindowMismatch { expected: Dims3, actual: Dims3 },
    #[error(transparent)]
    Window(#[from] WindowError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, AttentionError>;

/// Row-stochastic attention weights `SoftMax(QKᵀ/√d + additive)` over the
/// last two axes of `[.., T, d]` inputs.
pub fn attention_probs(q: &Tensor, k: &Tensor, additive: Option<&Tensor>) -> Result<Tensor> {
    let d = *q.shape().last().unwrap_or(&1);
    let mut scores = q
        .matmul(&k.transpose_last()?)?
        .mul_scalar(1.0 / (d as f64).sqrt());
    if let Some(a) = additive {
        scores = scores.add(a)?;
    }
    Ok(scores.softmax(scores.rank() - 1)?)
}

/// Scaled dot-product attention over `[.., T, d]` tensors.
pub fn self_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    Ok(attention_probs(q, k, None)?.matmul(v)?)
}

/// `[N, T, C]` → `[N, h, T, C/h]`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (n, t, c) = match x.shape() {
        &[n, t, c] => (n, t, c),
        other => {
            return Err(TensorError::Invalid {
                op: "split_heads",
                msg: format!("expected [N, T, C], got {other:?}"),
            }
            .into())
        }
    };
    if heads == 0 || c % heads != 0 {
        return Err(AttentionError::IndivisibleHeads { dim: c, heads });
    }
    Ok(x.reshape(&[n, t, heads, c / heads])?
        .permute(&[0, 2, 1, 3])?)
}

/// `[N, h, T, d]` → `[N, T, h·d]`.
pub fn merge_heads(x: &Tensor) -> Result<Tensor> {
    match x.shape() {
        &[n, h, t, d] => Ok(x.permute(&[0, 2, 1, 3])?.reshape(&[n, t, h * d])?),
        other => Err(TensorError::Invalid {
            op: "merge_heads",
            msg: format!("expected [N, h, T, d], got {other:?}"),
        }
        .into()),
    }
}

/// Splits `q`, `k`, `v` (`[N, T, C]`) into heads, applies `op` to the
/// `[N, h, T, d]` views, concatenates the heads, and projects with `W_out`.
pub fn multi_head_wrap<F>(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    out_weight: &Tensor,
    out_bias: Option<&Tensor>,
    op: F,
) -> Result<Tensor>
where
    F: FnOnce(&Tensor, &Tensor, &Tensor) -> Result<Tensor>,
{
    let (qh, kh, vh) = (
        split_heads(q, heads)?,
        split_heads(k, heads)?,
        split_heads(v, heads)?,
    );
    let merged = merge_heads(&op(&qh, &kh, &vh)?)?;
    Ok(merged.linear(out_weight, out_bias)?)
}

/// Per token pair `(i, j)` of a window, the row of the relative-position
/// table indexed by their coordinate offset.
pub fn relative_position_index(window: Dims3) -> Vec<usize> {
    let coords: Vec<[isize; 3]> = (0..window[0])
        .flat_map(|d| {
            (0..window[1]).flat_map(move |h| {
                (0..window[2]).map(move |w| [d as isize, h as isize, w as isize])
            })
        })
        .collect();
    let span = window.map(|w| 2 * w - 1);
    let mut index = Vec::with_capacity(coords.len() * coords.len());
    for a in &coords {
        for b in &coords {
            let r = [0, 1, 2].map(|x| (a[x] - b[x] + window[x] as isize - 1) as usize);
            index.push((r[0] * span[1] + r[1]) * span[2] + r[2]);
        }
    }
    index
}

pub fn relative_table_rows(window: Dims3) -> usize {
    window.iter().map(|w| 2 * w - 1).product()
}

#[derive(Debug, Clone)]
pub struct Projection {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Projection {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, fan_in: usize, fan_out: usize) -> Self {
        Self::with_init(reg, prefix, fan_in, fan_out, Init::TruncNormal(INIT_STD))
    }

    pub fn with_init(
        reg: &mut ParamRegistry,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
    ) -> Self {
        Self {
            weight: reg.add(format!("{prefix}.weight"), &[fan_in, fan_out], init),
            bias: reg.add(format!("{prefix}.bias"), &[fan_out], Init::Zeros),
        }
    }

    pub fn forward(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        Ok(linear_fwd(p, x, self.weight, Some(self.bias))?)
    }
}

/// Window multi-head self-attention with relative position bias.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    pub dim: usize,
    pub heads: usize,
    pub window: Dims3,
    pub qkv: Projection,
    pub out: Projection,
    /// `[(2w_d−1)(2w_h−1)(2w_w−1), heads]`
    pub bias_table: ParamId,
    rel_index: Vec<usize>,
}

impl WindowAttention {
    pub fn new(
        reg: &mut ParamRegistry,
        prefix: &str,
        dim: usize,
        heads: usize,
        window: Dims3,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(AttentionError::IndivisibleHeads { dim, heads });
        }
        Ok(Self {
            dim,
            heads,
            window,
            qkv: Projection::new(reg, &format!("{prefix}.qkv"), dim, 3 * dim),
            out: Projection::new(reg, &format!("{prefix}.proj"), dim, dim),
            bias_table: reg.add(
                format!("{prefix}.relative_position_bias_table"),
                &[relative_table_rows(window), heads],
                Init::Zeros,
            ),
            rel_index: relative_position_index(window),
        })
    }

    /// Bias `B` as `[h, T, T]`.
    pub fn position_bias(&self, p: &Bound) -> Result<Tensor> {
        let t = self.window.iter().product::<usize>();
        let b = p.get(self.bias_table).gather_rows(&self.rel_index)?;
        Ok(b.reshape(&[t, t, self.heads])?.permute(&[2, 0, 1])?)
    }

    fn project(&self, p: &Bound, windows: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let qkv = self.qkv.forward(p, windows)?;
        let c = self.dim;
        Ok((
            qkv.slice(2, 0, c)?,
            qkv.slice(2, c, 2 * c)?,
            qkv.slice(2, 2 * c, 3 * c)?,
        ))
    }

    fn additive(&self, p: &Bound, n: usize, mask: Option<&Tensor>) -> Result<Tensor> {
        let t = self.window.iter().product::<usize>();
        let shape = [n, self.heads, t, t];
        let bias = self
            .position_bias(p)?
            .reshape(&[1, self.heads, t, t])?
            .broadcast_to(&shape)?;
        Ok(match mask {
            Some(m) => bias.add(&m.reshape(&[n, 1, t, t])?.broadcast_to(&shape)?)?,
            None => bias,
        })
    }

    fn check(&self, windows: &Tensor) -> Result<usize> {
        let t = self.window.iter().product::<usize>();
        match windows.shape() {
            &[n, wt, c] if wt == t && c == self.dim => Ok(n),
            other => Err(TensorError::ShapeMismatch {
                op: "window_attention",
                lhs: other.to_vec(),
                rhs: vec![t, self.dim],
            }
            .into()),
        }
    }

    /// Attention over `[N, T, C]` windows; `mask` is `[N, T, T]` additive.
    pub fn forward(&self, p: &Bound, windows: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let n = self.check(windows)?;
        let (q, k, v) = self.project(p, windows)?;
        let additive = self.additive(p, n, mask)?;
        multi_head_wrap(
            &q,
            &k,
            &v,
            self.heads,
            p.get(self.out.weight),
            Some(p.get(self.out.bias)),
            |q, k, v| Ok(attention_probs(q, k, Some(&additive))?.matmul(v)?),
        )
    }

    /// Attention weights `[N, h, T, T]`, for inspection.
    pub fn attention_maps(
        &self,
        p: &Bound,
        windows: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<Tensor> {
        let n = self.check(windows)?;
        let (q, k, _) = self.project(p, windows)?;
        let additive = self.additive(p, n, mask)?;
        attention_probs(
            &split_heads(&q, self.heads)?,
            &split_heads(&k, self.heads)?,
            Some(&additive),
        )
    }

    pub fn check_layout(&self, layout: &WindowLayout) -> Result<()> {
        if layout.window() != self.window {
            return Err(AttentionError::WindowMismatch {
                expected: self.window,
                actual: layout.window(),
            });
        }
        Ok(())
    }
}

/// Depthwise 3×3×3 kernel applied to values inside each stripe.
#[derive(Debug, Clone)]
pub struct Lepe {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Cross-shaped window attention over a `[D, H, W, C]` grid.
#[derive(Debug, Clone)]
pub struct CrossShapedAttention {
    pub dim: usize,
    pub heads: usize,
    pub stripe_width: usize,
    pub qkv: Projection,
    pub out: Projection,
    /// One operator per axis group.
    pub lepe: [Lepe; 3],
}

impl CrossShapedAttention {
    pub fn new(
        reg: &mut ParamRegistry,
        prefix: &str,
        dim: usize,
        heads: usize,
        stripe_width: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(AttentionError::IndivisibleHeads { dim, heads });
        }
        if heads % 3 != 0 {
            return Err(AttentionError::HeadsNotDivisibleBy3(heads));
        }
        let group = dim / 3;
        let lepe = [0, 1, 2].map(|g| Lepe {
            weight: reg.add(
                format!("{prefix}.lepe{g}.weight"),
                &[27, group],
                Init::TruncNormal(INIT_STD),
            ),
            bias: reg.add(format!("{prefix}.lepe{g}.bias"), &[group], Init::Zeros),
        });
        Ok(Self {
            dim,
            heads,
            stripe_width,
            qkv: Projection::new(reg, &format!("{prefix}.qkv"), dim, 3 * dim),
            out: Projection::new(reg, &format!("{prefix}.proj"), dim, dim),
            lepe,
        })
    }

    /// Stripe layout of axis group `axis`; the width is capped at the extent.
    pub fn layout(&self, grid: Dims3, axis: usize) -> Result<WindowLayout> {
        Ok(WindowLayout::stripe(
            grid,
            axis,
            self.stripe_width.min(grid[axis]),
        )?)
    }

    fn grid_of(&self, x: &Tensor) -> Result<Dims3> {
        match x.shape() {
            &[d, h, w, c] if c == self.dim => Ok([d, h, w]),
            other => Err(TensorError::ShapeMismatch {
                op: "csw_msa",
                lhs: other.to_vec(),
                rhs: vec![self.dim],
            }
            .into()),
        }
    }

    /// Per axis group: the layout, partitioned q/k/v `[N, T, C/3]`.
    fn group_qkv(
        &self,
        p: &Bound,
        x: &Tensor,
    ) -> Result<Vec<(WindowLayout, Tensor, Tensor, Tensor)>> {
        let grid = self.grid_of(x)?;
        let qkv = self.qkv.forward(p, x)?;
        let (c, cg) = (self.dim, self.dim / 3);
        (0..3)
            .map(|g| {
                let layout = self.layout(grid, g)?;
                let part = |offset: usize| -> Result<Tensor> {
                    let s = qkv.slice(3, offset + g * cg, offset + (g + 1) * cg)?;
                    Ok(window_partition(&s, &layout)?)
                };
                Ok((layout.clone(), part(0)?, part(c)?, part(2 * c)?))
            })
            .collect()
    }

    pub fn forward(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        let groups = self.group_qkv(p, x)?;
        let hg = self.heads / 3;
        let cg = self.dim / 3;
        let mut outs = Vec::with_capacity(3);
        for (g, (layout, q, k, v)) in groups.into_iter().enumerate() {
            let attended = merge_heads(&self_attention(
                &split_heads(&q, hg)?,
                &split_heads(&k, hg)?,
                &split_heads(&v, hg)?,
            )?)?;
            let w = layout.window();
            let n = layout.num_windows();
            let lepe = v
                .reshape(&[n, w[0], w[1], w[2], cg])?
                .depthwise_conv3d(p.get(self.lepe[g].weight), p.get(self.lepe[g].bias))?
                .reshape(&[n, w.iter().product(), cg])?;
            outs.push(window_reverse(&attended.add(&lepe)?, &layout)?);
        }
        let refs: Vec<&Tensor> = outs.iter().collect();
        let joined = Tensor::concat(&refs, 3)?;
        self.out.forward(p, &joined)
    }

    /// Attention weights of each axis group, `[N, h/3, T, T]`, with layouts.
    pub fn attention_maps(&self, p: &Bound, x: &Tensor) -> Result<Vec<(WindowLayout, Tensor)>> {
        let hg = self.heads / 3;
        self.group_qkv(p, x)?
            .into_iter()
            .map(|(layout, q, k, _)| {
                Ok((
                    layout,
                    attention_probs(&split_heads(&q, hg)?, &split_heads(&k, hg)?, None)?,
                ))
            })
            .collect()
    }
}
