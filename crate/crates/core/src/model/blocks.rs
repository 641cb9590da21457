//! Transformer blocks: pre-norm attention and MLP sub-layers with residuals.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{CrossShapedAttention, Projection, WindowAttention};
use crate::params::{Bound, Init, ParamId, ParamRegistry};
use crate::tensor::{Tensor, LAYER_NORM_EPS};
use crate::windowing::{
    cyclic_shift, inverse_cyclic_shift, shift_attention_mask, window_partition, window_reverse,
    Dims3, WindowLayout,
};

use super::Result;

/// Dropout state for one forward pass. Evaluation mode never drops.
#[derive(Debug)]
pub struct ForwardCtx {
    drop_rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            drop_rate: 0.0,
            rng: None,
        }
    }

    pub fn train(drop_rate: f64, rng: ChaCha8Rng) -> Self {
        Self {
            drop_rate,
            rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-p)`.
    pub fn dropout(&mut self, x: &Tensor) -> Result<Tensor> {
        let p = self.drop_rate;
        let Some(rng) = self.rng.as_mut().filter(|_| p > 0.0) else {
            return Ok(x.clone());
        };
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..x.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        Ok(x.mul(&Tensor::new(mask, x.shape())?)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, dim: usize) -> Self {
        Self {
            gamma: reg.add(format!("{prefix}.weight"), &[dim], Init::Ones),
            beta: reg.add(format!("{prefix}.bias"), &[dim], Init::Zeros),
        }
    }

    pub fn forward(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        Ok(x.layer_norm(p.get(self.gamma), p.get(self.beta), LAYER_NORM_EPS)?)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Projection,
    pub fc2: Projection,
}

impl Mlp {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Projection::new(reg, &format!("{prefix}.fc1"), dim, hidden),
            fc2: Projection::new(reg, &format!("{prefix}.fc2"), hidden, dim),
        }
    }

    pub fn forward(&self, p: &Bound, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let h = ctx.dropout(&self.fc1.forward(p, x)?.gelu())?;
        Ok(self.fc2.forward(p, &h)?)
    }
}

/// One W-MSA (or SW-MSA, when the layout is shifted) transformer block.
#[derive(Debug, Clone)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub layout: WindowLayout,
    mask: Option<Vec<f64>>,
}

impl SwinBlock {
    pub fn new(
        reg: &mut ParamRegistry,
        prefix: &str,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        layout: WindowLayout,
    ) -> Result<Self> {
        let attn =
            WindowAttention::new(reg, &format!("{prefix}.attn"), dim, heads, layout.window())?;
        let mask = layout
            .is_shifted()
            .then(|| shift_attention_mask(&layout).to_vec());
        Ok(Self {
            norm1: LayerNorm::new(reg, &format!("{prefix}.norm1"), dim),
            attn,
            norm2: LayerNorm::new(reg, &format!("{prefix}.norm2"), dim),
            mlp: Mlp::new(reg, &format!("{prefix}.mlp"), dim, mlp_hidden),
            layout,
            mask,
        })
    }

    fn signed_shift(&self) -> [isize; 3] {
        self.layout.shift().map(|s| -(s as isize))
    }

    /// (S)W-MSA sub-layer without residual, on a `[D, H, W, C]` grid.
    pub fn attention(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        let shift = self.signed_shift();
        let shifted = cyclic_shift(x, shift)?;
        let windows = window_partition(&shifted, &self.layout)?;
        let mask = match &self.mask {
            Some(m) => {
                let t = self.layout.tokens_per_window();
                Some(Tensor::new(m.clone(), &[self.layout.num_windows(), t, t])?)
            }
            None => None,
        };
        let attended = self.attn.forward(p, &windows, mask.as_ref())?;
        let merged = window_reverse(&attended, &self.layout)?;
        Ok(inverse_cyclic_shift(&merged, shift)?)
    }

    pub fn forward(&self, p: &Bound, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let a = self.attention(p, &self.norm1.forward(p, x)?)?;
        let x = x.add(&ctx.dropout(&a)?)?;
        let m = self.mlp.forward(p, &self.norm2.forward(p, &x)?, ctx)?;
        Ok(x.add(&ctx.dropout(&m)?)?)
    }
}

/// One CSW-MSA transformer block.
#[derive(Debug, Clone)]
pub struct CSwinBlock {
    pub norm1: LayerNorm,
    pub attn: CrossShapedAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl CSwinBlock {
    pub fn new(
        reg: &mut ParamRegistry,
        prefix: &str,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        stripe_width: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(reg, &format!("{prefix}.norm1"), dim),
            attn: CrossShapedAttention::new(
                reg,
                &format!("{prefix}.attn"),
                dim,
                heads,
                stripe_width,
            )?,
            norm2: LayerNorm::new(reg, &format!("{prefix}.norm2"), dim),
            mlp: Mlp::new(reg, &format!("{prefix}.mlp"), dim, mlp_hidden),
        })
    }

    pub fn forward(&self, p: &Bound, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let a = self.attn.forward(p, &self.norm1.forward(p, x)?)?;
        let x = x.add(&ctx.dropout(&a)?)?;
        let m = self.mlp.forward(p, &self.norm2.forward(p, &x)?, ctx)?;
        Ok(x.add(&ctx.dropout(&m)?)?)
    }
}

/// Successive Swin blocks alternating W-MSA and SW-MSA (VT-W-MSA-Blk).
#[derive(Debug, Clone)]
pub struct VtWMsaBlock {
    pub blocks: Vec<SwinBlock>,
}

impl VtWMsaBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        reg: &mut ParamRegistry,
        prefix: &str,
        grid: Dims3,
        window: Dims3,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        depth: usize,
    ) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| {
                let layout = WindowLayout::for_stage(grid, window, i % 2 == 1)?;
                SwinBlock::new(
                    reg,
                    &format!("{prefix}.{i}"),
                    dim,
                    heads,
                    mlp_hidden,
                    layout,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn forward(&self, p: &Bound, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let mut x = x.clone();
        for b in &self.blocks {
            x = b.forward(p, &x, ctx)?;
        }
        Ok(x)
    }
}

/// Successive CSwin blocks (VT-CS-W-MSA-Blk).
#[derive(Debug, Clone)]
pub struct VtCsWMsaBlock {
    pub blocks: Vec<CSwinBlock>,
}

impl VtCsWMsaBlock {
    pub fn new(
        reg: &mut ParamRegistry,
        prefix: &str,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        stripe_width: usize,
        depth: usize,
    ) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| {
                CSwinBlock::new(
                    reg,
                    &format!("{prefix}.{i}"),
                    dim,
                    heads,
                    mlp_hidden,
                    stripe_width,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn forward(&self, p: &Bound, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let mut x = x.clone();
        for b in &self.blocks {
            x = b.forward(p, &x, ctx)?;
        }
        Ok(x)
    }
}

/// Convex combination `α·z_s + (1−α)·z_cs` of the two encoder branches.
pub fn fuse(z_s: &Tensor, z_cs: &Tensor, alpha: f64) -> Result<Tensor> {
    Ok(z_s.mul_scalar(alpha).add(&z_cs.mul_scalar(1.0 - alpha))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fuse_cases() {
        let z = Tensor::new(vec![1.5, -2.0], &[2]).unwrap();
        for alpha in [0.0, 0.3, 0.5, 1.0] {
            let f = fuse(&z, &z, alpha).unwrap();
            for (a, b) in f.data().iter().zip(z.data()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        let zs = Tensor::new(vec![2.0, 4.0], &[2]).unwrap();
        let zc = Tensor::zeros(&[2]);
        assert_eq!(fuse(&zs, &zc, 1.0).unwrap().data(), zs.data());
        assert_eq!(fuse(&zs, &zc, 0.5).unwrap().data(), &[1.0, 2.0]);
        assert!(fuse(&zs, &Tensor::zeros(&[3]), 0.5).is_err());
    }

    #[test]
    fn eval_ctx_never_drops() {
        let x = Tensor::full(&[100], 1.0);
        let mut ctx = ForwardCtx::eval();
        assert_eq!(ctx.dropout(&x).unwrap().data(), x.data());
    }

    #[test]
    fn train_dropout_scales_kept_entries() {
        use rand::SeedableRng;
        let x = Tensor::full(&[1000], 1.0);
        let mut ctx = ForwardCtx::train(0.5, ChaCha8Rng::seed_from_u64(0));
        let y = ctx.dropout(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = y.data().iter().filter(|&&v| v > 0.0).count();
        assert!((400..600).contains(&kept));
    }
}
