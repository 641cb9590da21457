//! The segmentation network: a dual-branch (Swin ∥ CSwin) encoder whose
//! branches are fused at every stage, a bottleneck, and a Swin-only decoder
//! with additive skips.
//!
//! Token-grid resolutions for `S` encoder stages are `1, 1/2, …, 1/2^(S-1)`
//! and `1/2^S` at the bottleneck.

mod blocks;
mod checkpoint;
mod voxel_linear;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionError, Projection};
use crate::params::{Bound, Init, ParamRegistry, ParamSpec, ParamStore};
use crate::tensor::{Tensor, TensorError};
use crate::windowing::{
    Dims3, FinalExpand, PatchEmbed, PatchExpand, PatchMerge, WindowError, WindowLayout,
};

pub use blocks::{
    fuse, CSwinBlock, ForwardCtx, LayerNorm, Mlp, SwinBlock, VtCsWMsaBlock, VtWMsaBlock,
};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, read_checkpoint, save_checkpoint,
    Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use voxel_linear::VoxelLinear;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input shape {actual:?} does not match configured {expected:?}")]
    InputShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("parameters do not match the model layout")]
    ParamLayout,
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Window(#[from] WindowError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Spatial size `[D, H, W]` of every input patch.
    pub input_dims: Dims3,
    pub patch_kernel: Dims3,
    pub embed_dim: usize,
    /// Sub-blocks per branch in each encoder stage (and the mirrored decoder stage).
    pub depths: Vec<usize>,
    pub bottleneck_depth: usize,
    /// One entry per encoder stage plus the bottleneck.
    pub heads: Vec<usize>,
    /// One entry per encoder stage plus the bottleneck.
    pub stripe_widths: Vec<usize>,
    pub window: Dims3,
    pub mlp_ratio: f64,
    pub fusion_alpha: f64,
    pub drop_rate: f64,
    /// Channels of the full-resolution map before the classifier; `embed_dim` when unset.
    pub final_channels: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl ModelConfig {
    /// Full-size network on 128³ four-modality patches.
    pub fn paper() -> Self {
        Self {
            in_channels: 4,
            num_classes: 4,
            input_dims: [128, 128, 128],
            patch_kernel: [2, 4, 4],
            embed_dim: 48,
            depths: vec![2, 2, 2],
            bottleneck_depth: 2,
            heads: vec![3, 6, 12, 24],
            stripe_widths: vec![1, 2, 4, 4],
            window: [4, 4, 4],
            mlp_ratio: 4.0,
            fusion_alpha: 0.5,
            drop_rate: 0.0,
            final_channels: None,
        }
    }

    /// Scaled-down network for CPU training on 64³ patches.
    pub fn desk() -> Self {
        Self {
            input_dims: [64, 64, 64],
            embed_dim: 24,
            ..Self::paper()
        }
    }

    /// Smallest useful network: one encoder stage, C=6, two classes.
    pub fn tiny() -> Self {
        Self {
            in_channels: 4,
            num_classes: 2,
            input_dims: [16, 16, 16],
            patch_kernel: [2, 4, 4],
            embed_dim: 6,
            depths: vec![1],
            bottleneck_depth: 2,
            heads: vec![3, 6],
            stripe_widths: vec![1, 2],
            window: [2, 2, 2],
            mlp_ratio: 2.0,
            fusion_alpha: 0.5,
            drop_rate: 0.0,
            final_channels: Some(24),
        }
    }

    pub fn with_input_dims(mut self, dims: Dims3) -> Self {
        self.input_dims = dims;
        self
    }

    pub fn stages(&self) -> usize {
        self.depths.len()
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    pub fn final_channels(&self) -> usize {
        self.final_channels.unwrap_or(self.embed_dim)
    }

    fn mlp_hidden(&self, dim: usize) -> usize {
        ((dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    /// Token grid at `stage` (the bottleneck is `stage == stages()`).
    pub fn stage_grid(&self, stage: usize) -> Dims3 {
        let d = [0, 1, 2].map(|a| self.input_dims[a] / self.patch_kernel[a]);
        d.map(|e| e >> stage)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ModelError::Config(m));
        let s = self.stages();
        if s == 0 {
            return err("at least one encoder stage is required".into());
        }
        if self.heads.len() != s + 1 || self.stripe_widths.len() != s + 1 {
            return err(format!(
                "heads and stripe_widths need {} entries (stages + bottleneck)",
                s + 1
            ));
        }
        if self.in_channels == 0 || self.num_classes < 2 || self.embed_dim == 0 {
            return err("need in_channels ≥ 1, num_classes ≥ 2, embed_dim ≥ 1".into());
        }
        if self.depths.contains(&0) || self.bottleneck_depth == 0 {
            return err("depths must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.fusion_alpha) {
            return err(format!("fusion_alpha {} outside [0, 1]", self.fusion_alpha));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return err(format!("drop_rate {} outside [0, 1)", self.drop_rate));
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) {
            return err(format!("mlp_ratio {} must be positive", self.mlp_ratio));
        }
        let factor = 1usize << s;
        for a in 0..3 {
            let k = self.patch_kernel[a];
            if k == 0 || self.input_dims[a] == 0 || self.input_dims[a] % (k * factor) != 0 {
                return err(format!(
                    "input dims {:?} must be divisible by kernel {:?} × 2^{s}",
                    self.input_dims, self.patch_kernel
                ));
            }
        }
        // Building the parameter layout runs every remaining layout check.
        CrSwin2Vt::new(self.clone()).map(|_| ())
    }
}

/// The assembled network. Holds parameter handles, not values.
#[derive(Debug, Clone)]
pub struct CrSwin2Vt {
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    embed: PatchEmbed,
    enc_swin: Vec<VtWMsaBlock>,
    enc_cswin: Vec<VtCsWMsaBlock>,
    merges: Vec<PatchMerge>,
    bottleneck_swin: VtWMsaBlock,
    bottleneck_cswin: VtCsWMsaBlock,
    bottleneck_expand: PatchExpand,
    /// Index `i` mirrors encoder stage `i`.
    dec_blocks: Vec<VtWMsaBlock>,
    dec_expands: Vec<Option<PatchExpand>>,
    final_norm: LayerNorm,
    final_expand: FinalExpand,
    classifier: Projection,
    head_norm: LayerNorm,
}

/// Encoder activations kept for inspection.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    /// Fused `[D, H, W, C]` features per stage, before merging.
    pub skips: Vec<Tensor>,
    pub bottleneck: Tensor,
}

impl CrSwin2Vt {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let s = config.stages();
        if s == 0 || config.heads.len() != s + 1 || config.stripe_widths.len() != s + 1 {
            return Err(ModelError::Config(
                "stage lists have inconsistent lengths".into(),
            ));
        }
        let mut reg = ParamRegistry::new();
        let c = &config;
        let embed = PatchEmbed::new(
            &mut reg,
            "patch_embed",
            c.patch_kernel,
            c.in_channels,
            c.embed_dim,
        );
        let (mut enc_swin, mut enc_cswin, mut merges) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..s {
            let (dim, grid) = (c.stage_dim(i), c.stage_grid(i));
            let hidden = c.mlp_hidden(dim);
            enc_swin.push(VtWMsaBlock::new(
                &mut reg,
                &format!("encoder.{i}.swin"),
                grid,
                c.window,
                dim,
                c.heads[i],
                hidden,
                c.depths[i],
            )?);
            let cs = VtCsWMsaBlock::new(
                &mut reg,
                &format!("encoder.{i}.cswin"),
                dim,
                c.heads[i],
                hidden,
                c.stripe_widths[i],
                c.depths[i],
            )?;
            for axis in 0..3 {
                cs.blocks[0].attn.layout(grid, axis)?;
            }
            enc_cswin.push(cs);
            merges.push(PatchMerge::new(
                &mut reg,
                &format!("encoder.{i}.merge"),
                dim,
            ));
        }
        let (bdim, bgrid) = (c.stage_dim(s), c.stage_grid(s));
        let bottleneck_swin = VtWMsaBlock::new(
            &mut reg,
            "bottleneck.swin",
            bgrid,
            c.window,
            bdim,
            c.heads[s],
            c.mlp_hidden(bdim),
            c.bottleneck_depth,
        )?;
        let bottleneck_cswin = VtCsWMsaBlock::new(
            &mut reg,
            "bottleneck.cswin",
            bdim,
            c.heads[s],
            c.mlp_hidden(bdim),
            c.stripe_widths[s],
            c.bottleneck_depth,
        )?;
        for axis in 0..3 {
            bottleneck_cswin.blocks[0].attn.layout(bgrid, axis)?;
        }
        let bottleneck_expand = PatchExpand::new(&mut reg, "bottleneck.expand", bdim)?;
        let mut dec_blocks = Vec::with_capacity(s);
        let mut dec_expands = Vec::with_capacity(s);
        for i in 0..s {
            let (dim, grid) = (c.stage_dim(i), c.stage_grid(i));
            dec_blocks.push(VtWMsaBlock::new(
                &mut reg,
                &format!("decoder.{i}.swin"),
                grid,
                c.window,
                dim,
                c.heads[i],
                c.mlp_hidden(dim),
                c.depths[i],
            )?);
            dec_expands.push(if i > 0 {
                Some(PatchExpand::new(
                    &mut reg,
                    &format!("decoder.{i}.expand"),
                    dim,
                )?)
            } else {
                None
            });
        }
        let final_norm = LayerNorm::new(&mut reg, "decoder.norm", c.embed_dim);
        let final_expand = FinalExpand::new(
            &mut reg,
            "final_expand",
            c.patch_kernel,
            c.embed_dim,
            c.final_channels(),
        )?;
        let fc = c.final_channels();
        let head_norm = LayerNorm::new(&mut reg, "head.norm", fc);
        // 1×1×1 convolution init: U(±1/√fan_in)
        let classifier = Projection::with_init(
            &mut reg,
            "classifier",
            fc,
            c.num_classes,
            Init::Uniform(1.0 / (fc as f64).sqrt()),
        );
        Ok(Self {
            config,
            specs: reg.into_specs(),
            embed,
            enc_swin,
            enc_cswin,
            merges,
            bottleneck_swin,
            bottleneck_cswin,
            bottleneck_expand,
            dec_blocks,
            dec_expands,
            final_norm,
            final_expand,
            classifier,
            head_norm,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn param_count(&self) -> usize {
        self.specs
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        ParamStore::initialize(&self.specs, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let c = &self.config;
        let expected = vec![
            c.in_channels,
            c.input_dims[0],
            c.input_dims[1],
            c.input_dims[2],
        ];
        if input.shape() != expected.as_slice() {
            return Err(ModelError::InputShape {
                expected,
                actual: input.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Encoder and bottleneck on a `[C_in, D, H, W]` volume.
    pub fn encode(&self, p: &Bound, input: &Tensor, ctx: &mut ForwardCtx) -> Result<EncoderTrace> {
        self.check_input(input)?;
        let alpha = self.config.fusion_alpha;
        let mut x = self.embed.forward(p, input)?;
        let mut skips = Vec::with_capacity(self.config.stages());
        for i in 0..self.config.stages() {
            let z_s = self.enc_swin[i].forward(p, &x, ctx)?;
            let z_cs = self.enc_cswin[i].forward(p, &x, ctx)?;
            let z = fuse(&z_s, &z_cs, alpha)?;
            x = self.merges[i].forward(p, &z)?;
            skips.push(z);
        }
        let b_s = self.bottleneck_swin.forward(p, &x, ctx)?;
        let b_cs = self.bottleneck_cswin.forward(p, &x, ctx)?;
        let bottleneck = fuse(&b_s, &b_cs, alpha)?;
        Ok(EncoderTrace { skips, bottleneck })
    }

    /// Logits `[K, D, H, W]` for a `[C_in, D, H, W]` volume.
    pub fn forward(&self, p: &Bound, input: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let trace = self.encode(p, input, ctx)?;
        let mut x = self.bottleneck_expand.forward(p, &trace.bottleneck)?;
        for i in (0..self.config.stages()).rev() {
            x = x.add(&trace.skips[i])?;
            x = self.dec_blocks[i].forward(p, &x, ctx)?;
            if let Some(e) = &self.dec_expands[i] {
                x = e.forward(p, &x)?;
            }
        }
        let x = self.final_norm.forward(p, &x)?;
        let x = self.final_expand.forward(p, &x)?;
        let x = self.head_norm.forward(p, &x)?;
        let logits = self.classifier.forward(p, &x)?;
        Ok(logits.permute(&[3, 0, 1, 2])?)
    }

    /// Forward with values from a store; no gradients are recorded.
    pub fn predict(&self, params: &ParamStore, input: &Tensor) -> Result<Tensor> {
        if !params.matches(&self.specs) {
            return Err(ModelError::ParamLayout);
        }
        self.forward(&params.bind(false), input, &mut ForwardCtx::eval())
    }

    /// Layouts used by the encoder's Swin blocks, stage by stage.
    pub fn encoder_layouts(&self) -> Vec<Vec<WindowLayout>> {
        self.enc_swin
            .iter()
            .map(|b| b.blocks.iter().map(|s| s.layout.clone()).collect())
            .collect()
    }
}

/// Anything that maps a `[C_in, D, H, W]` volume to `[K, D, H, W]` logits.
pub trait SegmentationNet {
    fn logits(&self, params: &Bound, input: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor>;
}

impl SegmentationNet for CrSwin2Vt {
    fn logits(&self, params: &Bound, input: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        self.forward(params, input, ctx)
    }
}
