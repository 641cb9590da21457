//! Per-voxel linear classifier `z_v = Wᵀ·x_v + b`. Small enough for
//! closed-form gradients; used as a reference network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ForwardCtx, ModelError, Result, SegmentationNet};
use crate::params::{Bound, Init, ParamId, ParamRegistry, ParamSpec, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct VoxelLinear {
    pub in_channels: usize,
    pub num_classes: usize,
    /// `[C_in, K]`
    pub weight: ParamId,
    pub bias: ParamId,
    specs: Vec<ParamSpec>,
}

impl VoxelLinear {
    pub fn new(in_channels: usize, num_classes: usize, init_std: f64) -> Self {
        let mut reg = ParamRegistry::new();
        let weight = reg.add(
            "weight",
            &[in_channels, num_classes],
            Init::TruncNormal(init_std),
        );
        let bias = reg.add("bias", &[num_classes], Init::Zeros);
        Self {
            in_channels,
            num_classes,
            weight,
            bias,
            specs: reg.into_specs(),
        }
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        ParamStore::initialize(&self.specs, &mut ChaCha8Rng::seed_from_u64(seed))
    }
}

impl SegmentationNet for VoxelLinear {
    fn logits(&self, p: &Bound, input: &Tensor, _ctx: &mut ForwardCtx) -> Result<Tensor> {
        let s = input.shape();
        if s.len() != 4 || s[0] != self.in_channels {
            return Err(ModelError::InputShape {
                expected: vec![self.in_channels],
                actual: s.to_vec(),
            });
        }
        let v = s[1] * s[2] * s[3];
        let x = input.reshape(&[self.in_channels, v])?.permute(&[1, 0])?;
        let z = x.linear(p.get(self.weight), Some(p.get(self.bias)))?;
        Ok(z.permute(&[1, 0])?
            .reshape(&[self.num_classes, s[1], s[2], s[3]])?)
    }
}
