//! Training objective: soft Dice, cross-entropy, and a virtual-adversarial
//! smoothness term evaluated at an adversarially perturbed input.
//!
//! Probabilities and one-hot targets are `[K, D, H, W]`. Every loss is a
//! scalar tensor so it can be differentiated.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::model::{ForwardCtx, ModelError, SegmentationNet};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Tensor, TensorError};

pub const DICE_SMOOTH: f64 = 1e-5;
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("{op}: shapes {lhs:?} and {rhs:?} differ")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: u8, classes: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// One-hot `[K, D, H, W]` from dense labels `0..K`.
pub fn one_hot(labels: &[u8], classes: usize, dims: [usize; 3]) -> Result<Tensor> {
    let v = dims.iter().product::<usize>();
    if labels.len() != v {
        return Err(LossError::Shape {
            op: "one_hot",
            lhs: vec![labels.len()],
            rhs: dims.to_vec(),
        });
    }
    let mut data = vec![0.0; classes * v];
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= classes {
            return Err(LossError::Label { label: l, classes });
        }
        data[l as usize * v + i] = 1.0;
    }
    Ok(Tensor::new(data, &[classes, dims[0], dims[1], dims[2]])?)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    if a.shape() != b.shape() || a.rank() < 2 {
        return Err(LossError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let k = a.shape()[0];
    Ok((k, a.numel() / k))
}

/// `−mean_k (2Σ Y_k P_k + s) / (Σ Y_k + Σ P_k + s)`, over classes
/// `first_class..K`.
pub fn dice_loss_with(
    probs: &Tensor,
    onehot: &Tensor,
    smooth: f64,
    include_background: bool,
) -> Result<Tensor> {
    let (k, v) = same_shape("dice_loss", probs, onehot)?;
    let first = usize::from(!include_background);
    if first >= k {
        return Err(LossError::Config("no foreground classes to average".into()));
    }
    let p = probs.reshape(&[k, v])?.slice(0, first, k)?;
    let y = onehot.reshape(&[k, v])?.slice(0, first, k)?;
    let inter = p.mul(&y)?.sum_axis(1)?;
    let denom = y.sum_axis(1)?.add(&p.sum_axis(1)?)?.add_scalar(smooth);
    Ok(inter
        .mul_scalar(2.0)
        .add_scalar(smooth)
        .div(&denom)?
        .mean()
        .neg())
}

pub fn dice_loss(probs: &Tensor, onehot: &Tensor) -> Result<Tensor> {
    dice_loss_with(probs, onehot, DICE_SMOOTH, true)
}

/// Mean over voxels of `−Σ_k Y_k ln P_k`, with `P` clamped to `[1e-12, 1]`.
pub fn ce_loss(probs: &Tensor, onehot: &Tensor) -> Result<Tensor> {
    let (_, v) = same_shape("ce_loss", probs, onehot)?;
    let ll = probs.clamp(PROB_FLOOR, 1.0).ln().mul(onehot)?;
    Ok(ll.sum().mul_scalar(-1.0 / v as f64))
}

/// Mean over voxels of `KL(target ‖ probs)`; the target is a constant and
/// `0·ln 0 = 0`.
pub fn kl_div(target: &Tensor, probs: &Tensor) -> Result<Tensor> {
    let (_, v) = same_shape("kl_div", target, probs)?;
    let entropy_term: f64 = target
        .data()
        .iter()
        .filter(|&&t| t > 0.0)
        .map(|&t| t * t.ln())
        .sum();
    let t = target.detach();
    let cross = probs.clamp(PROB_FLOOR, 1.0).ln().mul(&t)?.sum();
    Ok(cross
        .neg()
        .add_scalar(entropy_term)
        .mul_scalar(1.0 / v as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VatAnchor {
    /// KL against the ground-truth one-hot labels.
    Label,
    /// KL against the unperturbed prediction.
    Prediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VatConfig {
    pub lambda: f64,
    pub epsilon: f64,
    pub xi: f64,
    pub n_power: usize,
    pub enabled: bool,
    pub anchor: VatAnchor,
}

impl Default for VatConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            epsilon: 2.5,
            xi: 10.0,
            n_power: 1,
            enabled: true,
            anchor: VatAnchor::Label,
        }
    }
}

impl VatConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.epsilon > 0.0
            && self.xi > 0.0
            && self.n_power >= 1
            && self.lambda >= 0.0
            && self.epsilon.is_finite()
            && self.xi.is_finite()
            && self.lambda.is_finite();
        if ok {
            Ok(())
        } else {
            Err(LossError::Config(format!(
                "need ε > 0, ξ > 0, n_power ≥ 1, λ ≥ 0 (got ε={}, ξ={}, n_power={}, λ={})",
                self.epsilon, self.xi, self.n_power, self.lambda
            )))
        }
    }

    /// Whether the term contributes to the objective at all.
    pub fn active(&self) -> bool {
        self.enabled && self.lambda > 0.0
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn unit_random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let d: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let norm = l2(&d);
        if norm > 0.0 {
            return d.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Distribution the perturbed prediction is compared against.
pub fn vat_anchor<N: SegmentationNet>(
    net: &N,
    params: &ParamStore,
    input: &Tensor,
    onehot: &Tensor,
    anchor: VatAnchor,
) -> Result<Tensor> {
    Ok(match anchor {
        VatAnchor::Label => onehot.detach(),
        VatAnchor::Prediction => {
            let logits = net.logits(&params.bind(false), input, &mut ForwardCtx::eval())?;
            logits.softmax(0)?.detach()
        }
    })
}

/// Power-iteration estimate of the direction that most increases the KL
/// divergence, scaled to norm `ε`. Parameters are bound without gradients,
/// so the search never touches θ. A vanishing gradient falls back to the
/// random start direction.
pub fn vat_perturbation<N: SegmentationNet>(
    net: &N,
    params: &ParamStore,
    input: &Tensor,
    onehot: &Tensor,
    cfg: &VatConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let target = vat_anchor(net, params, input, onehot, cfg.anchor)?;
    vat_perturbation_towards(net, params, input, &target, cfg, rng)
}

/// [`vat_perturbation`] against an already computed anchor distribution.
pub fn vat_perturbation_towards<N: SegmentationNet>(
    net: &N,
    params: &ParamStore,
    input: &Tensor,
    target: &Tensor,
    cfg: &VatConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    cfg.validate()?;
    let frozen = params.bind(false);
    let start = unit_random(input.numel(), rng);
    let mut d = start.clone();
    for _ in 0..cfg.n_power {
        let r = Tensor::leaf(d.iter().map(|x| cfg.xi * x).collect(), input.shape(), true)?;
        let logits = net.logits(&frozen, &input.add(&r)?, &mut ForwardCtx::eval())?;
        kl_div(target, &logits.softmax(0)?)?.backward()?;
        let g = r.grad().unwrap_or_default();
        let norm = l2(&g);
        d = if norm > 0.0 && norm.is_finite() {
            g.into_iter().map(|x| x / norm).collect()
        } else {
            start.clone()
        };
    }
    Ok(Tensor::new(
        d.into_iter().map(|x| cfg.epsilon * x).collect(),
        input.shape(),
    )?)
}

/// `KL(anchor ‖ softmax(H(X + r_adv)))` with `r_adv` held constant.
pub fn vat_loss<N: SegmentationNet>(
    net: &N,
    params: &Bound,
    input: &Tensor,
    anchor: &Tensor,
    r_adv: &Tensor,
    ctx: &mut ForwardCtx,
) -> Result<Tensor> {
    let logits = net.logits(params, &input.add(&r_adv.detach())?, ctx)?;
    kl_div(anchor, &logits.softmax(0)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub dice: f64,
    pub ce: f64,
    pub vat: f64,
    pub lambda: f64,
    pub total: f64,
}

/// Differentiable loss terms of one step.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Tensor,
    pub dice: Tensor,
    pub ce: Tensor,
    pub vat: Option<Tensor>,
    pub lambda: f64,
}

impl LossTerms {
    pub fn report(&self) -> LossReport {
        LossReport {
            dice: self.dice.item(),
            ce: self.ce.item(),
            vat: self.vat.as_ref().map_or(0.0, Tensor::item),
            lambda: self.lambda,
            total: self.total.item(),
        }
    }
}

/// `L_dice + L_ce + λ·L_vat` with a given perturbation (no search).
///
/// `r_adv = None` or an inactive config drops the VAT term entirely.
#[allow(clippy::too_many_arguments)]
pub fn objective<N: SegmentationNet>(
    net: &N,
    params: &Bound,
    input: &Tensor,
    onehot: &Tensor,
    anchor: Option<&Tensor>,
    r_adv: Option<&Tensor>,
    cfg: &VatConfig,
    ctx: &mut ForwardCtx,
) -> Result<LossTerms> {
    let probs = net.logits(params, input, ctx)?.softmax(0)?;
    let dice = dice_loss(&probs, onehot)?;
    let ce = ce_loss(&probs, onehot)?;
    let base = dice.add(&ce)?;
    let (total, vat) = match r_adv {
        Some(r) if cfg.active() => {
            let vat = vat_loss(net, params, input, anchor.unwrap_or(onehot), r, ctx)?;
            (base.add(&vat.mul_scalar(cfg.lambda))?, Some(vat))
        }
        _ => (base, None),
    };
    let lambda = if vat.is_some() { cfg.lambda } else { 0.0 };
    Ok(LossTerms {
        total,
        dice,
        ce,
        vat,
        lambda,
    })
}

/// Full two-phase step objective: search `r_adv` with θ frozen, then build
/// the differentiable total at the bound parameters.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<N: SegmentationNet>(
    net: &N,
    store: &ParamStore,
    params: &Bound,
    input: &Tensor,
    onehot: &Tensor,
    cfg: &VatConfig,
    ctx: &mut ForwardCtx,
    rng: &mut ChaCha8Rng,
) -> Result<(LossTerms, Option<Tensor>)> {
    if !cfg.active() {
        return Ok((
            objective(net, params, input, onehot, None, None, cfg, ctx)?,
            None,
        ));
    }
    let anchor = vat_anchor(net, store, input, onehot, cfg.anchor)?;
    let r_adv = vat_perturbation_towards(net, store, input, &anchor, cfg, rng)?;
    let terms = objective(
        net,
        params,
        input,
        onehot,
        Some(&anchor),
        Some(&r_adv),
        cfg,
        ctx,
    )?;
    Ok((terms, Some(r_adv)))
}

/// A random probability map `[K, D, H, W]`, for tests and examples.
pub fn random_probs(classes: usize, dims: [usize; 3], rng: &mut impl Rng) -> Tensor {
    let v = dims.iter().product::<usize>();
    let mut data = vec![0.0; classes * v];
    for i in 0..v {
        let w: Vec<f64> = (0..classes).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = w.iter().sum();
        for k in 0..classes {
            data[k * v + i] = w[k] / s;
        }
    }
    Tensor::new(data, &[classes, dims[0], dims[1], dims[2]]).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::new(data, shape).unwrap()
    }

    #[test]
    fn dice_examples() {
        let y = t(vec![1.0, 0.0, 0.0, 1.0], &[2, 2, 1, 1]);
        assert_eq!(dice_loss_with(&y, &y, 0.0, true).unwrap().item(), -1.0);
        let inv = t(vec![0.0, 1.0, 1.0, 0.0], &[2, 2, 1, 1]);
        assert_eq!(dice_loss_with(&inv, &y, 0.0, true).unwrap().item(), 0.0);
        let half = t(vec![0.5; 4], &[2, 2, 1, 1]);
        assert!((dice_loss_with(&half, &y, 0.0, true).unwrap().item() + 0.5).abs() < 1e-15);
    }

    #[test]
    fn ce_and_kl_examples() {
        let y = t(vec![1.0, 0.0, 0.0, 0.0], &[4, 1, 1, 1]);
        assert_eq!(ce_loss(&y, &y).unwrap().item(), 0.0);
        let u = t(vec![0.25; 4], &[4, 1, 1, 1]);
        assert!((ce_loss(&u, &y).unwrap().item() - 4f64.ln()).abs() < 1e-12);
        let zero = t(vec![0.0, 1.0, 0.0, 0.0], &[4, 1, 1, 1]);
        assert!(ce_loss(&zero, &y).unwrap().item().is_finite());
        let y2 = t(vec![1.0, 0.0], &[2, 1, 1, 1]);
        let p2 = t(vec![0.5, 0.5], &[2, 1, 1, 1]);
        assert!((kl_div(&y2, &p2).unwrap().item() - 2f64.ln()).abs() < 1e-12);
        assert_eq!(kl_div(&y2, &y2).unwrap().item(), 0.0);
    }

    #[test]
    fn vat_config_validation() {
        VatConfig::default().validate().unwrap();
        assert!(VatConfig {
            epsilon: 0.0,
            ..VatConfig::default()
        }
        .validate()
        .is_err());
        assert!(VatConfig {
            n_power: 0,
            ..VatConfig::default()
        }
        .validate()
        .is_err());
        assert!(!VatConfig {
            lambda: 0.0,
            ..VatConfig::default()
        }
        .active());
    }
}
