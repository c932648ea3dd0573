//! Texture-stage objectives.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::codec::Codebook;
use crate::error::{contract, Result};

/// Mean absolute error over the whole image.
pub fn l1_loss(output: &Tensor, target: &Tensor) -> Result<Tensor> {
    if output.dims() != target.dims() {
        contract!("l1 inputs {:?} and {:?} differ", output.dims(), target.dims());
    }
    Ok((output - target)?.abs()?.mean_all()?)
}

/// `mean relu(1 − D(real)) + mean relu(1 + D(fake))`.
pub fn hinge_d_loss(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    let r = real.affine(-1.0, 1.0)?.relu()?.mean_all()?;
    let f = fake.affine(1.0, 1.0)?.relu()?.mean_all()?;
    Ok((r + f)?)
}

/// `−mean D(fake)`.
pub fn hinge_g_loss(fake: &Tensor) -> Result<Tensor> {
    Ok(fake.mean_all()?.neg()?)
}

/// Cross-entropy of each feature cell against its ground-truth code.
///
/// For a cell `x` the logits are `λ2·tanh(−(d_j − m)/σ)` where `d_j = ‖x − e_j‖`
/// and `m`, `σ` are taken over that cell's `K` distances (`σ ≥ sigma_floor`).
pub fn feature_loss(
    features: &Tensor,
    targets: &Tensor,
    codebook: &Codebook,
    lambda2: f64,
    sigma_floor: f64,
) -> Result<Tensor> {
    let (b, d, h, w) = features.dims4()?;
    if d != codebook.dim() {
        contract!("feature depth {d} does not match codebook dimension {}", codebook.dim());
    }
    if targets.dims() != [b, h, w] {
        contract!("targets {:?} do not match features {:?}", targets.dims(), features.dims());
    }
    let k = codebook.size();
    let n = b * h * w;
    let x = features.permute((0, 2, 3, 1))?.reshape((n, 1, d))?;
    let e = codebook
        .prototypes()
        .to_dtype(features.dtype())?
        .detach()
        .reshape((1, k, d))?;
    let dist = x
        .broadcast_sub(&e)?
        .sqr()?
        .sum(D::Minus1)?
        .affine(1.0, 1e-12)?
        .sqrt()?;
    let m = dist.mean_keepdim(1)?;
    let centered = dist.broadcast_sub(&m)?;
    let var = centered.sqr()?.mean_keepdim(1)?;
    let sigma = var.maximum(sigma_floor * sigma_floor)?.sqrt()?;
    let logits = (centered.neg()?.broadcast_div(&sigma)?.tanh()? * lambda2)?;
    let lp = candle_nn::ops::log_softmax(&logits, D::Minus1)?;
    let idx = targets.flatten_all()?.to_dtype(DType::U32)?.unsqueeze(1)?;
    Ok(lp.gather(&idx, 1)?.mean_all()?.neg()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureLossWeights {
    pub l1: f64,
    pub adversarial: f64,
    pub feature: f64,
}

impl Default for TextureLossWeights {
    fn default() -> Self {
        Self {
            l1: 1.0,
            adversarial: 1.0,
            feature: 0.1,
        }
    }
}

/// `α_ℓ1·ℓ1 + α_adv·adv + α_f·(sf + tf)`.
pub fn total_texture_loss(
    l1: &Tensor,
    adversarial: &Tensor,
    structural_feature: &Tensor,
    textural_feature: &Tensor,
    weights: &TextureLossWeights,
) -> Result<Tensor> {
    if weights.l1 < 0.0 || weights.adversarial < 0.0 || weights.feature < 0.0 {
        contract!("texture loss weights must be non-negative");
    }
    let f = (structural_feature + textural_feature)?;
    Ok(((l1 * weights.l1)? + (adversarial * weights.adversarial)?)?.add(&(f * weights.feature)?)?)
}
