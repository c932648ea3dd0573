//! Texture generator guided by structural codes, and the SN-patch critic.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionScores, TransferLevel};
use crate::error::{contract, Error, Result};
use crate::image::{ImageGrid, Mask};
use crate::losses::TextureLossWeights;
use crate::nn::{Conv2d, GatedConv2d, ParamStore, SpectralConv2d};
use crate::ops::{self, Window};
use crate::structure::HOLE_FILL;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureGenConfig {
    pub generator_hidden: usize,
    pub discriminator_hidden: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub sigma_floor: f64,
    pub weights: TextureLossWeights,
    /// Transfer patch at `/4` (twice the attention grid).
    pub level1_patch: usize,
    /// Transfer patch at `/2` (four times the attention grid).
    pub level2_patch: usize,
    pub hole_fill: f64,
}

impl Default for TextureGenConfig {
    fn default() -> Self {
        Self {
            generator_hidden: 64,
            discriminator_hidden: 64,
            lambda1: 50.0,
            lambda2: 10.0,
            sigma_floor: attention::SIGMA_FLOOR,
            weights: TextureLossWeights::default(),
            level1_patch: 6,
            level2_patch: 12,
            hole_fill: HOLE_FILL,
        }
    }
}

impl TextureGenConfig {
    pub fn level1(&self) -> TransferLevel {
        TransferLevel {
            ratio: 2,
            patch: self.level1_patch,
        }
    }

    pub fn level2(&self) -> TransferLevel {
        TransferLevel {
            ratio: 4,
            patch: self.level2_patch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if w.l1 < 0.0 || w.adversarial < 0.0 || w.feature < 0.0 {
            return Err(Error::Config("texture loss weights must be non-negative".into()));
        }
        if !(self.lambda1 > 0.0 && self.lambda2 > 0.0 && self.sigma_floor > 0.0) {
            return Err(Error::Config("texture lambdas and sigma floor must be positive".into()));
        }
        if self.generator_hidden == 0 || self.discriminator_hidden == 0 {
            return Err(Error::Config("texture hidden units must be positive".into()));
        }
        self.level1()
            .window()
            .and_then(|_| self.level2().window())
            .map_err(|e| Error::Config(format!("texture transfer patches: {e}")))?;
        Ok(())
    }
}

/// `M·out + (1−M)·gt` for `(B, C, H, W)` images and `(B, 1, H, W)` masks.
pub fn composite(output: &Tensor, ground_truth: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if output.dims() != ground_truth.dims() {
        contract!("composite inputs {:?} and {:?} differ", output.dims(), ground_truth.dims());
    }
    let (b, _, h, w) = output.dims4()?;
    if mask.dims() != [b, 1, h, w] {
        contract!("mask {:?} is not aligned with {:?}", mask.dims(), output.dims());
    }
    let keep = mask.affine(-1.0, 1.0)?;
    Ok((output.broadcast_mul(mask)? + ground_truth.broadcast_mul(&keep)?)?)
}

/// Pixel-wise composite: hole pixels from `output`, known pixels from `ground_truth`.
pub fn composite_grid(output: &ImageGrid, ground_truth: &ImageGrid, mask: &Mask) -> Result<ImageGrid> {
    if !output.same_shape(ground_truth) || output.height() != mask.height() || output.width() != mask.width() {
        contract!("composite inputs are not aligned");
    }
    let c = output.channels();
    let mut out = ground_truth.clone();
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.is_missing(y, x) {
                for ch in 0..c {
                    out.set(y, x, ch, output.get(y, x, ch));
                }
            }
        }
    }
    Ok(out)
}

/// `(1−M)·image + M·fill`.
pub fn fill_holes(image: &Tensor, mask: &Tensor, fill: f64) -> Result<Tensor> {
    let keep = mask.affine(-1.0, 1.0)?;
    Ok(image.broadcast_mul(&keep)?.broadcast_add(&(mask * fill)?)?)
}

pub struct TextureGenerator {
    config: TextureGenConfig,
    image_size: usize,
    code_dim: usize,
    store: ParamStore,
    e1: GatedConv2d,
    e2: GatedConv2d,
    e3: GatedConv2d,
    e4: GatedConv2d,
    e5: GatedConv2d,
    inject: GatedConv2d,
    dilated: Vec<GatedConv2d>,
    d1: GatedConv2d,
    d2: GatedConv2d,
    u1: GatedConv2d,
    u1_merge: GatedConv2d,
    u2: GatedConv2d,
    to_rgb: Conv2d,
}

impl TextureGenerator {
    pub fn new(config: TextureGenConfig, image_size: usize, code_dim: usize, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        if image_size == 0 || image_size % 8 != 0 {
            return Err(Error::Config(format!("texture generator needs an image size divisible by 8, got {image_size}")));
        }
        let p = store.pp("texture_g");
        let c = config.generator_hidden;
        let k3 = Window::same(3, 1);
        let down = Window::square(4, 2, 1, 1);
        let g = |name: &str, cin, cout, win| GatedConv2d::new(&p.pp(name), cin, cout, win);
        let dilated = [2, 4, 8, 16]
            .iter()
            .enumerate()
            .map(|(i, &d)| g(&format!("dilated{i}"), 4 * c, 4 * c, Window::same(3, d)))
            .collect::<Result<_>>()?;
        Ok(Self {
            e1: g("e1", 4, c, Window::same(5, 1))?,
            e2: g("e2", c, 2 * c, down)?,
            e3: g("e3", 2 * c, 2 * c, k3)?,
            e4: g("e4", 2 * c, 4 * c, down)?,
            e5: g("e5", 4 * c, 4 * c, k3)?,
            inject: g("inject", 4 * c + code_dim, 4 * c, k3)?,
            dilated,
            d1: g("d1", 8 * c, 4 * c, k3)?,
            d2: g("d2", 4 * c, 4 * c, k3)?,
            u1: g("u1", 4 * c, 2 * c, k3)?,
            u1_merge: g("u1_merge", 4 * c, 2 * c, k3)?,
            u2: g("u2", 2 * c, c, k3)?,
            to_rgb: Conv2d::new(&p.pp("to_rgb"), c, 3, k3, true)?,
            config,
            image_size,
            code_dim,
            store: store.clone(),
        })
    }

    pub fn config(&self) -> &TextureGenConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Attention scores for each item of a quantized structural grid.
    pub fn attention(&self, s_bar: &Tensor) -> Result<Vec<AttentionScores>> {
        attention::structural_attention(s_bar, self.config.lambda1, self.config.sigma_floor)
    }

    /// `I_out` in `[0, 1]` from the incomplete image, its mask and the structural grid `s̄`.
    pub fn generate(&self, image: &Tensor, mask: &Tensor, s_bar: &Tensor) -> Result<Tensor> {
        let (b, ch, h, w) = image.dims4()?;
        let s = self.image_size;
        if ch != 3 || h != s || w != s {
            contract!("texture generator expects (B, 3, {s}, {s}) images, got {:?}", image.dims());
        }
        if mask.dims() != [b, 1, h, w] {
            contract!("mask {:?} is not aligned with {:?}", mask.dims(), image.dims());
        }
        let g = s / 8;
        if s_bar.dims() != [b, self.code_dim, g, g] {
            contract!("structural grid must be ({b}, {}, {g}, {g}), got {:?}", self.code_dim, s_bar.dims());
        }
        let scores = self.attention(s_bar)?;
        let x = Tensor::cat(&[&fill_holes(image, mask, self.config.hole_fill)?, mask], 1)?;
        let x = self.e1.forward(&x)?;
        let x = self.e2.forward(&x)?;
        let p2 = self.e3.forward(&x)?;
        let x = self.e4.forward(&p2)?;
        let p1 = self.e5.forward(&x)?;
        let up = ops::upsample_nearest(&s_bar.to_dtype(p1.dtype())?, 2)?;
        let mut x = self.inject.forward(&Tensor::cat(&[&p1, &up], 1)?)?;
        for l in &self.dilated {
            x = l.forward(&x)?;
        }
        let q1 = attention::attention_transfer(&scores, &p1, self.config.level1())?;
        let q2 = attention::attention_transfer(&scores, &p2, self.config.level2())?;
        let x = self.d1.forward(&Tensor::cat(&[&x, &q1], 1)?)?;
        let x = self.d2.forward(&x)?;
        let x = self.u1.forward(&ops::upsample_nearest(&x, 2)?)?;
        let x = self.u1_merge.forward(&Tensor::cat(&[&x, &q2], 1)?)?;
        let x = self.u2.forward(&ops::upsample_nearest(&x, 2)?)?;
        ops::sigmoid(&self.to_rgb.forward(&x)?)
    }
}

/// Spectrally normalized patch critic over `(I_comp ‖ M)`.
pub struct Discriminator {
    convs: Vec<SpectralConv2d>,
    store: ParamStore,
}

impl Discriminator {
    pub fn new(hidden: usize, store: &ParamStore) -> Result<Self> {
        let p = store.pp("texture_d");
        let widths = [hidden, 2 * hidden, 4 * hidden, 4 * hidden, 4 * hidden, 4 * hidden];
        let win = Window::square(5, 2, 2, 1);
        let mut cin = 4;
        let mut convs = Vec::with_capacity(widths.len());
        for (i, &w) in widths.iter().enumerate() {
            convs.push(SpectralConv2d::new(&p.pp(format!("conv{i}")), cin, w, win)?);
            cin = w;
        }
        Ok(Self {
            convs,
            store: store.clone(),
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Patch scores; `update` advances the spectral-norm power iteration.
    pub fn forward(&self, image: &Tensor, mask: &Tensor, update: bool) -> Result<Tensor> {
        let mut x = Tensor::cat(&[image, mask], 1)?;
        let last = self.convs.len() - 1;
        for (i, c) in self.convs.iter().enumerate() {
            x = c.forward(&x, update)?;
            if i < last {
                x = ops::leaky_relu(&x, 0.2)?;
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn small() -> TextureGenConfig {
        TextureGenConfig {
            generator_hidden: 4,
            discriminator_hidden: 4,
            ..Default::default()
        }
    }

    fn center_mask(b: usize, s: usize) -> Tensor {
        let mut m = vec![0f32; s * s];
        for y in s / 4..3 * s / 4 {
            for x in s / 4..3 * s / 4 {
                m[y * s + x] = 1.0;
            }
        }
        Tensor::from_vec(m, (1, 1, s, s), &Device::Cpu).unwrap().repeat((b, 1, 1, 1)).unwrap()
    }

    #[test]
    fn generator_shapes_and_determinism() -> Result<()> {
        let store = ParamStore::new(DType::F32, 1);
        let g = TextureGenerator::new(small(), 32, 3, &store)?;
        let img = Tensor::rand(0f32, 1.0, (2, 3, 32, 32), &Device::Cpu)?;
        let m = center_mask(2, 32);
        let s = Tensor::randn(0f32, 1.0, (2, 3, 4, 4), &Device::Cpu)?;
        let a = g.generate(&img, &m, &s)?;
        assert_eq!(a.dims(), &[2, 3, 32, 32]);
        let b = g.generate(&img, &m, &s)?;
        assert_eq!(ops::to_f64_vec(&a)?, ops::to_f64_vec(&b)?);
        let bad = Tensor::zeros((2, 3, 2, 2), DType::F32, &Device::Cpu)?;
        assert!(matches!(g.generate(&img, &m, &bad), Err(Error::Contract(_))));
        Ok(())
    }

    #[test]
    fn structure_changes_output() -> Result<()> {
        let store = ParamStore::new(DType::F32, 2);
        let g = TextureGenerator::new(small(), 32, 3, &store)?;
        let img = Tensor::rand(0f32, 1.0, (1, 3, 32, 32), &Device::Cpu)?;
        let m = center_mask(1, 32);
        let s1 = Tensor::randn(0f32, 1.0, (1, 3, 4, 4), &Device::Cpu)?;
        let s2 = Tensor::randn(0f32, 1.0, (1, 3, 4, 4), &Device::Cpu)?;
        assert_ne!(ops::to_f64_vec(&g.generate(&img, &m, &s1)?)?, ops::to_f64_vec(&g.generate(&img, &m, &s2)?)?);
        Ok(())
    }

    #[test]
    fn composite_is_exact_projection() -> Result<()> {
        let out = Tensor::rand(0f32, 1.0, (1, 3, 8, 8), &Device::Cpu)?;
        let gt = Tensor::rand(0f32, 1.0, (1, 3, 8, 8), &Device::Cpu)?;
        let zeros = Tensor::zeros((1, 1, 8, 8), DType::F32, &Device::Cpu)?;
        let ones = zeros.ones_like()?;
        assert_eq!(ops::to_f64_vec(&composite(&out, &gt, &zeros)?)?, ops::to_f64_vec(&gt)?);
        assert_eq!(ops::to_f64_vec(&composite(&out, &gt, &ones)?)?, ops::to_f64_vec(&out)?);
        let m = center_mask(1, 8);
        let c = composite(&out, &gt, &m)?;
        let (cv, ov, gv, mv) = (
            ops::to_f64_vec(&c)?,
            ops::to_f64_vec(&out)?,
            ops::to_f64_vec(&gt)?,
            ops::to_f64_vec(&m)?,
        );
        for i in 0..cv.len() {
            let want = if mv[i % 64] == 1.0 { ov[i] } else { gv[i] };
            assert_eq!(cv[i], want);
        }
        let twice = composite(&c, &gt, &m)?;
        assert_eq!(ops::to_f64_vec(&twice)?, cv);
        Ok(())
    }

    #[test]
    fn composite_grid_copies_known_pixels() -> Result<()> {
        let gt = ImageGrid::filled(4, 4, 3, 0.25);
        let out = ImageGrid::filled(4, 4, 3, 0.75);
        let mut m = Mask::empty(4, 4);
        m.set_missing(1, 2);
        let c = composite_grid(&out, &gt, &m)?;
        assert_eq!(c.get(1, 2, 0), 0.75);
        assert_eq!(c.get(0, 0, 1), 0.25);
        Ok(())
    }

    #[test]
    fn discriminator_output_grid() -> Result<()> {
        let store = ParamStore::new(DType::F32, 3);
        let d = Discriminator::new(4, &store)?;
        let img = Tensor::rand(0f32, 1.0, (2, 3, 64, 64), &Device::Cpu)?;
        let out = d.forward(&img, &center_mask(2, 64), true)?;
        assert_eq!(out.dims(), &[2, 16, 1, 1]);
        assert!(ops::to_f64_vec(&out)?.iter().all(|v| v.is_finite()));
        Ok(())
    }

    #[test]
    fn config_rejects_negative_weights() {
        let mut c = TextureGenConfig::default();
        assert!(c.validate().is_ok());
        c.weights.feature = -0.1;
        assert!(c.validate().is_err());
    }
}
