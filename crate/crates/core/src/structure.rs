//! Conditional autoregressive prior over the structural index grid.
//!
//! Cells are modelled in raster order. A type-A masked convolution hides the
//! current cell, every later layer (type-B masked convolutions, causal
//! attention and 1×1 output layers) keeps that property.

use candle_core::{DType, Device, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::LatentIndexGrid;
use crate::error::{contract, Error, Result};
use crate::image::{ImageGrid, Mask};
use crate::nn::{dropout, Conv2d, GatedConv2d, Init, Linear, ParamStore};
use crate::ops::{self, Window};

/// Default value written into missing pixels before conditioning.
pub const HOLE_FILL: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureGenConfig {
    pub layers: usize,
    pub attention_layers: usize,
    pub attention_heads: usize,
    pub hidden_units: usize,
    pub residual_units: usize,
    pub conditioning_hidden: usize,
    pub conditioning_residual: usize,
    pub conditioning_blocks: usize,
    pub dropout: f64,
    pub output_stack_layers: usize,
    pub kernel_size: usize,
    pub hole_fill: f64,
}

impl Default for StructureGenConfig {
    fn default() -> Self {
        Self {
            layers: 20,
            attention_layers: 4,
            attention_heads: 8,
            hidden_units: 128,
            residual_units: 128,
            conditioning_hidden: 32,
            conditioning_residual: 32,
            conditioning_blocks: 2,
            dropout: 0.1,
            output_stack_layers: 20,
            kernel_size: 3,
            hole_fill: HOLE_FILL,
        }
    }
}

impl StructureGenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("structure: {m}")));
        if self.layers == 0 {
            return bad("layers must be positive");
        }
        if self.attention_layers > self.layers {
            return bad("attention_layers must not exceed layers");
        }
        if self.attention_heads == 0 || self.hidden_units % self.attention_heads != 0 {
            return bad("attention_heads must divide hidden_units");
        }
        if self.kernel_size < 3 || self.kernel_size % 2 == 0 {
            return bad("kernel_size must be odd and at least 3");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.hidden_units == 0 || self.residual_units == 0 || self.conditioning_hidden == 0 {
            return bad("unit counts must be positive");
        }
        Ok(())
    }

    /// Gated layers after which an attention layer runs.
    fn attention_after(&self) -> Vec<usize> {
        (0..self.attention_layers)
            .map(|j| (j + 1) * self.layers / self.attention_layers - 1)
            .collect()
    }
}

/// Kernel mask for raster-order causality; `include_center` distinguishes type B from type A.
pub fn causal_kernel_mask(k: usize, include_center: bool) -> Vec<f64> {
    let c = k / 2;
    let mut m = vec![0.0; k * k];
    for r in 0..k {
        for col in 0..k {
            let before = r < c || (r == c && col < c);
            if before || (include_center && r == c && col == c) {
                m[r * k + col] = 1.0;
            }
        }
    }
    m
}

/// Conditioning features at structural resolution, `(B, C, h, w)`.
#[derive(Debug, Clone)]
pub struct ConditionStack {
    features: Tensor,
}

impl ConditionStack {
    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn batch_size(&self) -> usize {
        self.features.dims()[0]
    }

    /// Repeats a single-item condition `n` times along the batch.
    pub fn repeat(&self, n: usize) -> Result<Self> {
        if self.batch_size() != 1 {
            contract!("only single-item conditions can be repeated");
        }
        Ok(Self {
            features: self.features.repeat((n, 1, 1, 1))?,
        })
    }
}

struct CondBlock {
    gated: GatedConv2d,
    proj: Conv2d,
}

struct GatedLayer {
    conv: Conv2d,
    cond: Conv2d,
    out: Conv2d,
}

struct CausalAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl CausalAttention {
    fn forward(&self, x: &Tensor, mask: &Tensor, pos: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let n = h * w;
        let dh = c / self.heads;
        let seq = x.flatten_from(2)?.transpose(1, 2)?.broadcast_add(pos)?;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, n, self.heads, dh))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let q = split(self.q.forward(&seq)?)?;
        let k = split(self.k.forward(&seq)?)?;
        let v = split(self.v.forward(&seq)?)?;
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?
            .broadcast_add(mask)?;
        let attn = candle_nn::ops::softmax_last_dim(&scores)?;
        let y = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .reshape((b, n, c))?;
        let y = self.out.forward(&y)?.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok((x + y)?)
    }
}

/// Per-cell Shannon entropy in bits.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyMap {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<f64>,
    pub max_bits: f64,
}

impl EntropyMap {
    /// Grayscale rendering with `bits / log2 K` as intensity.
    pub fn to_image(&self) -> ImageGrid {
        let data = self.bits.iter().map(|b| (b / self.max_bits) as f32).collect();
        ImageGrid::new(self.height, self.width, 1, data).expect("entropy map shape is consistent")
    }
}

/// Entropy in bits of each cell of a `(B, K, h, w)` logit tensor.
pub fn entropy_from_logits(logits: &Tensor) -> Result<Vec<EntropyMap>> {
    let (b, k, h, w) = logits.dims4()?;
    let v = ops::to_f64_vec(&logits.permute((0, 2, 3, 1))?)?;
    let max_bits = (k as f64).log2();
    let maps = v
        .chunks(h * w * k)
        .take(b)
        .map(|item| EntropyMap {
            height: h,
            width: w,
            bits: item
                .chunks(k)
                .map(|l| categorical_entropy_bits(l).clamp(0.0, max_bits))
                .collect(),
            max_bits,
        })
        .collect();
    Ok(maps)
}

fn softmax_f64(logits: &[f64], temperature: f64) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| ((l - m) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn categorical_entropy_bits(logits: &[f64]) -> f64 {
    softmax_f64(logits, 1.0)
        .into_iter()
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.log2())
        .sum()
}

/// Draws an index from `softmax(logits / temperature)`.
fn sample_categorical(logits: &[f64], temperature: f64, rng: &mut impl Rng) -> u32 {
    let p = softmax_f64(logits, temperature);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i as u32;
        }
    }
    // rounding left `acc` just below 1: take the last index with mass
    p.iter().rposition(|&x| x > 0.0).unwrap_or(0) as u32
}

fn argmax(logits: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Mean per-cell negative log-likelihood in nats of `(B, h, w)` targets under `(B, K, h, w)` logits.
pub fn nll_loss(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let (b, k, h, w) = logits.dims4()?;
    if targets.dims() != [b, h, w] {
        contract!("targets {:?} do not match logits {:?}", targets.dims(), logits.dims());
    }
    let lp = candle_nn::ops::log_softmax(&logits.permute((0, 2, 3, 1))?.reshape((b * h * w, k))?, D::Minus1)?;
    let idx = targets.flatten_all()?.to_dtype(DType::U32)?.unsqueeze(1)?;
    Ok(lp.gather(&idx, 1)?.mean_all()?.neg()?)
}

/// Converts a loss in nats to bits.
pub fn nats_to_bits(nats: f64) -> f64 {
    nats / std::f64::consts::LN_2
}

pub struct StructureNet {
    config: StructureGenConfig,
    codebook_size: usize,
    grid: usize,
    store: ParamStore,
    cond_in: Vec<GatedConv2d>,
    cond_blocks: Vec<CondBlock>,
    embed: Tensor,
    input: Conv2d,
    layers: Vec<GatedLayer>,
    attention: Vec<(usize, CausalAttention)>,
    pos: Tensor,
    attn_mask: Tensor,
    output: Vec<Conv2d>,
    logits: Conv2d,
}

impl StructureNet {
    /// `image_size` must be a multiple of 8; the grid is `image_size / 8` square.
    pub fn new(
        config: StructureGenConfig,
        codebook_size: usize,
        image_size: usize,
        store: &ParamStore,
    ) -> Result<Self> {
        config.validate()?;
        if image_size == 0 || image_size % 8 != 0 {
            return Err(Error::Config(format!(
                "structure network needs an image size divisible by 8, got {image_size}"
            )));
        }
        let p = store.pp("structure");
        let grid = image_size / 8;
        let (hid, res, ch) = (config.hidden_units, config.residual_units, config.conditioning_hidden);
        let k = config.kernel_size;
        let down = Window::square(4, 2, 1, 1);
        let one = Window::same(1, 1);
        let cond_in = vec![
            GatedConv2d::new(&p.pp("cond/down0"), 4, ch, down)?,
            GatedConv2d::new(&p.pp("cond/down1"), ch, ch, down)?,
            GatedConv2d::new(&p.pp("cond/down2"), ch, ch, down)?,
        ];
        let cond_blocks = (0..config.conditioning_blocks)
            .map(|i| {
                let q = p.pp(format!("cond/block{i}"));
                Ok(CondBlock {
                    gated: GatedConv2d::new(&q.pp("gated"), ch, config.conditioning_residual, Window::same(3, 1))?,
                    proj: Conv2d::new(&q.pp("proj"), config.conditioning_residual, ch, one, true)?,
                })
            })
            .collect::<Result<_>>()?;
        let embed = p.param("embed", &[codebook_size, hid], Init::Normal(1.0))?;
        let input = Conv2d::new(&p.pp("input"), hid, hid, Window::same(k, 1), true)?
            .with_mask(&causal_kernel_mask(k, false))?;
        let mask_b = causal_kernel_mask(k, true);
        let layers = (0..config.layers)
            .map(|i| {
                let q = p.pp(format!("layer{i}"));
                Ok(GatedLayer {
                    conv: Conv2d::new(&q.pp("conv"), hid, 2 * res, Window::same(k, 1), true)?
                        .with_mask(&mask_b)?,
                    cond: Conv2d::new(&q.pp("cond"), ch, 2 * res, one, false)?,
                    out: Conv2d::new(&q.pp("out"), res, hid, one, true)?,
                })
            })
            .collect::<Result<_>>()?;
        let attention = config
            .attention_after()
            .into_iter()
            .enumerate()
            .map(|(j, after)| {
                let q = p.pp(format!("attention{j}"));
                Ok((
                    after,
                    CausalAttention {
                        q: Linear::new(&q.pp("q"), hid, hid)?,
                        k: Linear::new(&q.pp("k"), hid, hid)?,
                        v: Linear::new(&q.pp("v"), hid, hid)?,
                        out: Linear::new(&q.pp("out"), hid, hid)?,
                        heads: config.attention_heads,
                    },
                ))
            })
            .collect::<Result<_>>()?;
        let n = grid * grid;
        let pos = p.param("position", &[n, hid], Init::Normal(0.02))?;
        // a position attends to itself and everything before it
        let mask: Vec<f32> = (0..n * n)
            .map(|ij| if ij % n <= ij / n { 0.0 } else { f32::NEG_INFINITY })
            .collect();
        let attn_mask = Tensor::from_vec(mask, (n, n), &Device::Cpu)?.to_dtype(store.dtype())?;
        let output = (0..config.output_stack_layers)
            .map(|i| Conv2d::new(&p.pp(format!("output{i}")), hid, hid, one, true))
            .collect::<Result<_>>()?;
        let logits = Conv2d::with_init(
            &p.pp("logits"),
            hid,
            codebook_size,
            one,
            Init::Uniform(0.1 / (hid as f64).sqrt()),
        )?;
        Ok(Self {
            config,
            codebook_size,
            grid,
            store: store.clone(),
            cond_in,
            cond_blocks,
            embed,
            input,
            layers,
            attention,
            pos,
            attn_mask,
            output,
            logits,
        })
    }

    pub fn config(&self) -> &StructureGenConfig {
        &self.config
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn grid_size(&self) -> usize {
        self.grid
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Condition from `(B, 3, H, W)` images and `(B, 1, H, W)` masks (1 = missing).
    ///
    /// Missing pixels are overwritten with the configured fill here, so content under
    /// the hole can never reach the condition.
    pub fn build_condition(&self, images: &Tensor, masks: &Tensor) -> Result<ConditionStack> {
        let (b, c, h, w) = images.dims4()?;
        let size = self.grid * 8;
        if c != 3 || h != size || w != size {
            contract!("condition expects (B, 3, {size}, {size}) images, got {:?}", images.dims());
        }
        if masks.dims() != [b, 1, h, w] {
            contract!("mask {:?} is not aligned with images {:?}", masks.dims(), images.dims());
        }
        let keep = masks.affine(-1.0, 1.0)?;
        let filled = images
            .broadcast_mul(&keep)?
            .broadcast_add(&(masks * self.config.hole_fill)?)?;
        let mut x = Tensor::cat(&[&filled, masks], 1)?;
        for l in &self.cond_in {
            x = l.forward(&x)?;
        }
        for blk in &self.cond_blocks {
            x = (&x + blk.proj.forward(&blk.gated.forward(&x)?)?)?;
        }
        Ok(ConditionStack { features: x })
    }

    /// Condition from image grids and masks.
    pub fn condition_from_grids(&self, images: &[ImageGrid], masks: &[Mask]) -> Result<ConditionStack> {
        if images.len() != masks.len() {
            contract!("{} images but {} masks", images.len(), masks.len());
        }
        for (i, m) in images.iter().zip(masks) {
            if i.height() != m.height() || i.width() != m.width() {
                contract!("mask {}x{} is not aligned with a {}x{} image", m.height(), m.width(), i.height(), i.width());
            }
        }
        let dtype = self.store.dtype();
        self.build_condition(
            &ImageGrid::batch_to_tensor(images, dtype)?,
            &Mask::batch_to_tensor(masks, dtype)?,
        )
    }

    fn check_targets(&self, targets: &Tensor, cond: &ConditionStack) -> Result<()> {
        let (b, h, w) = targets.dims3()?;
        if h != self.grid || w != self.grid || b != cond.batch_size() {
            contract!(
                "targets {:?} do not match a batch of {} {g}x{g} grids",
                targets.dims(),
                cond.batch_size(),
                g = self.grid
            );
        }
        let max = targets.flatten_all()?.max(0)?.to_scalar::<u32>()?;
        if max as usize >= self.codebook_size {
            contract!("target index {max} out of range for K = {}", self.codebook_size);
        }
        Ok(())
    }

    /// `(B, K, h, w)` logits; dropout is active only when `rng` is given.
    pub fn forward_logits(
        &self,
        targets: &Tensor,
        cond: &ConditionStack,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        self.check_targets(targets, cond)?;
        let targets = targets.to_dtype(DType::U32)?;
        let (b, h, w) = targets.dims3()?;
        let hid = self.config.hidden_units;
        let res = self.config.residual_units;
        let x = self
            .embed
            .index_select(&targets.flatten_all()?, 0)?
            .reshape((b, h, w, hid))?
            .permute((0, 3, 1, 2))?
            .contiguous()?;
        let mut x = self.input.forward(&x)?;
        let mut attention = self.attention.iter().peekable();
        for (i, layer) in self.layers.iter().enumerate() {
            let inp = match rng.as_deref_mut() {
                Some(r) => dropout(&x, self.config.dropout, r)?,
                None => x.clone(),
            };
            let a = layer
                .conv
                .forward(&inp)?
                .broadcast_add(&layer.cond.forward(&cond.features)?)?;
            let g = (a.narrow(1, 0, res)?.tanh()? * ops::sigmoid(&a.narrow(1, res, res)?)?)?;
            x = (&x + layer.out.forward(&g)?)?;
            while let Some((_, attn)) = attention.next_if(|(after, _)| *after == i) {
                x = attn.forward(&x, &self.attn_mask, &self.pos)?;
            }
        }
        let mut y = x;
        for l in &self.output {
            y = (&y + l.forward(&y.relu()?)?)?;
        }
        self.logits.forward(&y.relu()?)
    }

    /// Teacher-forced mean NLL in nats.
    pub fn nll(
        &self,
        targets: &Tensor,
        cond: &ConditionStack,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        let logits = self.forward_logits(targets, cond, rng)?;
        nll_loss(&logits, targets)
    }

    fn decode_sequential(
        &self,
        cond: &ConditionStack,
        mut pick: impl FnMut(usize, &[f64]) -> u32,
    ) -> Result<Vec<LatentIndexGrid>> {
        let b = cond.batch_size();
        let (g, k) = (self.grid, self.codebook_size);
        let n = g * g;
        let mut cells = vec![0u32; b * n];
        for pos in 0..n {
            let t = Tensor::from_slice(&cells, (b, g, g), &Device::Cpu)?;
            let logits = self.forward_logits(&t, cond, None)?;
            let (y, x) = (pos / g, pos % g);
            let at = logits.narrow(2, y, 1)?.narrow(3, x, 1)?.reshape((b, k))?;
            let v = ops::to_f64_vec(&at)?;
            for item in 0..b {
                cells[item * n + pos] = pick(item, &v[item * k..(item + 1) * k]);
            }
        }
        cells
            .chunks(n)
            .map(|c| LatentIndexGrid::new(g, g, c.to_vec(), k))
            .collect()
    }

    /// Samples one grid per batch item in raster order; item `i` draws from a stream seeded by `seeds[i]`.
    pub fn sample_structure(
        &self,
        cond: &ConditionStack,
        temperature: f64,
        seeds: &[u64],
    ) -> Result<Vec<LatentIndexGrid>> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            contract!("sampling temperature must be positive, got {temperature}");
        }
        let cond = if cond.batch_size() == 1 && seeds.len() > 1 {
            cond.repeat(seeds.len())?
        } else {
            cond.clone()
        };
        if cond.batch_size() != seeds.len() {
            contract!("{} seeds for a batch of {} conditions", seeds.len(), cond.batch_size());
        }
        let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
        self.decode_sequential(&cond, |item, logits| {
            sample_categorical(logits, temperature, &mut rngs[item])
        })
    }

    /// Raster-order argmax decoding.
    pub fn greedy_structure(&self, cond: &ConditionStack) -> Result<Vec<LatentIndexGrid>> {
        self.decode_sequential(cond, |_, logits| argmax(logits))
    }

    /// Teacher-forced entropy of the predictive distribution at every cell.
    pub fn entropy_map(&self, cond: &ConditionStack, grids: &[LatentIndexGrid]) -> Result<Vec<EntropyMap>> {
        let t = LatentIndexGrid::batch_to_tensor(grids)?;
        entropy_from_logits(&self.forward_logits(&t, cond, None)?)
    }
}
