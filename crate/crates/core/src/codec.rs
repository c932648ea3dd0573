//! Hierarchical VQ-VAE: a `/8` structural latent and a `/4` textural latent,
//! each snapped to its own codebook.

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{contract, Error, Result};
use crate::image::ImageGrid;
use crate::nn::{standard_normal, Conv2d, Init, ParamStore};
use crate::ops::{self, Window};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub image_size: usize,
    pub hidden_units: usize,
    pub residual_units: usize,
    /// Residual blocks per encoder/decoder path.
    pub residual_layers: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub commitment_weight: f64,
    pub reconstruction_weight: f64,
    pub ema_decay: f64,
    pub ema_epsilon: f64,
}

impl CodecConfig {
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            hidden_units: 128,
            residual_units: 64,
            residual_layers: 2,
            codebook_size: 128,
            code_dim: 64,
            commitment_weight: 0.25,
            reconstruction_weight: 1.0,
            ema_decay: 0.99,
            ema_epsilon: 1e-5,
        }
    }

    pub fn paper() -> Self {
        Self {
            image_size: 256,
            codebook_size: 512,
            ..Self::desk()
        }
    }

    pub fn structural_grid_size(&self) -> usize {
        self.image_size / 8
    }

    pub fn textural_grid_size(&self) -> usize {
        self.image_size / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return Err(Error::Config(format!(
                "codec.image_size must be a positive multiple of 8, got {}",
                self.image_size
            )));
        }
        if self.codebook_size < 2 || self.code_dim < 1 {
            return Err(Error::Config("codebook needs K >= 2 and D >= 1".into()));
        }
        if self.hidden_units < 2 || self.residual_units == 0 {
            return Err(Error::Config("codec hidden/residual units too small".into()));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config("codec.ema_decay must lie in (0, 1)".into()));
        }
        if self.ema_epsilon <= 0.0 || self.commitment_weight < 0.0 || self.reconstruction_weight < 0.0
        {
            return Err(Error::Config("codec loss weights / epsilon out of range".into()));
        }
        Ok(())
    }
}

/// `h×w` grid of codebook indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LatentIndexGrid {
    height: usize,
    width: usize,
    indices: Vec<u32>,
}

impl LatentIndexGrid {
    pub fn new(height: usize, width: usize, indices: Vec<u32>, codebook_size: usize) -> Result<Self> {
        if indices.len() != height * width {
            contract!("index grid {height}x{width} needs {} indices", height * width);
        }
        if let Some(bad) = indices.iter().find(|&&i| i as usize >= codebook_size) {
            contract!("index {bad} out of range for codebook of size {codebook_size}");
        }
        Ok(Self {
            height,
            width,
            indices,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            indices: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.indices[y * self.width + x]
    }

    /// Splits a `(B, h, w)` u32 tensor.
    pub fn from_batch_tensor(t: &Tensor) -> Result<Vec<Self>> {
        let (b, h, w) = t.dims3()?;
        let flat = t.flatten_all()?.to_vec1::<u32>()?;
        Ok(flat
            .chunks(h * w)
            .take(b)
            .map(|c| Self {
                height: h,
                width: w,
                indices: c.to_vec(),
            })
            .collect())
    }

    pub fn batch_to_tensor(grids: &[Self]) -> Result<Tensor> {
        let Some(first) = grids.first() else {
            contract!("cannot batch zero index grids");
        };
        let mut buf = Vec::with_capacity(grids.len() * first.indices.len());
        for g in grids {
            if g.height != first.height || g.width != first.width {
                contract!("batched index grids must share a shape");
            }
            buf.extend_from_slice(&g.indices);
        }
        Ok(Tensor::from_vec(
            buf,
            (grids.len(), first.height, first.width),
            &Device::Cpu,
        )?)
    }
}

/// `K×D` prototype matrix with its EMA accumulators.
#[derive(Debug, Clone)]
pub struct Codebook {
    prototypes: Tensor,
    ema_counts: Tensor,
    ema_sums: Tensor,
}

impl Codebook {
    /// Accumulators start at `N_i = 1`, `m_i = e_i` so that `e_i = m_i / N_i` holds from the start.
    pub fn from_prototypes(prototypes: Tensor) -> Result<Self> {
        let (k, _) = prototypes.dims2()?;
        if k < 2 {
            contract!("codebook needs at least two prototypes");
        }
        let ema_counts = Tensor::ones(k, prototypes.dtype(), prototypes.device())?;
        Ok(Self {
            ema_sums: prototypes.clone(),
            prototypes,
            ema_counts,
        })
    }

    pub fn from_parts(prototypes: Tensor, ema_counts: Tensor, ema_sums: Tensor) -> Result<Self> {
        let (k, d) = prototypes.dims2()?;
        if ema_counts.dims() != [k] || ema_sums.dims() != [k, d] {
            contract!("codebook accumulators do not match a {k}x{d} codebook");
        }
        Ok(Self {
            prototypes,
            ema_counts,
            ema_sums,
        })
    }

    /// Rows drawn from `N(0, 1/D)`.
    pub fn random(k: usize, d: usize, dtype: DType, rng: &mut impl Rng) -> Result<Self> {
        let scale = 1.0 / (d as f64).sqrt();
        let v: Vec<f64> = (0..k * d).map(|_| scale * standard_normal(rng)).collect();
        Self::from_prototypes(Tensor::from_vec(v, (k, d), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn size(&self) -> usize {
        self.prototypes.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.prototypes.dims()[1]
    }

    pub fn prototypes(&self) -> &Tensor {
        &self.prototypes
    }

    pub fn ema_counts(&self) -> &Tensor {
        &self.ema_counts
    }

    pub fn ema_sums(&self) -> &Tensor {
        &self.ema_sums
    }

    /// Prototype vectors for a `(B, h, w)` index tensor, as `(B, D, h, w)`.
    pub fn lookup(&self, indices: &Tensor) -> Result<Tensor> {
        let (b, h, w) = indices.dims3()?;
        let rows = self.prototypes.index_select(&indices.flatten_all()?, 0)?;
        Ok(rows
            .reshape((b, h, w, self.dim()))?
            .permute((0, 3, 1, 2))?
            .contiguous()?)
    }
}

fn check_features(features: &Tensor, codebook: &Codebook) -> Result<(usize, usize, usize, usize)> {
    let (b, d, h, w) = features.dims4()?;
    if d != codebook.dim() {
        contract!("feature depth {d} does not match codebook dimension {}", codebook.dim());
    }
    if features.dtype() != codebook.prototypes.dtype() {
        contract!("features and codebook have different dtypes");
    }
    Ok((b, d, h, w))
}

/// Row-major `(N, D)` view of a `(B, D, h, w)` feature tensor.
fn cells(features: &Tensor) -> Result<Tensor> {
    let (b, d, h, w) = features.dims4()?;
    Ok(features.permute((0, 2, 3, 1))?.reshape((b * h * w, d))?)
}

/// Index of the nearest prototype for every row of `x` (`N×D`, row-major).
///
/// Candidates come from the Gram expansion `‖e‖² − 2x·e` (one matrix
/// multiply); every prototype within rounding distance of the best candidate
/// is then re-scored with the exact squared distance, so near-ties resolve
/// to the lowest index exactly as an exhaustive search would.
fn nearest_indices(x: &Tensor, protos: &Tensor) -> Result<Vec<u32>> {
    let x = x.to_dtype(DType::F64)?;
    let e = protos.to_dtype(DType::F64)?;
    let (n, d) = x.dims2()?;
    let k = e.dims()[0];
    let gram = x.matmul(&e.t()?)?.flatten_all()?.to_vec1::<f64>()?;
    let xs = x.flatten_all()?.to_vec1::<f64>()?;
    let es = e.flatten_all()?.to_vec1::<f64>()?;
    let e_norm: Vec<f64> = es.chunks(d).map(|r| r.iter().map(|v| v * v).sum()).collect();
    let e_norm_max = e_norm.iter().cloned().fold(0.0, f64::max);
    let mut out = Vec::with_capacity(n);
    let mut cand = Vec::with_capacity(8);
    for (i, row) in xs.chunks(d).enumerate() {
        let g = &gram[i * k..(i + 1) * k];
        let x_norm: f64 = row.iter().map(|v| v * v).sum();
        let score = |j: usize| e_norm[j] - 2.0 * g[j];
        let best = (0..k).map(score).fold(f64::INFINITY, f64::min);
        let tol = 1e-9 * (x_norm + e_norm_max) + 1e-300;
        cand.clear();
        cand.extend((0..k).filter(|&j| score(j) <= best + tol));
        let mut arg = cand[0];
        if cand.len() > 1 {
            let exact = |j: usize| -> f64 {
                row.iter()
                    .zip(&es[j * d..(j + 1) * d])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum()
            };
            let mut best_exact = exact(arg);
            for &j in &cand[1..] {
                let v = exact(j);
                if v < best_exact {
                    best_exact = v;
                    arg = j;
                }
            }
        }
        out.push(arg as u32);
    }
    Ok(out)
}

/// Snaps every cell of `(B, D, h, w)` features to its nearest prototype.
///
/// Returns `(B, h, w)` u32 indices and the `(B, D, h, w)` quantized features.
/// Ties go to the lowest index.
pub fn nearest_code(features: &Tensor, codebook: &Codebook) -> Result<(Tensor, Tensor)> {
    let (b, _, h, w) = check_features(features, codebook)?;
    let idx = nearest_indices(&cells(&features.detach())?, &codebook.prototypes)?;
    let idx = Tensor::from_vec(idx, (b, h, w), features.device())?;
    let q = codebook.lookup(&idx)?;
    Ok((idx, q))
}

/// Quantization whose value is the nearest prototype and whose gradient is the identity.
pub fn quantize_straight_through(features: &Tensor, codebook: &Codebook) -> Result<Tensor> {
    let (_, q) = nearest_code(features, codebook)?;
    ops::straight_through(features, &q)
}

/// One EMA step of the codebook towards the cells assigned to each prototype.
///
/// `N_i ← γN_i + (1−γ)n_i`, `m_i ← γm_i + (1−γ)Σx`, `e_i ← m_i / max(N_i, ε)`.
pub fn ema_update(
    codebook: &Codebook,
    features: &Tensor,
    assignments: &Tensor,
    gamma: f64,
    epsilon: f64,
) -> Result<Codebook> {
    if !(gamma > 0.0 && gamma < 1.0) {
        contract!("EMA decay must lie in (0, 1), got {gamma}");
    }
    if epsilon <= 0.0 {
        contract!("EMA epsilon must be positive");
    }
    let (b, _, h, w) = check_features(features, codebook)?;
    if assignments.dims() != [b, h, w] {
        contract!(
            "assignments {:?} do not match a {b}x{h}x{w} feature grid",
            assignments.dims()
        );
    }
    let x = cells(&features.detach())?.contiguous()?;
    let idx = assignments.flatten_all()?;
    let (k, d) = (codebook.size(), codebook.dim());
    let dtype = codebook.prototypes.dtype();
    let dev = codebook.prototypes.device();
    let ones = Tensor::ones(b * h * w, dtype, dev)?;
    let counts = Tensor::zeros(k, dtype, dev)?.index_add(&idx, &ones, 0)?;
    let sums = Tensor::zeros((k, d), dtype, dev)?.index_add(&idx, &x, 0)?;
    let ema_counts = ((&codebook.ema_counts * gamma)? + (counts * (1.0 - gamma))?)?;
    let ema_sums = ((&codebook.ema_sums * gamma)? + (sums * (1.0 - gamma))?)?;
    let denom = ema_counts.maximum(epsilon)?.unsqueeze(1)?;
    let prototypes = ema_sums.broadcast_div(&denom)?;
    Ok(Codebook {
        prototypes,
        ema_counts,
        ema_sums,
    })
}

/// Loss terms of the auto-encoder; all are scalar tensors.
#[derive(Debug, Clone)]
pub struct VqLosses {
    pub reconstruction: Tensor,
    pub structural_commitment: Tensor,
    pub textural_commitment: Tensor,
    pub total: Tensor,
}

/// Mean-squared reconstruction loss plus commitment losses against stop-gradient codes.
#[allow(clippy::too_many_arguments)]
pub fn vq_losses(
    reconstruction: &Tensor,
    target: &Tensor,
    s: &Tensor,
    s_q: &Tensor,
    t: &Tensor,
    t_q: &Tensor,
    config: &CodecConfig,
) -> Result<VqLosses> {
    if reconstruction.dims() != target.dims() || s.dims() != s_q.dims() || t.dims() != t_q.dims()
    {
        contract!("vq loss inputs have inconsistent shapes");
    }
    let l2 = (reconstruction - target)?.sqr()?.mean_all()?;
    let sc = (s - s_q.detach())?.sqr()?.mean_all()?;
    let tc = (t - t_q.detach())?.sqr()?.mean_all()?;
    let total = ((&l2 * config.reconstruction_weight)? + ((&sc + &tc)? * config.commitment_weight)?)?;
    Ok(VqLosses {
        reconstruction: l2,
        structural_commitment: sc,
        textural_commitment: tc,
        total,
    })
}

struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    fn new(p: &ParamStore, channels: usize, residual: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&p.pp("conv1"), channels, residual, Window::same(3, 1), true)?,
            conv2: Conv2d::new(&p.pp("conv2"), residual, channels, Window::same(1, 1), true)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&x.relu()?)?.relu()?;
        Ok((x + self.conv2.forward(&h)?)?)
    }
}

struct ResStack(Vec<ResBlock>);

impl ResStack {
    fn new(p: &ParamStore, n: usize, channels: usize, residual: usize) -> Result<Self> {
        (0..n)
            .map(|i| ResBlock::new(&p.pp(format!("res{i}")), channels, residual))
            .collect::<Result<_>>()
            .map(Self)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for b in &self.0 {
            h = b.forward(&h)?;
        }
        Ok(h.relu()?)
    }
}

/// Nearest ×2 upsample followed by a 3×3 convolution.
struct UpConv(Conv2d);

impl UpConv {
    fn new(p: &ParamStore, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self(Conv2d::new(p, cin, cout, Window::same(3, 1), true)?))
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.0.forward(&ops::upsample_nearest(x, 2)?)
    }
}

/// Which latent a visualization keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentLevel {
    Structural,
    Textural,
}

/// Every intermediate of one encoding pass.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Continuous structural features `(B, D, S/8, S/8)`.
    pub s: Tensor,
    pub s_indices: Tensor,
    pub s_quantized: Tensor,
    /// Continuous textural features `(B, D, S/4, S/4)`.
    pub t: Tensor,
    pub t_indices: Tensor,
    pub t_quantized: Tensor,
    /// Straight-through versions used by the decoder.
    pub s_st: Tensor,
    pub t_st: Tensor,
}

const CODEBOOK_NAMES: [&str; 2] = ["codebook_s", "codebook_t"];

struct CodebookVars {
    prototypes: Var,
    counts: Var,
    sums: Var,
}

impl CodebookVars {
    fn new(p: &ParamStore, k: usize, d: usize, rng: &mut impl Rng) -> Result<Self> {
        let init = Codebook::random(k, d, p.dtype(), rng)?;
        let prototypes = p.buffer("prototypes", &[k, d], Init::Zeros)?;
        let counts = p.buffer("ema_counts", &[k], Init::Zeros)?;
        let sums = p.buffer("ema_sums", &[k, d], Init::Zeros)?;
        let fresh = counts.as_tensor().sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()? == 0.0;
        if fresh {
            prototypes.set(&init.prototypes)?;
            counts.set(&init.ema_counts)?;
            sums.set(&init.ema_sums)?;
        }
        Ok(Self {
            prototypes,
            counts,
            sums,
        })
    }

    fn get(&self) -> Codebook {
        Codebook {
            prototypes: self.prototypes.as_tensor().clone(),
            ema_counts: self.counts.as_tensor().clone(),
            ema_sums: self.sums.as_tensor().clone(),
        }
    }

    fn set(&self, cb: &Codebook) -> Result<()> {
        self.prototypes.set(&cb.prototypes)?;
        self.counts.set(&cb.ema_counts)?;
        self.sums.set(&cb.ema_sums)?;
        Ok(())
    }
}

/// The hierarchical encoder/decoder pair with its two codebooks.
pub struct VqVae {
    config: CodecConfig,
    store: ParamStore,
    enc_b: Vec<Conv2d>,
    enc_b_res: ResStack,
    enc_t: Vec<Conv2d>,
    enc_t_res: ResStack,
    quant_conv_t: Conv2d,
    dec_t_in: Conv2d,
    dec_t_res: ResStack,
    dec_t_up: UpConv,
    quant_conv_b: Conv2d,
    upsample_t: UpConv,
    dec_in: Conv2d,
    dec_res: ResStack,
    dec_up1: UpConv,
    dec_up2: UpConv,
    codebook_s: CodebookVars,
    codebook_t: CodebookVars,
    trained_steps: Var,
}

impl VqVae {
    /// Builds the network under `store` (fresh, loaded, or frozen).
    pub fn new(config: CodecConfig, store: &ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let p = store.pp("codec");
        let (hid, res, layers) = (config.hidden_units, config.residual_units, config.residual_layers);
        let (k, d) = (config.codebook_size, config.code_dim);
        let down = Window::square(4, 2, 1, 1);
        let same = Window::same(3, 1);
        let one = Window::same(1, 1);
        let enc_b = vec![
            Conv2d::new(&p.pp("enc_b/conv0"), 3, hid / 2, down, true)?,
            Conv2d::new(&p.pp("enc_b/conv1"), hid / 2, hid, down, true)?,
            Conv2d::new(&p.pp("enc_b/conv2"), hid, hid, same, true)?,
        ];
        let enc_b_res = ResStack::new(&p.pp("enc_b"), layers, hid, res)?;
        let enc_t = vec![
            Conv2d::new(&p.pp("enc_t/conv0"), hid, hid, down, true)?,
            Conv2d::new(&p.pp("enc_t/conv1"), hid, hid, same, true)?,
        ];
        let enc_t_res = ResStack::new(&p.pp("enc_t"), layers, hid, res)?;
        let quant_conv_t = Conv2d::new(&p.pp("quant_conv_t"), hid, d, one, true)?;
        let dec_t_in = Conv2d::new(&p.pp("dec_t/conv_in"), d, hid, same, true)?;
        let dec_t_res = ResStack::new(&p.pp("dec_t"), layers, hid, res)?;
        let dec_t_up = UpConv::new(&p.pp("dec_t/up"), hid, d)?;
        let quant_conv_b = Conv2d::new(&p.pp("quant_conv_b"), d + hid, d, one, true)?;
        let upsample_t = UpConv::new(&p.pp("upsample_t"), d, d)?;
        let dec_in = Conv2d::new(&p.pp("dec/conv_in"), 2 * d, hid, same, true)?;
        let dec_res = ResStack::new(&p.pp("dec"), layers, hid, res)?;
        let dec_up1 = UpConv::new(&p.pp("dec/up1"), hid, hid / 2)?;
        let dec_up2 = UpConv::new(&p.pp("dec/up2"), hid / 2, 3)?;
        let codebook_s = CodebookVars::new(&p.pp(CODEBOOK_NAMES[0]), k, d, rng)?;
        let codebook_t = CodebookVars::new(&p.pp(CODEBOOK_NAMES[1]), k, d, rng)?;
        let trained_steps = p.buffer("trained_steps", &[], Init::Zeros)?;
        Ok(Self {
            config,
            store: store.clone(),
            enc_b,
            enc_b_res,
            enc_t,
            enc_t_res,
            quant_conv_t,
            dec_t_in,
            dec_t_res,
            dec_t_up,
            quant_conv_b,
            upsample_t,
            dec_in,
            dec_res,
            dec_up1,
            dec_up2,
            codebook_s,
            codebook_t,
            trained_steps,
        })
    }

    /// Loads a read-only codec from an archive written by [`VqVae::to_archive`].
    pub fn frozen(config: CodecConfig, archive: Archive) -> Result<Self> {
        let store = ParamStore::frozen(archive, DType::F32);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        Self::new(config, &store, &mut rng)
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn to_archive(&self) -> Result<Archive> {
        self.store.to_archive()
    }

    pub fn structural_codebook(&self) -> Codebook {
        self.codebook_s.get()
    }

    pub fn textural_codebook(&self) -> Codebook {
        self.codebook_t.get()
    }

    pub fn trained_steps(&self) -> Result<u64> {
        Ok(self
            .trained_steps
            .as_tensor()
            .to_dtype(DType::F64)?
            .to_scalar::<f64>()? as u64)
    }

    pub fn set_trained_steps(&self, steps: u64) -> Result<()> {
        let t = Tensor::new(steps as f64, &Device::Cpu)?.to_dtype(self.store.dtype())?;
        self.trained_steps.set(&t)?;
        Ok(())
    }

    fn check_image(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.config.image_size;
        if c != 3 || h != s || w != s {
            contract!("codec expects (B, 3, {s}, {s}) images, got {:?}", x.dims());
        }
        Ok(())
    }

    fn bottom_features(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.enc_b[0].forward(x)?.relu()?;
        h = self.enc_b[1].forward(&h)?.relu()?;
        h = self.enc_b[2].forward(&h)?;
        self.enc_b_res.forward(&h)
    }

    fn top_features(&self, enc_b: &Tensor) -> Result<Tensor> {
        let h = self.enc_t[0].forward(enc_b)?.relu()?;
        let h = self.enc_t[1].forward(&h)?;
        let h = self.enc_t_res.forward(&h)?;
        self.quant_conv_t.forward(&h)
    }

    fn textural_from(&self, enc_b: &Tensor, s_st: &Tensor) -> Result<Tensor> {
        let h = self.dec_t_in.forward(s_st)?;
        let h = self.dec_t_res.forward(&h)?;
        let dec_t = self.dec_t_up.forward(&h)?;
        self.quant_conv_b
            .forward(&Tensor::cat(&[&dec_t, enc_b], 1)?)
    }

    /// Full encoding pass with quantization of both levels.
    pub fn encode(&self, x: &Tensor) -> Result<Encoded> {
        self.check_image(x)?;
        let enc_b = self.bottom_features(x)?;
        let s = self.top_features(&enc_b)?;
        let cb_s = self.codebook_s.get();
        let (s_indices, s_quantized) = nearest_code(&s, &cb_s)?;
        let s_st = ops::straight_through(&s, &s_quantized)?;
        let t = self.textural_from(&enc_b, &s_st)?;
        let cb_t = self.codebook_t.get();
        let (t_indices, t_quantized) = nearest_code(&t, &cb_t)?;
        let t_st = ops::straight_through(&t, &t_quantized)?;
        Ok(Encoded {
            s,
            s_indices,
            s_quantized,
            t,
            t_indices,
            t_quantized,
            s_st,
            t_st,
        })
    }

    /// Continuous `(structural, textural)` features of an image batch.
    pub fn encode_hierarchy(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let e = self.encode(x)?;
        Ok((e.s, e.t))
    }

    /// Raw (unclamped) reconstruction from quantized grids; used for losses.
    pub fn decode_raw(&self, s_q: &Tensor, t_q: &Tensor) -> Result<Tensor> {
        let (b, d, hs, ws) = s_q.dims4()?;
        let (bt, dt, ht, wt) = t_q.dims4()?;
        let (gs, gt) = (self.config.structural_grid_size(), self.config.textural_grid_size());
        let dim = self.config.code_dim;
        if b != bt || d != dim || dt != dim || hs != gs || ws != gs || ht != gt || wt != gt {
            contract!(
                "decode expects ({dim}, {gs}, {gs}) and ({dim}, {gt}, {gt}) grids, got {:?} and {:?}",
                s_q.dims(),
                t_q.dims()
            );
        }
        let up = self.upsample_t.forward(s_q)?;
        let h = self.dec_in.forward(&Tensor::cat(&[&up, t_q], 1)?)?;
        let h = self.dec_res.forward(&h)?;
        let h = self.dec_up1.forward(&h)?.relu()?;
        self.dec_up2.forward(&h)
    }

    /// Reconstruction clamped to `[0, 1]`.
    pub fn decode(&self, s_q: &Tensor, t_q: &Tensor) -> Result<Tensor> {
        Ok(self.decode_raw(s_q, t_q)?.clamp(0.0, 1.0)?)
    }

    /// Decodes one latent level with the other replaced by a zero grid.
    pub fn visualize_latents(
        &self,
        indices: &[LatentIndexGrid],
        level: LatentLevel,
    ) -> Result<Vec<ImageGrid>> {
        if self.trained_steps()? == 0 {
            return Err(Error::Untrained(
                "latent visualization needs a trained codec".into(),
            ));
        }
        let idx = LatentIndexGrid::batch_to_tensor(indices)?;
        let b = indices.len();
        let (gs, gt, d) = (
            self.config.structural_grid_size(),
            self.config.textural_grid_size(),
            self.config.code_dim,
        );
        let dtype = self.store.dtype();
        let (s_q, t_q) = match level {
            LatentLevel::Structural => {
                if idx.dims()[1..] != [gs, gs] {
                    contract!("structural indices must be {gs}x{gs}");
                }
                (
                    self.codebook_s.get().lookup(&idx)?,
                    Tensor::zeros((b, d, gt, gt), dtype, &Device::Cpu)?,
                )
            }
            LatentLevel::Textural => {
                if idx.dims()[1..] != [gt, gt] {
                    contract!("textural indices must be {gt}x{gt}");
                }
                (
                    Tensor::zeros((b, d, gs, gs), dtype, &Device::Cpu)?,
                    self.codebook_t.get().lookup(&idx)?,
                )
            }
        };
        ImageGrid::from_batch_tensor(&self.decode(&s_q, &t_q)?)
    }

    /// Encode, quantize and decode; returns the encoding, raw reconstruction and losses.
    pub fn forward_losses(&self, x: &Tensor) -> Result<(Encoded, Tensor, VqLosses)> {
        let e = self.encode(x)?;
        let recon = self.decode_raw(&e.s_st, &e.t_st)?;
        let losses = vq_losses(
            &recon,
            x,
            &e.s,
            &e.s_quantized,
            &e.t,
            &e.t_quantized,
            &self.config,
        )?;
        Ok((e, recon, losses))
    }

    /// EMA update of both codebooks from one encoding pass.
    pub fn update_codebooks(&self, e: &Encoded) -> Result<()> {
        let (g, eps) = (self.config.ema_decay, self.config.ema_epsilon);
        let s = ema_update(&self.codebook_s.get(), &e.s, &e.s_indices, g, eps)?;
        let t = ema_update(&self.codebook_t.get(), &e.t, &e.t_indices, g, eps)?;
        self.codebook_s.set(&s)?;
        self.codebook_t.set(&t)?;
        Ok(())
    }

    /// Fraction of codes used by a batch of indices; a diagnostic for dead codes.
    pub fn code_usage(indices: &Tensor, codebook_size: usize) -> Result<f64> {
        let mut seen = vec![false; codebook_size];
        for i in indices.flatten_all()?.to_vec1::<u32>()? {
            seen[i as usize] = true;
        }
        Ok(seen.iter().filter(|&&s| s).count() as f64 / codebook_size as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> CodecConfig {
        CodecConfig {
            image_size: 16,
            hidden_units: 8,
            residual_units: 4,
            residual_layers: 1,
            codebook_size: 8,
            code_dim: 4,
            ..CodecConfig::desk()
        }
    }

    fn brute_force(x: &[f64], e: &[f64], d: usize) -> Vec<u32> {
        x.chunks(d)
            .map(|row| {
                let mut best = (f64::INFINITY, 0);
                for (j, p) in e.chunks(d).enumerate() {
                    let dist: f64 = row.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
                    if dist < best.0 {
                        best = (dist, j);
                    }
                }
                best.1 as u32
            })
            .collect()
    }

    fn grid(values: &[f64], d: usize, h: usize, w: usize) -> Tensor {
        // values given cell-major (h, w, d) -> (1, d, h, w)
        Tensor::from_slice(values, (1, h, w, d), &Device::Cpu)
            .unwrap()
            .permute((0, 3, 1, 2))
            .unwrap()
            .contiguous()
            .unwrap()
    }

    #[test]
    fn nearest_by_inspection() -> Result<()> {
        let cb = Codebook::from_prototypes(Tensor::new(&[[0.0f64, 0.0], [1.0, 1.0]], &Device::Cpu)?)?;
        let (idx, q) = nearest_code(&grid(&[0.9, 0.8], 2, 1, 1), &cb)?;
        assert_eq!(idx.flatten_all()?.to_vec1::<u32>()?, vec![1]);
        assert_eq!(q.flatten_all()?.to_vec1::<f64>()?, vec![1.0, 1.0]);
        Ok(())
    }

    #[test]
    fn exact_prototype_and_ties() -> Result<()> {
        let cb = Codebook::from_prototypes(Tensor::new(
            &[[1.0f64, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, 1.0]],
            &Device::Cpu,
        )?)?;
        // exactly on prototype 2; equidistant from 0 and 1 -> 0; duplicate rows 1 and 3 -> 1
        let x = grid(&[-1.0, 0.0, 0.5, 0.5, 0.0, 1.0], 2, 1, 3);
        let (idx, q) = nearest_code(&x, &cb)?;
        assert_eq!(idx.flatten_all()?.to_vec1::<u32>()?, vec![2, 0, 1]);
        assert_eq!(
            q.permute((0, 2, 3, 1))?.flatten_all()?.to_vec1::<f64>()?[..2],
            [-1.0, 0.0]
        );
        Ok(())
    }

    #[test]
    fn matches_exhaustive_argmin_on_random_cells() -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cb = Codebook::random(128, 16, DType::F32, &mut rng)?;
        let x: Vec<f64> = (0..1000 * 16).map(|_| 0.3 * standard_normal(&mut rng)).collect();
        let xt = grid(&x, 16, 10, 100).to_dtype(DType::F32)?;
        let (idx, _) = nearest_code(&xt, &cb)?;
        let xs: Vec<f64> = xt.permute((0, 2, 3, 1))?.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
        let es: Vec<f64> = cb.prototypes().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
        assert_eq!(idx.flatten_all()?.to_vec1::<u32>()?, brute_force(&xs, &es, 16));
        Ok(())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn quantization_is_idempotent(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cb = Codebook::random(16, 3, DType::F64, &mut rng).unwrap();
            let x: Vec<f64> = (0..12 * 3).map(|_| standard_normal(&mut rng)).collect();
            let (idx, q) = nearest_code(&grid(&x, 3, 3, 4), &cb).unwrap();
            let (idx2, q2) = nearest_code(&q, &cb).unwrap();
            prop_assert_eq!(idx.flatten_all().unwrap().to_vec1::<u32>().unwrap(),
                            idx2.flatten_all().unwrap().to_vec1::<u32>().unwrap());
            prop_assert_eq!(q.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
                            q2.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        }
    }

    #[test]
    fn dimension_mismatch_is_a_contract_error() -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cb = Codebook::random(4, 3, DType::F64, &mut rng)?;
        let x = Tensor::zeros((1, 2, 2, 2), DType::F64, &Device::Cpu)?;
        assert!(matches!(nearest_code(&x, &cb), Err(Error::Contract(_))));
        Ok(())
    }

    #[test]
    fn straight_through_fixed_point_and_gradient() -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cb = Codebook::random(8, 4, DType::F64, &mut rng)?;
        let idx = Tensor::new(&[[[0u32, 3], [7, 1]]], &Device::Cpu)?;
        let on = cb.lookup(&idx)?;
        let out = quantize_straight_through(&on, &cb)?;
        assert_eq!(out.flatten_all()?.to_vec1::<f64>()?, on.flatten_all()?.to_vec1::<f64>()?);
        let x = Var::randn(0f64, 1.0, (1, 4, 2, 2), &Device::Cpu)?;
        let g = quantize_straight_through(&x, &cb)?.sum_all()?.backward()?;
        assert_eq!(g.get(&x).unwrap().flatten_all()?.to_vec1::<f64>()?, vec![1.0; 16]);
        Ok(())
    }

    #[test]
    fn ema_empty_cluster_keeps_prototype() -> Result<()> {
        let cb = Codebook::from_prototypes(Tensor::new(&[[0.0f64, 0.0], [5.0, 5.0]], &Device::Cpu)?)?;
        let x = grid(&[0.1, -0.1, 0.2, 0.0], 2, 1, 2);
        let (idx, _) = nearest_code(&x, &cb)?;
        let up = ema_update(&cb, &x, &idx, 0.9, 1e-5)?;
        let p = up.prototypes().to_vec2::<f64>()?;
        assert!((p[1][0] - 5.0).abs() < 1e-12 && (p[1][1] - 5.0).abs() < 1e-12);
        let n = up.ema_counts().to_vec1::<f64>()?;
        assert!((n[1] - 0.9).abs() < 1e-15);
        Ok(())
    }

    #[test]
    fn ema_small_gamma_jumps_to_cell() -> Result<()> {
        let cb = Codebook::from_prototypes(Tensor::new(&[[0.0f64, 0.0], [5.0, 5.0]], &Device::Cpu)?)?;
        let x = grid(&[4.0, 3.0], 2, 1, 1);
        let (idx, _) = nearest_code(&x, &cb)?;
        let up = ema_update(&cb, &x, &idx, 1e-9, 1e-5)?;
        let p = up.prototypes().to_vec2::<f64>()?;
        assert!((p[1][0] - 4.0).abs() < 1e-6 && (p[1][1] - 3.0).abs() < 1e-6);
        Ok(())
    }

    #[test]
    fn ema_rejects_bad_decay() -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cb = Codebook::random(4, 2, DType::F64, &mut rng)?;
        let x = Tensor::zeros((1, 2, 1, 1), DType::F64, &Device::Cpu)?;
        let (idx, _) = nearest_code(&x, &cb)?;
        for g in [0.0, 1.0, -0.5, 1.5] {
            assert!(matches!(ema_update(&cb, &x, &idx, g, 1e-5), Err(Error::Contract(_))));
        }
        Ok(())
    }

    #[test]
    fn loss_values() -> Result<()> {
        let dev = Device::Cpu;
        let cfg = CodecConfig::desk();
        let img = Tensor::rand(0f64, 0.9, (2, 3, 4, 4), &dev)?;
        let s = Tensor::randn(0f64, 1.0, (2, 2, 1, 1), &dev)?;
        let t = Tensor::randn(0f64, 1.0, (2, 2, 2, 2), &dev)?;
        let l = vq_losses(&img, &img, &s, &s, &t, &t, &cfg)?;
        assert_eq!(ops::scalar(&l.total)?, 0.0);
        let shifted = (&img + 0.1)?;
        let l = vq_losses(&shifted, &img, &s, &s, &t, &t, &cfg)?;
        assert!((ops::scalar(&l.reconstruction)? - 0.01).abs() < 1e-12);
        assert!((ops::scalar(&l.total)? - 0.01).abs() < 1e-12);
        assert_eq!((cfg.reconstruction_weight, cfg.commitment_weight), (1.0, 0.25));
        Ok(())
    }

    #[test]
    fn commitment_gradient_skips_codebook() -> Result<()> {
        let dev = Device::Cpu;
        let protos = Var::randn(0f64, 1.0, (4, 2), &dev)?;
        let cb = Codebook::from_prototypes(protos.as_tensor().clone())?;
        let s = Var::randn(0f64, 1.0, (1, 2, 2, 2), &dev)?;
        let (_, q) = nearest_code(&s, &cb)?;
        let img = Tensor::zeros((1, 3, 2, 2), DType::F64, &dev)?;
        let l = vq_losses(&img, &img, &s, &q, &s, &q, &CodecConfig::desk())?;
        let g = l.structural_commitment.backward()?;
        assert!(g.get(&protos).is_none());
        assert!(g.get(&s).is_some());
        Ok(())
    }

    #[test]
    fn shapes_determinism_and_zero_grids() -> Result<()> {
        let cfg = tiny();
        let store = ParamStore::new(DType::F32, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vq = VqVae::new(cfg.clone(), &store, &mut rng)?;
        let x = Tensor::rand(0f32, 1.0, (2, 3, 16, 16), &Device::Cpu)?;
        let (s, t) = vq.encode_hierarchy(&x)?;
        assert_eq!(s.dims(), &[2, 4, 2, 2]);
        assert_eq!(t.dims(), &[2, 4, 4, 4]);
        let (s2, _) = vq.encode_hierarchy(&x)?;
        assert_eq!(s.flatten_all()?.to_vec1::<f32>()?, s2.flatten_all()?.to_vec1::<f32>()?);
        let e = vq.encode(&x)?;
        let out = vq.decode(&e.s_quantized, &e.t_quantized)?;
        assert_eq!(out.dims(), &[2, 3, 16, 16]);
        let v = out.flatten_all()?.to_vec1::<f32>()?;
        assert!(v.iter().all(|p| (0.0..=1.0).contains(p)));
        let zs = e.s_quantized.zeros_like()?;
        let zt = e.t_quantized.zeros_like()?;
        assert_eq!(vq.decode(&e.s_quantized, &zt)?.dims(), &[2, 3, 16, 16]);
        assert_eq!(vq.decode(&zs, &e.t_quantized)?.dims(), &[2, 3, 16, 16]);
        assert!(matches!(
            vq.encode(&Tensor::zeros((1, 3, 8, 8), DType::F32, &Device::Cpu)?),
            Err(Error::Contract(_))
        ));
        assert!(matches!(vq.decode(&zt, &zs), Err(Error::Contract(_))));
        Ok(())
    }

    #[test]
    fn visualization_requires_training_and_is_deterministic() -> Result<()> {
        let store = ParamStore::new(DType::F32, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vq = VqVae::new(tiny(), &store, &mut rng)?;
        let zeros = LatentIndexGrid::zeros(2, 2);
        assert!(matches!(
            vq.visualize_latents(&[zeros.clone()], LatentLevel::Structural),
            Err(Error::Untrained(_))
        ));
        vq.set_trained_steps(1)?;
        let a = vq.visualize_latents(&[zeros.clone()], LatentLevel::Structural)?;
        let b = vq.visualize_latents(&[zeros], LatentLevel::Structural)?;
        assert_eq!(a, b);
        let t = vq.visualize_latents(&[LatentIndexGrid::zeros(4, 4)], LatentLevel::Textural)?;
        assert_eq!((t[0].height(), t[0].width()), (16, 16));
        Ok(())
    }

    #[test]
    fn archive_round_trip_restores_codebooks() -> Result<()> {
        let store = ParamStore::new(DType::F32, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vq = VqVae::new(tiny(), &store, &mut rng)?;
        let x = Tensor::rand(0f32, 1.0, (2, 3, 16, 16), &Device::Cpu)?;
        let e = vq.encode(&x)?;
        vq.update_codebooks(&e)?;
        let frozen = VqVae::frozen(tiny(), vq.to_archive()?)?;
        let a = vq.structural_codebook().prototypes().flatten_all()?.to_vec1::<f32>()?;
        let b = frozen.structural_codebook().prototypes().flatten_all()?.to_vec1::<f32>()?;
        assert_eq!(a, b);
        assert!(frozen.store().trainable_vars().is_empty());
        Ok(())
    }
}
