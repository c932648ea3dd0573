//! Parameter storage, layers and optimizers shared by the three networks.
//!
//! Initialization draws from an explicit ChaCha stream so that two runs with
//! the same seed build bit-identical networks; nothing here touches the
//! process-global RNG.

use std::sync::{Arc, Mutex};

use candle_core::{backprop::GradStore, DType, Device, Tensor, Var};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::archive::Archive;
use crate::error::{contract, Error, Result};
use crate::ops::{self, Window};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// U(-bound, bound)
    Uniform(f64),
    /// N(0, std²)
    Normal(f64),
}

impl Init {
    /// PyTorch's default for convolution and linear weights.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in as f64).sqrt())
    }

    fn sample(self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
            Init::Normal(std) => (0..n).map(|_| std * standard_normal(rng)).collect(),
        }
    }
}

/// Box–Muller draw from N(0, 1).
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

struct Entry {
    var: Var,
    trainable: bool,
}

struct Inner {
    entries: IndexMap<String, Entry>,
    rng: ChaCha8Rng,
    source: Option<Archive>,
    frozen: bool,
}

/// Hierarchical, named parameter store.
///
/// A store is either *trainable* (parameters are [`Var`]s and receive
/// gradients) or *frozen* (parameters are loaded from an archive and handed out
/// as plain tensors, so backward passes never produce gradients for them).
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    prefix: String,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    /// Fresh trainable store; parameters are initialized on first request.
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self::build(dtype, seed, None, false)
    }

    /// Trainable store whose parameters come from `archive` (missing names are an error).
    pub fn from_archive(archive: Archive, dtype: DType) -> Self {
        Self::build(dtype, 0, Some(archive), false)
    }

    /// Read-only store whose parameters come from `archive`.
    pub fn frozen(archive: Archive, dtype: DType) -> Self {
        Self::build(dtype, 0, Some(archive), true)
    }

    fn build(dtype: DType, seed: u64, source: Option<Archive>, frozen: bool) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                entries: IndexMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
                source,
                frozen,
            })),
            prefix: String::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let name = name.as_ref();
        Self {
            inner: self.inner.clone(),
            prefix: if self.prefix.is_empty() {
                name.to_string()
            } else {
                format!("{}/{name}", self.prefix)
            },
            dtype: self.dtype,
            device: self.device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn is_frozen(&self) -> bool {
        self.inner.lock().unwrap().frozen
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}/{name}", self.prefix)
        }
    }

    fn entry(&self, name: &str, shape: &[usize], init: Init, trainable: bool) -> Result<Var> {
        let full = self.full_name(name);
        let mut inner = self.inner.lock().unwrap();
        if let Some(e) = inner.entries.get(&full) {
            if e.var.dims() != shape {
                contract!("parameter {full} requested with shape {shape:?}, has {:?}", e.var.dims());
            }
            return Ok(e.var.clone());
        }
        let tensor = match &inner.source {
            Some(archive) => {
                let t = archive.tensor(&full, self.dtype, &self.device)?;
                if t.dims() != shape {
                    return Err(Error::Archive(format!(
                        "array {full} has shape {:?}, expected {shape:?}",
                        t.dims()
                    )));
                }
                t
            }
            None => {
                let n = shape.iter().product();
                let values = init.sample(n, &mut inner.rng);
                Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?
            }
        };
        let var = Var::from_tensor(&tensor)?;
        let trainable = trainable && !inner.frozen;
        inner.entries.insert(
            full,
            Entry {
                var: var.clone(),
                trainable,
            },
        );
        Ok(var)
    }

    /// A learnable parameter. Frozen stores return a detached tensor.
    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let var = self.entry(name, shape, init, true)?;
        Ok(if self.is_frozen() {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        })
    }

    /// Non-learnable state that is still saved (codebook accumulators, power-iteration vectors).
    pub fn buffer(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.entry(name, shape, init, false)
    }

    /// Learnable variables in creation order.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().unwrap();
        inner
            .entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, e)| (k.clone(), e.var.clone()))
            .collect()
    }

    /// Every entry (parameters and buffers) as an archive.
    pub fn to_archive(&self) -> Result<Archive> {
        let inner = self.inner.lock().unwrap();
        let mut a = Archive::new();
        for (k, e) in &inner.entries {
            a.insert_tensor(k.clone(), e.var.as_tensor())?;
        }
        Ok(a)
    }

    /// Overwrites every entry in place from `archive`.
    pub fn load(&self, archive: &Archive) -> Result<()> {
        let inner = self.inner.lock().unwrap();
        for (k, e) in &inner.entries {
            let t = archive.tensor(k, self.dtype, &self.device)?;
            if t.dims() != e.var.dims() {
                return Err(Error::Archive(format!("array {k} has the wrong shape")));
            }
            e.var.set(&t)?;
        }
        Ok(())
    }
}

/// Convolution layer, optionally with a fixed multiplicative kernel mask.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    mask: Option<Tensor>,
    win: Window,
}

impl Conv2d {
    pub fn new(
        p: &ParamStore,
        in_channels: usize,
        out_channels: usize,
        win: Window,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_channels * win.kernel_h * win.kernel_w;
        let weight = p.param(
            "weight",
            &[out_channels, in_channels, win.kernel_h, win.kernel_w],
            Init::fan_in(fan_in),
        )?;
        let bias = if bias {
            Some(p.param("bias", &[out_channels], Init::fan_in(fan_in))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            mask: None,
            win,
        })
    }

    /// Convolution with an explicit weight initializer and a zero bias.
    pub fn with_init(
        p: &ParamStore,
        in_channels: usize,
        out_channels: usize,
        win: Window,
        init: Init,
    ) -> Result<Self> {
        let weight = p.param(
            "weight",
            &[out_channels, in_channels, win.kernel_h, win.kernel_w],
            init,
        )?;
        let bias = Some(p.param("bias", &[out_channels], Init::Zeros)?);
        Ok(Self {
            weight,
            bias,
            mask: None,
            win,
        })
    }

    /// Multiplies the kernel by a `(kh, kw)` 0/1 mask on every forward pass.
    pub fn with_mask(mut self, mask: &[f64]) -> Result<Self> {
        let (kh, kw) = (self.win.kernel_h, self.win.kernel_w);
        if mask.len() != kh * kw {
            contract!("kernel mask has {} entries, expected {}", mask.len(), kh * kw);
        }
        let m = Tensor::from_slice(mask, (1, 1, kh, kw), self.weight.device())?
            .to_dtype(self.weight.dtype())?;
        self.mask = Some(m);
        Ok(self)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = match &self.mask {
            Some(m) => self.weight.broadcast_mul(m)?,
            None => self.weight.clone(),
        };
        ops::conv2d(x, &w, self.bias.as_ref(), self.win)
    }
}

/// Gated convolution: `elu(features) * sigmoid(gate)` over a split output.
#[derive(Debug, Clone)]
pub struct GatedConv2d {
    conv: Conv2d,
}

impl GatedConv2d {
    pub fn new(p: &ParamStore, in_channels: usize, out_channels: usize, win: Window) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(p, in_channels, 2 * out_channels, win, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv.forward(x)?;
        let half = self.conv.out_channels() / 2;
        let feat = y.narrow(1, 0, half)?.elu(1.0)?;
        let gate = ops::sigmoid(&y.narrow(1, half, half)?)?;
        Ok((feat * gate)?)
    }
}

/// Dense layer over the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(p: &ParamStore, in_features: usize, out_features: usize) -> Result<Self> {
        Ok(Self {
            weight: p.param("weight", &[out_features, in_features], Init::fan_in(in_features))?,
            bias: p.param("bias", &[out_features], Init::fan_in(in_features))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Convolution whose kernel is divided by its largest singular value,
/// estimated with one power-iteration step per training forward pass.
pub struct SpectralConv2d {
    weight: Tensor,
    bias: Tensor,
    u: Var,
    win: Window,
}

impl SpectralConv2d {
    pub fn new(p: &ParamStore, in_channels: usize, out_channels: usize, win: Window) -> Result<Self> {
        let fan_in = in_channels * win.kernel_h * win.kernel_w;
        let weight = p.param(
            "weight",
            &[out_channels, in_channels, win.kernel_h, win.kernel_w],
            Init::fan_in(fan_in),
        )?;
        let bias = p.param("bias", &[out_channels], Init::Zeros)?;
        let u = p.buffer("u", &[out_channels], Init::Normal(1.0))?;
        Ok(Self { weight, bias, u, win })
    }

    /// `update` advances the power iteration (training); inference reuses the stored vector.
    pub fn forward(&self, x: &Tensor, update: bool) -> Result<Tensor> {
        let co = self.weight.dims()[0];
        let w = self.weight.reshape((co, ()))?;
        let wd = w.detach();
        let normalize = |t: Tensor| -> Result<Tensor> {
            let n = t.sqr()?.sum_all()?.sqrt()?.affine(1.0, 1e-12)?;
            Ok(t.broadcast_div(&n)?)
        };
        let mut u = normalize(self.u.as_tensor().detach())?;
        let v = normalize(u.unsqueeze(0)?.matmul(&wd)?.squeeze(0)?)?;
        if update {
            u = normalize(wd.matmul(&v.unsqueeze(1)?)?.squeeze(1)?)?;
            self.u.set(&u)?;
        }
        let sigma = u
            .unsqueeze(0)?
            .matmul(&w.matmul(&v.unsqueeze(1)?)?)?
            .reshape(())?;
        let w_sn = self.weight.broadcast_div(&sigma)?;
        ops::conv2d(x, &w_sn, Some(&self.bias), self.win)
    }
}

/// Inverted dropout with an explicit random stream.
pub fn dropout(x: &Tensor, p: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if p <= 0.0 {
        return Ok(x.clone());
    }
    if p >= 1.0 {
        contract!("dropout probability must be below 1, got {p}");
    }
    let scale = 1.0 / (1.0 - p);
    let mask: Vec<f32> = (0..x.elem_count())
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale as f32 })
        .collect();
    let mask = Tensor::from_vec(mask, x.dims(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with externally supplied learning rate and serializable state.
pub struct Adam {
    config: AdamConfig,
    vars: Vec<(String, Var)>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, config: AdamConfig) -> Result<Self> {
        let first = vars
            .iter()
            .map(|(_, v)| v.zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let second = first.clone();
        Ok(Self {
            config,
            vars,
            first,
            second,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m = ((&self.first[i] * beta1)? + (g * (1.0 - beta1))?)?;
            let v = ((&self.second[i] * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let delta = (m_hat / (v_hat.sqrt()? + eps)?)?;
            var.set(&(var.as_tensor() - (delta * lr)?)?)?;
            self.first[i] = m;
            self.second[i] = v;
        }
        Ok(())
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        for (i, (name, _)) in self.vars.iter().enumerate() {
            a.insert_tensor(format!("m/{name}"), &self.first[i])?;
            a.insert_tensor(format!("v/{name}"), &self.second[i])?;
        }
        Ok(a)
    }

    pub fn load(&mut self, archive: &Archive, step: u64) -> Result<()> {
        for (i, (name, var)) in self.vars.iter().enumerate() {
            self.first[i] = archive.tensor(&format!("m/{name}"), var.dtype(), var.device())?;
            self.second[i] = archive.tensor(&format!("v/{name}"), var.dtype(), var.device())?;
        }
        self.step = step;
        Ok(())
    }
}

/// One Polyak averaging step: `decay·shadow + (1−decay)·live`.
pub fn polyak_update(shadow: &Tensor, live: &Tensor, decay: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&decay) {
        contract!("polyak decay must lie in [0, 1], got {decay}");
    }
    if shadow.dims() != live.dims() {
        contract!("shadow {:?} and live {:?} differ in shape", shadow.dims(), live.dims());
    }
    Ok(((shadow * decay)? + (live.detach() * (1.0 - decay))?)?)
}

/// Exponential moving average of a set of variables.
pub struct PolyakShadow {
    decay: f64,
    names: Vec<String>,
    shadow: Vec<Tensor>,
}

impl PolyakShadow {
    pub fn new(vars: &[(String, Var)], decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            contract!("polyak decay must lie in (0, 1), got {decay}");
        }
        Ok(Self {
            decay,
            names: vars.iter().map(|(n, _)| n.clone()).collect(),
            shadow: vars
                .iter()
                .map(|(_, v)| v.as_tensor().copy())
                .collect::<candle_core::Result<_>>()?,
        })
    }

    pub fn update(&mut self, vars: &[(String, Var)]) -> Result<()> {
        for (s, (_, v)) in self.shadow.iter_mut().zip(vars) {
            *s = polyak_update(s, v.as_tensor(), self.decay)?;
        }
        Ok(())
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        for (n, t) in self.names.iter().zip(&self.shadow) {
            a.insert_tensor(n.clone(), t)?;
        }
        Ok(a)
    }

    pub fn load(&mut self, archive: &Archive) -> Result<()> {
        for (n, s) in self.names.iter().zip(self.shadow.iter_mut()) {
            *s = archive.tensor(n, s.dtype(), s.device())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seed_deterministic() -> Result<()> {
        let a = ParamStore::new(DType::F32, 7);
        let b = ParamStore::new(DType::F32, 7);
        let c = ParamStore::new(DType::F32, 8);
        let wa = a.pp("l").param("w", &[3, 4], Init::Normal(1.0))?;
        let wb = b.pp("l").param("w", &[3, 4], Init::Normal(1.0))?;
        let wc = c.pp("l").param("w", &[3, 4], Init::Normal(1.0))?;
        assert_eq!(wa.to_vec2::<f32>()?, wb.to_vec2::<f32>()?);
        assert_ne!(wa.to_vec2::<f32>()?, wc.to_vec2::<f32>()?);
        Ok(())
    }

    #[test]
    fn frozen_store_produces_no_gradients() -> Result<()> {
        let live = ParamStore::new(DType::F32, 1);
        let lin = Linear::new(&live.pp("lin"), 3, 2)?;
        let frozen = ParamStore::frozen(live.to_archive()?, DType::F32);
        let flin = Linear::new(&frozen.pp("lin"), 3, 2)?;
        let x = Var::randn(0f32, 1.0, (4, 3), &Device::Cpu)?;
        let g = flin.forward(&x)?.sum_all()?.backward()?;
        assert!(g.get(&x).is_some());
        for (_, v) in live.trainable_vars() {
            assert!(g.get(v.as_tensor()).is_none());
        }
        assert!(frozen.trainable_vars().is_empty());
        let y0 = lin.forward(&x)?.to_vec2::<f32>()?;
        let y1 = flin.forward(&x)?.to_vec2::<f32>()?;
        assert_eq!(y0, y1);
        Ok(())
    }

    #[test]
    fn adam_first_step_moves_by_lr() -> Result<()> {
        let p = ParamStore::new(DType::F64, 3);
        let w = p.param("w", &[3], Init::Zeros)?;
        let mut opt = Adam::new(p.trainable_vars(), AdamConfig::default())?;
        let target = Tensor::new(&[1.0f64, -2.0, 3.0], &Device::Cpu)?;
        let g = (&w - &target)?.sqr()?.sum_all()?.backward()?;
        opt.step(&g, 0.1)?;
        let v = w.to_vec1::<f64>()?;
        // First Adam step is lr * sign(g) up to eps.
        for (got, want) in v.iter().zip([0.1, -0.1, 0.1]) {
            assert!((got - want).abs() < 1e-6);
        }
        Ok(())
    }

    #[test]
    fn polyak_limits_and_recurrence() -> Result<()> {
        let dev = Device::Cpu;
        let s = Tensor::new(&[1.0f64, 2.0], &dev)?;
        let l = Tensor::new(&[5.0f64, -1.0], &dev)?;
        assert_eq!(polyak_update(&s, &l, 0.0)?.to_vec1::<f64>()?, vec![5.0, -1.0]);
        assert_eq!(polyak_update(&s, &l, 1.0)?.to_vec1::<f64>()?, vec![1.0, 2.0]);
        let lives = [[0.5, 0.25], [-3.0, 1.5], [2.0, 2.0]];
        let d = 0.9997;
        let mut t = s.clone();
        let mut oracle = [1.0f64, 2.0];
        for live in lives {
            t = polyak_update(&t, &Tensor::new(&live, &dev)?, d)?;
            for i in 0..2 {
                oracle[i] = d * oracle[i] + (1.0 - d) * live[i];
            }
        }
        for (a, b) in t.to_vec1::<f64>()?.iter().zip(oracle) {
            assert!((a - b).abs() < 1e-10);
        }
        Ok(())
    }

    #[test]
    fn spectral_norm_bounds_operator_norm() -> Result<()> {
        let p = ParamStore::new(DType::F64, 11);
        let conv = SpectralConv2d::new(&p.pp("sn"), 2, 3, Window::square(1, 1, 0, 1))?;
        let x = Tensor::randn(0f64, 1.0, (1, 2, 1, 1), &Device::Cpu)?;
        for _ in 0..50 {
            conv.forward(&x, true)?;
        }
        // After convergence the normalized 1x1 kernel has spectral norm ~1.
        let w = conv.weight.reshape((3, 2))?;
        let u = conv.u.as_tensor().clone();
        let un = (&u / u.sqr()?.sum_all()?.sqrt()?.to_scalar::<f64>()?)?;
        let wt_u = w.t()?.matmul(&un.unsqueeze(1)?)?;
        let sigma = wt_u.sqr()?.sum_all()?.sqrt()?.to_scalar::<f64>()?;
        let y = conv.forward(&x, false)?;
        let b = conv.bias.to_vec1::<f64>()?;
        let y: Vec<f64> = y.flatten_all()?.to_vec1::<f64>()?;
        let yn: f64 = y.iter().zip(&b).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let xn = x.sqr()?.sum_all()?.sqrt()?.to_scalar::<f64>()?;
        assert!(yn <= xn * (1.0 + 1e-6), "{yn} > {xn} (sigma {sigma})");
        Ok(())
    }
}
