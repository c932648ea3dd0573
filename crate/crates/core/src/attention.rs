//! Structural attention: scores computed between 3×3 patches of the
//! structural latent grid, then used to rebuild finer feature maps as weighted
//! sums of their own patches.

use candle_core::{Device, Tensor};

use crate::error::{contract, Result};
use crate::ops::{self, Window};

/// Default floor for the standard deviation in the truncated similarity.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// `p×p×C` patches around every cell of a grid, in raster order, zero padded.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    patch: usize,
    channels: usize,
    /// One row of `C·p·p` values per patch.
    rows: Vec<Vec<f64>>,
}

impl PatchSet {
    /// Extracts patches with stride 1 from a channel-major `(C, h, w)` buffer.
    pub fn extract(grid: &[f64], channels: usize, height: usize, width: usize, patch: usize) -> Result<Self> {
        if grid.len() != channels * height * width {
            contract!("grid buffer has {} values, expected {}", grid.len(), channels * height * width);
        }
        if patch % 2 == 0 {
            contract!("patch size must be odd, got {patch}");
        }
        let r = (patch / 2) as isize;
        let mut rows = Vec::with_capacity(height * width);
        for y in 0..height as isize {
            for x in 0..width as isize {
                let mut row = Vec::with_capacity(channels * patch * patch);
                for c in 0..channels {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (yy, xx) = (y + dy, x + dx);
                            let inside = yy >= 0 && xx >= 0 && yy < height as isize && xx < width as isize;
                            row.push(if inside {
                                grid[(c * height + yy as usize) * width + xx as usize]
                            } else {
                                0.0
                            });
                        }
                    }
                }
                rows.push(row);
            }
        }
        Ok(Self {
            patch,
            channels,
            rows,
        })
    }

    /// Patches of every item of a `(B, C, h, w)` tensor.
    pub fn from_batch(t: &Tensor, patch: usize) -> Result<Vec<Self>> {
        let (b, c, h, w) = t.dims4()?;
        let v = ops::to_f64_vec(t)?;
        v.chunks(c * h * w)
            .take(b)
            .map(|item| Self::extract(item, c, h, w, patch))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn patch_size(&self) -> usize {
        self.patch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }
}

/// Pairwise truncated distance similarity `tanh(−(d − m)/σ)`, row-major `N×N`.
///
/// `m` and `σ` are the mean and population standard deviation of all `N²`
/// Euclidean distances; `σ` is floored at `sigma_floor`.
pub fn truncated_similarity(patches: &PatchSet, sigma_floor: f64) -> Result<Vec<f64>> {
    let n = patches.len();
    if n < 2 {
        contract!("truncated similarity needs at least two patches, got {n}");
    }
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let dist = patches.rows[i]
                .iter()
                .zip(&patches.rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            d[i * n + j] = dist;
            d[j * n + i] = dist;
        }
    }
    Ok(truncate(&d, sigma_floor))
}

/// `tanh(−(d − m)/σ)` over a whole set of distances.
pub fn truncate(distances: &[f64], sigma_floor: f64) -> Vec<f64> {
    let len = distances.len() as f64;
    let m = distances.iter().sum::<f64>() / len;
    let var = distances.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / len;
    let sigma = var.sqrt().max(sigma_floor);
    distances.iter().map(|d| (-(d - m) / sigma).tanh()).collect()
}

/// `N×N` attention weights; `get(source, target)`, each target column sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionScores {
    n: usize,
    data: Vec<f64>,
}

impl AttentionScores {
    pub fn from_matrix(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            contract!("attention matrix needs {} entries, got {}", n * n, data.len());
        }
        Ok(Self { n, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { n, data }
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            n,
            data: vec![1.0 / n as f64; n * n],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, source: usize, target: usize) -> f64 {
        self.data[source * self.n + target]
    }

    /// Row-major `(source, target)` values.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Softmax over sources of `λ1·d̃` for every target; every location takes part.
pub fn attention_scores(similarity: &[f64], n: usize, lambda1: f64) -> Result<AttentionScores> {
    if !(lambda1 > 0.0) {
        contract!("attention scale must be positive, got {lambda1}");
    }
    if similarity.len() != n * n {
        contract!("similarity matrix needs {} entries, got {}", n * n, similarity.len());
    }
    let mut data = vec![0.0; n * n];
    for t in 0..n {
        let m = (0..n)
            .map(|s| similarity[s * n + t])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for s in 0..n {
            let e = (lambda1 * (similarity[s * n + t] - m)).exp();
            data[s * n + t] = e;
            z += e;
        }
        for s in 0..n {
            data[s * n + t] /= z;
        }
    }
    Ok(AttentionScores { n, data })
}

/// Scores for every item of a `(B, D, g, g)` structural grid from 3×3 patches.
pub fn structural_attention(s_bar: &Tensor, lambda1: f64, sigma_floor: f64) -> Result<Vec<AttentionScores>> {
    PatchSet::from_batch(s_bar, 3)?
        .iter()
        .map(|p| attention_scores(&truncated_similarity(p, sigma_floor)?, p.len(), lambda1))
        .collect()
}

/// Geometry of one transfer level: a `ratio·g` map split into `patch×patch`
/// windows spaced `ratio` apart, one per attention cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransferLevel {
    pub ratio: usize,
    pub patch: usize,
}

impl TransferLevel {
    pub fn window(&self) -> Result<Window> {
        if self.patch < self.ratio || (self.patch - self.ratio) % 2 != 0 {
            contract!(
                "transfer patch {} cannot tile stride {} (needs patch ≥ stride with an even difference)",
                self.patch,
                self.ratio
            );
        }
        Ok(Window::square(self.patch, self.ratio, (self.patch - self.ratio) / 2, 1))
    }
}

/// Rebuilds `(B, C, r·g, r·g)` features so that each target patch is the
/// score-weighted sum of all source patches; overlaps are averaged.
pub fn attention_transfer(scores: &[AttentionScores], features: &Tensor, level: TransferLevel) -> Result<Tensor> {
    let (b, c, h, w) = features.dims4()?;
    if scores.len() != b {
        contract!("{} attention matrices for a batch of {b}", scores.len());
    }
    if h != w || h % level.ratio != 0 {
        contract!("feature map {h}x{w} is not a multiple {} of a square attention grid", level.ratio);
    }
    let g = h / level.ratio;
    let n = g * g;
    if scores.iter().any(|s| s.len() != n) {
        contract!("attention matrices must be {n}x{n} for a {g}x{g} grid");
    }
    let win = level.window()?;
    let cols = ops::im2col(features, win)?;
    let ck = cols.dims()[0];
    let cols = cols.reshape((ck, b, n))?.permute((1, 0, 2))?.contiguous()?;
    let mut s = Vec::with_capacity(b * n * n);
    for sc in scores {
        s.extend_from_slice(&sc.data);
    }
    let s = Tensor::from_vec(s, (b, n, n), &Device::Cpu)?.to_dtype(features.dtype())?;
    let mixed = cols
        .matmul(&s)?
        .permute((1, 0, 2))?
        .reshape((ck, b * n))?
        .contiguous()?;
    let summed = ops::col2im(&mixed, b, c, h, w, win)?;
    let ones = Tensor::ones((1, 1, h, w), features.dtype(), features.device())?;
    let count = ops::col2im(&ops::im2col(&ones, win)?, 1, 1, h, w, win)?;
    Ok(summed.broadcast_div(&count)?)
}
