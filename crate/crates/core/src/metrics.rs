//! PSNR, SSIM and sample diversity.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use crate::codec::LatentIndexGrid;
use crate::error::{contract, Result};
use crate::image::{ImageGrid, Mask};

pub const PSNR_CAP: f64 = 100.0;

fn check_pair(a: &ImageGrid, b: &ImageGrid) -> Result<()> {
    if !a.same_shape(b) {
        contract!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        );
    }
    Ok(())
}

/// `10·log10(1/MSE)` for `[0, 1]` images, capped at 100 dB.
pub fn psnr(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    check_pair(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_1d() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-window Gaussian filter of an `h×w` plane.
fn filter(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..k).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..k).map(|i| g[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Mean SSIM over channels and all valid 11×11 Gaussian windows (σ = 1.5).
pub fn ssim(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w, c) = (a.height(), a.width(), a.channels());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        contract!("SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}");
    }
    let g = gaussian_1d();
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let plane = |img: &ImageGrid| -> Vec<f64> {
            (0..h * w).map(|i| img.data()[i * c + ch] as f64).collect()
        };
        let (x, y) = (plane(a), plane(b));
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter(&x, h, w, &g);
        let my = filter(&y, h, w, &g);
        let sxx = filter(&prod(&x, &x), h, w, &g);
        let syy = filter(&prod(&y, &y), h, w, &g);
        let sxy = filter(&prod(&x, &y), h, w, &g);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + C1) * (2.0 * cov + C2))
                / ((ux * ux + uy * uy + C1) * (vx + vy + C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Distinct structural grids and mean hole-region L1 between consecutive images.
pub fn diversity(grids: &[LatentIndexGrid], images: &[ImageGrid], mask: &Mask) -> Result<(usize, f64)> {
    let distinct = grids.iter().collect::<HashSet<_>>().len();
    for img in images {
        if img.height() != mask.height() || img.width() != mask.width() {
            contract!("diversity images must match the mask size");
        }
    }
    let hole: Vec<usize> = (0..mask.height() * mask.width())
        .filter(|&i| mask.data()[i] == 1)
        .collect();
    if images.len() < 2 || hole.is_empty() {
        return Ok((distinct, 0.0));
    }
    let mut sum = 0.0;
    for pair in images.windows(2) {
        let (p, q) = (&pair[0], &pair[1]);
        check_pair(p, q)?;
        let c = p.channels();
        let mut d = 0.0;
        for &i in &hole {
            for ch in 0..c {
                d += (p.data()[i * c + ch] as f64 - q.data()[i * c + ch] as f64).abs();
            }
        }
        sum += d / (hole.len() * c) as f64;
    }
    Ok((distinct, sum / (images.len() - 1) as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEval {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub distinct: usize,
    pub mean_pairwise_l1: f64,
    pub samples: usize,
}

impl ImageEval {
    /// Metrics of `k` composites against their ground truth; PSNR and SSIM are sample means.
    pub fn measure(
        name: impl Into<String>,
        ground_truth: &ImageGrid,
        mask: &Mask,
        grids: &[LatentIndexGrid],
        composites: &[ImageGrid],
    ) -> Result<Self> {
        if composites.is_empty() {
            contract!("evaluation needs at least one sample");
        }
        let k = composites.len() as f64;
        let mut p = 0.0;
        let mut s = 0.0;
        for c in composites {
            p += psnr(c, ground_truth)?;
            s += ssim(c, ground_truth)?;
        }
        let (distinct, l1) = diversity(grids, composites, mask)?;
        Ok(Self {
            name: name.into(),
            psnr: p / k,
            ssim: s / k,
            distinct,
            mean_pairwise_l1: l1,
            samples: composites.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub images: Vec<ImageEval>,
}

impl EvalReport {
    fn mean(&self, f: impl Fn(&ImageEval) -> f64) -> f64 {
        if self.images.is_empty() {
            return 0.0;
        }
        self.images.iter().map(f).sum::<f64>() / self.images.len() as f64
    }

    pub fn mean_psnr(&self) -> f64 {
        self.mean(|e| e.psnr)
    }

    pub fn mean_ssim(&self) -> f64 {
        self.mean(|e| e.ssim)
    }

    pub fn mean_distinct(&self) -> f64 {
        self.mean(|e| e.distinct as f64)
    }

    pub fn mean_pairwise_l1(&self) -> f64 {
        self.mean(|e| e.mean_pairwise_l1)
    }

    /// Number of images per distinct-structure count.
    pub fn distinct_histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for e in &self.images {
            *h.entry(e.distinct).or_insert(0) += 1;
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,psnr,ssim,distinct_structures,mean_pairwise_l1,samples\n");
        for e in &self.images {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{},{:.6},{}",
                e.name, e.psnr, e.ssim, e.distinct, e.mean_pairwise_l1, e.samples
            );
        }
        let samples: usize = self.images.iter().map(|e| e.samples).sum();
        let _ = writeln!(
            s,
            "mean,{:.6},{:.6},{:.6},{:.6},{}",
            self.mean_psnr(),
            self.mean_ssim(),
            self.mean_distinct(),
            self.mean_pairwise_l1(),
            samples
        );
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "images evaluated: {}", self.images.len());
        let _ = writeln!(s, "mean PSNR: {:.3} dB", self.mean_psnr());
        let _ = writeln!(s, "mean SSIM: {:.4}", self.mean_ssim());
        let _ = writeln!(s, "mean distinct structures: {:.3}", self.mean_distinct());
        let _ = writeln!(s, "mean pairwise hole L1: {:.5}", self.mean_pairwise_l1());
        let _ = writeln!(s, "distinct structure histogram:");
        for (k, n) in self.distinct_histogram() {
            let _ = writeln!(s, "  {k:>3}: {n:>4} {}", "#".repeat(n.min(60)));
        }
        let _ = writeln!(
            s,
            "IS, MIS and FID are not computed: they need pretrained classifiers."
        );
        let _ = writeln!(
            s,
            "The hole L1 diversity is a pixel-space proxy and is not comparable to LPIPS figures."
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize, c: usize) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageGrid::new(h, w, c, (0..h * w * c).map(|_| rng.random()).collect()).unwrap()
    }

    fn offset(img: &ImageGrid, d: f32) -> ImageGrid {
        ImageGrid::new(img.height(), img.width(), img.channels(), img.data().iter().map(|v| v + d).collect()).unwrap()
    }

    /// Direct per-window SSIM with explicit 2-D Gaussian weights.
    fn ssim_oracle(a: &ImageGrid, b: &ImageGrid) -> f64 {
        let g = gaussian_1d();
        let (h, w, c) = (a.height(), a.width(), a.channels());
        let mut total = 0.0;
        let mut n = 0;
        for ch in 0..c {
            for y in 0..=h - 11 {
                for x in 0..=w - 11 {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wt = g[i] * g[j];
                            let p = a.get(y + i, x + j, ch) as f64;
                            let q = b.get(y + i, x + j, ch) as f64;
                            mx += wt * p;
                            my += wt * q;
                            sxx += wt * p * p;
                            syy += wt * q * q;
                            sxy += wt * p * q;
                        }
                    }
                    let (vx, vy, cv) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                    total += ((2.0 * mx * my + C1) * (2.0 * cv + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
                    n += 1;
                }
            }
        }
        total / n as f64
    }

    #[test]
    fn psnr_examples() -> Result<()> {
        let a = ImageGrid::filled(8, 8, 3, 0.3);
        assert_eq!(psnr(&a, &a)?, 100.0);
        let b = offset(&a, 0.1);
        assert!((psnr(&a, &b)? - 20.0).abs() < 0.01);
        let r = random_image(1, 8, 8, 3);
        assert_eq!(psnr(&a, &r)?, psnr(&r, &a)?);
        assert!(psnr(&a, &ImageGrid::filled(4, 4, 3, 0.0)).is_err());
        Ok(())
    }

    #[test]
    fn psnr_decreases_with_noise() -> Result<()> {
        let a = ImageGrid::filled(8, 8, 1, 0.5);
        let mut last = f64::INFINITY;
        for amp in [0.01f32, 0.02, 0.05, 0.1, 0.2] {
            let p = psnr(&a, &offset(&a, amp))?;
            assert!(p < last);
            last = p;
        }
        Ok(())
    }

    #[test]
    fn ssim_examples() -> Result<()> {
        let a = random_image(2, 16, 16, 3);
        assert!((ssim(&a, &a)? - 1.0).abs() < 1e-12);
        let neg = ImageGrid::new(16, 16, 3, a.data().iter().map(|v| 1.0 - v).collect())?;
        assert!(ssim(&a, &neg)? < 1.0);
        let b = random_image(3, 16, 16, 3);
        assert!((ssim(&a, &b)? - ssim_oracle(&a, &b)).abs() < 1e-6);
        Ok(())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn ssim_self_is_one(seed in any::<u64>()) {
            let a = random_image(seed, 12, 13, 1);
            prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn diversity_examples() -> Result<()> {
        let g = LatentIndexGrid::new(2, 2, vec![0, 1, 2, 3], 4)?;
        let img = random_image(4, 4, 4, 3);
        let mut mask = Mask::empty(4, 4);
        mask.set_missing(1, 1);
        assert_eq!(diversity(&[g.clone(), g.clone(), g.clone()], &[img.clone(), img.clone(), img.clone()], &mask)?, (1, 0.0));
        let h = LatentIndexGrid::new(2, 2, vec![0, 1, 2, 0], 4)?;
        assert_eq!(diversity(&[g.clone(), h.clone()], &[], &mask)?.0, 2);
        assert_eq!(diversity(&[h.clone(), g.clone(), h], &[], &mask)?.0, 2);
        let other = offset(&img, 0.25);
        let (_, l1) = diversity(&[], &[img, other], &mask)?;
        assert!((l1 - 0.25).abs() < 1e-6);
        Ok(())
    }

    #[test]
    fn report_aggregates_and_csv() -> Result<()> {
        let gt = random_image(5, 16, 16, 3);
        let mask = crate::data::make_center_mask(16, 16);
        let g = LatentIndexGrid::zeros(2, 2);
        let e = ImageEval::measure("a", &gt, &mask, &[g], &[gt.clone()])?;
        assert_eq!((e.psnr, e.distinct, e.mean_pairwise_l1), (100.0, 1, 0.0));
        let r = EvalReport { images: vec![e.clone(), ImageEval { psnr: 50.0, ..e }] };
        assert_eq!(r.mean_psnr(), 75.0);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().last().unwrap().starts_with("mean,75.000000"));
        assert!(r.summary().contains("  1:    2 ##"));
        Ok(())
    }
}
