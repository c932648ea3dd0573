//! Acceptance criteria, one verdict line each.
//!
//! The desk training milestones (criterion 8) are judged from the logs of a desk
//! run under `DSI_DESK_RUN` (default `<workspace>/runs/desk`, holding `vqvae/`,
//! `structure/` and `texture/`). Without such a run that line reports FAIL; the
//! strict version is the ignored `desk_training_milestones` test.

use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use dsinpaint::attention::{
    attention_scores, attention_transfer, structural_attention, truncated_similarity, AttentionScores, PatchSet,
    TransferLevel,
};
use dsinpaint::codec::{ema_update, nearest_code, quantize_straight_through, Codebook, VqVae};
use dsinpaint::config::{Preset, RunConfig};
use dsinpaint::data::{make_center_mask, synthesize_shape_image, Dataset, MaskSpec, Split};
use dsinpaint::image::ImageGrid;
use dsinpaint::losses::{feature_loss, hinge_d_loss, hinge_g_loss, l1_loss, total_texture_loss, TextureLossWeights};
use dsinpaint::metrics::{diversity, psnr, ssim};
use dsinpaint::nn::ParamStore;
use dsinpaint::pipeline::{Inpainter, SampleOptions};
use dsinpaint::structure::{entropy_from_logits, StructureNet};
use dsinpaint::training::{self, check_desk_milestones, Phase, TrainOptions, CHECKPOINT_ARCHIVE, MODEL_ARCHIVE};
use dsinpaint::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    dsinpaint::nn::standard_normal(rng)
}

fn tensor(values: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(values, shape, &Device::Cpu).unwrap()
}

fn vec_of(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_1_quantization() -> Result<Verdict> {
    let (n, k, d) = (100_000usize, 512usize, 64usize);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let protos: Vec<f64> = (0..k * d).map(|_| normal(&mut rng)).collect();
    let cells: Vec<f64> = (0..n * d).map(|_| normal(&mut rng)).collect();
    let cb = Codebook::from_prototypes(tensor(protos.clone(), &[k, d]))?;
    // (n, D, 1, 1): every vector is its own cell.
    let features = tensor(cells.clone(), &[n, d]).reshape((n, d, 1, 1))?;
    let start = Instant::now();
    let (idx, _) = nearest_code(&features, &cb)?;
    let elapsed = start.elapsed().as_secs_f64();
    let got = idx.flatten_all()?.to_vec1::<u32>()?;
    let mut agree = 0;
    for (i, &g) in got.iter().enumerate() {
        let x = &cells[i * d..(i + 1) * d];
        let mut best = (f64::INFINITY, 0u32);
        for j in 0..k {
            let e = &protos[j * d..(j + 1) * d];
            let dist: f64 = x.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best.0 {
                best = (dist, j as u32);
            }
        }
        agree += usize::from(best.1 == g);
    }
    Ok(verdict(
        agree == n && elapsed < 10.0,
        format!("{agree}/{n} indices match exhaustive argmin (K={k}, D={d}); quantization took {elapsed:.2} s"),
    ))
}

fn criterion_2_straight_through() -> Result<Verdict> {
    let (d, h, w) = (8usize, 4usize, 4usize);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cb = Codebook::from_prototypes(tensor((0..16 * d).map(|_| normal(&mut rng)).collect(), &[16, d]))?;
    let z0: Vec<f64> = (0..d * h * w).map(|_| normal(&mut rng)).collect();
    let weights: Vec<f64> = (0..d * h * w).map(|_| normal(&mut rng)).collect();
    let wt = tensor(weights.clone(), &[1, d, h, w]);
    // L(y) = Σ w·sin(y); through the estimator dL/dz must equal dL/dy at y = q.
    let loss = |y: &Tensor| -> Result<Tensor> { Ok((y.sin()? * &wt)?.sum_all()?) };
    let z = Var::from_tensor(&tensor(z0, &[1, d, h, w]))?;
    let st = quantize_straight_through(z.as_tensor(), &cb)?;
    let q = vec_of(&st);
    let grads = loss(&st)?.backward()?;
    let analytic = vec_of(grads.get(z.as_tensor()).expect("gradient reaches the features"));
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..q.len() {
        let mut plus = q.clone();
        let mut minus = q.clone();
        plus[i] += eps;
        minus[i] -= eps;
        let lp = loss(&tensor(plus, &[1, d, h, w]))?.to_scalar::<f64>()?;
        let lm = loss(&tensor(minus, &[1, d, h, w]))?.to_scalar::<f64>()?;
        let fd = (lp - lm) / (2.0 * eps);
        worst = worst.max((analytic[i] - fd).abs() / fd.abs().max(1e-8));
    }
    Ok(verdict(worst <= 1e-5, format!("max relative gradient error {worst:.2e} on a 4x4x{d} latent")))
}

fn criterion_3_ema() -> Result<Verdict> {
    // Recurrence oracle at the training decay.
    let (k, d, cells) = (6usize, 3usize, 10usize);
    let gamma = 0.99;
    let eps = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let protos: Vec<f64> = (0..k * d).map(|_| normal(&mut rng)).collect();
    let mut cb = Codebook::from_prototypes(tensor(protos.clone(), &[k, d]))?;
    let mut n_ref = vec![1.0f64; k];
    let mut m_ref = protos;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let x: Vec<f64> = (0..cells * d).map(|_| normal(&mut rng)).collect();
        let a: Vec<u32> = (0..cells).map(|_| rng.random_range(0..k as u32)).collect();
        let features = tensor(x.clone(), &[cells, d]).reshape((cells, d, 1, 1))?;
        let assign = Tensor::from_vec(a.clone(), (cells, 1, 1), &Device::Cpu)?;
        cb = ema_update(&cb, &features, &assign, gamma, eps)?;
        for i in 0..k {
            let members: Vec<usize> = (0..cells).filter(|&c| a[c] as usize == i).collect();
            n_ref[i] = gamma * n_ref[i] + (1.0 - gamma) * members.len() as f64;
            for j in 0..d {
                let s: f64 = members.iter().map(|&c| x[c * d + j]).sum();
                m_ref[i * d + j] = gamma * m_ref[i * d + j] + (1.0 - gamma) * s;
            }
        }
        let e_ref: Vec<f64> = (0..k * d).map(|i| m_ref[i] / n_ref[i / d].max(eps)).collect();
        worst = worst.max(max_abs_diff(&vec_of(cb.prototypes()), &e_ref));
        worst = worst.max(max_abs_diff(&vec_of(cb.ema_counts()), &n_ref));
    }

    // Conservation with a dyadic decay and integer counts, where every step is exactly representable.
    let mut cb = Codebook::from_prototypes(tensor(vec![0.0; 4 * 2], &[4, 2]))?;
    let mut exact = true;
    for _ in 0..40 {
        let before: f64 = vec_of(cb.ema_counts()).iter().sum();
        let a: Vec<u32> = (0..8).map(|_| rng.random_range(0..4u32)).collect();
        let features = tensor((0..16).map(|_| rng.random_range(-4..4) as f64).collect(), &[8, 2]).reshape((8, 2, 1, 1))?;
        cb = ema_update(&cb, &features, &Tensor::from_vec(a, (8, 1, 1), &Device::Cpu)?, 0.5, eps)?;
        let after: f64 = vec_of(cb.ema_counts()).iter().sum();
        exact &= after == 0.5 * before + 0.5 * 8.0;
    }
    Ok(verdict(
        worst <= 1e-10 && exact,
        format!("max deviation from the unrolled recurrence over 50 steps {worst:.2e}; count conservation exact over 40 steps: {exact}"),
    ))
}

fn criterion_4_causality() -> Result<Verdict> {
    let cfg = RunConfig::preset(Preset::Desk);
    let k = cfg.codec.codebook_size;
    let store = ParamStore::new(DType::F32, 4);
    let net = StructureNet::new(cfg.structure.clone(), k, 64, &store)?;
    let g = net.grid_size();
    let image = synthesize_shape_image(64, 4);
    let cond = net.condition_from_grids(&[image.clone(), image], &[make_center_mask(64, 64), make_center_mask(64, 64)])?;
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let base: Vec<u32> = (0..g * g).map(|_| rng.random_range(0..k as u32)).collect();
        let pos = rng.random_range(0..g * g);
        let mut changed = base.clone();
        changed[pos] = (base[pos] + rng.random_range(1..k as u32)) % k as u32;
        let both: Vec<u32> = base.iter().chain(&changed).copied().collect();
        let t = Tensor::from_vec(both, (2, g, g), &Device::Cpu)?;
        let logits = vec_of(&net.forward_logits(&t, &cond, None)?);
        let per_item = k * g * g;
        for c in 0..k {
            for cell in 0..=pos {
                let i = c * g * g + cell;
                worst = worst.max((logits[i] - logits[per_item + i]).abs());
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    Ok(verdict(
        worst <= 1e-6 && elapsed < 60.0,
        format!("max logit drift at or before the perturbed cell {worst:.2e} over 50 probes ({elapsed:.1} s)"),
    ))
}

/// Brute-force truncated similarity and softmax over a patch set.
fn attention_oracle(patches: &[Vec<f64>], lambda1: f64) -> Vec<f64> {
    let n = patches.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            dist[i * n + j] = patches[i].iter().zip(&patches[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        }
    }
    let m = dist.iter().sum::<f64>() / (n * n) as f64;
    let sd = (dist.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n * n) as f64).sqrt().max(1e-6);
    let sim: Vec<f64> = dist.iter().map(|v| (-(v - m) / sd).tanh()).collect();
    let mut scores = vec![0.0; n * n];
    for j in 0..n {
        let z: f64 = (0..n).map(|i| (lambda1 * sim[i * n + j]).exp()).sum();
        for i in 0..n {
            scores[i * n + j] = (lambda1 * sim[i * n + j]).exp() / z;
        }
    }
    scores
}

/// 3x3 zero-padded patches of a `(C, g, g)` grid in raster order.
fn grid_patches(grid: &[f64], c: usize, g: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for y in 0..g as isize {
        for x in 0..g as isize {
            let mut p = Vec::new();
            for ch in 0..c {
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let (yy, xx) = (y + dy, x + dx);
                        let inside = yy >= 0 && xx >= 0 && yy < g as isize && xx < g as isize;
                        p.push(if inside { grid[ch * g * g + yy as usize * g + xx as usize] } else { 0.0 });
                    }
                }
            }
            out.push(p);
        }
    }
    out
}

/// Overlap-averaged patch transfer computed pixel by pixel.
fn transfer_oracle(scores: &[f64], feat: &[f64], c: usize, g: usize, ratio: usize, patch: usize) -> Vec<f64> {
    let size = g * ratio;
    let pad = (patch - ratio) / 2;
    let n = g * g;
    let at = |ch: usize, y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= size as isize || x >= size as isize {
            0.0
        } else {
            feat[ch * size * size + y as usize * size + x as usize]
        }
    };
    let origin = |w: usize| ((w / g * ratio) as isize - pad as isize, (w % g * ratio) as isize - pad as isize);
    let mut out = vec![0.0; c * size * size];
    let mut count = vec![0.0; size * size];
    for j in 0..n {
        let (jy, jx) = origin(j);
        for u in 0..patch as isize {
            for v in 0..patch as isize {
                let (y, x) = (jy + u, jx + v);
                if y < 0 || x < 0 || y >= size as isize || x >= size as isize {
                    continue;
                }
                count[y as usize * size + x as usize] += 1.0;
                for ch in 0..c {
                    let mut acc = 0.0;
                    for i in 0..n {
                        let (iy, ix) = origin(i);
                        acc += scores[i * n + j] * at(ch, iy + u, ix + v);
                    }
                    out[ch * size * size + y as usize * size + x as usize] += acc;
                }
            }
        }
    }
    for ch in 0..c {
        for p in 0..size * size {
            out[ch * size * size + p] /= count[p];
        }
    }
    out
}

fn criterion_5_attention() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (c, g, lambda1) = (3usize, 4usize, 50.0);
    let grid: Vec<f64> = (0..c * g * g).map(|_| normal(&mut rng)).collect();
    let scores = &structural_attention(&tensor(grid.clone(), &[1, c, g, g]), lambda1, 1e-6)?[0];
    let n = g * g;
    let col_err = (0..n)
        .map(|j| ((0..n).map(|i| scores.get(i, j)).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);

    let oracle = attention_oracle(&grid_patches(&grid, c, g), lambda1);
    let score_err = max_abs_diff(scores.as_slice(), &oracle);

    let mut transfer_err: f64 = 0.0;
    let mut identity_err: f64 = 0.0;
    for level in [TransferLevel { ratio: 2, patch: 6 }, TransferLevel { ratio: 4, patch: 12 }] {
        let size = g * level.ratio;
        let feat: Vec<f64> = (0..2 * size * size).map(|_| normal(&mut rng)).collect();
        let ft = tensor(feat.clone(), &[1, 2, size, size]);
        let got = vec_of(&attention_transfer(std::slice::from_ref(scores), &ft, level)?);
        transfer_err = transfer_err.max(max_abs_diff(&got, &transfer_oracle(&oracle, &feat, 2, g, level.ratio, level.patch)));
        let same = vec_of(&attention_transfer(&[AttentionScores::identity(n)], &ft, level)?);
        identity_err = identity_err.max(max_abs_diff(&same, &feat));
    }

    // Two patches: distances {0, d, d, 0} have mean d/2 and deviation d/2.
    let two = PatchSet::extract(&[0.0, 1.0], 1, 1, 2, 1)?;
    let sim = truncated_similarity(&two, 1e-6)?;
    let t1 = 1f64.tanh();
    let two_err = max_abs_diff(&sim, &[t1, -t1, -t1, t1]);
    let softmax = attention_scores(&sim, 2, 1.0)?;
    let soft_err = (softmax.get(0, 0) - (t1.exp() / (t1.exp() + (-t1).exp()))).abs();

    let passed = col_err <= 1e-5 && identity_err <= 1e-6 && score_err <= 1e-5 && transfer_err <= 1e-5 && two_err <= 1e-12 && soft_err <= 1e-12;
    Ok(verdict(
        passed,
        format!(
            "column sums {col_err:.1e}; identity transfer {identity_err:.1e}; scores vs oracle {score_err:.1e}; \
             transfer vs oracle {transfer_err:.1e}; two-patch similarity ({:.5}, {:.5}) error {two_err:.1e}",
            sim[0], sim[1]
        ),
    ))
}

fn criterion_6_losses() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    let a: Vec<f64> = (0..48).map(|_| rng.random::<f64>()).collect();
    let b: Vec<f64> = (0..48).map(|_| rng.random::<f64>()).collect();
    let l1 = l1_loss(&tensor(a.clone(), &[1, 3, 4, 4]), &tensor(b.clone(), &[1, 3, 4, 4]))?.to_scalar::<f64>()?;
    let l1_ref = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 48.0;
    worst = worst.max((l1 - l1_ref).abs());

    let real: Vec<f64> = (0..8).map(|_| 3.0 * normal(&mut rng)).collect();
    let fake: Vec<f64> = (0..8).map(|_| 3.0 * normal(&mut rng)).collect();
    let d = hinge_d_loss(&tensor(real.clone(), &[2, 1, 2, 2]), &tensor(fake.clone(), &[2, 1, 2, 2]))?.to_scalar::<f64>()?;
    let d_ref = real.iter().map(|r| (1.0 - r).max(0.0)).sum::<f64>() / 8.0 + fake.iter().map(|f| (1.0 + f).max(0.0)).sum::<f64>() / 8.0;
    worst = worst.max((d - d_ref).abs());
    let gl = hinge_g_loss(&tensor(fake.clone(), &[2, 1, 2, 2]))?.to_scalar::<f64>()?;
    worst = worst.max((gl + fake.iter().sum::<f64>() / 8.0).abs());

    let zeros = tensor(vec![0.0; 4], &[1, 1, 2, 2]);
    let d0 = hinge_d_loss(&zeros, &zeros)?.to_scalar::<f64>()?;
    let g0 = hinge_g_loss(&zeros)?.to_scalar::<f64>()?;

    // Feature loss against per-cell softmax cross-entropy written out term by term.
    let (k, dim, cells) = (8usize, 4usize, 6usize);
    let protos: Vec<f64> = (0..k * dim).map(|_| normal(&mut rng)).collect();
    let feats: Vec<f64> = (0..cells * dim).map(|_| normal(&mut rng)).collect();
    let targets: Vec<u32> = (0..cells).map(|_| rng.random_range(0..k as u32)).collect();
    let cb = Codebook::from_prototypes(tensor(protos.clone(), &[k, dim]))?;
    let ft = tensor(feats.clone(), &[cells, dim]).reshape((cells, dim, 1, 1))?;
    let tt = Tensor::from_vec(targets.clone(), (cells, 1, 1), &Device::Cpu)?;
    let (lambda2, floor) = (10.0, 1e-6);
    let fl = feature_loss(&ft, &tt, &cb, lambda2, floor)?.to_scalar::<f64>()?;
    let mut ce = 0.0;
    for c in 0..cells {
        let x = &feats[c * dim..(c + 1) * dim];
        let dist: Vec<f64> = (0..k)
            .map(|j| (x.iter().zip(&protos[j * dim..(j + 1) * dim]).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() + 1e-12).sqrt())
            .collect();
        let m = dist.iter().sum::<f64>() / k as f64;
        let sd = (dist.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / k as f64).sqrt().max(floor);
        let logits: Vec<f64> = dist.iter().map(|v| lambda2 * (-(v - m) / sd).tanh()).collect();
        let lse = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
        ce += lse - logits[targets[c] as usize];
    }
    worst = worst.max((fl - ce / cells as f64).abs());

    let w = TextureLossWeights::default();
    let s = |v: f64| Tensor::new(v, &Device::Cpu).unwrap();
    let total = total_texture_loss(&s(0.3), &s(-0.7), &s(1.1), &s(2.2), &w)?.to_scalar::<f64>()?;
    worst = worst.max((total - (0.3 - 0.7 + 0.1 * 3.3)).abs());

    // The evaluator is frozen: its codebook and weights take no gradient, the input does.
    let proto_var = Var::from_tensor(&tensor(protos, &[k, dim]))?;
    let cb_var = Codebook::from_prototypes(proto_var.as_tensor().clone())?;
    let fv = Var::from_tensor(&ft)?;
    let grads = feature_loss(fv.as_tensor(), &tt, &cb_var, lambda2, floor)?.backward()?;
    let codebook_free = grads.get(proto_var.as_tensor()).is_none();
    let input_grad = grads.get(fv.as_tensor()).map(|g| vec_of(g).iter().any(|v| *v != 0.0)).unwrap_or(false);

    let smoke = RunConfig::preset(Preset::Smoke);
    let mut init = ChaCha8Rng::seed_from_u64(7);
    let live = ParamStore::new(DType::F32, 7);
    let trained = VqVae::new(smoke.codec.clone(), &live, &mut init)?;
    let frozen = VqVae::frozen(smoke.codec.clone(), trained.to_archive()?)?;
    let img = Var::from_tensor(&ImageGrid::batch_to_tensor(&[synthesize_shape_image(32, 7)], DType::F32)?)?;
    let enc = frozen.encode(img.as_tensor())?;
    let cb_s = frozen.structural_codebook();
    let g2 = feature_loss(&enc.s, &enc.s_indices, &cb_s, lambda2, floor)?.backward()?;
    let evaluator_frozen = frozen.store().trainable_vars().is_empty()
        && live.trainable_vars().iter().all(|(_, v)| g2.get(v.as_tensor()).is_none())
        && g2.get(img.as_tensor()).is_some();

    let passed = worst <= 1e-6 && d0 == 2.0 && g0 == 0.0 && codebook_free && input_grad && evaluator_frozen;
    Ok(verdict(
        passed,
        format!(
            "max oracle error {worst:.1e}; hinge at zero D={d0}, G={g0}; codebook gradient absent: {codebook_free}; \
             frozen evaluator passes gradient only to its input: {evaluator_frozen}"
        ),
    ))
}

fn criterion_7_entropy() -> Result<Verdict> {
    let k = 512;
    let uniform = Tensor::zeros((1, k, 2, 2), DType::F64, &Device::Cpu)?;
    let maps = entropy_from_logits(&uniform)?;
    let exact = maps[0].bits.iter().all(|&b| b == 9.0) && maps[0].max_bits == 9.0;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let random = tensor((0..2 * k * 16).map(|_| 4.0 * normal(&mut rng)).collect(), &[2, k, 4, 4]);
    let peaked = (Tensor::zeros((1, k, 2, 2), DType::F64, &Device::Cpu)? + 0.0)?
        .slice_assign(&[0..1, 0..1, 0..2, 0..2], &Tensor::full(1e4f64, (1, 1, 2, 2), &Device::Cpu)?)?;
    let mut in_range = true;
    for m in entropy_from_logits(&random)?.iter().chain(&entropy_from_logits(&peaked)?) {
        in_range &= m.bits.iter().all(|&b| (0.0..=9.0).contains(&b));
    }
    Ok(verdict(
        exact && in_range,
        format!("uniform logits over K=512 give {} bits; random and peaked maps within [0, 9]: {in_range}", maps[0].bits[0]),
    ))
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).ancestors().nth(2).expect("crate sits two levels below the workspace").to_path_buf()
}

fn desk_run_root() -> PathBuf {
    std::env::var_os("DSI_DESK_RUN").map(PathBuf::from).unwrap_or_else(|| workspace_root().join("runs/desk"))
}

fn criterion_8_desk_milestones() -> Verdict {
    let root = desk_run_root();
    let ms = check_desk_milestones(&root);
    let passed = ms.iter().all(|m| m.passed);
    let detail = ms
        .iter()
        .map(|m| format!("{} {}: {}", if m.passed { "ok" } else { "FAILED" }, m.name, m.detail))
        .collect::<Vec<_>>()
        .join("; ");
    verdict(passed, format!("runs under {}: {detail}", root.display()))
}

/// The whole smoke-scale pipeline in `dir`; returns the eval CSV.
fn smoke_pipeline(dir: &Path) -> Result<String> {
    let cfg = RunConfig::preset(Preset::Smoke);
    let opts = TrainOptions::default();
    let (vq, st, tx) = (dir.join("vqvae"), dir.join("structure"), dir.join("texture"));
    training::run_phase(Phase::Vqvae, &cfg, None, &vq, &opts)?;
    training::run_phase(Phase::Structure, &cfg, Some(&vq), &st, &opts)?;
    training::run_phase(Phase::Texture, &cfg, Some(&vq), &tx, &opts)?;
    let model = Inpainter::load(&vq, &st, &tx)?;
    let data = Dataset::load(&cfg.data)?;
    let images: Vec<(String, ImageGrid)> = data
        .split(Split::Test)
        .iter()
        .map(|i| i.source.clone())
        .zip(data.images(Split::Test))
        .take(cfg.sample.eval_images)
        .collect();
    let report = model.evaluate(&images, &MaskSpec::Center, cfg.sample.k, cfg.sample.temperature, cfg.seed)?;
    Ok(report.to_csv())
}

fn criterion_10_determinism(a: &Path, b: &Path) -> Result<Verdict> {
    let csv_a = smoke_pipeline(a)?;
    let csv_b = smoke_pipeline(b)?;
    let mut identical = csv_a == csv_b;
    let mut compared = 1;
    for phase in ["vqvae", "structure", "texture"] {
        for file in [CHECKPOINT_ARCHIVE, MODEL_ARCHIVE, "train_log.csv", "eval_log.csv"] {
            let x = std::fs::read(a.join(phase).join(file)).expect("first run wrote the file");
            let y = std::fs::read(b.join(phase).join(file)).expect("second run wrote the file");
            identical &= x == y;
            compared += 1;
        }
    }
    Ok(verdict(identical, format!("two smoke-scale runs: {compared} artifacts compared byte for byte, identical: {identical}")))
}

fn criterion_9_diversity(smoke_dir: &Path) -> Result<Verdict> {
    let desk = desk_run_root();
    let desk_ready = ["vqvae", "structure", "texture"].iter().all(|p| desk.join(p).join(MODEL_ARCHIVE).is_file());
    let (root, source) = if desk_ready {
        (desk, "desk run")
    } else {
        (smoke_dir.to_path_buf(), "smoke-scale run (no desk run found)")
    };
    let model = Inpainter::load(&root.join("vqvae"), &root.join("structure"), &root.join("texture"))?;
    let s = model.image_size();
    let image = synthesize_shape_image(s, 9);
    let mask = make_center_mask(s, s);
    let opts = SampleOptions {
        k: 16,
        temperature: 1.0,
        seed: 9,
        entropy_map: false,
    };
    let out = model.inpaint(&image, &mask, &opts)?;
    let (distinct, l1) = diversity(&out.structures, &out.composites, &mask)?;
    Ok(verdict(
        distinct >= 8 && l1 > 0.0,
        format!("{source}: {distinct} distinct structures of 16, mean consecutive hole L1 {l1:.3e}"),
    ))
}

fn criterion_11_metrics() -> Result<Verdict> {
    let a = ImageGrid::filled(16, 16, 3, 0.4);
    let b = ImageGrid::filled(16, 16, 3, 0.5);
    let p = psnr(&a, &b)?;
    let img = synthesize_shape_image(32, 11);
    let s = ssim(&img, &img)?;
    Ok(verdict((p - 20.0).abs() <= 0.01 && s == 1.0, format!("PSNR {p:.4} dB; SSIM(a, a) = {s}")))
}

fn report(n: u32, name: &str, v: &Verdict) {
    println!("criterion {n:>2} [{}] {name}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
}

fn unwrap(r: Result<Verdict>) -> Verdict {
    r.unwrap_or_else(|e| verdict(false, format!("error: {e}")))
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let results = vec![
        (1, "quantization oracle", unwrap(criterion_1_quantization())),
        (2, "straight-through gradient", unwrap(criterion_2_straight_through())),
        (3, "EMA codebook recurrence and conservation", unwrap(criterion_3_ema())),
        (4, "structure network causality", unwrap(criterion_4_causality())),
        (5, "structural attention", unwrap(criterion_5_attention())),
        (6, "loss oracles", unwrap(criterion_6_losses())),
        (7, "entropy diagnostics", unwrap(criterion_7_entropy())),
        (10, "end-to-end determinism", unwrap(criterion_10_determinism(&a, &b))),
        (9, "diversity milestone", unwrap(criterion_9_diversity(&a))),
        (11, "metrics sanity", unwrap(criterion_11_metrics())),
        (8, "desk training milestones", criterion_8_desk_milestones()),
    ];
    let mut ordered = results;
    ordered.sort_by_key(|(n, _, _)| *n);
    for (n, name, v) in &ordered {
        report(*n, name, v);
    }
    // Criterion 8 needs hours of desk training outside the test run; its strict check is `desk_training_milestones`.
    let failed: Vec<u32> = ordered.iter().filter(|(n, _, v)| *n != 8 && !v.passed).map(|(n, _, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

#[test]
#[ignore = "needs finished desk runs under DSI_DESK_RUN (many hours of training)"]
fn desk_training_milestones() {
    let v = criterion_8_desk_milestones();
    report(8, "desk training milestones", &v);
    assert!(v.passed, "{}", v.detail);
}
