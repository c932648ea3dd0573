//! Three training phases: the codec first, then the structure and texture
//! generators, each against the frozen codec and independent of one another.
//!
//! A run directory holds the config echo, append-only CSV logs, the resumable
//! checkpoint bundle and the inference weights (`model.archive`).

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::DType;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, ArrayData};
use crate::codec::VqVae;
use crate::config::{PhaseSchedule, RunConfig};
use crate::data::{derive_seed, make_center_mask, make_random_mask_with, Dataset, Split};
use crate::error::{Error, Result};
use crate::image::{ImageGrid, Mask};
use crate::losses::{feature_loss, hinge_d_loss, hinge_g_loss, l1_loss, total_texture_loss};
use crate::nn::{Adam, AdamConfig, ParamStore, PolyakShadow};
use crate::ops::scalar;
use crate::structure::{nats_to_bits, StructureNet};
use crate::texture::{composite, composite_grid, Discriminator, TextureGenerator};

pub const CONFIG_FILE: &str = "config.toml";
pub const DATASET_MANIFEST: &str = "dataset.tsv";
pub const CHECKPOINT_ARCHIVE: &str = "checkpoint.archive";
pub const CHECKPOINT_MANIFEST: &str = "checkpoint.toml";
pub const MODEL_ARCHIVE: &str = "model.archive";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const EVAL_LOG: &str = "eval_log.csv";
pub const EPOCH_LOG: &str = "epoch_log.csv";
pub const DIVERGENCE_DUMP: &str = "divergence.toml";
pub const SAMPLES_DIR: &str = "samples";

/// Composites written per texture evaluation.
const EMITTED_COMPOSITES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Vqvae,
    Structure,
    Texture,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Vqvae => "vqvae",
            Phase::Structure => "structure",
            Phase::Texture => "texture",
        }
    }

    pub fn schedule(self, cfg: &RunConfig) -> &PhaseSchedule {
        match self {
            Phase::Vqvae => &cfg.train.vqvae,
            Phase::Structure => &cfg.train.structure,
            Phase::Texture => &cfg.train.texture,
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vqvae" => Ok(Phase::Vqvae),
            "structure" => Ok(Phase::Structure),
            "texture" => Ok(Phase::Texture),
            _ => Err(Error::Config(format!("unknown phase {s:?} (expected vqvae, structure or texture)"))),
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Text manifest stored next to `checkpoint.archive`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub phase: String,
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
    /// Digest of the frozen codec weights the phase was trained against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codec_digest: Option<String>,
    pub optimizer_steps: Vec<u64>,
    pub model_digest: String,
}

impl CheckpointManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CHECKPOINT_MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        toml::from_str(&text).map_err(|e| Error::Archive(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from the checkpoint already in the run directory.
    pub resume: bool,
    /// Stop (with a checkpoint) after this step instead of `total_steps`.
    pub stop_at: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSummary {
    pub phase: Phase,
    pub step: u64,
    pub model_digest: String,
    pub checkpoint_digest: String,
}

/// A trained codec loaded read-only from a vqvae run directory.
pub struct CodecCheckpoint {
    pub dir: PathBuf,
    pub model: VqVae,
    pub digest: String,
}

/// Loads `model.archive` of a vqvae run; a missing run is reported against the vqvae phase.
pub fn load_codec(dir: &Path) -> Result<CodecCheckpoint> {
    let missing = |detail: String| Error::MissingCheckpoint {
        phase: Phase::Vqvae.name().into(),
        detail,
    };
    let cfg_path = dir.join(CONFIG_FILE);
    let model_path = dir.join(MODEL_ARCHIVE);
    if !cfg_path.is_file() || !model_path.is_file() {
        return Err(missing(format!(
            "{} has no trained codec ({MODEL_ARCHIVE} and {CONFIG_FILE} required); run `train vqvae` first",
            dir.display()
        )));
    }
    let manifest = CheckpointManifest::load(dir)?;
    if manifest.phase != Phase::Vqvae.name() {
        return Err(missing(format!("{} holds a {} run, not a codec", dir.display(), manifest.phase)));
    }
    let cfg = RunConfig::load(&cfg_path)?;
    let archive = Archive::load(&model_path)?;
    let digest = archive.digest();
    let model = VqVae::frozen(cfg.codec, archive)?;
    if model.trained_steps()? == 0 {
        return Err(missing(format!("codec in {} has not been trained", dir.display())));
    }
    Ok(CodecCheckpoint {
        dir: dir.to_path_buf(),
        model,
        digest,
    })
}

/// Runs one phase end to end, loading the dataset from the configuration.
pub fn run_phase(phase: Phase, cfg: &RunConfig, codec_dir: Option<&Path>, out: &Path, opts: &TrainOptions) -> Result<PhaseSummary> {
    let codec = match phase {
        Phase::Vqvae => None,
        _ => Some(load_codec(codec_dir.ok_or_else(|| Error::MissingCheckpoint {
            phase: Phase::Vqvae.name().into(),
            detail: format!("the {phase} phase needs a codec run directory"),
        })?)?),
    };
    let dataset = Dataset::load(&cfg.data)?;
    match (phase, codec) {
        (Phase::Vqvae, _) => train_vqvae(&dataset, cfg, out, opts),
        (Phase::Structure, Some(c)) => train_structure(&dataset, &c, cfg, out, opts),
        (Phase::Texture, Some(c)) => train_texture(&dataset, &c, cfg, out, opts),
        _ => unreachable!("codec is loaded for every non-codec phase"),
    }
}

/// Append-only CSV log.
struct CsvLog {
    file: File,
}

impl CsvLog {
    fn open(path: &Path, header: &[&str]) -> Result<Self> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if fresh {
            writeln!(file, "{}", header.join(",")).map_err(|e| Error::io(path, e))?;
        }
        Ok(Self { file })
    }

    fn row(&mut self, values: &[f64]) -> Result<()> {
        let line: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        writeln!(self.file, "{}", line.join(",")).map_err(|e| Error::io("log", e))
    }
}

/// Header and numeric rows of a CSV log.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Archive(format!("{} is empty", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Archive(format!("{}: {e}", path.display())))
        })
        .collect::<Result<_>>()?;
    Ok((header, rows))
}

/// Drops rows past `step` (first column) so a resumed run appends exactly where the checkpoint left off.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|v| v.parse::<f64>().ok())
                .is_some_and(|v| v <= step as f64);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Run-directory setup shared by all phases; returns the checkpoint to resume from, if any.
fn prepare_run(
    phase: Phase,
    cfg: &RunConfig,
    dataset: &Dataset,
    out: &Path,
    opts: &TrainOptions,
) -> Result<Option<(CheckpointManifest, Archive)>> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let has_checkpoint = out.join(CHECKPOINT_MANIFEST).exists();
    let resume = if opts.resume {
        if !has_checkpoint {
            return Err(Error::MissingCheckpoint {
                phase: phase.name().into(),
                detail: format!("nothing to resume in {}", out.display()),
            });
        }
        let manifest = CheckpointManifest::load(out)?;
        if manifest.phase != phase.name() {
            return Err(Error::Config(format!("{} holds a {} run", out.display(), manifest.phase)));
        }
        if manifest.config_hash != cfg.hash() {
            return Err(Error::Config(format!(
                "configuration differs from the one {} was trained with",
                out.display()
            )));
        }
        let archive = Archive::load(out.join(CHECKPOINT_ARCHIVE))?;
        for log in [TRAIN_LOG, EVAL_LOG, EPOCH_LOG] {
            truncate_log(&out.join(log), manifest.step)?;
        }
        Some((manifest, archive))
    } else {
        if has_checkpoint {
            return Err(Error::Config(format!(
                "{} already holds a checkpoint; resume it or choose a new directory",
                out.display()
            )));
        }
        for log in [TRAIN_LOG, EVAL_LOG, EPOCH_LOG] {
            let p = out.join(log);
            if p.exists() {
                std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        None
    };
    write_file(&out.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
    write_file(&out.join(DATASET_MANIFEST), dataset.manifest().as_bytes())?;
    Ok(resume)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the bundle through a temporary file so an interrupted save never leaves a torn checkpoint.
fn save_checkpoint(out: &Path, checkpoint: &Archive, model: &Archive, manifest: &CheckpointManifest) -> Result<()> {
    let tmp = out.join(format!("{CHECKPOINT_ARCHIVE}.tmp"));
    checkpoint.save(&tmp)?;
    let dst = out.join(CHECKPOINT_ARCHIVE);
    std::fs::rename(&tmp, &dst).map_err(|e| Error::io(&dst, e))?;
    model.save(out.join(MODEL_ARCHIVE))?;
    let text = toml::to_string(manifest).expect("manifest always serializes");
    write_file(&out.join(CHECKPOINT_MANIFEST), text.as_bytes())
}

/// Live store entries with the Polyak shadow substituted for every learnable parameter.
fn shadow_overlay(store: &ParamStore, shadow: &PolyakShadow) -> Result<Archive> {
    let mut a = store.to_archive()?;
    let s = shadow.to_archive()?;
    for name in s.names() {
        let array: &ArrayData = s.get(name).expect("name comes from the archive");
        a.insert(name, array.clone())?;
    }
    Ok(a)
}

fn adam_config(s: &PhaseSchedule) -> AdamConfig {
    AdamConfig {
        beta1: s.beta1,
        beta2: s.beta2,
        ..AdamConfig::default()
    }
}

fn step_rng(cfg: &RunConfig, phase: Phase, stream: &str, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("{}/{stream}", phase.name()), step))
}

/// Training mask `index` of a phase: the center square or a free-form mask.
fn train_mask(cfg: &RunConfig, phase: Phase, index: u64) -> Result<Mask> {
    let s = cfg.data.image_size;
    if cfg.train.mask == "random" {
        make_random_mask_with(s, s, derive_seed(cfg.seed, &format!("{}/mask", phase.name()), index), &cfg.random_mask)
    } else {
        Ok(make_center_mask(s, s))
    }
}

fn batch_masks(cfg: &RunConfig, phase: Phase, step: u64, batch: usize) -> Result<Vec<Mask>> {
    (0..batch as u64)
        .map(|i| train_mask(cfg, phase, (step - 1) * batch as u64 + i))
        .collect()
}

/// Validation images scored at each evaluation.
fn validation_set(cfg: &RunConfig, dataset: &Dataset) -> Vec<ImageGrid> {
    let mut v = dataset.images(Split::Validation);
    if v.is_empty() {
        v = dataset.images(Split::Train);
    }
    if cfg.train.validation_images > 0 {
        v.truncate(cfg.train.validation_images);
    }
    v
}

/// Fixed validation masks; the random protocol uses a stream independent of training.
fn validation_masks(cfg: &RunConfig, n: usize) -> Result<Vec<Mask>> {
    let s = cfg.data.image_size;
    (0..n as u64)
        .map(|i| {
            if cfg.train.mask == "random" {
                make_random_mask_with(s, s, derive_seed(cfg.seed, "validation/mask", i), &cfg.random_mask)
            } else {
                Ok(make_center_mask(s, s))
            }
        })
        .collect()
}

fn diverged(out: &Path, phase: Phase, step: u64, lr: f64, terms: &[(&str, f64)]) -> Error {
    let mut dump = BTreeMap::new();
    for (k, v) in terms {
        dump.insert(k.to_string(), toml::Value::String(v.to_string()));
    }
    dump.insert("phase".into(), toml::Value::String(phase.name().into()));
    dump.insert("step".into(), toml::Value::Integer(step as i64));
    dump.insert("learning_rate".into(), toml::Value::Float(lr));
    let text = toml::to_string(&dump).unwrap_or_default();
    let _ = std::fs::write(out.join(DIVERGENCE_DUMP), text);
    let detail = terms
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(", ");
    Error::Diverged {
        step: step as usize,
        detail: format!("{detail} (dump in {})", out.join(DIVERGENCE_DUMP).display()),
    }
}

fn check_finite(out: &Path, phase: Phase, step: u64, lr: f64, terms: &[(&str, f64)]) -> Result<()> {
    if terms.iter().all(|(_, v)| v.is_finite()) {
        Ok(())
    } else {
        Err(diverged(out, phase, step, lr, terms))
    }
}

fn last_step(sched: &PhaseSchedule, opts: &TrainOptions) -> u64 {
    opts.stop_at.map_or(sched.total_steps, |s| s.min(sched.total_steps))
}

fn is_boundary(step: u64, interval: u64, last: u64) -> bool {
    step % interval == 0 || step == last
}

/// Mean squared reconstruction error of the codec over `images`.
pub fn validation_mse(codec: &VqVae, images: &[ImageGrid], batch: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in images.chunks(batch.max(1)) {
        let x = ImageGrid::batch_to_tensor(chunk, DType::F32)?;
        let e = codec.encode(&x)?;
        let r = codec.decode(&e.s_quantized, &e.t_quantized)?;
        sum += scalar(&(r - &x)?.sqr()?.sum_all()?)?;
        count += x.elem_count();
    }
    Ok(sum / count.max(1) as f64)
}

pub fn train_vqvae(dataset: &Dataset, cfg: &RunConfig, out: &Path, opts: &TrainOptions) -> Result<PhaseSummary> {
    let phase = Phase::Vqvae;
    let sched = &cfg.train.vqvae;
    let resume = prepare_run(phase, cfg, dataset, out, opts)?;
    let store = ParamStore::new(DType::F32, derive_seed(cfg.seed, "vqvae/init", 0));
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "vqvae/codebook", 0));
    let model = VqVae::new(cfg.codec.clone(), &store, &mut init_rng)?;
    let vars = store.trainable_vars();
    let mut adam = Adam::new(vars.clone(), adam_config(sched))?;
    let mut shadow = PolyakShadow::new(&vars, cfg.train.polyak_decay)?;
    let mut step = 0;
    if let Some((m, a)) = &resume {
        store.load(&a.subset("model"))?;
        adam.load(&a.subset("adam"), m.optimizer_steps[0])?;
        shadow.load(&a.subset("shadow"))?;
        step = m.step;
    }
    let validation = validation_set(cfg, dataset);
    let mut train_log = CsvLog::open(
        &out.join(TRAIN_LOG),
        &["step", "learning_rate", "total", "reconstruction", "structural_commitment", "textural_commitment", "structural_usage", "textural_usage"],
    )?;
    let mut eval_log = CsvLog::open(&out.join(EVAL_LOG), &["step", "validation_mse"])?;
    let last = last_step(sched, opts);
    let mut summary = None;
    while step < last {
        step += 1;
        let lr = sched.learning_rate_at(step);
        let mut rng = step_rng(cfg, phase, "batch", step);
        let images = dataset.sample_batch(Split::Train, sched.batch_size, &mut rng)?;
        let x = ImageGrid::batch_to_tensor(&images, DType::F32)?;
        let (enc, _recon, losses) = model.forward_losses(&x)?;
        let terms = [
            ("total", scalar(&losses.total)?),
            ("reconstruction", scalar(&losses.reconstruction)?),
            ("structural_commitment", scalar(&losses.structural_commitment)?),
            ("textural_commitment", scalar(&losses.textural_commitment)?),
        ];
        check_finite(out, phase, step, lr, &terms)?;
        let grads = losses.total.backward()?;
        adam.step(&grads, lr)?;
        model.update_codebooks(&enc)?;
        shadow.update(&vars)?;
        model.set_trained_steps(step)?;
        let k = cfg.codec.codebook_size;
        train_log.row(&[
            step as f64,
            lr,
            terms[0].1,
            terms[1].1,
            terms[2].1,
            terms[3].1,
            VqVae::code_usage(&enc.s_indices, k)?,
            VqVae::code_usage(&enc.t_indices, k)?,
        ])?;
        let evaluate = is_boundary(step, sched.eval_interval, last);
        let save = is_boundary(step, sched.checkpoint_interval, last);
        if evaluate || save {
            let inference = shadow_overlay(&store, &shadow)?;
            if evaluate {
                let frozen = VqVae::frozen(cfg.codec.clone(), inference.clone())?;
                let mse = validation_mse(&frozen, &validation, sched.batch_size)?;
                eval_log.row(&[step as f64, mse])?;
                log::info!("vqvae step {step}/{last}: loss {:.5}, validation MSE {mse:.5}", terms[0].1);
            }
            if save {
                let mut ckpt = Archive::new();
                ckpt.merge_prefixed("model", &store.to_archive()?)?;
                ckpt.merge_prefixed("adam", &adam.to_archive()?)?;
                ckpt.merge_prefixed("shadow", &shadow.to_archive()?)?;
                summary = Some(finish_save(out, phase, cfg, step, None, vec![adam.step_count()], &ckpt, &inference)?);
            }
        }
    }
    resumed_summary(out, phase, summary)
}

fn finish_save(
    out: &Path,
    phase: Phase,
    cfg: &RunConfig,
    step: u64,
    codec_digest: Option<String>,
    optimizer_steps: Vec<u64>,
    ckpt: &Archive,
    model: &Archive,
) -> Result<PhaseSummary> {
    let manifest = CheckpointManifest {
        phase: phase.name().into(),
        step,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        codec_digest,
        optimizer_steps,
        model_digest: model.digest(),
    };
    save_checkpoint(out, ckpt, model, &manifest)?;
    Ok(PhaseSummary {
        phase,
        step,
        model_digest: manifest.model_digest,
        checkpoint_digest: ckpt.digest(),
    })
}

/// Summary of the checkpoint on disk when no step ran (resuming a finished run).
fn resumed_summary(out: &Path, phase: Phase, summary: Option<PhaseSummary>) -> Result<PhaseSummary> {
    if let Some(s) = summary {
        return Ok(s);
    }
    let m = CheckpointManifest::load(out)?;
    Ok(PhaseSummary {
        phase,
        step: m.step,
        model_digest: m.model_digest,
        checkpoint_digest: Archive::load(out.join(CHECKPOINT_ARCHIVE))?.digest(),
    })
}

/// The run configuration a generator phase records: its own settings with the codec's architecture.
fn with_codec(cfg: &RunConfig, codec: &CodecCheckpoint) -> Result<RunConfig> {
    let mut c = cfg.clone();
    c.codec = codec.model.config().clone();
    if c.codec.image_size != c.data.image_size {
        return Err(Error::Config(format!(
            "codec in {} works on {}px images but data.image_size is {}",
            codec.dir.display(),
            c.codec.image_size,
            c.data.image_size
        )));
    }
    Ok(c)
}

/// Training steps in one pass over the training split.
pub fn steps_per_epoch(dataset: &Dataset, batch_size: usize) -> u64 {
    let n = dataset.split(Split::Train).len().max(1);
    n.div_ceil(batch_size) as u64
}

/// Mean teacher-forced NLL (nats) of the structure network over `images` and `masks`.
pub fn validation_nll(net: &StructureNet, codec: &VqVae, images: &[ImageGrid], masks: &[Mask], batch: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (imgs, ms) in images.chunks(batch.max(1)).zip(masks.chunks(batch.max(1))) {
        let x = ImageGrid::batch_to_tensor(imgs, DType::F32)?;
        let m = Mask::batch_to_tensor(ms, DType::F32)?;
        let targets = codec.encode(&x)?.s_indices;
        let cond = net.build_condition(&x, &m)?;
        sum += scalar(&net.nll(&targets, &cond, None)?)? * imgs.len() as f64;
        count += imgs.len();
    }
    Ok(sum / count.max(1) as f64)
}

pub fn train_structure(
    dataset: &Dataset,
    codec: &CodecCheckpoint,
    cfg: &RunConfig,
    out: &Path,
    opts: &TrainOptions,
) -> Result<PhaseSummary> {
    let phase = Phase::Structure;
    let cfg = &with_codec(cfg, codec)?;
    let sched = &cfg.train.structure;
    let resume = prepare_run(phase, cfg, dataset, out, opts)?;
    check_codec_digest(&resume, codec)?;
    let k = cfg.codec.codebook_size;
    let store = ParamStore::new(DType::F32, derive_seed(cfg.seed, "structure/init", 0));
    let net = StructureNet::new(cfg.structure.clone(), k, cfg.data.image_size, &store)?;
    let vars = store.trainable_vars();
    let mut adam = Adam::new(vars.clone(), adam_config(sched))?;
    let mut shadow = PolyakShadow::new(&vars, cfg.train.polyak_decay)?;
    let mut step = 0;
    if let Some((m, a)) = &resume {
        store.load(&a.subset("model"))?;
        adam.load(&a.subset("adam"), m.optimizer_steps[0])?;
        shadow.load(&a.subset("shadow"))?;
        step = m.step;
    }
    let per_epoch = steps_per_epoch(dataset, sched.batch_size);
    let mut epoch_sum = 0.0;
    if step % per_epoch != 0 && out.join(TRAIN_LOG).exists() {
        let (_, rows) = read_csv(&out.join(TRAIN_LOG))?;
        let start = step - step % per_epoch;
        epoch_sum = rows.iter().filter(|r| r[0] as u64 > start).map(|r| r[2]).sum();
    }
    let validation = validation_set(cfg, dataset);
    let validation_masks = validation_masks(cfg, validation.len())?;
    let mut train_log = CsvLog::open(&out.join(TRAIN_LOG), &["step", "learning_rate", "nll", "nll_bits"])?;
    let mut eval_log = CsvLog::open(&out.join(EVAL_LOG), &["step", "validation_nll", "validation_nll_bits"])?;
    let mut epoch_log = CsvLog::open(&out.join(EPOCH_LOG), &["step", "epoch", "mean_nll"])?;
    let last = last_step(sched, opts);
    let mut summary = None;
    while step < last {
        step += 1;
        let lr = sched.learning_rate_at(step);
        let mut rng = step_rng(cfg, phase, "batch", step);
        let images = dataset.sample_batch(Split::Train, sched.batch_size, &mut rng)?;
        let masks = batch_masks(cfg, phase, step, images.len())?;
        let x = ImageGrid::batch_to_tensor(&images, DType::F32)?;
        let m = Mask::batch_to_tensor(&masks, DType::F32)?;
        let targets = codec.model.encode(&x)?.s_indices;
        let cond = net.build_condition(&x, &m)?;
        let mut drop_rng = step_rng(cfg, phase, "dropout", step);
        let loss = net.nll(&targets, &cond, Some(&mut drop_rng))?;
        let nll = scalar(&loss)?;
        check_finite(out, phase, step, lr, &[("nll", nll)])?;
        let grads = loss.backward()?;
        adam.step(&grads, lr)?;
        shadow.update(&vars)?;
        train_log.row(&[step as f64, lr, nll, nats_to_bits(nll)])?;
        epoch_sum += nll;
        if step % per_epoch == 0 {
            epoch_log.row(&[step as f64, (step / per_epoch) as f64, epoch_sum / per_epoch as f64])?;
            epoch_sum = 0.0;
        }
        let evaluate = is_boundary(step, sched.eval_interval, last);
        let save = is_boundary(step, sched.checkpoint_interval, last);
        if evaluate || save {
            let inference = shadow_overlay(&store, &shadow)?;
            if evaluate {
                let frozen = ParamStore::frozen(inference.clone(), DType::F32);
                let eval_net = StructureNet::new(cfg.structure.clone(), k, cfg.data.image_size, &frozen)?;
                let v = validation_nll(&eval_net, &codec.model, &validation, &validation_masks, sched.batch_size)?;
                eval_log.row(&[step as f64, v, nats_to_bits(v)])?;
                log::info!("structure step {step}/{last}: NLL {nll:.4}, validation NLL {v:.4} nats");
            }
            if save {
                let mut ckpt = Archive::new();
                ckpt.merge_prefixed("model", &store.to_archive()?)?;
                ckpt.merge_prefixed("adam", &adam.to_archive()?)?;
                ckpt.merge_prefixed("shadow", &shadow.to_archive()?)?;
                summary = Some(finish_save(
                    out,
                    phase,
                    cfg,
                    step,
                    Some(codec.digest.clone()),
                    vec![adam.step_count()],
                    &ckpt,
                    &inference,
                )?);
            }
        }
    }
    resumed_summary(out, phase, summary)
}

fn check_codec_digest(resume: &Option<(CheckpointManifest, Archive)>, codec: &CodecCheckpoint) -> Result<()> {
    if let Some((m, _)) = resume {
        if m.codec_digest.as_deref() != Some(codec.digest.as_str()) {
            return Err(Error::Config(format!(
                "codec in {} differs from the one this run started with",
                codec.dir.display()
            )));
        }
    }
    Ok(())
}

/// Composites of one texture evaluation and the number of known pixels they changed.
struct TextureEval {
    hole_l1: f64,
    known_mismatches: usize,
    composites: Vec<ImageGrid>,
}

fn evaluate_texture(
    generator: &TextureGenerator,
    codec: &VqVae,
    images: &[ImageGrid],
    masks: &[Mask],
    batch: usize,
) -> Result<TextureEval> {
    let mut hole_sum = 0.0;
    let mut hole_count = 0usize;
    let mut known_mismatches = 0;
    let mut composites = Vec::with_capacity(images.len());
    for (imgs, ms) in images.chunks(batch.max(1)).zip(masks.chunks(batch.max(1))) {
        let x = ImageGrid::batch_to_tensor(imgs, DType::F32)?;
        let m = Mask::batch_to_tensor(ms, DType::F32)?;
        let s_bar = codec.encode(&x)?.s_quantized;
        let outs = ImageGrid::from_batch_tensor(&generator.generate(&x, &m, &s_bar)?)?;
        for ((o, gt), mask) in outs.iter().zip(imgs).zip(ms) {
            let c = composite_grid(o, gt, mask)?;
            for y in 0..gt.height() {
                for xx in 0..gt.width() {
                    for ch in 0..gt.channels() {
                        if mask.is_missing(y, xx) {
                            hole_sum += (c.get(y, xx, ch) - gt.get(y, xx, ch)).abs() as f64;
                            hole_count += 1;
                        } else if c.get(y, xx, ch).to_bits() != gt.get(y, xx, ch).to_bits() {
                            known_mismatches += 1;
                        }
                    }
                }
            }
            composites.push(c);
        }
    }
    Ok(TextureEval {
        hole_l1: hole_sum / hole_count.max(1) as f64,
        known_mismatches,
        composites,
    })
}

pub fn train_texture(
    dataset: &Dataset,
    codec: &CodecCheckpoint,
    cfg: &RunConfig,
    out: &Path,
    opts: &TrainOptions,
) -> Result<PhaseSummary> {
    let phase = Phase::Texture;
    let cfg = &with_codec(cfg, codec)?;
    let sched = &cfg.train.texture;
    let resume = prepare_run(phase, cfg, dataset, out, opts)?;
    check_codec_digest(&resume, codec)?;
    let tc = &cfg.texture;
    let g_store = ParamStore::new(DType::F32, derive_seed(cfg.seed, "texture/g_init", 0));
    let d_store = ParamStore::new(DType::F32, derive_seed(cfg.seed, "texture/d_init", 0));
    let generator = TextureGenerator::new(tc.clone(), cfg.data.image_size, cfg.codec.code_dim, &g_store)?;
    let disc = Discriminator::new(tc.discriminator_hidden, &d_store)?;
    let g_vars = g_store.trainable_vars();
    let d_vars = d_store.trainable_vars();
    let mut adam_g = Adam::new(g_vars, adam_config(sched))?;
    let mut adam_d = Adam::new(d_vars, adam_config(sched))?;
    let mut step = 0;
    if let Some((m, a)) = &resume {
        g_store.load(&a.subset("generator"))?;
        d_store.load(&a.subset("discriminator"))?;
        adam_g.load(&a.subset("adam_g"), m.optimizer_steps[0])?;
        adam_d.load(&a.subset("adam_d"), m.optimizer_steps[1])?;
        step = m.step;
    }
    let cb_s = codec.model.structural_codebook();
    let cb_t = codec.model.textural_codebook();
    let validation = validation_set(cfg, dataset);
    let validation_masks = validation_masks(cfg, validation.len())?;
    let mut train_log = CsvLog::open(
        &out.join(TRAIN_LOG),
        &["step", "learning_rate", "d_loss", "g_total", "l1", "adversarial", "structural_feature", "textural_feature"],
    )?;
    let mut eval_log = CsvLog::open(&out.join(EVAL_LOG), &["step", "validation_hole_l1", "known_pixel_mismatches"])?;
    let last = last_step(sched, opts);
    let mut summary = None;
    while step < last {
        step += 1;
        let lr = sched.learning_rate_at(step);
        let mut rng = step_rng(cfg, phase, "batch", step);
        let images = dataset.sample_batch(Split::Train, sched.batch_size, &mut rng)?;
        let masks = batch_masks(cfg, phase, step, images.len())?;
        let x = ImageGrid::batch_to_tensor(&images, DType::F32)?;
        let m = Mask::batch_to_tensor(&masks, DType::F32)?;
        let gt = codec.model.encode(&x)?;
        let output = generator.generate(&x, &m, &gt.s_quantized)?;
        let comp = composite(&output, &x, &m)?;

        let real = disc.forward(&x, &m, true)?;
        let fake = disc.forward(&comp.detach(), &m, false)?;
        let d_loss = hinge_d_loss(&real, &fake)?;
        let d_value = scalar(&d_loss)?;
        check_finite(out, phase, step, lr, &[("d_loss", d_value)])?;
        adam_d.step(&d_loss.backward()?, lr)?;

        let adversarial = hinge_g_loss(&disc.forward(&comp, &m, false)?)?;
        let l1 = l1_loss(&output, &x)?;
        let feats = codec.model.encode(&output)?;
        let sf = feature_loss(&feats.s, &gt.s_indices, &cb_s, tc.lambda2, tc.sigma_floor)?;
        let tf = feature_loss(&feats.t, &gt.t_indices, &cb_t, tc.lambda2, tc.sigma_floor)?;
        let total = total_texture_loss(&l1, &adversarial, &sf, &tf, &tc.weights)?;
        let terms = [
            ("d_loss", d_value),
            ("g_total", scalar(&total)?),
            ("l1", scalar(&l1)?),
            ("adversarial", scalar(&adversarial)?),
            ("structural_feature", scalar(&sf)?),
            ("textural_feature", scalar(&tf)?),
        ];
        check_finite(out, phase, step, lr, &terms)?;
        adam_g.step(&total.backward()?, lr)?;
        let mut row = vec![step as f64, lr];
        row.extend(terms.iter().map(|(_, v)| *v));
        train_log.row(&row)?;

        let evaluate = is_boundary(step, sched.eval_interval, last);
        if evaluate {
            let ev = evaluate_texture(&generator, &codec.model, &validation, &validation_masks, sched.batch_size)?;
            eval_log.row(&[step as f64, ev.hole_l1, ev.known_mismatches as f64])?;
            log::info!(
                "texture step {step}/{last}: D {d_value:.4}, G {:.4}, validation hole L1 {:.5}",
                terms[1].1,
                ev.hole_l1
            );
            let dir = out.join(SAMPLES_DIR).join(format!("step_{step:08}"));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (i, c) in ev.composites.iter().take(EMITTED_COMPOSITES).enumerate() {
                c.save_png(dir.join(format!("{i}_composite.png")))?;
                validation[i].save_png(dir.join(format!("{i}_ground_truth.png")))?;
                validation_masks[i].save_png(dir.join(format!("{i}_mask.png")))?;
            }
        }
        if is_boundary(step, sched.checkpoint_interval, last) {
            let mut ckpt = Archive::new();
            ckpt.merge_prefixed("generator", &g_store.to_archive()?)?;
            ckpt.merge_prefixed("discriminator", &d_store.to_archive()?)?;
            ckpt.merge_prefixed("adam_g", &adam_g.to_archive()?)?;
            ckpt.merge_prefixed("adam_d", &adam_d.to_archive()?)?;
            let model = g_store.to_archive()?;
            summary = Some(finish_save(
                out,
                phase,
                cfg,
                step,
                Some(codec.digest.clone()),
                vec![adam_g.step_count(), adam_d.step_count()],
                &ckpt,
                &model,
            )?);
        }
    }
    resumed_summary(out, phase, summary)
}

/// One desk-run milestone and the evidence behind its verdict.
#[derive(Debug, Clone, PartialEq)]
pub struct Milestone {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

const DESK_CODEC_STEPS: u64 = 20_000;
const DESK_GENERATOR_STEPS: u64 = 50_000;
const DESK_CODEC_MSE: f64 = 0.01;
const DESK_NLL_EPOCHS: usize = 10;
const DESK_NLL_FRACTION: f64 = 0.6;

fn milestone(name: &'static str, r: Result<String>) -> Milestone {
    match r {
        Ok(detail) => Milestone {
            name,
            passed: true,
            detail,
        },
        Err(e) => Milestone {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn fail(msg: String) -> Error {
    Error::Untrained(msg)
}

fn reached(dir: &Path, steps: u64) -> Result<()> {
    let m = CheckpointManifest::load(dir).map_err(|_| fail(format!("no checkpoint in {}", dir.display())))?;
    if m.step < steps {
        return Err(fail(format!("{} stopped at step {} of {steps}", dir.display(), m.step)));
    }
    Ok(())
}

/// Evaluates the desk milestones from the logs of `root/{vqvae,structure,texture}`.
pub fn check_desk_milestones(root: &Path) -> Vec<Milestone> {
    let vq = root.join(Phase::Vqvae.name());
    let st = root.join(Phase::Structure.name());
    let tx = root.join(Phase::Texture.name());
    vec![
        milestone("codec validation MSE <= 0.01 at 20k steps", (|| {
            reached(&vq, DESK_CODEC_STEPS)?;
            let (_, rows) = read_csv(&vq.join(EVAL_LOG))?;
            let row = rows
                .iter()
                .find(|r| r[0] as u64 == DESK_CODEC_STEPS)
                .ok_or_else(|| fail("no evaluation at step 20000".into()))?;
            if row[1] <= DESK_CODEC_MSE {
                Ok(format!("validation MSE {:.5}", row[1]))
            } else {
                Err(fail(format!("validation MSE {:.5} > {DESK_CODEC_MSE}", row[1])))
            }
        })()),
        milestone("structure epoch-mean NLL strictly decreasing over 10 epochs", (|| {
            let (_, rows) = read_csv(&st.join(EPOCH_LOG))?;
            if rows.len() < DESK_NLL_EPOCHS {
                return Err(fail(format!("only {} epochs logged", rows.len())));
            }
            let means: Vec<f64> = rows[..DESK_NLL_EPOCHS].iter().map(|r| r[2]).collect();
            if means.windows(2).all(|w| w[1] < w[0]) {
                Ok(format!("epoch means {means:.4?}"))
            } else {
                Err(fail(format!("not strictly decreasing: {means:.4?}")))
            }
        })()),
        milestone("structure NLL below 60% of ln K by 50k steps", (|| {
            reached(&st, DESK_GENERATOR_STEPS)?;
            let cfg = RunConfig::load(&st.join(CONFIG_FILE))?;
            let bound = DESK_NLL_FRACTION * (cfg.codec.codebook_size as f64).ln();
            let (_, rows) = read_csv(&st.join(EPOCH_LOG))?;
            let last = rows
                .iter()
                .filter(|r| r[0] as u64 <= DESK_GENERATOR_STEPS)
                .last()
                .ok_or_else(|| fail("no epochs logged".into()))?;
            if last[2] < bound {
                Ok(format!("epoch-mean NLL {:.4} < {bound:.4}", last[2]))
            } else {
                Err(fail(format!("epoch-mean NLL {:.4} >= {bound:.4}", last[2])))
            }
        })()),
        milestone("texture completes 50k steps with finite losses", (|| {
            reached(&tx, DESK_GENERATOR_STEPS)?;
            let (_, rows) = read_csv(&tx.join(TRAIN_LOG))?;
            if rows.len() < DESK_GENERATOR_STEPS as usize {
                return Err(fail(format!("{} logged steps", rows.len())));
            }
            match rows.iter().find(|r| r.iter().any(|v| !v.is_finite())) {
                Some(r) => Err(fail(format!("non-finite loss at step {}", r[0]))),
                None => Ok(format!("{} finite steps", rows.len())),
            }
        })()),
        milestone("texture composites keep every known pixel", (|| {
            let checked = check_emitted_composites(&tx)?;
            if checked == 0 {
                return Err(fail("no composites emitted".into()));
            }
            Ok(format!("{checked} composites exact on known pixels"))
        })()),
    ]
}

/// Verifies every emitted composite against its ground truth and mask; returns how many were checked.
pub fn check_emitted_composites(run: &Path) -> Result<usize> {
    let root = run.join(SAMPLES_DIR);
    let mut checked = 0;
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&root)
        .map_err(|e| Error::io(&root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    dirs.sort();
    for dir in dirs {
        for i in 0.. {
            let c = dir.join(format!("{i}_composite.png"));
            if !c.exists() {
                break;
            }
            let comp = ImageGrid::load_rgb(&c)?;
            let gt = ImageGrid::load_rgb(dir.join(format!("{i}_ground_truth.png")))?;
            let mask = Mask::load_png(dir.join(format!("{i}_mask.png")))?;
            for y in 0..gt.height() {
                for x in 0..gt.width() {
                    if mask.is_missing(y, x) {
                        continue;
                    }
                    for ch in 0..3 {
                        if comp.get(y, x, ch) != gt.get(y, x, ch) {
                            return Err(fail(format!("{} changes known pixel ({y}, {x})", c.display())));
                        }
                    }
                }
            }
            checked += 1;
        }
    }
    Ok(checked)
}
