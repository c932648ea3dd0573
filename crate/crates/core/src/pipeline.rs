//! Inference: sample structures with the structure network, render each with the
//! texture generator and composite onto the known pixels.

use std::path::Path;

use candle_core::DType;

use crate::archive::Archive;
use crate::codec::{LatentIndexGrid, LatentLevel, VqVae};
use crate::config::RunConfig;
use crate::data::{derive_seed, MaskSpec};
use crate::error::{contract, Error, Result};
use crate::image::{ImageGrid, Mask};
use crate::metrics::{EvalReport, ImageEval};
use crate::nn::ParamStore;
use crate::structure::{EntropyMap, StructureNet};
use crate::texture::{composite_grid, TextureGenerator};
use crate::training::{self, CheckpointManifest, Phase, CONFIG_FILE, MODEL_ARCHIVE};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    pub k: usize,
    /// 0 selects greedy decoding; every sample is then the same.
    pub temperature: f64,
    pub seed: u64,
    pub entropy_map: bool,
}

/// `k` solutions for one masked image.
#[derive(Debug, Clone)]
pub struct Inpainting {
    pub structures: Vec<LatentIndexGrid>,
    /// Raw generator outputs before compositing.
    pub outputs: Vec<ImageGrid>,
    pub composites: Vec<ImageGrid>,
    /// Each sampled structure decoded alone by the codec.
    pub structure_views: Vec<ImageGrid>,
    pub entropy: Option<Vec<EntropyMap>>,
}

/// The three trained components; the codec is used only for its codebook and visualizations.
pub struct Inpainter {
    codec: VqVae,
    structure: StructureNet,
    texture: TextureGenerator,
}

fn generator_run(dir: &Path, phase: Phase, codec_digest: &str) -> Result<(RunConfig, Archive)> {
    let missing = |detail: String| Error::MissingCheckpoint {
        phase: phase.name().into(),
        detail,
    };
    if !dir.join(MODEL_ARCHIVE).is_file() || !dir.join(CONFIG_FILE).is_file() {
        return Err(missing(format!("{} has no trained {phase} model", dir.display())));
    }
    let manifest = CheckpointManifest::load(dir)?;
    if manifest.phase != phase.name() {
        return Err(missing(format!("{} holds a {} run", dir.display(), manifest.phase)));
    }
    if manifest.codec_digest.as_deref() != Some(codec_digest) {
        return Err(Error::Config(format!(
            "{} was trained against a different codec",
            dir.display()
        )));
    }
    Ok((RunConfig::load(&dir.join(CONFIG_FILE))?, Archive::load(dir.join(MODEL_ARCHIVE))?))
}

impl Inpainter {
    /// Loads the three run directories, checking that both generators share the codec.
    pub fn load(codec_dir: &Path, structure_dir: &Path, texture_dir: &Path) -> Result<Self> {
        let codec = training::load_codec(codec_dir)?;
        let (s_cfg, s_arch) = generator_run(structure_dir, Phase::Structure, &codec.digest)?;
        let (t_cfg, t_arch) = generator_run(texture_dir, Phase::Texture, &codec.digest)?;
        let cc = codec.model.config().clone();
        let structure = StructureNet::new(
            s_cfg.structure,
            cc.codebook_size,
            cc.image_size,
            &ParamStore::frozen(s_arch, DType::F32),
        )?;
        let texture = TextureGenerator::new(
            t_cfg.texture,
            cc.image_size,
            cc.code_dim,
            &ParamStore::frozen(t_arch, DType::F32),
        )?;
        Ok(Self::from_parts(codec.model, structure, texture))
    }

    pub fn from_parts(codec: VqVae, structure: StructureNet, texture: TextureGenerator) -> Self {
        Self {
            codec,
            structure,
            texture,
        }
    }

    pub fn image_size(&self) -> usize {
        self.codec.config().image_size
    }

    pub fn codec(&self) -> &VqVae {
        &self.codec
    }

    /// Structure grids for one masked image.
    pub fn sample_structures(&self, image: &ImageGrid, mask: &Mask, opts: &SampleOptions) -> Result<Vec<LatentIndexGrid>> {
        self.check_inputs(image, mask, opts)?;
        let cond = self.structure.condition_from_grids(std::slice::from_ref(image), std::slice::from_ref(mask))?;
        if opts.temperature == 0.0 {
            let g = self.structure.greedy_structure(&cond)?.remove(0);
            Ok(vec![g; opts.k])
        } else {
            let seeds: Vec<u64> = (0..opts.k as u64)
                .map(|i| derive_seed(opts.seed, "sample", i))
                .collect();
            self.structure.sample_structure(&cond, opts.temperature, &seeds)
        }
    }

    fn check_inputs(&self, image: &ImageGrid, mask: &Mask, opts: &SampleOptions) -> Result<()> {
        let s = self.image_size();
        if image.height() != s || image.width() != s || image.channels() != 3 {
            contract!("model works on {s}x{s} RGB images, got {}x{}x{}", image.height(), image.width(), image.channels());
        }
        if mask.height() != s || mask.width() != s {
            contract!("mask is {}x{}, image is {s}x{s}", mask.height(), mask.width());
        }
        if !mask.is_usable() {
            contract!("mask must leave some pixels known and some missing ({} of {} missing)", mask.missing_count(), s * s);
        }
        if opts.k == 0 {
            contract!("k must be positive");
        }
        if !(opts.temperature >= 0.0) || !opts.temperature.is_finite() {
            contract!("temperature must be finite and non-negative, got {}", opts.temperature);
        }
        Ok(())
    }

    /// Renders given structure grids into composites.
    pub fn render(&self, image: &ImageGrid, mask: &Mask, structures: &[LatentIndexGrid]) -> Result<(Vec<ImageGrid>, Vec<ImageGrid>)> {
        let k = structures.len();
        let idx = LatentIndexGrid::batch_to_tensor(structures)?;
        let s_bar = self.codec.structural_codebook().lookup(&idx)?;
        let x = ImageGrid::batch_to_tensor(&vec![image.clone(); k], DType::F32)?;
        let m = Mask::batch_to_tensor(&vec![mask.clone(); k], DType::F32)?;
        let outputs = ImageGrid::from_batch_tensor(&self.texture.generate(&x, &m, &s_bar)?)?;
        let composites = outputs
            .iter()
            .map(|o| composite_grid(o, image, mask))
            .collect::<Result<_>>()?;
        Ok((outputs, composites))
    }

    pub fn inpaint(&self, image: &ImageGrid, mask: &Mask, opts: &SampleOptions) -> Result<Inpainting> {
        let structures = self.sample_structures(image, mask, opts)?;
        let (outputs, composites) = self.render(image, mask, &structures)?;
        let structure_views = self.codec.visualize_latents(&structures, LatentLevel::Structural)?;
        let entropy = if opts.entropy_map {
            let cond = self
                .structure
                .condition_from_grids(std::slice::from_ref(image), std::slice::from_ref(mask))?
                .repeat(structures.len())?;
            Some(self.structure.entropy_map(&cond, &structures)?)
        } else {
            None
        };
        Ok(Inpainting {
            structures,
            outputs,
            composites,
            structure_views,
            entropy,
        })
    }

    /// `k` samples per image; `k = 1` decodes greedily. Image `i` samples with a seed derived from `(seed, i)`.
    pub fn evaluate(
        &self,
        images: &[(String, ImageGrid)],
        masks: &MaskSpec,
        k: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<EvalReport> {
        let s = self.image_size();
        let mut report = EvalReport::default();
        for (i, (name, gt)) in images.iter().enumerate() {
            let mask = masks.mask(s, s, i as u64)?;
            let opts = SampleOptions {
                k,
                temperature: if k == 1 { 0.0 } else { temperature },
                seed: derive_seed(seed, "eval", i as u64),
                entropy_map: false,
            };
            let structures = self.sample_structures(gt, &mask, &opts)?;
            let (_, composites) = self.render(gt, &mask, &structures)?;
            report
                .images
                .push(ImageEval::measure(name.clone(), gt, &mask, &structures, &composites)?);
        }
        Ok(report)
    }
}

/// Row of images side by side with a one-pixel white gutter.
pub fn contact_sheet(images: &[ImageGrid]) -> Result<ImageGrid> {
    let Some(first) = images.first() else {
        contract!("contact sheet needs at least one image");
    };
    let (h, w, c) = (first.height(), first.width(), first.channels());
    if images.iter().any(|i| i.height() != h || i.width() != w || i.channels() != c) {
        contract!("contact sheet images must share a shape");
    }
    let n = images.len();
    let total_w = n * w + n.saturating_sub(1);
    let mut sheet = ImageGrid::filled(h, total_w, c, 1.0);
    for (j, img) in images.iter().enumerate() {
        let x0 = j * (w + 1);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    sheet.set(y, x0 + x, ch, img.get(y, x, ch));
                }
            }
        }
    }
    Ok(sheet)
}

/// The input as the model sees it: known pixels kept, holes shown in mid grey.
pub fn masked_view(image: &ImageGrid, mask: &Mask) -> Result<ImageGrid> {
    crate::data::apply_mask(image, mask, 0.5)
}

/// One image seen through a trained codec.
#[derive(Debug, Clone)]
pub struct LatentViews {
    pub reconstruction: ImageGrid,
    /// Structural codes decoded with the textural level zeroed.
    pub structural: ImageGrid,
    /// Textural codes decoded with the structural level zeroed.
    pub textural: ImageGrid,
}

pub fn latent_views(codec: &VqVae, image: &ImageGrid) -> Result<LatentViews> {
    let x = ImageGrid::batch_to_tensor(std::slice::from_ref(image), DType::F32)?;
    let e = codec.encode(&x)?;
    let reconstruction = ImageGrid::from_batch_tensor(&codec.decode(&e.s_quantized, &e.t_quantized)?)?.remove(0);
    let s = LatentIndexGrid::from_batch_tensor(&e.s_indices)?;
    let t = LatentIndexGrid::from_batch_tensor(&e.t_indices)?;
    Ok(LatentViews {
        reconstruction,
        structural: codec.visualize_latents(&s, LatentLevel::Structural)?.remove(0),
        textural: codec.visualize_latents(&t, LatentLevel::Textural)?.remove(0),
    })
}
