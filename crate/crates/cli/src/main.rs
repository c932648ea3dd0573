use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use dsinpaint::codec::LatentIndexGrid;
use dsinpaint::config::{Preset, RunConfig};
use dsinpaint::data::{synthesize_shapes, Dataset, MaskSpec, Split};
use dsinpaint::image::ImageGrid;
use dsinpaint::pipeline::{contact_sheet, latent_views, masked_view, Inpainter, SampleOptions};
use dsinpaint::training::{self, Phase, TrainOptions, CONFIG_FILE};
use dsinpaint::Error;

#[derive(Parser)]
#[command(name = "dsinpaint", version, about = "Diverse image inpainting: train, sample and evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Base preset the config file and overrides apply to: desk, paper or smoke.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// TOML file merged over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override such as `train.vqvae.total_steps=100` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn is_default(&self) -> bool {
        self.preset == "desk" && self.config.is_none() && self.set.is_empty() && self.seed.is_none()
    }

    fn resolve(&self) -> Result<RunConfig, Error> {
        let preset: Preset = self.preset.parse()?;
        let mut overrides = self.set.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        RunConfig::resolve(preset, self.config.as_deref(), &overrides)
    }
}

#[derive(Args)]
struct ModelArgs {
    /// Run directory of a finished `train vqvae`.
    #[arg(long)]
    codec: PathBuf,
    /// Run directory of a finished `train structure`.
    #[arg(long)]
    structure: PathBuf,
    /// Run directory of a finished `train texture`.
    #[arg(long)]
    texture: PathBuf,
}

impl ModelArgs {
    fn load(&self) -> Result<Inpainter, Error> {
        Inpainter::load(&self.codec, &self.structure, &self.texture)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write procedural shape images as PNG files.
    Synth {
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one phase: vqvae first, then structure and texture in any order.
    Train {
        #[arg(value_parser = ["vqvae", "structure", "texture"])]
        phase: String,
        #[command(flatten)]
        config: ConfigArgs,
        /// Codec run directory (structure and texture phases).
        #[arg(long)]
        codec: Option<PathBuf>,
        /// Continue the run in this directory with its echoed configuration.
        #[arg(long, conflicts_with = "out")]
        resume: Option<PathBuf>,
        /// Stop after this step (a checkpoint is written).
        #[arg(long)]
        stop_at: Option<u64>,
        /// Run directory; defaults to `runs/<phase>-<timestamp>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inpaint one image with k sampled structures.
    Sample {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        models: ModelArgs,
        /// Input PNG at the model resolution; defaults to a test-split image.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Test-split index used when no image is given.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// `center`, `random:<seed>` or `file:<path>`.
        #[arg(long)]
        mask: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
        /// Also write per-cell entropy maps of the sampled structures.
        #[arg(long)]
        entropy_map: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score the test split: PSNR, SSIM and structural diversity.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        mask: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode each latent level of an image alone with a trained codec.
    Visualize {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn run_dir(kind: &str, out: Option<PathBuf>) -> PathBuf {
    if let Some(p) = out {
        return p;
    }
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let base = PathBuf::from("runs").join(format!("{kind}-{secs}"));
    let mut dir = base.clone();
    let mut n = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{n}", base.display()));
        n += 1;
    }
    dir
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("creating {}: {e}", dir.display())))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("writing {}: {e}", path.display())))
}

/// Input image from a file or from the test split of the configured dataset.
fn input_image(cfg: &RunConfig, image: Option<&Path>, index: usize) -> Result<(String, ImageGrid), Failure> {
    if let Some(p) = image {
        return Ok((p.display().to_string(), ImageGrid::load_rgb(p)?));
    }
    let data = Dataset::load(&cfg.data)?;
    let names: Vec<String> = data.split(Split::Test).iter().map(|i| i.source.clone()).collect();
    let images = data.images(Split::Test);
    match images.into_iter().nth(index) {
        Some(img) => Ok((names[index].clone(), img)),
        None => Err(Failure::Usage(format!("test split has {} images, index {index} requested", names.len()))),
    }
}

fn apply_sample_flags(cfg: &mut RunConfig, mask: Option<String>, k: Option<usize>, temperature: Option<f64>) -> Result<(), Failure> {
    if let Some(m) = mask {
        cfg.sample.mask = m;
    }
    if let Some(k) = k {
        cfg.sample.k = k;
    }
    if let Some(t) = temperature {
        cfg.sample.temperature = t;
    }
    cfg.validate()?;
    Ok(())
}

fn train(
    phase: &str,
    config: ConfigArgs,
    codec: Option<PathBuf>,
    resume: Option<PathBuf>,
    stop_at: Option<u64>,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let phase: Phase = phase.parse()?;
    let (cfg, dir, resume) = match resume {
        Some(dir) => {
            if !config.is_default() {
                return Err(Failure::Usage("--resume uses the run's echoed configuration; drop --preset, --config, --set and --seed".into()));
            }
            (RunConfig::load(&dir.join(CONFIG_FILE))?, dir, true)
        }
        None => (config.resolve()?, run_dir(phase.name(), out), false),
    };
    let opts = TrainOptions { resume, stop_at };
    let summary = training::run_phase(phase, &cfg, codec.as_deref(), &dir, &opts)?;
    println!("{} phase stopped at step {} in {}", summary.phase, summary.step, dir.display());
    println!("model digest {}", summary.model_digest);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sample(
    config: ConfigArgs,
    models: ModelArgs,
    image: Option<PathBuf>,
    index: usize,
    mask: Option<String>,
    k: Option<usize>,
    temperature: Option<f64>,
    entropy_map: bool,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let mut cfg = config.resolve()?;
    apply_sample_flags(&mut cfg, mask, k, temperature)?;
    cfg.sample.entropy_map |= entropy_map;
    let model = models.load()?;
    let (name, img) = input_image(&cfg, image.as_deref(), index)?;
    let s = model.image_size();
    let mask = MaskSpec::parse(&cfg.sample.mask)?.mask(s, s, 0)?;
    let opts = SampleOptions {
        k: cfg.sample.k,
        temperature: cfg.sample.temperature,
        seed: cfg.seed,
        entropy_map: cfg.sample.entropy_map,
    };
    let result = model.inpaint(&img, &mask, &opts)?;
    let dir = run_dir("sample", out);
    create_dir(&dir)?;
    write(&dir.join(CONFIG_FILE), &cfg.to_toml())?;
    img.save_png(dir.join("input.png"))?;
    mask.save_png(dir.join("mask.png"))?;
    let masked = masked_view(&img, &mask)?;
    masked.save_png(dir.join("masked.png"))?;
    let mut grids = String::new();
    for (i, c) in result.composites.iter().enumerate() {
        c.save_png(dir.join(format!("sample_{i:02}_composite.png")))?;
        result.structure_views[i].save_png(dir.join(format!("sample_{i:02}_structure.png")))?;
        grids.push_str(&grid_line(&result.structures[i]));
    }
    if let Some(maps) = &result.entropy {
        for (i, m) in maps.iter().enumerate() {
            m.to_image().save_png(dir.join(format!("sample_{i:02}_entropy.png")))?;
        }
    }
    write(&dir.join("structures.txt"), &grids)?;
    let mut row = vec![masked];
    row.extend(result.composites.iter().cloned());
    contact_sheet(&row)?.save_png(dir.join("sheet.png"))?;
    println!("{} samples for {name} written to {}", result.composites.len(), dir.display());
    Ok(())
}

fn grid_line(g: &LatentIndexGrid) -> String {
    let v: Vec<String> = g.indices().iter().map(u32::to_string).collect();
    format!("{}\n", v.join(" "))
}

fn eval(
    config: ConfigArgs,
    models: ModelArgs,
    mask: Option<String>,
    k: Option<usize>,
    temperature: Option<f64>,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let mut cfg = config.resolve()?;
    apply_sample_flags(&mut cfg, mask, k, temperature)?;
    let model = models.load()?;
    let data = Dataset::load(&cfg.data)?;
    let mut images: Vec<(String, ImageGrid)> = data
        .split(Split::Test)
        .iter()
        .map(|i| i.source.clone())
        .zip(data.images(Split::Test))
        .collect();
    if cfg.sample.eval_images > 0 {
        images.truncate(cfg.sample.eval_images);
    }
    if images.is_empty() {
        return Err(Failure::Usage("the test split is empty".into()));
    }
    let masks = MaskSpec::parse(&cfg.sample.mask)?;
    let report = model.evaluate(&images, &masks, cfg.sample.k, cfg.sample.temperature, cfg.seed)?;
    let dir = run_dir("eval", out);
    create_dir(&dir)?;
    write(&dir.join(CONFIG_FILE), &cfg.to_toml())?;
    write(&dir.join("eval.csv"), &report.to_csv())?;
    let summary = report.summary();
    write(&dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    println!("report written to {}", dir.display());
    Ok(())
}

fn visualize(config: ConfigArgs, codec: PathBuf, image: Option<PathBuf>, index: usize, out: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = config.resolve()?;
    let codec = training::load_codec(&codec)?.model;
    let (name, img) = input_image(&cfg, image.as_deref(), index)?;
    let views = latent_views(&codec, &img)?;
    let dir = run_dir("visualize", out);
    create_dir(&dir)?;
    write(&dir.join(CONFIG_FILE), &cfg.to_toml())?;
    img.save_png(dir.join("input.png"))?;
    views.reconstruction.save_png(dir.join("reconstruction.png"))?;
    views.structural.save_png(dir.join("structural.png"))?;
    views.textural.save_png(dir.join("textural.png"))?;
    println!("latent views of {name} written to {}", dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth { count, size, seed, out } => {
            if count == 0 || size == 0 {
                return Err(Failure::Usage("count and size must be positive".into()));
            }
            create_dir(&out)?;
            for (i, img) in synthesize_shapes(count, size, seed).iter().enumerate() {
                img.save_png(out.join(format!("shape_{i:05}.png")))?;
            }
            println!("{count} images written to {}", out.display());
            Ok(())
        }
        Command::Train { phase, config, codec, resume, stop_at, out } => train(&phase, config, codec, resume, stop_at, out),
        Command::Sample { config, models, image, index, mask, k, temperature, entropy_map, out } => {
            sample(config, models, image, index, mask, k, temperature, entropy_map, out)
        }
        Command::Eval { config, models, mask, k, temperature, out } => eval(config, models, mask, k, temperature, out),
        Command::Visualize { config, codec, image, index, out } => visualize(config, codec, image, index, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
