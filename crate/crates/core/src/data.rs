//! Masks, the procedural shapes corpus and image-folder datasets.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{contract, Error, Result};
use crate::image::{ImageGrid, Mask};

/// Derives an independent stream seed from a base seed and a tag.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

/// `H/2 × W/2` hole in the middle of the image.
pub fn make_center_mask(height: usize, width: usize) -> Mask {
    let mut m = Mask::empty(height, width);
    let (y0, x0) = (height / 4, width / 4);
    for y in y0..y0 + height / 2 {
        for x in x0..x0 + width / 2 {
            m.set_missing(y, x);
        }
    }
    m
}

/// Parameters of the free-form mask generator; fractions are of the image side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomMaskConfig {
    pub rectangles: (usize, usize),
    pub rectangle_side: (f64, f64),
    pub strokes: (usize, usize),
    pub stroke_vertices: (usize, usize),
    pub stroke_width: (f64, f64),
    pub stroke_step: (f64, f64),
    pub hole_fraction: (f64, f64),
    pub max_attempts: usize,
}

impl Default for RandomMaskConfig {
    fn default() -> Self {
        Self {
            rectangles: (1, 3),
            rectangle_side: (0.25, 0.5),
            strokes: (1, 4),
            stroke_vertices: (4, 12),
            stroke_width: (0.05, 0.15),
            stroke_step: (0.1, 0.3),
            hole_fraction: (0.1, 0.6),
            max_attempts: 100,
        }
    }
}

impl RandomMaskConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |(a, b): (f64, f64)| a <= b && a >= 0.0;
        let ok = self.rectangles.0 <= self.rectangles.1
            && self.strokes.0 <= self.strokes.1
            && self.rectangles.1 + self.strokes.1 > 0
            && self.stroke_vertices.0 >= 2
            && self.stroke_vertices.0 <= self.stroke_vertices.1
            && ordered(self.rectangle_side)
            && ordered(self.stroke_width)
            && ordered(self.stroke_step)
            && ordered(self.hole_fraction)
            && self.hole_fraction.1 <= 1.0
            && self.max_attempts > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("mask: inconsistent random mask ranges".into()))
        }
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn count(rng: &mut impl Rng, (lo, hi): (usize, usize)) -> usize {
    rng.random_range(lo..=hi)
}

fn draw_segment(m: &mut Mask, (ax, ay): (f64, f64), (bx, by): (f64, f64), radius: f64) {
    let (h, w) = (m.height() as f64, m.width() as f64);
    let x0 = (ax.min(bx) - radius).floor().max(0.0) as usize;
    let x1 = (ax.max(bx) + radius).ceil().min(w - 1.0) as usize;
    let y0 = (ay.min(by) - radius).floor().max(0.0) as usize;
    let y1 = (ay.max(by) + radius).ceil().min(h - 1.0) as usize;
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = if len2 > 0.0 {
                (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (cx, cy) = (ax + t * dx - px, ay + t * dy - py);
            if cx * cx + cy * cy <= radius * radius {
                m.set_missing(y, x);
            }
        }
    }
}

fn random_mask_attempt(height: usize, width: usize, cfg: &RandomMaskConfig, rng: &mut impl Rng) -> Mask {
    let mut m = Mask::empty(height, width);
    let (h, w) = (height as f64, width as f64);
    let side = h.min(w);
    let rects = count(rng, cfg.rectangles);
    let mut strokes = count(rng, cfg.strokes);
    if rects + strokes == 0 {
        strokes = 1;
    }
    for _ in 0..rects {
        let rh = ((uniform(rng, cfg.rectangle_side) * h).round() as usize).clamp(1, height);
        let rw = ((uniform(rng, cfg.rectangle_side) * w).round() as usize).clamp(1, width);
        let y0 = rng.random_range(0..=height - rh);
        let x0 = rng.random_range(0..=width - rw);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                m.set_missing(y, x);
            }
        }
    }
    for _ in 0..strokes {
        let vertices = count(rng, cfg.stroke_vertices);
        let radius = (uniform(rng, cfg.stroke_width) * side / 2.0).max(0.5);
        let mut p = (rng.random_range(0.0..w), rng.random_range(0.0..h));
        let mut angle = rng.random_range(0.0..std::f64::consts::TAU);
        for _ in 1..vertices {
            angle += rng.random_range(-1.5..1.5);
            let step = uniform(rng, cfg.stroke_step) * side;
            let q = (
                (p.0 + step * angle.cos()).clamp(0.0, w),
                (p.1 + step * angle.sin()).clamp(0.0, h),
            );
            draw_segment(&mut m, p, q, radius);
            p = q;
        }
    }
    m
}

/// Union of random rectangles and brush strokes, regenerated until its hole
/// fraction falls inside the configured band.
pub fn make_random_mask_with(height: usize, width: usize, seed: u64, cfg: &RandomMaskConfig) -> Result<Mask> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cfg.max_attempts {
        let m = random_mask_attempt(height, width, cfg, &mut rng);
        let f = m.hole_fraction();
        if f >= cfg.hole_fraction.0 && f <= cfg.hole_fraction.1 && m.is_usable() {
            return Ok(m);
        }
    }
    Ok(make_center_mask(height, width))
}

pub fn make_random_mask(height: usize, width: usize, seed: u64) -> Mask {
    make_random_mask_with(height, width, seed, &RandomMaskConfig::default())
        .expect("default mask configuration is valid")
}

/// `(1−M)·I + M·fill`.
pub fn apply_mask(image: &ImageGrid, mask: &Mask, fill: f32) -> Result<ImageGrid> {
    if image.height() != mask.height() || image.width() != mask.width() {
        contract!("mask {}x{} does not match image {}x{}", mask.height(), mask.width(), image.height(), image.width());
    }
    let mut out = image.clone();
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.is_missing(y, x) {
                for c in 0..image.channels() {
                    out.set(y, x, c, fill);
                }
            }
        }
    }
    Ok(out)
}

fn random_color(rng: &mut impl Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// One procedural image: a sinusoid-and-noise background with 2–5 shapes.
pub fn synthesize_shape_image(size: usize, seed: u64) -> ImageGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = ImageGrid::filled(size, size, 3, 0.0);
    let s = size as f64;
    let (c0, c1) = (random_color(&mut rng), random_color(&mut rng));
    let freq = rng.random_range(2.0..10.0) * std::f64::consts::TAU / s;
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (fx, fy) = (freq * theta.cos(), freq * theta.sin());
    let grain: f32 = rng.random_range(0.02..0.08);
    for y in 0..size {
        for x in 0..size {
            let t = (0.5 + 0.5 * (fx * x as f64 + fy * y as f64 + phase).sin()) as f32;
            let n: f32 = rng.random_range(-1.0..1.0) * grain;
            for c in 0..3 {
                img.set(y, x, c, (c0[c] * (1.0 - t) + c1[c] * t + n).clamp(0.0, 1.0));
            }
        }
    }
    let shapes = rng.random_range(2..=5);
    for _ in 0..shapes {
        let color = random_color(&mut rng);
        let kind = rng.random_range(0..3);
        let cx = rng.random_range(0.15..0.85) * s;
        let cy = rng.random_range(0.15..0.85) * s;
        let rx = rng.random_range(0.08..0.3) * s;
        let ry = rng.random_range(0.08..0.3) * s;
        let tri = [
            (cx, cy - ry),
            (cx - rx, cy + ry),
            (cx + rx * rng.random_range(0.3..1.0), cy + ry * rng.random_range(0.2..1.0)),
        ];
        let inside = |px: f64, py: f64| -> bool {
            match kind {
                0 => (px - cx).abs() <= rx && (py - cy).abs() <= ry,
                1 => ((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2) <= 1.0,
                _ => {
                    let edge = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| (bx - ax) * (py - ay) - (by - ay) * (px - ax);
                    let (e0, e1, e2) = (edge(tri[0], tri[1]), edge(tri[1], tri[2]), edge(tri[2], tri[0]));
                    (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
                }
            }
        };
        for y in 0..size {
            for x in 0..size {
                if inside(x as f64 + 0.5, y as f64 + 0.5) {
                    for c in 0..3 {
                        img.set(y, x, c, color[c]);
                    }
                }
            }
        }
    }
    img
}

/// `n` procedural images; image `i` depends only on `(seed, i)`.
pub fn synthesize_shapes(n: usize, size: usize, seed: u64) -> Vec<ImageGrid> {
    (0..n)
        .map(|i| synthesize_shape_image(size, derive_seed(seed, "shape", i as u64)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    SyntheticShapes { count: usize, seed: u64 },
    ImageFolder { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropPolicy {
    /// Resize the whole image to the target size.
    Resize,
    /// Random square crop at batch time (shorter side first scaled up if needed).
    RandomCrop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub image_size: usize,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    pub horizontal_flip: bool,
    pub crop: CropPolicy,
}

impl DatasetSpec {
    pub fn synthetic(count: usize, image_size: usize, seed: u64) -> Self {
        Self {
            source: DataSource::SyntheticShapes { count, seed },
            image_size,
            validation_fraction: 0.05,
            test_fraction: 0.05,
            horizontal_flip: true,
            crop: CropPolicy::Resize,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (v, t) = (self.validation_fraction, self.test_fraction);
        if v < 0.0 || t < 0.0 || v + t >= 1.0 {
            return Err(Error::Config("data: split fractions must be non-negative and sum below 1".into()));
        }
        if self.image_size == 0 {
            return Err(Error::Config("data: image_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        }
    }
}

/// Split from the first 8 bytes of a content hash.
pub fn split_for_hash(hash: &[u8; 32], validation_fraction: f64, test_fraction: f64) -> Split {
    let u = u64::from_be_bytes(hash[..8].try_into().expect("hash has 32 bytes")) as f64 / 2f64.powi(64);
    if u < test_fraction {
        Split::Test
    } else if u < test_fraction + validation_fraction {
        Split::Validation
    } else {
        Split::Train
    }
}

fn content_hash(img: &ImageGrid) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(format!("{}x{}x{}", img.height(), img.width(), img.channels()).as_bytes());
    for v in img.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub source: String,
    pub hash: String,
    pub split: Split,
    pub image: ImageGrid,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    spec: DatasetSpec,
    items: Vec<DatasetItem>,
}

fn resize(img: &image::RgbImage, w: u32, h: u32) -> image::RgbImage {
    image::imageops::resize(img, w, h, image::imageops::FilterType::Triangle)
}

impl Dataset {
    pub fn load(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let raw: Vec<(String, ImageGrid)> = match &spec.source {
            DataSource::SyntheticShapes { count, seed } => synthesize_shapes(*count, spec.image_size, *seed)
                .into_iter()
                .enumerate()
                .map(|(i, img)| (format!("synthetic:{i}"), img))
                .collect(),
            DataSource::ImageFolder { path } => Self::read_folder(path, spec)?,
        };
        if raw.is_empty() {
            contract!("dataset is empty");
        }
        let items = raw
            .into_iter()
            .map(|(source, image)| {
                let hash = content_hash(&image);
                DatasetItem {
                    source,
                    hash: hex::encode(hash),
                    split: split_for_hash(&hash, spec.validation_fraction, spec.test_fraction),
                    image,
                }
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            items,
        })
    }

    fn read_folder(root: &Path, spec: &DatasetSpec) -> Result<Vec<(String, ImageGrid)>> {
        let mut paths: Vec<PathBuf> = walkdir::WalkDir::new(root)
            .sort_by_file_name()
            .into_iter()
            .filter_map(|e| e.ok())
            .map(|e| e.into_path())
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        let size = spec.image_size as u32;
        paths
            .into_iter()
            .map(|p| {
                let rgb = image::open(&p)?.to_rgb8();
                let rgb = match spec.crop {
                    CropPolicy::Resize => resize(&rgb, size, size),
                    CropPolicy::RandomCrop => {
                        let short = rgb.width().min(rgb.height());
                        if short < size {
                            let scale = size as f64 / short as f64;
                            let w = ((rgb.width() as f64 * scale).round() as u32).max(size);
                            let h = ((rgb.height() as f64 * scale).round() as u32).max(size);
                            resize(&rgb, w, h)
                        } else {
                            rgb
                        }
                    }
                };
                let rel = p.strip_prefix(root).unwrap_or(&p).display().to_string();
                Ok((rel, ImageGrid::from_rgb8(&rgb)))
            })
            .collect()
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn items(&self) -> &[DatasetItem] {
        &self.items
    }

    pub fn split(&self, split: Split) -> Vec<&DatasetItem> {
        self.items.iter().filter(|i| i.split == split).collect()
    }

    /// `path\tsplit\thash` lines.
    pub fn manifest(&self) -> String {
        self.items
            .iter()
            .map(|i| format!("{}\t{}\t{}\n", i.source, i.split.name(), i.hash))
            .collect()
    }

    /// Fixed-size view of an item: stored data when already sized, else a random crop.
    fn crop(&self, img: &ImageGrid, rng: &mut impl Rng) -> ImageGrid {
        let s = self.spec.image_size;
        if img.height() == s && img.width() == s {
            return img.clone();
        }
        let y0 = rng.random_range(0..=img.height() - s);
        let x0 = rng.random_range(0..=img.width() - s);
        let mut out = ImageGrid::filled(s, s, img.channels(), 0.0);
        for y in 0..s {
            for x in 0..s {
                for c in 0..img.channels() {
                    out.set(y, x, c, img.get(y0 + y, x0 + x, c));
                }
            }
        }
        out
    }

    /// Random batch from one split with crop and flip augmentation.
    pub fn sample_batch(&self, split: Split, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<ImageGrid>> {
        let pool = self.split(split);
        if pool.is_empty() {
            contract!("the {} split is empty", split.name());
        }
        Ok((0..batch_size)
            .map(|_| {
                let item = pool[rng.random_range(0..pool.len())];
                let img = self.crop(&item.image, rng);
                if self.spec.horizontal_flip && rng.random::<bool>() {
                    img.flipped_horizontally()
                } else {
                    img
                }
            })
            .collect())
    }

    /// Deterministic, unaugmented images of a split (center crop when larger).
    pub fn images(&self, split: Split) -> Vec<ImageGrid> {
        let s = self.spec.image_size;
        self.split(split)
            .into_iter()
            .map(|i| {
                let img = &i.image;
                if img.height() == s && img.width() == s {
                    img.clone()
                } else {
                    let (y0, x0) = ((img.height() - s) / 2, (img.width() - s) / 2);
                    let mut out = ImageGrid::filled(s, s, img.channels(), 0.0);
                    for y in 0..s {
                        for x in 0..s {
                            for c in 0..img.channels() {
                                out.set(y, x, c, img.get(y0 + y, x0 + x, c));
                            }
                        }
                    }
                    out
                }
            })
            .collect()
    }
}

/// How masks are chosen for a batch or an evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MaskSpec {
    Center,
    Random(u64),
    File(PathBuf),
}

impl MaskSpec {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "center" {
            return Ok(Self::Center);
        }
        if let Some(seed) = s.strip_prefix("random:") {
            return seed
                .parse()
                .map(Self::Random)
                .map_err(|_| Error::Config(format!("bad mask seed in {s:?}")));
        }
        if let Some(path) = s.strip_prefix("file:") {
            if path.is_empty() {
                return Err(Error::Config("file: mask needs a path".into()));
            }
            return Ok(Self::File(PathBuf::from(path)));
        }
        Err(Error::Config(format!(
            "mask spec must be center, random:<seed> or file:<path>, got {s:?}"
        )))
    }

    /// The mask for item `index`; random masks draw an independent seed per item.
    pub fn mask(&self, height: usize, width: usize, index: u64) -> Result<Mask> {
        let m = match self {
            Self::Center => make_center_mask(height, width),
            Self::Random(seed) => make_random_mask(height, width, derive_seed(*seed, "mask", index)),
            Self::File(p) => {
                let m = Mask::load_png(p)?;
                if m.height() != height || m.width() != width {
                    contract!("mask {} is {}x{}, expected {height}x{width}", p.display(), m.height(), m.width());
                }
                m
            }
        };
        Ok(m)
    }
}

impl std::fmt::Display for MaskSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Center => write!(f, "center"),
            Self::Random(s) => write!(f, "random:{s}"),
            Self::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}
