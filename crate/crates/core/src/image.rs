//! Image and mask grids, tensor conversion and PNG I/O.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{contract, Error, Result};

/// `H×W×C` image with values nominally in `[0, 1]`, stored row-major, channels last.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            contract!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            );
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn clamped(&self) -> Self {
        Self {
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    pub fn flipped_horizontally(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(y, x, c, self.get(y, self.width - 1 - x, c));
                }
            }
        }
        out
    }

    /// `(1, C, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Self::batch_to_tensor(std::slice::from_ref(self), dtype)
    }

    /// `(B, C, H, W)` tensor from equally sized images.
    pub fn batch_to_tensor(images: &[ImageGrid], dtype: DType) -> Result<Tensor> {
        let Some(first) = images.first() else {
            contract!("cannot batch zero images");
        };
        let (h, w, c) = (first.height, first.width, first.channels);
        let mut buf = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if !img.same_shape(first) {
                contract!("batched images must share a shape");
            }
            for ch in 0..c {
                for p in 0..h * w {
                    buf.push(img.data[p * c + ch]);
                }
            }
        }
        Ok(Tensor::from_vec(buf, (images.len(), c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Splits a `(B, C, H, W)` tensor into images.
    pub fn from_batch_tensor(t: &Tensor) -> Result<Vec<ImageGrid>> {
        let (b, c, h, w) = t.dims4()?;
        let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Ok((0..b)
            .map(|bi| {
                let mut data = vec![0.0; h * w * c];
                for ch in 0..c {
                    for p in 0..h * w {
                        data[p * c + ch] = flat[(bi * c + ch) * h * w + p];
                    }
                }
                ImageGrid {
                    height: h,
                    width: w,
                    channels: c,
                    data,
                }
            })
            .collect())
    }

    /// Clamps to `[0, 1]` and writes an 8-bit PNG (RGB or grayscale).
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => image::GrayImage::from_raw(w, h, bytes)
                .expect("buffer size checked at construction")
                .save(path.as_ref())?,
            3 => image::RgbImage::from_raw(w, h, bytes)
                .expect("buffer size checked at construction")
                .save(path.as_ref())?,
            c => contract!("cannot write a {c}-channel image as PNG"),
        }
        Ok(())
    }

    /// Loads any image file as RGB in `[0, 1]`.
    pub fn load_rgb(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        Self {
            height: h as usize,
            width: w as usize,
            channels: 3,
            data: img.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    pub fn to_rgb8(&self) -> Result<image::RgbImage> {
        if self.channels != 3 {
            contract!("expected an RGB image");
        }
        let bytes = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Ok(image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer size checked at construction"))
    }
}

/// Binary hole mask, `1` = missing pixel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            contract!("mask {height}x{width} needs {} values", height * width);
        }
        if data.iter().any(|&v| v > 1) {
            contract!("mask values must be 0 or 1");
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn is_missing(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    #[inline]
    pub fn set_missing(&mut self, y: usize, x: usize) {
        self.data[y * self.width + x] = 1;
    }

    pub fn missing_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn hole_fraction(&self) -> f64 {
        self.missing_count() as f64 / self.data.len() as f64
    }

    /// At least one pixel is missing and at least one is known.
    pub fn is_usable(&self) -> bool {
        let n = self.missing_count();
        n > 0 && n < self.data.len()
    }

    pub fn union(&mut self, other: &Mask) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a |= *b;
        }
    }

    pub fn flipped_horizontally(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.data[y * self.width + x] = self.data[y * self.width + self.width - 1 - x];
            }
        }
        out
    }

    /// `(1, 1, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Self::batch_to_tensor(std::slice::from_ref(self), dtype)
    }

    pub fn batch_to_tensor(masks: &[Mask], dtype: DType) -> Result<Tensor> {
        let Some(first) = masks.first() else {
            contract!("cannot batch zero masks");
        };
        let mut buf = Vec::with_capacity(masks.len() * first.data.len());
        for m in masks {
            if m.height != first.height || m.width != first.width {
                contract!("batched masks must share a shape");
            }
            buf.extend(m.data.iter().map(|&v| v as f32));
        }
        Ok(
            Tensor::from_vec(buf, (masks.len(), 1, first.height, first.width), &Device::Cpu)?
                .to_dtype(dtype)?,
        )
    }

    /// Writes a 1-bit grayscale PNG, white = missing.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(
            std::io::BufWriter::new(file),
            self.width as u32,
            self.height as u32,
        );
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        let row_bytes = self.width.div_ceil(8);
        let mut packed = vec![0u8; row_bytes * self.height];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.is_missing(y, x) {
                    packed[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
                }
            }
        }
        let encode_err = |e: png::EncodingError| {
            Error::io(path, std::io::Error::new(std::io::ErrorKind::Other, e))
        };
        let mut writer = enc.write_header().map_err(encode_err)?;
        writer.write_image_data(&packed).map_err(encode_err)?;
        writer.finish().map_err(encode_err)?;
        Ok(())
    }

    /// Loads a mask image; pixels brighter than mid-gray are missing.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_luma8();
        let (w, h) = img.dimensions();
        Ok(Self {
            height: h as usize,
            width: w as usize,
            data: img.as_raw().iter().map(|&v| u8::from(v >= 128)).collect(),
        })
    }
}
