//! Grayscale image container, tiling, resampling and pixel fidelity.
//!
//! Intensities live in `[0, 1]`. 8-bit inputs are divided by 255 on load and
//! quantized back with rounding on save.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Side length of the square window the feature extractor consumes.
pub const TILE_SIZE: usize = 224;
/// Default stride between neighbouring tiles.
pub const TILE_STRIDE: usize = 112;

#[derive(Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl fmt::Debug for GrayImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GrayImage")
            .field("height", &self.height)
            .field("width", &self.width)
            .finish_non_exhaustive()
    }
}

impl GrayImage {
    /// Builds an image from row-major data, clamping every value into `[0, 1]`.
    /// Non-finite values are rejected.
    pub fn new(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "image must be at least 1x1, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} image",
                data.len()
            )));
        }
        for v in &mut data {
            if !v.is_finite() {
                return Err(Error::Range("non-finite intensity".into()));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self::new(height, width, data)
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Bilinear sample at fractional pixel-centre coordinates, clamped at the border.
    pub fn sample(&self, row: f64, col: f64) -> f64 {
        let r = row.clamp(0.0, (self.height - 1) as f64);
        let c = col.clamp(0.0, (self.width - 1) as f64);
        let r0 = r.floor() as usize;
        let c0 = c.floor() as usize;
        let r1 = (r0 + 1).min(self.height - 1);
        let c1 = (c0 + 1).min(self.width - 1);
        let fr = r - r0 as f64;
        let fc = c - c0 as f64;
        let top = lerp(self.get(r0, c0), self.get(r0, c1), fc);
        let bottom = lerp(self.get(r1, c0), self.get(r1, c1), fc);
        lerp(top, bottom, fr)
    }

    /// Applies `f` to every pixel; the result is clamped into `[0, 1]`.
    pub fn map(&self, mut f: impl FnMut(usize, usize, f64) -> f64) -> Result<Self> {
        Self::from_fn(self.height, self.width, |r, c| f(r, c, self.get(r, c)))
    }

    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Self> {
        if row + height > self.height || col + width > self.width {
            return Err(Error::Shape(format!(
                "crop {height}x{width} at ({row},{col}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Self::from_fn(height, width, |r, c| self.get(row + r, col + c))
    }

    /// Quantizes to 8 bits with round-half-up.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8)
            .collect()
    }

    /// Reads an 8-bit grayscale PNG or PGM. Colour and 16-bit inputs are rejected.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let decoded = image::load_from_memory(&bytes).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        match decoded {
            image::DynamicImage::ImageLuma8(buf) => {
                let (w, h) = buf.dimensions();
                Self::from_u8(h as usize, w as usize, buf.as_raw())
            }
            other => Err(Error::Image {
                path: path.to_path_buf(),
                detail: format!(
                    "expected 8-bit grayscale, found {:?}",
                    other.color()
                ),
            }),
        }
    }

    /// Writes an 8-bit grayscale PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode_png()?;
        crate::store::write_atomic(path, &bytes)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let encoder = image::codecs::png::PngEncoder::new(&mut out);
        image::ImageEncoder::write_image(
            encoder,
            &self.to_u8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
        )
        .map_err(|e| Error::Image {
            path: "<memory>".into(),
            detail: e.to_string(),
        })?;
        Ok(out)
    }
}

#[inline]
pub(crate) fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Peak signal-to-noise ratio with `MAX = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    /// Identical images.
    Infinite,
    Finite(f64),
}

impl Psnr {
    pub fn from_mse(mse: f64) -> Self {
        if mse == 0.0 {
            Psnr::Infinite
        } else {
            Psnr::Finite(-10.0 * mse.log10())
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Psnr::Infinite)
    }

    pub fn finite(&self) -> Option<f64> {
        match *self {
            Psnr::Finite(v) => Some(v),
            Psnr::Infinite => None,
        }
    }

    /// Decibels, with `f64::INFINITY` standing in for the sentinel.
    pub fn db(&self) -> f64 {
        self.finite().unwrap_or(f64::INFINITY)
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Infinite => f.write_str("inf"),
            Psnr::Finite(v) => write!(f, "{v:.4}"),
        }
    }
}

impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Psnr::Infinite => s.serialize_str("inf"),
            Psnr::Finite(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Psnr::Finite(v)),
            Raw::Str(s) if s == "inf" => Ok(Psnr::Infinite),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("bad PSNR `{s}`"))),
        }
    }
}

pub fn mse(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "cannot compare {}x{} with {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.data.len() as f64)
}

pub fn psnr(a: &GrayImage, b: &GrayImage) -> Result<Psnr> {
    Ok(Psnr::from_mse(mse(a, b)?))
}

/// Top-left corners of overlapping square tiles.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub tile_size: usize,
    pub stride: usize,
    pub origins: Vec<(usize, usize)>,
}

impl TileGrid {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn crops<'a>(&'a self, img: &'a GrayImage) -> impl Iterator<Item = Result<GrayImage>> + 'a {
        self.origins
            .iter()
            .map(move |&(r, c)| img.crop(r, c, self.tile_size, self.tile_size))
    }
}

/// Origins `0, stride, 2*stride, ...` with a final origin clamped to
/// `extent - tile` when the regular grid would leave the edge uncovered.
pub fn axis_origins(extent: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut o = 0;
    while o + tile <= extent {
        out.push(o);
        o += stride;
    }
    let last = extent - tile;
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

pub fn tile(img: &GrayImage, tile_size: usize, stride: usize) -> Result<TileGrid> {
    if tile_size == 0 || stride == 0 {
        return Err(Error::Parameter("tile size and stride must be positive".into()));
    }
    if tile_size > img.height.min(img.width) {
        return Err(Error::Shape(format!(
            "tile {tile_size} does not fit a {}x{} image",
            img.height, img.width
        )));
    }
    let rows = axis_origins(img.height, tile_size, stride);
    let cols = axis_origins(img.width, tile_size, stride);
    let origins = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect();
    Ok(TileGrid {
        tile_size,
        stride,
        origins,
    })
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear(img: &GrayImage, out_h: usize, out_w: usize) -> Result<GrayImage> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Parameter(format!(
            "output size must be positive, got {out_h}x{out_w}"
        )));
    }
    if (out_h, out_w) == img.dims() {
        return Ok(img.clone());
    }
    let sy = img.height as f64 / out_h as f64;
    let sx = img.width as f64 / out_w as f64;
    GrayImage::from_fn(out_h, out_w, |r, c| {
        let src_r = (r as f64 + 0.5) * sy - 0.5;
        let src_c = (c as f64 + 0.5) * sx - 0.5;
        img.sample(src_r, src_c)
    })
}

/// Upscales so the short side reaches `min_side`, preserving aspect ratio.
/// Returns the input unchanged (and `false`) when it is already large enough.
pub fn ensure_min_side(img: &GrayImage, min_side: usize) -> Result<(GrayImage, bool)> {
    let short = img.height.min(img.width);
    if short >= min_side {
        return Ok((img.clone(), false));
    }
    let scale = min_side as f64 / short as f64;
    let h = if img.height == short {
        min_side
    } else {
        ((img.height as f64 * scale).round() as usize).max(min_side)
    };
    let w = if img.width == short {
        min_side
    } else {
        ((img.width as f64 * scale).round() as usize).max(min_side)
    };
    Ok((resize_bilinear(img, h, w)?, true))
}
