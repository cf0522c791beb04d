//! Pixel-level primitives: the 8-bit image container, occlusion bookkeeping,
//! train/eval preprocessing and the random-integer block fill shared by every
//! eraser.
//!
//! All erasing happens in raw `u8` pixel space. Conversion to the `[0, 1]`
//! floating-point domain the detector consumes is done by [`Image::to_tensor`].

use std::ops::Range;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("image io error for {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, ImagingError>;

/// An 8-bit image stored channel-first (`C x H x W`), `C` in `{1, 3}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pixels: Array3<u8>,
}

impl Image {
    pub fn new(pixels: Array3<u8>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c != 1 && c != 3 {
            return Err(ImagingError::InvalidImage(format!(
                "expected 1 or 3 channels, got {c}"
            )));
        }
        if h == 0 || w == 0 {
            return Err(ImagingError::InvalidImage(format!(
                "image must be at least 1x1, got {h}x{w}"
            )));
        }
        Ok(Self { pixels })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: u8) -> Result<Self> {
        Self::new(Array3::from_elem((channels, height, width), value))
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        f: impl FnMut((usize, usize, usize)) -> u8,
    ) -> Result<Self> {
        Self::new(Array3::from_shape_fn((channels, height, width), f))
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.pixels.dim()
    }

    pub fn pixels(&self) -> &Array3<u8> {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut Array3<u8> {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Array3<u8> {
        self.pixels
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> u8 {
        self.pixels[[c, row, col]]
    }

    /// Pixels scaled to `[0, 1]` for network input.
    pub fn to_tensor(&self) -> Array3<f64> {
        self.pixels.mapv(|v| f64::from(v) / 255.0)
    }

    /// Horizontal mirror: output column `j` is input column `W - 1 - j`.
    pub fn flip_horizontal(&self) -> Image {
        let mut pixels = self.pixels.clone();
        pixels.invert_axis(Axis(2));
        Image {
            pixels: pixels.as_standard_layout().to_owned(),
        }
    }

    /// Copy of the `height x width` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 || top + height > self.height() || left + width > self.width()
        {
            return Err(ImagingError::Contract(format!(
                "crop {height}x{width} at ({top}, {left}) exceeds {}x{} image",
                self.height(),
                self.width()
            )));
        }
        let window = self
            .pixels
            .slice(ndarray::s![.., top..top + height, left..left + width])
            .to_owned();
        Image::new(window)
    }

    /// Bilinear resize with half-pixel centers; identical sizes return a copy.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 {
            return Err(ImagingError::InvalidImage(format!(
                "resize target must be at least 1x1, got {height}x{width}"
            )));
        }
        if height == self.height() && width == self.width() {
            return Ok(self.clone());
        }
        let src = self.pixels.mapv(f64::from);
        let out = resize_planes(&src, height, width);
        Image::new(out.mapv(|v| v.round().clamp(0.0, 255.0) as u8))
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let io_err = |e: image::ImageError| ImagingError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let decoded = image::open(path).map_err(io_err)?;
        let is_gray = matches!(
            decoded.color(),
            image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16
        );
        if is_gray {
            let buf = decoded.to_luma8();
            let (w, h) = buf.dimensions();
            let raw = buf.into_raw();
            Image::new(
                Array3::from_shape_vec((1, h as usize, w as usize), raw)
                    .expect("luma buffer matches its dimensions"),
            )
        } else {
            let buf = decoded.to_rgb8();
            let (w, h) = buf.dimensions();
            let hwc = Array3::from_shape_vec((h as usize, w as usize, 3), buf.into_raw())
                .expect("rgb buffer matches its dimensions");
            Image::new(hwc.permuted_axes([2, 0, 1]).as_standard_layout().to_owned())
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (c, h, w) = self.shape();
        let hwc: Vec<u8> = self
            .pixels
            .view()
            .permuted_axes([1, 2, 0])
            .iter()
            .copied()
            .collect();
        let color = if c == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer(path, &hwc, w as u32, h as u32, color).map_err(|e| ImagingError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// Bilinear resampling of every plane of a `C x H x W` array (half-pixel
/// centers, edge clamped). Shared by image resizing and CAM upsampling.
pub fn resize_planes(src: &Array3<f64>, height: usize, width: usize) -> Array3<f64> {
    let (c, sh, sw) = src.dim();
    let taps = |dst: usize, src_len: usize| -> Vec<(usize, usize, f64)> {
        let scale = src_len as f64 / dst as f64;
        (0..dst)
            .map(|o| {
                let x = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let x0 = (x.floor() as usize).min(src_len - 1);
                let x1 = (x0 + 1).min(src_len - 1);
                (x0, x1, x - x0 as f64)
            })
            .collect()
    };
    let rows = taps(height, sh);
    let cols = taps(width, sw);
    let mut out = Array3::<f64>::zeros((c, height, width));
    for ch in 0..c {
        for (r, &(r0, r1, fr)) in rows.iter().enumerate() {
            for (q, &(c0, c1, fc)) in cols.iter().enumerate() {
                let top = src[[ch, r0, c0]] * (1.0 - fc) + src[[ch, r0, c1]] * fc;
                let bottom = src[[ch, r1, c0]] * (1.0 - fc) + src[[ch, r1, c1]] * fc;
                out[[ch, r, q]] = top * (1.0 - fr) + bottom * fr;
            }
        }
    }
    out
}

/// Resize and crop sizes used by the preprocessing pipelines.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PreprocessConfig {
    pub resize: (usize, usize),
    pub crop: (usize, usize),
    /// Probability of a horizontal flip during training.
    #[serde(default = "default_flip")]
    pub flip_probability: f64,
}

fn default_flip() -> f64 {
    0.5
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            resize: (256, 256),
            crop: (224, 224),
            flip_probability: 0.5,
        }
    }
}

impl PreprocessConfig {
    /// Keep the native size: no resampling, no cropping, flips only.
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            resize: (height, width),
            crop: (height, width),
            flip_probability: 0.5,
        }
    }

    fn validate(&self) -> Result<()> {
        let ((rh, rw), (ch, cw)) = (self.resize, self.crop);
        if ch == 0 || cw == 0 || ch > rh || cw > rw {
            return Err(ImagingError::Contract(format!(
                "crop {ch}x{cw} does not fit resize target {rh}x{rw}"
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(ImagingError::Contract(format!(
                "flip probability {} outside [0, 1]",
                self.flip_probability
            )));
        }
        Ok(())
    }
}

/// Resize, random crop, then horizontal flip with the configured probability.
///
/// Draws from `rng` in a fixed order: crop row, crop column, flip.
pub fn preprocess_train<R: Rng + ?Sized>(
    image: &Image,
    config: &PreprocessConfig,
    rng: &mut R,
) -> Result<Image> {
    config.validate()?;
    let resized = image.resize_bilinear(config.resize.0, config.resize.1)?;
    let top = rng.gen_range(0..=config.resize.0 - config.crop.0);
    let left = rng.gen_range(0..=config.resize.1 - config.crop.1);
    let cropped = resized.crop(top, left, config.crop.0, config.crop.1)?;
    let flip = rng.gen::<f64>() < config.flip_probability;
    Ok(if flip {
        cropped.flip_horizontal()
    } else {
        cropped
    })
}

/// Resize then center crop. Deterministic.
pub fn preprocess_eval(image: &Image, config: &PreprocessConfig) -> Result<Image> {
    config.validate()?;
    let resized = image.resize_bilinear(config.resize.0, config.resize.1)?;
    let top = (config.resize.0 - config.crop.0) / 2;
    let left = (config.resize.1 - config.crop.1) / 2;
    resized.crop(top, left, config.crop.0, config.crop.1)
}

/// Pixels covered so far during one erasing invocation. Bits are only ever set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OcclusionMask {
    covered: Array2<bool>,
}

impl OcclusionMask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            covered: Array2::from_elem((height, width), false),
        }
    }

    pub fn for_image(image: &Image) -> Self {
        Self::new(image.height(), image.width())
    }

    pub fn is_covered(&self, row: usize, col: usize) -> bool {
        self.covered[[row, col]]
    }

    pub fn count(&self) -> usize {
        self.covered.iter().filter(|&&b| b).count()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.covered.dim()
    }

    pub fn as_array(&self) -> &Array2<bool> {
        &self.covered
    }

    pub fn cover(&mut self, row: usize, col: usize) {
        self.covered[[row, col]] = true;
    }
}

/// Placement of one erasing block around an anchor pixel.
///
/// The block spans `top + bottom = h_max` rows and `left + right = w_max`
/// columns; `top` and `left` count the anchor row and column themselves, so
/// the anchor pixel is always inside the block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BlockGeometry {
    pub anchor: (usize, usize),
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl BlockGeometry {
    pub fn new(anchor: (usize, usize), top: usize, left: usize, h_max: usize, w_max: usize) -> Result<Self> {
        if !(1..=h_max).contains(&top) || !(1..=w_max).contains(&left) {
            return Err(ImagingError::Contract(format!(
                "extents (top {top}, left {left}) must lie in [1, {h_max}] x [1, {w_max}]"
            )));
        }
        Ok(Self {
            anchor,
            top,
            left,
            bottom: h_max - top,
            right: w_max - left,
        })
    }

    /// Draws `top ~ U{1..h_max}` then `left ~ U{1..w_max}`.
    pub fn sample<R: Rng + ?Sized>(anchor: (usize, usize), h_max: usize, w_max: usize, rng: &mut R) -> Self {
        let top = rng.gen_range(1..=h_max);
        let left = rng.gen_range(1..=w_max);
        Self {
            anchor,
            top,
            left,
            bottom: h_max - top,
            right: w_max - left,
        }
    }

    pub fn height(&self) -> usize {
        self.top + self.bottom
    }

    pub fn width(&self) -> usize {
        self.left + self.right
    }

    /// Half-open `(rows, cols)` clipped to an image of the given size.
    pub fn clipped_rect(&self, height: usize, width: usize) -> (Range<usize>, Range<usize>) {
        let (i, j) = self.anchor;
        let r0 = (i + 1).saturating_sub(self.top);
        let r1 = (i + 1 + self.bottom).min(height);
        let c0 = (j + 1).saturating_sub(self.left);
        let c1 = (j + 1 + self.right).min(width);
        (r0..r1, c0..c1)
    }
}

/// Overwrite the clipped block with i.i.d. uniform integers in `[0, 255]`
/// and mark it in `mask`.
///
/// Random values are drawn row-major over the block with channels innermost.
pub fn fill_random_block<R: Rng + ?Sized>(
    image: &mut Image,
    mask: &mut OcclusionMask,
    geom: &BlockGeometry,
    rng: &mut R,
) -> Result<()> {
    let (c, h, w) = image.shape();
    if mask.dim() != (h, w) {
        return Err(ImagingError::Contract(format!(
            "mask {:?} does not match image {h}x{w}",
            mask.dim()
        )));
    }
    let (i, j) = geom.anchor;
    if i >= h || j >= w {
        return Err(ImagingError::Contract(format!(
            "anchor ({i}, {j}) outside {h}x{w} image"
        )));
    }
    let (rows, cols) = geom.clipped_rect(h, w);
    for r in rows {
        for q in cols.clone() {
            for ch in 0..c {
                image.pixels[[ch, r, q]] = rng.gen();
            }
            mask.cover(r, q);
        }
    }
    Ok(())
}
