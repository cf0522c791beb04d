//! Datasets: the synthetic forged-face proxy with ground-truth masks,
//! directory ingestion, facial-region partitioning from 68 landmarks,
//! less-forgery construction and balanced batch sampling.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::Label;
use crate::imaging::{resize_planes, Image, ImagingError};
use crate::streams;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("degenerate landmarks: {0}")]
    DegenerateLandmarks(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid dataset configuration: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path, e: impl fmt::Display) -> DataError {
    DataError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Eyes,
    Nose,
    Mouth,
    Skin,
}

impl Region {
    pub const ALL: [Region; 4] = [Region::Eyes, Region::Nose, Region::Mouth, Region::Skin];

    pub fn as_str(self) -> &'static str {
        match self {
            Region::Eyes => "eyes",
            Region::Nose => "nose",
            Region::Mouth => "mouth",
            Region::Skin => "skin",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Region {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self> {
        Region::ALL
            .into_iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| DataError::Config(format!("unknown region {s:?}")))
    }
}

/// Pairwise disjoint facial-region masks.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMasks {
    pub eyes: Array2<bool>,
    pub nose: Array2<bool>,
    pub mouth: Array2<bool>,
    pub skin: Array2<bool>,
}

impl RegionMasks {
    pub fn get(&self, region: Region) -> &Array2<bool> {
        match region {
            Region::Eyes => &self.eyes,
            Region::Nose => &self.nose,
            Region::Mouth => &self.mouth,
            Region::Skin => &self.skin,
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.eyes.dim()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        for region in Region::ALL {
            save_mask_png(self.get(region), &dir.join(format!("{region}.png")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let load = |r: Region| load_mask_png(&dir.join(format!("{r}.png")));
        let masks = Self {
            eyes: load(Region::Eyes)?,
            nose: load(Region::Nose)?,
            mouth: load(Region::Mouth)?,
            skin: load(Region::Skin)?,
        };
        if Region::ALL.iter().any(|&r| masks.get(r).dim() != masks.dim()) {
            return Err(DataError::Contract(format!("region masks in {} differ in shape", dir.display())));
        }
        Ok(masks)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub image: Image,
    pub label: Label,
    pub technique: String,
    /// Ground truth of manipulated pixels; `None` for REAL samples and for
    /// ingested data.
    pub forgery_mask: Option<Array2<bool>>,
    pub region_masks: Option<RegionMasks>,
}

impl SampleRecord {
    pub fn real(id: impl Into<String>, image: Image) -> Self {
        Self {
            id: id.into(),
            image,
            label: Label::Real,
            technique: REAL_TECHNIQUE.into(),
            forgery_mask: None,
            region_masks: None,
        }
    }
}

pub const REAL_TECHNIQUE: &str = "real";

/// Half-open pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.top..self.top + self.height).contains(&r) && (self.left..self.left + self.width).contains(&c)
    }

    /// Distance to the nearest edge, 0 on the border row/column.
    fn depth(&self, r: usize, c: usize) -> usize {
        (r - self.top)
            .min(self.top + self.height - 1 - r)
            .min(c - self.left)
            .min(self.left + self.width - 1 - c)
    }

    fn intersects(&self, other: &Rect) -> bool {
        self.top < other.top + other.height
            && other.top < self.top + self.height
            && self.left < other.left + other.width
            && other.left < self.left + self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    /// Alternating +/- on a one-pixel checkerboard.
    Checker,
    /// Vertical stripes two pixels wide.
    Stripes,
}

impl Texture {
    fn sign(self, r: usize, c: usize) -> f64 {
        let odd = match self {
            Texture::Checker => (r + c) % 2 == 1,
            Texture::Stripes => (c / 2) % 2 == 1,
        };
        if odd {
            -1.0
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRegion {
    pub rect: Rect,
    /// Probability that a FAKE sample carries this artifact.
    pub probability: f64,
    /// Amplitude relative to the spec's artifact strength.
    pub gain: f64,
    pub texture: Texture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactFamily {
    /// Artifacts confined to a band along each rectangle's border.
    Boundary,
    /// Artifacts over each whole rectangle.
    Global,
}

impl ArtifactFamily {
    pub fn technique(self) -> &'static str {
        match self {
            ArtifactFamily::Boundary => "synthetic-two-stage",
            ArtifactFamily::Global => "synthetic-one-stage",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Samples per class.
    pub count: usize,
    /// Square image side in pixels.
    pub size: usize,
    pub family: ArtifactFamily,
    /// Artifact amplitude in 8-bit intensity units, before region gains.
    pub strength: f64,
    /// Band width for the boundary family.
    #[serde(default = "SyntheticSpec::default_band")]
    pub band: usize,
    /// Standard deviation of per-pixel noise in REAL images.
    #[serde(default = "SyntheticSpec::default_noise")]
    pub real_noise: f64,
    pub dominant: ArtifactRegion,
    pub secondary: ArtifactRegion,
}

impl SyntheticSpec {
    fn default_band() -> usize {
        1
    }
    fn default_noise() -> f64 {
        4.0
    }

    /// Two-region layout for a `size`-pixel square: the dominant artifact in
    /// the left eye, present in every fake, and a weaker secondary artifact in
    /// the mouth, present in half of them.
    pub fn two_region(count: usize, size: usize) -> Self {
        let scale = |f: f64| (f * size as f64).round() as usize;
        let rect = |top: f64, left: f64, bottom: f64, right: f64| Rect {
            top: scale(top),
            left: scale(left),
            height: scale(bottom) - scale(top),
            width: scale(right) - scale(left),
        };
        Self {
            count,
            size,
            family: ArtifactFamily::Global,
            strength: 32.0,
            band: 1,
            real_noise: 4.0,
            dominant: ArtifactRegion {
                rect: rect(0.25, 0.2, 0.34375, 0.32),
                probability: 1.0,
                gain: 1.0,
                texture: Texture::Checker,
            },
            secondary: ArtifactRegion {
                rect: rect(0.72, 0.38, 0.81, 0.63),
                probability: 0.5,
                gain: 1.5,
                texture: Texture::Stripes,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(DataError::EmptyDataset("synthetic count per class is 0".into()));
        }
        if self.size < 8 {
            return Err(DataError::Config(format!("image size {} below 8", self.size)));
        }
        if !(self.strength.is_finite() && self.strength >= 0.0) || !(self.real_noise.is_finite() && self.real_noise >= 0.0)
        {
            return Err(DataError::Config("strength and noise must be finite and non-negative".into()));
        }
        if self.band == 0 {
            return Err(DataError::Config("band width must be positive".into()));
        }
        for (name, a) in [("dominant", &self.dominant), ("secondary", &self.secondary)] {
            let r = a.rect;
            if r.height == 0 || r.width == 0 || r.top + r.height > self.size || r.left + r.width > self.size {
                return Err(DataError::Config(format!("{name} rectangle {r:?} outside the image")));
            }
            if !(0.0..=1.0).contains(&a.probability) || !(a.gain.is_finite() && a.gain >= 0.0) {
                return Err(DataError::Config(format!("{name} probability or gain out of range")));
            }
        }
        if self.dominant.rect.intersects(&self.secondary.rect) {
            return Err(DataError::Config("dominant and secondary rectangles overlap".into()));
        }
        Ok(())
    }

    /// Pixels a FAKE may perturb under this spec's family.
    pub fn artifact_support(&self, region: &ArtifactRegion) -> Array2<bool> {
        Array2::from_shape_fn((self.size, self.size), |(r, c)| self.perturbs(region, r, c))
    }

    fn perturbs(&self, region: &ArtifactRegion, r: usize, c: usize) -> bool {
        region.rect.contains(r, c)
            && match self.family {
                ArtifactFamily::Global => true,
                ArtifactFamily::Boundary => region.rect.depth(r, c) < self.band,
            }
    }
}

const CHANNELS: usize = 3;
const COARSE_GRID: usize = 5;

/// Smooth structured noise: an upsampled coarse luminance grid, per-channel
/// tints, one oriented sinusoid and fine Gaussian grain.
fn real_base(size: usize, noise: f64, rng: &mut ChaCha8Rng) -> Image {
    let g = COARSE_GRID;
    let lum = Array3::from_shape_simple_fn((1, g, g), || rng.gen_range(70.0..180.0));
    let tint = Array3::from_shape_simple_fn((CHANNELS, g, g), || rng.gen_range(-20.0..20.0));
    let lum = resize_planes(&lum, size, size);
    let tint = resize_planes(&tint, size, size);
    let amp = rng.gen_range(4.0..12.0);
    let fx: f64 = rng.gen_range(-1.5..1.5);
    let fy: f64 = rng.gen_range(-1.5..1.5);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let grain = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let n = size as f64;
    let mut px = Array3::zeros((CHANNELS, size, size));
    for ((c, r, q), v) in px.indexed_iter_mut() {
        let wave = amp * (std::f64::consts::TAU * (fx * q as f64 + fy * r as f64) / n + phase).sin();
        let fine = if noise > 0.0 { grain.sample(rng) } else { 0.0 };
        let x: f64 = lum[[0, r, q]] + tint[[c, r, q]] + wave + fine;
        *v = x.round().clamp(16.0, 239.0) as u8;
    }
    Image::new(px).expect("non-empty image")
}

fn perturb(spec: &SyntheticSpec, region: &ArtifactRegion, image: &mut Image) {
    let amp = spec.strength * region.gain;
    let px = image.pixels_mut();
    let rect = region.rect;
    for r in rect.top..rect.top + rect.height {
        for q in rect.left..rect.left + rect.width {
            if !spec.perturbs(region, r, q) {
                continue;
            }
            let delta = (amp * region.texture.sign(r, q)).round();
            for c in 0..CHANNELS {
                let v = &mut px[[c, r, q]];
                *v = (*v as f64 + delta).clamp(0.0, 255.0) as u8;
            }
        }
    }
}

/// Pixels where any channel differs.
pub fn pixel_diff(a: &Image, b: &Image) -> Result<Array2<bool>> {
    if a.shape() != b.shape() {
        return Err(DataError::Contract(format!("shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    let (c, h, w) = a.shape();
    Ok(Array2::from_shape_fn((h, w), |(r, q)| {
        (0..c).any(|ch| a.get(ch, r, q) != b.get(ch, r, q))
    }))
}

/// Generates `count` REAL and `count` FAKE samples (REALs first). FAKE `k`
/// is REAL `k` plus artifacts; its forgery mask is the exact pixel diff.
/// Every sample has the canonical region masks attached.
pub fn generate_synthetic_dataset<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<Vec<SampleRecord>> {
    spec.validate()?;
    let base_seed: u64 = rng.gen();
    let regions = partition_regions(&canonical_landmarks(spec.size, spec.size), spec.size, spec.size)?;
    let technique = spec.family.technique();
    let pairs: Vec<(SampleRecord, SampleRecord)> = (0..spec.count)
        .into_par_iter()
        .map(|k| {
            let base = real_base(spec.size, spec.real_noise, &mut streams::stream(base_seed, "real", k as u64));
            let mut occ = streams::stream(base_seed, "fake", k as u64);
            let with_dominant = occ.gen::<f64>() < spec.dominant.probability;
            let with_secondary = occ.gen::<f64>() < spec.secondary.probability;
            let mut fake = base.clone();
            if with_dominant {
                perturb(spec, &spec.dominant, &mut fake);
            }
            if with_secondary {
                perturb(spec, &spec.secondary, &mut fake);
            }
            let mask = pixel_diff(&fake, &base).expect("same shape");
            let mut real = SampleRecord::real(format!("real-{k:05}"), base);
            real.region_masks = Some(regions.clone());
            let fake = SampleRecord {
                id: format!("fake-{k:05}"),
                image: fake,
                label: Label::Fake,
                technique: technique.into(),
                forgery_mask: Some(mask),
                region_masks: Some(regions.clone()),
            };
            (real, fake)
        })
        .collect();
    let (reals, fakes): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    Ok(reals.into_iter().chain(fakes).collect())
}

/// A 68-point landmark layout of a frontal face filling the image, in the
/// standard index order (jaw, brows, nose, eyes, mouth).
pub fn canonical_landmarks(height: usize, width: usize) -> Vec<(f64, f64)> {
    use std::f64::consts::PI;
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(68);
    // Jaw 0-16: lower half-ellipse from the left temple to the right.
    for k in 0..17 {
        let t = PI - k as f64 * PI / 16.0;
        pts.push((0.5 + 0.42 * t.cos(), 0.30 + 0.62 * t.sin()));
    }
    // Brows 17-26.
    for (x0, x1) in [(0.16, 0.44), (0.56, 0.84)] {
        for k in 0..5 {
            let s = k as f64 / 4.0;
            pts.push((x0 + s * (x1 - x0), 0.22 - 0.04 * (PI * s).sin()));
        }
    }
    // Nose bridge 27-30 and base 31-35.
    for k in 0..4 {
        pts.push((0.5, 0.36 + 0.08 * k as f64));
    }
    for k in 0..5 {
        let s = k as f64 / 4.0;
        pts.push((0.40 + 0.20 * s, 0.62 + 0.03 * (PI * s).sin()));
    }
    // Eyes 36-47: six points per ellipse, starting at the image-left corner.
    for cx in [0.31, 0.69] {
        for k in 0..6 {
            let a = PI * k as f64 / 3.0;
            pts.push((cx - 0.12 * a.cos(), 0.37 - 0.07 * a.sin()));
        }
    }
    // Outer lip 48-59 and inner lip 60-67.
    for (n, rx, ry) in [(12usize, 0.20, 0.10), (8, 0.13, 0.04)] {
        for k in 0..n {
            let a = PI - 2.0 * PI * k as f64 / n as f64;
            pts.push((0.5 + rx * a.cos(), 0.765 - ry * a.sin()));
        }
    }
    debug_assert_eq!(pts.len(), 68);
    let (sx, sy) = ((width - 1) as f64, (height - 1) as f64);
    pts.into_iter().map(|(x, y)| (x * sx, y * sy)).collect()
}

/// Reads 68 landmark rows of `x,y` (comma or whitespace separated); blank
/// lines and lines starting with `#` are ignored.
pub fn load_landmarks(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut pts = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect();
        let parsed: Option<Vec<f64>> = fields.iter().map(|s| s.parse().ok()).collect();
        match parsed.as_deref() {
            Some([x, y]) => pts.push((*x, *y)),
            _ => return Err(io_err(path, format!("line {}: expected `x,y`", lineno + 1))),
        }
    }
    if pts.len() != 68 {
        return Err(io_err(path, format!("expected 68 landmarks, found {}", pts.len())));
    }
    Ok(pts)
}

/// Convex hull (counter-clockwise, no collinear vertices).
fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Closed convex polygon test for pixel `(r, c)` as the point `(x = c, y = r)`.
fn polygon_mask(hull: &[(f64, f64)], height: usize, width: usize) -> Array2<bool> {
    const EPS: f64 = 1e-9;
    Array2::from_shape_fn((height, width), |(r, c)| {
        let p = (c as f64, r as f64);
        (0..hull.len()).all(|i| {
            let a = hull[i];
            let b = hull[(i + 1) % hull.len()];
            (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0) >= -EPS
        })
    })
}

fn group_mask(name: &str, points: &[(f64, f64)], height: usize, width: usize) -> Result<Array2<bool>> {
    let hull = convex_hull(points);
    if hull.len() < 3 {
        return Err(DataError::DegenerateLandmarks(format!("{name} landmarks are collinear")));
    }
    Ok(polygon_mask(&hull, height, width))
}

/// Eyes (with brows), nose, mouth and skin masks from 68 landmarks. Eyes are
/// the union of the two brow+eye hulls; nose, mouth and skin each exclude
/// the regions before them, with skin being the remainder of the whole-face
/// hull.
pub fn partition_regions(landmarks: &[(f64, f64)], height: usize, width: usize) -> Result<RegionMasks> {
    if landmarks.len() != 68 {
        return Err(DataError::Contract(format!("expected 68 landmarks, got {}", landmarks.len())));
    }
    let (xmax, ymax) = (width as f64 - 1.0, height as f64 - 1.0);
    if let Some((i, p)) = landmarks
        .iter()
        .enumerate()
        .find(|(_, &(x, y))| !(0.0..=xmax).contains(&x) || !(0.0..=ymax).contains(&y))
    {
        return Err(DataError::Contract(format!("landmark {i} at {p:?} outside {height}x{width}")));
    }
    let pick = |ranges: &[std::ops::Range<usize>]| -> Vec<(f64, f64)> {
        ranges.iter().flat_map(|r| landmarks[r.clone()].iter().copied()).collect()
    };
    let left = group_mask("left eye", &pick(&[17..22, 36..42]), height, width)?;
    let right = group_mask("right eye", &pick(&[22..27, 42..48]), height, width)?;
    let eyes = &left | &right;
    let nose = group_mask("nose", &pick(&[27..36]), height, width)? & !&eyes;
    let mouth = group_mask("mouth", &pick(&[48..68]), height, width)? & !(&eyes | &nose);
    let inner = &(&eyes | &nose) | &mouth;
    let skin = group_mask("face", landmarks, height, width)? & !&inner;
    Ok(RegionMasks { eyes, nose, mouth, skin })
}

/// Replaces one facial region of a fake with the same pixels of a real
/// image. The label stays FAKE; the forgery mask loses the replaced pixels.
pub fn make_less_forgery(fake: &SampleRecord, real_source: &SampleRecord, region: Region) -> Result<SampleRecord> {
    let regions = fake
        .region_masks
        .as_ref()
        .ok_or_else(|| DataError::Contract(format!("{} has no region masks", fake.id)))?;
    if fake.image.shape() != real_source.image.shape() {
        return Err(DataError::Contract(format!(
            "fake {:?} and real {:?} differ in shape",
            fake.image.shape(),
            real_source.image.shape()
        )));
    }
    let mask = regions.get(region);
    if mask.dim() != (fake.image.height(), fake.image.width()) {
        return Err(DataError::Contract("region mask does not match the image".into()));
    }
    let mut image = fake.image.clone();
    let px = image.pixels_mut();
    for ((r, q), &inside) in mask.indexed_iter() {
        if inside {
            for c in 0..px.dim().0 {
                px[[c, r, q]] = real_source.image.get(c, r, q);
            }
        }
    }
    let title = {
        let s = region.as_str();
        format!("{}{}", s[..1].to_uppercase(), &s[1..])
    };
    Ok(SampleRecord {
        id: format!("{}-{}", fake.id, region),
        image,
        label: Label::Fake,
        technique: format!("{}-{title}Real", fake.technique),
        forgery_mask: fake.forgery_mask.as_ref().map(|m| m & &!mask),
        region_masks: fake.region_masks.clone(),
    })
}

/// Endless stream of balanced batches of dataset indices: `batch / 2` REAL
/// followed by `batch / 2` FAKE. Each class is drawn without replacement from
/// its own shuffled pool, which is reshuffled whenever it runs out.
#[derive(Debug, Clone)]
pub struct BalancedBatchSampler {
    pools: [Vec<usize>; 2],
    cursors: [usize; 2],
    half: usize,
    rng: ChaCha8Rng,
}

impl BalancedBatchSampler {
    pub fn new(labels: &[Label], batch_size: usize, rng: ChaCha8Rng) -> Result<Self> {
        if batch_size == 0 || batch_size % 2 != 0 {
            return Err(DataError::Config(format!("batch size {batch_size} must be positive and even")));
        }
        let by = |l: Label| labels.iter().enumerate().filter(|(_, &x)| x == l).map(|(i, _)| i).collect::<Vec<_>>();
        let pools = [by(Label::Real), by(Label::Fake)];
        if pools.iter().any(|p| p.is_empty()) {
            return Err(DataError::EmptyDataset("batch sampling needs both classes".into()));
        }
        let mut sampler = Self {
            pools,
            cursors: [0, 0],
            half: batch_size / 2,
            rng,
        };
        for p in &mut sampler.pools {
            p.shuffle(&mut sampler.rng);
        }
        Ok(sampler)
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(2 * self.half);
        for class in 0..2 {
            for _ in 0..self.half {
                if self.cursors[class] == self.pools[class].len() {
                    self.pools[class].shuffle(&mut self.rng);
                    self.cursors[class] = 0;
                }
                out.push(self.pools[class][self.cursors[class]]);
                self.cursors[class] += 1;
            }
        }
        out
    }
}

impl Iterator for BalancedBatchSampler {
    type Item = Vec<usize>;
    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_batch())
    }
}

/// One row of an ingestion manifest: a subdirectory of the root and the
/// label / technique every image in it receives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: Label,
    pub technique: String,
}

/// Reads a `path,label,technique` CSV with a header row.
pub fn load_ingest_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    reader
        .deserialize()
        .map(|row| row.map_err(|e| io_err(path, e)))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub loaded: usize,
    pub skipped: Vec<(PathBuf, String)>,
}

/// Loads every file of each manifest subdirectory as PNG. Unreadable files
/// are logged and tallied; records are ordered by relative path.
pub fn ingest_directory(root: &Path, manifest: &[ManifestEntry]) -> Result<(Vec<SampleRecord>, IngestReport)> {
    let mut report = IngestReport::default();
    let mut found: BTreeMap<PathBuf, (PathBuf, &ManifestEntry)> = BTreeMap::new();
    for entry in manifest {
        let dir = root.join(&entry.path);
        let listing = match std::fs::read_dir(&dir) {
            Ok(l) => l,
            Err(e) => {
                log::warn!("skipping {}: {e}", dir.display());
                report.skipped.push((dir, e.to_string()));
                continue;
            }
        };
        for item in listing.flatten() {
            let path = item.path();
            if path.is_file() {
                let rel = path.strip_prefix(root).unwrap_or(&path).to_path_buf();
                found.insert(rel, (path, entry));
            }
        }
    }
    let mut records = Vec::new();
    for (rel, (path, entry)) in found {
        match Image::load_png(&path) {
            Ok(image) => records.push(SampleRecord {
                id: rel.to_string_lossy().into_owned(),
                image,
                label: entry.label,
                technique: entry.technique.clone(),
                forgery_mask: None,
                region_masks: None,
            }),
            Err(e) => {
                log::warn!("skipping unreadable {}: {e}", path.display());
                report.skipped.push((path, e.to_string()));
            }
        }
    }
    report.loaded = records.len();
    if records.is_empty() {
        return Err(DataError::EmptyDataset(format!("no readable images under {}", root.display())));
    }
    Ok((records, report))
}

pub fn save_mask_png(mask: &Array2<bool>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let px = Array3::from_shape_fn((1, h, w), |(_, r, q)| if mask[[r, q]] { 255u8 } else { 0 });
    Ok(Image::new(px)?.save_png(path)?)
}

pub fn load_mask_png(path: &Path) -> Result<Array2<bool>> {
    let img = Image::load_png(path)?;
    let (c, h, w) = img.shape();
    Ok(Array2::from_shape_fn((h, w), |(r, q)| (0..c).any(|ch| img.get(ch, r, q) >= 128)))
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredRecord {
    id: String,
    label: Label,
    technique: String,
    image: String,
    forgery_mask: String,
    regions: String,
}

pub const DATASET_INDEX: &str = "records.csv";

/// Writes images, masks and a `records.csv` index under `dir`. Region masks
/// shared by consecutive records are written once. Returns the written files.
pub fn save_dataset(records: &[SampleRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir.join("images")).map_err(|e| io_err(dir, e))?;
    let mut written = Vec::new();
    let mut rows = Vec::with_capacity(records.len());
    let mut region_sets: Vec<&RegionMasks> = Vec::new();
    for rec in records {
        let image = format!("images/{}.png", rec.id);
        rec.image.save_png(&dir.join(&image))?;
        written.push(dir.join(&image));
        let forgery_mask = match &rec.forgery_mask {
            Some(m) => {
                let rel = format!("images/{}.mask.png", rec.id);
                save_mask_png(m, &dir.join(&rel))?;
                written.push(dir.join(&rel));
                rel
            }
            None => String::new(),
        };
        let regions = match &rec.region_masks {
            Some(m) => {
                let idx = match region_sets.iter().position(|&s| s == m) {
                    Some(i) => i,
                    None => {
                        region_sets.push(m);
                        let sub = dir.join(format!("regions/{}", region_sets.len() - 1));
                        m.save(&sub)?;
                        written.extend(Region::ALL.iter().map(|r| sub.join(format!("{r}.png"))));
                        region_sets.len() - 1
                    }
                };
                format!("regions/{idx}")
            }
            None => String::new(),
        };
        rows.push(StoredRecord {
            id: rec.id.clone(),
            label: rec.label,
            technique: rec.technique.clone(),
            image,
            forgery_mask,
            regions,
        });
    }
    let index = dir.join(DATASET_INDEX);
    let mut writer = csv::Writer::from_path(&index).map_err(|e| io_err(&index, e))?;
    for row in &rows {
        writer.serialize(row).map_err(|e| io_err(&index, e))?;
    }
    writer.flush().map_err(|e| io_err(&index, e))?;
    written.push(index);
    Ok(written)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<SampleRecord>> {
    let index = dir.join(DATASET_INDEX);
    let mut reader = csv::Reader::from_path(&index).map_err(|e| io_err(&index, e))?;
    let mut regions: BTreeMap<String, RegionMasks> = BTreeMap::new();
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let row: StoredRecord = row.map_err(|e| io_err(&index, e))?;
        let region_masks = if row.regions.is_empty() {
            None
        } else {
            if !regions.contains_key(&row.regions) {
                regions.insert(row.regions.clone(), RegionMasks::load(&dir.join(&row.regions))?);
            }
            Some(regions[&row.regions].clone())
        };
        out.push(SampleRecord {
            id: row.id,
            image: Image::load_png(&dir.join(&row.image))?,
            label: row.label,
            technique: row.technique,
            forgery_mask: if row.forgery_mask.is_empty() {
                None
            } else {
                Some(load_mask_png(&dir.join(&row.forgery_mask))?)
            },
            region_masks,
        });
    }
    if out.is_empty() {
        return Err(DataError::EmptyDataset(format!("{} lists no records", index.display())));
    }
    Ok(out)
}
