//! Suspicious-forgery erasing and its ablation variants, the progressive
//! variant that recomputes attention after each block, and the random /
//! CAM-guided erasing baselines.
//!
//! Every eraser works on raw 8-bit pixels, fills with i.i.d. uniform integers
//! and draws its probability gate first, before any other randomness.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{self, Detector, Label};
use crate::imaging::{fill_random_block, BlockGeometry, Image, ImagingError, OcclusionMask};
use crate::saliency::{self, ForgeryAttentionMap, SaliencyError};

#[derive(Debug, Error)]
pub enum ErasingError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid erasing configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Saliency(#[from] SaliencyError),
    #[error(transparent)]
    Detector(#[from] detector::DetectorError),
}

pub type Result<T> = std::result::Result<T, ErasingError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Guidance {
    /// Anchors in descending attention order.
    FamGuided,
    /// Anchors in a uniformly random order.
    RandomAnchor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EraseConfig {
    #[serde(default = "EraseConfig::default_blocks")]
    pub blocks: usize,
    #[serde(default = "EraseConfig::default_probability")]
    pub probability: f64,
    #[serde(default = "EraseConfig::default_extent")]
    pub max_height: usize,
    #[serde(default = "EraseConfig::default_extent")]
    pub max_width: usize,
    #[serde(default = "EraseConfig::default_guidance")]
    pub guidance: Guidance,
    /// Maximum number of anchor candidates visited; defaults to `H * W`.
    #[serde(default)]
    pub anchor_budget: Option<usize>,
}

impl Default for EraseConfig {
    fn default() -> Self {
        Self {
            blocks: 3,
            probability: 1.0,
            max_height: 120,
            max_width: 120,
            guidance: Guidance::FamGuided,
            anchor_budget: None,
        }
    }
}

impl EraseConfig {
    fn default_blocks() -> usize {
        3
    }
    fn default_probability() -> f64 {
        1.0
    }
    fn default_extent() -> usize {
        120
    }
    fn default_guidance() -> Guidance {
        Guidance::FamGuided
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.blocks == 0 {
            return Err(ErasingError::Config("block count must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(ErasingError::Config(format!(
                "probability {} outside [0, 1]",
                self.probability
            )));
        }
        if !(1..=height).contains(&self.max_height) || !(1..=width).contains(&self.max_width) {
            return Err(ErasingError::Config(format!(
                "block extents {}x{} must lie within the {height}x{width} image",
                self.max_height, self.max_width
            )));
        }
        if self.anchor_budget == Some(0) {
            return Err(ErasingError::Config("anchor budget must be positive".into()));
        }
        Ok(())
    }

    /// Ablation label for the guidance / block-count combination.
    pub fn variant_label(&self) -> &'static str {
        match (self.guidance, self.blocks > 1) {
            (Guidance::FamGuided, true) => "w/ FAM&MEB",
            (Guidance::RandomAnchor, true) => "w/ MEB",
            (Guidance::FamGuided, false) => "w/ FAM",
            (Guidance::RandomAnchor, false) => "w/o MEB|FAM",
        }
    }

    fn budget(&self, height: usize, width: usize) -> usize {
        self.anchor_budget.unwrap_or(height * width)
    }
}

/// Audit record of one erasing invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EraseTrace {
    pub applied: bool,
    pub placed: Vec<(usize, usize)>,
    /// Visited candidates that were already covered.
    pub skipped: Vec<(usize, usize)>,
    pub blocks: Vec<BlockGeometry>,
    pub erased_pixels: usize,
}

impl EraseTrace {
    fn not_applied() -> Self {
        Self {
            applied: false,
            placed: Vec::new(),
            skipped: Vec::new(),
            blocks: Vec::new(),
            erased_pixels: 0,
        }
    }
}

/// Coordinates sorted by descending value; equal values keep row-major order.
pub fn descending_order(values: &Array2<f64>) -> Vec<(usize, usize)> {
    let (_, w) = values.dim();
    let flat: Vec<f64> = values.iter().copied().collect();
    let mut idx: Vec<usize> = (0..flat.len()).collect();
    idx.sort_by(|&a, &b| flat[b].total_cmp(&flat[a]));
    idx.into_iter().map(|k| (k / w, k % w)).collect()
}

fn gate<R: Rng + ?Sized>(probability: f64, rng: &mut R) -> bool {
    rng.gen::<f64>() < probability
}

/// Suspicious forgeries erasing.
///
/// With probability `p`, visits candidate anchors (descending attention for
/// [`Guidance::FamGuided`], a random permutation for
/// [`Guidance::RandomAnchor`]) and places a random-integer block on every
/// anchor not yet covered, until `N` blocks are placed or the anchor budget
/// is spent. `fam` is required for FAM guidance and ignored otherwise.
///
/// Draw order: gate, then (random guidance only) the permutation, then for
/// each block its geometry followed by its fill.
pub fn sfe<R: Rng + ?Sized>(
    image: &Image,
    fam: Option<&ForgeryAttentionMap>,
    config: &EraseConfig,
    rng: &mut R,
) -> Result<(Image, EraseTrace)> {
    let (h, w) = (image.height(), image.width());
    config.validate(h, w)?;
    if let Some(fam) = fam {
        if fam.dim() != (h, w) {
            return Err(ErasingError::Contract(format!(
                "attention map {:?} does not match image {h}x{w}",
                fam.dim()
            )));
        }
    }
    let fam = match (config.guidance, fam) {
        (Guidance::FamGuided, None) => {
            return Err(ErasingError::Contract("FAM guidance requires an attention map".into()))
        }
        (_, fam) => fam,
    };
    if !gate(config.probability, rng) {
        return Ok((image.clone(), EraseTrace::not_applied()));
    }
    let order = match config.guidance {
        Guidance::FamGuided => descending_order(fam.expect("checked above").values()),
        Guidance::RandomAnchor => {
            let mut all: Vec<(usize, usize)> = (0..h).flat_map(|r| (0..w).map(move |q| (r, q))).collect();
            all.shuffle(rng);
            all
        }
    };
    let mut out = image.clone();
    let mut mask = OcclusionMask::new(h, w);
    let mut trace = EraseTrace {
        applied: true,
        ..EraseTrace::not_applied()
    };
    for &(i, j) in order.iter().take(config.budget(h, w)) {
        if trace.placed.len() == config.blocks {
            break;
        }
        if mask.is_covered(i, j) {
            trace.skipped.push((i, j));
            continue;
        }
        let geom = BlockGeometry::sample((i, j), config.max_height, config.max_width, rng);
        fill_random_block(&mut out, &mut mask, &geom, rng)?;
        trace.placed.push((i, j));
        trace.blocks.push(geom);
    }
    trace.erased_pixels = mask.count();
    Ok((out, trace))
}

/// Progressive erasing: `N` rounds of {attention map of the current image,
/// one block on its top unoccluded coordinate}. The gate is drawn once.
/// Always FAM-guided; `config.guidance` is ignored.
pub fn psfe<R: Rng + ?Sized>(
    det: &dyn Detector,
    image: &Image,
    config: &EraseConfig,
    rng: &mut R,
) -> Result<(Image, EraseTrace)> {
    let (h, w) = (image.height(), image.width());
    config.validate(h, w)?;
    if !gate(config.probability, rng) {
        return Ok((image.clone(), EraseTrace::not_applied()));
    }
    let mut out = image.clone();
    let mut mask = OcclusionMask::new(h, w);
    let mut trace = EraseTrace {
        applied: true,
        ..EraseTrace::not_applied()
    };
    let budget = config.budget(h, w);
    for _ in 0..config.blocks {
        let fam = saliency::compute_fam(det, &out)?;
        let mut anchor = None;
        for &(i, j) in descending_order(fam.values()).iter().take(budget) {
            if mask.is_covered(i, j) {
                trace.skipped.push((i, j));
            } else {
                anchor = Some((i, j));
                break;
            }
        }
        let Some(anchor) = anchor else { break };
        let geom = BlockGeometry::sample(anchor, config.max_height, config.max_width, rng);
        fill_random_block(&mut out, &mut mask, &geom, rng)?;
        trace.placed.push(anchor);
        trace.blocks.push(geom);
    }
    trace.erased_pixels = mask.count();
    Ok((out, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomErasingParams {
    #[serde(default = "RandomErasingParams::default_probability")]
    pub probability: f64,
    /// Erased fraction of the image area, `[lo, hi]`.
    #[serde(default = "RandomErasingParams::default_area")]
    pub area_ratio: (f64, f64),
    /// Height / width, `[lo, hi]`.
    #[serde(default = "RandomErasingParams::default_aspect")]
    pub aspect_ratio: (f64, f64),
    #[serde(default = "RandomErasingParams::default_attempts")]
    pub attempts: usize,
}

impl Default for RandomErasingParams {
    fn default() -> Self {
        Self {
            probability: Self::default_probability(),
            area_ratio: Self::default_area(),
            aspect_ratio: Self::default_aspect(),
            attempts: Self::default_attempts(),
        }
    }
}

impl RandomErasingParams {
    fn default_probability() -> f64 {
        0.5
    }
    fn default_area() -> (f64, f64) {
        (0.02, 0.4)
    }
    fn default_aspect() -> (f64, f64) {
        (0.3, 1.0 / 0.3)
    }
    fn default_attempts() -> usize {
        100
    }

    pub fn validate(&self) -> Result<()> {
        let (a0, a1) = self.area_ratio;
        let (r0, r1) = self.aspect_ratio;
        let ok = (0.0..=1.0).contains(&self.probability)
            && a0 > 0.0
            && a0 <= a1
            && a1 <= 1.0
            && r0 > 0.0
            && r0 <= r1
            && r1.is_finite();
        if ok {
            Ok(())
        } else {
            Err(ErasingError::Config(format!("invalid random erasing parameters {self:?}")))
        }
    }
}

/// Outcome of one random erasing call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomErasingOutcome {
    pub applied: bool,
    /// `(top, left, height, width)` of the filled rectangle.
    pub rect: Option<(usize, usize, usize, usize)>,
    /// Set when the gate passed but no admissible rectangle was found.
    pub no_op: bool,
}

/// Random erasing: with the given probability, one rectangle whose area ratio
/// and aspect ratio are drawn from the configured ranges is filled with
/// random integers. Rectangles that do not fit strictly inside the image, or
/// whose rounded area falls outside the area-ratio range, are redrawn up to
/// `attempts` times.
pub fn random_erasing<R: Rng + ?Sized>(
    image: &Image,
    params: &RandomErasingParams,
    rng: &mut R,
) -> Result<(Image, RandomErasingOutcome)> {
    params.validate()?;
    let mut outcome = RandomErasingOutcome {
        applied: false,
        rect: None,
        no_op: false,
    };
    if !gate(params.probability, rng) {
        return Ok((image.clone(), outcome));
    }
    let (h, w) = (image.height(), image.width());
    let area = (h * w) as f64;
    for _ in 0..params.attempts {
        let target = rng.gen_range(params.area_ratio.0..=params.area_ratio.1) * area;
        let aspect = rng.gen_range(params.aspect_ratio.0..=params.aspect_ratio.1);
        let rh = (target * aspect).sqrt().round() as usize;
        let rw = (target / aspect).sqrt().round() as usize;
        if rh == 0 || rw == 0 || rh >= h || rw >= w {
            continue;
        }
        let ratio = (rh * rw) as f64 / area;
        if ratio < params.area_ratio.0 || ratio > params.area_ratio.1 {
            continue;
        }
        let top = rng.gen_range(0..=h - rh);
        let left = rng.gen_range(0..=w - rw);
        let mut out = image.clone();
        let c = out.channels();
        let px = out.pixels_mut();
        for r in top..top + rh {
            for q in left..left + rw {
                for ch in 0..c {
                    px[[ch, r, q]] = rng.gen();
                }
            }
        }
        outcome.applied = true;
        outcome.rect = Some((top, left, rh, rw));
        return Ok((out, outcome));
    }
    outcome.no_op = true;
    Ok((image.clone(), outcome))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialErasingParams {
    /// Fraction of pixels, ranked by class activation, to erase.
    #[serde(default = "AdversarialErasingParams::default_quantile")]
    pub quantile: f64,
}

impl Default for AdversarialErasingParams {
    fn default() -> Self {
        Self {
            quantile: Self::default_quantile(),
        }
    }
}

impl AdversarialErasingParams {
    fn default_quantile() -> f64 {
        0.15
    }
}

/// Number of pixels the quantile selects: `ceil(q * n)`, with a `1e-9` slack
/// so products like `0.15 * 100` do not round up past the exact count.
pub fn quantile_count(quantile: f64, n: usize) -> usize {
    ((quantile * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// CAM-guided erasing: the top `ceil(q * H * W)` pixels of the upsampled
/// class activation map (descending, row-major ties) are filled with random
/// integers. Returns the erased-pixel mask alongside the image.
pub fn adversarial_erasing<R: Rng + ?Sized>(
    det: &dyn Detector,
    image: &Image,
    params: &AdversarialErasingParams,
    class: Label,
    rng: &mut R,
) -> Result<(Image, OcclusionMask)> {
    if !(0.0..=1.0).contains(&params.quantile) {
        return Err(ErasingError::Config(format!("quantile {} outside [0, 1]", params.quantile)));
    }
    let (h, w) = (image.height(), image.width());
    let mut mask = OcclusionMask::new(h, w);
    let count = quantile_count(params.quantile, h * w);
    if count == 0 {
        return Ok((image.clone(), mask));
    }
    let cam = detector::compute_cam(det, image, class, true)?;
    let mut out = image.clone();
    let c = out.channels();
    let px = out.pixels_mut();
    for &(r, q) in descending_order(&cam).iter().take(count) {
        for ch in 0..c {
            px[[ch, r, q]] = rng.gen();
        }
        mask.cover(r, q);
    }
    Ok((out, mask))
}
