//! Forgery attention maps: the channel-wise maximum absolute difference
//! between the input gradients of the fake and real logits, plus averaging,
//! cross-technique correlation and heatmap rendering.

use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use thiserror::Error;

use crate::detector::{self, Detector, DetectorError, LogitCombination, Want};
use crate::imaging::Image;

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("cannot aggregate an empty set of maps")]
    EmptyAggregate,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate map {0:?}: zero value range")]
    DegenerateMap(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, SaliencyError>;

/// Per-pixel detector sensitivity, `H x W`, non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgeryAttentionMap {
    values: Array2<f64>,
    pub source: String,
}

impl ForgeryAttentionMap {
    /// Fails when any value is negative or non-finite.
    pub fn new(values: Array2<f64>, source: impl Into<String>) -> Result<Self> {
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(SaliencyError::Shape(
                "attention values must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            values,
            source: source.into(),
        })
    }

    /// Channel max of `|gradient|`.
    pub fn from_gradient(gradient: &Array3<f64>, source: impl Into<String>) -> Self {
        let values = gradient.map_axis(Axis(0), |ch| ch.iter().fold(0.0_f64, |m, v| m.max(v.abs())));
        Self {
            values,
            source: source.into(),
        }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[[row, col]]
    }

    pub fn sum(&self) -> f64 {
        self.values.sum()
    }

    /// Values min-max scaled to `[0, 1]`; `None` for a constant map.
    pub fn min_max_normalized(&self) -> Option<Array2<f64>> {
        let (lo, hi) = self
            .values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        (range > 0.0).then(|| self.values.mapv(|v| (v - lo) / range))
    }

    pub fn save_npy(&self, path: &Path) -> Result<()> {
        ndarray_npy::write_npy(path, &self.values).map_err(|e| SaliencyError::Io(format!("{}: {e}", path.display())))
    }

    /// Min-max scaled viridis heatmap; a constant map renders as the low end.
    pub fn save_heatmap(&self, path: &Path) -> Result<()> {
        save_heatmap(&self.values, path)
    }
}

/// Writes a min-max scaled viridis rendering of `values` as RGB PNG.
pub fn save_heatmap(values: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = values.dim();
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut rgb = Vec::with_capacity(h * w * 3);
    for &v in values.iter() {
        let c = colorous::VIRIDIS.eval_continuous(((v - lo) / range).clamp(0.0, 1.0));
        rgb.extend_from_slice(&[c.r, c.g, c.b]);
    }
    image::save_buffer(path, &rgb, w as u32, h as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| SaliencyError::Io(format!("{}: {e}", path.display())))
}

/// FAMs for a batch of images from one forward and one backward pass. The
/// detector is only read.
pub fn compute_fams(det: &dyn Detector, images: &[Image]) -> Result<Vec<ForgeryAttentionMap>> {
    let batch: Vec<Array3<f64>> = images.iter().map(Image::to_tensor).collect();
    let grads = detector::input_gradients(det, &batch, LogitCombination::FakeMinusReal)?;
    Ok(grads
        .iter()
        .enumerate()
        .map(|(i, g)| ForgeryAttentionMap::from_gradient(g, format!("batch[{i}]")))
        .collect())
}

pub fn compute_fam(det: &dyn Detector, image: &Image) -> Result<ForgeryAttentionMap> {
    let mut maps = compute_fams(det, std::slice::from_ref(image))?;
    Ok(maps.remove(0))
}

/// Second formulation: channel max of `|grad |o_fake - o_real||`, obtained by
/// back-propagating `sign(o_fake - o_real)` through both logits. Undefined
/// where the logits coincide; there the sign is taken as zero.
pub fn compute_fam_via_abs_logit_gap(det: &dyn Detector, image: &Image) -> Result<ForgeryAttentionMap> {
    let grads = det.backward(
        &[image.to_tensor()],
        &mut |logits| {
            logits
                .iter()
                .map(|l| {
                    let s = (l.fake - l.real).signum() * f64::from(u8::from(l.fake != l.real));
                    [-s, s]
                })
                .collect()
        },
        Want::INPUTS,
    )?;
    let g = grads.inputs.expect("input gradients requested");
    Ok(ForgeryAttentionMap::from_gradient(&g[0], "abs-logit-gap"))
}

/// Element-wise mean of per-image FAMs.
pub fn average_fam(det: &dyn Detector, images: &[Image]) -> Result<ForgeryAttentionMap> {
    if images.is_empty() {
        return Err(SaliencyError::EmptyAggregate);
    }
    let shape = images[0].shape();
    if images.iter().any(|i| i.shape() != shape) {
        return Err(SaliencyError::Shape("images in an aggregate must share a shape".into()));
    }
    // Chunked so large groups do not hold every trace in memory at once.
    let mut total = Array2::<f64>::zeros((shape.1, shape.2));
    for chunk in images.chunks(64) {
        for fam in compute_fams(det, chunk)? {
            total += fam.values();
        }
    }
    total /= images.len() as f64;
    Ok(ForgeryAttentionMap {
        values: total,
        source: format!("mean of {}", images.len()),
    })
}

/// Mean of already computed maps.
pub fn mean_of_maps(maps: &[ForgeryAttentionMap]) -> Result<ForgeryAttentionMap> {
    let first = maps.first().ok_or(SaliencyError::EmptyAggregate)?;
    let mut total = Array2::<f64>::zeros(first.dim());
    for m in maps {
        if m.dim() != first.dim() {
            return Err(SaliencyError::Shape("maps in an aggregate must share a shape".into()));
        }
        total += m.values();
    }
    total /= maps.len() as f64;
    Ok(ForgeryAttentionMap {
        values: total,
        source: format!("mean of {}", maps.len()),
    })
}

/// Symmetric technique-by-technique similarity table.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub techniques: Vec<String>,
    pub values: Array2<f64>,
}

impl CorrelationMatrix {
    /// Delimited text with a technique-name header row.
    pub fn to_csv(&self) -> String {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["technique".to_string()];
        header.extend(self.techniques.iter().cloned());
        wtr.write_record(&header).expect("in-memory write");
        for (name, row) in self.techniques.iter().zip(self.values.outer_iter()) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| format!("{v:.12}")));
            wtr.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(wtr.into_inner().expect("flush")).expect("utf8")
    }
}

/// Cosine similarity between min-max normalised, flattened maps.
///
/// Accepts a single map (yielding `[[1.0]]`) so one-group visualisations still
/// produce a table.
pub fn fam_correlation_matrix(maps: &[(String, ForgeryAttentionMap)]) -> Result<CorrelationMatrix> {
    let first = maps.first().ok_or(SaliencyError::EmptyAggregate)?;
    let dim = first.1.dim();
    let mut normalized = Vec::with_capacity(maps.len());
    for (name, m) in maps {
        if m.dim() != dim {
            return Err(SaliencyError::Shape(format!(
                "map {name:?} is {:?}, expected {dim:?}",
                m.dim()
            )));
        }
        normalized.push(m.min_max_normalized().ok_or_else(|| SaliencyError::DegenerateMap(name.clone()))?);
    }
    let k = maps.len();
    let norms: Vec<f64> = normalized.iter().map(|m| m.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut values = Array2::<f64>::eye(k);
    for a in 0..k {
        for b in a + 1..k {
            let dot: f64 = normalized[a].iter().zip(normalized[b].iter()).map(|(x, y)| x * y).sum();
            let c = (dot / (norms[a] * norms[b])).clamp(-1.0, 1.0);
            values[[a, b]] = c;
            values[[b, a]] = c;
        }
    }
    Ok(CorrelationMatrix {
        techniques: maps.iter().map(|(n, _)| n.clone()).collect(),
        values,
    })
}
