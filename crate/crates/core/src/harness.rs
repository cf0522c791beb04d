//! Experiment orchestration: configuration, the mining training loop,
//! evaluation on standard and less-forgery test sets, ablation grids,
//! attention visualisation, erase previews and the run manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{
    self, ArtifactFamily, BalancedBatchSampler, DataError, ManifestEntry, Region, RegionMasks, SampleRecord,
    SyntheticSpec,
};
use crate::detector::{
    self, Adam, Architecture, CnnConfig, Detector, DetectorError, Label, TrainConfig,
};
use crate::erasing::{
    self, AdversarialErasingParams, EraseConfig, EraseTrace, ErasingError, Guidance, RandomErasingOutcome,
    RandomErasingParams,
};
use crate::imaging::{self, Image, ImagingError, PreprocessConfig};
use crate::metrics::{self, EvalReport, MetricsError, ScoredSample};
use crate::saliency::{self, ForgeryAttentionMap, SaliencyError};
use crate::streams;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Erasing(#[from] ErasingError),
    #[error(transparent)]
    Saliency(#[from] SaliencyError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(PathBuf),
    #[error("training diverged at iteration {iteration} (loss {loss}): {detail}")]
    TrainingDiverged { iteration: usize, loss: f64, detail: String },
}

impl HarnessError {
    /// Stable machine-readable category.
    pub fn category(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Data(DataError::EmptyDataset(_)) => "empty-dataset",
            HarnessError::Data(DataError::Io { .. }) => "io",
            HarnessError::Data(_) => "data",
            HarnessError::Detector(DetectorError::Checksum(_) | DetectorError::Format(_)) => "checkpoint",
            HarnessError::Detector(DetectorError::Io(_)) => "io",
            HarnessError::Detector(DetectorError::Config(_)) => "config",
            HarnessError::Detector(DetectorError::TrainingDiverged { .. }) => "training-diverged",
            HarnessError::Detector(_) => "detector",
            HarnessError::Erasing(ErasingError::Config(_)) => "config",
            HarnessError::Erasing(_) => "erasing",
            HarnessError::Saliency(_) => "saliency",
            HarnessError::Metrics(_) => "metrics",
            HarnessError::Imaging(ImagingError::Io { .. }) => "io",
            HarnessError::Imaging(_) => "imaging",
            HarnessError::Io { .. } => "io",
            HarnessError::MissingCheckpoint(_) => "missing-checkpoint",
            HarnessError::TrainingDiverged { .. } => "training-diverged",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "empty-dataset" | "data" => 3,
            "io" => 4,
            "missing-checkpoint" | "checkpoint" => 5,
            "training-diverged" => 6,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn io_err(path: &Path, e: impl fmt::Display) -> HarnessError {
    HarnessError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

// ---------------------------------------------------------------- config

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Augmentation {
    None,
    Rfm(EraseConfig),
    Psfe(EraseConfig),
    Re(RandomErasingParams),
    Ae(AdversarialErasingParams),
}

impl Default for Augmentation {
    fn default() -> Self {
        Augmentation::None
    }
}

impl Augmentation {
    pub fn name(&self) -> &'static str {
        match self {
            Augmentation::None => "none",
            Augmentation::Rfm(_) => "rfm",
            Augmentation::Psfe(_) => "psfe",
            Augmentation::Re(_) => "re",
            Augmentation::Ae(_) => "ae",
        }
    }

    fn erase_config(&self) -> Option<&EraseConfig> {
        match self {
            Augmentation::Rfm(c) | Augmentation::Psfe(c) => Some(c),
            _ => None,
        }
    }
}

/// Which training images the augmentation touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EraseClasses {
    #[default]
    Both,
    FakeOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    pub train_count: usize,
    pub test_count: usize,
    #[serde(default = "SyntheticSource::default_size")]
    pub size: usize,
    #[serde(default)]
    pub family: Option<ArtifactFamily>,
    #[serde(default)]
    pub strength: Option<f64>,
    /// Full generator spec; `count` is replaced by the split counts.
    #[serde(default)]
    pub spec: Option<SyntheticSpec>,
}

impl SyntheticSource {
    fn default_size() -> usize {
        32
    }

    pub fn spec(&self, count: usize) -> SyntheticSpec {
        let mut spec = self.spec.clone().unwrap_or_else(|| SyntheticSpec::two_region(count, self.size));
        spec.count = count;
        if let Some(f) = self.family {
            spec.family = f;
        }
        if let Some(s) = self.strength {
            spec.strength = s;
        }
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectorySource {
    pub root: PathBuf,
    /// `path,label,technique` CSV.
    pub manifest: PathBuf,
    #[serde(default)]
    pub test_root: Option<PathBuf>,
    #[serde(default)]
    pub test_manifest: Option<PathBuf>,
    /// Per-class share held out for testing when no test manifest is given.
    #[serde(default = "DirectorySource::default_fraction")]
    pub test_fraction: f64,
    /// 68-row landmark file used to attach region masks to every image.
    #[serde(default)]
    pub landmarks: Option<PathBuf>,
}

impl DirectorySource {
    fn default_fraction() -> f64 {
        0.2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic(SyntheticSource),
    Directory(DirectorySource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "EvalConfig::default_levels")]
    pub fdr_levels: Vec<f64>,
    /// Regions neutralised to build less-forgery test sets.
    #[serde(default = "EvalConfig::default_regions")]
    pub less_forgery: Vec<Region>,
    #[serde(default = "EvalConfig::default_coverage")]
    pub coverage: bool,
}

impl EvalConfig {
    fn default_levels() -> Vec<f64> {
        vec![0.001, 0.0001]
    }
    fn default_regions() -> Vec<Region> {
        Region::ALL.to_vec()
    }
    fn default_coverage() -> bool {
        true
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fdr_levels: Self::default_levels(),
            less_forgery: Self::default_regions(),
            coverage: Self::default_coverage(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisualizeConfig {
    #[serde(default = "VisualizeConfig::default_frames")]
    pub frame_counts: Vec<usize>,
    /// Frame images (PNG, lexicographic order); defaults to the FAKE test
    /// images of the first fake technique.
    #[serde(default)]
    pub frames_dir: Option<PathBuf>,
    #[serde(default = "VisualizeConfig::default_max")]
    pub max_per_group: usize,
    #[serde(default = "VisualizeConfig::default_preview")]
    pub preview_count: usize,
}

impl VisualizeConfig {
    fn default_frames() -> Vec<usize> {
        vec![4, 16, 64, 256]
    }
    fn default_max() -> usize {
        256
    }
    fn default_preview() -> usize {
        8
    }
}

impl Default for VisualizeConfig {
    fn default() -> Self {
        Self {
            frame_counts: Self::default_frames(),
            frames_dir: None,
            max_per_group: Self::default_max(),
            preview_count: Self::default_preview(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationVariant {
    FamMeb,
    Meb,
    Fam,
    Neither,
}

impl AblationVariant {
    pub fn apply(self, base: &EraseConfig) -> EraseConfig {
        let (guidance, multi) = match self {
            AblationVariant::FamMeb => (Guidance::FamGuided, true),
            AblationVariant::Meb => (Guidance::RandomAnchor, true),
            AblationVariant::Fam => (Guidance::FamGuided, false),
            AblationVariant::Neither => (Guidance::RandomAnchor, false),
        };
        EraseConfig {
            guidance,
            blocks: if multi { base.blocks } else { 1 },
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    None,
    Rfm,
    Psfe,
    Re,
    Ae,
}

/// Grid axes; an empty axis keeps the base config's value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub modes: Vec<ModeName>,
    #[serde(default)]
    pub variants: Vec<AblationVariant>,
    /// Square block extents (`H_max = W_max`).
    #[serde(default)]
    pub sizes: Vec<usize>,
    #[serde(default)]
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Checkpoint interval in iterations; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { checkpoint_every: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub dataset: DatasetSource,
    #[serde(default = "ExperimentConfig::default_architecture")]
    pub architecture: Architecture,
    /// Defaults to the identity pipeline (flip only) for synthetic data and
    /// to resize 256 / crop 224 otherwise.
    #[serde(default)]
    pub preprocess: Option<PreprocessConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub augmentation: Augmentation,
    #[serde(default)]
    pub erase_classes: EraseClasses,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub visualize: VisualizeConfig,
    #[serde(default)]
    pub ablation: Option<AblationGrid>,
}

impl ExperimentConfig {
    fn default_architecture() -> Architecture {
        Architecture::ReferenceCnn(CnnConfig::default())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string().replace('\n', " ")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_toml(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| HarnessError::Config("a seed is required (config `seed` or --seed)".into()))
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| HarnessError::Config("an output directory is required (config `out` or --out)".into()))
    }

    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        self.train.validate()?;
        if self.eval.fdr_levels.iter().any(|&l| !(l > 0.0 && l < 1.0)) {
            return Err(HarnessError::Config("FDR levels must lie in (0, 1)".into()));
        }
        if let Some(c) = self.augmentation.erase_config() {
            if c.blocks == 0 || !(0.0..=1.0).contains(&c.probability) || c.max_height == 0 || c.max_width == 0 {
                return Err(HarnessError::Config(format!("invalid erase settings {c:?}")));
            }
        }
        if let Augmentation::Re(p) = &self.augmentation {
            p.validate()?;
        }
        if let Augmentation::Ae(p) = &self.augmentation {
            if !(0.0..=1.0).contains(&p.quantile) {
                return Err(HarnessError::Config("AE quantile outside [0, 1]".into()));
            }
        }
        Ok(())
    }

    /// Effective preprocessing for images of the given size.
    pub fn preprocess_for(&self, height: usize, width: usize) -> PreprocessConfig {
        self.preprocess.unwrap_or_else(|| match self.dataset {
            DatasetSource::Synthetic(_) => PreprocessConfig::identity(height, width),
            DatasetSource::Directory(_) => PreprocessConfig::default(),
        })
    }

    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }
}

// ---------------------------------------------------------------- data

pub struct Datasets {
    pub train: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

pub fn load_datasets(config: &ExperimentConfig) -> Result<Datasets> {
    let seed = config.seed()?;
    match &config.dataset {
        DatasetSource::Synthetic(src) => {
            let train = data::generate_synthetic_dataset(&src.spec(src.train_count), &mut streams::stream(seed, "dataset", 0))?;
            let test = data::generate_synthetic_dataset(&src.spec(src.test_count), &mut streams::stream(seed, "dataset", 1))?;
            Ok(Datasets { train, test })
        }
        DatasetSource::Directory(src) => {
            let read = |root: &Path, manifest: &Path| -> Result<Vec<SampleRecord>> {
                let entries: Vec<ManifestEntry> = data::load_ingest_manifest(manifest)?;
                let (records, report) = data::ingest_directory(root, &entries)?;
                if !report.skipped.is_empty() {
                    log::warn!("{} unreadable files skipped under {}", report.skipped.len(), root.display());
                }
                Ok(records)
            };
            let all = read(&src.root, &src.manifest)?;
            let (mut train, mut test) = match (&src.test_root, &src.test_manifest) {
                (Some(root), Some(manifest)) => (all, read(root, manifest)?),
                (None, None) => split_holdout(all, src.test_fraction, seed)?,
                _ => {
                    return Err(HarnessError::Config(
                        "test_root and test_manifest must be given together".into(),
                    ))
                }
            };
            if let Some(path) = &src.landmarks {
                let landmarks = data::load_landmarks(path)?;
                attach_regions(&mut train, &landmarks)?;
                attach_regions(&mut test, &landmarks)?;
            }
            Ok(Datasets { train, test })
        }
    }
}

fn split_holdout(all: Vec<SampleRecord>, fraction: f64, seed: u64) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(HarnessError::Config(format!("test_fraction {fraction} outside (0, 1)")));
    }
    let mut rng = streams::stream(seed, "dataset", 2);
    let mut held = vec![false; all.len()];
    for label in [Label::Real, Label::Fake] {
        let mut idx: Vec<usize> = (0..all.len()).filter(|&i| all[i].label == label).collect();
        idx.shuffle(&mut rng);
        let n = ((idx.len() as f64) * fraction).ceil() as usize;
        for &i in idx.iter().take(n) {
            held[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (rec, h) in all.into_iter().zip(held) {
        if h {
            test.push(rec);
        } else {
            train.push(rec);
        }
    }
    Ok((train, test))
}

fn attach_regions(records: &mut [SampleRecord], landmarks: &[(f64, f64)]) -> Result<()> {
    let mut cache: BTreeMap<(usize, usize), RegionMasks> = BTreeMap::new();
    for rec in records {
        let key = (rec.image.height(), rec.image.width());
        if !cache.contains_key(&key) {
            cache.insert(key, data::partition_regions(landmarks, key.0, key.1)?);
        }
        rec.region_masks = Some(cache[&key].clone());
    }
    Ok(())
}

fn preprocess_config(config: &ExperimentConfig, records: &[SampleRecord]) -> Result<PreprocessConfig> {
    let first = records
        .first()
        .ok_or_else(|| DataError::EmptyDataset("no samples".into()))?;
    Ok(config.preprocess_for(first.image.height(), first.image.width()))
}

// ---------------------------------------------------------------- training

/// What the augmentation did to one image.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AugmentRecord {
    Untouched,
    Erased(EraseTrace),
    RandomErasing(RandomErasingOutcome),
    Adversarial { erased_pixels: usize },
}

/// Applies the configured augmentation to a preprocessed batch in place.
/// Under FAM-guided mining, attention maps for the whole batch come from one
/// forward/backward pass of the current detector.
pub fn augment_batch<R: Rng + ?Sized>(
    config: &ExperimentConfig,
    det: &dyn Detector,
    images: &mut [Image],
    labels: &[Label],
    rng: &mut R,
) -> Result<(Vec<AugmentRecord>, Option<Vec<ForgeryAttentionMap>>)> {
    let targeted = |l: Label| match config.erase_classes {
        EraseClasses::Both => true,
        EraseClasses::FakeOnly => l == Label::Fake,
    };
    let mut records = vec![AugmentRecord::Untouched; images.len()];
    let mut maps = None;
    match &config.augmentation {
        Augmentation::None => {}
        Augmentation::Rfm(cfg) => {
            if cfg.guidance == Guidance::FamGuided {
                maps = Some(saliency::compute_fams(det, images)?);
            }
            for (k, img) in images.iter_mut().enumerate() {
                if targeted(labels[k]) {
                    let (out, trace) = erasing::sfe(img, maps.as_ref().map(|m| &m[k]), cfg, rng)?;
                    *img = out;
                    records[k] = AugmentRecord::Erased(trace);
                }
            }
        }
        Augmentation::Psfe(cfg) => {
            for (k, img) in images.iter_mut().enumerate() {
                if targeted(labels[k]) {
                    let (out, trace) = erasing::psfe(det, img, cfg, rng)?;
                    *img = out;
                    records[k] = AugmentRecord::Erased(trace);
                }
            }
        }
        Augmentation::Re(params) => {
            for (k, img) in images.iter_mut().enumerate() {
                if targeted(labels[k]) {
                    let (out, outcome) = erasing::random_erasing(img, params, rng)?;
                    *img = out;
                    records[k] = AugmentRecord::RandomErasing(outcome);
                }
            }
        }
        Augmentation::Ae(params) => {
            for (k, img) in images.iter_mut().enumerate() {
                if targeted(labels[k]) {
                    let (out, mask) = erasing::adversarial_erasing(det, img, params, labels[k], rng)?;
                    *img = out;
                    records[k] = AugmentRecord::Adversarial {
                        erased_pixels: mask.count(),
                    };
                }
            }
        }
    }
    Ok((records, maps))
}

/// Freshly initialised detector from the init stream.
pub fn init_detector(config: &ExperimentConfig) -> Result<Box<dyn Detector>> {
    Ok(config.architecture.build(&mut streams::stream(config.seed()?, "init", 0))?)
}

/// The training loop. `losses` receives the flooded loss of every completed
/// iteration, so it is meaningful even when an error is returned.
/// `on_iteration` runs after each parameter update.
pub fn train_detector(
    config: &ExperimentConfig,
    train: &[SampleRecord],
    det: &mut dyn Detector,
    losses: &mut Vec<f64>,
    mut on_iteration: impl FnMut(usize, &dyn Detector) -> Result<()>,
) -> Result<()> {
    config.validate()?;
    let seed = config.seed()?;
    let tc = &config.train;
    if tc.iterations == 0 {
        return Err(HarnessError::Config("train.iterations must be positive".into()));
    }
    let pre = preprocess_config(config, train)?;
    let labels: Vec<Label> = train.iter().map(|r| r.label).collect();
    let mut sampler = BalancedBatchSampler::new(&labels, tc.batch_size, streams::stream(seed, "data", 0))?;
    let mut pre_rng = streams::stream(seed, "preprocess", 0);
    let mut aug_rng = streams::stream(seed, "augment", 0);
    let mut adam = Adam::new(tc.learning_rate, det.parameters().len());
    for iteration in 1..=tc.iterations {
        let idx = sampler.next_batch();
        let mut images = idx
            .iter()
            .map(|&i| imaging::preprocess_train(&train[i].image, &pre, &mut pre_rng))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let batch_labels: Vec<Label> = idx.iter().map(|&i| labels[i]).collect();
        augment_batch(config, det, &mut images, &batch_labels, &mut aug_rng)?;
        let inputs: Vec<_> = images.iter().map(Image::to_tensor).collect();
        match detector::train_step(det, &inputs, &batch_labels, tc, &mut adam) {
            Ok(loss) => losses.push(loss),
            Err(DetectorError::TrainingDiverged { loss, detail }) => {
                return Err(HarnessError::TrainingDiverged {
                    iteration,
                    loss,
                    detail,
                })
            }
            Err(e) => return Err(e.into()),
        }
        on_iteration(iteration, det)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- evaluation

/// Softmax FAKE probability for each image.
pub fn score_images(det: &dyn Detector, images: &[Image]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        out.extend(detector::forward_images(det, chunk)?.iter().map(|l| l.fake_score()));
    }
    Ok(out)
}

pub const STANDARD_SET: &str = "standard";

pub fn less_forgery_set_name(region: Region) -> String {
    format!("less-{region}")
}

/// The standard test set followed by one less-forgery set per configured
/// region: the same REAL samples and every FAKE with that region replaced by
/// a randomly paired REAL sample's pixels.
pub fn build_test_sets(config: &ExperimentConfig, test: &[SampleRecord]) -> Result<Vec<(String, Vec<SampleRecord>)>> {
    let seed = config.seed()?;
    let mut sets = vec![(STANDARD_SET.to_string(), test.to_vec())];
    let reals: Vec<&SampleRecord> = test.iter().filter(|r| r.label == Label::Real).collect();
    let fakes: Vec<&SampleRecord> = test.iter().filter(|r| r.label == Label::Fake).collect();
    if fakes.iter().any(|f| f.region_masks.is_none()) {
        if !config.eval.less_forgery.is_empty() {
            log::warn!("test fakes lack region masks; less-forgery sets skipped");
        }
        return Ok(sets);
    }
    if reals.is_empty() {
        return Ok(sets);
    }
    for &region in &config.eval.less_forgery {
        let mut rng = streams::stream(seed, "less-forgery", region as u64);
        let mut set: Vec<SampleRecord> = reals.iter().map(|&r| r.clone()).collect();
        for fake in &fakes {
            let donor = reals[rng.gen_range(0..reals.len())];
            set.push(data::make_less_forgery(fake, donor, region)?);
        }
        sets.push((less_forgery_set_name(region), set));
    }
    Ok(sets)
}

/// Mean attention coverage of FAKE samples that carry a non-empty forgery
/// mask. Samples whose map is all zero are left out. `None` when nothing
/// qualifies or preprocessing changes the geometry.
pub fn mean_attention_coverage(det: &dyn Detector, set: &[SampleRecord], pre: &PreprocessConfig) -> Result<Option<f64>> {
    let mut images = Vec::new();
    let mut masks = Vec::new();
    for rec in set.iter().filter(|r| r.label == Label::Fake) {
        let Some(mask) = rec.forgery_mask.as_ref().filter(|m| m.iter().any(|&x| x)) else {
            continue;
        };
        let (h, w) = mask.dim();
        if pre.resize != (h, w) || pre.crop != (h, w) {
            log::warn!("preprocessing changes geometry; attention coverage skipped");
            return Ok(None);
        }
        images.push(imaging::preprocess_eval(&rec.image, pre)?);
        masks.push(mask);
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (chunk, mchunk) in images.chunks(64).zip(masks.chunks(64)) {
        for (fam, mask) in saliency::compute_fams(det, chunk)?.iter().zip(mchunk) {
            match metrics::attention_coverage(fam, mask) {
                Ok(c) => {
                    total += c;
                    n += 1;
                }
                Err(MetricsError::UndefinedCoverage(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok((n > 0).then(|| total / n as f64))
}

pub fn evaluate_set(
    config: &ExperimentConfig,
    det: &dyn Detector,
    name: &str,
    set: &[SampleRecord],
    with_coverage: bool,
) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(DataError::EmptyDataset(format!("test set {name} is empty")).into());
    }
    let pre = preprocess_config(config, set)?;
    let images = set
        .iter()
        .map(|r| imaging::preprocess_eval(&r.image, &pre))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let scores = score_images(det, &images)?;
    let samples: Vec<ScoredSample> = scores.iter().zip(set).map(|(&s, r)| ScoredSample::new(s, r.label)).collect();
    let mut report = EvalReport::from_scores(name, &samples, &config.eval.fdr_levels)?;
    if with_coverage {
        report.attention_coverage = mean_attention_coverage(det, set, &pre)?;
    }
    Ok(report)
}

/// Reports for the standard set and every less-forgery set.
pub fn evaluate_detector(config: &ExperimentConfig, det: &dyn Detector, test: &[SampleRecord]) -> Result<Vec<EvalReport>> {
    build_test_sets(config, test)?
        .iter()
        .map(|(name, set)| evaluate_set(config, det, name, set, config.eval.coverage && name == STANDARD_SET))
        .collect()
}

// ---------------------------------------------------------------- manifest

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: serde_json::Value,
    /// `complete`, or `partial` after an aborted command.
    pub status: String,
    #[serde(default)]
    pub error: Option<String>,
    pub commands: Vec<String>,
    pub checkpoints: Vec<String>,
    pub reports: Vec<EvalReport>,
    /// Output-relative path -> checksum.
    pub files: BTreeMap<String, FileRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    fn empty(config: &ExperimentConfig) -> Self {
        Self {
            config: config.snapshot(),
            status: "complete".into(),
            error: None,
            commands: Vec::new(),
            checkpoints: Vec::new(),
            reports: Vec::new(),
            files: BTreeMap::new(),
        }
    }

    pub fn load(out: &Path) -> Result<Self> {
        let path = out.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        serde_json::from_str(&text).map_err(|e| io_err(&path, e))
    }

    fn load_or_new(out: &Path, config: &ExperimentConfig) -> Self {
        let mut m = Self::load(out).unwrap_or_else(|_| Self::empty(config));
        m.config = config.snapshot();
        m
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        let path = out.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))
    }

    /// Listed files that are missing or whose checksum no longer matches.
    pub fn verify(&self, out: &Path) -> Vec<String> {
        self.files
            .iter()
            .filter(|(rel, rec)| file_record(&out.join(rel)).map(|r| &r != *rec).unwrap_or(true))
            .map(|(rel, _)| rel.clone())
            .collect()
    }

    fn note_command(&mut self, name: &str) {
        if !self.commands.iter().any(|c| c == name) {
            self.commands.push(name.into());
        }
    }
}

pub fn file_record(path: &Path) -> Result<FileRecord> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(FileRecord {
        sha256: format!("{:x}", Sha256::digest(&bytes)),
        bytes: bytes.len() as u64,
    })
}

/// Writes files under the output directory and records their checksums.
struct Outputs {
    root: PathBuf,
    manifest: RunManifest,
}

impl Outputs {
    fn open(config: &ExperimentConfig, command: &str) -> Result<Self> {
        let root = config.out_dir()?.to_path_buf();
        fs::create_dir_all(&root).map_err(|e| io_err(&root, e))?;
        let mut manifest = RunManifest::load_or_new(&root, config);
        manifest.note_command(command);
        manifest.status = "complete".into();
        manifest.error = None;
        Ok(Self { root, manifest })
    }

    fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        Ok(p)
    }

    fn record(&mut self, rel: &str) -> Result<()> {
        let rec = file_record(&self.root.join(rel))?;
        self.manifest.files.insert(rel.replace('\\', "/"), rec);
        Ok(())
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(rel)?;
        fs::write(&p, bytes).map_err(|e| io_err(&p, e))?;
        self.record(rel)
    }

    fn finish(self) -> Result<RunManifest> {
        self.manifest.save(&self.root)?;
        Ok(self.manifest)
    }

    fn abort(mut self, err: &HarnessError) -> Result<RunManifest> {
        self.manifest.status = "partial".into();
        self.manifest.error = Some(format!("{}: {err}", err.category()));
        self.manifest.save(&self.root)?;
        Ok(self.manifest)
    }
}

fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

// ---------------------------------------------------------------- commands

/// Materialises the train and test splits under `<out>/data`.
pub fn run_generate(config: &ExperimentConfig) -> Result<RunManifest> {
    config.validate()?;
    let mut outputs = Outputs::open(config, "gen-data")?;
    let sets = load_datasets(config)?;
    for (split, records) in [("train", &sets.train), ("test", &sets.test)] {
        let dir = outputs.path(&format!("data/{split}/x"))?.parent().expect("has parent").to_path_buf();
        for file in data::save_dataset(records, &dir)? {
            let rel = file.strip_prefix(&outputs.root).expect("under out").to_string_lossy().into_owned();
            outputs.record(&rel)?;
        }
    }
    outputs.finish()
}

pub const FINAL_CHECKPOINT: &str = "checkpoints/final.ckpt";

/// Trains from the init stream, writing the loss log, checkpoints and the
/// manifest. On divergence the manifest is written as partial and the error
/// returned.
pub fn run_training(config: &ExperimentConfig) -> Result<RunManifest> {
    config.validate()?;
    let mut outputs = Outputs::open(config, "train")?;
    outputs.manifest.checkpoints.clear();
    let sets = load_datasets(config)?;
    let mut det = init_detector(config)?;
    let mut losses = Vec::new();
    let every = config.output.checkpoint_every;
    let mut saved: Vec<String> = Vec::new();
    let result = train_detector(config, &sets.train, det.as_mut(), &mut losses, |it, d| {
        if every > 0 && it % every == 0 && it != config.train.iterations {
            let rel = format!("checkpoints/iter-{it:06}.ckpt");
            detector::save_checkpoint(d, &outputs.path(&rel)?)?;
            saved.push(rel);
        }
        Ok(())
    });
    let log: String = std::iter::once("iteration,loss\n".to_string())
        .chain(losses.iter().enumerate().map(|(i, l)| format!("{},{l:.12e}\n", i + 1)))
        .collect();
    outputs.write("training_log.csv", log.as_bytes())?;
    for rel in &saved {
        outputs.record(rel)?;
    }
    let last = if result.is_ok() { FINAL_CHECKPOINT.to_string() } else { "checkpoints/last-good.ckpt".into() };
    detector::save_checkpoint(det.as_ref(), &outputs.path(&last)?)?;
    outputs.record(&last)?;
    saved.push(last);
    outputs.manifest.checkpoints = saved;
    match result {
        Ok(()) => outputs.finish(),
        Err(e) => {
            outputs.abort(&e)?;
            Err(e)
        }
    }
}

fn resolve_checkpoint(config: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<PathBuf> {
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => config.out_dir()?.join(FINAL_CHECKPOINT),
    };
    if !path.is_file() {
        return Err(HarnessError::MissingCheckpoint(path));
    }
    Ok(path)
}

/// Scores the standard and less-forgery test sets with a checkpoint.
pub fn run_evaluation(config: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Vec<EvalReport>> {
    config.validate()?;
    let ckpt = resolve_checkpoint(config, checkpoint)?;
    let det = detector::load_checkpoint(&ckpt)?;
    let mut outputs = Outputs::open(config, "eval")?;
    let sets = load_datasets(config)?;
    let reports = evaluate_detector(config, det.as_ref(), &sets.test)?;
    for r in &reports {
        let json = serde_json::to_vec_pretty(r).expect("report serialises");
        outputs.write(&format!("reports/{}.json", r.test_set), &json)?;
    }
    let header = reports[0].csv_header();
    let rows: Vec<Vec<String>> = reports.iter().map(|r| r.csv_row()).collect();
    outputs.write("reports/eval.csv", &csv_bytes(&header, &rows))?;
    outputs.manifest.reports = reports.clone();
    outputs.finish()?;
    Ok(reports)
}

fn save_map(outputs: &mut Outputs, rel_stem: &str, values: &Array2<f64>) -> Result<()> {
    let npy = format!("{rel_stem}.npy");
    let png = format!("{rel_stem}.png");
    let npy_path = outputs.path(&npy)?;
    ndarray_npy::write_npy(&npy_path, values).map_err(|e| io_err(&npy_path, e))?;
    saliency::save_heatmap(values, &outputs.path(&png)?)?;
    outputs.record(&npy)?;
    outputs.record(&png)
}

fn file_stem(tag: &str) -> String {
    tag.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Per-technique average attention maps and their correlation table,
/// frame-count averages over a frame sequence, and per-class average CAMs.
pub fn run_visualization(config: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Vec<String>> {
    config.validate()?;
    let ckpt = resolve_checkpoint(config, checkpoint)?;
    let det = detector::load_checkpoint(&ckpt)?;
    let mut outputs = Outputs::open(config, "visualize")?;
    let sets = load_datasets(config)?;
    let pre = preprocess_config(config, &sets.test)?;
    let vis = &config.visualize;

    let mut groups: BTreeMap<String, Vec<Image>> = BTreeMap::new();
    for rec in &sets.test {
        let g = groups.entry(rec.technique.clone()).or_default();
        if g.len() < vis.max_per_group {
            g.push(imaging::preprocess_eval(&rec.image, &pre)?);
        }
    }
    let mut averages = Vec::new();
    for (tech, images) in &groups {
        if images.is_empty() {
            log::warn!("technique {tech} has no images; skipped");
            continue;
        }
        let fam = saliency::average_fam(det.as_ref(), images)?;
        save_map(&mut outputs, &format!("visualize/fam/{}", file_stem(tech)), fam.values())?;
        if fam.min_max_normalized().is_some() {
            averages.push((tech.clone(), fam));
        } else {
            log::warn!("average map for {tech} is constant; left out of the correlation table");
        }
    }
    if !averages.is_empty() {
        let matrix = saliency::fam_correlation_matrix(&averages)?;
        outputs.write("visualize/correlation.csv", matrix.to_csv().as_bytes())?;
    }

    let frames: Vec<Image> = match &vis.frames_dir {
        Some(dir) => {
            let mut paths: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| io_err(dir, e))?
                .flatten()
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            paths.sort();
            paths
                .iter()
                .map(|p| Image::load_png(p).and_then(|i| imaging::preprocess_eval(&i, &pre)))
                .collect::<std::result::Result<_, _>>()?
        }
        None => {
            let tech = sets.test.iter().find(|r| r.label == Label::Fake).map(|r| r.technique.clone());
            sets.test
                .iter()
                .filter(|r| Some(&r.technique) == tech.as_ref())
                .map(|r| imaging::preprocess_eval(&r.image, &pre))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    if frames.is_empty() {
        log::warn!("no frames available; frame averages skipped");
    } else {
        let mut done = BTreeSet::new();
        for &count in &vis.frame_counts {
            let n = count.min(frames.len());
            if n < count {
                log::warn!("requested {count} frames but only {} available; using {n}", frames.len());
            }
            if n == 0 || !done.insert(n) {
                continue;
            }
            let fam = saliency::average_fam(det.as_ref(), &frames[..n])?;
            save_map(&mut outputs, &format!("visualize/frames/avg-{n:04}"), fam.values())?;
        }
    }

    for class in [Label::Real, Label::Fake] {
        let images: Vec<Image> = sets
            .test
            .iter()
            .filter(|r| r.label == class)
            .take(vis.max_per_group)
            .map(|r| imaging::preprocess_eval(&r.image, &pre))
            .collect::<std::result::Result<_, _>>()?;
        if images.is_empty() {
            continue;
        }
        let mut total: Option<Array2<f64>> = None;
        let mut supported = true;
        for img in &images {
            match detector::compute_cam(det.as_ref(), img, class, true) {
                Ok(cam) => match total.as_mut() {
                    Some(t) => *t += &cam,
                    None => total = Some(cam),
                },
                Err(DetectorError::UnsupportedArchitecture(msg)) => {
                    log::warn!("class activation maps unavailable: {msg}");
                    supported = false;
                    break;
                }
                Err(e) => return Err(e.into()),
            }
        }
        if let (true, Some(mut t)) = (supported, total) {
            t /= images.len() as f64;
            save_map(&mut outputs, &format!("visualize/cam/{}", class.as_str()), &t)?;
        }
    }
    let written: Vec<String> = outputs
        .manifest
        .files
        .keys()
        .filter(|k| k.starts_with("visualize/"))
        .cloned()
        .collect();
    outputs.finish()?;
    Ok(written)
}

/// Applies the configured augmentation to the first training images and
/// writes original / erased pairs, attention heatmaps and the erase records.
pub fn run_erase_preview(config: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Vec<String>> {
    config.validate()?;
    let det = match checkpoint {
        Some(p) if p.is_file() => detector::load_checkpoint(p)?,
        Some(p) => return Err(HarnessError::MissingCheckpoint(p.to_path_buf())),
        None => match resolve_checkpoint(config, None) {
            Ok(p) => detector::load_checkpoint(&p)?,
            Err(_) => init_detector(config)?,
        },
    };
    let mut outputs = Outputs::open(config, "erase-preview")?;
    let sets = load_datasets(config)?;
    let pre = preprocess_config(config, &sets.train)?;
    let half = (config.visualize.preview_count / 2).max(1);
    let picks: Vec<&SampleRecord> = [Label::Real, Label::Fake]
        .iter()
        .flat_map(|&l| sets.train.iter().filter(move |r| r.label == l).take(half))
        .collect();
    let originals = picks
        .iter()
        .map(|r| imaging::preprocess_eval(&r.image, &pre))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let labels: Vec<Label> = picks.iter().map(|r| r.label).collect();
    let mut erased = originals.clone();
    let (records, maps) = augment_batch(config, det.as_ref(), &mut erased, &labels, &mut streams::stream(config.seed()?, "augment", 0))?;
    let mut written = Vec::new();
    for (k, rec) in picks.iter().enumerate() {
        let stem = format!("preview/{}", file_stem(&rec.id));
        for (suffix, img) in [("original", &originals[k]), ("erased", &erased[k])] {
            let rel = format!("{stem}-{suffix}.png");
            img.save_png(&outputs.path(&rel)?)?;
            outputs.record(&rel)?;
            written.push(rel);
        }
        if let Some(maps) = &maps {
            save_map(&mut outputs, &format!("{stem}-fam"), maps[k].values())?;
            written.push(format!("{stem}-fam.png"));
        }
    }
    let summary: Vec<serde_json::Value> = picks
        .iter()
        .zip(&records)
        .map(|(r, a)| serde_json::json!({ "id": r.id, "label": r.label, "augmentation": a }))
        .collect();
    outputs.write("preview/records.json", &serde_json::to_vec_pretty(&summary).expect("serialises"))?;
    written.push("preview/records.json".into());
    outputs.finish()?;
    Ok(written)
}

// ---------------------------------------------------------------- ablation

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub name: String,
    pub mode: ModeName,
    pub variant: Option<AblationVariant>,
    pub size: Option<usize>,
    pub probability: Option<f64>,
    pub seed: u64,
    pub config: ExperimentConfig,
}

fn mode_augmentation(mode: ModeName, base: &Augmentation) -> Augmentation {
    let erase = base.erase_config().cloned().unwrap_or_default();
    match (mode, base) {
        (ModeName::None, _) => Augmentation::None,
        (ModeName::Rfm, _) => Augmentation::Rfm(erase),
        (ModeName::Psfe, _) => Augmentation::Psfe(erase),
        (ModeName::Re, Augmentation::Re(p)) => Augmentation::Re(p.clone()),
        (ModeName::Re, _) => Augmentation::Re(RandomErasingParams::default()),
        (ModeName::Ae, Augmentation::Ae(p)) => Augmentation::Ae(p.clone()),
        (ModeName::Ae, _) => Augmentation::Ae(AdversarialErasingParams::default()),
    }
}

fn base_mode(a: &Augmentation) -> ModeName {
    match a {
        Augmentation::None => ModeName::None,
        Augmentation::Rfm(_) => ModeName::Rfm,
        Augmentation::Psfe(_) => ModeName::Psfe,
        Augmentation::Re(_) => ModeName::Re,
        Augmentation::Ae(_) => ModeName::Ae,
    }
}

/// Expands the grid into cells: modes x (variants x sizes x probabilities
/// for erasing modes) x seeds.
pub fn expand_grid(base: &ExperimentConfig, grid: &AblationGrid) -> Result<Vec<AblationCell>> {
    let modes = if grid.modes.is_empty() { vec![base_mode(&base.augmentation)] } else { grid.modes.clone() };
    let seeds = if grid.seeds.is_empty() { vec![base.seed()?] } else { grid.seeds.clone() };
    let erasing_axes = !grid.variants.is_empty() || !grid.sizes.is_empty() || !grid.probabilities.is_empty();
    if erasing_axes && !modes.iter().any(|m| matches!(m, ModeName::Rfm | ModeName::Psfe)) {
        return Err(HarnessError::Config("erasing axes given but no rfm/psfe mode in the grid".into()));
    }
    if !grid.variants.is_empty() && modes.iter().any(|m| *m == ModeName::Psfe) {
        return Err(HarnessError::Config("guidance variants apply to rfm only".into()));
    }
    let opt = |v: &[usize]| if v.is_empty() { vec![None] } else { v.iter().map(|&x| Some(x)).collect() };
    let sizes = opt(&grid.sizes);
    let probs: Vec<Option<f64>> =
        if grid.probabilities.is_empty() { vec![None] } else { grid.probabilities.iter().map(|&p| Some(p)).collect() };
    let variants: Vec<Option<AblationVariant>> =
        if grid.variants.is_empty() { vec![None] } else { grid.variants.iter().map(|&v| Some(v)).collect() };
    let mut cells = Vec::new();
    for &mode in &modes {
        let erasing = matches!(mode, ModeName::Rfm | ModeName::Psfe);
        let combos: Vec<(Option<AblationVariant>, Option<usize>, Option<f64>)> = if erasing {
            let mut out = Vec::new();
            for &v in &variants {
                for &s in &sizes {
                    for &p in &probs {
                        out.push((v, s, p));
                    }
                }
            }
            out
        } else {
            vec![(None, None, None)]
        };
        for (variant, size, probability) in combos {
            if let Some(v) = variant {
                let blocks = base.augmentation.erase_config().map(|c| c.blocks).unwrap_or(3);
                if matches!(v, AblationVariant::FamMeb | AblationVariant::Meb) && blocks < 2 {
                    return Err(HarnessError::Config("multi-block variants need a base block count above 1".into()));
                }
            }
            for &seed in &seeds {
                let mut config = base.clone();
                config.seed = Some(seed);
                config.ablation = None;
                config.augmentation = mode_augmentation(mode, &base.augmentation);
                if let Augmentation::Rfm(c) | Augmentation::Psfe(c) = &mut config.augmentation {
                    if let Some(v) = variant {
                        *c = v.apply(c);
                    }
                    if let Some(s) = size {
                        c.max_height = s;
                        c.max_width = s;
                    }
                    if let Some(p) = probability {
                        c.probability = p;
                    }
                }
                let mut name = format!("{mode:?}").to_lowercase();
                if let Some(v) = variant {
                    name += &format!("-{}", serde_json::to_value(v).expect("variant").as_str().expect("str"));
                }
                if let Some(s) = size {
                    name += &format!("-size{s}");
                }
                if let Some(p) = probability {
                    name += &format!("-p{p}");
                }
                name += &format!("-seed{seed}");
                cells.push(AblationCell {
                    name,
                    mode,
                    variant,
                    size,
                    probability,
                    seed,
                    config,
                });
            }
        }
    }
    Ok(cells)
}

/// Trains and evaluates one cell in memory.
pub fn run_cell(config: &ExperimentConfig, sets: &Datasets) -> Result<(Box<dyn Detector>, Vec<f64>, Vec<EvalReport>)> {
    let mut det = init_detector(config)?;
    let mut losses = Vec::new();
    train_detector(config, &sets.train, det.as_mut(), &mut losses, |_, _| Ok(()))?;
    let reports = evaluate_detector(config, det.as_ref(), &sets.test)?;
    Ok((det, losses, reports))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl AblationTable {
    pub fn to_csv(&self) -> Vec<u8> {
        csv_bytes(&self.header, &self.rows)
    }
}

fn cell_row(cell: &AblationCell, reports: &[EvalReport]) -> (Vec<String>, Vec<String>) {
    let mut header: Vec<String> = ["cell", "mode", "variant", "size", "probability", "seed"].map(String::from).to_vec();
    let variant = cell
        .config
        .augmentation
        .erase_config()
        .filter(|_| cell.mode == ModeName::Rfm)
        .map(|c| c.variant_label().to_string())
        .unwrap_or_default();
    let mut row = vec![
        cell.name.clone(),
        format!("{:?}", cell.mode).to_uppercase(),
        variant,
        cell.size.map(|s| s.to_string()).unwrap_or_default(),
        cell.probability.map(|p| p.to_string()).unwrap_or_default(),
        cell.seed.to_string(),
    ];
    for r in reports {
        header.push(format!("{}_auc", r.test_set));
        row.push(format!("{:.6}", r.auc));
        for e in &r.tdr {
            header.push(format!("{}_tdr@{}", r.test_set, e.fdr));
            row.push(format!("{:.6}", e.tdr));
        }
        if r.test_set == STANDARD_SET {
            header.push(format!("{}_coverage", r.test_set));
            row.push(r.attention_coverage.map(|c| format!("{c:.6}")).unwrap_or_default());
        }
    }
    (header, row)
}

/// Runs every grid cell, writes each cell's checkpoint and reports under
/// `<out>/ablation/<cell>/` and the table to `<out>/ablation.csv`.
pub fn run_ablation(config: &ExperimentConfig) -> Result<AblationTable> {
    let grid = config.ablation.clone().unwrap_or_default();
    let cells = expand_grid(config, &grid)?;
    for c in &cells {
        c.config.validate()?;
    }
    let mut outputs = Outputs::open(config, "ablate")?;
    let mut cache: BTreeMap<u64, Datasets> = BTreeMap::new();
    let mut header: Option<Vec<String>> = None;
    let mut rows = Vec::new();
    for cell in &cells {
        if !cache.contains_key(&cell.seed) {
            cache.insert(cell.seed, load_datasets(&cell.config)?);
        }
        log::info!("ablation cell {}", cell.name);
        let (det, _, reports) = run_cell(&cell.config, &cache[&cell.seed])?;
        let dir = format!("ablation/{}", cell.name);
        let ckpt = format!("{dir}/final.ckpt");
        detector::save_checkpoint(det.as_ref(), &outputs.path(&ckpt)?)?;
        outputs.record(&ckpt)?;
        for r in &reports {
            outputs.write(&format!("{dir}/{}.json", r.test_set), &serde_json::to_vec_pretty(r).expect("serialises"))?;
        }
        let (h, row) = cell_row(cell, &reports);
        match &header {
            None => header = Some(h),
            Some(prev) if *prev != h => {
                return Err(HarnessError::Config("grid cells produced different report columns".into()))
            }
            _ => {}
        }
        rows.push(row);
    }
    let table = AblationTable {
        header: header.unwrap_or_default(),
        rows,
    };
    outputs.write("ablation.csv", &table.to_csv())?;
    outputs.finish()?;
    Ok(table)
}
