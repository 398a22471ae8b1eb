//! Configuration-driven orchestration of every stage, plus the stage functions
//! the command-line subcommands call individually.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! manifest.csv        ingest
//! splits.csv          split (manifest with a split column)
//! stain_model.json    normalize: target stain model
//! normalized/         normalize: one PNG per sample, `{sample_id}.png`
//! normalized.csv      normalize: splits.csv pointing at normalized/
//! augmented/          augment: `{sample_id}__{step}.png`
//! provenance.csv      augment: originals (step "original") and outputs
//! features.bin        features: one tensor per image key
//! head.hfwt           train: best-validation checkpoint
//! head.final.hfwt     train: final-epoch parameters
//! history.csv         train
//! report.json         evaluate
//! run.json            run record
//! ```
//!
//! Feature keys are the sample id for unaugmented images and
//! `{sample_id}__{step}` for augmented ones, which is also the PNG file stem.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use walkdir::WalkDir;

use crate::augment::{self, AugmentError, ProvenanceRecord, ORIGINAL};
use crate::container::{sha256_hex, Container, ContainerError, Tensor};
use crate::dataset::{
    self, ClassLabel, ClassOverrides, DatasetError, DatasetManifest, SampleRecord, Split, SplitAssignment,
};
use crate::head::{self, HeadConfig, HeadError, HeadParams, HeadVariant, TrainConfig, TrainOutcome};
use crate::image::{ImageError, ImageTensor};
use crate::metrics::{self, EvaluationReport, MetricsError};
use crate::stain::{self, SnmfParams, StainError, StainModel};
use crate::synthetic;
use crate::vit::{self, VitConfig, VitError, VitWeights};

/// Separates a sample id from an augmentation step in feature keys.
pub const STEP_SEPARATOR: &str = "__";

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const SPLITS_FILE: &str = "splits.csv";
pub const STAIN_MODEL_FILE: &str = "stain_model.json";
pub const NORMALIZED_DIR: &str = "normalized";
pub const NORMALIZED_MANIFEST_FILE: &str = "normalized.csv";
pub const AUGMENTED_DIR: &str = "augmented";
pub const PROVENANCE_FILE: &str = "provenance.csv";
pub const FEATURES_FILE: &str = "features.bin";
pub const HEAD_FILE: &str = "head.hfwt";
pub const HISTORY_FILE: &str = "history.csv";
pub const REPORT_FILE: &str = "report.json";
pub const RUN_RECORD_FILE: &str = "run.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Split,
    Normalize,
    Augment,
    Features,
    Train,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::Split,
        Stage::Normalize,
        Stage::Augment,
        Stage::Features,
        Stage::Train,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Split => "split",
            Stage::Normalize => "normalize",
            Stage::Augment => "augment",
            Stage::Features => "features",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// What went wrong inside a stage.
#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Stain(#[from] StainError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Vit(#[from] VitError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("stain normalization of {path}: {source}")]
    Normalize {
        path: PathBuf,
        #[source]
        source: StainError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("required input {0} does not exist")]
    Missing(PathBuf),
    #[error("{0}")]
    Data(String),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: StageError,
    },
}

impl PipelineError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::Stage { stage, .. } => Some(*stage),
            PipelineError::Config(_) => None,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StageError + '_ {
    move |source| StageError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunPaths {
    /// BreakHis-style tree scanned by ingest.
    pub dataset_root: PathBuf,
    /// Reference image defining the target stain basis.
    pub target_image: PathBuf,
    /// Encoder weights container.
    pub weights: PathBuf,
    pub output_dir: PathBuf,
    /// Optional `segment,class` CSV for nonstandard folder names.
    #[serde(default)]
    pub class_overrides: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadSpec {
    pub variant: HeadVariant,
    pub hidden_dim: usize,
    pub dropout_p: f64,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            variant: HeadVariant::OneLayer,
            hidden_dim: 256,
            dropout_p: 0.5,
        }
    }
}

impl HeadSpec {
    pub fn config(&self, in_dim: usize) -> HeadConfig {
        match self.variant {
            HeadVariant::OneLayer => HeadConfig::one_layer(in_dim, ClassLabel::ALL.len()),
            HeadVariant::TwoLayer => {
                HeadConfig::two_layer(in_dim, self.hidden_dim, ClassLabel::ALL.len(), self.dropout_p)
            }
        }
    }
}

/// Optional transforms; a disabled stage passes its input through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageToggles {
    pub normalize: bool,
    pub augment: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self {
            normalize: true,
            augment: true,
        }
    }
}

/// Everything a run needs. The top-level `seed` replaces the seeds inside
/// `snmf` and `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paths: RunPaths,
    #[serde(default = "default_magnification")]
    pub magnification: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub snmf: SnmfParams,
    #[serde(default)]
    pub head: HeadSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub stages: StageToggles,
}

fn default_magnification() -> u32 {
    40
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.paths.resolve_against(base);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |e: &dyn fmt::Display| PipelineError::Config(e.to_string());
        if !dataset::MAGNIFICATIONS.contains(&self.magnification) {
            return Err(bad(&DatasetError::BadMagnification(self.magnification)));
        }
        self.snmf_params().validate().map_err(|e| bad(&e))?;
        self.train_config().validate().map_err(|e| bad(&e))?;
        // in_dim is checked against the features later
        self.head.config(1).validate().map_err(|e| bad(&e))?;
        Ok(())
    }

    pub fn snmf_params(&self) -> SnmfParams {
        SnmfParams {
            seed: self.seed,
            ..self.snmf
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train
        }
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

impl RunPaths {
    fn resolve_against(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset_root);
        fix(&mut self.target_image);
        fix(&mut self.weights);
        fix(&mut self.output_dir);
        if let Some(p) = self.class_overrides.as_mut() {
            fix(p);
        }
    }
}

/// An image on disk and the key it is known by downstream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageItem {
    pub key: String,
    pub path: PathBuf,
}

impl ImageItem {
    pub fn of(record: &SampleRecord) -> Self {
        Self {
            key: record.sample_id.clone(),
            path: record.path.clone(),
        }
    }
}

pub fn feature_key(sample_id: &str, step: &str) -> String {
    if step == ORIGINAL {
        sample_id.to_string()
    } else {
        format!("{sample_id}{STEP_SEPARATOR}{step}")
    }
}

/// `(sample_id, step)`; the step of an unaugmented key is [`ORIGINAL`].
pub fn split_feature_key(key: &str) -> (&str, &str) {
    key.split_once(STEP_SEPARATOR).unwrap_or((key, ORIGINAL))
}

/// Every image file under `dir`, keyed by file stem, in path order.
pub fn list_images(dir: &Path) -> Result<Vec<ImageItem>, StageError> {
    if !dir.is_dir() {
        return Err(StageError::Missing(dir.to_path_buf()));
    }
    let mut items = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| StageError::Data(e.to_string()))?;
        let path = entry.path();
        if entry.file_type().is_file() && dataset::has_image_extension(path) {
            let key = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            items.push(ImageItem {
                key,
                path: path.to_path_buf(),
            });
        }
    }
    Ok(items)
}

fn require(path: &Path) -> Result<(), StageError> {
    if path.exists() {
        Ok(())
    } else {
        Err(StageError::Missing(path.to_path_buf()))
    }
}

/// Scans the dataset tree. Fails when nothing usable is found or a sample id
/// contains the feature-key separator.
pub fn ingest(root: &Path, magnification: u32, overrides: Option<&Path>) -> Result<DatasetManifest, StageError> {
    let overrides = overrides.map(ClassOverrides::from_csv).transpose()?;
    let manifest = dataset::scan_dataset(root, magnification, overrides.as_ref())?;
    for s in &manifest.skipped {
        log::warn!("skipped {}: {}", s.path.display(), s.reason);
    }
    if manifest.is_empty() {
        return Err(StageError::Data(format!(
            "no {magnification}X images found under {}",
            root.display()
        )));
    }
    if let Some(r) = manifest.records().iter().find(|r| r.sample_id.contains(STEP_SEPARATOR)) {
        return Err(StageError::Data(format!(
            "sample id {:?} contains the reserved sequence {STEP_SEPARATOR:?}",
            r.sample_id
        )));
    }
    Ok(manifest)
}

pub fn estimate_target(target_image: &Path, params: &SnmfParams) -> Result<StainModel, StageError> {
    require(target_image)?;
    let image = ImageTensor::open(target_image)?;
    stain::estimate_stain_model(&image, params).map_err(|source| StageError::Normalize {
        path: target_image.to_path_buf(),
        source,
    })
}

/// Normalizes every item onto `target`, writing `{key}.png` into `out_dir`.
pub fn normalize_images(
    items: &[ImageItem],
    target: &StainModel,
    params: &SnmfParams,
    out_dir: &Path,
) -> Result<Vec<ImageItem>, StageError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    items
        .par_iter()
        .map(|item| {
            let image = ImageTensor::open(&item.path)?;
            let normalized =
                stain::normalize_to_target(&image, target, params).map_err(|source| StageError::Normalize {
                    path: item.path.clone(),
                    source,
                })?;
            let path = out_dir.join(format!("{}.png", item.key));
            normalized.save_png(&path)?;
            Ok(ImageItem {
                key: item.key.clone(),
                path,
            })
        })
        .collect()
}

/// Runs each record's class plan. Provenance lists the original first
/// (step [`ORIGINAL`], its own path), then the plan's outputs in order.
pub fn augment_records(
    records: &[SampleRecord],
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<ProvenanceRecord>, StageError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let per_sample: Vec<Vec<ProvenanceRecord>> = records
        .par_iter()
        .map(|r| {
            let image = ImageTensor::open(&r.path)?;
            let plan = augment::plan_for_class(r.class_label);
            let outputs = augment::augment_sample(&r.sample_id, &image, &plan, seed)?;
            let mut rows = vec![ProvenanceRecord {
                output_path: r.path.display().to_string(),
                input_id: r.sample_id.clone(),
                class: r.class_label.name().to_string(),
                step: ORIGINAL.to_string(),
            }];
            rows.extend(augment::save_augmented(out_dir, &outputs)?);
            Ok::<_, StageError>(rows)
        })
        .collect::<Result<_, _>>()?;
    Ok(per_sample.into_iter().flatten().collect())
}

pub fn write_provenance(path: &Path, rows: &[ProvenanceRecord]) -> Result<(), StageError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    augment::write_provenance_csv(std::io::BufWriter::new(file), rows)?;
    Ok(())
}

pub fn read_provenance(path: &Path) -> Result<Vec<ProvenanceRecord>, StageError> {
    let csv_err = |source| StageError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    reader.deserialize().collect::<Result<_, _>>().map_err(csv_err)
}

/// Encodes every item into a `[embed_dim]` tensor named by its key.
pub fn extract_features(items: &[ImageItem], weights: &VitWeights) -> Result<Container, StageError> {
    let encoded: Vec<(String, Vec<f32>)> = items
        .par_iter()
        .map(|item| {
            let image = ImageTensor::open(&item.path)?;
            let (id, step) = split_feature_key(&item.key);
            let input = augment::finalize(&image, id, step);
            Ok((item.key.clone(), vit::encode(&input, weights)?))
        })
        .collect::<Result<_, StageError>>()?;
    let mut c = Container::new();
    for (key, feats) in encoded {
        if c.tensors.contains_key(&key) {
            return Err(StageError::Data(format!("duplicate image key {key:?}")));
        }
        c.insert(key, Tensor::new(vec![feats.len()], feats));
    }
    c.metadata
        .insert("embed_dim".into(), weights.config.embed_dim.to_string());
    Ok(c)
}

/// Feature rows and class labels for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatures {
    pub keys: Vec<String>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<usize>,
}

/// Collects the features of `split`. Augmented keys are included only when
/// `with_augmented` is set; every sample of the split must have an
/// unaugmented feature.
pub fn select_features(
    features: &Container,
    manifest: &DatasetManifest,
    assignment: &SplitAssignment,
    split: Split,
    with_augmented: bool,
) -> Result<LabeledFeatures, StageError> {
    let index = manifest.index();
    for id in assignment.ids(split) {
        if features.get(id).is_none() {
            return Err(StageError::Data(format!("{split} sample {id} has no feature vector")));
        }
    }
    let mut out = LabeledFeatures {
        keys: Vec::new(),
        x: Vec::new(),
        y: Vec::new(),
    };
    for (key, tensor) in &features.tensors {
        let (id, step) = split_feature_key(key);
        if assignment.get(id) != Some(split) || (step != ORIGINAL && !with_augmented) {
            continue;
        }
        let record = index
            .get(id)
            .ok_or_else(|| StageError::Data(format!("feature {key} has no manifest entry")))?;
        out.keys.push(key.clone());
        out.x.push(tensor.data.iter().map(|&v| f64::from(v)).collect());
        out.y.push(record.class_label.index());
    }
    Ok(out)
}

fn feature_dim(features: &Container) -> Result<usize, StageError> {
    let dims: Vec<usize> = features.tensors.values().map(Tensor::len).collect();
    match dims.first() {
        None => Err(StageError::Data("features file holds no tensors".into())),
        Some(&d) if dims.iter().all(|&x| x == d) => Ok(d),
        Some(_) => Err(StageError::Data("feature vectors differ in length".into())),
    }
}

/// Trains a head on the train split (augmented included) and validates on
/// the validation split.
pub fn train_head(
    features: &Container,
    manifest: &DatasetManifest,
    assignment: &SplitAssignment,
    head: &HeadSpec,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, StageError> {
    let head_cfg = head.config(feature_dim(features)?);
    let train = select_features(features, manifest, assignment, Split::Train, true)?;
    let val = select_features(features, manifest, assignment, Split::Validation, false)?;
    log::info!(
        "training {:?} head on {} vectors, validating on {}",
        head.variant,
        train.x.len(),
        val.x.len()
    );
    Ok(head::train(&train.x, &train.y, &val.x, &val.y, &head_cfg, cfg)?)
}

/// Saves the best checkpoint to `path`, the final one beside it and the
/// per-epoch history.
pub fn save_training(outcome: &TrainOutcome, path: &Path, history: &Path) -> Result<PathBuf, StageError> {
    outcome.best_params.save(path)?;
    let final_path = final_checkpoint_path(path);
    outcome.final_params.save(&final_path)?;
    let file = fs::File::create(history).map_err(io_err(history))?;
    head::write_history_csv(std::io::BufWriter::new(file), &outcome.history).map_err(|source| StageError::Csv {
        path: history.to_path_buf(),
        source,
    })?;
    Ok(final_path)
}

/// `head.hfwt` → `head.final.hfwt`.
pub fn final_checkpoint_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    match path.extension() {
        Some(ext) => path.with_file_name(format!("{stem}.final.{}", ext.to_string_lossy())),
        None => path.with_file_name(format!("{stem}.final")),
    }
}

/// Predicts every unaugmented sample of `split` and builds the report.
/// Metadata names the model by the SHA-256 of its parameter container.
pub fn evaluate_head(
    params: &HeadParams,
    features: &Container,
    manifest: &DatasetManifest,
    assignment: &SplitAssignment,
    split: Split,
) -> Result<EvaluationReport, StageError> {
    let data = select_features(features, manifest, assignment, split, false)?;
    if data.x.len() != assignment.ids(split).count() {
        return Err(StageError::Data(format!("{split} split and features disagree")));
    }
    let preds: Vec<usize> = data.x.iter().map(|x| head::predict(x, params)).collect();
    let mut report = metrics::evaluate_predictions(&preds, &data.y, &ClassLabel::names())?;
    let model_bytes = params.to_container().to_bytes()?;
    let m = &mut report.metadata;
    m.insert("model_id".into(), sha256_hex(&model_bytes));
    m.insert(
        "head".into(),
        serde_json::to_string(&params.config.variant).expect("variant serializes"),
    );
    m.insert("split".into(), split.to_string());
    m.insert("n_samples".into(), data.x.len().to_string());
    Ok(report)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StageError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| StageError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, StageError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| StageError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// SHA-256 of a file, or of a directory as the digest of its sorted
/// `relative path, file digest` lines.
pub fn checksum(path: &Path) -> Result<String, StageError> {
    if path.is_file() {
        return Ok(sha256_hex(&fs::read(path).map_err(io_err(path))?));
    }
    let mut hasher = Sha256::new();
    for entry in WalkDir::new(path).sort_by_file_name() {
        let entry = entry.map_err(|e| StageError::Data(e.to_string()))?;
        if entry.file_type().is_file() {
            let rel = entry.path().strip_prefix(path).expect("walk stays under root");
            let digest = sha256_hex(&fs::read(entry.path()).map_err(io_err(entry.path()))?);
            hasher.update(format!("{}\t{digest}\n", rel.display()).as_bytes());
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub seconds: f64,
    /// Disabled by a stage toggle; input passed through.
    pub skipped: bool,
}

/// Written to `run.json`; the only artifact carrying wall-clock data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub stages: Vec<StageRecord>,
    /// Output name → SHA-256.
    pub artifacts: BTreeMap<String, String>,
    pub error: Option<String>,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

struct Runner<'a> {
    config: &'a RunConfig,
    out: PathBuf,
    record: RunRecord,
}

impl Runner<'_> {
    fn stage<T>(
        &mut self,
        stage: Stage,
        skipped: bool,
        f: impl FnOnce(&Path) -> Result<T, StageError>,
    ) -> Result<T, PipelineError> {
        log::info!("{stage}{}", if skipped { " (skipped)" } else { "" });
        let start = Instant::now();
        let result = f(&self.out);
        self.record.stages.push(StageRecord {
            stage,
            seconds: start.elapsed().as_secs_f64(),
            skipped,
        });
        result.map_err(|source| PipelineError::Stage { stage, source })
    }

    fn artifact(&mut self, stage: Stage, name: &str) -> Result<(), PipelineError> {
        let sum = checksum(&self.out.join(name)).map_err(|source| PipelineError::Stage { stage, source })?;
        self.record.artifacts.insert(name.to_string(), sum);
        Ok(())
    }

    fn finish(&mut self, error: Option<&PipelineError>) {
        self.record.finished_unix = unix_now();
        self.record.error = error.map(|e| e.to_string());
        let path = self.out.join(RUN_RECORD_FILE);
        if let Err(e) = write_json(&path, &self.record) {
            log::error!("cannot write run record: {e}");
        }
    }
}

/// Runs every stage in order. On failure the outputs written so far are
/// kept and `run.json` records the error.
pub fn run_pipeline(config: &RunConfig) -> Result<RunRecord, PipelineError> {
    config.validate()?;
    let out = config.paths.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| PipelineError::Config(format!("cannot create {}: {e}", out.display())))?;
    let mut runner = Runner {
        config,
        out,
        record: RunRecord {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config.hash(),
            config: config.clone(),
            started_unix: unix_now(),
            finished_unix: 0,
            stages: Vec::new(),
            artifacts: BTreeMap::new(),
            error: None,
        },
    };
    let result = run_stages(&mut runner);
    runner.finish(result.as_ref().err());
    result.map(|()| runner.record)
}

fn run_stages(r: &mut Runner<'_>) -> Result<(), PipelineError> {
    let cfg = r.config;
    let paths = &cfg.paths;

    let manifest = r.stage(Stage::Ingest, false, |out| {
        let m = ingest(&paths.dataset_root, cfg.magnification, paths.class_overrides.as_deref())?;
        dataset::save_manifest(&out.join(MANIFEST_FILE), &m, None)?;
        Ok(m)
    })?;
    r.artifact(Stage::Ingest, MANIFEST_FILE)?;

    let assignment = r.stage(Stage::Split, false, |out| {
        let s = dataset::stratified_split(&manifest, cfg.seed)?;
        let a = s.assignment();
        dataset::save_manifest(&out.join(SPLITS_FILE), &manifest, Some(&a))?;
        Ok(a)
    })?;
    r.artifact(Stage::Split, SPLITS_FILE)?;

    let snmf = cfg.snmf_params();
    let manifest = r.stage(Stage::Normalize, !cfg.stages.normalize, |out| {
        if !cfg.stages.normalize {
            return Ok(manifest);
        }
        let target = estimate_target(&paths.target_image, &snmf)?;
        write_json(&out.join(STAIN_MODEL_FILE), &target)?;
        let items: Vec<ImageItem> = manifest.records().iter().map(ImageItem::of).collect();
        let done = normalize_images(&items, &target, &snmf, &out.join(NORMALIZED_DIR))?;
        let records = manifest
            .records()
            .iter()
            .zip(done)
            .map(|(rec, item)| SampleRecord {
                path: item.path,
                ..rec.clone()
            })
            .collect();
        let normalized = DatasetManifest::from_records(records)?;
        dataset::save_manifest(&out.join(NORMALIZED_MANIFEST_FILE), &normalized, Some(&assignment))?;
        Ok(normalized)
    })?;
    if cfg.stages.normalize {
        for name in [STAIN_MODEL_FILE, NORMALIZED_DIR, NORMALIZED_MANIFEST_FILE] {
            r.artifact(Stage::Normalize, name)?;
        }
    }

    let train_records: Vec<SampleRecord> = manifest
        .records()
        .iter()
        .filter(|rec| assignment.get(&rec.sample_id) == Some(Split::Train))
        .cloned()
        .collect();
    let augmented = r.stage(Stage::Augment, !cfg.stages.augment, |out| {
        if !cfg.stages.augment {
            return Ok(Vec::new());
        }
        let rows = augment_records(&train_records, cfg.seed, &out.join(AUGMENTED_DIR))?;
        write_provenance(&out.join(PROVENANCE_FILE), &rows)?;
        Ok(rows)
    })?;
    if cfg.stages.augment {
        r.artifact(Stage::Augment, AUGMENTED_DIR)?;
        r.artifact(Stage::Augment, PROVENANCE_FILE)?;
    }

    let features = r.stage(Stage::Features, false, |out| {
        require(&paths.weights)?;
        let weights = vit::load_weights(&paths.weights, None)?;
        let mut items: Vec<ImageItem> = manifest.records().iter().map(ImageItem::of).collect();
        items.extend(augmented.iter().filter(|p| p.step != ORIGINAL).map(|p| ImageItem {
            key: feature_key(&p.input_id, &p.step),
            path: PathBuf::from(&p.output_path),
        }));
        let c = extract_features(&items, &weights)?;
        c.save(&out.join(FEATURES_FILE))?;
        Ok(c)
    })?;
    r.artifact(Stage::Features, FEATURES_FILE)?;

    let outcome = r.stage(Stage::Train, false, |out| {
        let outcome = train_head(&features, &manifest, &assignment, &cfg.head, &cfg.train_config())?;
        save_training(&outcome, &out.join(HEAD_FILE), &out.join(HISTORY_FILE))?;
        Ok(outcome)
    })?;
    let final_name = final_checkpoint_path(Path::new(HEAD_FILE)).display().to_string();
    for name in [HEAD_FILE, final_name.as_str(), HISTORY_FILE] {
        r.artifact(Stage::Train, name)?;
    }

    r.stage(Stage::Evaluate, false, |out| {
        // evaluate the checkpoint as stored, f32-rounded
        let params = HeadParams::load(&out.join(HEAD_FILE))?;
        let mut report = evaluate_head(&params, &features, &manifest, &assignment, Split::Test)?;
        report.metadata.insert("seed".into(), cfg.seed.to_string());
        report
            .metadata
            .insert("best_epoch".into(), outcome.best_epoch.to_string());
        log::info!("test accuracy {:.4}", report.accuracy);
        write_json(&out.join(REPORT_FILE), &report)
    })?;
    r.artifact(Stage::Evaluate, REPORT_FILE)?;
    Ok(())
}

/// Files written by [`write_fixture_bundle`].
#[derive(Debug, Clone)]
pub struct FixtureBundle {
    pub config_path: PathBuf,
    pub config: RunConfig,
}

/// Writes a self-contained synthetic setup under `dir`: a BreakHis-style tree
/// (`per_class` images of `size`x`size` per class), a target image, toy
/// encoder weights and `config.json` pointing at them with relative paths.
pub fn write_fixture_bundle(dir: &Path, per_class: usize, size: u32, seed: u64) -> Result<FixtureBundle, StageError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let data = dir.join("data");
    synthetic::write_fixture(&data, per_class, size, seed).map_err(io_err(&data))?;

    let mut rng = crate::rng::stream(seed, "fixture-target", &[]);
    let h = synthetic::tissue_concentrations(&mut rng, size, size, 20, 10.0, 0.5);
    synthetic::render(&synthetic::HE_REFERENCE, &h, size, size, 255.0).save_png(&dir.join("target.png"))?;

    let weights = VitWeights::random(VitConfig::toy(32, 2, 4), seed)?;
    weights.save(&dir.join("vit_toy.hfwt"))?;

    let config = RunConfig {
        paths: RunPaths {
            dataset_root: "data".into(),
            target_image: "target.png".into(),
            weights: "vit_toy.hfwt".into(),
            output_dir: "out".into(),
            class_overrides: None,
        },
        magnification: 40,
        seed,
        snmf: SnmfParams::default(),
        head: HeadSpec::default(),
        train: TrainConfig::default(),
        stages: StageToggles::default(),
    };
    let config_path = dir.join("config.json");
    fs::write(&config_path, config.to_json() + "\n").map_err(io_err(&config_path))?;
    Ok(FixtureBundle { config_path, config })
}
