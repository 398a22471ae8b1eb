//! Dataset ingestion, manifests and stratified splitting.
//!
//! Scanning accepts the BreakHis layout
//! (`.../benign/SOB/adenosis/<slide>/40X/SOB_B_A-14-22549AB-40-001.png`) or any
//! tree whose path segments name the class, optionally remapped through an
//! override table.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

pub const MAGNIFICATIONS: [u32; 4] = [40, 100, 200, 400];
const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "tif", "tiff"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset root {0} does not exist or is not a directory")]
    MissingRoot(PathBuf),
    #[error("unsupported magnification {0}; expected one of 40, 100, 200, 400")]
    BadMagnification(u32),
    #[error("duplicate sample id {id}: {first} and {second}")]
    DuplicateSampleId {
        id: String,
        first: PathBuf,
        second: PathBuf,
    },
    #[error("class {class} has {count} samples; at least 3 are required to split")]
    ClassTooSmall { class: ClassLabel, count: usize },
    #[error("unknown class label {0:?}")]
    UnknownClass(String),
    #[error("unknown split {0:?}")]
    UnknownSplit(String),
    #[error("manifest {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("walking {path}: {source}")]
    Walk {
        path: PathBuf,
        #[source]
        source: walkdir::Error,
    },
}

/// The five diagnostic classes. Benign subtypes are merged into one class.
///
/// Variant order is alphabetical by name and doubles as the logit index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ClassLabel {
    Benign,
    DuctalCarcinoma,
    LobularCarcinoma,
    MucinousCarcinoma,
    PapillaryCarcinoma,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 5] = [
        ClassLabel::Benign,
        ClassLabel::DuctalCarcinoma,
        ClassLabel::LobularCarcinoma,
        ClassLabel::MucinousCarcinoma,
        ClassLabel::PapillaryCarcinoma,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Benign => "Benign",
            ClassLabel::DuctalCarcinoma => "DuctalCarcinoma",
            ClassLabel::LobularCarcinoma => "LobularCarcinoma",
            ClassLabel::MucinousCarcinoma => "MucinousCarcinoma",
            ClassLabel::PapillaryCarcinoma => "PapillaryCarcinoma",
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            ClassLabel::Benign => "B",
            ClassLabel::DuctalCarcinoma => "DC",
            ClassLabel::LobularCarcinoma => "LC",
            ClassLabel::MucinousCarcinoma => "MC",
            ClassLabel::PapillaryCarcinoma => "PC",
        }
    }

    pub fn names() -> Vec<String> {
        Self::ALL.iter().map(|c| c.name().to_string()).collect()
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassLabel {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        let label = match norm.as_str() {
            "benign" | "b" => ClassLabel::Benign,
            "ductalcarcinoma" | "dc" => ClassLabel::DuctalCarcinoma,
            "lobularcarcinoma" | "lc" => ClassLabel::LobularCarcinoma,
            "mucinouscarcinoma" | "mc" => ClassLabel::MucinousCarcinoma,
            "papillarycarcinoma" | "pc" => ClassLabel::PapillaryCarcinoma,
            _ => return Err(DatasetError::UnknownClass(s.to_string())),
        };
        Ok(label)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub sample_id: String,
    pub path: PathBuf,
    pub class_label: ClassLabel,
    pub magnification: u32,
}

/// A file the scanner saw but could not use.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    records: Vec<SampleRecord>,
    class_counts: BTreeMap<ClassLabel, usize>,
    /// Warnings collected while scanning; not persisted.
    pub skipped: Vec<SkippedFile>,
}

impl DatasetManifest {
    pub fn from_records(records: Vec<SampleRecord>) -> Result<Self, DatasetError> {
        let mut seen: HashMap<&str, &Path> = HashMap::new();
        for r in &records {
            if let Some(first) = seen.insert(&r.sample_id, &r.path) {
                return Err(DatasetError::DuplicateSampleId {
                    id: r.sample_id.clone(),
                    first: first.to_path_buf(),
                    second: r.path.clone(),
                });
            }
        }
        let mut class_counts: BTreeMap<ClassLabel, usize> = ClassLabel::ALL.iter().map(|&c| (c, 0)).collect();
        for r in &records {
            *class_counts.entry(r.class_label).or_default() += 1;
        }
        Ok(Self {
            records,
            class_counts,
            skipped: Vec::new(),
        })
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn class_counts(&self) -> &BTreeMap<ClassLabel, usize> {
        &self.class_counts
    }

    pub fn count(&self, class: ClassLabel) -> usize {
        self.class_counts.get(&class).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, sample_id: &str) -> Option<&SampleRecord> {
        self.records.iter().find(|r| r.sample_id == sample_id)
    }

    pub fn index(&self) -> HashMap<&str, &SampleRecord> {
        self.records.iter().map(|r| (r.sample_id.as_str(), r)).collect()
    }
}

/// Explicit path-segment → class table consulted before the built-in rules.
#[derive(Debug, Clone, Default)]
pub struct ClassOverrides {
    map: HashMap<String, ClassLabel>,
}

impl ClassOverrides {
    pub fn insert(&mut self, segment: &str, class: ClassLabel) {
        self.map.insert(segment.to_ascii_lowercase(), class);
    }

    /// Reads a two-column CSV `segment,class` with a header row.
    pub fn from_csv(path: &Path) -> Result<Self, DatasetError> {
        let csv_err = |source| DatasetError::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
        let mut out = Self::default();
        for row in reader.records() {
            let row = row.map_err(csv_err)?;
            let segment = row.get(0).unwrap_or_default();
            let class: ClassLabel = row.get(1).unwrap_or_default().parse()?;
            out.insert(segment, class);
        }
        Ok(out)
    }

    fn lookup(&self, segment: &str) -> Option<ClassLabel> {
        self.map.get(&segment.to_ascii_lowercase()).copied()
    }
}

fn class_from_segment(segment: &str) -> Option<ClassLabel> {
    let lower = segment.to_ascii_lowercase();
    match lower.as_str() {
        "benign" => return Some(ClassLabel::Benign),
        "ductal_carcinoma" => return Some(ClassLabel::DuctalCarcinoma),
        "lobular_carcinoma" => return Some(ClassLabel::LobularCarcinoma),
        "mucinous_carcinoma" => return Some(ClassLabel::MucinousCarcinoma),
        "papillary_carcinoma" => return Some(ClassLabel::PapillaryCarcinoma),
        _ => {}
    }
    // Directories named directly after a label ("DuctalCarcinoma").
    ClassLabel::ALL
        .iter()
        .copied()
        .find(|c| c.name().eq_ignore_ascii_case(segment))
}

/// BreakHis file names encode the tumour class: `SOB_B_*` benign,
/// `SOB_M_{DC,LC,MC,PC}*` malignant subtypes.
fn class_from_file_stem(stem: &str) -> Option<ClassLabel> {
    let upper = stem.to_ascii_uppercase();
    if upper.starts_with("SOB_B_") {
        return Some(ClassLabel::Benign);
    }
    let rest = upper.strip_prefix("SOB_M_")?;
    let code: String = rest.chars().take_while(|c| c.is_ascii_alphabetic()).collect();
    match code.as_str() {
        "DC" => Some(ClassLabel::DuctalCarcinoma),
        "LC" => Some(ClassLabel::LobularCarcinoma),
        "MC" => Some(ClassLabel::MucinousCarcinoma),
        "PC" => Some(ClassLabel::PapillaryCarcinoma),
        _ => None,
    }
}

fn magnification_from_segment(segment: &str) -> Option<u32> {
    let digits = segment.strip_suffix('X').or_else(|| segment.strip_suffix('x'))?;
    let mag: u32 = digits.parse().ok()?;
    MAGNIFICATIONS.contains(&mag).then_some(mag)
}

/// `SOB_B_A-14-22549AB-40-001` carries the magnification in its second-to-last
/// dash-separated token.
fn magnification_from_file_stem(stem: &str) -> Option<u32> {
    let tokens: Vec<&str> = stem.split('-').collect();
    if tokens.len() < 3 {
        return None;
    }
    let mag: u32 = tokens[tokens.len() - 2].parse().ok()?;
    MAGNIFICATIONS.contains(&mag).then_some(mag)
}

fn classify(rel: &Path, overrides: Option<&ClassOverrides>) -> (Option<ClassLabel>, Option<u32>) {
    let segments: Vec<String> = rel
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect();
    let (dirs, file) = segments.split_at(segments.len().saturating_sub(1));
    let stem = file
        .first()
        .and_then(|f| Path::new(f).file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();

    let class = overrides
        .and_then(|o| dirs.iter().find_map(|s| o.lookup(s)))
        .or_else(|| dirs.iter().rev().find_map(|s| class_from_segment(s)))
        .or_else(|| class_from_file_stem(&stem));
    let mag = dirs
        .iter()
        .rev()
        .find_map(|s| magnification_from_segment(s))
        .or_else(|| magnification_from_file_stem(&stem));
    (class, mag)
}

pub fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .map(|e| {
            let e = e.to_string_lossy().to_ascii_lowercase();
            IMAGE_EXTENSIONS.contains(&e.as_str())
        })
        .unwrap_or(false)
}

/// Builds a manifest of every readable image at `magnification` under `root`.
///
/// Records are ordered lexicographically by path. Files whose header cannot be
/// decoded, or whose class cannot be derived, are listed in
/// [`DatasetManifest::skipped`].
pub fn scan_dataset(
    root: &Path,
    magnification: u32,
    overrides: Option<&ClassOverrides>,
) -> Result<DatasetManifest, DatasetError> {
    if !MAGNIFICATIONS.contains(&magnification) {
        return Err(DatasetError::BadMagnification(magnification));
    }
    if !root.is_dir() {
        return Err(DatasetError::MissingRoot(root.to_path_buf()));
    }

    let mut candidates = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|source| DatasetError::Walk {
            path: root.to_path_buf(),
            source,
        })?;
        if entry.file_type().is_file() && has_image_extension(entry.path()) {
            candidates.push(entry.into_path());
        }
    }
    candidates.sort();

    enum Outcome {
        Keep(SampleRecord),
        Skip(SkippedFile),
        Ignore,
    }

    let outcomes: Vec<Outcome> = candidates
        .par_iter()
        .map(|path| {
            let rel = path.strip_prefix(root).unwrap_or(path);
            let (class, mag) = classify(rel, overrides);
            match mag {
                Some(m) if m == magnification => {}
                Some(_) => return Outcome::Ignore,
                None => {
                    return Outcome::Skip(SkippedFile {
                        path: path.clone(),
                        reason: "magnification not derivable from path".into(),
                    })
                }
            }
            let Some(class_label) = class else {
                return Outcome::Skip(SkippedFile {
                    path: path.clone(),
                    reason: "class not derivable from path".into(),
                });
            };
            if let Err(e) = ::image::image_dimensions(path) {
                return Outcome::Skip(SkippedFile {
                    path: path.clone(),
                    reason: format!("unreadable image: {e}"),
                });
            }
            let sample_id = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Outcome::Keep(SampleRecord {
                sample_id,
                path: path.clone(),
                class_label,
                magnification,
            })
        })
        .collect();

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for o in outcomes {
        match o {
            Outcome::Keep(r) => records.push(r),
            Outcome::Skip(s) => {
                warn!("skipping {}: {}", s.path.display(), s.reason);
                skipped.push(s);
            }
            Outcome::Ignore => {}
        }
    }
    let mut manifest = DatasetManifest::from_records(records)?;
    manifest.skipped = skipped;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            _ => Err(DatasetError::UnknownSplit(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    /// 80:20 train/test, then 80:20 train/validation within the train part.
    fn default() -> Self {
        Self {
            train: 0.64,
            validation: 0.16,
            test: 0.20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub ratios: SplitRatios,
}

impl SplitManifest {
    pub fn assignment(&self) -> SplitAssignment {
        let mut map = BTreeMap::new();
        for (split, ids) in [
            (Split::Train, &self.train),
            (Split::Validation, &self.validation),
            (Split::Test, &self.test),
        ] {
            for id in ids {
                map.insert(id.clone(), split);
            }
        }
        SplitAssignment(map)
    }
}

/// Per-class split sizes `(train, validation, test)` for a class of `n` samples.
///
/// Test takes `round(0.2 n)` (half rounds up). Validation takes
/// `floor(0.2 (n - test))`, never less than one sample.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let test = (n * 2 + 5) / 10;
    let rest = n - test;
    let val = (rest / 5).max(1).min(rest);
    (rest - val, val, test)
}

/// Deterministic stratified split. Shuffling per class is driven only by `seed`.
pub fn stratified_split(manifest: &DatasetManifest, seed: u64) -> Result<SplitManifest, DatasetError> {
    let mut by_class: BTreeMap<ClassLabel, Vec<&str>> = BTreeMap::new();
    for r in manifest.records() {
        by_class.entry(r.class_label).or_default().push(&r.sample_id);
    }
    for (&class, ids) in &by_class {
        if ids.len() < 3 {
            return Err(DatasetError::ClassTooSmall {
                class,
                count: ids.len(),
            });
        }
    }

    let mut out = SplitManifest {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        seed,
        ratios: SplitRatios::default(),
    };
    for (class, mut ids) in by_class {
        ids.sort_unstable();
        let mut stream = rng::stream(seed, "split", &[class.name().into()]);
        ids.shuffle(&mut stream);
        let (_, n_val, n_test) = split_sizes(ids.len());
        out.test.extend(ids[..n_test].iter().map(|s| s.to_string()));
        out.validation
            .extend(ids[n_test..n_test + n_val].iter().map(|s| s.to_string()));
        out.train.extend(ids[n_test + n_val..].iter().map(|s| s.to_string()));
    }
    Ok(out)
}

/// Sample id → split, as persisted in a split manifest CSV.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitAssignment(pub BTreeMap<String, Split>);

impl SplitAssignment {
    pub fn get(&self, sample_id: &str) -> Option<Split> {
        self.0.get(sample_id).copied()
    }

    pub fn ids(&self, split: Split) -> impl Iterator<Item = &str> {
        self.0
            .iter()
            .filter(move |(_, &s)| s == split)
            .map(|(id, _)| id.as_str())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    sample_id: String,
    path: String,
    class: String,
    magnification: u32,
    split: String,
}

/// Writes `sample_id,path,class,magnification,split`. `split` is empty when no
/// assignment is given.
pub fn write_manifest_csv<W: Write>(
    writer: W,
    manifest: &DatasetManifest,
    splits: Option<&SplitAssignment>,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    for r in manifest.records() {
        let split = splits
            .and_then(|s| s.get(&r.sample_id))
            .map(|s| s.as_str())
            .unwrap_or("");
        w.serialize(ManifestRow {
            sample_id: r.sample_id.clone(),
            path: r.path.to_string_lossy().into_owned(),
            class: r.class_label.name().to_string(),
            magnification: r.magnification,
            split: split.to_string(),
        })?;
    }
    if manifest.is_empty() {
        w.write_record(["sample_id", "path", "class", "magnification", "split"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_manifest(
    path: &Path,
    manifest: &DatasetManifest,
    splits: Option<&SplitAssignment>,
) -> Result<(), DatasetError> {
    let file = std::fs::File::create(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    write_manifest_csv(std::io::BufWriter::new(file), manifest, splits).map_err(|source| DatasetError::Csv {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a manifest CSV; the split assignment is empty for ingest manifests.
pub fn read_manifest_csv<R: Read>(reader: R) -> Result<(DatasetManifest, SplitAssignment), DatasetError> {
    let csv_err = |source| DatasetError::Csv {
        path: PathBuf::from("<manifest>"),
        source,
    };
    let mut r = csv::Reader::from_reader(reader);
    let mut records = Vec::new();
    let mut assignment = BTreeMap::new();
    let mut ids = HashSet::new();
    for row in r.deserialize::<ManifestRow>() {
        let row = row.map_err(csv_err)?;
        if !row.split.is_empty() {
            assignment.insert(row.sample_id.clone(), row.split.parse()?);
        }
        ids.insert(row.sample_id.clone());
        records.push(SampleRecord {
            class_label: row.class.parse()?,
            sample_id: row.sample_id,
            path: PathBuf::from(row.path),
            magnification: row.magnification,
        });
    }
    Ok((DatasetManifest::from_records(records)?, SplitAssignment(assignment)))
}

pub fn load_manifest(path: &Path) -> Result<(DatasetManifest, SplitAssignment), DatasetError> {
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_manifest_csv(std::io::BufReader::new(file)).map_err(|e| match e {
        DatasetError::Csv { source, .. } => DatasetError::Csv {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}
