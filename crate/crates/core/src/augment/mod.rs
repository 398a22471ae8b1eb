//! Class-conditional augmentation programs and model-input finalization.
//!
//! Each class has a fixed program of named steps. A step reads the original
//! image or an earlier step's output and emits one named output (five for
//! `FiveCrop`). Randomness is drawn from a stream keyed by
//! `(seed, sample_id, step index)`, so outputs do not depend on scheduling.

mod ops;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ClassLabel;
use crate::image::{ImageError, ImageTensor};
use crate::rng;

pub use ops::{
    affine, apply_transform, center_crop, color_jitter, five_crop, horizontal_flip, hsv_to_rgb, rgb_to_hsv,
    vertical_flip,
};

/// Side of the square crops and of the finalized model input.
pub const CROP: u32 = 224;
/// Selector naming the unmodified input image.
pub const ORIGINAL: &str = "original";

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Error, PartialEq)]
pub enum TransformError {
    #[error("image is {width}x{height}, smaller than the {needed}x{needed} crop")]
    TooSmall { width: u32, height: u32, needed: u32 },
}

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("sample {sample_id}, step {step}: {source}")]
    Transform {
        sample_id: String,
        step: String,
        #[source]
        source: TransformError,
    },
    #[error("plan step {step} reads {input}, which is not produced earlier")]
    BadSelector { step: String, input: String },
    #[error("plan declares multiplicity {declared} but its steps emit {emitted}")]
    Multiplicity { declared: usize, emitted: usize },
    #[error("writing {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: ImageError,
    },
    #[error("writing provenance: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformKind {
    HorizontalFlip,
    VerticalFlip,
    CenterCrop {
        size: u32,
    },
    FiveCrop {
        size: u32,
    },
    /// Fixed anticlockwise rotation.
    Rotate {
        degrees: f64,
    },
    /// Rotation angle and x-shear angle (degrees) drawn uniformly from their
    /// ranges; translation drawn uniformly up to the given fraction of
    /// width and height in either direction.
    Affine {
        degrees: (f64, f64),
        translate: Option<(f64, f64)>,
        shear: Option<(f64, f64)>,
    },
    /// Brightness and saturation factors in `[1 - v, 1 + v]`, hue shift in
    /// `[-hue, hue]` turns.
    ColorJitter {
        brightness: f64,
        saturation: f64,
        hue: f64,
    },
}

impl TransformKind {
    /// Number of images one application emits.
    pub fn arity(&self) -> usize {
        match self {
            TransformKind::FiveCrop { .. } => 5,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub kind: TransformKind,
    /// `original` or the name of an earlier output.
    pub input: String,
    /// Output names, `kind.arity()` of them.
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    pub class_label: ClassLabel,
    pub steps: Vec<TransformSpec>,
    pub multiplicity: usize,
}

impl AugmentationPlan {
    /// Checks selectors, output arity and the declared multiplicity.
    pub fn validate(&self) -> Result<(), AugmentError> {
        let mut known = vec![ORIGINAL.to_string()];
        let mut emitted = 0;
        for step in &self.steps {
            let name = step.outputs.join(",");
            if !known.contains(&step.input) {
                return Err(AugmentError::BadSelector {
                    step: name,
                    input: step.input.clone(),
                });
            }
            if step.outputs.len() != step.kind.arity() {
                return Err(AugmentError::Multiplicity {
                    declared: step.kind.arity(),
                    emitted: step.outputs.len(),
                });
            }
            emitted += step.outputs.len();
            known.extend(step.outputs.iter().cloned());
        }
        if emitted != self.multiplicity {
            return Err(AugmentError::Multiplicity {
                declared: self.multiplicity,
                emitted,
            });
        }
        Ok(())
    }

    /// Output names in emission order.
    pub fn output_names(&self) -> impl Iterator<Item = &str> {
        self.steps.iter().flat_map(|s| s.outputs.iter().map(String::as_str))
    }
}

const SHEAR_WIDE: (f64, f64) = (0.3, 0.5);
const SHEAR_NARROW: (f64, f64) = (0.1, 0.4);
const JITTER: TransformKind = TransformKind::ColorJitter {
    brightness: 0.5,
    saturation: 0.4,
    hue: 0.3,
};
const RANDOM_AFFINE: TransformKind = TransformKind::Affine {
    degrees: (30.0, 70.0),
    translate: Some((0.1, 0.4)),
    shear: None,
};

fn shear(range: (f64, f64)) -> TransformKind {
    TransformKind::Affine {
        degrees: (0.0, 0.0),
        translate: None,
        shear: Some(range),
    }
}

struct Builder(Vec<TransformSpec>);

impl Builder {
    fn one(&mut self, kind: TransformKind, input: &str, output: &str) -> &mut Self {
        self.0.push(TransformSpec {
            kind,
            input: input.into(),
            outputs: vec![output.into()],
        });
        self
    }

    /// `count` independent draws from the original, named `prefix1..`.
    fn repeat(&mut self, kind: TransformKind, prefix: &str, count: usize) -> &mut Self {
        for i in 1..=count {
            self.one(kind, ORIGINAL, &format!("{prefix}{i}"));
        }
        self
    }

    fn five_crop(&mut self) -> &mut Self {
        self.0.push(TransformSpec {
            kind: TransformKind::FiveCrop { size: CROP },
            input: ORIGINAL.into(),
            outputs: (1..=5).map(|i| format!("FC{i}")).collect(),
        });
        self
    }

    fn flips(&mut self) -> &mut Self {
        self.one(TransformKind::HorizontalFlip, ORIGINAL, "HF")
            .one(TransformKind::VerticalFlip, ORIGINAL, "VF")
    }

    fn on_crops(&mut self, kind: TransformKind, crops: &[usize], suffix: &str) -> &mut Self {
        for &c in crops {
            self.one(kind, &format!("FC{c}"), &format!("FC{c}-{suffix}"));
        }
        self
    }
}

/// The augmentation program of a class.
pub fn plan_for_class(class_label: ClassLabel) -> AugmentationPlan {
    let mut b = Builder(Vec::new());
    match class_label {
        ClassLabel::Benign => {
            b.flips()
                .one(TransformKind::CenterCrop { size: CROP }, ORIGINAL, "CC")
                .one(TransformKind::Rotate { degrees: 30.0 }, ORIGINAL, "ROT30")
                .one(TransformKind::Rotate { degrees: 60.0 }, ORIGINAL, "ROT60")
                .repeat(shear(SHEAR_WIDE), "AT", 2);
        }
        ClassLabel::DuctalCarcinoma => {
            b.flips()
                .one(TransformKind::CenterCrop { size: CROP }, ORIGINAL, "CC")
                .one(TransformKind::Rotate { degrees: 30.0 }, ORIGINAL, "ROT30")
                .one(shear(SHEAR_WIDE), ORIGINAL, "AT");
        }
        ClassLabel::LobularCarcinoma | ClassLabel::PapillaryCarcinoma => {
            b.flips()
                .five_crop()
                .repeat(JITTER, "CJ", 5)
                .repeat(RANDOM_AFFINE, "RA", 5)
                .on_crops(JITTER, &[1, 2, 3, 4, 5], "CJ")
                .repeat(shear(SHEAR_NARROW), "RS", 6)
                .one(shear(SHEAR_NARROW), "HF", "HF-RS")
                .one(shear(SHEAR_NARROW), "VF", "VF-RS");
            if class_label == ClassLabel::PapillaryCarcinoma {
                b.on_crops(shear(SHEAR_NARROW), &[1, 2, 3], "RS");
            }
        }
        ClassLabel::MucinousCarcinoma => {
            b.flips()
                .five_crop()
                .repeat(JITTER, "CJ", 3)
                .repeat(RANDOM_AFFINE, "RA", 5)
                .on_crops(JITTER, &[1, 3, 5], "CJ")
                .repeat(shear(SHEAR_NARROW), "RS", 3)
                .one(shear(SHEAR_NARROW), "HF", "HF-RS")
                .one(shear(SHEAR_NARROW), "VF", "VF-RS");
        }
    }
    let steps = b.0;
    let multiplicity = steps.iter().map(|s| s.outputs.len()).sum();
    AugmentationPlan {
        class_label,
        steps,
        multiplicity,
    }
}

/// One augmented image and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedImage {
    pub input_id: String,
    pub class_label: ClassLabel,
    pub step: String,
    pub image: ImageTensor,
}

/// Runs the plan on one input, returning outputs in plan order.
pub fn augment_sample(
    sample_id: &str,
    image: &ImageTensor,
    plan: &AugmentationPlan,
    seed: u64,
) -> Result<Vec<AugmentedImage>, AugmentError> {
    let mut produced: BTreeMap<&str, ImageTensor> = BTreeMap::new();
    let mut out = Vec::with_capacity(plan.multiplicity);
    for (index, step) in plan.steps.iter().enumerate() {
        let input = if step.input == ORIGINAL {
            image
        } else {
            produced
                .get(step.input.as_str())
                .ok_or_else(|| AugmentError::BadSelector {
                    step: step.outputs.join(","),
                    input: step.input.clone(),
                })?
        };
        let mut stream = rng::stream(seed, "augment", &[sample_id.into(), index.into()]);
        let images = apply_transform(input, &step.kind, &mut stream).map_err(|source| AugmentError::Transform {
            sample_id: sample_id.to_string(),
            step: step.outputs.join(","),
            source,
        })?;
        for (name, img) in step.outputs.iter().zip(images) {
            out.push(AugmentedImage {
                input_id: sample_id.to_string(),
                class_label: plan.class_label,
                step: name.clone(),
                image: img.clone(),
            });
            produced.insert(name, img);
        }
    }
    Ok(out)
}

/// Augments every `(sample_id, image)` input of one class. Inputs are
/// processed in parallel; the output order is input order, then plan order.
pub fn augment_class(
    images: &[(String, ImageTensor)],
    plan: &AugmentationPlan,
    seed: u64,
) -> Result<Vec<AugmentedImage>, AugmentError> {
    plan.validate()?;
    let per_input: Vec<Vec<AugmentedImage>> = images
        .par_iter()
        .map(|(id, img)| augment_sample(id, img, plan, seed))
        .collect::<Result<_, _>>()?;
    Ok(per_input.into_iter().flatten().collect())
}

/// A row of the provenance CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub output_path: String,
    pub input_id: String,
    pub class: String,
    pub step: String,
}

/// File name of an augmented output.
pub fn output_file_name(input_id: &str, step: &str) -> String {
    format!("{input_id}__{step}.png")
}

/// Writes augmented images as PNG into `dir` and returns their provenance.
pub fn save_augmented(dir: &Path, images: &[AugmentedImage]) -> Result<Vec<ProvenanceRecord>, AugmentError> {
    std::fs::create_dir_all(dir)?;
    images
        .par_iter()
        .map(|a| {
            let path = dir.join(output_file_name(&a.input_id, &a.step));
            a.image.save_png(&path).map_err(|source| AugmentError::Write {
                path: path.clone(),
                source,
            })?;
            Ok(ProvenanceRecord {
                output_path: path.display().to_string(),
                input_id: a.input_id.clone(),
                class: a.class_label.name().to_string(),
                step: a.step.clone(),
            })
        })
        .collect()
}

pub fn write_provenance_csv<W: Write>(writer: W, records: &[ProvenanceRecord]) -> Result<(), AugmentError> {
    let mut w = csv::Writer::from_writer(writer);
    if records.is_empty() {
        w.write_record(["output_path", "input_id", "class", "step"])?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// A finalized model input: 3x224x224, channel-first, ImageNet-standardized.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedTensor {
    data: Vec<f32>,
    pub sample_id: String,
    pub step: String,
}

impl NormalizedTensor {
    pub const SHAPE: [usize; 3] = [3, CROP as usize, CROP as usize];

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Channel plane `c` as a row-major 224x224 slice.
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = (CROP * CROP) as usize;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(image: &ImageTensor, width: u32, height: u32) -> Vec<[f32; 3]> {
    let (sw, sh) = (image.width(), image.height());
    let sx = sw as f32 / width as f32;
    let sy = sh as f32 / height as f32;
    let axis = |i: u32, scale: f32, len: u32| {
        let p = ((i as f32 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (p.floor() as u32).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, p - i0 as f32)
    };
    let mut out = Vec::with_capacity(width as usize * height as usize);
    for y in 0..height {
        let (y0, y1, fy) = axis(y, sy, sh);
        for x in 0..width {
            let (x0, x1, fx) = axis(x, sx, sw);
            let (a, b, c, d) = (
                image.pixel(x0, y0),
                image.pixel(x1, y0),
                image.pixel(x0, y1),
                image.pixel(x1, y1),
            );
            out.push(std::array::from_fn(|k| {
                let top = a[k] as f32 * (1.0 - fx) + b[k] as f32 * fx;
                let bottom = c[k] as f32 * (1.0 - fx) + d[k] as f32 * fx;
                top * (1.0 - fy) + bottom * fy
            }));
        }
    }
    out
}

/// Resizes to 224x224, scales to `[0, 1]`, reorders to channel-first and
/// standardizes each channel with the ImageNet mean and deviation.
pub fn finalize(image: &ImageTensor, sample_id: &str, step: &str) -> NormalizedTensor {
    let unit: Vec<[f32; 3]> = resize_bilinear(image, CROP, CROP)
        .into_iter()
        .map(|p| p.map(|v| v / 255.0))
        .collect();
    NormalizedTensor {
        data: standardize(&unit),
        sample_id: sample_id.to_string(),
        step: step.to_string(),
    }
}

/// Interleaved `[0, 1]` RGB pixels to channel-first `(x - mean) / std`.
pub fn standardize(unit: &[[f32; 3]]) -> Vec<f32> {
    let n = unit.len();
    let mut data = vec![0.0f32; 3 * n];
    for (i, p) in unit.iter().enumerate() {
        for c in 0..3 {
            data[c * n + i] = (p[c] - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
        }
    }
    data
}
