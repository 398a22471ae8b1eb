use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use histoforge::container::Container;
use histoforge::dataset::{self, Split};
use histoforge::head::{HeadParams, HeadVariant, TrainConfig};
use histoforge::pipeline::{
    self, feature_key, ImageItem, PipelineError, RunConfig, Stage, StageError, PROVENANCE_FILE, STAIN_MODEL_FILE,
};
use histoforge::stain::SnmfParams;
use histoforge::vit;

/// Stain normalization, class-level augmentation, frozen ViT features and
/// classifier heads for BreakHis-style histopathology data.
#[derive(Parser)]
#[command(name = "histoforge", version)]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a dataset tree into a manifest CSV.
    Ingest {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value_t = 40)]
        mag: u32,
        /// CSV of `segment,class` rows for nonstandard folder names.
        #[arg(long)]
        overrides: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stratified train/validation/test split of a manifest.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Normalize images onto the stain basis of a target image.
    Normalize {
        #[arg(long)]
        target: PathBuf,
        /// Directory of images or a manifest CSV.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        lambda: f64,
        #[arg(long, default_value_t = 0.15)]
        beta: f64,
        #[arg(long, default_value_t = 200)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Apply the per-class augmentation programs to one split.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode images with a frozen ViT into a features file.
    Features {
        #[arg(long)]
        weights: PathBuf,
        /// Image directory, manifest CSV or provenance CSV; repeatable.
        #[arg(long = "in", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a classifier head on extracted features.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        #[arg(long, value_enum, default_value_t = HeadArg::One)]
        head: HeadArg,
        #[command(flatten)]
        hyper: TrainArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: PathBuf,
    },
    /// Evaluate a head on one split and write the JSON report.
    Evaluate {
        #[arg(long)]
        head: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a synthetic dataset, target image, toy weights and config.
    MakeFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        per_class: usize,
        #[arg(long, default_value_t = 224)]
        size: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    One,
    Two,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Hidden width of the two-layer head.
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
}

/// A failure and the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

const VALIDATION: u8 = 2;
const STAGE_FAILURE: u8 = 3;

trait Classify<T> {
    fn invalid(self) -> Result<T, Failure>;
    fn failed(self, stage: Stage) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn invalid(self) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code: VALIDATION,
            error: e.into(),
        })
    }

    fn failed(self, stage: Stage) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code: STAGE_FAILURE,
            error: e.into().context(format!("{stage} stage failed")),
        })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(VALIDATION);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .expect("global pool is configured once");
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Ingest {
            root,
            mag,
            overrides,
            out,
        } => {
            if !dataset::MAGNIFICATIONS.contains(&mag) {
                return Err(anyhow!("--mag must be one of {:?}", dataset::MAGNIFICATIONS)).invalid();
            }
            let m = pipeline::ingest(&root, mag, overrides.as_deref()).failed(Stage::Ingest)?;
            dataset::save_manifest(&out, &m, None).failed(Stage::Ingest)?;
            for (class, n) in m.class_counts() {
                log::info!("{class}: {n}");
            }
            Ok(())
        }
        Command::Split { manifest, seed, out } => {
            let (m, _) = dataset::load_manifest(&manifest).failed(Stage::Split)?;
            let s = dataset::stratified_split(&m, seed).failed(Stage::Split)?;
            log::info!(
                "train {}, validation {}, test {}",
                s.train.len(),
                s.validation.len(),
                s.test.len()
            );
            dataset::save_manifest(&out, &m, Some(&s.assignment())).failed(Stage::Split)
        }
        Command::Normalize {
            target,
            input,
            out,
            lambda,
            beta,
            iters,
            seed,
        } => {
            let params = SnmfParams {
                lambda_sparse: lambda,
                beta,
                max_iters: iters,
                seed,
                ..SnmfParams::default()
            };
            params.validate().invalid()?;
            normalize(&target, &input, &out, &params).failed(Stage::Normalize)
        }
        Command::Augment {
            manifest,
            split,
            seed,
            out,
        } => {
            let split: Split = split.parse().invalid()?;
            let (m, assignment) = dataset::load_manifest(&manifest).failed(Stage::Augment)?;
            let records: Vec<_> = m
                .records()
                .iter()
                .filter(|r| assignment.get(&r.sample_id) == Some(split))
                .cloned()
                .collect();
            if records.is_empty() {
                return Err(anyhow!("no {split} samples in {}", manifest.display())).invalid();
            }
            let rows = pipeline::augment_records(&records, seed, &out).failed(Stage::Augment)?;
            pipeline::write_provenance(&out.join(PROVENANCE_FILE), &rows).failed(Stage::Augment)?;
            log::info!("{} images from {} inputs", rows.len(), records.len());
            Ok(())
        }
        Command::Features { weights, inputs, out } => {
            let w = vit::load_weights(&weights, None).failed(Stage::Features)?;
            let mut items: Vec<ImageItem> = Vec::new();
            let mut seen: std::collections::HashMap<String, PathBuf> = std::collections::HashMap::new();
            for input in &inputs {
                for item in feature_items(input).failed(Stage::Features)? {
                    // provenance files repeat the originals a manifest already lists
                    match seen.get(&item.key) {
                        Some(path) if path == &item.path => continue,
                        Some(path) => {
                            return Err(anyhow!(
                                "key {} names both {} and {}",
                                item.key,
                                path_str(path),
                                path_str(&item.path)
                            ))
                            .failed(Stage::Features)
                        }
                        None => {
                            seen.insert(item.key.clone(), item.path.clone());
                            items.push(item);
                        }
                    }
                }
            }
            let c = pipeline::extract_features(&items, &w).failed(Stage::Features)?;
            c.save(&out).failed(Stage::Features)?;
            log::info!("{} feature vectors of length {}", c.tensors.len(), w.config.embed_dim);
            Ok(())
        }
        Command::Train {
            features,
            splits,
            head,
            hyper,
            seed,
            out,
            history,
        } => {
            let spec = pipeline::HeadSpec {
                variant: match head {
                    HeadArg::One => HeadVariant::OneLayer,
                    HeadArg::Two => HeadVariant::TwoLayer,
                },
                hidden_dim: hyper.hidden,
                dropout_p: hyper.dropout,
            };
            let cfg = TrainConfig {
                epochs: hyper.epochs,
                batch_size: hyper.batch_size,
                lr: hyper.lr,
                seed,
                ..TrainConfig::default()
            };
            cfg.validate().invalid()?;
            spec.config(1).validate().invalid()?;
            let c = Container::load(&features).failed(Stage::Train)?;
            let (m, assignment) = dataset::load_manifest(&splits).failed(Stage::Train)?;
            let outcome = pipeline::train_head(&c, &m, &assignment, &spec, &cfg).failed(Stage::Train)?;
            let final_path = pipeline::save_training(&outcome, &out, &history).failed(Stage::Train)?;
            for r in &outcome.history {
                log::info!(
                    "epoch {:>3}  train loss {:.4}  val loss {:.4}  val acc {:.4}",
                    r.epoch,
                    r.train_loss,
                    r.val_loss,
                    r.val_acc
                );
            }
            log::info!(
                "best epoch {} saved to {}; final to {}",
                outcome.best_epoch,
                out.display(),
                final_path.display()
            );
            Ok(())
        }
        Command::Evaluate {
            head,
            features,
            splits,
            split,
            out,
        } => {
            let split: Split = split.parse().invalid()?;
            let params = HeadParams::load(&head).failed(Stage::Evaluate)?;
            let c = Container::load(&features).failed(Stage::Evaluate)?;
            let (m, assignment) = dataset::load_manifest(&splits).failed(Stage::Evaluate)?;
            let report = pipeline::evaluate_head(&params, &c, &m, &assignment, split).failed(Stage::Evaluate)?;
            pipeline::write_json(&out, &report).failed(Stage::Evaluate)?;
            println!("{report}");
            Ok(())
        }
        Command::Run { config, seed } => {
            let mut cfg = RunConfig::load(&config).invalid()?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            match pipeline::run_pipeline(&cfg) {
                Ok(record) => {
                    let report = record
                        .artifacts
                        .get(pipeline::REPORT_FILE)
                        .map(String::as_str)
                        .unwrap_or("");
                    println!("report.json sha256 {report}");
                    Ok(())
                }
                Err(e @ PipelineError::Config(_)) => Err(e).invalid(),
                Err(e) => Err(Failure {
                    code: STAGE_FAILURE,
                    error: e.into(),
                }),
            }
        }
        Command::MakeFixture {
            out,
            per_class,
            size,
            seed,
        } => {
            if per_class < 5 || size < 224 {
                return Err(anyhow!("fixtures need --per-class >= 5 and --size >= 224")).invalid();
            }
            let bundle = pipeline::write_fixture_bundle(&out, per_class, size, seed)
                .map_err(anyhow::Error::from)
                .context("cannot write fixture")
                .map_err(|error| Failure {
                    code: STAGE_FAILURE,
                    error,
                })?;
            println!("{}", bundle.config_path.display());
            Ok(())
        }
    }
}

fn normalize(target: &Path, input: &Path, out: &Path, params: &SnmfParams) -> Result<(), StageError> {
    let model = pipeline::estimate_target(target, params)?;
    std::fs::create_dir_all(out).map_err(|source| StageError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    pipeline::write_json(&out.join(STAIN_MODEL_FILE), &model)?;
    if input.is_dir() {
        let items = pipeline::list_images(input)?;
        pipeline::normalize_images(&items, &model, params, out)?;
        log::info!("normalized {} images", items.len());
        return Ok(());
    }
    let (m, assignment) = dataset::load_manifest(input)?;
    let items: Vec<ImageItem> = m.records().iter().map(ImageItem::of).collect();
    let done = pipeline::normalize_images(&items, &model, params, out)?;
    let records = m
        .records()
        .iter()
        .zip(done)
        .map(|(r, item)| dataset::SampleRecord {
            path: item.path,
            ..r.clone()
        })
        .collect();
    let normalized = dataset::DatasetManifest::from_records(records)?;
    let splits = (!assignment.0.is_empty()).then_some(&assignment);
    dataset::save_manifest(&out.join("manifest.csv"), &normalized, splits)?;
    log::info!("normalized {} images", normalized.len());
    Ok(())
}

/// Images named by a directory, a manifest or a provenance CSV.
fn feature_items(input: &Path) -> Result<Vec<ImageItem>, StageError> {
    if input.is_dir() {
        return pipeline::list_images(input);
    }
    let mut reader = csv::Reader::from_path(input).map_err(|source| StageError::Csv {
        path: input.to_path_buf(),
        source,
    })?;
    let headers = reader.headers().map_err(|source| StageError::Csv {
        path: input.to_path_buf(),
        source,
    })?;
    if headers.iter().any(|h| h == "output_path") {
        let rows = pipeline::read_provenance(input)?;
        return Ok(rows
            .into_iter()
            .map(|r| ImageItem {
                key: feature_key(&r.input_id, &r.step),
                path: PathBuf::from(r.output_path),
            })
            .collect());
    }
    let (m, _) = dataset::load_manifest(input)?;
    Ok(m.records().iter().map(ImageItem::of).collect())
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}
