use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use trapkit::backends::{install_oracle_models, read_sidecar, ModelManifest, OracleDetectorConfig};
use trapkit::datakit::{self, Catalog, SplitSpec, SplitStrategy};
use trapkit::evalboard::{HiddenTestSet, Leaderboard, TEST_SET_DIR};
use trapkit::export::{self, CategoryMap, GpsMode, MdDocument, RenderConfig, ScrubItem, ScrubPolicy};
use trapkit::finetune::{self, ExportMetadata, TrainConfig};
use trapkit::pipeline::{run_image, PipelineResult};
use trapkit::ImageRef;
use trapkit_service::config::{Settings, SettingsArgs};
use trapkit_service::ops::{self, ModelRegistry};
use trapkit_service::AppState;

#[derive(Parser)]
#[command(name = "trapkit", version, about = "Camera-trap image and video processing")]
struct Cli {
    #[command(flatten)]
    settings: SettingsArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect and classify one image
    Detect {
        #[arg(long = "in")]
        input: PathBuf,
        /// Also write an annotated PNG here
        #[arg(long)]
        annotated: Option<PathBuf>,
    },
    /// Process every image under a directory into a MegaDetector-batch JSON file
    Batch {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify a video by per-frame majority vote
    Video {
        #[arg(long = "in")]
        input: PathBuf,
        /// Full per-frame result
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Split a results file into confident and review sets
    Triage {
        #[arg(long)]
        results: PathBuf,
        /// Defaults to clf_threshold
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Assign images to train/val(/test) splits
    Split {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "random")]
        strategy: String,
        #[arg(long, value_delimiter = ',', default_value = "0.8,0.1,0.1")]
        fractions: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV with columns file,location_id,capture_time
        #[arg(long)]
        metadata: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a labelled crop dataset from a results file
    Crops {
        #[arg(long)]
        results: PathBuf,
        /// Directory the result paths are relative to
        #[arg(long)]
        root: Option<PathBuf>,
        /// CSV with columns file,label; without it labels come from sidecars
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Download and unpack a catalogued dataset
    Fetch {
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        dest: PathBuf,
    },
    /// Fine-tune a classifier on crops and add it to the model zoo
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        /// TOML training config
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        model_id: String,
        #[arg(long, default_value = "1")]
        model_version: String,
        #[arg(long, value_delimiter = ',')]
        regions: Vec<String>,
    },
    /// Evaluate a zoo classifier on a crop manifest
    Eval {
        #[arg(long)]
        model: String,
        #[arg(long)]
        crops: PathBuf,
    },
    /// Convert a results file
    Export {
        #[arg(value_enum)]
        format: ExportFormat,
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Copy images with location metadata removed or coarsened
    Scrub {
        /// Results file; person detections decide exclusions
        #[arg(long, conflicts_with = "input")]
        results: Option<PathBuf>,
        #[arg(long)]
        root: Option<PathBuf>,
        /// Image directory, scrubbed without exclusions
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "remove")]
        gps_mode: GpsArg,
        #[arg(long, default_value_t = 0.1)]
        grid_degrees: f64,
        #[arg(long)]
        keep_person_images: bool,
    },
    /// Model zoo and leaderboard
    #[command(subcommand)]
    Zoo(ZooCommand),
    /// Write a synthetic corpus and install the oracle models
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the HTTP service
    Serve,
}

#[derive(Subcommand)]
enum ZooCommand {
    List,
    /// Register a model from its manifest file
    Add {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Create a hidden test set from sidecar-annotated images
    AddTestSet {
        #[arg(long)]
        id: String,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_delimiter = ',')]
        regions: Vec<String>,
    },
    /// Score a submission against a hidden test set
    Score {
        #[arg(long)]
        test_set: String,
        #[arg(long)]
        model: String,
        #[arg(long)]
        params: u64,
        #[arg(long)]
        submission: PathBuf,
    },
    /// Print a leaderboard
    Board {
        #[arg(long)]
        test_set: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportFormat {
    Coco,
    Folders,
    Annotated,
}

#[derive(Clone, Copy, ValueEnum)]
enum GpsArg {
    Remove,
    Grid,
}

fn print_json(v: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn read_results(path: &Path, root: Option<&Path>) -> anyhow::Result<Vec<PipelineResult>> {
    let doc = MdDocument::read(path)?;
    let outcomes = doc.to_outcomes(root)?;
    let mut results: Vec<PipelineResult> = outcomes.into_iter().filter_map(|o| o.result().cloned()).collect();
    // MegaDetector files carry no image sizes; read them from the headers when the files are here
    for r in &mut results {
        if r.image.dimensions().is_none() {
            if let Ok((w, h)) = image::image_dimensions(&r.image.path) {
                r.image = r.image.clone().with_dimensions(w, h)?;
            }
        }
    }
    Ok(results)
}

fn read_csv_map(path: &Path, columns: usize) -> anyhow::Result<HashMap<PathBuf, Vec<String>>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = HashMap::new();
    for row in reader.records() {
        let row = row?;
        if row.len() < columns {
            bail!("{}: expected {columns} columns, got {}", path.display(), row.len());
        }
        out.insert(PathBuf::from(&row[0]), row.iter().skip(1).map(String::from).collect());
    }
    Ok(out)
}

/// Most frequent sidecar label; ties go to the first seen.
fn sidecar_label(image: &Path) -> anyhow::Result<Option<String>> {
    let mut counts: Vec<(String, usize)> = Vec::new();
    for o in read_sidecar(image)? {
        if o.label.is_empty() {
            continue;
        }
        match counts.iter_mut().find(|(l, _)| *l == o.label) {
            Some((_, n)) => *n += 1,
            None => counts.push((o.label, 1)),
        }
    }
    Ok(counts.into_iter().fold(None::<(String, usize)>, |best, (l, n)| match best {
        Some((_, m)) if m >= n => best,
        _ => Some((l, n)),
    })
    .map(|(l, _)| l))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let settings = Settings::load(&cli.settings)?;
    let registry = || ModelRegistry::open(&settings.model_dir);
    let progress = |_: usize, _: usize| {};
    match cli.command {
        Command::Detect { input, annotated } => {
            let reg = registry()?;
            let det = reg.detector(&settings.detector_id)?;
            let clf = settings.classifier_id.as_deref().map(|id| reg.classifier(id)).transpose()?;
            let image = ImageRef::probe(&input).with_context(|| format!("reading {}", input.display()))?;
            let result = run_image(&image, det.as_ref(), clf.as_deref(), &settings.pipeline())?;
            if let Some(out) = annotated {
                export::render_annotated(&result, &RenderConfig::default(), &out)?;
            }
            print_json(&result);
        }
        Command::Batch { input, out } => {
            let reg = registry()?;
            let det = reg.detector(&settings.detector_id)?;
            let clf = settings.classifier_id.as_deref().map(|id| reg.classifier(id)).transpose()?;
            let images = ops::collect_images(&input)?;
            if images.is_empty() {
                bail!("no images under {}", input.display());
            }
            let doc = ops::batch_document(&images, &input, det.as_ref(), clf.as_deref(), &settings.pipeline(), &progress)?;
            std::fs::write(&out, &doc).with_context(|| format!("writing {}", out.display()))?;
            let parsed = MdDocument::parse(&doc)?;
            let failed = parsed.images.iter().filter(|i| i.detections.is_none()).count();
            print_json(&serde_json::json!({ "images": parsed.images.len(), "failed": failed, "out": out }));
        }
        Command::Video { input, out } => {
            let reg = registry()?;
            let det = reg.detector(&settings.detector_id)?;
            let clf = settings.classifier_id.as_deref().map(|id| reg.classifier(id)).transpose()?;
            let r = ops::video_result(&input, det.as_ref(), clf.as_deref(), &settings.pipeline(), settings.target_fps, &progress)?;
            if let Some(out) = out {
                std::fs::write(&out, serde_json::to_string_pretty(&r)? + "\n")?;
            }
            print_json(&serde_json::json!({
                "video": r.video,
                "final_label": r.final_label,
                "vote_tally": r.vote_tally,
                "frames": r.frame_results.len(),
                "effective_fps": r.effective_fps,
            }));
        }
        Command::Triage { results, threshold } => {
            let threshold = threshold.unwrap_or(settings.clf_threshold);
            if !(0.0..=1.0).contains(&threshold) {
                bail!("threshold {threshold} is outside [0, 1]");
            }
            print_json(&ops::triage_document(&MdDocument::read(&results)?, threshold)?);
        }
        Command::Split { input, strategy, fractions, seed, metadata, out } => {
            let strategy: SplitStrategy = strategy.parse()?;
            let meta = metadata.map(|m| read_csv_map(&m, 3)).transpose()?.unwrap_or_default();
            let mut records = ops::collect_images(&input)?;
            for r in &mut records {
                let key = r.path.strip_prefix(&input).unwrap_or(&r.path).to_path_buf();
                if let Some(cols) = meta.get(&key) {
                    if !cols[0].is_empty() {
                        r.location_id = Some(cols[0].clone());
                    }
                    if !cols[1].is_empty() {
                        let t = chrono::NaiveDateTime::parse_from_str(&cols[1], "%Y-%m-%dT%H:%M:%S")
                            .with_context(|| format!("capture_time {:?}", cols[1]))?;
                        r.capture_time = Some(t);
                    }
                }
            }
            let assignment = datakit::split_dataset(&records, &SplitSpec::new(strategy, &fractions, seed))?;
            let by_file: BTreeMap<String, &str> = records
                .iter()
                .enumerate()
                .map(|(i, r)| (r.path.strip_prefix(&input).unwrap_or(&r.path).display().to_string(), assignment.name_of(i)))
                .collect();
            std::fs::write(&out, serde_json::to_string_pretty(&by_file)? + "\n")?;
            let sizes: BTreeMap<&String, usize> = assignment.names.iter().zip(assignment.sizes()).collect();
            print_json(&sizes);
        }
        Command::Crops { results, root, labels, out } => {
            let results = read_results(&results, root.as_deref())?;
            let mut image_labels = HashMap::new();
            match labels {
                Some(csv_path) => {
                    for (file, cols) in read_csv_map(&csv_path, 2)? {
                        let path = root.as_ref().map(|r| r.join(&file)).unwrap_or(file);
                        image_labels.insert(path, cols[0].clone());
                    }
                }
                None => {
                    for r in &results {
                        if let Some(l) = sidecar_label(&r.image.path)? {
                            image_labels.insert(r.image.path.clone(), l);
                        }
                    }
                }
            }
            let crops = datakit::build_crop_dataset(&results, &image_labels, settings.crop_size_px, &out)?;
            print_json(&serde_json::json!({ "crops": crops.len(), "manifest": out.join(datakit::CROP_MANIFEST) }));
        }
        Command::Fetch { catalog, dataset, dest } => {
            let catalog = Catalog::load(&catalog)?;
            let handle = datakit::fetch_dataset(catalog.get(&dataset)?, &dest)?;
            print_json(&serde_json::json!({ "dataset_id": handle.dataset_id, "root": handle.root, "files": handle.files()?.len() }));
        }
        Command::Train { train, val, run_dir, train_config, epochs, model_id, model_version, regions } => {
            let mut config: TrainConfig = match train_config {
                Some(p) => toml::from_str(&std::fs::read_to_string(&p)?).with_context(|| format!("parsing {}", p.display()))?,
                None => TrainConfig::default(),
            };
            if let Some(e) = epochs {
                config.epochs = e;
            }
            config.input_size_px = settings.crop_size_px;
            let train = datakit::read_crop_manifest(&train)?;
            let val = datakit::read_crop_manifest(&val)?;
            let (model, history) = finetune::train(&train, &val, &config, &run_dir)?;
            let zoo = registry()?;
            let meta = ExportMetadata { model_id, version: model_version, description: String::new(), region_tags: regions };
            let manifest = finetune::export_model(&model, zoo.zoo(), &meta)?;
            print_json(&serde_json::json!({ "best_epoch": history.best(), "manifest": manifest }));
        }
        Command::Eval { model, crops } => {
            let clf = registry()?.classifier(&model)?;
            print_json(&finetune::evaluate_classifier(clf.as_ref(), &datakit::read_crop_manifest(&crops)?)?);
        }
        Command::Export { format, results, root, out } => {
            let results = read_results(&results, root.as_deref())?;
            match format {
                ExportFormat::Coco => {
                    let mut labels: Vec<String> = Vec::new();
                    for r in &results {
                        for d in &r.detections {
                            if let Some(s) = &d.scores {
                                for l in s.labels() {
                                    if !labels.iter().any(|x| x == l) {
                                        labels.push(l.to_string());
                                    }
                                }
                            }
                        }
                    }
                    let doc = export::to_coco(&results, &CategoryMap::with_labels(&labels))?;
                    std::fs::write(&out, serde_json::to_string_pretty(&doc)? + "\n")?;
                    print_json(&serde_json::json!({ "images": doc.images.len(), "annotations": doc.annotations.len() }));
                }
                ExportFormat::Folders => {
                    let files = export::separate_folders(&results, &out)?;
                    print_json(&serde_json::json!({ "files": files.len() }));
                }
                ExportFormat::Annotated => {
                    std::fs::create_dir_all(&out)?;
                    for r in &results {
                        let name = r.image.path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
                        export::render_annotated(r, &RenderConfig::default(), &out.join(format!("{name}.png")))?;
                    }
                    print_json(&serde_json::json!({ "files": results.len() }));
                }
            }
        }
        Command::Scrub { results, root, input, out, gps_mode, grid_degrees, keep_person_images } => {
            let items: Vec<ScrubItem> = match (results, input) {
                (Some(r), None) => read_results(&r, root.as_deref())?.iter().map(ScrubItem::from_result).collect(),
                (None, Some(dir)) => ops::collect_images(&dir)?.into_iter().map(|i| ScrubItem::file(i.path)).collect(),
                _ => bail!("give --results or --in"),
            };
            let policy = ScrubPolicy {
                gps_mode: match gps_mode {
                    GpsArg::Remove => GpsMode::Remove,
                    GpsArg::Grid => GpsMode::Grid,
                },
                grid_degrees,
                exclude_person_images: !keep_person_images,
            };
            print_json(&export::scrub_metadata(&items, &policy, &out)?);
        }
        Command::Zoo(cmd) => zoo(cmd, &settings)?,
        Command::Synth { out, n, seed } => {
            let images = trapkit::synth::generate_corpus(&out, n, seed)?;
            let (det, clf) =
                install_oracle_models(&settings.model_dir, &OracleDetectorConfig::default(), &trapkit::synth::DEFAULT_LABELS)?;
            print_json(&serde_json::json!({ "images": images.len(), "models": [det.model_id, clf.model_id] }));
        }
        Command::Serve => {
            let state = Arc::new(AppState::new(settings)?);
            tokio::runtime::Runtime::new()?.block_on(trapkit_service::api::serve(state))?;
        }
    }
    Ok(())
}

fn zoo(cmd: ZooCommand, settings: &Settings) -> anyhow::Result<()> {
    let board = || Leaderboard::open(&settings.leaderboard_dir(), settings.operator_token.clone());
    match cmd {
        ZooCommand::List => {
            let reg = ModelRegistry::open(&settings.model_dir)?;
            let rows: Vec<_> = reg
                .list()?
                .into_iter()
                .map(|m: ModelManifest| {
                    serde_json::json!({
                        "model_id": m.model_id,
                        "version": m.version,
                        "task": m.task,
                        "format": m.format,
                        "region_tags": m.region_tags,
                        "parameter_count": m.parameter_count,
                    })
                })
                .collect();
            print_json(&rows);
        }
        ZooCommand::Add { manifest } => {
            let m = ModelManifest::from_file(&manifest)?;
            print_json(&ModelRegistry::open(&settings.model_dir)?.zoo().add(&m)?);
        }
        ZooCommand::AddTestSet { id, input, regions } => {
            let files: Vec<PathBuf> = ops::collect_images(&input)?.into_iter().map(|i| i.path).collect();
            let set = HiddenTestSet::from_sidecars(id, regions, &input, &files)?;
            let b = board()?;
            b.install_test_set(set)?;
            print_json(&b.test_sets());
            eprintln!("stored under {}", settings.leaderboard_dir().join(TEST_SET_DIR).display());
        }
        ZooCommand::Score { test_set, model, params, submission } => {
            let b = board()?;
            b.register_model(&model);
            let text = std::fs::read_to_string(&submission).with_context(|| format!("reading {}", submission.display()))?;
            print_json(&b.evaluate_submission(&text, &test_set, &model, params)?);
        }
        ZooCommand::Board { test_set } => print_json(&board()?.leaderboard(&test_set)),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("TRAPKIT_LOG").unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": format!("{e:#}") }));
            ExitCode::FAILURE
        }
    }
}
