use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use lanecascade::classifier::TaxonomyScheme;
use lanecascade::datasets::{split_dataset, write_dataset, SyntheticConfig};
use lanecascade::descriptor::DESCRIPTOR_SIZES;
use lanecascade::pipeline::{
    derive_seed, evaluate, evaluate_segmentation, load_samples, prepare_samples, render_overlay, run_ablation,
    train_classification, train_segmentation, Cascade, CascadeOptions, CascadeResult, OverlayMode, PipelineConfig,
    PreparedSample, CLS_CHECKPOINT, SEG_CHECKPOINT, SEG_STATE,
};
use lanecascade::segmentation::SegModel;

#[derive(Parser, Debug)]
#[command(version, about = "Lane boundary instance segmentation and classification")]
struct Cli {
    /// TOML run configuration; unset keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Compute device. Only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset in TuSimple layout.
    GenData {
        #[arg(long)]
        count: Option<usize>,
        /// Destination directory (default: `<output>/data`).
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Train the segmentation stage (binary phase, then instance phase).
    TrainSeg {
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from the training state in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Train the classifier on detections of a trained segmentation model.
    TrainCls {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        descriptor_size: Option<usize>,
        #[arg(long)]
        scheme: Option<TaxonomyScheme>,
        /// Segmentation checkpoint (default: `<output>/seg.safetensors`).
        #[arg(long)]
        seg: Option<PathBuf>,
    },
    /// Run the cascade on images and print the detected boundaries as JSON.
    Infer {
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[command(flatten)]
        models: ModelPaths,
    },
    /// Score the test split and write the metrics report.
    Eval {
        #[arg(long)]
        threshold_px: Option<f64>,
        /// Score the segmentation stage alone, without a classifier.
        #[arg(long)]
        segmentation_only: bool,
        #[command(flatten)]
        models: ModelPaths,
    },
    /// Classifier accuracy for every descriptor size and scheme.
    Ablate {
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',', default_value = "two_class,three_class")]
        schemes: Vec<TaxonomyScheme>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seg: Option<PathBuf>,
    },
    /// Draw the detected boundaries over images.
    Overlay {
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Colors::Classes)]
        mode: Colors,
        #[command(flatten)]
        models: ModelPaths,
    },
}

#[derive(clap::Args, Debug)]
struct ModelPaths {
    /// Segmentation checkpoint (default: `<output>/seg.safetensors`).
    #[arg(long)]
    seg: Option<PathBuf>,
    /// Classifier checkpoint (default: `<output>/cls.safetensors`).
    #[arg(long)]
    cls: Option<PathBuf>,
    #[arg(long)]
    descriptor_size: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Colors {
    Classes,
    Instances,
}

struct Run {
    config: PipelineConfig,
    out: PathBuf,
}

impl Run {
    fn seg_path(&self, explicit: &Option<PathBuf>) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.out.join(SEG_CHECKPOINT))
    }

    fn cls_path(&self, explicit: &Option<PathBuf>) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.out.join(CLS_CHECKPOINT))
    }

    /// Train, validation and test splits at network resolution.
    fn splits(&self) -> Result<[Vec<PreparedSample>; 3]> {
        let cfg = &self.config;
        let samples = load_samples(cfg).context("loading samples")?;
        let seed = derive_seed(cfg.seeds().data, &[0x5b1]);
        let (train, val, test) = split_dataset(samples, cfg.data.split, seed)?;
        log::info!("split: {} train, {} val, {} test", train.len(), val.len(), test.len());
        let seg = &cfg.segmentation;
        Ok([
            prepare_samples(&train, seg)?,
            prepare_samples(&val, seg)?,
            prepare_samples(&test, seg)?,
        ])
    }

    fn cascade(&self, models: &ModelPaths) -> Result<Cascade> {
        let options = CascadeOptions {
            min_points: self.config.metrics.min_points,
            descriptor_size: models.descriptor_size,
        };
        let (seg, cls) = (self.seg_path(&models.seg), self.cls_path(&models.cls));
        Cascade::open(&seg, &cls, options).with_context(|| format!("opening {} and {}", seg.display(), cls.display()))
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.out.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        self.write(name, serde_json::to_string_pretty(value)?)
    }
}

fn load_image(path: &Path) -> Result<image::RgbImage> {
    Ok(image::open(path)
        .with_context(|| format!("reading {}", path.display()))?
        .to_rgb8())
}

#[derive(Serialize)]
struct ImageResult<'a> {
    image: &'a Path,
    #[serde(flatten)]
    result: CascadeResult,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.device != "cpu" {
        bail!("device {:?} is not available; this build runs on cpu only", cli.device);
    }

    let snapshot = cli
        .config
        .as_ref()
        .map(|p| fs::read_to_string(p).with_context(|| format!("reading {}", p.display())))
        .transpose()?;
    let mut config = match &snapshot {
        Some(text) => PipelineConfig::from_toml(text)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.output {
        config.output_dir = out.clone();
    }
    match &cli.command {
        Command::TrainSeg { epochs: Some(e), .. } => config.segmentation.epochs = *e,
        Command::TrainCls {
            epochs,
            descriptor_size,
            scheme,
            ..
        } => {
            if let Some(e) = epochs {
                config.classifier.train.epochs = *e;
            }
            if let Some(s) = descriptor_size {
                config.classifier.descriptor_size = *s;
            }
            if let Some(s) = scheme {
                config.classifier.scheme = *s;
            }
        }
        Command::Eval {
            threshold_px: Some(t), ..
        } => config.metrics.threshold_px = *t,
        Command::Ablate { epochs: Some(e), .. } => config.classifier.train.epochs = *e,
        _ => {}
    }

    let out = config.output_dir.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let run = Run { config, out };
    if let Some(text) = &snapshot {
        run.write("config.snapshot.toml", text)?;
    }
    run.write("config.resolved.toml", run.config.to_toml())?;

    match cli.command {
        Command::GenData { count, dest } => {
            let synthetic = SyntheticConfig {
                count: count.unwrap_or(run.config.data.synthetic.count),
                seed: run.config.seeds().data,
                ..run.config.data.synthetic.clone()
            };
            let dest = dest.unwrap_or_else(|| run.out.join("data"));
            write_dataset(&synthetic.generate()?, &dest)?;
            println!("wrote {} scenes to {}", synthetic.count, dest.display());
        }
        Command::TrainSeg { resume, .. } => {
            let [train, val, test] = run.splits()?;
            let state = run.out.join(SEG_STATE);
            let resume = resume.then_some(state.as_path());
            let cfg = &run.config;
            let (model, report) = train_segmentation(
                &cfg.segmentation,
                &cfg.metrics,
                &cfg.seeds(),
                &train,
                &val,
                Some(&run.out),
                resume,
            )?;
            run.write_json("seg_train_report.json", &report)?;
            if !test.is_empty() {
                let metrics = evaluate_segmentation(&model, &test, &cfg.metrics)?;
                run.write("seg_metrics.txt", metrics.to_text())?;
                print!("{}", metrics.to_text());
            }
            println!("checkpoint: {}", run.out.join(SEG_CHECKPOINT).display());
        }
        Command::TrainCls { seg, .. } => {
            let seg_path = run.seg_path(&seg);
            let (model, _) = SegModel::load(&seg_path)?;
            let [train, val, _] = run.splits()?;
            let (cls, report) = train_classification(&run.config, &model, &train, &val)?;
            let path = run.out.join(CLS_CHECKPOINT);
            cls.save(&path, Some(&model.config().hash()))?;
            run.write_json("cls_train_report.json", &report)?;
            println!(
                "{} training pairs per class {:?}; checkpoint: {}",
                report.train_pairs,
                report.pairs_per_class,
                path.display()
            );
        }
        Command::Infer { images, models } => {
            let cascade = run.cascade(&models)?;
            let mut results = Vec::with_capacity(images.len());
            for path in &images {
                let result = cascade.infer(&load_image(path)?)?;
                results.push(ImageResult { image: path, result });
            }
            run.write_json("inference.json", &results)?;
            println!("{}", serde_json::to_string_pretty(&results)?);
        }
        Command::Eval {
            segmentation_only,
            models,
            ..
        } => {
            let [_, _, test] = run.splits()?;
            let cfg = &run.config;
            let report = if segmentation_only {
                let (model, _) = SegModel::load(&run.seg_path(&models.seg))?;
                evaluate_segmentation(&model, &test, &cfg.metrics)?
            } else {
                let threshold = cfg.classifier.association_threshold_px;
                evaluate(&run.cascade(&models)?, &test, &cfg.metrics, threshold)?
            };
            run.write("metrics.txt", report.to_text())?;
            run.write("metrics.csv", report.to_csv())?;
            run.write_json("metrics.json", &report)?;
            print!("{}", report.to_text());
        }
        Command::Ablate {
            sizes, schemes, seg, ..
        } => {
            let sizes = sizes.unwrap_or_else(|| DESCRIPTOR_SIZES.to_vec());
            let (model, _) = SegModel::load(&run.seg_path(&seg))?;
            let [train, _, test] = run.splits()?;
            let table = run_ablation(&run.config, &model, &train, &test, &sizes, &schemes)?;
            run.write("ablation.csv", table.to_csv())?;
            run.write("ablation.txt", table.to_text())?;
            run.write_json("ablation.json", &table)?;
            print!("{}", table.to_text());
        }
        Command::Overlay { images, mode, models } => {
            let cascade = run.cascade(&models)?;
            let mode = match mode {
                Colors::Classes => OverlayMode::Classes(cascade.scheme()),
                Colors::Instances => OverlayMode::Instances,
            };
            let dir = run.out.join("overlays");
            fs::create_dir_all(&dir)?;
            for path in &images {
                let image = load_image(path)?;
                let result = cascade.infer(&image)?;
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
                let dest = dir.join(format!("{stem}_overlay.png"));
                render_overlay(&image, &result, mode).save(&dest)?;
                println!(
                    "{}: {} boundaries -> {}",
                    path.display(),
                    result.boundaries.len(),
                    dest.display()
                );
            }
        }
    }
    Ok(())
}
