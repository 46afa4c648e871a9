//! Command-line front end: corpus generation, inference, box fusion,
//! evaluation, gradient checks and benchmarking.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use thermal_det::bench::{archive, bench_forward};
use thermal_det::data::{self, generate_corpus, load_labels, load_pgm, read_manifest, write_corpus, SceneSpec};
use thermal_det::detection::{format_detections, parse_detections, ImageDetection};
use thermal_det::eval::{evaluate_files, EvalOptions};
use thermal_det::fusion::{fuse, Decay, FusionConfig, FusionMethod};
use thermal_det::gradcheck::{check_module, GradModule};
use thermal_det::head::kmeans_anchors;
use thermal_det::model::{build_model, count_params, load_weights, save_weights, ModelConfig};
use thermal_det::{Error, Result};

#[derive(Parser)]
#[command(name = "thermal-det", version, about = "Small-object detector for thermal images")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Nms,
    SoftNms,
    Wbf,
}

#[derive(Clone, Copy, ValueEnum)]
enum DecayArg {
    Gaussian,
    Linear,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (PGM images, YOLO labels, manifest.txt).
    Generate {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = data::DESK_IMAGE_SIZE)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = data::DESK_OBJECTS)]
        objects: usize,
        #[arg(long, default_value_t = data::DESK_CLASSES)]
        classes: usize,
        /// Gaussian noise standard deviation.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Run the detector over every image of a manifest.
    Infer {
        #[arg(long)]
        config: PathBuf,
        /// Weight directory from `init-weights`; seeded initialisation if absent.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Corpus manifest.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Score threshold; defaults to the config value.
        #[arg(long)]
        conf: Option<f64>,
    },
    /// De-duplicate detections per image.
    Fuse {
        #[arg(long, value_enum, default_value = "soft-nms")]
        method: Method,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long, default_value_t = 0.5)]
        sigma: f64,
        #[arg(long, default_value_t = 0.001)]
        floor: f64,
        #[arg(long, value_enum, default_value = "gaussian")]
        decay: DecayArg,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score detections against the labels of a corpus manifest.
    Eval {
        #[arg(long)]
        dets: PathBuf,
        /// Corpus manifest.
        #[arg(long)]
        gts: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.95])]
        thresholds: Vec<f64>,
        /// Also report mAP averaged over IoU 0.50:0.05:0.95.
        #[arg(long)]
        coco: bool,
        /// Write the full report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Finite-difference check of a backward pass.
    Gradcheck {
        /// gelu, sigmoid, softmax, layer_norm, attention or all.
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time forward passes.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 20)]
        runs: usize,
        /// Image side; defaults to the config input size.
        #[arg(long)]
        size: Option<usize>,
        /// Append the result as a JSON line to this file.
        #[arg(long)]
        archive: Option<PathBuf>,
    },
    /// Print per-module parameter counts.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
    /// Save the seeded initial weights of a config.
    InitWeights {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit an anchor table to the label sizes of a corpus.
    Anchors {
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value_t = 4)]
        levels: usize,
        #[arg(long, default_value_t = 3)]
        per_level: usize,
        #[arg(long, default_value_t = 100)]
        iterations: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn fusion_config(method: Method, iou: f64, sigma: f64, floor: f64, decay: DecayArg) -> FusionConfig {
    FusionConfig {
        method: match method {
            Method::Nms => FusionMethod::Nms,
            Method::SoftNms => FusionMethod::SoftNms,
            Method::Wbf => FusionMethod::Wbf,
        },
        iou_threshold: iou,
        soft_sigma: sigma,
        soft_score_floor: floor,
        decay: match decay {
            DecayArg::Gaussian => Decay::Gaussian,
            DecayArg::Linear => Decay::Linear,
        },
    }
}

/// Fuses each image's detections, keeping images in first-seen order.
fn fuse_per_image(dets: &[ImageDetection], cfg: &FusionConfig) -> Result<Vec<ImageDetection>> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: std::collections::HashMap<&str, Vec<_>> = Default::default();
    for d in dets {
        let g = groups.entry(d.image_id.as_str()).or_default();
        if g.is_empty() {
            order.push(&d.image_id);
        }
        g.push(d.detection);
    }
    let mut out = Vec::new();
    for id in order {
        for detection in fuse(&groups[id], cfg)? {
            out.push(ImageDetection {
                image_id: id.to_string(),
                detection,
            });
        }
    }
    Ok(out)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate {
            count,
            size,
            seed,
            out,
            objects,
            classes,
            noise,
        } => {
            let mut spec = SceneSpec::square(size, objects, seed);
            spec.num_classes = classes;
            if let Some(n) = noise {
                spec.noise_sigma = n;
            }
            let scenes = generate_corpus(&spec, count)?;
            let manifest = write_corpus(&out, &scenes)?;
            println!("wrote {count} scenes to {}", manifest.display());
        }
        Command::Infer {
            config,
            weights,
            images,
            out,
            conf,
        } => {
            let cfg = ModelConfig::load(&config)?;
            let model = match &weights {
                Some(dir) => load_weights(&cfg, dir)?,
                None => build_model(&cfg)?,
            };
            let conf = conf.unwrap_or(cfg.head.conf_threshold);
            let entries = read_manifest(&images)?;
            let per_image: Vec<Vec<ImageDetection>> = entries
                .par_iter()
                .map(|e| {
                    let image = load_pgm(&e.image)?;
                    let id = e.image_id();
                    Ok(model
                        .detect(&image, conf)?
                        .into_iter()
                        .map(|detection| ImageDetection {
                            image_id: id.clone(),
                            detection,
                        })
                        .collect())
                })
                .collect::<Result<_>>()?;
            let dets: Vec<ImageDetection> = per_image.into_iter().flatten().collect();
            write(&out, &format_detections(&dets))?;
            log::info!("{} detections over {} images", dets.len(), entries.len());
        }
        Command::Fuse {
            method,
            iou,
            sigma,
            floor,
            decay,
            input,
            out,
        } => {
            let cfg = fusion_config(method, iou, sigma, floor, decay);
            cfg.validate()?;
            let text = fs::read_to_string(&input)?;
            let dets = parse_detections(&text, &input.display().to_string())?;
            write(&out, &format_detections(&fuse_per_image(&dets, &cfg)?))?;
        }
        Command::Eval {
            dets,
            gts,
            thresholds,
            coco,
            json,
        } => {
            let report = evaluate_files(&dets, &gts, &EvalOptions { thresholds, coco })?;
            print!("{}", report.to_text());
            if let Some(path) = json {
                let text = serde_json::to_string_pretty(&report).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                write(&path, &text)?;
            }
        }
        Command::Gradcheck { module, seed } => {
            let modules = if module == "all" {
                GradModule::ALL.to_vec()
            } else {
                vec![module.parse()?]
            };
            let mut failed = Vec::new();
            for m in modules {
                let r = check_module(m, seed)?;
                println!(
                    "{:<11} max_rel_err {:.3e} at {:<3} {}",
                    m.name(),
                    r.max_relative_error,
                    r.worst_index,
                    if r.passed { "PASS" } else { "FAIL" }
                );
                if !r.passed {
                    failed.push(m.name());
                }
            }
            if !failed.is_empty() {
                return Err(Error::Invariant(format!(
                    "gradient check failed: {}",
                    failed.join(", ")
                )));
            }
        }
        Command::Bench {
            config,
            runs,
            size,
            archive: path,
        } => {
            let cfg = ModelConfig::load(&config)?;
            let report = bench_forward(&cfg, runs, size.unwrap_or(cfg.model.input_size))?;
            println!(
                "{}x{} runs {} mean {:.3} ms p50 {:.3} ms p95 {:.3} ms stability {:.3}",
                report.image_size,
                report.image_size,
                report.runs,
                report.mean_ms,
                report.p50_ms,
                report.p95_ms,
                report.stability
            );
            if let Some(p) = path {
                archive(&report, &p)?;
            }
        }
        Command::Params { config } => {
            let counts = count_params(&ModelConfig::load(&config)?)?;
            for (name, n) in &counts.modules {
                println!("{name:<13} {n:>12}");
            }
            println!("{:<13} {:>12}", "total", counts.total);
        }
        Command::InitWeights { config, out } => {
            save_weights(&build_model(&ModelConfig::load(&config)?)?, &out)?;
        }
        Command::Anchors {
            images,
            levels,
            per_level,
            iterations,
            out,
        } => {
            let mut sizes = Vec::new();
            for e in read_manifest(&images)? {
                sizes.extend(load_labels(&e)?.iter().map(|l| (l.bbox.width(), l.bbox.height())));
            }
            let table = kmeans_anchors(&sizes, levels, per_level, iterations)?;
            write(&out, &table.to_text())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 3 })
        }
    }
}
