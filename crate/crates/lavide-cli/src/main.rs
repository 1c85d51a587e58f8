//! Command-line interface: dataset generation, training, evaluation,
//! ablations and change-mask rendering.
//!
//! Exit codes: 0 success, 2 usage/config errors, 3 I/O or data errors,
//! 4 numeric aborts.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lavide_core::baselines::{render_map_color, ColorPalette};
use lavide_core::config::RunConfig;
use lavide_core::data::{generate_dataset, read_dataset, write_dataset, SceneConfig};
use lavide_core::error::Error;
use lavide_core::eval::{evaluate_model, run_ablation, AblationAxis, AblationSpec};
use lavide_core::model::{LavideModel, ModelKind, PreparedSample};
use lavide_core::training::{load_checkpoint, save_checkpoint, train, TrainState};
use lavide_core::types::ChangeMap;

#[derive(Parser)]
#[command(name = "lavide", version, about = "Map-image change detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        scenes: usize,
        /// Scene size as HxW (multiples of 32).
        #[arg(long, default_value = "64x64")]
        size: String,
        #[arg(long, default_value_t = 4)]
        categories: usize,
        #[arg(long, default_value_t = 0.5)]
        change_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 6)]
        num_objects: usize,
        #[arg(long, default_value_t = 0.02)]
        noise_sigma: f64,
        #[arg(long, default_value_t = 0.3)]
        texture_level: f64,
    },
    /// Train a model on a dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train a baseline instead of the main model.
        #[arg(long, value_parser = ["category", "lavide-c"])]
        baseline: Option<String>,
    },
    /// Evaluate a checkpoint on a dataset and write a metrics report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train one model per ablated value and report metrics per row.
    Ablate {
        #[arg(long)]
        axis: String,
        /// Comma-separated values for the axis.
        #[arg(long)]
        values: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Render per-sample triptychs: color map, image, prediction overlay.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Shape(_) => 2,
        Error::Io(_) | Error::Data(_) => 3,
        Error::Numeric(_) => 4,
    }
}

fn run(cmd: Command) -> lavide_core::Result<()> {
    match cmd {
        Command::GenData {
            out,
            scenes,
            size,
            categories,
            change_rate,
            seed,
            num_objects,
            noise_sigma,
            texture_level,
        } => {
            let (height, width) = parse_size(&size)?;
            let cfg = SceneConfig {
                height,
                width,
                num_categories: categories,
                num_objects,
                change_rate,
                noise_sigma,
                texture_level,
                seed,
            };
            cfg.validate()?;
            let manifest = serde_json::json!({
                "scenes": scenes,
                "height": height,
                "width": width,
                "categories": categories,
                "change_rate": change_rate,
                "seed": seed,
                "num_objects": num_objects,
                "noise_sigma": noise_sigma,
                "texture_level": texture_level,
            });
            println!("{}", serde_json::to_string_pretty(&manifest).expect("manifest serializes"));
            let (quads, vocab, palette) = generate_dataset(&cfg, scenes)?;
            write_dataset(&quads, &vocab, &palette, &out)?;
            std::fs::write(
                out.join("gen_manifest.json"),
                serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
            )?;
            println!("wrote {scenes} scenes to {}", out.display());
            Ok(())
        }
        Command::Train { config, data, out, baseline } => {
            let mut run_cfg = load_run_config(config.as_deref())?;
            let dataset = read_dataset(&data)?;
            match baseline.as_deref() {
                Some("category") => run_cfg.model.kind = ModelKind::CategorySeg,
                Some("lavide-c") => {
                    run_cfg.model.kind = ModelKind::LavideColor;
                    let palette = dataset.palette.as_ref().ok_or_else(|| {
                        Error::Config("lavide-c needs palette.json in the dataset".into())
                    })?;
                    run_cfg.model.palette = Some(palette.colors().to_vec());
                }
                Some(other) => {
                    return Err(Error::Config(format!("unknown baseline '{other}'")));
                }
                None => {}
            }
            println!("{}", run_cfg.to_json_pretty());
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("config.json"), run_cfg.to_json_pretty())?;

            let model =
                LavideModel::new(run_cfg.model.clone(), dataset.vocab.clone(), run_cfg.train.seed)?;
            let samples: Vec<PreparedSample> = dataset
                .samples
                .iter()
                .map(|s| model.prepare(s))
                .collect::<lavide_core::Result<_>>()?;
            let mut state = TrainState::new(model, &run_cfg.train);

            let log_path = out.join("train_log.jsonl");
            let mut log_file = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
            let result = train(&mut state, &samples, &run_cfg.train, false, |log| {
                use std::io::Write;
                let line = serde_json::to_string(log).expect("log serializes");
                writeln!(log_file, "{line}").expect("log write");
                if log.iter % 50 == 0 || log.iter + 1 == run_cfg.train.max_iters {
                    println!(
                        "iter {:>5}  lr {:.3e}  total {:.4}  change {:.4}  distill {:.4}  contrast {:.4}",
                        log.iter, log.lr, log.total, log.change, log.distill, log.contrast
                    );
                }
            });
            use std::io::Write;
            log_file.flush()?;
            result?;
            let ckpt = out.join("model.ckpt");
            save_checkpoint(&state, &ckpt)?;
            println!("checkpoint written to {}", ckpt.display());
            Ok(())
        }
        Command::Eval { checkpoint, data, report } => {
            let state = load_checkpoint(&checkpoint)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&state.model.config).expect("config serializes")
            );
            let dataset = read_dataset(&data)?;
            if dataset.vocab != state.model.vocab {
                return Err(Error::Config(
                    "dataset vocabulary does not match the checkpoint's".into(),
                ));
            }
            let samples: Vec<PreparedSample> = dataset
                .samples
                .iter()
                .map(|s| state.model.prepare(s))
                .collect::<lavide_core::Result<_>>()?;
            let metrics = evaluate_model(&state.model, &samples)?;
            let json = serde_json::to_string_pretty(&metrics).expect("report serializes");
            std::fs::write(&report, &json)?;
            println!(
                "samples {}  f1 {:.4}  iou {:.4}  recall {:.4}  precision {:.4}",
                metrics.samples, metrics.f1, metrics.iou, metrics.recall, metrics.precision
            );
            println!("report written to {}", report.display());
            Ok(())
        }
        Command::Ablate { axis, values, config, data, report } => {
            let axis = AblationAxis::parse(&axis)?;
            let values: Vec<String> =
                values.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
            let spec = AblationSpec { axis, values };
            spec.validate()?;
            let run_cfg = load_run_config(config.as_deref())?;
            println!("{}", run_cfg.to_json_pretty());
            let dataset = read_dataset(&data)?;
            let mut last_reported = String::new();
            let table = run_ablation(&spec, &dataset, &run_cfg.model, &run_cfg.train, |value, log| {
                if value != last_reported {
                    println!("training {}={}", spec.axis.name(), value);
                    last_reported = value.to_string();
                }
                if log.iter % 100 == 0 {
                    println!("  iter {:>5}  total {:.4}", log.iter, log.total);
                }
            })?;
            std::fs::write(
                &report,
                serde_json::to_string_pretty(&table).expect("report serializes"),
            )?;
            print!("{}", table.to_text_table());
            println!("report written to {}", report.display());
            Ok(())
        }
        Command::Render { checkpoint, data, out } => {
            let state = load_checkpoint(&checkpoint)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&state.model.config).expect("config serializes")
            );
            let dataset = read_dataset(&data)?;
            if dataset.vocab != state.model.vocab {
                return Err(Error::Config(
                    "dataset vocabulary does not match the checkpoint's".into(),
                ));
            }
            let palette = dataset
                .palette
                .clone()
                .unwrap_or_else(|| ColorPalette::default_for(dataset.vocab.len()));
            std::fs::create_dir_all(&out)?;
            for sample in &dataset.samples {
                let prep = state.model.prepare(sample)?;
                let pred = state.model.predict_prepared(&prep)?;
                let map_img = render_map_color(&sample.pre_map, &palette)?;
                let triptych = render_triptych(&map_img.0, &sample.image.0, &pred, &sample.change);
                let path = out.join(format!("{}_triptych.png", sample.stem));
                triptych.save(&path)?;
            }
            println!("wrote {} triptychs to {}", dataset.samples.len(), out.display());
            Ok(())
        }
    }
}

fn parse_size(s: &str) -> lavide_core::Result<(usize, usize)> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 2 {
        return Err(Error::Config(format!("size '{s}' must look like 64x64")));
    }
    let h = parts[0].parse().map_err(|_| Error::Config(format!("bad height in size '{s}'")))?;
    let w = parts[1].parse().map_err(|_| Error::Config(format!("bad width in size '{s}'")))?;
    Ok((h, w))
}

fn load_run_config(path: Option<&std::path::Path>) -> lavide_core::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    }
}

/// Confusion overlay legend: TP white, FP red, FN blue, TN black.
const OVERLAY_TP: [u8; 3] = [255, 255, 255];
const OVERLAY_FP: [u8; 3] = [255, 0, 0];
const OVERLAY_FN: [u8; 3] = [0, 0, 255];
const OVERLAY_TN: [u8; 3] = [0, 0, 0];

fn render_triptych(
    map_rgb: &ndarray::Array3<f64>,
    image_rgb: &ndarray::Array3<f64>,
    pred: &ChangeMap,
    gt: &ChangeMap,
) -> image::RgbImage {
    let (h, w, _) = map_rgb.dim();
    let mut img = image::RgbImage::new(3 * w as u32, h as u32);
    let mut put = |panel: usize, x: usize, y: usize, c: [u8; 3]| {
        img.put_pixel((panel * w + x) as u32, y as u32, image::Rgb(c));
    };
    for y in 0..h {
        for x in 0..w {
            let to_u8 = |v: f64| (v * 255.0).round() as u8;
            put(0, x, y, [
                to_u8(map_rgb[(y, x, 0)]),
                to_u8(map_rgb[(y, x, 1)]),
                to_u8(map_rgb[(y, x, 2)]),
            ]);
            put(1, x, y, [
                to_u8(image_rgb[(y, x, 0)]),
                to_u8(image_rgb[(y, x, 1)]),
                to_u8(image_rgb[(y, x, 2)]),
            ]);
            let overlay = match (pred.data()[(y, x)], gt.data()[(y, x)]) {
                (1, 1) => OVERLAY_TP,
                (1, 0) => OVERLAY_FP,
                (0, 1) => OVERLAY_FN,
                _ => OVERLAY_TN,
            };
            put(2, x, y, overlay);
        }
    }
    img
}
