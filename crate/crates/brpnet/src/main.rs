use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use brpnet::core::save_prob_map;
use brpnet::data::{load_dataset, load_image, save_image, save_instance_map, synth_generate, Sample};
use brpnet::harness::{
    evaluate_dirs, format_report, format_table, split_train_val, sweep, train_stage1,
    train_stage2_opts, Pipeline, SweepParam, TrainConfig, write_report,
};
use brpnet::metrics::F1Criterion;

#[derive(Parser)]
#[command(name = "brpnet", version, about = "Two-stage boundary-assisted nucleus instance segmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset (images/ + labels/).
    Synth {
        /// Number of images.
        #[arg(long)]
        n: usize,
        /// Image shape, e.g. 128x128.
        #[arg(long, default_value = "128x128")]
        shape: String,
        /// Expected instances per 64x64 tile.
        #[arg(long, default_value_t = 2.5)]
        density: f64,
        /// Probability that an instance is placed touching an existing one.
        #[arg(long, default_value_t = 0.25)]
        overlap_prob: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the stage-1 (TAFE) network.
    TrainStage1 {
        /// Dataset directory (images/ + labels/).
        #[arg(long)]
        data: PathBuf,
        /// Optional validation dataset; defaults to carving val_fraction off the training set.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Config file (key = value); defaults to the desk preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Inline config overrides, applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the stage-2 proposal-refinement networks.
    TrainStage2 {
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint.
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Debug: dump the first few training patches as PNG strips.
        #[arg(long)]
        dump_patches: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run inference and write predicted instance maps.
    Infer {
        /// Dataset directory or flat directory of PNG images.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        stage2_small: Option<PathBuf>,
        #[arg(long)]
        stage2_large: Option<PathBuf>,
        /// Stop after stage-1 proposals (single-stage ablation).
        #[arg(long)]
        no_stage2: bool,
        /// Override the post-processing dilation radius.
        #[arg(long)]
        radius: Option<usize>,
        /// Also dump stage-1 probability maps as .brpf files.
        #[arg(long)]
        dump_probs: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Detection-F1 matching rule.
        #[arg(long, default_value = "iou")]
        f1_criterion: String,
        /// Report file (tab-separated); printed to stdout regardless.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Sweep one hyper-parameter and report AJI per value.
    Sweep {
        /// dilation_radius | tau | stage2_loss
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        /// Training dataset (needed for tau / stage2_loss retraining).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluation dataset.
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        stage2_small: Option<PathBuf>,
        #[arg(long)]
        stage2_large: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::desk();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        cfg.apply_text(&text)?;
    }
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_samples(dir: &Path, boundary_width: usize) -> Result<Vec<Sample>> {
    let raw = load_dataset(dir)?;
    Ok(raw
        .into_iter()
        .map(|(stem, image, instances)| Sample::new(stem, image, instances, boundary_width))
        .collect())
}

/// Images for inference: dataset dir with images/ or a flat PNG directory.
fn load_images(dir: &Path) -> Result<Vec<(String, brpnet::core::RgbImage)>> {
    let base = if dir.join("images").is_dir() {
        dir.join("images")
    } else {
        dir.to_path_buf()
    };
    let mut stems: Vec<(String, PathBuf)> = std::fs::read_dir(&base)
        .with_context(|| format!("reading {}", base.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("png"))
        .filter_map(|p| {
            p.file_stem()
                .and_then(|s| s.to_str())
                .map(|s| (s.to_string(), p.clone()))
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        bail!("no PNG images found under {}", base.display());
    }
    stems
        .into_iter()
        .map(|(stem, path)| Ok((stem, load_image(&path)?)))
        .collect()
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Synth {
            n,
            shape,
            density,
            overlap_prob,
            seed,
            out,
        } => {
            let (h, w) = parse_shape(&shape)?;
            let samples = synth_generate(n, (h, w), density, overlap_prob, seed);
            std::fs::create_dir_all(out.join("images"))?;
            std::fs::create_dir_all(out.join("labels"))?;
            for s in &samples {
                save_image(&out.join(format!("images/{}.png", s.stem)), &s.image)?;
                save_instance_map(&out.join(format!("labels/{}.png", s.stem)), &s.instances)?;
            }
            println!("wrote {} samples to {}", samples.len(), out.display());
        }
        Cmd::TrainStage1 {
            data,
            val,
            config,
            set,
            out,
        } => {
            let cfg = load_config(&config, &set)?;
            let samples = load_samples(&data, cfg.boundary_width)?;
            let (train, val_set) = match val {
                Some(vdir) => (samples, load_samples(&vdir, cfg.boundary_width)?),
                None => split_train_val(samples, cfg.val_fraction),
            };
            println!("training stage 1 on {} images, validating on {}", train.len(), val_set.len());
            let artifacts = train_stage1(&train, &val_set, &cfg, &out)?;
            println!(
                "best val AJI {:.4}; checkpoints: {} (best), {} (final)",
                artifacts.best_val_aji,
                artifacts.best_checkpoint.display(),
                artifacts.final_checkpoint.display()
            );
        }
        Cmd::TrainStage2 {
            data,
            stage1,
            config,
            set,
            dump_patches,
            out,
        } => {
            let cfg = load_config(&config, &set)?;
            let samples = load_samples(&data, cfg.boundary_width)?;
            let artifacts = train_stage2_opts(&samples, &stage1, &cfg, &out, dump_patches)?;
            println!(
                "stage-2 checkpoints: {} / {}",
                artifacts.small_checkpoint.display(),
                artifacts.large_checkpoint.display()
            );
        }
        Cmd::Infer {
            data,
            stage1,
            stage2_small,
            stage2_large,
            no_stage2,
            radius,
            dump_probs,
            out,
        } => {
            let pipeline = Pipeline::load(
                &stage1,
                stage2_small.as_deref(),
                stage2_large.as_deref(),
            )?;
            let use_stage2 = pipeline.stage2.is_some() && !no_stage2;
            let images = load_images(&data)?;
            std::fs::create_dir_all(&out)?;
            for (stem, img) in &images {
                let r = radius.unwrap_or(pipeline.cfg.stage1.post.dilation_radius);
                let (map, pp) = pipeline.infer_with_radius(img, use_stage2, r)?;
                save_instance_map(&out.join(format!("{stem}.png")), &map)?;
                if dump_probs {
                    save_prob_map(&out.join(format!("{stem}.seg.brpf")), &pp.seg)?;
                    save_prob_map(&out.join(format!("{stem}.bnd.brpf")), &pp.bnd)?;
                }
            }
            println!("wrote {} predictions to {}", images.len(), out.display());
        }
        Cmd::Evaluate {
            pred,
            gt,
            f1_criterion,
            report,
        } => {
            let criterion: F1Criterion = f1_criterion.parse()?;
            let metrics = evaluate_dirs(&pred, &gt, criterion)?;
            print!("{}", format_report(&metrics));
            if let Some(path) = report {
                write_report(&path, &metrics)?;
            }
        }
        Cmd::Sweep {
            param,
            values,
            data,
            eval,
            stage1,
            stage2_small,
            stage2_large,
            config,
            set,
            out,
        } => {
            let cfg = load_config(&config, &set)?;
            let param: SweepParam = param.parse()?;
            let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
            let train = match (&data, param) {
                (Some(dir), _) => load_samples(dir, cfg.boundary_width)?,
                (None, SweepParam::DilationRadius) => Vec::new(),
                (None, _) => bail!("--data is required for retraining sweeps"),
            };
            let eval_set = load_samples(&eval, cfg.boundary_width)?;
            std::fs::create_dir_all(&out)?;
            let rows = sweep(
                param,
                &values,
                &train,
                &eval_set,
                &stage1,
                stage2_small.as_deref(),
                stage2_large.as_deref(),
                &cfg,
                &out,
            )?;
            let table = format_table(&rows);
            print!("{table}");
            std::fs::write(out.join("sweep.tsv"), table)?;
        }
    }
    Ok(())
}

fn parse_shape(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .with_context(|| format!("shape must look like 128x128, got {s:?}"))?;
    Ok((h.trim().parse()?, w.trim().parse()?))
}
