use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gridnerf::autodiff::Checkpoint;
use gridnerf::config::{manifest_path, Preset, RunConfig};
use gridnerf::eval::{compare_images, evaluate, EvalReport};
use gridnerf::grid::export_plane_images;
use gridnerf::metrics::Image;
use gridnerf::model::{render_image, Branch, Model};
use gridnerf::scene::{generate_synthetic_scene, load_dataset, write_synthetic_dataset, Split, SyntheticScene};
use gridnerf::train::{run_training, RunOptions, StageSelect};
use gridnerf::Error;

#[derive(Parser)]
#[command(name = "gridnerf", version, about = "Grid-guided neural radiance fields on synthetic box cities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run config; keys override the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PresetArg::Paper)]
    preset: PresetArg,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (1 = deterministic single-threaded mode).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Paper,
    Benchmark,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Pretrain,
    Joint,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum BranchArg {
    Grid,
    Nerf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic box-city dataset (PNGs + manifest.json).
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        boxes: Option<usize>,
        #[arg(long)]
        train_views: Option<usize>,
        #[arg(long)]
        test_views: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
    },
    /// Pretrain the grid branch and/or train both branches jointly.
    Train {
        #[command(flatten)]
        common: Common,
        /// Manifest file or dataset directory.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = StageArg::Both)]
        stage: StageArg,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Iteration count of the selected stage (pretrain or joint).
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        pretrain_iters: Option<usize>,
        #[arg(long)]
        joint_iters: Option<usize>,
        #[arg(long)]
        batch_rays: Option<usize>,
        /// Keep the feature planes fixed during joint training.
        #[arg(long)]
        freeze_grid_features: bool,
        /// Feed zeros instead of grid features to the NeRF branch.
        #[arg(long)]
        zero_grid_features: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Render dataset poses through one branch.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = BranchArg::Grid)]
        branch: BranchArg,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Score held-out views of both branches (PSNR/SSIM) into metrics.json.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Score PNGs in this directory (named like the dataset frames)
        /// instead of rendering a checkpoint.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Write every feature-plane channel of a checkpoint as a grayscale PNG.
    DumpPlanes {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidArgument(_) | Error::Json(_) => 2,
            e if e.is_numeric() => 4,
            _ => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn config_error(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn resolve(common: &Common) -> Result<RunConfig, Failure> {
    let preset = match common.preset {
        PresetArg::Paper => Preset::Paper,
        PresetArg::Benchmark => Preset::Benchmark,
    };
    let mut cfg = RunConfig::preset(preset);
    if let Some(path) = &common.config {
        cfg = RunConfig::from_file(&cfg, path).map_err(|e| config_error(e.to_string()))?;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = Some(o.clone());
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    if let Some(s) = common.seed {
        cfg.train.seed = s;
        cfg.synth.seed = s;
    }
    Ok(cfg)
}

fn require<'a>(v: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf, Failure> {
    v.as_ref()
        .ok_or_else(|| config_error(format!("missing {what} (flag or config key)")))
}

fn setup(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    cfg.validate().map_err(|e| config_error(e.to_string()))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .map_err(|e| config_error(format!("thread pool: {e}")))?;
    let out = require(&cfg.out_dir, "--out")?.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    std::fs::write(out.join("effective_config.json"), cfg.to_json()?)
        .map_err(|e| Error::io(&out, e))?;
    Ok(out)
}

fn load_model(path: &Path) -> Result<Model<f32>, Failure> {
    Ok(Model::load(&Checkpoint::load(path)?)?)
}

fn split_of(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth {
            common,
            boxes,
            train_views,
            test_views,
            width,
            height,
        } => {
            let mut cfg = resolve(&common)?;
            let s = &mut cfg.synth;
            s.boxes = boxes.unwrap_or(s.boxes);
            s.train_views = train_views.unwrap_or(s.train_views);
            s.test_views = test_views.unwrap_or(s.test_views);
            s.width = width.unwrap_or(s.width);
            s.height = height.unwrap_or(s.height);
            let out = setup(&cfg)?;
            let s = &cfg.synth;
            let scene = generate_synthetic_scene(s.boxes, s.seed, SyntheticScene::default_extents())?;
            let path = write_synthetic_dataset(&out, &scene, &s.views(&scene))?;
            println!("wrote {}", path.display());
        }
        Command::Train {
            common,
            dataset,
            stage,
            resume,
            iters,
            pretrain_iters,
            joint_iters,
            batch_rays,
            freeze_grid_features,
            zero_grid_features,
            quiet,
        } => {
            let mut cfg = resolve(&common)?;
            if dataset.is_some() {
                cfg.dataset = dataset;
            }
            let t = &mut cfg.train;
            t.pretrain_iters = pretrain_iters.unwrap_or(t.pretrain_iters);
            t.joint_iters = joint_iters.unwrap_or(t.joint_iters);
            t.batch_rays = batch_rays.unwrap_or(t.batch_rays);
            t.freeze_grid_features |= freeze_grid_features;
            t.zero_grid_features_in_nerf |= zero_grid_features;
            let stage = match stage {
                StageArg::Pretrain => StageSelect::Pretrain,
                StageArg::Joint => StageSelect::Joint,
                StageArg::Both => StageSelect::Both,
            };
            if let Some(n) = iters {
                match stage {
                    StageSelect::Pretrain => t.pretrain_iters = n,
                    StageSelect::Joint => t.joint_iters = n,
                    StageSelect::Both => {
                        return Err(config_error("--iters needs --stage pretrain or joint"))
                    }
                }
            }
            let out = setup(&cfg)?;
            let ds = load_dataset(&manifest_path(require(&cfg.dataset, "--dataset")?))?;
            let resume = match resume.or(cfg.checkpoint.clone()) {
                Some(p) => Some(Checkpoint::load(&p)?),
                None => None,
            };
            let opts = RunOptions {
                stage,
                out_dir: Some(out.clone()),
                resume,
                verbose: !quiet,
            };
            let (_, report) = run_training(&ds, &cfg.train, opts)?;
            if quiet {
                println!("{}", report.summary_line());
            }
        }
        Command::Render {
            common,
            checkpoint,
            dataset,
            branch,
            split,
        } => {
            let mut cfg = resolve(&common)?;
            cfg.checkpoint = checkpoint.or(cfg.checkpoint);
            cfg.dataset = dataset.or(cfg.dataset);
            let out = setup(&cfg)?;
            let model = load_model(require(&cfg.checkpoint, "--checkpoint")?)?;
            let branch = match branch {
                BranchArg::Grid => Branch::Grid,
                BranchArg::Nerf => Branch::Nerf,
            };
            if branch == Branch::Nerf && model.nerf.is_none() {
                return Err(Error::NerfUninitialized.into());
            }
            let ds = load_dataset(&manifest_path(require(&cfg.dataset, "--dataset")?))?;
            for f in ds.split(split_of(split)) {
                let start = Instant::now();
                let img = render_image(
                    &model,
                    &f.camera,
                    branch,
                    &cfg.train.sampling,
                    cfg.train.seed,
                    cfg.render_chunk,
                )?;
                let name = format!(
                    "{}_{}",
                    branch.as_str(),
                    f.file.file_name().and_then(|n| n.to_str()).unwrap_or("frame.png")
                );
                img.save_png(&out.join(&name))?;
                println!("{name} {:.3}s", start.elapsed().as_secs_f64());
            }
        }
        Command::Eval {
            common,
            checkpoint,
            dataset,
            images,
            split,
        } => {
            let mut cfg = resolve(&common)?;
            cfg.checkpoint = checkpoint.or(cfg.checkpoint);
            cfg.dataset = dataset.or(cfg.dataset);
            let out = setup(&cfg)?;
            let ds = load_dataset(&manifest_path(require(&cfg.dataset, "--dataset")?))?;
            let split = split_of(split);
            let report = match images {
                Some(dir) => {
                    let truths: Vec<Image> = ds.split(split).map(|f| f.image.clone()).collect();
                    let preds = ds
                        .split(split)
                        .map(|f| Image::load_png(&dir.join(f.file.file_name().unwrap_or_default())))
                        .collect::<gridnerf::Result<Vec<_>>>()?;
                    let m = compare_images(&preds, &truths)?;
                    EvalReport {
                        split,
                        images: truths.len(),
                        grid_branch: m.clone(),
                        nerf_branch: Some(m),
                    }
                }
                None => {
                    let model = load_model(require(&cfg.checkpoint, "--checkpoint")?)?;
                    evaluate(&model, &ds, split, &cfg.train.sampling, cfg.train.seed, cfg.render_chunk)?
                }
            };
            let text = report.to_json()?;
            std::fs::write(out.join("metrics.json"), &text).map_err(|e| Error::io(&out, e))?;
            print!("{text}");
        }
        Command::DumpPlanes { common, checkpoint } => {
            let mut cfg = resolve(&common)?;
            cfg.checkpoint = checkpoint.or(cfg.checkpoint);
            let out = setup(&cfg)?;
            let model = load_model(require(&cfg.checkpoint, "--checkpoint")?)?;
            let files = export_plane_images(&model.pyramid, &out)?;
            println!("wrote {} plane images", files.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
