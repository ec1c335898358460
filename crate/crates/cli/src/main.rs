use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use urbansplat::edit::{apply_edit, EditScript};
use urbansplat::image::write_png8;
use urbansplat::ingest::{init_scene, load_dataset, Dataset, InitConfig};
use urbansplat::metrics::{evaluate, EvalReport};
use urbansplat::raster::{render, render_decomposed, DecomposeTarget, RenderConfig};
use urbansplat::scene::{load_checkpoint, SceneGraph, View};
use urbansplat::synth::{write_synth, SynthSpec};
use urbansplat::train::{train_to_dir, PoseTruth, TrainConfig};

#[derive(Parser)]
#[command(name = "urbansplat", version, about = "Gaussian splatting for dynamic street scenes")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Initialize a scene from a dataset and optimize it.
    Train(TrainArgs),
    /// Render one view of a checkpoint to PNG.
    Render(RenderArgs),
    /// Render dataset frames and write a metrics report.
    Eval(EvalArgs),
    /// Apply an edit script and render one view.
    Edit(EditArgs),
    /// Render the background alone or a single object.
    Decompose(DecomposeArgs),
    /// Generate a synthetic dataset with ground truth.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// JSON training config; every field is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Hold out every 4th frame (index % 4 == 3) from training.
    #[arg(long)]
    waymo_split: bool,
    /// Clean object poses, for pose-residual columns in the log.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct ViewArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Timestep to render.
    #[arg(long)]
    frame: usize,
    /// Index of the stored camera; defaults to the camera recorded for `frame`.
    #[arg(long)]
    camera: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    tile_size: usize,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    view: ViewArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Test frames are every 4th frame (index % 4 == 3); otherwise both
    /// splits are the whole dataset.
    #[arg(long)]
    waymo_split: bool,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 16)]
    tile_size: usize,
}

#[derive(Args)]
struct EditArgs {
    #[arg(long)]
    script: PathBuf,
    #[command(flatten)]
    view: ViewArgs,
}

#[derive(Args)]
struct DecomposeArgs {
    /// `background` or an object id.
    #[arg(long)]
    target: String,
    #[command(flatten)]
    view: ViewArgs,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Training config file: [`TrainConfig`] fields plus an optional `init` block.
#[derive(Deserialize, Default)]
#[serde(default)]
struct TrainFile {
    #[serde(flatten)]
    train: TrainConfig,
    init: InitConfig,
}

#[derive(Debug)]
enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<urbansplat::Error> for Failure {
    fn from(e: urbansplat::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let bytes = std::fs::read(path).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn seed_override() -> CliResult<Option<u64>> {
    match std::env::var("SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Validation(format!("SEED must be an unsigned integer, got {s:?}"))),
        Err(_) => Ok(None),
    }
}

/// Frame indices of a split. With `waymo`, test frames are those with
/// index % 4 == 3; without it every split is the whole dataset.
fn split_frames(ds: &Dataset, split: Split, waymo: bool) -> Vec<usize> {
    (0..ds.frames.len())
        .filter(|i| match (split, waymo) {
            (Split::All, _) | (_, false) => true,
            (Split::Test, true) => i % 4 == 3,
            (Split::Train, true) => i % 4 != 3,
        })
        .collect()
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let ds = load_dataset(&a.data)?;
    let mut file: TrainFile = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainFile::default(),
    };
    if let Some(seed) = seed_override()? {
        file.train.seed = seed;
        file.init.seed = seed;
    }
    file.train.validate()?;
    let truth: Option<PoseTruth> = a.truth.as_deref().map(read_json).transpose()?;
    let train_ds = ds.subset(&split_frames(&ds, Split::Train, a.waymo_split));
    let mut scene = init_scene(&train_ds, &file.init)?;
    // Keep every camera so held-out frames can be rendered by index.
    scene.views = dataset_views(&ds);
    log::info!(
        "training on {} frames, {} initial points",
        train_ds.frames.len(),
        scene.total_points()
    );
    train_to_dir(&train_ds, scene, &file.train, truth, &a.out)?;
    Ok(())
}

fn dataset_views(ds: &Dataset) -> Vec<View> {
    ds.frames
        .iter()
        .map(|f| View {
            timestep: f.timestep,
            camera: f.camera.clone(),
        })
        .collect()
}

fn view_config(scene: &SceneGraph, v: &ViewArgs) -> CliResult<(urbansplat::geometry::Camera, RenderConfig)> {
    if v.frame >= scene.num_frames {
        return Err(Failure::Validation(format!(
            "frame {} out of range, scene has {} frames",
            v.frame, scene.num_frames
        )));
    }
    let view = match v.camera {
        Some(i) => scene.views.get(i).ok_or_else(|| {
            Failure::Validation(format!("camera {i} out of range, checkpoint has {} cameras", scene.views.len()))
        })?,
        None => scene
            .views
            .iter()
            .find(|w| w.timestep == v.frame)
            .ok_or_else(|| Failure::Validation(format!("no stored camera for frame {}; pass --camera", v.frame)))?,
    };
    let cfg = RenderConfig {
        tile_size: v.tile_size,
        ..RenderConfig::at(v.frame)
    };
    cfg.validate()?;
    Ok((view.camera.clone(), cfg))
}

fn render_view(scene: &SceneGraph, v: &ViewArgs) -> CliResult<()> {
    let (cam, cfg) = view_config(scene, v)?;
    let out = render(scene, &cam, &cfg)?;
    write_png8(&v.out, &out.color)?;
    Ok(())
}

fn cmd_render(a: &RenderArgs) -> CliResult<()> {
    render_view(&load_checkpoint(&a.view.ckpt)?, &a.view)
}

fn cmd_edit(a: &EditArgs) -> CliResult<()> {
    let scene = load_checkpoint(&a.view.ckpt)?;
    let script: EditScript = read_json(&a.script)?;
    render_view(&apply_edit(&scene, &script)?, &a.view)
}

fn cmd_decompose(a: &DecomposeArgs) -> CliResult<()> {
    let scene = load_checkpoint(&a.view.ckpt)?;
    let target = match a.target.as_str() {
        "background" => DecomposeTarget::Background,
        "all" => DecomposeTarget::All,
        id => DecomposeTarget::Object(id.parse().map_err(|_| {
            Failure::Validation(format!("target must be `background`, `all` or an object id, got {id:?}"))
        })?),
    };
    let (cam, cfg) = view_config(&scene, &a.view)?;
    let (out, _) = render_decomposed(&scene, &cam, &cfg, target)?;
    write_png8(&a.view.out, &out.color)?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let scene = load_checkpoint(&a.ckpt)?;
    let ds = load_dataset(&a.data)?;
    if ds.num_frames != scene.num_frames {
        return Err(Failure::Validation(format!(
            "dataset has {} timesteps, checkpoint {}",
            ds.num_frames, scene.num_frames
        )));
    }
    let frames = split_frames(&ds, a.split, a.waymo_split);
    let report: EvalReport = evaluate(&scene, &ds, &frames, a.tile_size)?;
    let json = serde_json::to_vec_pretty(&report).expect("report serializes");
    write_bytes(&a.report, &json)?;
    println!(
        "PSNR {:.3}  SSIM {:.4}  PSNR* {}  mIoU {}",
        report.psnr,
        report.ssim,
        report.psnr_star.map_or("n/a".into(), |v| format!("{v:.3}")),
        report.miou.map_or("n/a".into(), |v| format!("{v:.4}")),
    );
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    let mut spec: SynthSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => SynthSpec::default(),
    };
    if let Some(seed) = seed_override()? {
        spec.seed = seed;
    }
    write_synth(&spec, &a.out)?;
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Validation("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Render(a) => cmd_render(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Edit(a) => cmd_edit(a),
        Command::Decompose(a) => cmd_decompose(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(2),
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
