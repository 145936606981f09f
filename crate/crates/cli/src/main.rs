use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use objmap_cli::commands;
use objmap_cli::{CliError, PipelineConfig};

#[derive(Parser)]
#[command(name = "objmap", version, about = "Landmark-map self-annotation of 3D detections")]
struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `paths.output`.
    #[arg(long, global = true, env = "OBJMAP_OUTPUT")]
    output: Option<PathBuf>,
    /// Calibration key of the camera to use.
    #[arg(long, global = true)]
    camera: Option<String>,
    /// Worker threads for annotate and evaluate.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Associate detections and fuse them into a landmark map.
    BuildMap,
    /// Project the map into every frame and write KITTI labels.
    Annotate {
        /// Map file; defaults to `<output>/map.jsonl`.
        #[arg(long)]
        map: Option<PathBuf>,
    },
    /// Compare predicted label files against ground-truth label files.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Generate a synthetic dataset.
    Simulate {
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(out) = cli.output {
        cfg.paths.output = Some(out);
    }
    if let Some(key) = cli.camera {
        cfg.camera.key = key;
    }
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::BuildMap => {
            let o = commands::build_map(&cfg)?;
            println!(
                "{} landmark(s) from {} track(s) -> {}",
                o.map.landmarks.len(),
                o.tracks,
                o.map_path.display()
            );
        }
        Command::Annotate { map } => {
            let o = commands::annotate(&cfg, map.as_deref())?;
            let n: usize = o.annotations.iter().map(|a| a.entries.len()).sum();
            println!(
                "{} frame(s), {n} annotation(s) -> {}",
                o.annotations.len(),
                o.labels_dir.display()
            );
        }
        Command::Evaluate { pred, gt } => {
            let r = commands::evaluate(&cfg, &pred, &gt)?;
            print!("{}", r.table());
        }
        Command::Simulate { seed } => {
            if let Some(s) = seed {
                cfg.simulator.seed = s;
            }
            let o = commands::simulate(&cfg)?;
            println!(
                "{} object(s), {} detection(s), {} frame(s) -> {}",
                o.ground_truth.objects.len(),
                o.detections.len(),
                o.ground_truth.trajectory.len(),
                cfg.output_dir().display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
