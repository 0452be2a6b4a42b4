use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use safnet::checkpoint::{read_checkpoint, write_checkpoint};
use safnet::experiment::{
    evaluate, fit, run_ablation, run_robustness, segment_config_for, train_mode_pair, AblationConfig, EvalReport,
    ExperimentConfig, RobustnessConfig,
};
use safnet::fusion::FusionMode;
use safnet::io::{read_point_cloud, read_scene, write_point_cloud, write_scene};
use safnet::metrics::confusion;
use safnet::segment::segment_scene;
use safnet::synth::{generate_scene, SceneSpec};
use safnet::views::{compute_coverage, greedy_cover, union_coverage, DEFAULT_MATCH_RADIUS, DEFAULT_VIEW_BUDGET};
use safnet::PointCloud;
use serde_json::json;

#[derive(Parser)]
#[command(name = "safnet", version, about = "Similarity-aware 2D-3D fusion for point cloud segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene directory.
    GenScene {
        /// SceneSpec JSON; defaults are used for missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Overrides the seed from --spec.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedily pick frames covering the scene cloud; prints JSON.
    ViewSelect {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = DEFAULT_VIEW_BUDGET)]
        budget: usize,
        #[arg(long, default_value_t = DEFAULT_MATCH_RADIUS)]
        radius: f64,
    },
    /// Train a model and write a checkpoint.
    Train {
        /// ExperimentConfig JSON.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also evaluate on the validation suite and write this report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Label a scene and write the cloud with predicted labels.
    Segment {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "safnet")]
        mode: FusionMode,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_VIEW_BUDGET)]
        budget: usize,
    },
    /// Compare predicted and ground-truth labels; writes a JSON report.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Copy the loss history of this checkpoint into the report.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Defaults to one more than the largest label seen.
        #[arg(long)]
        class_count: Option<usize>,
    },
    /// Train and evaluate ablation rows; writes a JSON report.
    Ablate {
        /// AblationConfig JSON.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep view drop for a safnet/fixed model pair; writes CSV.
    Robustness {
        /// RobustnessConfig JSON.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    /// Bad invocation or missing input file.
    Usage(String),
    Run(String),
}

impl From<safnet::Error> for Failure {
    fn from(e: safnet::Error) -> Self {
        match &e {
            safnet::Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                Failure::Usage(e.to_string())
            }
            _ => Failure::Run(e.to_string()),
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::from(safnet::Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))?;
    serde_json::from_str(&text).map_err(|e| Failure::Run(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Run(format!("{}: {e}", path.display())))
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| Failure::Run(e.to_string()))
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenScene { spec, seed, out } => {
            let mut spec: SceneSpec = match spec {
                Some(p) => read_json(&p)?,
                None => SceneSpec::default(),
            };
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            write_scene(&generate_scene(&spec)?, &out)?;
        }
        Command::ViewSelect { scene, budget, radius } => {
            let scene = read_scene(&scene)?;
            let masks = scene
                .frames
                .iter()
                .map(|f| compute_coverage(f, &scene.cloud, radius))
                .collect::<safnet::Result<Vec<_>>>()?;
            let selected = greedy_cover(&masks, budget)?;
            let report = json!({
                "selected": selected,
                "covered": union_coverage(&masks, &selected),
                "point_count": scene.cloud.len(),
            });
            print!("{}", to_json(&report)?);
        }
        Command::Train { config, out, report } => {
            let config: ExperimentConfig = read_json(&config)?;
            let ckpt = fit(&config.training_scenes()?, &config.train)?;
            write_checkpoint(&ckpt, &out)?;
            if let Some(path) = report {
                let cm = evaluate(&ckpt.model, &config.train.fusion, &config.validation_scenes()?, &config.segment)?;
                write_text(&path, &to_json(&EvalReport::new(&cm, ckpt.history.clone()))?)?;
            }
        }
        Command::Segment { scene, model, mode, out, budget } => {
            let scene = read_scene(&scene)?;
            let ckpt = read_checkpoint(&model)?;
            let settings = ckpt.config.fusion.with_mode(mode);
            let seg = segment_scene(&scene, &ckpt.model, &settings, &segment_config_for(&ckpt.config, budget))?;
            let cloud = PointCloud::new(scene.cloud.points().to_vec(), Some(seg.labels), None)?;
            write_point_cloud(&cloud, &out)?;
        }
        Command::Eval { pred, gt, report, model, class_count } => {
            let pred = read_point_cloud(&pred)?;
            let gt = read_point_cloud(&gt)?;
            let history = match model {
                Some(p) => read_checkpoint(&p)?.history,
                None => Vec::new(),
            };
            let (Some(p), Some(g)) = (pred.labels(), gt.labels()) else {
                return Err(Failure::Run("both clouds need a label column".into()));
            };
            let class_count = class_count
                .unwrap_or_else(|| p.iter().chain(g).max().map_or(1, |&m| m as usize + 1));
            let cm = confusion(p, g, class_count)?;
            write_text(&report, &to_json(&EvalReport::new(&cm, history))?)?;
        }
        Command::Ablate { config, out } => {
            let config: AblationConfig = read_json(&config)?;
            let text = to_json(&run_ablation(&config)?)?;
            match out {
                Some(p) => write_text(&p, &text)?,
                None => print!("{text}"),
            }
        }
        Command::Robustness { config, out } => {
            let config: RobustnessConfig = read_json(&config)?;
            let (safnet, fixed) = train_mode_pair(&config.experiment)?;
            let csv = run_robustness(&config, &safnet, &fixed)?.to_csv();
            match out {
                Some(p) => write_text(&p, &csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
