use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use selftune::dataio::Dataset;
use selftune::evaluator::{
    evaluate_run, DepthPredictor, EvalClamp, GroundTruthPredictor, PointCloud, TeacherPredictor,
};
use selftune::models::PrecomputedTeacher;
use selftune::synth::{generate_sequence, SequenceSpec};
use selftune::trainer::{fit, AblationPreset, Checkpoint, TrainConfig};
use selftune::{dataio, ErrorKind};

mod settings;

use settings::{FileSettings, Section};

const DEFAULT_MAX_DT: f64 = 0.005;

#[derive(Parser)]
#[command(name = "selftune", version, about = "Metric fine-tuning of a monocular depth student from metric poses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic sequence with ground truth and a distorted teacher.
    SynthGen(SynthGenArgs),
    /// Fine-tune the student on a dataset.
    Finetune(FinetuneArgs),
    /// Score a checkpoint against ground-truth depth.
    Evaluate(EvaluateArgs),
    /// Back-project predicted depth of a frame range into one PLY cloud.
    ExportCloud(ExportCloudArgs),
}

#[derive(Args)]
struct SynthGenArgs {
    #[arg(long)]
    scene_seed: Option<u64>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// TOML file; its [synth_gen] table supplies defaults for these flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Config file (TOML): training keys layered over the profile, plus an
    /// optional [finetune] table with defaults for the other flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in base profile: desk (default) or reference.
    #[arg(long)]
    profile: Option<String>,
    /// full, photo-only, photo-distill or from-scratch.
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint file, or @ground-truth / @teacher for reference rows.
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    clamp_min: Option<f64>,
    #[arg(long)]
    clamp_max: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ExportCloudArgs {
    /// Checkpoint file, or @ground-truth / @teacher.
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Frame id `n` or half-open range `a:b`.
    #[arg(long)]
    frames: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Failure with the exit status it maps to.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Run { stage: &'static str, error: selftune::Error },
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Run { error, .. } => match error.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numerical => 4,
            },
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Run { stage, error } => write!(f, "{stage} failed: {error}"),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn at(stage: &'static str) -> impl Fn(selftune::Error) -> Failure {
    move |error| Failure::Run { stage, error }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthGen(a) => synth_gen(a),
        Command::Finetune(a) => finetune(a),
        Command::Evaluate(a) => evaluate(a),
        Command::ExportCloud(a) => export_cloud(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}

fn load_settings(path: Option<&Path>, section: Section) -> CliResult<FileSettings> {
    match path {
        Some(p) => FileSettings::load(p, section).map_err(at("config")),
        None => Ok(FileSettings::empty(section)),
    }
}

fn synth_gen(a: SynthGenArgs) -> CliResult<()> {
    let s = load_settings(a.config.as_deref(), Section::SynthGen)?;
    let out = s.require_path(a.out, "out")?;
    let seed = s.u64_or(a.scene_seed, "scene_seed", 1)?;
    let frames = s.usize_or(a.frames, "frames", 120)?;
    let spec = SequenceSpec::desk(seed, frames);
    let summary = generate_sequence(&spec, &out).map_err(at("synth-gen"))?;
    println!("dataset\t{}", out.display());
    println!("frames\t{}", summary.frames);
    println!("resolution\t{}x{}", summary.width, summary.height);
    println!("teacher_resolution\t{}x{}", summary.teacher_width, summary.teacher_height);
    println!("depth_range\t{:.3}\t{:.3}", summary.min_depth, summary.max_depth);
    println!("invalid_pixels\t{}", summary.invalid_pixels);
    Ok(())
}

fn finetune(a: FinetuneArgs) -> CliResult<()> {
    let s = load_settings(a.config.as_deref(), Section::Finetune)?;
    let data = s.require_path(a.data, "data")?;
    let out = s.require_path(a.out, "out")?;
    let profile = s.string_or(a.profile, "profile")?.unwrap_or_else(|| "desk".into());
    let base = TrainConfig::profile(&profile).map_err(at("config"))?;
    let mut config = s.train_config(base).map_err(at("config"))?;
    config = config.with_env(std::env::vars()).map_err(at("config"))?;
    if let Some(name) = s.string_or(a.ablation, "ablation")? {
        let preset = AblationPreset::parse(&name).map_err(at("config"))?;
        config = config.with_ablation(preset);
    }
    let dataset = Dataset::open(&data, config.max_dt).map_err(at("dataset"))?;
    let teacher = PrecomputedTeacher::new(&data.join(dataio::TEACHER_DIR)).map_err(at("teacher"))?;
    let w = config.effective_weights();
    info!(
        "fine-tuning on {} frames, weights distill {} smooth {} consistency {}",
        dataset.len(),
        w.distill,
        w.smooth,
        w.consistency
    );
    let outcome = fit(&dataset, &teacher, &config, &out).map_err(at("finetune"))?;
    println!("best_checkpoint\t{}", outcome.best_checkpoint.display());
    println!("best_epoch\t{}", outcome.best_epoch);
    println!("manifest\t{}", outcome.manifest.display());
    if let Some(last) = outcome.history.last().and_then(|e| e.train.as_ref()) {
        println!("final_train_total\t{:.6}", last.total);
    }
    Ok(())
}

/// Resolves `--checkpoint` into a predictor plus the pose-matching tolerance.
fn predictor(spec: &str, data: &Path) -> CliResult<(Box<dyn DepthPredictor>, f64)> {
    match spec {
        "@ground-truth" => Ok((Box::new(GroundTruthPredictor), DEFAULT_MAX_DT)),
        "@teacher" => {
            let teacher = PrecomputedTeacher::new(&data.join(dataio::TEACHER_DIR)).map_err(at("teacher"))?;
            Ok((Box::new(TeacherPredictor { teacher }), DEFAULT_MAX_DT))
        }
        path => {
            let ck = Checkpoint::load(Path::new(path)).map_err(at("checkpoint"))?;
            let dt = ck.config.max_dt;
            Ok((Box::new(ck), dt))
        }
    }
}

fn evaluate(a: EvaluateArgs) -> CliResult<()> {
    let s = load_settings(a.config.as_deref(), Section::Evaluate)?;
    let spec = s
        .string_or(a.checkpoint, "checkpoint")?
        .ok_or_else(|| Failure::Usage("missing --checkpoint".into()))?;
    let data = s.require_path(a.data, "data")?;
    let report = s.require_path(a.report, "report")?;
    let defaults = EvalClamp::default();
    let clamp = EvalClamp {
        min: s.f64_or(a.clamp_min, "clamp_min", defaults.min)?,
        max: s.f64_or(a.clamp_max, "clamp_max", defaults.max)?,
    };
    if !(clamp.min > 0.0 && clamp.min < clamp.max) {
        return Err(Failure::Usage(format!("invalid clamp range [{}, {}]", clamp.min, clamp.max)));
    }
    let (pred, max_dt) = predictor(&spec, &data)?;
    let dataset = Dataset::open(&data, max_dt).map_err(at("dataset"))?;
    let result = evaluate_run(pred.as_ref(), &dataset, clamp).map_err(at("evaluate"))?;
    result.write(&report).map_err(at("report"))?;
    print!("{}", result.to_tsv());
    Ok(())
}

/// Parses `n` or `a:b` (half-open) into a list of frame ids.
fn parse_frames(spec: &str) -> CliResult<std::ops::Range<usize>> {
    let bad = || Failure::Usage(format!("--frames expects n or a:b, got '{spec}'"));
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    let range = match spec.split_once(':') {
        Some((a, b)) => num(a)?..num(b)?,
        None => {
            let n = num(spec)?;
            n..n + 1
        }
    };
    if range.is_empty() {
        return Err(bad());
    }
    Ok(range)
}

fn export_cloud(a: ExportCloudArgs) -> CliResult<()> {
    let s = load_settings(a.config.as_deref(), Section::ExportCloud)?;
    let spec = s
        .string_or(a.checkpoint, "checkpoint")?
        .ok_or_else(|| Failure::Usage("missing --checkpoint".into()))?;
    let data = s.require_path(a.data, "data")?;
    let out = s.require_path(a.out, "out")?;
    let frames = parse_frames(&s.string_or(a.frames, "frames")?.unwrap_or_else(|| "0".into()))?;
    let (pred, max_dt) = predictor(&spec, &data)?;
    let dataset = Dataset::open(&data, max_dt).map_err(at("dataset"))?;
    let indices: Vec<usize> = frames
        .clone()
        .map(|id| {
            dataset.index_of(id).ok_or_else(|| Failure::Run {
                stage: "frame range",
                error: selftune::Error::Data(format!(
                    "frame {id} of range {}:{} is not in the dataset",
                    frames.start, frames.end
                )),
            })
        })
        .collect::<CliResult<_>>()?;
    let mut cloud = PointCloud::default();
    for idx in indices {
        let depth = pred.predict(&dataset, idx).map_err(at("predict"))?;
        let (h, w) = depth.dim();
        let k = dataio::scale_intrinsics(&dataset.intrinsics, w, h).map_err(at("intrinsics"))?;
        let image = dataset.load_image(idx).map_err(at("dataset"))?;
        let n = cloud
            .add_frame(&depth, image.view(), &k, &dataset.frames[idx].pose)
            .map_err(at("export"))?;
        info!("frame {}: {n} points", dataset.frames[idx].id);
    }
    cloud.write_ply(&out).map_err(at("export"))?;
    println!("cloud\t{}", out.display());
    println!("vertices\t{}", cloud.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_specs() {
        assert_eq!(parse_frames("3").unwrap(), 3..4);
        assert_eq!(parse_frames("0:10").unwrap(), 0..10);
        assert!(parse_frames("5:5").is_err());
        assert!(parse_frames("a:b").is_err());
    }

    #[test]
    fn usage_failures_exit_with_two() {
        assert_eq!(Failure::Usage("x".into()).code(), 2);
        let data = Failure::Run {
            stage: "dataset",
            error: selftune::Error::Data("x".into()),
        };
        assert_eq!(data.code(), 3);
    }

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
