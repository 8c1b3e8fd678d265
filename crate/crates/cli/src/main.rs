//! `synthpose`: scenario generation, synthesis, quality gating, fitting,
//! pipeline orchestration, dataset statistics and evaluation.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 on a runtime failure.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use synthpose_core::analyser::quality_gate;
use synthpose_core::fit::fit_sequence_data;
use synthpose_core::io::{self, AnnotationFile, ANNOTATION_FORMAT, FORMAT_VERSION, SEQUENCE_FORMAT};
use synthpose_core::metrics::{mpjpe, pa_mpjpe};
use synthpose_core::stats::dataset_stats_dir;
use synthpose_core::synth::{add_noise, generate_scenario, synthesize_sequence, ScenarioSpec};
use synthpose_core::Vec3;
use synthpose_pipeline::run::{job_id, job_seed, noise_seed};
use synthpose_pipeline::{run_pipeline, PipelineConfig};

use config::Config;

const SCENARIO_FORMAT: &str = "synthpose.scenario";
const SCENARIO_SUFFIX: &str = ".scenario.json";

#[derive(Parser, Debug)]
#[command(name = "synthpose", version, about = "Synthetic human pose data generation and annotation")]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Scenario files.
    #[command(subcommand)]
    Scenario(ScenarioCommand),
    /// Render a scenario into a keypoint sequence.
    Synth(SynthArgs),
    /// Run the quality gate on a sequence and print the report.
    Analyse(AnalyseArgs),
    /// Fit the body model to a sequence.
    Fit(FitArgs),
    /// Batch orchestration.
    #[command(subcommand)]
    Pipeline(PipelineCommand),
    /// Camera and occlusion statistics over a directory of sequences.
    Stats(StatsArgs),
    /// MPJPE and PA-MPJPE between two keypoint files.
    Eval(EvalArgs),
}

#[derive(Subcommand, Debug)]
enum ScenarioCommand {
    /// Draw scenario files from a master seed.
    Gen(ScenarioGenArgs),
}

#[derive(Args, Debug)]
struct ScenarioGenArgs {
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Keypoint noise standard deviation, metres.
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args, Debug)]
struct AnalyseArgs {
    #[arg(long)]
    input: PathBuf,
    /// Also write the report here as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    input: PathBuf,
    /// Annotation file; defaults to the input name with `.fit.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    lambda_smooth: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum PipelineCommand {
    /// Generate, gate and annotate a batch of sequences.
    Run(PipelineRunArgs),
}

#[derive(Args, Debug)]
struct PipelineRunArgs {
    #[arg(long)]
    sequences: Option<usize>,
    #[arg(long)]
    gen_workers: Option<usize>,
    #[arg(long)]
    fit_workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    /// Directory of `.seq.json` files.
    #[arg(long)]
    dir: PathBuf,
    /// Where to write `stats.csv` and the histogram SVGs.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Sequence or annotation file.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Align with rotation and translation only.
    #[arg(long)]
    no_scale: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScenarioFile {
    format: String,
    version: u32,
    scenario: ScenarioSpec,
}

fn load_scenario(path: &Path) -> Result<ScenarioSpec> {
    let file: ScenarioFile = io::read_json(path).with_context(|| format!("reading {}", path.display()))?;
    if file.format != SCENARIO_FORMAT || file.version != FORMAT_VERSION {
        bail!("{}: not a version {FORMAT_VERSION} scenario file", path.display());
    }
    Ok(file.scenario)
}

fn scenario_gen(cfg: &Config, args: &ScenarioGenArgs) -> Result<()> {
    let seed = args.seed.unwrap_or(cfg.seed);
    let catalogs = cfg.catalogs()?;
    for i in 0..args.count {
        let id = job_id(i);
        let scenario = generate_scenario(&id, job_seed(seed, i), &catalogs, &cfg.camera_profile)?;
        let path = args.out.join(format!("{id}{SCENARIO_SUFFIX}"));
        io::write_json_atomic(&path, &ScenarioFile { format: SCENARIO_FORMAT.into(), version: FORMAT_VERSION, scenario })?;
        println!("{}", path.display());
    }
    Ok(())
}

fn synth(cfg: &Config, args: &SynthArgs) -> Result<()> {
    let spec = load_scenario(&args.scenario)?;
    let seq = synthesize_sequence(&spec, &cfg.world()?, &cfg.catalogs()?)?;
    let seq = add_noise(&seq, args.noise.unwrap_or(cfg.noise_sigma), noise_seed(spec.seed))?;
    io::save_sequence(&args.out, &seq)?;
    println!("{}: {} frames", args.out.display(), seq.len());
    Ok(())
}

fn load_sequence(path: &Path) -> Result<synthpose_core::synth::SequenceData> {
    io::load_sequence(path).with_context(|| format!("loading sequence {}", path.display()))
}

fn analyse(cfg: &Config, args: &AnalyseArgs) -> Result<()> {
    let seq = load_sequence(&args.input)?;
    let report = quality_gate(&seq, &cfg.thresholds)?;
    if let Some(out) = &args.out {
        io::write_json_atomic(out, &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn fit(cfg: &Config, args: &FitArgs) -> Result<()> {
    let seq = load_sequence(&args.input)?;
    let mut fit_cfg = cfg.fit.clone();
    if let Some(l) = args.lambda_smooth {
        fit_cfg.lambda_smooth = l;
    }
    fit_cfg.validate()?;
    let tree = cfg.tree()?;
    let result = fit_sequence_data(&seq, &tree, &fit_cfg)?;
    let out = args.out.clone().unwrap_or_else(|| {
        let name = args.input.file_name().and_then(|s| s.to_str()).unwrap_or("sequence");
        let stem = name.strip_suffix(io::SEQUENCE_SUFFIX).unwrap_or(name);
        args.input.with_file_name(format!("{stem}{}", io::ANNOTATION_SUFFIX))
    });
    io::save_annotation(&out, &AnnotationFile::new(&seq, &result, &tree, &fit_cfg))?;
    let mean_rms = result.residual_rms.iter().sum::<f64>() / result.residual_rms.len().max(1) as f64;
    println!(
        "{}: {} frames, mean keypoint RMS {:.3} mm, {} iterations, converged {}, {:.3} s/frame",
        out.display(),
        result.frames(),
        mean_rms * 1000.0,
        result.iterations,
        result.converged,
        result.wall_time_per_frame
    );
    Ok(())
}

fn pipeline_run(cfg: &Config, args: &PipelineRunArgs) -> Result<bool> {
    let mut pc = PipelineConfig::new(args.sequences.unwrap_or(cfg.pipeline.sequences), args.out.clone().unwrap_or(cfg.out_dir.clone()));
    pc.gen_workers = args.gen_workers.unwrap_or(cfg.pipeline.gen_workers);
    pc.fit_workers = args.fit_workers.unwrap_or(cfg.pipeline.fit_workers);
    pc.seed = args.seed.unwrap_or(cfg.seed);
    pc.max_attempts = cfg.pipeline.max_attempts;
    pc.lease_ms = cfg.pipeline.lease_ms;
    pc.thresholds = cfg.thresholds.clone();
    pc.fit = cfg.fit.clone();
    pc.noise_sigma = cfg.noise_sigma;
    pc.camera_profile = cfg.camera_profile.clone();
    pc.world = cfg.world()?;
    pc.catalogs = cfg.catalogs()?;
    let summary = run_pipeline(pc)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(summary.all_terminal)
}

fn stats(args: &StatsArgs) -> Result<()> {
    if !args.dir.is_dir() {
        bail!("{}: no such directory", args.dir.display());
    }
    let stats = dataset_stats_dir(&args.dir)?;
    let csv = stats.to_csv();
    if let Some(out) = &args.out {
        io::write_atomic(&out.join("stats.csv"), csv.as_bytes())?;
        for h in stats.histograms() {
            io::write_atomic(&out.join(format!("{}.svg", h.name)), h.to_svg().as_bytes())?;
        }
    }
    print!("{csv}");
    Ok(())
}

#[derive(Deserialize)]
struct Header {
    format: String,
}

/// Native-joint keypoints per frame from a sequence or an annotation file.
fn load_keypoints(path: &Path) -> Result<Vec<Vec<Vec3>>> {
    let header: Header = io::read_json(path).with_context(|| format!("reading {}", path.display()))?;
    match header.format.as_str() {
        SEQUENCE_FORMAT => {
            let seq = load_sequence(path)?;
            Ok((0..seq.len()).map(|t| seq.native_joints(t).to_vec()).collect())
        }
        ANNOTATION_FORMAT => Ok(io::load_annotation(path)?.keypoints),
        other => bail!("{}: unsupported format {other}", path.display()),
    }
}

fn eval(args: &EvalArgs) -> Result<()> {
    let pred = load_keypoints(&args.pred)?;
    let gt = load_keypoints(&args.gt)?;
    if pred.len() != gt.len() {
        bail!("frame counts differ: {} vs {}", pred.len(), gt.len());
    }
    if pred.is_empty() {
        bail!("no frames to evaluate");
    }
    let (mut e, mut pa) = (0.0, 0.0);
    for (p, g) in pred.iter().zip(&gt) {
        e += mpjpe(p, g)?;
        pa += pa_mpjpe(p, g, !args.no_scale)?;
    }
    let n = pred.len() as f64;
    println!("frames {}", pred.len());
    println!("MPJPE {:.6} mm", e / n);
    println!("PA-MPJPE {:.6} mm", pa / n);
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<bool> {
    let cfg = Config::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Scenario(ScenarioCommand::Gen(a)) => scenario_gen(&cfg, a)?,
        Command::Synth(a) => synth(&cfg, a)?,
        Command::Analyse(a) => analyse(&cfg, a)?,
        Command::Fit(a) => fit(&cfg, a)?,
        Command::Pipeline(PipelineCommand::Run(a)) => return pipeline_run(&cfg, a),
        Command::Stats(a) => stats(a)?,
        Command::Eval(a) => eval(a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: not every job reached a terminal state");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
