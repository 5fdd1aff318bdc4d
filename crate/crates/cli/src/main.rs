//! Command-line front end: orchestrates the reconstruction pipeline, single
//! stages, synthetic job generation, and mesh inspection.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use weldscan::config::{PipelineConfig, ReconMode};
use weldscan::error::Result;
use weldscan::ingest::ScanJob;
use weldscan::pipeline::{check_mesh, run_pipeline, run_stage};
use weldscan::synth::{write_job, SceneSpec};

#[derive(Parser)]
#[command(
    name = "weldscan",
    version,
    about = "Reconstructs a scanned welded part from overlapping line-scanner passes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON config file replacing the job's embedded config.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Directory for all artifacts (intermediate and final).
    #[arg(long, global = true, value_name = "DIR", default_value = "weldscan-out")]
    out_dir: PathBuf,

    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// Seed recorded in the resolved config and report.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage end to end and write mesh + report.
    Pipeline(StageArgs),
    /// Validate scans and poses; normalize them into the output directory.
    Ingest(StageArgs),
    /// Remove statistical outliers from each ingested scan.
    Denoise(StageArgs),
    /// Detect circular reference targets in each denoised scan.
    Detect(StageArgs),
    /// Refine scan poses from matched targets.
    Register(StageArgs),
    /// Merge aligned scans on the box grid and keep the part cluster.
    Merge(StageArgs),
    /// Estimate normals, reconstruct the surface, and export the mesh.
    Reconstruct(StageArgs),
    /// Render a synthetic scan job for testing and demos.
    Synth(SynthArgs),
    /// Report whether a mesh file is watertight.
    CheckMesh(CheckMeshArgs),
}

/// Arguments shared by the pipeline and per-stage subcommands. Stages other
/// than ingest expect the previous stage's artifacts in --out-dir.
#[derive(Args)]
struct StageArgs {
    /// Job file listing scans, the pose file, and the config.
    job: PathBuf,

    /// Reconstruction backend override.
    #[arg(long, value_enum, value_name = "BACKEND")]
    recon: Option<ReconArg>,

    /// Built-in reconstruction cell size override, mm.
    #[arg(long, value_name = "MM")]
    cell: Option<f64>,

    /// External reconstruction depth override (config default 12).
    #[arg(long, value_name = "N")]
    depth: Option<u32>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReconArg {
    Builtin,
    External,
}

#[derive(Args)]
struct SynthArgs {
    /// Which scene to render.
    #[arg(long, value_enum, default_value = "compact")]
    scene: SceneArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum SceneArg {
    /// Full-size part, 8 passes.
    Default,
    /// Small part, 6 passes; runs end to end in seconds.
    Compact,
}

#[derive(Args)]
struct CheckMeshArgs {
    /// Mesh file (.stl or .ply).
    mesh: PathBuf,

    /// Print the report as JSON instead of text.
    #[arg(long)]
    json: bool,
}

/// Flag > config file > job-embedded config.
fn resolve_config(cli: &Cli, job: &mut ScanJob, stage: Option<&StageArgs>) -> Result<()> {
    if let Some(path) = &cli.config {
        job.config = PipelineConfig::from_json_file(path)?;
    }
    if let Some(n) = cli.threads {
        job.config.threads = Some(n);
    }
    if let Some(seed) = cli.seed {
        job.config.seed = seed;
    }
    if let Some(args) = stage {
        if let Some(recon) = args.recon {
            job.config.reconstruction = match recon {
                ReconArg::Builtin => ReconMode::Builtin,
                ReconArg::External => ReconMode::External,
            };
        }
        if let Some(cell) = args.cell {
            job.config.cell_mm = cell;
        }
        if let Some(depth) = args.depth {
            job.config.depth = depth;
        }
    }
    job.config.validate()
}

fn load_job(cli: &Cli, args: &StageArgs) -> Result<ScanJob> {
    let mut job = ScanJob::load(&args.job)?;
    resolve_config(cli, &mut job, Some(args))?;
    Ok(job)
}

fn run_one(cli: &Cli, args: &StageArgs, stage: &str) -> Result<()> {
    let job = load_job(cli, args)?;
    run_stage(stage, &job, &cli.out_dir)?;
    println!("stage {stage} done; artifacts in {}", cli.out_dir.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Pipeline(args) => {
            let job = load_job(cli, args)?;
            let artifacts = run_pipeline(&job, &cli.out_dir)?;
            println!("merged cloud: {}", artifacts.merged_cloud.display());
            println!("part cloud:   {}", artifacts.part_cloud.display());
            println!("mesh:         {}", artifacts.mesh.display());
            println!("report:       {}", artifacts.report.display());
        }
        Command::Ingest(args) => run_one(cli, args, "ingest")?,
        Command::Denoise(args) => run_one(cli, args, "denoise")?,
        Command::Detect(args) => run_one(cli, args, "detect")?,
        Command::Register(args) => run_one(cli, args, "register")?,
        Command::Merge(args) => run_one(cli, args, "merge")?,
        Command::Reconstruct(args) => run_one(cli, args, "reconstruct")?,
        Command::Synth(args) => {
            let seed = cli.seed.unwrap_or(0);
            let mut spec = match args.scene {
                SceneArg::Default => SceneSpec::default_scene(seed)?,
                SceneArg::Compact => SceneSpec::compact_scene(seed)?,
            };
            if let Some(n) = cli.threads {
                spec.job_config.threads = Some(n);
            }
            let scene = spec.generate()?;
            let job_path = write_job(&scene, &cli.out_dir)?;
            println!("job: {}", job_path.display());
        }
        Command::CheckMesh(args) => {
            let report = check_mesh(&args.mesh)?;
            if args.json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!(
                    "watertight: {}\nboundary edges: {}\nnon-manifold edges: {}\n\
                     euler characteristic: {}\ncomponents: {}",
                    report.watertight,
                    report.boundary_edges,
                    report.non_manifold_edges,
                    report.euler_characteristic,
                    report.components,
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code().clamp(0, 255) as u8)
        }
    }
}
