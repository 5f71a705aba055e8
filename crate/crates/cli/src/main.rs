use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flowmorph::deformation::{
    framerate_warnings, read_frames, rollout_positions, write_frames, write_tracking,
};
use flowmorph::geometry::{load_mesh, Mesh, SequenceMetrics};
use flowmorph::registration::{
    read_correspondences, read_features, register_with_bases, write_correspondences,
    RegistrationConfig, ZoomOutSchedule,
};
use flowmorph::spectral::{hks_features, mesh_basis};
use flowmorph::synth::{generate, write_sequence, BaseShape, SynthCase, SynthKind};
use flowmorph::training::{load_config, train, training_clouds, write_loss_csv, TrainConfig};
use flowmorph::velocity_field::{load_checkpoint, save_checkpoint};
use flowmorph::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_INPUT: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "flowmorph",
    version,
    about = "Interpolate between two meshes with a learned velocity field"
)]
struct Cli {
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for sampling, initialization and synthetic data.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded, fixed-order execution.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Training configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More log output; repeat for debug messages.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Match source vertices to target vertices and keep loop-consistent pairs.
    Register(RegisterArgs),
    /// Fit a velocity field carrying the source onto the target.
    Train(TrainArgs),
    /// Roll a trained field out on a mesh and write the frames.
    Infer(InferArgs),
    /// Compare a frame sequence with a reference sequence.
    Eval(EvalArgs),
    /// Write a synthetic pair with analytic ground-truth frames.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FeatureSource {
    /// Heat kernel signatures computed from each mesh.
    Hks,
}

#[derive(Args, Debug)]
struct RegisterArgs {
    source: PathBuf,
    target: PathBuf,
    /// Compute features instead of reading them from files.
    #[arg(long, value_enum)]
    features: Option<FeatureSource>,
    /// Source features (`VFTR`).
    #[arg(long, conflicts_with = "features", requires = "target_features")]
    source_features: Option<PathBuf>,
    /// Target features (`VFTR`).
    #[arg(long, conflicts_with = "features", requires = "source_features")]
    target_features: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    hks_times: usize,
    /// Spectral basis size.
    #[arg(long, default_value_t = 60)]
    basis: usize,
    /// Loop-closure threshold; defaults to 5% of the source box diagonal.
    #[arg(long)]
    delta_d: Option<f64>,
    /// Filter the raw feature matches without spectral refinement.
    #[arg(long)]
    no_refine: bool,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    source: PathBuf,
    target: PathBuf,
    correspondences: PathBuf,
    /// Checkpoint path (`VFN1`).
    #[arg(short, long)]
    output: PathBuf,
    /// Loss history CSV; defaults to the checkpoint path with a `.csv`
    /// extension.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 4000)]
    epochs: usize,
    /// Surface samples added to the vertices of each mesh.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args, Debug)]
struct InferArgs {
    checkpoint: PathBuf,
    mesh: PathBuf,
    /// Integration steps; `steps + 1` frames are written.
    #[arg(long)]
    steps: usize,
    /// Step count used in training; defaults to the configuration value.
    #[arg(long)]
    trained_steps: Option<usize>,
    /// Directory for the frames and `tracking.vtrk`.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    predicted: PathBuf,
    reference: PathBuf,
    /// Divide area deviations by the frame-0 area.
    #[arg(long)]
    relative: bool,
    /// Report path; printed to stdout when omitted.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(value_parser = parse_kind)]
    kind: SynthKind,
    /// Total angle in radians at the last frame.
    #[arg(long, default_value_t = 0.5)]
    magnitude: f64,
    #[arg(long, default_value_t = 9)]
    frames: usize,
    #[arg(long, value_parser = parse_base)]
    base: Option<BaseShape>,
    #[arg(short, long)]
    output: PathBuf,
}

fn parse_kind(s: &str) -> Result<SynthKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_base(s: &str) -> Result<BaseShape, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_numerical() {
            EXIT_NUMERICAL
        } else if matches!(e, Error::InvalidArgument(_)) {
            EXIT_USAGE
        } else {
            EXIT_INPUT
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: EXIT_INPUT,
        message: format!("{}: {e}", path.display()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let threads = if cli.deterministic {
        Some(1)
    } else {
        cli.threads
    };
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("could not configure {n} threads: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Register(a) => cmd_register(a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Infer(a) => cmd_infer(cli, a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(cli, a),
    }
}

fn train_config(cli: &Cli) -> Result<TrainConfig, Failure> {
    let mut config = match &cli.config {
        Some(path) => load_config(path, TrainConfig::default())?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn cmd_register(a: &RegisterArgs) -> Result<(), Failure> {
    let source = load_mesh(&a.source)?;
    let target = load_mesh(&a.target)?;
    let basis_i = mesh_basis(&source, a.basis)?;
    let basis_j = mesh_basis(&target, a.basis)?;
    let (feat_i, feat_j) = match (a.features, &a.source_features, &a.target_features) {
        (Some(FeatureSource::Hks), _, _) => (
            hks_features(&basis_i, a.hks_times),
            hks_features(&basis_j, a.hks_times),
        ),
        (None, Some(fi), Some(fj)) => (read_features(fi)?, read_features(fj)?),
        _ => {
            return Err(usage(
                "give --source-features and --target-features, or --features hks",
            ))
        }
    };
    let config = RegistrationConfig {
        basis_size: a.basis,
        schedule: ZoomOutSchedule::default(),
        delta_d: a.delta_d,
        refine: !a.no_refine,
    };
    let reg = register_with_bases(
        &source, &target, &basis_i, &basis_j, &feat_i, &feat_j, &config,
    )?;
    write_correspondences(&a.output, &reg.correspondences)?;
    let set = &reg.correspondences;
    println!(
        "retained {} of {} vertices ({:.2}%), mean confidence {:.4}",
        set.len(),
        set.source_vertex_count,
        100.0 * set.retention(),
        set.mean_confidence()
    );
    Ok(())
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<(), Failure> {
    let mut config = train_config(cli)?;
    config.epochs = a.epochs;
    if let Some(k) = a.samples {
        config.sample_points = k;
    }
    let source = load_mesh(&a.source)?;
    let target = load_mesh(&a.target)?;
    let corr = read_correspondences(&a.correspondences)?;
    if corr.source_vertex_count != source.vertex_count() {
        return Err(Failure::from(Error::DimensionMismatch(format!(
            "correspondences are for {} source vertices, mesh has {}",
            corr.source_vertex_count,
            source.vertex_count()
        ))));
    }
    let (p0, p1) = training_clouds(&source, &target, config.sample_points, config.seed)?;
    log::info!(
        "training on {} source and {} target points",
        p0.len(),
        p1.len()
    );
    let start = Instant::now();
    let outcome = train(&p0, &p1, &corr, &config)?;
    save_checkpoint(&outcome.params, &a.output)?;
    let csv = a
        .loss_csv
        .clone()
        .unwrap_or_else(|| a.output.with_extension("csv"));
    write_loss_csv(&csv, &outcome.history)?;
    let elapsed = start.elapsed().as_secs_f64();
    if let Some(e) = outcome.divergence {
        eprintln!(
            "training stopped after {} epochs; wrote the last finite parameters",
            outcome.history.len()
        );
        return Err(Failure::from(e));
    }
    match outcome.history.last() {
        Some(last) => println!(
            "trained {} epochs in {elapsed:.1} s, final loss {:.6e} (overlap {:.3e}, match {:.3e})",
            outcome.history.len(),
            last.total,
            last.o,
            last.m
        ),
        None => println!("wrote the initial parameters (0 epochs)"),
    }
    Ok(())
}

fn cmd_infer(cli: &Cli, a: &InferArgs) -> Result<(), Failure> {
    if a.steps == 0 {
        return Err(usage("--steps must be at least 1"));
    }
    let trained = match a.trained_steps {
        Some(t) => t,
        None => train_config(cli)?.steps_t,
    };
    let params = load_checkpoint(&a.checkpoint)?;
    let mesh = load_mesh(&a.mesh)?;
    for w in framerate_warnings(a.steps, trained) {
        eprintln!("warning: {w}");
    }
    let start = Instant::now();
    let positions = rollout_positions(&params, &mesh.vertices, a.steps)?;
    let per_frame = start.elapsed().as_secs_f64() / a.steps as f64;
    let frames: Vec<Mesh> = positions
        .iter()
        .map(|p| mesh.with_positions(p.clone()))
        .collect::<flowmorph::Result<_>>()?;
    write_frames(&a.output, &frames)?;
    write_tracking(a.output.join("tracking.vtrk"), &positions)?;
    println!(
        "wrote {} frames of {} vertices to {}, {:.4} s per frame",
        frames.len(),
        mesh.vertex_count(),
        a.output.display(),
        per_frame
    );
    Ok(())
}

/// Text report: one line per frame, then the sequence summary.
fn format_report(report: &flowmorph::geometry::SequenceReport, relative: bool) -> String {
    let mut out = String::from("# flowmorph evaluation\n");
    let _ = writeln!(out, "frames {}", report.frames.len());
    let _ = writeln!(out, "relative {relative}");
    let _ = writeln!(out, "# frame chamfer hausdorff area reference_area");
    for (k, f) in report.frames.iter().enumerate() {
        let _ = writeln!(
            out,
            "frame {k} {:e} {:e} {:e} {:e}",
            f.chamfer, f.hausdorff, f.area, f.reference_area
        );
    }
    let s = &report.summary;
    let _ = writeln!(out, "mean_chamfer {:e}", s.chamfer);
    let _ = writeln!(out, "mean_hausdorff {:e}", s.hausdorff);
    let _ = writeln!(out, "area_std {:e}", s.area_std);
    let _ = writeln!(out, "reference_area_std {:e}", report.reference_area_std);
    out
}

fn cmd_eval(a: &EvalArgs) -> Result<(), Failure> {
    let predicted = read_frames(&a.predicted)?;
    let reference = read_frames(&a.reference)?;
    let report = SequenceMetrics::evaluate(&predicted, &reference, a.relative)?;
    let text = format_report(&report, a.relative);
    match &a.output {
        Some(path) => fs::write(path, &text).map_err(|e| io_failure(path, e))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_synth(cli: &Cli, a: &SynthArgs) -> Result<(), Failure> {
    let mut case = SynthCase::new(a.kind, a.magnitude, a.frames, cli.seed.unwrap_or(0));
    case.base = a.base.unwrap_or(match a.kind {
        SynthKind::Identity => BaseShape::Icosphere,
        _ => BaseShape::Capsule,
    });
    let seq = generate(&case)?;
    let files = write_sequence(&seq, &a.output)?;
    println!(
        "wrote {} {} frames of {} vertices; source {}, target {}",
        seq.frames.len(),
        a.kind,
        seq.source().vertex_count(),
        files.source.display(),
        files.target.display()
    );
    Ok(())
}
