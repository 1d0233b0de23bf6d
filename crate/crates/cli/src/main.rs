mod debug;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use tagmap::io::{load_map, load_session, read_json, write_json, PointCloudMap, ResultFile, Session};
use tagmap::nid::{refine, RefineStatus};
use tagmap::pipeline::{
    graph_tags, load_frames, result_from_graph, run_pipeline, PipelineConfig, PipelineOptions, PipelineStatus,
};
use tagmap::planes::{extract_planes, PlaneRecord, PlanesFile};
use tagmap::pose_graph::{build_graph, optimize, FactorGraph};
use tagmap::registration::{register, CliqueMode, Registration, TagsFile};
use tagmap::sim::{evaluate, generate_scene, synthesize_measurements, write_scene, NoiseConfig, Truth};
use tagmap::Error;

const EXIT_REGISTRATION: u8 = 2;
const EXIT_NO_INLIERS: u8 = 3;
const EXIT_INVALID_INPUT: u8 = 64;
const EXIT_OTHER: u8 = 1;

/// Fiducial tag localization on a 3D prior point-cloud map.
#[derive(Parser)]
#[command(name = "tagmap", version)]
struct Cli {
    /// Unified configuration document (JSON); missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory for PLY overlays of planes, tags and cameras.
    #[arg(long, global = true)]
    dump_debug_geometry: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment the map into bounded planes.
    ExtractPlanes {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the map-from-tag transform by tag-plane matching.
    Register(RegisterArgs),
    /// Refine camera and tag poses by NID camera-map alignment.
    Refine {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        transform: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic scene with ground truth.
    Simulate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overrides the noise of the configuration.
        #[arg(long, value_enum)]
        noise: Option<NoiseLevel>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a result against simulation ground truth.
    Evaluate {
        #[arg(long)]
        result: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Registration output; when given, transform error is taken from it.
        #[arg(long)]
        transform: Option<PathBuf>,
    },
    /// Run every stage end to end.
    Run(RunArgs),
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    map: Option<PathBuf>,
    /// Planes from extract-planes; extracted from --map when absent.
    #[arg(long)]
    planes: Option<PathBuf>,
    /// Tags in the odometry frame.
    #[arg(long, conflicts_with = "session")]
    tags: Option<PathBuf>,
    /// Session to build the tag map from, instead of --tags.
    #[arg(long)]
    session: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    th_trans: Option<f64>,
    /// Degrees.
    #[arg(long)]
    th_rot: Option<f64>,
    #[arg(long)]
    exact_clique: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    session: PathBuf,
    /// Camera frames named by time; required unless --skip-refinement.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Stage report with timings.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    skip_refinement: bool,
    #[arg(long)]
    allow_partial: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseLevel {
    Zero,
    Low,
    High,
}

struct Outcome {
    summary: serde_json::Value,
    code: u8,
}

impl Outcome {
    fn ok(summary: serde_json::Value) -> Self {
        Self { summary, code: 0 }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID_INPUT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            ExitCode::from(outcome.code)
        }
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {e:#}");
            println!("{}", json!({"status": "error", "error": format!("{e:#}"), "exit_code": code}));
            ExitCode::from(code)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let Some(err) = e.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return EXIT_INVALID_INPUT;
    };
    match err.root() {
        Error::RegistrationFailed(_) | Error::DegenerateRegistration(_) | Error::UnmatchedScene(_) => EXIT_REGISTRATION,
        Error::InvalidArgument(_)
        | Error::InvalidInput(_)
        | Error::InvalidConfig(_)
        | Error::Parse { .. }
        | Error::Validation(_)
        | Error::Io { .. }
        | Error::Json(_) => EXIT_INVALID_INPUT,
        _ => EXIT_OTHER,
    }
}

fn execute(cli: &Cli) -> anyhow::Result<Outcome> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(Error::InvalidArgument("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let config = match &cli.config {
        Some(path) => PipelineConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => PipelineConfig::default(),
    };
    let dump = cli.dump_debug_geometry.as_deref();
    match &cli.command {
        Command::ExtractPlanes { map, out } => cmd_extract_planes(&config, map, out, dump),
        Command::Register(args) => cmd_register(config, args),
        Command::Refine {
            map,
            session,
            images,
            transform,
            out,
        } => cmd_refine(&config, map, session, images, transform, out, dump),
        Command::Simulate { seed, noise, out } => cmd_simulate(config, *seed, *noise, out),
        Command::Evaluate {
            result,
            truth,
            transform,
        } => cmd_evaluate(&config, result, truth, transform.as_deref()),
        Command::Run(args) => cmd_run(&config, args, dump),
    }
}

fn load_inputs(map: &Path, session: &Path) -> anyhow::Result<(PointCloudMap, Session)> {
    let m = load_map(map).with_context(|| format!("loading map {}", map.display()))?;
    let s = load_session(session).with_context(|| format!("loading session {}", session.display()))?;
    Ok((m, s))
}

fn slam_graph(session: &Session, config: &PipelineConfig) -> anyhow::Result<FactorGraph> {
    let mut graph = build_graph(&session.trajectory, &session.detections)?;
    optimize(&mut graph, &config.graph)?;
    Ok(graph)
}

fn cmd_extract_planes(config: &PipelineConfig, map: &Path, out: &Path, dump: Option<&Path>) -> anyhow::Result<Outcome> {
    let m = load_map(map).with_context(|| format!("loading map {}", map.display()))?;
    let planes = extract_planes(&m, &config.planes)?;
    write_json(out, &PlanesFile {
        planes: planes.iter().map(PlaneRecord::from).collect(),
    })?;
    if let Some(dir) = dump {
        debug::dump_planes(dir, &m, &planes)?;
    }
    Ok(Outcome::ok(json!({
        "status": "ok",
        "planes": planes.len(),
        "points": m.len(),
    })))
}

fn cmd_register(mut config: PipelineConfig, args: &RegisterArgs) -> anyhow::Result<Outcome> {
    let reg = &mut config.registration;
    if let Some(v) = args.th_trans {
        reg.th_trans = v;
    }
    if let Some(v) = args.th_rot {
        reg.th_rot_deg = v;
    }
    if args.exact_clique {
        reg.clique_mode = CliqueMode::Exact;
    }
    let planes = match (&args.planes, &args.map) {
        (Some(p), _) => read_json::<PlanesFile>(p)?.planes.iter().map(PlaneRecord::to_segment).collect(),
        (None, Some(m)) => extract_planes(&load_map(m)?, &config.planes)?,
        (None, None) => bail!(Error::InvalidArgument("register needs --planes or --map".into())),
    };
    let tags = match (&args.tags, &args.session) {
        (Some(t), _) => read_json::<TagsFile>(t)?.to_models()?,
        (None, Some(s)) => {
            let session = load_session(s)?;
            graph_tags(&slam_graph(&session, &config)?, session.tag_size())?
        }
        (None, None) => bail!(Error::InvalidArgument("register needs --tags or --session".into())),
    };
    let registration = register(&tags, &planes, &config.registration)?;
    write_json(&args.out, &registration)?;
    Ok(Outcome::ok(json!({
        "status": "ok",
        "diagnostics": registration.diagnostics,
    })))
}

fn cmd_refine(
    config: &PipelineConfig,
    map: &Path,
    session: &Path,
    images: &Path,
    transform: &Path,
    out: &Path,
    dump: Option<&Path>,
) -> anyhow::Result<Outcome> {
    let (m, s) = load_inputs(map, session)?;
    let registration: Registration = read_json(transform)?;
    let Some(k) = s.intrinsics else {
        bail!(Error::InvalidInput("session has no camera intrinsics".into()));
    };
    let frames = load_frames(images, s.trajectory.times())?;
    let mut graph = slam_graph(&s, config)?;
    graph.transform(&registration.map_from_tag);
    let report = refine(&mut graph, &m, &frames, &k, &config.nid, &config.graph)?;
    write_json(out, &result_from_graph(&graph))?;
    if let Some(dir) = dump {
        debug::dump_graph(dir, &graph, s.tag_size())?;
    }
    let no_inliers = report.status == RefineStatus::NoInliers;
    Ok(Outcome {
        summary: json!({
            "status": if no_inliers { "no_inliers" } else { "refined" },
            "frames_aligned": report.frames_aligned,
            "converged": report.converged,
            "inliers": report.inliers,
        }),
        code: if no_inliers { EXIT_NO_INLIERS } else { 0 },
    })
}

fn cmd_simulate(mut config: PipelineConfig, seed: u64, noise: Option<NoiseLevel>, out: &Path) -> anyhow::Result<Outcome> {
    if let Some(level) = noise {
        config.simulation.noise = match level {
            NoiseLevel::Zero => NoiseConfig::zero(),
            NoiseLevel::Low => NoiseConfig::low(),
            NoiseLevel::High => NoiseConfig::high(),
        };
    }
    let scene = generate_scene(&config.simulation, seed)?;
    let measurements = synthesize_measurements(&scene, &config.simulation.noise)?;
    write_scene(out, &scene, &measurements)?;
    Ok(Outcome::ok(json!({
        "status": "ok",
        "seed": seed,
        "points": scene.map.len(),
        "planes": scene.planes.len(),
        "tags": scene.tags.len(),
        "detections": measurements.session.detections.len(),
        "frames": measurements.frames.len(),
    })))
}

fn cmd_evaluate(config: &PipelineConfig, result: &Path, truth: &Path, transform: Option<&Path>) -> anyhow::Result<Outcome> {
    let result: ResultFile = read_json(result)?;
    let truth: Truth = read_json(truth)?;
    let registration: Option<Registration> = transform.map(read_json).transpose()?;
    let metrics = evaluate(&result, &truth, registration.as_ref(), &config.evaluation);
    Ok(Outcome::ok(serde_json::to_value(metrics)?))
}

fn cmd_run(config: &PipelineConfig, args: &RunArgs, dump: Option<&Path>) -> anyhow::Result<Outcome> {
    let (m, s) = load_inputs(&args.map, &args.session)?;
    let frames = match (&args.images, args.skip_refinement) {
        (_, true) => None,
        (Some(dir), false) => Some(load_frames(dir, s.trajectory.times())?),
        (None, false) => bail!(Error::InvalidInput(
            "--images is required unless --skip-refinement is set".into()
        )),
    };
    let options = PipelineOptions {
        skip_refinement: args.skip_refinement,
        allow_partial: args.allow_partial,
    };
    let out = run_pipeline(&m, &s, frames.as_deref(), config, options)?;
    write_json(&args.out, &out.result)?;
    if let Some(path) = &args.report {
        write_json(path, &out.report)?;
    }
    if let Some(dir) = dump {
        debug::dump_planes(dir, &m, &out.planes)?;
        debug::dump_graph(dir, &out.graph, s.tag_size())?;
    }
    eprintln!("{}", out.report);
    let r = &out.report;
    Ok(Outcome {
        summary: json!({
            "status": r.status,
            "tags": out.result.tags.len(),
            "frames": out.result.frames.len(),
            "planes": r.planes,
            "clique_size": r.registration.diagnostics.clique_size,
            "ambiguous": r.registration.diagnostics.ambiguous,
            "inliers": r.refinement.as_ref().map(|x| x.inliers),
            "total_ms": r.total_ms(),
        }),
        code: if r.status == PipelineStatus::NoInliers { EXIT_NO_INLIERS } else { 0 },
    })
}
