use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use chunkstitch::config::PipelineConfig;
use chunkstitch::evaluation::{ate_rmse, cloud_metrics, TrajectoryEstimate};
use chunkstitch::io::{
    read_ply, read_trajectory, write_chunk, write_file, write_kitti, write_ply, write_tensor,
    write_tum, DType, PointCloud, Tensor, TrajectoryFormat,
};
use chunkstitch::loops::compute_descriptors;
use chunkstitch::pipeline::{
    align_sequence, build_pose_graph, close_loops, detect_frame_loops, format_alignment,
    format_chunk_poses, format_loops, frame_tokens, load_manifests, loop_batch_frames,
    owning_chunk, read_chunk_poses, reference_intrinsics, run_pipeline, ALIGNMENT_FILE,
    CHUNK_POSES_FILE, KITTI_FILE, LOOPS_FILE, PLY_FILE, TUM_FILE,
};
use chunkstitch::pose_graph::{optimize, propagate_to_frames};
use chunkstitch::synthetic::{generate_scene, SceneSpec, TrajectoryShape};

const MANIFEST_SUBDIR: &str = "manifests";
const CHAINED_POSES_FILE: &str = "chained_chunk_poses.txt";
const SOLVE_FILE: &str = "solve.txt";
const DESCRIPTORS_FILE: &str = "descriptors.cst";
const DESCRIPTOR_IDS_FILE: &str = "descriptor_frames.txt";

/// Stitch chunked dense reconstructions into one Sim(3)-consistent trajectory and point cloud.
#[derive(Parser, Debug)]
#[command(name = "chunkstitch", version)]
struct Cli {
    /// Random seed for synthetic data (overrides the config `seed` key).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory receiving all outputs.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Override one configuration key, e.g. `--set lambda_d=0.3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Log progress (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene as a manifest directory plus ground truth.
    Synth(SynthArgs),
    /// Align neighbouring chunks and chain them into world poses.
    Align(InputArgs),
    /// Detect loop candidates and align their loop chunks.
    Loops(LoopsArgs),
    /// Optimize the chunk pose graph.
    Optimize(InputArgs),
    /// Export the trajectory and point cloud under given chunk poses.
    Export(ExportArgs),
    /// Score a trajectory (and optionally a point cloud) against a reference.
    Eval(EvalArgs),
    /// Full pipeline: load, align, detect loops, optimize, export.
    Run(InputArgs),
}

#[derive(Args, Debug)]
struct InputArgs {
    /// Directory of chunk manifests.
    manifest_dir: PathBuf,
}

#[derive(Args, Debug)]
struct LoopsArgs {
    manifest_dir: PathBuf,
    /// Also write the whitened per-frame descriptors as a tensor file.
    #[arg(long)]
    dump_descriptors: bool,
}

#[derive(Args, Debug)]
struct ExportArgs {
    manifest_dir: PathBuf,
    /// Chunk pose file; defaults to `chunk_poses.txt` in the output directory.
    #[arg(long)]
    poses: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Shape {
    Line,
    Circle,
    FigureEight,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 240)]
    frames: usize,
    #[arg(long, value_enum, default_value = "circle")]
    shape: Shape,
    /// Per-chunk drift scale in the tangent space.
    #[arg(long, default_value_t = 0.0)]
    drift: f64,
    /// Additive depth noise standard deviation.
    #[arg(long, default_value_t = 0.0)]
    depth_noise: f64,
    /// Fraction of pixels with gross depth errors and low confidence.
    #[arg(long, default_value_t = 0.0)]
    outliers: f64,
    /// Extend the path past one lap so the start is revisited.
    #[arg(long)]
    loop_closure: bool,
    /// Path radius (circle) or lobe size (figure-eight).
    #[arg(long)]
    path_scale: Option<f64>,
    /// Floating-point precision of written tensors.
    #[arg(long, value_enum, default_value = "f64")]
    dtype: Precision,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Auto,
    Kitti,
    Tum,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    estimate: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long, value_enum, default_value = "auto")]
    format: FormatArg,
    /// Predicted point cloud (PLY); requires `--reference-cloud`.
    #[arg(long, requires = "reference_cloud")]
    cloud: Option<PathBuf>,
    #[arg(long, requires = "cloud")]
    reference_cloud: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = dispatch(&cli) {
        eprintln!("error: {}", describe(&e));
        std::process::exit(1);
    }
}

/// Error chain joined with `: `, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !msg.contains(&text) {
            msg = format!("{msg}: {text}");
        }
    }
    msg
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = cli.out_dir.as_path();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match &cli.command {
        Command::Synth(a) => synth(a, &cfg, out),
        Command::Align(a) => align(&a.manifest_dir, &cfg, out),
        Command::Loops(a) => loops(a, &cfg, out),
        Command::Optimize(a) => optimize_chunks(&a.manifest_dir, &cfg, out),
        Command::Export(a) => export(a, &cfg, out),
        Command::Eval(a) => eval(a, &cfg),
        Command::Run(a) => {
            let result = run_pipeline(&a.manifest_dir, &cfg, out)?;
            println!(
                "{} frames, {} points, {} loops added, cost {:.3e} -> {:.3e}",
                result.trajectory.len(),
                result.points.len(),
                result
                    .loops
                    .iter()
                    .filter(|l| l.transform.is_some())
                    .count(),
                result.solve.initial_cost,
                result.solve.final_cost
            );
            Ok(())
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())?;
    Ok(())
}

fn synth(a: &SynthArgs, cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let defaults = SceneSpec::default();
    let spec = SceneSpec {
        seed: cfg.seed,
        n_frames: a.frames,
        trajectory_shape: match a.shape {
            Shape::Line => TrajectoryShape::Line,
            Shape::Circle => TrajectoryShape::Circle,
            Shape::FigureEight => TrajectoryShape::FigureEight,
        },
        drift_sigma: a.drift,
        depth_noise_sigma: a.depth_noise,
        outlier_fraction: a.outliers,
        loop_closure: a.loop_closure,
        chunk_size: cfg.chunk_size,
        overlap: cfg.overlap,
        path_scale: a.path_scale.unwrap_or(defaults.path_scale),
        ..defaults
    };
    let scene = generate_scene(&spec)?;
    let dtype = match a.dtype {
        Precision::F32 => DType::F32,
        Precision::F64 => DType::F64,
    };
    let dir = out.join(MANIFEST_SUBDIR);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for c in &scene.chunks {
        write_chunk(&dir, c, None, dtype)?;
    }
    let mut n_loops = 0;
    if cfg.enable_loops {
        let candidates = detect_frame_loops(&scene.chunks, cfg)?;
        for (index, cand) in candidates.iter().enumerate() {
            let ci = owning_chunk(&scene.chunks, cand.frame_i);
            let cj = owning_chunk(&scene.chunks, cand.frame_j);
            if ci.is_none() || ci == cj {
                continue;
            }
            let frames = loop_batch_frames(&scene.chunks, cand, cfg);
            let lc = scene.render_loop_chunk(index, &frames);
            write_chunk(&dir, &lc, Some((cand.frame_i, cand.frame_j)), dtype)?;
            n_loops += 1;
        }
    }
    write_kitti(&out.join("gt_trajectory_kitti.txt"), &scene.gt_trajectory)?;
    write_tum(&out.join("gt_trajectory_tum.txt"), &scene.gt_trajectory)?;
    write_ply(&out.join("gt_points.ply"), &PointCloud::new(scene.gt_points.clone()))?;
    write_text(&out.join("gt_chunk_poses.txt"), &format_chunk_poses(&scene.chunk_drift))?;
    println!(
        "{} frames, {} temporal chunks, {} loop chunks written to {}",
        spec.n_frames,
        scene.chunks.len(),
        n_loops,
        dir.display()
    );
    Ok(())
}

fn align(dir: &Path, cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let set = load_manifests(dir, cfg)?;
    let reports = align_sequence(&set.temporal, cfg)?;
    let graph = build_pose_graph(&reports, &[]);
    write_text(&out.join(ALIGNMENT_FILE), &format_alignment(&reports))?;
    write_text(&out.join(CHAINED_POSES_FILE), &format_chunk_poses(&graph.nodes))?;
    println!("aligned {} chunk pairs", reports.len());
    Ok(())
}

fn loops(a: &LoopsArgs, cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let set = load_manifests(&a.manifest_dir, cfg)?;
    let candidates = detect_frame_loops(&set.temporal, cfg)?;
    let records = close_loops(&set.temporal, &candidates, &set, cfg)?;
    write_text(&out.join(LOOPS_FILE), &format_loops(&records))?;
    if a.dump_descriptors {
        let (ids, tokens) = frame_tokens(&set.temporal);
        let descriptors = compute_descriptors(&tokens, &cfg.descriptor_params())?.descriptors;
        let kept: Vec<(usize, Vec<f64>)> = ids
            .iter()
            .zip(&descriptors)
            .filter_map(|(f, d)| d.as_ref().map(|d| (*f, d.vector().iter().copied().collect())))
            .collect();
        let dim = kept.first().map_or(0, |(_, v)| v.len());
        let data: Vec<f64> = kept.iter().flat_map(|(_, v)| v.iter().copied()).collect();
        let tensor = Tensor::from_f64(vec![kept.len() as u64, dim as u64], data)
            .map_err(anyhow::Error::msg)?;
        write_tensor(&out.join(DESCRIPTORS_FILE), &tensor)?;
        let frames: String = kept.iter().map(|(f, _)| format!("{f}\n")).collect();
        write_text(&out.join(DESCRIPTOR_IDS_FILE), &frames)?;
    }
    let added = records.iter().filter(|r| r.transform.is_some()).count();
    println!("{} loop candidates, {added} closed", records.len());
    Ok(())
}

fn optimize_chunks(dir: &Path, cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let set = load_manifests(dir, cfg)?;
    let reports = align_sequence(&set.temporal, cfg)?;
    let records = if cfg.enable_loops {
        let candidates = detect_frame_loops(&set.temporal, cfg)?;
        close_loops(&set.temporal, &candidates, &set, cfg)?
    } else {
        Vec::new()
    };
    let graph = build_pose_graph(&reports, &records);
    let start = Instant::now();
    let result = optimize(&graph, &cfg.solve_settings())?;
    let seconds = start.elapsed().as_secs_f64();
    write_text(&out.join(ALIGNMENT_FILE), &format_alignment(&reports))?;
    write_text(&out.join(LOOPS_FILE), &format_loops(&records))?;
    write_text(&out.join(CHAINED_POSES_FILE), &format_chunk_poses(&graph.nodes))?;
    write_text(&out.join(CHUNK_POSES_FILE), &format_chunk_poses(&result.nodes))?;
    let r = &result.report;
    write_text(
        &out.join(SOLVE_FILE),
        &format!(
            "nodes {}\nedges {}\niterations {}\ninitial_cost {:e}\nfinal_cost {:e}\nconverged {}\nseconds {seconds:.6}\n",
            graph.nodes.len(),
            graph.edges.len(),
            r.iters,
            r.initial_cost,
            r.final_cost,
            r.converged
        ),
    )?;
    println!(
        "{} nodes, {} edges, cost {:.3e} -> {:.3e} in {} iterations",
        graph.nodes.len(),
        graph.edges.len(),
        r.initial_cost,
        r.final_cost,
        r.iters
    );
    Ok(())
}

fn export(a: &ExportArgs, cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let set = load_manifests(&a.manifest_dir, cfg)?;
    let poses_path = a.poses.clone().unwrap_or_else(|| out.join(CHUNK_POSES_FILE));
    let nodes = read_chunk_poses(&poses_path)?;
    let reference = reference_intrinsics(&set.temporal);
    let (trajectory, points) =
        propagate_to_frames(&nodes, &set.temporal, &reference, &cfg.propagate_options())
            .with_context(|| format!("applying {}", poses_path.display()))?;
    write_kitti(&out.join(KITTI_FILE), &trajectory)?;
    write_tum(&out.join(TUM_FILE), &trajectory)?;
    write_ply(&out.join(PLY_FILE), &PointCloud::new(points.clone()))?;
    println!("{} frames, {} points", trajectory.len(), points.len());
    Ok(())
}

/// Picks KITTI or TUM from the field count of the first content line.
fn sniff_format(path: &Path) -> Result<TrajectoryFormat> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let first = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'));
    match first.map(|l| l.split_whitespace().count()) {
        Some(12) => Ok(TrajectoryFormat::Kitti),
        Some(8) => Ok(TrajectoryFormat::Tum),
        Some(n) => bail!("{}: cannot tell the format from {n} fields per line", path.display()),
        None => bail!("{}: no poses", path.display()),
    }
}

fn read_poses(path: &Path, format: FormatArg) -> Result<TrajectoryEstimate> {
    let format = match format {
        FormatArg::Auto => sniff_format(path)?,
        FormatArg::Kitti => TrajectoryFormat::Kitti,
        FormatArg::Tum => TrajectoryFormat::Tum,
    };
    Ok(read_trajectory(path, format)?)
}

fn eval(a: &EvalArgs, cfg: &PipelineConfig) -> Result<()> {
    let est = read_poses(&a.estimate, a.format)?;
    let gt = read_poses(&a.reference, a.format)?;
    let ate = ate_rmse(&est, &gt, cfg.ate_mode)?;
    println!("ate_rmse {ate}");
    if let (Some(pred), Some(truth)) = (&a.cloud, &a.reference_cloud) {
        let m = cloud_metrics(&read_ply(pred)?.points, &read_ply(truth)?.points)?;
        println!("accuracy {}", m.accuracy);
        println!("completeness {}", m.completeness);
        println!("chamfer {}", m.chamfer);
    }
    Ok(())
}
