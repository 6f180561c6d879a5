//! End-to-end orchestration: load, align neighbours, detect and close loops,
//! optimize the chunk graph, propagate to frames, export.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::alignment::{align_adjacent, AlignError, AlignmentReport};
use crate::config::{ConfigError, PipelineConfig};
use crate::evaluation::{EvalError, TrajectoryEstimate};
use crate::geometry::{check_chunk_sequence, ChunkArtifact, GeometryError, Intrinsics};
use crate::io::trajectory::{format_kitti, format_number, format_tum, parse_tum};
use crate::io::{ply, read_manifest_dir, write_file, IoError, ManifestSet, PointCloud};
use crate::loops::{
    build_loop_batch, compute_descriptors, detect_loops_indexed, loop_sim3, similarity_matrix,
    LoopCandidate, LoopError, PatchTokens,
};
use crate::pose_graph::{optimize, propagate_to_frames, PoseGraph, PoseGraphError, SolveReport};
use crate::sim3::Sim3;
use crate::synthetic::SyntheticScene;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Load,
    SequentialAlign,
    LoopDetection,
    LoopAlign,
    Optimize,
    Propagate,
    Export,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Load,
        Stage::SequentialAlign,
        Stage::LoopDetection,
        Stage::LoopAlign,
        Stage::Optimize,
        Stage::Propagate,
        Stage::Export,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Load => "load",
            Stage::SequentialAlign => "sequential_align",
            Stage::LoopDetection => "loop_detection",
            Stage::LoopAlign => "loop_align",
            Stage::Optimize => "optimize",
            Stage::Propagate => "propagate",
            Stage::Export => "export",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Loop(#[from] LoopError),
    #[error(transparent)]
    PoseGraph(#[from] PoseGraphError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// A failure tagged with the stage it happened in and, where meaningful,
/// the chunk pair or loop it concerns.
#[derive(Debug, Error)]
#[error("[{stage}]{} {kind}", .context.as_ref().map(|c| format!(" {c}:")).unwrap_or_default())]
pub struct PipelineError {
    pub stage: Stage,
    pub context: Option<String>,
    #[source]
    pub kind: StageError,
}

impl PipelineError {
    pub fn new(stage: Stage, kind: impl Into<StageError>) -> Self {
        Self {
            stage,
            context: None,
            kind: kind.into(),
        }
    }

    pub fn at(stage: Stage, context: impl Into<String>, kind: impl Into<StageError>) -> Self {
        Self {
            stage,
            context: Some(context.into()),
            kind: kind.into(),
        }
    }

    pub fn io(&self) -> Option<&IoError> {
        match &self.kind {
            StageError::Io(e) => Some(e),
            _ => None,
        }
    }
}

/// Supplies loop-centric chunks for detected loop pairs.
pub trait LoopChunkSource: Sync {
    /// The chunk for loop number `index` around `pair`, built over `frames`
    /// where the source can choose. `None` means unavailable.
    fn loop_chunk(
        &self,
        index: usize,
        pair: (usize, usize),
        frames: &[usize],
    ) -> Option<ChunkArtifact>;
}

/// No loop chunks: every detected loop is skipped.
pub struct NoLoopChunks;

impl LoopChunkSource for NoLoopChunks {
    fn loop_chunk(&self, _: usize, _: (usize, usize), _: &[usize]) -> Option<ChunkArtifact> {
        None
    }
}

impl LoopChunkSource for ManifestSet {
    fn loop_chunk(&self, _: usize, pair: (usize, usize), _: &[usize]) -> Option<ChunkArtifact> {
        self.loop_chunk_for(pair).cloned()
    }
}

impl LoopChunkSource for SyntheticScene {
    fn loop_chunk(&self, index: usize, _: (usize, usize), frames: &[usize]) -> Option<ChunkArtifact> {
        Some(self.render_loop_chunk(index, frames))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoopStatus {
    /// Both frames resolve to the same temporal chunk.
    SameChunk,
    /// The loop chunk source had nothing for this pair.
    NoLoopChunk,
    Added,
}

impl LoopStatus {
    pub fn name(self) -> &'static str {
        match self {
            LoopStatus::SameChunk => "same_chunk",
            LoopStatus::NoLoopChunk => "no_loop_chunk",
            LoopStatus::Added => "added",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopRecord {
    pub candidate: LoopCandidate,
    pub chunk_i: usize,
    pub chunk_j: usize,
    pub frames: Vec<usize>,
    pub status: LoopStatus,
    /// Map from chunk-`i` coordinates to chunk-`j` coordinates.
    pub transform: Option<Sim3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTiming {
    pub stage: Stage,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub trajectory: TrajectoryEstimate,
    pub points: Vec<Vector3<f64>>,
    /// Optimized chunk-to-world transforms.
    pub chunk_poses: Vec<Sim3>,
    /// Chunk-to-world transforms from chaining neighbour alignments only.
    pub chained_poses: Vec<Sim3>,
    pub sequential: Vec<AlignmentReport>,
    pub loops: Vec<LoopRecord>,
    pub solve: SolveReport,
    pub timings: Vec<StageTiming>,
}

/// Image geometry every depth map is normalized to.
pub fn reference_intrinsics(chunks: &[ChunkArtifact]) -> Intrinsics {
    chunks[0].intrinsics[0]
}

pub fn load_manifests(dir: &Path, cfg: &PipelineConfig) -> Result<ManifestSet, PipelineError> {
    let set = read_manifest_dir(dir).map_err(|e| PipelineError::new(Stage::Load, e))?;
    check_chunk_sequence(&set.temporal, cfg.overlap)
        .map_err(|e| PipelineError::new(Stage::Load, e))?;
    Ok(set)
}

/// Aligns every neighbouring pair; entry `t` maps chunk `t` coordinates into
/// chunk `t + 1` coordinates.
pub fn align_sequence(
    chunks: &[ChunkArtifact],
    cfg: &PipelineConfig,
) -> Result<Vec<AlignmentReport>, PipelineError> {
    let reference = reference_intrinsics(chunks);
    let params = cfg.align_params();
    chunks
        .par_windows(2)
        .map(|pair| {
            align_adjacent(&pair[0], &pair[1], &reference, &params).map_err(|e| {
                PipelineError::at(
                    Stage::SequentialAlign,
                    format!("chunks {} -> {}", pair[0].chunk_id, pair[1].chunk_id),
                    e,
                )
            })
        })
        .collect()
}

/// One token set per frame id, taken from the earliest chunk holding it.
pub fn frame_tokens(chunks: &[ChunkArtifact]) -> (Vec<usize>, Vec<PatchTokens>) {
    let mut seen = std::collections::BTreeMap::new();
    for c in chunks {
        for (f, t) in c.frame_ids.iter().zip(&c.tokens) {
            seen.entry(*f).or_insert(t);
        }
    }
    seen.into_iter().map(|(f, t)| (f, t.clone())).unzip()
}

pub fn detect_frame_loops(
    chunks: &[ChunkArtifact],
    cfg: &PipelineConfig,
) -> Result<Vec<LoopCandidate>, PipelineError> {
    let (ids, tokens) = frame_tokens(chunks);
    let set = compute_descriptors(&tokens, &cfg.descriptor_params())
        .map_err(|e| PipelineError::new(Stage::LoopDetection, e))?;
    let (kept_ids, descriptors): (Vec<usize>, Vec<_>) = ids
        .iter()
        .zip(set.descriptors)
        .filter_map(|(f, d)| d.map(|d| (*f, d)))
        .unzip();
    if kept_ids.len() < ids.len() {
        log::warn!(
            "{} frames have no descriptor after whitening and are excluded from retrieval",
            ids.len() - kept_ids.len()
        );
    }
    let sim = similarity_matrix(&descriptors);
    Ok(detect_loops_indexed(&sim, &kept_ids, &cfg.detection_params()))
}

/// Temporal chunk owning frame `f`: among the chunks containing it, the one
/// whose frame range is centered nearest to `f` (earlier chunk on ties).
pub fn owning_chunk(chunks: &[ChunkArtifact], f: usize) -> Option<usize> {
    chunks
        .iter()
        .enumerate()
        .filter(|(_, c)| c.contains(f))
        .min_by_key(|(_, c)| {
            let lo = *c.frame_ids.first().unwrap();
            let hi = *c.frame_ids.last().unwrap();
            (2 * f).abs_diff(lo + hi)
        })
        .map(|(idx, _)| idx)
}

/// Frame ids of the loop-centric batch around a candidate.
pub fn loop_batch_frames(chunks: &[ChunkArtifact], c: &LoopCandidate, cfg: &PipelineConfig) -> Vec<usize> {
    let first = chunks.first().and_then(|c| c.frame_ids.first()).copied().unwrap_or(0);
    let last = chunks.iter().filter_map(|c| c.frame_ids.last()).max().copied().unwrap_or(0);
    build_loop_batch(c.frame_i - first, c.frame_j - first, cfg.loop_chunk_size, last - first + 1)
        .into_iter()
        .map(|f| f + first)
        .collect()
}

/// Aligns one loop chunk to the two temporal chunks at its ends.
pub fn close_loops(
    chunks: &[ChunkArtifact],
    candidates: &[LoopCandidate],
    source: &dyn LoopChunkSource,
    cfg: &PipelineConfig,
) -> Result<Vec<LoopRecord>, PipelineError> {
    let reference = reference_intrinsics(chunks);
    let params = cfg.align_params();
    candidates
        .par_iter()
        .enumerate()
        .map(|(index, cand)| {
            let ctx = || format!("loop {index} (frames {} <-> {})", cand.frame_i, cand.frame_j);
            let missing = |f: usize| {
                PipelineError::at(
                    Stage::LoopAlign,
                    ctx(),
                    GeometryError::InvalidChunk {
                        chunk_id: index,
                        reason: format!("frame {f} is not in any temporal chunk"),
                    },
                )
            };
            let ci = owning_chunk(chunks, cand.frame_i).ok_or_else(|| missing(cand.frame_i))?;
            let cj = owning_chunk(chunks, cand.frame_j).ok_or_else(|| missing(cand.frame_j))?;
            let frames = loop_batch_frames(chunks, cand, cfg);
            let mut record = LoopRecord {
                candidate: *cand,
                chunk_i: ci,
                chunk_j: cj,
                frames,
                status: LoopStatus::SameChunk,
                transform: None,
            };
            if ci == cj {
                return Ok(record);
            }
            let Some(lc) = source.loop_chunk(index, (cand.frame_i, cand.frame_j), &record.frames)
            else {
                log::warn!("{}: no loop chunk available, skipped", ctx());
                record.status = LoopStatus::NoLoopChunk;
                return Ok(record);
            };
            let to_i = align_adjacent(&lc, &chunks[ci], &reference, &params).map_err(|e| {
                PipelineError::at(Stage::LoopAlign, format!("{}, loop chunk -> chunk {ci}", ctx()), e)
            })?;
            let to_j = align_adjacent(&lc, &chunks[cj], &reference, &params).map_err(|e| {
                PipelineError::at(Stage::LoopAlign, format!("{}, loop chunk -> chunk {cj}", ctx()), e)
            })?;
            record.transform = Some(loop_sim3(&to_i.transform, &to_j.transform));
            record.status = LoopStatus::Added;
            Ok(record)
        })
        .collect()
}

/// Chunk-to-world graph: sequential edges from neighbour alignments plus one
/// edge per closed loop.
pub fn build_pose_graph(sequential: &[AlignmentReport], loops: &[LoopRecord]) -> PoseGraph {
    let measurements: Vec<Sim3> = sequential.iter().map(|r| r.transform.inverse()).collect();
    let mut g = PoseGraph::from_chain(&measurements);
    for l in loops {
        if let (LoopStatus::Added, Some(t)) = (l.status, l.transform) {
            g.add_loop(l.chunk_i, l.chunk_j, t.inverse());
        }
    }
    g
}

fn timed<T>(timings: &mut Vec<StageTiming>, stage: Stage, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    timings.push(StageTiming {
        stage,
        seconds: start.elapsed().as_secs_f64(),
    });
    out
}

/// Runs every stage after loading on in-memory chunks.
pub fn run_stages(
    chunks: &[ChunkArtifact],
    source: &dyn LoopChunkSource,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput, PipelineError> {
    cfg.validate().map_err(|e| PipelineError::new(Stage::Load, e))?;
    if chunks.is_empty() {
        return Err(PipelineError::new(
            Stage::Load,
            GeometryError::InvalidChunk {
                chunk_id: 0,
                reason: "no temporal chunks".into(),
            },
        ));
    }
    let mut timings = Vec::new();
    let sequential = timed(&mut timings, Stage::SequentialAlign, || align_sequence(chunks, cfg))?;
    for (t, r) in sequential.iter().enumerate() {
        log::info!(
            "aligned chunks {t} -> {}: {} points, rms {:.3e}, {:.3}s",
            t + 1,
            r.n_points,
            r.rms_residual,
            r.elapsed
        );
    }
    let candidates = timed(&mut timings, Stage::LoopDetection, || {
        if cfg.enable_loops {
            detect_frame_loops(chunks, cfg)
        } else {
            Ok(Vec::new())
        }
    })?;
    log::info!("{} loop candidates", candidates.len());
    let loops = timed(&mut timings, Stage::LoopAlign, || {
        close_loops(chunks, &candidates, source, cfg)
    })?;
    let graph = build_pose_graph(&sequential, &loops);
    let chained_poses = graph.nodes.clone();
    let result = timed(&mut timings, Stage::Optimize, || optimize(&graph, &cfg.solve_settings()))
        .map_err(|e| PipelineError::new(Stage::Optimize, e))?;
    log::info!(
        "pose graph: {} nodes, {} edges, cost {:.3e} -> {:.3e} in {} iterations",
        graph.nodes.len(),
        graph.edges.len(),
        result.report.initial_cost,
        result.report.final_cost,
        result.report.iters
    );
    let reference = reference_intrinsics(chunks);
    let (trajectory, points) = timed(&mut timings, Stage::Propagate, || {
        propagate_to_frames(&result.nodes, chunks, &reference, &cfg.propagate_options())
    })
    .map_err(|e| PipelineError::new(Stage::Propagate, e))?;
    Ok(PipelineOutput {
        trajectory,
        points,
        chunk_poses: result.nodes,
        chained_poses,
        sequential,
        loops,
        solve: result.report,
        timings,
    })
}

pub const KITTI_FILE: &str = "trajectory_kitti.txt";
pub const TUM_FILE: &str = "trajectory_tum.txt";
pub const PLY_FILE: &str = "points.ply";
pub const LOOPS_FILE: &str = "loops.txt";
pub const TIMING_FILE: &str = "timing.txt";
pub const ALIGNMENT_FILE: &str = "alignment.txt";
pub const CHUNK_POSES_FILE: &str = "chunk_poses.txt";

/// `id s tx ty tz qx qy qz qw` per chunk.
pub fn format_chunk_poses(poses: &[Sim3]) -> String {
    let mut out = String::new();
    for (id, p) in poses.iter().enumerate() {
        let tum = crate::io::trajectory::tum_line(id, p.rotation(), p.translation());
        let rest = tum.split_once(' ').map_or("", |(_, r)| r);
        let _ = writeln!(out, "{id} {} {rest}", format_number(p.scale()));
    }
    out
}

/// Inverse of [`format_chunk_poses`]; ids must run 0, 1, 2, ... in order.
pub fn parse_chunk_poses(text: &str, path: &Path) -> Result<Vec<Sim3>, IoError> {
    let invalid = |line: usize, reason: String| IoError::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut scales = Vec::new();
    let mut tum = String::with_capacity(text.len());
    for (k, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            tum.push_str(line);
            tum.push('\n');
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 9 {
            return Err(invalid(k + 1, format!("expected 9 values, found {}", fields.len())));
        }
        if fields[0].parse::<usize>().ok() != Some(scales.len()) {
            return Err(invalid(k + 1, format!("expected chunk id {}, found {}", scales.len(), fields[0])));
        }
        let scale: f64 = fields[1]
            .parse()
            .map_err(|_| invalid(k + 1, format!("bad scale {:?}", fields[1])))?;
        scales.push((k + 1, scale));
        tum.push_str(&format!("{} {}\n", fields[0], fields[2..].join(" ")));
    }
    let rigid = parse_tum(&tum, path)?;
    scales
        .iter()
        .enumerate()
        .map(|(n, (line, s))| {
            Sim3::new(*s, rigid.rotations()[n], rigid.positions()[n])
                .map_err(|e| invalid(*line, e.to_string()))
        })
        .collect()
}

pub fn read_chunk_poses(path: &Path) -> Result<Vec<Sim3>, IoError> {
    let text = std::fs::read_to_string(path).map_err(|e| crate::io::io_error(path, e))?;
    parse_chunk_poses(&text, path)
}

pub fn format_loops(loops: &[LoopRecord]) -> String {
    let mut out = String::from("# frame_i frame_j similarity chunk_i chunk_j status\n");
    for l in loops {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {}",
            l.candidate.frame_i,
            l.candidate.frame_j,
            format_number(l.candidate.similarity),
            l.chunk_i,
            l.chunk_j,
            l.status.name()
        );
    }
    out
}

pub fn format_alignment(reports: &[AlignmentReport]) -> String {
    let mut out =
        String::from("# chunk_a chunk_b points rms_residual lambda_d relaxations seconds\n");
    for (t, r) in reports.iter().enumerate() {
        let _ = writeln!(
            out,
            "{t} {} {} {} {} {} {:.6}",
            t + 1,
            r.n_points,
            format_number(r.rms_residual),
            format_number(r.lambda_d),
            r.relaxations,
            r.elapsed
        );
    }
    out
}

pub fn format_timing(timings: &[StageTiming]) -> String {
    let mut out = String::from("# stage seconds\n");
    for t in timings {
        let _ = writeln!(out, "{} {:.6}", t.stage, t.seconds);
    }
    let total: f64 = timings.iter().map(|t| t.seconds).sum();
    let _ = writeln!(out, "total {total:.6}");
    out
}

/// Writes trajectories, cloud, loop list, alignment report and chunk poses.
/// The timing report is written by the caller once export time is known.
pub fn write_outputs(out_dir: &Path, out: &PipelineOutput) -> Result<(), PipelineError> {
    let err = |e: IoError| PipelineError::new(Stage::Export, e);
    std::fs::create_dir_all(out_dir).map_err(|e| err(crate::io::io_error(out_dir, e)))?;
    write_file(&out_dir.join(KITTI_FILE), format_kitti(&out.trajectory).as_bytes()).map_err(err)?;
    write_file(&out_dir.join(TUM_FILE), format_tum(&out.trajectory).as_bytes()).map_err(err)?;
    ply::write_ply(&out_dir.join(PLY_FILE), &PointCloud::new(out.points.clone())).map_err(err)?;
    write_file(&out_dir.join(LOOPS_FILE), format_loops(&out.loops).as_bytes()).map_err(err)?;
    write_file(&out_dir.join(ALIGNMENT_FILE), format_alignment(&out.sequential).as_bytes())
        .map_err(err)?;
    write_file(&out_dir.join(CHUNK_POSES_FILE), format_chunk_poses(&out.chunk_poses).as_bytes())
        .map_err(err)?;
    Ok(())
}

/// Full pipeline from a manifest directory to files in `out_dir`.
pub fn run_pipeline(
    manifest_dir: &Path,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<PipelineOutput, PipelineError> {
    cfg.validate().map_err(|e| PipelineError::new(Stage::Load, e))?;
    let start = Instant::now();
    let set = load_manifests(manifest_dir, cfg)?;
    let load_seconds = start.elapsed().as_secs_f64();
    let mut out = run_stages(&set.temporal, &set, cfg)?;
    out.timings.insert(
        0,
        StageTiming {
            stage: Stage::Load,
            seconds: load_seconds,
        },
    );
    let start = Instant::now();
    write_outputs(out_dir, &out)?;
    out.timings.push(StageTiming {
        stage: Stage::Export,
        seconds: start.elapsed().as_secs_f64(),
    });
    write_file(&out_dir.join(TIMING_FILE), format_timing(&out.timings).as_bytes())
        .map_err(|e| PipelineError::new(Stage::Export, e))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::MethodName;
    use crate::evaluation::{ate_rmse, cloud_metrics, AlignmentMode};
    use crate::io::{write_chunk, DType};
    use crate::synthetic::{generate_scene, SceneSpec, TrajectoryShape};

    fn small_cfg() -> PipelineConfig {
        PipelineConfig {
            chunk_size: 30,
            overlap: 10,
            enable_loops: false,
            ..PipelineConfig::default()
        }
    }

    fn small_scene() -> SyntheticScene {
        generate_scene(&SceneSpec {
            n_frames: 70,
            chunk_size: 30,
            overlap: 10,
            trajectory_shape: TrajectoryShape::Circle,
            point_density: 1024,
            ..SceneSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_noise_scene_recovers_ground_truth() {
        let scene = small_scene();
        let out = run_stages(&scene.chunks, &NoLoopChunks, &small_cfg()).unwrap();
        let ate = ate_rmse(&out.trajectory, &scene.gt_trajectory, AlignmentMode::Sim3).unwrap();
        assert!(ate < 1e-6, "ate {ate}");
        assert_eq!(out.trajectory.len(), 70);
    }

    #[test]
    fn irls_and_umeyama_agree_on_clean_data() {
        let scene = small_scene();
        let a = run_stages(&scene.chunks, &NoLoopChunks, &small_cfg()).unwrap();
        let cfg = PipelineConfig {
            align_method: MethodName::Irls,
            ..small_cfg()
        };
        let b = run_stages(&scene.chunks, &NoLoopChunks, &cfg).unwrap();
        let worst = a
            .trajectory
            .positions()
            .iter()
            .zip(b.trajectory.positions())
            .map(|(p, q)| (p - q).norm())
            .fold(0.0, f64::max);
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn empty_manifest_dir_is_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let err = run_pipeline(dir.path(), &small_cfg(), out.path()).unwrap_err();
        assert_eq!(err.stage, Stage::Load);
        assert!(matches!(err.io(), Some(IoError::MissingFile(_))));
    }

    #[test]
    fn two_chunk_cloud_matches_ground_truth() {
        let scene = generate_scene(&SceneSpec {
            n_frames: 50,
            chunk_size: 30,
            overlap: 10,
            point_density: 512,
            ..SceneSpec::default()
        })
        .unwrap();
        assert_eq!(scene.chunks.len(), 2);
        let out = run_stages(&scene.chunks, &NoLoopChunks, &small_cfg()).unwrap();
        let m = cloud_metrics(&out.points, &scene.gt_points).unwrap();
        assert!(m.chamfer < 1e-6, "{m:?}");
    }

    #[test]
    fn files_on_disk_reproduce_in_memory_run() {
        let scene = small_scene();
        let dir = tempfile::tempdir().unwrap();
        for c in &scene.chunks {
            write_chunk(dir.path(), c, None, DType::F64).unwrap();
        }
        let out_dir = tempfile::tempdir().unwrap();
        let disk = run_pipeline(dir.path(), &small_cfg(), out_dir.path()).unwrap();
        let mem = run_stages(&scene.chunks, &NoLoopChunks, &small_cfg()).unwrap();
        assert_eq!(format_kitti(&disk.trajectory), format_kitti(&mem.trajectory));
        for f in [KITTI_FILE, TUM_FILE, PLY_FILE, LOOPS_FILE, TIMING_FILE, ALIGNMENT_FILE, CHUNK_POSES_FILE] {
            assert!(out_dir.path().join(f).exists(), "{f}");
        }
        let timing = std::fs::read_to_string(out_dir.path().join(TIMING_FILE)).unwrap();
        let stages: Vec<&str> = timing
            .lines()
            .filter(|l| !l.starts_with('#'))
            .map(|l| l.split_whitespace().next().unwrap())
            .collect();
        assert_eq!(
            stages,
            vec!["load", "sequential_align", "loop_detection", "loop_align", "optimize", "propagate", "export", "total"]
        );
    }

    #[test]
    fn errors_carry_stage_and_chunk_pair() {
        let mut scene = small_scene();
        for d in &mut scene.chunks[1].depths {
            *d = crate::geometry::DepthMap::from_depth(d.width(), d.height(), vec![0.0; d.width() * d.height()]).unwrap();
        }
        let err = run_stages(&scene.chunks, &NoLoopChunks, &small_cfg()).unwrap_err();
        assert_eq!(err.stage, Stage::SequentialAlign);
        let text = err.to_string();
        assert!(text.contains("sequential_align") && text.contains("chunks 0 -> 1"), "{text}");
    }

    #[test]
    fn owner_is_the_chunk_centered_nearest() {
        let scene = small_scene();
        // Chunks cover 0..30, 20..50, 40..70.
        assert_eq!(owning_chunk(&scene.chunks, 5), Some(0));
        assert_eq!(owning_chunk(&scene.chunks, 24), Some(0));
        assert_eq!(owning_chunk(&scene.chunks, 26), Some(1));
        assert_eq!(owning_chunk(&scene.chunks, 69), Some(2));
        assert_eq!(owning_chunk(&scene.chunks, 70), None);
    }

    #[test]
    fn chunk_pose_lines() {
        let text = format_chunk_poses(&[Sim3::identity(), Sim3::from_scale(2.0).unwrap()]);
        assert_eq!(text, "0 1 0 0 0 0 0 0 1\n1 2 0 0 0 0 0 0 1\n");
    }

    #[test]
    fn chunk_poses_roundtrip() {
        let poses: Vec<Sim3> = (0..4)
            .map(|k| {
                let v = k as f64;
                Sim3::exp(&crate::sim3::Sim3Tangent::new(
                    Vector3::new(v, -0.5 * v, 2.0),
                    Vector3::new(0.1 * v, 0.3, -0.2 * v),
                    0.05 * v - 0.1,
                ))
            })
            .collect();
        let text = format!("# header\n{}", format_chunk_poses(&poses));
        let back = parse_chunk_poses(&text, Path::new("poses.txt")).unwrap();
        assert_eq!(back.len(), poses.len());
        for (a, b) in poses.iter().zip(&back) {
            assert!(a.inverse().compose(b).log().unwrap().to_vector().norm() < 1e-12);
        }
        let err = parse_chunk_poses("1 1 0 0 0 0 0 0 1\n", Path::new("p")).unwrap_err();
        assert!(matches!(err, IoError::Parse { line: 1, .. }), "{err}");
    }
}
