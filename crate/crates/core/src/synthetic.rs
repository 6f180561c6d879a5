//! Deterministic synthetic scenes with known ground truth.
//!
//! A camera follows an analytic path looking along its tangent through a tube
//! of random landmarks. Sparse depth maps come from z-buffered projection of
//! the landmarks. Chunk drift is modelled as a cumulative Sim(3) random walk
//! `D_t = D_{t-1} ∘ exp(n_t)`: the body frames of chunk `t` are expressed in
//! `D_t⁻¹` coordinates while the frames it shares with chunk `t-1` stay in
//! `D_{t-1}⁻¹` coordinates. Overlaps therefore agree exactly and the error only
//! shows up as accumulated drift.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};
use rayon::prelude::*;
use thiserror::Error;

use crate::alignment::CorrespondenceSet;
use crate::evaluation::TrajectoryEstimate;
use crate::geometry::{chunk_indices, ChunkArtifact, ChunkKind, DepthMap, Intrinsics};
use crate::loops::PatchTokens;
use crate::sim3::{Rotation3, Sim3, Sim3Tangent};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryShape {
    Line,
    Circle,
    FigureEight,
}

impl std::str::FromStr for TrajectoryShape {
    type Err = SceneError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "line" => Ok(Self::Line),
            "circle" => Ok(Self::Circle),
            "figure-eight" | "figure8" => Ok(Self::FigureEight),
            other => Err(SceneError::InvalidSpec(format!("unknown trajectory shape {other:?}"))),
        }
    }
}

impl std::fmt::Display for TrajectoryShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Line => "line",
            Self::Circle => "circle",
            Self::FigureEight => "figure-eight",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_frames: usize,
    pub trajectory_shape: TrajectoryShape,
    /// Approximate number of landmarks in view per frame.
    pub point_density: usize,
    pub depth_noise_sigma: f64,
    /// Per-chunk tangent-space drift scale.
    pub drift_sigma: f64,
    /// Fraction of pixels per chunk frame given gross depth errors and low confidence.
    pub outlier_fraction: f64,
    /// Extend the path past one lap so the start is revisited.
    pub loop_closure: bool,
    pub chunk_size: usize,
    pub overlap: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Relative spread of per-frame reported focal length (depth stretches with it).
    pub focal_jitter: f64,
    /// Path radius (circle) or lobe size (figure-eight); line length per frame for lines.
    pub path_scale: f64,
    pub token_dim: usize,
    pub tokens_per_frame: usize,
    pub token_noise_sigma: f64,
    /// Magnitude of the direction shared by every token.
    pub hub_weight: f64,
    /// Edge length of the square ground cells that define places.
    pub place_cell_size: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_frames: 165,
            trajectory_shape: TrajectoryShape::Circle,
            point_density: 2048,
            depth_noise_sigma: 0.0,
            drift_sigma: 0.0,
            outlier_fraction: 0.0,
            loop_closure: false,
            chunk_size: 75,
            overlap: 30,
            width: 64,
            height: 48,
            focal: 48.0,
            focal_jitter: 0.0,
            path_scale: 20.0,
            token_dim: 64,
            tokens_per_frame: 16,
            token_noise_sigma: 0.05,
            hub_weight: 2.0,
            place_cell_size: 6.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        let fail = |m: &str| Err(SceneError::InvalidSpec(m.to_string()));
        if self.n_frames < self.chunk_size {
            return fail("n_frames must be at least the chunk size");
        }
        if self.overlap == 0 || self.overlap >= self.chunk_size {
            return fail("overlap must be in [1, chunk_size)");
        }
        let sigmas = [
            self.depth_noise_sigma,
            self.drift_sigma,
            self.token_noise_sigma,
            self.hub_weight,
            self.focal_jitter,
        ];
        if sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return fail("noise levels must be finite and nonnegative");
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return fail("outlier_fraction must be in [0, 1)");
        }
        if self.focal_jitter >= 0.5 {
            return fail("focal_jitter must be below 0.5");
        }
        if self.loop_closure && self.trajectory_shape == TrajectoryShape::Line {
            return fail("a line trajectory cannot close a loop");
        }
        if self.width < 4 || self.height < 4 || !(self.focal > 0.0) || !(self.path_scale > 0.0) {
            return fail("camera and path dimensions must be positive");
        }
        if self.token_dim == 0 || self.tokens_per_frame == 0 || self.point_density == 0 {
            return fail("token and landmark counts must be positive");
        }
        if !(self.place_cell_size > 0.0) {
            return fail("place_cell_size must be positive");
        }
        Ok(())
    }

    fn laps(&self) -> f64 {
        if self.loop_closure {
            1.15
        } else {
            0.9
        }
    }

    fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.focal,
            fy: self.focal,
            cx: self.width as f64 / 2.0 - 0.5,
            cy: self.height as f64 / 2.0 - 0.5,
            width: self.width,
            height: self.height,
        }
    }

    /// Path parameter of frame `k` (laps for closed shapes, fraction for lines).
    fn param(&self, k: f64) -> f64 {
        match self.trajectory_shape {
            TrajectoryShape::Line => k / (self.n_frames - 1) as f64,
            _ => k * self.laps() / (self.n_frames - 1) as f64,
        }
    }

    /// Position and unit tangent at path parameter `u`.
    fn path(&self, u: f64) -> (Vector3<f64>, Vector3<f64>) {
        let r = self.path_scale;
        let th = 2.0 * PI * u;
        let (p, d) = match self.trajectory_shape {
            TrajectoryShape::Line => {
                let len = r * self.n_frames as f64 * 0.05;
                (Vector3::new(len * u, 0.0, 0.0), Vector3::x())
            }
            TrajectoryShape::Circle => (
                Vector3::new(r * th.cos(), r * th.sin(), 0.0),
                Vector3::new(-th.sin(), th.cos(), 0.0),
            ),
            TrajectoryShape::FigureEight => (
                Vector3::new(r * th.sin(), r * th.sin() * th.cos(), 0.0),
                Vector3::new(th.cos(), (2.0 * th).cos(), 0.0),
            ),
        };
        (p, d.normalize())
    }
}

/// Camera-to-world rigid pose looking along `forward` with world +z up.
fn look_along(position: Vector3<f64>, forward: Vector3<f64>) -> Sim3 {
    let z = forward.normalize();
    let x = z.cross(&Vector3::z()).normalize();
    let y = z.cross(&x);
    let r = Matrix3::from_columns(&[x, y, z]);
    Sim3::rigid(
        Rotation3::from_matrix_projected(r, 1e-9).expect("orthonormal by construction"),
        position,
    )
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent generator for one (seed, purpose, a, b) tuple.
fn stream(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(splitmix(seed ^ tag) ^ a) ^ b))
}

const TAG_LANDMARKS: u64 = 1;
const TAG_DRIFT: u64 = 2;
const TAG_PIXELS: u64 = 3;
const TAG_TOKENS: u64 = 4;
const TAG_PLACES: u64 = 5;
const TAG_FOCAL: u64 = 6;
const TAG_LOOP_FRAME: u64 = 7;
const TAG_OUTLIERS: u64 = 8;

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub intrinsics: Intrinsics,
    /// Camera-to-world ground-truth poses.
    pub gt_poses: Vec<Sim3>,
    pub gt_trajectory: TrajectoryEstimate,
    /// World points back-projected from the noise-free depth of every frame.
    pub gt_points: Vec<Vector3<f64>>,
    /// Place cluster of every frame.
    pub place_clusters: Vec<usize>,
    /// Cumulative drift `D_t` of each temporal chunk.
    pub chunk_drift: Vec<Sim3>,
    pub chunks: Vec<ChunkArtifact>,
    gt_depth: Vec<Vec<f64>>,
    tokens: Vec<PatchTokens>,
}

pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene, SceneError> {
    spec.validate()?;
    let n = spec.n_frames;
    let intrinsics = spec.intrinsics();
    let gt_poses: Vec<Sim3> = (0..n)
        .map(|k| {
            let (p, d) = spec.path(spec.param(k as f64));
            look_along(p, d)
        })
        .collect();

    let step = (spec.path(spec.param(1.0)).0 - spec.path(spec.param(0.0)).0).norm();
    let view_distance = 25.0;
    let lookahead = ((view_distance / step.max(1e-9)).ceil() as usize).clamp(4, 200);
    let per_bucket = spec.point_density.div_ceil(lookahead);
    // Bucket `b` holds landmarks along the path between frames `b - lookahead`
    // and `b - lookahead + 1`; a frame looks at buckets on both sides since
    // tight turns bring path segments behind it into view.
    let buckets: Vec<Vec<Vector3<f64>>> = (0..n + 2 * lookahead + 1)
        .into_par_iter()
        .map(|b| landmark_bucket(spec, b as f64 - lookahead as f64, b, per_bucket))
        .collect();

    let gt_depth: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let near = &buckets[k..=k + 2 * lookahead];
            render_depth(&intrinsics, &gt_poses[k], near.iter().flatten())
        })
        .collect();

    let gt_points: Vec<Vector3<f64>> = gt_depth
        .par_iter()
        .zip(&gt_poses)
        .map(|(d, pose)| {
            let dm = DepthMap::from_depth(spec.width, spec.height, d.clone()).expect("valid depth");
            crate::geometry::backproject(&dm, &intrinsics, pose)
        })
        .flatten()
        .collect();

    let place_clusters = assign_places(spec, &gt_poses);
    let tokens = frame_tokens(spec, &place_clusters, None);

    let ranges = chunk_indices(n, spec.chunk_size, spec.overlap)
        .map_err(|e| SceneError::InvalidSpec(e.to_string()))?;
    let mut chunk_drift = vec![Sim3::identity()];
    for t in 1..ranges.len() {
        let mut rng = stream(spec.seed, TAG_DRIFT, t as u64, 0);
        let mut draw = || spec.drift_sigma * rng.sample::<f64, _>(StandardNormal);
        let noise = Sim3Tangent::new(
            Vector3::new(draw(), draw(), draw()),
            Vector3::new(draw(), draw(), draw()),
            draw(),
        );
        let next = chunk_drift[t - 1].compose(&Sim3::exp(&noise));
        chunk_drift.push(next);
    }

    let gt_trajectory = TrajectoryEstimate::from_poses((0..n).collect(), &gt_poses)
        .map_err(|e| SceneError::InvalidSpec(e.to_string()))?;
    let mut scene = SyntheticScene {
        spec: spec.clone(),
        intrinsics,
        gt_poses,
        gt_trajectory,
        gt_points,
        place_clusters,
        chunk_drift,
        chunks: Vec::new(),
        gt_depth,
        tokens,
    };
    scene.chunks = ranges
        .iter()
        .enumerate()
        .map(|(t, r)| {
            let frames: Vec<usize> = r.clone().collect();
            let frames_of_prev = if t > 0 { Some(ranges[t - 1].clone()) } else { None };
            let transforms: Vec<Sim3> = frames
                .iter()
                .map(|f| match &frames_of_prev {
                    Some(prev) if prev.contains(f) => scene.chunk_drift[t - 1],
                    _ => scene.chunk_drift[t],
                })
                .collect();
            scene.render_chunk(t, ChunkKind::Temporal, &frames, &transforms, t as u64)
        })
        .collect();
    Ok(scene)
}

fn landmark_bucket(spec: &SceneSpec, start: f64, b: usize, count: usize) -> Vec<Vector3<f64>> {
    let mut rng = stream(spec.seed, TAG_LANDMARKS, b as u64, 0);
    (0..count)
        .map(|_| {
            let u = spec.param(start + rng.random::<f64>());
            let (p, d) = spec.path(u);
            let side = d.cross(&Vector3::z()).normalize();
            let angle = rng.random_range(0.0..2.0 * PI);
            let radius = rng.random_range(1.5..6.0);
            p + radius * (angle.cos() * side + angle.sin() * Vector3::z())
        })
        .collect()
}

/// Nearest landmark depth per pixel, 0 where nothing projects.
fn render_depth<'a>(
    k: &Intrinsics,
    pose: &Sim3,
    landmarks: impl Iterator<Item = &'a Vector3<f64>>,
) -> Vec<f64> {
    let world_to_cam = pose.inverse();
    let mut depth = vec![0.0; k.width * k.height];
    for p in landmarks {
        let Some((u, v, z)) = k.project(&world_to_cam.apply(p)) else {
            continue;
        };
        let (ui, vi) = (u.round(), v.round());
        if z < 0.5 || ui < 0.0 || vi < 0.0 || ui >= k.width as f64 || vi >= k.height as f64 {
            continue;
        }
        let idx = vi as usize * k.width + ui as usize;
        if depth[idx] == 0.0 || z < depth[idx] {
            depth[idx] = z;
        }
    }
    depth
}

/// Places are square ground cells, numbered in order of first visit.
fn assign_places(spec: &SceneSpec, poses: &[Sim3]) -> Vec<usize> {
    let mut ids: BTreeMap<(i64, i64), usize> = BTreeMap::new();
    poses
        .iter()
        .map(|p| {
            let t = p.translation();
            let cell = (
                (t.x / spec.place_cell_size).floor() as i64,
                (t.y / spec.place_cell_size).floor() as i64,
            );
            let next = ids.len();
            *ids.entry(cell).or_insert(next)
        })
        .collect()
}

/// Tokens are `α·h + P[place, k] + noise` with a shared hub direction `h`.
/// `α` comes from `strengths` when given, else is drawn per frame.
fn frame_tokens(spec: &SceneSpec, places: &[usize], strengths: Option<&[f64]>) -> Vec<PatchTokens> {
    let (kt, d) = (spec.tokens_per_frame, spec.token_dim);
    let mut hub_rng = stream(spec.seed, TAG_PLACES, u64::MAX, 0);
    let hub = unit_gaussian(&mut hub_rng, d);
    let n_places = places.iter().max().map_or(0, |m| m + 1);
    let prototypes: Vec<Vec<f64>> = (0..n_places)
        .map(|c| {
            let mut rng = stream(spec.seed, TAG_PLACES, c as u64, 0);
            (0..kt).flat_map(|_| unit_gaussian(&mut rng, d)).collect()
        })
        .collect();
    places
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let mut rng = stream(spec.seed, TAG_TOKENS, i as u64, 0);
            let drawn = spec.hub_weight * rng.random_range(0.5..1.5);
            let alpha = strengths.map_or(drawn, |a| a[i]);
            let data = prototypes[*c]
                .iter()
                .enumerate()
                .map(|(idx, p)| {
                    alpha * hub[idx % d] + p + spec.token_noise_sigma * rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            PatchTokens::new(kt, d, data).expect("finite tokens")
        })
        .collect()
}

fn unit_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

impl SyntheticScene {
    pub fn n_frames(&self) -> usize {
        self.spec.n_frames
    }

    /// Frame tokens (identical in every chunk containing the frame).
    pub fn tokens(&self) -> &[PatchTokens] {
        &self.tokens
    }

    /// Noise-free depth of frame `k` in world units.
    pub fn gt_depth(&self, k: usize) -> DepthMap {
        DepthMap::from_depth(self.spec.width, self.spec.height, self.gt_depth[k].clone())
            .expect("valid depth")
    }

    /// Chunk-to-world transform that the body frames of chunk `t` were
    /// rendered under.
    pub fn true_chunk_to_world(&self, t: usize) -> Sim3 {
        self.chunk_drift[t]
    }

    /// Renders frames where frame `frames[i]` is expressed through the
    /// chunk-to-world transform `transforms[i]`. `noise_key` selects the
    /// per-pixel noise stream.
    pub fn render_chunk(
        &self,
        chunk_id: usize,
        kind: ChunkKind,
        frames: &[usize],
        transforms: &[Sim3],
        noise_key: u64,
    ) -> ChunkArtifact {
        let spec = &self.spec;
        let rendered: Vec<(Intrinsics, Sim3, DepthMap)> = frames
            .par_iter()
            .zip(transforms)
            .map(|(f, m)| {
                let local = m.inverse().compose(&self.gt_poses[*f]);
                let mut focal_rng = stream(spec.seed, TAG_FOCAL, noise_key, *f as u64);
                let stretch = 1.0 + spec.focal_jitter * focal_rng.random_range(-1.0..1.0);
                let intr = Intrinsics {
                    fx: self.intrinsics.fx * stretch,
                    fy: self.intrinsics.fy * stretch,
                    ..self.intrinsics
                };
                let mut rng = stream(spec.seed, TAG_PIXELS, noise_key, *f as u64);
                let scale = local.scale() * stretch;
                let mut depth = Vec::with_capacity(self.gt_depth[*f].len());
                let mut confidence = Vec::with_capacity(self.gt_depth[*f].len());
                for z in &self.gt_depth[*f] {
                    if *z == 0.0 {
                        depth.push(0.0);
                        confidence.push(0.0);
                        continue;
                    }
                    let outlier = spec.outlier_fraction > 0.0 && rng.random::<f64>() < spec.outlier_fraction;
                    let noise: f64 = rng.sample(StandardNormal);
                    let jitter: f64 = rng.random();
                    if outlier {
                        depth.push(z * scale * (1.5 + 1.5 * jitter));
                        confidence.push(0.05 * jitter);
                    } else {
                        depth.push((z * scale + spec.depth_noise_sigma * noise).max(1e-3));
                        confidence.push(0.8 + 0.4 * jitter);
                    }
                }
                let dm = DepthMap::new(spec.width, spec.height, depth, confidence).expect("valid depth");
                (intr, Sim3::rigid(*local.rotation(), *local.translation()), dm)
            })
            .collect();
        let mut chunk = ChunkArtifact {
            chunk_id,
            kind,
            frame_ids: frames.to_vec(),
            intrinsics: Vec::new(),
            poses: Vec::new(),
            depths: Vec::new(),
            tokens: frames.iter().map(|f| self.tokens[*f].clone()).collect(),
        };
        for (k, p, d) in rendered {
            chunk.intrinsics.push(k);
            chunk.poses.push(p);
            chunk.depths.push(d);
        }
        chunk
    }

    /// A loop-centric chunk over `frames`. It is internally consistent and
    /// expressed in a seeded arbitrary rigid frame unrelated to any temporal
    /// chunk, at ground-truth scale.
    pub fn render_loop_chunk(&self, chunk_id: usize, frames: &[usize]) -> ChunkArtifact {
        let mut rng = stream(self.spec.seed, TAG_LOOP_FRAME, chunk_id as u64, 0);
        let mut u = || rng.random_range(-1.0..1.0);
        let frame = Sim3::exp(&Sim3Tangent::new(
            Vector3::new(5.0 * u(), 5.0 * u(), 5.0 * u()),
            Vector3::new(u(), u(), u()),
            0.0,
        ));
        let transforms = vec![frame; frames.len()];
        self.render_chunk(
            chunk_id,
            ChunkKind::Loop,
            frames,
            &transforms,
            0x1000_0000 + chunk_id as u64,
        )
    }
}

/// Displaces `⌊fraction·N⌋` seeded-random target points by vectors of length
/// `magnitude` in uniformly random directions.
pub fn inject_outliers(
    c: &CorrespondenceSet,
    fraction: f64,
    magnitude: f64,
    seed: u64,
) -> CorrespondenceSet {
    let n = c.len();
    let count = ((fraction * n as f64).floor() as usize).min(n);
    let mut rng = stream(seed, TAG_OUTLIERS, 0, 0);
    let mut dst = c.dst().to_vec();
    let mut idx = rand::seq::index::sample(&mut rng, n, count).into_vec();
    idx.sort_unstable();
    for i in idx {
        let dir: [f64; 3] = UnitSphere.sample(&mut rng);
        dst[i] += magnitude * Vector3::from(dir);
    }
    c.with_dst(dst).expect("same length and finite")
}

/// Token sets for a sequence revisiting `n_clusters` places in blocks of
/// `block` frames. Returns tokens and the cluster label of each frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    pub seed: u64,
    pub n_frames: usize,
    pub n_clusters: usize,
    pub block: usize,
    pub token_dim: usize,
    pub tokens_per_frame: usize,
    pub noise_sigma: f64,
    /// Geometric mean of the per-visit hub strength.
    pub hub_weight: f64,
    /// Ratio between the largest and smallest per-visit hub strength.
    /// Strengths are log-uniform, constant within a visit.
    pub hub_spread: f64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_frames: 500,
            n_clusters: 5,
            block: 20,
            token_dim: 64,
            tokens_per_frame: 16,
            noise_sigma: 0.05,
            hub_weight: 2.0,
            hub_spread: 1.0,
        }
    }
}

pub fn place_cluster_tokens(spec: &ClusterSpec) -> (Vec<PatchTokens>, Vec<usize>) {
    let labels: Vec<usize> = (0..spec.n_frames)
        .map(|i| (i / spec.block.max(1)) % spec.n_clusters.max(1))
        .collect();
    let scene = SceneSpec {
        seed: spec.seed,
        token_dim: spec.token_dim,
        tokens_per_frame: spec.tokens_per_frame,
        token_noise_sigma: spec.noise_sigma,
        hub_weight: spec.hub_weight,
        ..SceneSpec::default()
    };
    let half_log = 0.5 * spec.hub_spread.max(1.0).ln();
    let n_visits = spec.n_frames.div_ceil(spec.block.max(1));
    let visit_strength: Vec<f64> = (0..n_visits)
        .map(|v| {
            let mut rng = stream(spec.seed, TAG_TOKENS, v as u64, 1);
            let u: f64 = rng.random_range(-1.0..=1.0);
            spec.hub_weight * (u * half_log).exp()
        })
        .collect();
    let strengths: Vec<f64> = (0..spec.n_frames)
        .map(|i| visit_strength[i / spec.block.max(1)])
        .collect();
    (frame_tokens(&scene, &labels, Some(&strengths)), labels)
}
