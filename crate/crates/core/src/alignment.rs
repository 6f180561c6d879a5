//! Chunk-to-chunk Sim(3) estimation from overlap correspondences.
//!
//! Direction convention: the transform returned for a pair `(a, b)` maps
//! coordinates of chunk `a` into coordinates of chunk `b`.

use std::time::Instant;

use log::warn;
use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{
    normalize_depth, reliability_mask, ChunkArtifact, DepthMap, GeometryError, Intrinsics,
};
use crate::sim3::{Rotation3, Sim3};

/// Second singular value of the cross-covariance, relative to the first,
/// below which the point configuration is treated as collinear.
const RANK_TOLERANCE: f64 = 1e-12;

/// Floor on the Huber threshold so exact data does not divide by zero.
const HUBER_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignError {
    #[error("degenerate point configuration (collinear or coincident points)")]
    DegenerateGeometry,
    #[error("invalid correspondences: {0}")]
    InvalidCorrespondences(String),
    #[error("chunks {a} and {b} share no frames")]
    NoOverlap { a: usize, b: usize },
    #[error("only {found} reliable points between chunks {a} and {b}, {required} required")]
    InsufficientReliablePoints {
        a: usize,
        b: usize,
        found: usize,
        required: usize,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Paired points, `src` in the source frame and `dst` in the target frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    src: Vec<Vector3<f64>>,
    dst: Vec<Vector3<f64>>,
    weights: Option<Vec<f64>>,
}

impl CorrespondenceSet {
    pub fn new(src: Vec<Vector3<f64>>, dst: Vec<Vector3<f64>>) -> Result<Self, AlignError> {
        Self::build(src, dst, None)
    }

    pub fn weighted(
        src: Vec<Vector3<f64>>,
        dst: Vec<Vector3<f64>>,
        weights: Vec<f64>,
    ) -> Result<Self, AlignError> {
        Self::build(src, dst, Some(weights))
    }

    fn build(
        src: Vec<Vector3<f64>>,
        dst: Vec<Vector3<f64>>,
        weights: Option<Vec<f64>>,
    ) -> Result<Self, AlignError> {
        let bad = |m: String| Err(AlignError::InvalidCorrespondences(m));
        if src.len() != dst.len() {
            return bad(format!("{} source vs {} target points", src.len(), dst.len()));
        }
        if src.len() < 3 {
            return bad(format!("{} points, at least 3 required", src.len()));
        }
        if src.iter().chain(&dst).any(|p| !p.iter().all(|v| v.is_finite())) {
            return bad("non-finite point".into());
        }
        if let Some(w) = &weights {
            if w.len() != src.len() {
                return bad(format!("{} weights for {} points", w.len(), src.len()));
            }
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return bad("weights must be finite and nonnegative".into());
            }
            if w.iter().sum::<f64>() <= 0.0 {
                return bad("weights sum to zero".into());
            }
        }
        Ok(Self { src, dst, weights })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn src(&self) -> &[Vector3<f64>] {
        &self.src
    }

    pub fn dst(&self) -> &[Vector3<f64>] {
        &self.dst
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self, AlignError> {
        Self::weighted(self.src.clone(), self.dst.clone(), weights)
    }

    /// Replaces target points, keeping sources and weights.
    pub fn with_dst(&self, dst: Vec<Vector3<f64>>) -> Result<Self, AlignError> {
        Self::build(self.src.clone(), dst, self.weights.clone())
    }

    /// Root-mean-square of `‖dst − S·src‖`.
    pub fn rms_residual(&self, s: &Sim3) -> f64 {
        let sum: f64 = residuals(self, s).iter().map(|r| r * r).sum();
        (sum / self.len() as f64).sqrt()
    }
}

fn residuals(c: &CorrespondenceSet, s: &Sim3) -> Vec<f64> {
    c.src
        .iter()
        .zip(&c.dst)
        .map(|(p, q)| (q - s.apply(p)).norm())
        .collect()
}

/// Closed-form least-squares similarity minimizing `Σ w‖dst − sR·src − t‖²`.
pub fn umeyama_sim3(c: &CorrespondenceSet) -> Result<Sim3, AlignError> {
    let uniform = match &c.weights {
        None => true,
        Some(w) => w.iter().all(|v| *v == w[0]),
    };
    if uniform {
        solve(&c.src, &c.dst, None)
    } else {
        solve(&c.src, &c.dst, c.weights.as_deref())
    }
}

fn solve(src: &[Vector3<f64>], dst: &[Vector3<f64>], w: Option<&[f64]>) -> Result<Sim3, AlignError> {
    let weight = |i: usize| w.map_or(1.0, |w| w[i]);
    let total: f64 = w.map_or(src.len() as f64, |w| w.iter().sum());
    let mut mu_s = Vector3::zeros();
    let mut mu_d = Vector3::zeros();
    for (i, (p, q)) in src.iter().zip(dst).enumerate() {
        mu_s += p * weight(i);
        mu_d += q * weight(i);
    }
    mu_s /= total;
    mu_d /= total;
    let mut var_s = 0.0;
    let mut cov = Matrix3::zeros();
    for (i, (p, q)) in src.iter().zip(dst).enumerate() {
        let (a, b) = (p - mu_s, q - mu_d);
        var_s += weight(i) * a.norm_squared();
        cov += weight(i) * b * a.transpose();
    }
    var_s /= total;
    cov /= total;

    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = svd.singular_values;
    // nalgebra does not sort 3×3 singular values; order them explicitly.
    let mut order = [0usize, 1, 2];
    order.sort_by(|a, b| d[*b].total_cmp(&d[*a]));
    if var_s <= 0.0 || d[order[0]] <= 0.0 || d[order[1]] <= RANK_TOLERANCE * d[order[0]] {
        return Err(AlignError::DegenerateGeometry);
    }
    let mut sign = Vector3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        sign[order[2]] = -1.0;
    }
    let r = u * Matrix3::from_diagonal(&sign) * v_t;
    let scale = d.component_mul(&sign).sum() / var_s;
    let rotation = Rotation3::from_matrix_unchecked(r);
    let translation = mu_d - scale * rotation.rotate(&mu_s);
    Sim3::new(scale, rotation, translation).map_err(|_| AlignError::DegenerateGeometry)
}

fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    let mid = n / 2;
    let (_, upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = values[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Median absolute deviation from the median.
fn mad(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    let m = median(&mut v);
    let mut dev: Vec<f64> = values.iter().map(|x| (x - m).abs()).collect();
    median(&mut dev)
}

/// Robust baseline: alternate weighted Umeyama with Huber reweighting at
/// threshold `kernel_scale × MAD(residuals)`.
pub fn irls_sim3(c: &CorrespondenceSet, max_iters: usize, kernel_scale: f64) -> Result<Sim3, AlignError> {
    irls_sim3_counted(c, max_iters, kernel_scale).map(|(s, _)| s)
}

/// As [`irls_sim3`], also returning the number of reweighted solves performed.
pub fn irls_sim3_counted(
    c: &CorrespondenceSet,
    max_iters: usize,
    kernel_scale: f64,
) -> Result<(Sim3, usize), AlignError> {
    let mut s = umeyama_sim3(c)?;
    let mut weights = vec![1.0; c.len()];
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        let r = residuals(c, &s);
        let k = (kernel_scale * mad(&r)).max(HUBER_FLOOR);
        let next: Vec<f64> = r
            .iter()
            .map(|ri| if *ri <= k { 1.0 } else { k / ri })
            .collect();
        let change = next
            .iter()
            .zip(&weights)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        weights = next;
        s = solve(&c.src, &c.dst, Some(&weights))?;
        if change < 1e-8 {
            break;
        }
    }
    Ok((s, iterations))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlignMethod {
    Umeyama,
    Irls { max_iters: usize, kernel_scale: f64 },
}

impl AlignMethod {
    pub fn irls_default() -> Self {
        AlignMethod::Irls {
            max_iters: 10,
            kernel_scale: 1.345,
        }
    }

    pub fn solve(&self, c: &CorrespondenceSet) -> Result<Sim3, AlignError> {
        match *self {
            AlignMethod::Umeyama => umeyama_sim3(c),
            AlignMethod::Irls {
                max_iters,
                kernel_scale,
            } => irls_sim3(c, max_iters, kernel_scale),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignParams {
    pub lambda_d: f64,
    pub lambda_gamma: f64,
    pub method: AlignMethod,
    /// Fewer masked points than this triggers threshold relaxation.
    pub min_points: usize,
    /// Number of times `lambda_d` may be doubled before giving up.
    pub max_relaxations: usize,
    /// Masked points beyond this are uniformly subsampled.
    pub max_points: usize,
    pub seed: u64,
}

impl Default for AlignParams {
    fn default() -> Self {
        Self {
            lambda_d: 0.2,
            lambda_gamma: 0.5,
            method: AlignMethod::Umeyama,
            min_points: 100,
            max_relaxations: 3,
            max_points: 200_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport {
    pub transform: Sim3,
    pub n_points: usize,
    pub rms_residual: f64,
    pub elapsed: f64,
    /// Depth threshold actually used after any relaxation.
    pub lambda_d: f64,
    pub relaxations: usize,
}

/// Point selection for overlap correspondences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PointSelection {
    /// Reliability mask with the given depth and confidence thresholds.
    Masked { lambda_d: f64, lambda_gamma: f64 },
    /// Every pixel with positive depth in both chunks.
    All,
}

fn frame_pairs(
    a: &ChunkArtifact,
    b: &ChunkArtifact,
    reference: &Intrinsics,
) -> Vec<(usize, usize, DepthMap, DepthMap)> {
    a.shared_frames(b)
        .into_iter()
        .map(|f| {
            let (ia, ib) = (a.position_of(f).unwrap(), b.position_of(f).unwrap());
            (
                ia,
                ib,
                normalize_depth(&a.depths[ia], &a.intrinsics[ia], reference),
                normalize_depth(&b.depths[ib], &b.intrinsics[ib], reference),
            )
        })
        .collect()
}

/// Corresponding world points for every shared frame, each chunk lifting its
/// own normalized depth through its own pose. Pixels are matched by position.
pub fn overlap_correspondences(
    a: &ChunkArtifact,
    b: &ChunkArtifact,
    reference: &Intrinsics,
    selection: PointSelection,
) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>), AlignError> {
    let pairs = frame_pairs(a, b, reference);
    if pairs.is_empty() {
        return Err(AlignError::NoOverlap {
            a: a.chunk_id,
            b: b.chunk_id,
        });
    }
    let per_frame = pairs
        .par_iter()
        .map(|(ia, ib, da, db)| -> Result<_, AlignError> {
            let mask = match selection {
                PointSelection::Masked {
                    lambda_d,
                    lambda_gamma,
                } => Some(reliability_mask(da, db, lambda_d, lambda_gamma)?),
                PointSelection::All => {
                    if (da.width(), da.height()) != (db.width(), db.height()) {
                        return Err(GeometryError::ShapeMismatch(
                            da.width(),
                            da.height(),
                            db.width(),
                            db.height(),
                        )
                        .into());
                    }
                    None
                }
            };
            let ka = a.intrinsics[*ia].with_focal_of(reference);
            let kb = b.intrinsics[*ib].with_focal_of(reference);
            let (pa, pb) = (&a.poses[*ia], &b.poses[*ib]);
            let mut src = Vec::new();
            let mut dst = Vec::new();
            for v in 0..da.height() {
                for u in 0..da.width() {
                    let idx = v * da.width() + u;
                    let (za, zb) = (da.depth()[idx], db.depth()[idx]);
                    let keep = mask.as_ref().is_none_or(|m| m.bits()[idx]);
                    if keep && za > 0.0 && zb > 0.0 {
                        src.push(pa.apply(&ka.unproject(u as f64, v as f64, za)));
                        dst.push(pb.apply(&kb.unproject(u as f64, v as f64, zb)));
                    }
                }
            }
            Ok((src, dst))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for (s, d) in per_frame {
        src.extend(s);
        dst.extend(d);
    }
    Ok((src, dst))
}

fn subsample(
    src: Vec<Vector3<f64>>,
    dst: Vec<Vector3<f64>>,
    cap: usize,
    seed: u64,
) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    if src.len() <= cap {
        return (src, dst);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, src.len(), cap).into_vec();
    idx.sort_unstable();
    (
        idx.iter().map(|i| src[*i]).collect(),
        idx.iter().map(|i| dst[*i]).collect(),
    )
}

/// Estimates the transform from chunk `a` coordinates to chunk `b`
/// coordinates from their shared frames.
pub fn align_adjacent(
    a: &ChunkArtifact,
    b: &ChunkArtifact,
    reference: &Intrinsics,
    params: &AlignParams,
) -> Result<AlignmentReport, AlignError> {
    let start = Instant::now();
    let mut lambda_d = params.lambda_d;
    let mut relaxations = 0;
    let (src, dst) = loop {
        let selection = PointSelection::Masked {
            lambda_d,
            lambda_gamma: params.lambda_gamma,
        };
        let (src, dst) = overlap_correspondences(a, b, reference, selection)?;
        if src.len() >= params.min_points.max(3) {
            break (src, dst);
        }
        if relaxations == params.max_relaxations {
            return Err(AlignError::InsufficientReliablePoints {
                a: a.chunk_id,
                b: b.chunk_id,
                found: src.len(),
                required: params.min_points,
            });
        }
        relaxations += 1;
        warn!(
            "chunks {} -> {}: {} reliable points, relaxing depth threshold {} -> {}",
            a.chunk_id,
            b.chunk_id,
            src.len(),
            lambda_d,
            lambda_d * 2.0
        );
        lambda_d *= 2.0;
    };
    let (src, dst) = subsample(src, dst, params.max_points, params.seed);
    let c = CorrespondenceSet::new(src, dst)?;
    let transform = params.method.solve(&c)?;
    Ok(AlignmentReport {
        rms_residual: c.rms_residual(&transform),
        n_points: c.len(),
        transform,
        elapsed: start.elapsed().as_secs_f64(),
        lambda_d,
        relaxations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ChunkKind;
    use crate::loops::PatchTokens;
    use crate::sim3::Sim3Tangent;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_sim3(rng: &mut ChaCha8Rng) -> Sim3 {
        let mut v = || rng.random_range(-1.0..1.0);
        Sim3::exp(&Sim3Tangent::new(
            Vector3::new(3.0 * v(), 3.0 * v(), 3.0 * v()),
            Vector3::new(1.5 * v(), 1.5 * v(), 1.5 * v()),
            0.5 * v(),
        ))
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0)))
            .collect()
    }

    fn apply_all(s: &Sim3, pts: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        pts.iter().map(|p| s.apply(p)).collect()
    }

    fn corr(src: Vec<Vector3<f64>>, s: &Sim3) -> CorrespondenceSet {
        let dst = apply_all(s, &src);
        CorrespondenceSet::new(src, dst).unwrap()
    }

    #[test]
    fn umeyama_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_points(&mut rng, 20);
        let s = umeyama_sim3(&CorrespondenceSet::new(pts.clone(), pts.clone()).unwrap()).unwrap();
        assert!(s.max_abs_diff(&Sim3::identity()) < 1e-12);

        let dst: Vec<_> = pts.iter().map(|p| 2.0 * p + Vector3::x()).collect();
        let s = umeyama_sim3(&CorrespondenceSet::new(pts.clone(), dst).unwrap()).unwrap();
        let expected = Sim3::new(2.0, Rotation3::identity(), Vector3::x()).unwrap();
        assert!(s.max_abs_diff(&expected) < 1e-12);

        let gt = random_sim3(&mut rng);
        let s = umeyama_sim3(&corr(random_points(&mut rng, 100), &gt)).unwrap();
        assert!(s.max_abs_diff(&gt) < 1e-9 * (1.0 + gt.translation().norm()));
    }

    #[test]
    fn umeyama_handles_reflection_case() {
        // Planar data whose best orthogonal fit is a reflection: the sign
        // correction must still give a proper rotation.
        let src = vec![
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(-1.0, 0.0, 0.0),
            Vector3::new(0.0, -1.0, 0.0),
        ];
        let dst: Vec<_> = src.iter().map(|p| Vector3::new(p.x, -p.y, p.z)).collect();
        let s = umeyama_sim3(&CorrespondenceSet::new(src, dst).unwrap()).unwrap();
        assert!((s.rotation().matrix().determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn umeyama_rejects_collinear_points() {
        let src: Vec<_> = (0..10).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        let c = corr(src, &Sim3::identity());
        assert_eq!(umeyama_sim3(&c), Err(AlignError::DegenerateGeometry));
        let same = vec![Vector3::new(1.0, 1.0, 1.0); 5];
        let c = CorrespondenceSet::new(same.clone(), same).unwrap();
        assert_eq!(umeyama_sim3(&c), Err(AlignError::DegenerateGeometry));
    }

    #[test]
    fn correspondence_validation() {
        let p = vec![Vector3::zeros(); 3];
        assert!(CorrespondenceSet::new(p.clone(), p[..2].to_vec()).is_err());
        assert!(CorrespondenceSet::new(p[..2].to_vec(), p[..2].to_vec()).is_err());
        assert!(CorrespondenceSet::weighted(p.clone(), p.clone(), vec![1.0, -1.0, 1.0]).is_err());
        let mut nan = p.clone();
        nan[1].x = f64::NAN;
        assert!(CorrespondenceSet::new(nan, p).is_err());
    }

    #[test]
    fn uniform_weights_equal_unweighted_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src = random_points(&mut rng, 50);
        let dst: Vec<_> = apply_all(&random_sim3(&mut rng), &src)
            .into_iter()
            .map(|p| p + Vector3::from_fn(|_, _| 0.01 * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let c = CorrespondenceSet::new(src, dst).unwrap();
        let plain = umeyama_sim3(&c).unwrap();
        for w in [0.5, 1.0, 3.0] {
            let weighted = umeyama_sim3(&c.with_weights(vec![w; 50]).unwrap()).unwrap();
            assert_eq!(weighted, plain);
        }
    }

    #[test]
    fn weighted_umeyama_ignores_zero_weight_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = random_sim3(&mut rng);
        let src = random_points(&mut rng, 30);
        let mut dst = apply_all(&gt, &src);
        let mut w = vec![1.0; 30];
        for i in 0..5 {
            dst[i] += Vector3::new(50.0, 0.0, 0.0);
            w[i] = 0.0;
        }
        let s = umeyama_sim3(&CorrespondenceSet::weighted(src, dst, w).unwrap()).unwrap();
        assert!(s.max_abs_diff(&gt) < 1e-9 * (1.0 + gt.translation().norm()));
    }

    #[test]
    fn irls_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt = random_sim3(&mut rng);
        let src = random_points(&mut rng, 200);
        let noisy: Vec<_> = apply_all(&gt, &src)
            .into_iter()
            .map(|p| p + Vector3::from_fn(|_, _| 0.01 * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let c = CorrespondenceSet::new(src.clone(), noisy).unwrap();
        assert_eq!(irls_sim3(&c, 0, 1.345).unwrap(), umeyama_sim3(&c).unwrap());

        let clean = corr(src.clone(), &gt);
        let a = irls_sim3(&clean, 10, 1.345).unwrap();
        assert!(a.max_abs_diff(&umeyama_sim3(&clean).unwrap()) < 1e-9);

        let mut dst = apply_all(&gt, &src);
        let outliers = rand::seq::index::sample(&mut rng, 200, 40);
        for i in outliers.iter() {
            dst[i] += Vector3::new(100.0, 0.0, 0.0);
        }
        let c = CorrespondenceSet::new(src, dst).unwrap();
        let robust = irls_sim3(&c, 50, 1.345).unwrap();
        let plain = umeyama_sim3(&c).unwrap();
        assert!(robust.max_abs_diff(&gt) < 1e-3, "{}", robust.max_abs_diff(&gt));
        assert!(plain.max_abs_diff(&gt) > 1e-1);
    }

    #[test]
    fn median_and_mad() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(mad(&[1.0, 1.0, 2.0, 2.0, 4.0, 6.0, 9.0]), 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn umeyama_is_equivariant(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let src = random_points(&mut rng, 40);
            let dst: Vec<_> = apply_all(&random_sim3(&mut rng), &src)
                .into_iter()
                .map(|p| p + Vector3::from_fn(|_, _| 0.05 * rng.sample::<f64, _>(StandardNormal)))
                .collect();
            let t = random_sim3(&mut rng);
            let c = CorrespondenceSet::new(src.clone(), dst.clone()).unwrap();
            let moved = CorrespondenceSet::new(src, apply_all(&t, &dst)).unwrap();
            let expected = t.compose(&umeyama_sim3(&c).unwrap());
            let got = umeyama_sim3(&moved).unwrap();
            prop_assert!(got.max_abs_diff(&expected) < 1e-8 * (1.0 + expected.translation().norm()));
        }
    }

    /// Two-frame chunk with a smooth synthetic depth field.
    fn toy_chunk(id: usize, frames: &[usize], poses: Vec<Sim3>, depth_scale: f64) -> ChunkArtifact {
        let k = Intrinsics::new(40.0, 40.0, 15.5, 11.5, 32, 24).unwrap();
        let depths = frames
            .iter()
            .map(|f| {
                let d = (0..32 * 24)
                    .map(|i| {
                        let (u, v) = ((i % 32) as f64, (i / 32) as f64);
                        depth_scale * (3.0 + 0.5 * (u / 5.0 + *f as f64).sin() + 0.3 * (v / 4.0).cos())
                    })
                    .collect();
                DepthMap::from_depth(32, 24, d).unwrap()
            })
            .collect();
        ChunkArtifact {
            chunk_id: id,
            kind: ChunkKind::Temporal,
            frame_ids: frames.to_vec(),
            intrinsics: vec![k; frames.len()],
            poses,
            depths,
            tokens: vec![PatchTokens::new(1, 1, vec![1.0]).unwrap(); frames.len()],
        }
    }

    #[test]
    fn align_recovers_known_transform() {
        let cam = [
            Sim3::rigid(Rotation3::exp(&Vector3::new(0.0, 0.1, 0.0)), Vector3::new(0.0, 0.0, 0.0)),
            Sim3::rigid(Rotation3::exp(&Vector3::new(0.0, 0.2, 0.05)), Vector3::new(0.5, 0.0, 0.1)),
        ];
        let a = toy_chunk(0, &[4, 5], cam.to_vec(), 1.0);
        let gt = Sim3::exp(&Sim3Tangent::new(
            Vector3::new(0.3, -0.2, 0.1),
            Vector3::new(0.05, -0.1, 0.2),
            0.02,
        ));
        // Chunk b sees the same geometry expressed through gt: scaled depths and
        // the rigid part of the mapped poses.
        let poses = cam
            .iter()
            .map(|p| {
                let m = gt.compose(p);
                Sim3::rigid(*m.rotation(), *m.translation())
            })
            .collect();
        let b = toy_chunk(1, &[4, 5], poses, gt.scale());
        let reference = a.intrinsics[0];
        let report = align_adjacent(&a, &b, &reference, &AlignParams::default()).unwrap();
        assert!(report.transform.max_abs_diff(&gt) < 1e-6);
        assert_eq!(report.n_points, 2 * 32 * 24);
        assert!(report.rms_residual < 1e-9);

        let same = align_adjacent(&a, &a, &reference, &AlignParams::default()).unwrap();
        assert!(same.transform.max_abs_diff(&Sim3::identity()) < 1e-12);
        assert!(same.rms_residual < 1e-12);
    }

    #[test]
    fn align_errors() {
        let id = vec![Sim3::identity(); 2];
        let a = toy_chunk(0, &[0, 1], id.clone(), 1.0);
        let far = toy_chunk(1, &[7, 8], id.clone(), 1.0);
        let k = a.intrinsics[0];
        assert_eq!(
            align_adjacent(&a, &far, &k, &AlignParams::default()),
            Err(AlignError::NoOverlap { a: 0, b: 1 })
        );
        let mut noisy = a.clone();
        noisy.chunk_id = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        noisy.depths = noisy
            .depths
            .iter()
            .map(|d| {
                let v = d.depth().iter().map(|z| z + 0.01 * rng.random::<f64>()).collect();
                DepthMap::from_depth(32, 24, v).unwrap()
            })
            .collect();
        let params = AlignParams {
            lambda_d: 0.0,
            ..AlignParams::default()
        };
        assert!(matches!(
            align_adjacent(&a, &noisy, &k, &params),
            Err(AlignError::InsufficientReliablePoints { found: 0, .. })
        ));
    }

    #[test]
    fn subsampling_is_seeded_and_capped() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts = random_points(&mut rng, 1000);
        let (a, _) = subsample(pts.clone(), pts.clone(), 100, 3);
        let (b, _) = subsample(pts.clone(), pts.clone(), 100, 3);
        assert_eq!(a.len(), 100);
        assert_eq!(a, b);
        let (c, _) = subsample(pts.clone(), pts, 2000, 3);
        assert_eq!(c.len(), 1000);
    }
}
