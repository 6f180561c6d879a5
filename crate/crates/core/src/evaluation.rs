//! Trajectory and point-cloud error metrics.

use kiddo::immutable::float::kdtree::ImmutableKdTree;
use kiddo::SquaredEuclidean;
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::sim3::{Rotation3, Sim3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("only {found} frames in common, at least 3 required")]
    TooFewCommonFrames { found: usize },
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
}

/// Per-frame camera-to-world poses.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEstimate {
    frame_ids: Vec<usize>,
    positions: Vec<Vector3<f64>>,
    rotations: Vec<Rotation3>,
}

impl TrajectoryEstimate {
    pub fn new(
        frame_ids: Vec<usize>,
        positions: Vec<Vector3<f64>>,
        rotations: Vec<Rotation3>,
    ) -> Result<Self, EvalError> {
        if frame_ids.len() != positions.len() || frame_ids.len() != rotations.len() {
            return Err(EvalError::InvalidTrajectory(format!(
                "{} ids, {} positions, {} rotations",
                frame_ids.len(),
                positions.len(),
                rotations.len()
            )));
        }
        if frame_ids.windows(2).any(|w| w[1] <= w[0]) {
            return Err(EvalError::InvalidTrajectory(
                "frame ids must be strictly increasing".into(),
            ));
        }
        if positions.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(EvalError::InvalidTrajectory("non-finite position".into()));
        }
        Ok(Self {
            frame_ids,
            positions,
            rotations,
        })
    }

    /// Builds from poses; any scale in a pose is dropped.
    pub fn from_poses(frame_ids: Vec<usize>, poses: &[Sim3]) -> Result<Self, EvalError> {
        Self::new(
            frame_ids,
            poses.iter().map(|p| *p.translation()).collect(),
            poses.iter().map(|p| *p.rotation()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_ids.is_empty()
    }

    pub fn frame_ids(&self) -> &[usize] {
        &self.frame_ids
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.positions
    }

    pub fn rotations(&self) -> &[Rotation3] {
        &self.rotations
    }

    pub fn pose(&self, k: usize) -> Sim3 {
        Sim3::rigid(self.rotations[k], self.positions[k])
    }

    /// Applies `s` to every pose (positions move with scale, rotations rotate).
    pub fn transformed(&self, s: &Sim3) -> TrajectoryEstimate {
        TrajectoryEstimate {
            frame_ids: self.frame_ids.clone(),
            positions: self.positions.iter().map(|p| s.apply(p)).collect(),
            rotations: self.rotations.iter().map(|r| s.rotation().compose(r)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignmentMode {
    Se3,
    Sim3,
}

/// Least-squares similarity (or rigid motion) taking `src` onto `dst`.
///
/// Unlike the chunk aligner this accepts degenerate layouts such as straight
/// trajectories: directions without spread are left unconstrained.
pub fn fit_positions(src: &[Vector3<f64>], dst: &[Vector3<f64>], with_scale: bool) -> Sim3 {
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut var_s = 0.0;
    let mut cov = Matrix3::zeros();
    for (p, q) in src.iter().zip(dst) {
        let (a, b) = (p - mu_s, q - mu_d);
        var_s += a.norm_squared();
        cov += b * a.transpose();
    }
    var_s /= n;
    cov /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = svd.singular_values;
    let smallest = (0..3).min_by(|a, b| d[*a].total_cmp(&d[*b])).unwrap();
    let mut sign = Vector3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        sign[smallest] = -1.0;
    }
    let rotation = if d.max() > 0.0 {
        Rotation3::from_matrix_projected(u * Matrix3::from_diagonal(&sign) * v_t, 1e-6)
            .unwrap_or_else(|_| Rotation3::identity())
    } else {
        Rotation3::identity()
    };
    let scale = if with_scale && var_s > 0.0 {
        let s = d.component_mul(&sign).sum() / var_s;
        if s > 0.0 {
            s
        } else {
            1.0
        }
    } else {
        1.0
    };
    let translation = mu_d - scale * rotation.rotate(&mu_s);
    Sim3::new(scale, rotation, translation).unwrap_or_else(|_| Sim3::from_translation(translation))
}

/// Positions of frames present in both trajectories, in frame-id order.
pub fn associate(
    est: &TrajectoryEstimate,
    gt: &TrajectoryEstimate,
) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    let (mut a, mut b) = (0, 0);
    let (mut pe, mut pg) = (Vec::new(), Vec::new());
    while a < est.len() && b < gt.len() {
        match est.frame_ids[a].cmp(&gt.frame_ids[b]) {
            std::cmp::Ordering::Less => a += 1,
            std::cmp::Ordering::Greater => b += 1,
            std::cmp::Ordering::Equal => {
                pe.push(est.positions[a]);
                pg.push(gt.positions[b]);
                a += 1;
                b += 1;
            }
        }
    }
    (pe, pg)
}

/// Translational RMSE after aligning `est` onto `gt`.
pub fn ate_rmse(
    est: &TrajectoryEstimate,
    gt: &TrajectoryEstimate,
    mode: AlignmentMode,
) -> Result<f64, EvalError> {
    let (pe, pg) = associate(est, gt);
    if pe.len() < 3 {
        return Err(EvalError::TooFewCommonFrames { found: pe.len() });
    }
    let s = fit_positions(&pe, &pg, mode == AlignmentMode::Sim3);
    let sum: f64 = pe
        .iter()
        .zip(&pg)
        .map(|(p, q)| (s.apply(p) - q).norm_squared())
        .sum();
    Ok((sum / pe.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudMetrics {
    pub accuracy: f64,
    pub completeness: f64,
    pub chamfer: f64,
}

/// Mean nearest-neighbor distance from each query point to `target`.
fn mean_nearest_distance(queries: &[Vector3<f64>], target: &[Vector3<f64>]) -> f64 {
    let coords: Vec<[f64; 3]> = target.iter().map(|p| [p.x, p.y, p.z]).collect();
    let tree: ImmutableKdTree<f64, u64, 3, 32> = ImmutableKdTree::new_from_slice(&coords);
    let dists: Vec<f64> = queries
        .par_iter()
        .map(|q| {
            let nn = tree.nearest_one::<SquaredEuclidean>(&[q.x, q.y, q.z]);
            // Recompute so the value matches a direct pairwise evaluation bit for bit.
            (q - target[nn.item as usize]).norm()
        })
        .collect();
    dists.iter().sum::<f64>() / queries.len() as f64
}

pub fn cloud_metrics(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<CloudMetrics, EvalError> {
    if pred.is_empty() || gt.is_empty() {
        return Err(EvalError::EmptyCloud);
    }
    let accuracy = mean_nearest_distance(pred, gt);
    let completeness = mean_nearest_distance(gt, pred);
    Ok(CloudMetrics {
        accuracy,
        completeness,
        chamfer: 0.5 * (accuracy + completeness),
    })
}
