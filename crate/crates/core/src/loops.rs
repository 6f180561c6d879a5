//! Training-free loop detection: patch tokens are pooled into per-frame
//! descriptors, power-normalized, PCA-whitened with the dominant directions
//! removed, and compared by cosine similarity.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::sim3::Sim3;

const NORM_FLOOR: f64 = 1e-12;

/// Eigenvalues at or below this are treated as absent rather than amplified.
pub const EIGENVALUE_FLOOR: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LoopError {
    #[error("token row {row} has zero norm")]
    ZeroToken { row: usize },
    #[error("descriptor is the zero vector")]
    ZeroVector,
    #[error("{frames} frames are too few to fit {required_dims} whitened dimensions")]
    TooFewFrames { frames: usize, required_dims: usize },
    #[error("only {available} usable principal directions, {requested} requested")]
    RankDeficient { available: usize, requested: usize },
    #[error("descriptor coincides with the scene mean")]
    ZeroProjection,
    #[error("invalid patch tokens: {0}")]
    InvalidTokens(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// K×d encoder patch tokens of one frame, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTokens {
    n_tokens: usize,
    dim: usize,
    data: Vec<f64>,
}

impl PatchTokens {
    pub fn new(n_tokens: usize, dim: usize, data: Vec<f64>) -> Result<Self, LoopError> {
        if n_tokens == 0 || dim == 0 {
            return Err(LoopError::InvalidTokens(format!("shape {n_tokens}x{dim}")));
        }
        if data.len() != n_tokens * dim {
            return Err(LoopError::InvalidTokens(format!(
                "{} values for shape {n_tokens}x{dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LoopError::InvalidTokens("non-finite entry".into()));
        }
        Ok(Self {
            n_tokens,
            dim,
            data,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }
}

/// Mean of the ℓ2-normalized token rows.
pub fn pool_tokens(x: &PatchTokens) -> Result<DVector<f64>, LoopError> {
    let mut acc = DVector::zeros(x.dim);
    for k in 0..x.n_tokens {
        let row = x.row(k);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < NORM_FLOOR {
            return Err(LoopError::ZeroToken { row: k });
        }
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v / norm;
        }
    }
    Ok(acc / x.n_tokens as f64)
}

fn unit(v: DVector<f64>) -> Result<DVector<f64>, LoopError> {
    let norm = v.norm();
    if norm < NORM_FLOOR || !norm.is_finite() {
        return Err(LoopError::ZeroVector);
    }
    Ok(v / norm)
}

/// Elementwise `sign(g)|g|^beta`, then ℓ2-normalized.
pub fn signed_power(g: &DVector<f64>, beta: f64) -> Result<DVector<f64>, LoopError> {
    unit(g.map(|v| v.signum() * v.abs().powf(beta)))
}

/// Unit-norm per-frame retrieval vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor(DVector<f64>);

impl GlobalDescriptor {
    /// Normalizes `v` to unit length.
    pub fn from_vector(v: DVector<f64>) -> Result<Self, LoopError> {
        unit(v).map(Self)
    }

    pub fn vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// PCA whitening with the `removed_components` strongest directions dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningModel {
    pub mean: DVector<f64>,
    /// d×d′, columns are eigenvectors scaled by the inverse root eigenvalue.
    pub projection: DMatrix<f64>,
    pub removed_components: usize,
    /// Eigenvalues of the retained directions, descending.
    pub eigenvalues: Vec<f64>,
}

impl WhiteningModel {
    pub fn input_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.projection.ncols()
    }

    /// Centered projection before the final normalization.
    pub fn project(&self, g: &DVector<f64>) -> Result<DVector<f64>, LoopError> {
        if g.len() != self.input_dim() {
            return Err(LoopError::DimensionMismatch {
                expected: self.input_dim(),
                got: g.len(),
            });
        }
        Ok(self.projection.tr_mul(&(g - &self.mean)))
    }
}

/// Eigenpairs of the covariance of the centered rows, sorted by descending
/// eigenvalue. Returns the mean alongside.
fn covariance_eigen(rows: &DMatrix<f64>) -> (DVector<f64>, Vec<f64>, DMatrix<f64>) {
    let n = rows.nrows() as f64;
    let mean = rows.row_mean().transpose();
    let mut centered = rows.clone();
    for mut r in centered.row_iter_mut() {
        r -= mean.transpose();
    }
    let cov = centered.tr_mul(&centered) / n;
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    let values = order.iter().map(|i| eig.eigenvalues[*i]).collect();
    let vectors = DMatrix::from_columns(
        &order
            .iter()
            .map(|i| eig.eigenvectors.column(*i).into_owned())
            .collect::<Vec<_>>(),
    );
    (mean, values, vectors)
}

/// Fits the whitening on N×d descriptor rows.
pub fn fit_whitening(
    descriptors: &DMatrix<f64>,
    removed: usize,
    d_out: usize,
) -> Result<WhiteningModel, LoopError> {
    let (n, d) = descriptors.shape();
    if n < d_out + removed + 1 {
        return Err(LoopError::TooFewFrames {
            frames: n,
            required_dims: d_out + removed,
        });
    }
    let (mean, values, vectors) = covariance_eigen(descriptors);
    let available = values
        .iter()
        .skip(removed)
        .take_while(|v| **v > EIGENVALUE_FLOOR)
        .count();
    if d_out == 0 || available < d_out || removed + d_out > d {
        return Err(LoopError::RankDeficient {
            available,
            requested: d_out,
        });
    }
    let kept = &values[removed..removed + d_out];
    let mut projection = vectors.columns(removed, d_out).into_owned();
    for (mut col, lambda) in projection.column_iter_mut().zip(kept) {
        col /= lambda.sqrt();
    }
    Ok(WhiteningModel {
        mean,
        projection,
        removed_components: removed,
        eigenvalues: kept.to_vec(),
    })
}

pub fn apply_whitening(g: &DVector<f64>, m: &WhiteningModel) -> Result<GlobalDescriptor, LoopError> {
    let z = m.project(g)?;
    if z.norm() < NORM_FLOOR {
        return Err(LoopError::ZeroProjection);
    }
    GlobalDescriptor::from_vector(z)
}

/// Pairwise cosine similarities of unit descriptors, clamped to [-1, 1] with
/// an exact unit diagonal.
pub fn similarity_matrix(z: &[GlobalDescriptor]) -> DMatrix<f64> {
    let n = z.len();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let stacked = DMatrix::from_columns(&z.iter().map(|g| g.0.clone()).collect::<Vec<_>>());
    let mut sim = stacked.tr_mul(&stacked);
    for i in 0..n {
        for j in 0..n {
            sim[(i, j)] = if i == j {
                1.0
            } else {
                sim[(i, j)].clamp(-1.0, 1.0)
            };
        }
    }
    // Force exact symmetry against accumulation-order differences.
    for i in 0..n {
        for j in i + 1..n {
            sim[(j, i)] = sim[(i, j)];
        }
    }
    sim
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopCandidate {
    pub frame_i: usize,
    pub frame_j: usize,
    pub similarity: f64,
}

/// Retrieval thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionParams {
    pub threshold: f64,
    pub min_frame_gap: usize,
    pub nms_radius: usize,
}

impl Default for DetectionParams {
    fn default() -> Self {
        Self {
            threshold: 0.65,
            min_frame_gap: 150,
            nms_radius: 25,
        }
    }
}

/// Loop pairs from a similarity matrix whose row `k` belongs to frame `k`.
pub fn detect_loops(
    sim: &DMatrix<f64>,
    threshold: f64,
    min_frame_gap: usize,
    nms_radius: usize,
) -> Vec<LoopCandidate> {
    let ids: Vec<usize> = (0..sim.nrows()).collect();
    detect_loops_indexed(
        sim,
        &ids,
        &DetectionParams {
            threshold,
            min_frame_gap,
            nms_radius,
        },
    )
}

/// As [`detect_loops`], where row `k` of `sim` belongs to `frame_ids[k]`.
/// Gap and suppression distances are measured in frame ids.
pub fn detect_loops_indexed(
    sim: &DMatrix<f64>,
    frame_ids: &[usize],
    params: &DetectionParams,
) -> Vec<LoopCandidate> {
    let n = sim.nrows().min(frame_ids.len());
    let mut raw = Vec::new();
    for a in 0..n {
        for b in 0..n {
            let (i, j) = (frame_ids[a], frame_ids[b]);
            let s = sim[(a, b)];
            if i < j && j - i >= params.min_frame_gap && s > params.threshold {
                raw.push(LoopCandidate {
                    frame_i: i,
                    frame_j: j,
                    similarity: s,
                });
            }
        }
    }
    raw.sort_by(|x, y| {
        y.similarity
            .total_cmp(&x.similarity)
            .then(x.frame_i.cmp(&y.frame_i))
            .then(x.frame_j.cmp(&y.frame_j))
    });
    let mut kept: Vec<LoopCandidate> = Vec::new();
    for c in raw {
        let suppressed = kept.iter().any(|k| {
            k.frame_i.abs_diff(c.frame_i) <= params.nms_radius
                && k.frame_j.abs_diff(c.frame_j) <= params.nms_radius
        });
        if !suppressed {
            kept.push(c);
        }
    }
    kept
}

/// Window of `len` frames centered on `center`, shifted to fit in `[0, n)`.
fn centered_window(center: usize, len: usize, n: usize) -> std::ops::Range<usize> {
    let len = len.min(n);
    let start = center.saturating_sub(len / 2).min(n - len);
    start..start + len
}

/// Frame ids of a loop-centric batch: a window around `i` followed by a
/// window around `j`, duplicates removed with first occurrence kept.
pub fn build_loop_batch(i: usize, j: usize, loop_chunk_size: usize, n_frames: usize) -> Vec<usize> {
    let first = loop_chunk_size.div_ceil(2);
    let second = loop_chunk_size / 2;
    let mut out: Vec<usize> = centered_window(i, first, n_frames).collect();
    for f in centered_window(j, second, n_frames) {
        if !out.contains(&f) {
            out.push(f);
        }
    }
    out
}

/// Loop-closing transform from chunk `i` to chunk `j`, given the maps of the
/// loop chunk into each of them.
pub fn loop_sim3(s_i_loop: &Sim3, s_j_loop: &Sim3) -> Sim3 {
    s_j_loop.compose(&s_i_loop.inverse())
}

/// Descriptor settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescriptorParams {
    pub beta: f64,
    pub removed_components: usize,
    pub d_out: usize,
}

impl Default for DescriptorParams {
    fn default() -> Self {
        Self {
            beta: 0.5,
            removed_components: 1,
            d_out: 512,
        }
    }
}

/// Whitened descriptors for a sequence. `None` marks frames that project
/// onto the scene mean and are skipped for retrieval.
#[derive(Debug, Clone)]
pub struct DescriptorSet {
    pub model: WhiteningModel,
    pub descriptors: Vec<Option<GlobalDescriptor>>,
}

/// Pooled, power-normalized descriptors for each frame (before whitening).
pub fn power_descriptors(
    tokens: &[PatchTokens],
    beta: f64,
) -> Result<Vec<DVector<f64>>, LoopError> {
    tokens
        .par_iter()
        .map(|t| signed_power(&pool_tokens(t)?, beta))
        .collect()
}

/// Baseline descriptors: pooled tokens, ℓ2-normalized, nothing else.
pub fn naive_descriptors(tokens: &[PatchTokens]) -> Result<Vec<GlobalDescriptor>, LoopError> {
    tokens
        .par_iter()
        .map(|t| GlobalDescriptor::from_vector(pool_tokens(t)?))
        .collect()
}

/// Full descriptor pipeline. The output dimension is reduced to what the data
/// supports when fewer directions are available than requested.
pub fn compute_descriptors(
    tokens: &[PatchTokens],
    params: &DescriptorParams,
) -> Result<DescriptorSet, LoopError> {
    let g = power_descriptors(tokens, params.beta)?;
    let d = g.first().map_or(0, |v| v.len());
    if let Some(bad) = g.iter().find(|v| v.len() != d) {
        return Err(LoopError::DimensionMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    let n = g.len();
    let r = params.removed_components;
    let cap = d.saturating_sub(r).min(n.saturating_sub(r + 1));
    let mut d_out = params.d_out.min(cap);
    if d_out < params.d_out {
        log::info!("whitening output reduced from {} to {d_out} dimensions", params.d_out);
    }
    let rows = DMatrix::from_fn(n, d, |i, k| g[i][k]);
    let model = loop {
        match fit_whitening(&rows, r, d_out) {
            Ok(m) => break m,
            Err(LoopError::RankDeficient { available, .. }) if available > 0 && available < d_out => {
                log::info!("whitening output reduced from {d_out} to {available} usable dimensions");
                d_out = available;
            }
            Err(e) => return Err(e),
        }
    };
    let descriptors = g
        .par_iter()
        .map(|v| match apply_whitening(v, &model) {
            Ok(z) => Ok(Some(z)),
            Err(LoopError::ZeroProjection) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DescriptorSet { model, descriptors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn tokens(rows: &[&[f64]]) -> PatchTokens {
        let d = rows[0].len();
        PatchTokens::new(rows.len(), d, rows.concat()).unwrap()
    }

    #[test]
    fn pool_examples() {
        let g = pool_tokens(&tokens(&[&[3.0, 4.0]])).unwrap();
        assert_relative_eq!(g, DVector::from_vec(vec![0.6, 0.8]), epsilon = 1e-15);
        let g3 = pool_tokens(&tokens(&[&[3.0, 4.0], &[3.0, 4.0], &[3.0, 4.0]])).unwrap();
        assert_relative_eq!(g3, g, epsilon = 1e-15);
        let e = pool_tokens(&tokens(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert_eq!(e, DVector::from_vec(vec![0.5, 0.5]));
        assert_eq!(
            pool_tokens(&tokens(&[&[1.0, 0.0], &[0.0, 0.0]])),
            Err(LoopError::ZeroToken { row: 1 })
        );
    }

    #[test]
    fn signed_power_examples() {
        let v = signed_power(&DVector::from_vec(vec![0.25, -0.09]), 0.5).unwrap();
        let raw = DVector::from_vec(vec![0.5, -0.3]);
        assert_relative_eq!(v, &raw / raw.norm(), epsilon = 1e-15);
        assert_eq!(signed_power(&DVector::zeros(3), 0.5), Err(LoopError::ZeroVector));
    }

    /// Cyclic Jacobi eigenvalue iteration, independent of nalgebra's solver.
    fn jacobi_eigenvalues(mut a: DMatrix<f64>) -> Vec<f64> {
        let n = a.nrows();
        for _ in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |j| *j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[(i, j)].powi(2))
                .sum();
            if off < 1e-28 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    let mut rot = DMatrix::identity(n, n);
                    rot[(p, p)] = c;
                    rot[(q, q)] = c;
                    rot[(p, q)] = s;
                    rot[(q, p)] = -s;
                    a = rot.transpose() * &a * &rot;
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
        ev.sort_by(|x, y| y.total_cmp(x));
        ev
    }

    fn gaussian_rows(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn whitening_isotropic_rows() {
        let rows = gaussian_rows(50, 8, 3);
        let m = fit_whitening(&rows, 0, 8).unwrap();
        let mean = rows.row_mean().transpose();
        let centered = DMatrix::from_fn(50, 8, |i, k| rows[(i, k)] - mean[k]);
        let oracle = jacobi_eigenvalues(centered.tr_mul(&centered) / 50.0);
        for (a, b) in m.eigenvalues.iter().zip(&oracle) {
            assert_relative_eq!(*a, *b, max_relative = 1e-9);
        }
        let z = &centered * &m.projection;
        let cov = z.tr_mul(&z) / 50.0;
        assert_relative_eq!(cov, DMatrix::identity(8, 8), epsilon = 1e-9);
    }

    #[test]
    fn whitening_removes_dominant_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = DVector::from_fn(6, |k, _| (k as f64 + 1.0).sin());
        let mut rows = DMatrix::zeros(40, 6);
        for i in 0..40 {
            let a: f64 = 1.0 + 3.0 * rng.random::<f64>();
            for k in 0..6 {
                rows[(i, k)] = a * c[k] + 0.01 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let m = fit_whitening(&rows, 1, 4).unwrap();
        // Orthonormal basis of the kept subspace.
        let q = &m.projection
            * DMatrix::from_diagonal(&DVector::from_iterator(
                4,
                m.eigenvalues.iter().map(|l| l.sqrt()),
            ));
        let c_unit = &c / c.norm();
        let leak = q.tr_mul(&c_unit).norm();
        assert!(leak < 1e-2, "{leak}");
        let r = fit_whitening(&rows, 0, 4).unwrap();
        let top = r.projection.column(0) * r.eigenvalues[0].sqrt();
        assert!(top.dot(&c_unit).abs() > 0.999);
    }

    #[test]
    fn whitening_errors() {
        let same = DMatrix::from_fn(10, 4, |_, k| k as f64);
        assert!(matches!(
            fit_whitening(&same, 0, 2),
            Err(LoopError::RankDeficient { available: 0, .. })
        ));
        let rows = gaussian_rows(4, 8, 1);
        assert!(matches!(fit_whitening(&rows, 1, 3), Err(LoopError::TooFewFrames { .. })));
    }

    #[test]
    fn apply_whitening_examples() {
        let rows = gaussian_rows(30, 8, 5);
        let m = fit_whitening(&rows, 0, 4).unwrap();
        assert_eq!(apply_whitening(&m.mean, &m), Err(LoopError::ZeroProjection));
        for k in 0..4 {
            let q_k = m.projection.column(k) * m.eigenvalues[k].sqrt();
            for alpha in [0.1, 1.0, 7.5] {
                let g = &m.mean + &q_k * alpha;
                let z = apply_whitening(&g, &m).unwrap();
                let mut e = DVector::zeros(4);
                e[k] = 1.0;
                assert_relative_eq!(z.vector(), &e, epsilon = 1e-9);
            }
        }
        let off = DVector::from_fn(8, |k, _| (k as f64).cos());
        let a = apply_whitening(&(&m.mean + &off), &m).unwrap();
        let b = apply_whitening(&(&m.mean + &off * 3.0), &m).unwrap();
        assert_relative_eq!(a.vector(), b.vector(), epsilon = 1e-12);
    }

    #[test]
    fn whitening_centers_training_set() {
        let rows = gaussian_rows(60, 10, 9);
        let m = fit_whitening(&rows, 1, 6).unwrap();
        let mut acc = DVector::zeros(6);
        for r in rows.row_iter() {
            acc += m.project(&r.transpose()).unwrap();
        }
        assert!((acc / 60.0).norm() < 1e-8);
    }

    #[test]
    fn similarity_examples() {
        let e = |k: usize| {
            let mut v = DVector::zeros(3);
            v[k] = 1.0;
            GlobalDescriptor::from_vector(v).unwrap()
        };
        assert_eq!(similarity_matrix(&[e(0), e(1), e(2)]), DMatrix::identity(3, 3));
        let s = similarity_matrix(&[e(0), e(1), e(0)]);
        assert_eq!(s[(0, 2)], 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z: Vec<_> = (0..20)
            .map(|_| {
                GlobalDescriptor::from_vector(DVector::from_fn(5, |_, _| {
                    rng.sample::<f64, _>(StandardNormal)
                }))
                .unwrap()
            })
            .collect();
        let s = similarity_matrix(&z);
        for i in 0..20 {
            for j in 0..20 {
                let brute: f64 = if i == j {
                    1.0
                } else {
                    (0..5).map(|k| z[i].vector()[k] * z[j].vector()[k]).sum()
                };
                assert!((s[(i, j)] - brute).abs() < 1e-12);
                assert_eq!(s[(i, j)], s[(j, i)]);
            }
        }
    }

    fn sparse_sim(n: usize, entries: &[(usize, usize, f64)]) -> DMatrix<f64> {
        let mut s = DMatrix::identity(n, n);
        for (i, j, v) in entries {
            s[(*i, *j)] = *v;
            s[(*j, *i)] = *v;
        }
        s
    }

    #[test]
    fn detect_loops_examples() {
        let s = sparse_sim(400, &[(10, 300, 0.9)]);
        assert_eq!(
            detect_loops(&s, 0.65, 150, 25),
            vec![LoopCandidate {
                frame_i: 10,
                frame_j: 300,
                similarity: 0.9
            }]
        );
        assert!(detect_loops(&sparse_sim(400, &[(10, 300, 0.5)]), 0.65, 150, 25).is_empty());
        assert!(detect_loops(&sparse_sim(400, &[(10, 100, 0.9)]), 0.65, 150, 25).is_empty());
        let s = sparse_sim(600, &[(100, 500, 0.95), (101, 502, 0.90)]);
        let found = detect_loops(&s, 0.65, 150, 5);
        assert_eq!(found.len(), 1);
        assert_eq!((found[0].frame_i, found[0].frame_j), (100, 500));
    }

    /// Oracle: repeatedly take the best remaining pair, then delete every pair
    /// within the suppression window.
    fn nms_oracle(s: &DMatrix<f64>, thr: f64, gap: usize, radius: usize) -> Vec<(usize, usize)> {
        let n = s.nrows();
        let mut pool: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|(i, j)| j - i >= gap && s[(*i, *j)] > thr)
            .collect();
        let mut out = Vec::new();
        while !pool.is_empty() {
            let best = *pool
                .iter()
                .max_by(|a, b| {
                    s[**a]
                        .total_cmp(&s[**b])
                        .then(b.0.cmp(&a.0))
                        .then(b.1.cmp(&a.1))
                })
                .unwrap();
            out.push(best);
            pool.retain(|p| !(p.0.abs_diff(best.0) <= radius && p.1.abs_diff(best.1) <= radius));
        }
        out
    }

    proptest! {
        #[test]
        fn detect_loops_matches_greedy_oracle(
            seed in 0u64..1000,
            radius in 0usize..4,
            gap in 1usize..6,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 24;
            let mut s = DMatrix::identity(n, n);
            for i in 0..n {
                for j in i + 1..n {
                    // Quantized values produce ties that exercise the order rule.
                    let v = (rng.random_range(0..20) as f64) / 20.0;
                    s[(i, j)] = v;
                    s[(j, i)] = v;
                }
            }
            let got: Vec<_> = detect_loops(&s, 0.7, gap, radius)
                .iter()
                .map(|c| (c.frame_i, c.frame_j))
                .collect();
            prop_assert_eq!(got, nms_oracle(&s, 0.7, gap, radius));
        }

        #[test]
        fn descriptor_is_scale_invariant(seed in 0u64..200, alpha in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames: Vec<PatchTokens> = (0..12)
                .map(|_| {
                    let data = (0..4 * 6).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                    PatchTokens::new(4, 6, data).unwrap()
                })
                .collect();
            let mut scaled = frames.clone();
            scaled[3] = PatchTokens::new(4, 6, frames[3].data().iter().map(|v| v * alpha).collect()).unwrap();
            let params = DescriptorParams { beta: 0.5, removed_components: 1, d_out: 4 };
            let a = compute_descriptors(&frames, &params).unwrap();
            let b = compute_descriptors(&scaled, &params).unwrap();
            let (za, zb) = (a.descriptors[3].as_ref().unwrap(), b.descriptors[3].as_ref().unwrap());
            prop_assert!((za.vector() - zb.vector()).norm() < 1e-9);
        }
    }

    #[test]
    fn loop_batch_examples() {
        let b = build_loop_batch(100, 500, 40, 1000);
        assert_eq!(b.len(), 40);
        assert_eq!(b[..20], (90..110).collect::<Vec<_>>()[..]);
        assert_eq!(b[20..], (490..510).collect::<Vec<_>>()[..]);

        let b = build_loop_batch(3, 500, 40, 1000);
        assert_eq!(b[..20], (0..20).collect::<Vec<_>>()[..]);
        assert_eq!(b.len(), 40);

        let b = build_loop_batch(995, 10, 40, 1000);
        assert_eq!(b[..20], (980..1000).collect::<Vec<_>>()[..]);

        let b = build_loop_batch(100, 110, 40, 1000);
        assert_eq!(b, (90..120).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn loop_batch_windows(i in 0usize..300, j in 0usize..300, size in 2usize..60) {
            prop_assume!(i != j);
            let n = 300;
            let b = build_loop_batch(i, j, size, n);
            prop_assert!(b.len() <= size);
            prop_assert!(b.iter().all(|f| *f < n));
            prop_assert!(b.contains(&i) && b.contains(&j));
            let mut sorted = b.clone();
            sorted.sort_unstable();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), b.len());
        }
    }

    #[test]
    fn loop_sim3_examples() {
        use crate::sim3::Sim3Tangent;
        use nalgebra::Vector3;
        let a = Sim3::exp(&Sim3Tangent::new(
            Vector3::new(0.3, -1.0, 2.0),
            Vector3::new(0.2, 0.4, -0.1),
            0.3,
        ));
        let b = Sim3::exp(&Sim3Tangent::new(
            Vector3::new(-0.5, 0.1, 0.0),
            Vector3::new(-0.7, 0.1, 0.5),
            -0.2,
        ));
        assert!(loop_sim3(&Sim3::identity(), &b).max_abs_diff(&b) < 1e-15);
        assert!(loop_sim3(&a, &a).max_abs_diff(&Sim3::identity()) < 1e-12);
        let oracle = b.to_homogeneous() * a.to_homogeneous().try_inverse().unwrap();
        let got = loop_sim3(&a, &b).to_homogeneous();
        assert!((got - oracle).abs().max() < 1e-12);
    }
}
