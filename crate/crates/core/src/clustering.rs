//! K-means++ seeding and Lloyd iterations.
//!
//! Clustering uses squared Euclidean distance throughout. The resulting
//! per-cluster counts define the column marginal of the transport problem.

use crate::error::{Error, Result};
use crate::numerics::{squared_distance, MassDistribution, Matrix, RngState};

pub const DEFAULT_MAX_ITERS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    /// One centroid per row.
    pub centroids: Matrix,
    /// Cluster index of each input point.
    pub assignment: Vec<usize>,
    pub counts: Vec<usize>,
    pub mass: MassDistribution,
    /// Sum of squared distances of points to their assigned centroid.
    pub inertia: f64,
    /// Inertia after each assignment step, in order.
    pub inertia_history: Vec<f64>,
}

/// D^2 seeding. The first centroid is uniform over the points; each later one
/// is drawn with probability proportional to the squared distance to the
/// nearest centroid chosen so far. If every point already coincides with a
/// centroid the draw falls back to uniform.
pub fn kmeans_pp_init(points: &Matrix, k: usize, rng: &mut RngState) -> Result<Matrix> {
    if points.rows() == 0 {
        return Err(Error::EmptyInput("no points to cluster"));
    }
    if k == 0 {
        return Err(Error::EmptyInput("k must be at least 1"));
    }
    let m = points.rows();
    let mut centroids = Matrix::zeros(0, 0);
    let first = rng.below(m);
    centroids.push_row(points.row(first))?;
    let mut nearest: Vec<f64> = points
        .iter_rows()
        .map(|p| squared_distance(p, points.row(first)))
        .collect();

    while centroids.rows() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &d) in nearest.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    chosen = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` just above the final partial sum.
            chosen.unwrap_or_else(|| nearest.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            rng.below(m)
        };
        centroids.push_row(points.row(pick))?;
        let c = centroids.row(centroids.rows() - 1).to_vec();
        for (d, p) in nearest.iter_mut().zip(points.iter_rows()) {
            *d = d.min(squared_distance(p, &c));
        }
    }
    Ok(centroids)
}

/// Nearest centroid per point (lowest index wins ties) and the total inertia.
fn assign(points: &Matrix, centroids: &Matrix, out: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (slot, p) in out.iter_mut().zip(points.iter_rows()) {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, c) in centroids.iter_rows().enumerate() {
            let d = squared_distance(p, c);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        *slot = best;
        inertia += best_d;
    }
    inertia
}

/// Recomputes every centroid as the mean of its members, reseeding empty
/// clusters to the point farthest from its own centroid. May move points
/// between clusters (only when reseeding). Accumulation order is the point
/// order, so the result is deterministic.
fn update_centroids(points: &Matrix, centroids: &mut Matrix, assignment: &mut [usize]) {
    let k = centroids.rows();
    let d = points.cols();
    let recompute = |centroids: &mut Matrix, assignment: &[usize], only: Option<usize>| {
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter_rows().zip(assignment.iter()) {
            if only.is_some_and(|o| o != a) {
                continue;
            }
            counts[a] += 1;
            for (s, v) in sums.row_mut(a).iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if only.is_some_and(|o| o != j) || counts[j] == 0 {
                continue;
            }
            let inv = counts[j] as f64;
            for (c, s) in centroids.row_mut(j).iter_mut().zip(sums.row(j)) {
                *c = s / inv;
            }
        }
        counts
    };

    let mut counts = recompute(centroids, assignment, None);
    let mut taken = vec![false; points.rows()];
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        let mut far = None;
        let mut far_d = -1.0;
        for (i, p) in points.iter_rows().enumerate() {
            if taken[i] || counts[assignment[i]] <= 1 {
                continue;
            }
            let dist = squared_distance(p, centroids.row(assignment[i]));
            if dist > far_d {
                far_d = dist;
                far = Some(i);
            }
        }
        let Some(i) = far else { continue };
        taken[i] = true;
        let old = assignment[i];
        assignment[i] = j;
        counts[old] -= 1;
        counts[j] = 1;
        centroids.row_mut(j).copy_from_slice(points.row(i));
        recompute(centroids, assignment, Some(old));
    }
}

fn inertia_of(points: &Matrix, centroids: &Matrix, assignment: &[usize]) -> f64 {
    points
        .iter_rows()
        .zip(assignment)
        .map(|(p, &a)| squared_distance(p, centroids.row(a)))
        .sum()
}

/// K-means++ seeding followed by Lloyd iterations until the assignment is
/// stable or `max_iters` updates have run.
pub fn kmeans(
    points: &Matrix,
    k: usize,
    max_iters: usize,
    rng: &mut RngState,
) -> Result<ClusterResult> {
    let mut centroids = kmeans_pp_init(points, k, rng)?;
    let m = points.rows();
    let mut assignment = vec![0usize; m];
    let mut next = vec![0usize; m];
    let mut history = vec![assign(points, &centroids, &mut assignment)];

    for _ in 0..max_iters {
        update_centroids(points, &mut centroids, &mut assignment);
        history.push(assign(points, &centroids, &mut next));
        if next == assignment {
            break;
        }
        std::mem::swap(&mut assignment, &mut next);
    }
    // Leave the centroids as exact means of the returned assignment.
    update_centroids(points, &mut centroids, &mut assignment);

    let mut counts = vec![0usize; k];
    for &a in &assignment {
        counts[a] += 1;
    }
    let mass = cluster_mass(&counts)?;
    let inertia = inertia_of(points, &centroids, &assignment);
    Ok(ClusterResult {
        centroids,
        assignment,
        counts,
        mass,
        inertia,
        inertia_history: history,
    })
}

/// `c_k = counts[k] / sum(counts)`.
pub fn cluster_mass(counts: &[usize]) -> Result<MassDistribution> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::AllEmpty);
    }
    let weights = counts
        .iter()
        .map(|&c| c as f64 / total as f64)
        .collect();
    MassDistribution::new(weights)
}
