//! Discretizing embeddings: row normalization, k-means++ with restarts,
//! and out-of-sample assignment through a frozen projection `W`.

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FmtcError, Result};

const MAX_LLOYD_ITERS: usize = 300;
const LLOYD_REL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    /// One centroid per row.
    pub centroids: DMatrix<f64>,
    pub sse: f64,
    pub restarts_used: usize,
    /// Rows that were all zero and so could not be normalized.
    pub zero_rows: Vec<usize>,
}

/// Scales every row to unit L2 norm. Zero rows stay zero and are reported.
pub fn normalize_rows(f: &DMatrix<f64>) -> (DMatrix<f64>, Vec<usize>) {
    let mut out = f.clone();
    let mut zero_rows = Vec::new();
    for i in 0..f.nrows() {
        let norm = f.row(i).norm();
        if norm > 0.0 {
            out.row_mut(i).scale_mut(1.0 / norm);
        } else {
            zero_rows.push(i);
        }
    }
    (out, zero_rows)
}

fn sq_dist(points: &DMatrix<f64>, i: usize, centroids: &DMatrix<f64>, c: usize) -> f64 {
    (0..points.ncols())
        .map(|j| {
            let d = points[(i, j)] - centroids[(c, j)];
            d * d
        })
        .sum()
}

/// Index of the nearest centroid for every row; ties go to the lower index.
pub fn nearest_centroid(points: &DMatrix<f64>, centroids: &DMatrix<f64>) -> Vec<usize> {
    (0..points.nrows())
        .map(|i| {
            let mut best = (0, f64::INFINITY);
            for c in 0..centroids.nrows() {
                let d = sq_dist(points, i, centroids, c);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best.0
        })
        .collect()
}

fn sse_of(points: &DMatrix<f64>, labels: &[usize], centroids: &DMatrix<f64>) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &c)| sq_dist(points, i, centroids, c))
        .sum()
}

fn plus_plus_init(points: &DMatrix<f64>, k: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let n = points.nrows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| {
            (0..points.ncols())
                .map(|j| (points[(i, j)] - points[(chosen[0], j)]).powi(2))
                .sum()
        })
        .collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            // every point coincides with a chosen centre
            Err(_) => {
                let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
                free[rng.random_range(0..free.len())]
            }
        };
        chosen.push(next);
        for (i, slot) in d2.iter_mut().enumerate() {
            let d: f64 = (0..points.ncols())
                .map(|j| (points[(i, j)] - points[(next, j)]).powi(2))
                .sum();
            *slot = slot.min(d);
        }
    }
    points.select_rows(chosen.iter())
}

/// Cluster means; an empty cluster takes over the point farthest from its
/// current centre (among clusters with more than one member).
fn update_centroids(points: &DMatrix<f64>, labels: &mut [usize], k: usize) -> DMatrix<f64> {
    let dim = points.ncols();
    loop {
        let mut sums = DMatrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            for j in 0..dim {
                sums[(c, j)] += points[(i, j)];
            }
        }
        for (c, &n) in counts.iter().enumerate() {
            if n > 0 {
                sums.row_mut(c).scale_mut(1.0 / n as f64);
            }
        }
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            return sums;
        };
        let donor = labels
            .iter()
            .enumerate()
            .filter(|&(_, &c)| counts[c] > 1)
            .map(|(i, &c)| (i, sq_dist(points, i, &sums, c)))
            .fold(
                (usize::MAX, -1.0),
                |best, cur| if cur.1 > best.1 { cur } else { best },
            )
            .0;
        labels[donor] = empty;
    }
}

struct LloydRun {
    labels: Vec<usize>,
    centroids: DMatrix<f64>,
    sse: f64,
    #[cfg_attr(not(test), allow(dead_code))]
    history: Vec<f64>,
}

fn lloyd(points: &DMatrix<f64>, k: usize, rng: &mut impl Rng) -> LloydRun {
    let init = plus_plus_init(points, k, rng);
    let mut labels = nearest_centroid(points, &init);
    let mut centroids = update_centroids(points, &mut labels, k);
    let mut sse = sse_of(points, &labels, &centroids);
    let mut history = vec![sse];
    for _ in 0..MAX_LLOYD_ITERS {
        if sse == 0.0 {
            break;
        }
        let mut next_labels = nearest_centroid(points, &centroids);
        let next_centroids = update_centroids(points, &mut next_labels, k);
        let next_sse = sse_of(points, &next_labels, &next_centroids);
        history.push(next_sse);
        let done = sse - next_sse <= LLOYD_REL_TOL * sse;
        labels = next_labels;
        centroids = next_centroids;
        sse = next_sse;
        if done {
            break;
        }
    }
    LloydRun {
        labels,
        centroids,
        sse,
        history,
    }
}

/// k-means on the row-normalized embedding, best of `restarts` k-means++
/// runs by SSE. Restart `r` draws from stream `r` of a ChaCha generator
/// seeded with `seed`.
pub fn assign_labels(
    f: &DMatrix<f64>,
    clusters: usize,
    restarts: usize,
    seed: u64,
) -> Result<KMeansResult> {
    let n = f.nrows();
    if clusters == 0 || clusters > n {
        return Err(FmtcError::InvalidParameter(format!(
            "clusters must be in [1, {n}], got {clusters}"
        )));
    }
    if restarts == 0 {
        return Err(FmtcError::InvalidParameter("restarts must be >= 1".into()));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(FmtcError::InvalidParameter(
            "embedding has non-finite entries".into(),
        ));
    }
    let (points, zero_rows) = normalize_rows(f);
    let mut best: Option<LloydRun> = None;
    for r in 0..restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let run = lloyd(&points, clusters, &mut rng);
        if best.as_ref().is_none_or(|b| run.sse < b.sse) {
            best = Some(run);
        }
    }
    let best = best.expect("at least one restart");
    Ok(KMeansResult {
        labels: best.labels,
        centroids: best.centroids,
        sse: best.sse,
        restarts_used: restarts,
        zero_rows,
    })
}

/// Labels unseen samples with a frozen model: `X_new W`, row-normalized,
/// then nearest centroid.
pub fn out_of_sample(
    x_new: &DMatrix<f64>,
    w: &DMatrix<f64>,
    centroids: &DMatrix<f64>,
) -> Result<Vec<usize>> {
    if x_new.ncols() != w.nrows() {
        return Err(FmtcError::DimensionMismatch(format!(
            "new data has {} features, model expects {}",
            x_new.ncols(),
            w.nrows()
        )));
    }
    if centroids.ncols() != w.ncols() {
        return Err(FmtcError::DimensionMismatch(format!(
            "centroids have width {}, embedding has {}",
            centroids.ncols(),
            w.ncols()
        )));
    }
    let (points, _) = normalize_rows(&(x_new * w));
    Ok(nearest_centroid(&points, centroids))
}
