//! k-NN Gaussian affinity graphs and the symmetric normalized Laplacian.
//!
//! Everything here is dense: a client holds at most a few thousand samples,
//! so an `n x n` matrix is cheap enough and keeps the eigen-solvers simple.

use nalgebra::DMatrix;

use crate::error::{FmtcError, Result};

/// A client's sample matrix. Row `i` is sample `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix(DMatrix<f64>);

impl DataMatrix {
    /// Wraps a matrix after checking that it holds at least two samples, at
    /// least one feature, and only finite values.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() < 2 {
            return Err(FmtcError::InvalidParameter(format!(
                "data matrix needs at least 2 samples, got {}",
                values.nrows()
            )));
        }
        if values.ncols() < 1 {
            return Err(FmtcError::InvalidParameter(
                "data matrix needs at least 1 feature".into(),
            ));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos % values.nrows(), pos / values.nrows());
            return Err(FmtcError::InvalidParameter(format!(
                "non-finite entry at row {r}, column {c}"
            )));
        }
        Ok(DataMatrix(values))
    }

    /// Builds from row-major samples.
    pub fn from_rows(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(FmtcError::DimensionMismatch(format!(
                "expected {} values for a {rows}x{cols} matrix, got {}",
                rows * cols,
                values.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(rows, cols, values))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    /// Returns a new matrix holding the selected rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> DMatrix<f64> {
        self.0.select_rows(idx.iter())
    }
}

/// Symmetric k-NN affinity with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix(DMatrix<f64>);

impl AffinityMatrix {
    /// Accepts an arbitrary symmetric matrix with entries in [0, 1] and zero
    /// diagonal. Used for hand-built graphs in tests and by callers that
    /// bring their own similarity.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        let n = values.nrows();
        if n != values.ncols() {
            return Err(FmtcError::DimensionMismatch(format!(
                "affinity must be square, got {}x{}",
                n,
                values.ncols()
            )));
        }
        for i in 0..n {
            if values[(i, i)] != 0.0 {
                return Err(FmtcError::InvalidParameter(format!(
                    "affinity diagonal must be zero (row {i})"
                )));
            }
            for j in 0..n {
                let a = values[(i, j)];
                if !(0.0..=1.0).contains(&a) || a != values[(j, i)] {
                    return Err(FmtcError::InvalidParameter(format!(
                        "affinity entry ({i}, {j}) must be symmetric and in [0, 1]"
                    )));
                }
            }
        }
        Ok(AffinityMatrix(values))
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// `I - D^{-1/2} A D^{-1/2}` together with the degrees `D_ii`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedLaplacian {
    values: DMatrix<f64>,
    degrees: Vec<f64>,
}

impl NormalizedLaplacian {
    /// Wraps a precomputed symmetric Laplacian and its degree vector.
    pub fn from_matrix(values: DMatrix<f64>, degrees: Vec<f64>) -> Result<Self> {
        let n = values.nrows();
        if values.ncols() != n || degrees.len() != n {
            return Err(FmtcError::DimensionMismatch(format!(
                "Laplacian {:?} with {} degrees",
                values.shape(),
                degrees.len()
            )));
        }
        if (&values - values.transpose()).amax() > 1e-12 {
            return Err(FmtcError::InvalidParameter(
                "Laplacian must be symmetric".into(),
            ));
        }
        if degrees.iter().any(|&d| !(d > 0.0)) {
            return Err(FmtcError::InvalidParameter(
                "degrees must be positive".into(),
            ));
        }
        Ok(NormalizedLaplacian { values, degrees })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    pub fn size(&self) -> usize {
        self.values.nrows()
    }
}

/// Kernel bandwidth selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sigma {
    /// Median of the k-NN distances.
    Auto,
    Fixed(f64),
}

fn squared_distances(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mut d2 = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s = 0.0;
            for k in 0..x.ncols() {
                let diff = x[(i, k)] - x[(j, k)];
                s += diff * diff;
            }
            d2[(i, j)] = s;
            d2[(j, i)] = s;
        }
    }
    d2
}

/// Indices of the `knn_k` nearest other samples of every row. Ties on equal
/// distance go to the lower index.
fn knn_indices(d2: &DMatrix<f64>, knn_k: usize) -> Vec<Vec<usize>> {
    let n = d2.nrows();
    (0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            // stable sort keeps ascending index order among equal distances
            others.sort_by(|&a, &b| d2[(i, a)].total_cmp(&d2[(i, b)]));
            others.truncate(knn_k);
            others
        })
        .collect()
}

fn check_knn(x: &DataMatrix, knn_k: usize) -> Result<()> {
    if knn_k == 0 || knn_k >= x.rows() {
        return Err(FmtcError::InvalidParameter(format!(
            "knn_k must be in [1, {}), got {knn_k}",
            x.rows()
        )));
    }
    Ok(())
}

/// Median of the distances from every sample to each of its `knn_k`
/// nearest neighbours.
pub fn median_heuristic_sigma(x: &DataMatrix, knn_k: usize) -> Result<f64> {
    check_knn(x, knn_k)?;
    let d2 = squared_distances(x.values());
    let mut dists: Vec<f64> = knn_indices(&d2, knn_k)
        .iter()
        .enumerate()
        .flat_map(|(i, nbrs)| nbrs.iter().map(move |&j| (i, j)))
        .map(|(i, j)| d2[(i, j)].sqrt())
        .collect();
    dists.sort_by(f64::total_cmp);
    let len = dists.len();
    let median = if len % 2 == 1 {
        dists[len / 2]
    } else {
        0.5 * (dists[len / 2 - 1] + dists[len / 2])
    };
    if median > 0.0 && median.is_finite() {
        Ok(median)
    } else {
        Err(FmtcError::DegenerateData(
            "median k-NN distance is zero; pass an explicit sigma".into(),
        ))
    }
}

/// Gaussian k-NN affinity. An edge exists when either endpoint is among the
/// other's `knn_k` nearest neighbours.
pub fn build_affinity(x: &DataMatrix, knn_k: usize, sigma: Sigma) -> Result<AffinityMatrix> {
    check_knn(x, knn_k)?;
    let sigma = match sigma {
        Sigma::Auto => median_heuristic_sigma(x, knn_k)?,
        Sigma::Fixed(s) if s > 0.0 => s,
        Sigma::Fixed(s) => {
            return Err(FmtcError::InvalidParameter(format!(
                "sigma must be positive, got {s}"
            )))
        }
    };
    let n = x.rows();
    let d2 = squared_distances(x.values());
    let mut linked = vec![false; n * n];
    for (i, nbrs) in knn_indices(&d2, knn_k).iter().enumerate() {
        for &j in nbrs {
            linked[i * n + j] = true;
            linked[j * n + i] = true;
        }
    }
    let denom = 2.0 * sigma * sigma;
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            if linked[i * n + j] {
                let w = (-d2[(i, j)] / denom).exp();
                a[(i, j)] = w;
                a[(j, i)] = w;
            }
        }
    }
    Ok(AffinityMatrix(a))
}

pub fn build_laplacian(a: &AffinityMatrix) -> Result<NormalizedLaplacian> {
    let a = a.values();
    let n = a.nrows();
    let degrees: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
    if let Some(row) = degrees.iter().position(|&d| d <= 0.0) {
        return Err(FmtcError::IsolatedVertex { row });
    }
    let inv_sqrt: Vec<f64> = degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut l = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = if i == j { 1.0 } else { 0.0 } - inv_sqrt[i] * a[(i, j)] * inv_sqrt[j];
            l[(i, j)] = v;
            l[(j, i)] = v;
        }
    }
    Ok(NormalizedLaplacian { values: l, degrees })
}

/// Unnormalized `D - A`.
pub fn unnormalized_laplacian(a: &AffinityMatrix) -> DMatrix<f64> {
    let a = a.values();
    let mut l = -a.clone();
    for i in 0..a.nrows() {
        l[(i, i)] += a.row(i).sum();
    }
    l
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(points: &[f64]) -> DataMatrix {
        DataMatrix::from_rows(points.len(), 1, points).unwrap()
    }

    #[test]
    fn identical_points_fully_linked() {
        let a = build_affinity(&line(&[2.0, 2.0]), 1, Sigma::Fixed(1.0)).unwrap();
        assert_eq!(
            a.values(),
            &DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])
        );
    }

    #[test]
    fn collinear_points_or_union() {
        let a = build_affinity(&line(&[0.0, 1.0, 3.0]), 1, Sigma::Fixed(1.0)).unwrap();
        let a = a.values();
        assert_eq!(a[(0, 1)], (-0.5f64).exp());
        assert_eq!(a[(1, 0)], (-0.5f64).exp());
        assert_eq!(a[(1, 2)], (-2.0f64).exp());
        assert_eq!(a[(2, 1)], (-2.0f64).exp());
        assert_eq!(a[(0, 2)], 0.0);
        assert_eq!(a[(2, 0)], 0.0);
    }

    #[test]
    fn huge_sigma_saturates_linked_entries() {
        let x = line(&[0.0, 1.0, 3.0, 7.0]);
        let a = build_affinity(&x, 1, Sigma::Fixed(1e9)).unwrap();
        for v in a.values().iter() {
            assert!(*v == 0.0 || (1.0 - v).abs() < 1e-12);
        }
    }

    #[test]
    fn knn_k_bounds() {
        let x = line(&[0.0, 1.0, 3.0]);
        assert!(matches!(
            build_affinity(&x, 3, Sigma::Fixed(1.0)),
            Err(FmtcError::InvalidParameter(_))
        ));
        assert!(build_affinity(&x, 0, Sigma::Fixed(1.0)).is_err());
    }

    #[test]
    fn tie_breaks_to_lower_index() {
        // point 1 is equidistant from 0 and 2; with k = 1 it links to 0 only
        let d2 = squared_distances(line(&[0.0, 1.0, 2.0]).values());
        assert_eq!(knn_indices(&d2, 1)[1], vec![0]);
    }

    #[test]
    fn two_node_laplacian() {
        let a = AffinityMatrix::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        let l = build_laplacian(&a).unwrap();
        assert_eq!(
            l.values(),
            &DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0])
        );
        assert_eq!(l.degrees(), &[1.0, 1.0]);
    }

    #[test]
    fn path_graph_spectrum() {
        let a = AffinityMatrix::new(DMatrix::from_row_slice(
            3,
            3,
            &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0],
        ))
        .unwrap();
        let l = build_laplacian(&a).unwrap();
        let h = 1.0 / 2f64.sqrt();
        let expected = DMatrix::from_row_slice(3, 3, &[1.0, -h, 0.0, -h, 1.0, -h, 0.0, -h, 1.0]);
        assert!((l.values() - &expected).amax() < 1e-15);
        let mut ev: Vec<f64> = SymmetricEigen::new(l.values().clone())
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(f64::total_cmp);
        for (got, want) in ev.iter().zip([0.0, 1.0, 2.0]) {
            assert!((got - want).abs() < 1e-12, "{ev:?}");
        }
    }

    #[test]
    fn unnormalized_rows_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = DataMatrix::from_rows(10, 3, &vals).unwrap();
        let l = unnormalized_laplacian(&build_affinity(&x, 3, Sigma::Auto).unwrap());
        for i in 0..10 {
            assert!(l.row(i).sum().abs() < 1e-14);
        }
    }

    #[test]
    fn isolated_vertex_is_reported() {
        let a = AffinityMatrix::new(DMatrix::from_row_slice(
            3,
            3,
            &[0.0, 0.5, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0],
        ))
        .unwrap();
        match build_laplacian(&a) {
            Err(FmtcError::IsolatedVertex { row }) => assert_eq!(row, 2),
            other => panic!("expected isolated vertex, got {other:?}"),
        }
    }

    #[test]
    fn median_sigma_examples() {
        assert_eq!(
            median_heuristic_sigma(&line(&[0.0, 1.0, 2.0]), 1).unwrap(),
            1.0
        );
        assert_eq!(median_heuristic_sigma(&line(&[0.5, 3.0]), 1).unwrap(), 2.5);
        let dup = line(&[0.0, 0.0, 4.0, 4.0, 9.0, 9.0]);
        assert!(matches!(
            median_heuristic_sigma(&dup, 1),
            Err(FmtcError::DegenerateData(_))
        ));
    }

    #[test]
    fn rejects_non_finite_data() {
        assert!(DataMatrix::from_rows(2, 1, &[0.0, f64::NAN]).is_err());
        assert!(DataMatrix::from_rows(1, 1, &[0.0]).is_err());
    }

    proptest! {
        #[test]
        fn random_graphs_have_psd_symmetric_laplacian(
            vals in prop::collection::vec(-2.0f64..2.0, 40),
            k in 1usize..9,
        ) {
            let x = DataMatrix::from_rows(10, 4, &vals).unwrap();
            let a = build_affinity(&x, k, Sigma::Auto).unwrap();
            prop_assert_eq!(a.values(), &a.values().transpose());
            prop_assert!((0..10).all(|i| a.values()[(i, i)] == 0.0));
            prop_assert!(a.values().iter().all(|v| (0.0..=1.0).contains(v)));
            let l = build_laplacian(&a).unwrap();
            prop_assert!((l.values() - l.values().transpose()).amax() <= 1e-12);
            let eig = SymmetricEigen::new(l.values().clone()).eigenvalues;
            prop_assert!(eig.min() >= -1e-8);
            prop_assert!(eig.max() <= 2.0 + 1e-8);
        }
    }

    #[test]
    fn components_give_zero_eigenvalue_multiplicity() {
        // three groups of four points, far apart; k = 2 never crosses groups
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut vals = Vec::new();
        for g in 0..3 {
            for _ in 0..4 {
                vals.push(100.0 * g as f64 + rng.random_range(0.0..1.0));
                vals.push(rng.random_range(0.0..1.0));
            }
        }
        let x = DataMatrix::from_rows(12, 2, &vals).unwrap();
        let l = build_laplacian(&build_affinity(&x, 2, Sigma::Fixed(1.0)).unwrap()).unwrap();
        let eig = SymmetricEigen::new(l.values().clone()).eigenvalues;
        let zeros = eig.iter().filter(|v| v.abs() < 1e-8).count();
        assert!(zeros >= 3, "{eig}");
    }
}
