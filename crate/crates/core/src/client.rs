//! A federated client: local data, graph Laplacian, and the personalized
//! model pair `(W_t, F_t)`.
//!
//! Per round a client solves the `W` subproblem of the augmented Lagrangian
//! exactly, then takes a few projected gradient steps on the Stiefel
//! manifold for `F`. Only `W` ever leaves the client.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

use crate::error::{FmtcError, Result};
use crate::graph::{DataMatrix, NormalizedLaplacian};

const MAX_HALVINGS: usize = 20;
const RANK_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct ClientState {
    x: DataMatrix,
    laplacian: NormalizedLaplacian,
    w: DMatrix<f64>,
    f: DMatrix<f64>,
    weight: f64,
    gram: DMatrix<f64>,
    factor: Cholesky<f64, Dyn>,
    factor_key: (f64, f64),
}

fn factorize(gram: &DMatrix<f64>, weight: f64, alpha: f64, rho: f64) -> Result<Cholesky<f64, Dyn>> {
    if !(rho > 0.0) {
        return Err(FmtcError::InvalidParameter(format!(
            "rho must be positive, got {rho}"
        )));
    }
    let d = gram.nrows();
    let h = gram * (2.0 * weight * alpha) + DMatrix::identity(d, d) * rho;
    Cholesky::new(h).ok_or_else(|| {
        FmtcError::Numeric("Cholesky factorization of the W-update system failed".into())
    })
}

/// Bottom-`c` eigenvectors of `L̂`, ordered by ascending eigenvalue.
pub fn spectral_init(laplacian: &NormalizedLaplacian, clusters: usize) -> Result<DMatrix<f64>> {
    let n = laplacian.size();
    if clusters == 0 || clusters > n {
        return Err(FmtcError::InvalidParameter(format!(
            "clusters must be in [1, {n}], got {clusters}"
        )));
    }
    let eig = SymmetricEigen::new(laplacian.values().clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut f = DMatrix::zeros(n, clusters);
    for (col, &idx) in order.iter().take(clusters).enumerate() {
        f.set_column(col, &eig.eigenvectors.column(idx));
    }
    Ok(f)
}

/// Nearest column-orthonormal matrix in Frobenius norm: `U V^T` from the
/// thin SVD.
pub fn stiefel_project(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.ncols() > m.nrows() {
        return Err(FmtcError::DimensionMismatch(format!(
            "cannot orthonormalize {} columns in {} rows",
            m.ncols(),
            m.nrows()
        )));
    }
    let svd = m.clone().svd(true, true);
    let sigma_min = svd.singular_values.min();
    if !(sigma_min >= RANK_FLOOR) {
        return Err(FmtcError::DegenerateProjection { sigma_min });
    }
    Ok(svd.u.unwrap() * svd.v_t.unwrap())
}

/// `Tr(F^T (L̂ + αI) F) - 2α Tr(F^T A)`: the `F` subproblem with `A = X W`.
pub fn embedding_objective(
    l: &DMatrix<f64>,
    f: &DMatrix<f64>,
    a: &DMatrix<f64>,
    alpha: f64,
) -> f64 {
    (l * f).dot(f) + alpha * f.norm_squared() - 2.0 * alpha * f.dot(a)
}

/// Euclidean gradient of [`embedding_objective`]: `2(L̂ + αI)F - 2αA`.
pub fn embedding_gradient(
    l: &DMatrix<f64>,
    f: &DMatrix<f64>,
    a: &DMatrix<f64>,
    alpha: f64,
) -> DMatrix<f64> {
    (l * f + f * alpha - a * alpha) * 2.0
}

/// `||FᵀF - I||_F`.
pub fn orthogonality_error(f: &DMatrix<f64>) -> f64 {
    let c = f.ncols();
    (f.transpose() * f - DMatrix::identity(c, c)).norm()
}

impl ClientState {
    /// Spectral initialization: `F_0` from the bottom eigenvectors of `L̂`,
    /// `W_0` from the regularized fit to `F_0` with zero consensus and dual.
    pub fn new(
        x: DataMatrix,
        laplacian: NormalizedLaplacian,
        clusters: usize,
        weight: f64,
        alpha: f64,
        rho: f64,
    ) -> Result<Self> {
        let f = spectral_init(&laplacian, clusters)?;
        let w = DMatrix::zeros(x.cols(), clusters);
        let mut state = Self::with_model(x, laplacian, w, f, weight, alpha, rho)?;
        let zeros = DMatrix::zeros(state.x.cols(), clusters);
        state.w = state.update_w(&zeros, &zeros, alpha, rho)?;
        Ok(state)
    }

    /// Builds a client around an explicit `(W, F)` pair.
    pub fn with_model(
        x: DataMatrix,
        laplacian: NormalizedLaplacian,
        w: DMatrix<f64>,
        f: DMatrix<f64>,
        weight: f64,
        alpha: f64,
        rho: f64,
    ) -> Result<Self> {
        let (n, d) = (x.rows(), x.cols());
        if laplacian.size() != n {
            return Err(FmtcError::DimensionMismatch(format!(
                "Laplacian is {0}x{0}, data has {n} rows",
                laplacian.size()
            )));
        }
        if f.nrows() != n || w.nrows() != d || w.ncols() != f.ncols() {
            return Err(FmtcError::DimensionMismatch(format!(
                "F is {:?} and W is {:?} for data {n}x{d}",
                f.shape(),
                w.shape()
            )));
        }
        if !(weight > 0.0) || !(alpha >= 0.0) {
            return Err(FmtcError::InvalidParameter(format!(
                "need weight > 0 and alpha >= 0, got {weight} and {alpha}"
            )));
        }
        let gram = x.values().transpose() * x.values();
        let factor = factorize(&gram, weight, alpha, rho)?;
        Ok(ClientState {
            x,
            laplacian,
            w,
            f,
            weight,
            gram,
            factor,
            factor_key: (alpha, rho),
        })
    }

    pub fn data(&self) -> &DataMatrix {
        &self.x
    }

    pub fn laplacian(&self) -> &NormalizedLaplacian {
        &self.laplacian
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn clusters(&self) -> usize {
        self.f.ncols()
    }

    pub fn set_w(&mut self, w: DMatrix<f64>) {
        self.w = w;
    }

    pub fn set_f(&mut self, f: DMatrix<f64>) {
        self.f = f;
    }

    /// Exact minimizer of the `W` subproblem
    /// `ωα||F - XW||² + <Y, W> + ρ/2 ||W - Z||²`, i.e.
    /// `(2ωα XᵀX + ρI)⁻¹ (2ωα XᵀF + ρZ - Y)`.
    pub fn update_w(
        &self,
        z_slice: &DMatrix<f64>,
        y_slice: &DMatrix<f64>,
        alpha: f64,
        rho: f64,
    ) -> Result<DMatrix<f64>> {
        if z_slice.shape() != self.w.shape() || y_slice.shape() != self.w.shape() {
            return Err(FmtcError::DimensionMismatch(format!(
                "consensus/dual slices must be {:?}",
                self.w.shape()
            )));
        }
        let scale = 2.0 * self.weight * alpha;
        let rhs = self.x.values().transpose() * &self.f * scale + z_slice * rho - y_slice;
        let fresh;
        let factor = if self.factor_key == (alpha, rho) {
            &self.factor
        } else {
            fresh = factorize(&self.gram, self.weight, alpha, rho)?;
            &fresh
        };
        let mut w = factor.solve(&rhs);
        // one step of iterative refinement
        let d = self.gram.nrows();
        let h = &self.gram * scale + DMatrix::identity(d, d) * rho;
        let r = &rhs - &h * &w;
        w += factor.solve(&r);
        if w.iter().any(|v| !v.is_finite()) {
            return Err(FmtcError::Numeric(
                "W-update produced non-finite values".into(),
            ));
        }
        Ok(w)
    }

    /// Frobenius norm of the `W` stationarity condition
    /// `2ωα Xᵀ(XW - F) + Y + ρ(W - Z)` evaluated at `w` with this client's `F`.
    pub fn w_stationarity_residual(
        &self,
        w: &DMatrix<f64>,
        z_slice: &DMatrix<f64>,
        y_slice: &DMatrix<f64>,
        alpha: f64,
        rho: f64,
    ) -> f64 {
        let x = self.x.values();
        let g = x.transpose() * (x * w - &self.f) * (2.0 * self.weight * alpha)
            + y_slice
            + (w - z_slice) * rho;
        g.norm()
    }

    /// Projected gradient descent on the Stiefel manifold for the `F`
    /// subproblem with `A = X w_new`. Each inner step halves `eta` until the
    /// objective does not increase; if 20 halvings fail the iterate is kept.
    pub fn update_f(
        &self,
        w_new: &DMatrix<f64>,
        alpha: f64,
        eta: f64,
        inner_iters: usize,
    ) -> Result<DMatrix<f64>> {
        if !(eta > 0.0) {
            return Err(FmtcError::InvalidParameter(format!(
                "eta must be positive, got {eta}"
            )));
        }
        if w_new.shape() != self.w.shape() {
            return Err(FmtcError::DimensionMismatch(format!(
                "W must be {:?}, got {:?}",
                self.w.shape(),
                w_new.shape()
            )));
        }
        let l = self.laplacian.values();
        let a = self.x.values() * w_new;
        let mut f = self.f.clone();
        let mut obj = embedding_objective(l, &f, &a, alpha);
        for _ in 0..inner_iters {
            // half the Euclidean gradient
            let dir = l * &f + &f * alpha - &a * alpha;
            let mut step = eta;
            let mut accepted = false;
            for _ in 0..=MAX_HALVINGS {
                let cand = stiefel_project(&(&f - &dir * step))?;
                let cand_obj = embedding_objective(l, &cand, &a, alpha);
                if cand_obj <= obj {
                    f = cand;
                    obj = cand_obj;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        Ok(f)
    }

    /// `ω (Tr(FᵀL̂F) + α||F - XW||²)` at the stored model.
    pub fn local_objective(&self, alpha: f64) -> f64 {
        let trace = (self.laplacian.values() * &self.f).dot(&self.f);
        let fit = (&self.f - self.x.values() * &self.w).norm_squared();
        self.weight * (trace + alpha * fit)
    }
}
