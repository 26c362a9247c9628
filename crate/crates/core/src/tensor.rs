//! Third-order tensors, the mode-3 DFT, and singular value thresholding in
//! the Fourier domain (t-SVD).
//!
//! Scaling convention: for a real tensor `T` with mode-3 DFT slices `T̂_t`,
//!
//! ```text
//! ||T||_{S_p}^p = (1/m) * sum_t sum_i sigma_i(T̂_t)^p
//! ```
//!
//! By Parseval `||T||_F^2 = (1/m) sum_t ||T̂_t||_F^2`, so the proximal
//! problem `beta ||Z||_{S_p}^p + rho/2 ||Z - M||_F^2` decouples into one
//! matrix problem per Fourier slice with threshold `beta / rho`. For `m = 1`
//! that is exactly matrix singular value thresholding.

use nalgebra::{Complex, DMatrix, DVector};
use rustfft::FftPlanner;

use crate::error::{FmtcError, Result};

/// Real `d x k x m` tensor stored as `m` frontal slices.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    slices: Vec<DMatrix<f64>>,
}

impl Tensor3 {
    pub fn zeros(d: usize, k: usize, m: usize) -> Self {
        Tensor3 {
            slices: vec![DMatrix::zeros(d, k); m],
        }
    }

    /// Stacks frontal slices; all must share a shape and hold finite values.
    pub fn from_slices(slices: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| FmtcError::InvalidParameter("tensor needs at least one slice".into()))?;
        let shape = first.shape();
        if shape.0 == 0 || shape.1 == 0 {
            return Err(FmtcError::InvalidParameter(
                "tensor dims must be >= 1".into(),
            ));
        }
        for (t, s) in slices.iter().enumerate() {
            if s.shape() != shape {
                return Err(FmtcError::DimensionMismatch(format!(
                    "slice {t} is {:?}, expected {shape:?}",
                    s.shape()
                )));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(FmtcError::InvalidParameter(format!(
                    "slice {t} has non-finite entries"
                )));
            }
        }
        Ok(Tensor3 { slices })
    }

    /// `(d, k, m)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let (d, k) = self.slices[0].shape();
        (d, k, self.slices.len())
    }

    pub fn slice(&self, t: usize) -> &DMatrix<f64> {
        &self.slices[t]
    }

    pub fn slice_mut(&mut self, t: usize) -> &mut DMatrix<f64> {
        &mut self.slices[t]
    }

    pub fn slices(&self) -> &[DMatrix<f64>] {
        &self.slices
    }

    pub fn into_slices(self) -> Vec<DMatrix<f64>> {
        self.slices
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.slices
            .iter()
            .map(|s| s.norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    /// Entry-wise `self + scale * other`.
    pub fn add_scaled(&self, other: &Tensor3, scale: f64) -> Result<Tensor3> {
        check_same_dims(self, other)?;
        Ok(Tensor3 {
            slices: self
                .slices
                .iter()
                .zip(&other.slices)
                .map(|(a, b)| a + b * scale)
                .collect(),
        })
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Tensor3) -> Result<f64> {
        check_same_dims(self, other)?;
        Ok(self
            .slices
            .iter()
            .zip(&other.slices)
            .map(|(a, b)| a.dot(b))
            .sum())
    }
}

pub(crate) fn check_same_dims(a: &Tensor3, b: &Tensor3) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(FmtcError::DimensionMismatch(format!(
            "tensor dims {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Mode-3 DFT of a real tensor: complex `d x k x m`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralTensor {
    slices: Vec<DMatrix<Complex<f64>>>,
}

impl SpectralTensor {
    pub fn dims(&self) -> (usize, usize, usize) {
        let (d, k) = self.slices[0].shape();
        (d, k, self.slices.len())
    }

    pub fn slice(&self, t: usize) -> &DMatrix<Complex<f64>> {
        &self.slices[t]
    }
}

fn transform_tubes(slices: &mut [DMatrix<Complex<f64>>], inverse: bool) {
    let m = slices.len();
    let (d, k) = slices[0].shape();
    let mut planner = FftPlanner::<f64>::new();
    let fft = if inverse {
        planner.plan_fft_inverse(m)
    } else {
        planner.plan_fft_forward(m)
    };
    let mut tube = vec![Complex::new(0.0, 0.0); m];
    for j in 0..k {
        for i in 0..d {
            for (t, s) in slices.iter().enumerate() {
                tube[t] = s[(i, j)];
            }
            fft.process(&mut tube);
            for (t, s) in slices.iter_mut().enumerate() {
                s[(i, j)] = tube[t];
            }
        }
    }
}

/// Replaces every tube `t[i, j, :]` by its (unnormalized) length-`m` DFT.
pub fn mode3_fft(t: &Tensor3) -> SpectralTensor {
    let mut slices: Vec<DMatrix<Complex<f64>>> = t
        .slices
        .iter()
        .map(|s| s.map(|v| Complex::new(v, 0.0)))
        .collect();
    transform_tubes(&mut slices, false);
    SpectralTensor { slices }
}

/// Inverse of [`mode3_fft`]. Returns the real part and the largest absolute
/// imaginary residue.
pub fn mode3_ifft(s: &SpectralTensor) -> (Tensor3, f64) {
    let m = s.slices.len();
    let mut slices = s.slices.clone();
    transform_tubes(&mut slices, true);
    let scale = 1.0 / m as f64;
    let mut residue = 0.0f64;
    let real = slices
        .iter()
        .map(|c| {
            c.map(|v| {
                residue = residue.max((v.im * scale).abs());
                v.re * scale
            })
        })
        .collect();
    (Tensor3 { slices: real }, residue)
}

const GST_MAX_ITERS: usize = 50;
const GST_TOL: f64 = 1e-12;

/// Global minimizer of `tau * x^p + (x - y)^2 / 2` over `x >= 0`.
///
/// `p = 1` is soft thresholding. For `p < 1` this is generalized
/// soft-thresholding: zero below the threshold
/// `(2 tau (1-p))^{1/(2-p)} + tau p (2 tau (1-p))^{(p-1)/(2-p)}`,
/// otherwise the fixed point of `x = y - tau p x^{p-1}` started at `y`.
pub fn gst_shrink(y: f64, tau: f64, p: f64) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(FmtcError::InvalidParameter(format!(
            "Schatten exponent p must be in (0, 1], got {p}"
        )));
    }
    if y < 0.0 || !y.is_finite() {
        return Err(FmtcError::InvalidParameter(format!(
            "shrinkage input must be finite and nonnegative, got {y}"
        )));
    }
    if tau < 0.0 {
        return Err(FmtcError::InvalidParameter(format!(
            "shrinkage threshold must be nonnegative, got {tau}"
        )));
    }
    if tau == 0.0 {
        return Ok(y);
    }
    if p == 1.0 {
        return Ok((y - tau).max(0.0));
    }
    let base = 2.0 * tau * (1.0 - p);
    let threshold = base.powf(1.0 / (2.0 - p)) + tau * p * base.powf((p - 1.0) / (2.0 - p));
    if y <= threshold {
        return Ok(0.0);
    }
    let mut x = y;
    for _ in 0..GST_MAX_ITERS {
        let next = y - tau * p * x.powf(p - 1.0);
        let done = (next - x).abs() <= GST_TOL * (1.0 + x.abs());
        x = next;
        if done {
            break;
        }
    }
    let objective = |v: f64| tau * v.powf(p) + 0.5 * (v - y) * (v - y);
    if x <= 0.0 || objective(x) > objective(0.0) {
        return Ok(0.0);
    }
    Ok(x)
}

fn check_schatten_p(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(FmtcError::InvalidParameter(format!(
            "Schatten exponent p must be in (0, 1], got {p}"
        )))
    }
}

fn shrink_real(slice: &DMatrix<f64>, tau: f64, p: f64) -> Result<DMatrix<f64>> {
    let svd = slice.clone().svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let shrunk = svd
        .singular_values
        .iter()
        .map(|&s| gst_shrink(s.max(0.0), tau, p))
        .collect::<Result<Vec<f64>>>()?;
    Ok(&u * DMatrix::from_diagonal(&DVector::from_vec(shrunk)) * &v_t)
}

fn shrink_complex(
    slice: &DMatrix<Complex<f64>>,
    tau: f64,
    p: f64,
) -> Result<DMatrix<Complex<f64>>> {
    let svd = slice.clone().svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let shrunk = svd
        .singular_values
        .iter()
        .map(|&s| gst_shrink(s.max(0.0), tau, p).map(|x| Complex::new(x, 0.0)))
        .collect::<Result<Vec<_>>>()?;
    Ok(&u * DMatrix::from_diagonal(&DVector::from_vec(shrunk)) * &v_t)
}

const IMAG_DISCARD: f64 = 1e-10;
const IMAG_FAIL: f64 = 1e-8;

/// TSVT together with the imaginary residue left by the inverse DFT.
pub fn tsvt_with_residue(m_in: &Tensor3, beta: f64, rho: f64, p: f64) -> Result<(Tensor3, f64)> {
    if !(rho > 0.0) {
        return Err(FmtcError::InvalidParameter(format!(
            "rho must be positive, got {rho}"
        )));
    }
    if !(beta >= 0.0) {
        return Err(FmtcError::InvalidParameter(format!(
            "beta must be nonnegative, got {beta}"
        )));
    }
    check_schatten_p(p)?;
    if beta == 0.0 {
        return Ok((m_in.clone(), 0.0));
    }
    let tau = beta / rho;
    let mut spec = mode3_fft(m_in);
    let m = spec.slices.len();
    // Slices t and m - t are conjugates; only the first half is decomposed.
    for t in 0..=(m / 2) {
        let self_conjugate = t == 0 || 2 * t == m;
        if self_conjugate {
            let real = spec.slices[t].map(|v| v.re);
            spec.slices[t] = shrink_real(&real, tau, p)?.map(|v| Complex::new(v, 0.0));
        } else {
            let shrunk = shrink_complex(&spec.slices[t], tau, p)?;
            spec.slices[m - t] = shrunk.map(|v| v.conj());
            spec.slices[t] = shrunk;
        }
    }
    let (out, residue) = mode3_ifft(&spec);
    if residue > IMAG_FAIL {
        return Err(FmtcError::Internal(format!(
            "imaginary residue {residue:e} after inverse DFT"
        )));
    }
    if residue > IMAG_DISCARD {
        log::warn!("tsvt: imaginary residue {residue:e} discarded");
    }
    Ok((out, residue))
}

/// Proximal operator of `beta * ||.||_{S_p}^p` with penalty `rho`:
/// `argmin_Z beta ||Z||_{S_p}^p + rho/2 ||Z - m_in||_F^2`.
pub fn tsvt(m_in: &Tensor3, beta: f64, rho: f64, p: f64) -> Result<Tensor3> {
    tsvt_with_residue(m_in, beta, rho, p).map(|(t, _)| t)
}

/// `||t||_{S_p}^p` under the `1/m` Fourier convention described in the
/// module docs.
pub fn schatten_p_norm(t: &Tensor3, p: f64) -> Result<f64> {
    check_schatten_p(p)?;
    let spec = mode3_fft(t);
    let m = spec.slices.len();
    let total: f64 = spec
        .slices
        .iter()
        .map(|s| {
            s.clone()
                .singular_values()
                .iter()
                .map(|&sv| if sv > 0.0 { sv.powf(p) } else { 0.0 })
                .sum::<f64>()
        })
        .sum();
    Ok(total / m as f64)
}
