//! The federated round loop.
//!
//! One round: broadcast `(Z_t, Y_t)`, every client updates `W_t` then `F_t`,
//! the server gathers `W`, runs the TSVT consensus step and then the dual
//! ascent. The loop stops once the primal residual and the relative change
//! of the augmented Lagrangian are both below tolerance.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::client::{orthogonality_error, ClientState};
use crate::clustering::{assign_labels, KMeansResult};
use crate::error::{FmtcError, Result};
use crate::graph::{build_affinity, build_laplacian, DataMatrix, Sigma};
use crate::metrics::{accuracy, LabelVector};
use crate::server::{dual_residual, primal_residual, ServerState};
use crate::tensor::{schatten_p_norm, Tensor3};

impl Serialize for Sigma {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Sigma::Auto => s.serialize_str("auto"),
            Sigma::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Sigma {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Sigma::Fixed(v)),
            Raw::Text(t) if t.eq_ignore_ascii_case("auto") => Ok(Sigma::Auto),
            Raw::Text(t) => Err(serde::de::Error::custom(format!(
                "sigma must be a positive number or \"auto\", got {t:?}"
            ))),
        }
    }
}

/// Model and solver settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    /// Weight of the `||F - XW||²` fidelity term.
    pub alpha: f64,
    /// Weight of the tensor Schatten-p regularizer (collaboration strength).
    pub beta: f64,
    /// Augmented Lagrangian penalty, also the dual step size.
    pub rho: f64,
    /// Schatten exponent in (0, 1].
    pub p: f64,
    pub clusters: usize,
    pub knn_k: usize,
    pub sigma: Sigma,
    /// Projected gradient step for the `F` update.
    pub eta: f64,
    pub inner_iters: usize,
    pub max_rounds: usize,
    pub tol_primal: f64,
    pub tol_obj: f64,
    pub seed: u64,
    /// Update clients concurrently within a round.
    pub parallel: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            alpha: 0.001,
            beta: 0.01,
            rho: 0.3,
            p: 1.0,
            clusters: 2,
            knn_k: 10,
            sigma: Sigma::Auto,
            eta: 0.1,
            inner_iters: 5,
            max_rounds: 200,
            tol_primal: 1e-6,
            tol_obj: 1e-8,
            seed: 0,
            parallel: false,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FmtcError::InvalidParameter(msg));
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return bad(format!("rho must be > 0, got {}", self.rho));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return bad(format!("p must be in (0, 1], got {}", self.p));
        }
        if self.clusters < 2 {
            return bad(format!("clusters must be >= 2, got {}", self.clusters));
        }
        if self.knn_k == 0 {
            return bad("knn_k must be >= 1".into());
        }
        if let Sigma::Fixed(s) = self.sigma {
            if !(s > 0.0) {
                return bad(format!("sigma must be > 0, got {s}"));
            }
        }
        if !(self.eta > 0.0) {
            return bad(format!("eta must be > 0, got {}", self.eta));
        }
        if self.inner_iters == 0 {
            return bad("inner_iters must be >= 1".into());
        }
        if !(self.tol_primal > 0.0) || !(self.tol_obj > 0.0) {
            return bad("tolerances must be > 0".into());
        }
        Ok(())
    }
}

/// One line of the convergence trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundRecord {
    /// 1-based round index.
    pub round: usize,
    /// Global objective with `W` in the regularizer.
    pub objective: f64,
    /// Augmented Lagrangian at the start of the round.
    pub lagrangian_start: f64,
    /// Augmented Lagrangian after the primal half-round (clients + consensus),
    /// before dual ascent.
    pub lagrangian: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// Largest `W` stationarity residual over clients right after `update_w`.
    pub w_stationarity: f64,
    /// Largest `||FᵀF - I||_F` over clients after `update_f`.
    pub orthogonality: f64,
    /// `||W^{k+1} - W^k||_F` over all clients.
    pub w_change: f64,
    /// `||F^{k+1} - F^k||_F` over all clients.
    pub f_change: f64,
    /// Not serialized, so seed-pinned runs produce byte-identical traces.
    #[serde(skip)]
    pub wall_time_ms: f64,
    /// Per-client clustering accuracy, when labels were supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_acc: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub records: Vec<RoundRecord>,
}

impl ConvergenceTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&RoundRecord> {
        self.records.last()
    }
}

/// Fitted federated model: per-client `(W_t, F_t)` plus the server tensors.
#[derive(Debug, Clone)]
pub struct FmtcModel {
    clients: Vec<ClientState>,
    server: ServerState,
    hyper: HyperParams,
    trace: ConvergenceTrace,
    converged: bool,
}

impl FmtcModel {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn client(&self, t: usize) -> &ClientState {
        &self.clients[t]
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn w(&self, t: usize) -> &DMatrix<f64> {
        self.clients[t].w()
    }

    pub fn f(&self, t: usize) -> &DMatrix<f64> {
        self.clients[t].f()
    }

    pub fn z(&self) -> &Tensor3 {
        self.server.z()
    }

    pub fn y(&self) -> &Tensor3 {
        self.server.y()
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn hyper(&self) -> &HyperParams {
        &self.hyper
    }

    pub fn trace(&self) -> &ConvergenceTrace {
        &self.trace
    }

    /// Whether the stopping rule fired before `max_rounds`.
    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn w_stack(&self) -> Tensor3 {
        stack_w(&self.clients)
    }

    /// Largest `W` stationarity residual at the returned iterate, evaluated
    /// with the final `F`, `Z` and `Y`.
    pub fn w_stationarity(&self) -> f64 {
        self.clients
            .iter()
            .enumerate()
            .map(|(t, c)| {
                c.w_stationarity_residual(
                    c.w(),
                    self.server.z().slice(t),
                    self.server.y().slice(t),
                    self.hyper.alpha,
                    self.hyper.rho,
                )
            })
            .fold(0.0, f64::max)
    }

    /// Largest per-client consensus gap `||W_t - Z_t||_F`.
    pub fn max_consensus_gap(&self) -> f64 {
        self.clients
            .iter()
            .enumerate()
            .map(|(t, c)| (c.w() - self.server.z().slice(t)).norm())
            .fold(0.0, f64::max)
    }

    /// Checks that the consensus tensor minimizes its proximal subproblem
    /// against `trials` random perturbations of Frobenius size `magnitude`.
    /// Returns the smallest objective increase observed (negative means a
    /// perturbation improved on `Z`).
    pub fn z_prox_probe(&self, trials: usize, magnitude: f64, seed: u64) -> Result<f64> {
        let w = self.w_stack();
        // Z^{k+1} solved its subproblem against Y^k = Y^{k+1} - ρ(W - Z).
        let y_prev = self
            .server
            .y()
            .add_scaled(&w.add_scaled(self.server.z(), -1.0)?, -self.hyper.rho)?;
        let z = self.server.z();
        let base = self.server.z_objective(z, &w, &y_prev)?;
        let (d, k, m) = z.dims();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = f64::INFINITY;
        for _ in 0..trials {
            let dir = Tensor3::from_slices(
                (0..m)
                    .map(|_| DMatrix::from_fn(d, k, |_, _| rng.random_range(-1.0..1.0)))
                    .collect(),
            )?;
            let moved = z.add_scaled(&dir, magnitude / dir.frobenius_norm())?;
            worst = worst.min(self.server.z_objective(&moved, &w, &y_prev)? - base);
        }
        Ok(worst)
    }

    /// k-means on every client's embedding, seeded from `hyper.seed`.
    pub fn cluster(&self, restarts: usize) -> Result<Vec<KMeansResult>> {
        self.clients
            .iter()
            .map(|c| assign_labels(c.f(), self.hyper.clusters, restarts, self.hyper.seed))
            .collect()
    }
}

fn stack_w(clients: &[ClientState]) -> Tensor3 {
    Tensor3::from_slices(clients.iter().map(|c| c.w().clone()).collect())
        .expect("client models share a shape")
}

/// `Σ_t ω_t(Tr(FᵀL̂F) + α||F - XW||²) + β||W||_{S_p}^p`.
pub fn global_objective(model: &FmtcModel, alpha: f64, beta: f64, p: f64) -> Result<f64> {
    objective_of(&model.clients, alpha, beta, p)
}

fn objective_of(clients: &[ClientState], alpha: f64, beta: f64, p: f64) -> Result<f64> {
    let local: f64 = clients.iter().map(|c| c.local_objective(alpha)).sum();
    let reg = if beta == 0.0 {
        0.0
    } else {
        beta * schatten_p_norm(&stack_w(clients), p)?
    };
    Ok(local + reg)
}

/// Augmented Lagrangian
/// `Σ_t f_t + Σ_t <Y_t, W_t - Z_t> + ρ/2 Σ_t ||W_t - Z_t||² + β||Z||_{S_p}^p`.
pub fn augmented_lagrangian(
    clients: &[ClientState],
    z: &Tensor3,
    y: &Tensor3,
    hyper: &HyperParams,
) -> Result<f64> {
    let local: f64 = clients.iter().map(|c| c.local_objective(hyper.alpha)).sum();
    let resid = stack_w(clients).add_scaled(z, -1.0)?;
    let coupling = y.dot(&resid)? + 0.5 * hyper.rho * resid.frobenius_norm().powi(2);
    let reg = if hyper.beta == 0.0 {
        0.0
    } else {
        hyper.beta * schatten_p_norm(z, hyper.p)?
    };
    Ok(local + coupling + reg)
}

fn check_inputs(datasets: &[DataMatrix], hyper: &HyperParams) -> Result<()> {
    hyper.validate()?;
    let first = datasets.first().ok_or_else(|| {
        FmtcError::InvalidParameter("at least one client dataset is required".into())
    })?;
    for (t, x) in datasets.iter().enumerate() {
        if x.cols() != first.cols() {
            return Err(FmtcError::DimensionMismatch(format!(
                "client {t} has {} features, client 0 has {}",
                x.cols(),
                first.cols()
            )));
        }
        if hyper.clusters > x.rows() {
            return Err(FmtcError::InvalidParameter(format!(
                "client {t} has {} samples, fewer than {} clusters",
                x.rows(),
                hyper.clusters
            )));
        }
        if hyper.knn_k >= x.rows() {
            return Err(FmtcError::InvalidParameter(format!(
                "client {t} has {} samples; knn_k = {} needs more",
                x.rows(),
                hyper.knn_k
            )));
        }
    }
    Ok(())
}

fn init_client(t: usize, x: &DataMatrix, hyper: &HyperParams, weight: f64) -> Result<ClientState> {
    let wrap = |e: FmtcError| FmtcError::Client {
        round: 0,
        client: t,
        source: Box::new(e),
    };
    let a = build_affinity(x, hyper.knn_k, hyper.sigma).map_err(wrap)?;
    let l = build_laplacian(&a).map_err(wrap)?;
    ClientState::new(x.clone(), l, hyper.clusters, weight, hyper.alpha, hyper.rho).map_err(wrap)
}

/// Each client's spectral start is only defined up to a rotation of its
/// eigenbasis, which the local objective cannot see but the tensor coupling
/// can. Rotating every `(F_t, W_t)` onto client 0 via orthogonal Procrustes on
/// the shared `W` removes that arbitrary misalignment without changing any
/// local objective.
fn align_bases(clients: &mut [ClientState]) -> Result<()> {
    let Some(reference) = clients.first().map(|c| c.w().clone()) else {
        return Ok(());
    };
    for c in clients.iter_mut().skip(1) {
        let svd = (c.w().transpose() * &reference).svd(true, true);
        let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
            return Err(FmtcError::Numeric("Procrustes SVD did not converge".into()));
        };
        let q = u * v_t;
        let w = c.w() * &q;
        let f = c.f() * &q;
        c.set_w(w);
        c.set_f(f);
    }
    Ok(())
}

struct ClientStep {
    w_stationarity: f64,
    orthogonality: f64,
    w_change_sq: f64,
    f_change_sq: f64,
}

fn client_round(
    client: &mut ClientState,
    z_t: &DMatrix<f64>,
    y_t: &DMatrix<f64>,
    hyper: &HyperParams,
) -> Result<ClientStep> {
    let w = client.update_w(z_t, y_t, hyper.alpha, hyper.rho)?;
    let w_stationarity = client.w_stationarity_residual(&w, z_t, y_t, hyper.alpha, hyper.rho);
    let w_change_sq = (&w - client.w()).norm_squared();
    client.set_w(w);
    let f = client.update_f(client.w(), hyper.alpha, hyper.eta, hyper.inner_iters)?;
    let orthogonality = orthogonality_error(&f);
    let f_change_sq = (&f - client.f()).norm_squared();
    client.set_f(f);
    Ok(ClientStep {
        w_stationarity,
        orthogonality,
        w_change_sq,
        f_change_sq,
    })
}

fn client_accuracies(
    clients: &[ClientState],
    labels: &[LabelVector],
    hyper: &HyperParams,
) -> Result<Vec<f64>> {
    clients
        .iter()
        .zip(labels)
        .map(|(c, truth)| {
            let km = assign_labels(c.f(), hyper.clusters, 10, hyper.seed)?;
            accuracy(&LabelVector::new(km.labels), truth)
        })
        .collect()
}

/// Runs the federated ADMM schedule on the given client datasets.
pub fn fit(datasets: &[DataMatrix], hyper: &HyperParams) -> Result<FmtcModel> {
    fit_with_labels(datasets, None, hyper)
}

/// As [`fit`], additionally recording per-client accuracy each round when
/// ground-truth labels are supplied.
pub fn fit_with_labels(
    datasets: &[DataMatrix],
    labels: Option<&[LabelVector]>,
    hyper: &HyperParams,
) -> Result<FmtcModel> {
    check_inputs(datasets, hyper)?;
    if let Some(labels) = labels {
        if labels.len() != datasets.len()
            || labels
                .iter()
                .zip(datasets)
                .any(|(l, x)| l.len() != x.rows())
        {
            return Err(FmtcError::DimensionMismatch(
                "one label vector per client, matching its sample count, is required".into(),
            ));
        }
    }
    let m = datasets.len();
    let weight = 1.0 / m as f64;
    let mut clients: Vec<ClientState> = if hyper.parallel {
        datasets
            .par_iter()
            .enumerate()
            .map(|(t, x)| init_client(t, x, hyper, weight))
            .collect::<Result<_>>()?
    } else {
        datasets
            .iter()
            .enumerate()
            .map(|(t, x)| init_client(t, x, hyper, weight))
            .collect::<Result<_>>()?
    };
    align_bases(&mut clients)?;
    let d = datasets[0].cols();
    let mut server = ServerState::new(d, hyper.clusters, m, hyper.beta, hyper.rho, hyper.p)?;
    let mut trace = ConvergenceTrace::default();
    let mut converged = false;
    let mut prev_lagrangian: Option<f64> = None;

    for round in 1..=hyper.max_rounds {
        let started = Instant::now();
        let lagrangian_start = augmented_lagrangian(&clients, server.z(), server.y(), hyper)?;

        let (z, y) = (server.z(), server.y());
        let step = |(t, c): (usize, &mut ClientState)| {
            client_round(c, z.slice(t), y.slice(t), hyper).map_err(|e| FmtcError::Client {
                round,
                client: t,
                source: Box::new(e),
            })
        };
        let steps: Vec<ClientStep> = if hyper.parallel {
            clients
                .par_iter_mut()
                .enumerate()
                .map(step)
                .collect::<Result<_>>()?
        } else {
            clients
                .iter_mut()
                .enumerate()
                .map(step)
                .collect::<Result<_>>()?
        };

        let server_err = |e: FmtcError| FmtcError::Server {
            round,
            source: Box::new(e),
        };
        let w_stack = stack_w(&clients);
        let z_old = server.z().clone();
        server.update_z(&w_stack).map_err(server_err)?;
        let lagrangian = augmented_lagrangian(&clients, server.z(), server.y(), hyper)?;
        let primal = primal_residual(&w_stack, server.z())?;
        let dual = dual_residual(server.z(), &z_old, hyper.rho)?;
        server.update_y(&w_stack).map_err(server_err)?;

        let client_acc = match labels {
            Some(l) => Some(client_accuracies(&clients, l, hyper)?),
            None => None,
        };
        let record = RoundRecord {
            round,
            objective: objective_of(&clients, hyper.alpha, hyper.beta, hyper.p)?,
            lagrangian_start,
            lagrangian,
            primal_residual: primal,
            dual_residual: dual,
            w_stationarity: steps.iter().map(|s| s.w_stationarity).fold(0.0, f64::max),
            orthogonality: steps.iter().map(|s| s.orthogonality).fold(0.0, f64::max),
            w_change: steps.iter().map(|s| s.w_change_sq).sum::<f64>().sqrt(),
            f_change: steps.iter().map(|s| s.f_change_sq).sum::<f64>().sqrt(),
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
            client_acc,
        };
        log::debug!(
            "round {round}: L = {lagrangian:.6e}, primal = {primal:.3e}, dual = {dual:.3e}"
        );
        trace.records.push(record);

        let stalled = prev_lagrangian.is_some_and(|prev| {
            (lagrangian - prev).abs() <= hyper.tol_obj * (1.0 + lagrangian.abs())
        });
        prev_lagrangian = Some(lagrangian);
        if primal <= hyper.tol_primal && stalled {
            converged = true;
            log::info!("converged after {round} rounds");
            break;
        }
    }

    Ok(FmtcModel {
        clients,
        server,
        hyper: hyper.clone(),
        trace,
        converged,
    })
}
