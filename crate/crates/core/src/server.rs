//! The coordinating server. It sees only the stacked client models `W`;
//! nothing in this module accepts client data.

use crate::error::{FmtcError, Result};
use crate::tensor::{check_same_dims, tsvt, Tensor3};

#[derive(Debug, Clone)]
pub struct ServerState {
    z: Tensor3,
    y: Tensor3,
    beta: f64,
    rho: f64,
    p: f64,
}

impl ServerState {
    /// Consensus and dual tensors start at zero.
    pub fn new(d: usize, k: usize, m: usize, beta: f64, rho: f64, p: f64) -> Result<Self> {
        Self::with_state(
            Tensor3::zeros(d, k, m),
            Tensor3::zeros(d, k, m),
            beta,
            rho,
            p,
        )
    }

    pub fn with_state(z: Tensor3, y: Tensor3, beta: f64, rho: f64, p: f64) -> Result<Self> {
        check_same_dims(&z, &y)?;
        if !(rho > 0.0) || !(beta >= 0.0) || !(p > 0.0 && p <= 1.0) {
            return Err(FmtcError::InvalidParameter(format!(
                "need rho > 0, beta >= 0, p in (0, 1]; got rho={rho}, beta={beta}, p={p}"
            )));
        }
        Ok(ServerState { z, y, beta, rho, p })
    }

    pub fn z(&self) -> &Tensor3 {
        &self.z
    }

    pub fn y(&self) -> &Tensor3 {
        &self.y
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// `Z ← TSVT(W + Y/ρ)`, the exact minimizer of
    /// `β||Z||_{S_p}^p + ρ/2 ||Z - (W + Y/ρ)||_F²`.
    pub fn update_z(&mut self, w_stack: &Tensor3) -> Result<&Tensor3> {
        check_same_dims(w_stack, &self.z)?;
        let target = w_stack.add_scaled(&self.y, 1.0 / self.rho)?;
        self.z = tsvt(&target, self.beta, self.rho, self.p)?;
        Ok(&self.z)
    }

    /// Dual ascent `Y ← Y + ρ(W - Z)` using the current `Z`.
    pub fn update_y(&mut self, w_stack: &Tensor3) -> Result<&Tensor3> {
        let resid = w_stack.add_scaled(&self.z, -1.0)?;
        self.y = self.y.add_scaled(&resid, self.rho)?;
        Ok(&self.y)
    }

    /// The Z-subproblem objective at an arbitrary `z`, for optimality probes.
    pub fn z_objective(&self, z: &Tensor3, w_stack: &Tensor3, y: &Tensor3) -> Result<f64> {
        let target = w_stack.add_scaled(y, 1.0 / self.rho)?;
        let diff = z.add_scaled(&target, -1.0)?.frobenius_norm();
        Ok(self.beta * crate::tensor::schatten_p_norm(z, self.p)? + 0.5 * self.rho * diff * diff)
    }
}

/// `||W - Z||_F` over the whole tensor.
pub fn primal_residual(w_stack: &Tensor3, z: &Tensor3) -> Result<f64> {
    Ok(w_stack.add_scaled(z, -1.0)?.frobenius_norm())
}

/// `ρ ||Z_new - Z_old||_F`.
pub fn dual_residual(z_new: &Tensor3, z_old: &Tensor3, rho: f64) -> Result<f64> {
    Ok(rho * z_new.add_scaled(z_old, -1.0)?.frobenius_norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut impl Rng, d: usize, k: usize, m: usize) -> Tensor3 {
        Tensor3::from_slices(
            (0..m)
                .map(|_| DMatrix::from_fn(d, k, |_, _| rng.random_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_beta_z_is_shifted_w() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_tensor(&mut rng, 4, 2, 3);
        let y = random_tensor(&mut rng, 4, 2, 3);
        let mut srv =
            ServerState::with_state(Tensor3::zeros(4, 2, 3), y.clone(), 0.0, 2.0, 1.0).unwrap();
        let z = srv.update_z(&w).unwrap().clone();
        assert_eq!(z, w.add_scaled(&y, 0.5).unwrap());
    }

    #[test]
    fn huge_beta_zeroes_consensus() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random_tensor(&mut rng, 4, 2, 3);
        let mut srv = ServerState::new(4, 2, 3, 1e6, 1.0, 1.0).unwrap();
        assert_eq!(srv.update_z(&w).unwrap().frobenius_norm(), 0.0);
    }

    #[test]
    fn single_client_matches_matrix_svt() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (beta, rho) = (0.6, 1.5);
        let w = random_tensor(&mut rng, 5, 3, 1);
        let mut srv = ServerState::new(5, 3, 1, beta, rho, 1.0).unwrap();
        let z = srv.update_z(&w).unwrap().clone();

        let svd = w.slice(0).clone().svd(true, true);
        let shrunk = svd.singular_values.map(|s| (s - beta / rho).max(0.0));
        let oracle = svd.u.unwrap() * DMatrix::from_diagonal(&shrunk) * svd.v_t.unwrap();
        assert!((z.slice(0) - oracle).amax() < 1e-10);
    }

    #[test]
    fn dual_update_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random_tensor(&mut rng, 3, 2, 2);
        let y0 = random_tensor(&mut rng, 3, 2, 2);
        let mut srv = ServerState::with_state(w.clone(), y0.clone(), 0.1, 1.0, 1.0).unwrap();
        assert_eq!(srv.update_y(&w).unwrap(), &y0);

        let ones = Tensor3::from_slices(vec![DMatrix::from_element(3, 2, 1.0); 2]).unwrap();
        let mut srv = ServerState::new(3, 2, 2, 0.1, 2.0, 1.0).unwrap();
        let y = srv.update_y(&ones).unwrap();
        assert!(y.slices().iter().all(|s| s.iter().all(|&v| v == 2.0)));

        let z = random_tensor(&mut rng, 3, 2, 2);
        let mut srv = ServerState::with_state(z.clone(), y0.clone(), 0.1, 0.7, 1.0).unwrap();
        let y_new = srv.update_y(&w).unwrap().clone();
        let step = y_new.add_scaled(&y0, -1.0).unwrap().frobenius_norm();
        assert!((step - 0.7 * primal_residual(&w, &z).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn primal_residual_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random_tensor(&mut rng, 3, 2, 4);
        assert_eq!(primal_residual(&w, &w).unwrap(), 0.0);

        let mut single = Tensor3::zeros(3, 2, 2);
        single.slice_mut(1)[(2, 1)] = 3.0;
        assert_eq!(
            primal_residual(&single, &Tensor3::zeros(3, 2, 2)).unwrap(),
            3.0
        );

        let z = random_tensor(&mut rng, 3, 2, 4);
        let mut ss = 0.0;
        for t in 0..4 {
            for i in 0..3 {
                for j in 0..2 {
                    ss += (w.slice(t)[(i, j)] - z.slice(t)[(i, j)]).powi(2);
                }
            }
        }
        assert!((primal_residual(&w, &z).unwrap() - ss.sqrt()).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn z_update_survives_perturbation_probe(seed in any::<u64>(), beta in 0.0f64..1.0, rho in 0.1f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random_tensor(&mut rng, 4, 3, 3);
            let y = random_tensor(&mut rng, 4, 3, 3);
            let mut srv =
                ServerState::with_state(Tensor3::zeros(4, 3, 3), y.clone(), beta, rho, 1.0).unwrap();
            let z = srv.update_z(&w).unwrap().clone();
            let base = srv.z_objective(&z, &w, &y).unwrap();
            for _ in 0..100 {
                let dir = random_tensor(&mut rng, 4, 3, 3);
                let moved = z.add_scaled(&dir, 1e-3 / dir.frobenius_norm()).unwrap();
                prop_assert!(srv.z_objective(&moved, &w, &y).unwrap() >= base - 1e-12);
            }
        }

        #[test]
        fn dual_residual_scales_consensus_step(seed in any::<u64>(), rho in 0.01f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_tensor(&mut rng, 2, 2, 2);
            let b = random_tensor(&mut rng, 2, 2, 2);
            let direct = a.add_scaled(&b, -1.0).unwrap().frobenius_norm() * rho;
            prop_assert!((dual_residual(&a, &b, rho).unwrap() - direct).abs() <= 1e-12 * (1.0 + direct));
        }
    }
}
