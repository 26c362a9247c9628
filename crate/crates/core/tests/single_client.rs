//! One client with no regularizer: the federated loop must reduce to plain
//! alternating minimization with a proximal anchor on `W`.

use fmtc_core::io::{generate_synthetic, SyntheticSpec};
use fmtc_core::orchestrator::{fit, HyperParams};
use nalgebra::DMatrix;

fn objective(l: &DMatrix<f64>, f: &DMatrix<f64>, a: &DMatrix<f64>, alpha: f64) -> f64 {
    (f.transpose() * l * f).trace() + alpha * (f - a).norm_squared()
}

fn polar(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    svd.u.unwrap() * svd.v_t.unwrap()
}

/// Plain solver: exact ridge step toward an anchor (zero at the start, then
/// the previous `W`), then projected gradient steps with step halving on `F`.
struct Standalone {
    x: DMatrix<f64>,
    l: DMatrix<f64>,
    anchor: DMatrix<f64>,
    w: DMatrix<f64>,
    f: DMatrix<f64>,
}

impl Standalone {
    fn step(&mut self, alpha: f64, rho: f64, eta: f64, inner: usize) {
        let d = self.x.ncols();
        let h = self.x.transpose() * &self.x * (2.0 * alpha) + DMatrix::identity(d, d) * rho;
        let rhs = self.x.transpose() * &self.f * (2.0 * alpha) + &self.anchor * rho;
        self.w = h.lu().solve(&rhs).unwrap();
        self.anchor = self.w.clone();
        let a = &self.x * &self.w;
        let mut obj = objective(&self.l, &self.f, &a, alpha);
        for _ in 0..inner {
            let g = &self.l * &self.f + (&self.f - &a) * alpha;
            let mut s = eta;
            let mut moved = false;
            for _ in 0..=20 {
                let cand = polar(&(&self.f - &g * s));
                let c = objective(&self.l, &cand, &a, alpha);
                if c <= obj {
                    self.f = cand;
                    obj = c;
                    moved = true;
                    break;
                }
                s *= 0.5;
            }
            if !moved {
                break;
            }
        }
    }
}

#[test]
fn trajectory_matches_standalone_solver() {
    let spec = SyntheticSpec {
        clients: 1,
        clusters: 3,
        features: 5,
        samples: 40,
        separation: 5.0,
        mean_shift: 0.0,
        seed: 11,
    };
    let x = generate_synthetic(&spec).unwrap().remove(0).0;
    for (alpha, rho, eta) in [(1.0, 1.0, 0.1), (0.01, 0.3, 0.5), (5.0, 0.05, 0.2)] {
        let h = HyperParams {
            alpha,
            beta: 0.0,
            rho,
            eta,
            clusters: 3,
            knn_k: 6,
            tol_obj: 1e-300,
            tol_primal: 1e-300,
            max_rounds: 0,
            ..HyperParams::default()
        };
        let init = fit(std::slice::from_ref(&x), &h).unwrap();
        let mut plain = Standalone {
            x: x.values().clone(),
            l: init.client(0).laplacian().values().clone(),
            anchor: DMatrix::zeros(5, 3),
            w: init.w(0).clone(),
            f: init.f(0).clone(),
        };
        for k in 1..=15 {
            plain.step(alpha, rho, eta, h.inner_iters);
            let m = fit(
                std::slice::from_ref(&x),
                &HyperParams {
                    max_rounds: k,
                    ..h.clone()
                },
            )
            .unwrap();
            assert_eq!(m.trace().len(), k);
            let dw = (m.w(0) - &plain.w).amax();
            let df = (m.f(0) - &plain.f).amax();
            assert!(
                dw <= 1e-8 && df <= 1e-8,
                "alpha {alpha} round {k}: dW {dw:e}, dF {df:e}"
            );
            assert_eq!(m.trace().last().unwrap().primal_residual, 0.0);
        }
    }
}
