//! Point evaluation of every field derivative the drift and entropy
//! formulas consume, plus the noise-induced drifts of the overdamped
//! equation in both stochastic conventions.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::matrixfun::SquareMatrix;
use crate::system::SystemSpec;

/// Every field value and derivative at one `(t, q)`, with the composite
/// quantities (`H`, `gamma_tilde` and its inverse and derivatives, `sigma`
/// and its derivatives, the total force `F`) precomputed.
///
/// Index conventions: `jac_psi[(i, j)] = d_{q^i} psi_j`,
/// `hess_psi[c][(i, j)] = d_{q^i} d_{q^j} psi_c`,
/// `dt_jac_psi[(i, j)] = d_t d_{q^i} psi_j`, `dgamma[k] = d_{q^k} gamma`,
/// `jac_force[(i, j)] = d_{q^i} F_j`.
#[derive(Clone, Debug)]
pub struct DerivativeBundle {
    pub t: f64,
    pub q: DVector<f64>,

    pub beta: f64,
    pub dbeta_dt: f64,
    pub grad_beta: DVector<f64>,
    pub hess_beta: DMatrix<f64>,

    pub v: f64,
    pub dv_dt: f64,
    pub grad_v: DVector<f64>,
    pub hess_v: DMatrix<f64>,

    pub psi: DVector<f64>,
    pub dpsi_dt: DVector<f64>,
    pub jac_psi: DMatrix<f64>,
    pub hess_psi: Vec<DMatrix<f64>>,
    pub dt_jac_psi: DMatrix<f64>,

    pub f_ext: DVector<f64>,
    pub jac_f_ext: DMatrix<f64>,

    pub gamma: SquareMatrix,
    pub dgamma: Vec<SquareMatrix>,
    pub sigma: SquareMatrix,
    pub dsigma: Vec<SquareMatrix>,

    /// `H_{ik} = d_{q^i} psi_k - d_{q^k} psi_i` (antisymmetric).
    pub h: SquareMatrix,
    pub dh: Vec<SquareMatrix>,

    pub gamma_tilde: SquareMatrix,
    pub gamma_tilde_inv: SquareMatrix,
    pub dgamma_tilde: Vec<SquareMatrix>,
    pub dgamma_tilde_inv: Vec<SquareMatrix>,

    /// `F = -d_t psi - grad V + F_ext`.
    pub force: DVector<f64>,
    pub jac_force: DMatrix<f64>,
}

impl DerivativeBundle {
    pub fn evaluate(spec: &SystemSpec, t: f64, q: &DVector<f64>) -> Result<Self> {
        let n = spec.dim();
        if q.len() != n {
            return Err(Error::Incompatible(format!(
                "point has dimension {}, system has {n}",
                q.len()
            )));
        }
        let beta = spec.beta(t, q);
        if !(beta.value > 0.0) {
            return Err(Error::SpectralPrecondition(format!(
                "beta = {} must be positive at t={t}",
                beta.value
            )));
        }
        let v = spec.potential(t, q);
        let psi = spec.psi(t, q);
        let f_ext = spec.f_ext(t, q);
        let gamma = spec.gamma(q);

        // H and its spatial derivatives from the psi Jacobian/Hessian.
        let h = DMatrix::from_fn(n, n, |i, k| psi.jac[(i, k)] - psi.jac[(k, i)]);
        let dh: Vec<SquareMatrix> = (0..n)
            .map(|k| {
                DMatrix::from_fn(n, n, |i, j| psi.hess[j][(k, i)] - psi.hess[i][(k, j)])
            })
            .collect();

        let gamma_tilde = &gamma.value - &h;
        let gamma_tilde_inv = gamma_tilde
            .clone()
            .lu()
            .try_inverse()
            .ok_or_else(|| Error::Singular("gamma_tilde is not invertible".into()))?;
        let inv_residual =
            (&gamma_tilde_inv * &gamma_tilde - DMatrix::<f64>::identity(n, n)).amax();
        if inv_residual > 1e-12 {
            return Err(Error::Numerical(format!(
                "gamma_tilde inverse residual {inv_residual:.3e} exceeds 1e-12"
            )));
        }
        let dgamma_tilde: Vec<SquareMatrix> =
            (0..n).map(|k| &gamma.dq[k] - &dh[k]).collect();
        let dgamma_tilde_inv: Vec<SquareMatrix> = dgamma_tilde
            .iter()
            .map(|d| -(&gamma_tilde_inv * d * &gamma_tilde_inv))
            .collect();

        // sigma = (2 beta^{-1} gamma)^{1/2} through the eigensystem of
        // Sigma, and d_k sigma from the Sylvester equation
        // sigma X + X sigma = d_k Sigma.
        let sigma_full = &gamma.value * (2.0 / beta.value);
        let eig = nalgebra::SymmetricEigen::new(sigma_full.clone());
        if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
            return Err(Error::SpectralPrecondition(
                "Sigma = 2 beta^{-1} gamma is not positive definite".into(),
            ));
        }
        let roots = eig.eigenvalues.map(f64::sqrt);
        let sigma = &eig.eigenvectors
            * DMatrix::from_diagonal(&roots)
            * eig.eigenvectors.transpose();
        let dsigma: Vec<SquareMatrix> = (0..n)
            .map(|k| {
                let dsigma_full = &gamma.dq[k] * (2.0 / beta.value)
                    - &gamma.value * (2.0 * beta.grad[k] / (beta.value * beta.value));
                let rotated = eig.eigenvectors.transpose() * dsigma_full * &eig.eigenvectors;
                let solved = DMatrix::from_fn(n, n, |i, j| rotated[(i, j)] / (roots[i] + roots[j]));
                &eig.eigenvectors * solved * eig.eigenvectors.transpose()
            })
            .collect();

        // F = -d_t psi - grad V + F_ext and its Jacobian.
        let force = -&psi.dt - &v.grad + &f_ext.value;
        let jac_force = DMatrix::from_fn(n, n, |i, j| {
            -psi.dt_jac[(i, j)] - v.hess[(i, j)] + f_ext.jac[(i, j)]
        });

        Ok(Self {
            t,
            q: q.clone(),
            beta: beta.value,
            dbeta_dt: beta.dt,
            grad_beta: beta.grad,
            hess_beta: beta.hess,
            v: v.value,
            dv_dt: v.dt,
            grad_v: v.grad,
            hess_v: v.hess,
            psi: psi.value,
            dpsi_dt: psi.dt,
            jac_psi: psi.jac,
            hess_psi: psi.hess,
            dt_jac_psi: psi.dt_jac,
            f_ext: f_ext.value,
            jac_f_ext: f_ext.jac,
            gamma: gamma.value,
            dgamma: gamma.dq,
            sigma,
            dsigma,
            h,
            dh,
            gamma_tilde,
            gamma_tilde_inv,
            dgamma_tilde,
            dgamma_tilde_inv,
            force,
            jac_force,
        })
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    /// Overdamped Ito drift `gamma_tilde^{-1} F + S`.
    pub fn drift_ito(&self) -> DVector<f64> {
        &self.gamma_tilde_inv * &self.force + noise_induced_drift_ito(self)
    }

    /// Overdamped Stratonovich drift `gamma_tilde^{-1} F + S_tilde`.
    pub fn drift_strat(&self) -> DVector<f64> {
        &self.gamma_tilde_inv * &self.force + noise_induced_drift_strat(self)
    }

    /// Effective overdamped noise matrix `gamma_tilde^{-1} sigma`.
    pub fn effective_noise(&self) -> SquareMatrix {
        &self.gamma_tilde_inv * &self.sigma
    }
}

/// Noise-induced drift in the Ito convention:
/// `S^i = beta^{-1} d_{q^j} (gamma_tilde^{-1})^{ij}`.
pub fn noise_induced_drift_ito(bundle: &DerivativeBundle) -> DVector<f64> {
    let n = bundle.dim();
    DVector::from_fn(n, |i, _| {
        let mut acc = 0.0;
        for j in 0..n {
            acc += bundle.dgamma_tilde_inv[j][(i, j)];
        }
        acc / bundle.beta
    })
}

/// Noise-induced drift in the Stratonovich convention:
/// `S~^i = beta^{-1} d_{q^j}(gt^{-1})^{il} (gt^{-1})^{jk} H_{lk}
///          - 1/2 sum_xi (gt^{-1})^{il} d_{q^k} sigma_{l xi} (gt^{-1} sigma)^k_xi`.
pub fn noise_induced_drift_strat(bundle: &DerivativeBundle) -> DVector<f64> {
    let n = bundle.dim();
    let a = bundle.effective_noise();
    DVector::from_fn(n, |i, _| {
        let mut term1 = 0.0;
        for j in 0..n {
            for l in 0..n {
                for k in 0..n {
                    term1 += bundle.dgamma_tilde_inv[j][(i, l)]
                        * bundle.gamma_tilde_inv[(j, k)]
                        * bundle.h[(l, k)];
                }
            }
        }
        let mut term2 = 0.0;
        for xi in 0..n {
            for l in 0..n {
                for k in 0..n {
                    term2 += bundle.gamma_tilde_inv[(i, l)]
                        * bundle.dsigma[k][(l, xi)]
                        * a[(k, xi)];
                }
            }
        }
        term1 / bundle.beta - 0.5 * term2
    })
}

/// The Ito minus Stratonovich drift correction
/// `1/2 sum_xi d_{q^k}(gt^{-1} sigma)^i_xi (gt^{-1} sigma)^k_xi`.
pub fn ito_strat_correction(bundle: &DerivativeBundle) -> DVector<f64> {
    let n = bundle.dim();
    let a = bundle.effective_noise();
    let da: Vec<SquareMatrix> = (0..n)
        .map(|k| {
            &bundle.dgamma_tilde_inv[k] * &bundle.sigma + &bundle.gamma_tilde_inv * &bundle.dsigma[k]
        })
        .collect();
    DVector::from_fn(n, |i, _| {
        let mut acc = 0.0;
        for xi in 0..n {
            for k in 0..n {
                acc += da[k][(i, xi)] * a[(k, xi)];
            }
        }
        0.5 * acc
    })
}
