//! Exact solution of the velocity-space cell problem
//! `L chi = B(z, ..., z) - <B>_h` for multilinear sources `B`, where
//! `L = 1/2 Sigma_{xi zeta} d_xi d_zeta - (gt z) . grad_z` is the generator
//! of the frozen Ornstein-Uhlenbeck process and `h` its Gaussian invariant
//! density.
//!
//! The solution is a polynomial `chi(z) = sum_j A_j(z, ..., z)` with tensor
//! coefficients of ranks `k, k-2, ...` obtained from a descending chain of
//! generalized Lyapunov solves; all derivatives are taken symbolically on
//! the multilinear representation, so residuals sit at solver precision.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::matrixfun::{
    is_symmetric, lyapunov_multilinear, symmetric_part, symmetric_part_eigenvalues,
    MultilinearTensor, SquareMatrix,
};

const SPECTRAL_TOL: f64 = 1e-10;

/// Gaussian moment `E[z_{i_1} ... z_{i_k}]` for `z ~ N(0, beta^{-1} I)`,
/// by Wick pairing: zero for odd `k`, otherwise `beta^{-k/2}` times the
/// number of complete pairings whose paired indices all match.
pub fn gaussian_moment(beta: f64, indices: &[usize]) -> f64 {
    assert!(beta > 0.0, "beta must be positive");
    fn pairings(indices: &[usize]) -> f64 {
        match indices.len() {
            0 => 1.0,
            k if k % 2 == 1 => 0.0,
            _ => {
                let mut acc = 0.0;
                // Pair the first index with each later one; recurse on the rest.
                for j in 1..indices.len() {
                    if indices[0] == indices[j] {
                        let rest: Vec<usize> = indices[1..]
                            .iter()
                            .enumerate()
                            .filter(|&(pos, _)| pos != j - 1)
                            .map(|(_, &i)| i)
                            .collect();
                        acc += pairings(&rest);
                    }
                }
                acc
            }
        }
    }
    let k = indices.len();
    if k % 2 == 1 {
        return 0.0;
    }
    beta.powi(-((k / 2) as i32)) * pairings(indices)
}

/// Gaussian average `<T(z, ..., z)>_h` of a multilinear monomial.
pub fn gaussian_average(beta: f64, tensor: &MultilinearTensor) -> f64 {
    let n = tensor.dim();
    let k = tensor.rank();
    if k % 2 == 1 {
        return 0.0;
    }
    let mut acc = 0.0;
    let mut idx = vec![0usize; k];
    for flat in 0..tensor.data().len() {
        let entry = tensor.data()[flat];
        if entry == 0.0 {
            continue;
        }
        let mut rem = flat;
        for slot in (0..k).rev() {
            idx[slot] = rem % n;
            rem /= n;
        }
        acc += entry * gaussian_moment(beta, &idx);
    }
    acc
}

/// Solution of the cell problem for one multilinear source.
#[derive(Clone, Debug)]
pub struct CellSolution {
    beta: f64,
    gamma_tilde: SquareMatrix,
    gamma: SquareMatrix,
    source: MultilinearTensor,
    /// Coefficients `A_j` of rank `k - 2j`, `j = 0 ..= floor((k-1)/2)`.
    coeffs: Vec<MultilinearTensor>,
}

impl CellSolution {
    /// Assembles a solution object from explicit parts, checking that ranks
    /// descend by 2 from the source rank. Intended for hand-built cases;
    /// [`solve_cell`] is the constructor for actual sources.
    pub fn from_parts(
        beta: f64,
        gamma_tilde: SquareMatrix,
        gamma: SquareMatrix,
        source: MultilinearTensor,
        coeffs: Vec<MultilinearTensor>,
    ) -> Result<Self> {
        if beta <= 0.0 {
            return Err(Error::InvalidInput("beta must be positive".into()));
        }
        for (j, a) in coeffs.iter().enumerate() {
            let want = source.rank() as isize - 2 * j as isize;
            if a.rank() as isize != want || a.dim() != source.dim() {
                return Err(Error::InvalidInput(format!(
                    "coefficient {j} has rank {} / dim {}, expected rank {want} / dim {}",
                    a.rank(),
                    a.dim(),
                    source.dim()
                )));
            }
        }
        Ok(Self { beta, gamma_tilde, gamma, source, coeffs })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn gamma_tilde(&self) -> &SquareMatrix {
        &self.gamma_tilde
    }

    pub fn dim(&self) -> usize {
        self.source.dim()
    }

    pub fn source_rank(&self) -> usize {
        self.source.rank()
    }

    pub fn source(&self) -> &MultilinearTensor {
        &self.source
    }

    pub fn coefficients(&self) -> &[MultilinearTensor] {
        &self.coeffs
    }

    /// `chi(z) = sum_j A_j(z, ..., z)`.
    pub fn eval(&self, z: &DVector<f64>) -> f64 {
        self.coeffs.iter().map(|a| eval_monomial(a, z)).sum()
    }

    /// `grad_z chi` evaluated symbolically.
    pub fn grad_z(&self, z: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        let mut g = DVector::zeros(n);
        for a in &self.coeffs {
            g += monomial_gradient(a, z);
        }
        g
    }

    /// Hessian `d_xi d_zeta chi` evaluated symbolically.
    pub fn hess_z(&self, z: &DVector<f64>) -> SquareMatrix {
        let n = self.dim();
        let mut h = DMatrix::zeros(n, n);
        for a in &self.coeffs {
            h += monomial_hessian(a, z);
        }
        h
    }

    /// Analytic Gaussian average of `grad_z chi` under `N(0, beta^{-1} I)`.
    pub fn gaussian_average_grad(&self) -> DVector<f64> {
        let n = self.dim();
        let mut out = DVector::zeros(n);
        for a in &self.coeffs {
            let r = a.rank();
            if r == 0 {
                continue;
            }
            let mut idx = vec![0usize; r];
            for flat in 0..a.data().len() {
                let entry = a.data()[flat];
                if entry == 0.0 {
                    continue;
                }
                let mut rem = flat;
                for slot in (0..r).rev() {
                    idx[slot] = rem % n;
                    rem /= n;
                }
                for slot in 0..r {
                    let rest: Vec<usize> = idx
                        .iter()
                        .enumerate()
                        .filter(|&(s, _)| s != slot)
                        .map(|(_, &i)| i)
                        .collect();
                    out[idx[slot]] += entry * gaussian_moment(self.beta, &rest);
                }
            }
        }
        out
    }

    /// Analytic Gaussian average of `chi(z) z_comp` under `N(0, beta^{-1} I)`.
    pub fn gaussian_average_times_z(&self, comp: usize) -> f64 {
        let n = self.dim();
        assert!(comp < n, "component out of range");
        let mut acc = 0.0;
        for a in &self.coeffs {
            let r = a.rank();
            let mut idx = vec![0usize; r + 1];
            for flat in 0..a.data().len() {
                let entry = a.data()[flat];
                if entry == 0.0 {
                    continue;
                }
                let mut rem = flat;
                for slot in (0..r).rev() {
                    idx[slot] = rem % n;
                    rem /= n;
                }
                idx[r] = comp;
                acc += entry * gaussian_moment(self.beta, &idx);
            }
        }
        acc
    }
}

fn eval_monomial(a: &MultilinearTensor, z: &DVector<f64>) -> f64 {
    let args: Vec<&DVector<f64>> = (0..a.rank()).map(|_| z).collect();
    a.eval(&args)
}

fn monomial_gradient(a: &MultilinearTensor, z: &DVector<f64>) -> DVector<f64> {
    let n = a.dim();
    let r = a.rank();
    let mut g = DVector::zeros(n);
    for slot in 0..r {
        // Contract every slot except `slot` with z (from the back, so the
        // surviving slot's position stays valid), leaving a rank-1 tensor.
        let mut t = a.clone();
        for s in (0..r).rev() {
            if s != slot {
                t = t.contract_slot(s, z);
            }
        }
        for i in 0..n {
            g[i] += t.get(&[i]);
        }
    }
    g
}

fn monomial_hessian(a: &MultilinearTensor, z: &DVector<f64>) -> SquareMatrix {
    let n = a.dim();
    let r = a.rank();
    let mut h = DMatrix::zeros(n, n);
    if r < 2 {
        return h;
    }
    for s1 in 0..r {
        for s2 in (s1 + 1)..r {
            let mut t = a.clone();
            for s in (0..r).rev() {
                if s != s1 && s != s2 {
                    t = t.contract_slot(s, z);
                }
            }
            // Free slots keep order (s1, s2); the ordered pair (s2, s1)
            // contributes the transpose.
            for i in 0..n {
                for j in 0..n {
                    let v = t.get(&[i, j]);
                    h[(i, j)] += v;
                    h[(j, i)] += v;
                }
            }
        }
    }
    h
}

/// Solves the cell problem `L chi = B(z,...,z) - <B>_h` for a rank-k source.
///
/// The coefficients follow the descending chain: `A_0` solves the
/// generalized Lyapunov equation `sum_a A_0(.., gt v_a, ..) = -B`, and each
/// `A_j` solves the same equation with source `-2 beta^{-1} sum_{a<d}
/// A_{j-1}^{(a d)}`, where the superscript contracts slots `a, d` against
/// `gamma`.
pub fn solve_cell(
    beta: f64,
    gamma_tilde: &SquareMatrix,
    gamma: &SquareMatrix,
    source: &MultilinearTensor,
) -> Result<CellSolution> {
    if beta <= 0.0 {
        return Err(Error::InvalidInput("beta must be positive".into()));
    }
    if gamma_tilde.nrows() != source.dim() || gamma.nrows() != source.dim() {
        return Err(Error::Incompatible("matrix and tensor dimensions differ".into()));
    }
    let sym = symmetric_part(gamma_tilde);
    if (&sym - gamma).amax() > 1e-10 * (1.0 + gamma.amax()) {
        return Err(Error::Incompatible(
            "gamma must be the symmetric part of gamma_tilde".into(),
        ));
    }
    if !is_symmetric(gamma, 1e-10 * (1.0 + gamma.amax())) {
        return Err(Error::InvalidInput("gamma must be symmetric".into()));
    }
    let eig = symmetric_part_eigenvalues(gamma_tilde)?;
    if eig[0] <= SPECTRAL_TOL {
        return Err(Error::SpectralPrecondition(format!(
            "gamma_tilde symmetric part must be positive definite (min eigenvalue {:.3e})",
            eig[0]
        )));
    }
    let k = source.rank();
    if k == 0 {
        return Err(Error::InvalidInput("source rank must be at least 1".into()));
    }

    let neg_gt = -gamma_tilde;
    let mut coeffs = Vec::new();
    // A_0: sum_a X(.., gt v_a, ..) = -B, i.e. the solver's equation with
    // coefficient matrix -gt and right-hand tensor -B.
    let mut prev = lyapunov_multilinear(&neg_gt, &source.scaled(-1.0))?;
    coeffs.push(prev.clone());
    while prev.rank() >= 3 {
        let r = prev.rank();
        let mut contracted = MultilinearTensor::zeros(source.dim(), r - 2);
        for a in 0..r {
            for d in (a + 1)..r {
                contracted = contracted.add(&prev.contract_pair(a, d, gamma))?;
            }
        }
        let next_source = contracted.scaled(2.0 / beta);
        prev = lyapunov_multilinear(&neg_gt, &next_source)?;
        coeffs.push(prev.clone());
    }

    CellSolution::from_parts(beta, gamma_tilde.clone(), gamma.clone(), source.clone(), coeffs)
}

/// Evaluates the generator `(L chi)(z) = 1/2 Sigma_{xi zeta} d_xi d_zeta chi
/// - (gt z) . grad_z chi` analytically. `chi` must have been built at the
/// same `(beta, gamma_tilde)`.
pub fn apply_l(
    beta: f64,
    gamma_tilde: &SquareMatrix,
    sigma: &SquareMatrix,
    chi: &CellSolution,
    z: &DVector<f64>,
) -> Result<f64> {
    if (beta - chi.beta).abs() > 1e-12 * (1.0 + beta.abs())
        || (gamma_tilde - &chi.gamma_tilde).amax() > 1e-12 * (1.0 + gamma_tilde.amax())
    {
        return Err(Error::Incompatible(
            "chi was built at different (beta, gamma_tilde) parameters".into(),
        ));
    }
    if sigma.nrows() != chi.dim() || z.len() != chi.dim() {
        return Err(Error::Incompatible("dimension mismatch in apply_l".into()));
    }
    let hess = chi.hess_z(z);
    let grad = chi.grad_z(z);
    let diffusion = 0.5 * (sigma * &hess).trace();
    let drift = (gamma_tilde * z).dot(&grad);
    Ok(diffusion - drift)
}

/// Draws `sample_count` points `z ~ N(0, beta^{-1} I)` from a fixed stream
/// and returns the maximum absolute cell-equation residual
/// `|L chi(z) - B(z,...,z) + <B>_h|` over the sample, with
/// `Sigma = 2 beta^{-1} gamma` (fluctuation-dissipation).
pub fn verify_residual(chi: &CellSolution, sample_count: usize) -> f64 {
    let n = chi.dim();
    let beta = chi.beta;
    let sigma = &chi.gamma * (2.0 / beta);
    let avg = gaussian_average(beta, &chi.source);
    let scale = beta.sqrt().recip();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6365_6c6c);
    let mut worst = 0.0f64;
    for _ in 0..sample_count {
        let z = DVector::from_fn(n, |_, _| {
            let g: f64 = StandardNormal.sample(&mut rng);
            g * scale
        });
        let lhs = apply_l(beta, &chi.gamma_tilde, &sigma, chi, &z)
            .expect("chi parameters match by construction");
        let source_val = eval_monomial(&chi.source, &z);
        worst = worst.max((lhs - source_val + avg).abs());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrixfun::triple_exp_integral;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stable_pair(
        rng: &mut ChaCha8Rng,
        n: usize,
        lo: f64,
        hi: f64,
        skew: f64,
    ) -> (SquareMatrix, SquareMatrix) {
        // Symmetric part with spectrum in [lo, hi] plus an antisymmetric part.
        let a = SquareMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let q = (&a - a.transpose()) * 0.5;
        let rot = crate::matrixfun::mat_exp(&q, 1.0).unwrap();
        let eigs = DVector::from_fn(n, |_, _| rng.random_range(lo..hi));
        let sym = &rot * DMatrix::from_diagonal(&eigs) * rot.transpose();
        let sym = symmetric_part(&sym);
        let gt = if skew == 0.0 {
            sym.clone()
        } else {
            let b = SquareMatrix::from_fn(n, n, |_, _| rng.random_range(-skew..skew));
            &sym + (&b - b.transpose()) * 0.5
        };
        (gt, sym)
    }

    #[test]
    fn gaussian_moment_second_order() {
        for beta in [0.5, 1.0, 3.0] {
            assert_abs_diff_eq!(gaussian_moment(beta, &[0, 0]), 1.0 / beta, epsilon = 1e-15);
            assert_abs_diff_eq!(gaussian_moment(beta, &[0, 1]), 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn gaussian_moment_fourth_order() {
        let beta = 2.0;
        let b2 = beta * beta;
        // E[z_i z_j z_k z_l] = beta^{-2} (d_ij d_kl + d_ik d_jl + d_il d_jk)
        assert_abs_diff_eq!(gaussian_moment(beta, &[0, 0, 0, 0]), 3.0 / b2, epsilon = 1e-15);
        assert_abs_diff_eq!(gaussian_moment(beta, &[0, 0, 1, 1]), 1.0 / b2, epsilon = 1e-15);
        assert_abs_diff_eq!(gaussian_moment(beta, &[0, 1, 0, 1]), 1.0 / b2, epsilon = 1e-15);
        assert_abs_diff_eq!(gaussian_moment(beta, &[0, 1, 1, 0]), 1.0 / b2, epsilon = 1e-15);
        assert_abs_diff_eq!(gaussian_moment(beta, &[0, 0, 0, 1]), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn gaussian_moment_odd_is_zero() {
        assert_eq!(gaussian_moment(1.7, &[0]), 0.0);
        assert_eq!(gaussian_moment(1.7, &[0, 1, 1]), 0.0);
        assert_eq!(gaussian_moment(1.7, &[2, 2, 2, 1, 1]), 0.0);
    }

    #[test]
    fn gaussian_moment_stein_identity_exhaustive() {
        // E[z_i P(z)] = beta^{-1} E[d_i P(z)] for monomials P = z_{j1}..z_{jk},
        // i.e. moment([i, J]) = beta^{-1} sum_a d_{i, j_a} moment(J \ j_a).
        let beta = 1.3;
        let n = 2usize;
        for k in 0..=5usize {
            let count = n.pow(k as u32);
            for code in 0..count {
                let mut idx = vec![0usize; k];
                let mut rem = code;
                for slot in (0..k).rev() {
                    idx[slot] = rem % n;
                    rem /= n;
                }
                for i in 0..n {
                    let mut full = vec![i];
                    full.extend_from_slice(&idx);
                    let lhs = gaussian_moment(beta, &full);
                    let mut rhs = 0.0;
                    for a in 0..k {
                        if idx[a] == i {
                            let rest: Vec<usize> = idx
                                .iter()
                                .enumerate()
                                .filter(|&(s, _)| s != a)
                                .map(|(_, &j)| j)
                                .collect();
                            rhs += gaussian_moment(beta, &rest) / beta;
                        }
                    }
                    assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-13);
                }
            }
        }
    }

    #[test]
    fn solve_cell_rank1_scalar_matrix() {
        // gt = cI, B(v) = b . v: chi(z) = -(b . z)/c.
        let c = 2.0;
        let n = 3;
        let gt = SquareMatrix::identity(n, n) * c;
        let b = MultilinearTensor::from_fn(n, 1, |idx| [0.7, -1.2, 0.4][idx[0]]);
        let chi = solve_cell(1.5, &gt, &gt, &b).unwrap();
        assert_eq!(chi.coefficients().len(), 1);
        for i in 0..n {
            assert_abs_diff_eq!(
                chi.coefficients()[0].get(&[i]),
                -[0.7, -1.2, 0.4][i] / c,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn solve_cell_matches_chi1_display() {
        // k = 3 source B^{i1 i2 i3} = 1/2 d^{i1 i2} w^{i3} reproduces
        // chi(z) = -1/2 d^{i1 i2} w^{i3} G_{i1 i2 i3}^{j1 j2 j3} (z_{j1} z_{j2} z_{j3}
        //   + 2 beta^{-1} (g_{j1 j2} d_{j3 l} + g_{j1 j3} d_{j2 l} + g_{j2 j3} d_{j1 l})
        //     (gt^{-1})^{l k'} z_{k'}).
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for trial in 0..10 {
            let n = 2 + trial % 2;
            let beta = rng.random_range(0.5..3.0);
            let (gt, gamma) = random_stable_pair(&mut rng, n, 0.4, 3.0, 1.0);
            let w = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let b = MultilinearTensor::from_fn(n, 3, |idx| {
                if idx[0] == idx[1] {
                    0.5 * w[idx[2]]
                } else {
                    0.0
                }
            });
            let chi = solve_cell(beta, &gt, &gamma, &b).unwrap();
            let g6 = triple_exp_integral(&gt).unwrap();
            let gt_inv = gt.clone().try_inverse().unwrap();
            for _ in 0..20 {
                let z = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
                let mut want = 0.0;
                for i1 in 0..n {
                    for i3 in 0..n {
                        for j1 in 0..n {
                            for j2 in 0..n {
                                for j3 in 0..n {
                                    let gv = g6.get(&[i1, i1, i3, j1, j2, j3]);
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    let cubic = z[j1] * z[j2] * z[j3];
                                    let mut linear = 0.0;
                                    for l in 0..n {
                                        let pair = gamma[(j1, j2)] * ((j3 == l) as i32 as f64)
                                            + gamma[(j1, j3)] * ((j2 == l) as i32 as f64)
                                            + gamma[(j2, j3)] * ((j1 == l) as i32 as f64);
                                        if pair == 0.0 {
                                            continue;
                                        }
                                        for kk in 0..n {
                                            linear += pair * gt_inv[(l, kk)] * z[kk];
                                        }
                                    }
                                    want +=
                                        -0.5 * w[i3] * gv * (cubic + 2.0 / beta * linear);
                                }
                            }
                        }
                    }
                }
                let got = chi.eval(&z);
                assert!(
                    (got - want).abs() <= 1e-9 * (1.0 + want.abs()),
                    "trial {trial}: got {got}, display {want}"
                );
            }
        }
    }

    #[test]
    fn apply_l_constant_is_zero() {
        let n = 2;
        let gt = SquareMatrix::identity(n, n);
        let mut c0 = MultilinearTensor::zeros(n, 0);
        c0.set(&[], 4.2);
        let chi =
            CellSolution::from_parts(1.0, gt.clone(), gt.clone(), MultilinearTensor::zeros(n, 0), vec![c0])
                .unwrap();
        let sigma = SquareMatrix::identity(n, n) * 0.7;
        let z = DVector::from_vec(vec![0.3, -1.1]);
        assert_abs_diff_eq!(apply_l(1.0, &gt, &sigma, &chi, &z).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn apply_l_linear_case() {
        // chi(z) = a . z with arbitrary Sigma: L chi = -(gt^T a) . z.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 3;
        let gt = SquareMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0))
            + SquareMatrix::identity(n, n) * 2.0;
        let a = MultilinearTensor::from_fn(n, 1, |idx| [1.0, -0.5, 0.25][idx[0]]);
        let av = DVector::from_vec(vec![1.0, -0.5, 0.25]);
        let chi = CellSolution::from_parts(
            2.0,
            gt.clone(),
            symmetric_part(&gt),
            MultilinearTensor::zeros(n, 1),
            vec![a],
        )
        .unwrap();
        let sigma = SquareMatrix::from_fn(n, n, |i, j| ((i + j) as f64).sin());
        for _ in 0..20 {
            let z = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let want = -(gt.transpose() * &av).dot(&z);
            assert_abs_diff_eq!(
                apply_l(2.0, &gt, &sigma, &chi, &z).unwrap(),
                want,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn apply_l_rejects_mismatched_parameters() {
        let n = 2;
        let gt = SquareMatrix::identity(n, n);
        let chi = solve_cell(1.0, &gt, &gt, &MultilinearTensor::from_fn(n, 1, |_| 1.0)).unwrap();
        let sigma = SquareMatrix::identity(n, n);
        let z = DVector::zeros(n);
        let other = SquareMatrix::identity(n, n) * 1.5;
        assert!(matches!(apply_l(1.0, &other, &sigma, &chi, &z), Err(Error::Incompatible(_))));
        assert!(matches!(apply_l(1.3, &gt, &sigma, &chi, &z), Err(Error::Incompatible(_))));
    }

    #[test]
    fn odd_rank_cell_equation_has_zero_average() {
        // Random k = 3: L chi(z) + B(z,z,z) = 0 pointwise... up to sign:
        // L chi = B(z,z,z) since <B> = 0 for odd rank.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 2;
        let beta = 1.4;
        let (gt, gamma) = random_stable_pair(&mut rng, n, 0.5, 2.5, 0.8);
        let b = MultilinearTensor::from_fn(n, 3, |_| rng.random_range(-1.0..1.0));
        let chi = solve_cell(beta, &gt, &gamma, &b).unwrap();
        let sigma = &gamma * (2.0 / beta);
        for _ in 0..100 {
            let z = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let lhs = apply_l(beta, &gt, &sigma, &chi, &z).unwrap();
            let want = eval_monomial(&b, &z);
            assert!(
                (lhs - want).abs() <= 1e-9 * (1.0 + want.abs()),
                "L chi = {lhs} vs B = {want}"
            );
        }
    }

    #[test]
    fn residual_small_over_many_seeds() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
            let n = rng.random_range(1..=4usize);
            let k = rng.random_range(1..=5usize);
            let beta = rng.random_range(0.5..4.0);
            let (gt, gamma) = random_stable_pair(&mut rng, n, 0.2, 5.0, 1.0);
            let b = MultilinearTensor::from_fn(n, k, |_| rng.random_range(-1.0..1.0));
            let chi = solve_cell(beta, &gt, &gamma, &b).unwrap();
            let res = verify_residual(&chi, 50);
            // Sampled z have norm a few beta^{-1/2}; bound the comparison by
            // the source size at that scale.
            let z_scale: f64 = 5.0 / beta.sqrt();
            let tol = 1e-9 * (1.0 + b.max_abs() * z_scale.powi(k as i32));
            assert!(res <= tol, "seed {seed} (n={n}, k={k}): residual {res} > {tol}");
        }
    }

    #[test]
    fn solve_cell_is_linear_in_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 3;
        let beta = 2.2;
        let (gt, gamma) = random_stable_pair(&mut rng, n, 0.3, 3.0, 1.0);
        let b1 = MultilinearTensor::from_fn(n, 3, |_| rng.random_range(-1.0..1.0));
        let b2 = MultilinearTensor::from_fn(n, 3, |_| rng.random_range(-1.0..1.0));
        let a = 1.7;
        let combo = b1.scaled(a).add(&b2).unwrap();
        let chi_combo = solve_cell(beta, &gt, &gamma, &combo).unwrap();
        let chi1 = solve_cell(beta, &gt, &gamma, &b1).unwrap();
        let chi2 = solve_cell(beta, &gt, &gamma, &b2).unwrap();
        for _ in 0..30 {
            let z = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let lhs = chi_combo.eval(&z);
            let rhs = a * chi1.eval(&z) + chi2.eval(&z);
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn symmetric_inputs_give_symmetric_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let n = 3;
        let (_, gamma) = random_stable_pair(&mut rng, n, 0.4, 2.0, 0.0);
        // Fully symmetric rank-4 source.
        let raw = MultilinearTensor::from_fn(n, 4, |_| rng.random_range(-1.0..1.0));
        let mut sym = MultilinearTensor::zeros(n, 4);
        let perms: Vec<[usize; 4]> = {
            let mut out = Vec::new();
            for a in 0..4 {
                for bb in 0..4 {
                    for c in 0..4 {
                        for d in 0..4 {
                            let p = [a, bb, c, d];
                            let mut seen = [false; 4];
                            if p.iter().all(|&x| !std::mem::replace(&mut seen[x], true)) {
                                out.push(p);
                            }
                        }
                    }
                }
            }
            out
        };
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        let idx = [i, j, k, l];
                        let mut v = 0.0;
                        for p in &perms {
                            v += raw.get(&[idx[p[0]], idx[p[1]], idx[p[2]], idx[p[3]]]);
                        }
                        sym.set(&idx, v / 24.0);
                    }
                }
            }
        }
        let chi = solve_cell(1.8, &gamma, &gamma, &sym).unwrap();
        // A_0 has rank 4, A_1 rank 2; both must be permutation symmetric.
        let a0 = &chi.coefficients()[0];
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        let idx = [i, j, k, l];
                        for p in &perms {
                            let pidx = [idx[p[0]], idx[p[1]], idx[p[2]], idx[p[3]]];
                            assert_abs_diff_eq!(
                                a0.get(&idx),
                                a0.get(&pidx),
                                epsilon = 1e-11
                            );
                        }
                    }
                }
            }
        }
        let a1 = &chi.coefficients()[1];
        for i in 0..n {
            for j in 0..n {
                assert_abs_diff_eq!(a1.get(&[i, j]), a1.get(&[j, i]), epsilon = 1e-11);
            }
        }
    }

    #[test]
    fn even_source_gaussian_average_matches_wick() {
        // B = d (x) d pattern: B_{ijkl} = d_ij d_kl.
        let n = 3;
        let beta = 1.25;
        let b = MultilinearTensor::from_fn(n, 4, |idx| {
            ((idx[0] == idx[1] && idx[2] == idx[3]) as i32) as f64
        });
        // <B> = sum_{ijkl} d_ij d_kl E[z_i z_j z_k z_l]
        //     = beta^{-2} (n^2 + n + n) directly from Wick.
        let want = (n as f64 * n as f64 + 2.0 * n as f64) / (beta * beta);
        assert_abs_diff_eq!(gaussian_average(beta, &b), want, epsilon = 1e-12);
    }

    #[test]
    fn zero_source_gives_zero_solution() {
        let n = 2;
        let gt = SquareMatrix::identity(n, n) * 1.5;
        let b = MultilinearTensor::zeros(n, 3);
        let chi = solve_cell(1.0, &gt, &gt, &b).unwrap();
        for a in chi.coefficients() {
            assert_eq!(a.max_abs(), 0.0);
        }
        assert_eq!(verify_residual(&chi, 20), 0.0);
    }

    #[test]
    fn gaussian_average_grad_matches_quadrature_free_check() {
        // For chi(z) = a . z the gradient is constant a; for the cubic
        // monomial T(z,z,z) the averaged gradient is sum of second moments.
        let n = 2;
        let beta = 2.0;
        let gt = SquareMatrix::identity(n, n);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t3 = MultilinearTensor::from_fn(n, 3, |_| rng.random_range(-1.0..1.0));
        let chi = CellSolution::from_parts(
            beta,
            gt.clone(),
            gt.clone(),
            MultilinearTensor::zeros(n, 3),
            vec![t3.clone(), MultilinearTensor::from_fn(n, 1, |idx| 0.3 * idx[0] as f64)],
        )
        .unwrap();
        // Monte Carlo cross-check with a large deterministic sample.
        let mut mc = DVector::zeros(n);
        let mut rng2 = ChaCha8Rng::seed_from_u64(8);
        let samples = 400_000;
        for _ in 0..samples {
            let z = DVector::from_fn(n, |_, _| {
                let g: f64 = StandardNormal.sample(&mut rng2);
                g / beta.sqrt()
            });
            mc += chi.grad_z(&z);
        }
        mc /= samples as f64;
        let exact = chi.gaussian_average_grad();
        assert!((mc - &exact).amax() < 5e-3, "MC and exact averaged gradients disagree");
    }

    #[test]
    fn gaussian_average_times_z_matches_wick_by_hand() {
        // chi(z) = z_0 z_1 (rank-2 coefficient e0 (x) e1):
        // <chi(z) z_0 z... with comp 0> = E[z_0 z_1 z_0] = 0;
        // with rank-1 coefficient a . z: <(a . z) z_c> = a_c / beta.
        let n = 2;
        let beta = 1.6;
        let gt = SquareMatrix::identity(n, n);
        let mut t2 = MultilinearTensor::zeros(n, 2);
        t2.set(&[0, 1], 1.0);
        let chi2 = CellSolution::from_parts(
            beta,
            gt.clone(),
            gt.clone(),
            MultilinearTensor::zeros(n, 2),
            vec![t2],
        )
        .unwrap();
        assert_abs_diff_eq!(chi2.gaussian_average_times_z(0), 0.0, epsilon = 1e-15);

        let a = [0.8, -0.3];
        let t1 = MultilinearTensor::from_fn(n, 1, |idx| a[idx[0]]);
        let chi1 = CellSolution::from_parts(
            beta,
            gt.clone(),
            gt.clone(),
            MultilinearTensor::zeros(n, 1),
            vec![t1],
        )
        .unwrap();
        for c in 0..n {
            assert_abs_diff_eq!(chi1.gaussian_average_times_z(c), a[c] / beta, epsilon = 1e-14);
        }
    }
}
