//! Dense small-n real matrix calculus: exponentials, spectral checks, the
//! triple-exponential integral tensor G, a generalized multilinear Lyapunov
//! solver, and scalar-weighted exponential integrals.
//!
//! Everything here is exact linear algebra (LU / symmetric eigen) on dense
//! matrices of dimension at most a few hundred; quadrature appears only in
//! test oracles.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Dense square matrix of `f64`. Entry `(i, j)` is row `i`, column `j`.
pub type SquareMatrix = DMatrix<f64>;

/// Cap on the flattened dimension of Kronecker-sum solves (`n^k` for rank-k
/// Lyapunov problems, `n^3` squared entries for the G tensor).
const KRON_DIM_CAP: usize = 4096;

/// Dimension cap for the rank-6 G tensor (`n^3 x n^3` linear system).
const G_DIM_CAP: usize = 8;

/// Tolerance used by spectral preconditions on symmetric-part eigenvalues.
const SPECTRAL_TOL: f64 = 1e-10;

fn check_square_finite(a: &SquareMatrix, what: &str) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::InvalidInput(format!(
            "{what} must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.nrows() == 0 {
        return Err(Error::InvalidInput(format!("{what} must be non-empty")));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!("{what} has non-finite entries")));
    }
    Ok(())
}

/// Symmetric part `(A + A^T) / 2`.
pub fn symmetric_part(a: &SquareMatrix) -> SquareMatrix {
    (a + a.transpose()) * 0.5
}

/// `true` when `max |A - A^T|` is at most `tol`.
pub fn is_symmetric(a: &SquareMatrix, tol: f64) -> bool {
    let d = a - a.transpose();
    d.iter().all(|x| x.abs() <= tol)
}

/// Eigenvalues of the symmetric part of `a`, ascending.
pub fn symmetric_part_eigenvalues(a: &SquareMatrix) -> Result<Vec<f64>> {
    check_square_finite(a, "matrix")?;
    let sym = symmetric_part(a);
    let mut eig: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    eig.sort_by(|x, y| x.total_cmp(y));
    Ok(eig)
}

/// `true` when every eigenvalue of the symmetric part lies in `[lo, hi]`.
///
/// By the standard bound on the numerical range, this confines the real
/// parts of all eigenvalues of `a` itself to the same interval, which is how
/// the crate checks stability/positivity preconditions for non-symmetric
/// input.
pub fn symmetric_part_spectrum_in(a: &SquareMatrix, lo: f64, hi: f64) -> Result<bool> {
    let eig = symmetric_part_eigenvalues(a)?;
    Ok(eig.iter().all(|&l| l >= lo && l <= hi))
}

/// Unique symmetric positive-definite square root of a symmetric PD matrix.
pub fn spd_sqrt(a: &SquareMatrix) -> Result<SquareMatrix> {
    check_square_finite(a, "matrix")?;
    if !is_symmetric(a, 1e-10 * (1.0 + a.amax())) {
        return Err(Error::InvalidInput("spd_sqrt needs a symmetric matrix".into()));
    }
    let eig = nalgebra::SymmetricEigen::new(symmetric_part(a));
    if eig.eigenvalues.iter().any(|&l| l <= SPECTRAL_TOL) {
        return Err(Error::SpectralPrecondition(format!(
            "spd_sqrt needs a positive-definite matrix (min eigenvalue {:.3e})",
            eig.eigenvalues.min()
        )));
    }
    let sqrt_l = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(&eig.eigenvectors * sqrt_l * eig.eigenvectors.transpose())
}

/// Kronecker sum of the given square factors:
/// `A_1 (+) ... (+) A_k = sum_a I x .. x A_a x .. x I`.
///
/// Row/column flattening is lexicographic with the first factor's index
/// slowest, matching [`MultilinearTensor`] layout.
pub fn kron_sum(factors: &[&SquareMatrix]) -> SquareMatrix {
    assert!(!factors.is_empty(), "kron_sum needs at least one factor");
    let dims: Vec<usize> = factors.iter().map(|m| m.nrows()).collect();
    let total: usize = dims.iter().product();
    let mut out = DMatrix::zeros(total, total);
    for (slot, a) in factors.iter().enumerate() {
        let left: usize = dims[..slot].iter().product();
        let right: usize = dims[slot + 1..].iter().product();
        // I_left x A x I_right, added in place.
        let n = dims[slot];
        for l in 0..left {
            for i in 0..n {
                for j in 0..n {
                    let v = a[(i, j)];
                    if v == 0.0 {
                        continue;
                    }
                    for r in 0..right {
                        let row = (l * n + i) * right + r;
                        let col = (l * n + j) * right + r;
                        out[(row, col)] += v;
                    }
                }
            }
        }
    }
    out
}

/// Dense real tensor of rank `k` over an `n`-dimensional space, stored
/// lexicographically with the first index slowest.
#[derive(Clone, Debug, PartialEq)]
pub struct MultilinearTensor {
    n: usize,
    k: usize,
    data: Vec<f64>,
}

impl MultilinearTensor {
    /// Zero tensor of rank `k` (rank 0 is a scalar).
    pub fn zeros(n: usize, k: usize) -> Self {
        assert!(n >= 1, "dimension must be positive");
        Self { n, k, data: vec![0.0; n.pow(k as u32)] }
    }

    /// Builds a tensor entry-by-entry from a closure on multi-indices.
    pub fn from_fn(n: usize, k: usize, mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut t = Self::zeros(n, k);
        let mut idx = vec![0usize; k];
        for flat in 0..t.data.len() {
            t.unflatten(flat, &mut idx);
            t.data[flat] = f(&idx);
        }
        t
    }

    /// Wraps an existing dense buffer (length must be `n^k`).
    pub fn from_vec(n: usize, k: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n.pow(k as u32) {
            return Err(Error::InvalidInput(format!(
                "tensor buffer length {} does not match n^k = {}",
                data.len(),
                n.pow(k as u32)
            )));
        }
        Ok(Self { n, k, data })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn rank(&self) -> usize {
        self.k
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn flatten(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.k);
        idx.iter().fold(0, |acc, &i| {
            debug_assert!(i < self.n);
            acc * self.n + i
        })
    }

    fn unflatten(&self, mut flat: usize, idx: &mut [usize]) {
        for slot in (0..self.k).rev() {
            idx[slot] = flat % self.n;
            flat /= self.n;
        }
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.flatten(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let flat = self.flatten(idx);
        self.data[flat] = value;
    }

    /// Full contraction with `k` vectors: `T(v_1, ..., v_k)`.
    pub fn eval(&self, vectors: &[&DVector<f64>]) -> f64 {
        assert_eq!(vectors.len(), self.k, "need one vector per slot");
        for v in vectors {
            assert_eq!(v.len(), self.n, "vector dimension mismatch");
        }
        let mut idx = vec![0usize; self.k];
        let mut acc = 0.0;
        for (flat, &entry) in self.data.iter().enumerate() {
            if entry == 0.0 {
                continue;
            }
            self.unflatten(flat, &mut idx);
            let mut w = entry;
            for (slot, &i) in idx.iter().enumerate() {
                w *= vectors[slot][i];
            }
            acc += w;
        }
        acc
    }

    /// Contracts one slot with a vector, producing a rank `k-1` tensor.
    pub fn contract_slot(&self, slot: usize, v: &DVector<f64>) -> Self {
        assert!(slot < self.k);
        assert_eq!(v.len(), self.n);
        let mut out = Self::zeros(self.n, self.k - 1);
        let mut idx = vec![0usize; self.k];
        let mut out_idx = vec![0usize; self.k - 1];
        for (flat, &entry) in self.data.iter().enumerate() {
            if entry == 0.0 {
                continue;
            }
            self.unflatten(flat, &mut idx);
            let mut pos = 0;
            for (s, &i) in idx.iter().enumerate() {
                if s != slot {
                    out_idx[pos] = i;
                    pos += 1;
                }
            }
            let oflat = out.flatten(&out_idx);
            out.data[oflat] += entry * v[idx[slot]];
        }
        out
    }

    /// Contracts slots `s1 < s2` against a metric:
    /// `out(..) = sum_{a,b} T(.., a, .., b, ..) * metric[(a, b)]`,
    /// remaining slots keeping their order.
    pub fn contract_pair(&self, s1: usize, s2: usize, metric: &SquareMatrix) -> Self {
        assert!(s1 < s2 && s2 < self.k);
        assert_eq!(metric.nrows(), self.n);
        assert_eq!(metric.ncols(), self.n);
        let mut out = Self::zeros(self.n, self.k - 2);
        let mut idx = vec![0usize; self.k];
        let mut out_idx = vec![0usize; self.k - 2];
        for (flat, &entry) in self.data.iter().enumerate() {
            if entry == 0.0 {
                continue;
            }
            self.unflatten(flat, &mut idx);
            let mut pos = 0;
            for (s, &i) in idx.iter().enumerate() {
                if s != s1 && s != s2 {
                    out_idx[pos] = i;
                    pos += 1;
                }
            }
            let oflat = out.flatten(&out_idx);
            out.data[oflat] += entry * metric[(idx[s1], idx[s2])];
        }
        out
    }

    /// Applies a matrix to one slot: `out(.., i, ..) = sum_j T(.., j, ..) M[(j, i)]`.
    pub fn apply_slot(&self, slot: usize, m: &SquareMatrix) -> Self {
        assert!(slot < self.k);
        assert_eq!(m.nrows(), self.n);
        let mut out = Self::zeros(self.n, self.k);
        let mut idx = vec![0usize; self.k];
        for (flat, &entry) in self.data.iter().enumerate() {
            if entry == 0.0 {
                continue;
            }
            self.unflatten(flat, &mut idx);
            let j = idx[slot];
            for i in 0..self.n {
                let w = m[(j, i)];
                if w == 0.0 {
                    continue;
                }
                idx[slot] = i;
                let oflat = out.flatten(&idx);
                out.data[oflat] += entry * w;
            }
            idx[slot] = j;
        }
        out
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { n: self.n, k: self.k, data: self.data.iter().map(|x| x * c).collect() }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.n != other.n || self.k != other.k {
            return Err(Error::Incompatible("tensor shapes differ".into()));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self { n: self.n, k: self.k, data })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Flattened copy as a column vector (lexicographic order).
    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.data)
    }
}

// Matrix 1-norm (max absolute column sum), used to pick the Pade degree.
fn one_norm(a: &SquareMatrix) -> f64 {
    let mut best = 0.0f64;
    for j in 0..a.ncols() {
        let s: f64 = a.column(j).iter().map(|x| x.abs()).sum();
        best = best.max(s);
    }
    best
}

// Diagonal Pade approximants of the exponential, evaluated in the standard
// scaling-and-squaring arrangement (Higham 2005). Coefficient tables for the
// degrees used in double precision.
const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] =
    [17_297_280.0, 8_648_640.0, 1_995_840.0, 277_200.0, 25_200.0, 1_512.0, 56.0, 1.0];
const PADE9: [f64; 10] = [
    17_643_225_600.0,
    8_821_612_800.0,
    2_075_673_600.0,
    302_702_400.0,
    30_270_240.0,
    2_162_160.0,
    110_880.0,
    3_960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64_764_752_532_480_000.0,
    32_382_376_266_240_000.0,
    7_771_770_303_897_600.0,
    1_187_353_796_428_800.0,
    129_060_195_264_000.0,
    10_559_470_521_600.0,
    670_442_572_800.0,
    33_522_128_640.0,
    1_323_241_920.0,
    40_840_800.0,
    960_960.0,
    16_380.0,
    182.0,
    1.0,
];

const THETA3: f64 = 1.495_585_217_958_292e-2;
const THETA5: f64 = 2.539_398_330_063_23e-1;
const THETA7: f64 = 9.504_178_996_162_932e-1;
const THETA9: f64 = 2.097_847_961_257_068;
const THETA13: f64 = 5.371_920_351_148_152;

fn pade_low(a: &SquareMatrix, b: &[f64]) -> (SquareMatrix, SquareMatrix) {
    // Degrees 3..9: U = A * sum b_{2i+1} A^{2i}, V = sum b_{2i} A^{2i}.
    let n = a.nrows();
    let a2 = a * a;
    let mut even = DMatrix::<f64>::identity(n, n);
    let mut u_inner = DMatrix::<f64>::zeros(n, n);
    let mut v = DMatrix::<f64>::zeros(n, n);
    let half = b.len() / 2;
    for i in 0..half {
        u_inner += &even * b[2 * i + 1];
        v += &even * b[2 * i];
        if i + 1 < half {
            even = &even * &a2;
        }
    }
    (a * u_inner, v)
}

fn pade13(a: &SquareMatrix) -> (SquareMatrix, SquareMatrix) {
    let n = a.nrows();
    let b = &PADE13;
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let id = DMatrix::<f64>::identity(n, n);
    let u_high = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]);
    let u_low = &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &id * b[1];
    let u = a * (u_high + u_low);
    let v_high = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]);
    let v = v_high + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &id * b[0];
    (u, v)
}

/// Matrix exponential `e^{tA}` by Pade approximation with scaling and
/// squaring; relative error at working precision for `||tA||` up to ~50.
pub fn mat_exp(a: &SquareMatrix, t: f64) -> Result<SquareMatrix> {
    check_square_finite(a, "mat_exp input")?;
    if !t.is_finite() {
        return Err(Error::InvalidInput("mat_exp scale t is not finite".into()));
    }
    let m = a * t;
    let norm = one_norm(&m);
    let (u, v, squarings) = if norm <= THETA13 {
        let (u, v) = if norm <= THETA3 {
            pade_low(&m, &PADE3)
        } else if norm <= THETA5 {
            pade_low(&m, &PADE5)
        } else if norm <= THETA7 {
            pade_low(&m, &PADE7)
        } else if norm <= THETA9 {
            pade_low(&m, &PADE9)
        } else {
            pade13(&m)
        };
        (u, v, 0u32)
    } else {
        let s = ((norm / THETA13).log2().ceil() as u32).max(1);
        let scaled = &m * 0.5f64.powi(s as i32);
        let (u, v) = pade13(&scaled);
        (u, v, s)
    };
    let num = &v + &u;
    let den = &v - &u;
    let mut r = den
        .lu()
        .solve(&num)
        .ok_or_else(|| Error::Numerical("mat_exp Pade denominator is singular".into()))?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    Ok(r)
}

/// The triple-exponential integral tensor
/// `G_{i1 i2 i3}^{j1 j2 j3} = int_0^inf prod_a (e^{-y gt})_{ia ja} dy`,
/// returned with index order `(i1, i2, i3, j1, j2, j3)`.
///
/// Since the integrand is `e^{-y (gt (+) gt (+) gt)}` on the flattened
/// indices, the integral is exactly the inverse Kronecker sum, computed by a
/// dense `n^3 x n^3` solve.
pub fn triple_exp_integral(gamma_tilde: &SquareMatrix) -> Result<MultilinearTensor> {
    check_square_finite(gamma_tilde, "gamma_tilde")?;
    let n = gamma_tilde.nrows();
    if n > G_DIM_CAP {
        return Err(Error::InvalidInput(format!(
            "triple_exp_integral supports n <= {G_DIM_CAP}, got {n}"
        )));
    }
    let eig = symmetric_part_eigenvalues(gamma_tilde)?;
    if eig[0] <= SPECTRAL_TOL {
        return Err(Error::SpectralPrecondition(format!(
            "gamma_tilde symmetric part must be positive definite (min eigenvalue {:.3e})",
            eig[0]
        )));
    }
    let big = kron_sum(&[gamma_tilde, gamma_tilde, gamma_tilde]);
    let inv = big
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("Kronecker-sum system is singular".into()))?;
    let n3 = n * n * n;
    let mut data = Vec::with_capacity(n3 * n3);
    for row in 0..n3 {
        for col in 0..n3 {
            data.push(inv[(row, col)]);
        }
    }
    MultilinearTensor::from_vec(n, 6, data)
}

/// Solves the generalized Lyapunov equation
/// `sum_a A(v_1, .., C v_a, .., v_k) = -B(v_1, .., v_k)`
/// for the unique rank-k tensor `A`, given that every eigenvalue of `C` has
/// negative real part (checked through the symmetric part).
pub fn lyapunov_multilinear(c: &SquareMatrix, b: &MultilinearTensor) -> Result<MultilinearTensor> {
    check_square_finite(c, "coefficient matrix")?;
    let n = c.nrows();
    if b.dim() != n {
        return Err(Error::Incompatible(format!(
            "tensor dimension {} does not match matrix dimension {n}",
            b.dim()
        )));
    }
    let k = b.rank();
    if k == 0 {
        return Err(Error::InvalidInput("lyapunov_multilinear needs rank >= 1".into()));
    }
    let dim = n.pow(k as u32);
    if dim > KRON_DIM_CAP {
        return Err(Error::InvalidInput(format!(
            "flattened dimension n^k = {dim} exceeds cap {KRON_DIM_CAP}"
        )));
    }
    let eig = symmetric_part_eigenvalues(c)?;
    if eig[eig.len() - 1] >= -SPECTRAL_TOL {
        return Err(Error::SpectralPrecondition(format!(
            "coefficient matrix symmetric part must be negative definite (max eigenvalue {:.3e})",
            eig[eig.len() - 1]
        )));
    }
    // Contraction against slot a applies C^T on that slot's index, so the
    // flattened operator is the k-fold Kronecker sum of C^T.
    let ct = c.transpose();
    let factors: Vec<&SquareMatrix> = (0..k).map(|_| &ct).collect();
    let op = kron_sum(&factors);
    let rhs = -b.to_dvector();
    let lu = op.clone().lu();
    let x = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("Lyapunov operator is singular".into()))?;
    let residual = (&op * &x + b.to_dvector()).amax();
    let tol = 1e-10 * b.max_abs().max(1e-14);
    if residual > tol {
        return Err(Error::Numerical(format!(
            "Lyapunov residual {residual:.3e} exceeds tolerance {tol:.3e}"
        )));
    }
    MultilinearTensor::from_vec(n, k, x.iter().copied().collect())
}

/// The scalar-weighted exponential integral
/// `M = int_0^inf Tr[gamma e^{-2y gamma}] e^{-y gamma} dy`
/// for symmetric positive-definite `gamma`, via eigendecomposition:
/// with `gamma = U diag(l) U^T`, `M = U diag(sum_l l_l / (2 l_l + l_i)) U^T`.
pub fn trace_weighted_integral(gamma: &SquareMatrix) -> Result<SquareMatrix> {
    check_square_finite(gamma, "gamma")?;
    if !is_symmetric(gamma, 1e-10 * (1.0 + gamma.amax())) {
        return Err(Error::InvalidInput("trace_weighted_integral needs symmetric gamma".into()));
    }
    let eig = nalgebra::SymmetricEigen::new(symmetric_part(gamma));
    if eig.eigenvalues.iter().any(|&l| l <= SPECTRAL_TOL) {
        return Err(Error::SpectralPrecondition(format!(
            "gamma must be positive definite (min eigenvalue {:.3e})",
            eig.eigenvalues.min()
        )));
    }
    let lambdas: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let weights: Vec<f64> =
        lambdas.iter().map(|&li| lambdas.iter().map(|&ll| ll / (2.0 * ll + li)).sum()).collect();
    let d = DMatrix::from_diagonal(&DVector::from_vec(weights));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// `(gamma_tilde + 2 gamma)^{-1}`, the shifted inverse entering the
/// uniform-field anomaly kernel.
pub fn shifted_inverse(gamma_tilde: &SquareMatrix, gamma: &SquareMatrix) -> Result<SquareMatrix> {
    check_square_finite(gamma_tilde, "gamma_tilde")?;
    check_square_finite(gamma, "gamma")?;
    if gamma_tilde.nrows() != gamma.nrows() {
        return Err(Error::Incompatible("matrix dimensions differ".into()));
    }
    let shifted = gamma_tilde + gamma * 2.0;
    shifted
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Singular("gamma_tilde + 2 gamma is not invertible".into()))
}

/// Maximum violation of the three G contraction identities used by the
/// entropy limit formula, for a given `gamma_tilde` (with `gamma` its
/// symmetric part):
///
/// (a) `1/2 d_{j1 j2} G^{j1 j2 e}_{i1 i2 i3} d^{i1 i2} gt_{e k}
///      + d^{i1 i2} G^{j1 j2 j3}_{i1 i2 i3} g_{j1 j2} d_{j3 k} = (n/2) d_{i3 k}`
/// (b) `d_{j1 j2} G^{j1 j2 e}_{i1 i3 a} d^{i1 a} gt_{e k}
///      + 2 d^{i1 i2} G^{j1 j2 j3}_{i1 i2 i3} g_{j2 j3} d_{j1 k} = d_{i3 k}`
/// (c) as (b) with the roles of the second and third upper slots swapped
///     (`g_{j1 j3}` pairing).
///
/// Returns the three maximum absolute errors `[err_a, err_b, err_c]`.
pub fn g_contraction_errors(gamma_tilde: &SquareMatrix) -> Result<[f64; 3]> {
    let n = gamma_tilde.nrows();
    let g = triple_exp_integral(gamma_tilde)?;
    let gamma = symmetric_part(gamma_tilde);
    let id = SquareMatrix::identity(n, n);

    // Tensor slots of G are (i1, i2, i3, j1, j2, j3) = (0, 1, 2, 3, 4, 5).
    // After contracting the pair (0, 1) with the identity metric the slots
    // are (i3, j1, j2, j3) = (0, 1, 2, 3).
    let g_ii = g.contract_pair(0, 1, &id);

    let mut err = [0.0f64; 3];

    // (a): 1/2 * (g_ii j1j2-traced, then gt applied to the leftover j3)
    //      + (g_ii with gamma on (j1,j2), delta on j3).
    let t1 = g_ii.contract_pair(1, 2, &id); // slots (i3, j3)
    let t1 = t1.apply_slot(1, &gamma_tilde).scaled(0.5); // (i3, k)
    let t2 = g_ii.contract_pair(1, 2, &gamma); // slots (i3, j3) with gamma pairing j1 j2
    let lhs_a = t1.add(&t2)?;
    for i3 in 0..n {
        for kk in 0..n {
            let want = if i3 == kk { n as f64 / 2.0 } else { 0.0 };
            err[0] = err[0].max((lhs_a.get(&[i3, kk]) - want).abs());
        }
    }

    // (b): contract lower slots (0, 2) with identity; trace (j1, j2); apply
    //      gt to the leftover j3 index; plus 2 * (gamma on (j2, j3), delta j1).
    let g_02 = g.contract_pair(0, 2, &id); // slots (i3', j1, j2, j3) where i3' is old slot 1
    let u1 = g_02.contract_pair(1, 2, &id).apply_slot(1, &gamma_tilde); // (i3', k)
    let u2 = g_ii.contract_pair(2, 3, &gamma).scaled(2.0); // gamma on (j2, j3): slots (i3, j1)
    let lhs_b = u1.add(&u2)?;
    for i3 in 0..n {
        for kk in 0..n {
            let want = if i3 == kk { 1.0 } else { 0.0 };
            err[1] = err[1].max((lhs_b.get(&[i3, kk]) - want).abs());
        }
    }

    // (c): symmetric counterpart with the gamma pairing on (j1, j3).
    let v1 = g_02.contract_pair(1, 2, &id).apply_slot(1, &gamma_tilde);
    let v2 = g_ii.contract_pair(1, 3, &gamma).scaled(2.0); // gamma on (j1, j3): slots (i3, j2)
    let lhs_c = v1.add(&v2)?;
    for i3 in 0..n {
        for kk in 0..n {
            let want = if i3 == kk { 1.0 } else { 0.0 };
            err[2] = err[2].max((lhs_c.get(&[i3, kk]) - want).abs());
        }
    }

    Ok(err)
}

/// Maximum violation of the kernel bridge identity
/// `(3n+2)/6 g^{-1} - g^{-1} M = 1/3 g^{-1} + 1/2 sum_i (g + 2 l_i I)^{-1}`
/// with `M = trace_weighted_integral(g)` and `l_i` the eigenvalues of `g`.
pub fn anomaly_kernel_bridge_error(gamma: &SquareMatrix) -> Result<f64> {
    let n = gamma.nrows();
    let m = trace_weighted_integral(gamma)?;
    let ginv = gamma
        .clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Singular("gamma is not invertible".into()))?;
    let lhs = &ginv * (3.0 * n as f64 + 2.0) / 6.0 - &ginv * &m;
    let eig = nalgebra::SymmetricEigen::new(symmetric_part(gamma));
    let mut rhs = &ginv * (1.0 / 3.0);
    for &l in eig.eigenvalues.iter() {
        let shifted = gamma + SquareMatrix::identity(n, n) * (2.0 * l);
        let inv = shifted
            .lu()
            .try_inverse()
            .ok_or_else(|| Error::Singular("gamma + 2 lambda I is not invertible".into()))?;
        rhs += inv * 0.5;
    }
    Ok((lhs - rhs).amax())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> SquareMatrix {
        SquareMatrix::from_fn(n, n, |_, _| rng.random_range(-scale..scale))
    }

    /// Random matrix with symmetric part positive definite (spectrum pushed
    /// above `floor`) plus an antisymmetric part of size `skew`.
    fn random_pd_plus_skew(rng: &mut ChaCha8Rng, n: usize, floor: f64, skew: f64) -> SquareMatrix {
        let a = random_matrix(rng, n, 1.0);
        let sym = &a * a.transpose() * 0.5 + SquareMatrix::identity(n, n) * floor;
        if skew == 0.0 {
            return sym;
        }
        let b = random_matrix(rng, n, skew);
        let anti = (&b - b.transpose()) * 0.5;
        sym + anti
    }

    #[test]
    fn mat_exp_at_zero_time_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 1..=5 {
            let a = random_matrix(&mut rng, n, 3.0);
            let e = mat_exp(&a, 0.0).unwrap();
            assert_abs_diff_eq!(e, SquareMatrix::identity(n, n), epsilon = 1e-14);
        }
    }

    #[test]
    fn mat_exp_diagonal_case() {
        let a = SquareMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
        let e = mat_exp(&a, -1.0).unwrap();
        let want =
            SquareMatrix::from_diagonal(&DVector::from_vec(vec![(-1.0f64).exp(), (-2.0f64).exp()]));
        assert_abs_diff_eq!(e, want, epsilon = 1e-14);
    }

    #[test]
    fn mat_exp_rotation_block_closed_form() {
        // gt = [[1, 1], [-1, 1]] has eigenvalues 1 +- i, so
        // e^{-gt} = e^{-1} [[cos 1, -sin 1], [sin 1, cos 1]].
        let gt = SquareMatrix::from_row_slice(2, 2, &[1.0, 1.0, -1.0, 1.0]);
        let e = mat_exp(&gt, -1.0).unwrap();
        let c = 1.0f64.cos() * (-1.0f64).exp();
        let s = 1.0f64.sin() * (-1.0f64).exp();
        let want = SquareMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        assert_abs_diff_eq!(e, want, epsilon = 1e-13);
    }

    #[test]
    fn mat_exp_matches_truncated_power_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..=4 {
            let a = random_matrix(&mut rng, n, 0.8);
            let e = mat_exp(&a, 1.0).unwrap();
            let mut series = SquareMatrix::identity(n, n);
            let mut term = SquareMatrix::identity(n, n);
            for j in 1..30 {
                term = &term * &a / j as f64;
                series += &term;
            }
            assert_abs_diff_eq!(e, series, epsilon = 1e-11);
        }
    }

    #[test]
    fn mat_exp_semigroup_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let n = rng.random_range(1..=4);
            let a = random_matrix(&mut rng, n, 2.0);
            let s = rng.random_range(-1.5..1.5);
            let t = rng.random_range(-1.5..1.5);
            let lhs = mat_exp(&a, s).unwrap() * mat_exp(&a, t).unwrap();
            let rhs = mat_exp(&a, s + t).unwrap();
            assert!((lhs - rhs).amax() < 1e-10);
        }
    }

    #[test]
    fn mat_exp_large_norm_scaling() {
        // ||tA|| = 50 exercises the squaring path; diagonal ground truth.
        let a = SquareMatrix::from_diagonal(&DVector::from_vec(vec![50.0, -50.0, 12.5]));
        let e = mat_exp(&a, 1.0).unwrap();
        for (i, want) in [50.0f64.exp(), (-50.0f64).exp(), 12.5f64.exp()].iter().enumerate() {
            assert!((e[(i, i)] - want).abs() / want <= 1e-12, "rel err too large at {i}");
        }
    }

    #[test]
    fn mat_exp_rejects_bad_input() {
        let a = SquareMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        assert!(mat_exp(&a, 1.0).is_err());
        let b = SquareMatrix::from_row_slice(1, 1, &[f64::NAN]);
        assert!(mat_exp(&b, 1.0).is_err());
    }

    #[test]
    fn triple_exp_scalar_matrix() {
        // gt = c I: every matched entry is 1/(3c), everything else zero.
        let c = 1.7;
        let n = 2;
        let gt = SquareMatrix::identity(n, n) * c;
        let g = triple_exp_integral(&gt).unwrap();
        for i1 in 0..n {
            for i2 in 0..n {
                for i3 in 0..n {
                    for j1 in 0..n {
                        for j2 in 0..n {
                            for j3 in 0..n {
                                let want = if (i1, i2, i3) == (j1, j2, j3) {
                                    1.0 / (3.0 * c)
                                } else {
                                    0.0
                                };
                                assert_abs_diff_eq!(
                                    g.get(&[i1, i2, i3, j1, j2, j3]),
                                    want,
                                    epsilon = 1e-12
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn triple_exp_diagonal_matrix() {
        let lambda = [0.5, 1.25, 3.0];
        let gt = SquareMatrix::from_diagonal(&DVector::from_vec(lambda.to_vec()));
        let g = triple_exp_integral(&gt).unwrap();
        let n = 3;
        for i1 in 0..n {
            for i2 in 0..n {
                for i3 in 0..n {
                    let want = 1.0 / (lambda[i1] + lambda[i2] + lambda[i3]);
                    assert_abs_diff_eq!(g.get(&[i1, i2, i3, i1, i2, i3]), want, epsilon = 1e-12);
                    // an off-pattern entry
                    let j1 = (i1 + 1) % n;
                    assert_abs_diff_eq!(g.get(&[i1, i2, i3, j1, i2, i3]), 0.0, epsilon = 1e-13);
                }
            }
        }
    }

    // Quadrature oracle: composite Simpson for int_0^{T*} of the entry-wise
    // triple product of matrix exponentials.
    fn triple_exp_quadrature(gt: &SquareMatrix, idx: [usize; 6]) -> f64 {
        let eig_min = symmetric_part_eigenvalues(gt).unwrap()[0];
        let t_star = 40.0 / eig_min;
        let panels = 20_000usize; // even
        let h = t_star / panels as f64;
        let mut acc = 0.0;
        for node in 0..=panels {
            let y = node as f64 * h;
            let e = mat_exp(gt, -y).unwrap();
            let f = e[(idx[0], idx[3])] * e[(idx[1], idx[4])] * e[(idx[2], idx[5])];
            let w = if node == 0 || node == panels {
                1.0
            } else if node % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += w * f;
        }
        acc * h / 3.0
    }

    #[test]
    fn triple_exp_matches_quadrature_on_rotation_block() {
        // gamma = 1, B0 = 2 pattern: [[1, 2], [-2, 1]].
        let gt = SquareMatrix::from_row_slice(2, 2, &[1.0, 2.0, -2.0, 1.0]);
        let g = triple_exp_integral(&gt).unwrap();
        for idx in [[0, 0, 0, 0, 0, 0], [0, 1, 0, 1, 1, 0], [1, 1, 1, 0, 0, 1], [0, 0, 1, 0, 1, 1]]
        {
            let want = triple_exp_quadrature(&gt, idx);
            assert!(
                (g.get(&idx) - want).abs() <= 1e-9,
                "entry {idx:?}: got {}, quadrature {}",
                g.get(&idx),
                want
            );
        }
    }

    #[test]
    fn triple_exp_rejects_unstable_matrix() {
        let gt = SquareMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 2.0]);
        match triple_exp_integral(&gt) {
            Err(Error::SpectralPrecondition(_)) => {}
            other => panic!("expected spectral precondition error, got {other:?}"),
        }
    }

    #[test]
    fn lyapunov_rank1_scalar_matrix() {
        // C = -cI, B rank 1: A = B/c.
        let c = 2.5;
        let n = 3;
        let cm = SquareMatrix::identity(n, n) * -c;
        let b = MultilinearTensor::from_fn(n, 1, |idx| idx[0] as f64 + 1.0);
        let a = lyapunov_multilinear(&cm, &b).unwrap();
        for i in 0..n {
            assert_abs_diff_eq!(a.get(&[i]), (i as f64 + 1.0) / c, epsilon = 1e-12);
        }
    }

    #[test]
    fn lyapunov_rejects_unstable_matrix() {
        let cm = SquareMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, -2.0]);
        let b = MultilinearTensor::zeros(2, 2);
        match lyapunov_multilinear(&cm, &b) {
            Err(Error::SpectralPrecondition(_)) => {}
            other => panic!("expected spectral precondition error, got {other:?}"),
        }
    }

    fn lyapunov_residual(c: &SquareMatrix, b: &MultilinearTensor, a: &MultilinearTensor) -> f64 {
        // max over entries of sum_slot A(.., C e_{i_slot}, ..) + B; evaluating
        // at basis vectors means applying C^T from the left of each slot
        // index, which is apply_slot with argument C.
        let k = b.rank();
        let mut total = b.clone();
        for slot in 0..k {
            total = total.add(&a.apply_slot(slot, c)).unwrap();
        }
        total.max_abs()
    }

    #[test]
    fn lyapunov_residual_over_many_seeds() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..=4usize);
            let k = rng.random_range(1..=4usize);
            let c = random_pd_plus_skew(&mut rng, n, 0.1, 1.0) * -1.0;
            let b = MultilinearTensor::from_fn(n, k, |_| rng.random_range(-2.0..2.0));
            let a = lyapunov_multilinear(&c, &b).unwrap();
            let res = lyapunov_residual(&c, &b, &a);
            assert!(res <= 1e-10 * b.max_abs().max(1.0), "seed {seed}: residual {res}");
        }
    }

    #[test]
    fn trace_weighted_scalar_case() {
        let n = 3;
        let g = SquareMatrix::identity(n, n) * 2.0;
        let m = trace_weighted_integral(&g).unwrap();
        assert_abs_diff_eq!(m, SquareMatrix::identity(n, n) * (n as f64 / 3.0), epsilon = 1e-12);
    }

    #[test]
    fn trace_weighted_diagonal_case() {
        let g = SquareMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
        let m = trace_weighted_integral(&g).unwrap();
        let want = SquareMatrix::from_diagonal(&DVector::from_vec(vec![
            1.0 / 3.0 + 2.0 / 5.0,
            1.0 / 4.0 + 2.0 / 6.0,
        ]));
        assert_abs_diff_eq!(m, want, epsilon = 1e-12);
    }

    #[test]
    fn trace_weighted_matches_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_matrix(&mut rng, 2, 1.0);
        let g = &a * a.transpose() + SquareMatrix::identity(2, 2) * 0.4;
        let m = trace_weighted_integral(&g).unwrap();
        // Simpson on [0, 40/eig_min].
        let eig_min = symmetric_part_eigenvalues(&g).unwrap()[0];
        let t_star = 40.0 / eig_min;
        let panels = 20_000usize;
        let h = t_star / panels as f64;
        let mut acc = SquareMatrix::zeros(2, 2);
        for node in 0..=panels {
            let y = node as f64 * h;
            let tr = (&g * mat_exp(&g, -2.0 * y).unwrap()).trace();
            let term = mat_exp(&g, -y).unwrap() * tr;
            let w = if node == 0 || node == panels {
                1.0
            } else if node % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += term * w;
        }
        acc *= h / 3.0;
        assert!((m - acc).amax() <= 1e-9);
    }

    #[test]
    fn shifted_inverse_uniform_field_values() {
        // gamma = 1, B0 = 0: (3I)^{-1}.
        let id3 = SquareMatrix::identity(3, 3);
        let inv = shifted_inverse(&id3, &id3).unwrap();
        assert_abs_diff_eq!(inv, &id3 / 3.0, epsilon = 1e-13);

        // gamma = 1, B0 = 1: [[3/10, -1/10, 0], [1/10, 3/10, 0], [0, 0, 1/3]].
        let gt = SquareMatrix::from_row_slice(
            3,
            3,
            &[1.0, 1.0, 0.0, -1.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        );
        let inv = shifted_inverse(&gt, &id3).unwrap();
        let want = SquareMatrix::from_row_slice(
            3,
            3,
            &[0.3, -0.1, 0.0, 0.1, 0.3, 0.0, 0.0, 0.0, 1.0 / 3.0],
        );
        assert_abs_diff_eq!(inv, want, epsilon = 1e-13);
    }

    #[test]
    fn shifted_inverse_multiply_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let n = rng.random_range(1..=4usize);
            let gt = random_pd_plus_skew(&mut rng, n, 0.2, 1.0);
            let g = symmetric_part(&random_pd_plus_skew(&mut rng, n, 0.2, 0.0));
            let inv = shifted_inverse(&gt, &g).unwrap();
            let prod = inv * (&gt + &g * 2.0);
            assert!((prod - SquareMatrix::identity(n, n)).amax() <= 1e-12);
        }
    }

    #[test]
    fn g_contraction_identities_over_many_seeds() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let n = 1 + (seed as usize % 4);
            let gt = random_pd_plus_skew(&mut rng, n, 0.3, 1.5);
            let err = g_contraction_errors(&gt).unwrap();
            for (which, e) in err.iter().enumerate() {
                assert!(*e <= 1e-10, "seed {seed} identity {which}: error {e}");
            }
        }
    }

    #[test]
    fn anomaly_kernel_bridge_over_many_seeds() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
            let n = 1 + (seed as usize % 4);
            let g = symmetric_part(&random_pd_plus_skew(&mut rng, n, 0.25, 0.0));
            let err = anomaly_kernel_bridge_error(&g).unwrap();
            assert!(err <= 1e-10, "seed {seed}: bridge error {err}");
        }
    }

    #[test]
    fn uniform_field_g_pair_trace_collapses_to_shifted_inverse() {
        // For gt = gamma I + antisymmetric, e^{-y gt} (e^{-y gt})^T = e^{-2 gamma y} I,
        // so tracing the first two lower slots of G against the identity gives
        // delta_{j1 j2} (gt + 2 gamma I)^{-1} on the remaining slots.
        let gamma = 1.3;
        let b0 = 0.9;
        let gt = SquareMatrix::from_row_slice(
            3,
            3,
            &[gamma, -b0, 0.0, b0, gamma, 0.0, 0.0, 0.0, gamma],
        );
        let g = triple_exp_integral(&gt).unwrap();
        let id = SquareMatrix::identity(3, 3);
        let paired = g.contract_pair(0, 1, &id); // slots (i3, j1, j2, j3)
        let shift = shifted_inverse(&gt, &(id * gamma)).unwrap();
        for i3 in 0..3 {
            for j1 in 0..3 {
                for j2 in 0..3 {
                    for j3 in 0..3 {
                        let want = if j1 == j2 { shift[(i3, j3)] } else { 0.0 };
                        assert_abs_diff_eq!(
                            paired.get(&[i3, j1, j2, j3]),
                            want,
                            epsilon = 1e-11
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn kron_sum_matches_direct_construction() {
        let a = SquareMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = SquareMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.5]);
        let id = SquareMatrix::identity(2, 2);
        let want = a.kronecker(&id) + id.kronecker(&b);
        assert_abs_diff_eq!(kron_sum(&[&a, &b]), want, epsilon = 1e-15);
    }

    #[test]
    fn tensor_contract_pair_and_slot_agree_with_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 3;
        let t = MultilinearTensor::from_fn(n, 3, |_| rng.random_range(-1.0..1.0));
        let v1 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let v2 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let v3 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let full = t.eval(&[&v1, &v2, &v3]);
        let step = t.contract_slot(0, &v1).contract_slot(0, &v2).contract_slot(0, &v3);
        assert_abs_diff_eq!(full, step.get(&[]), epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn tensor_eval_is_multilinear(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..=3usize);
            let k = rng.random_range(1..=3usize);
            let t = MultilinearTensor::from_fn(n, k, |_| rng.random_range(-1.0..1.0));
            let slot = rng.random_range(0..k);
            let a: f64 = rng.random_range(-2.0..2.0);
            let b: f64 = rng.random_range(-2.0..2.0);
            let vs: Vec<DVector<f64>> =
                (0..k).map(|_| DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))).collect();
            let x = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let y = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));

            let mut args_combined: Vec<&DVector<f64>> = vs.iter().collect();
            let combo = &x * a + &y * b;
            args_combined[slot] = &combo;
            let lhs = t.eval(&args_combined);

            let mut args_x: Vec<&DVector<f64>> = vs.iter().collect();
            args_x[slot] = &x;
            let mut args_y: Vec<&DVector<f64>> = vs.iter().collect();
            args_y[slot] = &y;
            let rhs = a * t.eval(&args_x) + b * t.eval(&args_y);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs() + rhs.abs()));
        }

        #[test]
        fn lyapunov_is_linear_in_source(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..=3usize);
            let k = rng.random_range(1..=3usize);
            let c = random_pd_plus_skew(&mut rng, n, 0.2, 1.0) * -1.0;
            let b1 = MultilinearTensor::from_fn(n, k, |_| rng.random_range(-1.0..1.0));
            let b2 = MultilinearTensor::from_fn(n, k, |_| rng.random_range(-1.0..1.0));
            let a: f64 = rng.random_range(-2.0..2.0);
            let combo = b1.scaled(a).add(&b2).unwrap();
            let lhs = lyapunov_multilinear(&c, &combo).unwrap();
            let rhs = lyapunov_multilinear(&c, &b1)
                .unwrap()
                .scaled(a)
                .add(&lyapunov_multilinear(&c, &b2).unwrap())
                .unwrap();
            let diff: Vec<f64> =
                lhs.data().iter().zip(rhs.data()).map(|(x, y)| (x - y).abs()).collect();
            let max = diff.iter().fold(0.0f64, |m, &x| m.max(x));
            prop_assert!(max <= 1e-9 * (1.0 + lhs.max_abs()));
        }
    }
}
