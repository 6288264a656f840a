//! Closed-form parametric field families for beta, V, psi, F_ext and gamma,
//! each with analytic time derivative, gradient and Hessian (as applicable).
//!
//! Families compose: the `ramp` and `osc` wrappers multiply an inner field
//! by `1 + rate t` or `1 + amp sin(omega t)`, which is how time dependence
//! enters without giving up exact derivatives.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar field value with its first and second derivatives at one point.
#[derive(Clone, Debug)]
pub struct ScalarEval {
    pub value: f64,
    /// Explicit time partial.
    pub dt: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

impl ScalarEval {
    fn zero(n: usize) -> Self {
        Self { value: 0.0, dt: 0.0, grad: DVector::zeros(n), hess: DMatrix::zeros(n, n) }
    }
}

/// Vector field value with derivatives. Index conventions:
/// `jac[(i, j)] = d_{q^i} v_j`, `hess[c][(i, j)] = d_{q^i} d_{q^j} v_c`,
/// `dt_jac[(i, j)] = d_t d_{q^i} v_j`.
#[derive(Clone, Debug)]
pub struct VectorEval {
    pub value: DVector<f64>,
    pub dt: DVector<f64>,
    pub jac: DMatrix<f64>,
    pub hess: Vec<DMatrix<f64>>,
    pub dt_jac: DMatrix<f64>,
}

impl VectorEval {
    fn zero(n: usize) -> Self {
        Self {
            value: DVector::zeros(n),
            dt: DVector::zeros(n),
            jac: DMatrix::zeros(n, n),
            hess: vec![DMatrix::zeros(n, n); n],
            dt_jac: DMatrix::zeros(n, n),
        }
    }

    fn scaled(mut self, c: f64) -> Self {
        self.value *= c;
        self.dt *= c;
        self.jac *= c;
        for h in &mut self.hess {
            *h *= c;
        }
        self.dt_jac *= c;
        self
    }
}

/// Matrix field (friction tensor) value with spatial derivatives:
/// `dq[k][(i, j)] = d_{q^k} gamma_{ij}`. Gamma families are
/// time-independent by design.
#[derive(Clone, Debug)]
pub struct MatrixEval {
    pub value: DMatrix<f64>,
    pub dq: Vec<DMatrix<f64>>,
}

/// Scalar field family registry (beta, V).
#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(tag = "family", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarFieldSpec {
    /// `f = value`.
    Constant { value: f64 },
    /// `f = intercept + slope . q`. Unbounded; mainly for negative tests.
    Affine { slope: Vec<f64>, intercept: f64 },
    /// `f = base + amp tanh(rate (q_axis - offset))`.
    Tanh { base: f64, amp: f64, rate: f64, axis: usize, offset: f64 },
    /// `f = base + amp tanh(rate q_axis) exp(-width |q|^2)`.
    TanhGauss { base: f64, amp: f64, rate: f64, axis: usize, width: f64 },
    /// `f = amp exp(-|q - center|^2 / (2 width^2))`.
    GaussBump { amp: f64, width: f64, center: Vec<f64> },
    /// `f = (k/2) |q|^2`.
    Harmonic { k: f64 },
    /// `f = (a/2) |q|^2 + (b/4) |q|^4`.
    Quartic { a: f64, b: f64 },
    /// `f = (1 + rate t) inner`.
    Ramp { rate: f64, inner: Box<ScalarFieldSpec> },
    /// `f = (1 + amp sin(omega t)) inner`.
    Osc { amp: f64, omega: f64, inner: Box<ScalarFieldSpec> },
}

impl ScalarFieldSpec {
    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            Self::Constant { .. } | Self::Harmonic { .. } | Self::Quartic { .. } => Ok(()),
            Self::Affine { slope, .. } => {
                if slope.len() != n {
                    return Err(Error::Config(format!(
                        "affine slope has {} entries, dimension is {n}",
                        slope.len()
                    )));
                }
                Ok(())
            }
            Self::Tanh { axis, .. } => {
                if *axis >= n {
                    return Err(Error::Config(format!("tanh axis {axis} out of range for n = {n}")));
                }
                Ok(())
            }
            Self::TanhGauss { axis, width, .. } => {
                if *axis >= n {
                    return Err(Error::Config(format!(
                        "tanh_gauss axis {axis} out of range for n = {n}"
                    )));
                }
                if *width < 0.0 {
                    return Err(Error::Config("tanh_gauss width must be non-negative".into()));
                }
                Ok(())
            }
            Self::GaussBump { width, center, .. } => {
                if *width <= 0.0 {
                    return Err(Error::Config("gauss_bump width must be positive".into()));
                }
                if center.len() != n {
                    return Err(Error::Config(format!(
                        "gauss_bump center has {} entries, dimension is {n}",
                        center.len()
                    )));
                }
                Ok(())
            }
            Self::Ramp { inner, .. } | Self::Osc { inner, .. } => inner.validate(n),
        }
    }

    pub fn eval(&self, t: f64, q: &DVector<f64>) -> ScalarEval {
        let n = q.len();
        match self {
            Self::Constant { value } => {
                let mut e = ScalarEval::zero(n);
                e.value = *value;
                e
            }
            Self::Affine { slope, intercept } => {
                let s = DVector::from_column_slice(slope);
                ScalarEval {
                    value: intercept + s.dot(q),
                    dt: 0.0,
                    grad: s,
                    hess: DMatrix::zeros(n, n),
                }
            }
            Self::Tanh { base, amp, rate, axis, offset } => {
                let th = (rate * (q[*axis] - offset)).tanh();
                let sech2 = 1.0 - th * th;
                let mut e = ScalarEval::zero(n);
                e.value = base + amp * th;
                e.grad[*axis] = amp * rate * sech2;
                e.hess[(*axis, *axis)] = -2.0 * amp * rate * rate * th * sech2;
                e
            }
            Self::TanhGauss { base, amp, rate, axis, width } => {
                let a = *axis;
                let th = (rate * q[a]).tanh();
                let sech2 = 1.0 - th * th;
                let tp = rate * sech2;
                let tpp = -2.0 * rate * rate * th * sech2;
                let g = (-width * q.norm_squared()).exp();
                let dg = DVector::from_fn(n, |i, _| -2.0 * width * q[i] * g);
                let mut e = ScalarEval::zero(n);
                e.value = base + amp * th * g;
                for i in 0..n {
                    e.grad[i] = amp * (tp * ((i == a) as i32 as f64) * g + th * dg[i]);
                }
                for i in 0..n {
                    for j in 0..n {
                        let ddg = g
                            * (4.0 * width * width * q[i] * q[j]
                                - 2.0 * width * ((i == j) as i32 as f64));
                        e.hess[(i, j)] = amp
                            * (tpp * ((i == a && j == a) as i32 as f64) * g
                                + tp * ((i == a) as i32 as f64) * dg[j]
                                + tp * ((j == a) as i32 as f64) * dg[i]
                                + th * ddg);
                    }
                }
                e
            }
            Self::GaussBump { amp, width, center } => {
                let c = DVector::from_column_slice(center);
                let u = q - &c;
                let w2 = width * width;
                let f = amp * (-u.norm_squared() / (2.0 * w2)).exp();
                let grad = &u * (-f / w2);
                let hess =
                    DMatrix::from_fn(n, n, |i, j| {
                        f * (u[i] * u[j] / (w2 * w2) - ((i == j) as i32 as f64) / w2)
                    });
                ScalarEval { value: f, dt: 0.0, grad, hess }
            }
            Self::Harmonic { k } => ScalarEval {
                value: 0.5 * k * q.norm_squared(),
                dt: 0.0,
                grad: q * *k,
                hess: DMatrix::identity(n, n) * *k,
            },
            Self::Quartic { a, b } => {
                let r2 = q.norm_squared();
                let grad = q * (a + b * r2);
                let hess = DMatrix::identity(n, n) * (a + b * r2)
                    + (q * q.transpose()) * (2.0 * b);
                ScalarEval { value: 0.5 * a * r2 + 0.25 * b * r2 * r2, dt: 0.0, grad, hess }
            }
            Self::Ramp { rate, inner } => {
                let e = inner.eval(t, q);
                let m = 1.0 + rate * t;
                ScalarEval {
                    value: e.value * m,
                    dt: e.dt * m + e.value * rate,
                    grad: e.grad * m,
                    hess: e.hess * m,
                }
            }
            Self::Osc { amp, omega, inner } => {
                let e = inner.eval(t, q);
                let m = 1.0 + amp * (omega * t).sin();
                let mp = amp * omega * (omega * t).cos();
                ScalarEval {
                    value: e.value * m,
                    dt: e.dt * m + e.value * mp,
                    grad: e.grad * m,
                    hess: e.hess * m,
                }
            }
        }
    }
}

/// Vector field family registry (psi, F_ext).
#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(tag = "family", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum VectorFieldSpec {
    /// `v = 0`.
    Zero,
    /// `v = components`.
    Constant { components: Vec<f64> },
    /// `v = (b0/2)(-q^2, q^1, 0, ...)`: vector potential of a uniform
    /// magnetic field along the third axis.
    UniformB { b0: f64 },
    /// `v = amp exp(-|q|^2/(2 width^2)) (-q^2, q^1, 0, ...)`: a localized
    /// rotational field.
    Swirl { amp: f64, width: f64 },
    /// `v = amp (-q^2, q^1, 0, ...)`.
    Solenoid { amp: f64 },
    /// `v = amp exp(-|q|^2/(2 width^2)) e_axis`.
    GaussAxis { amp: f64, axis: usize, width: f64 },
    /// `v = amp q_axis e_axis`.
    LinearAxis { amp: f64, axis: usize },
    /// `v = (1 + rate t) inner`.
    Ramp { rate: f64, inner: Box<VectorFieldSpec> },
    /// `v = (1 + amp sin(omega t)) inner`.
    Osc { amp: f64, omega: f64, inner: Box<VectorFieldSpec> },
}

impl VectorFieldSpec {
    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            Self::Zero => Ok(()),
            Self::Constant { components } => {
                if components.len() != n {
                    return Err(Error::Config(format!(
                        "constant vector has {} entries, dimension is {n}",
                        components.len()
                    )));
                }
                Ok(())
            }
            Self::UniformB { .. } | Self::Swirl { .. } | Self::Solenoid { .. } => {
                if n < 2 {
                    return Err(Error::Config("rotational fields need dimension >= 2".into()));
                }
                Ok(())
            }
            Self::GaussAxis { axis, width, .. } => {
                if *axis >= n {
                    return Err(Error::Config(format!(
                        "gauss_axis axis {axis} out of range for n = {n}"
                    )));
                }
                if *width <= 0.0 {
                    return Err(Error::Config("gauss_axis width must be positive".into()));
                }
                Ok(())
            }
            Self::LinearAxis { axis, .. } => {
                if *axis >= n {
                    return Err(Error::Config(format!(
                        "linear_axis axis {axis} out of range for n = {n}"
                    )));
                }
                Ok(())
            }
            Self::Ramp { inner, .. } | Self::Osc { inner, .. } => inner.validate(n),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Self::Zero => true,
            Self::Constant { components } => components.iter().all(|c| *c == 0.0),
            Self::UniformB { b0 } => *b0 == 0.0,
            Self::Swirl { amp, .. }
            | Self::Solenoid { amp }
            | Self::GaussAxis { amp, .. }
            | Self::LinearAxis { amp, .. } => *amp == 0.0,
            Self::Ramp { inner, .. } | Self::Osc { inner, .. } => inner.is_zero(),
        }
    }

    pub fn eval(&self, t: f64, q: &DVector<f64>) -> VectorEval {
        let n = q.len();
        match self {
            Self::Zero => VectorEval::zero(n),
            Self::Constant { components } => {
                let mut e = VectorEval::zero(n);
                e.value = DVector::from_column_slice(components);
                e
            }
            Self::UniformB { b0 } => {
                let mut e = VectorEval::zero(n);
                e.value[0] = -0.5 * b0 * q[1];
                e.value[1] = 0.5 * b0 * q[0];
                e.jac[(1, 0)] = -0.5 * b0;
                e.jac[(0, 1)] = 0.5 * b0;
                e
            }
            Self::Swirl { amp, width } => {
                let w2 = width * width;
                let g = amp * (-q.norm_squared() / (2.0 * w2)).exp();
                let dg = DVector::from_fn(n, |i, _| -g * q[i] / w2);
                let ddg = DMatrix::from_fn(n, n, |i, j| {
                    g * (q[i] * q[j] / (w2 * w2) - ((i == j) as i32 as f64) / w2)
                });
                let mut e = VectorEval::zero(n);
                e.value[0] = -g * q[1];
                e.value[1] = g * q[0];
                for i in 0..n {
                    e.jac[(i, 0)] = -dg[i] * q[1] - g * ((i == 1) as i32 as f64);
                    e.jac[(i, 1)] = dg[i] * q[0] + g * ((i == 0) as i32 as f64);
                }
                for i in 0..n {
                    for j in 0..n {
                        e.hess[0][(i, j)] = -ddg[(i, j)] * q[1]
                            - dg[i] * ((j == 1) as i32 as f64)
                            - dg[j] * ((i == 1) as i32 as f64);
                        e.hess[1][(i, j)] = ddg[(i, j)] * q[0]
                            + dg[i] * ((j == 0) as i32 as f64)
                            + dg[j] * ((i == 0) as i32 as f64);
                    }
                }
                e
            }
            Self::Solenoid { amp } => {
                let mut e = VectorEval::zero(n);
                e.value[0] = -amp * q[1];
                e.value[1] = amp * q[0];
                e.jac[(1, 0)] = -*amp;
                e.jac[(0, 1)] = *amp;
                e
            }
            Self::GaussAxis { amp, axis, width } => {
                let w2 = width * width;
                let g = amp * (-q.norm_squared() / (2.0 * w2)).exp();
                let mut e = VectorEval::zero(n);
                e.value[*axis] = g;
                for i in 0..n {
                    e.jac[(i, *axis)] = -g * q[i] / w2;
                }
                for i in 0..n {
                    for j in 0..n {
                        e.hess[*axis][(i, j)] =
                            g * (q[i] * q[j] / (w2 * w2) - ((i == j) as i32 as f64) / w2);
                    }
                }
                e
            }
            Self::LinearAxis { amp, axis } => {
                let mut e = VectorEval::zero(n);
                e.value[*axis] = amp * q[*axis];
                e.jac[(*axis, *axis)] = *amp;
                e
            }
            Self::Ramp { rate, inner } => {
                let e = inner.eval(t, q);
                let m = 1.0 + rate * t;
                let mut out = e.clone().scaled(m);
                out.dt = &e.dt * m + &e.value * *rate;
                out.dt_jac = &e.dt_jac * m + &e.jac * *rate;
                out
            }
            Self::Osc { amp, omega, inner } => {
                let e = inner.eval(t, q);
                let m = 1.0 + amp * (omega * t).sin();
                let mp = amp * omega * (omega * t).cos();
                let mut out = e.clone().scaled(m);
                out.dt = &e.dt * m + &e.value * mp;
                out.dt_jac = &e.dt_jac * m + &e.jac * mp;
                out
            }
        }
    }
}

/// Friction-matrix family registry (gamma). All families are symmetric
/// positive definite by construction wherever their parameters keep the
/// scalar profile positive, and independent of time.
#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(tag = "family", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum MatrixFieldSpec {
    /// `gamma = value I`.
    ConstantScalar { value: f64 },
    /// `gamma = entries` (row-major, symmetric).
    ConstantMatrix { entries: Vec<Vec<f64>> },
    /// `gamma = (base + amp tanh(rate q_axis)) I`.
    IsotropicTanh { base: f64, amp: f64, rate: f64, axis: usize },
    /// `gamma = R(rate q^1) diag(lam) R(rate q^1)^T` in dimension 2.
    Rotating { lam: Vec<f64>, rate: f64 },
}

impl MatrixFieldSpec {
    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            Self::ConstantScalar { value } => {
                if *value <= 0.0 {
                    return Err(Error::Config("constant_scalar gamma must be positive".into()));
                }
                Ok(())
            }
            Self::ConstantMatrix { entries } => {
                if entries.len() != n || entries.iter().any(|row| row.len() != n) {
                    return Err(Error::Config(format!(
                        "constant_matrix gamma must be {n}x{n}"
                    )));
                }
                for i in 0..n {
                    for j in 0..n {
                        if (entries[i][j] - entries[j][i]).abs() > 1e-12 {
                            return Err(Error::Config("gamma matrix must be symmetric".into()));
                        }
                    }
                }
                Ok(())
            }
            Self::IsotropicTanh { base, amp, axis, .. } => {
                if *axis >= n {
                    return Err(Error::Config(format!(
                        "isotropic_tanh axis {axis} out of range for n = {n}"
                    )));
                }
                if base - amp.abs() <= 0.0 {
                    return Err(Error::Config(
                        "isotropic_tanh profile can reach zero: need base > |amp|".into(),
                    ));
                }
                Ok(())
            }
            Self::Rotating { lam, .. } => {
                if n != 2 {
                    return Err(Error::Config("rotating gamma is defined for dimension 2".into()));
                }
                if lam.len() != 2 || lam.iter().any(|&l| l <= 0.0) {
                    return Err(Error::Config(
                        "rotating gamma needs two positive eigenvalues".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    /// `true` when the family has no q dependence.
    pub fn is_constant(&self) -> bool {
        matches!(self, Self::ConstantScalar { .. } | Self::ConstantMatrix { .. })
    }

    /// `true` when the value is a scalar multiple of the identity at every q.
    pub fn is_isotropic(&self) -> bool {
        matches!(self, Self::ConstantScalar { .. } | Self::IsotropicTanh { .. })
    }

    pub fn eval(&self, q: &DVector<f64>) -> MatrixEval {
        let n = q.len();
        match self {
            Self::ConstantScalar { value } => MatrixEval {
                value: DMatrix::identity(n, n) * *value,
                dq: vec![DMatrix::zeros(n, n); n],
            },
            Self::ConstantMatrix { entries } => MatrixEval {
                value: DMatrix::from_fn(n, n, |i, j| entries[i][j]),
                dq: vec![DMatrix::zeros(n, n); n],
            },
            Self::IsotropicTanh { base, amp, rate, axis } => {
                let th = (rate * q[*axis]).tanh();
                let s = base + amp * th;
                let sp = amp * rate * (1.0 - th * th);
                let mut dq = vec![DMatrix::zeros(n, n); n];
                dq[*axis] = DMatrix::identity(n, n) * sp;
                MatrixEval { value: DMatrix::identity(n, n) * s, dq }
            }
            Self::Rotating { lam, rate } => {
                let theta = rate * q[0];
                let (s, c) = theta.sin_cos();
                let r = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
                let rp = DMatrix::from_row_slice(2, 2, &[-s, -c, c, -s]);
                let d = DMatrix::from_diagonal(&DVector::from_vec(lam.clone()));
                let value = &r * &d * r.transpose();
                let dtheta = &rp * &d * r.transpose() + &r * &d * rp.transpose();
                MatrixEval { value, dq: vec![dtheta * *rate, DMatrix::zeros(2, 2)] }
            }
        }
    }
}
