//! Entropy production along simulated paths and its small-mass limit.
//!
//! The module has four layers:
//!
//! 1. Pointwise splitting algebra: the antisymmetric part `W` of
//!    `gamma_tilde^{-1}`, the drift halves `b_plus_hat` / `b_minus`, the
//!    modified covariance inverse `sigma_tilde_inverse`, and the scalar
//!    Riemann-integrand they combine into.
//! 2. [`EntropyLedger`]: a streaming per-path accumulator of the pathwise
//!    environment entropy over a time window, for either the underdamped
//!    dynamics (boundary energy term plus four midpoint integrals) or the
//!    overdamped dynamics (a Stratonovich dq-integral minus a Riemann
//!    integral). Observer adapters plug the ledger into ensembles.
//! 3. Expectation-level formulas: [`limit_formula`] evaluates the closed
//!    expression for the expected entropy by Monte Carlo over overdamped
//!    paths, at leading finite-mass order or at strict overdamped order;
//!    [`anomaly`] estimates the kernel quadratic that separates the two,
//!    in every closed-form variant applicable to the system; [`delta_e_s`]
//!    combines the three into a consistency residual.
//! 4. Homogenized velocity observables ([`HomogenizationObservable`]) and
//!    the vector/scalar reduction identities ([`y1_raw`] .. [`y2_uniform_field`])
//!    whose raw and simplified forms must agree pointwise.

use nalgebra::{DMatrix, DVector};

use crate::cellproblem::{gaussian_average, gaussian_moment, solve_cell, CellSolution};
use crate::error::{Error, Result};
use crate::matrixfun::{
    kron_sum, shifted_inverse, trace_weighted_integral, triple_exp_integral, MultilinearTensor,
    SquareMatrix,
};
use crate::simulate::{
    simulate_overdamped_ensemble, simulate_underdamped_ensemble, Convention, DivergencePolicy,
    OverdampedObserver, OverdampedState, UnderdampedObserver, UnderdampedState,
};
use crate::system::bundle::DerivativeBundle;
use crate::system::SystemSpec;

// ---------------------------------------------------------------------------
// Pointwise splitting algebra
// ---------------------------------------------------------------------------

/// The covector `Phi = V grad(beta) + beta F_ext - beta d_t psi` coupling the
/// slow variable to the temperature gradient and the non-gradient forces.
pub fn phi_vector(b: &DerivativeBundle) -> DVector<f64> {
    &b.grad_beta * b.v + &b.f_ext * b.beta - &b.dpsi_dt * b.beta
}

/// The midpoint fields the underdamped ledger integrates. Evaluating just
/// these is several times cheaper than a full [`DerivativeBundle`], which
/// matters because small-mass ensembles spend most of their time in the
/// per-step midpoint evaluation.
#[derive(Clone, Debug)]
pub struct LedgerMidpoint {
    pub beta: f64,
    pub dbeta_dt: f64,
    pub grad_beta: DVector<f64>,
    pub v: f64,
    pub dv_dt: f64,
    pub phi: DVector<f64>,
}

impl LedgerMidpoint {
    pub fn evaluate(spec: &SystemSpec, t: f64, q: &DVector<f64>) -> Result<Self> {
        let beta = spec.beta(t, q);
        if !(beta.value > 0.0) {
            return Err(Error::SpectralPrecondition(format!(
                "beta = {} must be positive at t={t}",
                beta.value
            )));
        }
        let v = spec.potential(t, q);
        let phi =
            &beta.grad * v.value + (spec.f_ext(t, q).value - spec.psi(t, q).dt) * beta.value;
        Ok(Self {
            beta: beta.value,
            dbeta_dt: beta.dt,
            grad_beta: beta.grad,
            v: v.value,
            dv_dt: v.dt,
            phi,
        })
    }
}

impl From<&DerivativeBundle> for LedgerMidpoint {
    fn from(b: &DerivativeBundle) -> Self {
        Self {
            beta: b.beta,
            dbeta_dt: b.dbeta_dt,
            grad_beta: b.grad_beta.clone(),
            v: b.v,
            dv_dt: b.dv_dt,
            phi: phi_vector(b),
        }
    }
}

/// Jacobian of [`phi_vector`]: entry `(i, j) = d_{q^i} Phi_j`.
pub fn phi_jacobian(b: &DerivativeBundle) -> DMatrix<f64> {
    let n = b.dim();
    DMatrix::from_fn(n, n, |i, j| {
        b.grad_v[i] * b.grad_beta[j] + b.v * b.hess_beta[(i, j)]
            + b.grad_beta[i] * b.f_ext[j]
            + b.beta * b.jac_f_ext[(i, j)]
            - b.grad_beta[i] * b.dpsi_dt[j]
            - b.beta * b.dt_jac_psi[(i, j)]
    })
}

/// Antisymmetric part of `gamma_tilde^{-1}`; vanishes identically when the
/// vector potential is zero.
pub fn w_matrix(b: &DerivativeBundle) -> SquareMatrix {
    (&b.gamma_tilde_inv - b.gamma_tilde_inv.transpose()) * 0.5
}

/// Spatial derivatives of [`w_matrix`], one matrix per coordinate.
pub fn w_gradient(b: &DerivativeBundle) -> Vec<SquareMatrix> {
    b.dgamma_tilde_inv
        .iter()
        .map(|d| (d - d.transpose()) * 0.5)
        .collect()
}

/// Row divergence `(div W)^i = sum_j d_{q^j} W^{ij}`.
fn divergence_second_index(dw: &[SquareMatrix]) -> DVector<f64> {
    let n = dw.len();
    DVector::from_fn(n, |i, _| (0..n).map(|j| dw[j][(i, j)]).sum())
}

fn gamma_inverse(gamma: &SquareMatrix) -> Result<SquareMatrix> {
    gamma
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Singular("gamma is not positive definite".into()))
}

/// Inverse of the overdamped noise covariance
/// `Sigma_tilde = 2 beta^{-1} gamma_tilde^{-1} gamma gamma_tilde^{-T}`,
/// computed in closed form as `(beta/2) gamma_tilde^T gamma^{-1} gamma_tilde`.
pub fn sigma_tilde_inverse(b: &DerivativeBundle) -> Result<SquareMatrix> {
    let ginv = gamma_inverse(&b.gamma)?;
    Ok(b.gamma_tilde.transpose() * ginv * &b.gamma_tilde * (0.5 * b.beta))
}

/// Even drift half `b_plus_hat = sym(gamma_tilde^{-1}) (F - grad(beta^{-1}))`.
pub fn b_plus_hat(b: &DerivativeBundle) -> DVector<f64> {
    let sym = (&b.gamma_tilde_inv + b.gamma_tilde_inv.transpose()) * 0.5;
    let vec = &b.force + &b.grad_beta / (b.beta * b.beta);
    sym * vec
}

/// Odd drift half `b_minus = W F + beta^{-1} div W`.
pub fn b_minus(b: &DerivativeBundle) -> DVector<f64> {
    let w = w_matrix(b);
    let divw = divergence_second_index(&w_gradient(b));
    w * &b.force + divw / b.beta
}

/// Divergence of [`b_minus`]. The second-derivative piece
/// `beta^{-1} d_i d_j W^{ij}` vanishes identically (symmetric derivative pair
/// against an antisymmetric matrix) and is omitted.
pub fn div_b_minus(b: &DerivativeBundle) -> f64 {
    let w = w_matrix(b);
    let divw = divergence_second_index(&w_gradient(b));
    let mut frobenius = 0.0;
    let n = b.dim();
    for i in 0..n {
        for j in 0..n {
            frobenius += w[(i, j)] * b.jac_force[(i, j)];
        }
    }
    -divw.dot(&b.force) + frobenius - b.grad_beta.dot(&divw) / (b.beta * b.beta)
}

/// The Stratonovich integrand covector `2 Sigma_tilde^{-1} b_plus_hat`. It
/// collapses to `beta (F + beta^{-2} grad beta)`, but is computed from its
/// factors so the algebraic identity stays a checkable property.
pub fn strat_covector(b: &DerivativeBundle) -> Result<DVector<f64>> {
    Ok(sigma_tilde_inverse(b)? * b_plus_hat(b) * 2.0)
}

/// The Riemann integrand `2 b_plus_hat^T Sigma_tilde^{-1} b_minus + div b_minus`
/// subtracted along overdamped paths.
pub fn riemann_term(b: &DerivativeBundle) -> Result<f64> {
    Ok(strat_covector(b)?.dot(&b_minus(b)) + div_b_minus(b))
}

// ---------------------------------------------------------------------------
// Window snapping
// ---------------------------------------------------------------------------

/// Snaps a requested window `[s, t]` onto the uniform step grid of the path
/// being observed. The spacing is learned from the first step, after which
/// every step is classified by its grid index so that adjacent windows
/// partition the accumulated sums exactly.
#[derive(Clone, Debug)]
struct StepWindow {
    s: f64,
    t: f64,
    dt: Option<f64>,
    k_start: usize,
    k_end: usize,
}

impl StepWindow {
    fn new(window: (f64, f64)) -> Result<Self> {
        let (s, t) = window;
        if !s.is_finite() || !t.is_finite() || s < 0.0 || t <= s {
            return Err(Error::InvalidInput(format!(
                "window must satisfy 0 <= s < t, got [{s}, {t}]"
            )));
        }
        Ok(Self { s, t, dt: None, k_start: 0, k_end: 0 })
    }

    /// `(include, starts, ends)` for the step `[before_t, after_t]`.
    fn classify(&mut self, before_t: f64, after_t: f64) -> (bool, bool, bool) {
        if self.dt.is_none() {
            let dt = after_t - before_t;
            self.dt = Some(dt);
            self.k_start = (self.s / dt).round() as usize;
            self.k_end = ((self.t / dt).round() as usize).max(self.k_start + 1);
        }
        let dt = self.dt.unwrap();
        let k = (before_t / dt).round() as usize;
        let include = k >= self.k_start && k < self.k_end;
        (include, include && k == self.k_start, include && k + 1 == self.k_end)
    }
}

// ---------------------------------------------------------------------------
// Entropy ledger
// ---------------------------------------------------------------------------

/// Which time-reversal splitting the overdamped ledger certifies. The two
/// splittings produce the same drift halves on systems where both are legal,
/// so they share one accumulation path; the tag only switches the structural
/// precondition that is enforced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OverdampedSplitting {
    /// Time reflection with the vector potential flipped; applies to every system.
    Standard,
    /// Time reflection keeping psi fixed; requires a `uniform_B0` system.
    UniformB,
}

/// Dynamics regime a ledger accumulates under.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LedgerRegime {
    Underdamped { mass: f64 },
    Overdamped { splitting: OverdampedSplitting },
}

/// Streaming pathwise environment-entropy accumulator over a window `[s, t]`.
///
/// Underdamped total:
/// `beta H (s) - beta H (t) + sum of the four running integrals`, where
/// `H = ||z||^2 / 2 + V` and the integrals are (with midpoint evaluation)
/// `d_r(beta V) dt`, `(1/2) d_r(beta) ||z||^2 dt`,
/// `(1/(2 sqrt m)) ||z||^2 grad(beta) . z dt`, and `(1/sqrt m) Phi . z dt`.
///
/// Overdamped total: the Stratonovich sum `2 b_plus_hat^T Sigma_tilde^{-1} . dq`
/// (midpoint covector dotted with the position increment, which is exactly the
/// discrete Stratonovich integral of the Heun stepper) minus the Riemann sum
/// of [`riemann_term`].
#[derive(Clone, Debug)]
pub struct EntropyLedger {
    regime: LedgerRegime,
    window: StepWindow,
    boundary_start: Option<f64>,
    boundary_end: Option<f64>,
    covered_start: bool,
    covered_end: bool,
    terms: [f64; 4],
}

impl EntropyLedger {
    pub fn new(regime: LedgerRegime, window: (f64, f64)) -> Result<Self> {
        if let LedgerRegime::Underdamped { mass } = regime {
            if !(mass > 0.0) || !mass.is_finite() {
                return Err(Error::InvalidInput(format!("mass must be positive, got {mass}")));
            }
        }
        Ok(Self {
            regime,
            window: StepWindow::new(window)?,
            boundary_start: None,
            boundary_end: None,
            covered_start: false,
            covered_end: false,
            terms: [0.0; 4],
        })
    }

    pub fn regime(&self) -> LedgerRegime {
        self.regime
    }

    pub fn window(&self) -> (f64, f64) {
        (self.window.s, self.window.t)
    }

    /// Running integral accumulators. Underdamped order:
    /// `[d_r(beta V), kinetic heating, cubic velocity, force coupling]`.
    /// Overdamped order: `[stratonovich, riemann, 0, 0]`.
    pub fn components(&self) -> [f64; 4] {
        self.terms
    }

    /// Boundary snapshots `beta H` at the window edges (underdamped only).
    pub fn boundary(&self) -> (Option<f64>, Option<f64>) {
        (self.boundary_start, self.boundary_end)
    }

    /// One underdamped step. `mid` must be evaluated at the step midpoint
    /// `((t + t') / 2, (q + q') / 2)`.
    pub fn accumulate_underdamped(
        &mut self,
        spec: &SystemSpec,
        m: f64,
        before: &UnderdampedState,
        after: &UnderdampedState,
        mid: &LedgerMidpoint,
    ) -> Result<()> {
        let LedgerRegime::Underdamped { mass } = self.regime else {
            return Err(Error::Incompatible(
                "accumulate_underdamped called on an overdamped ledger".into(),
            ));
        };
        if (mass - m).abs() > 1e-12 * mass.max(1.0) {
            return Err(Error::Incompatible(format!(
                "ledger was built for mass {mass} but the step uses mass {m}"
            )));
        }
        let (include, starts, ends) = self.window.classify(before.t, after.t);
        if starts {
            self.boundary_start = Some(boundary_energy(spec, before));
            self.covered_start = true;
        }
        if include {
            let dt = after.t - before.t;
            let z_mid = (&before.z + &after.z) * 0.5;
            let zz = z_mid.norm_squared();
            let inv_sqrt_m = 1.0 / mass.sqrt();
            self.terms[0] += (mid.dbeta_dt * mid.v + mid.beta * mid.dv_dt) * dt;
            self.terms[1] += 0.5 * mid.dbeta_dt * zz * dt;
            self.terms[2] += 0.5 * inv_sqrt_m * zz * mid.grad_beta.dot(&z_mid) * dt;
            self.terms[3] += inv_sqrt_m * mid.phi.dot(&z_mid) * dt;
        }
        if ends {
            self.boundary_end = Some(boundary_energy(spec, after));
            self.covered_end = true;
        }
        Ok(())
    }

    /// One overdamped step. `mid` must be the derivative bundle at the step
    /// midpoint; `dq = after.q - before.q` supplies the Stratonovich increment.
    pub fn accumulate_overdamped(
        &mut self,
        spec: &SystemSpec,
        before: &OverdampedState,
        after: &OverdampedState,
        mid: &DerivativeBundle,
    ) -> Result<()> {
        let LedgerRegime::Overdamped { splitting } = self.regime else {
            return Err(Error::Incompatible(
                "accumulate_overdamped called on an underdamped ledger".into(),
            ));
        };
        if splitting == OverdampedSplitting::UniformB && spec.uniform_b0().is_none() {
            return Err(Error::Incompatible(
                "the uniform-B splitting requires a system with uniform_B0 set".into(),
            ));
        }
        let (include, starts, ends) = self.window.classify(before.t, after.t);
        if starts {
            self.covered_start = true;
        }
        if include {
            let dt = after.t - before.t;
            let dq = &after.q - &before.q;
            self.terms[0] += strat_covector(mid)?.dot(&dq);
            self.terms[1] += riemann_term(mid)? * dt;
        }
        if ends {
            self.covered_end = true;
        }
        Ok(())
    }

    /// Accumulated entropy over the window. Errors if the observed path never
    /// covered the window edges.
    pub fn total(&self) -> Result<f64> {
        if !(self.covered_start && self.covered_end) {
            return Err(Error::Incompatible(
                "ledger window was not fully covered by the observed path".into(),
            ));
        }
        match self.regime {
            LedgerRegime::Underdamped { .. } => {
                let start = self.boundary_start.expect("covered_start implies snapshot");
                let end = self.boundary_end.expect("covered_end implies snapshot");
                Ok(start - end + self.terms.iter().sum::<f64>())
            }
            LedgerRegime::Overdamped { .. } => Ok(self.terms[0] - self.terms[1]),
        }
    }
}

fn boundary_energy(spec: &SystemSpec, state: &UnderdampedState) -> f64 {
    let beta = spec.beta(state.t, &state.q).value;
    let v = spec.potential(state.t, &state.q).value;
    beta * (0.5 * state.z.norm_squared() + v)
}

/// Ensemble adapter reporting one output, the ledger total, per underdamped path.
pub struct UnderdampedLedgerObserver {
    window: (f64, f64),
    ledger: Option<EntropyLedger>,
}

impl UnderdampedLedgerObserver {
    pub fn new(window: (f64, f64)) -> Self {
        Self { window, ledger: None }
    }
}

impl UnderdampedObserver for UnderdampedLedgerObserver {
    fn output_dim(&self) -> usize {
        1
    }

    fn needs_midpoint(&self) -> bool {
        false
    }

    fn begin(&mut self, _spec: &SystemSpec, m: f64, _state: &UnderdampedState) -> Result<()> {
        self.ledger =
            Some(EntropyLedger::new(LedgerRegime::Underdamped { mass: m }, self.window)?);
        Ok(())
    }

    fn on_step(
        &mut self,
        spec: &SystemSpec,
        m: f64,
        before: &UnderdampedState,
        after: &UnderdampedState,
        _mid: Option<&DerivativeBundle>,
    ) -> Result<()> {
        // The ledger reads a handful of scalar and covector fields at the
        // midpoint, so evaluate those directly instead of requesting the
        // runner's full midpoint bundle.
        let mid_t = 0.5 * (before.t + after.t);
        let mid_q = (&before.q + &after.q) * 0.5;
        let mid = LedgerMidpoint::evaluate(spec, mid_t, &mid_q)?;
        self.ledger
            .as_mut()
            .expect("begin ran")
            .accumulate_underdamped(spec, m, before, after, &mid)
    }

    fn finish(
        &mut self,
        _spec: &SystemSpec,
        _m: f64,
        _state: &UnderdampedState,
        out: &mut Vec<f64>,
    ) -> Result<()> {
        out.push(self.ledger.as_ref().expect("begin ran").total()?);
        Ok(())
    }
}

/// Ensemble adapter reporting the ledger total per overdamped path.
pub struct OverdampedLedgerObserver {
    window: (f64, f64),
    splitting: OverdampedSplitting,
    ledger: Option<EntropyLedger>,
}

impl OverdampedLedgerObserver {
    pub fn new(window: (f64, f64), splitting: OverdampedSplitting) -> Self {
        Self { window, splitting, ledger: None }
    }
}

impl OverdampedObserver for OverdampedLedgerObserver {
    fn output_dim(&self) -> usize {
        1
    }

    fn begin(&mut self, _spec: &SystemSpec, _state: &OverdampedState) -> Result<()> {
        self.ledger = Some(EntropyLedger::new(
            LedgerRegime::Overdamped { splitting: self.splitting },
            self.window,
        )?);
        Ok(())
    }

    fn on_step(
        &mut self,
        spec: &SystemSpec,
        before: &OverdampedState,
        after: &OverdampedState,
        _node: &DerivativeBundle,
        mid: Option<&DerivativeBundle>,
        _dw: &DVector<f64>,
    ) -> Result<()> {
        let mid = mid.ok_or_else(|| {
            Error::Incompatible("ledger observers need midpoint bundles".into())
        })?;
        self.ledger
            .as_mut()
            .expect("begin ran")
            .accumulate_overdamped(spec, before, after, mid)
    }

    fn finish(
        &mut self,
        _spec: &SystemSpec,
        _state: &OverdampedState,
        out: &mut Vec<f64>,
    ) -> Result<()> {
        out.push(self.ledger.as_ref().expect("begin ran").total()?);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Anomaly kernels
// ---------------------------------------------------------------------------

/// Closed-form variants of the anomaly integrand. Every variant evaluates the
/// same quadratic form in `grad beta` once its structural precondition holds;
/// pointwise agreement between applicable variants is a library invariant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnomalyVariant {
    /// Kernel built from the triple-exponential integral tensor of
    /// `gamma_tilde`; applicable to every system.
    General,
    /// `psi = 0` form with the trace-weighted integral kernel.
    PsiZero,
    /// `psi = 0` form resolved on the eigenbasis of gamma.
    PsiZeroEigen,
    /// Isotropic scalar gamma with `psi = 0`: `(n+2)/6 beta^{-3} ||grad beta||^2 / g`.
    Scalar,
    /// Uniform magnetic field: `(n+2)/2 beta^{-3} grad(beta) . (gamma_tilde + 2 gamma)^{-1} grad(beta)`.
    UniformB,
}

impl AnomalyVariant {
    pub const ALL: [AnomalyVariant; 5] = [
        AnomalyVariant::General,
        AnomalyVariant::PsiZero,
        AnomalyVariant::PsiZeroEigen,
        AnomalyVariant::Scalar,
        AnomalyVariant::UniformB,
    ];

    /// Whether the variant's structural precondition holds for `spec`.
    pub fn is_applicable(self, spec: &SystemSpec) -> bool {
        match self {
            AnomalyVariant::General => true,
            AnomalyVariant::PsiZero | AnomalyVariant::PsiZeroEigen => spec.psi_is_zero(),
            AnomalyVariant::Scalar => spec.psi_is_zero() && spec.gamma_is_isotropic(),
            AnomalyVariant::UniformB => spec.uniform_b0().is_some(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            AnomalyVariant::General => "general",
            AnomalyVariant::PsiZero => "psi_zero",
            AnomalyVariant::PsiZeroEigen => "psi_zero_eigen",
            AnomalyVariant::Scalar => "scalar",
            AnomalyVariant::UniformB => "uniform_b",
        }
    }
}

/// The variants whose preconditions `spec` satisfies, in `ALL` order.
pub fn applicable_variants(spec: &SystemSpec) -> Vec<AnomalyVariant> {
    AnomalyVariant::ALL.iter().copied().filter(|v| v.is_applicable(spec)).collect()
}

fn tensor2_to_matrix(t: &MultilinearTensor) -> SquareMatrix {
    let n = t.dim();
    SquareMatrix::from_fn(n, n, |i, j| t.get(&[i, j]))
}

/// The anomaly kernel matrix
/// `K = (n/2) I + [dd G dd gt] - [dd G gamma dd]` contracted from the
/// triple-exponential integral tensor of `gamma_tilde`. For isotropic
/// `gamma_tilde = g I` it collapses to `(n+2)/6 I`.
pub fn anomaly_k_matrix(gamma_tilde: &SquareMatrix, gamma: &SquareMatrix) -> Result<SquareMatrix> {
    let n = gamma_tilde.nrows();
    let id = SquareMatrix::identity(n, n);
    let g = triple_exp_integral(gamma_tilde)?;
    // Slots after contracting the first index pair: (i3, j1, j2, j3).
    let g_ii = g.contract_pair(0, 1, &id);
    let a = g_ii.contract_pair(2, 3, &id).apply_slot(1, gamma_tilde);
    let b = g_ii.contract_pair(1, 2, gamma);
    Ok(SquareMatrix::identity(n, n) * (n as f64 / 2.0) + tensor2_to_matrix(&a)
        - tensor2_to_matrix(&b))
}

fn quadratic(grad_beta: &DVector<f64>, kernel: &SquareMatrix, right: &DVector<f64>) -> f64 {
    grad_beta.dot(&(kernel * right))
}

/// Evaluates one anomaly-integrand variant at a point, given the derivative
/// bundle there. Errors when the variant's precondition fails for `spec`.
pub fn anomaly_integrand(
    spec: &SystemSpec,
    b: &DerivativeBundle,
    variant: AnomalyVariant,
) -> Result<f64> {
    if !variant.is_applicable(spec) {
        return Err(Error::Incompatible(format!(
            "anomaly variant {} is not applicable to this system",
            variant.name()
        )));
    }
    anomaly_integrand_unchecked(b, variant, None)
}

/// Same as [`anomaly_integrand`] but optionally reusing a precomputed general
/// kernel (valid only when `gamma_tilde` is constant).
fn anomaly_integrand_unchecked(
    b: &DerivativeBundle,
    variant: AnomalyVariant,
    general_kernel: Option<&SquareMatrix>,
) -> Result<f64> {
    let n = b.dim() as f64;
    let beta3 = b.beta * b.beta * b.beta;
    let value = match variant {
        AnomalyVariant::General => {
            let owned;
            let k = match general_kernel {
                Some(k) => k,
                None => {
                    owned = anomaly_k_matrix(&b.gamma_tilde, &b.gamma)?;
                    &owned
                }
            };
            quadratic(&b.grad_beta, k, &(&b.gamma_tilde_inv * &b.grad_beta)) / beta3
        }
        AnomalyVariant::PsiZero => {
            let ginv = gamma_inverse(&b.gamma)?;
            let m = trace_weighted_integral(&b.gamma)?;
            let kernel = SquareMatrix::identity(b.dim(), b.dim()) * ((3.0 * n + 2.0) / 6.0) - m;
            let right: DVector<f64> = &ginv * &b.grad_beta;
            quadratic(&b.grad_beta, &kernel, &right) / beta3
        }
        AnomalyVariant::PsiZeroEigen => {
            let nd = b.dim();
            let ginv = gamma_inverse(&b.gamma)?;
            let eig = b.gamma.clone().symmetric_eigen();
            let mut kernel = ginv / 3.0;
            for l in 0..nd {
                let shifted = &b.gamma + SquareMatrix::identity(nd, nd) * (2.0 * eig.eigenvalues[l]);
                kernel += gamma_inverse(&shifted)? * 0.5;
            }
            quadratic(&b.grad_beta, &kernel, &b.grad_beta) / beta3
        }
        AnomalyVariant::Scalar => {
            let g = b.gamma[(0, 0)];
            (n + 2.0) / 6.0 * b.grad_beta.norm_squared() / (beta3 * g)
        }
        AnomalyVariant::UniformB => {
            let si = shifted_inverse(&b.gamma_tilde, &b.gamma)?;
            (n + 2.0) / 2.0 * quadratic(&b.grad_beta, &si, &b.grad_beta) / beta3
        }
    };
    Ok(value)
}

// ---------------------------------------------------------------------------
// Limit formula
// ---------------------------------------------------------------------------

/// Which expectation the limit formula targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LimitOrder {
    /// Leading small-mass expectation of the underdamped entropy: log-ratio
    /// coefficient `(n+2)/2` and the anomaly kernel term present.
    FiniteMassLeading,
    /// Overdamped entropy expectation: unit log-ratio coefficient, no kernel term.
    Overdamped,
}

pub const LIMIT_TERM_NAMES: [&str; 7] = [
    "boundary_beta_v",
    "log_beta_ratio",
    "time_derivative_beta_v",
    "beta_rate",
    "force_coupling",
    "phi_divergence",
    "anomaly_kernel",
];

#[derive(Clone, Debug)]
pub struct LimitTerm {
    pub name: &'static str,
    pub mean: f64,
    pub stderr: f64,
}

/// Monte Carlo evaluation of the closed-form expected entropy over overdamped
/// paths, split into its named terms.
#[derive(Clone, Debug)]
pub struct LimitFormulaReport {
    pub order: LimitOrder,
    pub window: (f64, f64),
    /// The seven terms in [`LIMIT_TERM_NAMES`] order; for
    /// [`LimitOrder::Overdamped`] the kernel term is identically zero.
    pub terms: Vec<LimitTerm>,
    pub total: f64,
    pub total_stderr: f64,
    /// Mean and standard error of the raw `ln(beta_t / beta_s)` without the
    /// order-dependent coefficient.
    pub raw_log_ratio: (f64, f64),
    pub paths: u64,
    pub excluded: usize,
}

#[derive(Clone)]
struct LimitContext {
    order: LimitOrder,
    window: (f64, f64),
    dim: usize,
    psi_zero: bool,
    /// Present when `gamma_tilde` is constant: the general kernel, frozen.
    fixed_kernel: Option<SquareMatrix>,
}

struct NodeEval {
    integrands: [f64; 5],
    beta: f64,
    v: f64,
}

fn div_phi_with(
    phi: &DVector<f64>,
    phi_jac: &DMatrix<f64>,
    inv: &SquareMatrix,
    dinv: &[SquareMatrix],
) -> f64 {
    let n = phi.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            total += phi_jac[(i, j)] * inv[(j, i)] + phi[j] * dinv[i][(j, i)];
        }
    }
    total
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

fn limit_node_eval(ctx: &LimitContext, b: &DerivativeBundle) -> Result<NodeEval> {
    let phi = phi_vector(b);
    let phi_jac = phi_jacobian(b);
    let f3 = b.dbeta_dt * b.v + b.beta * b.dv_dt;
    let f4 = -b.dbeta_dt / b.beta;
    let f5 = phi.dot(&(&b.gamma_tilde_inv * &b.force));
    let f6 = div_phi_with(&phi, &phi_jac, &b.gamma_tilde_inv, &b.dgamma_tilde_inv) / b.beta;
    let f7 = match ctx.order {
        LimitOrder::Overdamped => 0.0,
        LimitOrder::FiniteMassLeading => {
            anomaly_integrand_unchecked(b, AnomalyVariant::General, ctx.fixed_kernel.as_ref())?
        }
    };
    if ctx.psi_zero {
        // Independent reduced code path with gamma in place of gamma_tilde;
        // both evaluations must agree to near machine precision.
        let ginv = gamma_inverse(&b.gamma)?;
        let dginv: Vec<SquareMatrix> =
            b.dgamma.iter().map(|d| -(&ginv) * d * &ginv).collect();
        let f5r = phi.dot(&(&ginv * &b.force));
        let f6r = div_phi_with(&phi, &phi_jac, &ginv, &dginv) / b.beta;
        let f7r = match ctx.order {
            LimitOrder::Overdamped => 0.0,
            LimitOrder::FiniteMassLeading => {
                anomaly_integrand_unchecked(b, AnomalyVariant::PsiZero, None)?
            }
        };
        for (full, reduced, name) in
            [(f5, f5r, "force_coupling"), (f6, f6r, "phi_divergence"), (f7, f7r, "anomaly_kernel")]
        {
            if !close(full, reduced, 1e-9) {
                return Err(Error::Numerical(format!(
                    "psi = 0 reduced formula disagrees with the general path on {name}: {full} vs {reduced}"
                )));
            }
        }
    }
    Ok(NodeEval { integrands: [f3, f4, f5, f6, f7], beta: b.beta, v: b.v })
}

/// Trapezoid-rule limit-formula observer over the stored node grid. Each
/// included step contributes half its width at the left node immediately and
/// leaves the right-endpoint half pending until that node's bundle arrives
/// (on the next step, or from one extra evaluation in `finish`), so the
/// quadrature reuses the stepper's node bundles exclusively.
///
/// Output layout: positions `0..7` are the terms in [`LIMIT_TERM_NAMES`]
/// order, position [`Self::OUT_RAW_LOG`] is the raw `ln(beta_t / beta_s)`,
/// position [`Self::OUT_TOTAL`] is the term sum.
#[derive(Clone)]
pub struct LimitFormulaObserver {
    ctx: LimitContext,
    window: StepWindow,
    acc: [f64; 5],
    pending_right: Option<f64>,
    pending_is_end: bool,
    bv_start: f64,
    ln_start: f64,
    bv_end: f64,
    ln_end: f64,
    covered_start: bool,
    covered_end: bool,
}

impl LimitFormulaObserver {
    pub const OUT_RAW_LOG: usize = 7;
    pub const OUT_TOTAL: usize = 8;

    /// Builds the observer for one system, freezing the general anomaly
    /// kernel when `gamma_tilde` is constant and enabling the `psi = 0`
    /// cross-check when applicable. Fresh clones accumulate independently,
    /// so one instance can serve as a per-path prototype.
    pub fn for_system(spec: &SystemSpec, order: LimitOrder, window: (f64, f64)) -> Result<Self> {
        if window.1 > spec.horizon() + 1e-12 {
            return Err(Error::InvalidInput(format!(
                "window end {} exceeds the system horizon {}",
                window.1,
                spec.horizon()
            )));
        }
        let fixed_kernel =
            if order == LimitOrder::FiniteMassLeading && spec.gamma_tilde_is_constant() {
                let q_probe = DVector::zeros(spec.dim());
                let b = DerivativeBundle::evaluate(spec, 0.0, &q_probe)?;
                Some(anomaly_k_matrix(&b.gamma_tilde, &b.gamma)?)
            } else {
                None
            };
        Self::new(LimitContext {
            order,
            window,
            psi_zero: spec.psi_is_zero(),
            fixed_kernel,
            dim: spec.dim(),
        })
    }

    fn new(ctx: LimitContext) -> Result<Self> {
        Ok(Self {
            window: StepWindow::new(ctx.window)?,
            ctx,
            acc: [0.0; 5],
            pending_right: None,
            pending_is_end: false,
            bv_start: 0.0,
            ln_start: 0.0,
            bv_end: 0.0,
            ln_end: 0.0,
            covered_start: false,
            covered_end: false,
        })
    }

    fn settle_pending(&mut self, eval: &NodeEval) {
        if let Some(dt) = self.pending_right.take() {
            for c in 0..5 {
                self.acc[c] += 0.5 * dt * eval.integrands[c];
            }
            if self.pending_is_end {
                self.bv_end = eval.beta * eval.v;
                self.ln_end = eval.beta.ln();
                self.covered_end = true;
                self.pending_is_end = false;
            }
        }
    }
}

impl OverdampedObserver for LimitFormulaObserver {
    fn output_dim(&self) -> usize {
        9
    }

    fn needs_midpoint(&self) -> bool {
        false
    }

    fn begin(&mut self, _spec: &SystemSpec, _state: &OverdampedState) -> Result<()> {
        Ok(())
    }

    fn on_step(
        &mut self,
        _spec: &SystemSpec,
        before: &OverdampedState,
        after: &OverdampedState,
        node: &DerivativeBundle,
        _mid: Option<&DerivativeBundle>,
        _dw: &DVector<f64>,
    ) -> Result<()> {
        let (include, starts, ends) = self.window.classify(before.t, after.t);
        if self.pending_right.is_none() && !include {
            return Ok(());
        }
        let eval = limit_node_eval(&self.ctx, node)?;
        self.settle_pending(&eval);
        if include {
            if starts {
                self.bv_start = eval.beta * eval.v;
                self.ln_start = eval.beta.ln();
                self.covered_start = true;
            }
            let dt = after.t - before.t;
            for c in 0..5 {
                self.acc[c] += 0.5 * dt * eval.integrands[c];
            }
            self.pending_right = Some(dt);
            self.pending_is_end = ends;
        }
        Ok(())
    }

    fn finish(
        &mut self,
        spec: &SystemSpec,
        state: &OverdampedState,
        out: &mut Vec<f64>,
    ) -> Result<()> {
        if self.pending_right.is_some() {
            let b = DerivativeBundle::evaluate(spec, state.t, &state.q)?;
            let eval = limit_node_eval(&self.ctx, &b)?;
            self.settle_pending(&eval);
        }
        if !(self.covered_start && self.covered_end) {
            return Err(Error::Incompatible(
                "limit-formula window was not covered by the simulated horizon".into(),
            ));
        }
        let raw_log = self.ln_end - self.ln_start;
        let coeff = match self.ctx.order {
            LimitOrder::FiniteMassLeading => 0.5 * (self.ctx.dim as f64 + 2.0),
            LimitOrder::Overdamped => 1.0,
        };
        let boundary = self.bv_start - self.bv_end;
        let log_term = coeff * raw_log;
        let total = boundary + log_term + self.acc.iter().sum::<f64>();
        out.push(boundary);
        out.push(log_term);
        out.extend_from_slice(&self.acc);
        out.push(raw_log);
        out.push(total);
        Ok(())
    }
}

/// Evaluates the expected-entropy formula at the requested order by Monte
/// Carlo over fresh overdamped paths (Ito convention), with the time integrals
/// taken by the trapezoid rule over the stored step grid. When `psi = 0` the
/// reduced formula is evaluated alongside the general one at every node and
/// the two must agree to 1e-9.
pub fn limit_formula(
    spec: &SystemSpec,
    order: LimitOrder,
    window: (f64, f64),
    n_paths: usize,
    steps: usize,
    seed: u64,
) -> Result<LimitFormulaReport> {
    let prototype = LimitFormulaObserver::for_system(spec, order, window)?;
    let outcome = simulate_overdamped_ensemble(
        spec,
        Convention::Ito,
        n_paths,
        window.1,
        steps,
        seed,
        DivergencePolicy::RecordAndContinue,
        &|| vec![Box::new(prototype.clone())],
    )?;
    let stats = outcome.stats;
    let terms = (0..7)
        .map(|i| LimitTerm { name: LIMIT_TERM_NAMES[i], mean: stats.mean(i), stderr: stats.stderr(i) })
        .collect();
    Ok(LimitFormulaReport {
        order,
        window,
        terms,
        total: stats.mean(8),
        total_stderr: stats.stderr(8),
        raw_log_ratio: (stats.mean(7), stats.stderr(7)),
        paths: stats.count(),
        excluded: outcome.excluded,
    })
}

// ---------------------------------------------------------------------------
// Anomaly Monte Carlo
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct AnomalyEstimate {
    pub variant: AnomalyVariant,
    pub mean: f64,
    pub stderr: f64,
}

/// Monte Carlo anomaly integrals for a set of variants, estimated on one
/// shared ensemble of overdamped paths so the estimates are directly
/// comparable.
#[derive(Clone, Debug)]
pub struct AnomalyReport {
    pub window: (f64, f64),
    pub estimates: Vec<AnomalyEstimate>,
    /// Largest |mean_i - mean_j| over all variant pairs; applicable variants
    /// compute the same quantity, so this gauges cross-formula agreement.
    pub max_pairwise_gap: f64,
    pub paths: u64,
    pub excluded: usize,
}

/// Trapezoid-rule anomaly integrator over the stored node grid, one output
/// per requested variant in their given order. Fresh clones accumulate
/// independently, so one instance can serve as a per-path prototype.
#[derive(Clone)]
pub struct AnomalyObserver {
    variants: Vec<AnomalyVariant>,
    fixed_kernel: Option<SquareMatrix>,
    window: StepWindow,
    acc: Vec<f64>,
    pending_right: Option<f64>,
    pending_is_end: bool,
    covered_start: bool,
    covered_end: bool,
}

impl AnomalyObserver {
    /// Builds the observer for one system, validating variant applicability
    /// and the window, and freezing the general kernel when `gamma_tilde` is
    /// constant.
    pub fn for_system(
        spec: &SystemSpec,
        variants: &[AnomalyVariant],
        window: (f64, f64),
    ) -> Result<Self> {
        if variants.is_empty() {
            return Err(Error::InvalidInput("at least one anomaly variant is required".into()));
        }
        for v in variants {
            if !v.is_applicable(spec) {
                return Err(Error::Incompatible(format!(
                    "anomaly variant {} is not applicable to this system",
                    v.name()
                )));
            }
        }
        if window.1 > spec.horizon() + 1e-12 {
            return Err(Error::InvalidInput(format!(
                "window end {} exceeds the system horizon {}",
                window.1,
                spec.horizon()
            )));
        }
        let fixed_kernel = if variants.contains(&AnomalyVariant::General)
            && spec.gamma_tilde_is_constant()
        {
            let q_probe = DVector::zeros(spec.dim());
            let b = DerivativeBundle::evaluate(spec, 0.0, &q_probe)?;
            Some(anomaly_k_matrix(&b.gamma_tilde, &b.gamma)?)
        } else {
            None
        };
        Ok(Self {
            variants: variants.to_vec(),
            fixed_kernel,
            window: StepWindow::new(window)?,
            acc: vec![0.0; variants.len()],
            pending_right: None,
            pending_is_end: false,
            covered_start: false,
            covered_end: false,
        })
    }

    fn node_eval(&self, b: &DerivativeBundle) -> Result<Vec<f64>> {
        self.variants
            .iter()
            .map(|&v| {
                let kernel = if v == AnomalyVariant::General {
                    self.fixed_kernel.as_ref()
                } else {
                    None
                };
                anomaly_integrand_unchecked(b, v, kernel)
            })
            .collect()
    }

    fn settle_pending(&mut self, vals: &[f64]) {
        if let Some(dt) = self.pending_right.take() {
            for (acc, v) in self.acc.iter_mut().zip(vals) {
                *acc += 0.5 * dt * v;
            }
            if self.pending_is_end {
                self.covered_end = true;
                self.pending_is_end = false;
            }
        }
    }
}

impl OverdampedObserver for AnomalyObserver {
    fn output_dim(&self) -> usize {
        self.variants.len()
    }

    fn needs_midpoint(&self) -> bool {
        false
    }

    fn begin(&mut self, _spec: &SystemSpec, _state: &OverdampedState) -> Result<()> {
        Ok(())
    }

    fn on_step(
        &mut self,
        _spec: &SystemSpec,
        before: &OverdampedState,
        after: &OverdampedState,
        node: &DerivativeBundle,
        _mid: Option<&DerivativeBundle>,
        _dw: &DVector<f64>,
    ) -> Result<()> {
        let (include, starts, ends) = self.window.classify(before.t, after.t);
        if self.pending_right.is_none() && !include {
            return Ok(());
        }
        let vals = self.node_eval(node)?;
        self.settle_pending(&vals);
        if include {
            if starts {
                self.covered_start = true;
            }
            let dt = after.t - before.t;
            for (acc, v) in self.acc.iter_mut().zip(&vals) {
                *acc += 0.5 * dt * v;
            }
            self.pending_right = Some(dt);
            self.pending_is_end = ends;
        }
        Ok(())
    }

    fn finish(
        &mut self,
        spec: &SystemSpec,
        state: &OverdampedState,
        out: &mut Vec<f64>,
    ) -> Result<()> {
        if self.pending_right.is_some() {
            let b = DerivativeBundle::evaluate(spec, state.t, &state.q)?;
            let vals = self.node_eval(&b)?;
            self.settle_pending(&vals);
        }
        if !(self.covered_start && self.covered_end) {
            return Err(Error::Incompatible(
                "anomaly window was not covered by the simulated horizon".into(),
            ));
        }
        out.extend_from_slice(&self.acc);
        Ok(())
    }
}

/// Estimates the anomaly integral for each requested variant on one shared
/// overdamped ensemble. Errors when any requested variant is inapplicable.
pub fn anomaly(
    spec: &SystemSpec,
    variants: &[AnomalyVariant],
    window: (f64, f64),
    n_paths: usize,
    steps: usize,
    seed: u64,
) -> Result<AnomalyReport> {
    let prototype = AnomalyObserver::for_system(spec, variants, window)?;
    let outcome = simulate_overdamped_ensemble(
        spec,
        Convention::Ito,
        n_paths,
        window.1,
        steps,
        seed,
        DivergencePolicy::RecordAndContinue,
        &|| vec![Box::new(prototype.clone())],
    )?;
    let stats = outcome.stats;
    let estimates: Vec<AnomalyEstimate> = variants
        .iter()
        .enumerate()
        .map(|(i, &variant)| AnomalyEstimate {
            variant,
            mean: stats.mean(i),
            stderr: stats.stderr(i),
        })
        .collect();
    let mut max_gap: f64 = 0.0;
    for i in 0..estimates.len() {
        for j in (i + 1)..estimates.len() {
            max_gap = max_gap.max((estimates[i].mean - estimates[j].mean).abs());
        }
    }
    Ok(AnomalyReport {
        window,
        estimates,
        max_pairwise_gap: max_gap,
        paths: stats.count(),
        excluded: outcome.excluded,
    })
}

/// The decomposition `E[S^m] = E[S^0] + (n/2) E[ln ratio] + anomaly`,
/// assembled from the two limit-formula orders and the general anomaly
/// variant evaluated on identically seeded ensembles. The residual is a
/// floating-point-level consistency check of the three code paths.
#[derive(Clone, Debug)]
pub struct DeltaReport {
    pub finite_mass: LimitFormulaReport,
    pub overdamped: LimitFormulaReport,
    pub anomaly_general: AnomalyEstimate,
    pub residual: f64,
}

pub fn delta_e_s(
    spec: &SystemSpec,
    window: (f64, f64),
    n_paths: usize,
    steps: usize,
    seed: u64,
) -> Result<DeltaReport> {
    let finite_mass =
        limit_formula(spec, LimitOrder::FiniteMassLeading, window, n_paths, steps, seed)?;
    let overdamped = limit_formula(spec, LimitOrder::Overdamped, window, n_paths, steps, seed)?;
    let report = anomaly(spec, &[AnomalyVariant::General], window, n_paths, steps, seed)?;
    let anomaly_general = report.estimates[0].clone();
    let n = spec.dim() as f64;
    let residual = finite_mass.total
        - overdamped.total
        - 0.5 * n * finite_mass.raw_log_ratio.0
        - anomaly_general.mean;
    Ok(DeltaReport { finite_mass, overdamped, anomaly_general, residual })
}

// ---------------------------------------------------------------------------
// Expected log-ratio consistency
// ---------------------------------------------------------------------------

struct LogBetaObserver {
    window: StepWindow,
    ln_start: f64,
    ln_end: f64,
    rhs: f64,
    covered_start: bool,
    covered_end: bool,
}

impl OverdampedObserver for LogBetaObserver {
    fn output_dim(&self) -> usize {
        1
    }

    fn begin(&mut self, _spec: &SystemSpec, _state: &OverdampedState) -> Result<()> {
        Ok(())
    }

    fn on_step(
        &mut self,
        spec: &SystemSpec,
        before: &OverdampedState,
        after: &OverdampedState,
        _node: &DerivativeBundle,
        mid: Option<&DerivativeBundle>,
        _dw: &DVector<f64>,
    ) -> Result<()> {
        let (include, starts, ends) = self.window.classify(before.t, after.t);
        if !include {
            return Ok(());
        }
        if starts {
            self.ln_start = spec.beta(before.t, &before.q).value.ln();
            self.covered_start = true;
        }
        let b = mid.ok_or_else(|| {
            Error::Incompatible("log-beta observer needs midpoint bundles".into())
        })?;
        let dt = after.t - before.t;
        let n = b.dim();
        let mut contracted = 0.0;
        for i in 0..n {
            for j in 0..n {
                // d_i (beta^{-1} d_j beta), symmetric in (i, j); the companion
                // contraction against the antisymmetric part of gt^{-1} pairs
                // a symmetric with an antisymmetric matrix and vanishes.
                let dd = -b.grad_beta[i] * b.grad_beta[j] / (b.beta * b.beta)
                    + b.hess_beta[(i, j)] / b.beta;
                contracted += dd * b.gamma_tilde_inv[(j, i)];
            }
        }
        self.rhs += (b.dbeta_dt / b.beta
            + b.grad_beta.dot(&b.drift_ito()) / b.beta
            + contracted / b.beta)
            * dt;
        if ends {
            self.ln_end = spec.beta(after.t, &after.q).value.ln();
            self.covered_end = true;
        }
        Ok(())
    }

    fn finish(
        &mut self,
        _spec: &SystemSpec,
        _state: &OverdampedState,
        out: &mut Vec<f64>,
    ) -> Result<()> {
        if !(self.covered_start && self.covered_end) {
            return Err(Error::Incompatible(
                "log-beta window was not covered by the simulated horizon".into(),
            ));
        }
        out.push(self.ln_end - self.ln_start - self.rhs);
        Ok(())
    }
}

/// Per-path gap between the boundary value `ln beta(t) - ln beta(s)` and the
/// generator expansion of the same quantity integrated along the path. The
/// identity holds in expectation only (the martingale part has mean zero), so
/// the returned `(mean, stderr, excluded)` should satisfy |mean| <~ 3 stderr.
pub fn log_beta_consistency(
    spec: &SystemSpec,
    window: (f64, f64),
    n_paths: usize,
    steps: usize,
    seed: u64,
) -> Result<(f64, f64, usize)> {
    StepWindow::new(window)?;
    let outcome = simulate_overdamped_ensemble(
        spec,
        Convention::Ito,
        n_paths,
        window.1,
        steps,
        seed,
        DivergencePolicy::RecordAndContinue,
        &|| {
            vec![Box::new(LogBetaObserver {
                window: StepWindow::new(window).expect("validated above"),
                ln_start: 0.0,
                ln_end: 0.0,
                rhs: 0.0,
                covered_start: false,
                covered_end: false,
            })]
        },
    )?;
    Ok((outcome.stats.mean(0), outcome.stats.stderr(0), outcome.excluded))
}

// ---------------------------------------------------------------------------
// Homogenized velocity observables
// ---------------------------------------------------------------------------

/// Which limit law a velocity observable is paired with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HomogenizationTheorem {
    /// Even-rank source: `E[J^m]` converges to the Gaussian average of the
    /// source along overdamped paths.
    EvenMoments,
    /// Odd-rank source: `E[J^m]` vanishes at leading order and
    /// `m^{-1/2} E[J^m]` converges to the cell-solution pairing.
    OddLeading,
}

/// A time-window integral `J = int B(z, .., z) dr` of a constant multilinear
/// source in the scaled velocity, together with its limit law.
#[derive(Clone, Debug)]
pub struct HomogenizationObservable {
    source: MultilinearTensor,
    window: (f64, f64),
}

impl HomogenizationObservable {
    pub fn new(source: MultilinearTensor, window: (f64, f64)) -> Result<Self> {
        if source.rank() == 0 {
            return Err(Error::InvalidInput(
                "homogenization source must have rank at least 1".into(),
            ));
        }
        StepWindow::new(window)?;
        Ok(Self { source, window })
    }

    pub fn source(&self) -> &MultilinearTensor {
        &self.source
    }

    pub fn window(&self) -> (f64, f64) {
        self.window
    }

    /// The theorem matching the source's rank parity.
    pub fn natural_theorem(&self) -> HomogenizationTheorem {
        if self.source.rank() % 2 == 0 {
            HomogenizationTheorem::EvenMoments
        } else {
            HomogenizationTheorem::OddLeading
        }
    }

    fn check(&self, theorem: HomogenizationTheorem) -> Result<()> {
        if theorem != self.natural_theorem() {
            return Err(Error::InvalidInput(format!(
                "source rank {} pairs with {:?}, not {:?}",
                self.source.rank(),
                self.natural_theorem(),
                theorem
            )));
        }
        Ok(())
    }
}

struct PathwiseVelocityObserver {
    source: MultilinearTensor,
    scale_by_inv_sqrt_mass: bool,
    window: StepWindow,
    acc: f64,
}

impl UnderdampedObserver for PathwiseVelocityObserver {
    fn output_dim(&self) -> usize {
        1
    }

    fn needs_midpoint(&self) -> bool {
        false
    }

    fn begin(&mut self, _spec: &SystemSpec, _m: f64, _state: &UnderdampedState) -> Result<()> {
        Ok(())
    }

    fn on_step(
        &mut self,
        _spec: &SystemSpec,
        _m: f64,
        before: &UnderdampedState,
        after: &UnderdampedState,
        _mid: Option<&DerivativeBundle>,
    ) -> Result<()> {
        let (include, _, _) = self.window.classify(before.t, after.t);
        if !include {
            return Ok(());
        }
        let z_mid = (&before.z + &after.z) * 0.5;
        let args: Vec<&DVector<f64>> = vec![&z_mid; self.source.rank()];
        self.acc += self.source.eval(&args) * (after.t - before.t);
        Ok(())
    }

    fn finish(
        &mut self,
        _spec: &SystemSpec,
        m: f64,
        _state: &UnderdampedState,
        out: &mut Vec<f64>,
    ) -> Result<()> {
        out.push(if self.scale_by_inv_sqrt_mass { self.acc / m.sqrt() } else { self.acc });
        Ok(())
    }
}

struct EvenLimitObserver {
    source: MultilinearTensor,
    window: StepWindow,
    acc: f64,
    pending_right: Option<f64>,
}

impl OverdampedObserver for EvenLimitObserver {
    fn output_dim(&self) -> usize {
        1
    }

    fn needs_midpoint(&self) -> bool {
        false
    }

    fn begin(&mut self, _spec: &SystemSpec, _state: &OverdampedState) -> Result<()> {
        Ok(())
    }

    fn on_step(
        &mut self,
        _spec: &SystemSpec,
        before: &OverdampedState,
        after: &OverdampedState,
        node: &DerivativeBundle,
        _mid: Option<&DerivativeBundle>,
        _dw: &DVector<f64>,
    ) -> Result<()> {
        let (include, _, _) = self.window.classify(before.t, after.t);
        if self.pending_right.is_none() && !include {
            return Ok(());
        }
        let f = gaussian_average(node.beta, &self.source);
        if let Some(dt) = self.pending_right.take() {
            self.acc += 0.5 * dt * f;
        }
        if include {
            let dt = after.t - before.t;
            self.acc += 0.5 * dt * f;
            self.pending_right = Some(dt);
        }
        Ok(())
    }

    fn finish(
        &mut self,
        spec: &SystemSpec,
        state: &OverdampedState,
        out: &mut Vec<f64>,
    ) -> Result<()> {
        if let Some(dt) = self.pending_right.take() {
            let beta = spec.beta(state.t, &state.q).value;
            self.acc += 0.5 * dt * gaussian_average(beta, &self.source);
        }
        out.push(self.acc);
        Ok(())
    }
}

/// Gaussian expectation `E[A(z, .., z) z_comp]` under `N(0, beta^{-1} I)`.
fn moment_times_component(beta: f64, a: &MultilinearTensor, comp: usize) -> f64 {
    let n = a.dim();
    let k = a.rank();
    let mut idx = vec![0usize; k + 1];
    idx[k] = comp;
    let mut total = 0.0;
    for (flat, &c) in a.data().iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let mut f = flat;
        for s in (0..k).rev() {
            idx[s] = f % n;
            f /= n;
        }
        total += c * gaussian_moment(beta, &idx);
    }
    total
}

fn cell_solution_at(
    spec: &SystemSpec,
    t: f64,
    q: &DVector<f64>,
    source: &MultilinearTensor,
) -> Result<CellSolution> {
    let gamma = spec.gamma(q).value;
    let psi = spec.psi(t, q);
    let h_mat = &psi.jac - psi.jac.transpose();
    let gamma_tilde = &gamma - h_mat;
    solve_cell(spec.beta(t, q).value, &gamma_tilde, &gamma, source)
}

/// Integrand of the odd-rank limit at one path point:
/// `-F . E[grad_z chi] - sum_i E[d_{q^i} chi(z) z_i]`, with the q-derivative
/// of the cell solution taken by central differences of its coefficient
/// tensors and averaged under the Gaussian of the center point.
fn odd_limit_integrand(
    spec: &SystemSpec,
    b: &DerivativeBundle,
    source: &MultilinearTensor,
    fd_step: f64,
) -> Result<f64> {
    let chi = solve_cell(b.beta, &b.gamma_tilde, &b.gamma, source)?;
    let force_pairing = -b.force.dot(&chi.gaussian_average_grad());
    let mut transport = 0.0;
    for i in 0..b.dim() {
        let mut q_plus = b.q.clone();
        q_plus[i] += fd_step;
        let mut q_minus = b.q.clone();
        q_minus[i] -= fd_step;
        let chi_plus = cell_solution_at(spec, b.t, &q_plus, source)?;
        let chi_minus = cell_solution_at(spec, b.t, &q_minus, source)?;
        for (cp, cm) in chi_plus.coefficients().iter().zip(chi_minus.coefficients()) {
            let diff = cp.add(&cm.scaled(-1.0))?.scaled(0.5 / fd_step);
            transport += moment_times_component(b.beta, &diff, i);
        }
    }
    Ok(force_pairing - transport)
}

struct OddLimitObserver {
    source: MultilinearTensor,
    window: StepWindow,
    fd_step: f64,
    acc: f64,
    pending_right: Option<f64>,
}

impl OverdampedObserver for OddLimitObserver {
    fn output_dim(&self) -> usize {
        1
    }

    fn needs_midpoint(&self) -> bool {
        false
    }

    fn begin(&mut self, _spec: &SystemSpec, _state: &OverdampedState) -> Result<()> {
        Ok(())
    }

    fn on_step(
        &mut self,
        spec: &SystemSpec,
        before: &OverdampedState,
        after: &OverdampedState,
        node: &DerivativeBundle,
        _mid: Option<&DerivativeBundle>,
        _dw: &DVector<f64>,
    ) -> Result<()> {
        let (include, _, _) = self.window.classify(before.t, after.t);
        if self.pending_right.is_none() && !include {
            return Ok(());
        }
        let f = odd_limit_integrand(spec, node, &self.source, self.fd_step)?;
        if let Some(dt) = self.pending_right.take() {
            self.acc += 0.5 * dt * f;
        }
        if include {
            let dt = after.t - before.t;
            self.acc += 0.5 * dt * f;
            self.pending_right = Some(dt);
        }
        Ok(())
    }

    fn finish(
        &mut self,
        spec: &SystemSpec,
        state: &OverdampedState,
        out: &mut Vec<f64>,
    ) -> Result<()> {
        if let Some(dt) = self.pending_right.take() {
            let b = DerivativeBundle::evaluate(spec, state.t, &state.q)?;
            self.acc += 0.5 * dt * odd_limit_integrand(spec, &b, &self.source, self.fd_step)?;
        }
        out.push(self.acc);
        Ok(())
    }
}

const ODD_LIMIT_FD_STEP: f64 = 1e-4;

/// Monte Carlo of the pathwise observable over underdamped paths at mass `m`:
/// `E[J^m]` for even sources, `m^{-1/2} E[J^m]` for odd sources. Returns
/// `(mean, stderr, excluded)`.
pub fn homogenize_underdamped(
    spec: &SystemSpec,
    observable: &HomogenizationObservable,
    theorem: HomogenizationTheorem,
    m: f64,
    n_paths: usize,
    steps: usize,
    seed: u64,
    policy: DivergencePolicy,
) -> Result<(f64, f64, usize)> {
    observable.check(theorem)?;
    let source = observable.source.clone();
    let window = observable.window;
    let scale = theorem == HomogenizationTheorem::OddLeading;
    let outcome = simulate_underdamped_ensemble(
        spec,
        m,
        n_paths,
        window.1,
        steps,
        seed,
        policy,
        &|| {
            vec![Box::new(PathwiseVelocityObserver {
                source: source.clone(),
                scale_by_inv_sqrt_mass: scale,
                window: StepWindow::new(window).expect("validated at construction"),
                acc: 0.0,
            })]
        },
    )?;
    Ok((outcome.stats.mean(0), outcome.stats.stderr(0), outcome.excluded))
}

/// Monte Carlo of the limit law over overdamped paths: the Gaussian-average
/// integral for even sources, the cell-solution pairing for odd sources.
/// Returns `(mean, stderr, excluded)`.
pub fn homogenize_limit(
    spec: &SystemSpec,
    observable: &HomogenizationObservable,
    theorem: HomogenizationTheorem,
    n_paths: usize,
    steps: usize,
    seed: u64,
    policy: DivergencePolicy,
) -> Result<(f64, f64, usize)> {
    observable.check(theorem)?;
    let source = observable.source.clone();
    let window = observable.window;
    let outcome = match theorem {
        HomogenizationTheorem::EvenMoments => simulate_overdamped_ensemble(
            spec,
            Convention::Ito,
            n_paths,
            window.1,
            steps,
            seed,
            policy,
            &|| {
                vec![Box::new(EvenLimitObserver {
                    source: source.clone(),
                    window: StepWindow::new(window).expect("validated at construction"),
                    acc: 0.0,
                    pending_right: None,
                })]
            },
        )?,
        HomogenizationTheorem::OddLeading => simulate_overdamped_ensemble(
            spec,
            Convention::Ito,
            n_paths,
            window.1,
            steps,
            seed,
            policy,
            &|| {
                vec![Box::new(OddLimitObserver {
                    source: source.clone(),
                    window: StepWindow::new(window).expect("validated at construction"),
                    fd_step: ODD_LIMIT_FD_STEP,
                    acc: 0.0,
                    pending_right: None,
                })]
            },
        )?,
    };
    Ok((outcome.stats.mean(0), outcome.stats.stderr(0), outcome.excluded))
}

// ---------------------------------------------------------------------------
// Reduction identities
// ---------------------------------------------------------------------------

/// The triple-exponential integral tensor of `gamma_tilde` together with its
/// spatial derivatives, obtained analytically from
/// `d(M^{-1}) = -M^{-1} dM M^{-1}` on the flattened Kronecker-sum system.
fn g_with_gradient(
    gamma_tilde: &SquareMatrix,
    dgamma_tilde: &[SquareMatrix],
) -> Result<(MultilinearTensor, Vec<MultilinearTensor>)> {
    let n = gamma_tilde.nrows();
    let big = kron_sum(&[gamma_tilde, gamma_tilde, gamma_tilde]);
    let inv = big
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("Kronecker-sum system is singular".into()))?;
    let reshape = |m: &SquareMatrix| -> Result<MultilinearTensor> {
        let n3 = n * n * n;
        let mut data = Vec::with_capacity(n3 * n3);
        for row in 0..n3 {
            for col in 0..n3 {
                data.push(m[(row, col)]);
            }
        }
        MultilinearTensor::from_vec(n, 6, data)
    };
    let g = reshape(&inv)?;
    let mut grads = Vec::with_capacity(dgamma_tilde.len());
    for d in dgamma_tilde {
        let dbig = kron_sum(&[d, d, d]);
        let dinv = -(&inv) * dbig * &inv;
        grads.push(reshape(&dinv)?);
    }
    Ok((g, grads))
}

/// Kernel contraction `(delta_{j1 j2} delta_{j3}^i + 2 delta_{j2 j3} delta_{j1}^i)`
/// applied to `delta^{i1 i2} w^{i3} T`, returned as the vector over the free
/// index `i`.
fn double_delta_pair(t: &MultilinearTensor, w: &DVector<f64>) -> DVector<f64> {
    let n = t.dim();
    let id = SquareMatrix::identity(n, n);
    // Slots after the first contraction: (i3, j1, j2, j3).
    let v = t.contract_pair(0, 1, &id).contract_slot(0, w);
    let x1 = v.contract_pair(0, 1, &id).to_dvector();
    let x2 = v.contract_pair(1, 2, &id).to_dvector();
    x1 + x2 * 2.0
}

/// The matrix `C_{i3 l} = [gamma_{j1 j2} delta_{j3 l} + 2 gamma_{j1 j3} delta_{j2 l}] G^{..}`
/// contracted from `delta^{i1 i2} G`, used by the scalar reduction identity.
fn c_matrix(t: &MultilinearTensor, gamma: &SquareMatrix) -> SquareMatrix {
    let n = t.dim();
    let id = SquareMatrix::identity(n, n);
    let g_ii = t.contract_pair(0, 1, &id);
    let c1 = g_ii.contract_pair(1, 2, gamma);
    let c2 = g_ii.contract_pair(1, 3, gamma);
    tensor2_to_matrix(&c1) + tensor2_to_matrix(&c2) * 2.0
}

/// Raw form of the first-order (vector) reduction identity: the fully
/// contracted expression in the triple-exponential tensor.
pub fn y1_raw(b: &DerivativeBundle) -> Result<DVector<f64>> {
    let n = b.dim();
    let id = SquareMatrix::identity(n, n);
    let (g, _) = g_with_gradient(&b.gamma_tilde, &[])?;
    let phi = phi_vector(b);
    let term1 = b.gamma_tilde_inv.transpose() * &phi;
    // delta^{i1 i3} grad_beta^{i2} delta_{j1 j2} G -> vector over j3.
    let part_a = g
        .contract_pair(0, 2, &id)
        .contract_slot(0, &b.grad_beta)
        .contract_pair(0, 1, &id)
        .to_dvector();
    // delta^{i1 i2} grad_beta^{i3} delta_{j1 j2} G -> vector over j3, halved.
    let v_ii = g.contract_pair(0, 1, &id).contract_slot(0, &b.grad_beta);
    let part_b = v_ii.contract_pair(0, 1, &id).to_dvector() * 0.5;
    let term2 = (part_a + part_b) / b.beta;
    // delta^{i1 i2} grad_beta^{i3} G [gamma_{j1 j2} delta_{j3 k} + 2 gamma_{j2 j3} delta_{j1 k}] (gt^{-1})^{k l}.
    let c_part = v_ii.contract_pair(0, 1, &b.gamma).to_dvector();
    let d_part = v_ii.contract_pair(1, 2, &b.gamma).to_dvector() * 2.0;
    let term3 = b.gamma_tilde_inv.transpose() * (c_part + d_part) / b.beta;
    Ok(term1 + term2 + term3)
}

/// Simplified form of the vector reduction identity:
/// `gt^{-T} Phi + (n+2)/2 beta^{-1} gt^{-T} grad beta`.
pub fn y1_simplified(b: &DerivativeBundle) -> DVector<f64> {
    let n = b.dim() as f64;
    let phi = phi_vector(b);
    b.gamma_tilde_inv.transpose() * (phi + &b.grad_beta * ((n + 2.0) / (2.0 * b.beta)))
}

/// Divergence `sum_i d_i (Phi_j (gt^{-1})^{j i})`, shared by the scalar
/// reduction identity and the limit formula.
fn div_phi_gamma_tilde_inv(b: &DerivativeBundle) -> f64 {
    let phi = phi_vector(b);
    let phi_jac = phi_jacobian(b);
    div_phi_with(&phi, &phi_jac, &b.gamma_tilde_inv, &b.dgamma_tilde_inv)
}

/// Raw form of the second-order (scalar) reduction identity, using analytic
/// derivatives of the triple-exponential tensor.
pub fn y2_raw(b: &DerivativeBundle) -> Result<f64> {
    let n = b.dim();
    let (g, dg) = g_with_gradient(&b.gamma_tilde, &b.dgamma_tilde)?;
    let beta2 = b.beta * b.beta;

    // (1/2) beta^{-2} delta^{i1 i2} d_i[grad_beta^{i3} G] against the double
    // delta kernel with free index i.
    let mut term_a = 0.0;
    for i in 0..n {
        let hess_col = DVector::from_fn(n, |r, _| b.hess_beta[(i, r)]);
        term_a += double_delta_pair(&g, &hess_col)[i];
        term_a += double_delta_pair(&dg[i], &b.grad_beta)[i];
    }
    term_a *= 0.5 / beta2;

    // beta^{-1} sum_i d_i [ beta^{-1} (gt^{-T} C^T grad_beta)_i ] with
    // C from the gamma-weighted contractions of G.
    let c = c_matrix(&g, &b.gamma);
    let p = c.transpose() * &b.grad_beta;
    let gt_inv_t = b.gamma_tilde_inv.transpose();
    let s_vec = &gt_inv_t * &p;
    let mut term_b = 0.0;
    for i in 0..n {
        let dc = c_matrix(&dg[i], &b.gamma) + c_matrix(&g, &b.dgamma[i]);
        let dp = dc.transpose() * &b.grad_beta
            + c.transpose() * DVector::from_fn(n, |r, _| b.hess_beta[(i, r)]);
        let d_s_i = -b.grad_beta[i] / beta2 * s_vec[i]
            + (b.dgamma_tilde_inv[i].transpose() * &p)[i] / b.beta
            + (&gt_inv_t * dp)[i] / b.beta;
        term_b += d_s_i;
    }
    term_b /= b.beta;

    let term_c = div_phi_gamma_tilde_inv(b) / b.beta;
    Ok(term_a + term_b + term_c)
}

/// Simplified form of the scalar reduction identity.
pub fn y2_simplified(b: &DerivativeBundle) -> Result<f64> {
    let n = b.dim();
    let nf = n as f64;
    let beta2 = b.beta * b.beta;
    let mut part1 = 0.0;
    for i in 0..n {
        for j in 0..n {
            part1 += b.hess_beta[(i, j)] * b.gamma_tilde_inv[(j, i)]
                + b.grad_beta[j] * b.dgamma_tilde_inv[i][(j, i)];
        }
    }
    part1 *= (nf + 2.0) / (2.0 * beta2);
    let part2 = div_phi_gamma_tilde_inv(b) / b.beta;
    let (g, _) = g_with_gradient(&b.gamma_tilde, &[])?;
    let c = c_matrix(&g, &b.gamma);
    let part3 = -b.grad_beta.dot(&(c * (&b.gamma_tilde_inv * &b.grad_beta)))
        / (b.beta * beta2);
    Ok(part1 + part2 + part3)
}

/// Uniform-field reduction of the vector identity, requiring constant
/// `gamma_tilde` with isotropic gamma.
pub fn y1_uniform_field(b: &DerivativeBundle) -> Result<DVector<f64>> {
    let n = b.dim() as f64;
    let g_scalar = b.gamma[(0, 0)];
    let shifted = shifted_inverse(&b.gamma_tilde, &b.gamma)?;
    let phi = phi_vector(b);
    let shifted_t_grad = shifted.transpose() * &b.grad_beta;
    let term1 = b.gamma_tilde_inv.transpose() * &phi;
    let term2 = &shifted_t_grad * ((1.0 + n / 2.0) / b.beta);
    let term3 =
        b.gamma_tilde_inv.transpose() * &shifted_t_grad * ((n + 2.0) * g_scalar / b.beta);
    Ok(term1 + term2 + term3)
}

/// Uniform-field reduction of the scalar identity, requiring constant
/// `gamma_tilde` with isotropic gamma and a time-independent vector potential.
pub fn y2_uniform_field(b: &DerivativeBundle) -> Result<f64> {
    let n = b.dim();
    let nf = n as f64;
    let g_scalar = b.gamma[(0, 0)];
    let shifted = shifted_inverse(&b.gamma_tilde, &b.gamma)?;
    let beta2 = b.beta * b.beta;
    let mut part1 = 0.0;
    for l in 0..n {
        for k in 0..n {
            part1 += shifted[(l, k)] * b.hess_beta[(k, l)];
        }
    }
    part1 *= (nf + 2.0) / (2.0 * beta2);
    let mut part2 = 0.0;
    for l in 0..n {
        for k in 0..n {
            for i in 0..n {
                let dd = -b.grad_beta[i] * b.grad_beta[l] / beta2
                    + b.hess_beta[(i, l)] / b.beta;
                part2 += shifted[(l, k)] * b.gamma_tilde_inv[(k, i)] * dd;
            }
        }
    }
    part2 *= (nf + 2.0) * g_scalar / b.beta;
    let part3 = div_phi_gamma_tilde_inv(b) / b.beta;
    Ok(part1 + part2 + part3)
}

/// Max-norm gap between the raw and simplified vector identities at a point.
pub fn y1_gap(b: &DerivativeBundle) -> Result<f64> {
    Ok((y1_raw(b)? - y1_simplified(b)).amax())
}

/// Absolute gap between the raw and simplified scalar identities at a point.
pub fn y2_gap(b: &DerivativeBundle) -> Result<f64> {
    Ok((y2_raw(b)? - y2_simplified(b)?).abs())
}
