//! Time stepping and reproducible ensemble execution.
//!
//! The underdamped (finite-mass) integrator is a Lie-Trotter splitting whose
//! velocity substep solves the frozen-coefficient Ornstein-Uhlenbeck process
//! exactly (matrix-exponential mean, Lyapunov-equation covariance), so the
//! step size can track the fast relaxation scale `m / lambda_max(gamma)`
//! without losing stability. The overdamped integrators are Euler-Maruyama
//! (Ito) and Heun (Stratonovich) sharing one Gaussian increment per step.
//!
//! Determinism contract: each path draws from `RngStream(seed, path_index)`
//! and ensemble statistics are folded in path order after the parallel map,
//! so results are identical for any worker count.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrixfun::{kron_sum, mat_exp, MultilinearTensor, SquareMatrix};
use crate::system::bundle::DerivativeBundle;
use crate::system::{InitialCondition, ProbeGrid, SystemSpec};

/// Position/scaled-velocity state of the finite-mass dynamics. `z = u /
/// sqrt(m)` is the integrator's native variable.
#[derive(Clone, Debug)]
pub struct UnderdampedState {
    pub t: f64,
    pub q: DVector<f64>,
    pub z: DVector<f64>,
}

/// Position state of the limiting dynamics.
#[derive(Clone, Debug)]
pub struct OverdampedState {
    pub t: f64,
    pub q: DVector<f64>,
}

/// Stochastic convention of the overdamped stepper.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Convention {
    Ito,
    Stratonovich,
}

/// What to do when a path leaves the finite region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DivergencePolicy {
    /// Abort the ensemble with the offending path index.
    FailFast,
    /// Drop the path and count it.
    RecordAndContinue,
}

/// Per-path random stream: one master seed, one ChaCha stream per path.
/// Replaying a stream reproduces identical increments bit-exactly.
#[derive(Clone, Debug)]
pub struct RngStream {
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn for_path(seed: u64, path_index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path_index);
        Self { rng }
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn standard_normal_vector(&mut self, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| self.standard_normal())
    }
}

/// Running mean/variance over a fixed-width observable vector (Welford),
/// with an associative merge so per-path results can be combined in any
/// grouping without changing the outcome.
#[derive(Clone, Debug)]
pub struct PathEnsembleStats {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl PathEnsembleStats {
    pub fn new(dim: usize) -> Self {
        Self { count: 0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn push(&mut self, sample: &[f64]) {
        assert_eq!(sample.len(), self.mean.len(), "observable width changed");
        self.count += 1;
        let inv = 1.0 / self.count as f64;
        for (i, &x) in sample.iter().enumerate() {
            let delta = x - self.mean[i];
            self.mean[i] += delta * inv;
            self.m2[i] += delta * (x - self.mean[i]);
        }
    }

    pub fn merge(&mut self, other: &Self) {
        assert_eq!(self.dim(), other.dim(), "observable width changed");
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let total = self.count + other.count;
        let wa = self.count as f64;
        let wb = other.count as f64;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * wb / total as f64;
            self.m2[i] += other.m2[i] + delta * delta * wa * wb / total as f64;
        }
        self.count = total;
    }

    pub fn mean(&self, i: usize) -> f64 {
        self.mean[i]
    }

    /// Unbiased sample variance.
    pub fn variance(&self, i: usize) -> f64 {
        if self.count < 2 {
            return f64::NAN;
        }
        self.m2[i] / (self.count - 1) as f64
    }

    /// Standard error of the mean.
    pub fn stderr(&self, i: usize) -> f64 {
        (self.variance(i) / self.count as f64).sqrt()
    }
}

/// Streaming per-path observable over the underdamped dynamics. `on_step`
/// receives both endpoint states and optionally one shared derivative bundle
/// at the step midpoint `((t + t')/2, (q + q')/2)`. The underdamped stepper
/// itself runs on a reduced field evaluation, so there is no free node
/// bundle to share (unlike [`OverdampedObserver`]).
pub trait UnderdampedObserver {
    fn output_dim(&self) -> usize;
    /// Whether the runner should evaluate a midpoint [`DerivativeBundle`]
    /// for this observer. Observers doing node-based quadrature can opt out
    /// to save one field evaluation per step.
    fn needs_midpoint(&self) -> bool {
        true
    }
    fn begin(&mut self, spec: &SystemSpec, m: f64, state: &UnderdampedState) -> Result<()>;
    fn on_step(
        &mut self,
        spec: &SystemSpec,
        m: f64,
        before: &UnderdampedState,
        after: &UnderdampedState,
        mid: Option<&DerivativeBundle>,
    ) -> Result<()>;
    fn finish(
        &mut self,
        spec: &SystemSpec,
        m: f64,
        state: &UnderdampedState,
        out: &mut Vec<f64>,
    ) -> Result<()>;
}

/// Streaming per-path observable over the overdamped dynamics; `node` is the
/// stepper's pre-step bundle and `dw` is the Gaussian increment it consumed.
pub trait OverdampedObserver {
    fn output_dim(&self) -> usize;
    /// See [`UnderdampedObserver::needs_midpoint`].
    fn needs_midpoint(&self) -> bool {
        true
    }
    fn begin(&mut self, spec: &SystemSpec, state: &OverdampedState) -> Result<()>;
    fn on_step(
        &mut self,
        spec: &SystemSpec,
        before: &OverdampedState,
        after: &OverdampedState,
        node: &DerivativeBundle,
        mid: Option<&DerivativeBundle>,
        dw: &DVector<f64>,
    ) -> Result<()>;
    fn finish(&mut self, spec: &SystemSpec, state: &OverdampedState, out: &mut Vec<f64>)
        -> Result<()>;
}

/// Ensemble result: merged statistics plus the number of diverged paths
/// dropped under [`DivergencePolicy::RecordAndContinue`].
#[derive(Clone, Debug)]
pub struct EnsembleOutcome {
    pub stats: PathEnsembleStats,
    pub excluded: usize,
}

const DIVERGENCE_RADIUS: f64 = 1e6;

fn check_finite_vec(v: &DVector<f64>, t: f64) -> Result<()> {
    if v.iter().any(|x| !x.is_finite() || x.abs() > DIVERGENCE_RADIUS) {
        return Err(Error::Divergence { t, path: None });
    }
    Ok(())
}

/// Largest eigenvalue of gamma over the default probe box, used by the
/// step-size policy.
pub fn gamma_lambda_max(spec: &SystemSpec) -> f64 {
    let n = spec.dim();
    let probe = ProbeGrid::default_for(n);
    let mut lam = 0.0f64;
    for q in probe_points_for(&probe, n) {
        let eig = spec.gamma(&q).value.symmetric_eigenvalues();
        lam = lam.max(eig.max());
    }
    lam
}

fn probe_points_for(probe: &ProbeGrid, n: usize) -> Vec<DVector<f64>> {
    let per = probe.points_per_axis;
    let total = per.pow(n as u32);
    let mut out = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        let q = DVector::from_fn(n, |axis, _| {
            let i = rem % per;
            rem /= per;
            let frac = i as f64 / (per - 1) as f64;
            probe.box_min[axis] + frac * (probe.box_max[axis] - probe.box_min[axis])
        });
        out.push(q);
    }
    out
}

/// Uniform step count for the underdamped integrator: resolves the fast
/// scale as `dt ~ m / (c1 lambda_max(gamma))`, then rounds so the grid hits
/// `t_end` exactly.
pub fn underdamped_step_count(spec: &SystemSpec, m: f64, t_end: f64, c1: f64) -> usize {
    let lam = gamma_lambda_max(spec).max(1e-12);
    ((t_end * c1 * lam / m).ceil() as usize).max(1)
}

/// Exact-OU propagators for one step size, reusable along a path whenever
/// `gamma_tilde` is constant. The noise factor is computed at `beta = 1`
/// and rescaled by `beta^{-1/2}` at use sites (covariance is linear in
/// `beta^{-1}`).
#[derive(Clone, Debug)]
pub struct OuPropagators {
    pub e_half: SquareMatrix,
    pub e_full: SquareMatrix,
    pub noise_factor_unit: SquareMatrix,
}

/// Builds the frozen-coefficient OU propagators for step `dt` at mass `m`:
/// the half/full-step decay matrices `e^{-gt dt/(2m)}`, `e^{-gt dt/m}` and a
/// factor `L` with `L L^T = C`, where `gt C + C gt^T = Sigma_unit - E_f
/// Sigma_unit E_f^T` and `Sigma_unit = 2 gamma` (the `beta = 1` covariance).
pub fn ou_propagators(
    gamma_tilde: &SquareMatrix,
    gamma: &SquareMatrix,
    m: f64,
    dt: f64,
) -> Result<OuPropagators> {
    let n = gamma_tilde.nrows();
    let e_half = mat_exp(gamma_tilde, -0.5 * dt / m)?;
    let e_full = mat_exp(gamma_tilde, -dt / m)?;
    let sigma_unit = gamma * 2.0;
    let rhs = &sigma_unit - &e_full * &sigma_unit * e_full.transpose();
    // Flatten gt C + C gt^T with row-major vec: both terms apply gt from the
    // left of one index, so the operator is the two-fold Kronecker sum.
    let op = kron_sum(&[gamma_tilde, gamma_tilde]);
    let rhs_t = MultilinearTensor::from_fn(n, 2, |idx| rhs[(idx[0], idx[1])]);
    let sol = op
        .lu()
        .solve(&rhs_t.to_dvector())
        .ok_or_else(|| Error::Numerical("OU covariance solve is singular".into()))?;
    let c = DMatrix::from_fn(n, n, |i, j| sol[i * n + j]);
    let c = (&c + c.transpose()) * 0.5;
    Ok(OuPropagators { e_half, e_full, noise_factor_unit: psd_factor(&c)? })
}

/// Factor of a symmetric PSD matrix: Cholesky when possible, otherwise the
/// eigen square root with negative round-off clamped to zero.
fn psd_factor(c: &SquareMatrix) -> Result<SquareMatrix> {
    if let Some(chol) = nalgebra::Cholesky::new(c.clone()) {
        return Ok(chol.l());
    }
    let eig = nalgebra::SymmetricEigen::new(c.clone());
    let min = eig.eigenvalues.min();
    if min < -1e-10 * (1.0 + c.amax()) {
        return Err(Error::SpectralPrecondition(format!(
            "noise covariance has negative eigenvalue {min:.3e}"
        )));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

/// One Lie-Trotter step of the underdamped dynamics with an externally
/// supplied standard-normal vector (the deterministic core; used directly
/// by tests, wrapped by [`step_underdamped`]).
///
/// Velocity substep (coefficients frozen at the pre-step point):
/// `z' = E_h (E_h z + (F / sqrt(m)) dt) + beta^{-1/2} L w`; position substep:
/// `q' = q + z_mid dt / sqrt(m)` with `z_mid = (z + z')/2`.
pub fn step_underdamped_with_noise(
    spec: &SystemSpec,
    state: &UnderdampedState,
    m: f64,
    dt: f64,
    w: &DVector<f64>,
    cache: Option<&OuPropagators>,
) -> Result<UnderdampedState> {
    let bundle = DerivativeBundle::evaluate(spec, state.t, &state.q)?;
    step_underdamped_from_node(&bundle, state, m, dt, w, cache)
}

/// Same step with the pre-step bundle supplied by the caller, so one node
/// evaluation can be shared between the stepper and other consumers.
pub fn step_underdamped_from_node(
    bundle: &DerivativeBundle,
    state: &UnderdampedState,
    m: f64,
    dt: f64,
    w: &DVector<f64>,
    cache: Option<&OuPropagators>,
) -> Result<UnderdampedState> {
    let drag = Some((&bundle.gamma_tilde, &bundle.gamma));
    step_underdamped_core(bundle.beta, &bundle.force, drag, state, m, dt, w, cache)
}

/// The fields the underdamped stepper actually reads at the pre-step node.
/// Evaluating just these is several times cheaper than a full
/// [`DerivativeBundle`], which matters because the step count scales like
/// `1/m`. The drag pair `(gamma_tilde, gamma)` is only filled in when the
/// caller has no cached propagators and must rebuild them at the node.
struct StepFields {
    beta: f64,
    force: DVector<f64>,
    drag: Option<(SquareMatrix, SquareMatrix)>,
}

fn step_fields(spec: &SystemSpec, t: f64, q: &DVector<f64>, with_drag: bool) -> Result<StepFields> {
    let beta = spec.beta(t, q);
    if !(beta.value > 0.0) {
        return Err(Error::SpectralPrecondition(format!(
            "beta = {} must be positive at t={t}",
            beta.value
        )));
    }
    let psi = spec.psi(t, q);
    let force = -&psi.dt - spec.potential(t, q).grad + spec.f_ext(t, q).value;
    let drag = if with_drag {
        let n = spec.dim();
        let gamma = spec.gamma(q).value;
        let h = DMatrix::from_fn(n, n, |i, k| psi.jac[(i, k)] - psi.jac[(k, i)]);
        Some((&gamma - h, gamma))
    } else {
        None
    };
    Ok(StepFields { beta: beta.value, force, drag })
}

fn step_underdamped_core(
    beta: f64,
    force: &DVector<f64>,
    drag: Option<(&SquareMatrix, &SquareMatrix)>,
    state: &UnderdampedState,
    m: f64,
    dt: f64,
    w: &DVector<f64>,
    cache: Option<&OuPropagators>,
) -> Result<UnderdampedState> {
    let local;
    let props = match cache {
        Some(p) => p,
        None => {
            let (gamma_tilde, gamma) = drag.ok_or_else(|| {
                Error::InvalidInput(
                    "underdamped step without cached propagators needs drag matrices".into(),
                )
            })?;
            local = ou_propagators(gamma_tilde, gamma, m, dt)?;
            &local
        }
    };
    let beta_scale = beta.sqrt().recip();
    let kick = force * (dt / m.sqrt());
    let z_new = &props.e_half * (&props.e_half * &state.z + kick)
        + &props.noise_factor_unit * w * beta_scale;
    let z_mid = (&state.z + &z_new) * 0.5;
    let q_new = &state.q + z_mid * (dt / m.sqrt());
    let t_new = state.t + dt;
    check_finite_vec(&q_new, t_new)?;
    check_finite_vec(&z_new, t_new)?;
    Ok(UnderdampedState { t: t_new, q: q_new, z: z_new })
}

/// One step of the underdamped dynamics, drawing the Gaussian increment
/// from `rng`.
pub fn step_underdamped(
    spec: &SystemSpec,
    state: &UnderdampedState,
    m: f64,
    dt: f64,
    rng: &mut RngStream,
    cache: Option<&OuPropagators>,
) -> Result<UnderdampedState> {
    if !(dt > 0.0 && m > 0.0) {
        return Err(Error::InvalidInput("step_underdamped needs dt > 0 and m > 0".into()));
    }
    let w = rng.standard_normal_vector(spec.dim());
    step_underdamped_with_noise(spec, state, m, dt, &w, cache)
}

/// One step of the overdamped dynamics. Returns the new state together with
/// the Brownian increment `dW` consumed, which entropy ledgers reuse.
pub fn step_overdamped(
    spec: &SystemSpec,
    state: &OverdampedState,
    dt: f64,
    rng: &mut RngStream,
    convention: Convention,
) -> Result<(OverdampedState, DVector<f64>)> {
    if !(dt > 0.0) {
        return Err(Error::InvalidInput("step_overdamped needs dt > 0".into()));
    }
    let n = spec.dim();
    let dw = rng.standard_normal_vector(n) * dt.sqrt();
    let bundle = DerivativeBundle::evaluate(spec, state.t, &state.q)?;
    let next = step_overdamped_from_node(spec, &bundle, state, dt, &dw, convention)?;
    Ok((next, dw))
}

/// Same step with the pre-step bundle and the Gaussian increment supplied by
/// the caller; see [`step_underdamped_from_node`].
pub fn step_overdamped_from_node(
    spec: &SystemSpec,
    bundle: &DerivativeBundle,
    state: &OverdampedState,
    dt: f64,
    dw: &DVector<f64>,
    convention: Convention,
) -> Result<OverdampedState> {
    let t_new = state.t + dt;
    let q_new = match convention {
        Convention::Ito => {
            &state.q + bundle.drift_ito() * dt + bundle.effective_noise() * dw
        }
        Convention::Stratonovich => {
            let drift0 = bundle.drift_strat();
            let noise0 = bundle.effective_noise();
            let predictor = &state.q + &drift0 * dt + &noise0 * dw;
            check_finite_vec(&predictor, t_new)?;
            let bundle1 = DerivativeBundle::evaluate(spec, t_new, &predictor)?;
            &state.q
                + (drift0 + bundle1.drift_strat()) * (0.5 * dt)
                + (noise0 + bundle1.effective_noise()) * 0.5 * dw
        }
    };
    check_finite_vec(&q_new, t_new)?;
    Ok(OverdampedState { t: t_new, q: q_new })
}

fn draw_q0(spec: &SystemSpec, rng: &mut RngStream) -> DVector<f64> {
    match spec.q0() {
        InitialCondition::Point { position } => DVector::from_column_slice(position),
        InitialCondition::Gaussian { mean, stddev } => {
            let w = rng.standard_normal_vector(mean.len());
            DVector::from_column_slice(mean) + w * *stddev
        }
    }
}

fn draw_z0(spec: &SystemSpec, q0: &DVector<f64>, rng: &mut RngStream) -> DVector<f64> {
    let beta0 = spec.beta(0.0, q0).value;
    rng.standard_normal_vector(q0.len()) / beta0.sqrt()
}

/// Runs one underdamped path on the uniform grid `t_k = k dt`, feeding the
/// observers, and returns their concatenated outputs.
pub fn run_underdamped_path(
    spec: &SystemSpec,
    m: f64,
    t_end: f64,
    steps: usize,
    seed: u64,
    path_index: u64,
    cache: Option<&OuPropagators>,
    observers: &mut [Box<dyn UnderdampedObserver>],
) -> Result<Vec<f64>> {
    let dt = t_end / steps as f64;
    let mut rng = RngStream::for_path(seed, path_index);
    let q0 = draw_q0(spec, &mut rng);
    let z0 = draw_z0(spec, &q0, &mut rng);
    let mut state = UnderdampedState { t: 0.0, q: q0, z: z0 };
    for obs in observers.iter_mut() {
        obs.begin(spec, m, &state)?;
    }
    let want_mid = observers.iter().any(|o| o.needs_midpoint());
    for k in 0..steps {
        let fields = step_fields(spec, state.t, &state.q, cache.is_none())?;
        let drag = fields.drag.as_ref().map(|(gt, g)| (gt, g));
        let w = rng.standard_normal_vector(spec.dim());
        let mut next =
            step_underdamped_core(fields.beta, &fields.force, drag, &state, m, dt, &w, cache)?;
        if k + 1 == steps {
            next.t = t_end;
        }
        if !observers.is_empty() {
            let mid = if want_mid {
                let mid_t = 0.5 * (state.t + next.t);
                let mid_q = (&state.q + &next.q) * 0.5;
                Some(DerivativeBundle::evaluate(spec, mid_t, &mid_q)?)
            } else {
                None
            };
            for obs in observers.iter_mut() {
                obs.on_step(spec, m, &state, &next, mid.as_ref())?;
            }
        }
        state = next;
    }
    let mut out = Vec::new();
    for obs in observers.iter_mut() {
        obs.finish(spec, m, &state, &mut out)?;
    }
    Ok(out)
}

/// Runs one overdamped path; see [`run_underdamped_path`].
pub fn run_overdamped_path(
    spec: &SystemSpec,
    convention: Convention,
    t_end: f64,
    steps: usize,
    seed: u64,
    path_index: u64,
    observers: &mut [Box<dyn OverdampedObserver>],
) -> Result<Vec<f64>> {
    let dt = t_end / steps as f64;
    let mut rng = RngStream::for_path(seed, path_index);
    let q0 = draw_q0(spec, &mut rng);
    let mut state = OverdampedState { t: 0.0, q: q0 };
    for obs in observers.iter_mut() {
        obs.begin(spec, &state)?;
    }
    let want_mid = observers.iter().any(|o| o.needs_midpoint());
    for k in 0..steps {
        let node = DerivativeBundle::evaluate(spec, state.t, &state.q)?;
        let dw = rng.standard_normal_vector(spec.dim()) * dt.sqrt();
        let mut next = step_overdamped_from_node(spec, &node, &state, dt, &dw, convention)?;
        if k + 1 == steps {
            next.t = t_end;
        }
        if !observers.is_empty() {
            let mid = if want_mid {
                let mid_t = 0.5 * (state.t + next.t);
                let mid_q = (&state.q + &next.q) * 0.5;
                Some(DerivativeBundle::evaluate(spec, mid_t, &mid_q)?)
            } else {
                None
            };
            for obs in observers.iter_mut() {
                obs.on_step(spec, &state, &next, &node, mid.as_ref(), &dw)?;
            }
        }
        state = next;
    }
    let mut out = Vec::new();
    for obs in observers.iter_mut() {
        obs.finish(spec, &state, &mut out)?;
    }
    Ok(out)
}

fn fold_results(
    results: Vec<std::result::Result<Vec<f64>, Error>>,
    policy: DivergencePolicy,
) -> Result<EnsembleOutcome> {
    let mut stats: Option<PathEnsembleStats> = None;
    let mut excluded = 0usize;
    for (path, res) in results.into_iter().enumerate() {
        match res {
            Ok(sample) => {
                let stats = stats.get_or_insert_with(|| PathEnsembleStats::new(sample.len()));
                stats.push(&sample);
            }
            Err(Error::Divergence { t, .. }) => match policy {
                DivergencePolicy::FailFast => {
                    return Err(Error::Divergence { t, path: Some(path) })
                }
                DivergencePolicy::RecordAndContinue => excluded += 1,
            },
            Err(e) => return Err(e),
        }
    }
    let stats = stats.ok_or_else(|| {
        Error::Numerical("every path diverged; no statistics available".into())
    })?;
    Ok(EnsembleOutcome { stats, excluded })
}

/// Runs `n_paths` independent underdamped paths (parallel, deterministic
/// for fixed seed regardless of worker count) and merges the observer
/// outputs in path order.
pub fn simulate_underdamped_ensemble(
    spec: &SystemSpec,
    m: f64,
    n_paths: usize,
    t_end: f64,
    steps: usize,
    seed: u64,
    policy: DivergencePolicy,
    make_observers: &(dyn Fn() -> Vec<Box<dyn UnderdampedObserver>> + Sync),
) -> Result<EnsembleOutcome> {
    if n_paths == 0 {
        return Err(Error::InvalidInput("n_paths must be at least 1".into()));
    }
    let dt = t_end / steps as f64;
    let cache = if spec.gamma_tilde_is_constant() {
        let origin = DVector::zeros(spec.dim());
        let b = DerivativeBundle::evaluate(spec, 0.0, &origin)?;
        Some(ou_propagators(&b.gamma_tilde, &b.gamma, m, dt)?)
    } else {
        None
    };
    let results: Vec<std::result::Result<Vec<f64>, Error>> = (0..n_paths)
        .into_par_iter()
        .map(|path| {
            let mut observers = make_observers();
            run_underdamped_path(
                spec,
                m,
                t_end,
                steps,
                seed,
                path as u64,
                cache.as_ref(),
                &mut observers,
            )
        })
        .collect();
    fold_results(results, policy)
}

/// Overdamped counterpart of [`simulate_underdamped_ensemble`].
pub fn simulate_overdamped_ensemble(
    spec: &SystemSpec,
    convention: Convention,
    n_paths: usize,
    t_end: f64,
    steps: usize,
    seed: u64,
    policy: DivergencePolicy,
    make_observers: &(dyn Fn() -> Vec<Box<dyn OverdampedObserver>> + Sync),
) -> Result<EnsembleOutcome> {
    if n_paths == 0 {
        return Err(Error::InvalidInput("n_paths must be at least 1".into()));
    }
    let results: Vec<std::result::Result<Vec<f64>, Error>> = (0..n_paths)
        .into_par_iter()
        .map(|path| {
            let mut observers = make_observers();
            run_overdamped_path(spec, convention, t_end, steps, seed, path as u64, &mut observers)
        })
        .collect();
    fold_results(results, policy)
}
