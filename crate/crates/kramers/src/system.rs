//! System definition: the fields beta, gamma, psi, V, F_ext assembled from
//! closed-form families, strict JSON configuration, the derived noise
//! amplitude sigma, time reversal, and sampled validation of the structural
//! assumptions the formulas rely on.

pub mod bundle;
pub mod fields;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrixfun::{spd_sqrt, SquareMatrix};
use fields::{MatrixEval, MatrixFieldSpec, ScalarEval, ScalarFieldSpec, VectorEval, VectorFieldSpec};

/// Initial spatial distribution for path ensembles. Velocities are always
/// drawn from the local Gibbs marginal at `t = 0`.
#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialCondition {
    /// Point mass at `position`.
    Point { position: Vec<f64> },
    /// Isotropic Gaussian around `mean` with standard deviation `stddev`.
    Gaussian { mean: Vec<f64>, stddev: f64 },
}

impl InitialCondition {
    pub fn origin(n: usize) -> Self {
        Self::Point { position: vec![0.0; n] }
    }

    fn validate(&self, n: usize) -> Result<()> {
        match self {
            Self::Point { position } => {
                if position.len() != n {
                    return Err(Error::Config(format!(
                        "q0 position has {} entries, dimension is {n}",
                        position.len()
                    )));
                }
            }
            Self::Gaussian { mean, stddev } => {
                if mean.len() != n {
                    return Err(Error::Config(format!(
                        "q0 mean has {} entries, dimension is {n}",
                        mean.len()
                    )));
                }
                if *stddev <= 0.0 {
                    return Err(Error::Config("q0 stddev must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

/// On-disk system description. Strict: unknown keys are rejected.
#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub dimension: usize,
    pub horizon: f64,
    pub beta: ScalarFieldSpec,
    pub gamma: MatrixFieldSpec,
    pub psi: VectorFieldSpec,
    #[serde(rename = "V")]
    pub potential: ScalarFieldSpec,
    #[serde(rename = "F_ext")]
    pub f_ext: VectorFieldSpec,
    #[serde(rename = "uniform_B0", default, skip_serializing_if = "Option::is_none")]
    pub uniform_b0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q0: Option<InitialCondition>,
}

/// Which time-reversal involution [`reverse_system`] applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Involution {
    /// Reflect time and flip the sign of the vector potential.
    Standard,
    /// Reflect time only; valid for uniform magnetic field systems.
    UniformB,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum TimeFrame {
    Forward,
    Reflected { horizon: f64 },
}

/// Immutable, fully validated system. All field evaluations route through
/// this type so that time reversal is applied consistently.
#[derive(Clone, Debug)]
pub struct SystemSpec {
    n: usize,
    horizon: f64,
    beta: ScalarFieldSpec,
    gamma: MatrixFieldSpec,
    psi: VectorFieldSpec,
    potential: ScalarFieldSpec,
    f_ext: VectorFieldSpec,
    uniform_b0: Option<f64>,
    q0: InitialCondition,
    frame: TimeFrame,
    psi_sign: f64,
}

impl SystemSpec {
    pub fn from_config(config: SystemConfig) -> Result<Self> {
        let n = config.dimension;
        if n == 0 || n > 8 {
            return Err(Error::Config(format!("dimension must be in 1..=8, got {n}")));
        }
        if !(config.horizon > 0.0 && config.horizon.is_finite()) {
            return Err(Error::Config("horizon must be positive and finite".into()));
        }
        config.beta.validate(n)?;
        config.gamma.validate(n)?;
        config.psi.validate(n)?;
        config.potential.validate(n)?;
        config.f_ext.validate(n)?;
        let q0 = match config.q0 {
            Some(ic) => {
                ic.validate(n)?;
                ic
            }
            None => InitialCondition::origin(n),
        };
        if let Some(b0) = config.uniform_b0 {
            if n != 3 {
                return Err(Error::Config("uniform_B0 systems must have dimension 3".into()));
            }
            match &config.psi {
                VectorFieldSpec::UniformB { b0: psi_b0 } if (psi_b0 - b0).abs() <= 1e-12 => {}
                _ => {
                    return Err(Error::Config(
                        "uniform_B0 requires psi of family uniform_b with matching b0".into(),
                    ))
                }
            }
            if !matches!(config.gamma, MatrixFieldSpec::ConstantScalar { .. }) {
                return Err(Error::Config(
                    "uniform_B0 requires a constant scalar gamma".into(),
                ));
            }
        }
        Ok(Self {
            n,
            horizon: config.horizon,
            beta: config.beta,
            gamma: config.gamma,
            psi: config.psi,
            potential: config.potential,
            f_ext: config.f_ext,
            uniform_b0: config.uniform_b0,
            q0,
            frame: TimeFrame::Forward,
            psi_sign: 1.0,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let config: SystemConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        Self::from_config(config)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn uniform_b0(&self) -> Option<f64> {
        self.uniform_b0
    }

    pub fn q0(&self) -> &InitialCondition {
        &self.q0
    }

    pub fn is_reversed(&self) -> bool {
        matches!(self.frame, TimeFrame::Reflected { .. })
    }

    /// `true` when the vector potential vanishes identically, so
    /// `gamma_tilde == gamma` everywhere.
    pub fn psi_is_zero(&self) -> bool {
        self.psi.is_zero()
    }

    /// `true` when gamma is a scalar multiple of the identity at every q.
    pub fn gamma_is_isotropic(&self) -> bool {
        self.gamma.is_isotropic()
    }

    /// `true` when gamma and the psi Jacobian have no (t, q) dependence, so
    /// `gamma_tilde` is one fixed matrix along every path.
    pub fn gamma_tilde_is_constant(&self) -> bool {
        self.gamma.is_constant()
            && matches!(
                self.psi,
                VectorFieldSpec::Zero
                    | VectorFieldSpec::Constant { .. }
                    | VectorFieldSpec::UniformB { .. }
                    | VectorFieldSpec::Solenoid { .. }
            )
    }

    fn map_time(&self, t: f64) -> (f64, f64) {
        match self.frame {
            TimeFrame::Forward => (t, 1.0),
            TimeFrame::Reflected { horizon } => (horizon - t, -1.0),
        }
    }

    pub fn beta(&self, t: f64, q: &DVector<f64>) -> ScalarEval {
        let (tau, dtau) = self.map_time(t);
        let mut e = self.beta.eval(tau, q);
        e.dt *= dtau;
        e
    }

    pub fn potential(&self, t: f64, q: &DVector<f64>) -> ScalarEval {
        let (tau, dtau) = self.map_time(t);
        let mut e = self.potential.eval(tau, q);
        e.dt *= dtau;
        e
    }

    pub fn psi(&self, t: f64, q: &DVector<f64>) -> VectorEval {
        let (tau, dtau) = self.map_time(t);
        let mut e = self.psi.eval(tau, q);
        e.dt *= dtau * self.psi_sign;
        e.dt_jac *= dtau * self.psi_sign;
        e.value *= self.psi_sign;
        e.jac *= self.psi_sign;
        for h in &mut e.hess {
            *h *= self.psi_sign;
        }
        e
    }

    pub fn f_ext(&self, t: f64, q: &DVector<f64>) -> VectorEval {
        let (tau, dtau) = self.map_time(t);
        let mut e = self.f_ext.eval(tau, q);
        e.dt *= dtau;
        e.dt_jac *= dtau;
        e
    }

    pub fn gamma(&self, q: &DVector<f64>) -> MatrixEval {
        self.gamma.eval(q)
    }
}

/// The unique symmetric-PD square root of `Sigma = 2 beta^{-1} gamma` at
/// `(t, q)`: the noise amplitude consistent with fluctuation-dissipation.
pub fn derive_sigma(spec: &SystemSpec, t: f64, q: &DVector<f64>) -> Result<SquareMatrix> {
    let beta = spec.beta(t, q).value;
    if beta <= 0.0 {
        return Err(Error::SpectralPrecondition(format!("beta = {beta} must be positive")));
    }
    let gamma = spec.gamma(q).value;
    spd_sqrt(&(gamma * (2.0 / beta)))
}

/// Returns the system driving the time-reversed dynamics on `[0, T]`:
/// every field is evaluated at `T - t`, and the standard involution
/// additionally flips the sign of psi. The uniform-field involution keeps
/// psi and requires the uniform-B structure.
///
/// Reversing an already-reversed system with the same `T` restores the
/// original; nesting with a different `T` is not representable and errors.
pub fn reverse_system(spec: &SystemSpec, t_horizon: f64, involution: Involution) -> Result<SystemSpec> {
    if involution == Involution::UniformB && spec.uniform_b0.is_none() {
        return Err(Error::InvalidInput(
            "uniform-field involution requires a uniform_B0 system".into(),
        ));
    }
    let frame = match spec.frame {
        TimeFrame::Forward => TimeFrame::Reflected { horizon: t_horizon },
        TimeFrame::Reflected { horizon } => {
            if (horizon - t_horizon).abs() > 1e-12 {
                return Err(Error::InvalidInput(
                    "nested reversal with a different horizon is not supported".into(),
                ));
            }
            TimeFrame::Forward
        }
    };
    let psi_sign = match involution {
        Involution::Standard => -spec.psi_sign,
        Involution::UniformB => spec.psi_sign,
    };
    Ok(SystemSpec { frame, psi_sign, ..spec.clone() })
}

/// Uniform sampling grid for [`validate_assumptions`].
#[derive(Clone, Debug)]
pub struct ProbeGrid {
    pub box_min: Vec<f64>,
    pub box_max: Vec<f64>,
    pub points_per_axis: usize,
    pub time_samples: usize,
}

impl ProbeGrid {
    /// Roughly 1000 spatial points over `[-2, 2]^n`, 10 times in `[0, T]`.
    pub fn default_for(n: usize) -> Self {
        let per_axis = (1000f64.powf(1.0 / n as f64)).round() as usize;
        Self {
            box_min: vec![-2.0; n],
            box_max: vec![2.0; n],
            points_per_axis: per_axis.max(2),
            time_samples: 10,
        }
    }

    fn points(&self, n: usize) -> Vec<DVector<f64>> {
        let total = self.points_per_axis.pow(n as u32);
        let mut out = Vec::with_capacity(total);
        for flat in 0..total {
            let mut rem = flat;
            let q = DVector::from_fn(n, |axis, _| {
                let i = rem % self.points_per_axis;
                rem /= self.points_per_axis;
                let frac = i as f64 / (self.points_per_axis - 1) as f64;
                self.box_min[axis] + frac * (self.box_max[axis] - self.box_min[axis])
            });
            out.push(q);
        }
        out
    }
}

/// Sampled boundedness/symmetry report. `pass()` is false whenever any
/// structural assumption fails on the grid; the numeric ranges are always
/// filled in so a caller can inspect margins.
#[derive(Clone, Debug)]
pub struct AssumptionReport {
    pub beta_min: f64,
    pub beta_max: f64,
    pub gamma_eig_min: f64,
    pub gamma_eig_max: f64,
    pub grad_v_max: f64,
    pub psi_jac_max: f64,
    pub violations: Vec<String>,
}

impl AssumptionReport {
    pub fn pass(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Samples the probe grid and reports ranges of beta and the gamma spectrum,
/// derivative magnitudes, and (for uniform-field systems) the parity
/// constraints on V, beta and F_ext in the first coordinate.
pub fn validate_assumptions(spec: &SystemSpec, probe: &ProbeGrid) -> AssumptionReport {
    let n = spec.dim();
    let mut report = AssumptionReport {
        beta_min: f64::INFINITY,
        beta_max: f64::NEG_INFINITY,
        gamma_eig_min: f64::INFINITY,
        gamma_eig_max: f64::NEG_INFINITY,
        grad_v_max: 0.0,
        psi_jac_max: 0.0,
        violations: Vec::new(),
    };
    let times: Vec<f64> = (0..probe.time_samples)
        .map(|i| spec.horizon() * i as f64 / (probe.time_samples - 1).max(1) as f64)
        .collect();
    let points = probe.points(n);
    let parity_tol = 1e-9;
    let mut parity_beta = 0.0f64;
    let mut parity_v = 0.0f64;
    let mut parity_f = 0.0f64;
    for &t in &times {
        for q in &points {
            let beta = spec.beta(t, q);
            let v = spec.potential(t, q);
            let psi = spec.psi(t, q);
            let gamma = spec.gamma(q);
            if !beta.value.is_finite() || !v.value.is_finite() {
                report.violations.push(format!("non-finite field value at t={t}, q={q:?}"));
                continue;
            }
            report.beta_min = report.beta_min.min(beta.value);
            report.beta_max = report.beta_max.max(beta.value);
            let eig = gamma.value.clone().symmetric_eigenvalues();
            report.gamma_eig_min = report.gamma_eig_min.min(eig.min());
            report.gamma_eig_max = report.gamma_eig_max.max(eig.max());
            report.grad_v_max = report.grad_v_max.max(v.grad.amax());
            report.psi_jac_max = report.psi_jac_max.max(psi.jac.amax().max(psi.dt.amax()));
            if spec.uniform_b0.is_some() && n >= 1 {
                let mut qf = q.clone();
                qf[0] = -qf[0];
                let beta_f = spec.beta(t, &qf);
                let v_f = spec.potential(t, &qf);
                let fe = spec.f_ext(t, q);
                let fe_f = spec.f_ext(t, &qf);
                parity_beta = parity_beta.max((beta.value - beta_f.value).abs());
                parity_v = parity_v.max((v.value - v_f.value).abs());
                // F_1 odd, remaining components even in q^1.
                parity_f = parity_f.max((fe.value[0] + fe_f.value[0]).abs());
                for c in 1..n {
                    parity_f = parity_f.max((fe.value[c] - fe_f.value[c]).abs());
                }
            }
        }
    }
    if report.beta_min <= 0.0 {
        report.violations.push(format!(
            "beta is not bounded below by a positive constant on the grid (min {})",
            report.beta_min
        ));
    }
    if report.gamma_eig_min <= 0.0 {
        report.violations.push(format!(
            "gamma is not positive definite on the grid (min eigenvalue {})",
            report.gamma_eig_min
        ));
    }
    if spec.uniform_b0.is_some() {
        if parity_beta > parity_tol {
            report.violations.push(format!(
                "sigma (via beta) is not even in q^1 (max deviation {parity_beta:.3e})"
            ));
        }
        if parity_v > parity_tol {
            report
                .violations
                .push(format!("V is not even in q^1 (max deviation {parity_v:.3e})"));
        }
        if parity_f > parity_tol {
            report.violations.push(format!(
                "F_ext parity constraint violated in q^1 (max deviation {parity_f:.3e})"
            ));
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn basic_config_json() -> String {
        r#"{
            "dimension": 2,
            "horizon": 2.0,
            "beta": {"family": "tanh", "params": {"base": 2.0, "amp": 1.0, "rate": 1.0, "axis": 0, "offset": 0.0}},
            "gamma": {"family": "constant_scalar", "params": {"value": 1.0}},
            "psi": {"family": "zero"},
            "V": {"family": "harmonic", "params": {"k": 1.0}},
            "F_ext": {"family": "zero"}
        }"#
        .to_string()
    }

    #[test]
    fn config_parses_and_builds() {
        let spec = SystemSpec::from_json_str(&basic_config_json()).unwrap();
        assert_eq!(spec.dim(), 2);
        assert_eq!(spec.horizon(), 2.0);
        assert_eq!(*spec.q0(), InitialCondition::origin(2));
    }

    #[test]
    fn unknown_top_level_key_is_rejected() {
        let text = basic_config_json().replace("\"dimension\"", "\"extra\": 1, \"dimension\"");
        match SystemSpec::from_json_str(&text) {
            Err(Error::Config(_)) => {}
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn missing_key_is_rejected() {
        let text = r#"{"dimension": 1, "horizon": 1.0}"#;
        assert!(matches!(SystemSpec::from_json_str(text), Err(Error::Config(_))));
    }

    #[test]
    fn uniform_b0_structural_mismatch_is_rejected() {
        let text = r#"{
            "dimension": 3,
            "horizon": 2.0,
            "beta": {"family": "constant", "params": {"value": 1.0}},
            "gamma": {"family": "constant_scalar", "params": {"value": 1.0}},
            "psi": {"family": "zero"},
            "V": {"family": "harmonic", "params": {"k": 1.0}},
            "F_ext": {"family": "zero"},
            "uniform_B0": 1.5
        }"#;
        assert!(matches!(SystemSpec::from_json_str(text), Err(Error::Config(_))));
    }

    #[test]
    fn derive_sigma_identity_case() {
        let text = r#"{
            "dimension": 2,
            "horizon": 1.0,
            "beta": {"family": "constant", "params": {"value": 2.0}},
            "gamma": {"family": "constant_scalar", "params": {"value": 1.0}},
            "psi": {"family": "zero"},
            "V": {"family": "harmonic", "params": {"k": 1.0}},
            "F_ext": {"family": "zero"}
        }"#;
        let spec = SystemSpec::from_json_str(text).unwrap();
        let q = DVector::zeros(2);
        let sigma = derive_sigma(&spec, 0.0, &q).unwrap();
        assert_abs_diff_eq!(sigma, DMatrix::identity(2, 2), epsilon = 1e-13);
    }

    #[test]
    fn derive_sigma_diagonal_case() {
        let text = r#"{
            "dimension": 2,
            "horizon": 1.0,
            "beta": {"family": "constant", "params": {"value": 0.5}},
            "gamma": {"family": "constant_matrix", "params": {"entries": [[1.0, 0.0], [0.0, 4.0]]}},
            "psi": {"family": "zero"},
            "V": {"family": "harmonic", "params": {"k": 1.0}},
            "F_ext": {"family": "zero"}
        }"#;
        let spec = SystemSpec::from_json_str(text).unwrap();
        let sigma = derive_sigma(&spec, 0.0, &DVector::zeros(2)).unwrap();
        let want = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 4.0]));
        assert_abs_diff_eq!(sigma, want, epsilon = 1e-13);
    }

    #[test]
    fn derive_sigma_multiplies_back_to_fluctuation_dissipation() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let text = r#"{
            "dimension": 2,
            "horizon": 2.0,
            "beta": {"family": "tanh_gauss", "params": {"base": 2.0, "amp": 1.0, "rate": 1.0, "axis": 0, "width": 0.3}},
            "gamma": {"family": "rotating", "params": {"lam": [0.5, 2.0], "rate": 0.8}},
            "psi": {"family": "swirl", "params": {"amp": 0.5, "width": 1.0}},
            "V": {"family": "quartic", "params": {"a": 1.0, "b": 0.2}},
            "F_ext": {"family": "gauss_axis", "params": {"amp": 0.4, "axis": 1, "width": 1.0}}
        }"#;
        let spec = SystemSpec::from_json_str(text).unwrap();
        for _ in 0..50 {
            let t = rng.random_range(0.0..2.0);
            let q = DVector::from_fn(2, |_, _| rng.random_range(-1.5..1.5));
            let sigma = derive_sigma(&spec, t, &q).unwrap();
            let beta = spec.beta(t, &q).value;
            let gamma = spec.gamma(&q).value;
            let resid = (&sigma * sigma.transpose() - gamma * (2.0 / beta)).amax();
            assert!(resid <= 1e-12, "sigma sigma^T mismatch {resid:.3e}");
        }
    }

    fn time_dependent_config() -> SystemSpec {
        let text = r#"{
            "dimension": 2,
            "horizon": 2.0,
            "beta": {"family": "ramp", "params": {"rate": 0.25, "inner": {"family": "tanh", "params": {"base": 2.0, "amp": 1.0, "rate": 1.0, "axis": 0, "offset": 0.0}}}},
            "gamma": {"family": "constant_scalar", "params": {"value": 1.3}},
            "psi": {"family": "osc", "params": {"amp": 0.3, "omega": 1.5, "inner": {"family": "swirl", "params": {"amp": 0.6, "width": 1.0}}}},
            "V": {"family": "ramp", "params": {"rate": 0.1, "inner": {"family": "harmonic", "params": {"k": 1.0}}}},
            "F_ext": {"family": "linear_axis", "params": {"amp": 0.4, "axis": 0}}
        }"#;
        SystemSpec::from_json_str(text).unwrap()
    }

    #[test]
    fn standard_reversal_reflects_time_and_flips_psi() {
        let spec = time_dependent_config();
        let t_horizon = 2.0;
        let rev = reverse_system(&spec, t_horizon, Involution::Standard).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..30 {
            let t = rng.random_range(0.0..t_horizon);
            let q = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let b_fwd = spec.beta(t_horizon - t, &q);
            let b_rev = rev.beta(t, &q);
            assert_abs_diff_eq!(b_rev.value, b_fwd.value, epsilon = 1e-14);
            assert_abs_diff_eq!(b_rev.dt, -b_fwd.dt, epsilon = 1e-14);
            let p_fwd = spec.psi(t_horizon - t, &q);
            let p_rev = rev.psi(t, &q);
            assert!((&p_rev.value + &p_fwd.value).amax() <= 1e-14);
            assert!((&p_rev.jac + &p_fwd.jac).amax() <= 1e-14);
            // chain rule and sign flip together: d_t psi_rev = +d_t psi_fwd(T-t)
            assert!((&p_rev.dt - &p_fwd.dt).amax() <= 1e-14);
        }
    }

    #[test]
    fn reversal_is_an_involution() {
        let spec = time_dependent_config();
        let back = reverse_system(
            &reverse_system(&spec, 2.0, Involution::Standard).unwrap(),
            2.0,
            Involution::Standard,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..30 {
            let t = rng.random_range(0.0..2.0);
            let q = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            assert_abs_diff_eq!(spec.beta(t, &q).value, back.beta(t, &q).value, epsilon = 1e-14);
            assert!((spec.psi(t, &q).value - back.psi(t, &q).value).amax() <= 1e-14);
            assert_abs_diff_eq!(spec.psi(t, &q).dt[0], back.psi(t, &q).dt[0], epsilon = 1e-14);
        }
    }

    #[test]
    fn time_independent_psi_free_spec_is_reversal_invariant() {
        let spec = SystemSpec::from_json_str(&basic_config_json()).unwrap();
        let rev = reverse_system(&spec, 2.0, Involution::Standard).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..20 {
            let t = rng.random_range(0.0..2.0);
            let q = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            assert_abs_diff_eq!(spec.beta(t, &q).value, rev.beta(t, &q).value, epsilon = 1e-14);
            assert_abs_diff_eq!(
                spec.potential(t, &q).value,
                rev.potential(t, &q).value,
                epsilon = 1e-14
            );
            assert!((spec.psi(t, &q).value - rev.psi(t, &q).value).amax() <= 1e-14);
        }
    }

    #[test]
    fn uniform_b_reversal_keeps_psi() {
        let text = r#"{
            "dimension": 3,
            "horizon": 2.0,
            "beta": {"family": "constant", "params": {"value": 2.0}},
            "gamma": {"family": "constant_scalar", "params": {"value": 1.0}},
            "psi": {"family": "uniform_b", "params": {"b0": 1.5}},
            "V": {"family": "harmonic", "params": {"k": 1.0}},
            "F_ext": {"family": "zero"},
            "uniform_B0": 1.5
        }"#;
        let spec = SystemSpec::from_json_str(text).unwrap();
        let rev = reverse_system(&spec, 2.0, Involution::UniformB).unwrap();
        let q = DVector::from_vec(vec![0.4, -0.9, 0.2]);
        assert!((spec.psi(0.3, &q).value - rev.psi(0.3, &q).value).amax() <= 1e-15);

        // The standard spec has no uniform_B0, so the uniform involution is
        // rejected there.
        let plain = SystemSpec::from_json_str(&basic_config_json()).unwrap();
        assert!(reverse_system(&plain, 2.0, Involution::UniformB).is_err());
    }

    #[test]
    fn validate_passes_for_constant_fields() {
        let text = r#"{
            "dimension": 2,
            "horizon": 1.0,
            "beta": {"family": "constant", "params": {"value": 1.0}},
            "gamma": {"family": "constant_scalar", "params": {"value": 1.0}},
            "psi": {"family": "zero"},
            "V": {"family": "harmonic", "params": {"k": 1.0}},
            "F_ext": {"family": "zero"}
        }"#;
        let spec = SystemSpec::from_json_str(text).unwrap();
        let report = validate_assumptions(&spec, &ProbeGrid::default_for(2));
        assert!(report.pass(), "violations: {:?}", report.violations);
        assert_abs_diff_eq!(report.gamma_eig_min, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.gamma_eig_max, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.beta_min, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn validate_flags_unbounded_beta() {
        let text = r#"{
            "dimension": 1,
            "horizon": 1.0,
            "beta": {"family": "affine", "params": {"slope": [1.0], "intercept": 0.0}},
            "gamma": {"family": "constant_scalar", "params": {"value": 1.0}},
            "psi": {"family": "zero"},
            "V": {"family": "harmonic", "params": {"k": 1.0}},
            "F_ext": {"family": "zero"}
        }"#;
        let spec = SystemSpec::from_json_str(text).unwrap();
        let report = validate_assumptions(&spec, &ProbeGrid::default_for(1));
        assert!(!report.pass());
        assert!(report.beta_min <= 0.0);
    }

    #[test]
    fn validate_tanh_beta_range() {
        let text = r#"{
            "dimension": 1,
            "horizon": 1.0,
            "beta": {"family": "tanh", "params": {"base": 2.0, "amp": 1.0, "rate": 1.0, "axis": 0, "offset": 0.0}},
            "gamma": {"family": "constant_scalar", "params": {"value": 1.0}},
            "psi": {"family": "zero"},
            "V": {"family": "harmonic", "params": {"k": 1.0}},
            "F_ext": {"family": "zero"}
        }"#;
        let spec = SystemSpec::from_json_str(text).unwrap();
        let report = validate_assumptions(&spec, &ProbeGrid::default_for(1));
        assert!(report.pass(), "violations: {:?}", report.violations);
        assert!(report.beta_min >= 1.0 && report.beta_max <= 3.0);
    }

    #[test]
    fn validate_flags_parity_violation_for_uniform_b() {
        let text = r#"{
            "dimension": 3,
            "horizon": 1.0,
            "beta": {"family": "tanh_gauss", "params": {"base": 2.0, "amp": 1.0, "rate": 1.0, "axis": 0, "width": 0.3}},
            "gamma": {"family": "constant_scalar", "params": {"value": 1.0}},
            "psi": {"family": "uniform_b", "params": {"b0": 1.0}},
            "V": {"family": "harmonic", "params": {"k": 1.0}},
            "F_ext": {"family": "zero"},
            "uniform_B0": 1.0
        }"#;
        let spec = SystemSpec::from_json_str(text).unwrap();
        let mut probe = ProbeGrid::default_for(3);
        probe.points_per_axis = 5;
        let report = validate_assumptions(&spec, &probe);
        assert!(!report.pass());
        assert!(report.violations.iter().any(|v| v.contains("even in q^1")));
    }

    #[test]
    fn reversed_sigma_matches_forward_at_reflected_time() {
        let spec = time_dependent_config();
        let rev = reverse_system(&spec, 2.0, Involution::Standard).unwrap();
        let q = DVector::from_vec(vec![0.3, -0.6]);
        let s_fwd = derive_sigma(&spec, 2.0 - 0.7, &q).unwrap();
        let s_rev = derive_sigma(&rev, 0.7, &q).unwrap();
        assert!((s_fwd - s_rev).amax() <= 1e-13);
    }
}
