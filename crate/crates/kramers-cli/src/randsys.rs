//! Seeded random system generation for the identity and reversal suites.
//! Parameters stay inside ranges where every field precondition holds
//! (positive temperature, positive-definite drag) so a failed check always
//! means a broken identity, never a malformed instance.

use kramers::error::Result;
use kramers::system::fields::{MatrixFieldSpec, ScalarFieldSpec, VectorFieldSpec};
use kramers::system::{InitialCondition, SystemConfig, SystemSpec};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub(crate) fn unit(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(-1.0..1.0)
}

pub(crate) fn in_range(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

pub(crate) fn random_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * unit(rng))
}

/// A dense matrix whose symmetric part has spectrum in roughly [0.4, 2.5].
pub(crate) fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| unit(rng));
    &m * m.transpose() / n as f64 + DMatrix::identity(n, n) * in_range(rng, 0.4, 1.0)
}

/// A drag-like matrix pair: `gamma_tilde` with positive-definite symmetric
/// part `gamma`, plus an antisymmetric component.
pub(crate) fn random_gamma_tilde(rng: &mut ChaCha8Rng, n: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let gamma = random_spd(rng, n);
    let k = DMatrix::from_fn(n, n, |_, _| 0.7 * unit(rng));
    let h = &k - k.transpose();
    (&gamma + &h, gamma)
}

fn random_beta(rng: &mut ChaCha8Rng, n: usize) -> ScalarFieldSpec {
    let base = in_range(rng, 1.5, 2.5);
    let amp = in_range(rng, -0.9, 0.9);
    let rate = in_range(rng, 0.4, 1.5);
    let axis = rng.random_range(0..n);
    let core = match rng.random_range(0..3) {
        0 => ScalarFieldSpec::Constant { value: base },
        1 => ScalarFieldSpec::Tanh { base, amp, rate, axis, offset: 0.3 * unit(rng) },
        _ => ScalarFieldSpec::TanhGauss { base, amp, rate, axis, width: in_range(rng, 0.1, 0.6) },
    };
    match rng.random_range(0..3) {
        0 => core,
        1 => ScalarFieldSpec::Ramp { rate: in_range(rng, 0.0, 0.4), inner: Box::new(core) },
        _ => ScalarFieldSpec::Osc {
            amp: in_range(rng, 0.0, 0.35),
            omega: in_range(rng, 0.5, 3.0),
            inner: Box::new(core),
        },
    }
}

fn random_potential(rng: &mut ChaCha8Rng, n: usize) -> ScalarFieldSpec {
    let core = match rng.random_range(0..3) {
        0 => ScalarFieldSpec::Harmonic { k: in_range(rng, 0.3, 2.0) },
        1 => ScalarFieldSpec::Quartic { a: in_range(rng, 0.2, 1.0), b: in_range(rng, 0.05, 0.5) },
        _ => ScalarFieldSpec::GaussBump {
            amp: unit(rng),
            width: in_range(rng, 0.7, 1.5),
            center: random_vector(rng, n, 0.5).iter().copied().collect(),
        },
    };
    if rng.random_range(0..2) == 0 {
        core
    } else {
        ScalarFieldSpec::Osc {
            amp: in_range(rng, 0.0, 0.4),
            omega: in_range(rng, 0.5, 3.0),
            inner: Box::new(core),
        }
    }
}

fn random_psi(rng: &mut ChaCha8Rng, n: usize) -> VectorFieldSpec {
    let gauss = VectorFieldSpec::GaussAxis {
        amp: 0.8 * unit(rng),
        axis: rng.random_range(0..n),
        width: in_range(rng, 0.6, 1.4),
    };
    let choices = if n >= 2 { 4 } else { 2 };
    match rng.random_range(0..choices) {
        0 => gauss,
        1 => VectorFieldSpec::Osc {
            amp: in_range(rng, 0.1, 0.5),
            omega: in_range(rng, 0.5, 3.0),
            inner: Box::new(gauss),
        },
        2 => VectorFieldSpec::Swirl { amp: 0.8 * unit(rng), width: in_range(rng, 0.6, 1.4) },
        _ => VectorFieldSpec::Solenoid { amp: 0.6 * unit(rng) },
    }
}

fn random_f_ext(rng: &mut ChaCha8Rng, n: usize) -> VectorFieldSpec {
    match rng.random_range(0..3) {
        0 => VectorFieldSpec::Zero,
        1 => VectorFieldSpec::Constant {
            components: random_vector(rng, n, 0.8).iter().copied().collect(),
        },
        _ => VectorFieldSpec::Osc {
            amp: in_range(rng, 0.1, 0.5),
            omega: in_range(rng, 0.5, 3.0),
            inner: Box::new(VectorFieldSpec::Constant {
                components: random_vector(rng, n, 0.8).iter().copied().collect(),
            }),
        },
    }
}

fn random_gamma(rng: &mut ChaCha8Rng, n: usize, isotropic: bool) -> MatrixFieldSpec {
    let scalar = MatrixFieldSpec::ConstantScalar { value: in_range(rng, 0.5, 2.0) };
    let iso_tanh = |rng: &mut ChaCha8Rng| {
        let base = in_range(rng, 0.8, 1.6);
        MatrixFieldSpec::IsotropicTanh {
            base,
            amp: in_range(rng, -0.4, 0.4) * base,
            rate: in_range(rng, 0.3, 1.5),
            axis: rng.random_range(0..n),
        }
    };
    if isotropic {
        return match rng.random_range(0..2) {
            0 => scalar,
            _ => iso_tanh(rng),
        };
    }
    match rng.random_range(0..3) {
        0 => scalar,
        1 => iso_tanh(rng),
        _ => {
            let g = random_spd(rng, n);
            let sym = (&g + g.transpose()) * 0.5;
            let entries =
                (0..n).map(|i| (0..n).map(|j| sym[(i, j)]).collect()).collect::<Vec<Vec<f64>>>();
            MatrixFieldSpec::ConstantMatrix { entries }
        }
    }
}

fn random_q0(rng: &mut ChaCha8Rng, n: usize) -> InitialCondition {
    if rng.random_range(0..2) == 0 {
        InitialCondition::Point { position: random_vector(rng, n, 0.8).iter().copied().collect() }
    } else {
        InitialCondition::Gaussian {
            mean: random_vector(rng, n, 0.5).iter().copied().collect(),
            stddev: in_range(rng, 0.2, 0.6),
        }
    }
}

/// A general random system in dimension `n`, with or without a vector
/// potential.
pub(crate) fn random_system(rng: &mut ChaCha8Rng, n: usize, psi_zero: bool) -> Result<SystemSpec> {
    let config = SystemConfig {
        dimension: n,
        horizon: 2.0,
        beta: random_beta(rng, n),
        gamma: random_gamma(rng, n, false),
        psi: if psi_zero { VectorFieldSpec::Zero } else { random_psi(rng, n) },
        potential: random_potential(rng, n),
        f_ext: random_f_ext(rng, n),
        uniform_b0: None,
        q0: Some(random_q0(rng, n)),
    };
    SystemSpec::from_config(config)
}

/// A random isotropic-drag system without a vector potential, the setting
/// where every scalar anomaly variant applies.
pub(crate) fn random_isotropic_psi_zero(rng: &mut ChaCha8Rng, n: usize) -> Result<SystemSpec> {
    let config = SystemConfig {
        dimension: n,
        horizon: 2.0,
        beta: random_beta(rng, n),
        gamma: random_gamma(rng, n, true),
        psi: VectorFieldSpec::Zero,
        potential: random_potential(rng, n),
        f_ext: random_f_ext(rng, n),
        uniform_b0: None,
        q0: Some(random_q0(rng, n)),
    };
    SystemSpec::from_config(config)
}

/// A random uniform-magnetic-field system: n = 3, constant scalar drag,
/// vector potential of a uniform field along the third axis. When
/// `reversible` is set the potential is kept mirror-symmetric in the first
/// coordinate and the external force zero, the shape preserved by the
/// uniform-B involution.
pub(crate) fn random_uniform_b(rng: &mut ChaCha8Rng, reversible: bool) -> Result<SystemSpec> {
    let b0 = if rng.random_range(0..6) == 0 { 0.0 } else { in_range(rng, 0.3, 1.5) };
    let n = 3;
    let config = SystemConfig {
        dimension: n,
        horizon: 2.0,
        beta: random_beta(rng, n),
        gamma: MatrixFieldSpec::ConstantScalar { value: in_range(rng, 0.6, 1.8) },
        psi: VectorFieldSpec::UniformB { b0 },
        potential: if reversible {
            ScalarFieldSpec::Harmonic { k: in_range(rng, 0.3, 2.0) }
        } else {
            random_potential(rng, n)
        },
        f_ext: if reversible { VectorFieldSpec::Zero } else { random_f_ext(rng, n) },
        uniform_b0: Some(b0),
        q0: Some(random_q0(rng, n)),
    };
    SystemSpec::from_config(config)
}

/// A random evaluation point strictly inside the horizon.
pub(crate) fn random_point(rng: &mut ChaCha8Rng, spec: &SystemSpec) -> (f64, DVector<f64>) {
    let t = in_range(rng, 0.0, spec.horizon() * 0.999);
    let q = random_vector(rng, spec.dim(), 1.2);
    (t, q)
}
