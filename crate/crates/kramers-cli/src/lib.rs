//! Experiment driver around the `kramers` library.
//!
//! An [`ExperimentPlan`] names a system config, an experiment kind, and the
//! Monte Carlo knobs (mass ladder, path count, window, step policy, seed).
//! The `run_*` entry points execute the plan and write CSV tables, and for
//! the sweep kinds an SVG convergence plot, into the plan's output
//! directory. All outputs are deterministic functions of the config bytes
//! and the plan fields; worker count never changes a byte.

use std::path::{Path, PathBuf};

use kramers::error::{Error, Result};
use kramers::system::SystemSpec;

pub mod csvout;
pub mod identities;
mod randsys;
pub mod reverse;
pub mod svg;
pub mod sweep;

pub use identities::run_verify_identities;
pub use reverse::run_reverse_check;
pub use sweep::{
    run_anomaly_sweep, run_gibbs_marginal, run_homogenize, OverdampedSummary, SweepReport,
};

/// Which experiment a plan executes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    VerifyIdentities,
    GibbsMarginal,
    Homogenize,
    AnomalySweep,
    ReverseCheck,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::VerifyIdentities => "verify-identities",
            Self::GibbsMarginal => "gibbs-marginal",
            Self::Homogenize => "homogenize",
            Self::AnomalySweep => "anomaly-sweep",
            Self::ReverseCheck => "reverse-check",
        }
    }
}

/// Default number of underdamped paths per mass.
pub const DEFAULT_PATHS: usize = 20_000;
/// Default mass ladder.
pub const DEFAULT_MASSES: [f64; 3] = [0.1, 0.03, 0.01];
/// Default underdamped step policy: dt = m / (c1 lambda_max(gamma)).
pub const DEFAULT_DT_C1: f64 = 20.0;
/// Default overdamped step policy: dt = T / c2.
pub const DEFAULT_DT_C2: f64 = 4096.0;
/// Cap on overdamped paths for the shared limit ensemble. The limit and
/// anomaly columns are mass-independent, so their ensemble does not need to
/// track the per-mass path count; the cap keeps large sweeps affordable.
pub const OVERDAMPED_PATH_CAP: usize = 12_000;

/// A fully specified experiment. Construct with [`ExperimentPlan::new`] and
/// adjust the public knobs before running.
#[derive(Clone, Debug)]
pub struct ExperimentPlan {
    pub config_path: PathBuf,
    pub kind: ExperimentKind,
    /// Strictly decreasing positive masses.
    pub masses: Vec<f64>,
    /// Underdamped paths per mass.
    pub paths: usize,
    /// Observation window (s, t); `None` means (horizon/4, horizon).
    pub window: Option<(f64, f64)>,
    pub dt_c1: f64,
    pub dt_c2: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Abort on the first diverged path instead of dropping and counting.
    pub fail_fast: bool,
    /// Identity suite selection for `verify-identities`; `None` runs all.
    pub identities: Option<Vec<String>>,
    /// Test hook: perturb one G-tensor entry by 1e-3 before the contraction
    /// checks so the suite must fail.
    pub inject_g_fault: bool,
}

impl ExperimentPlan {
    pub fn new(config_path: impl Into<PathBuf>, kind: ExperimentKind, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            config_path: config_path.into(),
            kind,
            masses: DEFAULT_MASSES.to_vec(),
            paths: DEFAULT_PATHS,
            window: None,
            dt_c1: DEFAULT_DT_C1,
            dt_c2: DEFAULT_DT_C2,
            seed: 0,
            out_dir: out_dir.into(),
            fail_fast: false,
            identities: None,
            inject_g_fault: false,
        }
    }

    /// Parses the system config named by the plan.
    pub fn load_spec(&self) -> Result<SystemSpec> {
        SystemSpec::from_path(&self.config_path)
    }

    /// The observation window after applying the default rule.
    pub fn resolved_window(&self, horizon: f64) -> (f64, f64) {
        self.window.unwrap_or((horizon / 4.0, horizon))
    }

    /// Checks the plan invariants against a loaded system.
    pub fn validate(&self, spec: &SystemSpec) -> Result<()> {
        if self.paths == 0 {
            return Err(Error::Config("paths must be at least 1".into()));
        }
        if self.masses.is_empty() {
            return Err(Error::Config("mass ladder must not be empty".into()));
        }
        for pair in self.masses.windows(2) {
            if pair[1] >= pair[0] {
                return Err(Error::Config(format!(
                    "mass ladder must be strictly decreasing, got {} before {}",
                    pair[0], pair[1]
                )));
            }
        }
        if !self.masses.iter().all(|m| m.is_finite() && *m > 0.0) {
            return Err(Error::Config("masses must be positive and finite".into()));
        }
        if !(self.dt_c1.is_finite() && self.dt_c1 > 0.0) {
            return Err(Error::Config("dt-c1 must be positive".into()));
        }
        if !(self.dt_c2.is_finite() && self.dt_c2 >= 1.0) {
            return Err(Error::Config("dt-c2 must be at least 1".into()));
        }
        let horizon = spec.horizon();
        let (s, t) = self.resolved_window(horizon);
        if !(s.is_finite() && t.is_finite() && 0.0 <= s && s < t && t <= horizon) {
            return Err(Error::Config(format!(
                "window ({s}, {t}) must satisfy 0 <= s < t <= horizon = {horizon}"
            )));
        }
        Ok(())
    }

    /// Overdamped step count from the dt-c2 knob.
    pub fn overdamped_steps(&self) -> usize {
        self.dt_c2.round().max(1.0) as usize
    }
}

/// One row of a sweep table. The limit column holds the mass-independent
/// limit prediction for the estimate (the limit-formula mean for anomaly
/// sweeps, the exact or Monte Carlo limit for the other kinds), the anomaly
/// column the anomaly prediction included in that limit, and the gap their
/// difference: gap = estimate - limit.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub m: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub limit: f64,
    pub anomaly: f64,
    pub gap: f64,
    pub excluded: usize,
}

impl SweepRow {
    pub fn new(m: f64, estimate: f64, stderr: f64, limit: f64, anomaly: f64, excluded: usize) -> Result<Self> {
        if !(stderr >= 0.0) {
            return Err(Error::InvalidInput(format!("stderr must be non-negative, got {stderr}")));
        }
        Ok(Self { m, estimate, stderr, limit, anomaly, gap: estimate - limit, excluded })
    }

    pub const CSV_HEADER: [&'static str; 7] =
        ["m", "estimate", "stderr", "limit", "anomaly", "gap", "excluded"];

    pub fn csv_cells(&self) -> Vec<String> {
        vec![
            csvout::format_field(self.m),
            csvout::format_field(self.estimate),
            csvout::format_field(self.stderr),
            csvout::format_field(self.limit),
            csvout::format_field(self.anomaly),
            csvout::format_field(self.gap),
            self.excluded.to_string(),
        ]
    }
}

/// One row of an identity or reversal report: the worst error a suite saw
/// across its random instances, against the suite's tolerance.
#[derive(Clone, Debug)]
pub struct CheckRow {
    pub name: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
}

impl CheckRow {
    pub fn pass(&self) -> bool {
        self.max_error.is_finite() && self.max_error <= self.tolerance
    }

    pub const CSV_HEADER: [&'static str; 4] = ["identity", "max_error", "tolerance", "status"];

    pub fn csv_cells(&self) -> Vec<String> {
        vec![
            self.name.to_string(),
            csvout::format_field(self.max_error),
            csvout::format_field(self.tolerance),
            if self.pass() { "pass".into() } else { "fail".into() },
        ]
    }
}

/// A named collection of check rows.
#[derive(Clone, Debug, Default)]
pub struct CheckReport {
    pub rows: Vec<CheckRow>,
}

impl CheckReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(CheckRow::pass)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut table = csvout::Table::new(&CheckRow::CSV_HEADER);
        for row in &self.rows {
            table.push_row(row.csv_cells());
        }
        table.write(path)
    }
}

/// Parses a `--masses` list: comma-separated positive decreasing floats.
pub fn parse_mass_ladder(text: &str) -> Result<Vec<f64>> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(Error::Config("mass list is empty".into()));
    }
    let mut masses = Vec::new();
    for part in trimmed.split(',') {
        let part = part.trim();
        if part.is_empty() {
            return Err(Error::Config("mass list has an empty entry".into()));
        }
        let m: f64 = part
            .parse()
            .map_err(|e| Error::Config(format!("bad mass entry {part:?}: {e}")))?;
        if !(m.is_finite() && m > 0.0) {
            return Err(Error::Config(format!("mass {m} must be positive and finite")));
        }
        masses.push(m);
    }
    for pair in masses.windows(2) {
        if pair[1] >= pair[0] {
            return Err(Error::Config(format!(
                "mass ladder must be strictly decreasing, got {} before {}",
                pair[0], pair[1]
            )));
        }
    }
    Ok(masses)
}

/// Parses a `--window s,t` pair.
pub fn parse_window(text: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(Error::Config(format!("window must be two comma-separated numbers, got {text:?}")));
    }
    let s: f64 = parts[0]
        .parse()
        .map_err(|e| Error::Config(format!("bad window start {:?}: {e}", parts[0])))?;
    let t: f64 = parts[1]
        .parse()
        .map_err(|e| Error::Config(format!("bad window end {:?}: {e}", parts[1])))?;
    Ok((s, t))
}

/// Least-squares slope of ln(y) against ln(x) over the points with positive
/// finite coordinates. Returns the slope and the intercept (in natural log),
/// or `None` when fewer than two usable points remain.
pub fn fit_loglog(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if logs.len() < 2 {
        return None;
    }
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (x, y) in &logs {
        cov += (x - mx) * (y - my);
        var += (x - mx) * (x - mx);
    }
    if var == 0.0 {
        return None;
    }
    let slope = cov / var;
    Some((slope, my - slope * mx))
}
