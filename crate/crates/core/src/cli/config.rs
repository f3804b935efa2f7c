//! JSON run configuration.
//!
//! ```json
//! {
//!   "command": "sweep",
//!   "prior": { "kind": "iid_bernoulli", "p": 0.1 },
//!   "rates": [0.3],
//!   "beta": { "unit": "db", "values": [0, 10, 20] },
//!   "sigma2": 1.0,
//!   "seed": 2024
//! }
//! ```
//!
//! Grids are either a list or `{ "from": a, "to": b, "points": k }` (linear
//! spacing, endpoints included).

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::exact::Ensemble;
use crate::model::{ModelParams, SparsityPrior};
use crate::quadrature::QuadratureRule;
use crate::solver::{MmseForm, ScanAxis, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Sweep,
    FiniteN,
    RmtCheck,
    ReplicaCompare,
    PhaseScan,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Sweep => "sweep",
            Command::FiniteN => "finite-n",
            Command::RmtCheck => "rmt-check",
            Command::ReplicaCompare => "replica-compare",
            Command::PhaseScan => "phase-scan",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSpec {
    IidBernoulli {
        p: f64,
    },
    CurieWeiss {
        a: f64,
        b: f64,
    },
    /// `f` sampled on a uniform grid over `[0, 1]`.
    Tabulated {
        values: Vec<f64>,
    },
    Uniform,
}

impl PriorSpec {
    pub fn build(&self) -> crate::Result<SparsityPrior> {
        match self {
            PriorSpec::IidBernoulli { p } => SparsityPrior::iid_bernoulli(*p),
            PriorSpec::CurieWeiss { a, b } => SparsityPrior::curie_weiss(*a, *b),
            PriorSpec::Tabulated { values } => SparsityPrior::tabulated(values.clone()),
            PriorSpec::Uniform => Ok(SparsityPrior::uniform()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Grid {
    List(Vec<f64>),
    Range { from: f64, to: f64, points: usize },
}

impl Grid {
    pub fn values(&self) -> Vec<f64> {
        match *self {
            Grid::List(ref v) => v.clone(),
            Grid::Range { from, to, points } => match points {
                0 => Vec::new(),
                1 => vec![from],
                k => (0..k).map(|i| from + (to - from) * i as f64 / (k - 1) as f64).collect(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaUnit {
    /// `10 log₁₀ β`.
    #[default]
    Db,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaGrid {
    #[serde(default)]
    pub unit: BetaUnit,
    pub values: Grid,
}

impl BetaGrid {
    pub fn linear(&self) -> Vec<f64> {
        let v = self.values.values();
        match self.unit {
            BetaUnit::Db => v.into_iter().map(|db| 10f64.powf(db / 10.0)).collect(),
            BetaUnit::Linear => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// `|D − D_replica| / D` allowed per grid point.
    pub replica_relative: f64,
    /// Finite-n band `max(se_multiple · SE, relative · D)`.
    pub finite_n_relative: f64,
    pub finite_n_se_multiple: f64,
    /// RMT gap bound as a fraction of `1 + |empirical|`.
    pub rmt_scaled: f64,
    /// Fixed-point convergence tolerance.
    pub solver: f64,
    /// Relative node-doubling tolerance of the quadrature.
    pub quadrature: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            replica_relative: 2e-2,
            finite_n_relative: 0.15,
            finite_n_se_multiple: 3.0,
            rmt_scaled: 2e-2,
            solver: 1e-10,
            quadrature: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RmtSettings {
    pub m_s: f64,
    pub m_r: f64,
    pub m_sr: f64,
    pub sizes: Vec<usize>,
    /// Seeds `seed, seed + 1, …` per size.
    pub repetitions: u64,
}

impl Default for RmtSettings {
    fn default() -> Self {
        RmtSettings {
            m_s: 0.3,
            m_r: 0.3,
            m_sr: 0.2,
            sizes: vec![250, 1000],
            repetitions: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub command: Option<Command>,
    pub prior: PriorSpec,
    pub rates: Grid,
    pub beta: BetaGrid,
    #[serde(default = "one")]
    pub sigma2: f64,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub trials: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub ensemble: Ensemble,
    #[serde(default)]
    pub form: MmseForm,
    #[serde(default)]
    pub rmt: RmtSettings,
    /// Axis swept by `phase-scan`; the other grid contributes its first value.
    #[serde(default = "rate_axis")]
    pub scan_axis: ScanAxis,
    #[serde(default)]
    pub strict: bool,
}

fn one() -> f64 {
    1.0
}

fn rate_axis() -> ScanAxis {
    ScanAxis::Rate
}

/// A configuration problem, tagged with the offending field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config field `{}`: {}", self.field, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn bad(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        field: field.to_string(),
        message: message.into(),
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError {
                field: if path == "." { "<root>".into() } else { path },
                message: e.into_inner().to_string(),
            }
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every field that the runners rely on. Empty grids are allowed
    /// and produce header-only output.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let prior = self.prior.build().map_err(|e| bad("prior", e.to_string()))?;
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(bad(
                "sigma2",
                format!("must be positive and finite, got {}", self.sigma2),
            ));
        }
        if let Grid::Range { from, to, .. } = self.rates {
            if !(from.is_finite() && to.is_finite()) {
                return Err(bad("rates", "range endpoints must be finite"));
            }
        }
        for r in self.rates.values() {
            if !(r > 0.0 && r.is_finite()) {
                return Err(bad("rates", format!("every rate must be positive, got {r}")));
            }
        }
        for b in self.beta.linear() {
            if !(b > 0.0 && b.is_finite()) {
                return Err(bad(
                    "beta.values",
                    format!("every beta must be positive and finite, got {b}"),
                ));
            }
        }
        let t = &self.tolerances;
        for (name, v) in [
            ("tolerances.replica_relative", t.replica_relative),
            ("tolerances.finite_n_relative", t.finite_n_relative),
            ("tolerances.finite_n_se_multiple", t.finite_n_se_multiple),
            ("tolerances.rmt_scaled", t.rmt_scaled),
            ("tolerances.solver", t.solver),
            ("tolerances.quadrature", t.quadrature),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad(name, format!("must be positive, got {v}")));
            }
        }
        match self.command {
            None => return Err(bad("command", "no command given")),
            Some(Command::FiniteN) => {
                let n = self.n.ok_or_else(|| bad("n", "finite-n needs a problem size"))?;
                if n == 0 || n > crate::exact::ENUMERATION_CAP {
                    return Err(bad(
                        "n",
                        format!("must lie in 1..={}, got {n}", crate::exact::ENUMERATION_CAP),
                    ));
                }
                if self.trials.is_none() {
                    return Err(bad("trials", "finite-n needs a trial count"));
                }
                if self.trials == Some(1) {
                    return Err(bad("trials", "need 0 or at least 2 trials for a standard error"));
                }
            }
            Some(Command::ReplicaCompare) => {
                if prior.iid_p().is_none() {
                    return Err(bad("prior", "replica-compare needs an iid_bernoulli prior"));
                }
            }
            Some(Command::RmtCheck) => {
                let s = &self.rmt;
                if s.sizes.contains(&0) {
                    return Err(bad("rmt.sizes", "sizes must be positive"));
                }
                crate::rmt::overlapping_patterns(1000, s.m_s, s.m_r, s.m_sr).map_err(|e| bad("rmt", e.to_string()))?;
            }
            Some(Command::Sweep) | Some(Command::PhaseScan) => {}
        }
        Ok(())
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            tolerance: self.tolerances.solver,
            rule: QuadratureRule::default().with_tolerance(self.tolerances.quadrature),
            form: self.form,
            ..SolverConfig::default()
        }
    }

    /// `(R, β)` cells, rate-major.
    pub fn cells(&self) -> Vec<ModelParams> {
        let betas = self.beta.linear();
        self.rates
            .values()
            .into_iter()
            .flat_map(|r| {
                betas.iter().map(move |&b| ModelParams {
                    rate: r,
                    beta: b,
                    sigma2: self.sigma2,
                })
            })
            .collect::<Vec<_>>()
    }
}
