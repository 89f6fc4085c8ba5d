//! JSON run configuration. Every field has a default; the defaults describe
//! the mass-on-car tracking problem.

use std::fmt;
use std::path::Path;

use fmpc_core::{ExpTerm, FunnelFunction, MassOnCarParams, Sinusoid, SinusoidalReference};
use serde::{Deserialize, Serialize};

/// Invalid configuration or initial data; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub(crate) fn config_error(msg: impl fmt::Display) -> anyhow::Error {
    anyhow::Error::new(ConfigError(msg.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    #[default]
    NormalForm,
    StateSpace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlantConfig {
    /// State `(z, s, ż, ṡ)`, output `z + s cos(ramp_angle)`.
    MassOnCar {
        m1: f64,
        m2: f64,
        spring: f64,
        damping: f64,
        ramp_angle: f64,
        initial_state: [f64; 4],
        #[serde(default)]
        representation: Representation,
    },
    /// `y^{(r)} = u` with `outputs` channels; `initial_jet` lists
    /// `y, ẏ, …` blockwise.
    IntegratorChain {
        relative_degree: usize,
        #[serde(default = "one")]
        outputs: usize,
        initial_jet: Vec<f64>,
    },
    DelayOscillator {
        tau: f64,
        initial_jet: [f64; 2],
    },
}

fn one() -> usize {
    1
}

impl Default for PlantConfig {
    fn default() -> Self {
        let p = MassOnCarParams::default();
        PlantConfig::MassOnCar {
            m1: p.m1,
            m2: p.m2,
            spring: p.k,
            damping: p.d,
            ramp_angle: p.vartheta,
            initial_state: [0.0; 4],
            representation: Representation::NormalForm,
        }
    }
}

impl PlantConfig {
    pub fn output_dim(&self) -> usize {
        match self {
            PlantConfig::IntegratorChain { outputs, .. } => *outputs,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermConfig {
    pub coefficient: f64,
    pub rate: f64,
}

/// Registry of funnel expressions, each with its class-G certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "expression", rename_all = "snake_case", deny_unknown_fields)]
pub enum FunnelConfig {
    /// `constant + Σ coefficient·e^{-rate (t - t0)}`.
    ExpSum {
        constant: f64,
        #[serde(default)]
        terms: Vec<TermConfig>,
        alpha: f64,
        beta: f64,
    },
}

impl Default for FunnelConfig {
    fn default() -> Self {
        FunnelConfig::ExpSum {
            constant: 0.1,
            terms: vec![
                TermConfig {
                    coefficient: 11.0,
                    rate: 1.35,
                },
                TermConfig {
                    coefficient: -7.0,
                    rate: 1.5,
                },
            ],
            alpha: 1.5,
            beta: 0.15,
        }
    }
}

impl FunnelConfig {
    pub fn build(&self, t0: f64) -> fmpc_core::Result<FunnelFunction> {
        match self {
            FunnelConfig::ExpSum {
                constant,
                terms,
                alpha,
                beta,
            } => FunnelFunction::exp_sum(
                t0,
                *constant,
                terms
                    .iter()
                    .map(|t| ExpTerm {
                        coefficient: t.coefficient,
                        rate: t.rate,
                    })
                    .collect(),
                *alpha,
                *beta,
            ),
        }
    }
}

/// `amplitude·cos(frequency·t + phase) + offset` per channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinusoidConfig {
    pub amplitude: f64,
    pub frequency: f64,
    #[serde(default)]
    pub phase: f64,
    #[serde(default)]
    pub offset: f64,
}

impl SinusoidConfig {
    pub fn cosine() -> Self {
        Self {
            amplitude: 1.0,
            frequency: 1.0,
            phase: 0.0,
            offset: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub max_evaluations: usize,
    pub tolerance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            max_evaluations: 1_000_000,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub plant: PlantConfig,
    pub reference: Vec<SinusoidConfig>,
    pub funnel: FunnelConfig,
    /// Derived from the initial data when absent.
    pub gamma: Option<f64>,
    /// One entry per gain `k_1, …, k_{r-1}`; `null` or missing entries are
    /// derived from their lower bounds.
    pub gains: Vec<Option<f64>>,
    /// Derived gains are rounded up to multiples of this.
    pub gain_grid: f64,
    pub lambda_u: f64,
    /// Input bound `M`; derived from the feedback's dynamics bound when absent.
    pub saturation: Option<f64>,
    pub horizon: f64,
    pub delta: f64,
    pub control_step: f64,
    pub integrator_step: f64,
    pub t_span: [f64; 2],
    pub solver: SolverConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            plant: PlantConfig::default(),
            reference: vec![SinusoidConfig::cosine()],
            funnel: FunnelConfig::default(),
            gamma: Some(0.5),
            gains: vec![Some(14.0)],
            gain_grid: 1.0,
            lambda_u: 0.01,
            saturation: Some(20.0),
            horizon: 0.6,
            delta: 0.04,
            control_step: 0.04,
            integrator_step: fmpc_core::DEFAULT_INTEGRATOR_STEP,
            t_span: [0.0, 10.0],
            solver: SolverConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| config_error(format!("line {}, column {}: {e}", e.line(), e.column())))
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn reference(&self) -> anyhow::Result<SinusoidalReference> {
        SinusoidalReference::new(
            self.reference
                .iter()
                .map(|c| Sinusoid {
                    amplitude: c.amplitude,
                    frequency: c.frequency,
                    phase: c.phase,
                    offset: c.offset,
                })
                .collect(),
        )
        .map_err(|e| config_error(format!("reference: {e}")))
    }

    pub fn t0(&self) -> f64 {
        self.t_span[0]
    }

    pub fn t_end(&self) -> f64 {
        self.t_span[1]
    }

    /// Grid points `t0, t0 + h, …, t_end`.
    pub fn grid_len(&self) -> usize {
        ((self.t_end() - self.t0()) / self.integrator_step).round() as usize + 1
    }
}
