//! JSON-facing configuration: model/OCP/run descriptions, builders for the
//! benchmark test cases, and conversion into runtime objects.

use crate::admm::ExecutionMode;
use crate::dsqp::{DsqpSettings, HessianMode};
use crate::models::{DoubleIntegratorChain, OcpModel, ScalarIntegratorPair};
use crate::mpc::RunConfig;
use crate::nlp::{CopySpan, OcpSpec};
use crate::pendulum::{design_terminal, PendulumChainModel, PendulumChainParams};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse configuration: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("terminal design failed: {0}")]
    Terminal(#[from] crate::pendulum::PendulumError),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    PendulumChain {
        count: usize,
        #[serde(default)]
        params: Option<PendulumChainParams>,
    },
    /// Two scalar subsystems, the second integrating the first's state.
    ScalarIntegratorPair,
    DoubleIntegratorChain {
        count: usize,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TerminalConfig {
    /// Per-subsystem Riccati design on the uncoupled linearization at the
    /// control interval, plus the grid search for the terminal scaling.
    Riccati {
        mu: f64,
        /// Fixed scaling; when absent the grid search decides.
        #[serde(default)]
        beta2: Option<f64>,
    },
    /// Identity terminal weight with a fixed scaling.
    Unit {
        #[serde(default = "one")]
        beta2: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OcpConfig {
    pub horizon: usize,
    pub shooting_interval: f64,
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    #[serde(default = "one")]
    pub beta: f64,
    pub terminal: TerminalConfig,
    #[serde(default)]
    pub input_bound: Option<f64>,
    #[serde(default = "default_copy_penalty")]
    pub copy_penalty: f64,
    #[serde(default = "default_copy_span")]
    pub copy_span: CopySpan,
    #[serde(default = "default_true")]
    pub trailing_input: bool,
}

fn default_copy_penalty() -> f64 {
    1e-5
}
fn default_copy_span() -> CopySpan {
    CopySpan::FullHorizon
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialCondition {
    Origin,
    /// Hanging pendulums with every cart displaced by the same offset.
    HangingUniform {
        displacement: f64,
    },
    /// Hanging pendulums with alternating cart displacement `(-1)^i`.
    HangingAlternating,
    /// Hanging pendulums with ramp displacement `q_i = i` (one-based).
    HangingRamp,
    Explicit {
        states: Vec<Vec<f64>>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolverConfig {
    pub k_max: usize,
    pub l_max: usize,
    #[serde(default = "one")]
    pub rho: f64,
    #[serde(default = "default_hessian")]
    pub hessian: HessianMode,
    #[serde(default = "default_qp_tol")]
    pub qp_tol: f64,
    #[serde(default = "default_qp_tol")]
    pub reg_floor: f64,
}

fn default_hessian() -> HessianMode {
    HessianMode::Auto
}
fn default_qp_tol() -> f64 {
    1e-8
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSection {
    pub delta: f64,
    pub t_final: f64,
    pub initial_condition: InitialCondition,
    pub dsqp: SolverConfig,
    #[serde(default = "default_mode")]
    pub mode: ExecutionMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub reference: bool,
    #[serde(default)]
    pub record_transcript: bool,
}

fn default_mode() -> ExecutionMode {
    ExecutionMode::Decentralized
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FileConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub label: String,
    pub model: ModelConfig,
    pub ocp: OcpConfig,
    pub run: RunSection,
}

fn default_version() -> u32 {
    1
}

impl FileConfig {
    pub fn from_path(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            source: e,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn build(&self) -> Result<RunConfig, ConfigError> {
        let (model, state_names): (Arc<dyn OcpModel>, Vec<String>) = match &self.model {
            ModelConfig::PendulumChain { count, params } => {
                let mut p = params
                    .clone()
                    .unwrap_or_else(|| PendulumChainParams::with_count(*count));
                p.count = *count;
                (
                    Arc::new(PendulumChainModel::new(p)),
                    ["q", "qd", "phi", "phid"]
                        .iter()
                        .map(|s| s.to_string())
                        .collect(),
                )
            }
            ModelConfig::ScalarIntegratorPair => {
                (Arc::new(ScalarIntegratorPair), vec!["x".to_string()])
            }
            ModelConfig::DoubleIntegratorChain { count } => (
                Arc::new(DoubleIntegratorChain { count: *count }),
                vec!["pos".to_string(), "vel".to_string()],
            ),
        };
        let spec = build_spec(model, &self.model, &self.ocp, self.run.delta)?;
        let x0 = initial_states(&self.model, &self.run.initial_condition, &spec)?;
        Ok(RunConfig {
            label: self.label.clone(),
            spec,
            x0,
            delta: self.run.delta,
            t_final: self.run.t_final,
            settings: DsqpSettings {
                k_max: self.run.dsqp.k_max,
                l_max: self.run.dsqp.l_max,
                rho: self.run.dsqp.rho,
                hessian_mode: self.run.dsqp.hessian,
                qp_tol: self.run.dsqp.qp_tol,
                reg_floor: self.run.dsqp.reg_floor,
            },
            mode: self.run.mode,
            seed: self.run.seed,
            reference: self.run.reference,
            record_transcript: self.run.record_transcript,
            state_names,
        })
    }
}

pub fn build_spec(
    model: Arc<dyn OcpModel>,
    model_cfg: &ModelConfig,
    ocp: &OcpConfig,
    delta: f64,
) -> Result<OcpSpec, ConfigError> {
    let s_count = model.subsystem_count();
    let mut q_weights = Vec::with_capacity(s_count);
    let mut r_weights = Vec::with_capacity(s_count);
    let mut input_bounds = Vec::with_capacity(s_count);
    for i in 0..s_count {
        let n_x = model.state_dim(i);
        let n_u = model.input_dim(i);
        if ocp.q_diag.len() != n_x {
            return Err(ConfigError::Invalid(format!(
                "q_diag has {} entries, state dimension is {n_x}",
                ocp.q_diag.len()
            )));
        }
        q_weights.push(DMatrix::from_diagonal(&DVector::from_vec(
            ocp.q_diag.clone(),
        )));
        if n_u > 0 {
            if ocp.r_diag.len() != n_u {
                return Err(ConfigError::Invalid(format!(
                    "r_diag has {} entries, input dimension is {n_u}",
                    ocp.r_diag.len()
                )));
            }
            r_weights.push(DMatrix::from_diagonal(&DVector::from_vec(
                ocp.r_diag.clone(),
            )));
        } else {
            r_weights.push(DMatrix::zeros(0, 0));
        }
        input_bounds.push(ocp.input_bound.filter(|_| n_u > 0).map(|b| {
            (
                DVector::from_element(n_u, -b),
                DVector::from_element(n_u, b),
            )
        }));
    }

    let (terminal_weights, beta2) = match (&ocp.terminal, model_cfg) {
        (TerminalConfig::Riccati { mu, beta2 }, ModelConfig::PendulumChain { count, params }) => {
            let mut p = params
                .clone()
                .unwrap_or_else(|| PendulumChainParams::with_count(*count));
            p.count = *count;
            let design = design_terminal(&p, delta, &q_weights[0], &r_weights[0], *mu)?;
            let b2 = beta2.unwrap_or(design.beta2);
            (design.p_blocks, b2)
        }
        (TerminalConfig::Riccati { .. }, _) => {
            return Err(ConfigError::Invalid(
                "riccati terminal design is only available for the pendulum chain".into(),
            ))
        }
        (TerminalConfig::Unit { beta2 }, _) => {
            let weights = (0..s_count)
                .map(|i| DMatrix::identity(model.state_dim(i), model.state_dim(i)))
                .collect();
            (weights, *beta2)
        }
    };

    Ok(OcpSpec {
        model,
        horizon: ocp.horizon,
        shooting_interval: ocp.shooting_interval,
        q_weights,
        r_weights,
        terminal_weights,
        beta: ocp.beta,
        beta2,
        input_bounds,
        state_bounds: vec![None; s_count],
        copy_penalty: ocp.copy_penalty,
        copy_span: ocp.copy_span,
        trailing_input: ocp.trailing_input,
    })
}

fn initial_states(
    model_cfg: &ModelConfig,
    ic: &InitialCondition,
    spec: &OcpSpec,
) -> Result<Vec<DVector<f64>>, ConfigError> {
    let s_count = spec.model.subsystem_count();
    match ic {
        InitialCondition::Origin => Ok((0..s_count)
            .map(|i| DVector::zeros(spec.model.state_dim(i)))
            .collect()),
        InitialCondition::Explicit { states } => {
            if states.len() != s_count {
                return Err(ConfigError::Invalid(format!(
                    "{} explicit states for {s_count} subsystems",
                    states.len()
                )));
            }
            Ok(states
                .iter()
                .map(|v| DVector::from_vec(v.clone()))
                .collect())
        }
        InitialCondition::HangingUniform { .. }
        | InitialCondition::HangingAlternating
        | InitialCondition::HangingRamp => {
            if !matches!(model_cfg, ModelConfig::PendulumChain { .. }) {
                return Err(ConfigError::Invalid(
                    "hanging initial conditions require the pendulum chain".into(),
                ));
            }
            Ok((0..s_count)
                .map(|i| {
                    let q = match ic {
                        InitialCondition::HangingUniform { displacement } => *displacement,
                        InitialCondition::HangingAlternating => {
                            if (i + 1) % 2 == 1 {
                                -1.0
                            } else {
                                1.0
                            }
                        }
                        _ => (i + 1) as f64,
                    };
                    DVector::from_vec(vec![q, 0.0, std::f64::consts::PI, 0.0])
                })
                .collect())
        }
    }
}

/// Benchmark case 1: alternating displacement, 40 ms shooting, one outer and
/// six inner iterations per control step.
pub fn case1(count: usize) -> FileConfig {
    FileConfig {
        version: 1,
        label: "case1".into(),
        model: ModelConfig::PendulumChain {
            count,
            params: None,
        },
        ocp: OcpConfig {
            horizon: 10,
            shooting_interval: 0.04,
            q_diag: vec![1.0, 1e-4, 10.0, 1e-4],
            r_diag: vec![0.001],
            beta: 1.0,
            terminal: TerminalConfig::Riccati {
                mu: 1.01,
                beta2: None,
            },
            input_bound: Some(100.0),
            copy_penalty: 1e-5,
            copy_span: CopySpan::FullHorizon,
            trailing_input: true,
        },
        run: RunSection {
            delta: 0.04,
            t_final: 10.0,
            initial_condition: InitialCondition::HangingUniform { displacement: -1.0 },
            dsqp: SolverConfig {
                k_max: 1,
                l_max: 6,
                rho: 1.0,
                hessian: HessianMode::Auto,
                qp_tol: 1e-8,
                reg_floor: 1e-8,
            },
            mode: ExecutionMode::Decentralized,
            seed: 0,
            reference: false,
            record_transcript: false,
        },
    }
}

/// Benchmark case 2: ramp displacement, three outer iterations per step.
pub fn case2(count: usize) -> FileConfig {
    let mut cfg = case1(count);
    cfg.label = "case2".into();
    cfg.run.initial_condition = InitialCondition::HangingRamp;
    cfg.run.dsqp.k_max = 3;
    cfg
}

/// Benchmark case 3: ramp displacement, coarser shooting grid, least-squares
/// Hessian, two outer and three inner iterations.
pub fn case3(count: usize) -> FileConfig {
    let mut cfg = case1(count);
    cfg.label = "case3".into();
    cfg.run.initial_condition = InitialCondition::HangingRamp;
    cfg.ocp.horizon = 7;
    cfg.ocp.shooting_interval = 0.057;
    cfg.run.dsqp.k_max = 2;
    cfg.run.dsqp.l_max = 3;
    cfg.run.dsqp.hessian = HessianMode::GaussNewton;
    cfg
}

/// The small two-subsystem consensus example.
pub fn integrator_pair_example() -> FileConfig {
    FileConfig {
        version: 1,
        label: "integrator-pair".into(),
        model: ModelConfig::ScalarIntegratorPair,
        ocp: OcpConfig {
            horizon: 1,
            shooting_interval: 1.0,
            q_diag: vec![1.0],
            r_diag: vec![1.0],
            beta: 1.0,
            terminal: TerminalConfig::Unit { beta2: 1.0 },
            input_bound: None,
            copy_penalty: 1e-5,
            copy_span: CopySpan::DynamicsOnly,
            trailing_input: false,
        },
        run: RunSection {
            delta: 1.0,
            t_final: 5.0,
            initial_condition: InitialCondition::Explicit {
                states: vec![vec![0.5], vec![-0.25]],
            },
            dsqp: SolverConfig {
                k_max: 1,
                l_max: 10,
                rho: 1.0,
                hessian: HessianMode::Auto,
                qp_tol: 1e-8,
                reg_floor: 1e-8,
            },
            mode: ExecutionMode::Decentralized,
            seed: 0,
            reference: false,
            record_transcript: false,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn case_builders_roundtrip_through_json() {
        for cfg in [case1(20), case2(20), case3(20), integrator_pair_example()] {
            let text = serde_json::to_string_pretty(&cfg).unwrap();
            let parsed: FileConfig = serde_json::from_str(&text).unwrap();
            assert_eq!(parsed.label, cfg.label);
            let json_a = serde_json::to_value(&cfg).unwrap();
            let json_b = serde_json::to_value(&parsed).unwrap();
            assert_eq!(json_a, json_b);
        }
    }

    #[test]
    fn case1_builds_expected_dimensions() {
        let cfg = case1(4);
        let run = cfg.build().unwrap();
        assert_eq!(run.spec.horizon, 10);
        assert!(run.spec.beta2 >= 1.0);
        let nlp = crate::nlp::assemble_nlp(&run.spec, &run.x0).unwrap();
        // states (N+1)*4, inputs N+1, copies per edge (N+1)
        assert_eq!(nlp.n, 4 * (44 + 11) + 2 * 3 * 11);
        assert_eq!(nlp.n_g, 4 * 44);
        assert_eq!(nlp.n_h, 4 * 22);
        assert_eq!(nlp.n_c(), 2 * 3 * 11);
    }

    #[test]
    fn initial_conditions_patterns() {
        let cfg = case1(3);
        let run = cfg.build().unwrap();
        assert!(run.x0.iter().all(|x| x[0] == -1.0));
        assert!(run
            .x0
            .iter()
            .all(|x| (x[2] - std::f64::consts::PI).abs() < 1e-15));

        let cfg2 = case2(3);
        let run2 = cfg2.build().unwrap();
        assert_eq!(run2.x0[1][0], 2.0);

        let mut alt = case1(3);
        alt.run.initial_condition = InitialCondition::HangingAlternating;
        let run3 = alt.build().unwrap();
        assert_eq!(run3.x0[0][0], -1.0);
        assert_eq!(run3.x0[1][0], 1.0);
        assert_eq!(run3.x0[2][0], -1.0);
    }
}
