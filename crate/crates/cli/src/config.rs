use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use vimpc::closed_loop::Controller;
use vimpc::horizon_cert::EpsilonConfig;
use vimpc::models::{BoxSet, LinearModel, OrbitalRendezvous, RadiusForm, SystemModel};
use vimpc::ocp_solver::OcpSettings;
use vimpc::value_iteration::{InnerMinConfig, ViConfig};
use vimpc::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; overrides `vi.rng_seed` and `certificate.epsilon.seed`.
    pub seed: u64,
    pub model: ModelConfig,
    /// Monomial degrees of the value-function basis.
    pub basis_degrees: Vec<u32>,
    pub vi: ViConfig,
    pub inner: InnerMinConfig,
    pub certificate: CertConfig,
    pub mpc: MpcConfig,
    pub simulate: SimulateConfig,
    pub compare: CompareConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            basis_degrees: vec![2, 3],
            vi: ViConfig::default(),
            inner: InnerMinConfig::default(),
            certificate: CertConfig::default(),
            mpc: MpcConfig::default(),
            simulate: SimulateConfig::default(),
            compare: CompareConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelConfig {
    Orbital(OrbitalConfig),
    Linear(LinearConfig),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Orbital(OrbitalConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrbitalConfig {
    pub dt: f64,
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    pub state_box: BoxSet,
    pub input_box: BoxSet,
    pub radius_form: RadiusForm,
}

impl Default for OrbitalConfig {
    fn default() -> Self {
        Self {
            dt: 0.05,
            q_diag: vec![50.0; 4],
            r_diag: vec![1.0; 2],
            state_box: BoxSet::symmetric(4, 0.5).unwrap(),
            input_box: BoxSet::symmetric(2, 2.0).unwrap(),
            radius_form: RadiusForm::Corrected,
        }
    }
}

/// `x⁺ = Ax + Bu`; matrices are given row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearConfig {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub state_box: BoxSet,
    pub input_box: BoxSet,
}

fn matrix(rows: &[Vec<f64>], name: &str) -> anyhow::Result<Matrix> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        bail!("model.{name} must be a nonempty rectangular matrix");
    }
    Ok(Matrix::from_row_iterator(
        nrows,
        ncols,
        rows.iter().flatten().copied(),
    ))
}

impl ModelConfig {
    pub fn build(&self) -> anyhow::Result<Box<dyn SystemModel>> {
        Ok(match self {
            ModelConfig::Orbital(c) => Box::new(
                OrbitalRendezvous::new(
                    c.dt,
                    &c.q_diag,
                    &c.r_diag,
                    c.state_box.clone(),
                    c.input_box.clone(),
                    c.radius_form,
                )
                .context("model")?,
            ),
            ModelConfig::Linear(c) => Box::new(
                LinearModel::new(
                    matrix(&c.a, "a")?,
                    matrix(&c.b, "b")?,
                    matrix(&c.q, "q")?,
                    matrix(&c.r, "r")?,
                    c.state_box.clone(),
                    c.input_box.clone(),
                )
                .context("model")?,
            ),
        })
    }
}

/// Explicit values that replace the corresponding estimates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertOverrides {
    pub gamma: Option<f64>,
    pub epsilon: Option<f64>,
    pub v_bar: Option<f64>,
    pub c_e: Option<f64>,
    pub c_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertConfig {
    /// Rollout length for the `γ` and `V̄` estimates.
    pub n_roll: usize,
    /// Samples for the `γ` estimate, drawn from the approximation domain.
    pub gamma_samples: usize,
    /// States whose rollout cost defines `V̄`; empty means `simulate.x0`.
    pub v_bar_states: Vec<Vec<f64>>,
    pub epsilon: EpsilonConfig,
    /// Grid points per axis for the region radius; 0 skips it.
    pub region_grid_density: usize,
    pub overrides: CertOverrides,
    pub sweep: bool,
    pub sweep_points: usize,
    pub sweep_range: [f64; 2],
}

impl Default for CertConfig {
    fn default() -> Self {
        Self {
            n_roll: 50,
            gamma_samples: 1000,
            v_bar_states: Vec::new(),
            epsilon: EpsilonConfig::default(),
            region_grid_density: 5,
            overrides: CertOverrides::default(),
            sweep: true,
            sweep_points: 25,
            sweep_range: [0.01, 0.97],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub controller: Controller,
    pub horizon: usize,
    pub warm_start: bool,
    pub ocp: OcpSettings,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            controller: Controller::AdpMpc,
            horizon: 10,
            warm_start: true,
            ocp: OcpSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub x0: Vec<f64>,
    pub steps: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            x0: vec![0.1, 0.1, 0.0, 0.0],
            steps: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub label: String,
    pub controller: Controller,
    #[serde(default)]
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub runs: Vec<RunSpec>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        let spec = |label: &str, controller, horizon| RunSpec {
            label: label.into(),
            controller,
            horizon,
        };
        Self {
            runs: vec![
                spec("adp_n10", Controller::AdpMpc, 10),
                spec("no_terminal_n10", Controller::NoTerminal, 10),
                spec("no_terminal_n45", Controller::NoTerminal, 45),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
    pub plots: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: "out".into(),
            plots: true,
        }
    }
}

/// Parses a config, reporting the key path of the first offending entry.
pub fn parse(text: &str) -> anyhow::Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        anyhow::anyhow!("invalid config at `{path}`: {}", e.into_inner())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(parse(&text).unwrap(), cfg);
    }

    #[test]
    fn empty_object_is_default() {
        assert_eq!(parse("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_names_path() {
        let err = parse(r#"{"vi": {"n_trian": 3}}"#).unwrap_err().to_string();
        assert!(err.contains("vi.n_trian") || err.contains("`vi`"), "{err}");
        assert!(err.contains("n_trian"), "{err}");
    }

    #[test]
    fn linear_model_builds() {
        let cfg = parse(
            r#"{"model": {"type": "linear", "a": [[0.5]], "b": [[1.0]], "q": [[1.0]], "r": [[1.0]],
                "state_box": {"lower": [-10.0], "upper": [10.0]},
                "input_box": {"lower": [-2.0], "upper": [2.0]}}}"#,
        )
        .unwrap();
        let m = cfg.model.build().unwrap();
        assert_eq!((m.state_dim(), m.input_dim()), (1, 1));
    }
}
