//! Receding-horizon simulation and closed-loop diagnostics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::approximator::ValueApproximator;
use crate::horizon_cert::HorizonCertificate;
use crate::models::{LqrBaseline, SystemModel};
use crate::ocp_solver::{
    policy_initial_guess, shift_warm_start, solve_ocp, OcpProblem, OcpSettings, OcpSolution,
    TerminalCost,
};
use crate::value_iteration::{policy_unchecked, InnerMinConfig};
use crate::{Error, Result, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Controller {
    /// MPC with the learned terminal cost.
    AdpMpc,
    NoTerminal,
    /// MPC with the LQR value `xᵀPx` as terminal cost.
    LqrTerminal,
    /// The extracted policy applied directly.
    RawPolicy,
}

impl Controller {
    pub fn label(self) -> &'static str {
        match self {
            Controller::AdpMpc => "ADP_MPC",
            Controller::NoTerminal => "NO_TERMINAL",
            Controller::LqrTerminal => "LQR_TERMINAL",
            Controller::RawPolicy => "RAW_POLICY",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub controller: Controller,
    /// Ignored for [`Controller::RawPolicy`].
    pub horizon: usize,
    pub x0: Vec<f64>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_true")]
    pub warm_start: bool,
    #[serde(default)]
    pub ocp: OcpSettings,
    #[serde(default)]
    pub inner: InnerMinConfig,
}

fn default_steps() -> usize {
    100
}

fn default_true() -> bool {
    true
}

impl SimConfig {
    pub fn new(controller: Controller, horizon: usize, x0: Vec<f64>) -> Self {
        Self {
            controller,
            horizon,
            x0,
            steps: default_steps(),
            warm_start: true,
            ocp: OcpSettings::default(),
            inner: InnerMinConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Artifacts<'a> {
    pub approximator: Option<&'a ValueApproximator>,
    pub certificate: Option<&'a HorizonCertificate>,
    pub lqr: Option<&'a LqrBaseline>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopTrace {
    pub controller: Controller,
    pub horizon: usize,
    #[serde(with = "crate::value_iteration::vectors")]
    pub states: Vec<Vector>,
    #[serde(with = "crate::value_iteration::vectors")]
    pub inputs: Vec<Vector>,
    pub stage_costs: Vec<f64>,
    /// `V_N(x(k))`; empty for the raw policy.
    pub ocp_values: Vec<f64>,
    /// Solver iterations per step; empty for the raw policy.
    pub ocp_iterations: Vec<usize>,
    pub feasible: Vec<bool>,
    /// Predicted terminal states `x̄*(N; x(k))`; empty for the raw policy.
    #[serde(with = "crate::value_iteration::vectors")]
    pub terminal_states: Vec<Vector>,
    /// `l(x̄*(N; x(k)), 0)`.
    pub terminal_stage_costs: Vec<f64>,
    /// `ε` used for the membership flags, if a certificate was supplied.
    pub epsilon: Option<f64>,
    pub terminal_in_b_eps: Vec<bool>,
}

impl ClosedLoopTrace {
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    pub fn x0(&self) -> &Vector {
        &self.states[0]
    }

    pub fn final_state(&self) -> &Vector {
        &self.states[self.states.len() - 1]
    }

    pub fn all_feasible(&self) -> bool {
        self.feasible.iter().all(|f| *f)
    }

    pub fn first_step_in_b_eps(&self) -> Option<usize> {
        self.terminal_in_b_eps.iter().position(|b| *b)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let n = self.states[0].len();
        let m = self.inputs.first().map_or(0, |u| u.len());
        let mut csv = csv::Writer::from_writer(w);
        let mut header = vec!["k".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        for h in ["stage_cost", "V_N", "feasible", "terminal_in_B_eps"] {
            header.push(h.into());
        }
        csv.write_record(&header)?;
        let opt = |v: Option<String>| v.unwrap_or_default();
        for (k, x) in self.states.iter().enumerate() {
            let mut row = vec![k.to_string()];
            row.extend(x.iter().map(f64::to_string));
            match self.inputs.get(k) {
                Some(u) => {
                    row.extend(u.iter().map(f64::to_string));
                    row.push(self.stage_costs[k].to_string());
                    row.push(opt(self.ocp_values.get(k).map(f64::to_string)));
                    row.push(self.feasible[k].to_string());
                    row.push(opt(self.terminal_in_b_eps.get(k).map(bool::to_string)));
                }
                None => row.extend(std::iter::repeat_n(String::new(), m + 4)),
            }
            csv.write_record(&row)?;
        }
        csv.flush()?;
        Ok(())
    }
}

fn terminal_for(controller: Controller, art: &Artifacts<'_>) -> Result<TerminalCost> {
    Ok(match controller {
        Controller::AdpMpc => TerminalCost::Approximator(
            art.approximator
                .ok_or(Error::MissingArtifact("approximator"))?
                .clone(),
        ),
        Controller::NoTerminal => TerminalCost::None,
        Controller::LqrTerminal => {
            let lqr = art.lqr.ok_or(Error::MissingArtifact("LQR baseline"))?;
            TerminalCost::Quadratic {
                p: lqr.p.clone(),
                k: lqr.k.clone(),
            }
        }
        Controller::RawPolicy => TerminalCost::None,
    })
}

/// Simulates `cfg.steps` steps of the chosen controller from `cfg.x0`.
///
/// Infeasible OCP steps are flagged and the best-found input is applied.
pub fn run_closed_loop(
    model: &dyn SystemModel,
    cfg: &SimConfig,
    art: &Artifacts<'_>,
) -> Result<ClosedLoopTrace> {
    let n = model.state_dim();
    if cfg.x0.len() != n {
        return Err(Error::dim("x0", n, cfg.x0.len()));
    }
    if cfg.steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    let raw = cfg.controller == Controller::RawPolicy;
    if !raw && cfg.horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    let approx = if raw {
        Some(
            art.approximator
                .ok_or(Error::MissingArtifact("approximator"))?,
        )
    } else {
        None
    };
    let terminal = terminal_for(cfg.controller, art)?;
    let epsilon = art.certificate.map(|c| c.epsilon);

    let mut trace = ClosedLoopTrace {
        controller: cfg.controller,
        horizon: if raw { 0 } else { cfg.horizon },
        states: vec![Vector::from_vec(cfg.x0.clone())],
        inputs: Vec::with_capacity(cfg.steps),
        stage_costs: Vec::with_capacity(cfg.steps),
        ocp_values: Vec::new(),
        ocp_iterations: Vec::new(),
        feasible: Vec::with_capacity(cfg.steps),
        terminal_states: Vec::new(),
        terminal_stage_costs: Vec::new(),
        epsilon,
        terminal_in_b_eps: Vec::new(),
    };
    let mut prev: Option<OcpSolution> = None;
    for k in 0..cfg.steps {
        let x = trace.states[k].clone();
        let u = if let Some(v) = approx {
            let u = policy_unchecked(v, model, &x, &cfg.inner).map_err(|e| Error::at_step(k, e))?;
            trace.feasible.push(
                model
                    .state_box()
                    .contains(x.as_slice(), cfg.ocp.feasibility_tolerance)
                    && model.input_box().contains(u.as_slice(), 0.0),
            );
            u
        } else {
            let problem = OcpProblem {
                model,
                horizon: cfg.horizon,
                terminal: &terminal,
                x0: x.clone(),
                settings: cfg.ocp.clone(),
            };
            let ws = match (&prev, cfg.warm_start) {
                (Some(p), true) => Some(shift_warm_start(p, model, &terminal, &cfg.inner)),
                (None, true) => Some(policy_initial_guess(
                    model,
                    &terminal,
                    &x,
                    cfg.horizon,
                    &cfg.inner,
                )),
                _ => None,
            };
            let sol = solve_ocp(&problem, ws.as_deref()).map_err(|e| Error::at_step(k, e))?;
            if !sol.feasible {
                log::warn!(
                    "{} step {k}: OCP solution violates the state constraints",
                    cfg.controller.label()
                );
            }
            let x_n = sol.terminal_state().clone();
            let l_n = model.state_cost(&x_n);
            trace.ocp_values.push(sol.value);
            trace.ocp_iterations.push(sol.iterations);
            trace.feasible.push(sol.feasible);
            trace.terminal_stage_costs.push(l_n);
            if let Some(eps) = epsilon {
                trace.terminal_in_b_eps.push(l_n <= eps);
            }
            trace.terminal_states.push(x_n);
            let u = sol.u_traj[0].clone();
            prev = Some(sol);
            u
        };
        let l = model.stage_cost(&x, &u)?;
        let next = model.step(&x, &u).map_err(|e| Error::at_step(k, e))?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::at_step(k, Error::RolloutDiverged { step: 0 }));
        }
        trace.stage_costs.push(l);
        trace.inputs.push(u);
        trace.states.push(next);
    }
    Ok(trace)
}

/// `Σ_k l(x(k), u(k))` over the trace.
pub fn performance_sum(trace: &ClosedLoopTrace) -> f64 {
    trace.stage_costs.iter().sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueDecreaseViolation {
    pub step: usize,
    /// `V_N(x(k+1)) − V_N(x(k))` minus the allowed bound.
    pub excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueDecreaseReport {
    pub steps_checked: usize,
    pub violations: Vec<ValueDecreaseViolation>,
}

impl ValueDecreaseReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks `V_N(x(k+1)) − V_N(x(k)) ≤ −l(x(k),u(k)) + c_N·ρ_γ^{N−N_0}·γ·l(x(k),u(k))`
/// up to a solver slack of `1e-5·(1 + V_N(x(k)))`.
pub fn check_value_decrease(
    trace: &ClosedLoopTrace,
    cert: Option<&HorizonCertificate>,
) -> Result<ValueDecreaseReport> {
    let cert = cert.ok_or(Error::MissingArtifact("certificate"))?;
    if trace.controller == Controller::RawPolicy {
        return Err(Error::InvalidArgument(
            "value decrease needs an MPC trace".into(),
        ));
    }
    let growth = cert.decrease_slack_factor(trace.horizon);
    let mut violations = Vec::new();
    let v = &trace.ocp_values;
    for k in 0..v.len().saturating_sub(1) {
        let l = trace.stage_costs[k];
        let bound = -l + growth * l + 1e-5 * (1.0 + v[k]);
        let excess = v[k + 1] - v[k] - bound;
        if excess > 0.0 {
            violations.push(ValueDecreaseViolation { step: k, excess });
        }
    }
    Ok(ValueDecreaseReport {
        steps_checked: v.len().saturating_sub(1),
        violations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub controller: Controller,
    pub horizon: usize,
    pub performance: f64,
    pub final_norm: f64,
    pub max_violation: f64,
    pub first_step_in_b_eps: Option<usize>,
}

/// One summary row per trace; all traces must start from the same state.
pub fn compare_runs(
    model: &dyn SystemModel,
    traces: &[ClosedLoopTrace],
    labels: &[String],
) -> Result<Vec<ComparisonRow>> {
    if traces.len() != labels.len() {
        return Err(Error::InvalidArgument(
            "one label per trace required".into(),
        ));
    }
    if let Some(first) = traces.first() {
        if traces.iter().any(|t| t.x0() != first.x0()) {
            return Err(Error::InvalidArgument(
                "traces start from different initial states".into(),
            ));
        }
    }
    Ok(traces
        .iter()
        .zip(labels)
        .map(|(t, label)| {
            let sv = t
                .states
                .iter()
                .map(|x| model.state_box().violation(x.as_slice()));
            let uv = t
                .inputs
                .iter()
                .map(|u| model.input_box().violation(u.as_slice()));
            ComparisonRow {
                label: label.clone(),
                controller: t.controller,
                horizon: t.horizon,
                performance: performance_sum(t),
                final_norm: t.final_state().norm(),
                max_violation: sv.chain(uv).fold(0.0, f64::max),
                first_step_in_b_eps: t.first_step_in_b_eps(),
            }
        })
        .collect())
}

pub fn write_comparison_csv<W: Write>(rows: &[ComparisonRow], w: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record([
        "label",
        "controller",
        "horizon",
        "sum_stage_cost",
        "final_norm",
        "max_violation",
        "first_step_in_B_eps",
    ])?;
    for r in rows {
        csv.write_record([
            r.label.clone(),
            r.controller.label().to_string(),
            r.horizon.to_string(),
            r.performance.to_string(),
            r.final_norm.to_string(),
            r.max_violation.to_string(),
            r.first_step_in_b_eps
                .map(|k| k.to_string())
                .unwrap_or_default(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

pub const V_INFINITY_HORIZON: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VInfinityEstimate {
    pub value: f64,
    /// Stage cost at the last predicted step; small when the tail has converged.
    pub tail_stage_cost: f64,
    pub horizon: usize,
    pub feasible: bool,
}

/// Long-horizon estimate of the infinite-horizon optimal cost from `x0`:
/// the OCP value with no terminal cost.
pub fn estimate_v_infinity(
    model: &dyn SystemModel,
    x0: &Vector,
    horizon: usize,
    settings: &OcpSettings,
    warm_start: Option<&[Vector]>,
) -> Result<VInfinityEstimate> {
    let terminal = TerminalCost::None;
    let problem = OcpProblem {
        model,
        horizon,
        terminal: &terminal,
        x0: x0.clone(),
        settings: settings.clone(),
    };
    let sol = solve_ocp(&problem, warm_start)?;
    let last = horizon - 1;
    let tail = model.stage_cost(&sol.x_traj[last], &sol.u_traj[last])?;
    Ok(VInfinityEstimate {
        value: sol.value,
        tail_stage_cost: tail,
        horizon,
        feasible: sol.feasible,
    })
}
