//! Finite-horizon optimal control by single shooting.
//!
//! Decision variables are the inputs only; states come from rolling out the
//! model. Inputs are kept in `𝕌` by projection, state constraints enter
//! through the penalty `μ·Σ_{j=1..N} dist²(x̄(j), 𝕏)`. Gradients are
//! assembled by a backward (adjoint) sweep over central-difference Jacobians
//! of `f`, which is the chain rule applied to the finite-difference
//! derivative of the rollout.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::approximator::ValueApproximator;
use crate::models::{linearize_with_step, quadform, SystemModel, FD_STEP};
use crate::optim::{self, fd_gradient};
use crate::value_iteration::{policy_unchecked, InnerMinConfig};
use crate::{Error, Matrix, Result, Vector};

#[derive(Debug, Clone)]
pub enum TerminalCost {
    None,
    Approximator(ValueApproximator),
    /// `xᵀPx` with the LQR gain `K` used for warm starts.
    Quadratic {
        p: Matrix,
        k: Matrix,
    },
}

impl TerminalCost {
    pub fn value(&self, x: &Vector) -> f64 {
        match self {
            TerminalCost::None => 0.0,
            TerminalCost::Approximator(v) => v.eval(x.as_slice()),
            TerminalCost::Quadratic { p, .. } => quadform(p, x),
        }
    }

    fn gradient(&self, x: &Vector, h: f64) -> Option<Vector> {
        match self {
            TerminalCost::None => Some(Vector::zeros(x.len())),
            TerminalCost::Approximator(v) => {
                fd_gradient(&|y: &[f64]| v.eval(y), x.as_slice(), h).map(Vector::from_vec)
            }
            TerminalCost::Quadratic { p, .. } => Some((p + p.transpose()) * x),
        }
    }

    fn state_dim(&self) -> Option<usize> {
        match self {
            TerminalCost::None => None,
            TerminalCost::Approximator(v) => Some(v.state_dim()),
            TerminalCost::Quadratic { p, .. } => Some(p.nrows()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcpSettings {
    pub state_penalty_weight: f64,
    pub max_iterations: usize,
    /// Stop at projected-gradient norm `≤ tolerance·(1 + |J|)`.
    pub tolerance: f64,
    pub fd_step: f64,
    pub feasibility_tolerance: f64,
}

impl Default for OcpSettings {
    fn default() -> Self {
        Self {
            state_penalty_weight: 1e4,
            max_iterations: 2000,
            tolerance: 1e-7,
            fd_step: FD_STEP,
            feasibility_tolerance: 1e-6,
        }
    }
}

pub struct OcpProblem<'a> {
    pub model: &'a dyn SystemModel,
    pub horizon: usize,
    pub terminal: &'a TerminalCost,
    pub x0: Vector,
    pub settings: OcpSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcpSolution {
    #[serde(with = "crate::value_iteration::vectors")]
    pub u_traj: Vec<Vector>,
    #[serde(with = "crate::value_iteration::vectors")]
    pub x_traj: Vec<Vector>,
    /// `V_N`: stage costs plus terminal cost, penalty excluded.
    pub value: f64,
    pub feasible: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

#[derive(Serialize)]
struct SolutionSummary {
    #[serde(rename = "V_N")]
    value: f64,
    feasible: bool,
    iterations: usize,
    grad_norm: f64,
    converged: bool,
}

struct Rollout {
    states: Vec<Vector>,
    inputs: Vec<Vector>,
}

struct Shooting<'a> {
    model: &'a dyn SystemModel,
    terminal: &'a TerminalCost,
    x0: &'a Vector,
    horizon: usize,
    mu: f64,
    h: f64,
}

impl Shooting<'_> {
    fn unflatten(&self, u: &[f64]) -> Vec<Vector> {
        u.chunks(self.model.input_dim())
            .map(Vector::from_column_slice)
            .collect()
    }

    fn rollout(&self, u: &[f64]) -> std::result::Result<Rollout, usize> {
        let inputs = self.unflatten(u);
        let mut states = Vec::with_capacity(self.horizon + 1);
        states.push(self.x0.clone());
        for (j, uj) in inputs.iter().enumerate() {
            let next = self.model.dynamics(&states[j], uj).map_err(|_| j)?;
            if next.iter().any(|v| !v.is_finite()) {
                return Err(j);
            }
            states.push(next);
        }
        Ok(Rollout { states, inputs })
    }

    fn cost(&self, r: &Rollout) -> f64 {
        let stage: f64 = r
            .inputs
            .iter()
            .zip(&r.states)
            .map(|(u, x)| self.model.state_cost(x) + quadform(self.model.input_weight(), u))
            .sum();
        stage + self.terminal.value(&r.states[self.horizon])
    }

    fn penalty(&self, r: &Rollout) -> f64 {
        let xb = self.model.state_box();
        self.mu
            * r.states[1..]
                .iter()
                .map(|x| xb.dist_sq(x.as_slice()))
                .sum::<f64>()
    }

    fn objective(&self, u: &[f64]) -> f64 {
        match self.rollout(u) {
            Ok(r) => {
                let j = self.cost(&r) + self.penalty(&r);
                if j.is_finite() {
                    j
                } else {
                    f64::INFINITY
                }
            }
            Err(_) => f64::INFINITY,
        }
    }

    fn state_cost_gradient(&self, x: &Vector) -> Option<Vector> {
        match self.model.quadratic_state_weight() {
            Some(q) => Some((q + q.transpose()) * x),
            None => fd_gradient(
                &|y: &[f64]| self.model.state_cost(&Vector::from_column_slice(y)),
                x.as_slice(),
                self.h,
            )
            .map(Vector::from_vec),
        }
    }

    fn penalty_gradient(&self, x: &Vector) -> Vector {
        let proj = self.model.state_box().project(x);
        (x - proj) * (2.0 * self.mu)
    }

    fn gradient(&self, u: &[f64]) -> Option<Vec<f64>> {
        let r = self.rollout(u).ok()?;
        let n = self.horizon;
        let r_sym = self.model.input_weight() + self.model.input_weight().transpose();
        let mut lambda =
            self.terminal.gradient(&r.states[n], self.h)? + self.penalty_gradient(&r.states[n]);
        let mut grad = vec![0.0; u.len()];
        let m = self.model.input_dim();
        for k in (0..n).rev() {
            let (a, b) =
                linearize_with_step(self.model, &r.states[k], &r.inputs[k], self.h).ok()?;
            let gu = &r_sym * &r.inputs[k] + b.transpose() * &lambda;
            grad[k * m..(k + 1) * m].copy_from_slice(gu.as_slice());
            let mut next = self.state_cost_gradient(&r.states[k])? + a.transpose() * &lambda;
            if k >= 1 {
                next += self.penalty_gradient(&r.states[k]);
            }
            lambda = next;
        }
        grad.iter().all(|g| g.is_finite()).then_some(grad)
    }
}

/// Minimizes `Σ l(x̄(j), ū(j)) + V_f(x̄(N)) + μ·Σ dist²(x̄(j+1), 𝕏)` over
/// `ū ∈ 𝕌^N`, starting from `warm_start` (zeros when `None`).
pub fn solve_ocp(problem: &OcpProblem<'_>, warm_start: Option<&[Vector]>) -> Result<OcpSolution> {
    let model = problem.model;
    let (n, m) = (model.state_dim(), model.input_dim());
    if problem.horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    if problem.x0.len() != n {
        return Err(Error::dim("x0", n, problem.x0.len()));
    }
    if problem.x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("x0 must be finite".into()));
    }
    if let Some(d) = problem.terminal.state_dim() {
        if d != n {
            return Err(Error::dim("terminal cost", n, d));
        }
    }
    let mut u0 = vec![0.0; problem.horizon * m];
    if let Some(ws) = warm_start {
        if ws.len() != problem.horizon {
            return Err(Error::dim("warm start length", problem.horizon, ws.len()));
        }
        for (j, uj) in ws.iter().enumerate() {
            if uj.len() != m {
                return Err(Error::dim("warm start input", m, uj.len()));
            }
            u0[j * m..(j + 1) * m].copy_from_slice(uj.as_slice());
        }
    }
    let ub = model.input_box();
    let project = |u: &mut [f64]| {
        for c in u.chunks_mut(m) {
            ub.project_in_place(c);
        }
    };
    project(&mut u0);

    let s = &problem.settings;
    let sh = Shooting {
        model,
        terminal: problem.terminal,
        x0: &problem.x0,
        horizon: problem.horizon,
        mu: s.state_penalty_weight,
        h: s.fd_step,
    };
    if let Err(step) = sh.rollout(&u0) {
        return Err(Error::RolloutDiverged { step });
    }
    let out = optim::minimize(
        &u0,
        project,
        |u| sh.objective(u),
        |u| sh.gradient(u),
        &optim::Options {
            max_iterations: s.max_iterations,
            abs_tol: s.tolerance,
            rel_tol: s.tolerance,
        },
    );
    let r = sh
        .rollout(&out.x)
        .map_err(|step| Error::RolloutDiverged { step })?;
    let value = sh.cost(&r);
    let feasible = r.states.iter().all(|x| {
        model
            .state_box()
            .contains(x.as_slice(), s.feasibility_tolerance)
    }) && r.inputs.iter().all(|u| ub.contains(u.as_slice(), 0.0));
    Ok(OcpSolution {
        u_traj: r.inputs,
        x_traj: r.states,
        value,
        feasible,
        iterations: out.iterations,
        grad_norm: out.grad_norm,
        converged: out.converged,
    })
}

/// Objective of an input sequence without optimizing: `V_N` plus penalty.
pub fn evaluate_inputs(problem: &OcpProblem<'_>, inputs: &[Vector]) -> Result<(f64, f64)> {
    let sh = Shooting {
        model: problem.model,
        terminal: problem.terminal,
        x0: &problem.x0,
        horizon: inputs.len(),
        mu: problem.settings.state_penalty_weight,
        h: problem.settings.fd_step,
    };
    let flat: Vec<f64> = inputs.iter().flat_map(|u| u.iter().copied()).collect();
    let r = sh
        .rollout(&flat)
        .map_err(|step| Error::RolloutDiverged { step })?;
    Ok((sh.cost(&r), sh.penalty(&r)))
}

/// Shifted candidate `(ū*(1), …, ū*(N−1), u_N)` for the next step.
///
/// `u_N` is `hⁱ(x̄*(N))` for an approximator terminal cost, `−K·x̄*(N)` for
/// a quadratic one and `0` otherwise, projected onto `𝕌`.
pub fn shift_warm_start(
    prev: &OcpSolution,
    model: &dyn SystemModel,
    terminal: &TerminalCost,
    inner: &InnerMinConfig,
) -> Vec<Vector> {
    let m = model.input_dim();
    let Some(x_n) = prev.x_traj.last() else {
        return Vec::new();
    };
    let tail = match terminal {
        TerminalCost::None => Vector::zeros(m),
        TerminalCost::Approximator(v) => {
            policy_unchecked(v, model, x_n, inner).unwrap_or_else(|e| {
                log::warn!("terminal policy failed for the warm start ({e}); appending zero input");
                Vector::zeros(m)
            })
        }
        TerminalCost::Quadratic { k, .. } => model.input_box().project(&(-k * x_n)),
    };
    let mut out: Vec<Vector> = prev.u_traj.iter().skip(1).cloned().collect();
    out.push(tail);
    out
}

/// Inputs from rolling out the terminal cost's own policy for `horizon`
/// steps from `x0`: `hⁱ` for an approximator, saturated `−Kx` for a quadratic
/// terminal, zeros otherwise.
pub fn policy_initial_guess(
    model: &dyn SystemModel,
    terminal: &TerminalCost,
    x0: &Vector,
    horizon: usize,
    inner: &InnerMinConfig,
) -> Vec<Vector> {
    let m = model.input_dim();
    let mut x = x0.clone();
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let u = match terminal {
            TerminalCost::None => Vector::zeros(m),
            TerminalCost::Approximator(v) => {
                policy_unchecked(v, model, &x, inner).unwrap_or_else(|_| Vector::zeros(m))
            }
            TerminalCost::Quadratic { k, .. } => model.input_box().project(&(-k * &x)),
        };
        match model.step(&x, &u) {
            Ok(next) if next.iter().all(|v| v.is_finite()) => x = next,
            _ => {
                out.resize(horizon, Vector::zeros(m));
                return out;
            }
        }
        out.push(u);
    }
    out
}

impl OcpSolution {
    pub fn horizon(&self) -> usize {
        self.u_traj.len()
    }

    pub fn terminal_state(&self) -> &Vector {
        &self.x_traj[self.x_traj.len() - 1]
    }

    pub fn write_csv<W: Write>(&self, model: &dyn SystemModel, w: W) -> Result<()> {
        let (n, m) = (model.state_dim(), model.input_dim());
        let mut csv = csv::Writer::from_writer(w);
        let mut header = vec!["j".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        header.push("stage_cost".into());
        csv.write_record(&header)?;
        for (j, x) in self.x_traj.iter().enumerate() {
            let mut row = vec![j.to_string()];
            row.extend(x.iter().map(f64::to_string));
            match self.u_traj.get(j) {
                Some(u) => {
                    row.extend(u.iter().map(f64::to_string));
                    row.push(model.stage_cost(x, u)?.to_string());
                }
                None => row.extend(std::iter::repeat_n(String::new(), m + 1)),
            }
            csv.write_record(&row)?;
        }
        csv.flush()?;
        Ok(())
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&SolutionSummary {
            value: self.value,
            feasible: self.feasible,
            iterations: self.iterations,
            grad_norm: self.grad_norm,
            converged: self.converged,
        })?)
    }
}
