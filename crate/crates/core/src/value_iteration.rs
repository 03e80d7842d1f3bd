//! Fitted value iteration `V̂ⁱ⁺¹(x) ≈ min_u l(x,u) + V̂ⁱ(f(x,u))` on sampled
//! states, with the relative residual and step-change constants `c_e`, `c_δ`
//! measured on an independent evaluation set.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approximator::{fit_weights_with_ridge, ValueApproximator, DEFAULT_RIDGE};
use crate::models::{BoxSet, SystemModel, FD_STEP};
use crate::optim::{self, fd_gradient};
use crate::{Error, Result, Vector};

/// Settings for the minimization over `u ∈ U` inside the Bellman operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InnerMinConfig {
    /// Origin plus `n_starts − 1` pseudo-random points of `U`.
    pub n_starts: usize,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    /// Seed of the start points; the same starts are used for every state.
    pub seed: u64,
}

impl Default for InnerMinConfig {
    fn default() -> Self {
        Self {
            n_starts: 5,
            max_iterations: 200,
            gradient_tolerance: 1e-9,
            seed: 0x5eed,
        }
    }
}

impl InnerMinConfig {
    fn validate(&self) -> Result<()> {
        if self.n_starts == 0 {
            return Err(Error::InvalidArgument(
                "inner.n_starts must be at least 1".into(),
            ));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument(
                "inner.max_iterations must be positive".into(),
            ));
        }
        Ok(())
    }

    fn start_points(&self, input_box: &BoxSet) -> Vec<Vector> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        std::iter::once(Vector::zeros(input_box.dim()))
            .chain((1..self.n_starts).map(|_| input_box.sample(&mut rng)))
            .collect()
    }
}

/// `min_{u ∈ U} l(x, u) + V̂(f(x, u))` and its minimizer.
///
/// Multistart projected gradient descent with central-difference gradients.
/// The value is not asserted nonnegative: `V̂` may dip below zero away from
/// its training data.
pub fn bellman_target(
    approx: &ValueApproximator,
    model: &dyn SystemModel,
    x: &Vector,
    cfg: &InnerMinConfig,
) -> Result<(f64, Vector)> {
    let m = model.input_dim();
    model.check_dims(x, &Vector::zeros(m))?;
    if approx.state_dim() != model.state_dim() {
        return Err(Error::dim(
            "approximator",
            model.state_dim(),
            approx.state_dim(),
        ));
    }
    cfg.validate()?;
    if !approx.domain().contains(x.as_slice(), 0.0) {
        log::warn!(
            "Bellman target requested outside the approximation domain at {:?}",
            x.as_slice()
        );
    }
    bellman_target_unchecked(approx, model, x, cfg)
}

fn bellman_target_unchecked(
    approx: &ValueApproximator,
    model: &dyn SystemModel,
    x: &Vector,
    cfg: &InnerMinConfig,
) -> Result<(f64, Vector)> {
    let input_box = model.input_box();
    let state_cost = model.state_cost(x);
    let r = model.input_weight();
    let objective = |u: &[f64]| -> f64 {
        let u = Vector::from_column_slice(u);
        match model.dynamics(x, &u) {
            Ok(next) => state_cost + u.dot(&(r * &u)) + approx.eval(next.as_slice()),
            Err(_) => f64::INFINITY,
        }
    };
    let opts = optim::Options {
        max_iterations: cfg.max_iterations,
        abs_tol: cfg.gradient_tolerance,
        rel_tol: 0.0,
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut any_finished = false;
    for start in cfg.start_points(input_box) {
        let out = optim::minimize(
            start.as_slice(),
            |u: &mut [f64]| input_box.project_in_place(u),
            objective,
            |u| fd_gradient(&objective, u, FD_STEP),
            &opts,
        );
        if !out.value.is_finite() {
            continue;
        }
        any_finished |= out.converged || out.stalled;
        if best.as_ref().is_none_or(|(v, _)| out.value < *v) {
            best = Some((out.value, out.x));
        }
    }
    match best {
        Some((value, u)) if any_finished => Ok((value, Vector::from_vec(u))),
        Some((value, u)) => Err(Error::InnerMinimizationFailed {
            best_value: value,
            best_input: u,
        }),
        None => Err(Error::InnerMinimizationFailed {
            best_value: f64::INFINITY,
            best_input: vec![0.0; model.input_dim()],
        }),
    }
}

/// The policy `hⁱ(x) = argmin_u l(x,u) + V̂ⁱ(f(x,u))`.
pub fn extract_policy(
    approx: &ValueApproximator,
    model: &dyn SystemModel,
    x: &Vector,
    inner: &InnerMinConfig,
) -> Result<Vector> {
    bellman_target(approx, model, x, inner).map(|(_, u)| u)
}

pub(crate) fn policy_unchecked(
    approx: &ValueApproximator,
    model: &dyn SystemModel,
    x: &Vector,
    inner: &InnerMinConfig,
) -> Result<Vector> {
    bellman_target_unchecked(approx, model, x, inner).map(|(_, u)| u)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViConfig {
    /// Approximation domain Ω.
    pub domain: BoxSet,
    pub n_train: usize,
    pub n_eval: usize,
    pub max_iterations: usize,
    /// Stop once `max |V̂ⁱ⁺¹ − V̂ⁱ| / max(l(x,0), η)` over the evaluation set
    /// falls to this value.
    pub target_c_delta: f64,
    /// η, the floor of the relative-error denominator.
    pub origin_guard: f64,
    pub rng_seed: u64,
    /// Draw fresh training states at every iteration instead of a fixed design.
    pub resample_each_iteration: bool,
    pub ridge: f64,
}

impl Default for ViConfig {
    fn default() -> Self {
        Self {
            domain: BoxSet::symmetric(4, 0.12).unwrap(),
            n_train: 80,
            n_eval: 1000,
            max_iterations: 500,
            target_c_delta: 0.01,
            origin_guard: 1e-8,
            rng_seed: 0,
            resample_each_iteration: false,
            ridge: DEFAULT_RIDGE,
        }
    }
}

impl ViConfig {
    pub fn validate(&self, model: &dyn SystemModel, features: usize) -> Result<()> {
        if self.domain.dim() != model.state_dim() {
            return Err(Error::dim(
                "vi.domain",
                model.state_dim(),
                self.domain.dim(),
            ));
        }
        if !self.domain.is_subset_of(model.state_box()) {
            return Err(Error::InvalidArgument(
                "vi.domain must lie inside the state constraint box".into(),
            ));
        }
        if !(self.origin_guard > 0.0) {
            return Err(Error::InvalidArgument(
                "vi.origin_guard must be positive".into(),
            ));
        }
        if self.n_train < features {
            return Err(Error::InvalidArgument(format!(
                "vi.n_train = {} must be at least the feature count {features}",
                self.n_train
            )));
        }
        if self.n_eval == 0 || self.max_iterations == 0 {
            return Err(Error::InvalidArgument(
                "vi.n_eval and vi.max_iterations must be positive".into(),
            ));
        }
        if !(self.target_c_delta >= 0.0) {
            return Err(Error::InvalidArgument(
                "vi.target_c_delta must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub c_e_rel_max: f64,
    pub c_delta_rel_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViResult {
    /// The final iterate `V̂ⁱ`; its policy `hⁱ` is the one the measured
    /// constants certify.
    pub approximator: ValueApproximator,
    /// `V̂ⁱ⁺¹`, fitted to the Bellman targets of `V̂ⁱ`.
    pub successor: ValueApproximator,
    pub iterations: usize,
    pub converged: bool,
    /// Running maximum over all iterations of the relative Bellman residual.
    pub c_e_measured: f64,
    /// Relative iterate change at termination.
    pub c_delta_measured: f64,
    pub history: Vec<IterationRecord>,
    #[serde(with = "vectors")]
    pub train_states: Vec<Vector>,
    #[serde(with = "vectors")]
    pub eval_states: Vec<Vector>,
}

impl ViResult {
    pub fn write_history_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["iteration", "c_e_rel_max", "c_delta_rel_max"])?;
        for rec in &self.history {
            csv.write_record([
                rec.iteration.to_string(),
                rec.c_e_rel_max.to_string(),
                rec.c_delta_rel_max.to_string(),
            ])?;
        }
        csv.flush()?;
        Ok(())
    }
}

pub(crate) mod vectors {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::Vector;

    pub fn serialize<S: Serializer>(v: &[Vector], s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<&[f64]> = v.iter().map(|x| x.as_slice()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vector>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        Ok(rows.into_iter().map(Vector::from_vec).collect())
    }
}

fn sample_states(domain: &BoxSet, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vector> {
    (0..count).map(|_| domain.sample(rng)).collect()
}

fn targets(
    approx: &ValueApproximator,
    model: &dyn SystemModel,
    states: &[Vector],
    inner: &InnerMinConfig,
) -> Result<Vec<f64>> {
    states
        .par_iter()
        .map(|x| bellman_target_unchecked(approx, model, x, inner).map(|(v, _)| v))
        .collect()
}

/// Approximate value iteration from `v0` until the relative iterate change on
/// the evaluation set drops to `cfg.target_c_delta`.
///
/// Hitting `max_iterations` is not an error: the result comes back with
/// `converged = false` and its history intact.
pub fn vi_run(
    model: &dyn SystemModel,
    cfg: &ViConfig,
    inner: &InnerMinConfig,
    v0: &ValueApproximator,
) -> Result<ViResult> {
    if v0.state_dim() != model.state_dim() {
        return Err(Error::dim(
            "initial approximator",
            model.state_dim(),
            v0.state_dim(),
        ));
    }
    cfg.validate(model, v0.basis().len())?;
    inner.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut train_states = sample_states(&cfg.domain, cfg.n_train, &mut rng);
    let eval_states = sample_states(&cfg.domain, cfg.n_eval, &mut rng);
    let eta = cfg.origin_guard;
    let eval_scale: Vec<f64> = eval_states
        .iter()
        .map(|x| model.state_cost(x).max(eta))
        .collect();

    let mut current =
        ValueApproximator::new(v0.basis().clone(), v0.weights().clone(), cfg.domain.clone())?;
    let mut history = Vec::new();
    let mut c_e = 0.0f64;

    for i in 0..cfg.max_iterations {
        if i > 0 && cfg.resample_each_iteration {
            train_states = sample_states(&cfg.domain, cfg.n_train, &mut rng);
        }
        let train_targets = targets(&current, model, &train_states, inner)?;
        let w = fit_weights_with_ridge(current.basis(), &train_states, &train_targets, cfg.ridge)?;
        let next = current.with_weights(w)?;

        let train_residual = train_states
            .iter()
            .zip(&train_targets)
            .map(|(x, t)| (next.eval(x.as_slice()) - t).abs() / model.state_cost(x).max(eta))
            .fold(0.0, f64::max);
        let eval_targets = targets(&current, model, &eval_states, inner)?;
        let mut eval_residual = 0.0f64;
        let mut change = 0.0f64;
        for ((x, t), scale) in eval_states.iter().zip(&eval_targets).zip(&eval_scale) {
            let v_next = next.eval(x.as_slice());
            eval_residual = eval_residual.max((v_next - t).abs() / scale);
            change = change.max((v_next - current.eval(x.as_slice())).abs() / scale);
        }
        let c_e_i = train_residual.max(eval_residual);
        c_e = c_e.max(c_e_i);
        history.push(IterationRecord {
            iteration: i,
            c_e_rel_max: c_e_i,
            c_delta_rel_max: change,
        });
        log::debug!("vi iteration {i}: c_e = {c_e_i:.3e}, c_delta = {change:.3e}");

        let done = change <= cfg.target_c_delta;
        if done || i + 1 == cfg.max_iterations {
            return Ok(ViResult {
                approximator: current,
                successor: next,
                iterations: history.len(),
                converged: done,
                c_e_measured: c_e,
                c_delta_measured: change,
                history,
                train_states,
                eval_states,
            });
        }
        current = next;
    }
    unreachable!("max_iterations is validated positive")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecreaseViolation {
    pub index: usize,
    pub state: Vec<f64>,
    /// `ΔV̂ − (c_e + c_δ − 1)·l(x,0) − τ`; positive means violated.
    pub margin: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecreaseReport {
    /// Whether `c_e + c_δ < 1`.
    pub hypothesis_holds: bool,
    pub samples_checked: usize,
    pub violations: Vec<DecreaseViolation>,
    /// Largest margin over all samples (≤ 0 when every sample passes).
    pub worst_margin: f64,
}

impl DecreaseReport {
    pub fn passed(&self) -> bool {
        self.hypothesis_holds && self.violations.is_empty()
    }
}

/// Checks `V̂(f(x, h(x))) − V̂(x) ≤ (c_e + c_δ − 1)·l(x, 0) + τ` at each
/// sample, with `τ = 1e-9·(1 + |V̂(x)|)`. Violations are reported, not raised.
pub fn check_decrease(
    approx: &ValueApproximator,
    model: &dyn SystemModel,
    samples: &[Vector],
    c_e: f64,
    c_delta: f64,
    inner: &InnerMinConfig,
) -> Result<DecreaseReport> {
    let factor = c_e + c_delta - 1.0;
    let margins: Vec<f64> = samples
        .par_iter()
        .map(|x| {
            let (_, u) = bellman_target(approx, model, x, inner)?;
            let next = model.step(x, &u)?;
            let v = approx.eval(x.as_slice());
            let tau = 1e-9 * (1.0 + v.abs());
            Ok(approx.eval(next.as_slice()) - v - factor * model.state_cost(x) - tau)
        })
        .collect::<Result<_>>()?;
    let violations = margins
        .iter()
        .enumerate()
        .filter(|(_, m)| **m > 0.0)
        .map(|(index, &margin)| DecreaseViolation {
            index,
            state: samples[index].as_slice().to_vec(),
            margin,
        })
        .collect();
    Ok(DecreaseReport {
        hypothesis_holds: c_e + c_delta < 1.0,
        samples_checked: samples.len(),
        violations,
        worst_margin: margins.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

fn linspace(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..k)
        .map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64)
        .collect()
}

/// Visits every point of the tensor grid over `axes`.
fn for_each_grid_point(
    axes: &[Vec<f64>],
    mut visit: impl FnMut(&[f64]) -> Result<()>,
) -> Result<()> {
    let n = axes.len();
    let mut idx = vec![0usize; n];
    let mut x: Vec<f64> = axes.iter().map(|a| a[0]).collect();
    loop {
        visit(&x)?;
        let mut d = 0;
        loop {
            if d == n {
                return Ok(());
            }
            idx[d] += 1;
            if idx[d] < axes[d].len() {
                x[d] = axes[d][idx[d]];
                break;
            }
            idx[d] = 0;
            x[d] = axes[d][0];
            d += 1;
        }
    }
}

/// Conservative radius `r̄` of the largest sublevel set `{V̂ ≤ r}` inside the
/// box: the minimum of `V̂` over a grid on the boundary faces.
///
/// `V̂` must be positive at every nonzero point of the full tensor grid.
pub fn estimate_region_radius(
    approx: &ValueApproximator,
    domain: &BoxSet,
    grid_density: usize,
) -> Result<f64> {
    let n = approx.state_dim();
    if domain.dim() != n {
        return Err(Error::dim("domain", n, domain.dim()));
    }
    if grid_density < 2 {
        return Err(Error::InvalidArgument(
            "grid_density must be at least 2".into(),
        ));
    }
    let axes: Vec<Vec<f64>> = (0..n)
        .map(|i| linspace(domain.lower[i], domain.upper[i], grid_density))
        .collect();
    for_each_grid_point(&axes, |x| {
        let v = approx.eval(x);
        let origin = x.iter().all(|c| *c == 0.0);
        if !origin && !(v > 0.0) {
            return Err(Error::NotPositive {
                point: x.to_vec(),
                value: v,
            });
        }
        Ok(())
    })?;
    let mut radius = f64::INFINITY;
    for face in 0..n {
        for bound in [domain.lower[face], domain.upper[face]] {
            let mut face_axes = axes.clone();
            face_axes[face] = vec![bound];
            for_each_grid_point(&face_axes, |x| {
                radius = radius.min(approx.eval(x));
                Ok(())
            })?;
        }
    }
    Ok(radius)
}
