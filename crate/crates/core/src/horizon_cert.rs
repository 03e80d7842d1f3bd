//! Stabilizing-horizon certification.
//!
//! The cost-bound constant `γ` (with `V_N(x) ≤ γ·l(x,0)`) and the sublevel
//! radius `ε` (with `{l(x,0) ≤ ε} ⊂ Ω` and an admissible policy there) are
//! estimated from rollouts and samples. They are estimates, not proofs, so
//! `γ` is inflated by 5% and `ε` shrunk by 5%. The closed-form horizons and
//! the suboptimality factor follow from them exactly.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approximator::ValueApproximator;
use crate::models::{BoxSet, SystemModel};
use crate::value_iteration::{policy_unchecked, InnerMinConfig};
use crate::{Error, Result, Vector};

pub const GAMMA_SAFETY: f64 = 1.05;
pub const EPSILON_SAFETY: f64 = 0.95;
/// Lower clamp of `γ`; the horizon formulas need `γ > 1`.
pub const GAMMA_FLOOR: f64 = 1.0 + 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonCertificate {
    pub gamma: f64,
    pub epsilon: f64,
    pub v_bar: f64,
    pub c_e: f64,
    pub c_delta: f64,
    /// `min{γ, V̄/ε}`
    pub gamma_lower: f64,
    /// `max{γ, V̄/ε}`
    pub gamma_upper: f64,
    /// `(γ − 1)/γ`
    pub rho: f64,
    pub n_0: usize,
    pub n_omega: usize,
    pub n_lower: i64,
    pub n_vbar: usize,
    /// `(c_e + c_δ)/(1 − (c_e + c_δ))`
    pub c_n: f64,
    /// Horizon at which `c_v` and `alpha` are evaluated (`N_V̄ + 1`).
    pub horizon: usize,
    pub c_v: f64,
    /// `c_V/(1 + c_e)`, the factor in `Σl ≤ V_∞/α`.
    pub alpha: f64,
    /// `(1 + c_e)/c_V`, the reciprocal, kept for comparison.
    pub alpha_printed: f64,
    #[serde(default)]
    pub region_radius: Option<f64>,
}

/// `ceil`, treating values within rounding distance of an integer as that
/// integer so that e.g. `log 8 / log 2` lands on 3.
fn ceil_robust(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r
    } else {
        x.ceil()
    }
}

fn validate_inputs(gamma: f64, epsilon: f64, v_bar: f64, c_e: f64, c_delta: f64) -> Result<()> {
    if !(gamma > 1.0) {
        return Err(Error::GammaNotAboveOne { gamma });
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    if !(v_bar > 0.0 && v_bar.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "V_bar must be positive, got {v_bar}"
        )));
    }
    if !(c_e >= 0.0 && c_delta >= 0.0) {
        return Err(Error::InvalidArgument(
            "c_e and c_delta must be nonnegative".into(),
        ));
    }
    if !(c_e + c_delta < 1.0) {
        return Err(Error::ErrorBoundTooLarge { sum: c_e + c_delta });
    }
    Ok(())
}

/// Evaluates the terminal-set horizon `N_Ω`, the decrease horizon `N̲`, the
/// stabilizing horizon `N_V̄` and `α` at `N = N_V̄ + 1`.
pub fn compute_horizons(
    gamma: f64,
    epsilon: f64,
    v_bar: f64,
    c_e: f64,
    c_delta: f64,
) -> Result<HorizonCertificate> {
    validate_inputs(gamma, epsilon, v_bar, c_e, c_delta)?;
    let ratio = v_bar / epsilon;
    let gamma_lower = gamma.min(ratio);
    let gamma_upper = gamma.max(ratio);
    let rho = (gamma - 1.0) / gamma;
    let denom = gamma.ln() - (gamma - 1.0).ln();
    let n_0 = ceil_robust(((v_bar - gamma_lower * epsilon) / epsilon).max(0.0));
    let n_omega = n_0 + ceil_robust(gamma.ln().max(0.0) / denom);
    let sum = c_e + c_delta;
    let c_n = sum / (1.0 - sum);
    let (n_lower, growth) = if c_n > 0.0 {
        let lg = c_n.ln() + gamma.ln();
        (n_0 + ceil_robust(lg / denom), lg)
    } else {
        (n_0, f64::NEG_INFINITY)
    };
    let n_vbar = n_0 + ceil_robust(gamma.ln().max(growth).max(0.0) / denom);

    let mut cert = HorizonCertificate {
        gamma,
        epsilon,
        v_bar,
        c_e,
        c_delta,
        gamma_lower,
        gamma_upper,
        rho,
        n_0: n_0 as usize,
        n_omega: n_omega as usize,
        n_lower: n_lower as i64,
        n_vbar: n_vbar as usize,
        c_n,
        horizon: n_vbar as usize + 1,
        c_v: f64::NAN,
        alpha: f64::NAN,
        alpha_printed: f64::NAN,
        region_radius: None,
    };
    let c_v = cert.c_v_at(cert.horizon);
    cert.c_v = c_v;
    cert.alpha = c_v / (1.0 + c_e);
    cert.alpha_printed = (1.0 + c_e) / c_v;
    Ok(cert)
}

impl HorizonCertificate {
    /// `c_V(N) = 1 − c_N·ρ_γ^{N−N_0}·γ`.
    pub fn c_v_at(&self, horizon: usize) -> f64 {
        1.0 - self.c_n * self.rho.powf(horizon as f64 - self.n_0 as f64) * self.gamma
    }

    /// `c_N·ρ_γ^{N−N_0}·γ`, the growth term in the closed-loop value decrease.
    pub fn decrease_slack_factor(&self, horizon: usize) -> f64 {
        1.0 - self.c_v_at(horizon)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// `α = c_V(N)/(1 + c_e)` for a horizon `N > N̲`.
pub fn suboptimality_alpha(cert: &HorizonCertificate, horizon: usize) -> Result<f64> {
    if (horizon as i64) <= cert.n_lower {
        return Err(Error::CvNonpositive {
            horizon,
            lower: cert.n_lower,
        });
    }
    let c_v = cert.c_v_at(horizon);
    if !(c_v > 0.0) {
        return Err(Error::CvNonpositive {
            horizon,
            lower: cert.n_lower,
        });
    }
    let alpha = c_v / (1.0 + cert.c_e);
    debug_assert!(alpha > 0.0 && alpha <= 1.0);
    Ok(alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub c_e_plus_c_delta: f64,
    pub n_0: usize,
    #[serde(rename = "N_Omega")]
    pub n_omega: usize,
    #[serde(rename = "N_Vbar")]
    pub n_vbar: usize,
    pub alpha: f64,
}

/// Recomputes the horizons over a grid of `c_e + c_δ`, keeping `γ, ε, V̄`
/// and the certificate's `c_e : c_δ` split.
pub fn horizon_sweep(
    cert: &HorizonCertificate,
    lo: f64,
    hi: f64,
    points: usize,
) -> Result<Vec<SweepRow>> {
    if points == 0 {
        return Ok(Vec::new());
    }
    let total = cert.c_e + cert.c_delta;
    let share = if total > 0.0 { cert.c_e / total } else { 0.5 };
    (0..points)
        .map(|i| {
            let s = if points == 1 {
                lo
            } else {
                lo + (hi - lo) * i as f64 / (points - 1) as f64
            };
            let c = compute_horizons(
                cert.gamma,
                cert.epsilon,
                cert.v_bar,
                share * s,
                (1.0 - share) * s,
            )?;
            Ok(SweepRow {
                c_e_plus_c_delta: s,
                n_0: c.n_0,
                n_omega: c.n_omega,
                n_vbar: c.n_vbar,
                alpha: c.alpha,
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["c_e_plus_c_delta", "N_0", "N_Omega", "N_Vbar", "alpha"])?;
    for r in rows {
        csv.write_record([
            r.c_e_plus_c_delta.to_string(),
            r.n_0.to_string(),
            r.n_omega.to_string(),
            r.n_vbar.to_string(),
            r.alpha.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

/// Cost of following `hⁱ` for `steps` steps plus `V̂` at the final state.
/// `None` if the rollout leaves `region`.
pub fn policy_rollout_cost(
    approx: &ValueApproximator,
    model: &dyn SystemModel,
    x0: &Vector,
    steps: usize,
    inner: &InnerMinConfig,
    region: Option<&BoxSet>,
) -> Result<Option<f64>> {
    let mut x = x0.clone();
    let mut cost = 0.0;
    for _ in 0..steps {
        let u = policy_unchecked(approx, model, &x, inner)?;
        cost += model.stage_cost(&x, &u)?;
        x = model.step(&x, &u)?;
        if region.is_some_and(|r| !r.contains(x.as_slice(), 0.0)) {
            return Ok(None);
        }
    }
    Ok(Some(cost + approx.evaluate(x.as_slice())?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaEstimate {
    pub gamma: f64,
    /// Largest observed `V_N^i(x)/l(x,0)` before inflation.
    pub max_ratio: f64,
    pub used: usize,
    pub excluded: usize,
}

/// Rollout estimate of `γ`: the largest `V_N^i(x)/l(x, 0)` over the samples,
/// times 1.05, clamped to at least `1 + 1e-6`.
///
/// Samples with `l(x,0) < η` are skipped. Rollouts leaving the domain
/// inflated by 2 are excluded; more than half excluded is an error.
pub fn estimate_gamma(
    approx: &ValueApproximator,
    model: &dyn SystemModel,
    domain: &BoxSet,
    n_roll: usize,
    samples: &[Vector],
    inner: &InnerMinConfig,
    origin_guard: f64,
) -> Result<GammaEstimate> {
    if n_roll == 0 {
        return Err(Error::InvalidArgument("n_roll must be at least 1".into()));
    }
    if approx.state_dim() != model.state_dim() || domain.dim() != model.state_dim() {
        return Err(Error::dim(
            "approximator/domain",
            model.state_dim(),
            approx.state_dim(),
        ));
    }
    let outer = domain.scaled(2.0);
    let ratios: Vec<Option<f64>> = samples
        .par_iter()
        .filter_map(|x| {
            let l0 = model.state_cost(x);
            (l0 >= origin_guard).then_some((x, l0))
        })
        .map(|(x, l0)| {
            Ok(policy_rollout_cost(approx, model, x, n_roll, inner, Some(&outer))?.map(|v| v / l0))
        })
        .collect::<Result<_>>()?;
    let total = ratios.len();
    let excluded = ratios.iter().filter(|r| r.is_none()).count();
    if total == 0 || 2 * excluded > total {
        return Err(Error::GammaUnreliable { excluded, total });
    }
    let max_ratio = ratios
        .iter()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(GammaEstimate {
        gamma: (GAMMA_SAFETY * max_ratio).max(GAMMA_FLOOR),
        max_ratio,
        used: total - excluded,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpsilonConfig {
    /// Rays (and interior points) sampled per candidate.
    pub n_points: usize,
    pub bisection_steps: usize,
    pub seed: u64,
}

impl Default for EpsilonConfig {
    fn default() -> Self {
        Self {
            n_points: 1000,
            bisection_steps: 40,
            seed: 7,
        }
    }
}

/// Smallest value of `l(·, 0)` over the face centers of `domain`.
fn face_center_bound(model: &dyn SystemModel, domain: &BoxSet) -> f64 {
    let c = domain.center();
    let mut best = f64::INFINITY;
    for i in 0..domain.dim() {
        for b in [domain.lower[i], domain.upper[i]] {
            let mut x = c.clone();
            x[i] = b;
            best = best.min(model.state_cost(&x));
        }
    }
    best
}

struct RaySample {
    direction: Vector,
    fraction: f64,
}

/// Radius along `d` where `l(s·d, 0)` reaches `level`; `None` if unbounded.
fn ray_boundary(model: &dyn SystemModel, d: &Vector, level: f64, scale: f64) -> Option<f64> {
    let mut hi = scale;
    let mut tries = 0;
    while model.state_cost(&(d * hi)) < level {
        hi *= 2.0;
        tries += 1;
        if tries > 60 {
            return None;
        }
    }
    let mut lo = 0.0;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if model.state_cost(&(d * mid)) < level {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(hi)
}

/// Largest `ε` (times 0.95) such that sampled points of `{l(x,0) ≤ ε}` lie in
/// `region` and `policy` keeps `(x, u)` inside the constraint boxes.
///
/// The sublevel set is explored along random rays from the origin: the ray's
/// boundary point is checked against `region`, an interior point along the
/// ray against the constraints. `ε_max` is the least stage cost over the face
/// centers of `region`.
pub fn estimate_epsilon_for_policy(
    model: &dyn SystemModel,
    region: &BoxSet,
    policy: &(dyn Fn(&Vector) -> Result<Vector> + Sync),
    cfg: &EpsilonConfig,
) -> Result<f64> {
    let n = model.state_dim();
    if region.dim() != n {
        return Err(Error::dim("region", n, region.dim()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rays: Vec<RaySample> = (0..cfg.n_points.max(1))
        .map(|_| {
            let mut d;
            loop {
                d = Vector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
                let norm = d.norm();
                if norm > 1e-3 && norm <= 1.0 {
                    break;
                }
            }
            let norm = d.norm();
            RaySample {
                direction: d / norm,
                fraction: rng.gen_range(0.0..1.0),
            }
        })
        .collect();
    let scale = region
        .lower
        .iter()
        .zip(&region.upper)
        .map(|(l, u)| 0.5 * (u - l))
        .fold(0.0, f64::max);

    let check = |level: f64| -> Result<Option<Vec<f64>>> {
        let witnesses: Vec<Option<Vec<f64>>> = rays
            .par_iter()
            .map(|ray| {
                let Some(s) = ray_boundary(model, &ray.direction, level, scale) else {
                    return Ok(Some((&ray.direction * f64::INFINITY).as_slice().to_vec()));
                };
                let boundary = &ray.direction * s;
                if !region.contains(boundary.as_slice(), 1e-12) {
                    return Ok(Some(boundary.as_slice().to_vec()));
                }
                let x = boundary * ray.fraction;
                if !model.state_box().contains(x.as_slice(), 1e-12) {
                    return Ok(Some(x.as_slice().to_vec()));
                }
                let u = policy(&x)?;
                if !model.input_box().contains(u.as_slice(), 1e-12) {
                    return Ok(Some(x.as_slice().to_vec()));
                }
                Ok(None)
            })
            .collect::<Result<_>>()?;
        Ok(witnesses.into_iter().flatten().next())
    };

    let eps_max = face_center_bound(model, region);
    let Some(mut witness) = check(eps_max)? else {
        return Ok(EPSILON_SAFETY * eps_max);
    };
    let (mut lo, mut hi) = (0.0, eps_max);
    for _ in 0..cfg.bisection_steps {
        let mid = 0.5 * (lo + hi);
        match check(mid)? {
            None => lo = mid,
            Some(w) => {
                hi = mid;
                witness = w;
            }
        }
    }
    if lo > 0.0 {
        Ok(EPSILON_SAFETY * lo)
    } else {
        Err(Error::EpsilonUnverifiable { witness })
    }
}

/// `ε` for the learned policy `hⁱ` on the approximation domain.
pub fn estimate_epsilon(
    approx: &ValueApproximator,
    model: &dyn SystemModel,
    domain: &BoxSet,
    inner: &InnerMinConfig,
    cfg: &EpsilonConfig,
) -> Result<f64> {
    if approx.state_dim() != model.state_dim() {
        return Err(Error::dim(
            "approximator",
            model.state_dim(),
            approx.state_dim(),
        ));
    }
    let policy = |x: &Vector| policy_unchecked(approx, model, x, inner);
    estimate_epsilon_for_policy(model, domain, &policy, cfg)
}

/// Default `V̄`: the largest policy-rollout cost over the start states.
pub fn estimate_v_bar(
    approx: &ValueApproximator,
    model: &dyn SystemModel,
    starts: &[Vector],
    n_roll: usize,
    inner: &InnerMinConfig,
) -> Result<f64> {
    let mut v_bar = 0.0f64;
    for x in starts {
        let v = policy_rollout_cost(approx, model, x, n_roll, inner, None)?
            .expect("unbounded rollout always returns a cost");
        v_bar = v_bar.max(v);
    }
    if !(v_bar > 0.0) {
        return Err(Error::InvalidArgument(
            "V_bar estimate is not positive; choose start states away from the origin".into(),
        ));
    }
    Ok(v_bar)
}
