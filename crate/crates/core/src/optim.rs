//! Projected gradient descent over a box with Barzilai–Borwein trial steps
//! and Armijo backtracking. Shared by the Bellman inner minimization and the
//! finite-horizon OCP.

pub(crate) struct Options {
    pub max_iterations: usize,
    /// Stop when `‖x − P(x − ∇f)‖ ≤ abs_tol + rel_tol·|f|`.
    pub abs_tol: f64,
    pub rel_tol: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct Outcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    /// The line search could not decrease the objective any further.
    pub stalled: bool,
}

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

fn projected_step(x: &[f64], g: &[f64], step: f64, project: &impl Fn(&mut [f64])) -> Vec<f64> {
    let mut y: Vec<f64> = x.iter().zip(g).map(|(a, b)| a - step * b).collect();
    project(&mut y);
    y
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f` over the set defined by `project`, starting from `x0`.
///
/// `f` returns a non-finite value where it cannot be evaluated; such trial
/// points are rejected by the line search. The iterate value never
/// increases.
pub(crate) fn minimize(
    x0: &[f64],
    project: impl Fn(&mut [f64]),
    f: impl Fn(&[f64]) -> f64,
    grad: impl Fn(&[f64]) -> Option<Vec<f64>>,
    opts: &Options,
) -> Outcome {
    let mut x = x0.to_vec();
    project(&mut x);
    let mut fx = f(&x);
    let mut out = Outcome {
        x: x.clone(),
        value: fx,
        iterations: 0,
        grad_norm: f64::INFINITY,
        converged: false,
        stalled: false,
    };
    if !fx.is_finite() {
        out.stalled = true;
        return out;
    }
    let Some(mut g) = grad(&x) else {
        out.stalled = true;
        return out;
    };
    let mut step = 1.0;
    for it in 0..=opts.max_iterations {
        let pg = dist(&x, &projected_step(&x, &g, 1.0, &project));
        out.grad_norm = pg;
        out.iterations = it;
        if pg <= opts.abs_tol + opts.rel_tol * fx.abs() {
            out.converged = true;
            break;
        }
        if it == opts.max_iterations {
            break;
        }
        let mut trial = step;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let xn = projected_step(&x, &g, trial, &project);
            let d: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            if d.iter().all(|v| *v == 0.0) {
                break;
            }
            let fnew = f(&xn);
            if fnew.is_finite() && fnew <= fx + ARMIJO * dot(&g, &d) {
                accepted = Some((xn, fnew, d));
                break;
            }
            trial *= 0.5;
        }
        let Some((xn, fnew, s)) = accepted else {
            out.stalled = true;
            break;
        };
        let Some(gn) = grad(&xn) else {
            x = xn;
            fx = fnew;
            out.stalled = true;
            break;
        };
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        step = if sy > 0.0 {
            (dot(&s, &s) / sy).clamp(1e-12, 1e12)
        } else {
            (trial * 4.0).min(1e12)
        };
        x = xn;
        fx = fnew;
        g = gn;
    }
    out.x = x;
    out.value = fx;
    out
}

/// Central finite-difference gradient of `f` at `x`.
pub(crate) fn fd_gradient(f: &impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Option<Vec<f64>> {
    let mut xs = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        xs[i] = x[i] + h;
        let fp = f(&xs);
        xs[i] = x[i] - h;
        let fm = f(&xs);
        xs[i] = x[i];
        let d = (fp - fm) / (2.0 * h);
        if !d.is_finite() {
            return None;
        }
        g.push(d);
    }
    Some(g)
}
