//! Discrete-time systems `x(k+1) = f(x(k), u(k))` with stage cost
//! `l(x, u) = Q(x) + uᵀRu` and box constraints `X × U`.

use nalgebra::Cholesky;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Matrix, Result, Vector};

/// Central finite-difference step used for Jacobians and gradients.
pub const FD_STEP: f64 = 1e-6;

/// Smallest orbit radius accepted by the rendezvous dynamics.
const MIN_RADIUS: f64 = 1e-6;

/// Axis-aligned box `{x : lower ≤ x ≤ upper}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::dim("box upper bound", lower.len(), upper.len()));
        }
        if lower.is_empty() {
            return Err(Error::InvalidArgument(
                "box must have positive dimension".into(),
            ));
        }
        if let Some(i) = (0..lower.len()).find(|&i| !(lower[i] < upper[i])) {
            return Err(Error::InvalidArgument(format!(
                "box coordinate {i}: lower {} must be below upper {}",
                lower[i], upper[i]
            )));
        }
        Ok(Self { lower, upper })
    }

    /// `[-half_width, half_width]^dim`.
    pub fn symmetric(dim: usize, half_width: f64) -> Result<Self> {
        Self::new(vec![-half_width; dim], vec![half_width; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn center(&self) -> Vector {
        Vector::from_iterator(
            self.dim(),
            self.lower
                .iter()
                .zip(&self.upper)
                .map(|(l, u)| 0.5 * (l + u)),
        )
    }

    /// Box scaled by `factor` about its center.
    pub fn scaled(&self, factor: f64) -> Self {
        let (lower, upper) = self
            .lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| {
                let c = 0.5 * (l + u);
                let h = 0.5 * (u - l) * factor;
                (c - h, c + h)
            })
            .unzip();
        Self { lower, upper }
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *v >= l - tol && *v <= u + tol)
    }

    /// Componentwise `self ⊆ other`.
    pub fn is_subset_of(&self, other: &BoxSet) -> bool {
        self.dim() == other.dim()
            && (0..self.dim())
                .all(|i| self.lower[i] >= other.lower[i] && self.upper[i] <= other.upper[i])
    }

    /// Strict interior membership.
    pub fn contains_strictly(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *v > *l && *v < *u)
    }

    pub fn project_in_place(&self, x: &mut [f64]) {
        for ((v, l), u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*l, *u);
        }
    }

    pub fn project(&self, x: &Vector) -> Vector {
        let mut p = x.clone();
        self.project_in_place(p.as_mut_slice());
        p
    }

    /// Squared Euclidean distance to the box.
    pub fn dist_sq(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (l, u))| {
                let d = if v < l {
                    l - v
                } else if v > u {
                    v - u
                } else {
                    0.0
                };
                d * d
            })
            .sum()
    }

    /// Largest coordinate-wise excursion outside the box (0 inside).
    pub fn violation(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (l, u))| (l - v).max(v - u).max(0.0))
            .fold(0.0, f64::max)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        Vector::from_iterator(
            self.dim(),
            self.lower
                .iter()
                .zip(&self.upper)
                .map(|(l, u)| rng.gen_range(*l..*u)),
        )
    }

    /// `count` uniform draws from a `ChaCha8` stream seeded with `seed`.
    pub fn sample_seeded(&self, count: usize, seed: u64) -> Vec<Vector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.sample(&mut rng)).collect()
    }
}

/// A discrete-time system with stage cost `Q(x) + uᵀRu` and box constraints.
///
/// Implementations are immutable after construction and safe to share
/// across threads.
pub trait SystemModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;

    /// The map `f`, called with dimension-checked arguments.
    fn dynamics(&self, x: &Vector, u: &Vector) -> Result<Vector>;

    /// `Q(x) ≥ 0`, zero at the origin.
    fn state_cost(&self, x: &Vector) -> f64;

    fn input_weight(&self) -> &Matrix;
    fn state_box(&self) -> &BoxSet;
    fn input_box(&self) -> &BoxSet;

    /// The matrix of `Q(x) = xᵀQx`, when the state cost is quadratic.
    fn quadratic_state_weight(&self) -> Option<&Matrix> {
        None
    }

    fn step(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        self.check_dims(x, u)?;
        self.dynamics(x, u)
    }

    fn stage_cost(&self, x: &Vector, u: &Vector) -> Result<f64> {
        self.check_dims(x, u)?;
        Ok(self.state_cost(x) + quadform(self.input_weight(), u))
    }

    fn check_dims(&self, x: &Vector, u: &Vector) -> Result<()> {
        if x.len() != self.state_dim() {
            return Err(Error::dim("state", self.state_dim(), x.len()));
        }
        if u.len() != self.input_dim() {
            return Err(Error::dim("input", self.input_dim(), u.len()));
        }
        Ok(())
    }
}

pub(crate) fn quadform(m: &Matrix, v: &Vector) -> f64 {
    v.dot(&(m * v))
}

fn check_weights(q: &Matrix, r: &Matrix, n: usize, m: usize) -> Result<()> {
    if q.nrows() != n || q.ncols() != n {
        return Err(Error::dim("state weight Q", n, q.nrows()));
    }
    if r.nrows() != m || r.ncols() != m {
        return Err(Error::dim("input weight R", m, r.nrows()));
    }
    let sym = |a: &Matrix| (a - a.transpose()).amax() <= 1e-12 * (1.0 + a.amax());
    if !sym(q) || !sym(r) {
        return Err(Error::InvalidArgument(
            "weights Q and R must be symmetric".into(),
        ));
    }
    if Cholesky::new(r.clone()).is_none() {
        return Err(Error::InvalidArgument(
            "input weight R must be positive definite".into(),
        ));
    }
    let q_min = q.clone().symmetric_eigenvalues().min();
    if q_min < -1e-12 {
        return Err(Error::InvalidArgument(format!(
            "state weight Q must be positive semidefinite (min eigenvalue {q_min:e})"
        )));
    }
    Ok(())
}

fn check_boxes(state_box: &BoxSet, input_box: &BoxSet, n: usize, m: usize) -> Result<()> {
    if state_box.dim() != n {
        return Err(Error::dim("state box", n, state_box.dim()));
    }
    if input_box.dim() != m {
        return Err(Error::dim("input box", m, input_box.dim()));
    }
    if !state_box.contains_strictly(&vec![0.0; n]) || !input_box.contains_strictly(&vec![0.0; m]) {
        return Err(Error::InvalidArgument(
            "origin must lie strictly inside the constraint boxes".into(),
        ));
    }
    Ok(())
}

/// `f(x, u) = Ax + Bu` with quadratic stage cost.
#[derive(Debug, Clone)]
pub struct LinearModel {
    a: Matrix,
    b: Matrix,
    q: Matrix,
    r: Matrix,
    state_box: BoxSet,
    input_box: BoxSet,
}

impl LinearModel {
    pub fn new(
        a: Matrix,
        b: Matrix,
        q: Matrix,
        r: Matrix,
        state_box: BoxSet,
        input_box: BoxSet,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::dim("A columns", n, a.ncols()));
        }
        if b.nrows() != n {
            return Err(Error::dim("B rows", n, b.nrows()));
        }
        let m = b.ncols();
        check_weights(&q, &r, n, m)?;
        check_boxes(&state_box, &input_box, n, m)?;
        Ok(Self {
            a,
            b,
            q,
            r,
            state_box,
            input_box,
        })
    }

    /// Scalar `x⁺ = a·x + b·u`, cost `q·x² + r·u²`, boxes `[-x_max, x_max]`, `[-u_max, u_max]`.
    pub fn scalar(a: f64, b: f64, q: f64, r: f64, x_max: f64, u_max: f64) -> Result<Self> {
        Self::new(
            Matrix::from_element(1, 1, a),
            Matrix::from_element(1, 1, b),
            Matrix::from_element(1, 1, q),
            Matrix::from_element(1, 1, r),
            BoxSet::symmetric(1, x_max)?,
            BoxSet::symmetric(1, u_max)?,
        )
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }
}

impl SystemModel for LinearModel {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn dynamics(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        Ok(&self.a * x + &self.b * u)
    }

    fn state_cost(&self, x: &Vector) -> f64 {
        quadform(&self.q, x)
    }

    fn input_weight(&self) -> &Matrix {
        &self.r
    }

    fn state_box(&self) -> &BoxSet {
        &self.state_box
    }

    fn input_box(&self) -> &BoxSet {
        &self.input_box
    }

    fn quadratic_state_weight(&self) -> Option<&Matrix> {
        Some(&self.q)
    }
}

/// Which orbit-radius expression the rendezvous dynamics use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusForm {
    /// `r = sqrt((1 + x₁)² + x₂²)`, the distance to the attracting body.
    #[default]
    Corrected,
    /// `r = sqrt(1 + x₁² + x₂²)`, as printed in the benchmark description.
    Printed,
}

/// Euler-discretized planar rendezvous in normalized orbital coordinates.
///
/// State `(X, Y, Ẋ, Ẏ)`, input is the commanded acceleration.
#[derive(Debug, Clone)]
pub struct OrbitalRendezvous {
    dt: f64,
    q: Matrix,
    r: Matrix,
    state_box: BoxSet,
    input_box: BoxSet,
    radius_form: RadiusForm,
}

impl Default for OrbitalRendezvous {
    fn default() -> Self {
        Self::new(
            0.05,
            &[50.0; 4],
            &[1.0; 2],
            BoxSet::symmetric(4, 0.5).unwrap(),
            BoxSet::symmetric(2, 2.0).unwrap(),
            RadiusForm::Corrected,
        )
        .expect("default rendezvous parameters are valid")
    }
}

impl OrbitalRendezvous {
    pub fn new(
        dt: f64,
        q_diag: &[f64],
        r_diag: &[f64],
        state_box: BoxSet,
        input_box: BoxSet,
        radius_form: RadiusForm,
    ) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "dt must be positive, got {dt}"
            )));
        }
        if q_diag.len() != 4 {
            return Err(Error::dim("Q diagonal", 4, q_diag.len()));
        }
        if r_diag.len() != 2 {
            return Err(Error::dim("R diagonal", 2, r_diag.len()));
        }
        let q = Matrix::from_diagonal(&Vector::from_column_slice(q_diag));
        let r = Matrix::from_diagonal(&Vector::from_column_slice(r_diag));
        check_weights(&q, &r, 4, 2)?;
        check_boxes(&state_box, &input_box, 4, 2)?;
        Ok(Self {
            dt,
            q,
            r,
            state_box,
            input_box,
            radius_form,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn radius_form(&self) -> RadiusForm {
        self.radius_form
    }

    fn radius(&self, x1: f64, x2: f64) -> f64 {
        match self.radius_form {
            RadiusForm::Corrected => ((1.0 + x1).powi(2) + x2 * x2).sqrt(),
            RadiusForm::Printed => (1.0 + x1 * x1 + x2 * x2).sqrt(),
        }
    }
}

impl SystemModel for OrbitalRendezvous {
    fn state_dim(&self) -> usize {
        4
    }

    fn input_dim(&self) -> usize {
        2
    }

    fn dynamics(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        let (x1, x2, x3, x4) = (x[0], x[1], x[2], x[3]);
        let r = self.radius(x1, x2);
        if !(r >= MIN_RADIUS) {
            return Err(Error::SingularRadius { radius: r });
        }
        let g = 1.0 / (r * r * r) - 1.0;
        let dt = self.dt;
        Ok(Vector::from_vec(vec![
            x1 + dt * x3,
            x2 + dt * x4,
            x3 + dt * (2.0 * x4 - (1.0 + x1) * g) + dt * u[0],
            x4 + dt * (-2.0 * x3 - x2 * g) + dt * u[1],
        ]))
    }

    fn state_cost(&self, x: &Vector) -> f64 {
        quadform(&self.q, x)
    }

    fn input_weight(&self) -> &Matrix {
        &self.r
    }

    fn state_box(&self) -> &BoxSet {
        &self.state_box
    }

    fn input_box(&self) -> &BoxSet {
        &self.input_box
    }

    fn quadratic_state_weight(&self) -> Option<&Matrix> {
        Some(&self.q)
    }
}

/// Central finite-difference Jacobians `(∂f/∂x, ∂f/∂u)` at `(x0, u0)`.
pub fn linearize(model: &dyn SystemModel, x0: &Vector, u0: &Vector) -> Result<(Matrix, Matrix)> {
    model.check_dims(x0, u0)?;
    linearize_with_step(model, x0, u0, FD_STEP)
}

pub(crate) fn linearize_with_step(
    model: &dyn SystemModel,
    x0: &Vector,
    u0: &Vector,
    h: f64,
) -> Result<(Matrix, Matrix)> {
    let n = x0.len();
    let m = u0.len();
    let mut a = Matrix::zeros(n, n);
    let mut b = Matrix::zeros(n, m);
    let mut x = x0.clone();
    for j in 0..n {
        x[j] = x0[j] + h;
        let fp = model.dynamics(&x, u0)?;
        x[j] = x0[j] - h;
        let fm = model.dynamics(&x, u0)?;
        x[j] = x0[j];
        a.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    let mut u = u0.clone();
    for j in 0..m {
        u[j] = u0[j] + h;
        let fp = model.dynamics(x0, &u)?;
        u[j] = u0[j] - h;
        let fm = model.dynamics(x0, &u)?;
        u[j] = u0[j];
        b.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    Ok((a, b))
}

const RICCATI_TOL: f64 = 1e-12;
const RICCATI_MAX_ITER: usize = 100_000;

fn riccati_gain(a: &Matrix, b: &Matrix, r: &Matrix, p: &Matrix) -> Option<Matrix> {
    let bt_p = b.transpose() * p;
    let s = r + &bt_p * b;
    Cholesky::new(s).map(|c| c.solve(&(bt_p * a)))
}

/// One application of `P ↦ Q + AᵀPA − AᵀPB(R + BᵀPB)⁻¹BᵀPA`.
pub fn riccati_map(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, p: &Matrix) -> Option<Matrix> {
    let k = riccati_gain(a, b, r, p)?;
    let at_p = a.transpose() * p;
    let next = q + &at_p * a - &at_p * b * k;
    Some(0.5 * (&next + next.transpose()))
}

/// Solve the discrete algebraic Riccati equation by fixed-point iteration
/// from `P = Q`, returning `(P, K)` with `K = (R + BᵀPB)⁻¹BᵀPA`.
pub fn solve_riccati(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix) -> Result<(Matrix, Matrix)> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) {
        return Err(Error::InvalidArgument(
            "inconsistent Riccati dimensions".into(),
        ));
    }
    let m = b.ncols();
    if r.shape() != (m, m) {
        return Err(Error::dim("R", m, r.nrows()));
    }
    let mut p = q.clone();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < RICCATI_MAX_ITER {
        iterations += 1;
        let next = riccati_map(a, b, q, r, &p).ok_or(Error::RiccatiDivergence { iterations })?;
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::RiccatiDivergence { iterations });
        }
        let change = (&next - &p).norm();
        let scale = next.norm().max(f64::MIN_POSITIVE);
        p = next;
        if change <= RICCATI_TOL * scale {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::RiccatiDivergence { iterations });
    }
    // The relative tolerance leaves a residual of order 1e-12·‖P‖; a few
    // extra sweeps push it to rounding level for large P.
    let mut best = (&riccati_map(a, b, q, r, &p).unwrap() - &p).norm();
    for _ in 0..200 {
        let next = riccati_map(a, b, q, r, &p).unwrap();
        let res = (&riccati_map(a, b, q, r, &next).unwrap() - &next).norm();
        if res >= best {
            break;
        }
        best = res;
        p = next;
    }
    let k = riccati_gain(a, b, r, &p).ok_or(Error::RiccatiDivergence { iterations })?;
    Ok((p, k))
}

/// LQR for the linearization of a model at the origin.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LqrBaseline {
    pub a: Matrix,
    pub b: Matrix,
    pub p: Matrix,
    pub k: Matrix,
}

impl LqrBaseline {
    pub fn from_model(model: &dyn SystemModel) -> Result<Self> {
        let q = model.quadratic_state_weight().ok_or_else(|| {
            Error::InvalidArgument("LQR baseline needs a quadratic state cost".into())
        })?;
        let x0 = Vector::zeros(model.state_dim());
        let u0 = Vector::zeros(model.input_dim());
        let (a, b) = linearize(model, &x0, &u0)?;
        let (p, k) = solve_riccati(&a, &b, q, model.input_weight())?;
        Ok(Self { a, b, p, k })
    }

    /// Spectral radius of `A − BK`.
    pub fn closed_loop_spectral_radius(&self) -> f64 {
        let acl = &self.a - &self.b * &self.k;
        acl.complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    /// `−Kx` projected onto the input box.
    pub fn feedback(&self, x: &Vector, input_box: &BoxSet) -> Vector {
        input_box.project(&(-&self.k * x))
    }
}

/// Frobenius norm of the DARE residual at `p`.
pub fn riccati_residual(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, p: &Matrix) -> f64 {
    riccati_map(a, b, q, r, p)
        .map(|next| (next - p).norm())
        .unwrap_or(f64::INFINITY)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    #[test]
    fn orbital_equilibrium() {
        let model = OrbitalRendezvous::default();
        let z = model.step(&Vector::zeros(4), &Vector::zeros(2)).unwrap();
        assert_eq!(z, Vector::zeros(4));
        assert_eq!(
            model
                .stage_cost(&Vector::zeros(4), &Vector::zeros(2))
                .unwrap(),
            0.0
        );
    }

    #[test]
    fn orbital_hand_steps() {
        let model = OrbitalRendezvous::default();
        let x = model
            .step(&v(&[0.0, 0.0, 0.1, 0.0]), &v(&[0.0, 0.0]))
            .unwrap();
        let expect = [0.005, 0.0, 0.1, -0.01];
        for i in 0..4 {
            assert_abs_diff_eq!(x[i], expect[i], epsilon = 1e-15);
        }
        let x = model
            .step(&v(&[0.1, 0.0, 0.0, 0.0]), &v(&[0.0, 0.2]))
            .unwrap();
        assert_abs_diff_eq!(x[3], 0.01, epsilon = 1e-15);
    }

    #[test]
    fn printed_radius_keeps_equilibrium() {
        let model = OrbitalRendezvous::new(
            0.05,
            &[50.0; 4],
            &[1.0; 2],
            BoxSet::symmetric(4, 0.5).unwrap(),
            BoxSet::symmetric(2, 2.0).unwrap(),
            RadiusForm::Printed,
        )
        .unwrap();
        let z = model.step(&Vector::zeros(4), &Vector::zeros(2)).unwrap();
        assert_eq!(z, Vector::zeros(4));
        // The two forms disagree away from x₁ = 0.
        let x = v(&[0.1, 0.0, 0.0, 0.0]);
        let corrected = OrbitalRendezvous::default()
            .step(&x, &Vector::zeros(2))
            .unwrap();
        let printed = model.step(&x, &Vector::zeros(2)).unwrap();
        assert!((corrected[2] - printed[2]).abs() > 1e-4);
    }

    #[test]
    fn singular_radius_is_an_error() {
        let model = OrbitalRendezvous::default();
        let err = model.step(&v(&[-1.0, 0.0, 0.0, 0.0]), &Vector::zeros(2));
        assert!(matches!(err, Err(Error::SingularRadius { .. })));
    }

    #[test]
    fn dimension_mismatch() {
        let model = OrbitalRendezvous::default();
        assert!(matches!(
            model.step(&Vector::zeros(3), &Vector::zeros(2)),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            model.stage_cost(&Vector::zeros(4), &Vector::zeros(1)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn stage_cost_examples() {
        let model = OrbitalRendezvous::default();
        assert_abs_diff_eq!(
            model
                .stage_cost(&v(&[0.1, 0.0, 0.0, 0.0]), &Vector::zeros(2))
                .unwrap(),
            0.5,
            epsilon = 1e-14
        );
        assert_eq!(
            model
                .stage_cost(&Vector::zeros(4), &v(&[1.0, 1.0]))
                .unwrap(),
            2.0
        );
    }

    #[test]
    fn stage_cost_is_even() {
        let model = OrbitalRendezvous::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x = model.state_box().sample(&mut rng);
            let u = model.input_box().sample(&mut rng);
            let a = model.stage_cost(&x, &u).unwrap();
            let b = model.stage_cost(&-&x, &-&u).unwrap();
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
        }
    }

    #[test]
    fn stage_cost_class_k_bounds() {
        let model = OrbitalRendezvous::default();
        let q = model.quadratic_state_weight().unwrap().clone();
        let eig = q.symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let x = model.state_box().sample(&mut rng);
            let s2 = x.norm_squared();
            let l = model.stage_cost(&x, &Vector::zeros(2)).unwrap();
            assert!(lo * s2 <= l * (1.0 + 1e-12));
            assert!(l <= hi * s2 * (1.0 + 1e-12));
        }
    }

    #[test]
    fn linearize_linear_model_is_exact() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, 0.3, -0.2, 0.9]);
        let b = Matrix::from_row_slice(2, 1, &[0.5, 1.5]);
        let model = LinearModel::new(
            a.clone(),
            b.clone(),
            Matrix::identity(2, 2),
            Matrix::identity(1, 1),
            BoxSet::symmetric(2, 10.0).unwrap(),
            BoxSet::symmetric(1, 10.0).unwrap(),
        )
        .unwrap();
        let (la, lb) = linearize(&model, &v(&[0.7, -1.2]), &v(&[0.4])).unwrap();
        assert!((la - a).amax() <= 1e-6);
        assert!((lb - b).amax() <= 1e-6);
    }

    #[test]
    fn orbital_linearization_entries() {
        let model = OrbitalRendezvous::default();
        let (a, b) = linearize(&model, &Vector::zeros(4), &Vector::zeros(2)).unwrap();
        assert_abs_diff_eq!(a[(0, 2)], 0.05, epsilon = 1e-9);
        assert_abs_diff_eq!(b[(2, 0)], 0.05, epsilon = 1e-9);
        // ∂ẍ/∂x₁ = 3·dt for the corrected radius.
        assert_abs_diff_eq!(a[(2, 0)], 0.15, epsilon = 1e-6);
    }

    #[test]
    fn riccati_scalar_matches_quadratic_root() {
        // p = 1 + 0.25p − 0.25p²/(1 + p)  ⇔  p² − 0.25p − 1 = 0.
        let oracle = (0.25 + (0.0625f64 + 4.0).sqrt()) / 2.0;
        let one = |x: f64| Matrix::from_element(1, 1, x);
        let (p, k) = solve_riccati(&one(0.5), &one(1.0), &one(1.0), &one(1.0)).unwrap();
        assert_abs_diff_eq!(p[(0, 0)], oracle, epsilon = 1e-10);
        assert_abs_diff_eq!(k[(0, 0)], 0.5 * oracle / (1.0 + oracle), epsilon = 1e-10);
    }

    #[test]
    fn riccati_deadbeat_plant() {
        let q = Matrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let (p, k) = solve_riccati(
            &Matrix::zeros(2, 2),
            &Matrix::identity(2, 1),
            &q,
            &Matrix::identity(1, 1),
        )
        .unwrap();
        assert_eq!(p, q);
        assert_eq!(k, Matrix::zeros(1, 2));
    }

    #[test]
    fn riccati_unstabilizable_diverges() {
        let one = |x: f64| Matrix::from_element(1, 1, x);
        let err = solve_riccati(&one(1.0), &one(0.0), &one(1.0), &one(1.0)).unwrap_err();
        match err {
            Error::RiccatiDivergence { iterations } => assert!(iterations > 0),
            e => panic!("unexpected {e}"),
        }
        assert!(err.to_string().contains("Riccati divergence"));
    }

    #[test]
    fn orbital_lqr_baseline() {
        let model = OrbitalRendezvous::default();
        let lqr = LqrBaseline::from_model(&model).unwrap();
        let q = model.quadratic_state_weight().unwrap();
        let res = riccati_residual(&lqr.a, &lqr.b, q, model.input_weight(), &lqr.p);
        assert!(res <= 1e-9, "residual {res:e}");
        assert!(lqr.closed_loop_spectral_radius() < 1.0);
        assert!(lqr.p.clone().symmetric_eigenvalues().min() > 0.0);
    }

    #[test]
    fn rejects_origin_outside_boxes() {
        let err = LinearModel::new(
            Matrix::identity(1, 1),
            Matrix::identity(1, 1),
            Matrix::identity(1, 1),
            Matrix::identity(1, 1),
            BoxSet::new(vec![0.0], vec![1.0]).unwrap(),
            BoxSet::symmetric(1, 1.0).unwrap(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn box_geometry() {
        let b = BoxSet::new(vec![-1.0, 0.0], vec![1.0, 2.0]).unwrap();
        assert_eq!(b.dist_sq(&[2.0, 3.0]), 2.0);
        assert_eq!(b.violation(&[2.0, 1.0]), 1.0);
        assert_eq!(
            b.scaled(2.0),
            BoxSet::new(vec![-2.0, -1.0], vec![2.0, 3.0]).unwrap()
        );
        assert!(b.contains(&[1.0, 2.0], 0.0));
        assert!(!b.contains_strictly(&[1.0, 1.0]));
    }
}
