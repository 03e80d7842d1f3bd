//! Polynomial value-function approximator `V̂(x) = wᵀφ(x)` on a monomial basis.
//!
//! The basis holds every monomial whose total degree lies in a configured
//! set of homogeneous degrees (default `{2, 3}`), without duplicates and in
//! graded lexicographic order. Constant and linear monomials are rejected so
//! that `φ(0) = 0` and therefore `V̂(0) = 0` for any weights.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::models::BoxSet;
use crate::{Error, Result, Vector};

/// Ridge parameter used by [`fit_weights`].
pub const DEFAULT_RIDGE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonomialBasis {
    n: usize,
    degrees: Vec<u32>,
    exponents: Vec<Vec<u32>>,
    max_degree: u32,
}

/// All exponent vectors of length `n` with total degree `d`, in lexicographic
/// order with the first coordinate's exponent decreasing.
fn homogeneous_exponents(n: usize, d: u32) -> Vec<Vec<u32>> {
    fn rec(n: usize, remaining: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() + 1 == n {
            prefix.push(remaining);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for e in (0..=remaining).rev() {
            prefix.push(e);
            rec(n, remaining - e, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, d, &mut Vec::with_capacity(n), &mut out);
    out
}

impl MonomialBasis {
    pub fn new(n: usize, degrees: &[u32]) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument(
                "basis dimension must be positive".into(),
            ));
        }
        let mut degrees = degrees.to_vec();
        degrees.sort_unstable();
        degrees.dedup();
        if degrees.is_empty() {
            return Err(Error::InvalidArgument(
                "basis needs at least one degree".into(),
            ));
        }
        if degrees[0] < 2 {
            return Err(Error::InvalidArgument(format!(
                "degree {} not allowed: constant and linear monomials would break V̂(0) = 0",
                degrees[0]
            )));
        }
        let exponents = degrees
            .iter()
            .flat_map(|&d| homogeneous_exponents(n, d))
            .collect();
        let max_degree = *degrees.last().unwrap();
        Ok(Self {
            n,
            degrees,
            exponents,
            max_degree,
        })
    }

    /// Quadratic and cubic monomials in `n` variables.
    pub fn quadratic_cubic(n: usize) -> Self {
        Self::new(n, &[2, 3]).expect("valid degrees")
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn degrees(&self) -> &[u32] {
        &self.degrees
    }

    pub fn exponent_table(&self) -> &[Vec<u32>] {
        &self.exponents
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn features(&self, x: &[f64]) -> Result<Vector> {
        if x.len() != self.n {
            return Err(Error::dim("state", self.n, x.len()));
        }
        let mut out = Vector::zeros(self.len());
        self.features_into(x, out.as_mut_slice());
        Ok(out)
    }

    fn features_into(&self, x: &[f64], out: &mut [f64]) {
        let stride = self.max_degree as usize + 1;
        let mut powers = vec![1.0; self.n * stride];
        for (i, xi) in x.iter().enumerate() {
            for p in 1..stride {
                powers[i * stride + p] = powers[i * stride + p - 1] * xi;
            }
        }
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            *o = e
                .iter()
                .enumerate()
                .map(|(i, &p)| powers[i * stride + p as usize])
                .product();
        }
    }

    /// Row-stacked feature matrix for a list of states.
    pub fn design_matrix(&self, states: &[Vector]) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(states.len(), self.len());
        let mut row = vec![0.0; self.len()];
        for (r, x) in states.iter().enumerate() {
            if x.len() != self.n {
                return Err(Error::dim("state", self.n, x.len()));
            }
            self.features_into(x.as_slice(), &mut row);
            for (c, v) in row.iter().enumerate() {
                m[(r, c)] = *v;
            }
        }
        Ok(m)
    }
}

/// `V̂(x) = wᵀφ(x)`, valid on the box `domain`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueApproximator {
    basis: MonomialBasis,
    weights: Vector,
    domain: BoxSet,
}

impl ValueApproximator {
    pub fn new(basis: MonomialBasis, weights: Vector, domain: BoxSet) -> Result<Self> {
        if weights.len() != basis.len() {
            return Err(Error::dim("weights", basis.len(), weights.len()));
        }
        if domain.dim() != basis.state_dim() {
            return Err(Error::dim("domain", basis.state_dim(), domain.dim()));
        }
        Ok(Self {
            basis,
            weights,
            domain,
        })
    }

    pub fn zero(basis: MonomialBasis, domain: BoxSet) -> Result<Self> {
        let w = Vector::zeros(basis.len());
        Self::new(basis, w, domain)
    }

    pub fn basis(&self) -> &MonomialBasis {
        &self.basis
    }

    pub fn weights(&self) -> &Vector {
        &self.weights
    }

    pub fn domain(&self) -> &BoxSet {
        &self.domain
    }

    pub fn state_dim(&self) -> usize {
        self.basis.state_dim()
    }

    pub fn with_weights(&self, weights: Vector) -> Result<Self> {
        Self::new(self.basis.clone(), weights, self.domain.clone())
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        Ok(self.basis.features(x)?.dot(&self.weights))
    }

    /// Unchecked evaluation for hot loops with known dimensions.
    pub(crate) fn eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.basis.n);
        let mut phi = vec![0.0; self.basis.len()];
        self.basis.features_into(x, &mut phi);
        phi.iter()
            .zip(self.weights.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ApproximatorRepr {
    n: usize,
    degrees: Vec<u32>,
    exponent_table: Vec<Vec<u32>>,
    weights: Vec<f64>,
    domain: BoxSet,
}

impl Serialize for ValueApproximator {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ApproximatorRepr {
            n: self.basis.n,
            degrees: self.basis.degrees.clone(),
            exponent_table: self.basis.exponents.clone(),
            weights: self.weights.iter().copied().collect(),
            domain: self.domain.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ValueApproximator {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = ApproximatorRepr::deserialize(d)?;
        let basis = MonomialBasis::new(repr.n, &repr.degrees).map_err(D::Error::custom)?;
        if basis.exponents != repr.exponent_table {
            return Err(D::Error::custom(
                "exponent_table does not match the graded lexicographic basis for the given degrees",
            ));
        }
        ValueApproximator::new(basis, Vector::from_vec(repr.weights), repr.domain)
            .map_err(D::Error::custom)
    }
}

/// Ridge least squares with the default ridge parameter.
pub fn fit_weights(basis: &MonomialBasis, states: &[Vector], targets: &[f64]) -> Result<Vector> {
    fit_weights_with_ridge(basis, states, targets, DEFAULT_RIDGE)
}

/// Minimizes `Σ (wᵀφ(x_s) − t_s)² + λ‖w‖²` through a Householder QR of the
/// ridge-augmented design matrix.
pub fn fit_weights_with_ridge(
    basis: &MonomialBasis,
    states: &[Vector],
    targets: &[f64],
    ridge: f64,
) -> Result<Vector> {
    if states.len() != targets.len() {
        return Err(Error::dim("targets", states.len(), targets.len()));
    }
    if ridge < 0.0 || !ridge.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "ridge must be nonnegative, got {ridge}"
        )));
    }
    let p = basis.len();
    let k = states.len();
    let phi = basis.design_matrix(states)?;
    let rows = if ridge > 0.0 { k + p } else { k };
    if rows < p {
        return Err(Error::RankDeficient {
            rank: rows,
            features: p,
        });
    }
    let mut a = DMatrix::zeros(rows, p);
    a.view_mut((0, 0), (k, p)).copy_from(&phi);
    let mut b = Vector::zeros(rows);
    b.rows_mut(0, k).copy_from_slice(targets);
    if ridge > 0.0 {
        let s = ridge.sqrt();
        for j in 0..p {
            a[(k + j, j)] = s;
        }
    }
    let qr = a.qr();
    let r = qr.r();
    let diag_max = r.diagonal().amax();
    let rank = r
        .diagonal()
        .iter()
        .filter(|d| d.abs() > 1e-12 * diag_max)
        .count();
    if rank < p {
        return Err(Error::RankDeficient { rank, features: p });
    }
    let qtb = qr.q().transpose() * b;
    r.solve_upper_triangular(&qtb)
        .ok_or(Error::RankDeficient { rank, features: p })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn domain(n: usize) -> BoxSet {
        BoxSet::symmetric(n, 1.0).unwrap()
    }

    #[test]
    fn feature_counts() {
        assert_eq!(MonomialBasis::quadratic_cubic(4).len(), 30);
        assert_eq!(MonomialBasis::new(4, &[2]).unwrap().len(), 10);
        assert_eq!(MonomialBasis::new(4, &[3]).unwrap().len(), 20);
        assert_eq!(MonomialBasis::quadratic_cubic(1).len(), 2);
    }

    #[test]
    fn graded_lex_order() {
        let b = MonomialBasis::new(2, &[3, 2]).unwrap();
        let expect: Vec<Vec<u32>> = vec![
            vec![2, 0],
            vec![1, 1],
            vec![0, 2],
            vec![3, 0],
            vec![2, 1],
            vec![1, 2],
            vec![0, 3],
        ];
        assert_eq!(b.exponent_table(), expect.as_slice());
        assert_eq!(b, MonomialBasis::new(2, &[2, 3, 3]).unwrap());
    }

    #[test]
    fn exponent_table_is_duplicate_free_with_correct_degrees() {
        let b = MonomialBasis::quadratic_cubic(4);
        let mut seen = std::collections::HashSet::new();
        for e in b.exponent_table() {
            let d: u32 = e.iter().sum();
            assert!(d == 2 || d == 3);
            assert!(seen.insert(e.clone()));
        }
    }

    #[test]
    fn rejects_low_degrees() {
        assert!(MonomialBasis::new(2, &[1, 2]).is_err());
        assert!(MonomialBasis::new(2, &[0]).is_err());
    }

    #[test]
    fn scalar_features_and_evaluation() {
        let b = MonomialBasis::quadratic_cubic(1);
        assert_eq!(b.features(&[2.0]).unwrap().as_slice(), &[4.0, 8.0]);
        assert_eq!(b.features(&[0.0]).unwrap().as_slice(), &[0.0, 0.0]);
        let v =
            ValueApproximator::new(b.clone(), Vector::from_vec(vec![1.0, 0.0]), domain(1)).unwrap();
        assert_eq!(v.evaluate(&[3.0]).unwrap(), 9.0);
        let v = v.with_weights(Vector::from_vec(vec![2.0, 1.0])).unwrap();
        assert_eq!(v.evaluate(&[-1.0]).unwrap(), 1.0);
        assert_eq!(v.evaluate(&[0.0]).unwrap(), 0.0);
        assert!(matches!(
            v.evaluate(&[1.0, 2.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn weights_length_checked() {
        let b = MonomialBasis::quadratic_cubic(2);
        assert!(ValueApproximator::new(b, Vector::zeros(3), domain(2)).is_err());
    }

    fn random_states(n: usize, k: usize, seed: u64) -> Vec<Vector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k)
            .map(|_| Vector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn fit_recovers_known_weights() {
        let b = MonomialBasis::quadratic_cubic(4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w0 = Vector::from_fn(b.len(), |_, _| rng.gen_range(-5.0..5.0));
        let states = random_states(4, 200, 12);
        let targets: Vec<f64> = states
            .iter()
            .map(|x| b.features(x.as_slice()).unwrap().dot(&w0))
            .collect();
        let w = fit_weights(&b, &states, &targets).unwrap();
        assert!(
            (&w - &w0).norm() <= 1e-8 * w0.norm(),
            "{:e}",
            (&w - &w0).norm()
        );
    }

    #[test]
    fn fit_zero_targets() {
        let b = MonomialBasis::quadratic_cubic(4);
        let states = random_states(4, 80, 13);
        let w = fit_weights(&b, &states, &[0.0; 80]).unwrap();
        assert!(w.norm() <= 1e-8);
    }

    #[test]
    fn fit_single_repeated_sample_uses_ridge() {
        let b = MonomialBasis::quadratic_cubic(4);
        let x = Vector::from_vec(vec![0.3, -0.2, 0.5, 0.1]);
        let states = vec![x.clone(); 40];
        let targets = vec![1.7; 40];
        let w = fit_weights(&b, &states, &targets).unwrap();
        let v = b.features(x.as_slice()).unwrap().dot(&w);
        assert!((v - 1.7).abs() <= 1e-6);
        assert!(matches!(
            fit_weights_with_ridge(&b, &states, &targets, 0.0),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn fit_length_mismatch() {
        let b = MonomialBasis::quadratic_cubic(2);
        let states = random_states(2, 10, 1);
        assert!(matches!(
            fit_weights(&b, &states, &[0.0; 9]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let b = MonomialBasis::quadratic_cubic(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Vector::from_fn(b.len(), |_, _| rng.gen_range(-1.0..1.0) / 3.0);
        let v = ValueApproximator::new(b, w, BoxSet::symmetric(4, 0.12).unwrap()).unwrap();
        let back = ValueApproximator::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(v, back);
        let json: serde_json::Value = serde_json::from_str(&v.to_json().unwrap()).unwrap();
        for key in ["n", "degrees", "exponent_table", "weights"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn json_rejects_reordered_table() {
        let v = ValueApproximator::zero(MonomialBasis::new(2, &[2]).unwrap(), domain(2)).unwrap();
        let mut json: serde_json::Value = serde_json::from_str(&v.to_json().unwrap()).unwrap();
        json["exponent_table"][0] = serde_json::json!([0, 2]);
        json["exponent_table"][2] = serde_json::json!([2, 0]);
        assert!(ValueApproximator::from_json(&json.to_string()).is_err());
    }

    proptest! {
        #[test]
        fn quadratic_block_is_two_homogeneous(
            xs in proptest::collection::vec(-1.0f64..1.0, 4),
            t in -3.0f64..3.0,
            seed in 0u64..1000,
        ) {
            let b = MonomialBasis::quadratic_cubic(4);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = Vector::from_fn(b.len(), |i, _| {
                if b.exponent_table()[i].iter().sum::<u32>() == 2 { rng.gen_range(-2.0..2.0) } else { 0.0 }
            });
            let v = ValueApproximator::new(b, w, domain(4)).unwrap();
            let x = Vector::from_vec(xs);
            let lhs = v.evaluate((&x * t).as_slice()).unwrap();
            let rhs = t * t * v.evaluate(x.as_slice()).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
        }

        #[test]
        fn any_weights_vanish_at_origin(seed in 0u64..1000) {
            let b = MonomialBasis::quadratic_cubic(3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = Vector::from_fn(b.len(), |_, _| rng.gen_range(-100.0..100.0));
            let v = ValueApproximator::new(b, w, domain(3)).unwrap();
            prop_assert_eq!(v.evaluate(&[0.0; 3]).unwrap(), 0.0);
        }
    }
}
