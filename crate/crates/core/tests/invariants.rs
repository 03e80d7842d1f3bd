use std::sync::OnceLock;

use proptest::prelude::*;
use vimpc::approximator::{MonomialBasis, ValueApproximator};
use vimpc::closed_loop::{run_closed_loop, Artifacts, Controller, SimConfig};
use vimpc::horizon_cert::{compute_horizons, suboptimality_alpha};
use vimpc::models::{
    riccati_residual, solve_riccati, BoxSet, LinearModel, OrbitalRendezvous, SystemModel,
};
use vimpc::ocp_solver::{solve_ocp, OcpProblem, OcpSettings, TerminalCost};
use vimpc::value_iteration::{
    bellman_target, extract_policy, vi_run, InnerMinConfig, ViConfig, ViResult,
};
use vimpc::{Matrix, Vector};

fn v(xs: &[f64]) -> Vector {
    Vector::from_column_slice(xs)
}

fn scalar_model() -> LinearModel {
    LinearModel::scalar(0.5, 1.0, 1.0, 1.0, 10.0, 2.0).unwrap()
}

fn scalar_config(seed: u64) -> ViConfig {
    ViConfig {
        domain: BoxSet::symmetric(1, 1.0).unwrap(),
        n_train: 10,
        n_eval: 50,
        target_c_delta: 1e-6,
        rng_seed: seed,
        ..ViConfig::default()
    }
}

fn scalar_run(seed: u64) -> ViResult {
    let model = scalar_model();
    let cfg = scalar_config(seed);
    let v0 =
        ValueApproximator::zero(MonomialBasis::new(1, &[2]).unwrap(), cfg.domain.clone()).unwrap();
    vi_run(&model, &cfg, &InnerMinConfig::default(), &v0).unwrap()
}

fn scalar_vi() -> &'static ViResult {
    static CELL: OnceLock<ViResult> = OnceLock::new();
    CELL.get_or_init(|| scalar_run(3))
}

fn orbital() -> &'static OrbitalRendezvous {
    static CELL: OnceLock<OrbitalRendezvous> = OnceLock::new();
    CELL.get_or_init(OrbitalRendezvous::default)
}

fn state4() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-0.5f64..0.5, 4)
}

fn input2() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, 2)
}

#[test]
fn models_fix_the_origin_exactly() {
    let lin = LinearModel::new(
        Matrix::from_row_slice(2, 2, &[1.1, 0.3, 0.0, 0.9]),
        Matrix::from_row_slice(2, 1, &[0.0, 1.0]),
        Matrix::identity(2, 2),
        Matrix::identity(1, 1),
        BoxSet::symmetric(2, 1.0).unwrap(),
        BoxSet::symmetric(1, 1.0).unwrap(),
    )
    .unwrap();
    let models: [&dyn SystemModel; 3] = [orbital(), &scalar_model(), &lin];
    for m in models {
        let (x, u) = (Vector::zeros(m.state_dim()), Vector::zeros(m.input_dim()));
        assert_eq!(m.step(&x, &u).unwrap(), x);
        assert_eq!(m.stage_cost(&x, &u).unwrap(), 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn orbital_stage_cost_is_even(x in state4(), u in input2()) {
        let m = orbital();
        let a = m.stage_cost(&v(&x), &v(&u)).unwrap();
        let b = m.stage_cost(&-v(&x), &-v(&u)).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
    }

    #[test]
    fn orbital_state_cost_is_bracketed(x in state4()) {
        let m = orbital();
        let l = m.stage_cost(&v(&x), &Vector::zeros(2)).unwrap();
        let s2 = v(&x).norm_squared();
        prop_assert!(50.0 * s2 * (1.0 - 1e-12) <= l && l <= 50.0 * s2 * (1.0 + 1e-12));
    }

    #[test]
    fn riccati_residual_is_small(a in prop::collection::vec(-1.5f64..1.5, 4), b in prop::collection::vec(-1.0f64..1.0, 2)) {
        let a = Matrix::from_row_slice(2, 2, &a);
        let b = Matrix::from_row_slice(2, 1, &b);
        let ctrb = Matrix::from_columns(&[b.column(0).into_owned(), (&a * &b).column(0).into_owned()]);
        prop_assume!(ctrb.determinant().abs() > 0.1);
        let (q, r) = (Matrix::identity(2, 2), Matrix::identity(1, 1));
        let (p, _) = solve_riccati(&a, &b, &q, &r).unwrap();
        prop_assert!(riccati_residual(&a, &b, &q, &r, &p) <= 1e-9 * (1.0 + p.norm()));
    }

    #[test]
    fn quadratic_block_is_homogeneous(
        w in prop::collection::vec(-3.0f64..3.0, 10),
        x in state4(),
        t in -4.0f64..4.0,
    ) {
        let basis = MonomialBasis::new(4, &[2]).unwrap();
        let approx = ValueApproximator::new(basis, v(&w), BoxSet::symmetric(4, 1.0).unwrap()).unwrap();
        let xt: Vec<f64> = x.iter().map(|xi| t * xi).collect();
        let base = approx.evaluate(&x).unwrap();
        let scaled = approx.evaluate(&xt).unwrap();
        prop_assert!((scaled - t * t * base).abs() <= 1e-10 * (1.0 + (t * t * base).abs()));
    }
}

#[test]
fn basis_construction_is_stable() {
    let a = MonomialBasis::new(4, &[2, 3]).unwrap();
    let b = MonomialBasis::new(4, &[2, 3]).unwrap();
    assert_eq!(a.exponent_table(), b.exponent_table());
}

#[test]
fn value_iteration_is_deterministic() {
    let (a, b) = (scalar_run(9), scalar_run(9));
    assert_eq!(a.train_states, b.train_states);
    assert_eq!(a.eval_states, b.eval_states);
    assert_eq!(a.history, b.history);
    assert_eq!(a.approximator, b.approximator);
}

#[test]
fn fitted_successor_tracks_bellman_targets() {
    let r = scalar_vi();
    let model = scalar_model();
    let eta = scalar_config(3).origin_guard;
    for x in &r.train_states {
        let (target, _) =
            bellman_target(&r.approximator, &model, x, &InnerMinConfig::default()).unwrap();
        let fit = r.successor.evaluate(x.as_slice()).unwrap();
        let scale = model.stage_cost(x, &Vector::zeros(1)).unwrap().max(eta);
        assert!((fit - target).abs() / scale <= r.c_e_measured + 1e-12);
    }
}

#[test]
fn stopping_rule_is_sound() {
    let r = scalar_vi();
    assert!(r.converged);
    let model = scalar_model();
    let eta = scalar_config(3).origin_guard;
    for x in &r.eval_states {
        let diff = r.successor.evaluate(x.as_slice()).unwrap()
            - r.approximator.evaluate(x.as_slice()).unwrap();
        let scale = model.stage_cost(x, &Vector::zeros(1)).unwrap().max(eta);
        assert!(diff.abs() / scale <= 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn policy_beats_probe_inputs(x in -1.0f64..1.0, probes in prop::collection::vec(-2.0f64..2.0, 10)) {
        let r = scalar_vi();
        let model = scalar_model();
        let score = |u: f64| {
            let (xv, uv) = (v(&[x]), v(&[u]));
            model.stage_cost(&xv, &uv).unwrap()
                + r.approximator.evaluate(model.step(&xv, &uv).unwrap().as_slice()).unwrap()
        };
        let h = extract_policy(&r.approximator, &model, &v(&[x]), &InnerMinConfig::default()).unwrap()[0];
        for u in probes {
            prop_assert!(score(h) <= score(u) + 1e-8);
        }
    }

    #[test]
    fn horizon_ordering_and_monotonicity(
        gamma in 1.01f64..50.0,
        eps in 0.01f64..5.0,
        ratio in 1.0f64..1000.0,
        share in 0.0f64..1.0,
    ) {
        let v_bar = ratio * eps;
        let grid: Vec<_> = (0..100)
            .map(|i| {
                let s = 0.99 * i as f64 / 99.0;
                compute_horizons(gamma, eps, v_bar, share * s, (1.0 - share) * s).unwrap()
            })
            .collect();
        for (i, c) in grid.iter().enumerate() {
            prop_assert!(c.n_vbar >= c.n_omega && c.n_omega >= c.n_0);
            if 0.99 * i as f64 / 99.0 <= 0.5 {
                prop_assert_eq!(c.n_vbar, c.n_omega);
            }
        }
        prop_assert!(grid.windows(2).all(|w| w[1].n_vbar >= w[0].n_vbar));
    }

    #[test]
    fn alpha_increases_to_its_limit(
        gamma in 1.01f64..50.0,
        ratio in 1.0f64..1000.0,
        c_e in 0.0f64..0.45,
        c_delta in 0.0f64..0.45,
    ) {
        let c = compute_horizons(gamma, 1.0, ratio, c_e, c_delta).unwrap();
        let start = (c.n_lower + 1).max(1) as usize;
        let mut prev = suboptimality_alpha(&c, start).unwrap();
        for n in start + 1..start + 200 {
            let a = suboptimality_alpha(&c, n).unwrap();
            prop_assert!(a >= prev);
            prev = a;
        }
        let far = suboptimality_alpha(&c, start + 10_000).unwrap();
        prop_assert!((far - 1.0 / (1.0 + c_e)).abs() <= 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ocp_value_bounds_stage_cost_and_is_reproducible(x0 in -1.0f64..1.0, horizon in 1usize..6) {
        let terminal = TerminalCost::Approximator(scalar_vi().approximator.clone());
        let (model, x) = (scalar_model(), v(&[x0]));
        let problem = OcpProblem { model: &model, horizon, terminal: &terminal, x0: x.clone(), settings: OcpSettings::default() };
        let a = solve_ocp(&problem, None).unwrap();
        let b = solve_ocp(&problem, None).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(model.stage_cost(&x, &Vector::zeros(1)).unwrap() <= a.value + 1e-12);
    }

    #[test]
    fn exact_terminal_makes_value_horizon_free(x0 in -1.0f64..1.0) {
        let p = scalar_vi().approximator.weights()[0];
        let terminal = TerminalCost::Quadratic {
            p: Matrix::from_element(1, 1, p),
            k: Matrix::from_element(1, 1, 0.5 * p / (1.0 + p)),
        };
        let model = scalar_model();
        let values: Vec<f64> = (1..5)
            .map(|horizon| {
                let problem = OcpProblem {
                    model: &model,
                    horizon,
                    terminal: &terminal,
                    x0: v(&[x0]),
                    settings: OcpSettings::default(),
                };
                solve_ocp(&problem, None).unwrap().value
            })
            .collect();
        for w in values.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-6 && (w[1] - w[0]).abs() <= 1e-6);
        }
    }

    #[test]
    fn closed_loop_replays_bitwise(x0 in -1.0f64..1.0) {
        let model = scalar_model();
        let art = Artifacts { approximator: Some(&scalar_vi().approximator), ..Default::default() };
        let cfg = SimConfig { steps: 8, ..SimConfig::new(Controller::AdpMpc, 3, vec![x0]) };
        let t = run_closed_loop(&model, &cfg, &art).unwrap();
        let mut x = t.states[0].clone();
        for (k, u) in t.inputs.iter().enumerate() {
            x = model.step(&x, u).unwrap();
            prop_assert_eq!(&x, &t.states[k + 1]);
        }
    }
}
