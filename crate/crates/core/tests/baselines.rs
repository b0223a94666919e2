use fisar_core::baselines::{baseline_step, projected_pg_step, AdaptiveState, Rule};
use fisar_core::constraint_dynamics::{build_update_polytope, ConstraintEval, KappaFn};
use fisar_core::ndcore::{Matrix, Vector};
use fisar_core::projection::ProjectionMetric;
use proptest::prelude::*;
use serde::Deserialize;

#[derive(Deserialize)]
struct Fixture {
    h: Vec<f64>,
    c: Vec<f64>,
    theta0: Vec<f64>,
    lr: f64,
    traces: std::collections::BTreeMap<String, Vec<Vec<f64>>>,
}

fn fixture() -> Fixture {
    let text = include_str!("fixtures/baseline_traces.json");
    serde_json::from_str(text).unwrap()
}

#[test]
fn traces_match_reference_bit_for_bit() {
    let fx = fixture();
    for rule in [Rule::Sgd, Rule::Adam, Rule::RmsProp] {
        let expected = &fx.traces[rule.name()];
        let mut state = AdaptiveState::new(rule, fx.theta0.len());
        let mut theta = fx.theta0.clone();
        for (k, row) in expected.iter().enumerate() {
            let g: Vec<f64> = (0..theta.len()).map(|i| fx.h[i] * theta[i] - fx.c[i]).collect();
            state.step(&mut theta, &g, fx.lr).unwrap();
            for i in 0..theta.len() {
                assert_eq!(theta[i].to_bits(), row[i].to_bits(), "{rule:?} step {k} coord {i}");
            }
        }
        assert_eq!(state.steps(), 10);
    }
}

#[test]
fn gradient_across_active_halfspace_is_turned() {
    let cons = ConstraintEval::new(Vector::from(vec![0.0]), Matrix::from_rows(&[[1.0, 1.0]])).unwrap();
    let poly = build_update_polytope(&cons, KappaFn::default()).unwrap();
    let metric = ProjectionMetric::build(poly.a(), 1.0).unwrap();
    let theta = [0.2, -0.2];
    let next = projected_pg_step(&theta, &[3.0, 1.0], &poly, &metric, 0.01).unwrap();
    let step = [next[0] - theta[0], next[1] - theta[1]];
    assert!(step[0] + step[1] <= 1e-10);
}

proptest! {
    #[test]
    fn projected_step_stays_in_polytope(
        c in prop::collection::vec(-2.0f64..2.0, 2),
        grads in prop::collection::vec(-1.0f64..1.0, 8),
        raw in prop::collection::vec(-5.0f64..5.0, 4),
    ) {
        let a = Matrix::from_vec(2, 4, grads).unwrap();
        prop_assume!(fisar_core::projection::gram_factor(&a).is_ok());
        let cons = ConstraintEval::new(Vector::from(c), a).unwrap();
        let poly = build_update_polytope(&cons, KappaFn::default()).unwrap();
        let metric = ProjectionMetric::build(poly.a(), 1.0).unwrap();
        let beta = 0.001;
        let next = projected_pg_step(&[0.0; 4], &raw, &poly, &metric, beta).unwrap();
        let dir = next.scaled(1.0 / beta);
        prop_assert!(poly.max_violation(&dir) <= 1e-10);
    }

    #[test]
    fn counter_and_shape_preserved(g in prop::collection::vec(-10.0f64..10.0, 5), steps in 1usize..20) {
        for rule in [Rule::Sgd, Rule::Adam, Rule::RmsProp] {
            let mut st = AdaptiveState::new(rule, 5);
            let mut theta = Vector::zeros(5);
            for _ in 0..steps {
                let (t, s) = baseline_step(&st, &theta, &g, 0.01).unwrap();
                theta = t;
                st = s;
            }
            prop_assert_eq!(st.steps(), steps as u64);
            prop_assert!(theta.is_finite());
        }
    }
}
