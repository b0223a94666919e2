use fisar_core::ndcore::{cholesky_solve, Matrix, SeededRng};
use fisar_core::Error;
use fisar_testkit::exact_residual_max;
use fisar_testkit::nalgebra::DMatrix;

fn random_orthogonal(n: usize, rng: &mut SeededRng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.normal());
    g.qr().q()
}

/// `U diag(λ) Uᵀ` with eigenvalues log-spaced over `[1/cond, 1]`.
fn spd_with_condition(n: usize, cond: f64, rng: &mut SeededRng) -> Matrix {
    let u = random_orthogonal(n, rng);
    let eig: Vec<f64> = (0..n).map(|i| cond.powf(-(i as f64) / (n - 1) as f64)).collect();
    let s = &u * DMatrix::from_diagonal(&eig.into()) * u.transpose();
    let s = (&s + s.transpose()) * 0.5;
    Matrix::from_vec(n, n, s.transpose().as_slice().to_vec()).unwrap()
}

fn residual_ratio(s: &Matrix, x: &Matrix, b: &Matrix) -> f64 {
    exact_residual_max(s.as_slice(), x.as_slice(), b.as_slice(), s.rows(), b.cols()) / b.max_abs()
}

#[test]
fn identity_and_scalar() {
    let x = cholesky_solve(&Matrix::identity(2), &Matrix::identity(2)).unwrap();
    assert_eq!(x, Matrix::identity(2));
    let x = cholesky_solve(&Matrix::from_rows(&[[4.0]]), &Matrix::from_rows(&[[2.0]])).unwrap();
    assert_eq!(x[(0, 0)], 0.5);
}

#[test]
fn random_lower_triangular_products() {
    let mut rng = SeededRng::new(101);
    for n in [1, 2, 5, 12, 30] {
        let mut l = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..i {
                l[(i, j)] = rng.normal() / (n as f64).sqrt();
            }
            l[(i, i)] = 1.0 + rng.uniform();
        }
        let s = l.matmul_tr(&l);
        let b = Matrix::from_vec(n, 3, rng.normal_vec(3 * n, 1.0).into_inner()).unwrap();
        let x = cholesky_solve(&s, &b).unwrap();
        assert!(residual_ratio(&s, &x, &b) <= 1e-9, "n={n}");
    }
}

#[test]
fn residual_bound_up_to_condition_1e7() {
    let mut rng = SeededRng::new(7);
    for _ in 0..10 {
        for cond in [1e2, 1e4, 1e6, 1e7] {
            for n in [4, 10, 25, 50] {
                let s = spd_with_condition(n, cond, &mut rng);
                let b = Matrix::from_vec(n, 2, rng.normal_vec(2 * n, 1.0).into_inner()).unwrap();
                let x = cholesky_solve(&s, &b).unwrap();
                let r = residual_ratio(&s, &x, &b);
                assert!(r <= 1e-9, "cond {cond:e} n {n}: residual ratio {r:e}");
            }
        }
    }
}

// At condition 1e8 even the correctly rounded solution can leave a residual
// of a few 1e-9 (‖S‖·ulp(X) with ‖X‖ ≈ 1e8‖B‖). Compare against that floor:
// rounding each entry of X by one ulp must not improve on the returned X by
// more than a small factor.
#[test]
fn residual_at_condition_1e8_is_at_rounding_floor() {
    let mut rng = SeededRng::new(8);
    let mut within_1e9 = 0;
    let trials = 40;
    for _ in 0..trials {
        let n = 10;
        let s = spd_with_condition(n, 1e8, &mut rng);
        let b = Matrix::from_vec(n, 1, rng.normal_vec(n, 1.0).into_inner()).unwrap();
        let x = cholesky_solve(&s, &b).unwrap();
        let r = residual_ratio(&s, &x, &b);
        let ulp_floor = (0..n).map(|k| s[(k, k)] * x[(k, 0)].abs() * f64::EPSILON).fold(0.0, f64::max) / b.max_abs();
        assert!(r <= 1e-8, "residual ratio {r:e}");
        assert!(r <= 64.0 * ulp_floor.max(f64::EPSILON), "residual {r:e} vs ulp floor {ulp_floor:e}");
        within_1e9 += usize::from(r <= 1e-9);
    }
    assert!(within_1e9 * 10 >= trials * 8, "{within_1e9}/{trials} within 1e-9");
}

#[test]
fn indefinite_is_rejected() {
    let s = Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]);
    assert!(matches!(cholesky_solve(&s, &Matrix::identity(2)), Err(Error::NotPositiveDefinite { .. })));
}
