use fisar_core::ndcore::{Matrix, SeededRng, Tape, Var};
use fisar_core::Error;
use fisar_testkit::{central_gradient, rel_err};
use proptest::prelude::*;

const H: f64 = 1e-6;
const TOL: f64 = 1e-5;

/// Backward gradient and central-difference gradient of a scalar function
/// of one `rows × cols` leaf.
fn both_gradients(x: &[f64], rows: usize, cols: usize, f: impl Fn(&mut Tape, Var) -> Var) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let leaf = tape.leaf(Matrix::from_vec(rows, cols, x.to_vec()).unwrap());
    let out = f(&mut tape, leaf);
    let root = tape.sum(out);
    let analytic = tape.backward(root).unwrap().get(leaf).unwrap().as_slice().to_vec();
    let numeric = central_gradient(
        |p| {
            let mut t = Tape::new();
            let l = t.constant(Matrix::from_vec(rows, cols, p.to_vec()).unwrap());
            let o = f(&mut t, l);
            let r = t.sum(o);
            t.scalar(r)
        },
        x,
        H,
    );
    (analytic, numeric)
}

fn assert_close(name: &str, analytic: &[f64], numeric: &[f64]) {
    let err = rel_err(analytic, numeric, 1e-3);
    assert!(err <= TOL, "{name}: relative error {err:e}\n{analytic:?}\n{numeric:?}");
}

#[test]
fn square_and_constant() {
    let (g, _) = both_gradients(&[3.0], 1, 1, |t, x| t.mul(x, x));
    assert_eq!(g, vec![6.0]);
    let mut tape = Tape::new();
    let x = tape.leaf(Matrix::from_rows(&[[2.0]]));
    let c = tape.constant(Matrix::from_rows(&[[5.0]]));
    let zero = tape.scale(x, 0.0);
    let y = tape.add(c, zero);
    let grads = tape.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap()[(0, 0)], 0.0);
}

#[test]
fn unrecorded_leaf_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.leaf(Matrix::from_rows(&[[1.0]]));
    let unused = tape.leaf(Matrix::from_rows(&[[1.0]]));
    let y = tape.tanh(x);
    let grads = tape.backward(y).unwrap();
    assert!(matches!(grads.get(unused), Err(Error::UnrecordedLeaf(_))));
    let mut other = Tape::new();
    let foreign = other.leaf(Matrix::from_rows(&[[1.0]]));
    assert!(matches!(grads.get(foreign), Err(Error::UnrecordedLeaf(_))));
}

fn random_vec(rng: &mut SeededRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_range(lo, hi)).collect()
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = SeededRng::new(31);
    for _ in 0..20 {
        let x = random_vec(&mut rng, 6, -2.0, 2.0);
        let pos = random_vec(&mut rng, 6, 0.3, 3.0);
        let w = Matrix::from_vec(3, 4, random_vec(&mut rng, 12, -1.0, 1.0)).unwrap();
        let other = Matrix::from_vec(2, 3, random_vec(&mut rng, 6, 0.5, 2.0)).unwrap();

        let o = other.clone();
        let (a, n) = both_gradients(&x, 2, 3, move |t, v| {
            let c = t.constant(o.clone());
            let s = t.add(v, c);
            t.mul(s, s)
        });
        assert_close("add+mul", &a, &n);

        let o = other.clone();
        let (a, n) = both_gradients(&x, 2, 3, move |t, v| {
            let c = t.constant(o.clone());
            let d = t.sub(c, v);
            let e = t.mul(d, v);
            t.scale(e, -1.7)
        });
        assert_close("sub+scale", &a, &n);

        // The subtrahend's only adjoint comes through the subtraction.
        let o = other.clone();
        let (a, n) = both_gradients(&x, 2, 3, move |t, v| {
            let c = t.constant(o.clone());
            let d = t.sub(c, v);
            t.mul(d, d)
        });
        assert_close("subtrahend", &a, &n);

        let o = other.clone();
        let (a, n) = both_gradients(&pos, 2, 3, move |t, v| {
            let c = t.constant(o.clone());
            let q = t.div(c, v);
            let r = t.div(v, c);
            t.add(q, r)
        });
        assert_close("div", &a, &n);

        let wc = w.clone();
        let (a, n) = both_gradients(&x, 2, 3, move |t, v| {
            let m = t.constant(wc.clone());
            let p = t.matmul(v, m);
            t.mul(p, p)
        });
        assert_close("matmul left", &a, &n);

        let left = Matrix::from_vec(4, 3, random_vec(&mut rng, 12, -1.0, 1.0)).unwrap();
        let (a, n) = both_gradients(&w.as_slice().to_vec(), 3, 4, move |t, v| {
            let l = t.constant(left.clone());
            let p = t.matmul(l, v);
            t.tanh(p)
        });
        assert_close("matmul right+tanh", &a, &n);

        let (a, n) = both_gradients(&x, 2, 3, |t, v| t.sigmoid(v));
        assert_close("sigmoid", &a, &n);
        let (a, n) = both_gradients(&x, 2, 3, |t, v| t.exp(v));
        assert_close("exp", &a, &n);
        let (a, n) = both_gradients(&pos, 2, 3, |t, v| t.log(v));
        assert_close("log", &a, &n);

        let away: Vec<f64> = x.iter().map(|v| if v.abs() < 0.01 { v + 0.05 } else { *v }).collect();
        let (a, n) = both_gradients(&away, 2, 3, |t, v| {
            let m = t.max_const(v, 0.0);
            t.mul(m, v)
        });
        assert_close("max_const", &a, &n);
    }
}

struct Mlp {
    w1: Matrix,
    b1: Matrix,
    w2: Matrix,
    b2: Matrix,
    w3: Matrix,
}

fn mlp_loss(tape: &mut Tape, input: &Matrix, params: [Var; 5]) -> Var {
    let batch = input.rows();
    let x = tape.constant(input.clone());
    let ones = tape.constant(Matrix::filled(batch, 1, 1.0));
    let [w1, b1, w2, b2, w3] = params;
    let z1 = tape.matmul(x, w1);
    let bias1 = tape.matmul(ones, b1);
    let pre1 = tape.add(z1, bias1);
    let h1 = tape.tanh(pre1);
    let z2 = tape.matmul(h1, w2);
    let bias2 = tape.matmul(ones, b2);
    let pre2 = tape.add(z2, bias2);
    let h2 = tape.tanh(pre2);
    let out = tape.matmul(h2, w3);
    tape.sum(out)
}

fn flatten(m: &Mlp) -> Vec<f64> {
    [&m.w1, &m.b1, &m.w2, &m.b2, &m.w3].iter().flat_map(|x| x.as_slice().to_vec()).collect()
}

fn unflatten(shapes: &[(usize, usize)], flat: &[f64]) -> Vec<Matrix> {
    let mut at = 0;
    shapes
        .iter()
        .map(|&(r, c)| {
            let m = Matrix::from_vec(r, c, flat[at..at + r * c].to_vec()).unwrap();
            at += r * c;
            m
        })
        .collect()
}

fn check_mlp(seed: u64) {
    let mut rng = SeededRng::new(seed);
    let (d_in, h1, h2) = (3, 8, 5);
    let mut mat = |r: usize, c: usize| Matrix::from_vec(r, c, rng.normal_vec(r * c, 0.7).into_inner()).unwrap();
    let mlp = Mlp { w1: mat(d_in, h1), b1: mat(1, h1), w2: mat(h1, h2), b2: mat(1, h2), w3: mat(h2, 1) };
    let input = mat(6, d_in);
    let shapes = [(d_in, h1), (1, h1), (h1, h2), (1, h2), (h2, 1)];

    let mut tape = Tape::new();
    let vars = [
        tape.leaf(mlp.w1.clone()),
        tape.leaf(mlp.b1.clone()),
        tape.leaf(mlp.w2.clone()),
        tape.leaf(mlp.b2.clone()),
        tape.leaf(mlp.w3.clone()),
    ];
    let root = mlp_loss(&mut tape, &input, vars);
    let grads = tape.backward(root).unwrap();
    let analytic: Vec<f64> = vars.iter().flat_map(|v| grads.get(*v).unwrap().as_slice().to_vec()).collect();

    let numeric = central_gradient(
        |flat| {
            let ms = unflatten(&shapes, flat);
            let mut t = Tape::new();
            let vs = [0, 1, 2, 3, 4].map(|i| t.constant(ms[i].clone()));
            let r = mlp_loss(&mut t, &input, vs);
            t.scalar(r)
        },
        &flatten(&mlp),
        H,
    );
    assert_close("two-layer tanh mlp", &analytic, &numeric);
}

#[test]
fn two_layer_tanh_mlp_matches_finite_differences() {
    for seed in 0..10 {
        check_mlp(seed);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mlp_gradient_on_random_weights(seed in any::<u64>()) {
        check_mlp(seed);
    }

    #[test]
    fn backward_is_deterministic(seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let x = Matrix::from_vec(3, 3, rng.normal_vec(9, 1.0).into_inner()).unwrap();
        let run = || {
            let mut t = Tape::new();
            let v = t.leaf(x.clone());
            let p = t.matmul(v, v);
            let s = t.sigmoid(p);
            let r = t.sum(s);
            t.backward(r).unwrap().get(v).unwrap().clone()
        };
        prop_assert_eq!(run(), run());
    }
}
