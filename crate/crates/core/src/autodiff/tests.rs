use ndarray::array;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{numeric_gradient, relative_error};
use super::*;

fn random(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Matrix {
    Matrix::from_shape_fn(shape, |_| rng.random_range(-1.5..1.5))
}

fn positive(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Matrix {
    Matrix::from_shape_fn(shape, |_| rng.random_range(0.5..2.0))
}

type Build = fn(&mut Tape, Var, Var) -> Result<Var>;

struct Case {
    name: &'static str,
    build: Build,
    /// shapes of the two operands given (rows, cols) of the primary operand
    shapes: fn(usize, usize) -> ((usize, usize), (usize, usize)),
    positive: bool,
}

fn same(r: usize, c: usize) -> ((usize, usize), (usize, usize)) {
    ((r, c), (r, c))
}

fn cases() -> Vec<Case> {
    vec![
        Case { name: "matmul", build: |t, a, b| { let bt = t.transpose(b); t.matmul(a, bt) }, shapes: same, positive: false },
        Case { name: "add", build: |t, a, b| t.add(a, b), shapes: same, positive: false },
        Case { name: "add_row", build: |t, a, b| t.add(a, b), shapes: |r, c| ((r, c), (1, c)), positive: false },
        Case { name: "add_col", build: |t, a, b| t.add(b, a), shapes: |r, c| ((r, c), (r, 1)), positive: false },
        Case { name: "sub", build: |t, a, b| t.sub(a, b), shapes: same, positive: false },
        Case { name: "sub_scalar", build: |t, a, b| t.sub(b, a), shapes: |r, c| ((r, c), (1, 1)), positive: false },
        Case { name: "outer_sum", build: |t, a, b| { let bt = t.transpose(b); t.add(a, bt) }, shapes: |r, _| ((r, 1), (r, 1)), positive: false },
        Case { name: "hadamard", build: |t, a, b| t.mul(a, b), shapes: same, positive: false },
        Case { name: "hadamard_col", build: |t, a, b| t.mul(a, b), shapes: |r, c| ((r, c), (r, 1)), positive: false },
        Case { name: "div", build: |t, a, b| t.div(a, b), shapes: same, positive: true },
        Case { name: "div_col", build: |t, a, b| t.div(a, b), shapes: |r, c| ((r, c), (r, 1)), positive: true },
        Case { name: "scale", build: |t, a, _| Ok(t.scale(a, -1.7)), shapes: same, positive: false },
        Case { name: "shift", build: |t, a, b| { let s = t.shift(a, 0.3); t.mul(s, b) }, shapes: same, positive: false },
        Case { name: "sigmoid", build: |t, a, _| Ok(t.sigmoid(a)), shapes: same, positive: false },
        Case { name: "relu", build: |t, a, b| { let r = t.relu(a); t.mul(r, b) }, shapes: same, positive: false },
        Case { name: "leaky_relu", build: |t, a, b| { let r = t.leaky_relu(a, 0.2); t.mul(r, b) }, shapes: same, positive: false },
        Case { name: "exp", build: |t, a, _| Ok(t.exp(a)), shapes: same, positive: false },
        Case { name: "log", build: |t, a, _| Ok(t.log(a)), shapes: same, positive: true },
        Case { name: "sqrt", build: |t, a, _| Ok(t.sqrt(a)), shapes: same, positive: true },
        Case { name: "square", build: |t, a, _| Ok(t.square(a)), shapes: same, positive: false },
        Case { name: "softplus", build: |t, a, _| Ok(t.softplus(a)), shapes: same, positive: false },
        Case { name: "softmax_rows", build: |t, a, _| Ok(t.softmax_rows(a)), shapes: same, positive: false },
        Case { name: "sum", build: |t, a, b| { let s = t.sum(a); t.mul(s, b) }, shapes: same, positive: false },
        Case { name: "mean", build: |t, a, b| { let s = t.mean(a); t.mul(s, b) }, shapes: same, positive: false },
        Case { name: "col_sums", build: |t, a, b| { let s = t.col_sums(a); t.mul(s, b) }, shapes: same, positive: false },
        Case { name: "row_sums", build: |t, a, b| { let s = t.row_sums(a); t.mul(s, b) }, shapes: same, positive: false },
        Case { name: "transpose", build: |t, a, b| { let at = t.transpose(a); let bt = t.transpose(b); t.mul(at, bt) }, shapes: same, positive: false },
        Case { name: "concat_rows", build: |t, a, b| t.concat_rows(a, b), shapes: same, positive: false },
        Case { name: "row_slice", build: |t, a, b| { let r = t.shape(a).0; let s = t.row_slice(a, r / 2, r)?; let sb = t.row_slice(b, 0, r - r / 2)?; t.mul(s, sb) }, shapes: same, positive: false },
        Case { name: "col_slice", build: |t, a, b| { let c = t.shape(a).1; let s = t.col_slice(a, 0, c.div_ceil(2))?; let p = t.pad_cols(s, 0, c)?; t.mul(p, b) }, shapes: same, positive: false },
        Case { name: "gather_scatter", build: |t, a, b| { let r = t.shape(a).0; let idx: Vec<usize> = (0..r).rev().chain(0..1).collect(); let g = t.gather_rows(a, &idx)?; let sq = t.square(g); let s = t.scatter_rows(sq, &idx, r)?; t.mul(s, b) }, shapes: same, positive: false },
        Case { name: "frobenius_sq", build: |t, a, b| { let f = t.frobenius_sq(a); let bb = t.frobenius_sq(b); t.mul(f, bb) }, shapes: same, positive: false },
    ]
}

/// Builds `sum(op(a, b) * weight)` so every primitive reduces to a scalar.
fn scalarize(tape: &mut Tape, out: Var, weight: &Matrix) -> Var {
    let shape = tape.shape(out);
    let w = tape.constant(weight.slice(ndarray::s![..shape.0, ..shape.1]).to_owned());
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

fn eval_case(case: &Case, a: &Matrix, b: &Matrix, weight: &Matrix) -> f64 {
    let mut tape = Tape::new();
    let av = tape.param(a.clone());
    let bv = tape.param(b.clone());
    let out = (case.build)(&mut tape, av, bv).unwrap();
    let loss = scalarize(&mut tape, out, weight);
    tape.scalar(loss)
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in cases() {
        for trial in 0..100 {
            let r = rng.random_range(1..5);
            let c = rng.random_range(1..5);
            let (sa, sb) = (case.shapes)(r, c);
            let gen = |rng: &mut ChaCha8Rng, s| if case.positive { positive(rng, s) } else { random(rng, s) };
            let a = gen(&mut rng, sa);
            let b = gen(&mut rng, sb);
            let weight = random(&mut rng, (8, 8));

            let mut tape = Tape::new();
            let av = tape.param(a.clone());
            let bv = tape.param(b.clone());
            let out = (case.build)(&mut tape, av, bv).unwrap();
            let loss = scalarize(&mut tape, out, &weight);
            let grads = tape.grad(loss, &[av, bv]).unwrap();

            let na = numeric_gradient(|x| eval_case(&case, x, &b, &weight), &a, 1e-5);
            let nb = numeric_gradient(|x| eval_case(&case, &a, x, &weight), &b, 1e-5);
            let ea = relative_error(&grads[0], &na);
            let eb = relative_error(&grads[1], &nb);
            assert!(ea < 1e-6, "{} trial {trial}: lhs error {ea:e}", case.name);
            assert!(eb < 1e-6, "{} trial {trial}: rhs error {eb:e}", case.name);
        }
    }
}

/// `sum(d loss / d a * probe)`, with the inner gradient recorded on the tape.
fn directional_inner_grad(case: &Case, a: &Matrix, b: &Matrix, weight: &Matrix, probe: &Matrix) -> (f64, Matrix) {
    let mut tape = Tape::new();
    let av = tape.param(a.clone());
    let bv = tape.param(b.clone());
    let out = (case.build)(&mut tape, av, bv).unwrap();
    let loss = scalarize(&mut tape, out, weight);
    let g = tape.grad_graph(loss, &[av]).unwrap()[0];
    let p = tape.constant(probe.clone());
    let gp = tape.mul(g, p).unwrap();
    let outer = tape.sum(gp);
    let value = tape.scalar(outer);
    let second = tape.grad(outer, &[bv]).unwrap().remove(0);
    (value, second)
}

#[test]
fn nested_gradients_match_finite_differences_of_inner_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in cases() {
        for trial in 0..20 {
            let r = rng.random_range(1..4);
            let c = rng.random_range(1..4);
            let (sa, sb) = (case.shapes)(r, c);
            let gen = |rng: &mut ChaCha8Rng, s| if case.positive { positive(rng, s) } else { random(rng, s) };
            let a = gen(&mut rng, sa);
            let b = gen(&mut rng, sb);
            let weight = random(&mut rng, (8, 8));
            let probe = random(&mut rng, sa);

            let (_, analytic) = directional_inner_grad(&case, &a, &b, &weight, &probe);
            let numeric = numeric_gradient(
                |x| directional_inner_grad(&case, &a, x, &weight, &probe).0,
                &b,
                1e-3,
            );
            let err = relative_error(&analytic, &numeric);
            assert!(err < 1e-4, "{} trial {trial}: nested error {err:e}", case.name);
        }
    }
}

#[test]
fn primitive_examples() {
    let mut tape = Tape::new();
    let z = tape.constant(array![[0.0]]);
    let s = tape.sigmoid(z);
    assert_eq!(tape.scalar(s), 0.5);

    let ones = tape.constant(Matrix::ones((2, 2)));
    let f = tape.frobenius_sq(ones);
    assert_eq!(tape.scalar(f), 4.0);

    let row = tape.constant(array![[0.0, 0.0]]);
    let sm = tape.softmax_rows(row);
    assert_eq!(tape.value(sm), &array![[0.5, 0.5]]);
}

#[test]
fn derivative_examples() {
    let mut tape = Tape::new();
    let x = tape.param(array![[3.0]]);
    let y = tape.square(x);
    assert_eq!(tape.grad(y, &[x]).unwrap()[0][[0, 0]], 6.0);

    let x0 = tape.param(array![[0.0]]);
    let s = tape.sigmoid(x0);
    assert_eq!(tape.grad(s, &[x0]).unwrap()[0][[0, 0]], 0.25);
}

/// g(x) = d/dtheta (theta * x)^2 = 2 theta x^2; at theta = 1, dg/dx = 4x.
#[test]
fn nested_closed_form() {
    fn inner_grad_value(x: f64) -> f64 {
        let mut tape = Tape::new();
        let theta = tape.param(array![[1.0]]);
        let xv = tape.param(array![[x]]);
        let p = tape.mul(theta, xv).unwrap();
        let l = tape.square(p);
        tape.grad(l, &[theta]).unwrap()[0][[0, 0]]
    }

    let mut tape = Tape::new();
    let theta = tape.param(array![[1.0]]);
    let x = tape.param(array![[2.0]]);
    let p = tape.mul(theta, x).unwrap();
    let l = tape.square(p);
    let g = tape.grad_graph(l, &[theta]).unwrap()[0];
    assert_eq!(tape.scalar(g), 8.0); // 2 * 1 * 2^2
    let dg_dx = tape.grad(g, &[x]).unwrap()[0][[0, 0]];
    assert_eq!(dg_dx, 8.0);

    let fd = (inner_grad_value(2.0 + 1e-3) - inner_grad_value(2.0 - 1e-3)) / 2e-3;
    assert!((fd - 8.0).abs() < 1e-6);
}

#[test]
fn constant_has_exactly_zero_gradient() {
    let mut tape = Tape::new();
    let p = tape.param(array![[1.0, 2.0]]);
    let c = tape.constant(array![[5.0]]);
    let sq = tape.square(c);
    let zero = tape.grad(sq, &[p]).unwrap();
    assert_eq!(zero[0], Matrix::zeros((1, 2)));

    // a detached copy cuts the path as well
    let d = tape.detach(p);
    let s = tape.sum(d);
    assert_eq!(tape.grad(s, &[p]).unwrap()[0], Matrix::zeros((1, 2)));
}

#[test]
fn grad_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let p = tape.param(Matrix::ones((2, 2)));
    assert!(matches!(tape.grad(p, &[p]), Err(Error::NonScalarLoss((2, 2)))));
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Matrix::ones((2, 3)));
    let b = tape.constant(Matrix::ones((2, 3)));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("(2, 3)") && msg.contains("matmul"), "{msg}");
    let c = tape.constant(Matrix::ones((3, 2)));
    assert!(matches!(tape.add(a, c), Err(Error::Shape { op: "add", .. })));
}

#[test]
fn grad_discards_adjoint_nodes() {
    let mut tape = Tape::new();
    let x = tape.param(random(&mut ChaCha8Rng::seed_from_u64(1), (3, 3)));
    let y = tape.sigmoid(x);
    let l = tape.frobenius_sq(y);
    let before = tape.len();
    tape.grad(l, &[x]).unwrap();
    assert_eq!(tape.len(), before);
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut tape = Tape::new();
        let a = tape.param(random(&mut rng, (5, 4)));
        let b = tape.param(random(&mut rng, (4, 6)));
        let m = tape.matmul(a, b).unwrap();
        let s = tape.softmax_rows(m);
        let l = tape.frobenius_sq(s);
        let g = tape.grad(l, &[a, b]).unwrap();
        (tape.scalar(l).to_bits(), g)
    };
    assert_eq!(run(), run());
}

#[test]
fn grad_of_dispatches_on_create_graph() {
    let mut tape = Tape::new();
    let x = tape.param(array![[2.0]]);
    let mut params = ParamSet::new();
    params.push("x", x).unwrap();
    assert!(params.push("x", x).is_err());
    let y = tape.square(x);
    match tape.grad_of(y, &params, true).unwrap() {
        Grads::Graph(g) => assert_eq!(tape.scalar(g[0]), 4.0),
        Grads::Values(_) => panic!("expected graph gradients"),
    }
    match tape.grad_of(y, &params, false).unwrap() {
        Grads::Values(g) => assert_eq!(g[0][[0, 0]], 4.0),
        Grads::Graph(_) => panic!("expected values"),
    }
}
