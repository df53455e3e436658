mod common;

use common::{random, random_param, rng};
use maf_core::tensor::gradcheck::{check_params, numerical_gradient, relative_error, DEFAULT_STEP};
use maf_core::tensor::{Graph, Tensor, TensorError, Var};
use proptest::prelude::*;

fn check(
    params: Vec<Tensor>,
    tol: f64,
    loss: impl Fn(&Vec<Tensor>, &mut Graph) -> maf_core::tensor::Result<Var>,
) {
    let mut params = params;
    let report = check_params(&mut params, loss, DEFAULT_STEP).unwrap();
    assert!(report.passes(tol), "{report}");
}

/// A fixed random projection turns any output into a scalar with a
/// non-trivial upstream gradient.
fn project(g: &mut Graph, out: Var, seed_name: &str) -> maf_core::tensor::Result<Var> {
    let w = random(g.shape(out), &mut rng(seed_name));
    let w = g.constant(&w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

#[test]
fn matmul_hand_cases() {
    let mut g = Graph::new();
    let id = g.constant(&Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let m = Tensor::from_rows(&[vec![1.5, -2.0], vec![3.0, 4.25]]).unwrap();
    let mv = g.constant(&m);
    let out = g.matmul(id, mv).unwrap();
    assert_eq!(g.value(out), m.data());

    let a = g.constant(&Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let b = g.constant(&Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
    let out = g.matmul(a, b).unwrap();
    assert_eq!(g.value(out), [11.0]);
    assert_eq!(g.shape(out), [1, 1]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(&Tensor::zeros(&[2, 3]));
    let b = g.constant(&Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    assert!(matches!(err, TensorError::Shape { .. }));
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn matmul_gradient_of_sum() {
    let mut r = rng("matmul");
    check(
        vec![random_param(&[3, 4], &mut r), random_param(&[4, 2], &mut r)],
        1e-6,
        |p, g| {
            let (a, b) = (g.param(&p[0]), g.param(&p[1]));
            let out = g.matmul(a, b)?;
            Ok(g.sum(out))
        },
    );
}

#[test]
fn elementwise_identities_and_gradients() {
    let x = random(&[2, 3], &mut rng("x"));
    let mut g = Graph::new();
    let xv = g.constant(&x);
    let z = g.constant(&Tensor::zeros_like(&x));
    let o = g.constant(&Tensor::ones_like(&x));
    let s = g.add(xv, z).unwrap();
    assert_eq!(g.value(s), x.data());
    let m = g.mul(xv, o).unwrap();
    assert_eq!(g.value(m), x.data());

    let mut r = rng("mul");
    check(
        vec![random_param(&[2, 3], &mut r), random_param(&[2, 3], &mut r)],
        1e-6,
        |p, g| {
            let (a, b) = (g.param(&p[0]), g.param(&p[1]));
            let out = g.mul(a, b)?;
            project(g, out, "mul.w")
        },
    );
    check(
        vec![random_param(&[2, 3], &mut r), random_param(&[3], &mut r)],
        1e-6,
        |p, g| {
            let (a, b) = (g.param(&p[0]), g.param(&p[1]));
            let s = g.sub(a, b)?;
            let out = g.add(s, b)?;
            let out = g.mul(out, b)?;
            project(g, out, "bcast.w")
        },
    );
}

#[test]
fn broadcasting_follows_trailing_axes() {
    let mut g = Graph::new();
    let a = g.constant(&Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap());
    let row = g.constant(&Tensor::new(&[3], vec![10.0, 20.0, 30.0]).unwrap());
    let out = g.add(a, row).unwrap();
    assert_eq!(g.value(out), [11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    let column = g.constant(&Tensor::new(&[2, 1], vec![2.0, 3.0]).unwrap());
    let out = g.mul(a, column).unwrap();
    assert_eq!(g.value(out), [2.0, 4.0, 6.0, 12.0, 15.0, 18.0]);
    let bad = g.constant(&Tensor::zeros(&[2]));
    assert!(matches!(
        g.add(a, bad).unwrap_err(),
        TensorError::Shape { .. }
    ));
}

#[test]
fn softmax_closed_forms_and_jvp() {
    let mut g = Graph::new();
    let x = g.constant(&Tensor::zeros(&[1, 3]));
    let s = g.softmax_rows(x).unwrap();
    for v in g.value(s) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let (x0, c) = (0.7, -1.3);
    let x = g.constant(&Tensor::new(&[1, 2], vec![x0, x0 + c]).unwrap());
    let s = g.softmax_rows(x).unwrap();
    let sig = |t: f64| 1.0 / (1.0 + (-t).exp());
    assert!((g.value(s)[0] - sig(-c)).abs() < 1e-15);
    assert!((g.value(s)[1] - sig(c)).abs() < 1e-15);

    // directional derivative along a random v, against central differences
    let input = random(&[2, 4], &mut rng("softmax.x"));
    let dir = random(&[2, 4], &mut rng("softmax.v"));
    let w = random(&[2, 4], &mut rng("softmax.w"));
    let f = |x: &[f64]| {
        let mut g = Graph::new();
        let xv = g.constant_from(&[2, 4], x.to_vec()).unwrap();
        let s = g.softmax_rows(xv).unwrap();
        g.value(s)
            .iter()
            .zip(w.data())
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    let mut g = Graph::new();
    let xv = g.param(&input.clone().with_grad());
    let s = g.softmax_rows(xv).unwrap();
    let wv = g.constant(&w);
    let p = g.mul(s, wv).unwrap();
    let l = g.sum(p);
    g.backward(l).unwrap();
    let analytic: f64 = g
        .grad(xv)
        .unwrap()
        .iter()
        .zip(dir.data())
        .map(|(a, b)| a * b)
        .sum();
    let h = 1e-5;
    let plus: Vec<f64> = input
        .data()
        .iter()
        .zip(dir.data())
        .map(|(x, v)| x + h * v)
        .collect();
    let minus: Vec<f64> = input
        .data()
        .iter()
        .zip(dir.data())
        .map(|(x, v)| x - h * v)
        .collect();
    let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
    assert!(relative_error(&[analytic], &[numeric]) < 1e-5);
}

#[test]
fn sigmoid_values_and_gradient() {
    let mut g = Graph::new();
    let z = g.constant(&Tensor::zeros(&[1]));
    let s = g.sigmoid(z);
    assert_eq!(g.value(s), [0.5]);
    let x = random(&[3, 3], &mut rng("sig"));
    let neg = Tensor::new(&[3, 3], x.data().iter().map(|v| -v).collect()).unwrap();
    let (a, b) = (g.constant(&x), g.constant(&neg));
    let (sa, sb) = (g.sigmoid(a), g.sigmoid(b));
    for (p, q) in g.value(sa).iter().zip(g.value(sb)) {
        assert!((p + q - 1.0).abs() < 1e-15);
        assert!(*p > 0.0 && *p < 1.0);
    }
    check(
        vec![random_param(&[3, 3], &mut rng("sig.p"))],
        1e-6,
        |p, g| {
            let a = g.param(&p[0]);
            let out = g.sigmoid(a);
            project(g, out, "sig.w")
        },
    );
}

#[test]
fn concat_cases_and_gradient() {
    let mut g = Graph::new();
    let a = g.constant(&Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap());
    let b = g.constant(&Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
    let c = g.concat_last(a, b).unwrap();
    assert_eq!(g.value(c), [1.0, 3.0, 2.0, 4.0]);
    let x = random(&[2, 3], &mut rng("cat.x"));
    let xv = g.constant(&x);
    let empty = g.constant(&Tensor::zeros(&[2, 0]));
    let c = g.concat_last(xv, empty).unwrap();
    assert_eq!(g.value(c), x.data());
    assert_eq!(g.shape(c), [2, 3]);
    let wrong = g.constant(&Tensor::zeros(&[3, 1]));
    assert!(matches!(
        g.concat_last(xv, wrong).unwrap_err(),
        TensorError::Shape { .. }
    ));

    let mut r = rng("cat");
    check(
        vec![random_param(&[2, 2], &mut r), random_param(&[2, 3], &mut r)],
        1e-6,
        |p, g| {
            let (a, b) = (g.param(&p[0]), g.param(&p[1]));
            let out = g.concat_last(a, b)?;
            project(g, out, "cat.w")
        },
    );
}

#[test]
fn backward_closed_forms_and_accumulation() {
    let x = random_param(&[2, 3], &mut rng("bw"));
    let mut g = Graph::new();
    let xv = g.param(&x);
    let l = g.sum(xv);
    g.backward(l).unwrap();
    assert!(g.grad(xv).unwrap().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let xv = g.param(&x);
    let sq = g.mul(xv, xv).unwrap();
    let l = g.sum(sq);
    g.backward(l).unwrap();
    for (gr, v) in g.grad(xv).unwrap().iter().zip(x.data()) {
        assert!((gr - 2.0 * v).abs() < 1e-15);
    }
    // a second backward without zeroing adds the same gradient again
    g.backward(l).unwrap();
    for (gr, v) in g.grad(xv).unwrap().iter().zip(x.data()) {
        assert!((gr - 4.0 * v).abs() < 1e-14);
    }
    let err = g.backward(sq).unwrap_err();
    assert!(matches!(err, TensorError::Contract { .. }));
}

#[test]
fn numerical_gradient_matches_closed_form() {
    let mut x = vec![0.3, -1.2, 2.0];
    let num = numerical_gradient(&mut x, |v| v.iter().map(|t| t.sin()).sum(), 1e-5);
    let exact: Vec<f64> = x.iter().map(|t| t.cos()).collect();
    assert!(relative_error(&num, &exact) < 1e-9);
}

#[derive(Debug, Clone)]
enum Step {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    Softmax,
    MatmulSquare,
    ConcatSlice,
    Affine(f64),
}

fn step_strategy() -> impl Strategy<Value = Step> {
    prop_oneof![
        Just(Step::Add),
        Just(Step::Sub),
        Just(Step::Mul),
        Just(Step::Sigmoid),
        Just(Step::Tanh),
        Just(Step::Softmax),
        Just(Step::MatmulSquare),
        Just(Step::ConcatSlice),
        (-2.0..2.0f64).prop_map(Step::Affine),
    ]
}

fn values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.5..1.5f64, len)
}

/// Runs `steps` over two n x m leaves plus an m x m matrix.
fn composed(steps: &[Step], p: &[Tensor], g: &mut Graph) -> maf_core::tensor::Result<Var> {
    let (a, b, w) = (g.param(&p[0]), g.param(&p[1]), g.param(&p[2]));
    let m = g.shape(a)[1];
    let mut x = a;
    for s in steps {
        x = match s {
            Step::Add => g.add(x, b)?,
            Step::Sub => g.sub(b, x)?,
            Step::Mul => g.mul(x, b)?,
            Step::Sigmoid => g.sigmoid(x),
            Step::Tanh => g.tanh(x),
            Step::Softmax => g.softmax_rows(x)?,
            Step::MatmulSquare => g.matmul(x, w)?,
            Step::ConcatSlice => {
                let c = g.concat_last(x, b)?;
                g.slice_last(c, m / 2, m)?
            }
            Step::Affine(f) => g.affine(x, *f, 0.25),
        };
    }
    let out = g.mul(x, x)?;
    Ok(g.sum(out))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn composed_graphs_match_finite_differences(
        (n, m) in (1usize..=6, 1usize..=6),
        steps in prop::collection::vec(step_strategy(), 1..=8),
        seed in any::<u64>(),
    ) {
        let mut r = maf_core::tensor::component_rng(seed, "compose");
        let mut p = vec![random_param(&[n, m], &mut r), random_param(&[n, m], &mut r), random_param(&[m, m], &mut r)];
        let report = check_params(&mut p, |p, g| composed(&steps, p, g), DEFAULT_STEP).unwrap();
        prop_assert!(report.passes(1e-4), "{:?}\n{}", steps, report);
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..=5, cols in 1usize..=8, data in values(40), scale in 0.0..=50.0f64) {
        let data: Vec<f64> = data[..rows * cols].iter().map(|v| v / 1.5 * scale).collect();
        let mut g = Graph::new();
        let x = g.constant_from(&[rows, cols], data).unwrap();
        let s = g.softmax_rows(x).unwrap();
        for row in g.value(s).chunks(cols) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_and_backward_are_deterministic(
        steps in prop::collection::vec(step_strategy(), 1..=8),
        seed in any::<u64>(),
    ) {
        let run = || {
            let mut r = maf_core::tensor::component_rng(seed, "det");
            let p = vec![random_param(&[3, 4], &mut r), random_param(&[3, 4], &mut r), random_param(&[4, 4], &mut r)];
            let mut g = Graph::new();
            let l = composed(&steps, &p, &mut g).unwrap();
            g.backward(l).unwrap();
            let leaves: Vec<Var> = p.iter().map(|t| g.param_var(t).unwrap()).collect();
            let mut bits: Vec<u64> = vec![g.value(l)[0].to_bits()];
            for v in leaves {
                bits.extend(g.grad(v).unwrap().iter().map(|x| x.to_bits()));
            }
            bits
        };
        prop_assert_eq!(run(), run());
    }
}
