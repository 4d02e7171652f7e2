//! Reverse-mode gradients against central finite differences for every op.

use elicit_autodiff::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const ABS_TOL: f64 = 1e-7;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, with random sign.
fn nonzero_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.5..2.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Scalar objective: weighted sum of the op output with fixed pseudo-random weights.
fn objective<'t>(tape: &'t Tape, out: Var<'t>) -> Var<'t> {
    let shape = out.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let weights = tape.constant(Tensor::from_fn(&shape, |_| rng.random_range(-1.5..1.5)));
    out.mul(weights).unwrap().sum_all()
}

fn check<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = objective(&tape, f(&tape, &leaves));
    let grads = tape.backward(loss).unwrap();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        objective(&tape, f(&tape, &vars)).item()
    };

    for (which, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(*leaf).clone();
        for i in 0..inputs[which].numel() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let ad = analytic.data()[i];
            let abs_err = (ad - numeric).abs();
            let rel_err = abs_err / ad.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
            assert!(
                abs_err < ABS_TOL || rel_err < REL_TOL,
                "{name}: input {which} element {i}: reverse {ad} vs finite-difference {numeric}"
            );
        }
    }
}

#[test]
fn elementwise_binary_ops_with_broadcasting() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_tensor(&mut rng, &[2, 3, 4], -2.0, 2.0);
    let b = random_tensor(&mut rng, &[3, 1], -2.0, 2.0);
    let d = nonzero_tensor(&mut rng, &[4]);
    check("add", &[a.clone(), b.clone()], |_, v| v[0].add(v[1]).unwrap());
    check("subtract", &[a.clone(), b.clone()], |_, v| v[0].sub(v[1]).unwrap());
    check("multiply", &[a.clone(), b.clone()], |_, v| v[0].mul(v[1]).unwrap());
    check("divide", &[a.clone(), d], |_, v| v[0].div(v[1]).unwrap());
    check("multiply-self", &[a.clone()], |_, v| v[0].mul(v[0]).unwrap());
    let s = random_tensor(&mut rng, &[], -2.0, 2.0);
    check("scalar-broadcast", &[a, s], |_, v| v[1].mul(v[0]).unwrap().add(v[1]).unwrap());
}

#[test]
fn elementwise_unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_tensor(&mut rng, &[3, 5], -2.0, 2.0);
    let pos = random_tensor(&mut rng, &[3, 5], 0.1, 2.0);
    check("negate", &[x.clone()], |_, v| v[0].neg());
    check("affine", &[x.clone()], |_, v| v[0].affine(-1.7, 0.3));
    check("power", &[pos.clone()], |_, v| v[0].powf(2.5));
    check("square", &[x.clone()], |_, v| v[0].square());
    check("exponential", &[x.clone()], |_, v| v[0].exp());
    check("logarithm", &[pos.clone()], |_, v| v[0].ln().unwrap());
    check("square-root", &[pos], |_, v| v[0].sqrt().unwrap());
    check("absolute-value", &[x.clone()], |_, v| v[0].abs());
    check("sigmoid", &[x.clone()], |_, v| v[0].sigmoid());
    check("softplus", &[x.clone()], |_, v| v[0].softplus());
    check("tanh", &[x.clone()], |_, v| v[0].tanh());
    check("relu", &[x], |_, v| v[0].relu());
}

#[test]
fn matrix_multiply() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_tensor(&mut rng, &[2, 3, 4], -2.0, 2.0);
    let b = random_tensor(&mut rng, &[4, 5], -2.0, 2.0);
    check("matrix-multiply", &[a, b], |_, v| v[0].matmul(v[1]).unwrap());
}

#[test]
fn reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_tensor(&mut rng, &[2, 3, 4], -2.0, 2.0);
    check("sum", &[x.clone()], |_, v| v[0].sum(&[0, 2], false).unwrap());
    check("sum-keep", &[x.clone()], |_, v| v[0].sum(&[1], true).unwrap());
    check("mean", &[x.clone()], |_, v| v[0].mean(&[2], false).unwrap());
    check("variance", &[x.clone()], |_, v| v[0].variance(&[1, 2], false).unwrap());
    check("mean-all", &[x], |_, v| v[0].mean_all());
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(&mut rng, &[2, 3, 4], -2.0, 2.0);
    let y = random_tensor(&mut rng, &[2, 2, 4], -2.0, 2.0);
    check("reshape", &[x.clone()], |_, v| v[0].reshape(&[6, 4]).unwrap().square());
    check("concatenate", &[x.clone(), y], |t, v| t.concat(&[v[0], v[1]], 1).unwrap().square());
    check("slice", &[x.clone()], |_, v| v[0].slice(2, 1, 3).unwrap().square());
    check("gather", &[x.clone()], |_, v| v[0].gather(1, &[2, 0, 2]).unwrap().square());
    check("sort", &[x.clone()], |_, v| v[0].sort(2).unwrap());
    check("sort-middle-axis", &[x.clone()], |_, v| v[0].sort(1).unwrap());
    check("order-statistics", &[x.clone()], |_, v| v[0].order_statistics(2, &[3, 0, 1, 1]).unwrap());
    check("softmax", &[x], |_, v| v[0].softmax(2).unwrap());
}

#[test]
fn pairwise_euclidean_distance() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random_tensor(&mut rng, &[2, 3, 2], -2.0, 2.0);
    let b = random_tensor(&mut rng, &[2, 4, 2], -2.0, 2.0);
    check("pairwise-distance", &[a.clone(), b], |_, v| {
        v[0].pairwise_distance(v[1]).unwrap()
    });
    let one_d = random_tensor(&mut rng, &[3, 5, 1], -2.0, 2.0);
    check("pairwise-distance-self", &[one_d], |_, v| {
        v[0].pairwise_distance(v[0]).unwrap()
    });
}

#[test]
fn composite_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = random_tensor(&mut rng, &[3, 3], -1.0, 1.0);
    let x = random_tensor(&mut rng, &[5, 3], -2.0, 2.0);
    check("chain", &[w, x], |_, v| {
        let h = v[1].matmul(v[0]).unwrap().tanh();
        let s = h.softplus().sort(0).unwrap();
        s.mul(h.sigmoid()).unwrap().variance(&[0], true).unwrap()
    });
}

/// Gradient vector for `loss = sum(weights ⊙ f(x))` at `x`.
fn grad_of(x: &Tensor, weights: &Tensor, f: impl for<'t> Fn(Var<'t>) -> Var<'t>) -> Vec<f64> {
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let w = tape.constant(weights.clone());
    let loss = f(leaf).mul(w).unwrap().sum_all();
    tape.backward(loss).unwrap().wrt(leaf).data().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_is_linear(values in prop::collection::vec(-2.0f64..2.0, 6), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let x = Tensor::vector(values);
        let ones = Tensor::full(&[6], 1.0);
        fn f(v: Var<'_>) -> Var<'_> { v.tanh() }
        fn g(v: Var<'_>) -> Var<'_> { v.square() }
        let combined = grad_of(&x, &ones, |v| f(v).mul_scalar(a).add(g(v).mul_scalar(b)).unwrap());
        let gf = grad_of(&x, &ones, f);
        let gg = grad_of(&x, &ones, g);
        for i in 0..6 {
            let expected = a * gf[i] + b * gg[i];
            prop_assert!((combined[i] - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
        }
    }

    #[test]
    fn sort_gradient_preserves_sum(values in prop::collection::vec(-2.0f64..2.0, 1..20), seed in 0u64..1000) {
        let n = values.len();
        let x = Tensor::vector(values);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let upstream = Tensor::from_fn(&[n], |_| rng.random_range(-1.0..1.0));
        let g = grad_of(&x, &upstream, |v| v.sort(0).unwrap());
        let mut got = g.clone();
        let mut want = upstream.data().to_vec();
        prop_assert!((got.iter().sum::<f64>() - want.iter().sum::<f64>()).abs() < 1e-12);
        got.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        prop_assert_eq!(got, want);
    }

    #[test]
    fn order_statistics_agree_with_sort(values in prop::collection::vec(-3i32..3, 2..40), pick in prop::collection::vec(0usize..1000, 1..6)) {
        let n = values.len();
        let ranks: Vec<usize> = pick.iter().map(|r| r % n).collect();
        let x = Tensor::new(vec![1, n], values.iter().map(|&v| f64::from(v)).collect()).unwrap();
        let tape = Tape::new();
        let leaf = tape.leaf(x);
        let by_sort = leaf.sort(1).unwrap().gather(1, &ranks).unwrap();
        let by_select = leaf.order_statistics(1, &ranks).unwrap();
        let (a, b) = (by_sort.value().clone(), by_select.value().clone());
        prop_assert_eq!(a, b);
        let g_sort = tape.backward(by_sort.sum_all()).unwrap().wrt(leaf).clone();
        let g_select = tape.backward(by_select.sum_all()).unwrap().wrt(leaf).clone();
        prop_assert_eq!(g_sort, g_select);
    }

    #[test]
    fn identical_graphs_give_identical_gradients(values in prop::collection::vec(-2.0f64..2.0, 2..12)) {
        let x = Tensor::vector(values);
        let w = Tensor::full(x.shape(), 0.5);
        let run = || grad_of(&x, &w, |v| v.softplus().sort(0).unwrap().softmax(0).unwrap());
        let first = run();
        let second = run();
        prop_assert!(first.iter().zip(&second).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
