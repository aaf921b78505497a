use parody_core::rng::stream;
use parody_core::tensorcore::{
    bce_with_logits, gradient_check, sigmoid, ParamSet, Tape, Tensor, Var,
};
use proptest::prelude::*;
use rand::Rng;

fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                out[i * n + j] += a[i * k + t] * b[t * n + j];
            }
        }
    }
    out
}

fn product(a: Tensor, b: Tensor) -> Vec<f64> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(a).unwrap(), tape.constant(b).unwrap());
    let c = tape.matmul(a, b).unwrap();
    tape.value(c).values().to_vec()
}

fn softmax_of(x: &[f64]) -> Vec<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::vector(x.to_vec()).unwrap()).unwrap();
    let s = tape.softmax(v, 0).unwrap();
    tape.value(s).values().to_vec()
}

fn norm_of(x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::vector(x.to_vec()).unwrap()).unwrap();
    let g = tape.constant(Tensor::full(&[d], 1.0)).unwrap();
    let b = tape.constant(Tensor::zeros(&[d])).unwrap();
    let y = tape.layer_norm(v, g, b).unwrap();
    tape.value(y).values().to_vec()
}

#[test]
fn matmul_examples() {
    let id = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let m = Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
    assert_eq!(product(id, m), vec![3.0, 4.0, 5.0, 6.0]);
    let row = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
    let col = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
    assert_eq!(product(row, col), vec![11.0]);

    let mut rng = stream(4, "test/matmul");
    let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
    let want = naive(a.values(), b.values(), 3, 4, 2);
    for (x, y) in product(a, b).iter().zip(&want) {
        assert!((x - y).abs() <= 1e-12);
    }
}

#[test]
fn matmul_shape_mismatch_is_an_error() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    assert!(tape.matmul(a, b).is_err());
}

proptest! {
    #[test]
    fn matmul_agrees_with_loops(m in 1usize..=16, k in 1usize..=16, n in 1usize..=16, seed in any::<u64>()) {
        let mut rng = stream(seed, "test/matmul-prop");
        let a = Tensor::randn(&[m, k], 1.0, &mut rng);
        let b = Tensor::randn(&[k, n], 1.0, &mut rng);
        let want = naive(a.values(), b.values(), m, k, n);
        for (x, y) in product(a, b).iter().zip(&want) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(
        x in prop::collection::vec(-30.0f64..30.0, 1..12),
        shift in -500.0f64..500.0,
    ) {
        let p = softmax_of(&x);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
        for (a, b) in p.iter().zip(softmax_of(&shifted)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn softmax_examples() {
    for p in softmax_of(&[0.0, 0.0, 0.0]) {
        assert!((p - 1.0 / 3.0).abs() <= 1e-15);
    }
    assert_eq!(softmax_of(&[1000.0, 1000.0]), vec![0.5, 0.5]);

    // p_i = 1 / sum_j exp(x_j - x_i): no large intermediate, no division of two sums.
    let x = [1.0, 2.0, 3.0];
    let got = softmax_of(&x);
    for i in 0..3 {
        let want = 1.0 / x.iter().map(|xj| (xj - x[i]).exp()).sum::<f64>();
        assert!((got[i] - want).abs() <= 1e-12, "{i}: {} vs {want}", got[i]);
    }
}

#[test]
fn softmax_along_a_middle_axis() {
    let mut tape = Tape::new();
    let x = Tensor::new(
        vec![2, 3, 2],
        (0..12).map(|i| (i as f64 * 0.7).sin()).collect(),
    )
    .unwrap();
    let xs = x.values().to_vec();
    let v = tape.constant(x).unwrap();
    let s = tape.softmax(v, 1).unwrap();
    let out = tape.value(s).values();
    for o in 0..2 {
        for i in 0..2 {
            let slice: Vec<f64> = (0..3).map(|j| xs[(o * 3 + j) * 2 + i]).collect();
            let want = softmax_of(&slice);
            for j in 0..3 {
                assert!((out[(o * 3 + j) * 2 + i] - want[j]).abs() <= 1e-15);
            }
        }
    }
}

#[test]
fn masked_softmax_zeroes_dropped_entries() {
    let mut tape = Tape::new();
    let v = tape
        .constant(Tensor::vector(vec![5.0, 1.0, 2.0]).unwrap())
        .unwrap();
    let s = tape.masked_softmax(v, &[false, true, true]).unwrap();
    let out = tape.value(s).values();
    assert_eq!(out[0], 0.0);
    assert_eq!(&out[1..], &softmax_of(&[1.0, 2.0])[..]);
    let v = tape
        .constant(Tensor::vector(vec![1.0, 2.0]).unwrap())
        .unwrap();
    assert!(tape.masked_softmax(v, &[false, false]).is_err());
}

#[test]
fn layer_norm_examples() {
    assert_eq!(norm_of(&[5.0, 5.0, 5.0, 5.0]), vec![0.0; 4]);
    for (a, b) in norm_of(&[1.0, 3.0]).iter().zip([-1.0, 1.0]) {
        assert!((a - b).abs() <= 1e-9);
    }
    let mut rng = stream(5, "test/layer-norm");
    for _ in 0..20 {
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y = norm_of(&x);
        let mean = y.iter().sum::<f64>() / 8.0;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() <= 1e-9, "mean {mean}");
        assert!((var - 1.0).abs() <= 1e-6, "variance {var}");
    }
}

#[test]
fn non_finite_values_are_rejected_at_op_boundaries() {
    assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    let mut tape = Tape::new();
    assert!(tape
        .constant(Tensor::vector(vec![1.0, f64::NAN]).unwrap())
        .is_err());
    let v = tape
        .constant(Tensor::vector(vec![1e300, 1e300]).unwrap())
        .unwrap();
    assert!(tape.mul(v, v).is_err());
}

#[test]
fn bce_examples() {
    let ln2 = std::f64::consts::LN_2;
    assert!((bce_with_logits(0.0, 1.0) - ln2).abs() <= 1e-15);
    assert!((bce_with_logits(0.0, 0.0) - ln2).abs() <= 1e-15);
    // -ln(sigmoid(2)) = ln(1 + e^-2), evaluated with ln_1p.
    let want = (-2.0f64).exp().ln_1p();
    assert!((bce_with_logits(2.0, 1.0) - want).abs() <= 1e-12);
    assert!((bce_with_logits(2.0, 1.0) + (1.0 / (1.0 + (-2.0f64).exp())).ln()).abs() <= 1e-12);
    assert!(bce_with_logits(-800.0, 1.0).is_finite());
    assert!((sigmoid(3.0) + sigmoid(-3.0) - 1.0).abs() <= 1e-15);
}

// Gradient checks -----------------------------------------------------------

fn params(entries: &[(&str, Tensor)]) -> ParamSet {
    let mut p = ParamSet::new();
    for (name, t) in entries {
        p.insert(*name, t.clone());
    }
    p
}

/// Builds `f` on a fresh tape with every parameter bound in name order and
/// returns the gradient check over all coordinates.
fn check(p: &ParamSet, f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let run = |p: &ParamSet, tape: &mut Tape| {
        let vars: Vec<Var> = p.names().map(|n| tape.param(p, n).unwrap()).collect();
        f(tape, &vars)
    };
    let mut tape = Tape::new();
    let out = run(p, &mut tape);
    let grads = tape.backward(out).unwrap().params();
    let value = |q: &ParamSet| {
        let mut t = Tape::new();
        let o = run(q, &mut t);
        Ok(t.value(o).item())
    };
    let r = gradient_check(
        value,
        p,
        &grads,
        1e-5,
        usize::MAX,
        &mut stream(0, "test/coords"),
    )
    .unwrap();
    assert_eq!(r.coords_checked, p.num_scalars());
    r.max_rel_error
}

/// Weighted sum so that every output coordinate gets a distinct upstream gradient.
fn probe(tape: &mut Tape, x: Var) -> Var {
    let n = tape.value(x).len();
    let w: Vec<f64> = (0..n)
        .map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0)
        .collect();
    let y = tape.mul_const(x, w).unwrap();
    tape.sum(y).unwrap()
}

#[test]
fn gradient_check_examples() {
    let p = params(&[("x", Tensor::vector(vec![1.0, 2.0]).unwrap())]);
    let mut tape = Tape::new();
    let x = tape.param(&p, "x").unwrap();
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    let g = tape.backward(s).unwrap().params();
    assert_eq!(g.get("x").unwrap().values(), &[2.0, 4.0]);
    assert!(
        check(&p, |t, v| {
            let sq = t.mul(v[0], v[0]).unwrap();
            t.sum(sq).unwrap()
        }) <= 1e-8
    );

    let h = 1e-5;
    let constant = |_: &ParamSet| Ok(3.5);
    let zero = params(&[("x", Tensor::zeros(&[2]))]);
    let r = gradient_check(constant, &p, &zero, h, 10, &mut stream(0, "t")).unwrap();
    assert!(r.max_rel_error <= h * h);
}

#[test]
fn gradient_check_rejects_out_of_range_steps() {
    let p = params(&[("x", Tensor::vector(vec![1.0]).unwrap())]);
    let f = |_: &ParamSet| Ok(0.0);
    for h in [1e-2, 1e-8] {
        assert!(gradient_check(f, &p, &p, h, 1, &mut stream(0, "t")).is_err());
    }
}

#[test]
fn every_differentiable_op_passes_gradient_check() {
    let mut rng = stream(6, "test/ops");
    let mut r = |shape: &[usize]| Tensor::randn(shape, 1.0, &mut rng);
    let tol = 1e-4;
    let mut worst = Vec::new();

    let p = params(&[("a", r(&[3, 4])), ("b", r(&[4, 2]))]);
    worst.push((
        "matmul",
        check(&p, |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            probe(t, y)
        }),
    ));

    let p = params(&[
        ("a", r(&[2, 3, 4])),
        ("b", r(&[2, 4, 3])),
        ("c", r(&[2, 5, 3])),
    ]);
    worst.push((
        "batch_matmul",
        check(&p, |t, v| {
            let y = t.batch_matmul(v[0], v[1], false).unwrap();
            let z = t.batch_matmul(y, v[2], true).unwrap();
            probe(t, z)
        }),
    ));

    let p = params(&[("a", r(&[3, 4])), ("b", r(&[3, 4])), ("c", r(&[4]))]);
    worst.push((
        "add/mul/bias/scale",
        check(&p, |t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            let m = t.mul(s, v[0]).unwrap();
            let m = t.add_bias(m, v[2]).unwrap();
            let m = t.scale(m, -0.7).unwrap();
            probe(t, m)
        }),
    ));

    let p = params(&[("x", r(&[2, 5]))]);
    worst.push((
        "gelu",
        check(&p, |t, v| {
            let y = t.gelu(v[0]).unwrap();
            probe(t, y)
        }),
    ));
    worst.push((
        "softmax",
        check(&p, |t, v| {
            let y = t.softmax(v[0], 1).unwrap();
            let z = t.softmax(v[0], 0).unwrap();
            let s = t.add(y, z).unwrap();
            probe(t, s)
        }),
    ));
    worst.push((
        "masked_softmax",
        check(&p, |t, v| {
            let keep: Vec<bool> = (0..10).map(|i| i % 3 != 1).collect();
            let y = t.masked_softmax(v[0], &keep).unwrap();
            probe(t, y)
        }),
    ));

    let p = params(&[("b", r(&[6])), ("g", r(&[6])), ("x", r(&[3, 6]))]);
    worst.push((
        "layer_norm",
        check(&p, |t, v| {
            let y = t.layer_norm(v[2], v[1], v[0]).unwrap();
            probe(t, y)
        }),
    ));

    let p = params(&[("x", r(&[4, 3]))]);
    worst.push((
        "rows/reshape",
        check(&p, |t, v| {
            let y = t.rows(v[0], &[2, 0, 2, 3]).unwrap();
            let z = t.reshape(y, &[2, 6]).unwrap();
            probe(t, z)
        }),
    ));

    let p = params(&[("a", r(&[2, 3])), ("b", r(&[2, 2])), ("c", r(&[2, 3]))]);
    worst.push((
        "concat",
        check(&p, |t, v| {
            let y = t.concat(&[v[0], v[1], v[2]]).unwrap();
            probe(t, y)
        }),
    ));
    worst.push((
        "max_of",
        check(&p, |t, v| {
            let y = t.max_of(&[v[0], v[2]]).unwrap();
            probe(t, y)
        }),
    ));

    let p = params(&[("z", r(&[5, 1]))]);
    worst.push((
        "bce_with_logits",
        check(&p, |t, v| {
            t.bce_with_logits(v[0], &[1.0, 0.0, 1.0, 1.0, 0.0]).unwrap()
        }),
    ));

    let p = params(&[("z", r(&[3, 7]))]);
    worst.push((
        "cross_entropy/mean",
        check(&p, |t, v| {
            let ce = t.cross_entropy(v[0], &[0, 6, 3]).unwrap();
            let m = t.mean(v[0]).unwrap();
            let m = t.mul(m, m).unwrap();
            t.add(ce, m).unwrap()
        }),
    ));

    for (op, err) in worst {
        assert!(err <= tol, "{op}: relative error {err:.3e}");
    }
}

#[test]
fn shared_parameters_accumulate_gradients() {
    let p = params(&[("x", Tensor::vector(vec![0.5, -1.5]).unwrap())]);
    let mut tape = Tape::new();
    let a = tape.param(&p, "x").unwrap();
    let b = tape.param(&p, "x").unwrap();
    assert_eq!(a, b);
    let s = tape.add(a, b).unwrap();
    let s = tape.sum(s).unwrap();
    let g = tape.backward(s).unwrap().params();
    assert_eq!(g.get("x").unwrap().values(), &[2.0, 2.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let p = params(&[("x", Tensor::vector(vec![1.0, 2.0]).unwrap())]);
    let mut tape = Tape::new();
    let x = tape.param(&p, "x").unwrap();
    let c = tape
        .constant(Tensor::vector(vec![3.0, 4.0]).unwrap())
        .unwrap();
    let y = tape.mul(x, c).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.wrt(c).is_none());
    assert_eq!(g.wrt(x).unwrap().values(), &[3.0, 4.0]);
}
