use parody_core::encoder::Representation;
use parody_core::eval::{aggregate_seeds, f1_score, format_pm, macro_f1};
use parody_core::fusion::{fuse_concat, fuse_max_pool, fuse_self_attention};
use parody_core::head::{prediction, HeadParams};
use parody_core::rng::stream;
use parody_core::tensorcore::{ParamSet, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn reps_strategy(d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), 1..=3)
}

fn wrap(reps: &[Vec<f64>]) -> Vec<Representation> {
    reps.iter().cloned().map(Representation).collect()
}

proptest! {
    #[test]
    fn max_pool_is_symmetric_and_dominant(reps in reps_strategy(6), seed in any::<u64>()) {
        let out = fuse_max_pool(&wrap(&reps)).unwrap();
        let mut shuffled = reps.clone();
        shuffled.shuffle(&mut stream(seed, "test/perm"));
        prop_assert_eq!(&out, &fuse_max_pool(&wrap(&shuffled)).unwrap());
        for r in &reps {
            for (o, x) in out.iter().zip(r) {
                prop_assert!(o >= x);
            }
        }
        for (i, o) in out.iter().enumerate() {
            prop_assert!(reps.iter().any(|r| r[i] == *o));
        }
    }

    #[test]
    fn concat_slices_recover_inputs(reps in reps_strategy(5)) {
        let out = fuse_concat(&wrap(&reps)).unwrap();
        prop_assert_eq!(out.len(), 5 * reps.len());
        for (j, r) in reps.iter().enumerate() {
            prop_assert_eq!(&out[j * 5..(j + 1) * 5], &r[..]);
        }
    }

    #[test]
    fn attention_rows_are_distributions(reps in reps_strategy(8), seed in any::<u64>()) {
        let mut rng = stream(seed, "test/attn");
        let mut p = ParamSet::new();
        for w in ["wq", "wk", "wv", "wo"] {
            p.insert(w, Tensor::randn(&[8, 8], 0.7, &mut rng));
        }
        let a = fuse_self_attention(&wrap(&reps), &p, 2).unwrap();
        for head in &a.weights {
            for row in head {
                prop_assert!(row.iter().all(|&w| w >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
        p.insert("wq", Tensor::zeros(&[8, 8]));
        p.insert("wk", Tensor::zeros(&[8, 8]));
        let k = reps.len() as f64;
        for head in fuse_self_attention(&wrap(&reps), &p, 2).unwrap().weights {
            for row in head {
                prop_assert!(row.iter().all(|&w| w == 1.0 / k));
            }
        }
    }
}

#[test]
fn max_pool_matches_elementwise_max_at_d16() {
    let mut rng = stream(1, "test/max16");
    let reps: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..16).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let out = fuse_max_pool(&wrap(&reps)).unwrap();
    for i in 0..16 {
        assert_eq!(out[i], reps[0][i].max(reps[1][i]).max(reps[2][i]));
    }
    assert_eq!(
        fuse_max_pool(&wrap(&vec![reps[0].clone(); 3])).unwrap(),
        reps[0]
    );
}

#[test]
fn concat_of_three_base_size_representations() {
    let reps = vec![vec![0.5; 768]; 3];
    assert_eq!(fuse_concat(&wrap(&reps)).unwrap().len(), 2304);
}

#[test]
fn mismatched_lengths_are_rejected() {
    let reps = wrap(&[vec![1.0, 2.0], vec![1.0]]);
    assert!(fuse_concat(&reps).is_err());
    assert!(fuse_max_pool(&reps).is_err());
    assert!(fuse_max_pool(&[]).is_err());
}

// Head ------------------------------------------------------------------------

/// Neumaier-compensated dot product.
fn compensated_dot(a: &[f64], b: &[f64]) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let p = x * y;
        let t = sum + p;
        c += if sum.abs() >= p.abs() {
            (sum - t) + p
        } else {
            (p - t) + sum
        };
        sum = t;
    }
    sum + c
}

#[test]
fn head_matches_compensated_sigmoid() {
    let mut rng = stream(2, "test/head");
    for _ in 0..200 {
        let weight: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let fused: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let bias = rng.random_range(-1.0..1.0);
        let head = HeadParams {
            weight: weight.clone(),
            bias,
            threshold: 0.5,
        };
        let z = compensated_dot(&weight, &fused) + bias;
        let want = if z >= 0.0 {
            1.0 / (1.0 + (-z).exp())
        } else {
            z.exp() / (1.0 + z.exp())
        };
        let got = head.predict(&fused).unwrap();
        assert!((got.probability - want).abs() <= 1e-12);
        assert_eq!(got.label, u8::from(want >= 0.5));
    }
    let zero = HeadParams {
        weight: vec![0.0; 6],
        bias: 0.0,
        threshold: 0.5,
    };
    let p = zero.predict(&[1.0; 6]).unwrap();
    assert_eq!((p.probability, p.label), (0.5, 1));
    assert!(zero.predict(&[1.0; 5]).is_err());
}

proptest! {
    #[test]
    fn head_probability_is_monotone_and_antisymmetric(a in -40.0f64..40.0, b in -40.0f64..40.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(prediction(lo, 0.5).probability <= prediction(hi, 0.5).probability);
        prop_assert!((prediction(a, 0.5).probability + prediction(-a, 0.5).probability - 1.0).abs() <= 1e-12);
    }
}

// Eval ------------------------------------------------------------------------

fn labels(max: usize) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (1..=max).prop_flat_map(|n| {
        (
            prop::collection::vec(0u8..=1, n),
            prop::collection::vec(0u8..=1, n),
        )
    })
}

/// F1 of `positive` straight from the four confusion counts.
fn oracle_f1(pred: &[u8], gold: &[u8], positive: u8) -> f64 {
    let count = |p: bool, g: bool| {
        pred.iter()
            .zip(gold)
            .filter(|&(&a, &b)| (a == positive) == p && (b == positive) == g)
            .count()
    };
    let (tp, fp, fn_) = (count(true, true), count(true, false), count(false, true));
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

proptest! {
    #[test]
    fn f1_ignores_joint_permutations((pred, gold) in labels(100), seed in any::<u64>()) {
        let mut idx: Vec<usize> = (0..pred.len()).collect();
        idx.shuffle(&mut stream(seed, "test/f1-perm"));
        let p2: Vec<u8> = idx.iter().map(|&i| pred[i]).collect();
        let g2: Vec<u8> = idx.iter().map(|&i| gold[i]).collect();
        prop_assert_eq!(f1_score(&pred, &gold, 1).unwrap(), f1_score(&p2, &g2, 1).unwrap());
    }

    #[test]
    fn relabelling_gives_the_complement_class_f1((pred, gold) in labels(100)) {
        let flip = |v: &[u8]| v.iter().map(|x| 1 - x).collect::<Vec<u8>>();
        let swapped = f1_score(&flip(&pred), &flip(&gold), 1).unwrap().f1;
        let negative = f1_score(&pred, &gold, 0).unwrap().f1;
        prop_assert!((swapped - oracle_f1(&pred, &gold, 0)).abs() <= 1e-12);
        prop_assert!((negative - oracle_f1(&pred, &gold, 0)).abs() <= 1e-12);
        prop_assert!((f1_score(&pred, &gold, 1).unwrap().f1 - oracle_f1(&pred, &gold, 1)).abs() <= 1e-12);
        let m = macro_f1(&pred, &gold).unwrap();
        prop_assert!((m - (oracle_f1(&pred, &gold, 0) + oracle_f1(&pred, &gold, 1)) / 2.0).abs() <= 1e-12);
    }

    #[test]
    fn constant_runs_have_zero_spread(v in 0.0f64..100.0, n in 1usize..10) {
        let s = aggregate_seeds(&vec![v; n]).unwrap();
        prop_assert_eq!(s.std, 0.0);
        prop_assert!((s.mean - v).abs() <= 1e-12 * v.max(1.0));
    }
}

#[test]
fn aggregation_examples() {
    let s = aggregate_seeds(&[90.0, 91.0, 92.0]).unwrap();
    assert_eq!(s.mean, 91.0);
    assert!((s.std - (2.0f64 / 3.0).sqrt()).abs() <= 1e-12);
    assert_eq!(s.format(), "91.00 ± 0.82");
    assert_eq!(
        aggregate_seeds(&[90.0; 3]).unwrap().format(),
        "90.00 ± 0.00"
    );
    assert_eq!(format_pm(91.19, 0.31), "91.19 ± 0.31");
    assert!(aggregate_seeds(&[]).is_err());
}

#[test]
fn f1_examples() {
    let f = f1_score(&[1, 1, 1, 0, 0], &[1, 1, 0, 1, 0], 1).unwrap();
    assert!((f.precision - 2.0 / 3.0).abs() <= 1e-15);
    assert!((f.recall - 2.0 / 3.0).abs() <= 1e-15);
    assert!((f.f1 - 2.0 / 3.0).abs() <= 1e-15);
    let none = f1_score(&[0, 0], &[0, 0], 1).unwrap();
    assert_eq!(none.f1, 0.0);
    assert!(none.degenerate);
    assert!(f1_score(&[1], &[1, 0], 1).is_err());
}
