#![allow(clippy::needless_range_loop)]

mod common;

use common::{random_seq, small_config};
use parody_core::data::{mask_for_mlm, MlmExample, Post, Task, TokenSequence, Vocab, CLS, PAD};
use parody_core::encoder::{init_params, param_shapes, Encoder, EncoderConfig};
use parody_core::rng::{stream, StreamRng};
use parody_core::tensorcore::{gradient_check, sigmoid, Adam, AdamConfig, ParamSet, Tape, Tensor};

// Scripted forward pass ---------------------------------------------------------

/// Hand-set values: a fixed pattern per parameter, gains near one.
fn scripted_params(c: &EncoderConfig) -> ParamSet {
    let mut p = ParamSet::new();
    for (k, (name, shape)) in param_shapes(c).into_iter().enumerate() {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n)
            .map(|i| {
                let v = (((i * 7 + k * 5) % 13) as f64 - 6.0) / 10.0;
                if name.ends_with(".gain") {
                    1.0 + v / 4.0
                } else {
                    v
                }
            })
            .collect();
        p.insert(name, Tensor::new(shape, values).unwrap());
    }
    p
}

fn at(p: &ParamSet, name: &str) -> Vec<f64> {
    p.get(name).unwrap().values().to_vec()
}

fn vec_mat(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    (0..cols)
        .map(|j| {
            x.iter()
                .enumerate()
                .map(|(i, xi)| xi * w[i * cols + j])
                .sum()
        })
        .collect()
}

fn plus(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    let s = (var + 1e-12).sqrt();
    x.iter()
        .zip(g)
        .zip(b)
        .map(|((v, g), b)| (v - mean) / s * g + b)
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// One layer, one head, every step written out for a single sequence.
fn scripted_hidden(c: &EncoderConfig, p: &ParamSet, seq: &TokenSequence) -> Vec<Vec<f64>> {
    let d = c.d_model;
    let f = d * c.ffn_mult;
    let (tok, pos) = (at(p, "tok_emb"), at(p, "pos_emb"));
    let mut x: Vec<Vec<f64>> = (0..seq.len())
        .map(|t| {
            plus(
                &tok[seq.ids[t] * d..(seq.ids[t] + 1) * d],
                &pos[t * d..(t + 1) * d],
            )
        })
        .collect();

    let h: Vec<Vec<f64>> = x
        .iter()
        .map(|r| norm(r, &at(p, "layer0.ln1.gain"), &at(p, "layer0.ln1.bias")))
        .collect();
    let proj = |w: &str, b: &str| -> Vec<Vec<f64>> {
        h.iter()
            .map(|r| plus(&vec_mat(r, &at(p, w), d), &at(p, b)))
            .collect()
    };
    let q = proj("layer0.attn.wq", "layer0.attn.bq");
    let k = proj("layer0.attn.wk", "layer0.attn.bk");
    let v = proj("layer0.attn.wv", "layer0.attn.bv");
    for a in 0..seq.len() {
        let scores: Vec<Option<f64>> = (0..seq.len())
            .map(|b| {
                seq.mask[b].then(|| {
                    q[a].iter().zip(&k[b]).map(|(x, y)| x * y).sum::<f64>() / (d as f64).sqrt()
                })
            })
            .collect();
        let m = scores
            .iter()
            .flatten()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores
            .iter()
            .map(|s| s.map_or(0.0, |s| (s - m).exp()))
            .collect();
        let z: f64 = e.iter().sum();
        let ctx: Vec<f64> = (0..d)
            .map(|j| (0..seq.len()).map(|b| e[b] / z * v[b][j]).sum())
            .collect();
        let out = plus(
            &vec_mat(&ctx, &at(p, "layer0.attn.wo"), d),
            &at(p, "layer0.attn.bo"),
        );
        x[a] = plus(&x[a], &out);
    }
    for r in x.iter_mut() {
        let h2 = norm(r, &at(p, "layer0.ln2.gain"), &at(p, "layer0.ln2.bias"));
        let mid: Vec<f64> = plus(
            &vec_mat(&h2, &at(p, "layer0.ffn.w1"), f),
            &at(p, "layer0.ffn.b1"),
        )
        .into_iter()
        .map(gelu)
        .collect();
        let out = plus(
            &vec_mat(&mid, &at(p, "layer0.ffn.w2"), d),
            &at(p, "layer0.ffn.b2"),
        );
        *r = plus(r, &out);
    }
    x.iter()
        .map(|r| norm(r, &at(p, "ln_f.gain"), &at(p, "ln_f.bias")))
        .collect()
}

#[test]
fn forward_matches_scripted_pass() {
    let c = EncoderConfig {
        d_model: 4,
        layers: 1,
        heads: 1,
        ffn_mult: 2,
        vocab_size: 9,
        max_len: 6,
        dropout: 0.0,
    };
    let p = scripted_params(&c);
    let seqs = vec![
        TokenSequence {
            ids: vec![CLS, 5, 8, 4, PAD, PAD],
            mask: vec![true, true, true, true, false, false],
        },
        TokenSequence {
            ids: vec![CLS, 7, 7, 6, 5, 4],
            mask: vec![true; 6],
        },
    ];
    let enc = Encoder::new(&c, "");
    let mut tape = Tape::new();
    let out = enc
        .forward::<StreamRng>(&mut tape, &p, &seqs, None)
        .unwrap();
    let hidden = tape.value(out.hidden).values().to_vec();
    let mut worst: f64 = 0.0;
    for (b, seq) in seqs.iter().enumerate() {
        let want = scripted_hidden(&c, &p, seq);
        for t in (0..seq.len()).filter(|&t| seq.mask[t]) {
            for j in 0..4 {
                worst = worst.max((hidden[(b * 6 + t) * 4 + j] - want[t][j]).abs());
            }
        }
        let rep = enc.represent(&p, std::slice::from_ref(seq)).unwrap();
        for j in 0..4 {
            worst = worst.max((rep[0].0[j] - want[0][j]).abs());
        }
    }
    assert!(worst <= 1e-10, "deviation {worst:.3e}");

    // MLM loss at one masked position of the second sequence.
    let ex = MlmExample {
        input: seqs[1].clone(),
        positions: vec![2],
        targets: vec![4],
    };
    let mut tape = Tape::new();
    let loss = enc
        .mlm_loss::<StreamRng>(&mut tape, &p, &[ex], None)
        .unwrap();
    let h = &scripted_hidden(&c, &p, &seqs[1])[2];
    let logits = plus(&vec_mat(h, &at(&p, "mlm.w"), 9), &at(&p, "mlm.b"));
    let lse = logits.iter().map(|z| z.exp()).sum::<f64>().ln();
    assert!((tape.value(loss).item() - (lse - logits[4])).abs() <= 1e-10);
}

// Training and gradients -------------------------------------------------------

fn toy_sentences() -> Vec<&'static str> {
    vec![
        "the minister said the budget is fine",
        "the minister said the plan is fine",
        "our party will cut the tax",
        "our party will raise the wage",
        "the senator said the vote is close",
        "the senator said the bill is close",
        "we will build the road",
        "we will build the school",
        "the people want the road",
        "the people want the school",
        "the minister will cut the budget",
        "the senator will raise the tax",
        "our plan is fine",
        "our bill is close",
        "the vote is fine",
        "the wage is close",
        "we want the plan",
        "we want the vote",
        "the party said we will win",
        "the people said we will win",
    ]
}

fn post(text: &str) -> Post {
    Post {
        id: text.into(),
        text: text.into(),
        label: None,
        account: String::new(),
        gender: Default::default(),
        location: Default::default(),
        task: Task::Mlm,
    }
}

#[test]
fn mlm_loss_falls_over_fifty_steps() {
    let posts: Vec<Post> = toy_sentences().into_iter().map(post).collect();
    let vocab = Vocab::build(&posts, 1, 1000).unwrap();
    let c = small_config(16, 10, vocab.len());
    let seqs: Vec<TokenSequence> = posts.iter().map(|p| vocab.encode(&p.text, 10)).collect();
    let mut params = init_params(&c, &mut stream(1, "test/mlm-init")).unwrap();
    let enc = Encoder::new(&c, "");
    let mut eval_rng = stream(1, "test/mlm-eval");
    let eval: Vec<MlmExample> = seqs
        .iter()
        .map(|s| mask_for_mlm(s, 0.15, c.vocab_size, &mut eval_rng).unwrap())
        .collect();
    let eval_loss = |p: &ParamSet| {
        let mut tape = Tape::new();
        let l = enc
            .mlm_loss::<StreamRng>(&mut tape, p, &eval, None)
            .unwrap();
        tape.value(l).item()
    };

    let start = eval_loss(&params);
    let mut opt = Adam::new(AdamConfig::with_lr(3e-3));
    let mut masking = stream(1, "test/mlm-train");
    let mut curve = vec![start];
    for step in 0..50 {
        let batch: Vec<MlmExample> = seqs
            .iter()
            .map(|s| mask_for_mlm(s, 0.15, c.vocab_size, &mut masking).unwrap())
            .collect();
        let mut tape = Tape::new();
        let loss = enc
            .mlm_loss::<StreamRng>(&mut tape, &params, &batch, None)
            .unwrap();
        let grads = tape.backward(loss).unwrap().params();
        opt.step(&mut params, &grads).unwrap();
        if step % 10 == 9 {
            curve.push(eval_loss(&params));
        }
    }
    assert!(
        (start - (c.vocab_size as f64).ln()).abs() < 0.1,
        "initial loss {start}"
    );
    assert!(curve.windows(2).all(|w| w[1] < w[0]), "{curve:?}");
    assert!(curve[5] < 0.75 * start, "{curve:?}");
}

fn grad_report(
    c: &EncoderConfig,
    loss: impl Fn(&mut Tape, &ParamSet) -> parody_core::tensorcore::Var,
) -> f64 {
    let params = init_params(c, &mut stream(2, "test/grad-init")).unwrap();
    // Larger weights than the 0.02 init so second-order terms are not negligible.
    let mut params = params;
    let mut rng = stream(2, "test/grad-scale");
    for (name, t) in params.iter_mut() {
        if !name.ends_with(".gain") {
            *t = Tensor::randn(t.shape(), 0.3, &mut rng);
        }
    }
    let mut tape = Tape::new();
    let l = loss(&mut tape, &params);
    let grads = tape.backward(l).unwrap().params();
    let f = |p: &ParamSet| {
        let mut t = Tape::new();
        let l = loss(&mut t, p);
        Ok(t.value(l).item())
    };
    let r = gradient_check(
        f,
        &params,
        &grads,
        1e-5,
        60,
        &mut stream(2, "test/grad-coords"),
    )
    .unwrap();
    r.max_rel_error
}

#[test]
fn mlm_loss_passes_gradient_check() {
    let c = small_config(8, 8, 20);
    let mut rng = stream(3, "test/mlm-grad");
    let examples: Vec<MlmExample> = (0..3)
        .map(|i| {
            let s = random_seq(&mut rng, 8, 4 + i, 20);
            mask_for_mlm(&s, 0.4, 20, &mut rng).unwrap()
        })
        .collect();
    let enc = Encoder::new(&c, "");
    let err = grad_report(&c, |t, p| {
        enc.mlm_loss::<StreamRng>(t, p, &examples, None).unwrap()
    });
    assert!(err <= 1e-4, "relative error {err:.3e}");
}

#[test]
fn aux_loss_passes_gradient_check() {
    let c = small_config(8, 8, 20);
    let mut rng = stream(4, "test/aux-grad");
    let batch: Vec<TokenSequence> = (0..4).map(|i| random_seq(&mut rng, 8, 2 + i, 20)).collect();
    let enc = Encoder::new(&c, "");
    let err = grad_report(&c, |t, p| {
        let out = enc.forward::<StreamRng>(t, p, &batch, None).unwrap();
        let z = enc.aux_logits(t, p, out.cls).unwrap();
        t.bce_with_logits(z, &[1.0, 0.0, 0.0, 1.0]).unwrap()
    });
    assert!(err <= 1e-4, "relative error {err:.3e}");
}

#[test]
fn aux_probabilities_stay_inside_the_unit_interval() {
    let c = small_config(8, 8, 20);
    let mut rng = stream(5, "test/aux-range");
    let mut params = init_params(&c, &mut rng).unwrap();
    *params.get_mut("aux.w").unwrap() = Tensor::randn(&[8, 1], 2.0, &mut rng);
    let batch: Vec<TokenSequence> = (0..50)
        .map(|i| random_seq(&mut rng, 8, 1 + i % 8, 20))
        .collect();
    let enc = Encoder::new(&c, "");
    for z in enc.aux_classify(&params, &batch).unwrap() {
        let p = sigmoid(z);
        assert!(p > 0.0 && p < 1.0, "{z} -> {p}");
    }
}

#[test]
fn malformed_batches_are_rejected() {
    let c = small_config(8, 4, 20);
    let p = init_params(&c, &mut stream(0, "x")).unwrap();
    let enc = Encoder::new(&c, "");
    let ok = TokenSequence {
        ids: vec![CLS, 5, PAD, PAD],
        mask: vec![true, true, false, false],
    };
    let too_long = TokenSequence {
        ids: vec![CLS, 5, 6, 7, 8],
        mask: vec![true; 5],
    };
    let out_of_vocab = TokenSequence {
        ids: vec![CLS, 25, PAD, PAD],
        mask: vec![true, true, false, false],
    };
    assert!(enc.represent(&p, std::slice::from_ref(&ok)).is_ok());
    assert!(enc.represent(&p, &[too_long]).is_err());
    assert!(enc.represent(&p, &[out_of_vocab]).is_err());
    assert!(enc.represent(&p, &[ok.clone(), ok.with_len(3)]).is_err());
    assert!(enc.represent(&p, &[]).is_err());
}
