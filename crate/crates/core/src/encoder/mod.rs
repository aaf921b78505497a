//! Small pre-norm transformer encoder with an MLM head and a binary auxiliary head.
//!
//! Parameters live in a flat [`ParamSet`] under fixed names (see
//! [`param_shapes`]). Several encoders can share one set by giving each a
//! distinct name prefix, which is how the multi-encoder model holds the
//! parody, humor and sarcasm encoders side by side.

mod checkpoint;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, StageRecord, CHECKPOINT_VERSION};

use crate::attention::{self_attention, AttentionWeights};
use crate::data::{MlmExample, TokenSequence};
use crate::error::{Error, Result};
use crate::tensorcore::{ParamSet, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// Desk-scale defaults.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 4,
            ffn_mult: 4,
            vocab_size,
            max_len: 32,
            dropout: 0.1,
        }
    }

    /// Base-size shape (768-d representations).
    pub fn full(vocab_size: usize) -> Self {
        Self {
            d_model: 768,
            layers: 12,
            heads: 12,
            ffn_mult: 4,
            vocab_size,
            max_len: 128,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model < 2 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} must be >= 2 and divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.layers == 0 || self.ffn_mult == 0 {
            return bad("layers and ffn_mult must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if self.vocab_size <= crate::data::RESERVED.len() || self.max_len < 2 {
            return bad(format!(
                "vocab_size {} must exceed the reserved ids and max_len {} must be >= 2",
                self.vocab_size, self.max_len
            ));
        }
        Ok(())
    }
}

/// Name and shape of every encoder parameter.
pub fn param_shapes(c: &EncoderConfig) -> BTreeMap<String, Vec<usize>> {
    let (d, v, f) = (c.d_model, c.vocab_size, c.d_model * c.ffn_mult);
    let mut m = BTreeMap::new();
    m.insert("tok_emb".to_string(), vec![v, d]);
    m.insert("pos_emb".to_string(), vec![c.max_len, d]);
    for i in 0..c.layers {
        let p = format!("layer{i}.");
        for ln in ["ln1", "ln2"] {
            m.insert(format!("{p}{ln}.gain"), vec![d]);
            m.insert(format!("{p}{ln}.bias"), vec![d]);
        }
        for w in ["wq", "wk", "wv", "wo"] {
            m.insert(format!("{p}attn.{w}"), vec![d, d]);
        }
        for b in ["bq", "bk", "bv", "bo"] {
            m.insert(format!("{p}attn.{b}"), vec![d]);
        }
        m.insert(format!("{p}ffn.w1"), vec![d, f]);
        m.insert(format!("{p}ffn.b1"), vec![f]);
        m.insert(format!("{p}ffn.w2"), vec![f, d]);
        m.insert(format!("{p}ffn.b2"), vec![d]);
    }
    m.insert("ln_f.gain".to_string(), vec![d]);
    m.insert("ln_f.bias".to_string(), vec![d]);
    m.insert("mlm.w".to_string(), vec![d, v]);
    m.insert("mlm.b".to_string(), vec![v]);
    m.insert("aux.w".to_string(), vec![d, 1]);
    m.insert("aux.b".to_string(), vec![1]);
    m
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".bias")
        || name
            .rsplit('.')
            .next()
            .is_some_and(|s| s.starts_with('b') && s.len() <= 2)
}

/// N(0, 0.02²) weights, zero biases, unit layer-norm gains.
pub fn init_params<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Result<ParamSet> {
    config.validate()?;
    let mut params = ParamSet::new();
    for (name, shape) in param_shapes(config) {
        let t = if name.ends_with(".gain") {
            Tensor::full(&shape, 1.0)
        } else if is_bias(&name) {
            Tensor::zeros(&shape)
        } else {
            Tensor::randn(&shape, INIT_STD, rng)
        };
        params.insert(name, t);
    }
    Ok(params)
}

/// Checks that `params` holds exactly the parameters `config` calls for.
pub fn validate_params(config: &EncoderConfig, params: &ParamSet) -> Result<()> {
    let expected = param_shapes(config);
    for (name, shape) in &expected {
        let t = params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, config requires {shape:?}",
                t.shape()
            )));
        }
        if !t.is_finite() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` is not finite"
            )));
        }
    }
    if let Some(extra) = params.names().find(|n| !expected.contains_key(*n)) {
        return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
    }
    Ok(())
}

/// The `[CLS]` hidden state of one post.
#[derive(Clone, Debug, PartialEq)]
pub struct Representation(pub Vec<f64>);

impl Representation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Encoder view over a (possibly shared) parameter set.
#[derive(Clone, Copy, Debug)]
pub struct Encoder<'a> {
    pub config: &'a EncoderConfig,
    pub prefix: &'a str,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// Final-layer-norm states, `[batch * seq_len, d]`.
    pub hidden: Var,
    /// `[CLS]` states, `[batch, d]`.
    pub cls: Var,
    pub batch: usize,
    pub seq_len: usize,
}

fn dropout<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    rate: f64,
    rng: Option<&mut R>,
) -> Result<Var> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            let factor = (0..tape.value(x).len())
                .map(|_| {
                    if rng.random::<f64>() < rate {
                        0.0
                    } else {
                        keep
                    }
                })
                .collect();
            tape.mul_const(x, factor)
        }
        _ => Ok(x),
    }
}

impl<'a> Encoder<'a> {
    pub fn new(config: &'a EncoderConfig, prefix: &'a str) -> Self {
        Self { config, prefix }
    }

    fn p(&self, tape: &mut Tape, params: &ParamSet, name: &str) -> Result<Var> {
        tape.param(params, &format!("{}{name}", self.prefix))
    }

    fn check_batch(&self, batch: &[TokenSequence]) -> Result<usize> {
        let first = batch
            .first()
            .ok_or_else(|| Error::shape("encoder_forward", "empty batch"))?;
        let t = first.len();
        if t < 1 || t > self.config.max_len {
            return Err(Error::shape(
                "encoder_forward",
                format!(
                    "sequence length {t} exceeds max_len {}",
                    self.config.max_len
                ),
            ));
        }
        for s in batch {
            if s.len() != t || s.mask.len() != t {
                return Err(Error::shape(
                    "encoder_forward",
                    "sequences in a batch must share one length",
                ));
            }
            if !s.mask[0] {
                return Err(Error::shape(
                    "encoder_forward",
                    "position 0 must be a real token",
                ));
            }
            if let Some(&id) = s.ids.iter().find(|&&id| id >= self.config.vocab_size) {
                return Err(Error::shape(
                    "encoder_forward",
                    format!(
                        "token id {id} outside vocabulary of {}",
                        self.config.vocab_size
                    ),
                ));
            }
        }
        Ok(t)
    }

    /// Runs the encoder. Dropout is applied iff `dropout_rng` is given.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        batch: &[TokenSequence],
        mut dropout_rng: Option<&mut R>,
    ) -> Result<EncoderOutput> {
        let c = self.config;
        let t = self.check_batch(batch)?;
        let (b, d) = (batch.len(), c.d_model);

        let tok = self.p(tape, params, "tok_emb")?;
        let pos = self.p(tape, params, "pos_emb")?;
        let tok_rows: Vec<usize> = batch.iter().flat_map(|s| s.ids.iter().copied()).collect();
        let pos_rows: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let te = tape.rows(tok, &tok_rows)?;
        let pe = tape.rows(pos, &pos_rows)?;
        let mut x = tape.add(te, pe)?;
        x = dropout(tape, x, c.dropout, dropout_rng.as_deref_mut())?;

        let keep: Vec<bool> = batch.iter().flat_map(|s| s.mask.iter().copied()).collect();
        for i in 0..c.layers {
            let l = format!("layer{i}.");
            let g1 = self.p(tape, params, &format!("{l}ln1.gain"))?;
            let b1 = self.p(tape, params, &format!("{l}ln1.bias"))?;
            let h = tape.layer_norm(x, g1, b1)?;
            let w = ["wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo"]
                .iter()
                .map(|name| self.p(tape, params, &format!("{l}attn.{name}")))
                .collect::<Result<Vec<_>>>()?;
            let weights = AttentionWeights {
                wq: w[0],
                wk: w[1],
                wv: w[2],
                wo: w[3],
                biases: Some([w[4], w[5], w[6], w[7]]),
            };
            let attn = self_attention(tape, h, b, t, c.heads, &weights, Some(&keep))?;
            let a = dropout(tape, attn.out, c.dropout, dropout_rng.as_deref_mut())?;
            x = tape.add(x, a)?;

            let g2 = self.p(tape, params, &format!("{l}ln2.gain"))?;
            let b2 = self.p(tape, params, &format!("{l}ln2.bias"))?;
            let h = tape.layer_norm(x, g2, b2)?;
            let w1 = self.p(tape, params, &format!("{l}ffn.w1"))?;
            let fb1 = self.p(tape, params, &format!("{l}ffn.b1"))?;
            let w2 = self.p(tape, params, &format!("{l}ffn.w2"))?;
            let fb2 = self.p(tape, params, &format!("{l}ffn.b2"))?;
            let f = tape.matmul(h, w1)?;
            let f = tape.add_bias(f, fb1)?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, w2)?;
            let f = tape.add_bias(f, fb2)?;
            let f = dropout(tape, f, c.dropout, dropout_rng.as_deref_mut())?;
            x = tape.add(x, f)?;
        }
        let gf = self.p(tape, params, "ln_f.gain")?;
        let bf = self.p(tape, params, "ln_f.bias")?;
        let hidden = tape.layer_norm(x, gf, bf)?;
        let cls_rows: Vec<usize> = (0..b).map(|i| i * t).collect();
        let cls = tape.rows(hidden, &cls_rows)?;
        debug_assert_eq!(tape.shape(cls), [b, d]);
        Ok(EncoderOutput {
            hidden,
            cls,
            batch: b,
            seq_len: t,
        })
    }

    /// Evaluation-mode `[CLS]` representations.
    pub fn represent(
        &self,
        params: &ParamSet,
        batch: &[TokenSequence],
    ) -> Result<Vec<Representation>> {
        let mut tape = Tape::new();
        let out = self.forward::<crate::rng::StreamRng>(&mut tape, params, batch, None)?;
        let v = tape.value(out.cls);
        Ok((0..out.batch)
            .map(|i| Representation(v.row(i).to_vec()))
            .collect())
    }

    /// Mean cross-entropy over the masked target positions of `examples`.
    pub fn mlm_loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        examples: &[MlmExample],
        dropout_rng: Option<&mut R>,
    ) -> Result<Var> {
        let n_targets: usize = examples.iter().map(|e| e.positions.len()).sum();
        if n_targets == 0 {
            return Err(Error::Data(
                "MLM loss needs at least one target position".into(),
            ));
        }
        let inputs: Vec<TokenSequence> = examples.iter().map(|e| e.input.clone()).collect();
        let out = self.forward(tape, params, &inputs, dropout_rng)?;
        let mut rows = Vec::with_capacity(n_targets);
        let mut targets = Vec::with_capacity(n_targets);
        for (i, e) in examples.iter().enumerate() {
            for (&p, &t) in e.positions.iter().zip(&e.targets) {
                if p == 0 || p >= out.seq_len || !e.input.mask[p] {
                    return Err(Error::Data(format!(
                        "MLM target position {p} is not a content position"
                    )));
                }
                rows.push(i * out.seq_len + p);
                targets.push(t);
            }
        }
        let h = tape.rows(out.hidden, &rows)?;
        let w = self.p(tape, params, "mlm.w")?;
        let bias = self.p(tape, params, "mlm.b")?;
        let logits = tape.matmul(h, w)?;
        let logits = tape.add_bias(logits, bias)?;
        tape.cross_entropy(logits, &targets)
    }

    /// Auxiliary-head logits applied to `[CLS]` states `[batch, d]`; returns `[batch, 1]`.
    pub fn aux_logits(&self, tape: &mut Tape, params: &ParamSet, cls: Var) -> Result<Var> {
        let w = self.p(tape, params, "aux.w")?;
        let b = self.p(tape, params, "aux.b")?;
        let z = tape.matmul(cls, w)?;
        tape.add_bias(z, b)
    }

    /// Evaluation-mode auxiliary logits, one per post.
    pub fn aux_classify(&self, params: &ParamSet, batch: &[TokenSequence]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.forward::<crate::rng::StreamRng>(&mut tape, params, batch, None)?;
        let z = self.aux_logits(&mut tape, params, out.cls)?;
        Ok(tape.value(z).values().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CLS, PAD};
    use crate::rng::stream;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            layers: 2,
            heads: 2,
            ffn_mult: 2,
            vocab_size: 12,
            max_len: 10,
            dropout: 0.1,
        }
    }

    fn seq(ids: &[usize], len: usize) -> TokenSequence {
        let mut v = vec![CLS];
        v.extend_from_slice(ids);
        let real = v.len();
        v.resize(len, PAD);
        TokenSequence {
            mask: (0..len).map(|i| i < real).collect(),
            ids: v,
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(EncoderConfig { heads: 3, ..cfg() }.validate().is_err());
        assert!(EncoderConfig { layers: 0, ..cfg() }.validate().is_err());
        assert!(EncoderConfig {
            dropout: 1.0,
            ..cfg()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn init_shapes_and_values() {
        let p = init_params(&cfg(), &mut stream(0, "init")).unwrap();
        validate_params(&cfg(), &p).unwrap();
        assert!(p
            .get("layer0.attn.bq")
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));
        assert!(p
            .get("layer1.ffn.b2")
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));
        assert!(p
            .get("ln_f.gain")
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 1.0));
        assert!(p.get("tok_emb").unwrap().values().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn identical_sequences_identical_representations() {
        let c = cfg();
        let p = init_params(&c, &mut stream(1, "init")).unwrap();
        let s = seq(&[4, 5, 6], 8);
        let reps = Encoder::new(&c, "").represent(&p, &[s.clone(), s]).unwrap();
        assert_eq!(reps[0], reps[1]);
        assert_eq!(reps[0].len(), 8);
    }

    #[test]
    fn all_padding_after_cls_is_finite() {
        let c = cfg();
        let p = init_params(&c, &mut stream(2, "init")).unwrap();
        let reps = Encoder::new(&c, "").represent(&p, &[seq(&[], 10)]).unwrap();
        assert!(reps[0].0.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn padding_invariance() {
        let c = cfg();
        let p = init_params(&c, &mut stream(3, "init")).unwrap();
        let enc = Encoder::new(&c, "");
        let short = enc.represent(&p, &[seq(&[7, 8, 9], 5)]).unwrap();
        let long = enc.represent(&p, &[seq(&[7, 8, 9], 10)]).unwrap();
        let diff = short[0]
            .0
            .iter()
            .zip(&long[0].0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-9, "{diff}");
    }

    #[test]
    fn swapping_tokens_changes_representation() {
        let c = cfg();
        let p = init_params(&c, &mut stream(4, "init")).unwrap();
        let enc = Encoder::new(&c, "");
        let a = enc.represent(&p, &[seq(&[5, 9, 6], 6)]).unwrap();
        let b = enc.represent(&p, &[seq(&[9, 5, 6], 6)]).unwrap();
        assert_ne!(a[0], b[0]);
    }

    #[test]
    fn zero_aux_head_gives_bias() {
        let c = cfg();
        let mut p = init_params(&c, &mut stream(5, "init")).unwrap();
        *p.get_mut("aux.w").unwrap() = Tensor::zeros(&[8, 1]);
        *p.get_mut("aux.b").unwrap() = Tensor::scalar(0.37);
        let z = Encoder::new(&c, "")
            .aux_classify(&p, &[seq(&[4], 6), seq(&[10, 11, 4], 6)])
            .unwrap();
        assert_eq!(z, vec![0.37, 0.37]);
    }

    #[test]
    fn uniform_mlm_head_gives_log_vocab() {
        let c = cfg();
        let mut p = init_params(&c, &mut stream(6, "init")).unwrap();
        *p.get_mut("mlm.w").unwrap() = Tensor::zeros(&[8, 12]);
        let ex = MlmExample {
            input: seq(&[crate::data::MASK, 5], 6),
            positions: vec![1],
            targets: vec![7],
        };
        let mut tape = Tape::new();
        let loss = Encoder::new(&c, "")
            .mlm_loss::<crate::rng::StreamRng>(&mut tape, &p, &[ex], None)
            .unwrap();
        assert!((tape.value(loss).item() - 12f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mlm_rejects_empty_targets_and_bad_batches() {
        let c = cfg();
        let p = init_params(&c, &mut stream(6, "init")).unwrap();
        let enc = Encoder::new(&c, "");
        let ex = MlmExample {
            input: seq(&[5], 6),
            positions: vec![],
            targets: vec![],
        };
        let mut tape = Tape::new();
        assert!(enc
            .mlm_loss::<crate::rng::StreamRng>(&mut tape, &p, &[ex], None)
            .is_err());
        assert!(enc.represent(&p, &[seq(&[5], 6), seq(&[5], 7)]).is_err());
        assert!(enc.represent(&p, &[seq(&[5], 11)]).is_err());
        assert!(enc.represent(&p, &[seq(&[50], 6)]).is_err());
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let c = cfg();
        let p = init_params(&c, &mut stream(7, "init")).unwrap();
        let enc = Encoder::new(&c, "");
        let batch = [seq(&[4, 5, 6, 7], 8)];
        let run = |rng: Option<&mut crate::rng::StreamRng>| {
            let mut tape = Tape::new();
            let out = enc.forward(&mut tape, &p, &batch, rng).unwrap();
            tape.value(out.cls).values().to_vec()
        };
        assert_eq!(run(None), run(None));
        let mut r = stream(0, "dropout");
        assert_ne!(run(None), run(Some(&mut r)));
    }
}
