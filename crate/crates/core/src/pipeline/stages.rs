use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::config::{Stage, StageConfig};
use super::{batches, subsample, trim_batch};
use crate::data::{mask_for_mlm, MlmExample, Post, Task, TokenSequence, Vocab, DEFAULT_MASK_RATE};
use crate::encoder::{init_params, Checkpoint, Encoder, EncoderConfig, StageRecord};
use crate::error::{Error, Result};
use crate::eval::Confusion;
use crate::fusion::EncoderRole;
use crate::head::{prediction, DEFAULT_THRESHOLD};
use crate::rng::{stream, StreamRng};
use crate::tensorcore::Tape;

fn role_task(role: EncoderRole) -> Result<Task> {
    match role {
        EncoderRole::Humor => Ok(Task::Humor),
        EncoderRole::Sarcasm => Ok(Task::Sarcasm),
        EncoderRole::Parody => Err(Error::Config(
            "adaptive pretraining and auxiliary fine-tuning apply to the humor and sarcasm encoders".into(),
        )),
    }
}

/// Starting checkpoint: a copy of `init` or a fresh initialisation.
fn starting_point(
    role: EncoderRole,
    seed: u64,
    config: &EncoderConfig,
    vocab: &Vocab,
    init: Option<&Checkpoint>,
) -> Result<Checkpoint> {
    let mut ck = match init {
        Some(ck) => {
            if ck.config != *config {
                return Err(Error::Checkpoint(format!(
                    "checkpoint config {:?} does not match {:?}",
                    ck.config, config
                )));
            }
            ck.clone()
        }
        None => Checkpoint::new(
            *config,
            init_params(
                config,
                &mut stream(seed, &format!("init/{}", role.as_str())),
            )?,
        )?,
    };
    if let Some(v) = &ck.vocab {
        if v != vocab {
            return Err(Error::Checkpoint(
                "checkpoint vocabulary differs from the experiment vocabulary".into(),
            ));
        }
    }
    ck.vocab = Some(vocab.clone());
    Ok(ck)
}

fn record(
    cfg: &StageConfig,
    role: EncoderRole,
    examples: usize,
    metrics: BTreeMap<String, f64>,
) -> StageRecord {
    StageRecord {
        stage: cfg.stage.as_str().to_string(),
        role: role.as_str().to_string(),
        seed: cfg.seed,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        examples,
        metrics,
    }
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub checkpoint: Checkpoint,
    /// Held-out-mask MLM loss before training, then after each epoch.
    pub losses: Vec<f64>,
}

fn eval_mlm(
    enc: &Encoder<'_>,
    params: &crate::tensorcore::ParamSet,
    examples: &[MlmExample],
    bs: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in examples.chunks(bs) {
        let n: usize = chunk.iter().map(|e| e.positions.len()).sum();
        let mut tape = Tape::new();
        let loss = enc.mlm_loss::<StreamRng>(&mut tape, params, &trim_examples(chunk), None)?;
        total += tape.value(loss).item() * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

fn trim_examples(examples: &[MlmExample]) -> Vec<MlmExample> {
    let inputs = trim_batch(examples.iter().map(|e| e.input.clone()).collect());
    examples
        .iter()
        .zip(inputs)
        .map(|(e, input)| MlmExample {
            input,
            positions: e.positions.clone(),
            targets: e.targets.clone(),
        })
        .collect()
}

/// Masked-language-model pretraining of one auxiliary encoder on the positive
/// posts of its own task.
pub fn run_adapt_pretrain(
    role: EncoderRole,
    cfg: &StageConfig,
    corpus: &[Post],
    vocab: &Vocab,
    config: &EncoderConfig,
    init: Option<&Checkpoint>,
) -> Result<AdaptOutcome> {
    cfg.expect(Stage::AdaptPretrain)?;
    let task = role_task(role)?;
    if let Some(p) = corpus
        .iter()
        .find(|p| p.task != task && p.task != Task::Mlm)
    {
        return Err(Error::Data(format!(
            "post `{}` belongs to task {}, not {}",
            p.id,
            p.task.as_str(),
            task.as_str()
        )));
    }
    let name = role.as_str();
    let posts: Vec<Post> = corpus
        .iter()
        .filter(|p| p.label != Some(0))
        .cloned()
        .collect();
    let posts = subsample(
        posts,
        cfg.subsample,
        &mut stream(cfg.seed, &format!("subsample/adapt/{name}")),
    );
    let seqs: Vec<TokenSequence> = posts
        .iter()
        .map(|p| vocab.encode(&p.text, config.max_len))
        .filter(|s| s.content_len() > 0)
        .collect();
    if seqs.is_empty() {
        return Err(Error::Data(format!("no {name} texts to pretrain on")));
    }

    let start = starting_point(role, cfg.seed, config, vocab, init)?;
    let mut params = start.params.clone();
    let enc = Encoder::new(config, "");
    let mut eval_rng = stream(cfg.seed, &format!("masking/eval/{name}"));
    let eval_set = seqs
        .iter()
        .map(|s| mask_for_mlm(s, DEFAULT_MASK_RATE, config.vocab_size, &mut eval_rng))
        .collect::<Result<Vec<_>>>()?;

    let mut opt = super::optimizer(cfg);
    let mut shuffle = stream(cfg.seed, &format!("shuffle/adapt/{name}"));
    let mut masking = stream(cfg.seed, &format!("masking/{name}"));
    let mut drop = stream(cfg.seed, &format!("dropout/adapt/{name}"));
    let mut losses = vec![eval_mlm(&enc, &params, &eval_set, cfg.batch_size)?];
    for _ in 0..cfg.epochs {
        for idx in batches(seqs.len(), cfg.batch_size, &mut shuffle) {
            let examples = idx
                .iter()
                .map(|&i| {
                    mask_for_mlm(&seqs[i], DEFAULT_MASK_RATE, config.vocab_size, &mut masking)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut tape = Tape::new();
            let loss = enc.mlm_loss(
                &mut tape,
                &params,
                &trim_examples(&examples),
                Some(&mut drop),
            )?;
            let grads = tape.backward(loss)?.params();
            opt.step(&mut params, &grads)?;
        }
        losses.push(eval_mlm(&enc, &params, &eval_set, cfg.batch_size)?);
    }

    let mut metrics = BTreeMap::new();
    metrics.insert("mlm_loss_initial".to_string(), losses[0]);
    metrics.insert(
        "mlm_loss_final".to_string(),
        *losses.last().unwrap_or(&losses[0]),
    );
    let checkpoint = start.advance(record(cfg, role, seqs.len(), metrics), params)?;
    Ok(AdaptOutcome { checkpoint, losses })
}

#[derive(Clone, Debug)]
pub struct AuxOutcome {
    pub checkpoint: Checkpoint,
    pub train_accuracy: f64,
    pub dev_accuracy: f64,
    /// Mean training loss of each epoch.
    pub losses: Vec<f64>,
}

fn accuracy(
    enc: &Encoder<'_>,
    params: &crate::tensorcore::ParamSet,
    seqs: &[TokenSequence],
    labels: &[u8],
    bs: usize,
) -> Result<f64> {
    if seqs.is_empty() {
        return Ok(f64::NAN);
    }
    let mut pred = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(bs) {
        for z in enc.aux_classify(params, &trim_batch(chunk.to_vec()))? {
            pred.push(prediction(z, DEFAULT_THRESHOLD).label);
        }
    }
    Ok(Confusion::from_labels(&pred, labels, 1)?.accuracy())
}

/// Binary fine-tuning of an auxiliary encoder's classification head and body.
/// Without `init` the encoder starts from a raw initialisation, which is
/// recorded in the lineage metrics.
pub fn run_aux_finetune(
    role: EncoderRole,
    cfg: &StageConfig,
    init: Option<&Checkpoint>,
    corpus: &[Post],
    vocab: &Vocab,
    config: &EncoderConfig,
) -> Result<AuxOutcome> {
    cfg.expect(Stage::AuxFinetune)?;
    let task = role_task(role)?;
    let name = role.as_str();
    if let Some(p) = corpus.iter().find(|p| p.task != task) {
        return Err(Error::Data(format!(
            "post `{}` is not a labelled {name} post",
            p.id
        )));
    }
    let posts = subsample(
        corpus.to_vec(),
        cfg.subsample,
        &mut stream(cfg.seed, &format!("subsample/aux/{name}")),
    );
    let labels: Vec<u8> = posts
        .iter()
        .map(|p| {
            p.label
                .ok_or_else(|| Error::Data(format!("post `{}` has no label", p.id)))
        })
        .collect::<Result<_>>()?;
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::Data(format!("{name} corpus needs both classes")));
    }
    let seqs: Vec<TokenSequence> = posts
        .iter()
        .map(|p| vocab.encode(&p.text, config.max_len))
        .collect();

    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.shuffle(&mut stream(cfg.seed, &format!("data/aux/{name}")));
    let n_dev = if seqs.len() >= 10 { seqs.len() / 10 } else { 0 };
    let (dev_idx, train_idx) = order.split_at(n_dev);
    let pick = |idx: &[usize]| -> (Vec<TokenSequence>, Vec<u8>) {
        (
            idx.iter().map(|&i| seqs[i].clone()).collect(),
            idx.iter().map(|&i| labels[i]).collect(),
        )
    };
    let (train_x, train_y) = pick(train_idx);
    let (dev_x, dev_y) = pick(dev_idx);

    let start = starting_point(role, cfg.seed, config, vocab, init)?;
    let mut params = start.params.clone();
    let enc = Encoder::new(config, "");
    let mut opt = super::optimizer(cfg);
    let mut shuffle = stream(cfg.seed, &format!("shuffle/aux/{name}"));
    let mut drop = stream(cfg.seed, &format!("dropout/aux/{name}"));
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        for idx in batches(train_x.len(), cfg.batch_size, &mut shuffle) {
            let batch = trim_batch(idx.iter().map(|&i| train_x[i].clone()).collect());
            let y: Vec<f64> = idx.iter().map(|&i| f64::from(train_y[i])).collect();
            let mut tape = Tape::new();
            let out = enc.forward(&mut tape, &params, &batch, Some(&mut drop))?;
            let z = enc.aux_logits(&mut tape, &params, out.cls)?;
            let loss = tape.bce_with_logits(z, &y)?;
            total += tape.value(loss).item() * idx.len() as f64;
            let grads = tape.backward(loss)?.params();
            opt.step(&mut params, &grads)?;
        }
        losses.push(total / train_x.len() as f64);
    }

    let train_accuracy = accuracy(&enc, &params, &train_x, &train_y, cfg.batch_size)?;
    let dev_accuracy = accuracy(&enc, &params, &dev_x, &dev_y, cfg.batch_size)?;
    let mut metrics = BTreeMap::new();
    metrics.insert("train_accuracy".to_string(), train_accuracy);
    if dev_accuracy.is_finite() {
        metrics.insert("dev_accuracy".to_string(), dev_accuracy);
    }
    if init.is_none() {
        metrics.insert("raw_init".to_string(), 1.0);
    }
    let checkpoint = start.advance(record(cfg, role, train_x.len(), metrics), params)?;
    Ok(AuxOutcome {
        checkpoint,
        train_accuracy,
        dev_accuracy,
        losses,
    })
}
