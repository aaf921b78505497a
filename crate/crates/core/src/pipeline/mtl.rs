use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{MtlWeights, Stage, StageConfig};
use super::joint::EpochLog;
use super::model::{body, fresh_body, HEAD_PREFIX};
use super::{batches, split_f1, trim_batch, EncodedSplit, PreparedData};
use crate::data::{Post, TokenSequence};
use crate::encoder::{Checkpoint, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::EncoderRole;
use crate::head::{head_logits, init_head_params, prediction, DEFAULT_THRESHOLD};
use crate::rng::{stream, StreamRng};
use crate::tensorcore::{ParamSet, Tape, Var};

const SARCASM_HEAD: &str = "head_sarcasm/";
const HUMOR_HEAD: &str = "head_humor/";

/// One shared encoder with a parody head and sarcasm and humor heads. Parameter
/// names and initialisation match the parody-only concatenation model, so a
/// run with zero auxiliary weights reproduces single-task training.
#[derive(Clone, Debug, PartialEq)]
pub struct MtlModel {
    pub config: EncoderConfig,
    pub weights: MtlWeights,
    pub params: ParamSet,
}

/// Loss terms of one step, in parody, sarcasm, humor order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtlStep {
    pub step: usize,
    pub total: f64,
    pub parody: f64,
    pub sarcasm: Option<f64>,
    pub humor: Option<f64>,
}

impl MtlModel {
    pub fn build(
        config: &EncoderConfig,
        weights: MtlWeights,
        seed: u64,
        base: Option<&Checkpoint>,
    ) -> Result<Self> {
        config.validate()?;
        weights.validate()?;
        let shared = match base {
            Some(ck) if ck.config == *config => body(&ck.params),
            Some(_) => {
                return Err(Error::Checkpoint(
                    "base checkpoint config does not match the encoder".into(),
                ))
            }
            None => fresh_body(config, seed, EncoderRole::Parody)?,
        };
        let d = config.d_model;
        let mut params = ParamSet::new();
        params.absorb(EncoderRole::Parody.prefix(), &shared);
        params.absorb(
            HEAD_PREFIX,
            &init_head_params(d, &mut stream(seed, "init/head")),
        );
        params.absorb(
            SARCASM_HEAD,
            &init_head_params(d, &mut stream(seed, "init/head/sarcasm")),
        );
        params.absorb(
            HUMOR_HEAD,
            &init_head_params(d, &mut stream(seed, "init/head/humor")),
        );
        Ok(Self {
            config: *config,
            weights,
            params,
        })
    }

    fn head(role: EncoderRole) -> &'static str {
        match role {
            EncoderRole::Parody => HEAD_PREFIX,
            EncoderRole::Sarcasm => SARCASM_HEAD,
            EncoderRole::Humor => HUMOR_HEAD,
        }
    }

    /// Mean binary cross-entropy of one task on one batch.
    pub fn task_loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        task: EncoderRole,
        batch: &[TokenSequence],
        labels: &[f64],
        dropout_rng: Option<&mut R>,
    ) -> Result<Var> {
        let enc = Encoder::new(&self.config, EncoderRole::Parody.prefix());
        let out = enc.forward(tape, params, batch, dropout_rng)?;
        let z = head_logits(tape, params, Self::head(task), out.cls)?;
        tape.bce_with_logits(z, labels)
    }

    /// Weighted sum over the tasks present in `batches` (parody first).
    /// Returns the total and each task's own loss.
    pub fn total_loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        batches: &[(EncoderRole, Vec<TokenSequence>, Vec<f64>)],
        mut dropout_rng: Option<&mut R>,
    ) -> Result<(Var, Vec<(EncoderRole, Var)>)> {
        let mut total: Option<Var> = None;
        let mut parts = Vec::with_capacity(batches.len());
        for (task, seqs, labels) in batches {
            let l = self.task_loss(
                tape,
                params,
                *task,
                seqs,
                labels,
                dropout_rng.as_deref_mut(),
            )?;
            let w = match task {
                EncoderRole::Parody => self.weights.parody,
                EncoderRole::Sarcasm => self.weights.sarcasm,
                EncoderRole::Humor => self.weights.humor,
            };
            let term = tape.scale(l, w)?;
            total = Some(match total {
                None => term,
                Some(t) => tape.add(t, term)?,
            });
            parts.push((*task, l));
        }
        let total = total.ok_or_else(|| Error::Data("MTL step without any task batch".into()))?;
        Ok((total, parts))
    }

    pub fn predict_labels(&self, seqs: &[TokenSequence], batch_size: usize) -> Result<Vec<u8>> {
        let enc = Encoder::new(&self.config, EncoderRole::Parody.prefix());
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(batch_size.max(1)) {
            let mut tape = Tape::new();
            let o = enc.forward::<StreamRng>(
                &mut tape,
                &self.params,
                &trim_batch(chunk.to_vec()),
                None,
            )?;
            let z = head_logits(&mut tape, &self.params, HEAD_PREFIX, o.cls)?;
            out.extend(
                tape.value(z)
                    .values()
                    .iter()
                    .map(|&z| prediction(z, DEFAULT_THRESHOLD).label),
            );
        }
        Ok(out)
    }
}

/// Endless shuffled batches over one auxiliary corpus.
struct Cycler {
    data: EncodedSplit,
    rng: StreamRng,
    queue: Vec<Vec<usize>>,
    batch_size: usize,
}

impl Cycler {
    fn next(&mut self) -> (Vec<TokenSequence>, Vec<f64>) {
        if self.queue.is_empty() {
            self.queue = batches(self.data.len(), self.batch_size, &mut self.rng);
            self.queue.reverse();
        }
        let idx = self.queue.pop().expect("non-empty corpus");
        self.data.batch(&idx)
    }
}

#[derive(Clone, Debug)]
pub struct MtlOutcome {
    pub model: MtlModel,
    pub steps: Vec<MtlStep>,
    pub logs: Vec<EpochLog>,
    pub train_f1: f64,
    pub dev_f1: f64,
    pub test_f1: f64,
    pub warnings: Vec<String>,
}

/// Multi-task training of one shared encoder. Each step draws one parody
/// batch and then one batch per auxiliary task with a non-zero weight, in
/// sarcasm, humor order. Zero-weight tasks are skipped entirely.
pub fn run_mtl(
    cfg: &StageConfig,
    seed: u64,
    data: &PreparedData,
    sarcasm: &[Post],
    humor: &[Post],
    base: Option<&Checkpoint>,
) -> Result<MtlOutcome> {
    cfg.expect(Stage::Mtl)?;
    let weights = cfg.mtl_weights.expect("validated");
    if data.train.is_empty() {
        return Err(Error::Data("empty parody training split".into()));
    }
    let mut warnings = Vec::new();
    if weights.sarcasm == 0.0 && weights.humor == 0.0 {
        warnings.push(
            "all auxiliary MTL weights are zero; this is single-task parody training".to_string(),
        );
    }
    let bs = cfg.batch_size;
    let mut aux = Vec::new();
    for (role, w, posts) in [
        (EncoderRole::Sarcasm, weights.sarcasm, sarcasm),
        (EncoderRole::Humor, weights.humor, humor),
    ] {
        if w == 0.0 {
            continue;
        }
        if posts.is_empty() {
            return Err(Error::Data(format!(
                "MTL weight for {} is non-zero but its corpus is empty",
                role.as_str()
            )));
        }
        if let Some(p) = posts.iter().find(|p| p.label.is_none()) {
            return Err(Error::Data(format!("post `{}` has no label", p.id)));
        }
        aux.push((
            role,
            Cycler {
                data: EncodedSplit::new(posts, &data.vocab, data.config.max_len),
                rng: stream(seed, &format!("shuffle/mtl/{}", role.as_str())),
                queue: Vec::new(),
                batch_size: bs,
            },
        ));
    }

    let mut model = MtlModel::build(&data.config, weights, seed, base)?;
    let mut opt = super::optimizer(cfg);
    let mut shuffle = stream(seed, "shuffle/joint");
    let mut drop = stream(seed, "dropout/joint");
    let mut steps = Vec::new();
    let mut logs = Vec::new();
    for epoch in 1..=cfg.epochs {
        let mut total_p = 0.0;
        for idx in batches(data.train.len(), bs, &mut shuffle) {
            let (seqs, labels) = data.train.batch(&idx);
            let mut task_batches = vec![(EncoderRole::Parody, seqs, labels)];
            for (role, c) in aux.iter_mut() {
                let (s, l) = c.next();
                task_batches.push((*role, s, l));
            }
            let mut tape = Tape::new();
            let (total, parts) =
                model.total_loss(&mut tape, &model.params, &task_batches, Some(&mut drop))?;
            let part = |r: EncoderRole| {
                parts
                    .iter()
                    .find(|(t, _)| *t == r)
                    .map(|(_, v)| tape.value(*v).item())
            };
            let step = MtlStep {
                step: steps.len(),
                total: tape.value(total).item(),
                parody: part(EncoderRole::Parody).expect("parody term"),
                sarcasm: part(EncoderRole::Sarcasm),
                humor: part(EncoderRole::Humor),
            };
            let grads = tape.backward(total)?.params();
            opt.step(&mut model.params, &grads)?;
            total_p += step.parody * idx.len() as f64;
            steps.push(step);
        }
        logs.push(EpochLog {
            epoch,
            split: "train".into(),
            loss: Some(total_p / data.train.len() as f64),
            f1: split_f1(&model.predict_labels(&data.train.seqs, bs)?, &data.train)?,
        });
        if !data.dev.is_empty() {
            logs.push(EpochLog {
                epoch,
                split: "dev".into(),
                loss: None,
                f1: split_f1(&model.predict_labels(&data.dev.seqs, bs)?, &data.dev)?,
            });
        }
    }
    let f1_of = |split: &EncodedSplit| -> Result<f64> {
        if split.is_empty() {
            Ok(f64::NAN)
        } else {
            split_f1(&model.predict_labels(&split.seqs, bs)?, split)
        }
    };
    let (train_f1, dev_f1, test_f1) = (f1_of(&data.train)?, f1_of(&data.dev)?, f1_of(&data.test)?);
    Ok(MtlOutcome {
        model,
        steps,
        logs,
        train_f1,
        dev_f1,
        test_f1,
        warnings,
    })
}

/// Auxiliary weight values searched with the parody weight fixed at 1.
pub fn mtl_weight_grid() -> Vec<MtlWeights> {
    const VALUES: [f64; 3] = [0.25, 0.5, 1.0];
    VALUES
        .iter()
        .flat_map(|&s| VALUES.iter().map(move |&h| MtlWeights::new(1.0, s, h)))
        .collect()
}

#[derive(Clone, Debug)]
pub struct MtlSearch {
    /// Every candidate with its dev F1, in grid order.
    pub candidates: Vec<(MtlWeights, f64)>,
    pub best: MtlWeights,
    pub outcome: MtlOutcome,
}

/// Picks the weights with the best dev F1 (first wins ties).
pub fn run_mtl_search(
    cfg: &StageConfig,
    seed: u64,
    data: &PreparedData,
    sarcasm: &[Post],
    humor: &[Post],
    base: Option<&Checkpoint>,
    grid: &[MtlWeights],
) -> Result<MtlSearch> {
    if data.dev.is_empty() {
        return Err(Error::Data(
            "weight search needs a non-empty dev split".into(),
        ));
    }
    let mut best: Option<(MtlWeights, f64, MtlOutcome)> = None;
    let mut candidates = Vec::with_capacity(grid.len());
    for &w in grid {
        let mut c = cfg.clone();
        c.mtl_weights = Some(w);
        let out = run_mtl(&c, seed, data, sarcasm, humor, base)?;
        candidates.push((w, out.dev_f1));
        if best.as_ref().is_none_or(|(_, f, _)| out.dev_f1 > *f) {
            best = Some((w, out.dev_f1, out));
        }
    }
    let (best, _, outcome) = best.ok_or_else(|| Error::Config("empty MTL weight grid".into()))?;
    Ok(MtlSearch {
        candidates,
        best,
        outcome,
    })
}
