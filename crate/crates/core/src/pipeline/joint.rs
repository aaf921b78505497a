use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::{Stage, StageConfig};
use super::model::{EncoderSources, MultiEncoderModel};
use super::{batches, split_f1, PreparedData};
use crate::encoder::StageRecord;
use crate::error::{Error, Result};
use crate::fusion::FusionSpec;
use crate::rng::stream;
use crate::tensorcore::Tape;

/// One row of the per-epoch metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: String,
    /// Mean training loss; absent for evaluation rows.
    pub loss: Option<f64>,
    pub f1: f64,
}

#[derive(Clone, Debug)]
pub struct JointOutcome {
    pub model: MultiEncoderModel,
    pub logs: Vec<EpochLog>,
    /// Loss of every optimiser step, in order.
    pub step_losses: Vec<f64>,
    pub train_f1: f64,
    pub dev_f1: f64,
    pub test_f1: f64,
}

/// End-to-end fine-tuning of every encoder, the fusion layer and the head on
/// the parody training split.
pub fn run_joint_finetune(
    cfg: &StageConfig,
    fusion: &FusionSpec,
    seed: u64,
    data: &PreparedData,
    sources: &EncoderSources,
) -> Result<JointOutcome> {
    cfg.expect(Stage::JointFinetune)?;
    if data.train.is_empty() {
        return Err(Error::Data("empty parody training split".into()));
    }
    let mut model = MultiEncoderModel::build(&data.config, fusion, seed, sources)?;
    let mut opt = super::optimizer(cfg);
    let mut shuffle = stream(seed, "shuffle/joint");
    let mut drop = stream(seed, "dropout/joint");
    let mut logs = Vec::new();
    let mut step_losses = Vec::new();
    let bs = cfg.batch_size;
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for idx in batches(data.train.len(), bs, &mut shuffle) {
            let (seqs, labels) = data.train.batch(&idx);
            let mut tape = Tape::new();
            let loss = model.loss(&mut tape, &model.params, &seqs, &labels, Some(&mut drop))?;
            let value = tape.value(loss).item();
            let grads = tape.backward(loss)?.params();
            opt.step(&mut model.params, &grads)?;
            total += value * idx.len() as f64;
            step_losses.push(value);
        }
        let train_f1 = split_f1(&model.predict_labels(&data.train.seqs, bs)?, &data.train)?;
        logs.push(EpochLog {
            epoch,
            split: "train".into(),
            loss: Some(total / data.train.len() as f64),
            f1: train_f1,
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

    let f1_of = |split: &super::EncodedSplit| -> Result<f64> {
        if split.is_empty() {
            Ok(f64::NAN)
        } else {
            split_f1(&model.predict_labels(&split.seqs, bs)?, split)
        }
    };
    let (train_f1, dev_f1, test_f1) = (f1_of(&data.train)?, f1_of(&data.dev)?, f1_of(&data.test)?);

    let mut metrics = BTreeMap::new();
    metrics.insert("train_f1".to_string(), train_f1);
    if test_f1.is_finite() {
        metrics.insert("test_f1".to_string(), test_f1);
    }
    let rec = StageRecord {
        stage: Stage::JointFinetune.as_str().to_string(),
        role: format!("{}:{}", fusion.strategy.as_str(), fusion.subset),
        seed,
        epochs: cfg.epochs,
        batch_size: bs,
        learning_rate: cfg.learning_rate,
        examples: data.train.len(),
        metrics,
    };
    for lineage in model.lineage.values_mut() {
        lineage.push(rec.clone());
    }
    Ok(JointOutcome {
        model,
        logs,
        step_losses,
        train_f1,
        dev_f1,
        test_f1,
    })
}
