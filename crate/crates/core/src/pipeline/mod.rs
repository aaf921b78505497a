//! Staged training: domain-adaptive MLM pretraining and auxiliary fine-tuning
//! of the humor and sarcasm encoders, joint multi-encoder fine-tuning on parody
//! labels, the strategy × subset ablation grid, and the multi-task baseline.

mod ablation;
mod config;
mod joint;
mod model;
mod mtl;
mod stages;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use ablation::{assemble_reports, run_ablation, AblationReport, CellResult};
pub use config::{
    CorpusPaths, EncoderShape, ExperimentPlan, FusionGrid, MtlWeights, Profile, RoleStages, Stage,
    StageConfig, StagePlan, VocabSettings,
};
pub use joint::{run_joint_finetune, EpochLog, JointOutcome};
pub use model::{EncoderSources, ModelCheckpoint, ModelForward, MultiEncoderModel};
pub use mtl::{mtl_weight_grid, run_mtl, run_mtl_search, MtlModel, MtlOutcome, MtlSearch, MtlStep};
pub use stages::{run_adapt_pretrain, run_aux_finetune, AdaptOutcome, AuxOutcome};

use crate::data::{make_splits, read_jsonl, Post, Splits, TokenSequence, Vocab};
use crate::encoder::{Checkpoint, EncoderConfig};
use crate::error::{Error, Result};
use crate::eval::f1_score;
use crate::fusion::EncoderRole;
use crate::rng::stream;
use crate::tensorcore::{Adam, AdamConfig};

/// Global gradient-norm bound applied in every training stage.
pub const CLIP_NORM: f64 = 1.0;

pub(crate) fn optimizer(cfg: &StageConfig) -> Adam {
    Adam::new(AdamConfig::with_lr(cfg.learning_rate).with_clip_norm(CLIP_NORM))
}

/// Shuffled mini-batches of `0..n`.
pub(crate) fn batches<R: Rng + ?Sized>(
    n: usize,
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Cuts a batch down to its longest real sequence. Padding never reaches the
/// `[CLS]` state, so this only saves work.
pub(crate) fn trim_batch(seqs: Vec<TokenSequence>) -> Vec<TokenSequence> {
    let longest = seqs
        .iter()
        .map(|s| s.mask.iter().rposition(|&m| m).map_or(1, |p| p + 1))
        .max()
        .unwrap_or(1);
    seqs.into_iter().map(|s| s.with_len(longest)).collect()
}

pub(crate) fn subsample<R: Rng + ?Sized>(
    posts: Vec<Post>,
    cap: Option<usize>,
    rng: &mut R,
) -> Vec<Post> {
    match cap {
        Some(n) if n < posts.len() => {
            let mut idx: Vec<usize> = (0..posts.len()).collect();
            idx.shuffle(rng);
            let mut keep: Vec<usize> = idx.into_iter().take(n).collect();
            keep.sort_unstable();
            keep.into_iter().map(|i| posts[i].clone()).collect()
        }
        _ => posts,
    }
}

/// Posts of one split, encoded once.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EncodedSplit {
    pub ids: Vec<String>,
    pub seqs: Vec<TokenSequence>,
    pub labels: Vec<u8>,
}

impl EncodedSplit {
    pub fn new(posts: &[Post], vocab: &Vocab, max_len: usize) -> Self {
        Self {
            ids: posts.iter().map(|p| p.id.clone()).collect(),
            seqs: posts
                .iter()
                .map(|p| vocab.encode(&p.text, max_len))
                .collect(),
            labels: posts.iter().map(|p| p.label.unwrap_or(0)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> (Vec<TokenSequence>, Vec<f64>) {
        (
            trim_batch(idx.iter().map(|&i| self.seqs[i].clone()).collect()),
            idx.iter().map(|&i| f64::from(self.labels[i])).collect(),
        )
    }
}

/// Every corpus an experiment may touch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpora {
    pub parody: Vec<Post>,
    pub humor: Vec<Post>,
    pub sarcasm: Vec<Post>,
    pub humor_pretrain: Vec<Post>,
    pub sarcasm_pretrain: Vec<Post>,
}

impl Corpora {
    pub fn load(paths: &CorpusPaths) -> Result<Self> {
        let load = |p: &Option<std::path::PathBuf>| -> Result<Vec<Post>> {
            p.as_deref().map_or(Ok(Vec::new()), read_jsonl)
        };
        let c = Self {
            parody: load(&paths.parody)?,
            humor: load(&paths.humor)?,
            sarcasm: load(&paths.sarcasm)?,
            humor_pretrain: load(&paths.humor_pretrain)?,
            sarcasm_pretrain: load(&paths.sarcasm_pretrain)?,
        };
        if c.parody.is_empty() {
            return Err(Error::Data("a parody corpus is required".into()));
        }
        Ok(c)
    }

    pub fn from_synth(c: crate::data::synth::SynthCorpora) -> Self {
        Self {
            parody: c.parody,
            humor: c.humor,
            sarcasm: c.sarcasm,
            humor_pretrain: c.humor_pretrain,
            sarcasm_pretrain: c.sarcasm_pretrain,
        }
    }

    pub fn all_posts(&self) -> impl Iterator<Item = &Post> {
        self.parody
            .iter()
            .chain(&self.humor)
            .chain(&self.sarcasm)
            .chain(&self.humor_pretrain)
            .chain(&self.sarcasm_pretrain)
    }

    /// Labelled auxiliary corpus of `role`.
    pub fn labelled(&self, role: EncoderRole) -> &[Post] {
        match role {
            EncoderRole::Parody => &self.parody,
            EncoderRole::Humor => &self.humor,
            EncoderRole::Sarcasm => &self.sarcasm,
        }
    }

    /// Pretraining texts of `role`, falling back to the labelled corpus.
    pub fn pretrain(&self, role: EncoderRole) -> &[Post] {
        let own = match role {
            EncoderRole::Humor => &self.humor_pretrain,
            EncoderRole::Sarcasm => &self.sarcasm_pretrain,
            EncoderRole::Parody => &self.parody,
        };
        if own.is_empty() {
            self.labelled(role)
        } else {
            own
        }
    }
}

/// Shared vocabulary, encoder config and encoded parody splits.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub vocab: Vocab,
    pub config: EncoderConfig,
    pub splits: Splits,
    pub train: EncodedSplit,
    pub dev: EncodedSplit,
    pub test: EncodedSplit,
}

impl PreparedData {
    pub fn from_splits(vocab: Vocab, config: EncoderConfig, splits: Splits) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "encoder vocab_size {} differs from vocabulary size {}",
                config.vocab_size,
                vocab.len()
            )));
        }
        let enc = |p: &[Post]| EncodedSplit::new(p, &vocab, config.max_len);
        let (train, dev, test) = (enc(&splits.train), enc(&splits.dev), enc(&splits.test));
        Ok(Self {
            vocab,
            config,
            splits,
            train,
            dev,
            test,
        })
    }
}

/// Builds the vocabulary over every corpus and splits the parody corpus.
pub fn prepare(plan: &ExperimentPlan, corpora: &Corpora) -> Result<PreparedData> {
    plan.validate()?;
    let texts: Vec<&str> = corpora.all_posts().map(|p| p.text.as_str()).collect();
    let vocab = Vocab::build_from_texts(texts, plan.vocab.min_count, plan.vocab.max_tokens)?;
    let config = plan.encoder.with_vocab(vocab.len());
    let splits = make_splits(
        &corpora.parody,
        &plan.split,
        &mut stream(plan.split_seed, "data/split"),
    )?;
    PreparedData::from_splits(vocab, config, splits)
}

/// What happened to one auxiliary encoder during preparation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxiliarySummary {
    pub role: EncoderRole,
    pub mlm_losses: Vec<f64>,
    pub aux_train_accuracy: f64,
    pub aux_dev_accuracy: f64,
}

/// Runs adapt → aux for every auxiliary encoder the plan's grid needs, saving
/// checkpoints under `out/checkpoints` when `out` is given.
pub fn train_auxiliary_encoders(
    plan: &ExperimentPlan,
    corpora: &Corpora,
    data: &PreparedData,
    base: Option<&Checkpoint>,
    out: Option<&Path>,
) -> Result<(EncoderSources, Vec<AuxiliarySummary>)> {
    let mut sources = EncoderSources {
        base: base.cloned(),
        ..EncoderSources::default()
    };
    let mut summaries = Vec::new();
    for (role, stages, needed) in [
        (
            EncoderRole::Humor,
            &plan.stages.humor,
            plan.fusion.needs(true),
        ),
        (
            EncoderRole::Sarcasm,
            &plan.stages.sarcasm,
            plan.fusion.needs(false),
        ),
    ] {
        if !needed {
            continue;
        }
        let adapt = run_adapt_pretrain(
            role,
            &stages.adapt,
            corpora.pretrain(role),
            &data.vocab,
            &data.config,
            base,
        )?;
        let aux = run_aux_finetune(
            role,
            &stages.aux,
            Some(&adapt.checkpoint),
            corpora.labelled(role),
            &data.vocab,
            &data.config,
        )?;
        if let Some(dir) = out {
            let dir = dir.join("checkpoints");
            adapt
                .checkpoint
                .save(&dir.join(format!("{}_adapt.json", role.as_str())))?;
            aux.checkpoint
                .save(&dir.join(format!("{}_aux.json", role.as_str())))?;
        }
        summaries.push(AuxiliarySummary {
            role,
            mlm_losses: adapt.losses.clone(),
            aux_train_accuracy: aux.train_accuracy,
            aux_dev_accuracy: aux.dev_accuracy,
        });
        match role {
            EncoderRole::Humor => sources.humor = Some(aux.checkpoint),
            _ => sources.sarcasm = Some(aux.checkpoint),
        }
    }
    Ok((sources, summaries))
}

pub(crate) fn split_f1(predicted: &[u8], split: &EncodedSplit) -> Result<f64> {
    Ok(f1_score(predicted, &split.labels, 1)?.f1)
}

/// `epoch,split,loss,f1` rows.
pub fn metrics_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,split,loss,f1\n");
    for l in logs {
        let loss = l.loss.map_or(String::new(), |v| format!("{v:.10}"));
        out.push_str(&format!("{},{},{},{:.10}\n", l.epoch, l.split, loss, l.f1));
    }
    out
}
