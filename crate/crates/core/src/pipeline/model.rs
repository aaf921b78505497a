use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::trim_batch;
use crate::data::{TokenSequence, Vocab};
use crate::encoder::{init_params, Checkpoint, Encoder, EncoderConfig, StageRecord};
use crate::error::{Error, Result};
use crate::fusion::{
    attention_matrices, fuse, init_fusion_params, AttentionRecord, EncoderRole, FusionSpec,
};
use crate::head::{head_logits, init_head_params, prediction, Prediction, DEFAULT_THRESHOLD};
use crate::rng::{stream, StreamRng};
use crate::tensorcore::{ParamSet, Tape, Var};

pub(crate) const FUSION_PREFIX: &str = "fusion/";
pub(crate) const HEAD_PREFIX: &str = "head/";

/// Where the encoders of a joint model come from.
#[derive(Clone, Debug, Default)]
pub struct EncoderSources {
    /// Aux-fine-tuned humor encoder.
    pub humor: Option<Checkpoint>,
    /// Aux-fine-tuned sarcasm encoder.
    pub sarcasm: Option<Checkpoint>,
    /// Optional warm start for the parody encoder.
    pub base: Option<Checkpoint>,
}

/// Encoder body parameters of a checkpoint (no MLM or auxiliary head).
pub(crate) fn body(params: &ParamSet) -> ParamSet {
    let mut p = params.clone();
    p.retain(|name| !name.starts_with("mlm.") && !name.starts_with("aux."));
    p
}

pub(crate) fn fresh_body(config: &EncoderConfig, seed: u64, role: EncoderRole) -> Result<ParamSet> {
    Ok(body(&init_params(
        config,
        &mut stream(seed, &format!("init/{}", role.as_str())),
    )?))
}

#[derive(Clone, Copy, Debug)]
pub struct ModelForward {
    /// `[batch, 1]`
    pub logits: Var,
    pub fused: Var,
    /// `[batch * heads, k, k]` for self-attention fusion.
    pub attention: Option<Var>,
}

/// Parody, humor and sarcasm encoders, a fusion layer and a sigmoid head in
/// one flat parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiEncoderModel {
    pub config: EncoderConfig,
    pub fusion: FusionSpec,
    pub params: ParamSet,
    pub threshold: f64,
    pub lineage: BTreeMap<String, Vec<StageRecord>>,
}

impl MultiEncoderModel {
    /// Parody encoder from `sources.base` or fresh; humor and sarcasm encoders
    /// from their auxiliary checkpoints, which must exist for every role in
    /// the subset.
    pub fn build(
        config: &EncoderConfig,
        fusion: &FusionSpec,
        seed: u64,
        sources: &EncoderSources,
    ) -> Result<Self> {
        config.validate()?;
        fusion.validate(config.d_model)?;
        let mut params = ParamSet::new();
        let mut lineage = BTreeMap::new();
        for role in fusion.subset.roles() {
            let ck = match role {
                EncoderRole::Parody => sources.base.as_ref(),
                EncoderRole::Humor => Some(sources.humor.as_ref().ok_or_else(|| {
                    Error::Config(format!(
                        "subset {} needs a humor encoder checkpoint",
                        fusion.subset
                    ))
                })?),
                EncoderRole::Sarcasm => Some(sources.sarcasm.as_ref().ok_or_else(|| {
                    Error::Config(format!(
                        "subset {} needs a sarcasm encoder checkpoint",
                        fusion.subset
                    ))
                })?),
            };
            let enc_params = match ck {
                Some(ck) => {
                    if ck.config != *config {
                        return Err(Error::Checkpoint(format!(
                            "{} checkpoint config {:?} does not match {:?}",
                            role.as_str(),
                            ck.config,
                            config
                        )));
                    }
                    lineage.insert(role.as_str().to_string(), ck.lineage.clone());
                    body(&ck.params)
                }
                None => {
                    lineage.insert(role.as_str().to_string(), Vec::new());
                    fresh_body(config, seed, role)?
                }
            };
            params.absorb(role.prefix(), &enc_params);
        }
        let d = config.d_model;
        params.absorb(
            FUSION_PREFIX,
            &init_fusion_params(fusion, d, &mut stream(seed, "init/fusion"))?,
        );
        params.absorb(
            HEAD_PREFIX,
            &init_head_params(fusion.output_dim(d), &mut stream(seed, "init/head")),
        );
        Ok(Self {
            config: *config,
            fusion: *fusion,
            params,
            threshold: DEFAULT_THRESHOLD,
            lineage,
        })
    }

    /// Forward pass with explicit parameters so that perturbed copies can be
    /// evaluated. Dropout is applied iff `dropout_rng` is given.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        batch: &[TokenSequence],
        mut dropout_rng: Option<&mut R>,
    ) -> Result<ModelForward> {
        let mut reps = Vec::with_capacity(3);
        for role in self.fusion.subset.roles() {
            let enc = Encoder::new(&self.config, role.prefix());
            reps.push(
                enc.forward(tape, params, batch, dropout_rng.as_deref_mut())?
                    .cls,
            );
        }
        let out = fuse(tape, &self.fusion, &reps, params, FUSION_PREFIX)?;
        let logits = head_logits(tape, params, HEAD_PREFIX, out.fused)?;
        Ok(ModelForward {
            logits,
            fused: out.fused,
            attention: out.attention,
        })
    }

    /// Mean binary cross-entropy of a batch.
    pub fn loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        batch: &[TokenSequence],
        labels: &[f64],
        dropout_rng: Option<&mut R>,
    ) -> Result<Var> {
        let out = self.forward(tape, params, batch, dropout_rng)?;
        tape.bce_with_logits(out.logits, labels)
    }

    pub fn logits(&self, seqs: &[TokenSequence], batch_size: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(batch_size.max(1)) {
            let mut tape = Tape::new();
            let f = self.forward::<StreamRng>(
                &mut tape,
                &self.params,
                &trim_batch(chunk.to_vec()),
                None,
            )?;
            out.extend_from_slice(tape.value(f.logits).values());
        }
        Ok(out)
    }

    pub fn predict(&self, seqs: &[TokenSequence], batch_size: usize) -> Result<Vec<Prediction>> {
        Ok(self
            .logits(seqs, batch_size)?
            .into_iter()
            .map(|z| prediction(z, self.threshold))
            .collect())
    }

    pub fn predict_labels(&self, seqs: &[TokenSequence], batch_size: usize) -> Result<Vec<u8>> {
        Ok(self
            .predict(seqs, batch_size)?
            .into_iter()
            .map(|p| p.label)
            .collect())
    }

    /// Per-post, per-head fusion attention weights. Empty unless the model
    /// fuses with self-attention.
    pub fn attention_records(
        &self,
        ids: &[String],
        seqs: &[TokenSequence],
        batch_size: usize,
    ) -> Result<Vec<AttentionRecord>> {
        if ids.len() != seqs.len() {
            return Err(Error::shape(
                "attention_records",
                "ids and sequences differ in length",
            ));
        }
        let roles = self.fusion.subset.roles();
        let mut out = Vec::new();
        for (id_chunk, chunk) in ids
            .chunks(batch_size.max(1))
            .zip(seqs.chunks(batch_size.max(1)))
        {
            let mut tape = Tape::new();
            let f = self.forward::<StreamRng>(
                &mut tape,
                &self.params,
                &trim_batch(chunk.to_vec()),
                None,
            )?;
            let Some(a) = f.attention else {
                return Ok(Vec::new());
            };
            let mats = attention_matrices(tape.value(a), chunk.len(), self.fusion.heads);
            for (id, per_head) in id_chunk.iter().zip(mats) {
                for (head, weights) in per_head.into_iter().enumerate() {
                    out.push(AttentionRecord {
                        post_id: id.clone(),
                        head,
                        roles: roles.clone(),
                        weights,
                    });
                }
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, vocab: Option<&Vocab>) -> ModelCheckpoint {
        ModelCheckpoint {
            format_version: crate::encoder::CHECKPOINT_VERSION,
            config: self.config,
            fusion: self.fusion,
            threshold: self.threshold,
            lineage: self.lineage.clone(),
            vocab: vocab.cloned(),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: ModelCheckpoint) -> Result<Self> {
        if ck.format_version != crate::encoder::CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported model checkpoint version {}",
                ck.format_version
            )));
        }
        let skeleton = Self::skeleton(&ck.config, &ck.fusion)?;
        for (name, t) in skeleton.params.iter() {
            let got = ck
                .params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if got.shape() != t.shape() || !got.is_finite() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has the wrong shape or is not finite"
                )));
            }
        }
        if ck.params.len() != skeleton.params.len() {
            return Err(Error::Checkpoint(
                "model checkpoint holds unexpected parameters".into(),
            ));
        }
        Ok(Self {
            config: ck.config,
            fusion: ck.fusion,
            params: ck.params,
            threshold: ck.threshold,
            lineage: ck.lineage,
        })
    }

    /// Freshly initialised model with the right parameter names and shapes.
    fn skeleton(config: &EncoderConfig, fusion: &FusionSpec) -> Result<Self> {
        let fresh = |role: EncoderRole| -> Result<Checkpoint> {
            Checkpoint::new(*config, init_params(config, &mut stream(0, role.as_str()))?)
        };
        let sources = EncoderSources {
            humor: Some(fresh(EncoderRole::Humor)?),
            sarcasm: Some(fresh(EncoderRole::Sarcasm)?),
            base: None,
        };
        Self::build(config, fusion, 0, &sources)
    }
}

/// Saved joint model: config, fusion spec, per-encoder lineage and tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub config: EncoderConfig,
    pub fusion: FusionSpec,
    pub threshold: f64,
    pub lineage: BTreeMap<String, Vec<StageRecord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vocab>,
    pub params: ParamSet,
}

impl ModelCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        let ck: Self = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        MultiEncoderModel::from_checkpoint(ck.clone())?;
        Ok(ck)
    }
}
