use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::SplitSpec;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::{EncoderSubset, FusionSpec, FusionStrategy, Readout};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    AdaptPretrain,
    AuxFinetune,
    JointFinetune,
    Mtl,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::AdaptPretrain => "adapt_pretrain",
            Stage::AuxFinetune => "aux_finetune",
            Stage::JointFinetune => "joint_finetune",
            Stage::Mtl => "mtl",
        }
    }
}

/// Per-task loss weights of the multi-task baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtlWeights {
    pub parody: f64,
    pub sarcasm: f64,
    pub humor: f64,
}

impl MtlWeights {
    pub fn new(parody: f64, sarcasm: f64, humor: f64) -> Self {
        Self {
            parody,
            sarcasm,
            humor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.parody, self.sarcasm, self.humor];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) || self.parody <= 0.0 {
            return Err(Error::Config(format!(
                "MTL weights must be non-negative with a positive parody weight, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Optional cap on the number of examples drawn (seeded) from the stage corpus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mtl_weights: Option<MtlWeights>,
}

impl StageConfig {
    pub fn new(
        stage: Stage,
        batch_size: usize,
        epochs: usize,
        learning_rate: f64,
        seed: u64,
    ) -> Self {
        Self {
            stage,
            batch_size,
            epochs,
            learning_rate,
            seed,
            subsample: None,
            mtl_weights: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "{} stage needs a positive batch size and learning rate",
                self.stage.as_str()
            )));
        }
        match (self.stage, &self.mtl_weights) {
            (Stage::Mtl, Some(w)) => w.validate(),
            (Stage::Mtl, None) => Err(Error::Config("mtl stage requires loss weights".into())),
            (_, Some(_)) => Err(Error::Config(format!(
                "loss weights are only valid for the mtl stage, not {}",
                self.stage.as_str()
            ))),
            _ => Ok(()),
        }
    }

    pub fn expect(&self, stage: Stage) -> Result<()> {
        self.validate()?;
        if self.stage != stage {
            return Err(Error::Config(format!(
                "expected a {} stage config, got {}",
                stage.as_str(),
                self.stage.as_str()
            )));
        }
        Ok(())
    }
}

/// Adaptive pretraining plus auxiliary fine-tuning for one auxiliary encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoleStages {
    pub adapt: StageConfig,
    pub aux: StageConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub humor: RoleStages,
    pub sarcasm: RoleStages,
    pub joint: StageConfig,
    pub mtl: StageConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Toy,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Profile::Toy),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!(
                "unknown profile `{other}` (expected toy or paper)"
            ))),
        }
    }
}

impl Profile {
    /// Stage hyperparameters. `Paper` stores the published values; `Toy`
    /// keeps the epochs but uses batch 16 and learning rate 1e-3 everywhere.
    pub fn stages(self, seed: u64) -> StagePlan {
        let (adapt_bs, cls_bs, joint_bs, adapt_lr, cls_lr, joint_lr) = match self {
            Profile::Paper => (16, 128, 128, 2e-5, 3e-5, 2e-5),
            Profile::Toy => (16, 16, 16, 1e-3, 1e-3, 1e-3),
        };
        let role = |adapt_epochs| RoleStages {
            adapt: StageConfig::new(Stage::AdaptPretrain, adapt_bs, adapt_epochs, adapt_lr, seed),
            aux: StageConfig::new(Stage::AuxFinetune, cls_bs, 2, cls_lr, seed),
        };
        let mut mtl = StageConfig::new(Stage::Mtl, joint_bs, 2, joint_lr, seed);
        mtl.mtl_weights = Some(MtlWeights::new(1.0, 1.0, 1.0));
        StagePlan {
            humor: role(3),
            sarcasm: role(5),
            joint: StageConfig::new(Stage::JointFinetune, joint_bs, 2, joint_lr, seed),
            mtl,
        }
    }

    pub fn encoder(self) -> EncoderShape {
        match self {
            Profile::Toy => EncoderShape::from_config(&EncoderConfig::toy(0)),
            Profile::Paper => EncoderShape::from_config(&EncoderConfig::full(0)),
        }
    }
}

/// Encoder dimensions without the vocabulary size, which is only known once
/// the vocabulary has been built.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl EncoderShape {
    pub fn from_config(c: &EncoderConfig) -> Self {
        Self {
            d_model: c.d_model,
            layers: c.layers,
            heads: c.heads,
            ffn_mult: c.ffn_mult,
            max_len: c.max_len,
            dropout: c.dropout,
        }
    }

    pub fn with_vocab(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
            vocab_size,
            max_len: self.max_len,
            dropout: self.dropout,
        }
    }
}

/// The strategies × subsets grid to train. A single run is a 1 × 1 grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionGrid {
    pub strategies: Vec<FusionStrategy>,
    pub subsets: Vec<EncoderSubset>,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default)]
    pub readout: Readout,
}

fn default_heads() -> usize {
    4
}

impl FusionGrid {
    pub fn single(spec: FusionSpec) -> Self {
        Self {
            strategies: vec![spec.strategy],
            subsets: vec![spec.subset],
            heads: spec.heads,
            readout: spec.readout,
        }
    }

    pub fn full() -> Self {
        Self {
            strategies: FusionStrategy::ALL.to_vec(),
            subsets: EncoderSubset::TABLE_ORDER.to_vec(),
            heads: default_heads(),
            readout: Readout::Parody,
        }
    }

    /// Cells in table order: strategies as Concatenation, Self-Attention,
    /// Max-Pooling; within each, P+S+H, P+S, P+H, P.
    pub fn cells(&self) -> Vec<FusionSpec> {
        let mut out = Vec::new();
        for s in FusionStrategy::ALL
            .iter()
            .filter(|s| self.strategies.contains(s))
        {
            for sub in EncoderSubset::TABLE_ORDER
                .iter()
                .filter(|x| self.subsets.contains(x))
            {
                out.push(FusionSpec {
                    strategy: *s,
                    subset: *sub,
                    heads: self.heads,
                    readout: self.readout,
                });
            }
        }
        out
    }

    pub fn needs(&self, humor: bool) -> bool {
        self.subsets
            .iter()
            .any(|s| if humor { s.humor } else { s.sarcasm })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusPaths {
    pub parody: Option<PathBuf>,
    pub humor: Option<PathBuf>,
    pub sarcasm: Option<PathBuf>,
    pub humor_pretrain: Option<PathBuf>,
    pub sarcasm_pretrain: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabSettings {
    pub min_count: usize,
    pub max_tokens: usize,
}

impl Default for VocabSettings {
    fn default() -> Self {
        Self {
            min_count: 1,
            max_tokens: 5000,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub profile: Profile,
    pub fusion: FusionGrid,
    pub split: SplitSpec,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub encoder: EncoderShape,
    pub stages: StagePlan,
    #[serde(default)]
    pub vocab: VocabSettings,
    #[serde(default)]
    pub corpora: CorpusPaths,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: PathBuf,
}

impl ExperimentPlan {
    pub fn for_profile(profile: Profile, fusion: FusionGrid, split: SplitSpec, seed: u64) -> Self {
        Self {
            profile,
            fusion,
            split,
            split_seed: seed,
            seeds: vec![seed],
            encoder: profile.encoder(),
            stages: profile.stages(seed),
            vocab: VocabSettings::default(),
            corpora: CorpusPaths::default(),
            base_checkpoint: None,
            output_dir: PathBuf::from("out"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("plan needs at least one seed".into()));
        }
        if self.fusion.strategies.is_empty() || self.fusion.subsets.is_empty() {
            return Err(Error::Config(
                "plan needs at least one fusion strategy and subset".into(),
            ));
        }
        self.split.validate()?;
        let config = self.encoder.with_vocab(crate::data::RESERVED.len() + 1);
        config.validate()?;
        for cell in self.fusion.cells() {
            cell.validate(config.d_model)?;
        }
        self.stages.humor.adapt.expect(Stage::AdaptPretrain)?;
        self.stages.sarcasm.adapt.expect(Stage::AdaptPretrain)?;
        self.stages.humor.aux.expect(Stage::AuxFinetune)?;
        self.stages.sarcasm.aux.expect(Stage::AuxFinetune)?;
        self.stages.joint.expect(Stage::JointFinetune)?;
        self.stages.mtl.expect(Stage::Mtl)?;
        Ok(())
    }

    /// Short stable hash of the plan's JSON form, ignoring `output_dir`.
    pub fn fingerprint(&self) -> String {
        let mut plan = self.clone();
        plan.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&plan).expect("plan serialises");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    pub fn split_label(&self) -> String {
        let mode = serde_json::to_value(self.split.mode)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        match &self.split.direction {
            Some(d) => format!("{mode}:{d}"),
            None => mode,
        }
    }
}
