//! Late fusion of the parody, humor and sarcasm `[CLS]` representations.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self_attention, AttentionWeights};
use crate::encoder::{Representation, INIT_STD};
use crate::error::{Error, Result};
use crate::tensorcore::{ParamSet, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    Concat,
    SelfAttention,
    MaxPool,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 3] = [
        FusionStrategy::Concat,
        FusionStrategy::SelfAttention,
        FusionStrategy::MaxPool,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionStrategy::Concat => "concat",
            FusionStrategy::SelfAttention => "self_attention",
            FusionStrategy::MaxPool => "max_pool",
        }
    }

    /// Row label used in result tables.
    pub fn display_name(self) -> &'static str {
        match self {
            FusionStrategy::Concat => "Concatenation",
            FusionStrategy::SelfAttention => "Self-Attention",
            FusionStrategy::MaxPool => "Max-Pooling",
        }
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(FusionStrategy::Concat),
            "self_attention" => Ok(FusionStrategy::SelfAttention),
            "max_pool" => Ok(FusionStrategy::MaxPool),
            other => Err(Error::Config(format!(
                "unknown fusion strategy `{other}` (expected concat, self_attention or max_pool)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderRole {
    Parody,
    Humor,
    Sarcasm,
}

impl EncoderRole {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderRole::Parody => "parody",
            EncoderRole::Humor => "humor",
            EncoderRole::Sarcasm => "sarcasm",
        }
    }

    /// Parameter-name prefix of this encoder inside a multi-encoder model.
    pub fn prefix(self) -> &'static str {
        match self {
            EncoderRole::Parody => "parody/",
            EncoderRole::Humor => "humor/",
            EncoderRole::Sarcasm => "sarcasm/",
        }
    }
}

impl FromStr for EncoderRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parody" => Ok(EncoderRole::Parody),
            "humor" => Ok(EncoderRole::Humor),
            "sarcasm" => Ok(EncoderRole::Sarcasm),
            other => Err(Error::Config(format!(
                "unknown encoder role `{other}` (expected parody, humor or sarcasm)"
            ))),
        }
    }
}

/// Which encoders take part in fusion. The parody encoder is always active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct EncoderSubset {
    pub humor: bool,
    pub sarcasm: bool,
}

impl EncoderSubset {
    pub const P: Self = Self {
        humor: false,
        sarcasm: false,
    };
    pub const PH: Self = Self {
        humor: true,
        sarcasm: false,
    };
    pub const PS: Self = Self {
        humor: false,
        sarcasm: true,
    };
    pub const PSH: Self = Self {
        humor: true,
        sarcasm: true,
    };

    /// Table order: P+S+H, P+S, P+H, then P.
    pub const TABLE_ORDER: [Self; 4] = [Self::PSH, Self::PS, Self::PH, Self::P];

    /// Active roles in fusion order (parody, humor, sarcasm).
    pub fn roles(self) -> Vec<EncoderRole> {
        let mut r = vec![EncoderRole::Parody];
        if self.humor {
            r.push(EncoderRole::Humor);
        }
        if self.sarcasm {
            r.push(EncoderRole::Sarcasm);
        }
        r
    }

    pub fn count(self) -> usize {
        1 + usize::from(self.humor) + usize::from(self.sarcasm)
    }
}

impl fmt::Display for EncoderSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match (self.sarcasm, self.humor) {
            (false, false) => "P",
            (false, true) => "P+H",
            (true, false) => "P+S",
            (true, true) => "P+S+H",
        })
    }
}

impl FromStr for EncoderSubset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts: Vec<&str> = s.split('+').map(str::trim).collect();
        if parts.first() != Some(&"P") {
            return Err(Error::Config(format!(
                "encoder subset `{s}` must start with P"
            )));
        }
        parts.remove(0);
        let mut out = Self::P;
        for p in parts {
            match p {
                "H" if !out.humor => out.humor = true,
                "S" if !out.sarcasm => out.sarcasm = true,
                _ => return Err(Error::Config(format!("invalid encoder subset `{s}`"))),
            }
        }
        Ok(out)
    }
}

impl TryFrom<String> for EncoderSubset {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<EncoderSubset> for String {
    fn from(s: EncoderSubset) -> String {
        s.to_string()
    }
}

/// Which attended position becomes the fused vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    #[default]
    Parody,
    Mean,
}

fn default_heads() -> usize {
    4
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub strategy: FusionStrategy,
    pub subset: EncoderSubset,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default)]
    pub readout: Readout,
}

impl FusionSpec {
    pub fn new(strategy: FusionStrategy, subset: EncoderSubset) -> Self {
        Self {
            strategy,
            subset,
            heads: default_heads(),
            readout: Readout::Parody,
        }
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.strategy == FusionStrategy::SelfAttention
            && (self.heads == 0 || !d_model.is_multiple_of(self.heads))
        {
            return Err(Error::Config(format!(
                "fusion heads {} must divide d_model {d_model}",
                self.heads
            )));
        }
        Ok(())
    }

    /// Length of the fused vector for `d`-dimensional representations.
    pub fn output_dim(&self, d: usize) -> usize {
        match self.strategy {
            FusionStrategy::Concat => self.subset.count() * d,
            _ => d,
        }
    }
}

/// Fusion parameters: Q, K, V, O projections for self-attention, nothing otherwise.
pub fn init_fusion_params<R: Rng + ?Sized>(
    spec: &FusionSpec,
    d: usize,
    rng: &mut R,
) -> Result<ParamSet> {
    spec.validate(d)?;
    let mut p = ParamSet::new();
    if spec.strategy == FusionStrategy::SelfAttention {
        for name in ["wq", "wk", "wv", "wo"] {
            p.insert(name, Tensor::randn(&[d, d], INIT_STD, rng));
        }
    }
    Ok(p)
}

#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    /// `[batch, output_dim]`
    pub fused: Var,
    /// Self-attention weights, `[batch * heads, k, k]`.
    pub attention: Option<Var>,
}

/// Fuses per-encoder `[batch, d]` representations given in (parody, humor, sarcasm) order.
pub fn fuse(
    tape: &mut Tape,
    spec: &FusionSpec,
    reps: &[Var],
    params: &ParamSet,
    prefix: &str,
) -> Result<FusionOutput> {
    let first = *reps
        .first()
        .ok_or_else(|| Error::shape("fuse", "no representations"))?;
    let shape = tape.shape(first).to_vec();
    if let Some(&bad) = reps.iter().find(|&&r| tape.shape(r) != shape.as_slice()) {
        return Err(Error::shape(
            "fuse",
            format!("{:?} vs {shape:?}", tape.shape(bad)),
        ));
    }
    let (batch, d) = (shape[0], shape[1]);
    match spec.strategy {
        FusionStrategy::Concat => Ok(FusionOutput {
            fused: if reps.len() == 1 {
                first
            } else {
                tape.concat(reps)?
            },
            attention: None,
        }),
        FusionStrategy::MaxPool => Ok(FusionOutput {
            fused: if reps.len() == 1 {
                first
            } else {
                tape.max_of(reps)?
            },
            attention: None,
        }),
        FusionStrategy::SelfAttention => {
            spec.validate(d)?;
            let k = reps.len();
            let seq = tape.concat(reps)?;
            let seq = tape.reshape(seq, &[batch * k, d])?;
            let w = AttentionWeights {
                wq: tape.param(params, &format!("{prefix}wq"))?,
                wk: tape.param(params, &format!("{prefix}wk"))?,
                wv: tape.param(params, &format!("{prefix}wv"))?,
                wo: tape.param(params, &format!("{prefix}wo"))?,
                biases: None,
            };
            let attn = self_attention(tape, seq, batch, k, spec.heads, &w, None)?;
            let parody_rows: Vec<usize> = (0..batch).map(|b| b * k).collect();
            let fused = match spec.readout {
                Readout::Parody => tape.rows(attn.out, &parody_rows)?,
                Readout::Mean => {
                    let mut acc = tape.rows(attn.out, &parody_rows)?;
                    for j in 1..k {
                        let rows: Vec<usize> = (0..batch).map(|b| b * k + j).collect();
                        let r = tape.rows(attn.out, &rows)?;
                        acc = tape.add(acc, r)?;
                    }
                    tape.scale(acc, 1.0 / k as f64)?
                }
            };
            Ok(FusionOutput {
                fused,
                attention: Some(attn.probs),
            })
        }
    }
}

fn check_equal_lengths(op: &'static str, reps: &[Representation]) -> Result<usize> {
    let d = reps
        .first()
        .ok_or_else(|| Error::shape(op, "no representations"))?
        .len();
    if reps.iter().any(|r| r.len() != d) {
        return Err(Error::shape(op, "representations differ in length"));
    }
    Ok(d)
}

fn stack(tape: &mut Tape, reps: &[Representation]) -> Result<Vec<Var>> {
    reps.iter()
        .map(|r| tape.constant(Tensor::matrix(1, r.len(), r.0.clone())?))
        .collect()
}

/// Concatenation of the representations in the given order.
pub fn fuse_concat(reps: &[Representation]) -> Result<Vec<f64>> {
    check_equal_lengths("fuse_concat", reps)?;
    Ok(reps.iter().flat_map(|r| r.0.iter().copied()).collect())
}

/// Elementwise maximum across representations.
pub fn fuse_max_pool(reps: &[Representation]) -> Result<Vec<f64>> {
    check_equal_lengths("fuse_max_pool", reps)?;
    let mut out = reps[0].0.clone();
    for r in &reps[1..] {
        for (o, &v) in out.iter_mut().zip(&r.0) {
            if v > *o {
                *o = v;
            }
        }
    }
    Ok(out)
}

/// Self-attention fusion of a single example.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionFusion {
    pub fused: Vec<f64>,
    /// `weights[head][query][key]`
    pub weights: Vec<Vec<Vec<f64>>>,
}

pub fn fuse_self_attention(
    reps: &[Representation],
    params: &ParamSet,
    heads: usize,
) -> Result<AttentionFusion> {
    let d = check_equal_lengths("fuse_self_attention", reps)?;
    let spec = FusionSpec {
        strategy: FusionStrategy::SelfAttention,
        subset: EncoderSubset::PSH,
        heads,
        readout: Readout::Parody,
    };
    spec.validate(d)?;
    let mut tape = Tape::new();
    let vars = stack(&mut tape, reps)?;
    let out = fuse(&mut tape, &spec, &vars, params, "")?;
    let probs = tape.value(out.attention.expect("self-attention exposes weights"));
    Ok(AttentionFusion {
        fused: tape.value(out.fused).values().to_vec(),
        weights: attention_matrices(probs, 1, heads).remove(0),
    })
}

/// Splits a `[batch * heads, k, k]` weight tensor into `[batch][head][query][key]`.
pub fn attention_matrices(probs: &Tensor, batch: usize, heads: usize) -> Vec<Vec<Vec<Vec<f64>>>> {
    let k = probs.last_dim();
    let v = probs.values();
    (0..batch)
        .map(|b| {
            (0..heads)
                .map(|h| {
                    (0..k)
                        .map(|q| {
                            let off = ((b * heads + h) * k + q) * k;
                            v[off..off + k].to_vec()
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// One line of the attention inspection file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub post_id: String,
    pub head: usize,
    pub roles: Vec<EncoderRole>,
    pub weights: Vec<Vec<f64>>,
}
