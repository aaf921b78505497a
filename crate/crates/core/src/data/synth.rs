//! Synthetic corpora whose labels are fixed functions of injected marker tokens.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{write_jsonl, Gender, Location, Post, Task};
use super::vocab::tokenize;
use crate::error::{Error, Result};
use crate::rng::stream;

pub const HUMOR_MARKER: &str = "haha";
pub const SARCASM_MARKER: &str = "yeahright";
pub const PARODY_MARKER: &str = "allegedly";

const FILLER: &[&str] = &[
    "the",
    "minister",
    "said",
    "today",
    "vote",
    "bill",
    "we",
    "will",
    "support",
    "our",
    "people",
    "great",
    "meeting",
    "with",
    "council",
    "budget",
    "plan",
    "new",
    "jobs",
    "economy",
    "health",
    "schools",
    "local",
    "families",
    "proud",
    "week",
    "thanks",
    "team",
    "visit",
    "city",
    "news",
    "policy",
    "debate",
    "tax",
    "reform",
    "tonight",
    "join",
    "us",
    "office",
    "election",
    "campaign",
    "history",
    "future",
    "working",
    "hard",
    "every",
    "day",
    "community",
    "nation",
    "parliament",
    "senate",
    "house",
    "committee",
    "report",
    "action",
    "climate",
    "energy",
    "security",
    "border",
    "trade",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarkerScheme {
    /// Parody label = humor marker XOR sarcasm marker.
    Xor,
    /// Parody label = presence of the parody marker (linearly separable).
    Marker,
}

impl std::str::FromStr for MarkerScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xor" => Ok(MarkerScheme::Xor),
            "marker" => Ok(MarkerScheme::Marker),
            other => Err(Error::Config(format!(
                "unknown marker scheme `{other}` (expected xor or marker)"
            ))),
        }
    }
}

impl MarkerScheme {
    pub fn rule(self) -> String {
        match self {
            MarkerScheme::Xor => {
                format!("parody label = [{HUMOR_MARKER} present] XOR [{SARCASM_MARKER} present]")
            }
            MarkerScheme::Marker => format!("parody label = [{PARODY_MARKER} present]"),
        }
    }

    /// Re-derives the parody label from a post's text.
    pub fn label_of(self, text: &str) -> u8 {
        let toks = tokenize(text);
        let has = |m: &str| toks.iter().any(|t| t == m);
        match self {
            MarkerScheme::Xor => u8::from(has(HUMOR_MARKER) ^ has(SARCASM_MARKER)),
            MarkerScheme::Marker => u8::from(has(PARODY_MARKER)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub scheme: MarkerScheme,
    /// Labelled parody posts.
    pub parody: usize,
    /// Labelled posts per auxiliary task.
    pub auxiliary: usize,
    /// Positive-only texts per auxiliary task for domain-adaptive pretraining.
    pub pretrain: usize,
    pub accounts: usize,
    /// Fraction of positive labels.
    pub positive_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            scheme: MarkerScheme::Xor,
            parody: 400,
            auxiliary: 200,
            pretrain: 200,
            accounts: 50,
            positive_rate: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpora {
    pub parody: Vec<Post>,
    pub humor: Vec<Post>,
    pub sarcasm: Vec<Post>,
    pub humor_pretrain: Vec<Post>,
    pub sarcasm_pretrain: Vec<Post>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub spec: SynthSpec,
    pub rule: String,
    pub markers: BTreeMap<String, String>,
    pub files: Vec<String>,
}

fn positives(n: usize, rate: f64) -> usize {
    (n as f64 * rate).round() as usize
}

const SLOT: usize = 7;

/// Filler for the word at `position` after the word `prev`: each position draws
/// from its own group of seven words and each word allows three successors, so
/// the text carries structure a masked language model can learn.
fn next_filler<R: Rng + ?Sized>(rng: &mut R, position: usize, prev: usize) -> usize {
    let group = position % (FILLER.len() / SLOT);
    group * SLOT + (prev * 3 + rng.random_range(0..3)) % SLOT
}

fn sentence<R: Rng + ?Sized>(rng: &mut R, markers: &[&str]) -> String {
    let len = rng.random_range(4..=8);
    let mut prev = rng.random_range(0..FILLER.len());
    let mut words: Vec<&str> = Vec::with_capacity(len + markers.len());
    for position in 0..len {
        prev = next_filler(rng, position, prev);
        words.push(FILLER[prev]);
    }
    for m in markers {
        let at = rng.random_range(0..=words.len());
        words.insert(at, m);
    }
    words.join(" ")
}

/// Builds a balanced label vector with exactly `pos` ones, shuffled.
fn label_plan<R: Rng + ?Sized>(n: usize, pos: usize, rng: &mut R) -> Vec<bool> {
    let mut v: Vec<bool> = (0..n).map(|i| i < pos).collect();
    v.shuffle(rng);
    v
}

fn aux_corpus<R: Rng + ?Sized>(
    task: Task,
    marker: &str,
    n: usize,
    rate: f64,
    rng: &mut R,
) -> Vec<Post> {
    label_plan(n, positives(n, rate), rng)
        .into_iter()
        .enumerate()
        .map(|(i, pos)| Post {
            id: format!("{}-{i:05}", task.as_str()),
            text: sentence(
                rng,
                if pos {
                    std::slice::from_ref(&marker)
                } else {
                    &[]
                },
            ),
            label: Some(u8::from(pos)),
            account: String::new(),
            gender: Gender::Unknown,
            location: Location::Unknown,
            task,
        })
        .collect()
}

fn pretrain_corpus<R: Rng + ?Sized>(task: Task, marker: &str, n: usize, rng: &mut R) -> Vec<Post> {
    (0..n)
        .map(|i| Post {
            id: format!("{}-pt-{i:05}", task.as_str()),
            text: sentence(rng, &[marker]),
            label: Some(1),
            account: String::new(),
            gender: Gender::Unknown,
            location: Location::Unknown,
            task,
        })
        .collect()
}

pub fn generate(spec: &SynthSpec) -> Result<SynthCorpora> {
    let per_class = |n: usize| {
        let p = positives(n, spec.positive_rate);
        p.min(n - p)
    };
    if !(0.0..=1.0).contains(&spec.positive_rate)
        || per_class(spec.parody) < 10
        || per_class(spec.auxiliary) < 10
    {
        return Err(Error::Config(format!(
            "synthetic corpora need at least 10 posts per class (parody={}, auxiliary={}, positive_rate={})",
            spec.parody, spec.auxiliary, spec.positive_rate
        )));
    }
    if spec.accounts < 3 || spec.pretrain == 0 {
        return Err(Error::Config(
            "need at least 3 accounts and a non-empty pretraining corpus".into(),
        ));
    }

    let mut rng = stream(spec.seed, "synth/parody");
    let labels = label_plan(
        spec.parody,
        positives(spec.parody, spec.positive_rate),
        &mut rng,
    );
    // Marker cells per label, cycled so every cell is equally represented.
    let mut cells_pos = [(true, false), (false, true)].iter().cycle();
    let mut cells_neg = [(false, false), (true, true)].iter().cycle();
    let mut parody = Vec::with_capacity(spec.parody);
    for (i, &pos) in labels.iter().enumerate() {
        let markers: Vec<&str> = match spec.scheme {
            MarkerScheme::Xor => {
                let &(h, s) = if pos {
                    cells_pos.next()
                } else {
                    cells_neg.next()
                }
                .unwrap();
                [(h, HUMOR_MARKER), (s, SARCASM_MARKER)]
                    .into_iter()
                    .filter_map(|(on, m)| on.then_some(m))
                    .collect()
            }
            MarkerScheme::Marker => {
                if pos {
                    vec![PARODY_MARKER]
                } else {
                    vec![]
                }
            }
        };
        let acc = i % spec.accounts;
        parody.push(Post {
            id: format!("parody-{i:05}"),
            text: sentence(&mut rng, &markers),
            label: Some(u8::from(pos)),
            account: format!("pol{acc:03}"),
            gender: if acc.is_multiple_of(2) {
                Gender::M
            } else {
                Gender::F
            },
            location: [Location::US, Location::UK, Location::RoW][acc % 3],
            task: Task::Parody,
        });
    }

    let mut rng = stream(spec.seed, "synth/auxiliary");
    let humor = aux_corpus(
        Task::Humor,
        HUMOR_MARKER,
        spec.auxiliary,
        spec.positive_rate,
        &mut rng,
    );
    let sarcasm = aux_corpus(
        Task::Sarcasm,
        SARCASM_MARKER,
        spec.auxiliary,
        spec.positive_rate,
        &mut rng,
    );
    let mut rng = stream(spec.seed, "synth/pretrain");
    let humor_pretrain = pretrain_corpus(Task::Humor, HUMOR_MARKER, spec.pretrain, &mut rng);
    let sarcasm_pretrain = pretrain_corpus(Task::Sarcasm, SARCASM_MARKER, spec.pretrain, &mut rng);

    Ok(SynthCorpora {
        parody,
        humor,
        sarcasm,
        humor_pretrain,
        sarcasm_pretrain,
    })
}

pub const FILES: [&str; 5] = [
    "parody.jsonl",
    "humor.jsonl",
    "sarcasm.jsonl",
    "humor_pretrain.jsonl",
    "sarcasm_pretrain.jsonl",
];

/// Generates the corpora and writes them, plus `manifest.json`, into `dir`.
pub fn write_corpora(dir: &Path, spec: &SynthSpec) -> Result<SynthManifest> {
    let c = generate(spec)?;
    std::fs::create_dir_all(dir)?;
    for (name, posts) in FILES.iter().zip([
        &c.parody,
        &c.humor,
        &c.sarcasm,
        &c.humor_pretrain,
        &c.sarcasm_pretrain,
    ]) {
        write_jsonl(&dir.join(name), posts)?;
    }
    let manifest = SynthManifest {
        spec: spec.clone(),
        rule: spec.scheme.rule(),
        markers: [
            ("humor", HUMOR_MARKER),
            ("sarcasm", SARCASM_MARKER),
            ("parody", PARODY_MARKER),
        ]
        .into_iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect(),
        files: FILES.iter().map(|s| s.to_string()).collect(),
    };
    crate::io::write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
