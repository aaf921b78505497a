use std::path::PathBuf;

use anyhow::Result;
use clap::Args;

use parody_core::data::synth::{write_corpora, MarkerScheme, SynthSpec};
use parody_core::data::{make_splits, read_jsonl, write_splits, SplitMode, SplitSpec};
use parody_core::rng::stream;

use crate::args::out_dir;
use crate::Usage;

#[derive(Args, Debug)]
pub struct GenSynthArgs {
    /// Label rule: xor (humor XOR sarcasm marker) or marker (parody marker present).
    #[arg(long, default_value = "xor")]
    pub scheme: MarkerScheme,
    /// Labelled parody posts.
    #[arg(long, default_value_t = 400)]
    pub parody: usize,
    /// Labelled posts per auxiliary task.
    #[arg(long, default_value_t = 200)]
    pub auxiliary: usize,
    /// Positive-only pretraining texts per auxiliary task.
    #[arg(long, default_value_t = 200)]
    pub pretrain: usize,
    #[arg(long, default_value_t = 50)]
    pub accounts: usize,
    #[arg(long, default_value_t = 0.5)]
    pub positive_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory [default: $PARODY_OUT, then ./out]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn gen_synth(a: GenSynthArgs) -> Result<()> {
    let spec = SynthSpec {
        scheme: a.scheme,
        parody: a.parody,
        auxiliary: a.auxiliary,
        pretrain: a.pretrain,
        accounts: a.accounts,
        positive_rate: a.positive_rate,
        seed: a.seed,
    };
    let dir = out_dir(a.out.as_deref(), None);
    let manifest = write_corpora(&dir, &spec)?;
    println!(
        "wrote {} corpora to {}",
        manifest.files.len(),
        dir.display()
    );
    println!("rule: {}", manifest.rule);
    Ok(())
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    /// Parody corpus (JSON lines).
    #[arg(long, conflicts_with = "data")]
    pub input: Option<PathBuf>,
    /// Directory holding parody.jsonl.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "person")]
    pub mode: SplitMode,
    /// M->F / F->M for gender splits, the held-out region for location splits.
    #[arg(long)]
    pub direction: Option<String>,
    #[arg(long, default_value_t = 0.8)]
    pub train: f64,
    #[arg(long, default_value_t = 0.1)]
    pub dev: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory [default: $PARODY_OUT, then ./out]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn split(a: SplitArgs) -> Result<()> {
    let spec = SplitSpec::new(a.mode, a.direction.as_deref()).with_fractions(a.train, a.dev);
    spec.validate()?;
    let input = match (a.input, a.data) {
        (Some(p), _) => p,
        (None, Some(d)) => d.join("parody.jsonl"),
        (None, None) => return Err(Usage("split needs --input FILE or --data DIR".into()).into()),
    };
    let corpus = read_jsonl(&input)?;
    let splits = make_splits(&corpus, &spec, &mut stream(a.seed, "data/split"))?;
    let dir = out_dir(a.out.as_deref(), None);
    let manifest = write_splits(&dir, &splits, &spec, a.seed)?;
    let counts: Vec<String> = manifest
        .counts
        .iter()
        .map(|(k, v)| format!("{k:?} {v}").to_lowercase())
        .collect();
    println!(
        "{} posts split into {} ({})",
        corpus.len(),
        counts.join(", "),
        dir.display()
    );
    Ok(())
}
