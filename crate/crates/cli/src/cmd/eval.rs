use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use serde::Serialize;

use parody_core::data::{read_jsonl, write_rows, TokenSequence};
use parody_core::eval::{f1_score, macro_f1, F1Score};
use parody_core::io::write_json;
use parody_core::pipeline::{ModelCheckpoint, MultiEncoderModel};
use parody_core::Error;

use crate::args::out_dir;

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Saved model (`model.json` from `train`).
    #[arg(long)]
    pub model: PathBuf,
    /// Labelled posts (JSON lines).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Also report the macro average of both classes' F1.
    #[arg(long = "macro")]
    pub macro_f1: bool,
    /// Output directory [default: $PARODY_OUT, then ./out]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    id: &'a str,
    probability: f64,
    label: u8,
    gold: u8,
}

#[derive(Serialize)]
struct EvalReport {
    model: PathBuf,
    input: PathBuf,
    posts: usize,
    f1: F1Score,
    #[serde(skip_serializing_if = "Option::is_none")]
    macro_f1: Option<f64>,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let ck = ModelCheckpoint::load(&a.model)?;
    let vocab = ck
        .vocab
        .clone()
        .ok_or_else(|| Error::Checkpoint(format!("{} carries no vocabulary", a.model.display())))?;
    let model = MultiEncoderModel::from_checkpoint(ck)?;
    let posts = read_jsonl(&a.input)?;
    let gold: Vec<u8> = posts
        .iter()
        .map(|p| {
            p.label
                .ok_or_else(|| Error::Data(format!("post `{}` has no label", p.id)))
        })
        .collect::<Result<_, _>>()?;
    let seqs: Vec<TokenSequence> = posts
        .iter()
        .map(|p| vocab.encode(&p.text, model.config.max_len))
        .collect();
    let preds = model.predict(&seqs, a.batch_size)?;
    let labels: Vec<u8> = preds.iter().map(|p| p.label).collect();
    let f1 = f1_score(&labels, &gold, 1)?;
    let macro_f1 = a.macro_f1.then(|| macro_f1(&labels, &gold)).transpose()?;

    let dir = out_dir(a.out.as_deref(), None);
    let rows: Vec<PredictionRow> = posts
        .iter()
        .zip(&preds)
        .zip(&gold)
        .map(|((p, pr), &g)| PredictionRow {
            id: &p.id,
            probability: pr.probability,
            label: pr.label,
            gold: g,
        })
        .collect();
    write_rows(&dir.join("predictions.jsonl"), &rows)?;
    let ids: Vec<String> = posts.iter().map(|p| p.id.clone()).collect();
    let attention = model.attention_records(&ids, &seqs, a.batch_size)?;
    if !attention.is_empty() {
        write_rows(&dir.join("attention.jsonl"), &attention)?;
    }
    let report = EvalReport {
        model: a.model,
        input: a.input,
        posts: posts.len(),
        f1,
        macro_f1,
    };
    write_json(&dir.join("eval.json"), &report)?;
    let flag = if f1.degenerate {
        " (no positives predicted or present)"
    } else {
        ""
    };
    println!(
        "{} posts: F1 {:.4}, precision {:.4}, recall {:.4}{flag}",
        report.posts, f1.f1, f1.precision, f1.recall
    );
    if let Some(m) = macro_f1 {
        println!("macro F1 {m:.4}");
    }
    println!("outputs: {}", dir.display());
    Ok(())
}
