use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::Args;
use serde::Serialize;

use parody_core::data::Vocab;
use parody_core::encoder::Checkpoint;
use parody_core::eval::RunReport;
use parody_core::fusion::{EncoderSubset, FusionSpec, FusionStrategy};
use parody_core::io::{write_atomic, write_json};
use parody_core::pipeline::{
    metrics_csv, run_joint_finetune, train_auxiliary_encoders, AuxiliarySummary, EncoderSources,
    ExperimentPlan, FusionGrid,
};

use crate::args::{fmt_f1, save_plan, Context, PlanArgs};
use crate::Usage;

/// Auxiliary checkpoints given on the command line.
#[derive(Args, Debug, Clone, Default)]
pub struct SourceArgs {
    /// Fine-tuned humor encoder (output of `finetune-aux`). Trained on the fly when absent.
    #[arg(long)]
    pub humor_checkpoint: Option<PathBuf>,
    /// Fine-tuned sarcasm encoder. Trained on the fly when absent.
    #[arg(long)]
    pub sarcasm_checkpoint: Option<PathBuf>,
}

fn load_source(path: &Path, vocab: &Vocab) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if ck.vocab.as_ref() != Some(vocab) {
        return Err(parody_core::Error::Checkpoint(format!(
            "{} was not trained with this experiment's vocabulary",
            path.display()
        ))
        .into());
    }
    Ok(ck)
}

/// Encoders the plan's grid needs: given checkpoints where supplied, the rest
/// trained through adaptive pretraining and auxiliary fine-tuning (saved under
/// the output directory).
pub fn auxiliary_sources(
    plan: &ExperimentPlan,
    ctx: &Context,
    given: &SourceArgs,
) -> Result<(EncoderSources, Vec<AuxiliarySummary>)> {
    let vocab = &ctx.data.vocab;
    let humor = given
        .humor_checkpoint
        .as_deref()
        .map(|p| load_source(p, vocab))
        .transpose()?;
    let sarcasm = given
        .sarcasm_checkpoint
        .as_deref()
        .map(|p| load_source(p, vocab))
        .transpose()?;
    let missing = (plan.fusion.needs(true) && humor.is_none())
        || (plan.fusion.needs(false) && sarcasm.is_none());
    let (mut sources, summaries) = if missing {
        train_auxiliary_encoders(
            plan,
            &ctx.corpora,
            &ctx.data,
            ctx.base.as_ref(),
            Some(&plan.output_dir),
        )?
    } else {
        (
            EncoderSources {
                base: ctx.base.clone(),
                ..EncoderSources::default()
            },
            Vec::new(),
        )
    };
    if humor.is_some() {
        sources.humor = humor;
    }
    if sarcasm.is_some() {
        sources.sarcasm = sarcasm;
    }
    for s in &summaries {
        let mlm: Vec<String> = s.mlm_losses.iter().map(|l| format!("{l:.3}")).collect();
        println!(
            "{} encoder: MLM loss {}, auxiliary train accuracy {:.3}",
            s.role.as_str(),
            mlm.join(" -> "),
            s.aux_train_accuracy
        );
    }
    Ok((sources, summaries))
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub plan: PlanArgs,
    /// concat, self_attention or max_pool [default: self_attention]
    #[arg(long)]
    pub fusion: Option<FusionStrategy>,
    /// P, P+H, P+S or P+S+H [default: P+S+H]
    #[arg(long)]
    pub subset: Option<EncoderSubset>,
    /// Attention heads of self-attention fusion.
    #[arg(long)]
    pub heads: Option<usize>,
    #[command(flatten)]
    pub sources: SourceArgs,
}

#[derive(Serialize)]
pub struct SeedRun {
    pub seed: u64,
    pub train_f1: f64,
    pub dev_f1: f64,
    pub test_f1: f64,
}

#[derive(Serialize)]
struct TrainReport<'a> {
    fusion: FusionSpec,
    report: RunReport,
    runs: Vec<SeedRun>,
    auxiliary: &'a [AuxiliarySummary],
}

pub fn train(a: TrainArgs) -> Result<()> {
    let default = FusionGrid::single(FusionSpec::new(
        FusionStrategy::SelfAttention,
        EncoderSubset::PSH,
    ));
    let mut plan = a.plan.resolve_unchecked(default)?;
    if let Some(f) = a.fusion {
        plan.fusion.strategies = vec![f];
    }
    if let Some(s) = a.subset {
        plan.fusion.subsets = vec![s];
    }
    if let Some(h) = a.heads {
        plan.fusion.heads = h;
    }
    plan.validate()?;
    let cells = plan.fusion.cells();
    let [spec] = cells[..] else {
        return Err(Usage(format!(
            "train runs one strategy/subset cell but the plan has {}; pick one with --fusion/--subset or use ablate",
            cells.len()
        ))
        .into());
    };
    let ctx = Context::load(&plan)?;
    save_plan(&plan, a.plan.plan.as_deref())?;
    let (sources, summaries) = auxiliary_sources(&plan, &ctx, &a.sources)?;

    let dir = &plan.output_dir;
    let mut runs = Vec::new();
    for &seed in &plan.seeds {
        let out = run_joint_finetune(&plan.stages.joint, &spec, seed, &ctx.data, &sources)?;
        let run_dir = dir.join(format!("seed-{seed}"));
        out.model
            .to_checkpoint(Some(&ctx.data.vocab))
            .save(&run_dir.join("model.json"))?;
        write_atomic(
            &run_dir.join("metrics.csv"),
            metrics_csv(&out.logs).as_bytes(),
        )?;
        let test = &ctx.data.test;
        let attention =
            out.model
                .attention_records(&test.ids, &test.seqs, plan.stages.joint.batch_size)?;
        if !attention.is_empty() {
            parody_core::data::write_rows(&run_dir.join("attention.jsonl"), &attention)?;
        }
        println!(
            "{} {} seed {seed}: train F1 {}, dev F1 {}, test F1 {}",
            spec.strategy.as_str(),
            spec.subset,
            fmt_f1(out.train_f1),
            fmt_f1(out.dev_f1),
            fmt_f1(out.test_f1)
        );
        runs.push(SeedRun {
            seed,
            train_f1: out.train_f1,
            dev_f1: out.dev_f1,
            test_f1: out.test_f1,
        });
    }
    let report = RunReport::new(
        plan.fingerprint(),
        plan.split_label(),
        spec.strategy.as_str(),
        spec.subset.to_string(),
        plan.seeds.clone(),
        runs.iter().map(|r| r.test_f1).collect(),
    )?;
    println!("{}: test F1 {}", report.row_label(), report.formatted());
    write_json(
        &dir.join("report.json"),
        &TrainReport {
            fusion: spec,
            report,
            runs,
            auxiliary: &summaries,
        },
    )?;
    println!("outputs: {}", dir.display());
    Ok(())
}
