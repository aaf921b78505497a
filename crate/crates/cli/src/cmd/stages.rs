use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use serde::Serialize;

use parody_core::encoder::Checkpoint;
use parody_core::fusion::EncoderRole;
use parody_core::io::{write_atomic, write_json};
use parody_core::pipeline::{
    run_adapt_pretrain, run_aux_finetune, ExperimentPlan, FusionGrid, RoleStages,
};

use crate::args::{save_plan, Context, PlanArgs};
use crate::Usage;

fn role_stages(plan: &ExperimentPlan, role: EncoderRole) -> Result<&RoleStages> {
    match role {
        EncoderRole::Humor => Ok(&plan.stages.humor),
        EncoderRole::Sarcasm => Ok(&plan.stages.sarcasm),
        EncoderRole::Parody => Err(Usage("--role must be humor or sarcasm".into()).into()),
    }
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub plan: PlanArgs,
    /// humor or sarcasm.
    #[arg(long)]
    pub role: EncoderRole,
}

pub fn pretrain(a: PretrainArgs) -> Result<()> {
    let plan = a.plan.resolve(FusionGrid::full())?;
    let stages = role_stages(&plan, a.role)?;
    let ctx = Context::load(&plan)?;
    save_plan(&plan, a.plan.plan.as_deref())?;
    let name = a.role.as_str();
    let out = run_adapt_pretrain(
        a.role,
        &stages.adapt,
        ctx.corpora.pretrain(a.role),
        &ctx.data.vocab,
        &ctx.data.config,
        ctx.base.as_ref(),
    )?;
    let dir = &plan.output_dir;
    let ck = dir.join("checkpoints").join(format!("{name}_adapt.json"));
    out.checkpoint.save(&ck)?;
    let mut csv = String::from("epoch,mlm_loss\n");
    for (epoch, l) in out.losses.iter().enumerate() {
        csv.push_str(&format!("{epoch},{l:.10}\n"));
    }
    write_atomic(
        &dir.join(format!("{name}_adapt_losses.csv")),
        csv.as_bytes(),
    )?;
    let curve: Vec<String> = out.losses.iter().map(|l| format!("{l:.4}")).collect();
    println!("{name} MLM loss per epoch: {}", curve.join(" -> "));
    println!("checkpoint: {}", ck.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct AuxArgs {
    #[command(flatten)]
    pub plan: PlanArgs,
    /// humor or sarcasm.
    #[arg(long)]
    pub role: EncoderRole,
    /// Checkpoint to start from, normally the output of `pretrain`. Without it
    /// the encoder starts from a raw initialisation.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Serialize)]
struct AuxReport<'a> {
    role: &'a str,
    init: Option<&'a std::path::Path>,
    train_accuracy: f64,
    dev_accuracy: Option<f64>,
    epoch_losses: &'a [f64],
    stages: Vec<&'a str>,
}

pub fn finetune_aux(a: AuxArgs) -> Result<()> {
    let plan = a.plan.resolve(FusionGrid::full())?;
    let stages = role_stages(&plan, a.role)?;
    let init = a.init.as_deref().map(Checkpoint::load).transpose()?;
    let ctx = Context::load(&plan)?;
    save_plan(&plan, a.plan.plan.as_deref())?;
    let name = a.role.as_str();
    if init.is_none() {
        eprintln!("warning: {name} encoder starts from a raw initialisation (no --init)");
    }
    let out = run_aux_finetune(
        a.role,
        &stages.aux,
        init.as_ref(),
        ctx.corpora.labelled(a.role),
        &ctx.data.vocab,
        &ctx.data.config,
    )?;
    let dir = &plan.output_dir;
    let ck = dir.join("checkpoints").join(format!("{name}_aux.json"));
    out.checkpoint.save(&ck)?;
    let report = AuxReport {
        role: name,
        init: a.init.as_deref(),
        train_accuracy: out.train_accuracy,
        dev_accuracy: out.dev_accuracy.is_finite().then_some(out.dev_accuracy),
        epoch_losses: &out.losses,
        stages: out.checkpoint.stages(),
    };
    write_json(&dir.join(format!("{name}_aux_report.json")), &report)?;
    println!(
        "{name} classifier: train accuracy {:.4}, dev accuracy {}",
        out.train_accuracy,
        report
            .dev_accuracy
            .map_or("n/a".into(), |v| format!("{v:.4}"))
    );
    println!("lineage: {}", report.stages.join(" -> "));
    println!("checkpoint: {}", ck.display());
    Ok(())
}
