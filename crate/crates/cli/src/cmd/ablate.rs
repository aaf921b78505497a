use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};

use anyhow::{anyhow, Context as _, Result};
use clap::Args;

use parody_core::encoder::Checkpoint;
use parody_core::eval::{render_csv, render_table};
use parody_core::io::{read_json, write_atomic, write_json};
use parody_core::pipeline::{
    assemble_reports, prepare, run_ablation, run_joint_finetune, AblationReport, CellResult,
    Corpora, EncoderSources, ExperimentPlan, FusionGrid,
};

use super::train::{auxiliary_sources, SourceArgs};
use crate::args::{save_plan, Context, PlanArgs};

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub plan: PlanArgs,
    /// Worker processes training grid cells in parallel.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub sources: SourceArgs,
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let mut plan = a.plan.resolve_unchecked(FusionGrid::full())?;
    if a.plan.plan.is_none() && a.plan.seeds.is_none() {
        let s = a.plan.seed.unwrap_or(1);
        plan.seeds = vec![s, s + 1, s + 2];
    }
    plan.validate()?;
    let ctx = Context::load(&plan)?;
    let plan_path = save_plan(&plan, a.plan.plan.as_deref())?;
    let (sources, summaries) = auxiliary_sources(&plan, &ctx, &a.sources)?;
    let dir = plan.output_dir.clone();
    write_json(&dir.join("auxiliary.json"), &summaries)?;

    let report = if a.jobs <= 1 {
        run_ablation(&plan, &ctx.data, &sources)?
    } else {
        let checkpoints = SourcePaths::new(&dir, &a.sources, &sources);
        let results = run_workers(&plan, &plan_path, &checkpoints, a.jobs)?;
        AblationReport {
            plan: plan.fingerprint(),
            split: plan.split_label(),
            rows: assemble_reports(&plan, &results)?,
            cells: results,
        }
    };
    write_json(&dir.join("ablation.json"), &report)?;
    let title = format!(
        "Test F1, {} split, {} seed(s)",
        report.split,
        plan.seeds.len()
    );
    let table = render_table(&title, &report.rows);
    write_atomic(&dir.join("table.txt"), table.as_bytes())?;
    write_atomic(&dir.join("table.csv"), render_csv(&report.rows).as_bytes())?;
    print!("{table}");
    println!("outputs: {}", dir.display());
    Ok(())
}

/// Paths of the auxiliary encoders as the workers will read them: the ones
/// given on the command line, else those just saved under `checkpoints/`.
struct SourcePaths {
    humor: Option<PathBuf>,
    sarcasm: Option<PathBuf>,
}

impl SourcePaths {
    fn new(dir: &Path, given: &SourceArgs, sources: &EncoderSources) -> Self {
        let pick = |flag: &Option<PathBuf>, ck: &Option<Checkpoint>, name: &str| {
            flag.clone().or_else(|| {
                ck.is_some()
                    .then(|| dir.join("checkpoints").join(format!("{name}_aux.json")))
            })
        };
        Self {
            humor: pick(&given.humor_checkpoint, &sources.humor, "humor"),
            sarcasm: pick(&given.sarcasm_checkpoint, &sources.sarcasm, "sarcasm"),
        }
    }
}

fn run_workers(
    plan: &ExperimentPlan,
    plan_path: &Path,
    ck: &SourcePaths,
    jobs: usize,
) -> Result<Vec<CellResult>> {
    let exe = std::env::current_exe().context("locating the parody executable")?;
    let cell_dir = plan.output_dir.join("cells");
    std::fs::create_dir_all(&cell_dir)?;
    let mut todo: VecDeque<(usize, u64, PathBuf)> = VecDeque::new();
    for (i, spec) in plan.fusion.cells().iter().enumerate() {
        for &seed in &plan.seeds {
            let name = format!(
                "{}_{}_seed{seed}.json",
                spec.strategy.as_str(),
                spec.subset.to_string().replace('+', "")
            );
            todo.push_back((i, seed, cell_dir.join(name)));
        }
    }
    let expected: Vec<PathBuf> = todo.iter().map(|t| t.2.clone()).collect();

    let spawn = |(cell, seed, result): (usize, u64, PathBuf)| -> Result<(String, Child)> {
        let mut cmd = Command::new(&exe);
        cmd.arg("ablate-cell")
            .arg("--plan")
            .arg(plan_path)
            .args(["--cell", &cell.to_string(), "--seed", &seed.to_string()])
            .arg("--result")
            .arg(&result);
        if let Some(p) = &ck.humor {
            cmd.arg("--humor-checkpoint").arg(p);
        }
        if let Some(p) = &ck.sarcasm {
            cmd.arg("--sarcasm-checkpoint").arg(p);
        }
        let child = cmd
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
            .context("starting a cell worker")?;
        Ok((result.display().to_string(), child))
    };

    let mut running: VecDeque<(String, Child)> = VecDeque::new();
    while !todo.is_empty() || !running.is_empty() {
        while running.len() < jobs {
            let Some(task) = todo.pop_front() else { break };
            running.push_back(spawn(task)?);
        }
        if let Some((name, child)) = running.pop_front() {
            let out = child.wait_with_output()?;
            if !out.status.success() {
                for (_, mut c) in running {
                    let _ = c.kill();
                    let _ = c.wait();
                }
                let msg = String::from_utf8_lossy(&out.stderr);
                return Err(anyhow!("cell worker for {name} failed: {}", msg.trim()));
            }
        }
    }
    expected
        .iter()
        .map(|p| Ok(read_json::<CellResult>(p)?))
        .collect()
}

/// One grid cell and seed, run by `ablate --jobs N` as a separate process.
#[derive(Args, Debug)]
pub struct CellArgs {
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub cell: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub result: PathBuf,
    #[command(flatten)]
    pub sources: SourceArgs,
}

pub fn cell(a: CellArgs) -> Result<()> {
    let plan: ExperimentPlan = read_json(&a.plan)?;
    plan.validate()?;
    let spec = *plan
        .fusion
        .cells()
        .get(a.cell)
        .ok_or_else(|| crate::Usage(format!("cell index {} out of range", a.cell)))?;
    let corpora = Corpora::load(&plan.corpora)?;
    let data = prepare(&plan, &corpora)?;
    let load = |p: &Option<PathBuf>| p.as_deref().map(Checkpoint::load).transpose();
    let sources = EncoderSources {
        humor: load(&a.sources.humor_checkpoint)?,
        sarcasm: load(&a.sources.sarcasm_checkpoint)?,
        base: plan
            .base_checkpoint
            .as_deref()
            .map(Checkpoint::load)
            .transpose()?,
    };
    let out = run_joint_finetune(&plan.stages.joint, &spec, a.seed, &data, &sources)?;
    write_json(
        &a.result,
        &CellResult {
            spec,
            seed: a.seed,
            train_f1: out.train_f1,
            dev_f1: out.dev_f1,
            test_f1: out.test_f1,
        },
    )?;
    Ok(())
}
