use anyhow::Result;
use clap::Args;
use serde::Serialize;

use parody_core::eval::RunReport;
use parody_core::fusion::EncoderSubset;
use parody_core::io::{write_atomic, write_json};
use parody_core::pipeline::{
    metrics_csv, mtl_weight_grid, run_mtl, run_mtl_search, FusionGrid, MtlOutcome, MtlStep,
    MtlWeights,
};

use super::train::SeedRun;
use crate::args::{fmt_f1, save_plan, Context, PlanArgs};
use crate::Usage;

#[derive(Args, Debug)]
pub struct MtlArgs {
    #[command(flatten)]
    pub plan: PlanArgs,
    /// Loss weights `parody,sarcasm,humor` [default: the plan's mtl weights]
    #[arg(long, conflicts_with = "search")]
    pub weights: Option<String>,
    /// Pick the auxiliary weights from {0.25, 0.5, 1} by dev F1 of the first seed.
    #[arg(long)]
    pub search: bool,
}

fn parse_weights(s: &str) -> Result<MtlWeights> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| {
            Usage(format!(
                "--weights `{s}` is not three comma-separated numbers"
            ))
        })?;
    let [p, sa, h] = v[..] else {
        return Err(Usage(format!("--weights `{s}` needs exactly three values")).into());
    };
    let w = MtlWeights::new(p, sa, h);
    w.validate()?;
    Ok(w)
}

#[derive(Serialize)]
struct MtlReport {
    weights: MtlWeights,
    search: Vec<(MtlWeights, f64)>,
    report: RunReport,
    runs: Vec<SeedRun>,
    warnings: Vec<String>,
}

fn steps_csv(steps: &[MtlStep]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.10}"));
    let mut out = String::from("step,total,parody,sarcasm,humor\n");
    for s in steps {
        out.push_str(&format!(
            "{},{:.10},{:.10},{},{}\n",
            s.step,
            s.total,
            s.parody,
            opt(s.sarcasm),
            opt(s.humor)
        ));
    }
    out
}

pub fn mtl(a: MtlArgs) -> Result<()> {
    let plan = a.plan.resolve(FusionGrid::full())?;
    let mut cfg = plan.stages.mtl.clone();
    if let Some(w) = &a.weights {
        cfg.mtl_weights = Some(parse_weights(w)?);
    }
    cfg.validate()?;
    let ctx = Context::load(&plan)?;
    save_plan(&plan, a.plan.plan.as_deref())?;
    let (sarcasm, humor) = (&ctx.corpora.sarcasm, &ctx.corpora.humor);
    let base = ctx.base.as_ref();

    let mut search = Vec::new();
    let mut outcomes: Vec<(u64, MtlOutcome)> = Vec::new();
    if a.search {
        let first = plan.seeds[0];
        let s = run_mtl_search(
            &cfg,
            first,
            &ctx.data,
            sarcasm,
            humor,
            base,
            &mtl_weight_grid(),
        )?;
        cfg.mtl_weights = Some(s.best);
        search = s.candidates;
        outcomes.push((first, s.outcome));
    }
    for &seed in &plan.seeds[outcomes.len()..] {
        outcomes.push((seed, run_mtl(&cfg, seed, &ctx.data, sarcasm, humor, base)?));
    }
    let weights = cfg.mtl_weights.expect("validated");

    let dir = &plan.output_dir;
    let mut runs = Vec::new();
    let mut warnings = Vec::new();
    for (seed, out) in &outcomes {
        let run_dir = dir.join(format!("seed-{seed}"));
        write_atomic(
            &run_dir.join("metrics.csv"),
            metrics_csv(&out.logs).as_bytes(),
        )?;
        write_atomic(&run_dir.join("steps.csv"), steps_csv(&out.steps).as_bytes())?;
        for w in &out.warnings {
            if !warnings.contains(w) {
                eprintln!("warning: {w}");
                warnings.push(w.clone());
            }
        }
        println!(
            "mtl seed {seed}: train F1 {}, dev F1 {}, test F1 {}",
            fmt_f1(out.train_f1),
            fmt_f1(out.dev_f1),
            fmt_f1(out.test_f1)
        );
        runs.push(SeedRun {
            seed: *seed,
            train_f1: out.train_f1,
            dev_f1: out.dev_f1,
            test_f1: out.test_f1,
        });
    }
    let subset = EncoderSubset {
        humor: weights.humor > 0.0,
        sarcasm: weights.sarcasm > 0.0,
    };
    let report = RunReport::new(
        plan.fingerprint(),
        plan.split_label(),
        "mtl",
        subset.to_string(),
        plan.seeds.clone(),
        runs.iter().map(|r| r.test_f1).collect(),
    )?;
    println!(
        "weights (parody, sarcasm, humor) = ({}, {}, {}); test F1 {}",
        weights.parody,
        weights.sarcasm,
        weights.humor,
        report.formatted()
    );
    write_json(
        &dir.join("mtl.json"),
        &MtlReport {
            weights,
            search,
            report,
            runs,
            warnings,
        },
    )?;
    println!("outputs: {}", dir.display());
    Ok(())
}
