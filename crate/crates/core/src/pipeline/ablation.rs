use serde::{Deserialize, Serialize};

use super::config::ExperimentPlan;
use super::joint::run_joint_finetune;
use super::model::EncoderSources;
use super::PreparedData;
use crate::error::{Error, Result};
use crate::eval::RunReport;
use crate::fusion::FusionSpec;

/// Test F1 of one (strategy, subset, seed) training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub spec: FusionSpec,
    pub seed: u64,
    pub train_f1: f64,
    pub dev_f1: f64,
    pub test_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub plan: String,
    pub split: String,
    pub rows: Vec<RunReport>,
    pub cells: Vec<CellResult>,
}

/// Trains every grid cell for every seed, sequentially, in table order.
pub fn run_ablation(
    plan: &ExperimentPlan,
    data: &PreparedData,
    sources: &EncoderSources,
) -> Result<AblationReport> {
    plan.validate()?;
    let mut cells = Vec::new();
    for spec in plan.fusion.cells() {
        for &seed in &plan.seeds {
            let out = run_joint_finetune(&plan.stages.joint, &spec, seed, data, sources)?;
            cells.push(CellResult {
                spec,
                seed,
                train_f1: out.train_f1,
                dev_f1: out.dev_f1,
                test_f1: out.test_f1,
            });
        }
    }
    let rows = assemble_reports(plan, &cells)?;
    Ok(AblationReport {
        plan: plan.fingerprint(),
        split: plan.split_label(),
        rows,
        cells,
    })
}

/// Groups per-seed results into one row per cell, in table order, whatever
/// order the results arrived in.
pub fn assemble_reports(plan: &ExperimentPlan, results: &[CellResult]) -> Result<Vec<RunReport>> {
    let mut rows = Vec::new();
    for spec in plan.fusion.cells() {
        let mut f1s = Vec::with_capacity(plan.seeds.len());
        for &seed in &plan.seeds {
            let r = results
                .iter()
                .find(|r| r.spec == spec && r.seed == seed)
                .ok_or_else(|| {
                    Error::Data(format!(
                        "no result for {} {} seed {seed}",
                        spec.strategy.as_str(),
                        spec.subset
                    ))
                })?;
            f1s.push(r.test_f1);
        }
        rows.push(RunReport::new(
            plan.fingerprint(),
            plan.split_label(),
            spec.strategy.as_str(),
            spec.subset.to_string(),
            plan.seeds.clone(),
            f1s,
        )?);
    }
    Ok(rows)
}
