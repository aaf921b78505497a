//! Plan resolution shared by the training commands.

use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use clap::Args;

use parody_core::data::{SplitMode, SplitSpec};
use parody_core::encoder::Checkpoint;
use parody_core::pipeline::{prepare, Corpora, ExperimentPlan, FusionGrid, PreparedData, Profile};

use crate::Usage;

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "PARODY_OUT";

/// `--out`, then the plan's own directory, then `$PARODY_OUT`, then `out`.
pub fn out_dir(flag: Option<&Path>, plan_dir: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = plan_dir.filter(|p| !p.as_os_str().is_empty()) {
        return p.to_path_buf();
    }
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("out"), PathBuf::from)
}

pub const CORPUS_FILES: [&str; 5] = [
    "parody.jsonl",
    "humor.jsonl",
    "sarcasm.jsonl",
    "humor_pretrain.jsonl",
    "sarcasm_pretrain.jsonl",
];

#[derive(Args, Debug, Clone)]
pub struct PlanArgs {
    /// Experiment plan (JSON). Other flags override its fields.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Hyperparameter profile for plans built from flags.
    #[arg(long, conflicts_with = "plan")]
    pub profile: Option<Profile>,
    /// Seed for the split, every stage and the run.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run seeds, comma separated (stage and split seeds are unchanged).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Directory holding parody.jsonl and optionally humor.jsonl, sarcasm.jsonl,
    /// humor_pretrain.jsonl and sarcasm_pretrain.jsonl.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Split protocol: person, gender, location or random.
    #[arg(long)]
    pub split_mode: Option<SplitMode>,
    /// M->F / F->M for gender splits, the held-out region for location splits.
    #[arg(long)]
    pub direction: Option<String>,
    /// Epochs of joint fine-tuning (and multi-task training).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// MLM-pretrained encoder used to warm-start every encoder.
    #[arg(long)]
    pub base_checkpoint: Option<PathBuf>,
    /// Output directory [default: plan's output_dir, then $PARODY_OUT, then ./out]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl PlanArgs {
    /// Builds the plan from `--plan` or the profile, then applies the flags.
    /// The result is not validated yet.
    pub fn resolve_unchecked(&self, default_grid: FusionGrid) -> Result<ExperimentPlan> {
        let mut plan = match &self.plan {
            Some(path) => parody_core::io::read_json::<ExperimentPlan>(path)
                .with_context(|| format!("reading plan {}", path.display()))?,
            None => {
                let mode = self.split_mode.unwrap_or(SplitMode::Person);
                let split = SplitSpec::new(mode, self.direction.as_deref());
                let mut plan = ExperimentPlan::for_profile(
                    self.profile.unwrap_or(Profile::Toy),
                    default_grid,
                    split,
                    self.seed.unwrap_or(0),
                );
                plan.output_dir = PathBuf::new();
                plan
            }
        };
        if self.plan.is_some() {
            if let Some(seed) = self.seed {
                set_seed(&mut plan, seed);
            }
            if let Some(mode) = self.split_mode {
                plan.split.mode = mode;
                plan.split.direction = None;
            }
            if let Some(d) = &self.direction {
                plan.split.direction = Some(d.clone());
            }
        }
        if let Some(seeds) = &self.seeds {
            plan.seeds = seeds.clone();
        }
        if let Some(dir) = &self.data {
            let paths = &mut plan.corpora;
            let slots = [
                &mut paths.parody,
                &mut paths.humor,
                &mut paths.sarcasm,
                &mut paths.humor_pretrain,
                &mut paths.sarcasm_pretrain,
            ];
            for (slot, name) in slots.into_iter().zip(CORPUS_FILES) {
                let p = dir.join(name);
                *slot = p.exists().then_some(p);
            }
            if paths.parody.is_none() {
                return Err(Usage(format!("{} has no parody.jsonl", dir.display())).into());
            }
        }
        if let Some(e) = self.epochs {
            plan.stages.joint.epochs = e;
            plan.stages.mtl.epochs = e;
        }
        if let Some(b) = &self.base_checkpoint {
            plan.base_checkpoint = Some(b.clone());
        }
        let plan_dir = self.plan.as_ref().map(|_| plan.output_dir.clone());
        plan.output_dir = out_dir(self.out.as_deref(), plan_dir.as_deref());
        Ok(plan)
    }

    pub fn resolve(&self, default_grid: FusionGrid) -> Result<ExperimentPlan> {
        let plan = self.resolve_unchecked(default_grid)?;
        plan.validate()?;
        Ok(plan)
    }
}

pub fn set_seed(plan: &mut ExperimentPlan, seed: u64) {
    plan.split_seed = seed;
    plan.seeds = vec![seed];
    let s = &mut plan.stages;
    for c in [
        &mut s.humor.adapt,
        &mut s.humor.aux,
        &mut s.sarcasm.adapt,
        &mut s.sarcasm.aux,
        &mut s.joint,
        &mut s.mtl,
    ] {
        c.seed = seed;
    }
}

/// Corpora, vocabulary, splits and the optional base checkpoint of a plan.
pub struct Context {
    pub corpora: Corpora,
    pub data: PreparedData,
    pub base: Option<Checkpoint>,
}

impl Context {
    pub fn load(plan: &ExperimentPlan) -> Result<Self> {
        if plan.corpora.parody.is_none() {
            return Err(Usage(
                "no parody corpus: pass --data DIR or set corpora.parody in the plan".into(),
            )
            .into());
        }
        let corpora = Corpora::load(&plan.corpora)?;
        let data = prepare(plan, &corpora)?;
        let base = plan
            .base_checkpoint
            .as_deref()
            .map(Checkpoint::load)
            .transpose()?;
        Ok(Self {
            corpora,
            data,
            base,
        })
    }
}

/// Writes the fully resolved plan next to the outputs as `run_plan.json`.
/// Refuses to replace `input` with different content.
pub fn save_plan(plan: &ExperimentPlan, input: Option<&Path>) -> Result<PathBuf> {
    let path = plan.output_dir.join("run_plan.json");
    let same_file = |a: &Path| match (a.canonicalize(), path.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    };
    if let Some(input) = input.filter(|p| same_file(p)) {
        let old: ExperimentPlan = parody_core::io::read_json(input)?;
        if old != *plan {
            return Err(Usage(format!(
                "refusing to overwrite the input plan {}",
                input.display()
            ))
            .into());
        }
        return Ok(path);
    }
    parody_core::io::write_json(&path, plan)?;
    Ok(path)
}

/// Four decimals, or `n/a` for an empty split.
pub fn fmt_f1(f: f64) -> String {
    if f.is_nan() {
        "n/a".into()
    } else {
        format!("{f:.4}")
    }
}
