//! Binary F1, multi-seed aggregation and result tables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_labels(predictions: &[u8], gold: &[u8], positive: u8) -> Result<Self> {
        if predictions.len() != gold.len() {
            return Err(Error::shape(
                "f1_score",
                format!(
                    "{} predictions vs {} gold labels",
                    predictions.len(),
                    gold.len()
                ),
            ));
        }
        if gold.is_empty() {
            return Err(Error::Data("F1 of an empty label list is undefined".into()));
        }
        let mut c = Confusion::default();
        for (&p, &g) in predictions.iter().zip(gold) {
            match (p == positive, g == positive) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / (self.tp + self.tn + self.fp + self.fn_) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    /// Set when precision + recall = 0 and F1 is reported as 0 by convention.
    pub degenerate: bool,
    pub confusion: Confusion,
}

/// Positive-class F1 = 2PR / (P + R); 0 (flagged degenerate) when P + R = 0.
pub fn f1_score(predictions: &[u8], gold: &[u8], positive: u8) -> Result<F1Score> {
    let c = Confusion::from_labels(predictions, gold, positive)?;
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let degenerate = precision + recall == 0.0;
    let f1 = if degenerate {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(F1Score {
        f1,
        precision,
        recall,
        degenerate,
        confusion: c,
    })
}

/// Unweighted mean of the F1 of both classes.
pub fn macro_f1(predictions: &[u8], gold: &[u8]) -> Result<f64> {
    Ok((f1_score(predictions, gold, 1)?.f1 + f1_score(predictions, gold, 0)?.f1) / 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub mean: f64,
    /// Population standard deviation (divides by n).
    pub std: f64,
}

impl SeedSummary {
    /// `"mean ± std"` with two decimals, values taken as already in points.
    pub fn format(&self) -> String {
        format_pm(self.mean, self.std)
    }
}

pub fn aggregate_seeds(values: &[f64]) -> Result<SeedSummary> {
    if values.is_empty() {
        return Err(Error::Data("cannot aggregate an empty list of runs".into()));
    }
    let n = values.len() as f64;
    // Offsets from the first value keep a constant list exact.
    let base = values[0];
    let mean = base + values.iter().map(|v| v - base).sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(SeedSummary {
        mean,
        std: var.sqrt(),
    })
}

pub fn format_pm(mean: f64, std: f64) -> String {
    format!("{mean:.2} ± {std:.2}")
}

pub const STD_CONVENTION: &str = "population";

/// Aggregated F1 of one table row (a strategy/subset cell over several seeds).
/// `f1s`, `mean` and `std` are fractions in [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub plan: String,
    pub split: String,
    pub strategy: String,
    pub subset: String,
    pub seeds: Vec<u64>,
    pub f1s: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    #[serde(default = "default_convention")]
    pub std_convention: String,
}

fn default_convention() -> String {
    STD_CONVENTION.to_string()
}

impl RunReport {
    pub fn new(
        plan: impl Into<String>,
        split: impl Into<String>,
        strategy: impl Into<String>,
        subset: impl Into<String>,
        seeds: Vec<u64>,
        f1s: Vec<f64>,
    ) -> Result<Self> {
        if seeds.len() != f1s.len() {
            return Err(Error::Data(format!(
                "{} seeds but {} F1 values",
                seeds.len(),
                f1s.len()
            )));
        }
        let s = aggregate_seeds(&f1s)?;
        Ok(Self {
            plan: plan.into(),
            split: split.into(),
            strategy: strategy.into(),
            subset: subset.into(),
            seeds,
            f1s,
            mean: s.mean,
            std: s.std,
            std_convention: default_convention(),
        })
    }

    /// Largest deviation between the stored mean/std and a recomputation from `f1s`.
    pub fn recompute_error(&self) -> Result<f64> {
        let s = aggregate_seeds(&self.f1s)?;
        Ok((s.mean - self.mean).abs().max((s.std - self.std).abs()))
    }

    /// Mean ± std in percentage points.
    pub fn formatted(&self) -> String {
        format_pm(100.0 * self.mean, 100.0 * self.std)
    }

    pub fn row_label(&self) -> String {
        let name = match self.strategy.as_str() {
            "concat" => "Concatenation",
            "self_attention" => "Self-Attention",
            "max_pool" => "Max-Pooling",
            "mtl" => "Multi-Task",
            other => other,
        };
        format!("{name} ({})", self.subset)
    }
}

/// Aligned two-column plain-text table.
pub fn render_table(title: &str, rows: &[RunReport]) -> String {
    let labels: Vec<String> = rows.iter().map(RunReport::row_label).collect();
    let width = labels
        .iter()
        .map(|l| l.chars().count())
        .chain([5])
        .max()
        .unwrap_or(5);
    let mut out = String::new();
    out.push_str(&format!("{title}\n"));
    out.push_str(&format!("{:<width$}  F1\n", "Model"));
    out.push_str(&format!("{}\n", "-".repeat(width + 16)));
    for (l, r) in labels.iter().zip(rows) {
        out.push_str(&format!("{l:<width$}  {}\n", r.formatted()));
    }
    out
}

pub fn render_csv(rows: &[RunReport]) -> String {
    let mut out = String::from("model,strategy,subset,split,mean,std,f1s\n");
    for r in rows {
        let f1s: Vec<String> = r.f1s.iter().map(|v| format!("{:.6}", 100.0 * v)).collect();
        out.push_str(&format!(
            "\"{}\",{},{},{},{:.2},{:.2},{}\n",
            r.row_label(),
            r.strategy,
            r.subset,
            r.split,
            100.0 * r.mean,
            100.0 * r.std,
            f1s.join(";")
        ));
    }
    out
}
