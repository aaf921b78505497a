use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use serde::Serialize;

use parody_core::data::{TokenSequence, CLS, PAD, RESERVED};
use parody_core::encoder::{init_params, Checkpoint, EncoderConfig};
use parody_core::fusion::{EncoderSubset, FusionSpec, FusionStrategy};
use parody_core::io::write_json;
use parody_core::pipeline::{EncoderSources, MultiEncoderModel};
use parody_core::rng::{stream, StreamRng};
use parody_core::tensorcore::{gradient_check, ParamSet, Tape};
use parody_core::Error;

use crate::args::out_dir;

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Only this strategy [default: all three]
    #[arg(long)]
    pub fusion: Option<FusionStrategy>,
    /// Only this subset [default: all four]
    #[arg(long)]
    pub subset: Option<EncoderSubset>,
    /// Coordinates sampled per cell.
    #[arg(long, default_value_t = 24)]
    pub samples: usize,
    /// Central-difference step, within [1e-6, 1e-4].
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 8)]
    pub d_model: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory [default: $PARODY_OUT, then ./out]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct CellCheck {
    strategy: &'static str,
    subset: String,
    max_rel_error: f64,
    coords_checked: usize,
    worst: Option<(String, usize)>,
}

/// Three sequences of different real lengths over a small vocabulary.
fn batch(max_len: usize, vocab: usize) -> Vec<TokenSequence> {
    [3, 5, max_len]
        .iter()
        .enumerate()
        .map(|(b, &real)| {
            let mut ids = vec![CLS];
            ids.extend(
                (1..real).map(|j| RESERVED.len() + (7 * b + 3 * j) % (vocab - RESERVED.len())),
            );
            ids.resize(max_len, PAD);
            TokenSequence {
                mask: (0..max_len).map(|i| i < real).collect(),
                ids,
            }
        })
        .collect()
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let config = EncoderConfig {
        d_model: a.d_model,
        layers: 1,
        heads: 2,
        ffn_mult: 2,
        vocab_size: 20,
        max_len: 8,
        dropout: 0.0,
    };
    config.validate()?;
    let fresh = |name: &str| -> Result<Checkpoint> {
        Ok(Checkpoint::new(
            config,
            init_params(&config, &mut stream(a.seed, name))?,
        )?)
    };
    let sources = EncoderSources {
        humor: Some(fresh("gradcheck/humor")?),
        sarcasm: Some(fresh("gradcheck/sarcasm")?),
        base: None,
    };
    let seqs = batch(config.max_len, config.vocab_size);
    let labels = [1.0, 0.0, 1.0];

    let mut checks = Vec::new();
    for strategy in FusionStrategy::ALL
        .into_iter()
        .filter(|s| a.fusion.is_none_or(|f| f == *s))
    {
        for subset in EncoderSubset::TABLE_ORDER
            .into_iter()
            .filter(|s| a.subset.is_none_or(|x| x == *s))
        {
            let spec = FusionSpec {
                heads: 2,
                ..FusionSpec::new(strategy, subset)
            };
            let model = MultiEncoderModel::build(&config, &spec, a.seed, &sources)?;
            let loss_at = |p: &ParamSet| -> parody_core::Result<f64> {
                let mut tape = Tape::new();
                let l = model.loss::<StreamRng>(&mut tape, p, &seqs, &labels, None)?;
                Ok(tape.value(l).item())
            };
            let mut tape = Tape::new();
            let l = model.loss::<StreamRng>(&mut tape, &model.params, &seqs, &labels, None)?;
            let grads = tape.backward(l)?.params();
            let r = gradient_check(
                loss_at,
                &model.params,
                &grads,
                a.step,
                a.samples,
                &mut stream(a.seed, "gradcheck/coords"),
            )?;
            println!(
                "{:<14} {:<6} max relative error {:.3e} over {} coordinates",
                strategy.as_str(),
                subset.to_string(),
                r.max_rel_error,
                r.coords_checked
            );
            checks.push(CellCheck {
                strategy: strategy.as_str(),
                subset: subset.to_string(),
                max_rel_error: r.max_rel_error,
                coords_checked: r.coords_checked,
                worst: r.worst,
            });
        }
    }
    let dir = out_dir(a.out.as_deref(), None);
    write_json(&dir.join("gradcheck.json"), &checks)?;
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    if worst > a.tol {
        return Err(
            Error::GradCheck(format!("relative error {worst:.3e} exceeds {:.1e}", a.tol)).into(),
        );
    }
    println!("all {} cells within {:.1e}", checks.len(), a.tol);
    Ok(())
}
