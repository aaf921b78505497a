#![allow(dead_code)]

use parody_core::data::synth::{generate, MarkerScheme, SynthSpec};
use parody_core::data::{SplitMode, SplitSpec, TokenSequence, CLS, PAD};
use parody_core::encoder::{init_params, Checkpoint, EncoderConfig};
use parody_core::fusion::FusionSpec;
use parody_core::pipeline::{
    prepare, Corpora, EncoderShape, EncoderSources, ExperimentPlan, FusionGrid, PreparedData,
    Profile,
};
use parody_core::rng::stream;

pub fn small_config(d: usize, max_len: usize, vocab: usize) -> EncoderConfig {
    EncoderConfig {
        d_model: d,
        layers: 1,
        heads: 2,
        ffn_mult: 2,
        vocab_size: vocab,
        max_len,
        dropout: 0.0,
    }
}

/// Random well-formed sequence of `len` positions with `real` real tokens.
pub fn random_seq(
    rng: &mut impl rand::Rng,
    len: usize,
    real: usize,
    vocab: usize,
) -> TokenSequence {
    let mut ids = vec![CLS];
    ids.extend((1..real).map(|_| rng.random_range(4..vocab)));
    ids.resize(len, PAD);
    TokenSequence {
        mask: (0..len).map(|i| i < real).collect(),
        ids,
    }
}

pub fn fresh_sources(config: &EncoderConfig, seed: u64) -> EncoderSources {
    let ck = |name: &str| {
        Checkpoint::new(
            *config,
            init_params(config, &mut stream(seed, name)).unwrap(),
        )
        .unwrap()
    };
    EncoderSources {
        humor: Some(ck("test/humor")),
        sarcasm: Some(ck("test/sarcasm")),
        base: None,
    }
}

pub fn synth(scheme: MarkerScheme, parody: usize, seed: u64) -> Corpora {
    Corpora::from_synth(
        generate(&SynthSpec {
            scheme,
            parody,
            seed,
            ..SynthSpec::default()
        })
        .unwrap(),
    )
}

/// Toy plan over synthetic corpora with a custom encoder shape.
pub fn plan(grid: FusionGrid, shape: Option<EncoderShape>, seeds: Vec<u64>) -> ExperimentPlan {
    let mut p = ExperimentPlan::for_profile(
        Profile::Toy,
        grid,
        SplitSpec::new(SplitMode::Person, None),
        0,
    );
    if let Some(s) = shape {
        p.encoder = s;
    }
    p.seeds = seeds;
    p
}

pub fn prepared(plan: &ExperimentPlan, corpora: &Corpora) -> PreparedData {
    prepare(plan, corpora).unwrap()
}

pub fn tiny_shape(d: usize) -> EncoderShape {
    EncoderShape {
        d_model: d,
        layers: 1,
        heads: 2,
        ffn_mult: 2,
        max_len: 16,
        dropout: 0.1,
    }
}

pub fn single(spec: FusionSpec) -> FusionGrid {
    FusionGrid::single(spec)
}
