use rand::Rng;

use super::vocab::{TokenSequence, MASK, RESERVED};
use crate::error::{Error, Result};

pub const DEFAULT_MASK_RATE: f64 = 0.15;

/// A sequence prepared for masked-language-model training.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlmExample {
    pub input: TokenSequence,
    /// Positions whose original token must be predicted.
    pub positions: Vec<usize>,
    /// Original ids at `positions`.
    pub targets: Vec<usize>,
}

/// Selects each content position with probability `rate` (at least one is
/// always selected). A selected token becomes MASK with probability 0.8, a
/// random non-reserved token with 0.1, and stays unchanged otherwise.
pub fn mask_for_mlm<R: Rng + ?Sized>(
    seq: &TokenSequence,
    rate: f64,
    vocab_size: usize,
    rng: &mut R,
) -> Result<MlmExample> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::Config(format!(
            "mask rate {rate} must lie in (0, 1)"
        )));
    }
    let content: Vec<usize> = seq.content_positions().collect();
    if content.is_empty() {
        return Err(Error::Data(
            "cannot mask a sequence without content tokens".into(),
        ));
    }
    let mut positions: Vec<usize> = content
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < rate)
        .collect();
    if positions.is_empty() {
        positions.push(content[rng.random_range(0..content.len())]);
    }

    let mut input = seq.clone();
    let mut targets = Vec::with_capacity(positions.len());
    for &p in &positions {
        targets.push(seq.ids[p]);
        let r: f64 = rng.random();
        if r < 0.8 {
            input.ids[p] = MASK;
        } else if r < 0.9 {
            input.ids[p] = if vocab_size > RESERVED.len() {
                rng.random_range(RESERVED.len()..vocab_size)
            } else {
                MASK
            };
        }
    }
    Ok(MlmExample {
        input,
        positions,
        targets,
    })
}
