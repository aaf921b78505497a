//! Multi-head scaled dot-product self-attention on the tape, shared by the
//! encoder layers and the self-attention fusion.

use crate::error::{Error, Result};
use crate::tensorcore::{Tape, Var};

/// Projection weights of one attention block; biases are optional.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub biases: Option<[Var; 4]>,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `[batch * tokens, d]`
    pub out: Var,
    /// Row-stochastic weights, `[batch * heads, tokens, tokens]`.
    pub probs: Var,
}

fn split_heads_index(batch: usize, tokens: usize, heads: usize, d: usize) -> Vec<usize> {
    let dh = d / heads;
    let mut index = Vec::with_capacity(batch * tokens * d);
    for b in 0..batch {
        for h in 0..heads {
            for t in 0..tokens {
                for j in 0..dh {
                    index.push((b * tokens + t) * d + h * dh + j);
                }
            }
        }
    }
    index
}

fn merge_heads_index(batch: usize, tokens: usize, heads: usize, d: usize) -> Vec<usize> {
    let dh = d / heads;
    let mut index = Vec::with_capacity(batch * tokens * d);
    for b in 0..batch {
        for t in 0..tokens {
            for h in 0..heads {
                for j in 0..dh {
                    index.push(((b * heads + h) * tokens + t) * dh + j);
                }
            }
        }
    }
    index
}

/// Self-attention over `x = [batch * tokens, d]`. `key_keep[b * tokens + t]`
/// marks keys that may be attended to; masked keys get exactly zero weight.
pub fn self_attention(
    tape: &mut Tape,
    x: Var,
    batch: usize,
    tokens: usize,
    heads: usize,
    w: &AttentionWeights,
    key_keep: Option<&[bool]>,
) -> Result<AttentionOutput> {
    let d = tape.value(x).last_dim();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::shape(
            "self_attention",
            format!("{heads} heads do not divide d={d}"),
        ));
    }
    if tape.value(x).len() != batch * tokens * d {
        return Err(Error::shape(
            "self_attention",
            format!("input {:?} is not [{batch}*{tokens}, {d}]", tape.shape(x)),
        ));
    }
    let dh = d / heads;
    let project = |tape: &mut Tape, wt: Var, bias: Option<Var>| -> Result<Var> {
        let y = tape.matmul(x, wt)?;
        match bias {
            Some(b) => tape.add_bias(y, b),
            None => Ok(y),
        }
    };
    let bias = |i: usize| w.biases.map(|b| b[i]);
    let q = project(tape, w.wq, bias(0))?;
    let k = project(tape, w.wk, bias(1))?;
    let v = project(tape, w.wv, bias(2))?;

    let split = split_heads_index(batch, tokens, heads, d);
    let shape = vec![batch * heads, tokens, dh];
    let q = tape.gather(q, split.clone(), shape.clone())?;
    let k = tape.gather(k, split.clone(), shape.clone())?;
    let v = tape.gather(v, split, shape)?;

    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let probs = match key_keep {
        Some(keep) => {
            if keep.len() != batch * tokens {
                return Err(Error::shape("self_attention", "key mask length"));
            }
            let mut expanded = Vec::with_capacity(batch * heads * tokens * tokens);
            for b in 0..batch {
                for _h in 0..heads {
                    for _q in 0..tokens {
                        expanded.extend_from_slice(&keep[b * tokens..(b + 1) * tokens]);
                    }
                }
            }
            tape.masked_softmax(scores, &expanded)?
        }
        None => tape.softmax(scores, 2)?,
    };
    let ctx = tape.batch_matmul(probs, v, false)?;
    let merged = tape.gather(
        ctx,
        merge_heads_index(batch, tokens, heads, d),
        vec![batch * tokens, d],
    )?;
    let out = tape.matmul(merged, w.wo)?;
    let out = match bias(3) {
        Some(b) => tape.add_bias(out, b)?,
        None => out,
    };
    Ok(AttentionOutput { out, probs })
}
