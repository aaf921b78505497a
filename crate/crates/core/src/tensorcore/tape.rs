//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and enough
//! information to push gradients back to its inputs. Nodes are only ever
//! appended, so the node order is already a topological order and the
//! backward pass is a single reverse sweep.

use std::collections::HashMap;

use super::tensor::{ParamSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        transpose_b: bool,
    },
    Add(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        axis: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Concat {
        inputs: Vec<(Var, usize)>,
    },
    MaxOf {
        inputs: Vec<Var>,
        source: Vec<usize>,
    },
    Sum(Var),
    BceWithLogits {
        logits: Var,
        labels: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, Var)>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradients of every parameter registered through [`Tape::param`].
    /// Parameters that did not influence the output get a zero gradient.
    pub fn params(&self) -> ParamSet {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = self
                    .wrt(*v)
                    .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]));
                (name.clone(), g)
            })
            .collect()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                row[j] += av * brow[j];
            }
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
fn matmul_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Numerically stable binary cross-entropy on a logit.
pub fn bce_with_logits(logit: f64, label: f64) -> f64 {
    logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(
        &mut self,
        value: Tensor,
        op: Op,
        requires_grad: bool,
        name: &'static str,
    ) -> Result<Var> {
        check_finite(name, &value)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf not tied to a parameter name.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "leaf")
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// Binds the named parameter from `params`; repeated calls return the same node.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = params.require(name)?.clone();
        let v = self.push(value, Op::Leaf, true, "param")?;
        self.params.insert(name.to_string(), v);
        self.param_order.push((name.to_string(), v));
        Ok(v)
    }

    /// `a[..., k] · b[k, n]`; leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if bsh.len() != 2 || *ash.last().unwrap() != bsh[0] {
            return Err(Error::shape("matmul", format!("{ash:?} x {bsh:?}")));
        }
        let (k, n) = (bsh[0], bsh[1]);
        let m = self.value(a).len() / k;
        let mut out = vec![0.0; m * n];
        naive_matmul(
            self.value(a).values(),
            self.value(b).values(),
            m,
            k,
            n,
            &mut out,
        );
        let mut shape = ash.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::new(shape, out)?,
            Op::MatMul { a, b, m, k, n },
            rg,
            "matmul",
        )
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]`, or with `[B, n, k]` transposed.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || {
            Error::shape(
                "batch_matmul",
                format!("{ash:?} x {bsh:?} (transpose_b={transpose_b})"),
            )
        };
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] {
            return Err(bad());
        }
        let (batch, m, k) = (ash[0], ash[1], ash[2]);
        let n = if transpose_b {
            if bsh[2] != k {
                return Err(bad());
            }
            bsh[1]
        } else {
            if bsh[1] != k {
                return Err(bad());
            }
            bsh[2]
        };
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (self.value(a).values(), self.value(b).values());
        for t in 0..batch {
            let asl = &av[t * m * k..(t + 1) * m * k];
            let bsl = &bv[t * k * n..(t + 1) * k * n];
            let osl = &mut out[t * m * n..(t + 1) * m * n];
            if transpose_b {
                matmul_bt(asl, bsl, m, k, n, osl);
            } else {
                naive_matmul(asl, bsl, m, k, n, osl);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                transpose_b,
            },
            rg,
            "batch_matmul",
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg, "add")
    }

    /// Adds a `[n]` bias to every trailing-axis slice of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let bv = self.value(bias).values().to_vec();
        let out: Vec<f64> = self
            .value(x)
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i % n])
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x) || self.rg(bias);
        self.push(t, Op::AddBias { x, bias }, rg, "add_bias")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} * {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(x).values().iter().map(|v| v * s).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, s), rg, "scale")
    }

    /// Elementwise product with a fixed (non-differentiable) factor, e.g. a dropout mask.
    pub fn mul_const(&mut self, x: Var, factor: Vec<f64>) -> Result<Var> {
        if factor.len() != self.value(x).len() {
            return Err(Error::shape(
                "mul_const",
                format!("{:?} vs {}", self.shape(x), factor.len()),
            ));
        }
        let out: Vec<f64> = self
            .value(x)
            .values()
            .iter()
            .zip(&factor)
            .map(|(v, f)| v * f)
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x);
        self.push(t, Op::MulConst(x, factor), rg, "mul_const")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(x).values().iter().map(|&v| gelu(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg, "gelu")
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, None)
    }

    /// Softmax along the last axis where entries with `keep[i] == false` are treated
    /// as −∞ logits (their probability is exactly zero). Each slice must keep at
    /// least one entry.
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        if keep.len() != self.value(x).len() {
            return Err(Error::shape(
                "masked_softmax",
                format!("mask {} vs {:?}", keep.len(), self.shape(x)),
            ));
        }
        let axis = self.shape(x).len() - 1;
        self.softmax_impl(x, axis, Some(keep))
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, keep: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} for {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x).values();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let live = |j: usize| keep.is_none_or(|k| k[idx(j)]);
                let max = (0..n)
                    .filter(|&j| live(j))
                    .map(|j| xv[idx(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(Error::shape("softmax", "slice with every entry masked"));
                }
                let mut total = 0.0;
                for j in 0..n {
                    if live(j) {
                        let e = (xv[idx(j)] - max).exp();
                        out[idx(j)] = e;
                        total += e;
                    }
                }
                for j in 0..n {
                    out[idx(j)] /= total;
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(shape, out)?,
            Op::Softmax {
                x,
                outer,
                axis: n,
                inner,
            },
            rg,
            "softmax",
        )
    }

    /// Layer normalisation over the trailing axis with affine `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if d < 2 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "{:?} with gain {:?} bias {:?}",
                    self.shape(x),
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let xv = self.value(x).values();
        let (g, b) = (self.value(gain).values(), self.value(bias).values());
        let rows = xv.len() / d;
        let mut normed = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let s = &xv[r * d..(r + 1) * d];
            let mean = s.iter().sum::<f64>() / d as f64;
            let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let nh = (s[j] - mean) * is;
                normed[r * d + j] = nh;
                out[r * d + j] = nh * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            rg,
            "layer_norm",
        )
    }

    /// `out.flat[i] = x.flat[index[i]]`; indices may repeat (gradients accumulate).
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let n = self.value(x).len();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of range {n}"),
            ));
        }
        let xv = self.value(x).values();
        let out: Vec<f64> = index.iter().map(|&i| xv[i]).collect();
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        self.push(t, Op::Gather { x, index }, rg, "gather")
    }

    /// Selects rows of a matrix-like tensor (leading axes flattened).
    pub fn rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let d = self.value(x).last_dim();
        let nrows = self.value(x).outer_len();
        if let Some(&bad) = rows.iter().find(|&&r| r >= nrows) {
            return Err(Error::shape(
                "rows",
                format!("row {bad} out of range {nrows}"),
            ));
        }
        let index = rows.iter().flat_map(|&r| r * d..(r + 1) * d).collect();
        self.gather(x, index, vec![rows.len(), d])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if shape.iter().product::<usize>() != n {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        self.gather(x, (0..n).collect(), shape.to_vec())
    }

    /// Concatenation along the trailing axis; leading axes must agree.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let sh = self.shape(v);
            if sh[..sh.len() - 1] != lead[..] {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs leading {lead:?}", sh),
                ));
            }
            widths.push(*sh.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).values()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = inputs.iter().any(|&v| self.rg(v));
        let op = Op::Concat {
            inputs: inputs.iter().copied().zip(widths).collect(),
        };
        self.push(Tensor::new(shape, out)?, op, rg, "concat")
    }

    /// Elementwise maximum over equally shaped inputs. The gradient of each
    /// coordinate goes to the first input attaining the maximum.
    pub fn max_of(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("max_of", "no inputs"))?;
        let shape = self.shape(first).to_vec();
        if let Some(&v) = inputs.iter().find(|&&v| self.shape(v) != shape) {
            return Err(Error::shape(
                "max_of",
                format!("{:?} vs {shape:?}", self.shape(v)),
            ));
        }
        let n = self.value(first).len();
        let mut out = self.value(first).values().to_vec();
        let mut source = vec![0usize; n];
        for (s, &v) in inputs.iter().enumerate().skip(1) {
            for (i, &x) in self.value(v).values().iter().enumerate() {
                if x > out[i] {
                    out[i] = x;
                    source[i] = s;
                }
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        let op = Op::MaxOf {
            inputs: inputs.to_vec(),
            source,
        };
        self.push(Tensor::new(shape, out)?, op, rg, "max_of")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).values().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean binary cross-entropy of `logits` (one per example) against 0/1 labels.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let lv = self.value(logits).values();
        if lv.len() != labels.len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} logits vs {} labels", lv.len(), labels.len()),
            ));
        }
        let total: f64 = lv
            .iter()
            .zip(labels)
            .map(|(&x, &y)| bce_with_logits(x, y))
            .sum();
        let loss = total / labels.len() as f64;
        let rg = self.rg(logits);
        let op = Op::BceWithLogits {
            logits,
            labels: labels.to_vec(),
        };
        self.push(Tensor::scalar(loss), op, rg, "bce_with_logits")
    }

    /// Mean categorical cross-entropy of `[n, V]` logits against class ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let v = self.value(logits).last_dim();
        let n = self.value(logits).outer_len();
        if n != targets.len() || targets.iter().any(|&t| t >= v) {
            return Err(Error::shape(
                "cross_entropy",
                format!("{:?} vs {} targets", self.shape(logits), targets.len()),
            ));
        }
        let lv = self.value(logits).values();
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        for r in 0..n {
            let row = &lv[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[targets[r]];
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
        }
        let rg = self.rg(logits);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push(Tensor::scalar(total / n as f64), op, rg, "cross_entropy")
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got {:?}", self.shape(output)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.push_back(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.param_order.clone(),
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn push_back(&self, op: &Op, value: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.values();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                acc(a, &mut |ga| matmul_bt(g, val(b), m, n, k, ga));
                acc(b, &mut |gb| matmul_at(val(a), g, m, k, n, gb));
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                transpose_b,
            } => {
                let (av, bv) = (val(a), val(b));
                acc(a, &mut |ga| {
                    for t in 0..batch {
                        let gs = &g[t * m * n..(t + 1) * m * n];
                        let bs = &bv[t * k * n..(t + 1) * k * n];
                        let out = &mut ga[t * m * k..(t + 1) * m * k];
                        if transpose_b {
                            naive_matmul(gs, bs, m, n, k, out);
                        } else {
                            matmul_bt(gs, bs, m, n, k, out);
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for t in 0..batch {
                        let gs = &g[t * m * n..(t + 1) * m * n];
                        let as_ = &av[t * m * k..(t + 1) * m * k];
                        let out = &mut gb[t * k * n..(t + 1) * k * n];
                        if transpose_b {
                            matmul_at(gs, as_, m, n, k, out);
                        } else {
                            matmul_at(as_, gs, m, k, n, out);
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            &Op::AddBias { x, bias } => {
                acc(x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                acc(bias, &mut |gb| {
                    let n = gb.len();
                    for (i, v) in g.iter().enumerate() {
                        gb[i % n] += v;
                    }
                });
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                acc(a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            &Op::Scale(x, s) => acc(x, &mut |gx| {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += s * b)
            }),
            Op::MulConst(x, factor) => acc(*x, &mut |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * factor[i];
                }
            }),
            &Op::Gelu(x) => {
                let xv = val(x);
                acc(x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * gelu_grad(xv[i]);
                    }
                });
            }
            &Op::Softmax {
                x,
                outer,
                axis,
                inner,
            } => {
                let y = value.values();
                acc(x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * axis + j) * inner + i;
                            let dot: f64 = (0..axis).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..axis {
                                gx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let gv = val(*gain);
                let d = gv.len();
                let rows = normed.len() / d;
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for j in 0..d {
                            let dyg = g[r * d + j] * gv[j];
                            s1 += dyg;
                            s2 += dyg * normed[r * d + j];
                        }
                        for j in 0..d {
                            let dyg = g[r * d + j] * gv[j];
                            gx[r * d + j] += inv_std[r] / d as f64
                                * (d as f64 * dyg - s1 - normed[r * d + j] * s2);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (i, v) in g.iter().enumerate() {
                        gg[i % d] += v * normed[i];
                    }
                });
                acc(*bias, &mut |gb| {
                    for (i, v) in g.iter().enumerate() {
                        gb[i % d] += v;
                    }
                });
            }
            Op::Gather { x, index } => acc(*x, &mut |gx| {
                for (o, &i) in index.iter().enumerate() {
                    gx[i] += g[o];
                }
            }),
            Op::Concat { inputs } => {
                let total: usize = inputs.iter().map(|(_, w)| w).sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for &(v, w) in inputs {
                    acc(v, &mut |gv| {
                        for r in 0..rows {
                            for j in 0..w {
                                gv[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::MaxOf { inputs, source } => {
                for (s, &v) in inputs.iter().enumerate() {
                    acc(v, &mut |gv| {
                        for i in 0..gv.len() {
                            if source[i] == s {
                                gv[i] += g[i];
                            }
                        }
                    });
                }
            }
            &Op::Sum(x) => acc(x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0])),
            Op::BceWithLogits { logits, labels } => {
                let lv = val(*logits);
                let n = labels.len() as f64;
                acc(*logits, &mut |gl| {
                    for i in 0..gl.len() {
                        gl[i] += g[0] * (sigmoid(lv[i]) - labels[i]) / n;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let v = probs.len() / n;
                acc(*logits, &mut |gl| {
                    for r in 0..n {
                        for j in 0..v {
                            let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                            gl[r * v + j] += g[0] * (probs[r * v + j] - onehot) / n as f64;
                        }
                    }
                });
            }
        }
    }
}
