//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every primitive appends one node holding its forward value. Operands always
//! precede their results, so the tape is topologically ordered by construction
//! and [`Tape::backward`] is a single reverse sweep.

use std::sync::Arc;

use rand::Rng;

use super::tensor::{Mask, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    RowScale(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Gelu(Var),
    Exp(Var),
    Sigmoid(Var),
    Softplus(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaskedSoftmax(Var),
    Dropout { x: Var, factors: Vec<f64> },
    Gather { x: Var, idx: Arc<Vec<usize>> },
    Concat(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    CredibilityWeights { kappa: Var, v: Vec<f64>, m: Vec<f64> },
    PoissonDeviance {
        z: Var,
        y: Vec<f64>,
        exposure: Vec<f64>,
        weights: Vec<f64>,
        norm: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward sweep: one optional gradient buffer per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Per-row deviance term `2·[μ − y − y·ln(μ/y)]` with the `y = 0` limit.
pub fn poisson_unit_deviance(y: f64, mu: f64) -> f64 {
    if y > 0.0 {
        2.0 * (mu - y - y * (mu / y).ln())
    } else {
        2.0 * mu
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &x) in arow.iter().enumerate() {
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// Batched product over the leading dimension: `[g×m×k] · [g×k×n]`, or
    /// `[g×m×k] · [g×n×k]ᵀ` when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::dim("bmm", &sa, &sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; g * m * n];
        for gi in 0..g {
            let ab = &av[gi * m * k..(gi + 1) * m * k];
            let bb = &bv[gi * k * n..(gi + 1) * k * n];
            let ob = &mut out[gi * m * n..(gi + 1) * m * n];
            for i in 0..m {
                let arow = &ab[i * k..(i + 1) * k];
                let orow = &mut ob[i * n..(i + 1) * n];
                if trans_b {
                    for (j, o) in orow.iter_mut().enumerate() {
                        let brow = &bb[j * k..(j + 1) * k];
                        *o = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                } else {
                    for (p, &x) in arow.iter().enumerate() {
                        let brow = &bb[p * n..(p + 1) * n];
                        for (o, &y) in orow.iter_mut().zip(brow) {
                            *o += x * y;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![g, m, n], out),
            Op::BatchMatMul { a, b, trans_b },
            rg,
        ))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let av = self.value(a).data();
        let bv = self.value(b).data();
        av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), rg))
    }

    fn check_row_vec(&self, op: &'static str, x: Var, r: Var) -> Result<usize> {
        let d = self.value(x).last_dim();
        if self.value(r).numel() != d {
            return Err(Error::dim(op, self.shape(x), self.shape(r)));
        }
        Ok(d)
    }

    /// Adds a `[d]` vector to every row of `x[.., d]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.check_row_vec("add_row", x, bias)?;
        let bv = self.value(bias).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % d])
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddRow(x, bias), rg))
    }

    /// Multiplies every row of `x[.., d]` elementwise by a `[d]` vector.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        let d = self.check_row_vec("mul_row", x, gain)?;
        let gv = self.value(gain).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gv[i % d])
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gain]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MulRow(x, gain), rg))
    }

    /// Scales slice `x[r, ..]` by `w[r]` for every leading index `r`.
    pub fn row_scale(&mut self, x: Var, w: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.is_empty() || self.value(w).numel() != sx[0] {
            return Err(Error::dim("row_scale", sx, self.shape(w)));
        }
        let block = self.value(x).numel() / sx[0].max(1);
        let wv = self.value(w).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * wv[i / block])
            .collect();
        let shape = sx.to_vec();
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::RowScale(x, w), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Scale(x, c), rg)
    }

    /// Multiplies `x` by a single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim("scale_by", self.shape(x), self.shape(s)));
        }
        let c = self.value(s).item();
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, s]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::ScaleBy(x, s), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), op, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    /// Row-wise layer normalization over the trailing dimension, population
    /// variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.check_row_vec("layer_norm", x, gamma)?;
        self.check_row_vec("layer_norm", x, beta)?;
        if d == 0 {
            return Err(Error::dim("layer_norm", self.shape(x), &[d]));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let rows = xv.len() / d;
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gv[j] * h + bv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Softmax over the trailing dimension. `mask`, when given, has shape
    /// `[r×c]` matching the two trailing dimensions and is shared across any
    /// leading batch dimension; masked entries are excluded from max and sum
    /// and come out as exact zeros.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap_or(&0);
        if c == 0 {
            return Err(Error::DegenerateRow { row: 0 });
        }
        let r = if shape.len() >= 2 {
            shape[shape.len() - 2]
        } else {
            1
        };
        if let Some(m) = mask {
            if m.rows() != r || m.cols() != c {
                return Err(Error::dim("masked_softmax", &shape, &[m.rows(), m.cols()]));
            }
        }
        let xv = self.value(x).data();
        let n_rows = xv.len() / c;
        let mut out = vec![0.0; xv.len()];
        for row in 0..n_rows {
            let logits = &xv[row * c..(row + 1) * c];
            let o = &mut out[row * c..(row + 1) * c];
            let masked = mask.map(|m| m.row_slice(row % r));
            let allowed = |j: usize| masked.map_or(true, |mr| !mr[j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &l) in logits.iter().enumerate() {
                if allowed(j) && l > max {
                    max = l;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { row });
            }
            let mut sum = 0.0;
            for (j, &l) in logits.iter().enumerate() {
                if allowed(j) {
                    let e = (l - max).exp();
                    o[j] = e;
                    sum += e;
                }
            }
            for v in o.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MaskedSoftmax(x), rg))
    }

    /// Inverted dropout. Returns `x` itself (no new node) when inactive.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).numel();
        let factors: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .zip(&factors)
            .map(|(v, f)| v * f)
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Dropout { x, factors }, rg))
    }

    /// `out.flat[i] = x.flat[idx[i]]`. Covers embedding lookup, row
    /// selection, broadcasting and axis permutations.
    pub fn gather(&mut self, x: Var, idx: Arc<Vec<usize>>, shape: Vec<usize>) -> Result<Var> {
        let n = self.value(x).numel();
        if shape.iter().product::<usize>() != idx.len() {
            return Err(Error::dim("gather", &shape, &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(format!(
                "gather index {bad} out of range for {n} elements"
            )));
        }
        let xv = self.value(x).data();
        let out: Vec<f64> = idx.iter().map(|&i| xv[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Gather { x, idx }, rg))
    }

    /// Selects whole rows of `x[n, ..]`.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = shape.first().copied().unwrap_or(0);
        let block = self.value(x).numel() / n.max(1);
        let mut idx = Vec::with_capacity(rows.len() * block);
        for &r in rows {
            if r >= n {
                return Err(Error::Contract(format!("row {r} out of range for {n} rows")));
            }
            idx.extend(r * block..(r + 1) * block);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        self.gather(x, Arc::new(idx), out_shape)
    }

    /// Repeats a `[d]` vector into an `[n×d]` matrix.
    pub fn broadcast_rows(&mut self, v: Var, n: usize) -> Result<Var> {
        let d = self.value(v).numel();
        let idx: Vec<usize> = (0..n).flat_map(|_| 0..d).collect();
        self.gather(v, Arc::new(idx), vec![n, d])
    }

    /// Concatenation along the leading dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::dim("concat", self.shape(*first), s));
            }
            lead += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(Error::dim("reshape", self.shape(x), &shape));
        }
        let out = self.value(x).data().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `out[i] = m[i]·v[i]/(v[i]+κ)` with `κ` a single-element tensor.
    pub fn credibility_weights(&mut self, kappa: Var, v: Vec<f64>, m: Vec<f64>) -> Result<Var> {
        if self.value(kappa).numel() != 1 || v.len() != m.len() {
            return Err(Error::dim("credibility_weights", &[v.len()], &[m.len()]));
        }
        let k = self.value(kappa).item();
        let out: Vec<f64> = v
            .iter()
            .zip(&m)
            .map(|(&vi, &mi)| mi * vi / (vi + k))
            .collect();
        let rg = self.rg(&[kappa]);
        Ok(self.push(
            Tensor::vector(out),
            Op::CredibilityWeights { kappa, v, m },
            rg,
        ))
    }

    /// Weighted Poisson deviance of log-rates `z`:
    /// `Σ w_i · 2[μ_i − y_i − y_i ln(μ_i/y_i)] / norm` with `μ_i = e_i·exp(z_i)`.
    pub fn poisson_deviance(
        &mut self,
        z: Var,
        y: Vec<f64>,
        exposure: Vec<f64>,
        weights: Vec<f64>,
        norm: f64,
    ) -> Result<Var> {
        let n = self.value(z).numel();
        if y.len() != n || exposure.len() != n || weights.len() != n {
            return Err(Error::dim("poisson_deviance", &[n], &[y.len()]));
        }
        let zv = self.value(z).data();
        let mut total = 0.0;
        for i in 0..n {
            let mu = exposure[i] * zv[i].exp();
            total += weights[i] * poisson_unit_deviance(y[i], mu);
        }
        let rg = self.rg(&[z]);
        Ok(self.push(
            Tensor::scalar(total / norm),
            Op::PoissonDeviance {
                z,
                y,
                exposure,
                weights,
                norm,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let t = self.value(loss);
        if t.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                t.shape()
            )));
        }
        self.backward_with_seed(loss, vec![1.0])
    }

    /// Reverse sweep seeded with an arbitrary upstream gradient for `out`.
    pub fn backward_with_seed(&self, out: Var, seed: Vec<f64>) -> Result<Gradients> {
        if seed.len() != self.value(out).numel() {
            return Err(Error::dim("backward seed", self.shape(out), &[seed.len()]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; node.value.numel()]);
        }
        slot.as_deref_mut()
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let sa = self.shape(*a);
                let (m, k) = (sa[0], sa[1]);
                let n = self.shape(*b)[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            let dbrow = &mut db[p * n..(p + 1) * n];
                            for (d, &y) in dbrow.iter_mut().zip(grow) {
                                *d += x * y;
                            }
                        }
                    }
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (gn, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(da) = self.acc(grads, *a) {
                    for gi in 0..gn {
                        let gb = &g[gi * m * n..(gi + 1) * m * n];
                        let bb = &bv[gi * k * n..(gi + 1) * k * n];
                        let dab = &mut da[gi * m * k..(gi + 1) * m * k];
                        for i in 0..m {
                            let grow = &gb[i * n..(i + 1) * n];
                            let darow = &mut dab[i * k..(i + 1) * k];
                            if *trans_b {
                                // da[i,p] += Σ_j g[i,j] b[j,p]
                                for (j, &gij) in grow.iter().enumerate() {
                                    let brow = &bb[j * k..(j + 1) * k];
                                    for (d, &y) in darow.iter_mut().zip(brow) {
                                        *d += gij * y;
                                    }
                                }
                            } else {
                                for (p, d) in darow.iter_mut().enumerate() {
                                    let brow = &bb[p * n..(p + 1) * n];
                                    *d += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                                }
                            }
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for gi in 0..gn {
                        let gb = &g[gi * m * n..(gi + 1) * m * n];
                        let ab = &av[gi * m * k..(gi + 1) * m * k];
                        let dbb = &mut db[gi * k * n..(gi + 1) * k * n];
                        for i in 0..m {
                            let grow = &gb[i * n..(i + 1) * n];
                            let arow = &ab[i * k..(i + 1) * k];
                            if *trans_b {
                                // db[j,p] += g[i,j] a[i,p]
                                for (j, &gij) in grow.iter().enumerate() {
                                    let dbrow = &mut dbb[j * k..(j + 1) * k];
                                    for (d, &x) in dbrow.iter_mut().zip(arow) {
                                        *d += gij * x;
                                    }
                                }
                            } else {
                                for (p, &x) in arow.iter().enumerate() {
                                    let dbrow = &mut dbb[p * n..(p + 1) * n];
                                    for (d, &y) in dbrow.iter_mut().zip(grow) {
                                        *d += x * y;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.acc(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.acc(grads, *b) {
                    add_into(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.acc(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.acc(grads, *b) {
                    for (d, &x) in db.iter_mut().zip(g) {
                        *d -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddRow(x, bias) => {
                let d = self.value(*bias).numel();
                if let Some(dx) = self.acc(grads, *x) {
                    add_into(dx, g);
                }
                if let Some(db) = self.acc(grads, *bias) {
                    for (i, &gi) in g.iter().enumerate() {
                        db[i % d] += gi;
                    }
                }
            }
            Op::MulRow(x, gain) => {
                let d = self.value(*gain).numel();
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                if let Some(dx) = self.acc(grads, *x) {
                    for (i, &gi) in g.iter().enumerate() {
                        dx[i] += gi * gv[i % d];
                    }
                }
                if let Some(dg) = self.acc(grads, *gain) {
                    for (i, &gi) in g.iter().enumerate() {
                        dg[i % d] += gi * xv[i];
                    }
                }
            }
            Op::RowScale(x, w) => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let block = xv.len() / wv.len().max(1);
                if let Some(dx) = self.acc(grads, *x) {
                    for (i, &gi) in g.iter().enumerate() {
                        dx[i] += gi * wv[i / block];
                    }
                }
                if let Some(dw) = self.acc(grads, *w) {
                    for (i, &gi) in g.iter().enumerate() {
                        dw[i / block] += gi * xv[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = self.acc(grads, *x) {
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += gi * c;
                    }
                }
            }
            Op::ScaleBy(x, s) => {
                let c = self.value(*s).item();
                let xv = self.value(*x).data();
                if let Some(dx) = self.acc(grads, *x) {
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += gi * c;
                    }
                }
                if let Some(ds) = self.acc(grads, *s) {
                    ds[0] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        dx[i] += g[i] * gelu_grad(xv[i]);
                    }
                }
            }
            Op::Exp(x) => {
                let yv = node.value.data();
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        dx[i] += g[i] * yv[i];
                    }
                }
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        dx[i] += g[i] * yv[i] * (1.0 - yv[i]);
                    }
                }
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        dx[i] += g[i] * sigmoid(xv[i]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gamma).numel();
                let gv = self.value(*gamma).data();
                let rows = inv_std.len();
                if let Some(dx) = self.acc(grads, *x) {
                    let mut dyh = vec![0.0; d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            dyh[j] = gr[j] * gv[j];
                            s1 += dyh[j];
                            s2 += dyh[j] * hr[j];
                        }
                        let c = inv_std[r] / d as f64;
                        for j in 0..d {
                            dx[r * d + j] += c * (d as f64 * dyh[j] - s1 - hr[j] * s2);
                        }
                    }
                }
                if let Some(dg) = self.acc(grads, *gamma) {
                    for (i, &gi) in g.iter().enumerate() {
                        dg[i % d] += gi * xhat[i];
                    }
                }
                if let Some(db) = self.acc(grads, *beta) {
                    for (i, &gi) in g.iter().enumerate() {
                        db[i % d] += gi;
                    }
                }
            }
            Op::MaskedSoftmax(x) => {
                let yv = node.value.data();
                let c = node.value.last_dim();
                if let Some(dx) = self.acc(grads, *x) {
                    for r in 0..yv.len() / c {
                        let yr = &yv[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Dropout { x, factors } => {
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        dx[i] += g[i] * factors[i];
                    }
                }
            }
            Op::Gather { x, idx } => {
                if let Some(dx) = self.acc(grads, *x) {
                    for (k, &i) in idx.iter().enumerate() {
                        dx[i] += g[k];
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(dp) = self.acc(grads, p) {
                        add_into(dp, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    add_into(dx, g);
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::CredibilityWeights { kappa, v, m } => {
                let k = self.value(*kappa).item();
                if let Some(dk) = self.acc(grads, *kappa) {
                    for i in 0..v.len() {
                        let den = v[i] + k;
                        dk[0] -= g[i] * m[i] * v[i] / (den * den);
                    }
                }
            }
            Op::PoissonDeviance {
                z,
                y,
                exposure,
                weights,
                norm,
            } => {
                let zv = self.value(*z).data();
                if let Some(dz) = self.acc(grads, *z) {
                    for i in 0..y.len() {
                        let mu = exposure[i] * zv[i].exp();
                        dz[i] += g[0] * weights[i] * 2.0 * (mu - y[i]) / norm;
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
