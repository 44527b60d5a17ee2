//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! walks the tape in reverse. The op set is exactly what the vision
//! transformer, its heads and the training objectives need.

use crate::error::{Error, Result};
use crate::losses::{self, VicRegCoeffs};
use crate::scalar::Scalar;
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Token aggregation used by the pooling op.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMethod {
    Mean,
    Max,
    Gem,
}

impl std::str::FromStr for PoolMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" | "avg" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            "gem" => Ok(Self::Gem),
            other => Err(Error::Config(format!("unknown pooling method {other:?}"))),
        }
    }
}

impl std::fmt::Display for PoolMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Max => "max",
            Self::Gem => "gem",
        })
    }
}

/// Floor added to rectified inputs before the generalized mean.
pub const GEM_EPS: f64 = 1e-6;

enum Op<T> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    AddRow {
        x: Var,
        row: Var,
    },
    Scale(Var, T),
    Gather {
        src: Var,
        idx: Vec<usize>,
    },
    Concat(Vec<Var>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Relu(Var),
    Exp(Var),
    Attention {
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<T>,
        rstd: Vec<T>,
        training: bool,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    Pool {
        x: Var,
        seq: usize,
        /// Per-input-element local derivative (mean/gem) or one-hot (max).
        local: Vec<T>,
    },
    ScaleRows {
        x: Var,
        factors: Vec<T>,
    },
    /// Scalar node with gradients precomputed during the forward pass.
    Loss(Vec<(Var, Tensor<T>)>),
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics measured by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

pub enum BatchNormMode<'a, T> {
    Train,
    Eval { mean: &'a [T], var: &'a [T] },
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Gradient accumulated by the last [`Graph::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// `x · w + b` with `x: [R, I]`, `w: [I, O]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (r, i) = (xv.rows(), xv.cols());
        if wv.shape().len() != 2 || wv.shape()[0] != i {
            return Err(Error::Shape(format!(
                "linear input width {i} vs weight {:?}",
                wv.shape()
            )));
        }
        let o = wv.shape()[1];
        let mut out = vec![T::zero(); r * o];
        matmul_nn(xv.data(), wv.data(), &mut out, r, i, o);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.numel() != o {
                return Err(Error::Shape(format!("bias of {} for width {o}", bv.numel())));
            }
            for row in out.chunks_mut(o) {
                for (y, &bb) in row.iter_mut().zip(bv.data()) {
                    *y += bb;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::new(vec![r, o], out)?, Op::Linear { x, w, b }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.numel() != bv.numel() {
            return Err(Error::Shape(format!("add {:?} + {:?}", av.shape(), bv.shape())));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Adds the vector `row` to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.numel() != xv.cols() {
            return Err(Error::Shape(format!(
                "row vector of {} for width {}",
                rv.numel(),
                xv.cols()
            )));
        }
        let mut out = xv.clone();
        let c = out.cols();
        for r in out.data_mut().chunks_mut(c) {
            for (y, &b) in r.iter_mut().zip(rv.data()) {
                *y += b;
            }
        }
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(out, Op::AddRow { x, row }, ng))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    /// Rows `idx` of `src`, stacked. Indices may repeat.
    pub fn gather_rows(&mut self, src: Var, idx: Vec<usize>) -> Result<Var> {
        let sv = self.value(src);
        if let Some(&bad) = idx.iter().find(|&&i| i >= sv.rows()) {
            return Err(Error::Shape(format!("row {bad} out of {}", sv.rows())));
        }
        let out = sv.gather_rows(&idx);
        let ng = self.ng(src);
        Ok(self.push(out, Op::Gather { src, idx }, ng))
    }

    /// Stacks the rows of every part.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c {
                return Err(Error::Shape(format!("concat width {} vs {c}", pv.cols())));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(vec![rows, c], data)?, Op::Concat(parts.to_vec()), ng))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.numel() != c || bv.numel() != c {
            return Err(Error::Shape(format!("layer norm affine width vs {c}")));
        }
        let cc = T::of(c as f64);
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() / cc;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cc;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu_fwd);
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.exp());
        let ng = self.ng(x);
        self.push(out, Op::Exp(x), ng)
    }

    /// Multi-head scaled dot-product self-attention over `batch` independent
    /// sequences of `seq` tokens. `qkv` is `[batch·seq, 3·D]` laid out as
    /// `[q | k | v]`; the result is `[batch·seq, D]`.
    pub fn attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let qv = self.value(qkv);
        if qv.rows() != batch * seq || qv.cols() % (3 * heads) != 0 {
            return Err(Error::Shape(format!(
                "qkv {:?} for {batch} x {seq} tokens and {heads} heads",
                qv.shape()
            )));
        }
        let d = qv.cols() / 3;
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let data = qv.data();
        let w = 3 * d;
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); batch * seq * d];
        let mut scores = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let q = &data[(b * seq + i) * w + h * dh..][..dh];
                    let mut mx = T::neg_infinity();
                    for (j, s) in scores.iter_mut().enumerate() {
                        let k = &data[(b * seq + j) * w + d + h * dh..][..dh];
                        let mut acc = T::zero();
                        for (&a, &c) in q.iter().zip(k) {
                            acc += a * c;
                        }
                        *s = acc * scale;
                        mx = mx.max(*s);
                    }
                    let mut z = T::zero();
                    for s in scores.iter_mut() {
                        *s = (*s - mx).exp();
                        z += *s;
                    }
                    let prow = &mut probs[base + i * seq..base + (i + 1) * seq];
                    for (p, &s) in prow.iter_mut().zip(&scores) {
                        *p = s / z;
                    }
                    let orow = &mut out[(b * seq + i) * d + h * dh..][..dh];
                    for (j, &p) in prow.iter().enumerate() {
                        let v = &data[(b * seq + j) * w + 2 * d + h * dh..][..dh];
                        for (o, &vv) in orow.iter_mut().zip(v) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let ng = self.ng(qkv);
        Ok(self.push(
            Tensor::new(vec![batch * seq, d], out)?,
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Column-wise batch normalization of `[N, C]`. In training mode the batch
    /// statistics are returned so callers can maintain running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mode: BatchNormMode<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        let training = matches!(mode, BatchNormMode::Train);
        if training && n < 2 {
            return Err(Error::Invalid(
                "batch normalization in training mode needs at least 2 rows".into(),
            ));
        }
        let nn = T::of(n as f64);
        let (mean, var_biased, stats) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![T::zero(); c];
                for i in 0..n {
                    for (m, &v) in mean.iter_mut().zip(xv.row(i)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= nn);
                let mut var = vec![T::zero(); c];
                for i in 0..n {
                    for ((s, &v), &m) in var.iter_mut().zip(xv.row(i)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                let unbiased: Vec<T> = var.iter().map(|&s| s / T::of((n - 1) as f64)).collect();
                let biased: Vec<T> = var.iter().map(|&s| s / nn).collect();
                (
                    mean.clone(),
                    biased,
                    Some(BatchStats {
                        mean,
                        var: unbiased,
                    }),
                )
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Shape(format!("running stats width vs {c}")));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let rstd: Vec<T> = var_biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); n * c];
        let mut out = vec![T::zero(); n * c];
        let gv = gamma.map(|g| self.value(g).data().to_vec());
        let bv = beta.map(|b| self.value(b).data().to_vec());
        for i in 0..n {
            let row = xv.row(i);
            for j in 0..c {
                let h = (row[j] - mean[j]) * rstd[j];
                xhat[i * c + j] = h;
                let mut y = h;
                if let Some(g) = &gv {
                    y *= g[j];
                }
                if let Some(b) = &bv {
                    y += b[j];
                }
                out[i * c + j] = y;
            }
        }
        let ng = self.ng(x) || gamma.is_some_and(|g| self.ng(g)) || beta.is_some_and(|b| self.ng(b));
        let v = self.push(
            Tensor::new(vec![n, c], out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                training,
            },
            ng,
        );
        Ok((v, stats))
    }

    /// Divides every row by its ℓ2 norm (floored at 1e-12).
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let nrm = xv.row(r).iter().map(|&v| v * v).sum::<T>().sqrt().max(T::of(1e-12));
            norms.push(nrm);
            out.row_mut(r).iter_mut().for_each(|v| *v /= nrm);
        }
        let ng = self.ng(x);
        self.push(out, Op::L2Normalize { x, norms }, ng)
    }

    /// Aggregates each group of `seq` consecutive rows into one row.
    ///
    /// GeM computes `(mean((relu(x) + ε)^p))^(1/p)` in a max-rescaled form that
    /// stays finite for large `p`.
    pub fn pool(&mut self, x: Var, seq: usize, method: PoolMethod, gem_p: T) -> Result<Var> {
        let xv = self.value(x);
        if seq == 0 || xv.rows() % seq != 0 {
            return Err(Error::Shape(format!("{} rows not divisible into groups of {seq}", xv.rows())));
        }
        let groups = xv.rows() / seq;
        let d = xv.cols();
        let ss = T::of(seq as f64);
        let mut out = vec![T::zero(); groups * d];
        let mut local = vec![T::zero(); xv.numel()];
        for g in 0..groups {
            for j in 0..d {
                let col = |t: usize| xv.data()[(g * seq + t) * d + j];
                let li = |t: usize| (g * seq + t) * d + j;
                match method {
                    PoolMethod::Mean => {
                        let mut s = T::zero();
                        for t in 0..seq {
                            s += col(t);
                            local[li(t)] = T::one() / ss;
                        }
                        out[g * d + j] = s / ss;
                    }
                    PoolMethod::Max => {
                        let mut best = 0;
                        for t in 1..seq {
                            if col(t) > col(best) {
                                best = t;
                            }
                        }
                        out[g * d + j] = col(best);
                        local[li(best)] = T::one();
                    }
                    PoolMethod::Gem => {
                        let eps = T::of(GEM_EPS);
                        let u = |t: usize| col(t).max(T::zero()) + eps;
                        let umax = (0..seq).map(u).fold(T::zero(), T::max);
                        let m = (0..seq).map(|t| (u(t) / umax).powf(gem_p)).sum::<T>() / ss;
                        let y = umax * m.powf(T::one() / gem_p);
                        out[g * d + j] = y;
                        for t in 0..seq {
                            let relu_grad = if col(t) > T::zero() { T::one() } else { T::zero() };
                            local[li(t)] = relu_grad * (u(t) / y).powf(gem_p - T::one()) / ss;
                        }
                    }
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![groups, d], out)?,
            Op::Pool { x, seq, local },
            ng,
        ))
    }

    /// Multiplies row `r` by `factors[r]` (stochastic depth).
    pub fn scale_rows(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if factors.len() != xv.rows() {
            return Err(Error::Shape(format!("{} factors for {} rows", factors.len(), xv.rows())));
        }
        let mut out = xv.clone();
        for (r, &f) in factors.iter().enumerate() {
            out.row_mut(r).iter_mut().for_each(|v| *v *= f);
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::ScaleRows { x, factors }, ng))
    }

    /// Same value, no gradient flows back.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::Leaf, false)
    }

    fn loss_node(&mut self, value: T, inputs: Vec<(Var, Tensor<T>)>) -> Var {
        let ng = inputs.iter().any(|(v, _)| self.ng(*v));
        self.push(Tensor::scalar(value), Op::Loss(inputs), ng)
    }

    /// `Σ wᵢ · xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let value: T = terms.iter().map(|&(v, w)| self.value(v).item() * w).sum();
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        self.push(Tensor::scalar(value), Op::WeightedSum(terms.to_vec()), ng)
    }

    /// Sum of all entries (scalar).
    pub fn sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let total = xv.sum();
        let ones = Tensor::filled(xv.shape(), T::one());
        self.loss_node(total, vec![(x, ones)])
    }

    pub fn recon_loss(&mut self, pred: Var, target: &Tensor<T>, weights: &[T]) -> Result<Var> {
        let (l, g) = losses::recon_loss_weighted_grad(self.value(pred), target, weights)?;
        Ok(self.loss_node(l, vec![(pred, g)]))
    }

    /// InfoNCE with logits scaled by the scalar node `inv_temp`.
    pub fn info_nce(&mut self, p: Var, z: Var, inv_temp: Var) -> Result<Var> {
        let s = self.value(inv_temp).item();
        let g = losses::info_nce_grad(self.value(p), self.value(z), s)?;
        Ok(self.loss_node(
            g.loss,
            vec![(p, g.d_p), (z, g.d_z), (inv_temp, Tensor::scalar(g.d_inv_temp))],
        ))
    }

    /// SimSiam; `z` never receives gradient.
    pub fn simsiam(&mut self, p: Var, z: Var) -> Result<Var> {
        let (l, g) = losses::simsiam_loss_grad(self.value(p), self.value(z))?;
        Ok(self.loss_node(l, vec![(p, g)]))
    }

    pub fn vicreg(&mut self, p: Var, z: Var, coeffs: &VicRegCoeffs) -> Result<Var> {
        let (t, gp, gz) = losses::vicreg_loss_grad(self.value(p), self.value(z), coeffs)?;
        Ok(self.loss_node(t.total, vec![(p, gp), (z, gz)]))
    }

    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let (l, g) = losses::soft_cross_entropy_grad(self.value(logits), targets)?;
        Ok(self.loss_node(l, vec![(logits, g)]))
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagates from the scalar `loss` with seed 1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape("backward needs a scalar".into()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(T::one()));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(gy) = self.grads[id].take() else {
                continue;
            };
            let contribs = self.local_grads(id, &gy);
            self.grads[id] = Some(gy);
            for (v, g) in contribs {
                self.accumulate(v, g);
            }
        }
        Ok(())
    }

    fn local_grads(&self, id: usize, gy: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[id];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (r, i, o) = (xv.rows(), xv.cols(), wv.shape()[1]);
                if self.ng(*x) {
                    let mut dx = vec![T::zero(); r * i];
                    matmul_nt(gy.data(), wv.data(), &mut dx, r, o, i);
                    out.push((*x, Tensor::new(xv.shape().to_vec(), dx).expect("shape")));
                }
                if self.ng(*w) {
                    let mut dw = vec![T::zero(); i * o];
                    matmul_tn(xv.data(), gy.data(), &mut dw, r, i, o);
                    out.push((*w, Tensor::new(vec![i, o], dw).expect("shape")));
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let mut db = vec![T::zero(); o];
                        for row in gy.data().chunks(o) {
                            for (d, &g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        let shape = self.value(*b).shape().to_vec();
                        out.push((*b, Tensor::new(shape, db).expect("shape")));
                    }
                }
            }
            Op::Add(a, b) => {
                let ga = Tensor::new(self.value(*a).shape().to_vec(), gy.data().to_vec()).expect("shape");
                let gb = Tensor::new(self.value(*b).shape().to_vec(), gy.data().to_vec()).expect("shape");
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::AddRow { x, row } => {
                out.push((*x, gy.clone()));
                if self.ng(*row) {
                    let c = gy.cols();
                    let mut dr = vec![T::zero(); c];
                    for r in gy.data().chunks(c) {
                        for (d, &g) in dr.iter_mut().zip(r) {
                            *d += g;
                        }
                    }
                    let shape = self.value(*row).shape().to_vec();
                    out.push((*row, Tensor::new(shape, dr).expect("shape")));
                }
            }
            Op::Scale(x, c) => out.push((*x, gy.map(|v| v * *c))),
            Op::Gather { src, idx } => {
                let sv = self.value(*src);
                let mut ds = Tensor::zeros(sv.shape());
                let c = sv.cols();
                for (r, &i) in idx.iter().enumerate() {
                    let g = &gy.data()[r * c..(r + 1) * c];
                    for (d, &v) in ds.row_mut(i).iter_mut().zip(g) {
                        *d += v;
                    }
                }
                out.push((*src, ds));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.numel();
                    let g = Tensor::new(pv.shape().to_vec(), gy.data()[off..off + n].to_vec()).expect("shape");
                    off += n;
                    out.push((p, g));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = gy.cols();
                let r = gy.rows();
                let gv = self.value(*gamma).data();
                let cc = T::of(c as f64);
                let mut dx = vec![T::zero(); r * c];
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for i in 0..r {
                    let gyr = gy.row(i);
                    let xh = &xhat[i * c..(i + 1) * c];
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for j in 0..c {
                        let dxh = gyr[j] * gv[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                        dg[j] += gyr[j] * xh[j];
                        db[j] += gyr[j];
                    }
                    mean_dxh /= cc;
                    mean_dxh_xh /= cc;
                    for j in 0..c {
                        let dxh = gyr[j] * gv[j];
                        dx[i * c + j] = rstd[i] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                out.push((*x, Tensor::new(gy.shape().to_vec(), dx).expect("shape")));
                let gshape = self.value(*gamma).shape().to_vec();
                out.push((*gamma, Tensor::new(gshape.clone(), dg).expect("shape")));
                out.push((*beta, Tensor::new(gshape, db).expect("shape")));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut d = gy.clone();
                for (g, &v) in d.data_mut().iter_mut().zip(xv.data()) {
                    *g *= gelu_grad(v);
                }
                out.push((*x, d));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut d = gy.clone();
                for (g, &v) in d.data_mut().iter_mut().zip(xv.data()) {
                    if v <= T::zero() {
                        *g = T::zero();
                    }
                }
                out.push((*x, d));
            }
            Op::Exp(x) => {
                let mut d = gy.clone();
                for (g, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                    *g *= y;
                }
                out.push((*x, d));
            }
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let qv = self.value(*qkv);
                let data = qv.data();
                let d = qv.cols() / 3;
                let dh = d / heads;
                let w = 3 * d;
                let scale = T::one() / T::of(dh as f64).sqrt();
                let mut dqkv = vec![T::zero(); data.len()];
                let mut dp = vec![T::zero(); seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let base = (b * heads + h) * seq * seq;
                        for i in 0..seq {
                            let go = &gy.data()[(b * seq + i) * d + h * dh..][..dh];
                            let prow = &probs[base + i * seq..base + (i + 1) * seq];
                            let mut dot = T::zero();
                            for j in 0..seq {
                                let vrow = (b * seq + j) * w + 2 * d + h * dh;
                                let v = &data[vrow..vrow + dh];
                                let mut acc = T::zero();
                                for (&a, &c) in go.iter().zip(v) {
                                    acc += a * c;
                                }
                                dp[j] = acc;
                                dot += prow[j] * acc;
                                let pij = prow[j];
                                for (dv, &g) in dqkv[vrow..vrow + dh].iter_mut().zip(go) {
                                    *dv += pij * g;
                                }
                            }
                            let qrow = (b * seq + i) * w + h * dh;
                            for j in 0..seq {
                                let ds = prow[j] * (dp[j] - dot) * scale;
                                if ds == T::zero() {
                                    continue;
                                }
                                let krow = (b * seq + j) * w + d + h * dh;
                                for t in 0..dh {
                                    let kv = data[krow + t];
                                    let qv = data[qrow + t];
                                    dqkv[qrow + t] += ds * kv;
                                    dqkv[krow + t] += ds * qv;
                                }
                            }
                        }
                    }
                }
                out.push((*qkv, Tensor::new(qv.shape().to_vec(), dqkv).expect("shape")));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                training,
            } => {
                let (n, c) = (gy.rows(), gy.cols());
                let nn = T::of(n as f64);
                let gv = gamma.map(|g| self.value(g).data().to_vec());
                let mut dxh = gy.data().to_vec();
                if let Some(g) = &gv {
                    for row in dxh.chunks_mut(c) {
                        for (v, &gg) in row.iter_mut().zip(g) {
                            *v *= gg;
                        }
                    }
                }
                let mut dx = vec![T::zero(); n * c];
                if *training {
                    let mut m1 = vec![T::zero(); c];
                    let mut m2 = vec![T::zero(); c];
                    for i in 0..n {
                        for j in 0..c {
                            m1[j] += dxh[i * c + j];
                            m2[j] += dxh[i * c + j] * xhat[i * c + j];
                        }
                    }
                    for i in 0..n {
                        for j in 0..c {
                            dx[i * c + j] =
                                rstd[j] * (dxh[i * c + j] - m1[j] / nn - xhat[i * c + j] * m2[j] / nn);
                        }
                    }
                } else {
                    for i in 0..n {
                        for j in 0..c {
                            dx[i * c + j] = rstd[j] * dxh[i * c + j];
                        }
                    }
                }
                out.push((*x, Tensor::new(gy.shape().to_vec(), dx).expect("shape")));
                if let Some(g) = gamma {
                    let mut dg = vec![T::zero(); c];
                    for i in 0..n {
                        for j in 0..c {
                            dg[j] += gy.data()[i * c + j] * xhat[i * c + j];
                        }
                    }
                    let shape = self.value(*g).shape().to_vec();
                    out.push((*g, Tensor::new(shape, dg).expect("shape")));
                }
                if let Some(b) = beta {
                    let mut db = vec![T::zero(); c];
                    for row in gy.data().chunks(c) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    out.push((*b, Tensor::new(shape, db).expect("shape")));
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let mut dx = gy.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dot: T = yr.iter().zip(gy.row(r)).map(|(&a, &b)| a * b).sum();
                    for (d, &yy) in dx.row_mut(r).iter_mut().zip(yr) {
                        *d = (*d - yy * dot) / norms[r];
                    }
                }
                out.push((*x, dx));
            }
            Op::Pool { x, seq, local, .. } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let mut dx = vec![T::zero(); xv.numel()];
                for (r, chunk) in dx.chunks_mut(d).enumerate() {
                    let g = r / seq;
                    let gy_row = gy.row(g);
                    for j in 0..d {
                        chunk[j] = gy_row[j] * local[r * d + j];
                    }
                }
                out.push((*x, Tensor::new(xv.shape().to_vec(), dx).expect("shape")));
            }
            Op::ScaleRows { x, factors } => {
                let mut dx = gy.clone();
                for (r, &f) in factors.iter().enumerate() {
                    dx.row_mut(r).iter_mut().for_each(|v| *v *= f);
                }
                out.push((*x, dx));
            }
            Op::Loss(inputs) => {
                let s = gy.item();
                for (v, g) in inputs {
                    out.push((*v, g.map(|x| x * s)));
                }
            }
            Op::WeightedSum(terms) => {
                let s = gy.item();
                for &(v, w) in terms {
                    out.push((v, Tensor::scalar(s * w)));
                }
            }
        }
        out
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::of(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `f` around `x0`, compared with the analytic
    /// gradient of the same graph.
    fn check<F>(x0: Tensor<f64>, f: F)
    where
        F: Fn(&mut Graph<f64>, Var) -> Var,
    {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let y = f(&mut g, x);
        g.backward(y).unwrap();
        let analytic = g.grad(x).unwrap().clone();
        let h = 1e-6;
        for i in 0..x0.numel() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.param(xp);
                let y = f(&mut g, x);
                g.value(y).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-3);
            assert!(err < 1e-5, "element {i}: fd {fd} analytic {a}");
        }
    }

    fn probe(n: usize, d: usize, seed: f64) -> Tensor<f64> {
        Tensor::from_fn(&[n, d], |i| ((i as f64 + seed) * 0.731).sin() * 1.3)
    }

    /// `Σ y ⊙ W` for a fixed pseudo-random `W`, so every output element
    /// carries a distinct weight.
    fn weigh(g: &mut Graph<f64>, y: Var) -> Var {
        let yv = g.value(y).clone();
        let w = Tensor::new(yv.shape().to_vec(), probe(yv.rows(), yv.cols(), 9.0).into_data()).unwrap();
        let total = yv.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        g.loss_node(total, vec![(y, w)])
    }

    #[test]
    fn linear_gradients() {
        check(probe(3, 4, 0.0), |g, x| {
            let w = g.constant(probe(4, 2, 1.0));
            let b = g.constant(probe(1, 2, 2.0));
            let y = g.linear(x, w, Some(b)).unwrap();
            weigh(g, y)
        });
        check(probe(4, 2, 0.0), |g, w| {
            let x = g.constant(probe(3, 4, 1.0));
            let y = g.linear(x, w, None).unwrap();
            weigh(g, y)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        check(probe(3, 5, 0.0), |g, x| {
            let gm = g.constant(probe(1, 5, 3.0));
            let bt = g.constant(probe(1, 5, 4.0));
            let y = g.layer_norm(x, gm, bt, 1e-5).unwrap();
            weigh(g, y)
        });
    }

    #[test]
    fn attention_gradients() {
        check(probe(2 * 3, 3 * 4, 0.0), |g, x| {
            let y = g.attention(x, 2, 3, 2).unwrap();
            weigh(g, y)
        });
    }

    #[test]
    fn batch_norm_gradients_both_modes() {
        check(probe(4, 3, 0.0), |g, x| {
            let gm = g.constant(probe(1, 3, 5.0));
            let bt = g.constant(probe(1, 3, 6.0));
            let (y, _) = g.batch_norm(x, Some(gm), Some(bt), BatchNormMode::Train, 1e-5).unwrap();
            weigh(g, y)
        });
        check(probe(4, 3, 0.0), |g, x| {
            let (y, _) = g
                .batch_norm(x, None, None, BatchNormMode::Eval { mean: &[0.1, 0.2, 0.3], var: &[1.0, 2.0, 0.5] }, 1e-5)
                .unwrap();
            weigh(g, y)
        });
    }

    #[test]
    fn pointwise_and_normalize_gradients() {
        check(probe(3, 4, 0.0), |g, x| {
            let y = g.gelu(x);
            weigh(g, y)
        });
        check(probe(3, 4, 0.5), |g, x| {
            let y = g.exp(x);
            weigh(g, y)
        });
        check(probe(3, 4, 0.0), |g, x| {
            let y = g.l2_normalize(x);
            weigh(g, y)
        });
    }

    #[test]
    fn pooling_gradients() {
        for method in [PoolMethod::Mean, PoolMethod::Max, PoolMethod::Gem] {
            check(probe(6, 3, 0.2).map(|v| v + 1.5), |g, x| {
                let y = g.pool(x, 3, method, 3.0).unwrap();
                weigh(g, y)
            });
        }
    }

    #[test]
    fn gather_concat_scale_gradients() {
        check(probe(3, 2, 0.0), |g, x| {
            let a = g.gather_rows(x, vec![2, 0, 2, 1]).unwrap();
            let b = g.scale(x, 0.5);
            let c = g.concat_rows(&[a, b]).unwrap();
            let d = g.scale_rows(c, vec![1.0, 0.0, 2.0, 1.0, 1.0, 3.0, 1.0]).unwrap();
            let r = g.constant(probe(1, 2, 8.0));
            let e = g.add_row(d, r).unwrap();
            weigh(g, e)
        });
    }

    #[test]
    fn loss_node_gradients() {
        let nce = |g: &mut Graph<f64>, p: Var, z: Var, t: Var| {
            let (p, z) = (g.l2_normalize(p), g.l2_normalize(z));
            g.info_nce(p, z, t).unwrap()
        };
        check(probe(4, 3, 0.0), |g, p| {
            let z = g.constant(probe(4, 3, 2.0));
            let t = g.constant(Tensor::scalar(2.5));
            nce(g, p, z, t)
        });
        check(probe(4, 3, 0.0), |g, z| {
            let p = g.constant(probe(4, 3, 2.0));
            let t = g.constant(Tensor::scalar(2.5));
            nce(g, p, z, t)
        });
        check(Tensor::scalar(2.5), |g, t| {
            let p = g.constant(probe(4, 3, 0.0));
            let z = g.constant(probe(4, 3, 2.0));
            nce(g, p, z, t)
        });
        check(probe(3, 4, 0.0), |g, p| {
            let z = g.constant(probe(3, 4, 1.0));
            let (p, z) = (g.l2_normalize(p), g.l2_normalize(z));
            g.simsiam(p, z).unwrap()
        });
        check(probe(5, 3, 0.0).map(|v| v * 0.3), |g, p| {
            let z = g.constant(probe(5, 3, 4.0));
            g.vicreg(p, z, &VicRegCoeffs::default()).unwrap()
        });
        check(probe(5, 3, 0.0).map(|v| v * 0.3), |g, z| {
            let p = g.constant(probe(5, 3, 4.0));
            g.vicreg(p, z, &VicRegCoeffs::default()).unwrap()
        });
        let soft = Tensor::from_fn(&[3, 4], |i| if i % 4 == i / 4 { 0.7 } else { 0.1 });
        check(probe(3, 4, 0.0), move |g, x| g.soft_cross_entropy(x, &soft).unwrap());
        let target = probe(3, 4, 5.0);
        check(probe(3, 4, 0.0), move |g, x| g.recon_loss(x, &target, &[1.0, 0.0, 1.0]).unwrap());
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(probe(2, 2, 0.0));
        let d = g.detach(x);
        let y = g.add(x, d).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }
}
