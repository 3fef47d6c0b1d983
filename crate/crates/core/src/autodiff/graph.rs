//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order, so the
//! node list is already a topological order and backward is a single reverse
//! sweep. Each node knows whether any gradient has to flow through it; frozen
//! leaves (`requires_grad == false`) and everything computed only from them
//! are skipped during backward.

use super::tensor::{kernels, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
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
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    MulConst(Var, Vec<f64>),
    WeightedSum {
        mats: Vec<Var>,
        weights: Var,
        scale: f64,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
        scale: f64,
        causal: bool,
    },
    Gelu(Var),
    Relu(Var),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    MeanRows {
        x: Var,
        rows: Vec<usize>,
    },
    MeanOf(Vec<Var>),
    L2Norm(Var, f64),
    AddN(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        scale: f64,
        probs: Vec<f64>,
    },
    SelectRenorm {
        x: Var,
        keep: Vec<bool>,
    },
}

/// Lazily allocated gradient buffer for an input that needs one.
fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]))
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node recorded after `mark` (a value previously returned by
    /// [`Graph::len`]). Vars created after the mark become invalid.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        self.grads.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Gradient of the last backward root with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf node; gradients are tracked iff the tensor has `requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.push(t, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.data(a), self.data(b), m, k, n, &mut out);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt_acc(self.data(a), self.data(b), m, k, n, &mut out);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].value.numel() != self.nodes[b.0].value.numel()
            || self.dims(a) != self.dims(b)
        {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    /// Adds a length-`n` row vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(m);
        if self.nodes[row.0].value.numel() != c {
            return Err(Error::dim("add_row", self.shape(m), self.shape(row)));
        }
        let bias = self.data(row);
        let mut data = self.data(m).to_vec();
        for chunk in data.chunks_mut(c) {
            for (x, b) in chunk.iter_mut().zip(bias) {
                *x += b;
            }
        }
        let t = Tensor::matrix(r, c, data)?;
        let ng = self.ng(&[m, row]);
        Ok(self.push(t, Op::AddRow(m, row), ng))
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let data = self.data(x).iter().map(|v| scale * v + shift).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same numel");
        let ng = self.ng(&[x]);
        self.push(t, Op::Affine(x, scale), ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn mul_const(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.nodes[x.0].value.numel() {
            return Err(Error::dim("mul_const", self.shape(x), &[mask.len()]));
        }
        let data = self.data(x).iter().zip(&mask).map(|(a, b)| a * b).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::MulConst(x, mask), ng))
    }

    /// `scale · Σ_i weights[i] · mats[i]`.
    pub fn weighted_sum(&mut self, mats: &[Var], weights: Var, scale: f64) -> Result<Var> {
        let first = *mats
            .first()
            .ok_or_else(|| Error::Config("weighted_sum of zero terms".into()))?;
        if self.nodes[weights.0].value.numel() != mats.len() {
            return Err(Error::Config(format!(
                "weighted_sum: {} weights for {} terms",
                self.nodes[weights.0].value.numel(),
                mats.len()
            )));
        }
        for &m in mats {
            self.same_shape("weighted_sum", first, m)?;
        }
        let w = self.data(weights).to_vec();
        let mut out = vec![0.0; self.nodes[first.0].value.numel()];
        for (&m, wi) in mats.iter().zip(&w) {
            let c = scale * wi;
            for (o, x) in out.iter_mut().zip(self.data(m)) {
                *o += c * x;
            }
        }
        let t = Tensor::new(self.shape(first).to_vec(), out)?;
        let mut inputs = mats.to_vec();
        inputs.push(weights);
        let ng = self.ng(&inputs);
        Ok(self.push(
            t,
            Op::WeightedSum {
                mats: mats.to_vec(),
                weights,
                scale,
            },
            ng,
        ))
    }

    /// Row-wise layer normalization with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.nodes[gain.0].value.numel() != c || self.nodes[bias.0].value.numel() != c {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let xd = self.data(x);
        for i in 0..r {
            rstd[i] = kernels::normalize_row(&xd[i * c..(i + 1) * c], &mut xhat[i * c..(i + 1) * c], eps);
        }
        let g = self.data(gain);
        let b = self.data(bias);
        let mut out = xhat.clone();
        for row in out.chunks_mut(c) {
            for j in 0..c {
                row[j] = row[j] * g[j] + b[j];
            }
        }
        let t = Tensor::matrix(r, c, out)?;
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Row-wise `softmax(scale · x)`; with `causal`, row `i` only attends to
    /// columns `0..=i` and masked entries are exactly zero.
    pub fn softmax(&mut self, x: Var, scale: f64, causal: bool) -> Result<Var> {
        let (r, c) = self.dims(x);
        let xd = self.data(x);
        if xd.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let width = if causal { (i + 1).min(c) } else { c };
            let row = &mut out[i * c..i * c + width];
            for (o, v) in row.iter_mut().zip(&xd[i * c..i * c + width]) {
                *o = scale * v;
            }
            kernels::softmax_in_place(row);
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Softmax { x, scale, causal }, ng))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| kernels::gelu(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same numel");
        let ng = self.ng(&[x]);
        self.push(t, Op::Gelu(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same numel");
        let ng = self.ng(&[x]);
        self.push(t, Op::Relu(x), ng)
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(table);
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::Domain(format!("row {id} out of range for table of {r} rows")));
            }
            out.extend_from_slice(&td[id * c..(id + 1) * c]);
        }
        let t = Tensor::matrix(ids.len(), c, out)?;
        let ng = self.ng(&[table]);
        Ok(self.push(
            t,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start >= end || end > c {
            return Err(Error::dim("slice_cols", self.shape(x), &[start, end]));
        }
        let w = end - start;
        let xd = self.data(x);
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&xd[i * c + start..i * c + end]);
        }
        let t = Tensor::matrix(r, w, out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.dims(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            if self.dims(p).0 != r {
                return Err(Error::dim("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            total += self.dims(p).1;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let c = self.dims(p).1;
                out.extend_from_slice(&self.data(p)[i * c..(i + 1) * c]);
            }
        }
        let t = Tensor::matrix(r, total, out)?;
        let ng = self.ng(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Mean of the selected rows, as a `1×d` row.
    pub fn mean_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if rows.is_empty() {
            return Err(Error::Domain("mean over an empty row set".into()));
        }
        let mut out = vec![0.0; c];
        let xd = self.data(x);
        for &i in rows {
            if i >= r {
                return Err(Error::Domain(format!("row {i} out of range for {r} rows")));
            }
            for (o, v) in out.iter_mut().zip(&xd[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        let inv = 1.0 / rows.len() as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let t = Tensor::matrix(1, c, out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(
            t,
            Op::MeanRows {
                x,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    /// Elementwise mean of equally shaped vars.
    pub fn mean_of(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars
            .first()
            .ok_or_else(|| Error::Domain("mean of zero tensors".into()))?;
        let mut out = vec![0.0; self.nodes[first.0].value.numel()];
        for &v in vars {
            self.same_shape("mean_of", first, v)?;
            for (o, x) in out.iter_mut().zip(self.data(v)) {
                *o += x;
            }
        }
        let inv = 1.0 / vars.len() as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let t = Tensor::new(self.shape(first).to_vec(), out)?;
        let ng = self.ng(vars);
        Ok(self.push(t, Op::MeanOf(vars.to_vec()), ng))
    }

    /// Euclidean norm as a scalar. The value is exact; the gradient uses
    /// `x / sqrt(Σ x² + floor)` so it stays finite (zero) at the origin.
    pub fn l2_norm(&mut self, x: Var, floor: f64) -> Var {
        let s: f64 = self.data(x).iter().map(|v| v * v).sum();
        let t = Tensor::scalar(s.sqrt());
        let ng = self.ng(&[x]);
        self.push(t, Op::L2Norm(x, floor), ng)
    }

    /// Elementwise sum of equally shaped vars; an empty list yields scalar 0.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var> {
        let Some(&first) = vars.first() else {
            return Ok(self.constant(Tensor::scalar(0.0)));
        };
        let mut out = vec![0.0; self.nodes[first.0].value.numel()];
        for &v in vars {
            self.same_shape("add_n", first, v)?;
            for (o, x) in out.iter_mut().zip(self.data(v)) {
                *o += x;
            }
        }
        let t = Tensor::new(self.shape(first).to_vec(), out)?;
        let ng = self.ng(vars);
        Ok(self.push(t, Op::AddN(vars.to_vec()), ng))
    }

    /// `scale · Σ −log softmax(logits[row])[class]` over `(row, class)` pairs.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)], scale: f64) -> Result<Var> {
        let (r, c) = self.dims(logits);
        let ld = self.data(logits);
        let mut probs = Vec::with_capacity(targets.len() * c);
        let mut total = 0.0;
        for &(row, class) in targets {
            if row >= r || class >= c {
                return Err(Error::Domain(format!(
                    "cross-entropy target ({row}, {class}) outside {r}×{c} logits"
                )));
            }
            let x = &ld[row * c..(row + 1) * c];
            let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - x[class];
            probs.extend(x.iter().map(|v| (v - lse).exp()));
        }
        let value = scale * total;
        if !value.is_finite() {
            return Err(Error::Numeric("cross-entropy is not finite".into()));
        }
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                scale,
                probs,
            },
            ng,
        ))
    }

    /// Zero the entries not in `keep` and renormalize the rest to sum 1.
    pub fn select_renorm(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let xd = self.data(x);
        if keep.len() != xd.len() {
            return Err(Error::dim("select_renorm", self.shape(x), &[keep.len()]));
        }
        let s: f64 = xd.iter().zip(keep).filter(|(_, &k)| k).map(|(v, _)| v).sum();
        if s <= 0.0 {
            return Err(Error::Numeric("select_renorm: kept mass is not positive".into()));
        }
        let out = xd.iter().zip(keep).map(|(v, &k)| if k { v / s } else { 0.0 }).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(
            t,
            Op::SelectRenorm {
                x,
                keep: keep.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar root. Gradients of earlier calls are
    /// discarded; within one call, every use of a node accumulates additively.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::dim("backward", self.shape(root), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].needs_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        macro_rules! with_grad {
            ($v:expr, |$gv:ident| $body:block) => {
                if let Some($gv) = grad_slot(nodes, grads, $v) $body
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                with_grad!(*a, |ga| {
                    kernels::matmul_nt_acc(g, self.data(*b), m, n, k, ga);
                });
                with_grad!(*b, |gb| {
                    kernels::matmul_tn_acc(self.data(*a), g, m, k, n, gb);
                });
            }
            Op::MatMulNt(a, b) => {
                // c = a·bᵀ, a: m×k, b: n×k
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                with_grad!(*a, |ga| {
                    kernels::matmul_acc(g, self.data(*b), m, n, k, ga);
                });
                with_grad!(*b, |gb| {
                    kernels::matmul_tn_acc(g, self.data(*a), m, n, k, gb);
                });
            }
            Op::Add(a, b) => {
                with_grad!(*a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                });
                with_grad!(*b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                });
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                });
                with_grad!(*b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                });
            }
            Op::AddRow(m, row) => {
                let c = self.dims(*m).1;
                with_grad!(*m, |gm| {
                    gm.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                });
                with_grad!(*row, |gr| {
                    for chunk in g.chunks(c) {
                        gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Affine(x, scale) => {
                with_grad!(*x, |gx| {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += scale * b);
                });
            }
            Op::MulConst(x, mask) => {
                with_grad!(*x, |gx| {
                    for ((a, b), m) in gx.iter_mut().zip(g).zip(mask) {
                        *a += b * m;
                    }
                });
            }
            Op::WeightedSum {
                mats,
                weights,
                scale,
            } => {
                let w = self.data(*weights);
                for (j, &m) in mats.iter().enumerate() {
                    let c = scale * w[j];
                    with_grad!(m, |gm| {
                        gm.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
                    });
                }
                with_grad!(*weights, |gw| {
                    for (j, &m) in mats.iter().enumerate() {
                        let dot: f64 = self.data(m).iter().zip(g).map(|(a, b)| a * b).sum();
                        gw[j] += scale * dot;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (r, c) = self.dims(*x);
                let gd = self.data(*gain);
                with_grad!(*gain, |gg| {
                    for (k, (gv, xh)) in g.iter().zip(xhat).enumerate() {
                        gg[k % c] += gv * xh;
                    }
                });
                with_grad!(*bias, |gb| {
                    for (k, gv) in g.iter().enumerate() {
                        gb[k % c] += gv;
                    }
                });
                with_grad!(*x, |gx| {
                    let inv_c = 1.0 / c as f64;
                    let mut dxhat = vec![0.0; c];
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let xh = &xhat[row.clone()];
                        for j in 0..c {
                            dxhat[j] = g[i * c + j] * gd[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() * inv_c;
                        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() * inv_c;
                        for j in 0..c {
                            gx[i * c + j] += rstd[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                });
            }
            Op::Softmax { x, scale, causal } => {
                let (r, c) = self.dims(*x);
                let y = node.value.data();
                with_grad!(*x, |gx| {
                    for i in 0..r {
                        let width = if *causal { (i + 1).min(c) } else { c };
                        let base = i * c;
                        let dot: f64 = (0..width).map(|j| g[base + j] * y[base + j]).sum();
                        for j in 0..width {
                            gx[base + j] += scale * y[base + j] * (g[base + j] - dot);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                with_grad!(*x, |gx| {
                    for ((a, b), v) in gx.iter_mut().zip(g).zip(xd) {
                        *a += b * kernels::gelu_grad(*v);
                    }
                });
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                with_grad!(*x, |gx| {
                    for ((a, b), v) in gx.iter_mut().zip(g).zip(xd) {
                        if *v > 0.0 {
                            *a += b;
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let c = self.dims(*table).1;
                with_grad!(*table, |gt| {
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            gt[id * c + j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.dims(*x);
                let w = node.value.cols();
                with_grad!(*x, |gx| {
                    for i in 0..r {
                        for j in 0..w {
                            gx[i * c + start + j] += g[i * w + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let r = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    with_grad!(p, |gp| {
                        for i in 0..r {
                            for j in 0..w {
                                gp[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::MeanRows { x, rows } => {
                let c = self.dims(*x).1;
                let inv = 1.0 / rows.len() as f64;
                with_grad!(*x, |gx| {
                    for &i in rows {
                        for j in 0..c {
                            gx[i * c + j] += g[j] * inv;
                        }
                    }
                });
            }
            Op::MeanOf(vars) => {
                let inv = 1.0 / vars.len() as f64;
                for &v in vars {
                    with_grad!(v, |gv| {
                        gv.iter_mut().zip(g).for_each(|(a, b)| *a += b * inv);
                    });
                }
            }
            Op::L2Norm(x, floor) => {
                let norm = node.value.item().mul_add(node.value.item(), *floor).sqrt();
                let xd = self.data(*x);
                let inv = if norm > 0.0 { 1.0 / norm } else { 0.0 };
                with_grad!(*x, |gx| {
                    for (a, v) in gx.iter_mut().zip(xd) {
                        *a += g[0] * v * inv;
                    }
                });
            }
            Op::AddN(vars) => {
                for &v in vars {
                    with_grad!(v, |gv| {
                        gv.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                    });
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                scale,
                probs,
            } => {
                let c = self.dims(*logits).1;
                let s = g[0] * scale;
                with_grad!(*logits, |gl| {
                    for (t, &(row, class)) in targets.iter().enumerate() {
                        let p = &probs[t * c..(t + 1) * c];
                        for j in 0..c {
                            gl[row * c + j] += s * p[j];
                        }
                        gl[row * c + class] -= s;
                    }
                });
            }
            Op::SelectRenorm { x, keep } => {
                let xd = self.data(*x);
                let y = node.value.data();
                let s: f64 = xd.iter().zip(keep).filter(|(_, &k)| k).map(|(v, _)| v).sum();
                let gy: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                with_grad!(*x, |gx| {
                    for j in 0..xd.len() {
                        if keep[j] {
                            gx[j] += (g[j] - gy) / s;
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Random bilinear projection `u·x·w` of a matrix to a scalar.
    fn project(g: &mut Graph, x: Var) -> Result<Var> {
        let (r, c) = g.value(x).shape().split_first().map_or((1, 1), |(&r, rest)| {
            (if rest.is_empty() { 1 } else { r }, rest.last().copied().unwrap_or(r))
        });
        let mut rng = ChaCha8Rng::seed_from_u64((r * 31 + c) as u64);
        let u = g.constant(Tensor::randn(&[1, r], 1.0, &mut rng));
        let w = g.constant(Tensor::randn(&[c, 1], 1.0, &mut rng));
        let ux = g.matmul(u, x)?;
        g.matmul(ux, w)
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn assert_grads<F>(f: F, params: &[Tensor])
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let report = check_gradients(f, params, 1e-5, 1e-6).unwrap();
        assert!(report.passed(), "max rel error {}", report.max_rel_error());
    }

    #[test]
    fn matmul_and_transposed_matmul() {
        assert_grads(
            |g, p| {
                let y = g.matmul(p[0], p[1])?;
                project(g, y)
            },
            &[rand(&[3, 4], 1), rand(&[4, 2], 2)],
        );
        assert_grads(
            |g, p| {
                let y = g.matmul_nt(p[0], p[1])?;
                project(g, y)
            },
            &[rand(&[3, 4], 3), rand(&[5, 4], 4)],
        );
    }

    #[test]
    fn elementwise_ops() {
        assert_grads(
            |g, p| {
                let a = g.add(p[0], p[1])?;
                let s = g.sub(a, p[1])?;
                let s = g.sub(s, p[0])?;
                let s = g.add(s, p[1])?;
                let r = g.add_row(s, p[2])?;
                let r = g.affine(r, 1.5, 0.3);
                let m = g.mul_const(r, vec![1.0, 0.0, 2.0, 0.5, -1.0, 3.0])?;
                let e = g.gelu(m);
                project(g, e)
            },
            &[rand(&[2, 3], 5), rand(&[2, 3], 6), rand(&[3], 7)],
        );
    }

    #[test]
    fn relu_away_from_kink() {
        let x = Tensor::matrix(2, 2, vec![0.5, -0.7, 1.2, -0.1]).unwrap();
        assert_grads(
            |g, p| {
                let y = g.relu(p[0]);
                project(g, y)
            },
            &[x],
        );
    }

    #[test]
    fn weighted_sum_gradients_reach_weights() {
        assert_grads(
            |g, p| {
                let y = g.weighted_sum(&[p[0], p[1], p[2]], p[3], 2.0)?;
                project(g, y)
            },
            &[rand(&[2, 3], 8), rand(&[2, 3], 9), rand(&[2, 3], 10), rand(&[3], 11)],
        );
    }

    #[test]
    fn layer_norm_gradients() {
        assert_grads(
            |g, p| {
                let y = g.layer_norm(p[0], p[1], p[2], 1e-5)?;
                project(g, y)
            },
            &[rand(&[3, 5], 12), rand(&[5], 13), rand(&[5], 14)],
        );
    }

    #[test]
    fn causal_softmax_gradients() {
        assert_grads(
            |g, p| {
                let y = g.softmax(p[0], 0.7, true)?;
                project(g, y)
            },
            &[rand(&[4, 4], 15)],
        );
        assert_grads(
            |g, p| {
                let y = g.softmax(p[0], 1.0, false)?;
                project(g, y)
            },
            &[rand(&[2, 5], 16)],
        );
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[3, 3], 1.0));
        let y = g.softmax(x, 1.0, true).unwrap();
        let v = g.value(y);
        assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(v.row(1), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn indexing_ops() {
        assert_grads(
            |g, p| {
                let rows = g.gather_rows(p[0], &[2, 0, 2])?;
                let a = g.slice_cols(rows, 1, 3)?;
                let b = g.slice_cols(rows, 0, 1)?;
                let c = g.concat_cols(&[a, b, a])?;
                let m = g.mean_rows(c, &[0, 2])?;
                let n = g.mean_of(&[m, m])?;
                project(g, n)
            },
            &[rand(&[4, 3], 17)],
        );
    }

    #[test]
    fn norms_sums_and_cross_entropy() {
        assert_grads(
            |g, p| {
                let n = g.l2_norm(p[0], 1e-12);
                let ce = g.cross_entropy(p[1], &[(0, 1), (1, 3), (1, 0)], 0.5)?;
                g.add_n(&[n, ce, n])
            },
            &[rand(&[1, 4], 18), rand(&[2, 4], 19)],
        );
    }

    #[test]
    fn select_renorm_gradients() {
        let x = Tensor::vector(vec![0.4, 0.1, 0.3, 0.2]);
        assert_grads(
            |g, p| {
                let y = g.select_renorm(p[0], &[true, false, true, true])?;
                project(g, y)
            },
            &[x],
        );
    }

    #[test]
    fn l2_norm_is_exact_and_has_zero_gradient_at_origin() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 3]).with_requires_grad(true));
        let n = g.l2_norm(x, 1e-12);
        assert_eq!(g.scalar(n), 0.0);
        g.backward(n).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn shared_node_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0).with_requires_grad(true));
        let y = g.add(x, x).unwrap();
        let z = g.add_n(&[y, x]).unwrap();
        g.backward(z).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0]);
    }

    #[test]
    fn dimension_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension { .. })));
        let v = g.constant(Tensor::zeros(&[4]));
        assert!(g.add(a, v).is_err());
        let nonscalar = g.add(a, b).unwrap();
        assert!(g.backward(nonscalar).is_err());
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, f64::NAN]));
        assert!(matches!(g.softmax(x, 1.0, false), Err(Error::Numeric(_))));
    }
}
