//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! A [`Tape`] owns a growing arena of nodes; every operation appends one node
//! holding its forward value plus references to its parents. Creation order
//! is a topological order, so [`Tape::backward`] replays nodes once in
//! reverse, accumulating vector-Jacobian products additively into each
//! parent. Gradients are only materialized for nodes on a path from a leaf
//! with `requires_grad` to the loss; frozen leaves never get a buffer, which
//! is what keeps backbone weights provably untouched during adapter training.

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, MinMaxInfo};
use crate::numerics::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    MatmulNT { a: Var, b: Var },
    Matvec { m: Var, v: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    AddRow { x: Var, row: Var },
    AddBlocks { x: Var, block: Var, tokens: usize },
    Scale { a: Var, c: f64 },
    ScaleVar { s: Var, a: Var },
    AddConst { a: Var },
    Gelu { a: Var },
    SoftmaxRows { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    Attention { q: Var, k: Var, v: Var, heads: usize, tokens: usize, probs: Vec<f64> },
    MeanPool { a: Var, tokens: usize },
    Row { a: Var, index: usize },
    Dot { a: Var, b: Var },
    StackScalars { parts: Vec<Var> },
    MinMaxNorm { a: Var, info: MinMaxInfo },
    SoftmaxEntropy { logits: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor },
    MeanScalars { parts: Vec<Var> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input tensor; its `requires_grad` flag decides whether
    /// gradients will be accumulated for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let requires_grad = value.requires_grad();
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Register a frozen input regardless of its flag.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of the last `backward` target w.r.t. this node,
    /// or None when the node is frozen or off the differentiation path.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Matmul { a, b }))
    }

    /// a · bᵀ
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::MatmulNT { a, b }))
    }

    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let out = kernels::matvec(self.value(m), self.value(v))?;
        let rg = self.any_grad(&[m, v]);
        Ok(self.push(out, rg, Op::Matvec { m, v }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::add(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::sub(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Sub { a, b }))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = kernels::add_row(self.value(x), self.value(row))?;
        let rg = self.any_grad(&[x, row]);
        Ok(self.push(out, rg, Op::AddRow { x, row }))
    }

    /// Adds a [tokens × d] matrix to every per-sample block of token rows.
    pub fn add_blocks(&mut self, x: Var, block: Var, tokens: usize) -> Result<Var> {
        let out = kernels::add_blocks(self.value(x), self.value(block), tokens)?;
        let rg = self.any_grad(&[x, block]);
        Ok(self.push(out, rg, Op::AddBlocks { x, block, tokens }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = kernels::scale(self.value(a), c)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::Scale { a, c }))
    }

    /// Multiply a tensor by a scalar node (shape [1]); differentiable in both.
    pub fn scale_var(&mut self, s: Var, a: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let out = kernels::scale(self.value(a), sv)?;
        let rg = self.any_grad(&[s, a]);
        Ok(self.push(out, rg, Op::ScaleVar { s, a }))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(Error::Numeric("add_const with non-finite constant".into()));
        }
        let data = self.value(a).data().iter().map(|&x| x + c).collect();
        let out = Tensor::from_vec(self.value(a).shape(), data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::AddConst { a }))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = kernels::gelu(self.value(a))?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::Gelu { a }))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = kernels::softmax_rows(self.value(a))?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::SoftmaxRows { a }))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let out = kernels::layer_norm_rows(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(out, rg, Op::LayerNorm { x, gamma, beta, eps }))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, tokens: usize) -> Result<Var> {
        let (out, probs) =
            kernels::attention_core(self.value(q), self.value(k), self.value(v), heads, tokens)?;
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(out, rg, Op::Attention { q, k, v, heads, tokens, probs }))
    }

    pub fn mean_pool(&mut self, a: Var, tokens: usize) -> Result<Var> {
        let out = kernels::mean_pool(self.value(a), tokens)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::MeanPool { a, tokens }))
    }

    /// Extract row `index` of a matrix as a vector.
    pub fn row(&mut self, a: Var, index: usize) -> Result<Var> {
        let src = self.value(a);
        if !src.is_matrix() {
            return Err(Error::Dimension(format!("row() needs a matrix, got {:?}", src.shape())));
        }
        if index >= src.shape()[0] {
            return Err(Error::Index(format!("row {index} of {} rows", src.shape()[0])));
        }
        let out = Tensor::from_vec(&[src.shape()[1]], src.row_slice(index).to_vec())?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::Row { a, index }))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::dot(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(out), rg, Op::Dot { a, b }))
    }

    /// Pack scalar nodes into one vector node.
    pub fn stack_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dimension("stack_scalars of zero nodes".into()));
        }
        let mut data = Vec::with_capacity(parts.len());
        for &p in parts {
            data.push(self.value(p).item()?);
        }
        let out = Tensor::from_vec(&[parts.len()], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, rg, Op::StackScalars { parts: parts.to_vec() }))
    }

    /// Min-max normalization to [0,1]. Returns the node plus a degeneracy
    /// flag; a degenerate (all-equal) input produces a zero vector whose
    /// gradient is zero everywhere — callers usually skip those.
    pub fn minmax_normalize(&mut self, a: Var) -> Result<(Var, bool)> {
        let (out, info) = kernels::minmax_normalize(self.value(a))?;
        let rg = self.any_grad(&[a]) && !info.degenerate;
        let var = self.push(out, rg, Op::MinMaxNorm { a, info });
        Ok((var, info.degenerate))
    }

    /// Shannon entropy (nats) of softmax(logits) as a scalar node.
    pub fn softmax_entropy(&mut self, logits: Var) -> Result<Var> {
        let h = kernels::shannon_entropy(self.value(logits))?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(Tensor::scalar(h), rg, Op::SoftmaxEntropy { logits }))
    }

    /// Mean cross-entropy of logits [B×C] against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = kernels::cross_entropy(self.value(logits), labels)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
        ))
    }

    /// Arithmetic mean of scalar nodes.
    pub fn mean_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dimension("mean_scalars of zero nodes".into()));
        }
        let mut acc = 0.0;
        for &p in parts {
            acc += self.value(p).item()?;
        }
        let out = Tensor::scalar(acc / parts.len() as f64);
        let rg = self.any_grad(parts);
        Ok(self.push(out, rg, Op::MeanScalars { parts: parts.to_vec() }))
    }

    fn accumulate(&mut self, target: Var, delta: &[f64]) -> Result<()> {
        let node = &mut self.nodes[target.0];
        if !node.requires_grad {
            return Ok(());
        }
        if delta.len() != node.value.numel() {
            return Err(Error::Dimension(format!(
                "gradient of {} elements for node of {}",
                delta.len(),
                node.value.numel()
            )));
        }
        let grad = node.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    /// Reverse pass from a scalar loss node. Visits every node at most once
    /// in reverse creation order (a reverse topological order by
    /// construction) and accumulates gradients additively, so values feeding
    /// several consumers receive the sum of their downstream contributions.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ln = &self.nodes[loss.0];
        if ln.value.numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward target must be scalar, got shape {:?}",
                ln.value.shape()
            )));
        }
        ln.value.validate_finite("loss")?;
        if !ln.requires_grad {
            return Ok(()); // nothing on the tape wants gradients
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let updates = self.vjp(idx)?;
            for (target, delta) in updates {
                self.accumulate(target, &delta)?;
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` with respect to its parents.
    fn vjp(&self, idx: usize) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[idx];
        let g = node.grad.as_ref().expect("vjp on node without gradient");
        let gt = |shape: &[usize]| Tensor::from_vec(shape, g.clone());
        let mut out: Vec<(Var, Vec<f64>)> = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let gm = gt(node.value.shape())?;
                if self.nodes[a.0].requires_grad {
                    out.push((*a, kernels::matmul_nt(&gm, self.value(*b))?.data().to_vec()));
                }
                if self.nodes[b.0].requires_grad {
                    out.push((*b, kernels::matmul_tn(self.value(*a), &gm)?.data().to_vec()));
                }
            }
            Op::MatmulNT { a, b } => {
                let gm = gt(node.value.shape())?;
                if self.nodes[a.0].requires_grad {
                    out.push((*a, kernels::matmul(&gm, self.value(*b))?.data().to_vec()));
                }
                if self.nodes[b.0].requires_grad {
                    out.push((*b, kernels::matmul_tn(&gm, self.value(*a))?.data().to_vec()));
                }
            }
            Op::Matvec { m, v } => {
                let md = self.value(*m);
                let vd = self.value(*v);
                let (r, c) = (md.shape()[0], md.shape()[1]);
                if self.nodes[m.0].requires_grad {
                    let mut dm = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dm[i * c + j] = g[i] * vd.data()[j];
                        }
                    }
                    out.push((*m, dm));
                }
                if self.nodes[v.0].requires_grad {
                    let mut dv = vec![0.0; c];
                    for i in 0..r {
                        let row = &md.data()[i * c..(i + 1) * c];
                        for j in 0..c {
                            dv[j] += g[i] * row[j];
                        }
                    }
                    out.push((*v, dv));
                }
            }
            Op::Add { a, b } => {
                if self.nodes[a.0].requires_grad {
                    out.push((*a, g.clone()));
                }
                if self.nodes[b.0].requires_grad {
                    out.push((*b, g.clone()));
                }
            }
            Op::Sub { a, b } => {
                if self.nodes[a.0].requires_grad {
                    out.push((*a, g.clone()));
                }
                if self.nodes[b.0].requires_grad {
                    out.push((*b, g.iter().map(|x| -x).collect()));
                }
            }
            Op::AddRow { x, row } => {
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                if self.nodes[x.0].requires_grad {
                    out.push((*x, g.clone()));
                }
                if self.nodes[row.0].requires_grad {
                    let mut dr = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            dr[j] += g[i * n + j];
                        }
                    }
                    out.push((*row, dr));
                }
            }
            Op::AddBlocks { x, block, tokens } => {
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                if self.nodes[x.0].requires_grad {
                    out.push((*x, g.clone()));
                }
                if self.nodes[block.0].requires_grad {
                    let mut db = vec![0.0; tokens * n];
                    for r in 0..m {
                        let t = r % tokens;
                        for j in 0..n {
                            db[t * n + j] += g[r * n + j];
                        }
                    }
                    out.push((*block, db));
                }
            }
            Op::Scale { a, c } => {
                if self.nodes[a.0].requires_grad {
                    out.push((*a, g.iter().map(|x| c * x).collect()));
                }
            }
            Op::ScaleVar { s, a } => {
                let sv = self.value(*s).data()[0];
                let av = self.value(*a);
                if self.nodes[s.0].requires_grad {
                    let ds: f64 = g.iter().zip(av.data()).map(|(&gi, &ai)| gi * ai).sum();
                    out.push((*s, vec![ds]));
                }
                if self.nodes[a.0].requires_grad {
                    out.push((*a, g.iter().map(|x| sv * x).collect()));
                }
            }
            Op::AddConst { a } => {
                if self.nodes[a.0].requires_grad {
                    out.push((*a, g.clone()));
                }
            }
            Op::Gelu { a } => {
                if self.nodes[a.0].requires_grad {
                    let av = self.value(*a);
                    let d = av
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&x, &gi)| gi * kernels::gelu_grad_scalar(x))
                        .collect();
                    out.push((*a, d));
                }
            }
            Op::SoftmaxRows { a } => {
                if self.nodes[a.0].requires_grad {
                    let p = &node.value;
                    let (m, n) = (p.shape()[0], p.shape()[1]);
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let prow = p.row_slice(i);
                        let grow = &g[i * n..(i + 1) * n];
                        let inner: f64 = prow.iter().zip(grow).map(|(&pi, &gi)| pi * gi).sum();
                        let drow = &mut dx[i * n..(i + 1) * n];
                        for j in 0..n {
                            drow[j] = prow[j] * (grow[j] - inner);
                        }
                    }
                    out.push((*a, dx));
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let (m, n) = (xv.shape()[0], xv.shape()[1]);
                let nf = n as f64;
                let mut dx = vec![0.0; m * n];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for i in 0..m {
                    let xrow = xv.row_slice(i);
                    let grow = &g[i * n..(i + 1) * n];
                    let mean = xrow.iter().sum::<f64>() / nf;
                    let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                    let inv = 1.0 / (var + eps).sqrt();
                    // dY flows through the affine into the normalized value.
                    let mut sum_dyg = 0.0;
                    let mut sum_dyg_xhat = 0.0;
                    for j in 0..n {
                        let xhat = (xrow[j] - mean) * inv;
                        let dyg = grow[j] * gv.data()[j];
                        sum_dyg += dyg;
                        sum_dyg_xhat += dyg * xhat;
                        dgamma[j] += grow[j] * xhat;
                        dbeta[j] += grow[j];
                    }
                    let drow = &mut dx[i * n..(i + 1) * n];
                    for j in 0..n {
                        let xhat = (xrow[j] - mean) * inv;
                        let dyg = grow[j] * gv.data()[j];
                        drow[j] = inv * (dyg - sum_dyg / nf - xhat * sum_dyg_xhat / nf);
                    }
                }
                if self.nodes[x.0].requires_grad {
                    out.push((*x, dx));
                }
                if self.nodes[gamma.0].requires_grad {
                    out.push((*gamma, dgamma));
                }
                if self.nodes[beta.0].requires_grad {
                    out.push((*beta, dbeta));
                }
            }
            Op::Attention { q, k, v, heads, tokens, probs } => {
                let qv = self.value(*q);
                let kv = self.value(*k);
                let vv = self.value(*v);
                let (rows, d) = (qv.shape()[0], qv.shape()[1]);
                let (heads, tokens) = (*heads, *tokens);
                let hd = d / heads;
                let inv_sqrt = 1.0 / (hd as f64).sqrt();
                let batch = rows / tokens;
                let mut dq = vec![0.0; rows * d];
                let mut dk = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                let mut dp = vec![0.0; tokens * tokens];
                let mut ds = vec![0.0; tokens * tokens];
                for s in 0..batch {
                    let base = s * tokens;
                    for h in 0..heads {
                        let off = h * hd;
                        let pbase = (s * heads + h) * tokens * tokens;
                        let p = &probs[pbase..pbase + tokens * tokens];
                        // dV_j += Σ_i p[i,j]·dO_i ;  dP[i,j] = dO_i · V_j
                        for i in 0..tokens {
                            let gorow = &g[(base + i) * d + off..(base + i) * d + off + hd];
                            for j in 0..tokens {
                                let vrow =
                                    &vv.data()[(base + j) * d + off..(base + j) * d + off + hd];
                                let mut acc = 0.0;
                                for t in 0..hd {
                                    acc += gorow[t] * vrow[t];
                                }
                                dp[i * tokens + j] = acc;
                                let pij = p[i * tokens + j];
                                let dvrow =
                                    &mut dv[(base + j) * d + off..(base + j) * d + off + hd];
                                for t in 0..hd {
                                    dvrow[t] += pij * gorow[t];
                                }
                            }
                        }
                        // softmax VJP per row: dS = P ∘ (dP − Σ_j dP∘P)
                        for i in 0..tokens {
                            let prow = &p[i * tokens..(i + 1) * tokens];
                            let dprow = &dp[i * tokens..(i + 1) * tokens];
                            let inner: f64 =
                                prow.iter().zip(dprow).map(|(&pi, &di)| pi * di).sum();
                            let dsrow = &mut ds[i * tokens..(i + 1) * tokens];
                            for j in 0..tokens {
                                dsrow[j] = prow[j] * (dprow[j] - inner) * inv_sqrt;
                            }
                        }
                        // dQ_i += Σ_j dS[i,j]·K_j ;  dK_j += Σ_i dS[i,j]·Q_i
                        for i in 0..tokens {
                            let dsrow = &ds[i * tokens..(i + 1) * tokens];
                            let dqrow = &mut dq[(base + i) * d + off..(base + i) * d + off + hd];
                            for j in 0..tokens {
                                let krow =
                                    &kv.data()[(base + j) * d + off..(base + j) * d + off + hd];
                                let dsij = dsrow[j];
                                for t in 0..hd {
                                    dqrow[t] += dsij * krow[t];
                                }
                            }
                        }
                        for j in 0..tokens {
                            let dkrow = &mut dk[(base + j) * d + off..(base + j) * d + off + hd];
                            for i in 0..tokens {
                                let dsij = ds[i * tokens + j];
                                let qrow =
                                    &qv.data()[(base + i) * d + off..(base + i) * d + off + hd];
                                for t in 0..hd {
                                    dkrow[t] += dsij * qrow[t];
                                }
                            }
                        }
                    }
                }
                if self.nodes[q.0].requires_grad {
                    out.push((*q, dq));
                }
                if self.nodes[k.0].requires_grad {
                    out.push((*k, dk));
                }
                if self.nodes[v.0].requires_grad {
                    out.push((*v, dv));
                }
            }
            Op::MeanPool { a, tokens } => {
                if self.nodes[a.0].requires_grad {
                    let d = node.value.shape()[1];
                    let batch = node.value.shape()[0];
                    let inv = 1.0 / *tokens as f64;
                    let mut dx = vec![0.0; batch * tokens * d];
                    for s in 0..batch {
                        let grow = &g[s * d..(s + 1) * d];
                        for t in 0..*tokens {
                            let drow = &mut dx[(s * tokens + t) * d..(s * tokens + t + 1) * d];
                            for j in 0..d {
                                drow[j] = grow[j] * inv;
                            }
                        }
                    }
                    out.push((*a, dx));
                }
            }
            Op::Row { a, index } => {
                if self.nodes[a.0].requires_grad {
                    let src = self.value(*a);
                    let (m, n) = (src.shape()[0], src.shape()[1]);
                    let mut dx = vec![0.0; m * n];
                    dx[index * n..(index + 1) * n].copy_from_slice(g);
                    out.push((*a, dx));
                }
            }
            Op::Dot { a, b } => {
                let gs = g[0];
                if self.nodes[a.0].requires_grad {
                    out.push((*a, self.value(*b).data().iter().map(|&x| gs * x).collect()));
                }
                if self.nodes[b.0].requires_grad {
                    out.push((*b, self.value(*a).data().iter().map(|&x| gs * x).collect()));
                }
            }
            Op::StackScalars { parts } => {
                for (i, p) in parts.iter().enumerate() {
                    if self.nodes[p.0].requires_grad {
                        out.push((*p, vec![g[i]]));
                    }
                }
            }
            Op::MinMaxNorm { a, info } => {
                if self.nodes[a.0].requires_grad && !info.degenerate {
                    // y_i = (v_i − v_min)/R with subgradients routed to the
                    // first min/max occurrence (fixed by `info`).
                    let y = &node.value;
                    let r = info.range;
                    let g_sum: f64 = g.iter().sum();
                    let w: f64 = g.iter().zip(y.data()).map(|(&gi, &yi)| gi * yi).sum();
                    let mut dv: Vec<f64> = g.iter().map(|&gi| gi / r).collect();
                    dv[info.argmin] -= (g_sum - w) / r;
                    dv[info.argmax] -= w / r;
                    out.push((*a, dv));
                }
            }
            Op::SoftmaxEntropy { logits } => {
                if self.nodes[logits.0].requires_grad {
                    let gs = g[0];
                    let base = kernels::shannon_entropy_grad(self.value(*logits))?;
                    out.push((*logits, base.into_iter().map(|x| gs * x).collect()));
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.nodes[logits.0].requires_grad {
                    let gs = g[0];
                    let (b, c) = (probs.shape()[0], probs.shape()[1]);
                    let scale = gs / b as f64;
                    let mut dl = probs.data().to_vec();
                    for (i, &label) in labels.iter().enumerate() {
                        dl[i * c + label] -= 1.0;
                    }
                    for v in dl.iter_mut() {
                        *v *= scale;
                    }
                    out.push((*logits, dl));
                }
            }
            Op::MeanScalars { parts } => {
                let share = g[0] / parts.len() as f64;
                for p in parts {
                    if self.nodes[p.0].requires_grad {
                        out.push((*p, vec![share]));
                    }
                }
            }
        }
        Ok(out)
    }
}
