//! Forward numeric kernels.
//!
//! Every kernel validates shapes and rejects non-finite inputs, so callers
//! can assume outputs are finite unless an error was raised. All loops are
//! written so the innermost pass runs over contiguous memory and
//! autovectorizes; there is no threading here — parallelism, when wanted,
//! lives above the kernel layer.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

fn want_matrix(t: &Tensor, what: &str) -> Result<()> {
    if !t.is_matrix() {
        return Err(Error::Dimension(format!("{what} must be a matrix, got shape {:?}", t.shape())));
    }
    Ok(())
}

fn want_vector(t: &Tensor, what: &str) -> Result<()> {
    if !t.is_vector() {
        return Err(Error::Dimension(format!("{what} must be a vector, got shape {:?}", t.shape())));
    }
    Ok(())
}

/// C = A · B for A [m×k], B [k×n].
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    want_matrix(a, "matmul lhs")?;
    want_matrix(b, "matmul rhs")?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner dims differ: [{m}x{k}] vs [{k2}x{n}]"
        )));
    }
    a.validate_finite("matmul lhs")?;
    b.validate_finite("matmul rhs")?;
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &bd[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// C = A · Bᵀ for A [m×k], B [n×k].
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    want_matrix(a, "matmul_nt lhs")?;
    want_matrix(b, "matmul_nt rhs")?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (n, k2) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul_nt inner dims differ: [{m}x{k}] vs [{n}x{k2}]ᵀ"
        )));
    }
    a.validate_finite("matmul_nt lhs")?;
    b.validate_finite("matmul_nt rhs")?;
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// C = Aᵀ · B for A [m×k], B [m×n].
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    want_matrix(a, "matmul_tn lhs")?;
    want_matrix(b, "matmul_tn rhs")?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (m2, n) = (b.shape()[0], b.shape()[1]);
    if m != m2 {
        return Err(Error::Dimension(format!(
            "matmul_tn outer dims differ: [{m}x{k}]ᵀ vs [{m2}x{n}]"
        )));
    }
    a.validate_finite("matmul_tn lhs")?;
    b.validate_finite("matmul_tn rhs")?;
    let mut out = vec![0.0; k * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let brow = &bd[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    Tensor::from_vec(&[k, n], out)
}

/// y = M · v for M [r×c], v [c].
pub fn matvec(m: &Tensor, v: &Tensor) -> Result<Tensor> {
    want_matrix(m, "matvec lhs")?;
    want_vector(v, "matvec rhs")?;
    let (r, c) = (m.shape()[0], m.shape()[1]);
    if c != v.shape()[0] {
        return Err(Error::Dimension(format!(
            "matvec dims differ: [{r}x{c}] vs [{}]",
            v.shape()[0]
        )));
    }
    m.validate_finite("matvec lhs")?;
    v.validate_finite("matvec rhs")?;
    let md = m.data();
    let vd = v.data();
    let mut out = vec![0.0; r];
    for i in 0..r {
        let row = &md[i * c..(i + 1) * c];
        let mut acc = 0.0;
        for j in 0..c {
            acc += row[j] * vd[j];
        }
        out[i] = acc;
    }
    Tensor::from_vec(&[r], out)
}

fn zip_elementwise(a: &Tensor, b: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{what} needs equal shapes, got {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    a.validate_finite(what)?;
    b.validate_finite(what)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_elementwise(a, b, "add", |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_elementwise(a, b, "sub", |x, y| x - y)
}

pub fn scale(a: &Tensor, c: f64) -> Result<Tensor> {
    if !c.is_finite() {
        return Err(Error::Numeric("scale factor is non-finite".into()));
    }
    a.validate_finite("scale input")?;
    let data = a.data().iter().map(|&x| c * x).collect();
    Tensor::from_vec(a.shape(), data)
}

/// Broadcast-add a row vector to every row of a matrix.
pub fn add_row(x: &Tensor, row: &Tensor) -> Result<Tensor> {
    want_matrix(x, "add_row lhs")?;
    want_vector(row, "add_row rhs")?;
    let (m, n) = (x.shape()[0], x.shape()[1]);
    if row.shape()[0] != n {
        return Err(Error::Dimension(format!(
            "add_row: matrix has {n} cols, row has {}",
            row.shape()[0]
        )));
    }
    x.validate_finite("add_row lhs")?;
    row.validate_finite("add_row rhs")?;
    let mut out = x.data().to_vec();
    let rd = row.data();
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            orow[j] += rd[j];
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// Adds a [tokens × d] matrix to every sample's block of token rows:
/// out[s·tokens + t, :] = x[s·tokens + t, :] + block[t, :].
pub fn add_blocks(x: &Tensor, block: &Tensor, tokens: usize) -> Result<Tensor> {
    want_matrix(x, "add_blocks lhs")?;
    want_matrix(block, "add_blocks rhs")?;
    let (rows, n) = (x.shape()[0], x.shape()[1]);
    if tokens == 0 || rows % tokens != 0 {
        return Err(Error::Dimension(format!(
            "add_blocks: {rows} rows not divisible into blocks of {tokens}"
        )));
    }
    if block.shape() != [tokens, n] {
        return Err(Error::Dimension(format!(
            "add_blocks: block shape {:?}, expected [{tokens}, {n}]",
            block.shape()
        )));
    }
    x.validate_finite("add_blocks lhs")?;
    block.validate_finite("add_blocks rhs")?;
    let mut out = x.data().to_vec();
    let bd = block.data();
    for s in 0..rows / tokens {
        for t in 0..tokens {
            let orow = &mut out[(s * tokens + t) * n..(s * tokens + t + 1) * n];
            let brow = &bd[t * n..(t + 1) * n];
            for j in 0..n {
                orow[j] += brow[j];
            }
        }
    }
    Tensor::from_vec(&[rows, n], out)
}

/// Row-wise softmax with max subtraction; each output row sums to 1.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    want_matrix(x, "softmax input")?;
    x.validate_finite("softmax input")?;
    let (m, n) = (x.shape()[0], x.shape()[1]);
    if n == 0 {
        return Err(Error::Dimension("softmax over zero columns".into()));
    }
    let mut out = x.data().to_vec();
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// Per-row layer normalization followed by a learned affine map:
/// y = (x − mean) / sqrt(var + eps) * gamma + beta, with population variance.
pub fn layer_norm_rows(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    want_matrix(x, "layer_norm input")?;
    want_vector(gamma, "layer_norm gamma")?;
    want_vector(beta, "layer_norm beta")?;
    let (m, n) = (x.shape()[0], x.shape()[1]);
    if gamma.shape()[0] != n || beta.shape()[0] != n {
        return Err(Error::Dimension(format!(
            "layer_norm: {n} features vs gamma {} / beta {}",
            gamma.shape()[0],
            beta.shape()[0]
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::Range(format!("layer_norm eps must be > 0, got {eps}")));
    }
    x.validate_finite("layer_norm input")?;
    gamma.validate_finite("layer_norm gamma")?;
    beta.validate_finite("layer_norm beta")?;
    let g = gamma.data();
    let b = beta.data();
    let mut out = x.data().to_vec();
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..n {
            row[j] = (row[j] - mean) * inv * g[j] + b[j];
        }
    }
    Tensor::from_vec(&[m, n], out)
}

pub(crate) const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub(crate) const GELU_CUBIC_COEF: f64 = 0.044_715;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC_COEF * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Elementwise GELU (tanh form).
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    x.validate_finite("gelu input")?;
    let data = x.data().iter().map(|&v| gelu_scalar(v)).collect();
    Tensor::from_vec(x.shape(), data)
}

/// Collapse each consecutive block of `tokens` rows to its mean:
/// [(B·T) × d] → [B × d].
pub fn mean_pool(x: &Tensor, tokens: usize) -> Result<Tensor> {
    want_matrix(x, "mean_pool input")?;
    if tokens == 0 {
        return Err(Error::Range("mean_pool needs tokens >= 1".into()));
    }
    let (rows, d) = (x.shape()[0], x.shape()[1]);
    if rows % tokens != 0 {
        return Err(Error::Dimension(format!(
            "mean_pool: {rows} rows not divisible by {tokens} tokens"
        )));
    }
    x.validate_finite("mean_pool input")?;
    let batch = rows / tokens;
    let xd = x.data();
    let mut out = vec![0.0; batch * d];
    for s in 0..batch {
        let orow = &mut out[s * d..(s + 1) * d];
        for t in 0..tokens {
            let row = &xd[(s * tokens + t) * d..(s * tokens + t + 1) * d];
            for j in 0..d {
                orow[j] += row[j];
            }
        }
        let inv = 1.0 / tokens as f64;
        for v in orow.iter_mut() {
            *v *= inv;
        }
    }
    Tensor::from_vec(&[batch, d], out)
}

/// Multi-head scaled dot-product attention over per-sample blocks of
/// `tokens` rows. Inputs q/k/v are [(B·T) × d] with `d % heads == 0`;
/// returns the attended values (heads re-concatenated) plus the softmax
/// probabilities, cached as [B·H·T·T] for the backward pass.
pub fn attention_core(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    tokens: usize,
) -> Result<(Tensor, Vec<f64>)> {
    for (t, w) in [(q, "attention q"), (k, "attention k"), (v, "attention v")] {
        want_matrix(t, w)?;
        t.validate_finite(w)?;
    }
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::Dimension(format!(
            "attention q/k/v shapes differ: {:?} {:?} {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let (rows, d) = (q.shape()[0], q.shape()[1]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Dimension(format!("attention: dim {d} not divisible by {heads} heads")));
    }
    if tokens == 0 || rows % tokens != 0 {
        return Err(Error::Dimension(format!(
            "attention: {rows} rows not divisible by {tokens} tokens"
        )));
    }
    let batch = rows / tokens;
    let hd = d / heads;
    let inv_sqrt = 1.0 / (hd as f64).sqrt();
    let qd = q.data();
    let kd = k.data();
    let vd = v.data();
    let mut out = vec![0.0; rows * d];
    let mut probs = vec![0.0; batch * heads * tokens * tokens];
    let mut scores = vec![0.0; tokens * tokens];
    for s in 0..batch {
        let base = s * tokens;
        for h in 0..heads {
            let off = h * hd;
            // scores[i][j] = q_i · k_j / sqrt(hd)
            for i in 0..tokens {
                let qrow = &qd[(base + i) * d + off..(base + i) * d + off + hd];
                for j in 0..tokens {
                    let krow = &kd[(base + j) * d + off..(base + j) * d + off + hd];
                    let mut acc = 0.0;
                    for p in 0..hd {
                        acc += qrow[p] * krow[p];
                    }
                    scores[i * tokens + j] = acc * inv_sqrt;
                }
            }
            // row-wise softmax into the cache
            let pbase = (s * heads + h) * tokens * tokens;
            for i in 0..tokens {
                let srow = &scores[i * tokens..(i + 1) * tokens];
                let max = srow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                let prow = &mut probs[pbase + i * tokens..pbase + (i + 1) * tokens];
                for j in 0..tokens {
                    let e = (srow[j] - max).exp();
                    prow[j] = e;
                    sum += e;
                }
                for p in prow.iter_mut() {
                    *p /= sum;
                }
            }
            // out_i = sum_j p[i][j] v_j
            for i in 0..tokens {
                let prow = &probs[pbase + i * tokens..pbase + (i + 1) * tokens];
                let orow = &mut out[(base + i) * d + off..(base + i) * d + off + hd];
                for j in 0..tokens {
                    let vrow = &vd[(base + j) * d + off..(base + j) * d + off + hd];
                    let pij = prow[j];
                    for p in 0..hd {
                        orow[p] += pij * vrow[p];
                    }
                }
            }
        }
    }
    Ok((Tensor::from_vec(&[rows, d], out)?, probs))
}

/// Mean cross-entropy of logits [B×C] against integer labels, plus the
/// row-wise softmax probabilities (cached for the backward pass).
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    want_matrix(logits, "cross_entropy logits")?;
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::Dimension(format!(
            "cross_entropy: {b} logit rows vs {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Index(format!("cross_entropy label {bad} out of range for {c} classes")));
    }
    let probs = softmax_rows(logits)?;
    let ld = logits.data();
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = &ld[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
    }
    Ok((loss / b as f64, probs))
}

/// Shannon entropy (nats) of the softmax of a logit vector, computed in the
/// stable form H = logsumexp(x) − Σ softmax(x)·x without any epsilon.
pub fn shannon_entropy(logits: &Tensor) -> Result<f64> {
    want_vector(logits, "entropy logits")?;
    logits.validate_finite("entropy logits")?;
    let x = logits.data();
    if x.is_empty() {
        return Err(Error::Dimension("entropy of an empty vector".into()));
    }
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &v in x {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    let mut expectation = 0.0;
    for &v in x {
        expectation += ((v - max).exp() / sum) * v;
    }
    Ok(lse - expectation)
}

/// Gradient of [`shannon_entropy`] with respect to the logits:
/// dH/dx_j = −p_j (x_j − Σ_i p_i x_i).
pub fn shannon_entropy_grad(logits: &Tensor) -> Result<Vec<f64>> {
    want_vector(logits, "entropy logits")?;
    logits.validate_finite("entropy logits")?;
    let x = logits.data();
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = x.iter().map(|&v| (v - max).exp()).sum();
    let p: Vec<f64> = x.iter().map(|&v| (v - max).exp() / sum).collect();
    let mean_logit: f64 = p.iter().zip(x).map(|(&pi, &xi)| pi * xi).sum();
    Ok(p.iter().zip(x).map(|(&pi, &xi)| -pi * (xi - mean_logit)).collect())
}

/// Outcome of [`minmax_normalize`]; the arg indices use the first occurrence
/// on ties, which also fixes the subgradient convention.
#[derive(Debug, Clone, Copy)]
pub struct MinMaxInfo {
    pub argmin: usize,
    pub argmax: usize,
    pub range: f64,
    pub degenerate: bool,
}

/// Affinely rescale a vector to [0, 1]. An all-equal input has no scale; it
/// yields a zero vector with `degenerate` set so callers can skip it.
pub fn minmax_normalize(v: &Tensor) -> Result<(Tensor, MinMaxInfo)> {
    want_vector(v, "minmax input")?;
    v.validate_finite("minmax input")?;
    let x = v.data();
    if x.is_empty() {
        return Err(Error::Dimension("minmax_normalize of an empty vector".into()));
    }
    let mut argmin = 0;
    let mut argmax = 0;
    for (i, &val) in x.iter().enumerate() {
        if val < x[argmin] {
            argmin = i;
        }
        if val > x[argmax] {
            argmax = i;
        }
    }
    let range = x[argmax] - x[argmin];
    if range == 0.0 {
        let info = MinMaxInfo { argmin, argmax, range, degenerate: true };
        return Ok((Tensor::zeros(v.shape()), info));
    }
    let lo = x[argmin];
    let out: Vec<f64> = x.iter().map(|&val| (val - lo) / range).collect();
    let info = MinMaxInfo { argmin, argmax, range, degenerate: false };
    Ok((Tensor::from_vec(v.shape(), out)?, info))
}

/// Sum of elementwise products of two equally shaped tensors.
pub fn dot(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "dot needs equal shapes, got {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    a.validate_finite("dot lhs")?;
    b.validate_finite("dot rhs")?;
    Ok(a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).sum())
}
