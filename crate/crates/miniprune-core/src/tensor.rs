//! Dense `f32` tensors and the small set of numeric kernels the toolkit uses.
//!
//! Everything here is deterministic: each output element is accumulated in a
//! fixed order, so repeated runs produce bit-identical results, and the row
//! partitioning used for optional multi-threading never changes per-element
//! arithmetic. Scalar reductions (losses, norms) accumulate in `f64`.

use std::cell::Cell;
use std::sync::OnceLock;

use crate::error::{CoreError, Result};
use crate::rng::{Distribution, RngStream};

/// Row-major dense tensor of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    /// Tensor filled with a constant.
    pub fn filled(shape: &[usize], value: f32) -> Tensor {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    /// Wrap existing data; the element count must match the shape.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Tensor with i.i.d. normal entries of the given standard deviation.
    pub fn random_normal(rng: &mut RngStream, shape: &[usize], std: f32) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| (rng.next_gaussian() as f32) * std)
            .collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Number of rows of a matrix.
    pub fn rows(&self) -> usize {
        assert_eq!(self.rank(), 2, "rows() requires a matrix");
        self.shape[0]
    }

    /// Number of columns of a matrix.
    pub fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2, "cols() requires a matrix");
        self.shape[1]
    }

    /// Immutable view of one matrix row.
    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Mutable view of one matrix row.
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Matrix transpose.
    pub fn transposed(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ---- Worker-thread configuration ----

static ENV_THREADS: OnceLock<usize> = OnceLock::new();

thread_local! {
    static THREAD_OVERRIDE: Cell<Option<usize>> = const { Cell::new(None) };
}

/// Worker threads used by large kernels: `MINIPRUNE_THREADS` if set,
/// otherwise the machine's available parallelism.
pub fn worker_threads() -> usize {
    if let Some(n) = THREAD_OVERRIDE.with(|c| c.get()) {
        return n.max(1);
    }
    *ENV_THREADS.get_or_init(|| {
        std::env::var("MINIPRUNE_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or_else(|| {
                std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
            })
    })
}

/// Run `f` with the worker-thread count pinned to `n` (scoped to this call).
pub fn with_threads<R>(n: usize, f: impl FnOnce() -> R) -> R {
    THREAD_OVERRIDE.with(|c| c.set(Some(n)));
    let out = f();
    THREAD_OVERRIDE.with(|c| c.set(None));
    out
}

/// Apply `f(row_index, row_slice)` over a row-major output buffer, possibly
/// splitting rows across threads. Each row's arithmetic is independent of the
/// partition, so results are identical for any thread count.
fn for_each_row(out: &mut [f32], n_rows: usize, row_len: usize, per_row_cost: usize, f: impl Fn(usize, &mut [f32]) + Sync) {
    let threads = worker_threads();
    if threads <= 1 || n_rows < 2 * threads || per_row_cost.saturating_mul(n_rows) < 2_000_000 {
        for (i, row) in out.chunks_exact_mut(row_len).enumerate().take(n_rows) {
            f(i, row);
        }
        return;
    }
    let chunk_rows = n_rows.div_ceil(threads);
    std::thread::scope(|scope| {
        for (c, chunk) in out.chunks_mut(chunk_rows * row_len).enumerate() {
            let f = &f;
            scope.spawn(move || {
                let base = c * chunk_rows;
                for (i, row) in chunk.chunks_exact_mut(row_len).enumerate() {
                    f(base + i, row);
                }
            });
        }
    });
}

/// Dot product with a fixed eight-lane accumulation order (vectorizes well
/// and is bit-reproducible).
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f32; 8];
    let chunks_a = a.chunks_exact(8);
    let chunks_b = b.chunks_exact(8);
    let rem_a = chunks_a.remainder();
    let rem_b = chunks_b.remainder();
    for (pa, pb) in chunks_a.zip(chunks_b) {
        for l in 0..8 {
            lanes[l] += pa[l] * pb[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in rem_a.iter().zip(rem_b.iter()) {
        tail += x * y;
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5]))
        + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]))
        + tail
}

/// `y += c * x` over slices.
#[inline]
pub fn axpy(y: &mut [f32], c: f32, x: &[f32]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += c * xi;
    }
}

// ---- Kernels ----

/// Matrix product `[m×k]·[k×n] → [m×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(CoreError::shape("matmul requires matrices"));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (kb, n) = (b.shape[0], b.shape[1]);
    if k != kb {
        return Err(CoreError::shape(format!(
            "matmul inner dims differ: {k} vs {kb}"
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let a_data = &a.data;
    let b_data = &b.data;
    for_each_row(&mut out.data, m, n, k * n, |i, row| {
        for kk in 0..k {
            axpy(row, a_data[i * k + kk], &b_data[kk * n..(kk + 1) * n]);
        }
    });
    Ok(out)
}

/// Affine map without bias: `x [n×in] · wᵀ` for a weight stored `[out×in]`.
pub fn linear(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 || w.rank() != 2 {
        return Err(CoreError::shape("linear requires matrices"));
    }
    let (n, d_in) = (x.shape[0], x.shape[1]);
    let (d_out, d_in_w) = (w.shape[0], w.shape[1]);
    if d_in != d_in_w {
        return Err(CoreError::shape(format!(
            "linear input dims differ: {d_in} vs {d_in_w}"
        )));
    }
    let mut out = Tensor::zeros(&[n, d_out]);
    let x_data = &x.data;
    let w_data = &w.data;
    for_each_row(&mut out.data, n, d_out, d_in * d_out, |i, row| {
        let xr = &x_data[i * d_in..(i + 1) * d_in];
        for (o, slot) in row.iter_mut().enumerate() {
            *slot = dot(xr, &w_data[o * d_in..(o + 1) * d_in]);
        }
    });
    Ok(out)
}

/// Transposed-left product `aᵀ·b` for `a [N×p]`, `b [N×q]` → `[p×q]`.
/// Used to accumulate weight gradients (`dW = dyᵀ·x`).
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[0] != b.shape[0] {
        return Err(CoreError::shape("matmul_tn requires matrices sharing rows"));
    }
    let (n, p) = (a.shape[0], a.shape[1]);
    let q = b.shape[1];
    let mut out = Tensor::zeros(&[p, q]);
    let a_data = &a.data;
    let b_data = &b.data;
    for_each_row(&mut out.data, p, q, n * q, |i, row| {
        for nn in 0..n {
            axpy(row, a_data[nn * p + i], &b_data[nn * q..(nn + 1) * q]);
        }
    });
    Ok(out)
}

/// Row-wise softmax of a matrix with finite entries.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(CoreError::shape("softmax_rows requires a matrix"));
    }
    if !x.all_finite() {
        return Err(CoreError::non_finite("softmax_rows input"));
    }
    let (r, c) = (x.rows(), x.cols());
    if c == 0 {
        return Err(CoreError::shape("softmax_rows requires nonempty rows"));
    }
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        let row = x.row(i);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f64;
        let out_row = &mut out.data[i * c..(i + 1) * c];
        for (o, &v) in out_row.iter_mut().zip(row.iter()) {
            let e = ((v - max) as f64).exp();
            denom += e;
            *o = e as f32;
        }
        let inv = (1.0 / denom) as f32;
        for o in out_row.iter_mut() {
            *o *= inv;
        }
    }
    Ok(out)
}

/// Row-wise layer normalization: `gamma ⊙ (x − mean)/sqrt(var + eps) + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(CoreError::shape("layer_norm requires a matrix"));
    }
    let c = x.cols();
    if gamma.numel() != c || beta.numel() != c {
        return Err(CoreError::shape(format!(
            "layer_norm parameter length {} / {} does not match width {}",
            gamma.numel(),
            beta.numel(),
            c
        )));
    }
    let mut out = Tensor::zeros(x.shape());
    let mut stats = vec![0.0f32; 2 * x.rows()];
    layer_norm_forward(x, gamma, beta, eps, &mut out, &mut stats);
    Ok(out)
}

/// Layer-norm forward that also records per-row `(mean, 1/std)`, which the
/// backward pass reuses.
pub(crate) fn layer_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
    out: &mut Tensor,
    stats: &mut [f32],
) {
    let (r, c) = (x.rows(), x.cols());
    debug_assert_eq!(stats.len(), 2 * r);
    let g = gamma.data();
    let b = beta.data();
    for i in 0..r {
        let row = x.row(i);
        let mut sum = 0.0f64;
        for &v in row {
            sum += v as f64;
        }
        let mean = (sum / c as f64) as f32;
        let mut var_sum = 0.0f64;
        for &v in row {
            let d = (v - mean) as f64;
            var_sum += d * d;
        }
        let var = (var_sum / c as f64) as f32;
        let rstd = 1.0 / (var + eps).sqrt();
        stats[2 * i] = mean;
        stats[2 * i + 1] = rstd;
        let out_row = &mut out.data[i * c..(i + 1) * c];
        for j in 0..c {
            out_row[j] = g[j] * ((row[j] - mean) * rstd) + b[j];
        }
    }
}

const GELU_COEFF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.7978845608028654;

/// Gaussian error linear unit, tanh form:
/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data.iter().map(|&v| gelu_scalar(v)).collect();
    Tensor { shape: x.shape.clone(), data }
}

#[inline]
pub(crate) fn gelu_scalar(v: f32) -> f32 {
    let x = v as f64;
    let inner = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    (0.5 * x * (1.0 + inner.tanh())) as f32
}

/// Derivative of the tanh-form GELU.
#[inline]
pub(crate) fn gelu_grad_scalar(v: f32) -> f32 {
    let x = v as f64;
    let inner = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x);
    (0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner) as f32
}

/// Sigmoid-weighted linear unit `x·σ(x)`.
#[inline]
pub(crate) fn silu_scalar(v: f32) -> f32 {
    let x = v as f64;
    (x / (1.0 + (-x).exp())) as f32
}

/// Derivative of the SiLU.
#[inline]
pub(crate) fn silu_grad_scalar(v: f32) -> f32 {
    let x = v as f64;
    let s = 1.0 / (1.0 + (-x).exp());
    (s * (1.0 + x * (1.0 - s))) as f32
}

/// Negative log-likelihood of one target class under one row of raw logits,
/// computed with a shifted log-sum-exp in f64. Every loss and perplexity
/// number flows through this single code path so they stay mutually
/// consistent.
pub fn row_nll(row: &[f32], target: usize) -> Result<f64> {
    if target >= row.len() {
        return Err(CoreError::data(format!(
            "target id {target} out of range for vocab {}",
            row.len()
        )));
    }
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !max.is_finite() {
        return Err(CoreError::non_finite("logits passed to row_nll"));
    }
    let mut denom = 0.0f64;
    for &l in row {
        denom += ((l - max) as f64).exp();
    }
    Ok(denom.ln() + max as f64 - row[target] as f64)
}

/// Per-row negative log-likelihood of the target class, given raw logits.
pub fn per_row_nll(logits: &Tensor, targets: &[u32]) -> Result<Vec<f64>> {
    if logits.rank() != 2 {
        return Err(CoreError::shape("per_row_nll requires a matrix"));
    }
    let r = logits.rows();
    if targets.len() != r {
        return Err(CoreError::shape(format!(
            "target count {} does not match row count {r}",
            targets.len()
        )));
    }
    let mut out = Vec::with_capacity(r);
    for i in 0..r {
        out.push(row_nll(logits.row(i), targets[i] as usize)?);
    }
    Ok(out)
}

/// Mean next-token cross entropy over rows of a logit matrix.
pub fn cross_entropy_mean(logits: &Tensor, targets: &[u32]) -> Result<f64> {
    let nll = per_row_nll(logits, targets)?;
    if nll.is_empty() {
        return Err(CoreError::shape("cross_entropy_mean over zero rows"));
    }
    Ok(nll.iter().sum::<f64>() / nll.len() as f64)
}

/// Noise tensor drawn element-by-element from the stream, in row-major order.
/// The result is a pure function of the stream state at entry.
pub fn sample_perturbation(
    rng: &mut RngStream,
    shape: &[usize],
    distribution: Distribution,
) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.next_from(distribution) as f32).collect();
    Tensor { shape: shape.to_vec(), data }
}

/// Index of the row maximum; ties resolve to the lower index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    let mut best_v = f32::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}
