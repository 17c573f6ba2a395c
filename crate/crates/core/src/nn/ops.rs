//! Forward and backward rules for every operation the rankers use.
//!
//! Backward functions accumulate (`+=`) into caller-provided gradient
//! slices so that a model can route them straight into its gradient buffers.

use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

/// Guard inside `ln(K + eps)` of kernel pooling.
pub const KERNEL_LOG_EPSILON: f64 = 1e-10;

fn check_mask(mask: &[bool], len: usize, what: &str) -> Result<()> {
    if mask.len() == len {
        Ok(())
    } else {
        Err(Error::Shape(format!("{what} mask has {} entries for {len} positions", mask.len())))
    }
}

// ---------------------------------------------------------------------------
// Cosine match matrix

/// Values cached by [`cosine_match_matrix`] for the backward pass.
#[derive(Debug, Clone)]
pub struct CosineCache<T> {
    q_unit: Vec<T>,
    d_unit: Vec<T>,
    q_norm: Vec<T>,
    d_norm: Vec<T>,
    dim: usize,
}

fn unit_rows<T: Real>(x: &Tensor<T>, mask: &[bool]) -> (Vec<T>, Vec<T>) {
    let (rows, dim) = (x.shape()[0], x.shape()[1]);
    let mut unit = vec![T::zero(); rows * dim];
    let mut norms = vec![T::zero(); rows];
    for r in 0..rows {
        if !mask[r] {
            continue;
        }
        let row = x.row(r);
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm > T::zero() {
            norms[r] = norm;
            for (u, &v) in unit[r * dim..(r + 1) * dim].iter_mut().zip(row) {
                *u = v / norm;
            }
        }
    }
    (unit, norms)
}

/// `M[i,j] = cos(q_i, d_j)`; masked positions and zero vectors give exactly 0.
pub fn cosine_match_matrix<T: Real>(
    q: &Tensor<T>,
    d: &Tensor<T>,
    q_mask: &[bool],
    d_mask: &[bool],
) -> Result<(Tensor<T>, CosineCache<T>)> {
    let (n, dim) = q.dims2()?;
    let (m, d_dim) = d.dims2()?;
    if dim != d_dim {
        return Err(Error::Shape(format!("query dim {dim} != document dim {d_dim}")));
    }
    check_mask(q_mask, n, "query")?;
    check_mask(d_mask, m, "document")?;
    let (q_unit, q_norm) = unit_rows(q, q_mask);
    let (d_unit, d_norm) = unit_rows(d, d_mask);
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        if q_norm[i] == T::zero() {
            continue;
        }
        let qi = &q_unit[i * dim..(i + 1) * dim];
        for j in 0..m {
            if d_norm[j] == T::zero() {
                continue;
            }
            let dj = &d_unit[j * dim..(j + 1) * dim];
            out[i * m + j] = qi.iter().zip(dj).map(|(&a, &b)| a * b).sum();
        }
    }
    let matrix = Tensor::new(&[n, m], out)?;
    Ok((
        matrix,
        CosineCache {
            q_unit,
            d_unit,
            q_norm,
            d_norm,
            dim,
        },
    ))
}

impl<T: Real> CosineCache<T> {
    /// Accumulates dL/dQ and dL/dD given dL/dM and the forward output.
    pub fn backward(&self, matrix: &Tensor<T>, grad: &Tensor<T>, grad_q: &mut [T], grad_d: &mut [T]) {
        let n = self.q_norm.len();
        let m = self.d_norm.len();
        let dim = self.dim;
        let (mv, g) = (matrix.data(), grad.data());
        // dcos/dq = (d̂ - cos·q̂) / |q|
        for i in 0..n {
            if self.q_norm[i] == T::zero() {
                continue;
            }
            let qi = &self.q_unit[i * dim..(i + 1) * dim];
            let gi = &mut grad_q[i * dim..(i + 1) * dim];
            let inv = T::one() / self.q_norm[i];
            for j in 0..m {
                let gij = g[i * m + j];
                if self.d_norm[j] == T::zero() || gij == T::zero() {
                    continue;
                }
                let dj = &self.d_unit[j * dim..(j + 1) * dim];
                let c = mv[i * m + j];
                for ((out, &a), &b) in gi.iter_mut().zip(dj).zip(qi) {
                    *out += gij * (a - c * b) * inv;
                }
            }
        }
        for j in 0..m {
            if self.d_norm[j] == T::zero() {
                continue;
            }
            let dj = &self.d_unit[j * dim..(j + 1) * dim];
            let gj = &mut grad_d[j * dim..(j + 1) * dim];
            let inv = T::one() / self.d_norm[j];
            for i in 0..n {
                let gij = g[i * m + j];
                if self.q_norm[i] == T::zero() || gij == T::zero() {
                    continue;
                }
                let qi = &self.q_unit[i * dim..(i + 1) * dim];
                let c = mv[i * m + j];
                for ((out, &a), &b) in gj.iter_mut().zip(qi).zip(dj) {
                    *out += gij * (a - c * b) * inv;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Gaussian kernel pooling

/// Means and widths of the RBF kernels used for soft-match histograms.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KernelBank {
    means: Vec<f64>,
    widths: Vec<f64>,
}

impl KernelBank {
    pub fn new(means: Vec<f64>, widths: Vec<f64>) -> Result<Self> {
        if means.is_empty() || means.len() != widths.len() {
            return Err(Error::InvalidArgument(format!(
                "kernel bank needs matching non-empty means/widths, got {} and {}",
                means.len(),
                widths.len()
            )));
        }
        if widths.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("kernel widths must be positive".into()));
        }
        if means.iter().filter(|&&mu| mu == 1.0).count() != 1 {
            return Err(Error::InvalidArgument(
                "kernel bank needs exactly one exact-match kernel (mean 1.0)".into(),
            ));
        }
        Ok(KernelBank { means, widths })
    }

    /// Ten soft kernels at -0.9, -0.7, ..., 0.9 plus the exact-match kernel
    /// at 1.0, all of width `sigma`, except the exact-match one which uses
    /// `exact_sigma`.
    pub fn knrm(sigma: f64, exact_sigma: f64) -> Result<Self> {
        let mut means: Vec<f64> = (0..10).map(|i| -0.9 + 0.2 * f64::from(i)).collect();
        // -0.9 + 0.2 * i accumulates rounding error; pin the grid to 1 decimal.
        means.iter_mut().for_each(|m| *m = (*m * 10.0).round() / 10.0);
        means.push(1.0);
        let mut widths = vec![sigma; 10];
        widths.push(exact_sigma);
        KernelBank::new(means, widths)
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}

impl Default for KernelBank {
    fn default() -> Self {
        KernelBank::knrm(0.1, 0.1).expect("static kernel layout")
    }
}

/// Per-query-row kernel sums cached by [`gaussian_kernel_pool`].
#[derive(Debug, Clone)]
pub struct KernelPoolCache<T> {
    sums: Vec<T>,
    kernels: usize,
    q_mask: Vec<bool>,
    d_mask: Vec<bool>,
}

impl<T: Real> KernelPoolCache<T> {
    /// `K_k(i)` laid out as `n × kernels`.
    pub fn activations(&self) -> &[T] {
        &self.sums
    }
}

/// Kernel features `φ_k = Σ_i ln(Σ_j exp(-(M_ij - μ_k)² / 2σ_k²) + ε)` over
/// unmasked rows and columns.
pub fn gaussian_kernel_pool<T: Real>(
    matrix: &Tensor<T>,
    bank: &KernelBank,
    q_mask: &[bool],
    d_mask: &[bool],
) -> Result<(Vec<T>, KernelPoolCache<T>)> {
    let (n, m) = matrix.dims2()?;
    check_mask(q_mask, n, "query")?;
    check_mask(d_mask, m, "document")?;
    if !q_mask.iter().any(|&v| v) {
        return Err(Error::InvalidArgument("kernel pooling over an all-masked query".into()));
    }
    let k = bank.len();
    let eps = T::lit(KERNEL_LOG_EPSILON);
    let mus: Vec<T> = bank.means.iter().map(|&v| T::lit(v)).collect();
    let inv_two_var: Vec<T> = bank
        .widths
        .iter()
        .map(|&s| T::lit(1.0 / (2.0 * s * s)))
        .collect();
    let mut sums = vec![T::zero(); n * k];
    let mut features = vec![T::zero(); k];
    for i in (0..n).filter(|&i| q_mask[i]) {
        let row = matrix.row(i);
        let s = &mut sums[i * k..(i + 1) * k];
        for (j, &v) in row.iter().enumerate() {
            if !d_mask[j] {
                continue;
            }
            for kk in 0..k {
                let diff = v - mus[kk];
                s[kk] += (-(diff * diff) * inv_two_var[kk]).exp();
            }
        }
        for kk in 0..k {
            features[kk] += (s[kk] + eps).ln();
        }
    }
    Ok((
        features,
        KernelPoolCache {
            sums,
            kernels: k,
            q_mask: q_mask.to_vec(),
            d_mask: d_mask.to_vec(),
        },
    ))
}

impl<T: Real> KernelPoolCache<T> {
    /// Accumulates dL/dM given dL/dφ.
    pub fn backward(&self, matrix: &Tensor<T>, bank: &KernelBank, grad_features: &[T], grad_matrix: &mut [T]) {
        let k = self.kernels;
        let m = self.d_mask.len();
        let eps = T::lit(KERNEL_LOG_EPSILON);
        let mus: Vec<T> = bank.means.iter().map(|&v| T::lit(v)).collect();
        let inv_var: Vec<T> = bank.widths.iter().map(|&s| T::lit(1.0 / (s * s))).collect();
        let half = T::lit(0.5);
        for (i, _) in self.q_mask.iter().enumerate().filter(|(_, &v)| v) {
            // g_k / (K_k(i) + eps)
            let scale: Vec<T> = (0..k)
                .map(|kk| grad_features[kk] / (self.sums[i * k + kk] + eps))
                .collect();
            let row = matrix.row(i);
            for j in (0..m).filter(|&j| self.d_mask[j]) {
                let v = row[j];
                let mut acc = T::zero();
                for kk in 0..k {
                    let diff = v - mus[kk];
                    let e = (-(diff * diff) * inv_var[kk] * half).exp();
                    acc -= scale[kk] * e * diff * inv_var[kk];
                }
                grad_matrix[i * m + j] += acc;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Convolutions

/// 1-D convolution over a `seq × in` sequence with `width × in × out`
/// filters. Output position `p` reads the window `[p, p + width)`; positions
/// past the end are zero, so the output keeps the input length.
pub fn conv1d<T: Real>(x: &Tensor<T>, filters: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (seq, cin) = x.dims2()?;
    let (width, f_in, cout) = filters.dims3()?;
    if f_in != cin || bias.len() != cout {
        return Err(Error::Shape(format!(
            "conv1d: input channels {cin}, filters {:?}, bias {}",
            filters.shape(),
            bias.len()
        )));
    }
    let (xv, w, b) = (x.data(), filters.data(), bias.data());
    let mut out = vec![T::zero(); seq * cout];
    for p in 0..seq {
        let o = &mut out[p * cout..(p + 1) * cout];
        o.copy_from_slice(b);
        for off in 0..width.min(seq - p) {
            let xrow = &xv[(p + off) * cin..(p + off + 1) * cin];
            for (ci, &xval) in xrow.iter().enumerate() {
                if xval == T::zero() {
                    continue;
                }
                let wrow = &w[(off * cin + ci) * cout..(off * cin + ci + 1) * cout];
                for (acc, &wv) in o.iter_mut().zip(wrow) {
                    *acc += xval * wv;
                }
            }
        }
    }
    Tensor::new(&[seq, cout], out)
}

pub fn conv1d_backward<T: Real>(
    x: &Tensor<T>,
    filters: &Tensor<T>,
    grad_out: &Tensor<T>,
    mut grad_x: Option<&mut [T]>,
    grad_filters: &mut [T],
    grad_bias: &mut [T],
) {
    let (seq, cin) = (x.shape()[0], x.shape()[1]);
    let (width, cout) = (filters.shape()[0], filters.shape()[2]);
    let (xv, w, g) = (x.data(), filters.data(), grad_out.data());
    for p in 0..seq {
        let gp = &g[p * cout..(p + 1) * cout];
        for (gb, &gv) in grad_bias.iter_mut().zip(gp) {
            *gb += gv;
        }
        for off in 0..width.min(seq - p) {
            for ci in 0..cin {
                let base = (off * cin + ci) * cout;
                let xval = xv[(p + off) * cin + ci];
                let gw = &mut grad_filters[base..base + cout];
                for (acc, &gv) in gw.iter_mut().zip(gp) {
                    *acc += xval * gv;
                }
                if let Some(gx) = grad_x.as_deref_mut() {
                    let wrow = &w[base..base + cout];
                    gx[(p + off) * cin + ci] += wrow.iter().zip(gp).map(|(&a, &b)| a * b).sum::<T>();
                }
            }
        }
    }
}

/// Same-size 2-D convolution of an `h × w × in` map with `k × k × in × out`
/// filters (k odd), zero padding of `k / 2` on every side.
pub fn conv2d<T: Real>(x: &Tensor<T>, filters: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, cin) = x.dims3()?;
    let (k, k2, f_in, cout) = match filters.shape()[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => return Err(Error::Shape(format!("conv2d filters {:?}", filters.shape()))),
    };
    if k != k2 || k % 2 == 0 || f_in != cin || bias.len() != cout {
        return Err(Error::Shape(format!(
            "conv2d: input {:?}, filters {:?}, bias {}",
            x.shape(),
            filters.shape(),
            bias.len()
        )));
    }
    let pad = k / 2;
    let (xv, fw, b) = (x.data(), filters.data(), bias.data());
    let mut out = vec![T::zero(); h * w * cout];
    for r in 0..h {
        for c in 0..w {
            let o = &mut out[(r * w + c) * cout..(r * w + c + 1) * cout];
            o.copy_from_slice(b);
            for kr in 0..k {
                let Some(rr) = (r + kr).checked_sub(pad).filter(|&v| v < h) else {
                    continue;
                };
                for kc in 0..k {
                    let Some(cc) = (c + kc).checked_sub(pad).filter(|&v| v < w) else {
                        continue;
                    };
                    let xin = &xv[(rr * w + cc) * cin..(rr * w + cc + 1) * cin];
                    for (ci, &xval) in xin.iter().enumerate() {
                        if xval == T::zero() {
                            continue;
                        }
                        let base = ((kr * k + kc) * cin + ci) * cout;
                        for (acc, &wv) in o.iter_mut().zip(&fw[base..base + cout]) {
                            *acc += xval * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[h, w, cout], out)
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    filters: &Tensor<T>,
    grad_out: &Tensor<T>,
    mut grad_x: Option<&mut [T]>,
    grad_filters: &mut [T],
    grad_bias: &mut [T],
) {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (k, cout) = (filters.shape()[0], filters.shape()[3]);
    let pad = k / 2;
    let (xv, fw, g) = (x.data(), filters.data(), grad_out.data());
    for r in 0..h {
        for c in 0..w {
            let gp = &g[(r * w + c) * cout..(r * w + c + 1) * cout];
            for (gb, &gv) in grad_bias.iter_mut().zip(gp) {
                *gb += gv;
            }
            for kr in 0..k {
                let Some(rr) = (r + kr).checked_sub(pad).filter(|&v| v < h) else {
                    continue;
                };
                for kc in 0..k {
                    let Some(cc) = (c + kc).checked_sub(pad).filter(|&v| v < w) else {
                        continue;
                    };
                    for ci in 0..cin {
                        let xi = (rr * w + cc) * cin + ci;
                        let base = ((kr * k + kc) * cin + ci) * cout;
                        let xval = xv[xi];
                        for (acc, &gv) in grad_filters[base..base + cout].iter_mut().zip(gp) {
                            *acc += xval * gv;
                        }
                        if let Some(gx) = grad_x.as_deref_mut() {
                            gx[xi] += fw[base..base + cout]
                                .iter()
                                .zip(gp)
                                .map(|(&a, &b)| a * b)
                                .sum::<T>();
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Dynamic max pooling

/// Half-open range of input indices pooled into output cell `i`.
///
/// Boundaries sit at `round(i * size / out)`; when `size < out` the range is
/// clamped to a single (repeated) input index.
pub fn pool_bounds(size: usize, out: usize, i: usize) -> (usize, usize) {
    let round_div = |a: usize| (2 * a + out) / (2 * out);
    let start = round_div(i * size).min(size - 1);
    let end = round_div((i + 1) * size).max(start + 1).min(size);
    (start, end)
}

/// Argmax positions recorded by [`dynamic_max_pool`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaxPoolCache {
    argmax: Vec<usize>,
    input_len: usize,
}

impl MaxPoolCache {
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }

    pub fn backward<T: Real>(&self, grad_out: &[T], grad_x: &mut [T]) {
        debug_assert_eq!(grad_x.len(), self.input_len);
        for (&src, &g) in self.argmax.iter().zip(grad_out) {
            grad_x[src] += g;
        }
    }
}

/// Pools an `h × w × c` map onto an `out_h × out_w` grid by per-region,
/// per-channel max. Ties go to the first position in row-major order.
pub fn dynamic_max_pool<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<(Tensor<T>, MaxPoolCache)> {
    let (h, w, c) = x.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("pooling grid must be at least 1x1".into()));
    }
    if h == 0 || w == 0 {
        return Err(Error::Shape("cannot pool an empty map".into()));
    }
    let xv = x.data();
    let mut out = vec![T::zero(); out_h * out_w * c];
    let mut argmax = vec![0usize; out_h * out_w * c];
    for oi in 0..out_h {
        let (r0, r1) = pool_bounds(h, out_h, oi);
        for oj in 0..out_w {
            let (c0, c1) = pool_bounds(w, out_w, oj);
            for ch in 0..c {
                let mut best = (r0 * w + c0) * c + ch;
                for r in r0..r1 {
                    for col in c0..c1 {
                        let idx = (r * w + col) * c + ch;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                }
                let o = (oi * out_w + oj) * c + ch;
                out[o] = xv[best];
                argmax[o] = best;
            }
        }
    }
    Ok((
        Tensor::new(&[out_h, out_w, c], out)?,
        MaxPoolCache {
            argmax,
            input_len: xv.len(),
        },
    ))
}

// ---------------------------------------------------------------------------
// Dense layers and activations

/// `rows × in` times `in × out` plus bias.
pub fn linear<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, fan_in) = x.dims2()?;
    let (w_in, fan_out) = weight.dims2()?;
    if w_in != fan_in || bias.len() != fan_out {
        return Err(Error::Shape(format!(
            "linear: input {:?}, weight {:?}, bias {}",
            x.shape(),
            weight.shape(),
            bias.len()
        )));
    }
    let w = weight.data();
    let mut out = Vec::with_capacity(rows * fan_out);
    for r in 0..rows {
        let mut o = bias.data().to_vec();
        for (i, &xv) in x.row(r).iter().enumerate() {
            for (acc, &wv) in o.iter_mut().zip(&w[i * fan_out..(i + 1) * fan_out]) {
                *acc += xv * wv;
            }
        }
        out.extend(o);
    }
    Tensor::new(&[rows, fan_out], out)
}

pub fn linear_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    mut grad_x: Option<&mut [T]>,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
) {
    let (rows, fan_in) = (x.shape()[0], x.shape()[1]);
    let fan_out = weight.shape()[1];
    let w = weight.data();
    for r in 0..rows {
        let g = grad_out.row(r);
        for (gb, &gv) in grad_bias.iter_mut().zip(g) {
            *gb += gv;
        }
        for (i, &xv) in x.row(r).iter().enumerate() {
            let wrow = &w[i * fan_out..(i + 1) * fan_out];
            for (acc, &gv) in grad_weight[i * fan_out..(i + 1) * fan_out].iter_mut().zip(g) {
                *acc += xv * gv;
            }
            if let Some(gx) = grad_x.as_deref_mut() {
                gx[r * fan_in + i] += wrow.iter().zip(g).map(|(&a, &b)| a * b).sum::<T>();
            }
        }
    }
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
    y
}

/// Gradient of relu given its output; zero where the output is zero.
pub fn relu_backward<T: Real>(output: &Tensor<T>, grad_out: &[T], grad_x: &mut [T]) {
    for ((gx, &g), &y) in grad_x.iter_mut().zip(grad_out).zip(output.data()) {
        if y > T::zero() {
            *gx += g;
        }
    }
}

pub fn tanh<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.tanh());
    y
}

pub fn tanh_backward<T: Real>(output: &Tensor<T>, grad_out: &[T], grad_x: &mut [T]) {
    for ((gx, &g), &y) in grad_x.iter_mut().zip(grad_out).zip(output.data()) {
        *gx += g * (T::one() - y * y);
    }
}

// ---------------------------------------------------------------------------
// Loss

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginLoss<T> {
    pub loss: T,
    pub grad_pos: T,
    pub grad_neg: T,
}

/// `max(0, margin - (s_pos - s_neg))`.
pub fn margin_ranking_loss<T: Real>(s_pos: T, s_neg: T, margin: T) -> MarginLoss<T> {
    let slack = margin - (s_pos - s_neg);
    if slack > T::zero() {
        MarginLoss {
            loss: slack,
            grad_pos: -T::one(),
            grad_neg: T::one(),
        }
    } else {
        MarginLoss {
            loss: T::zero(),
            grad_pos: T::zero(),
            grad_neg: T::zero(),
        }
    }
}
