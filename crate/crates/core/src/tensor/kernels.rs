//! Raw numeric kernels behind the tape ops.
//!
//! Everything here is sequential with a fixed accumulation order, so results
//! are bit-identical run to run. The 2-D matmul delegates to `matrixmultiply`;
//! small batched products are hand loops.

use super::Element;

// ── matmul ───────────────────────────────────────────────────────────

/// C[m,n] = A[m,k] · B[k,n], both row-major contiguous.
pub fn matmul<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * n];
    E::gemm(m, k, n, a, k as isize, 1, b, n as isize, 1, E::zero(), &mut c);
    c
}

/// dA += dC[m,n] · Bᵀ (B stored [k,n]); accumulates into `da` ([m,k]).
pub fn matmul_grad_a<E: Element>(dc: &[E], b: &[E], m: usize, k: usize, n: usize, da: &mut [E]) {
    E::gemm(m, n, k, dc, n as isize, 1, b, 1, n as isize, E::one(), da);
}

/// dB += Aᵀ · dC[m,n] (A stored [m,k]); accumulates into `db` ([k,n]).
pub fn matmul_grad_b<E: Element>(a: &[E], dc: &[E], m: usize, k: usize, n: usize, db: &mut [E]) {
    E::gemm(k, m, n, a, 1, k as isize, dc, n as isize, 1, E::one(), db);
}

// ── batched matmul (small matrices; attention, autocorrelation) ──────

/// C[b,m,n] = A[b,m,k] · B[b,k,n].
pub fn bmm<E: Element>(a: &[E], b: &[E], batches: usize, m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); batches * m * n];
    for bi in 0..batches {
        let a_s = &a[bi * m * k..(bi + 1) * m * k];
        let b_s = &b[bi * k * n..(bi + 1) * k * n];
        let c_s = &mut c[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let c_row = &mut c_s[i * n..i * n + n];
            for p in 0..k {
                let aip = a_s[i * k + p];
                let b_row = &b_s[p * n..p * n + n];
                for j in 0..n {
                    c_row[j] = c_row[j] + aip * b_row[j];
                }
            }
        }
    }
    c
}

/// dA += dC · Bᵀ per batch; accumulates into `da` ([b,m,k]).
pub fn bmm_grad_a<E: Element>(
    dc: &[E],
    b: &[E],
    batches: usize,
    m: usize,
    k: usize,
    n: usize,
    da: &mut [E],
) {
    for bi in 0..batches {
        let dc_s = &dc[bi * m * n..(bi + 1) * m * n];
        let b_s = &b[bi * k * n..(bi + 1) * k * n];
        let da_s = &mut da[bi * m * k..(bi + 1) * m * k];
        for i in 0..m {
            let dc_row = &dc_s[i * n..i * n + n];
            for p in 0..k {
                let b_row = &b_s[p * n..p * n + n];
                let mut acc = E::zero();
                for j in 0..n {
                    acc = acc + dc_row[j] * b_row[j];
                }
                da_s[i * k + p] = da_s[i * k + p] + acc;
            }
        }
    }
}

/// dB += Aᵀ · dC per batch; accumulates into `db` ([b,k,n]).
pub fn bmm_grad_b<E: Element>(
    a: &[E],
    dc: &[E],
    batches: usize,
    m: usize,
    k: usize,
    n: usize,
    db: &mut [E],
) {
    for bi in 0..batches {
        let a_s = &a[bi * m * k..(bi + 1) * m * k];
        let dc_s = &dc[bi * m * n..(bi + 1) * m * n];
        let db_s = &mut db[bi * k * n..(bi + 1) * k * n];
        for i in 0..m {
            let dc_row = &dc_s[i * n..i * n + n];
            for p in 0..k {
                let aip = a_s[i * k + p];
                let db_row = &mut db_s[p * n..p * n + n];
                for j in 0..n {
                    db_row[j] = db_row[j] + aip * dc_row[j];
                }
            }
        }
    }
}

// ── conv2d (cross-correlation convention) ────────────────────────────

pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn compute(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Option<ConvDims> {
        let (&[batch, c_in, h, w], &[c_out, wc_in, kh, kw]) = (
            x_shape.try_into().ok()?,
            w_shape.try_into().ok()?,
        );
        if wc_in != c_in || stride == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
            return None;
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Some(ConvDims {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }
}

pub fn conv2d<E: Element>(x: &[E], weight: &[E], bias: &[E], d: &ConvDims) -> Vec<E> {
    let mut out = vec![E::zero(); d.batch * d.c_out * d.oh * d.ow];
    for b in 0..d.batch {
        for o in 0..d.c_out {
            for oy in 0..d.oh {
                for ox in 0..d.ow {
                    let mut acc = bias[o];
                    for ci in 0..d.c_in {
                        for dy in 0..d.kh {
                            let iy = (oy * d.stride + dy) as isize - d.pad as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            for dx in 0..d.kw {
                                let ix = (ox * d.stride + dx) as isize - d.pad as isize;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                let xv = x[((b * d.c_in + ci) * d.h + iy as usize) * d.w
                                    + ix as usize];
                                let wv = weight[((o * d.c_in + ci) * d.kh + dy) * d.kw + dx];
                                acc = acc + xv * wv;
                            }
                        }
                    }
                    out[((b * d.c_out + o) * d.oh + oy) * d.ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Accumulates dx, dw, db from the upstream gradient.
pub fn conv2d_backward<E: Element>(
    x: &[E],
    weight: &[E],
    dy: &[E],
    d: &ConvDims,
    dx: &mut [E],
    dw: &mut [E],
    db: &mut [E],
) {
    for b in 0..d.batch {
        for o in 0..d.c_out {
            for oy in 0..d.oh {
                for ox in 0..d.ow {
                    let g = dy[((b * d.c_out + o) * d.oh + oy) * d.ow + ox];
                    db[o] = db[o] + g;
                    for ci in 0..d.c_in {
                        for dyk in 0..d.kh {
                            let iy = (oy * d.stride + dyk) as isize - d.pad as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            for dxk in 0..d.kw {
                                let ix = (ox * d.stride + dxk) as isize - d.pad as isize;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                let xi = ((b * d.c_in + ci) * d.h + iy as usize) * d.w
                                    + ix as usize;
                                let wi = ((o * d.c_in + ci) * d.kh + dyk) * d.kw + dxk;
                                dx[xi] = dx[xi] + g * weight[wi];
                                dw[wi] = dw[wi] + g * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
}

// ── reductions over one axis ─────────────────────────────────────────

/// Shape [outer, len, inner] decomposition of `shape` around `axis`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

pub fn sum_axis<E: Element>(x: &[E], outer: usize, len: usize, inner: usize) -> Vec<E> {
    let mut out = vec![E::zero(); outer * inner];
    for o in 0..outer {
        for l in 0..len {
            let base = (o * len + l) * inner;
            let dst = &mut out[o * inner..(o + 1) * inner];
            for i in 0..inner {
                dst[i] = dst[i] + x[base + i];
            }
        }
    }
    out
}

/// Max over one axis; also records the winning index per output slot.
pub fn max_axis<E: Element>(
    x: &[E],
    outer: usize,
    len: usize,
    inner: usize,
) -> (Vec<E>, Vec<usize>) {
    let mut out = vec![E::neg_infinity(); outer * inner];
    let mut arg = vec![0usize; outer * inner];
    for o in 0..outer {
        for l in 0..len {
            let base = (o * len + l) * inner;
            for i in 0..inner {
                let v = x[base + i];
                let slot = o * inner + i;
                if v > out[slot] {
                    out[slot] = v;
                    arg[slot] = l;
                }
            }
        }
    }
    (out, arg)
}

// ── rows ops (last axis) ─────────────────────────────────────────────

pub fn softmax_rows<E: Element>(x: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::zero(); rows * cols];
    for r in 0..rows {
        let xi = &x[r * cols..(r + 1) * cols];
        let oi = &mut out[r * cols..(r + 1) * cols];
        let mut m = E::neg_infinity();
        for &v in xi {
            if v > m {
                m = v;
            }
        }
        let mut s = E::zero();
        for (o, &v) in oi.iter_mut().zip(xi) {
            *o = (v - m).exp_hot();
            s = s + *o;
        }
        for o in oi.iter_mut() {
            *o = *o / s;
        }
    }
    out
}

/// dx for softmax: y ⊙ (dy − Σ y⊙dy), per row.
pub fn softmax_backward<E: Element>(y: &[E], dy: &[E], rows: usize, cols: usize, dx: &mut [E]) {
    for r in 0..rows {
        let yr = &y[r * cols..(r + 1) * cols];
        let dyr = &dy[r * cols..(r + 1) * cols];
        let mut dot = E::zero();
        for j in 0..cols {
            dot = dot + yr[j] * dyr[j];
        }
        let dxr = &mut dx[r * cols..(r + 1) * cols];
        for j in 0..cols {
            dxr[j] = dxr[j] + yr[j] * (dyr[j] - dot);
        }
    }
}

/// Per-row normalization to zero mean, unit variance (no affine part).
pub fn layernorm_rows<E: Element>(x: &[E], rows: usize, cols: usize, eps: E) -> Vec<E> {
    let n = E::from_f64(cols as f64);
    let mut out = vec![E::zero(); rows * cols];
    for r in 0..rows {
        let xi = &x[r * cols..(r + 1) * cols];
        let mut mean = E::zero();
        for &v in xi {
            mean = mean + v;
        }
        mean = mean / n;
        let mut var = E::zero();
        for &v in xi {
            let d = v - mean;
            var = var + d * d;
        }
        var = var / n;
        let inv = (var + eps).sqrt().recip();
        let oi = &mut out[r * cols..(r + 1) * cols];
        for (o, &v) in oi.iter_mut().zip(xi) {
            *o = (v - mean) * inv;
        }
    }
    out
}

/// dx for layernorm: (dy − mean(dy) − y·mean(dy⊙y)) / √(var+eps), per row.
pub fn layernorm_backward<E: Element>(
    x: &[E],
    y: &[E],
    dy: &[E],
    rows: usize,
    cols: usize,
    eps: E,
    dx: &mut [E],
) {
    let n = E::from_f64(cols as f64);
    for r in 0..rows {
        let xi = &x[r * cols..(r + 1) * cols];
        let yr = &y[r * cols..(r + 1) * cols];
        let dyr = &dy[r * cols..(r + 1) * cols];
        let mut mean = E::zero();
        for &v in xi {
            mean = mean + v;
        }
        mean = mean / n;
        let mut var = E::zero();
        for &v in xi {
            let d = v - mean;
            var = var + d * d;
        }
        var = var / n;
        let inv = (var + eps).sqrt().recip();
        let mut m_dy = E::zero();
        let mut m_dyy = E::zero();
        for j in 0..cols {
            m_dy = m_dy + dyr[j];
            m_dyy = m_dyy + dyr[j] * yr[j];
        }
        m_dy = m_dy / n;
        m_dyy = m_dyy / n;
        let dxr = &mut dx[r * cols..(r + 1) * cols];
        for j in 0..cols {
            dxr[j] = dxr[j] + (dyr[j] - m_dy - yr[j] * m_dyy) * inv;
        }
    }
}

// ── activations ──────────────────────────────────────────────────────

#[inline]
pub fn sigmoid<E: Element>(x: E) -> E {
    let e = (-x.abs()).exp_hot();
    let p = (E::one() + e).recip();
    if x >= E::zero() {
        p
    } else {
        E::one() - p
    }
}

#[inline]
pub fn silu<E: Element>(x: E) -> E {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<E: Element>(x: E) -> E {
    let s = sigmoid(x);
    s * (E::one() + x * (E::one() - s))
}

/// tanh approximation of gelu.
#[inline]
pub fn gelu_tanh<E: Element>(x: E) -> E {
    let c = E::from_f64(0.7978845608028654); // sqrt(2/pi)
    let k = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    half * x * (E::one() + (c * (x + k * x * x * x)).tanh_hot())
}

#[inline]
pub fn gelu_tanh_grad<E: Element>(x: E) -> E {
    let c = E::from_f64(0.7978845608028654);
    let k = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh_hot();
    half * (E::one() + t) + half * x * (E::one() - t * t) * c * (E::one() + three * k * x * x)
}

/// Overflow-safe ln(1 + eˣ).
#[inline]
pub fn softplus<E: Element>(x: E) -> E {
    x.max(E::zero()) + (-(x.abs())).exp().ln_1p()
}

// ── broadcast index mapping ──────────────────────────────────────────

/// True when `small` (right-aligned) can broadcast to `big`: every axis is
/// equal or 1, and missing leading axes are implied.
pub fn broadcastable(small: &[usize], big: &[usize]) -> bool {
    if small.len() > big.len() {
        return false;
    }
    let off = big.len() - small.len();
    small
        .iter()
        .zip(&big[off..])
        .all(|(&s, &b)| s == b || s == 1)
}

/// Iteration plan for one broadcast operand against a contiguous output.
///
/// The trailing axes form the inner run: either a contiguous small-side row
/// (`scalar == false`) or a constant small-side element (`scalar == true`).
/// The leading axes are walked by an odometer that maintains the small-side
/// base offset, so no per-element index arithmetic happens.
pub struct BroadcastPlan {
    pub inner: usize,
    pub scalar: bool,
    outer_shape: Vec<usize>,
    small_strides: Vec<usize>,
    pub outer_len: usize,
}

impl BroadcastPlan {
    pub fn new(small: &[usize], out: &[usize]) -> BroadcastPlan {
        debug_assert!(broadcastable(small, out));
        let ndim = out.len();
        let off = ndim - small.len();
        // right-aligned small dims, 1-padded on the left
        let dim = |d: usize| if d < off { 1 } else { small[d - off] };
        // trailing vector run: small matches out exactly
        let mut vec_run = 1usize;
        let mut vec_dims = 0usize;
        for d in (0..ndim).rev() {
            if dim(d) == out[d] && out[d] != 1 {
                vec_run *= out[d];
                vec_dims += 1;
            } else if out[d] == 1 {
                vec_dims += 1;
            } else {
                break;
            }
        }
        // trailing scalar run: small is 1 while out extends
        let mut sc_run = 1usize;
        let mut sc_dims = 0usize;
        for d in (0..ndim).rev() {
            if dim(d) == 1 {
                sc_run *= out[d];
                sc_dims += 1;
            } else {
                break;
            }
        }
        let (scalar, inner, split) = if sc_run > vec_run {
            (true, sc_run, ndim - sc_dims)
        } else {
            (false, vec_run, ndim - vec_dims)
        };
        // small-side strides over the outer axes
        let mut small_strides_full = vec![0usize; ndim];
        let mut acc = 1usize;
        for d in (0..ndim).rev() {
            small_strides_full[d] = if dim(d) == 1 { 0 } else { acc };
            if dim(d) != 1 {
                acc *= dim(d);
            }
        }
        let outer_shape: Vec<usize> = out[..split].to_vec();
        let small_strides: Vec<usize> = small_strides_full[..split].to_vec();
        let outer_len: usize = outer_shape.iter().product();
        BroadcastPlan {
            inner,
            scalar,
            outer_shape,
            small_strides,
            outer_len,
        }
    }

    /// Walk outer iterations, yielding the small-side base offset per run.
    #[inline]
    pub fn for_each_outer(&self, mut f: impl FnMut(usize, usize)) {
        let ndim = self.outer_shape.len();
        let mut coords = vec![0usize; ndim];
        let mut base = 0usize;
        for o in 0..self.outer_len {
            f(o, base);
            for d in (0..ndim).rev() {
                coords[d] += 1;
                base += self.small_strides[d];
                if coords[d] < self.outer_shape[d] {
                    break;
                }
                coords[d] = 0;
                base -= self.small_strides[d] * self.outer_shape[d];
            }
        }
    }
}

/// out[i] = f(big[i], small[broadcast(i)]) over the output space.
pub fn bcast_map<E: Element, F: Fn(E, E) -> E>(
    big: &[E],
    small: &[E],
    plan: &BroadcastPlan,
    f: F,
) -> Vec<E> {
    let inner = plan.inner;
    let mut out = vec![E::zero(); big.len()];
    if plan.scalar {
        plan.for_each_outer(|o, sbase| {
            let s = small[sbase];
            let b = &big[o * inner..(o + 1) * inner];
            let dst = &mut out[o * inner..(o + 1) * inner];
            for j in 0..inner {
                dst[j] = f(b[j], s);
            }
        });
    } else {
        plan.for_each_outer(|o, sbase| {
            let s = &small[sbase..sbase + inner];
            let b = &big[o * inner..(o + 1) * inner];
            let dst = &mut out[o * inner..(o + 1) * inner];
            for j in 0..inner {
                dst[j] = f(b[j], s[j]);
            }
        });
    }
    out
}

/// buf_big[i] += f(g[i], big[i], small[broadcast(i)]).
pub fn bcast_acc_big<E: Element, F: Fn(E, E, E) -> E>(
    g: &[E],
    big: &[E],
    small: &[E],
    plan: &BroadcastPlan,
    buf: &mut [E],
    f: F,
) {
    let inner = plan.inner;
    if plan.scalar {
        plan.for_each_outer(|o, sbase| {
            let s = small[sbase];
            let gr = &g[o * inner..(o + 1) * inner];
            let br = &big[o * inner..(o + 1) * inner];
            let dst = &mut buf[o * inner..(o + 1) * inner];
            for j in 0..inner {
                dst[j] = dst[j] + f(gr[j], br[j], s);
            }
        });
    } else {
        plan.for_each_outer(|o, sbase| {
            let s = &small[sbase..sbase + inner];
            let gr = &g[o * inner..(o + 1) * inner];
            let br = &big[o * inner..(o + 1) * inner];
            let dst = &mut buf[o * inner..(o + 1) * inner];
            for j in 0..inner {
                dst[j] = dst[j] + f(gr[j], br[j], s[j]);
            }
        });
    }
}

/// buf_small[broadcast(i)] += f(g[i], big[i], small[broadcast(i)]).
pub fn bcast_fold_small<E: Element, F: Fn(E, E, E) -> E>(
    g: &[E],
    big: &[E],
    small: &[E],
    plan: &BroadcastPlan,
    buf: &mut [E],
    f: F,
) {
    let inner = plan.inner;
    if plan.scalar {
        plan.for_each_outer(|o, sbase| {
            let s = small[sbase];
            let gr = &g[o * inner..(o + 1) * inner];
            let br = &big[o * inner..(o + 1) * inner];
            let mut acc = E::zero();
            for j in 0..inner {
                acc = acc + f(gr[j], br[j], s);
            }
            buf[sbase] = buf[sbase] + acc;
        });
    } else {
        plan.for_each_outer(|o, sbase| {
            let s = &small[sbase..sbase + inner];
            let gr = &g[o * inner..(o + 1) * inner];
            let br = &big[o * inner..(o + 1) * inner];
            let dst = &mut buf[sbase..sbase + inner];
            for j in 0..inner {
                dst[j] = dst[j] + f(gr[j], br[j], s[j]);
            }
        });
    }
}

/// Expand `small`-shaped data to `big` shape (right-aligned broadcast).
pub fn broadcast_expand<E: Element>(data: &[E], small: &[usize], big: &[usize]) -> Vec<E> {
    let numel: usize = big.iter().product();
    let mut out = vec![E::zero(); numel];
    let ndim = big.len();
    let off = ndim - small.len();
    // strides of `small` viewed as `big`-rank, 0 on broadcast axes
    let mut strides = vec![0isize; ndim];
    let mut acc = 1isize;
    for d in (0..small.len()).rev() {
        strides[off + d] = if small[d] == 1 { 0 } else { acc };
        acc *= small[d] as isize;
    }
    let mut coords = vec![0usize; ndim];
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut rem = flat;
        for d in (0..ndim).rev() {
            coords[d] = rem % big[d];
            rem /= big[d];
        }
        let mut src = 0isize;
        for d in 0..ndim {
            src += coords[d] as isize * strides[d];
        }
        *slot = data[src as usize];
    }
    out
}

/// Fold a `big`-shaped gradient back onto `small` (sums broadcast axes).
pub fn broadcast_fold<E: Element>(grad: &[E], small: &[usize], big: &[usize], out: &mut [E]) {
    let ndim = big.len();
    let off = ndim - small.len();
    let mut strides = vec![0isize; ndim];
    let mut acc = 1isize;
    for d in (0..small.len()).rev() {
        strides[off + d] = if small[d] == 1 { 0 } else { acc };
        acc *= small[d] as isize;
    }
    let mut coords = vec![0usize; ndim];
    for (flat, &g) in grad.iter().enumerate() {
        let mut rem = flat;
        for d in (0..ndim).rev() {
            coords[d] = rem % big[d];
            rem /= big[d];
        }
        let mut dst = 0isize;
        for d in 0..ndim {
            dst += coords[d] as isize * strides[d];
        }
        out[dst as usize] = out[dst as usize] + g;
    }
}

// ── permutation (explicit-copy transpose) ────────────────────────────

/// Odometer walk over output coordinates; the source index is maintained
/// incrementally, so there is no per-element division.
pub fn permute<E: Element>(data: &[E], shape: &[usize], perm: &[usize]) -> (Vec<E>, Vec<usize>) {
    let ndim = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; ndim];
    for d in (0..ndim.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel: usize = shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    if ndim == 0 || numel == 0 {
        out.extend_from_slice(data);
        return (out, out_shape);
    }
    // when the innermost output axis is contiguous in the source, copy runs
    if src_strides[ndim - 1] == 1 {
        let run = out_shape[ndim - 1];
        let outer = numel / run.max(1);
        let mut coords = vec![0usize; ndim - 1];
        let mut src = 0usize;
        for _ in 0..outer {
            out.extend_from_slice(&data[src..src + run]);
            for d in (0..ndim - 1).rev() {
                coords[d] += 1;
                src += src_strides[d];
                if coords[d] < out_shape[d] {
                    break;
                }
                coords[d] = 0;
                src -= src_strides[d] * out_shape[d];
            }
        }
        return (out, out_shape);
    }
    let mut coords = vec![0usize; ndim];
    let mut src = 0usize;
    for _ in 0..numel {
        out.push(data[src]);
        for d in (0..ndim).rev() {
            coords[d] += 1;
            src += src_strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            src -= src_strides[d] * out_shape[d];
        }
    }
    (out, out_shape)
}

/// Inverse of `perm`.
pub fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_matches_naive() {
        let a: Vec<f64> = (0..12).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..20).map(|i| (i as f64) * 0.1 - 0.7).collect();
        let c = matmul(&a, &b, 3, 4, 5);
        let r = naive_matmul(&a, &b, 3, 4, 5);
        for (x, y) in c.iter().zip(&r) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn bmm_matches_per_slice_matmul() {
        let a: Vec<f64> = (0..2 * 3 * 4).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..2 * 4 * 2).map(|i| (i as f64).cos()).collect();
        let c = bmm(&a, &b, 2, 3, 4, 2);
        for bi in 0..2 {
            let r = naive_matmul(&a[bi * 12..(bi + 1) * 12], &b[bi * 8..(bi + 1) * 8], 3, 4, 2);
            for (x, y) in c[bi * 6..(bi + 1) * 6].iter().zip(&r) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permute_round_trip() {
        let shape = [2usize, 3, 4];
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let perm = [2usize, 0, 1];
        let (p, pshape) = permute(&data, &shape, &perm);
        assert_eq!(pshape, vec![4, 2, 3]);
        let (back, bshape) = permute(&p, &pshape, &invert_perm(&perm));
        assert_eq!(bshape, shape.to_vec());
        assert_eq!(back, data);
    }

    #[test]
    fn broadcast_expand_fold_agree() {
        // [3] -> [2,3]: expanding then folding an all-ones grad counts copies
        let data = [1.0f64, 2.0, 3.0];
        let big = broadcast_expand(&data, &[3], &[2, 3]);
        assert_eq!(big, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let mut folded = vec![0.0f64; 3];
        broadcast_fold(&vec![1.0f64; 6], &[3], &[2, 3], &mut folded);
        assert_eq!(folded, vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let y = softmax_rows(&[0.3f64, -1.0, 2.0, 0.0, 0.0, 0.0], 2, 3);
        for r in 0..2 {
            let s: f64 = y[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // all-equal row is uniform
        assert!((y[3] - 1.0 / 3.0).abs() < 1e-12);
    }
}
