//! Reverse-mode automatic differentiation over tensor ops.
//!
//! A `Tape` records every operation of one forward pass as a node holding the
//! result value and the op that produced it. `backward` replays the nodes in
//! reverse, accumulating gradients into every grad-enabled leaf, then clears
//! the tape. One training step owns one tape; tapes are not `Send`.

use std::collections::HashMap;

use super::kernels;
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { trainable: bool },
    Matmul { a: usize, b: usize },
    Bmm { a: usize, b: usize },
    Binary { a: usize, b: usize, kind: BinKind },
    Neg { a: usize },
    Scale { a: usize, c: f64 },
    AddScalar { a: usize },
    Reshape { a: usize },
    Permute { a: usize, perm: Vec<usize> },
    SumAxis { a: usize, axis: usize },
    MeanAxis { a: usize, axis: usize },
    MaxAxis { a: usize, axis: usize, arg: Vec<usize> },
    SumAll { a: usize },
    MeanAll { a: usize },
    Unary { a: usize, kind: UnKind },
    ClampMin { a: usize, c: f64 },
    Softmax { a: usize },
    LayerNorm { a: usize },
    Conv2d { x: usize, w: usize, b: usize, stride: usize, pad: usize },
    Gather { table: usize, idx: Vec<usize> },
    SliceLast { a: usize, start: usize, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnKind {
    Silu,
    GeluTanh,
    Sigmoid,
    Log,
    Softplus,
    Sqrt,
}

struct Node<E: Element> {
    value: Tensor<E>,
    op: Op,
    needs_grad: bool,
}

/// Variance epsilon for layernorm.
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Gradients of one backward pass, keyed by trainable leaf.
pub struct Gradients<E: Element> {
    by_var: HashMap<usize, Tensor<E>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.by_var.get(&v.0)
    }

    pub fn len(&self) -> usize {
        self.by_var.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_var.is_empty()
    }
}

#[cfg(feature = "opprof")]
pub mod opprof {
    use std::cell::RefCell;
    use std::collections::HashMap;
    use std::time::{Duration, Instant};

    thread_local! {
        pub static TIMES: RefCell<HashMap<&'static str, (Duration, u64)>> =
            RefCell::new(HashMap::new());
    }

    pub struct Guard {
        name: &'static str,
        start: Instant,
    }

    pub fn enter(name: &'static str) -> Guard {
        Guard {
            name,
            start: Instant::now(),
        }
    }

    impl Drop for Guard {
        fn drop(&mut self) {
            let dt = self.start.elapsed();
            TIMES.with(|t| {
                let mut t = t.borrow_mut();
                let e = t.entry(self.name).or_insert((Duration::ZERO, 0));
                e.0 += dt;
                e.1 += 1;
            });
        }
    }

    pub fn dump_and_reset() {
        TIMES.with(|t| {
            let mut rows: Vec<_> = t.borrow().iter().map(|(k, v)| (*k, *v)).collect();
            rows.sort_by(|a, b| b.1 .0.cmp(&a.1 .0));
            for (name, (dur, count)) in rows {
                println!("  {:>10.3} ms  {:>8} calls  {}", dur.as_secs_f64() * 1e3, count, name);
            }
            t.borrow_mut().clear();
        });
    }
}

macro_rules! prof {
    ($name:literal) => {
        #[cfg(feature = "opprof")]
        let _g = opprof::enter($name);
    };
}

pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input. It becomes a trainable leaf iff `t.grad_enabled()`.
    pub fn leaf(&mut self, t: Tensor<E>) -> Var {
        prof!("leaf");
        let trainable = t.grad_enabled();
        self.push(t, Op::Leaf { trainable }, trainable)
    }

    /// Register an input that never receives gradient.
    pub fn constant(&mut self, t: Tensor<E>) -> Var {
        prof!("constant");
        self.push(t.detached(), Op::Leaf { trainable: false }, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<E>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── matmul / bmm ─────────────────────────────────────────────────

    /// 2-D product: a[m,k] · b[k,n] → [m,n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        prof!("matmul");
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul on {:?} x {:?}",
                sa, sb
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(out, &[m, n])?,
            Op::Matmul { a: a.0, b: b.0 },
            needs,
        ))
    }

    /// Batched product: a[B,m,k] · b[B,k,n] → [B,m,n].
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        prof!("bmm");
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Dimension(format!("bmm on {:?} x {:?}", sa, sb)));
        }
        let (bb, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let out = kernels::bmm(self.value(a).data(), self.value(b).data(), bb, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(out, &[bb, m, n])?,
            Op::Bmm { a: a.0, b: b.0 },
            needs,
        ))
    }

    // ── elementwise binary with right-aligned broadcasting ───────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let min_normal = E::min_positive();
        if self.value(b).data().iter().any(|x| x.abs() < min_normal) {
            return Err(Error::Singularity(
                "division by a zero/denormal entry".into(),
            ));
        }
        self.binary(a, b, BinKind::Div)
    }

    pub fn binary(&mut self, a: Var, b: Var, kind: BinKind) -> Result<Var> {
        prof!("binary");
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        // exactly one operand may broadcast; the other matches the output
        let (out_shape, small_is_a) = if sa == sb {
            (sa.clone(), false)
        } else if kernels::broadcastable(&sb, &sa) {
            (sa.clone(), false)
        } else if kernels::broadcastable(&sa, &sb) {
            (sb.clone(), true)
        } else {
            return Err(Error::Dimension(format!(
                "elementwise {:?} on incompatible shapes {:?} vs {:?}",
                kind, sa, sb
            )));
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out = if sa == sb {
            let mut out = Vec::with_capacity(av.len());
            match kind {
                BinKind::Add => out.extend(av.iter().zip(bv).map(|(&x, &y)| x + y)),
                BinKind::Sub => out.extend(av.iter().zip(bv).map(|(&x, &y)| x - y)),
                BinKind::Mul => out.extend(av.iter().zip(bv).map(|(&x, &y)| x * y)),
                BinKind::Div => out.extend(av.iter().zip(bv).map(|(&x, &y)| x / y)),
            }
            out
        } else if small_is_a {
            let plan = kernels::BroadcastPlan::new(&sa, &out_shape);
            match kind {
                BinKind::Add => kernels::bcast_map(bv, av, &plan, |big, sm| sm + big),
                BinKind::Sub => kernels::bcast_map(bv, av, &plan, |big, sm| sm - big),
                BinKind::Mul => kernels::bcast_map(bv, av, &plan, |big, sm| sm * big),
                BinKind::Div => kernels::bcast_map(bv, av, &plan, |big, sm| sm / big),
            }
        } else {
            let plan = kernels::BroadcastPlan::new(&sb, &out_shape);
            match kind {
                BinKind::Add => kernels::bcast_map(av, bv, &plan, |big, sm| big + sm),
                BinKind::Sub => kernels::bcast_map(av, bv, &plan, |big, sm| big - sm),
                BinKind::Mul => kernels::bcast_map(av, bv, &plan, |big, sm| big * sm),
                BinKind::Div => kernels::bcast_map(av, bv, &plan, |big, sm| big / sm),
            }
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(out, &out_shape)?,
            Op::Binary { a: a.0, b: b.0, kind },
            needs,
        ))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        prof!("neg");
        let out = self.value(a).map(|x| -x);
        let needs = self.needs(a);
        self.push(out, Op::Neg { a: a.0 }, needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        prof!("scale");
        let ce = E::from_f64(c);
        let out = self.value(a).map(|x| x * ce);
        let needs = self.needs(a);
        self.push(out, Op::Scale { a: a.0, c }, needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        prof!("add_scalar");
        let ce = E::from_f64(c);
        let out = self.value(a).map(|x| x + ce);
        let needs = self.needs(a);
        self.push(out, Op::AddScalar { a: a.0 }, needs)
    }

    // ── shape ops (explicit copies; no stride views) ─────────────────

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        prof!("reshape");
        let out = self.value(a).reshaped(shape)?;
        let needs = self.needs(a);
        Ok(self.push(out.detached(), Op::Reshape { a: a.0 }, needs))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        prof!("permute");
        let shape = self.shape(a).to_vec();
        if perm.len() != shape.len() {
            return Err(Error::Dimension(format!(
                "permute {:?} of rank-{} tensor",
                perm,
                shape.len()
            )));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::Dimension(format!("invalid permutation {:?}", perm)));
            }
            seen[p] = true;
        }
        let (data, out_shape) = kernels::permute(self.value(a).data(), &shape, perm);
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(data, &out_shape)?,
            Op::Permute {
                a: a.0,
                perm: perm.to_vec(),
            },
            needs,
        ))
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        prof!("sum_axis");
        let shape = self.check_axis(a, axis)?;
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let out = kernels::sum_axis(self.value(a).data(), outer, len, inner);
        let out_shape = drop_axis(&shape, axis);
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(out, &out_shape)?,
            Op::SumAxis { a: a.0, axis },
            needs,
        ))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.check_axis(a, axis)?;
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let n = E::from_f64(len as f64);
        let mut out = kernels::sum_axis(self.value(a).data(), outer, len, inner);
        for v in out.iter_mut() {
            *v = *v / n;
        }
        let out_shape = drop_axis(&shape, axis);
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(out, &out_shape)?,
            Op::MeanAxis { a: a.0, axis },
            needs,
        ))
    }

    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.check_axis(a, axis)?;
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let (out, arg) = kernels::max_axis(self.value(a).data(), outer, len, inner);
        let out_shape = drop_axis(&shape, axis);
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(out, &out_shape)?,
            Op::MaxAxis { a: a.0, axis, arg },
            needs,
        ))
    }

    fn check_axis(&self, a: Var, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "axis {} out of range for {:?}",
                axis, shape
            )));
        }
        Ok(shape)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut acc = E::zero();
        for &x in self.value(a).data() {
            acc = acc + x;
        }
        let needs = self.needs(a);
        self.push(Tensor::scalar(acc), Op::SumAll { a: a.0 }, needs)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = E::from_f64(self.value(a).numel() as f64);
        let mut acc = E::zero();
        for &x in self.value(a).data() {
            acc = acc + x;
        }
        let needs = self.needs(a);
        self.push(Tensor::scalar(acc / n), Op::MeanAll { a: a.0 }, needs)
    }

    // ── activations ──────────────────────────────────────────────────

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, UnKind::Silu)
    }

    pub fn gelu_tanh(&mut self, a: Var) -> Var {
        self.unary(a, UnKind::GeluTanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, UnKind::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, UnKind::Softplus)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|x| *x <= E::zero()) {
            return Err(Error::Domain("log of a non-positive entry".into()));
        }
        Ok(self.unary(a, UnKind::Log))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|x| *x < E::zero()) {
            return Err(Error::Domain("sqrt of a negative entry".into()));
        }
        Ok(self.unary(a, UnKind::Sqrt))
    }

    fn unary(&mut self, a: Var, kind: UnKind) -> Var {
        prof!("unary");
        let out = match kind {
            UnKind::Silu => self.value(a).map(kernels::silu),
            UnKind::GeluTanh => self.value(a).map(kernels::gelu_tanh),
            UnKind::Sigmoid => self.value(a).map(kernels::sigmoid),
            UnKind::Log => self.value(a).map(Element::ln),
            UnKind::Softplus => self.value(a).map(kernels::softplus),
            UnKind::Sqrt => self.value(a).map(Element::sqrt),
        };
        let needs = self.needs(a);
        self.push(out, Op::Unary { a: a.0, kind }, needs)
    }

    /// max(x, c) elementwise; gradient passes only where x > c.
    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        let ce = E::from_f64(c);
        let out = self.value(a).map(|x| x.max(ce));
        let needs = self.needs(a);
        self.push(out, Op::ClampMin { a: a.0, c }, needs)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        prof!("softmax");
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(Error::Dimension("softmax of a rank-0 tensor".into()));
        }
        let cols = shape[shape.len() - 1];
        let rows = self.value(a).numel() / cols;
        let out = kernels::softmax_rows(self.value(a).data(), rows, cols);
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(out, &shape)?, Op::Softmax { a: a.0 }, needs))
    }

    /// Zero-mean unit-variance normalization over the last axis (eps 1e-5).
    pub fn layernorm(&mut self, a: Var) -> Result<Var> {
        prof!("layernorm");
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(Error::Dimension("layernorm of a rank-0 tensor".into()));
        }
        let cols = shape[shape.len() - 1];
        let rows = self.value(a).numel() / cols;
        let out = kernels::layernorm_rows(
            self.value(a).data(),
            rows,
            cols,
            E::from_f64(LAYERNORM_EPS),
        );
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(out, &shape)?, Op::LayerNorm { a: a.0 }, needs))
    }

    // ── structured ops ───────────────────────────────────────────────

    /// Cross-correlation conv: x[b,ci,h,w] ⋆ w[o,ci,kh,kw] + bias[o].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        prof!("conv2d");
        let dims = kernels::ConvDims::compute(self.shape(x), self.shape(w), stride, pad)
            .ok_or_else(|| {
                Error::Dimension(format!(
                    "conv2d on x {:?}, kernel {:?}, stride {}, pad {}",
                    self.shape(x),
                    self.shape(w),
                    stride,
                    pad
                ))
            })?;
        if self.shape(b) != [dims.c_out] {
            return Err(Error::Dimension(format!(
                "conv2d bias {:?} for {} output channels",
                self.shape(b),
                dims.c_out
            )));
        }
        let out = kernels::conv2d(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &dims,
        );
        let out_shape = [dims.batch, dims.c_out, dims.oh, dims.ow];
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            Tensor::new(out, &out_shape)?,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                pad,
            },
            needs,
        ))
    }

    /// Row lookup: table[R,D] gathered at `idx` → [idx.len(), D].
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        prof!("gather");
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::Dimension(format!("gather from {:?}", shape)));
        }
        let (rows, d) = (shape[0], shape[1]);
        for &i in idx {
            if i >= rows {
                return Err(Error::Domain(format!(
                    "gather index {} out of {} rows",
                    i, rows
                )));
            }
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::new(out, &[idx.len(), d])?,
            Op::Gather {
                table: table.0,
                idx: idx.to_vec(),
            },
            needs,
        ))
    }

    /// Contiguous slice along the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        prof!("slice_last");
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().ok_or_else(|| {
            Error::Dimension("slice_last of a rank-0 tensor".into())
        })?;
        if start + len > cols {
            return Err(Error::Dimension(format!(
                "slice [{}, {}) of last axis {}",
                start,
                start + len,
                cols
            )));
        }
        let rows = self.value(a).numel() / cols;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = len;
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(out, &out_shape)?,
            Op::SliceLast {
                a: a.0,
                start,
                len,
            },
            needs,
        ))
    }

    /// x[..., in] · w[in, out] + bias[out], flattening leading axes.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[0] {
            return Err(Error::Dimension(format!(
                "linear on x {:?}, w {:?}",
                xs, ws
            )));
        }
        let d_in = ws[0];
        let rows = self.value(x).numel() / d_in;
        let flat = self.reshape(x, &[rows, d_in])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = bias {
            y = self.add(y, b)?;
        }
        let mut out_shape = xs;
        *out_shape.last_mut().unwrap() = ws[1];
        self.reshape(y, &out_shape)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Accumulate ∂loss/∂leaf for every trainable leaf, then clear the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<E>> {
        prof!("backward_total");
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<E>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![E::one()]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut grads)?;
            if matches!(self.nodes[id].op, Op::Leaf { trainable: true }) {
                grads[id] = Some(g);
            }
        }

        let mut by_var = HashMap::new();
        for (id, slot) in grads.into_iter().enumerate() {
            if let (Op::Leaf { trainable: true }, Some(g)) = (&self.nodes[id].op, slot) {
                by_var.insert(id, Tensor::new(g, self.nodes[id].value.shape())?);
            }
        }
        self.nodes.clear();
        Ok(Gradients { by_var })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<E>>], target: usize, add: impl FnOnce(&mut [E])) {
        if !self.nodes[target].needs_grad {
            return;
        }
        let buf = grads[target]
            .get_or_insert_with(|| vec![E::zero(); self.nodes[target].value.numel()]);
        add(buf);
    }

    fn propagate(&self, id: usize, g: &[E], grads: &mut [Option<Vec<E>>]) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf { .. } => {}
            Op::Matmul { a, b } => {
                let (sa, sb) = (self.nodes[*a].value.shape(), self.nodes[*b].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                self.accumulate(grads, *a, |buf| {
                    kernels::matmul_grad_a(g, bv, m, k, n, buf);
                });
                self.accumulate(grads, *b, |buf| {
                    kernels::matmul_grad_b(av, g, m, k, n, buf);
                });
            }
            Op::Bmm { a, b } => {
                let (sa, sb) = (self.nodes[*a].value.shape(), self.nodes[*b].value.shape());
                let (bb, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                self.accumulate(grads, *a, |buf| {
                    kernels::bmm_grad_a(g, bv, bb, m, k, n, buf);
                });
                self.accumulate(grads, *b, |buf| {
                    kernels::bmm_grad_b(av, g, bb, m, k, n, buf);
                });
            }
            Op::Binary { a, b, kind } => {
                let sa = self.nodes[*a].value.shape().to_vec();
                let sb = self.nodes[*b].value.shape().to_vec();
                let so = self.nodes[id].value.shape().to_vec();
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                let kind = *kind;
                if sa == sb {
                    self.accumulate(grads, *a, |buf| match kind {
                        BinKind::Add | BinKind::Sub => {
                            for i in 0..buf.len() {
                                buf[i] = buf[i] + g[i];
                            }
                        }
                        BinKind::Mul => {
                            for i in 0..buf.len() {
                                buf[i] = buf[i] + g[i] * bv[i];
                            }
                        }
                        BinKind::Div => {
                            for i in 0..buf.len() {
                                buf[i] = buf[i] + g[i] / bv[i];
                            }
                        }
                    });
                    self.accumulate(grads, *b, |buf| match kind {
                        BinKind::Add => {
                            for i in 0..buf.len() {
                                buf[i] = buf[i] + g[i];
                            }
                        }
                        BinKind::Sub => {
                            for i in 0..buf.len() {
                                buf[i] = buf[i] - g[i];
                            }
                        }
                        BinKind::Mul => {
                            for i in 0..buf.len() {
                                buf[i] = buf[i] + g[i] * av[i];
                            }
                        }
                        BinKind::Div => {
                            for i in 0..buf.len() {
                                buf[i] = buf[i] - g[i] * av[i] / (bv[i] * bv[i]);
                            }
                        }
                    });
                } else {
                    // one side broadcasts; (big, small) per the forward plan
                    let small_is_a = sa != so;
                    let (small_shape, big, small) =
                        if small_is_a { (&sa, bv, av) } else { (&sb, av, bv) };
                    let plan = kernels::BroadcastPlan::new(small_shape, &so);
                    // derivative w.r.t. a as f(g, big, small)
                    let (da, db): (
                        fn(E, E, E) -> E,
                        fn(E, E, E) -> E,
                    ) = if small_is_a {
                        // a is small: forward was f(small=a, big=b)
                        match kind {
                            BinKind::Add => (|g, _, _| g, |g, _, _| g),
                            BinKind::Sub => (|g, _, _| g, |g, _, _| -g),
                            BinKind::Mul => (|g, big, _| g * big, |g, _, sm| g * sm),
                            BinKind::Div => (
                                |g, big, _| g / big,
                                |g, big, sm| -g * sm / (big * big),
                            ),
                        }
                    } else {
                        // b is small: forward was f(big=a, small=b)
                        match kind {
                            BinKind::Add => (|g, _, _| g, |g, _, _| g),
                            BinKind::Sub => (|g, _, _| g, |g, _, _| -g),
                            BinKind::Mul => (|g, _, sm| g * sm, |g, big, _| g * big),
                            BinKind::Div => (
                                |g, _, sm| g / sm,
                                |g, big, sm| -g * big / (sm * sm),
                            ),
                        }
                    };
                    if small_is_a {
                        self.accumulate(grads, *a, |buf| {
                            kernels::bcast_fold_small(g, big, small, &plan, buf, da);
                        });
                        self.accumulate(grads, *b, |buf| {
                            kernels::bcast_acc_big(g, big, small, &plan, buf, db);
                        });
                    } else {
                        self.accumulate(grads, *a, |buf| {
                            kernels::bcast_acc_big(g, big, small, &plan, buf, da);
                        });
                        self.accumulate(grads, *b, |buf| {
                            kernels::bcast_fold_small(g, big, small, &plan, buf, db);
                        });
                    }
                }
            }
            Op::Neg { a } => self.accumulate(grads, *a, |buf| {
                for (o, &gi) in buf.iter_mut().zip(g) {
                    *o = *o - gi;
                }
            }),
            Op::Scale { a, c } => {
                let ce = E::from_f64(*c);
                self.accumulate(grads, *a, |buf| {
                    for (o, &gi) in buf.iter_mut().zip(g) {
                        *o = *o + gi * ce;
                    }
                });
            }
            Op::AddScalar { a } => self.accumulate(grads, *a, |buf| {
                for (o, &gi) in buf.iter_mut().zip(g) {
                    *o = *o + gi;
                }
            }),
            Op::Reshape { a } => self.accumulate(grads, *a, |buf| {
                for (o, &gi) in buf.iter_mut().zip(g) {
                    *o = *o + gi;
                }
            }),
            Op::Permute { a, perm } => {
                let out_shape = self.nodes[id].value.shape().to_vec();
                let inv = kernels::invert_perm(perm);
                let (gp, _) = kernels::permute(g, &out_shape, &inv);
                self.accumulate(grads, *a, |buf| {
                    for (o, gi) in buf.iter_mut().zip(gp) {
                        *o = *o + gi;
                    }
                });
            }
            Op::SumAxis { a, axis } => {
                let shape = self.nodes[*a].value.shape().to_vec();
                let (outer, len, inner) = kernels::axis_split(&shape, *axis);
                self.accumulate(grads, *a, |buf| {
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                buf[base + i] = buf[base + i] + g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::MeanAxis { a, axis } => {
                let shape = self.nodes[*a].value.shape().to_vec();
                let (outer, len, inner) = kernels::axis_split(&shape, *axis);
                let n = E::from_f64(len as f64);
                self.accumulate(grads, *a, |buf| {
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                buf[base + i] = buf[base + i] + g[o * inner + i] / n;
                            }
                        }
                    }
                });
            }
            Op::MaxAxis { a, axis, arg } => {
                let shape = self.nodes[*a].value.shape().to_vec();
                let (outer, len, inner) = kernels::axis_split(&shape, *axis);
                self.accumulate(grads, *a, |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let slot = o * inner + i;
                            let l = arg[slot];
                            buf[(o * len + l) * inner + i] =
                                buf[(o * len + l) * inner + i] + g[slot];
                        }
                    }
                });
            }
            Op::SumAll { a } => self.accumulate(grads, *a, |buf| {
                for o in buf.iter_mut() {
                    *o = *o + g[0];
                }
            }),
            Op::MeanAll { a } => {
                let n = E::from_f64(self.nodes[*a].value.numel() as f64);
                self.accumulate(grads, *a, |buf| {
                    for o in buf.iter_mut() {
                        *o = *o + g[0] / n;
                    }
                });
            }
            Op::Unary { a, kind } => {
                let xv = self.nodes[*a].value.data();
                let yv = self.nodes[id].value.data();
                let kind = *kind;
                self.accumulate(grads, *a, |buf| match kind {
                    UnKind::Silu => {
                        for i in 0..buf.len() {
                            buf[i] = buf[i] + g[i] * kernels::silu_grad(xv[i]);
                        }
                    }
                    UnKind::GeluTanh => {
                        for i in 0..buf.len() {
                            buf[i] = buf[i] + g[i] * kernels::gelu_tanh_grad(xv[i]);
                        }
                    }
                    UnKind::Sigmoid => {
                        for i in 0..buf.len() {
                            buf[i] = buf[i] + g[i] * yv[i] * (E::one() - yv[i]);
                        }
                    }
                    UnKind::Log => {
                        for i in 0..buf.len() {
                            buf[i] = buf[i] + g[i] / xv[i];
                        }
                    }
                    UnKind::Softplus => {
                        for i in 0..buf.len() {
                            buf[i] = buf[i] + g[i] * kernels::sigmoid(xv[i]);
                        }
                    }
                    UnKind::Sqrt => {
                        let half = E::from_f64(0.5);
                        for i in 0..buf.len() {
                            buf[i] = buf[i] + g[i] * half / yv[i];
                        }
                    }
                });
            }
            Op::ClampMin { a, c } => {
                let ce = E::from_f64(*c);
                let xv = self.nodes[*a].value.data();
                self.accumulate(grads, *a, |buf| {
                    for i in 0..buf.len() {
                        if xv[i] > ce {
                            buf[i] = buf[i] + g[i];
                        }
                    }
                });
            }
            Op::Softmax { a } => {
                let yv = self.nodes[id].value.data();
                let shape = self.nodes[id].value.shape();
                let cols = shape[shape.len() - 1];
                let rows = yv.len() / cols;
                self.accumulate(grads, *a, |buf| {
                    kernels::softmax_backward(yv, g, rows, cols, buf);
                });
            }
            Op::LayerNorm { a } => {
                let xv = self.nodes[*a].value.data();
                let yv = self.nodes[id].value.data();
                let shape = self.nodes[id].value.shape();
                let cols = shape[shape.len() - 1];
                let rows = yv.len() / cols;
                self.accumulate(grads, *a, |buf| {
                    kernels::layernorm_backward(
                        xv,
                        yv,
                        g,
                        rows,
                        cols,
                        E::from_f64(LAYERNORM_EPS),
                        buf,
                    );
                });
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let dims = kernels::ConvDims::compute(
                    self.nodes[*x].value.shape(),
                    self.nodes[*w].value.shape(),
                    *stride,
                    *pad,
                )
                .expect("conv dims validated at forward");
                let xv = self.nodes[*x].value.data();
                let wv = self.nodes[*w].value.data();
                let mut dx = vec![E::zero(); xv.len()];
                let mut dw = vec![E::zero(); wv.len()];
                let mut db = vec![E::zero(); dims.c_out];
                kernels::conv2d_backward(xv, wv, g, &dims, &mut dx, &mut dw, &mut db);
                self.accumulate(grads, *x, |buf| {
                    for (o, gi) in buf.iter_mut().zip(dx) {
                        *o = *o + gi;
                    }
                });
                self.accumulate(grads, *w, |buf| {
                    for (o, gi) in buf.iter_mut().zip(dw) {
                        *o = *o + gi;
                    }
                });
                self.accumulate(grads, *b, |buf| {
                    for (o, gi) in buf.iter_mut().zip(db) {
                        *o = *o + gi;
                    }
                });
            }
            Op::Gather { table, idx } => {
                let d = self.nodes[*table].value.shape()[1];
                self.accumulate(grads, *table, |buf| {
                    for (row, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            buf[i * d + j] = buf[i * d + j] + g[row * d + j];
                        }
                    }
                });
            }
            Op::SliceLast { a, start, len } => {
                let cols = *self.nodes[*a].value.shape().last().unwrap();
                let rows = self.nodes[*a].value.numel() / cols;
                self.accumulate(grads, *a, |buf| {
                    for r in 0..rows {
                        for j in 0..*len {
                            buf[r * cols + start + j] = buf[r * cols + start + j] + g[r * len + j];
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

fn drop_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out = shape.to_vec();
    out.remove(axis);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::<f64>::new();
        let m = tape.leaf(t64(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0], &[3, 3]));
        let eye = tape.leaf(t64(
            &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            &[3, 3],
        ));
        let p = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(p).data(), tape.value(m).data());
    }

    #[test]
    fn matmul_permutation_example() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t64(&[1.0, 2.0, 3.0, 4.0], &[2, 2]));
        let swap = tape.leaf(t64(&[0.0, 1.0, 1.0, 0.0], &[2, 2]));
        let p = tape.matmul(a, swap).unwrap();
        assert_eq!(tape.value(p).data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn add_zero_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[0.5, -1.5, 2.0], &[3]));
        let z = tape.leaf(Tensor::zeros(&[3]));
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn div_self_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[0.5, 1.5, 2.0, 9.0], &[4]));
        let y = tape.div(x, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn div_by_zero_entry_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[1.0, 1.0], &[2]));
        let z = tape.leaf(t64(&[1.0, 0.0], &[2]));
        assert!(matches!(tape.div(x, z), Err(Error::Singularity(_))));
    }

    #[test]
    fn broadcast_add_matches_scalar_loop() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 * 0.7).collect();
        let b = [10.0f64, 20.0, 30.0];
        let mut tape = Tape::<f64>::new();
        let av = tape.leaf(t64(&a, &[2, 3]));
        let bv = tape.leaf(t64(&b, &[3]));
        let y = tape.add(av, bv).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(tape.value(y).data()[r * 3 + c], a[r * 3 + c] + b[c]);
            }
        }
    }

    #[test]
    fn broadcast_equals_explicit_tiling() {
        // [2,1,3] * [2,4,3] must equal manual tiling along the middle axis
        let small: Vec<f64> = (0..6).map(|i| (i as f64).sin()).collect();
        let big: Vec<f64> = (0..24).map(|i| (i as f64).cos()).collect();
        let mut tape = Tape::<f64>::new();
        let s = tape.leaf(t64(&small, &[2, 1, 3]));
        let b = tape.leaf(t64(&big, &[2, 4, 3]));
        let y = tape.mul(s, b).unwrap();
        let tiled = kernels::broadcast_expand(&small, &[2, 1, 3], &[2, 4, 3]);
        let expect: Vec<f64> = tiled.iter().zip(&big).map(|(x, y)| x * y).collect();
        assert_eq!(tape.value(y).data(), &expect[..]);
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[3.3, 3.3, 3.3, 3.3], &[4]));
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn silu_zero_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[0.0], &[1]));
        let y = tape.silu(x);
        assert_eq!(tape.value(y).data()[0], 0.0);
    }

    #[test]
    fn layernorm_rows_standardized() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 3.0, 10.0], &[2, 4]));
        let y = tape.layernorm(x).unwrap();
        for r in 0..2 {
            let row = &tape.value(y).data()[r * 4..(r + 1) * 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn log_of_non_positive_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[1.0, -0.5], &[2]));
        assert!(matches!(tape.log(x), Err(Error::Domain(_))));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[1.0, 2.0, 3.0], &[3]).with_grad());
        let s = tape.sum_all(x);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_half_norm_sq_is_x() {
        let data = [0.3f64, -1.2, 2.5, 0.0];
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&data, &[4]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq);
        let half = tape.scale(s, 0.5);
        let grads = tape.backward(half).unwrap();
        for (g, &d) in grads.get(x).unwrap().data().iter().zip(&data) {
            assert!((g - d).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[1.0, 2.0], &[2]).with_grad());
        let y = tape.neg(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_on_empty_tape_errors() {
        let mut tape = Tape::<f64>::new();
        assert!(matches!(
            tape.backward(Var(0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2.0], &[1]).with_grad());
        let c = tape.constant(t64(&[3.0], &[1]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.len(), 1);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn tape_cleared_after_backward() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[1.0], &[1]).with_grad());
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert!(tape.is_empty());
    }

    #[test]
    fn conv2d_one_by_one_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&(0..16).map(|i| i as f64).collect::<Vec<_>>(), &[1, 1, 4, 4]));
        let w = tape.leaf(t64(&[1.0], &[1, 1, 1, 1]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv2d_averaging_on_constant_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 5, 5], 2.0));
        let w = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        // interior of the same-padded output keeps the constant
        let out = tape.value(y).data();
        for r in 1..4 {
            for c in 1..4 {
                assert!((out[r * 5 + c] - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_kernel_too_large_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        let w = tape.leaf(Tensor::zeros(&[1, 1, 7, 7]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        assert!(matches!(
            tape.conv2d(x, w, b, 1, 0),
            Err(Error::Dimension(_))
        ));
    }
}
