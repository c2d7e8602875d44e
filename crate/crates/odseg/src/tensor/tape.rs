//! Wengert-list tape: every operation records its output tensor and a
//! backward rule. Node inputs always precede the node itself, so a single
//! reverse sweep visits each node exactly once and gradient accumulation
//! across fan-out is a plain `+=`.

use rayon::prelude::*;

use super::{broadcast_shape, strides_of, Element, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) type BackFn<E> = Box<dyn FnOnce(&mut BackCtx<'_, E>) + Send>;

/// View handed to backward rules: forward values of every node, the
/// incoming gradient of the node being visited, and writable gradient
/// slots for its inputs.
pub(crate) struct BackCtx<'a, E: Element> {
    pub vals: &'a [Tensor<E>],
    pub dy: &'a [E],
    reqs: &'a [bool],
    grads: &'a mut Vec<Option<Vec<E>>>,
}

impl<E: Element> BackCtx<'_, E> {
    #[inline]
    pub fn val(&self, v: Var) -> &Tensor<E> {
        &self.vals[v.0]
    }

    /// Whether `v` participates in differentiation; expensive backward rules
    /// skip inputs that don't.
    #[inline]
    pub fn needs(&self, v: Var) -> bool {
        self.reqs[v.0]
    }

    /// Gradient accumulator of `v`, zero-initialized on first access.
    pub fn slot(&mut self, v: Var) -> &mut [E] {
        let n = self.vals[v.0].numel();
        self.grads[v.0].get_or_insert_with(|| vec![E::ZERO; n])
    }
}

pub struct Tape<E: Element> {
    vals: Vec<Tensor<E>>,
    reqs: Vec<bool>,
    backs: Vec<Option<BackFn<E>>>,
    grads: Vec<Option<Vec<E>>>,
    ran_backward: bool,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Work size above which matmul rows are distributed over the rayon pool.
/// Each output element is still accumulated by a single serial inner loop,
/// so results are bit-identical for any thread count.
const PAR_WORK: usize = 1 << 16;

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { vals: Vec::new(), reqs: Vec::new(), backs: Vec::new(), grads: Vec::new(), ran_backward: false }
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.vals[v.0]
    }

    #[inline]
    pub fn requires_grad(&self, v: Var) -> bool {
        self.reqs[v.0]
    }

    /// Gradient of `v` after [`backward`](Self::backward); only leaves and
    /// unvisited nodes retain their slots.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.grads[v.0].as_deref()
    }

    pub(crate) fn next_var(&self) -> Var {
        Var(self.vals.len())
    }

    pub(crate) fn push_node(&mut self, value: Tensor<E>, requires: bool, back: Option<BackFn<E>>) -> Var {
        self.vals.push(value);
        self.reqs.push(requires);
        self.backs.push(if requires { back } else { None });
        self.grads.push(None);
        Var(self.vals.len() - 1)
    }

    /// Insert a tensor as a leaf node.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push_node(value, requires_grad, None)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    /// Reverse sweep from a scalar root. Visits each recorded operation
    /// exactly once in reverse topological order (inputs precede outputs by
    /// construction, asserted at record time), consuming its backward rule.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        debug_assert!(!self.ran_backward, "backward() may run once per tape");
        self.ran_backward = true;
        let root_val = &self.vals[root.0];
        if root_val.numel() != 1 {
            return Err(TensorError::NonScalarRoot(root_val.shape().to_vec()));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[root.0] = Some(vec![E::ONE]);
        for i in (0..=root.0).rev() {
            if self.backs[i].is_none() {
                continue;
            }
            let Some(dy) = self.grads[i].take() else { continue };
            let back = self.backs[i].take().expect("checked above");
            let mut ctx = BackCtx { vals: &self.vals, dy: &dy, reqs: &self.reqs, grads: &mut self.grads };
            back(&mut ctx);
        }
        Ok(())
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_input(a);
        self.check_input(b);
        let out = bc_eval(&self.vals[a.0], &self.vals[b.0], |x, y| x + y)?;
        out.check_finite("add")?;
        let requires = self.reqs[a.0] || self.reqs[b.0];
        let back: Option<BackFn<E>> = if requires {
            let out_shape = out.shape().to_vec();
            Some(Box::new(move |ctx| {
                let a_shape = ctx.val(a).shape().to_vec();
                let b_shape = ctx.val(b).shape().to_vec();
                let dy = ctx.dy;
                {
                    let ga = ctx.slot(a);
                    for_each_bc2(&out_shape, &a_shape, |o, ai| ga[ai] += dy[o]);
                }
                let gb = ctx.slot(b);
                for_each_bc2(&out_shape, &b_shape, |o, bi| gb[bi] += dy[o]);
            }))
        } else {
            None
        };
        Ok(self.push_node(out, requires, back))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_input(a);
        self.check_input(b);
        let out = bc_eval(&self.vals[a.0], &self.vals[b.0], |x, y| x - y)?;
        out.check_finite("sub")?;
        let requires = self.reqs[a.0] || self.reqs[b.0];
        let back: Option<BackFn<E>> = if requires {
            let out_shape = out.shape().to_vec();
            Some(Box::new(move |ctx| {
                let a_shape = ctx.val(a).shape().to_vec();
                let b_shape = ctx.val(b).shape().to_vec();
                let dy = ctx.dy;
                {
                    let ga = ctx.slot(a);
                    for_each_bc2(&out_shape, &a_shape, |o, ai| ga[ai] += dy[o]);
                }
                let gb = ctx.slot(b);
                for_each_bc2(&out_shape, &b_shape, |o, bi| gb[bi] -= dy[o]);
            }))
        } else {
            None
        };
        Ok(self.push_node(out, requires, back))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_input(a);
        self.check_input(b);
        let out = bc_eval(&self.vals[a.0], &self.vals[b.0], |x, y| x * y)?;
        out.check_finite("mul")?;
        let requires = self.reqs[a.0] || self.reqs[b.0];
        let back: Option<BackFn<E>> = if requires {
            let out_shape = out.shape().to_vec();
            Some(Box::new(move |ctx| {
                let vals = ctx.vals;
                let dy = ctx.dy;
                let (ad, bd) = (vals[a.0].data(), vals[b.0].data());
                let a_shape = vals[a.0].shape().to_vec();
                let b_shape = vals[b.0].shape().to_vec();
                {
                    let ga = ctx.slot(a);
                    for_each_bc3(&out_shape, &a_shape, &b_shape, |o, ai, bi| ga[ai] += dy[o] * bd[bi]);
                }
                let gb = ctx.slot(b);
                for_each_bc3(&out_shape, &a_shape, &b_shape, |o, ai, bi| gb[bi] += dy[o] * ad[ai]);
            }))
        } else {
            None
        };
        Ok(self.push_node(out, requires, back))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_input(a);
        self.check_input(b);
        let tiny = E::from_f64(1e-30);
        if self.vals[b.0].data().iter().any(|v| v.abs() < tiny) {
            return Err(TensorError::TinyDivisor { op: "div" });
        }
        let out = bc_eval(&self.vals[a.0], &self.vals[b.0], |x, y| x / y)?;
        out.check_finite("div")?;
        let requires = self.reqs[a.0] || self.reqs[b.0];
        let back: Option<BackFn<E>> = if requires {
            let out_shape = out.shape().to_vec();
            Some(Box::new(move |ctx| {
                let vals = ctx.vals;
                let dy = ctx.dy;
                let (ad, bd) = (vals[a.0].data(), vals[b.0].data());
                let a_shape = vals[a.0].shape().to_vec();
                let b_shape = vals[b.0].shape().to_vec();
                {
                    let ga = ctx.slot(a);
                    for_each_bc3(&out_shape, &a_shape, &b_shape, |o, ai, bi| ga[ai] += dy[o] / bd[bi]);
                }
                let gb = ctx.slot(b);
                for_each_bc3(&out_shape, &a_shape, &b_shape, |o, ai, bi| {
                    gb[bi] -= dy[o] * ad[ai] / (bd[bi] * bd[bi]);
                });
            }))
        } else {
            None
        };
        Ok(self.push_node(out, requires, back))
    }

    /// `y = mul * x + add`, elementwise with scalar coefficients.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Result<Var> {
        self.check_input(a);
        let (m, c) = (E::from_f64(mul), E::from_f64(add));
        let va = &self.vals[a.0];
        let out = Tensor::from_data(va.shape(), va.data().iter().map(|&x| m * x + c).collect())?;
        out.check_finite("affine")?;
        let requires = self.reqs[a.0];
        let back: Option<BackFn<E>> = if requires {
            Some(Box::new(move |ctx| {
                let dy = ctx.dy;
                let ga = ctx.slot(a);
                for (g, &d) in ga.iter_mut().zip(dy) {
                    *g += m * d;
                }
            }))
        } else {
            None
        };
        Ok(self.push_node(out, requires, back))
    }

    /// Multiply by a scalar constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.affine(a, c, 0.0)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.check_input(a);
        let s = E::from_f64(slope);
        let va = &self.vals[a.0];
        let out = Tensor::from_data(
            va.shape(),
            va.data().iter().map(|&x| if x > E::ZERO { x } else { s * x }).collect(),
        )?;
        out.check_finite("leaky_relu")?;
        let requires = self.reqs[a.0];
        let back: Option<BackFn<E>> = if requires {
            Some(Box::new(move |ctx| {
                let xd = ctx.vals[a.0].data();
                let dy = ctx.dy;
                let ga = ctx.slot(a);
                for i in 0..ga.len() {
                    ga[i] += if xd[i] > E::ZERO { dy[i] } else { s * dy[i] };
                }
            }))
        } else {
            None
        };
        Ok(self.push_node(out, requires, back))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.check_input(a);
        let va = &self.vals[a.0];
        let out = Tensor::from_data(
            va.shape(),
            va.data()
                .iter()
                .map(|&x| {
                    // Split on sign so exp never overflows.
                    if x >= E::ZERO {
                        E::ONE / (E::ONE + (-x).exp())
                    } else {
                        let e = x.exp();
                        e / (E::ONE + e)
                    }
                })
                .collect(),
        )?;
        out.check_finite("sigmoid")?;
        let requires = self.reqs[a.0];
        let out_var = self.next_var();
        let back: Option<BackFn<E>> = if requires {
            Some(Box::new(move |ctx| {
                let yd = ctx.vals[out_var.0].data();
                let dy = ctx.dy;
                let ga = ctx.slot(a);
                for i in 0..ga.len() {
                    ga[i] += dy[i] * yd[i] * (E::ONE - yd[i]);
                }
            }))
        } else {
            None
        };
        Ok(self.push_node(out, requires, back))
    }

    // ---- linear algebra ----------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_input(a);
        self.check_input(b);
        let (va, vb) = (&self.vals[a.0], &self.vals[b.0]);
        if va.rank() != 2 {
            return Err(TensorError::RankMismatch { op: "matmul", expected: 2, shape: va.shape().to_vec() });
        }
        if vb.rank() != 2 {
            return Err(TensorError::RankMismatch { op: "matmul", expected: 2, shape: vb.shape().to_vec() });
        }
        let (m, ka) = (va.shape()[0], va.shape()[1]);
        let (kb, n) = (vb.shape()[0], vb.shape()[1]);
        if ka != kb {
            return Err(TensorError::InnerExtent { m, ka, kb, n });
        }
        let mut out = vec![E::ZERO; m * n];
        matmul_into(va.data(), vb.data(), m, ka, n, &mut out);
        let out = Tensor::from_data(&[m, n], out)?;
        out.check_finite("matmul")?;
        let requires = self.reqs[a.0] || self.reqs[b.0];
        let k = ka;
        let back: Option<BackFn<E>> = if requires {
            Some(Box::new(move |ctx| {
                let vals = ctx.vals;
                let dy = ctx.dy;
                let (ad, bd) = (vals[a.0].data(), vals[b.0].data());
                {
                    // dA = dC . B^T
                    let ga = ctx.slot(a);
                    par_rows(ga, k, m * k * n, |i, row| {
                        for p in 0..k {
                            let mut s = E::ZERO;
                            for j in 0..n {
                                s += dy[i * n + j] * bd[p * n + j];
                            }
                            row[p] += s;
                        }
                    });
                }
                // dB = A^T . dC
                let gb = ctx.slot(b);
                par_rows(gb, n, m * k * n, |p, row| {
                    for i in 0..m {
                        let av = ad[i * k + p];
                        for j in 0..n {
                            row[j] += av * dy[i * n + j];
                        }
                    }
                });
            }))
        } else {
            None
        };
        Ok(self.push_node(out, requires, back))
    }

    pub fn transpose2d(&mut self, a: Var) -> Result<Var> {
        self.check_input(a);
        let va = &self.vals[a.0];
        if va.rank() != 2 {
            return Err(TensorError::RankMismatch { op: "transpose2d", expected: 2, shape: va.shape().to_vec() });
        }
        let (m, n) = (va.shape()[0], va.shape()[1]);
        let ad = va.data();
        let mut out = vec![E::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ad[i * n + j];
            }
        }
        let out = Tensor::from_data(&[n, m], out)?;
        let requires = self.reqs[a.0];
        let back: Option<BackFn<E>> = if requires {
            Some(Box::new(move |ctx| {
                let dy = ctx.dy;
                let ga = ctx.slot(a);
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += dy[j * m + i];
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push_node(out, requires, back))
    }

    // ---- normalizers ---------------------------------------------------

    /// Max-subtracted softmax along `axis`, with a temperature divisor.
    pub fn softmax(&mut self, a: Var, axis: usize, temperature: f64) -> Result<Var> {
        self.check_input(a);
        if !(temperature > 0.0) {
            return Err(TensorError::BadTemperature(temperature));
        }
        let va = &self.vals[a.0];
        check_axis("softmax", axis, va.rank())?;
        let t_inv = E::from_f64(1.0 / temperature);
        let (outer, len, inner) = split_axis(va.shape(), axis);
        let xd = va.data();
        let mut out = vec![E::ZERO; xd.len()];
        for (base, stride) in slice_iter(outer, len, inner) {
            let mut m = xd[base] * t_inv;
            for l in 1..len {
                m = m.maximum(xd[base + l * stride] * t_inv);
            }
            let mut s = E::ZERO;
            for l in 0..len {
                let e = (xd[base + l * stride] * t_inv - m).exp();
                out[base + l * stride] = e;
                s += e;
            }
            for l in 0..len {
                out[base + l * stride] /= s;
            }
        }
        let out = Tensor::from_data(va.shape(), out)?;
        out.check_finite("softmax")?;
        let requires = self.reqs[a.0];
        let out_var = self.next_var();
        let back: Option<BackFn<E>> = if requires {
            Some(Box::new(move |ctx| {
                let yd = ctx.vals[out_var.0].data();
                let dy = ctx.dy;
                let ga = ctx.slot(a);
                for (base, stride) in slice_iter(outer, len, inner) {
                    let mut dot = E::ZERO;
                    for l in 0..len {
                        let i = base + l * stride;
                        dot += dy[i] * yd[i];
                    }
                    for l in 0..len {
                        let i = base + l * stride;
                        ga[i] += t_inv * yd[i] * (dy[i] - dot);
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push_node(out, requires, back))
    }

    /// `x - max - ln(sum(exp(x - max)))` along `axis`; finite for any finite
    /// input, unlike `ln(softmax(x))`.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_input(a);
        let va = &self.vals[a.0];
        check_axis("log_softmax", axis, va.rank())?;
        let (outer, len, inner) = split_axis(va.shape(), axis);
        let xd = va.data();
        let mut out = vec![E::ZERO; xd.len()];
        for (base, stride) in slice_iter(outer, len, inner) {
            let mut m = xd[base];
            for l in 1..len {
                m = m.maximum(xd[base + l * stride]);
            }
            let mut s = E::ZERO;
            for l in 0..len {
                s += (xd[base + l * stride] - m).exp();
            }
            let lse = m + s.ln();
            for l in 0..len {
                out[base + l * stride] = xd[base + l * stride] - lse;
            }
        }
        let out = Tensor::from_data(va.shape(), out)?;
        out.check_finite("log_softmax")?;
        let requires = self.reqs[a.0];
        let out_var = self.next_var();
        let back: Option<BackFn<E>> = if requires {
            Some(Box::new(move |ctx| {
                let yd = ctx.vals[out_var.0].data();
                let dy = ctx.dy;
                let ga = ctx.slot(a);
                for (base, stride) in slice_iter(outer, len, inner) {
                    let mut s = E::ZERO;
                    for l in 0..len {
                        s += dy[base + l * stride];
                    }
                    for l in 0..len {
                        let i = base + l * stride;
                        ga[i] += dy[i] - yd[i].exp() * s;
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push_node(out, requires, back))
    }

    // ---- reductions ----------------------------------------------------

    pub fn reduce_sum(&mut self, a: Var, axes: &[usize], keep: bool) -> Result<Var> {
        self.reduce(a, axes, keep, ReduceKind::Sum)
    }

    pub fn reduce_mean(&mut self, a: Var, axes: &[usize], keep: bool) -> Result<Var> {
        self.reduce(a, axes, keep, ReduceKind::Mean)
    }

    pub fn reduce_max(&mut self, a: Var, axes: &[usize], keep: bool) -> Result<Var> {
        self.reduce(a, axes, keep, ReduceKind::Max)
    }

    fn reduce(&mut self, a: Var, axes: &[usize], keep: bool, kind: ReduceKind) -> Result<Var> {
        self.check_input(a);
        let va = &self.vals[a.0];
        let rank = va.rank();
        let mut reduced = vec![false; rank];
        for &ax in axes {
            check_axis("reduce", ax, rank)?;
            if reduced[ax] {
                return Err(TensorError::DuplicateAxis { op: "reduce", axis: ax });
            }
            reduced[ax] = true;
        }
        let in_shape = va.shape().to_vec();
        // Empty axis set: reduction over nothing is the identity.
        if axes.is_empty() {
            let out = va.clone();
            let requires = self.reqs[a.0];
            let back: Option<BackFn<E>> = Some(Box::new(move |ctx| {
                let dy = ctx.dy;
                let ga = ctx.slot(a);
                for i in 0..ga.len() {
                    ga[i] += dy[i];
                }
            }));
            return Ok(self.push_node(out, requires, back));
        }
        let mut out_shape: Vec<usize> = Vec::new();
        for d in 0..rank {
            if reduced[d] {
                if keep {
                    out_shape.push(1);
                }
            } else {
                out_shape.push(in_shape[d]);
            }
        }
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out_numel: usize = out_shape.iter().product();
        let count: usize = in_shape
            .iter()
            .enumerate()
            .filter(|(d, _)| reduced[*d])
            .map(|(_, &e)| e)
            .product();
        let inv_count = E::from_f64(1.0 / count as f64);
        let xd = va.data();

        let mut out = vec![E::ZERO; out_numel];
        let mut argmax: Vec<usize> = Vec::new();
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                for_each_reduce(&in_shape, &reduced, |i, o| out[o] += xd[i]);
                if matches!(kind, ReduceKind::Mean) {
                    for v in out.iter_mut() {
                        *v *= inv_count;
                    }
                }
            }
            ReduceKind::Max => {
                let mut init = vec![false; out_numel];
                argmax = vec![0; out_numel];
                // strict '>' keeps the first maximum in scan order
                for_each_reduce(&in_shape, &reduced, |i, o| {
                    if !init[o] || xd[i] > out[o] {
                        out[o] = xd[i];
                        argmax[o] = i;
                        init[o] = true;
                    }
                });
            }
        }
        let out = Tensor::from_data(&out_shape, out)?;
        out.check_finite("reduce")?;
        let requires = self.reqs[a.0];
        let back: Option<BackFn<E>> = if requires {
            Some(Box::new(move |ctx| {
                let dy = ctx.dy;
                let ga = ctx.slot(a);
                match kind {
                    ReduceKind::Sum => {
                        for_each_reduce(&in_shape, &reduced, |i, o| ga[i] += dy[o]);
                    }
                    ReduceKind::Mean => {
                        for_each_reduce(&in_shape, &reduced, |i, o| ga[i] += dy[o] * inv_count);
                    }
                    ReduceKind::Max => {
                        for (o, &i) in argmax.iter().enumerate() {
                            ga[i] += dy[o];
                        }
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push_node(out, requires, back))
    }

    /// Per-channel spatial mean of a `[c, d, h, w]` tensor, computed
    /// directly (not via [`reduce_mean`](Self::reduce_mean), which serves as
    /// its independent oracle in tests).
    pub fn global_average_pool(&mut self, a: Var) -> Result<Var> {
        self.check_input(a);
        let va = &self.vals[a.0];
        if va.rank() != 4 {
            return Err(TensorError::RankMismatch { op: "global_average_pool", expected: 4, shape: va.shape().to_vec() });
        }
        let c = va.shape()[0];
        let spatial = va.numel() / c;
        let inv = E::from_f64(1.0 / spatial as f64);
        let xd = va.data();
        let mut out = vec![E::ZERO; c];
        for ch in 0..c {
            let mut s = E::ZERO;
            for v in &xd[ch * spatial..(ch + 1) * spatial] {
                s += *v;
            }
            out[ch] = s * inv;
        }
        let out = Tensor::from_data(&[c], out)?;
        out.check_finite("global_average_pool")?;
        let requires = self.reqs[a.0];
        let back: Option<BackFn<E>> = if requires {
            Some(Box::new(move |ctx| {
                let dy = ctx.dy;
                let ga = ctx.slot(a);
                for ch in 0..c {
                    let g = dy[ch] * inv;
                    for v in &mut ga[ch * spatial..(ch + 1) * spatial] {
                        *v += g;
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push_node(out, requires, back))
    }

    // ---- shape ----------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check_input(a);
        let out = self.vals[a.0].reshaped(shape)?;
        let requires = self.reqs[a.0];
        let back: Option<BackFn<E>> = if requires {
            Some(Box::new(move |ctx| {
                let dy = ctx.dy;
                let ga = ctx.slot(a);
                for i in 0..ga.len() {
                    ga[i] += dy[i];
                }
            }))
        } else {
            None
        };
        Ok(self.push_node(out, requires, back))
    }

    /// Contiguous slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_input(a);
        let va = &self.vals[a.0];
        check_axis("narrow", axis, va.rank())?;
        let extent = va.shape()[axis];
        if len == 0 || start + len > extent {
            return Err(TensorError::RangeOutOfBounds { op: "narrow", axis, start, len, extent });
        }
        let (outer, _, inner) = split_axis(va.shape(), axis);
        let mut out_shape = va.shape().to_vec();
        out_shape[axis] = len;
        let xd = va.data();
        let mut out = vec![E::ZERO; outer * len * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = (o * extent + start + l) * inner;
                let dst = (o * len + l) * inner;
                out[dst..dst + inner].copy_from_slice(&xd[src..src + inner]);
            }
        }
        let out = Tensor::from_data(&out_shape, out)?;
        let requires = self.reqs[a.0];
        let back: Option<BackFn<E>> = if requires {
            Some(Box::new(move |ctx| {
                let dy = ctx.dy;
                let ga = ctx.slot(a);
                for o in 0..outer {
                    for l in 0..len {
                        let dst = (o * extent + start + l) * inner;
                        let src = (o * len + l) * inner;
                        for i in 0..inner {
                            ga[dst + i] += dy[src + i];
                        }
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push_node(out, requires, back))
    }

    /// Concatenate along `axis`; other extents must match.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        self.check_input(a);
        self.check_input(b);
        let (va, vb) = (&self.vals[a.0], &self.vals[b.0]);
        check_axis("concat", axis, va.rank())?;
        let ok = va.rank() == vb.rank()
            && va
                .shape()
                .iter()
                .zip(vb.shape())
                .enumerate()
                .all(|(d, (ea, eb))| d == axis || ea == eb);
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                a: va.shape().to_vec(),
                b: vb.shape().to_vec(),
            });
        }
        let (ea, eb) = (va.shape()[axis], vb.shape()[axis]);
        let (outer, _, inner) = split_axis(va.shape(), axis);
        let mut out_shape = va.shape().to_vec();
        out_shape[axis] = ea + eb;
        let (ad, bd) = (va.data(), vb.data());
        let mut out = vec![E::ZERO; outer * (ea + eb) * inner];
        for o in 0..outer {
            let dst = o * (ea + eb) * inner;
            out[dst..dst + ea * inner].copy_from_slice(&ad[o * ea * inner..(o + 1) * ea * inner]);
            out[dst + ea * inner..dst + (ea + eb) * inner]
                .copy_from_slice(&bd[o * eb * inner..(o + 1) * eb * inner]);
        }
        let out = Tensor::from_data(&out_shape, out)?;
        let requires = self.reqs[a.0] || self.reqs[b.0];
        let back: Option<BackFn<E>> = if requires {
            Some(Box::new(move |ctx| {
                let dy = ctx.dy;
                {
                    let ga = ctx.slot(a);
                    for o in 0..outer {
                        let src = o * (ea + eb) * inner;
                        for i in 0..ea * inner {
                            ga[o * ea * inner + i] += dy[src + i];
                        }
                    }
                }
                let gb = ctx.slot(b);
                for o in 0..outer {
                    let src = o * (ea + eb) * inner + ea * inner;
                    for i in 0..eb * inner {
                        gb[o * eb * inner + i] += dy[src + i];
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push_node(out, requires, back))
    }

    #[inline]
    fn check_input(&self, v: Var) {
        // Inputs must already be on the tape, so cycles are impossible.
        assert!(v.0 < self.vals.len(), "tape input Var out of order");
    }
}

#[derive(Clone, Copy)]
enum ReduceKind {
    Sum,
    Mean,
    Max,
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(TensorError::InvalidAxis { op, axis, rank });
    }
    Ok(())
}

/// Split a shape at `axis` into (outer, axis extent, inner) products.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Base offsets and strides of every 1-d slice along a split axis.
fn slice_iter(outer: usize, len: usize, inner: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..outer).flat_map(move |o| (0..inner).map(move |i| (o * len * inner + i, inner)))
}

/// Evaluate a binary op under extent-1 broadcasting.
fn bc_eval<E: Element>(a: &Tensor<E>, b: &Tensor<E>, f: impl Fn(E, E) -> E) -> Result<Tensor<E>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_data(a.shape(), data);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let n: usize = out_shape.iter().product();
    let mut out = vec![E::ZERO; n];
    let (ad, bd) = (a.data(), b.data());
    for_each_bc3(&out_shape, a.shape(), b.shape(), |o, ai, bi| out[o] = f(ad[ai], bd[bi]));
    Tensor::from_data(&out_shape, out)
}

/// Visit every output index of a broadcast with the matching input index.
fn for_each_bc2(out_shape: &[usize], t_shape: &[usize], mut f: impl FnMut(usize, usize)) {
    if out_shape == t_shape {
        let n: usize = out_shape.iter().product();
        for o in 0..n {
            f(o, o);
        }
        return;
    }
    for_each_bc3(out_shape, t_shape, t_shape, |o, ti, _| f(o, ti));
}

/// Visit every output index of a broadcast with both matching input indices.
fn for_each_bc3(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let n: usize = out_shape.iter().product();
    let a_str = strides_of(a_shape);
    let b_str = strides_of(b_shape);
    let mut a_bc = vec![0usize; rank];
    let mut b_bc = vec![0usize; rank];
    for d in 0..rank {
        a_bc[d] = if a_shape[d] == 1 { 0 } else { a_str[d] };
        b_bc[d] = if b_shape[d] == 1 { 0 } else { b_str[d] };
    }
    let mut coords = vec![0usize; rank];
    let (mut ai, mut bi) = (0usize, 0usize);
    for o in 0..n {
        f(o, ai, bi);
        for d in (0..rank).rev() {
            coords[d] += 1;
            ai += a_bc[d];
            bi += b_bc[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            ai -= a_bc[d] * out_shape[d];
            bi -= b_bc[d] * out_shape[d];
        }
    }
}

/// Visit every input index of a reduction with its output index.
fn for_each_reduce(in_shape: &[usize], reduced: &[bool], mut f: impl FnMut(usize, usize)) {
    let rank = in_shape.len();
    let n: usize = in_shape.iter().product();
    // Strides of the reduced-away output laid out over surviving axes.
    let mut out_extents: Vec<usize> = Vec::new();
    for d in 0..rank {
        if !reduced[d] {
            out_extents.push(in_shape[d]);
        }
    }
    if out_extents.is_empty() {
        out_extents.push(1);
    }
    let out_str_survivors = strides_of(&out_extents);
    let mut contrib = vec![0usize; rank];
    let mut si = 0;
    for d in 0..rank {
        if !reduced[d] {
            contrib[d] = out_str_survivors[si];
            si += 1;
        }
    }
    let mut coords = vec![0usize; rank];
    let mut oi = 0usize;
    for i in 0..n {
        f(i, oi);
        for d in (0..rank).rev() {
            coords[d] += 1;
            oi += contrib[d];
            if coords[d] < in_shape[d] {
                break;
            }
            coords[d] = 0;
            oi -= contrib[d] * in_shape[d];
        }
    }
}

/// Serial row kernel dispatched over the rayon pool when the work is large.
/// Row `i` of `out` (length `row_len`) is always produced by one invocation
/// of `f`, so the result does not depend on the thread count.
pub(crate) fn par_rows<E: Element>(
    out: &mut [E],
    row_len: usize,
    work: usize,
    f: impl Fn(usize, &mut [E]) + Send + Sync,
) {
    if work >= PAR_WORK && rayon::current_num_threads() > 1 {
        out.par_chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
    } else {
        for (i, row) in out.chunks_mut(row_len).enumerate() {
            f(i, row);
        }
    }
}

pub(crate) fn matmul_into<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    par_rows(out, n, m * k * n, |i, row| {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                row[j] += av * brow[j];
            }
        }
    });
}
