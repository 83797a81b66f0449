//! Computation tape. Every forward op appends one value node and, when any
//! operand can reach a gradient sink (an `input` or `param` node), one
//! backward closure. [`Graph::backward`] walks the tape in reverse, feeding
//! each node's output gradient to its closure; parameter gradients are then
//! accumulated (`+=`) into the caller's [`ParameterSet`].
//!
//! Reduction orders inside kernels are fixed, so forward and backward passes
//! are bit-deterministic for identical inputs.

use super::{ParameterSet, Scalar, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum NodeKind {
    Leaf,
    Input,
    Param(String),
}

pub(crate) struct GradSink<'a, S: Scalar> {
    slots: &'a mut [Option<Vec<S>>],
    sizes: &'a [usize],
    needs: &'a [bool],
}

impl<'a, S: Scalar> GradSink<'a, S> {
    /// True when `node` lies on a path to a gradient sink; closures skip
    /// work for operands that do not.
    pub(crate) fn wants(&self, node: usize) -> bool {
        self.needs[node]
    }

    /// Gradient accumulation buffer for `node`, zero-initialized on first use.
    pub(crate) fn buf(&mut self, node: usize) -> &mut [S] {
        let slot = &mut self.slots[node];
        if slot.is_none() {
            *slot = Some(vec![S::zero(); self.sizes[node]]);
        }
        slot.as_mut().expect("just filled").as_mut_slice()
    }
}

pub(crate) type BackFn<S> = Box<dyn Fn(&[Tensor<S>], &[S], &mut GradSink<'_, S>)>;

pub struct Graph<S: Scalar> {
    values: Vec<Tensor<S>>,
    backs: Vec<Option<BackFn<S>>>,
    kinds: Vec<NodeKind>,
    needs: Vec<bool>,
    consumed: bool,
    last_grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            backs: Vec::new(),
            kinds: Vec::new(),
            needs: Vec::new(),
            consumed: false,
            last_grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<S>, kind: NodeKind, needs: bool, back: Option<BackFn<S>>) -> Var {
        self.values.push(value);
        self.kinds.push(kind);
        self.needs.push(needs);
        self.backs.push(if needs { back } else { None });
        Var(self.values.len() - 1)
    }

    /// Constant node: no gradient is tracked through it.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        self.push(t, NodeKind::Leaf, false, None)
    }

    /// Gradient-tracked leaf; its gradient is readable via [`Graph::grad_of`]
    /// after backward.
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, NodeKind::Input, true, None)
    }

    /// Leaf bound to a named parameter; backward accumulates into the
    /// parameter's grad buffer.
    pub fn param(&mut self, ps: &ParameterSet<S>, name: &str) -> Result<Var, TensorError> {
        let t = ps
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let mut v = t.clone();
        v.clear_grad();
        Ok(self.push(v, NodeKind::Param(name.to_string()), true, None))
    }

    /// Appends an op node; the closure is dropped when no operand needs grad.
    pub(crate) fn push_op(&mut self, value: Tensor<S>, inputs: &[Var], back: BackFn<S>) -> Var {
        let needs = inputs.iter().any(|v| self.needs[v.0]);
        self.push(value, NodeKind::Leaf, needs, Some(back))
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    /// Gradient of a tracked node from the most recent backward pass.
    pub fn grad_of(&self, v: Var) -> Option<&[S]> {
        self.last_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn backward(&mut self, loss: Var, ps: &mut ParameterSet<S>) -> Result<(), TensorError> {
        self.backward_impl(loss, ps, false)
    }

    /// Backward that keeps the tape alive so it can run again; gradients from
    /// repeated passes sum.
    pub fn backward_retain(&mut self, loss: Var, ps: &mut ParameterSet<S>) -> Result<(), TensorError> {
        self.backward_impl(loss, ps, true)
    }

    fn backward_impl(
        &mut self,
        loss: Var,
        ps: &mut ParameterSet<S>,
        retain: bool,
    ) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        if self.values[loss.0].numel() != 1 {
            return Err(TensorError::NotScalar(self.values[loss.0].shape().to_vec()));
        }
        let n = self.values.len();
        let sizes: Vec<usize> = self.values.iter().map(|t| t.numel()).collect();
        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if let Some(back) = &self.backs[i] {
                let mut sink = GradSink {
                    slots: &mut grads,
                    sizes: &sizes,
                    needs: &self.needs,
                };
                back(&self.values, &gout, &mut sink);
            }
            // Only sink nodes keep their gradient around after distribution.
            if matches!(self.kinds[i], NodeKind::Input | NodeKind::Param(_)) {
                grads[i] = Some(gout);
            }
        }

        for i in 0..n {
            if let NodeKind::Param(name) = &self.kinds[i] {
                if let Some(g) = &grads[i] {
                    match ps.get_mut(name) {
                        Some(t) => t.accumulate_grad(g),
                        None => return Err(TensorError::UnknownParam(name.clone())),
                    }
                }
            }
        }
        self.last_grads = grads;
        if !retain {
            self.consumed = true;
            for b in &mut self.backs {
                *b = None;
            }
        }
        Ok(())
    }

    // ---- elementwise ----

    fn check_same_shape(&self, a: Var, b: Var, op: &str) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check_same_shape(a, b, "add")?;
        let data: Vec<S> = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| *x + *y)
            .collect();
        let out = Tensor::new(self.shape(a), data).expect("same shape");
        let (ai, bi) = (a.0, b.0);
        Ok(self.push_op(
            out,
            &[a, b],
            Box::new(move |_vals, g, sink| {
                for idx in [ai, bi] {
                    if sink.wants(idx) {
                        let gb = sink.buf(idx);
                        for (o, gi) in gb.iter_mut().zip(g) {
                            *o += *gi;
                        }
                    }
                }
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check_same_shape(a, b, "sub")?;
        let data: Vec<S> = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| *x - *y)
            .collect();
        let out = Tensor::new(self.shape(a), data).expect("same shape");
        let (ai, bi) = (a.0, b.0);
        Ok(self.push_op(
            out,
            &[a, b],
            Box::new(move |_vals, g, sink| {
                if sink.wants(ai) {
                    let gb = sink.buf(ai);
                    for (o, gi) in gb.iter_mut().zip(g) {
                        *o += *gi;
                    }
                }
                if sink.wants(bi) {
                    let gb = sink.buf(bi);
                    for (o, gi) in gb.iter_mut().zip(g) {
                        *o -= *gi;
                    }
                }
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check_same_shape(a, b, "mul")?;
        let data: Vec<S> = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| *x * *y)
            .collect();
        let out = Tensor::new(self.shape(a), data).expect("same shape");
        let (ai, bi) = (a.0, b.0);
        Ok(self.push_op(
            out,
            &[a, b],
            Box::new(move |vals, g, sink| {
                if sink.wants(ai) {
                    let vb: &[S] = vals[bi].data();
                    let gb = sink.buf(ai);
                    for i in 0..g.len() {
                        gb[i] += g[i] * vb[i];
                    }
                }
                if sink.wants(bi) {
                    let va: &[S] = vals[ai].data();
                    let gb = sink.buf(bi);
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let out = self.values[a.0].map(|x| x * c);
        let ai = a.0;
        self.push_op(
            out,
            &[a],
            Box::new(move |_vals, g, sink| {
                if sink.wants(ai) {
                    let gb = sink.buf(ai);
                    for i in 0..g.len() {
                        gb[i] += g[i] * c;
                    }
                }
            }),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        let out = self.values[a.0].map(|x| x + c);
        let ai = a.0;
        self.push_op(
            out,
            &[a],
            Box::new(move |_vals, g, sink| {
                if sink.wants(ai) {
                    let gb = sink.buf(ai);
                    for i in 0..g.len() {
                        gb[i] += g[i];
                    }
                }
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.values[a.0].map(|x| if x > S::zero() { x } else { S::zero() });
        let ai = a.0;
        self.push_op(
            out,
            &[a],
            Box::new(move |vals, g, sink| {
                if sink.wants(ai) {
                    let va: &[S] = vals[ai].data();
                    let gb = sink.buf(ai);
                    for i in 0..g.len() {
                        if va[i] > S::zero() {
                            gb[i] += g[i];
                        }
                    }
                }
            }),
        )
    }

    /// max(x, c); subgradient at the clamp boundary is 0.
    pub fn clamp_min(&mut self, a: Var, c: S) -> Var {
        let out = self.values[a.0].map(|x| if x > c { x } else { c });
        let ai = a.0;
        self.push_op(
            out,
            &[a],
            Box::new(move |vals, g, sink| {
                if sink.wants(ai) {
                    let va: &[S] = vals[ai].data();
                    let gb = sink.buf(ai);
                    for i in 0..g.len() {
                        if va[i] > c {
                            gb[i] += g[i];
                        }
                    }
                }
            }),
        )
    }

    /// Elementwise x^p; callers guard the domain (see GeM's clamp).
    pub fn powf(&mut self, a: Var, p: S) -> Var {
        let out = self.values[a.0].map(|x| x.powf(p));
        let ai = a.0;
        self.push_op(
            out,
            &[a],
            Box::new(move |vals, g, sink| {
                if sink.wants(ai) {
                    let va: &[S] = vals[ai].data();
                    let gb = sink.buf(ai);
                    for i in 0..g.len() {
                        gb[i] += g[i] * p * va[i].powf(p - S::one());
                    }
                }
            }),
        )
    }

    /// sqrt(x + eps); the offset keeps the derivative finite at x = 0.
    pub fn sqrt_eps(&mut self, a: Var, eps: S) -> Var {
        let out = self.values[a.0].map(|x| (x + eps).sqrt());
        let ai = a.0;
        self.push_op(
            out,
            &[a],
            Box::new(move |vals, g, sink| {
                if sink.wants(ai) {
                    let half = S::from_f64(0.5);
                    let va: &[S] = vals[ai].data();
                    let gb = sink.buf(ai);
                    for i in 0..g.len() {
                        gb[i] += g[i] * half / (va[i] + eps).sqrt();
                    }
                }
            }),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let mut s = S::zero();
        for v in self.values[a.0].data() {
            s += *v;
        }
        let ai = a.0;
        self.push_op(
            Tensor::scalar(s),
            &[a],
            Box::new(move |_vals, g, sink| {
                if sink.wants(ai) {
                    let g0 = g[0];
                    let gb = sink.buf(ai);
                    for o in gb.iter_mut() {
                        *o += g0;
                    }
                }
            }),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.values[a.0].numel();
        debug_assert!(n > 0, "mean of empty tensor");
        let inv = S::from_f64(1.0 / n as f64);
        let mut s = S::zero();
        for v in self.values[a.0].data() {
            s += *v;
        }
        let ai = a.0;
        self.push_op(
            Tensor::scalar(s * inv),
            &[a],
            Box::new(move |_vals, g, sink| {
                if sink.wants(ai) {
                    let g0 = g[0] * inv;
                    let gb = sink.buf(ai);
                    for o in gb.iter_mut() {
                        *o += g0;
                    }
                }
            }),
        )
    }

    /// Normalizes every slice along `axis` to unit L2 norm; slices with norm
    /// below `eps` are divided by `eps` instead (stay near zero, gradient
    /// finite).
    pub fn l2_normalize(&mut self, a: Var, axis: usize, eps: S) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument(format!(
                "l2_normalize: axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.values[a.0].data();
        let mut y = vec![S::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut sq = S::zero();
                for k in 0..len {
                    let v = x[base + k * inner];
                    sq += v * v;
                }
                let norm = sq.sqrt();
                let denom = if norm > eps { norm } else { eps };
                for k in 0..len {
                    y[base + k * inner] = x[base + k * inner] / denom;
                }
            }
        }
        let out = Tensor::new(&shape, y).expect("same numel");
        let ai = a.0;
        Ok(self.push_op(
            out,
            &[a],
            Box::new(move |vals, g, sink| {
                if !sink.wants(ai) {
                    return;
                }
                let x: &[S] = vals[ai].data();
                let gb = sink.buf(ai);
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut sq = S::zero();
                        for k in 0..len {
                            let v = x[base + k * inner];
                            sq += v * v;
                        }
                        let norm = sq.sqrt();
                        if norm > eps {
                            // d(x/|x|) = (g - y <y,g>) / |x|
                            let mut dot = S::zero();
                            for k in 0..len {
                                let idx = base + k * inner;
                                dot += (x[idx] / norm) * g[idx];
                            }
                            for k in 0..len {
                                let idx = base + k * inner;
                                gb[idx] += (g[idx] - (x[idx] / norm) * dot) / norm;
                            }
                        } else {
                            for k in 0..len {
                                let idx = base + k * inner;
                                gb[idx] += g[idx] / eps;
                            }
                        }
                    }
                }
            }),
        ))
    }

    // ---- linear algebra ----

    /// out[m,n] = a[m,k] x b[k,n]
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul: {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        mm_acc(self.values[a.0].data(), self.values[b.0].data(), &mut out, m, k, n);
        let t = Tensor::new(&[m, n], out).expect("shape");
        let (ai, bi) = (a.0, b.0);
        Ok(self.push_op(
            t,
            &[a, b],
            Box::new(move |vals, g, sink| {
                if sink.wants(ai) {
                    let vb: &[S] = vals[bi].data();
                    let ga = sink.buf(ai);
                    mm_abt(g, vb, ga, m, n, k);
                }
                if sink.wants(bi) {
                    let va: &[S] = vals[ai].data();
                    let gb = sink.buf(bi);
                    mm_atb(va, g, gb, m, k, n);
                }
            }),
        ))
    }

    /// out[n,o] = x[n,i] w[o,i] + b[o]
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        if sx.len() != 2 || sw.len() != 2 || sb.len() != 1 || sx[1] != sw[1] || sw[0] != sb[0] {
            return Err(TensorError::ShapeMismatch(format!(
                "linear: x {sx:?}, w {sw:?}, b {sb:?}"
            )));
        }
        let (n, d_in, d_out) = (sx[0], sx[1], sw[0]);
        let mut out = vec![S::zero(); n * d_out];
        mm_abt(
            self.values[x.0].data(),
            self.values[w.0].data(),
            &mut out,
            n,
            d_in,
            d_out,
        );
        let bias = self.values[b.0].data();
        for r in 0..n {
            let row = &mut out[r * d_out..(r + 1) * d_out];
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += *bv;
            }
        }
        let t = Tensor::new(&[n, d_out], out).expect("shape");
        let (xi, wi, bi) = (x.0, w.0, b.0);
        Ok(self.push_op(
            t,
            &[x, w, b],
            Box::new(move |vals, g, sink| {
                if sink.wants(xi) {
                    let vw: &[S] = vals[wi].data();
                    let gx = sink.buf(xi);
                    mm_acc(g, vw, gx, n, d_out, d_in);
                }
                if sink.wants(wi) {
                    let vx: &[S] = vals[xi].data();
                    let gw = sink.buf(wi);
                    mm_atb(g, vx, gw, n, d_out, d_in);
                }
                if sink.wants(bi) {
                    let gb = sink.buf(bi);
                    for r in 0..n {
                        for o in 0..d_out {
                            gb[o] += g[r * d_out + o];
                        }
                    }
                }
            }),
        ))
    }

    /// Cross-correlation conv over [N,C_in,H,W] with kernel [C_out,C_in,kH,kW].
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var, TensorError> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        if sx.len() != 4 || sw.len() != 4 || sb.len() != 1 {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d: x {sx:?}, w {sw:?}, b {sb:?}"
            )));
        }
        let (nb, c_in, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, wc_in, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if wc_in != c_in || sb[0] != c_out {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d: input channels {c_in} vs kernel {wc_in}, bias {} vs out {c_out}",
                sb[0]
            )));
        }
        let (sh, sw_) = stride;
        let (ph, pw) = padding;
        if sh == 0 || sw_ == 0 || h + 2 * ph < kh || wd + 2 * pw < kw {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d: kernel {kh}x{kw} stride {sh}x{sw_} does not fit {h}x{wd} pad {ph}x{pw}"
            )));
        }
        let oh = (h + 2 * ph - kh) / sh + 1;
        let ow = (wd + 2 * pw - kw) / sw_ + 1;
        let ckk = c_in * kh * kw;
        let ohw = oh * ow;

        let mut out = vec![S::zero(); nb * c_out * ohw];
        let mut col = vec![S::zero(); ckk * ohw];
        {
            let xv = self.values[x.0].data();
            let wv = self.values[w.0].data();
            let bv = self.values[b.0].data();
            for nidx in 0..nb {
                let xs = &xv[nidx * c_in * h * wd..(nidx + 1) * c_in * h * wd];
                im2col(xs, c_in, h, wd, kh, kw, sh, sw_, ph, pw, oh, ow, &mut col);
                let os = &mut out[nidx * c_out * ohw..(nidx + 1) * c_out * ohw];
                mm_acc(wv, &col, os, c_out, ckk, ohw);
                for co in 0..c_out {
                    let bias = bv[co];
                    for v in &mut os[co * ohw..(co + 1) * ohw] {
                        *v += bias;
                    }
                }
            }
        }
        let t = Tensor::new(&[nb, c_out, oh, ow], out).expect("shape");
        let (xi, wi, bi) = (x.0, w.0, b.0);
        Ok(self.push_op(
            t,
            &[x, w, b],
            Box::new(move |vals, g, sink| {
                let mut col = vec![S::zero(); ckk * ohw];
                let xv: &[S] = vals[xi].data();
                let wv: &[S] = vals[wi].data();
                // Weight and bias grads accumulate across the batch.
                if sink.wants(wi) {
                    let gw = sink.buf(wi);
                    for nidx in 0..nb {
                        let xs = &xv[nidx * c_in * h * wd..(nidx + 1) * c_in * h * wd];
                        im2col(xs, c_in, h, wd, kh, kw, sh, sw_, ph, pw, oh, ow, &mut col);
                        let gs = &g[nidx * c_out * ohw..(nidx + 1) * c_out * ohw];
                        mm_abt(gs, &col, gw, c_out, ohw, ckk);
                    }
                }
                if sink.wants(bi) {
                    let gb = sink.buf(bi);
                    for nidx in 0..nb {
                        let gs = &g[nidx * c_out * ohw..(nidx + 1) * c_out * ohw];
                        for co in 0..c_out {
                            let mut s = S::zero();
                            for v in &gs[co * ohw..(co + 1) * ohw] {
                                s += *v;
                            }
                            gb[co] += s;
                        }
                    }
                }
                if sink.wants(xi) {
                    let mut dcol = vec![S::zero(); ckk * ohw];
                    let gx = sink.buf(xi);
                    for nidx in 0..nb {
                        let gs = &g[nidx * c_out * ohw..(nidx + 1) * c_out * ohw];
                        dcol.iter_mut().for_each(|v| *v = S::zero());
                        mm_atb(wv, gs, &mut dcol, c_out, ckk, ohw);
                        let gxs = &mut gx[nidx * c_in * h * wd..(nidx + 1) * c_in * h * wd];
                        col2im_add(&dcol, c_in, h, wd, kh, kw, sh, sw_, ph, pw, oh, ow, gxs);
                    }
                }
            }),
        ))
    }

    // ---- shape & indexing ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.values[a.0].numel() {
            return Err(TensorError::ShapeLenMismatch {
                shape: shape.to_vec(),
                len: self.values[a.0].numel(),
            });
        }
        let out = Tensor::new(shape, self.values[a.0].data().to_vec()).expect("checked");
        let ai = a.0;
        Ok(self.push_op(
            out,
            &[a],
            Box::new(move |_vals, g, sink| {
                if sink.wants(ai) {
                    let gb = sink.buf(ai);
                    for i in 0..g.len() {
                        gb[i] += g[i];
                    }
                }
            }),
        ))
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack0(&mut self, vars: &[Var]) -> Result<Var, TensorError> {
        if vars.is_empty() {
            return Err(TensorError::InvalidArgument("stack0 of no tensors".into()));
        }
        let s0 = self.shape(vars[0]).to_vec();
        for v in vars {
            if self.shape(*v) != s0.as_slice() {
                return Err(TensorError::ShapeMismatch(format!(
                    "stack0: {:?} vs {:?}",
                    self.shape(*v),
                    s0
                )));
            }
        }
        let each: usize = s0.iter().product();
        let mut data = Vec::with_capacity(each * vars.len());
        for v in vars {
            data.extend_from_slice(self.values[v.0].data());
        }
        let mut shape = vec![vars.len()];
        shape.extend_from_slice(&s0);
        let out = Tensor::new(&shape, data).expect("shape");
        let idxs: Vec<usize> = vars.iter().map(|v| v.0).collect();
        Ok(self.push_op(
            out,
            vars,
            Box::new(move |_vals, g, sink| {
                for (i, idx) in idxs.iter().enumerate() {
                    if sink.wants(*idx) {
                        let gb = sink.buf(*idx);
                        let src = &g[i * each..(i + 1) * each];
                        for j in 0..each {
                            gb[j] += src[j];
                        }
                    }
                }
            }),
        ))
    }

    /// Rectangular sub-block copy: element-for-element `out[i] = in[start + i]`.
    pub fn slice(&mut self, a: Var, start: &[usize], size: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if start.len() != shape.len() || size.len() != shape.len() {
            return Err(TensorError::InvalidArgument(format!(
                "slice: rank mismatch start {start:?} size {size:?} for {shape:?}"
            )));
        }
        for d in 0..shape.len() {
            if start[d] + size[d] > shape[d] || size[d] == 0 {
                return Err(TensorError::InvalidArgument(format!(
                    "slice: start {start:?} size {size:?} out of bounds for {shape:?}"
                )));
            }
        }
        let strides = row_major_strides(&shape);
        let numel: usize = size.iter().product();
        let mut offsets = Vec::with_capacity(numel);
        let mut idx = vec![0usize; shape.len()];
        loop {
            let off: usize = idx
                .iter()
                .zip(start)
                .zip(&strides)
                .map(|((i, s), st)| (i + s) * st)
                .sum();
            offsets.push(off);
            // odometer increment over `size`
            let mut d = shape.len();
            loop {
                if d == 0 {
                    break;
                }
                d -= 1;
                idx[d] += 1;
                if idx[d] < size[d] {
                    break;
                }
                idx[d] = 0;
                if d == 0 {
                    break;
                }
            }
            if idx.iter().all(|v| *v == 0) {
                break;
            }
        }
        let src = self.values[a.0].data();
        let data: Vec<S> = offsets.iter().map(|o| src[*o]).collect();
        let out = Tensor::new(size, data).expect("shape");
        let ai = a.0;
        Ok(self.push_op(
            out,
            &[a],
            Box::new(move |_vals, g, sink| {
                if sink.wants(ai) {
                    let gb = sink.buf(ai);
                    for (i, o) in offsets.iter().enumerate() {
                        gb[*o] += g[i];
                    }
                }
            }),
        ))
    }

    /// Last-axis gather with per-slot affine map:
    /// `out[..., i] = in[..., perm[i]] * mul[i] + add[i]`.
    ///
    /// Covers coordinate-frame changes and the flip transform's inverse point
    /// action (mirror x, re-pair points) in one differentiable op.
    pub fn affine_permute(
        &mut self,
        a: Var,
        perm: &[usize],
        mul: &[S],
        add: &[S],
    ) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| {
            TensorError::InvalidArgument("affine_permute: rank-0 input".into())
        })?;
        if perm.len() != n || mul.len() != n || add.len() != n {
            return Err(TensorError::InvalidArgument(format!(
                "affine_permute: perm/mul/add length {} vs last axis {n}",
                perm.len()
            )));
        }
        if perm.iter().any(|p| *p >= n) {
            return Err(TensorError::InvalidArgument(
                "affine_permute: perm index out of range".into(),
            ));
        }
        let rows = self.values[a.0].numel() / n;
        let x = self.values[a.0].data();
        let mut y = vec![S::zero(); x.len()];
        for r in 0..rows {
            let xs = &x[r * n..(r + 1) * n];
            let ys = &mut y[r * n..(r + 1) * n];
            for i in 0..n {
                ys[i] = xs[perm[i]] * mul[i] + add[i];
            }
        }
        let out = Tensor::new(&shape, y).expect("shape");
        let ai = a.0;
        let perm = perm.to_vec();
        let mul = mul.to_vec();
        Ok(self.push_op(
            out,
            &[a],
            Box::new(move |_vals, g, sink| {
                if sink.wants(ai) {
                    let gb = sink.buf(ai);
                    for r in 0..rows {
                        let gs = &g[r * n..(r + 1) * n];
                        let gout = &mut gb[r * n..(r + 1) * n];
                        for i in 0..n {
                            gout[perm[i]] += gs[i] * mul[i];
                        }
                    }
                }
            }),
        ))
    }

    /// Value copy that blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let t = self.values[a.0].clone();
        self.leaf(t)
    }

    /// Align-corners bilinear resize of [C,H,W] over the spatial axes.
    pub fn bilinear_resize_hw(&mut self, a: Var, oh: usize, ow: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 {
            return Err(TensorError::ShapeMismatch(format!(
                "bilinear_resize_hw: want [C,H,W], got {shape:?}"
            )));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        if h == 0 || w == 0 || oh == 0 || ow == 0 {
            return Err(TensorError::InvalidArgument(
                "bilinear_resize_hw: zero extent".into(),
            ));
        }
        let ytab = resize_taps(h, oh);
        let xtab = resize_taps(w, ow);
        let x = self.values[a.0].data();
        let mut y = vec![S::zero(); c * oh * ow];
        for ci in 0..c {
            for oi in 0..oh {
                let (y0, y1, wy) = ytab[oi];
                let wy = S::from_f64(wy);
                let one_wy = S::one() - wy;
                for oj in 0..ow {
                    let (x0, x1, wx) = xtab[oj];
                    let wx = S::from_f64(wx);
                    let one_wx = S::one() - wx;
                    let v00 = x[(ci * h + y0) * w + x0];
                    let v01 = x[(ci * h + y0) * w + x1];
                    let v10 = x[(ci * h + y1) * w + x0];
                    let v11 = x[(ci * h + y1) * w + x1];
                    y[(ci * oh + oi) * ow + oj] = one_wy * (one_wx * v00 + wx * v01)
                        + wy * (one_wx * v10 + wx * v11);
                }
            }
        }
        let out = Tensor::new(&[c, oh, ow], y).expect("shape");
        let ai = a.0;
        Ok(self.push_op(
            out,
            &[a],
            Box::new(move |_vals, g, sink| {
                if !sink.wants(ai) {
                    return;
                }
                let gb = sink.buf(ai);
                for ci in 0..c {
                    for oi in 0..oh {
                        let (y0, y1, wy) = ytab[oi];
                        let wy = S::from_f64(wy);
                        let one_wy = S::one() - wy;
                        for oj in 0..ow {
                            let (x0, x1, wx) = xtab[oj];
                            let wx = S::from_f64(wx);
                            let one_wx = S::one() - wx;
                            let gv = g[(ci * oh + oi) * ow + oj];
                            gb[(ci * h + y0) * w + x0] += gv * one_wy * one_wx;
                            gb[(ci * h + y0) * w + x1] += gv * one_wy * wx;
                            gb[(ci * h + y1) * w + x0] += gv * wy * one_wx;
                            gb[(ci * h + y1) * w + x1] += gv * wy * wx;
                        }
                    }
                }
            }),
        ))
    }

    /// Per-channel mean over the spatial axes: [C,H,W] -> [C].
    pub fn spatial_mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 {
            return Err(TensorError::ShapeMismatch(format!(
                "spatial_mean: want [C,H,W], got {shape:?}"
            )));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let hw = h * w;
        let inv = S::from_f64(1.0 / hw as f64);
        let x = self.values[a.0].data();
        let mut y = vec![S::zero(); c];
        for ci in 0..c {
            let mut s = S::zero();
            for v in &x[ci * hw..(ci + 1) * hw] {
                s += *v;
            }
            y[ci] = s * inv;
        }
        let out = Tensor::new(&[c], y).expect("shape");
        let ai = a.0;
        Ok(self.push_op(
            out,
            &[a],
            Box::new(move |_vals, g, sink| {
                if sink.wants(ai) {
                    let gb = sink.buf(ai);
                    for ci in 0..c {
                        let gv = g[ci] * inv;
                        for o in &mut gb[ci * hw..(ci + 1) * hw] {
                            *o += gv;
                        }
                    }
                }
            }),
        ))
    }

    /// Transposes [C,H,W] into a [H*W, C] matrix of per-location feature rows.
    pub fn chw_to_mat(&mut self, a: Var) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 {
            return Err(TensorError::ShapeMismatch(format!(
                "chw_to_mat: want [C,H,W], got {shape:?}"
            )));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let hw = h * w;
        let x = self.values[a.0].data();
        let mut y = vec![S::zero(); hw * c];
        for ci in 0..c {
            for p in 0..hw {
                y[p * c + ci] = x[ci * hw + p];
            }
        }
        let out = Tensor::new(&[hw, c], y).expect("shape");
        let ai = a.0;
        Ok(self.push_op(
            out,
            &[a],
            Box::new(move |_vals, g, sink| {
                if sink.wants(ai) {
                    let gb = sink.buf(ai);
                    for ci in 0..c {
                        for p in 0..hw {
                            gb[ci * hw + p] += g[p * c + ci];
                        }
                    }
                }
            }),
        ))
    }
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// (lo, hi, frac) source taps for align-corners bilinear resampling.
fn resize_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let pos = if out_len == 1 {
                (in_len - 1) as f64 / 2.0
            } else {
                o as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
            };
            let lo = pos.floor() as usize;
            let lo = lo.min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

// ---- kernels ----
//
// All three matmul variants use fixed accumulation orders, so results are
// reproducible bit-for-bit. Inner loops run over contiguous rows to let the
// compiler vectorize.

/// c[m,n] += a[m,k] x b[k,n]
pub(crate) fn mm_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, av) in arow.iter().enumerate() {
            let av = *av;
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// Fixed-order 8-lane dot product; vectorizes without float reassociation.
#[inline]
fn dot8<S: Scalar>(x: &[S], y: &[S]) -> S {
    const LANES: usize = 8;
    let mut acc = [S::zero(); LANES];
    let chunks = x.len() / LANES;
    for ci in 0..chunks {
        let xs = &x[ci * LANES..ci * LANES + LANES];
        let ys = &y[ci * LANES..ci * LANES + LANES];
        for l in 0..LANES {
            acc[l] = acc[l] + xs[l] * ys[l];
        }
    }
    let mut s = S::zero();
    for l in 0..LANES {
        s += acc[l];
    }
    for i in chunks * LANES..x.len() {
        s += x[i] * y[i];
    }
    s
}

/// c[m,j] += a[m,t] x b[j,t]^T  (both operands row-major, reduction over t)
pub(crate) fn mm_abt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, t: usize, j: usize) {
    debug_assert_eq!(a.len(), m * t);
    debug_assert_eq!(b.len(), j * t);
    debug_assert_eq!(c.len(), m * j);
    for i in 0..m {
        let arow = &a[i * t..(i + 1) * t];
        let crow = &mut c[i * j..(i + 1) * j];
        for jj in 0..j {
            let brow = &b[jj * t..(jj + 1) * t];
            crow[jj] += dot8(arow, brow);
        }
    }
}

/// c[i,j] += a[t,i]^T x b[t,j]  (reduction over leading axis t)
pub(crate) fn mm_atb<S: Scalar>(a: &[S], b: &[S], c: &mut [S], t: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), t * m);
    debug_assert_eq!(b.len(), t * n);
    debug_assert_eq!(c.len(), m * n);
    for tt in 0..t {
        let arow = &a[tt * m..(tt + 1) * m];
        let brow = &b[tt * n..(tt + 1) * n];
        for i in 0..m {
            let av = arow[i];
            let crow = &mut c[i * n..(i + 1) * n];
            for jj in 0..n {
                crow[jj] += av * brow[jj];
            }
        }
    }
}

/// Lowers one [C,H,W] sample to a [C*kH*kW, OH*OW] patch matrix; out-of-bounds
/// taps read 0.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
    col: &mut [S],
) {
    debug_assert_eq!(col.len(), c * kh * kw * oh * ow);
    let ohw = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let rbase = ((ci * kh + ki) * kw + kj) * ohw;
                for oi in 0..oh {
                    let ii = (oi * sh + ki) as isize - ph as isize;
                    let dst = &mut col[rbase + oi * ow..rbase + (oi + 1) * ow];
                    if ii < 0 || ii >= h as isize {
                        dst.iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    let xrow = &x[(ci * h + ii as usize) * w..(ci * h + ii as usize + 1) * w];
                    // valid output columns: 0 <= oj*sw + kj - pw < w
                    let lo = if kj >= pw { 0 } else { (pw - kj).div_ceil(sw) };
                    let hi = if w + pw > kj {
                        (((w + pw - kj - 1) / sw) + 1).min(ow)
                    } else {
                        0
                    };
                    dst[..lo.min(ow)].iter_mut().for_each(|v| *v = S::zero());
                    if sw == 1 {
                        let src0 = lo + kj - pw;
                        dst[lo..hi].copy_from_slice(&xrow[src0..src0 + (hi - lo)]);
                    } else {
                        for oj in lo..hi {
                            dst[oj] = xrow[oj * sw + kj - pw];
                        }
                    }
                    dst[hi..].iter_mut().for_each(|v| *v = S::zero());
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds patch-matrix gradients back onto the
/// input layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_add<S: Scalar>(
    col: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
    gx: &mut [S],
) {
    debug_assert_eq!(gx.len(), c * h * w);
    let ohw = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let rbase = ((ci * kh + ki) * kw + kj) * ohw;
                for oi in 0..oh {
                    let ii = (oi * sh + ki) as isize - ph as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src = &col[rbase + oi * ow..rbase + (oi + 1) * ow];
                    let grow = &mut gx[(ci * h + ii as usize) * w..(ci * h + ii as usize + 1) * w];
                    let lo = if kj >= pw { 0 } else { (pw - kj).div_ceil(sw) };
                    let hi = if w + pw > kj {
                        (((w + pw - kj - 1) / sw) + 1).min(ow)
                    } else {
                        0
                    };
                    for oj in lo..hi {
                        grow[oj * sw + kj - pw] += src[oj];
                    }
                }
            }
        }
    }
}
