use super::{Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type CustomVjp<T> = Box<dyn Fn(&[T]) -> Vec<Vec<T>>>;

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, pad: usize },
    LeakyRelu { x: Var, slope: T },
    Relu { x: Var },
    Sigmoid { x: Var },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var },
    Concat { xs: Vec<Var> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulChannel { x: Var, v: Var },
    MulSpatial { x: Var, m: Var },
    Sum { x: Var },
    MeanAbsDiff { a: Var, b: Var },
    /// Opaque op; the closure maps the output gradient to one gradient per input.
    Custom { inputs: Vec<Var>, vjp: CustomVjp<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Execution record for one forward pass. Ops are appended in execution order
/// and [`Tape::backward`] walks them in reverse.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to the tape's differentiable leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when the variable is not a differentiable leaf or the loss does
    /// not depend on it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` if unreachable.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); len])
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf, typically a model parameter.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Stride-1 "same" cross-correlation with optional per-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (_, cin, _, _) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(w).dims4()?;
        if wcin != cin {
            return shape_err(format!("conv weight expects {wcin} input channels, got {cin}"));
        }
        if kh != kw || kh % 2 == 0 {
            return shape_err(format!("conv kernel must be square and odd, got {kh}x{kw}"));
        }
        if let Some(b) = b {
            if self.value(b).numel() != cout {
                return shape_err(format!("conv bias has {} entries, need {cout}", self.value(b).numel()));
            }
        }
        let pad = (kh - 1) / 2;
        let out = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), pad)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, pad }, rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = map(self.value(x), |v| if v > T::zero() { v } else { v * slope });
        let rg = self.rg(x);
        self.push(out, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = map(self.value(x), |v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = map(self.value(x), |v| T::one() / (T::one() + (-v).exp()));
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid { x }, rg)
    }

    /// Mean over H x W for each (batch, channel); output shape `(B, C)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (b, c, h, w) = xv.dims4()?;
        let hw = h * w;
        let inv = T::lit(1.0 / hw as f64);
        let data = xv
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(vec![b, c], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GlobalAvgPool { x }, rg))
    }

    /// `x (B, in) -> x w^T (B, out)` for `w (out, in)`; no bias.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (&[b, din], &[dout, win]) = (xv.shape(), wv.shape()) else {
            return shape_err("linear expects 2D input and weight");
        };
        if din != win {
            return shape_err(format!("linear weight expects {win} inputs, got {din}"));
        }
        let mut out = vec![T::zero(); b * dout];
        T::gemm(b, din, dout, xv.data(), false, wv.data(), true, &mut out, T::zero());
        let out = Tensor::new(vec![b, dout], out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, Op::Linear { x, w }, rg))
    }

    /// Stacks 4D tensors along the channel axis in argument order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return shape_err("concat of zero tensors");
        };
        let (b, _, h, w) = self.value(first).dims4()?;
        let mut total_c = 0;
        for &x in xs {
            let (xb, xc, xh, xw) = self.value(x).dims4()?;
            if (xb, xh, xw) != (b, h, w) {
                return shape_err("concat inputs differ in batch or spatial size");
            }
            total_c += xc;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(b * total_c * hw);
        for bi in 0..b {
            for &x in xs {
                let xv = self.value(x);
                let c = xv.shape()[1];
                data.extend_from_slice(&xv.data()[bi * c * hw..(bi + 1) * c * hw]);
            }
        }
        let out = Tensor::new(vec![b, total_c, h, w], data)?;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(out, Op::Concat { xs: xs.to_vec() }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = zip(self.value(a), self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = zip(self.value(a), self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    /// `x (B, C, H, W)` scaled per channel by `v (B, C)`.
    pub fn mul_channelwise(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xv, vv) = (self.value(x), self.value(v));
        let (b, c, h, w) = xv.dims4()?;
        if vv.shape() != [b, c] {
            return shape_err(format!("channel scale {:?} does not match ({b}, {c})", vv.shape()));
        }
        let hw = h * w;
        let mut data = xv.data().to_vec();
        for (ch, &s) in data.chunks_mut(hw).zip(vv.data()) {
            ch.iter_mut().for_each(|e| *e *= s);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(out, Op::MulChannel { x, v }, rg))
    }

    /// `x (B, C, H, W)` scaled per pixel by `m (B, 1, H, W)`.
    pub fn mul_spatialwise(&mut self, x: Var, m: Var) -> Result<Var> {
        let (xv, mv) = (self.value(x), self.value(m));
        let (b, c, h, w) = xv.dims4()?;
        if mv.shape() != [b, 1, h, w] {
            return shape_err(format!("spatial scale {:?} does not match ({b}, 1, {h}, {w})", mv.shape()));
        }
        let hw = h * w;
        let mut data = xv.data().to_vec();
        for bi in 0..b {
            let mm = &mv.data()[bi * hw..(bi + 1) * hw];
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                data[base..base + hw].iter_mut().zip(mm).for_each(|(e, &s)| *e *= s);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(m);
        Ok(self.push(out, Op::MulSpatial { x, m }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// `mean |a - b|`, a scalar.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return shape_err(format!("loss inputs {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let n = T::lit(av.numel() as f64);
        let s = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x - y).abs())
            .sum::<T>()
            / n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::MeanAbsDiff { a, b }, rg))
    }

    /// Records an externally computed value. `vjp` receives the output
    /// gradient and must return one gradient per input, in order.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor<T>,
        vjp: impl Fn(&[T]) -> Vec<Vec<T>> + 'static,
    ) -> Var {
        let rg = inputs.iter().any(|&x| self.rg(x));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                vjp: Box::new(vjp),
            },
            rg,
        )
    }

    /// Reverse pass from a scalar `loss`. Contributions from several uses of
    /// one value are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return shape_err("backward on an empty tape");
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, pad } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let need_x = self.rg(*x);
                let (dx, dw, db) = conv2d_backward(xv, wv, *pad, g, need_x)?;
                if let (Some(acc), Some(dx)) = (self.acc(grads, *x), dx) {
                    add_into(acc, &dx);
                }
                if let Some(acc) = self.acc(grads, *w) {
                    add_into(acc, &dw);
                }
                if let Some(b) = b {
                    if let Some(acc) = self.acc(grads, *b) {
                        add_into(acc, &db);
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                if let Some(acc) = self.acc(grads, *x) {
                    for ((a, &gi), &xi) in acc.iter_mut().zip(g).zip(xv) {
                        *a += if xi > T::zero() { gi } else { gi * *slope };
                    }
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                if let Some(acc) = self.acc(grads, *x) {
                    for ((a, &gi), &xi) in acc.iter_mut().zip(g).zip(xv) {
                        if xi > T::zero() {
                            *a += gi;
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                if let Some(acc) = self.acc(grads, *x) {
                    for ((a, &gi), &s) in acc.iter_mut().zip(g).zip(out.data()) {
                        *a += gi * s * (T::one() - s);
                    }
                }
            }
            Op::GlobalAvgPool { x } => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let inv = T::lit(1.0 / hw as f64);
                if let Some(acc) = self.acc(grads, *x) {
                    for (ch, &gi) in acc.chunks_mut(hw).zip(g) {
                        ch.iter_mut().for_each(|a| *a += gi * inv);
                    }
                }
            }
            Op::Linear { x, w } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (b, din) = (xv.shape()[0], xv.shape()[1]);
                let dout = wv.shape()[0];
                if let Some(acc) = self.acc(grads, *x) {
                    T::gemm(b, dout, din, g, false, wv.data(), false, acc, T::one());
                }
                if let Some(acc) = self.acc(grads, *w) {
                    T::gemm(dout, b, din, g, true, xv.data(), false, acc, T::one());
                }
            }
            Op::Concat { xs } => {
                let (b, _, h, w) = out.dims4()?;
                let total_c = out.shape()[1];
                let hw = h * w;
                let mut offset = 0;
                for &x in xs {
                    let c = self.value(x).shape()[1];
                    if let Some(acc) = self.acc(grads, x) {
                        for bi in 0..b {
                            let src = &g[(bi * total_c + offset) * hw..(bi * total_c + offset + c) * hw];
                            add_into(&mut acc[bi * c * hw..(bi + 1) * c * hw], src);
                        }
                    }
                    offset += c;
                }
            }
            Op::Add { a, b } => {
                if let Some(acc) = self.acc(grads, *a) {
                    add_into(acc, g);
                }
                if let Some(acc) = self.acc(grads, *b) {
                    add_into(acc, g);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(acc) = self.acc(grads, *a) {
                    for ((d, &gi), &y) in acc.iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                }
                if let Some(acc) = self.acc(grads, *b) {
                    for ((d, &gi), &x) in acc.iter_mut().zip(g).zip(av) {
                        *d += gi * x;
                    }
                }
            }
            Op::MulChannel { x, v } => {
                let (xv, vv) = (self.value(*x), self.value(*v));
                let (_, _, h, w) = xv.dims4()?;
                let hw = h * w;
                if let Some(acc) = self.acc(grads, *x) {
                    for ((a, gc), &s) in acc.chunks_mut(hw).zip(g.chunks(hw)).zip(vv.data()) {
                        a.iter_mut().zip(gc).for_each(|(d, &gi)| *d += gi * s);
                    }
                }
                if let Some(acc) = self.acc(grads, *v) {
                    for ((d, gc), xc) in acc.iter_mut().zip(g.chunks(hw)).zip(xv.data().chunks(hw)) {
                        *d += gc.iter().zip(xc).map(|(&gi, &xi)| gi * xi).sum::<T>();
                    }
                }
            }
            Op::MulSpatial { x, m } => {
                let (xv, mv) = (self.value(*x), self.value(*m));
                let (b, c, h, w) = xv.dims4()?;
                let hw = h * w;
                if let Some(acc) = self.acc(grads, *x) {
                    for bi in 0..b {
                        let mm = &mv.data()[bi * hw..(bi + 1) * hw];
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            for ((d, &gi), &s) in acc[base..base + hw].iter_mut().zip(&g[base..base + hw]).zip(mm) {
                                *d += gi * s;
                            }
                        }
                    }
                }
                if let Some(acc) = self.acc(grads, *m) {
                    for bi in 0..b {
                        let dm = &mut acc[bi * hw..(bi + 1) * hw];
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            for ((d, &gi), &xi) in dm.iter_mut().zip(&g[base..base + hw]).zip(&xv.data()[base..base + hw]) {
                                *d += gi * xi;
                            }
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(acc) = self.acc(grads, *x) {
                    acc.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::MeanAbsDiff { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let scale = g[0] / T::lit(av.len() as f64);
                let sign = |d: T| {
                    if d > T::zero() {
                        scale
                    } else if d < T::zero() {
                        -scale
                    } else {
                        T::zero()
                    }
                };
                if let Some(acc) = self.acc(grads, *a) {
                    for ((d, &x), &y) in acc.iter_mut().zip(av).zip(bv) {
                        *d += sign(x - y);
                    }
                }
                if let Some(acc) = self.acc(grads, *b) {
                    for ((d, &x), &y) in acc.iter_mut().zip(av).zip(bv) {
                        *d -= sign(x - y);
                    }
                }
            }
            Op::Custom { inputs, vjp } => {
                let gs = vjp(g);
                if gs.len() != inputs.len() {
                    return shape_err("custom op returned the wrong number of gradients");
                }
                for (&x, gx) in inputs.iter().zip(&gs) {
                    if let Some(acc) = self.acc(grads, x) {
                        if acc.len() != gx.len() {
                            return shape_err("custom op gradient has the wrong length");
                        }
                        add_into(acc, gx);
                    }
                }
            }
        }
        Ok(())
    }
}

fn map<T: Real>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor {
        shape: x.shape().to_vec(),
        data: x.data().iter().map(|&v| f(v)).collect(),
        grad: None,
    }
}

fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return shape_err(format!("elementwise op on {:?} and {:?}", a.shape(), b.shape()));
    }
    Ok(Tensor {
        shape: a.shape().to_vec(),
        data: a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        grad: None,
    })
}

fn add_into<T: Real>(acc: &mut [T], src: &[T]) {
    acc.iter_mut().zip(src).for_each(|(a, &s)| *a += s);
}

/// Target size (elements) of one im2col tile; keeps the patch matrix in cache.
const TILE_ELEMS: usize = 1 << 14;

/// Output rows per tile for a conv with `ckk` patch rows on width `w`.
fn tile_rows(ckk: usize, h: usize, w: usize) -> usize {
    (TILE_ELEMS / (ckk * w).max(1)).clamp(1, h)
}

/// Unrolls output rows `r0..r1` of `x (C, H, W)` into `(C*k*k, (r1-r0)*W)`
/// patches with zero padding.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, r0: usize, r1: usize, cols: &mut [T]) {
    let hw = h * w;
    let tw = (r1 - r0) * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * tw..][..tw];
                let shift = kx as isize - pad as isize;
                for oy in r0..r1 {
                    let iy = oy as isize + ky as isize - pad as isize;
                    let dst = &mut row[(oy - r0) * w..(oy - r0 + 1) * w];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let lo = (-shift).clamp(0, w as isize) as usize;
                    let hi = (w as isize - shift).clamp(0, w as isize) as usize;
                    dst[..lo].fill(T::zero());
                    dst[hi.max(lo)..].fill(T::zero());
                    if hi > lo {
                        let s0 = (lo as isize + shift) as usize;
                        dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`], accumulating into `x`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, r0: usize, r1: usize, x: &mut [T]) {
    let hw = h * w;
    let tw = (r1 - r0) * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * tw..][..tw];
                let shift = kx as isize - pad as isize;
                let lo = (-shift).clamp(0, w as isize) as usize;
                let hi = (w as isize - shift).clamp(0, w as isize) as usize;
                if hi <= lo {
                    continue;
                }
                for oy in r0..r1 {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let s0 = (lo as isize + shift) as usize;
                    let dst = &mut plane[iy as usize * w + s0..][..hi - lo];
                    let src = &row[(oy - r0) * w + lo..(oy - r0) * w + hi];
                    dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                }
            }
        }
    }
}

fn conv2d_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, pad: usize) -> Result<Tensor<T>> {
    let (bn, cin, h, wd) = x.dims4()?;
    let (cout, _, k, _) = w.dims4()?;
    let hw = h * wd;
    let ckk = cin * k * k;
    let mut out = vec![T::zero(); bn * cout * hw];
    let th = tile_rows(ckk, h, wd);
    let mut cols = if k > 1 { vec![T::zero(); ckk * th * wd] } else { Vec::new() };
    for bi in 0..bn {
        let xb = &x.data()[bi * cin * hw..(bi + 1) * cin * hw];
        let ob = &mut out[bi * cout * hw..(bi + 1) * cout * hw];
        let beta = match b {
            Some(bias) => {
                for (row, &bv) in ob.chunks_mut(hw).zip(bias.data()) {
                    row.fill(bv);
                }
                T::one()
            }
            None => T::zero(),
        };
        if k == 1 {
            T::gemm(cout, ckk, hw, w.data(), false, xb, false, ob, beta);
            continue;
        }
        for r0 in (0..h).step_by(th) {
            let r1 = (r0 + th).min(h);
            let tw = (r1 - r0) * wd;
            im2col(xb, cin, h, wd, k, pad, r0, r1, &mut cols);
            T::gemm_strided(
                cout,
                ckk,
                tw,
                w.data(),
                (ckk, 1),
                &cols,
                (tw, 1),
                &mut ob[r0 * wd..],
                (hw, 1),
                beta,
            );
        }
    }
    Tensor::new(vec![bn, cout, h, wd], out)
}

type ConvGrads<T> = (Option<Vec<T>>, Vec<T>, Vec<T>);

fn conv2d_backward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, pad: usize, g: &[T], need_x: bool) -> Result<ConvGrads<T>> {
    let (bn, cin, h, wd) = x.dims4()?;
    let (cout, _, k, _) = w.dims4()?;
    let hw = h * wd;
    let ckk = cin * k * k;
    let mut dw = vec![T::zero(); w.numel()];
    let mut db = vec![T::zero(); cout];
    let mut dx = need_x.then(|| vec![T::zero(); x.numel()]);
    let th = tile_rows(ckk, h, wd);
    let mut cols = if k > 1 { vec![T::zero(); ckk * th * wd] } else { Vec::new() };
    let mut dcols = if k > 1 && need_x { vec![T::zero(); ckk * th * wd] } else { Vec::new() };
    for bi in 0..bn {
        let gb = &g[bi * cout * hw..(bi + 1) * cout * hw];
        for (d, row) in db.iter_mut().zip(gb.chunks(hw)) {
            *d += row.iter().copied().sum::<T>();
        }
        let xb = &x.data()[bi * cin * hw..(bi + 1) * cin * hw];
        if k == 1 {
            T::gemm(cout, hw, ckk, gb, false, xb, true, &mut dw, T::one());
            if let Some(dx) = dx.as_mut() {
                let dxb = &mut dx[bi * cin * hw..(bi + 1) * cin * hw];
                T::gemm(ckk, cout, hw, w.data(), true, gb, false, dxb, T::one());
            }
            continue;
        }
        for r0 in (0..h).step_by(th) {
            let r1 = (r0 + th).min(h);
            let tw = (r1 - r0) * wd;
            let gt = &gb[r0 * wd..];
            im2col(xb, cin, h, wd, k, pad, r0, r1, &mut cols);
            // dw += g_tile (cout x tw) * cols^T (tw x ckk)
            T::gemm_strided(cout, tw, ckk, gt, (hw, 1), &cols, (1, tw), &mut dw, (ckk, 1), T::one());
            if let Some(dx) = dx.as_mut() {
                // dcols = w^T (ckk x cout) * g_tile (cout x tw)
                T::gemm_strided(ckk, cout, tw, w.data(), (1, ckk), gt, (hw, 1), &mut dcols, (tw, 1), T::zero());
                let dxb = &mut dx[bi * cin * hw..(bi + 1) * cin * hw];
                col2im(&dcols, cin, h, wd, k, pad, r0, r1, dxb);
            }
        }
    }
    Ok((dx, dw, db))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradient_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks d<r, op(inputs)>/d(input[which]) by central differences in f64.
    fn check_op(
        inputs: Vec<Tensor<f64>>,
        which: usize,
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
    ) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let eval = |vals: &[Tensor<f64>]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals
                .iter()
                .enumerate()
                .map(|(i, t)| if i == which { tape.param(t.clone()) } else { tape.input(t.clone()) })
                .collect();
            let out = build(&mut tape, &vars);
            (tape, vars, out)
        };
        let (tape, _, out) = eval(&inputs);
        let weights = rand_tensor(tape.value(out).shape().to_vec(), &mut rng);
        let loss_of = |vals: &[Tensor<f64>]| {
            let (mut tape, vars, out) = eval(vals);
            let r = tape.input(weights.clone());
            let p = tape.mul(out, r).unwrap();
            let l = tape.sum(p);
            (tape.value(l).data()[0], tape, vars, l)
        };
        let (_, tape, vars, l) = loss_of(&inputs);
        let grads = tape.backward(l).unwrap();
        let analytic = grads.get_or_zeros(vars[which], inputs[which].numel());
        let params = inputs[which].data().to_vec();
        let indices: Vec<usize> = (0..params.len()).collect();
        let report = gradient_check(&params, &analytic, &indices, 1e-6, 1e-5, 1e-8, |p| {
            let mut vals = inputs.clone();
            vals[which] = Tensor::new(inputs[which].shape().to_vec(), p.to_vec()).unwrap();
            loss_of(&vals).0
        })
        .unwrap();
        assert!(report.passed, "max rel error {}", report.max_rel_error);
        report.max_rel_error
    }

    #[test]
    fn conv_identity_and_bias() {
        let mut tape = Tape::<f32>::new();
        let x = Tensor::new(vec![1, 2, 2, 2], vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let xv = tape.input(x.clone());
        let w = tape.param(Tensor::new(vec![2, 2, 1, 1], vec![1., 0., 0., 1.]).unwrap());
        let b = tape.param(Tensor::zeros(vec![2]));
        let y = tape.conv2d(xv, w, Some(b)).unwrap();
        assert_eq!(tape.value(y), &x);

        let w0 = tape.param(Tensor::zeros(vec![3, 2, 3, 3]));
        let b0 = tape.param(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let y = tape.conv2d(xv, w0, Some(b0)).unwrap();
        let out = tape.value(y).data();
        assert!(out[..4].iter().all(|&v| v == 0.5));
        assert!(out[4..8].iter().all(|&v| v == -1.0));
        assert!(out[8..].iter().all(|&v| v == 2.0));

        let bad = tape.param(Tensor::zeros(vec![1, 3, 3, 3]));
        assert!(tape.conv2d(xv, bad, None).is_err());
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(vec![2, 3, 5, 4], &mut rng);
        let w = rand_tensor(vec![2, 3, 3, 3], &mut rng);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.input(x.clone()), tape.input(w.clone()));
        let y = tape.conv2d(xv, wv, None).unwrap();
        let y = tape.value(y);
        for b in 0..2 {
            for o in 0..2 {
                for r in 0..5 {
                    for c in 0..4 {
                        let mut acc = 0.0;
                        for i in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (ir, ic) = (r as isize + ky - 1, c as isize + kx - 1);
                                    if (0..5).contains(&ir) && (0..4).contains(&ic) {
                                        acc += x.data()[((b * 3 + i) * 5 + ir as usize) * 4 + ic as usize]
                                            * w.data()[((o * 3 + i) * 3 + ky as usize) * 3 + kx as usize];
                                    }
                                }
                            }
                        }
                        let got = y.data()[((b * 2 + o) * 5 + r) * 4 + c];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    /// Direct-sum "same" convolution oracle.
    fn direct_conv(x: &Tensor<f64>, w: &Tensor<f64>) -> Vec<f64> {
        let (bn, cin, h, wd) = x.dims4().unwrap();
        let (cout, _, k, _) = w.dims4().unwrap();
        let p = (k / 2) as isize;
        let mut out = vec![0.0; bn * cout * h * wd];
        for b in 0..bn {
            for o in 0..cout {
                for r in 0..h {
                    for c in 0..wd {
                        let mut acc = 0.0;
                        for i in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let (ir, ic) = (r as isize + ky as isize - p, c as isize + kx as isize - p);
                                    if (0..h as isize).contains(&ir) && (0..wd as isize).contains(&ic) {
                                        acc += x.data()[((b * cin + i) * h + ir as usize) * wd + ic as usize]
                                            * w.data()[((o * cin + i) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out[((b * cout + o) * h + r) * wd + c] = acc;
                    }
                }
            }
        }
        out
    }

    /// Images tall enough to be split into several im2col tiles.
    #[test]
    fn tiled_conv_matches_oracle_and_is_bilinear() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for (cin, k) in [(4, 3), (2, 5)] {
            let x = rand_tensor(vec![2, cin, 37, 30], &mut rng);
            let w = rand_tensor(vec![3, cin, k, k], &mut rng);
            assert!(tile_rows(cin * k * k, 37, 30) < 37);
            let mut tape = Tape::new();
            let (xv, wv) = (tape.param(x.clone()), tape.param(w.clone()));
            let y = tape.conv2d(xv, wv, None).unwrap();
            let want = direct_conv(&x, &w);
            let got = tape.value(y).data();
            assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
            // <conv(x, w), g> = <x, dx> = <w, dw> for any g.
            let g = rand_tensor(vec![2, 3, 37, 30], &mut rng);
            let gv = tape.input(g.clone());
            let prod = tape.mul(y, gv).unwrap();
            let l = tape.sum(prod);
            let grads = tape.backward(l).unwrap();
            let yg: f64 = want.iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let xdx: f64 = x.data().iter().zip(grads.get(xv).unwrap()).map(|(a, b)| a * b).sum();
            let wdw: f64 = w.data().iter().zip(grads.get(wv).unwrap()).map(|(a, b)| a * b).sum();
            assert!((yg - xdx).abs() < 1e-10 * yg.abs().max(1.0));
            assert!((yg - wdw).abs() < 1e-10 * yg.abs().max(1.0));
        }
    }

    #[test]
    fn primitive_vjps_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(vec![2, 3, 4, 5], &mut rng);
        let w3 = rand_tensor(vec![4, 3, 3, 3], &mut rng);
        let w1 = rand_tensor(vec![2, 3, 1, 1], &mut rng);
        let b = rand_tensor(vec![4], &mut rng);
        let conv = |t: &mut Tape<f64>, v: &[Var]| t.conv2d(v[0], v[1], Some(v[2])).unwrap();
        for which in 0..3 {
            check_op(vec![x.clone(), w3.clone(), b.clone()], which, conv);
        }
        check_op(vec![x.clone(), w1.clone()], 1, |t, v| t.conv2d(v[0], v[1], None).unwrap());
        check_op(vec![x.clone()], 0, |t, v| t.leaky_relu(v[0], 0.01));
        check_op(vec![x.clone()], 0, |t, v| t.relu(v[0]));
        check_op(vec![x.clone()], 0, |t, v| t.sigmoid(v[0]));
        check_op(vec![x.clone()], 0, |t, v| t.global_avg_pool(v[0]).unwrap());
        let fx = rand_tensor(vec![2, 6], &mut rng);
        let fw = rand_tensor(vec![3, 6], &mut rng);
        for which in 0..2 {
            check_op(vec![fx.clone(), fw.clone()], which, |t, v| t.linear(v[0], v[1]).unwrap());
        }
        let y = rand_tensor(vec![2, 2, 4, 5], &mut rng);
        for which in 0..2 {
            check_op(vec![x.clone(), y.clone()], which, |t, v| t.concat_channels(&[v[0], v[1]]).unwrap());
        }
        let x2 = rand_tensor(vec![2, 3, 4, 5], &mut rng);
        for which in 0..2 {
            check_op(vec![x.clone(), x2.clone()], which, |t, v| t.add(v[0], v[1]).unwrap());
            check_op(vec![x.clone(), x2.clone()], which, |t, v| t.mul(v[0], v[1]).unwrap());
        }
        let cv = rand_tensor(vec![2, 3], &mut rng);
        let sm = rand_tensor(vec![2, 1, 4, 5], &mut rng);
        for which in 0..2 {
            check_op(vec![x.clone(), cv.clone()], which, |t, v| t.mul_channelwise(v[0], v[1]).unwrap());
            check_op(vec![x.clone(), sm.clone()], which, |t, v| t.mul_spatialwise(v[0], v[1]).unwrap());
        }
    }

    #[test]
    fn activations_pointwise() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::new(vec![3], vec![2.0, -1.0, 0.0]).unwrap());
        let l = tape.leaky_relu(x, 0.01);
        assert_eq!(tape.value(l).data(), &[2.0, -0.01, 0.0]);
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[2.0, 0.0, 0.0]);
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).data()[2], 0.5);

        let mut tape = Tape::<f64>::new();
        let z = tape.param(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(z).unwrap()[0], 0.25);
        let h: f64 = 1e-5;
        let fd = (1.0 / (1.0 + (-h).exp()) - 1.0 / (1.0 + h.exp())) / (2.0 * h);
        assert!((fd - 0.25).abs() < 1e-9);
    }

    #[test]
    fn pooling_and_linear_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap());
        let p = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(p).data(), &[2.5]);
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.25; 4]);

        let c = tape.input(Tensor::full(vec![1, 2, 3, 3], 1.5));
        let p = tape.global_avg_pool(c).unwrap();
        assert_eq!(tape.value(p).data(), &[1.5, 1.5]);

        let fx = tape.input(Tensor::new(vec![1, 2], vec![3., -4.]).unwrap());
        let eye = tape.input(Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap());
        let zero = tape.input(Tensor::zeros(vec![5, 2]));
        let y = tape.linear(fx, eye).unwrap();
        assert_eq!(tape.value(y).data(), &[3., -4.]);
        let y = tape.linear(fx, zero).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 5]);
        assert!(tape.linear(fx, c).is_err());
    }

    #[test]
    fn concat_and_broadcast_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_tensor(vec![2, 3, 2, 2], &mut rng);
        let b = rand_tensor(vec![2, 5, 2, 2], &mut rng);
        let mut tape = Tape::new();
        let (av, bv) = (tape.input(a.clone()), tape.input(b.clone()));
        let one = tape.concat_channels(&[av]).unwrap();
        assert_eq!(tape.value(one), &a);
        let cat = tape.concat_channels(&[av, bv]).unwrap();
        assert_eq!(tape.value(cat).shape(), &[2, 8, 2, 2]);
        assert_eq!(tape.value(cat).slice_channels(0, 3).unwrap(), a);
        assert_eq!(tape.value(cat).slice_channels(3, 5).unwrap(), b);
        let odd = tape.input(Tensor::zeros(vec![2, 1, 3, 2]));
        assert!(tape.concat_channels(&[av, odd]).is_err());

        let ones = tape.input(Tensor::full(vec![2, 3], 1.0));
        let same = tape.mul_channelwise(av, ones).unwrap();
        assert_eq!(tape.value(same), &a);
        let mut v = vec![1.0; 6];
        v[1] = 0.0;
        let vz = tape.input(Tensor::new(vec![2, 3], v).unwrap());
        let z = tape.mul_channelwise(av, vz).unwrap();
        assert!(tape.value(z).data()[4..8].iter().all(|&e| e == 0.0));
        assert!(tape.mul_channelwise(av, bv).is_err());
        let m = tape.input(Tensor::full(vec![2, 1, 2, 2], 1.0));
        let same = tape.mul_spatialwise(av, m).unwrap();
        assert_eq!(tape.value(same), &a);
    }

    #[test]
    fn backward_basics() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![3], vec![1., -2., 3.]).unwrap());
        let s = tape.sum(x);
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[1.0; 3]);
        let xx = tape.mul(x, x).unwrap();
        let d = tape.sum(xx);
        assert_eq!(tape.backward(d).unwrap().get(x).unwrap(), &[2., -4., 6.]);
        assert!(tape.backward(xx).is_err());
        let empty = Tape::<f64>::new();
        assert!(empty.backward(Var(0)).is_err());

        // A parameter the loss does not touch has no gradient recorded.
        let unused = tape.param(Tensor::zeros(vec![2]));
        let g = tape.backward(d).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.get_or_zeros(unused, 2), vec![0.0, 0.0]);
    }

    #[test]
    fn reuse_accumulates() {
        // f(x) = sum(sigmoid(x) * x + x): x used three times.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(vec![1, 2, 3, 3], &mut rng);
        check_op(vec![x], 0, |t, v| {
            let s = t.sigmoid(v[0]);
            let p = t.mul(s, v[0]).unwrap();
            t.add(p, v[0]).unwrap()
        });
    }

    #[test]
    fn mean_abs_diff_values_and_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::new(vec![4], vec![0.5, 1.0, 1.5, 2.0]).unwrap());
        let b = tape.input(Tensor::new(vec![4], vec![0.0, 0.5, 1.0, 1.5]).unwrap());
        let l = tape.mean_abs_diff(a, b).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.5);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap(), &[0.25; 4]);
        let same = tape.mean_abs_diff(a, a).unwrap();
        assert_eq!(tape.value(same).data()[0], 0.0);
    }

    #[test]
    fn forward_is_bit_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(vec![1, 3, 6, 6], &mut rng).cast::<f32>();
        let w = rand_tensor(vec![4, 3, 3, 3], &mut rng).cast::<f32>();
        let run = || {
            let mut t = Tape::<f32>::new();
            let (xv, wv) = (t.input(x.clone()), t.input(w.clone()));
            let y = t.conv2d(xv, wv, None).unwrap();
            let y = t.sigmoid(y);
            t.value(y).data().to_vec()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
