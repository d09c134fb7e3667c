use std::rc::Rc;

use super::linalg::{gemm, MatRef};
use super::tensor::{numel, Tensor};
use crate::error::{MpgatError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Axpby(Var, f64, Var, f64),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    Softmax(Var),
    MaskedFill(Var, Rc<[bool]>),
    Concat(Vec<Var>, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    MeanAxis(Var, usize),
    Select(Var, usize, usize),
    PairSum(Var, Var),
    CausalConv(Var, Var, usize),
    AddBias(Var, Var),
    Lift(Var, Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Rc<[f64]>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records operations in execution order so that [`Tape::backward`] can
/// replay them in reverse.
///
/// Values are immutable once recorded. Reshapes share storage with their
/// source node.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(MpgatError::dim(format!("{op}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn check_axis(op: &str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(MpgatError::dim(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `src` (with `shape`) into the layout given by `perm`.
fn permute_values(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let gather: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += gather[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= gather[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value: value.into(),
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a copy of `t`; gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.leaf(&t))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec())
            .expect("recorded node has consistent shape")
    }

    /// Gradient accumulated on a leaf by previous `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Adds the gradient held by leaf `v` into `target`'s gradient buffer.
    /// A leaf the loss never reached contributes zeros, so `target` always
    /// ends up with a buffer.
    pub fn accumulate_grad(&self, v: Var, target: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => target.accumulate(g),
            None => target.accumulate(&vec![0.0; target.len()]),
        }
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, op, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| s * x, Op::Scale(a, s))
    }

    /// `alpha · a + beta · b`.
    pub fn axpby(&mut self, alpha: f64, a: Var, beta: f64, b: Var) -> Result<Var> {
        self.binary(
            "axpby",
            a,
            b,
            |x, y| alpha * x + beta * y,
            Op::Axpby(a, alpha, b, beta),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, |x| if x >= 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid(a),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Softmax over the last axis, shifted by each slice's maximum.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let width = *shape
            .last()
            .ok_or_else(|| MpgatError::dim("softmax of a scalar"))?;
        if width == 0 {
            return Err(MpgatError::dim("softmax over an empty axis"));
        }
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(width) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Softmax(a), rg))
    }

    /// Replaces entries where `mask` is true with `fill`.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], fill: f64) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(MpgatError::dim(format!(
                "masked_fill: mask of length {} for shape {:?}",
                mask.len(),
                self.shape(a)
            )));
        }
        let out = self
            .value(a)
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { fill } else { x })
            .collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::MaskedFill(a, mask.into()), rg))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(MpgatError::dim(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::row_major(self.value(a), m, k),
            MatRef::row_major(self.value(b), k, n),
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// Batched product `[B,M,K] x [B,K,P] -> [B,M,P]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(MpgatError::dim(format!("bmm: {sa:?} x {sb:?}")));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        for i in 0..bs {
            gemm(
                MatRef::row_major(&va[i * m * k..(i + 1) * m * k], m, k),
                MatRef::row_major(&vb[i * k * n..(i + 1) * k * n], k, n),
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![bs, m, n], out, Op::BatchMatMul(a, b), rg))
    }

    /// Row-wise bias: `x[R,C] + b[C]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(MpgatError::dim(format!("add_bias: {sx:?} + {sb:?}")));
        }
        let c = sb[0];
        let bias = self.value(b);
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % c])
            .collect();
        let rg = self.rg(x) || self.rg(b);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::AddBias(x, b), rg))
    }

    /// Lifts each trailing scalar channel to a vector: `x[..., F]` with
    /// `w[F, D]` gives `out[..., f, d] = x[..., f] · w[f, d]`.
    pub fn lift(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w));
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(MpgatError::dim(format!("lift: {sx:?} with weights {sw:?}")));
        }
        let (f, d) = (sw[0], sw[1]);
        let wv = self.value(w);
        let mut out = Vec::with_capacity(self.value(x).len() * d);
        for (i, &xv) in self.value(x).iter().enumerate() {
            let row = &wv[(i % f) * d..(i % f + 1) * d];
            out.extend(row.iter().map(|&wj| xv * wj));
        }
        let mut shape = sx;
        shape.push(d);
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(shape, out, Op::Lift(x, w), rg))
    }

    /// `out[p, i, j] = left[p, i] + right[p, j]`.
    pub fn pair_sum(&mut self, left: Var, right: Var) -> Result<Var> {
        let (sl, sr) = (self.shape(left), self.shape(right));
        if sl.len() != 2 || sl != sr {
            return Err(MpgatError::dim(format!("pair_sum: {sl:?} and {sr:?}")));
        }
        let (p, m) = (sl[0], sl[1]);
        let (l, r) = (self.value(left), self.value(right));
        let mut out = Vec::with_capacity(p * m * m);
        for q in 0..p {
            for i in 0..m {
                let li = l[q * m + i];
                out.extend(r[q * m..(q + 1) * m].iter().map(|&rj| li + rj));
            }
        }
        let rg = self.rg(left) || self.rg(right);
        Ok(self.push(vec![p, m, m], out, Op::PairSum(left, right), rg))
    }

    /// Dilated causal convolution over the time axis of a channel-last
    /// tensor: `x[R, T, C_in]`, `w[C_out, C_in, K]` gives `[R, T, C_out]`
    /// with `out[r, t, c] = Σ_{i,k} w[c, i, k] · x[r, t − k·dilation, i]`
    /// and zeros read before `t = 0`.
    pub fn causal_conv(&mut self, x: Var, w: Var, dilation: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[1] {
            return Err(MpgatError::dim(format!("causal_conv: x {sx:?}, w {sw:?}")));
        }
        if dilation == 0 || sw[2] == 0 {
            return Err(MpgatError::contract("causal_conv needs dilation >= 1 and K >= 1"));
        }
        let (rows, t_len, c_in) = (sx[0], sx[1], sx[2]);
        let (c_out, k_len) = (sw[0], sw[2]);
        let mut out = vec![0.0; rows * t_len * c_out];
        let mut tap = vec![0.0; rows * t_len * c_out];
        let xv = self.value(x);
        let wv = self.value(w);
        for k in 0..k_len {
            let shift = k * dilation;
            if shift >= t_len {
                break;
            }
            gemm(
                MatRef::row_major(xv, rows * t_len, c_in),
                tap_weights(wv, c_out, c_in, k_len, k),
                &mut tap,
                0.0,
            );
            for r in 0..rows {
                let base = r * t_len * c_out;
                let n = (t_len - shift) * c_out;
                add_into(
                    &mut out[base + shift * c_out..base + shift * c_out + n],
                    &tap[base..base + n],
                );
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(vec![rows, t_len, c_out], out, Op::CausalConv(x, w, dilation), rg))
    }

    // ---- structural ---------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != self.value(a).len() {
            return Err(MpgatError::dim(format!(
                "reshape {:?} -> {shape:?}",
                self.shape(a)
            )));
        }
        let value = Rc::clone(&self.nodes[a.0].value);
        let rg = self.rg(a);
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Reshape(a),
            requires_grad: rg,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(MpgatError::dim(format!("permute {perm:?} of shape {shape:?}")));
        }
        let out = permute_values(self.value(a), &shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(a);
        Ok(self.push(out_shape, out, Op::Permute(a, perm.to_vec()), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(MpgatError::dim("transpose expects a matrix"));
        }
        self.permute(a, &[1, 0])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| MpgatError::dim("concat of nothing"))?;
        let base = self.shape(first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(MpgatError::dim(format!("concat: {s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let chunk = self.shape(x)[axis] * inner;
                out.extend_from_slice(&self.value(x)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(shape, out, Op::Concat(xs.to_vec(), axis), rg))
    }

    /// Drops `axis` by taking slice `index` along it.
    pub fn select(&mut self, a: Var, axis: usize, index: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis("select", &shape, axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        if index >= len {
            return Err(MpgatError::dim(format!("select: index {index} on axis of length {len}")));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * len + index) * inner;
            out.extend_from_slice(&v[start..start + inner]);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(out_shape, out, Op::Select(a, axis, index), rg))
    }

    // ---- reductions -----------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(Vec::new(), vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(Vec::new(), vec![m], Op::Mean(a), rg)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis("mean_axis", &shape, axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        if len == 0 {
            return Err(MpgatError::dim("mean over an empty axis"));
        }
        let v = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &v[(o * len + l) * inner..(o * len + l + 1) * inner];
                add_into(&mut out[o * inner..(o + 1) * inner], src);
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|x| *x *= inv);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(out_shape, out, Op::MeanAxis(a, axis), rg))
    }

    // ---- reverse pass -------------------------------------------------------

    /// Propagates d(loss)/d(node) back through the tape and adds the result
    /// into every `requires_grad` leaf. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(MpgatError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => add_into(acc, &g),
                    None => node.grad = Some(g),
                }
                continue;
            }
            // ops whose input gradient is the output gradient itself hand
            // the buffer over instead of adding into a fresh zero buffer
            match self.nodes[i].op {
                Op::Reshape(a) => self.pass_through(a, g, &mut grads),
                Op::Add(a, b) => {
                    if self.rg(b) {
                        if self.rg(a) {
                            self.pass_through(a, g.clone(), &mut grads);
                        }
                        self.pass_through(b, g, &mut grads);
                    } else {
                        self.pass_through(a, g, &mut grads);
                    }
                }
                _ => self.backprop_node(i, &g, &mut grads),
            }
        }
        Ok(())
    }

    fn pass_through(&self, v: Var, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => add_into(acc, &g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Lazily zero-initialised gradient slot for an input that needs one.
    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        macro_rules! with_grad {
            ($v:expr, |$ga:ident| $body:block) => {
                if let Some($ga) = self.grad_slot(grads, $v) {
                    $body
                }
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                with_grad!(*a, |ga| { add_into(ga, g) });
                with_grad!(*b, |gb| { add_into(gb, g) });
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |ga| { add_into(ga, g) });
                with_grad!(*b, |gb| {
                    for (d, s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                with_grad!(*a, |ga| {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(vb.iter()) {
                        *d += s * y;
                    }
                });
                with_grad!(*b, |gb| {
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(va.iter()) {
                        *d += s * x;
                    }
                });
            }
            Op::Scale(a, s) => with_grad!(*a, |ga| {
                for (d, gv) in ga.iter_mut().zip(g) {
                    *d += s * gv;
                }
            }),
            Op::Axpby(a, alpha, b, beta) => {
                with_grad!(*a, |ga| {
                    for (d, gv) in ga.iter_mut().zip(g) {
                        *d += alpha * gv;
                    }
                });
                with_grad!(*b, |gb| {
                    for (d, gv) in gb.iter_mut().zip(g) {
                        *d += beta * gv;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let gm = MatRef::row_major(g, m, n);
                with_grad!(*a, |ga| {
                    gemm(gm, MatRef::row_major(self.value(*b), k, n).t(), ga, 1.0);
                });
                with_grad!(*b, |gb| {
                    gemm(MatRef::row_major(self.value(*a), m, k).t(), gm, gb, 1.0);
                });
            }
            Op::BatchMatMul(a, b) => {
                let sa = self.shape(*a);
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = self.shape(*b)[2];
                let (va, vb) = (self.value(*a), self.value(*b));
                with_grad!(*a, |ga| {
                    for q in 0..bs {
                        gemm(
                            MatRef::row_major(&g[q * m * n..(q + 1) * m * n], m, n),
                            MatRef::row_major(&vb[q * k * n..(q + 1) * k * n], k, n).t(),
                            &mut ga[q * m * k..(q + 1) * m * k],
                            1.0,
                        );
                    }
                });
                with_grad!(*b, |gb| {
                    for q in 0..bs {
                        gemm(
                            MatRef::row_major(&va[q * m * k..(q + 1) * m * k], m, k).t(),
                            MatRef::row_major(&g[q * m * n..(q + 1) * m * n], m, n),
                            &mut gb[q * k * n..(q + 1) * k * n],
                            1.0,
                        );
                    }
                });
            }
            Op::Relu(a) => with_grad!(*a, |ga| {
                for ((d, s), y) in ga.iter_mut().zip(g).zip(out.iter()) {
                    if *y > 0.0 {
                        *d += s;
                    }
                }
            }),
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                with_grad!(*a, |ga| {
                    for ((d, s), xv) in ga.iter_mut().zip(g).zip(x.iter()) {
                        *d += if *xv >= 0.0 { *s } else { slope * s };
                    }
                });
            }
            Op::Tanh(a) => with_grad!(*a, |ga| {
                for ((d, s), y) in ga.iter_mut().zip(g).zip(out.iter()) {
                    *d += s * (1.0 - y * y);
                }
            }),
            Op::Sigmoid(a) => with_grad!(*a, |ga| {
                for ((d, s), y) in ga.iter_mut().zip(g).zip(out.iter()) {
                    *d += s * y * (1.0 - y);
                }
            }),
            Op::Abs(a) => {
                let x = self.value(*a);
                with_grad!(*a, |ga| {
                    for ((d, s), xv) in ga.iter_mut().zip(g).zip(x.iter()) {
                        if *xv > 0.0 {
                            *d += s;
                        } else if *xv < 0.0 {
                            *d -= s;
                        }
                    }
                });
            }
            Op::Square(a) => {
                let x = self.value(*a);
                with_grad!(*a, |ga| {
                    for ((d, s), xv) in ga.iter_mut().zip(g).zip(x.iter()) {
                        *d += 2.0 * xv * s;
                    }
                });
            }
            Op::Softmax(a) => {
                let width = *node.shape.last().unwrap();
                with_grad!(*a, |ga| {
                    for ((dr, gr), yr) in ga
                        .chunks_mut(width)
                        .zip(g.chunks(width))
                        .zip(out.chunks(width))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for ((d, gv), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += y * (gv - dot);
                        }
                    }
                });
            }
            Op::MaskedFill(a, mask) => with_grad!(*a, |ga| {
                for ((d, s), m) in ga.iter_mut().zip(g).zip(mask.iter()) {
                    if !m {
                        *d += s;
                    }
                }
            }),
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    with_grad!(x, |gx| {
                        let chunk = len * inner;
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            add_into(&mut gx[o * chunk..(o + 1) * chunk], &g[src..src + chunk]);
                        }
                    });
                    offset += len;
                }
            }
            Op::Reshape(a) => with_grad!(*a, |ga| { add_into(ga, g) }),
            Op::Permute(a, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let back = permute_values(g, &node.shape, &inverse);
                with_grad!(*a, |ga| { add_into(ga, &back) });
            }
            Op::Sum(a) => with_grad!(*a, |ga| {
                ga.iter_mut().for_each(|d| *d += g[0]);
            }),
            Op::Mean(a) => with_grad!(*a, |ga| {
                let s = g[0] / ga.len().max(1) as f64;
                ga.iter_mut().for_each(|d| *d += s);
            }),
            Op::MeanAxis(a, axis) => {
                let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                let inv = 1.0 / len as f64;
                with_grad!(*a, |ga| {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let dst = &mut ga[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s * inv;
                            }
                        }
                    }
                });
            }
            Op::Select(a, axis, index) => {
                let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                with_grad!(*a, |ga| {
                    for o in 0..outer {
                        let dst = (o * len + index) * inner;
                        add_into(&mut ga[dst..dst + inner], &g[o * inner..(o + 1) * inner]);
                    }
                });
            }
            Op::PairSum(l, r) => {
                let s = self.shape(*l);
                let (p, m) = (s[0], s[1]);
                with_grad!(*l, |gl| {
                    for q in 0..p {
                        for i in 0..m {
                            let row = &g[(q * m + i) * m..(q * m + i + 1) * m];
                            gl[q * m + i] += row.iter().sum::<f64>();
                        }
                    }
                });
                with_grad!(*r, |gr| {
                    for q in 0..p {
                        for i in 0..m {
                            let row = &g[(q * m + i) * m..(q * m + i + 1) * m];
                            add_into(&mut gr[q * m..(q + 1) * m], row);
                        }
                    }
                });
            }
            Op::CausalConv(x, w, dilation) => {
                let sx = self.shape(*x);
                let (rows, t_len, c_in) = (sx[0], sx[1], sx[2]);
                let sw = self.shape(*w);
                let (c_out, k_len) = (sw[0], sw[2]);
                let (xv, wv) = (self.value(*x), self.value(*w));
                let mut tap_grad = vec![0.0; rows * t_len * c_out];
                let mut w_tap = vec![0.0; c_in * c_out];
                for k in 0..k_len {
                    let shift = k * dilation;
                    if shift >= t_len {
                        break;
                    }
                    // gradient w.r.t. the unshifted tap product
                    tap_grad.iter_mut().for_each(|v| *v = 0.0);
                    for r in 0..rows {
                        let base = r * t_len * c_out;
                        let n = (t_len - shift) * c_out;
                        tap_grad[base..base + n]
                            .copy_from_slice(&g[base + shift * c_out..base + shift * c_out + n]);
                    }
                    let gt = MatRef::row_major(&tap_grad, rows * t_len, c_out);
                    with_grad!(*x, |gx| {
                        gemm(gt, tap_weights(wv, c_out, c_in, k_len, k).t(), gx, 1.0);
                    });
                    with_grad!(*w, |gw| {
                        // w_tap[i, c] = Σ_rows x[row, i] · tap_grad[row, c]
                        gemm(
                            MatRef::row_major(xv, rows * t_len, c_in).t(),
                            gt,
                            &mut w_tap,
                            0.0,
                        );
                        for i in 0..c_in {
                            for c in 0..c_out {
                                gw[(c * c_in + i) * k_len + k] += w_tap[i * c_out + c];
                            }
                        }
                    });
                }
            }
            Op::AddBias(x, b) => {
                let c = self.shape(*b)[0];
                with_grad!(*x, |gx| { add_into(gx, g) });
                with_grad!(*b, |gb| {
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Lift(x, w) => {
                let sw = self.shape(*w);
                let (f, d) = (sw[0], sw[1]);
                let (xv, wv) = (self.value(*x), self.value(*w));
                with_grad!(*x, |gx| {
                    for (i, dst) in gx.iter_mut().enumerate() {
                        let row = &wv[(i % f) * d..(i % f + 1) * d];
                        let gr = &g[i * d..(i + 1) * d];
                        *dst += row.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
                with_grad!(*w, |gw| {
                    for (i, &xval) in xv.iter().enumerate() {
                        let dst = &mut gw[(i % f) * d..(i % f + 1) * d];
                        for (dv, gv) in dst.iter_mut().zip(&g[i * d..(i + 1) * d]) {
                            *dv += xval * gv;
                        }
                    }
                });
            }
        }
    }
}

/// Tap `k` of a `[C_out, C_in, K]` kernel as a strided `C_in × C_out` view.
fn tap_weights(w: &[f64], c_out: usize, c_in: usize, k_len: usize, k: usize) -> MatRef<'_> {
    MatRef {
        data: &w[k..],
        rows: c_in,
        cols: c_out,
        row_stride: k_len as isize,
        col_stride: (c_in * k_len) as isize,
    }
}
