use super::conv::{conv_backward, conv_forward, gemm_acc, ConvGeometry, MatView};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Pointwise operations exposed through [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Mul,
    Relu,
    Sigmoid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Scale(usize, f64),
    Offset(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Conv(usize, usize, ConvGeometry),
    Upsample(usize, usize),
    Concat(Vec<usize>, usize),
    Narrow { src: usize, axis: usize, start: usize },
    Gather { src: usize, index: Vec<usize> },
    Softmax { src: usize, axis: usize, temperature: f64 },
    L2Normalize { src: usize, axis: usize, eps: f64 },
    LayerNorm { src: usize, inv_std: Vec<f64> },
    SumAll(usize),
    SumAxis { src: usize, axis: usize },
    Bce { logits: usize, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(format!("shapes {a:?} and {b:?} are not broadcastable"))),
        };
    }
    Ok(out)
}

/// For every element of `out_shape`, the flat index of the broadcast source.
fn broadcast_index(out_shape: &[usize], src_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - src_shape.len();
    let mut src_strides = vec![0usize; rank];
    let mut stride = 1;
    for i in (0..src_shape.len()).rev() {
        src_strides[i + offset] = if src_shape[i] == 1 { 0 } else { stride };
        stride *= src_shape[i];
    }
    let n: usize = out_shape.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..n {
        idx.push(cur);
        for d in (0..rank).rev() {
            counter[d] += 1;
            cur += src_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            cur -= src_strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

fn reduce_to(grad: &[f64], out_shape: &[usize], src_shape: &[usize]) -> Vec<f64> {
    if out_shape == src_shape {
        return grad.to_vec();
    }
    let n: usize = src_shape.iter().product();
    let mut g = vec![0.0; n];
    for (o, &s) in broadcast_index(out_shape, src_shape).iter().enumerate() {
        g[s] += grad[o];
    }
    g
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a value that takes no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies a parameter onto the tape; backward accumulates into it.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.requires_grad)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = broadcast_index(&out_shape, &sa);
            let ib = broadcast_index(&out_shape, &sb);
            ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok((Tensor::new(out_shape, data)?, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a.0, b.0), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x.max(0.0)).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a.0);
        self.push(t, Op::Relu(a.0), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| sigmoid(x)).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a.0);
        self.push(t, Op::Sigmoid(a.0), rg)
    }

    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || b.ok_or_else(|| Error::Contract(format!("{kind:?} needs two operands")));
        match kind {
            ElementwiseKind::Add => self.add(a, need_b()?),
            ElementwiseKind::Mul => self.mul(a, need_b()?),
            ElementwiseKind::Relu => Ok(self.relu(a)),
            ElementwiseKind::Sigmoid => Ok(self.sigmoid(a)),
        }
    }

    /// `c · a`.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| c * x).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a.0);
        self.push(t, Op::Scale(a.0, c), rg)
    }

    /// `a + c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x + c).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a.0);
        self.push(t, Op::Offset(a.0), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul inner dimensions differ: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(
            m,
            k,
            n,
            MatView::rows(self.value(a).data(), k),
            MatView::rows(self.value(b).data(), n),
            &mut out,
        );
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a.0, b.0), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape(format!("transpose needs a matrix, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a.0), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a.0);
        Ok(self.push(t, Op::Reshape(a.0), rg))
    }

    /// 2-D convolution of `[C_in, H, W]` with `[C_out, C_in, k, k]` kernels.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input), self.shape(kernel));
        if si.len() != 3 || sk.len() != 4 || si[0] != sk[1] {
            return Err(Error::shape(format!(
                "conv2d expects [C,H,W] input and [O,C,kh,kw] kernel, got {si:?} and {sk:?}"
            )));
        }
        let g = ConvGeometry {
            in_channels: si[0],
            in_h: si[1],
            in_w: si[2],
            out_channels: sk[0],
            kernel_h: sk[2],
            kernel_w: sk[3],
            stride_h: stride,
            stride_w: stride,
            pad_h: padding,
            pad_w: padding,
        };
        self.conv_with(input, kernel, g)
    }

    fn conv_with(&mut self, input: Var, kernel: Var, g: ConvGeometry) -> Result<Var> {
        g.validate()?;
        let out = conv_forward(&g, self.value(input).data(), self.value(kernel).data());
        let t = Tensor::new(vec![g.out_channels, g.out_h(), g.out_w()], out)?;
        let rg = self.rg(input.0) || self.rg(kernel.0);
        Ok(self.push(t, Op::Conv(input.0, kernel.0, g), rg))
    }

    /// 1-D convolution of `[C_in, L]` with `[C_out, C_in, k]` kernels.
    pub fn conv1d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 2 || sk.len() != 3 || si[0] != sk[1] {
            return Err(Error::shape(format!(
                "conv1d expects [C,L] input and [O,C,k] kernel, got {si:?} and {sk:?}"
            )));
        }
        let g = ConvGeometry {
            in_channels: si[0],
            in_h: 1,
            in_w: si[1],
            out_channels: sk[0],
            kernel_h: 1,
            kernel_w: sk[2],
            stride_h: 1,
            stride_w: stride,
            pad_h: 0,
            pad_w: padding,
        };
        g.validate()?;
        let x = self.reshape(input, &[si[0], 1, si[1]])?;
        let k = self.reshape(kernel, &[sk[0], sk[1], 1, sk[2]])?;
        let y = self.conv_with(x, k, g)?;
        self.reshape(y, &[g.out_channels, g.out_w()])
    }

    /// Nearest-neighbour upsampling of `[C, H, W]` by an integer factor.
    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 3 || factor == 0 {
            return Err(Error::shape(format!("upsample expects [C,H,W], got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(a).data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                let srow = &src[(ch * h + y / factor) * w..(ch * h + y / factor + 1) * w];
                let drow = &mut out[(ch * oh + y) * ow..(ch * oh + y + 1) * ow];
                for (x, d) in drow.iter_mut().enumerate() {
                    *d = srow[x / factor];
                }
            }
        }
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::new(vec![c, oh, ow], out)?, Op::Upsample(a.0, factor), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(Error::shape(format!("concat along axis {axis}: {base:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_layout(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let n = self.shape(*p)[axis] * inner;
                out.extend_from_slice(&self.value(*p).data()[o * n..(o + 1) * n]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(ids, axis), rg))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape(format!(
                "narrow [{start}, {}) on axis {axis} of {s:?}",
                start + len
            )));
        }
        let (outer, n, inner) = axis_layout(&s, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::new(shape, out)?, Op::Narrow { src: a.0, axis, start }, rg))
    }

    /// `out[k] = a[index[k]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::shape(format!(
                "gather index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let out = index.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape.to_vec(), out)?;
        let rg = self.rg(a.0);
        Ok(self.push(t, Op::Gather { src: a.0, index }, rg))
    }

    /// `softmax(a / temperature)` along `axis`, max-subtracted.
    pub fn softmax(&mut self, a: Var, axis: usize, temperature: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::shape(format!("axis {axis} out of range for {s:?}")));
        }
        if !(temperature > 0.0) {
            return Err(Error::Domain(format!(
                "softmax temperature must be > 0, got {temperature}"
            )));
        }
        let (outer, n, inner) = axis_layout(&s, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for k in 0..n {
                    let e = ((src[at(k)] - max) / temperature).exp();
                    out[at(k)] = e;
                    sum += e;
                }
                for k in 0..n {
                    out[at(k)] /= sum;
                }
            }
        }
        let rg = self.rg(a.0);
        Ok(self.push(
            Tensor::new(s, out)?,
            Op::Softmax {
                src: a.0,
                axis,
                temperature,
            },
            rg,
        ))
    }

    /// Scales each slice along `axis` to unit Euclidean norm. Slices with
    /// norm below `eps` are divided by `eps` instead.
    pub fn l2_normalize(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::shape(format!("axis {axis} out of range for {s:?}")));
        }
        if !(eps > 0.0) {
            return Err(Error::Domain(format!("l2_normalize epsilon must be > 0, got {eps}")));
        }
        let (outer, n, inner) = axis_layout(&s, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let norm = (0..n).map(|k| src[at(k)].powi(2)).sum::<f64>().sqrt();
                let d = if norm < eps { eps } else { norm };
                for k in 0..n {
                    out[at(k)] = src[at(k)] / d;
                }
            }
        }
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::new(s, out)?, Op::L2Normalize { src: a.0, axis, eps }, rg))
    }

    /// Zero-mean, unit-variance normalisation over the last axis.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let d = *s.last().ok_or_else(|| Error::shape("layer_norm of rank-0 tensor"))?;
        let src = self.value(a).data();
        let rows = src.len() / d;
        let mut out = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = &src[r * d..(r + 1) * d];
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(x) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::new(s, out)?, Op::LayerNorm { src: a.0, inv_std }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(total), Op::SumAll(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`; the result drops that dimension (rank-1 results stay `[1]`).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::shape(format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, n, inner) = axis_layout(&s, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * n + k) * inner + i];
                }
            }
        }
        let mut shape: Vec<usize> = s
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &d)| d)
            .collect();
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::new(shape, out)?, Op::SumAxis { src: a.0, axis }, rg))
    }

    /// Mean binary cross-entropy on logits, in the overflow-free form
    /// `max(x,0) - x*y + ln(1 + exp(-|x|))`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let x = self.value(logits);
        if x.shape() != targets.shape() {
            return Err(Error::shape(format!(
                "bce_with_logits: logits {:?} vs targets {:?}",
                x.shape(),
                targets.shape()
            )));
        }
        if let Some(bad) = targets.data().iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Domain(format!("bce target {bad} outside [0, 1]")));
        }
        let n = x.numel() as f64;
        let total: f64 = x
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let rg = self.rg(logits.0);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::Bce {
                logits: logits.0,
                targets: targets.data().to_vec(),
            },
            rg,
        ))
    }

    /// Back-propagates from a scalar `loss`, accumulating gradients into
    /// every reachable parameter of `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.rg(loss.0) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let push = |grads: &mut Vec<Option<Vec<f64>>>, p: usize, d: Vec<f64>| {
                if !self.nodes[p].requires_grad {
                    return;
                }
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(d),
                }
            };
            let out_shape = node.value.shape();
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => store.accumulate_grad(*id, &g),
                Op::Add(a, b) => {
                    push(&mut grads, *a, reduce_to(&g, out_shape, self.nodes[*a].value.shape()));
                    push(&mut grads, *b, reduce_to(&g, out_shape, self.nodes[*b].value.shape()));
                }
                Op::Sub(a, b) => {
                    push(&mut grads, *a, reduce_to(&g, out_shape, self.nodes[*a].value.shape()));
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    push(&mut grads, *b, reduce_to(&neg, out_shape, self.nodes[*b].value.shape()));
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (ga, gb): (Vec<f64>, Vec<f64>) = if ta.shape() == tb.shape() {
                        (
                            g.iter().zip(tb.data()).map(|(g, y)| g * y).collect(),
                            g.iter().zip(ta.data()).map(|(g, x)| g * x).collect(),
                        )
                    } else {
                        let ia = broadcast_index(out_shape, ta.shape());
                        let ib = broadcast_index(out_shape, tb.shape());
                        (
                            g.iter().zip(&ib).map(|(g, &j)| g * tb.data()[j]).collect(),
                            g.iter().zip(&ia).map(|(g, &j)| g * ta.data()[j]).collect(),
                        )
                    };
                    push(&mut grads, *a, reduce_to(&ga, out_shape, ta.shape()));
                    push(&mut grads, *b, reduce_to(&gb, out_shape, tb.shape()));
                }
                Op::Relu(a) => {
                    let x = self.nodes[*a].value.data();
                    let d = g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                    push(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let d = g.iter().zip(y).map(|(g, &y)| g * y * (1.0 - y)).collect();
                    push(&mut grads, *a, d);
                }
                Op::Scale(a, c) => push(&mut grads, *a, g.iter().map(|v| v * c).collect()),
                Op::Offset(a) | Op::Reshape(a) => push(&mut grads, *a, g),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if self.nodes[*a].requires_grad {
                        let mut da = vec![0.0; m * k];
                        gemm_acc(
                            m,
                            n,
                            k,
                            MatView::rows(&g, n),
                            MatView::transposed(tb.data(), n),
                            &mut da,
                        );
                        push(&mut grads, *a, da);
                    }
                    if self.nodes[*b].requires_grad {
                        let mut db = vec![0.0; k * n];
                        gemm_acc(
                            k,
                            m,
                            n,
                            MatView::transposed(ta.data(), k),
                            MatView::rows(&g, n),
                            &mut db,
                        );
                        push(&mut grads, *b, db);
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (out_shape[1], out_shape[0]);
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] = g[j * r + i];
                        }
                    }
                    push(&mut grads, *a, d);
                }
                Op::Conv(input, kernel, geom) => {
                    let (di, dk) = conv_backward(
                        geom,
                        self.nodes[*input].value.data(),
                        self.nodes[*kernel].value.data(),
                        &g,
                        self.nodes[*input].requires_grad,
                        self.nodes[*kernel].requires_grad,
                    );
                    if let Some(di) = di {
                        push(&mut grads, *input, di);
                    }
                    if let Some(dk) = dk {
                        push(&mut grads, *kernel, dk);
                    }
                }
                Op::Upsample(a, factor) => {
                    let s = self.nodes[*a].value.shape();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let (oh, ow) = (h * factor, w * factor);
                    let mut d = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for y in 0..oh {
                            for x in 0..ow {
                                d[(ch * h + y / factor) * w + x / factor] += g[(ch * oh + y) * ow + x];
                            }
                        }
                    }
                    push(&mut grads, *a, d);
                }
                Op::Concat(parts, axis) => {
                    let (outer, _, inner) = axis_layout(out_shape, *axis);
                    let mut offset = 0;
                    let mut pieces: Vec<Vec<f64>> = parts
                        .iter()
                        .map(|&p| Vec::with_capacity(self.nodes[p].value.numel()))
                        .collect();
                    for _ in 0..outer {
                        for (k, &p) in parts.iter().enumerate() {
                            let n = self.nodes[p].value.shape()[*axis] * inner;
                            pieces[k].extend_from_slice(&g[offset..offset + n]);
                            offset += n;
                        }
                    }
                    for (&p, d) in parts.iter().zip(pieces) {
                        push(&mut grads, p, d);
                    }
                }
                Op::Narrow { src, axis, start } => {
                    let s = self.nodes[*src].value.shape();
                    let (outer, n, inner) = axis_layout(s, *axis);
                    let len = out_shape[*axis];
                    let mut d = vec![0.0; outer * n * inner];
                    for o in 0..outer {
                        let base = (o * n + start) * inner;
                        d[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    push(&mut grads, *src, d);
                }
                Op::Gather { src, index } => {
                    let mut d = vec![0.0; self.nodes[*src].value.numel()];
                    for (k, &i) in index.iter().enumerate() {
                        d[i] += g[k];
                    }
                    push(&mut grads, *src, d);
                }
                Op::Softmax { src, axis, temperature } => {
                    let y = node.value.data();
                    let (outer, n, inner) = axis_layout(out_shape, *axis);
                    let mut d = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + i;
                            let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..n {
                                d[at(k)] = y[at(k)] * (g[at(k)] - dot) / temperature;
                            }
                        }
                    }
                    push(&mut grads, *src, d);
                }
                Op::L2Normalize { src, axis, eps } => {
                    let x = self.nodes[*src].value.data();
                    let y = node.value.data();
                    let (outer, n, inner) = axis_layout(out_shape, *axis);
                    let mut d = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + i;
                            let norm = (0..n).map(|k| x[at(k)].powi(2)).sum::<f64>().sqrt();
                            if norm < *eps {
                                for k in 0..n {
                                    d[at(k)] = g[at(k)] / eps;
                                }
                            } else {
                                let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                                for k in 0..n {
                                    d[at(k)] = (g[at(k)] - y[at(k)] * dot) / norm;
                                }
                            }
                        }
                    }
                    push(&mut grads, *src, d);
                }
                Op::LayerNorm { src, inv_std } => {
                    let y = node.value.data();
                    let dim = *out_shape.last().expect("rank >= 1");
                    let mut d = vec![0.0; y.len()];
                    for (r, is) in inv_std.iter().enumerate() {
                        let (gr, yr) = (&g[r * dim..(r + 1) * dim], &y[r * dim..(r + 1) * dim]);
                        let mg = gr.iter().sum::<f64>() / dim as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / dim as f64;
                        for k in 0..dim {
                            d[r * dim + k] = is * (gr[k] - mg - yr[k] * mgy);
                        }
                    }
                    push(&mut grads, *src, d);
                }
                Op::SumAll(a) => {
                    let n = self.nodes[*a].value.numel();
                    push(&mut grads, *a, vec![g[0]; n]);
                }
                Op::SumAxis { src, axis } => {
                    let s = self.nodes[*src].value.shape();
                    let (outer, n, inner) = axis_layout(s, *axis);
                    let mut d = vec![0.0; outer * n * inner];
                    for o in 0..outer {
                        for k in 0..n {
                            for i in 0..inner {
                                d[(o * n + k) * inner + i] = g[o * inner + i];
                            }
                        }
                    }
                    push(&mut grads, *src, d);
                }
                Op::Bce { logits, targets } => {
                    let x = self.nodes[*logits].value.data();
                    let n = x.len() as f64;
                    let d = x
                        .iter()
                        .zip(targets)
                        .map(|(&x, &y)| g[0] * (sigmoid(x) - y) / n)
                        .collect();
                    push(&mut grads, *logits, d);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let s = tape.elementwise(ElementwiseKind::Add, a, Some(b)).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);

        let r = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.elementwise(ElementwiseKind::Relu, r, None).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let z = tape.constant(t(&[1], &[0.0]));
        let z = tape.elementwise(ElementwiseKind::Sigmoid, z, None).unwrap();
        assert_eq!(tape.value(z).data(), &[0.5]);

        assert!(tape.elementwise(ElementwiseKind::Mul, a, None).is_err());
    }

    #[test]
    fn broadcast_follows_trailing_rule() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.constant(t(&[3], &[10.0, 20.0, 30.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);

        let col = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        let c = tape.mul(a, col).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 8.0, 10.0, 12.0]);

        let bad = tape.constant(t(&[2], &[1.0, 2.0]));
        let err = tape.add(a, bad).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2]"), "{err}");
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let row = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let col = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let p = tape.matmul(row, col).unwrap();
        assert_eq!(tape.value(p).data(), &[11.0]);

        assert!(matches!(tape.matmul(row, row), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_grad_is_row_sums_of_b() {
        let mut store = ParamStore::new();
        let a = store.add("a", t(&[2, 3], &[0.5, -1.0, 2.0, 1.5, 0.0, -0.5]));
        let b = store.add("b", t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        store.get_mut(b).requires_grad = false;
        let mut tape = Tape::new();
        let (va, vb) = (tape.param(&store, a), tape.param(&store, b));
        let p = tape.matmul(va, vb).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss, &mut store).unwrap();
        // d sum(a b) / d a_ij = sum_k b_jk
        let expected = [3.0, 7.0, 11.0, 3.0, 7.0, 11.0];
        assert!(close(store.get(a).grad.as_ref().unwrap(), &expected, 1e-12));
    }

    #[test]
    fn conv2d_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 3, 3], 1.0));
        let k = tape.constant(Tensor::full(&[1, 1, 1, 1], 2.0));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 2.0));

        let x = tape.constant(Tensor::full(&[1, 4, 4], 1.0));
        let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 2]);

        let big = tape.constant(Tensor::full(&[1, 5, 5], 1.0));
        assert!(matches!(tape.conv2d(k, big, 1, 0), Err(Error::Shape(_))));
        let kbig = tape.constant(Tensor::full(&[1, 1, 5, 5], 1.0));
        let small = tape.constant(Tensor::full(&[1, 2, 2], 1.0));
        assert!(matches!(tape.conv2d(small, kbig, 1, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn conv1d_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[4, 7], 1.0));
        let k = tape.constant(Tensor::full(&[2, 4, 1], 0.5));
        let y = tape.conv1d(x, k, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[2, 7]);
        assert!(tape.value(y).data().iter().all(|&v| v == 2.0));

        let data = [0.3, -1.0, 2.5, 4.0];
        let x = tape.constant(t(&[1, 4], &data));
        let k = tape.constant(t(&[1, 1, 1], &[1.0]));
        let y = tape.conv1d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &data);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::full(&[1, 4], 3.0));
        let s = tape.softmax(u, 1, 1.0).unwrap();
        assert!(close(tape.value(s).data(), &[0.25; 4], 1e-15));

        let x = tape.constant(t(&[2], &[0.0, 3f64.ln()]));
        let s = tape.softmax(x, 0, 1.0).unwrap();
        assert!(close(tape.value(s).data(), &[0.25, 0.75], 1e-12));

        let x = tape.constant(t(&[2], &[1.0, 2.0]));
        let s = tape.softmax(x, 0, 0.01).unwrap();
        assert!(tape.value(s).data()[1] > 0.999);

        assert!(matches!(tape.softmax(x, 0, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1000.0, 1001.0, 999.0]));
        let s = tape.softmax(x, 0, 1.0).unwrap();
        let v = tape.value(s);
        assert!(v.is_finite());
        assert!((v.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.l2_normalize(x, 0, 1e-8).unwrap();
        assert!(close(tape.value(y).data(), &[0.6, 0.8], 1e-15));

        let y2 = tape.l2_normalize(y, 0, 1e-8).unwrap();
        assert!(close(tape.value(y2).data(), tape.value(y).data(), 1e-15));

        let z = tape.constant(Tensor::zeros(&[3]));
        let z = tape.l2_normalize(z, 0, 1e-8).unwrap();
        assert_eq!(tape.value(z).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn bce_examples() {
        let mut store = ParamStore::new();
        let w = store.add("logit", t(&[1], &[0.0]));
        let mut tape = Tape::new();
        let x = tape.param(&store, w);
        let loss = tape.bce_with_logits(x, &t(&[1], &[1.0])).unwrap();
        assert!((tape.value(loss).item() - 2f64.ln()).abs() < 1e-12);
        tape.backward(loss, &mut store).unwrap();
        assert!((store.get(w).grad.as_ref().unwrap()[0] + 0.5).abs() < 1e-12);

        let x = tape.constant(t(&[1], &[20.0]));
        let loss = tape.bce_with_logits(x, &t(&[1], &[1.0])).unwrap();
        let v = tape.value(loss).item();
        assert!(v > 0.0 && (v - 2.06e-9).abs() < 1e-10, "{v}");

        assert!(matches!(
            tape.bce_with_logits(x, &t(&[1], &[1.5])),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            tape.bce_with_logits(x, &t(&[2], &[1.0, 0.0])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn backward_examples() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[3], &[0.1, -2.0, 5.0]));
        let mut tape = Tape::new();
        let v = tape.param(&store, w);
        let loss = tape.sum(v);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(w).grad.as_deref(), Some(&[1.0, 1.0, 1.0][..]));

        let mut store = ParamStore::new();
        let w = store.add("w", t(&[2], &[1.0, 2.0]));
        let mut tape = Tape::new();
        let v = tape.param(&store, w);
        let sq = tape.mul(v, v).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(w).grad.as_deref(), Some(&[2.0, 4.0][..]));

        // a second call accumulates
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(w).grad.as_deref(), Some(&[4.0, 8.0][..]));

        assert!(matches!(tape.backward(v, &mut store), Err(Error::Contract(_))));
    }

    #[test]
    fn concat_narrow_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let n = tape.narrow(c, 1, 2, 1).unwrap();
        assert_eq!(tape.value(n).data(), tape.value(b).data());
        let r = tape.concat(&[a, a], 0).unwrap();
        assert_eq!(tape.shape(r), &[4, 2]);
    }

    #[test]
    fn sum_axis_and_layer_norm() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let s0 = tape.sum_axis(a, 0).unwrap();
        assert_eq!(tape.value(s0).data(), &[5.0, 7.0, 9.0]);
        let s1 = tape.sum_axis(a, 1).unwrap();
        assert_eq!(tape.value(s1).data(), &[6.0, 15.0]);
        let ln = tape.layer_norm(a, 0.0).unwrap();
        let row = &tape.value(ln).data()[..3];
        assert!(row.iter().sum::<f64>().abs() < 1e-12);
        assert!((row.iter().map(|v| v * v).sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn upsample_and_gather() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 1, 2], &[1.0, 2.0]));
        let u = tape.upsample_nearest(a, 2).unwrap();
        assert_eq!(tape.shape(u), &[1, 2, 4]);
        assert_eq!(tape.value(u).data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let g = tape.gather(a, vec![1, 0, 1], &[3]).unwrap();
        assert_eq!(tape.value(g).data(), &[2.0, 1.0, 2.0]);
        assert!(tape.gather(a, vec![2], &[1]).is_err());
    }
}
