use std::collections::HashMap;
use std::sync::Arc;

use super::store::{Gradients, ParamId, ParamStore};
use super::{axis_split, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// Right operand is repeated over the left operand's leading axis.
    Lead,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Softplus(Var),
    Log(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    SmoothL1(Var, f64),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm(Var, Vec<f64>),
    SumAll(Var),
    SumAxis(Var, usize),
    Concat(Vec<Var>, usize),
    Gather(Var, Arc<[usize]>),
    SliceCols(Var, usize),
    Reshape(Var),
    ExpandCols(Var),
    SegmentSum(Var, Arc<[usize]>),
    SegmentMax(Var, Vec<usize>),
    SegmentSoftmax(Var, Arc<[usize]>, usize),
    NormalizeRows(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A define-by-run tape. Nodes are appended in evaluation order, so the node
/// list is already topologically sorted for the reverse sweep.
pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients of every node reachable from a scalar loss.
pub struct Grads {
    per_node: Vec<Option<Vec<f64>>>,
    params: Gradients,
}

impl Grads {
    /// Gradient with respect to `v`, if `v` was on a differentiable path.
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.per_node.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn params(&self) -> &Gradients {
        &self.params
    }

    pub fn into_params(self) -> Gradients {
        self.params
    }
}

fn shape_str(s: &[usize]) -> String {
    format!("{s:?}")
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    /// A graph with no parameter store; only constants and inputs.
    pub fn detached() -> Graph<'static> {
        Graph {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient (useful for checking losses against
    /// their direct inputs).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.param_vars.get(&id) {
            return Ok(*v);
        }
        let store = self
            .store
            .ok_or_else(|| Error::invalid("graph has no parameter store"))?;
        if id.0 >= store.len() {
            return Err(Error::invalid(format!("unknown parameter id {}", id.0)));
        }
        let t = store.value(id).clone();
        let v = self.push(t, Op::Param(id), true);
        self.param_vars.insert(id, v);
        Ok(v)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("{} x {}", shape_str(sa), shape_str(sb)),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bb) in orow.iter_mut().zip(brow) {
                    *o += x * bb;
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", shape_str(s)));
        }
        let (m, n) = (s[0], s[1]);
        let t = transpose_data(self.value(a).data(), m, n);
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![n, m], t)?, Op::Transpose(a), ng))
    }

    // ---- elementwise binary -------------------------------------------

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Bcast::Same)
        } else if !sa.is_empty() && &sa[1..] == sb {
            Ok(Bcast::Lead)
        } else {
            Err(Error::shape(
                op,
                format!("{} vs {}", shape_str(sa), shape_str(sb)),
            ))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let mode = self.bcast(name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let inner = bv.len().max(1);
        let data: Vec<f64> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % inner]))
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, mk(a, b, mode), ng))
    }

    /// Elementwise sum; `b` may also match `a`'s trailing dimensions, in which
    /// case it is repeated along the leading axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    // ---- elementwise unary ----------------------------------------------

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        let t = Tensor {
            shape: av.shape().to_vec(),
            data,
        };
        let ng = self.ng(a);
        self.push(t, op, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// `log(1 + exp(a))`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0) + (-x.abs()).exp().ln_1p(), Op::Softplus(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    /// `max(a, lo)`; the gradient is zero where the clamp is active.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.unary(a, |x| x.max(lo), Op::ClampMin(a, lo))
    }

    /// Huber-style smooth L1 of each element with transition point `beta`.
    pub fn smooth_l1(&mut self, a: Var, beta: f64) -> Var {
        self.unary(
            a,
            move |x| {
                if x.abs() < beta {
                    0.5 * x * x / beta
                } else {
                    x.abs() - 0.5 * beta
                }
            },
            Op::SmoothL1(a, beta),
        )
    }

    // ---- normalizations --------------------------------------------------

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        let s = self.shape(a);
        if axis >= s.len() {
            return Err(Error::shape(op, format!("axis {} of {}", axis, shape_str(s))));
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let av = self.value(a);
        let (outer, n, inner) = axis_split(av.shape(), axis);
        let mut out = av.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| o * n * inner + k * inner + i;
                let m = (0..n).map(|k| out[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for k in 0..n {
                    let e = (out[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    s += e;
                }
                for k in 0..n {
                    out[idx(k)] /= s;
                }
            }
        }
        let t = Tensor::new(av.shape().to_vec(), out)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Softmax(a, axis), ng))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", a, axis)?;
        let av = self.value(a);
        let (outer, n, inner) = axis_split(av.shape(), axis);
        let mut out = av.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| o * n * inner + k * inner + i;
                let m = (0..n).map(|k| out[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..n).map(|k| (out[idx(k)] - m).exp()).sum::<f64>().ln();
                for k in 0..n {
                    out[idx(k)] -= lse;
                }
            }
        }
        let t = Tensor::new(av.shape().to_vec(), out)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::LogSoftmax(a, axis), ng))
    }

    /// Normalizes each row of a rank-2 tensor to zero mean and unit variance
    /// (no affine part; compose with `mul`/`add` for gain and bias).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::shape("layer_norm", shape_str(s)));
        }
        let (m, n) = (s[0], s[1]);
        let av = self.value(a).data();
        let mut out = vec![0.0; m * n];
        let mut rstds = Vec::with_capacity(m);
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::LayerNorm(a, rstds), ng))
    }

    /// Scales each row of a rank-2 tensor to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("normalize_rows", shape_str(s)));
        }
        let (m, n) = (s[0], s[1]);
        let av = self.value(a).data();
        let mut out = vec![0.0; m * n];
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let nrm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for j in 0..n {
                out[i * n + j] = row[j] / nrm;
            }
            norms.push(nrm);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::NormalizeRows(a, norms), ng))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", a, axis)?;
        let av = self.value(a);
        let (outer, n, inner) = axis_split(av.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += av.data()[o * n * inner + k * inner + i];
                }
            }
        }
        let mut shape = av.shape().to_vec();
        shape.remove(axis);
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::SumAxis(a, axis), ng))
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean", a, axis)?;
        let n = self.shape(a)[axis];
        if n == 0 {
            return Err(Error::shape("mean", "empty axis"));
        }
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    // ---- structural ------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let rank = self.shape(first).len();
        if axis >= rank {
            return Err(Error::shape("concat", format!("axis {axis} of rank {rank}")));
        }
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == rank
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{} vs {} on axis {}", shape_str(s), shape_str(&base), axis),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let pv = self.value(p);
                let n = pv.shape()[axis];
                out.extend_from_slice(&pv.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec(), axis), ng))
    }

    /// Selects rows (entries along the leading axis) by index; indices may
    /// repeat.
    pub fn gather(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if s.is_empty() {
            return Err(Error::shape("gather", "scalar input"));
        }
        let n = s[0];
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape(
                "gather",
                format!("row {} out of range for {}", bad, shape_str(s)),
            ));
        }
        let inner: usize = s[1..].iter().product();
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            out.extend_from_slice(&av[r * inner..(r + 1) * inner]);
        }
        let mut shape = s.to_vec();
        shape[0] = rows.len();
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Gather(a, rows.into()), ng))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || start > end || end > s[1] {
            return Err(Error::shape(
                "slice_cols",
                format!("{}..{} of {}", start, end, shape_str(s)),
            ));
        }
        let (m, n) = (s[0], s[1]);
        let w = end - start;
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&av[i * n + start..i * n + end]);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![m, w], out)?, Op::SliceCols(a, start), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// Repeats an `[n, 1]` column `cols` times to `[n, cols]`.
    pub fn expand_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || s[1] != 1 {
            return Err(Error::shape("expand_cols", shape_str(s)));
        }
        let m = s[0];
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(m * cols);
        for &x in av {
            out.extend(std::iter::repeat_n(x, cols));
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![m, cols], out)?, Op::ExpandCols(a), ng))
    }

    // ---- segment operations (grid pooling) -------------------------------

    fn check_segments(
        &self,
        op: &'static str,
        a: Var,
        seg: &[usize],
        nseg: usize,
    ) -> Result<()> {
        let s = self.shape(a);
        if s.is_empty() || s[0] != seg.len() {
            return Err(Error::shape(
                op,
                format!("{} rows vs {} segment ids", shape_str(s), seg.len()),
            ));
        }
        if seg.iter().any(|&c| c >= nseg) {
            return Err(Error::shape(op, format!("segment id >= {nseg}")));
        }
        Ok(())
    }

    /// Sums rows that share a segment id: `out[seg[i]] += a[i]`.
    pub fn segment_sum(&mut self, a: Var, seg: &[usize], nseg: usize) -> Result<Var> {
        self.check_segments("segment_sum", a, seg, nseg)?;
        let av = self.value(a);
        let inner: usize = av.shape()[1..].iter().product();
        let mut out = vec![0.0; nseg * inner];
        for (i, &c) in seg.iter().enumerate() {
            for k in 0..inner {
                out[c * inner + k] += av.data()[i * inner + k];
            }
        }
        let mut shape = av.shape().to_vec();
        shape[0] = nseg;
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::SegmentSum(a, seg.into()), ng))
    }

    /// Per-segment, per-channel maximum of a rank-2 tensor. Every segment must
    /// be non-empty.
    pub fn segment_max(&mut self, a: Var, seg: &[usize], nseg: usize) -> Result<Var> {
        self.check_segments("segment_max", a, seg, nseg)?;
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(Error::shape("segment_max", shape_str(av.shape())));
        }
        let c = av.shape()[1];
        let mut out = vec![f64::NEG_INFINITY; nseg * c];
        let mut arg = vec![usize::MAX; nseg * c];
        for (i, &s) in seg.iter().enumerate() {
            for k in 0..c {
                let x = av.data()[i * c + k];
                if arg[s * c + k] == usize::MAX || x > out[s * c + k] {
                    out[s * c + k] = x;
                    arg[s * c + k] = i;
                }
            }
        }
        if arg.iter().any(|&i| i == usize::MAX) && c > 0 {
            return Err(Error::Degenerate("segment_max: empty segment".into()));
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![nseg, c], out)?, Op::SegmentMax(a, arg), ng))
    }

    /// Softmax of a vector (`[n]` or `[n, 1]`) taken separately within each
    /// segment.
    pub fn segment_softmax(&mut self, a: Var, seg: &[usize], nseg: usize) -> Result<Var> {
        self.check_segments("segment_softmax", a, seg, nseg)?;
        let av = self.value(a);
        if av.len() != seg.len() {
            return Err(Error::shape(
                "segment_softmax",
                format!("expects one value per row, got {}", shape_str(av.shape())),
            ));
        }
        let x = av.data();
        let mut max = vec![f64::NEG_INFINITY; nseg];
        for (i, &s) in seg.iter().enumerate() {
            max[s] = max[s].max(x[i]);
        }
        let mut out: Vec<f64> = seg.iter().enumerate().map(|(i, &s)| (x[i] - max[s]).exp()).collect();
        let mut total = vec![0.0; nseg];
        for (i, &s) in seg.iter().enumerate() {
            total[s] += out[i];
        }
        for (i, &s) in seg.iter().enumerate() {
            out[i] /= total[s];
        }
        let t = Tensor::new(av.shape().to_vec(), out)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::SegmentSoftmax(a, seg.into(), nseg), ng))
    }

    // ---- composites ------------------------------------------------------

    /// `softmax(q kᵀ / sqrt(d)) v` with `q: [m, d]`, `k: [n, d]`, `v: [n, dv]`.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk[0] != sv[0] {
            return Err(Error::shape(
                "scaled_dot_attention",
                format!("q {} k {} v {}", shape_str(sq), shape_str(sk), shape_str(sv)),
            ));
        }
        if sk[0] == 0 {
            return Err(Error::shape("scaled_dot_attention", "no keys"));
        }
        let d = sq[1] as f64;
        let kt = self.transpose(k)?;
        let s = self.matmul(q, kt)?;
        let s = self.scale(s, 1.0 / d.sqrt());
        let p = self.softmax(s, 1)?;
        self.matmul(p, v)
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {}", shape_str(lv.shape())),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let mut params = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &grads[i] {
                    params
                        .entries
                        .push((id, Tensor::new(node.value.shape().to_vec(), g.clone())?));
                }
            }
        }
        params.entries.sort_by_key(|(id, _)| *id);
        Ok(Grads {
            per_node: grads,
            params,
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.ng(*a) {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.acc(grads, *a, &da);
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            let drow = &mut db[p * n..(p + 1) * n];
                            for (d, &gg) in drow.iter_mut().zip(grow) {
                                *d += x * gg;
                            }
                        }
                    }
                    self.acc(grads, *b, &db);
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (m, n) = (s[0], s[1]);
                // g is [n, m]
                let da = transpose_data(g, n, m);
                self.acc(grads, *a, &da);
            }
            Op::Add(a, b, mode) => {
                self.acc(grads, *a, g);
                self.acc_bcast(grads, *b, *mode, g.to_vec());
            }
            Op::Sub(a, b, mode) => {
                self.acc(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.acc_bcast(grads, *b, *mode, neg);
            }
            Op::Mul(a, b, mode) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let inner = bv.len().max(1);
                if self.ng(*a) {
                    let da: Vec<f64> = g.iter().enumerate().map(|(k, x)| x * bv[k % inner]).collect();
                    self.acc(grads, *a, &da);
                }
                if self.ng(*b) {
                    let db: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    self.acc_bcast(grads, *b, *mode, db);
                }
            }
            Op::Div(a, b, mode) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let inner = bv.len().max(1);
                if self.ng(*a) {
                    let da: Vec<f64> = g.iter().enumerate().map(|(k, x)| x / bv[k % inner]).collect();
                    self.acc(grads, *a, &da);
                }
                if self.ng(*b) {
                    let db: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(k, x)| {
                            let bb = bv[k % inner];
                            -x * av[k] / (bb * bb)
                        })
                        .collect();
                    self.acc_bcast(grads, *b, *mode, db);
                }
            }
            Op::Scale(a, s) => {
                let da: Vec<f64> = g.iter().map(|x| x * s).collect();
                self.acc(grads, *a, &da);
            }
            Op::AddScalar(a) | Op::Reshape(a) => self.acc(grads, *a, g),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let da: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(gg, &xx)| if xx > 0.0 { *gg } else { 0.0 })
                    .collect();
                self.acc(grads, *a, &da);
            }
            Op::Sigmoid(a) => {
                let da: Vec<f64> = g.iter().zip(y).map(|(gg, yy)| gg * yy * (1.0 - yy)).collect();
                self.acc(grads, *a, &da);
            }
            Op::Exp(a) => {
                let da: Vec<f64> = g.iter().zip(y).map(|(gg, yy)| gg * yy).collect();
                self.acc(grads, *a, &da);
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                let da: Vec<f64> = g.iter().zip(x).map(|(gg, &xx)| gg * sigmoid(xx)).collect();
                self.acc(grads, *a, &da);
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let da: Vec<f64> = g.iter().zip(x).map(|(gg, xx)| gg / xx).collect();
                self.acc(grads, *a, &da);
            }
            Op::Sqrt(a) => {
                let da: Vec<f64> = g.iter().zip(y).map(|(gg, yy)| gg * 0.5 / yy).collect();
                self.acc(grads, *a, &da);
            }
            Op::ClampMin(a, lo) => {
                let x = self.value(*a).data();
                let da: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(gg, &xx)| if xx >= *lo { *gg } else { 0.0 })
                    .collect();
                self.acc(grads, *a, &da);
            }
            Op::SmoothL1(a, beta) => {
                let x = self.value(*a).data();
                let da: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(gg, &xx)| {
                        if xx.abs() < *beta {
                            gg * xx / beta
                        } else {
                            gg * xx.signum()
                        }
                    })
                    .collect();
                self.acc(grads, *a, &da);
            }
            Op::Softmax(a, axis) => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let mut da = vec![0.0; y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |k: usize| o * n * inner + k * inner + ii;
                        let dot: f64 = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..n {
                            da[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                self.acc(grads, *a, &da);
            }
            Op::LogSoftmax(a, axis) => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let mut da = vec![0.0; y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |k: usize| o * n * inner + k * inner + ii;
                        let gs: f64 = (0..n).map(|k| g[idx(k)]).sum();
                        for k in 0..n {
                            da[idx(k)] = g[idx(k)] - y[idx(k)].exp() * gs;
                        }
                    }
                }
                self.acc(grads, *a, &da);
            }
            Op::LayerNorm(a, rstds) => {
                let s = node.value.shape();
                let (m, n) = (s[0], s[1]);
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    let gr = &g[r * n..(r + 1) * n];
                    let yr = &y[r * n..(r + 1) * n];
                    let gm = gr.iter().sum::<f64>() / n as f64;
                    let gym = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        da[r * n + j] = rstds[r] * (gr[j] - gm - yr[j] * gym);
                    }
                }
                self.acc(grads, *a, &da);
            }
            Op::NormalizeRows(a, norms) => {
                let s = node.value.shape();
                let (m, n) = (s[0], s[1]);
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    let gr = &g[r * n..(r + 1) * n];
                    let yr = &y[r * n..(r + 1) * n];
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        da[r * n + j] = (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
                self.acc(grads, *a, &da);
            }
            Op::SumAll(a) => {
                let n = self.value(*a).len();
                self.acc(grads, *a, &vec![g[0]; n]);
            }
            Op::SumAxis(a, axis) => {
                let (outer, n, inner) = axis_split(self.shape(*a), *axis);
                let mut da = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        for ii in 0..inner {
                            da[o * n * inner + k * inner + ii] = g[o * inner + ii];
                        }
                    }
                }
                self.acc(grads, *a, &da);
            }
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[*axis];
                    if self.ng(p) {
                        let mut dp = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let start = o * total * inner + offset * inner;
                            dp.extend_from_slice(&g[start..start + n * inner]);
                        }
                        self.acc(grads, p, &dp);
                    }
                    offset += n;
                }
            }
            Op::Gather(a, rows) => {
                let s = self.shape(*a);
                let inner: usize = s[1..].iter().product();
                let mut da = vec![0.0; s[0] * inner];
                for (j, &r) in rows.iter().enumerate() {
                    for k in 0..inner {
                        da[r * inner + k] += g[j * inner + k];
                    }
                }
                self.acc(grads, *a, &da);
            }
            Op::SliceCols(a, start) => {
                let s = self.shape(*a);
                let (m, n) = (s[0], s[1]);
                let w = node.value.shape()[1];
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    da[r * n + start..r * n + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                self.acc(grads, *a, &da);
            }
            Op::ExpandCols(a) => {
                let cols = node.value.shape()[1];
                let da: Vec<f64> = g.chunks(cols.max(1)).map(|c| c.iter().sum()).collect();
                self.acc(grads, *a, &da);
            }
            Op::SegmentSum(a, seg) => {
                let inner: usize = node.value.shape()[1..].iter().product();
                let mut da = vec![0.0; seg.len() * inner];
                for (r, &s) in seg.iter().enumerate() {
                    da[r * inner..(r + 1) * inner].copy_from_slice(&g[s * inner..(s + 1) * inner]);
                }
                self.acc(grads, *a, &da);
            }
            Op::SegmentMax(a, arg) => {
                let c = node.value.shape()[1];
                let mut da = vec![0.0; self.value(*a).len()];
                for (slot, &src) in arg.iter().enumerate() {
                    let k = slot % c;
                    da[src * c + k] += g[slot];
                }
                self.acc(grads, *a, &da);
            }
            Op::SegmentSoftmax(a, seg, nseg) => {
                let mut dot = vec![0.0; *nseg];
                for (r, &s) in seg.iter().enumerate() {
                    dot[s] += g[r] * y[r];
                }
                let da: Vec<f64> = seg
                    .iter()
                    .enumerate()
                    .map(|(r, &s)| y[r] * (g[r] - dot[s]))
                    .collect();
                self.acc(grads, *a, &da);
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, d: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(d) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(d.to_vec()),
        }
    }

    fn acc_bcast(&self, grads: &mut [Option<Vec<f64>>], b: Var, mode: Bcast, d: Vec<f64>) {
        if !self.nodes[b.0].needs_grad {
            return;
        }
        match mode {
            Bcast::Same => self.acc(grads, b, &d),
            Bcast::Lead => {
                let inner = self.value(b).len().max(1);
                let mut red = vec![0.0; inner];
                for (k, x) in d.iter().enumerate() {
                    red[k % inner] += x;
                }
                self.acc(grads, b, &red);
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn transpose_data(d: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = d[i * n + j];
        }
    }
    t
}
