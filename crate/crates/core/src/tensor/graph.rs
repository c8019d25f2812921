use super::kernels::{dot, gemm_acc, gemm_nt_acc, gemm_tn_acc, inverse_perm, permute};
use super::{Real, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    BroadcastAdd(Var, Var),
    BroadcastTo(Var),
    Matmul(Var, Var),
    Transpose(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    MaskedSelect(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    FoldPatches {
        x: Var,
        stride: usize,
        coverage: Vec<u32>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Define-by-run computation tape.
///
/// Nodes are appended in execution order, so every node's inputs precede it
/// and a single reverse sweep visits each node once. Nodes that do not depend
/// on any `requires_grad` leaf skip gradient bookkeeping entirely.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    matmul_mults: u64,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            matmul_mults: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scalar multiplies performed by `matmul` so far.
    pub fn matmul_mults(&self) -> u64 {
        self.matmul_mults
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
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

    fn elementwise_rhs(&self, op: &'static str, a: Var, b: Var) -> Result<bool, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(false)
        } else if sb.is_empty() {
            Ok(true)
        } else {
            Err(TensorError::shape(op, sa, sb))
        }
    }

    /// `a + b`; `b` must have `a`'s shape or be rank-0.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        let scalar_rhs = self.elementwise_rhs(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data: Vec<T> = if scalar_rhs {
            let s = vb.item();
            va.data().iter().map(|&x| f(x, s)).collect()
        } else {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        };
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, op, ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let out = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    fn suffix_inner(op: &'static str, big: &[usize], small: &[usize]) -> Result<usize, TensorError> {
        if small.len() > big.len() || big[big.len() - small.len()..] != *small {
            return Err(TensorError::shape(op, big, small));
        }
        Ok(small.iter().product())
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (bias rows,
    /// positional tables).
    pub fn broadcast_add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let inner = Self::suffix_inner("broadcast_add", self.shape(a), self.shape(b))?;
        let vb = self.value(b).data();
        let va = self.value(a);
        let data: Vec<T> = va
            .data()
            .chunks(inner)
            .flat_map(|row| row.iter().zip(vb).map(|(&x, &y)| x + y))
            .collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::BroadcastAdd(a, b), ng))
    }

    /// Repeat `a` along new leading axes so that it takes `shape`.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let inner = Self::suffix_inner("broadcast_to", shape, self.shape(a))?;
        let outer: usize = shape.iter().product::<usize>() / inner;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * inner);
        for _ in 0..outer {
            data.extend_from_slice(src);
        }
        let out = Tensor::from_parts(shape.to_vec(), data);
        let ng = self.ng(a);
        Ok(self.push(out, Op::BroadcastTo(a), ng))
    }

    /// Batched matrix product `[..., m, k] × [..., k, n]`. `b` is either a
    /// plain matrix shared across all of `a`'s batch entries, or carries
    /// exactly `a`'s batch extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let dims = matmul_dims(&sa, &sb)?;
        let (batch, m, k, n, shared) = dims;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let mut out = vec![T::zero(); batch * m * n];
        if shared {
            gemm_acc(va, vb, &mut out, batch * m, k, n);
        } else {
            for i in 0..batch {
                gemm_acc(
                    &va[i * m * k..(i + 1) * m * k],
                    &vb[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        self.matmul_mults += (batch * m * k * n) as u64;
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Matmul(a, b), ng))
    }

    /// `x · w + bias` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var, TensorError> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.broadcast_add(y, b),
            None => Ok(y),
        }
    }

    /// Permute axes: output axis `i` is input axis `perm[i]`.
    pub fn transpose(&mut self, a: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::invalid(
                "transpose",
                format!("{perm:?} is not a permutation of the axes of {shape:?}"),
            ));
        }
        let (out_shape, data) = permute(self.value(a).data(), &shape, perm);
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Transpose(a, perm.to_vec()),
            ng,
        ))
    }

    /// Swap the two trailing axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var, TensorError> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(TensorError::invalid("transpose", "rank must be at least 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.transpose(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(a).reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var, TensorError> {
        let va = self.value(a);
        let d = *va
            .shape()
            .last()
            .ok_or_else(|| TensorError::invalid("softmax", "rank-0 input"))?;
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.ng(a);
        Ok(self.push(out, Op::Softmax(a), ng))
    }

    /// Layer normalization over the last axis with population variance,
    /// followed by the affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let d = *sx
            .last()
            .ok_or_else(|| TensorError::invalid("layer_norm", "rank-0 input"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::shape("layer_norm", &sx, self.shape(gain)));
        }
        let eps = T::of(eps);
        let dn = T::of(d as f64);
        let vx = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = vx.len() / d;
        let mut xhat = Vec::with_capacity(vx.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(vx.len());
        for row in vx.chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        let (xhat, inv_std) = if ng { (xhat, inv_std) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(
            Tensor::from_parts(sx, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::of(SQRT_2_OVER_PI);
        let k = T::of(GELU_CUBIC);
        let half = T::of(0.5);
        let out = self
            .value(a)
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec(), axis), ng))
    }

    /// Take `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || len == 0 || start + len > sx[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("[{start}, {}) on axis {axis} of {sx:?}", start + len),
            ));
        }
        let outer: usize = sx[..axis].iter().product();
        let inner: usize = sx[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * sx[axis] + start) * inner;
            data.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Slice { x, axis, start }, ng))
    }

    /// Flatten the entries where `mask` is true into a rank-1 tensor.
    pub fn masked_select(&mut self, x: Var, mask: &[bool]) -> Result<Var, TensorError> {
        let vx = self.value(x);
        if mask.len() != vx.numel() {
            return Err(TensorError::shape("masked_select", vx.shape(), &[mask.len()]));
        }
        let idx: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        if idx.is_empty() {
            return Err(TensorError::invalid("masked_select", "mask selects nothing"));
        }
        let data: Vec<T> = idx.iter().map(|&i| vx.data()[i]).collect();
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len()], data),
            Op::MaskedSelect(x, idx),
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().copied().sum::<T>() / T::of(v.numel() as f64);
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// `mean((a − b)²)`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::shape("mse", va.shape(), vb.shape()));
        }
        let s = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / T::of(va.numel() as f64);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), ng))
    }

    /// Overlap-average patches `[R, P, pl]` laid at `stride` back onto a
    /// series `[R, (P−1)·stride + pl]`. Samples covered by no patch (only
    /// possible when `stride > pl`) are zero.
    pub fn fold_patches(&mut self, x: Var, stride: usize) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || stride == 0 {
            return Err(TensorError::invalid("fold_patches", format!("need [R, P, pl] and stride ≥ 1, got {sx:?}")));
        }
        let (rows, p, pl) = (sx[0], sx[1], sx[2]);
        let span = (p - 1) * stride + pl;
        let coverage = patch_coverage(p, pl, stride);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); rows * span];
        for r in 0..rows {
            for q in 0..p {
                let patch = &src[(r * p + q) * pl..(r * p + q + 1) * pl];
                let dst = &mut out[r * span + q * stride..r * span + q * stride + pl];
                for (o, &v) in dst.iter_mut().zip(patch) {
                    *o = *o + v;
                }
            }
            for (t, o) in out[r * span..(r + 1) * span].iter_mut().enumerate() {
                if coverage[t] > 1 {
                    *o = *o / T::of(coverage[t] as f64);
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_parts(vec![rows, span], out),
            Op::FoldPatches { x, stride, coverage },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 || shape.iter().any(|&e| e != 1) {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads: leaves });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                leaves[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads: leaves })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                let scalar_rhs = self.value(*b).shape().is_empty() && !self.value(*a).shape().is_empty();
                if let Some(gb) = self.acc(grads, *b) {
                    if scalar_rhs {
                        gb[0] = gb[0] + sign * g.iter().copied().sum::<T>();
                    } else {
                        for (o, &v) in gb.iter_mut().zip(g) {
                            *o = *o + sign * v;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let scalar_rhs = self.value(*b).shape().is_empty() && !self.value(*a).shape().is_empty();
                if let Some(ga) = self.acc(grads, *a) {
                    if scalar_rhs {
                        for (o, &gv) in ga.iter_mut().zip(g) {
                            *o = *o + gv * vb[0];
                        }
                    } else {
                        for ((o, &gv), &bv) in ga.iter_mut().zip(g).zip(vb) {
                            *o = *o + gv * bv;
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    if scalar_rhs {
                        gb[0] = gb[0] + dot(g, va);
                    } else {
                        for ((o, &gv), &av) in gb.iter_mut().zip(g).zip(va) {
                            *o = *o + gv * av;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (o, &gv) in ga.iter_mut().zip(g) {
                        *o = *o + *c * gv;
                    }
                }
            }
            Op::BroadcastAdd(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let inner = gb.len();
                    for row in g.chunks(inner) {
                        add_into(gb, row);
                    }
                }
            }
            Op::BroadcastTo(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let inner = ga.len();
                    for row in g.chunks(inner) {
                        add_into(ga, row);
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (batch, m, k, n, shared) = matmul_dims(sa, sb).expect("checked in forward");
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    if shared {
                        gemm_nt_acc(g, vb, ga, batch * m, n, k);
                    } else {
                        for i in 0..batch {
                            gemm_nt_acc(
                                &g[i * m * n..(i + 1) * m * n],
                                &vb[i * k * n..(i + 1) * k * n],
                                &mut ga[i * m * k..(i + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    if shared {
                        gemm_tn_acc(va, g, gb, batch * m, k, n);
                    } else {
                        for i in 0..batch {
                            gemm_tn_acc(
                                &va[i * m * k..(i + 1) * m * k],
                                &g[i * m * n..(i + 1) * m * n],
                                &mut gb[i * k * n..(i + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                }
            }
            Op::Transpose(a, perm) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let (_, back) = permute(g, node.value.shape(), &inverse_perm(perm));
                    add_into(ga, &back);
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::Softmax(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let y = node.value.data();
                    let d = *node.value.shape().last().expect("rank ≥ 1");
                    for ((gr, yr), or) in g.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)) {
                        let s = dot(gr, yr);
                        for ((o, &gv), &yv) in or.iter_mut().zip(gr).zip(yr) {
                            *o = *o + yv * (gv - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gain).numel();
                let gv = self.value(*gain).data();
                if let Some(gg) = self.acc(grads, *gain) {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, &a), &h) in gg.iter_mut().zip(gr).zip(hr) {
                            *o = *o + a * h;
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let dn = T::of(d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for (r, ((gr, hr), or)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        for ((dh, &a), &w) in dxhat.iter_mut().zip(gr).zip(gv) {
                            *dh = a * w;
                        }
                        let s1: T = dxhat.iter().copied().sum();
                        let s2 = dot(&dxhat, hr);
                        let scale = inv_std[r] / dn;
                        for ((o, &dh), &h) in or.iter_mut().zip(&dxhat).zip(hr) {
                            *o = *o + scale * (dn * dh - s1 - h * s2);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let c = T::of(SQRT_2_OVER_PI);
                    let k = T::of(GELU_CUBIC);
                    let half = T::of(0.5);
                    let three = T::of(3.0);
                    for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(self.value(*a).data()) {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * k * x * x);
                        *o = *o + gv * (half * (T::one() + t) + half * x * dt);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &gv), &y) in ga.iter_mut().zip(g).zip(node.value.data()) {
                        *o = *o + gv * y * (T::one() - y);
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).shape()[*axis] * inner;
                    if let Some(gp) = self.acc(grads, p) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + len];
                            add_into(&mut gp[o * len..(o + 1) * len], src);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let sx = self.value(*x).shape();
                    let len = node.value.shape()[*axis];
                    let outer: usize = sx[..*axis].iter().product();
                    let inner: usize = sx[axis + 1..].iter().product();
                    for o in 0..outer {
                        let off = (o * sx[*axis] + start) * inner;
                        add_into(&mut gx[off..off + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                }
            }
            Op::MaskedSelect(x, idx) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (&i, &gv) in idx.iter().zip(g) {
                        gx[i] = gx[i] + gv;
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let mut s = g[0];
                    if matches!(node.op, Op::Mean(_)) {
                        s = s / T::of(ga.len() as f64);
                    }
                    for o in ga.iter_mut() {
                        *o = *o + s;
                    }
                }
            }
            Op::Mse(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let s = T::of(2.0) * g[0] / T::of(va.len() as f64);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &x), &y) in ga.iter_mut().zip(va).zip(vb) {
                        *o = *o + s * (x - y);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, &x), &y) in gb.iter_mut().zip(va).zip(vb) {
                        *o = *o - s * (x - y);
                    }
                }
            }
            Op::FoldPatches { x, stride, coverage } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let sx = self.value(*x).shape();
                    let (rows, p, pl) = (sx[0], sx[1], sx[2]);
                    let span = coverage.len();
                    for r in 0..rows {
                        for q in 0..p {
                            for j in 0..pl {
                                let t = q * stride + j;
                                let gi = (r * p + q) * pl + j;
                                gx[gi] = gx[gi] + g[r * span + t] / T::of(coverage[t] as f64);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Number of patches covering each sample of the folded span.
pub(crate) fn patch_coverage(patches: usize, patch_len: usize, stride: usize) -> Vec<u32> {
    let span = (patches - 1) * stride + patch_len;
    let mut coverage = vec![0u32; span];
    for q in 0..patches {
        for c in &mut coverage[q * stride..q * stride + patch_len] {
            *c += 1;
        }
    }
    coverage
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o = *o + v;
    }
}

/// `(batch, m, k, n, b_is_shared_matrix)`.
fn matmul_dims(sa: &[usize], sb: &[usize]) -> Result<(usize, usize, usize, usize, bool), TensorError> {
    if sa.len() < 2 || sb.len() < 2 {
        return Err(TensorError::shape("matmul", sa, sb));
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if k != kb {
        return Err(TensorError::shape("matmul", sa, sb));
    }
    let batch: usize = sa[..sa.len() - 2].iter().product();
    if sb.len() == 2 {
        Ok((batch, m, k, n, true))
    } else if sb[..sb.len() - 2] == sa[..sa.len() - 2] {
        Ok((batch, m, k, n, false))
    } else {
        Err(TensorError::shape("matmul", sa, sb))
    }
}

/// Gradients of a scalar loss with respect to the graph's leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when `v` is not a leaf that requires grad or the loss does not
    /// depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
