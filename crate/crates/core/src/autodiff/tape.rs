use std::collections::HashMap;

use super::{AutodiffError, Gradients, ParamId, ParamStore, Scalar, Tensor};

/// Stabiliser added to the variance inside layer normalisation.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<T> {
    Owned(Vec<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: T },
    Tanh { a: Var },
    Gelu { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var>, outer: usize, inner: Vec<usize> },
    MaskFill { a: Var, mask: Vec<bool> },
    Softmax { a: Var },
    Reshape { a: Var },
    Permute { a: Var, src: Vec<usize> },
    GatherRows { a: Var, rows: Vec<usize> },
    L2NormalizeRows { a: Var, norms: Vec<T> },
    SoftmaxXent { logits: Var, targets: Vec<usize>, coef: Vec<T>, probs: Vec<T> },
    Sum { a: Var },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Value<T>,
    op: Op<T>,
    tracked: bool,
}

/// Record of executed operations over one forward pass.
///
/// Parameters are borrowed from a [`ParamStore`] rather than copied, so a
/// tape lives no longer than the store it reads from. Calling
/// [`Tape::backward`] replays the record in reverse and returns the
/// gradient of a scalar with respect to every parameter that was used.
pub struct Tape<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::new(), param_nodes: HashMap::new(), grad_enabled: true }
    }

    /// A tape that records values only; `backward` on it yields no gradients.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self { grad_enabled: false, ..Self::new(params) }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Handles to dropped
    /// nodes become invalid; incremental decoders use this to discard
    /// per-step work while keeping the encoder output.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.param_nodes.retain(|_, v| v.0 < len);
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, tracked: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        let tracked = tracked && self.grad_enabled;
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node { shape, value: Value::Owned(data), op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let shape = self.params.get(id).shape().to_vec();
        self.nodes.push(Node { shape, value: Value::Param(id), op: Op::Leaf, tracked: self.grad_enabled });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self.params.get(*id).data(),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("recorded shape is valid")
    }

    /// Value of a single-element node.
    pub fn item(&self, v: Var) -> T {
        self.value(v)[0]
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.value(a), (k as isize, 1), self.value(b), (n as isize, 1), T::zero(), &mut out, (n as isize, 1));
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, tracked))
    }

    /// Batched product of `[s, m, k]` with `[s, k, n]`, or with `[s, n, k]`
    /// transposed when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch("batch_matmul", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(mismatch("batch_matmul", sa, sb));
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        let b_strides = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        for s in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &av[s * m * k..(s + 1) * m * k],
                (k as isize, 1),
                &bv[s * k * n..(s + 1) * k * n],
                b_strides,
                T::zero(),
                &mut out[s * m * n..(s + 1) * m * n],
                (n as isize, 1),
            );
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(vec![batch, m, n], out, Op::BatchMatMul { a, b, batch, m, k, n, trans_b }, tracked))
    }

    /// Elementwise sum. `b` may also match a trailing suffix of `a`'s shape,
    /// in which case it is tiled (bias addition); other broadcasts are rejected.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(mismatch("add", sa, sb));
        }
        let shape = sa.to_vec();
        let bv = self.value(b);
        let width = bv.len();
        let out: Vec<T> = self.value(a).chunks(width).flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x + y)).collect();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(shape, out, Op::Add { a, b }, tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch("mul", sa, sb));
        }
        let shape = sa.to_vec();
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(shape, out, Op::Mul { a, b }, tracked))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let shape = self.shape(a).to_vec();
        let out = self.value(a).iter().map(|&x| x * factor).collect();
        let tracked = self.tracked(a);
        self.push(shape, out, Op::Scale { a, factor }, tracked)
    }

    /// `x · w + bias` for `x: [r, i]`, `w: [i, o]`, `bias: [o]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var, AutodiffError> {
        let xw = self.matmul(x, w)?;
        self.add(xw, bias)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let out = self.value(a).iter().map(|x| x.tanh()).collect();
        let tracked = self.tracked(a);
        self.push(shape, out, Op::Tanh { a }, tracked)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let out = self.value(a).iter().map(|&x| gelu_forward(x)).collect();
        let tracked = self.tracked(a);
        self.push(shape, out, Op::Gelu { a }, tracked)
    }

    /// Normalises over the last dimension, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, AutodiffError> {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().expect("non-empty shape");
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(mismatch("layer_norm", &sx, self.shape(gamma)));
        }
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let nf = T::from_usize(n).unwrap();
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let rows = xv.len() / n;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv[j] + bv[j];
            }
        }
        let tracked = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        Ok(self.push(sx, out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, tracked))
    }

    /// Rows of `table: [v, d]` selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(mismatch("embedding", st, &[ids.len()]));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(AutodiffError::IndexOutOfRange { op: "embedding", index: bad, bound: v });
        }
        if ids.is_empty() {
            return Err(AutodiffError::InvalidShape { shape: vec![0, d] });
        }
        let tv = self.value(table);
        let out: Vec<T> = ids.iter().flat_map(|&i| tv[i * d..(i + 1) * d].iter().copied()).collect();
        let tracked = self.tracked(table);
        Ok(self.push(vec![ids.len(), d], out, Op::Embedding { table, ids: ids.to_vec() }, tracked))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = self.shape(*parts.first().ok_or(AutodiffError::InvalidShape { shape: vec![] })?).to_vec();
        if axis >= first.len() {
            return Err(mismatch("concat", &first, &[axis]));
        }
        let mut shape = first.clone();
        shape[axis] = 0;
        for &p in parts {
            let sp = self.shape(p);
            let agrees = sp.len() == first.len() && sp.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !agrees {
                return Err(mismatch("concat", &first, sp));
            }
            shape[axis] += sp[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let tail: usize = first[axis + 1..].iter().product();
        let inner: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis] * tail).collect();
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&inner) {
                out.extend_from_slice(&self.value(p)[o * w..(o + 1) * w]);
            }
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(shape, out, Op::Concat { parts: parts.to_vec(), outer, inner }, tracked))
    }

    /// Replaces entries where `mask` is true with `fill`.
    pub fn mask_fill(&mut self, a: Var, mask: &[bool], fill: T) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        if mask.len() != numel(&shape) {
            return Err(mismatch("mask_fill", &shape, &[mask.len()]));
        }
        let out = self.value(a).iter().zip(mask).map(|(&x, &m)| if m { fill } else { x }).collect();
        let tracked = self.tracked(a);
        Ok(self.push(shape, out, Op::MaskFill { a, mask: mask.to_vec() }, tracked))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().unwrap();
        let mut out = self.value(a).to_vec();
        out.chunks_mut(n).for_each(softmax_in_place);
        let tracked = self.tracked(a);
        self.push(shape, out, Op::Softmax { a }, tracked)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, AutodiffError> {
        if numel(&shape) != numel(self.shape(a)) || shape.contains(&0) {
            return Err(mismatch("reshape", self.shape(a), &shape));
        }
        let out = self.value(a).to_vec();
        let tracked = self.tracked(a);
        Ok(self.push(shape, out, Op::Reshape { a }, tracked))
    }

    /// Reorders axes: output axis `d` is input axis `axes[d]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var, AutodiffError> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if axes.len() != sa.len() || axes.iter().any(|&x| x >= sa.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(mismatch("permute", &sa, axes));
        }
        let rank = sa.len();
        let mut in_strides = vec![1usize; rank];
        for d in (0..rank.saturating_sub(1)).rev() {
            in_strides[d] = in_strides[d + 1] * sa[d + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&x| sa[x]).collect();
        let strides: Vec<usize> = axes.iter().map(|&x| in_strides[x]).collect();
        let total = numel(&sa);
        let mut src = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        for _ in 0..total {
            src.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let av = self.value(a);
        let out = src.iter().map(|&i| av[i]).collect();
        let tracked = self.tracked(a);
        Ok(self.push(out_shape, out, Op::Permute { a, src }, tracked))
    }

    /// Selects slices along the first axis (rows may repeat).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, AutodiffError> {
        let sa = self.shape(a).to_vec();
        if let Some(&bad) = rows.iter().find(|&&r| r >= sa[0]) {
            return Err(AutodiffError::IndexOutOfRange { op: "gather_rows", index: bad, bound: sa[0] });
        }
        if rows.is_empty() {
            return Err(AutodiffError::InvalidShape { shape: vec![0] });
        }
        let w = numel(&sa[1..]);
        let av = self.value(a);
        let out: Vec<T> = rows.iter().flat_map(|&r| av[r * w..(r + 1) * w].iter().copied()).collect();
        let mut shape = sa;
        shape[0] = rows.len();
        let tracked = self.tracked(a);
        Ok(self.push(shape, out, Op::GatherRows { a, rows: rows.to_vec() }, tracked))
    }

    /// Scales every row of a `[r, n]` matrix to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(mismatch("l2_normalize_rows", &sa, &[]));
        }
        let n = sa[1];
        let floor = T::from_f64_lossy(1e-12);
        let av = self.value(a);
        let norms: Vec<T> = av.chunks(n).map(|r| r.iter().map(|&x| x * x).sum::<T>().sqrt().max(floor)).collect();
        let out = av.chunks(n).zip(&norms).flat_map(|(r, &z)| r.iter().map(move |&x| x / z)).collect();
        let tracked = self.tracked(a);
        Ok(self.push(sa, out, Op::L2NormalizeRows { a, norms }, tracked))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`,
    /// over positions whose target differs from `pad_id`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], pad_id: Option<usize>) -> Result<Var, AutodiffError> {
        let count = targets.iter().filter(|&&t| Some(t) != pad_id).count();
        if count == 0 {
            return Err(AutodiffError::EmptyTarget);
        }
        let w = T::one() / T::from_usize(count).unwrap();
        let coef: Vec<T> = targets.iter().map(|&t| if Some(t) == pad_id { T::zero() } else { w }).collect();
        self.weighted_cross_entropy(logits, targets, &coef)
    }

    /// `Σ_i coef[i] · (−log softmax(logits_i)[targets[i]])`. Rows with zero
    /// coefficient may carry any in-range target.
    pub fn weighted_cross_entropy(&mut self, logits: Var, targets: &[usize], coef: &[T]) -> Result<Var, AutodiffError> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != targets.len() || coef.len() != targets.len() {
            return Err(mismatch("softmax_cross_entropy", &sl, &[targets.len()]));
        }
        let v = sl[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(AutodiffError::IndexOutOfRange { op: "softmax_cross_entropy", index: bad, bound: v });
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = T::zero();
        for (i, row) in probs.chunks_mut(v).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            if coef[i] != T::zero() {
                loss += coef[i] * (lse - row[targets[i]]);
            }
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        let tracked = self.tracked(logits);
        Ok(self.push(vec![1], vec![loss], Op::SoftmaxXent { logits, targets: targets.to_vec(), coef: coef.to_vec(), probs }, tracked))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let tracked = self.tracked(a);
        self.push(vec![1], vec![s], Op::Sum { a }, tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).len()).unwrap();
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, AutodiffError> {
        if numel(self.shape(loss)) != 1 {
            return Err(AutodiffError::NotScalar { shape: self.shape(loss).to_vec() });
        }
        let mut out = Gradients::empty(self.params.len());
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            if let Value::Param(id) = node.value {
                out.accumulate(id, &g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        for (&id, _) in self.param_nodes.iter().filter(|(_, v)| self.tracked(**v)) {
            if out.get(id).is_none() {
                out.accumulate(id, &vec![T::zero(); self.params.get(id).numel()]);
            }
        }
        Ok(out)
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.tracked(v) {
            return None;
        }
        let n = numel(self.shape(v));
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(ga) = self.grad_slot(grads, a) {
                    T::gemm(m, n, k, T::one(), g, (n as isize, 1), bv, (1, n as isize), T::one(), ga, (k as isize, 1));
                }
                if let Some(gb) = self.grad_slot(grads, b) {
                    T::gemm(k, m, n, T::one(), av, (1, k as isize), g, (n as isize, 1), T::one(), gb, (n as isize, 1));
                }
            }
            &Op::BatchMatMul { a, b, batch, m, k, n, trans_b } => {
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(ga) = self.grad_slot(grads, a) {
                    let bt = if trans_b { (k as isize, 1) } else { (1, n as isize) };
                    for s in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &g[s * m * n..(s + 1) * m * n],
                            (n as isize, 1),
                            &bv[s * k * n..(s + 1) * k * n],
                            bt,
                            T::one(),
                            &mut ga[s * m * k..(s + 1) * m * k],
                            (k as isize, 1),
                        );
                    }
                }
                if let Some(gb) = self.grad_slot(grads, b) {
                    for s in 0..batch {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let a_s = &av[s * m * k..(s + 1) * m * k];
                        let out = &mut gb[s * k * n..(s + 1) * k * n];
                        if trans_b {
                            T::gemm(n, m, k, T::one(), gs, (1, n as isize), a_s, (k as isize, 1), T::one(), out, (k as isize, 1));
                        } else {
                            T::gemm(k, m, n, T::one(), a_s, (1, k as isize), gs, (n as isize, 1), T::one(), out, (n as isize, 1));
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                if let Some(ga) = self.grad_slot(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = self.grad_slot(grads, b) {
                    let w = gb.len();
                    for chunk in g.chunks(w) {
                        gb.iter_mut().zip(chunk).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(ga) = self.grad_slot(grads, a) {
                    ga.iter_mut().zip(g.iter().zip(bv)).for_each(|(x, (&gy, &y))| *x += gy * y);
                }
                if let Some(gb) = self.grad_slot(grads, b) {
                    gb.iter_mut().zip(g.iter().zip(av)).for_each(|(x, (&gy, &y))| *x += gy * y);
                }
            }
            &Op::Scale { a, factor } => {
                if let Some(ga) = self.grad_slot(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * factor);
                }
            }
            &Op::Tanh { a } => {
                let y = owned(node);
                if let Some(ga) = self.grad_slot(grads, a) {
                    ga.iter_mut().zip(g.iter().zip(y)).for_each(|(x, (&gy, &t))| *x += gy * (T::one() - t * t));
                }
            }
            &Op::Gelu { a } => {
                let av = self.value(a);
                if let Some(ga) = self.grad_slot(grads, a) {
                    ga.iter_mut().zip(g.iter().zip(av)).for_each(|(x, (&gy, &v))| *x += gy * gelu_derivative(v));
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let n = *node.shape.last().unwrap();
                let nf = T::from_usize(n).unwrap();
                let gv = self.value(*gamma);
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..n {
                            let d = gr[j] * gv[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                        }
                        mean_d = mean_d / nf;
                        mean_dh = mean_dh / nf;
                        for j in 0..n {
                            gx[r * n + j] += is * (gr[j] * gv[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
                if let Some(gg) = self.grad_slot(grads, *gamma) {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *beta) {
                    for gr in g.chunks(n) {
                        gb.iter_mut().zip(gr).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = node.shape[1];
                if let Some(gt) = self.grad_slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = inner.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(inner) {
                    if let Some(gp) = self.grad_slot(grads, p) {
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + w];
                            gp[o * w..(o + 1) * w].iter_mut().zip(src).for_each(|(x, &y)| *x += y);
                        }
                    }
                    offset += w;
                }
            }
            Op::MaskFill { a, mask } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((x, &y), &m) in ga.iter_mut().zip(g).zip(mask) {
                        if !m {
                            *x += y;
                        }
                    }
                }
            }
            &Op::Softmax { a } => {
                let y = owned(node);
                let n = *node.shape.last().unwrap();
                if let Some(ga) = self.grad_slot(grads, a) {
                    for ((gx, gy), yr) in ga.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: T = gy.iter().zip(yr).map(|(&u, &v)| u * v).sum();
                        for j in 0..n {
                            gx[j] += yr[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            &Op::Reshape { a } => {
                if let Some(ga) = self.grad_slot(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
            Op::Permute { a, src } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (&s, &y) in src.iter().zip(g) {
                        ga[s] += y;
                    }
                }
            }
            Op::GatherRows { a, rows } => {
                let w = numel(&node.shape[1..]);
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (i, &r) in rows.iter().enumerate() {
                        ga[r * w..(r + 1) * w].iter_mut().zip(&g[i * w..(i + 1) * w]).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::L2NormalizeRows { a, norms } => {
                let y = owned(node);
                let n = node.shape[1];
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (r, &z) in norms.iter().enumerate() {
                        let (gr, yr) = (&g[r * n..(r + 1) * n], &y[r * n..(r + 1) * n]);
                        let dot: T = gr.iter().zip(yr).map(|(&u, &v)| u * v).sum();
                        for j in 0..n {
                            ga[r * n + j] += (gr[j] - yr[j] * dot) / z;
                        }
                    }
                }
            }
            Op::SoftmaxXent { logits, targets, coef, probs } => {
                let v = self.shape(*logits)[1];
                let g0 = g[0];
                if let Some(gl) = self.grad_slot(grads, *logits) {
                    for (i, (&t, &c)) in targets.iter().zip(coef).enumerate() {
                        if c == T::zero() {
                            continue;
                        }
                        let s = g0 * c;
                        let row = &mut gl[i * v..(i + 1) * v];
                        for (x, &p) in row.iter_mut().zip(&probs[i * v..(i + 1) * v]) {
                            *x += s * p;
                        }
                        row[t] -= s;
                    }
                }
            }
            &Op::Sum { a } => {
                if let Some(ga) = self.grad_slot(grads, a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
        }
    }
}

fn owned<T>(node: &Node<T>) -> &[T] {
    match &node.value {
        Value::Owned(d) => d,
        Value::Param(_) => unreachable!("parameter leaves carry no op"),
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    row.iter_mut().for_each(|x| *x = *x / z);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

fn gelu_forward<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let k = T::from_f64_lossy(GELU_K);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_derivative<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let k = T::from_f64_lossy(GELU_K);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}
