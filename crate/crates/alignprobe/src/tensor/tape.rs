//! Reverse-mode differentiation on an index-based tape.
//!
//! Operations execute eagerly, each pushing one node; `backward` walks the
//! tape in reverse and accumulates gradients. Nodes only ever reference
//! earlier nodes, so a single reverse sweep is a full topological traversal.
//! Everything is sequential and therefore bitwise deterministic.

use super::ops;
use super::{TensorError, TensorF};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// op(a) * op(b) with optional transposes.
    MatMul {
        a: ValueId,
        b: ValueId,
        ta: bool,
        tb: bool,
    },
    /// Rank-2 times rank-1.
    MatVec { a: ValueId, v: ValueId },
    Add { a: ValueId, b: ValueId },
    /// Row-broadcast add of a rank-1 bias over a rank-2 tensor.
    AddBias { x: ValueId, bias: ValueId },
    /// Column-broadcast add: out[i, j] = x[i, j] + v[i].
    AddCol { x: ValueId, v: ValueId },
    Scale { x: ValueId, c: f64 },
    Mul { a: ValueId, b: ValueId },
    Gelu { x: ValueId },
    /// Last-axis layer normalization; aux caches (mean, inv_std) per slice.
    LayerNorm {
        x: ValueId,
        gain: ValueId,
        bias: ValueId,
    },
    Softmax { x: ValueId, axis: usize },
    /// Summed negative log-likelihood over non-ignored rows; aux caches
    /// per-row log-sum-exp.
    CrossEntropySum {
        logits: ValueId,
        targets: Vec<Option<usize>>,
    },
    /// Row gather; backward scatter-adds, so it doubles as embedding lookup.
    GatherRows { x: ValueId, ids: Vec<usize> },
    ConcatCols { parts: Vec<ValueId> },
    SliceCols {
        x: ValueId,
        start: usize,
        len: usize,
    },
    Sum { x: ValueId },
    /// Same-shape linear combination.
    LinComb { terms: Vec<(ValueId, f64)> },
}

struct Node {
    dims: Vec<usize>,
    values: Vec<f64>,
    aux: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one backward pass, indexed by [`ValueId`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `id`, if any flowed to it.
    pub fn get(&self, id: ValueId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }
}

/// Eager computation tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records a differentiable leaf (a parameter or input to differentiate).
    pub fn input(&mut self, t: &TensorF) -> ValueId {
        self.push(t.dims().to_vec(), t.values().to_vec(), Vec::new(), Op::Leaf, true)
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, t: &TensorF) -> ValueId {
        self.push(t.dims().to_vec(), t.values().to_vec(), Vec::new(), Op::Leaf, false)
    }

    pub fn dims(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].dims
    }

    pub fn values(&self, id: ValueId) -> &[f64] {
        &self.nodes[id.0].values
    }

    /// Copies a node's value out as a standalone tensor.
    pub fn tensor(&self, id: ValueId) -> TensorF {
        TensorF::new(self.nodes[id.0].dims.clone(), self.nodes[id.0].values.clone())
            .expect("tape nodes are internally consistent")
    }

    fn push(
        &mut self,
        dims: Vec<usize>,
        values: Vec<f64>,
        aux: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> ValueId {
        debug_assert_eq!(dims.iter().product::<usize>(), values.len());
        debug_assert!(
            values.iter().all(|v| v.is_finite()),
            "non-finite value on tape"
        );
        self.nodes.push(Node {
            dims,
            values,
            aux,
            op,
            requires_grad,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn requires(&self, ids: &[ValueId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn rank2(&self, op: &'static str, id: ValueId) -> Result<(usize, usize), TensorError> {
        let dims = &self.nodes[id.0].dims;
        if dims.len() != 2 {
            return Err(TensorError::RankMismatch {
                op,
                expected: 2,
                dims: dims.clone(),
            });
        }
        Ok((dims[0], dims[1]))
    }

    fn rank1(&self, op: &'static str, id: ValueId) -> Result<usize, TensorError> {
        let dims = &self.nodes[id.0].dims;
        if dims.len() != 1 {
            return Err(TensorError::RankMismatch {
                op,
                expected: 1,
                dims: dims.clone(),
            });
        }
        Ok(dims[0])
    }

    fn matmul_general(
        &mut self,
        a: ValueId,
        b: ValueId,
        ta: bool,
        tb: bool,
    ) -> Result<ValueId, TensorError> {
        let (ar, ac) = self.rank2("matmul", a)?;
        let (br, bc) = self.rank2("matmul", b)?;
        let (n, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, m) = if tb { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].dims.clone(),
                rhs: self.nodes[b.0].dims.clone(),
            });
        }
        let mut values = vec![0.0; n * m];
        ops::gemm_acc(
            &mut values,
            &self.nodes[a.0].values,
            ar,
            ac,
            ta,
            &self.nodes[b.0].values,
            br,
            bc,
            tb,
        );
        let rg = self.requires(&[a, b]);
        Ok(self.push(vec![n, m], values, Vec::new(), Op::MatMul { a, b, ta, tb }, rg))
    }

    /// Standard matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        self.matmul_general(a, b, false, false)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        self.matmul_general(a, b, false, true)
    }

    /// `a^T * b`.
    pub fn matmul_tn(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        self.matmul_general(a, b, true, false)
    }

    /// Rank-2 times rank-1 -> rank-1.
    pub fn matvec(&mut self, a: ValueId, v: ValueId) -> Result<ValueId, TensorError> {
        let (n, k) = self.rank2("matvec", a)?;
        let vk = self.rank1("matvec", v)?;
        if k != vk {
            return Err(TensorError::ShapeMismatch {
                op: "matvec",
                lhs: vec![n, k],
                rhs: vec![vk],
            });
        }
        let av = &self.nodes[a.0].values;
        let vv = &self.nodes[v.0].values;
        let mut values = vec![0.0; n];
        for i in 0..n {
            let row = &av[i * k..(i + 1) * k];
            values[i] = row.iter().zip(vv).map(|(x, y)| x * y).sum();
        }
        let rg = self.requires(&[a, v]);
        Ok(self.push(vec![n], values, Vec::new(), Op::MatVec { a, v }, rg))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        if self.nodes[a.0].dims != self.nodes[b.0].dims {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.nodes[a.0].dims.clone(),
                rhs: self.nodes[b.0].dims.clone(),
            });
        }
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        let dims = self.nodes[a.0].dims.clone();
        let rg = self.requires(&[a, b]);
        Ok(self.push(dims, values, Vec::new(), Op::Add { a, b }, rg))
    }

    /// Adds a rank-1 bias to every row of a rank-2 tensor.
    pub fn add_bias(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId, TensorError> {
        let (n, d) = self.rank2("add_bias", x)?;
        let bd = self.rank1("add_bias", bias)?;
        if d != bd {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: vec![n, d],
                rhs: vec![bd],
            });
        }
        let mut values = self.nodes[x.0].values.clone();
        let bv = &self.nodes[bias.0].values;
        for row in values.chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        let rg = self.requires(&[x, bias]);
        Ok(self.push(vec![n, d], values, Vec::new(), Op::AddBias { x, bias }, rg))
    }

    /// Adds `v[i]` to every element of row `i`.
    pub fn add_col(&mut self, x: ValueId, v: ValueId) -> Result<ValueId, TensorError> {
        let (n, d) = self.rank2("add_col", x)?;
        let vn = self.rank1("add_col", v)?;
        if n != vn {
            return Err(TensorError::ShapeMismatch {
                op: "add_col",
                lhs: vec![n, d],
                rhs: vec![vn],
            });
        }
        let mut values = self.nodes[x.0].values.clone();
        let vv = &self.nodes[v.0].values;
        for (i, row) in values.chunks_mut(d).enumerate() {
            for o in row.iter_mut() {
                *o += vv[i];
            }
        }
        let rg = self.requires(&[x, v]);
        Ok(self.push(vec![n, d], values, Vec::new(), Op::AddCol { x, v }, rg))
    }

    pub fn scale(&mut self, x: ValueId, c: f64) -> ValueId {
        let values: Vec<f64> = self.nodes[x.0].values.iter().map(|v| v * c).collect();
        let dims = self.nodes[x.0].dims.clone();
        let rg = self.nodes[x.0].requires_grad;
        self.push(dims, values, Vec::new(), Op::Scale { x, c }, rg)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        if self.nodes[a.0].dims != self.nodes[b.0].dims {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: self.nodes[a.0].dims.clone(),
                rhs: self.nodes[b.0].dims.clone(),
            });
        }
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        let dims = self.nodes[a.0].dims.clone();
        let rg = self.requires(&[a, b]);
        Ok(self.push(dims, values, Vec::new(), Op::Mul { a, b }, rg))
    }

    pub fn gelu(&mut self, x: ValueId) -> ValueId {
        let values: Vec<f64> = self.nodes[x.0].values.iter().map(|&v| ops::gelu(v)).collect();
        let dims = self.nodes[x.0].dims.clone();
        let rg = self.nodes[x.0].requires_grad;
        self.push(dims, values, Vec::new(), Op::Gelu { x }, rg)
    }

    /// Normalizes the last axis to mean 0 / population variance 1, then
    /// applies `gain` and `bias`. Constant slices degrade gracefully via
    /// `eps` inside the square root.
    pub fn layer_norm(
        &mut self,
        x: ValueId,
        gain: ValueId,
        bias: ValueId,
        eps: f64,
    ) -> Result<ValueId, TensorError> {
        let dims = self.nodes[x.0].dims.clone();
        let d = *dims.last().ok_or(TensorError::RankMismatch {
            op: "layer_norm",
            expected: 1,
            dims: dims.clone(),
        })?;
        if self.rank1("layer_norm", gain)? != d || self.rank1("layer_norm", bias)? != d {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: dims,
                rhs: self.nodes[gain.0].dims.clone(),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::Contract {
                op: "layer_norm",
                reason: format!("eps must be positive, got {eps}"),
            });
        }
        let n_slices = self.nodes[x.0].values.len() / d;
        let mut values = vec![0.0; self.nodes[x.0].values.len()];
        let mut aux = Vec::with_capacity(2 * n_slices + 1);
        aux.push(eps);
        let gv = &self.nodes[gain.0].values;
        let bv = &self.nodes[bias.0].values;
        for s in 0..n_slices {
            let xs = &self.nodes[x.0].values[s * d..(s + 1) * d];
            let (mean, var) = ops::mean_var(xs);
            let inv_std = 1.0 / (var + eps).sqrt();
            aux.push(mean);
            aux.push(inv_std);
            let out = &mut values[s * d..(s + 1) * d];
            for i in 0..d {
                out[i] = gv[i] * ((xs[i] - mean) * inv_std) + bv[i];
            }
        }
        let rg = self.requires(&[x, gain, bias]);
        Ok(self.push(dims, values, aux, Op::LayerNorm { x, gain, bias }, rg))
    }

    /// Softmax along `axis`; every slice sums to 1.
    pub fn softmax(&mut self, x: ValueId, axis: usize) -> Result<ValueId, TensorError> {
        let dims = self.nodes[x.0].dims.clone();
        if axis >= dims.len() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank: dims.len(),
            });
        }
        let len = dims[axis];
        let inner: usize = dims[axis + 1..].iter().product();
        let outer: usize = dims[..axis].iter().product();
        let mut values = self.nodes[x.0].values.clone();
        let mut scratch = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for (j, s) in scratch.iter_mut().enumerate() {
                    *s = values[base + j * inner];
                }
                ops::softmax_slice(&mut scratch);
                for (j, s) in scratch.iter().enumerate() {
                    values[base + j * inner] = *s;
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(dims, values, Vec::new(), Op::Softmax { x, axis }, rg))
    }

    /// Sum of negative log-softmax-probabilities over the non-ignored rows,
    /// together with the number of rows contributing. `None` targets are
    /// ignored.
    pub fn cross_entropy_sum(
        &mut self,
        logits: ValueId,
        targets: &[Option<usize>],
    ) -> Result<(ValueId, usize), TensorError> {
        let (n, classes) = self.rank2("cross_entropy", logits)?;
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![n, classes],
                rhs: vec![targets.len()],
            });
        }
        let mut loss = 0.0;
        let mut count = 0usize;
        let mut aux = vec![0.0; n];
        for (i, target) in targets.iter().enumerate() {
            let row = &self.nodes[logits.0].values[i * classes..(i + 1) * classes];
            let lse = ops::log_sum_exp(row);
            aux[i] = lse;
            if let Some(t) = *target {
                if t >= classes {
                    return Err(TensorError::IndexOutOfRange {
                        op: "cross_entropy",
                        index: t,
                        bound: classes,
                    });
                }
                loss += lse - row[t];
                count += 1;
            }
        }
        let rg = self.nodes[logits.0].requires_grad;
        let id = self.push(
            vec![],
            vec![loss],
            aux,
            Op::CrossEntropySum {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        );
        Ok((id, count))
    }

    /// Mean negative log-softmax-probability over non-ignored rows. With all
    /// rows ignored the loss is 0 with zero gradient.
    pub fn cross_entropy_mean(
        &mut self,
        logits: ValueId,
        targets: &[Option<usize>],
    ) -> Result<ValueId, TensorError> {
        let (sum, count) = self.cross_entropy_sum(logits, targets)?;
        let factor = if count == 0 { 0.0 } else { 1.0 / count as f64 };
        Ok(self.scale(sum, factor))
    }

    /// Gathers rows of a rank-2 tensor; also serves as embedding lookup
    /// (backward scatter-adds into the source rows).
    pub fn gather_rows(&mut self, x: ValueId, ids: &[usize]) -> Result<ValueId, TensorError> {
        let (n, d) = self.rank2("gather_rows", x)?;
        let mut values = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: n,
                });
            }
            values.extend_from_slice(&self.nodes[x.0].values[i * d..(i + 1) * d]);
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            vec![ids.len(), d],
            values,
            Vec::new(),
            Op::GatherRows {
                x,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Contract {
                op: "concat_cols",
                reason: "no parts".into(),
            });
        }
        let (n, _) = self.rank2("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pd) = self.rank2("concat_cols", p)?;
            if pn != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![n],
                    rhs: vec![pn],
                });
            }
            widths.push(pd);
        }
        let total: usize = widths.iter().sum();
        let mut values = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                values.extend_from_slice(&self.nodes[p.0].values[i * w..(i + 1) * w]);
            }
        }
        let rg = self.requires(parts);
        Ok(self.push(
            vec![n, total],
            values,
            Vec::new(),
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Column slice `[start, start + len)` of a rank-2 tensor.
    pub fn slice_cols(
        &mut self,
        x: ValueId,
        start: usize,
        len: usize,
    ) -> Result<ValueId, TensorError> {
        let (n, d) = self.rank2("slice_cols", x)?;
        if start + len > d {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: d,
            });
        }
        let mut values = Vec::with_capacity(n * len);
        for i in 0..n {
            values.extend_from_slice(&self.nodes[x.0].values[i * d + start..i * d + start + len]);
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            vec![n, len],
            values,
            Vec::new(),
            Op::SliceCols { x, start, len },
            rg,
        ))
    }

    /// Sum of all elements -> scalar.
    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let total: f64 = self.nodes[x.0].values.iter().sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(vec![], vec![total], Vec::new(), Op::Sum { x }, rg)
    }

    /// Same-shape linear combination `sum_i c_i * t_i`.
    pub fn lincomb(&mut self, terms: &[(ValueId, f64)]) -> Result<ValueId, TensorError> {
        if terms.is_empty() {
            return Err(TensorError::Contract {
                op: "lincomb",
                reason: "no terms".into(),
            });
        }
        let dims = self.nodes[terms[0].0 .0].dims.clone();
        for &(id, _) in terms {
            if self.nodes[id.0].dims != dims {
                return Err(TensorError::ShapeMismatch {
                    op: "lincomb",
                    lhs: dims.clone(),
                    rhs: self.nodes[id.0].dims.clone(),
                });
            }
        }
        let mut values = vec![0.0; self.nodes[terms[0].0 .0].values.len()];
        for &(id, c) in terms {
            for (o, v) in values.iter_mut().zip(&self.nodes[id.0].values) {
                *o += c * v;
            }
        }
        let ids: Vec<ValueId> = terms.iter().map(|&(id, _)| id).collect();
        let rg = self.requires(&ids);
        Ok(self.push(
            dims,
            values,
            Vec::new(),
            Op::LinComb {
                terms: terms.to_vec(),
            },
            rg,
        ))
    }

    /// Runs reverse-mode accumulation from a scalar `loss` node.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients, TensorError> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(TensorError::Contract {
                op: "backward",
                reason: format!("loss must be scalar, got dims {:?}", self.nodes[loss.0].dims),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], id: ValueId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].values.len()]);
        f(slot);
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = (self.nodes[a.0].dims[0], self.nodes[a.0].dims[1]);
                let (br, bc) = (self.nodes[b.0].dims[0], self.nodes[b.0].dims[1]);
                let (n, m) = (node.dims[0], node.dims[1]);
                let av = &self.nodes[a.0].values;
                let bv = &self.nodes[b.0].values;
                // dA' = g * B'^T, dB' = A'^T * g; transposes fold into gemm flags.
                self.accum(grads, *a, |da| {
                    if !*ta {
                        ops::gemm_acc(da, g, n, m, false, bv, br, bc, !*tb);
                    } else {
                        ops::gemm_acc(da, bv, br, bc, *tb, g, n, m, true);
                    }
                });
                self.accum(grads, *b, |db| {
                    if !*tb {
                        ops::gemm_acc(db, av, ar, ac, !*ta, g, n, m, false);
                    } else {
                        ops::gemm_acc(db, g, n, m, true, av, ar, ac, *ta);
                    }
                });
            }
            Op::MatVec { a, v } => {
                let (n, k) = (self.nodes[a.0].dims[0], self.nodes[a.0].dims[1]);
                let av = &self.nodes[a.0].values;
                let vv = &self.nodes[v.0].values;
                self.accum(grads, *a, |da| {
                    for i in 0..n {
                        let gi = g[i];
                        if gi != 0.0 {
                            let row = &mut da[i * k..(i + 1) * k];
                            for (o, &x) in row.iter_mut().zip(vv) {
                                *o += gi * x;
                            }
                        }
                    }
                });
                self.accum(grads, *v, |dv| {
                    for i in 0..n {
                        let gi = g[i];
                        if gi != 0.0 {
                            let row = &av[i * k..(i + 1) * k];
                            for (o, &x) in dv.iter_mut().zip(row) {
                                *o += gi * x;
                            }
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.accum(grads, *a, |da| {
                    for (o, x) in da.iter_mut().zip(g) {
                        *o += x;
                    }
                });
                self.accum(grads, *b, |db| {
                    for (o, x) in db.iter_mut().zip(g) {
                        *o += x;
                    }
                });
            }
            Op::AddBias { x, bias } => {
                let d = node.dims[1];
                self.accum(grads, *x, |dx| {
                    for (o, v) in dx.iter_mut().zip(g) {
                        *o += v;
                    }
                });
                self.accum(grads, *bias, |db| {
                    for row in g.chunks(d) {
                        for (o, v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                });
            }
            Op::AddCol { x, v } => {
                let d = node.dims[1];
                self.accum(grads, *x, |dx| {
                    for (o, val) in dx.iter_mut().zip(g) {
                        *o += val;
                    }
                });
                self.accum(grads, *v, |dv| {
                    for (i, row) in g.chunks(d).enumerate() {
                        dv[i] += row.iter().sum::<f64>();
                    }
                });
            }
            Op::Scale { x, c } => {
                self.accum(grads, *x, |dx| {
                    for (o, v) in dx.iter_mut().zip(g) {
                        *o += c * v;
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = &self.nodes[a.0].values;
                let bv = &self.nodes[b.0].values;
                self.accum(grads, *a, |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                });
                self.accum(grads, *b, |db| {
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                });
            }
            Op::Gelu { x } => {
                let xv = &self.nodes[x.0].values;
                self.accum(grads, *x, |dx| {
                    for i in 0..g.len() {
                        dx[i] += g[i] * ops::gelu_deriv(xv[i]);
                    }
                });
            }
            Op::LayerNorm { x, gain, bias } => {
                let d = *node.dims.last().unwrap();
                let n_slices = node.values.len() / d;
                let eps = node.aux[0];
                let xv = &self.nodes[x.0].values;
                let gv = &self.nodes[gain.0].values;
                for s in 0..n_slices {
                    let mean = node.aux[1 + 2 * s];
                    let inv_std = node.aux[2 + 2 * s];
                    let _ = eps;
                    let xs = &xv[s * d..(s + 1) * d];
                    let gs = &g[s * d..(s + 1) * d];
                    // x_hat and the two slice means needed by the closed form
                    let mut mean_gh = 0.0;
                    let mut mean_gh_xhat = 0.0;
                    for i in 0..d {
                        let xhat = (xs[i] - mean) * inv_std;
                        let gh = gs[i] * gv[i];
                        mean_gh += gh;
                        mean_gh_xhat += gh * xhat;
                    }
                    mean_gh /= d as f64;
                    mean_gh_xhat /= d as f64;
                    self.accum(grads, *x, |dx| {
                        let dxs = &mut dx[s * d..(s + 1) * d];
                        for i in 0..d {
                            let xhat = (xs[i] - mean) * inv_std;
                            let gh = gs[i] * gv[i];
                            dxs[i] += inv_std * (gh - mean_gh - xhat * mean_gh_xhat);
                        }
                    });
                    self.accum(grads, *gain, |dg| {
                        for i in 0..d {
                            let xhat = (xs[i] - mean) * inv_std;
                            dg[i] += gs[i] * xhat;
                        }
                    });
                    self.accum(grads, *bias, |db| {
                        for i in 0..d {
                            db[i] += gs[i];
                        }
                    });
                }
            }
            Op::Softmax { x, axis } => {
                let dims = &node.dims;
                let len = dims[*axis];
                let inner: usize = dims[*axis + 1..].iter().product();
                let outer: usize = dims[..*axis].iter().product();
                let yv = &node.values;
                self.accum(grads, *x, |dx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0;
                            for j in 0..len {
                                let p = base + j * inner;
                                dot += g[p] * yv[p];
                            }
                            for j in 0..len {
                                let p = base + j * inner;
                                dx[p] += yv[p] * (g[p] - dot);
                            }
                        }
                    }
                });
            }
            Op::CrossEntropySum { logits, targets } => {
                let classes = self.nodes[logits.0].dims[1];
                let lv = &self.nodes[logits.0].values;
                let scale = g[0];
                self.accum(grads, *logits, |dl| {
                    for (i, target) in targets.iter().enumerate() {
                        if let Some(t) = *target {
                            let lse = node.aux[i];
                            let row = &lv[i * classes..(i + 1) * classes];
                            let drow = &mut dl[i * classes..(i + 1) * classes];
                            for j in 0..classes {
                                let p = (row[j] - lse).exp();
                                drow[j] += scale * (p - if j == t { 1.0 } else { 0.0 });
                            }
                        }
                    }
                });
            }
            Op::GatherRows { x, ids } => {
                let d = node.dims[1];
                self.accum(grads, *x, |dx| {
                    for (r, &i) in ids.iter().enumerate() {
                        let src = &g[r * d..(r + 1) * d];
                        let dst = &mut dx[i * d..(i + 1) * d];
                        for (o, v) in dst.iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let n = node.dims[0];
                let total = node.dims[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].dims[1];
                    self.accum(grads, p, |dp| {
                        for i in 0..n {
                            let src = &g[i * total + offset..i * total + offset + w];
                            let dst = &mut dp[i * w..(i + 1) * w];
                            for (o, v) in dst.iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols { x, start, len } => {
                let n = node.dims[0];
                let d = self.nodes[x.0].dims[1];
                self.accum(grads, *x, |dx| {
                    for i in 0..n {
                        let src = &g[i * len..(i + 1) * len];
                        let dst = &mut dx[i * d + start..i * d + start + len];
                        for (o, v) in dst.iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Sum { x } => {
                self.accum(grads, *x, |dx| {
                    for o in dx.iter_mut() {
                        *o += g[0];
                    }
                });
            }
            Op::LinComb { terms } => {
                for &(id, c) in terms {
                    self.accum(grads, id, |dt| {
                        for (o, v) in dt.iter_mut().zip(g) {
                            *o += c * v;
                        }
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: Vec<usize>, values: Vec<f64>) -> TensorF {
        TensorF::new(dims, values).unwrap()
    }

    #[test]
    fn matmul_identity_leaves_input_unchanged() {
        let mut tape = Tape::new();
        let eye = tape.input(&t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let a = tape.input(&t(vec![2, 2], vec![3.0, -1.0, 2.5, 7.0]));
        let c = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.values(c), &[3.0, -1.0, 2.5, 7.0]);
    }

    #[test]
    fn matmul_hand_example() {
        // [[1,2,3],[4,5,6]] * [[1,0],[0,1],[1,1]] = [[4,5],[10,11]]
        let mut tape = Tape::new();
        let a = tape.input(&t(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.input(&t(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.values(c), &[4.0, 5.0, 10.0, 11.0]);
    }

    #[test]
    fn matmul_zero_matrix() {
        let mut tape = Tape::new();
        let z = tape.input(&TensorF::zeros(vec![2, 3]));
        let b = tape.input(&t(vec![3, 2], vec![1.0; 6]));
        let c = tape.matmul(z, b).unwrap();
        assert!(tape.values(c).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_dims() {
        let mut tape = Tape::new();
        let a = tape.input(&TensorF::zeros(vec![2, 3]));
        let b = tape.input(&TensorF::zeros(vec![2, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_backward_rule() {
        // c = a*b, L = sum(c): dL/da = ones * b^T, dL/db = a^T * ones
        let mut tape = Tape::new();
        let a = tape.input(&t(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.input(&t(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum(c);
        let grads = tape.backward(loss).unwrap();
        // rows of dL/da are the row sums of b
        assert_eq!(grads.get(a).unwrap(), &[1.0, 1.0, 2.0, 1.0, 1.0, 2.0]);
        // dL/db[p][j] = column sums of a
        assert_eq!(grads.get(b).unwrap(), &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let mut tape = Tape::new();
        let x = tape.input(&t(vec![3], vec![0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        for v in tape.values(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = tape.input(&t(vec![2], vec![0.0, 2.0f64.ln()]));
        let y = tape.softmax(x, 0).unwrap();
        let vals = tape.values(y);
        assert!((vals[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((vals[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut tape = Tape::new();
        let x = tape.input(&t(vec![4], vec![0.3, -1.2, 5.0, 2.2]));
        let y = tape.softmax(x, 0).unwrap();
        let shifted = tape.input(&t(vec![4], vec![0.3 + 100.0, -1.2 + 100.0, 105.0, 102.2]));
        let ys = tape.softmax(shifted, 0).unwrap();
        for (a, b) in tape.values(y).iter().zip(tape.values(ys)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_middle_axis() {
        let mut tape = Tape::new();
        let x = tape.input(&t(vec![2, 2, 2], (0..8).map(|i| i as f64).collect()));
        let y = tape.softmax(x, 1).unwrap();
        // slices along axis 1 sum to 1
        let v = tape.values(y);
        for o in 0..2 {
            for i in 0..2 {
                let sum = v[o * 4 + i] + v[o * 4 + 2 + i];
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_invalid_axis() {
        let mut tape = Tape::new();
        let x = tape.input(&TensorF::zeros(vec![3]));
        assert!(tape.softmax(x, 1).is_err());
    }

    #[test]
    fn layer_norm_two_point_slice() {
        // x=[1,3]: mean 2, population std 1 -> [-1, 1] as eps -> 0
        let mut tape = Tape::new();
        let x = tape.input(&t(vec![2], vec![1.0, 3.0]));
        let gain = tape.input(&t(vec![2], vec![1.0, 1.0]));
        let bias = tape.input(&t(vec![2], vec![0.0, 0.0]));
        let y = tape.layer_norm(x, gain, bias, 1e-12).unwrap();
        let v = tape.values(y);
        assert!((v[0] + 1.0).abs() < 1e-6);
        assert!((v[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_constant_slice_degrades_to_zero() {
        let mut tape = Tape::new();
        let x = tape.input(&t(vec![3], vec![5.0, 5.0, 5.0]));
        let gain = tape.input(&t(vec![3], vec![1.0; 3]));
        let bias = tape.input(&t(vec![3], vec![0.0; 3]));
        let y = tape.layer_norm(x, gain, bias, 1e-12).unwrap();
        for v in tape.values(y) {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn layer_norm_zero_gain_yields_bias() {
        let mut tape = Tape::new();
        let x = tape.input(&t(vec![2, 3], vec![1.0, -2.0, 0.5, 9.0, 3.0, 3.3]));
        let gain = tape.input(&t(vec![3], vec![0.0; 3]));
        let bias = tape.input(&t(vec![3], vec![0.7, -0.1, 2.0]));
        let y = tape.layer_norm(x, gain, bias, 1e-12).unwrap();
        let v = tape.values(y);
        assert_eq!(&v[..3], &[0.7, -0.1, 2.0]);
        assert_eq!(&v[3..], &[0.7, -0.1, 2.0]);
    }

    #[test]
    fn cross_entropy_uniform_is_log_v() {
        let mut tape = Tape::new();
        let logits = tape.input(&TensorF::zeros(vec![2, 7]));
        let loss = tape
            .cross_entropy_mean(logits, &[Some(3), Some(0)])
            .unwrap();
        assert!((tape.values(loss)[0] - 7.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_goes_to_zero() {
        let mut tape = Tape::new();
        let logits = tape.input(&t(vec![1, 3], vec![200.0, 0.0, 0.0]));
        let loss = tape.cross_entropy_mean(logits, &[Some(0)]).unwrap();
        assert!(tape.values(loss)[0] < 1e-12);
    }

    #[test]
    fn cross_entropy_closed_form() {
        // logits [[1,0]], target 0 -> ln(1 + e^-1)
        let mut tape = Tape::new();
        let logits = tape.input(&t(vec![1, 2], vec![1.0, 0.0]));
        let loss = tape.cross_entropy_mean(logits, &[Some(0)]).unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((tape.values(loss)[0] - expect).abs() < 1e-12);
        assert!((expect - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_all_ignored_is_zero_with_zero_grad() {
        let mut tape = Tape::new();
        let logits = tape.input(&t(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let loss = tape.cross_entropy_mean(logits, &[None, None]).unwrap();
        assert_eq!(tape.values(loss)[0], 0.0);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(logits).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut tape = Tape::new();
        let logits = tape.input(&TensorF::zeros(vec![1, 3]));
        let err = tape.cross_entropy_mean(logits, &[Some(3)]).unwrap_err();
        assert!(matches!(err, TensorError::IndexOutOfRange { .. }));
    }

    #[test]
    fn determinism_bitwise() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape.input(&t(vec![2, 2], vec![0.1, -0.9, 3.3, 0.02]));
            let b = tape.input(&t(vec![2, 2], vec![1.4, 2.0, -0.3, 0.5]));
            let c = tape.matmul(a, b).unwrap();
            let s = tape.softmax(c, 1).unwrap();
            let l = tape.sum(s);
            let grads = tape.backward(l).unwrap();
            (tape.values(s).to_vec(), grads.get(a).unwrap().to_vec())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert!(v1.iter().zip(&v2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
