//! Reverse-mode gradient recording.
//!
//! A [`Tape`] is an append-only arena of nodes. Forward methods push a node,
//! eagerly compute its value, and hand back a [`Val`] index. [`Tape::backward`]
//! walks the arena once in reverse, accumulating adjoints for every node that
//! transitively depends on a parameter leaf. One tape is built per forward
//! pass and dropped afterwards; nothing is retained across instances, which
//! keeps the arena indices trivially valid.
//!
//! Only the operations the forecasting model actually uses are implemented.
//! Structural ops (concat/slice/tile/gather/permute) move data without
//! arithmetic so their adjoints are pure scatters.

use crate::error::{CoreError, Result};
use crate::tensor::{matmul_into, mean_var, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Val, Val),
    Add(Val, Val),
    Sub(Val, Val),
    MulElem(Val, Val),
    /// Adds a rank-1 bias to every row of a matrix.
    AddBiasRow(Val, Val),
    Scale(Val, f64),
    AddScalar(Val),
    Relu(Val),
    Sigmoid(Val),
    Tanh(Val),
    /// Numerically stable softmax along `axis`; `NEG_INF` entries are
    /// excluded and fully excluded slices produce exact zeros.
    Softmax {
        x: Val,
        axis: usize,
    },
    /// Keeps entries where `keep` is true; the rest were overwritten by a
    /// fill value in the forward pass and pass no gradient.
    MaskFill {
        x: Val,
        keep: Vec<bool>,
    },
    LayerNorm {
        x: Val,
        gain: Val,
        bias: Val,
        eps: f64,
    },
    SumAll(Val),
    Transpose(Val),
    Reshape(Val),
    ConcatRows(Vec<Val>),
    ConcatCols(Vec<Val>),
    SliceRows {
        x: Val,
        start: usize,
    },
    SliceCols {
        x: Val,
        start: usize,
    },
    /// Stacks `times` copies of the input along the row axis.
    TileRows {
        x: Val,
        times: usize,
    },
    /// Row lookup: `out[i] = x[idx[i]]`. Gradients scatter-add back, so
    /// repeated indices accumulate.
    GatherRows {
        x: Val,
        idx: Vec<usize>,
    },
    PermuteRows {
        x: Val,
        perm: Vec<usize>,
    },
    /// Folds a `(groups*n) x c` matrix to `n x c`: `out[j] = sum_g x[g*n+j]`.
    SumRowsStrided {
        x: Val,
        groups: usize,
    },
    /// Mean absolute error over entries where `mask` is true; the target is
    /// a constant. Exact-zero residuals get subgradient zero.
    MaskedMae {
        pred: Val,
        target: Tensor,
        mask: Vec<bool>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Val`].
#[derive(Debug)]
pub struct Gradients {
    adj: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of `v`, if `v` participated in the differentiated graph.
    pub fn get(&self, v: Val) -> Option<&Tensor> {
        self.adj.get(v.0).and_then(|g| g.as_ref())
    }
}

fn dims(shape: &[usize]) -> String {
    let s: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", s.join("x"))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Val {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Val(self.nodes.len() - 1)
    }

    fn ng(&self, v: Val) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a constant leaf; no gradient will be tracked through it.
    pub fn constant(&mut self, t: Tensor) -> Val {
        self.push(t, Op::Leaf, false)
    }

    /// Records a parameter leaf whose adjoint will be accumulated.
    pub fn param(&mut self, t: Tensor) -> Val {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Val) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape_of(&self, v: Val) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---- arithmetic ----

    pub fn matmul(&mut self, a: Val, b: Val) -> Result<Val> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    fn binary_same_shape(&mut self, op_name: &'static str, a: Val, b: Val) -> Result<()> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(CoreError::shape(
                op_name,
                format!(
                    "operands have shapes {} and {}",
                    dims(self.shape_of(a)),
                    dims(self.shape_of(b))
                ),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary_same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape_of(a).to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary_same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.shape_of(a).to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    pub fn mul_elem(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary_same_shape("mul_elem", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape_of(a).to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MulElem(a, b), ng))
    }

    pub fn add_bias_row(&mut self, x: Val, bias: Val) -> Result<Val> {
        let xs = self.shape_of(x);
        if xs.len() != 2 || self.shape_of(bias).len() != 1 || self.shape_of(bias)[0] != xs[1] {
            return Err(CoreError::shape(
                "add_bias_row",
                format!(
                    "matrix {} with bias {}",
                    dims(self.shape_of(x)),
                    dims(self.shape_of(bias))
                ),
            ));
        }
        let (r, c) = (xs[0], xs[1]);
        let mut data = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += b[j];
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(value, Op::AddBiasRow(x, bias), ng))
    }

    pub fn scale(&mut self, x: Val, factor: f64) -> Val {
        let value = self.value(x).map(|v| v * factor);
        let ng = self.ng(x);
        self.push(value, Op::Scale(x, factor), ng)
    }

    pub fn add_scalar(&mut self, x: Val, c: f64) -> Val {
        let value = self.value(x).map(|v| v + c);
        let ng = self.ng(x);
        self.push(value, Op::AddScalar(x), ng)
    }

    pub fn relu(&mut self, x: Val) -> Val {
        let value = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(value, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Val) -> Val {
        let value = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        let ng = self.ng(x);
        self.push(value, Op::Sigmoid(x), ng)
    }

    pub fn tanh(&mut self, x: Val) -> Val {
        let value = self.value(x).map(f64::tanh);
        let ng = self.ng(x);
        self.push(value, Op::Tanh(x), ng)
    }

    pub fn softmax_axis(&mut self, x: Val, axis: usize) -> Result<Val> {
        let value = crate::tensor::softmax_over_axis(self.value(x), axis)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Softmax { x, axis }, ng))
    }

    /// Replaces entries where `keep[i]` is false with `fill` (typically
    /// `NEG_INF` ahead of a softmax). `keep` must cover every element.
    pub fn mask_fill(&mut self, x: Val, keep: Vec<bool>, fill: f64) -> Result<Val> {
        if keep.len() != self.value(x).len() {
            return Err(CoreError::shape(
                "mask_fill",
                format!(
                    "mask has {} entries but input {} has {}",
                    keep.len(),
                    dims(self.shape_of(x)),
                    self.value(x).len()
                ),
            ));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v } else { fill })
            .collect();
        let value = Tensor::new(self.shape_of(x).to_vec(), data)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::MaskFill { x, keep }, ng))
    }

    pub fn layer_norm(&mut self, x: Val, gain: Val, bias: Val, eps: f64) -> Result<Val> {
        let value = crate::tensor::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, eps }, ng))
    }

    pub fn sum_all(&mut self, x: Val) -> Val {
        let s: f64 = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Val) -> Val {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    pub fn transpose(&mut self, x: Val) -> Result<Val> {
        let value = self.value(x).transposed()?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Transpose(x), ng))
    }

    pub fn reshape(&mut self, x: Val, shape: Vec<usize>) -> Result<Val> {
        let value = self.value(x).clone().reshaped(shape)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    // ---- structural ----

    pub fn concat_rows(&mut self, parts: &[Val]) -> Result<Val> {
        if parts.is_empty() {
            return Err(CoreError::shape("concat_rows", "no inputs".to_string()));
        }
        let c = self.shape_of(parts[0]).get(1).copied().unwrap_or(0);
        let mut rows = 0;
        for &p in parts {
            let s = self.shape_of(p);
            if s.len() != 2 || s[1] != c {
                return Err(CoreError::shape(
                    "concat_rows",
                    format!("expected [_x{}] but one input is {}", c, dims(s)),
                ));
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let value = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Val]) -> Result<Val> {
        if parts.is_empty() {
            return Err(CoreError::shape("concat_cols", "no inputs".to_string()));
        }
        let r = self.shape_of(parts[0]).first().copied().unwrap_or(0);
        let mut cols = 0;
        for &p in parts {
            let s = self.shape_of(p);
            if s.len() != 2 || s[0] != r {
                return Err(CoreError::shape(
                    "concat_cols",
                    format!("expected [{}x_] but one input is {}", r, dims(s)),
                ));
            }
            cols += s[1];
        }
        let mut data = vec![0.0; r * cols];
        let mut offset = 0;
        for &p in parts {
            let pc = self.shape_of(p)[1];
            let src = self.value(p).data();
            for i in 0..r {
                data[i * cols + offset..i * cols + offset + pc]
                    .copy_from_slice(&src[i * pc..(i + 1) * pc]);
            }
            offset += pc;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let value = Tensor::new(vec![r, cols], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Val, start: usize, len: usize) -> Result<Val> {
        let s = self.shape_of(x);
        if s.len() != 2 || start + len > s[0] {
            return Err(CoreError::shape(
                "slice_rows",
                format!("rows {}..{} of {}", start, start + len, dims(s)),
            ));
        }
        let c = s[1];
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let ng = self.ng(x);
        let value = Tensor::new(vec![len, c], data)?;
        Ok(self.push(value, Op::SliceRows { x, start }, ng))
    }

    pub fn slice_cols(&mut self, x: Val, start: usize, len: usize) -> Result<Val> {
        let s = self.shape_of(x);
        if s.len() != 2 || start + len > s[1] {
            return Err(CoreError::shape(
                "slice_cols",
                format!("cols {}..{} of {}", start, start + len, dims(s)),
            ));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(x);
        let value = Tensor::new(vec![r, len], data)?;
        Ok(self.push(value, Op::SliceCols { x, start }, ng))
    }

    pub fn tile_rows(&mut self, x: Val, times: usize) -> Result<Val> {
        let s = self.shape_of(x);
        if s.len() != 2 {
            return Err(CoreError::shape(
                "tile_rows",
                format!("expected rank-2 input, got {}", dims(s)),
            ));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(times * r * c);
        for _ in 0..times {
            data.extend_from_slice(src);
        }
        let ng = self.ng(x);
        let value = Tensor::new(vec![times * r, c], data)?;
        Ok(self.push(value, Op::TileRows { x, times }, ng))
    }

    pub fn gather_rows(&mut self, x: Val, idx: Vec<usize>) -> Result<Val> {
        let s = self.shape_of(x);
        if s.len() != 2 {
            return Err(CoreError::shape(
                "gather_rows",
                format!("expected rank-2 table, got {}", dims(s)),
            ));
        }
        let (r, c) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(CoreError::shape(
                "gather_rows",
                format!("index {} out of range for {} rows", bad, r),
            ));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let ng = self.ng(x);
        let value = Tensor::new(vec![idx.len(), c], data)?;
        Ok(self.push(value, Op::GatherRows { x, idx }, ng))
    }

    pub fn permute_rows(&mut self, x: Val, perm: Vec<usize>) -> Result<Val> {
        let s = self.shape_of(x);
        if s.len() != 2 || perm.len() != s[0] {
            return Err(CoreError::shape(
                "permute_rows",
                format!("permutation of {} rows applied to {}", perm.len(), dims(s)),
            ));
        }
        let c = s[1];
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len());
        for &i in &perm {
            if i >= s[0] {
                return Err(CoreError::shape(
                    "permute_rows",
                    format!("index {} out of range for {} rows", i, s[0]),
                ));
            }
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let ng = self.ng(x);
        let value = Tensor::new(vec![s[0], c], data)?;
        Ok(self.push(value, Op::PermuteRows { x, perm }, ng))
    }

    pub fn sum_rows_strided(&mut self, x: Val, groups: usize) -> Result<Val> {
        let s = self.shape_of(x);
        if s.len() != 2 || groups == 0 || s[0] % groups != 0 {
            return Err(CoreError::shape(
                "sum_rows_strided",
                format!("{} rows do not split into {} groups", dims(s), groups),
            ));
        }
        let (n, c) = (s[0] / groups, s[1]);
        let src = self.value(x).data();
        let mut data = vec![0.0; n * c];
        for g in 0..groups {
            for j in 0..n {
                for col in 0..c {
                    data[j * c + col] += src[(g * n + j) * c + col];
                }
            }
        }
        let ng = self.ng(x);
        let value = Tensor::new(vec![n, c], data)?;
        Ok(self.push(value, Op::SumRowsStrided { x, groups }, ng))
    }

    /// Masked mean absolute error against a constant target. Entries with
    /// `mask == false` contribute neither to the value nor the gradient;
    /// a mask with no valid entries yields exactly zero.
    pub fn masked_mae(&mut self, pred: Val, target: &Tensor, mask: &[bool]) -> Result<Val> {
        let p = self.value(pred);
        if p.shape() != target.shape() || mask.len() != p.len() {
            return Err(CoreError::shape(
                "masked_mae",
                format!(
                    "pred {} vs target {} with mask of {}",
                    dims(p.shape()),
                    dims(target.shape()),
                    mask.len()
                ),
            ));
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for ((&pv, &tv), &m) in p.data().iter().zip(target.data()).zip(mask) {
            if m {
                sum += (pv - tv).abs();
                count += 1;
            }
        }
        let value = if count == 0 { 0.0 } else { sum / count as f64 };
        let ng = self.ng(pred);
        Ok(self.push(
            Tensor::scalar(value),
            Op::MaskedMae {
                pred,
                target: target.clone(),
                mask: mask.to_vec(),
            },
            ng,
        ))
    }

    // ---- composite conveniences ----

    /// `x @ w + b` — the ubiquitous affine layer.
    pub fn linear(&mut self, x: Val, w: Val, b: Val) -> Result<Val> {
        let xw = self.matmul(x, w)?;
        self.add_bias_row(xw, b)
    }

    // ---- reverse pass ----

    /// Accumulates adjoints of every gradient-tracked node with respect to
    /// the scalar at `seed`.
    pub fn backward(&self, seed: Val) -> Result<Gradients> {
        if self.value(seed).len() != 1 {
            return Err(CoreError::shape(
                "backward",
                format!(
                    "seed must be scalar, got {}",
                    dims(self.shape_of(seed))
                ),
            ));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[seed.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            if adj[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let dy = adj[i].take().unwrap();
            self.accumulate_inputs(i, &dy, &mut adj);
            adj[i] = Some(dy);
        }
        Ok(Gradients { adj })
    }

    fn add_into(target: &mut Option<Tensor>, shape: &[usize], add: impl FnOnce(&mut [f64])) {
        if target.is_none() {
            *target = Some(Tensor::zeros(shape.to_vec()));
        }
        add(target.as_mut().unwrap().data_mut());
    }

    fn accumulate_inputs(&self, i: usize, dy: &Tensor, adj: &mut [Option<Tensor>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.ng(*a) {
                    // dA += dY @ B^T
                    let bt = bv.transposed().expect("checked rank-2");
                    Tape::add_into(&mut adj[a.0], av.shape(), |g| {
                        matmul_into(dy.data(), bt.data(), g, m, n, k);
                    });
                }
                if self.ng(*b) {
                    // dB += A^T @ dY
                    let at = av.transposed().expect("checked rank-2");
                    Tape::add_into(&mut adj[b.0], bv.shape(), |g| {
                        matmul_into(at.data(), dy.data(), g, k, m, n);
                    });
                }
            }
            Op::Add(a, b) => {
                for &v in &[*a, *b] {
                    if self.ng(v) {
                        Tape::add_into(&mut adj[v.0], dy.shape(), |g| {
                            for (gi, di) in g.iter_mut().zip(dy.data()) {
                                *gi += di;
                            }
                        });
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    Tape::add_into(&mut adj[a.0], dy.shape(), |g| {
                        for (gi, di) in g.iter_mut().zip(dy.data()) {
                            *gi += di;
                        }
                    });
                }
                if self.ng(*b) {
                    Tape::add_into(&mut adj[b.0], dy.shape(), |g| {
                        for (gi, di) in g.iter_mut().zip(dy.data()) {
                            *gi -= di;
                        }
                    });
                }
            }
            Op::MulElem(a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                if self.ng(*a) {
                    Tape::add_into(&mut adj[a.0], dy.shape(), |g| {
                        for ((gi, di), bi) in g.iter_mut().zip(dy.data()).zip(bv) {
                            *gi += di * bi;
                        }
                    });
                }
                if self.ng(*b) {
                    Tape::add_into(&mut adj[b.0], dy.shape(), |g| {
                        for ((gi, di), ai) in g.iter_mut().zip(dy.data()).zip(av) {
                            *gi += di * ai;
                        }
                    });
                }
            }
            Op::AddBiasRow(x, bias) => {
                let (r, c) = (dy.shape()[0], dy.shape()[1]);
                if self.ng(*x) {
                    Tape::add_into(&mut adj[x.0], dy.shape(), |g| {
                        for (gi, di) in g.iter_mut().zip(dy.data()) {
                            *gi += di;
                        }
                    });
                }
                if self.ng(*bias) {
                    Tape::add_into(&mut adj[bias.0], &[c], |g| {
                        for i in 0..r {
                            for j in 0..c {
                                g[j] += dy.data()[i * c + j];
                            }
                        }
                    });
                }
            }
            Op::Scale(x, f) => {
                if self.ng(*x) {
                    Tape::add_into(&mut adj[x.0], dy.shape(), |g| {
                        for (gi, di) in g.iter_mut().zip(dy.data()) {
                            *gi += di * f;
                        }
                    });
                }
            }
            Op::AddScalar(x) => {
                if self.ng(*x) {
                    Tape::add_into(&mut adj[x.0], dy.shape(), |g| {
                        for (gi, di) in g.iter_mut().zip(dy.data()) {
                            *gi += di;
                        }
                    });
                }
            }
            Op::Relu(x) => {
                if self.ng(*x) {
                    let xv = self.nodes[x.0].value.data();
                    Tape::add_into(&mut adj[x.0], dy.shape(), |g| {
                        for ((gi, di), xi) in g.iter_mut().zip(dy.data()).zip(xv) {
                            if *xi > 0.0 {
                                *gi += di;
                            }
                        }
                    });
                }
            }
            Op::Sigmoid(x) => {
                if self.ng(*x) {
                    let yv = self.nodes[i].value.data();
                    Tape::add_into(&mut adj[x.0], dy.shape(), |g| {
                        for ((gi, di), yi) in g.iter_mut().zip(dy.data()).zip(yv) {
                            *gi += di * yi * (1.0 - yi);
                        }
                    });
                }
            }
            Op::Tanh(x) => {
                if self.ng(*x) {
                    let yv = self.nodes[i].value.data();
                    Tape::add_into(&mut adj[x.0], dy.shape(), |g| {
                        for ((gi, di), yi) in g.iter_mut().zip(dy.data()).zip(yv) {
                            *gi += di * (1.0 - yi * yi);
                        }
                    });
                }
            }
            Op::Softmax { x, axis } => {
                if self.ng(*x) {
                    let y = &self.nodes[i].value;
                    let shape = y.shape();
                    let axis_len = shape[*axis];
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[*axis + 1..].iter().product();
                    Tape::add_into(&mut adj[x.0], shape, |g| {
                        for o in 0..outer {
                            for inr in 0..inner {
                                let idx = |j: usize| (o * axis_len + j) * inner + inr;
                                let mut dot = 0.0;
                                for j in 0..axis_len {
                                    dot += dy.data()[idx(j)] * y.data()[idx(j)];
                                }
                                for j in 0..axis_len {
                                    let yj = y.data()[idx(j)];
                                    g[idx(j)] += yj * (dy.data()[idx(j)] - dot);
                                }
                            }
                        }
                    });
                }
            }
            Op::MaskFill { x, keep } => {
                if self.ng(*x) {
                    Tape::add_into(&mut adj[x.0], dy.shape(), |g| {
                        for ((gi, di), &k) in g.iter_mut().zip(dy.data()).zip(keep) {
                            if k {
                                *gi += di;
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = &self.nodes[x.0].value;
                let gv = self.nodes[gain.0].value.data();
                let d = *xv.shape().last().unwrap();
                let rows = xv.len() / d;
                // recompute per-row statistics; cheaper than caching them
                for r in 0..rows {
                    let row = &xv.data()[r * d..(r + 1) * d];
                    let (mean, var) = mean_var(row);
                    let s = (var + eps).sqrt();
                    let dyr = &dy.data()[r * d..(r + 1) * d];
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) / s).collect();
                    if self.ng(*gain) {
                        Tape::add_into(&mut adj[gain.0], &[d], |g| {
                            for j in 0..d {
                                g[j] += dyr[j] * xhat[j];
                            }
                        });
                    }
                    if self.ng(*bias) {
                        Tape::add_into(&mut adj[bias.0], &[d], |g| {
                            for j in 0..d {
                                g[j] += dyr[j];
                            }
                        });
                    }
                    if self.ng(*x) {
                        let dxhat: Vec<f64> = (0..d).map(|j| dyr[j] * gv[j]).collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dxhat_xhat =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        Tape::add_into(&mut adj[x.0], xv.shape(), |g| {
                            for j in 0..d {
                                g[r * d + j] +=
                                    (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat) / s;
                            }
                        });
                    }
                }
            }
            Op::SumAll(x) => {
                if self.ng(*x) {
                    let d = dy.data()[0];
                    let shape = self.nodes[x.0].value.shape();
                    Tape::add_into(&mut adj[x.0], shape, |g| {
                        for gi in g.iter_mut() {
                            *gi += d;
                        }
                    });
                }
            }
            Op::Transpose(x) => {
                if self.ng(*x) {
                    let dt = dy.transposed().expect("transpose adjoint is rank-2");
                    Tape::add_into(&mut adj[x.0], dt.shape(), |g| {
                        for (gi, di) in g.iter_mut().zip(dt.data()) {
                            *gi += di;
                        }
                    });
                }
            }
            Op::Reshape(x) => {
                if self.ng(*x) {
                    let shape = self.nodes[x.0].value.shape();
                    Tape::add_into(&mut adj[x.0], shape, |g| {
                        for (gi, di) in g.iter_mut().zip(dy.data()) {
                            *gi += di;
                        }
                    });
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = &self.nodes[p.0].value;
                    let n = pv.len();
                    if self.ng(p) {
                        let slice = &dy.data()[offset..offset + n];
                        Tape::add_into(&mut adj[p.0], pv.shape(), |g| {
                            for (gi, di) in g.iter_mut().zip(slice) {
                                *gi += di;
                            }
                        });
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let cols = dy.shape()[1];
                let rows = dy.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let pv = &self.nodes[p.0].value;
                    let pc = pv.shape()[1];
                    if self.ng(p) {
                        Tape::add_into(&mut adj[p.0], pv.shape(), |g| {
                            for r in 0..rows {
                                for j in 0..pc {
                                    g[r * pc + j] += dy.data()[r * cols + offset + j];
                                }
                            }
                        });
                    }
                    offset += pc;
                }
            }
            Op::SliceRows { x, start } => {
                if self.ng(*x) {
                    let xs = self.nodes[x.0].value.shape();
                    let c = xs[1];
                    Tape::add_into(&mut adj[x.0], xs, |g| {
                        for (k, di) in dy.data().iter().enumerate() {
                            g[start * c + k] += di;
                        }
                    });
                }
            }
            Op::SliceCols { x, start } => {
                if self.ng(*x) {
                    let xs = self.nodes[x.0].value.shape();
                    let (c, len) = (xs[1], dy.shape()[1]);
                    let rows = dy.shape()[0];
                    Tape::add_into(&mut adj[x.0], xs, |g| {
                        for r in 0..rows {
                            for j in 0..len {
                                g[r * c + start + j] += dy.data()[r * len + j];
                            }
                        }
                    });
                }
            }
            Op::TileRows { x, times } => {
                if self.ng(*x) {
                    let xs = self.nodes[x.0].value.shape();
                    let n = self.nodes[x.0].value.len();
                    Tape::add_into(&mut adj[x.0], xs, |g| {
                        for t in 0..*times {
                            for k in 0..n {
                                g[k] += dy.data()[t * n + k];
                            }
                        }
                    });
                }
            }
            Op::GatherRows { x, idx } => {
                if self.ng(*x) {
                    let xs = self.nodes[x.0].value.shape();
                    let c = xs[1];
                    Tape::add_into(&mut adj[x.0], xs, |g| {
                        for (row, &src) in idx.iter().enumerate() {
                            for j in 0..c {
                                g[src * c + j] += dy.data()[row * c + j];
                            }
                        }
                    });
                }
            }
            Op::PermuteRows { x, perm } => {
                if self.ng(*x) {
                    let xs = self.nodes[x.0].value.shape();
                    let c = xs[1];
                    Tape::add_into(&mut adj[x.0], xs, |g| {
                        for (row, &src) in perm.iter().enumerate() {
                            for j in 0..c {
                                g[src * c + j] += dy.data()[row * c + j];
                            }
                        }
                    });
                }
            }
            Op::SumRowsStrided { x, groups } => {
                if self.ng(*x) {
                    let xs = self.nodes[x.0].value.shape();
                    let n = xs[0] / groups;
                    let c = xs[1];
                    Tape::add_into(&mut adj[x.0], xs, |g| {
                        for gidx in 0..*groups {
                            for j in 0..n {
                                for col in 0..c {
                                    g[(gidx * n + j) * c + col] += dy.data()[j * c + col];
                                }
                            }
                        }
                    });
                }
            }
            Op::MaskedMae { pred, target, mask } => {
                if self.ng(*pred) {
                    let pv = self.nodes[pred.0].value.data();
                    let count = mask.iter().filter(|&&m| m).count();
                    if count > 0 {
                        let d = dy.data()[0] / count as f64;
                        Tape::add_into(&mut adj[pred.0], self.nodes[pred.0].value.shape(), |g| {
                            for k in 0..pv.len() {
                                if mask[k] {
                                    let r = pv[k] - target.data()[k];
                                    if r > 0.0 {
                                        g[k] += d;
                                    } else if r < 0.0 {
                                        g[k] -= d;
                                    }
                                }
                            }
                        });
                    }
                }
            }
        }
    }
}
