use super::kernels;
use super::tensor::Tensor;
use super::DiffError;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Gelu(Var),
    SoftmaxRows(Var, usize),
    SumGroups { x: Var, groups: usize, len: usize, inner: usize, mean: bool },
    Reshape(Var),
    Conv2d { x: Var, k: Var, stride: usize, pad: usize },
    Depthwise { x: Var, k: Var, stride: usize, pad: usize },
    Upsample2x(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    L1Loss(Var, Var),
    L2Loss(Var, Var),
    SumAll(Var),
    MeanAll(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of executed operations. Nodes are appended in execution order, which is
/// a topological order; [`Graph::backward`] walks it in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, detail: String) -> DiffError {
    DiffError::ShapeMismatch { op, detail }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize), DiffError> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(mismatch(op, format!("expected rank-2 operand, got {s:?}"))),
        }
    }

    /// `a [m×k] · b [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.binary(a, b, value, Op::MatMul(a, b)))
    }

    /// `a [m×k] · bᵀ` with `b [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (m, k) = self.mat_dims(a, "matmul_nt")?;
        let (n, k2) = self.mat_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(mismatch("matmul_nt", format!("[{m}x{k}] x [{n}x{k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.binary(a, b, value, Op::MatMulNt(a, b)))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape(), data).expect("same shape")
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let xv = self.value(x);
        Tensor::new(xv.shape(), xv.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape(a, b, "add")?;
        let value = self.zip_with(a, b, |x, y| x + y);
        Ok(self.binary(a, b, value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape(a, b, "sub")?;
        let value = self.zip_with(a, b, |x, y| x - y);
        Ok(self.binary(a, b, value, Op::Sub(a, b)))
    }

    /// Elementwise product of equal-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape(a, b, "mul")?;
        let value = self.zip_with(a, b, |x, y| x * y);
        Ok(self.binary(a, b, value, Op::Mul(a, b)))
    }

    /// Adds `bias [n]` to every row of `a [.., n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, DiffError> {
        let n = *self.shape(a).last().unwrap_or(&0);
        if self.shape(bias) != [n] {
            return Err(mismatch(
                "add_bias",
                format!("{:?} + bias {:?}", self.shape(a), self.shape(bias)),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let av = self.value(a);
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(&b) {
                *x += y;
            }
        }
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.binary(a, bias, value, Op::AddBias(a, bias)))
    }

    /// Hadamard product where `a` is either shaped like `b` or has a trailing
    /// extent of 1 that is broadcast across `b`'s last axis.
    pub fn hadamard_broadcast(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa == sb {
            return self.mul(a, b);
        }
        let ok = sa.len() == sb.len()
            && !sa.is_empty()
            && sa[sa.len() - 1] == 1
            && sa[..sa.len() - 1] == sb[..sb.len() - 1];
        if !ok {
            return Err(mismatch("hadamard_broadcast", format!("{sa:?} vs {sb:?}")));
        }
        let d = sb[sb.len() - 1];
        let av = self.value(a).data();
        let mut data = self.value(b).data().to_vec();
        for (row, &s) in data.chunks_mut(d).zip(av) {
            for x in row {
                *x *= s;
            }
        }
        let value = Tensor::new(&sb, data)?;
        Ok(self.binary(a, b, value, Op::MulBcast(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.map(x, |v| v * c);
        self.unary(x, value, Op::Scale(x, c))
    }

    /// Adds a constant tensor of the same shape; the constant takes no gradient.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var, DiffError> {
        if self.shape(x) != c.shape() {
            return Err(mismatch(
                "add_const",
                format!("{:?} vs {:?}", self.shape(x), c.shape()),
            ));
        }
        let xv = self.value(x);
        let data = xv.data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let value = Tensor::new(xv.shape(), data)?;
        Ok(self.unary(x, value, Op::AddConst(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.map(x, kernels::sigmoid);
        self.unary(x, value, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.map(x, |v| v.max(0.0));
        self.unary(x, value, Op::Relu(x))
    }

    /// `ln(1 + eˣ)` evaluated as `max(x, 0) + ln(1 + e^{-|x|})`.
    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.map(x, kernels::softplus);
        self.unary(x, value, Op::Softplus(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.map(x, kernels::gelu);
        self.unary(x, value, Op::Gelu(x))
    }

    /// Max-shifted softmax over consecutive runs of `len` elements.
    pub fn softmax_rows(&mut self, x: Var, len: usize) -> Result<Var, DiffError> {
        let xv = self.value(x);
        if len == 0 || xv.numel() % len != 0 {
            return Err(mismatch("softmax", format!("{:?} rows of {len}", xv.shape())));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(len) {
            kernels::softmax_in_place(row);
        }
        let value = Tensor::new(xv.shape(), data)?;
        Ok(self.unary(x, value, Op::SoftmaxRows(x, len)))
    }

    /// Softmax over the spatial positions of an `s×s×1` map, or of each map in
    /// an `n×s×s×1` batch.
    pub fn softmax_spatial(&mut self, x: Var) -> Result<Var, DiffError> {
        let len = match self.shape(x) {
            [s1, s2, 1] => s1 * s2,
            [_, s1, s2, 1] => s1 * s2,
            s => {
                return Err(mismatch(
                    "softmax_spatial",
                    format!("expected single-channel map, got {s:?}"),
                ))
            }
        };
        self.softmax_rows(x, len)
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var, DiffError> {
        let len = *self.shape(x).last().unwrap_or(&0);
        self.softmax_rows(x, len)
    }

    fn spatial_dims(&self, x: Var, op: &'static str) -> Result<(usize, usize, usize, Vec<usize>), DiffError> {
        match *self.shape(x) {
            [s1, s2, d] => Ok((1, s1 * s2, d, vec![d])),
            [n, s1, s2, d] => Ok((n, s1 * s2, d, vec![n, d])),
            ref s => Err(mismatch(op, format!("expected s×s×d cube, got {s:?}"))),
        }
    }

    fn reduce_groups(&mut self, x: Var, groups: usize, len: usize, inner: usize, mean: bool, out_shape: &[usize]) -> Result<Var, DiffError> {
        let xv = self.value(x).data();
        let mut out = vec![0.0; groups * inner];
        for g in 0..groups {
            let acc = &mut out[g * inner..(g + 1) * inner];
            for j in 0..len {
                let row = &xv[(g * len + j) * inner..(g * len + j + 1) * inner];
                for (a, b) in acc.iter_mut().zip(row) {
                    *a += b;
                }
            }
            if mean {
                let inv = 1.0 / len as f64;
                acc.iter_mut().for_each(|a| *a *= inv);
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.unary(x, value, Op::SumGroups { x, groups, len, inner, mean }))
    }

    /// `(s×s×d) → d` sum over spatial positions (batched: `n×s×s×d → n×d`).
    pub fn sum_spatial(&mut self, x: Var) -> Result<Var, DiffError> {
        let (n, len, d, out) = self.spatial_dims(x, "sum_spatial")?;
        self.reduce_groups(x, n, len, d, false, &out)
    }

    /// `(s×s×d) → d` mean over spatial positions (batched: `n×s×s×d → n×d`).
    pub fn mean_pool_spatial(&mut self, x: Var) -> Result<Var, DiffError> {
        let (n, len, d, out) = self.spatial_dims(x, "mean_pool_spatial")?;
        self.reduce_groups(x, n, len, d, true, &out)
    }

    /// Mean over the rows of a `[t×d]` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, DiffError> {
        let (t, d) = self.mat_dims(x, "mean_rows")?;
        self.reduce_groups(x, 1, t, d, true, &[1, d])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.unary(x, value, Op::Reshape(x)))
    }

    /// Cross-correlation of `x [n×h×w×cin]` with `k [kh×kw×cin×cout]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var, DiffError> {
        let geo = kernels::ConvGeometry::new(self.shape(x), self.shape(k), stride, pad, false)?;
        let mut out = vec![0.0; geo.out_len()];
        kernels::conv2d_forward(&geo, self.value(x).data(), self.value(k).data(), &mut out);
        let value = Tensor::new(&geo.out_shape(), out)?;
        Ok(self.binary(x, k, value, Op::Conv2d { x, k, stride, pad }))
    }

    /// Depthwise cross-correlation of `x [n×h×w×c]` with `k [kh×kw×c]`.
    pub fn depthwise_conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var, DiffError> {
        let geo = kernels::ConvGeometry::new(self.shape(x), self.shape(k), stride, pad, true)?;
        let mut out = vec![0.0; geo.out_len()];
        kernels::depthwise_forward(&geo, self.value(x).data(), self.value(k).data(), &mut out);
        let value = Tensor::new(&geo.out_shape(), out)?;
        Ok(self.binary(x, k, value, Op::Depthwise { x, k, stride, pad }))
    }

    /// Nearest-neighbour 2× upsampling of `x [n×h×w×c]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var, DiffError> {
        let [n, h, w, c] = *self.shape(x) else {
            return Err(mismatch("upsample2x", format!("{:?}", self.shape(x))));
        };
        let xv = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * oh * ow * c];
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let src = ((b * h + oy / 2) * w + ox / 2) * c;
                    let dst = ((b * oh + oy) * ow + ox) * c;
                    out[dst..dst + c].copy_from_slice(&xv[src..src + c]);
                }
            }
        }
        let value = Tensor::new(&[n, oh, ow, c], out)?;
        Ok(self.unary(x, value, Op::Upsample2x(x)))
    }

    /// Layer normalization over the last axis (epsilon 1e-5).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, DiffError> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(mismatch("layer_norm", format!("{:?}", self.shape(x))));
        }
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = xv.numel() / d;
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + 1e-5).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + bt[j];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// Columns `start..start+len` of a `[m×n]` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let (m, n) = self.mat_dims(x, "slice_cols")?;
        if start + len > n {
            return Err(mismatch("slice_cols", format!("{start}+{len} > {n}")));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&xv[r * n + start..r * n + start + len]);
        }
        let value = Tensor::new(&[m, len], out)?;
        Ok(self.unary(x, value, Op::SliceCols { x, start }))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let mut m = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.mat_dims(p, "concat_cols")?;
            if *m.get_or_insert(r) != r {
                return Err(mismatch("concat_cols", "row counts differ".into()));
            }
            widths.push(c);
        }
        let m = m.unwrap_or(0);
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p).data();
            for r in 0..m {
                out[r * total + off..r * total + off + w].copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let value = Tensor::new(&[m, total], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape(a, b, "l1_loss")?;
        let n = self.value(a).numel() as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        Ok(self.binary(a, b, Tensor::scalar(s / n), Op::L1Loss(a, b)))
    }

    /// Mean squared difference.
    pub fn l2_loss(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape(a, b, "l2_loss")?;
        let n = self.value(a).numel() as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.binary(a, b, Tensor::scalar(s / n), Op::L2Loss(a, b)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.unary(x, Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        self.unary(x, Tensor::scalar(s), Op::MeanAll(x))
    }

    /// Reverse-mode sweep from the scalar `loss`. Gradients accumulate
    /// additively when a node feeds several consumers.
    pub fn backward(&self, loss: Var) -> Result<Grads, DiffError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(mismatch("backward", format!("non-scalar loss {:?}", lv.shape())));
        }
        if !lv.all_finite() {
            return Err(DiffError::NonFiniteValue("loss"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(lv.shape(), vec![1.0])?);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
        }
        Ok(Grads { grads })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), DiffError> {
        let gd = g.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.mat_dims(*a, "matmul")?;
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt_acc(gd, self.value(*b).data(), &mut da, m, n, k);
                    accumulate(grads, *a, Tensor::new(&[m, k], da)?);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn_acc(self.value(*a).data(), gd, &mut db, m, k, n);
                    accumulate(grads, *b, Tensor::new(&[k, n], db)?);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.mat_dims(*a, "matmul_nt")?;
                let n = self.shape(*b)[0];
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_acc(gd, self.value(*b).data(), &mut da, m, n, k);
                    accumulate(grads, *a, Tensor::new(&[m, k], da)?);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; n * k];
                    kernels::matmul_tn_acc(gd, self.value(*a).data(), &mut db, m, n, k);
                    accumulate(grads, *b, Tensor::new(&[n, k], db)?);
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    let neg = gd.iter().map(|v| -v).collect();
                    accumulate(grads, *b, Tensor::new(g.shape(), neg)?);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d = gd.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                    accumulate(grads, *a, Tensor::new(g.shape(), d)?);
                }
                if self.rg(*b) {
                    let d = gd.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                    accumulate(grads, *b, Tensor::new(g.shape(), d)?);
                }
            }
            Op::AddBias(a, bias) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*bias) {
                    let n = self.shape(*bias)[0];
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, *bias, Tensor::new(&[n], db)?);
                }
            }
            Op::MulBcast(a, b) => {
                let d = *self.shape(*b).last().unwrap_or(&1);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.rg(*a) {
                    let da = gd
                        .chunks(d)
                        .zip(bv.chunks(d))
                        .map(|(gr, br)| gr.iter().zip(br).map(|(x, y)| x * y).sum())
                        .collect();
                    accumulate(grads, *a, Tensor::new(self.shape(*a), da)?);
                }
                if self.rg(*b) {
                    let mut db = gd.to_vec();
                    for (row, &s) in db.chunks_mut(d).zip(av) {
                        row.iter_mut().for_each(|v| *v *= s);
                    }
                    accumulate(grads, *b, Tensor::new(g.shape(), db)?);
                }
            }
            Op::Scale(x, c) => {
                let d = gd.iter().map(|v| v * c).collect();
                accumulate(grads, *x, Tensor::new(g.shape(), d)?);
            }
            Op::AddConst(x) => accumulate(grads, *x, g.clone()),
            Op::Sigmoid(x) => {
                let d = gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                accumulate(grads, *x, Tensor::new(g.shape(), d)?);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *x, Tensor::new(g.shape(), d)?);
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, x)| g * kernels::sigmoid(*x))
                    .collect();
                accumulate(grads, *x, Tensor::new(g.shape(), d)?);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, x)| g * kernels::gelu_grad(*x))
                    .collect();
                accumulate(grads, *x, Tensor::new(g.shape(), d)?);
            }
            Op::SoftmaxRows(x, len) => {
                let mut d = vec![0.0; gd.len()];
                for ((dr, gr), yr) in d.chunks_mut(*len).zip(gd.chunks(*len)).zip(y.chunks(*len)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..*len {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *x, Tensor::new(g.shape(), d)?);
            }
            Op::SumGroups { x, groups, len, inner, mean } => {
                let scale = if *mean { 1.0 / *len as f64 } else { 1.0 };
                let mut d = vec![0.0; groups * len * inner];
                for gi in 0..*groups {
                    let gr = &gd[gi * inner..(gi + 1) * inner];
                    for j in 0..*len {
                        let base = (gi * len + j) * inner;
                        for (t, v) in d[base..base + inner].iter_mut().zip(gr) {
                            *t = v * scale;
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(self.shape(*x), d)?);
            }
            Op::Reshape(x) => {
                accumulate(grads, *x, g.clone().reshaped(self.shape(*x))?);
            }
            Op::Conv2d { x, k, stride, pad } => {
                let geo = kernels::ConvGeometry::new(self.shape(*x), self.shape(*k), *stride, *pad, false)?;
                let mut dx = self.rg(*x).then(|| vec![0.0; self.value(*x).numel()]);
                let mut dk = self.rg(*k).then(|| vec![0.0; self.value(*k).numel()]);
                kernels::conv2d_backward(
                    &geo,
                    self.value(*x).data(),
                    self.value(*k).data(),
                    gd,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?);
                }
                if let Some(dk) = dk {
                    accumulate(grads, *k, Tensor::new(self.shape(*k), dk)?);
                }
            }
            Op::Depthwise { x, k, stride, pad } => {
                let geo = kernels::ConvGeometry::new(self.shape(*x), self.shape(*k), *stride, *pad, true)?;
                let mut dx = self.rg(*x).then(|| vec![0.0; self.value(*x).numel()]);
                let mut dk = self.rg(*k).then(|| vec![0.0; self.value(*k).numel()]);
                kernels::depthwise_backward(
                    &geo,
                    self.value(*x).data(),
                    self.value(*k).data(),
                    gd,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?);
                }
                if let Some(dk) = dk {
                    accumulate(grads, *k, Tensor::new(self.shape(*k), dk)?);
                }
            }
            Op::Upsample2x(x) => {
                let [n, h, w, c] = *self.shape(*x) else { unreachable!() };
                let (oh, ow) = (2 * h, 2 * w);
                let mut d = vec![0.0; n * h * w * c];
                for b in 0..n {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let dst = ((b * h + oy / 2) * w + ox / 2) * c;
                            let src = ((b * oh + oy) * ow + ox) * c;
                            for j in 0..c {
                                d[dst + j] += gd[src + j];
                            }
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(self.shape(*x), d)?);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.shape(*gamma)[0];
                let gv = self.value(*gamma).data();
                let rows = xhat.len() / d;
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += gd[r * d + j] * xhat[r * d + j];
                            db[j] += gd[r * d + j];
                        }
                    }
                    if self.rg(*gamma) {
                        accumulate(grads, *gamma, Tensor::new(&[d], dg)?);
                    }
                    if self.rg(*beta) {
                        accumulate(grads, *beta, Tensor::new(&[d], db)?);
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let dxh: Vec<f64> = (0..d).map(|j| gd[r * d + j] * gv[j]).collect();
                        let m1 = dxh.iter().sum::<f64>() / d as f64;
                        let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = rstd[r] * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?);
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.mat_dims(*x, "slice_cols")?;
                let len = g.shape()[1];
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    d[r * n + start..r * n + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                accumulate(grads, *x, Tensor::new(&[m, n], d)?);
            }
            Op::ConcatCols(parts) => {
                let [m, total] = *g.shape() else { unreachable!() };
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&gd[r * total + off..r * total + off + w]);
                        }
                        accumulate(grads, p, Tensor::new(&[m, w], d)?);
                    }
                    off += w;
                }
            }
            Op::L1Loss(a, b) => {
                let n = self.value(*a).numel() as f64;
                let s = gd[0] / n;
                let d: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(x, y)| {
                        let diff = x - y;
                        if diff > 0.0 {
                            s
                        } else if diff < 0.0 {
                            -s
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.push_pair(grads, *a, *b, d)?;
            }
            Op::L2Loss(a, b) => {
                let n = self.value(*a).numel() as f64;
                let s = 2.0 * gd[0] / n;
                let d: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(x, y)| s * (x - y))
                    .collect();
                self.push_pair(grads, *a, *b, d)?;
            }
            Op::SumAll(x) => {
                let shape = self.shape(*x);
                accumulate(grads, *x, Tensor::full(shape, gd[0]));
            }
            Op::MeanAll(x) => {
                let xv = self.value(*x);
                accumulate(grads, *x, Tensor::full(xv.shape(), gd[0] / xv.numel() as f64));
            }
        }
        Ok(())
    }

    fn push_pair(&self, grads: &mut [Option<Tensor>], a: Var, b: Var, da: Vec<f64>) -> Result<(), DiffError> {
        let shape = self.shape(a).to_vec();
        if self.rg(b) {
            let db = da.iter().map(|v| -v).collect();
            accumulate(grads, b, Tensor::new(&shape, db)?);
        }
        if self.rg(a) {
            accumulate(grads, a, Tensor::new(&shape, da)?);
        }
        Ok(())
    }
}
