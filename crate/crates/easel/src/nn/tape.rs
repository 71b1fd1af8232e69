//! Reverse-mode automatic differentiation over a flat tape.
//!
//! A [`Graph`] records every operation of a forward pass; [`Graph::backward`]
//! walks the tape once in reverse and accumulates gradients for every node
//! reachable from the loss. Nodes unreachable from the loss keep a zero
//! gradient. The same builders serve training and inference; inference simply
//! never calls `backward`.

use super::ops::{self, ConvMeta};
use super::tensor::{Scalar, Tensor};
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<S: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddBiasRow(Var, Var),
    AddBiasChan { x: Var, b: Var, chans: usize, hw: usize },
    MatmulNN(Var, Var),
    MatmulNT(Var, Var),
    Conv2d { x: Var, w: Var, meta: ConvMeta, n: usize },
    ConvInputGrad { gy: Var, w: Var, meta: ConvMeta, n: usize },
    AvgPool2 { x: Var, n: usize, c: usize, h: usize, w: usize },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Square(Var),
    SqrtGuard(Var),
    LogSoftmax { x: Var, rows: usize, cols: usize },
    Softmax { x: Var, rows: usize, cols: usize },
    RowSums { x: Var, rows: usize, cols: usize },
    SumAll(Var),
    MeanAll(Var),
    SelectCols { x: Var, rows: usize, cols: usize, idx: Vec<usize> },
    ConcatCols { a: Var, b: Var, rows: usize, ca: usize, cb: usize },
    ConcatChan { a: Var, b: Var, n: usize, ca: usize, cb: usize, hw: usize },
    MulConst(Var, Tensor<S>),
    AddConst(Var),
    SpectralNorm { w: Var, u: Vec<S>, v: Vec<S>, sigma: S },
    Embed { table: Var, idx: Vec<usize> },
    Reshape(Var),
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
    /// Validate every op output for NaN/Inf. On by default under
    /// debug assertions; always on for the f64 test configuration.
    pub check_finite: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), check_finite: cfg!(debug_assertions) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` call with respect to `v`; zeros if the
    /// node was unreachable from the loss.
    pub fn grad(&self, v: Var) -> Tensor<S> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape()),
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Result<Var, NnError> {
        if self.check_finite && !value.all_finite() {
            return Err(NnError::NonFinite(format!("op output #{}", self.nodes.len())));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf node (parameter or input). Gradients accumulate here.
    pub fn leaf(&mut self, value: Tensor<S>) -> Result<Var, NnError> {
        if !value.all_finite() {
            return Err(NnError::NonFinite("leaf input".into()));
        }
        self.push(value, Op::Leaf)
    }

    /// Alias of `leaf` for values that are data rather than parameters.
    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var, NnError> {
        self.leaf(value)
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary_same_shape("add", a, b)?;
        let mut out = self.nodes[a.0].value.clone();
        out.add_in_place(&self.nodes[b.0].value);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary_same_shape("sub", a, b)?;
        let bv = &self.nodes[b.0].value;
        let mut out = self.nodes[a.0].value.clone();
        for (x, y) in out.data_mut().iter_mut().zip(bv.data().iter()) {
            *x = *x - *y;
        }
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary_same_shape("mul", a, b)?;
        let bv = &self.nodes[b.0].value;
        let mut out = self.nodes[a.0].value.clone();
        for (x, y) in out.data_mut().iter_mut().zip(bv.data().iter()) {
            *x = *x * *y;
        }
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NnError> {
        let s = S::from_f64(c);
        let out = self.nodes[a.0].value.map(|v| v * s);
        self.push(out, Op::Scale(a, s))
    }

    /// x[n,f] + b[f] broadcast over rows.
    pub fn add_bias_row(&mut self, x: Var, b: Var) -> Result<Var, NnError> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 2 || bs != vec![xs[1]] {
            return Err(NnError::ShapeMismatch { op: "add_bias_row", lhs: xs, rhs: bs });
        }
        let cols = xs[1];
        let bv = self.nodes[b.0].value.data().to_vec();
        let mut out = self.nodes[x.0].value.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv[i % cols];
        }
        self.push(out, Op::AddBiasRow(x, b))
    }

    /// x[n,c,h,w] + b[c] broadcast over batch and space.
    pub fn add_bias_chan(&mut self, x: Var, b: Var) -> Result<Var, NnError> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 4 || bs != vec![xs[1]] {
            return Err(NnError::ShapeMismatch { op: "add_bias_chan", lhs: xs, rhs: bs });
        }
        let (chans, hw) = (xs[1], xs[2] * xs[3]);
        let bv = self.nodes[b.0].value.data().to_vec();
        let mut out = self.nodes[x.0].value.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv[(i / hw) % chans];
        }
        self.push(out, Op::AddBiasChan { x, b, chans, hw })
    }

    /// a[m,k] x b[k,n]
    pub fn matmul_nn(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (asv, bsv) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if asv.len() != 2 || bsv.len() != 2 || asv[1] != bsv[0] {
            return Err(NnError::ShapeMismatch { op: "matmul_nn", lhs: asv, rhs: bsv });
        }
        let (m, k, n) = (asv[0], asv[1], bsv[1]);
        let mut out = vec![S::ZERO; m * n];
        ops::gemm_nn(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), &mut out, m, k, n);
        self.push(Tensor::from_vec(&[m, n], out), Op::MatmulNN(a, b))
    }

    /// a[m,k] x b[n,k]^T — the dense-layer product with row-major weights.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (asv, bsv) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if asv.len() != 2 || bsv.len() != 2 || asv[1] != bsv[1] {
            return Err(NnError::ShapeMismatch { op: "matmul_nt", lhs: asv, rhs: bsv });
        }
        let (m, k, n) = (asv[0], asv[1], bsv[0]);
        let mut out = vec![S::ZERO; m * n];
        ops::gemm_nt(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), &mut out, m, k, n);
        self.push(Tensor::from_vec(&[m, n], out), Op::MatmulNT(a, b))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var, NnError> {
        let (xs, wsv) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || wsv.len() != 4 || xs[1] != wsv[1] {
            return Err(NnError::ShapeMismatch { op: "conv2d", lhs: xs, rhs: wsv });
        }
        let meta = ConvMeta {
            in_ch: xs[1],
            out_ch: wsv[0],
            kh: wsv[2],
            kw: wsv[3],
            stride,
            pad,
            in_h: xs[2],
            in_w: xs[3],
        };
        let n = xs[0];
        let y = ops::conv2d_forward(self.nodes[x.0].value.data(), self.nodes[w.0].value.data(), n, &meta);
        let shape = [n, meta.out_ch, meta.out_h(), meta.out_w()];
        self.push(Tensor::from_vec(&shape, y), Op::Conv2d { x, w, meta, n })
    }

    /// The adjoint of `conv2d` with respect to its input, recorded as a
    /// first-class op so gradient-of-gradient expressions (gradient penalty)
    /// can be built symbolically on the tape.
    pub fn conv2d_input_grad(&mut self, gy: Var, w: Var, meta: ConvMeta) -> Result<Var, NnError> {
        let (gs, wsv) = (self.shape(gy).to_vec(), self.shape(w).to_vec());
        if gs.len() != 4 || wsv.len() != 4 || gs[1] != wsv[0] {
            return Err(NnError::ShapeMismatch { op: "conv2d_input_grad", lhs: gs, rhs: wsv });
        }
        let n = gs[0];
        let dx = ops::conv2d_input_grad(self.nodes[gy.0].value.data(), self.nodes[w.0].value.data(), n, &meta);
        let shape = [n, meta.in_ch, meta.in_h, meta.in_w];
        self.push(Tensor::from_vec(&shape, dx), Op::ConvInputGrad { gy, w, meta, n })
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var, NnError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(NnError::ShapeMismatch { op: "avg_pool2", lhs: xs, rhs: vec![] });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let y = ops::avg_pool2(self.nodes[x.0].value.data(), n, c, h, w);
        self.push(Tensor::from_vec(&[n, c, h / 2, w / 2], y), Op::AvgPool2 { x, n, c, h, w })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NnError> {
        let out = self.nodes[x.0].value.map(|v| v.maxv(S::ZERO));
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NnError> {
        let out = self.nodes[x.0].value.map(ops::sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, NnError> {
        let out = self.nodes[x.0].value.map(|v| v.tanh());
        self.push(out, Op::Tanh(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, NnError> {
        let out = self.nodes[x.0].value.map(ops::softplus);
        self.push(out, Op::Softplus(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var, NnError> {
        let out = self.nodes[x.0].value.map(|v| v * v);
        self.push(out, Op::Square(x))
    }

    /// Elementwise square root with the gradient guarded at zero.
    pub fn sqrt_guard(&mut self, x: Var) -> Result<Var, NnError> {
        let out = self.nodes[x.0].value.map(|v| v.maxv(S::ZERO).sqrt());
        self.push(out, Op::SqrtGuard(x))
    }

    fn rows_cols(&self, op: &'static str, x: Var) -> Result<(usize, usize), NnError> {
        let xs = self.shape(x);
        if xs.len() != 2 {
            return Err(NnError::ShapeMismatch { op, lhs: xs.to_vec(), rhs: vec![] });
        }
        Ok((xs[0], xs[1]))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var, NnError> {
        let (rows, cols) = self.rows_cols("log_softmax", x)?;
        let y = ops::log_softmax_rows(self.nodes[x.0].value.data(), rows, cols);
        self.push(Tensor::from_vec(&[rows, cols], y), Op::LogSoftmax { x, rows, cols })
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, NnError> {
        let (rows, cols) = self.rows_cols("softmax", x)?;
        let y = ops::softmax_rows(self.nodes[x.0].value.data(), rows, cols);
        self.push(Tensor::from_vec(&[rows, cols], y), Op::Softmax { x, rows, cols })
    }

    /// Sums each row of `[rows, cols]` into a `[rows]` vector.
    pub fn row_sums(&mut self, x: Var) -> Result<Var, NnError> {
        let (rows, cols) = self.rows_cols("row_sums", x)?;
        let data = self.nodes[x.0].value.data();
        let mut y = vec![S::ZERO; rows];
        for r in 0..rows {
            let mut acc = S::ZERO;
            for c in 0..cols {
                acc += data[r * cols + c];
            }
            y[r] = acc;
        }
        self.push(Tensor::from_vec(&[rows], y), Op::RowSums { x, rows, cols })
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, NnError> {
        let mut acc = S::ZERO;
        for &v in self.nodes[x.0].value.data() {
            acc += v;
        }
        self.push(Tensor::scalar(acc), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var, NnError> {
        let n = self.nodes[x.0].value.len();
        let mut acc = S::ZERO;
        for &v in self.nodes[x.0].value.data() {
            acc += v;
        }
        self.push(Tensor::scalar(acc / S::from_f64(n as f64)), Op::MeanAll(x))
    }

    /// y[r] = x[r, idx[r]]
    pub fn select_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var, NnError> {
        let (rows, cols) = self.rows_cols("select_cols", x)?;
        if idx.len() != rows {
            return Err(NnError::ShapeMismatch { op: "select_cols", lhs: vec![rows, cols], rhs: vec![idx.len()] });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(NnError::Usage(format!("select_cols index {bad} out of {cols}")));
        }
        let data = self.nodes[x.0].value.data();
        let y: Vec<S> = idx.iter().enumerate().map(|(r, &i)| data[r * cols + i]).collect();
        self.push(Tensor::from_vec(&[rows], y), Op::SelectCols { x, rows, cols, idx: idx.to_vec() })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ra, ca) = self.rows_cols("concat_cols", a)?;
        let (rb, cb) = self.rows_cols("concat_cols", b)?;
        if ra != rb {
            return Err(NnError::ShapeMismatch { op: "concat_cols", lhs: vec![ra, ca], rhs: vec![rb, cb] });
        }
        let mut y = vec![S::ZERO; ra * (ca + cb)];
        let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        for r in 0..ra {
            y[r * (ca + cb)..r * (ca + cb) + ca].copy_from_slice(&av[r * ca..(r + 1) * ca]);
            y[r * (ca + cb) + ca..(r + 1) * (ca + cb)].copy_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
        self.push(Tensor::from_vec(&[ra, ca + cb], y), Op::ConcatCols { a, b, rows: ra, ca, cb })
    }

    /// Concatenates two `[n,c,h,w]` stacks along the channel axis.
    pub fn concat_chan(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (asv, bsv) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if asv.len() != 4 || bsv.len() != 4 || asv[0] != bsv[0] || asv[2..] != bsv[2..] {
            return Err(NnError::ShapeMismatch { op: "concat_chan", lhs: asv, rhs: bsv });
        }
        let (n, ca, cb, hw) = (asv[0], asv[1], bsv[1], asv[2] * asv[3]);
        let mut y = vec![S::ZERO; n * (ca + cb) * hw];
        let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        for s in 0..n {
            let dst = &mut y[s * (ca + cb) * hw..(s + 1) * (ca + cb) * hw];
            dst[..ca * hw].copy_from_slice(&av[s * ca * hw..(s + 1) * ca * hw]);
            dst[ca * hw..].copy_from_slice(&bv[s * cb * hw..(s + 1) * cb * hw]);
        }
        let shape = [n, ca + cb, asv[2], asv[3]];
        self.push(Tensor::from_vec(&shape, y), Op::ConcatChan { a, b, n, ca, cb, hw })
    }

    /// Elementwise multiply by a constant tensor (masks, fixed gates).
    pub fn mul_const(&mut self, x: Var, t: Tensor<S>) -> Result<Var, NnError> {
        if self.shape(x) != t.shape() {
            return Err(NnError::ShapeMismatch { op: "mul_const", lhs: self.shape(x).to_vec(), rhs: t.shape().to_vec() });
        }
        let mut out = self.nodes[x.0].value.clone();
        for (a, b) in out.data_mut().iter_mut().zip(t.data().iter()) {
            *a = *a * *b;
        }
        self.push(out, Op::MulConst(x, t))
    }

    /// Elementwise add of a constant tensor (logit masking).
    pub fn add_const(&mut self, x: Var, t: Tensor<S>) -> Result<Var, NnError> {
        if self.shape(x) != t.shape() {
            return Err(NnError::ShapeMismatch { op: "add_const", lhs: self.shape(x).to_vec(), rhs: t.shape().to_vec() });
        }
        let mut out = self.nodes[x.0].value.clone();
        for (a, b) in out.data_mut().iter_mut().zip(t.data().iter()) {
            *a = *a + *b;
        }
        self.push(out, Op::AddConst(x))
    }

    /// W / sigma with sigma = u^T W v; `u` and `v` are treated as constants
    /// (the power-iteration estimates), matching the standard formulation.
    pub fn spectral_norm(&mut self, w: Var, u: Vec<S>, v: Vec<S>) -> Result<Var, NnError> {
        let wsv = self.shape(w).to_vec();
        if wsv.len() != 2 || wsv[0] != u.len() || wsv[1] != v.len() {
            return Err(NnError::ShapeMismatch { op: "spectral_norm", lhs: wsv, rhs: vec![u.len(), v.len()] });
        }
        let (rows, cols) = (wsv[0], wsv[1]);
        let wd = self.nodes[w.0].value.data();
        let mut sigma = S::ZERO;
        for r in 0..rows {
            let mut acc = S::ZERO;
            for c in 0..cols {
                acc += wd[r * cols + c] * v[c];
            }
            sigma += u[r] * acc;
        }
        if sigma.to_f64() < 1e-12 {
            return Err(NnError::Usage(format!("spectral_norm: sigma estimate {} below floor", sigma.to_f64())));
        }
        let inv = S::ONE / sigma;
        let out = self.nodes[w.0].value.map(|x| x * inv);
        self.push(out, Op::SpectralNorm { w, u, v, sigma })
    }

    /// y[n,f] = table[idx[n], :]
    pub fn embed(&mut self, table: Var, idx: &[usize]) -> Result<Var, NnError> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(NnError::ShapeMismatch { op: "embed", lhs: ts, rhs: vec![] });
        }
        let (k, f) = (ts[0], ts[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
            return Err(NnError::Usage(format!("embed index {bad} out of {k}")));
        }
        let data = self.nodes[table.0].value.data();
        let mut y = vec![S::ZERO; idx.len() * f];
        for (r, &i) in idx.iter().enumerate() {
            y[r * f..(r + 1) * f].copy_from_slice(&data[i * f..(i + 1) * f]);
        }
        self.push(Tensor::from_vec(&[idx.len(), f], y), Op::Embed { table, idx: idx.to_vec() })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NnError> {
        let want: usize = shape.iter().product();
        if want != self.nodes[x.0].value.len() {
            return Err(NnError::ShapeMismatch { op: "reshape", lhs: self.shape(x).to_vec(), rhs: shape.to_vec() });
        }
        let out = self.nodes[x.0].value.clone().reshaped(shape);
        self.push(out, Op::Reshape(x))
    }

    fn accumulate(&mut self, v: Var, delta: Tensor<S>) {
        match &mut self.grads[v.0] {
            Some(g) => g.add_in_place(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reverse pass from a scalar loss. Gradients are then available through
    /// [`Graph::grad`] until the next forward op is recorded.
    pub fn backward(&mut self, loss: Var) -> Result<(), NnError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NnError::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].value.all_finite() {
            return Err(NnError::NonFinite("loss".into()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(S::ONE));

        for i in (0..self.nodes.len()).rev() {
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.apply_backward(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn apply_backward(&mut self, i: usize, g: &Tensor<S>) -> Result<(), NnError> {
        // Ops only reference strictly earlier nodes, so accumulation into
        // parents is safe while walking the tape in reverse.
        enum Todo<S: Scalar> {
            One(Var, Tensor<S>),
            Two(Var, Tensor<S>, Var, Tensor<S>),
            None,
        }
        let todo: Todo<S> = match &self.nodes[i].op {
            Op::Leaf => Todo::None,
            Op::Add(a, b) => Todo::Two(*a, g.clone(), *b, g.clone()),
            Op::Sub(a, b) => Todo::Two(*a, g.clone(), *b, g.map(|v| -v)),
            Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                let da = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(bv.iter()).map(|(&gv, &b)| gv * b).collect(),
                );
                let db = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(av.iter()).map(|(&gv, &a)| gv * a).collect(),
                );
                Todo::Two(*a, da, *b, db)
            }
            Op::Scale(a, c) => {
                let c = *c;
                Todo::One(*a, g.map(|v| v * c))
            }
            Op::AddBiasRow(x, b) => {
                let cols = self.shape(*b)[0];
                let rows = g.len() / cols;
                let mut db = vec![S::ZERO; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        db[c] += g.data()[r * cols + c];
                    }
                }
                Todo::Two(*x, g.clone(), *b, Tensor::from_vec(&[cols], db))
            }
            Op::AddBiasChan { x, b, chans, hw } => {
                let (chans, hw) = (*chans, *hw);
                let mut db = vec![S::ZERO; chans];
                for (i, &gv) in g.data().iter().enumerate() {
                    db[(i / hw) % chans] += gv;
                }
                Todo::Two(*x, g.clone(), *b, Tensor::from_vec(&[chans], db))
            }
            Op::MatmulNN(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let mut da = vec![S::ZERO; m * k];
                ops::gemm_nt(g.data(), self.nodes[b.0].value.data(), &mut da, m, n, k);
                let mut db = vec![S::ZERO; k * n];
                ops::gemm_tn(self.nodes[a.0].value.data(), g.data(), &mut db, k, m, n);
                Todo::Two(*a, Tensor::from_vec(&[m, k], da), *b, Tensor::from_vec(&[k, n], db))
            }
            Op::MatmulNT(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                let mut da = vec![S::ZERO; m * k];
                ops::gemm_nn(g.data(), self.nodes[b.0].value.data(), &mut da, m, n, k);
                let mut db = vec![S::ZERO; n * k];
                ops::gemm_tn(g.data(), self.nodes[a.0].value.data(), &mut db, n, m, k);
                Todo::Two(*a, Tensor::from_vec(&[m, k], da), *b, Tensor::from_vec(&[n, k], db))
            }
            Op::Conv2d { x, w, meta, n } => {
                let dx = ops::conv2d_input_grad(g.data(), self.nodes[w.0].value.data(), *n, meta);
                let dw = ops::conv2d_weight_grad(self.nodes[x.0].value.data(), g.data(), *n, meta);
                let xs = self.shape(*x).to_vec();
                let wsv = self.shape(*w).to_vec();
                Todo::Two(*x, Tensor::from_vec(&xs, dx), *w, Tensor::from_vec(&wsv, dw))
            }
            Op::ConvInputGrad { gy, w, meta, n } => {
                // Adjoint of the adjoint is the forward map; the weight
                // cotangent mirrors conv2d's but with (g, gy) in place of
                // (x, dy).
                let dgy = ops::conv2d_forward(g.data(), self.nodes[w.0].value.data(), *n, meta);
                let dw = ops::conv2d_weight_grad(g.data(), self.nodes[gy.0].value.data(), *n, meta);
                let gys = self.shape(*gy).to_vec();
                let wsv = self.shape(*w).to_vec();
                Todo::Two(*gy, Tensor::from_vec(&gys, dgy), *w, Tensor::from_vec(&wsv, dw))
            }
            Op::AvgPool2 { x, n, c, h, w } => {
                let dx = ops::avg_pool2_backward(g.data(), *n, *c, *h, *w);
                let xs = self.shape(*x).to_vec();
                Todo::One(*x, Tensor::from_vec(&xs, dx))
            }
            Op::Relu(x) => {
                let xv = self.nodes[x.0].value.data();
                let dx = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(xv.iter())
                        .map(|(&gv, &x)| if x > S::ZERO { gv } else { S::ZERO })
                        .collect(),
                );
                Todo::One(*x, dx)
            }
            Op::Sigmoid(x) => {
                let yv = self.nodes[i].value.data();
                let dx = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(yv.iter()).map(|(&gv, &y)| gv * y * (S::ONE - y)).collect(),
                );
                Todo::One(*x, dx)
            }
            Op::Tanh(x) => {
                let yv = self.nodes[i].value.data();
                let dx = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(yv.iter()).map(|(&gv, &y)| gv * (S::ONE - y * y)).collect(),
                );
                Todo::One(*x, dx)
            }
            Op::Softplus(x) => {
                let xv = self.nodes[x.0].value.data();
                let dx = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(xv.iter()).map(|(&gv, &x)| gv * ops::sigmoid(x)).collect(),
                );
                Todo::One(*x, dx)
            }
            Op::Square(x) => {
                let xv = self.nodes[x.0].value.data();
                let two = S::from_f64(2.0);
                let dx = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(xv.iter()).map(|(&gv, &x)| gv * two * x).collect(),
                );
                Todo::One(*x, dx)
            }
            Op::SqrtGuard(x) => {
                let yv = self.nodes[i].value.data();
                let floor = S::from_f64(1e-12);
                let two = S::from_f64(2.0);
                let dx = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(yv.iter()).map(|(&gv, &y)| gv / (two * y.maxv(floor))).collect(),
                );
                Todo::One(*x, dx)
            }
            Op::LogSoftmax { x, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let y = self.nodes[i].value.data();
                let mut dx = vec![S::ZERO; rows * cols];
                for r in 0..rows {
                    let mut gsum = S::ZERO;
                    for c in 0..cols {
                        gsum += g.data()[r * cols + c];
                    }
                    for c in 0..cols {
                        let p = y[r * cols + c].exp();
                        dx[r * cols + c] = g.data()[r * cols + c] - p * gsum;
                    }
                }
                Todo::One(*x, Tensor::from_vec(&[rows, cols], dx))
            }
            Op::Softmax { x, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let y = self.nodes[i].value.data();
                let mut dx = vec![S::ZERO; rows * cols];
                for r in 0..rows {
                    let mut dot = S::ZERO;
                    for c in 0..cols {
                        dot += g.data()[r * cols + c] * y[r * cols + c];
                    }
                    for c in 0..cols {
                        dx[r * cols + c] = y[r * cols + c] * (g.data()[r * cols + c] - dot);
                    }
                }
                Todo::One(*x, Tensor::from_vec(&[rows, cols], dx))
            }
            Op::RowSums { x, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let mut dx = vec![S::ZERO; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dx[r * cols + c] = g.data()[r];
                    }
                }
                Todo::One(*x, Tensor::from_vec(&[rows, cols], dx))
            }
            Op::SumAll(x) => {
                let xs = self.shape(*x).to_vec();
                Todo::One(*x, Tensor::full(&xs, g.item()))
            }
            Op::MeanAll(x) => {
                let xs = self.shape(*x).to_vec();
                let n = xs.iter().product::<usize>();
                Todo::One(*x, Tensor::full(&xs, g.item() / S::from_f64(n as f64)))
            }
            Op::SelectCols { x, rows, cols, idx } => {
                let (rows, cols) = (*rows, *cols);
                let mut dx = vec![S::ZERO; rows * cols];
                for (r, &c) in idx.iter().enumerate() {
                    dx[r * cols + c] = g.data()[r];
                }
                Todo::One(*x, Tensor::from_vec(&[rows, cols], dx))
            }
            Op::ConcatCols { a, b, rows, ca, cb } => {
                let (rows, ca, cb) = (*rows, *ca, *cb);
                let mut da = vec![S::ZERO; rows * ca];
                let mut db = vec![S::ZERO; rows * cb];
                for r in 0..rows {
                    da[r * ca..(r + 1) * ca].copy_from_slice(&g.data()[r * (ca + cb)..r * (ca + cb) + ca]);
                    db[r * cb..(r + 1) * cb].copy_from_slice(&g.data()[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                }
                Todo::Two(*a, Tensor::from_vec(&[rows, ca], da), *b, Tensor::from_vec(&[rows, cb], db))
            }
            Op::ConcatChan { a, b, n, ca, cb, hw } => {
                let (n, ca, cb, hw) = (*n, *ca, *cb, *hw);
                let mut da = vec![S::ZERO; n * ca * hw];
                let mut db = vec![S::ZERO; n * cb * hw];
                for s in 0..n {
                    let src = &g.data()[s * (ca + cb) * hw..(s + 1) * (ca + cb) * hw];
                    da[s * ca * hw..(s + 1) * ca * hw].copy_from_slice(&src[..ca * hw]);
                    db[s * cb * hw..(s + 1) * cb * hw].copy_from_slice(&src[ca * hw..]);
                }
                let asv = self.shape(*a).to_vec();
                let bsv = self.shape(*b).to_vec();
                Todo::Two(*a, Tensor::from_vec(&asv, da), *b, Tensor::from_vec(&bsv, db))
            }
            Op::MulConst(x, t) => {
                let dx = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(t.data().iter()).map(|(&gv, &tv)| gv * tv).collect(),
                );
                Todo::One(*x, dx)
            }
            Op::AddConst(x) => Todo::One(*x, g.clone()),
            Op::SpectralNorm { w, u, v, sigma } => {
                // dW = (g - <g, y> u v^T) / sigma, with y = W / sigma.
                let y = self.nodes[i].value.data();
                let mut dot = S::ZERO;
                for (gv, yv) in g.data().iter().zip(y.iter()) {
                    dot += *gv * *yv;
                }
                let (rows, cols) = (u.len(), v.len());
                let inv = S::ONE / *sigma;
                let mut dw = vec![S::ZERO; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dw[r * cols + c] = (g.data()[r * cols + c] - dot * u[r] * v[c]) * inv;
                    }
                }
                Todo::One(*w, Tensor::from_vec(&[rows, cols], dw))
            }
            Op::Embed { table, idx } => {
                let ts = self.shape(*table).to_vec();
                let f = ts[1];
                let mut dt = vec![S::ZERO; ts[0] * f];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..f {
                        dt[i * f + c] += g.data()[r * f + c];
                    }
                }
                Todo::One(*table, Tensor::from_vec(&ts, dt))
            }
            Op::Reshape(x) => {
                let xs = self.shape(*x).to_vec();
                Todo::One(*x, Tensor::from_vec(&xs, g.data().to_vec()))
            }
        };
        match todo {
            Todo::None => {}
            Todo::One(a, da) => self.accumulate(a, da),
            Todo::Two(a, da, b, db) => {
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
        }
        Ok(())
    }
}
