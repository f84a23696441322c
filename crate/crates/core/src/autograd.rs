//! Minimal reverse-mode differentiation over row-major `f64` matrices.
//!
//! A [`Graph`] records every operation eagerly (values are computed at
//! record time) and [`Graph::backward`] walks the record in reverse. All
//! tensors are 2-D; vectors are `1 x d` rows and scalars are `1 x 1`.
//!
//! Loss functions with closed-form gradients enter the graph through
//! [`Graph::custom`], which stores the local Jacobian-vector products for a
//! scalar output.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    QuickGelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    Custom {
        inputs: Vec<Var>,
        grads: Vec<Array2<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that requires one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

const GELU_ALPHA: f64 = 1.702;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-wise softmax; masked entries (`-inf`) come out as exactly zero.
pub fn softmax_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the value of `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add: shape");
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds a `1 x d` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row: bias must be 1 x d");
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// `x · σ(1.702 x)`
    pub fn quick_gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * sigmoid(GELU_ALPHA * x));
        let rg = self.rg(a);
        self.push(value, Op::QuickGelu(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.to_owned();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let value = &xhat * self.value(gain) + self.value(bias);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is masked out.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Var {
        let mut x = self.value(a).clone();
        if causal {
            for ((i, j), v) in x.indexed_iter_mut() {
                if j > i {
                    *v = f64::NEG_INFINITY;
                }
            }
        }
        let value = softmax_rows(x.view());
        let rg = self.rg(a);
        self.push(value, Op::Softmax(a), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceRows(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let rg = parts.iter().any(|v| self.rg(*v));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows: col mismatch");
        let rg = parts.iter().any(|v| self.rg(*v));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = self.value(table);
        let mut value = Array2::zeros((idx.len(), t.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            value.row_mut(r).assign(&t.row(i));
        }
        let rg = self.rg(table);
        self.push(value, Op::GatherRows(table, idx.to_vec()), rg)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean_rows: empty")
            .insert_axis(Axis(0));
        let rg = self.rg(a);
        self.push(value, Op::MeanRows(a), rg)
    }

    /// Scalar node whose gradient w.r.t. `inputs[i]` is `grads[i]`.
    pub fn custom(&mut self, value: f64, inputs: &[Var], grads: Vec<Array2<f64>>) -> Var {
        assert_eq!(inputs.len(), grads.len());
        for (v, g) in inputs.iter().zip(&grads) {
            assert_eq!(self.value(*v).dim(), g.dim(), "custom: gradient shape");
        }
        let rg = inputs.iter().any(|v| self.rg(*v));
        self.push(
            Array2::from_elem((1, 1), value),
            Op::Custom {
                inputs: inputs.to_vec(),
                grads,
            },
            rg,
        )
    }

    /// Sum of scalar nodes weighted by `weights`.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut value = 0.0;
        let mut inputs = Vec::with_capacity(terms.len());
        let mut grads = Vec::with_capacity(terms.len());
        for &(v, w) in terms {
            value += w * self.scalar(v);
            inputs.push(v);
            grads.push(Array2::from_elem((1, 1), w));
        }
        self.custom(value, &inputs, grads)
    }

    pub fn backward(&self, root: Var) -> Gradients {
        let n = root.0 + 1;
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; n];
        grads[root.0] = Some(Array2::ones(self.nodes[root.0].value.raw_dim()));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let gout = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(gout);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, gout.dot(&self.value(*b).t()));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&gout));
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, gout.dot(self.value(*b)));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, gout.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, gout.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, gout);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        acc(&mut grads, *row, gout.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, gout);
                    }
                }
                Op::Scale(a, s) => acc(&mut grads, *a, gout * *s),
                Op::QuickGelu(a) => {
                    let mut g = gout;
                    ndarray::Zip::from(&mut g).and(self.value(*a)).for_each(|g, &x| {
                        let sg = sigmoid(GELU_ALPHA * x);
                        *g *= sg + GELU_ALPHA * x * sg * (1.0 - sg);
                    });
                    acc(&mut grads, *a, g);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    if self.rg(*bias) {
                        acc(&mut grads, *bias, gout.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*gain) {
                        let g = (&gout * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, *gain, g);
                    }
                    if self.rg(*x) {
                        let dxhat = &gout * self.value(*gain);
                        let d = dxhat.ncols() as f64;
                        let mut dx = Array2::zeros(dxhat.raw_dim());
                        for r in 0..dxhat.nrows() {
                            let dh = dxhat.row(r);
                            let xh = xhat.row(r);
                            let m1 = dh.sum() / d;
                            let m2 = dh.dot(&xh) / d;
                            for c in 0..dxhat.ncols() {
                                dx[[r, c]] = inv_std[r] * (dh[c] - m1 - xh[c] * m2);
                            }
                        }
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut dx = &gout * y;
                    for (mut row, yr) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let dot: f64 = row.sum();
                        for (v, &yv) in row.iter_mut().zip(yr.iter()) {
                            *v -= yv * dot;
                        }
                    }
                    acc(&mut grads, *a, dx);
                }
                Op::SliceCols(a, start) => {
                    let mut g = Array2::zeros(self.value(*a).raw_dim());
                    g.slice_mut(s![.., *start..*start + gout.ncols()]).assign(&gout);
                    acc(&mut grads, *a, g);
                }
                Op::SliceRows(a, start) => {
                    let mut g = Array2::zeros(self.value(*a).raw_dim());
                    g.slice_mut(s![*start..*start + gout.nrows(), ..]).assign(&gout);
                    acc(&mut grads, *a, g);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if self.rg(*p) {
                            acc(&mut grads, *p, gout.slice(s![.., off..off + w]).to_owned());
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        if self.rg(*p) {
                            acc(&mut grads, *p, gout.slice(s![off..off + h, ..]).to_owned());
                        }
                        off += h;
                    }
                }
                Op::GatherRows(table, idx) => {
                    let mut g = Array2::zeros(self.value(*table).raw_dim());
                    for (r, &i) in idx.iter().enumerate() {
                        let mut row = g.row_mut(i);
                        row += &gout.row(r);
                    }
                    acc(&mut grads, *table, g);
                }
                Op::MeanRows(a) => {
                    let rows = self.value(*a).nrows();
                    let g = gout.broadcast(self.value(*a).raw_dim()).unwrap().to_owned() / rows as f64;
                    acc(&mut grads, *a, g);
                }
                Op::Custom { inputs, grads: local } => {
                    let up = gout[[0, 0]];
                    for (v, g) in inputs.iter().zip(local) {
                        if self.rg(*v) {
                            acc(&mut grads, *v, g * up);
                        }
                    }
                }
            }
        }
        Gradients { grads }
    }
}
